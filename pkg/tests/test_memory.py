from __future__ import annotations

from random import Random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from assocbench.builder import DeductionTuple
from assocbench.memory import (
    CHAIN_MEMORY,
    MemoryBase,
    MemoryEntry,
    StrategyError,
    append_chain,
    from_snapshot,
    new_memory,
    render,
    seed_examples,
    update_attention,
)

from conftest import build_two_group_corpus

W_R = 1.0
D_F = 0.2


def entry(concept, objects=(), weight=1.0):
    return MemoryEntry(concept, tuple(objects), weight)


# -- attention updates -------------------------------------------------------

def test_reinforce_adds_repetition_weight():
    base = MemoryBase("StructM", entries=(entry("metal", weight=1.0),))
    got = update_attention(base, {"metal"}, {"metal": ["kettle"]})
    assert got.entries[0].weight == 2.0
    assert got.entries[0].objects == ("kettle",)


def test_decay_and_insertion():
    base = MemoryBase("NLM", entries=(entry("furry", weight=1.0),))
    got = update_attention(base, {"metal"}, {"metal": ["kettle", "fence"]})
    weights = {e.concept: e.weight for e in got.entries}
    assert weights["furry"] == pytest.approx(0.8)
    assert weights["metal"] == 1.0


def test_eviction_at_zero_weight():
    base = MemoryBase("StructM", entries=(entry("ripe", weight=0.2),))
    once = update_attention(base, set())
    assert once.entries == ()  # 0.2 - 0.2 = 0.0 <= 0 evicts
    again = update_attention(once, set())
    assert again.entries == ()


def test_update_attention_wrong_strategy():
    for strategy in ("NoM", "ChainM"):
        with pytest.raises(StrategyError, match="no attention"):
            update_attention(new_memory(strategy), {"metal"})


def test_objects_deduplicated_and_capped():
    base = new_memory("StructM", objects_cap=3)
    base = update_attention(base, {"metal"}, {"metal": ["a", "b", "a"]})
    assert base.entries[0].objects == ("a", "b")
    base = update_attention(base, {"metal"}, {"metal": ["c", "d"]})
    assert base.entries[0].objects == ("b", "c", "d")  # oldest dropped at cap


# -- chain memory ------------------------------------------------------------

def test_append_chain_renders_collapsed():
    base = new_memory("ChainM")
    base = append_chain(base, "broccoli", "eat", "pizza")
    assert render(base, "affordance").endswith("broccoli->eat->pizza")
    base = append_chain(base, "pizza", "eat", "baked")
    assert render(base, "affordance").endswith("broccoli->eat->pizza->eat->baked")


def test_append_chain_wrong_strategy():
    with pytest.raises(StrategyError, match="no chain"):
        append_chain(new_memory("NLM"), "a", "eat", "b")


def test_append_chain_rejects_empty_tokens():
    with pytest.raises(StrategyError):
        append_chain(new_memory("ChainM"), "", "eat", "b")


def test_chain_grows_one_link_per_append():
    base = new_memory("ChainM")
    for i in range(5):
        base = append_chain(base, f"o{i}", "eat", f"o{i + 1}")
        assert len(base.chain) == i + 1


def test_chain_tail_limits_render():
    base = new_memory("ChainM", chain_tail=2)
    for i in range(5):
        base = append_chain(base, f"o{i}", "c", f"o{i + 1}")
    body = render(base, "attribute").splitlines()[1]
    assert body == "o3->c->o4->c->o5"


# -- rendering ---------------------------------------------------------------

def test_render_nom_empty():
    assert render(new_memory("NoM"), "attribute") == ""


def test_render_struct_dictionary_text():
    base = MemoryBase("StructM", entries=(entry("eat", ("sandwich", "pizza")),))
    assert render(base, "affordance") == "Given the memory: {'eat': ['sandwich', 'pizza']}"


def test_render_nlm_lines():
    base = MemoryBase("NLM", entries=(entry("eat", ("broccoli", "orange")),))
    text = render(base, "affordance")
    assert text.splitlines()[1] == "['broccoli', 'orange'] have eat affordance"


def test_render_orders_by_descending_weight():
    base = MemoryBase(
        "StructM",
        entries=(entry("metal", ("a",), 0.5), entry("furry", ("b",), 2.0)),
    )
    assert render(base, "attribute") == "Given the memory: {'furry': ['b'], 'metal': ['a']}"


def test_render_pure_function_of_state():
    base = MemoryBase("NLM", entries=(entry("eat", ("x", "y"), 1.4),))
    assert render(base, "affordance") == render(from_snapshot(base.snapshot()), "affordance")


def test_rendered_entries_never_nonpositive():
    base = MemoryBase(
        "StructM",
        entries=(entry("a", ("x",), 0.1), entry("b", ("y",), 1.0)),
    )
    base = update_attention(base, set())
    assert all(e.weight > 0 for e in base.entries)
    assert "'a'" not in render(base, "attribute")


# -- example seeding ---------------------------------------------------------

def test_seed_examples_folds_attention():
    corpus = build_two_group_corpus()
    examples = [
        DeductionTuple("m0", "m1", frozenset({"metal"})),
        DeductionTuple("m2", "m3", frozenset({"metal"})),
        DeductionTuple("m4", "m5", frozenset({"metal"})),
    ]
    base = seed_examples(new_memory("StructM"), examples, corpus)
    assert len(base.entries) == 1
    assert base.entries[0].weight == 3 * W_R
    assert len(base.entries[0].objects) == 6


def test_seed_examples_no_examples_no_change():
    base = new_memory("NLM")
    assert seed_examples(base, [], build_two_group_corpus()) == base


def test_seed_examples_nom_unchanged():
    corpus = build_two_group_corpus()
    examples = [DeductionTuple("m0", "m1", frozenset({"metal"}))]
    base = new_memory("NoM")
    assert seed_examples(base, examples, corpus) == base


def test_seed_examples_chain_prefers_requested_concept():
    corpus = build_two_group_corpus()
    examples = [DeductionTuple("m0", "m1", frozenset({"metal"}))]
    base = seed_examples(new_memory("ChainM"), examples, corpus, prefer="metal")
    assert base.chain == (("metal-thing-0", "metal", "metal-thing-1"),)


# -- weight trace law --------------------------------------------------------

def independent_fold(events: list[set[str]]) -> dict[str, float]:
    """Dict-based reimplementation of the reinforce/decay/evict dynamics."""
    weights: dict[str, float] = {}
    for evidence in events:
        for concept in list(weights):
            if concept in evidence:
                weights[concept] = weights[concept] + W_R
            else:
                weights[concept] = weights[concept] - D_F
        for concept in evidence:
            if concept not in weights:
                weights[concept] = W_R
        for concept in [c for c, w in weights.items() if w <= 0]:
            del weights[concept]
    return weights


@settings(max_examples=200, deadline=None)
@given(
    events=st.lists(
        st.sets(st.sampled_from(["a", "b", "c", "d"]), max_size=3), max_size=30
    )
)
def test_weight_trace_matches_independent_fold(events):
    base = new_memory("StructM")
    for evidence in events:
        base = update_attention(base, evidence)
    got = {e.concept: e.weight for e in base.entries}
    assert got == independent_fold(events)


def test_weight_trace_random_replay():
    rng = Random(2024)
    concepts = ["a", "b", "c", "d", "e"]
    for _ in range(200):
        events = [
            {c for c in concepts if rng.random() < 0.3} for _ in range(rng.randint(1, 40))
        ]
        base = new_memory("NLM")
        for evidence in events:
            base = update_attention(base, evidence)
        assert {e.concept: e.weight for e in base.entries} == independent_fold(events)
