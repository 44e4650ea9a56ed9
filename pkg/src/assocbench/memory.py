"""Per-round memory strategies carrying deduced evidence between steps.

Four strategies: NoM keeps nothing; StructM and NLM keep concept->objects
entries with an attention weight that is reinforced by ``w_r`` whenever the
concept shows up in step evidence and decays by ``d_f`` otherwise (entries at
weight <= 0 are forgotten, i.e. evicted); ChainM keeps the inference history
as an object->concept->object chain.

Operations return new :class:`MemoryBase` values; a base is never mutated,
which keeps per-step snapshots free.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Mapping

from .builder import DeductionTuple
from .corpus import Corpus

NO_MEMORY = "NoM"
STRUCT_MEMORY = "StructM"
NATURAL_LANGUAGE_MEMORY = "NLM"
CHAIN_MEMORY = "ChainM"
STRATEGIES = (NO_MEMORY, STRUCT_MEMORY, NATURAL_LANGUAGE_MEMORY, CHAIN_MEMORY)
ATTENTION_STRATEGIES = (STRUCT_MEMORY, NATURAL_LANGUAGE_MEMORY)

DEFAULT_REPETITION_WEIGHT = 1.0
DEFAULT_FORGETTING_DECREMENT = 0.2
DEFAULT_OBJECTS_CAP = 12
DEFAULT_CHAIN_TAIL = 40

STRUCT_INSTRUCTION = "Given the memory: "
NL_INSTRUCTION = (
    "Before this question, you have learnt that related pictures may have "
    "the following {kind}:"
)


class StrategyError(Exception):
    """Operation called on a strategy that does not support it."""


@dataclass(frozen=True)
class MemoryEntry:
    """One remembered concept with its supporting object names and weight."""

    concept: str
    objects: tuple[str, ...]
    weight: float


@dataclass(frozen=True)
class MemoryBase:
    """Strategy-tagged memory state for one running round."""

    strategy: str
    entries: tuple[MemoryEntry, ...] = ()
    chain: tuple[tuple[str, str, str], ...] = ()
    w_r: float = DEFAULT_REPETITION_WEIGHT
    d_f: float = DEFAULT_FORGETTING_DECREMENT
    objects_cap: int = DEFAULT_OBJECTS_CAP
    chain_tail: int = DEFAULT_CHAIN_TAIL

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise StrategyError(f"unknown memory strategy {self.strategy!r}")

    def snapshot(self) -> dict:
        """JSON-ready view of the state, stored per step in round logs."""
        return {
            "strategy": self.strategy,
            "entries": [
                {"concept": e.concept, "objects": list(e.objects), "weight": e.weight}
                for e in self.entries
            ],
            "chain": [list(link) for link in self.chain],
        }


def new_memory(
    strategy: str,
    w_r: float = DEFAULT_REPETITION_WEIGHT,
    d_f: float = DEFAULT_FORGETTING_DECREMENT,
    objects_cap: int = DEFAULT_OBJECTS_CAP,
    chain_tail: int = DEFAULT_CHAIN_TAIL,
) -> MemoryBase:
    return MemoryBase(
        strategy=strategy, w_r=w_r, d_f=d_f, objects_cap=objects_cap, chain_tail=chain_tail
    )


def from_snapshot(snapshot: dict) -> MemoryBase:
    """Rebuild a memory state from a round-log snapshot for offline replay."""
    return MemoryBase(
        strategy=snapshot["strategy"],
        entries=tuple(
            MemoryEntry(e["concept"], tuple(e["objects"]), float(e["weight"]))
            for e in snapshot.get("entries", [])
        ),
        chain=tuple(tuple(link) for link in snapshot.get("chain", [])),
    )


def _merge_objects(existing: tuple[str, ...], new: Iterable[str], cap: int) -> tuple[str, ...]:
    merged = list(existing)
    for name in new:
        if name and name not in merged:
            merged.append(name)
    return tuple(merged[-cap:])


def update_attention(
    base: MemoryBase,
    evidence: Iterable[str],
    new_objects: Mapping[str, Iterable[str]] | None = None,
) -> MemoryBase:
    """Reinforce entries named in ``evidence``, decay the rest, evict at <= 0.

    Concepts in the evidence without an entry are inserted at weight ``w_r``;
    their supporting object names come from ``new_objects``.
    """
    if base.strategy not in ATTENTION_STRATEGIES:
        raise StrategyError(f"strategy {base.strategy} has no attention")
    evidence = set(evidence)
    new_objects = dict(new_objects or {})

    updated: list[MemoryEntry] = []
    for entry in base.entries:
        if entry.concept in evidence:
            updated.append(
                MemoryEntry(
                    concept=entry.concept,
                    objects=_merge_objects(
                        entry.objects, new_objects.get(entry.concept, ()), base.objects_cap
                    ),
                    weight=entry.weight + base.w_r,
                )
            )
        else:
            updated.append(replace(entry, weight=entry.weight - base.d_f))
    known = {e.concept for e in base.entries}
    for concept in sorted(evidence - known):
        updated.append(
            MemoryEntry(
                concept=concept,
                objects=_merge_objects((), new_objects.get(concept, ()), base.objects_cap),
                weight=base.w_r,
            )
        )
    return replace(base, entries=tuple(e for e in updated if e.weight > 0))


def append_chain(base: MemoryBase, obj1: str, concept: str, obj2: str) -> MemoryBase:
    """Extend the chain with one ``obj1 -> concept -> obj2`` link."""
    if base.strategy != CHAIN_MEMORY:
        raise StrategyError(f"strategy {base.strategy} has no chain")
    if not (obj1 and concept and obj2):
        raise StrategyError("chain link tokens must be nonempty")
    return replace(base, chain=base.chain + ((obj1, concept, obj2),))


def _chain_text(chain: tuple[tuple[str, str, str], ...], tail: int) -> str:
    tokens: list[str] = []
    for obj1, concept, obj2 in chain[-tail:]:
        # A link starting at the previous link's end collapses the shared
        # object: "...->pizza" + (pizza, eat, baked) -> "...->pizza->eat->baked".
        if tokens and tokens[-1] == obj1:
            tokens.extend([concept, obj2])
        else:
            tokens.extend([obj1, concept, obj2])
    return "->".join(tokens)


def _ranked(entries: tuple[MemoryEntry, ...]) -> list[MemoryEntry]:
    return sorted(entries, key=lambda e: -e.weight)


def render(base: MemoryBase, kind: str) -> str:
    """Memory text for the prompt: instruction plus body, or empty.

    NoM always renders empty; the other strategies render empty while they
    hold no state (nothing learnt yet).
    """
    if base.strategy == NO_MEMORY:
        return ""
    if base.strategy == STRUCT_MEMORY:
        if not base.entries:
            return ""
        items = ", ".join(
            "'{}': [{}]".format(e.concept, ", ".join(f"'{o}'" for o in e.objects))
            for e in _ranked(base.entries)
        )
        return STRUCT_INSTRUCTION + "{" + items + "}"
    if base.strategy == NATURAL_LANGUAGE_MEMORY:
        if not base.entries:
            return ""
        lines = [
            "[{}] have {} {}".format(
                ", ".join(f"'{o}'" for o in e.objects), e.concept, kind
            )
            for e in _ranked(base.entries)
        ]
        return NL_INSTRUCTION.format(kind=kind) + "\n" + "\n".join(lines)
    if not base.chain:
        return ""
    return NL_INSTRUCTION.format(kind=kind) + "\n" + _chain_text(base.chain, base.chain_tail)


def seed_examples(
    base: MemoryBase,
    examples: list[DeductionTuple],
    corpus: Corpus,
    prefer: str | None = None,
) -> MemoryBase:
    """Fold ground-truth example pairs into the memory before a round starts.

    StructM/NLM absorb each example through the normal attention update; for
    ChainM each example appends one link whose concept is ``prefer`` when the
    pair shares it, else the alphabetically first shared concept.
    """
    if base.strategy == NO_MEMORY:
        return base
    for example in examples:
        anchor = corpus.sample(example.anchor).display_name
        positive = corpus.sample(example.positive).display_name
        if base.strategy == CHAIN_MEMORY:
            if prefer is not None and prefer in example.shared:
                concept = prefer
            else:
                concept = sorted(example.shared)[0]
            base = append_chain(base, anchor, concept, positive)
        else:
            base = update_attention(
                base,
                example.shared,
                {c: (anchor, positive) for c in example.shared},
            )
    return base
