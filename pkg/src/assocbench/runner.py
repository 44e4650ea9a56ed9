"""Chain execution: single-step trials and synchronous/asynchronous rounds.

A round walks the plan's concept schedule: render the association prompt with
the current memory, ask the backend, and on a correct choice run a deduction
step whose (possibly wrong) output becomes the memory evidence before the
chosen positive becomes the next query. A wrong choice ends the round; the
final step count is the number of correct choices before termination.

Every decision derives from named RNG streams off the plan seed, so a
(corpus, plan, backend seed) triple fully determines the round.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path
from random import Random
from typing import Sequence

from .builder import (
    KIND_SINGLE_STEP,
    ChainInfeasible,
    DeductionTuple,
    PoolExhausted,
    RoundPlan,
    StepCandidates,
    candidate_step,
    deduction_tuple,
)
from .corpus import Corpus
from .memory import (
    ATTENTION_STRATEGIES,
    CHAIN_MEMORY,
    DEFAULT_FORGETTING_DECREMENT,
    DEFAULT_REPETITION_WEIGHT,
    MemoryBase,
    append_chain,
    new_memory,
    seed_examples,
    update_attention,
)
from .modelio import BackendRefusal, ModelClient, TransportError, complete
from .prompt import (
    DEFAULT_TEMPLATES,
    OPTION1,
    OPTION2,
    UNPARSEABLE,
    PromptTemplates,
    parse_choice,
    parse_concepts,
    render_association_prompt,
    render_deduction_prompt,
    strict_retry,
)

TERMINAL_WRONG_ANSWER = "wrong_answer"
TERMINAL_CAP_REACHED = "cap_reached"
TERMINAL_EXHAUSTED = "exhausted"
TERMINAL_TRANSPORT = "transport"

ROUND_LOG_SCHEMA = "assocbench.round/1"
SINGLE_LOG_SCHEMA = "assocbench.single/1"


@dataclass(frozen=True)
class StepRecord:
    """Outcome of one association step (plus its deduction, when run).

    ``memory_snapshot`` is the memory state rendered into this step's prompt,
    i.e. before the step's evidence was absorbed. ``deduction_correct`` is
    None when no deduction ran (wrong answer, or a human session).
    """

    t: int
    concept: str
    query: str
    option1: str
    option2: str
    correct_option: int
    chosen_option: int  # 1, 2, or 0 when the answer stayed unparseable
    association_correct: bool
    deduced: frozenset[str]
    deduction_correct: bool | None
    memory_snapshot: dict
    raw_association: str
    raw_deduction: str | None
    latency: float

    def as_dict(self) -> dict:
        return {
            "t": self.t,
            "concept": self.concept,
            "query": self.query,
            "option1": self.option1,
            "option2": self.option2,
            "correct_option": self.correct_option,
            "chosen_option": self.chosen_option,
            "association_correct": self.association_correct,
            "deduced": sorted(self.deduced),
            "deduction_correct": self.deduction_correct,
            "memory_snapshot": self.memory_snapshot,
            "raw_association": self.raw_association,
            "raw_deduction": self.raw_deduction,
            "latency": self.latency,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StepRecord":
        return cls(
            t=int(d["t"]),
            concept=d["concept"],
            query=d["query"],
            option1=d["option1"],
            option2=d["option2"],
            correct_option=int(d["correct_option"]),
            chosen_option=int(d["chosen_option"]),
            association_correct=bool(d["association_correct"]),
            deduced=frozenset(d["deduced"]),
            deduction_correct=d["deduction_correct"],
            memory_snapshot=d["memory_snapshot"],
            raw_association=d["raw_association"],
            raw_deduction=d["raw_deduction"],
            latency=float(d["latency"]),
        )


@dataclass(frozen=True)
class RoundResult:
    """One executed round: its plan, step records, and how it ended."""

    plan: RoundPlan
    steps: tuple[StepRecord, ...]
    final_step_count: int
    terminal: str

    def as_dict(self) -> dict:
        return {
            "plan": self.plan.as_dict(),
            "steps": [s.as_dict() for s in self.steps],
            "final_step_count": self.final_step_count,
            "terminal": self.terminal,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RoundResult":
        return cls(
            plan=RoundPlan.from_dict(d["plan"]),
            steps=tuple(StepRecord.from_dict(s) for s in d["steps"]),
            final_step_count=int(d["final_step_count"]),
            terminal=d["terminal"],
        )


def ground_truth_examples(
    corpus: Corpus, concepts: Sequence[str], count: int, rng: Random
) -> list[DeductionTuple]:
    """Draw ground-truth example pairs, cycling through the chain concepts."""
    examples: list[DeductionTuple] = []
    for i in range(count):
        concept = concepts[i % len(concepts)]
        pool = sorted(corpus.concept_index(concept))
        if len(pool) < 2:
            raise ChainInfeasible(
                f"chain infeasible: concept {concept!r} has fewer than 2 samples"
            )
        anchor = rng.choice(pool)
        positive = rng.choice([sid for sid in pool if sid != anchor])
        examples.append(deduction_tuple(corpus, anchor, positive))
    return examples


def seeded_memory(
    corpus: Corpus,
    strategy: str,
    concepts: Sequence[str],
    example_count: int,
    rng: Random,
    w_r: float = DEFAULT_REPETITION_WEIGHT,
    d_f: float = DEFAULT_FORGETTING_DECREMENT,
) -> tuple[MemoryBase, list[DeductionTuple]]:
    """Fresh memory pre-loaded with ground-truth examples for the concepts."""
    base = new_memory(strategy, w_r=w_r, d_f=d_f)
    examples = ground_truth_examples(corpus, concepts, example_count, rng)
    for i, example in enumerate(examples):
        base = seed_examples(base, [example], corpus, prefer=concepts[i % len(concepts)])
    return base, examples


def deduct_step(
    corpus: Corpus,
    query: str,
    chosen_positive: str,
    chain_concept: str,
    client: ModelClient,
    templates: PromptTemplates = DEFAULT_TEMPLATES,
) -> tuple[frozenset[str], bool, str]:
    """Ask for the pair's shared concepts; correct iff the scheduled one is named."""
    vocab = corpus.vocabulary
    truth = deduction_tuple(corpus, query, chosen_positive)
    parts = render_deduction_prompt(
        vocab.kind,
        vocab,
        corpus.sample(query).image_ref,
        corpus.sample(chosen_positive).image_ref,
        templates,
    )
    if hasattr(client, "prime_deduction"):
        client.prime_deduction(query, chosen_positive, truth.shared)
    raw = complete(client, parts)
    deduced = parse_concepts(raw, vocab).concepts
    return deduced, chain_concept in deduced, raw


def _absorb_evidence(
    base: MemoryBase, corpus: Corpus, query: str, positive: str, deduced: frozenset[str]
) -> MemoryBase:
    """Fold the step's deduced evidence (right or wrong) into the memory."""
    if base.strategy in ATTENTION_STRATEGIES:
        names = (
            corpus.sample(query).display_name,
            corpus.sample(positive).display_name,
        )
        return update_attention(base, deduced, {c: names for c in deduced})
    if base.strategy == CHAIN_MEMORY and deduced:
        return append_chain(
            base,
            corpus.sample(query).display_name,
            sorted(deduced)[0],
            corpus.sample(positive).display_name,
        )
    return base


def _run_one_step(
    corpus: Corpus,
    base: MemoryBase,
    cands: StepCandidates,
    concept: str,
    client: ModelClient,
    templates: PromptTemplates,
) -> tuple[StepRecord, MemoryBase]:
    """Execute one association step plus its deduction against the client."""
    kind = corpus.vocabulary.kind
    parts = render_association_prompt(
        base,
        kind,
        corpus.sample(cands.query).image_ref,
        corpus.sample(cands.option1).image_ref,
        corpus.sample(cands.option2).image_ref,
        templates,
    )
    snapshot = base.snapshot()
    if hasattr(client, "prime_association"):
        client.prime_association(cands)
    started = time.monotonic()
    raw = complete(client, parts)
    parsed = parse_choice(raw)
    if parsed.choice == UNPARSEABLE:
        raw = complete(client, strict_retry(parts))
        parsed = parse_choice(raw)
    latency = time.monotonic() - started

    chosen = 1 if parsed.choice == OPTION1 else 2 if parsed.choice == OPTION2 else 0
    correct = chosen == cands.correct
    deduced: frozenset[str] = frozenset()
    deduction_correct: bool | None = None
    raw_deduction: str | None = None
    if correct:
        deduced, deduction_correct, raw_deduction = deduct_step(
            corpus, cands.query, cands.positive, concept, client, templates
        )
        base = _absorb_evidence(base, corpus, cands.query, cands.positive, deduced)
    record = StepRecord(
        t=cands.step_index,
        concept=concept,
        query=cands.query,
        option1=cands.option1,
        option2=cands.option2,
        correct_option=cands.correct,
        chosen_option=chosen,
        association_correct=correct,
        deduced=deduced,
        deduction_correct=deduction_correct,
        memory_snapshot=snapshot,
        raw_association=raw,
        raw_deduction=raw_deduction,
        latency=latency,
    )
    return record, base


def run_chain(
    corpus: Corpus,
    plan: RoundPlan,
    client: ModelClient,
    strategy: str,
    w_r: float = DEFAULT_REPETITION_WEIGHT,
    d_f: float = DEFAULT_FORGETTING_DECREMENT,
    templates: PromptTemplates = DEFAULT_TEMPLATES,
) -> RoundResult:
    """Execute one round to termination."""
    if hasattr(client, "begin_round"):
        client.begin_round(plan.seed)
    rng = Random(f"{plan.seed}|steps")
    base, _ = seeded_memory(
        corpus,
        strategy,
        plan.concepts,
        plan.example_count,
        Random(f"{plan.seed}|examples"),
        w_r=w_r,
        d_f=d_f,
    )

    steps: list[StepRecord] = []
    query = plan.start
    t = 0
    while True:
        if t >= plan.cap:
            terminal = TERMINAL_CAP_REACHED
            break
        concept = plan.concept_schedule[t]
        try:
            cands = candidate_step(corpus, plan, t, query, rng)
        except PoolExhausted:
            terminal = TERMINAL_EXHAUSTED
            break
        try:
            record, base = _run_one_step(corpus, base, cands, concept, client, templates)
        except (TransportError, BackendRefusal):
            terminal = TERMINAL_TRANSPORT
            break
        steps.append(record)
        if not record.association_correct:
            terminal = TERMINAL_WRONG_ANSWER
            break
        query = cands.positive
        t += 1

    final = sum(1 for r in steps if r.association_correct)
    return RoundResult(plan=plan, steps=tuple(steps), final_step_count=final, terminal=terminal)


def run_single_step(
    corpus: Corpus,
    concept: str,
    client: ModelClient,
    strategy: str,
    n_trials: int,
    seed,
    example_count: int = 3,
    w_r: float = DEFAULT_REPETITION_WEIGHT,
    d_f: float = DEFAULT_FORGETTING_DECREMENT,
    templates: PromptTemplates = DEFAULT_TEMPLATES,
) -> list[StepRecord]:
    """Independent one-step trials, each with fresh ground-truth memory."""
    pool = sorted(corpus.concept_index(concept))
    if len(pool) < 2:
        raise ChainInfeasible(
            f"chain infeasible: concept {concept!r} has fewer than 2 samples"
        )
    plan = RoundPlan(
        kind=KIND_SINGLE_STEP,
        concept_schedule=(concept,),
        cap=1,
        seed=seed,
        start=pool[0],
        example_count=example_count,
    )
    rng = Random(f"{seed}|single")
    records: list[StepRecord] = []
    for _ in range(n_trials):
        query = rng.choice(pool)
        base, _ = seeded_memory(
            corpus, strategy, (concept,), example_count, rng, w_r=w_r, d_f=d_f
        )
        cands = candidate_step(corpus, plan, 0, query, rng)
        record, _ = _run_one_step(corpus, base, cands, concept, client, templates)
        records.append(record)
    return records


def write_round_log(result: RoundResult, path: str | Path, meta: dict | None = None) -> None:
    payload = {"schema": ROUND_LOG_SCHEMA, "meta": dict(meta or {})}
    payload.update(result.as_dict())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_round_log(path: str | Path) -> tuple[RoundResult, dict]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("schema") != ROUND_LOG_SCHEMA:
        raise ValueError(f"{path}: not a round log")
    return RoundResult.from_dict(payload), payload.get("meta", {})


def write_single_log(
    records: Sequence[StepRecord], concept: str, path: str | Path, meta: dict | None = None
) -> None:
    payload = {
        "schema": SINGLE_LOG_SCHEMA,
        "meta": dict(meta or {}),
        "concept": concept,
        "records": [r.as_dict() for r in records],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_single_log(path: str | Path) -> tuple[list[StepRecord], str, dict]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("schema") != SINGLE_LOG_SCHEMA:
        raise ValueError(f"{path}: not a single-step log")
    records = [StepRecord.from_dict(r) for r in payload["records"]]
    return records, payload["concept"], payload.get("meta", {})
