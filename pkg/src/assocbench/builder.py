"""Association-set construction: pair labeling, candidate sampling, round plans.

Two samples form an association pair (label 1) when their label sets
intersect; they are a negative pair (label 0) only when the sets are fully
disjoint. Pairs sharing some label but not the chain concept are neither and
are never sampled as candidates.

All sampling is driven by explicit ``random.Random`` streams so that a
(corpus, plan, seed) triple fully determines the generated candidate stream.
Pools are sorted by sample id before drawing, which makes every draw
replayable by an independent enumerator.
"""

from __future__ import annotations

from collections.abc import Set
from dataclasses import dataclass
from random import Random

from .corpus import Corpus

KIND_SINGLE_STEP = "single_step"
KIND_SYNCHRONOUS = "synchronous"
KIND_ASYNCHRONOUS = "asynchronous"
ROUND_KINDS = (KIND_SINGLE_STEP, KIND_SYNCHRONOUS, KIND_ASYNCHRONOUS)

DEFAULT_CAP = 500
DEFAULT_SEGMENT_LENGTH = 2


class BuilderError(Exception):
    """Invalid construction request."""


class ChainInfeasible(BuilderError):
    """A requested chain concept cannot support even one step."""


class PoolExhausted(BuilderError):
    """No eligible candidate remains; ends a round as 'exhausted'."""

    def __init__(self, pool: str, step_index: int, query: str) -> None:
        super().__init__(f"{pool} pool empty at step {step_index} for query {query!r}")
        self.pool = pool
        self.step_index = step_index
        self.query = query


def pair_label(y_i: Set[str], y_j: Set[str]) -> int:
    """1 when the label sets share at least one concept, else 0."""
    return 1 if set(y_i) & set(y_j) else 0


@dataclass(frozen=True)
class AssociationSets:
    """Per-anchor positive and negative candidate sets.

    ``positives_short``/``negatives_short`` flag pools smaller than the
    requested size; in that case the whole pool is returned.
    """

    anchor: str
    positives: tuple[str, ...]
    negatives: tuple[str, ...]
    positives_short: bool = False
    negatives_short: bool = False


def build_sets(corpus: Corpus, anchor: str, k: int, l: int, seed) -> AssociationSets:
    """Sample up to ``k`` positives and ``l`` negatives for ``anchor``.

    Uniform sampling without replacement from the eligible pools, seeded.
    """
    if k < 0 or l < 0:
        raise BuilderError("k and l must be nonnegative")
    anchor_sample = corpus.sample(anchor)
    pos_pool = sorted(
        s.id for s in corpus if s.id != anchor and (s.labels & anchor_sample.labels)
    )
    neg_pool = [s for s in corpus.disjoint_from(anchor_sample.labels) if s != anchor]
    rng = Random(f"{seed}|sets")
    positives = tuple(rng.sample(pos_pool, min(k, len(pos_pool))))
    negatives = tuple(rng.sample(neg_pool, min(l, len(neg_pool))))
    return AssociationSets(
        anchor=anchor,
        positives=positives,
        negatives=negatives,
        positives_short=len(pos_pool) < k,
        negatives_short=len(neg_pool) < l,
    )


@dataclass(frozen=True)
class SharedConceptSet:
    """Every concept that appears in at least one pairwise intersection."""

    concepts: frozenset[str]

    def __contains__(self, concept: str) -> bool:
        return concept in self.concepts


def shared_concepts(corpus: Corpus) -> SharedConceptSet:
    """Union over all sample pairs of their label intersections.

    A concept sits in some intersection exactly when at least two samples
    carry it, so this counts label occurrences instead of enumerating pairs.
    """
    shared = frozenset(
        c for c in corpus.vocabulary.concepts if len(corpus.concept_index(c)) >= 2
    )
    return SharedConceptSet(concepts=shared)


@dataclass(frozen=True)
class DeductionTuple:
    """An association pair together with its exact shared-concept set."""

    anchor: str
    positive: str
    shared: frozenset[str]


def deduction_tuple(corpus: Corpus, anchor: str, positive: str) -> DeductionTuple:
    shared = corpus.sample(anchor).labels & corpus.sample(positive).labels
    if not shared:
        raise BuilderError(f"not an association pair: {anchor!r} / {positive!r}")
    return DeductionTuple(anchor=anchor, positive=positive, shared=frozenset(shared))


@dataclass(frozen=True)
class RoundPlan:
    """Configuration of one chain round: schedule, cap, seed, start sample."""

    kind: str
    concept_schedule: tuple[str, ...]
    cap: int
    seed: str | int
    start: str
    example_count: int

    @property
    def concepts(self) -> tuple[str, ...]:
        """Distinct scheduled concepts in first-appearance order."""
        seen: dict[str, None] = {}
        for c in self.concept_schedule:
            seen.setdefault(c)
        return tuple(seen)

    def as_dict(self) -> dict:
        return {
            "kind": self.kind,
            "concept_schedule": list(self.concept_schedule),
            "cap": self.cap,
            "seed": self.seed,
            "start": self.start,
            "example_count": self.example_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RoundPlan":
        return cls(
            kind=d["kind"],
            concept_schedule=tuple(d["concept_schedule"]),
            cap=int(d["cap"]),
            seed=d["seed"],
            start=d["start"],
            example_count=int(d["example_count"]),
        )


def make_round(
    corpus: Corpus,
    kind: str,
    concepts: list[str] | tuple[str, ...],
    cap: int,
    seed,
    example_count: int = 3,
    segment_length: int = DEFAULT_SEGMENT_LENGTH,
) -> RoundPlan:
    """Build a round plan with its concept schedule and start sample.

    Synchronous (and single-step) rounds repeat one concept for every step.
    Asynchronous rounds cycle through the given concepts in periodic segments
    of ``segment_length`` steps each; the schedule must cover all of them.
    """
    if kind not in ROUND_KINDS:
        raise BuilderError(f"unknown round kind {kind!r}")
    if cap < 1:
        raise BuilderError("cap must be positive")
    if example_count < 0:
        raise BuilderError("example_count must be nonnegative")
    concepts = tuple(concepts)
    if kind in (KIND_SINGLE_STEP, KIND_SYNCHRONOUS) and len(concepts) != 1:
        raise BuilderError(f"{kind} rounds take exactly one concept")
    if kind == KIND_ASYNCHRONOUS:
        if len(concepts) < 2:
            raise BuilderError("asynchronous rounds take at least two concepts")
        pool = shared_concepts(corpus)
        missing = [c for c in concepts if c not in pool]
        if missing:
            raise ChainInfeasible(
                f"concepts {missing} are not shared by any sample pair"
            )
    for c in concepts:
        if len(corpus.concept_index(c)) < 2:
            raise ChainInfeasible(
                f"chain infeasible: concept {c!r} has fewer than 2 samples"
            )

    if kind == KIND_ASYNCHRONOUS:
        if segment_length < 1:
            raise BuilderError("segment_length must be positive")
        schedule = tuple(
            concepts[(t // segment_length) % len(concepts)] for t in range(cap)
        )
        if set(schedule) != set(concepts):
            raise BuilderError(
                "cap too small: schedule does not visit every concept"
            )
    else:
        schedule = concepts * cap

    rng = Random(f"{seed}|plan")
    start = rng.choice(sorted(corpus.concept_index(schedule[0])))
    return RoundPlan(
        kind=kind,
        concept_schedule=schedule,
        cap=cap,
        seed=seed,
        start=start,
        example_count=example_count,
    )


@dataclass(frozen=True)
class StepCandidates:
    """One step's question: query plus two options in presentation order."""

    step_index: int
    query: str
    option1: str
    option2: str
    correct: int  # 1 or 2: which presented option is the positive

    @property
    def positive(self) -> str:
        return self.option1 if self.correct == 1 else self.option2

    @property
    def negative(self) -> str:
        return self.option2 if self.correct == 1 else self.option1


def candidate_step(
    corpus: Corpus, plan: RoundPlan, t: int, query: str, rng: Random
) -> StepCandidates:
    """Draw the positive/negative pair for step ``t`` and shuffle their order.

    The positive is uniform over samples that carry the scheduled concept and
    share at least one label with the query (on synchronous schedules the
    query itself carries the concept, so the second condition is free); the
    negative is uniform over samples sharing no label at all with the query.
    Raises :class:`PoolExhausted` when either pool is empty, which ends the
    round distinctly from a wrong answer.
    """
    if not 0 <= t < len(plan.concept_schedule):
        raise BuilderError(f"step index {t} outside schedule")
    concept = plan.concept_schedule[t]
    query_sample = corpus.sample(query)

    pos_pool = sorted(
        sid
        for sid in corpus.concept_index(concept) - {query}
        if corpus.sample(sid).labels & query_sample.labels
    )
    if not pos_pool:
        raise PoolExhausted("positive", t, query)
    neg_pool = corpus.disjoint_from(query_sample.labels)
    if not neg_pool:
        raise PoolExhausted("negative", t, query)

    positive = rng.choice(pos_pool)
    negative = rng.choice(neg_pool)
    if rng.random() < 0.5:
        return StepCandidates(t, query, positive, negative, correct=1)
    return StepCandidates(t, query, negative, positive, correct=2)
