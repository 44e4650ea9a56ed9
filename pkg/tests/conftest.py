from __future__ import annotations

from pathlib import Path
from random import Random

import pytest

from assocbench.corpus import ConceptVocabulary, Corpus, Sample, load_manifest

DATA_DIR = Path(__file__).parent / "data"
GOLDEN_DIR = Path(__file__).parent / "golden"

ATTRIBUTES = ("metal", "ripe", "fresh", "natural", "cooked", "painted", "rusty", "furry")


@pytest.fixture
def attr_corpus() -> Corpus:
    return load_manifest(DATA_DIR / "manifest_attribute.jsonl")


def build_random_corpus(n: int = 200, seed: int = 1234, max_labels: int = 3) -> Corpus:
    """Synthetic corpus with 1..max_labels random attribute labels per sample."""
    rng = Random(seed)
    vocab = ConceptVocabulary("attribute", ATTRIBUTES)
    samples = []
    for i in range(n):
        labels = frozenset(rng.sample(ATTRIBUTES, rng.randint(1, max_labels)))
        samples.append(
            Sample(
                id=f"r{i:04d}",
                image_ref=f"images/r{i:04d}.jpg",
                display_name=f"object{i}",
                labels=labels,
                width=320,
                height=240,
            )
        )
    return Corpus(samples, vocab)


def build_two_group_corpus(per_group: int = 6) -> Corpus:
    """Two label-disjoint groups: chains on one concept can never exhaust."""
    vocab = ConceptVocabulary("attribute", ("metal", "furry"))
    samples = [
        Sample(f"m{i}", f"images/m{i}.jpg", f"metal-thing-{i}", frozenset({"metal"}), 300, 300)
        for i in range(per_group)
    ]
    samples += [
        Sample(f"f{i}", f"images/f{i}.jpg", f"furry-thing-{i}", frozenset({"furry"}), 300, 300)
        for i in range(per_group)
    ]
    return Corpus(samples, vocab)


@pytest.fixture
def random_corpus() -> Corpus:
    return build_random_corpus()


@pytest.fixture
def two_group_corpus() -> Corpus:
    return build_two_group_corpus()


class GroundTruthClient:
    """Test double that always answers with the primed ground truth."""

    id = "ground-truth"
    max_images = 8

    def __init__(self, deduction_fn=None):
        self._cands = None
        self._shared = None
        self._deduction_fn = deduction_fn

    def prime_association(self, candidates):
        self._cands = candidates

    def prime_deduction(self, query, positive, true_shared):
        self._shared = true_shared

    def complete(self, parts, deadline=None):
        if len(parts.images) == 3:
            return f"Image{self._cands.correct}"
        if self._deduction_fn is not None:
            return self._deduction_fn(self._shared)
        return ", ".join(sorted(self._shared))
