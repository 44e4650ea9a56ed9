"""Labeled-image corpus ingestion, validation, and concept indexing.

A corpus is loaded from a line-delimited JSON manifest: the first record is a
vocabulary header ``{"kind": ..., "concepts": [...]}``, every following record
is one sample ``{"id", "image", "name", "labels", "width"?, "height"?}``.
Invalid records are dropped with a diagnostic; they never abort the load.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

CONCEPT_KINDS = ("attribute", "affordance", "action")


class CorpusError(Exception):
    """Manifest cannot be turned into a usable corpus."""


@dataclass(frozen=True)
class Sample:
    """One corpus item: an image reference plus its concept labels."""

    id: str
    image_ref: str
    display_name: str
    labels: frozenset[str]
    width: int | None = None
    height: int | None = None

    @property
    def resolution_known(self) -> bool:
        return self.width is not None and self.height is not None

    @property
    def pixels(self) -> int | None:
        if not self.resolution_known:
            return None
        return self.width * self.height


@dataclass(frozen=True)
class ConceptVocabulary:
    """Ordered list of distinct concept identifiers of one kind."""

    kind: str
    concepts: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.kind not in CONCEPT_KINDS:
            raise CorpusError(f"unknown concept kind {self.kind!r}")
        if len(set(self.concepts)) != len(self.concepts):
            raise CorpusError("vocabulary concepts must be distinct")
        if not self.concepts:
            raise CorpusError("vocabulary is empty")

    def __contains__(self, concept: str) -> bool:
        return concept in self.concepts


@dataclass(frozen=True)
class Diagnostic:
    """One dropped/suspect manifest record, reported with its line number."""

    line: int
    record_id: str | None
    message: str

    def as_dict(self) -> dict:
        return {"line": self.line, "id": self.record_id, "message": self.message}


class Corpus:
    """Immutable set of validated samples plus their vocabulary.

    Safe for shared concurrent reads; all mutating state is built at
    construction time except a memoized negative-pool cache, which is
    idempotent to race on.
    """

    def __init__(
        self,
        samples: list[Sample],
        vocabulary: ConceptVocabulary,
        source_meta: dict | None = None,
    ) -> None:
        self.samples: tuple[Sample, ...] = tuple(samples)
        self.vocabulary = vocabulary
        self.source_meta: dict = dict(source_meta or {})
        self._by_id: dict[str, Sample] = {}
        self._by_concept: dict[str, set[str]] = {c: set() for c in vocabulary.concepts}
        for s in self.samples:
            if s.id in self._by_id:
                raise CorpusError(f"duplicate sample id {s.id!r}")
            if not s.labels:
                raise CorpusError(f"sample {s.id!r} has no labels")
            for lab in s.labels:
                if lab not in vocabulary:
                    raise CorpusError(f"sample {s.id!r} has unknown label {lab!r}")
                self._by_concept[lab].add(s.id)
            self._by_id[s.id] = s
        self._disjoint_cache: dict[frozenset[str], tuple[str, ...]] = {}

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    def __contains__(self, sample_id: str) -> bool:
        return sample_id in self._by_id

    def sample(self, sample_id: str) -> Sample:
        try:
            return self._by_id[sample_id]
        except KeyError:
            raise CorpusError(f"unknown sample id {sample_id!r}") from None

    def concept_index(self, concept: str) -> frozenset[str]:
        """Exactly the ids of samples whose labels contain ``concept``."""
        if concept not in self.vocabulary:
            raise CorpusError(f"unknown concept {concept!r}")
        return frozenset(self._by_concept[concept])

    def disjoint_from(self, labels: frozenset[str]) -> tuple[str, ...]:
        """Ids of samples sharing no label with ``labels``, sorted.

        Memoized per label set; chain runs hit the same query label sets
        repeatedly.
        """
        key = frozenset(labels)
        cached = self._disjoint_cache.get(key)
        if cached is None:
            cached = tuple(sorted(s.id for s in self.samples if not (s.labels & key)))
            self._disjoint_cache[key] = cached
        return cached


def _parse_header(record: dict, line: int) -> ConceptVocabulary:
    if "kind" not in record or "concepts" not in record:
        raise CorpusError(
            f"line {line}: first manifest record must be a vocabulary header "
            "with 'kind' and 'concepts'"
        )
    concepts = record["concepts"]
    if not isinstance(concepts, list) or not all(isinstance(c, str) for c in concepts):
        raise CorpusError(f"line {line}: 'concepts' must be a list of strings")
    return ConceptVocabulary(kind=record["kind"], concepts=tuple(concepts))


def _parse_sample(record: dict, line: int, vocab: ConceptVocabulary) -> Sample:
    for key in ("id", "image", "name", "labels"):
        if key not in record:
            raise ValueError(f"missing field '{key}'")
    labels = record["labels"]
    if not isinstance(labels, list) or not labels:
        raise ValueError("'labels' must be a nonempty list")
    unknown = [lab for lab in labels if lab not in vocab]
    if unknown:
        raise ValueError(f"unknown labels {unknown}")
    width = record.get("width")
    height = record.get("height")
    if (width is None) != (height is None):
        raise ValueError("width and height must be given together")
    if width is not None and (int(width) <= 0 or int(height) <= 0):
        raise ValueError(f"non-positive resolution {width}x{height}")
    return Sample(
        id=str(record["id"]),
        image_ref=str(record["image"]),
        display_name=str(record["name"]),
        labels=frozenset(labels),
        width=None if width is None else int(width),
        height=None if height is None else int(height),
    )


def load_manifest(path: str | Path, report_path: str | Path | None = None) -> Corpus:
    """Load and validate a manifest file into a :class:`Corpus`.

    Records failing validation are dropped; each drop is reported to stderr
    and, when ``report_path`` is given, collected into a machine-readable
    JSON validation report. Raises :class:`CorpusError` if the file is
    missing, the header is malformed, or no valid sample survives.
    """
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"manifest not found: {path}")

    vocab: ConceptVocabulary | None = None
    samples: list[Sample] = []
    seen_ids: set[str] = set()
    diagnostics: list[Diagnostic] = []

    with path.open(encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                record = json.loads(raw)
            except json.JSONDecodeError as e:
                if vocab is None:
                    raise CorpusError(f"line {line_no}: malformed header record: {e}")
                diagnostics.append(Diagnostic(line_no, None, f"malformed record: {e}"))
                continue
            if vocab is None:
                vocab = _parse_header(record, line_no)
                continue
            try:
                sample = _parse_sample(record, line_no, vocab)
            except ValueError as e:
                diagnostics.append(Diagnostic(line_no, record.get("id"), str(e)))
                continue
            if sample.id in seen_ids:
                diagnostics.append(
                    Diagnostic(line_no, sample.id, f"duplicate id {sample.id!r}")
                )
                continue
            seen_ids.add(sample.id)
            samples.append(sample)

    if vocab is None:
        raise CorpusError(f"empty corpus: {path} has no header record")

    for diag in diagnostics:
        print(f"{path}:{diag.line}: dropped record: {diag.message}", file=sys.stderr)
    if report_path is not None:
        report = {
            "manifest": str(path),
            "loaded": len(samples),
            "dropped": len(diagnostics),
            "diagnostics": [d.as_dict() for d in diagnostics],
        }
        Path(report_path).write_text(
            json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )

    if not samples:
        raise CorpusError(f"empty corpus: no valid samples in {path}")

    meta = {"manifest": str(path), "dropped_records": len(diagnostics)}
    return Corpus(samples, vocab, source_meta=meta)


def write_manifest(
    samples: list[Sample] | tuple[Sample, ...],
    vocabulary: ConceptVocabulary,
    path: str | Path,
) -> None:
    """Write samples back out in the manifest format load_manifest reads."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        header = {"kind": vocabulary.kind, "concepts": list(vocabulary.concepts)}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for s in samples:
            record: dict = {
                "id": s.id,
                "image": s.image_ref,
                "name": s.display_name,
                "labels": sorted(s.labels),
            }
            if s.resolution_known:
                record["width"] = s.width
                record["height"] = s.height
            fh.write(json.dumps(record, sort_keys=True) + "\n")
