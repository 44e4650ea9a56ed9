"""Three-stage data refinement: resolution filter, model verification, review.

Stage order is fixed and monotone: a sample dropped at one stage never
reaches the next. The model stage asks a yes/no existence question per label,
starting with the primary client and escalating to the fallback only when the
primary cannot reach a decision; refuted labels are removed, and a sample is
dropped only when no label survives.
"""

from __future__ import annotations

import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

from .corpus import Diagnostic, Sample
from .modelio import ModelClient, ModelIOError, complete
from .prompt import PromptParts

STAGE_RESOLUTION = "resolution"
STAGE_MODEL_VERIFY = "model_verify"
STAGE_HUMAN_REVIEW = "human_review"

VERDICT_KEEP = "keep"
VERDICT_DROP = "drop"

MIN_PIXELS_DEFAULT = 50_000

VERIFY_QUESTION = "Does the object in this image have the {kind} '{concept}'? Answer Yes or No."


class RefineError(Exception):
    pass


@dataclass(frozen=True)
class RefinementDecision:
    """One keep/drop decision, at sample or label granularity."""

    sample_id: str
    stage: str
    verdict: str
    reason: str
    verifier: str | None = None
    label: str | None = None
    ethic_flag: str = ""
    skipped: bool = False

    def as_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "stage": self.stage,
            "verdict": self.verdict,
            "reason": self.reason,
            "verifier": self.verifier,
            "label": self.label,
            "ethic_flag": self.ethic_flag,
            "skipped": self.skipped,
        }


def resolution_filter(sample: Sample, min_pixels: int = MIN_PIXELS_DEFAULT) -> RefinementDecision:
    """Drop below the pixel threshold; unknown resolution fails closed."""
    if not sample.resolution_known:
        return RefinementDecision(
            sample.id, STAGE_RESOLUTION, VERDICT_DROP, "resolution-unknown"
        )
    pixels = sample.pixels
    if pixels < min_pixels:
        return RefinementDecision(
            sample.id,
            STAGE_RESOLUTION,
            VERDICT_DROP,
            f"{pixels} px below threshold {min_pixels}",
        )
    return RefinementDecision(
        sample.id, STAGE_RESOLUTION, VERDICT_KEEP, f"{pixels} px"
    )


def _parse_yes_no(text: str) -> bool | None:
    token = (text or "").strip().split(None, 1)
    if not token:
        return None
    head = token[0].strip(".,:;!").lower()
    if head == "yes":
        return True
    if head == "no":
        return False
    return None


def _ask(client: ModelClient, question: str, image_ref: str) -> bool | None:
    """One yes/no question with a single retry on an undecidable answer."""
    parts = PromptParts(
        memory_text="",
        question_instruction=question,
        question="<image>",
        output_instruction="",
        images=(image_ref,),
    )
    for _ in range(2):
        verdict = _parse_yes_no(complete(client, parts))
        if verdict is not None:
            return verdict
    return None


def verify_labels(
    sample: Sample,
    primary_client: ModelClient,
    fallback_client: ModelClient,
    kind: str,
    question_template: str = VERIFY_QUESTION,
) -> list[RefinementDecision]:
    """Per-label existence check plus a closing sample-level decision.

    The fallback is consulted only when the primary is unreachable or cannot
    reach a decision after its retry. When neither client is usable the stage
    is marked skipped and the sample is kept but flagged.
    """
    decisions: list[RefinementDecision] = []
    affirmed = 0
    unreachable = 0
    for label in sorted(sample.labels):
        question = question_template.format(kind=kind, concept=label)
        verdict: bool | None = None
        verifier: str | None = None
        clients_down = 0
        for client in (primary_client, fallback_client):
            try:
                verdict = _ask(client, question, sample.image_ref)
            except ModelIOError:
                clients_down += 1
                continue
            if verdict is not None:
                verifier = client.id
                break
        if clients_down == 2:
            unreachable += 1
            decisions.append(
                RefinementDecision(
                    sample.id,
                    STAGE_MODEL_VERIFY,
                    VERDICT_KEEP,
                    "verification unavailable",
                    label=label,
                    skipped=True,
                )
            )
            continue
        if verdict is None:
            # Both clients answered but neither reached a decision: keep the
            # label and flag it rather than guessing.
            decisions.append(
                RefinementDecision(
                    sample.id,
                    STAGE_MODEL_VERIFY,
                    VERDICT_KEEP,
                    "undecided after escalation",
                    label=label,
                    skipped=True,
                )
            )
            continue
        if verdict:
            affirmed += 1
        decisions.append(
            RefinementDecision(
                sample.id,
                STAGE_MODEL_VERIFY,
                VERDICT_KEEP if verdict else VERDICT_DROP,
                "label affirmed" if verdict else "label refuted",
                verifier=verifier,
                label=label,
            )
        )

    if unreachable == len(sample.labels):
        decisions.append(
            RefinementDecision(
                sample.id,
                STAGE_MODEL_VERIFY,
                VERDICT_KEEP,
                "skipped: verification clients unreachable",
                skipped=True,
            )
        )
        return decisions

    kept_labels = [
        d.label for d in decisions if d.label is not None and d.verdict == VERDICT_KEEP
    ]
    if kept_labels:
        decisions.append(
            RefinementDecision(
                sample.id,
                STAGE_MODEL_VERIFY,
                VERDICT_KEEP,
                f"{len(kept_labels)}/{len(sample.labels)} labels kept",
            )
        )
    else:
        decisions.append(
            RefinementDecision(
                sample.id, STAGE_MODEL_VERIFY, VERDICT_DROP, "all labels refuted"
            )
        )
    return decisions


def apply_verification(
    sample: Sample, decisions: Sequence[RefinementDecision]
) -> Sample | None:
    """Rebuild the sample with refuted labels removed; None when dropped."""
    sample_level = [d for d in decisions if d.label is None]
    if sample_level and sample_level[-1].verdict == VERDICT_DROP:
        return None
    refuted = {
        d.label for d in decisions if d.label is not None and d.verdict == VERDICT_DROP
    }
    kept = frozenset(sample.labels - refuted)
    if not kept:
        return None
    return replace(sample, labels=kept)


def run_verification(
    samples: Sequence[Sample],
    primary_client: ModelClient,
    fallback_client: ModelClient,
    kind: str,
    max_workers: int = 1,
    question_template: str = VERIFY_QUESTION,
) -> tuple[list[Sample], list[RefinementDecision]]:
    """Verify a batch, bounded-concurrently, decisions in input order."""

    def task(sample: Sample) -> list[RefinementDecision]:
        return verify_labels(
            sample, primary_client, fallback_client, kind, question_template
        )

    if max_workers <= 1:
        per_sample = [task(s) for s in samples]
    else:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            per_sample = list(pool.map(task, samples))

    kept: list[Sample] = []
    decisions: list[RefinementDecision] = []
    for sample, sample_decisions in zip(samples, per_sample):
        decisions.extend(sample_decisions)
        survivor = apply_verification(sample, sample_decisions)
        if survivor is not None:
            kept.append(survivor)
    return kept, decisions


def export_review_queue(samples: Sequence[Sample], path: str | Path) -> None:
    """Write the human-review queue: one editable JSON record per sample."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for s in samples:
            record = {
                "id": s.id,
                "image": s.image_ref,
                "labels": sorted(s.labels),
                "verdict": VERDICT_KEEP,
                "ethic_flag": "",
                "note": "",
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def import_review_decisions(
    path: str | Path, known_ids: set[str]
) -> tuple[list[RefinementDecision], list[Diagnostic]]:
    """Read reviewer verdicts back; unknown ids become diagnostics, not errors."""
    path = Path(path)
    if not path.exists():
        raise RefineError(f"review file not found: {path}")
    decisions: list[RefinementDecision] = []
    diagnostics: list[Diagnostic] = []
    with path.open(encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                record = json.loads(raw)
            except json.JSONDecodeError as e:
                diagnostics.append(Diagnostic(line_no, None, f"malformed record: {e}"))
                continue
            sid = record.get("id")
            if sid not in known_ids:
                diagnostics.append(
                    Diagnostic(line_no, sid, f"unknown sample id {sid!r}")
                )
                continue
            verdict = record.get("verdict", VERDICT_KEEP)
            if verdict not in (VERDICT_KEEP, VERDICT_DROP):
                diagnostics.append(
                    Diagnostic(line_no, sid, f"invalid verdict {verdict!r}")
                )
                continue
            decisions.append(
                RefinementDecision(
                    sample_id=sid,
                    stage=STAGE_HUMAN_REVIEW,
                    verdict=verdict,
                    reason=record.get("note", ""),
                    ethic_flag=record.get("ethic_flag", ""),
                )
            )
    for diag in diagnostics:
        print(f"{path}:{diag.line}: review decision skipped: {diag.message}", file=sys.stderr)
    return decisions, diagnostics


def apply_review(
    samples: Sequence[Sample], decisions: Sequence[RefinementDecision]
) -> list[Sample]:
    dropped = {d.sample_id for d in decisions if d.verdict == VERDICT_DROP}
    return [s for s in samples if s.id not in dropped]


def write_decision_log(decisions: Sequence[RefinementDecision], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for d in decisions:
            fh.write(json.dumps(d.as_dict(), sort_keys=True) + "\n")
