"""Prompt assembly and response parsing for association and deduction steps.

Prompts have three parts in fixed order: memory context, question content
(instruction + question with image placeholders), output instruction. The
template strings are overridable through :class:`PromptTemplates` so new
concept kinds can adjust wording without code changes.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace

from . import memory as memory_mod
from .corpus import ConceptVocabulary
from .memory import MemoryBase

IMAGE_PLACEHOLDER = "<image>"

OPTION1 = "Option1"
OPTION2 = "Option2"
UNPARSEABLE = "Unparseable"

STRICT_RETRY_LINE = "Answer with exactly one token: Image1 or Image2."

_CHOICE_TOKEN = re.compile(r"image\s?([12])\b", re.IGNORECASE)


class PromptError(Exception):
    """Prompt construction violated its own layout contract."""


@dataclass(frozen=True)
class PromptTemplates:
    association_instruction: str = (
        "Determine the relationship between the original image and the "
        "candidate images, and select the images with the same {kind} as "
        "the original image."
    )
    association_question: str = (
        "Original image:<image>. Candidate images: Image1:<image>, Image2:<image>."
    )
    association_output: str = (
        "Your response should be direct and exclusively only include one of "
        "the following items. Options: [Image1, Image2]."
    )
    deduction_instruction: str = (
        "Generate the common {kind} between the original image and selected images."
    )
    deduction_question: str = "Original image:<image>. Selected image: <image>."
    deduction_output: str = (
        "Your response should only include shared {kind} in the following "
        "options. Options:[{options}]"
    )


DEFAULT_TEMPLATES = PromptTemplates()


@dataclass(frozen=True)
class PromptParts:
    """One model call: ordered text parts plus the aligned image references."""

    memory_text: str
    question_instruction: str
    question: str
    output_instruction: str
    images: tuple[str, ...]

    def __post_init__(self) -> None:
        placeholders = self.question.count(IMAGE_PLACEHOLDER)
        if placeholders != len(self.images):
            raise PromptError(
                f"question has {placeholders} image placeholders but "
                f"{len(self.images)} images were supplied"
            )

    def text(self) -> str:
        """Full prompt text, parts joined in fixed order; empty parts skipped."""
        parts = [
            self.memory_text,
            self.question_instruction,
            self.question,
            self.output_instruction,
        ]
        return "\n".join(p for p in parts if p)


def render_association_prompt(
    mem: MemoryBase,
    kind: str,
    query_ref: str,
    option1_ref: str,
    option2_ref: str,
    templates: PromptTemplates = DEFAULT_TEMPLATES,
) -> PromptParts:
    return PromptParts(
        memory_text=memory_mod.render(mem, kind),
        question_instruction=templates.association_instruction.format(kind=kind),
        question=templates.association_question,
        output_instruction=templates.association_output,
        images=(query_ref, option1_ref, option2_ref),
    )


def render_deduction_prompt(
    kind: str,
    vocab: ConceptVocabulary,
    query_ref: str,
    selected_ref: str,
    templates: PromptTemplates = DEFAULT_TEMPLATES,
) -> PromptParts:
    if not vocab.concepts:
        raise PromptError("deduction prompt needs a nonempty vocabulary")
    options = ", ".join(f"'{c}'" for c in vocab.concepts)
    return PromptParts(
        memory_text="",
        question_instruction=templates.deduction_instruction.format(kind=kind),
        question=templates.deduction_question,
        output_instruction=templates.deduction_output.format(kind=kind, options=options),
        images=(query_ref, selected_ref),
    )


def strict_retry(parts: PromptParts) -> PromptParts:
    """Retry variant of an association prompt with a stricter output line."""
    return replace(
        parts, output_instruction=parts.output_instruction + "\n" + STRICT_RETRY_LINE
    )


@dataclass(frozen=True)
class ParsedChoice:
    choice: str  # OPTION1, OPTION2, or UNPARSEABLE
    raw: str


@dataclass(frozen=True)
class ParsedConcepts:
    concepts: frozenset[str]
    raw: str


def parse_choice(text: str) -> ParsedChoice:
    """Extract the selected option; ambiguous or absent tokens are unparseable."""
    hits = {m.group(1) for m in _CHOICE_TOKEN.finditer(text or "")}
    if hits == {"1"}:
        return ParsedChoice(OPTION1, text)
    if hits == {"2"}:
        return ParsedChoice(OPTION2, text)
    return ParsedChoice(UNPARSEABLE, text)


def parse_concepts(text: str, vocab: ConceptVocabulary) -> ParsedConcepts:
    """Vocabulary concepts appearing in the text as whole words.

    Multi-word concepts are matched as exact phrases; substring hits such as
    "metallic" for "metal" do not count.
    """
    found = set()
    for concept in vocab.concepts:
        if re.search(rf"\b{re.escape(concept)}\b", text or "", re.IGNORECASE):
            found.add(concept)
    return ParsedConcepts(frozenset(found), text)
