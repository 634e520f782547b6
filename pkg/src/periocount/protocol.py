"""Instruction template, clip answer codec, and count reconciliation.

The conversation for one clip is serialized in a fixed order: periodic
token slots, then the periodicity description, then a counting question,
then (during training) the answer string. Answers use the strict grammar
``'[' DIGIT{4} ',' FLAG ',' FLAG ']'`` with no interior whitespace.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

__all__ = [
    "AnswerParseError",
    "AnswerRangeError",
    "UnknownVariantError",
    "ClipAnswer",
    "InstructionRecord",
    "DESCRIPTION_VERSION",
    "PERIODICITY_DESCRIPTION",
    "QUESTION_VARIANTS",
    "build_instruction",
    "encode_answer",
    "decode_answer",
    "encode_count_token_answer",
    "decode_count_token_answer",
    "reconcile_counts",
]


class AnswerParseError(ValueError):
    """A generated string does not match the answer grammar."""

    def __init__(self, text: str):
        super().__init__(f"malformed clip answer: {text!r}")
        self.text = text


class AnswerRangeError(ValueError):
    """A clip count falls outside the representable 0..9999 range."""


class UnknownVariantError(ValueError):
    """Requested question variant is not shipped."""


# Versioned so the no-description ablation and future rewordings can be
# told apart in checkpoints and reports.  Kept short: every description
# character is a decoder position paid for on each training item and each
# generated token.
DESCRIPTION_VERSION = 2
PERIODICITY_DESCRIPTION = (
    "a repetitive action is any motion cycle that recurs at roughly regular "
    "intervals."
)

QUESTION_VARIANTS = (
    "how many times is the action repeated in this clip?",
    "what is the number of action repetitions in this clip?",
    "how many motion cycles does this clip contain?",
)


@dataclass(frozen=True)
class ClipAnswer:
    """Parsed per-clip answer: full-cycle count plus incomplete-cycle flags."""

    count: int
    start_incomplete: int
    end_incomplete: int

    def __post_init__(self):
        if not 0 <= self.count <= 9999:
            raise AnswerRangeError(f"clip count {self.count} outside 0..9999")
        if self.start_incomplete not in (0, 1) or self.end_incomplete not in (0, 1):
            raise AnswerParseError(f"flags must be 0/1, got ({self.start_incomplete},{self.end_incomplete})")


@dataclass(frozen=True)
class InstructionRecord:
    """One conversation: periodic slots, description, question, optional answer."""

    periodic_slot_count: int
    description: str
    question: str
    answer: str | None = None

    @property
    def text(self) -> str:
        """The textual part of the conversation, in template order."""
        if self.description:
            return f"{self.description} {self.question}"
        return self.question


def build_instruction(
    question_variant: int = 0,
    periodic_slot_count: int = 8,
    include_description: bool = True,
) -> InstructionRecord:
    """Assemble the fixed instruction for one clip (answer left absent)."""
    if not 0 <= question_variant < len(QUESTION_VARIANTS):
        raise UnknownVariantError(
            f"question variant {question_variant} not in 0..{len(QUESTION_VARIANTS) - 1}"
        )
    description = PERIODICITY_DESCRIPTION if include_description else ""
    return InstructionRecord(
        periodic_slot_count=periodic_slot_count,
        description=description,
        question=QUESTION_VARIANTS[question_variant],
    )


def encode_answer(answer: ClipAnswer) -> str:
    """Render the canonical answer string, zero-padding the count to four digits."""
    return f"[{answer.count:04d},{answer.start_incomplete},{answer.end_incomplete}]"


_ANSWER_RE = re.compile(r"\[(\d{4}),([01]),([01])\]\Z")


def decode_answer(text: str) -> ClipAnswer:
    """Parse an answer string; strict grammar apart from surrounding whitespace."""
    m = _ANSWER_RE.match(text.strip())
    if m is None:
        raise AnswerParseError(text)
    return ClipAnswer(int(m.group(1)), int(m.group(2)), int(m.group(3)))


def encode_count_token_answer(answer: ClipAnswer) -> str:
    """Answer surface for the learned-count-token variant: one token per value."""
    return f"[<{answer.count:04d}>,{answer.start_incomplete},{answer.end_incomplete}]"


_COUNT_TOKEN_RE = re.compile(r"\[<(\d{4})>,([01]),([01])\]\Z")


def decode_count_token_answer(text: str) -> ClipAnswer:
    m = _COUNT_TOKEN_RE.match(text.strip())
    if m is None:
        raise AnswerParseError(text)
    return ClipAnswer(int(m.group(1)), int(m.group(2)), int(m.group(3)))


def reconcile_counts(answers: list[ClipAnswer]) -> int:
    """Combine per-clip answers into the video-level count.

    A cycle split across a clip boundary is counted once, when the earlier
    clip flags an incomplete end and the later clip flags an incomplete
    start. The first clip's start flag and the last clip's end flag carry
    no completed cycle and are ignored.
    """
    if not answers:
        raise ValueError("reconcile_counts needs at least one clip answer")
    total = sum(a.count for a in answers)
    for prev, nxt in zip(answers, answers[1:]):
        if prev.end_incomplete == 1 and nxt.start_incomplete == 1:
            total += 1
    return total
