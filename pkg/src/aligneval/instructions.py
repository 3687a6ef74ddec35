"""Instruction rendering: turn samples into chat-style training/inference records.

The user-facing templates below are frozen (template version 1). Golden tests
pin the rendered text byte for byte; change the version when changing a
template and re-freeze the goldens deliberately.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Mapping

from .codec import (
    ELEMENT_DIGITS,
    N_ELEMENT_CATEGORIES,
    ElementCategory,
    encode_element_score,
    encode_total_score,
)
from .dataset import DatasetSplit, ElementAnnotation, SamplePair
from .util import derive_seed, dump_jsonl_line

TEMPLATE_VERSION = 1

TASK_TOTAL = "total"
TASK_ELEMENT = "element"

TOTAL_SYSTEM_TEXT = "You rate how well a generated image matches its text prompt."
ELEMENT_SYSTEM_TEXT = (
    "You rate how accurately a single prompt element is shown in a generated image."
)

_INTRO_LINE = "You are given an image and the prompt used to generate it."
_ELEMENT_HEADER_LINE = "Element ratings (1=absent … 7=perfect):"
_TOTAL_CLOSING_LINE = (
    "Rate the overall image-text alignment by choosing one letter from a (worst) "
    "to o (best). Answer with a single letter."
)
_ELEMENT_CLOSING_LINE = (
    "Rate how accurately this element is shown in the image, from 1 (absent) "
    "to 7 (perfect). Answer with a single digit from 1 to 7."
)


class InstructionError(ValueError):
    """Raised for inconsistent build inputs (missing element scores and such)."""


@dataclass(frozen=True)
class BuildOptions:
    """Switches controlling what a rendered instruction contains.

    perturbation_epsilon only affects element-task target labels (training
    regularization); 0 disables it. seed drives every random draw made while
    building a corpus, so equal options imply byte-identical corpora.
    """

    include_elements: bool = False
    include_confidences: bool = False
    include_prompt_type: bool = False
    perturbation_epsilon: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.perturbation_epsilon <= N_ELEMENT_CATEGORIES - 1:
            raise InstructionError(
                f"perturbation_epsilon {self.perturbation_epsilon} outside "
                f"[0, {N_ELEMENT_CATEGORIES - 1}]"
            )


@dataclass
class InstructionRecord:
    """One rendered instruction, optionally with its training target label."""

    system_text: str
    user_text: str
    image_ref: str
    task: str
    sample_id: str
    target_label: str | None = None
    element_name: str | None = None


def perturb_element_label(
    category: ElementCategory, epsilon: int, rng: random.Random
) -> ElementCategory:
    """Shift a training label by +/- epsilon (either direction equally likely).

    The shifted digit is clamped back into [1, 7]. epsilon 0 is the identity
    and draws nothing from rng.
    """
    if not 0 <= epsilon <= N_ELEMENT_CATEGORIES - 1:
        raise InstructionError(f"epsilon {epsilon} outside [0, {N_ELEMENT_CATEGORIES - 1}]")
    if epsilon == 0:
        return category
    delta = rng.choice((-epsilon, epsilon))
    shifted = min(max(category.digit + delta, 1), N_ELEMENT_CATEGORIES)
    return ElementCategory(digit=shifted)


def _confidence_line(sample: SamplePair) -> str:
    return (
        f"Meaninglessness: {sample.meaninglessness:.2f}; "
        f"Split confidence: {sample.split_confidence:.2f}; "
        f"Attribute confidence: {sample.attribute_confidence:.2f}"
    )


def _element_digit(value: ElementCategory | int) -> int:
    return value.digit if isinstance(value, ElementCategory) else int(value)


def build_total_instruction(
    sample: SamplePair,
    element_scores: Mapping[str, ElementCategory | int] | None = None,
    opts: BuildOptions = BuildOptions(),
) -> InstructionRecord:
    """Render the overall-alignment instruction for one sample.

    element_scores maps display names to 1..7 categories and is required
    (possibly empty) when opts.include_elements is set; an empty map renders
    no element section. The target label is present iff the sample carries a
    total_score.
    """
    if opts.include_elements and element_scores is None:
        raise InstructionError(
            f"include_elements set but no element scores given for {sample.sample_id!r}"
        )
    lines = [_INTRO_LINE, f"Prompt: {sample.prompt}"]
    if opts.include_prompt_type:
        lines.append(f"Prompt type: {sample.prompt_type}")
    if opts.include_confidences:
        lines.append(_confidence_line(sample))
    if opts.include_elements and element_scores:
        lines.append(_ELEMENT_HEADER_LINE)
        for name in sorted(element_scores):
            lines.append(f"{name}: {_element_digit(element_scores[name])}")
    lines.append(_TOTAL_CLOSING_LINE)
    target = None
    if sample.total_score is not None:
        target = encode_total_score(sample.total_score).letter
    return InstructionRecord(
        system_text=TOTAL_SYSTEM_TEXT,
        user_text="\n".join(lines),
        image_ref=sample.image_ref,
        task=TASK_TOTAL,
        sample_id=sample.sample_id,
        target_label=target,
    )


def build_element_instruction(
    sample: SamplePair,
    element: ElementAnnotation,
    opts: BuildOptions = BuildOptions(),
) -> InstructionRecord:
    """Render the single-element fidelity instruction for one sample element.

    The target label is present iff the element carries a score; with a
    nonzero opts.perturbation_epsilon the label is randomly shifted using a
    per-record seed derived from (opts.seed, sample_id, element name).
    """
    if element not in sample.elements:
        raise InstructionError(
            f"element {element.name!r} is not part of sample {sample.sample_id!r}"
        )
    lines = [_INTRO_LINE, f"Prompt: {sample.prompt}"]
    if opts.include_prompt_type:
        lines.append(f"prompt type: {sample.prompt_type}")
    if opts.include_confidences:
        lines.append(_confidence_line(sample))
    lines.append(f"Element: {element.display_name()}")
    lines.append(_ELEMENT_CLOSING_LINE)
    target = None
    if element.score is not None:
        category = encode_element_score(element.score)
        if opts.perturbation_epsilon > 0:
            rng = random.Random(derive_seed(opts.seed, sample.sample_id, element.name))
            category = perturb_element_label(category, opts.perturbation_epsilon, rng)
        target = category.label
    return InstructionRecord(
        system_text=ELEMENT_SYSTEM_TEXT,
        user_text="\n".join(lines),
        image_ref=sample.image_ref,
        task=TASK_ELEMENT,
        sample_id=sample.sample_id,
        target_label=target,
        element_name=element.name,
    )


def ground_truth_element_scores(sample: SamplePair) -> dict[str, ElementCategory]:
    """Display-name -> category map of the sample's labeled elements."""
    return {
        el.display_name(): encode_element_score(el.score)
        for el in sample.elements
        if el.score is not None
    }


def record_to_corpus_entry(record: InstructionRecord) -> dict:
    """Chat-format JSON object for one instruction record."""
    messages = [
        {"role": "system", "content": record.system_text},
        {"role": "user", "content": record.user_text},
    ]
    if record.target_label is not None:
        messages.append({"role": "assistant", "content": record.target_label})
    entry: dict = {
        "messages": messages,
        "images": [record.image_ref],
        "sample_id": record.sample_id,
        "task": record.task,
    }
    if record.element_name is not None:
        entry["element_name"] = record.element_name
    return entry


def build_training_corpus(
    split: DatasetSplit,
    task: str,
    opts: BuildOptions = BuildOptions(),
    out_path: str = "corpus.jsonl",
) -> int:
    """Write the chat-format training corpus for the train split.

    Total task: one record per train sample. Element task: one record per
    (sample, element) pair, elements ordered by name. Returns the number of
    records written; the output is byte-identical for equal inputs and
    options.
    """
    if task not in (TASK_TOTAL, TASK_ELEMENT):
        raise InstructionError(f"unknown task {task!r}")
    count = 0
    with open(out_path, "w", encoding="utf-8") as f:
        for sample in split.train:
            if task == TASK_TOTAL:
                scores = ground_truth_element_scores(sample) if opts.include_elements else None
                records = [build_total_instruction(sample, scores, opts)]
            else:
                records = [
                    build_element_instruction(sample, el, opts)
                    for el in sorted(sample.elements, key=lambda e: e.name)
                ]
            for record in records:
                f.write(dump_jsonl_line(record_to_corpus_entry(record)) + "\n")
                count += 1
    return count
