"""Prompt-image dataset model: line-delimited JSON records, split into
train / validation / test lists.

Loading is strict by default (first bad record aborts with its line number);
in lenient mode bad records are dropped and tallied in a LoadReport. Exports
are lossless: unknown record fields are carried through opaquely and a
load(export(d)) round trip reproduces d field for field.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Any, Iterator

from .codec import score_to_hit
from .util import dump_jsonl_line

PROMPT_TYPES = ("real", "synthetic")
SPLIT_NAMES = ("train", "validation", "test")

_RECORD_KEYS = (
    "sample_id",
    "prompt_id",
    "prompt",
    "prompt_type",
    "image_ref",
    "split",
    "total_score",
    "elements",
    "meaninglessness",
    "split_confidence",
    "attribute_confidence",
)


class DatasetError(ValueError):
    """Malformed file, malformed record, or a violated record invariant."""


@dataclass
class ElementAnnotation:
    """One annotated prompt element of a sample."""

    name: str
    category: str
    score: float | None = None  # in [0, 1] when labeled
    hit: int | None = None  # derived binary form of score, when materialized

    def display_name(self) -> str:
        """Name as rendered in instruction text, category in parentheses."""
        if self.category:
            return f"{self.name} ({self.category})"
        return self.name


@dataclass
class SamplePair:
    """One (prompt, generated image) pair with its annotations."""

    sample_id: str
    prompt_id: str
    prompt: str
    prompt_type: str
    image_ref: str
    split: str
    meaninglessness: float
    split_confidence: float
    attribute_confidence: float
    total_score: float | None = None  # in [1, 5] when labeled
    elements: list[ElementAnnotation] = field(default_factory=list)
    extra: dict[str, Any] = field(default_factory=dict)  # unknown input fields, kept opaque


@dataclass
class DatasetSplit:
    """Train / validation / test partition; sample ids are globally unique."""

    train: list[SamplePair] = field(default_factory=list)
    validation: list[SamplePair] = field(default_factory=list)
    test: list[SamplePair] = field(default_factory=list)

    def all_samples(self) -> Iterator[SamplePair]:
        yield from self.train
        yield from self.validation
        yield from self.test

    def counts(self) -> dict[str, int]:
        return {
            "train": len(self.train),
            "validation": len(self.validation),
            "test": len(self.test),
        }


@dataclass
class LoadReport:
    """Outcome of a load: how many records were kept and what was wrong."""

    records_read: int = 0
    loaded: int = 0
    dropped: int = 0
    violations: list[str] = field(default_factory=list)

    def ok(self) -> bool:
        return not self.violations


def validate_sample(sample: SamplePair) -> list[str]:
    """Return all invariant violations of a sample (empty list when valid)."""
    problems: list[str] = []
    if not sample.sample_id:
        problems.append("sample_id is empty")
    if not sample.prompt:
        problems.append("prompt is empty")
    if not sample.image_ref:
        problems.append("image_ref is empty")
    if sample.prompt_type not in PROMPT_TYPES:
        problems.append(f"prompt_type {sample.prompt_type!r} not one of {PROMPT_TYPES}")
    if sample.split not in SPLIT_NAMES:
        problems.append(f"split {sample.split!r} not one of {SPLIT_NAMES}")
    if sample.total_score is not None and not 1.0 <= sample.total_score <= 5.0:
        problems.append(f"total_score {sample.total_score} outside [1, 5]")
    for name, value in (
        ("meaninglessness", sample.meaninglessness),
        ("split_confidence", sample.split_confidence),
        ("attribute_confidence", sample.attribute_confidence),
    ):
        if not 0.0 <= value <= 1.0:
            problems.append(f"{name} {value} outside [0, 1]")
    seen: set[str] = set()
    for el in sample.elements:
        if not el.name:
            problems.append("element with empty name")
        if el.name in seen:
            problems.append(f"duplicate element name {el.name!r}")
        seen.add(el.name)
        if el.score is not None and not 0.0 <= el.score <= 1.0:
            problems.append(f"element {el.name!r} score {el.score} outside [0, 1]")
        if el.hit is not None:
            if el.hit not in (0, 1):
                problems.append(f"element {el.name!r} hit {el.hit} not binary")
            elif el.score is not None and el.hit != score_to_hit(el.score):
                problems.append(
                    f"element {el.name!r} hit {el.hit} inconsistent with score {el.score}"
                )
    return problems


def _require(record: dict[str, Any], key: str) -> Any:
    if key not in record:
        raise DatasetError(f"missing key {key!r}")
    return record[key]


def _as_float(record: dict[str, Any], key: str) -> float:
    value = _require(record, key)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise DatasetError(f"key {key!r} is not a number")
    return float(value)


def parse_record(record: dict[str, Any]) -> SamplePair:
    """Build a SamplePair from one parsed JSON object (schema errors raise)."""
    if not isinstance(record, dict):
        raise DatasetError("record is not a JSON object")
    elements_raw = _require(record, "elements")
    if not isinstance(elements_raw, list):
        raise DatasetError("key 'elements' is not an array")
    elements: list[ElementAnnotation] = []
    for pos, el in enumerate(elements_raw):
        if not isinstance(el, dict) or "name" not in el or "category" not in el:
            raise DatasetError(f"elements[{pos}] lacks name/category")
        score = el.get("score")
        if score is not None:
            if isinstance(score, bool) or not isinstance(score, (int, float)):
                raise DatasetError(f"elements[{pos}] score is not a number")
            score = float(score)
        hit = el.get("hit")
        if hit is not None and hit not in (0, 1):
            raise DatasetError(f"elements[{pos}] hit is not binary")
        elements.append(
            ElementAnnotation(
                name=str(el["name"]), category=str(el["category"]), score=score, hit=hit
            )
        )
    total = record.get("total_score")
    if total is not None:
        if isinstance(total, bool) or not isinstance(total, (int, float)):
            raise DatasetError("key 'total_score' is not a number")
        total = float(total)
    sample = SamplePair(
        sample_id=str(_require(record, "sample_id")),
        prompt_id=str(_require(record, "prompt_id")),
        prompt=str(_require(record, "prompt")),
        prompt_type=str(_require(record, "prompt_type")),
        image_ref=str(_require(record, "image_ref")),
        split=str(_require(record, "split")),
        meaninglessness=_as_float(record, "meaninglessness"),
        split_confidence=_as_float(record, "split_confidence"),
        attribute_confidence=_as_float(record, "attribute_confidence"),
        total_score=total,
        elements=elements,
        extra={k: v for k, v in record.items() if k not in _RECORD_KEYS},
    )
    return sample


def sample_to_record(sample: SamplePair) -> dict[str, Any]:
    """Inverse of parse_record; optional fields are omitted rather than null."""
    record: dict[str, Any] = {
        "sample_id": sample.sample_id,
        "prompt_id": sample.prompt_id,
        "prompt": sample.prompt,
        "prompt_type": sample.prompt_type,
        "image_ref": sample.image_ref,
        "split": sample.split,
    }
    if sample.total_score is not None:
        record["total_score"] = sample.total_score
    els = []
    for el in sample.elements:
        e: dict[str, Any] = {"name": el.name, "category": el.category}
        if el.score is not None:
            e["score"] = el.score
        if el.hit is not None:
            e["hit"] = el.hit
        els.append(e)
    record["elements"] = els
    record["meaninglessness"] = sample.meaninglessness
    record["split_confidence"] = sample.split_confidence
    record["attribute_confidence"] = sample.attribute_confidence
    record.update(sample.extra)
    return record


def load_dataset(path: str, strict: bool = True) -> tuple[DatasetSplit, LoadReport]:
    """Load a line-delimited JSON dataset file.

    Args:
        path: file to read; unreadable paths raise OSError.
        strict: when True the first malformed or invariant-violating record
            raises DatasetError naming its line; when False such records are
            dropped and counted in the report.

    Returns:
        (DatasetSplit, LoadReport). Record order within each split follows
        file order.
    """
    split = DatasetSplit()
    report = LoadReport()
    lists = {"train": split.train, "validation": split.validation, "test": split.test}
    seen_ids: set[str] = set()
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            report.records_read += 1
            try:
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DatasetError(f"invalid JSON ({exc.msg})") from exc
                sample = parse_record(obj)
                problems = validate_sample(sample)
                if problems:
                    raise DatasetError("; ".join(problems))
                if sample.sample_id in seen_ids:
                    raise DatasetError(f"duplicate sample_id {sample.sample_id!r}")
            except DatasetError as exc:
                message = f"line {lineno}: {exc}"
                if strict:
                    raise DatasetError(message) from None
                report.dropped += 1
                report.violations.append(message)
                continue
            seen_ids.add(sample.sample_id)
            lists[sample.split].append(sample)
            report.loaded += 1
    return split, report


def export_dataset(split: DatasetSplit, path: str) -> int:
    """Write a DatasetSplit back to a line-delimited JSON file.

    Returns the number of records written. Train records come first, then
    validation, then test, each preserving its list order.
    """
    count = 0
    with open(path, "w", encoding="utf-8") as f:
        for sample in split.all_samples():
            f.write(dump_jsonl_line(sample_to_record(sample)) + "\n")
            count += 1
    return count


def relabel_split(sample: SamplePair, split_name: str) -> SamplePair:
    """Copy of the sample assigned to another split."""
    if split_name not in SPLIT_NAMES:
        raise DatasetError(f"split {split_name!r} not one of {SPLIT_NAMES}")
    return replace(sample, split=split_name)
