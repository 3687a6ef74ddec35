"""Higher-level flows stitched from the other modules: pseudo-labeling the
validation split, merging it back into training data, two-stage prediction
(element categories feeding the total-score prompt), and run ensembling.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from math import fsum
from pathlib import Path

from .codec import (
    ELEMENT_DIGITS,
    RATING_LETTERS,
    Distribution,
    ElementCategory,
    decode_element_category,
    category_to_hit,
    round_half_away_from_zero,
)
from .dataset import DatasetSplit, SamplePair
from .instructions import TASK_ELEMENT, TASK_TOTAL, BuildOptions
from .inference import (
    Backend,
    Prediction,
    map_ordered,
    predict_element_scores,
    predict_total_score,
)
from .util import dump_jsonl_line, iter_jsonl

PROVENANCE_GROUND_TRUTH = "ground_truth"
PROVENANCE_PSEUDO = "pseudo"


class PipelineError(ValueError):
    """Raised for inconsistent pipeline inputs (id collisions, coverage gaps)."""


@dataclass
class PseudoLabeledSet:
    """Validation samples relabeled with model predictions."""

    records: list[SamplePair] = field(default_factory=list)
    provenance: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if len(self.records) != len(self.provenance):
            raise PipelineError("provenance list does not match records")


def pseudo_label_validation(
    backend: Backend,
    split: DatasetSplit,
    opts: BuildOptions = BuildOptions(),
    include_elements: bool = False,
    tau: int = 3,
    concurrency: int = 1,
) -> PseudoLabeledSet:
    """Predict labels for every validation sample and package them as data.

    Total scores become the continuous predicted score; with include_elements
    each element's score becomes the predicted expected category mapped back
    to [0, 1]. A backend failure on any sample aborts the whole run (no
    partially labeled sets are produced).
    """
    if not split.validation:
        raise PipelineError("validation split is empty; nothing to pseudo-label")

    def relabel(sample: SamplePair) -> SamplePair:
        pred = predict_total_score(backend, sample, opts=opts)
        elements = [replace(el) for el in sample.elements]
        if include_elements and sample.elements:
            epreds = predict_element_scores(backend, sample, tau=tau, opts=opts)
            by_name = {p.element_name: p for p in epreds}
            for el in elements:
                p = by_name[el.name]
                el.score = decode_element_category(p.continuous_score)
                el.hit = None
        return replace(
            sample,
            total_score=pred.continuous_score,
            elements=elements,
            extra=dict(sample.extra),
        )

    records = map_ordered(relabel, split.validation, concurrency)
    return PseudoLabeledSet(
        records=records, provenance=[PROVENANCE_PSEUDO] * len(records)
    )


def merge_training_sets(train: list[SamplePair], pseudo: PseudoLabeledSet) -> DatasetSplit:
    """Append pseudo-labeled records to the train list as train samples.

    Sample ids must stay globally unique; pseudo records carry their
    provenance in the opaque extra-field channel so exports keep it.
    """
    train_ids = {s.sample_id for s in train}
    merged = list(train)
    for sample, provenance in zip(pseudo.records, pseudo.provenance):
        if sample.sample_id in train_ids:
            raise PipelineError(
                f"sample_id {sample.sample_id!r} already present in the train split"
            )
        train_ids.add(sample.sample_id)
        merged.append(
            replace(
                sample,
                split="train",
                extra={**sample.extra, "provenance": provenance},
            )
        )
    return DatasetSplit(train=merged, validation=[], test=[])


@dataclass
class TwoStageResult:
    """Predictions from both stages of the element-then-total flow."""

    totals: list[Prediction]
    elements: list[Prediction]


def two_stage_predict(
    element_backend: Backend,
    total_backend: Backend,
    split: DatasetSplit,
    tau: int = 3,
    opts: BuildOptions = BuildOptions(),
    concurrency: int = 1,
) -> TwoStageResult:
    """Predict test-split totals with predicted element categories in the prompt.

    Stage 1 scores each sample's elements; stage 2 injects the predicted
    categories into the total-score instruction. Samples without elements
    skip stage 1 and are scored from the plain instruction.
    """
    stage2_opts = replace(opts, include_elements=True)

    def run(sample: SamplePair) -> tuple[Prediction, list[Prediction]]:
        epreds: list[Prediction] = []
        scores: dict[str, ElementCategory | int] = {}
        if sample.elements:
            epreds = predict_element_scores(element_backend, sample, tau=tau, opts=opts)
            by_name = {el.name: el for el in sample.elements}
            scores = {
                by_name[p.element_name].display_name(): int(p.argmax_label)
                for p in epreds
            }
        total = predict_total_score(total_backend, sample, scores, stage2_opts)
        return total, epreds

    results = map_ordered(run, split.test, concurrency)
    totals = [total for total, _ in results]
    elements = [p for _, epreds in results for p in epreds]
    return TwoStageResult(totals=totals, elements=elements)


@dataclass
class EnsembleSpec:
    """Prediction files to combine, with optional per-run weights.

    weights, when given, must be nonnegative, sum to 1, and match the number
    of runs of the task being ensembled; omitted weights mean a uniform mean.
    """

    total_runs: list[str] = field(default_factory=list)
    element_runs: list[str] = field(default_factory=list)
    weights: list[float] | None = None

    def __post_init__(self) -> None:
        if self.weights is not None:
            if any(w < 0 for w in self.weights):
                raise PipelineError("ensemble weights must be nonnegative")
            if abs(fsum(self.weights) - 1.0) > 1e-9:
                raise PipelineError(f"ensemble weights sum to {fsum(self.weights)}, not 1")


def _run_weights(spec: EnsembleSpec, n_runs: int) -> list[float]:
    if spec.weights is None:
        return [1.0 / n_runs] * n_runs
    if len(spec.weights) != n_runs:
        raise PipelineError(
            f"{len(spec.weights)} weights for {n_runs} runs"
        )
    return list(spec.weights)


def _check_same_keys(runs: dict[str, list], what: str) -> None:
    paths = list(runs)
    reference = set(runs[paths[0]])
    for path in paths[1:]:
        keys = set(runs[path])
        if keys != reference:
            missing = sorted(reference - keys)[:3]
            surplus = sorted(keys - reference)[:3]
            raise PipelineError(
                f"{what} coverage differs between {paths[0]} and {path} "
                f"(missing {missing}, extra {surplus})"
            )


def _weighted_mean_within_bounds(values: list[float], weights: list[float]) -> float:
    # Anchor at the member minimum so identical members reproduce exactly and
    # the result is clamped against float drift past the member extremes.
    lo = min(values)
    hi = max(values)
    mean = lo + fsum(w * (v - lo) for v, w in zip(values, weights))
    return min(max(mean, lo), hi)


def ensemble_total(spec: EnsembleSpec) -> dict[str, float]:
    """Weighted per-sample mean of the runs' continuous total scores.

    All runs must cover exactly the same sample ids. Returns sample_id ->
    score in the sample order of the first run.
    """
    if not spec.total_runs:
        raise PipelineError("no total-score runs to ensemble")
    runs: dict[str, dict[str, float]] = {}
    for path in spec.total_runs:
        scores: dict[str, float] = {}
        for pred in read_predictions(path):
            if pred.task != TASK_TOTAL:
                raise PipelineError(f"{path}: record for {pred.sample_id!r} is not a total run")
            if pred.sample_id in scores:
                raise PipelineError(f"{path}: duplicate sample_id {pred.sample_id!r}")
            scores[pred.sample_id] = pred.continuous_score
        runs[path] = scores
    _check_same_keys({p: list(r) for p, r in runs.items()}, "sample")
    weights = _run_weights(spec, len(spec.total_runs))
    first = runs[spec.total_runs[0]]
    return {
        sid: _weighted_mean_within_bounds(
            [runs[path][sid] for path in spec.total_runs], weights
        )
        for sid in first
    }


def ensemble_elements(spec: EnsembleSpec, tau: int = 3) -> dict[tuple[str, str], int]:
    """Majority-style element ensembling: mean expected category, then hit.

    The runs' expected categories are averaged per (sample, element),
    rounded half-away-from-zero to a digit, and binarized against tau.
    Returns (sample_id, element_name) -> hit in first-run order.
    """
    if not spec.element_runs:
        raise PipelineError("no element runs to ensemble")
    runs: dict[str, dict[tuple[str, str], float]] = {}
    for path in spec.element_runs:
        scores: dict[tuple[str, str], float] = {}
        for pred in read_predictions(path):
            if pred.task != TASK_ELEMENT or pred.element_name is None:
                raise PipelineError(f"{path}: record for {pred.sample_id!r} is not an element run")
            key = (pred.sample_id, pred.element_name)
            if key in scores:
                raise PipelineError(f"{path}: duplicate element record {key}")
            scores[key] = pred.continuous_score
        runs[path] = scores
    _check_same_keys({p: list(r) for p, r in runs.items()}, "element")
    weights = _run_weights(spec, len(spec.element_runs))
    first = runs[spec.element_runs[0]]
    decisions: dict[tuple[str, str], int] = {}
    for key in first:
        mean = _weighted_mean_within_bounds(
            [runs[path][key] for path in spec.element_runs], weights
        )
        digit = round_half_away_from_zero(mean)
        decisions[key] = category_to_hit(digit, tau)
    return decisions


def prediction_to_record(pred: Prediction) -> dict:
    record: dict = {
        "sample_id": pred.sample_id,
        "task": pred.task,
    }
    if pred.element_name is not None:
        record["element_name"] = pred.element_name
    record["continuous_score"] = pred.continuous_score
    record["argmax_label"] = pred.argmax_label
    if pred.hit is not None:
        record["hit"] = pred.hit
    record["probabilities"] = list(pred.distribution.probabilities)
    return record


def write_predictions(path: str | Path, predictions: list[Prediction]) -> int:
    """Write predictions as line-delimited JSON; returns the record count."""
    with open(path, "w", encoding="utf-8") as f:
        for pred in predictions:
            f.write(dump_jsonl_line(prediction_to_record(pred)) + "\n")
    return len(predictions)


def read_predictions(path: str | Path) -> list[Prediction]:
    """Read a prediction file written by write_predictions."""
    predictions = []
    for lineno, obj in iter_jsonl(str(path)):
        try:
            task = obj["task"]
            alphabet = RATING_LETTERS if task == TASK_TOTAL else ELEMENT_DIGITS
            predictions.append(
                Prediction(
                    sample_id=obj["sample_id"],
                    task=task,
                    continuous_score=float(obj["continuous_score"]),
                    argmax_label=str(obj["argmax_label"]),
                    distribution=Distribution(
                        probabilities=tuple(obj["probabilities"]), alphabet=alphabet
                    ),
                    element_name=obj.get("element_name"),
                    hit=obj.get("hit"),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise PipelineError(f"{path}: line {lineno}: bad prediction record ({exc})")
    return predictions
