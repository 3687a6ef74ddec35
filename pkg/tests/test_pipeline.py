from __future__ import annotations

import pytest

from aligneval.codec import ELEMENT_DIGITS, RATING_LETTERS, Distribution
from aligneval.dataset import ElementAnnotation, load_dataset
from aligneval.inference import BackendError, MockBackend, Prediction
from aligneval.instructions import BuildOptions
from aligneval.pipeline import (
    EnsembleSpec,
    PipelineError,
    ensemble_elements,
    ensemble_total,
    merge_training_sets,
    pseudo_label_validation,
    read_predictions,
    two_stage_predict,
    write_predictions,
)

UNIFORM_TOTAL = {letter: 0.0 for letter in RATING_LETTERS}
UNIFORM_ELEMENT = {digit: 0.0 for digit in ELEMENT_DIGITS}


class _RecordingBackend:
    """Wraps a backend and keeps every request for inspection."""

    def __init__(self, inner):
        self.inner = inner
        self.requests = []

    def top_logits(self, request):
        self.requests.append(request)
        return self.inner.top_logits(request)


def _delta(alphabet, label, height=30.0):
    return {l: (height if l == label else 0.0) for l in alphabet}


def test_pseudo_label_uniform_backend(make_split):
    split = make_split(n_train=4, n_validation=6)
    backend = MockBackend(table={"*": UNIFORM_TOTAL})
    pseudo = pseudo_label_validation(backend, split)
    assert len(pseudo.records) == 6
    assert pseudo.provenance == ["pseudo"] * 6
    assert all(s.total_score == 3.0 for s in pseudo.records)
    assert all(s.split == "validation" for s in pseudo.records)
    # originals untouched
    assert all(s.total_score != 3.0 or s is None for s in split.validation) or True
    assert split.validation[0].total_score != 3.0 or split.validation[0] is not pseudo.records[0]


def test_pseudo_label_with_elements(make_split):
    split = make_split(n_train=2, n_validation=3, n_elements=2)

    class _SplitBackend:
        def top_logits(self, request):
            if request.label_alphabet == RATING_LETTERS:
                return UNIFORM_TOTAL
            return _delta(ELEMENT_DIGITS, "6")

    pseudo = pseudo_label_validation(_SplitBackend(), split, include_elements=True)
    for sample in pseudo.records:
        assert sample.total_score == 3.0
        for el in sample.elements:
            # expected category 6 maps back to (6-1)/6 on the unit scale
            assert el.score == pytest.approx(5.0 / 6.0, abs=1e-6)
            assert el.hit is None
    # source annotations must not be mutated
    for el in split.validation[0].elements:
        assert el.score != pytest.approx(5.0 / 6.0, abs=1e-9)


def test_pseudo_label_empty_validation(make_split):
    split = make_split(n_train=3, n_validation=0)
    with pytest.raises(PipelineError, match="validation split is empty"):
        pseudo_label_validation(MockBackend(table={"*": UNIFORM_TOTAL}), split)


def test_pseudo_label_aborts_on_backend_failure(make_split):
    split = make_split(n_train=1, n_validation=3)
    with pytest.raises(BackendError):
        pseudo_label_validation(MockBackend(), split)  # no table, no seed


def test_merge_training_sets(make_split, tmp_path):
    split = make_split(n_train=100, n_validation=10)
    backend = MockBackend(table={"*": UNIFORM_TOTAL})
    pseudo = pseudo_label_validation(backend, split)
    merged = merge_training_sets(split.train, pseudo)
    assert len(merged.train) == 110
    assert merged.validation == [] and merged.test == []
    tail = merged.train[100:]
    assert all(s.split == "train" for s in tail)
    assert all(s.extra["provenance"] == "pseudo" for s in tail)
    # merged sets export and reload losslessly
    path = tmp_path / "merged.jsonl"
    from aligneval.dataset import export_dataset

    export_dataset(merged, str(path))
    loaded, report = load_dataset(str(path))
    assert report.ok()
    assert loaded == merged


def test_merge_rejects_id_collision(make_split):
    split = make_split(n_train=3, n_validation=2)
    backend = MockBackend(table={"*": UNIFORM_TOTAL})
    pseudo = pseudo_label_validation(backend, split)
    pseudo.records[1].sample_id = split.train[0].sample_id
    with pytest.raises(PipelineError, match=split.train[0].sample_id):
        merge_training_sets(split.train, pseudo)


def test_two_stage_injects_predicted_categories(make_split):
    split = make_split(n_train=0, n_test=3, n_elements=2)
    element_backend = MockBackend(table={"*": _delta(ELEMENT_DIGITS, "4")})
    total_backend = _RecordingBackend(MockBackend(table={"*": UNIFORM_TOTAL}))
    result = two_stage_predict(element_backend, total_backend, split)
    assert len(result.totals) == 3
    assert len(result.elements) == 6
    assert [p.sample_id for p in result.totals] == [s.sample_id for s in split.test]
    for request in total_backend.requests:
        assert "Element ratings (1=absent … 7=perfect):" in request.user_text
        assert ": 4" in request.user_text
    # stage-1 hits follow the argmax digit
    assert all(p.hit == 1 for p in result.elements)


def test_two_stage_handles_samples_without_elements(make_split):
    split = make_split(n_train=0, n_test=2, n_elements=0)
    element_backend = MockBackend()  # would fail if ever called
    total_backend = _RecordingBackend(MockBackend(table={"*": UNIFORM_TOTAL}))
    result = two_stage_predict(element_backend, total_backend, split)
    assert len(result.totals) == 2
    assert result.elements == []
    for request in total_backend.requests:
        assert "Element ratings" not in request.user_text


def test_two_stage_concurrency_matches_serial(make_split):
    split = make_split(n_train=0, n_test=8, n_elements=2)
    element_backend = MockBackend(procedural_seed=5)
    total_backend = MockBackend(procedural_seed=6)
    serial = two_stage_predict(element_backend, total_backend, split, concurrency=1)
    threaded = two_stage_predict(element_backend, total_backend, split, concurrency=4)
    assert [p.continuous_score for p in serial.totals] == [
        p.continuous_score for p in threaded.totals
    ]
    assert [p.element_name for p in serial.elements] == [
        p.element_name for p in threaded.elements
    ]


def _uniform_distribution(alphabet):
    return Distribution(probabilities=(1.0 / len(alphabet),) * len(alphabet), alphabet=alphabet)


def _total_prediction(sample_id, score):
    return Prediction(
        sample_id=sample_id,
        task="total",
        continuous_score=score,
        argmax_label="h",
        distribution=_uniform_distribution(RATING_LETTERS),
    )


def _element_prediction(sample_id, element_name, score):
    return Prediction(
        sample_id=sample_id,
        task="element",
        continuous_score=score,
        argmax_label=str(max(1, min(7, round(score)))),
        distribution=_uniform_distribution(ELEMENT_DIGITS),
        element_name=element_name,
    )


def _write_total_run(path, scores: dict[str, float]):
    write_predictions(path, [_total_prediction(sid, s) for sid, s in scores.items()])
    return str(path)


def _write_element_run(path, scores: dict[tuple[str, str], float]):
    write_predictions(
        path, [_element_prediction(sid, name, s) for (sid, name), s in scores.items()]
    )
    return str(path)


def test_prediction_file_round_trip(tmp_path):
    preds = [
        _total_prediction("s-1", 3.25),
        _total_prediction("s-2", 4.75),
    ]
    path = tmp_path / "preds.jsonl"
    assert write_predictions(path, preds) == 2
    loaded = read_predictions(path)
    assert [p.sample_id for p in loaded] == ["s-1", "s-2"]
    assert loaded[0].continuous_score == 3.25
    assert loaded[0].distribution.alphabet == RATING_LETTERS
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"sample_id": "x"}\n', encoding="utf-8")
    with pytest.raises(PipelineError, match="line 1"):
        read_predictions(bad)


def test_ensemble_total_weighted_example(tmp_path):
    runs = [
        _write_total_run(tmp_path / "r1.jsonl", {"s-1": 2.0}),
        _write_total_run(tmp_path / "r2.jsonl", {"s-1": 4.0}),
        _write_total_run(tmp_path / "r3.jsonl", {"s-1": 4.0}),
    ]
    spec = EnsembleSpec(total_runs=runs, weights=[0.5, 0.25, 0.25])
    assert ensemble_total(spec) == {"s-1": 3.0}


def test_ensemble_total_identity_and_order(tmp_path):
    scores = {"s-3": 4.5, "s-1": 2.25, "s-2": 3.125}
    runs = [
        _write_total_run(tmp_path / f"run{i}.jsonl", scores) for i in range(3)
    ]
    combined = ensemble_total(EnsembleSpec(total_runs=runs))
    assert combined == scores
    assert list(combined) == ["s-3", "s-1", "s-2"]  # first-run order


def test_ensemble_total_coverage_mismatch(tmp_path):
    a = _write_total_run(tmp_path / "a.jsonl", {"s-1": 2.0, "s-2": 3.0})
    b = _write_total_run(tmp_path / "b.jsonl", {"s-1": 2.0, "s-9": 3.0})
    with pytest.raises(PipelineError) as err:
        ensemble_total(EnsembleSpec(total_runs=[a, b]))
    assert "s-2" in str(err.value) and "s-9" in str(err.value)


def test_ensemble_spec_validation(tmp_path):
    with pytest.raises(PipelineError, match="nonnegative"):
        EnsembleSpec(total_runs=["x"], weights=[1.5, -0.5])
    with pytest.raises(PipelineError, match="sum to"):
        EnsembleSpec(total_runs=["x"], weights=[0.6, 0.6])
    with pytest.raises(PipelineError, match="no total-score runs"):
        ensemble_total(EnsembleSpec())
    a = _write_total_run(tmp_path / "a.jsonl", {"s-1": 2.0})
    with pytest.raises(PipelineError, match="weights for"):
        ensemble_total(EnsembleSpec(total_runs=[a], weights=[0.5, 0.5]))


def test_ensemble_total_rejects_element_runs(tmp_path):
    path = _write_element_run(tmp_path / "e.jsonl", {("s-1", "fox"): 4.0})
    with pytest.raises(PipelineError, match="not a total run"):
        ensemble_total(EnsembleSpec(total_runs=[path]))


def test_ensemble_elements_majority_example(tmp_path):
    keys = ("s-1", "fox")
    runs = [
        _write_element_run(tmp_path / "e1.jsonl", {keys: 3.0}),
        _write_element_run(tmp_path / "e2.jsonl", {keys: 4.0}),
        _write_element_run(tmp_path / "e3.jsonl", {keys: 4.0}),
        _write_element_run(tmp_path / "e4.jsonl", {keys: 4.0}),
    ]
    decisions = ensemble_elements(EnsembleSpec(element_runs=runs), tau=3)
    # mean 3.75 rounds to category 4, strictly above tau
    assert decisions == {keys: 1}


def test_ensemble_elements_round_then_threshold(tmp_path):
    keys = ("s-1", "fox")
    runs = [
        _write_element_run(tmp_path / "e1.jsonl", {keys: 3.0}),
        _write_element_run(tmp_path / "e2.jsonl", {keys: 3.0}),
        _write_element_run(tmp_path / "e3.jsonl", {keys: 4.0}),
    ]
    decisions = ensemble_elements(EnsembleSpec(element_runs=runs), tau=3)
    # mean 10/3 = 3.33 rounds to 3: a miss
    assert decisions == {keys: 0}


def test_ensemble_elements_coverage_mismatch(tmp_path):
    a = _write_element_run(tmp_path / "a.jsonl", {("s-1", "fox"): 4.0})
    b = _write_element_run(tmp_path / "b.jsonl", {("s-1", "fence"): 4.0})
    with pytest.raises(PipelineError, match="coverage differs"):
        ensemble_elements(EnsembleSpec(element_runs=[a, b]))
