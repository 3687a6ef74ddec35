from __future__ import annotations

import json

import pytest

from aligneval.cli import (
    EXIT_BACKEND,
    EXIT_DOMAIN,
    EXIT_IO,
    EXIT_OK,
    load_config,
    main,
    make_parser,
    resolve_config,
)
from aligneval.codec import ELEMENT_DIGITS, RATING_LETTERS, Distribution, score_to_hit
from aligneval.inference import Prediction
from aligneval.pipeline import write_predictions
from aligneval.util import iter_jsonl


def _uniform_table_file(tmp_path, name="table.jsonl", alphabet=RATING_LETTERS, key="*"):
    path = tmp_path / name
    row = {"request_hash": key, "logits": {label: 0.0 for label in alphabet}}
    path.write_text(json.dumps(row) + "\n", encoding="utf-8")
    return str(path)


def _lines(path):
    return [obj for _, obj in iter_jsonl(path)]


def test_validate_clean_dataset(make_split, write_dataset, capsys):
    path = write_dataset(make_split(n_train=5, n_validation=2, n_test=1))
    assert main(["--dataset", path, "validate"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "8 records: 8 valid, 0 invalid" in out


def test_validate_flags_violations(make_split, write_dataset, capsys):
    path = write_dataset(make_split(n_train=3))
    with open(path, "a", encoding="utf-8") as f:
        bad = {
            "sample_id": "s-bad",
            "prompt_id": "p-bad",
            "prompt": "x",
            "prompt_type": "real",
            "image_ref": "images/x.png",
            "split": "train",
            "meaninglessness": 0.0,
            "split_confidence": 1.0,
            "attribute_confidence": 1.0,
            "total_score": 9.0,
            "elements": [],
        }
        f.write(json.dumps(bad) + "\n")
    assert main(["--dataset", path, "validate"]) == EXIT_DOMAIN
    out = capsys.readouterr().out
    assert "4 records: 3 valid, 1 invalid" in out
    assert "line 4" in out and "total_score" in out


def test_validate_missing_file(tmp_path):
    assert main(["--dataset", str(tmp_path / "nope.jsonl"), "validate"]) == EXIT_IO


def test_build_corpus_is_deterministic(make_split, write_dataset, tmp_path):
    path = write_dataset(make_split(n_train=6, n_validation=2))
    out_dir = tmp_path / "out"
    for name in ("a.jsonl", "b.jsonl"):
        code = main(
            [
                "--dataset", path, "--output-dir", str(out_dir), "--seed", "3",
                "build-corpus", "--task", "total", "--out", name,
            ]
        )
        assert code == EXIT_OK
    a = (out_dir / "a.jsonl").read_bytes()
    b = (out_dir / "b.jsonl").read_bytes()
    assert a == b
    assert len(_lines(out_dir / "a.jsonl")) == 6  # labeled train samples only


def test_build_corpus_element_task(make_split, write_dataset, tmp_path):
    path = write_dataset(make_split(n_train=4, n_elements=3))
    out = tmp_path / "corpus.jsonl"
    code = main(
        [
            "--dataset", path, "--output-dir", str(tmp_path),
            "build-corpus", "--task", "element", "--out", out.name,
        ]
    )
    assert code == EXIT_OK
    rows = _lines(out)
    assert len(rows) == 12  # one record per annotated element
    assert all(row["task"] == "element" for row in rows)


def test_augment_images_writes_merged_dataset(make_split, write_dataset, make_png, tmp_path):
    split = make_split(n_train=20, n_validation=3)
    for sample in split.train:
        make_png(relpath=sample.image_ref)
    path = write_dataset(split)
    out = tmp_path / "augmented.jsonl"
    code = main(
        [
            "--dataset", path, "--output-dir", str(tmp_path),
            "augment-images", "--image-root", str(tmp_path), "--out", out.name,
        ]
    )
    assert code == EXIT_OK
    rows = _lines(out)
    by_split = {"train": 0, "validation": 0, "test": 0}
    for row in rows:
        by_split[row["split"]] += 1
    assert by_split == {"train": 22, "validation": 3, "test": 0}
    aug_rows = [row for row in rows if row["sample_id"].endswith("-aug")]
    assert len(aug_rows) == 2
    for row in aug_rows:
        assert row["image_ref"].endswith("-aug.png")
        assert (tmp_path / row["image_ref"]).exists()


def test_pseudo_label_merges_validation(make_split, write_dataset, tmp_path):
    path = write_dataset(make_split(n_train=5, n_validation=4))
    table = _uniform_table_file(tmp_path)
    out = tmp_path / "pseudo.jsonl"
    parser_args = [
        "--dataset", path, "--output-dir", str(tmp_path),
        "--config", _config_file(tmp_path, {"mock_table": table}),
        "pseudo-label", "--out", out.name,
    ]
    assert main(parser_args) == EXIT_OK
    rows = _lines(out)
    assert len(rows) == 9
    pseudo = [row for row in rows if row.get("provenance") == "pseudo"]
    assert len(pseudo) == 4
    assert all(row["total_score"] == 3.0 for row in pseudo)
    assert all(row["split"] == "train" for row in rows)


def test_predict_total(make_split, write_dataset, tmp_path):
    path = write_dataset(make_split(n_train=2, n_test=5))
    out = tmp_path / "preds.jsonl"
    code = main(
        [
            "--dataset", path, "--output-dir", str(tmp_path), "--seed", "11",
            "predict", "--task", "total", "--split", "test", "--out", out.name,
        ]
    )
    assert code == EXIT_OK
    rows = _lines(out)
    assert len(rows) == 5
    assert all(row["task"] == "total" for row in rows)
    assert all(1.0 <= row["continuous_score"] <= 5.0 for row in rows)


def test_predict_element_skips_samples_without_elements(
    make_split, write_dataset, tmp_path, capsys
):
    split = make_split(n_train=0, n_test=3, n_elements=2)
    split.test[1].elements = []
    path = write_dataset(split)
    out = tmp_path / "preds.jsonl"
    code = main(
        [
            "--dataset", path, "--output-dir", str(tmp_path), "--seed", "11",
            "predict", "--task", "element", "--out", out.name,
        ]
    )
    assert code == EXIT_OK
    assert "skipping 1 samples without elements" in capsys.readouterr().err
    rows = _lines(out)
    assert len(rows) == 4
    assert all(row["hit"] in (0, 1) for row in rows)


def test_two_stage_command(make_split, write_dataset, tmp_path):
    path = write_dataset(make_split(n_train=0, n_test=4, n_elements=2))
    code = main(
        [
            "--dataset", path, "--output-dir", str(tmp_path), "--seed", "2",
            "two-stage",
        ]
    )
    assert code == EXIT_OK
    totals = _lines(tmp_path / "total_predictions.jsonl")
    elements = _lines(tmp_path / "element_predictions.jsonl")
    assert len(totals) == 4
    assert len(elements) == 8
    assert all(row["task"] == "total" for row in totals)
    assert all(row["element_name"] for row in elements)


def _total_run(path, scores):
    preds = [
        Prediction(
            sample_id=sid,
            task="total",
            continuous_score=score,
            argmax_label="h",
            distribution=Distribution(
                probabilities=(1.0 / 15,) * 15, alphabet=RATING_LETTERS
            ),
        )
        for sid, score in scores.items()
    ]
    write_predictions(path, preds)
    return str(path)


def test_ensemble_runs_flag(make_split, tmp_path):
    scores = {"s-1": 2.5, "s-2": 4.25}
    runs = [_total_run(tmp_path / f"r{i}.jsonl", scores) for i in range(3)]
    out = tmp_path / "combined.jsonl"
    code = main(
        ["--output-dir", str(tmp_path), "ensemble", "--task", "total",
         "--runs", *runs, "--out", out.name]
    )
    assert code == EXIT_OK
    rows = _lines(out)
    assert {row["sample_id"]: row["continuous_score"] for row in rows} == scores


def test_ensemble_spec_file(tmp_path):
    runs = [
        _total_run(tmp_path / "r1.jsonl", {"s-1": 2.0}),
        _total_run(tmp_path / "r2.jsonl", {"s-1": 4.0}),
        _total_run(tmp_path / "r3.jsonl", {"s-1": 4.0}),
    ]
    spec = tmp_path / "ensemble.cfg"
    spec.write_text(
        "total_runs = " + ", ".join(runs) + "\n"
        "weights = 0.5, 0.25, 0.25\n",
        encoding="utf-8",
    )
    out = tmp_path / "combined.jsonl"
    code = main(
        ["--output-dir", str(tmp_path), "ensemble", "--task", "total",
         "--spec", str(spec), "--out", out.name]
    )
    assert code == EXIT_OK
    rows = _lines(out)
    assert rows == [{"sample_id": "s-1", "task": "total", "continuous_score": 3.0}]


def test_evaluate_perfect_predictions(make_split, write_dataset, tmp_path, capsys):
    split = make_split(n_train=0, n_test=12, n_elements=3)
    path = write_dataset(split)
    preds = tmp_path / "totals.jsonl"
    with open(preds, "w", encoding="utf-8") as f:
        for sample in split.test:
            f.write(
                json.dumps(
                    {"sample_id": sample.sample_id, "continuous_score": sample.total_score}
                )
                + "\n"
            )
    element_preds = tmp_path / "elements.jsonl"
    with open(element_preds, "w", encoding="utf-8") as f:
        for sample in split.test:
            for el in sample.elements:
                f.write(
                    json.dumps(
                        {
                            "sample_id": sample.sample_id,
                            "element_name": el.name,
                            "hit": score_to_hit(el.score, 3),
                        }
                    )
                    + "\n"
                )
    report_out = tmp_path / "report.json"
    code = main(
        [
            "--dataset", path, "--output-dir", str(tmp_path),
            "evaluate", "--predictions", str(preds),
            "--element-predictions", str(element_preds), "--out", report_out.name,
        ]
    )
    assert code == EXIT_OK
    table = capsys.readouterr().out
    assert "main_score  1.000000" in table
    report = json.loads(report_out.read_text(encoding="utf-8"))
    assert report["srcc"] == pytest.approx(1.0, abs=1e-12)
    assert report["plcc"] == pytest.approx(1.0, abs=1e-12)
    assert report["acc"] == 1.0
    assert report["main_score"] == pytest.approx(1.0, abs=1e-12)
    assert report["n_samples"] == 12
    assert report["n_elements"] == 36


def test_evaluate_constant_predictions_is_domain_error(
    make_split, write_dataset, tmp_path, capsys
):
    split = make_split(n_train=0, n_test=5, n_elements=1)
    path = write_dataset(split)
    preds = tmp_path / "totals.jsonl"
    with open(preds, "w", encoding="utf-8") as f:
        for sample in split.test:
            f.write(
                json.dumps({"sample_id": sample.sample_id, "continuous_score": 3.0}) + "\n"
            )
    element_preds = tmp_path / "elements.jsonl"
    with open(element_preds, "w", encoding="utf-8") as f:
        for sample in split.test:
            for el in sample.elements:
                f.write(
                    json.dumps(
                        {"sample_id": sample.sample_id, "element_name": el.name, "hit": 1}
                    )
                    + "\n"
                )
    code = main(
        [
            "--dataset", path, "evaluate", "--predictions", str(preds),
            "--element-predictions", str(element_preds),
        ]
    )
    assert code == EXIT_DOMAIN
    assert "constant" in capsys.readouterr().err


def test_missing_recorded_response_is_backend_error(
    make_split, write_dataset, tmp_path, capsys
):
    path = write_dataset(make_split(n_train=0, n_test=2))
    table = tmp_path / "table.jsonl"
    table.write_text(
        json.dumps({"request_hash": "0" * 64, "logits": {"a": 0.0}}) + "\n",
        encoding="utf-8",
    )
    cfg = _config_file(tmp_path, {"mock_table": str(table)})
    code = main(
        [
            "--dataset", path, "--config", cfg, "--output-dir", str(tmp_path),
            "predict", "--task", "total",
        ]
    )
    assert code == EXIT_BACKEND
    assert "backend error" in capsys.readouterr().err


def test_table_with_procedural_fallback(make_split, write_dataset, tmp_path):
    path = write_dataset(make_split(n_train=0, n_test=2))
    table = tmp_path / "table.jsonl"
    table.write_text(
        json.dumps({"request_hash": "0" * 64, "logits": {"a": 0.0}}) + "\n",
        encoding="utf-8",
    )
    cfg = _config_file(tmp_path, {"mock_table": str(table), "mock_seed": 4})
    code = main(
        [
            "--dataset", path, "--config", cfg, "--output-dir", str(tmp_path),
            "predict", "--task", "total",
        ]
    )
    assert code == EXIT_OK


def _config_file(tmp_path, values, name="run.cfg"):
    path = tmp_path / name
    lines = [f"{key} = {value}" for key, value in values.items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return str(path)


def test_config_file_parsing(tmp_path):
    path = _config_file(
        tmp_path,
        {
            "dataset": "data.jsonl",
            "tau": 5,
            "seed": 9,
            "include_elements": "true",
            "fraction": 0.25,
        },
    )
    cfg = load_config(path)
    assert cfg.dataset == "data.jsonl"
    assert cfg.tau == 5 and cfg.seed == 9
    assert cfg.include_elements is True
    assert cfg.fraction == 0.25


def test_flags_override_config(tmp_path):
    path = _config_file(tmp_path, {"dataset": "data.jsonl", "tau": 5, "seed": 9})
    parser = make_parser()
    args = parser.parse_args(["--config", path, "--tau", "2", "validate"])
    cfg = resolve_config(args)
    assert cfg.tau == 2  # flag wins
    assert cfg.seed == 9  # config survives
    assert cfg.dataset == "data.jsonl"


def test_unknown_config_key(tmp_path, capsys):
    path = _config_file(tmp_path, {"taU": 5})
    assert main(["--config", path, "validate"]) == EXIT_DOMAIN
    assert "unknown config key" in capsys.readouterr().err


def test_bad_boolean_config_value(tmp_path):
    path = _config_file(tmp_path, {"include_elements": "maybe"})
    with pytest.raises(ValueError, match="not a boolean"):
        load_config(path)


def test_no_dataset_given(capsys):
    assert main(["validate"]) == EXIT_DOMAIN
    assert "no dataset" in capsys.readouterr().err
