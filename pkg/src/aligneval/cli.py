"""Command-line entry point.

Subcommands wrap the library modules one to one; every command is
deterministic given its config and inputs (all seeds are explicit, outputs
carry no timestamps). Machine-readable results go to files, progress notes
to stderr.

Exit codes: 0 success, 1 validation or metric-domain failure, 2 I/O failure,
3 backend failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

from . import augment as augment_mod
from . import dataset as dataset_mod
from . import metrics as metrics_mod
from . import pipeline as pipeline_mod
from .codec import score_to_hit
from .inference import Backend, BackendError, HTTPBackend, MockBackend
from .instructions import TASK_ELEMENT, TASK_TOTAL, BuildOptions, build_training_corpus
from .util import dump_jsonl_line

EXIT_OK = 0
EXIT_DOMAIN = 1
EXIT_IO = 2
EXIT_BACKEND = 3


@dataclass
class RunConfig:
    """Run settings; config file values are overridden by CLI flags."""

    dataset: str | None = None
    output_dir: str = "."
    backend: str = "mock"  # mock | http
    endpoint: str | None = None
    model: str | None = None
    element_model: str | None = None
    api_key: str | None = None
    mock_table: str | None = None
    mock_seed: int | None = None
    image_root: str = "."
    image_base_url: str | None = None
    seed: int = 0
    tau: int = 3
    concurrency: int = 1
    timeout: float = 60.0
    retries: int = 2
    top_logprobs: int = 20
    fraction: float = 0.10
    epsilon: int = 1
    include_elements: bool = False
    include_confidences: bool = False
    include_prompt_type: bool = False
    hit_mode: str = "argmax"


_BOOL_VALUES = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _coerce(name: str, kind: type, raw: str):
    raw = raw.strip()
    if kind is bool:
        try:
            return _BOOL_VALUES[raw.lower()]
        except KeyError:
            raise ValueError(f"config key {name!r}: {raw!r} is not a boolean")
    try:
        return kind(raw)
    except ValueError:
        raise ValueError(f"config key {name!r}: {raw!r} is not a {kind.__name__}")


def load_config(path: str) -> RunConfig:
    """Parse a flat key = value config file ('#' starts a comment)."""
    known = {f.name: f for f in fields(RunConfig)}
    values: dict = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}: line {lineno}: expected key = value")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in known:
                raise ValueError(f"{path}: line {lineno}: unknown config key {key!r}")
            default = known[key].default
            kind = type(default) if default is not None else str
            values[key] = _coerce(key, kind, raw)
    return RunConfig(**values)


def build_backend(cfg: RunConfig) -> Backend:
    if cfg.backend == "mock":
        if cfg.mock_table:
            # strict table unless a procedural fallback seed is asked for
            return MockBackend.from_file(cfg.mock_table, procedural_seed=cfg.mock_seed)
        seed = cfg.mock_seed if cfg.mock_seed is not None else cfg.seed
        return MockBackend(procedural_seed=seed)
    if cfg.backend == "http":
        if not cfg.endpoint or not cfg.model:
            raise ValueError("http backend needs endpoint and model")
        return HTTPBackend(
            base_url=cfg.endpoint,
            model=cfg.model,
            api_key=cfg.api_key,
            timeout=cfg.timeout,
            retries=cfg.retries,
            top_logprobs=cfg.top_logprobs,
            image_root=cfg.image_root,
            image_base_url=cfg.image_base_url,
        )
    raise ValueError(f"unknown backend {cfg.backend!r}")


def _build_opts(cfg: RunConfig) -> BuildOptions:
    return BuildOptions(
        include_elements=cfg.include_elements,
        include_confidences=cfg.include_confidences,
        include_prompt_type=cfg.include_prompt_type,
        perturbation_epsilon=cfg.epsilon,
        seed=cfg.seed,
    )


def _load_dataset(cfg: RunConfig) -> dataset_mod.DatasetSplit:
    if not cfg.dataset:
        raise ValueError("no dataset given (flag --dataset or config key dataset)")
    split, _ = dataset_mod.load_dataset(cfg.dataset, strict=True)
    counts = split.counts()
    print(
        f"loaded {sum(counts.values())} samples "
        f"(train {counts['train']}, validation {counts['validation']}, test {counts['test']})",
        file=sys.stderr,
    )
    return split


def _out_path(cfg: RunConfig, name: str) -> Path:
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir / name


def cmd_validate(cfg: RunConfig, args: argparse.Namespace) -> int:
    if not cfg.dataset:
        raise ValueError("no dataset given (flag --dataset or config key dataset)")
    split, report = dataset_mod.load_dataset(cfg.dataset, strict=False)
    counts = split.counts()
    print(
        f"{report.records_read} records: {report.loaded} valid, {report.dropped} invalid "
        f"(train {counts['train']}, validation {counts['validation']}, test {counts['test']})"
    )
    for violation in report.violations:
        print(violation)
    return EXIT_OK if report.ok() else EXIT_DOMAIN


def cmd_build_corpus(cfg: RunConfig, args: argparse.Namespace) -> int:
    split = _load_dataset(cfg)
    out = _out_path(cfg, args.out)
    count = build_training_corpus(split, args.task, _build_opts(cfg), str(out))
    print(f"wrote {count} corpus records to {out}", file=sys.stderr)
    return EXIT_OK


def cmd_augment_images(cfg: RunConfig, args: argparse.Namespace) -> int:
    split = _load_dataset(cfg)
    augmented, final_train = augment_mod.augment_subset(
        split, cfg.image_root, fraction=cfg.fraction, seed=cfg.seed
    )
    merged = dataset_mod.DatasetSplit(
        train=final_train, validation=split.validation, test=split.test
    )
    out = _out_path(cfg, args.out)
    count = dataset_mod.export_dataset(merged, str(out))
    print(
        f"augmented {len(augmented)} of {len(split.train)} train samples; "
        f"wrote {count} records to {out}",
        file=sys.stderr,
    )
    return EXIT_OK


def cmd_pseudo_label(cfg: RunConfig, args: argparse.Namespace) -> int:
    split = _load_dataset(cfg)
    backend = build_backend(cfg)
    pseudo = pipeline_mod.pseudo_label_validation(
        backend,
        split,
        opts=_build_opts(cfg),
        include_elements=cfg.include_elements,
        tau=cfg.tau,
        concurrency=cfg.concurrency,
    )
    merged = pipeline_mod.merge_training_sets(split.train, pseudo)
    out = _out_path(cfg, args.out)
    count = dataset_mod.export_dataset(merged, str(out))
    print(
        f"pseudo-labeled {len(pseudo.records)} validation samples; "
        f"wrote {count} train records to {out}",
        file=sys.stderr,
    )
    return EXIT_OK


def _split_samples(split: dataset_mod.DatasetSplit, name: str) -> list:
    return {"train": split.train, "validation": split.validation, "test": split.test}[name]


def cmd_predict(cfg: RunConfig, args: argparse.Namespace) -> int:
    from .inference import predict_element_scores, predict_total_score, map_ordered

    split = _load_dataset(cfg)
    backend = build_backend(cfg)
    samples = _split_samples(split, args.split)
    opts = _build_opts(cfg)
    if args.task == TASK_TOTAL:
        predictions = map_ordered(
            lambda s: predict_total_score(backend, s, opts=opts), samples, cfg.concurrency
        )
    else:
        with_elements = [s for s in samples if s.elements]
        skipped = len(samples) - len(with_elements)
        if skipped:
            print(f"skipping {skipped} samples without elements", file=sys.stderr)
        nested = map_ordered(
            lambda s: predict_element_scores(
                backend, s, tau=cfg.tau, opts=opts, hit_mode=cfg.hit_mode
            ),
            with_elements,
            cfg.concurrency,
        )
        predictions = [p for preds in nested for p in preds]
    out = _out_path(cfg, args.out)
    count = pipeline_mod.write_predictions(out, predictions)
    print(f"wrote {count} predictions to {out}", file=sys.stderr)
    return EXIT_OK


def cmd_two_stage(cfg: RunConfig, args: argparse.Namespace) -> int:
    split = _load_dataset(cfg)
    backend = build_backend(cfg)
    total_backend = backend
    if cfg.backend == "http" and cfg.element_model:
        total_backend = backend
        backend = build_backend(replace(cfg, model=cfg.element_model))
    result = pipeline_mod.two_stage_predict(
        backend, total_backend, split, tau=cfg.tau, opts=_build_opts(cfg),
        concurrency=cfg.concurrency,
    )
    total_out = _out_path(cfg, args.total_out)
    element_out = _out_path(cfg, args.element_out)
    n_total = pipeline_mod.write_predictions(total_out, result.totals)
    n_element = pipeline_mod.write_predictions(element_out, result.elements)
    print(
        f"wrote {n_total} total predictions to {total_out} "
        f"and {n_element} element predictions to {element_out}",
        file=sys.stderr,
    )
    return EXIT_OK


def _load_ensemble_spec(path: str) -> pipeline_mod.EnsembleSpec:
    """Ensemble spec file: flat key = value with comma-separated lists."""
    total_runs: list[str] = []
    element_runs: list[str] = []
    weights: list[float] | None = None
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}: line {lineno}: expected key = value")
            key, raw = (part.strip() for part in line.split("=", 1))
            items = [item.strip() for item in raw.split(",") if item.strip()]
            if key == "total_runs":
                total_runs = items
            elif key == "element_runs":
                element_runs = items
            elif key == "weights":
                weights = [float(item) for item in items]
            else:
                raise ValueError(f"{path}: line {lineno}: unknown key {key!r}")
    return pipeline_mod.EnsembleSpec(
        total_runs=total_runs, element_runs=element_runs, weights=weights
    )


def cmd_ensemble(cfg: RunConfig, args: argparse.Namespace) -> int:
    if args.spec:
        spec = _load_ensemble_spec(args.spec)
    else:
        runs = list(args.runs or [])
        if not runs:
            raise ValueError("ensemble needs --spec or --runs")
        spec = pipeline_mod.EnsembleSpec(
            total_runs=runs if args.task == TASK_TOTAL else [],
            element_runs=runs if args.task == TASK_ELEMENT else [],
        )
    out = _out_path(cfg, args.out)
    with open(out, "w", encoding="utf-8") as f:
        if args.task == TASK_TOTAL:
            combined = pipeline_mod.ensemble_total(spec)
            for sample_id, score in combined.items():
                f.write(
                    dump_jsonl_line(
                        {"sample_id": sample_id, "task": TASK_TOTAL, "continuous_score": score}
                    )
                    + "\n"
                )
            print(f"ensembled {len(combined)} total scores to {out}", file=sys.stderr)
        else:
            decisions = pipeline_mod.ensemble_elements(spec, tau=cfg.tau)
            for (sample_id, element_name), hit in decisions.items():
                f.write(
                    dump_jsonl_line(
                        {
                            "sample_id": sample_id,
                            "task": TASK_ELEMENT,
                            "element_name": element_name,
                            "hit": hit,
                        }
                    )
                    + "\n"
                )
            print(f"ensembled {len(decisions)} element decisions to {out}", file=sys.stderr)
    return EXIT_OK


def _truth_maps(split: dataset_mod.DatasetSplit, tau: int):
    totals: dict[str, float] = {}
    hits: dict[tuple[str, str], int] = {}
    for sample in split.all_samples():
        if sample.total_score is not None:
            totals[sample.sample_id] = sample.total_score
        for el in sample.elements:
            if el.score is not None:
                hits[(sample.sample_id, el.name)] = score_to_hit(el.score, tau)
    return totals, hits


def _read_score_lines(path: str) -> list[dict]:
    from .util import iter_jsonl

    return [obj for _, obj in iter_jsonl(path)]


def cmd_evaluate(cfg: RunConfig, args: argparse.Namespace) -> int:
    split = _load_dataset(cfg)
    truth_totals, truth_hits = _truth_maps(split, cfg.tau)

    pred_totals: list[float] = []
    ref_totals: list[float] = []
    for obj in _read_score_lines(args.predictions):
        sid = obj["sample_id"]
        if sid not in truth_totals:
            raise metrics_mod.MetricError(f"no labeled truth for sample {sid!r}")
        pred_totals.append(float(obj["continuous_score"]))
        ref_totals.append(truth_totals[sid])

    pred_hits: list[int] = []
    ref_hits: list[int] = []
    for obj in _read_score_lines(args.element_predictions):
        key = (obj["sample_id"], obj["element_name"])
        if key not in truth_hits:
            raise metrics_mod.MetricError(f"no labeled truth for element {key}")
        if "hit" in obj:
            hit = int(obj["hit"])
        else:
            hit = 1 if int(obj["argmax_label"]) > cfg.tau else 0
        pred_hits.append(hit)
        ref_hits.append(truth_hits[key])

    report = metrics_mod.compute_report(pred_totals, ref_totals, pred_hits, ref_hits)
    print(metrics_mod.format_report_table(report))
    if args.out:
        out = _out_path(cfg, args.out)
        with open(out, "w", encoding="utf-8") as f:
            f.write(json.dumps(report.as_record(), ensure_ascii=False, indent=2) + "\n")
        print(f"wrote report to {out}", file=sys.stderr)
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aligneval",
        description="Image-text alignment evaluation harness",
    )
    parser.add_argument("--config", help="flat key = value config file")
    parser.add_argument("--dataset", help="dataset JSONL file")
    parser.add_argument("--seed", type=int, help="master random seed")
    parser.add_argument("--output-dir", help="directory for output files")
    parser.add_argument("--backend", choices=["mock", "http"], help="scoring backend")
    parser.add_argument("--concurrency", type=int, help="max in-flight backend requests")
    parser.add_argument("--tau", type=int, help="element hit threshold")

    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("validate", help="check every dataset record, listing violations")

    p = sub.add_parser("build-corpus", help="write the chat-format training corpus")
    p.add_argument("--task", choices=[TASK_TOTAL, TASK_ELEMENT], required=True)
    p.add_argument("--out", default="corpus.jsonl")
    p.add_argument("--include-elements", action="store_true", default=None)
    p.add_argument("--include-confidences", action="store_true", default=None)
    p.add_argument("--include-prompt-type", action="store_true", default=None)
    p.add_argument("--epsilon", type=int, help="element label perturbation half-width")

    p = sub.add_parser("augment-images", help="augment a seeded train subset")
    p.add_argument("--image-root", help="directory image refs are relative to")
    p.add_argument("--fraction", type=float, help="fraction of train samples to augment")
    p.add_argument("--out", default="augmented.jsonl")

    p = sub.add_parser("pseudo-label", help="label the validation split with the backend")
    p.add_argument("--include-elements", action="store_true", default=None)
    p.add_argument("--out", default="pseudo.jsonl")

    p = sub.add_parser("predict", help="score a split with the backend")
    p.add_argument("--task", choices=[TASK_TOTAL, TASK_ELEMENT], required=True)
    p.add_argument("--split", choices=["train", "validation", "test"], default="test")
    p.add_argument("--out", default="predictions.jsonl")

    p = sub.add_parser("two-stage", help="element predictions feeding the total prompt")
    p.add_argument("--total-out", default="total_predictions.jsonl")
    p.add_argument("--element-out", default="element_predictions.jsonl")

    p = sub.add_parser("ensemble", help="combine prediction runs")
    p.add_argument("--task", choices=[TASK_TOTAL, TASK_ELEMENT], required=True)
    p.add_argument("--spec", help="ensemble spec file")
    p.add_argument("--runs", nargs="*", help="prediction files (uniform weights)")
    p.add_argument("--out", default="ensemble.jsonl")

    p = sub.add_parser("evaluate", help="score predictions against dataset truth")
    p.add_argument("--predictions", required=True, help="total-score prediction file")
    p.add_argument("--element-predictions", required=True, help="element prediction file")
    p.add_argument("--out", help="report JSON file")

    return parser


_COMMANDS = {
    "validate": cmd_validate,
    "build-corpus": cmd_build_corpus,
    "augment-images": cmd_augment_images,
    "pseudo-label": cmd_pseudo_label,
    "predict": cmd_predict,
    "two-stage": cmd_two_stage,
    "ensemble": cmd_ensemble,
    "evaluate": cmd_evaluate,
}

# CLI flag -> RunConfig field, applied over the config file when given.
_FLAG_FIELDS = (
    "dataset",
    "seed",
    "output_dir",
    "backend",
    "concurrency",
    "tau",
    "image_root",
    "fraction",
    "epsilon",
    "include_elements",
    "include_confidences",
    "include_prompt_type",
)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    for name in _FLAG_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    return replace(cfg, **overrides)


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        return _COMMANDS[args.command](cfg, args)
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
