"""Command-line pipeline: data generation, training, ablation sweeps,
shift analysis, and gradient checking.

Every command validates its inputs before writing anything, writes each
artifact atomically (temp file + rename), and finishes by writing a
single ``manifest.json`` recording the resolved configuration, seed,
and artifact paths; re-running a command with the manifest's config
reproduces its outputs byte for byte (figures excepted).

Exit codes: 0 success, 1 validation error, 2 runtime/numeric error,
3 gradient-check failure. Log verbosity comes from RAVEN_LOG_LEVEL
(error, warn, info, debug).
"""

from __future__ import annotations

import argparse
import datetime
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import analyze_corpus, export_analysis, extract_shifts
from .data import AlignedUtterance, load_dataset, load_embedding_table, write_dataset, write_embedding_table
from .errors import RavenError, ValidationError
from .model import ABLATIONS, ModelConfig, RavenModel
from .nn import load_checkpoint, save_checkpoint
from .synthetic import SyntheticSpec, generate_synthetic
from .tensor import grad_check, tsum
from .training import TrainConfig, evaluate, train

log = logging.getLogger("raven.cli")

_LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class GradCheckFailure(RavenError):
    """Raised when the gradient check exceeds its tolerance (exit 3)."""


def _configure_logging() -> None:
    raw = os.environ.get("RAVEN_LOG_LEVEL", "info").strip().lower()
    if raw not in _LOG_LEVELS:
        raise ValidationError(
            f"RAVEN_LOG_LEVEL must be one of {sorted(_LOG_LEVELS)}, got {raw!r}"
        )
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("raven")
    root.handlers[:] = [handler]
    root.setLevel(_LOG_LEVELS[raw])


# ---------------------------------------------------------------------------
# Atomic file helpers
# ---------------------------------------------------------------------------


def _atomic_write_text(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_via_temp(path: Path, writer) -> None:
    """Run ``writer(temp_path)`` then rename the temp file into place."""
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_json(path: Path, obj) -> None:
    _atomic_write_text(path, json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _read_json(path: Path, what: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ValidationError(f"{what} not found: {path}")
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{what} {path} is not valid JSON: {exc}")
    if not isinstance(doc, dict):
        raise ValidationError(f"{what} {path} must hold a JSON object")
    return doc


class _Manifest:
    def __init__(self, command: str, out_dir: Path, config: dict, seed):
        self.doc = {
            "command": command,
            "config": config,
            "seed": seed,
            "tool_version": __version__,
            "started_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
            "artifacts": [],
        }
        self.out_dir = out_dir

    def add(self, *paths: Path) -> None:
        for p in paths:
            self.doc["artifacts"].append(str(p.relative_to(self.out_dir)))

    def finish(self) -> Path:
        self.doc["finished_at"] = datetime.datetime.now(datetime.timezone.utc).isoformat()
        path = self.out_dir / "manifest.json"
        _write_json(path, self.doc)
        return path


# ---------------------------------------------------------------------------
# Dataset directory layout (written by gen-data, read by train/ablate/analyze)
# ---------------------------------------------------------------------------

SPLIT_NAMES = ("train", "valid", "test")


def load_dataset_dir(data_dir) -> tuple[dict[str, list[AlignedUtterance]], dict]:
    """Read the three split files plus metadata from a generated dataset
    directory, resolving embeddings through its token table."""
    data_dir = Path(data_dir)
    meta = _read_json(data_dir / "dataset.json", "dataset metadata")
    table = load_embedding_table(data_dir / "embeddings.txt", int(meta["embed_dim"]))
    splits = {}
    for name in SPLIT_NAMES:
        path = data_dir / f"{name}.jsonl"
        if not path.exists():
            raise ValidationError(f"dataset split missing: {path}")
        splits[name] = load_dataset(
            path,
            embedding_table=table,
            visual_dim=int(meta["visual_dim"]),
            acoustic_dim=int(meta["acoustic_dim"]),
        )
    return splits, meta


# ---------------------------------------------------------------------------
# Shared config plumbing
# ---------------------------------------------------------------------------


def _resolve_train_configs(args, extra_keys: frozenset = frozenset()) -> tuple[dict, dict, list[int]]:
    doc = _read_json(Path(args.config), "config file")
    allowed = {"model", "train"} | set(extra_keys)
    unknown = set(doc) - allowed
    if unknown:
        raise ValidationError(f"unknown top-level config keys: {sorted(unknown)}")
    model_dict = dict(doc.get("model", {}))
    train_dict = dict(doc.get("train", {}))
    seeds = doc.get("seeds", None)
    if seeds is not None:
        if not isinstance(seeds, list) or not seeds or any(not isinstance(s, int) for s in seeds):
            raise ValidationError("config key 'seeds' must be a nonempty list of integers")
    if args.beta is not None:
        model_dict["shift_cap"] = args.beta
    if getattr(args, "ablation", None):
        model_dict["ablation"] = args.ablation
    if args.seed is not None:
        model_dict["seed"] = args.seed
        train_dict["seed"] = args.seed
        if seeds is None and "seeds" in extra_keys:
            seeds = [args.seed]
    if seeds is None:
        seeds = [train_dict.get("seed", 0)]
    return model_dict, train_dict, seeds


def _model_config_for_data(model_dict: dict, meta: dict) -> ModelConfig:
    filled = dict(model_dict)
    filled.setdefault("embed_dim", int(meta["embed_dim"]))
    filled.setdefault("visual_dim", int(meta["visual_dim"]))
    filled.setdefault("acoustic_dim", int(meta["acoustic_dim"]))
    return ModelConfig.from_dict(filled)


def _epoch_log_lines(entries: list[dict]) -> str:
    return "".join(json.dumps(entry, sort_keys=True, separators=(",", ":")) + "\n" for entry in entries)


def _run_one_training(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    splits: dict,
    out_dir: Path,
    parallel: int | None,
    resume_state: dict | None = None,
) -> dict:
    """Train one model, write its artifacts into ``out_dir``, and return
    a summary dict with the test metrics."""
    out_dir.mkdir(parents=True, exist_ok=True)
    model = RavenModel(model_cfg)
    if resume_state is not None:
        model.store.load_state(resume_state)
    result = train(model, splits["train"], splits["valid"], train_cfg)
    valid_report = evaluate(model, splits["valid"], parallel=parallel)
    test_report = evaluate(model, splits["test"], parallel=parallel)
    _atomic_via_temp(out_dir / "checkpoint.bin", lambda tmp: save_checkpoint(tmp, model.store))
    _write_json(out_dir / "model_config.json", model_cfg.to_dict())
    _atomic_write_text(out_dir / "epochs.jsonl", _epoch_log_lines(result.log_entries))
    metrics_doc = {"valid": valid_report.to_dict(), "test": test_report.to_dict()}
    _write_json(out_dir / "metrics.json", metrics_doc)
    return {
        "out_dir": out_dir,
        "model": model,
        "result": result,
        "valid": valid_report,
        "test": test_report,
    }


def load_model_dir(run_dir) -> RavenModel:
    """Rebuild a model from a training run directory (config + weights);
    loading verifies that shapes agree with the config."""
    run_dir = Path(run_dir)
    cfg = ModelConfig.from_dict(_read_json(run_dir / "model_config.json", "model config"))
    model = RavenModel(cfg)
    model.store.load_state(load_checkpoint(run_dir / "checkpoint.bin"))
    return model


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    spec_dict = _read_json(Path(args.config), "synthetic spec")
    if args.seed is not None:
        spec_dict["seed"] = args.seed
    spec = SyntheticSpec.from_dict(spec_dict)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = _Manifest("gen-data", out_dir, spec.to_dict(), spec.seed)

    dataset = generate_synthetic(spec)
    for name in SPLIT_NAMES:
        path = out_dir / f"{name}.jsonl"
        _atomic_via_temp(path, lambda tmp, utts=getattr(dataset, name): write_dataset(utts, tmp, include_embeddings=False))
        manifest.add(path)
    table_path = out_dir / "embeddings.txt"
    _atomic_via_temp(table_path, lambda tmp: write_embedding_table(dataset.embeddings, tmp))
    manifest.add(table_path)
    meta = {
        "spec": spec.to_dict(),
        "embed_dim": spec.embed_dim,
        "visual_dim": spec.visual_dim,
        "acoustic_dim": spec.acoustic_dim,
        "counts": {name: len(getattr(dataset, name)) for name in SPLIT_NAMES},
        "planted": {
            "visual_direction": dataset.visual_direction.tolist(),
            "acoustic_direction": dataset.acoustic_direction.tolist(),
        },
    }
    meta_path = out_dir / "dataset.json"
    _write_json(meta_path, meta)
    manifest.add(meta_path)
    manifest.finish()
    log.info("generated %s utterances into %s", meta["counts"], out_dir)
    return 0


def cmd_train(args) -> int:
    model_dict, train_dict, _ = _resolve_train_configs(args)
    splits, meta = load_dataset_dir(args.data)
    model_cfg = _model_config_for_data(model_dict, meta)
    train_cfg = TrainConfig.from_dict(train_dict)
    resume_state = None
    if args.resume:
        resume = load_model_dir(args.resume)
        if resume.config.to_dict() != model_cfg.to_dict():
            raise ValidationError(
                "resume checkpoint config does not match the resolved model config"
            )
        resume_state = resume.store.state_arrays()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = _Manifest(
        "train", out_dir, {"model": model_cfg.to_dict(), "train": train_cfg.to_dict()}, train_cfg.seed
    )
    run = _run_one_training(model_cfg, train_cfg, splits, out_dir, args.parallel_eval, resume_state)
    try:
        from .plots import render_training_curves

        render_training_curves(run["result"].log_entries, out_dir / "training_curve.png")
        manifest.add(out_dir / "training_curve.png")
    except ValueError:
        pass  # empty logs (epochs=0) have nothing to plot
    manifest.add(
        out_dir / "checkpoint.bin", out_dir / "model_config.json",
        out_dir / "epochs.jsonl", out_dir / "metrics.json",
    )
    manifest.finish()
    test = run["test"]
    if test.acc2 is not None:
        log.info("final test metrics: mae=%.4f corr=%.4f acc2=%.4f", test.mae, test.correlation, test.acc2)
    return 0


def _median(values: list[float]) -> float:
    return float(np.median(np.asarray(values)))


def cmd_ablate(args) -> int:
    model_dict, train_dict, seeds = _resolve_train_configs(args, extra_keys=frozenset({"seeds"}))
    if "ablation" in model_dict:
        raise ValidationError("ablate sweeps all variants; drop 'ablation' from the config")
    splits, meta = load_dataset_dir(args.data)
    train_cfg_base = TrainConfig.from_dict(train_dict)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = _Manifest(
        "ablate",
        out_dir,
        {"model": model_dict, "train": train_cfg_base.to_dict(), "seeds": seeds},
        seeds,
    )

    per_variant: dict[str, dict] = {}
    for variant in ABLATIONS:
        runs = []
        for seed in seeds:
            mdict = dict(model_dict)
            mdict["ablation"] = variant
            mdict["seed"] = seed
            model_cfg = _model_config_for_data(mdict, meta)
            train_cfg = TrainConfig.from_dict({**train_cfg_base.to_dict(), "seed": seed})
            run_dir = out_dir / "runs" / f"{variant}-seed{seed}"
            run = _run_one_training(model_cfg, train_cfg, splits, run_dir, args.parallel_eval)
            test = run["test"]
            runs.append({"seed": seed, "mae": test.mae, "correlation": test.correlation, "acc2": test.acc2})
            log.info("%s seed %d: acc2=%.4f mae=%.4f", variant, seed, test.acc2, test.mae)
        per_variant[variant] = {
            "runs": runs,
            "mae": _median([r["mae"] for r in runs]),
            "correlation": _median([r["correlation"] for r in runs]),
            "acc2": _median([r["acc2"] for r in runs]),
        }

    comparison_path = out_dir / "comparison.json"
    _write_json(comparison_path, {"seeds": seeds, "variants": per_variant})
    table_path = out_dir / "comparison.txt"
    _atomic_write_text(table_path, _format_comparison_table(per_variant, seeds))
    chart_path = out_dir / "ablation.png"
    from .plots import render_ablation_chart

    render_ablation_chart({v: per_variant[v] for v in ABLATIONS}, chart_path)
    manifest.add(comparison_path, table_path, chart_path)
    manifest.finish()
    return 0


def _format_comparison_table(per_variant: dict, seeds: list[int]) -> str:
    header = f"{'variant':<14}{'MAE':>8}{'Corr':>8}{'Acc-2':>8}   (medians over seeds {seeds})"
    lines = [header, "-" * len(header)]
    for variant in ABLATIONS:
        row = per_variant[variant]
        lines.append(f"{variant:<14}{row['mae']:>8.3f}{row['correlation']:>8.3f}{row['acc2']:>8.3f}")
    return "\n".join(lines) + "\n"


def cmd_analyze(args) -> int:
    model = load_model_dir(args.checkpoint)
    splits, _ = load_dataset_dir(args.data)
    if args.split not in SPLIT_NAMES:
        raise ValidationError(f"--split must be one of {SPLIT_NAMES}, got {args.split!r}")
    utterances = splits[args.split]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = _Manifest(
        "analyze",
        out_dir,
        {"checkpoint": str(args.checkpoint), "split": args.split, "model": model.config.to_dict()},
        model.config.seed,
    )
    corpus = extract_shifts(model, utterances)
    summaries, pca = analyze_corpus(corpus)
    summary_path = out_dir / "summary.json"
    points_path = out_dir / "points.csv"
    summary_tmp = summary_path.with_suffix(".json.tmp")
    points_tmp = points_path.with_suffix(".csv.tmp")
    try:
        export_analysis(summaries, corpus, pca, summary_tmp, points_tmp)
        os.replace(summary_tmp, summary_path)
        os.replace(points_tmp, points_path)
    finally:
        for tmp in (summary_tmp, points_tmp):
            if tmp.exists():
                tmp.unlink()
    manifest.add(summary_path, points_path)
    contours_path = out_dir / "contours.png"
    try:
        from .plots import render_shift_contours

        render_shift_contours(summaries, corpus, pca, contours_path)
        manifest.add(contours_path)
    except ValueError as exc:
        log.warning("skipping contour figure: %s", exc)
    manifest.finish()
    counts = {}
    for s in summaries:
        counts[s.pattern] = counts.get(s.pattern, 0) + 1
    log.info("analyzed %d words: %s", len(summaries), counts)
    return 0


_TOY_GRADCHECK_DEFAULTS = {
    "embed_dim": 8,
    "visual_dim": 3,
    "acoustic_dim": 4,
    "visual_hidden": 4,
    "acoustic_hidden": 4,
    "encoder_hidden": 6,
    "shift_cap": 1.0,
    "seed": 20,
}


def _toy_instance(model_cfg: ModelConfig) -> AlignedUtterance:
    """Seeded two-word utterance with three-frame spans."""
    rng = np.random.default_rng(model_cfg.seed + 1)
    c = model_cfg
    return AlignedUtterance(
        utterance_id="gradcheck-toy",
        words=["alpha", "beta"],
        embeddings=[rng.normal(size=c.embed_dim), rng.normal(size=c.embed_dim)],
        visual=[rng.normal(size=(3, c.visual_dim)), rng.normal(size=(3, c.visual_dim))],
        acoustic=[rng.normal(size=(3, c.acoustic_dim)), rng.normal(size=(3, c.acoustic_dim))],
        label=1.0,
    )


def cmd_grad_check(args) -> int:
    if args.config:
        doc = _read_json(Path(args.config), "config file")
        unknown = set(doc) - {"model"}
        if unknown:
            raise ValidationError(f"unknown top-level config keys: {sorted(unknown)}")
        model_cfg = ModelConfig.from_dict({**_TOY_GRADCHECK_DEFAULTS, **doc.get("model", {})})
    else:
        model_cfg = ModelConfig.from_dict(dict(_TOY_GRADCHECK_DEFAULTS))
    if args.seed is not None:
        model_cfg = ModelConfig.from_dict({**model_cfg.to_dict(), "seed": args.seed})
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = _Manifest("grad-check", out_dir, {"model": model_cfg.to_dict()}, model_cfg.seed)

    model = RavenModel(model_cfg)
    utt = _toy_instance(model_cfg)
    from .training import loss as loss_fn

    params = model.store.as_dict()
    if args.inject_gradient_error:
        # Test hook: a value that shapes the loss but sits outside the
        # tape, so its reverse-mode gradient is (wrongly) zero.
        from .tensor import parameter

        broken = parameter(np.array([0.0]))
        params = {**params, "injected_break": broken}

        def f():
            enc, _ = model.forward(utt, collect_shifts=False)
            base = loss_fn(enc.prediction, utt.label, model.config.task)
            from .tensor import add, tensor

            return add(base, tensor(np.float64(float(broken.data[0]))))

    else:

        def f():
            enc, _ = model.forward(utt, collect_shifts=False)
            return loss_fn(enc.prediction, utt.label, model.config.task)

    report = grad_check(f, params, step=args.step, tolerance=args.tolerance)
    doc = {
        "step": report.step,
        "tolerance": report.tolerance,
        "max_rel_err": report.max_rel_err,
        "passed": report.passed,
        "per_param": report.per_param,
        "failures": report.failures,
    }
    report_path = out_dir / "gradcheck.json"
    _write_json(report_path, doc)
    manifest.add(report_path)
    manifest.finish()
    print(report.summary())
    if not report.passed:
        raise GradCheckFailure(f"gradient check failed for {report.failures}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing / entry point
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="raven",
        description="Train and inspect the word-shifting multimodal fusion model.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a planted-signal synthetic dataset")
    p.add_argument("--config", required=True, help="synthetic spec JSON")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=None, help="override the spec seed")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model on a generated dataset")
    p.add_argument("--config", required=True, help="JSON with 'model' and 'train' sections")
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--out", required=True, help="output run directory")
    p.add_argument("--seed", type=int, default=None, help="override model+train seeds")
    p.add_argument("--ablation", choices=ABLATIONS, default=None, help="model variant")
    p.add_argument("--beta", type=float, default=None, help="override the shift cap")
    p.add_argument("--parallel-eval", type=int, default=None, metavar="N", help="evaluation worker threads")
    p.add_argument("--resume", default=None, help="run directory to load initial weights from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="train all four variants and tabulate them")
    p.add_argument("--config", required=True, help="JSON with 'model', 'train', optional 'seeds'")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="single-seed override")
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--parallel-eval", type=int, default=None, metavar="N")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("analyze", help="export shift distributions from a trained model")
    p.add_argument("--checkpoint", required=True, help="training run directory")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", default="train", help="which split to analyze (default train)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("grad-check", help="finite-difference check on a seeded toy instance")
    p.add_argument("--config", default=None, help="optional JSON with a 'model' section")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--step", type=float, default=1e-3)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--inject-gradient-error", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_grad_check)

    return parser


def main(argv=None) -> int:
    try:
        _configure_logging()
        args = _build_parser().parse_args(argv)
        return args.func(args)
    except GradCheckFailure as exc:
        log.error("%s", exc)
        return 3
    except ValidationError as exc:
        log.error("%s", exc)
        return 1
    except RavenError as exc:
        log.error("%s", exc)
        return 2
    except Exception:  # unexpected: still map to the runtime-error exit code
        log.exception("unexpected error")
        return 2


if __name__ == "__main__":
    sys.exit(main())
