"""Command-line entry point.

Exit codes: 0 success, 1 other library error, 2 configuration error,
3 data error (missing or malformed inputs), 4 model or file-format error.
"""

from __future__ import annotations

import argparse
import logging
import os
import platform
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .. import __version__, _accel
from ..errors import (
    ConfigError,
    DataError,
    DegenerateDataError,
    EmptyRegionError,
    FeatureFormatError,
    ModelFormatError,
    MultiRegionError,
    ShapeMismatchError,
)
from ..evaluation import dumps_json
from ..recognition import load_bundle, save_bundle
from .config import ENV_CONFIG, ExperimentConfig, RunManifest, load_config
from .dataset import generate_synthetic, load_manifest
from .pipeline import (
    FeatureSource,
    analyze,
    detect_images,
    evaluate_records,
    extract_features,
    read_detections,
    run_ablation_pair,
    train_model,
    write_detections,
    write_metrics,
)

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_DATA, EXIT_MODEL = 0, 1, 2, 3, 4
RUN_FILE = "run.json"

log = logging.getLogger("multiregion")


def versions() -> dict:
    import scipy

    out = {"multiregion": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
           "python": platform.python_version(), "kernels": "numba" if _accel.USE_NUMBA else "numpy"}
    if _accel.NUMBA_AVAILABLE:
        out["numba"] = _accel.numba.__version__
    return out


def run_manifest(command: str, config: ExperimentConfig) -> dict:
    d = RunManifest(command, config.hash(), config.seed, versions()).to_dict()
    d["config"] = config.to_dict()
    return d


def _write_run(out_dir: Path, run: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / RUN_FILE).write_text(dumps_json(run))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args, cfg: ExperimentConfig) -> None:
    out = Path(args.out)
    m = generate_synthetic(out, cfg)
    _write_run(out, run_manifest("gen-data", cfg))
    print(f"wrote {len(m.images)} images to {out}")


def cmd_extract(args, cfg: ExperimentConfig) -> None:
    m = load_manifest(args.data)
    names = extract_features(m, cfg, args.out, args.split)
    _write_run(Path(args.out), run_manifest("extract", cfg))
    print(f"wrote {len(names)} feature files to {args.out}")


def cmd_train(args, cfg: ExperimentConfig) -> None:
    m = load_manifest(args.data)
    source = FeatureSource.from_config(m, cfg, args.features)
    bundle, report = train_model(m, cfg, source, split=args.split)
    out = Path(args.out)
    save_bundle(bundle, out)
    run = run_manifest("train", cfg)
    run["training"] = report.to_dict()
    _write_run(out, run)
    print(f"saved model to {out}")


def cmd_detect(args, cfg: ExperimentConfig) -> None:
    m = load_manifest(args.data)
    bundle = load_bundle(args.model)
    source = FeatureSource.from_config(m, cfg, args.features)
    records = detect_images(m, bundle, cfg, source, split=args.split)
    run = run_manifest("detect", cfg)
    write_detections(records, args.out, run)
    _write_run(Path(args.out), run)
    print(f"wrote detections for {len(records)} images to {args.out}")


def _records(args, m):
    return read_detections(args.detections, m.split(args.split))


def cmd_eval(args, cfg: ExperimentConfig) -> None:
    m = load_manifest(args.data)
    records = _records(args, m)
    thresholds = sorted({0.5, 0.7, cfg.iou})
    metrics, eval_cfg = evaluate_records(m, records, cfg, thresholds)
    run = run_manifest("eval", cfg)
    csv_path, _ = write_metrics(metrics, eval_cfg, args.out, run)
    _write_run(Path(args.out), run)
    print(csv_path.read_text(), end="")


def cmd_analyze(args, cfg: ExperimentConfig) -> None:
    m = load_manifest(args.data)
    records = _records(args, m)
    run = run_manifest("analyze", cfg)
    analyze(m, records, cfg, args.out, run)
    _write_run(Path(args.out), run)
    print(f"wrote error analysis to {args.out}")


def cmd_ablate(args, cfg: ExperimentConfig) -> None:
    m = load_manifest(args.data)
    source = FeatureSource.from_config(m, cfg, args.features)
    report = run_ablation_pair(m, cfg, source)
    out = Path(args.out)
    report["run"] = run_manifest("ablate", cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(dumps_json(report))
    a, b = (report["variants"][k]["mAP"]["0.5"] for k in ("A", "B"))
    print(f"A ({report['variants']['A']['regions']}) mAP@0.5 {a:.4f}")
    print(f"B ({report['variants']['B']['regions']}) mAP@0.5 {b:.4f}")
    print(f"difference {report['difference']:+.4f}")


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"key = value config file (default: ${ENV_CONFIG})")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key; repeatable")
    common.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    common.add_argument("--workers", type=int, help="worker processes for per-image work")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="multiregion", description="Multi-region detection toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        sp = sub.add_parser(name, parents=[common], help=help_text)
        sp.set_defaults(fn=fn)
        return sp

    sp = add("gen-data", cmd_gen_data, "generate the synthetic dataset")
    sp.add_argument("--out", required=True)

    sp = add("extract", cmd_extract, "export toy feature pyramids")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--split", default="all")

    sp = add("train", cmd_train, "train a model bundle")
    sp.add_argument("--data", required=True)
    sp.add_argument("--features")
    sp.add_argument("--out", required=True)
    sp.add_argument("--split", default="train")

    sp = add("detect", cmd_detect, "run detection and write per-image JSON")
    sp.add_argument("--data", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--features")
    sp.add_argument("--out", required=True)
    sp.add_argument("--split", default="test")

    for name, fn, text in (("eval", cmd_eval, "compute AP, correlation and AUC"),
                           ("analyze", cmd_analyze, "false-positive breakdown and plot tables")):
        sp = add(name, fn, text)
        sp.add_argument("--data", required=True)
        sp.add_argument("--detections", required=True)
        sp.add_argument("--out", required=True)
        sp.add_argument("--split", default="test")
        sp.add_argument("--iou", type=float, help="shorthand for --set iou=X")

    sp = add("ablate", cmd_ablate, "ring versus solid context region comparison")
    sp.add_argument("--data", required=True)
    sp.add_argument("--features")
    sp.add_argument("--out", required=True)
    return p


def resolve_config(args) -> ExperimentConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.workers is not None:
        overrides.append(f"workers={args.workers}")
    if getattr(args, "iou", None) is not None:
        overrides.append(f"iou={args.iou}")
    return load_config(args.config or os.environ.get(ENV_CONFIG) or None, overrides)


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (DataError, DegenerateDataError, EmptyRegionError)):
        return EXIT_DATA
    if isinstance(exc, (ModelFormatError, FeatureFormatError, ShapeMismatchError)):
        return EXIT_MODEL
    return EXIT_ERROR


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        args.fn(args, cfg)
    except MultiRegionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code(exc)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
