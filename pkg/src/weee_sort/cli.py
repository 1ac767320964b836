"""Command-line front end: build-dataset, train, evaluate, ablate, flow, plot.

Exit codes: 0 ok, 2 config error, 3 data error, 4 training failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import multiprocessing
import platform
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import torch

from . import __version__
from .config import BINARY_CLASSES, ExperimentConfig, apply_preset, load_config
from .dataset import (
    CropEntry,
    DatasetManifest,
    crop_filename,
    format_split_table,
    iter_crops,
    read_manifest,
    save_crop,
    stratified_split,
    write_manifest,
)
from .errors import ConfigError, DataError, TrainingError, WeeeSortError
from .geometry import parse_annotation_file
from .io import atomic_write_bytes, atomic_write_text
from .metrics import (
    BINARY_MAPPING,
    ConfusionMatrix,
    EvaluationReport,
    compare_reports,
    confusion_from_predictions,
    evaluate,
    format_confusion,
    material_flow,
    percent,
)
from .plots import plot_history
from .synthetic import generate_synthetic_dataset
from .training import build_classifier, load_checkpoint, predict_split, read_history, train, write_history

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TRAINING = 0, 2, 3, 4
ABLATION_PRESETS = ("four_class", "scratch", "binary")


class OutputExistsError(ConfigError):
    pass


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _dump(obj, path) -> Path:
    atomic_write_text(path, json.dumps(obj, indent=2) + "\n")
    return Path(path)


def _verify(paths) -> None:
    missing = [str(p) for p in paths if not Path(p).is_file() or Path(p).stat().st_size == 0]
    if missing:
        raise DataError(f"expected artifacts were not written: {missing}")


def _with_seed(config: ExperimentConfig, seed: int | None) -> ExperimentConfig:
    if seed is None:
        return config
    return replace(config, split_seed=seed, training=replace(config.training, seed=seed))


def manifest_path_for(config: ExperimentConfig, out: Path) -> Path:
    if config.dataset.manifest_path is not None:
        return Path(config.dataset.manifest_path)
    return out / "dataset" / "manifest.json"


# -- build-dataset ----------------------------------------------------------------

def build_dataset(config: ExperimentConfig, out: Path, force: bool = False, workers: int = 1
                  ) -> DatasetManifest:
    """Crop, split and write a dataset under ``out/dataset``."""
    if config.dataset.manifest_path is not None:
        raise ConfigError("config points at an existing manifest; nothing to build")
    ds_dir = out / "dataset"
    manifest_file = ds_dir / "manifest.json"
    if manifest_file.exists() and not force:
        raise OutputExistsError(f"{manifest_file} already exists; pass --force to rebuild")
    if config.dataset.synthetic is not None:
        if ds_dir.exists():
            shutil.rmtree(ds_dir)
        ann_file = generate_synthetic_dataset(config.dataset.synthetic, ds_dir / "raw")
    else:
        ann_file = Path(config.dataset.annotation_file)
        if not ann_file.is_file():
            raise DataError(f"annotation file not found: {ann_file}")
    records, clamped = parse_annotation_file(ann_file)
    if not any(r.annotations for r in records):
        raise DataError(f"{ann_file}: no annotated components; nothing written")
    if clamped:
        print(f"warning: clamped {clamped} vertices into image bounds", file=sys.stderr)
    crops_dir = ds_dir / "crops"
    if crops_dir.exists():
        shutil.rmtree(crops_dir)
    rows = []
    for crop in iter_crops(records, workers=workers):
        save_crop(crop, crops_dir)
        image_id, idx, face = crop.source
        rows.append(CropEntry(crop.crop_id, crop.class_label, image_id, idx, face, "train",
                              f"crops/{crop_filename(crop.crop_id)}"))
    manifest = stratified_split(rows, seed=config.split_seed)
    write_manifest(manifest, manifest_file)
    manifest.root = ds_dir
    return manifest


# -- train / evaluate ---------------------------------------------------------------

def _load_manifest_for(config: ExperimentConfig, out: Path) -> DatasetManifest:
    path = manifest_path_for(config, out)
    manifest = read_manifest(path)
    if config.class_mapping is not None:
        manifest = manifest.relabel(config.class_mapping, config.classes)
    return manifest


def environment() -> dict:
    return {"python": platform.python_version(), "torch": torch.__version__,
            "platform": platform.platform(), "weee_sort": __version__,
            "cuda": torch.cuda.is_available()}


def train_run(config: ExperimentConfig, raw_config: bytes, out: Path, force: bool = False) -> dict:
    """Train one configuration; returns the run manifest (also written to run.json)."""
    run_dir = out / "runs" / config.run_id
    if (run_dir / "run.json").exists() and not force:
        raise OutputExistsError(f"{run_dir} already holds a run; pass --force to overwrite")
    manifest = _load_manifest_for(config, out)
    classes = config.classes or manifest.classes
    if len(classes) != config.model.num_classes:
        raise ConfigError(f"model has {config.model.num_classes} outputs but the dataset "
                          f"has classes {classes}")
    run_dir.mkdir(parents=True, exist_ok=True)
    started = _now()
    atomic_write_bytes(run_dir / "config.json", raw_config)
    model = build_classifier(config.model, classes, seed=config.training.seed,
                             class_mapping=config.class_mapping)
    history, ckpt = train(model, manifest, config.augmentation, config.training, run_dir)
    hist_path = run_dir / "history.csv"
    write_history(history, hist_path)
    acc_png, loss_png = plot_history(history.records, run_dir, config.run_id)
    run = {
        "run_id": config.run_id,
        "config_snapshot": raw_config.decode("utf-8"),
        "resolved_config": config.to_dict(),
        "started": started,
        "finished": _now(),
        "best_epoch": history.best_epoch,
        "stopped_epoch": history.stopped_epoch,
        "artifacts": {"checkpoint": str(ckpt), "history": str(hist_path),
                      "config": str(run_dir / "config.json"),
                      "plots": [str(acc_png), str(loss_png)]},
        "manifest": str(manifest_path_for(config, out)),
        "environment": environment(),
    }
    _verify([ckpt, hist_path, acc_png, loss_png, run_dir / "config.json"])
    _dump(run, run_dir / "run.json")
    return run


def evaluate_checkpoint(checkpoint, manifest_path, split: str = "test", target: str = "battery",
                        out_dir=None) -> tuple[EvaluationReport, object, list[Path]]:
    """Evaluate a checkpoint on one split; write report and flow JSON files."""
    model, header = load_checkpoint(checkpoint)
    manifest = read_manifest(manifest_path)
    if model.class_mapping:
        manifest = manifest.relabel(model.class_mapping, model.classes)
    if set(manifest.classes) != set(model.classes):
        raise DataError(f"checkpoint classes {list(model.classes)} do not match "
                        f"manifest classes {manifest.classes}")
    if target not in model.classes:
        raise ConfigError(f"unknown target class {target!r}; valid classes: {list(model.classes)}")
    actual, predicted = predict_split(model, manifest, split)
    report = evaluate(confusion_from_predictions(actual, predicted, model.classes))
    flow = material_flow(report.confusion, target)
    out_dir = Path(out_dir) if out_dir is not None else Path(checkpoint).parent
    paths = [_dump(report.to_dict(), out_dir / f"report_{split}.json"),
             _dump(flow.to_dict(), out_dir / f"flow_{split}.json")]
    _verify(paths)
    return report, flow, paths


# -- ablation -------------------------------------------------------------------------

def _ablation_subrun(config: ExperimentConfig, raw: bytes, out: Path, force: bool):
    run = train_run(config, raw, out, force)
    report, _, paths = evaluate_checkpoint(run["artifacts"]["checkpoint"],
                                           manifest_path_for(config, out), "test", "battery",
                                           Path(run["artifacts"]["checkpoint"]).parent)
    run["artifacts"]["report"] = str(paths[0])
    run["artifacts"]["flow"] = str(paths[1])
    _dump(run, out / "runs" / config.run_id / "run.json")
    return run, report.to_dict()


def ablate(config: ExperimentConfig, raw: bytes, out: Path, force: bool = False,
           parallel: bool = False) -> dict:
    """Run the four_class, scratch and binary presets on one dataset and compare them."""
    if not manifest_path_for(config, out).exists():
        build_dataset(config, out, force)
    configs = [apply_preset(config, p) for p in ABLATION_PRESETS]
    results, failures = {}, {}
    if parallel:
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(len(configs), mp_context=ctx) as pool:
            futures = {c.preset: pool.submit(_ablation_subrun, c, raw, out, force) for c in configs}
            for preset in ABLATION_PRESETS:
                try:
                    results[preset] = futures[preset].result()
                except Exception as exc:  # includes a broken pool, not only our own errors
                    failures[preset] = f"{type(exc).__name__}: {exc}"
    else:
        for c in configs:
            try:
                results[c.preset] = _ablation_subrun(c, raw, out, force)
            except WeeeSortError as exc:
                failures[c.preset] = f"{type(exc).__name__}: {exc}"

    reports = {p: EvaluationReport.from_dict(r) for p, (_, r) in results.items()}
    comparison = {
        "base": "four_class",
        "runs": {p: run["run_id"] for p, (run, _) in results.items()},
        "reports": {p: r.to_dict() for p, r in reports.items()},
        "deltas": {},
    }
    if "four_class" in reports:
        base = reports["four_class"]
        if "scratch" in reports:
            comparison["deltas"]["scratch"] = compare_reports(base, reports["scratch"])
        if "binary" in reports:
            comparison["deltas"]["binary"] = compare_reports(base, reports["binary"], BINARY_MAPPING)
    ab_dir = out / "ablation"
    if failures:
        comparison["failures"] = failures
        _dump(comparison, ab_dir / "comparison.partial.json")
        raise TrainingError(f"ablation sub-runs failed: {failures}")
    _dump(comparison, ab_dir / "comparison.json")
    atomic_write_text(ab_dir / "summary.txt", format_ablation(comparison) + "\n")
    return comparison


def _signed_pp(x):
    return "n/a" if x is None else f"{x * 100:+.2f} pp"


def format_ablation(comparison: dict) -> str:
    lines = [f"{'preset':<12}{'accuracy':>10}{'macro P':>10}{'macro R':>10}"
             f"{'battery P':>11}{'battery R':>11}"]
    for preset, rd in comparison["reports"].items():
        r = EvaluationReport.from_dict(rd)
        b = r.metrics_for("battery")
        lines.append(f"{preset:<12}{percent(r.accuracy):>10}{percent(r.macro_precision):>10}"
                     f"{percent(r.macro_recall):>10}{percent(b.precision):>11}{percent(b.recall):>11}")
    for preset, d in comparison["deltas"].items():
        space = " (four_class collapsed to battery/other)" if preset == "binary" else ""
        lines.append(f"\n{preset} - four_class{space}:")
        lines.append(f"  accuracy {_signed_pp(d['accuracy'])}, macro precision "
                     f"{_signed_pp(d['macro_precision'])}, macro recall {_signed_pp(d['macro_recall'])}")
        for row in d["per_class"]:
            lines.append(f"  {row['class']:<12} precision {_signed_pp(row['precision'])}, "
                         f"recall {_signed_pp(row['recall'])}")
    return "\n".join(lines)


# -- argument handling -----------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config JSON")
    common.add_argument("--out", type=Path, default=None, help="output directory")
    common.add_argument("--seed", type=int, default=None, help="override split and training seeds")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="weee-sort", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    b = sub.add_parser("build-dataset", parents=[common], help="crop, split and write a manifest")
    b.add_argument("--workers", type=int, default=1)
    t = sub.add_parser("train", parents=[common], help="train one configuration")
    t.add_argument("--preset", choices=("four_class", "binary", "scratch", "none"))
    e = sub.add_parser("evaluate", parents=[common], help="evaluate a checkpoint on a split")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--manifest", type=Path)
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--target", default="battery")
    a = sub.add_parser("ablate", parents=[common], help="pretrained vs scratch vs binary")
    a.add_argument("--parallel", action="store_true")
    f = sub.add_parser("flow", parents=[common], help="material-flow report for one class")
    f.add_argument("--confusion", type=Path, help='JSON {"classes": [...], "counts": [[...]]}')
    f.add_argument("--checkpoint", type=Path)
    f.add_argument("--manifest", type=Path)
    f.add_argument("--split", choices=("train", "val", "test"), default="test")
    f.add_argument("--target", default="battery")
    pl = sub.add_parser("plot", parents=[common], help="accuracy and loss curves from history CSV")
    pl.add_argument("--history", type=Path, required=True)
    pl.add_argument("--run-id")
    return p


def _require_config(args):
    if args.config is None:
        raise ConfigError(f"{args.command} needs --config")
    config, raw = load_config(args.config)
    return _with_seed(config, args.seed), raw


def _out(args, default="runs_out") -> Path:
    return args.out if args.out is not None else Path(default)


def _cmd_build(args):
    config, _ = _require_config(args)
    manifest = build_dataset(config, _out(args), args.force, args.workers)
    print(format_split_table(manifest))


def _cmd_train(args):
    config, raw = _require_config(args)
    if args.preset:
        config = apply_preset(config, args.preset)
    run = train_run(config, raw, _out(args), args.force)
    print(f"run {run['run_id']}: best epoch {run['best_epoch']}, stopped at {run['stopped_epoch']}")
    print(f"checkpoint: {run['artifacts']['checkpoint']}")


def _manifest_arg(args) -> Path:
    if args.manifest is not None:
        return args.manifest
    if args.config is not None:
        config, _ = load_config(args.config)
        return manifest_path_for(config, _out(args))
    raise ConfigError("pass --manifest or --config to locate the dataset")


def _cmd_evaluate(args):
    report, flow, paths = evaluate_checkpoint(args.checkpoint, _manifest_arg(args), args.split,
                                              args.target, args.out)
    print(format_confusion(report.confusion))
    print(report.format_table())
    print(flow.summary())
    for p in paths:
        print(f"wrote {p}")


def _cmd_ablate(args):
    config, raw = _require_config(args)
    comparison = ablate(config, raw, _out(args), args.force, args.parallel)
    print(format_ablation(comparison))


def _cmd_flow(args):
    if args.confusion is not None:
        try:
            cm = ConfusionMatrix.from_dict(json.loads(args.confusion.read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read confusion matrix {args.confusion}: {exc}") from None
        except ValueError as exc:
            raise DataError(str(exc)) from None
        out_dir = args.out or args.confusion.parent
    elif args.checkpoint is not None:
        model, _ = load_checkpoint(args.checkpoint)
        manifest = read_manifest(_manifest_arg(args))
        if model.class_mapping:
            manifest = manifest.relabel(model.class_mapping, model.classes)
        actual, predicted = predict_split(model, manifest, args.split)
        cm = confusion_from_predictions(actual, predicted, model.classes)
        out_dir = args.out or args.checkpoint.parent
    else:
        raise ConfigError("flow needs --confusion or --checkpoint")
    if args.target not in cm.classes:
        raise ConfigError(f"unknown target class {args.target!r}; valid classes: {list(cm.classes)}")
    flow = material_flow(cm, args.target)
    path = _dump(flow.to_dict(), Path(out_dir) / f"flow_{args.target}.json")
    _verify([path])
    print(flow.summary())
    print(f"wrote {path}")


def _cmd_plot(args):
    records = read_history(args.history)
    run_id = args.run_id or args.history.stem
    paths = plot_history(records, _out(args, str(args.history.parent)), run_id)
    _verify(paths)
    for p in paths:
        print(f"wrote {p}")


COMMANDS = {"build-dataset": _cmd_build, "train": _cmd_train, "evaluate": _cmd_evaluate,
            "ablate": _cmd_ablate, "flow": _cmd_flow, "plot": _cmd_plot}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (WeeeSortError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
