"""Command-line entry point: synth, split, train, eval and gradcam.

Exit codes: 0 on success, 2 on a usage error, 1 on a runtime error. Every
command writes into a staging directory that is moved into ``--out-dir`` only
after the command succeeds, so a failed run leaves nothing behind.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .data import (PATHOLOGIES, Manifest, NormalizationStats, SampleRecord, SyntheticDatasetSpec,
                   apply_stats, generate_synthetic, load_manifest, load_regions, manifest_csv,
                   patient_level_split, prepare_image, split_report)
from .densenet import ModelConfig, count_weight_layers, load_weights, save_weights
from .errors import ConfigError, InvalidArgumentError
from .evaluation import metrics_table
from .fileio import encode_ppm, read_pgm, staged_output
from .gradcam import (gradcam, localization_score, render_overlay, sidecar_json,
                      upsample_heatmap)
from .loss import ClassWeights, contribution_csv, contribution_report
from .optim import TrainConfig
from .pipeline import score_manifest, subset_manifest, train_from_manifest

log = logging.getLogger("densecxr")


class UsageError(Exception):
    """Bad flag values discovered after argparse has accepted the syntax."""


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _on_off(text: str) -> bool:
    if text.lower() in ("on", "true", "yes", "1"):
        return True
    if text.lower() in ("off", "false", "no", "0"):
        return False
    raise argparse.ArgumentTypeError(f"expected on or off, got {text!r}")


def _write_text(stage: Path, name: str, text: str) -> Path:
    path = stage / name
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def _relocated(manifest: Manifest, records, out_dir: Path) -> Manifest:
    """Rewrite image paths so the records resolve from ``out_dir``."""
    moved = [SampleRecord(os.path.relpath(manifest.resolve(r), out_dir), r.patient_id, r.labels)
             for r in records]
    return Manifest(manifest.class_names, moved, out_dir)


def _run_manifest(args, started: float, inputs: dict, outputs: list[str]) -> str:
    flags = {k: v for k, v in sorted(vars(args).items()) if k not in ("handler",)}
    return json.dumps({
        "command": args.command,
        "flags": flags,
        "seed": args.seed,
        "inputs": inputs,
        "outputs": sorted(outputs),
        "version": __version__,
        "wall_seconds": round(time.perf_counter() - started, 3),
    }, indent=2, default=str)


def _finish(stage: Path, args, started: float, inputs: dict) -> None:
    outputs = [str(p.relative_to(stage)) for p in stage.rglob("*") if p.is_file()]
    _write_text(stage, "run.json", _run_manifest(args, started, inputs, outputs))


def _resolve_classes(tokens: list[str], class_names: list[str]) -> list[int]:
    out = []
    for tok in tokens:
        if tok.isdigit():
            idx = int(tok)
        elif tok in class_names:
            idx = class_names.index(tok)
        else:
            raise UsageError(f"unknown class {tok!r}; known: {', '.join(class_names)}")
        if not 0 <= idx < len(class_names):
            raise UsageError(f"class index {idx} outside [0, {len(class_names)})")
        out.append(idx)
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> None:
    if args.prevalence is None:
        prevalence = (0.1, 0.1, 0.3, 0.5) if args.classes == 4 else (0.2,) * args.classes
    elif len(args.prevalence) == 1:
        prevalence = tuple(args.prevalence) * args.classes
    else:
        prevalence = tuple(args.prevalence)
    spec = SyntheticDatasetSpec(n_images=args.n, height=args.size, width=args.size,
                                num_classes=args.classes, prevalence=prevalence,
                                noise_std=args.noise, seed=args.seed,
                                background=args.background, brightness=args.brightness)
    try:
        spec.validate()
    except InvalidArgumentError as exc:
        raise UsageError(str(exc))
    started = time.perf_counter()
    out = Path(args.out_dir)
    with staged_output(out) as stage:
        manifest = generate_synthetic(spec, stage)
        _finish(stage, args, started, {})
    log.info("wrote %d images for %d classes to %s", len(manifest), spec.num_classes, out)


def cmd_split(args) -> None:
    if not 0.0 < args.fraction < 1.0:
        raise UsageError(f"--fraction must be in (0, 1), got {args.fraction}")
    started = time.perf_counter()
    manifest = load_manifest(args.manifest)
    result = patient_level_split(manifest.records, args.fraction, args.seed)
    out = Path(args.out_dir).resolve()
    regions_src = Path(args.manifest).resolve().parent / "regions.csv"
    with staged_output(out) as stage:
        _write_text(stage, "train.csv", manifest_csv(_relocated(manifest, result.train, out)))
        _write_text(stage, "test.csv", manifest_csv(_relocated(manifest, result.test, out)))
        report = split_report(manifest, result)
        _write_text(stage, "split_report.json", json.dumps(report, indent=2))
        if regions_src.is_file():
            _write_text(stage, "regions.csv", _relocated_regions(regions_src, out))
        _finish(stage, args, started, {"manifest": str(args.manifest)})
    log.info("split %d images: %d train / %d test, patient overlap %d", len(manifest),
             len(result.train), len(result.test), report["patient_overlap"])


def _relocated_regions(src: Path, out_dir: Path) -> str:
    with open(src, newline="") as fh:
        rows = list(csv.reader(fh))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(rows[0])
    for row in rows[1:]:
        w.writerow([os.path.relpath(src.parent / row[0], out_dir), *row[1:]])
    return buf.getvalue()


def cmd_train(args) -> None:
    from .plots import plot_contributions, plot_training

    started = time.perf_counter()
    manifest = load_manifest(args.manifest)
    if args.subset is not None:
        if not 0.0 < args.subset <= 1.0:
            raise UsageError(f"--subset must be in (0, 1], got {args.subset}")
        manifest = subset_manifest(manifest, args.subset, args.seed)
    model_config = ModelConfig(
        input_channels=args.channels, input_size=(args.size, args.size),
        initial_channels=args.initial_channels, growth_rate=args.growth_rate,
        block_layout=tuple(args.blocks), num_classes=len(manifest.class_names),
        dropout_rate=args.dropout, use_batch_norm=not args.no_batch_norm)
    train_config = TrainConfig(batch_size=args.batch_size, epochs=args.epochs, initial_lr=args.lr,
                               lr_decay_factor=args.lr_decay, lr_patience=args.lr_patience,
                               min_lr=args.min_lr, seed=args.seed,
                               weighted_loss=args.weighted_loss)
    try:
        model_config.validate()
        train_config.validate()
    except (ConfigError, InvalidArgumentError) as exc:
        raise UsageError(str(exc))
    log.info("training %d-layer model on %d images", count_weight_layers(model_config),
             len(manifest))
    out = Path(args.out_dir)
    with staged_output(out) as stage:
        def checkpoint(rec, model):
            save_weights(model, stage / "checkpoints" / f"epoch_{rec.epoch:03d}.bin")

        trained = train_from_manifest(manifest, model_config, train_config, model_seed=args.seed,
                                      on_epoch=checkpoint if args.checkpoints else None)
        save_weights(trained.model, stage / "weights.bin")
        trained.stats.save(stage / "stats.json")
        weighted_rows = contribution_report(trained.labels, trained.weights, manifest.class_names)
        _write_text(stage, "contributions.csv", contribution_csv(weighted_rows))
        _write_text(stage, "train_log.csv", trained.result.log_csv())
        if not args.no_figures:
            unit_rows = contribution_report(trained.labels,
                                            ClassWeights.unit(len(manifest.class_names)),
                                            manifest.class_names)
            plot_contributions(unit_rows, stage / "contributions_unweighted.png",
                               "Loss contribution, unweighted")
            plot_contributions(weighted_rows, stage / "contributions_weighted.png",
                               "Loss contribution, weighted")
            plot_training(trained.result.history, stage / "training.png")
        _finish(stage, args, started, {"manifest": str(args.manifest)})
    losses = trained.result.losses
    log.info("final loss %.5f (first epoch %.5f)", losses[-1], losses[0])


def cmd_eval(args) -> None:
    if not Path(args.stats).is_file():
        raise FileNotFoundError(
            f"stats file {args.stats} not found; refusing to evaluate without training statistics")
    if args.resamples and args.resamples < 100:
        raise UsageError("--resamples must be 0 (off) or at least 100")
    if not 0.0 < args.level < 1.0:
        raise UsageError("--level must be in (0, 1)")
    from .plots import plot_roc

    started = time.perf_counter()
    stats = NormalizationStats.load(args.stats)
    model = load_weights(args.weights)
    manifest = load_manifest(args.manifest)
    if model.config.num_classes != len(manifest.class_names):
        raise InvalidArgumentError(f"model predicts {model.config.num_classes} classes but the "
                                   f"manifest has {len(manifest.class_names)}")
    scores = score_manifest(model, manifest, stats)
    report = metrics_table(scores, manifest.label_matrix(), manifest.class_names,
                           threshold=args.threshold, n_resamples=args.resamples or None,
                           confidence_level=args.level, seed=args.seed)
    out = Path(args.out_dir)
    with staged_output(out) as stage:
        _write_text(stage, "metrics.csv", report.table_csv())
        _write_text(stage, "metrics.json", report.to_json())
        if args.resamples:
            _write_text(stage, "auc_ci.csv", report.bootstrap_csv())
            _write_text(stage, "auc_ci_table.csv", report.ci_table_csv())
        for k, name in enumerate(manifest.class_names):
            _write_text(stage, f"roc/{name}.csv", report.roc_csv(k))
        _write_text(stage, "scores.csv", _scores_csv(manifest, scores))
        if not args.no_figures:
            plot_roc(report, stage / "roc.png")
        _finish(stage, args, started, {"weights": str(args.weights), "manifest": str(args.manifest),
                                       "stats": str(args.stats)})
    for row in report.rows:
        log.info("%-14s AUC %.4f", row.class_name, row.auc)


def _scores_csv(manifest: Manifest, scores: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["Image", *manifest.class_names])
    for r, row in zip(manifest.records, scores):
        w.writerow([r.image_path, *(repr(float(v)) for v in row)])
    return buf.getvalue()


def cmd_gradcam(args) -> None:
    if not 0.0 < args.alpha <= 1.0:
        raise UsageError(f"--alpha must be in (0, 1], got {args.alpha}")
    if not args.images and not args.manifest:
        raise UsageError("give --images or --manifest")
    started = time.perf_counter()
    stats = NormalizationStats.load(args.stats)
    model = load_weights(args.weights)
    cfg = model.config

    regions_path = Path(args.regions) if args.regions else None
    if args.manifest:
        manifest = load_manifest(args.manifest)
        class_names = manifest.class_names
        records = manifest.records if args.limit is None else manifest.records[:args.limit]
        paths = [manifest.resolve(r) for r in records]
        if regions_path is None and (manifest.root / "regions.csv").is_file():
            regions_path = manifest.root / "regions.csv"
    else:
        class_names = (PATHOLOGIES[:cfg.num_classes] if cfg.num_classes <= len(PATHOLOGIES)
                       else [f"class{c}" for c in range(cfg.num_classes)])
        paths = [Path(p) for p in args.images]
    if len(class_names) != cfg.num_classes:
        raise InvalidArgumentError("manifest classes do not match the model")
    classes = _resolve_classes(args.classes, class_names)
    regions = {}
    if regions_path is not None:
        regions = {(str((regions_path.parent / img).resolve()), c): box
                   for (img, c), box in load_regions(regions_path).items()}
    missing = [str(p) for p in paths if not p.is_file()]
    if missing:
        raise FileNotFoundError("missing image(s): " + ", ".join(missing))

    out = Path(args.out_dir)
    summary = [["image", "class", "probability", "raw_max", "heatmap_empty", "localization_score"]]
    with staged_output(out) as stage:
        for path in paths:
            raw = prepare_image(read_pgm(path), cfg.input_size, cfg.input_channels == 3)
            x = apply_stats(raw, stats)
            for c in classes:
                heat = gradcam(model, x, c)
                heat = upsample_heatmap(heat, cfg.input_size)
                box = regions.get((str(path.resolve()), c))
                score = localization_score(heat.values, box["quadrant"]) if box else None
                stem = f"{path.stem}_{class_names[c]}"
                rgb = render_overlay(raw[0], heat.values, args.alpha)
                (stage / "overlays").mkdir(exist_ok=True)
                (stage / "overlays" / f"{stem}.ppm").write_bytes(encode_ppm(rgb))
                _write_text(stage, f"overlays/{stem}.json",
                            sidecar_json(heat, class_names[c], str(path), score))
                summary.append([str(path), class_names[c], repr(heat.probability),
                                repr(heat.raw_max), heat.is_empty,
                                "" if score is None else repr(score)])
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(summary)
        _write_text(stage, "gradcam_summary.csv", buf.getvalue())
        _finish(stage, args, started, {"weights": str(args.weights), "stats": str(args.stats)})
    log.info("wrote %d overlays to %s", len(summary) - 1, out / "overlays")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for every random choice")
    common.add_argument("--out-dir", default="out", help="directory receiving the outputs")
    common.add_argument("--quiet", action="store_true", help="only log warnings and errors")
    common.add_argument("--config", help="flat key=value file supplying flag defaults")

    parser = argparse.ArgumentParser(prog="densecxr",
                                     description="Desk-scale DenseNet chest-pathology pipeline.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic labelled dataset")
    p.add_argument("--n", type=int, default=2000, help="number of images")
    p.add_argument("--size", type=int, default=32, help="image side length (even)")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--prevalence", type=_float_list, default=None,
                   help="comma-separated per-class prevalence, or one value for all")
    p.add_argument("--noise", type=float, default=SyntheticDatasetSpec.noise_std)
    p.add_argument("--background", type=float, default=SyntheticDatasetSpec.background)
    p.add_argument("--brightness", type=float, default=SyntheticDatasetSpec.brightness)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("split", parents=[common], help="patient-level train/test split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--fraction", type=float, default=0.8, help="train share of images")
    p.set_defaults(handler=cmd_split)

    p = sub.add_parser("train", parents=[common], help="train a model on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--lr-decay", type=float, default=0.5)
    p.add_argument("--lr-patience", type=int, default=1)
    p.add_argument("--min-lr", type=float, default=1e-5)
    p.add_argument("--weighted-loss", type=_on_off, default=True, metavar="{on,off}")
    p.add_argument("--dropout", type=float, default=0.10)
    p.add_argument("--size", type=int, default=32, help="model input side length")
    p.add_argument("--channels", type=int, choices=(1, 3), default=1)
    p.add_argument("--initial-channels", type=int, default=16)
    p.add_argument("--growth-rate", type=int, default=8)
    p.add_argument("--blocks", type=_int_list, default=[2, 2, 2], help="layers per dense block")
    p.add_argument("--no-batch-norm", action="store_true")
    p.add_argument("--subset", type=float, default=None,
                   help="train on a seeded random fraction of the manifest")
    p.add_argument("--checkpoints", action="store_true",
                   help="also write checkpoints/epoch_NNN.bin after every epoch")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="score a test manifest")
    p.add_argument("--weights", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--stats", required=True, help="normalization stats from training")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--resamples", type=int, default=1000, help="bootstrap resamples, 0 disables")
    p.add_argument("--level", type=float, default=0.95, help="confidence level")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("gradcam", parents=[common], help="heatmap overlays for chosen classes")
    p.add_argument("--weights", required=True)
    p.add_argument("--stats", required=True)
    p.add_argument("--images", nargs="+", help="PGM images to explain")
    p.add_argument("--manifest", help="explain manifest images instead of --images")
    p.add_argument("--limit", type=int, default=None, help="first N manifest images only")
    p.add_argument("--classes", type=lambda s: [t for t in s.split(",") if t], required=True,
                   help="comma-separated class names or indices")
    p.add_argument("--alpha", type=float, default=0.5, help="heatmap blend weight")
    p.add_argument("--regions", help="regions.csv with ground-truth boxes")
    p.set_defaults(handler=cmd_gradcam)
    return parser


def _load_config(path: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    """Parse flags; values from ``--config`` act as defaults that explicit flags override."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            values = _load_config(args.config)
        except (OSError, UsageError) as exc:
            parser.error(str(exc))
        sub = parser._subparsers._group_actions[0].choices[args.command]
        actions = {a.dest: a for a in sub._actions}
        unknown = sorted(set(values) - set(actions))
        if unknown:
            parser.error(f"unknown config key(s): {', '.join(unknown)}")
        defaults = {}
        for key, text in values.items():
            action = actions[key]
            if isinstance(action, argparse._StoreTrueAction):
                defaults[key] = _on_off(text)
            else:
                try:
                    defaults[key] = action.type(text) if action.type else text
                except (argparse.ArgumentTypeError, ValueError) as exc:
                    parser.error(f"config key {key}: {exc}")
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def main(argv: list[str] | None = None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        args.handler(args)
    except UsageError as exc:
        print(f"densecxr {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, ArithmeticError, RuntimeError, IndexError) as exc:
        print(f"densecxr {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
