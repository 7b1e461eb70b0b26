"""Command-line entry points: ``train``, ``infer``, ``eval``, ``ablate`` and ``synth``.

Configuration is resolved in three layers: dataclass defaults, an optional
``--config`` file, then flags given explicitly on the command line. Every
run directory receives a ``config.txt`` snapshot with all fields spelled out,
which can be fed back through ``--config`` to repeat the run.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .backbone import TeacherLoadError
from .checkpoint import CheckpointError, load_checkpoint
from .data import DataError, DatasetSpec, export_synthetic, load_dataset, make_synthetic, preprocess, read_image
from .distill import ConfigError, NonFiniteLossError
from .inference import CalibrationError, calibrate, infer, save_heatmap, write_results
from .metrics import write_report
from .model import VARIANTS
from .pipeline import RunConfig, evaluate, fit, maps_label, parse_maps, read_config, write_config

LOGGER = logging.getLogger("dskd")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

# flag dest -> RunConfig field
_RUN_FLAGS = {
    "data": "data",
    "category": "category",
    "size": "size",
    "epochs": "epochs",
    "lr": "lr",
    "lambda_l2": "lambda_l2",
    "sigma": "sigma",
    "batch_size": "batch_size",
    "seed": "seed",
    "variant": "variant",
    "dfe": "dfe",
    "maps": "maps",
    "out": "out",
    "teacher": "teacher",
    "teacher_seed": "teacher_seed",
    "device": "device",
}


def _add_run_flags(p: argparse.ArgumentParser, training: bool = True) -> None:
    # defaults are None so that only explicitly given flags override the config file
    p.add_argument("--config", help="flat key = value file; explicit flags win over it")
    p.add_argument("--data", help="dataset root (category folders below it)")
    p.add_argument("--category")
    p.add_argument("--size", type=int, help="square input size, a multiple of 32 (128 or 256 for real data)")
    p.add_argument("--maps", help="anomaly maps to fuse: M1-3 (default), M1, M2, M3 or a comma list")
    p.add_argument("--out", help="output directory")
    p.add_argument("--device")
    if not training:
        return
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda", dest="lambda_l2", type=float, help="weight of the l2 term")
    p.add_argument("--sigma", type=float, help="Gaussian smoothing sigma")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--no-dfe", dest="dfe", action="store_const", const=False)
    p.add_argument(
        "--teacher", help="'imagenet' (torchvision weights), 'random', or a path to a ResNet18 state dict"
    )
    p.add_argument("--teacher-seed", dest="teacher_seed", type=int, help="init seed of a random teacher")


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults <- config file <- explicit flags."""
    values: Dict[str, object] = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config: file not found: {path}")
        values.update(read_config(path))
    for dest, name in _RUN_FLAGS.items():
        given = getattr(args, dest, None)
        if given is not None:
            values[name] = given
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def _require_dataset(cfg: RunConfig) -> None:
    if not cfg.data or not cfg.category:
        raise ConfigError("data/category: both --data and --category are required")


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    _require_dataset(cfg)
    train_set = load_dataset(DatasetSpec(cfg.data, cfg.category, "train", cfg.size))
    out = Path(cfg.out)
    result = fit(cfg, train_set, out_dir=out)
    final = result.history.epoch_losses[-1]
    LOGGER.info("trained %s for %d epochs, final losses %s", cfg.variant, cfg.epochs, final)
    LOGGER.info("checkpoint written to %s", out / "checkpoint.pt")
    return EXIT_OK


def _load_for_inference(args: argparse.Namespace):
    model, calib, fp = load_checkpoint(args.checkpoint, teacher_source=args.teacher)
    model.to(args.device or "cpu")
    return model, calib, fp


def cmd_infer(args: argparse.Namespace) -> int:
    model, calib, fp = _load_for_inference(args)
    levels = parse_maps(args.maps) if args.maps else tuple(fp.get("maps", (1, 2, 3)))
    if list(levels) != list(fp.get("maps", levels)):
        LOGGER.warning("calibration was taken on %s; normalized scores for %s are not calibrated",
                       maps_label(fp["maps"]), maps_label(levels))
    out = Path(args.out or "runs/infer")
    out.mkdir(parents=True, exist_ok=True)
    results = []
    for path in map(Path, args.images):
        raw = read_image(path)
        x = preprocess(raw, model.input_size)
        r = infer(x, model, calib, sample_id=path.stem, maps=levels)
        results.append(r)
        overlay = np.asarray(raw.convert("RGB").resize((model.input_size,) * 2))
        save_heatmap(r.map, out / f"{path.stem}_amap.png", overlay=overlay)
        print(f"{path}\traw={r.raw_score:.6f}\tscore={r.normalized_score:.4f}\tanomalous={int(r.is_anomalous)}")
    write_results(out / "scores.csv", results)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    model, calib, fp = _load_for_inference(args)
    if args.config:
        cfg_values = read_config(args.config)
        args.data = args.data or cfg_values.get("data")
        args.category = args.category or cfg_values.get("category")
    if not args.data or not args.category:
        raise ConfigError("data/category: both --data and --category are required")
    size = model.input_size
    if args.size is not None and args.size != size:
        raise ConfigError(f"size: checkpoint was trained at {size}px, --size asks for {args.size}")
    levels = parse_maps(args.maps) if args.maps else tuple(fp.get("maps", (1, 2, 3)))
    if list(levels) != list(fp.get("maps", levels)):
        # normalized scores need the max over training images for this map selection
        train_set = load_dataset(DatasetSpec(args.data, args.category, "train", size))
        calib = calibrate(model, torch.stack([s.image for s in train_set]), levels)
    test_set = load_dataset(DatasetSpec(args.data, args.category, "test", size))
    out = Path(args.out or "runs/eval")
    out.mkdir(parents=True, exist_ok=True)
    ev = evaluate(model, calib, test_set, levels, heatmap_dir=out / "heatmaps")
    write_report(out / "report.csv", [ev.row(category=args.category)])
    write_results(out / "scores.csv", ev.results, [s.label for s in test_set])
    print(f"{args.category} [{maps_label(levels)}]: image_auroc={_fmt(ev.image_auroc)} "
          f"pixel_auroc={_fmt(ev.pixel_auroc)} pro={_fmt(ev.pro)}")
    return EXIT_OK


def _fmt(v: Optional[float]) -> str:
    return "undefined" if v is None else f"{v:.4f}"


def _split_list(text: str) -> List[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _ablation_data(cfg: RunConfig, synth_sizes: Sequence[int]):
    if cfg.data:
        _require_dataset(cfg)
        return (
            load_dataset(DatasetSpec(cfg.data, cfg.category, "train", cfg.size)),
            load_dataset(DatasetSpec(cfg.data, cfg.category, "test", cfg.size)),
        )
    n_train, n_test = synth_sizes
    return make_synthetic(cfg.seed, n_train, n_test, 0.5, cfg.size)


def run_ablation_cell(cfg: RunConfig, map_sets: Sequence[str], synth_sizes: Sequence[int] = (64, 64)) -> List[dict]:
    """Train one (variant, dfe, seed) cell, then evaluate it under every map selection.

    Without ``cfg.data`` the cell trains on a synthetic set generated from
    ``cfg.seed``. Calibration is redone per map selection.
    """
    train_set, test_set = _ablation_data(cfg, synth_sizes)
    result = fit(cfg, train_set)
    images = torch.stack([s.image for s in train_set])
    rows = []
    for maps in map_sets:
        levels = parse_maps(maps)
        calib = calibrate(result.model, images, levels)
        ev = evaluate(result.model, calib, test_set, levels)
        rows.append(ev.row(variant=cfg.variant, dfe="on" if cfg.dfe else "off", maps=maps_label(levels), seed=cfg.seed))
    return rows


def summarize(rows: Sequence[dict]) -> List[dict]:
    """Average the metric columns over seeds, keeping first-seen row order."""
    groups: Dict[tuple, List[dict]] = {}
    for r in rows:
        groups.setdefault((r["variant"], r["dfe"], r["maps"]), []).append(r)
    out = []
    for (variant, dfe, maps), members in groups.items():
        row = {"variant": variant, "dfe": dfe, "maps": maps, "seeds": len(members)}
        for k in ("image_auroc", "pixel_auroc", "pro"):
            vals = [m[k] for m in members if m[k] is not None]
            row[k] = float(np.mean(vals)) if len(vals) == len(members) else None
        out.append(row)
    return out


def _write_table(path: Path, rows: Sequence[dict], columns: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for r in rows:
            writer.writerow(["undefined" if r.get(c) is None else f"{r[c]:.6f}" if isinstance(r[c], float) else r[c]
                             for c in columns])


def cmd_ablate(args: argparse.Namespace) -> int:
    base = resolve_config(args)
    variants = _split_list(args.variants)
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"variants: {v!r} is not one of {VARIANTS}")
    dfe_modes = []
    for mode in _split_list(args.dfe_modes):
        if mode not in ("on", "off"):
            raise ConfigError(f"dfe-modes: expected on/off, got {mode!r}")
        dfe_modes.append(mode == "on")
    map_sets = _split_list(args.map_sets)
    for m in map_sets:
        parse_maps(m)
    seeds = [int(s) for s in _split_list(args.seeds)] if args.seeds else [base.seed]
    cells = [base.with_overrides(variant=v, dfe=d, seed=s) for v in variants for d in dfe_modes for s in seeds]
    for c in cells:
        c.validate()
    synth_sizes = (args.synth_train, args.synth_test)
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [pool.submit(run_ablation_cell, c, map_sets, synth_sizes) for c in cells]
            per_cell = [f.result() for f in futures]
    else:
        per_cell = [run_ablation_cell(c, map_sets, synth_sizes) for c in cells]
    rows = [r for cell in per_cell for r in cell]
    out = Path(base.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(base, out / "config.txt")
    metric_cols = ["image_auroc", "pixel_auroc", "pro"]
    _write_table(out / "ablation_runs.csv", rows, ["variant", "dfe", "maps", "seed", *metric_cols])
    table = summarize(rows)
    _write_table(out / "ablation.csv", table, ["variant", "dfe", "maps", "seeds", *metric_cols])
    print(f"{'variant':<8}{'dfe':<5}{'maps':<10}{'image':>8}{'pixel':>8}{'pro':>8}")
    for r in table:
        print(f"{r['variant']:<8}{r['dfe']:<5}{r['maps']:<10}"
              + "".join(f"{_fmt(r[k]):>8}" for k in metric_cols))
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    base = export_synthetic(
        args.out, seed=args.seed, n_train=args.n_train, n_test=args.n_test,
        defect_rate=args.defect_rate, size=args.size, category=args.category,
    )
    print(base)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dskd", description="Dual-student knowledge distillation anomaly detection")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train students on the normal images of one category")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="score individual images with a trained checkpoint")
    p.add_argument("images", nargs="+")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--maps")
    p.add_argument("--out")
    p.add_argument("--teacher", help="override the teacher source recorded in the checkpoint")
    p.add_argument("--device")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="metrics, per-sample scores and heatmaps on a test split")
    p.add_argument("--checkpoint", required=True)
    _add_run_flags(p, training=False)
    p.add_argument("--teacher", help="override the teacher source recorded in the checkpoint")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare variants, DFE modes and map selections")
    _add_run_flags(p)
    p.add_argument("--variants", default="DS,T-E,T-D,E-D")
    p.add_argument("--dfe-modes", default="on", help="comma list of on/off")
    p.add_argument("--map-sets", default="M1-3", help="comma list, e.g. M1,M2,M3,M1-3")
    p.add_argument("--seeds", help="comma list of seeds (default: --seed)")
    p.add_argument("--jobs", type=int, default=1, help="train cells in parallel processes")
    p.add_argument("--synth-train", type=int, default=64, help="synthetic train images when --data is absent")
    p.add_argument("--synth-test", type=int, default=64, help="synthetic test images when --data is absent")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("synth", help="write a synthetic texture dataset in the MVTec layout")
    p.add_argument("--out", required=True)
    p.add_argument("--category", default="synthetic")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-train", type=int, default=64)
    p.add_argument("--n-test", type=int, default=64)
    p.add_argument("--defect-rate", type=float, default=0.5)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return args.func(args)
    except (NonFiniteLossError, CalibrationError) as exc:
        LOGGER.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except ConfigError as exc:
        LOGGER.error("usage error: %s", exc)
        return EXIT_USAGE
    except (DataError, TeacherLoadError, CheckpointError) as exc:
        LOGGER.error("%s", exc)
        return EXIT_DATA
    except ValueError as exc:
        LOGGER.error("usage error: %s", exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
