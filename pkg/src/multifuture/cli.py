"""Command-line entry point: ``multifuture <command> [options]``."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .belief import (
    DegenerateGridError,
    build_global_grid,
    compute_grid_geometry,
    load_grid,
    save_grid,
)
from .data import DataError, SynthSpec, build_windows, parse_annotations, synth_generate, write_annotations
from .heatmap import bounds_of, density_grid, render_png, write_density_csv
from .metrics import COLLISION_THRESHOLD, evaluate, write_rows
from .model import NumericError, rollout
from .training import build_configs, fit, format_config, load_checkpoint, parse_config, save_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(args, inputs, outputs, started, config=None) -> Path:
    outputs = [str(p) for p in outputs]
    target = Path(args.manifest) if args.manifest else Path((outputs[0] if outputs else args.command) + ".manifest.json")
    snapshot = {k: v for k, v in vars(args).items() if k not in ("func",)}
    manifest = {
        "command": args.command,
        "version": __version__,
        "config": config if config is not None else snapshot,
        "arguments": snapshot,
        "seed": args.seed,
        "inputs": [str(p) for p in inputs],
        "outputs": outputs,
        "checksums": {p: _sha256(p) for p in outputs},
        "wall_time_s": round(time.perf_counter() - started, 3),
    }
    target.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return target


def _load_scenes(paths, args):
    scenes = []
    for p in paths:
        with open(p, encoding="utf-8") as fh:
            scenes.append(parse_annotations(fh, layout=args.layout.split(",")))
    return scenes


def _windows(scenes, args):
    out = []
    for s in scenes:
        out.extend(build_windows(s, args.t_obs, args.t_pred, args.stride))
    if not out:
        raise DataError("no complete windows in the input data")
    return out


def _grid_for(args, scenes):
    if args.grid:
        return load_grid(args.grid)
    tracks = [t for s in scenes for t in s.tracks()]
    return build_global_grid(tracks, compute_grid_geometry(tracks, side=getattr(args, "side", 5)))


# -- commands ----------------------------------------------------------------------


def cmd_synth(args) -> int:
    started = time.perf_counter()
    spec = SynthSpec(args.kind, args.n_peds, args.n_windows, args.noise, args.seed, args.speed,
                     args.t_obs, args.t_pred)
    scene = synth_generate(spec)
    with open(args.out, "w", encoding="utf-8") as fh:
        write_annotations(scene, fh)
    _write_manifest(args, [], [args.out], started)
    return EXIT_OK


def cmd_build_maps(args) -> int:
    started = time.perf_counter()
    scenes = _load_scenes(args.data, args)
    tracks = [t for s in scenes for t in s.tracks()]
    geom = compute_grid_geometry(tracks, side=args.side, per_axis=args.per_axis)
    save_grid(build_global_grid(tracks, geom), args.out)
    print(f"grid {geom.n}x{geom.m} bins, cell {geom.delta_x:.4g} x {geom.delta_y:.4g}, L={geom.side}")
    _write_manifest(args, args.data, [args.out], started)
    return EXIT_OK


_OVERRIDES = {
    "epochs": "epochs", "lr": "lr", "batch_size": "batch_size", "seed": "seed",
    "adjacency": "adjacency", "sigma": "sigma", "knn_k": "knn_k", "init": "init_mode",
    "belief": "belief", "belief_weight": "belief_weight", "map_samples": "map_samples",
    "warmup": "warmup_epochs",
}


def cmd_train(args) -> int:
    started = time.perf_counter()
    values = parse_config(Path(args.config).read_text()) if args.config else {}
    for flag, key in _OVERRIDES.items():
        v = getattr(args, flag)
        if v is not None:
            values[key] = (v == "on") if flag == "belief" else v
    model_cfg, train_cfg = build_configs(values)
    args.seed = train_cfg.seed
    scenes = _load_scenes(args.data, args)
    windows = _windows(scenes, args)
    grid = _grid_for(args, scenes) if model_cfg.belief else None
    validation = _windows(_load_scenes(args.val_data, args), args) if args.val_data else None
    outputs = [args.out]
    log_path = args.log or args.out + ".log.csv"
    with open(log_path, "w", newline="", encoding="utf-8") as log:
        model, history = fit(windows, grid, model_cfg, train_cfg, log=log, validation=validation)
    outputs.append(log_path)
    save_checkpoint(model, args.out, train_cfg)
    if grid is not None and not args.grid:
        grid_path = args.out + ".grid"
        save_grid(grid, grid_path)
        outputs.append(grid_path)
    last = history[-1] if history else None
    if last:
        print(f"trained {train_cfg.epochs} epochs on {len(windows)} windows; final loss {last.total:.4f}")
    inputs = list(args.data) + list(args.val_data or []) + ([args.config] if args.config else [])
    _write_manifest(args, inputs, outputs, started,
                    config=format_config(model_cfg, train_cfg))
    return EXIT_OK


def _checkpoint_grid(args, model):
    if not model.cfg.belief:
        return None
    path = args.grid or args.checkpoint + ".grid"
    if not os.path.exists(path):
        raise DataError(f"belief conditioning needs a grid file; {path} not found (use --grid)")
    return load_grid(path)


def cmd_predict(args) -> int:
    started = time.perf_counter()
    model, _ = load_checkpoint(args.checkpoint)
    grid = _checkpoint_grid(args, model)
    windows = _windows(_load_scenes(args.data, args), args)
    gen = torch.Generator().manual_seed(args.seed)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["window", "sample", "ped_id", "step", "x", "y"])
        for wi, win in enumerate(windows):
            samples = rollout(model, win, grid, k=args.k, gen=gen, mode=args.mode, steps=args.steps)
            for k in range(samples.shape[0]):
                for p, pid in enumerate(win.ped_ids):
                    for s in range(samples.shape[2]):
                        x, y = samples[k, p, s]
                        w.writerow([wi, k, pid, s, repr(float(x)), repr(float(y))])
    _write_manifest(args, [args.checkpoint, *args.data], [args.out], started)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    started = time.perf_counter()
    model, _ = load_checkpoint(args.checkpoint)
    grid = _checkpoint_grid(args, model)
    windows = _windows(_load_scenes(args.data, args), args)
    report, rows = evaluate(windows, grid, model, k=args.k, seed=args.seed, threshold=args.threshold,
                            mode=args.mode)
    print(report.record())
    print(report.table())
    outputs = []
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            write_rows(rows, fh)
        outputs.append(args.out)
    _write_manifest(args, [args.checkpoint, *args.data], outputs, started)
    return EXIT_OK


def cmd_plot_heatmap(args) -> int:
    started = time.perf_counter()
    with open(args.data[0], encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DataError("prediction file is empty")
    pts = np.array([[float(r["x"]), float(r["y"])] for r in rows])
    bounds = tuple(args.bounds) if args.bounds else bounds_of(pts)
    density, xe, ye = density_grid(pts, bounds, (args.resolution, args.resolution))
    csv_path, png_path = args.out + ".csv", args.out + ".png"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        write_density_csv(density, xe, ye, fh)
    outputs = [csv_path]
    try:
        render_png(density, xe, ye, png_path)
        outputs.append(png_path)
    except Exception as exc:  # the CSV is the contract; the image is best-effort
        print(f"warning: could not render {png_path}: {exc}", file=sys.stderr)
    _write_manifest(args, args.data, outputs, started)
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------------


def _common(p, data_required=True):
    p.add_argument("--data", nargs="+", required=data_required, help="annotation file(s)")
    p.add_argument("--layout", default="frame,ped_id,x,y", help="column order of annotation files")
    p.add_argument("--t-obs", type=int, default=8)
    p.add_argument("--t-pred", type=int, default=12)
    p.add_argument("--stride", type=int, default=None, help="window stride in frames (default: t_obs + t_pred)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--manifest", default=None, help="manifest path (default: <first output>.manifest.json)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="multifuture", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("synth", help="write a synthetic annotation file")
    p.add_argument("--kind", choices=["linear", "y_fork", "t_junction"], default="linear")
    p.add_argument("--n-peds", type=int, default=1)
    p.add_argument("--n-windows", type=int, default=8)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--speed", type=float, default=0.5)
    p.add_argument("--t-obs", type=int, default=8)
    p.add_argument("--t-pred", type=int, default=12)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-maps", help="build the belief-map grid from training data")
    _common(p)
    p.add_argument("--side", type=int, default=5, help="belief map side L (odd)")
    p.add_argument("--per-axis", action="store_true", help="size bins from per-axis step statistics")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_maps)

    p = sub.add_parser("train", help="train a model")
    _common(p)
    p.set_defaults(seed=None)
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--grid", default=None, help="grid file (default: built from --data)")
    p.add_argument("--side", type=int, default=5)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--warmup", type=int, default=None, help="KL warm-up epochs")
    p.add_argument("--adjacency", choices=["similarity", "knn", "ones"], default=None)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--knn-k", type=int, default=None)
    p.add_argument("--init", choices=["zero", "learned", "absolute"], default=None)
    p.add_argument("--belief", choices=["on", "off"], default=None)
    p.add_argument("--belief-weight", type=float, default=None, help="weight k of the belief-map KL")
    p.add_argument("--map-samples", type=int, default=None)
    p.add_argument("--val-data", nargs="+", default=None, help="validation file(s); keeps the best-validation weights")
    p.add_argument("--log", default=None, help="per-epoch CSV log (default: <out>.log.csv)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("predict", cmd_predict, "sample future trajectories"),
        ("evaluate", cmd_evaluate, "compute TopK ADE/FDE, NLL and collision rates"),
    ):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--grid", default=None, help="grid file (default: <checkpoint>.grid)")
        p.add_argument("--k", type=int, default=20)
        p.add_argument("--mode", choices=["sample", "mean"], default="sample")
        if name == "predict":
            p.add_argument("--steps", type=int, default=None, help="generated steps (default: t_pred)")
            p.add_argument("--out", required=True)
        else:
            p.add_argument("--threshold", type=float, default=COLLISION_THRESHOLD)
            p.add_argument("--out", default=None, help="optional per-window CSV")
        p.set_defaults(func=func)

    p = sub.add_parser("plot-heatmap", help="density grid of predicted positions")
    p.add_argument("--data", nargs=1, required=True, help="prediction CSV from `predict`")
    p.add_argument("--bounds", nargs=4, type=float, default=None, metavar=("X0", "Y0", "X1", "Y1"))
    p.add_argument("--resolution", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output prefix for .csv and .png")
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_plot_heatmap)
    return parser


def cmd_run(argv=None) -> int:
    threads = os.environ.get("MULTIFUTUR_THREADS") or os.environ.get("MULTIFUTURE_THREADS")
    torch.set_num_threads(max(1, int(threads)) if threads else 1)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    if getattr(args, "seed", None) is None:
        args.seed = 0 if args.command != "train" else None
    try:
        return args.func(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, DegenerateGridError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(cmd_run())
