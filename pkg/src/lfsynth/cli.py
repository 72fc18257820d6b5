"""Command-line surface.

Subcommands: gradcheck, gen-data, train, synthesize, evaluate, ablate.
Every command is replayable from its recorded config and seed. Exit codes:
0 success, 1 user error, 2 internal invariant violation.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import traceback
from pathlib import Path

import numpy as np

from . import gradcheck as gradcheck_mod
from . import metrics as metrics_mod
from . import synthgen
from .lightfield import (
    ViewCoord,
    corner_views,
    load_lightfield,
    write_float_raster,
    _write_png,
)
from .networks import NetKind, load_checkpoint
from .pipeline import synthesize
from .training import TrainConfig, read_config, train, write_config


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        raise UserError(message)


def fmt(x: float) -> str:
    """Four significant digits, matching the precision tables are quoted at."""
    return f"{x:.4g}"


def _build_parser() -> _Parser:
    parser = _Parser(prog="lfsynth", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and the full model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=20, help="random instances per op")
    p.add_argument("--instances", type=int, default=20, help="end-to-end model instances")

    p = sub.add_parser("gen-data", help="render a synthetic light field with ground truth")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", choices=synthgen.PRESETS)
    src.add_argument("--scene", help="path to a scene.json to replay")
    p.add_argument("--size", type=int, default=64, help="spatial extent for presets")
    p.add_argument("--grid", type=int, default=2, help="angular extent N for presets")

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset", required=True, nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--wide", action="store_true", help="wide-baseline model kind")
    p.add_argument("--gamma", type=float, default=0.4)

    p = sub.add_parser("synthesize", help="synthesize one view from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--p", type=float, required=True)
    p.add_argument("--q", type=float, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dump-internals", action="store_true",
                   help="also write disparity/mask/warp float rasters")
    p.add_argument("--gamma", type=float, default=0.4)
    p.add_argument("--bn-mode", choices=("batch", "running"), default="batch",
                   help="test-time normalization statistics")

    p = sub.add_parser("evaluate", help="score every in-between view of a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--crop", type=int, default=0, help="border pixels to ignore")
    p.add_argument("--gamma", type=float, default=0.4)
    p.add_argument("--bn-mode", choices=("batch", "running"), default="batch",
                   help="test-time normalization statistics")

    p = sub.add_parser("ablate", help="train and score a variant matrix")
    p.add_argument("--matrix", choices=("loss", "models"), required=True)
    p.add_argument("--config", required=True, help="base training config")
    p.add_argument("--dataset", required=True, nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--gamma", type=float, default=0.4)

    return parser


def _load_datasets(paths: list[str], gamma: float):
    return [load_lightfield(p, gamma) for p in paths]


def cmd_gradcheck(args) -> int:
    results = gradcheck_mod.run_all(args.seed, args.trials, args.instances)
    width = max(len(k) for k in results)
    ok = True
    for name, err in results.items():
        status = "ok" if err < gradcheck_mod.REL_TOL else "FAIL"
        ok &= err < gradcheck_mod.REL_TOL
        print(f"{name:<{width}s}  max rel err {fmt(err):>10s}  {status}")
    print(f"tolerance {fmt(gradcheck_mod.REL_TOL)}: " + ("all passed" if ok else "FAILURES"))
    return 0 if ok else 2


def cmd_gen_data(args) -> int:
    if args.scene:
        spec, seed = synthgen.load_scene(args.scene)
        if args.seed:
            seed = args.seed
    else:
        spec = synthgen.preset_scene(args.preset, n=args.grid, size=args.size)
        seed = args.seed
    synthgen.write_dataset(spec, seed, args.out)
    print(f"wrote {spec.n + 1}x{spec.n + 1} light field "
          f"({spec.height}x{spec.width}) with ground truth to {args.out}")
    return 0


def cmd_train(args) -> int:
    config = read_config(args.config)
    if args.seed is not None:
        config = TrainConfig(**{**vars(config), "seed": args.seed})
    if args.wide:
        config = TrainConfig(**{**vars(config), "net_kind": NetKind.WIDE.value, "d_max": 60.0})
    dataset = _load_datasets(args.dataset, args.gamma)
    weights, records = train(dataset, config, out_dir=args.out)
    final = records[-1]
    print(f"trained {config.net_kind} for {config.iterations} iterations; "
          f"final loss {fmt(final['total'])}; artifacts in {args.out}")
    return 0


def cmd_synthesize(args) -> int:
    weights, _ = load_checkpoint(args.checkpoint)
    lf = load_lightfield(args.dataset, args.gamma)
    n = lf.n
    if not (0 <= args.p <= n and 0 <= args.q <= n):
        raise UserError(f"position ({args.p}, {args.q}) outside the [0, {n}] grid")
    coord = ViewCoord(args.p, args.q)
    if (args.p, args.q) in {(0, 0), (0, n), (n, 0), (n, n)}:
        print(f"warning: ({fmt(args.p)}, {fmt(args.q)}) is an input corner; "
              "its warp is the identity and the synthesized view should match the input")
    if not (float(args.p).is_integer() and float(args.q).is_integer()):
        print("note: non-integer position; the model was trained on integer "
              "coordinates, treat the result as extrapolation")
    result = synthesize(weights, corner_views(lf), coord, n, bn_mode=args.bn_mode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"view_p{args.p:g}_q{args.q:g}"
    _write_png(out / f"{stem}.png",
               np.clip(result.predicted, 0, 1).transpose(1, 2, 0))
    meta = {"p": args.p, "q": args.q, "checkpoint": str(args.checkpoint),
            "gamma_applied": True, "kind": weights.kind.value}
    (out / f"{stem}.json").write_text(json.dumps(meta, indent=2) + "\n")
    if args.dump_internals and result.disparities is not None:
        write_float_raster(out / f"{stem}_disparities.raster", result.disparities)
        write_float_raster(out / f"{stem}_masks.raster", result.masks)
        write_float_raster(out / f"{stem}_warps.raster", result.warps.reshape(-1, *result.warps.shape[2:]))
    print(f"wrote {out / (stem + '.png')}")
    return 0


def cmd_evaluate(args) -> int:
    weights, _ = load_checkpoint(args.checkpoint)
    lf = load_lightfield(args.dataset, args.gamma)
    report = metrics_mod.evaluate_grid(weights, lf, crop=args.crop, bn_mode=args.bn_mode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "report.csv")
    report.to_json(out / "report.json")
    print(f"views {len(report.views)}  MAE100 {fmt(report.mae100)}  "
          f"PSNR {fmt(report.psnr_db)} dB  SSIM {fmt(report.ssim)}")
    return 0


_ABLATION_MATRICES = {
    "loss": [
        ("E_d", {"loss_terms": ("E_d",)}),
        ("E_d+E_g", {"loss_terms": ("E_d", "E_g")}),
        ("E_d+E_g+E_w", {"loss_terms": ("E_d", "E_g", "E_w")}),
    ],
    "models": [
        ("1 CNN", {"net_kind": "single_cnn"}),
        ("1 disp", {"net_kind": "single_disparity"}),
        ("w/o selection", {"net_kind": "no_selection"}),
        ("w/o features", {"net_kind": "no_features"}),
        ("proposed", {"net_kind": "plenoptic"}),
    ],
}


def cmd_ablate(args) -> int:
    base = read_config(args.config)
    dataset = _load_datasets(args.dataset, args.gamma)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for label, override in _ABLATION_MATRICES[args.matrix]:
        config = TrainConfig(**{**vars(base), **override})
        run_dir = out / label.replace(" ", "_").replace("/", "-").replace("+", "_")
        weights, _ = train(dataset, config, out_dir=run_dir)
        report = metrics_mod.evaluate_grid(weights, dataset[0])
        rows.append((label, weights.trainable_count(), report))
    header = f"{'variant':<16s} {'params':>10s} {'MAE100':>8s} {'PSNR':>8s} {'SSIM':>8s}"
    print(header)
    lines = [header]
    for label, count, report in rows:
        line = (f"{label:<16s} {count:>10,d} {fmt(report.mae100):>8s} "
                f"{fmt(report.psnr_db):>8s} {fmt(report.ssim):>8s}")
        print(line)
        lines.append(line)
    (out / "ablation.txt").write_text("\n".join(lines) + "\n")
    write_config(base, out / "base_config.txt")
    return 0


_COMMANDS = {
    "gradcheck": cmd_gradcheck,
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "synthesize": cmd_synthesize,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 1
    except Exception as exc:  # invariant violation, not a usage problem
        if os.environ.get("LFSYNTH_DEBUG"):
            traceback.print_exc()
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
