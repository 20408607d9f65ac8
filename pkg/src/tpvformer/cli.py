"""Command-line entry point: ``tpvformer {gen,train,eval,export,ablate,diag}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .ablation import GRIDS, METRICS, run_ablation
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import (BACKGROUND, PALETTE, make_sample, read_sample, save_ppm, save_voxel_grid,
                   write_sample)
from .errors import ConfigError, DataError, NumericError, ResourceError
from .geometry import TpvGridSpec
from .metrics import miou, sc_iou, ssc_miou
from .tpv import plane_memory, voxel_memory

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("tpvformer")


def _config(args) -> RunConfig:
    cfg = RunConfig.load(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg.validate()


def _spec(cfg: RunConfig) -> TpvGridSpec:
    return TpvGridSpec(cfg.H, cfg.W, cfg.D, cfg.cell_size)


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ------------------------------------------------------------------ commands

def cmd_gen(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        raise DataError(f"{out} exists and is not an empty directory; refusing to overwrite")
    sample = make_sample(cfg.seed, cfg.difficulty, _spec(cfg), cfg.n_rays, n_classes=cfg.n_classes)
    write_sample(out, sample, cfg.to_dict())
    (out / "run.cfg").write_text(cfg.to_text())
    print(f"wrote {out}: {len(sample.points)} points, {len(sample.scene.boxes)} boxes, "
          f"{len(sample.rig)} cameras")
    return EXIT_OK


def _load_data(path, spec: TpvGridSpec):
    sample = read_sample(path)
    if sample.spec.extents != spec.extents or abs(sample.spec.s - spec.s) > 1e-12:
        raise DataError(f"data grid {sample.spec} does not match the configured grid {spec}")
    return sample


def cmd_train(args) -> int:
    from .estimator import TPVSegmenter

    cfg = _config(args)
    sample = _load_data(args.data, _spec(cfg))
    est = TPVSegmenter(**cfg.estimator_params())
    t0 = time.perf_counter()
    est.fit(sample)
    dt = time.perf_counter() - t0
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, est, cfg.to_dict())
    _write_json(out.with_name(out.name + ".log.json"),
                {"config": cfg.to_dict(), "loss": est.loss_history_, "seconds": dt})
    first = est.loss_history_[0] if est.loss_history_ else float("nan")
    last = est.loss_history_[-1] if est.loss_history_ else float("nan")
    print(f"trained {cfg.n_steps} steps in {dt:.1f}s; loss {first:.4f} -> {last:.4f}; wrote {out}")
    return EXIT_OK


def evaluate_sample(est, sample, task: str) -> dict:
    k = est.n_classes
    if task == "points":
        if len(sample.points) == 0:
            raise DataError("no labeled points to evaluate")
        res = miou(est.predict(sample), sample.points.labels, k)
        return {"point_miou": res.mean, "per_class": res.per_class.tolist()}
    if sample.dense is None:
        raise DataError("occupancy evaluation needs dense.occ in the data directory")
    grid = est.predict_voxels(sample)
    res = ssc_miou(grid, sample.dense, k)
    return {"sc_iou": sc_iou(grid, sample.dense, k), "ssc_miou": res.mean,
            "per_class": res.per_class.tolist()}


def cmd_eval(args) -> int:
    est, run_cfg = load_checkpoint(args.checkpoint)
    sample = _load_data(args.data, est._spec())
    metrics = evaluate_sample(est, sample, args.task)
    doc = {"task": args.task, "metrics": metrics, "config": run_cfg,
           "checkpoint": str(args.checkpoint), "data": str(args.data)}
    if args.out:
        _write_json(Path(args.out), doc)
    print(json.dumps({k: v for k, v in metrics.items() if k != "per_class"}, sort_keys=True))
    return EXIT_OK


def colorize(labels: np.ndarray, empty: int) -> np.ndarray:
    """Class ids -> RGB; the empty class takes the background colour."""
    lab = np.asarray(labels)
    img = PALETTE[lab % len(PALETTE)]
    img[lab == empty] = BACKGROUND
    return img


def slice_images(grid: np.ndarray, empty: int) -> dict[str, np.ndarray]:
    """Axis-aligned slices: every height level seen from the top, plus the
    middle side (x-z) and front (y-z) sections with z pointing up."""
    H, W, D = grid.shape
    out = {f"top_d{d:03d}": colorize(grid[:, :, d], empty) for d in range(D)}
    out[f"side_w{W // 2:03d}"] = colorize(grid[:, W // 2, ::-1].T, empty)  # [D, H]
    out[f"front_h{H // 2:03d}"] = colorize(grid[H // 2, :, ::-1].T, empty)  # [D, W]
    return out


def cmd_export(args) -> int:
    est, run_cfg = load_checkpoint(args.checkpoint)
    if args.factor <= 0:
        raise ConfigError("--factor must be > 0")
    sample = _load_data(args.data, est._spec())
    grid = est.predict_voxels(sample, factor=args.factor)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_voxel_grid(out / "occupancy.occ", grid)
    meta = {"config": run_cfg, "factor": args.factor, "extents": list(grid.shape),
            "cell_size": est.cell_size * est.H / grid.shape[0], "empty_class": est.n_classes}
    _write_json(out / "occupancy.occ.json", meta)
    comment = "config " + json.dumps(run_cfg, sort_keys=True)
    for name, img in slice_images(grid, est.n_classes).items():
        save_ppm(out / f"{name}.ppm", img, comment)
    print(f"wrote {out}: grid {'x'.join(map(str, grid.shape))}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    if args.grid not in GRIDS:
        raise ConfigError(f"--grid must be one of {sorted(GRIDS)}")
    try:
        seeds = [int(s) for s in args.seeds.split(",")]
    except ValueError:
        raise ConfigError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
    base = cfg.estimator_params()
    base.pop("seed")
    report = run_ablation(GRIDS[args.grid], seeds, base, cfg.difficulty, _spec(cfg), cfg.n_rays,
                          cfg.n_rays, log=log.info)
    table = report.table(METRICS)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    header = f"# grid {args.grid}, seeds {seeds}, config {cfg.to_json()}\n"
    (out / "table.txt").write_text(header + table)
    (out / "report.csv").write_text(header + report.to_csv(METRICS))
    print(table, end="")
    return EXIT_OK


def cmd_diag(args) -> int:
    """Memory accounting and a small encoder gradient check."""
    from .diagnostics import encoder_grad_check

    cfg = _config(args)
    spec = _spec(cfg)
    pm, vm = plane_memory(spec, cfg.channels), voxel_memory(spec, cfg.channels)
    print(f"grid {spec.H}x{spec.W}x{spec.D}, C={cfg.channels}: planes {pm} values, "
          f"voxels {vm} values, ratio {vm / pm:.2f}")
    report = encoder_grad_check(seed=cfg.seed)
    print(report.summary())
    return EXIT_OK


# ------------------------------------------------------------------ wiring

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tpvformer", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-step progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help):
        sp.add_argument("--config", help="flat key = value run configuration file")
        sp.add_argument("--seed", type=int, help="override the configured seed")
        sp.add_argument("--out", required=True, help=out_help)

    sp = sub.add_parser("gen", help="generate a synthetic scene sample")
    common(sp, "output directory (must be empty or absent)")
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("train", help="train on a generated sample")
    common(sp, "checkpoint path")
    sp.add_argument("--data", required=True, help="sample directory written by gen")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--task", choices=("points", "occupancy"), default="points")
    sp.add_argument("--out", help="optional JSON report path")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("export", help="write an occupancy grid and slice images")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--factor", type=float, default=1.0, help="plane resolution factor")
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_export)

    sp = sub.add_parser("ablate", help="run an ablation grid")
    common(sp, "output directory for table.txt and report.csv")
    sp.add_argument("--grid", default="routing", help=f"one of {sorted(GRIDS)}")
    sp.add_argument("--seeds", default="0,1,2")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("diag", help="memory accounting and gradient check")
    sp.add_argument("--config")
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_diag)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, ResourceError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
