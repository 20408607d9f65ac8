"""Toy ablation harness producing tables shaped like the loss-routing,
representation/resolution and block-count ablations.

Every configuration in a grid is trained on the same scenes (one per seed)
and scored on held-out LiDAR points cast with a different ray seed.
Configurations run sequentially so reports are deterministic per seed.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch

from .data import DEFAULT_SPEC, LabeledPointSet, SceneSample, make_sample, regrid_sample, sample_lidar
from .estimator import TPVSegmenter
from .geometry import TpvGridSpec, world_to_plane
from .metrics import confusion_matrix, iou_from_confusion, miou, sc_iou, ssc_miou

HELDOUT_SEED_OFFSET = 10_000

# name -> estimator overrides
ROUTING_GRID = {
    "ce=voxel lovasz=voxel": {"routing": "voxel,voxel"},
    "ce=voxel lovasz=point": {"routing": "voxel,point"},
    "ce=point lovasz=voxel": {"routing": "point,voxel"},
    "ce=point lovasz=point": {"routing": "point,point"},
}
REPRESENTATION_GRID = {
    "BEV 50x50": {"representation": "bev"},
    "TPV 50x50x4": {"representation": "tpv"},
    "BEV 100x100": {"representation": "bev", "H": 100, "W": 100, "D": 8, "cell_size": 0.5},
    "TPV 100x100x8": {"representation": "tpv", "H": 100, "W": 100, "D": 8, "cell_size": 0.5},
}
BLOCK_GRID = {
    "HCAB 2 HAB 4": {"n_hcab": 2, "n_hab": 4},
    "HCAB 3 HAB 2": {"n_hcab": 3, "n_hab": 2},
    "HCAB 4 HAB 0": {"n_hcab": 4, "n_hab": 0},
}
GRIDS = {"routing": ROUTING_GRID, "representation": REPRESENTATION_GRID, "blocks": BLOCK_GRID}
METRICS = ("point_miou", "voxel_miou", "sc_iou", "ssc_miou")


def voxel_point_labels(estimator: TPVSegmenter, sample: SceneSample, points: LabeledPointSet) -> np.ndarray:
    """Label each point with the voxel prediction of the cell containing it.

    The full K+1-way prediction is used, so a labeled point whose voxel is
    predicted empty (class K) counts as a miss.
    """
    spec = sample.spec
    with torch.no_grad():
        planes = estimator.transform(sample)[0]
        logits = estimator.model.voxel_logits(planes)
    grid = logits.argmax(-1).numpy()
    hw = world_to_plane("top", points.xyz, spec)
    d = world_to_plane("side", points.xyz, spec)[:, 0]
    idx = np.floor(np.stack([hw[:, 0], hw[:, 1], d], axis=1)).astype(np.int64)
    idx = np.clip(idx, 0, np.array(spec.extents) - 1)
    return grid[idx[:, 0], idx[:, 1], idx[:, 2]]


def score_all(estimator: TPVSegmenter, sample: SceneSample, points: LabeledPointSet) -> dict:
    """Point mIoU and voxel mIoU on ``points``; SC IoU and SSC mIoU on the dense grid."""
    k = estimator.n_classes
    out = {
        "point_miou": miou(estimator.predict(sample, points.xyz), points.labels, k).mean,
        "voxel_miou": iou_from_confusion(confusion_matrix(
            voxel_point_labels(estimator, sample, points), points.labels, k + 1), exclude=(k,)).mean,
    }
    if sample.dense is not None:
        grid = estimator.predict_voxels(sample)
        out["sc_iou"] = sc_iou(grid, sample.dense, k)
        out["ssc_miou"] = ssc_miou(grid, sample.dense, k).mean
    return out


@dataclass
class AblationResult:
    name: str
    seed: int
    params: dict
    metrics: dict
    seconds: float


@dataclass
class AblationReport:
    results: list[AblationResult] = field(default_factory=list)

    def names(self) -> list[str]:
        return list(dict.fromkeys(r.name for r in self.results))

    def seeds(self) -> list[int]:
        return sorted({r.seed for r in self.results})

    def value(self, name: str, seed: int, metric: str) -> float:
        for r in self.results:
            if r.name == name and r.seed == seed:
                return r.metrics.get(metric, float("nan"))
        raise KeyError((name, seed))

    def mean(self, name: str, metric: str) -> float:
        return float(np.mean([r.metrics.get(metric, np.nan) for r in self.results if r.name == name]))

    def wins(self, a: str, b: str, metric: str, margin: float = 0.0) -> list[bool]:
        """Per seed: does ``a`` beat ``b`` on ``metric`` by more than ``margin``?"""
        return [self.value(a, s, metric) > self.value(b, s, metric) + margin for s in self.seeds()]

    def table(self, metrics: Sequence[str] = METRICS) -> str:
        """Aligned text table of seed-averaged metrics (percent)."""
        header = ["config"] + list(metrics)
        rows = [[n] + [f"{100 * self.mean(n, m):.2f}" for m in metrics] for n in self.names()]
        widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
        fmt = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w)  # noqa: E731
                                  for i, (c, w) in enumerate(zip(r, widths)))
        rule = "-" * len(fmt(header))
        return "\n".join([fmt(header), rule] + [fmt(r) for r in rows]) + "\n"

    def to_csv(self, metrics: Sequence[str] = METRICS) -> str:
        """One row per (config, seed) with raw metric values."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["config", "seed"] + list(metrics) + ["seconds"])
        for r in self.results:
            w.writerow([r.name, r.seed] + [repr(float(r.metrics.get(m, float("nan")))) for m in metrics]
                       + [f"{r.seconds:.2f}"])
        return buf.getvalue()


def run_ablation(grid: Mapping[str, Mapping], seeds: Sequence[int] = (0,), base: Mapping | None = None,
                 difficulty: str = "medium", spec: TpvGridSpec = DEFAULT_SPEC,
                 n_rays: int = 20000, eval_rays: int = 20000, log=None) -> AblationReport:
    """Train every configuration of ``grid`` on each seed's scene and score it.

    ``base`` holds estimator parameters shared by all configurations; each
    grid entry overrides some of them.  A configuration whose grid extents
    differ from ``spec`` sees the same world scene re-voxelised.
    """
    base = dict(base or {})
    report = AblationReport()
    for seed in seeds:
        sample = make_sample(seed, difficulty, spec, n_rays)
        heldout = sample_lidar(sample.scene, eval_rays, seed + HELDOUT_SEED_OFFSET)
        for name, overrides in grid.items():
            params = {"H": spec.H, "W": spec.W, "D": spec.D, "cell_size": spec.s, **base,
                      **overrides, "seed": seed}
            est = TPVSegmenter(**params)
            run_sample = regrid_sample(sample, est._spec())
            t0 = time.perf_counter()
            est.fit(run_sample)
            metrics = score_all(est, run_sample, heldout)
            result = AblationResult(name, seed, params, metrics, time.perf_counter() - t0)
            report.results.append(result)
            if log is not None:
                log(f"{name} seed {seed}: " + " ".join(f"{k}={v:.4f}" for k, v in metrics.items()))
    return report
