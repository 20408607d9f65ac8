"""Tri-perspective-view planes: point queries, voxel broadcast, resizing.

A point's feature is the sum of bilinear samples from the top (H x W),
side (D x H) and front (W x D) planes.  Broadcasting each plane along its
collapsed axis and summing gives the same value at every voxel centre.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, DataError, ResourceError, ShapeError
from .geometry import TpvGridSpec, plane_to_grid, world_to_plane
from .numeric import bilinear_sample, load_tensor, save_tensor

DEFAULT_VOXEL_BUDGET_BYTES = 256 * 2**20

# snap grid coordinates this close to a cell centre so centre queries hit it bitwise
_SNAP = 1e-9


@dataclass
class TpvPlanes:
    hw: torch.Tensor  # [H, W, C]
    dh: torch.Tensor  # [D, H, C]
    wd: torch.Tensor  # [W, D, C]
    spec: TpvGridSpec

    def __post_init__(self):
        H, W, D = self.spec.extents
        want = {"hw": (H, W), "dh": (D, H), "wd": (W, D)}
        C = None
        for name, (a, b) in want.items():
            t = getattr(self, name)
            if t.dim() != 3 or tuple(t.shape[:2]) != (a, b):
                raise ShapeError(f"plane {name} has shape {tuple(t.shape)}, expected ({a}, {b}, C)")
            if C is None:
                C = t.shape[2]
            elif t.shape[2] != C:
                raise ShapeError("TPV planes disagree on channel width")

    @property
    def channels(self) -> int:
        return self.hw.shape[2]

    def as_dict(self) -> dict[str, torch.Tensor]:
        return {"top": self.hw, "side": self.dh, "front": self.wd}

    def detach(self) -> "TpvPlanes":
        return TpvPlanes(self.hw.detach(), self.dh.detach(), self.wd.detach(), self.spec)


def plane_memory(spec: TpvGridSpec, channels: int) -> int:
    """Number of stored values for the three planes: C*(HW + DH + WD)."""
    H, W, D = spec.extents
    return channels * (H * W + D * H + W * D)


def voxel_memory(spec: TpvGridSpec, channels: int) -> int:
    H, W, D = spec.extents
    return channels * H * W * D


def _grid_coords(view: str, points: np.ndarray, spec: TpvGridSpec) -> np.ndarray:
    g = plane_to_grid(world_to_plane(view, points, spec))
    r = np.round(g)
    return np.where(np.abs(g - r) < _SNAP, r, g)


def query_points(planes: TpvPlanes, points) -> torch.Tensor:
    """Per-point features [N, C] for world points [N, 3]."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    spec = planes.spec
    t_hw = bilinear_sample(planes.hw, _grid_coords("top", pts, spec))
    t_dh = bilinear_sample(planes.dh, _grid_coords("side", pts, spec))
    t_wd = bilinear_sample(planes.wd, _grid_coords("front", pts, spec))
    return t_hw + t_dh + t_wd


def voxel_features(planes: TpvPlanes, budget_bytes: int = DEFAULT_VOXEL_BUDGET_BYTES) -> torch.Tensor:
    """Dense [H, W, D, C] features by broadcasting and summing the planes."""
    spec = planes.spec
    need = voxel_memory(spec, planes.channels) * planes.hw.element_size()
    if need > budget_bytes:
        raise ResourceError(f"voxel features need {need} bytes (budget {budget_bytes}); "
                            "query the points of interest with query_points instead")
    hw = planes.hw[:, :, None, :]                    # [H,W,1,C]
    dh = planes.dh.permute(1, 0, 2)[:, None, :, :]   # [H,1,D,C]
    wd = planes.wd[None, :, :, :]                    # [1,W,D,C]
    return hw + dh + wd


def bev_mode(planes: TpvPlanes) -> TpvPlanes:
    """Top-plane-only variant: side and front contributions are zero."""
    return TpvPlanes(planes.hw, torch.zeros_like(planes.dh), torch.zeros_like(planes.wd),
                     planes.spec)


def _linear_reconstruct_axis(x: torch.Tensor, axis: int, k: int) -> torch.Tensor:
    """Integer upsampling along one axis by local linear reconstruction.

    Each source cell is replaced by ``k`` cells sampled from the line through
    its value with slope equal to the central difference of its neighbours
    (one-sided at the border).  Affine fields are reproduced exactly, and
    the ``k`` children of a cell average back to the cell's value.
    """
    n = x.shape[axis]
    if n == 1:
        slope = torch.zeros_like(x)
    else:
        nxt = torch.cat([x.narrow(axis, 1, n - 1), x.narrow(axis, n - 1, 1)], axis)
        prv = torch.cat([x.narrow(axis, 0, 1), x.narrow(axis, 0, n - 1)], axis)
        span = torch.full((n,), 2.0, dtype=x.dtype)
        span[0] = span[-1] = 1.0
        shape = [1] * x.dim()
        shape[axis] = n
        slope = (nxt - prv) / span.reshape(shape)
    offs = (torch.arange(k, dtype=x.dtype) + 0.5) / k - 0.5  # child centres, source-cell units
    xe, se = x.unsqueeze(axis + 1), slope.unsqueeze(axis + 1)
    oshape = [1] * (x.dim() + 1)
    oshape[axis + 1] = k
    out = xe + se * offs.reshape(oshape)
    new_shape = list(x.shape)
    new_shape[axis] = n * k
    return out.reshape(new_shape)


def _bilinear_resample_axis(x: torch.Tensor, axis: int, n_new: int) -> torch.Tensor:
    """Resample one axis to ``n_new`` cells with cell-centre alignment."""
    n = x.shape[axis]
    g = (torch.arange(n_new, dtype=torch.float64) + 0.5) * (n / n_new) - 0.5
    g = g.clamp(0, n - 1)
    i0 = torch.floor(g).long()
    i1 = (i0 + 1).clamp(max=n - 1)
    f = (g - i0).to(x.dtype)
    shape = [1] * x.dim()
    shape[axis] = n_new
    f = f.reshape(shape)
    return x.index_select(axis, i0) * (1 - f) + x.index_select(axis, i1) * f


def _resize_axis(x: torch.Tensor, axis: int, n_new: int) -> torch.Tensor:
    n = x.shape[axis]
    if n_new == n:
        return x
    if n_new % n == 0:
        return _linear_reconstruct_axis(x, axis, n_new // n)
    return _bilinear_resample_axis(x, axis, n_new)


def resize_planes(planes: TpvPlanes, factor: float | None = None,
                  extents: tuple[int, int, int] | None = None) -> TpvPlanes:
    """Change plane resolution while keeping the covered world volume.

    Integer upsampling factors use a linear reconstruction that reproduces
    the original features exactly at original cell centres; other factors
    resample bilinearly at the new cell centres.
    """
    spec = planes.spec
    if (factor is None) == (extents is None):
        raise ConfigError("resize_planes needs exactly one of factor or extents")
    if factor is not None:
        if not factor > 0:
            raise ConfigError("resize factor must be > 0")
        new = tuple(int(round(n * factor)) for n in spec.extents)
    else:
        new = tuple(int(n) for n in extents)
    if min(new) < 1:
        raise ConfigError(f"resized extents {new} fall below one cell")
    ratios = [n / o for n, o in zip(new, spec.extents)]
    if max(ratios) - min(ratios) > 1e-9 * max(ratios):
        raise ConfigError(f"extents {new} do not scale all axes equally; cells must stay cubic")
    H, W, D = new
    new_spec = TpvGridSpec(H, W, D, spec.s * spec.extents[0] / H)

    def resize(t, a_new, b_new):
        return _resize_axis(_resize_axis(t, 0, a_new), 1, b_new)

    return TpvPlanes(resize(planes.hw, H, W), resize(planes.dh, D, H), resize(planes.wd, W, D),
                     new_spec)


def save_planes(directory: str | Path, planes: TpvPlanes, extra: dict | None = None) -> None:
    """Write hw/dh/wd tensor snapshots plus a ``spec.json`` sidecar."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_tensor(d / "hw.tpvt", planes.hw)
    save_tensor(d / "dh.tpvt", planes.dh)
    save_tensor(d / "wd.tpvt", planes.wd)
    meta = {"spec": planes.spec.to_dict()}
    if extra:
        meta.update(extra)
    (d / "spec.json").write_text(json.dumps(meta, indent=2))


def load_planes(directory: str | Path) -> TpvPlanes:
    d = Path(directory)
    try:
        meta = json.loads((d / "spec.json").read_text())
        spec = TpvGridSpec(**meta["spec"])
    except (OSError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise DataError(f"bad plane sidecar in {d}: {exc}") from None
    return TpvPlanes(load_tensor(d / "hw.tpvt"), load_tensor(d / "dh.tpvt"),
                     load_tensor(d / "wd.tpvt"), spec)
