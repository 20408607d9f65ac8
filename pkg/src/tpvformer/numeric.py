"""Tensor operations, differentiation helpers and a finite-difference checker.

Tensors are plain :class:`torch.Tensor` values (float32 by default) and
reverse-mode differentiation is torch autograd.  This module owns the
operations whose exact semantics matter to the encoder: the clamped,
cell-centred bilinear sampler (with a hand-written backward), the softmax
and layer norm used by the attention blocks, the gradient map returned by
:func:`backward`, and the independent central-difference oracle in
:func:`grad_check`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Callable, Mapping

import numba
import numpy as np
import torch

from .errors import ContractError, DataError, NumericError, ShapeError

Tensor = torch.Tensor

LAYER_NORM_EPS = 1e-5
SNAPSHOT_MAGIC = b"TPVT"


def as_tensor(x, dtype: torch.dtype = torch.float32) -> Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == dtype else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def check_finite(x: Tensor, what: str = "tensor") -> Tensor:
    """Raise :class:`NumericError` if ``x`` holds NaN or Inf."""
    if not bool(torch.isfinite(x).all()):
        n_bad = int((~torch.isfinite(x)).sum())
        raise NumericError(f"{what}: {n_bad} non-finite value(s) in shape {tuple(x.shape)}")
    return x


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() != 2 or b.dim() != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {tuple(a.shape)} by {tuple(b.shape)}")
    return a @ b


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.dim() <= axis < x.dim():
        raise ShapeError(f"softmax: axis {axis} invalid for rank {x.dim()}")
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=axis, keepdim=True)


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise over the last (channel) axis, then apply ``gamma``/``beta``."""
    if x.shape[-1] < 2:
        raise ShapeError(f"layer_norm: channel extent {x.shape[-1]} < 2 is degenerate")
    mean = x.mean(dim=-1, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=-1, keepdim=True)
    y = centered / torch.sqrt(var + eps)
    if gamma is not None:
        y = y * gamma
    if beta is not None:
        y = y + beta
    return y


@numba.njit(cache=True)
def _cell(x, extent):
    """Clamp a grid coordinate; return (lower index, upper index, fraction, inside)."""
    inside = 0.0 <= x <= extent - 1
    xc = min(max(x, 0.0), extent - 1.0)
    i0 = int(np.floor(xc))
    i1 = min(i0 + 1, extent - 1)
    return i0, i1, xc - i0, inside


@numba.njit(cache=True)
def _bilinear_forward(planes, coords, batch, out):
    _, a_ext, b_ext, n_ch = planes.shape
    for n in range(coords.shape[0]):
        u0, u1, fu, _ = _cell(coords[n, 0], a_ext)
        v0, v1, fv, _ = _cell(coords[n, 1], b_ext)
        b = batch[n]
        for c in range(n_ch):
            p00 = planes[b, u0, v0, c]
            p01 = planes[b, u0, v1, c]
            p10 = planes[b, u1, v0, c]
            p11 = planes[b, u1, v1, c]
            top = p00 + fv * (p01 - p00)
            bot = p10 + fv * (p11 - p10)
            out[n, c] = top + fu * (bot - top)


@numba.njit(cache=True)
def _bilinear_backward(planes, coords, batch, grad_out, want_planes, want_coords,
                       grad_planes, grad_coords):
    _, a_ext, b_ext, n_ch = planes.shape
    for n in range(coords.shape[0]):
        u0, u1, fu, in_u = _cell(coords[n, 0], a_ext)
        v0, v1, fv, in_v = _cell(coords[n, 1], b_ext)
        b = batch[n]
        du = 0.0
        dv = 0.0
        for c in range(n_ch):
            g = grad_out[n, c]
            if want_planes:
                grad_planes[b, u0, v0, c] += (1 - fu) * (1 - fv) * g
                grad_planes[b, u0, v1, c] += (1 - fu) * fv * g
                grad_planes[b, u1, v0, c] += fu * (1 - fv) * g
                grad_planes[b, u1, v1, c] += fu * fv * g
            if want_coords:
                p00 = planes[b, u0, v0, c]
                p01 = planes[b, u0, v1, c]
                p10 = planes[b, u1, v0, c]
                p11 = planes[b, u1, v1, c]
                du += ((1 - fv) * (p10 - p00) + fv * (p11 - p01)) * g
                dv += ((1 - fu) * (p01 - p00) + fu * (p11 - p10)) * g
        if want_coords:
            # outside [0, extent-1] the clamp makes the sample flat in that coordinate
            grad_coords[n, 0] = du if in_u else 0.0
            grad_coords[n, 1] = dv if in_v else 0.0


class _BilinearSample(torch.autograd.Function):
    """Clamped bilinear gather over a batch of planes.

    planes: [B, A, W, C]; coords: [N, 2] grid coordinates where integer
    values sit on cell centres; batch: [N] plane index per coordinate.
    Integer coordinates take the lower cell with weight exactly one, so
    centre samples reproduce stored values bitwise.
    """

    @staticmethod
    def forward(ctx, planes, coords, batch):
        planes_c = planes.detach().contiguous()
        coords_c = coords.detach().to(planes.dtype).contiguous()
        batch_c = batch.contiguous()
        out = torch.empty(coords_c.shape[0], planes.shape[-1], dtype=planes.dtype)
        _bilinear_forward(planes_c.numpy(), coords_c.numpy(), batch_c.numpy(), out.numpy())
        ctx.save_for_backward(planes_c, coords_c, batch_c)
        return out

    @staticmethod
    def backward(ctx, grad_out):
        planes, coords, batch = ctx.saved_tensors
        want_planes, want_coords = ctx.needs_input_grad[0], ctx.needs_input_grad[1]
        grad_planes = torch.zeros_like(planes)
        grad_coords = torch.zeros_like(coords)
        _bilinear_backward(planes.numpy(), coords.numpy(), batch.numpy(),
                           grad_out.detach().to(planes.dtype).contiguous().numpy(),
                           want_planes, want_coords, grad_planes.numpy(), grad_coords.numpy())
        return (grad_planes if want_planes else None,
                grad_coords if want_coords else None, None)


def bilinear_sample_batched(planes: Tensor, coords: Tensor, batch: Tensor | None = None) -> Tensor:
    """Sample ``planes[batch[i]]`` at ``coords[i]``; returns [N, C]."""
    if planes.dim() != 4:
        raise ShapeError(f"bilinear_sample_batched: planes must be [B,A,W,C], got {tuple(planes.shape)}")
    coords = as_tensor(coords, planes.dtype).reshape(-1, 2)
    if batch is None:
        batch = torch.zeros(coords.shape[0], dtype=torch.long)
    else:
        batch = torch.as_tensor(batch, dtype=torch.long).reshape(-1)
    if coords.shape[0] == 0:
        return planes.new_zeros((0, planes.shape[-1]))
    return _BilinearSample.apply(planes, coords, batch)


def bilinear_sample(plane: Tensor, coords) -> Tensor:
    """Bilinearly sample an [A, B, C] plane at N continuous grid coordinates.

    Integer coordinates address cell centres and out-of-range coordinates
    clamp to the border cell.  Differentiable in both the plane values and
    the coordinates; at exact cell boundaries the coordinate gradient is
    taken from the cell to the right.
    """
    if plane.dim() != 3:
        raise ShapeError(f"bilinear_sample: plane must be [A,B,C], got {tuple(plane.shape)}")
    return bilinear_sample_batched(plane.unsqueeze(0), coords)


def backward(loss: Tensor, params: Mapping[str, Tensor] | torch.nn.Module,
             retain_graph: bool = False) -> dict[str, Tensor]:
    """Gradient of a scalar ``loss`` for every named parameter.

    Parameters the loss does not reach get zero gradients.
    """
    if loss.dim() != 0 and loss.numel() != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {tuple(loss.shape)}")
    if isinstance(params, torch.nn.Module):
        params = dict(params.named_parameters())
    names = [n for n, p in params.items() if p.requires_grad]
    tensors = [params[n] for n in names]
    if not loss.requires_grad:
        return {n: torch.zeros_like(p) for n, p in zip(names, tensors)}
    grads = torch.autograd.grad(loss.reshape(()), tensors, allow_unused=True,
                                retain_graph=retain_graph)
    return {n: torch.zeros_like(p) if g is None else g
            for n, p, g in zip(names, tensors, grads)}


@dataclass
class ParamCheck:
    name: str
    n_checked: int
    n_failed: int
    max_rel_error: float


@dataclass
class GradCheckReport:
    tolerance: float
    params: dict[str, ParamCheck] = field(default_factory=dict)
    failures: list[tuple[str, tuple[int, ...], float, float]] = field(default_factory=list)

    @property
    def n_checked(self) -> int:
        return sum(p.n_checked for p in self.params.values())

    @property
    def pass_fraction(self) -> float:
        n = self.n_checked
        return 1.0 if n == 0 else 1.0 - len(self.failures) / n

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params.values()), default=0.0)

    def summary(self) -> str:
        lines = [f"{name}: max rel err {p.max_rel_error:.2e} ({p.n_failed}/{p.n_checked} over tol)"
                 for name, p in self.params.items()]
        lines.append(f"pass fraction {self.pass_fraction:.4f} at tol {self.tolerance:g}")
        return "\n".join(lines)


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(f: Callable[[], Tensor], params: Mapping[str, Tensor], step: float = 1e-3,
               tolerance: float = 1e-3, max_coords: int | None = 16, seed: int = 0,
               floor: float = 1e-8) -> GradCheckReport:
    """Compare autograd gradients of ``f()`` against central differences.

    ``f`` closes over ``params`` (leaf tensors, ideally float64) and must be
    deterministic.  Up to ``max_coords`` entries per parameter are sampled;
    ``None`` checks every entry.
    """
    rng = np.random.default_rng(seed)
    names = list(params)
    loss = f()
    analytic = backward(loss, {n: params[n] for n in names})
    report = GradCheckReport(tolerance=tolerance)
    for name in names:
        p = params[name]
        n = p.numel()
        if max_coords is None or max_coords >= n:
            flat_idx = np.arange(n)
        else:
            flat_idx = rng.choice(n, size=max_coords, replace=False)
        worst, n_failed = 0.0, 0
        flat_p = p.data.view(-1)
        flat_g = analytic[name].reshape(-1)
        for k in flat_idx:
            k = int(k)
            orig = flat_p[k].item()
            with torch.no_grad():
                flat_p[k] = orig + step
                f_plus = float(f())
                flat_p[k] = orig - step
                f_minus = float(f())
                flat_p[k] = orig
            num = (f_plus - f_minus) / (2 * step)
            ana = float(flat_g[k])
            err = relative_error(ana, num, floor)
            worst = max(worst, err)
            if err > tolerance:
                n_failed += 1
                report.failures.append((name, tuple(np.unravel_index(k, tuple(p.shape))), ana, num))
        report.params[name] = ParamCheck(name, len(flat_idx), n_failed, worst)
    return report


def write_tensor(fh: BinaryIO, x) -> None:
    arr = np.ascontiguousarray(np.asarray(x.detach().cpu() if isinstance(x, Tensor) else x),
                               dtype="<f4")
    fh.write(SNAPSHOT_MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes(order="C"))


def read_tensor(fh: BinaryIO) -> Tensor:
    magic = fh.read(4)
    if magic != SNAPSHOT_MAGIC:
        raise DataError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", fh.read(4))
    shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
    count = int(np.prod(shape)) if rank else 1
    raw = fh.read(4 * count)
    if len(raw) != 4 * count:
        raise DataError("truncated tensor snapshot")
    arr = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    return torch.from_numpy(arr.copy())


def save_tensor(path: str | Path, x) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, x)


def load_tensor(path: str | Path) -> Tensor:
    with open(path, "rb") as fh:
        return read_tensor(fh)
