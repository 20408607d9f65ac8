"""Segmentation head, cross-entropy and Lovasz-softmax losses, loss routing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, RoutingError, ShapeError, UndefinedLossError
from .geometry import TpvGridSpec, world_to_plane

IGNORE_INDEX = -100


class SegmentationHead(nn.Module):
    """Two linear layers with a GELU in between, shared by points and voxels."""

    activation = "gelu"

    def __init__(self, channels: int, n_classes: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or 2 * channels
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, n_classes)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        if features.shape[-1] != self.fc1.in_features:
            raise ShapeError(f"head expects {self.fc1.in_features} channels, "
                             f"got {features.shape[-1]}")
        return self.fc2(F.gelu(self.fc1(features)))


def mlp_head(features: torch.Tensor, params: dict[str, torch.Tensor]) -> torch.Tensor:
    """Functional form of :class:`SegmentationHead` with explicit weights.

    ``params`` holds ``fc1.weight`` [hidden, C], ``fc1.bias``, ``fc2.weight``
    [K, hidden] and ``fc2.bias``.
    """
    w1 = params["fc1.weight"]
    if features.shape[-1] != w1.shape[1]:
        raise ShapeError(f"head expects {w1.shape[1]} channels, got {features.shape[-1]}")
    hidden = F.gelu(features @ w1.T + params["fc1.bias"])
    return hidden @ params["fc2.weight"].T + params["fc2.bias"]


def cross_entropy(logits: torch.Tensor, labels, ignore_index: int = IGNORE_INDEX) -> torch.Tensor:
    """Mean negative log-softmax of the true class over non-ignored rows."""
    logits = logits.reshape(-1, logits.shape[-1])
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    if labels.shape[0] != logits.shape[0]:
        raise ShapeError(f"{logits.shape[0]} logit rows vs {labels.shape[0]} labels")
    keep = labels != ignore_index
    if not bool(keep.any()):
        raise UndefinedLossError("cross_entropy: every entry is ignored")
    K = logits.shape[1]
    lab = labels[keep]
    if bool(((lab < 0) | (lab >= K)).any()):
        raise ShapeError(f"labels outside [0, {K})")
    logp = torch.log_softmax(logits[keep], dim=1)
    return -logp.gather(1, lab[:, None]).mean()


def lovasz_grad(gt_sorted: torch.Tensor) -> torch.Tensor:
    """Jaccard-loss increments along a sorted foreground indicator."""
    n = gt_sorted.shape[0]
    gts = gt_sorted.sum()
    intersection = gts - gt_sorted.cumsum(0)
    union = gts + (1 - gt_sorted).cumsum(0)
    jaccard = 1.0 - intersection / union
    if n > 1:
        jaccard = torch.cat([jaccard[:1], jaccard[1:] - jaccard[:-1]])
    return jaccard


def lovasz_softmax(probs: torch.Tensor, labels, classes: str = "present",
                   ignore_index: int = IGNORE_INDEX) -> torch.Tensor:
    """Lovasz-softmax surrogate of (1 - IoU), averaged over classes.

    ``classes="present"`` averages over classes that occur in ``labels``;
    ``"all"`` averages over every class column.
    """
    probs = probs.reshape(-1, probs.shape[-1])
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    keep = labels != ignore_index
    if not bool(keep.any()):
        raise UndefinedLossError("lovasz_softmax: no labeled entries")
    probs, labels = probs[keep], labels[keep]
    if classes not in ("present", "all"):
        raise ConfigError(f"unknown class averaging {classes!r}")
    losses = []
    for c in range(probs.shape[1]):
        fg = (labels == c).to(probs.dtype)
        if classes == "present" and not bool(fg.any()):
            continue
        errors = (fg - probs[:, c]).abs()
        errors_sorted, perm = torch.sort(errors, descending=True)
        losses.append(torch.dot(errors_sorted, lovasz_grad(fg[perm])))
    return torch.stack(losses).mean()


def pseudo_voxel_labels(points, spec: TpvGridSpec, n_classes: int) -> np.ndarray:
    """Voxelise labeled points: majority class per voxel, ``n_classes`` = empty.

    Ties go to the lowest class id and points outside the volume are dropped.
    Returns a uint8 [H, W, D] grid.
    """
    xyz, lab = _points_arrays(points)
    H, W, D = spec.extents
    grid = np.full((H, W, D), n_classes, dtype=np.uint8)
    if len(lab) == 0:
        return grid
    h = world_to_plane("top", xyz, spec)
    d = world_to_plane("side", xyz, spec)[:, 0]
    idx = np.floor(np.stack([h[:, 0], h[:, 1], d], axis=1)).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < np.array([H, W, D])), axis=1)
    idx, lab = idx[inside], lab[inside]
    if len(lab) == 0:
        return grid
    flat = np.ravel_multi_index(idx.T, (H, W, D))
    counts = np.zeros((H * W * D, n_classes), dtype=np.int64)
    np.add.at(counts, (flat, lab), 1)
    occupied = counts.sum(1) > 0
    winner = counts.argmax(1)  # argmax returns the first (lowest) class on ties
    out = grid.reshape(-1)
    out[occupied] = winner[occupied]
    return out.reshape(H, W, D)


def _points_arrays(points) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(points, "xyz"):
        return np.asarray(points.xyz, dtype=np.float64).reshape(-1, 3), np.asarray(points.labels, dtype=np.int64)
    xyz, lab = points
    return np.asarray(xyz, dtype=np.float64).reshape(-1, 3), np.asarray(lab, dtype=np.int64)


@dataclass(frozen=True)
class LossRouting:
    """Which prediction type feeds each loss term."""

    ce_input: str = "voxel"
    lovasz_input: str = "point"

    def __post_init__(self):
        for f in ("ce_input", "lovasz_input"):
            if getattr(self, f) not in ("point", "voxel"):
                raise ConfigError(f"LossRouting.{f} must be 'point' or 'voxel'")

    @classmethod
    def parse(cls, text: str) -> "LossRouting":
        """Parse ``"voxel,point"`` (cross-entropy input, Lovasz input)."""
        parts = [p.strip() for p in text.split(",")]
        if len(parts) != 2:
            raise ConfigError(f"routing {text!r} must look like 'voxel,point'")
        return cls(*parts)

    def __str__(self) -> str:
        return f"{self.ce_input},{self.lovasz_input}"


def composite_loss(routing: LossRouting, point_logits=None, voxel_logits=None,
                   point_labels=None, voxel_labels=None) -> torch.Tensor:
    """Unit-weighted cross-entropy plus Lovasz-softmax on the routed predictions."""
    inputs = {"point": (point_logits, point_labels), "voxel": (voxel_logits, voxel_labels)}
    terms = []
    for kind, loss_fn in ((routing.ce_input, "ce"), (routing.lovasz_input, "lovasz")):
        logits, labels = inputs[kind]
        if logits is None or labels is None:
            raise RoutingError(f"routing {routing} needs {kind} logits and labels for {loss_fn}")
        logits = logits.reshape(-1, logits.shape[-1])
        labels = torch.as_tensor(np.asarray(labels) if not isinstance(labels, torch.Tensor) else labels,
                                 dtype=torch.long).reshape(-1)
        if loss_fn == "ce":
            terms.append(cross_entropy(logits, labels))
        else:
            terms.append(lovasz_softmax(torch.softmax(logits, dim=1), labels))
    return terms[0] + terms[1]
