"""Small end-to-end gradient check of encoder, head and composite loss."""

from __future__ import annotations

import numpy as np
import torch

from .encoder import EncoderConfig
from .estimator import TPVSegmentationModel
from .geometry import TpvGridSpec, make_surround_rig
from .head import LossRouting, composite_loss, pseudo_voxel_labels
from .numeric import GradCheckReport, grad_check
from .tpv import query_points

GRAD_SPEC = TpvGridSpec(10, 10, 2, 1.0)


def tiny_problem(seed: int = 0, spec: TpvGridSpec = GRAD_SPEC, n_points: int = 40, n_classes: int = 3):
    """Float64 model, two small cameras, random images and labeled points.

    Offset and attention-weight projections get small random weights so that
    sampling locations sit away from the cell-centre kinks of bilinear
    interpolation, where central differences are meaningless.
    """
    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    config = EncoderConfig(spec=spec, channels=8, n_hcab=1, n_hab=1, heads=2, points_per_head=2,
                           backbone_channels=(4, 8), cvha_cross=2, seed=seed)
    model = TPVSegmentationModel(config, n_classes).double()
    with torch.no_grad():
        for name, p in model.named_parameters():
            if "offset_proj" in name or "weight_proj" in name:
                p.copy_(0.3 * torch.randn(p.shape, generator=gen, dtype=p.dtype))
            elif name.startswith("encoder.pos_"):
                p.copy_(0.1 * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    rig = make_surround_rig(2, width=16, height=10)
    images = torch.rand(2, 3, 10, 16, generator=gen, dtype=torch.float64)
    lo, hi = spec.world_bounds()[:, 0], spec.world_bounds()[:, 1]
    xyz = rng.uniform(lo + 0.3, hi - 0.3, size=(n_points, 3))
    labels = rng.integers(0, n_classes, size=n_points)
    voxel_labels = pseudo_voxel_labels((xyz, labels), spec, n_classes)
    return model, rig, images, xyz, torch.as_tensor(labels), torch.as_tensor(voxel_labels, dtype=torch.long)


def encoder_grad_check(seed: int = 0, max_coords: int = 6, step: float = 1e-5,
                       tolerance: float = 1e-3) -> GradCheckReport:
    """Central differences against autograd over every parameter tensor of
    the encoder + head, through the voxel-CE + point-Lovasz loss."""
    model, rig, images, xyz, labels, voxel_labels = tiny_problem(seed)
    routing = LossRouting("voxel", "point")

    def loss():
        planes = model.encoder(images, rig)
        pl = model.head(query_points(planes, xyz))
        vl = model.voxel_logits(planes).reshape(-1, model.n_classes + 1)
        return composite_loss(routing, pl, vl, labels, voxel_labels.reshape(-1))

    params = dict(model.named_parameters())
    return grad_check(loss, params, step=step, tolerance=tolerance, max_coords=max_coords, seed=seed)
