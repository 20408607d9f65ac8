"""scikit-learn style estimator wrapping encoder, head and training loop."""

from __future__ import annotations

import logging
import math

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted
from torch import nn

from .data import SceneSample
from .encoder import EncoderConfig, TPVFormer
from .errors import ConfigError, DataError, NumericError
from .geometry import TpvGridSpec
from .head import LossRouting, SegmentationHead, composite_loss, pseudo_voxel_labels
from .metrics import miou, sc_iou, ssc_miou
from .numeric import check_finite
from .tpv import TpvPlanes, bev_mode, query_points, resize_planes, voxel_features

log = logging.getLogger(__name__)


class TPVSegmentationModel(nn.Module):
    """TPVFormer encoder plus the shared point/voxel segmentation head."""

    def __init__(self, config: EncoderConfig, n_classes: int, representation: str = "tpv"):
        super().__init__()
        self.config = config
        self.n_classes = n_classes
        self.representation = representation
        self.encoder = TPVFormer(config)
        torch.manual_seed(config.seed + 1)
        self.head = SegmentationHead(config.channels, n_classes + 1)

    @property
    def empty_class(self) -> int:
        return self.n_classes

    def planes(self, sample: SceneSample) -> TpvPlanes:
        planes = self.encoder(sample.image_tensor(), sample.rig)
        return bev_mode(planes) if self.representation == "bev" else planes

    def point_logits(self, planes: TpvPlanes, xyz) -> torch.Tensor:
        return self.head(query_points(planes, xyz))

    def voxel_logits(self, planes: TpvPlanes) -> torch.Tensor:
        return self.head(voxel_features(planes))


def lr_at(step: int, base_lr: float, n_steps: int, warmup: int, cosine: bool) -> float:
    """Linear warm-up, then optional cosine decay to zero."""
    if warmup > 0 and step < warmup:
        return base_lr * (step + 1) / warmup
    if not cosine:
        return base_lr
    span = max(1, n_steps - warmup)
    return 0.5 * base_lr * (1 + math.cos(math.pi * min(1.0, (step - warmup) / span)))


def _as_samples(X) -> list[SceneSample]:
    if isinstance(X, SceneSample):
        return [X]
    samples = list(X)
    if not samples or not all(isinstance(s, SceneSample) for s in samples):
        raise DataError("expected a SceneSample or a non-empty sequence of them")
    return samples


class TPVSegmenter(BaseEstimator):
    """Camera-only 3D semantic segmentation through tri-perspective-view planes.

    ``fit`` trains on scene samples (images, rig and labeled LiDAR points);
    ``predict`` labels points, ``predict_voxels`` fills the whole grid and
    ``transform`` returns the encoded TPV planes.

    Parameters
    ----------
    H, W, D, cell_size : grid extents and cell side length in metres.
    channels, n_hcab, n_hab, heads, points_per_head : encoder shape.
    n_classes : semantic classes; the head adds one more for "empty".
    routing : ``"ce_input,lovasz_input"``, each ``point`` or ``voxel``.
    representation : ``"tpv"`` or ``"bev"`` (top plane only).
    optimizer : ``"adam"`` (default) or ``"sgd"`` (with ``momentum``).
    max_grad_norm : clip the global gradient norm to this value when set.
    """

    def __init__(self, H=50, W=50, D=4, cell_size=1.0, channels=32, n_hcab=2, n_hab=1,
                 heads=2, points_per_head=4, n_classes=6, routing="voxel,point",
                 representation="tpv", optimizer="adam", lr=0.01, momentum=0.9,
                 weight_decay=0.0, warmup_steps=10, cosine=True, n_steps=300, max_grad_norm=None,
                 query_init_std=0.5, seed=0, log_every=0):
        self.H = H
        self.W = W
        self.D = D
        self.cell_size = cell_size
        self.channels = channels
        self.n_hcab = n_hcab
        self.n_hab = n_hab
        self.heads = heads
        self.points_per_head = points_per_head
        self.n_classes = n_classes
        self.routing = routing
        self.representation = representation
        self.optimizer = optimizer
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.warmup_steps = warmup_steps
        self.cosine = cosine
        self.n_steps = n_steps
        self.max_grad_norm = max_grad_norm
        self.query_init_std = query_init_std
        self.seed = seed
        self.log_every = log_every

    # ------------------------------------------------------------------ setup
    def _spec(self) -> TpvGridSpec:
        return TpvGridSpec(int(self.H), int(self.W), int(self.D), float(self.cell_size))

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(spec=self._spec(), channels=self.channels, n_hcab=self.n_hcab,
                             n_hab=self.n_hab, heads=self.heads,
                             points_per_head=self.points_per_head,
                             query_init_std=self.query_init_std, seed=self.seed)

    def _validate_params(self) -> LossRouting:
        routing = self.routing if isinstance(self.routing, LossRouting) else LossRouting.parse(self.routing)
        if self.representation not in ("tpv", "bev"):
            raise ConfigError("representation must be 'tpv' or 'bev'")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError("optimizer must be 'sgd' or 'adam'")
        if self.n_steps < 0 or self.lr <= 0:
            raise ConfigError("n_steps must be >= 0 and lr > 0")
        if self.n_classes < 2:
            raise ConfigError("need at least two semantic classes")
        return routing

    def _check_sample(self, sample: SceneSample) -> None:
        if sample.spec.extents != self._spec().extents:
            raise DataError(f"sample grid {sample.spec.extents} does not match estimator grid "
                            f"{self._spec().extents}")
        if len(sample.points) and sample.points.labels.max() >= self.n_classes:
            raise DataError("point labels exceed n_classes")

    def build_model(self) -> TPVSegmentationModel:
        """Freshly initialised model for the current parameters."""
        torch.manual_seed(self.seed)
        return TPVSegmentationModel(self.encoder_config(), self.n_classes, self.representation)

    def _make_optimizer(self, params):
        if self.optimizer == "adam":
            return torch.optim.Adam(params, lr=self.lr, weight_decay=self.weight_decay)
        return torch.optim.SGD(params, lr=self.lr, momentum=self.momentum,
                               weight_decay=self.weight_decay)

    # ------------------------------------------------------------------ training
    def fit(self, X, y=None):
        """Train on one or more samples; ``y`` is unused (labels ride in the samples)."""
        routing = self._validate_params()
        samples = _as_samples(X)
        for s in samples:
            self._check_sample(s)
        model = self.build_model()
        config = model.config
        opt = self._make_optimizer(model.parameters())
        spec = config.spec
        voxel_labels = [torch.as_tensor(pseudo_voxel_labels(s.points, spec, self.n_classes),
                                        dtype=torch.long) for s in samples]
        point_labels = [torch.as_tensor(s.points.labels, dtype=torch.long) for s in samples]
        self.loss_history_ = []
        for step in range(int(self.n_steps)):
            k = step % len(samples)
            s = samples[k]
            lr = lr_at(step, self.lr, int(self.n_steps), int(self.warmup_steps), bool(self.cosine))
            for group in opt.param_groups:
                group["lr"] = lr
            loss = self._loss(model, s, routing, point_labels[k], voxel_labels[k])
            try:
                check_finite(loss.detach(), "training loss")
            except NumericError as exc:
                raise NumericError(f"step {step} (lr {lr:.3g}): {exc}; "
                                   f"last finite loss {self.loss_history_[-1:] or 'n/a'}") from None
            opt.zero_grad()
            loss.backward()
            if self.max_grad_norm:
                nn.utils.clip_grad_norm_(model.parameters(), float(self.max_grad_norm))
            opt.step()
            self.loss_history_.append(loss.item())
            if self.log_every and step % self.log_every == 0:
                log.info("step %d lr %.4g loss %.5f", step, lr, loss.item())
        self.model_ = model
        self.routing_ = routing
        self.n_features_in_ = config.channels
        return self

    @staticmethod
    def _loss(model, sample, routing, point_labels, voxel_labels):
        planes = model.planes(sample)
        kinds = {routing.ce_input, routing.lovasz_input}
        pl = model.point_logits(planes, sample.points.xyz) if "point" in kinds else None
        vl = model.voxel_logits(planes).reshape(-1, model.n_classes + 1) if "voxel" in kinds else None
        return composite_loss(routing, pl, vl, point_labels, voxel_labels.reshape(-1))

    # ------------------------------------------------------------------ inference
    def transform(self, X) -> list[TpvPlanes]:
        check_is_fitted(self, "model_")
        with torch.no_grad():
            return [self.model_.planes(s).detach() for s in _as_samples(X)]

    def predict(self, X, points=None):
        """Semantic labels for each sample's points (or for ``points`` if given).

        Points are known to be occupied, so the empty class is never predicted.
        """
        check_is_fitted(self, "model_")
        out = []
        for s, planes in zip(_as_samples(X), self.transform(X)):
            xyz = s.points.xyz if points is None else np.asarray(points)
            with torch.no_grad():
                logits = self.model_.point_logits(planes, xyz)[:, : self.n_classes]
            out.append(logits.argmax(1).numpy())
        return out[0] if isinstance(X, SceneSample) else out

    def predict_voxels(self, X, factor: float = 1.0):
        """Dense uint8 label grids (empty class = ``n_classes``), optionally resized."""
        check_is_fitted(self, "model_")
        out = []
        for planes in self.transform(X):
            if factor != 1:
                planes = resize_planes(planes, factor=factor)
            with torch.no_grad():
                logits = self.model_.voxel_logits(planes)
            out.append(logits.argmax(-1).numpy().astype(np.uint8))
        return out[0] if isinstance(X, SceneSample) else out

    def score(self, X, y=None) -> float:
        """Mean point mIoU over the samples."""
        samples = _as_samples(X)
        preds = self.predict(samples)
        return float(np.mean([miou(p, s.points.labels, self.n_classes).mean
                              for p, s in zip(preds, samples)]))

    def evaluate(self, sample: SceneSample, points=None) -> dict:
        """Point mIoU plus, when a dense grid is available, SC IoU and SSC mIoU."""
        pts = sample.points if points is None else points
        pred = self.predict(sample, pts.xyz)
        res = {"point_miou": miou(pred, pts.labels, self.n_classes).mean}
        if sample.dense is not None:
            grid = self.predict_voxels(sample)
            res["sc_iou"] = sc_iou(grid, sample.dense, self.n_classes)
            res["ssc_miou"] = ssc_miou(grid, sample.dense, self.n_classes).mean
        return res

    @property
    def model(self) -> TPVSegmentationModel:
        check_is_fitted(self, "model_")
        return self.model_

