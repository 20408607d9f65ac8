"""TPVFormer encoder: TPV queries, deformable attention, ICA/CVHA blocks.

All queries of the three planes travel through the blocks as one
concatenated ``[HW + DH + WD, C]`` token matrix; attention modules split it
back into views where geometry matters.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import geometry
from .errors import ConfigError, ContractError, ShapeError
from .geometry import VIEWS, CameraRig, TpvGridSpec
from .numeric import bilinear_sample_batched, layer_norm, softmax
from .tpv import TpvPlanes

_PLANE_NAMES = {"top": "hw", "side": "dh", "front": "wd"}


def default_n_ref(spec: TpvGridSpec, base: int = 4, cap: int = 16) -> dict[str, int]:
    """Reference points per pillar, proportional to the pillar's cell count."""
    out = {}
    for view in VIEWS:
        n = spec.ortho_extent(view)
        out[view] = int(max(1, min(n, cap, round(base * n / spec.D))))
    return out


@dataclass
class EncoderConfig:
    spec: TpvGridSpec
    channels: int = 32
    n_hcab: int = 2
    n_hab: int = 1
    heads: int = 2
    points_per_head: int = 4
    n_ref: dict | None = None
    cvha_same: int = 4
    cvha_radius: float = 2.0
    cvha_cross: int = 8
    ffn_expansion: int = 2
    backbone_channels: tuple = (16, 32)
    n_scales: int = 1
    query_init_std: float = 0.5
    seed: int = 0
    bypass_norm: bool = False
    zero_init_outputs: bool = False

    def __post_init__(self):
        if isinstance(self.spec, dict):
            self.spec = TpvGridSpec(**self.spec)
        self.backbone_channels = tuple(int(c) for c in self.backbone_channels)
        if self.n_ref is None:
            self.n_ref = default_n_ref(self.spec)
        else:
            self.n_ref = {k: int(v) for k, v in dict(self.n_ref).items()}
        self.validate()

    def validate(self) -> None:
        if self.n_hcab < 1:
            raise ConfigError("n_hcab (N1) must be >= 1")
        if self.n_hab < 0:
            raise ConfigError("n_hab (N2) must be >= 0")
        if self.heads < 1 or self.points_per_head < 1:
            raise ConfigError("heads and points_per_head must be >= 1")
        if self.channels < 2 or self.channels % self.heads:
            raise ConfigError(f"channels={self.channels} must be >= 2 and divisible by heads={self.heads}")
        if not 1 <= self.n_scales <= len(self.backbone_channels):
            raise ConfigError("n_scales must be between 1 and the number of backbone stages")
        if set(self.n_ref) != set(VIEWS):
            raise ConfigError(f"n_ref needs one count per view {VIEWS}")
        for view in VIEWS:
            if not 1 <= self.n_ref[view] <= self.spec.ortho_extent(view):
                raise ConfigError(f"n_ref[{view}]={self.n_ref[view]} must be within "
                                  f"[1, {self.spec.ortho_extent(view)}]")
        if self.cvha_radius < 1:
            raise ConfigError("cvha_radius must be at least one cell")
        if self.cvha_same < 1 or self.cvha_cross < 1:
            raise ConfigError("CVHA reference counts must be >= 1")

    def cross_count(self, view: str) -> int:
        return min(self.cvha_cross, self.spec.ortho_extent(view))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["spec"] = self.spec.to_dict()
        d["backbone_channels"] = list(self.backbone_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        d["spec"] = TpvGridSpec(**d["spec"])
        return cls(**d)


@dataclass
class ImageFeatures:
    """Per-scale feature maps [n_cam, h, w, C] and their pixel strides.

    A pixel coordinate u maps to feature-grid coordinate ``u / stride - 0.5``.
    """

    levels: list[torch.Tensor]
    strides: list[float]

    @property
    def n_cameras(self) -> int:
        return self.levels[0].shape[0]


@dataclass
class ValueGroup:
    """One block of sampling locations for deformable attention.

    ``maps`` are value maps [B, A, W, C]; ``ref`` holds [Q, R, 2] grid
    coordinates; ``index`` picks the map per query ([Q]) or per reference
    ([Q, R]); ``mask`` marks usable references.
    """

    maps: torch.Tensor
    ref: torch.Tensor
    index: torch.Tensor | None = None
    mask: torch.Tensor | None = None


class LayerNorm(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x):
        return layer_norm(x, self.weight, self.bias)


class SamplingHead(nn.Module):
    """Offsets and attention weights from a query, then the weighted gather.

    Returns the per-head weighted sums concatenated to [Q, C]; the caller
    applies the output projection.
    """

    def __init__(self, dim: int, heads: int, n_refs: int, n_points: int):
        super().__init__()
        self.heads, self.n_refs, self.n_points = heads, n_refs, n_points
        self.offset_proj = nn.Linear(dim, heads * n_refs * n_points * 2)
        self.weight_proj = nn.Linear(dim, heads * n_refs * n_points)
        for lin in (self.offset_proj, self.weight_proj):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    def forward(self, query: torch.Tensor, groups: Sequence[ValueGroup]) -> torch.Tensor:
        Q, C = query.shape
        h, P = self.heads, self.n_points
        R = sum(g.ref.shape[1] for g in groups)
        if R != self.n_refs:
            raise ContractError(f"sampling head expects {self.n_refs} references, got {R}")
        if R == 0:
            raise ContractError("deformable attention needs at least one reference point")
        offsets = self.offset_proj(query).view(Q, h, R, P, 2)
        logits = self.weight_proj(query).view(Q, h, R, P)
        head_ids = torch.arange(h).view(1, h, 1, 1)
        samples, masks, start = [], [], 0
        for g in groups:
            Rg = g.ref.shape[1]
            n_maps, A, B, _ = g.maps.shape
            vals = g.maps.reshape(n_maps, A, B, h, C // h).permute(0, 3, 1, 2, 4)
            vals = vals.reshape(n_maps * h, A, B, C // h)
            ref = g.ref.to(query.dtype)
            coords = ref[:, None, :, None, :] + offsets[:, :, start:start + Rg]
            if g.index is None:
                idx = torch.zeros(Q, 1, dtype=torch.long)
            else:
                idx = g.index.long().reshape(Q, -1)
            batch = (idx[:, None, :, None] * h + head_ids).expand(Q, h, Rg, P)
            s = bilinear_sample_batched(vals, coords.reshape(-1, 2), batch.reshape(-1))
            samples.append(s.view(Q, h, Rg, P, C // h))
            m = torch.ones(Q, Rg, dtype=torch.bool) if g.mask is None else g.mask.bool()
            masks.append(m)
            start += Rg
        sampled = torch.cat(samples, dim=2).reshape(Q, h, R * P, C // h)
        mask = torch.cat(masks, dim=1)
        if not bool(mask.all()):
            logits = logits.masked_fill(~mask[:, None, :, None], float("-inf"))
        weights = softmax(logits.reshape(Q, h, R * P), axis=-1)
        return (weights[..., None] * sampled).sum(dim=2).reshape(Q, C)


class DeformableAttention(nn.Module):
    """Single-query-type deformable attention: value/output projections around a sampler."""

    def __init__(self, dim: int, heads: int, n_refs: int, n_points: int):
        super().__init__()
        if dim % heads:
            raise ConfigError("dim must be divisible by heads")
        self.value_proj = nn.Linear(dim, dim)
        self.output_proj = nn.Linear(dim, dim)
        self.sampler = SamplingHead(dim, heads, n_refs, n_points)

    def forward(self, query: torch.Tensor, groups: Sequence[ValueGroup]) -> torch.Tensor:
        projected = [dataclasses.replace(g, maps=self.value_proj(g.maps)) for g in groups]
        return self.output_proj(self.sampler(query, projected))


def _rig_key(rig: CameraRig) -> str:
    h = hashlib.sha1()
    for cam in rig.cameras:
        h.update(cam.intrinsics.tobytes())
        h.update(cam.extrinsics.tobytes())
        h.update(np.array([cam.width, cam.height]).tobytes())
    return h.hexdigest()


@dataclass
class _IcaGeometry:
    pair_query: torch.Tensor      # [Np] query index within the view
    pair_camera: torch.Tensor     # [Np]
    level_coords: list[torch.Tensor]  # per scale [Np, R, 2] feature-grid (row, col)
    mask: torch.Tensor            # [Np, R]
    n_valid: torch.Tensor         # [Q] valid-camera count per query


def ica_geometry(spec: TpvGridSpec, rig: CameraRig, n_ref: int, view: str,
                 strides: Sequence[float]) -> _IcaGeometry:
    """Valid (query, camera) pairs and their projected reference points."""
    refs = geometry.ica_reference_grid(view, spec, n_ref)  # [A,B,R,3]
    A, B = refs.shape[:2]
    proj = geometry.project_to_pixels(refs.reshape(A * B, n_ref, 3), rig)
    valid = proj.valid  # [Ncam, Q, R]
    cam_ok = valid.any(axis=2)  # [Ncam, Q]
    cams, queries = np.nonzero(cam_ok)
    order = np.lexsort((cams, queries))
    cams, queries = cams[order], queries[order]
    uv = proj.uv[cams, queries]  # [Np, R, 2]
    levels = []
    for stride in strides:
        rc = np.stack([uv[..., 1] / stride - 0.5, uv[..., 0] / stride - 0.5], axis=-1)
        levels.append(torch.as_tensor(rc, dtype=torch.float32))
    return _IcaGeometry(torch.as_tensor(queries, dtype=torch.long),
                        torch.as_tensor(cams, dtype=torch.long),
                        levels,
                        torch.as_tensor(valid[cams, queries]),
                        torch.as_tensor(cam_ok.sum(axis=0), dtype=torch.long))


class ImageCrossAttention(nn.Module):
    """Lift camera features onto TPV queries; averages over valid cameras."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        C = config.channels
        self.config = config
        self.value_proj = nn.Linear(C, C)
        self.output_proj = nn.Linear(C, C)
        self.samplers = nn.ModuleDict({
            v: SamplingHead(C, config.heads, config.n_ref[v] * config.n_scales, config.points_per_head)
            for v in VIEWS})
        self._cache: dict = {}

    def geometry_for(self, rig: CameraRig, strides: Sequence[float]) -> dict[str, _IcaGeometry]:
        key = (_rig_key(rig), tuple(strides))
        if key not in self._cache:
            if len(self._cache) > 8:
                self._cache.clear()
            self._cache[key] = {v: ica_geometry(self.config.spec, rig, self.config.n_ref[v], v, strides)
                                for v in VIEWS}
        return self._cache[key]

    def forward(self, queries: dict[str, torch.Tensor], feats: ImageFeatures,
                rig: CameraRig) -> dict[str, torch.Tensor]:
        if feats.n_cameras != len(rig):
            raise ContractError(f"{feats.n_cameras} feature maps for a {len(rig)}-camera rig")
        geo = self.geometry_for(rig, feats.strides)
        values = [self.value_proj(lvl.to(self.output_proj.weight.dtype)) for lvl in feats.levels]
        out = {}
        for view in VIEWS:
            q = queries[view]
            A, B, C = q.shape
            flat = q.reshape(A * B, C)
            g = geo[view]
            pooled = flat.new_zeros(A * B, C)
            if g.pair_query.numel():
                groups = [ValueGroup(vmap, coords.to(flat.dtype), g.pair_camera, g.mask)
                          for vmap, coords in zip(values, g.level_coords)]
                sampled = self.samplers[view](flat[g.pair_query], groups)
                pooled = pooled.index_add(0, g.pair_query, sampled)
            has = (g.n_valid > 0)
            denom = g.n_valid.clamp(min=1).to(flat.dtype)[:, None]
            update = self.output_proj(pooled / denom) * has[:, None].to(flat.dtype)
            out[view] = update.reshape(A, B, C)
        return out


class CrossViewHybridAttention(nn.Module):
    """Deformable attention of every TPV query over all three planes."""

    def __init__(self, config: EncoderConfig, layer_seed: int):
        super().__init__()
        C = config.channels
        self.config = config
        self.value_proj = nn.Linear(C, C)
        self.output_proj = nn.Linear(C, C)
        samplers = {}
        for i, view in enumerate(VIEWS):
            groups = geometry.cvha_reference_grid(
                view, config.spec, config.cvha_radius, config.cvha_same,
                config.cross_count(view), seed=layer_seed * 3 + i)
            A, B = config.spec.plane_shape(view)
            n_refs = 0
            for plane in VIEWS:
                ref = geometry.plane_to_grid(groups[plane]).reshape(A * B, -1, 2)
                self.register_buffer(f"ref_{view}_{plane}", torch.as_tensor(ref, dtype=torch.float32),
                                     persistent=False)
                n_refs += ref.shape[1]
            samplers[view] = SamplingHead(C, config.heads, n_refs, config.points_per_head)
        self.samplers = nn.ModuleDict(samplers)

    def reference_groups(self, view: str) -> dict[str, torch.Tensor]:
        return {plane: getattr(self, f"ref_{view}_{plane}") for plane in VIEWS}

    def forward(self, queries: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
        values = {v: self.value_proj(q)[None] for v, q in queries.items()}
        out = {}
        for view in VIEWS:
            q = queries[view]
            A, B, C = q.shape
            groups = [ValueGroup(values[plane], ref.to(q.dtype))
                      for plane, ref in self.reference_groups(view).items()]
            sampled = self.samplers[view](q.reshape(A * B, C), groups)
            out[view] = self.output_proj(sampled).reshape(A, B, C)
        return out


class FeedForward(nn.Module):
    def __init__(self, dim: int, expansion: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim * expansion)
        self.fc2 = nn.Linear(dim * expansion, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class EncoderBlock(nn.Module):
    """Pre-norm residual block: CVHA -> (ICA) -> feed-forward.

    With ``with_ica`` this is the hybrid-cross-attention block (HCAB),
    otherwise the hybrid-attention block (HAB).
    """

    def __init__(self, config: EncoderConfig, index: int, with_ica: bool):
        super().__init__()
        C = config.channels
        self.config = config
        self.with_ica = with_ica
        self.norm_cvha = LayerNorm(C)
        self.cvha = CrossViewHybridAttention(config, layer_seed=config.seed * 1000 + index)
        if with_ica:
            self.norm_ica = LayerNorm(C)
            self.ica = ImageCrossAttention(config)
        self.norm_ffn = LayerNorm(C)
        self.ffn = FeedForward(C, config.ffn_expansion)

    def _norm(self, norm: LayerNorm, x):
        return x if self.config.bypass_norm else norm(x)

    def forward(self, x: torch.Tensor, feats: ImageFeatures | None = None,
                rig: CameraRig | None = None) -> torch.Tensor:
        spec = self.config.spec
        x = x + _join(self.cvha(_split(self._norm(self.norm_cvha, x), spec)))
        if self.with_ica:
            if feats is None or rig is None:
                raise ContractError("HCAB block needs image features and a camera rig")
            x = x + _join(self.ica(_split(self._norm(self.norm_ica, x), spec), feats, rig))
        return x + self.ffn(self._norm(self.norm_ffn, x))


def _split(x: torch.Tensor, spec: TpvGridSpec) -> dict[str, torch.Tensor]:
    out, start = {}, 0
    for view in VIEWS:
        A, B = spec.plane_shape(view)
        out[view] = x[start:start + A * B].reshape(A, B, -1)
        start += A * B
    return out


def _join(planes: dict[str, torch.Tensor]) -> torch.Tensor:
    return torch.cat([planes[v].reshape(-1, planes[v].shape[-1]) for v in VIEWS], dim=0)


class Backbone(nn.Module):
    """Strided 3x3 conv stack with a 1x1 projection to C per output scale."""

    def __init__(self, config: EncoderConfig, in_channels: int = 3):
        super().__init__()
        self.stages = nn.ModuleList()
        c_in = in_channels
        for c_out in config.backbone_channels:
            self.stages.append(nn.Conv2d(c_in, c_out, 3, stride=2, padding=1))
            c_in = c_out
        n = len(config.backbone_channels)
        self.scale_ids = list(range(n - config.n_scales, n))
        self.proj = nn.ModuleList(nn.Conv2d(config.backbone_channels[i], config.channels, 1)
                                  for i in self.scale_ids)

    def forward(self, images: torch.Tensor) -> ImageFeatures:
        """images: [n_cam, 3, height, width] with values in [0, 1]."""
        if images.dim() != 4:
            raise ShapeError(f"images must be [n_cam, 3, h, w], got {tuple(images.shape)}")
        x = images
        outs = []
        for i, stage in enumerate(self.stages):
            x = F.gelu(stage(x))
            outs.append(x)
        levels, strides = [], []
        for proj, i in zip(self.proj, self.scale_ids):
            levels.append(proj(outs[i]).permute(0, 2, 3, 1))
            strides.append(float(2 ** (i + 1)))
        return ImageFeatures(levels, strides)


class TPVFormer(nn.Module):
    """Learnable TPV queries refined by N1 HCAB and N2 HAB blocks."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        spec, C = config.spec, config.channels
        gen = torch.Generator().manual_seed(config.seed)
        for view in VIEWS:
            A, B = spec.plane_shape(view)
            name = _PLANE_NAMES[view]
            q = torch.randn(A, B, C, generator=gen) * config.query_init_std
            self.register_parameter(f"query_{name}", nn.Parameter(q))
            self.register_parameter(f"pos_{name}", nn.Parameter(torch.zeros(A, B, C)))
        self.backbone = Backbone(config)
        self.blocks = nn.ModuleList(
            [EncoderBlock(config, i, with_ica=True) for i in range(config.n_hcab)]
            + [EncoderBlock(config, config.n_hcab + i, with_ica=False) for i in range(config.n_hab)])
        self._init_weights(gen)

    def _init_weights(self, gen: torch.Generator) -> None:
        for name, p in self.named_parameters():
            if name.startswith(("query_", "pos_")) or "norm" in name:
                continue
            if "offset_proj" in name or "weight_proj" in name:
                continue
            with torch.no_grad():
                if name.endswith("bias"):
                    p.zero_()
                else:
                    fan_in = int(np.prod(p.shape[1:]))
                    p.copy_(torch.randn(p.shape, generator=gen) / np.sqrt(fan_in))
        if self.config.zero_init_outputs:
            for mod in self.modules():
                if isinstance(mod, (ImageCrossAttention, CrossViewHybridAttention)):
                    outs = [mod.output_proj]
                elif isinstance(mod, FeedForward):
                    outs = [mod.fc2]
                else:
                    continue
                for lin in outs:
                    nn.init.zeros_(lin.weight)
                    nn.init.zeros_(lin.bias)

    def initial_tokens(self) -> torch.Tensor:
        """Queries plus positional embeddings as one [HW + DH + WD, C] matrix."""
        return torch.cat([(getattr(self, f"query_{n}") + getattr(self, f"pos_{n}")).reshape(
            -1, self.config.channels) for n in ("hw", "dh", "wd")], dim=0)

    def forward(self, images: torch.Tensor, rig: CameraRig) -> TpvPlanes:
        feats = self.backbone(images.to(self.query_hw.dtype))
        x = self.initial_tokens()
        for block in self.blocks:
            x = block(x, feats, rig) if block.with_ica else block(x)
        planes = _split(x, self.config.spec)
        return TpvPlanes(planes["top"], planes["side"], planes["front"], self.config.spec)

    encode = forward


def encode(images, rig: CameraRig, config: EncoderConfig, state: TPVFormer | None = None) -> TpvPlanes:
    """Run the encoder; builds a fresh seeded state when none is given."""
    if state is None:
        state = TPVFormer(config)
    images = torch.as_tensor(np.asarray(images) if not isinstance(images, torch.Tensor) else images)
    return state(images, rig)
