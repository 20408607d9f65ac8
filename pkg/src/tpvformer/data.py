"""Synthetic box scenes, toy multi-camera rendering, LiDAR-style sampling, file formats.

Scenes are axis-aligned boxes snapped to the voxel grid standing on a
one-cell-thick ground slab.  All generators are deterministic per seed.

File formats
------------
points (text)::

    TPVPTS 1
    count <N>
    fields x y z class
    # optional comment lines (run configuration)
    <x> <y> <z> <class>          one line per point, N lines

voxel grid (binary, little-endian)::

    b"TPVOCC1" | u32 H | u32 W | u32 D | H*W*D uint8 class ids (h-major, w, d-minor)

images are binary PPM (P6, 8-bit).  Scenes are JSON; rigs use
:func:`tpvformer.geometry.save_rig`.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, DataError
from .geometry import CameraRig, TpvGridSpec, load_rig, make_surround_rig, save_rig, voxel_centers

N_CLASSES = 6
GROUND_CLASS = 0
SURFACE_NUDGE = 5e-5
OCC_MAGIC = b"TPVOCC1"

DIFFICULTY_BOXES = {"empty": 0, "easy": 6, "medium": 12, "hard": 20, "stacked": 10}

PALETTE = np.array([
    [110, 110, 110],  # 0 ground
    [220, 40, 40],
    [40, 180, 60],
    [40, 80, 220],
    [230, 200, 40],
    [180, 60, 200],
    [60, 200, 210],
    [250, 140, 30],
], dtype=np.uint8)
BACKGROUND = np.array([170, 200, 235], dtype=np.uint8)

DEFAULT_SPEC = TpvGridSpec(50, 50, 4, 1.0)


@dataclass
class Box:
    cls: int
    center: tuple[float, float, float]
    extents: tuple[float, float, float]

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.center) - np.asarray(self.extents) / 2

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.center) + np.asarray(self.extents) / 2


@dataclass
class SyntheticScene:
    spec: TpvGridSpec
    boxes: list[Box] = field(default_factory=list)
    ground_class: int | None = GROUND_CLASS
    ground_cells: int = 1
    seed: int = 0
    difficulty: str = "easy"
    n_classes: int = N_CLASSES

    def __post_init__(self):
        b = self.spec.world_bounds()
        for box in self.boxes:
            if not (0 <= box.cls < self.n_classes):
                raise DataError(f"box class {box.cls} outside [0, {self.n_classes})")
            if np.any(box.lo < b[:, 0] - 1e-9) or np.any(box.hi > b[:, 1] + 1e-9):
                raise DataError("box extends beyond the TPV volume")

    def solids(self) -> list[Box]:
        """Boxes plus the ground slab, which spans the whole footprint."""
        out = list(self.boxes)
        if self.ground_class is not None:
            b = self.spec.world_bounds()
            top = b[2, 0] + self.ground_cells * self.spec.s
            lo = np.array([b[0, 0], b[1, 0], b[2, 0]])
            hi = np.array([b[0, 1], b[1, 1], top])
            out.append(Box(self.ground_class, tuple((lo + hi) / 2), tuple(hi - lo)))
        return out

    def to_dict(self) -> dict:
        return {"spec": self.spec.to_dict(), "boxes": [asdict(b) for b in self.boxes],
                "ground_class": self.ground_class, "ground_cells": self.ground_cells,
                "seed": self.seed, "difficulty": self.difficulty, "n_classes": self.n_classes}

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticScene":
        try:
            boxes = [Box(int(b["cls"]), tuple(b["center"]), tuple(b["extents"])) for b in d["boxes"]]
            return cls(TpvGridSpec(**d["spec"]), boxes, d.get("ground_class", GROUND_CLASS),
                       int(d.get("ground_cells", 1)), int(d.get("seed", 0)),
                       d.get("difficulty", "easy"), int(d.get("n_classes", N_CLASSES)))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"bad scene document: {exc}") from None


@dataclass
class LabeledPointSet:
    xyz: np.ndarray     # [N, 3] metres
    labels: np.ndarray  # [N] class ids

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.xyz) != len(self.labels):
            raise DataError("point and label counts differ")
        if not np.isfinite(self.xyz).all():
            raise DataError("non-finite point coordinates")

    def __len__(self) -> int:
        return len(self.labels)


def _cell_box(spec: TpvGridSpec, cls: int, lo_idx, hi_idx) -> Box:
    lo = (np.asarray(lo_idx, dtype=np.float64) - np.asarray(spec.extents) / 2) * spec.s
    hi = (np.asarray(hi_idx, dtype=np.float64) - np.asarray(spec.extents) / 2) * spec.s
    return Box(int(cls), tuple((lo + hi) / 2), tuple(hi - lo))


def generate_scene(seed: int, difficulty: str = "easy", spec: TpvGridSpec = DEFAULT_SPEC,
                   n_classes: int = N_CLASSES, clear_radius: int = 3):
    """Random grid-snapped boxes on a ground slab; returns (scene, dense grid).

    ``difficulty`` sets the box count; ``"stacked"`` stacks two classes in
    every box column so semantics vary along z.
    """
    if difficulty not in DIFFICULTY_BOXES:
        raise ConfigError(f"unknown difficulty {difficulty!r}; choose from {sorted(DIFFICULTY_BOXES)}")
    H, W, D = spec.extents
    ground = 1
    if D < 2:
        raise ConfigError("scenes need at least two vertical cells (ground + one free layer)")
    if difficulty == "stacked" and D < 3:
        raise ConfigError("stacked scenes need D >= 3")
    rng = np.random.default_rng(seed)
    taken = np.zeros((H, W), dtype=bool)
    ch, cw = H // 2, W // 2
    taken[max(0, ch - clear_radius):ch + clear_radius, max(0, cw - clear_radius):cw + clear_radius] = True
    boxes: list[Box] = []
    n_boxes = DIFFICULTY_BOXES[difficulty]
    max_fp = max(1, min(4, H // 4, W // 4))
    placed = 0
    for _ in range(50 * n_boxes):
        if placed >= n_boxes:
            break
        fh, fw = rng.integers(1, max_fp + 1, size=2)
        h0, w0 = rng.integers(0, H - fh + 1), rng.integers(0, W - fw + 1)
        # one-cell gap keeps boxes from touching
        if taken[max(0, h0 - 1):h0 + fh + 1, max(0, w0 - 1):w0 + fw + 1].any():
            continue
        taken[h0:h0 + fh, w0:w0 + fw] = True
        placed += 1
        if difficulty == "stacked":
            split = int(rng.integers(ground + 1, D))
            top = int(rng.integers(split + 1, D + 1))
            lower, upper = rng.choice(np.arange(1, n_classes), size=2, replace=False)
            boxes.append(_cell_box(spec, lower, (h0, w0, ground), (h0 + fh, w0 + fw, split)))
            boxes.append(_cell_box(spec, upper, (h0, w0, split), (h0 + fh, w0 + fw, top)))
        else:
            top = int(rng.integers(ground + 1, D + 1))
            cls = int(rng.integers(1, n_classes))
            boxes.append(_cell_box(spec, cls, (h0, w0, ground), (h0 + fh, w0 + fw, top)))
    scene = SyntheticScene(spec, boxes, GROUND_CLASS, ground, seed, difficulty, n_classes)
    return scene, voxelize(scene)


def voxelize(scene: SyntheticScene) -> np.ndarray:
    """Dense uint8 [H, W, D] labels: class of the solid containing each voxel centre."""
    spec = scene.spec
    centers = voxel_centers(spec)
    grid = np.full(spec.extents, scene.n_classes, dtype=np.uint8)
    for box in scene.solids()[::-1]:
        inside = np.all((centers > box.lo) & (centers < box.hi), axis=-1)
        grid[inside] = box.cls
    return grid


def ray_cast(origins: np.ndarray, dirs: np.ndarray, solids: list[Box]):
    """Nearest entry hit per ray: returns (t, solid index or -1)."""
    n = dirs.shape[0]
    if not solids or n == 0:
        return np.full(n, np.inf), np.full(n, -1, dtype=np.int64)
    lo = np.stack([b.lo for b in solids])[None]  # [1,M,3]
    hi = np.stack([b.hi for b in solids])[None]
    o = np.broadcast_to(origins, dirs.shape)[:, None, :]
    d = dirs[:, None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (lo - o) * inv
        t2 = (hi - o) * inv
    t1 = np.where(np.isnan(t1), -np.inf, t1)
    t2 = np.where(np.isnan(t2), np.inf, t2)
    tmin = np.minimum(t1, t2).max(axis=2)
    tmax = np.maximum(t1, t2).min(axis=2)
    hit = (tmax >= tmin) & (tmin > 0)
    t = np.where(hit, tmin, np.inf)
    which = t.argmin(axis=1)
    best = t[np.arange(n), which]
    return best, np.where(np.isfinite(best), which, -1)


def render_cameras(scene: SyntheticScene, rig: CameraRig) -> np.ndarray:
    """Flat class-coloured images, uint8 [n_cam, height, width, 3]."""
    solids = scene.solids()
    classes = np.array([b.cls for b in solids], dtype=np.int64)
    images = []
    for cam in rig.cameras:
        u, v = np.meshgrid(np.arange(cam.width) + 0.5, np.arange(cam.height) + 0.5)
        pix = np.stack([u.ravel(), v.ravel(), np.ones(u.size)], axis=1)
        rays_cam = pix @ np.linalg.inv(cam.intrinsics).T
        R = cam.extrinsics[:3, :3]
        dirs = rays_cam @ R  # R^T applied to row vectors
        _, which = ray_cast(cam.center, dirs, solids)
        img = np.broadcast_to(BACKGROUND, (which.size, 3)).copy()
        hit = which >= 0
        img[hit] = PALETTE[classes[which[hit]] % len(PALETTE)]
        images.append(img.reshape(cam.height, cam.width, 3))
    return np.stack(images) if images else np.zeros((0, 1, 1, 3), dtype=np.uint8)


def images_to_tensor(images: np.ndarray) -> torch.Tensor:
    """uint8 [n, h, w, 3] -> float [n, 3, h, w] in [0, 1]."""
    return torch.as_tensor(np.asarray(images), dtype=torch.float32).permute(0, 3, 1, 2) / 255.0


def sample_lidar(scene: SyntheticScene, n_rays: int, seed: int,
                 origin=(0.0, 0.0, 0.0)) -> LabeledPointSet:
    """Cast rays from ``origin`` toward uniform random targets in the volume.

    Each hit is returned just inside the struck solid (by ``SURFACE_NUDGE``)
    so it voxelises into that solid's cell; misses are dropped.
    """
    if n_rays <= 0:
        return LabeledPointSet(np.zeros((0, 3)), np.zeros(0, dtype=np.int64))
    rng = np.random.default_rng(seed)
    b = scene.spec.world_bounds()
    targets = rng.uniform(b[:, 0], b[:, 1], size=(n_rays, 3))
    o = np.asarray(origin, dtype=np.float64)
    dirs = targets - o
    norms = np.linalg.norm(dirs, axis=1, keepdims=True)
    ok = norms[:, 0] > 1e-9
    dirs = dirs[ok] / norms[ok]
    solids = scene.solids()
    t, which = ray_cast(o, dirs, solids)
    hit = which >= 0
    pts = o + dirs[hit] * (t[hit] + SURFACE_NUDGE)[:, None]
    labels = np.array([solids[i].cls for i in which[hit]], dtype=np.int64)
    return LabeledPointSet(pts, labels)


def distance_to_surface(points: np.ndarray, box: Box) -> np.ndarray:
    """Unsigned distance from points [N, 3] to the boundary of ``box``."""
    lo, hi = box.lo, box.hi
    outside = np.maximum(np.maximum(lo - points, points - hi), 0)
    d_out = np.linalg.norm(outside, axis=1)
    d_in = np.minimum(points - lo, hi - points).min(axis=1)
    inside = np.all((points >= lo) & (points <= hi), axis=1)
    return np.where(inside, d_in, d_out)


# ---------------------------------------------------------------- file formats

def save_points(path, points: LabeledPointSet, comments: dict | None = None) -> None:
    lines = ["TPVPTS 1", f"count {len(points)}", "fields x y z class"]
    for k, v in (comments or {}).items():
        lines.append(f"# {k}={v}")
    for (x, y, z), c in zip(points.xyz, points.labels):
        lines.append(f"{float(x)!r} {float(y)!r} {float(z)!r} {int(c)}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_points(path) -> LabeledPointSet:
    text = Path(path).read_text().splitlines()
    if len(text) < 3 or text[0].strip() != "TPVPTS 1":
        raise DataError(f"{path}: not a TPVPTS file")
    try:
        count = int(text[1].split()[1])
    except (IndexError, ValueError):
        raise DataError(f"{path}: bad count line") from None
    if text[2].split() != ["fields", "x", "y", "z", "class"]:
        raise DataError(f"{path}: unsupported fields line {text[2]!r}")
    rows = [ln for ln in text[3:] if ln.strip() and not ln.startswith("#")]
    if len(rows) != count:
        raise DataError(f"{path}: header says {count} points, found {len(rows)}")
    xyz = np.zeros((count, 3))
    lab = np.zeros(count, dtype=np.int64)
    for i, ln in enumerate(rows):
        tok = ln.split()
        if len(tok) != 4:
            raise DataError(f"{path}: bad point line {ln!r}")
        try:
            xyz[i] = [float(t) for t in tok[:3]]
            lab[i] = int(tok[3])
        except ValueError:
            raise DataError(f"{path}: bad point line {ln!r}") from None
    return LabeledPointSet(xyz, lab)


def save_voxel_grid(path, grid: np.ndarray) -> None:
    g = np.asarray(grid)
    if g.ndim != 3 or g.min(initial=0) < 0 or g.max(initial=0) > 255:
        raise DataError("voxel grid must be a 3-D array of byte class ids")
    with open(path, "wb") as fh:
        fh.write(OCC_MAGIC)
        fh.write(struct.pack("<3I", *g.shape))
        fh.write(np.ascontiguousarray(g, dtype=np.uint8).tobytes(order="C"))


def load_voxel_grid(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:7] != OCC_MAGIC:
        raise DataError(f"{path}: bad voxel grid magic")
    H, W, D = struct.unpack("<3I", raw[7:19])
    body = raw[19:]
    if len(body) != H * W * D:
        raise DataError(f"{path}: expected {H * W * D} voxels, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(H, W, D).copy()


def save_ppm(path, image: np.ndarray, comment: str | None = None) -> None:
    img = np.ascontiguousarray(image, dtype=np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DataError(f"PPM needs an [h, w, 3] image, got shape {img.shape}")
    h, w = img.shape[:2]
    head = "P6\n"
    if comment:
        head += "".join(f"# {ln}\n" for ln in comment.splitlines())
    with open(path, "wb") as fh:
        fh.write(f"{head}{w} {h}\n255\n".encode())
        fh.write(img.tobytes())


def load_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4 and pos < len(raw):
        if raw[pos:pos + 1] == b"#":
            pos = raw.find(b"\n", pos) + 1 or len(raw)
        elif raw[pos:pos + 1].isspace():
            pos += 1
        else:
            end = pos
            while end < len(raw) and not raw[end:end + 1].isspace():
                end += 1
            tokens.append(raw[pos:end])
            pos = end
    if len(tokens) < 4 or tokens[0] != b"P6" or tokens[3] != b"255":
        raise DataError(f"{path}: only 8-bit binary PPM is supported")
    w, h = int(tokens[1]), int(tokens[2])
    body = raw[pos + 1:]
    if len(body) != w * h * 3:
        raise DataError(f"{path}: truncated PPM")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


@dataclass
class SceneSample:
    """Everything one training/evaluation example needs."""

    images: np.ndarray           # uint8 [n_cam, h, w, 3]
    rig: CameraRig
    points: LabeledPointSet
    spec: TpvGridSpec
    dense: np.ndarray | None = None
    scene: SyntheticScene | None = None

    def image_tensor(self) -> torch.Tensor:
        return images_to_tensor(self.images)


def make_sample(seed: int = 0, difficulty: str = "easy", spec: TpvGridSpec = DEFAULT_SPEC,
                n_rays: int = 20000, rig: CameraRig | None = None, lidar_seed: int | None = None,
                n_classes: int = N_CLASSES) -> SceneSample:
    scene, dense = generate_scene(seed, difficulty, spec, n_classes)
    rig = rig or make_surround_rig()
    images = render_cameras(scene, rig)
    points = sample_lidar(scene, n_rays, seed if lidar_seed is None else lidar_seed)
    return SceneSample(images, rig, points, spec, dense, scene)


def regrid_sample(sample: SceneSample, spec: TpvGridSpec) -> SceneSample:
    """Same world scene, images and points on another grid covering the same volume."""
    if np.abs(sample.spec.world_bounds() - spec.world_bounds()).max() > 1e-9:
        raise ConfigError(f"grid {spec} does not cover the same volume as {sample.spec}")
    if spec == sample.spec:
        return sample
    scene = None
    dense = None
    if sample.scene is not None:
        old = sample.scene
        ground = old.ground_cells * sample.spec.s / spec.s
        if abs(ground - round(ground)) > 1e-9 or round(ground) < 1:
            raise ConfigError("the ground slab must span a whole number of new cells")
        scene = SyntheticScene(spec, list(old.boxes), old.ground_class, int(round(ground)),
                               old.seed, old.difficulty, old.n_classes)
        dense = voxelize(scene)
    return SceneSample(sample.images, sample.rig, sample.points, spec, dense, scene)


def write_sample(out_dir, sample: SceneSample, meta: dict | None = None) -> None:
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    doc = sample.scene.to_dict() if sample.scene is not None else {"spec": sample.spec.to_dict()}
    if meta:
        doc["config"] = meta
    (d / "scene.json").write_text(json.dumps(doc, indent=2))
    save_rig(d / "rig.txt", sample.rig)
    for j, img in enumerate(sample.images):
        save_ppm(d / f"cam{j}.ppm", img)
    save_points(d / "points.txt", sample.points, meta)
    if sample.dense is not None:
        save_voxel_grid(d / "dense.occ", sample.dense)
        (d / "dense.occ.json").write_text(json.dumps({"config": meta or {}}, indent=2))


def read_sample(data_dir) -> SceneSample:
    d = Path(data_dir)
    try:
        doc = json.loads((d / "scene.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read {d / 'scene.json'}: {exc}") from None
    scene = SyntheticScene.from_dict(doc) if "boxes" in doc else None
    spec = TpvGridSpec(**doc["spec"])
    rig = load_rig(d / "rig.txt")
    images = np.stack([load_ppm(d / f"cam{j}.ppm") for j in range(len(rig))])
    points = load_points(d / "points.txt")
    dense = load_voxel_grid(d / "dense.occ") if (d / "dense.occ").exists() else None
    return SceneSample(images, rig, points, spec, dense, scene)
