"""Coordinate systems: TPV planes, world space and camera pixels.

World axes map onto grid axes as x -> H, y -> W, z -> D and the grid is
centred on the ego origin.  Plane coordinates are continuous: cell ``i``
spans ``[i, i + 1)`` so its centre sits at ``i + 0.5``, and
``x = (h - H/2) * s``.  The bilinear sampler addresses cell centres with
integers, hence ``grid = plane - 0.5`` (see :func:`plane_to_grid`).

The three views and the world axes their two plane coordinates follow:

======  ==========  ==========  ==============
view    plane axes  world axes  orthogonal axis
======  ==========  ==========  ==============
top     (h, w)      (x, y)      z (D)
side    (d, h)      (z, x)      y (W)
front   (w, d)      (y, z)      x (H)
======  ==========  ==========  ==============
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

VIEWS = ("top", "side", "front")

# world-axis index of each plane coordinate, and of the axis the view collapses
_PLANE_AXES = {"top": (0, 1), "side": (2, 0), "front": (1, 2)}
_ORTHO_AXIS = {"top": 2, "side": 1, "front": 0}

MIN_DEPTH = 1e-6


def _check_view(view: str) -> None:
    if view not in _PLANE_AXES:
        raise ConfigError(f"unknown view {view!r}; expected one of {VIEWS}")


@dataclass(frozen=True)
class TpvGridSpec:
    """Cell counts per axis and the (cubic) cell side length in metres."""

    H: int
    W: int
    D: int
    s: float = 1.0

    def __post_init__(self):
        for name in ("H", "W", "D"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"TpvGridSpec.{name} must be >= 1")
        if not self.s > 0:
            raise ConfigError("TpvGridSpec.s must be > 0")

    @property
    def extents(self) -> tuple[int, int, int]:
        return (self.H, self.W, self.D)

    def plane_shape(self, view: str) -> tuple[int, int]:
        _check_view(view)
        ext = self.extents
        a, b = _PLANE_AXES[view]
        return (ext[a], ext[b])

    def ortho_extent(self, view: str) -> int:
        _check_view(view)
        return self.extents[_ORTHO_AXIS[view]]

    def world_bounds(self) -> np.ndarray:
        """[3, 2] array of (min, max) world coordinates of the volume."""
        ext = np.asarray(self.extents, dtype=np.float64)
        half = ext * self.s / 2
        return np.stack([-half, half], axis=1)

    def to_dict(self) -> dict:
        return {"H": self.H, "W": self.W, "D": self.D, "s": self.s}


def plane_to_world(view: str, coords, spec: TpvGridSpec) -> np.ndarray:
    """Map continuous plane coordinates [..., 2] to the two world coordinates."""
    _check_view(view)
    c = np.asarray(coords, dtype=np.float64)
    a, b = _PLANE_AXES[view]
    ext = spec.extents
    return np.stack([(c[..., 0] - ext[a] / 2) * spec.s,
                     (c[..., 1] - ext[b] / 2) * spec.s], axis=-1)


def world_to_plane(view: str, points, spec: TpvGridSpec) -> np.ndarray:
    """Project world points [..., 3] (or world pairs [..., 2]) onto a plane."""
    _check_view(view)
    p = np.asarray(points, dtype=np.float64)
    a, b = _PLANE_AXES[view]
    if p.shape[-1] == 3:
        pa, pb = p[..., a], p[..., b]
    elif p.shape[-1] == 2:
        pa, pb = p[..., 0], p[..., 1]
    else:
        raise DataError(f"world_to_plane expects [...,3] or [...,2], got {p.shape}")
    ext = spec.extents
    return np.stack([pa / spec.s + ext[a] / 2, pb / spec.s + ext[b] / 2], axis=-1)


def plane_to_grid(coords) -> np.ndarray:
    """Continuous plane coordinates to sampler grid coordinates."""
    return np.asarray(coords, dtype=np.float64) - 0.5


def cell_centers(view: str, spec: TpvGridSpec) -> np.ndarray:
    """Plane coordinates of every cell centre of a view, shape [A, B, 2]."""
    A, B = spec.plane_shape(view)
    ii, jj = np.meshgrid(np.arange(A) + 0.5, np.arange(B) + 0.5, indexing="ij")
    return np.stack([ii, jj], axis=-1)


def voxel_centers(spec: TpvGridSpec) -> np.ndarray:
    """World coordinates of all voxel centres, shape [H, W, D, 3]."""
    axes = [(np.arange(n) + 0.5 - n / 2) * spec.s for n in spec.extents]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def uniform_centers(n_cells: int, n: int) -> np.ndarray:
    """``n`` evenly spaced plane coordinates at sub-cell centres of ``[0, n_cells)``."""
    return (np.arange(n) + 0.5) * (n_cells / n)


def ica_reference_points(view: str, query, spec: TpvGridSpec, n_ref: int) -> np.ndarray:
    """World reference points [n_ref, 3] for the query at cell index ``query``.

    The points share the query's two in-plane world coordinates (taken at the
    cell centre) and are spread uniformly through the orthogonal extent.
    """
    return ica_reference_grid(view, spec, n_ref)[tuple(query)]


def ica_reference_grid(view: str, spec: TpvGridSpec, n_ref: int) -> np.ndarray:
    """Reference points for every query of a view, shape [A, B, n_ref, 3]."""
    _check_view(view)
    n_ortho = spec.ortho_extent(view)
    if n_ref < 1:
        raise ConfigError("n_ref must be >= 1")
    if n_ref > n_ortho:
        raise ConfigError(f"n_ref={n_ref} exceeds the {n_ortho} cells along the {view} pillar")
    A, B = spec.plane_shape(view)
    inplane = plane_to_world(view, cell_centers(view, spec), spec)  # [A,B,2]
    ortho = (uniform_centers(n_ortho, n_ref) - n_ortho / 2) * spec.s  # [n_ref]
    out = np.empty((A, B, n_ref, 3))
    a, b = _PLANE_AXES[view]
    out[..., a] = inplane[:, :, None, 0]
    out[..., b] = inplane[:, :, None, 1]
    out[..., _ORTHO_AXIS[view]] = ortho[None, None, :]
    return out


def _disc_offsets(rng: np.random.Generator, n: int, radius: float) -> np.ndarray:
    r = radius * np.sqrt(rng.uniform(0.0, 1.0, n))
    theta = rng.uniform(0.0, 2 * np.pi, n)
    return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=-1)


def cvha_reference_points(view: str, query, spec: TpvGridSpec, radius: float = 2.0,
                          n_same: int = 4, n_cross: int | None = None,
                          seed: int = 0) -> dict[str, np.ndarray]:
    """Grouped plane coordinates for one cross-view hybrid-attention query.

    Returns ``{plane: [n, 2]}`` for all three planes.  The query's own plane
    gets ``n_same`` random points in a disc of ``radius`` cells; the other two
    planes get the pillar's ``n_cross`` uniform samples projected onto them.
    """
    groups = cvha_reference_grid(view, spec, radius, n_same, n_cross, seed)
    return {k: v[tuple(query)] for k, v in groups.items()}


def cvha_reference_grid(view: str, spec: TpvGridSpec, radius: float = 2.0, n_same: int = 4,
                        n_cross: int | None = None, seed: int = 0) -> dict[str, np.ndarray]:
    """Grouped plane coordinates for every query of ``view``: ``{plane: [A, B, n, 2]}``."""
    _check_view(view)
    if radius < 1:
        raise ConfigError(f"CVHA neighbourhood radius {radius} is below one cell")
    n_ortho = spec.ortho_extent(view)
    if n_cross is None:
        n_cross = n_ortho
    if n_same < 1 or n_cross < 1:
        raise ConfigError("CVHA reference counts must be >= 1")
    A, B = spec.plane_shape(view)
    centers = cell_centers(view, spec)  # [A,B,2]
    rng = np.random.default_rng(seed)
    same = centers[:, :, None, :] + _disc_offsets(rng, A * B * n_same, radius).reshape(A, B, n_same, 2)

    t = uniform_centers(n_ortho, n_cross)  # orthogonal-axis plane coordinate samples
    ones = np.ones((A, B, n_cross))
    c0 = centers[:, :, None, 0] * ones
    c1 = centers[:, :, None, 1] * ones
    tt = t[None, None, :] * ones
    if view == "top":       # query (h, w); pillar along d
        groups = {"top": same,
                  "side": np.stack([tt, c0], -1),    # (d_i, h)
                  "front": np.stack([c1, tt], -1)}   # (w, d_i)
    elif view == "side":    # query (d, h); pillar along w
        groups = {"top": np.stack([c1, tt], -1),     # (h, w_i)
                  "side": same,
                  "front": np.stack([tt, c0], -1)}   # (w_i, d)
    else:                   # query (w, d); pillar along h
        groups = {"top": np.stack([tt, c0], -1),     # (h_i, w)
                  "side": np.stack([c1, tt], -1),    # (d, h_i)
                  "front": same}
    return groups


@dataclass
class Camera:
    """Pinhole camera: intrinsics K (3x3), world->camera extrinsics (4x4)."""

    intrinsics: np.ndarray
    extrinsics: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        self.extrinsics = np.asarray(self.extrinsics, dtype=np.float64).reshape(4, 4)
        self.width, self.height = int(self.width), int(self.height)
        K = self.intrinsics
        if abs(K[1, 0]) + abs(K[2, 0]) + abs(K[2, 1]) > 0 or K[2, 2] != 1:
            raise ConfigError("intrinsics must be upper-triangular with K[2,2] == 1")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ConfigError("focal lengths must be positive")
        R = self.extrinsics[:3, :3]
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-5 or abs(np.linalg.det(R) - 1) > 1e-5:
            raise ConfigError("extrinsic rotation block is not orthonormal")
        if not np.allclose(self.extrinsics[3], [0, 0, 0, 1]):
            raise ConfigError("extrinsics last row must be [0, 0, 0, 1]")
        if self.width < 1 or self.height < 1:
            raise ConfigError("image extents must be positive")

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        R, t = self.extrinsics[:3, :3], self.extrinsics[:3, 3]
        return -R.T @ t


@dataclass
class CameraRig:
    cameras: list[Camera] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.cameras)

    def __getitem__(self, i) -> Camera:
        return self.cameras[i]

    def permuted(self, order) -> "CameraRig":
        return CameraRig([self.cameras[i] for i in order])


@dataclass
class PixelRefs:
    """Projected points: ``uv`` [n_cam, ..., 2], ``depth`` and ``valid`` [n_cam, ...]."""

    uv: np.ndarray
    depth: np.ndarray
    valid: np.ndarray


def project_to_pixels(points, rig: CameraRig) -> PixelRefs:
    """Pinhole projection of world points [..., 3] into every camera.

    A projection is valid when its camera-frame depth exceeds ``MIN_DEPTH``
    and it lands in the half-open image rectangle.
    """
    p = np.asarray(points, dtype=np.float64)
    lead = p.shape[:-1]
    flat = p.reshape(-1, 3)
    uvs, depths, valids = [], [], []
    for cam in rig.cameras:
        R, t = cam.extrinsics[:3, :3], cam.extrinsics[:3, 3]
        pc = flat @ R.T + t
        z = pc[:, 2]
        ok = z > MIN_DEPTH
        zs = np.where(ok, z, 1.0)
        K = cam.intrinsics
        u = (K[0, 0] * pc[:, 0] + K[0, 1] * pc[:, 1]) / zs + K[0, 2]
        v = K[1, 1] * pc[:, 1] / zs + K[1, 2]
        ok &= (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
        uvs.append(np.stack([u, v], -1).reshape(*lead, 2))
        depths.append(z.reshape(lead))
        valids.append(ok.reshape(lead))
    if not rig.cameras:
        empty = np.zeros((0, *lead))
        return PixelRefs(np.zeros((0, *lead, 2)), empty, empty.astype(bool))
    return PixelRefs(np.stack(uvs), np.stack(depths), np.stack(valids))


def valid_camera_set(valid) -> set[int]:
    """Cameras ([n_cam, n_ref] validity) where at least one reference is valid."""
    v = np.asarray(valid, dtype=bool)
    return {int(j) for j in np.flatnonzero(v.reshape(v.shape[0], -1).any(axis=1))}


def look_at_extrinsics(center, yaw: float, pitch: float = 0.0) -> np.ndarray:
    """World->camera transform for a camera at ``center`` looking along ``yaw``.

    Camera frame: x right, y down, z forward.  World z is up.
    """
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    forward = np.array([cy * cp, sy * cp, sp])
    right = np.array([sy, -cy, 0.0])
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = -R @ np.asarray(center, dtype=np.float64)
    return T


def make_surround_rig(n_cameras: int = 6, width: int = 64, height: int = 40,
                      hfov_deg: float = 90.0, center=(0.0, 0.0, 0.0),
                      pitch_deg: float = 0.0) -> CameraRig:
    """Evenly yawed ring of identical pinhole cameras, camera 0 facing +x."""
    fx = (width / 2) / np.tan(np.radians(hfov_deg) / 2)
    K = np.array([[fx, 0, width / 2], [0, fx, height / 2], [0, 0, 1.0]])
    cams = [Camera(K.copy(), look_at_extrinsics(center, 2 * np.pi * j / n_cameras,
                                                np.radians(pitch_deg)), width, height)
            for j in range(n_cameras)]
    return CameraRig(cams)


def save_rig(path: str | Path, rig: CameraRig) -> None:
    """Text format: one line per camera, 9 intrinsics, 16 extrinsics, width, height."""
    lines = ["# tpv camera rig: K(9, row-major) T_world_to_cam(16, row-major) width height"]
    for cam in rig.cameras:
        vals = [repr(float(x)) for x in cam.intrinsics.ravel()]
        vals += [repr(float(x)) for x in cam.extrinsics.ravel()]
        vals += [str(cam.width), str(cam.height)]
        lines.append(" ".join(vals))
    Path(path).write_text("\n".join(lines) + "\n")


def load_rig(path: str | Path) -> CameraRig:
    cams = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if len(tok) != 27:
            raise DataError(f"{path}:{lineno}: expected 27 values per camera, got {len(tok)}")
        try:
            vals = [float(x) for x in tok[:25]]
            w, h = int(tok[25]), int(tok[26])
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
        try:
            cams.append(Camera(np.array(vals[:9]), np.array(vals[9:25]), w, h))
        except ConfigError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
    return CameraRig(cams)
