"""Eye poses, the pinhole viewpoint camera, and ray generation/sampling.

World coordinates are millimetres. Camera frame: +z forward, +x right,
+y down, so pixel rows grow with +y. A pose maps camera coordinates to
world coordinates as ``X_world = R(v) @ X_cam + t``.

Pixel coordinates are continuous: pixel ``(row i, col j)`` covers
``[j, j+1) x [i, i+1)`` and its centre is ``(j + 0.5, i + 0.5)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from typing import Sequence

import numpy as np
from scipy.spatial.transform import Rotation

DEFAULT_NEAR = 20.0
DEFAULT_FAR = 300.0


class GeometryError(ValueError):
    """Raised for out-of-domain geometric inputs."""


def _vec3(x, name):
    arr = np.asarray(x, dtype=float).reshape(-1)
    if arr.shape != (3,) or not np.all(np.isfinite(arr)):
        raise GeometryError(f"{name} must be a finite 3-vector, got {x!r}")
    return tuple(float(a) for a in arr)


@dataclass(frozen=True)
class EyePose:
    """6D eye pose: axis-angle rotation ``v`` (rad) and position ``t`` (mm)."""

    v: tuple = (0.0, 0.0, 0.0)
    t: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "v", _vec3(self.v, "v"))
        object.__setattr__(self, "t", _vec3(self.t, "t"))
        if np.linalg.norm(self.v) >= np.pi:
            raise GeometryError("rotation vector norm must be < pi")

    @property
    def rotation(self) -> np.ndarray:
        return Rotation.from_rotvec(self.v).as_matrix()

    @property
    def position(self) -> np.ndarray:
        return np.array(self.t)

    def as_array(self) -> np.ndarray:
        """Return ``[v, t]`` as a length-6 array."""
        return np.array(self.v + self.t)

    @classmethod
    def from_array(cls, p) -> "EyePose":
        p = np.asarray(p, dtype=float)
        return cls(v=p[:3], t=p[3:6])

    def to_dict(self) -> dict:
        return {"v": list(self.v), "t": list(self.t)}

    @classmethod
    def from_dict(cls, d) -> "EyePose":
        return cls(v=d["v"], t=d["t"])


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("principal point must lie inside the image")

    @classmethod
    def from_fov(cls, width: int, height: int, hfov_deg: float = 90.0) -> "CameraIntrinsics":
        """Square-pixel camera with the principal point at the image centre."""
        f = (width / 2.0) / np.tan(np.deg2rad(hfov_deg) / 2.0)
        return cls(f, f, width / 2.0, height / 2.0, int(width), int(height))

    @property
    def shape(self) -> tuple:
        return (self.height, self.width)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("fx", "fy", "cx", "cy", "width", "height")}

    @classmethod
    def from_dict(cls, d) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


DESK_CAMERA = CameraIntrinsics.from_fov(192, 144, 90.0)


@dataclass(frozen=True)
class Ray:
    origin: tuple
    direction: tuple

    def __post_init__(self):
        o = _vec3(self.origin, "origin")
        d = np.array(_vec3(self.direction, "direction"))
        n = np.linalg.norm(d)
        if n == 0:
            raise GeometryError("ray direction must be non-zero")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", tuple(d / n))

    def at(self, s):
        """Points ``origin + s * direction`` for scalar or array ``s``."""
        s = np.asarray(s, dtype=float)
        return np.array(self.origin) + s[..., None] * np.array(self.direction)


@dataclass(frozen=True)
class RaySamples:
    depths: np.ndarray
    deltas: np.ndarray


def pixel_centers(intr: CameraIntrinsics) -> np.ndarray:
    """All pixel centres in row-major order, shape ``(H*W, 2)`` as (x, y)."""
    jj, ii = np.meshgrid(np.arange(intr.width), np.arange(intr.height))
    return np.stack([jj.ravel() + 0.5, ii.ravel() + 0.5], axis=1)


def ray_directions(pixels, intr: CameraIntrinsics, pose: EyePose) -> np.ndarray:
    """Unit world-frame directions for an ``(n, 2)`` array of pixel coordinates."""
    uv = np.atleast_2d(np.asarray(pixels, dtype=float))
    cam = np.stack([(uv[:, 0] - intr.cx) / intr.fx,
                    (uv[:, 1] - intr.cy) / intr.fy,
                    np.ones(len(uv))], axis=1)
    d = cam @ pose.rotation.T
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def make_ray(u_e, intr: CameraIntrinsics, pose: EyePose) -> Ray:
    u = np.asarray(u_e, dtype=float)
    if not (0 <= u[0] <= intr.width and 0 <= u[1] <= intr.height):
        raise GeometryError(f"pixel {tuple(u)} outside {intr.width}x{intr.height} image")
    return Ray(pose.t, ray_directions(u[None], intr, pose)[0])


def project(points, intr: CameraIntrinsics, pose: EyePose) -> np.ndarray:
    """Project world points ``(n, 3)`` to pixel coordinates ``(n, 2)``.

    Points behind the camera come back as NaN.
    """
    X = np.atleast_2d(np.asarray(points, dtype=float))
    cam = (X - pose.position) @ pose.rotation
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * cam[:, 0] / z + intr.cx
        v = intr.fy * cam[:, 1] / z + intr.cy
    out = np.stack([u, v], axis=1)
    out[z <= 0] = np.nan
    return out


def sample_depths(n_rays: int, near: float = DEFAULT_NEAR, far: float = DEFAULT_FAR,
                  n_samples: int = 64, mode: str = "deterministic", rng=None):
    """Depths and deltas for ``n_rays`` rays, each of shape ``(n_rays, P)``.

    ``deterministic`` uses bin midpoints; ``stratified`` draws one uniform
    sample per bin. The last delta is the mean bin width.
    """
    if not (0 <= near < far):
        raise GeometryError(f"need 0 <= near < far, got near={near}, far={far}")
    if n_samples < 2:
        raise GeometryError("need at least 2 samples per ray")
    width = (far - near) / n_samples
    edges = near + width * np.arange(n_samples)
    if mode == "deterministic":
        depths = np.broadcast_to(edges + 0.5 * width, (n_rays, n_samples)).copy()
    elif mode == "stratified":
        rng = np.random.default_rng(rng)
        depths = edges + width * rng.random((n_rays, n_samples))
    else:
        raise GeometryError(f"unknown sampling mode {mode!r}")
    deltas = np.empty_like(depths)
    deltas[:, :-1] = np.diff(depths, axis=1)
    deltas[:, -1] = width
    return depths, deltas


def sample_ray(ray: Ray, near: float = DEFAULT_NEAR, far: float = DEFAULT_FAR,
               n_samples: int = 64, mode: str = "deterministic", seed=None) -> RaySamples:
    depths, deltas = sample_depths(1, near, far, n_samples, mode, seed)
    return RaySamples(depths[0], deltas[0])


@dataclass(frozen=True)
class GridSpec:
    """Viewpoint lattice inside a cubic eyebox.

    ``translation_jitter`` (mm) and ``rotation_jitter`` (rad) perturb each
    lattice pose with seeded Gaussian noise, emulating measured rather than
    commanded stage positions.
    """

    cube_edge: float = 12.0
    counts: tuple = (5, 5, 5)
    center: tuple = (0.0, 0.0, 0.0)
    rotation_jitter: float = 0.0
    translation_jitter: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.cube_edge <= 0:
            raise GeometryError("cube edge must be positive")
        counts = tuple(int(c) for c in np.broadcast_to(self.counts, (3,)))
        if min(counts) < 2:
            raise GeometryError("need at least 2 lattice points per axis")
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "center", _vec3(self.center, "center"))


def lattice_positions(spec: GridSpec) -> np.ndarray:
    c = np.array(spec.center)
    axes = [np.linspace(-spec.cube_edge / 2, spec.cube_edge / 2, n) + c[k]
            for k, n in enumerate(spec.counts)]
    # x varies slowest, z fastest
    return np.array(list(product(*axes)))


def pose_grid(spec: GridSpec) -> list:
    positions = lattice_positions(spec)
    rng = np.random.default_rng(spec.seed)
    poses = []
    for p in positions:
        v = np.zeros(3)
        if spec.rotation_jitter > 0:
            v = rng.normal(0.0, spec.rotation_jitter, 3)
        if spec.translation_jitter > 0:
            p = p + rng.normal(0.0, spec.translation_jitter, 3)
        poses.append(EyePose(v=v, t=p))
    return poses


def test_diagonal_poses(cube_edge: float = 12.0, center=(0.0, 0.0, 0.0)) -> list:
    """48 test poses: 12 per body diagonal of the eyebox cube.

    Each diagonal crosses four lattice sub-cubes; the sub-diagonal of each is
    cut into six equal parts and the 1st, 3rd and 5th cut points are kept, so
    no test pose lands on a lattice vertex.
    """
    if cube_edge <= 0:
        raise GeometryError("cube edge must be positive")
    c = np.array(_vec3(center, "center"))
    h = cube_edge / 2.0
    fractions = [(k + f) / 4.0 for k in range(4) for f in (1 / 6, 3 / 6, 5 / 6)]
    poses = []
    for sy, sz in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
        start = c + h * np.array([-1.0, -sy, -sz])
        end = c + h * np.array([1.0, sy, sz])
        for f in fractions:
            poses.append(EyePose(t=start + f * (end - start)))
    return poses


test_diagonal_poses.__test__ = False  # keep pytest from collecting it


def poses_to_array(poses: Sequence[EyePose]) -> np.ndarray:
    return np.array([p.as_array() for p in poses]).reshape(-1, 6)


def rays_for_rows(X, intr: CameraIntrinsics):
    """Rays for rows ``[u_x, u_y, v(3), t(3)]`` of an ``(n, 8)`` array."""
    X = np.asarray(X, dtype=float)
    origins = X[:, 5:8].copy()
    dirs = np.empty((len(X), 3))
    pose_keys, inverse = np.unique(X[:, 2:8], axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    for k, key in enumerate(pose_keys):
        sel = inverse == k
        dirs[sel] = ray_directions(X[sel, :2], intr, EyePose.from_array(key))
    return origins, dirs
