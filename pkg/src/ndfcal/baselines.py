"""Comparison methods: point-source reconstruction and trilinear map interpolation.

The point-source method treats every display pixel as a fixed 3D point:
rays from several viewpoints that see the same display pixel are
triangulated, and the resulting point cloud is projected into a new
viewpoint. Trilinear interpolation blends the maps of the eight lattice
viewpoints around the query eye position and ignores eye rotation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.interpolate import LinearNDInterpolator
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .geometry import (CameraIntrinsics, EyePose, GeometryError, GridSpec, lattice_positions,
                       pixel_centers, project, ray_directions)
from .graycode import CorrespondenceLut
from .maps import DistortionMap
from .ndf import TrainingSet


class BaselineError(ValueError):
    pass


# --- point-source reconstruction -------------------------------------------

@dataclass(frozen=True)
class PointSourceField:
    """Triangulated 3D point per sampled display pixel.

    ``display_points`` is ``(M, 2)``; ``points`` is ``(M, 3)`` with NaN for
    absent entries; ``residual`` is the RMS reprojection error in display
    pixels over the observing viewpoints; ``n_obs`` counts those viewpoints.
    """

    display_points: np.ndarray
    points: np.ndarray
    residual: np.ndarray
    n_obs: np.ndarray

    @property
    def present(self) -> np.ndarray:
        return np.all(np.isfinite(self.points), axis=1)

    def __len__(self):
        return int(self.present.sum())

    @classmethod
    def empty(cls) -> "PointSourceField":
        return cls(np.zeros((0, 2)), np.zeros((0, 3)), np.zeros(0), np.zeros(0, int))


def display_samples(width: int, height: int, stride: float) -> np.ndarray:
    """Display pixel centres on a regular grid with spacing ``stride``."""
    xs = np.arange(0.5, width, stride)
    ys = np.arange(0.5, height, stride)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def inverse_lookup(lut, targets, max_gap: float) -> np.ndarray:
    """Retinal position at which a viewpoint sees each display target.

    Linear interpolation of the table's ``u_D -> u_E`` inverse; targets
    farther than ``max_gap`` display pixels from any table entry are NaN,
    which keeps concave gaps in the table from being bridged.
    """
    out = np.full((len(targets), 2), np.nan)
    if len(lut.u_d) < 3:
        return out
    interp = LinearNDInterpolator(lut.u_d, lut.u_e)
    out = interp(targets)
    dist, _ = cKDTree(lut.u_d).query(targets)
    out[dist > max_gap] = np.nan
    return out


def triangulate(origins, dirs, observed, min_angle=1e-6):
    """Least-squares intersection of rays, one problem per column.

    ``origins`` and ``dirs`` are ``(V, M, 3)``, ``observed`` is ``(V, M)``.
    Returns ``(points (M, 3), counts (M,))``; points with fewer than two
    rays or near-parallel rays are NaN.
    """
    V, M, _ = dirs.shape
    w = observed.astype(float)[:, :, None, None]
    proj = np.eye(3) - dirs[..., :, None] * dirs[..., None, :]
    proj = np.where(w > 0, proj, 0.0)
    A = proj.sum(axis=0)
    b = np.einsum("vmij,vmj->mi", proj, np.where(observed[..., None], origins, 0.0))
    counts = observed.sum(axis=0)
    # spread of directions: largest angle to the mean direction
    mean_dir = np.where(observed[..., None], dirs, 0.0).sum(axis=0)
    mean_dir /= np.maximum(np.linalg.norm(mean_dir, axis=1, keepdims=True), 1e-300)
    cos = np.clip(np.einsum("vmi,mi->vm", dirs, mean_dir), -1.0, 1.0)
    spread = np.where(observed, np.arccos(cos), 0.0).max(axis=0)
    ok = (counts >= 2) & (spread > min_angle)
    points = np.full((M, 3), np.nan)
    if ok.any():
        points[ok] = np.linalg.solve(A[ok], b[ok][..., None])[..., 0]
    return points, counts


def reconstruct(luts, intr: CameraIntrinsics, display_size, stride: float = 8.0,
                max_gap: float = 24.0) -> PointSourceField:
    """Triangulate a point per sampled display pixel from several viewpoints.

    ``luts`` are correspondence tables (``u_e``, ``u_d``, ``pose``).
    Display pixels seen from fewer than two viewpoints, or only along
    parallel rays, are absent.
    """
    targets = display_samples(int(display_size[0]), int(display_size[1]), stride)
    V, M = len(luts), len(targets)
    if V == 0:
        return PointSourceField.empty()
    retinal = np.full((V, M, 2), np.nan)
    origins = np.zeros((V, M, 3))
    dirs = np.zeros((V, M, 3))
    for i, lut in enumerate(luts):
        retinal[i] = inverse_lookup(lut, targets, max_gap)
        seen = np.all(np.isfinite(retinal[i]), axis=1)
        dirs[i, seen] = ray_directions(retinal[i, seen], intr, lut.pose)
        origins[i] = lut.pose.position
    observed = np.all(np.isfinite(retinal), axis=2)
    points, counts = triangulate(origins, dirs, observed)
    residual = np.full(M, np.nan)
    ok = np.all(np.isfinite(points), axis=1)
    if ok.any():
        # project back, read each view's table there, compare display coordinates
        sq = np.zeros(ok.sum())
        n = np.zeros(ok.sum())
        for i, lut in enumerate(luts):
            seen = observed[i, ok]
            uv = project(points[ok][seen], intr, lut.pose)
            u_d = LinearNDInterpolator(lut.u_e, lut.u_d)(uv)
            r = np.sum((u_d - targets[ok][seen]) ** 2, axis=1)
            good = np.isfinite(r)
            idx = np.flatnonzero(seen)[good]
            sq[idx] += r[good]
            n[idx] += 1
        with np.errstate(invalid="ignore"):
            residual[ok] = np.sqrt(sq / n)
    return PointSourceField(targets, points, residual, counts)


def reproject(field: PointSourceField, pose: EyePose, intr: CameraIntrinsics,
              radius: float = 3.0) -> DistortionMap:
    """Project the point cloud into ``pose`` and resample onto the pixel grid.

    Scattered retinal positions carry their display coordinate; the grid
    is filled by piecewise-linear interpolation over their Delaunay
    triangulation, and a pixel is covered only if a scattered point lies
    within ``radius`` retinal pixels of its centre.
    """
    out = DistortionMap.invalid(intr.height, intr.width)
    if len(field) == 0:
        return out
    pts = field.points[field.present]
    vals = field.display_points[field.present]
    uv = project(pts, intr, pose)
    keep = (np.all(np.isfinite(uv), axis=1)
            & (uv[:, 0] > -radius) & (uv[:, 0] < intr.width + radius)
            & (uv[:, 1] > -radius) & (uv[:, 1] < intr.height + radius))
    if keep.sum() < 3:
        return out
    uv, vals = uv[keep], vals[keep]
    pix = pixel_centers(intr)
    dist, _ = cKDTree(uv).query(pix, distance_upper_bound=radius)
    covered = np.isfinite(dist)
    values = np.full((len(pix), 2), np.nan)
    if covered.any():
        values[covered] = LinearNDInterpolator(uv, vals)(pix[covered])
    return DistortionMap.from_flat(values, intr)


def save_point_field(field: PointSourceField, path, extra=None) -> Path:
    """JSON header followed by little-endian f64 blocks: display points, points, residual, counts."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"M": len(field.display_points), "blocks": ["display_points", "points",
                                                         "residual", "n_obs"],
              "extra": extra or {}}
    head = json.dumps(header).encode()
    blob = np.concatenate([field.display_points.ravel(), field.points.ravel(),
                           field.residual.ravel(), field.n_obs.astype(float).ravel()])
    with open(path, "wb") as f:
        f.write(len(head).to_bytes(8, "little"))
        f.write(head)
        f.write(blob.astype("<f8").tobytes())
    return path


def load_point_field(path) -> PointSourceField:
    data = Path(path).read_bytes()
    n = int.from_bytes(data[:8], "little")
    M = json.loads(data[8:8 + n])["M"]
    blob = np.frombuffer(data[8 + n:], dtype="<f8")
    sizes = np.cumsum([0, 2 * M, 3 * M, M, M])
    return PointSourceField(blob[sizes[0]:sizes[1]].reshape(M, 2).copy(),
                            blob[sizes[1]:sizes[2]].reshape(M, 3).copy(),
                            blob[sizes[2]:sizes[3]].copy(),
                            blob[sizes[3]:sizes[4]].astype(int))


# --- trilinear interpolation ------------------------------------------------

def trilinear_weights(t, lo, hi, tol=1e-9) -> np.ndarray:
    """Weights of the 8 cube vertices (x slowest, z fastest) for position ``t``."""
    t, lo, hi = (np.asarray(a, dtype=float) for a in (t, lo, hi))
    if np.any(t < lo - tol) or np.any(t > hi + tol):
        raise GeometryError(f"position {t.tolist()} outside cube {lo.tolist()}..{hi.tolist()}")
    f = np.clip((t - lo) / (hi - lo), 0.0, 1.0)
    w = np.empty(8)
    for k in range(8):
        bits = ((k >> 2) & 1, (k >> 1) & 1, k & 1)
        w[k] = np.prod([f[a] if bits[a] else 1 - f[a] for a in range(3)])
    return w


def trilinear(corner_maps, t, lo, hi) -> DistortionMap:
    """Blend eight maps at the vertices of the box ``[lo, hi]``.

    Maps are ordered with x slowest and z fastest. A pixel is valid only
    if it is valid in all eight maps.
    """
    if len(corner_maps) != 8:
        raise BaselineError("need exactly 8 corner maps")
    shape = corner_maps[0].shape
    if any(m.shape != shape for m in corner_maps):
        raise BaselineError("corner maps differ in resolution")
    w = trilinear_weights(t, lo, hi)
    valid = np.logical_and.reduce([m.valid for m in corner_maps])
    coords = np.zeros(shape + (2,))
    for wk, m in zip(w, corner_maps):
        coords += wk * np.where(valid[..., None], m.coords, 0.0)
    return DistortionMap(coords, valid)


class Lattice:
    """Rectangular lattice of viewpoints with one map per node."""

    def __init__(self, axes, maps):
        self.axes = [np.asarray(a, dtype=float) for a in axes]
        shape = tuple(len(a) for a in self.axes)
        if any(n < 2 for n in shape) or len(maps) != int(np.prod(shape)):
            raise BaselineError(f"lattice {shape} needs {int(np.prod(shape))} maps, "
                                f"got {len(maps)}")
        self.shape = shape
        self.maps = list(maps)

    def node_map(self, i, j, k) -> DistortionMap:
        return self.maps[(i * self.shape[1] + j) * self.shape[2] + k]

    def interpolate(self, t) -> DistortionMap:
        t = np.asarray(t, dtype=float)
        cell = []
        for a, x in zip(self.axes, t):
            if x < a[0] - 1e-9 or x > a[-1] + 1e-9:
                raise GeometryError(f"position {t.tolist()} outside the training lattice")
            cell.append(int(np.clip(np.searchsorted(a, x, side="right") - 1, 0, len(a) - 2)))
        i, j, k = cell
        corners = [self.node_map(i + di, j + dj, k + dk)
                   for di in (0, 1) for dj in (0, 1) for dk in (0, 1)]
        lo = [self.axes[0][i], self.axes[1][j], self.axes[2][k]]
        hi = [self.axes[0][i + 1], self.axes[1][j + 1], self.axes[2][k + 1]]
        return trilinear(corners, t, lo, hi)


def snap_to_lattice(poses, maps, grid: GridSpec | None = None) -> Lattice:
    """Assign each training map to a lattice node.

    With ``grid`` the nodes are its nominal positions and every pose is
    matched to the nearest one; the measured offsets are discarded, as a
    fixed-grid interpolator must. Without ``grid`` the measured positions
    themselves must form the lattice.
    """
    t = np.array([p.t for p in poses])
    if grid is not None:
        nodes = lattice_positions(grid)
        axes = [np.unique(nodes[:, a]) for a in range(3)]
    else:
        nodes = t
        axes = [np.unique(np.round(t[:, a], 9)) for a in range(3)]
    order = [None] * len(nodes)
    nearest = np.argmin(np.linalg.norm(t[:, None, :] - nodes[None, :, :], axis=2), axis=1)
    for i, n in enumerate(nearest):
        if order[n] is not None:
            raise BaselineError("two training poses map to the same lattice node")
        order[n] = maps[i]
    if any(m is None for m in order) or len(nodes) != int(np.prod([len(a) for a in axes])):
        raise BaselineError("training poses do not fill a rectangular lattice")
    # lattice_positions already lists nodes x slowest, z fastest
    if grid is None:
        key = np.lexsort((nodes[:, 2], nodes[:, 1], nodes[:, 0]))
        order = [order[i] for i in key]
    return Lattice(axes, order)


# --- estimator wrappers -------------------------------------------------------

def _group_rows(X):
    """Split ``[u_E, v, t]`` rows by pose; yields ``(pose, row_indices)``."""
    keys, inverse = np.unique(X[:, 2:8], axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    for k, key in enumerate(keys):
        yield EyePose.from_array(key), np.flatnonzero(inverse == k)


class _MapPredictor(RegressorMixin, BaseEstimator):
    """Shared ``predict`` for methods that produce whole maps per pose."""

    def predict(self, X):
        check_is_fitted(self)
        X = check_array(X)
        out = np.full((len(X), 2), np.nan)
        for pose, idx in _group_rows(X):
            out[idx] = self.predict_map(pose).lookup(X[idx, :2])
        return out


class TrilinearInterpolator(_MapPredictor):
    """Piecewise-trilinear blend of training maps over eye position.

    Parameters
    ----------
    intrinsics : CameraIntrinsics
    grid : GridSpec or None
        Nominal lattice the training viewpoints were meant to occupy.
    """

    def __init__(self, intrinsics: CameraIntrinsics | None = None, grid: GridSpec | None = None):
        self.intrinsics = intrinsics
        self.grid = grid

    def fit(self, X, y):
        ts = TrainingSet.from_rows(check_array(X), y, self.intrinsics)
        return self.fit_maps(ts.poses, ts.maps)

    def fit_maps(self, poses, maps):
        self.lattice_ = snap_to_lattice(poses, maps, self.grid)
        return self

    def predict_map(self, pose: EyePose) -> DistortionMap:
        check_is_fitted(self, "lattice_")
        return self.lattice_.interpolate(pose.t)


class PointSourceReprojector(_MapPredictor):
    """Point-source reconstruction followed by reprojection into new viewpoints.

    Parameters
    ----------
    intrinsics : CameraIntrinsics
    display_size : (int, int)
        Display width and height in pixels.
    stride : float
        Spacing of the reconstructed display pixels.
    radius : float
        Coverage radius (retinal pixels) of the resampling step.
    """

    def __init__(self, intrinsics: CameraIntrinsics | None = None, display_size=(1920, 1080),
                 stride=8.0, radius=3.0):
        self.intrinsics = intrinsics
        self.display_size = display_size
        self.stride = stride
        self.radius = radius

    def fit(self, X, y):
        X = check_array(X)
        y = np.asarray(y, dtype=float)
        luts = [CorrespondenceLut(X[idx, :2], y[idx], pose) for pose, idx in _group_rows(X)]
        return self.fit_luts(luts)

    def fit_luts(self, luts):
        self.field_ = reconstruct(luts, self.intrinsics, self.display_size, self.stride)
        return self

    def predict_map(self, pose: EyePose) -> DistortionMap:
        check_is_fitted(self, "field_")
        return reproject(self.field_, pose, self.intrinsics, self.radius)
