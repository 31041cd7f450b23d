"""Closed-form synthetic near-eye display used as ground truth.

The virtual image lies on a spherical patch in front of the eyebox. A ray
is intersected with the sphere, the hit point is converted to normalised
surface angles ``(a, b)`` in ``[-1, 1]``, those are shifted by a term that
depends on the viewing direction, and a cubic warp turns them into display
pixels. The direction term is what breaks the point-source model: the same
display pixel is seen at different 3D locations from different eye
positions.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .geometry import CameraIntrinsics, EyePose, pixel_centers, ray_directions
from .maps import DistortionMap


class OpticsError(ValueError):
    pass


@dataclass(frozen=True)
class OpticsModel:
    """Sphere-patch virtual display with direction coupling.

    ``half_angles`` are the patch half-extents (degrees) about the sphere
    centre, horizontal then vertical. ``warp`` holds the cubic coefficients
    ``(c_aaa, c_abb, c_bbb, c_baa)``. ``kappa`` scales the direction
    coupling; a pair gives separate horizontal and vertical coefficients,
    and unequal values make the virtual image astigmatic.
    """

    center: tuple = (0.0, 0.0, 120.0)
    radius: float = 150.0
    half_angles: tuple = (79.5, 52.6)
    display_size: tuple = (1920, 1080)
    kappa: tuple = (0.2, -0.2)
    warp: tuple = (-0.12, 0.06, -0.08, 0.05)

    def __post_init__(self):
        if self.radius <= 0:
            raise OpticsError("radius must be positive")
        for name in ("center", "half_angles", "display_size", "warp"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if np.isscalar(self.kappa):
            object.__setattr__(self, "kappa", float(self.kappa))
        else:
            object.__setattr__(self, "kappa", tuple(float(k) for k in self.kappa))

    @property
    def display_width(self) -> int:
        return int(self.display_size[0])

    @property
    def display_height(self) -> int:
        return int(self.display_size[1])

    def replace(self, **changes) -> "OpticsModel":
        d = asdict(self)
        d.update(changes)
        return OpticsModel(**d)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d) -> "OpticsModel":
        return cls(**d)


def intersect_sphere(origins, dirs, center, radius):
    """Distance along each ray to the far sphere intersection (NaN on miss)."""
    oc = np.asarray(origins, float) - np.asarray(center, float)
    b = np.einsum("ij,ij->i", dirs, oc)
    c = np.einsum("ij,ij->i", oc, oc) - radius**2
    disc = b * b - c
    with np.errstate(invalid="ignore"):
        s = -b + np.sqrt(disc)
    s[(disc < 0) | ~(s > 0)] = np.nan
    return s


def surface_coords(origins, dirs, optics: OpticsModel):
    """Normalised surface angles ``(a, b)`` and hit depth for each ray."""
    s = intersect_sphere(origins, dirs, optics.center, optics.radius)
    hit = origins + s[:, None] * dirs
    q = (hit - np.asarray(optics.center)) / optics.radius
    th, ph = np.deg2rad(optics.half_angles)
    a = np.arctan2(q[:, 0], q[:, 2]) / th
    b = np.arctan2(q[:, 1], q[:, 2]) / ph
    return a, b, s


def display_from_rays(origins, dirs, optics: OpticsModel) -> np.ndarray:
    """Display coordinates ``(n, 2)`` seen along each ray; NaN where invalid."""
    origins = np.broadcast_to(np.asarray(origins, float), np.shape(dirs))
    a, b, s = surface_coords(origins, dirs, optics)
    kx, ky = np.broadcast_to(np.asarray(optics.kappa, dtype=float), (2,))
    depth = s / optics.radius
    a = a + kx * depth * dirs[:, 0]
    b = b + ky * depth * dirs[:, 1]
    caaa, cabb, cbbb, cbaa = optics.warp
    u = a + caaa * a**3 + cabb * a * b**2
    v = b + cbbb * b**3 + cbaa * b * a**2
    W, H = optics.display_width, optics.display_height
    out = np.stack([0.5 * W * (1.0 + u), 0.5 * H * (1.0 + v)], axis=1)
    with np.errstate(invalid="ignore"):
        ok = ((np.abs(a) <= 1) & (np.abs(b) <= 1)
              & (out[:, 0] >= 0) & (out[:, 0] <= W)
              & (out[:, 1] >= 0) & (out[:, 1] <= H))
    out[~ok] = np.nan
    return out


def oracle_map(u_e, pose: EyePose, optics: OpticsModel, intr: CameraIntrinsics) -> np.ndarray:
    """Display coordinates for retinal pixel(s) ``u_e`` at ``pose``.

    Accepts a single ``(2,)`` pixel or an ``(n, 2)`` array; invalid pixels
    come back as NaN rather than raising.
    """
    u = np.asarray(u_e, dtype=float)
    single = u.ndim == 1
    dirs = ray_directions(np.atleast_2d(u), intr, pose)
    out = display_from_rays(pose.position, dirs, optics)
    return out[0] if single else out


def dense_gt_map(pose: EyePose, optics: OpticsModel, intr: CameraIntrinsics) -> DistortionMap:
    return DistortionMap.from_flat(oracle_map(pixel_centers(intr), pose, optics, intr), intr)


def sample_image(image, coords) -> np.ndarray:
    """Bilinear sample of ``image[H, W]`` at continuous ``(n, 2)`` coordinates."""
    H, W = image.shape
    x = np.clip(coords[:, 0] - 0.5, 0, W - 1)
    y = np.clip(coords[:, 1] - 0.5, 0, H - 1)
    x0 = np.minimum(np.floor(x).astype(int), W - 2)
    y0 = np.minimum(np.floor(y).astype(int), H - 2)
    fx, fy = x - x0, y - y0
    im = image
    return ((1 - fy) * ((1 - fx) * im[y0, x0] + fx * im[y0, x0 + 1])
            + fy * ((1 - fx) * im[y0 + 1, x0] + fx * im[y0 + 1, x0 + 1]))


def render_pattern(pattern, pose: EyePose, optics: OpticsModel, intr: CameraIntrinsics,
                   noise: float = 0.0, rng=None, dmap: DistortionMap | None = None) -> np.ndarray:
    """Simulated viewpoint-camera capture of a display image.

    ``pattern`` is ``(H_D, W_D)`` with values in ``[0, 1]``. Pixels that do
    not see the display are black. ``dmap`` may be passed to reuse a map
    already computed for this pose.
    """
    pattern = np.asarray(pattern)
    if pattern.shape != (optics.display_height, optics.display_width):
        raise OpticsError(f"pattern shape {pattern.shape} does not match display "
                          f"{optics.display_height}x{optics.display_width}")
    if dmap is None:
        dmap = dense_gt_map(pose, optics, intr)
    img = np.zeros(intr.height * intr.width)
    valid = dmap.valid.ravel()
    img[valid] = sample_image(pattern, dmap.flat()[valid])
    if noise > 0:
        img += np.random.default_rng(rng).normal(0.0, noise, img.shape)
    return img.reshape(intr.height, intr.width)
