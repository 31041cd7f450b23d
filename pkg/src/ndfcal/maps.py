"""Dense distortion maps and the on-disk MapFile format.

A MapFile is three sibling files sharing a stem:

- ``<stem>.json``  header ``{width, height, channels, dtype, order}``
- ``<stem>.bin``   raw little-endian ``f32`` values, row-major, channels last
- ``<stem>.mask``  validity bitmask, ``numpy.packbits`` row-major, little bit order
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics


class MapError(ValueError):
    pass


@dataclass(frozen=True)
class DistortionMap:
    """Display coordinate ``u_D`` for every retinal pixel, plus a validity mask.

    ``coords`` has shape ``(H, W, 2)``; invalid entries hold NaN.
    """

    coords: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=float)
        valid = np.asarray(self.valid, dtype=bool)
        if coords.ndim != 3 or coords.shape[2] != 2 or valid.shape != coords.shape[:2]:
            raise MapError(f"bad map shapes {coords.shape} / {valid.shape}")
        coords = coords.copy()
        valid = valid & np.all(np.isfinite(coords), axis=2)
        coords[~valid] = np.nan
        coords.setflags(write=False)
        valid.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "valid", valid)

    @property
    def shape(self):
        return self.valid.shape

    @property
    def height(self):
        return self.valid.shape[0]

    @property
    def width(self):
        return self.valid.shape[1]

    @classmethod
    def from_flat(cls, values, intr: CameraIntrinsics) -> "DistortionMap":
        """Build from ``(H*W, 2)`` row-major values with NaN for invalid pixels."""
        values = np.asarray(values, dtype=float).reshape(intr.height, intr.width, 2)
        return cls(values, np.all(np.isfinite(values), axis=2))

    @classmethod
    def invalid(cls, height, width) -> "DistortionMap":
        return cls(np.full((height, width, 2), np.nan), np.zeros((height, width), bool))

    def flat(self) -> np.ndarray:
        return self.coords.reshape(-1, 2)

    def lookup(self, pixels) -> np.ndarray:
        """Bilinear lookup at continuous pixel coordinates ``(n, 2)``.

        Any invalid neighbour makes the result NaN.
        """
        uv = np.atleast_2d(np.asarray(pixels, dtype=float))
        x = np.clip(uv[:, 0] - 0.5, 0, self.width - 1)
        y = np.clip(uv[:, 1] - 0.5, 0, self.height - 1)
        x0 = np.minimum(np.floor(x).astype(int), self.width - 2)
        y0 = np.minimum(np.floor(y).astype(int), self.height - 2)
        fx = (x - x0)[:, None]
        fy = (y - y0)[:, None]
        c = self.coords
        out = ((1 - fy) * ((1 - fx) * c[y0, x0] + fx * c[y0, x0 + 1])
               + fy * ((1 - fx) * c[y0 + 1, x0] + fx * c[y0 + 1, x0 + 1]))
        # exact pixel-centre hits bypass neighbours that might be invalid
        exact = (fx[:, 0] == 0) & (fy[:, 0] == 0)
        out[exact] = c[y0[exact], x0[exact]]
        return out


def write_map(dmap: DistortionMap, stem) -> Path:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    header = {"width": dmap.width, "height": dmap.height, "channels": 2,
              "dtype": "f32", "order": "row-major"}
    stem.with_suffix(".json").write_text(json.dumps(header, indent=1))
    stem.with_suffix(".bin").write_bytes(dmap.coords.astype("<f4").tobytes())
    stem.with_suffix(".mask").write_bytes(
        np.packbits(dmap.valid.ravel(), bitorder="little").tobytes())
    return stem


def read_map(stem) -> DistortionMap:
    stem = Path(stem)
    header = json.loads(stem.with_suffix(".json").read_text())
    if header.get("dtype") != "f32" or header.get("order") != "row-major":
        raise MapError(f"unsupported MapFile header in {stem}: {header}")
    h, w, ch = header["height"], header["width"], header["channels"]
    coords = np.frombuffer(stem.with_suffix(".bin").read_bytes(), dtype="<f4")
    coords = coords.astype(float).reshape(h, w, ch)
    bits = np.frombuffer(stem.with_suffix(".mask").read_bytes(), dtype=np.uint8)
    valid = np.unpackbits(bits, bitorder="little")[: h * w].astype(bool).reshape(h, w)
    return DistortionMap(coords, valid)


def map_files(stem) -> list:
    stem = Path(stem)
    return [stem.with_suffix(s) for s in (".json", ".bin", ".mask")]
