"""Gray-code structured light: pattern generation and per-pixel decoding.

Each display axis gets ``ceil(log2(extent))`` reflected-binary bit planes,
most significant first, and every plane is followed by its complement.
Two reference frames (all white, all black) lead the stack. Decoding
compares each plane against its complement, so no global threshold on
absolute brightness is needed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, EyePose, pixel_centers
from .optics import OpticsModel, dense_gt_map, render_pattern

DEFAULT_THRESHOLD = 5.0 / 255.0
# white-minus-black contrast below which a pixel is taken not to see the display
DEFAULT_MIN_CONTRAST = 0.25


class DecodeError(ValueError):
    pass


def gray(n):
    return np.asarray(n) ^ (np.asarray(n) >> 1)


def gray_to_binary(g):
    g = np.asarray(g).copy()
    shift = g >> 1
    while np.any(shift):
        g ^= shift
        shift >>= 1
    return g


def n_bits(extent: int) -> int:
    return max(1, math.ceil(math.log2(extent)))


@dataclass(frozen=True)
class PatternStack:
    """Bit planes for a ``width x height`` display.

    ``patterns`` is boolean ``(n, height, width)``. ``labels`` names every
    frame: ``"white"``, ``"black"``, then ``("x"|"y", bit, "pos"|"neg")``
    tuples with ``bit`` counted from the most significant.
    """

    width: int
    height: int
    bits_x: int
    bits_y: int
    patterns: np.ndarray
    labels: tuple

    def __len__(self):
        return len(self.patterns)

    def frame(self, i) -> np.ndarray:
        """Frame ``i`` as a float image in ``[0, 1]``."""
        return self.patterns[i].astype(float)

    def index(self, axis, bit, sign) -> int:
        return self.labels.index((axis, bit, sign))


def gen_patterns(width: int, height: int) -> PatternStack:
    if width < 2 or height < 2:
        raise DecodeError("display must be at least 2x2")
    bx, by = n_bits(width), n_bits(height)
    gx = gray(np.arange(width))
    gy = gray(np.arange(height))
    frames = [np.ones((height, width), bool), np.zeros((height, width), bool)]
    labels = ["white", "black"]
    for axis, code, bits in (("x", gx, bx), ("y", gy, by)):
        for k in range(bits):
            plane = ((code >> (bits - 1 - k)) & 1).astype(bool)
            img = (np.broadcast_to(plane[None, :], (height, width)) if axis == "x"
                   else np.broadcast_to(plane[:, None], (height, width)))
            frames += [img, ~img]
            labels += [(axis, k, "pos"), (axis, k, "neg")]
    return PatternStack(width, height, bx, by, np.stack(frames), tuple(labels))


@dataclass(frozen=True)
class CorrespondenceLut:
    """Retinal pixel ``u_e`` to display pixel ``u_d`` pairs seen from one pose."""

    u_e: np.ndarray
    u_d: np.ndarray
    pose: EyePose

    def __post_init__(self):
        u_e = np.asarray(self.u_e, dtype=float).reshape(-1, 2)
        u_d = np.asarray(self.u_d, dtype=float).reshape(-1, 2)
        if len(u_e) != len(u_d):
            raise DecodeError("u_e and u_d lengths differ")
        object.__setattr__(self, "u_e", u_e)
        object.__setattr__(self, "u_d", u_d)

    def __len__(self):
        return len(self.u_e)


def _decode_axis(captures, stack, axis, bits, threshold):
    code = np.zeros(captures.shape[1:], dtype=np.int64)
    ok = np.ones(captures.shape[1:], dtype=bool)
    for k in range(bits):
        diff = (captures[stack.index(axis, k, "pos")]
                - captures[stack.index(axis, k, "neg")])
        ok &= np.abs(diff) >= threshold
        code = (code << 1) | (diff > 0)
    return gray_to_binary(code), ok


def decode(captures, stack: PatternStack, pose: EyePose,
           threshold: float = DEFAULT_THRESHOLD,
           min_contrast: float = DEFAULT_MIN_CONTRAST) -> CorrespondenceLut:
    """Turn a captured stack ``(n, H_E, W_E)`` into a correspondence table.

    A retinal pixel is kept only if the white frame exceeds the black one
    by ``min_contrast``, every bit differs from its complement by at least
    ``threshold``, and the decoded index lies on the display. Decoded
    indices map to display pixel centres.
    """
    captures = np.asarray(captures, dtype=float)
    if captures.ndim != 3 or len(captures) != len(stack):
        raise DecodeError(f"expected {len(stack)} captures, got shape {captures.shape}")
    col, ok_x = _decode_axis(captures, stack, "x", stack.bits_x, threshold)
    row, ok_y = _decode_axis(captures, stack, "y", stack.bits_y, threshold)
    lit = captures[stack.labels.index("white")] - captures[stack.labels.index("black")]
    ok = (lit >= min_contrast) & ok_x & ok_y & (col < stack.width) & (row < stack.height)
    H, W = captures.shape[1:]
    u_e = pixel_centers(CameraIntrinsics(1.0, 1.0, 0.0, 0.0, W, H))[ok.ravel()]
    u_d = np.stack([col[ok] + 0.5, row[ok] + 0.5], axis=1)
    return CorrespondenceLut(u_e, u_d, pose)


def capture_stack(stack: PatternStack, pose: EyePose, optics: OpticsModel,
                  intr: CameraIntrinsics, noise: float = 0.0, seed=None) -> np.ndarray:
    """Simulated captures of every frame of ``stack`` from ``pose``."""
    dmap = dense_gt_map(pose, optics, intr)
    rng = np.random.default_rng(seed)
    return np.stack([render_pattern(stack.frame(i), pose, optics, intr, noise, rng, dmap)
                     for i in range(len(stack))])


def acquire_lut(pose: EyePose, optics: OpticsModel, intr: CameraIntrinsics,
                noise: float = 0.0, seed=None, threshold: float = DEFAULT_THRESHOLD,
                min_contrast: float = DEFAULT_MIN_CONTRAST,
                stack: PatternStack | None = None) -> CorrespondenceLut:
    """Render, capture and decode the full pattern stack at one pose."""
    stack = stack or gen_patterns(optics.display_width, optics.display_height)
    captures = capture_stack(stack, pose, optics, intr, noise, seed)
    return decode(captures, stack, pose, threshold, min_contrast)


def write_lut(lut: CorrespondenceLut, stem) -> Path:
    """``<stem>.csv`` with header ``uex,uey,udx,udy`` plus ``<stem>.json`` holding the pose."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(stem.with_suffix(".csv"), np.hstack([lut.u_e, lut.u_d]), delimiter=",",
               header="uex,uey,udx,udy", comments="", fmt="%.17g")
    stem.with_suffix(".json").write_text(json.dumps({"pose": lut.pose.to_dict()}, indent=1))
    return stem


def read_lut(stem) -> CorrespondenceLut:
    stem = Path(stem)
    header = stem.with_suffix(".csv").read_text().splitlines()[0].strip()
    if header != "uex,uey,udx,udy":
        raise DecodeError(f"unexpected LUT header {header!r} in {stem}")
    data = np.loadtxt(stem.with_suffix(".csv"), delimiter=",", skiprows=1, ndmin=2)
    data = data.reshape(-1, 4)
    pose = EyePose.from_dict(json.loads(stem.with_suffix(".json").read_text())["pose"])
    return CorrespondenceLut(data[:, :2], data[:, 2:], pose)
