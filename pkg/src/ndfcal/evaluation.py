"""Error metrics, per-pixel error images and report files.

All errors are Euclidean distances in display pixels, taken over the
pixels valid in both the estimate and the ground truth. Angular errors use
one nominal pitch (arcmin per display pixel) for the whole display.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .maps import DistortionMap

CSV_FIELDS = ["method", "N", "pose_idx", "median_px", "median_arcmin", "mean_px", "p95_px"]


class EmptyReportError(ValueError):
    """No pixel is valid in both maps."""


def angular_pitch(hfov_deg: float, display_width: int) -> float:
    """Arcminutes per display pixel for a display spanning ``hfov_deg``."""
    if not hfov_deg > 0:
        raise ValueError(f"field of view must be positive, got {hfov_deg}")
    if display_width < 1:
        raise ValueError("display width must be positive")
    return hfov_deg * 60.0 / display_width


@dataclass(frozen=True)
class PixelErrors:
    """Per-pixel error image (NaN where not compared) and its summary."""

    errors: np.ndarray
    median: float
    mean: float
    p95: float

    @property
    def mask(self) -> np.ndarray:
        return np.isfinite(self.errors)


def reprojection_error(estimate: DistortionMap, truth: DistortionMap) -> PixelErrors:
    if estimate.shape != truth.shape:
        raise ValueError(f"resolution mismatch: {estimate.shape} vs {truth.shape}")
    both = estimate.valid & truth.valid
    if not both.any():
        raise EmptyReportError("estimate and ground truth share no valid pixel")
    err = np.full(truth.shape, np.nan)
    err[both] = np.linalg.norm(estimate.coords[both] - truth.coords[both], axis=1)
    vals = err[both]
    return PixelErrors(err, float(np.median(vals)), float(np.mean(vals)),
                       float(np.percentile(vals, 95)))


@dataclass
class PoseResult:
    pose_idx: int
    t: list
    median_px: float
    mean_px: float
    p95_px: float
    median_arcmin: float
    n_pixels: int


@dataclass
class ErrorReport:
    """Errors of one method, trained on ``n_train`` viewpoints, over the test poses."""

    method: str
    n_train: int
    pitch: float
    poses: list = field(default_factory=list)
    error_images: list = field(default_factory=list, repr=False)

    def add(self, pose_idx, t, errors: PixelErrors):
        self.poses.append(PoseResult(int(pose_idx), [float(x) for x in t], errors.median,
                                     errors.mean, errors.p95, errors.median * self.pitch,
                                     int(errors.mask.sum())))
        self.error_images.append(errors.errors)

    @property
    def medians(self) -> np.ndarray:
        return np.array([p.median_px for p in self.poses])

    @property
    def median_px(self) -> float:
        """Median over test poses of the per-pose median error."""
        return float(np.median(self.medians))

    @property
    def median_arcmin(self) -> float:
        return self.median_px * self.pitch

    def mean_error_image(self) -> np.ndarray:
        return fov_error_map(self.error_images)

    def to_dict(self) -> dict:
        return {"method": self.method, "N": self.n_train, "pitch_arcmin_per_px": self.pitch,
                "median_px": self.median_px, "median_arcmin": self.median_arcmin,
                "poses": [asdict(p) for p in self.poses]}

    @classmethod
    def from_dict(cls, d) -> "ErrorReport":
        rep = cls(d["method"], d["N"], d["pitch_arcmin_per_px"])
        rep.poses = [PoseResult(**p) for p in d["poses"]]
        return rep

    def csv_rows(self) -> list:
        return [{"method": self.method, "N": self.n_train, "pose_idx": p.pose_idx,
                 "median_px": p.median_px, "median_arcmin": p.median_arcmin,
                 "mean_px": p.mean_px, "p95_px": p.p95_px} for p in self.poses]


def evaluate(method: str, n_train: int, estimates, truths, poses, pitch: float) -> ErrorReport:
    """Compare estimated maps with ground truth pose by pose.

    Poses where the two maps share no valid pixel are skipped.
    """
    rep = ErrorReport(method, n_train, pitch)
    for i, (est, gt, pose) in enumerate(zip(estimates, truths, poses)):
        try:
            rep.add(i, pose.t, reprojection_error(est, gt))
        except EmptyReportError:
            continue
    if not rep.poses:
        raise EmptyReportError(f"{method}: no test pose could be compared")
    return rep


def fov_error_map(error_images) -> np.ndarray:
    """Pixelwise mean error over all images where the pixel was compared."""
    stack = np.stack(list(error_images))
    if len(stack) == 0:
        raise ValueError("need at least one error image")
    counts = np.isfinite(stack).sum(axis=0)
    total = np.nansum(stack, axis=0)
    out = np.full(stack.shape[1:], np.nan)
    np.divide(total, counts, out=out, where=counts > 0)
    return out


def compare_maps(mean_a: np.ndarray, mean_b: np.ndarray):
    """Signed difference ``a - b`` and the fraction of pixels where ``a`` is better.

    Only pixels defined in both images count; exact ties count half.
    """
    diff = mean_a - mean_b
    ok = np.isfinite(diff)
    if not ok.any():
        return diff, float("nan")
    wins = np.sum(diff[ok] < 0) + 0.5 * np.sum(diff[ok] == 0)
    return diff, float(wins / ok.sum())


def central_mask(shape, fraction=0.25) -> np.ndarray:
    """Centred rectangle covering ``fraction`` of the image area."""
    h, w = shape
    s = np.sqrt(fraction)
    ch, cw = int(round(h * s)), int(round(w * s))
    m = np.zeros(shape, bool)
    r0, c0 = (h - ch) // 2, (w - cw) // 2
    m[r0:r0 + ch, c0:c0 + cw] = True
    return m


def viewpoint_error_scatter(report: ErrorReport, other: ErrorReport | None = None,
                            center=(0.0, 0.0, 0.0)) -> list:
    """One row per test pose: position, distance from ``center``, median error.

    With ``other`` a ``difference`` column holds ``report - other``.
    """
    other_by_idx = {p.pose_idx: p for p in other.poses} if other else {}
    rows = []
    for p in report.poses:
        row = {"pose_idx": p.pose_idx, "x": p.t[0], "y": p.t[1], "z": p.t[2],
               "distance": float(np.linalg.norm(np.subtract(p.t, center))),
               "median_px": p.median_px}
        if other is not None:
            q = other_by_idx.get(p.pose_idx)
            row["difference"] = p.median_px - q.median_px if q else float("nan")
        rows.append(row)
    return rows


def distance_correlation(rows, column="median_px") -> float:
    """Pearson correlation between distance from the eyebox centre and ``column``."""
    d = np.array([r["distance"] for r in rows])
    v = np.array([r[column] for r in rows])
    if len(d) < 2 or np.std(d) == 0 or np.std(v) == 0:
        return float("nan")
    return float(np.corrcoef(d, v)[0, 1])


# --- files --------------------------------------------------------------------

def pgm_name(stem: str, scale: float) -> str:
    return f"{stem}_scale{scale:g}px.pgm"


def render_pgm(errors, scale: float, path) -> Path:
    """Write an 8-bit binary PGM with ``value = clamp(err / scale * 255)``.

    Pixels without an error value are written as 0.
    """
    if not scale > 0:
        raise ValueError("scale must be positive")
    err = np.asarray(errors, dtype=float)
    img = np.clip(np.nan_to_num(err, nan=0.0) / scale * 255.0, 0, 255)
    img = np.round(img).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(img.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P5" or int(tokens[3]) > 255:
        raise ValueError(f"{path} is not an 8-bit binary PGM")
    w, h = int(tokens[1]), int(tokens[2])
    return np.frombuffer(data[pos + 1:pos + 1 + w * h], dtype=np.uint8).reshape(h, w)


def write_reports(reports, out_dir, stem="report") -> tuple:
    """``<stem>.json`` with every report and ``<stem>.csv`` with one row per pose."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jpath = out / f"{stem}.json"
    jpath.write_text(json.dumps([r.to_dict() for r in reports], indent=1))
    cpath = out / f"{stem}.csv"
    with open(cpath, "w", newline="") as f:
        writer = csv.DictWriter(f, CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        for r in reports:
            writer.writerows(r.csv_rows())
    return jpath, cpath


def read_reports(path) -> list:
    return [ErrorReport.from_dict(d) for d in json.loads(Path(path).read_text())]
