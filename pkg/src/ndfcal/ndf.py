"""Neural distortion field: an MLP queried along eye rays and composited.

A sample point ``x`` on a ray with direction ``d`` goes through two
networks. The intensity network sees only the positional encoding of
``x`` and returns a density ``rho`` plus a feature vector; the coordinate
network sees ``[feature, d]`` and returns the display-coordinate deviation
from a reference map. Samples along a ray are blended with weights
``w_i = T_i (1 - exp(-rho_i delta_i))``, ``T_i = exp(-sum_{j<i} rho_j delta_j)``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import nn
from .geometry import (CameraIntrinsics, EyePose, pixel_centers, ray_directions,
                       rays_for_rows, sample_depths)
from .maps import DistortionMap, read_map, write_map

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Architecture and optimisation settings.

    ``coord_activation`` is applied to the coordinate head before the
    deviation scaling; ``density_activation`` maps the intensity head to
    ``rho``. ``dtype`` selects the float64 reference path or the float32
    fast path.
    """

    batch_rays: int = 512
    iterations: int = 20_000
    # the short desk schedule anneals from ten times the long-run rates
    lr_start: float = 5e-3
    lr_end: float = 5e-5
    n_samples: int = 16
    # empty space in front of the virtual display is left out; samples near
    # the eye let the field fit each viewpoint separately instead of the surface
    near: float = 150.0
    far: float = 300.0
    n_freqs: int = 8
    input_scale: float = 1.0 / 300.0
    intensity_layers: tuple = (64, 64, 64, 64)
    coord_layers: tuple = (32, 32)
    coord_activation: str = "relu"
    density_activation: str = "softplus"
    min_weight: float = 0.5
    initial_depth: float = 3.0
    dtype: str = "float32"
    log_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.batch_rays < 1 or self.iterations < 1 or self.n_samples < 2:
            raise ValueError("need batch_rays >= 1, iterations >= 1, n_samples >= 2")
        object.__setattr__(self, "intensity_layers", tuple(self.intensity_layers))
        object.__setattr__(self, "coord_layers", tuple(self.coord_layers))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["intensity_layers"] = list(self.intensity_layers)
        d["coord_layers"] = list(self.coord_layers)
        return d


# overrides for the full-size network of the original experiments
FULL_SCALE = dict(intensity_layers=(256,) * 8, coord_layers=(128,) * 4,
                   n_freqs=16, iterations=500_000, coord_activation="relu",
                   lr_start=5e-4, lr_end=5e-6)


@dataclass
class TrainingSet:
    """Ground-truth maps at the training viewpoints (all the same resolution)."""

    poses: list
    maps: list
    intr: CameraIntrinsics

    def __post_init__(self):
        if len(self.poses) != len(self.maps) or not self.poses:
            raise ValueError("need one map per pose and at least one pose")
        for m in self.maps:
            if m.shape != self.intr.shape:
                raise ValueError(f"map shape {m.shape} != camera {self.intr.shape}")

    def reference_index(self) -> int:
        """Index of the pose nearest the centroid of all training positions."""
        t = np.array([p.t for p in self.poses])
        return int(np.argmin(np.linalg.norm(t - t.mean(axis=0), axis=1)))

    @classmethod
    def from_rows(cls, X, y, intr: CameraIntrinsics) -> "TrainingSet":
        """Group ``[u_E, v, t]`` rows by pose and rasterise them onto the pixel grid."""
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        keys, inverse = np.unique(X[:, 2:8], axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        poses, maps = [], []
        for k, key in enumerate(keys):
            sel = inverse == k
            coords = np.full((intr.height, intr.width, 2), np.nan)
            cols = np.floor(X[sel, 0]).astype(int)
            rows = np.floor(X[sel, 1]).astype(int)
            coords[rows, cols] = y[sel]
            poses.append(EyePose.from_array(key))
            maps.append(DistortionMap(coords, np.all(np.isfinite(coords), axis=2)))
        return cls(poses, maps, intr)


def deviation_range(training: TrainingSet, reference: DistortionMap):
    """Per-axis ``(min, max)`` of ``u_D - reference`` over all valid training pixels."""
    devs = [m.flat() - reference.flat() for m in training.maps]
    devs = np.vstack(devs)
    devs = devs[np.all(np.isfinite(devs), axis=1)]
    if len(devs) == 0:
        return np.zeros(2), np.zeros(2)
    return devs.min(axis=0), devs.max(axis=0)


# --- compositing -----------------------------------------------------------

def composite(values, rho, deltas):
    """Blend per-sample values along rays.

    ``values`` is ``(R, P, C)``, ``rho`` and ``deltas`` are ``(R, P)``.
    Returns ``(blended (R, C), total_weight (R,), weights (R, P),
    transmittance (R, P+1))``; the last column of the transmittance is what
    survives past the final sample.
    """
    tau = rho * deltas
    acc = np.zeros((tau.shape[0], tau.shape[1] + 1), dtype=tau.dtype)
    np.cumsum(tau, axis=1, out=acc[:, 1:])
    trans = np.exp(-acc)
    weights = trans[:, :-1] * -np.expm1(-tau)
    # subnormals make float32 matmuls several times slower
    floor = np.finfo(tau.dtype).tiny * 1e6
    trans[trans < floor] = 0
    weights[weights < floor] = 0
    blended = np.einsum("rp,rpc->rc", weights, values)
    return blended, weights.sum(axis=1), weights, trans


def composite_backward(values, deltas, weights, trans, grad):
    """Gradients of a loss w.r.t. ``values`` and ``rho`` given ``grad = dL/d(blended)``."""
    d_values = weights[:, :, None] * grad[:, None, :]
    s = np.einsum("rpc,rc->rp", values, grad)
    ws = weights * s
    # sum_{i>k} w_i s_i
    after = np.cumsum(ws[:, ::-1], axis=1)[:, ::-1] - ws
    d_rho = deltas * (trans[:, 1:] * s - after)
    return d_values, d_rho


def initial_density_bias(cfg: TrainConfig) -> float:
    """Density-head bias giving optical depth ``initial_depth`` over ``[near, far]``."""
    if cfg.initial_depth <= 0:
        return 0.0
    rho = cfg.initial_depth / ((cfg.far - cfg.near) * cfg.input_scale)
    if cfg.density_activation == "softplus":
        return float(rho + np.log(-np.expm1(-rho)))
    if cfg.density_activation == "relu":
        return float(rho)
    raise ValueError(f"no density initialisation for {cfg.density_activation!r}")


# --- the field -------------------------------------------------------------

class NdfModel:
    """Two-stage field plus the reference map it predicts deviations from."""

    def __init__(self, cfg: TrainConfig, reference_pose: EyePose, reference_map: DistortionMap,
                 intr: CameraIntrinsics, dev_offset=0.0, dev_scale=1.0, seed=None):
        self.cfg = cfg
        self.reference_pose = reference_pose
        self.reference_map = reference_map
        self.intr = intr
        self.dev_offset = float(dev_offset)
        self.dev_scale = float(dev_scale)
        dtype = np.dtype(cfg.dtype)
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        n_feat = cfg.intensity_layers[-1]
        self.intensity = nn.Mlp([6 * cfg.n_freqs, *cfg.intensity_layers, 1 + n_feat],
                                "relu", "identity", dtype=dtype, seed=rng)
        self.coord = nn.Mlp([n_feat + 3, *cfg.coord_layers, 2], "relu",
                            cfg.coord_activation, dtype=dtype, seed=rng)
        self.intensity.biases[-1][0] = initial_density_bias(cfg)
        # start at the reference map: the head outputs a constant zero deviation
        self.coord.weights[-1][...] = 0
        self.coord.biases[-1][...] = zero_deviation_bias(cfg.coord_activation,
                                                         self.dev_offset, self.dev_scale)
        self.step = 0

    @property
    def dtype(self):
        return self.intensity.dtype

    @property
    def networks(self):
        return {"intensity": self.intensity, "coord": self.coord}

    def params(self):
        return self.intensity.params() + self.coord.params()

    def touch(self):
        self.intensity.touch()
        self.coord.touch()

    def zero_coord_head(self):
        """Make the coordinate head output exactly zero (deviation fixed point)."""
        self.coord.weights[-1][...] = 0
        self.coord.biases[-1][...] = 0
        self.dev_offset = 0.0
        self.touch()

    # ``field`` works on flat sample arrays
    def field(self, points, dirs, keep_cache=False):
        points = np.asarray(points, dtype=self.dtype)
        dirs = np.asarray(dirs, dtype=self.dtype)
        enc = nn.positional_encoding(points, self.cfg.n_freqs, self.cfg.input_scale)
        h, c_int = self.intensity.forward(enc, keep_cache)
        z_rho = h[:, 0]
        act, dact = nn.activation(self.cfg.density_activation)
        rho = act(z_rho)
        feat = h[:, 1:]
        head, c_coord = self.coord.forward(np.concatenate([feat, dirs], axis=1), keep_cache)
        dev = self.dev_offset + self.dev_scale * head
        cache = None
        if keep_cache:
            cache = {"int": c_int, "coord": c_coord, "z_rho": z_rho, "rho": rho,
                     "n_feat": feat.shape[1]}
        return dev, rho, cache

    def field_backward(self, cache, d_dev, d_rho):
        g_coord, d_in = self.coord.backward(cache["coord"], self.dev_scale * d_dev)
        dact = nn.activation(self.cfg.density_activation)[1]
        d_h = np.empty((len(d_rho), 1 + cache["n_feat"]), dtype=self.dtype)
        d_h[:, 0] = d_rho * dact(cache["z_rho"], cache["rho"])
        d_h[:, 1:] = d_in[:, :cache["n_feat"]]
        g_int, _ = self.intensity.backward(cache["int"], d_h)
        return g_int + g_coord

    def query(self, x, d):
        """Deviation ``(2,)`` and density for a single point and unit direction."""
        d = np.asarray(d, dtype=float)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("direction must be a unit vector")
        dev, rho, _ = self.field(np.atleast_2d(x), d[None])
        return dev[0], float(rho[0])

    def render_rays(self, origins, dirs, depths, deltas, keep_cache=False):
        R, P = depths.shape
        pts = origins[:, None, :] + depths[:, :, None] * dirs[:, None, :]
        dirs_rep = np.broadcast_to(dirs[:, None, :], (R, P, 3))
        dev, rho, cache = self.field(pts.reshape(-1, 3), dirs_rep.reshape(-1, 3), keep_cache)
        dev = dev.reshape(R, P, 2)
        rho = rho.reshape(R, P)
        deltas = (deltas * self.cfg.input_scale).astype(self.dtype, copy=False)
        blended, total, weights, trans = composite(dev, rho, deltas)
        state = None
        if keep_cache:
            state = {"field": cache, "dev": dev, "deltas": deltas, "weights": weights,
                     "trans": trans}
        return blended, total, state

    def backward_rays(self, state, grad):
        d_dev, d_rho = composite_backward(state["dev"], state["deltas"], state["weights"],
                                          state["trans"], grad)
        return self.field_backward(state["field"], d_dev.reshape(-1, 2), d_rho.reshape(-1))

    def predict_rays(self, origins, dirs, chunk=2048):
        """Blended deviation and total weight for rays, deterministic sampling."""
        cfg = self.cfg
        out = np.empty((len(origins), 2))
        total = np.empty(len(origins))
        for i in range(0, len(origins), chunk):
            o = np.asarray(origins[i:i + chunk], dtype=self.dtype)
            d = np.asarray(dirs[i:i + chunk], dtype=self.dtype)
            depths, deltas = sample_depths(len(o), cfg.near, cfg.far, cfg.n_samples,
                                           "deterministic")
            b, w, _ = self.render_rays(o, d, depths.astype(self.dtype), deltas)
            out[i:i + chunk] = b
            total[i:i + chunk] = w
        return out, total

    def synthesize_map(self, pose: EyePose, intr: CameraIntrinsics | None = None,
                       return_weight=False):
        intr = intr or self.intr
        if intr.shape != self.reference_map.shape:
            raise ValueError(f"resolution {intr.shape} != reference map "
                             f"{self.reference_map.shape}")
        pix = pixel_centers(intr)
        ref = self.reference_map.flat()
        ok = np.all(np.isfinite(ref), axis=1)
        dirs = ray_directions(pix[ok], intr, pose)
        origins = np.broadcast_to(pose.position, dirs.shape)
        dev, total = self.predict_rays(origins, dirs)
        values = np.full((len(pix), 2), np.nan)
        weight = np.zeros(len(pix))
        values[ok] = ref[ok] + dev
        weight[ok] = total
        values[weight < self.cfg.min_weight] = np.nan
        dmap = DistortionMap.from_flat(values, intr)
        if return_weight:
            return dmap, weight.reshape(intr.shape)
        return dmap

    # --- persistence ---
    def save(self, path, dtype="<f4") -> Path:
        path = Path(path)
        meta = {"train_config": self.cfg.to_dict(), "step": self.step,
                "reference_pose": self.reference_pose.to_dict(),
                "intrinsics": self.intr.to_dict(), "dev_offset": self.dev_offset,
                "dev_scale": self.dev_scale, "reference_map": path.stem + ".ref"}
        nn.save_networks(path, self.networks, meta, dtype=dtype)
        write_map(self.reference_map, path.with_name(path.stem + ".ref"))
        return path

    @classmethod
    def load(cls, path) -> "NdfModel":
        path = Path(path)
        nets, header = nn.load_networks(path)
        cfg_d = header["train_config"]
        cfg = TrainConfig(**cfg_d)
        ref = read_map(path.with_name(header["reference_map"]))
        model = cls.__new__(cls)
        model.cfg = cfg
        model.reference_pose = EyePose.from_dict(header["reference_pose"])
        model.reference_map = ref
        model.intr = CameraIntrinsics.from_dict(header["intrinsics"])
        model.dev_offset = header["dev_offset"]
        model.dev_scale = header["dev_scale"]
        model.intensity = nets["intensity"].astype(cfg.dtype)
        model.coord = nets["coord"].astype(cfg.dtype)
        model.step = header["step"]
        return model


# --- training --------------------------------------------------------------

def _training_rays(training: TrainingSet, reference: DistortionMap):
    pix = pixel_centers(training.intr)
    ref = reference.flat()
    origins, dirs, targets = [], [], []
    for pose, m in zip(training.poses, training.maps):
        dev = m.flat() - ref
        ok = np.all(np.isfinite(dev), axis=1)
        d = ray_directions(pix[ok], training.intr, pose)
        origins.append(np.broadcast_to(pose.position, d.shape))
        dirs.append(d)
        targets.append(dev[ok])
    return np.vstack(origins), np.vstack(dirs), np.vstack(targets)


def zero_deviation_bias(activation, offset, scale, margin=1e-3):
    """Pre-activation at which the coordinate head means zero deviation.

    Kept ``margin`` inside the open range of bounded heads so that ReLU units
    start active and sigmoid units away from saturation.
    """
    z = -offset / scale
    if activation == "identity":
        return z
    if activation == "relu":
        return max(z, margin)
    if activation == "sigmoid":
        z = min(max(z, margin), 1 - margin)
        return float(np.log(z / (1 - z)))
    if activation == "softplus":
        z = max(z, margin)
        return float(np.log(np.expm1(z)))
    raise ValueError(f"unknown coordinate activation {activation!r}")


def deviation_scaling(lo, hi, activation):
    """Offset and scale that map the head's natural range onto the deviations.

    Bounded heads (sigmoid, ReLU) learn ``(dev - min) / range`` in ``[0, 1]``;
    the identity head learns ``dev / range`` so that zero output means zero
    deviation.
    """
    span = float(np.max(hi - lo))
    span = span if span > 0 else 1.0
    if activation == "identity":
        return 0.0, span
    return float(np.min(lo)), span


def train(training: TrainingSet, cfg: TrainConfig = TrainConfig(), callback=None):
    """Fit a field to the training maps. Returns ``(model, trace)``.

    ``trace`` is a list of ``(step, mean squared error per ray in px^2)``.
    """
    ref_idx = training.reference_index()
    reference = training.maps[ref_idx]
    origins, dirs, targets = _training_rays(training, reference)
    if len(targets) == 0:
        raise TrainingError("no valid training pixels")
    lo, hi = deviation_range(training, reference)
    offset, scale = deviation_scaling(lo, hi, cfg.coord_activation)
    model = NdfModel(cfg, training.poses[ref_idx], reference, training.intr, offset, scale)
    dtype = model.dtype
    origins = origins.astype(dtype)
    dirs = dirs.astype(dtype)
    targets = targets.astype(dtype)
    params = model.params()
    opt = nn.Adam(params)
    rng = np.random.default_rng(cfg.seed + 1)
    trace = []
    t0 = time.time()
    for step in range(cfg.iterations):
        idx = rng.integers(0, len(targets), cfg.batch_rays)
        depths, deltas = sample_depths(cfg.batch_rays, cfg.near, cfg.far, cfg.n_samples,
                                       "stratified", rng)
        pred, _, state = model.render_rays(origins[idx], dirs[idx], depths.astype(dtype),
                                           deltas, keep_cache=True)
        resid = pred - targets[idx]
        loss = float(np.sum(resid.astype(np.float64) ** 2))
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {step}")
        grads = model.backward_rays(state, 2.0 * resid)
        opt.step(params, grads, nn.lr_schedule(cfg.lr_start, cfg.lr_end, step, cfg.iterations))
        model.touch()
        model.step = step + 1
        if step % cfg.log_every == 0 or step == cfg.iterations - 1:
            trace.append((step, loss / cfg.batch_rays))
            if callback is not None:
                callback(step, loss / cfg.batch_rays)
            if step % (cfg.log_every * 20) == 0:
                log.info("step %d loss %.4g px^2 (%.1fs)", step, loss / cfg.batch_rays,
                         time.time() - t0)
    return model, trace


class NeuralDistortionField(RegressorMixin, BaseEstimator):
    """Estimator wrapper: fit on ``[u_E, v, t]`` rows, predict display coordinates.

    Training rows must lie on the retinal pixel centres of ``intrinsics``
    (dense ground-truth maps); prediction accepts arbitrary pixels and
    poses. Pixels the field does not cover predict NaN.
    """

    def __init__(self, intrinsics: CameraIntrinsics | None = None, config: TrainConfig | None = None):
        self.intrinsics = intrinsics
        self.config = config

    def fit(self, X, y):
        X = check_array(X)
        intr = self.intrinsics
        if intr is None:
            raise ValueError("intrinsics are required")
        return self.fit_training_set(TrainingSet.from_rows(X, y, intr))

    def fit_training_set(self, training: TrainingSet):
        self.model_, self.trace_ = train(training, self.config or TrainConfig())
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X)
        intr = self.model_.intr
        origins, dirs = rays_for_rows(X, intr)
        dev, total = self.model_.predict_rays(origins, dirs)
        ref = self.model_.reference_map.lookup(X[:, :2])
        out = ref + dev
        out[total < self.model_.cfg.min_weight] = np.nan
        return out

    def predict_map(self, pose: EyePose) -> DistortionMap:
        check_is_fitted(self, "model_")
        return self.model_.synthesize_map(pose)
