"""Gaussian radial-basis kernel ridge regression.

``f(x) = A.T @ phi(x)`` with ``phi_k(x) = exp(-|x - mu_k|^2 / (2 sigma^2))``
and ``A = (Phi.T Phi + lam I)^-1 Phi.T U``. Used for the per-viewpoint
ground-truth maps (2D input: retinal pixel) and for the pose-conditioned
baseline (5D input: retinal pixel + eye position).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import scipy.linalg
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .geometry import CameraIntrinsics, pixel_centers
from .maps import DistortionMap

CHUNK = 8192


class IllConditionedError(np.linalg.LinAlgError):
    """The regularised normal matrix cannot be solved reliably."""


def gaussian_features(X, centers, sigma) -> np.ndarray:
    d2 = (np.einsum("ij,ij->i", X, X)[:, None] - 2.0 * X @ centers.T
          + np.einsum("ij,ij->i", centers, centers)[None, :])
    np.maximum(d2, 0.0, out=d2)
    return np.exp(-d2 / (2.0 * sigma**2))


def solve_ridge(gram, rhs, ridge):
    """Solve ``(gram + ridge I) A = rhs``; Cholesky first, pivoted QR fallback."""
    K = gram.shape[0]
    G = gram + ridge * np.eye(K)
    if ridge == 0:
        s = np.linalg.svd(G, compute_uv=False)
        if s[-1] <= s[0] * K * np.finfo(float).eps:
            raise IllConditionedError(
                f"normal matrix is singular (cond={s[0] / max(s[-1], 1e-300):.3g}) "
                "and no ridge term was given")
    try:
        return scipy.linalg.cho_solve(scipy.linalg.cho_factor(G), rhs)
    except np.linalg.LinAlgError:
        A, *_ = scipy.linalg.lstsq(G, rhs, lapack_driver="gelsy")
        return A


class GaussianKernelRegressor(RegressorMixin, BaseEstimator):
    """Kernel ridge regression on a random subset of the inputs as centres.

    Parameters
    ----------
    n_centers : int
        Number of Gaussian basis functions ``K``.
    sigma : float
        Kernel width, in (normalised, if ``normalize``) input units.
    ridge : float
        Regularisation ``lambda``.
    normalize : bool
        Min-max scale every input axis to ``[0, 1]`` before evaluating kernels.
    centers : array, optional
        Fixed centres (in raw input units); overrides random selection.
    random_state : int or None
        Seed for centre selection.
    """

    def __init__(self, n_centers=200, sigma=25.0, ridge=1e-11, normalize=False,
                 centers=None, random_state=0):
        self.n_centers = n_centers
        self.sigma = sigma
        self.ridge = ridge
        self.normalize = normalize
        self.centers = centers
        self.random_state = random_state

    def _scale(self, X):
        return (X - self.input_min_) * self.input_scale_

    def fit(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True)
        if self.sigma <= 0 or self.ridge < 0:
            raise ValueError("need sigma > 0 and ridge >= 0")
        y2 = y.reshape(len(y), -1)
        if self.normalize:
            lo, hi = X.min(axis=0), X.max(axis=0)
            span = np.where(hi > lo, hi - lo, 1.0)
            self.input_min_, self.input_scale_ = lo, 1.0 / span
        else:
            self.input_min_ = np.zeros(X.shape[1])
            self.input_scale_ = np.ones(X.shape[1])
        if self.centers is not None:
            centers = np.asarray(self.centers, dtype=float)
        else:
            if len(X) < self.n_centers:
                raise IllConditionedError(
                    f"{len(X)} samples cannot support {self.n_centers} centres")
            rng = np.random.default_rng(self.random_state)
            centers = X[np.sort(rng.choice(len(X), self.n_centers, replace=False))]
        self.centers_ = centers
        mu = self._scale(centers)
        K = len(mu)
        if self.ridge == 0 and len(X) == K:
            # square interpolation system: same solution as the normal
            # equations without squaring the condition number
            self.coef_ = self._interpolate(gaussian_features(self._scale(X), mu, self.sigma), y2)
            self.n_features_in_ = X.shape[1]
            self._y_ndim = y.ndim
            return self
        gram = np.zeros((K, K))
        rhs = np.zeros((K, y2.shape[1]))
        for i in range(0, len(X), CHUNK):
            phi = gaussian_features(self._scale(X[i:i + CHUNK]), mu, self.sigma)
            gram += phi.T @ phi
            rhs += phi.T @ y2[i:i + CHUNK]
        self.coef_ = solve_ridge(gram, rhs, self.ridge)
        if not np.all(np.isfinite(self.coef_)):
            raise IllConditionedError("non-finite kernel coefficients")
        self.n_features_in_ = X.shape[1]
        self._y_ndim = y.ndim
        return self

    @staticmethod
    def _interpolate(phi, y):
        try:
            return scipy.linalg.solve(phi, y, assume_a="sym", check_finite=False)
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgWarning) as exc:
            raise IllConditionedError(f"interpolation matrix is singular: {exc}") from exc

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X)
        mu = self._scale(self.centers_)
        out = np.empty((len(X), self.coef_.shape[1]))
        for i in range(0, len(X), CHUNK):
            out[i:i + CHUNK] = gaussian_features(self._scale(X[i:i + CHUNK]), mu,
                                                 self.sigma) @ self.coef_
        return out.ravel() if self._y_ndim == 1 else out

    def residual_rms(self, X, y) -> float:
        r = self.predict(X) - np.asarray(y, dtype=float)
        return float(np.sqrt(np.mean(np.sum(r.reshape(len(r), -1) ** 2, axis=1))))


def fit_viewpoint_map(lut, n_centers=200, sigma=25.0, ridge=1e-11, random_state=0):
    """Fit ``u_E -> u_D`` for one viewpoint's correspondence table."""
    return GaussianKernelRegressor(n_centers, sigma, ridge, random_state=random_state).fit(
        lut.u_e, lut.u_d)


def kernel_map(model: GaussianKernelRegressor, intr: CameraIntrinsics, valid=None) -> DistortionMap:
    """Evaluate a 2D-input model on the retinal pixel grid."""
    values = model.predict(pixel_centers(intr))
    if valid is None:
        valid = np.ones(intr.shape, bool)
    return DistortionMap(values.reshape(intr.height, intr.width, 2), valid)


class PoseKernelRegressor(RegressorMixin, BaseEstimator):
    """Gaussian model of ``u_D`` over ``(u_E, t)``, ignoring eye rotation.

    Fits and predicts on rows ``[u_x, u_y, v(3), t(3)]``; columns 2-4 are
    dropped. All five remaining axes are min-max normalised to ``[0, 1]``,
    after which the three position axes are multiplied by
    ``position_scale``. Targets are centred on their training mean, so the
    kernels model the departure from the average display coordinate.

    Parameters
    ----------
    n_centers, sigma, ridge, random_state
        As for :class:`GaussianKernelRegressor`.
    position_scale : float
        Relative extent of the position axes; values below one widen the
        kernels along ``t`` only.
    max_samples : int or None
        Random subset of training rows used for the fit.
    """

    def __init__(self, n_centers=600, sigma=0.2, ridge=1e-8, position_scale=0.02,
                 max_samples=30000, random_state=0):
        self.n_centers = n_centers
        self.sigma = sigma
        self.ridge = ridge
        self.position_scale = position_scale
        self.max_samples = max_samples
        self.random_state = random_state

    @staticmethod
    def _inputs(X):
        X = check_array(X)
        if X.shape[1] != 8:
            raise ValueError(f"expected 8 columns [u_E, v, t], got {X.shape[1]}")
        return X[:, [0, 1, 5, 6, 7]]

    def _scaled(self, Z):
        return (Z - self.input_min_) * self.input_scale_

    def fit(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True)
        if self.position_scale <= 0:
            raise ValueError("position_scale must be positive")
        Z = self._inputs(X)
        lo, hi = Z.min(axis=0), Z.max(axis=0)
        span = np.where(hi > lo, hi - lo, 1.0)
        self.input_min_ = lo
        self.input_scale_ = np.r_[1.0, 1.0, [self.position_scale] * 3] / span
        if self.max_samples is not None and len(Z) > self.max_samples:
            keep = np.sort(np.random.default_rng(self.random_state).choice(
                len(Z), self.max_samples, replace=False))
            Z, y = Z[keep], y[keep]
        self.target_mean_ = y.mean(axis=0)
        self.model_ = GaussianKernelRegressor(self.n_centers, self.sigma, self.ridge,
                                              random_state=self.random_state)
        self.model_.fit(self._scaled(Z), y - self.target_mean_)
        self.n_features_in_ = 8
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict(self._scaled(self._inputs(X))) + self.target_mean_


def lut_rows(luts):
    """Stack correspondence tables into ``(X[n, 8], y[n, 2])`` training rows."""
    X, y = [], []
    for lut in luts:
        p = lut.pose.as_array()
        X.append(np.hstack([lut.u_e, np.broadcast_to(p, (len(lut.u_e), 6))]))
        y.append(lut.u_d)
    return np.vstack(X), np.vstack(y)


def fit_gaussian_5d(luts, **params) -> PoseKernelRegressor:
    """Fit the pose-conditioned model on correspondence tables from several poses."""
    if len(luts) == 0:
        raise ValueError("need at least one correspondence table")
    X, y = lut_rows(luts)
    return PoseKernelRegressor(**params).fit(X, y)


def save_kernel_model(model: GaussianKernelRegressor, path, extra=None) -> Path:
    """JSON header followed by a little-endian f64 blob of centres then ``A``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "dims": int(model.centers_.shape[1]), "K": int(len(model.centers_)),
        "outputs": int(model.coef_.shape[1]), "sigma": float(model.sigma),
        "ridge": float(model.ridge), "normalize": bool(model.normalize),
        "input_min": model.input_min_.tolist(), "input_scale": model.input_scale_.tolist(),
        "random_state": model.random_state, "extra": extra or {},
    }
    head = json.dumps(header).encode()
    blob = np.concatenate([model.centers_.ravel(), model.coef_.ravel()]).astype("<f8")
    with open(path, "wb") as f:
        f.write(len(head).to_bytes(8, "little"))
        f.write(head)
        f.write(blob.tobytes())
    return path


def load_kernel_model(path):
    data = Path(path).read_bytes()
    n = int.from_bytes(data[:8], "little")
    header = json.loads(data[8:8 + n])
    blob = np.frombuffer(data[8 + n:], dtype="<f8")
    D, K, C = header["dims"], header["K"], header["outputs"]
    model = GaussianKernelRegressor(K, header["sigma"], header["ridge"], header["normalize"],
                                    random_state=header["random_state"])
    model.centers_ = blob[: K * D].reshape(K, D).copy()
    model.coef_ = blob[K * D: K * D + K * C].reshape(K, C).copy()
    model.input_min_ = np.array(header["input_min"])
    model.input_scale_ = np.array(header["input_scale"])
    model.n_features_in_ = D
    model._y_ndim = 2
    return model, header["extra"]


def save_pose_model(model: PoseKernelRegressor, path) -> Path:
    """Kernel file of the inner model; the 5D normalisation rides in the header."""
    extra = {"kind": "pose", "params": model.get_params(),
             "input_min": model.input_min_.tolist(),
             "input_scale_5d": model.input_scale_.tolist(),
             "target_mean": model.target_mean_.tolist()}
    return save_kernel_model(model.model_, path, extra)


def load_pose_model(path) -> PoseKernelRegressor:
    inner, extra = load_kernel_model(path)
    if extra.get("kind") != "pose":
        raise ValueError(f"{path} does not hold a pose-conditioned model")
    model = PoseKernelRegressor(**extra["params"])
    model.model_ = inner
    model.input_min_ = np.array(extra["input_min"])
    model.input_scale_ = np.array(extra["input_scale_5d"])
    model.target_mean_ = np.array(extra["target_mean"])
    model.n_features_in_ = 8
    return model
