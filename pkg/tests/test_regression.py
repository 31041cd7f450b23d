import numpy as np
import pytest
from sklearn.base import clone

from ndfcal.geometry import EyePose, GridSpec, pixel_centers, pose_grid
from ndfcal.graycode import CorrespondenceLut, acquire_lut
from ndfcal.optics import oracle_map
from ndfcal.regression import (GaussianKernelRegressor, IllConditionedError,
                               PoseKernelRegressor, fit_gaussian_5d, fit_viewpoint_map,
                               gaussian_features, kernel_map, load_kernel_model,
                               load_pose_model, lut_rows, save_kernel_model, save_pose_model,
                               solve_ridge)


def test_single_sample_interpolated_exactly():
    x0, y0 = np.array([[3.0, -2.0]]), np.array([[7.0, 11.0]])
    m = GaussianKernelRegressor(1, 1.0, 0.0).fit(x0, y0)
    np.testing.assert_array_equal(m.predict(x0), y0)


def test_bump_from_model_family_fits_exactly(rng):
    centers = rng.uniform(0, 10, (5, 2))
    X = np.vstack([centers, rng.uniform(0, 10, (40, 2))])
    A = rng.normal(size=(5, 2))
    y = gaussian_features(X, centers, 2.0) @ A
    m = GaussianKernelRegressor(sigma=2.0, ridge=0.0, centers=centers).fit(X, y)
    assert m.residual_rms(X, y) < 1e-8


def test_distinct_points_interpolated_when_all_are_centres(rng):
    X = rng.uniform(0, 10, (30, 2))
    y = rng.normal(size=(30, 2))
    m = GaussianKernelRegressor(30, 1.0, 0.0).fit(X, y)
    assert np.abs(m.predict(X) - y).max() < 1e-6


def test_zero_coefficients_give_zero(rng):
    X = rng.normal(size=(10, 2))
    m = GaussianKernelRegressor(3, 1.0, 0.1).fit(X, np.zeros((10, 2)))
    np.testing.assert_array_equal(m.predict(X), 0)


def test_centre_evaluates_to_its_coefficient():
    m = GaussianKernelRegressor(sigma=1.0, ridge=0.0, centers=[[1.0, 2.0]]).fit(
        [[1.0, 2.0]], [[4.0, 5.0]])
    np.testing.assert_allclose(m.predict([[1.0, 2.0]]), m.coef_)


def test_far_input_decays_to_nothing(rng):
    X = rng.uniform(0, 1, (20, 2))
    m = GaussianKernelRegressor(5, 0.3, 1e-6).fit(X, rng.normal(size=(20, 2)))
    far = m.predict([[1 + 11 * 0.3, 0.0]])
    assert np.linalg.norm(far) < 1e-20 * np.abs(m.coef_).sum()


def test_one_viewpoint_of_oracle(optics, desk, rng):
    pose = EyePose(t=(1, -1, 2))
    px = pixel_centers(desk)
    ud = oracle_map(px, pose, optics, desk)
    ok = np.flatnonzero(np.isfinite(ud[:, 0]))
    pick = rng.choice(ok, 500, replace=False)
    m = GaussianKernelRegressor(200, 25.0, 1e-11).fit(px[pick], ud[pick])
    assert m.residual_rms(px[pick], ud[pick]) < 0.25


def test_too_few_samples_for_centres(rng):
    with pytest.raises(IllConditionedError):
        GaussianKernelRegressor(50).fit(rng.normal(size=(10, 2)), rng.normal(size=(10, 2)))


def test_singular_system_without_ridge():
    with pytest.raises(IllConditionedError):
        solve_ridge(np.ones((3, 3)), np.ones((3, 1)), 0.0)


def test_estimator_protocol(rng):
    m = GaussianKernelRegressor(n_centers=7, sigma=3.0)
    assert clone(m).get_params() == m.get_params()
    X, y = rng.normal(size=(20, 2)), rng.normal(size=20)
    assert m.fit(X, y).predict(X).shape == (20,)


def test_kernel_model_file_round_trip(rng, tmp_path):
    X, y = rng.uniform(0, 50, (100, 2)), rng.normal(size=(100, 2))
    m = GaussianKernelRegressor(20, 10.0, 1e-6, normalize=True).fit(X, y)
    save_kernel_model(m, tmp_path / "m.kmodel", {"note": 1})
    back, extra = load_kernel_model(tmp_path / "m.kmodel")
    assert extra == {"note": 1}
    np.testing.assert_allclose(back.predict(X), m.predict(X), rtol=0, atol=1e-12)


def test_kernel_map_on_grid(small_camera, rng):
    px = pixel_centers(small_camera)
    m = GaussianKernelRegressor(40, 10.0, 1e-8).fit(px, px * 2)
    dmap = kernel_map(m, small_camera)
    assert dmap.shape == small_camera.shape
    np.testing.assert_array_equal(dmap.flat(), m.predict(px))


def test_identical_poses_reduce_to_pooled_2d_fit(rng):
    pose = EyePose(t=(1, 2, 3))
    u_e = rng.uniform(0, 100, (300, 2))
    u_d = np.c_[np.sin(u_e[:, 0] / 30) * 40, u_e[:, 1] * 3]
    luts = [CorrespondenceLut(u_e[:150], u_d[:150], pose),
            CorrespondenceLut(u_e[150:], u_d[150:], pose)]
    m5 = fit_gaussian_5d(luts, n_centers=50, sigma=0.2, max_samples=None)
    m2 = GaussianKernelRegressor(50, 0.2, 1e-8, normalize=True).fit(u_e, u_d - u_d.mean(0))
    X, _ = lut_rows(luts)
    np.testing.assert_allclose(m5.predict(X), m2.predict(u_e) + u_d.mean(0), atol=1e-9)


def test_rotation_columns_are_ignored(rng):
    X = np.c_[rng.uniform(0, 100, (200, 2)), np.zeros((200, 3)), rng.uniform(-6, 6, (200, 3))]
    y = X[:, :2] + X[:, 5:7]
    m = PoseKernelRegressor(n_centers=30).fit(X, y)
    X2 = X.copy()
    X2[:, 2:5] = 0.3
    np.testing.assert_array_equal(m.predict(X), m.predict(X2))


def test_rows_need_eight_columns(rng):
    with pytest.raises(ValueError):
        PoseKernelRegressor().fit(rng.normal(size=(10, 5)), rng.normal(size=(10, 2)))


@pytest.fixture(scope="module")
def corner_luts(optics, desk):
    return [acquire_lut(p, optics, desk) for p in pose_grid(GridSpec(12.0, (2, 2, 2)))]


def test_corner_model_is_self_consistent(corner_luts):
    m = fit_gaussian_5d(corner_luts)
    X, y = lut_rows(corner_luts)
    err = np.linalg.norm(m.predict(X[::50]) - y[::50], axis=1)
    assert np.median(err) < 1.0


def test_pose_model_file_round_trip(corner_luts, tmp_path):
    m = fit_gaussian_5d(corner_luts[:2], n_centers=50, max_samples=2000)
    save_pose_model(m, tmp_path / "g.kmodel")
    back = load_pose_model(tmp_path / "g.kmodel")
    X, _ = lut_rows(corner_luts[:2])
    np.testing.assert_allclose(back.predict(X[:100]), m.predict(X[:100]), rtol=0, atol=1e-9)


def test_viewpoint_fit_from_lut(corner_luts):
    lut = corner_luts[0]
    m = fit_viewpoint_map(lut)
    assert m.residual_rms(lut.u_e, lut.u_d) < 0.5
