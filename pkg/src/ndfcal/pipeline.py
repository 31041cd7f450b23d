"""Experiment stages behind the command-line interface.

Directory layout under ``cfg["out"]``::

    data/N<n>/poses.json            training (measured) and test poses
    data/N<n>/luts/train_XXX.*      correspondence tables (CSV + pose JSON)
    data/N<n>/gt_train/train_XXX.*  training ground-truth maps (MapFile)
    data/N<n>/gt_test/test_XXX.*    test ground-truth maps (MapFile)
    data/N<n>/manifest.json         content hashes of everything above
    gt_models/N<n>/                 per-viewpoint kernel fits and residuals
    models/N<n>/                    one artifact per method plus manifest
    eval/N<n>/                      reports, scatter table, error images
    ablation/N<n>/                  one directory per ablation cell
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import config as C
from .baselines import (PointSourceReprojector, TrilinearInterpolator, load_point_field,
                        save_point_field)
from .evaluation import (central_mask, compare_maps, distance_correlation, evaluate,
                         pgm_name, render_pgm, viewpoint_error_scatter, write_reports,
                         angular_pitch)
from .geometry import EyePose, GridSpec, pixel_centers, pose_grid, test_diagonal_poses
from .graycode import CorrespondenceLut, acquire_lut, gen_patterns, read_lut, write_lut
from .maps import DistortionMap, read_map, write_map
from .ndf import NdfModel, TrainingSet, train as train_ndf
from .optics import dense_gt_map
from .regression import (IllConditionedError, PoseKernelRegressor, fit_viewpoint_map,
                         kernel_map, load_pose_model, save_kernel_model, save_pose_model)

log = logging.getLogger(__name__)

METHODS = ("reconstruct", "trilinear", "gauss5d", "ndf")


class PrerequisiteError(RuntimeError):
    """An earlier stage has not been run, or its outputs are out of date."""


# --- paths and hashing ------------------------------------------------------------

def _root(cfg) -> Path:
    return Path(cfg["out"])


def _tag(cfg) -> str:
    return f"N{int(cfg['grid']['n_train'])}"


def data_dir(cfg) -> Path:
    return _root(cfg) / "data" / _tag(cfg)


def models_dir(cfg) -> Path:
    return _root(cfg) / "models" / _tag(cfg)


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True))
    return path


def _read_json(path):
    path = Path(path)
    if not path.exists():
        raise PrerequisiteError(f"missing {path}")
    return json.loads(path.read_text())


def _hash_tree(base: Path, exclude=("manifest.json",)) -> dict:
    return {str(p.relative_to(base)): sha256(p)
            for p in sorted(base.rglob("*")) if p.is_file() and p.name not in exclude}


def write_manifest(base: Path, extra=None) -> dict:
    files = _hash_tree(base)
    manifest = {"files": files, "hash": C.digest(files), **(extra or {})}
    _write_json(base / "manifest.json", manifest)
    return manifest


def dataset_hash(cfg) -> str:
    """Hash recorded at generation time, after checking files still match it."""
    base = data_dir(cfg)
    manifest = _read_json(base / "manifest.json")
    if _hash_tree(base) != manifest["files"]:
        raise PrerequisiteError(f"dataset in {base} changed since its manifest was written; "
                                "rerun gen-data")
    return manifest["hash"]


def save_resolved_config(cfg, where: Path) -> Path:
    where.mkdir(parents=True, exist_ok=True)
    path = where / "config.yaml"
    path.write_text(C.dump(cfg))
    return path


# --- poses ---------------------------------------------------------------------

def lattice_subset(n_train: int) -> np.ndarray:
    """Indices into the 5x5x5 lattice (x slowest) of the 8, 27 or 125 subsets."""
    step = {8: 4, 27: 2, 125: 1}[n_train]
    keep = [i for i, (a, b, c) in enumerate(itertools.product(range(5), repeat=3))
            if a % step == 0 and b % step == 0 and c % step == 0]
    return np.array(keep)


def training_poses(cfg) -> tuple:
    """Measured and nominal training poses for ``grid.n_train``.

    Measured poses come from one jittered 125-pose lattice, so the smaller
    sets are exact subsets of the larger ones.
    """
    g = cfg["grid"]
    full = GridSpec(cube_edge=float(g["cube_edge"]), counts=(5, 5, 5),
                    rotation_jitter=float(g["rotation_jitter"]),
                    translation_jitter=float(g["translation_jitter"]), seed=int(cfg["seed"]))
    measured = pose_grid(full)
    nominal = pose_grid(GridSpec(cube_edge=full.cube_edge, counts=(5, 5, 5)))
    idx = lattice_subset(int(g["n_train"]))
    return [measured[i] for i in idx], [nominal[i] for i in idx]


def test_poses(cfg) -> list:
    return test_diagonal_poses(float(cfg["grid"]["cube_edge"]))


test_poses.__test__ = False


# --- stages ------------------------------------------------------------------

def gen_data(cfg) -> Path:
    """Simulate acquisition: poses, correspondence tables, test ground truth."""
    base = data_dir(cfg)
    optics, intr = C.optics(cfg), C.camera(cfg)
    measured, nominal = training_poses(cfg)
    tests = test_poses(cfg)
    _write_json(base / "poses.json", {
        "train": [p.to_dict() for p in measured],
        "train_nominal": [p.to_dict() for p in nominal],
        "test": [p.to_dict() for p in tests],
    })
    d = cfg["data"]
    stack = gen_patterns(optics.display_width, optics.display_height) \
        if d["mode"] == "graycode" else None
    pix = pixel_centers(intr)
    for i, pose in enumerate(measured):
        if stack is not None:
            lut = acquire_lut(pose, optics, intr, noise=float(d["noise"]),
                              seed=int(cfg["seed"]) * 1000 + i, threshold=float(d["threshold"]),
                              min_contrast=float(d["min_contrast"]), stack=stack)
        else:
            dmap = dense_gt_map(pose, optics, intr)
            ok = dmap.valid.ravel()
            lut = CorrespondenceLut(pix[ok], dmap.flat()[ok], pose)
            write_map(dmap, base / "gt_train" / f"train_{i:03d}")
        write_lut(lut, base / "luts" / f"train_{i:03d}")
        log.info("viewpoint %d/%d: %d correspondences", i + 1, len(measured), len(lut))
    for i, pose in enumerate(tests):
        write_map(dense_gt_map(pose, optics, intr), base / "gt_test" / f"test_{i:03d}")
    write_manifest(base, {"config": C.digest({k: cfg[k] for k in
                                              ("seed", "optics", "camera", "grid", "data")})})
    return base


def _load_poses(cfg):
    poses = _read_json(data_dir(cfg) / "poses.json")
    return ([EyePose.from_dict(p) for p in poses["train"]],
            [EyePose.from_dict(p) for p in poses["train_nominal"]],
            [EyePose.from_dict(p) for p in poses["test"]])


def _load_luts(cfg):
    train, _, _ = _load_poses(cfg)
    return [read_lut(data_dir(cfg) / "luts" / f"train_{i:03d}") for i in range(len(train))]


def lut_mask(lut, intr) -> np.ndarray:
    """Retinal pixels covered by a table, with isolated undecoded holes closed."""
    mask = np.zeros(intr.shape, bool)
    cols = np.floor(lut.u_e[:, 0]).astype(int)
    rows = np.floor(lut.u_e[:, 1]).astype(int)
    mask[rows, cols] = True
    closed = ndimage.binary_closing(mask, structure=np.ones((3, 3)), border_value=0)
    return closed | mask


def fit_gt(cfg) -> Path:
    """Kernel fit per training viewpoint; writes models, residuals and dense maps."""
    data_hash = dataset_hash(cfg)
    intr = C.camera(cfg)
    g = cfg["gt_fit"]
    out = _root(cfg) / "gt_models" / _tag(cfg)
    residuals = []
    for i, lut in enumerate(_load_luts(cfg)):
        if len(lut) < int(g["n_centers"]):
            raise IllConditionedError(f"viewpoint {i} (t={list(lut.pose.t)}): {len(lut)} "
                                      f"correspondences cannot support {g['n_centers']} centres")
        model = fit_viewpoint_map(lut, int(g["n_centers"]), float(g["sigma"]),
                                  float(g["ridge"]), random_state=int(cfg["seed"]) + i)
        save_kernel_model(model, out / f"train_{i:03d}.kmodel", {"pose": lut.pose.to_dict()})
        residuals.append({"index": i, "t": list(lut.pose.t), "n": len(lut),
                          "rms_px": model.residual_rms(lut.u_e, lut.u_d)})
        if cfg["data"]["mode"] == "graycode":
            dmap = kernel_map(model, intr, lut_mask(lut, intr))
            write_map(dmap, data_dir(cfg) / "gt_train" / f"train_{i:03d}")
    _write_json(out / "fit_report.json", {"dataset": data_hash, "viewpoints": residuals})
    if cfg["data"]["mode"] == "graycode":
        # the maps are part of the dataset from now on
        manifest = _read_json(data_dir(cfg) / "manifest.json")
        write_manifest(data_dir(cfg), {"config": manifest["config"], "gt_fit": C.digest(g)})
    return out


def training_set(cfg) -> TrainingSet:
    train, _, _ = _load_poses(cfg)
    base = data_dir(cfg) / "gt_train"
    stems = [base / f"train_{i:03d}" for i in range(len(train))]
    if not all(s.with_suffix(".bin").exists() for s in stems):
        raise PrerequisiteError(f"training maps missing in {base}; run fit-gt first")
    return TrainingSet(train, [read_map(s) for s in stems], C.camera(cfg))


def _map_rows(ts: TrainingSet):
    pix = pixel_centers(ts.intr)
    X, y = [], []
    for pose, m in zip(ts.poses, ts.maps):
        ok = m.valid.ravel()
        X.append(np.hstack([pix[ok], np.broadcast_to(pose.as_array(), (ok.sum(), 6))]))
        y.append(m.flat()[ok])
    return np.vstack(X), np.vstack(y)


def _record(cfg, method, artifact: Path, data_hash, extra=None):
    mdir = models_dir(cfg)
    path = mdir / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {}
    files = sorted(p for p in mdir.glob(artifact.stem + "*") if p.is_file())
    manifest[method] = {"artifact": artifact.name, "dataset": data_hash,
                        "files": {p.name: sha256(p) for p in files}, **(extra or {})}
    _write_json(path, manifest)


def train_method(cfg, method: str, train_cfg=None, out_dir: Path | None = None) -> Path:
    """Fit one method on the current dataset and write its artifact."""
    if method not in METHODS:
        raise C.ConfigError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    data_hash = dataset_hash(cfg)
    mdir = out_dir or models_dir(cfg)
    mdir.mkdir(parents=True, exist_ok=True)
    intr = C.camera(cfg)
    if method == "reconstruct":
        r = cfg["reconstruct"]
        est = PointSourceReprojector(intr, C.optics(cfg).display_size, float(r["stride"]),
                                     float(r["radius"]))
        est.fit_luts(_load_luts(cfg))
        artifact = save_point_field(est.field_, mdir / "reconstruct.psf",
                                    {"stride": r["stride"], "radius": r["radius"]})
    elif method == "trilinear":
        ts = training_set(cfg)
        TrilinearInterpolator(intr, C.nominal_grid(cfg)).fit_maps(ts.poses, ts.maps)
        artifact = _write_json(mdir / "trilinear.json", {
            "maps": [f"train_{i:03d}" for i in range(len(ts.poses))],
            "grid": {"cube_edge": cfg["grid"]["cube_edge"],
                     "counts": list(C.grid_spec(cfg).counts)}})
    elif method == "gauss5d":
        X, y = _map_rows(training_set(cfg))
        g = cfg["gauss5d"]
        model = PoseKernelRegressor(int(g["n_centers"]), float(g["sigma"]), float(g["ridge"]),
                                    float(g["position_scale"]), g["max_samples"],
                                    random_state=int(cfg["seed"])).fit(X, y)
        artifact = save_pose_model(model, mdir / "gauss5d.kmodel")
    else:
        tcfg = train_cfg or C.train_config(cfg)
        model, trace = train_ndf(training_set(cfg), tcfg)
        artifact = model.save(mdir / "ndf.ckpt")
        with open(mdir / "ndf_loss.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["step", "loss"])
            w.writerows((s, repr(float(v))) for s, v in trace)
    if out_dir is None:
        _record(cfg, method, artifact, data_hash)
    return artifact


class MapSource:
    """Loads a trained artifact and produces maps at arbitrary poses."""

    def __init__(self, cfg, method, mdir: Path):
        self.method = method
        intr = C.camera(cfg)
        if method == "reconstruct":
            r = cfg["reconstruct"]
            est = PointSourceReprojector(intr, C.optics(cfg).display_size, float(r["stride"]),
                                         float(r["radius"]))
            est.field_ = load_point_field(mdir / "reconstruct.psf")
            self._predict = est.predict_map
        elif method == "trilinear":
            ts = training_set(cfg)
            est = TrilinearInterpolator(intr, C.nominal_grid(cfg)).fit_maps(ts.poses, ts.maps)
            self._predict = est.predict_map
        elif method == "gauss5d":
            model = load_pose_model(mdir / "gauss5d.kmodel")
            pix = pixel_centers(intr)

            def predict(pose):
                X = np.hstack([pix, np.broadcast_to(pose.as_array(), (len(pix), 6))])
                return DistortionMap.from_flat(model.predict(X), intr)
            self._predict = predict
        else:
            model = NdfModel.load(mdir / "ndf.ckpt")
            self._predict = model.synthesize_map

    def __call__(self, pose) -> DistortionMap:
        return self._predict(pose)


def _check_artifact(cfg, method, data_hash):
    manifest = _read_json(models_dir(cfg) / "manifest.json")
    entry = manifest.get(method)
    if entry is None:
        raise PrerequisiteError(f"no trained {method} model for {_tag(cfg)}; run train first")
    if entry["dataset"] != data_hash:
        raise PrerequisiteError(f"{method} was trained on a different dataset; retrain it")
    for name, digest in entry["files"].items():
        if sha256(models_dir(cfg) / name) != digest:
            raise PrerequisiteError(f"{method} artifact {name} changed since training")


def test_truth(cfg):
    _, _, tests = _load_poses(cfg)
    base = data_dir(cfg) / "gt_test"
    return tests, [read_map(base / f"test_{i:03d}") for i in range(len(tests))]


def evaluate_source(cfg, source, label):
    tests, truths = test_truth(cfg)
    pitch = angular_pitch(float(cfg["eval"]["display_hfov_deg"]), C.optics(cfg).display_width)
    return evaluate(label, int(cfg["grid"]["n_train"]), (source(p) for p in tests),
                    truths, tests, pitch)


def eval_methods(cfg, methods=None) -> Path:
    """Evaluate trained methods at the test poses and write all reports."""
    data_hash = dataset_hash(cfg)
    if methods is None:
        path = models_dir(cfg) / "manifest.json"
        trained = json.loads(path.read_text()) if path.exists() else {}
        methods = [m for m in METHODS if m in trained]
        if not methods:
            raise PrerequisiteError(f"no trained models for {_tag(cfg)}; run train first")
    out = _root(cfg) / "eval" / _tag(cfg)
    reports = {}
    for m in methods:
        _check_artifact(cfg, m, data_hash)
        reports[m] = evaluate_source(cfg, MapSource(cfg, m, models_dir(cfg)), m)
    write_reports(list(reports.values()), out)
    scale = float(cfg["eval"]["pgm_scale"])
    means = {m: r.mean_error_image() for m, r in reports.items()}
    for m, img in means.items():
        render_pgm(img, scale, out / "images" / pgm_name(f"{m}_mean_error", scale))
    summary = {"dataset": data_hash, "N": int(cfg["grid"]["n_train"]),
               "median_px": {m: r.median_px for m, r in reports.items()},
               "median_arcmin": {m: r.median_arcmin for m, r in reports.items()}}
    center = central_mask(C.camera(cfg).shape)
    for m, img in means.items():
        summary.setdefault("center_vs_periphery", {})[m] = {
            "center_mean_px": float(np.nanmean(img[center])),
            "periphery_mean_px": float(np.nanmean(img[~center]))}
    if "ndf" in reports and "gauss5d" in reports:
        diff, frac = compare_maps(means["ndf"], means["gauss5d"])
        render_pgm(np.abs(np.where(diff < 0, diff, 0)), scale,
                   out / "images" / pgm_name("ndf_better_by", scale))
        render_pgm(np.where(diff > 0, diff, 0), scale,
                   out / "images" / pgm_name("gauss5d_better_by", scale))
        summary["ndf_win_fraction"] = frac
        rows = viewpoint_error_scatter(reports["ndf"], reports["gauss5d"])
        summary["distance_correlation"] = {"ndf": distance_correlation(rows),
                                           "difference": distance_correlation(rows, "difference")}
        with open(out / "scatter.csv", "w", newline="") as f:
            w = csv.DictWriter(f, list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    order = [m for m in METHODS if m in reports]
    summary["ranking"] = sorted(order, key=lambda m: reports[m].median_px)
    _write_json(out / "summary.json", summary)
    return out


def ablate(cfg) -> Path:
    """Train and evaluate NDF for every combination of the ablation lists."""
    dataset_hash(cfg)
    abl = cfg["ablation"]
    out = _root(cfg) / "ablation" / _tag(cfg)
    rows = []
    for L, (coord_act, dens_act), iters in itertools.product(
            abl["n_freqs"], abl["activations"], abl["iterations"]):
        name = f"L{L}_{coord_act}_{dens_act}_{iters}"
        tcfg = C.train_config(cfg, n_freqs=int(L), coord_activation=coord_act,
                              density_activation=dens_act, iterations=int(iters))
        cell = out / name
        train_method(cfg, "ndf", tcfg, out_dir=cell)
        rep = evaluate_source(cfg, MapSource(cfg, "ndf", cell), f"ndf[{name}]")
        write_reports([rep], cell)
        rows.append({"n_freqs": int(L), "coord_activation": coord_act,
                     "density_activation": dens_act, "iterations": int(iters),
                     "median_px": rep.median_px, "median_arcmin": rep.median_arcmin})
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.csv", "w", newline="") as f:
        w = csv.DictWriter(f, list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    _write_json(out / "ablation.json", rows)
    return out
