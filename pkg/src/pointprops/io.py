"""Readers and writers for the cloud text formats and dataset manifests.

A cloud is stored as a family of files sharing one stem:

    <stem>.xyz       one point per line, three floats
    <stem>.normals   three floats per line (unit ground-truth normals)
    <stem>.curv      two floats per line (k1 k2, k1 >= k2)
    <stem>.pidx      one integer per line (a test-split subset of indices)

Writers emit 8 significant digits; companion files are only written when
the cloud carries the matching attribute. A dataset directory additionally
holds ``manifest.txt`` (one stem per line) and ``dataset.json`` (per-stem
provenance: base shape, variant, noise level, density scheme).
"""

import json
import os

import numpy as np

from .core import PointCloud
from .util import FLOAT_FMT

MANIFEST_NAME = "manifest.txt"
DATASET_JSON = "dataset.json"


def _load_matrix(path, ncols, kind):
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing {kind} file: {path}")
    try:
        data = np.loadtxt(path, dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise ValueError(f"malformed {kind} file {path}: {exc}") from exc
    if data.size == 0:
        return np.zeros((0, ncols), dtype=np.float64)
    if data.shape[1] != ncols:
        raise ValueError(
            f"{kind} file {path} has {data.shape[1]} columns, expected {ncols}"
        )
    return data


def read_xyz(path):
    return _load_matrix(path, 3, "point")


def write_xyz(path, points):
    np.savetxt(path, np.asarray(points, dtype=np.float64), fmt=FLOAT_FMT)


def read_normals(path):
    return _load_matrix(path, 3, "normal")


def write_normals(path, normals):
    np.savetxt(path, np.asarray(normals, dtype=np.float64), fmt=FLOAT_FMT)


def read_curvatures(path):
    return _load_matrix(path, 2, "curvature")


def write_curvatures(path, curv):
    np.savetxt(path, np.asarray(curv, dtype=np.float64), fmt=FLOAT_FMT)


def read_pidx(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing index file: {path}")
    data = np.loadtxt(path, dtype=np.int64, ndmin=1)
    return data.astype(np.intp)


def write_pidx(path, indices):
    np.savetxt(path, np.asarray(indices, dtype=np.int64)[:, None], fmt="%d")


def write_cloud(directory, stem, cloud: PointCloud):
    """Write <stem>.xyz plus whatever companion files the cloud supports."""
    os.makedirs(directory, exist_ok=True)
    write_xyz(os.path.join(directory, stem + ".xyz"), cloud.points)
    if cloud.gt_normals is not None:
        write_normals(os.path.join(directory, stem + ".normals"), cloud.gt_normals)
    if cloud.gt_curvatures is not None:
        write_curvatures(os.path.join(directory, stem + ".curv"), cloud.gt_curvatures)


def read_cloud(directory, stem, normals="auto", curvatures="auto") -> PointCloud:
    """Read a cloud by stem.

    normals/curvatures accept "auto" (attach when the companion file
    exists), True (required; missing file is an error naming the file) or
    False (skip).
    """
    xyz_path = os.path.join(directory, stem + ".xyz")
    if not os.path.exists(xyz_path):
        raise FileNotFoundError(f"missing point file: {xyz_path}")
    points = read_xyz(xyz_path)

    def companion(flag, suffix, reader):
        path = os.path.join(directory, stem + suffix)
        if flag is True:
            return reader(path)
        if flag == "auto" and os.path.exists(path):
            return reader(path)
        return None

    gt_n = companion(normals, ".normals", read_normals)
    gt_c = companion(curvatures, ".curv", read_curvatures)
    for arr, what in ((gt_n, "normals"), (gt_c, "curvatures")):
        if arr is not None and len(arr) != len(points):
            raise ValueError(
                f"{what} for {stem} has {len(arr)} rows, cloud has {len(points)}"
            )
    return PointCloud(points, gt_normals=gt_n, gt_curvatures=gt_c, name=stem)


def read_cloud_pidx(directory, stem):
    """The stem's test-split indices, or None when no .pidx file exists."""
    path = os.path.join(directory, stem + ".pidx")
    if not os.path.exists(path):
        return None
    return read_pidx(path)


def write_manifest(directory, stems):
    with open(os.path.join(directory, MANIFEST_NAME), "w") as fh:
        for stem in stems:
            fh.write(stem + "\n")


def read_manifest(directory):
    path = os.path.join(directory, MANIFEST_NAME)
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing manifest: {path}")
    with open(path) as fh:
        stems = [line.strip() for line in fh if line.strip()]
    for stem in stems:
        if not os.path.exists(os.path.join(directory, stem + ".xyz")):
            raise FileNotFoundError(
                f"manifest entry {stem!r} has no {stem}.xyz in {directory}"
            )
    return stems


def write_dataset_json(directory, info):
    with open(os.path.join(directory, DATASET_JSON), "w") as fh:
        json.dump(info, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_dataset_json(directory):
    path = os.path.join(directory, DATASET_JSON)
    if not os.path.exists(path):
        return None
    with open(path) as fh:
        return json.load(fh)
