"""Labeled dataset generation: noise and density variants, file layout.

Every relative magnitude (noise sigma, patch radii) is a fraction of the
clean cloud's bounding-box diagonal. Ground truth is never perturbed:
noise moves positions only, density variants drop points but keep the
survivors' attributes byte for byte.

Variant labels used in stems and in dataset.json:

    clean                              the base sampling
    noise_<level>                      Gaussian noise, e.g. noise_0.012
    density_gradient / density_stripes non-uniform subsampling
"""

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import io
from .core import PointCloud, bbox_diagonal
from .mesh import load_mesh, sample_mesh_uniform, vertex_curvatures, interpolate_curvatures
from .shapes import AnalyticShape, analytic_shape
from .util import derive_rng

NOISE_LEVELS_DEFAULT = (0.0025, 0.012, 0.024)
DENSITY_SCHEMES = ("gradient", "stripes")


def add_gaussian_noise(cloud: PointCloud, level, rng) -> PointCloud:
    """Perturb positions with iid Gaussian noise of sigma = level * bbox diagonal."""
    if level < 0:
        raise ValueError(f"noise level must be >= 0, got {level}")
    if level == 0:
        return cloud.with_points(cloud.points.copy())
    sigma = level * bbox_diagonal(cloud)
    noisy = cloud.points + rng.normal(0.0, sigma, size=cloud.points.shape)
    return cloud.with_points(noisy)


def principal_axis_coordinate(points):
    """Projection of each point onto the first principal axis of the cloud."""
    centered = points - points.mean(axis=0)
    cov = centered.T @ centered
    w, v = np.linalg.eigh(cov)
    axis = v[:, -1]
    pivot = np.argmax(np.abs(axis))
    if axis[pivot] < 0:  # deterministic sign
        axis = -axis
    return centered @ axis


def keep_probability(cloud: PointCloud, scheme):
    """Per-point survival probability of a density scheme.

    gradient: linear from 0.05 to 1.0 along the first principal axis.
    stripes:  8 equal bands along that axis, alternating 0.1 / 1.0
              (even-numbered bands sparse).
    """
    t = principal_axis_coordinate(cloud.points)
    tmin, tmax = t.min(), t.max()
    span = tmax - tmin
    frac = np.zeros_like(t) if span == 0 else (t - tmin) / span
    if scheme == "gradient":
        return 0.05 + 0.95 * frac
    if scheme == "stripes":
        band = np.minimum((frac * 8).astype(int), 7)
        return np.where(band % 2 == 0, 0.1, 1.0)
    raise ValueError(f"unknown density scheme {scheme!r}")


def density_variant(cloud: PointCloud, scheme, rng) -> PointCloud:
    """Keep each point with its scheme probability; gt rows follow survivors."""
    if len(cloud) == 0:
        raise ValueError("empty cloud")
    prob = keep_probability(cloud, scheme)
    keep = rng.random(len(cloud)) < prob
    return cloud.select(np.where(keep)[0])


@dataclass
class ShapeSpec:
    """One base shape to turn into dataset variants."""

    name: str
    mesh_path: str = None
    analytic: AnalyticShape = None

    def __post_init__(self):
        if (self.mesh_path is None) == (self.analytic is None):
            raise ValueError("exactly one of mesh_path/analytic required")


@dataclass
class DatasetConfig:
    n_points: int = 100_000
    noise_levels: tuple = NOISE_LEVELS_DEFAULT
    density_schemes: tuple = ()
    pidx_count: int = 0
    with_curvatures: bool = True
    seed: int = 0


def base_cloud_for(spec: ShapeSpec, cfg: DatasetConfig):
    """Sample the clean labeled cloud for a shape spec."""
    rng = derive_rng(cfg.seed, "sample", spec.name)
    if spec.analytic is not None:
        cloud = analytic_shape(spec.analytic, cfg.n_points, rng)
        return PointCloud(
            cloud.points,
            gt_normals=cloud.gt_normals,
            gt_curvatures=cloud.gt_curvatures if cfg.with_curvatures else None,
            name=spec.name,
        )
    mesh = load_mesh(spec.mesh_path)
    cloud, samples = sample_mesh_uniform(mesh, cfg.n_points, rng)
    curv = None
    if cfg.with_curvatures:
        vertex_curvatures(mesh)
        curv = interpolate_curvatures(mesh, samples)
    return PointCloud(cloud.points, gt_normals=cloud.gt_normals,
                      gt_curvatures=curv, name=spec.name)


def variant_label(kind, noise_level=None, scheme=None):
    if kind == "clean":
        return "clean"
    if kind == "noise":
        return f"noise_{noise_level:g}"
    if kind == "density":
        return f"density_{scheme}"
    raise ValueError(kind)


def _generate_one(spec: ShapeSpec, cfg: DatasetConfig, out_dir):
    """Generate all variants of one shape; returns manifest entries."""
    base = base_cloud_for(spec, cfg)
    variants = [("clean", base)]
    for level in cfg.noise_levels:
        rng = derive_rng(cfg.seed, "noise", spec.name, level)
        variants.append(
            (variant_label("noise", noise_level=level), add_gaussian_noise(base, level, rng))
        )
    for scheme in cfg.density_schemes:
        rng = derive_rng(cfg.seed, "density", spec.name, scheme)
        variants.append(
            (variant_label("density", scheme=scheme), density_variant(base, scheme, rng))
        )

    entries = []
    for label, cloud in variants:
        stem = f"{spec.name}_{label}"
        io.write_cloud(out_dir, stem, cloud)
        if cfg.pidx_count > 0:
            rng = derive_rng(cfg.seed, "pidx", stem)
            count = min(cfg.pidx_count, len(cloud))
            pidx = np.sort(rng.choice(len(cloud), size=count, replace=False))
            io.write_pidx(os.path.join(out_dir, stem + ".pidx"), pidx)
        entry = {
            "stem": stem,
            "base": spec.name,
            "variant": label,
            "n_points": int(len(cloud)),
            "noise_level": None,
            "density": None,
        }
        if label.startswith("noise_"):
            entry["noise_level"] = float(label.split("_", 1)[1])
        if label.startswith("density_"):
            entry["density"] = label.split("_", 1)[1]
        entries.append(entry)
    return entries


def generate_dataset(out_dir, shape_specs, cfg: DatasetConfig, jobs=1):
    """Generate the dataset directory; deterministic for a fixed seed.

    Shapes are independent work units; with jobs > 1 they are distributed
    over processes. Output bytes do not depend on jobs because every
    random stream is derived per (seed, purpose, shape).
    """
    os.makedirs(out_dir, exist_ok=True)
    if jobs > 1 and len(shape_specs) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_generate_one, shape_specs,
                                    [cfg] * len(shape_specs),
                                    [out_dir] * len(shape_specs)))
    else:
        results = [_generate_one(spec, cfg, out_dir) for spec in shape_specs]

    entries = [e for chunk in results for e in chunk]
    stems = [e["stem"] for e in entries]
    io.write_manifest(out_dir, stems)
    io.write_dataset_json(
        out_dir,
        {
            "seed": cfg.seed,
            "n_points": cfg.n_points,
            "noise_levels": list(cfg.noise_levels),
            "density_schemes": list(cfg.density_schemes),
            "pidx_count": cfg.pidx_count,
            "shapes": entries,
        },
    )
    return stems


def read_dataset(directory, stems=None, normals="auto", curvatures="auto"):
    """Load dataset clouds by stem; unknown stems are an error."""
    manifest = io.read_manifest(directory)
    if stems is None:
        stems = manifest
    else:
        unknown = sorted(set(stems) - set(manifest))
        if unknown:
            raise ValueError(f"stems not in manifest: {', '.join(unknown)}")
    return {
        stem: io.read_cloud(directory, stem, normals=normals, curvatures=curvatures)
        for stem in stems
    }
