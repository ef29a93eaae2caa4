"""Analytically sampled surfaces with exact normals and curvature values.

Three kinds are supported:

    sphere    radius R, normals radial, k1 = k2 = 1/R
    cylinder  lateral surface of radius R and given height, axis +z,
              normals radial in the xy plane, k1 = 1/R, k2 = 0
    sheet     flat square of the given extent realized as two parallel
              layers separated by a small gap (a thin two-sided slab),
              normals +z on the upper and -z on the lower layer, k = 0

Curvature signs follow the outward-normal convention: convex regions seen
from outside are positive.
"""

from dataclasses import dataclass

import numpy as np

from .core import PointCloud

KINDS = ("sphere", "cylinder", "sheet")


@dataclass(frozen=True)
class AnalyticShape:
    kind: str
    radius: float = 1.0
    height: float = 4.0
    extent: float = 2.0
    gap_fraction: float = 0.02  # sheet layer separation relative to extent

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown analytic shape kind {self.kind!r}")
        if self.kind in ("sphere", "cylinder") and self.radius <= 0:
            raise ValueError(f"radius must be positive, got {self.radius}")
        if self.kind == "cylinder" and self.height <= 0:
            raise ValueError(f"height must be positive, got {self.height}")
        if self.kind == "sheet" and self.extent <= 0:
            raise ValueError(f"extent must be positive, got {self.extent}")

    @property
    def name(self):
        return self.kind


def analytic_shape(shape: AnalyticShape, n, rng) -> PointCloud:
    """Sample n area-uniform points with exact ground truth attached."""
    if n < 1:
        raise ValueError("need at least one sample")
    if shape.kind == "sphere":
        normals = rng.normal(size=(n, 3))
        norms = np.linalg.norm(normals, axis=1)
        while np.any(norms < 1e-12):  # astronomically rare; keep exactness
            bad = norms < 1e-12
            normals[bad] = rng.normal(size=(int(bad.sum()), 3))
            norms = np.linalg.norm(normals, axis=1)
        normals /= norms[:, None]
        points = normals * shape.radius
        k = 1.0 / shape.radius
        curv = np.full((n, 2), k)
    elif shape.kind == "cylinder":
        theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
        z = rng.uniform(-shape.height / 2.0, shape.height / 2.0, size=n)
        normals = np.stack([np.cos(theta), np.sin(theta), np.zeros(n)], axis=1)
        points = normals * shape.radius
        points[:, 2] = z
        curv = np.zeros((n, 2))
        curv[:, 0] = 1.0 / shape.radius
    else:  # sheet
        half = shape.extent / 2.0
        gap = shape.gap_fraction * shape.extent
        xy = rng.uniform(-half, half, size=(n, 2))
        upper = rng.random(n) < 0.5
        z = np.where(upper, gap / 2.0, -gap / 2.0)
        points = np.column_stack([xy, z])
        normals = np.zeros((n, 3))
        normals[:, 2] = np.where(upper, 1.0, -1.0)
        curv = np.zeros((n, 2))
    return PointCloud(points, gt_normals=normals, gt_curvatures=curv, name=shape.name)


def parse_analytic(spec: str) -> AnalyticShape:
    """Parse CLI shape specs like "sphere" or "cylinder:radius=2,height=4"."""
    kind, _, rest = spec.partition(":")
    kind = kind.strip()
    kwargs = {}
    if rest:
        for item in rest.split(","):
            key, _, value = item.partition("=")
            if not value:
                raise ValueError(f"bad analytic shape parameter {item!r}")
            key = key.strip()
            if key not in ("radius", "height", "extent", "gap_fraction"):
                raise ValueError(f"unknown analytic shape parameter {key!r}")
            kwargs[key] = float(value)
    return AnalyticShape(kind, **kwargs)
