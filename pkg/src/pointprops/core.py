"""Point-cloud container, spatial queries, and local patch extraction.

A patch is the set of cloud points within an absolute radius ``r`` of a
center point, translated so the center sits at the origin and scaled by
``1/r`` so every member has norm <= 1. Patches have a fixed slot count:
oversized neighborhoods are randomly subsampled (center always kept),
undersized ones are padded with zero vectors (the patch center).
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree


class PointCloud:
    """Immutable point set with optional per-point ground truth.

    Attributes:
        points: (N, 3) float64 positions in world units.
        gt_normals: (N, 3) unit normals or None.
        gt_curvatures: (N, 2) principal curvature pairs (k1 >= k2) or None.
        name: identifier used in file stems and reports.
    """

    def __init__(self, points, gt_normals=None, gt_curvatures=None, name=""):
        points = np.ascontiguousarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {points.shape}")
        self.points = points
        self.name = str(name)

        if gt_normals is not None:
            gt_normals = np.ascontiguousarray(gt_normals, dtype=np.float64)
            if gt_normals.shape != points.shape:
                raise ValueError("gt_normals length does not match points")
            norms = np.linalg.norm(gt_normals, axis=1)
            if norms.size and np.max(np.abs(norms - 1.0)) > 1e-6:
                raise ValueError("gt_normals entries must have unit norm (tol 1e-6)")
        self.gt_normals = gt_normals

        if gt_curvatures is not None:
            gt_curvatures = np.ascontiguousarray(gt_curvatures, dtype=np.float64)
            if gt_curvatures.shape != (len(points), 2):
                raise ValueError("gt_curvatures must be (N, 2)")
            if gt_curvatures.size and np.any(gt_curvatures[:, 0] < gt_curvatures[:, 1]):
                raise ValueError("gt_curvatures entries must satisfy k1 >= k2")
        self.gt_curvatures = gt_curvatures

        for arr in (self.points, self.gt_normals, self.gt_curvatures):
            if arr is not None:
                arr.flags.writeable = False

    def __len__(self):
        return len(self.points)

    def __repr__(self):
        extras = []
        if self.gt_normals is not None:
            extras.append("normals")
        if self.gt_curvatures is not None:
            extras.append("curvatures")
        tag = "+".join(extras) if extras else "positions only"
        return f"PointCloud({self.name!r}, n={len(self)}, {tag})"

    def with_points(self, points, name=None):
        """Copy with replaced positions; ground truth carried over unchanged."""
        return PointCloud(
            points,
            gt_normals=self.gt_normals,
            gt_curvatures=self.gt_curvatures,
            name=self.name if name is None else name,
        )

    def select(self, indices, name=None):
        """Subset cloud by index array; ground truth rows follow."""
        indices = np.asarray(indices, dtype=np.intp)
        return PointCloud(
            self.points[indices],
            gt_normals=None if self.gt_normals is None else self.gt_normals[indices],
            gt_curvatures=None
            if self.gt_curvatures is None
            else self.gt_curvatures[indices],
            name=self.name if name is None else name,
        )


@dataclass(frozen=True)
class Patch:
    """Normalized local neighborhood as fed to the estimator.

    points holds exactly n_points rows: the first valid_count rows are
    (p - center) / radius_abs, the rest are exact zeros. Row 0 is always
    the center itself (the zero vector).
    """

    center_index: int
    radius_abs: float
    points: np.ndarray
    valid_count: int
    source_indices: np.ndarray


class SpatialIndex:
    """Immutable k-d tree over a cloud's positions.

    Thin wrapper around scipy's cKDTree; queries recompute exact distances
    in float64 so results match a brute-force scan bit-for-bit, including
    on ties and boundary cases.
    """

    def __init__(self, cloud: PointCloud):
        if len(cloud) == 0:
            raise ValueError("empty cloud")
        self._points = cloud.points
        self._tree = cKDTree(cloud.points)
        self.n = len(cloud)

    def radius(self, center, r):
        """Indices of all points with ||p - center|| <= r, ascending."""
        if r <= 0:
            raise ValueError(f"radius must be positive, got {r}")
        center = np.asarray(center, dtype=np.float64)
        # Inflate then filter exactly, so k-d internals can't drop a point
        # sitting on the boundary by one ulp.
        cand = self._tree.query_ball_point(center, r * (1.0 + 1e-12) + 1e-300)
        cand = np.asarray(sorted(cand), dtype=np.intp)
        if cand.size == 0:
            return cand
        d = np.linalg.norm(self._points[cand] - center, axis=1)
        return cand[d <= r]

    def knn(self, center, k):
        """k nearest indices, by ascending distance then ascending index."""
        if not 1 <= k <= self.n:
            raise ValueError(f"k must be in [1, {self.n}], got {k}")
        center = np.asarray(center, dtype=np.float64)
        d, _ = self._tree.query(center, k=k)
        dmax = float(np.max(np.atleast_1d(d)))
        cand = np.asarray(
            self._tree.query_ball_point(center, dmax * (1.0 + 1e-12) + 1e-300),
            dtype=np.intp,
        )
        dist = np.linalg.norm(self._points[cand] - center, axis=1)
        order = np.lexsort((cand, dist))
        return cand[order[:k]]

    def knn_bulk(self, centers, k):
        """(Q, k) neighbor indices for many centers at once.

        Faster path without the per-query tie postprocessing of knn();
        tie order among exactly equidistant points is the k-d tree's.
        """
        if not 1 <= k <= self.n:
            raise ValueError(f"k must be in [1, {self.n}], got {k}")
        _, idx = self._tree.query(np.asarray(centers, dtype=np.float64), k=k)
        idx = np.atleast_1d(idx)
        if idx.ndim == 1:
            idx = idx[:, None]
        return idx.astype(np.intp)


def bbox_diagonal(cloud: PointCloud) -> float:
    """Length of the axis-aligned bounding-box diagonal.

    This is the reference length for every relative size in the package
    (patch radii, noise sigma).
    """
    if len(cloud) == 0:
        raise ValueError("empty cloud")
    extent = cloud.points.max(axis=0) - cloud.points.min(axis=0)
    return float(np.linalg.norm(extent))


def build_index(cloud: PointCloud) -> SpatialIndex:
    """Build the spatial index used by radius/k-NN queries."""
    return SpatialIndex(cloud)


def radius_query(index: SpatialIndex, center, r):
    return index.radius(center, r)


def knn_query(index: SpatialIndex, center, k):
    return index.knn(center, k)


def extract_patch(cloud, index, center_index, r, n_points, rng) -> Patch:
    """Extract the fixed-size normalized patch around one cloud point.

    Members are (p - center) / r for all points within distance r of the
    center. If more than n_points qualify, a uniformly random subset is
    kept with the center unconditionally retained; if fewer, the remaining
    slots stay zero. Same seed, same patch, bit for bit.
    """
    if not 0 <= center_index < len(cloud):
        raise ValueError(f"center index {center_index} out of range")
    if r <= 0:
        raise ValueError(f"patch radius must be positive, got {r}")
    if n_points < 1:
        raise ValueError(f"n_points must be >= 1, got {n_points}")

    center = cloud.points[center_index]
    members = index.radius(center, r)
    if len(members) > n_points:
        others = members[members != center_index]
        chosen = rng.choice(others, size=n_points - 1, replace=False)
        members = np.concatenate(([center_index], np.sort(chosen)))
    else:
        members = np.concatenate(
            ([center_index], members[members != center_index])
        )

    valid = len(members)
    pts = np.zeros((n_points, 3), dtype=np.float64)
    pts[:valid] = (cloud.points[members] - center) / r
    return Patch(
        center_index=int(center_index),
        radius_abs=float(r),
        points=pts,
        valid_count=valid,
        source_indices=members,
    )
