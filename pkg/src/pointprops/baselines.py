"""Classical estimators: PCA planes, osculating-jet fits, MST orientation.

The jet fit regresses a bivariate polynomial height field over the PCA
tangent plane and reads normal and principal curvature values off its
derivatives at the origin. Curvature signs use the convention that a
convex neighborhood (normal pointing away from the material) is positive;
the fitted frame is disambiguated by pointing it away from the local
centroid, which makes the curvature values rotation-invariant.
"""

import json
import os
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components, minimum_spanning_tree

from .core import PointCloud, build_index

SCALE_NEIGHBORS = {"small": 18, "medium": 112, "large": 450}


def pca_normal(neighbors):
    """Unoriented plane normal of a neighborhood.

    Smallest-eigenvalue eigenvector of the covariance, sign-canonicalized
    so the largest-magnitude component is positive. Raises for fewer than
    3 points or (near-)colinear input.
    """
    pts = np.asarray(neighbors, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 3:
        raise ValueError("degenerate neighborhood")
    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered
    w, v = np.linalg.eigh(cov)
    if w[1] <= 1e-12 * max(w[2], 1e-300):
        raise ValueError("degenerate neighborhood")
    normal = v[:, 0]
    pivot = np.argmax(np.abs(normal))
    if normal[pivot] < 0:
        normal = -normal
    return normal


def _tangent_frame(normal):
    helper = np.array([1.0, 0.0, 0.0]) if abs(normal[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(normal, helper)
    u /= np.linalg.norm(u)
    v = np.cross(normal, u)
    return u, v


def jet_fit(neighbors, degree=2):
    """Fit a degree-d osculating jet; returns (unit normal, k1, k2).

    The first entry of neighbors must be the query point. The height
    function over the tangent plane is solved by least squares (SVD);
    normal and Weingarten map are evaluated at the origin. Degree 1
    degenerates to a plane fit with zero curvature.
    """
    pts = np.asarray(neighbors, dtype=np.float64)
    n_coeff = (degree + 1) * (degree + 2) // 2
    if len(pts) < n_coeff:
        raise ValueError(
            f"need at least {n_coeff} neighbors for degree {degree}, got {len(pts)}"
        )
    query = pts[0]
    local = pts - query

    w_axis = pca_normal(local)
    # point the frame away from the local centroid so convex looks convex
    centroid = local.mean(axis=0)
    if w_axis @ centroid > 0:
        w_axis = -w_axis
    u_axis, v_axis = _tangent_frame(w_axis)

    u = local @ u_axis
    v = local @ v_axis
    h = local @ w_axis

    cols = []
    powers = []
    for total in range(degree + 1):
        for j in range(total + 1):
            i = total - j
            cols.append((u**i) * (v**j))
            powers.append((i, j))
    A = np.stack(cols, axis=1)
    coeffs, _, rank, _ = np.linalg.lstsq(A, h, rcond=None)
    if rank < n_coeff:
        raise ValueError("ill-conditioned fit")

    def coeff(i, j):
        try:
            return coeffs[powers.index((i, j))]
        except ValueError:
            return 0.0

    hu, hv = coeff(1, 0), coeff(0, 1)
    huu, huv, hvv = 2.0 * coeff(2, 0), coeff(1, 1), 2.0 * coeff(0, 2)

    normal_local = np.array([-hu, -hv, 1.0])
    normal_local /= np.linalg.norm(normal_local)
    normal = (
        normal_local[0] * u_axis + normal_local[1] * v_axis + normal_local[2] * w_axis
    )

    if degree < 2:
        return normal, 0.0, 0.0

    # Weingarten map of the graph with respect to the +w normal:
    # S = -I^{-1} II, principal curvature values are its eigenvalues.
    grad2 = 1.0 + hu * hu + hv * hv
    first = np.array([[1.0 + hu * hu, hu * hv], [hu * hv, 1.0 + hv * hv]])
    second = np.array([[huu, huv], [huv, hvv]]) / np.sqrt(grad2)
    shape_op = -np.linalg.solve(first, second)
    eig = np.linalg.eigvals(shape_op)
    eig = np.sort(np.real(eig))
    return normal, float(eig[1]), float(eig[0])


@dataclass
class OrientationResult:
    normals: np.ndarray
    flipped: np.ndarray
    edges: np.ndarray
    n_components: int


def mst_orient(cloud: PointCloud, normals, k=6) -> OrientationResult:
    """Propagate consistent normal signs along a minimum spanning tree.

    Builds the symmetric k-NN graph with edge weight 1 - |ni . nj| + 1e-8,
    takes its minimum spanning tree, seeds each connected component at its
    highest-z point oriented toward +z, and flips a child whenever its dot
    product with the parent's oriented normal is negative. Output normals
    equal +- the input normals exactly.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    normals = np.asarray(normals, dtype=np.float64)
    n = len(cloud)
    if normals.shape != (n, 3):
        raise ValueError("normals shape must match cloud")
    index = build_index(cloud)

    kq = min(k + 1, n)  # +1: self comes back as nearest
    neigh = index.knn_bulk(cloud.points, kq)
    rows = np.repeat(np.arange(n), kq)
    cols = neigh.reshape(-1)
    keep = rows != cols
    rows, cols = rows[keep], cols[keep]
    weights = 1.0 - np.abs(np.einsum("ij,ij->i", normals[rows], normals[cols])) + 1e-8
    graph = coo_matrix((weights, (rows, cols)), shape=(n, n)).tocsr()
    sym = graph.maximum(graph.T)

    n_comp, labels = connected_components(sym, directed=False)
    tree = minimum_spanning_tree(sym)
    tree_coo = tree.tocoo()

    adjacency = [[] for _ in range(n)]
    edges = np.stack([tree_coo.row, tree_coo.col], axis=1).astype(np.intp)
    for a, b in edges:
        adjacency[a].append(b)
        adjacency[b].append(a)
    for neigh in adjacency:
        neigh.sort()

    oriented = normals.copy()
    visited = np.zeros(n, dtype=bool)
    for comp in range(n_comp):
        members = np.where(labels == comp)[0]
        seed = members[np.argmax(cloud.points[members, 2])]
        if oriented[seed, 2] < 0:
            oriented[seed] = -oriented[seed]
        stack = [seed]
        visited[seed] = True
        while stack:
            parent = stack.pop()
            for child in adjacency[parent]:
                if visited[child]:
                    continue
                visited[child] = True
                if oriented[parent] @ oriented[child] < 0:
                    oriented[child] = -oriented[child]
                stack.append(child)

    flipped = np.any(oriented != normals, axis=1)
    return OrientationResult(oriented, flipped, edges, int(n_comp))


@dataclass
class BaselineResult:
    normals: np.ndarray  # (Q, 3), NaN rows for failed fits
    curvatures: np.ndarray  # (Q, 2) for jet, None for pca
    failures: list  # (query position, message) pairs
    method: str
    n_neighbors: int


def baseline_estimate(cloud: PointCloud, method, scale, query_indices,
                      degree=2) -> BaselineResult:
    """Run pca or jet at a named scale over the given query points.

    scale is one of small/medium/large (18/112/450 nearest neighbors) or
    an explicit neighbor count. Per-point failures are recorded and left
    as NaN rows rather than aborting the run.
    """
    if method not in ("pca", "jet"):
        raise ValueError(f"unknown baseline method {method!r}")
    k = SCALE_NEIGHBORS.get(scale, scale)
    if not isinstance(k, (int, np.integer)) or k < 3:
        raise ValueError(f"bad scale {scale!r}")
    if k > len(cloud):
        raise ValueError(f"scale needs {k} neighbors, cloud has {len(cloud)}")

    index = build_index(cloud)
    queries = np.asarray(query_indices, dtype=np.intp)
    normals = np.full((len(queries), 3), np.nan)
    curvatures = np.full((len(queries), 2), np.nan) if method == "jet" else None
    failures = []
    for pos, qi in enumerate(queries):
        neigh_idx = index.knn(cloud.points[qi], k)
        neigh = cloud.points[neigh_idx]
        try:
            if method == "pca":
                normals[pos] = pca_normal(neigh)
            else:
                nrm, k1, k2 = jet_fit(neigh, degree=degree)
                normals[pos] = nrm
                curvatures[pos] = (k1, k2)
        except ValueError as exc:
            failures.append((int(pos), str(exc)))
    return BaselineResult(normals, curvatures, failures, method, int(k))


def write_baseline_sidecar(path, result: BaselineResult, extra=None):
    """JSON sidecar recording method, scale, and failure count."""
    payload = {
        "method": result.method,
        "n_neighbors": result.n_neighbors,
        "n_queries": int(len(result.normals)),
        "n_failures": len(result.failures),
        "failed_queries": [pos for pos, _ in result.failures],
    }
    if extra:
        payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
