"""Triangle meshes: loading, surface sampling, and per-vertex curvature.

Curvature follows the normal-difference scheme: each face's second
fundamental form is fit by least squares to the change of the vertex
normals along the three edges, expressed in an orthonormal face frame;
the per-face forms are then rotated into per-vertex tangent frames and
accumulated with mixed Voronoi corner areas. Eigenvalues of the
accumulated 2x2 form are the principal curvature values (k1 >= k2,
positive on a convex region with outward normals).
"""

import os
import warnings
from dataclasses import dataclass

import numpy as np

from .core import PointCloud
from .util import FLOAT_FMT


@dataclass(frozen=True)
class SampleProvenance:
    """Where a surface sample came from: face index + barycentric coords."""

    face_index: int
    barycentric: tuple


class MeshSamples:
    """Provenance for a batch of surface samples (arrays, list-like access)."""

    def __init__(self, face_index, barycentric):
        self.face_index = np.asarray(face_index, dtype=np.intp)
        self.barycentric = np.asarray(barycentric, dtype=np.float64)

    def __len__(self):
        return len(self.face_index)

    def __getitem__(self, i):
        return SampleProvenance(int(self.face_index[i]), tuple(self.barycentric[i]))


class TriMesh:
    """Indexed triangle mesh with cached derived quantities."""

    def __init__(self, vertices, faces, name=""):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(faces, dtype=np.intp)
        self.name = str(name)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ValueError("vertices must be (V, 3)")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ValueError("faces must be (F, 3)")
        if len(self.faces) and (
            self.faces.min() < 0 or self.faces.max() >= len(self.vertices)
        ):
            raise ValueError("face index out of range")
        self._face_normals = None
        self._face_areas = None
        self._vertex_normals = None
        self.vertex_curvatures = None

    def __repr__(self):
        return f"TriMesh({self.name!r}, v={len(self.vertices)}, f={len(self.faces)})"

    @property
    def face_cross(self):
        v = self.vertices[self.faces]
        return np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])

    @property
    def face_areas(self):
        if self._face_areas is None:
            self._face_areas = 0.5 * np.linalg.norm(self.face_cross, axis=1)
        return self._face_areas

    @property
    def face_normals(self):
        if self._face_normals is None:
            cross = self.face_cross
            norms = np.linalg.norm(cross, axis=1)
            safe = np.where(norms > 0, norms, 1.0)
            self._face_normals = cross / safe[:, None]
        return self._face_normals

    @property
    def vertex_normals(self):
        """Area-weighted average of incident face normals, unit length."""
        if self._vertex_normals is None:
            acc = np.zeros_like(self.vertices)
            cross = self.face_cross  # magnitude 2*area: area weighting for free
            for k in range(3):
                np.add.at(acc, self.faces[:, k], cross)
            norms = np.linalg.norm(acc, axis=1)
            lonely = norms == 0
            if np.any(lonely):
                warnings.warn(
                    f"{int(lonely.sum())} vertices without incident faces; "
                    "their normals are undefined (set to +z)"
                )
                acc[lonely] = (0.0, 0.0, 1.0)
                norms[lonely] = 1.0
            self._vertex_normals = acc / norms[:, None]
        return self._vertex_normals


def _parse_obj(path):
    vertices = []
    faces = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise ValueError(f"{path}:{lineno}: vertex needs 3 coordinates")
                try:
                    vertices.append([float(x) for x in parts[1:4]])
                except ValueError:
                    raise ValueError(f"{path}:{lineno}: bad vertex coordinate") from None
            elif tag == "f":
                idx = []
                for token in parts[1:]:
                    field = token.split("/")[0]
                    try:
                        i = int(field)
                    except ValueError:
                        raise ValueError(
                            f"{path}:{lineno}: bad face index {field!r}"
                        ) from None
                    if i == 0:
                        raise ValueError(
                            f"{path}:{lineno}: face index 0 (format is 1-based)"
                        )
                    if i < 0:
                        raise ValueError(
                            f"{path}:{lineno}: negative face indices not supported"
                        )
                    idx.append(i - 1)
                if len(idx) < 3:
                    raise ValueError(f"{path}:{lineno}: face needs >= 3 vertices")
                for k in range(1, len(idx) - 1):  # fan split for quads and beyond
                    faces.append([idx[0], idx[k], idx[k + 1]])
            # everything else (vn, vt, o, g, s, usemtl, mtllib) is ignored
    nv = len(vertices)
    for tri in faces:
        if max(tri) >= nv:
            raise ValueError(f"{path}: face index {max(tri) + 1} exceeds {nv} vertices")
    return np.asarray(vertices, dtype=np.float64), np.asarray(faces, dtype=np.intp)


def _parse_ply(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValueError(f"{path}:1: not a PLY file")
    elements = []  # (name, count, properties)
    cursor = 1
    fmt_seen = False
    while cursor < len(lines):
        parts = lines[cursor].split()
        cursor += 1
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            if parts[1:3] != ["ascii", "1.0"]:
                raise ValueError(f"{path}:{cursor}: only ascii 1.0 PLY is supported")
            fmt_seen = True
        elif parts[0] == "element":
            elements.append([parts[1], int(parts[2]), []])
        elif parts[0] == "property":
            if not elements:
                raise ValueError(f"{path}:{cursor}: property before element")
            elements[-1][2].append(parts[1:])
        elif parts[0] == "end_header":
            break
        else:
            raise ValueError(f"{path}:{cursor}: unexpected header line {parts[0]!r}")
    else:
        raise ValueError(f"{path}: missing end_header")
    if not fmt_seen:
        raise ValueError(f"{path}: missing format line")

    vertices = np.zeros((0, 3))
    faces = []
    for name, count, props in elements:
        block = lines[cursor : cursor + count]
        if len(block) < count:
            raise ValueError(f"{path}: truncated element {name!r}")
        if name == "vertex":
            names = [p[-1] for p in props]
            try:
                cols = [names.index(c) for c in ("x", "y", "z")]
            except ValueError:
                raise ValueError(f"{path}: vertex element lacks x/y/z") from None
            try:
                rows = [[float(v) for v in ln.split()] for ln in block]
                vertices = np.asarray(rows, dtype=np.float64)[:, cols]
            except (ValueError, IndexError):
                raise ValueError(
                    f"{path}: malformed vertex data near line {cursor + 1}"
                ) from None
        elif name == "face":
            for off, ln in enumerate(block):
                parts = ln.split()
                try:
                    n = int(parts[0])
                    idx = [int(v) for v in parts[1 : 1 + n]]
                except (ValueError, IndexError):
                    raise ValueError(
                        f"{path}:{cursor + off + 1}: malformed face line"
                    ) from None
                if len(idx) != n or n < 3:
                    raise ValueError(
                        f"{path}:{cursor + off + 1}: face needs >= 3 indices"
                    )
                for k in range(1, n - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
        cursor += count

    faces = np.asarray(faces, dtype=np.intp).reshape(-1, 3)
    if faces.size and (faces.min() < 0 or faces.max() >= len(vertices)):
        raise ValueError(f"{path}: face index out of range")
    return vertices, faces


def load_mesh(path) -> TriMesh:
    """Load an ASCII OBJ or ASCII PLY mesh; quads are fan-triangulated."""
    ext = os.path.splitext(path)[1].lower()
    if ext == ".obj":
        vertices, faces = _parse_obj(path)
    elif ext == ".ply":
        vertices, faces = _parse_ply(path)
    else:
        raise ValueError(f"unsupported mesh format {ext!r} (use .obj or .ply)")
    name = os.path.splitext(os.path.basename(path))[0]
    return TriMesh(vertices, faces, name=name)


def save_obj(mesh: TriMesh, path):
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write("v " + " ".join(FLOAT_FMT % x for x in v) + "\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def sample_mesh_uniform(mesh: TriMesh, n, rng):
    """Uniform area-weighted surface sampling.

    Faces are chosen with probability proportional to area; inside a face
    the square-root barycentric transform gives a uniform point. Samples
    carry the normal of their face; curvature (when the mesh has vertex
    curvatures) is interpolated separately via interpolate_curvature.

    Returns (PointCloud, MeshSamples).
    """
    if n < 1:
        raise ValueError("need at least one sample")
    areas = mesh.face_areas
    usable = areas > 0
    if not np.any(usable):
        raise ValueError("mesh has no non-degenerate faces")
    weights = np.where(usable, areas, 0.0)
    cum = np.cumsum(weights)
    picks = rng.random(n) * cum[-1]
    face_idx = np.searchsorted(cum, picks)
    face_idx = np.minimum(face_idx, len(weights) - 1)

    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    bary = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)

    tri = mesh.vertices[mesh.faces[face_idx]]
    points = np.einsum("nk,nkd->nd", bary, tri)
    normals = mesh.face_normals[face_idx]

    cloud = PointCloud(points, gt_normals=normals, name=mesh.name)
    return cloud, MeshSamples(face_idx, bary)


def _rotate_frame_pairs(u, v, target_n):
    """Rotate orthonormal pairs (u, v) so their normal aligns with target_n.

    Rodrigues rotation about n x target_n, vectorized over rows. Near
    antiparallel frames fall back to a 180 degree turn about u.
    """
    n = np.cross(u, v)
    c = np.einsum("ij,ij->i", n, target_n)
    axis = np.cross(n, target_n)
    s = np.linalg.norm(axis, axis=1)

    out_u = u.copy()
    out_v = v.copy()
    ok = s > 1e-12
    if np.any(ok):
        a = axis[ok] / s[ok][:, None]
        cc = c[ok][:, None]
        ss = s[ok][:, None]
        for src, dst in ((u, out_u), (v, out_v)):
            x = src[ok]
            dst[ok] = (
                x * cc
                + np.cross(a, x) * ss
                + a * (np.einsum("ij,ij->i", a, x)[:, None]) * (1.0 - cc)
            )
    flip = (~ok) & (c < 0)
    if np.any(flip):
        # antiparallel: rotate 180 degrees about u
        out_v[flip] = -v[flip]
    return out_u, out_v


def _project_form(old_u, old_v, form, new_u, new_v):
    """Re-express 2x2 symmetric forms (e, f, g rows) in rotated frames."""
    old_n = np.cross(old_u, old_v)
    r_u, r_v = _rotate_frame_pairs(new_u, new_v, old_n)
    u1 = np.einsum("ij,ij->i", r_u, old_u)
    v1 = np.einsum("ij,ij->i", r_u, old_v)
    u2 = np.einsum("ij,ij->i", r_v, old_u)
    v2 = np.einsum("ij,ij->i", r_v, old_v)
    e, f, g = form[:, 0], form[:, 1], form[:, 2]
    new_e = e * u1 * u1 + 2.0 * f * u1 * v1 + g * v1 * v1
    new_f = e * u1 * u2 + f * (u1 * v2 + u2 * v1) + g * v1 * v2
    new_g = e * u2 * u2 + 2.0 * f * u2 * v2 + g * v2 * v2
    return np.stack([new_e, new_f, new_g], axis=1)


def _corner_voronoi_areas(mesh: TriMesh):
    """Mixed Voronoi area of each face corner (F, 3); rows sum to face area."""
    v = mesh.vertices[mesh.faces]
    areas = mesh.face_areas
    corners = np.zeros((len(mesh.faces), 3))
    # edge vectors opposite each corner: e_i = v_{i+2} - v_{i+1}
    e = np.stack([v[:, (k + 2) % 3] - v[:, (k + 1) % 3] for k in range(3)], axis=1)
    l2 = np.einsum("fkd,fkd->fk", e, e)
    # cotangent at corner k = dot of adjacent edges / (2 * area)
    cots = np.zeros_like(l2)
    for k in range(3):
        a = v[:, (k + 1) % 3] - v[:, k]
        b = v[:, (k + 2) % 3] - v[:, k]
        cross = np.linalg.norm(np.cross(a, b), axis=1)
        cross = np.where(cross > 0, cross, 1.0)
        cots[:, k] = np.einsum("fd,fd->f", a, b) / cross
    obtuse = cots < 0
    any_obtuse = obtuse.any(axis=1)
    # non-obtuse: Voronoi corner area = (|e_j|^2 cot_j + |e_k|^2 cot_k) / 8
    for k in range(3):
        j1, j2 = (k + 1) % 3, (k + 2) % 3
        corners[:, k] = (l2[:, j1] * cots[:, j1] + l2[:, j2] * cots[:, j2]) / 8.0
    # obtuse triangles: half the area at the obtuse corner, quarter elsewhere
    if np.any(any_obtuse):
        rows = np.where(any_obtuse)[0]
        which = obtuse[rows].argmax(axis=1)
        for k in range(3):
            sel = rows
            corners[sel, k] = np.where(
                which == k, areas[sel] / 2.0, areas[sel] / 4.0
            )
    return corners


def angle_weighted_normals(mesh: TriMesh):
    """Vertex normals as corner-angle-weighted face normal averages.

    Noticeably more accurate than area weighting on irregular meshes;
    used inside the curvature estimator, where normal tilt is the
    dominant error source.
    """
    acc = np.zeros_like(mesh.vertices)
    v = mesh.vertices[mesh.faces]
    fn = mesh.face_normals
    for k in range(3):
        a = v[:, (k + 1) % 3] - v[:, k]
        b = v[:, (k + 2) % 3] - v[:, k]
        denom = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
        cosang = np.einsum("fd,fd->f", a, b) / np.maximum(denom, 1e-300)
        angles = np.arccos(np.clip(cosang, -1.0, 1.0))
        np.add.at(acc, mesh.faces[:, k], fn * angles[:, None])
    norms = np.linalg.norm(acc, axis=1)
    lonely = norms == 0
    if np.any(lonely):
        acc[lonely] = (0.0, 0.0, 1.0)
        norms[lonely] = 1.0
    return acc / norms[:, None]


def _vertex_tangent_frames(normals):
    """Arbitrary orthonormal (u, v) per unit normal."""
    n = normals
    helper = np.where(
        (np.abs(n[:, 0]) < 0.9)[:, None],
        np.tile((1.0, 0.0, 0.0), (len(n), 1)),
        np.tile((0.0, 1.0, 0.0), (len(n), 1)),
    )
    u = np.cross(n, helper)
    u /= np.linalg.norm(u, axis=1)[:, None]
    v = np.cross(n, u)
    return u, v


def vertex_curvatures(mesh: TriMesh):
    """Per-vertex principal curvature values (V, 2), k1 >= k2.

    Stores the result on the mesh (mesh.vertex_curvatures) and returns it.
    Vertices without incident faces get (0, 0) and a warning. Internally
    uses angle-weighted normals; the estimate's accuracy is limited by
    normal tilt, and angle weighting keeps sphere errors within a few
    percent where area weighting does not.
    """
    vn = angle_weighted_normals(mesh)
    verts = mesh.vertices
    faces = mesh.faces
    tri = verts[faces]
    nrm = vn[faces]

    # orthonormal face frame
    e0 = tri[:, 2] - tri[:, 1]
    e1 = tri[:, 0] - tri[:, 2]
    e2 = tri[:, 1] - tri[:, 0]
    fu = e0 / np.maximum(np.linalg.norm(e0, axis=1), 1e-300)[:, None]
    fn = np.cross(e0, e1)
    fn /= np.maximum(np.linalg.norm(fn, axis=1), 1e-300)[:, None]
    fv = np.cross(fn, fu)

    # least squares for the face form from normal differences along edges
    edges = np.stack([e0, e1, e2], axis=1)  # (F, 3edges, 3)
    dn = np.stack(
        [nrm[:, 2] - nrm[:, 1], nrm[:, 0] - nrm[:, 2], nrm[:, 1] - nrm[:, 0]], axis=1
    )
    eu = np.einsum("fkd,fd->fk", edges, fu)
    ev = np.einsum("fkd,fd->fk", edges, fv)
    du = np.einsum("fkd,fd->fk", dn, fu)
    dv = np.einsum("fkd,fd->fk", dn, fv)

    nf = len(faces)
    A = np.zeros((nf, 6, 3))
    rhs = np.zeros((nf, 6))
    A[:, 0:3, 0] = eu
    A[:, 0:3, 1] = ev
    A[:, 3:6, 1] = eu
    A[:, 3:6, 2] = ev
    rhs[:, 0:3] = du
    rhs[:, 3:6] = dv
    # normal equations per face (3x3, well conditioned for non-degenerate faces)
    ata = np.einsum("fki,fkj->fij", A, A)
    atb = np.einsum("fki,fk->fi", A, rhs)
    ata += 1e-12 * np.eye(3)
    face_form = np.linalg.solve(ata, atb[..., None])[..., 0]  # (F, 3): (e, f, g)

    vu, vv = _vertex_tangent_frames(vn)
    weights = _corner_voronoi_areas(mesh)

    acc = np.zeros((len(verts), 3))
    wsum = np.zeros(len(verts))
    for k in range(3):
        vid = faces[:, k]
        proj = _project_form(fu, fv, face_form, vu[vid], vv[vid])
        np.add.at(acc, vid, proj * weights[:, k][:, None])
        np.add.at(wsum, vid, weights[:, k])

    lonely = wsum == 0
    if np.any(lonely):
        warnings.warn(
            f"{int(lonely.sum())} vertices without incident faces; curvature set to 0"
        )
        wsum[lonely] = 1.0
    acc /= wsum[:, None]

    e, f, g = acc[:, 0], acc[:, 1], acc[:, 2]
    mean = 0.5 * (e + g)
    spread = np.sqrt(np.maximum(0.25 * (e - g) ** 2 + f**2, 0.0))
    k1 = mean + spread
    k2 = mean - spread
    result = np.stack([k1, k2], axis=1)
    result[lonely] = 0.0
    mesh.vertex_curvatures = result
    return result


def interpolate_curvature(mesh: TriMesh, prov):
    """Barycentric interpolation of vertex curvatures at one sample.

    k1 and k2 interpolate independently; the result is re-sorted so
    k1 >= k2. Accepts a SampleProvenance.
    """
    if mesh.vertex_curvatures is None:
        raise ValueError("vertex curvatures not computed; call vertex_curvatures()")
    kv = mesh.vertex_curvatures[mesh.faces[prov.face_index]]
    b = np.asarray(prov.barycentric, dtype=np.float64)
    k1, k2 = b @ kv[:, 0], b @ kv[:, 1]
    return (float(max(k1, k2)), float(min(k1, k2)))


def interpolate_curvatures(mesh: TriMesh, samples: MeshSamples):
    """Vectorized interpolation for a sample batch; returns (n, 2)."""
    if mesh.vertex_curvatures is None:
        raise ValueError("vertex curvatures not computed; call vertex_curvatures()")
    kv = mesh.vertex_curvatures[mesh.faces[samples.face_index]]  # (n, 3, 2)
    interp = np.einsum("nk,nkc->nc", samples.barycentric, kv)
    k1 = np.maximum(interp[:, 0], interp[:, 1])
    k2 = np.minimum(interp[:, 0], interp[:, 1])
    return np.stack([k1, k2], axis=1)
