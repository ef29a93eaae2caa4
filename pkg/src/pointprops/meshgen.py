"""Procedural triangle meshes for the bundled shape corpus and tests.

Eight shapes ship with the package: four machine-made primitives (cube,
box, capped cylinder, hexagonal prism) and four smooth/organic stand-ins
(icosphere, torus, perturbed blob, ellipsoid). Everything is generated,
so the data carries no third-party license baggage.
"""

import os

import numpy as np

from .mesh import TriMesh, save_obj

BUNDLED_NAMES = (
    "cube",
    "box",
    "cylinder",
    "prism",
    "icosphere",
    "torus",
    "blob",
    "ellipsoid",
)


def _grid_faces(nu, nv, wrap_u=False, offset=0, flip=False):
    """Triangulate an (nu x nv) vertex grid into quads split along one diagonal."""
    faces = []
    last_u = nu if wrap_u else nu - 1
    for i in range(last_u):
        i2 = (i + 1) % nu
        for j in range(nv - 1):
            a = offset + i * nv + j
            b = offset + i2 * nv + j
            faces.append([a, b, b + 1])
            faces.append([a, b + 1, a + 1])
    faces = np.asarray(faces, dtype=np.intp)
    if flip:
        faces = faces[:, ::-1]
    return faces


def cube(side=2.0, divisions=8):
    return box((side, side, side), divisions)


def box(dims=(2.0, 1.0, 0.5), divisions=8):
    """Axis-aligned box with each face an n x n grid; seam vertices welded.

    Grid coordinates land on an exact lattice, so welding by equality is
    safe for power-of-two division counts.
    """
    dx, dy, dz = (float(d) / 2.0 for d in dims)
    m = divisions
    ticks = {ax: np.linspace(-h, h, m + 1) for ax, h in (("x", dx), ("y", dy), ("z", dz))}

    verts = []
    faces = []

    def add_face(const_axis, const_val, axis_a, axis_b, flip):
        base = len(verts)
        ta, tb = ticks[axis_a], ticks[axis_b]
        order = "xyz"
        for a in ta:
            for b in tb:
                coord = dict(zip((const_axis, axis_a, axis_b), (const_val, a, b)))
                verts.append([coord[c] for c in order])
        faces.append(_grid_faces(m + 1, m + 1, offset=base, flip=flip))

    add_face("x", +dx, "y", "z", flip=False)
    add_face("x", -dx, "y", "z", flip=True)
    add_face("y", +dy, "x", "z", flip=True)
    add_face("y", -dy, "x", "z", flip=False)
    add_face("z", +dz, "x", "y", flip=False)
    add_face("z", -dz, "x", "y", flip=True)

    verts = np.asarray(verts)
    faces = np.concatenate(faces)
    # weld duplicated seam vertices (exact equality on the lattice)
    uniq, inverse = np.unique(verts, axis=0, return_inverse=True)
    faces = inverse[faces]
    name = "cube" if len(set(dims)) == 1 else "box"
    return TriMesh(uniq, faces, name=name)


def cylinder_mesh(radius=1.0, height=2.0, n_around=48, n_along=12, caps=True):
    """Capped (or open) cylinder with axis +z, centered at the origin."""
    theta = 2.0 * np.pi * np.arange(n_around) / n_around
    zs = np.linspace(-height / 2.0, height / 2.0, n_along + 1)
    ring = np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1)
    verts = []
    for t in range(n_around):
        for z in zs:
            verts.append([ring[t, 0], ring[t, 1], z])
    faces = [_grid_faces(n_around, n_along + 1, wrap_u=True, flip=False)]
    verts = list(np.asarray(verts))
    if caps:
        for z, flip in ((zs[-1], False), (zs[0], True)):
            center = len(verts)
            verts.append([0.0, 0.0, z])
            rim = [t * (n_along + 1) + (n_along if z > 0 else 0) for t in range(n_around)]
            cap = []
            for t in range(n_around):
                a, b = rim[t], rim[(t + 1) % n_around]
                cap.append([center, a, b] if not flip else [center, b, a])
            faces.append(np.asarray(cap, dtype=np.intp))
    return TriMesh(np.asarray(verts), np.concatenate(faces), name="cylinder")


def prism(n_sides=6, radius=1.0, height=2.0, n_along=8):
    """Regular prism (flat sides), capped with triangle fans."""
    mesh = cylinder_mesh(radius, height, n_around=n_sides, n_along=n_along, caps=True)
    return TriMesh(mesh.vertices, mesh.faces, name="prism")


def icosphere(subdivisions=3, radius=1.0):
    """Icosahedron subdivided with midpoint projection onto the sphere."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.asarray(
        [
            (-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
            (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
            (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1),
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1)[:, None]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = list(verts)
    for _ in range(subdivisions):
        cache = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                m /= np.linalg.norm(m)
                cache[key] = len(verts)
                verts.append(m)
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    verts = np.asarray(verts) * radius
    return TriMesh(verts, np.asarray(faces, dtype=np.intp), name="icosphere")


def ellipsoid(radii=(1.3, 1.0, 0.7), subdivisions=3):
    base = icosphere(subdivisions, radius=1.0)
    verts = base.vertices * np.asarray(radii, dtype=np.float64)
    return TriMesh(verts, base.faces, name="ellipsoid")


def blob(subdivisions=3, amplitude=0.18):
    """Icosphere with a smooth radial perturbation; stays star-shaped."""
    base = icosphere(subdivisions, radius=1.0)
    v = base.vertices
    theta = np.arccos(np.clip(v[:, 2], -1.0, 1.0))
    phi = np.arctan2(v[:, 1], v[:, 0])
    r = 1.0 + amplitude * np.sin(3.0 * theta) * np.cos(2.0 * phi)
    return TriMesh(v * r[:, None], base.faces, name="blob")


def torus(major=1.0, minor=0.4, n_major=36, n_minor=24):
    u = 2.0 * np.pi * np.arange(n_major) / n_major
    v = 2.0 * np.pi * np.arange(n_minor) / n_minor
    verts = []
    for uu in u:
        for vv in v:
            x = (major + minor * np.cos(vv)) * np.cos(uu)
            y = (major + minor * np.cos(vv)) * np.sin(uu)
            z = minor * np.sin(vv)
            verts.append([x, y, z])
    # wrap in both directions
    faces = []
    for i in range(n_major):
        i2 = (i + 1) % n_major
        for j in range(n_minor):
            j2 = (j + 1) % n_minor
            a = i * n_minor + j
            b = i2 * n_minor + j
            c = i2 * n_minor + j2
            d = i * n_minor + j2
            faces.append([a, b, c])
            faces.append([a, c, d])
    return TriMesh(np.asarray(verts), np.asarray(faces, dtype=np.intp), name="torus")


def make_bundled(name) -> TriMesh:
    makers = {
        "cube": lambda: cube(2.0, 8),
        "box": lambda: box((2.0, 1.0, 0.5), 8),
        "cylinder": lambda: cylinder_mesh(1.0, 2.0, 48, 12, caps=True),
        "prism": lambda: prism(6, 1.0, 2.0, 8),
        "icosphere": lambda: icosphere(3, 1.0),
        "torus": lambda: torus(1.0, 0.4, 36, 24),
        "blob": lambda: blob(3, 0.18),
        "ellipsoid": lambda: ellipsoid((1.3, 1.0, 0.7), 3),
    }
    if name not in makers:
        raise ValueError(f"unknown bundled mesh {name!r}")
    return makers[name]()


def write_bundled(directory):
    """Write all bundled meshes as OBJ files; returns the paths."""
    os.makedirs(directory, exist_ok=True)
    paths = []
    for name in BUNDLED_NAMES:
        mesh = make_bundled(name)
        path = os.path.join(directory, name + ".obj")
        save_obj(mesh, path)
        paths.append(path)
    return paths


def bundled_mesh_dir():
    """Directory holding the package's shipped OBJ meshes."""
    return os.path.join(os.path.dirname(__file__), "data", "meshes")


def bundled_mesh_path(name):
    if name not in BUNDLED_NAMES:
        raise ValueError(f"unknown bundled mesh {name!r}")
    return os.path.join(bundled_mesh_dir(), name + ".obj")


if __name__ == "__main__":
    import sys

    target = sys.argv[1] if len(sys.argv) > 1 else bundled_mesh_dir()
    for p in write_bundled(target):
        print(p)
