"""Procedural fixture meshes (spheres, grids, cubes, blobs).

Used by the test and verification harnesses and by the synthetic two-class
training task. All generators are deterministic given their arguments.
"""

import numpy as np

from .mesh import Mesh


def triangle():
    """A single scalene triangle (asymmetric on purpose)."""
    positions = [[0.0, 0.0, 0.0], [1.3, 0.0, 0.0], [0.2, 0.9, 0.4]]
    return Mesh(positions, [[0, 1, 2]])


def tetrahedron():
    """An irregular tetrahedron (closed, outward-wound)."""
    positions = [[0.0, 0.0, 0.0], [1.1, 0.0, 0.0], [0.3, 1.4, 0.0], [0.4, 0.5, 1.2]]
    faces = [[0, 2, 1], [0, 1, 3], [1, 2, 3], [0, 3, 2]]
    return Mesh(positions, faces)


def _subdivide(positions, faces):
    """One midpoint-split pass: each triangle becomes four."""
    positions = list(map(np.asarray, positions))
    midpoint = {}

    def mid(a, b):
        key = (a, b) if a < b else (b, a)
        if key not in midpoint:
            midpoint[key] = len(positions)
            positions.append(0.5 * (positions[a] + positions[b]))
        return midpoint[key]

    out = []
    for a, b, c in faces:
        ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
        out.extend([(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)])
    return np.asarray(positions), np.asarray(out, dtype=np.int64)


def _icosahedron():
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    positions = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    return positions, faces


def icosphere(subdivisions=1, radius=1.0):
    """Icosahedron subdivided ``subdivisions`` times, projected to a sphere.

    Vertex counts: 12, 42, 162, 642, 2562 for subdivisions 0..4.
    """
    positions, faces = _icosahedron()
    for _ in range(subdivisions):
        positions, faces = _subdivide(positions, faces)
    positions = positions / np.linalg.norm(positions, axis=1, keepdims=True) * radius
    return Mesh(positions, faces)


def grid_patch(rows=9, cols=9, spacing=1.0):
    """Flat triangulated grid patch in the z=0 plane (open boundary)."""
    ii, jj = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    positions = np.stack([jj.ravel() * spacing, ii.ravel() * spacing,
                          np.zeros(rows * cols)], axis=1)
    faces = []
    for i in range(rows - 1):
        for j in range(cols - 1):
            a = i * cols + j
            b = a + 1
            c = a + cols
            d = c + 1
            faces.append((a, b, d))
            faces.append((a, d, c))
    return Mesh(positions, faces)


def blob(subdivisions=2, seed=7):
    """Non-convex closed surface: an icosphere with smooth radial bumps.

    The bump terms have no common mirror or rotational symmetry, so the
    result is a generic asymmetric shape.
    """
    base = icosphere(subdivisions)
    p = np.array(base.positions)
    theta = np.arccos(np.clip(p[:, 2], -1.0, 1.0))
    phi = np.arctan2(p[:, 1], p[:, 0])
    radial = 1.0 + 0.35 * np.sin(3.0 * theta) * np.cos(2.0 * phi) \
        + 0.15 * np.sin(5.0 * phi + seed) \
        + 0.1 * np.sin(2.0 * theta + 1.0) * np.cos(phi)
    return Mesh(p * radial[:, None], base.faces)


def cube(subdivisions=0):
    """Axis-aligned unit cube surface, optionally midpoint-subdivided."""
    corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)],
                       dtype=np.float64)
    # outward winding for each of the 12 triangles
    faces = np.array([
        [0, 1, 3], [0, 3, 2],   # x = 0
        [4, 6, 7], [4, 7, 5],   # x = 1
        [0, 4, 5], [0, 5, 1],   # y = 0
        [2, 3, 7], [2, 7, 6],   # y = 1
        [0, 2, 6], [0, 6, 4],   # z = 0
        [1, 5, 7], [1, 7, 3],   # z = 1
    ], dtype=np.int64)
    positions = corners
    for _ in range(subdivisions):
        positions, faces = _subdivide(positions, faces)
    return Mesh(positions, faces)


def noised(mesh, sigma, seed):
    """Add seeded Gaussian noise to vertex positions."""
    rng = np.random.default_rng(seed)
    return mesh.with_positions(mesh.positions + rng.normal(0.0, sigma,
                                                           mesh.positions.shape))


def fixture_meshes():
    """The five verification fixtures, keyed by name."""
    return {
        "triangle": triangle(),
        "tetrahedron": tetrahedron(),
        "icosphere2": icosphere(2),
        "grid9": grid_patch(9, 9),
        "blob": blob(),
    }
