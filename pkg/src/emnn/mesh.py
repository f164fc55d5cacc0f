"""Triangle mesh loading, validation, and surface geometry.

A mesh is a vertex array, a face-index array whose winding order encodes
orientation, and the edge set derived from the faces. Face normals are the
winding-ordered cross products; a face's area is half the normal's length.
Vertex normals are the area-weighted average of adjacent face normals
(normalized), and a vertex's area is the mean area of its adjacent faces.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

EPS_AREA = 1e-12


class MeshError(ValueError):
    """Invalid mesh construction (bad indices, degenerate extent, ...)."""


class OffParseError(ValueError):
    """Malformed OFF file; message carries the offending line number."""


def _derive_edges(faces):
    if len(faces) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    pairs = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    pairs = np.sort(pairs, axis=1)
    return np.unique(pairs, axis=0)


@dataclass(frozen=True)
class Mesh:
    """Immutable triangle mesh.

    Parameters
    ----------
    positions : (n, 3) float array
        Vertex coordinates (arbitrary length units).
    faces : (m, 3) int array
        Vertex-index triples; winding order is the orientation.
    vertex_scalars : (n, d0) float array, optional
        Initial per-vertex invariant features (empty by default).
    """

    positions: np.ndarray
    faces: np.ndarray
    vertex_scalars: np.ndarray = None
    edges: np.ndarray = field(init=False)

    def __post_init__(self):
        positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        faces = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if positions.ndim != 2 or positions.shape[1] != 3:
            raise MeshError(f"positions must be (n, 3), got {positions.shape}")
        n = positions.shape[0]
        if faces.size:
            if faces.min() < 0 or faces.max() >= n:
                raise MeshError("face index out of range")
            if (np.diff(np.sort(faces, axis=1), axis=1) == 0).any():
                raise MeshError("face with repeated vertex index")
        scalars = self.vertex_scalars
        if scalars is None:
            scalars = np.zeros((n, 0))
        scalars = np.ascontiguousarray(scalars, dtype=np.float64).reshape(n, -1)
        for arr in (positions, faces, scalars):
            arr.setflags(write=False)
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "faces", faces)
        object.__setattr__(self, "vertex_scalars", scalars)
        edges = _derive_edges(faces)
        edges.setflags(write=False)
        object.__setattr__(self, "edges", edges)

    @property
    def num_vertices(self):
        return self.positions.shape[0]

    @property
    def num_faces(self):
        return self.faces.shape[0]

    @property
    def num_edges(self):
        return self.edges.shape[0]

    def with_positions(self, positions):
        return Mesh(positions, self.faces, self.vertex_scalars)

    def with_reversed_winding(self):
        """Swap each face's second and third vertices (flips orientation)."""
        return Mesh(self.positions, self.faces[:, [0, 2, 1]], self.vertex_scalars)

    def permuted(self, perm):
        """Relabel vertex ``i`` as ``perm[i]`` (faces follow)."""
        perm = np.asarray(perm, dtype=np.int64)
        inverse = np.empty_like(perm)
        inverse[perm] = np.arange(perm.size)
        return Mesh(self.positions[inverse], perm[self.faces],
                    self.vertex_scalars[inverse])


@dataclass(frozen=True)
class GeometricFeatures:
    """Per-face and per-vertex surface quantities.

    face_normals are the raw (unnormalized) winding-ordered cross products,
    so ``face_areas == norm(face_normals) / 2`` by construction.
    """

    face_normals: np.ndarray
    face_areas: np.ndarray
    vertex_normals: np.ndarray
    vertex_areas: np.ndarray


@dataclass(frozen=True)
class ValidationReport:
    """Outcome of :func:`validate`; empty report means the mesh is accepted."""

    bad_edges: list          # (edge pair, face count) with count not in {1, 2}
    degenerate_faces: list   # face indices with area < EPS_AREA
    duplicate_faces: list    # face index pairs sharing the same vertex set

    @property
    def ok(self):
        return not (self.bad_edges or self.degenerate_faces or self.duplicate_faces)

    def summary(self):
        if self.ok:
            return "mesh accepted"
        parts = []
        if self.bad_edges:
            parts.append(f"{len(self.bad_edges)} edge(s) with face count not in {{1,2}}")
        if self.degenerate_faces:
            parts.append(f"{len(self.degenerate_faces)} degenerate face(s)")
        if self.duplicate_faces:
            parts.append(f"{len(self.duplicate_faces)} duplicate face pair(s)")
        return "; ".join(parts)


def validate(mesh):
    """Check manifoldness (each edge in 1 or 2 faces), degenerate faces,
    and duplicate faces. Returns a report; never raises."""
    counts = {}
    for f, face in enumerate(mesh.faces):
        for a, b in ((face[0], face[1]), (face[1], face[2]), (face[2], face[0])):
            key = (int(a), int(b)) if a < b else (int(b), int(a))
            counts[key] = counts.get(key, 0) + 1
    bad_edges = [(edge, c) for edge, c in sorted(counts.items()) if c not in (1, 2)]

    _, areas = face_geometry(mesh)
    degenerate = [int(i) for i in np.nonzero(areas < EPS_AREA)[0]]

    seen = {}
    duplicates = []
    for f, face in enumerate(np.sort(mesh.faces, axis=1)):
        key = tuple(int(v) for v in face)
        if key in seen:
            duplicates.append((seen[key], f))
        else:
            seen[key] = f
    return ValidationReport(bad_edges, degenerate, duplicates)


def face_geometry(mesh):
    """Winding-ordered face normals and areas.

    Returns
    -------
    normals : (m, 3) array
        Unnormalized cross products (p2 - p1) x (p3 - p1).
    areas : (m,) array
        Half the normal lengths; zero for degenerate faces.
    """
    p = mesh.positions
    f = mesh.faces
    normals = np.cross(p[f[:, 1]] - p[f[:, 0]], p[f[:, 2]] - p[f[:, 0]])
    areas = 0.5 * np.linalg.norm(normals, axis=1)
    return normals, areas


def vertex_geometry(mesh, face_normals=None, face_areas=None):
    """Per-vertex unit normals and mean adjacent-face areas.

    The vertex normal is the area-weighted sum of adjacent face normals,
    normalized to unit length; the vertex area is the mean of the adjacent
    face areas. Isolated vertices get a zero normal and zero area (with a
    warning).
    """
    if face_normals is None or face_areas is None:
        face_normals, face_areas = face_geometry(mesh)
    n = mesh.num_vertices
    normals = np.zeros((n, 3))
    area_sum = np.zeros(n)
    degree = np.zeros(n)
    for col in range(3):
        idx = mesh.faces[:, col]
        np.add.at(normals, idx, face_areas[:, None] * face_normals)
        np.add.at(area_sum, idx, face_areas)
        np.add.at(degree, idx, 1.0)

    isolated = degree == 0
    if isolated.any():
        warnings.warn(f"{int(isolated.sum())} isolated vertex/vertices: "
                      "zero normal and zero area assigned", stacklevel=2)
    lengths = np.linalg.norm(normals, axis=1)
    safe = lengths > 0
    normals[safe] /= lengths[safe, None]
    areas = np.divide(area_sum, degree, out=np.zeros(n), where=~isolated)
    return normals, areas


def geometric_features(mesh):
    """Bundle of :func:`face_geometry` and :func:`vertex_geometry`."""
    face_normals, face_areas = face_geometry(mesh)
    vertex_normals, vertex_areas = vertex_geometry(mesh, face_normals, face_areas)
    return GeometricFeatures(face_normals, face_areas, vertex_normals, vertex_areas)


def normalize_mesh(mesh):
    """Center at the centroid and divide by the mean vertex distance to it.

    Idempotent up to floating point, and absorbs any positive uniform scale
    and translation of the input.
    """
    if mesh.num_vertices == 0:
        raise MeshError("cannot normalize an empty mesh")
    centered = mesh.positions - mesh.positions.mean(axis=0)
    scale = np.linalg.norm(centered, axis=1).mean()
    if scale < 1e-300:
        raise MeshError("degenerate mesh extent: all vertices coincide")
    return mesh.with_positions(centered / scale)


def _off_tokens(path):
    """Yield (line_number, tokens) for non-empty, non-comment lines."""
    with open(path, "r", encoding="ascii") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.split("#", 1)[0].strip()
            if line:
                yield lineno, line.split()


def load_off(path):
    """Read an ASCII OFF file into a :class:`Mesh`.

    Comment lines start with '#'; tokens are whitespace separated. All
    polygons must be triangles. Errors report the offending line number.
    """
    lines = _off_tokens(path)

    def next_line(what):
        try:
            return next(lines)
        except StopIteration:
            raise OffParseError(f"{path}: unexpected end of file while reading {what}") \
                from None

    lineno, tokens = next_line("header")
    if tokens != ["OFF"]:
        raise OffParseError(f"{path}:{lineno}: expected 'OFF' header")
    lineno, tokens = next_line("counts")
    if len(tokens) != 3:
        raise OffParseError(f"{path}:{lineno}: expected 'n_vertices n_faces n_edges'")
    try:
        n_vertices, n_faces = int(tokens[0]), int(tokens[1])
        int(tokens[2])
    except ValueError:
        raise OffParseError(f"{path}:{lineno}: non-numeric count") from None

    positions = np.empty((n_vertices, 3))
    for i in range(n_vertices):
        lineno, tokens = next_line(f"vertex {i}")
        if len(tokens) != 3:
            raise OffParseError(f"{path}:{lineno}: expected 3 coordinates")
        try:
            positions[i] = [float(t) for t in tokens]
        except ValueError:
            raise OffParseError(f"{path}:{lineno}: non-numeric coordinate") from None

    faces = np.empty((n_faces, 3), dtype=np.int64)
    for i in range(n_faces):
        lineno, tokens = next_line(f"face {i}")
        try:
            sides = int(tokens[0])
            indices = [int(t) for t in tokens[1:]]
        except ValueError:
            raise OffParseError(f"{path}:{lineno}: non-numeric face token") from None
        if sides != 3:
            raise OffParseError(f"{path}:{lineno}: non-triangle polygon ({sides} sides)")
        if len(indices) != 3:
            raise OffParseError(f"{path}:{lineno}: expected 3 vertex indices")
        if any(v < 0 or v >= n_vertices for v in indices):
            raise OffParseError(f"{path}:{lineno}: vertex index out of range")
        faces[i] = indices

    try:
        return Mesh(positions, faces)
    except MeshError as exc:
        raise OffParseError(f"{path}: {exc}") from exc


def write_off(mesh, path):
    """Write an ASCII OFF file; coordinates use 17 significant digits so a
    load/write round trip is bit-stable."""
    with open(path, "w", encoding="ascii") as handle:
        handle.write("OFF\n")
        handle.write(f"{mesh.num_vertices} {mesh.num_faces} {mesh.num_edges}\n")
        for x, y, z in mesh.positions:
            handle.write(f"{x:.17g} {y:.17g} {z:.17g}\n")
        for a, b, c in mesh.faces:
            handle.write(f"3 {a} {b} {c}\n")
