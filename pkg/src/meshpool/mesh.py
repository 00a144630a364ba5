"""Triangle meshes and their cotangent Laplace operator.

A mesh is a vertex array plus counter-clockwise triangle indices. This module
loads ASCII OBJ files, computes per-vertex normals and one-third barycentric
vertex areas, and assembles the sparse cotangent weight matrix together with
its degree and area diagonals. The weighted Laplacian acting on vertex
functions is ``inv(A) @ (D - W)``; downstream code solves the equivalent
generalized symmetric problem ``(D - W) x = lam * A x``.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import sparse

# Each cotangent term is clamped to +-cot(1 degree) before assembly to guard
# near-degenerate triangles.
COT_CLAMP = 1.0 / np.tan(np.radians(1.0))

# Faces with area below this fraction of the squared bounding-box diagonal are
# rejected as degenerate.
DEGENERATE_AREA_FACTOR = 1e-12


class MeshError(ValueError):
    """Invalid mesh data."""


class MeshLoadError(MeshError):
    """OBJ parsing or validation failure; message names file and line."""


@dataclass
class Mesh:
    """Triangle mesh with validated connectivity.

    Parameters
    ----------
    vertices : ndarray (n, 3) float64
        Vertex positions in model units.
    faces : ndarray (m, 3) int64
        Vertex-index triples, counter-clockwise orientation.
    """

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64))
        self.faces = np.ascontiguousarray(np.asarray(self.faces, dtype=np.int64))
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise MeshError("vertices must be an (n, 3) array")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise MeshError("faces must be an (m, 3) array")
        n = self.vertices.shape[0]
        if self.faces.size:
            if self.faces.min() < 0 or self.faces.max() >= n:
                raise MeshError("face index out of range")
            same = (
                (self.faces[:, 0] == self.faces[:, 1])
                | (self.faces[:, 1] == self.faces[:, 2])
                | (self.faces[:, 0] == self.faces[:, 2])
            )
            if same.any():
                raise MeshError(f"face {int(np.flatnonzero(same)[0])} repeats a vertex")
            areas = face_areas(self)
            bad = areas < self.degenerate_area_threshold()
            if bad.any():
                raise MeshError(f"face {int(np.flatnonzero(bad)[0])} is degenerate (area below tolerance)")

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    def degenerate_area_threshold(self) -> float:
        return DEGENERATE_AREA_FACTOR * bounding_box_diagonal(self.vertices) ** 2

    def content_hash(self) -> str:
        """sha256 over the raw vertex and face data."""
        h = hashlib.sha256()
        h.update(self.vertices.tobytes())
        h.update(self.faces.tobytes())
        return h.hexdigest()


def bounding_box_diagonal(vertices: np.ndarray) -> float:
    if len(vertices) == 0:
        return 0.0
    extent = vertices.max(axis=0) - vertices.min(axis=0)
    return float(np.linalg.norm(extent))


def face_cross_products(mesh: Mesh) -> np.ndarray:
    """Per-face cross product (v1-v0) x (v2-v0); twice the area-weighted normal."""
    v = mesh.vertices
    f = mesh.faces
    return np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])


def face_areas(mesh: Mesh) -> np.ndarray:
    return 0.5 * np.linalg.norm(face_cross_products(mesh), axis=1)


def load_obj(path) -> Mesh:
    """Parse an ASCII OBJ file with triangular faces.

    Only ``v`` and ``f`` records are consumed; normals, texture coordinates
    and every other record type are skipped. OBJ's 1-based face indices are
    converted to 0-based. Quads and larger polygons are rejected.

    Raises
    ------
    MeshLoadError
        On malformed records, non-triangular faces, out-of-range indices,
        repeated vertices within a face, or degenerate faces; the message
        names the offending line.
    """
    vertices = []
    faces = []
    face_lines = []
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for lineno, raw in enumerate(fh, start=1):
            tokens = raw.split()
            if not tokens or tokens[0].startswith("#"):
                continue
            kind = tokens[0]
            if kind == "v":
                if len(tokens) < 4:
                    raise MeshLoadError(f"{path}:{lineno}: vertex record needs 3 coordinates")
                try:
                    vertices.append([float(t) for t in tokens[1:4]])
                except ValueError:
                    raise MeshLoadError(f"{path}:{lineno}: malformed vertex coordinate") from None
            elif kind == "f":
                if len(tokens) != 4:
                    raise MeshLoadError(f"{path}:{lineno}: non-triangular face ({len(tokens) - 1} vertices)")
                idx = []
                for tok in tokens[1:]:
                    head = tok.split("/")[0]
                    try:
                        i = int(head)
                    except ValueError:
                        raise MeshLoadError(f"{path}:{lineno}: malformed face index {tok!r}") from None
                    if i < 1:
                        raise MeshLoadError(f"{path}:{lineno}: face index {i} is not positive")
                    idx.append(i - 1)
                faces.append(idx)
                face_lines.append(lineno)
            # every other record type is ignored
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    faces_arr = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    n = len(vertices)
    for row, lineno in zip(faces_arr, face_lines):
        if row.min() < 0 or row.max() >= n:
            raise MeshLoadError(f"{path}:{lineno}: face index out of range (mesh has {n} vertices)")
        if len(set(row.tolist())) != 3:
            raise MeshLoadError(f"{path}:{lineno}: face repeats a vertex")
    try:
        mesh = Mesh(vertices, faces_arr)
    except MeshError as exc:
        # map a degenerate-face rejection back to its source line
        msg = str(exc)
        if msg.startswith("face ") and face_lines:
            fidx = int(msg.split()[1])
            raise MeshLoadError(f"{path}:{face_lines[fidx]}: {msg}") from None
        raise MeshLoadError(f"{path}: {msg}") from None
    return mesh


def write_obj(path, mesh: Mesh) -> None:
    """Write an ASCII OBJ (v/f records only, full float round-trip)."""
    with open(path, "w", encoding="utf-8") as fh:
        for x, y, z in mesh.vertices:
            fh.write(f"v {float(x)!r} {float(y)!r} {float(z)!r}\n")
        for a, b, c in mesh.faces + 1:
            fh.write(f"f {a} {b} {c}\n")


def compute_vertex_normals(mesh: Mesh) -> np.ndarray:
    """Unit vertex normals as the area-weighted mean of incident face normals.

    A vertex with no incident face gets the zero vector and a warning.
    """
    accum = np.zeros((mesh.n_vertices, 3))
    cross = face_cross_products(mesh)  # already area-weighted
    for c in range(3):
        np.add.at(accum, mesh.faces[:, c], cross)
    norms = np.linalg.norm(accum, axis=1)
    isolated = norms == 0.0
    if isolated.any():
        warnings.warn(
            f"{int(isolated.sum())} isolated vertex(es) received zero normals",
            stacklevel=2,
        )
    out = np.zeros_like(accum)
    touched = ~isolated
    out[touched] = accum[touched] / norms[touched, None]
    return out


def compute_vertex_areas(mesh: Mesh) -> np.ndarray:
    """Per-vertex area: one third of the summed areas of incident triangles."""
    areas = np.zeros(mesh.n_vertices)
    fa = face_areas(mesh) / 3.0
    for c in range(3):
        np.add.at(areas, mesh.faces[:, c], fa)
    return areas


@dataclass
class LaplacianOperator:
    """Sparse cotangent weights with degree and vertex-area diagonals.

    ``weights`` is exactly symmetric by construction: each undirected edge's
    accumulated half-cotangent is written to both triangle entries from the
    same float. ``degrees[i]`` is the i-th row sum of ``weights``.
    """

    weights: sparse.csr_matrix
    degrees: np.ndarray
    areas: np.ndarray
    clamped_terms: int = 0

    @property
    def n_vertices(self) -> int:
        return len(self.areas)

    def stiffness(self) -> sparse.csr_matrix:
        """The symmetric positive semidefinite matrix D - W."""
        return (sparse.diags(self.degrees) - self.weights).tocsr()

    def mass(self) -> sparse.dia_matrix:
        return sparse.diags(self.areas)

    def validate(self, atol: float = 1e-9) -> None:
        asym = self.weights - self.weights.T
        if asym.nnz and np.any(asym.data != 0.0):
            raise MeshError("cotangent weight matrix is not exactly symmetric")
        rowsums = np.asarray(self.weights.sum(axis=1)).ravel()
        if not np.allclose(rowsums, self.degrees, rtol=0.0, atol=0.0):
            raise MeshError("degree diagonal does not equal the weight row sums")
        null = self.stiffness() @ np.ones(self.n_vertices)
        if np.abs(null).max() >= atol:
            raise MeshError("constant vector is not in the null space of D - W")


def assemble_laplacian(mesh: Mesh, areas: np.ndarray = None) -> LaplacianOperator:
    """Assemble the half-cotangent edge weights of a triangle mesh.

    The weight of edge (i, j) is ``(cot(a) + cot(b)) / 2`` over the one or
    two triangle corners opposite the edge; boundary edges keep the single
    available term. Each cotangent is clamped to ``+-COT_CLAMP`` and the
    number of clamped terms is reported on the returned operator. ``areas``
    defaults to the one-third barycentric vertex areas.
    """
    if areas is None:
        areas = compute_vertex_areas(mesh)
    if len(areas) != mesh.n_vertices:
        raise MeshError("vertex areas do not match the mesh")
    v = mesh.vertices
    f = mesh.faces
    n = mesh.n_vertices

    rows = []
    cols = []
    vals = []
    clamped = 0
    # corner c is opposite the edge formed by the other two corners
    for c in range(3):
        i = f[:, c]
        j = f[:, (c + 1) % 3]
        k = f[:, (c + 2) % 3]
        u = v[j] - v[i]
        w = v[k] - v[i]
        cross = np.linalg.norm(np.cross(u, w), axis=1)
        cot = np.einsum("ij,ij->i", u, w) / cross
        clipped = np.clip(cot, -COT_CLAMP, COT_CLAMP)
        clamped += int(np.count_nonzero(clipped != cot))
        rows.append(np.minimum(j, k))
        cols.append(np.maximum(j, k))
        vals.append(0.5 * clipped)
    upper = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    ).tocsr()
    weights = (upper + upper.T).tocsr()
    degrees = np.asarray(weights.sum(axis=1)).ravel()
    return LaplacianOperator(weights=weights, degrees=degrees, areas=np.asarray(areas, dtype=np.float64), clamped_terms=clamped)
