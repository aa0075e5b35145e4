"""Triangle meshes, 1-ring adjacency and ASCII OBJ I/O."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)


class MeshError(ValueError):
    """Raised for invalid mesh data or unparseable mesh files."""


class NonManifoldError(MeshError):
    def __init__(self, vertex: int, message: str = "vertex has more than one fan"):
        super().__init__(f"non-manifold vertex {vertex}: {message}")
        self.vertex = vertex


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Immutable triangle mesh with counter-clockwise (outward) winding.

    ``vertices`` is ``(N, 3)`` float64 and ``faces`` is ``(F, 3)`` int64 with
    0-based indices. Construction validates index range, degeneracy, edge
    valence (at most two faces per edge) and winding consistency.
    """

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        _validate(v, f)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def with_vertices(self, vertices: np.ndarray) -> "TriMesh":
        return TriMesh(vertices, self.faces)


def _validate(v: np.ndarray, f: np.ndarray) -> None:
    n = len(v)
    if len(f) == 0:
        return
    if f.min() < 0 or f.max() >= n:
        bad = int(np.flatnonzero((f < 0).any(1) | (f >= n).any(1))[0])
        raise MeshError(f"face {bad} has a vertex index outside [0, {n})")
    degenerate = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
    if degenerate.any():
        raise MeshError(f"face {int(np.flatnonzero(degenerate)[0])} is degenerate")
    directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    keys = directed[:, 0] * n + directed[:, 1]
    uniq, counts = np.unique(keys, return_counts=True)
    if (counts > 1).any():
        k = int(uniq[counts > 1][0])
        raise MeshError(
            f"inconsistent winding: directed edge ({k // n}, {k % n}) used by more than one face"
        )
    undirected = np.sort(directed, axis=1)
    _, counts = np.unique(undirected[:, 0] * n + undirected[:, 1], return_counts=True)
    if (counts > 2).any():
        raise MeshError("edge shared by more than two faces")


def edge_set(mesh: TriMesh) -> np.ndarray:
    """Unique undirected edges as an ``(E, 2)`` array of sorted pairs, lexicographically sorted."""
    f = mesh.faces
    if len(f) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


def boundary_edges(mesh: TriMesh) -> np.ndarray:
    """Directed boundary edges ``(i, j)`` as they appear in their single incident face."""
    f = mesh.faces
    directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    n = mesh.n_vertices
    keys = set((directed[:, 0] * n + directed[:, 1]).tolist())
    rev = directed[:, 1] * n + directed[:, 0]
    mask = np.array([k not in keys for k in rev.tolist()], dtype=bool)
    return directed[mask]


@dataclass(frozen=True)
class VertexAdjacency:
    """Per-vertex 1-rings in counter-clockwise order about the outward normal.

    Interior vertices have a closed cycle; for boundary vertices the ring is an
    open chain that starts at the neighbor across the boundary edge leaving the
    vertex and ends at the one across the boundary edge entering it.
    """

    rings: tuple[tuple[int, ...], ...]
    boundary: np.ndarray

    def __len__(self) -> int:
        return len(self.rings)

    def neighbors(self, v: int) -> tuple[int, ...]:
        return self.rings[v]

    def valence(self) -> np.ndarray:
        return np.array([len(r) for r in self.rings])


def build_adjacency(mesh: TriMesh) -> VertexAdjacency:
    """Ordered 1-rings for every vertex.

    Raises:
        NonManifoldError: if a vertex's incident faces form more than one fan.
    """
    n = mesh.n_vertices
    wedges: list[dict[int, int]] = [dict() for _ in range(n)]
    for a, b, c in mesh.faces.tolist():
        # Around a, the CCW face (a, b, c) contributes the wedge b -> c.
        wedges[a][b] = c
        wedges[b][c] = a
        wedges[c][a] = b

    rings = []
    boundary = np.zeros(n, dtype=bool)
    for v in range(n):
        nxt = wedges[v]
        if not nxt:
            rings.append(())
            continue
        targets = set(nxt.values())
        starts = [a for a in nxt if a not in targets]
        if len(starts) > 1:
            raise NonManifoldError(v)
        if starts:
            boundary[v] = True
            cur = starts[0]
        else:
            cur = min(nxt)
        ring = [cur]
        while cur in nxt:
            cur = nxt[cur]
            if cur == ring[0]:
                break
            ring.append(cur)
        expected = len(nxt) + (1 if starts else 0)
        if len(ring) != expected:
            raise NonManifoldError(v)
        rings.append(tuple(ring))
    boundary.setflags(write=False)
    return VertexAdjacency(tuple(rings), boundary)


def load_mesh(path: str | os.PathLike) -> TriMesh:
    """Read an ASCII OBJ file with ``v``/``f`` records.

    Vertex order is preserved. Face entries of the form ``i/t/n`` use the
    position index only; negative (relative) indices are resolved.
    """
    verts: list[list[float]] = []
    faces: list[list[int]] = []
    ignored: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tag, *rest = line.split()
            if tag == "v":
                if len(rest) < 3:
                    raise MeshError(f"{path}:{lineno}: vertex needs 3 coordinates")
                try:
                    verts.append([float(x) for x in rest[:3]])
                except ValueError as exc:
                    raise MeshError(f"{path}:{lineno}: {exc}") from None
            elif tag == "f":
                if len(rest) != 3:
                    raise MeshError(
                        f"{path}:{lineno}: only triangular faces are supported (got {len(rest)} vertices)"
                    )
                idx = []
                for tok in rest:
                    try:
                        i = int(tok.split("/", 1)[0])
                    except ValueError:
                        raise MeshError(f"{path}:{lineno}: bad face index {tok!r}") from None
                    i = i - 1 if i > 0 else len(verts) + i
                    if not 0 <= i < len(verts):
                        raise MeshError(f"{path}:{lineno}: face index {tok} out of range")
                    idx.append(i)
                faces.append(idx)
            elif tag not in ignored:
                ignored.add(tag)
                logger.warning("%s: ignoring OBJ records of type %r", path, tag)
    if not verts:
        raise MeshError(f"{path}: no vertices")
    try:
        return TriMesh(np.array(verts), np.array(faces, dtype=np.int64).reshape(-1, 3))
    except MeshError as exc:
        raise MeshError(f"{path}: {exc}") from None


def save_mesh(mesh: TriMesh, path: str | os.PathLike) -> None:
    if mesh.n_vertices == 0:
        raise MeshError("refusing to write a mesh without vertices")
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def euler_characteristic(mesh: TriMesh) -> int:
    return mesh.n_vertices - len(edge_set(mesh)) + mesh.n_faces


def face_normals(vertices: np.ndarray, faces: np.ndarray, normalize: bool = True) -> np.ndarray:
    p = vertices[faces]
    n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    if normalize:
        n = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
    return n


def signed_volume(mesh: TriMesh) -> float:
    p = mesh.vertices[mesh.faces]
    return float(np.einsum("ij,ij->i", p[:, 0], np.cross(p[:, 1], p[:, 2])).sum() / 6.0)


# Small reference solids used by tests and examples.

def tetrahedron() -> TriMesh:
    v = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float)
    f = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
    return TriMesh(v, f)


def icosahedron() -> TriMesh:
    t = (1.0 + 5 ** 0.5) / 2.0
    v = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=float,
    )
    f = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ]
    )
    return TriMesh(v, f)


def grid(rows: int, cols: int, spacing: float = 1.0) -> TriMesh:
    """Planar triangulated grid in the xy-plane, normals along +z.

    Each cell is split along alternating diagonals in a way that gives every
    interior vertex valence 6.
    """
    ys, xs = np.mgrid[0:rows, 0:cols]
    v = np.stack([xs.ravel() * spacing, ys.ravel() * spacing, np.zeros(rows * cols)], axis=1)
    faces = []
    for r in range(rows - 1):
        for c in range(cols - 1):
            a = r * cols + c
            b, d, e = a + 1, a + cols, a + cols + 1
            faces.append([a, b, e])
            faces.append([a, e, d])
    return TriMesh(v, np.array(faces))
