"""Mesh hierarchy by quadric-error edge collapse and barycentric upsampling.

Collapses always merge one endpoint into the other without moving it, so the
vertices of every coarse level are a subset of the finer level's vertices.
"""

from __future__ import annotations

import heapq
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .mesh import MeshError, TriMesh, boundary_edges, load_mesh, save_mesh

# Vertex counts of the reference 778-vertex hand hierarchy, finest first.
REFERENCE_LEVEL_SIZES = (778, 392, 197, 100, 51)

BOUNDARY_WEIGHT = 1000.0
FLIP_PENALTY = 1e12
VALENCE_PENALTY = 1e9


class DecimationError(MeshError):
    def __init__(self, reached: int, target: int):
        super().__init__(
            f"cannot reach {target} vertices without breaking manifoldness; blocked at {reached}"
        )
        self.reached = reached
        self.target = target


def _plane_quadric(normal: np.ndarray, point: np.ndarray, weight: float) -> np.ndarray:
    p = np.append(normal, -float(normal @ point))
    return weight * np.outer(p, p)


def vertex_quadrics(mesh: TriMesh, boundary_weight: float = BOUNDARY_WEIGHT) -> np.ndarray:
    """Area-weighted plane quadrics per vertex, with boundary-constraint planes."""
    v, f = mesh.vertices, mesh.faces
    q = np.zeros((mesh.n_vertices, 4, 4))
    p = v[f]
    n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    area2 = np.linalg.norm(n, axis=1)
    unit = n / np.maximum(area2, 1e-300)[:, None]
    planes = np.concatenate([unit, -np.einsum("ij,ij->i", unit, p[:, 0])[:, None]], axis=1)
    kf = 0.5 * area2[:, None, None] * planes[:, :, None] * planes[:, None, :]
    for c in range(3):
        np.add.at(q, f[:, c], kf)

    face_of = {}
    for fi, (a, b, c) in enumerate(f.tolist()):
        face_of[(a, b)] = face_of[(b, c)] = face_of[(c, a)] = fi
    for i, j in boundary_edges(mesh).tolist():
        e = v[j] - v[i]
        nb = np.cross(e, unit[face_of[(i, j)]])
        norm = np.linalg.norm(nb)
        if norm < 1e-300:
            continue
        k = _plane_quadric(nb / norm, v[i], boundary_weight * float(e @ e))
        q[i] += k
        q[j] += k
    return q


def _sym10(q: np.ndarray) -> tuple:
    return (q[0, 0], q[0, 1], q[0, 2], q[0, 3], q[1, 1], q[1, 2], q[1, 3], q[2, 2], q[2, 3], q[3, 3])


def _quadric_cost(q: tuple, p: tuple) -> float:
    x, y, z = p
    a, b, c, d, e, f, g, h, i, j = q
    return (a * x * x + 2 * b * x * y + 2 * c * x * z + 2 * d * x
            + e * y * y + 2 * f * y * z + 2 * g * y
            + h * z * z + 2 * i * z + j)


def _tri_normal(p0, p1, p2) -> tuple:
    ux, uy, uz = p1[0] - p0[0], p1[1] - p0[1], p1[2] - p0[2]
    vx, vy, vz = p2[0] - p0[0], p2[1] - p0[1], p2[2] - p0[2]
    return (uy * vz - uz * vy, uz * vx - ux * vz, ux * vy - uy * vx)


class _Collapser:
    """Mutable face/vertex bookkeeping for greedy edge collapse."""

    def __init__(self, mesh: TriMesh, boundary_weight: float, length_weight: float, max_valence: int):
        self.pos = [tuple(p) for p in mesh.vertices.tolist()]
        self.faces = [list(f) for f in mesh.faces.tolist()]
        self.face_alive = [True] * len(self.faces)
        self.vfaces: list[set[int]] = [set() for _ in range(mesh.n_vertices)]
        for fi, f in enumerate(self.faces):
            for x in f:
                self.vfaces[x].add(fi)
        self.alive = np.ones(mesh.n_vertices, dtype=bool)
        self.q = [_sym10(q) for q in vertex_quadrics(mesh, boundary_weight)]
        self.bverts = set(np.unique(boundary_edges(mesh)).tolist())
        self.stamp = [0] * mesh.n_vertices
        self.count = mesh.n_vertices
        self.length_weight = length_weight
        self.max_valence = max_valence

    def neighbors(self, x: int) -> set[int]:
        out = set()
        for fi in self.vfaces[x]:
            out.update(self.faces[fi])
        out.discard(x)
        return out

    def edge_faces(self, a: int, b: int) -> list[int]:
        return [fi for fi in self.vfaces[a] if b in self.faces[fi]]

    def is_boundary_edge(self, a: int, b: int) -> bool:
        return len(self.edge_faces(a, b)) == 1

    def collapse_valid(self, keep: int, drop: int) -> bool:
        shared = self.edge_faces(keep, drop)
        if not shared:
            return False
        opposite = {y for fi in shared for y in self.faces[fi] if y not in (keep, drop)}
        if (self.neighbors(keep) & self.neighbors(drop)) != opposite:
            return False
        edge_on_boundary = len(shared) == 1
        if keep in self.bverts and drop in self.bverts and not edge_on_boundary:
            return False
        if edge_on_boundary:
            # Virtual-vertex link condition: the lone triangle (or a boundary
            # loop of length three) would disappear.
            (x,) = opposite
            if self.is_boundary_edge(keep, x) and self.is_boundary_edge(drop, x):
                return False
        else:
            x, y = sorted(opposite)
            # Tetrahedron-like configuration: collapsing would create a doubled face.
            if any(set(self.faces[fi]) == {keep, x, y} for fi in self.vfaces[keep]) and any(
                set(self.faces[fi]) == {drop, x, y} for fi in self.vfaces[drop]
            ):
                return False
        return True

    def flips(self, keep: int, drop: int) -> bool:
        target = self.pos[keep]
        for fi in self.vfaces[drop]:
            f = self.faces[fi]
            if keep in f:
                continue
            p = [self.pos[x] for x in f]
            n0 = _tri_normal(*p)
            p[f.index(drop)] = target
            n1 = _tri_normal(*p)
            dot = n0[0] * n1[0] + n0[1] * n1[1] + n0[2] * n1[2]
            l0 = (n0[0] ** 2 + n0[1] ** 2 + n0[2] ** 2) ** 0.5
            l1 = (n1[0] ** 2 + n1[1] ** 2 + n1[2] ** 2) ** 0.5
            if dot <= 0.05 * l0 * l1:
                return True
        return False

    def base_cost(self, a: int, b: int) -> tuple[float, int, int]:
        """Cheapest direction ignoring validity: (cost, keep, drop)."""
        qsum = tuple(x + y for x, y in zip(self.q[a], self.q[b]))
        pa, pb = self.pos[a], self.pos[b]
        length4 = ((pa[0] - pb[0]) ** 2 + (pa[1] - pb[1]) ** 2 + (pa[2] - pb[2]) ** 2) ** 2
        reg = self.length_weight * length4
        ca = max(_quadric_cost(qsum, pa), 0.0) + reg
        cb = max(_quadric_cost(qsum, pb), 0.0) + reg
        return (ca, a, b) if ca <= cb else (cb, b, a)

    def full_cost(self, a: int, b: int):
        """Cheapest valid direction with penalties, or None."""
        qsum = tuple(x + y for x, y in zip(self.q[a], self.q[b]))
        pa, pb = self.pos[a], self.pos[b]
        length4 = ((pa[0] - pb[0]) ** 2 + (pa[1] - pb[1]) ** 2 + (pa[2] - pb[2]) ** 2) ** 2
        valence = len(self.neighbors(a) | self.neighbors(b)) - 2
        best = None
        for keep, drop in ((a, b), (b, a)):
            if not self.collapse_valid(keep, drop):
                continue
            cost = max(_quadric_cost(qsum, self.pos[keep]), 0.0) + self.length_weight * length4
            if self.flips(keep, drop):
                cost += FLIP_PENALTY
            if valence > self.max_valence:
                cost += VALENCE_PENALTY * (valence - self.max_valence)
            if best is None or cost < best[0]:
                best = (cost, keep, drop)
        return best

    def collapse(self, keep: int, drop: int) -> None:
        for fi in list(self.vfaces[drop]):
            f = self.faces[fi]
            if keep in f:
                self.face_alive[fi] = False
                for x in f:
                    self.vfaces[x].discard(fi)
            else:
                f[f.index(drop)] = keep
                self.vfaces[keep].add(fi)
        self.vfaces[drop] = set()
        self.q[keep] = tuple(x + y for x, y in zip(self.q[keep], self.q[drop]))
        if drop in self.bverts:
            self.bverts.discard(drop)
            self.bverts.add(keep)
        self.alive[drop] = False
        self.count -= 1


def decimate(
    mesh: TriMesh,
    target_vertices: int,
    boundary_weight: float = BOUNDARY_WEIGHT,
    length_weight: float = 1e-2,
    max_valence: int = 10,
) -> tuple[TriMesh, np.ndarray]:
    """Greedy quadric-error edge collapse down to exactly ``target_vertices``.

    Each collapse merges one endpoint into the other without moving it. The
    cost is the summed plane quadric at the kept position plus a small
    ``length_weight * |e|**4`` term that favours short edges where the
    surface is flat. Collapses that flip a face or raise a valence above
    ``max_valence`` are deferred, not forbidden. Ties go to the smallest
    ``(min, max)`` vertex pair.

    Returns the coarse mesh and ``keep_map`` with ``keep_map[i]`` the index in
    ``mesh`` of coarse vertex ``i``. Coarse vertices keep the relative order
    they had in the input.

    Raises:
        DecimationError: when no manifold-preserving collapse remains.
    """
    n = mesh.n_vertices
    if target_vertices > n or target_vertices < 1:
        raise ValueError(f"target_vertices must be in [1, {n}], got {target_vertices}")
    if target_vertices == n:
        return mesh, np.arange(n)

    st = _Collapser(mesh, boundary_weight, length_weight, max_valence)
    heap: list[tuple] = []

    def push(a: int, b: int) -> None:
        a, b = min(a, b), max(a, b)
        cost, keep, drop = st.base_cost(a, b)
        heap.append((cost, a, b, st.stamp[a], st.stamp[b], False))

    edges = {tuple(sorted((f[i], f[(i + 1) % 3]))) for f in st.faces for i in range(3)}
    for a, b in sorted(edges):
        push(a, b)
    heapq.heapify(heap)

    while st.count > target_vertices:
        if not heap:
            raise DecimationError(st.count, target_vertices)
        cost, a, b, sa, sb, checked = heapq.heappop(heap)
        if not (st.alive[a] and st.alive[b]) or st.stamp[a] != sa or st.stamp[b] != sb:
            continue
        full = st.full_cost(a, b)
        if full is None:
            continue
        if not checked and full[0] > cost:
            # Penalised: requeue at its true priority.
            heapq.heappush(heap, (full[0], a, b, sa, sb, True))
            continue
        _, keep, drop = full
        st.collapse(keep, drop)
        # Link conditions change within two rings of the merged vertex.
        touched = {keep} | st.neighbors(keep)
        for x in touched:
            st.stamp[x] += 1
        done = set()
        for x in touched:
            for y in st.neighbors(x):
                e = (min(x, y), max(x, y))
                if e not in done:
                    done.add(e)
                    cost, k, d = st.base_cost(*e)
                    heapq.heappush(heap, (cost, e[0], e[1], st.stamp[e[0]], st.stamp[e[1]], False))

    keep_map = np.flatnonzero(st.alive)
    remap = -np.ones(n, dtype=np.int64)
    remap[keep_map] = np.arange(len(keep_map))
    faces = np.array([st.faces[i] for i in range(len(st.faces)) if st.face_alive[i]], dtype=np.int64)
    coarse = TriMesh(mesh.vertices[keep_map], remap[faces])
    return coarse, keep_map


def closest_point_on_triangle(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray):
    """Vectorised closest point of ``p`` (P, 3) on triangles ``a, b, c`` (T, 3).

    Returns ``(squared_distance, barycentric)`` with shapes ``(P, T)`` and
    ``(P, T, 3)``. Follows the region tests of Ericson, *Real-Time Collision
    Detection*, 5.1.5.
    """
    p = p[:, None, :]
    ab, ac = (b - a)[None], (c - a)[None]
    ap = p - a[None]
    d1 = np.sum(ab * ap, -1)
    d2 = np.sum(ac * ap, -1)
    bp = p - b[None]
    d3 = np.sum(ab * bp, -1)
    d4 = np.sum(ac * bp, -1)
    cp = p - c[None]
    d5 = np.sum(ab * cp, -1)
    d6 = np.sum(ac * cp, -1)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    shape = d1.shape
    bary = np.zeros(shape + (3,))
    done = np.zeros(shape, dtype=bool)

    def assign(mask, w):
        m = mask & ~done
        bary[m] = np.stack(w, -1)[m]
        done[m] = True

    one, zero = np.ones(shape), np.zeros(shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        assign((d1 <= 0) & (d2 <= 0), (one, zero, zero))
        assign((d3 >= 0) & (d4 <= d3), (zero, one, zero))
        v = d1 / (d1 - d3)
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), (1 - v, v, zero))
        assign((d6 >= 0) & (d5 <= d6), (zero, zero, one))
        w = d2 / (d2 - d6)
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), (1 - w, zero, w))
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        assign((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), (zero, 1 - w, w))
        denom = 1.0 / (va + vb + vc)
        v, w = vb * denom, vc * denom
        assign(np.ones(shape, dtype=bool), (1 - v - w, v, w))
    bary = np.nan_to_num(bary)
    proj = bary[..., 0:1] * a[None] + bary[..., 1:2] * b[None] + bary[..., 2:3] * c[None]
    d2 = np.sum((proj - p) ** 2, -1)
    return d2, bary


def build_upsample(fine: TriMesh, coarse: TriMesh, keep_map: np.ndarray) -> sp.csr_matrix:
    """Sparse ``(m, n)`` matrix with ``fine ~= Q @ coarse`` vertex positions.

    Kept vertices map to one-hot rows. Every discarded vertex is projected onto
    its nearest coarse triangle and gets the barycentric weights of that
    projection (ties go to the lowest face index).
    """
    if coarse.n_vertices == 0 or coarse.n_faces == 0:
        raise MeshError("coarse mesh is empty")
    m, n = fine.n_vertices, coarse.n_vertices
    keep_map = np.asarray(keep_map, dtype=np.int64)
    rows, cols, vals = [], [], []
    kept = np.zeros(m, dtype=bool)
    kept[keep_map] = True
    rows.extend(keep_map.tolist())
    cols.extend(range(n))
    vals.extend([1.0] * n)

    dropped = np.flatnonzero(~kept)
    if len(dropped):
        tri = coarse.vertices[coarse.faces]
        for chunk in np.array_split(dropped, max(1, len(dropped) // 256)):
            d2, bary = closest_point_on_triangle(
                fine.vertices[chunk], tri[:, 0], tri[:, 1], tri[:, 2]
            )
            best = np.argmin(d2, axis=1)
            for row, (q, t) in enumerate(zip(chunk.tolist(), best.tolist())):
                w = np.clip(bary[row, t], 0.0, None)
                if not w.sum() > 0:
                    # Degenerate triangle: snap to its nearest corner.
                    corner_d = np.linalg.norm(coarse.vertices[coarse.faces[t]] - fine.vertices[q], axis=1)
                    w = np.eye(3)[int(np.argmin(corner_d))]
                w = w / w.sum()
                for corner, weight in zip(coarse.faces[t].tolist(), w.tolist()):
                    if weight != 0.0:
                        rows.append(q)
                        cols.append(corner)
                        vals.append(weight)
    mat = sp.coo_matrix((vals, (rows, cols)), shape=(m, n)).tocsr()
    mat.sum_duplicates()
    return mat


@dataclass
class MeshHierarchy:
    """Topologies ordered coarsest to finest.

    ``keep_maps[i]`` embeds ``levels[i]`` into ``levels[i + 1]`` and
    ``upsample_mats[i]`` maps ``levels[i]`` vertex data to ``levels[i + 1]``.
    """

    levels: list[TriMesh]
    keep_maps: list[np.ndarray]
    upsample_mats: list[sp.csr_matrix]

    @property
    def sizes(self) -> list[int]:
        return [m.n_vertices for m in self.levels]

    @property
    def finest(self) -> TriMesh:
        return self.levels[-1]

    def save(self, directory: str | os.PathLike) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for i, level in enumerate(self.levels):
            save_mesh(level, d / f"level_{i}.obj")
        for i, (km, q) in enumerate(zip(self.keep_maps, self.upsample_mats)):
            (d / f"keep_{i}.json").write_text(json.dumps(km.tolist()), encoding="utf-8")
            coo = q.tocoo()
            payload = {
                "rows": coo.row.tolist(),
                "cols": coo.col.tolist(),
                "vals": coo.data.tolist(),
                "shape": list(coo.shape),
            }
            (d / f"upsample_{i}.json").write_text(json.dumps(payload), encoding="utf-8")

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "MeshHierarchy":
        d = Path(directory)
        levels = []
        i = 0
        while (d / f"level_{i}.obj").exists():
            levels.append(load_mesh(d / f"level_{i}.obj"))
            i += 1
        if len(levels) < 2:
            raise MeshError(f"{d}: hierarchy needs at least two levels")
        keep_maps, mats = [], []
        for i in range(len(levels) - 1):
            keep_maps.append(np.array(json.loads((d / f"keep_{i}.json").read_text()), dtype=np.int64))
            u = json.loads((d / f"upsample_{i}.json").read_text())
            mats.append(
                sp.coo_matrix((u["vals"], (u["rows"], u["cols"])), shape=tuple(u["shape"])).tocsr()
            )
        return cls(levels, keep_maps, mats)


def halving_sizes(n: int, levels: int) -> list[int]:
    """Finest-first sizes ``ceil(n / 2**i)``."""
    return [int(math.ceil(n / 2 ** i)) for i in range(levels)]


def build_hierarchy(mesh: TriMesh, levels: int, sizes: list[int] | None = None) -> MeshHierarchy:
    """Successively decimate ``mesh`` to ``levels`` topologies.

    ``sizes`` (finest first, starting with ``mesh.n_vertices``) defaults to
    ceil-halving, except for a 778-vertex input, which uses the reference
    counts 778/392/197/100/51.
    """
    if levels < 2:
        raise ValueError("a hierarchy needs at least two levels")
    if sizes is None:
        if mesh.n_vertices == REFERENCE_LEVEL_SIZES[0] and levels <= len(REFERENCE_LEVEL_SIZES):
            sizes = list(REFERENCE_LEVEL_SIZES[:levels])
        else:
            sizes = halving_sizes(mesh.n_vertices, levels)
    sizes = list(sizes)
    if len(sizes) != levels or sizes[0] != mesh.n_vertices:
        raise ValueError("sizes must list one count per level, starting with the input size")
    fine_first = [mesh]
    keeps, mats = [], []
    for target in sizes[1:]:
        fine = fine_first[-1]
        coarse, keep = decimate(fine, target)
        mats.append(build_upsample(fine, coarse, keep))
        keeps.append(keep)
        fine_first.append(coarse)
    return MeshHierarchy(fine_first[::-1], keeps[::-1], mats[::-1])
