"""Spiral patch operator and spiral convolution.

A spiral for vertex ``v`` lists ``v`` followed by its 1-ring, 2-ring, ... up to
the k-ring, each ring walked in the same rotational direction. Rows are
truncated or padded (``-1``) to a fixed length ``L`` so that convolution is a
gather followed by a dense product.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np
import torch

from .mesh import VertexAdjacency

PAD = -1


@dataclass(frozen=True)
class SpiralTable:
    spirals: np.ndarray  # (n_vertices, L) int64, PAD for the zero node
    k: int
    seed: int

    @property
    def length(self) -> int:
        return self.spirals.shape[1]

    @property
    def n_vertices(self) -> int:
        return self.spirals.shape[0]

    def to_json(self) -> dict:
        return {"k": self.k, "L": self.length, "seed": self.seed, "rows": self.spirals.tolist()}

    @classmethod
    def from_json(cls, data: dict) -> "SpiralTable":
        rows = np.asarray(data["rows"], dtype=np.int64).reshape(-1, int(data["L"]))
        return cls(rows, int(data["k"]), int(data["seed"]))

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "SpiralTable":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def compute_rings(adj: VertexAdjacency, v: int, k: int) -> list[set[int]]:
    """Rings ``[{v}, 1-ring, ..., k-ring]`` of the mesh graph around ``v``.

    Empty trailing rings are kept so the result always has ``k + 1`` entries.
    """
    if not 0 <= v < len(adj):
        raise IndexError(f"vertex {v} out of range for {len(adj)} vertices")
    if k < 0:
        raise ValueError("k must be non-negative")
    rings = [{v}]
    disk = {v}
    for _ in range(k):
        nxt = {w for u in rings[-1] for w in adj.rings[u]} - disk
        rings.append(nxt)
        disk |= nxt
    return rings


def _canonical_cycle(ring: tuple[int, ...], closed: bool) -> list[int]:
    # Face enumeration order fixes where a closed cycle starts; rotate so the
    # smallest index comes first. Open chains already have a canonical start.
    if not closed or not ring:
        return list(ring)
    i = ring.index(min(ring))
    return list(ring[i:] + ring[:i])


def _rotate_after_inner(ring: list[int], inner: set[int]) -> list[int]:
    """Rotate ``ring`` to start just past the last inner neighbor of a contiguous run."""
    n = len(ring)
    for j in range(n):
        if ring[j] in inner and ring[(j + 1) % n] not in inner:
            return ring[j + 1:] + ring[: j + 1]
    return ring


def vertex_spiral(adj: VertexAdjacency, v: int, k: int, first: int) -> list[int]:
    """Full (untruncated) spiral of ``v`` whose 1-ring starts at position ``first``."""
    one = _canonical_cycle(adj.rings[v], not adj.boundary[v])
    if adj.boundary[v]:
        # An open chain can only be walked from one of its ends.
        first = 0
    one = one[first:] + one[:first] if one else one
    spiral = [v] + one
    seen = set(spiral)
    prev_ring = one
    inner = {v}
    for _ in range(1, k):
        ring: list[int] = []
        for u in prev_ring:
            around = _rotate_after_inner(
                _canonical_cycle(adj.rings[u], not adj.boundary[u]), inner
            )
            for w in around:
                if w not in seen:
                    seen.add(w)
                    ring.append(w)
        if not ring:
            break
        spiral.extend(ring)
        inner = inner | set(prev_ring)
        prev_ring = ring
    return spiral


def default_spiral_length(adj: VertexAdjacency, k: int = 2) -> int:
    """``1 + d + 2d + ... + k*d`` for mean valence ``d``, rounded up."""
    d = float(np.mean(adj.valence()))
    return int(math.ceil(1 + d * k * (k + 1) / 2 - 1e-9))


def build_spiral_table(adj: VertexAdjacency, k: int, L: int, seed: int = 0) -> SpiralTable:
    """Fixed-length spiral rows for every vertex.

    The first 1-ring neighbor is drawn from a generator seeded with
    ``(seed, vertex)``, so tables are reproducible and independent of the
    order in which vertices are processed. Rows longer than ``L`` lose their
    outermost entries; shorter rows are padded with ``PAD``.
    """
    if L < 1:
        raise ValueError("spiral length must be >= 1")
    n = len(adj)
    table = np.full((n, L), PAD, dtype=np.int64)
    for v in range(n):
        ring = adj.rings[v]
        first = int(np.random.default_rng([seed, v]).integers(len(ring))) if ring else 0
        s = vertex_spiral(adj, v, k, first)[:L]
        table[v, : len(s)] = s
    table.setflags(write=False)
    return SpiralTable(table, k, seed)


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def spiral_gather(features, table: SpiralTable | np.ndarray) -> torch.Tensor:
    """Gather ``(..., n, d)`` features into ``(..., n, L, d)`` spiral patches.

    The pad index reads a zero feature vector.
    """
    x = _as_tensor(features)
    spirals = table.spirals if isinstance(table, SpiralTable) else np.asarray(table)
    n = x.shape[-2]
    if spirals.shape[0] != n:
        raise ValueError(f"features have {n} rows but the spiral table has {spirals.shape[0]}")
    zero = x.new_zeros(x.shape[:-2] + (1, x.shape[-1]))
    padded = torch.cat([x, zero], dim=-2)
    idx = torch.as_tensor(np.where(spirals < 0, n, spirals), dtype=torch.long)
    out = padded.index_select(-2, idx.reshape(-1))
    return out.reshape(x.shape[:-2] + tuple(spirals.shape) + (x.shape[-1],))


def spiral_conv(features, table: SpiralTable | np.ndarray, weights, bias=None) -> torch.Tensor:
    """Spiral convolution ``out[v] = flatten(patch[v]) @ weights + bias``.

    ``weights`` has shape ``(L * d_in, d_out)`` with row ``l * d_in + i``
    holding the kernel for spiral position ``l`` and input channel ``i``.
    """
    x = _as_tensor(features)
    w = _as_tensor(weights)
    patches = spiral_gather(x, table)
    L, d_in = patches.shape[-2], patches.shape[-1]
    if w.shape[0] != L * d_in:
        raise ValueError(f"weights have {w.shape[0]} rows, expected L*d_in = {L * d_in}")
    out = patches.reshape(patches.shape[:-2] + (L * d_in,)) @ w
    if bias is not None:
        out = out + _as_tensor(bias)
    return out
