"""Differentiable tensor operations, gradients, Adam and tensor checkpoints.

Tensors are float64 ``torch.Tensor`` objects; the autograd graph recorded by
torch acts as the tape. The functions here add the operations the rest of the
package needs on top of the stock arithmetic, with explicit shape checks.
"""

from __future__ import annotations

import io
import math
import os
import struct
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import torch

DTYPE = torch.float64
LEAKY_SLOPE = 0.01


def tensor(data, requires_grad: bool = False, check_finite: bool = True) -> torch.Tensor:
    """Create a float64 tensor, rejecting NaN/Inf when ``check_finite``."""
    t = torch.as_tensor(np.asarray(data, dtype=np.float64) if not isinstance(data, torch.Tensor) else data)
    t = t.to(DTYPE).clone()
    if check_finite and not torch.isfinite(t).all():
        raise ValueError("tensor contains NaN or Inf")
    return t.requires_grad_(requires_grad)


def to_torch_sparse(mat: sp.spmatrix) -> torch.Tensor:
    coo = sp.coo_matrix(mat)
    idx = torch.as_tensor(np.vstack([coo.row, coo.col]), dtype=torch.long)
    return torch.sparse_coo_tensor(idx, torch.as_tensor(coo.data, dtype=DTYPE), coo.shape,
                                   check_invariants=True).coalesce()


def sparse_matmul(mat, dense: torch.Tensor) -> torch.Tensor:
    """``mat @ dense`` for a sparse ``(m, n)`` matrix and ``(..., n, d)`` dense input.

    Differentiable with respect to ``dense``.
    """
    if isinstance(mat, sp.spmatrix) or isinstance(mat, sp.sparray):
        mat = to_torch_sparse(mat)
    if dense.shape[-2] != mat.shape[1]:
        raise ValueError(f"sparse matrix has {mat.shape[1]} columns, input has {dense.shape[-2]} rows")
    if dense.dim() == 2:
        return torch.sparse.mm(mat, dense)
    lead = dense.shape[:-2]
    n, d = dense.shape[-2:]
    flat = dense.reshape(-1, n, d).permute(1, 0, 2).reshape(n, -1)
    out = torch.sparse.mm(mat, flat).reshape(mat.shape[0], -1, d).permute(1, 0, 2)
    return out.reshape(lead + (mat.shape[0], d))


def gather_rows(x: torch.Tensor, index) -> torch.Tensor:
    idx = torch.as_tensor(np.asarray(index), dtype=torch.long)
    if idx.numel() and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError("row index out of range")
    return x.index_select(0, idx.reshape(-1)).reshape(tuple(idx.shape) + x.shape[1:])


def softmax_rows(x: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis, max-shifted for stability."""
    if x.shape[-1] == 0:
        raise ValueError("softmax over an empty axis")
    z = x - x.detach().amax(dim=-1, keepdim=True)
    e = torch.exp(z)
    return e / e.sum(dim=-1, keepdim=True)


def leaky_relu(x: torch.Tensor, slope: float = LEAKY_SLOPE) -> torch.Tensor:
    """Leaky ReLU; the derivative at exactly 0 is ``slope``."""
    return torch.where(x > 0, x, slope * x)


def l1_norm(x: torch.Tensor) -> torch.Tensor:
    return x.abs().sum()


def l2_norm(x: torch.Tensor, dim: int | None = None) -> torch.Tensor:
    if dim is None:
        return torch.sqrt((x * x).sum())
    return torch.sqrt((x * x).sum(dim=dim))


def reduce_sum(x: torch.Tensor, dim: int | None = None) -> torch.Tensor:
    return x.sum() if dim is None else x.sum(dim=dim)


def _axis_rot(angle: torch.Tensor, axis: int) -> torch.Tensor:
    c, s = torch.cos(angle), torch.sin(angle)
    one, zero = torch.ones_like(angle), torch.zeros_like(angle)
    if axis == 0:
        rows = [[one, zero, zero], [zero, c, -s], [zero, s, c]]
    elif axis == 1:
        rows = [[c, zero, s], [zero, one, zero], [-s, zero, c]]
    else:
        rows = [[c, -s, zero], [s, c, zero], [zero, zero, one]]
    return torch.stack([torch.stack(r, dim=-1) for r in rows], dim=-2)


def euler_to_rotmat(angles: torch.Tensor) -> torch.Tensor:
    """Intrinsic XYZ Euler angles ``(..., 3)`` in radians to ``(..., 3, 3)``.

    ``R = Rx(a) @ Ry(b) @ Rz(c)``.
    """
    if angles.shape[-1] != 3:
        raise ValueError("Euler angles need a trailing dimension of 3")
    return _axis_rot(angles[..., 0], 0) @ _axis_rot(angles[..., 1], 1) @ _axis_rot(angles[..., 2], 2)


def rotmat_to_euler(r: np.ndarray) -> np.ndarray:
    """Inverse of :func:`euler_to_rotmat` for a single matrix (numpy)."""
    r = np.asarray(r, dtype=np.float64)
    b = math.asin(max(-1.0, min(1.0, r[0, 2])))
    if abs(r[0, 2]) < 1 - 1e-12:
        a = math.atan2(-r[1, 2], r[2, 2])
        c = math.atan2(-r[0, 1], r[0, 0])
    else:
        a = math.atan2(r[2, 1], r[1, 1])
        c = 0.0
    return np.array([a, b, c])


def backward(root: torch.Tensor, leaves: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    """Gradients of a scalar ``root`` with respect to each leaf.

    Leaves that do not influence ``root`` get zero gradients.
    """
    if root.numel() != 1:
        raise ValueError(f"backward needs a scalar root, got shape {tuple(root.shape)}")
    grads = torch.autograd.grad(root.reshape(()), list(leaves), allow_unused=True)
    return [torch.zeros_like(l) if g is None else g for l, g in zip(leaves, grads)]


def numerical_grad(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = fn(x)
        flat[i] = old - h
        fm = fn(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def grad_close(analytic, numeric, rtol: float = 1e-4, atol_small: float = 1e-7, small: float = 1e-3) -> bool:
    """Elementwise relative check, absolute where the gradient is tiny."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    tiny = np.abs(n) < small
    rel = np.abs(a - n) / np.maximum(np.abs(n), 1e-300)
    ok = np.where(tiny, np.abs(a - n) < atol_small, rel < rtol)
    return bool(ok.all())


# -- Adam ------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[torch.Tensor]
    v: list[torch.Tensor]
    t: int = 0


def adam_init(params: Sequence[torch.Tensor]) -> AdamState:
    return AdamState([torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params])


def adam_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor],
    state: AdamState,
    lr: float | Sequence[float],
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[list[torch.Tensor], AdamState]:
    """One bias-corrected Adam update; returns new parameters and state.

    ``lr`` may be a scalar or one rate per parameter.
    """
    lrs = list(lr) if isinstance(lr, (list, tuple)) else [lr] * len(params)
    t = state.t + 1
    new_p, new_m, new_v = [], [], []
    c1, c2 = 1 - beta1 ** t, 1 - beta2 ** t
    with torch.no_grad():
        for p, g, m, v, a in zip(params, grads, state.m, state.v, lrs):
            m = beta1 * m + (1 - beta1) * g
            v = beta2 * v + (1 - beta2) * g * g
            step = a * (m / c1) / (torch.sqrt(v / c2) + eps)
            new_p.append(p - step)
            new_m.append(m)
            new_v.append(v)
    return new_p, AdamState(new_m, new_v, t)


@dataclass
class ParamGroup:
    name: str
    params: list[torch.Tensor]
    lr: float


@dataclass
class Adam:
    """Adam over named parameter groups with in-place updates.

    ``decay`` multiplies every group's rate by ``decay_factor`` after each
    ``decay_every`` steps (0 disables).
    """

    groups: list[ParamGroup]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_factor: float = 1.0
    decay_every: int = 0
    steps: int = 0
    _state: AdamState | None = field(default=None, repr=False)

    @property
    def params(self) -> list[torch.Tensor]:
        return [p for g in self.groups for p in g.params]

    def lrs(self) -> dict[str, float]:
        return {g.name: g.lr for g in self.groups}

    def step(self, grads: Sequence[torch.Tensor]) -> None:
        params = self.params
        if self._state is None:
            self._state = adam_init(params)
        rates = [g.lr for g in self.groups for _ in g.params]
        new, self._state = adam_step(params, grads, self._state, rates, self.beta1, self.beta2, self.eps)
        with torch.no_grad():
            for p, q in zip(params, new):
                p.copy_(q)
        self.steps += 1
        if self.decay_every and self.steps % self.decay_every == 0:
            for g in self.groups:
                g.lr *= self.decay_factor

    def scale_lr(self, factor: float) -> None:
        for g in self.groups:
            g.lr *= factor


# -- named tensor checkpoints ---------------------------------------------
#
# Little-endian layout:
#   magic  b"HMTC" | u32 version | u32 count
#   per tensor: u32 name_len | utf-8 name | u32 rank | u64 dims[rank] | f64 data[prod(dims)]

MAGIC = b"HMTC"
VERSION = 1


def write_tensors(path: str | os.PathLike, tensors: Mapping[str, np.ndarray | torch.Tensor]) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name, value in tensors.items():
        arr = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def read_tensors(path: str | os.PathLike) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a tensor checkpoint")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off: off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}Q", data, off)
        off += 8 * rank
        size = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(dims).copy()
        off += 8 * size
    return out
