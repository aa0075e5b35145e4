"""Articulated hand model with a convex-hull pose prior.

The model follows the usual shape-then-skin structure::

    v_shaped = template + shape_basis @ beta
    joints   = joint columns of the regressor applied to v_shaped
    v_posed  = sum_k W[:, k] * G_k(theta) @ v_shaped       (linear blend skinning)
    v_out    = scale * v_posed + transl

Joint angles for the 15 finger joints come from :func:`pose_prior`, a softmax
mix of per-joint cluster centers; the root rotation is a free Euler triple.
All angles are intrinsic XYZ Euler angles in radians.

:func:`generate_synthetic_assets` builds a stand-in for learned model data: a
procedurally shaped, five-fingered right hand in millimetres with the wrist at
the origin, fingers along -y and the palm facing -z.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import torch
from scipy.cluster.vq import kmeans2
from scipy.optimize import nnls
from skimage.measure import marching_cubes

from . import autodiff as ad
from .mesh import TriMesh, build_adjacency, load_mesh, save_mesh, signed_volume
from .sampling import decimate

N_JOINTS = 16
N_TIPS = 5
N_KEYPOINTS = N_JOINTS + N_TIPS
N_CLUSTERS = 64
N_BETAS = 10

FINGERS = ("thumb", "index", "middle", "ring", "pinky")
# Kinematic joints: 0 is the wrist, then three per finger from base to distal.
PARENTS = np.array([-1] + [p for f in range(5) for p in (0, 1 + 3 * f, 2 + 3 * f)])

# 21-point hand keypoint layout: wrist, then (base, middle, distal, tip) per finger.
JOINT_TO_KEYPOINT = np.array([0] + [1 + 4 * f + j for f in range(5) for j in range(3)])
TIP_KEYPOINTS = np.array([4 + 4 * f for f in range(5)])
KEYPOINT_PARENTS = np.array([-1] + [0 if j == 0 else 1 + 4 * f + j - 1 for f in range(5) for j in range(4)])
BONES = np.array([(int(KEYPOINT_PARENTS[i]), i) for i in range(1, N_KEYPOINTS)])
WRIST = 0
MCP_KEYPOINTS = np.array([1, 5, 9, 13, 17])


@dataclass(frozen=True)
class FingerSpec:
    base: tuple[float, float, float]
    directions: tuple[tuple[float, float, float], ...]
    lengths: tuple[float, float, float]
    radii: tuple[float, float, float, float]


def _dir(deg: float, dip: float = 0.0) -> tuple[float, float, float]:
    a = np.deg2rad(deg)
    d = np.array([np.sin(a), -np.cos(a), dip])
    return tuple(d / np.linalg.norm(d))


GEOMETRY = {
    "thumb": FingerSpec(
        (22.0, -24.0, -4.0),
        ((0.75, -0.6, -0.28), (0.55, -0.8, -0.25), (0.4, -0.9, -0.2)),
        (36.0, 30.0, 24.0),
        (11.0, 10.0, 9.0, 8.2),
    ),
    "index": FingerSpec((24.0, -86.0, 0.0), (_dir(8),) * 3, (40.0, 24.0, 19.0), (9.0, 8.4, 7.8, 7.2)),
    "middle": FingerSpec((6.0, -90.0, 0.0), (_dir(1),) * 3, (44.0, 27.0, 20.0), (9.3, 8.6, 8.0, 7.4)),
    "ring": FingerSpec((-11.0, -86.0, 0.0), (_dir(-7),) * 3, (41.0, 26.0, 20.0), (8.8, 8.2, 7.6, 7.0)),
    "pinky": FingerSpec((-27.5, -78.0, 0.0), (_dir(-15),) * 3, (32.0, 19.0, 17.0), (7.8, 7.2, 6.6, 6.1)),
}
PALM_CENTER = np.array([-1.0, -41.0, 0.0])
PALM_HALF = np.array([32.0, 50.0, 13.0])
PALM_ROUND = 10.0
BLEND = 5.0

# Per-joint Euler bounds (radians) used to sample plausible poses; rows are
# (min, max) for the x, y and z angles. Positive x flexes a finger toward the palm.
_MCP = ((-0.35, 1.45), (-0.15, 0.15), (-0.3, 0.3))
_PIP = ((0.0, 1.7), (-0.05, 0.05), (-0.08, 0.08))
_DIP = ((0.0, 1.3), (-0.05, 0.05), (-0.05, 0.05))
JOINT_LIMITS = np.array(
    [((0.0, 0.0),) * 3]
    + [
        ((-0.4, 0.8), (-0.6, 0.6), (-0.5, 0.6)),
        ((-0.2, 0.9), (-0.3, 0.3), (-0.3, 0.3)),
        ((-0.2, 1.2), (-0.1, 0.1), (-0.1, 0.1)),
    ]
    + [lim for _ in range(4) for lim in (_MCP, _PIP, _DIP)]
)  # (K, 3, 2)


def finger_points(spec: FingerSpec) -> np.ndarray:
    """Base, two interior joints and the bone end of a finger, shape (4, 3)."""
    pts = [np.array(spec.base)]
    for d, length in zip(spec.directions, spec.lengths):
        d = np.array(d) / np.linalg.norm(d)
        pts.append(pts[-1] + length * d)
    return np.array(pts)


def design_joints() -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Intended joint centres (K, 3), finger bone ends (5, 3) and tip radii (5,)."""
    joints = [np.zeros(3)]
    ends, tip_r = [], []
    for name in FINGERS:
        pts = finger_points(GEOMETRY[name])
        joints.extend(pts[:3])
        ends.append(pts[3])
        tip_r.append(GEOMETRY[name].radii[3])
    return np.array(joints), np.array(ends), np.array(tip_r)


def _capsule_sdf(p: np.ndarray, a: np.ndarray, b: np.ndarray, ra: float, rb: float) -> np.ndarray:
    ab = b - a
    t = np.clip(((p - a) @ ab) / (ab @ ab), 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.linalg.norm(p - closest, axis=1) - (ra + (rb - ra) * t)


def _smin(a: np.ndarray, b: np.ndarray, k: float) -> np.ndarray:
    h = np.clip(0.5 + 0.5 * (b - a) / k, 0.0, 1.0)
    return b + (a - b) * h - k * h * (1 - h)


def hand_sdf(p: np.ndarray) -> np.ndarray:
    q = np.abs(p - PALM_CENTER) - (PALM_HALF - PALM_ROUND)
    palm = np.linalg.norm(np.maximum(q, 0), axis=1) + np.minimum(q.max(axis=1), 0) - PALM_ROUND
    d = palm
    for name in FINGERS:
        spec = GEOMETRY[name]
        pts = finger_points(spec)
        finger = np.full(len(p), np.inf)
        for i in range(3):
            finger = np.minimum(finger, _capsule_sdf(p, pts[i], pts[i + 1], spec.radii[i], spec.radii[i + 1]))
        d = _smin(d, finger, BLEND)
    return d


def _surface(voxel: float) -> TriMesh:
    lo = np.array([-60.0, -195.0, -45.0])
    hi = np.array([100.0, 20.0, 35.0])
    axes = [np.arange(l, h + voxel, voxel) for l, h in zip(lo, hi)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), -1)
    vol = hand_sdf(grid.reshape(-1, 3)).reshape(grid.shape[:3])
    verts, faces, _, _ = marching_cubes(vol, level=0.0, spacing=(voxel,) * 3, allow_degenerate=False)
    mesh = TriMesh(verts + lo, faces)
    if signed_volume(mesh) < 0:
        mesh = TriMesh(mesh.vertices, mesh.faces[:, ::-1])
    return mesh


def hand_surface(n_vertices: int) -> TriMesh:
    """Closed genus-0 hand surface with exactly ``n_vertices`` vertices."""
    voxel = 3.0
    while True:
        dense = _surface(voxel)
        if dense.n_vertices >= 3 * n_vertices:
            break
        voxel *= 0.7
    mesh, _ = decimate(dense, n_vertices)
    build_adjacency(mesh)
    return mesh


def _bone_segments(joints: np.ndarray, ends: np.ndarray) -> list[list[tuple[np.ndarray, np.ndarray]]]:
    """Segments driven by each joint: the wrist drives the palm, others their child bone."""
    segs: list[list[tuple[np.ndarray, np.ndarray]]] = [[] for _ in range(N_JOINTS)]
    for f in range(5):
        j0 = 1 + 3 * f
        segs[0].append((joints[0], joints[j0]))
        for j in range(3):
            a = joints[j0 + j]
            b = joints[j0 + j + 1] if j < 2 else ends[f]
            segs[j0 + j].append((a, b))
    return segs


def _segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return _capsule_sdf(p, a, b, 0.0, 0.0)


def skinning_weights(vertices: np.ndarray, joints: np.ndarray, ends: np.ndarray, sigma: float = 5.0) -> np.ndarray:
    segs = _bone_segments(joints, ends)
    dist = np.stack(
        [np.min([_segment_distance(vertices, a, b) for a, b in segs[k]], axis=0) for k in range(N_JOINTS)],
        axis=1,
    )
    w = np.exp(-(((dist - dist.min(axis=1, keepdims=True)) / sigma) ** 2))
    # Keep the four strongest influences.
    drop = np.argsort(-w, axis=1, kind="stable")[:, 4:]
    np.put_along_axis(w, drop, 0.0, axis=1)
    return w / w.sum(axis=1, keepdims=True)


def _convex_weights(points: np.ndarray, target: np.ndarray) -> np.ndarray:
    # Non-negative least squares with a heavily weighted sum-to-one row.
    a = np.vstack([points.T, 1e3 * np.ones(len(points))])
    b = np.append(target, 1e3)
    w, _ = nnls(a, b)
    return w / w.sum()


def build_regressor(vertices: np.ndarray, joints: np.ndarray, ends: np.ndarray, tip_r: np.ndarray,
                    n_support: int = 16) -> sp.csc_matrix:
    """Sparse (N, 21) keypoint regressor with convex columns, keypoint order."""
    n = len(vertices)
    rows, cols, vals = [], [], []
    for j in range(N_JOINTS):
        d = np.linalg.norm(vertices - joints[j], axis=1)
        support = np.argsort(d, kind="stable")[:n_support]
        w = _convex_weights(vertices[support], joints[j])
        keep = w > 1e-12
        rows.extend(support[keep].tolist())
        cols.extend([int(JOINT_TO_KEYPOINT[j])] * int(keep.sum()))
        vals.extend((w[keep] / w[keep].sum()).tolist())
    for f in range(5):
        j_last = 3 + 3 * f
        direction = ends[f] - joints[j_last]
        direction /= np.linalg.norm(direction)
        tip = ends[f] + tip_r[f] * direction
        rows.append(int(np.argmin(np.linalg.norm(vertices - tip, axis=1))))
        cols.append(int(TIP_KEYPOINTS[f]))
        vals.append(1.0)
    return sp.csc_matrix((vals, (rows, cols)), shape=(n, N_KEYPOINTS))


def shape_basis(vertices: np.ndarray, weights: np.ndarray, joints: np.ndarray) -> np.ndarray:
    """Ten smooth displacement modes (N*3, 10), roughly 8-10% size change per unit."""
    n = len(vertices)
    modes = []
    modes.append(0.08 * vertices)
    for axis, k in ((0, 0.08), (1, 0.08), (2, 0.10)):
        m = np.zeros_like(vertices)
        m[:, axis] = k * vertices[:, axis]
        modes.append(m)
    finger_mass = np.stack([weights[:, 1 + 3 * f: 4 + 3 * f].sum(1) for f in range(5)], 1)
    for f in range(5):
        base = joints[1 + 3 * f]
        axis = joints[3 + 3 * f] - base
        axis /= np.linalg.norm(axis)
        along = np.clip((vertices - base) @ axis, 0.0, None)
        modes.append(0.1 * (along * finger_mass[:, f])[:, None] * axis)
    girth = np.zeros_like(vertices)
    for f in range(5):
        base = joints[1 + 3 * f]
        axis = joints[3 + 3 * f] - base
        axis /= np.linalg.norm(axis)
        rel = vertices - base
        radial = rel - (rel @ axis)[:, None] * axis
        girth += 0.1 * finger_mass[:, f:f + 1] * radial
    modes.append(girth)
    basis = np.stack([m.reshape(n * 3) for m in modes], axis=1)
    assert basis.shape[1] == N_BETAS
    return basis


def sample_cluster_centers(rng: np.random.Generator, n_samples: int = 5000,
                           n_clusters: int = N_CLUSTERS, iters: int = 50) -> np.ndarray:
    """Per-joint k-means (k-means++ seeding) over uniformly sampled in-limit angles."""
    centers = np.zeros((N_JOINTS, n_clusters, 3))
    for j in range(1, N_JOINTS):
        lo, hi = JOINT_LIMITS[j, :, 0], JOINT_LIMITS[j, :, 1]
        samples = lo + (hi - lo) * rng.random((n_samples, 3))
        c, _ = kmeans2(samples, n_clusters, iter=iters, minit="++", seed=rng)
        centers[j] = c
    return centers


@dataclass
class HandModelAssets:
    template: TriMesh
    parents: np.ndarray
    joint_rest: np.ndarray  # (K, 3)
    skin_weights: np.ndarray  # (N, K)
    shape_basis: np.ndarray  # (N*3, n_betas)
    regressor: sp.csc_matrix  # (N, K+F), columns in keypoint order
    cluster_centers: np.ndarray  # (K, C, 3)
    meta: dict = field(default_factory=dict)

    @property
    def n_vertices(self) -> int:
        return self.template.n_vertices

    @property
    def n_betas(self) -> int:
        return self.shape_basis.shape[1]

    @cached_property
    def torch(self) -> "_TorchAssets":
        return _TorchAssets(self)

    def save(self, directory: str | os.PathLike) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        save_mesh(self.template, d / "template.obj")
        info = {
            "parents": self.parents.tolist(),
            "joint_rest": self.joint_rest.tolist(),
            "n_betas": int(self.n_betas),
            "n_joints": N_JOINTS,
            "n_tips": N_TIPS,
            "n_clusters": int(self.cluster_centers.shape[1]),
            "euler_convention": "intrinsic-xyz-radians",
            "keypoint_layout": "openpose-hand-21",
            "joint_to_keypoint": JOINT_TO_KEYPOINT.tolist(),
            "meta": self.meta,
        }
        (d / "assets.json").write_text(json.dumps(info, indent=2, sort_keys=True), encoding="utf-8")
        coo = self.regressor.tocoo()
        order = np.lexsort((coo.row, coo.col))
        ad.write_tensors(
            d / "tensors.bin",
            {
                "skin_weights": self.skin_weights,
                "shape_basis": self.shape_basis,
                "regressor_rows": coo.row[order].astype(np.float64),
                "regressor_cols": coo.col[order].astype(np.float64),
                "regressor_vals": coo.data[order],
                "cluster_centers": self.cluster_centers,
            },
        )

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "HandModelAssets":
        d = Path(directory)
        template = load_mesh(d / "template.obj")
        info = json.loads((d / "assets.json").read_text(encoding="utf-8"))
        t = ad.read_tensors(d / "tensors.bin")
        reg = sp.csc_matrix(
            (t["regressor_vals"], (t["regressor_rows"].astype(np.int64), t["regressor_cols"].astype(np.int64))),
            shape=(template.n_vertices, N_KEYPOINTS),
        )
        return cls(
            template=template,
            parents=np.array(info["parents"], dtype=np.int64),
            joint_rest=np.array(info["joint_rest"]),
            skin_weights=t["skin_weights"],
            shape_basis=t["shape_basis"],
            regressor=reg,
            cluster_centers=t["cluster_centers"],
            meta=info.get("meta", {}),
        )


class _TorchAssets:
    """Float64 torch views of the assets, built once per asset object.

    ``support`` lists the vertices any regressor column touches; keypoints
    depend on nothing else, which lets fitting skin only those rows.
    """

    def __init__(self, a: HandModelAssets):
        self.template = torch.tensor(a.template.vertices)
        self.weights = torch.as_tensor(a.skin_weights)
        self.shape_basis = torch.as_tensor(a.shape_basis)
        self.regressor_t = torch.as_tensor(a.regressor.T.toarray())  # (21, N)
        self.joint_regressor_t = self.regressor_t[torch.as_tensor(JOINT_TO_KEYPOINT)]  # (K, N)
        self.centers = torch.as_tensor(a.cluster_centers)
        self.parents = [int(p) for p in a.parents]

        n = a.n_vertices
        support = torch.as_tensor(np.unique(a.regressor.tocoo().row), dtype=torch.long)
        self.support = support
        self.sub_template = self.template[support]
        self.sub_weights = self.weights[support]
        self.sub_shape_basis = self.shape_basis.reshape(n, 3, -1)[support].reshape(len(support) * 3, -1)
        self.sub_regressor_t = self.regressor_t[:, support]
        self.sub_joint_regressor_t = self.joint_regressor_t[:, support]


def generate_synthetic_assets(seed: int = 0, n_vertices: int = 778) -> HandModelAssets:
    """Procedural hand assets; identical output for identical arguments."""
    if n_vertices < 200:
        raise ValueError("n_vertices must be at least 200")
    rng = np.random.default_rng(seed)
    template = hand_surface(n_vertices)
    joints, ends, tip_r = design_joints()
    weights = skinning_weights(template.vertices, joints, ends)
    regressor = build_regressor(template.vertices, joints, ends, tip_r)
    joint_rest = (regressor.T @ template.vertices)[JOINT_TO_KEYPOINT]
    basis = shape_basis(template.vertices, weights, joint_rest)
    centers = sample_cluster_centers(rng)
    return HandModelAssets(
        template=template,
        parents=PARENTS.copy(),
        joint_rest=joint_rest,
        skin_weights=weights,
        shape_basis=basis,
        regressor=regressor,
        cluster_centers=centers,
        meta={"seed": seed, "generator": "synthetic-capsule-hand", "units": "mm"},
    )


# -- differentiable model ----------------------------------------------------


def pose_prior(w: torch.Tensor, centers) -> torch.Tensor:
    """Joint angles as softmax-weighted convex combinations of cluster centers.

    ``w`` is ``(..., K, C)``, ``centers`` ``(K, C, 3)``; returns ``(..., K, 3)``.
    """
    centers = torch.as_tensor(centers, dtype=ad.DTYPE)
    if w.shape[-2:] != centers.shape[:2]:
        raise ValueError(f"logits {tuple(w.shape[-2:])} do not match centers {tuple(centers.shape[:2])}")
    return (ad.softmax_rows(w).unsqueeze(-1) * centers).sum(-2)


def _rigid(r: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    top = torch.cat([r, t.unsqueeze(-1)], dim=-1)
    bottom = torch.zeros(r.shape[:-2] + (1, 4), dtype=r.dtype)
    bottom[..., 0, 3] = 1.0
    return torch.cat([top, bottom], dim=-2)


def forward_kinematics(rotations: torch.Tensor, joints: torch.Tensor, parents) -> torch.Tensor:
    """Global 4x4 transforms ``(..., K, 4, 4)`` from local rotations and rest joints."""
    glob = []
    for k, p in enumerate(parents):
        if p < 0:
            glob.append(_rigid(rotations[..., k, :, :], joints[..., k, :]))
        else:
            local = _rigid(rotations[..., k, :, :], joints[..., k, :] - joints[..., p, :])
            glob.append(glob[p] @ local)
    return torch.stack(glob, dim=-3)


def _lbs(template, basis, weights, joint_reg_t, parents, beta, theta, w0, transl, scale):
    beta = torch.as_tensor(beta, dtype=ad.DTYPE)
    theta = torch.as_tensor(theta, dtype=ad.DTYPE)
    w0 = torch.as_tensor(w0, dtype=ad.DTYPE)
    transl = torch.as_tensor(transl, dtype=ad.DTYPE)
    scale = torch.as_tensor(scale, dtype=ad.DTYPE)
    n = template.shape[0]
    offsets = (beta @ basis.T).reshape(beta.shape[:-1] + (n, 3))
    v_shaped = template + offsets
    joints = joint_reg_t @ v_shaped
    angles = torch.cat([w0.unsqueeze(-2), theta[..., 1:, :]], dim=-2)
    rots = ad.euler_to_rotmat(angles)
    glob = forward_kinematics(rots, joints, parents)
    # Remove the rest-pose joint offset so each transform acts on rest positions.
    r = glob[..., :3, :3]
    t = glob[..., :3, 3] - (r @ joints.unsqueeze(-1)).squeeze(-1)
    blend_r = torch.einsum("nk,...kij->...nij", weights, r)
    blend_t = torch.einsum("nk,...ki->...ni", weights, t)
    posed = (blend_r @ v_shaped.unsqueeze(-1)).squeeze(-1) + blend_t
    return scale.unsqueeze(-1).unsqueeze(-1) * posed + transl.unsqueeze(-2)


def skin(assets: HandModelAssets, beta, theta, w0, transl, scale) -> torch.Tensor:
    """Posed vertices ``(..., N, 3)``.

    ``theta`` is ``(..., K, 3)``; its root row is ignored in favour of the
    unrestricted global orientation ``w0``. Joint centres follow the shape
    through the regressor, so they coincide with ``joint_rest`` at ``beta = 0``.
    """
    ta = assets.torch
    return _lbs(ta.template, ta.shape_basis, ta.weights, ta.joint_regressor_t, ta.parents,
                beta, theta, w0, transl, scale)


def skin_keypoints(assets: HandModelAssets, beta, theta, w0, transl, scale) -> torch.Tensor:
    """``regress_keypoints(skin(...))`` computed on the regressor support only."""
    ta = assets.torch
    v = _lbs(ta.sub_template, ta.sub_shape_basis, ta.sub_weights, ta.sub_joint_regressor_t, ta.parents,
             beta, theta, w0, transl, scale)
    return ta.sub_regressor_t @ v


def regress_keypoints(assets: HandModelAssets, vertices) -> torch.Tensor:
    """21 keypoints ``(..., 21, 3)`` in the keypoint-file order."""
    v = vertices if torch.is_tensor(vertices) else torch.tensor(np.asarray(vertices, dtype=np.float64))
    v = v.to(ad.DTYPE)
    if v.shape[-2] != assets.n_vertices:
        raise ValueError(f"expected {assets.n_vertices} vertices, got {v.shape[-2]}")
    return assets.torch.regressor_t @ v


@dataclass
class HandParams:
    beta: np.ndarray
    w: np.ndarray
    w0: np.ndarray
    transl: np.ndarray
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        for name in ("beta", "w", "w0", "transl"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.isfinite(arr).all():
                raise ValueError(f"{name} is not finite")
            setattr(self, name, arr)

    @classmethod
    def rest(cls, assets: HandModelAssets) -> "HandParams":
        k, c, _ = assets.cluster_centers.shape
        return cls(np.zeros(assets.n_betas), np.zeros((k, c)), np.zeros(3), np.zeros(3), 1.0)

    def to_json(self) -> dict:
        return {
            "beta": self.beta.tolist(),
            "w": self.w.tolist(),
            "w0": self.w0.tolist(),
            "transl": self.transl.tolist(),
            "scale": float(self.scale),
        }

    @classmethod
    def from_json(cls, d: dict) -> "HandParams":
        return cls(np.array(d["beta"]), np.array(d["w"]), np.array(d["w0"]), np.array(d["transl"]), float(d["scale"]))


def model_vertices(assets: HandModelAssets, params: HandParams) -> np.ndarray:
    theta = pose_prior(torch.as_tensor(params.w), assets.cluster_centers)
    with torch.no_grad():
        v = skin(assets, params.beta, theta, params.w0, params.transl, params.scale)
    return v.numpy()


def sample_params(assets: HandModelAssets, rng: np.random.Generator, depth: float = 1200.0,
                  logit_scale: float = 2.0, shape_scale: float = 0.0, max_tilt: float = 0.4) -> HandParams:
    """A random prior pose whose keypoint centroid sits ``depth`` mm in front of the camera.

    In-plane rotation is uniform; the two out-of-plane angles stay within ``max_tilt``.
    """
    k, c, _ = assets.cluster_centers.shape
    w = rng.normal(scale=logit_scale, size=(k, c))
    w0 = np.array([rng.uniform(-max_tilt, max_tilt), rng.uniform(-max_tilt, max_tilt), rng.uniform(-np.pi, np.pi)])
    beta = rng.normal(scale=shape_scale, size=assets.n_betas) if shape_scale > 0 else np.zeros(assets.n_betas)
    theta = pose_prior(torch.as_tensor(w), assets.cluster_centers)
    with torch.no_grad():
        kp = skin_keypoints(assets, beta, theta, w0, np.zeros(3), 1.0).numpy()
    transl = np.array([0.0, 0.0, depth]) - kp.mean(0)
    return HandParams(beta, w, w0, transl, 1.0)


def params_keypoints(assets: HandModelAssets, params: HandParams) -> np.ndarray:
    """21 posed keypoints for ``params`` without skinning the full mesh."""
    theta = pose_prior(torch.as_tensor(params.w), assets.cluster_centers)
    with torch.no_grad():
        return skin_keypoints(assets, params.beta, theta, params.w0, params.transl, params.scale).numpy()
