"""Fitting the hand model to 2D keypoints.

The objective is ``E_2D + E_bone + E_reg``:

* ``E_2D``   masked squared reprojection error of the 21 keypoints,
* ``E_bone`` absolute mismatch of projected and detected 2D bone lengths,
* ``E_reg``  ``lambda_theta * |theta|^2 + lambda_beta * |beta|^2``.

Optimisation runs in two stages. The first adjusts only scale, translation and
global orientation against the wrist and the four non-thumb MCP keypoints;
the second frees every parameter. Both use Adam with separate rates for the
camera, pose and shape groups.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import torch

from . import autodiff as ad
from .hand_model import (
    BONES,
    MCP_KEYPOINTS,
    N_KEYPOINTS,
    TIP_KEYPOINTS,
    WRIST,
    HandModelAssets,
    HandParams,
    model_vertices,
    pose_prior,
    skin_keypoints,
)

logger = logging.getLogger(__name__)

# Wrist plus the index, middle, ring and pinky MCPs.
STAGE1_KEYPOINTS = np.array([WRIST, 5, 9, 13, 17])


class FitError(ValueError):
    pass


class FitDivergedError(RuntimeError):
    """The objective became non-finite; ``last_params`` holds the last finite state."""

    def __init__(self, message: str, last_params: list[HandParams]):
        super().__init__(message)
        self.last_params = last_params


@dataclass(frozen=True)
class Camera:
    focal: float
    principal_point: tuple[float, float]

    def __post_init__(self):
        if not (math.isfinite(self.focal) and self.focal > 0):
            raise ValueError(f"focal must be positive, got {self.focal}")
        pp = tuple(float(x) for x in self.principal_point)
        if len(pp) != 2:
            raise ValueError("principal_point needs two coordinates")
        object.__setattr__(self, "principal_point", pp)

    def to_json(self) -> dict:
        return {"focal": self.focal, "principal_point": list(self.principal_point)}

    @classmethod
    def from_json(cls, d: dict) -> "Camera":
        return cls(float(d["focal"]), tuple(d["principal_point"]))


@dataclass(frozen=True)
class Keypoints2D:
    points: np.ndarray  # (21, 2) pixels
    confidence: np.ndarray  # (21,)

    def __post_init__(self):
        p = np.array(self.points, dtype=np.float64)
        c = np.array(self.confidence, dtype=np.float64)
        if p.shape != (N_KEYPOINTS, 2):
            raise ValueError(f"expected {N_KEYPOINTS} x 2 points, got {p.shape}")
        if c.shape != (N_KEYPOINTS,):
            raise ValueError(f"expected {N_KEYPOINTS} confidences, got {c.shape}")
        if not (np.isfinite(p).all() and np.isfinite(c).all()):
            raise ValueError("keypoints must be finite")
        if (c < 0).any() or (c > 1).any():
            raise ValueError("confidences must lie in [0, 1]")
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "confidence", c)

    @classmethod
    def full_confidence(cls, points) -> "Keypoints2D":
        return cls(points, np.ones(N_KEYPOINTS))


@dataclass(frozen=True)
class JointMask:
    """Per-keypoint multipliers on the reprojection residual."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        if w.shape != (N_KEYPOINTS,) or not (w > 0).all():
            raise ValueError("mask needs 21 positive weights")
        object.__setattr__(self, "weights", w)

    @classmethod
    def default(cls) -> "JointMask":
        w = np.ones(N_KEYPOINTS)
        w[TIP_KEYPOINTS] = 1.7
        w[WRIST] = 2.5
        w[MCP_KEYPOINTS] = 0.7
        return cls(w)


@dataclass
class FitConfig:
    stage1_iters: int = 1500
    stage2_iters: int = 2500
    lr_camera: float = 1e-2
    lr_pose: float = 1e-2
    lr_shape: float = 1e-5
    lr_decay: float = 0.95
    lr_decay_every: int = 500
    lambda_theta: float = 0.1
    lambda_beta: float = 1000.0
    weight_2d: float = 1.0
    weight_bone: float = 1.0
    weight_reg: float = 1.0
    confidence_floor: float = 0.05
    use_confidence: bool = True
    min_keypoints: int = 6
    # Millimetres per optimiser unit of translation. The rates above assume
    # metre-scale translation, as in the reference model.
    translation_unit: float = 1000.0
    mask: JointMask = field(default_factory=JointMask.default)

    def to_json(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "mask"}
        d["mask"] = self.mask.weights.tolist()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "FitConfig":
        d = dict(d)
        mask = JointMask(d.pop("mask")) if "mask" in d else JointMask.default()
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown fit config keys: {sorted(unknown)}")
        return cls(mask=mask, **d)


@dataclass
class FitResult:
    params: HandParams
    camera: Camera
    vertices: np.ndarray  # (N, 3)
    keypoints3d: np.ndarray  # (21, 3)
    projected: np.ndarray  # (21, 2)
    terms: dict[str, float]
    residuals: np.ndarray  # (21,) pixel distances
    iterations: dict[str, int]
    best_iteration: int  # -1 means the initial state was kept
    history: list[float]

    @property
    def objective(self) -> float:
        return self.terms["total"]

    def to_json(self) -> dict:
        return {
            "params": self.params.to_json(),
            "camera": self.camera.to_json(),
            "terms": self.terms,
            "residuals": self.residuals.tolist(),
            "keypoints3d": self.keypoints3d.tolist(),
            "projected": self.projected.tolist(),
            "iterations": self.iterations,
            "best_iteration": self.best_iteration,
        }


# -- objective terms ---------------------------------------------------------


def project(points3d, focal, principal_point) -> torch.Tensor:
    """Pinhole projection ``(f x / z + cx, f y / z + cy)`` of ``(..., M, 3)`` points.

    ``focal`` is a scalar or ``(...,)``; ``principal_point`` is ``(2,)`` or ``(..., 2)``.
    """
    p = torch.as_tensor(points3d, dtype=ad.DTYPE)
    f = torch.as_tensor(focal, dtype=ad.DTYPE)
    c = torch.as_tensor(principal_point, dtype=ad.DTYPE)
    z = p[..., 2]
    if (z <= 0).any():
        bad = torch.nonzero(z <= 0)[0].tolist()
        raise FitError(f"point {tuple(bad)} is not in front of the camera (z = {float(z[tuple(bad)]):.6g})")
    f = f.reshape(f.shape + (1, 1))
    return f * p[..., :2] / z.unsqueeze(-1) + c.unsqueeze(-2)


def project_camera(points3d, cam: Camera) -> torch.Tensor:
    return project(points3d, cam.focal, cam.principal_point)


def keypoint_weights(target: Keypoints2D, mask: JointMask, config: FitConfig | None = None) -> np.ndarray:
    """Effective per-keypoint residual weights: mask times confidence, zero below the floor."""
    config = config or FitConfig()
    lam = mask.weights.copy()
    if config.use_confidence:
        lam = lam * target.confidence
    lam[target.confidence < config.confidence_floor] = 0.0
    return lam


def e2d_term(projected: torch.Tensor, target: torch.Tensor, lam: torch.Tensor) -> torch.Tensor:
    """``sum_i (lam_i * |projected_i - target_i|)^2`` over the last two axes."""
    r = (projected - target) * lam.unsqueeze(-1)
    return (r * r).sum(dim=(-2, -1))


def e_bone_term(projected: torch.Tensor, target: torch.Tensor, bone_active: torch.Tensor) -> torch.Tensor:
    """Sum over active bones of ``| |J_j - J_i| - |Y_j - Y_i| |``."""
    i, j = torch.as_tensor(BONES[:, 0]), torch.as_tensor(BONES[:, 1])
    lp = ad.l2_norm(projected[..., j, :] - projected[..., i, :], dim=-1)
    lt = ad.l2_norm(target[..., j, :] - target[..., i, :], dim=-1)
    return ((lp - lt).abs() * bone_active).sum(dim=-1)


def e_reg_term(theta: torch.Tensor, beta: torch.Tensor, lambda_theta: float, lambda_beta: float) -> torch.Tensor:
    """Regulariser on the finger angles (root row excluded) and shape."""
    th = theta[..., 1:, :]
    return lambda_theta * (th * th).sum(dim=(-2, -1)) + lambda_beta * (beta * beta).sum(dim=-1)


def bone_activity(lam: np.ndarray) -> np.ndarray:
    return ((lam[BONES[:, 0]] > 0) & (lam[BONES[:, 1]] > 0)).astype(np.float64)


def _pack_target(target: Keypoints2D) -> torch.Tensor:
    return torch.as_tensor(target.points)


def e2d(assets: HandModelAssets, params: HandParams, cam: Camera, target: Keypoints2D,
        mask: JointMask | None = None, config: FitConfig | None = None) -> float:
    config = config or FitConfig()
    lam = keypoint_weights(target, mask or config.mask, config)
    proj = project_camera(_keypoints(assets, params), cam)
    return float(e2d_term(proj, _pack_target(target), torch.as_tensor(lam)))


def e_bone(assets: HandModelAssets, params: HandParams, cam: Camera, target: Keypoints2D,
           config: FitConfig | None = None) -> float:
    config = config or FitConfig()
    lam = keypoint_weights(target, config.mask, config)
    proj = project_camera(_keypoints(assets, params), cam)
    return float(e_bone_term(proj, _pack_target(target), torch.as_tensor(bone_activity(lam))))


def e_reg(assets: HandModelAssets, params: HandParams, lambda_theta: float = 0.1,
          lambda_beta: float = 1000.0) -> float:
    theta = pose_prior(torch.as_tensor(params.w), assets.cluster_centers)
    return float(e_reg_term(theta, torch.as_tensor(params.beta), lambda_theta, lambda_beta))


def _keypoints(assets: HandModelAssets, params: HandParams) -> torch.Tensor:
    theta = pose_prior(torch.as_tensor(params.w), assets.cluster_centers)
    with torch.no_grad():
        return skin_keypoints(assets, params.beta, theta, params.w0, params.transl, params.scale)


# -- optimisation ------------------------------------------------------------


@dataclass
class _Batch:
    """Optimisation variables for B independent samples."""

    beta: torch.Tensor  # (B, nb)
    w: torch.Tensor  # (B, K, C)
    w0: torch.Tensor  # (B, 3)
    t: torch.Tensor  # (B, 3) in optimiser units
    s: torch.Tensor  # (B,)

    def snapshot(self) -> "_Batch":
        return _Batch(*(x.detach().clone() for x in (self.beta, self.w, self.w0, self.t, self.s)))

    def params(self, b: int, unit: float) -> HandParams:
        return HandParams(
            self.beta[b].detach().numpy().copy(),
            self.w[b].detach().numpy().copy(),
            self.w0[b].detach().numpy().copy(),
            self.t[b].detach().numpy() * unit,
            float(self.s[b]),
        )


class _Objective:
    def __init__(self, assets, targets, cams, config):
        self.assets = assets
        self.config = config
        self.y = torch.as_tensor(np.stack([t.points for t in targets]))
        self.focal = torch.as_tensor([c.focal for c in cams], dtype=ad.DTYPE)
        self.pp = torch.as_tensor(np.array([c.principal_point for c in cams]))
        lam = np.stack([keypoint_weights(t, config.mask, config) for t in targets])
        self.lam_full = torch.as_tensor(lam)
        stage1 = np.zeros(N_KEYPOINTS)
        stage1[STAGE1_KEYPOINTS] = 1.0
        self.lam_stage1 = torch.as_tensor(lam * stage1)
        self.bones_full = torch.as_tensor(np.stack([bone_activity(l) for l in lam]))
        self.bones_stage1 = torch.as_tensor(np.stack([bone_activity(l) for l in lam * stage1]))

    def terms(self, v: _Batch, stage: int) -> dict[str, torch.Tensor]:
        c = self.config
        lam = self.lam_stage1 if stage == 1 else self.lam_full
        bones = self.bones_stage1 if stage == 1 else self.bones_full
        theta = pose_prior(v.w, self.assets.cluster_centers)
        kp = skin_keypoints(self.assets, v.beta, theta, v.w0, v.t * c.translation_unit, v.s)
        proj = project(kp, self.focal, self.pp)
        t2d = e2d_term(proj, self.y, lam)
        tb = e_bone_term(proj, self.y, bones)
        tr = e_reg_term(theta, v.beta, c.lambda_theta, c.lambda_beta)
        total = c.weight_2d * t2d + c.weight_bone * tb + c.weight_reg * tr
        return {"e2d": t2d, "e_bone": tb, "e_reg": tr, "total": total, "keypoints": kp, "projected": proj}


def _rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


_FLIPS = (np.eye(3), np.diag([-1.0, 1.0, -1.0]))  # identity, half-turn about y


def initial_params(assets: HandModelAssets, target: Keypoints2D, cam: Camera,
                   config: FitConfig | None = None) -> HandParams:
    """Rest-shape start with depth from bone lengths and an in-plane orientation.

    Depth follows from similar triangles between the mean detected 2D bone
    length and the mean rest-pose 3D bone length. The wrist is back-projected
    at that depth. The in-plane angle is the weighted 2D Procrustes rotation
    of the stage-one keypoints; both palm-facing and back-facing candidates
    are tried and the one with the lower full reprojection error wins.
    """
    config = config or FitConfig()
    lam = keypoint_weights(target, config.mask, config)
    rest = HandParams.rest(assets)
    rest_kp = _keypoints(assets, rest).numpy()  # wrist at the origin
    y = target.points
    bones = bone_activity(lam) > 0
    if not bones.any():
        raise FitError("no bone has two confident endpoints")
    b = BONES[bones]
    len2d = np.linalg.norm(y[b[:, 1]] - y[b[:, 0]], axis=1).mean()
    len3d = np.linalg.norm(rest_kp[b[:, 1]] - rest_kp[b[:, 0]], axis=1).mean()
    if len2d <= 1e-9:
        raise FitError("detected keypoints have no spatial extent")
    z = cam.focal * len3d / len2d
    pp = np.array(cam.principal_point)
    wrist_xy = (y[WRIST] - pp) * z / cam.focal
    transl = np.array([wrist_xy[0], wrist_xy[1], z])

    sel = STAGE1_KEYPOINTS[lam[STAGE1_KEYPOINTS] > 0]
    wts = lam[sel] if len(sel) >= 2 else lam
    sel = sel if len(sel) >= 2 else np.arange(N_KEYPOINTS)
    best = None
    for flip in _FLIPS:
        a = (rest_kp @ flip.T)[sel, :2]
        d = y[sel] - y[WRIST]
        cross = np.sum(wts * (a[:, 0] * d[:, 1] - a[:, 1] * d[:, 0]))
        dot = np.sum(wts * (a * d).sum(1))
        r = _rot_z(math.atan2(cross, dot)) @ flip
        w0 = ad.rotmat_to_euler(r)
        cand = replace(rest, w0=w0, transl=transl)
        err = e2d(assets, cand, cam, target, config.mask, config)
        if best is None or err < best[0]:
            best = (err, cand)
    return best[1]


Callback = Callable[[dict], None]


def fit_batch(assets: HandModelAssets, targets: list[Keypoints2D], cams: list[Camera],
              config: FitConfig | None = None, callback: Callback | None = None,
              init: list[HandParams] | None = None) -> list[FitResult]:
    """Fit B independent samples on one shared graph with a summed objective.

    Parameters are never shared between samples and Adam acts elementwise, so
    each result matches fitting that sample alone.

    ``callback`` receives one dict per iteration with keys ``stage``,
    ``iteration`` (within the stage), ``lrs`` (rates used for that step),
    ``active_keypoints``, ``groups`` (names of the optimised parameters per
    group) and ``objective`` (per-sample list).
    """
    config = config or FitConfig()
    if len(targets) != len(cams) or not targets:
        raise ValueError("need one camera per target and at least one target")
    for i, t in enumerate(targets):
        n_ok = int((t.confidence >= config.confidence_floor).sum())
        if n_ok < config.min_keypoints:
            raise FitError(f"sample {i}: only {n_ok} keypoints above the confidence floor")
    init = init or [initial_params(assets, t, c, config) for t, c in zip(targets, cams)]
    unit = config.translation_unit

    def stack(name):
        return torch.as_tensor(np.stack([np.asarray(getattr(p, name), dtype=np.float64) for p in init]))

    v = _Batch(stack("beta"), stack("w"), stack("w0"), stack("transl") / unit,
               torch.as_tensor([float(p.scale) for p in init], dtype=ad.DTYPE))
    obj = _Objective(assets, targets, cams, config)

    with torch.no_grad():
        init_total = obj.terms(v, 2)["total"].clone()
    best_total = init_total.clone()
    best_iter = torch.full((len(targets),), -1, dtype=torch.long)
    best = v.snapshot()
    history: list[list[float]] = []
    last_good = v.snapshot()

    schedule = [
        (1, config.stage1_iters, {"camera": ("s", "t"), "pose": ("w0",)}),
        (2, config.stage2_iters, {"camera": ("s", "t"), "pose": ("w0", "w"), "shape": ("beta",)}),
    ]
    base_lr = {"camera": config.lr_camera, "pose": config.lr_pose, "shape": config.lr_shape}
    global_iter = 0
    for stage, iters, groups in schedule:
        tensors = {name: getattr(v, name) for names in groups.values() for name in names}
        for x in tensors.values():
            x.requires_grad_(True)
        opt = ad.Adam([ad.ParamGroup(g, [tensors[n] for n in names], base_lr[g]) for g, names in groups.items()])
        active = STAGE1_KEYPOINTS.tolist() if stage == 1 else list(range(N_KEYPOINTS))
        for it in range(iters):
            # Step decay on the global iteration count.
            factor = config.lr_decay ** (global_iter // config.lr_decay_every) if config.lr_decay_every else 1.0
            for g in opt.groups:
                g.lr = base_lr[g.name] * factor
            terms = obj.terms(v, stage)
            total = terms["total"]
            if not torch.isfinite(total).all():
                bad = torch.nonzero(~torch.isfinite(total)).flatten().tolist()
                raise FitDivergedError(
                    f"objective became non-finite for samples {bad} at stage {stage} iteration {it}",
                    [last_good.params(b, unit) for b in range(len(targets))],
                )
            last_good = v.snapshot()
            if stage == 2:
                # The value belongs to the parameters before this step.
                with torch.no_grad():
                    improved = total < best_total
                    if improved.any():
                        best_total = torch.where(improved, total.detach(), best_total)
                        best_iter = torch.where(improved, torch.full_like(best_iter, it), best_iter)
                        for name in ("beta", "w", "w0", "t", "s"):
                            cur, old = getattr(v, name).detach(), getattr(best, name)
                            mask = improved.reshape((-1,) + (1,) * (cur.dim() - 1))
                            setattr(best, name, torch.where(mask, cur, old))
            history.append(total.detach().tolist())
            if callback is not None:
                callback({
                    "stage": stage,
                    "iteration": it,
                    "global_iteration": global_iter,
                    "lrs": opt.lrs(),
                    "active_keypoints": active,
                    "groups": {g: list(n) for g, n in groups.items()},
                    "objective": total.detach().tolist(),
                })
            grads = ad.backward(total.sum(), opt.params)
            opt.step(grads)
            global_iter += 1
        for x in tensors.values():
            x.requires_grad_(False)

    # Objective of the final state counts as a candidate as well.
    with torch.no_grad():
        final_total = obj.terms(v, 2)["total"]
        improved = final_total < best_total
        if improved.any():
            best_total = torch.where(improved, final_total, best_total)
            best_iter = torch.where(improved, torch.full_like(best_iter, config.stage2_iters), best_iter)
            for name in ("beta", "w", "w0", "t", "s"):
                cur, old = getattr(v, name).detach(), getattr(best, name)
                mask = improved.reshape((-1,) + (1,) * (cur.dim() - 1))
                setattr(best, name, torch.where(mask, cur, old))
        terms = obj.terms(best, 2)

    results = []
    for b in range(len(targets)):
        params = best.params(b, unit)
        proj = terms["projected"][b].numpy()
        results.append(
            FitResult(
                params=params,
                camera=cams[b],
                vertices=model_vertices(assets, params),
                keypoints3d=terms["keypoints"][b].numpy().copy(),
                projected=proj.copy(),
                terms={k: float(terms[k][b]) for k in ("e2d", "e_bone", "e_reg", "total")},
                residuals=np.linalg.norm(proj - targets[b].points, axis=1),
                iterations={"stage1": config.stage1_iters, "stage2": config.stage2_iters},
                best_iteration=int(best_iter[b]),
                history=[h[b] for h in history],
            )
        )
    return results


def fit(assets: HandModelAssets, target: Keypoints2D, cam: Camera, config: FitConfig | None = None,
        callback: Callback | None = None, init: HandParams | None = None) -> FitResult:
    """Two-stage fit of the model to one set of 2D keypoints; returns the best iterate."""
    return fit_batch(assets, [target], [cam], config, callback, None if init is None else [init])[0]


def recover_depth(world_vertices, projected, cam: Camera, eps: float = 1e-9) -> float:
    """Camera distance from the spread ratio of world and image x coordinates."""
    world_x = np.asarray(world_vertices, dtype=np.float64)[:, 0]
    image_x = np.asarray(projected, dtype=np.float64)[:, 0]
    spread = float(np.std(image_x))
    if not spread > eps:
        raise FitError("projected x coordinates have no spread; depth is undefined")
    return cam.focal * float(np.std(world_x)) / spread
