"""Pose and mesh error metrics: alignment, mean error, PCK/AUC and F-score."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

PCK_RANGE_2D = (0.0, 30.0)  # pixels
PCK_RANGE_3D = (0.0, 50.0)  # millimetres


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class Similarity:
    rotation: np.ndarray  # (3, 3)
    scale: float
    translation: np.ndarray  # (3,)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(points) @ self.rotation.T + self.translation


def rigid_align(source, target, with_scale: bool = True) -> tuple[np.ndarray, Similarity]:
    """Least-squares ``s R x + t`` mapping ``source`` onto ``target`` (Umeyama).

    ``with_scale=False`` fixes ``s = 1`` for a 6-DoF rigid fit.
    """
    x = np.asarray(source, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2 or x.shape[1] != 3:
        raise ValueError(f"need matching (M, 3) arrays, got {x.shape} and {y.shape}")
    if x.shape[0] < 3:
        raise AlignmentError("alignment needs at least 3 points")
    mx, my = x.mean(0), y.mean(0)
    xc, yc = x - mx, y - my
    var_x = float((xc ** 2).sum()) / len(x)
    cov = yc.T @ xc / len(x)
    u, sig, vt = np.linalg.svd(cov)
    scale_ref = max(float(np.abs(x).max()), float(np.abs(y).max()), 1.0)
    if np.linalg.matrix_rank(xc, tol=1e-9 * scale_ref) < 2 or sig[1] <= 1e-12 * max(sig[0], 1e-300):
        raise AlignmentError("source points are collinear or coincident")
    d = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        d[2] = -1.0
    rot = u @ np.diag(d) @ vt
    s = float((sig * d).sum() / var_x) if with_scale else 1.0
    t = my - s * rot @ mx
    tf = Similarity(rot, s, t)
    return tf.apply(x), tf


def mean_error(pred, gt) -> float:
    """Average Euclidean distance between corresponding points."""
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    return float(np.linalg.norm(p - g, axis=-1).mean())


@dataclass(frozen=True)
class PckCurve:
    thresholds: np.ndarray
    values: np.ndarray
    auc: float

    def to_json(self) -> dict:
        return {"thresholds": self.thresholds.tolist(), "values": self.values.tolist(), "auc": self.auc}


def pck(pred, gt, thresholds) -> PckCurve:
    """Fraction of points within each threshold; AUC is the trapezoid area over the range width."""
    th = np.asarray(thresholds, dtype=np.float64)
    if th.ndim != 1 or th.size == 0:
        raise ValueError("thresholds must be a nonempty 1-D sequence")
    if (np.diff(th) < 0).any():
        raise ValueError("thresholds must be ascending")
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    dist = np.linalg.norm(p - g, axis=-1).ravel()
    values = (dist[None, :] <= th[:, None]).mean(axis=1)
    width = th[-1] - th[0]
    if width > 0:
        auc = float(np.sum((values[1:] + values[:-1]) * np.diff(th)) / 2.0 / width)
    else:
        auc = float(values[0])
    return PckCurve(th, values, auc)


def pck_range(pred, gt, dims: int, n_steps: int = 100) -> PckCurve:
    """PCK over the default 2D (pixels) or 3D (millimetres) range."""
    lo, hi = PCK_RANGE_2D if dims == 2 else PCK_RANGE_3D
    return pck(pred, gt, np.linspace(lo, hi, n_steps + 1))


def fscore(pred_cloud, gt_cloud, d: float) -> tuple[float, float, float]:
    """``(F, precision, recall)`` at distance ``d``; brute-force nearest neighbours."""
    p = np.asarray(pred_cloud, dtype=np.float64)
    g = np.asarray(gt_cloud, dtype=np.float64)
    if len(p) == 0 or len(g) == 0:
        raise ValueError("point clouds must be nonempty")
    dist = cdist(p, g)
    precision = float((dist.min(axis=1) <= d).mean())
    recall = float((dist.min(axis=0) <= d).mean())
    f = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return f, precision, recall


@dataclass(frozen=True)
class OrthoCamera:
    """Crop-space weak-perspective camera ``uv = scale * xy + translation``."""

    scale: float
    translation: tuple[float, float]

    def to_json(self) -> dict:
        return {"scale": self.scale, "translation": list(self.translation)}

    @classmethod
    def from_json(cls, d: dict) -> "OrthoCamera":
        return cls(float(d["scale"]), tuple(float(x) for x in d["translation"]))


def project_pose_2d(pose3d, cam: OrthoCamera) -> np.ndarray:
    p = np.asarray(pose3d, dtype=np.float64)
    return cam.scale * p[..., :2] + np.asarray(cam.translation)


def evaluate_pair(pred, gt, f_thresholds=(5.0, 15.0)) -> dict:
    """Errors before and after similarity alignment, plus F-scores on the aligned prediction."""
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    aligned, _ = rigid_align(p, g)
    out = {"error": mean_error(p, g), "aligned_error": mean_error(aligned, g)}
    for d in f_thresholds:
        out[f"f@{d:g}"] = fscore(aligned, g, d)[0]
    return out
