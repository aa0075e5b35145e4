"""Image encoder, spiral mesh decoder, mesh loss and the training loop.

The decoder maps a latent code to a mesh in image-aligned coordinates::

    FC -> reshape (n_coarsest, w_0)
       -> [upsample with Q_u, spiral conv to w_i, leaky ReLU]  for each finer level
       -> spiral conv to 3 channels (linear output)

Upsampling matrices are fixed; only the FC and spiral kernels are learned.
Targets are normalised with a per-vertex mean and a per-axis scale from the
training set, and the
network predicts in that normalised space.
"""

from __future__ import annotations

import json
import logging
import math
import os
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import autodiff as ad
from .hand_model import HandModelAssets, regress_keypoints
from .mesh import build_adjacency, edge_set
from .sampling import MeshHierarchy
from .spiral import SpiralTable, build_spiral_table, default_spiral_length, spiral_conv

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class DecoderConfig:
    latent_dim: int = 64
    widths: list[int] = field(default_factory=lambda: [64, 32, 32, 16, 16])  # coarse to fine
    spiral_k: int = 2
    spiral_lengths: list[int] | None = None  # per level, coarse to fine; None = defaults
    spiral_seed: int = 0
    slope: float = ad.LEAKY_SLOPE

    def validate(self, n_levels: int) -> None:
        if self.latent_dim <= 0 or any(w <= 0 for w in self.widths):
            raise ValueError("latent_dim and widths must be positive")
        if len(self.widths) != n_levels:
            raise ValueError(f"need one width per level ({n_levels}), got {len(self.widths)}")
        if self.spiral_lengths is not None and len(self.spiral_lengths) != n_levels:
            raise ValueError("need one spiral length per level")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 150
    decay_epochs: list[int] = field(default_factory=lambda: [90, 120])
    decay_factor: float = 0.1
    batch_size: int = 32
    crop: int = 192
    lambda_vertex: float = 0.01
    lambda_edge: float = 0.01
    augment: bool = True
    max_rotation_deg: float = 30.0
    scale_range: tuple[float, float] = (0.8, 1.2)
    max_translation: float = 0.1  # fraction of the crop
    encoder_channels: list[int] = field(default_factory=lambda: [8, 16, 32, 32, 64])
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.epochs <= 0 or self.batch_size <= 0 or self.crop <= 0:
            raise ValueError("lr, epochs, batch_size and crop must be positive")
        if any(e >= self.epochs or e < 0 for e in self.decay_epochs):
            raise ValueError("decay epochs must lie inside [0, epochs)")
        if self.lambda_vertex < 0 or self.lambda_edge < 0:
            raise ValueError("loss weights must be nonnegative")
        self.scale_range = tuple(self.scale_range)


def config_from_json(cls, d: dict):
    unknown = set(d) - set(cls.__dataclass_fields__)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


@dataclass
class Sample:
    image: np.ndarray  # (crop, crop, 3) float, 0..1 before normalisation
    mesh: np.ndarray  # (N, 3) image-aligned


def _he_normal(gen: torch.Generator, fan_in: int, shape) -> torch.Tensor:
    return torch.randn(shape, generator=gen, dtype=ad.DTYPE) * math.sqrt(2.0 / fan_in)


class ImageEncoder(torch.nn.Module):
    """Five stride-2 3x3 conv blocks, global average pooling and a linear layer."""

    def __init__(self, crop: int, channels: list[int], latent_dim: int, gen: torch.Generator,
                 slope: float = ad.LEAKY_SLOPE):
        super().__init__()
        self.crop = crop
        self.slope = slope
        self.conv_w = torch.nn.ParameterList()
        self.conv_b = torch.nn.ParameterList()
        c_in = 3
        for c in channels:
            self.conv_w.append(torch.nn.Parameter(_he_normal(gen, 9 * c_in, (c, c_in, 3, 3))))
            self.conv_b.append(torch.nn.Parameter(torch.zeros(c, dtype=ad.DTYPE)))
            c_in = c
        self.fc_w = torch.nn.Parameter(_he_normal(gen, c_in, (c_in, latent_dim)))
        self.fc_b = torch.nn.Parameter(torch.zeros(latent_dim, dtype=ad.DTYPE))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """``(B, 3, crop, crop)`` normalised images to ``(B, latent)`` codes."""
        if images.shape[-2:] != (self.crop, self.crop) or images.shape[-3] != 3:
            raise ValueError(f"expected (B, 3, {self.crop}, {self.crop}) images, got {tuple(images.shape)}")
        x = images
        for w, b in zip(self.conv_w, self.conv_b):
            x = ad.leaky_relu(F.conv2d(x, w, b, stride=2, padding=1), self.slope)
        x = x.mean(dim=(-2, -1))
        return x @ self.fc_w + self.fc_b


class SpiralDecoder(torch.nn.Module):
    def __init__(self, hierarchy: MeshHierarchy, tables: list[SpiralTable], cfg: DecoderConfig,
                 gen: torch.Generator):
        super().__init__()
        n_levels = len(hierarchy.levels)
        cfg.validate(n_levels)
        for level, table in zip(hierarchy.levels, tables):
            if table.n_vertices != level.n_vertices:
                raise ValueError("spiral table rows do not match level vertex count")
        self.cfg = cfg
        self.tables = tables
        self.upsample = [ad.to_torch_sparse(q) for q in hierarchy.upsample_mats]
        self.n_coarse = hierarchy.levels[0].n_vertices
        w = cfg.widths
        self.fc_w = torch.nn.Parameter(_he_normal(gen, cfg.latent_dim, (cfg.latent_dim, self.n_coarse * w[0])))
        self.fc_b = torch.nn.Parameter(torch.zeros(self.n_coarse * w[0], dtype=ad.DTYPE))
        self.conv_w = torch.nn.ParameterList()
        self.conv_b = torch.nn.ParameterList()
        for i in range(1, n_levels):
            L = tables[i].length
            self.conv_w.append(torch.nn.Parameter(_he_normal(gen, L * w[i - 1], (L * w[i - 1], w[i]))))
            self.conv_b.append(torch.nn.Parameter(torch.zeros(w[i], dtype=ad.DTYPE)))
        L = tables[-1].length
        self.out_w = torch.nn.Parameter(_he_normal(gen, L * w[-1], (L * w[-1], 3)))
        self.out_b = torch.nn.Parameter(torch.zeros(3, dtype=ad.DTYPE))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        """``(B, latent)`` codes to ``(B, N, 3)`` normalised vertices."""
        if z.shape[-1] != self.cfg.latent_dim:
            raise ValueError(f"latent code must have {self.cfg.latent_dim} entries")
        x = (z @ self.fc_w + self.fc_b).reshape(z.shape[:-1] + (self.n_coarse, self.cfg.widths[0]))
        for i, (w, b) in enumerate(zip(self.conv_w, self.conv_b)):
            x = ad.sparse_matmul(self.upsample[i], x)
            x = ad.leaky_relu(spiral_conv(x, self.tables[i + 1], w, b), self.cfg.slope)
        return spiral_conv(x, self.tables[-1], self.out_w, self.out_b)


def build_spiral_tables(hierarchy: MeshHierarchy, cfg: DecoderConfig) -> list[SpiralTable]:
    tables = []
    for i, level in enumerate(hierarchy.levels):
        adj = build_adjacency(level)
        L = cfg.spiral_lengths[i] if cfg.spiral_lengths else default_spiral_length(adj, cfg.spiral_k)
        tables.append(build_spiral_table(adj, cfg.spiral_k, L, cfg.spiral_seed))
    return tables


def mesh_loss(pred: torch.Tensor, target: torch.Tensor, edges, lambda_vertex: float = 0.01,
              lambda_edge: float = 0.01, reduce: bool = True):
    """``lambda_vertex * |pred - target|_1 + lambda_edge * sum_e | |e_pred| - |e_target| |``.

    Batched inputs ``(B, N, 3)`` give the batch mean when ``reduce`` is set,
    otherwise a dict of per-sample ``vertex``, ``edge`` and ``total`` terms.
    """
    pred = torch.as_tensor(pred, dtype=ad.DTYPE)
    target = torch.as_tensor(target, dtype=ad.DTYPE)
    if pred.shape != target.shape or pred.shape[-1] != 3:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    e = torch.as_tensor(np.asarray(edges), dtype=torch.long)
    vertex = (pred - target).abs().sum(dim=(-2, -1))
    lp = ad.l2_norm(pred[..., e[:, 1], :] - pred[..., e[:, 0], :], dim=-1)
    lt = ad.l2_norm(target[..., e[:, 1], :] - target[..., e[:, 0], :], dim=-1)
    edge = (lp - lt).abs().sum(dim=-1)
    total = lambda_vertex * vertex + lambda_edge * edge
    if not reduce:
        return {"vertex": vertex, "edge": edge, "total": total}
    return total.mean() if total.dim() else total


# -- model bundle ------------------------------------------------------------


@dataclass
class Normalization:
    image_mean: np.ndarray  # (3,)
    image_std: np.ndarray  # (3,)
    mesh_mean: np.ndarray  # (N, 3)
    mesh_std: np.ndarray  # (3,) one scale per axis

    @classmethod
    def from_samples(cls, samples: list[Sample]) -> "Normalization":
        imgs = np.stack([s.image for s in samples]).reshape(-1, 3)
        meshes = np.stack([s.mesh for s in samples])
        return cls(
            imgs.mean(0),
            np.maximum(imgs.std(0), 1e-6),
            meshes.mean(0),
            np.maximum(meshes.reshape(-1, 3).std(0), 1e-6),
        )


class MeshRegressor(torch.nn.Module):
    """Encoder and decoder together with their normalisation statistics."""

    def __init__(self, hierarchy: MeshHierarchy, decoder_cfg: DecoderConfig, train_cfg: TrainConfig,
                 norm: Normalization, tables: list[SpiralTable] | None = None, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.hierarchy = hierarchy
        self.decoder_cfg = decoder_cfg
        self.train_cfg = train_cfg
        self.norm = norm
        self.tables = tables or build_spiral_tables(hierarchy, decoder_cfg)
        self.encoder = ImageEncoder(train_cfg.crop, train_cfg.encoder_channels, decoder_cfg.latent_dim, gen,
                                    decoder_cfg.slope)
        self.decoder = SpiralDecoder(hierarchy, self.tables, decoder_cfg, gen)
        self._img_mean = torch.as_tensor(norm.image_mean).reshape(1, 3, 1, 1)
        self._img_std = torch.as_tensor(norm.image_std).reshape(1, 3, 1, 1)

    def prepare_images(self, images: np.ndarray | torch.Tensor) -> torch.Tensor:
        """``(B, H, W, 3)`` raw images to normalised ``(B, 3, H, W)``."""
        x = torch.as_tensor(np.asarray(images, dtype=np.float64)).permute(0, 3, 1, 2)
        return (x - self._img_mean) / self._img_std

    def normalize_mesh(self, mesh) -> torch.Tensor:
        m = torch.as_tensor(np.asarray(mesh, dtype=np.float64))
        return (m - torch.as_tensor(self.norm.mesh_mean)) / torch.as_tensor(self.norm.mesh_std)

    def denormalize_mesh(self, pred: torch.Tensor) -> torch.Tensor:
        return pred * torch.as_tensor(self.norm.mesh_std) + torch.as_tensor(self.norm.mesh_mean)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encoder(images))

    def predict(self, images: np.ndarray) -> np.ndarray:
        """Raw ``(B, H, W, 3)`` images to image-aligned ``(B, N, 3)`` meshes."""
        with torch.no_grad():
            return self.denormalize_mesh(self(self.prepare_images(images))).numpy()

    # checkpoint directory: weights.bin, config.json, hierarchy/, spirals/
    def save(self, directory: str | os.PathLike) -> None:
        out = Path(directory)
        tmp = out.with_name(out.name + ".tmp")
        if tmp.exists():
            shutil.rmtree(tmp)
        tmp.mkdir(parents=True)
        tensors = {name: p.detach() for name, p in self.named_parameters()}
        tensors.update({
            "norm.image_mean": self.norm.image_mean,
            "norm.image_std": self.norm.image_std,
            "norm.mesh_mean": self.norm.mesh_mean,
            "norm.mesh_std": self.norm.mesh_std,
        })
        ad.write_tensors(tmp / "weights.bin", tensors)
        config = {"decoder": asdict(self.decoder_cfg), "train": asdict(self.train_cfg)}
        (tmp / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True), encoding="utf-8")
        self.hierarchy.save(tmp / "hierarchy")
        (tmp / "spirals").mkdir()
        for i, t in enumerate(self.tables):
            t.save(tmp / "spirals" / f"level_{i}.json")
        old = out.with_name(out.name + ".old")
        if out.exists():
            os.replace(out, old)
        os.replace(tmp, out)
        if old.exists():
            shutil.rmtree(old)

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "MeshRegressor":
        d = Path(directory)
        config = json.loads((d / "config.json").read_text(encoding="utf-8"))
        dec = config_from_json(DecoderConfig, config["decoder"])
        tr = config_from_json(TrainConfig, config["train"])
        hierarchy = MeshHierarchy.load(d / "hierarchy")
        tables = [SpiralTable.load(d / "spirals" / f"level_{i}.json") for i in range(len(hierarchy.levels))]
        t = ad.read_tensors(d / "weights.bin")
        norm = Normalization(t.pop("norm.image_mean"), t.pop("norm.image_std"),
                             t.pop("norm.mesh_mean"), t.pop("norm.mesh_std"))
        model = cls(hierarchy, dec, tr, norm, tables)
        with torch.no_grad():
            params = dict(model.named_parameters())
            if set(params) != set(t):
                raise ValueError(f"{d}: checkpoint tensors do not match the model layout")
            for name, p in params.items():
                p.copy_(torch.as_tensor(t[name]))
        return model


# -- augmentation ------------------------------------------------------------


def augment_batch(images: torch.Tensor, meshes: torch.Tensor, rng: np.random.Generator,
                  cfg: TrainConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Random rotation, scale and shift applied to raw images and their meshes alike.

    ``images`` is ``(B, 3, H, W)``; ``meshes`` ``(B, N, 3)`` with x, y in pixels.
    A mesh point ``p`` moves to ``s R (p - c) + c + t`` and its depth is scaled by ``s``.
    """
    b, _, h, w = images.shape
    ang = np.deg2rad(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg, b))
    scale = rng.uniform(cfg.scale_range[0], cfg.scale_range[1], b)
    shift = rng.uniform(-cfg.max_translation, cfg.max_translation, (b, 2)) * np.array([w, h])
    c, s = np.cos(ang), np.sin(ang)
    rot = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)  # (B, 2, 2)

    # affine_grid maps output to input in [-1, 1] coordinates.
    half = np.array([w, h]) / 2.0
    t_n = shift / half
    inv = np.transpose(rot, (0, 2, 1)) / scale[:, None, None]
    theta = np.concatenate([inv, -(inv @ t_n[:, :, None])], axis=2)
    grid = F.affine_grid(torch.as_tensor(theta), list(images.shape), align_corners=False)
    warped = F.grid_sample(images, grid, mode="bilinear", padding_mode="border", align_corners=False)

    center = torch.as_tensor(half)
    xy = meshes[..., :2] - center
    xy = torch.einsum("bij,bnj->bni", torch.as_tensor(rot), xy) * torch.as_tensor(scale)[:, None, None]
    xy = xy + center + torch.as_tensor(shift)[:, None, :]
    z = meshes[..., 2:] * torch.as_tensor(scale)[:, None, None]
    return warped, torch.cat([xy, z], dim=-1)


# -- training ----------------------------------------------------------------


@dataclass
class TrainResult:
    model: MeshRegressor
    history: list[dict]


def train(samples: list[Sample], cfg: TrainConfig, decoder_cfg: DecoderConfig, hierarchy: MeshHierarchy,
          log_every: int = 1) -> TrainResult:
    """Adam on the mesh loss with a step learning-rate schedule.

    Each epoch shuffles the samples; batches are optionally augmented. The
    history holds, per epoch, the mean total loss and the mean per-sample
    vertex L1 and edge terms (normalised space).
    """
    if not samples:
        raise ValueError("training needs at least one sample")
    n_verts = hierarchy.finest.n_vertices
    for i, s in enumerate(samples):
        if s.mesh.shape != (n_verts, 3):
            raise ValueError(f"sample {i} mesh has shape {s.mesh.shape}, expected ({n_verts}, 3)")
        if s.image.shape != (cfg.crop, cfg.crop, 3):
            raise ValueError(f"sample {i} image has shape {s.image.shape}, expected crop {cfg.crop}")
    norm = Normalization.from_samples(samples)
    model = MeshRegressor(hierarchy, decoder_cfg, cfg, norm, seed=cfg.seed)
    edges = edge_set(hierarchy.finest)
    params = list(model.parameters())
    opt = ad.Adam([ad.ParamGroup("network", params, cfg.lr)])
    rng = np.random.default_rng(cfg.seed)
    images = torch.as_tensor(np.stack([s.image for s in samples])).permute(0, 3, 1, 2).contiguous()
    meshes = torch.as_tensor(np.stack([s.mesh for s in samples]))
    history = []
    for epoch in range(cfg.epochs):
        if epoch in cfg.decay_epochs:
            opt.scale_lr(cfg.decay_factor)
        order = rng.permutation(len(samples))
        sums = {"loss": 0.0, "vertex_l1": 0.0, "edge": 0.0}
        for start in range(0, len(order), cfg.batch_size):
            idx = torch.as_tensor(order[start:start + cfg.batch_size])
            img, mesh = images[idx], meshes[idx]
            if cfg.augment:
                img, mesh = augment_batch(img, mesh, rng, cfg)
            x = (img - model._img_mean) / model._img_std
            target = model.normalize_mesh(mesh)
            pred = model(x)
            terms = mesh_loss(pred, target, edges, cfg.lambda_vertex, cfg.lambda_edge, reduce=False)
            loss = terms["total"].mean()
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch starting {start}: "
                    f"vertex={terms['vertex'].tolist()} edge={terms['edge'].tolist()}"
                )
            grads = ad.backward(loss, params)
            opt.step(grads)
            for key, term in (("loss", "total"), ("vertex_l1", "vertex"), ("edge", "edge")):
                sums[key] += float(terms[term].detach().sum())
        entry = {"epoch": epoch, "lr": opt.groups[0].lr, **{k: v / len(samples) for k, v in sums.items()}}
        history.append(entry)
        if log_every and epoch % log_every == 0:
            logger.info("epoch %d loss %.6g vertex %.6g edge %.6g", epoch, entry["loss"], entry["vertex_l1"],
                        entry["edge"])
    return TrainResult(model, history)


def predict_pose(mesh, assets: HandModelAssets) -> np.ndarray:
    """21 keypoints regressed from a mesh with the model's joint regressor."""
    return regress_keypoints(assets, mesh).detach().numpy()


# -- synthetic image/mesh pairs ----------------------------------------------


def image_aligned(vertices_cam: np.ndarray, root: np.ndarray, focal: float,
                  principal_point) -> np.ndarray:
    """Camera-space vertices to (u, v, z') with z' the root-relative depth in pixel units.

    The depth scale ``focal / d`` uses the distance ``d`` estimated from the
    spread of world and projected x coordinates.
    """
    from .fitting import Camera, project, recover_depth

    cam = Camera(focal, tuple(principal_point))
    uv = project(vertices_cam, cam.focal, cam.principal_point).numpy()
    d = recover_depth(vertices_cam, uv, cam)
    z = (vertices_cam[:, 2] - root[2]) * focal / d
    return np.concatenate([uv, z[:, None]], axis=1)


def synthesize_samples(assets: HandModelAssets, n: int, seed: int = 0, crop: int = 192,
                       focal: float = 1000.0, depth: float = 1200.0) -> list[Sample]:
    """Random prior poses rendered into crops, paired with their image-aligned meshes."""
    from .hand_model import HandParams, model_vertices, pose_prior, skin_keypoints
    from .render import render_mesh

    rng = np.random.default_rng(seed)
    out = []
    pp = (crop / 2.0, crop / 2.0)
    for _ in range(n):
        w = rng.normal(scale=2.0, size=assets.cluster_centers.shape[:2])
        w0 = np.array([rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4), rng.uniform(-math.pi, math.pi)])
        beta = rng.normal(scale=0.3, size=assets.n_betas)
        rest = HandParams(beta, w, w0, np.zeros(3), 1.0)
        v = model_vertices(assets, rest)
        center = 0.5 * (v.min(0) + v.max(0))
        transl = np.array([-center[0], -center[1], depth - center[2]])
        v = v + transl
        theta = pose_prior(torch.as_tensor(w), assets.cluster_centers)
        with torch.no_grad():
            root = skin_keypoints(assets, beta, theta, w0, transl, 1.0)[0].numpy()
        mesh = image_aligned(v, root, focal, pp)
        image = render_mesh(mesh, assets.template.faces, crop).astype(np.float64) / 255.0
        out.append(Sample(image, mesh))
    return out
