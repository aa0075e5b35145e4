"""Flat-shaded mesh rendering and keypoint overlays with Pillow.

Meshes are given in image-aligned coordinates: x and y in pixels, z growing
away from the viewer. Faces are painted back to front.
"""

from __future__ import annotations

import numpy as np
from PIL import Image, ImageDraw

from .hand_model import BONES

SKIN = np.array([224.0, 172.0, 140.0])
BACKGROUND = (40, 44, 52)
LIGHT = np.array([0.3, -0.4, -1.0]) / np.linalg.norm([0.3, -0.4, -1.0])


def render_mesh(vertices: np.ndarray, faces: np.ndarray, size: int,
                background: np.ndarray | None = None, color: np.ndarray = SKIN) -> np.ndarray:
    """Render to a ``(size, size, 3)`` uint8 array."""
    if background is None:
        img = Image.new("RGB", (size, size), BACKGROUND)
    else:
        img = Image.fromarray(np.asarray(background, dtype=np.uint8)).convert("RGB")
    draw = ImageDraw.Draw(img)
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    p = v[f]
    n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
    shade = 0.25 + 0.75 * np.abs(n @ LIGHT)
    order = np.argsort(-p[:, :, 2].mean(1), kind="stable")
    for i in order:
        rgb = tuple(int(c) for c in np.clip(color * shade[i], 0, 255))
        draw.polygon([tuple(q) for q in p[i, :, :2].tolist()], fill=rgb)
    return np.asarray(img)


def draw_overlay(image: np.ndarray, keypoints: np.ndarray | None = None,
                 vertices: np.ndarray | None = None, faces: np.ndarray | None = None) -> Image.Image:
    """Wireframe and skeleton drawn over a crop."""
    img = Image.fromarray(np.asarray(image, dtype=np.uint8)).convert("RGB")
    draw = ImageDraw.Draw(img)
    if vertices is not None and faces is not None:
        v = np.asarray(vertices)[:, :2]
        edges = set()
        for a, b, c in np.asarray(faces).tolist():
            edges.update({(min(a, b), max(a, b)), (min(b, c), max(b, c)), (min(a, c), max(a, c))})
        for a, b in sorted(edges):
            draw.line([tuple(v[a]), tuple(v[b])], fill=(90, 200, 255), width=1)
    if keypoints is not None:
        k = np.asarray(keypoints)[:, :2]
        for i, j in BONES.tolist():
            draw.line([tuple(k[i]), tuple(k[j])], fill=(255, 220, 0), width=2)
        for x, y in k.tolist():
            draw.ellipse([x - 2, y - 2, x + 2, y + 2], fill=(255, 60, 60))
    return img
