"""Attention forensics: background share, keypoint-to-keypoint structure, heatmap export.

A token belongs to a keypoint's region when its cell centre lies within
``radius`` image pixels of that keypoint's 2D location; tokens outside every
circle are background.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attnlayers import AttentionMap
from .synthdata import cell_centers

EXPORT_MAGIC = "# poselift attention export v1"


class GeometryError(ValueError):
    pass


@dataclass
class BackgroundSpec:
    keypoints: np.ndarray   # (N, 2) or (B, N, 2) pixel (u, v)
    radius: float = 30.0

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("circle radius must be positive")
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64)


@dataclass
class GridGeometry:
    H: int
    W: int
    stride: tuple  # (sy, sx)

    @property
    def L(self):
        return self.H * self.W


def _weights(attn) -> np.ndarray:
    w = attn.weights if isinstance(attn, AttentionMap) else np.asarray(attn, dtype=np.float64)
    return w[None] if w.ndim == 2 else w


def membership(keypoints: np.ndarray, geom: GridGeometry, radius: float) -> np.ndarray:
    """Boolean ``(B, N, L)``: cell centre of token ``l`` lies inside keypoint ``n``'s circle."""
    kp = keypoints[None] if keypoints.ndim == 2 else keypoints
    centers = cell_centers(geom.H, geom.W, geom.stride)
    d2 = ((centers[None, None] - kp[:, :, None, :]) ** 2).sum(-1)
    return d2 <= radius * radius


def _prepare(attn, spec: BackgroundSpec, geom: GridGeometry):
    w = _weights(attn)
    if w.shape[-1] != geom.L:
        raise GeometryError(f"attention covers {w.shape[-1]} tokens but the grid has {geom.L}")
    inside = membership(spec.keypoints, geom, spec.radius)
    if inside.shape[0] == 1 and w.shape[0] > 1:
        inside = np.broadcast_to(inside, (w.shape[0],) + inside.shape[1:])
    if inside.shape[0] != w.shape[0] or inside.shape[1] != w.shape[1]:
        raise GeometryError(f"keypoints {spec.keypoints.shape} do not match attention {w.shape}")
    return w, inside


def background_attention(attn, spec: BackgroundSpec, geom: GridGeometry, per_sample: bool = False):
    """Share of attention mass outside all keypoint circles, averaged over keypoints (and samples)."""
    w, inside = _prepare(attn, spec, geom)
    bg = ~inside.any(axis=1)                      # (B, L)
    frac = (w * bg[:, None, :]).sum(-1).mean(-1)  # (B,)
    return frac if per_sample else float(frac.mean())


def structural_matrix(attn, spec: BackgroundSpec, geom: GridGeometry, overlap: str = "all") -> np.ndarray:
    """``(N, N + 1)`` matrix: row ``i`` is keypoint ``i``'s attention mass in each keypoint's
    circle, last column is background; averaged over samples.

    ``overlap="all"`` credits a cell to every circle covering it (rows may
    exceed 1 where circles overlap); ``overlap="split"`` shares it equally
    so every row sums to 1.
    """
    if overlap not in ("all", "split"):
        raise ValueError(f"unknown overlap rule {overlap!r}")
    w, inside = _prepare(attn, spec, geom)
    m = inside.astype(np.float64)
    if overlap == "split":
        cover = m.sum(axis=1, keepdims=True)
        m = np.divide(m, cover, out=np.zeros_like(m), where=cover > 0)
    regions = np.einsum("bil,bjl->bij", w, m)
    bg = (w * (~inside.any(axis=1))[:, None, :]).sum(-1)
    return np.concatenate([regions, bg[..., None]], axis=-1).mean(axis=0)


def stage1_maps(model, pose2d, feats) -> list:
    """Head-averaged attention maps of every stage-1 layer for one sample, each ``(N, L)``."""
    from . import numcore as nc

    with nc.no_grad():
        s1 = model.forward_stage1(pose2d, feats)
    return [a.weights[0] for a in s1.attn]


def dataset_background(model, data, radius: float = 30.0, batch: int = 256, layer: int = -1) -> float:
    """Mean background share of one stage-1 layer (default last) over a dataset split."""
    from . import numcore as nc

    cfg = model.cfg
    geom = GridGeometry(cfg.H, cfg.W, (cfg.image_h // cfg.H, cfg.image_w // cfg.W))
    vals = []
    with nc.no_grad():
        for i in range(0, data.count, batch):
            s1 = model.forward_stage1(data.pose2d[i:i + batch], data.feats[i:i + batch])
            spec = BackgroundSpec(data.pose2d[i:i + batch], radius)
            vals.append(background_attention(s1.attn[layer], spec, geom, per_sample=True))
    return float(np.concatenate(vals).mean())


def dataset_structure(model, data, radius: float = 30.0, batch: int = 256, overlap: str = "all") -> np.ndarray:
    from . import numcore as nc

    cfg = model.cfg
    geom = GridGeometry(cfg.H, cfg.W, (cfg.image_h // cfg.H, cfg.image_w // cfg.W))
    total, count = 0.0, 0
    with nc.no_grad():
        for i in range(0, data.count, batch):
            s1 = model.forward_stage1(data.pose2d[i:i + batch], data.feats[i:i + batch])
            spec = BackgroundSpec(data.pose2d[i:i + batch], radius)
            n = len(data.pose2d[i:i + batch])
            total = total + structural_matrix(s1.attn[-1], spec, geom, overlap) * n
            count += n
    return total / count


# ---------------------------------------------------------------- heatmap export


def export_attention(model, pose2d, feats, path, png: str | None = None) -> dict:
    """Write every stage-1 layer's per-keypoint ``H x W`` attention grid plus the retained-token mask.

    Layout (plain text, one value per column, ``%.9g`` so float32 values
    round-trip exactly)::

        # poselift attention export v1
        H W N n_layers r retained
        layer <l> keypoint <n>
        <H lines of W values>
        ...
        mask
        <H lines of W 0/1 values>
    """
    from . import numcore as nc

    cfg = model.cfg
    with nc.no_grad():
        out = model.forward_full(pose2d, feats)
    maps = np.stack([a.weights[0] for a in out.attn]).astype(np.float32)  # (layers, N, L)
    mask = np.zeros(cfg.HW, dtype=np.int8)
    mask[out.selection.indices[0]] = 1
    H, W = cfg.H, cfg.W
    lines = [EXPORT_MAGIC, f"{H} {W} {cfg.N} {len(maps)} {cfg.r!r} {int(mask.sum())}"]
    for li, layer in enumerate(maps):
        for n in range(cfg.N):
            lines.append(f"layer {li} keypoint {n}")
            grid = layer[n].reshape(H, W)
            lines += [" ".join(f"{v:.9g}" for v in row) for row in grid]
    lines.append("mask")
    lines += [" ".join(str(int(v)) for v in row) for row in mask.reshape(H, W)]
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
    if png:
        write_png(maps[-1].mean(axis=0).reshape(H, W), mask.reshape(H, W), png)
    return {"maps": maps.reshape(len(maps), cfg.N, H, W), "mask": mask.reshape(H, W)}


def read_attention_export(path) -> dict:
    with open(path) as f:
        lines = [ln.rstrip("\n") for ln in f]
    if not lines or lines[0] != EXPORT_MAGIC:
        raise ValueError(f"{path}: not an attention export")
    H, W, N, n_layers = (int(x) for x in lines[1].split()[:4])
    r = float(lines[1].split()[4])
    maps = np.zeros((n_layers, N, H, W), dtype=np.float32)
    pos = 2
    for li in range(n_layers):
        for n in range(N):
            if lines[pos] != f"layer {li} keypoint {n}":
                raise ValueError(f"{path}: unexpected line {pos + 1}: {lines[pos]!r}")
            rows = lines[pos + 1:pos + 1 + H]
            maps[li, n] = np.array([[np.float32(v) for v in row.split()] for row in rows], dtype=np.float32)
            pos += 1 + H
    if lines[pos] != "mask":
        raise ValueError(f"{path}: missing mask block")
    mask = np.array([[int(v) for v in row.split()] for row in lines[pos + 1:pos + 1 + H]], dtype=np.int8)
    return {"maps": maps, "mask": mask, "r": r}


def write_png(heat: np.ndarray, mask: np.ndarray, path, cell: int = 16):
    """Greyscale heat raster with retained cells tinted red, one ``cell``-pixel square per token."""
    from PIL import Image

    h = heat / heat.max() if heat.max() > 0 else heat
    g = (255 * h).astype(np.uint8)
    rgb = np.stack([g, g, g], axis=-1)
    rgb[mask.astype(bool), 0] = 255
    img = Image.fromarray(np.kron(rgb, np.ones((cell, cell, 1), dtype=np.uint8)))
    img.save(path)
