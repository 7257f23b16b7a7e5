"""Attention layers for lifting: MSA/MCA, FFN, the standard layer, the
pose-guided dual-attention layer, and attention-mass token selection.

Token sequences are batched tensors of shape ``(B, L, d)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import Parameter, Tensor

PGTL_VARIANTS = ("norm-before-transpose", "norm-after-transpose", "double-norm", "two-cross-attn")


class Module:
    """Minimal parameter container: Parameters and sub-Modules are discovered by attribute."""

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, m in enumerate(val):
                    if isinstance(m, Module):
                        yield from m.named_parameters(f"{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def rename(self, prefix: str = ""):
        """Stamp each Parameter with its dotted path so optimizer state and checkpoints can key on it."""
        for name, p in self.named_parameters(prefix):
            p.name = name
        return self


def _glorot(rng, fan_in, fan_out):
    return Parameter(nc.glorot(rng, fan_in, fan_out))


def _zeros(*shape):
    return Parameter(np.zeros(shape))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.w = _glorot(rng, d_in, d_out)
        self.b = _zeros(d_out)

    def __call__(self, x):
        return nc.linear(x, self.w, self.b)

    def zero_(self):
        self.w.data[...] = 0.0
        self.b.data[...] = 0.0


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = Parameter(np.ones(d))
        self.beta = _zeros(d)

    def __call__(self, x):
        return nc.layer_norm(x, self.gamma, self.beta)


class FFN(Module):
    def __init__(self, d: int, mult: int, rng: np.random.Generator):
        self.fc1 = Linear(d, mult * d, rng)
        self.fc2 = Linear(mult * d, d, rng)

    def __call__(self, x):
        return self.fc2(nc.gelu(self.fc1(x)))


@dataclass
class AttentionMap:
    """Head-averaged weights ``(B, Nq, L)`` plus the per-head weights ``(B, heads, Nq, L)``."""

    per_head: np.ndarray

    @property
    def weights(self) -> np.ndarray:
        return self.per_head.mean(axis=1)

    @property
    def heads(self) -> int:
        return self.per_head.shape[1]


def split_heads(x: Tensor, heads: int) -> Tensor:
    B, L, d = x.shape
    return nc.permute(nc.reshape(x, (B, L, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    B, h, L, dh = x.shape
    return nc.reshape(nc.permute(x, (0, 2, 1, 3)), (B, L, h * dh))


def attention_weights(q: Tensor, k: Tensor) -> Tensor:
    """Row-softmax of scaled per-head scores, ``(B, h, Lq, dh) x (B, h, Lk, dh) -> (B, h, Lq, Lk)``."""
    q = nc.scale(q, 1.0 / math.sqrt(q.shape[-1]))
    return nc.softmax(nc.matmul(q, nc.transpose(k)))


class MultiHeadAttention(Module):
    """Scaled dot-product attention; queries from one sequence, keys/values from another.

    No residual here, the enclosing layer adds it.
    """

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if d % heads:
            raise ValueError(f"model width {d} is not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng)

    def __call__(self, q_tokens: Tensor, kv_tokens: Tensor):
        if q_tokens.shape[-1] != kv_tokens.shape[-1] or q_tokens.shape[-1] != self.q.w.shape[0]:
            raise nc.ShapeError(f"token width mismatch: {q_tokens.shape} vs {kv_tokens.shape}")
        h = self.heads
        q = split_heads(self.q(q_tokens), h)
        k = split_heads(self.k(kv_tokens), h)
        v = split_heads(self.v(kv_tokens), h)
        a = attention_weights(q, k)
        out = self.o(merge_heads(nc.matmul(a, v)))
        return out, AttentionMap(a.data)


def mha(q_tokens, kv_tokens, params: MultiHeadAttention):
    return params(q_tokens, kv_tokens)


class TransformerLayer(Module):
    """MSA on pose tokens, pose-to-image MCA, then FFN, each with a residual.

    Image tokens pass through untouched.
    """

    kind = "TL"

    def __init__(self, d: int, heads: int, rng: np.random.Generator, ffn_mult: int = 2, norm: str = "pre"):
        if norm not in ("pre", "post"):
            raise ValueError(f"unknown norm placement {norm!r}")
        self.norm = norm
        self.ln1 = LayerNorm(d)
        self.msa = MultiHeadAttention(d, heads, rng)
        self.ln2 = LayerNorm(d)
        self.ln2_img = LayerNorm(d)
        self.mca = MultiHeadAttention(d, heads, rng)
        self.ln3 = LayerNorm(d)
        self.ffn = FFN(d, ffn_mult, rng)

    def zero_init_outputs(self):
        self.msa.o.zero_()
        self.mca.o.zero_()
        self.ffn.fc2.zero_()
        return self

    def __call__(self, pose: Tensor, image: Tensor):
        if self.norm == "pre":
            x = self.ln1(pose)
            pose = pose + self.msa(x, x)[0]
            upd, amap = self.mca(self.ln2(pose), self.ln2_img(image))
            pose = pose + upd
            pose = pose + self.ffn(self.ln3(pose))
        else:
            pose = self.ln1(pose + self.msa(pose, pose)[0])
            upd, amap = self.mca(pose, image)
            pose = self.ln2(pose + upd)
            pose = self.ln3(pose + self.ffn(pose))
        return pose, image, amap


class PoseGuidedLayer(Module):
    """Dual attention: the pose-to-image map updates pose tokens, and its
    transpose routes pose values back into the image tokens.

    ``variant`` picks how the image-side weights are formed:
    ``norm-before-transpose`` uses the row-softmaxed map transposed (image
    tokens with more attention mass receive more), ``norm-after-transpose``
    softmaxes the transposed scores over keypoints, ``double-norm``
    renormalises the transposed map per image token, and ``two-cross-attn``
    runs an independent image-to-pose attention.
    """

    kind = "PGTL"

    def __init__(self, d: int, heads: int, rng: np.random.Generator, ffn_mult: int = 2,
                 norm: str = "pre", variant: str = "norm-before-transpose"):
        if variant not in PGTL_VARIANTS:
            raise ValueError(f"unknown pose-guided variant {variant!r}; choose from {PGTL_VARIANTS}")
        if norm not in ("pre", "post"):
            raise ValueError(f"unknown norm placement {norm!r}")
        if d % heads:
            raise ValueError(f"model width {d} is not divisible by {heads} heads")
        self.variant = variant
        self.norm = norm
        self.heads = heads
        self.ln1 = LayerNorm(d)
        self.msa = MultiHeadAttention(d, heads, rng)
        self.ln2 = LayerNorm(d)
        self.ln2_img = LayerNorm(d)
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v_img = Linear(d, d, rng)
        self.v_pose = Linear(d, d, rng)
        self.o_pose = Linear(d, d, rng)
        self.o_img = Linear(d, d, rng)
        if variant == "two-cross-attn":
            self.q_img = Linear(d, d, rng)
            self.k_pose = Linear(d, d, rng)
        self.ln3 = LayerNorm(d)
        self.ffn = FFN(d, ffn_mult, rng)
        self.ln3_img = LayerNorm(d)
        self.ffn_img = FFN(d, ffn_mult, rng)

    def zero_init_outputs(self):
        for lin in (self.msa.o, self.o_pose, self.o_img, self.ffn.fc2, self.ffn_img.fc2):
            lin.zero_()
        return self

    def image_weights(self, a: Tensor, scores: Tensor, p_in: Tensor, i_in: Tensor) -> Tensor:
        """Per-head ``(B, h, L, N)`` weights that image tokens use to gather pose values."""
        if self.variant == "norm-before-transpose":
            return nc.transpose(a)
        if self.variant == "norm-after-transpose":
            return nc.softmax(nc.transpose(scores))
        if self.variant == "double-norm":
            return nc.normalize_rows(nc.transpose(a))
        qi = split_heads(self.q_img(i_in), self.heads)
        kp = split_heads(self.k_pose(p_in), self.heads)
        return attention_weights(qi, kp)

    def dual_attention(self, p_in: Tensor, i_in: Tensor):
        h = self.heads
        q = split_heads(self.q(p_in), h)
        k = split_heads(self.k(i_in), h)
        scores = nc.matmul(nc.scale(q, 1.0 / math.sqrt(q.shape[-1])), nc.transpose(k))
        a = nc.softmax(scores)
        v_i = split_heads(self.v_img(i_in), h)
        v_j = split_heads(self.v_pose(p_in), h)
        pose_upd = self.o_pose(merge_heads(nc.matmul(a, v_i)))
        img_w = self.image_weights(a, scores, p_in, i_in)
        img_upd = self.o_img(merge_heads(nc.matmul(img_w, v_j)))
        return pose_upd, img_upd, AttentionMap(a.data), img_w

    def __call__(self, pose: Tensor, image: Tensor):
        if self.norm == "pre":
            x = self.ln1(pose)
            pose = pose + self.msa(x, x)[0]
            pose_upd, img_upd, amap, _ = self.dual_attention(self.ln2(pose), self.ln2_img(image))
            pose = pose + pose_upd
            image = image + img_upd
            pose = pose + self.ffn(self.ln3(pose))
            image = image + self.ffn_img(self.ln3_img(image))
        else:
            pose = self.ln1(pose + self.msa(pose, pose)[0])
            pose_upd, img_upd, amap, _ = self.dual_attention(pose, image)
            pose = self.ln2(pose + pose_upd)
            image = self.ln2_img(image + img_upd)
            pose = self.ln3(pose + self.ffn(pose))
            image = self.ln3_img(image + self.ffn_img(image))
        return pose, image, amap


def pose_guided_layer(pose, image, params: PoseGuidedLayer):
    return params(pose, image)


def transformer_layer(pose, image, params: TransformerLayer):
    return params(pose, image)


@dataclass
class SelectionResult:
    indices: np.ndarray   # (B, k) ascending per row
    r: float
    scores: np.ndarray    # (B, L)


def retained_count(r: float, L: int) -> int:
    if not (0.0 < r <= 1.0):
        raise ValueError(f"retention rate must lie in (0, 1], got {r}")
    # round away float noise such as 0.3 * 10 = 3.0000000000000004 before taking the ceiling
    return max(1, math.ceil(round(r * L, 9)))


def token_scores(attn) -> np.ndarray:
    """Attention mass each image token receives, summed over keypoints: ``(B, L)``."""
    w = attn.weights if isinstance(attn, AttentionMap) else np.asarray(attn)
    return w.sum(axis=-2)


def rank_tokens(scores: np.ndarray, k: int) -> np.ndarray:
    """Top-``k`` indices per row, ties to the lower index, returned in ascending order."""
    order = np.argsort(-scores, axis=-1, kind="stable")[..., :k]
    return np.sort(order, axis=-1)


def select_tokens(attn, image: Tensor, r: float):
    """Keep the ``ceil(r * L)`` image tokens with the highest aggregate attention."""
    L = image.shape[-2]
    k = retained_count(r, L)
    scores = token_scores(attn)
    if scores.shape[-1] != L:
        raise nc.ShapeError(f"attention covers {scores.shape[-1]} tokens, image has {L}")
    idx = rank_tokens(scores, k)
    return nc.gather_rows(image, idx), SelectionResult(idx, r, scores)
