"""Two-stage lifting network and its checkpoint file.

Stage 1 lets keypoint tokens query every image token through a configurable
stack of layers and regresses a coarse pose. The last stage-1 attention map
ranks image tokens; only the top fraction is passed on. Stage 2 runs fresh
transformer layers over the pose tokens and retained image tokens and
regresses the refined pose.
"""
from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numcore as nc
from .attnlayers import (PGTL_VARIANTS, AttentionMap, LayerNorm, Linear, Module, PoseGuidedLayer,
                         SelectionResult, TransformerLayer, select_tokens)
from .numcore import Parameter, Tensor

GROUPS = ("stage1", "heads1", "stage2", "heads2")


class ConfigConflictError(ValueError):
    pass


class CheckpointError(IOError):
    pass


class ChecksumError(CheckpointError):
    pass


def parse_layer(spec: str) -> tuple:
    """``"TL"`` or ``"PGTL"`` / ``"PGTL:<variant>"`` -> (kind, variant)."""
    kind, _, variant = spec.partition(":")
    if kind == "TL" and not variant:
        return "TL", None
    if kind == "PGTL":
        variant = variant or "norm-before-transpose"
        if variant not in PGTL_VARIANTS:
            raise ValueError(f"unknown pose-guided variant {variant!r}")
        return "PGTL", variant
    raise ValueError(f"unknown layer spec {spec!r}")


@dataclass
class ModelConfig:
    N: int = 17
    d: int = 32
    heads: int = 4
    H: int = 16
    W: int = 12
    feat_dim: int = 32
    image_h: int = 256
    image_w: int = 192
    stage1: list = field(default_factory=lambda: ["TL", "PGTL", "TL"])
    stage2_layers: int = 3
    r: float = 0.3
    ffn_mult: int = 2
    norm: str = "pre"
    pose_scale: float = 1000.0
    stage2_zero_init: bool = True
    seed: int = 0

    def __post_init__(self):
        self.stage1 = list(self.stage1)
        for s in self.stage1:
            parse_layer(s)
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if not (0.0 < self.r <= 1.0):
            raise ValueError(f"retention rate must lie in (0, 1], got {self.r}")

    @property
    def HW(self) -> int:
        return self.H * self.W

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class Stage1Output:
    coarse: Tensor          # (B, N, 3) mm
    pose_tokens: Tensor     # (B, N, d)
    image_tokens: Tensor    # (B, HW, d)
    attn: list              # AttentionMap per stage-1 layer
    image_trace: list       # image token arrays entering each layer, plus the final one


@dataclass
class LiftOutput:
    coarse: Tensor
    refined: Tensor
    attn: list
    selection: SelectionResult | None
    head2_input: Tensor | None = None


class LiftingModel(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        d = cfg.d
        self.pose_embed = Linear(2, d, rng)
        self.pose_pos = Parameter(nc.glorot(rng, cfg.N, d))
        self.img_embed = Linear(cfg.feat_dim, d, rng)
        self.img_pos = Parameter(nc.glorot(rng, cfg.HW, d))
        layers = []
        for spec in cfg.stage1:
            kind, variant = parse_layer(spec)
            if kind == "TL":
                layers.append(TransformerLayer(d, cfg.heads, rng, cfg.ffn_mult, cfg.norm))
            else:
                layers.append(PoseGuidedLayer(d, cfg.heads, rng, cfg.ffn_mult, cfg.norm, variant))
        self.stage1 = layers
        self.head1_norm = LayerNorm(d)
        self.head1 = Linear(d, 3, rng)
        self.stage2 = [TransformerLayer(d, cfg.heads, rng, cfg.ffn_mult, cfg.norm)
                       for _ in range(cfg.stage2_layers)]
        if cfg.stage2_zero_init:
            # residual branches start closed, so stage 2 begins as the identity on pose tokens
            for layer in self.stage2:
                layer.zero_init_outputs()
        self.head2_norm = LayerNorm(d)
        self.head2 = Linear(d, 3, rng)
        self.rename()

    # -- parameter groups

    def group_of(self, name: str) -> str:
        if name.startswith("head1"):
            return "heads1"
        if name.startswith("head2"):
            return "heads2"
        if name.startswith("stage2"):
            return "stage2"
        return "stage1"

    def groups(self) -> dict:
        out = {g: [] for g in GROUPS}
        for name, p in self.named_parameters():
            out[self.group_of(name)].append(p)
        return out

    def set_trainable(self, groups, flag: bool):
        g = self.groups()
        for name in groups:
            for p in g[name]:
                p.trainable = flag

    def group_digest(self, groups=("stage1", "heads1")) -> str:
        h = hashlib.sha256()
        g = self.groups()
        for name in groups:
            for p in g[name]:
                h.update(p.name.encode())
                h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def copy_head1_to_head2(self):
        """Start the refined head from the trained coarse head (values copied, not tied)."""
        self.head2_norm.gamma.data[...] = self.head1_norm.gamma.data
        self.head2_norm.beta.data[...] = self.head1_norm.beta.data
        self.head2.w.data[...] = self.head1.w.data
        self.head2.b.data[...] = self.head1.b.data

    # -- forward

    def _check_inputs(self, pose2d, feats):
        cfg = self.cfg
        pose2d = np.asarray(pose2d, dtype=np.float64)
        feats = np.asarray(feats, dtype=np.float64)
        if pose2d.ndim == 2:
            pose2d, feats = pose2d[None], feats[None]
        if pose2d.shape[1:] != (cfg.N, 2):
            raise nc.ShapeError(f"pose2d shape {pose2d.shape} does not match N={cfg.N}")
        if feats.shape[1:] != (cfg.H, cfg.W, cfg.feat_dim):
            raise nc.ShapeError(
                f"feature map shape {feats.shape} does not match ({cfg.H}, {cfg.W}, {cfg.feat_dim})")
        if feats.shape[0] != pose2d.shape[0]:
            raise nc.ShapeError("pose2d and feature batch sizes differ")
        return pose2d, feats

    def embed(self, pose2d, feats):
        cfg = self.cfg
        half = np.array([cfg.image_w / 2.0, cfg.image_h / 2.0])
        xy = (pose2d - half) / half[0]
        pose = nc.add(self.pose_embed(Tensor(xy)), self.pose_pos)
        tokens = feats.reshape(feats.shape[0], cfg.HW, cfg.feat_dim)
        image = nc.add(self.img_embed(Tensor(tokens)), self.img_pos)
        return pose, image

    def head(self, tokens: Tensor, which: int) -> Tensor:
        norm, lin = (self.head1_norm, self.head1) if which == 1 else (self.head2_norm, self.head2)
        return nc.scale(lin(norm(tokens)), self.cfg.pose_scale)

    def forward_stage1(self, pose2d, feats) -> Stage1Output:
        pose2d, feats = self._check_inputs(pose2d, feats)
        pose, image = self.embed(pose2d, feats)
        maps, trace = [], []
        for layer in self.stage1:
            trace.append(image.data)
            pose, image, amap = layer(pose, image)
            maps.append(amap)
        trace.append(image.data)
        return Stage1Output(self.head(pose, 1), pose, image, maps, trace)

    def forward_full(self, pose2d, feats, r: float | None = None) -> LiftOutput:
        s1 = self.forward_stage1(pose2d, feats)
        r = self.cfg.r if r is None else r
        kept, sel = select_tokens(s1.attn[-1], s1.image_tokens, r)
        refined, final_tokens = self.forward_stage2(s1.pose_tokens, kept)
        return LiftOutput(s1.coarse, refined, s1.attn, sel, head2_input=final_tokens)

    def forward_stage2(self, pose_tokens, kept_tokens):
        """Stage-2 layers over pose tokens and retained image tokens; returns (refined, final pose tokens)."""
        pose, kept = nc.as_tensor(pose_tokens), nc.as_tensor(kept_tokens)
        for layer in self.stage2:
            pose, kept, _ = layer(pose, kept)
        return self.head(pose, 2), pose

    def predict(self, pose2d, feats, batch: int = 256, refined: bool = True) -> np.ndarray:
        out = []
        with nc.no_grad():
            for i in range(0, len(pose2d), batch):
                p, f = pose2d[i:i + batch], feats[i:i + batch]
                if refined:
                    out.append(self.forward_full(p, f).refined.data)
                else:
                    out.append(self.forward_stage1(p, f).coarse.data)
        return np.concatenate(out)


# ---------------------------------------------------------------- checkpoint

MAGIC = b"PLCK"
VERSION = 1
_PREFIX = struct.Struct("<4sIII")  # magic, version, manifest length, manifest crc32


def save(model: LiftingModel, path, epoch: int = 0, rng_state=None, extra: dict | None = None):
    """Write the manifest (config, names, shapes, groups, offsets, per-blob crc32) then the blobs."""
    blobs, entries, offset = [], [], 0
    for name, p in model.named_parameters():
        raw = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        entries.append({
            "name": name, "group": model.group_of(name), "shape": list(p.shape), "dtype": "<f8",
            "offset": offset, "nbytes": len(raw), "crc32": zlib.crc32(raw), "trainable": p.trainable,
        })
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": VERSION,
        "config": model.cfg.to_dict(),
        "epoch": int(epoch),
        "rng_state": rng_state,
        "blobs": entries,
        "extra": extra or {},
    }
    head = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, VERSION, len(head), zlib.crc32(head)))
        f.write(head)
        for b in blobs:
            f.write(b)


def read_manifest(blob: bytes, path="") -> tuple:
    if len(blob) < _PREFIX.size:
        raise ChecksumError(f"{path}: truncated checkpoint header")
    magic, version, n, crc = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if version > VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version} is newer than supported {VERSION}")
    head = blob[_PREFIX.size:_PREFIX.size + n]
    if len(head) != n or zlib.crc32(head) != crc:
        raise ChecksumError(f"{path}: manifest checksum mismatch")
    return json.loads(head), _PREFIX.size + n


def load(path, expected_config: ModelConfig | None = None):
    """Rebuild a model from ``path``; returns ``(model, manifest)``."""
    with open(path, "rb") as f:
        blob = f.read()
    manifest, start = read_manifest(blob, path)
    cfg = ModelConfig.from_dict(manifest["config"])
    if expected_config is not None and expected_config.to_dict() != cfg.to_dict():
        diff = {k: (v, cfg.to_dict()[k]) for k, v in expected_config.to_dict().items()
                if cfg.to_dict().get(k) != v}
        raise ConfigConflictError(f"checkpoint config differs from expected: {diff}")
    model = LiftingModel(cfg)
    params = dict(model.named_parameters())
    for e in manifest["blobs"]:
        raw = blob[start + e["offset"]:start + e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"] or zlib.crc32(raw) != e["crc32"]:
            raise ChecksumError(f"{path}: blob {e['name']!r} checksum mismatch (truncated or corrupt)")
        p = params.get(e["name"])
        if p is None or list(p.shape) != e["shape"]:
            raise ConfigConflictError(f"{path}: blob {e['name']!r} does not fit the model")
        p.data[...] = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"])
        p.trainable = e["trainable"]
    if set(params) != {e["name"] for e in manifest["blobs"]}:
        raise ConfigConflictError(f"{path}: parameter set does not match the model")
    return model, manifest
