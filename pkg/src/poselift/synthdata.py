"""Synthetic (2D pose, 3D pose, feature map) generator and the binary dataset file.

Feature maps stand in for a pretrained image encoder: every joint leaves a
truncated Gaussian bump whose channels carry a joint-identity code and a
quantised code of the joint's depth relative to its parent bone. The rest of
the map is filled with clutter that is fixed per scene id plus per-sample
noise, so a model that leans on the background learns scene-specific habits.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import asdict, dataclass, field
from typing import Protocol

import numpy as np

from .geometry import CameraModel, project

JOINT_NAMES = (
    "pelvis", "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle", "spine",
    "thorax", "nose", "head", "l_shoulder", "l_elbow", "l_wrist", "r_shoulder",
    "r_elbow", "r_wrist",
)
PARENTS = (-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15)
# rest offsets from parent, world frame (x right, y up, z towards the camera), mm
REST_OFFSETS = (
    (0, 0, 0), (-130, 0, 0), (0, -450, 0), (0, -440, 0), (130, 0, 0), (0, -450, 0),
    (0, -440, 0), (0, 230, 0), (0, 250, 0), (0, 110, 30), (0, 110, -20), (150, 0, 0),
    (0, -280, 0), (0, -250, 0), (-150, 0, 0), (0, -280, 0), (0, -250, 0),
)
_D = np.pi / 180.0
# per-joint (x, y, z) Euler ranges in degrees for the bone ending at that joint
ANGLE_RANGES = (
    ((0, 0), (-180, 180), (0, 0)),       # pelvis: global yaw
    ((-60, 40), (-20, 20), (-10, 30)),   # r_hip
    ((-100, 0), (0, 0), (-10, 10)),      # r_knee
    ((-20, 30), (0, 0), (-10, 10)),      # r_ankle
    ((-60, 40), (-20, 20), (-30, 10)),   # l_hip
    ((-100, 0), (0, 0), (-10, 10)),      # l_knee
    ((-20, 30), (0, 0), (-10, 10)),      # l_ankle
    ((-30, 40), (-30, 30), (-20, 20)),   # spine
    ((-15, 15), (-15, 15), (-10, 10)),   # thorax
    ((-30, 30), (-40, 40), (-20, 20)),   # nose
    ((-15, 15), (0, 0), (-10, 10)),      # head
    ((-80, 80), (-30, 30), (-40, 60)),   # l_shoulder
    ((-120, 120), (-30, 30), (-90, 90)), # l_elbow
    ((0, 140), (-40, 40), (-20, 20)),    # l_wrist
    ((-80, 80), (-30, 30), (-60, 40)),   # r_shoulder
    ((-120, 120), (-30, 30), (-90, 90)), # r_elbow
    ((0, 140), (-40, 40), (-20, 20)),    # r_wrist
)

MAGIC = b"PLDS"
VERSION = 1
_HEADER = struct.Struct("<4sI8II")  # magic, version, N H W d h w count train_count, payload crc


class ChecksumError(IOError):
    pass


class FormatError(IOError):
    pass


@dataclass
class SkeletonTemplate:
    parents: tuple = PARENTS
    offsets: np.ndarray = field(default_factory=lambda: np.array(REST_OFFSETS, dtype=np.float64))
    angle_ranges: np.ndarray = field(default_factory=lambda: np.array(ANGLE_RANGES, dtype=np.float64) * _D)
    names: tuple = JOINT_NAMES

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=np.float64)
        self.angle_ranges = np.asarray(self.angle_ranges, dtype=np.float64)
        n = len(self.parents)
        if self.parents[0] != -1 or any(not (0 <= p < j) for j, p in enumerate(self.parents) if j):
            raise ValueError("parents must form a tree rooted at joint 0 in topological order")
        if self.offsets.shape != (n, 3) or self.angle_ranges.shape != (n, 3, 2):
            raise ValueError("offsets / angle ranges do not match the joint count")
        if np.any(self.bone_lengths[1:] <= 0):
            raise ValueError("bone lengths must be strictly positive")

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    @property
    def bone_lengths(self) -> np.ndarray:
        return np.linalg.norm(self.offsets, axis=1)


def euler_to_matrix(angles: np.ndarray) -> np.ndarray:
    """Rotation ``Rz @ Ry @ Rx`` for angles ``(..., 3)`` in radians."""
    ax, ay, az = angles[..., 0], angles[..., 1], angles[..., 2]
    cx, sx, cy, sy, cz, sz = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay), np.cos(az), np.sin(az)
    one, zero = np.ones_like(ax), np.zeros_like(ax)
    Rx = np.stack([one, zero, zero, zero, cx, -sx, zero, sx, cx], -1).reshape(ax.shape + (3, 3))
    Ry = np.stack([cy, zero, sy, zero, one, zero, -sy, zero, cy], -1).reshape(ax.shape + (3, 3))
    Rz = np.stack([cz, -sz, zero, sz, cz, zero, zero, zero, one], -1).reshape(ax.shape + (3, 3))
    return Rz @ Ry @ Rx


def forward_kinematics(template: SkeletonTemplate, angles: np.ndarray) -> np.ndarray:
    """World joint positions from per-bone local rotations; root at the origin."""
    rots = euler_to_matrix(angles)
    n = template.n_joints
    glob = np.empty((n, 3, 3))
    pos = np.zeros((n, 3))
    glob[0] = rots[0]
    for j in range(1, n):
        p = template.parents[j]
        glob[j] = glob[p] @ rots[j]
        pos[j] = pos[p] + glob[j] @ template.offsets[j]
    return pos


def sample_angles(template: SkeletonTemplate, rng: np.random.Generator,
                  scene_pref: np.ndarray | None = None, bias: float = 0.0) -> np.ndarray:
    u = rng.uniform(size=(template.n_joints, 3))
    if scene_pref is not None and bias:
        # skew each angle towards the scene's preferred end of its range
        u = u ** np.exp(-bias * scene_pref)
    lo, hi = template.angle_ranges[..., 0], template.angle_ranges[..., 1]
    return lo + (hi - lo) * u


def sample_pose(template: SkeletonTemplate, rng_seed, scene_pref=None, bias: float = 0.0) -> np.ndarray:
    """Random world-frame pose with exact template bone lengths."""
    rng = np.random.default_rng(rng_seed)
    return forward_kinematics(template, sample_angles(template, rng, scene_pref, bias))


def parent_bone_lengths(template: SkeletonTemplate, pose: np.ndarray) -> np.ndarray:
    par = np.array(template.parents[1:])
    return np.linalg.norm(pose[1:] - pose[par], axis=-1)


# ---------------------------------------------------------------- config


@dataclass
class SynthConfig:
    h: int = 256
    w: int = 192
    H: int = 16
    W: int = 12
    d: int = 32
    sigma: float = 10.0
    depth_bins: int = 8
    cue_strength: float = 1.0
    clutter_amp: float = 0.6
    clutter_noise: float = 0.5
    n_train_scenes: int = 8
    n_heldout_scenes: int = 4
    heldout_fraction: float = 1.0 / 6.0
    scene_bias: float = 1.5
    focal_range: tuple = (520.0, 600.0)
    distance_range: tuple = (4500.0, 5500.0)
    elevation_deg: tuple = (-10.0, 10.0)
    code_seed: int = 7
    scene_seed: int = 1234

    def __post_init__(self):
        if self.h % self.H or self.w % self.W:
            raise ValueError(f"feature grid {self.H}x{self.W} does not tile image {self.h}x{self.w}")
        self.focal_range = tuple(self.focal_range)
        self.distance_range = tuple(self.distance_range)
        self.elevation_deg = tuple(self.elevation_deg)

    @property
    def stride(self) -> tuple:
        return self.h // self.H, self.w // self.W

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class FeatureMap:
    values: np.ndarray  # (H, W, d)
    stride: tuple       # (sy, sx) image pixels per cell

    @property
    def H(self):
        return self.values.shape[0]

    @property
    def W(self):
        return self.values.shape[1]

    @property
    def d(self):
        return self.values.shape[2]

    def tokens(self) -> np.ndarray:
        return self.values.reshape(-1, self.d)


@dataclass
class SyntheticSample:
    pose2d: np.ndarray
    pose3d: np.ndarray
    pose_cam: np.ndarray
    featmap: FeatureMap
    camera: CameraModel
    seed: int
    scene_id: int


def cell_centers(H: int, W: int, stride: tuple) -> np.ndarray:
    """Pixel ``(u, v)`` centre of every cell in row-major token order, shape ``(H*W, 2)``."""
    sy, sx = stride
    rr, cc = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    return np.stack([(cc.ravel() + 0.5) * sx, (rr.ravel() + 0.5) * sy], axis=-1)


class FeatureSource(Protocol):
    def render(self, pose2d: np.ndarray, pose3d: np.ndarray, scene_id: int,
               rng: np.random.Generator, cue: bool = True) -> FeatureMap: ...


class SyntheticFeatureSource:
    """Direct feature synthesis; the default ``FeatureSource``."""

    def __init__(self, cfg: SynthConfig, template: SkeletonTemplate | None = None):
        self.cfg = cfg
        self.template = template or SkeletonTemplate()
        n = self.template.n_joints
        d_id = cfg.d // 2
        d_dep = cfg.d - d_id
        codes = np.random.default_rng(cfg.code_seed)
        self.id_codes = np.zeros((n, cfg.d))
        self.id_codes[:, :d_id] = _unit_rows(codes.normal(size=(n, d_id)))
        self.depth_codes = np.zeros((cfg.depth_bins, cfg.d))
        self.depth_codes[:, d_id:] = _unit_rows(codes.normal(size=(cfg.depth_bins, d_dep)))
        self.centers = cell_centers(cfg.H, cfg.W, cfg.stride)
        self._scene_cache: dict[int, np.ndarray] = {}

    def scene_texture(self, scene_id: int) -> np.ndarray:
        tex = self._scene_cache.get(scene_id)
        if tex is None:
            rng = np.random.default_rng([self.cfg.scene_seed, scene_id])
            cfg = self.cfg
            coarse = rng.normal(size=(cfg.H // 2 + 1, cfg.W // 2 + 1, cfg.d))
            tex = _upsample(coarse, cfg.H, cfg.W)
            tex /= tex.std() + 1e-12
            self._scene_cache[scene_id] = tex
        return tex

    def scene_preference(self, scene_id: int) -> np.ndarray:
        rng = np.random.default_rng([self.cfg.scene_seed, scene_id, 1])
        return rng.uniform(-1.0, 1.0, size=(self.template.n_joints, 3))

    def depth_bin(self, pose3d: np.ndarray) -> np.ndarray:
        """Quantised depth of each joint relative to its parent, normalised by bone length."""
        par = np.array([max(p, 0) for p in self.template.parents])
        dz = pose3d[:, 2] - pose3d[par, 2]
        lengths = np.where(np.arange(len(par)) > 0, self.template.bone_lengths, 1.0)
        rel = np.clip(dz / lengths, -1.0, 1.0)
        return np.minimum(((rel + 1.0) / 2.0 * self.cfg.depth_bins).astype(int), self.cfg.depth_bins - 1)

    def bump_weights(self, pose2d: np.ndarray) -> np.ndarray:
        """Truncated Gaussian weight of every joint on every cell, ``(N, H*W)``."""
        s = self.cfg.sigma
        d2 = ((self.centers[None, :, :] - pose2d[:, None, :]) ** 2).sum(-1)
        g = np.exp(-d2 / (2 * s * s))
        g[d2 > (3 * s) ** 2] = 0.0
        return g

    def render(self, pose2d, pose3d, scene_id: int, rng: np.random.Generator, cue: bool = True) -> FeatureMap:
        cfg = self.cfg
        g = self.bump_weights(pose2d)
        codes = self.id_codes.copy()
        if cue and cfg.cue_strength:
            codes += cfg.cue_strength * self.depth_codes[self.depth_bin(pose3d)]
        feat = g.T @ codes
        noise = rng.normal(size=(cfg.H * cfg.W, cfg.d))
        if cfg.clutter_amp:
            mask = 1.0 - np.clip(g.max(axis=0), 0.0, 1.0)
            clutter = self.scene_texture(scene_id).reshape(-1, cfg.d) + cfg.clutter_noise * noise
            feat = feat + cfg.clutter_amp * mask[:, None] * clutter
        return FeatureMap(feat.reshape(cfg.H, cfg.W, cfg.d), cfg.stride)


def render_features(pose2d, pose3d, cfg: SynthConfig, scene_id: int = 0, seed=0, cue: bool = True) -> FeatureMap:
    return SyntheticFeatureSource(cfg).render(pose2d, pose3d, scene_id, np.random.default_rng(seed), cue)


def _unit_rows(a):
    return a / np.linalg.norm(a, axis=-1, keepdims=True)


def _upsample(coarse, H, W):
    """Bilinear upsampling of a coarse grid to ``(H, W)``."""
    h0, w0 = coarse.shape[:2]
    ys = np.linspace(0, h0 - 1, H)
    xs = np.linspace(0, w0 - 1, W)
    y0 = np.floor(ys).astype(int).clip(0, h0 - 2)
    x0 = np.floor(xs).astype(int).clip(0, w0 - 2)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    a = coarse[y0][:, x0]
    b = coarse[y0][:, x0 + 1]
    c = coarse[y0 + 1][:, x0]
    d = coarse[y0 + 1][:, x0 + 1]
    return (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d)


# ---------------------------------------------------------------- cameras / samples


def random_camera(cfg: SynthConfig, rng: np.random.Generator) -> CameraModel:
    f = rng.uniform(*cfg.focal_range)
    dist = rng.uniform(*cfg.distance_range)
    elev = rng.uniform(*cfg.elevation_deg) * _D
    flip = np.diag([1.0, -1.0, -1.0])  # world y-up, z-towards-camera -> camera y-down, z-forward
    tilt = euler_to_matrix(np.array([elev, 0.0, 0.0]))
    R = tilt @ flip
    t = np.array([0.0, 0.0, dist])
    # pelvis sits slightly above the crop centre
    return CameraModel(fx=f, fy=f, cx=cfg.w / 2.0, cy=cfg.h / 2.0 - 10.0, R=R, t=t)


class SampleGenerator:
    def __init__(self, cfg: SynthConfig, template: SkeletonTemplate | None = None,
                 source: FeatureSource | None = None):
        self.cfg = cfg
        self.template = template or SkeletonTemplate()
        self.source = source or SyntheticFeatureSource(cfg, self.template)

    def pose_for(self, seed: int, scene_id: int):
        rng = np.random.default_rng(seed)
        pref = self.source.scene_preference(scene_id) if hasattr(self.source, "scene_preference") else None
        world = forward_kinematics(self.template, sample_angles(self.template, rng, pref, self.cfg.scene_bias))
        cam = random_camera(self.cfg, rng)
        return world, cam, rng

    def sample(self, seed: int, scene_id: int = 0, cue: bool = True) -> SyntheticSample:
        world, cam, rng = self.pose_for(seed, scene_id)
        pose_cam = cam.to_camera(world)
        return self.from_camera_pose(pose_cam, cam, seed, scene_id, rng, cue)

    def from_camera_pose(self, pose_cam, cam, seed, scene_id, rng=None, cue=True) -> SyntheticSample:
        rng = rng if rng is not None else np.random.default_rng([seed, 99])
        pose2d = project(pose_cam, cam)
        pose3d = pose_cam - pose_cam[0]
        fm = self.source.render(pose2d, pose3d, scene_id, rng, cue)
        return SyntheticSample(pose2d, pose3d, pose_cam, fm, cam, int(seed), int(scene_id))

    def ambiguous_twin(self, sample: SyntheticSample, joint: int, cue: bool = False) -> SyntheticSample:
        """Mirror ``joint`` along its camera ray so it keeps its bone length and 2D location.

        Only leaf joints are moved, so no other bone changes.
        """
        if joint in self.template.parents:
            raise ValueError(f"joint {joint} is not a leaf")
        parent = self.template.parents[joint]
        c = sample.pose_cam[joint]
        p = sample.pose_cam[parent]
        t0 = np.linalg.norm(c)
        u = c / t0
        t1 = 2.0 * float(u @ p) - t0
        if t1 <= 0 or abs(t1 - t0) < 1e-9:
            raise ValueError("no distinct twin for this joint")
        pose_cam = sample.pose_cam.copy()
        pose_cam[joint] = t1 * u
        return self.from_camera_pose(pose_cam, sample.camera, sample.seed, sample.scene_id,
                                     np.random.default_rng([sample.seed, 99]), cue)


# ---------------------------------------------------------------- dataset file


@dataclass
class Dataset:
    N: int
    H: int
    W: int
    d: int
    h: int
    w: int
    train_count: int
    pose2d: np.ndarray   # (M, N, 2) float32
    pose3d: np.ndarray   # (M, N, 3) float32
    feats: np.ndarray    # (M, H, W, d) float32
    seeds: np.ndarray    # (M,) uint64
    scene_ids: np.ndarray  # (M,) int32

    @property
    def count(self) -> int:
        return len(self.seeds)

    @property
    def header(self) -> tuple:
        return (self.N, self.H, self.W, self.d, self.h, self.w, self.count)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.N, self.H, self.W, self.d, self.h, self.w,
                       int(np.sum(idx < self.train_count)),
                       self.pose2d[idx], self.pose3d[idx], self.feats[idx],
                       self.seeds[idx], self.scene_ids[idx])

    def split(self, name: str) -> "Dataset":
        if name == "train":
            return self.subset(np.arange(self.train_count))
        if name == "heldout":
            return self.subset(np.arange(self.train_count, self.count))
        raise ValueError(f"unknown split {name!r}")

    def record_dtype(self) -> np.dtype:
        return record_dtype(self.N, self.H, self.W, self.d)


def record_dtype(N, H, W, d) -> np.dtype:
    return np.dtype([
        ("pose2d", "<f4", (N, 2)),
        ("pose3d", "<f4", (N, 3)),
        ("feat", "<f4", (H, W, d)),
        ("seed", "<u8"),
        ("scene", "<i4"),
    ])


def split_counts(count: int, cfg: SynthConfig) -> tuple:
    held = int(round(count * cfg.heldout_fraction))
    if count >= 2:
        held = min(max(held, 1), count - 1)
    else:
        held = 0
    return count - held, held


def generate(count: int, cfg: SynthConfig, seed: int, heldout: int | None = None,
             generator: SampleGenerator | None = None) -> Dataset:
    """Deterministic dataset: train samples from train scenes, then held-out samples from unseen scenes."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if heldout is None:
        n_train, n_held = split_counts(count, cfg)
    else:
        n_train, n_held = count - heldout, heldout
    gen = generator or SampleGenerator(cfg)
    n_joints = gen.template.n_joints
    ss = np.random.SeedSequence(seed)
    seeds = ss.generate_state(count, dtype=np.uint64)
    pick = np.random.default_rng(ss.spawn(1)[0])
    scenes = np.concatenate([
        pick.integers(0, cfg.n_train_scenes, size=n_train),
        cfg.n_train_scenes + pick.integers(0, cfg.n_heldout_scenes, size=n_held),
    ]).astype(np.int32)
    ds = Dataset(n_joints, cfg.H, cfg.W, cfg.d, cfg.h, cfg.w, n_train,
                 np.empty((count, n_joints, 2), np.float32), np.empty((count, n_joints, 3), np.float32),
                 np.empty((count, cfg.H, cfg.W, cfg.d), np.float32), seeds, scenes)
    for i in range(count):
        s = gen.sample(int(seeds[i]), int(scenes[i]))
        ds.pose2d[i] = s.pose2d
        ds.pose3d[i] = s.pose3d
        ds.feats[i] = s.featmap.values
    return ds


def write_dataset(ds: Dataset, path) -> None:
    rec = np.zeros(ds.count, dtype=ds.record_dtype())
    rec["pose2d"] = ds.pose2d
    rec["pose3d"] = ds.pose3d
    rec["feat"] = ds.feats
    rec["seed"] = ds.seeds
    rec["scene"] = ds.scene_ids
    payload = rec.tobytes()
    head = _HEADER.pack(MAGIC, VERSION, ds.N, ds.H, ds.W, ds.d, ds.h, ds.w, ds.count,
                        ds.train_count, zlib.crc32(payload))
    with open(path, "wb") as f:
        f.write(head)
        f.write(payload)


def read_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _HEADER.size:
        raise ChecksumError(f"{path}: truncated header")
    magic, version, N, H, W, d, h, w, count, train_count, crc = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"{path}: not a dataset file")
    if version > VERSION:
        raise FormatError(f"{path}: format version {version} is newer than supported {VERSION}")
    dt = record_dtype(N, H, W, d)
    payload = blob[_HEADER.size:]
    if len(payload) != count * dt.itemsize or zlib.crc32(payload) != crc:
        raise ChecksumError(f"{path}: payload checksum mismatch (truncated or corrupt)")
    rec = np.frombuffer(payload, dtype=dt)
    return Dataset(N, H, W, d, h, w, train_count,
                   rec["pose2d"].copy(), rec["pose3d"].copy(), rec["feat"].copy(),
                   rec["seed"].copy(), rec["scene"].copy())


def make_dataset(count: int, cfg: SynthConfig, seed: int, path, heldout: int | None = None) -> Dataset:
    ds = generate(count, cfg, seed, heldout)
    write_dataset(ds, path)
    return ds
