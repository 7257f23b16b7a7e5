"""Losses, the progressive two-phase schedule and the end-to-end ablation modes."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numcore as nc
from .attnlayers import select_tokens
from .geometry import mpjpe
from .model import LiftingModel, ModelConfig
from .numcore import Adam, OptimizerState, Tensor
from .synthdata import Dataset

log = logging.getLogger(__name__)

MODES = ("progressive", "end2end-fine-only", "end2end-both")
LOSS_FORMS = ("sum-l2", "mean-squared")


@dataclass
class TrainConfig:
    mode: str = "progressive"
    stage1_epochs: int = 20
    stage2_epochs: int = 20
    batch_size: int = 128
    lr: float = 1e-3
    lr_factor: float = 0.9
    lr_interval: int = 4
    loss_form: str = "sum-l2"
    seed: int = 0
    eval_train_count: int = 1000
    clip_norm: float | None = None
    weight_decay: float = 0.0
    init_refined_from_coarse: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown training mode {self.mode!r}; choose from {MODES}")
        if self.loss_form not in LOSS_FORMS:
            raise ValueError(f"unknown loss form {self.loss_form!r}; choose from {LOSS_FORMS}")
        if self.batch_size < 1 or self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ValueError("batch size must be positive and epoch counts nonnegative")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def loss(pred: Tensor, gt, form: str = "sum-l2") -> Tensor:
    """Per-sample pose loss averaged over the batch.

    ``sum-l2`` sums the (unsquared) Euclidean joint errors of each sample;
    ``mean-squared`` averages squared joint errors.
    """
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"joint count mismatch: pred {pred.shape} vs gt {gt.shape}")
    err = nc.sub(pred, gt)
    if form == "sum-l2":
        per_joint = nc.row_norm(err)
        batch = per_joint.shape[0] if per_joint.ndim > 1 else 1
        return nc.scale(nc.sum(per_joint), 1.0 / batch)
    if form == "mean-squared":
        sq = nc.mul(err, err)
        return nc.scale(nc.sum(sq), 3.0 / sq.data.size)
    raise ValueError(f"unknown loss form {form!r}")


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    lr: float
    train_loss: float
    mpjpe_train: float
    mpjpe_heldout: float
    head: str
    wall: float


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def append(self, rec: EpochRecord):
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError("epoch numbering must increase")
        self.records.append(rec)

    def column(self, key: str, phase: str | None = None) -> list:
        return [getattr(r, key) for r in self.records if phase is None or r.phase == phase]

    def to_lines(self) -> str:
        return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in self.records)

    def write(self, path):
        with open(path, "w") as f:
            f.write(self.to_lines())

    @classmethod
    def read(cls, path) -> "TrainLog":
        out = cls()
        with open(path) as f:
            for line in f:
                if line.strip():
                    out.records.append(EpochRecord(**json.loads(line)))
        return out


@dataclass
class TrainResult:
    model: LiftingModel
    log: TrainLog
    phase_a_digest: str | None = None
    final_digest: str | None = None
    epoch: int = 0


def _eval_sets(data: Dataset, cfg: TrainConfig):
    train = data.split("train")
    if cfg.eval_train_count and train.count > cfg.eval_train_count:
        train = train.subset(np.arange(cfg.eval_train_count))
    held = data.split("heldout")
    return train, held


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, size):
        yield order[i:i + size]


def _mpjpe_or_nan(pred, gt):
    return mpjpe(pred, gt) if len(gt) else float("nan")


class _Phase:
    """One optimisation phase over a fixed parameter list."""

    def __init__(self, name, params, cfg: TrainConfig):
        self.name = name
        self.opt = Adam(params, OptimizerState(lr=cfg.lr, factor=cfg.lr_factor, interval=cfg.lr_interval,
                                               weight_decay=cfg.weight_decay), clip_norm=cfg.clip_norm)

    def step(self, loss_t: Tensor) -> float:
        self.opt.zero_grad()
        nc.backward(loss_t)
        self.opt.step()
        return float(loss_t.data)


def _run_phase(phase: _Phase, n_train: int, epochs: int, cfg: TrainConfig, rng, batch_loss, evaluate,
               tlog: TrainLog, head: str):
    for e in range(epochs):
        t0 = time.perf_counter()
        phase.opt.set_epoch(e)
        total, count = 0.0, 0
        for idx in _batches(n_train, cfg.batch_size, rng):
            total += phase.step(batch_loss(idx)) * len(idx)
            count += len(idx)
        m_train, m_held = evaluate()
        epoch = tlog.records[-1].epoch + 1 if tlog.records else 0
        rec = EpochRecord(epoch, phase.name, phase.opt.state.lr, total / count, m_train, m_held, head,
                          time.perf_counter() - t0)
        tlog.append(rec)
        log.info("epoch %d %s lr=%.6g loss=%.4f mpjpe train=%.2f heldout=%.2f", rec.epoch, rec.phase,
                 rec.lr, rec.train_loss, m_train, m_held)


def train_progressive(data: Dataset, cfg: TrainConfig, model_cfg: ModelConfig | None = None,
                      model: LiftingModel | None = None) -> TrainResult:
    """Phase A trains stage 1 and the coarse head, phase B freezes them and trains stage 2."""
    train = data.split("train")
    if train.count == 0:
        raise ValueError("dataset has no training samples")
    model = model or LiftingModel(model_cfg or ModelConfig())
    ev_train, ev_held = _eval_sets(data, cfg)
    rng = np.random.default_rng(cfg.seed)
    tlog = TrainLog()
    g = model.groups()

    model.set_trainable(("stage2", "heads2"), False)
    phase_a = _Phase("A", g["stage1"] + g["heads1"], cfg)

    def loss_a(idx):
        out = model.forward_stage1(train.pose2d[idx], train.feats[idx])
        return loss(out.coarse, train.pose3d[idx], cfg.loss_form)

    def eval_a():
        return (_mpjpe_or_nan(model.predict(ev_train.pose2d, ev_train.feats, refined=False), ev_train.pose3d),
                _mpjpe_or_nan(model.predict(ev_held.pose2d, ev_held.feats, refined=False), ev_held.pose3d))

    _run_phase(phase_a, train.count, cfg.stage1_epochs, cfg, rng, loss_a, eval_a, tlog, "coarse")

    model.set_trainable(("stage1", "heads1"), False)
    model.set_trainable(("stage2", "heads2"), True)
    digest_a = model.group_digest()
    if cfg.init_refined_from_coarse:
        model.copy_head1_to_head2()
    # stage 1 is frozen from here on, so its outputs can be computed once
    cache_train = stage1_cache(model, train)
    cache_evt = stage1_cache(model, ev_train)
    cache_evh = stage1_cache(model, ev_held)
    phase_b = _Phase("B", g["stage2"] + g["heads2"], cfg)

    def loss_b(idx):
        refined, _ = model.forward_stage2(cache_train[0][idx], cache_train[1][idx])
        return loss(refined, train.pose3d[idx], cfg.loss_form)

    def eval_b():
        return (_mpjpe_or_nan(predict_cached(model, cache_evt), ev_train.pose3d),
                _mpjpe_or_nan(predict_cached(model, cache_evh), ev_held.pose3d))

    _run_phase(phase_b, train.count, cfg.stage2_epochs, cfg, rng, loss_b, eval_b, tlog, "refined")
    epoch = tlog.records[-1].epoch + 1 if tlog.records else 0
    return TrainResult(model, tlog, digest_a, model.group_digest(), epoch)


def stage1_cache(model: LiftingModel, data: Dataset, batch: int = 256):
    """Stage-1 pose tokens and retained image tokens for every sample (no graph)."""
    poses, kept = [], []
    with nc.no_grad():
        for i in range(0, data.count, batch):
            s1 = model.forward_stage1(data.pose2d[i:i + batch], data.feats[i:i + batch])
            k, _ = _select(model, s1)
            poses.append(s1.pose_tokens.data)
            kept.append(k.data)
    if not poses:
        d = model.cfg.d
        return np.zeros((0, model.cfg.N, d)), np.zeros((0, 1, d))
    return np.concatenate(poses), np.concatenate(kept)


def _select(model, s1):
    return select_tokens(s1.attn[-1], s1.image_tokens, model.cfg.r)


def predict_cached(model: LiftingModel, cache, batch: int = 512) -> np.ndarray:
    out = []
    with nc.no_grad():
        for i in range(0, len(cache[0]), batch):
            out.append(model.forward_stage2(cache[0][i:i + batch], cache[1][i:i + batch])[0].data)
    return np.concatenate(out) if out else np.zeros((0, model.cfg.N, 3))


def train_end2end(data: Dataset, cfg: TrainConfig, model_cfg: ModelConfig | None = None,
                  model: LiftingModel | None = None) -> TrainResult:
    """Single phase over the whole network for ``stage1_epochs + stage2_epochs`` epochs.

    ``end2end-fine-only`` supervises the refined pose only; ``end2end-both``
    adds the coarse loss with unit weight.
    """
    if cfg.mode not in ("end2end-fine-only", "end2end-both"):
        raise ValueError(f"train_end2end does not handle mode {cfg.mode!r}")
    train = data.split("train")
    if train.count == 0:
        raise ValueError("dataset has no training samples")
    model = model or LiftingModel(model_cfg or ModelConfig())
    ev_train, ev_held = _eval_sets(data, cfg)
    rng = np.random.default_rng(cfg.seed)
    tlog = TrainLog()
    g = model.groups()
    both = cfg.mode == "end2end-both"
    if not both:
        model.set_trainable(("heads1",), False)
    params = g["stage1"] + g["stage2"] + g["heads2"] + (g["heads1"] if both else [])
    phase = _Phase("E", params, cfg)

    def batch_loss(idx):
        out = model.forward_full(train.pose2d[idx], train.feats[idx])
        total = loss(out.refined, train.pose3d[idx], cfg.loss_form)
        if both:
            total = nc.add(total, loss(out.coarse, train.pose3d[idx], cfg.loss_form))
        return total

    def evaluate():
        return (_mpjpe_or_nan(model.predict(ev_train.pose2d, ev_train.feats), ev_train.pose3d),
                _mpjpe_or_nan(model.predict(ev_held.pose2d, ev_held.feats), ev_held.pose3d))

    _run_phase(phase, train.count, cfg.stage1_epochs + cfg.stage2_epochs, cfg, rng, batch_loss, evaluate,
               tlog, "refined")
    epoch = tlog.records[-1].epoch + 1 if tlog.records else 0
    return TrainResult(model, tlog, None, model.group_digest(), epoch)


def train(data: Dataset, cfg: TrainConfig, model_cfg: ModelConfig | None = None) -> TrainResult:
    if cfg.mode == "progressive":
        return train_progressive(data, cfg, model_cfg)
    return train_end2end(data, cfg, model_cfg)
