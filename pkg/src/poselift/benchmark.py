"""The standard synthetic benchmark and the ablation sweeps built on it.

Toy sizes keep a full progressive + end-to-end comparison over three seeds
within a laptop's half hour; the paper-scale defaults stay on the config
classes themselves.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .analysis import dataset_background
from .attnlayers import PGTL_VARIANTS
from .geometry import mpjpe
from .model import LiftingModel, ModelConfig
from .synthdata import Dataset, SynthConfig, generate
from .trainpipe import TrainConfig, TrainResult, predict_cached, stage1_cache, train

log = logging.getLogger(__name__)

STANDARD_SEED = 0
TRAIN_COUNT = 5000
HELDOUT_COUNT = 1000

R_SWEEP = (0.01, 0.3, 1.0)
LAYER_SWEEP = (("TL", "PGTL", "TL"), ("TL", "TL", "TL"), ("PGTL", "PGTL", "PGTL"))


def synth_config() -> SynthConfig:
    return SynthConfig()


def model_config(seed: int = 0, **kw) -> ModelConfig:
    base = dict(d=16, heads=2, seed=seed)
    base.update(kw)
    return ModelConfig(**base)


def train_config(mode: str = "progressive", seed: int = 0, **kw) -> TrainConfig:
    base = dict(mode=mode, seed=seed, stage1_epochs=10, stage2_epochs=10, batch_size=32, lr=3e-3)
    base.update(kw)
    return TrainConfig(**base)


def standard_dataset(seed: int = STANDARD_SEED, train_count: int = TRAIN_COUNT,
                     heldout_count: int = HELDOUT_COUNT, cfg: SynthConfig | None = None) -> Dataset:
    return generate(train_count + heldout_count, cfg or synth_config(), seed, heldout=heldout_count)


@dataclass
class RunSummary:
    mode: str
    seed: int
    coarse_heldout: float
    refined_heldout: float
    final_heldout: float
    heldout_curve: list
    background: float
    wall: float

    @property
    def rising_tail(self) -> bool:
        c = self.heldout_curve
        return bool(c) and c[-1] > min(c)


def coarse_refined(model: LiftingModel, data: Dataset) -> tuple:
    """Held-out MPJPE of both heads of a trained model."""
    coarse = model.predict(data.pose2d, data.feats, refined=False)
    refined = predict_cached(model, stage1_cache(model, data))
    return mpjpe(coarse, data.pose3d), mpjpe(refined, data.pose3d)


def run(data: Dataset, mode: str, seed: int, model_kw: dict | None = None, train_kw: dict | None = None
        ) -> tuple[TrainResult, RunSummary]:
    t0 = time.perf_counter()
    res = train(data, train_config(mode, seed, **(train_kw or {})), model_config(seed, **(model_kw or {})))
    held = data.split("heldout")
    c, r = coarse_refined(res.model, held)
    # the progressive curve is read over phase B, where the reported (refined) head is trained
    phase = "B" if mode == "progressive" else None
    curve = res.log.column("mpjpe_heldout", phase)
    summ = RunSummary(mode, seed, c, r, curve[-1] if curve else float("nan"), curve,
                      dataset_background(res.model, held), time.perf_counter() - t0)
    log.info("%s seed=%d coarse=%.2f refined=%.2f bg=%.4f (%.0fs)", mode, seed, c, r, summ.background, summ.wall)
    return res, summ


@dataclass
class Table5:
    runs: list = field(default_factory=list)

    def values(self, mode: str, key: str) -> np.ndarray:
        return np.array([getattr(s, key) for s in self.runs if s.mode == mode])

    def refine_gain(self) -> np.ndarray:
        """Per-seed coarse minus refined held-out MPJPE of the progressive runs."""
        return self.values("progressive", "coarse_heldout") - self.values("progressive", "refined_heldout")

    def mode_gain(self) -> np.ndarray:
        """Per-seed end2end-fine-only minus progressive held-out MPJPE."""
        return self.values("end2end-fine-only", "final_heldout") - self.values("progressive", "final_heldout")


def table5(data: Dataset, seeds=(0, 1, 2)) -> Table5:
    out = Table5()
    for s in seeds:
        for mode in ("progressive", "end2end-fine-only"):
            out.runs.append(run(data, mode, s)[1])
    return out


def margin_ok(gains: np.ndarray, k: float = 3.0) -> bool:
    """Mean gain positive and larger than ``k`` standard deviations across seeds."""
    gains = np.asarray(gains, dtype=np.float64)
    return bool(gains.mean() > 0 and gains.mean() > k * gains.std(ddof=1))


# ---------------------------------------------------------------- ablations


def sweep(axis: str) -> list:
    if axis == "r":
        return [dict(r=r) for r in R_SWEEP]
    if axis == "layers":
        return [dict(stage1=list(s)) for s in LAYER_SWEEP]
    if axis == "variant":
        return [dict(stage1=["TL", f"PGTL:{v}", "TL"]) for v in PGTL_VARIANTS]
    raise ValueError(f"unknown ablation axis {axis!r}; choose r, layers or variant")


def ablate(data: Dataset, axis: str, seed: int = 0, train_kw: dict | None = None,
           model_kw: dict | None = None) -> list[dict]:
    rows = []
    for override in sweep(axis):
        kw = dict(model_kw or {})
        kw.update(override)
        _, s = run(data, "progressive", seed, kw, train_kw)
        value = override[next(iter(override))]
        rows.append(dict(axis=axis, value=",".join(value) if isinstance(value, list) else str(value),
                         coarse=s.coarse_heldout, refined=s.refined_heldout, background=s.background))
    return rows


def format_table(rows: list[dict]) -> str:
    if not rows:
        return ""
    keys = list(rows[0])
    lines = ["\t".join(keys)]
    for r in rows:
        lines.append("\t".join(f"{r[k]:.4f}" if isinstance(r[k], float) else str(r[k]) for k in keys))
    return "\n".join(lines) + "\n"


def with_synth(**kw) -> SynthConfig:
    return replace(synth_config(), **kw)
