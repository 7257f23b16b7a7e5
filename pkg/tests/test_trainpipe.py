import numpy as np
import pytest

from poselift import numcore as nc
from poselift import trainpipe as tp
from poselift.model import LiftingModel, ModelConfig
from poselift.synthdata import SynthConfig, generate

SMALL = dict(d=8, heads=2, stage2_layers=1)


@pytest.fixture(scope="module")
def smoke():
    return generate(200, SynthConfig(), 0, heldout=40)


def _cfg(mode="progressive", **kw):
    base = dict(mode=mode, stage1_epochs=3, stage2_epochs=3, batch_size=32, lr=3e-3, eval_train_count=40)
    base.update(kw)
    return tp.TrainConfig(**base)


def test_defaults():
    c = tp.TrainConfig()
    assert (c.batch_size, c.lr, c.lr_factor, c.lr_interval, c.stage1_epochs) == (128, 1e-3, 0.9, 4, 20)
    assert c.loss_form == "sum-l2"
    with pytest.raises(ValueError):
        tp.TrainConfig(mode="sideways")


def test_loss_values():
    gt = np.zeros((1, 4, 3))
    assert float(tp.loss(nc.Tensor(gt), gt).data) == 0.0
    pred = gt.copy()
    pred[0, 2] = [3.0, 4.0, 0.0]
    assert float(tp.loss(nc.Tensor(pred), gt).data) == pytest.approx(5.0, abs=1e-12)
    assert float(tp.loss(nc.Tensor(pred), gt, "mean-squared").data) == pytest.approx(25.0 / 4, abs=1e-12)
    with pytest.raises(ValueError):
        tp.loss(nc.Tensor(np.zeros((1, 3, 3))), gt)


def test_sum_l2_gradient_is_unit_vector():
    gt = np.zeros((1, 3, 3))
    p = nc.Parameter(np.array([[[0.0, 0, 0], [3.0, 4.0, 0.0], [1.0, -2.0, 2.0]]]), "p")
    nc.backward(tp.loss(p, gt))
    assert np.allclose(p.grad[0, 1], [0.6, 0.8, 0.0])
    assert np.allclose(p.grad[0, 2], np.array([1.0, -2.0, 2.0]) / 3.0)
    errs = nc.gradcheck(lambda: tp.loss(p, gt), [p])
    assert errs["p"] < 1e-6


def test_progressive_freeze_and_progress(smoke):
    res = tp.train(smoke, _cfg(), ModelConfig(**SMALL))
    assert res.phase_a_digest == res.final_digest
    recs = res.log.records
    assert [r.epoch for r in recs] == list(range(6))
    assert [r.phase for r in recs] == ["A"] * 3 + ["B"] * 3
    a = res.log.column("train_loss", "A")
    assert a[-1] < a[0]
    assert all(np.isfinite(r.mpjpe_train) and np.isfinite(r.mpjpe_heldout) for r in recs)


def test_phase_b_trains_only_stage2(smoke):
    res = tp.train(smoke, _cfg(stage1_epochs=2, stage2_epochs=2), ModelConfig(**SMALL))
    g = res.model.groups()
    assert all(not p.trainable for p in g["stage1"] + g["heads1"])
    assert all(p.trainable for p in g["stage2"] + g["heads2"])


@pytest.mark.parametrize("mode", ["end2end-fine-only", "end2end-both"])
def test_end2end_modes_run(smoke, mode):
    res = tp.train(smoke, _cfg(mode, stage1_epochs=1, stage2_epochs=1), ModelConfig(**SMALL))
    assert len(res.log.records) == 2
    assert res.phase_a_digest is None


def test_both_mode_gradient_is_sum_of_losses(smoke):
    cfg = ModelConfig(**SMALL, stage2_zero_init=False)
    idx = np.arange(8)
    p2, f, gt = smoke.pose2d[idx], smoke.feats[idx], smoke.pose3d[idx]

    def grads(which):
        m = LiftingModel(cfg)
        out = m.forward_full(p2, f)
        parts = {"fine": tp.loss(out.refined, gt), "coarse": tp.loss(out.coarse, gt)}
        total = parts["fine"] if which == "fine" else parts["coarse"] if which == "coarse" \
            else nc.add(parts["fine"], parts["coarse"])
        nc.backward(total)
        return {p.name: p.grad for p in m.parameters()}

    both, fine, coarse = grads("both"), grads("fine"), grads("coarse")
    for k in both:
        ref = sum(g[k] for g in (fine, coarse) if g[k] is not None)
        assert np.allclose(both[k], ref, atol=1e-9), k


def test_lr_schedule_logged(smoke):
    res = tp.train(smoke, _cfg(stage1_epochs=9, stage2_epochs=0, lr=1e-3, batch_size=200), ModelConfig(**SMALL))
    lrs = res.log.column("lr")
    assert lrs[8] == pytest.approx(0.00081, abs=1e-15)
    assert lrs[:4] == [1e-3] * 4


def test_deterministic_losses(smoke):
    a = tp.train(smoke, _cfg(stage1_epochs=2, stage2_epochs=1), ModelConfig(**SMALL))
    b = tp.train(smoke, _cfg(stage1_epochs=2, stage2_epochs=1), ModelConfig(**SMALL))
    la, lb = np.array(a.log.column("train_loss")), np.array(b.log.column("train_loss"))
    assert np.abs(la - lb).max() <= 1e-12


def test_trainlog_round_trip(tmp_path, smoke):
    res = tp.train(smoke, _cfg(stage1_epochs=1, stage2_epochs=1), ModelConfig(**SMALL))
    path = tmp_path / "log.jsonl"
    res.log.write(path)
    back = tp.TrainLog.read(path)
    assert back.records == res.log.records
    with pytest.raises(ValueError):
        back.append(back.records[0])


def test_empty_training_split():
    ds = generate(4, SynthConfig(), 0, heldout=4)
    with pytest.raises(ValueError):
        tp.train(ds, _cfg(), ModelConfig(**SMALL))
