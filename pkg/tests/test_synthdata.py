import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from poselift import synthdata as sd
from poselift.geometry import project


@pytest.fixture(scope="module")
def template():
    return sd.SkeletonTemplate()


@pytest.fixture(scope="module")
def gen():
    return sd.SampleGenerator(sd.SynthConfig())


def _bones(template, pose):
    par = np.array(template.parents[1:])
    return np.linalg.norm(pose[1:] - pose[par], axis=1)


def test_rest_pose_bone_lengths(template):
    pose = sd.forward_kinematics(template, np.zeros((template.n_joints, 3)))
    assert np.abs(_bones(template, pose) - template.bone_lengths[1:]).max() < 1e-9


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_sampled_bone_lengths_exact(seed):
    t = sd.SkeletonTemplate()
    pose = sd.sample_pose(t, seed)
    assert np.abs(_bones(t, pose) - t.bone_lengths[1:]).max() < 1e-9


def test_sample_pose_deterministic(template):
    assert np.array_equal(sd.sample_pose(template, 11), sd.sample_pose(template, 11))


def test_template_validation():
    with pytest.raises(ValueError):
        sd.SkeletonTemplate(parents=(-1, 0, 5))
    offs = np.array(sd.REST_OFFSETS, dtype=float)
    offs[3] = 0.0
    with pytest.raises(ValueError):
        sd.SkeletonTemplate(offsets=offs)


def test_feature_grid_tiles_image():
    cfg = sd.SynthConfig()
    assert cfg.stride == (16, 16)
    assert (cfg.H * cfg.stride[0], cfg.W * cfg.stride[1]) == (cfg.h, cfg.w)
    with pytest.raises(ValueError):
        sd.SynthConfig(h=250)


def test_sample_projection_consistency(gen):
    for seed in range(20):
        s = gen.sample(seed, scene_id=seed % 8)
        assert np.abs(project(s.pose_cam, s.camera) - s.pose2d).max() < 1e-6
        assert np.array_equal(s.pose3d[0], np.zeros(3))


def test_no_clutter_means_empty_background(gen):
    cfg = sd.SynthConfig(clutter_amp=0.0)
    s = gen.sample(3)
    fm = sd.render_features(s.pose2d, s.pose3d, cfg, seed=3)
    centers = sd.cell_centers(cfg.H, cfg.W, cfg.stride)
    d2 = ((centers[None] - s.pose2d[:, None]) ** 2).sum(-1)
    far = (d2 > (3 * cfg.sigma) ** 2).all(axis=0)
    assert far.any()
    assert np.all(fm.tokens()[far] == 0.0)


def test_render_deterministic(gen):
    s = gen.sample(5)
    cfg = sd.SynthConfig()
    a = sd.render_features(s.pose2d, s.pose3d, cfg, scene_id=2, seed=9).values
    b = sd.render_features(s.pose2d, s.pose3d, cfg, scene_id=2, seed=9).values
    assert np.array_equal(a, b)


def _twin(gen, other_bin=False):
    for seed in range(200):
        s = gen.sample(seed)
        for j in (3, 6, 10, 13, 16):
            try:
                t = gen.ambiguous_twin(s, j)
            except ValueError:
                continue
            bins = gen.source.depth_bin(s.pose3d)[j], gen.source.depth_bin(t.pose3d)[j]
            if not other_bin or bins[0] != bins[1]:
                return s, t, j
    raise AssertionError("no ambiguous twin found")


def test_ambiguous_twin_shares_2d_pose(gen):
    s, t, j = _twin(gen)
    assert np.abs(s.pose2d - t.pose2d).max() < 1e-3
    assert np.abs(s.pose3d[j] - t.pose3d[j]).max() > 1.0
    # bone to the parent keeps its length
    p = gen.template.parents[j]
    assert np.linalg.norm(t.pose_cam[j] - t.pose_cam[p]) == pytest.approx(
        np.linalg.norm(s.pose_cam[j] - s.pose_cam[p]), abs=1e-6)


def test_cue_makes_twins_distinguishable(gen):
    s, t, j = _twin(gen, other_bin=True)
    src = gen.source
    rng = np.random.default_rng
    a = src.render(s.pose2d, s.pose3d, 0, rng(0)).tokens()
    b = src.render(t.pose2d, t.pose3d, 0, rng(0)).tokens()
    near = src.bump_weights(s.pose2d)[j] > 0
    assert np.abs(a[near] - b[near]).max() > 1e-3
    # without the cue the maps coincide
    a0 = src.render(s.pose2d, s.pose3d, 0, rng(0), cue=False).tokens()
    b0 = src.render(t.pose2d, t.pose3d, 0, rng(0), cue=False).tokens()
    assert np.abs(a0 - b0).max() < 1e-9


def test_twin_rejects_inner_joint(gen):
    with pytest.raises(ValueError):
        gen.ambiguous_twin(gen.sample(0), 1)


def test_dataset_round_trip(tmp_path):
    cfg = sd.SynthConfig()
    path = tmp_path / "d.plds"
    ds = sd.make_dataset(10, cfg, 4, path)
    back = sd.read_dataset(path)
    assert back.count == 10
    assert back.header == (17, 16, 12, 32, 256, 192, 10)
    for k in ("pose2d", "pose3d", "feats", "seeds", "scene_ids"):
        assert np.array_equal(getattr(ds, k), getattr(back, k)), k
    assert back.train_count == ds.train_count


def test_heldout_scenes_disjoint():
    ds = sd.generate(60, sd.SynthConfig(), 1, heldout=20)
    tr, he = ds.split("train"), ds.split("heldout")
    assert (tr.count, he.count) == (40, 20)
    assert not set(tr.scene_ids.tolist()) & set(he.scene_ids.tolist())


def test_generation_is_pure():
    a = sd.generate(8, sd.SynthConfig(), 3)
    b = sd.generate(8, sd.SynthConfig(), 3)
    assert np.array_equal(a.feats, b.feats) and np.array_equal(a.pose3d, b.pose3d)


def test_truncated_file_fails_checksum(tmp_path):
    path = tmp_path / "d.plds"
    sd.make_dataset(4, sd.SynthConfig(), 0, path)
    blob = path.read_bytes()
    (tmp_path / "t.plds").write_bytes(blob[:-7])
    with pytest.raises(sd.ChecksumError):
        sd.read_dataset(tmp_path / "t.plds")
    (tmp_path / "h.plds").write_bytes(blob[:10])
    with pytest.raises(sd.ChecksumError):
        sd.read_dataset(tmp_path / "h.plds")


def test_bad_magic_and_future_version(tmp_path):
    path = tmp_path / "d.plds"
    sd.make_dataset(2, sd.SynthConfig(), 0, path)
    blob = bytearray(path.read_bytes())
    bad = bytes(b"XXXX") + bytes(blob[4:])
    (tmp_path / "m.plds").write_bytes(bad)
    with pytest.raises(sd.FormatError):
        sd.read_dataset(tmp_path / "m.plds")
    blob[4:8] = (99).to_bytes(4, "little")
    (tmp_path / "v.plds").write_bytes(bytes(blob))
    with pytest.raises(sd.FormatError, match="newer"):
        sd.read_dataset(tmp_path / "v.plds")


def test_count_must_be_positive():
    with pytest.raises(ValueError):
        sd.generate(0, sd.SynthConfig(), 0)
