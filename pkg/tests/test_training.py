import logging
import math

import numpy as np
import pytest

from lanecorrect.autodiff import Tensor
from lanecorrect.data import (ROLE_GROUND_TRUTH, ROLE_INITIAL, LaneInstance,
                              PointCloudImage, Sample)
from lanecorrect.model import init_model
from lanecorrect.synth import SynthParams, build_dataset
from lanecorrect.training import (Checkpoint, ConfigError, TrainConfig,
                                  correct, epoch_lr, focal_loss,
                                  load_train_config, offset_loss,
                                  parse_config_text, prepare_sample,
                                  resample_lane, scale_points, train,
                                  TRAIN_FIELD_TYPES)

TINY_WORLD = SynthParams(n_regions=5, lanes_per_scene=2, lane_spacing=1.2,
                         curvature_max=0.002, drift_amplitude=1.0,
                         drift_wavelength=60.0, point_noise=0.1,
                         region_height=64, region_width=32, resolution=0.1,
                         sample_interval=5.0, ridge_width=0.25, seed=5)

TINY_CONFIG = TrainConfig(epochs=3, net_height=64, net_width=32, m_points=8,
                          patch_size=4, batch_size=2, seed=1)


@pytest.fixture(scope="module")
def tiny_dataset():
    train_set, test_set = build_dataset(TINY_WORLD)
    return train_set, test_set


# ------------------------------------------------------------ resampling

def test_resample_straight_segment_even_spacing():
    out = resample_lane([[0.0, 0.0], [9.0, 0.0]], 4)
    np.testing.assert_allclose(out, [[0, 0], [3, 0], [6, 0], [9, 0]], atol=1e-9)


def test_resample_collinear_points_stay_on_line(rng):
    xs = np.sort(rng.uniform(0, 50, 8))
    pts = np.stack([xs, 2.0 * xs + 1.0], axis=1)
    out = resample_lane(pts, 8)
    np.testing.assert_allclose(out[:, 1], 2.0 * out[:, 0] + 1.0, atol=1e-6)


def test_resample_contract(rng):
    pts = np.cumsum(rng.uniform(0.5, 1.5, size=(6, 2)), axis=0)
    for m in (2, 5, 32):
        out = resample_lane(pts, m)
        assert out.shape == (m, 2)
        np.testing.assert_allclose(out[0], pts[0], atol=1e-12)
        np.testing.assert_allclose(out[-1], pts[-1], atol=1e-12)


def test_resample_coincident_points_raise():
    with pytest.raises(ValueError):
        resample_lane([[2.0, 2.0], [2.0, 2.0], [2.0, 2.0]], 4)


def test_resample_smooth_curve_close_to_inputs(rng):
    theta = np.linspace(0, np.pi / 3, 12)
    pts = np.stack([40 * np.cos(theta), 40 * np.sin(theta)], axis=1)
    out = resample_lane(pts, 12)
    # cubic fit through the same parameter positions stays near the circle
    radii = np.linalg.norm(out, axis=1)
    np.testing.assert_allclose(radii, 40.0, atol=0.05)


# ------------------------------------------------------------ focal loss

def test_focal_saturated_correct_prediction():
    label = np.array([[1, 0], [0, 1]], dtype=np.uint8)
    logits = Tensor(np.where(label, 20.0, -20.0)[None].astype(np.float32))
    assert focal_loss(logits, label).item() < 1e-6


def test_focal_hand_value_single_negative():
    label = np.zeros((1, 1), dtype=np.uint8)
    logits = Tensor(np.zeros((1, 1, 1), dtype=np.float64))
    expect = -0.75 * 0.25 * math.log(0.5)
    assert focal_loss(logits, label).item() == pytest.approx(expect, rel=1e-9)
    assert expect == pytest.approx(0.1300, abs=5e-5)


def test_focal_nonnegative_random(rng):
    for _ in range(5):
        label = (rng.random((6, 6)) < 0.3).astype(np.uint8)
        logits = Tensor(rng.standard_normal((1, 6, 6)) * 4)
        assert focal_loss(logits, label).item() >= 0.0


def test_focal_rejects_bad_labels():
    logits = Tensor(np.zeros((1, 2, 2)))
    with pytest.raises(ValueError):
        focal_loss(logits, np.full((2, 2), 2, dtype=np.uint8))


def test_focal_gradient_matches_finite_differences(rng):
    import oracles
    label = (rng.random((4, 4)) < 0.4).astype(np.uint8)
    x = Tensor(rng.standard_normal((1, 4, 4)), requires_grad=True)

    def build():
        return focal_loss(x, label)

    build().backward()
    numeric = oracles.finite_diff_grads(build, [x], step=1e-4)
    flat = x.grad.reshape(-1)
    for idx, num, _, _ in numeric[0]:
        assert oracles.relative_error(float(flat[idx]), num) < 1e-4


# ------------------------------------------------------------ offset loss

def off_tensor(values):
    return Tensor(np.asarray(values, dtype=np.float64).T)  # (2, M)


def test_offset_loss_zero_residual():
    pred = [off_tensor([[1.0, 2.0], [3.0, 4.0]])]
    target = [np.array([[1.0, 2.0], [3.0, 4.0]])]
    assert offset_loss(pred, target).item() == 0.0


def test_offset_loss_quadratic_branch():
    pred = [off_tensor([[0.5, 0.0]])]
    target = [np.zeros((1, 2))]
    assert offset_loss(pred, target).item() == pytest.approx(0.125)


def test_offset_loss_linear_branch():
    pred = [off_tensor([[3.0, 4.0]])]
    target = [np.zeros((1, 2))]
    assert offset_loss(pred, target).item() == pytest.approx(6.5)


def test_offset_loss_count_mismatch():
    with pytest.raises(ValueError):
        offset_loss([off_tensor([[1.0, 1.0]])], [])
    with pytest.raises(ValueError):
        offset_loss([off_tensor([[1.0, 1.0]])], [np.zeros((2, 2))])


def test_offset_loss_mean_over_all_points():
    pred = [off_tensor([[3.0, 4.0]]), off_tensor([[0.5, 0.0], [0.0, 0.0]])]
    target = [np.zeros((1, 2)), np.zeros((2, 2))]
    expect = (6.5 + 0.125 + 0.0) / 3
    assert offset_loss(pred, target).item() == pytest.approx(expect)


# ------------------------------------------------------------ config files

def test_parse_config_round_trip(tmp_path):
    text = """
# training setup
epochs = 4
lr = 0.01
net_height = 64
net_width = 32
m_points = 8
patch_size = 4
seed = 9
"""
    path = tmp_path / "train.cfg"
    path.write_text(text)
    cfg = load_train_config(path)
    assert cfg.epochs == 4 and cfg.lr == 0.01 and cfg.seed == 9
    assert cfg.lr_drop_epoch == 50  # untouched default


def test_parse_config_unknown_key():
    with pytest.raises(ConfigError, match="momentum"):
        parse_config_text("momentum = 0.9", TRAIN_FIELD_TYPES)


def test_parse_config_bad_value():
    with pytest.raises(ConfigError, match="epochs"):
        parse_config_text("epochs = sixty", TRAIN_FIELD_TYPES)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(net_height=100, net_width=32)
    with pytest.raises(ValueError):
        TrainConfig(m_points=1)


# ------------------------------------------------------------ schedule & loop

def test_epoch_lr_schedule():
    cfg = TrainConfig(net_height=64, net_width=32)
    lrs = [epoch_lr(cfg, e) for e in range(1, 61)]
    assert all(lr == 0.001 for lr in lrs[:50])
    assert all(lr == 0.0001 for lr in lrs[50:])


def test_scaling_round_trip(rng):
    pts = rng.uniform(0, 320, size=(40, 2))
    down = scale_points(pts, 0.5, 0.25)
    back = scale_points(down, 2.0, 4.0)
    np.testing.assert_allclose(back, pts, atol=1e-6)


def test_train_records_history_and_is_deterministic(tiny_dataset):
    train_set, _ = tiny_dataset
    ckpt_a = train(TINY_CONFIG, train_set)
    ckpt_b = train(TINY_CONFIG, train_set)
    assert len(ckpt_a.history) == TINY_CONFIG.epochs
    hist_a = [(r.epoch, r.seg_loss, r.offset_loss, r.lr) for r in ckpt_a.history]
    hist_b = [(r.epoch, r.seg_loss, r.offset_loss, r.lr) for r in ckpt_b.history]
    assert hist_a == hist_b
    for row in ckpt_a.history:
        assert row.seg_loss >= 0 and math.isfinite(row.seg_loss)
        assert row.offset_loss >= 0 and math.isfinite(row.offset_loss)


def test_train_loss_decreases_on_tiny_overfit(tiny_dataset):
    train_set, _ = tiny_dataset
    config = TrainConfig(epochs=60, lr=0.002, lr_drop_epoch=50, net_height=64,
                         net_width=32, m_points=8, patch_size=4, batch_size=1,
                         seed=3)
    ckpt = train(config, train_set[:1])
    assert ckpt.history[-1].offset_loss < ckpt.history[0].offset_loss
    assert ckpt.history[-1].offset_loss < 0.01


def test_train_skips_unmatched_lanes(tiny_dataset, caplog):
    train_set, _ = tiny_dataset
    sample = train_set[0]
    orphan = LaneInstance(99, ROLE_INITIAL, sample.initial_lanes[0].points + 1.0)
    patched = Sample(image=sample.image,
                     initial_lanes=sample.initial_lanes + [orphan],
                     gt_lanes=sample.gt_lanes, label=sample.label,
                     region_index=sample.region_index, image_id=sample.image_id)
    with caplog.at_level(logging.WARNING):
        prepared = prepare_sample(patched, TINY_CONFIG)
    assert len(prepared.lanes) == len(sample.initial_lanes)
    assert any("99" in r.message for r in caplog.records)


def test_train_rejects_empty_dataset():
    with pytest.raises(ValueError):
        train(TINY_CONFIG, [])


def test_train_rejects_mismatched_patch_size(tiny_dataset):
    train_set, _ = tiny_dataset
    with pytest.raises(ValueError):
        train(TINY_CONFIG, train_set, params=init_model(6))


# ------------------------------------------------------------ inference

def test_correct_zero_offset_head_is_resampled_identity(tiny_dataset):
    train_set, _ = tiny_dataset
    sample = train_set[0]
    config = TrainConfig(epochs=1, net_height=32, net_width=16, m_points=8,
                         patch_size=4, seed=0)
    ckpt = Checkpoint(params=init_model(4, seed=0), config=config, epoch=0)
    out = correct(ckpt, sample)
    assert len(out) == len(sample.initial_lanes)
    for corrected, initial in zip(out, sample.initial_lanes):
        assert corrected.track_id == initial.track_id
        assert corrected.points.shape == (8, 2)
        direct = resample_lane(initial.points, 8)
        # identical up to the anisotropic rescaling of the spline parameter
        assert np.abs(corrected.points - direct).max() < 0.35


def test_correct_rescales_to_original(tiny_dataset):
    train_set, _ = tiny_dataset
    sample = train_set[0]
    config = TrainConfig(epochs=1, net_height=32, net_width=16, m_points=8,
                         patch_size=4, seed=0)
    ckpt = Checkpoint(params=init_model(4, seed=0), config=config, epoch=0)
    out = correct(ckpt, sample)
    h, w = sample.image.height, sample.image.width
    for lane in out:
        assert lane.points[:, 0].max() <= w + 16
        assert lane.points[:, 1].max() <= h + 16


def test_paper_scale_factor():
    # 2800x1400 original onto a 640x320 network: both axes scale by 4.375
    config = TrainConfig()  # defaults: 640x320
    sx = 1400 / config.net_width
    sy = 2800 / config.net_height
    assert sx == pytest.approx(4.375)
    assert sy == pytest.approx(4.375)


def test_checkpoint_save_load_round_trip(tmp_path, tiny_dataset):
    train_set, _ = tiny_dataset
    ckpt = train(TINY_CONFIG, train_set[:2])
    path = tmp_path / "model.ckpt"
    ckpt.save(path)
    loaded = Checkpoint.load(path)
    assert loaded.config.net_height == TINY_CONFIG.net_height
    assert loaded.config.m_points == TINY_CONFIG.m_points
    assert loaded.epoch == TINY_CONFIG.epochs
    assert len(loaded.history) == TINY_CONFIG.epochs
    sample = train_set[0]
    out_a = correct(ckpt, sample)
    out_b = correct(loaded, sample)
    for a, b in zip(out_a, out_b):
        np.testing.assert_allclose(a.points, b.points, atol=1e-5)
