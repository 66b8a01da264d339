import numpy as np
import pytest

from lanecorrect.metrics import (chamfer, evaluate, format_reports, lane_iou,
                                 point_distances)
from lanecorrect.raster import dilate_chebyshev, rasterize_polyline

import oracles


def random_lane(rng, n=None, h=64, w=64):
    n = n or rng.integers(4, 24)
    start = rng.uniform([2, 2], [w - 3, h - 3])
    direction = rng.normal(size=2)
    direction /= np.linalg.norm(direction)
    steps = rng.uniform(0.5, 3.0, size=(n, 1))
    wiggle = rng.normal(scale=0.6, size=(n, 2))
    pts = start + np.cumsum(direction * steps + wiggle, axis=0)
    return np.clip(pts, 0, [w - 1, h - 1])


# ------------------------------------------------------------ point metrics

def test_point_distances_identical_lanes(rng):
    a = random_lane(rng, n=10)
    assert point_distances(a, a) == (0.0, 0.0)


def test_point_distances_linear_branch():
    s, l2 = point_distances([[3.0, 4.0]], [[0.0, 0.0]])
    assert s == pytest.approx(6.5)
    assert l2 == pytest.approx(5.0)


def test_point_distances_quadratic_branch():
    s, l2 = point_distances([[0.5, 0.0]], [[0.0, 0.0]])
    assert s == pytest.approx(0.125)
    assert l2 == pytest.approx(0.5)


def test_point_distances_count_mismatch():
    with pytest.raises(ValueError):
        point_distances([[0, 0], [1, 1]], [[0, 0]])


def test_smooth_l1_continuous_at_branch_boundary():
    eps = 1e-7
    below, _ = point_distances([[1.0 - eps, 0.0]], [[0.0, 0.0]])
    above, _ = point_distances([[1.0 + eps, 0.0]], [[0.0, 0.0]])
    assert below == pytest.approx(0.5, abs=1e-6)
    assert above == pytest.approx(0.5, abs=1e-6)


# ------------------------------------------------------------ lane IoU

def test_lane_iou_identical_lanes(rng):
    a = random_lane(rng)
    for k in (1, 2, 3):
        assert lane_iou(a, a, k, 64, 64) == 1.0


def test_lane_iou_disjoint_lanes():
    a = [[5.0, 10.0], [50.0, 10.0]]
    b = [[5.0, 40.0], [50.0, 40.0]]
    for k in (1, 2, 3):
        assert lane_iou(a, b, k, 64, 64) == 0.0


def test_lane_iou_parallel_lines_match_pixel_set_oracle():
    a = [(5.0, 20.0), (25.0, 20.0)]
    b = [(5.0, 22.0), (25.0, 22.0)]
    got = lane_iou(a, b, 1, 64, 64)
    expect = oracles.lane_iou_bruteforce(a, b, 1, 64, 64)
    assert got == expect


def test_lane_iou_random_lanes_match_oracle(rng):
    for _ in range(25):
        a = random_lane(rng)
        b = random_lane(rng)
        for k in (1, 2, 3):
            assert lane_iou(a, b, k, 64, 64) == oracles.lane_iou_bruteforce(a, b, k, 64, 64)


def test_lane_iou_swap_invariance(rng):
    a, b = random_lane(rng), random_lane(rng)
    for k in (1, 2, 3):
        assert lane_iou(a, b, k, 64, 64) == lane_iou(b, a, k, 64, 64)


def test_lane_iou_rejects_bad_extension(rng):
    a = random_lane(rng)
    with pytest.raises(ValueError):
        lane_iou(a, a, 4, 64, 64)
    with pytest.raises(ValueError):
        lane_iou(a, a, 0, 64, 64)


def test_lane_iou_both_off_canvas_is_one():
    a = [[200.0, 200.0], [220.0, 220.0]]
    assert lane_iou(a, a, 1, 64, 64) == 1.0


def test_lane_iou_integer_translation_invariance(rng):
    a = random_lane(rng, h=40, w=40) + 5
    b = random_lane(rng, h=40, w=40) + 5
    base = [lane_iou(a, b, k, 64, 64) for k in (1, 2, 3)]
    shifted = [lane_iou(a + [3, 2], b + [3, 2], k, 64, 64) for k in (1, 2, 3)]
    assert base == shifted


def test_rasterized_gt_within_dilation_band(rng):
    pts = random_lane(rng)
    center = rasterize_polyline(pts, 64, 64)
    dil = dilate_chebyshev(center, 1)
    assert np.all(dil[center])
    for x, y in pts:
        assert center[int(np.floor(y)), int(np.floor(x))]


# ------------------------------------------------------------ chamfer

def test_chamfer_identical_lanes(rng):
    a = random_lane(rng)
    assert chamfer(a, a) == 0.0


def test_chamfer_offset_parallel_lines():
    xs = np.arange(0.0, 20.0)
    a = np.stack([xs, np.zeros_like(xs)], axis=1)
    b = np.stack([xs, np.full_like(xs, 0.7)], axis=1)
    assert chamfer(a, b) == pytest.approx(0.7, abs=1e-12)
    assert chamfer(a, b) == pytest.approx(oracles.chamfer_bruteforce(a, b), abs=1e-9)


def test_chamfer_symmetry_and_oracle(rng):
    for _ in range(20):
        a = random_lane(rng)
        b = random_lane(rng)
        got = chamfer(a, b)
        assert got == chamfer(b, a)
        assert got == pytest.approx(oracles.chamfer_bruteforce(a, b), abs=1e-9)


def test_chamfer_empty_lane_raises():
    with pytest.raises(ValueError):
        chamfer(np.zeros((0, 2)), [[0.0, 0.0]])


def test_metrics_translation_invariance(rng):
    a, b = random_lane(rng), random_lane(rng)
    shift = np.array([3.7, -2.1])
    moved = point_distances(a + shift, b + shift)
    base = point_distances(a, b)
    assert base[0] == pytest.approx(moved[0], abs=1e-9)
    assert base[1] == pytest.approx(moved[1], abs=1e-9)
    assert chamfer(a, b) == pytest.approx(chamfer(a + shift, b + shift), abs=1e-9)


# ------------------------------------------------------------ evaluate

def test_evaluate_identical_pairs(rng):
    pairs = [(random_lane(rng, n=12),) * 2 for _ in range(4)]
    rep = evaluate(pairs, unit="p", canvas=(64, 64))
    assert rep.count == 4
    assert rep.smooth_l1 == 0.0 and rep.l2 == 0.0 and rep.chamfer == 0.0
    assert all(v == 1.0 for v in rep.lane_iou.values())


def test_evaluate_mean_of_instances():
    xs = np.arange(0.0, 10.0)
    base = np.stack([xs, np.zeros_like(xs)], axis=1)
    pairs = [(base + [0, 1.0], base), (base + [0, 3.0], base)]
    rep = evaluate(pairs, unit="m")
    assert rep.chamfer == pytest.approx(2.0)
    assert rep.lane_iou is None


def test_evaluate_aggregation_matches_per_instance(rng):
    pairs = [(random_lane(rng, n=15), random_lane(rng, n=15)) for _ in range(6)]
    rep = evaluate(pairs, unit="p", canvas=(64, 64))
    for key, mean_value in (("smooth_l1", rep.smooth_l1), ("l2", rep.l2),
                            ("chamfer", rep.chamfer)):
        recomputed = sum(rep.per_instance[key]) / rep.count
        assert mean_value == pytest.approx(recomputed, abs=1e-9)
    for k in (1, 2, 3):
        recomputed = sum(rep.per_instance[f"lane_iou@{k}"]) / rep.count
        assert rep.lane_iou[k] == pytest.approx(recomputed, abs=1e-9)


def test_evaluate_rejects_empty_and_bad_unit():
    with pytest.raises(ValueError):
        evaluate([], unit="p", canvas=(64, 64))
    with pytest.raises(ValueError):
        evaluate([(np.zeros((2, 2)), np.zeros((2, 2)))], unit="x")
    with pytest.raises(ValueError):
        evaluate([(np.zeros((2, 2)), np.zeros((2, 2)))], unit="p")


def test_format_reports_contains_rows(rng):
    pairs = [(random_lane(rng, n=8), random_lane(rng, n=8)) for _ in range(3)]
    local = evaluate(pairs, unit="p", canvas=(64, 64))
    text = format_reports([("initial", local), ("corrected", local)], "Local correction")
    assert "initial" in text and "corrected" in text
    assert "lane-IoU@2" in text and "CD (p)" in text
    glob = evaluate(pairs, unit="m")
    text2 = format_reports([("initial", glob)], "Global correction")
    assert "CD (m)" in text2 and "lane-IoU" not in text2
