"""Evaluation harness: metric oracles, reports, rotation and continuity."""

import numpy as np
import pytest

from viewsynth.errors import EmptyHoldoutError, InvalidArgumentError, ShapeError
from viewsynth.evaluation import (
    EvalReport,
    continuity_score,
    evaluate_model,
    evaluate_pairs,
    image_accuracy,
    image_error,
    rotation_curve,
    yaw_band_accuracy,
)
from viewsynth.network import MICRO_CONFIG, build_viewnet
from viewsynth.renderer import angle_grid, make_instance, rasterize
from viewsynth.tensor import Tensor

GRID = angle_grid((0.0, 10.0), 10.0, (0.0, 270.0), 90.0)


def oracle_generator(class_id, size):
    """Perfect generator: re-renders the requested view."""
    def gen(x, query, instance_seed, pose):
        s = rasterize(make_instance(class_id, instance_seed), pose, size)
        return s.rgb, s.depth
    return gen


# ---------------------------------------------------------------------------
# metrics


def test_image_error_known_value():
    gen = np.zeros((3, 4, 4))
    ref = np.full((3, 4, 4), 0.5)
    assert np.isclose(image_error(gen, ref), 127.5, atol=1e-12)


def test_image_error_identity_is_zero():
    x = np.random.default_rng(0).random((3, 8, 8))
    assert image_error(x, x) == 0.0


def test_image_error_matches_scalar_loop():
    rng = np.random.default_rng(1)
    for _ in range(10):
        g = rng.random((2, 5, 7))
        r = rng.random((2, 5, 7))
        total = 0.0
        for v in np.abs(g.ravel() * 255.0 - r.ravel() * 255.0):
            total += float(v)
        assert image_error(g, r) == total / g.size  # bitwise


def test_image_error_shape_mismatch():
    with pytest.raises(ShapeError):
        image_error(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))


def test_image_accuracy_fixed_points():
    for e, acc in ((17.38, 93.18), (11.52, 95.48), (9.62, 96.23), (4.33, 98.30)):
        assert abs(image_accuracy(e) - acc) < 0.01


def test_image_accuracy_bounds():
    assert image_accuracy(0.0) == 100.0
    assert image_accuracy(255.0) == 0.0
    with pytest.raises(InvalidArgumentError):
        image_accuracy(-1.0)
    with pytest.raises(InvalidArgumentError):
        image_accuracy(256.0)


# ---------------------------------------------------------------------------
# model evaluation


def test_oracle_generator_scores_perfectly(micro_manifest):
    report, results = evaluate_model(
        None, micro_manifest, GRID, [2], class_id="can",
        inputs_per_instance=2, generator=oracle_generator("can", 16))
    row = report.rows["can"]
    assert row.e_rgb == 0.0 and row.e_depth == 0.0
    assert row.acc_rgb == 100.0 and row.acc_depth == 100.0
    assert row.std_rgb == 0.0
    assert row.count == 2 * len(GRID)


def test_untrained_network_scores_between_bounds(micro_manifest):
    net = build_viewnet(MICRO_CONFIG, seed=0)
    report, _ = evaluate_model(net, micro_manifest, GRID, [2], class_id="can",
                               inputs_per_instance=1)
    row = report.rows["can"]
    assert 0.0 < row.acc_rgb < 100.0
    assert 0.0 < row.acc_depth < 100.0


def test_empty_holdout_rejected(micro_manifest):
    with pytest.raises(EmptyHoldoutError):
        evaluate_pairs(None, micro_manifest, GRID, "can", [],
                       generator=oracle_generator("can", 16))


def test_report_csv_structure(micro_manifest):
    report, _ = evaluate_model(None, micro_manifest, GRID, [2], class_id="can",
                               inputs_per_instance=1, generator=oracle_generator("can", 16))
    lines = report.to_csv().strip().splitlines()
    assert lines[0] == "metric,can,average"
    assert len(lines) == 8
    assert lines[3].startswith("acc_rgb_pct,100.0000,100.0000")


# ---------------------------------------------------------------------------
# rotation curve


def test_rotation_curve_partitions_results(micro_manifest):
    _, results = evaluate_model(None, micro_manifest, GRID, [1, 2], class_id="can",
                                inputs_per_instance=2, generator=oracle_generator("can", 16))
    curve = rotation_curve(results)
    assert curve.total_count() == len(results)
    # every relative yaw folded into (-180, 180]
    for dp, dy in curve.bins:
        assert -180.0 < dy <= 180.0
        assert -180.0 < dp <= 180.0
    header = curve.to_csv().splitlines()[0]
    assert header == "delta_pitch,delta_yaw,acc_rgb_pct,acc_depth_pct,count"


def test_yaw_band_accuracy_selects_band(micro_manifest):
    _, results = evaluate_model(None, micro_manifest, GRID, [1], class_id="can",
                                inputs_per_instance=1, generator=oracle_generator("can", 16))
    acc_rgb, acc_depth = yaw_band_accuracy(results, 0.0, 180.0)
    assert acc_rgb == 100.0 and acc_depth == 100.0
    with pytest.raises(EmptyHoldoutError):
        yaw_band_accuracy(results, 181.0, 200.0)


# ---------------------------------------------------------------------------
# continuity


def test_continuity_sweep_closes_exactly(micro_manifest):
    net = build_viewnet(MICRO_CONFIG, seed=0)
    rgb, _, mask = micro_manifest.load_view(micro_manifest.records[0])
    x = Tensor(np.concatenate([rgb, mask], axis=0))
    result = continuity_score(net, x, yaw_step=30.0)
    assert result.frames == 12
    assert result.closure_exact  # 0 and 360 degrees encode identically
    assert result.max_step >= result.mean_step >= 0.0
