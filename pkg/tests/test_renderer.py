"""Renderer: SDF oracles, view invariants, pose grids, dataset manifest."""

import math
import os

import numpy as np
import pytest

from viewsynth.errors import DatasetError, InvalidCameraError, UnknownClassError
from viewsynth.renderer import (
    CLASS_IDS,
    CameraPose,
    DatasetManifest,
    angle_grid,
    evaluation_grid,
    generate_dataset,
    instance_sdf,
    make_instance,
    rasterize,
    render_sdf,
    sdf_box,
    sdf_cylinder,
    sdf_sphere,
    sdf_torus_x,
)

SMALL_GRID = angle_grid((0.0, 10.0), 10.0, (0.0, 180.0), 90.0)


# ---------------------------------------------------------------------------
# signed distance fields (analytic oracles)


def test_sdf_sphere_values():
    p = np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    assert np.allclose(sdf_sphere(p, 1.0), [-1.0, 1.0, 0.0], atol=1e-12)


def test_sdf_cylinder_values():
    # on the side wall, on the cap, at the center
    p = np.array([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 0.0]])
    d = sdf_cylinder(p, 1.0, 1.0)
    assert np.allclose(d, [0.0, 1.0, -1.0], atol=1e-12)


def test_sdf_box_corner_distance():
    p = np.array([[2.0, 2.0, 2.0]])
    d = sdf_box(p, (1.0, 1.0, 1.0))
    assert np.isclose(d[0], math.sqrt(3.0), atol=1e-12)


def test_sdf_torus_ring_point():
    # point on the ring circle itself is -minor away from the surface
    p = np.array([[0.5, 0.0, 0.0]])
    assert np.isclose(sdf_torus_x(p, 0.5, 0.1)[0], -0.1, atol=1e-12)


def test_instance_sdf_normalized_radius():
    """Scaled instances vanish outside the 0.8 bounding sphere."""
    for cls in CLASS_IDS:
        sdf = instance_sdf(make_instance(cls, 0))
        rng = np.random.default_rng(1)
        dirs = rng.normal(size=(200, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        assert np.all(sdf(dirs * 0.85) > 0), cls


# ---------------------------------------------------------------------------
# instances


def test_make_instance_deterministic():
    a = make_instance("mug", 5)
    b = make_instance("mug", 5)
    assert a.params == b.params
    c = make_instance("mug", 6)
    assert a.params != c.params


def test_unknown_class_rejected():
    with pytest.raises(UnknownClassError):
        make_instance("chair", 0)


# ---------------------------------------------------------------------------
# rendering


def test_render_unit_sphere_center_depth():
    """Center ray hits the unit sphere at distance-1 -> depth exactly ~0."""
    cam = CameraPose(0.0, 0.0)
    _, depth, mask = render_sdf(lambda p: sdf_sphere(p, 1.0), cam, 33)
    c = 33 // 2
    assert mask[0, c, c] == 1.0
    assert depth[0, c, c] < 1e-3


def test_view_invariants_all_classes():
    for cls in CLASS_IDS:
        s = rasterize(make_instance(cls, 1), CameraPose(10.0, 30.0), 32)
        m = s.mask[0] > 0.5
        assert m.any() and not m.all(), cls
        # mask <=> object depth; background exactly white / black
        assert np.all(s.depth[0][~m] == 1.0), cls
        assert np.all(s.depth[0][m] < 1.0), cls
        assert np.all(s.rgb[:, ~m] == 0.0), cls
        assert s.rgb.min() >= 0.0 and s.rgb.max() <= 1.0, cls


def test_rasterize_fills_longer_side():
    s = rasterize(make_instance("can", 2), CameraPose(0.0, 45.0), 48)
    ys, xs = np.nonzero(s.mask[0] > 0.5)
    h = ys.max() - ys.min() + 1
    w = xs.max() - xs.min() + 1
    assert max(h, w) == 48


def test_rasterize_deterministic():
    a = rasterize(make_instance("bottle", 3), CameraPose(20.0, 100.0), 32)
    b = rasterize(make_instance("bottle", 3), CameraPose(20.0, 100.0), 32)
    assert np.array_equal(a.rgb, b.rgb)
    assert np.array_equal(a.depth, b.depth)
    assert np.array_equal(a.mask, b.mask)


def test_can_silhouette_yaw_invariant():
    """A can is rotationally symmetric: yaw changes leave the mask intact."""
    inst = make_instance("can", 0)
    a = rasterize(inst, CameraPose(0.0, 0.0), 32)
    b = rasterize(inst, CameraPose(0.0, 137.0), 32)
    assert np.array_equal(a.mask, b.mask)


def test_camera_validation():
    inst = make_instance("can", 0)
    with pytest.raises(InvalidCameraError):
        rasterize(inst, CameraPose(0.0, 0.0, distance=0.9), 32)
    with pytest.raises(InvalidCameraError):
        rasterize(inst, CameraPose(0.0, 0.0), 8)


# ---------------------------------------------------------------------------
# pose grids


def test_angle_grid_counts_and_dedup():
    grid = angle_grid((0.0, 30.0), 10.0, (-360.0, 360.0), 12.0)
    assert len(grid) == 4 * 30  # yaw deduplicated modulo 360
    yaws = sorted({p.yaw for p in grid})
    assert len(yaws) == 30 and yaws[0] == 0.0 and 360.0 not in yaws


def test_evaluation_grid_size():
    grid = evaluation_grid()
    assert len(grid) == 11 * 60


def test_grid_rejects_bad_step():
    with pytest.raises(InvalidCameraError):
        angle_grid((0, 30), 0.0, (0, 360), 12.0)


# ---------------------------------------------------------------------------
# dataset generation and manifest


def test_generate_dataset_and_manifest_roundtrip(tmp_path):
    root = os.path.join(tmp_path, "data")
    man = generate_dataset(["can"], 2, SMALL_GRID, 16, root)
    assert len(man.records) == 2 * len(SMALL_GRID)
    loaded = DatasetManifest.load(os.path.join(root, "manifest.txt"))
    assert loaded.size == 16
    assert loaded.classes() == ["can"]
    assert loaded.instances("can") == [0, 1]
    rgb, depth, mask = loaded.load_view(loaded.records[0])
    assert rgb.shape == (3, 16, 16)
    assert depth.shape == (1, 16, 16)
    assert mask.shape == (1, 16, 16)


def test_generate_dataset_refuses_overwrite(tmp_path):
    root = os.path.join(tmp_path, "data")
    generate_dataset(["can"], 1, SMALL_GRID, 16, root)
    with pytest.raises(DatasetError):
        generate_dataset(["can"], 1, SMALL_GRID, 16, root)
    generate_dataset(["can"], 1, SMALL_GRID, 16, root, overwrite=True)


def test_generate_dataset_byte_identical(tmp_path):
    roots = [os.path.join(tmp_path, d) for d in ("a", "b")]
    for r in roots:
        generate_dataset(["mug"], 1, SMALL_GRID, 16, r)
    for dirpath, _, files in os.walk(roots[0]):
        for name in files:
            p0 = os.path.join(dirpath, name)
            p1 = p0.replace(roots[0], roots[1], 1)
            assert open(p0, "rb").read() == open(p1, "rb").read(), name


def test_view_quantization_roundtrip(tmp_path):
    """PNG encode/decode loses at most half a quantization step."""
    root = os.path.join(tmp_path, "data")
    man = generate_dataset(["box"], 1, SMALL_GRID[:1], 16, root)
    rec = man.records[0]
    rgb, depth, _ = man.load_view(rec)
    direct = rasterize(make_instance("box", 0), CameraPose(rec.pitch, rec.yaw), 16)
    assert np.abs(rgb - direct.rgb).max() <= 0.5 / 255 + 1e-9
    assert np.abs(depth - direct.depth).max() <= 0.5 / 65535 + 1e-9
