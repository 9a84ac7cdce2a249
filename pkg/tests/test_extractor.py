"""Front end: segmentation, crop normalization, model registry routing."""

import os

import numpy as np
import pytest

from viewsynth.errors import DatasetError, InvalidCropError, NoModelError
from viewsynth.extractor import (
    ModelRegistry,
    detection_to_input,
    normalize_crop,
    route,
    segment_background_threshold,
)
from viewsynth.network import MICRO_CONFIG, build_viewnet, save_checkpoint
from viewsynth.renderer import CameraPose, make_instance, rasterize


def scene_with_square(size=32, top=5, left=8, h=10, w=6, color=(0.2, 0.4, 0.9)):
    scene = np.zeros((3, size, size))
    scene[:, top:top + h, left:left + w] = np.asarray(color).reshape(3, 1, 1)
    return scene


# ---------------------------------------------------------------------------
# segmentation


def test_segment_single_component_bbox():
    scene = scene_with_square()
    dets = segment_background_threshold(scene)
    assert len(dets) == 1
    assert dets[0].bbox == (5, 8, 10, 6)
    assert dets[0].mask.shape == (10, 6)
    assert np.all(dets[0].mask == 1.0)


def test_segment_multiple_components():
    scene = scene_with_square()
    scene[:, 25:30, 25:30] = 0.8
    dets = segment_background_threshold(scene)
    assert len(dets) == 2


def test_segment_empty_scene():
    assert segment_background_threshold(np.zeros((3, 16, 16))) == []


def test_segment_tolerance_ignores_noise():
    scene = np.full((3, 16, 16), 1.0 / 255.0)  # below the 2/255 threshold
    assert segment_background_threshold(scene) == []


def test_segment_nonblack_background():
    scene = np.full((3, 16, 16), 0.5)
    scene[:, 4:8, 4:8] = 1.0
    dets = segment_background_threshold(scene, background_color=(0.5, 0.5, 0.5))
    assert len(dets) == 1
    assert dets[0].bbox == (4, 4, 4, 4)


# ---------------------------------------------------------------------------
# crop normalization


def test_normalize_crop_shape_and_channels():
    rgb = np.random.default_rng(0).random((3, 10, 6))
    mask = np.ones((10, 6))
    x = normalize_crop(rgb, mask, 16)
    assert x.data.shape == (4, 16, 16)
    # longer side fills the canvas
    ys, xs = np.nonzero(x.data[3] > 0.5)
    assert ys.max() - ys.min() + 1 == 16


def test_normalize_crop_rejects_empty():
    with pytest.raises(InvalidCropError):
        normalize_crop(np.zeros((3, 0, 4)), np.zeros((0, 4)), 16)


def test_composition_reproduces_direct_render():
    """scene render -> segment -> normalize matches the training render."""
    inst = make_instance("mug", 2)
    cam = CameraPose(10.0, 40.0, 3.5)
    sample = rasterize(inst, cam, 64)
    # embed the normalized view in a larger black scene
    scene = np.zeros((3, 96, 96))
    scene[:, 16:80, 16:80] = sample.rgb
    dets = segment_background_threshold(scene)
    assert len(dets) == 1
    x = detection_to_input(scene, dets[0], 64)
    mae = np.abs(x.data[:3] - sample.rgb).mean()
    assert mae <= 2.0 / 255.0, mae


# ---------------------------------------------------------------------------
# registry and routing


@pytest.fixture
def registry(tmp_path):
    entries = {}
    for i, cls in enumerate(("can", "mug")):
        net = build_viewnet(MICRO_CONFIG, seed=i)
        net.config.class_id = cls
        path = os.path.join(tmp_path, f"{cls}.ckpt")
        save_checkpoint(net, path)
        entries[cls] = path
    return ModelRegistry(entries)


def test_registry_loads_and_routes(registry):
    assert registry.classes() == ["can", "mug"]
    assert route("can", registry).config.class_id == "can"
    assert route("can", registry, override="mug").config.class_id == "mug"


def test_registry_unknown_class(registry):
    with pytest.raises(NoModelError):
        route("bottle", registry)


def test_registry_file_parsing(tmp_path, registry):
    reg_path = os.path.join(tmp_path, "models.txt")
    with open(reg_path, "w") as f:
        f.write("# registered generators\n")
        f.write("can=can.ckpt\n")
        f.write("mug=mug.ckpt\n")
    loaded = ModelRegistry.from_file(reg_path)
    assert loaded.classes() == ["can", "mug"]


def test_registry_file_rejects_duplicates(tmp_path, registry):
    reg_path = os.path.join(tmp_path, "models.txt")
    with open(reg_path, "w") as f:
        f.write("can=can.ckpt\ncan=mug.ckpt\n")
    with pytest.raises(DatasetError):
        ModelRegistry.from_file(reg_path)
