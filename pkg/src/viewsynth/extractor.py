"""Front end: segmentation on uniform backgrounds, crop normalization, routing.

This is the detector-agnostic stand-in for a learned instance segmenter:
synthetic scenes are rendered on a known uniform background, so connected
components of non-background pixels give exact masks. The Detection record
is the seam where a real detector could be plugged in.
"""

import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DatasetError, InvalidCropError, NoModelError
from .imaging import fit_object_crop
from .network import load_checkpoint
from .tensor import Tensor


@dataclass
class Detection:
    bbox: tuple      # (top, left, height, width) in scene pixels
    mask: np.ndarray  # [h,w] binary over the bbox
    class_label: str
    score: float


def segment_background_threshold(scene, background_color=(0.0, 0.0, 0.0),
                                 tolerance=2.0 / 255.0, class_label="unknown"):
    """Connected components of pixels deviating from the background color.

    `scene` is [3,H,W] in [0,1]. Returns one Detection per 4-connected
    component; an all-background scene yields an empty list.
    """
    scene = np.asarray(scene)
    bg = np.asarray(background_color).reshape(3, 1, 1)
    fg = np.abs(scene - bg).max(axis=0) > tolerance
    labels, count = ndimage.label(fg)
    detections = []
    for i in range(1, count + 1):
        comp = labels == i
        ys, xs = np.nonzero(comp)
        top, left = int(ys.min()), int(xs.min())
        h = int(ys.max() - top + 1)
        w = int(xs.max() - left + 1)
        detections.append(Detection(
            bbox=(top, left, h, w),
            mask=comp[top:top + h, left:left + w].astype(np.float64),
            class_label=class_label,
            score=1.0,
        ))
    return detections


def normalize_crop(rgb_crop, mask_crop, target_size):
    """Ratio-preserving rescale plus black padding; returns a [4,S,S] tensor.

    RGB is resampled bilinearly, the mask nearest-neighbour so it stays
    binary. The content is centered on the square canvas.
    """
    rgb_crop = np.asarray(rgb_crop, dtype=np.float64)
    mask_crop = np.asarray(mask_crop, dtype=np.float64)
    if mask_crop.ndim == 2:
        mask_crop = mask_crop[None]
    if rgb_crop.size == 0 or mask_crop.size == 0:
        raise InvalidCropError("zero-area crop")
    rgb, mask, _ = fit_object_crop(rgb_crop, mask_crop, None, target_size)
    return Tensor(np.concatenate([rgb, mask], axis=0))


def detection_to_input(scene, detection, target_size):
    """Cut the detection out of the scene and normalize it for the generator."""
    top, left, h, w = detection.bbox
    rgb_crop = np.asarray(scene)[:, top:top + h, left:left + w] * detection.mask[None]
    return normalize_crop(rgb_crop, detection.mask, target_size)


class ModelRegistry:
    """Immutable map from object class to its dedicated generator."""

    def __init__(self, entries):
        """entries: mapping class_id -> checkpoint path; all are loaded now."""
        self._paths = dict(entries)
        self._models = {cls: load_checkpoint(path) for cls, path in self._paths.items()}

    @classmethod
    def from_file(cls, path):
        """Registry file: one `class_id=checkpoint_path` per line; # comments."""
        entries = {}
        base = os.path.dirname(os.path.abspath(path))
        with open(path) as f:
            for line in f:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                label, _, ckpt = line.partition("=")
                if not ckpt:
                    raise DatasetError(f"malformed registry line: {line!r}")
                if label in entries:
                    raise DatasetError(f"class {label!r} registered twice")
                entries[label.strip()] = os.path.join(base, ckpt.strip())
        return cls(entries)

    def classes(self):
        return sorted(self._models)

    def checkpoint_path(self, label):
        return self._paths[label]

    def __contains__(self, label):
        return label in self._models

    def get(self, label):
        if label not in self._models:
            raise NoModelError(f"no generator registered for class {label!r}")
        return self._models[label]


def route(label, registry, override=None):
    """Pick the generator for a detection; `override` forces conversion mode."""
    return registry.get(override if override is not None else label)
