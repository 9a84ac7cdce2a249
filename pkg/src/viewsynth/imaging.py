"""Image resampling helpers and PNG i/o.

All images move through the package as numpy arrays shaped [C, H, W] with
values in [0, 1]. RGB is stored as 8-bit PNG, depth as 16-bit single-channel
PNG, masks as 8-bit {0, 255} PNG.
"""

import numpy as np
from PIL import Image

from .errors import InvalidCropError

DEPTH_MAX_U16 = 65535
# largest representable depth strictly below the white background
DEPTH_INSIDE_MAX = (DEPTH_MAX_U16 - 1) / DEPTH_MAX_U16


def interp_matrix(n_out, n_in, dtype=np.float64):
    """Row-stochastic 1-D bilinear interpolation matrix (align-corners false)."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for o in range(n_out):
        src = (o + 0.5) * scale - 0.5
        i0 = int(np.floor(src))
        w = src - i0
        i0c = min(max(i0, 0), n_in - 1)
        i1c = min(max(i0 + 1, 0), n_in - 1)
        m[o, i0c] += 1.0 - w
        m[o, i1c] += w
    return m


def resize_bilinear(img, out_h, out_w):
    """Separable bilinear resize of [C,H,W] (or [H,W]) float arrays."""
    arr = np.asarray(img, dtype=np.float64)
    h, w = arr.shape[-2:]
    mh = interp_matrix(out_h, h)
    mw = interp_matrix(out_w, w)
    return np.matmul(np.matmul(mh, arr), mw.T)


def resize_nearest(img, out_h, out_w):
    """Nearest-neighbour resize; preserves the value set (binary masks)."""
    arr = np.asarray(img)
    h, w = arr.shape[-2:]
    rows = np.minimum((((np.arange(out_h) + 0.5) * h / out_h)).astype(np.int64), h - 1)
    cols = np.minimum((((np.arange(out_w) + 0.5) * w / out_w)).astype(np.int64), w - 1)
    return arr[..., rows[:, None], cols[None, :]]


def mask_bbox(mask):
    """Tight (top, left, height, width) of the nonzero region, or None."""
    ys, xs = np.nonzero(np.asarray(mask) > 0.5)
    if ys.size == 0:
        return None
    return int(ys.min()), int(xs.min()), int(ys.max() - ys.min() + 1), int(xs.max() - xs.min() + 1)


def fit_object_crop(rgb, mask, depth, size):
    """Ratio-preserving rescale of an object crop onto a size x size canvas.

    The longer side of the crop is scaled to `size`, the content is centered,
    and the canvas is padded with the background conventions (black RGB,
    white depth, zero mask). Masks are resampled nearest-neighbour so they
    stay binary. Background purity is re-imposed after resampling.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    h, w = mask.shape[-2:]
    if h == 0 or w == 0:
        raise InvalidCropError("zero-area crop")
    if h >= w:
        nh = size
        nw = max(1, int(round(w * size / h)))
    else:
        nw = size
        nh = max(1, int(round(h * size / w)))
    rgb_s = resize_bilinear(rgb, nh, nw)
    mask_s = resize_nearest(mask, nh, nw)
    depth_s = resize_bilinear(depth, nh, nw) if depth is not None else None

    top = (size - nh) // 2
    left = (size - nw) // 2
    out_rgb = np.zeros((3, size, size), dtype=np.float64)
    out_mask = np.zeros((1, size, size), dtype=np.float64)
    out_depth = np.ones((1, size, size), dtype=np.float64)
    out_rgb[:, top:top + nh, left:left + nw] = rgb_s
    out_mask[:, top:top + nh, left:left + nw] = mask_s
    if depth_s is not None:
        out_depth[:, top:top + nh, left:left + nw] = depth_s

    inside = out_mask[0] > 0.5
    out_rgb[:, ~inside] = 0.0
    out_mask[0] = inside.astype(np.float64)
    out_depth[0, ~inside] = 1.0
    out_depth[0, inside] = np.clip(out_depth[0, inside], 0.0, DEPTH_INSIDE_MAX)
    np.clip(out_rgb, 0.0, 1.0, out=out_rgb)
    return out_rgb, out_mask, out_depth


def write_rgb_png(path, rgb):
    arr = np.clip(np.asarray(rgb) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def read_rgb_png(path):
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return (arr / 255.0).transpose(2, 0, 1)


def write_depth_png(path, depth):
    arr = np.clip(np.asarray(depth)[0] * DEPTH_MAX_U16 + 0.5, 0, DEPTH_MAX_U16)
    data = arr.astype("<u2").tobytes()
    Image.frombytes("I;16", (arr.shape[1], arr.shape[0]), data).save(path)


def read_depth_png(path):
    arr = np.asarray(Image.open(path), dtype=np.float64)
    return (arr / DEPTH_MAX_U16)[None, :, :]


def write_mask_png(path, mask):
    arr = (np.asarray(mask)[0] > 0.5).astype(np.uint8) * 255
    Image.fromarray(arr, mode="L").save(path)


def read_mask_png(path):
    arr = np.asarray(Image.open(path).convert("L"), dtype=np.float64)
    return (arr > 127)[None, :, :].astype(np.float64)
