"""Evaluation: pixel error/accuracy metrics, per-class reports, rotation and
continuity analyses, and the cross-class conversion harness.

Errors are mean absolute pixel differences on the 0-255 scale; accuracy is
the percentage complement acc = (1 - e/255) * 100. The error summation is
strictly left-to-right in row-major order so it is bit-for-bit comparable
with a naive scalar loop.
"""

import csv
import io
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyHoldoutError, InvalidArgumentError, ShapeError
from .extractor import route
from .network import AngleQuery, encode_angles
from .renderer import make_instance, rasterize
from .tensor import Tensor


def _as_array(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def image_error(gen, ref):
    """Mean absolute pixel difference on the 0-255 scale.

    Inputs hold [0,1] values; both are scaled by 255 before differencing.
    The accumulation order is row-major left-to-right (cumsum is sequential),
    matching a scalar triple loop bitwise.
    """
    g = _as_array(gen).astype(np.float64)
    r = _as_array(ref).astype(np.float64)
    if g.shape != r.shape:
        raise ShapeError(f"shape mismatch: {g.shape} vs {r.shape}")
    diff = np.abs(g * 255.0 - r * 255.0).ravel()
    return float(diff.cumsum()[-1]) / diff.size


def image_accuracy(e):
    """acc = (1 - e/255) * 100, in percent."""
    if not 0.0 <= e <= 255.0:
        raise InvalidArgumentError(f"error {e} outside [0, 255]")
    return (1.0 - e / 255.0) * 100.0


@dataclass
class PairResult:
    class_id: str
    instance_seed: int
    delta_pitch: float
    delta_yaw: float
    e_rgb: float
    e_depth: float


@dataclass
class ClassRow:
    e_rgb: float
    std_rgb: float
    acc_rgb: float
    e_depth: float
    std_depth: float
    acc_depth: float
    count: int


@dataclass
class EvalReport:
    rows: dict = field(default_factory=dict)  # class_id -> ClassRow

    def add(self, class_id, results):
        er = np.array([p.e_rgb for p in results])
        ed = np.array([p.e_depth for p in results])
        self.rows[class_id] = ClassRow(
            e_rgb=float(er.mean()), std_rgb=float(er.std()),
            acc_rgb=image_accuracy(float(er.mean())),
            e_depth=float(ed.mean()), std_depth=float(ed.std()),
            acc_depth=image_accuracy(float(ed.mean())),
            count=len(results))

    def average_row(self):
        rows = list(self.rows.values())
        e_rgb = float(np.mean([r.e_rgb for r in rows]))
        e_d = float(np.mean([r.e_depth for r in rows]))
        return ClassRow(
            e_rgb=e_rgb, std_rgb=float(np.mean([r.std_rgb for r in rows])),
            acc_rgb=image_accuracy(e_rgb),
            e_depth=e_d, std_depth=float(np.mean([r.std_depth for r in rows])),
            acc_depth=image_accuracy(e_d),
            count=sum(r.count for r in rows))

    def to_csv(self):
        classes = list(self.rows)
        cols = classes + ["average"]
        rows = [self.rows[c] for c in classes] + [self.average_row()]
        out = io.StringIO()
        w = csv.writer(out)
        w.writerow(["metric"] + cols)
        for label, attr in (("e_rgb_px", "e_rgb"), ("std_rgb_px", "std_rgb"),
                            ("acc_rgb_pct", "acc_rgb"), ("e_depth_px", "e_depth"),
                            ("std_depth_px", "std_depth"), ("acc_depth_pct", "acc_depth")):
            w.writerow([label] + [f"{getattr(r, attr):.4f}" for r in rows])
        w.writerow(["images"] + [r.count for r in rows])
        return out.getvalue()


class ReferenceCache:
    """Memoized ground-truth renders keyed by (class, instance, pose, size)."""

    def __init__(self, size):
        self.size = size
        self._cache = {}
        self._instances = {}

    def get(self, class_id, instance_seed, pose):
        key = (class_id, instance_seed, pose.pitch, pose.yaw)
        if key not in self._cache:
            ikey = (class_id, instance_seed)
            if ikey not in self._instances:
                self._instances[ikey] = make_instance(class_id, instance_seed)
            self._cache[key] = rasterize(self._instances[ikey], pose, self.size)
        return self._cache[key]


def _input_views(manifest, class_id, instance, inputs_per_instance):
    views = manifest.views(class_id, instance)
    if inputs_per_instance >= len(views):
        return views
    idx = np.linspace(0, len(views) - 1, inputs_per_instance).round().astype(int)
    return [views[i] for i in sorted(set(idx.tolist()))]


def _wrap_delta(d):
    """Signed angular difference folded into (-180, 180]."""
    d = float(d) % 360.0
    return d - 360.0 if d > 180.0 else d


def generate_views(net, input_tensor, queries, batch_size=16):
    """Run the generator over many relative rotations for one input view."""
    n = len(queries)
    rgbs, deps = [], []
    xd = input_tensor.data if isinstance(input_tensor, Tensor) else np.asarray(input_tensor)
    for lo in range(0, n, batch_size):
        qs = queries[lo:lo + batch_size]
        xb = Tensor(np.repeat(xd[None], len(qs), axis=0), dtype=net.dtype)
        rgb, dep = net.forward_batch(xb, encode_angles(qs, dtype=net.dtype), mode="eval")
        rgbs.append(rgb.data)
        deps.append(dep.data)
    return np.concatenate(rgbs), np.concatenate(deps)


def evaluate_pairs(net, manifest, grid, class_id, instances, inputs_per_instance=5,
                   generator=None, ref_cache=None):
    """Score every (input view, grid pose) pair; returns PairResult list.

    `generator`, when given, replaces the network: it is called as
    generator(input_tensor, query, instance_seed, target_pose) and must
    return (rgb, depth) arrays. This is the hook for oracle tests.
    """
    if not instances:
        raise EmptyHoldoutError(f"no instances to evaluate for class {class_id!r}")
    refs = ref_cache or ReferenceCache(manifest.size)
    results = []
    for inst in instances:
        in_views = _input_views(manifest, class_id, inst, inputs_per_instance)
        targets = [refs.get(class_id, inst, pose) for pose in grid]
        for rec in in_views:
            rgb_in, _, mask_in = manifest.load_view(rec)
            x = Tensor(np.concatenate([rgb_in, mask_in], axis=0))
            queries = [AngleQuery(delta_yaw=p.yaw - rec.yaw, delta_pitch=p.pitch - rec.pitch)
                       for p in grid]
            if generator is None:
                gen_rgb, gen_dep = generate_views(net, x, queries)
            else:
                outs = [generator(x, q, inst, p) for q, p in zip(queries, grid)]
                gen_rgb = np.stack([o[0] for o in outs])
                gen_dep = np.stack([o[1] for o in outs])
            for i, (q, tgt) in enumerate(zip(queries, targets)):
                results.append(PairResult(
                    class_id=class_id, instance_seed=inst,
                    delta_pitch=_wrap_delta(q.delta_pitch),
                    delta_yaw=_wrap_delta(q.delta_yaw),
                    e_rgb=image_error(gen_rgb[i], tgt.rgb),
                    e_depth=image_error(gen_dep[i], tgt.depth)))
    return results


def evaluate_model(net, manifest, grid, instances, class_id=None,
                   inputs_per_instance=5, generator=None):
    """Per-class Table-style report over held-out instances."""
    if class_id is None:
        class_id = (net.config.class_id if net is not None else "") or manifest.classes()[0]
    results = evaluate_pairs(net, manifest, grid, class_id, instances,
                             inputs_per_instance, generator)
    report = EvalReport()
    report.add(class_id, results)
    return report, results


@dataclass
class RotationCurve:
    bins: dict  # (dpitch, dyaw) -> (acc_rgb, acc_depth, count)

    def total_count(self):
        return sum(v[2] for v in self.bins.values())

    def to_csv(self):
        out = io.StringIO()
        w = csv.writer(out)
        w.writerow(["delta_pitch", "delta_yaw", "acc_rgb_pct", "acc_depth_pct", "count"])
        for (dp, dy) in sorted(self.bins):
            ar, ad, n = self.bins[(dp, dy)]
            w.writerow([dp, dy, f"{ar:.4f}", f"{ad:.4f}", n])
        return out.getvalue()


def rotation_curve(results):
    """Bucket pair accuracies by exact relative rotation (dpitch, dyaw)."""
    groups = {}
    for p in results:
        groups.setdefault((p.delta_pitch, p.delta_yaw), []).append(p)
    bins = {}
    for key, ps in groups.items():
        ar = image_accuracy(float(np.mean([p.e_rgb for p in ps])))
        ad = image_accuracy(float(np.mean([p.e_depth for p in ps])))
        bins[key] = (ar, ad, len(ps))
    return RotationCurve(bins)


def yaw_band_accuracy(results, lo, hi):
    """Mean (acc_rgb, acc_depth) over pairs with |delta_yaw| in [lo, hi]."""
    sel = [p for p in results if lo <= abs(p.delta_yaw) <= hi]
    if not sel:
        raise EmptyHoldoutError(f"no pairs with |delta_yaw| in [{lo}, {hi}]")
    return (image_accuracy(float(np.mean([p.e_rgb for p in sel]))),
            image_accuracy(float(np.mean([p.e_depth for p in sel]))))


@dataclass
class ContinuityResult:
    max_step: float
    mean_step: float
    frames: int
    closure_exact: bool  # frame(0) == frame(360) bitwise


def continuity_score(net, input_tensor, yaw_step=6.0):
    """Consecutive-frame distance over a full yaw sweep at `yaw_step`.

    Generates frames at 0, step, ..., 360-step plus the closing 360 frame;
    the step distances include the wrap-around pair. The sweep is smooth
    when the max step distance stays close to the mean.
    """
    n = int(round(360.0 / yaw_step))
    yaws = [i * yaw_step for i in range(n)] + [360.0]
    queries = [AngleQuery(delta_yaw=y) for y in yaws]
    rgb, dep = generate_views(net, input_tensor, queries)
    frames = np.concatenate([rgb, dep], axis=1)  # [n+1, 4, S, S]
    steps = [float(np.abs(frames[i + 1] - frames[i]).mean()) for i in range(n)]
    closure = bool(np.array_equal(frames[0], frames[-1]))
    return ContinuityResult(max_step=max(steps), mean_step=float(np.mean(steps)),
                            frames=n, closure_exact=closure)


def cross_class_generate(input_tensor, registry, input_label, override, grid):
    """Route an input through another class's generator (conversion mode)."""
    net = route(input_label, registry, override=override)
    queries = [AngleQuery(delta_yaw=p.yaw, delta_pitch=p.pitch) for p in grid]
    rgb, dep = generate_views(net, input_tensor, queries)
    return [(rgb[i], dep[i]) for i in range(len(grid))]


def save_sequence(frames, out_dir, prefix=""):
    """Write numbered rgb_NNN.png / depth_NNN.png pairs."""
    from .imaging import write_depth_png, write_rgb_png
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i, (rgb, dep) in enumerate(frames):
        rp = os.path.join(out_dir, f"{prefix}rgb_{i:03d}.png")
        dp = os.path.join(out_dir, f"{prefix}depth_{i:03d}.png")
        write_rgb_png(rp, rgb)
        write_depth_png(dp, dep)
        paths.append((rp, dp))
    return paths
