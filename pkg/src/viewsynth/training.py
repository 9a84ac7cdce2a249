"""Training loop: within-instance view pairing, Adam, gradient clipping.

Each batch element is a (input view, target view) pair drawn from a single
object instance; pairs never mix instances. The conditioning signal is the
relative rotation (target pose minus input pose). The loss is the equally
weighted sum of the RGB and depth mean squared errors.
"""

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tz
from .errors import ConfigError, DivergenceError, EmptyClassError, ShapeError
from .network import AngleQuery, encode_angles, save_checkpoint
from .tensor import Tensor


@dataclass
class TrainConfig:
    learning_rate: float = 0.0005
    iterations: int = 5000
    batch_size: int = 16
    clip_low: float = -1.0
    clip_high: float = 1.0
    rgb_loss_weight: float = 1.0
    depth_loss_weight: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0
    holdout_fraction: float = 0.2
    checkpoint_interval: int = 1000

    def validate(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch-norm requirement)")
        if not self.clip_low < self.clip_high:
            raise ConfigError("clip bounds must be ordered")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ConfigError("holdout_fraction must lie in [0, 1)")

    def to_kv(self, prefix="train."):
        items = sorted(vars(self).items())
        return "".join(f"{prefix}{k}={v}\n" for k, v in items)


def split_instances(manifest, class_id, holdout_fraction):
    """Deterministic (train, holdout) split of a class's instance ids.

    Held-out instances are taken from the tail of the seed-ordered list so
    the split is stable across runs and manifests.
    """
    instances = sorted(manifest.instances(class_id))
    if not instances:
        raise EmptyClassError(f"class {class_id!r} has no instances in the manifest")
    n_hold = int(round(len(instances) * holdout_fraction))
    n_hold = min(n_hold, len(instances) - 1)
    if n_hold == 0:
        return instances, []
    return instances[:-n_hold], instances[-n_hold:]


class ViewCache:
    """Decoded views of one class, kept quantized to bound memory."""

    def __init__(self, manifest, class_id, instances=None):
        wanted = set(manifest.instances(class_id) if instances is None else instances)
        self.views = {}  # instance -> list of (pose, rgb u8, depth u16, mask bool)
        for rec in manifest.records:
            if rec.class_id != class_id or rec.instance_seed not in wanted:
                continue
            rgb, depth, mask = manifest.load_view(rec)
            self.views.setdefault(rec.instance_seed, []).append((
                (rec.pitch, rec.yaw),
                np.round(rgb * 255.0).astype(np.uint8),
                np.round(depth * 65535.0).astype(np.uint16),
                mask[0] > 0.5,
            ))
        if not self.views:
            raise EmptyClassError(f"class {class_id!r} has no usable views")
        self.instances = sorted(self.views)

    def view_arrays(self, instance, index):
        pose, rgb, depth, mask = self.views[instance][index]
        return pose, rgb / 255.0, depth / 65535.0, mask.astype(np.float64)


@dataclass
class PairBatch:
    inputs: Tensor          # [B,4,S,S]
    queries: list           # AngleQuery per pair
    targets_rgb: Tensor     # [B,3,S,S]
    targets_depth: Tensor   # [B,1,S,S]
    instance_ids: list


def sample_pairs(cache, batch_size, rng, class_id=None, dtype=tz.DEFAULT_DTYPE):
    """Draw pairs by instance first, then two poses of that instance.

    Poses are drawn with replacement, so zero-rotation self-pairs occur and
    anchor the identity mapping. The relative rotation of a pair is the
    target pose minus the input pose. `cache` may be a ViewCache or a
    DatasetManifest (then `class_id` selects the class).
    """
    if not isinstance(cache, ViewCache):
        cache = ViewCache(cache, class_id)
    inputs, rgbs, depths, queries, ids = [], [], [], [], []
    insts = cache.instances
    for _ in range(batch_size):
        inst = insts[rng.integers(len(insts))]
        views = cache.views[inst]
        i = int(rng.integers(len(views)))
        j = int(rng.integers(len(views)))
        (pi, yi), rgb_i, _, mask_i = views[i]
        (pj, yj), rgb_j, depth_j, _ = views[j]
        inputs.append(np.concatenate([rgb_i / 255.0, (mask_i)[None].astype(np.float64)], axis=0))
        rgbs.append(rgb_j / 255.0)
        depths.append(depth_j / 65535.0)
        queries.append(AngleQuery(delta_yaw=yj - yi, delta_pitch=pj - pi))
        ids.append(inst)
    return PairBatch(
        inputs=Tensor(np.stack(inputs), dtype=dtype),
        queries=queries,
        targets_rgb=Tensor(np.stack(rgbs), dtype=dtype),
        targets_depth=Tensor(np.stack(depths), dtype=dtype),
        instance_ids=ids,
    )


def clip_gradients(grads, low=-1.0, high=1.0):
    """Elementwise clamp of every gradient array, in place."""
    if not low < high:
        raise ConfigError("clip bounds must be ordered")
    for g in grads.values():
        if g is not None:
            np.clip(g, low, high, out=g)
    return grads


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, params):
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.step = 0


def adam_step(params, grads, state, config):
    """One bias-corrected Adam update; mutates params and state in place."""
    state.step += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    lr_t = config.learning_rate * np.sqrt(1 - b2 ** state.step) / (1 - b1 ** state.step)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, "
                             f"parameter has {p.data.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= (lr_t * m / (np.sqrt(v) + config.adam_epsilon)).astype(p.data.dtype)
    return params, state


@dataclass
class TraceRow:
    iteration: int
    rgb_loss: float
    depth_loss: float
    total_loss: float


def write_trace(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        # one row per batch update
        w.writerow(["iteration", "rgb_loss", "depth_loss", "total"])
        for r in rows:
            w.writerow([r.iteration, f"{r.rgb_loss:.8f}", f"{r.depth_loss:.8f}",
                        f"{r.total_loss:.8f}"])


def train(net, manifest, class_id, config, out_dir=None, callbacks=()):
    """Train one per-class generator; returns (net, trace rows).

    Deterministic for a fixed seed: the pair stream, initialization and
    update order are all driven by the config seed. Non-finite loss aborts
    with a DivergenceError pointing at the last good checkpoint.
    """
    config.validate()
    train_insts, _ = split_instances(manifest, class_id, config.holdout_fraction)
    cache = ViewCache(manifest, class_id, train_insts)
    rng = np.random.default_rng(config.seed)
    state = AdamState(net.parameters)
    net.set_train(True)
    trace = []
    last_checkpoint = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "train_config.txt"), "w") as f:
            f.write(config.to_kv())

    for it in range(1, config.iterations + 1):
        batch = sample_pairs(cache, config.batch_size, rng, dtype=net.dtype)
        angles = encode_angles(batch.queries, dtype=net.dtype)
        rgb, depth = net.forward_batch(batch.inputs, angles, mode="train")
        loss_rgb = tz.mse_loss(rgb, batch.targets_rgb)
        loss_depth = tz.mse_loss(depth, batch.targets_depth)
        loss = tz.add(tz.scale(loss_rgb, config.rgb_loss_weight),
                      tz.scale(loss_depth, config.depth_loss_weight))
        row = TraceRow(it, loss_rgb.item(), loss_depth.item(), loss.item())
        trace.append(row)
        if not np.isfinite(row.total_loss):
            net.set_train(False)
            raise DivergenceError(
                f"loss became non-finite at iteration {it}", last_checkpoint=last_checkpoint)

        tz.backward(loss)
        grads = {k: p.grad for k, p in net.parameters.items()}
        clip_gradients(grads, config.clip_low, config.clip_high)
        adam_step(net.parameters, grads, state, config)
        net.zero_grads()

        if out_dir and config.checkpoint_interval and it % config.checkpoint_interval == 0:
            last_checkpoint = os.path.join(out_dir, f"checkpoint_{it:06d}.ckpt")
            save_checkpoint(net, last_checkpoint)
        for cb in callbacks:
            cb(it, row, net)

    net.set_train(False)
    if out_dir:
        write_trace(trace, os.path.join(out_dir, "loss_trace.csv"))
        save_checkpoint(net, os.path.join(out_dir, "model.ckpt"))
    return net, trace
