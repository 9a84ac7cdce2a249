"""Angle-conditioned encoder/decoder generator with dual RGB/depth heads.

Encoder blocks are conv3x3 -> batchnorm -> relu -> maxpool. The bottleneck
feature map is flattened, projected to a latent vector, concatenated with
the sin/cos encoding of the requested relative rotation, pushed through
fully connected layers and reshaped back to the bottleneck map. Decoder
blocks are bilinear-upsample -> conv -> batchnorm -> relu, each followed by
an additive skip from the matching encoder activation scaled by a learnable
scalar. The shared decoder then splits into an RGB head and a depth head of
two convolutions each, both ending in a sigmoid so outputs stay in [0, 1].
"""

import io
import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tz
from .errors import (
    CheckpointCorruptError,
    CheckpointFormatError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
    ShapeError,
)
from .tensor import BatchNormState, Tensor

CHECKPOINT_MAGIC = b"VFCK"
CHECKPOINT_VERSION = 1
_DTYPE_TAGS = {0: np.float32, 1: np.float64}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


@dataclass
class ViewNetConfig:
    input_size: int = 64
    input_channels: int = 4
    encoder_channels: tuple = (16, 32, 64, 128)
    latent_dim: int = 256
    fc_widths: tuple = (256, 256)
    angle_encoding_dim: int = 4
    branch_channels: tuple = (16, 16)  # hidden widths of (rgb, depth) heads
    skip_init: float = 1.0
    class_id: str = ""

    def __post_init__(self):
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        self.fc_widths = tuple(int(w) for w in self.fc_widths)
        self.branch_channels = tuple(int(c) for c in self.branch_channels)
        self.validate()

    @property
    def num_blocks(self):
        return len(self.encoder_channels)

    @property
    def bottleneck_size(self):
        return self.input_size // (2 ** self.num_blocks)

    def validate(self):
        s = self.input_size
        if s < 4 or (s & (s - 1)) != 0:
            raise ConfigError(f"input_size must be a power of two >= 4, got {s}")
        if not self.encoder_channels:
            raise ConfigError("encoder_channels must list at least one block")
        if self.bottleneck_size < 4:
            raise ConfigError(
                f"input_size {s} over {self.num_blocks} blocks leaves a "
                f"{self.bottleneck_size}px bottleneck; need >= 4")
        if self.input_channels < 1 or self.latent_dim < 1:
            raise ConfigError("input_channels and latent_dim must be positive")
        if self.angle_encoding_dim != 4:
            raise ConfigError("angle encoding is fixed to (sin yaw, cos yaw, sin pitch, cos pitch)")
        if len(self.branch_channels) != 2:
            raise ConfigError("branch_channels must give (rgb, depth) hidden widths")

    def to_kv(self):
        """Canonical key=value text block (sorted keys, one per line)."""
        items = {
            "angle_encoding_dim": self.angle_encoding_dim,
            "branch_channels": ",".join(map(str, self.branch_channels)),
            "class_id": self.class_id,
            "encoder_channels": ",".join(map(str, self.encoder_channels)),
            "fc_widths": ",".join(map(str, self.fc_widths)),
            "input_channels": self.input_channels,
            "input_size": self.input_size,
            "latent_dim": self.latent_dim,
            "skip_init": self.skip_init,
        }
        return "".join(f"{k}={v}\n" for k, v in sorted(items.items()))

    @classmethod
    def from_kv(cls, text):
        kv = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            k, _, v = line.partition("=")
            kv[k] = v
        def ints(s):
            return tuple(int(x) for x in s.split(",") if x)
        return cls(
            input_size=int(kv["input_size"]),
            input_channels=int(kv["input_channels"]),
            encoder_channels=ints(kv["encoder_channels"]),
            latent_dim=int(kv["latent_dim"]),
            fc_widths=ints(kv["fc_widths"]),
            angle_encoding_dim=int(kv["angle_encoding_dim"]),
            branch_channels=ints(kv["branch_channels"]),
            skip_init=float(kv["skip_init"]),
            class_id=kv.get("class_id", ""),
        )


MICRO_CONFIG = ViewNetConfig(
    input_size=16,
    encoder_channels=(4, 6),
    latent_dim=16,
    fc_widths=(16,),
    branch_channels=(4, 4),
)


@dataclass
class AngleQuery:
    """Relative rotation from the input view to the requested view, degrees."""
    delta_yaw: float = 0.0
    delta_pitch: float = 0.0


def encode_angle(q, dtype=tz.DEFAULT_DTYPE):
    """(sin dyaw, cos dyaw, sin dpitch, cos dpitch); periodic in 360."""
    y = math.radians(q.delta_yaw % 360.0)
    p = math.radians(q.delta_pitch % 360.0)
    return Tensor(np.array([math.sin(y), math.cos(y), math.sin(p), math.cos(p)]), dtype=dtype)


def encode_angles(queries, dtype=tz.DEFAULT_DTYPE):
    """Batched [B,4] encoding of a list of AngleQuery."""
    rows = [encode_angle(q, dtype=dtype).data for q in queries]
    return Tensor(np.stack(rows, axis=0), dtype=dtype)


class ViewNet:
    """Parameter container plus forward pass; built by `build_viewnet`."""

    def __init__(self, config, parameters, norm_state, dtype=tz.DEFAULT_DTYPE):
        self.config = config
        self.parameters = parameters  # name -> Tensor, insertion-ordered
        self.norm_state = norm_state  # name -> BatchNormState
        self.dtype = np.dtype(dtype)

    def param(self, name):
        return self.parameters[name]

    def set_train(self, flag):
        for p in self.parameters.values():
            p.requires_grad = flag

    def zero_grads(self):
        for p in self.parameters.values():
            p.grad = None

    def forward_batch(self, inputs, angles, mode="eval"):
        """inputs: Tensor [B,C,S,S]; angles: Tensor [B,4]. Returns (rgb, depth)."""
        cfg = self.config
        xd = inputs.data
        if xd.ndim != 4 or xd.shape[1] != cfg.input_channels or xd.shape[2:] != (cfg.input_size,) * 2:
            raise ShapeError(
                f"expected input [B,{cfg.input_channels},{cfg.input_size},{cfg.input_size}], got {xd.shape}")
        p = self.parameters
        x = inputs
        skips = []
        for i in range(cfg.num_blocks):
            x = tz.conv2d(x, p[f"enc{i}.conv.weight"], p[f"enc{i}.conv.bias"])
            x = tz.batchnorm(x, p[f"enc{i}.bn.gamma"], p[f"enc{i}.bn.beta"],
                             self.norm_state[f"enc{i}"], mode=mode)
            x = tz.relu(x)
            skips.append(x)
            x = tz.maxpool2x2(x)

        b = xd.shape[0]
        s = cfg.bottleneck_size
        c_last = cfg.encoder_channels[-1]
        x = tz.reshape(x, (b, c_last * s * s))
        x = tz.relu(tz.fully_connected(x, p["fc_in.weight"], p["fc_in.bias"]))
        x = tz.concat_channels(x, angles)
        for j in range(len(cfg.fc_widths)):
            x = tz.relu(tz.fully_connected(x, p[f"fc{j}.weight"], p[f"fc{j}.bias"]))
        x = tz.relu(tz.fully_connected(x, p["fc_out.weight"], p["fc_out.bias"]))
        x = tz.reshape(x, (b, c_last, s, s))

        for i in range(cfg.num_blocks):
            enc_idx = cfg.num_blocks - 1 - i
            x = tz.bilinear_upsample2x(x)
            x = tz.conv2d(x, p[f"dec{i}.conv.weight"], p[f"dec{i}.conv.bias"])
            x = tz.batchnorm(x, p[f"dec{i}.bn.gamma"], p[f"dec{i}.bn.beta"],
                             self.norm_state[f"dec{i}"], mode=mode)
            x = tz.relu(x)
            x = tz.add(x, tz.scale_by(skips[enc_idx], p[f"skip{enc_idx}.weight"]))

        rgb = tz.relu(tz.conv2d(x, p["rgb0.conv.weight"], p["rgb0.conv.bias"]))
        rgb = tz.sigmoid(tz.conv2d(rgb, p["rgb1.conv.weight"], p["rgb1.conv.bias"]))
        dep = tz.relu(tz.conv2d(x, p["depth0.conv.weight"], p["depth0.conv.bias"]))
        dep = tz.sigmoid(tz.conv2d(dep, p["depth1.conv.weight"], p["depth1.conv.bias"]))
        return rgb, dep


def forward(net, inputs, query, mode="eval"):
    """Single-sample forward: [C,S,S] input -> ([3,S,S], [1,S,S])."""
    xd = inputs.data
    if xd.ndim != 3:
        raise ShapeError(f"expected [C,S,S] input, got shape {xd.shape}")
    batched = Tensor(xd[None], requires_grad=inputs.requires_grad, dtype=xd.dtype)
    angles = encode_angles([query], dtype=net.dtype)
    rgb, dep = net.forward_batch(batched, angles, mode=mode)
    return (Tensor(rgb.data[0], dtype=rgb.data.dtype), Tensor(dep.data[0], dtype=dep.data.dtype))


def _xavier(rng, shape, fan_in, fan_out, dtype):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape), dtype=dtype)


def build_viewnet(config, seed, dtype=tz.DEFAULT_DTYPE):
    """Xavier-uniform weights, zero biases, unit gammas and skip scales.

    Parameter draw order is fixed, so the same (config, seed) always yields
    bitwise-identical parameter maps.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    p = {}
    state = {}

    def conv(name, cin, cout):
        p[f"{name}.conv.weight"] = _xavier(rng, (cout, cin, 3, 3), cin * 9, cout * 9, dtype)
        p[f"{name}.conv.bias"] = Tensor(np.zeros(cout), dtype=dtype)

    def bn(name, c):
        p[f"{name}.bn.gamma"] = Tensor(np.ones(c), dtype=dtype)
        p[f"{name}.bn.beta"] = Tensor(np.zeros(c), dtype=dtype)
        state[name] = BatchNormState(c, dtype=dtype)

    def fc(name, k, j):
        p[f"{name}.weight"] = _xavier(rng, (j, k), k, j, dtype)
        p[f"{name}.bias"] = Tensor(np.zeros(j), dtype=dtype)

    cin = config.input_channels
    for i, cout in enumerate(config.encoder_channels):
        conv(f"enc{i}", cin, cout)
        bn(f"enc{i}", cout)
        cin = cout

    s = config.bottleneck_size
    c_last = config.encoder_channels[-1]
    fc("fc_in", c_last * s * s, config.latent_dim)
    width = config.latent_dim + config.angle_encoding_dim
    for j, w in enumerate(config.fc_widths):
        fc(f"fc{j}", width, w)
        width = w
    fc("fc_out", width, c_last * s * s)

    dec_in = c_last
    rev = tuple(reversed(config.encoder_channels))
    for i, cout in enumerate(rev):
        conv(f"dec{i}", dec_in, cout)
        bn(f"dec{i}", cout)
        dec_in = cout

    for i in range(config.num_blocks):
        p[f"skip{i}.weight"] = Tensor(np.full(1, config.skip_init), dtype=dtype)

    c0 = config.encoder_channels[0]
    conv("rgb0", c0, config.branch_channels[0])
    conv("rgb1", config.branch_channels[0], 3)
    conv("depth0", c0, config.branch_channels[1])
    conv("depth1", config.branch_channels[1], 1)

    return ViewNet(config, p, state, dtype=dtype)


# ---------------------------------------------------------------------------
# checkpoint serialization


def _checkpoint_tensors(net):
    entries = {name: t.data for name, t in net.parameters.items()}
    for name, st in net.norm_state.items():
        entries[f"state.{name}.running_mean"] = st.running_mean
        entries[f"state.{name}.running_var"] = st.running_var
        entries[f"state.{name}.updates"] = np.array([float(st.updates)], dtype=np.float64)
    return entries


def save_checkpoint(net, path):
    """Binary format: magic, version, config text block, tensor table, CRC32."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(np.uint32(CHECKPOINT_VERSION).tobytes())
    cfg = net.config.to_kv().encode("utf-8")
    buf.write(np.uint32(len(cfg)).tobytes())
    buf.write(cfg)
    entries = _checkpoint_tensors(net)
    buf.write(np.uint32(len(entries)).tobytes())
    for name in sorted(entries):
        arr = np.ascontiguousarray(entries[name])
        nb = name.encode("utf-8")
        buf.write(np.uint32(len(nb)).tobytes())
        buf.write(nb)
        buf.write(np.uint8(_DTYPE_CODES[arr.dtype]).tobytes())
        buf.write(np.uint32(arr.ndim).tobytes())
        for d in arr.shape:
            buf.write(np.uint32(d).tobytes())
        buf.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())
    payload = buf.getvalue()
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    with open(path, "wb") as f:
        f.write(payload)
        f.write(np.uint32(crc).tobytes())


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(f"file ends inside {what}")
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b

    def u32(self, what):
        return int(np.frombuffer(self.take(4, what), dtype="<u4")[0])

    def u8(self, what):
        return int(np.frombuffer(self.take(1, what), dtype="u1")[0])


def load_checkpoint(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("bad magic bytes: not a checkpoint file")
    if len(raw) < 8 + 4:
        raise CheckpointTruncatedError("file too short for header and checksum")
    # Parse the structure first so truncation is reported as truncation, then
    # verify the trailing CRC over everything that precedes it.
    payload = raw[:-4]
    r = _Reader(payload)
    r.take(4, "magic")
    version = r.u32("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}")
    cfg_len = r.u32("config length")
    try:
        config = ViewNetConfig.from_kv(r.take(cfg_len, "config block").decode("utf-8"))
    except (KeyError, ValueError) as exc:
        raise CheckpointFormatError(f"unparseable config block: {exc}") from exc
    count = r.u32("tensor count")
    entries = {}
    for _ in range(count):
        nlen = r.u32("tensor name length")
        name = r.take(nlen, "tensor name").decode("utf-8")
        tag = r.u8("dtype tag")
        if tag not in _DTYPE_TAGS:
            raise CheckpointFormatError(f"unknown dtype tag {tag} for tensor {name!r}")
        dt = np.dtype(_DTYPE_TAGS[tag])
        rank = r.u32("tensor rank")
        dims = tuple(r.u32("tensor dim") for _ in range(rank))
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(r.take(nbytes, f"payload of {name!r}"), dtype=dt.newbyteorder("<"))
        entries[name] = arr.astype(dt).reshape(dims)
    if r.pos != len(payload):
        raise CheckpointFormatError("trailing bytes after tensor table")
    crc_stored = int(np.frombuffer(raw[-4:], dtype="<u4")[0])
    if (zlib.crc32(payload) & 0xFFFFFFFF) != crc_stored:
        raise CheckpointCorruptError("CRC32 mismatch: checkpoint payload corrupted")

    dtype = entries[next(n for n in entries if not n.startswith("state."))].dtype
    net = build_viewnet(config, seed=0, dtype=dtype)
    for name, t in net.parameters.items():
        if name not in entries:
            raise CheckpointFormatError(f"missing parameter {name!r}")
        if entries[name].shape != t.data.shape:
            raise CheckpointFormatError(f"parameter {name!r} has shape {entries[name].shape}, "
                                        f"expected {t.data.shape}")
        t.data = entries[name].copy()
    for name, st in net.norm_state.items():
        st.running_mean = entries[f"state.{name}.running_mean"].copy()
        st.running_var = entries[f"state.{name}.running_var"].copy()
        st.updates = int(entries[f"state.{name}.updates"][0])
    return net
