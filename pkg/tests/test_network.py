"""Generator network: config validation, forward contract, checkpoints."""

import os

import numpy as np
import pytest

from viewsynth import tensor as tz
from viewsynth.errors import (
    CheckpointCorruptError,
    CheckpointFormatError,
    CheckpointTruncatedError,
    ConfigError,
    ShapeError,
)
from viewsynth.network import (
    MICRO_CONFIG,
    AngleQuery,
    ViewNetConfig,
    build_viewnet,
    encode_angle,
    encode_angles,
    forward,
    load_checkpoint,
    save_checkpoint,
)
from viewsynth.tensor import Tensor


def micro_net(seed=0, dtype=np.float32):
    return build_viewnet(MICRO_CONFIG, seed=seed, dtype=dtype)


def micro_input(seed=0, batch=2):
    rng = np.random.default_rng(seed)
    return Tensor(rng.random((batch, 4, 16, 16)))


# ---------------------------------------------------------------------------
# configuration


def test_config_rejects_non_power_of_two_size():
    with pytest.raises(ConfigError):
        ViewNetConfig(input_size=48)


def test_config_rejects_too_deep_encoder():
    with pytest.raises(ConfigError):
        ViewNetConfig(input_size=16, encoder_channels=(4, 4, 4))  # 2px bottleneck


def test_config_kv_roundtrip():
    cfg = ViewNetConfig(input_size=32, encoder_channels=(8, 12), latent_dim=32,
                        fc_widths=(24,), branch_channels=(6, 6), class_id="mug")
    assert ViewNetConfig.from_kv(cfg.to_kv()) == cfg


# ---------------------------------------------------------------------------
# angle encoding


def test_angle_encoding_values():
    e = encode_angle(AngleQuery(delta_yaw=90.0, delta_pitch=0.0), dtype=np.float64)
    assert np.allclose(e.data, [1.0, 0.0, 0.0, 1.0], atol=1e-12)


def test_angle_encoding_periodic_in_360():
    a = encode_angle(AngleQuery(delta_yaw=30.0, delta_pitch=-10.0), dtype=np.float64)
    b = encode_angle(AngleQuery(delta_yaw=30.0 + 360.0, delta_pitch=-10.0 + 360.0),
                     dtype=np.float64)
    assert np.array_equal(a.data, b.data)


def test_encode_angles_batches():
    batch = encode_angles([AngleQuery(0, 0), AngleQuery(45, 10)], dtype=np.float64)
    assert batch.data.shape == (2, 4)


# ---------------------------------------------------------------------------
# construction and forward


def test_build_is_deterministic_bitwise():
    a, b = micro_net(seed=3), micro_net(seed=3)
    assert set(a.parameters) == set(b.parameters)
    for name in a.parameters:
        assert np.array_equal(a.parameters[name].data, b.parameters[name].data), name


def test_different_seeds_differ():
    a, b = micro_net(seed=0), micro_net(seed=1)
    assert any(not np.array_equal(a.parameters[n].data, b.parameters[n].data)
               for n in a.parameters)


def test_forward_shapes_and_range():
    net = micro_net()
    rgb, dep = net.forward_batch(micro_input(), encode_angles(
        [AngleQuery(30, 0), AngleQuery(-12, 20)]), mode="eval")
    assert rgb.data.shape == (2, 3, 16, 16)
    assert dep.data.shape == (2, 1, 16, 16)
    for out in (rgb, dep):
        assert out.data.min() >= 0.0 and out.data.max() <= 1.0


def test_single_sample_forward_helper():
    net = micro_net()
    rgb, dep = forward(net, Tensor(np.random.default_rng(0).random((4, 16, 16))),
                       AngleQuery(delta_yaw=45.0))
    assert rgb.data.shape == (3, 16, 16) and dep.data.shape == (1, 16, 16)


def test_forward_rejects_wrong_shape():
    net = micro_net()
    with pytest.raises(ShapeError):
        net.forward_batch(Tensor(np.zeros((2, 4, 8, 8))),
                          encode_angles([AngleQuery(), AngleQuery()]))


def test_yaw_periodicity_of_outputs():
    net = micro_net()
    x = micro_input(seed=5)
    a = net.forward_batch(x, encode_angles([AngleQuery(37, 5)] * 2), mode="eval")
    b = net.forward_batch(x, encode_angles([AngleQuery(37 + 360, 5)] * 2), mode="eval")
    assert np.array_equal(a[0].data, b[0].data)
    assert np.array_equal(a[1].data, b[1].data)


def test_training_step_touches_every_parameter():
    net = micro_net(dtype=np.float64)
    net.set_train(True)
    x = Tensor(np.random.default_rng(9).random((2, 4, 16, 16)), dtype=np.float64)
    rgb, dep = net.forward_batch(x, encode_angles(
        [AngleQuery(30, 10), AngleQuery(-60, 0)], dtype=np.float64), mode="train")
    tgt_r = Tensor(np.random.default_rng(10).random((2, 3, 16, 16)), dtype=np.float64)
    tgt_d = Tensor(np.random.default_rng(11).random((2, 1, 16, 16)), dtype=np.float64)
    loss = tz.add(tz.mse_loss(rgb, tgt_r), tz.mse_loss(dep, tgt_d))
    tz.backward(loss)
    for name, p in net.parameters.items():
        assert p.grad is not None, f"no gradient reached {name}"
        assert np.any(p.grad != 0), f"gradient identically zero for {name}"


# ---------------------------------------------------------------------------
# checkpoint serialization


def test_checkpoint_roundtrip_bitwise(tmp_path):
    net = micro_net(seed=4)
    # make running statistics non-trivial
    for st in net.norm_state.values():
        st.running_mean += 0.25
        st.updates = 7
    path = os.path.join(tmp_path, "m.ckpt")
    save_checkpoint(net, path)
    loaded = load_checkpoint(path)
    assert loaded.config == net.config
    for name in net.parameters:
        assert np.array_equal(loaded.parameters[name].data, net.parameters[name].data)
    for name, st in net.norm_state.items():
        assert np.array_equal(loaded.norm_state[name].running_mean, st.running_mean)
        assert np.array_equal(loaded.norm_state[name].running_var, st.running_var)
        assert loaded.norm_state[name].updates == st.updates


def test_checkpoint_bad_magic(tmp_path):
    path = os.path.join(tmp_path, "bad.ckpt")
    with open(path, "wb") as f:
        f.write(b"NOPE" + b"\x00" * 64)
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)


def test_checkpoint_truncation(tmp_path):
    net = micro_net()
    path = os.path.join(tmp_path, "m.ckpt")
    save_checkpoint(net, path)
    data = open(path, "rb").read()
    with open(path, "wb") as f:
        f.write(data[:len(data) // 2])
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(path)


def test_checkpoint_bitflip(tmp_path):
    net = micro_net()
    path = os.path.join(tmp_path, "m.ckpt")
    save_checkpoint(net, path)
    data = bytearray(open(path, "rb").read())
    data[len(data) // 2] ^= 0x40  # flip a payload bit
    with open(path, "wb") as f:
        f.write(bytes(data))
    with pytest.raises((CheckpointCorruptError, CheckpointFormatError)):
        load_checkpoint(path)


def test_loaded_model_forward_matches(tmp_path):
    net = micro_net(seed=8)
    path = os.path.join(tmp_path, "m.ckpt")
    save_checkpoint(net, path)
    loaded = load_checkpoint(path)
    x = micro_input(seed=8)
    angles = encode_angles([AngleQuery(15, 5)] * 2)
    a = net.forward_batch(x, angles, mode="eval")
    b = loaded.forward_batch(x, angles, mode="eval")
    assert np.array_equal(a[0].data, b[0].data)
    assert np.array_equal(a[1].data, b[1].data)
