"""Dense tensor compute core with reverse-mode automatic differentiation.

The operator set is deliberately minimal: exactly what the view generator
needs. There is no broadcasting (scalars excepted), no dynamic dispatch,
and no GPU path. Arrays are float32 by default; float64 is used for
gradient verification where finite differences need the headroom.

The gradient tape is implicit: every op result keeps references to its
inputs plus a closure that propagates its gradient one step. `backward`
topologically sorts that graph, runs the closures in reverse, then releases
the graph, so a second backward without a fresh forward raises TapeError.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidArgumentError, InvalidBatchError, ShapeError, TapeError
from .imaging import interp_matrix

DEFAULT_DTYPE = np.float32

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.9


class Tensor:
    """N-dimensional array node of the autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__


def _result(data, parents, backward_fn):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    out._consumed = False
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _accum(t, g):
    """Accumulate a gradient contribution; `g` may alias other buffers."""
    if t.requires_grad:
        if t.grad is None:
            t.grad = np.array(g, dtype=t.data.dtype, copy=True)
        else:
            t.grad += g


def _accum_owned(t, g):
    """Accumulate a freshly allocated gradient that nothing else references."""
    if t.requires_grad:
        if t.grad is None:
            t.grad = g
        else:
            t.grad += g


def make_tensor(shape, init="zeros", *, value=0.0, low=-1.0, high=1.0, seed=None,
                dtype=DEFAULT_DTYPE, requires_grad=False):
    """Create a tensor by fill rule: 'zeros', 'constant', or 'uniform'.

    The uniform fill is reproducible: the same seed always yields the same
    bits. `seed` may be an int or a preconstructed numpy Generator.
    """
    shape = tuple(int(d) for d in shape)
    if len(shape) == 0 or any(d < 1 for d in shape):
        raise ShapeError(f"invalid shape {shape}: need at least one dimension, all >= 1")
    if init == "zeros":
        data = np.zeros(shape, dtype=dtype)
    elif init == "constant":
        data = np.full(shape, value, dtype=dtype)
    elif init == "uniform":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        data = rng.uniform(low, high, size=shape).astype(dtype)
    else:
        raise InvalidArgumentError(f"unknown init rule {init!r}")
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


# ---------------------------------------------------------------------------
# elementwise ops


def _check_same_shape(a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"shape mismatch: {a.data.shape} vs {b.data.shape}")


def add(a, b):
    _check_same_shape(a, b)
    out = _result(a.data + b.data, (a, b), None)

    def _bw():
        _accum(a, out.grad)
        _accum(b, out.grad)

    out._backward = _bw if out.requires_grad else None
    return out


def sub(a, b):
    _check_same_shape(a, b)
    out = _result(a.data - b.data, (a, b), None)

    def _bw():
        _accum(a, out.grad)
        _accum(b, -out.grad)

    out._backward = _bw if out.requires_grad else None
    return out


def mul(a, b):
    _check_same_shape(a, b)
    out = _result(a.data * b.data, (a, b), None)

    def _bw():
        _accum_owned(a, out.grad * b.data)
        _accum_owned(b, out.grad * a.data)

    out._backward = _bw if out.requires_grad else None
    return out


def scale(a, s):
    s = float(s)
    out = _result(a.data * s, (a,), None)

    def _bw():
        _accum_owned(a, out.grad * s)

    out._backward = _bw if out.requires_grad else None
    return out


def scale_by(a, s):
    """Multiply a tensor by a single-element tensor (learnable scalar)."""
    if s.data.size != 1:
        raise ShapeError(f"scale_by expects a single-element tensor, got shape {s.data.shape}")
    sv = s.data.reshape(())
    out = _result(a.data * sv, (a, s), None)

    def _bw():
        _accum_owned(a, out.grad * sv)
        _accum_owned(s, np.array(np.sum(out.grad * a.data)).reshape(s.data.shape).astype(s.data.dtype))

    out._backward = _bw if out.requires_grad else None
    return out


def elementwise(op, a, b):
    """Dispatch by name; `scale` takes a python scalar as b."""
    if op == "add":
        return add(a, b)
    if op == "sub":
        return sub(a, b)
    if op == "mul":
        return mul(a, b)
    if op == "scale":
        return scale(a, b)
    raise InvalidArgumentError(f"unknown elementwise op {op!r}")


def sum_all(a):
    """Sum of all elements as a single-element tensor."""
    out = _result(np.array([a.data.sum()], dtype=a.data.dtype), (a,), None)

    def _bw():
        _accum(a, np.full_like(a.data, out.grad.reshape(())))

    out._backward = _bw if out.requires_grad else None
    return out


def reshape(a, shape):
    shape = tuple(int(d) for d in shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"cannot reshape {a.data.shape} to {shape}")
    out = _result(a.data.reshape(shape), (a,), None)

    def _bw():
        _accum(a, out.grad.reshape(a.data.shape))

    out._backward = _bw if out.requires_grad else None
    return out


def relu(a):
    out = _result(np.maximum(a.data, 0), (a,), None)

    def _bw():
        _accum_owned(a, out.grad * (out.data > 0))

    out._backward = _bw if out.requires_grad else None
    return out


def sigmoid(a):
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = _result(s, (a,), None)

    def _bw():
        _accum_owned(a, out.grad * s * (1.0 - s))

    out._backward = _bw if out.requires_grad else None
    return out


# ---------------------------------------------------------------------------
# structured ops


def _as_batched(x):
    """View [C,H,W] as [1,C,H,W]; returns (array, had_batch_dim)."""
    if x.ndim == 3:
        return x[None], False
    if x.ndim == 4:
        return x, True
    raise ShapeError(f"expected 3- or 4-d input, got shape {x.shape}")


def _conv_raw(x, k):
    """Plain stride-1, pad-1 cross-correlation; x [B,C,H,W], k [O,C,3,3]."""
    b, c, h, w = x.shape
    o = k.shape[0]
    padded = np.zeros((b, c, h + 2, w + 2), dtype=x.dtype)
    padded[:, :, 1:-1, 1:-1] = x
    cols = sliding_window_view(padded, (3, 3), axis=(2, 3))  # [B,C,H,W,3,3]
    cols = np.ascontiguousarray(cols.transpose(0, 2, 3, 1, 4, 5)).reshape(b * h * w, c * 9)
    out = cols @ k.reshape(o, c * 9).T
    return out.reshape(b, h, w, o).transpose(0, 3, 1, 2), cols


def conv2d(x, kernels, bias):
    """3x3 stride-1 cross-correlation with zero padding 1 (size preserving)."""
    xd, batched = _as_batched(x.data)
    kd = kernels.data
    if kd.ndim != 4 or kd.shape[2:] != (3, 3):
        raise ShapeError(f"kernels must be [C_out,C_in,3,3], got {kd.shape}")
    if kd.shape[1] != xd.shape[1]:
        raise ShapeError(f"channel mismatch: input has {xd.shape[1]}, kernels expect {kd.shape[1]}")
    o = kd.shape[0]
    if bias.data.shape != (o,):
        raise ShapeError(f"bias must be [{o}], got {bias.data.shape}")
    b, c, h, w = xd.shape
    res, cols = _conv_raw(xd, kd)
    res = res + bias.data[None, :, None, None]
    out = _result(res if batched else res[0], (x, kernels, bias), None)

    def _bw():
        g = out.grad if batched else out.grad[None]
        if kernels.requires_grad:
            gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(b * h * w, o)
            _accum_owned(kernels, (gmat.T @ cols).reshape(kd.shape))
        if bias.requires_grad:
            _accum_owned(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            # input gradient is the correlation of the output gradient with
            # the channel-transposed, spatially flipped kernel bank
            krot = np.ascontiguousarray(kd.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
            dx, _ = _conv_raw(g, krot)
            _accum_owned(x, dx if batched else dx[0])

    out._backward = _bw if out.requires_grad else None
    return out


def maxpool2x2(x):
    """2x2 max pooling, stride 2; ties route to the first element row-major."""
    xd, batched = _as_batched(x.data)
    b, c, h, w = xd.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    windows = xd.reshape(b, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h2, w2, 4)
    am = windows.argmax(axis=-1)
    res = np.take_along_axis(windows, am[..., None], axis=-1)[..., 0]
    out = _result(res if batched else res[0], (x,), None)

    def _bw():
        g = out.grad if batched else out.grad[None]
        scat = np.zeros((b, c, h2, w2, 4), dtype=xd.dtype)
        np.put_along_axis(scat, am[..., None], g[..., None], axis=-1)
        dx = scat.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
        _accum_owned(x, dx if batched else dx[0])

    out._backward = _bw if out.requires_grad else None
    return out


def fully_connected(x, weight, bias):
    """weight @ x + bias for inputs [K] or [B,K]; weight is [J,K]."""
    xd = x.data
    if xd.ndim not in (1, 2):
        raise ShapeError(f"fully_connected input must be 1- or 2-d, got {xd.shape}")
    if weight.data.ndim != 2 or weight.data.shape[1] != xd.shape[-1]:
        raise ShapeError(f"weight {weight.data.shape} incompatible with input {xd.shape}")
    j = weight.data.shape[0]
    if bias.data.shape != (j,):
        raise ShapeError(f"bias must be [{j}], got {bias.data.shape}")
    res = xd @ weight.data.T + bias.data
    out = _result(res, (x, weight, bias), None)

    def _bw():
        g = out.grad
        gb = g if g.ndim == 2 else g[None]
        xb = xd if xd.ndim == 2 else xd[None]
        if weight.requires_grad:
            _accum_owned(weight, gb.T @ xb)
        if bias.requires_grad:
            _accum_owned(bias, gb.sum(axis=0))
        if x.requires_grad:
            _accum_owned(x, g @ weight.data)

    out._backward = _bw if out.requires_grad else None
    return out


class BatchNormState:
    """Running statistics of one batch-norm layer."""

    def __init__(self, channels, dtype=DEFAULT_DTYPE):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.updates = 0


def batchnorm(x, gamma, beta, state, mode="train", eps=BN_EPSILON, momentum=BN_MOMENTUM):
    """Per-channel batch normalization over axis 1 of an [B,C,...] input."""
    xd = x.data
    if xd.ndim < 2:
        raise ShapeError(f"batchnorm input must be [B,C,...], got {xd.shape}")
    c = xd.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"gamma/beta must be [{c}]")
    axes = (0,) + tuple(range(2, xd.ndim))
    bshape = (1, c) + (1,) * (xd.ndim - 2)
    if mode == "train":
        if xd.shape[0] < 2:
            raise InvalidBatchError("train-mode batch norm needs batch size >= 2")
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        state.running_mean = (momentum * state.running_mean + (1 - momentum) * mean).astype(state.running_mean.dtype)
        state.running_var = (momentum * state.running_var + (1 - momentum) * var).astype(state.running_var.dtype)
        state.updates += 1
    elif mode == "eval":
        mean = state.running_mean.astype(xd.dtype)
        var = state.running_var.astype(xd.dtype)
    else:
        raise InvalidArgumentError(f"unknown batchnorm mode {mode!r}")
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean.reshape(bshape)) * ivar.reshape(bshape)
    res = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)
    out = _result(res, (x, gamma, beta), None)
    n = xd.size // c

    def _bw():
        g = out.grad
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=axes))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=axes))
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(bshape)
            if mode == "train":
                ivb = ivar.reshape(bshape)
                t1 = gxhat.sum(axis=axes, keepdims=True)
                t2 = (gxhat * xhat).sum(axis=axes, keepdims=True)
                dx = (gxhat - (t1 + xhat * t2) / n) * ivb
            else:
                dx = gxhat * ivar.reshape(bshape)
            _accum_owned(x, dx)

    out._backward = _bw if out.requires_grad else None
    return out


_UPSAMPLE_CACHE = {}


def _upsample_matrix(n, dtype):
    key = (n, np.dtype(dtype).str)
    m = _UPSAMPLE_CACHE.get(key)
    if m is None:
        m = interp_matrix(2 * n, n, dtype=np.float64).astype(dtype)
        _UPSAMPLE_CACHE[key] = m
    return m


def bilinear_upsample2x(x):
    """2x bilinear upsampling (align-corners false); exact linear backward."""
    xd = x.data
    if xd.ndim < 2:
        raise ShapeError(f"bilinear_upsample2x needs at least 2 dims, got {xd.shape}")
    h, w = xd.shape[-2:]
    mh = _upsample_matrix(h, xd.dtype)
    mw = _upsample_matrix(w, xd.dtype)
    res = np.matmul(np.matmul(mh, xd), mw.T)
    out = _result(res, (x,), None)

    def _bw():
        _accum_owned(x, np.matmul(np.matmul(mh.T, out.grad), mw))

    out._backward = _bw if out.requires_grad else None
    return out


def concat_channels(a, b):
    """Concatenate along the channel axis ([C,H,W]-style) or feature axis (1-/2-d)."""
    ad, bd = a.data, b.data
    if ad.ndim != bd.ndim:
        raise ShapeError(f"rank mismatch: {ad.shape} vs {bd.shape}")
    if ad.ndim >= 3:
        axis = ad.ndim - 3
        if ad.shape[-2:] != bd.shape[-2:] or ad.shape[:axis] != bd.shape[:axis]:
            raise ShapeError(f"spatial mismatch: {ad.shape} vs {bd.shape}")
    elif ad.ndim in (1, 2):
        axis = ad.ndim - 1
        if ad.shape[:axis] != bd.shape[:axis]:
            raise ShapeError(f"leading-dim mismatch: {ad.shape} vs {bd.shape}")
    else:
        raise ShapeError("cannot concatenate 0-d tensors")
    ca = ad.shape[axis]
    res = np.concatenate([ad, bd], axis=axis)
    out = _result(res, (a, b), None)

    def _bw():
        ga, gb = np.split(out.grad, [ca], axis=axis)
        _accum(a, ga)
        _accum(b, gb)

    out._backward = _bw if out.requires_grad else None
    return out


def mse_loss(pred, target):
    _check_same_shape(pred, target)
    diff = pred.data - target.data
    n = diff.size
    out = _result(np.array([(diff * diff).mean()], dtype=pred.data.dtype), (pred, target), None)

    def _bw():
        g = out.grad.reshape(()) * 2.0 / n
        _accum(pred, g * diff)
        _accum(target, -g * diff)

    out._backward = _bw if out.requires_grad else None
    return out


# ---------------------------------------------------------------------------
# backward pass and verification


def backward(loss):
    """Propagate gradients from a scalar loss, then release the graph."""
    if loss.data.size != 1:
        raise InvalidArgumentError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss._consumed:
        raise TapeError("graph already consumed by a previous backward pass")
    if not loss._parents:
        raise TapeError("loss is not connected to a gradient tape")

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward()
            node._backward = None
            node._parents = ()
            node._consumed = True


def grad_check(f, x, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    `f` must map a tensor to a scalar tensor and build a fresh graph per
    call. Run in float64: finite differences are unreliable in float32.
    """
    x.grad = None
    y = f(x)
    backward(y)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x).item()
        flat[i] = orig - eps
        fm = f(x).item()
        flat[i] = orig
        nflat[i] = (fp - fm) / (2 * eps)

    denom = np.maximum(1.0, np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
