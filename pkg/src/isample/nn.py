"""Rank-generic layers with hand-written backward passes.

Tensors are numpy arrays shaped (batch, channels, *spatial). All
convolutions are VALID cross-correlations. Layers cache what they need
during ``forward`` and consume it in ``backward``; a layer instance is
therefore single-writer.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {what}")


def _as_tuple(v, n):
    if isinstance(v, (int, np.integer)):
        return (int(v),) * n
    v = tuple(int(a) for a in v)
    if len(v) != n:
        raise ShapeError(f"expected {n} values, got {v}")
    return v


# --- parameters ---------------------------------------------------------------


@dataclass
class Param:
    name: str
    value: np.ndarray
    decay: bool = False
    trainable: bool = True
    grad: np.ndarray | None = field(default=None, repr=False)

    @property
    def size(self) -> int:
        return self.value.size


def param_count(params, trainable_only: bool = False) -> int:
    """Total element count over parameter tensors (running statistics included by default)."""
    return int(sum(p.size for p in params if p.trainable or not trainable_only))


def glorot_uniform(shape, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Uniform on [-a, a], a = sqrt(6 / (fan_in + fan_out)); shape is (out, in, *kernel)."""
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(dtype)


# --- convolution kernels ------------------------------------------------------------


def _spatial_axes(nd):
    return tuple(range(2, 2 + nd))


def conv_output_shape(in_shape, kernel, stride):
    out = []
    for axis, (n, k, s) in enumerate(zip(in_shape, kernel, stride)):
        if n < k:
            raise ShapeError(f"spatial axis {axis}: input extent {n} is smaller than kernel {k}")
        out.append((n - k) // s + 1)
    return tuple(out)


def _windows(x, kernel, stride):
    nd = len(kernel)
    win = sliding_window_view(x, kernel, axis=_spatial_axes(nd))
    if any(s != 1 for s in stride):
        win = win[(slice(None), slice(None)) + tuple(slice(None, None, s) for s in stride)]
    return win


def conv_forward(x, weights, bias=None, stride=1):
    """Valid cross-correlation. x: (B, Cin, *S); weights: (Cout, Cin, *K)."""
    nd = weights.ndim - 2
    if x.ndim != nd + 2:
        raise ShapeError(f"input rank {x.ndim} does not match a {nd}-d kernel")
    if x.shape[1] != weights.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels, weights expect {weights.shape[1]}")
    kernel = weights.shape[2:]
    stride = _as_tuple(stride, nd)
    conv_output_shape(x.shape[2:], kernel, stride)
    if all(k == 1 for k in kernel) and all(s == 1 for s in stride):
        out = np.tensordot(x, weights.reshape(weights.shape[:2]), axes=([1], [1]))
    else:
        win = _windows(x, kernel, stride)
        out = np.tensordot(win, weights, axes=([1] + list(range(2 + nd, 2 + 2 * nd)), [1] + list(_spatial_axes(nd))))
    out = np.moveaxis(out, -1, 1)
    if bias is not None:
        out = out + bias.reshape((1, -1) + (1,) * nd)
    return np.ascontiguousarray(out)


def conv_backward(grad_out, x, weights, stride=1):
    """Gradients (grad_x, grad_w, grad_b) of the valid cross-correlation."""
    nd = weights.ndim - 2
    kernel = weights.shape[2:]
    stride = _as_tuple(stride, nd)
    expected = (x.shape[0], weights.shape[0]) + conv_output_shape(x.shape[2:], kernel, stride)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match forward output {expected}")
    sp = list(_spatial_axes(nd))
    grad_b = grad_out.sum(axis=tuple([0] + sp))
    if all(k == 1 for k in kernel) and all(s == 1 for s in stride):
        w2 = weights.reshape(weights.shape[:2])
        grad_w = np.tensordot(grad_out, x, axes=([0] + sp, [0] + sp)).reshape(weights.shape)
        grad_x = np.moveaxis(np.tensordot(grad_out, w2, axes=([1], [0])), -1, 1)
        return np.ascontiguousarray(grad_x), grad_w, grad_b
    win = _windows(x, kernel, stride)
    grad_w = np.tensordot(grad_out, win, axes=([0] + sp, [0] + sp))
    # cols: (B, *O, Cin, *K) -- scatter-add back onto the input grid
    cols = np.tensordot(grad_out, weights, axes=([1], [0]))
    out_shape = grad_out.shape[2:]
    grad_x = np.zeros_like(x)
    for off in itertools.product(*[range(k) for k in kernel]):
        dst = (slice(None), slice(None)) + tuple(
            slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(off, stride, out_shape)
        )
        grad_x[dst] += np.moveaxis(cols[(Ellipsis,) + off], -1, 1)
    return grad_x, grad_w, grad_b


# --- softmax / loss -------------------------------------------------------------


def softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    z = logits.astype(np.float64) - logits.max(axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=axis, keepdims=True)
    return z


def softmax_cross_entropy(logits: np.ndarray, targets: np.ndarray):
    """Mean voxel-wise cross-entropy. Returns (loss, grad_logits)."""
    k = logits.shape[1]
    targets = np.asarray(targets)
    if targets.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    if targets.size and (targets.max() >= k or targets.min() < 0):
        raise ValueError(f"target label {targets.max()} out of range for {k} classes")
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - log_norm
    t = targets.astype(np.intp)[:, None]
    n = targets.size
    loss = float(-np.take_along_axis(log_p, t, axis=1).sum() / n)
    grad = np.exp(log_p)
    np.put_along_axis(grad, t, np.take_along_axis(grad, t, axis=1) - 1.0, axis=1)
    grad /= n
    return loss, grad.astype(logits.dtype)


# --- layers -------------------------------------------------------------------------


class Layer:
    def params(self) -> list[Param]:
        return []

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def shrink(self) -> int:
        """Voxels lost per spatial axis by this layer (valid convolutions)."""
        return 0


class Conv(Layer):
    def __init__(self, name, cin, cout, kernel=3, rank=2, stride=1, bias=True, decay=True, rng=None, dtype=np.float32):
        self.kernel = _as_tuple(kernel, rank)
        if any(k < 1 or k % 2 == 0 for k in self.kernel):
            raise ValueError(f"{name}: kernel sizes must be odd and >= 1, got {self.kernel}")
        if cin < 1 or cout < 1:
            raise ValueError(f"{name}: channel counts must be >= 1")
        self.stride = _as_tuple(stride, rank)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.w = Param(f"{name}.w", glorot_uniform((cout, cin) + self.kernel, rng, dtype), decay=decay)
        self.b = Param(f"{name}.b", np.zeros(cout, dtype)) if bias else None
        self._x = None

    def params(self):
        return [self.w] + ([self.b] if self.b is not None else [])

    def forward(self, x, training=False):
        self._x = x
        return conv_forward(x, self.w.value, None if self.b is None else self.b.value, self.stride)

    def backward(self, grad):
        gx, gw, gb = conv_backward(grad, self._x, self.w.value, self.stride)
        self.w.grad = gw
        if self.b is not None:
            self.b.grad = gb
        self._x = None
        return gx

    def shrink(self):
        return self.kernel[0] - 1


class BatchNorm(Layer):
    def __init__(self, name, channels, rank=2, scale_init=1.0, dtype=np.float32):
        self.rank = rank
        self.gamma = Param(f"{name}.scale", np.full(channels, scale_init, dtype))
        self.beta = Param(f"{name}.shift", np.zeros(channels, dtype))
        self.running_mean = Param(f"{name}.running_mean", np.zeros(channels, dtype), trainable=False)
        self.running_var = Param(f"{name}.running_var", np.ones(channels, dtype), trainable=False)
        self.tracked = False
        self._cache = None

    def params(self):
        return [self.gamma, self.beta, self.running_mean, self.running_var]

    def _bshape(self, v):
        return v.reshape((1, -1) + (1,) * self.rank)

    def forward(self, x, training=False):
        axes = (0,) + _spatial_axes(self.rank)
        if training:
            mean = x.mean(axis=axes, dtype=np.float64)
            centered = x - self._bshape(mean).astype(x.dtype)
            var = np.mean(np.square(centered, dtype=np.float64), axis=axes)
            n = x.size // x.shape[1]
            rm, rv = self.running_mean, self.running_var
            if self.tracked:
                rm.value = (BN_MOMENTUM * rm.value + (1 - BN_MOMENTUM) * mean).astype(rm.value.dtype)
                rv.value = (BN_MOMENTUM * rv.value + (1 - BN_MOMENTUM) * var * n / max(n - 1, 1)).astype(rv.value.dtype)
            else:
                rm.value = mean.astype(rm.value.dtype)
                rv.value = (var * n / max(n - 1, 1)).astype(rv.value.dtype)
                self.tracked = True
        else:
            if not self.tracked:
                raise RuntimeError(f"{self.gamma.name[:-6]}: inference before any batch statistics were accumulated")
            mean = self.running_mean.value.astype(np.float64)
            var = self.running_var.value.astype(np.float64)
            centered = x - self._bshape(mean).astype(x.dtype)
        inv_std = (1.0 / np.sqrt(var + BN_EPS)).astype(x.dtype)
        xhat = centered * self._bshape(inv_std)
        self._cache = (xhat, inv_std, training)
        return xhat * self._bshape(self.gamma.value.astype(x.dtype)) + self._bshape(self.beta.value.astype(x.dtype))

    def backward(self, grad):
        xhat, inv_std, training = self._cache
        axes = (0,) + _spatial_axes(self.rank)
        self.gamma.grad = (grad * xhat).sum(axis=axes, dtype=np.float64).astype(self.gamma.value.dtype)
        self.beta.grad = grad.sum(axis=axes, dtype=np.float64).astype(self.beta.value.dtype)
        dxhat = grad * self._bshape(self.gamma.value.astype(grad.dtype))
        self._cache = None
        if not training:
            return dxhat * self._bshape(inv_std)
        n = grad.size // grad.shape[1]
        s1 = dxhat.sum(axis=axes, dtype=np.float64) / n
        s2 = (dxhat * xhat).sum(axis=axes, dtype=np.float64) / n
        return (dxhat - self._bshape(s1).astype(grad.dtype) - xhat * self._bshape(s2).astype(grad.dtype)) * self._bshape(inv_std)


class ReLU(Layer):
    def forward(self, x, training=False):
        self._mask = x > 0
        return x * self._mask

    def backward(self, grad):
        return grad * self._mask


class Dropout(Layer):
    """Inverted dropout; identity at inference."""

    def __init__(self, p=0.5, rng=None):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"dropout probability {p} not in [0, 1]")
        self.p = p
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self._mask = None

    def forward(self, x, training=False):
        if not training or self.p == 0.0:
            self._mask = None
            return x
        if self.p >= 1.0:
            raise ValueError("dropout with p = 1 in training mode zeroes every activation")
        keep = self.rng.random(x.shape) >= self.p
        self._mask = keep.astype(x.dtype) / x.dtype.type(1.0 - self.p)
        return x * self._mask

    def backward(self, grad):
        return grad if self._mask is None else grad * self._mask


def dropout(x, p, training, rng):
    return Dropout(p, rng).forward(x, training)


def center_crop(x, margin, rank):
    if margin == 0:
        return x
    return x[(slice(None), slice(None)) + (slice(margin, -margin),) * rank]


def uncrop(grad, margin, rank):
    if margin == 0:
        return grad
    return np.pad(grad, [(0, 0), (0, 0)] + [(margin, margin)] * rank)


class Sequential(Layer):
    def __init__(self, layers):
        self.layers = list(layers)

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def forward(self, x, training=False):
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def shrink(self):
        return sum(layer.shrink() for layer in self.layers)


class ConvBNReLU(Sequential):
    def __init__(self, name, cin, cout, kernel=3, rank=2, rng=None, dtype=np.float32):
        super().__init__([
            Conv(f"{name}.conv", cin, cout, kernel, rank, bias=False, rng=rng, dtype=dtype),
            BatchNorm(f"{name}.bn", cout, rank, dtype=dtype),
            ReLU(),
        ])


class ResBlock(Layer):
    """Post-activation residual block with valid convolutions.

    standard:   conv3 -> bn -> relu -> conv3 -> bn
    bottleneck: conv1 -> bn -> relu -> conv3 -> bn -> relu -> conv1 -> bn
    The shortcut is the center crop of the input, followed by a 1x1
    projection + bn when the channel count changes. The last bn of the
    residual branch starts with scale 0, so a fresh block is the shortcut map.
    """

    def __init__(self, name, cin, cout, kind="standard", kernel=3, rank=2, rng=None, dtype=np.float32):
        if kind not in ("standard", "bottleneck"):
            raise ValueError(f"unknown res block kind {kind!r}")
        self.kind, self.rank = kind, rank
        if kind == "standard":
            self.branch = Sequential([
                Conv(f"{name}.conv1", cin, cout, kernel, rank, bias=False, rng=rng, dtype=dtype),
                BatchNorm(f"{name}.bn1", cout, rank, dtype=dtype),
                ReLU(),
                Conv(f"{name}.conv2", cout, cout, kernel, rank, bias=False, rng=rng, dtype=dtype),
                BatchNorm(f"{name}.bn2", cout, rank, scale_init=0.0, dtype=dtype),
            ])
        else:
            mid = max(1, cout // 4)
            self.branch = Sequential([
                Conv(f"{name}.conv1", cin, mid, 1, rank, bias=False, rng=rng, dtype=dtype),
                BatchNorm(f"{name}.bn1", mid, rank, dtype=dtype),
                ReLU(),
                Conv(f"{name}.conv2", mid, mid, kernel, rank, bias=False, rng=rng, dtype=dtype),
                BatchNorm(f"{name}.bn2", mid, rank, dtype=dtype),
                ReLU(),
                Conv(f"{name}.conv3", mid, cout, 1, rank, bias=False, rng=rng, dtype=dtype),
                BatchNorm(f"{name}.bn3", cout, rank, scale_init=0.0, dtype=dtype),
            ])
        self.margin = self.branch.shrink() // 2
        if cin != cout:
            self.proj = Sequential([
                Conv(f"{name}.proj", cin, cout, 1, rank, bias=False, rng=rng, dtype=dtype),
                BatchNorm(f"{name}.proj_bn", cout, rank, dtype=dtype),
            ])
        else:
            self.proj = None
        self.relu = ReLU()

    def params(self):
        return self.branch.params() + (self.proj.params() if self.proj else [])

    def shortcut(self, x, training=False):
        s = center_crop(x, self.margin, self.rank)
        return self.proj.forward(s, training) if self.proj else s

    def forward(self, x, training=False):
        r = self.branch.forward(x, training)
        s = self.shortcut(x, training)
        return self.relu.forward(r + s, training)

    def backward(self, grad):
        g = self.relu.backward(grad)
        gx = self.branch.backward(g)
        gs = self.proj.backward(g) if self.proj else g
        return gx + uncrop(gs, self.margin, self.rank)

    def shrink(self):
        return 2 * self.margin


def upsample_nearest(x, factor, rank):
    for axis in range(2, 2 + rank):
        x = np.repeat(x, factor, axis=axis)
    return x


def upsample_nearest_backward(grad, factor, rank):
    shape = list(grad.shape[:2])
    for n in grad.shape[2:]:
        shape += [n // factor, factor]
    g = grad.reshape(shape)
    return g.sum(axis=tuple(3 + 2 * i for i in range(rank)))


def average_pool(x, factor, rank):
    """Non-overlapping mean pooling over the trailing ``rank`` axes (extents divisible by factor)."""
    lead = x.shape[: x.ndim - rank]
    shape = list(lead)
    for n in x.shape[x.ndim - rank :]:
        if n % factor:
            raise ShapeError(f"extent {n} is not divisible by pooling factor {factor}")
        shape += [n // factor, factor]
    axes = tuple(len(lead) + 1 + 2 * i for i in range(rank))
    return x.reshape(shape).mean(axis=axes)


# --- layer specs and receptive fields -----------------------------------------------


LAYER_KINDS = (
    "conv", "batchnorm", "relu", "dropout", "resblock-standard", "resblock-bottleneck", "fc-as-1x1-conv", "softmax",
)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int = 1
    out_channels: int = 1
    kernel: int | tuple[int, ...] = 3
    stride: int = 1
    p: float = 0.0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        ks = (self.kernel,) if isinstance(self.kernel, int) else tuple(self.kernel)
        if any(k < 1 or k % 2 == 0 for k in ks):
            raise ValueError(f"kernel sizes must be odd and >= 1, got {self.kernel}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"dropout probability {self.p} not in [0, 1]")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")

    def kernel_tuple(self, rank):
        return _as_tuple(self.kernel, rank)

    def describe(self) -> str:
        return f"{self.kind}:{self.in_channels}->{self.out_channels}:k{self.kernel}:s{self.stride}:p{self.p}"


def receptive_field(specs, rank: int = 2, path_downsample_factor: int = 1) -> tuple[int, ...]:
    """Receptive field per axis in original-resolution voxels.

    rf <- rf + (k - 1) * jump, jump <- jump * stride, with the jump starting
    at the path's downsample factor.
    """
    rf = [1] * rank
    jump = [path_downsample_factor] * rank
    for spec in specs:
        ks = spec.kernel_tuple(rank)
        if spec.kind == "conv":
            n_kernels = 1
        elif spec.kind == "resblock-standard":
            n_kernels = 2
        elif spec.kind == "resblock-bottleneck":
            n_kernels = 1
        else:
            continue
        for a in range(rank):
            rf[a] += n_kernels * (ks[a] - 1) * jump[a]
            jump[a] *= spec.stride
    return tuple(rf)


# --- finite-difference checking ---------------------------------------------------------


def relative_error(analytic, numeric) -> float:
    a, n = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


def numerical_gradient(fn, array: np.ndarray, step: float = 1e-4, max_entries: int | None = None, rng=None):
    """Central differences of scalar ``fn()`` w.r.t. ``array`` (perturbed in place).

    With ``max_entries`` only a random subset is probed; returns (indices, values).
    """
    flat = array.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        rng = rng if rng is not None else np.random.default_rng(0)
        idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
    out = np.empty(len(idx))
    for j, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + step
        fp = fn()
        flat[i] = old - step
        fm = fn()
        flat[i] = old
        out[j] = (fp - fm) / (2 * step)
    return idx, out


def check_layer_gradients(layer: Layer, x: np.ndarray, rng, training=True, step=1e-4, max_entries=None, reset=None):
    """Max relative error between analytic and numeric gradients for input and every trainable param.

    The scalar probed is sum(forward(x) * r) for a fixed random r. ``reset``
    (if given) is called before every forward, e.g. to re-seed dropout.
    """
    reset = reset or (lambda: None)
    reset()
    y = layer.forward(x, training)
    r = rng.standard_normal(y.shape)
    gx = layer.backward(r.astype(y.dtype))
    grads = {p.name: p.grad.copy() for p in layer.params() if p.trainable}

    def loss():
        reset()
        return float((layer.forward(x, training) * r).sum())

    errors = {}
    idx, num = numerical_gradient(loss, x, step, max_entries, rng)
    errors["input"] = relative_error(gx.reshape(-1)[idx], num)
    for p in layer.params():
        if not p.trainable:
            continue
        idx, num = numerical_gradient(loss, p.value, step, max_entries, rng)
        errors[p.name] = relative_error(grads[p.name].reshape(-1)[idx], num)
    return errors
