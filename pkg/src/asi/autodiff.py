"""Minimal rank-4 tensor engine with reverse-mode differentiation.

The op set is closed over exactly what the slice-synthesis network and its
losses need: 3x3 convolution, batch normalization, 2x2 average pooling,
2x2 nearest-neighbor upsampling, leaky ReLU, sigmoid, fixed-kernel window
correlation, and a handful of elementwise/reduction ops. Everything runs on
numpy arrays; float32 by default, float64 preserved when supplied (used for
finite-difference gradient checking).

Graph recording is confined to a single thread per training step. Forward
evaluation without an active Graph records nothing and is safe to run
concurrently on frozen parameters.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

__all__ = [
    "Tensor",
    "Parameter",
    "Graph",
    "BatchNormStats",
    "conv2d",
    "batchnorm2d",
    "avgpool2",
    "upsample_nearest2",
    "leaky_relu",
    "sigmoid",
    "mse",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "shift",
    "mean_all",
    "window_corr",
    "backward",
    "zero_grad",
]

_FLOAT_TYPES = (np.float32, np.float64)


class Tensor:
    """Array container participating in the recorded operation graph.

    `data` is owned by the tensor; its shape is fixed after creation.
    `grad`, when populated by :func:`backward`, has the same shape and dtype.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_TYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class Parameter:
    """Named trainable tensor; names are unique within a model."""

    __slots__ = ("name", "tensor")

    def __init__(self, name: str, data):
        self.name = name
        self.tensor = Tensor(data, requires_grad=True)

    @property
    def data(self):
        return self.tensor.data

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


class Graph:
    """Recorded operation nodes in execution order.

    Used as a context manager around a differentiable forward pass; backward
    replays the nodes in exact reverse execution order. Only one graph may be
    active at a time.
    """

    _active: "Graph | None" = None

    def __init__(self):
        self.nodes: list = []  # (output, inputs, backward_fn)

    def __enter__(self) -> "Graph":
        if Graph._active is not None:
            raise RuntimeError("a Graph is already recording")
        Graph._active = self
        return self

    def __exit__(self, exc_type, exc, tb):
        Graph._active = None
        return False


def _record(out: Tensor, inputs: tuple, backward_fn) -> Tensor:
    graph = Graph._active
    if graph is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        graph.nodes.append((out, inputs, backward_fn))
    return out


def backward(loss: Tensor, graph: Graph) -> None:
    """Populate `.grad` on every tensor reachable from `loss` in `graph`.

    `loss` must be scalar. Gradients accumulate, so trainable parameters
    should be reset with :func:`zero_grad` beforehand; parameters not touched
    by the recorded forward pass keep their zeros.
    """
    if loss.data.ndim != 0:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    loss.grad = np.ones((), dtype=loss.data.dtype)
    for out, inputs, fn in reversed(graph.nodes):
        if out.grad is None:
            continue
        grads = fn(out.grad)
        for tensor, g in zip(inputs, grads):
            if g is None or not tensor.requires_grad:
                continue
            if tensor.grad is None:
                tensor.grad = g
            else:
                tensor.grad = tensor.grad + g


def zero_grad(parameters) -> None:
    for p in parameters:
        p.tensor.grad = np.zeros_like(p.tensor.data)


# ---------------------------------------------------------------------------
# convolution


def _im2col3(x: np.ndarray) -> np.ndarray:
    """Unfold zero-padded 3x3 neighborhoods: (B,C,H,W) -> (B*H*W, C*9)."""
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # (B,C,H,W,3,3)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * h * w, c * 9)


def _col2im3(dcols: np.ndarray, shape) -> np.ndarray:
    """Scatter-add 3x3 neighborhood gradients back to (B,C,H,W)."""
    b, c, h, w = shape
    dcols = dcols.reshape(b, h, w, c, 3, 3)
    dxp = np.zeros((b, c, h + 2, w + 2), dtype=dcols.dtype)
    for ky in range(3):
        for kx in range(3):
            dxp[:, :, ky:ky + h, kx:kx + w] += dcols[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
    return dxp[:, :, 1:-1, 1:-1]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: int = 1) -> Tensor:
    """3x3 cross-correlation with zero padding 1; spatial dims are preserved.

    `weight` has shape (C_out, C_in, 3, 3), `bias` shape (C_out,). Only
    stride 1 / pad 1 is supported; that is the entire architecture's need.
    """
    if stride != 1 or pad != 1:
        raise ValueError("conv2d supports stride=1, pad=1 only")
    if x.data.ndim != 4:
        raise ValueError(f"conv2d input must be rank 4, got {x.data.shape}")
    c_out, c_in, kh, kw = weight.data.shape
    if (kh, kw) != (3, 3):
        raise ValueError(f"conv2d kernel must be 3x3, got {kh}x{kw}")
    if x.data.shape[1] != c_in:
        raise ValueError(f"channel mismatch: input has {x.data.shape[1]}, weight expects {c_in}")

    b, _, h, w = x.data.shape
    cols = _im2col3(x.data)  # (B*H*W, C_in*9)
    w2 = weight.data.reshape(c_out, c_in * 9)
    out2 = cols @ w2.T
    out2 += bias.data
    out = Tensor(np.ascontiguousarray(out2.reshape(b, h, w, c_out).transpose(0, 3, 1, 2)))

    def bwd(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(b * h * w, c_out)
        gw = (g2.T @ cols).reshape(weight.data.shape)
        gb = g2.sum(axis=0)
        gx = _col2im3(g2 @ w2, x.data.shape) if x.requires_grad else None
        return gx, gw, gb

    return _record(out, (x, weight, bias), bwd)


# ---------------------------------------------------------------------------
# batch normalization


class BatchNormStats:
    """Mutable per-channel running statistics for one batch-norm layer."""

    __slots__ = ("mean", "var")

    def __init__(self, num_channels: int, dtype=np.float32):
        self.mean = np.zeros(num_channels, dtype=dtype)
        self.var = np.ones(num_channels, dtype=dtype)

    def copy(self) -> "BatchNormStats":
        out = BatchNormStats.__new__(BatchNormStats)
        out.mean = self.mean.copy()
        out.var = self.var.copy()
        return out


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_stats: BatchNormStats,
    mode: str = "train",
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over (batch, H, W).

    Train mode normalizes by batch statistics and updates `running_stats`
    in place (exponential moving average, unbiased variance stored). Eval
    mode normalizes by the running statistics and has no side effects.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if x.data.ndim != 4:
        raise ValueError(f"batchnorm2d input must be rank 4, got {x.data.shape}")
    b, c, h, w = x.data.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ValueError("gamma/beta must be per-channel vectors")

    if mode == "train":
        n = b * h * w
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))  # biased, used for normalization
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
        unbiased = var * (n / max(n - 1, 1))
        running_stats.mean[:] = (1.0 - momentum) * running_stats.mean + momentum * mean
        running_stats.var[:] = (1.0 - momentum) * running_stats.var + momentum * unbiased
        out = Tensor(xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None])

        def bwd(g):
            gbeta = g.sum(axis=(0, 2, 3))
            ggamma = (g * xhat).sum(axis=(0, 2, 3))
            if not x.requires_grad:
                return None, ggamma, gbeta
            gxhat = g * gamma.data[None, :, None, None]
            # standard train-mode batchnorm gradient
            sum_g = gxhat.sum(axis=(0, 2, 3))
            sum_gx = (gxhat * xhat).sum(axis=(0, 2, 3))
            gx = (gxhat - (sum_g[None, :, None, None] + xhat * sum_gx[None, :, None, None]) / n)
            gx *= inv_std[None, :, None, None]
            return gx, ggamma, gbeta

        return _record(out, (x, gamma, beta), bwd)

    inv_std = 1.0 / np.sqrt(running_stats.var + eps)
    xhat = (x.data - running_stats.mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = Tensor(xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None])

    def bwd_eval(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gx = g * (gamma.data * inv_std)[None, :, None, None] if x.requires_grad else None
        return gx, ggamma, gbeta

    return _record(out, (x, gamma, beta), bwd_eval)


# ---------------------------------------------------------------------------
# pooling / upsampling / activations


def avgpool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2; requires even spatial dims."""
    b, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ValueError(f"avgpool2 needs even spatial dims, got {h}x{w}")
    out = Tensor(x.data.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5)))

    def bwd(g):
        gx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * np.asarray(0.25, dtype=g.dtype)
        return (gx,)

    return _record(out, (x,), bwd)


def upsample_nearest2(x: Tensor) -> Tensor:
    """Replicate every pixel into a 2x2 block."""
    out = Tensor(np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3))

    def bwd(g):
        b, c, h2, w2 = g.shape
        return (g.reshape(b, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)),)

    return _record(out, (x,), bwd)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    """max(x, slope*x); the subgradient at exactly 0 is defined as `slope`."""
    pos = x.data > 0
    out = Tensor(np.where(pos, x.data, x.data * slope))

    def bwd(g):
        return (np.where(pos, g, g * np.asarray(slope, dtype=g.dtype)),)

    return _record(out, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    out = Tensor(y)

    def bwd(g):
        return (g * y * (1.0 - y),)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# elementwise / reductions


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)
    return _record(out, (a, b), lambda g: (g * b.data, g * a.data))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "div")
    out = Tensor(a.data / b.data)
    return _record(out, (a, b), lambda g: (g / b.data, -g * a.data / (b.data * b.data)))


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c)
    return _record(out, (a,), lambda g: (g * np.asarray(c, dtype=g.dtype),))


def shift(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data + c)
    return _record(out, (a,), lambda g: (g,))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = Tensor(np.asarray(a.data.mean(), dtype=a.data.dtype))

    def bwd(g):
        return (np.broadcast_to(g / n, a.data.shape).astype(a.data.dtype, copy=True),)

    return _record(out, (a,), bwd)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Pixel-wise mean squared error, returned as a scalar tensor."""
    _check_same_shape(a, b, "mse")
    diff = a.data - b.data
    n = diff.size
    out = Tensor(np.asarray(np.mean(diff * diff), dtype=a.data.dtype))

    def bwd(g):
        ga = diff * (2.0 * g / n)
        return ga, -ga

    return _record(out, (a, b), bwd)


def window_corr(x: Tensor, kernel: np.ndarray) -> Tensor:
    """Depthwise valid correlation with a fixed (non-trainable) 2-D kernel.

    Used for local-statistics windows inside differentiable similarity
    losses; the kernel receives no gradient.
    """
    kh, kw = kernel.shape
    b, c, h, w = x.data.shape
    if h < kh or w < kw:
        raise ValueError(f"window_corr: input {h}x{w} smaller than kernel {kh}x{kw}")
    k = kernel.astype(x.data.dtype, copy=False)
    win = sliding_window_view(x.data, (kh, kw), axis=(2, 3))  # (B,C,H',W',kh,kw)
    ho, wo = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win).reshape(b * c * ho * wo, kh * kw)
    out = Tensor((cols @ k.reshape(-1)).reshape(b, c, ho, wo))

    def bwd(g):
        gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
        gwin = sliding_window_view(gp, (kh, kw), axis=(2, 3))
        gcols = np.ascontiguousarray(gwin).reshape(b * c * h * w, kh * kw)
        kflip = k[::-1, ::-1].reshape(-1)
        return ((gcols @ kflip).reshape(b, c, h, w),)

    return _record(out, (x,), bwd)
