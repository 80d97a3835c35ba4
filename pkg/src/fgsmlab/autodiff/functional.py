"""Differentiable network ops built on the core engine.

All backward rules are expressed with Tensor ops, so each of these supports
``create_graph`` and can sit inside an input-gradient regularizer.
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import erf as _erf
from scipy.special import expit

from .tensor import (
    Function,
    Tensor,
    _check_finite,
    as_tensor,
    exp,
    matmul,
    mean,
    reshape,
    sqrt,
    tabs,
    transpose,
    tsum,
)

__all__ = [
    "conv2d",
    "linear",
    "relu",
    "sigmoid",
    "softplus_param",
    "gelu",
    "silu",
    "elu",
    "activation",
    "ACTIVATIONS",
    "cross_entropy",
    "l2_norm",
    "l1_mean",
    "abs_sum",
    "cosine_similarity",
    "batch_norm",
    "avg_pool2d",
    "adaptive_avg_pool2d",
    "global_avg_pool",
    "flatten",
    "sign",
]


# ---------------------------------------------------------------------------
# convolution via im2col / col2im, which are adjoint linear maps
# ---------------------------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = x.shape
    oh = conv_output_size(h, k, stride, pad)
    ow = conv_output_size(w, k, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    x = np.ascontiguousarray(x)
    sn, sc, sh, sw = x.strides
    view = as_strided(
        x,
        shape=(n, oh, ow, c, k, k),
        strides=(sn, sh * stride, sw * stride, sc, sh, sw),
        writeable=False,
    )
    return view.reshape(n * oh * ow, c * k * k)


def _col2im(cols: np.ndarray, x_shape, k: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = x_shape
    oh = conv_output_size(h, k, stride, pad)
    ow = conv_output_size(w, k, stride, pad)
    cols = cols.reshape(n, oh, ow, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        hi = i + stride * oh
        for j in range(k):
            out[:, :, i:hi:stride, j : j + stride * ow : stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(out)


class Im2Col(Function):
    def forward(self, x, k=3, stride=1, pad=0):
        self.args = (x.shape, k, stride, pad)
        return _im2col(x, k, stride, pad)

    def backward(self, g, needs):
        shape, k, stride, pad = self.args
        return (Col2Im.apply(g, x_shape=shape, k=k, stride=stride, pad=pad),)


class Col2Im(Function):
    def forward(self, cols, x_shape=None, k=3, stride=1, pad=0):
        self.args = (k, stride, pad)
        return _col2im(cols, x_shape, k, stride, pad)

    def backward(self, g, needs):
        k, stride, pad = self.args
        return (Im2Col.apply(g, k=k, stride=stride, pad=pad),)


def conv2d(x, w, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of an NCHW batch with an OIKK kernel."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input and OIKK weight, got {x.shape} and {w.shape}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be positive and padding non-negative")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ValueError(f"input has {c} channels, weight expects {ci}")
    if kh != kw:
        raise ValueError("only square kernels are supported")
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(wd, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ValueError(f"conv2d output would be empty ({oh}x{ow})")
    cols = Im2Col.apply(x, k=kh, stride=stride, pad=padding)
    out = matmul(cols, transpose(reshape(w, (o, ci * kh * kw)), None))
    out = transpose(reshape(out, (n, oh, ow, o)), (0, 3, 1, 2))
    if bias is not None:
        out = out + reshape(as_tensor(bias), (1, o, 1, 1))
    return out


def linear(x, w, bias=None) -> Tensor:
    out = matmul(as_tensor(x), transpose(as_tensor(w), None))
    if bias is not None:
        out = out + bias
    return out


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

class Relu(Function):
    def forward(self, a):
        return np.maximum(a, 0)

    def backward(self, g, needs):
        mask = (self.parents[0].data > 0).astype(g.dtype)
        return (g * Tensor(mask),)


class Sigmoid(Function):
    def forward(self, a):
        return expit(a)

    def backward(self, g, needs):
        s = sigmoid(self.parents[0])
        return (g * s * (1.0 - s),)


class Softplus(Function):
    def forward(self, a, alpha=1.0):
        self.alpha = alpha
        return np.maximum(a, 0) + np.log1p(np.exp(-alpha * np.abs(a))) / alpha

    def backward(self, g, needs):
        return (g * sigmoid(self.parents[0] * self.alpha),)


class Erf(Function):
    def forward(self, a):
        return _erf(a)

    def backward(self, g, needs):
        a = self.parents[0]
        return (g * (2.0 / math.sqrt(math.pi)) * exp(-(a * a)),)


def relu(x) -> Tensor:
    return Relu.apply(as_tensor(x))


def sigmoid(x) -> Tensor:
    return Sigmoid.apply(as_tensor(x))


def softplus_param(x, alpha: float) -> Tensor:
    """Smooth ReLU surrogate ``log(1 + exp(alpha*x)) / alpha``.

    Evaluated as ``max(x, 0) + log1p(exp(-alpha*|x|)) / alpha`` so large
    ``|alpha*x|`` cannot overflow.  Larger ``alpha`` is sharper.
    """
    if not alpha > 0:
        raise ValueError(f"softplus alpha must be positive, got {alpha}")
    return Softplus.apply(as_tensor(x), alpha=float(alpha))


def _erf_t(x) -> Tensor:
    return Erf.apply(as_tensor(x))


def gelu(x) -> Tensor:
    x = as_tensor(x)
    return x * (0.5 * (1.0 + _erf_t(x * (1.0 / math.sqrt(2.0)))))


def silu(x) -> Tensor:
    x = as_tensor(x)
    return x * sigmoid(x)


def elu(x) -> Tensor:
    # relu(x) + exp(min(x, 0)) - 1, with min(x, 0) = -relu(-x)
    x = as_tensor(x)
    return relu(x) + exp(-relu(-x)) - 1.0


ACTIVATIONS = ("relu", "gelu", "silu", "elu", "softplus_param")


def activation(name: str, alpha: float | None = None):
    """Return a unary callable for the named activation."""
    if name == "relu":
        return relu
    if name == "gelu":
        return gelu
    if name == "silu":
        return silu
    if name == "elu":
        return elu
    if name == "softplus_param":
        if alpha is None:
            raise ValueError("softplus_param needs alpha")
        return lambda x: softplus_param(x, alpha)
    raise ValueError(f"unknown activation {name!r}; choose from {ACTIVATIONS}")


# ---------------------------------------------------------------------------
# losses and norms
# ---------------------------------------------------------------------------

def cross_entropy(logits, labels, reduction: str = "mean") -> Tensor:
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ValueError("logits must be N x C")
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    shift = Tensor(np.max(logits.data, axis=1, keepdims=True))
    z = logits - shift
    lse = (tsum(exp(z), axis=1, keepdims=True)).log()
    onehot = np.zeros((n, c), dtype=logits.dtype)
    onehot[np.arange(n), labels] = 1.0
    nll = -tsum((z - lse) * Tensor(onehot), axis=1)
    if reduction == "none":
        return nll
    if reduction == "sum":
        return tsum(nll)
    if reduction == "mean":
        return mean(nll)
    raise ValueError(f"unknown reduction {reduction!r}")


class L2Norm(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.axis = axis
        self.keepdims = keepdims
        return np.sqrt(np.sum(a * a, axis=axis, keepdims=keepdims))

    def backward(self, g, needs):
        x = self.parents[0]
        if not self.keepdims:
            if self.axis is None:
                kshape = (1,) * x.ndim
            else:
                axes = (self.axis,) if isinstance(self.axis, int) else self.axis
                axes = {ax % x.ndim for ax in axes}
                kshape = tuple(1 if i in axes else s for i, s in enumerate(x.shape))
            g = reshape(g, kshape)
        n = l2_norm(x, axis=self.axis, keepdims=True)
        # zero norm: subgradient 0 (x is zero there, so any finite denominator works)
        safe = n + Tensor((n.data == 0).astype(x.dtype))
        return (g * x / safe,)


def l2_norm(x, axis=None, keepdims: bool = False) -> Tensor:
    """Euclidean norm; the gradient at the origin is taken to be zero."""
    if isinstance(axis, list):
        axis = tuple(axis)
    return L2Norm.apply(as_tensor(x), axis=axis, keepdims=keepdims)


def abs_sum(x) -> Tensor:
    return tsum(tabs(x))


def l1_mean(x) -> Tensor:
    return mean(tabs(x))


def cosine_similarity(a, b, axis: int = 1):
    """Row-wise cosine similarity.

    Returns ``(cos, valid)`` where ``valid`` is a boolean array marking rows
    with both norms nonzero; invalid rows get cos = 0.
    """
    a, b = as_tensor(a), as_tensor(b)
    dot = tsum(a * b, axis=axis)
    na = l2_norm(a, axis=axis)
    nb = l2_norm(b, axis=axis)
    valid = (na.data > 0) & (nb.data > 0)
    vmask = valid.astype(a.dtype)
    cos = dot / (na * nb + Tensor(1.0 - vmask)) * Tensor(vmask)
    return cos, valid


# ---------------------------------------------------------------------------
# normalization, pooling, reshaping
# ---------------------------------------------------------------------------

def batch_norm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
    update_stats: bool = False,
) -> Tensor:
    """Per-channel batch normalization of an NCHW tensor.

    In train mode the current batch statistics are used (and are part of the
    graph).  ``update_stats`` updates the running buffers in place.
    """
    x = as_tensor(x)
    c = x.shape[1]
    shape = (1, c, 1, 1)
    if train:
        mu = mean(x, axis=(0, 2, 3), keepdims=True)
        xc = x - mu
        var = mean(xc * xc, axis=(0, 2, 3), keepdims=True)
        xhat = xc / sqrt(var + eps)
        if update_stats:
            m = x.shape[0] * x.shape[2] * x.shape[3]
            batch_var = var.data.reshape(c) * (m / max(m - 1, 1))
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu.data.reshape(c)
            running_var *= 1.0 - momentum
            running_var += momentum * batch_var
    else:
        rm = running_mean.reshape(shape).astype(x.dtype)
        rs = np.sqrt(running_var.reshape(shape) + eps).astype(x.dtype)
        xhat = (x - Tensor(rm)) / Tensor(rs)
    return xhat * reshape(as_tensor(gamma), shape) + reshape(as_tensor(beta), shape)


def avg_pool2d(x, kernel: int) -> Tensor:
    """Non-overlapping average pooling (stride equal to kernel)."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % kernel or w % kernel:
        raise ValueError(f"avg_pool2d kernel {kernel} does not divide {h}x{w}")
    r = reshape(x, (n, c, h // kernel, kernel, w // kernel, kernel))
    return mean(r, axis=(3, 5))


def _pool_matrix(size_in: int, size_out: int, dtype) -> np.ndarray:
    m = np.zeros((size_out, size_in), dtype=dtype)
    for i in range(size_out):
        lo = (i * size_in) // size_out
        hi = -((-(i + 1) * size_in) // size_out)
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def adaptive_avg_pool2d(x, out_size: int) -> Tensor:
    """Average pooling to a fixed ``out_size x out_size`` map (windows may overlap)."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h == out_size and w == out_size:
        return x
    if out_size > h or out_size > w:
        raise ValueError(f"cannot adaptively pool {h}x{w} up to {out_size}")
    pw = Tensor(_pool_matrix(w, out_size, x.dtype).T)
    ph = Tensor(_pool_matrix(h, out_size, x.dtype).T)
    y = matmul(reshape(x, (n * c * h, w)), pw)
    y = transpose(reshape(y, (n, c, h, out_size)), (0, 1, 3, 2))
    y = matmul(reshape(y, (n * c * out_size, h)), ph)
    return transpose(reshape(y, (n, c, out_size, out_size)), (0, 1, 3, 2))


def global_avg_pool(x) -> Tensor:
    return mean(as_tensor(x), axis=(2, 3))


def flatten(x) -> Tensor:
    x = as_tensor(x)
    return reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))


def sign(x) -> Tensor:
    """Elementwise sign with sign(0) = 0.  The result is detached."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    out = np.sign(data)
    _check_finite(out, "sign")
    return Tensor(out)
