"""Forward and backward kernels for the layer types of the classifier stack.

All kernels take and return NCHW (or NC for dense layers) numpy arrays and
keep the dtype of their input, so the same code runs in float32 for
training and float64 for gradient checks.

Convolution is lowered to a single matrix product (im2col). For an input
padded to (N, C, Hp, Wp) the window view has shape (N, OH, OW, C, kh, kw);
flattening its last three axes lines up with ``weights.reshape(O, C*kh*kw)``
so one GEMM produces every output pixel. The backward pass scatters column
gradients back with kh*kw strided slice additions, in a fixed order.
"""
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import DataError, ShapeError


def out_extent(size, kernel, stride, pad):
    return (size + 2 * pad - kernel) // stride + 1


@dataclass
class ConvParams:
    weights: np.ndarray  # (out, in // groups, kh, kw)
    bias: np.ndarray  # (out,)
    stride: int = 1
    pad: int = 0
    groups: int = 1
    name: str = "conv"

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ShapeError(f"{self.name}: conv weights must be rank 4, got {self.weights.shape}")
        o, _, kh, kw = self.weights.shape
        if kh < 1 or kw < 1 or self.stride < 1 or self.pad < 0 or self.groups < 1:
            raise ShapeError(f"{self.name}: invalid kernel/stride/pad")
        if o % self.groups:
            raise ShapeError(f"{self.name}: {o} filters not divisible into {self.groups} groups")
        if self.bias.shape != (o,):
            raise ShapeError(f"{self.name}: bias shape {self.bias.shape} != ({o},)")

    @property
    def out_channels(self):
        return self.weights.shape[0]

    @property
    def in_channels(self):
        return self.weights.shape[1] * self.groups

    def output_shape(self, in_shape):
        c, h, w = in_shape
        _, _, kh, kw = self.weights.shape
        if c != self.in_channels:
            raise ShapeError(f"{self.name}: expects {self.in_channels} input channels, got {c}")
        oh, ow = out_extent(h, kh, self.stride, self.pad), out_extent(w, kw, self.stride, self.pad)
        if oh < 1 or ow < 1:
            raise ShapeError(f"{self.name}: kernel {kh}x{kw} does not fit input {h}x{w} (pad {self.pad})")
        return self.out_channels, oh, ow


@dataclass
class LrnParams:
    size: int = 5
    alpha: float = 1.0
    beta: float = 0.75

    def __post_init__(self):
        if self.size < 1 or self.size % 2 == 0:
            raise ShapeError(f"LRN size must be odd and >= 1, got {self.size}")


@dataclass
class PoolParams:
    window: int = 2
    stride: int = 2
    pad: int = 0
    mode: str = "max"

    def __post_init__(self):
        if self.mode != "max":
            raise ShapeError(f"only max pooling is supported, got {self.mode!r}")
        if self.window < 1 or self.stride < 1 or not 0 <= self.pad < self.window:
            raise ShapeError("invalid pooling window/stride/pad")

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if self.window > h + 2 * self.pad or self.window > w + 2 * self.pad:
            raise ShapeError(f"pool window {self.window} larger than input {h}x{w}")
        return c, out_extent(h, self.window, self.stride, self.pad), out_extent(w, self.window, self.stride, self.pad)


@dataclass
class DropoutState:
    ratio: float = 0.5
    mode: str = "train"
    mask: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ShapeError(f"dropout ratio must lie in [0, 1], got {self.ratio}")


# ---------------------------------------------------------------- convolution

def _windows(xp, kh, kw, stride, oh, ow):
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    return as_strided(xp, (n, oh, ow, c, kh, kw), (sn, sh * stride, sw * stride, sc, sh, sw), writeable=False)


def _pad(x, pad):
    if pad == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def im2col(x, kh, kw, stride, pad):
    """Return ``(cols, oh, ow)`` with cols of shape (N*OH*OW, C*kh*kw)."""
    n, c, h, w = x.shape
    oh, ow = out_extent(h, kh, stride, pad), out_extent(w, kw, stride, pad)
    cols = _windows(_pad(x, pad), kh, kw, stride, oh, ow).reshape(n * oh * ow, c * kh * kw)
    return cols, oh, ow


def col2im(cols, x_shape, kh, kw, stride, pad, oh, ow):
    n, c, h, w = x_shape
    g = cols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    gp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            gp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += g[:, :, i, j]
    return gp[:, :, pad:pad + h, pad:pad + w]


def _check_conv_input(x, p):
    if x.ndim != 4:
        raise ShapeError(f"{p.name}: expected NCHW input, got shape {x.shape}")
    return p.output_shape(x.shape[1:])


def conv_forward(x, p, return_cols=False):
    """out[n,o,y,x] = bias[o] + sum_{c,i,j} w[o,c,i,j] * x_padded[n,c,y*s+i,x*s+j]."""
    _, oh, ow = _check_conv_input(x, p)
    n = x.shape[0]
    o, cg, kh, kw = p.weights.shape
    og = o // p.groups
    out = np.empty((n * oh * ow, o), dtype=np.result_type(x, p.weights))
    all_cols = []
    for g in range(p.groups):
        cols, _, _ = im2col(x[:, g * cg:(g + 1) * cg], kh, kw, p.stride, p.pad)
        wmat = p.weights[g * og:(g + 1) * og].reshape(og, -1)
        np.matmul(cols, wmat.T, out=out[:, g * og:(g + 1) * og])
        all_cols.append(cols)
    out += p.bias
    out = out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if return_cols:
        return out, all_cols
    return out


def conv_backward(x, p, grad_out, cols=None, input_grad=True):
    """Return ``(grad_input, grad_weights, grad_bias)``.

    With ``input_grad=False`` (first layer of a network) grad_input is None.
    """
    _, oh, ow = _check_conv_input(x, p)
    n = x.shape[0]
    o, cg, kh, kw = p.weights.shape
    if grad_out.shape != (n, o, oh, ow):
        raise ShapeError(f"{p.name}: grad_out shape {grad_out.shape} != {(n, o, oh, ow)}")
    og = o // p.groups
    g2 = grad_out.transpose(0, 2, 3, 1).reshape(n * oh * ow, o)
    grad_w = np.empty_like(p.weights, dtype=np.result_type(x, p.weights))
    grad_x = np.empty(x.shape, dtype=np.result_type(x, grad_out)) if input_grad else None
    for g in range(p.groups):
        gcols = cols[g] if cols is not None else im2col(x[:, g * cg:(g + 1) * cg], kh, kw, p.stride, p.pad)[0]
        gg = g2[:, g * og:(g + 1) * og]
        wmat = p.weights[g * og:(g + 1) * og].reshape(og, -1)
        grad_w[g * og:(g + 1) * og] = (gg.T @ gcols).reshape(og, cg, kh, kw)
        if input_grad:
            dcols = gg @ wmat
            grad_x[:, g * cg:(g + 1) * cg] = col2im(dcols, (n, cg) + x.shape[2:], kh, kw, p.stride, p.pad, oh, ow)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------- activations

def relu_forward(a):
    return np.maximum(a, 0)


def relu_backward(a, grad_out):
    # derivative at exactly 0 is taken as 0
    return np.where(a > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def _channel_window_sum(sq, size):
    """Sum over the ``size`` channels centred on each channel, truncated at the borders."""
    half = size // 2
    c = sq.shape[1]
    padded = np.pad(sq, ((0, 0), (half, half), (0, 0), (0, 0)))
    acc = np.zeros_like(sq)
    for k in range(size):
        acc += padded[:, k:k + c]
    return acc


def lrn_forward(a, p):
    """a / (1 + alpha/L * sum_{window} a^2)^beta across neighbouring channels."""
    scale = 1 + (p.alpha / p.size) * _channel_window_sum(a * a, p.size)
    return a * scale ** -p.beta


def lrn_backward(a, p, grad_out):
    scale = 1 + (p.alpha / p.size) * _channel_window_sum(a * a, p.size)
    out_factor = scale ** -p.beta
    inner = grad_out * a * out_factor / scale
    return grad_out * out_factor - (2 * p.alpha * p.beta / p.size) * a * _channel_window_sum(inner, p.size)


# ---------------------------------------------------------------- pooling

def maxpool_forward(x, p):
    """Return ``(out, argmax)``; argmax holds per-plane flat input indices.

    Ties resolve to the lowest flat index in the window.
    """
    _, oh, ow = p.output_shape(x.shape[1:])
    h, w = x.shape[2:]
    k, s = p.window, p.stride
    xp = x if p.pad == 0 else np.pad(x, ((0, 0), (0, 0), (p.pad, p.pad), (p.pad, p.pad)), constant_values=-np.inf)
    # scan window cells in row-major order; strict '>' keeps the first maximum
    out = xp[:, :, 0:s * oh:s, 0:s * ow:s].copy()
    local = np.zeros(out.shape, dtype=np.int64)
    for cell in range(1, k * k):
        i, j = divmod(cell, k)
        v = xp[:, :, i:i + s * oh:s, j:j + s * ow:s]
        better = v > out
        np.copyto(out, v, where=better)
        local[better] = cell
    rows = np.arange(oh)[:, None] * s + local // k - p.pad
    cols = np.arange(ow)[None, :] * s + local % k - p.pad
    return out, rows * w + cols


def maxpool_backward(argmax, grad_out, in_shape):
    n, c, h, w = in_shape
    grad = np.zeros((n * c, h * w), dtype=grad_out.dtype)
    flat_idx = argmax.reshape(n * c, -1)
    flat_g = grad_out.reshape(n * c, -1)
    planes = np.arange(n * c)[:, None]
    np.add.at(grad, (np.broadcast_to(planes, flat_idx.shape), flat_idx), flat_g)
    return grad.reshape(in_shape)


# ---------------------------------------------------------------- dense

def fc_forward(x, w, b):
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"dense shapes do not agree: x {x.shape}, W {w.shape}, b {b.shape}")
    return x @ w + b


def fc_backward(x, w, grad_out):
    return grad_out @ w.T, x.T @ grad_out, grad_out.sum(axis=0)


# ---------------------------------------------------------------- dropout

def dropout_forward(x, state, rng=None):
    """Inverted dropout: survivors are scaled by 1/(1-p); inference is the identity."""
    if state.mode != "train" or state.ratio == 0.0:
        state.mask = None
        return x
    if state.ratio == 1.0:
        state.mask = np.zeros(x.shape, dtype=x.dtype)
        return np.zeros_like(x)
    keep = rng.random(x.shape) >= state.ratio
    state.mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - state.ratio))
    return x * state.mask


def dropout_backward(grad_out, state):
    if state.mask is None:
        return grad_out
    return grad_out * state.mask


# ---------------------------------------------------------------- loss

def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def one_hot(labels, classes=2, dtype=np.float64):
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], classes), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1
    return out


def softmax_loss(logits, targets):
    """Mean cross-entropy of softmax(logits) against one-hot targets.

    Returns ``(loss, grad_logits)`` with grad = (softmax - targets) / N.
    """
    if logits.ndim != 2 or logits.shape != targets.shape or logits.shape[1] < 2:
        raise ShapeError(f"logits {logits.shape} and targets {targets.shape} must be (N, C>=2)")
    if not (np.all((targets == 0) | (targets == 1)) and np.all(targets.sum(axis=1) == 1)):
        raise DataError("target rows must be one-hot")
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - log_norm
    loss = -float((targets * log_p).sum()) / n
    grad = (np.exp(log_p) - targets) / n
    return loss, grad.astype(logits.dtype, copy=False)
