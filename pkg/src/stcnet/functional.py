"""Differentiable tensor operations.

All 5D activations are (N, C, T, H, W). Kernel triples are ordered
(temporal, height, width), so an ``s x s x d`` kernel is
``(d, s, s)`` here. Convolution is cross-correlation (no kernel flip).

Shapes are never broadcast implicitly: elementwise ops need identical
dims (or a Python scalar), and the only broadcast rules are bias over
output channels and per-channel gates over (T, H, W).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, LabelError, NumericError, ShapeError
from .tensor import Tensor, make_node

AXES = ("N", "C", "T", "H", "W")
Triple = Union[int, Sequence[int]]


def triple(v: Triple) -> tuple[int, int, int]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    v = tuple(int(x) for x in v)
    if len(v) != 3:
        raise ConfigError(f"expected an int or a triple, got {v}")
    return v


def _tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=like.dtype if like is not None else None)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand dims {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise and structural
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)

        def bw(g):
            a._accumulate(g)

        return make_node(a.data + a.data.dtype.type(c), (a,), bw, "add_scalar")
    _same_shape(a, b, "add")

    def bw(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return make_node(a.data + b.data, (a, b), bw, "add")


def neg(a: Tensor) -> Tensor:
    return make_node(-a.data, (a,), lambda g: a._accumulate(-g), "neg")


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        return add(a, neg(b))
    return add(a, -float(b))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = a.data.dtype.type(float(b))
        return make_node(a.data * c, (a,), lambda g: a._accumulate(g * c), "mul_scalar")
    _same_shape(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return make_node(a.data * b.data, (a, b), bw, "mul")


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return make_node(
        np.asarray(a.data.sum(), dtype=a.dtype).reshape(1),
        (a,),
        lambda g: a._accumulate(np.broadcast_to(g.reshape(()), a.shape)),
        "sum",
    )


def mean(a: Tensor) -> Tensor:
    n = a.size
    return make_node(
        np.asarray(a.data.mean(), dtype=a.dtype).reshape(1),
        (a,),
        lambda g: a._accumulate(np.broadcast_to(g.reshape(()) / n, a.shape)),
        "mean",
    )


def mean_over(a: Tensor, axes: Sequence[int]) -> Tensor:
    """Mean over ``axes`` (dropped from the result)."""
    axes = tuple(sorted(ax % a.ndim for ax in axes))
    count = int(np.prod([a.shape[ax] for ax in axes]))

    def bw(g):
        a._accumulate(np.broadcast_to(np.expand_dims(g, axes) / count, a.shape))

    return make_node(a.data.mean(axis=axes), (a,), bw, "mean_over")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from exc
    return make_node(out, (a,), lambda g: a._accumulate(g.reshape(a.shape)), "reshape")


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_node(
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: a._accumulate(g.transpose(inverse)),
        "transpose",
    )


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != axis % len(ref)):
            raise ShapeError(f"concat: dims {t.shape} incompatible with {ref} along axis {axis}")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        for t, part in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(part)

    return make_node(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_node(np.maximum(x.data, 0).astype(x.dtype), (x,), lambda g: x._accumulate(g * mask), "relu")


def _sigmoid_array(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(v.dtype)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_array(x.data)
    return make_node(s, (x,), lambda g: x._accumulate(g * s * (1 - s)), "sigmoid")


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# affine / convolution
# ---------------------------------------------------------------------------

def affine(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Row-wise ``x @ weight.T + bias`` for x (N, K), weight (M, K)."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"affine expects 2D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"affine: inner dims differ, input K={x.shape[1]} vs weight K={weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"affine: bias dims {bias.shape} != ({weight.shape[0]},)")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        if x.requires_grad:
            x._accumulate(g @ weight.data)
        if weight.requires_grad:
            weight._accumulate(g.T @ x.data)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, bw, "affine")


@dataclass(frozen=True)
class ConvSpec:
    """Static description of one 3D convolution.

    ``kernel``, ``stride`` and ``padding`` are (temporal, height, width).
    """

    in_channels: int
    out_channels: int
    kernel: tuple[int, int, int]
    stride: tuple[int, int, int] = (1, 1, 1)
    padding: tuple[int, int, int] = (0, 0, 0)
    groups: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kernel", triple(self.kernel))
        object.__setattr__(self, "stride", triple(self.stride))
        object.__setattr__(self, "padding", triple(self.padding))
        if self.groups < 1 or self.in_channels % self.groups or self.out_channels % self.groups:
            raise ConfigError(
                f"groups={self.groups} must divide in_channels={self.in_channels} "
                f"and out_channels={self.out_channels}"
            )
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise ConfigError(f"invalid kernel/stride/padding {self.kernel}/{self.stride}/{self.padding}")

    @property
    def weight_shape(self) -> tuple[int, ...]:
        return (self.out_channels, self.in_channels // self.groups, *self.kernel)

    def out_dims(self, in_dims: Sequence[int]) -> tuple[int, int, int, int]:
        """(C, T, H, W) -> (C', T', H', W'); raises ShapeError naming the axis."""
        c, *ext = in_dims
        if c != self.in_channels:
            raise ShapeError(f"axis C: expected {self.in_channels} input channels, got {c}")
        return (self.out_channels, *_out_extents(ext, self.kernel, self.stride, self.padding))


def _out_extents(ext, kernel, stride, padding) -> tuple[int, int, int]:
    out = []
    for name, n, k, s, p in zip("THW", ext, kernel, stride, padding):
        if n + 2 * p < k:
            raise ShapeError(f"axis {name}: window {k} larger than padded extent {n + 2 * p}")
        out.append((n + 2 * p - k) // s + 1)
    return tuple(out)


def _pad5(a: np.ndarray, padding, value=0.0) -> np.ndarray:
    pt, ph, pw = padding
    if not (pt or ph or pw):
        return a
    return np.pad(a, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)), constant_values=value)


def _windows(xp: np.ndarray, kernel, stride, out_ext) -> np.ndarray:
    """View (N, C, T', H', W', kt, kh, kw) of strided windows."""
    st, sh, sw = stride
    to, ho, wo = out_ext
    win = sliding_window_view(xp, kernel, axis=(2, 3, 4))
    return win[:, :, : (to - 1) * st + 1 : st, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]


def _scatter_windows(dwin: np.ndarray, padded_shape, kernel, stride) -> np.ndarray:
    """Adjoint of :func:`_windows`: sum window gradients back onto the padded input."""
    st, sh, sw = stride
    _, _, to, ho, wo = dwin.shape[:5]
    out = np.zeros(padded_shape, dtype=dwin.dtype)
    kt, kh, kw = kernel
    for a in range(kt):
        for b in range(kh):
            for c in range(kw):
                out[:, :, a : a + (to - 1) * st + 1 : st, b : b + (ho - 1) * sh + 1 : sh, c : c + (wo - 1) * sw + 1 : sw] += dwin[..., a, b, c]
    return out


def _crop(xp: np.ndarray, padding, shape) -> np.ndarray:
    pt, ph, pw = padding
    _, _, t, h, w = shape
    return xp[:, :, pt : pt + t, ph : ph + h, pw : pw + w]


def conv3d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: Triple = 1,
    padding: Triple = 0,
    groups: int = 1,
) -> Tensor:
    """Grouped 3D cross-correlation via im2col and one batched matmul per group.

    x is (N, Cin, T, H, W); weight is (Cout, Cin/groups, kt, kh, kw).
    """
    if x.ndim != 5:
        raise ShapeError(f"conv3d input must be 5D (N,C,T,H,W), got {x.shape}")
    if weight.ndim != 5:
        raise ShapeError(f"conv3d weight must be 5D (Cout,Cin/g,kt,kh,kw), got {weight.shape}")
    n, cin, t, h, w = x.shape
    cout, cg, *kernel = weight.shape
    spec = ConvSpec(cin, cout, tuple(kernel), stride, padding, groups)
    if cg * groups != cin:
        raise ShapeError(f"axis C: weight expects {cg * groups} input channels, input has {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv3d bias dims {bias.shape} != ({cout},)")
    out_ext = _out_extents((t, h, w), spec.kernel, spec.stride, spec.padding)
    to, ho, wo = out_ext
    G, og = groups, cout // groups
    K = cg * int(np.prod(spec.kernel))
    M = n * to * ho * wo

    xp = _pad5(x.data, spec.padding)
    win = _windows(xp, spec.kernel, spec.stride, out_ext)
    cols = (
        win.reshape(n, G, cg, to, ho, wo, *spec.kernel)
        .transpose(1, 0, 3, 4, 5, 2, 6, 7, 8)
        .reshape(G, M, K)
    )
    wmat = weight.data.reshape(G, og, K).transpose(0, 2, 1)
    out = np.matmul(cols, wmat)
    out = np.ascontiguousarray(out.reshape(G, n, to, ho, wo, og).transpose(1, 0, 5, 2, 3, 4)).reshape(n, cout, to, ho, wo)
    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1, 1)

    def bw(g):
        gm = g.reshape(n, G, og, to, ho, wo).transpose(1, 0, 3, 4, 5, 2).reshape(G, M, og)
        if weight.requires_grad:
            dw = np.matmul(cols.transpose(0, 2, 1), gm)
            weight._accumulate(dw.transpose(0, 2, 1).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3, 4)))
        if x.requires_grad:
            dcols = np.matmul(gm, wmat.transpose(0, 2, 1))
            dwin = (
                dcols.reshape(G, n, to, ho, wo, cg, *spec.kernel)
                .transpose(1, 0, 5, 2, 3, 4, 6, 7, 8)
                .reshape(n, cin, to, ho, wo, *spec.kernel)
            )
            dxp = _scatter_windows(dwin, xp.shape, spec.kernel, spec.stride)
            x._accumulate(_crop(dxp, spec.padding, x.shape))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, bw, "conv3d")


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def _pool_setup(x: Tensor, kernel, stride, padding):
    if x.ndim != 5:
        raise ShapeError(f"pooling input must be 5D (N,C,T,H,W), got {x.shape}")
    kernel, padding = triple(kernel), triple(padding)
    stride = kernel if stride is None else triple(stride)
    if any(2 * p > k for p, k in zip(padding, kernel)):
        raise ShapeError(f"padding {padding} must be at most half of kernel {kernel}")
    out_ext = _out_extents(x.shape[2:], kernel, stride, padding)
    return kernel, stride, padding, out_ext


def maxpool3d(x: Tensor, kernel: Triple, stride: Optional[Triple] = None, padding: Triple = 0) -> Tensor:
    """Per-window maximum; padded positions are -inf and never selected."""
    kernel, stride, padding, out_ext = _pool_setup(x, kernel, stride, padding)
    n, c = x.shape[:2]
    xp = _pad5(x.data, padding, value=-np.inf)
    win = _windows(xp, kernel, stride, out_ext)
    flat = win.reshape(*win.shape[:5], -1)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        a, b, e = np.unravel_index(idx, kernel)
        to, ho, wo = out_ext
        tt = np.arange(to).reshape(-1, 1, 1) * stride[0] + a
        hh = np.arange(ho).reshape(1, -1, 1) * stride[1] + b
        ww = np.arange(wo).reshape(1, 1, -1) * stride[2] + e
        _, _, tp, hp, wp = xp.shape
        lin = (tt * hp + hh) * wp + ww + (np.arange(n * c) * tp * hp * wp).reshape(n, c, 1, 1, 1)
        dxp = np.bincount(lin.ravel(), weights=g.ravel(), minlength=xp.size).astype(x.dtype).reshape(xp.shape)
        x._accumulate(_crop(dxp, padding, x.shape))

    return make_node(np.ascontiguousarray(out), (x,), bw, "maxpool3d")


def avgpool3d(x: Tensor, kernel: Triple, stride: Optional[Triple] = None, padding: Triple = 0) -> Tensor:
    """Window mean; the divisor counts only non-padding positions."""
    kernel, stride, padding, out_ext = _pool_setup(x, kernel, stride, padding)
    xp = _pad5(x.data, padding)
    sums = _windows(xp, kernel, stride, out_ext).sum(axis=(-3, -2, -1))
    ones = _pad5(np.ones((1, 1, *x.shape[2:]), dtype=x.dtype), padding)
    counts = _windows(ones, kernel, stride, out_ext).sum(axis=(-3, -2, -1))
    out = sums / counts

    def bw(g):
        gq = (g / counts)[..., None, None, None]
        dwin = np.broadcast_to(gq, (*g.shape, *kernel))
        dxp = _scatter_windows(dwin, xp.shape, kernel, stride)
        x._accumulate(_crop(dxp, padding, x.shape))

    return make_node(out.astype(x.dtype), (x,), bw, "avgpool3d")


# ---------------------------------------------------------------------------
# normalization, gating, loss
# ---------------------------------------------------------------------------

def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over every non-channel axis.

    Train mode uses batch statistics (biased variance) and updates the
    running stats in place with an exponential moving average (unbiased
    variance). Eval mode normalizes with the running stats.
    """
    if x.ndim < 2:
        raise ShapeError(f"batchnorm input needs a channel axis, got {x.shape}")
    c = x.shape[1]
    for name, p in (("gamma", gamma.shape), ("beta", beta.shape), ("running_mean", running_mean.shape),
                    ("running_var", running_var.shape)):
        if p != (c,):
            raise ShapeError(f"batchnorm {name} dims {p} != ({c},)")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    count = x.size // c
    if training:
        if count == 1:
            raise NumericError("batchnorm in train mode over a single element per channel (zero-variance batch)")
        mu = x.data.mean(axis=axes)
        centered = x.data - mu.reshape(bshape)
        var = (centered * centered).mean(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * count / (count - 1)
    else:
        mu, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
        centered = x.data - mu.reshape(bshape)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = centered * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def bw(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(bshape)
            if training:
                s1 = dxhat.sum(axis=axes).reshape(bshape)
                s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
                dx = (dxhat - s1 / count - xhat * s2 / count) * inv_std.reshape(bshape)
            else:
                dx = dxhat * inv_std.reshape(bshape)
            x._accumulate(dx)

    return make_node(out, (x, gamma, beta), bw, "batchnorm")


def scale_channels(x: Tensor, gates: Tensor) -> Tensor:
    """``out[n, c, ...] = gates[n, c] * x[n, c, ...]``."""
    if x.ndim != 5 or gates.ndim != 2 or gates.shape != x.shape[:2]:
        raise ShapeError(f"scale_channels: gates {gates.shape} do not match input (N, C) = {x.shape[:2]}")
    gb = gates.data[:, :, None, None, None]

    def bw(g):
        if x.requires_grad:
            x._accumulate(g * gb)
        if gates.requires_grad:
            gates._accumulate((g * x.data).sum(axis=(2, 3, 4)))

    return make_node(x.data * gb, (x, gates), bw, "scale_channels")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (N, K), got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got {labels.shape[0]}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = (logsum - z[rows, labels]).mean()

    def bw(g):
        p = np.exp(z - logsum[:, None])
        p[rows, labels] -= 1
        logits._accumulate(p * (g.reshape(()) / n))

    return make_node(np.asarray(loss, dtype=logits.dtype).reshape(1), (logits,), bw, "softmax_cross_entropy")
