"""Brute-force references and numeric verification helpers.

Nothing in here calls the fast kernels in :mod:`stcnet.functional`. The
references loop element by element in 64-bit Python floats and are meant
to be slow and obviously correct.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, NumericError, ShapeError


def _as64(a) -> np.ndarray:
    if a is None:
        return None
    data = getattr(a, "data", a)
    return np.asarray(data, dtype=np.float64)


def _trip(v) -> tuple[int, int, int]:
    return (v, v, v) if isinstance(v, int) else tuple(v)


# ---------------------------------------------------------------------------
# references
# ---------------------------------------------------------------------------

def conv3d_reference(x, weight, bias=None, stride=1, padding=0, groups=1) -> np.ndarray:
    x, weight, bias = _as64(x), _as64(weight), _as64(bias)
    n_batch, cin, T, H, W = x.shape
    cout, cg, kt, kh, kw = weight.shape
    if cin % groups or cout % groups:
        raise ConfigError(f"groups={groups} must divide {cin} and {cout}")
    if cg * groups != cin:
        raise ShapeError(f"axis C: weight expects {cg * groups} input channels, got {cin}")
    st, sh, sw = _trip(stride)
    pt, ph, pw = _trip(padding)
    To = (T + 2 * pt - kt) // st + 1
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    if min(To, Ho, Wo) < 1:
        raise ShapeError("output extent below 1")
    og = cout // groups
    xl = x.tolist()
    wl = weight.tolist()
    out = np.zeros((n_batch, cout, To, Ho, Wo))
    for n in range(n_batch):
        for co in range(cout):
            g = co // og
            for t in range(To):
                for h in range(Ho):
                    for w in range(Wo):
                        acc = 0.0 if bias is None else float(bias[co])
                        for ci in range(cg):
                            plane = xl[n][g * cg + ci]
                            kern = wl[co][ci]
                            for a in range(kt):
                                ti = t * st + a - pt
                                if ti < 0 or ti >= T:
                                    continue
                                for b in range(kh):
                                    hi = h * sh + b - ph
                                    if hi < 0 or hi >= H:
                                        continue
                                    for c in range(kw):
                                        wi = w * sw + c - pw
                                        if 0 <= wi < W:
                                            acc += plane[ti][hi][wi] * kern[a][b][c]
                        out[n, co, t, h, w] = acc
    return out


def _pool_reference(x, kernel, stride, padding, reducer) -> np.ndarray:
    x = _as64(x)
    N, C, T, H, W = x.shape
    kt, kh, kw = _trip(kernel)
    st, sh, sw = _trip(kernel if stride is None else stride)
    pt, ph, pw = _trip(padding)
    To = (T + 2 * pt - kt) // st + 1
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    out = np.zeros((N, C, To, Ho, Wo))
    for n in range(N):
        for c in range(C):
            for t in range(To):
                for h in range(Ho):
                    for w in range(Wo):
                        vals = []
                        for a in range(kt):
                            for b in range(kh):
                                for e in range(kw):
                                    ti, hi, wi = t * st + a - pt, h * sh + b - ph, w * sw + e - pw
                                    if 0 <= ti < T and 0 <= hi < H and 0 <= wi < W:
                                        vals.append(float(x[n, c, ti, hi, wi]))
                        out[n, c, t, h, w] = reducer(vals)
    return out


def maxpool3d_reference(x, kernel, stride=None, padding=0) -> np.ndarray:
    return _pool_reference(x, kernel, stride, padding, max)


def avgpool3d_reference(x, kernel, stride=None, padding=0) -> np.ndarray:
    return _pool_reference(x, kernel, stride, padding, lambda v: math.fsum(v) / len(v))


def matmul_reference(a, b) -> np.ndarray:
    a, b = _as64(a), _as64(b)
    n, k = a.shape
    k2, m = b.shape
    if k != k2:
        raise ShapeError(f"inner dims differ: {k} vs {k2}")
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for p in range(k):
                acc += float(a[i, p]) * float(b[p, j])
            out[i, j] = acc
    return out


def affine_reference(x, weight, bias=None) -> np.ndarray:
    out = matmul_reference(x, _as64(weight).T)
    if bias is not None:
        out = out + _as64(bias)[None, :]
    return out


def batchnorm_reference(x, gamma, beta, eps=1e-5) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Train-mode batch norm with a plain two-pass mean/variance per channel.

    Returns (output, batch mean, biased batch variance).
    """
    x, gamma, beta = _as64(x), _as64(gamma), _as64(beta)
    C = x.shape[1]
    moved = np.moveaxis(x, 1, 0).reshape(C, -1)
    out = np.empty_like(moved)
    means, variances = np.zeros(C), np.zeros(C)
    for c in range(C):
        vals = moved[c].tolist()
        m = math.fsum(vals) / len(vals)
        v = math.fsum((u - m) ** 2 for u in vals) / len(vals)
        means[c], variances[c] = m, v
        denom = math.sqrt(v + eps)
        out[c] = [gamma[c] * (u - m) / denom + beta[c] for u in vals]
    shape = (C, x.shape[0]) + x.shape[2:]
    return np.moveaxis(out.reshape(shape), 0, 1), means, variances


def sigmoid_reference(v: float) -> float:
    return 1.0 / (1.0 + math.exp(-v))


def scale_channels_reference(x, gates) -> np.ndarray:
    x, gates = _as64(x), _as64(gates)
    out = np.empty_like(x)
    N, C = x.shape[:2]
    for n in range(N):
        for c in range(C):
            out[n, c] = x[n, c] * float(gates[n, c])
    return out


def softmax_cross_entropy_reference(logits, labels) -> float:
    logits = _as64(logits)
    total = 0.0
    for row, y in zip(logits.tolist(), np.asarray(labels).tolist()):
        denom = math.fsum(math.exp(v) for v in row)
        total += -math.log(math.exp(row[y]) / denom)
    return total / len(logits)


def spatiotemporal_mean_reference(x) -> np.ndarray:
    """(N, C, T, H, W) -> (N, C): mean over every (t, h, w)."""
    x = _as64(x)
    N, C = x.shape[:2]
    out = np.zeros((N, C))
    for n in range(N):
        for c in range(C):
            out[n, c] = math.fsum(x[n, c].ravel().tolist()) / x[n, c].size
    return out


def spatial_mean_reference(x) -> np.ndarray:
    """(N, C, T, H, W) -> (N, T*C), t-major: index t*C + c."""
    x = _as64(x)
    N, C, T = x.shape[:3]
    out = np.zeros((N, T * C))
    for n in range(N):
        for t in range(T):
            for c in range(C):
                plane = x[n, c, t]
                out[n, t * C + c] = math.fsum(plane.ravel().tolist()) / plane.size
    return out


def gate_reference(z, w1, b1, w2, b2, hidden="relu") -> np.ndarray:
    """sigmoid(W2 act(W1 z + b1) + b2) with naive matmuls."""
    h = affine_reference(z, w1, b1)
    if hidden == "relu":
        h = np.maximum(h, 0.0)
    s = affine_reference(h, w2, b2)
    return np.vectorize(sigmoid_reference)(s)


def stc_reference(x, params) -> np.ndarray:
    """Composed oracle of both branches and their fusion, from raw weights.

    ``params`` needs attributes mode, tcb_*/scb_* weights and biases,
    hidden activation name, and T.
    """
    x = _as64(x)
    mode = str(params.mode)
    hidden = params.hidden_activation

    def arr(name):
        t = getattr(params, name)
        return None if t is None else _as64(t)

    outs = []
    if mode in ("TCB", "BOTH"):
        s = gate_reference(spatiotemporal_mean_reference(x), arr("tcb_w1"), arr("tcb_b1"), arr("tcb_w2"),
                           arr("tcb_b2"), hidden)
        outs.append(scale_channels_reference(x, s))
    if mode in ("SCB", "BOTH"):
        s = gate_reference(spatial_mean_reference(x), arr("scb_w1"), arr("scb_b1"), arr("scb_w2"),
                           arr("scb_b2"), hidden)
        outs.append(scale_channels_reference(x, s))
    if len(outs) == 2:
        return (outs[0] + outs[1]) / 2
    return outs[0]


# ---------------------------------------------------------------------------
# finite differences and comparison
# ---------------------------------------------------------------------------

def finite_diff_grad(f: Callable[[np.ndarray], float], x, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (64-bit)."""
    x = np.array(_as64(x), copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(x))
        flat[i] = orig - step
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError(f"non-finite function value while differencing coordinate {i}")
        gflat[i] = (fp - fm) / (2 * step)
    return grad


def relative_error(a, b, floor: float = 1e-8) -> np.ndarray:
    a, b = _as64(a), _as64(b)
    return np.abs(a - b) / np.maximum(floor, np.maximum(np.abs(a), np.abs(b)))


@dataclass(frozen=True)
class Tolerance:
    abs: float = 0.0
    rel: float = 0.0
    norm: str = "max"

    def __post_init__(self):
        if self.abs < 0 or self.rel < 0 or (self.abs == 0 and self.rel == 0):
            raise ConfigError("tolerance needs nonnegative abs/rel with at least one positive")
        if self.norm not in ("max", "l2"):
            raise ConfigError(f"unknown norm {self.norm!r}")


@dataclass
class Comparison:
    passed: bool
    index: Optional[int]
    a_value: float
    b_value: float
    abs_error: float
    rel_error: float

    def __bool__(self) -> bool:
        return self.passed


def compare(a, b, tol: Tolerance) -> Comparison:
    """Check ``|a - b| <= abs + rel * max(|a|, |b|)`` and report the worst element.

    With ``norm='l2'`` the criterion is applied to vector norms instead of
    element by element; the worst element is still reported.
    """
    a, b = _as64(a), _as64(b)
    if a.shape != b.shape:
        raise ShapeError(f"compare: dims {a.shape} vs {b.shape}")
    fa, fb = a.reshape(-1), b.reshape(-1)
    diff = np.abs(fa - fb)
    allowed = tol.abs + tol.rel * np.maximum(np.abs(fa), np.abs(fb))
    if diff.size == 0:
        return Comparison(True, None, 0.0, 0.0, 0.0, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        excess = np.where(allowed > 0, diff / allowed, np.where(diff > 0, np.inf, 0.0))
    excess = np.where(np.isnan(diff), np.inf, excess)
    worst = int(np.argmax(excess))
    if tol.norm == "max":
        passed = bool(np.all(diff <= allowed))
    else:
        d = float(np.linalg.norm(fa - fb))
        passed = d <= tol.abs + tol.rel * max(float(np.linalg.norm(fa)), float(np.linalg.norm(fb)))
    return Comparison(
        passed,
        worst,
        float(fa[worst]),
        float(fb[worst]),
        float(diff[worst]),
        float(relative_error(fa[worst], fb[worst])),
    )


# ---------------------------------------------------------------------------
# gradient checking and parameter recount
# ---------------------------------------------------------------------------

@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    size: int

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def check_gradients(loss_fn: Callable[[], object], leaves: dict, step: float = 1e-5) -> list[GradCheckResult]:
    """Compare backward() gradients with central differences for each leaf.

    ``loss_fn`` rebuilds the graph from the current leaf values and returns a
    scalar tensor; ``leaves`` maps names to float64 requires-grad tensors.
    """
    for t in leaves.values():
        t.grad = None
    root = loss_fn()
    root.backward()
    analytic = {k: np.array(t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}
    results = []
    for name, t in leaves.items():
        original = t.data.copy()

        def f(values, t=t):
            t.data[...] = values
            return loss_fn().data.reshape(-1)[0]

        numeric = finite_diff_grad(f, original, step)
        t.data[...] = original
        err = float(relative_error(analytic[name], numeric).max())
        results.append(GradCheckResult(name, err, t.size))
    return results


def recount_parameters(root) -> int:
    """Count parameter scalars by walking object attributes.

    Independent of any registry: visits ``vars()`` recursively (lists,
    tuples and dicts included) and counts each distinct requires-grad
    ``.data`` array once.
    """
    seen_objs: set[int] = set()
    seen_params: set[int] = set()
    total = 0
    stack = [root]
    while stack:
        obj = stack.pop()
        if id(obj) in seen_objs:
            continue
        seen_objs.add(id(obj))
        if isinstance(obj, np.ndarray) or obj is None or isinstance(obj, (str, int, float, bool)):
            continue
        if isinstance(obj, (list, tuple)):
            stack.extend(obj)
            continue
        if isinstance(obj, dict):
            stack.extend(obj.values())
            continue
        data = getattr(obj, "data", None)
        if isinstance(data, np.ndarray) and getattr(obj, "requires_grad", False) is True:
            if id(obj) not in seen_params:
                seen_params.add(id(obj))
                total += int(data.size)
            continue
        if hasattr(obj, "__dict__"):
            stack.extend(vars(obj).values())
    return total


def expected_conv_output(in_extent: int, kernel: int, stride: int, padding: int) -> int:
    return (in_extent + 2 * padding - kernel) // stride + 1


def symbolic_extents(input_thw: Sequence[int], layers) -> list[tuple[int, ...]]:
    """Propagate (T, H, W) through a sequence of (kernel, stride, padding) triples."""
    dims = tuple(input_thw)
    out = []
    for k, s, p in layers:
        dims = tuple(expected_conv_output(d, *kp) for d, kp in zip(dims, zip(_trip(k), _trip(s), _trip(p))))
        out.append(dims)
    return out
