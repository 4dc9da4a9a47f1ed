"""Finite-difference checks of every differentiable op and the STC block.

Each target builds a small random 64-bit problem, reduces the op output to
a scalar through a fixed random weighting (so no gradient is trivially
uniform), and compares backward() against central differences.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import functional as F
from .oracle import GradCheckResult, check_gradients
from .stc import BranchMode, STCBlockParams, stc_forward
from .tensor import Tensor

STC_DIMS = (2, 8, 4, 5, 5)


def _leaf(rng, shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True, dtype=np.float64)


def _weighted(out: Tensor, weights: np.ndarray) -> Tensor:
    return F.sum(F.mul(out, Tensor(weights, dtype=np.float64)))


def _run(rng, build: Callable[[dict], Tensor], leaves: dict) -> list[GradCheckResult]:
    probe = build(leaves)
    w = rng.standard_normal(probe.shape)
    return check_gradients(lambda: _weighted(build(leaves), w), leaves)


def _elementwise(seed):
    rng = np.random.default_rng(seed)
    leaves = {"a": _leaf(rng, (2, 3, 4)), "b": _leaf(rng, (2, 3, 4))}
    out = []
    for name, fn in {
        "add": lambda l: F.add(l["a"], l["b"]),
        "sub": lambda l: F.sub(l["a"], l["b"]),
        "mul": lambda l: F.mul(l["a"], l["b"]),
        "neg": lambda l: F.add(F.neg(l["a"]), F.mul(l["b"], 2.5)),
    }.items():
        out += [GradCheckResult(f"{name}.{r.name}", r.max_rel_error, r.size) for r in _run(rng, fn, leaves)]
    return out


def _reductions(seed):
    rng = np.random.default_rng(seed)
    leaves = {"x": _leaf(rng, (2, 3, 2, 3, 2))}
    cases = {
        "sum": lambda l: F.mul(F.sum(F.mul(l["x"], l["x"])), 0.5),
        "mean": lambda l: F.mul(F.mean(F.mul(l["x"], l["x"])), 3.0),
        "mean_over": lambda l: F.mean_over(l["x"], (2, 3, 4)),
        "reshape": lambda l: F.reshape(l["x"], (6, 12)),
        "transpose": lambda l: F.transpose(l["x"], (0, 2, 1, 4, 3)),
        "flatten": lambda l: F.flatten(l["x"]),
    }
    out = []
    for name, fn in cases.items():
        out += [GradCheckResult(f"{name}.{r.name}", r.max_rel_error, r.size) for r in _run(rng, fn, leaves)]
    return out


def _concat(seed):
    rng = np.random.default_rng(seed)
    leaves = {"a": _leaf(rng, (3, 2)), "b": _leaf(rng, (3, 5))}
    return [GradCheckResult(f"concat.{r.name}", r.max_rel_error, r.size)
            for r in _run(rng, lambda l: F.concat([l["a"], l["b"]], axis=1), leaves)]


def _activations(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((4, 6))
    x[np.abs(x) < 0.05] += 0.2  # keep relu probes off the kink
    leaves = {"x": Tensor(x, requires_grad=True, dtype=np.float64)}
    out = []
    for name, fn in {"relu": lambda l: F.relu(l["x"]), "sigmoid": lambda l: F.sigmoid(l["x"])}.items():
        out += [GradCheckResult(f"{name}.{r.name}", r.max_rel_error, r.size) for r in _run(rng, fn, leaves)]
    return out


def _affine(seed):
    rng = np.random.default_rng(seed)
    leaves = {"x": _leaf(rng, (3, 5)), "w": _leaf(rng, (4, 5)), "b": _leaf(rng, (4,))}
    return [GradCheckResult(f"affine.{r.name}", r.max_rel_error, r.size)
            for r in _run(rng, lambda l: F.affine(l["x"], l["w"], l["b"]), leaves)]


def _conv3d(seed):
    rng = np.random.default_rng(seed)
    out = []
    for groups, stride, padding in ((1, 1, 1), (2, (1, 2, 2), (0, 1, 1)), (4, 2, 0)):
        leaves = {"x": _leaf(rng, (2, 4, 4, 5, 5)), "w": _leaf(rng, (4, 4 // groups, 2, 3, 3)),
                  "b": _leaf(rng, (4,))}
        fn = lambda l, g=groups, s=stride, p=padding: F.conv3d(l["x"], l["w"], l["b"], s, p, g)
        out += [GradCheckResult(f"conv3d[g={groups}].{r.name}", r.max_rel_error, r.size)
                for r in _run(rng, fn, leaves)]
    return out


def _pooling(seed):
    rng = np.random.default_rng(seed)
    # distinct, well-separated values so max positions are stable under +-h
    x = rng.permutation(2 * 2 * 4 * 4 * 4).reshape(2, 2, 4, 4, 4) * 0.01
    leaves = {"x": Tensor(x, requires_grad=True, dtype=np.float64)}
    out = []
    for name, fn in {
        "maxpool3d": lambda l: F.maxpool3d(l["x"], (2, 3, 3), (1, 2, 2), (1, 1, 1)),
        "avgpool3d": lambda l: F.avgpool3d(l["x"], (2, 3, 3), (1, 2, 2), (1, 1, 1)),
    }.items():
        out += [GradCheckResult(f"{name}.{r.name}", r.max_rel_error, r.size) for r in _run(rng, fn, leaves)]
    return out


def _batchnorm(seed):
    rng = np.random.default_rng(seed)
    leaves = {"x": _leaf(rng, (3, 2, 2, 3, 3)), "gamma": _leaf(rng, (2,)), "beta": _leaf(rng, (2,))}

    def fn(l):
        rm, rv = np.zeros(2), np.ones(2)
        return F.batchnorm(l["x"], l["gamma"], l["beta"], rm, rv, training=True)

    return [GradCheckResult(f"batchnorm.{r.name}", r.max_rel_error, r.size) for r in _run(rng, fn, leaves)]


def _scale_channels(seed):
    rng = np.random.default_rng(seed)
    leaves = {"x": _leaf(rng, (2, 3, 2, 3, 3)), "g": _leaf(rng, (2, 3))}
    return [GradCheckResult(f"scale_channels.{r.name}", r.max_rel_error, r.size)
            for r in _run(rng, lambda l: F.scale_channels(l["x"], l["g"]), leaves)]


def _cross_entropy(seed):
    rng = np.random.default_rng(seed)
    leaves = {"logits": _leaf(rng, (5, 4), 2.0)}
    labels = rng.integers(0, 4, size=5)
    return [GradCheckResult(f"softmax_cross_entropy.{r.name}", r.max_rel_error, r.size)
            for r in check_gradients(lambda: F.softmax_cross_entropy(leaves["logits"], labels), leaves)]


def stc_block_check(seed: int = 0, dims=STC_DIMS, mode=BranchMode.BOTH, reduction: int = 4) -> list[GradCheckResult]:
    """Full STC block (both branches, biases, ReLU hidden layer) at ``dims``."""
    rng = np.random.default_rng(seed)
    n, c, t, h, w = dims
    params = STCBlockParams(c, t, reduction, mode, rng, bias=True, dtype=np.float64)
    for p in params.parameters():
        p.data[...] = rng.standard_normal(p.shape) * 0.5
    leaves = {"x": _leaf(rng, dims)}
    leaves.update({name: p for name, p in params.named_parameters()})
    weights = rng.standard_normal(dims)
    return [GradCheckResult(f"stc-block.{r.name}", r.max_rel_error, r.size)
            for r in check_gradients(lambda: _weighted(stc_forward(leaves["x"], params), weights), leaves)]


TARGETS: dict[str, Callable[[int], list[GradCheckResult]]] = {
    "elementwise": _elementwise,
    "reductions": _reductions,
    "concat": _concat,
    "activations": _activations,
    "affine": _affine,
    "conv3d": _conv3d,
    "pooling": _pooling,
    "batchnorm": _batchnorm,
    "scale-channels": _scale_channels,
    "cross-entropy": _cross_entropy,
    "stc-block": stc_block_check,
}


def run(target: str = "all", seed: int = 0) -> list[GradCheckResult]:
    names = list(TARGETS) if target == "all" else [target]
    out = []
    for name in names:
        out += TARGETS[name](seed)
    return out
