"""Spatio-temporal channel correlation (STC) gating.

Two gating branches read the same feature map X of dims (N, C, T, H, W):

* the temporal correlation branch (TCB) pools over time and space to a
  C-vector, runs it through a bottleneck ``C -> C/r -> C`` and gates X;
* the spatial correlation branch (SCB) pools over space only to a
  (T*C)-vector, runs it through ``T*C -> T*C/r -> C`` and gates X.

The block output is the mean of the two gated maps. In a residual unit the
gating applies to the conv-path output, and the result is added to the
shortcut.

The SCB descriptor is flattened t-major: entry ``t * C + c`` holds the
spatial mean of channel c at time t. SCB weights are bound to the T they
were built for; any other temporal depth is rejected.
"""

from __future__ import annotations

import enum
from typing import Callable, Optional

import numpy as np

from . import functional as F
from .errors import ConfigError, ShapeError, TemporalShapeError
from .nn import Module, fan_in_uniform
from .tensor import Parameter, Tensor


class BranchMode(str, enum.Enum):
    TCB = "TCB"
    SCB = "SCB"
    BOTH = "BOTH"

    def __str__(self) -> str:
        return self.value

    @classmethod
    def parse(cls, value) -> "BranchMode":
        try:
            return cls(str(value).upper().replace("TCB+SCB", "BOTH"))
        except ValueError:
            raise ConfigError(f"branch mode must be one of TCB, SCB, BOTH; got {value!r}") from None

    @property
    def uses_tcb(self) -> bool:
        return self is not BranchMode.SCB

    @property
    def uses_scb(self) -> bool:
        return self is not BranchMode.TCB


class STCBlockParams(Module):
    """Bottleneck weights of one STC block.

    Weight matrices are stored (out, in): ``tcb_w1`` is (C/r, C), ``tcb_w2``
    is (C, C/r), ``scb_w1`` is (T*C/r, T*C) and ``scb_w2`` is (C, T*C/r).

    ``hidden_activation`` is ``"relu"`` (default) or ``"linear"`` for the
    bare two-matrix composition. ``bypass`` forces every gate to 1 so the
    block becomes the identity (debugging aid).
    """

    def __init__(
        self,
        channels: int,
        temporal_depth: int,
        reduction: int = 4,
        mode=BranchMode.BOTH,
        rng: Optional[np.random.Generator] = None,
        bias: bool = True,
        hidden_activation: str = "relu",
        dtype=np.float32,
        zero: bool = False,
    ):
        C, T, r = int(channels), int(temporal_depth), int(reduction)
        if C < 1 or T < 1 or r < 1:
            raise ConfigError(f"STC block needs positive C, T, r; got C={C}, T={T}, r={r}")
        if C % r:
            raise ConfigError(f"reduction r={r} must divide C={C}")
        if (T * C) % r:
            raise ConfigError(f"reduction r={r} must divide T*C={T * C}")
        if hidden_activation not in ("relu", "linear"):
            raise ConfigError(f"hidden_activation must be 'relu' or 'linear', got {hidden_activation!r}")
        self.C, self.T, self.r = C, T, r
        self.mode = BranchMode.parse(mode)
        self.hidden_activation = hidden_activation
        self.bypass = False
        rng = rng if rng is not None else np.random.default_rng(0)

        def matrix(rows, cols):
            if zero:
                return Parameter(np.zeros((rows, cols), dtype))
            return Parameter(fan_in_uniform(rng, (rows, cols), cols, dtype))

        def vector(n):
            return Parameter(np.zeros(n, dtype), decay=False) if bias else None

        self.tcb_w1 = self.tcb_b1 = self.tcb_w2 = self.tcb_b2 = None
        self.scb_w1 = self.scb_b1 = self.scb_w2 = self.scb_b2 = None
        if self.mode.uses_tcb:
            self.tcb_w1, self.tcb_b1 = matrix(C // r, C), vector(C // r)
            self.tcb_w2, self.tcb_b2 = matrix(C, C // r), vector(C)
        if self.mode.uses_scb:
            hidden = (T * C) // r
            self.scb_w1, self.scb_b1 = matrix(hidden, T * C), vector(hidden)
            self.scb_w2, self.scb_b2 = matrix(C, hidden), vector(C)

    def forward(self, x: Tensor) -> Tensor:
        return stc_forward(x, self)

    def out_dims(self, in_dims):
        c, t = in_dims[0], in_dims[1]
        if c != self.C:
            raise ShapeError(f"axis C: STC block built for C={self.C}, got {c}")
        if self.mode.uses_scb and t != self.T:
            raise TemporalShapeError(f"axis T: SCB weights bound to T={self.T}, got {t}")
        return tuple(in_dims)

    def counts(self) -> dict[str, int]:
        """Parameter counts per branch, split into weights and biases."""
        out = {}
        for branch in ("tcb", "scb"):
            mats = [getattr(self, f"{branch}_w{i}") for i in (1, 2)]
            vecs = [getattr(self, f"{branch}_b{i}") for i in (1, 2)]
            out[f"{branch}_weights"] = sum(m.size for m in mats if m is not None)
            out[f"{branch}_biases"] = sum(v.size for v in vecs if v is not None)
        return out


def _bottleneck(z: Tensor, w1, b1, w2, b2, hidden_activation: str) -> Tensor:
    h = F.affine(z, w1, b1)
    if hidden_activation == "relu":
        h = F.relu(h)
    return F.sigmoid(F.affine(h, w2, b2))


def _check_input(x: Tensor, params: STCBlockParams) -> None:
    if x.ndim != 5:
        raise ShapeError(f"STC input must be (N, C, T, H, W), got {x.shape}")
    if x.shape[1] != params.C:
        raise ShapeError(f"axis C: STC block built for C={params.C}, got {x.shape[1]}")


def tcb_pool(x: Tensor) -> Tensor:
    """Global spatio-temporal mean: (N, C, T, H, W) -> (N, C)."""
    return F.mean_over(x, (2, 3, 4))


def tcb_gate(z: Tensor, params: STCBlockParams) -> Tensor:
    if z.ndim != 2 or z.shape[1] != params.C:
        raise ShapeError(f"TCB descriptor must be (N, {params.C}), got {z.shape}")
    return _bottleneck(z, params.tcb_w1, params.tcb_b1, params.tcb_w2, params.tcb_b2, params.hidden_activation)


def tcb_forward(x: Tensor, params: STCBlockParams) -> Tensor:
    _check_input(x, params)
    return F.scale_channels(x, tcb_gate(tcb_pool(x), params))


def scb_pool(x: Tensor) -> Tensor:
    """Spatial mean per (t, c), flattened t-major: (N, C, T, H, W) -> (N, T*C)."""
    n, c, t = x.shape[:3]
    per_slice = F.mean_over(x, (3, 4))  # (N, C, T)
    return F.reshape(F.transpose(per_slice, (0, 2, 1)), (n, t * c))


def scb_gate(z: Tensor, params: STCBlockParams) -> Tensor:
    expected = params.T * params.C
    if z.ndim != 2 or z.shape[1] != expected:
        if z.ndim == 2 and z.shape[1] % params.C == 0:
            raise TemporalShapeError(
                f"SCB weights are bound to T={params.T}; descriptor implies T={z.shape[1] // params.C}"
            )
        raise ShapeError(f"SCB descriptor must be (N, {expected}), got {z.shape}")
    return _bottleneck(z, params.scb_w1, params.scb_b1, params.scb_w2, params.scb_b2, params.hidden_activation)


def scb_forward(x: Tensor, params: STCBlockParams) -> Tensor:
    _check_input(x, params)
    if x.shape[2] != params.T:
        raise TemporalShapeError(f"SCB weights are bound to T={params.T}, feature map has T={x.shape[2]}")
    return F.scale_channels(x, scb_gate(scb_pool(x), params))


def stc_forward(x: Tensor, params: STCBlockParams) -> Tensor:
    if params.bypass:
        _check_input(x, params)
        return x
    if params.mode is BranchMode.TCB:
        return tcb_forward(x, params)
    if params.mode is BranchMode.SCB:
        return scb_forward(x, params)
    return F.mul(F.add(tcb_forward(x, params), scb_forward(x, params)), 0.5)


def stc_residual_unit(
    x: Tensor,
    conv_path: Callable[[Tensor], Tensor],
    params: Optional[STCBlockParams],
    shortcut: Optional[Callable[[Tensor], Tensor]] = None,
) -> Tensor:
    """``shortcut(x) + stc_forward(conv_path(x))``; identity shortcut when None."""
    residual = conv_path(x)
    if params is not None:
        residual = stc_forward(residual, params)
    skip = x if shortcut is None else shortcut(x)
    if skip.shape != residual.shape:
        raise ShapeError(f"residual dims {residual.shape} do not match shortcut dims {skip.shape}")
    return F.add(skip, residual)
