"""Declarative 3D-ResNet / STC-ResNet / STC-ResNext construction.

Every residual unit is pre-activation (BN-ReLU-Conv). Bottleneck units run
1x1x1 -> 3x3x3 (grouped for ResNext) -> 1x1x1; depth-18 models use basic
two-conv units. For the stc-* families each unit's conv-path output is gated
by an STC block before it is added to the shortcut.

Shape tuples in this module are (C, T, H, W) unless stated otherwise; the
Table-style report uses (H, W, T).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import functional as F
from .errors import ConfigError, ShapeError
from .functional import ConvSpec
from .nn import BatchNorm, Conv3d, Linear, Module
from .stc import BranchMode, STCBlockParams, stc_residual_unit
from .tensor import Parameter, Tensor

FAMILIES = ("resnet3d", "stc-resnet", "stc-resnext")
DEPTH_BLOCKS = {18: (2, 2, 2, 2), 50: (3, 4, 6, 3), 101: (3, 4, 23, 3)}
DTYPES = {"float32": np.float32, "float64": np.float64}

# Output sizes (H, W, T) for the 101-layer presets on a 3x16x112x112 clip.
REFERENCE_INPUT = (3, 16, 112, 112)
REFERENCE_OUTPUT_SIZES = {
    "conv1": (56, 56, 8),
    "pool": (56, 56, 8),
    "res1": (28, 28, 8),
    "res2": (14, 14, 4),
    "res3": (7, 7, 2),
    "res4": (4, 4, 1),
    "classifier": (1, 1, 1),
}


@dataclass
class ArchConfig:
    family: str = "stc-resnet"
    blocks: tuple = (1, 1, 1, 1)
    block_type: str = "bottleneck"
    widths: tuple = (8, 16, 32, 64)
    inner_widths: Optional[tuple] = None
    cardinality: int = 1
    reduction: int = 4
    branch_mode: str = "BOTH"
    input_dims: tuple = (1, 8, 16, 16)
    num_classes: int = 4
    stem_width: int = 8
    stem_kernel: tuple = (3, 3, 3)
    stem_stride: tuple = (1, 2, 2)
    stem_padding: tuple = (1, 1, 1)
    pool_kernel: tuple = (3, 3, 3)
    pool_stride: tuple = (1, 1, 1)
    pool_padding: tuple = (1, 1, 1)
    stage_strides: tuple = ((1, 2), (2, 2), (2, 2), (2, 2))
    stc_bias: bool = True
    hidden_activation: str = "relu"
    gate_bypass: bool = False
    dtype: str = "float32"
    name: str = "custom"

    def __post_init__(self):
        self.blocks = tuple(int(b) for b in self.blocks)
        self.widths = tuple(int(w) for w in self.widths)
        if self.inner_widths is None:
            div = 2 if self.family == "stc-resnext" else 4
            self.inner_widths = tuple(max(1, w // div) for w in self.widths) if self.block_type == "bottleneck" \
                else self.widths
        self.inner_widths = tuple(int(w) for w in self.inner_widths)
        self.input_dims = tuple(int(d) for d in self.input_dims)
        self.stage_strides = tuple(tuple(int(v) for v in s) for s in self.stage_strides)
        for key in ("stem_kernel", "stem_stride", "stem_padding", "pool_kernel", "pool_stride", "pool_padding"):
            setattr(self, key, F.triple(getattr(self, key)))
        self.branch_mode = str(BranchMode.parse(self.branch_mode))

    @property
    def has_stc(self) -> bool:
        return self.family in ("stc-resnet", "stc-resnext")

    def validate(self) -> None:
        def bad(name, why):
            raise ConfigError(f"arch.{name}: {why}")

        if self.family not in FAMILIES:
            bad("family", f"must be one of {FAMILIES}, got {self.family!r}")
        if self.block_type not in ("bottleneck", "basic"):
            bad("block_type", f"must be 'bottleneck' or 'basic', got {self.block_type!r}")
        if len(self.blocks) != 4 or min(self.blocks) < 1:
            bad("blocks", f"need 4 positive block counts, got {self.blocks}")
        if len(self.widths) != 4 or min(self.widths) < 1:
            bad("widths", f"need 4 positive stage widths, got {self.widths}")
        if len(self.inner_widths) != 4 or min(self.inner_widths) < 1:
            bad("inner_widths", f"need 4 positive widths, got {self.inner_widths}")
        if self.cardinality < 1:
            bad("cardinality", "must be positive")
        for w in self.inner_widths:
            if w % self.cardinality:
                bad("cardinality", f"{self.cardinality} does not divide 3x3x3 width {w}")
        if self.family == "resnet3d" and self.cardinality != 1:
            bad("cardinality", "resnet3d uses cardinality 1")
        if len(self.input_dims) != 4 or min(self.input_dims) < 1:
            bad("input_dims", f"need positive (C, T, H, W), got {self.input_dims}")
        if self.num_classes < 1:
            bad("num_classes", "must be positive")
        if self.reduction < 1:
            bad("reduction", "must be positive")
        if len(self.stage_strides) != 4 or any(len(s) != 2 or min(s) < 1 for s in self.stage_strides):
            bad("stage_strides", f"need 4 positive (temporal, spatial) pairs, got {self.stage_strides}")
        if self.hidden_activation not in ("relu", "linear"):
            bad("hidden_activation", f"must be 'relu' or 'linear', got {self.hidden_activation!r}")
        if self.dtype not in DTYPES:
            bad("dtype", f"must be one of {tuple(DTYPES)}, got {self.dtype!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(payload.encode()).hexdigest()

    def replace(self, **changes) -> "ArchConfig":
        data = self.to_dict()
        data.update(changes)
        if "widths" in changes and "inner_widths" not in changes:
            data["inner_widths"] = None
        if "family" in changes and "inner_widths" not in changes and self.name.startswith("toy"):
            data["inner_widths"] = None
        return ArchConfig(**data)


def _full_preset(family: str, depth: int) -> ArchConfig:
    basic = depth == 18
    widths = (64, 128, 256, 512) if basic else (256, 512, 1024, 2048)
    inner = widths if basic else (64, 128, 256, 512)
    cardinality = 1
    if family == "stc-resnext":
        inner, cardinality = (128, 256, 512, 512), 32
    return ArchConfig(
        family=family,
        blocks=DEPTH_BLOCKS[depth],
        block_type="basic" if basic else "bottleneck",
        widths=widths,
        inner_widths=inner,
        cardinality=cardinality,
        reduction=16 if depth == 101 else 4,
        input_dims=REFERENCE_INPUT,
        num_classes=400,
        stem_width=64,
        stem_kernel=(7, 7, 7),
        stem_stride=(2, 2, 2),
        stem_padding=(3, 3, 3),
        name=f"{family}-{depth}",
    )


def _toy_preset(family: str) -> ArchConfig:
    return ArchConfig(
        family=family,
        blocks=(1, 1, 1, 1),
        widths=(8, 16, 32, 64),
        cardinality=4 if family == "stc-resnext" else 1,
        name=f"toy-{family}",
    )


def toy_depth_preset(family: str, depth: int) -> ArchConfig:
    """Toy-width model with the block structure of a given depth preset."""
    cfg = _toy_preset(family)
    basic = depth == 18
    return cfg.replace(
        blocks=DEPTH_BLOCKS[depth],
        block_type="basic" if basic else "bottleneck",
        inner_widths=cfg.widths if basic else None,
        name=f"toy-{family}-{depth}",
    )


PRESETS = {
    **{f"resnet3d-{d}": (lambda d=d: _full_preset("resnet3d", d)) for d in (18, 50, 101)},
    **{f"stc-resnet-{d}": (lambda d=d: _full_preset("stc-resnet", d)) for d in (18, 50, 101)},
    "stc-resnext-101": lambda: _full_preset("stc-resnext", 101),
    "toy-stc-resnet": lambda: _toy_preset("stc-resnet"),
    "toy-stc-resnext": lambda: _toy_preset("stc-resnext"),
    "toy-resnet3d": lambda: _toy_preset("resnet3d"),
}


def preset(name: str, **overrides) -> ArchConfig:
    if name not in PRESETS:
        raise ConfigError(f"arch.preset: unknown preset {name!r}; known: {', '.join(PRESETS)}")
    cfg = PRESETS[name]()
    return cfg.replace(**overrides) if overrides else cfg


# ---------------------------------------------------------------------------
# residual units
# ---------------------------------------------------------------------------

def _relu_bn(bn: BatchNorm, x: Tensor) -> Tensor:
    return F.relu(bn(x))


class Bottleneck(Module):
    def __init__(self, in_ch, inner, out_ch, stride, groups, stc, rng, dtype):
        st, ss = stride
        s3 = (st, ss, ss)
        self.bn1 = BatchNorm(in_ch, dtype)
        self.conv1 = Conv3d(ConvSpec(in_ch, inner, 1), rng, dtype=dtype)
        self.bn2 = BatchNorm(inner, dtype)
        self.conv2 = Conv3d(ConvSpec(inner, inner, 3, s3, 1, groups), rng, dtype=dtype)
        self.bn3 = BatchNorm(inner, dtype)
        self.conv3 = Conv3d(ConvSpec(inner, out_ch, 1), rng, dtype=dtype)
        self.shortcut = Conv3d(ConvSpec(in_ch, out_ch, 1, s3), rng, dtype=dtype) \
            if (s3 != (1, 1, 1) or in_ch != out_ch) else None
        self.stc = stc

    def conv_path(self, h: Tensor) -> Tensor:
        h = self.conv1(h)
        h = self.conv2(_relu_bn(self.bn2, h))
        return self.conv3(_relu_bn(self.bn3, h))

    def forward(self, x: Tensor) -> Tensor:
        h = _relu_bn(self.bn1, x)
        skip = self.shortcut(h) if self.shortcut is not None else x
        return stc_residual_unit(h, self.conv_path, self.stc, shortcut=lambda _: skip)

    def out_dims(self, in_dims):
        d = self.conv3.out_dims(self.conv2.out_dims(self.conv1.out_dims(in_dims)))
        skip = self.shortcut.out_dims(in_dims) if self.shortcut is not None else tuple(in_dims)
        if d != skip:
            raise ShapeError(f"conv path dims {d} != shortcut dims {skip}")
        return self.stc.out_dims(d) if self.stc is not None else d


class BasicBlock(Module):
    def __init__(self, in_ch, inner, out_ch, stride, groups, stc, rng, dtype):
        st, ss = stride
        s3 = (st, ss, ss)
        self.bn1 = BatchNorm(in_ch, dtype)
        self.conv1 = Conv3d(ConvSpec(in_ch, out_ch, 3, s3, 1, groups), rng, dtype=dtype)
        self.bn2 = BatchNorm(out_ch, dtype)
        self.conv2 = Conv3d(ConvSpec(out_ch, out_ch, 3, 1, 1, groups), rng, dtype=dtype)
        self.shortcut = Conv3d(ConvSpec(in_ch, out_ch, 1, s3), rng, dtype=dtype) \
            if (s3 != (1, 1, 1) or in_ch != out_ch) else None
        self.stc = stc

    def conv_path(self, h: Tensor) -> Tensor:
        return self.conv2(_relu_bn(self.bn2, self.conv1(h)))

    def forward(self, x: Tensor) -> Tensor:
        h = _relu_bn(self.bn1, x)
        skip = self.shortcut(h) if self.shortcut is not None else x
        return stc_residual_unit(h, self.conv_path, self.stc, shortcut=lambda _: skip)

    def out_dims(self, in_dims):
        d = self.conv2.out_dims(self.conv1.out_dims(in_dims))
        skip = self.shortcut.out_dims(in_dims) if self.shortcut is not None else tuple(in_dims)
        if d != skip:
            raise ShapeError(f"conv path dims {d} != shortcut dims {skip}")
        return self.stc.out_dims(d) if self.stc is not None else d


class _MaxPool(Module):
    def __init__(self, kernel, stride, padding):
        self.kernel, self.stride, self.padding = kernel, stride, padding

    def forward(self, x):
        return F.maxpool3d(x, self.kernel, self.stride, self.padding)

    def out_dims(self, in_dims):
        c, *ext = in_dims
        return (c, *F._out_extents(ext, self.kernel, self.stride, self.padding))


class ModelGraph(Module):
    """A built network: ordered layers, named parameter registry, static dims.

    ``layers`` lists top-level units in execution order; ``registry`` maps
    unique dotted names to parameters; ``static_dims`` maps layer names to
    their (C, T, H, W) output for ``config.input_dims``.
    """

    def __init__(self, config: ArchConfig, seed: int = 0):
        config.validate()
        self.config = config
        dtype = DTYPES[config.dtype]
        rng = np.random.default_rng(seed)
        c_in = config.input_dims[0]

        self.stem = Conv3d(ConvSpec(c_in, config.stem_width, config.stem_kernel, config.stem_stride,
                                    config.stem_padding), rng, dtype=dtype)
        self.stem_bn = BatchNorm(config.stem_width, dtype)
        self.pool = _MaxPool(config.pool_kernel, config.pool_stride, config.pool_padding)

        # temporal depth per stage is needed up front to size SCB weights
        dims = self._stem_dims(config.input_dims)
        self.stages: list[list[Module]] = []
        block_cls = Bottleneck if config.block_type == "bottleneck" else BasicBlock
        in_ch = config.stem_width
        for s, (n_blocks, width, inner, stride) in enumerate(
            zip(config.blocks, config.widths, config.inner_widths, config.stage_strides)
        ):
            stage = []
            for b in range(n_blocks):
                blk_stride = stride if b == 0 else (1, 1)
                st, ss = blk_stride
                t_out = F._out_extents(dims[1:], (3, 3, 3), (st, ss, ss), (1, 1, 1))[0]
                if t_out < 1:
                    raise ConfigError(f"stage {s + 1}: temporal depth collapses below 1")
                stc = None
                if config.has_stc:
                    stc = STCBlockParams(width, t_out, config.reduction, config.branch_mode, rng,
                                         config.stc_bias, config.hidden_activation, dtype)
                    stc.bypass = config.gate_bypass
                block = block_cls(in_ch, inner, width, blk_stride,
                                  config.cardinality if config.block_type == "bottleneck" else 1, stc, rng, dtype)
                try:
                    dims = block.out_dims(dims)
                except ShapeError as exc:
                    raise ShapeError(f"res{s + 1}.{b}: {exc}") from None
                stage.append(block)
                in_ch = width
            self.stages.append(stage)
        self.final_bn = BatchNorm(in_ch, dtype)
        self.fc = Linear(in_ch, config.num_classes, rng, dtype=dtype)
        self.registry: dict[str, Parameter] = {}
        for name, p in self.named_parameters():
            p.name = name
            self.registry[name] = p
        self.static_dims = dict(self.propagate(config.input_dims))

    # -- structure ------------------------------------------------------
    def _stem_dims(self, input_dims, rows=None):
        try:
            if any(e < k for e, k in zip(input_dims[1:], self.config.stem_kernel)):
                raise ShapeError(
                    f"input extents (T,H,W)={tuple(input_dims[1:])} smaller than stem kernel {self.config.stem_kernel}"
                )
            d = self.stem.out_dims(tuple(input_dims))
        except ShapeError as exc:
            raise ShapeError(f"stem: {exc}") from None
        try:
            p = self.pool.out_dims(d)
        except ShapeError as exc:
            raise ShapeError(f"pool: {exc}") from None
        if rows is not None:
            rows += [("stem", d), ("pool", p)]
        return p

    @property
    def layers(self) -> list[tuple[str, Module]]:
        out = [("stem", self.stem), ("stem_bn", self.stem_bn), ("pool", self.pool)]
        for s, stage in enumerate(self.stages):
            out += [(f"res{s + 1}.{b}", blk) for b, blk in enumerate(stage)]
        out += [("final_bn", self.final_bn), ("fc", self.fc)]
        return out

    def propagate(self, input_dims) -> list[tuple[str, tuple]]:
        """Symbolic (C, T, H, W) after each layer; ShapeError names the layer."""
        rows = []
        d = self._stem_dims(input_dims, rows)
        for s, stage in enumerate(self.stages):
            for b, blk in enumerate(stage):
                try:
                    d = blk.out_dims(d)
                except ShapeError as exc:
                    raise ShapeError(f"res{s + 1}.{b}: {exc}") from None
                rows.append((f"res{s + 1}.{b}", d))
        rows.append(("avgpool", (d[0], 1, 1, 1)))
        rows.append(("fc", (self.config.num_classes,)))
        return rows

    @property
    def stc_blocks(self) -> list[tuple[str, STCBlockParams]]:
        return [(f"res{s + 1}.{b}.stc", blk.stc) for s, stage in enumerate(self.stages)
                for b, blk in enumerate(stage) if blk.stc is not None]

    def set_gate_bypass(self, flag: bool) -> None:
        for _, stc in self.stc_blocks:
            stc.bypass = flag

    # -- execution ------------------------------------------------------
    def features(self, x: Tensor) -> Tensor:
        """Globally pooled last-stage features, (N, widths[-1])."""
        if x.ndim != 5 or x.shape[1] != self.config.input_dims[0]:
            raise ShapeError(f"input must be (N, {self.config.input_dims[0]}, T, H, W), got {x.shape}")
        h = F.relu(self.stem_bn(self.stem(x)))
        h = self.pool(h)
        for stage in self.stages:
            for blk in stage:
                h = blk(h)
        h = F.relu(self.final_bn(h))
        h = F.avgpool3d(h, h.shape[2:])
        return F.flatten(h)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc(self.features(x))


def build(config: ArchConfig, seed: int = 0) -> ModelGraph:
    return ModelGraph(config, seed)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class ParamCount:
    per_layer: dict
    stc_per_layer: dict
    total: int
    stc_total: int

    @property
    def backbone_total(self) -> int:
        return self.total - self.stc_total


def param_count(graph: ModelGraph) -> ParamCount:
    per_layer, stc_per_layer = {}, {}
    for name, module in graph.layers:
        per_layer[name] = sum(p.size for p in module.parameters())
        stc = getattr(module, "stc", None)
        if stc is not None:
            stc_per_layer[name] = sum(p.size for p in stc.parameters())
    total = sum(p.size for p in graph.registry.values())
    return ParamCount(per_layer, stc_per_layer, total, sum(stc_per_layer.values()))


@dataclass
class ShapeReport:
    rows: list  # (layer, (C, T, H, W))
    table: dict = field(default_factory=dict)  # Table-1 row -> (H, W, T)
    mismatches: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.mismatches

    def format(self) -> str:
        lines = ["layer            C      T    H    W"]
        for name, d in self.rows:
            if len(d) == 4:
                lines.append(f"{name:<14} {d[0]:>5} {d[1]:>5} {d[2]:>4} {d[3]:>4}")
            else:
                lines.append(f"{name:<14} {d[0]:>5}")
        if self.table:
            lines.append("")
            lines.append("stage          output size (H x W x T)")
            for name, (h, w, t) in self.table.items():
                lines.append(f"{name:<14} {h}x{w}x{t}")
        for m in self.mismatches:
            lines.append(f"MISMATCH {m}")
        return "\n".join(lines)


def _hwt(d) -> tuple[int, int, int]:
    return (d[2], d[3], d[1])


def shape_check(graph: ModelGraph, input_dims=None, expected: Optional[dict] = None) -> ShapeReport:
    """Propagate dims symbolically and summarize per stage.

    ``expected`` maps stage rows (conv1, pool, res1..res4, classifier) to
    (H, W, T). For the 101-layer presets on the standard clip it defaults to
    the reference table.
    """
    input_dims = tuple(graph.config.input_dims if input_dims is None else input_dims)
    rows = graph.propagate(input_dims)
    lookup = dict(rows)
    table = {"conv1": _hwt(lookup["stem"]), "pool": _hwt(lookup["pool"])}
    for s, stage in enumerate(graph.stages):
        table[f"res{s + 1}"] = _hwt(lookup[f"res{s + 1}.{len(stage) - 1}"])
    table["classifier"] = _hwt(lookup["avgpool"])
    if expected is None and graph.config.name.endswith("-101") and not graph.config.name.startswith("toy") \
            and input_dims == REFERENCE_INPUT:
        expected = REFERENCE_OUTPUT_SIZES
    mismatches = []
    for name, want in (expected or {}).items():
        got = table.get(name)
        for axis, g, w in zip("HWT", got, want):
            if g != w:
                mismatches.append(f"{name}: axis {axis} is {g}, expected {w}")
    return ShapeReport(rows, table, mismatches)
