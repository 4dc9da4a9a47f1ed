"""SGD training, learning-rate schedules, clip sampling and the ablation harness."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import functional as F
from .arch import ArchConfig, ModelGraph, build, param_count, toy_depth_preset
from .checkpoint import Checkpoint, load_checkpoint, model_tensors, restore_model, save_checkpoint
from .data import AugmentPolicy, Dataset, SynthSpec, VideoClip, augment, eval_view, frame_shuffled
from .errors import ConfigError, DataError, FreezeViolation, NumericError, ShapeError
from .tensor import Tensor, no_grad

PRESET_STRIDES = (1, 2, 4, 16)
_STEP_RE = re.compile(r"^step\((\d+)\)$")


@dataclass
class OptimConfig:
    lr: float = 0.1
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 1e-4
    batch_size: int = 16
    max_epochs: int = 200
    lr_decay_factor: float = 10.0
    lr_decay_policy: str = "plateau"  # "plateau" or "step(N)"
    min_delta: float = 1e-3
    patience: int = 10
    target_train_acc: Optional[float] = None
    target_val_acc: Optional[float] = None

    def validate(self) -> None:
        def bad(key, why):
            raise ConfigError(f"optim.{key}: {why}")

        if not self.lr > 0:
            bad("lr", f"must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            bad("momentum", f"must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            bad("weight_decay", f"must be nonnegative, got {self.weight_decay}")
        if self.batch_size < 1:
            bad("batch_size", "must be positive")
        if self.max_epochs < 1:
            bad("max_epochs", "must be positive")
        if not self.lr_decay_factor > 0:
            bad("lr_decay_factor", "must be positive")
        if self.lr_decay_policy != "plateau" and not _STEP_RE.match(self.lr_decay_policy):
            bad("lr_decay_policy", f"must be 'plateau' or 'step(N)', got {self.lr_decay_policy!r}")
        if self.patience < 1:
            bad("patience", "must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "OptimConfig":
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def sgd_step(params: Sequence, grads: Sequence, state: list, config: OptimConfig,
             lr: Optional[float] = None) -> list:
    """One SGD update in place.

    Per parameter: ``g += wd * p`` (only where ``p.decay``), ``v = mu*v + g``,
    then ``p -= lr * (g + mu*v)`` with Nesterov or ``p -= lr * v`` without.
    ``params`` holds Parameters or bare arrays; ``state`` holds velocities
    (None entries are started at zero) and is returned updated.
    """
    lr = config.lr if lr is None else lr
    mu, wd = config.momentum, config.weight_decay
    if len(grads) != len(params):
        raise ShapeError(f"{len(grads)} gradients for {len(params)} parameters")
    if len(state) < len(params):
        state.extend([None] * (len(params) - len(state)))
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if getattr(p, "frozen", False) or (isinstance(p, Tensor) and not p.requires_grad):
            raise FreezeViolation(f"parameter {getattr(p, 'name', i)!r} is frozen and cannot be updated")
        arr = p.data if isinstance(p, Tensor) else p
        g = np.asarray(g)
        if g.shape != arr.shape:
            raise ShapeError(f"gradient {g.shape} does not match parameter {arr.shape}")
        if wd and getattr(p, "decay", True):
            g = g + wd * arr
        v = g.copy() if state[i] is None else mu * state[i] + g
        state[i] = v
        step = g + mu * v if config.nesterov else v
        arr -= (lr * step).astype(arr.dtype)
    return state


class SGD:
    """Named-parameter wrapper around :func:`sgd_step`."""

    def __init__(self, named_params: Sequence[tuple[str, object]], config: OptimConfig):
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.config = config
        self.velocity: list = [None] * len(self.params)

    def step(self, lr: float) -> None:
        sgd_step(self.params, [p.grad for p in self.params], self.velocity, self.config, lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_tensors(self) -> dict:
        return {f"velocity.{n}": v for n, v in zip(self.names, self.velocity) if v is not None}

    def load_state(self, tensors: dict) -> None:
        self.velocity = [tensors.get(f"velocity.{n}") for n in self.names]
        self.velocity = [None if v is None else np.array(v) for v in self.velocity]


def lr_schedule(epoch: int, history: Sequence[float], config: OptimConfig) -> float:
    """Learning rate for ``epoch`` given validation losses of earlier epochs.

    ``plateau``: replaying ``history``, a counter grows each epoch whose loss
    is not below ``best - min_delta``; when it reaches ``patience`` the lr is
    divided by the decay factor and the counter restarts.
    ``step(N)``: divide every N epochs.
    """
    m = _STEP_RE.match(config.lr_decay_policy)
    if m:
        return config.lr / config.lr_decay_factor ** (epoch // int(m.group(1)))
    decays, best, wait = 0, math.inf, 0
    for loss in list(history)[:epoch]:
        if loss < best - config.min_delta:
            best, wait = loss, 0
            continue
        wait += 1
        if wait >= config.patience:
            decays += 1
            wait = 0
    return config.lr / config.lr_decay_factor ** decays


# ---------------------------------------------------------------------------
# clip protocol
# ---------------------------------------------------------------------------

def sample_clips(length: int, clip_len: int, stride: int = 1, mode: str = "eval",
                 rng: Optional[np.random.Generator] = None, allow_free_stride: bool = False) -> list[np.ndarray]:
    """Frame index arrays for the clips of a video with ``length`` frames.

    Train mode draws one random start; eval mode tiles non-overlapping spans
    of ``clip_len * stride`` frames until the video is covered. Indices past
    the end wrap around (loop padding).
    """
    if length < 1:
        raise DataError("cannot sample clips from an empty video")
    if clip_len < 1:
        raise ConfigError(f"clip length must be positive, got {clip_len}")
    if stride < 1 or (stride not in PRESET_STRIDES and not allow_free_stride):
        raise ConfigError(f"stride must be one of {PRESET_STRIDES} (got {stride}); pass allow_free_stride for others")
    offsets = np.arange(clip_len) * stride
    if mode == "train":
        rng = rng if rng is not None else np.random.default_rng()
        span = (clip_len - 1) * stride + 1
        start = int(rng.integers(max(length - span, 0) + 1))
        return [(start + offsets) % length]
    if mode != "eval":
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    span = clip_len * stride
    n = max(1, math.ceil(length / span))
    return [(k * span + offsets) % length for k in range(n)]


def average_predictions(probs: np.ndarray) -> tuple[int, np.ndarray]:
    """Mean of per-clip probability rows and its argmax (lowest index wins ties)."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] < 1:
        raise ShapeError(f"expected (clips, classes) probabilities, got {probs.shape}")
    mean = probs.mean(axis=0)
    return int(np.argmax(mean)), mean


def clip_probabilities(model, clips: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Softmax outputs for a stack of clips, (K, C, T, H, W) -> (K, classes)."""
    out = []
    with no_grad():
        for i in range(0, len(clips), chunk):
            out.append(F.softmax(model(Tensor(clips[i : i + chunk])).data.astype(np.float64)))
    return np.concatenate(out)


def evaluate_video(model, clips) -> tuple[int, np.ndarray]:
    """Video prediction: per-clip softmax, mean over clips, argmax."""
    clips = np.asarray(clips)
    if clips.ndim == 4:
        clips = clips[None]
    return average_predictions(clip_probabilities(model, clips))


def evaluate_clips(model, clips: Sequence[VideoClip], clip_len: int, stride: int = 1,
                   policy: Optional[AugmentPolicy] = None, allow_free_stride: bool = False) -> tuple[float, float]:
    """Video-level (loss, accuracy): tiled clips, averaged softmax, argmax.

    The loss is the mean negative log of the averaged probability of the
    true class.
    """
    if not clips:
        return float("nan"), float("nan")
    policy = policy or AugmentPolicy()
    model.eval()
    views, owner = [], []
    for k, clip in enumerate(clips):
        for idx in sample_clips(clip.data.shape[1], clip_len, stride, "eval", allow_free_stride=allow_free_stride):
            views.append(eval_view(clip.data[:, idx], policy))
            owner.append(k)
    probs = clip_probabilities(model, np.stack(views).astype(model.config.dtype))
    owner = np.array(owner)
    loss, correct = 0.0, 0
    for k, clip in enumerate(clips):
        pred, mean = average_predictions(probs[owner == k])
        loss -= math.log(max(mean[clip.label], 1e-12))
        correct += pred == clip.label
    return loss / len(clips), correct / len(clips)


# ---------------------------------------------------------------------------
# run records
# ---------------------------------------------------------------------------

CSV_FIELDS = ("epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc", "seconds")


@dataclass
class RunRecord:
    seed: int = 0
    config_digest: str = ""
    name: str = ""
    rows: list = field(default_factory=list)
    status: str = "ok"
    diagnostic: dict = field(default_factory=dict)

    @property
    def epochs(self) -> int:
        return len(self.rows)

    def column(self, key: str) -> list:
        return [r[key] for r in self.rows]

    def last(self, key: str):
        return self.rows[-1][key] if self.rows else None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in self.rows:
            w.writerow([r["epoch"], repr(r["lr"]), repr(r["train_loss"]), repr(r["train_acc"]),
                        repr(r["val_loss"]), repr(r["val_acc"]), f"{r['seconds']:.3f}"])
        return buf.getvalue()

    def summary(self) -> dict:
        best = max(self.column("val_acc")) if self.rows else None
        return {
            "name": self.name, "seed": self.seed, "config_digest": self.config_digest,
            "status": self.status, "epochs": self.epochs,
            "final": {k: self.last(k) for k in CSV_FIELDS if k != "seconds"},
            "best_val_acc": best, "wall_seconds": sum(self.column("seconds")),
            "diagnostic": self.diagnostic,
        }

    def write(self, directory, stem: str = "record") -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / f"{stem}.csv").write_text(self.to_csv())
        (directory / f"{stem}.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


class TrainingDiverged(NumericError):
    def __init__(self, message: str, record: RunRecord):
        super().__init__(message)
        self.record = record


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------

class Trainer:
    """Owns one model, its optimizer state and the sampling RNG.

    Each epoch draws one training clip per training video (random start,
    given stride), runs minibatch SGD, then evaluates every validation video
    with the tiled-clip protocol. ``train_acc`` is the running accuracy over
    the epoch's batches; ``val_loss`` is the mean negative log of the
    clip-averaged probability of the true class.
    """

    def __init__(self, model: ModelGraph, optim: OptimConfig, dataset: Dataset, seed: int = 0,
                 clip_len: Optional[int] = None, stride: int = 1, policy: Optional[AugmentPolicy] = None,
                 allow_free_stride: bool = False, params=None):
        optim.validate()
        self.model, self.optim, self.dataset = model, optim, dataset
        self.seed = seed
        self.clip_len = clip_len or model.config.input_dims[1]
        self.stride = stride
        self.allow_free_stride = allow_free_stride
        self.policy = policy or AugmentPolicy()
        self.rng = np.random.default_rng(seed)
        named = params if params is not None else list(model.named_parameters())
        self.sgd = SGD(named, optim)
        self.record = RunRecord(seed=seed, config_digest=model.config.digest(), name=model.config.name)
        self.train_clips = dataset.train
        self.val_clips = dataset.val
        if not self.train_clips:
            raise DataError("training split is empty")
        # fail fast on a stride outside the preset set
        sample_clips(1, self.clip_len, stride, "eval", allow_free_stride=allow_free_stride)

    # -- pieces ----------------------------------------------------------
    @property
    def epoch(self) -> int:
        return self.record.epochs

    def current_lr(self) -> float:
        return lr_schedule(self.epoch, self.record.column("val_loss"), self.optim)

    def _train_clip(self, clip: VideoClip) -> tuple[np.ndarray, int]:
        idx = sample_clips(clip.data.shape[1], self.clip_len, self.stride, "train", self.rng,
                           self.allow_free_stride)[0]
        view = VideoClip(clip.data[:, idx], clip.label, clip.video_id)
        view = augment(view, self.policy, self.rng, self.dataset.flip_map)
        return view.data, view.label

    def train_epoch(self, lr: float) -> tuple[float, float]:
        self.model.train()
        order = self.rng.permutation(len(self.train_clips))
        bs = self.optim.batch_size
        total_loss, correct, seen = 0.0, 0, 0
        for b in range(0, len(order), bs):
            chunk = order[b : b + bs]
            if len(chunk) < 2 and seen:
                break  # batch statistics need two samples
            pairs = [self._train_clip(self.train_clips[i]) for i in chunk]
            x = Tensor(np.stack([p[0] for p in pairs]), dtype=self.model.config.dtype)
            y = np.array([p[1] for p in pairs])
            self.sgd.zero_grad()
            logits = self.model(x)
            loss = F.softmax_cross_entropy(logits, y)
            value = float(loss.data[0])
            if not math.isfinite(value):
                self.record.status = "diverged"
                self.record.diagnostic = {"epoch": self.epoch, "batch": b // bs, "loss": repr(value), "lr": lr}
                raise TrainingDiverged(
                    f"non-finite loss {value} at epoch {self.epoch} batch {b // bs} (lr {lr})", self.record)
            loss.backward()
            self.sgd.step(lr)
            total_loss += value * len(chunk)
            correct += int((logits.data.argmax(axis=1) == y).sum())
            seen += len(chunk)
        return total_loss / seen, correct / seen

    def evaluate(self, clips: Optional[list] = None) -> tuple[float, float]:
        """(loss, accuracy) over videos with the tiled-clip protocol."""
        return evaluate_clips(self.model, self.val_clips if clips is None else clips, self.clip_len,
                              self.stride, self.policy, self.allow_free_stride)

    # -- loop -----------------------------------------------------------
    def fit(self, max_epochs: Optional[int] = None, checkpoint_path=None, checkpoint_every: int = 1,
            on_epoch: Optional[Callable[[dict], None]] = None) -> RunRecord:
        """Train until ``max_epochs`` total epochs or the accuracy targets are met."""
        limit = self.optim.max_epochs if max_epochs is None else max_epochs
        while self.epoch < limit:
            t0 = time.perf_counter()
            lr = self.current_lr()
            train_loss, train_acc = self.train_epoch(lr)
            val_loss, val_acc = self.evaluate()
            row = {"epoch": self.epoch, "lr": lr, "train_loss": train_loss, "train_acc": train_acc,
                   "val_loss": val_loss, "val_acc": val_acc, "seconds": time.perf_counter() - t0}
            self.record.rows.append(row)
            if on_epoch:
                on_epoch(row)
            if checkpoint_path and (self.epoch % checkpoint_every == 0 or self.epoch == limit):
                self.save(checkpoint_path)
            if self._targets_met(row):
                if checkpoint_path:
                    self.save(checkpoint_path)
                break
        return self.record

    def _targets_met(self, row: dict) -> bool:
        o = self.optim
        if o.target_train_acc is None and o.target_val_acc is None:
            return False
        return (o.target_train_acc is None or row["train_acc"] >= o.target_train_acc) and \
               (o.target_val_acc is None or row["val_acc"] >= o.target_val_acc)

    # -- persistence ------------------------------------------------------
    def checkpoint(self) -> Checkpoint:
        tensors, groups = model_tensors(self.model)
        for name, v in self.sgd.state_tensors().items():
            tensors[name], groups[name] = v, "optimizer"
        extra = {
            "epoch": self.epoch, "seed": self.seed, "rng": self.rng.bit_generator.state,
            "rows": self.record.rows, "optim": self.optim.to_dict(),
            "clip_len": self.clip_len, "stride": self.stride,
        }
        return Checkpoint(tensors, groups, self.model.config.to_dict(), self.model.config.digest(), extra)

    def save(self, path) -> Path:
        return save_checkpoint(self.checkpoint(), path)

    def resume(self, path, strict: bool = True) -> None:
        ckpt = load_checkpoint(path, self.model.config.digest(), strict)
        self.load(ckpt)

    def load(self, ckpt: Checkpoint) -> None:
        restore_model(self.model, ckpt.tensors)
        self.sgd.load_state(ckpt.group("optimizer"))
        self.rng.bit_generator.state = ckpt.extra["rng"]
        self.record.rows = [dict(r) for r in ckpt.extra["rows"]]


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

ABLATION_AXES = {
    "depth": (18, 50, 101),
    "temporal-depth": (16, 32),
    "branch-mode": ("SCB", "TCB", "BOTH"),
    "stride": PRESET_STRIDES,
    "family": ("resnet3d", "stc-resnet"),
}
# toy clips are a quarter of the full-scale temporal depth
TOY_TEMPORAL_DEPTH = {16: 4, 32: 8}
ABLATION_FIELDS = ("axis", "setting", "arch", "params", "clip_len", "stride", "epochs",
                   "train_acc", "val_acc", "best_val_acc", "shuffled_val_acc", "final_lr", "status")


def _is_toy(cfg: ArchConfig) -> bool:
    return cfg.name.startswith("toy")


def stride_ablation_spec(spec: SynthSpec, factor: int = 4) -> SynthSpec:
    """Longer, slower videos for the stride sweep.

    Frames grow by ``factor`` and speeds shrink so the shape still stays in
    frame; strided clips then cover different amounts of motion.
    """
    frames = spec.frames * factor
    extent = spec.replace(frames=frames)._max_extent()
    vmax = 0.95 * (min(spec.height, spec.width) - extent) / (frames - 1)
    return spec.replace(frames=frames, velocity_range=(0.6 * vmax, vmax))


def ablation_settings(axis: str, arch: ArchConfig) -> list[tuple[object, ArchConfig, int, int]]:
    """(setting, arch config, clip length, stride) for every value of ``axis``."""
    if axis not in ABLATION_AXES:
        raise ConfigError(f"ablation.axis: must be one of {tuple(ABLATION_AXES)}, got {axis!r}")
    T = arch.input_dims[1]
    out = []
    for value in ABLATION_AXES[axis]:
        cfg, clip_len, stride = arch, T, 1
        if axis == "depth":
            family = arch.family
            cfg = toy_depth_preset(family, value) if _is_toy(arch) else arch.replace(
                blocks={18: (2, 2, 2, 2), 50: (3, 4, 6, 3), 101: (3, 4, 23, 3)}[value],
                block_type="basic" if value == 18 else "bottleneck")
            cfg = cfg.replace(branch_mode=arch.branch_mode, reduction=arch.reduction,
                              num_classes=arch.num_classes, input_dims=arch.input_dims)
        elif axis == "temporal-depth":
            clip_len = TOY_TEMPORAL_DEPTH[value] if _is_toy(arch) else value
            c, _, h, w = arch.input_dims
            cfg = arch.replace(input_dims=(c, clip_len, h, w))
        elif axis == "branch-mode":
            cfg = arch.replace(branch_mode=value)
        elif axis == "stride":
            stride = value
        elif axis == "family":
            cfg = arch.replace(family=value, cardinality=arch.cardinality if value == "stc-resnext" else 1)
        out.append((value, cfg.replace(name=f"{arch.name}[{axis}={value}]"), clip_len, stride))
    return out


def run_experiment(arch: ArchConfig, optim: OptimConfig, dataset: Dataset, axis: Optional[str] = None,
                   run_dir=None, seed: int = 0, max_epochs: Optional[int] = None,
                   log: Optional[Callable[[str], None]] = None) -> tuple[list[dict], list[RunRecord]]:
    """Train one model, or one per setting of an ablation ``axis``.

    Returns one summary row per run plus the records. With ``run_dir`` each
    run writes ``<stem>.csv``/``<stem>.json`` and the sweep writes
    ``ablation-<axis>.csv``.
    """
    settings = ablation_settings(axis, arch) if axis else [(None, arch, arch.input_dims[1], 1)]
    shuffled = frame_shuffled(dataset, seed)
    rows, records = [], []
    for value, cfg, clip_len, stride in settings:
        model = build(cfg, seed)
        trainer = Trainer(model, optim, dataset, seed, clip_len=clip_len, stride=stride)
        stem = "record" if axis is None else f"record-{axis}-{value}"
        if log:
            log(f"run {cfg.name}: {param_count(model).total} parameters")
        try:
            rec = trainer.fit(max_epochs, on_epoch=(lambda r: log(_fmt_row(r))) if log else None)
        except TrainingDiverged as exc:
            rec = exc.record
            if run_dir:
                rec.write(run_dir, stem)
            raise
        _, shuffled_acc = trainer.evaluate(shuffled.val)
        if run_dir:
            rec.write(run_dir, stem)
        records.append(rec)
        rows.append({
            "axis": axis or "", "setting": "" if value is None else value, "arch": cfg.name,
            "params": param_count(model).total, "clip_len": clip_len, "stride": stride,
            "epochs": rec.epochs, "train_acc": rec.last("train_acc"), "val_acc": rec.last("val_acc"),
            "best_val_acc": max(rec.column("val_acc")), "shuffled_val_acc": shuffled_acc,
            "final_lr": rec.last("lr"), "status": rec.status,
        })
    if run_dir:
        write_rows(Path(run_dir) / f"ablation-{axis or 'single'}.csv", rows)
    return rows, records


def _fmt_row(r: dict) -> str:
    return (f"epoch {r['epoch']:3d} lr {r['lr']:.4g} train {r['train_loss']:.4f}/{r['train_acc']:.3f} "
            f"val {r['val_loss']:.4f}/{r['val_acc']:.3f} ({r['seconds']:.2f}s)")


def write_rows(path, rows: list[dict], fields: Sequence[str] = ABLATION_FIELDS) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(fields), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    path.write_text(buf.getvalue())
    return path
