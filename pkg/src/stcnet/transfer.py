"""2D -> 3D supervision transfer.

A frozen 2D teacher sees X single frames and a trainable 3D student sees a
clip. Their features are concatenated and a matching head decides whether
frames and clip come from the same video window. Only the student and the
head are updated.

The teacher is a small 2D network (3D convolutions with temporal kernel 1)
pre-trained here on a single-frame task: which shape is shown and in which
quadrant its center lies.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from . import functional as F
from .arch import ArchConfig, ModelGraph, build, preset
from .data import SHAPES, Dataset, VideoClip
from .errors import ConfigError, DataError, FreezeViolation
from .functional import ConvSpec
from .nn import BatchNorm, Conv3d, Linear, Module
from .tensor import Tensor, no_grad
from .train import SGD, OptimConfig, TrainingDiverged, RunRecord, lr_schedule, write_rows

# full-scale widths: teacher/student features and the three head layers
FULL_WIDTHS = {"dt": 1024, "ds": 1024, "fc_a": 2048, "fc_b": 512, "fc_c": 128}


@dataclass
class TransferConfig:
    steps: int = 500
    batch_size: int = 64
    frames_per_pair: int = 8
    neg_ratio: float = 1.0
    width_scale: int = 16  # toy widths are the full widths divided by this
    fc_a: bool = True
    lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay_policy: str = "step(300)"  # counted in steps
    teacher_epochs: int = 4
    teacher_lr: float = 0.05
    eval_pairs: int = 256
    probe_epochs: int = 100
    student_preset: str = "toy-stc-resnet"

    def widths(self) -> dict:
        if self.width_scale < 1:
            raise ConfigError("transfer.width_scale: must be positive")
        return {k: max(1, v // self.width_scale) for k, v in FULL_WIDTHS.items()}

    def validate(self) -> None:
        def bad(key, why):
            raise ConfigError(f"transfer.{key}: {why}")

        for key in ("steps", "batch_size", "frames_per_pair", "eval_pairs", "probe_epochs"):
            if getattr(self, key) < 1:
                bad(key, "must be positive")
        if self.neg_ratio < 0:
            bad("neg_ratio", "must be nonnegative")
        if self.teacher_epochs < 0:
            bad("teacher_epochs", "must be nonnegative")
        self.widths()
        self.optim().validate()

    def optim(self) -> OptimConfig:
        return OptimConfig(lr=self.lr, momentum=self.momentum, weight_decay=self.weight_decay,
                           batch_size=self.batch_size, lr_decay_policy=self.lr_decay_policy)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# pairs
# ---------------------------------------------------------------------------

@dataclass
class PairSample:
    frames: np.ndarray  # (X, C, H, W) teacher input
    clip: np.ndarray  # (C, T, H, W) student input
    label: int  # 1 = match, 0 = mismatch
    frames_source: tuple  # (video id, frame indices)
    clip_source: tuple  # (video id, frame indices)

    @property
    def identity(self) -> tuple:
        return (self.label, self.frames_source[0], self.clip_source[0])


def _window(clip: VideoClip, clip_len: int, rng: np.random.Generator) -> np.ndarray:
    L = clip.data.shape[1]
    start = int(rng.integers(max(L - clip_len, 0) + 1))
    return (start + np.arange(clip_len)) % L


def _frames_from(clip: VideoClip, window: np.ndarray, X: int, rng: np.random.Generator) -> np.ndarray:
    return np.sort(rng.choice(window, size=X, replace=X > len(window)))


def make_pairs(clips: Sequence[VideoClip], num_positives: int, frames_per_pair: int = 8,
               neg_ratio: float = 1.0, seed: int = 0, clip_len: Optional[int] = None) -> list[PairSample]:
    """``num_positives`` matching pairs plus ``round(num_positives * neg_ratio)``
    mismatching pairs, shuffled.

    A positive takes its frames from the clip's own window; a negative takes
    frames from a window of a different video.
    """
    n_neg = int(round(num_positives * neg_ratio))
    if n_neg and len(clips) < 2:
        raise DataError("negative pairs need at least two videos")
    if not clips:
        raise DataError("cannot build pairs from an empty dataset")
    rng = np.random.default_rng(seed)
    T = clip_len or clips[0].data.shape[1]
    out = []
    for label, count in ((1, num_positives), (0, n_neg)):
        for _ in range(count):
            a = int(rng.integers(len(clips)))
            win = _window(clips[a], T, rng)
            if label:
                b, fwin = a, win
            else:
                b = int(rng.integers(len(clips) - 1))
                b += b >= a
                fwin = _window(clips[b], T, rng)
            fidx = _frames_from(clips[b], fwin, frames_per_pair, rng)
            out.append(PairSample(
                frames=np.moveaxis(clips[b].data[:, fidx], 1, 0),
                clip=clips[a].data[:, win],
                label=label,
                frames_source=(clips[b].video_id, tuple(int(i) for i in fidx)),
                clip_source=(clips[a].video_id, tuple(int(i) for i in win)),
            ))
    order = rng.permutation(len(out))
    return [out[i] for i in order]


def pair_batches(clips: Sequence[VideoClip], batch_size: int, frames_per_pair: int, neg_ratio: float,
                 seed: int) -> Iterator[list[PairSample]]:
    """Endless stream of batches with the requested class balance."""
    pos = max(1, int(round(batch_size / (1 + neg_ratio))))
    step = 0
    while True:
        yield make_pairs(clips, pos, frames_per_pair, neg_ratio, seed=hash_seed(seed, step))
        step += 1


def hash_seed(*parts) -> int:
    return int.from_bytes(hashlib.sha256(repr(parts).encode()).digest()[:8], "little")


# ---------------------------------------------------------------------------
# teacher
# ---------------------------------------------------------------------------

class Teacher2D(Module):
    """Per-frame CNN: three 3x3 convolutions, global pooling, a feature fc
    of width ``dt`` and a classifier for the pre-training task."""

    def __init__(self, in_channels: int, dt: int, num_classes: int, seed: int = 0, width: int = 16):
        rng = np.random.default_rng(seed)
        k = (1, 3, 3)
        self.conv1 = Conv3d(ConvSpec(in_channels, width, k, 1, (0, 1, 1)), rng)
        self.bn1 = BatchNorm(width)
        self.conv2 = Conv3d(ConvSpec(width, 2 * width, k, (1, 2, 2), (0, 1, 1)), rng)
        self.bn2 = BatchNorm(2 * width)
        self.conv3 = Conv3d(ConvSpec(2 * width, 2 * width, k, (1, 2, 2), (0, 1, 1)), rng)
        self.bn3 = BatchNorm(2 * width)
        self.feature = Linear(2 * width, dt, rng)
        self.classifier = Linear(dt, num_classes, rng)
        self.dt = dt
        self.frozen = False

    def features(self, frames: Tensor) -> Tensor:
        """(N, C, H, W) frames -> (N, dt) penultimate features."""
        n, c, h, w = frames.shape
        x = F.reshape(frames, (n, c, 1, h, w))
        x = F.relu(self.bn1(self.conv1(x)))
        x = F.relu(self.bn2(self.conv2(x)))
        x = F.relu(self.bn3(self.conv3(x)))
        x = F.flatten(F.avgpool3d(x, x.shape[2:]))
        return F.relu(self.feature(x))

    def forward(self, frames: Tensor) -> Tensor:
        return self.classifier(self.features(frames))

    def freeze(self) -> None:
        """Eval mode, no gradients, read-only parameter and buffer arrays."""
        self.eval()
        for p in self.parameters():
            p.requires_grad = False
            p.frozen = True
            p.data.flags.writeable = False
        for _, b in self.named_buffers():
            b.flags.writeable = False
        self.frozen = True

    def train(self, mode: bool = True):
        if mode and getattr(self, "frozen", False):
            raise FreezeViolation("teacher is frozen")
        return super().train(mode)


def teacher_checksum(teacher: Teacher2D) -> str:
    h = hashlib.sha256()
    for name, p in teacher.named_parameters():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    for name, b in teacher.named_buffers():
        h.update(name.encode())
        h.update(np.ascontiguousarray(b).tobytes())
    return h.hexdigest()


def teacher_forward(frames, teacher: Teacher2D) -> Tensor:
    """Mean of per-frame teacher features.

    ``frames`` is (X, C, H, W) for one sample or (B, X, C, H, W) for a batch;
    returns (dt,) or (B, dt). No graph is recorded.
    """
    if not teacher.frozen:
        raise FreezeViolation("teacher_forward requires a frozen teacher")
    arr = frames.data if isinstance(frames, Tensor) else np.asarray(frames)
    single = arr.ndim == 4
    if single:
        arr = arr[None]
    b, x = arr.shape[:2]
    with no_grad():
        feats = teacher.features(Tensor(arr.reshape(b * x, *arr.shape[2:]))).data
    out = feats.reshape(b, x, -1).mean(axis=1, dtype=np.float64).astype(feats.dtype)
    return Tensor(out[0] if single else out)


def frame_task_labels(clip: VideoClip, t: int, height: int, width: int) -> int:
    """Shape-by-quadrant class of frame ``t``: ``shape_index * 4 + quadrant``."""
    m = clip.meta["motion"]
    cx = m["start"][0] + m["velocity"][0] * t
    cy = m["start"][1] + m["velocity"][1] * t
    quadrant = int(cy >= height / 2) * 2 + int(cx >= width / 2)
    return SHAPES.index(m["kind"]) * 4 + quadrant


def pretrain_teacher(dataset: Dataset, dt: int, seed: int = 0, epochs: int = 4, lr: float = 0.05,
                     batch_size: int = 32, log: Optional[Callable[[str], None]] = None) -> tuple[Teacher2D, float]:
    """Train a teacher on single frames of the training split, then freeze it.

    Returns the teacher and its held-out frame accuracy.
    """
    spec = dataset.spec
    if spec is None:
        raise DataError("teacher pre-training needs generator metadata (synthetic dataset)")

    def frames_of(clips):
        xs, ys = [], []
        for c in clips:
            for t in range(c.data.shape[1]):
                xs.append(c.data[:, t])
                ys.append(frame_task_labels(c, t, spec.height, spec.width))
        return np.stack(xs), np.array(ys)

    xtr, ytr = frames_of(dataset.train)
    xva, yva = frames_of(dataset.val)
    teacher = Teacher2D(spec.channels, dt, 4 * len(SHAPES), seed)
    sgd = SGD(list(teacher.named_parameters()), OptimConfig(lr=lr, momentum=0.9, weight_decay=1e-4))
    rng = np.random.default_rng(seed)
    teacher.train()
    for epoch in range(epochs):
        order = rng.permutation(len(xtr))
        total = 0.0
        for b in range(0, len(order) - 1, batch_size):
            idx = order[b : b + batch_size]
            sgd.zero_grad()
            loss = F.softmax_cross_entropy(teacher(Tensor(xtr[idx])), ytr[idx])
            loss.backward()
            sgd.step(lr)
            total += float(loss.data[0]) * len(idx)
        if log:
            log(f"teacher epoch {epoch}: loss {total / len(xtr):.4f}")
    teacher.eval()
    with no_grad():
        pred = np.concatenate([teacher(Tensor(xva[i : i + 256])).data.argmax(1) for i in range(0, len(xva), 256)])
    acc = float((pred == yva).mean())
    teacher.freeze()
    return teacher, acc


# ---------------------------------------------------------------------------
# student side
# ---------------------------------------------------------------------------

class MatchingHead(Module):
    """(dt + ds) -> fc_a -> fc_b -> fc_c -> 2 with ReLU between layers.

    With ``fc_a=False`` the concatenation feeds fc_b directly. The 2-way
    classifier starts at a tenth of the usual scale so the untrained head
    predicts close to chance.
    """

    def __init__(self, dt: int, ds: int, widths: dict, seed: int = 0, fc_a: bool = True):
        rng = np.random.default_rng(seed)
        d = dt + ds
        self.fc_a = Linear(d, widths["fc_a"], rng) if fc_a else None
        d = widths["fc_a"] if fc_a else d
        self.fc_b = Linear(d, widths["fc_b"], rng)
        self.fc_c = Linear(widths["fc_b"], widths["fc_c"], rng)
        self.classifier = Linear(widths["fc_c"], 2, rng)
        self.classifier.weight.data[...] = 0

    def forward(self, joint: Tensor) -> Tensor:
        h = joint
        for layer in (self.fc_a, self.fc_b, self.fc_c):
            if layer is not None:
                h = F.relu(layer(h))
        return self.classifier(h)


def build_student(config: TransferConfig, num_inputs_dims: Sequence[int], seed: int = 0) -> ModelGraph:
    """Toy STC-ResNet whose final fc emits ``ds`` features instead of class scores."""
    ds = config.widths()["ds"]
    cfg = preset(config.student_preset).replace(num_classes=ds, input_dims=tuple(num_inputs_dims),
                                                name=f"{config.student_preset}-student")
    return build(cfg, seed)


def _batch_arrays(batch: Sequence[PairSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return (np.stack([p.frames for p in batch]), np.stack([p.clip for p in batch]),
            np.array([p.label for p in batch]))


def match_logits(frames, clips, teacher: Teacher2D, student: ModelGraph, head: MatchingHead) -> Tensor:
    t = teacher_forward(frames, teacher)
    s = student(Tensor(clips))
    return head(F.concat([t, s], axis=1))


def transfer_step(batch: Sequence[PairSample], teacher: Teacher2D, student: ModelGraph, head: MatchingHead,
                  sgd: SGD, lr: float) -> float:
    """One update of student and head on a batch of pairs; returns the loss."""
    frames, clips, labels = _batch_arrays(batch)
    student.train()
    head.train()
    sgd.zero_grad()
    loss = F.softmax_cross_entropy(match_logits(frames, clips, teacher, student, head), labels)
    value = float(loss.data[0])
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite transfer loss {value}", RunRecord(status="diverged"))
    loss.backward()
    sgd.step(lr)
    return value


def matching_accuracy(pairs: Sequence[PairSample], teacher, student, head, chunk: int = 64) -> float:
    student.eval()
    head.eval()
    correct = 0
    with no_grad():
        for i in range(0, len(pairs), chunk):
            frames, clips, labels = _batch_arrays(pairs[i : i + chunk])
            pred = match_logits(frames, clips, teacher, student, head).data.argmax(1)
            correct += int((pred == labels).sum())
    return correct / len(pairs)


# ---------------------------------------------------------------------------
# linear probe
# ---------------------------------------------------------------------------

def linear_probe(train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray, test_y: np.ndarray,
                 num_classes: int, seed: int = 0, epochs: int = 100, lr: float = 0.1, batch_size: int = 32) -> float:
    """Multinomial logistic regression by minibatch SGD on standardized
    features; returns held-out accuracy."""
    mu = train_x.mean(axis=0)
    sd = train_x.std(axis=0) + 1e-6
    xtr = (train_x - mu) / sd
    xte = (test_x - mu) / sd
    rng = np.random.default_rng(seed)
    W = np.zeros((xtr.shape[1], num_classes))
    b = np.zeros(num_classes)
    onehot = np.eye(num_classes)[train_y]
    for _ in range(epochs):
        order = rng.permutation(len(xtr))
        for i in range(0, len(order), batch_size):
            idx = order[i : i + batch_size]
            p = F.softmax(xtr[idx] @ W + b)
            g = (p - onehot[idx]) / len(idx)
            W -= lr * xtr[idx].T @ g
            b -= lr * g.sum(axis=0)
    pred = np.argmax(xte @ W + b, axis=1)
    return float((pred == test_y).mean())


def student_features(student: ModelGraph, clips: Sequence[VideoClip], chunk: int = 64) -> np.ndarray:
    """Pooled last-stage student features in eval mode."""
    student.eval()
    T = student.config.input_dims[1]
    out = []
    with no_grad():
        for i in range(0, len(clips), chunk):
            x = np.stack([c.data[:, :T] for c in clips[i : i + chunk]])
            out.append(student.features(Tensor(x)).data.astype(np.float64))
    return np.concatenate(out)


def probe_features(student: ModelGraph, dataset: Dataset, seed: int = 0, epochs: int = 100) -> float:
    xtr = student_features(student, dataset.train)
    xte = student_features(student, dataset.val)
    ytr = np.array([c.label for c in dataset.train])
    yte = np.array([c.label for c in dataset.val])
    return linear_probe(xtr, ytr, xte, yte, dataset.num_classes, seed, epochs)


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

@dataclass
class TransferResult:
    steps: int
    losses: list
    heldout_accuracy: float
    teacher_accuracy: float
    checksum_before: str
    checksum_after: str
    probe_transferred: float
    probe_random: float
    initial_loss: float
    gradient_seen: dict = field(default_factory=dict)
    student: Optional[ModelGraph] = None
    head: Optional[MatchingHead] = None
    teacher: Optional[Teacher2D] = None

    @property
    def teacher_unchanged(self) -> bool:
        return self.checksum_before == self.checksum_after

    def summary(self) -> dict:
        return {
            "steps": self.steps, "final_loss": self.losses[-1] if self.losses else None,
            "initial_loss": self.initial_loss, "heldout_accuracy": self.heldout_accuracy,
            "teacher_accuracy": self.teacher_accuracy, "teacher_checksum_before": self.checksum_before,
            "teacher_checksum_after": self.checksum_after, "teacher_unchanged": self.teacher_unchanged,
            "probe_transferred": self.probe_transferred, "probe_random": self.probe_random,
        }


def run_transfer(config: TransferConfig, dataset: Dataset, seed: int = 0, run_dir=None,
                 teacher: Optional[Teacher2D] = None, probe: bool = True,
                 log: Optional[Callable[[str], None]] = None) -> TransferResult:
    """Pre-train (or reuse) the teacher, train student + head for
    ``config.steps`` steps, and report held-out matching accuracy and the
    linear-probe comparison against an untrained student."""
    config.validate()
    widths = config.widths()
    teacher_acc = float("nan")
    if teacher is None:
        teacher, teacher_acc = pretrain_teacher(dataset, widths["dt"], seed, config.teacher_epochs,
                                                config.teacher_lr, log=log)
    if log:
        log(f"teacher frame accuracy {teacher_acc:.3f}")
    before = teacher_checksum(teacher)
    clip_dims = dataset.clips[0].data.shape
    student = build_student(config, clip_dims, seed)
    head = MatchingHead(widths["dt"], widths["ds"], widths, seed + 1, config.fc_a)
    named = list(student.named_parameters("student.")) + list(head.named_parameters("head."))
    optim = config.optim()
    sgd = SGD(named, optim)
    stream = pair_batches(dataset.train, config.batch_size, config.frames_per_pair, config.neg_ratio, seed)
    seen = {n: False for n, _ in student.named_parameters()}
    losses = []
    rows = []
    for step in range(config.steps):
        lr = lr_schedule(step, (), optim)
        loss = transfer_step(next(stream), teacher, student, head, sgd, lr)
        losses.append(loss)
        for n, p in student.named_parameters():
            if not seen[n] and p.grad is not None and np.any(p.grad != 0):
                seen[n] = True
        rows.append({"step": step, "lr": lr, "loss": loss})
        if log and (step % 50 == 0 or step == config.steps - 1):
            log(f"step {step:4d} lr {lr:.4g} loss {loss:.4f}")
    eval_pairs = make_pairs(dataset.val, config.eval_pairs // 2, config.frames_per_pair, 1.0,
                            seed=hash_seed(seed, "heldout"))
    acc = matching_accuracy(eval_pairs, teacher, student, head)
    after = teacher_checksum(teacher)
    probe_t = probe_r = float("nan")
    if probe:
        probe_t = probe_features(student, dataset, seed, config.probe_epochs)
        probe_r = probe_features(build_student(config, clip_dims, seed + 1000), dataset, seed, config.probe_epochs)
    result = TransferResult(config.steps, losses, acc, teacher_acc, before, after, probe_t, probe_r,
                            losses[0] if losses else float("nan"), seen, student, head, teacher)
    if run_dir:
        run_dir = Path(run_dir)
        write_rows(run_dir / "transfer.csv", rows, ("step", "lr", "loss"))
        write_rows(run_dir / "probe.csv", [{"probe_transferred": probe_t, "probe_random": probe_r,
                                            "heldout_matching_acc": acc, "teacher_unchanged": result.teacher_unchanged}],
                   ("probe_transferred", "probe_random", "heldout_matching_acc", "teacher_unchanged"))
    return result
