"""Synthetic moving-shape videos, augmentation and the clip file format.

Each video shows one shape whose *motion* is the label (direction, or
rotation vs translation). Start positions are drawn so the pooled frames of
every class cover the same region, so appearance alone does not give the
class away.

Clip arrays are (C, T, H, W) float32 with values in [0, 1].

Clip file layout (little-endian)::

    offset  size  field
    0       4     magic b"SVC1"
    4       4     version u32 (= 1)
    8       1     dtype u8 (0 = float32)
    9       1     rank u8 (= 4)
    10      16    dims 4 x u32 (C, T, H, W)
    26      4     label u32
    30      8     video id u64
    38      ...   raw row-major data

A dataset directory holds one clip file per video plus ``index.tsv`` with
``relative-path<TAB>label<TAB>split`` per line and ``spec.json``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError, FormatError

MOTIONS = {
    "translate-4dir": ("up", "down", "left", "right"),
    "translate-8dir": tuple(f"dir{k * 45}" for k in range(8)),
    "rotate-vs-translate": ("rotate", "translate"),
}
SHAPES = ("bar", "rectangle", "blob")

# horizontal flip: index -> index of the mirrored class
FLIP_MAPS = {
    "translate-4dir": (0, 1, 3, 2),
    "translate-8dir": tuple((4 - k) % 8 for k in range(8)),
    "rotate-vs-translate": (0, 1),
}

CLIP_MAGIC = b"SVC1"
CLIP_VERSION = 1
CLIP_HEADER = struct.Struct("<4sIBB4IIQ")


@dataclass
class SynthSpec:
    height: int = 16
    width: int = 16
    frames: int = 8
    channels: int = 1
    num_classes: int = 4
    samples_per_class: int = 160
    motion: str = "translate-4dir"
    shapes: tuple = SHAPES
    size_range: tuple = (3.0, 5.0)
    velocity_range: tuple = (0.75, 1.25)
    intensity_range: tuple = (0.6, 1.0)
    noise_sigma: float = 0.03
    val_fraction: float = 0.2
    seed: int = 42

    def __post_init__(self):
        self.shapes = tuple(self.shapes)
        self.size_range = tuple(float(v) for v in self.size_range)
        self.velocity_range = tuple(float(v) for v in self.velocity_range)
        self.intensity_range = tuple(float(v) for v in self.intensity_range)

    @property
    def class_names(self) -> tuple[str, ...]:
        return MOTIONS[self.motion]

    def validate(self) -> None:
        def bad(key, why):
            raise ConfigError(f"data.{key}: {why}")

        for key in ("height", "width", "frames", "channels", "samples_per_class"):
            if getattr(self, key) < 1:
                bad(key, "must be positive")
        if self.motion not in MOTIONS:
            bad("motion", f"must be one of {tuple(MOTIONS)}, got {self.motion!r}")
        if self.num_classes != len(MOTIONS[self.motion]):
            bad("num_classes", f"{self.motion} has {len(MOTIONS[self.motion])} classes, got {self.num_classes}")
        if not self.shapes or any(s not in SHAPES for s in self.shapes):
            bad("shapes", f"must be a non-empty subset of {SHAPES}, got {self.shapes}")
        lo, hi = self.size_range
        if not 0 < lo <= hi:
            bad("size_range", f"need 0 < min <= max, got {self.size_range}")
        vlo, vhi = self.velocity_range
        if not 0 <= vlo <= vhi:
            bad("velocity_range", f"need 0 <= min <= max, got {self.velocity_range}")
        if not 0 <= self.noise_sigma:
            bad("noise_sigma", "must be nonnegative")
        if not 0 < self.val_fraction < 1:
            bad("val_fraction", "must lie in (0, 1)")
        # worst case: largest shape at fastest speed along one axis
        reach = self._max_extent() + vhi * (self.frames - 1)
        if reach > min(self.height, self.width):
            raise ConfigError(
                f"data.velocity_range: shape extent {self._max_extent():g} plus travel "
                f"{vhi:g}*{self.frames - 1} exceeds frame size {min(self.height, self.width)}"
            )

    def _max_extent(self) -> float:
        return bar_length(self.size_range[1]) if "bar" in self.shapes or self.motion == "rotate-vs-translate" \
            else self.size_range[1]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "SynthSpec":
        return dataclasses.replace(self, **changes)


@dataclass
class VideoClip:
    data: np.ndarray  # (C, T, H, W) float32
    label: int
    video_id: int
    meta: dict = field(default_factory=dict)

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.data.shape


def bar_length(size: float) -> float:
    return size + 2.0


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _coverage_1d(lo: float, hi: float, n: int) -> np.ndarray:
    """Fraction of each unit pixel [i, i+1) covered by [lo, hi)."""
    i = np.arange(n, dtype=np.float64)
    return np.clip(np.minimum(hi, i + 1) - np.maximum(lo, i), 0.0, 1.0)


def render_shape(kind: str, center, dims, height: int, width: int, angle: float = 0.0) -> np.ndarray:
    """Render one shape into an (H, W) float64 frame with values in [0, 1].

    ``dims`` is (extent_x, extent_y) for rectangles and bars, and the
    diameter for blobs. ``angle`` rotates bars (radians); axis-aligned
    rectangles are rendered with exact area coverage.
    """
    cx, cy = center
    if kind == "blob":
        sigma = float(dims) / 4.0
        x = np.arange(width) + 0.5
        y = np.arange(height) + 0.5
        return np.exp(-((y[:, None] - cy) ** 2 + (x[None, :] - cx) ** 2) / (2 * sigma * sigma))
    ex, ey = dims
    if angle == 0.0:
        cov_x = _coverage_1d(cx - ex / 2, cx + ex / 2, width)
        cov_y = _coverage_1d(cy - ey / 2, cy + ey / 2, height)
        return np.outer(cov_y, cov_x)
    # rotated rectangle: 4x4 supersampling
    sub = (np.arange(4) + 0.5) / 4
    xs = (np.arange(width)[:, None] + sub[None, :]).reshape(-1)
    ys = (np.arange(height)[:, None] + sub[None, :]).reshape(-1)
    dx = xs[None, :] - cx
    dy = ys[:, None] - cy
    c, s = math.cos(angle), math.sin(angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    inside = (np.abs(u) <= ex / 2) & (np.abs(v) <= ey / 2)
    return inside.reshape(height, 4, width, 4).mean(axis=(1, 3))


def _direction(motion: str, label: int) -> tuple[float, float]:
    if motion == "translate-4dir":
        return ((0.0, -1.0), (0.0, 1.0), (-1.0, 0.0), (1.0, 0.0))[label]
    theta = label * math.pi / 4
    dx, dy = math.cos(theta), -math.sin(theta)
    return (0.0 if abs(dx) < 1e-12 else dx, 0.0 if abs(dy) < 1e-12 else dy)


def render_video(params: dict, spec: SynthSpec, noise_rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Render a (C, T, H, W) float32 clip from explicit motion parameters.

    ``params`` keys: kind, dims, start (x, y), velocity (vx, vy) in px/frame,
    angle, angular_velocity, color (per-channel intensities).
    """
    T, H, W = spec.frames, spec.height, spec.width
    frames = np.empty((T, H, W))
    sx, sy = params["start"]
    vx, vy = params["velocity"]
    for t in range(T):
        center = (sx + vx * t, sy + vy * t)
        angle = params.get("angle", 0.0) + params.get("angular_velocity", 0.0) * t
        frames[t] = render_shape(params["kind"], center, params["dims"], H, W, angle)
    color = np.asarray(params["color"], dtype=np.float64)
    video = color[:, None, None, None] * frames[None]
    if noise_rng is not None and spec.noise_sigma > 0:
        video = video + noise_rng.normal(0.0, spec.noise_sigma, size=video.shape)
    return np.clip(video, 0.0, 1.0).astype(np.float32)


def _half_extents(kind: str, dims) -> tuple[float, float]:
    if kind == "blob":
        return float(dims) / 2, float(dims) / 2
    return dims[0] / 2, dims[1] / 2


def sample_motion(spec: SynthSpec, label: int, rng: np.random.Generator) -> dict:
    """Draw the shape, trajectory and color of one video of class ``label``."""
    T, H, W = spec.frames, spec.height, spec.width
    rotate_family = spec.motion == "rotate-vs-translate"
    kind = "bar" if rotate_family else spec.shapes[int(rng.integers(len(spec.shapes)))]
    size = float(rng.uniform(*spec.size_range))
    speed = float(rng.uniform(*spec.velocity_range))
    color = rng.uniform(*spec.intensity_range, size=spec.channels)
    angle, angular = 0.0, 0.0
    if kind == "blob":
        dims = size
    elif kind == "rectangle":
        aspect = float(rng.uniform(0.6, 1.0))
        dims = (size, size * aspect) if rng.random() < 0.5 else (size * aspect, size)
    else:
        dims = (bar_length(size), 1.5) if rng.random() < 0.5 else (1.5, bar_length(size))

    if rotate_family:
        dims = (bar_length(size), 1.5)
        angle = float(rng.uniform(0, math.pi))
        radius = dims[0] / 2
        if label == 0:  # rotate: tip speed equals the sampled speed
            angular = speed / radius * (1 if rng.random() < 0.5 else -1)
            velocity = (0.0, 0.0)
        else:
            theta = float(rng.uniform(0, 2 * math.pi))
            velocity = (speed * math.cos(theta), speed * math.sin(theta))
        hx = hy = radius
    else:
        dx, dy = _direction(spec.motion, label)
        velocity = (speed * dx, speed * dy)
        hx, hy = _half_extents(kind, dims)

    start = []
    for half, v, extent in ((hx, velocity[0], W), (hy, velocity[1], H)):
        travel = v * (T - 1)
        lo = half - min(travel, 0.0)
        hi = extent - half - max(travel, 0.0)
        if hi < lo:
            raise ConfigError("data.velocity_range: trajectory cannot stay inside the frame")
        start.append(float(rng.uniform(lo, hi)))
    return {
        "kind": kind,
        "dims": dims,
        "start": tuple(start),
        "velocity": velocity,
        "angle": angle,
        "angular_velocity": angular,
        "color": tuple(float(c) for c in color),
    }


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

def _split_key(seed: int, video_id: int) -> str:
    return hashlib.sha256(f"{seed}:{video_id}".encode()).hexdigest()


@dataclass
class Dataset:
    spec: Optional[SynthSpec]
    clips: list
    splits: dict  # video_id -> "train" | "val"
    num_classes: int
    flip_map: Optional[tuple] = None

    def split(self, name: str) -> list[VideoClip]:
        return [c for c in self.clips if self.splits[c.video_id] == name]

    @property
    def train(self) -> list[VideoClip]:
        return self.split("train")

    @property
    def val(self) -> list[VideoClip]:
        return self.split("val")

    def arrays(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        clips = self.split(name)
        if not clips:
            raise DataError(f"split {name!r} is empty")
        return np.stack([c.data for c in clips]), np.array([c.label for c in clips], dtype=np.int64)

    def channel_mean(self, name: str = "train") -> np.ndarray:
        x, _ = self.arrays(name)
        return x.mean(axis=(0, 2, 3, 4), dtype=np.float64)


def generate(spec: SynthSpec) -> Dataset:
    """Render ``samples_per_class`` videos per class and split them 80/20.

    Video ``i`` has label ``i % num_classes`` and its own RNG stream seeded
    from (seed, i). Within each class the validation share is the lowest
    hash(seed, video_id) entries.
    """
    spec.validate()
    K = spec.num_classes
    clips = []
    for vid in range(K * spec.samples_per_class):
        label = vid % K
        rng = np.random.default_rng([spec.seed, vid])
        params = sample_motion(spec, label, rng)
        clips.append(VideoClip(render_video(params, spec, rng), label, vid, {"motion": params}))
    splits = {}
    n_val = int(round(spec.samples_per_class * spec.val_fraction))
    for k in range(K):
        ids = sorted((c.video_id for c in clips if c.label == k), key=lambda v: _split_key(spec.seed, v))
        for i, vid in enumerate(ids):
            splits[vid] = "val" if i < n_val else "train"
    return Dataset(spec, clips, splits, K, FLIP_MAPS[spec.motion])


def frame_shuffled(dataset: Dataset, seed: int = 0) -> Dataset:
    """Copy of ``dataset`` with each video's frames randomly permuted."""
    clips = []
    for c in dataset.clips:
        perm = np.random.default_rng([seed, c.video_id]).permutation(c.data.shape[1])
        clips.append(VideoClip(c.data[:, perm].copy(), c.label, c.video_id, {**c.meta, "frame_perm": perm.tolist()}))
    return Dataset(dataset.spec, clips, dict(dataset.splits), dataset.num_classes, dataset.flip_map)


def pixel_sum_histogram(dataset: Dataset, bins: int = 16) -> list[int]:
    """Histogram of per-video pixel sums over [0, C*T*H*W / 8)."""
    sums = np.array([float(c.data.sum(dtype=np.float64)) for c in dataset.clips])
    C, T, H, W = dataset.clips[0].data.shape
    counts, _ = np.histogram(sums, bins=bins, range=(0.0, C * T * H * W / 8))
    return counts.tolist()


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def hflip(data: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(data[..., ::-1])


def crop(data: np.ndarray, top: int, left: int, size: int) -> np.ndarray:
    H, W = data.shape[-2:]
    if size > H or size > W:
        raise ConfigError(f"crop size {size} larger than frame {H}x{W}")
    return np.ascontiguousarray(data[..., top : top + size, left : left + size])


def center_crop(data: np.ndarray, size: int) -> np.ndarray:
    H, W = data.shape[-2:]
    if size > H or size > W:
        raise ConfigError(f"crop size {size} larger than frame {H}x{W}")
    return crop(data, (H - size) // 2, (W - size) // 2, size)


def five_crop(data: np.ndarray, size: int) -> list[np.ndarray]:
    """Four corner crops and the center crop, identical window for every frame."""
    H, W = data.shape[-2:]
    if size > H or size > W:
        raise ConfigError(f"crop size {size} larger than frame {H}x{W}")
    corners = [(0, 0), (0, W - size), (H - size, 0), (H - size, W - size)]
    return [crop(data, t, l, size) for t, l in corners] + [center_crop(data, size)]


def random_crop(data: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    H, W = data.shape[-2:]
    if size > H or size > W:
        raise ConfigError(f"crop size {size} larger than frame {H}x{W}")
    return crop(data, int(rng.integers(H - size + 1)), int(rng.integers(W - size + 1)), size)


def resize_min_side(data: np.ndarray, min_side: int) -> np.ndarray:
    """Bilinear upscale so the shorter spatial side is at least ``min_side``."""
    H, W = data.shape[-2:]
    if min(H, W) >= min_side:
        return data
    from scipy.ndimage import zoom

    f = min_side / min(H, W)
    factors = (1.0,) * (data.ndim - 2) + (f, f)
    return zoom(data, factors, order=1).astype(data.dtype)


@dataclass
class AugmentPolicy:
    """``crop`` None keeps full frames. ``five_crop`` picks one of the five
    standard crops (and trains on it) instead of an arbitrary window; frames
    smaller than ``crop + resize_margin`` are upscaled first."""

    crop: Optional[int] = None
    five_crop: bool = False
    resize_margin: int = 10
    flip_p: float = 0.0
    mean: Optional[np.ndarray] = None


def augment(clip: VideoClip, policy: AugmentPolicy, rng: np.random.Generator,
            flip_map: Optional[Sequence[int]] = None) -> VideoClip:
    """Training-time augmentation of one clip.

    Horizontal flips are applied only if ``flip_map`` is given and relabel
    the clip through it.
    """
    data, label = clip.data, clip.label
    if policy.crop is not None:
        if policy.five_crop:
            data = resize_min_side(data, policy.crop + policy.resize_margin)
            data = five_crop(data, policy.crop)[int(rng.integers(5))]
        else:
            data = random_crop(data, policy.crop, rng)
    if flip_map is not None and policy.flip_p > 0 and rng.random() < policy.flip_p:
        data = hflip(data)
        label = int(flip_map[label])
    if policy.mean is not None:
        data = mean_subtract(data, policy.mean)
    return VideoClip(data, label, clip.video_id, clip.meta)


def eval_view(data: np.ndarray, policy: AugmentPolicy) -> np.ndarray:
    """Deterministic test-time view: optional resize + center crop, mean subtraction."""
    if policy.crop is not None:
        if policy.five_crop:
            data = resize_min_side(data, policy.crop + policy.resize_margin)
        data = center_crop(data, policy.crop)
    if policy.mean is not None:
        data = mean_subtract(data, policy.mean)
    return data


def mean_subtract(data: np.ndarray, mean) -> np.ndarray:
    """Subtract a per-channel mean from (C, T, H, W) or (N, C, T, H, W) data."""
    mean = np.asarray(mean, dtype=np.float64)
    shape = (-1, 1, 1, 1)
    return (data - mean.reshape(shape)).astype(data.dtype)


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def clip_file_size(dims: Sequence[int]) -> int:
    return CLIP_HEADER.size + 4 * int(np.prod(dims))


def write_clip(clip: VideoClip, path) -> None:
    data = np.ascontiguousarray(clip.data, dtype="<f4")
    if data.ndim != 4:
        raise DataError(f"clip data must be (C, T, H, W), got {data.shape}")
    header = CLIP_HEADER.pack(CLIP_MAGIC, CLIP_VERSION, 0, 4, *data.shape, int(clip.label), int(clip.video_id))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes())
    os.replace(tmp, path)


def read_clip(path) -> VideoClip:
    raw = Path(path).read_bytes()
    if len(raw) < CLIP_HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(raw)} of {CLIP_HEADER.size} bytes)", len(raw))
    magic, version, dtype, rank, c, t, h, w, label, vid = CLIP_HEADER.unpack_from(raw)
    if magic != CLIP_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", 0)
    if version != CLIP_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", 4)
    if dtype != 0:
        raise FormatError(f"{path}: unsupported dtype code {dtype}", 8)
    if rank != 4:
        raise FormatError(f"{path}: rank must be 4, got {rank}", 9)
    expected = clip_file_size((c, t, h, w))
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}", min(len(raw), expected))
    data = np.frombuffer(raw, dtype="<f4", offset=CLIP_HEADER.size).reshape(c, t, h, w).astype(np.float32)
    return VideoClip(data, int(label), int(vid))


def write_dataset(dataset: Dataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for c in dataset.clips:
        rel = f"clips/{c.video_id:06d}.svc"
        (directory / "clips").mkdir(exist_ok=True)
        write_clip(c, directory / rel)
        lines.append(f"{rel}\t{c.label}\t{dataset.splits[c.video_id]}")
    (directory / "index.tsv").write_text("\n".join(lines) + "\n")
    meta = {"num_classes": dataset.num_classes, "flip_map": dataset.flip_map,
            "spec": dataset.spec.to_dict() if dataset.spec else None}
    (directory / "spec.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return directory


def read_dataset(directory) -> Dataset:
    directory = Path(directory)
    index = directory / "index.tsv"
    if not index.exists():
        raise DataError(f"{directory}: no index.tsv")
    meta = json.loads((directory / "spec.json").read_text()) if (directory / "spec.json").exists() else {}
    clips, splits = [], {}
    for lineno, line in enumerate(index.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3 or parts[2] not in ("train", "val"):
            raise DataError(f"{index}:{lineno}: expected 'path<TAB>label<TAB>split'")
        clip = read_clip(directory / parts[0])
        if clip.label != int(parts[1]):
            raise DataError(f"{index}:{lineno}: label {parts[1]} disagrees with clip header {clip.label}")
        clips.append(clip)
        splits[clip.video_id] = parts[2]
    spec = SynthSpec(**meta["spec"]) if meta.get("spec") else None
    num_classes = meta.get("num_classes") or (max(c.label for c in clips) + 1)
    flip_map = tuple(meta["flip_map"]) if meta.get("flip_map") else None
    return Dataset(spec, clips, splits, num_classes, flip_map)
