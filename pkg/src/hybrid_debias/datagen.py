"""Procedural biased datasets in the style of Colored MNIST.

Each class owns a fixed binary shape template (the intrinsic attribute).
Samples are noisy copies of their class template painted with a palette
color (the bias attribute).  Bias-aligned samples use the color of their own
class; bias-conflicting samples use the color of a different class.

Features are stored channel-first (C, H, W) and flattened row-major.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# Ten well separated RGB colors, indexed by class.
PALETTE = np.array(
    [
        [1.00, 0.00, 0.00],  # red
        [0.00, 1.00, 0.00],  # green
        [0.00, 0.00, 1.00],  # blue
        [1.00, 1.00, 0.00],  # yellow
        [1.00, 0.00, 1.00],  # magenta
        [0.00, 1.00, 1.00],  # cyan
        [1.00, 0.50, 0.00],  # orange
        [0.50, 0.00, 1.00],  # violet
        [1.00, 1.00, 1.00],  # white
        [0.50, 0.50, 0.50],  # gray
    ]
)

CHANNELS = 3

# spawn-key tags keep the PRNG streams of the different draws disjoint
_TEMPLATE, _ASSIGN, _SAMPLE, _TEST, _REDUCE = range(5)


class DatasetError(ValueError):
    """Invalid dataset parameters."""


class FormatError(ValueError):
    """Malformed binary file; ``offset`` is where parsing stopped."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def round_half_up(x: float) -> int:
    # tolerate representation error such as 600 * 0.05 = 30.000000000000004
    return int(math.floor(x + 0.5 + 1e-9))


@dataclass(frozen=True)
class DatasetSpec:
    samples_per_class: int
    sigma: float
    p: float = 1.0
    num_classes: int = 10
    height: int = 12
    width: int = 12
    template_density: float = 0.35
    pixel_flip_prob: float = 0.05
    color_noise_std: float = 0.05
    max_shift: int = 1
    seed: int = 0
    channels: int = field(default=CHANNELS)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 2 <= self.num_classes <= len(PALETTE):
            raise DatasetError(
                f"num_classes must lie in [2, {len(PALETTE)}], got {self.num_classes}")
        if self.channels != CHANNELS:
            raise DatasetError(f"channels is fixed at {CHANNELS}, got {self.channels}")
        for name in ("height", "width"):
            if getattr(self, name) < 1:
                raise DatasetError(f"{name} must be positive")
        if self.samples_per_class < 0:
            raise DatasetError("samples_per_class must be non-negative")
        if not 0.0 <= self.sigma <= 1.0:
            raise DatasetError(f"sigma must lie in [0, 1], got {self.sigma}")
        if not 0.0 < self.p <= 1.0:
            raise DatasetError(f"p must lie in (0, 1], got {self.p}")
        for name in ("template_density", "pixel_flip_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise DatasetError(f"{name} must lie in [0, 1], got {getattr(self, name)}")
        if self.max_shift < 0:
            raise DatasetError("max_shift must be non-negative")
        if self.color_noise_std < 0:
            raise DatasetError("color_noise_std must be non-negative")
        if not 0 <= self.seed < 2**64:
            raise DatasetError("seed must be a 64-bit unsigned integer")

    @property
    def dim(self) -> int:
        return self.channels * self.height * self.width

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass(eq=False)
class LabeledDataset:
    features: np.ndarray  # (n, d) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64
    aligned_flags: np.ndarray  # (n,) bool, ground truth for evaluation only
    spec: DatasetSpec

    def __post_init__(self):
        n = len(self.labels)
        if self.features.ndim != 2 or self.features.shape[0] != n or len(self.aligned_flags) != n:
            raise DatasetError("features, labels and aligned_flags must share length n")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.features[idx], self.labels[idx], self.aligned_flags[idx], self.spec)

    def equals(self, other: "LabeledDataset") -> bool:
        return (
            self.spec == other.spec
            and self.features.dtype == other.features.dtype
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.aligned_flags, other.aligned_flags)
        )


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


def class_templates(spec: DatasetSpec) -> np.ndarray:
    """Binary (num_classes, H, W) shape templates, one per class."""
    out = np.empty((spec.num_classes, spec.height, spec.width), dtype=bool)
    for k in range(spec.num_classes):
        out[k] = _rng(spec.seed, _TEMPLATE, k).random((spec.height, spec.width)) < spec.template_density
    return out


def _shift(a: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Translate a 2-D mask, filling vacated pixels with background."""
    out = np.zeros_like(a)
    h, w = a.shape
    out[max(dy, 0):h + min(dy, 0), max(dx, 0):w + min(dx, 0)] = a[max(-dy, 0):h + min(-dy, 0), max(-dx, 0):w + min(-dx, 0)]
    return out


def _render(template: np.ndarray, color_idx: int, spec: DatasetSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.max_shift:
        dy, dx = rng.integers(-spec.max_shift, spec.max_shift + 1, size=2)
        template = _shift(template, int(dy), int(dx))
    flips = rng.random(template.shape) < spec.pixel_flip_prob
    mask = (template ^ flips).astype(np.float64)
    img = PALETTE[color_idx][:, None, None] * mask[None]
    img = img + rng.normal(0.0, spec.color_noise_std, size=img.shape) * mask[None]
    return np.clip(img, 0.0, 1.0).reshape(-1)


def _other_color(k: int, num_classes: int, rng: np.random.Generator) -> int:
    c = int(rng.integers(num_classes - 1))
    return c if c < k else c + 1


def generate_dataset(spec: DatasetSpec) -> LabeledDataset:
    """Full biased training set with exactly round(samples_per_class * sigma)
    conflicting samples per class.  Deterministic in ``spec``."""
    spec.validate()
    templates = class_templates(spec)
    n_conf = round_half_up(spec.samples_per_class * spec.sigma)
    n = spec.num_classes * spec.samples_per_class
    feats = np.empty((n, spec.dim), dtype=np.float32)
    labels = np.repeat(np.arange(spec.num_classes), spec.samples_per_class).astype(np.int64)
    aligned = np.ones(n, dtype=bool)
    row = 0
    for k in range(spec.num_classes):
        conflicting = np.zeros(spec.samples_per_class, dtype=bool)
        conflicting[_rng(spec.seed, _ASSIGN, k).permutation(spec.samples_per_class)[:n_conf]] = True
        for i in range(spec.samples_per_class):
            rng = _rng(spec.seed, _SAMPLE, k, i)
            color = _other_color(k, spec.num_classes, rng) if conflicting[i] else k
            feats[row] = _render(templates[k], color, spec, rng)
            aligned[row] = not conflicting[i]
            row += 1
    return LabeledDataset(feats, labels, aligned, spec)


def reduce_dataset(ds: LabeledDataset, p: float, seed: int) -> LabeledDataset:
    """Keep round(n_class * p) samples of every class, drawn without replacement."""
    if not 0.0 < p <= 1.0:
        raise DatasetError(f"p must lie in (0, 1], got {p}")
    rng = _rng(seed, _REDUCE)
    keep = []
    for k in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == k)
        m = round_half_up(len(idx) * p)
        keep.append(np.sort(rng.choice(idx, size=m, replace=False)))
    keep = np.concatenate(keep) if keep else np.empty(0, dtype=np.int64)
    out = ds.subset(keep)
    out.spec = dataclasses.replace(ds.spec, p=p)
    return out


def make_unbiased_test(spec: DatasetSpec, n: int, seed: int) -> LabeledDataset:
    """Test set whose color is uniform over all classes, independent of the label.

    Shapes come from the same templates as the training data (``spec.seed``);
    ``seed`` only drives the per-sample noise and colors.
    """
    spec.validate()
    if n < 0 or n % spec.num_classes:
        raise DatasetError(f"n={n} is not divisible by num_classes={spec.num_classes}")
    per_class = n // spec.num_classes
    templates = class_templates(spec)
    feats = np.empty((n, spec.dim), dtype=np.float32)
    labels = np.repeat(np.arange(spec.num_classes), per_class).astype(np.int64)
    aligned = np.empty(n, dtype=bool)
    row = 0
    for k in range(spec.num_classes):
        for i in range(per_class):
            rng = _rng(seed, _TEST, k, i)
            color = int(rng.integers(spec.num_classes))
            feats[row] = _render(templates[k], color, spec, rng)
            aligned[row] = color == k
            row += 1
    test_spec = dataclasses.replace(spec, samples_per_class=per_class, sigma=1.0 - 1.0 / spec.num_classes)
    return LabeledDataset(feats, labels, aligned, test_spec)


# ---------------------------------------------------------------------------
# Binary file format (little-endian):
#   magic[4] | version u32 | n u64 | d u64 | num_classes u32
#   | features f32[n*d] | labels u32[n] | flags u8[n] | meta_len u32 | meta utf-8 json
# ---------------------------------------------------------------------------

FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQQI")


def write_table(path, magic: bytes, features, labels, flags, num_classes: int, meta: dict) -> None:
    features = np.ascontiguousarray(features, dtype="<f4")
    n, d = features.shape
    body = json.dumps(meta, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_HEADER.pack(magic, FORMAT_VERSION, n, d, num_classes))
        f.write(features.tobytes())
        f.write(np.asarray(labels, dtype="<u4").tobytes())
        f.write(np.asarray(flags, dtype=np.uint8).tobytes())
        f.write(struct.pack("<I", len(body)))
        f.write(body)
    tmp.replace(path)


def read_table(path, magic: bytes):
    """Inverse of :func:`write_table`; returns (features, labels, flags, num_classes, meta)."""
    buf = Path(path).read_bytes()
    pos = 0

    def take(nbytes: int, what: str) -> bytes:
        nonlocal pos
        if pos + nbytes > len(buf):
            raise FormatError(f"truncated file while reading {what}", pos)
        chunk = buf[pos:pos + nbytes]
        pos += nbytes
        return chunk

    got_magic, version, n, d, num_classes = _HEADER.unpack(take(_HEADER.size, "header"))
    if got_magic != magic:
        raise FormatError(f"bad magic {got_magic!r}, expected {magic!r}", 0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    features = np.frombuffer(take(4 * n * d, "features"), dtype="<f4").reshape(n, d).astype(np.float32)
    labels = np.frombuffer(take(4 * n, "labels"), dtype="<u4").astype(np.int64)
    raw_flags = np.frombuffer(take(n, "aligned flags"), dtype=np.uint8)
    if raw_flags.size and raw_flags.max() > 1:
        raise FormatError("aligned flag outside {0, 1}", pos - n + int(np.argmax(raw_flags > 1)))
    (meta_len,) = struct.unpack("<I", take(4, "metadata length"))
    meta_start = pos
    try:
        meta = json.loads(take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"metadata is not valid UTF-8 JSON: {exc}", meta_start) from None
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes", pos)
    if labels.size and labels.max() >= num_classes:
        raise FormatError("label out of range", _HEADER.size + 4 * n * d)
    return features, labels, raw_flags.astype(bool), num_classes, meta


def write_dataset(ds: LabeledDataset, path) -> None:
    write_table(path, b"DBDS", ds.features, ds.labels, ds.aligned_flags, ds.num_classes, ds.spec.to_dict())


def read_dataset(path) -> LabeledDataset:
    features, labels, flags, num_classes, meta = read_table(path, b"DBDS")
    try:
        spec = DatasetSpec.from_dict(meta)
    except (TypeError, DatasetError) as exc:
        raise FormatError(f"embedded dataset spec is invalid: {exc}", _HEADER.size) from None
    if spec.num_classes != num_classes or (len(labels) and features.shape[1] != spec.dim):
        raise FormatError("header disagrees with embedded spec", 0)
    return LabeledDataset(features, labels, flags, spec)
