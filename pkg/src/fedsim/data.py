"""Dataset ingestion, partitioning, and trojan/poisoning transforms.

Images travel as float64 arrays in [0, 1] with shape [N, H, W]; labels as
int64 class ids. The on-disk format is the classic IDX pair (big-endian
magic + dims header, u8 payload) used by the MNIST family, so any corpus
in that format loads unchanged.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, IngestionError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


@dataclass
class LabeledDataset:
    images: np.ndarray  # [N, H, W] float64 in [0, 1]
    labels: np.ndarray  # [N] int64

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 3:
            raise ConfigError(f"images must be [N, H, W], got shape {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ConfigError(
                f"labels shape {self.labels.shape} does not match {self.images.shape[0]} images"
            )
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ConfigError("image values must lie in [0, 1]")
        if self.labels.size and self.labels.min() < 0:
            raise ConfigError("labels must be non-negative")

    def __len__(self):
        return self.images.shape[0]

    def subset(self, idx):
        return LabeledDataset(self.images[idx], self.labels[idx])


def class_subset(ds: LabeledDataset, cls: int) -> LabeledDataset:
    return ds.subset(np.flatnonzero(ds.labels == cls))


# ---------------------------------------------------------------------------
# IDX files


def _read_u32(f, path, field):
    raw = f.read(4)
    if len(raw) != 4:
        raise IngestionError(f"{path}: truncated header while reading {field}")
    return struct.unpack(">I", raw)[0]


def load_idx(images_path, labels_path) -> LabeledDataset:
    """Read an images/labels IDX pair; u8 pixels are scaled by 1/255."""
    with open(images_path, "rb") as f:
        magic = _read_u32(f, images_path, "magic")
        if magic != IMAGES_MAGIC:
            raise IngestionError(
                f"{images_path}: bad magic 0x{magic:08x}, expected 0x{IMAGES_MAGIC:08x}"
            )
        n = _read_u32(f, images_path, "image count")
        h = _read_u32(f, images_path, "image height")
        w = _read_u32(f, images_path, "image width")
        payload = f.read()
        if len(payload) != n * h * w:
            raise IngestionError(
                f"{images_path}: payload has {len(payload)} bytes, header promises {n * h * w}"
            )
    with open(labels_path, "rb") as f:
        magic = _read_u32(f, labels_path, "magic")
        if magic != LABELS_MAGIC:
            raise IngestionError(
                f"{labels_path}: bad magic 0x{magic:08x}, expected 0x{LABELS_MAGIC:08x}"
            )
        n_labels = _read_u32(f, labels_path, "label count")
        if n_labels != n:
            raise IngestionError(
                f"{labels_path}: label count {n_labels} != image count {n} in {images_path}"
            )
        raw_labels = f.read()
        if len(raw_labels) != n:
            raise IngestionError(
                f"{labels_path}: payload has {len(raw_labels)} bytes, header promises {n}"
            )
    images = np.frombuffer(payload, dtype=np.uint8).reshape(n, h, w).astype(np.float64) / 255.0
    labels = np.frombuffer(raw_labels, dtype=np.uint8).astype(np.int64)
    return LabeledDataset(images, labels)


def write_idx(ds: LabeledDataset, images_path, labels_path):
    """Write the IDX pair; float pixels are quantized to round(v * 255)."""
    n, h, w = ds.images.shape
    if ds.labels.size and ds.labels.max() > 255:
        raise ConfigError("IDX labels are u8; labels above 255 cannot be written")
    u8 = np.round(ds.images * 255.0).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGES_MAGIC, n, h, w))
        f.write(u8.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", LABELS_MAGIC, n))
        f.write(ds.labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# partitioning


def partition_iid(num_samples, num_agents, rng) -> list:
    """Random disjoint shards covering all samples; sizes differ by <= 1."""
    if num_agents < 1:
        raise ConfigError(f"num_agents must be >= 1, got {num_agents}")
    if num_agents > num_samples:
        raise ConfigError(
            f"cannot give {num_agents} agents non-empty shards from {num_samples} samples"
        )
    return list(np.array_split(rng.permutation(num_samples), num_agents))


def partition_label_skew(labels, num_agents, labels_per_agent, rng) -> list:
    """Each agent samples from labels_per_agent randomly chosen classes.

    Every class's samples are split evenly among the agents assigned to it,
    so with labels_per_agent equal to the class count the shard histograms
    match the IID ones. Classes assigned to no agent go unused.
    """
    labels = np.asarray(labels)
    n_classes = int(labels.max()) + 1
    if num_agents < 1:
        raise ConfigError(f"num_agents must be >= 1, got {num_agents}")
    if not 1 <= labels_per_agent <= n_classes:
        raise ConfigError(
            f"labels_per_agent must be in [1, {n_classes}], got {labels_per_agent}"
        )
    assigned = [rng.choice(n_classes, size=labels_per_agent, replace=False) for _ in range(num_agents)]
    holders = {c: [a for a in range(num_agents) if c in assigned[a]] for c in range(n_classes)}
    shards = [[] for _ in range(num_agents)]
    for c in range(n_classes):
        if not holders[c]:
            continue
        idx = rng.permutation(np.flatnonzero(labels == c))
        if len(idx) < len(holders[c]):
            raise ConfigError(
                f"class {c} has {len(idx)} samples for {len(holders[c])} agents; "
                "use fewer agents or more data"
            )
        for agent, chunk in zip(holders[c], np.array_split(idx, len(holders[c]))):
            shards[agent].append(chunk)
    out = [np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64) for parts in shards]
    for a, shard in enumerate(out):
        if shard.size == 0:
            raise ConfigError(f"agent {a} received an empty shard; use fewer agents or more data")
    return out


# ---------------------------------------------------------------------------
# trojan patterns and poisoning


def plus_pattern():
    """5x5 plus sign anchored at the top-left corner, intensity 1.0."""
    pixels = {(2, c) for c in range(5)} | {(r, 2) for r in range(5)}
    return tuple(sorted((r, c, 1.0) for r, c in pixels))


def square_pattern(side=28):
    """Solid 5x5 block in the bottom-right corner, intensity 1.0."""
    lo = side - 5
    return tuple((r, c, 1.0) for r in range(lo, side) for c in range(lo, side))


@dataclass(frozen=True)
class TrojanSpec:
    pattern: tuple  # ((row, col, intensity), ...)
    base_class: int
    target_class: int
    poison_fraction: float
    segments: tuple = None  # optional explicit split for distributed attacks

    def __post_init__(self):
        if self.base_class == self.target_class:
            raise ConfigError("base_class and target_class must differ")
        if not 0.0 <= self.poison_fraction <= 1.0:
            raise ConfigError(f"poison_fraction must be in [0, 1], got {self.poison_fraction}")
        if not self.pattern:
            raise ConfigError("trojan pattern must contain at least one pixel")
        for r, c, v in self.pattern:
            if r < 0 or c < 0:
                raise ConfigError(f"trojan pixel ({r}, {c}) has negative coordinates")
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"trojan pixel ({r}, {c}) intensity {v} outside [0, 1]")
        if self.segments is not None:
            merged = sorted(px for seg in self.segments for px in seg)
            if merged != sorted(self.pattern):
                raise ConfigError("trojan segments must partition the pattern exactly")


def apply_trojan(images, pattern) -> np.ndarray:
    """Stamp the pattern onto a copy of images [N, H, W]. Idempotent."""
    images = np.asarray(images, dtype=np.float64)
    out = images.copy()
    h, w = images.shape[1], images.shape[2]
    for r, c, v in pattern:
        if r >= h or c >= w:
            raise ConfigError(f"trojan pixel ({r}, {c}) outside {h}x{w} image")
        out[:, r, c] = v
    return out


def poison_shard(shard: LabeledDataset, trojan: TrojanSpec, rng, pattern=None) -> LabeledDataset:
    """Pattern and relabel floor(P * #base) base-class samples of the shard.

    pattern overrides trojan.pattern (distributed attacks stamp only a
    segment). Non-base samples are untouched; a shard without base-class
    samples comes back unchanged.
    """
    if pattern is None:
        pattern = trojan.pattern
    base_idx = np.flatnonzero(shard.labels == trojan.base_class)
    k = int(np.floor(trojan.poison_fraction * len(base_idx)))
    if k == 0:
        return LabeledDataset(shard.images.copy(), shard.labels.copy())
    chosen = np.sort(rng.choice(base_idx, size=k, replace=False))
    images = shard.images.copy()
    labels = shard.labels.copy()
    images[chosen] = apply_trojan(images[chosen], pattern)
    labels[chosen] = trojan.target_class
    return LabeledDataset(images, labels)


def build_backdoor_valset(val: LabeledDataset, trojan: TrojanSpec) -> LabeledDataset:
    """All base-class validation samples, patterned and labeled as target."""
    base = class_subset(val, trojan.base_class)
    images = apply_trojan(base.images, trojan.pattern)
    labels = np.full(len(base), trojan.target_class, dtype=np.int64)
    return LabeledDataset(images, labels)
