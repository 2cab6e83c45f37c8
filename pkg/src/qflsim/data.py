"""Dataset ingestion and partitioning.

Parses the standard IDX container (big-endian magic + dims, raw uint8
payload), filters to a class subset, pools 28x28 images into a 2x4 grid of
block means (8 features in [0, 1]), and shards the training split across
clients either IID (round-robin per class) or by Dirichlet-sampled class
proportions. Everything is a pure function of its inputs plus the seed.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, IngestionError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass(frozen=True)
class RawDataset:
    images: np.ndarray  # (n, 28, 28) uint8
    labels: np.ndarray  # (n,) uint8


@dataclass(frozen=True)
class ProcessedDataset:
    features: np.ndarray  # (n, 8) float in [0, 1]
    labels: np.ndarray  # (n,) int in 0..C-1
    class_set: tuple[int, ...]  # original digits, index = remapped label


@dataclass(frozen=True)
class Partition:
    assignment: np.ndarray  # sample index -> client id
    n_clients: int

    def client_indices(self, client: int) -> np.ndarray:
        return np.nonzero(self.assignment == client)[0]


def _read_be32(buf: bytes, offset: int, what: str) -> int:
    if offset + 4 > len(buf):
        raise IngestionError(f"truncated while reading {what}", offset=offset)
    return struct.unpack_from(">I", buf, offset)[0]


def parse_idx(image_bytes: bytes, label_bytes: bytes) -> RawDataset:
    """Parse paired IDX image/label payloads, cross-checking counts."""
    magic = _read_be32(image_bytes, 0, "image magic")
    if magic != IMAGE_MAGIC:
        raise IngestionError(
            f"bad image magic 0x{magic:08x}, expected 0x{IMAGE_MAGIC:08x}", offset=0
        )
    count = _read_be32(image_bytes, 4, "image count")
    rows = _read_be32(image_bytes, 8, "row count")
    cols = _read_be32(image_bytes, 12, "column count")
    expected = 16 + count * rows * cols
    if len(image_bytes) < expected:
        raise IngestionError(
            f"image payload ends early, expected {expected} bytes",
            offset=len(image_bytes),
        )
    images = np.frombuffer(
        image_bytes, dtype=np.uint8, count=count * rows * cols, offset=16
    ).reshape(count, rows, cols)

    magic = _read_be32(label_bytes, 0, "label magic")
    if magic != LABEL_MAGIC:
        raise IngestionError(
            f"bad label magic 0x{magic:08x}, expected 0x{LABEL_MAGIC:08x}", offset=0
        )
    n_labels = _read_be32(label_bytes, 4, "label count")
    if len(label_bytes) < 8 + n_labels:
        raise IngestionError(
            f"label payload ends early, expected {8 + n_labels} bytes",
            offset=len(label_bytes),
        )
    labels = np.frombuffer(label_bytes, dtype=np.uint8, count=n_labels, offset=8)
    if n_labels != count:
        raise IngestionError(
            f"image/label count mismatch: {count} images vs {n_labels} labels",
            offset=4,
        )
    if labels.size and labels.max() > 9:
        raise DataError("labels above 9 are not valid digits")
    return RawDataset(images=images, labels=labels)


def load_idx_pair(image_path, label_path) -> RawDataset:
    """Read raw or gzipped IDX files from local paths."""
    return parse_idx(_read_maybe_gz(image_path), _read_maybe_gz(label_path))


def _read_maybe_gz(path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"dataset file not found: {path}")
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def pool_features(images: np.ndarray) -> np.ndarray:
    """Average-pool (n, 28, 28) intensities into a 2x4 grid of block means."""
    if images.ndim != 3 or images.shape[1:] != (28, 28):
        raise DataError(f"expected (n, 28, 28) images, got {images.shape}")
    blocks = images.reshape(-1, 2, 14, 4, 7).astype(float)
    return blocks.mean(axis=(2, 4)).reshape(-1, 8) / 255.0


def preprocess(raw: RawDataset, class_set=(0, 1, 2, 3)) -> ProcessedDataset:
    """Filter to class_set, pool to 8 features, remap labels to 0..C-1."""
    class_set = tuple(class_set)
    if not class_set:
        raise DataError("class_set must be non-empty")
    if len(set(class_set)) != len(class_set):
        raise DataError("class_set has duplicates")
    mask = np.isin(raw.labels, class_set)
    if not mask.any():
        raise DataError(f"no samples left after filtering to classes {class_set}")
    remap = {digit: i for i, digit in enumerate(class_set)}
    labels = np.array([remap[int(y)] for y in raw.labels[mask]], dtype=np.int64)
    features = pool_features(raw.images[mask])
    return ProcessedDataset(features=features, labels=labels, class_set=class_set)


# ---------------------------------------------------------------------------
# splitting and sharding
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitConfig:
    test_fraction: float = 0.2
    partition_mode: str = "iid"  # "iid" | "dirichlet"
    dirichlet_alpha: float = 0.5
    per_client_cap: int | None = 500  # desk-scale subsampling; None = all
    test_cap: int | None = 400

    def __post_init__(self):
        if not (0.0 <= self.test_fraction < 0.5):
            raise ConfigError("test_fraction must be in [0, 0.5)")
        if self.partition_mode not in ("iid", "dirichlet"):
            raise ConfigError(f"unknown partition mode {self.partition_mode!r}")
        if self.dirichlet_alpha <= 0:
            raise ConfigError("dirichlet_alpha must be positive")


def split_and_partition(
    processed: ProcessedDataset,
    n_clients: int,
    seed: int,
    config: SplitConfig = SplitConfig(),
):
    """Stratified train/test split plus per-client sharding.

    Returns (shards, test_set) where shards is a list of (features, labels)
    per client and test_set is a (features, labels) pair. IID dealing
    round-robins each class's shuffled samples across clients with a
    rotating pointer, so totals stay balanced; Dirichlet draws per-class
    client proportions instead.
    """
    if n_clients < 1:
        raise ConfigError("need at least one client")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    labels = processed.labels
    n_classes = len(processed.class_set)

    train_idx, test_idx = [], []
    for c in range(n_classes):
        members = np.nonzero(labels == c)[0]
        members = members[rng.permutation(members.size)]
        n_test = int(round(config.test_fraction * members.size))
        test_idx.append(members[:n_test])
        train_idx.append(members[n_test:])

    assignment = np.full(labels.size, -1, dtype=np.int64)
    if config.partition_mode == "iid":
        pointer = 0
        for c in range(n_classes):
            for idx in train_idx[c]:
                assignment[idx] = pointer % n_clients
                pointer += 1
    else:
        for attempt in range(100):
            trial = np.full(labels.size, -1, dtype=np.int64)
            for c in range(n_classes):
                props = rng.dirichlet(np.full(n_clients, config.dirichlet_alpha))
                members = train_idx[c]
                counts = _largest_remainder(props, members.size)
                start = 0
                for client, k in enumerate(counts):
                    trial[members[start : start + k]] = client
                    start += k
            sizes = np.bincount(trial[trial >= 0], minlength=n_clients)
            if sizes.min() > 0:
                assignment = trial
                break
        else:
            raise DataError(
                "could not draw a Dirichlet partition with every client non-empty"
            )

    shards = []
    for client in range(n_clients):
        idx = np.nonzero(assignment == client)[0]
        if idx.size == 0:
            raise DataError(f"client {client} received no samples")
        if config.per_client_cap is not None and idx.size > config.per_client_cap:
            keep = rng.permutation(idx.size)[: config.per_client_cap]
            keep.sort()
            idx = idx[keep]
        shards.append((processed.features[idx], processed.labels[idx]))

    test_all = np.concatenate(test_idx) if test_idx else np.empty(0, dtype=np.int64)
    test_all.sort()
    if config.test_cap is not None and test_all.size > config.test_cap:
        keep = rng.permutation(test_all.size)[: config.test_cap]
        keep.sort()
        test_all = test_all[keep]
    test_set = (processed.features[test_all], processed.labels[test_all])
    partition = Partition(assignment=assignment, n_clients=n_clients)
    return shards, test_set, partition


def _largest_remainder(props: np.ndarray, total: int) -> np.ndarray:
    """Integer counts proportional to props, summing exactly to total."""
    raw = props * total
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts
