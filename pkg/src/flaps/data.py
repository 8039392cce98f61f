"""Datasets, client shards, and one-hot attribute encoding.

Covers the inputs a simulated cohort needs: loading image/label pairs from
IDX binary files, loading labeled CSV files, generating synthetic class
blobs, slicing a dataset into per-client contiguous shards, and encoding
shard attributes as one-hot bit strings.
"""

from __future__ import annotations

import csv as _csv
import struct
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

# Shard sizes only wobble when shards are big enough for +-3 to be noise.
_JITTER_CAP = 3
_JITTER_MIN_BASE = 20


class IdxFormatError(ValueError):
    """Raised when an IDX file is malformed; message names the byte offset."""


class CodecError(ValueError):
    """Raised when one-hot encoding or decoding cannot proceed."""


@dataclass(eq=False)
class LabeledDataset:
    """Feature matrix plus integer labels.

    features: (n, d) float64, one row per example.
    labels: (n,) integers in [0, n_classes).
    """

    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {self.features.shape}")
        if self.labels.ndim != 1:
            raise ValueError(f"labels must be 1-D, got shape {self.labels.shape}")
        if len(self.features) != len(self.labels):
            raise ValueError(
                f"feature/label length mismatch: {len(self.features)} != {len(self.labels)}"
            )
        if self.n_classes < 1:
            raise ValueError("n_classes must be positive")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("labels must lie in [0, n_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices: np.ndarray | Sequence[int]) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.n_classes)


@dataclass
class ClientShard:
    """A client's contiguous slice of the training set, described by metadata."""

    user_id: int
    count: int
    min_index: int
    max_index: int
    cluster_id: int | None = None

    def __post_init__(self) -> None:
        if self.count < 1:
            raise ValueError("shard must hold at least one example")
        if self.min_index < 0:
            raise ValueError("min_index must be non-negative")
        if self.max_index - self.min_index + 1 != self.count:
            raise ValueError(
                f"index range [{self.min_index}, {self.max_index}] does not match count {self.count}"
            )

    def attributes(self) -> dict[str, int]:
        attrs = {
            "user_id": self.user_id,
            "count": self.count,
            "max_index": self.max_index,
            "min_index": self.min_index,
        }
        if self.cluster_id is not None:
            attrs["cluster_id"] = self.cluster_id
        return attrs

    def indices(self) -> np.ndarray:
        return np.arange(self.min_index, self.max_index + 1, dtype=np.int64)


def _read_idx(path: str, expected_magic: int) -> np.ndarray:
    """Parse one big-endian IDX file into a uint8 array."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: magic truncated at byte 0")
    (magic,) = struct.unpack(">i", raw[:4])
    if magic != expected_magic:
        raise IdxFormatError(
            f"{path}: bad magic 0x{magic:08x} at byte 0, expected 0x{expected_magic:08x}"
        )
    ndim = magic & 0xFF
    offset = 4
    dims = []
    for _ in range(ndim):
        if len(raw) < offset + 4:
            raise IdxFormatError(f"{path}: dimension header truncated at byte {offset}")
        (size,) = struct.unpack(">i", raw[offset : offset + 4])
        if size < 0:
            raise IdxFormatError(f"{path}: negative dimension at byte {offset}")
        dims.append(size)
        offset += 4
    total = int(np.prod(dims, dtype=np.int64)) if dims else 0
    if len(raw) - offset < total:
        raise IdxFormatError(
            f"{path}: payload truncated at byte {len(raw)}, expected {offset + total} bytes"
        )
    data = np.frombuffer(raw, dtype=np.uint8, count=total, offset=offset)
    return data.reshape(dims)


def load_idx(images_path: str, labels_path: str) -> LabeledDataset:
    """Load an image tensor file and a label vector file into one dataset.

    Pixels are scaled by 1/255 into [0, 1]; images are flattened row-major.
    """
    images = _read_idx(images_path, IMAGE_MAGIC)
    labels = _read_idx(labels_path, LABEL_MAGIC)
    if len(images) != len(labels):
        raise ValueError(
            f"image/label count mismatch: {len(images)} images vs {len(labels)} labels"
        )
    if len(labels) == 0:
        raise ValueError("empty dataset")
    features = images.reshape(len(images), -1).astype(np.float64) / 255.0
    n_classes = int(labels.max()) + 1
    return LabeledDataset(features, labels.astype(np.int64), n_classes)


def save_idx(dataset: LabeledDataset, images_path: str, labels_path: str) -> None:
    """Write a dataset back to an IDX image/label file pair.

    Features must sit on the 1/255 grid (as anything loaded via load_idx does).
    """
    scaled = dataset.features * 255.0
    pixels = np.rint(scaled)
    if not np.allclose(scaled, pixels, atol=1e-6):
        raise ValueError("features are not representable as bytes on the 1/255 grid")
    if pixels.min() < 0 or pixels.max() > 255:
        raise ValueError("features fall outside [0, 1]")
    if dataset.labels.max() > 255:
        raise ValueError("labels exceed one byte")
    n, d = dataset.features.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">iiii", IMAGE_MAGIC, n, 1, d))
        fh.write(pixels.astype(np.uint8).tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">ii", LABEL_MAGIC, n))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


def load_csv(path: str) -> LabeledDataset:
    """Load a CSV with a header row; the last column is the integer label."""
    features: list[list[float]] = []
    labels: list[int] = []
    with open(path, newline="") as fh:
        reader = _csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty file")
        width = len(header)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise ValueError(f"{path}: line {lineno}: expected {width} fields, got {len(row)}")
            try:
                features.append([float(v) for v in row[:-1]])
                labels.append(int(row[-1]))
            except ValueError as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from None
    if not labels:
        raise ValueError(f"{path}: no data rows")
    label_arr = np.asarray(labels, dtype=np.int64)
    if label_arr.min() < 0:
        raise ValueError(f"{path}: negative label")
    return LabeledDataset(np.asarray(features), label_arr, int(label_arr.max()) + 1)


def make_synthetic(
    n_examples: int,
    dim: int,
    n_classes: int,
    seed: int,
    noise: float = 0.06,
) -> LabeledDataset:
    """Generate near-balanced Gaussian class blobs with values clipped to [0, 1].

    Identical arguments always produce identical arrays.
    """
    if n_examples < 1 or dim < 1 or n_classes < 2:
        raise ValueError("need n_examples >= 1, dim >= 1, n_classes >= 2")
    if n_classes > n_examples:
        raise ValueError("more classes than examples")
    rng = np.random.default_rng(seed)
    means = rng.uniform(0.15, 0.85, size=(n_classes, dim))
    labels = rng.permutation(np.arange(n_examples, dtype=np.int64) % n_classes)
    features = means[labels] + rng.normal(0.0, noise, size=(n_examples, dim))
    np.clip(features, 0.0, 1.0, out=features)
    return LabeledDataset(features, labels, n_classes)


def partition_random(n_examples: int, n_clients: int, seed: int) -> list[ClientShard]:
    """Split [0, n_examples) into contiguous disjoint per-client shards.

    Sizes start at floor(n/c) with the remainder spread one-each over the
    first shards, then bounded seeded pair transfers wobble large shards by
    at most +-3; the block order is finally permuted before laying out ranges.
    """
    if n_clients < 1:
        raise ValueError("need at least one client")
    if n_examples < n_clients:
        raise ValueError(f"cannot give {n_clients} clients at least one of {n_examples} examples")
    rng = np.random.default_rng(seed)
    base, remainder = divmod(n_examples, n_clients)
    sizes = np.full(n_clients, base, dtype=np.int64)
    sizes[:remainder] += 1
    if base >= _JITTER_MIN_BASE and n_clients >= 2:
        for _ in range(2 * n_clients):
            a, b = rng.choice(n_clients, size=2, replace=False)
            if sizes[a] + 1 - base <= _JITTER_CAP and base - (sizes[b] - 1) <= _JITTER_CAP:
                sizes[a] += 1
                sizes[b] -= 1
    sizes = sizes[rng.permutation(n_clients)]
    shards = []
    start = 0
    for user_id, size in enumerate(sizes):
        shards.append(
            ClientShard(
                user_id=user_id,
                count=int(size),
                min_index=start,
                max_index=start + int(size) - 1,
            )
        )
        start += int(size)
    return shards


@dataclass(frozen=True)
class OneHotCodec:
    """Per-attribute codebooks mapping each distinct value to one bit position.

    The bit string concatenates one block per attribute, in codebook order;
    exactly one bit is set within each block.
    """

    codebooks: dict[str, tuple[Any, ...]] = field(default_factory=dict)

    @classmethod
    def fit(cls, rows: Iterable[Mapping[str, Any]], attributes: Sequence[str]) -> "OneHotCodec":
        """Build codebooks from the distinct values seen across rows."""
        seen: dict[str, set] = {name: set() for name in attributes}
        for row in rows:
            for name in attributes:
                if name not in row:
                    raise CodecError(f"attribute '{name}' missing from row")
                seen[name].add(row[name])
        return cls({name: tuple(sorted(seen[name])) for name in attributes})

    @property
    def attributes(self) -> tuple[str, ...]:
        return tuple(self.codebooks)

    @property
    def total_bits(self) -> int:
        return sum(len(cb) for cb in self.codebooks.values())

    def encode(self, values: Mapping[str, Any]) -> str:
        chunks = []
        for name, codebook in self.codebooks.items():
            if name not in values:
                raise CodecError(f"attribute '{name}' missing")
            try:
                position = codebook.index(values[name])
            except ValueError:
                raise CodecError(
                    f"attribute '{name}': value {values[name]!r} not in codebook"
                ) from None
            chunks.append("0" * position + "1" + "0" * (len(codebook) - position - 1))
        return "".join(chunks)

    def decode(self, bits: str) -> dict[str, Any]:
        if len(bits) != self.total_bits:
            raise CodecError(f"bit string length {len(bits)} != codec width {self.total_bits}")
        values: dict[str, Any] = {}
        offset = 0
        for name, codebook in self.codebooks.items():
            block = bits[offset : offset + len(codebook)]
            offset += len(codebook)
            if block.count("1") != 1:
                raise CodecError(f"attribute '{name}': block {block!r} is not one-hot")
            values[name] = codebook[block.index("1")]
        return values


def encode_one_hot(shard: ClientShard, codec: OneHotCodec) -> str:
    """Encode a shard's attributes as a concatenated one-hot bit string."""
    return codec.encode(shard.attributes())


def decode_one_hot(bits: str, codec: OneHotCodec) -> dict[str, Any]:
    """Recover the attribute values behind a one-hot bit string."""
    return codec.decode(bits)
