"""Datasets: IDX files, synthetic generators, imbalancing and sharding."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .numeric_core import RandomSource

__all__ = [
    "DataFormatError",
    "LabeledDataset",
    "ImbalanceSpec",
    "read_idx",
    "write_idx",
    "make_synthetic",
    "pattern_masks",
    "make_patterns",
    "imbalance",
    "shard",
]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataFormatError(ValueError):
    """Malformed or inconsistent dataset files."""


class BadMagicError(DataFormatError):
    pass


class TruncatedFileError(DataFormatError):
    pass


class CountMismatchError(DataFormatError):
    pass


@dataclass
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    provenance: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise ValueError("inputs and labels have different lengths")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label outside [0, num_classes)")
        for key, values in self.metadata.items():
            if len(values) != len(self.labels):
                raise ValueError(f"metadata {key!r} has the wrong length")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, idx, provenance: str | None = None) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(
            self.inputs[idx],
            self.labels[idx],
            self.num_classes,
            self.provenance if provenance is None else provenance,
            {k: np.asarray(v)[idx] for k, v in self.metadata.items()},
        )


@dataclass(frozen=True)
class ImbalanceSpec:
    target_class: int
    keep_count: int


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def _parse_idx(raw: bytes, magic: int, ndim: int, path) -> tuple[tuple, np.ndarray]:
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: header truncated")
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise BadMagicError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise TruncatedFileError(f"{path}: expected {size} data bytes, found {len(raw) - header}")
    data = np.frombuffer(raw, dtype=np.uint8, count=size, offset=header)
    return dims, data


def read_idx(images_path, labels_path, num_classes: int = 10) -> LabeledDataset:
    """Load an IDX image/label pair, scaling pixels to [0, 1]."""
    dims, pixels = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, 3, images_path)
    (count,), labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, 1, labels_path)
    if dims[0] != count:
        raise CountMismatchError(f"{images_path} has {dims[0]} images but {labels_path} has {count} labels")
    images = pixels.reshape(dims).astype(np.float64) / 255.0
    if count and labels.max() >= num_classes:
        raise DataFormatError(f"{labels_path}: label {labels.max()} >= num_classes {num_classes}")
    return LabeledDataset(
        images,
        labels.astype(np.int64),
        num_classes,
        provenance=f"idx:{os.path.basename(str(images_path))}",
    )


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images ``(n, rows, cols)`` and labels as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


def _unit_directions(k: int, dim: int, rng: RandomSource) -> np.ndarray:
    d = rng.normal(k * dim).reshape(k, dim)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def make_synthetic(
    k: int,
    per_class: int | Sequence[int],
    input_dim: int,
    cluster_separation: float,
    rng: RandomSource,
    *,
    noise: float = 1.0,
    centers: np.ndarray | None = None,
) -> LabeledDataset:
    """Gaussian blobs, one per class.

    Class ``c`` is centred at ``cluster_separation * u_c`` for a random unit
    vector ``u_c`` and has isotropic noise of std ``noise``.  Pass ``centers``
    (shape ``(k, input_dim)``) to draw a matching test set from the same
    blobs; the directions are then not re-drawn.  The centres used are
    attached to the result as ``ds.centers``.
    """
    counts = [per_class] * k if np.ndim(per_class) == 0 else list(per_class)
    if len(counts) != k or min(counts) < 1:
        raise ValueError("need one positive count per class")
    if centers is None:
        centers = cluster_separation * _unit_directions(k, input_dim, rng)
    centers = np.asarray(centers, dtype=np.float64)
    labels = np.repeat(np.arange(k), counts)
    inputs = centers[labels] + noise * rng.normal(len(labels) * input_dim).reshape(len(labels), input_dim)
    ds = LabeledDataset(inputs, labels, k, provenance=f"synthetic:k={k},dim={input_dim},sep={cluster_separation}")
    ds.centers = centers
    return ds


def pattern_masks(
    k: int,
    input_dim: int,
    support: int,
    rng: RandomSource,
    *,
    blend: dict | None = None,
    share: float = 0.5,
) -> np.ndarray:
    """Binary ``(k, input_dim)`` pixel supports for :func:`make_patterns`.

    Each class switches on ``support`` random pixels.  A class listed in
    ``blend`` as ``{c: (a, b)}`` instead takes a ``share`` of class ``a``'s
    pixels and the same share of class ``b``'s, so it is easily confused
    with both (and carries more ink than either when ``share > 0.5``).
    """
    if not 0 < share <= 1:
        raise ValueError("share must lie in (0, 1]")
    if not 0 < support <= input_dim:
        raise ValueError("support must lie in (0, input_dim]")
    masks = np.zeros((k, input_dim))
    for c in range(k):
        masks[c, rng.permutation(input_dim)[:support]] = 1.0
    for c, parents in (blend or {}).items():
        masks[c] = 0.0
        for a in parents:
            on = np.flatnonzero(masks[a])
            masks[c, on[rng.permutation(len(on))[:int(share * len(on))]]] = 1.0
    return masks


def make_patterns(
    masks: np.ndarray,
    per_class: int | Sequence[int],
    rng: RandomSource,
    *,
    keep_prob: float = 0.6,
    noise: float = 0.5,
    amplitude: float = 1.0,
) -> LabeledDataset:
    """Sparse non-negative "digit-like" images in [0, 1].

    A sample of class ``c`` keeps each pixel of ``masks[c]`` with
    probability ``keep_prob`` and sets it to
    ``clip(amplitude * (1 + noise * N(0, 1)), 0, 1)``; all other pixels are 0.
    Draw train and test sets from the same ``masks``.
    """
    k, dim = masks.shape
    counts = [per_class] * k if np.ndim(per_class) == 0 else list(per_class)
    if len(counts) != k or min(counts) < 1:
        raise ValueError("need one positive count per class")
    labels = np.repeat(np.arange(k), counts)
    n = len(labels)
    on = masks[labels] * (rng.uniform(n * dim).reshape(n, dim) < keep_prob)
    inputs = np.clip(amplitude * on * (1 + noise * rng.normal(n * dim).reshape(n, dim)), 0.0, 1.0)
    return LabeledDataset(inputs, labels, k, provenance=f"patterns:k={k},dim={dim},keep={keep_prob}")


def imbalance(ds: LabeledDataset, spec: ImbalanceSpec, rng: RandomSource) -> LabeledDataset:
    """Keep a random ``keep_count`` examples of the target class; others untouched.

    Surviving examples keep their original relative order.
    """
    target = np.flatnonzero(ds.labels == spec.target_class)
    if spec.keep_count > len(target) or spec.keep_count < 0:
        raise ValueError(
            f"cannot keep {spec.keep_count} of {len(target)} examples of class {spec.target_class}"
        )
    drop = target[rng.permutation(len(target))[spec.keep_count:]]
    keep = np.setdiff1d(np.arange(len(ds)), drop, assume_unique=True)
    return ds.subset(keep, provenance=f"{ds.provenance}|class{spec.target_class}->{spec.keep_count}")


def shard(
    ds: LabeledDataset,
    n: int,
    strategy: str = "iid",
    rng: RandomSource | None = None,
    *,
    group_classes: Sequence[int] = (),
    group_participants: int = 0,
) -> list[np.ndarray]:
    """Split example indices among ``n`` participants.

    ``iid`` shuffles and deals round-robin.  ``by_group`` deals examples of
    ``group_classes`` round-robin to participants ``0 .. group_participants-1``
    and everything else to the remaining participants.  Returns one index
    array per participant; together they partition ``range(len(ds))``.
    """
    if n < 1 or n > len(ds):
        raise ValueError(f"cannot split {len(ds)} examples among {n} participants")
    rng = rng or RandomSource(0)
    order = rng.permutation(len(ds))
    if strategy == "iid":
        return [np.sort(order[i::n]) for i in range(n)]
    if strategy != "by_group":
        raise ValueError(f"unknown shard strategy {strategy!r}")
    if not 0 < group_participants < n:
        raise ValueError("by_group needs 0 < group_participants < n")
    in_group = np.isin(ds.labels[order], list(group_classes))
    rare, common = order[in_group], order[~in_group]
    m = group_participants
    shards = [np.sort(rare[i::m]) for i in range(m)]
    shards += [np.sort(common[i::n - m]) for i in range(n - m)]
    if any(len(s) == 0 for s in shards):
        raise ValueError("some participant received no data")
    return shards
