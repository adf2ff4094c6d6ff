"""Embedding datastore and exact k-nearest-neighbour search.

The datastore holds one (key, label) pair per training/validation sample,
where the key is the model's hidden embedding.  Search is an exact full
scan under Euclidean distance, computed in float64 from the float32 keys,
with ties broken by ascending datastore index.

Datastore file format DST1 (little-endian): magic ``DST1``, u32 M, u32 H,
u32 C, then M records of {H x float32, u16 label, u8 split flag
(0 = train, 1 = validation)}.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import encoder
from .corpus import LabeledEmbedding
from .errors import DataError

DST1_MAGIC = b"DST1"
SPLIT_TRAIN = 0
SPLIT_VAL = 1


@dataclass(frozen=True, eq=False)
class Datastore:
    """Immutable (keys, labels) store; arrays are marked read-only."""

    keys: np.ndarray    # (M, H) float32
    labels: np.ndarray  # (M,) int64
    split: np.ndarray   # (M,) uint8
    n_classes: int
    ids: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        keys = np.ascontiguousarray(self.keys, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.int64)
        split = np.asarray(self.split, dtype=np.uint8)
        if keys.ndim != 2 or keys.shape[0] == 0:
            raise DataError(f"datastore needs a non-empty (M, H) key matrix, got {keys.shape}")
        m = keys.shape[0]
        if labels.shape != (m,) or split.shape != (m,):
            raise DataError("labels/split must have one entry per key")
        if self.n_classes < 1 or np.any(labels < 0) or np.any(labels >= self.n_classes):
            raise DataError("datastore labels out of range")
        if not np.all(np.isfinite(keys)):
            raise DataError("datastore keys contain non-finite values")
        if self.ids is not None and len(self.ids) != m:
            raise DataError("ids must have one entry per key")
        for arr in (keys, labels, split):
            arr.setflags(write=False)
        object.__setattr__(self, "keys", keys)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "split", split)

    @property
    def size(self) -> int:
        return self.keys.shape[0]

    @property
    def dim(self) -> int:
        return self.keys.shape[1]


@dataclass(frozen=True, eq=False)
class NeighborSet:
    """k nearest datastore rows, distances sorted ascending."""

    indices: np.ndarray
    distances: np.ndarray

    def __post_init__(self) -> None:
        idx = np.asarray(self.indices, dtype=np.int64)
        dist = np.asarray(self.distances, dtype=np.float64)
        if idx.shape != dist.shape or idx.ndim != 1 or idx.size == 0:
            raise DataError("neighbor indices/distances must be matching non-empty vectors")
        if np.any(np.diff(dist) < 0):
            raise DataError("neighbor distances must be non-decreasing")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "distances", dist)

    @property
    def k(self) -> int:
        return int(self.indices.size)


def build_datastore(
    params: encoder.HeadParams,
    train: Sequence[LabeledEmbedding],
    val: Sequence[LabeledEmbedding],
    n_classes: int,
) -> Datastore:
    """Embed train + validation samples (in that order) under the model.

    Keys use the same representation as the contrastive loss: the hidden
    vector z.  Insertion order is input order, train first.
    """
    samples = list(train) + list(val)
    if not samples:
        raise DataError("cannot build a datastore from zero samples")
    xs = np.stack([e.x for e in samples]).astype(np.float64)
    if xs.shape[1] != params.dim:
        raise DataError(f"sample dim {xs.shape[1]} does not match model dim {params.dim}")
    keys = encoder.forward_batch(params, xs).hidden.astype(np.float32)
    labels = np.asarray([e.meta.label for e in samples])
    split = np.asarray([SPLIT_TRAIN] * len(train) + [SPLIT_VAL] * len(val), dtype=np.uint8)
    ids = tuple(e.meta.id for e in samples)
    return Datastore(keys, labels, split, n_classes, ids)


def squared_distances(ds: Datastore, query: np.ndarray) -> np.ndarray:
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (ds.dim,):
        raise DataError(f"query must have shape ({ds.dim},), got {query.shape}")
    diff = ds.keys.astype(np.float64) - query
    return np.einsum("ij,ij->i", diff, diff)


def knn_search(
    ds: Datastore, query: np.ndarray, k: int, exclude_index: int | None = None
) -> NeighborSet:
    """Exact k smallest Euclidean distances; ties break by ascending index.

    ``exclude_index`` drops one datastore row from consideration (used to
    keep a validation query from retrieving its own datastore entry).
    """
    m_eff = ds.size - (1 if exclude_index is not None else 0)
    if not (1 <= k <= m_eff):
        raise DataError(f"k must lie in [1, {m_eff}], got {k}")
    d2 = squared_distances(ds, query)
    if exclude_index is not None:
        if not (0 <= exclude_index < ds.size):
            raise DataError(f"exclude_index {exclude_index} out of range")
        d2 = d2.copy()
        d2[exclude_index] = np.inf
    order = np.lexsort((np.arange(ds.size), d2))[:k]
    return NeighborSet(order, np.sqrt(d2[order]))


def knn_distribution(
    ns: NeighborSet,
    ds: Datastore,
    n_classes: int,
    weighting: str = "uniform",
    beta: float = 1.0,
) -> np.ndarray:
    """Class distribution implied by the neighbours.

    ``uniform`` counts label frequencies; ``softmax_negdist`` weights each
    neighbour by exp(-beta * distance) before normalising.
    """
    labels = ds.labels[ns.indices]
    if weighting == "uniform":
        weights = np.full(ns.k, 1.0 / ns.k)
    elif weighting == "softmax_negdist":
        if not (beta >= 0):
            raise DataError("beta must be nonnegative")
        shifted = -beta * (ns.distances - ns.distances[0])
        w = np.exp(shifted)
        weights = w / w.sum()
    else:
        raise DataError(f"unknown weighting {weighting!r}")
    p = np.zeros(n_classes)
    np.add.at(p, labels, weights)
    return p


def save_datastore(path: str | Path, ds: Datastore) -> None:
    out = bytearray()
    out += DST1_MAGIC
    out += struct.pack("<III", ds.size, ds.dim, ds.n_classes)
    for i in range(ds.size):
        out += np.ascontiguousarray(ds.keys[i], dtype="<f4").tobytes()
        out += struct.pack("<HB", int(ds.labels[i]), int(ds.split[i]))
    Path(path).write_bytes(bytes(out))


def load_datastore(path: str | Path) -> Datastore:
    path = Path(path)
    if not path.exists():
        raise DataError(f"datastore not found: {path}")
    data = path.read_bytes()
    if data[:4] != DST1_MAGIC:
        raise DataError(f"{path}: bad magic bytes {data[:4]!r}, expected {DST1_MAGIC!r}")
    if len(data) < 16:
        raise DataError(f"{path}: truncated header")
    m, h, c = struct.unpack_from("<III", data, 4)
    rec = 4 * h + 3
    expected = 16 + m * rec
    if len(data) != expected:
        raise DataError(f"{path}: expected {expected} bytes for M={m} H={h}, got {len(data)}")
    keys = np.empty((m, h), dtype=np.float32)
    labels = np.empty(m, dtype=np.int64)
    split = np.empty(m, dtype=np.uint8)
    pos = 16
    for i in range(m):
        keys[i] = np.frombuffer(data, dtype="<f4", count=h, offset=pos)
        pos += 4 * h
        label, flag = struct.unpack_from("<HB", data, pos)
        pos += 3
        labels[i] = label
        split[i] = flag
    return Datastore(keys, labels, split, c)
