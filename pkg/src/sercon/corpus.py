"""Corpus handling: manifests, embedding files, speaker folds, synthetic data.

File formats
------------
Manifest: UTF-8 text, one utterance per line, tab-separated fields
    id <TAB> speaker <TAB> label_name <TAB> duration_sec [<TAB> waveform_path]
Lines starting with ``#`` are comments.  The label vocabulary must be
declared before the first record in a header line::

    #labels angry,happy,sad,neutral

EMB1 embedding file (all little-endian):
    magic ``EMB1`` | u32 record count N | u32 dimension D, then N records of
    {u16 id byte-length, id (UTF-8), u16 label index, u16 speaker
    byte-length, speaker (UTF-8), D x float32}.

Vectors are held in memory as float32 so that a save/load cycle is a
bitwise round-trip; numerical work upstream casts to float64.
"""

from __future__ import annotations

import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import DataError, NumericsError
from .rng import substream

EMB1_MAGIC = b"EMB1"
_LABEL_HEADER = "#labels"


@dataclass(frozen=True)
class UtteranceMeta:
    """One utterance: identity, speaker, class index, and duration in seconds."""

    id: str
    speaker: str
    label: int
    duration: float = 0.0
    waveform_path: str | None = None

    def __post_init__(self) -> None:
        if not self.id:
            raise DataError("utterance id must be non-empty")
        if self.label < 0:
            raise DataError(f"utterance {self.id!r}: negative label index")
        if not (self.duration >= 0.0):
            raise DataError(f"utterance {self.id!r}: duration must be nonnegative")


@dataclass(frozen=True, eq=False)
class LabeledEmbedding:
    """A fixed-length float32 feature vector together with its metadata."""

    meta: UtteranceMeta
    x: np.ndarray

    def __post_init__(self) -> None:
        x = np.asarray(self.x, dtype=np.float32)
        if x.ndim != 1 or x.size == 0:
            raise DataError(f"embedding {self.meta.id!r}: expected a non-empty 1-D vector")
        if not np.all(np.isfinite(x)):
            raise DataError(f"embedding {self.meta.id!r}: non-finite values")
        object.__setattr__(self, "x", x)

    @property
    def dim(self) -> int:
        return int(self.x.shape[0])


@dataclass(frozen=True)
class FoldSpec:
    """Speaker-disjoint train/validation/test partition for one fold."""

    fold_index: int
    train_speakers: tuple[str, ...]
    val_speakers: tuple[str, ...]
    test_speakers: tuple[str, ...]

    def __post_init__(self) -> None:
        tr, va, te = set(self.train_speakers), set(self.val_speakers), set(self.test_speakers)
        if tr & va or tr & te or va & te:
            raise DataError(f"fold {self.fold_index}: speaker sets overlap")


@dataclass(frozen=True)
class Manifest:
    """An ordered list of utterances plus the label vocabulary."""

    label_names: tuple[str, ...]
    utterances: tuple[UtteranceMeta, ...]

    def __post_init__(self) -> None:
        if len(set(self.label_names)) != len(self.label_names):
            raise DataError("duplicate label names in vocabulary")
        c = len(self.label_names)
        for m in self.utterances:
            if m.label >= c:
                raise DataError(f"utterance {m.id!r}: label {m.label} out of range for {c} classes")

    def __len__(self) -> int:
        return len(self.utterances)

    def __getitem__(self, i):
        return self.utterances[i]

    def __iter__(self) -> Iterator[UtteranceMeta]:
        return iter(self.utterances)

    @property
    def n_classes(self) -> int:
        return len(self.label_names)

    def speakers(self) -> tuple[str, ...]:
        return tuple(sorted({m.speaker for m in self.utterances}))

    def class_histogram(self) -> dict[str, int]:
        counts = Counter(m.label for m in self.utterances)
        return {name: counts.get(i, 0) for i, name in enumerate(self.label_names)}


def load_manifest(path: str | Path) -> Manifest:
    """Parse a manifest file; order of records is preserved."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    label_names: tuple[str, ...] | None = None
    records: list[UtteranceMeta] = []
    seen_ids: set[str] = set()
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith(_LABEL_HEADER + " ") or line.rstrip() == _LABEL_HEADER:
                if label_names is not None:
                    raise DataError(f"{path}:{lineno}: duplicate {_LABEL_HEADER} header")
                names = tuple(n.strip() for n in line[len(_LABEL_HEADER):].strip().split(",") if n.strip())
                if not names:
                    raise DataError(f"{path}:{lineno}: empty label vocabulary")
                label_names = names
                continue
            if line.startswith("#"):
                continue
            if label_names is None:
                raise DataError(f"{path}:{lineno}: record before '{_LABEL_HEADER}' header")
            fields = line.split("\t")
            if len(fields) not in (4, 5):
                raise DataError(
                    f"{path}:{lineno}: expected 4 or 5 tab-separated fields, got {len(fields)}"
                )
            uid, speaker, label_name, dur_text = fields[0], fields[1], fields[2], fields[3]
            wav = fields[4] if len(fields) == 5 and fields[4] else None
            if uid in seen_ids:
                raise DataError(f"{path}:{lineno}: duplicate utterance id {uid!r}")
            if not speaker:
                raise DataError(f"{path}:{lineno}: field 'speaker' is empty")
            try:
                label = label_names.index(label_name)
            except ValueError:
                raise DataError(
                    f"{path}:{lineno}: field 'label' has unknown name {label_name!r} "
                    f"(vocabulary: {', '.join(label_names)})"
                ) from None
            try:
                duration = float(dur_text)
            except ValueError:
                raise DataError(f"{path}:{lineno}: field 'duration' is not a number: {dur_text!r}") from None
            if not (duration >= 0.0) or not np.isfinite(duration):
                raise DataError(f"{path}:{lineno}: field 'duration' must be finite and nonnegative")
            seen_ids.add(uid)
            records.append(UtteranceMeta(uid, speaker, label, duration, wav))
    if label_names is None:
        raise DataError(f"{path}: missing '{_LABEL_HEADER}' header")
    return Manifest(label_names, tuple(records))


def save_manifest(path: str | Path, manifest: Manifest) -> None:
    path = Path(path)
    lines = [f"{_LABEL_HEADER} {','.join(manifest.label_names)}"]
    for m in manifest:
        row = [m.id, m.speaker, manifest.label_names[m.label], f"{m.duration:.3f}"]
        if m.waveform_path is not None:
            row.append(m.waveform_path)
        lines.append("\t".join(row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def save_embeddings(path: str | Path, embeddings: Sequence[LabeledEmbedding]) -> None:
    """Write an EMB1 file; inverse of :func:`load_embeddings`."""
    if not embeddings:
        raise DataError("refusing to write an empty embedding file")
    dims = {e.dim for e in embeddings}
    if len(dims) != 1:
        raise DataError(f"mixed embedding dimensions: {sorted(dims)}")
    dim = dims.pop()
    out = bytearray()
    out += EMB1_MAGIC
    out += struct.pack("<II", len(embeddings), dim)
    for e in embeddings:
        id_b = e.meta.id.encode("utf-8")
        spk_b = e.meta.speaker.encode("utf-8")
        if len(id_b) > 0xFFFF or len(spk_b) > 0xFFFF:
            raise DataError(f"id/speaker string too long for record {e.meta.id!r}")
        if e.meta.label > 0xFFFF:
            raise DataError(f"label index {e.meta.label} exceeds u16 range")
        out += struct.pack("<H", len(id_b)) + id_b
        out += struct.pack("<H", e.meta.label)
        out += struct.pack("<H", len(spk_b)) + spk_b
        out += np.ascontiguousarray(e.x, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def load_embeddings(path: str | Path) -> list[LabeledEmbedding]:
    """Read an EMB1 file back into memory."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"embedding file not found: {path}")
    data = path.read_bytes()
    if data[:4] != EMB1_MAGIC:
        raise DataError(f"{path}: bad magic bytes {data[:4]!r}, expected {EMB1_MAGIC!r}")
    if len(data) < 12:
        raise DataError(f"{path}: truncated header")
    count, dim = struct.unpack_from("<II", data, 4)
    if dim == 0:
        raise DataError(f"{path}: zero embedding dimension")
    pos = 12
    vec_bytes = 4 * dim

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise DataError(f"{path}: truncated payload while reading {what} (record {len(out)})")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    out: list[LabeledEmbedding] = []
    for _ in range(count):
        (id_len,) = struct.unpack("<H", take(2, "id length"))
        uid = take(id_len, "id").decode("utf-8")
        (label,) = struct.unpack("<H", take(2, "label"))
        (spk_len,) = struct.unpack("<H", take(2, "speaker length"))
        speaker = take(spk_len, "speaker").decode("utf-8")
        vec = np.frombuffer(take(vec_bytes, "vector"), dtype="<f4").copy()
        if not np.all(np.isfinite(vec)):
            raise DataError(f"{path}: non-finite values in record {uid!r}")
        out.append(LabeledEmbedding(UtteranceMeta(uid, speaker, label), vec))
    if pos != len(data):
        raise DataError(f"{path}: {len(data) - pos} trailing bytes after last record")
    return out


def pool_frames(frames: np.ndarray) -> np.ndarray:
    """Collapse a T x D frame matrix to one D-vector by arithmetic mean over time."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2:
        raise ValueError(f"expected a 2-D frame matrix, got shape {frames.shape}")
    if frames.shape[0] < 1:
        raise ValueError("cannot pool an empty frame matrix")
    if not np.all(np.isfinite(frames)):
        raise NumericsError("frame matrix contains non-finite values")
    return frames.mean(axis=0)


@dataclass(frozen=True)
class Corpus:
    """Embeddings joined with their manifest; immutable after construction."""

    label_names: tuple[str, ...]
    embeddings: tuple[LabeledEmbedding, ...]

    def __post_init__(self) -> None:
        if not self.embeddings:
            raise DataError("corpus is empty")
        dims = {e.dim for e in self.embeddings}
        if len(dims) != 1:
            raise DataError(f"mixed embedding dimensions in corpus: {sorted(dims)}")
        c = len(self.label_names)
        for e in self.embeddings:
            if e.meta.label >= c:
                raise DataError(f"utterance {e.meta.id!r}: label out of range for {c} classes")

    def __len__(self) -> int:
        return len(self.embeddings)

    def __iter__(self) -> Iterator[LabeledEmbedding]:
        return iter(self.embeddings)

    @property
    def dim(self) -> int:
        return self.embeddings[0].dim

    @property
    def n_classes(self) -> int:
        return len(self.label_names)

    def speakers(self) -> tuple[str, ...]:
        return tuple(sorted({e.meta.speaker for e in self.embeddings}))


def load_corpus(manifest_path: str | Path, embeddings_path: str | Path) -> Corpus:
    """Load manifest + EMB1 file and join them by utterance id."""
    manifest = load_manifest(manifest_path)
    embs = load_embeddings(embeddings_path)
    by_id = {m.id: m for m in manifest}
    if len(embs) != len(by_id):
        raise DataError(
            f"manifest has {len(by_id)} utterances but embedding file has {len(embs)}"
        )
    joined = []
    for e in embs:
        meta = by_id.get(e.meta.id)
        if meta is None:
            raise DataError(f"embedding id {e.meta.id!r} not present in manifest")
        if meta.speaker != e.meta.speaker or meta.label != e.meta.label:
            raise DataError(f"manifest/embedding metadata mismatch for id {e.meta.id!r}")
        joined.append(LabeledEmbedding(meta, e.x))
    return Corpus(manifest.label_names, tuple(joined))


def make_folds(metas: Sequence[UtteranceMeta] | Corpus, n_folds: int) -> list[FoldSpec]:
    """Build speaker-disjoint folds, holding out one speaker pair per fold.

    Speakers are sorted by name and paired consecutively (IEMOCAP-style
    names such as Ses01F/Ses01M therefore pair by session).  With P pairs,
    ``n_folds == P`` yields one fold per pair (first speaker validates,
    second tests); ``n_folds == 2 * P`` additionally swaps the roles, so
    every speaker is tested exactly once across the fold set.
    """
    if isinstance(metas, Corpus):
        speakers = sorted(metas.speakers())
    else:
        speakers = sorted({m.speaker for m in metas})
    if len(speakers) < 2:
        raise DataError(f"need at least 2 speakers, got {len(speakers)}")
    if len(speakers) % 2 != 0:
        raise DataError(f"speakers must come in pairs, got {len(speakers)}")
    pairs = [(speakers[i], speakers[i + 1]) for i in range(0, len(speakers), 2)]
    p = len(pairs)
    if n_folds == p:
        held = [(a, b) for a, b in pairs]
    elif n_folds == 2 * p:
        held = []
        for a, b in pairs:
            held.append((a, b))
            held.append((b, a))
    else:
        raise DataError(
            f"n_folds must be the number of speaker pairs ({p}) or twice that ({2 * p}), got {n_folds}"
        )
    folds = []
    all_set = set(speakers)
    for i, (val_spk, test_spk) in enumerate(held):
        train = tuple(s for s in speakers if s not in (val_spk, test_spk))
        if not train:
            raise DataError(f"fold {i}: training speaker set is empty")
        folds.append(FoldSpec(i, train, (val_spk,), (test_spk,)))
        assert set(folds[-1].train_speakers) | {val_spk, test_spk} == all_set
    return folds


def split_by_fold(
    corpus: Corpus, fold: FoldSpec
) -> tuple[list[LabeledEmbedding], list[LabeledEmbedding], list[LabeledEmbedding]]:
    """Partition corpus embeddings into (train, val, test) lists by fold speakers."""
    tr, va, te = set(fold.train_speakers), set(fold.val_speakers), set(fold.test_speakers)
    train = [e for e in corpus if e.meta.speaker in tr]
    val = [e for e in corpus if e.meta.speaker in va]
    test = [e for e in corpus if e.meta.speaker in te]
    missing = [e.meta.speaker for e in corpus if e.meta.speaker not in tr | va | te]
    if missing:
        raise DataError(f"fold {fold.fold_index} does not cover speakers: {sorted(set(missing))}")
    return train, val, test


@dataclass(frozen=True)
class SyntheticConfig:
    """Gaussian-blob corpus generator settings.

    Class means are axis-aligned at ``class_separation`` unless given
    explicitly; the ``overlap_pair`` classes are pulled to within
    ``overlap_distance`` of each other to emulate a hard-to-separate
    emotion pair.  All speakers utter all classes (round-robin).
    """

    dim: int = 16
    label_names: tuple[str, ...] = ("angry", "happy", "sad", "neutral")
    samples_per_class: int = 120
    n_speakers: int = 10
    seed: int = 7
    class_separation: float = 4.0
    class_scales: tuple[float, ...] = (1.0,)
    overlap_pair: tuple[str, str] | None = ("happy", "neutral")
    overlap_distance: float = 1.5
    means: tuple[tuple[float, ...], ...] | None = None

    def __post_init__(self) -> None:
        if self.samples_per_class <= 0:
            raise DataError("samples_per_class must be positive")
        if self.n_speakers <= 0:
            raise DataError("n_speakers must be positive")
        if self.dim <= 0:
            raise DataError("dim must be positive")
        if len(self.label_names) < 2:
            raise DataError("need at least 2 classes")
        if len(self.class_scales) not in (1, len(self.label_names)):
            raise DataError("class_scales must have 1 entry or one per class")
        if any(s <= 0 for s in self.class_scales):
            raise DataError("class scales must be positive")
        if self.overlap_pair is not None:
            for name in self.overlap_pair:
                if name not in self.label_names:
                    raise DataError(f"overlap_pair label {name!r} not in vocabulary")

    def scale_for(self, class_index: int) -> float:
        if len(self.class_scales) == 1:
            return self.class_scales[0]
        return self.class_scales[class_index]


def class_means(cfg: SyntheticConfig) -> np.ndarray:
    """Mean vector per class, shape (C, dim)."""
    c = len(cfg.label_names)
    if cfg.means is not None:
        means = np.asarray(cfg.means, dtype=np.float64)
        if means.shape != (c, cfg.dim):
            raise DataError(f"explicit means must have shape ({c}, {cfg.dim}), got {means.shape}")
        return means
    if cfg.dim < c:
        raise DataError(f"auto means need dim >= n_classes ({c}), got {cfg.dim}")
    means = np.zeros((c, cfg.dim))
    for i in range(c):
        means[i, i] = cfg.class_separation
    if cfg.overlap_pair is not None:
        a = cfg.label_names.index(cfg.overlap_pair[0])
        b = cfg.label_names.index(cfg.overlap_pair[1])
        direction = np.zeros(cfg.dim)
        direction[b] = 1.0
        means[b] = means[a] + cfg.overlap_distance * direction
    return means


def generate_synthetic_corpus(cfg: SyntheticConfig) -> tuple[list[LabeledEmbedding], Manifest]:
    """Deterministic Gaussian-blob corpus standing in for real encoder features."""
    rng = substream(cfg.seed, "synth")
    means = class_means(cfg)
    speakers = [f"spk{i:02d}" for i in range(cfg.n_speakers)]
    embeddings: list[LabeledEmbedding] = []
    metas: list[UtteranceMeta] = []
    for ci, name in enumerate(cfg.label_names):
        pts = means[ci] + cfg.scale_for(ci) * rng.standard_normal((cfg.samples_per_class, cfg.dim))
        durations = np.round(rng.uniform(1.0, 7.5, cfg.samples_per_class), 3)
        for i in range(cfg.samples_per_class):
            meta = UtteranceMeta(
                id=f"{name}_{i:04d}",
                speaker=speakers[i % cfg.n_speakers],
                label=ci,
                duration=float(durations[i]),
            )
            metas.append(meta)
            embeddings.append(LabeledEmbedding(meta, pts[i].astype(np.float32)))
    return embeddings, Manifest(tuple(cfg.label_names), tuple(metas))
