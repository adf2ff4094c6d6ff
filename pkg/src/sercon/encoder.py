"""Trainable classifier head over imported (frozen) feature embeddings.

One hidden relu layer followed by a linear classifier:

    h = relu(W1 x + b1)        # h doubles as the embedding z used for the
    logits = W2 h + b2         # contrastive objective and the datastore
    probs = softmax(logits)

All math runs in float64 so analytic gradients can be checked against
finite differences tightly.  Checkpoints are stored in the binary HDP1
format: magic ``HDP1``, u32 D, H, C, then W1, b1, W2, b2 as little-endian
float64, row-major.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .rng import substream

HDP1_MAGIC = b"HDP1"


@dataclass(frozen=True, eq=False)
class HeadParams:
    """Parameter bundle; also used as the container for gradients."""

    w1: np.ndarray  # (H, D)
    b1: np.ndarray  # (H,)
    w2: np.ndarray  # (C, H)
    b2: np.ndarray  # (C,)

    def __post_init__(self) -> None:
        for name in ("w1", "b1", "w2", "b2"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            object.__setattr__(self, name, arr)
        h, d = self.w1.shape
        c = self.w2.shape[0]
        if self.b1.shape != (h,) or self.w2.shape != (c, h) or self.b2.shape != (c,):
            raise DataError("inconsistent parameter shapes")

    @property
    def dim(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    @property
    def n_classes(self) -> int:
        return self.w2.shape[0]

    def arrays(self) -> tuple[np.ndarray, ...]:
        return (self.w1, self.b1, self.w2, self.b2)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


@dataclass(frozen=True, eq=False)
class ForwardTrace:
    """Intermediate values of one forward pass, kept for backprop."""

    x: np.ndarray       # (D,) or (B, D)
    hidden: np.ndarray  # (H,) or (B, H), post-relu
    logits: np.ndarray  # (C,) or (B, C)
    probs: np.ndarray

    @property
    def embedding(self) -> np.ndarray:
        """The representation used for contrastive loss and retrieval."""
        return self.hidden


def init_params(dim: int, hidden: int, n_classes: int, seed: int) -> HeadParams:
    """Uniform weights scaled by 1/sqrt(fan-in); zero biases."""
    if dim < 1 or hidden < 1 or n_classes < 1:
        raise DataError("dimensions must be >= 1")
    rng = substream(seed, "init")
    bound1 = 1.0 / np.sqrt(dim)
    bound2 = 1.0 / np.sqrt(hidden)
    return HeadParams(
        w1=rng.uniform(-bound1, bound1, size=(hidden, dim)),
        b1=np.zeros(hidden),
        w2=rng.uniform(-bound2, bound2, size=(n_classes, hidden)),
        b2=np.zeros(n_classes),
    )


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax (max subtraction)."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def forward(params: HeadParams, x: np.ndarray) -> ForwardTrace:
    """Forward pass for a single D-vector.

    Delegates to the batched path so single and batched evaluation agree
    bit for bit.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.dim,):
        raise DataError(f"expected input of shape ({params.dim},), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DataError("non-finite input vector")
    t = forward_batch(params, x[None, :])
    return ForwardTrace(x=x, hidden=t.hidden[0], logits=t.logits[0], probs=t.probs[0])


def forward_batch(params: HeadParams, xs: np.ndarray) -> ForwardTrace:
    """Forward pass for a (B, D) matrix of inputs; rows are independent."""
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 2 or xs.shape[1] != params.dim:
        raise DataError(f"expected inputs of shape (B, {params.dim}), got {xs.shape}")
    h = np.maximum(xs @ params.w1.T + params.b1, 0.0)
    logits = h @ params.w2.T + params.b2
    return ForwardTrace(x=xs, hidden=h, logits=logits, probs=softmax(logits))


def backward(
    params: HeadParams, trace: ForwardTrace, grad_embedding: np.ndarray, grad_logits: np.ndarray
) -> HeadParams:
    """Exact reverse-mode gradients of the forward computation.

    ``grad_embedding`` flows in from the contrastive term (w.r.t. z = h),
    ``grad_logits`` from the cross-entropy term; both meet in the shared
    parameters.  Accepts single vectors or batches, matching the trace.
    """
    single = trace.x.ndim == 1
    xs = trace.x[None, :] if single else trace.x
    h = trace.hidden[None, :] if single else trace.hidden
    g_emb = np.asarray(grad_embedding, dtype=np.float64)
    g_log = np.asarray(grad_logits, dtype=np.float64)
    if single:
        g_emb = g_emb[None, :]
        g_log = g_log[None, :]
    if g_emb.shape != h.shape or g_log.shape[0] != h.shape[0] or g_log.shape[1] != params.n_classes:
        raise DataError("gradient shapes do not match the forward trace")

    g_w2 = g_log.T @ h
    g_b2 = g_log.sum(axis=0)
    g_h = g_log @ params.w2 + g_emb
    g_pre = g_h * (h > 0.0)
    g_w1 = g_pre.T @ xs
    g_b1 = g_pre.sum(axis=0)
    return HeadParams(w1=g_w1, b1=g_b1, w2=g_w2, b2=g_b2)


def save_checkpoint(path: str | Path, params: HeadParams) -> None:
    if not params.all_finite():
        raise DataError("refusing to save non-finite parameters")
    out = bytearray()
    out += HDP1_MAGIC
    out += struct.pack("<III", params.dim, params.hidden, params.n_classes)
    for arr in params.arrays():
        out += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path: str | Path) -> HeadParams:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[:4] != HDP1_MAGIC:
        raise DataError(f"{path}: bad magic bytes {data[:4]!r}, expected {HDP1_MAGIC!r}")
    if len(data) < 16:
        raise DataError(f"{path}: truncated header")
    d, h, c = struct.unpack_from("<III", data, 4)
    shapes = [(h, d), (h,), (c, h), (c,)]
    expected = 16 + 8 * sum(int(np.prod(s)) for s in shapes)
    if len(data) != expected:
        raise DataError(f"{path}: expected {expected} bytes for D={d} H={h} C={c}, got {len(data)}")
    pos = 16
    arrays = []
    for shape in shapes:
        n = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
        pos += 8 * n
        arrays.append(arr)
    params = HeadParams(*arrays)
    if not params.all_finite():
        raise DataError(f"{path}: checkpoint contains non-finite parameters")
    return params
