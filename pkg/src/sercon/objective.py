"""Training objectives: cross-entropy, supervised contrastive loss, and
their weighted combination, all with analytic gradients.

The contrastive term treats every same-label instance in the 2N batch as
a positive.  For anchor i with positive set P(i) and contrast set
A(i) = {all indices except i}:

    L_scl = sum_i (-1/|P(i)|) * sum_{p in P(i)}
            log( exp(x_i . x_p / tau) / sum_{a in A(i)} exp(x_i . x_a / tau) )

Anchors without positives contribute zero.  Log-sum-exp terms use max
subtraction.  With ``normalize_embeddings`` the dot products are taken
between L2-normalised vectors and the gradient includes the normalisation
Jacobian; this is the default because tau = 0.07 assumes unit-norm
features (raw dot products at that temperature overflow).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericsError


@dataclass(frozen=True)
class LossConfig:
    """Weights and switches for the combined objective."""

    tau: float = 0.07
    lam: float = 0.1
    normalize_embeddings: bool = True
    ce_on_views: bool = True
    mean_over_anchors: bool = False

    def __post_init__(self) -> None:
        if not (self.tau > 0):
            raise DataError(f"tau must be positive, got {self.tau}")
        if not (0.0 <= self.lam <= 1.0):
            raise DataError(f"lambda must lie in [0, 1], got {self.lam}")


@dataclass(frozen=True, eq=False)
class ContrastiveBatch:
    """2N paired instances: row 2k is the augmented view of original row 2k+1.

    ``embeddings`` may hold input vectors (dim D) or hidden embeddings
    (dim H); the structure is the same.  ``pairs`` lists
    (original_index, augmented_index) per underlying sample.
    """

    embeddings: np.ndarray        # (2N, dim) float64
    labels: np.ndarray            # (2N,) int
    pairs: np.ndarray | None = None  # (N, 2) int; None for unpaired use

    def __post_init__(self) -> None:
        emb = np.asarray(self.embeddings, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if emb.ndim != 2 or emb.shape[0] == 0 or emb.shape[0] % 2 != 0:
            raise DataError(f"batch needs a (2N, dim) embedding matrix, got {emb.shape}")
        n2 = emb.shape[0]
        if labels.shape != (n2,):
            raise DataError("labels must have one entry per batch row")
        if self.pairs is not None:
            pairs = np.asarray(self.pairs, dtype=np.int64)
            if pairs.shape != (n2 // 2, 2):
                raise DataError(f"pairs must have shape ({n2 // 2}, 2), got {pairs.shape}")
            if sorted(pairs.ravel().tolist()) != list(range(n2)):
                raise DataError("pairs must cover every batch index exactly once")
            if np.any(labels[pairs[:, 0]] != labels[pairs[:, 1]]):
                raise DataError("paired original/augmented instances must share a label")
            object.__setattr__(self, "pairs", pairs)
        if not np.all(np.isfinite(emb)):
            raise NumericsError("batch embeddings contain non-finite values")
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_views(cls, originals: np.ndarray, views: np.ndarray, labels: np.ndarray) -> "ContrastiveBatch":
        """Interleave N originals and their views as [view_0, orig_0, view_1, ...]."""
        originals = np.asarray(originals, dtype=np.float64)
        views = np.asarray(views, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if originals.shape != views.shape or originals.ndim != 2:
            raise DataError("originals and views must be matching (N, dim) matrices")
        n = originals.shape[0]
        emb = np.empty((2 * n, originals.shape[1]))
        emb[0::2] = views
        emb[1::2] = originals
        lab = np.repeat(labels, 2)
        pairs = np.stack([np.arange(1, 2 * n, 2), np.arange(0, 2 * n, 2)], axis=1)
        return cls(emb, lab, pairs)

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]

    def original_indices(self) -> np.ndarray:
        if self.pairs is None:
            raise DataError("batch has no pairing information")
        return self.pairs[:, 0]

    def with_embeddings(self, embeddings: np.ndarray) -> "ContrastiveBatch":
        """Same structure, new vectors (e.g. after the encoder forward pass)."""
        return ContrastiveBatch(embeddings, self.labels, self.pairs)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def ce_loss(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DataError(f"logits {logits.shape} and labels {labels.shape} do not line up")
    if not np.all(np.isfinite(logits)):
        raise NumericsError("non-finite logits")
    n, c = logits.shape
    if np.any(labels < 0) or np.any(labels >= c):
        raise DataError(f"label out of range for {c} classes")
    logp = _log_softmax(logits)
    loss = float(-logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad


def scl_loss(
    batch: ContrastiveBatch, tau: float, normalize: bool = True
) -> tuple[float, np.ndarray]:
    """Supervised contrastive loss (summed over anchors) and its gradient
    w.r.t. ``batch.embeddings``."""
    if not (tau > 0):
        raise DataError(f"tau must be positive, got {tau}")
    x = batch.embeddings
    n = batch.size
    if n < 2:
        raise DataError("contrastive loss needs at least 2 instances")

    if normalize:
        norms = np.linalg.norm(x, axis=1)
        if np.any(norms == 0.0):
            raise NumericsError("cannot L2-normalize a zero embedding")
        u = x / norms[:, None]
    else:
        u = x

    sims = (u @ u.T) / tau
    np.fill_diagonal(sims, -np.inf)  # exclude self from A(i)
    row_max = sims.max(axis=1)
    exp_shift = np.exp(sims - row_max[:, None])
    denom = exp_shift.sum(axis=1)
    log_denom = row_max + np.log(denom)

    same = batch.labels[:, None] == batch.labels[None, :]
    pos_mask = same.astype(np.float64)
    np.fill_diagonal(pos_mask, 0.0)
    pos_count = pos_mask.sum(axis=1)
    has_pos = pos_count > 0

    log_prob = sims - log_denom[:, None]  # -inf on the diagonal, masked below
    per_anchor = np.zeros(n)
    pos_logprob = np.where(pos_mask > 0, log_prob, 0.0)
    per_anchor[has_pos] = -pos_logprob[has_pos].sum(axis=1) / pos_count[has_pos]
    loss = float(per_anchor.sum())

    # dL/d sims: softmax weight minus positive-average indicator, zero rows
    # for anchors without positives.
    alpha = exp_shift / denom[:, None]
    grad_s = alpha.copy()
    grad_s[has_pos] -= pos_mask[has_pos] / pos_count[has_pos, None]
    grad_s[~has_pos] = 0.0
    np.fill_diagonal(grad_s, 0.0)

    grad_u = ((grad_s + grad_s.T) @ u) / tau
    if normalize:
        radial = np.einsum("ij,ij->i", u, grad_u)
        grad = (grad_u - radial[:, None] * u) / norms[:, None]
    else:
        grad = grad_u
    return loss, grad


def combined_loss(
    logits: np.ndarray, batch: ContrastiveBatch, cfg: LossConfig
) -> tuple[float, np.ndarray, np.ndarray]:
    """(1 - lambda) * CE + lambda * SCL with gradients for both inputs.

    The boundary cases are exact: lambda = 0 skips the contrastive term
    entirely (zero embedding gradient) and lambda = 1 skips cross-entropy.
    """
    logits = np.asarray(logits, dtype=np.float64)
    n = batch.size
    if logits.shape[0] != n:
        raise DataError("logits and batch size disagree")

    if cfg.lam < 1.0:
        if cfg.ce_on_views:
            ce_l, ce_g = ce_loss(logits, batch.labels)
        else:
            rows = batch.original_indices()
            ce_l, sub_g = ce_loss(logits[rows], batch.labels[rows])
            ce_g = np.zeros_like(logits)
            ce_g[rows] = sub_g
    else:
        ce_l, ce_g = 0.0, np.zeros_like(logits)

    if cfg.lam > 0.0:
        scl_l, scl_g = scl_loss(batch, cfg.tau, cfg.normalize_embeddings)
        if cfg.mean_over_anchors:
            scl_l /= n
            scl_g = scl_g / n
    else:
        scl_l, scl_g = 0.0, np.zeros_like(batch.embeddings)

    loss = (1.0 - cfg.lam) * ce_l + cfg.lam * scl_l
    grad_logits = (1.0 - cfg.lam) * ce_g
    grad_emb = cfg.lam * scl_g
    return float(loss), grad_logits, grad_emb
