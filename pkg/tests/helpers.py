"""Shared oracles for the test suite.

Everything here is deliberately written the slow, obvious way (loops,
direct formulas) so it stays independent of the library implementations
it checks.
"""

from __future__ import annotations

import math

import numpy as np


def central_diff_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function, element by element."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    g = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        g[i] = (hi - lo) / (2.0 * eps)
    return grad


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> float:
    """Worst per-component relative error.

    The floor keeps components below the finite-difference noise level
    (roundoff of the loss, ~1e-16 * |L| / eps) from dominating the ratio.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max())


def grad_close(analytic: np.ndarray, numeric: np.ndarray, tol: float = 1e-5) -> bool:
    """Gradient-check criterion: per-component relative error (floored) and
    the norm ratio ||a - f|| / (||a|| + ||f||) both within ``tol``.

    The norm floor of 0.1 keeps genuinely-zero gradients (where the finite
    differences return pure roundoff noise) from failing a 0/0 ratio.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    norm_ratio = np.linalg.norm(analytic - numeric) / max(
        np.linalg.norm(analytic) + np.linalg.norm(numeric), 0.1
    )
    return max_rel_err(analytic, numeric) <= tol and norm_ratio <= tol


def scl_brute_force(embeddings, labels, tau: float, normalize: bool = False) -> float:
    """Triple-loop evaluation of the supervised contrastive loss."""
    x = [np.asarray(v, dtype=np.float64) for v in embeddings]
    if normalize:
        x = [v / math.sqrt(float(v @ v)) for v in x]
    n = len(x)
    total = 0.0
    for i in range(n):
        positives = [j for j in range(n) if j != i and labels[j] == labels[i]]
        if not positives:
            continue
        contrast = [a for a in range(n) if a != i]
        anchor_sum = 0.0
        for p in positives:
            numer = math.exp(float(x[i] @ x[p]) / tau)
            denom = sum(math.exp(float(x[i] @ x[a]) / tau) for a in contrast)
            anchor_sum += math.log(numer / denom)
        total += -anchor_sum / len(positives)
    return total


def ce_brute_force(logits, labels) -> float:
    """Per-row -log softmax probability of the true class, averaged."""
    logits = np.asarray(logits, dtype=np.float64)
    total = 0.0
    for row, label in zip(logits, labels):
        exps = [math.exp(v) for v in row]
        total += -math.log(exps[int(label)] / sum(exps))
    return total / len(labels)


def rms(samples: np.ndarray) -> float:
    samples = np.asarray(samples, dtype=np.float64)
    return math.sqrt(float(np.mean(samples**2)))


def snr_db(signal: np.ndarray, noisy: np.ndarray) -> float:
    """Measured SNR from the residual noise."""
    noise = np.asarray(noisy, dtype=np.float64) - np.asarray(signal, dtype=np.float64)
    return 20.0 * math.log10(rms(signal) / rms(noise))


def zero_crossing_freq(samples: np.ndarray, sample_rate: int) -> float:
    """Dominant frequency estimate of a clean tone from sign changes."""
    samples = np.asarray(samples, dtype=np.float64)
    signs = np.sign(samples)
    signs[signs == 0] = 1
    crossings = int(np.sum(signs[1:] != signs[:-1]))
    duration = samples.size / sample_rate
    return crossings / (2.0 * duration)


def naive_convolve_loops(signal: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """O(n*m) direct convolution with explicit python loops (small inputs)."""
    signal = np.asarray(signal, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    out = np.zeros(signal.size + kernel.size - 1)
    for i in range(signal.size):
        for j in range(kernel.size):
            out[i + j] += signal[i] * kernel[j]
    return out


def naive_convolve(signal: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Direct shift-and-add convolution, 'full' mode: one shifted copy of
    the signal per kernel tap."""
    signal = np.asarray(signal, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    out = np.zeros(signal.size + kernel.size - 1)
    for j in range(kernel.size):
        out[j:j + signal.size] += kernel[j] * signal
    return out


def knn_brute_force(keys: np.ndarray, query: np.ndarray, k: int) -> list[int]:
    """Full sort by (euclidean distance, index)."""
    dists = np.linalg.norm(np.asarray(keys, dtype=np.float64) - np.asarray(query, dtype=np.float64), axis=1)
    order = sorted(range(len(dists)), key=lambda i: (dists[i], i))
    return order[:k]


def wa_ua_brute_force(confusion: np.ndarray) -> tuple[float, float]:
    """Recompute WA/UA directly from a confusion matrix."""
    confusion = np.asarray(confusion, dtype=np.float64)
    wa = float(np.trace(confusion) / confusion.sum())
    recalls = []
    for c in range(confusion.shape[0]):
        row = confusion[c].sum()
        if row > 0:
            recalls.append(confusion[c, c] / row)
    ua = float(np.mean(recalls))
    return wa, ua
