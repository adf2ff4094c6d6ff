"""Waveform augmentations: noise, volume, reverberation, pitch, seeded mixtures.

All operations are pure and deterministic given (input, parameters, seed).
Outputs stay finite and within [-1, 1].  ``add_noise``, ``change_volume``
and ``add_reverb`` preserve length; ``shift_pitch`` rescales it by the
resampling ratio.

For corpora that ship pre-computed embeddings instead of audio, the views
needed for contrastive training are produced by :func:`jitter_embedding`
(additive Gaussian noise in embedding space).  That path is a stand-in,
not waveform-level augmentation, and is flagged as such in reports.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import DataError
from .rng import substream

# Fixed application order for mixed augmentation.
BASE_KINDS = ("noise", "volume", "reverberation", "pitch")
KINDS = BASE_KINDS + ("mixed", "jitter", "none")

# Tail level of the synthetic impulse response relative to the direct path.
_REVERB_TAIL_GAIN = 0.3


@dataclass(frozen=True)
class Waveform:
    """Mono audio: float samples in [-1, 1] at a fixed sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self) -> None:
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise DataError(f"waveform must be 1-D (mono), got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise DataError("waveform contains non-finite samples")
        if samples.size and float(np.abs(samples).max()) > 1.0 + 1e-12:
            raise DataError("waveform samples must lie in [-1, 1]")
        if self.sample_rate <= 0:
            raise DataError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def rms(self) -> float:
        if self.samples.size == 0:
            return 0.0
        return float(np.sqrt(np.mean(self.samples**2)))


@dataclass(frozen=True)
class AugmentSpec:
    """Which augmentation to apply and with what parameters.

    Fixed-parameter fields drive single augmentations; the ``*_range``
    fields are sampled from when ``kind == "mixed"``.  ``jitter_sigma``
    is the embedding-space fallback strength.
    """

    kind: str = "jitter"
    snr_db: float = 15.0
    gain_factor: float = 1.0
    rt60_seconds: float = 0.3
    pitch_semitones: float = 0.0
    mixed_kinds: tuple[str, ...] = BASE_KINDS
    snr_range: tuple[float, float] = (5.0, 20.0)
    gain_range: tuple[float, float] = (0.5, 2.0)
    rt60_range: tuple[float, float] = (0.1, 0.5)
    pitch_range: tuple[float, float] = (-2.0, 2.0)
    jitter_sigma: float = 0.3

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise DataError(f"unknown augmentation kind {self.kind!r} (choose from {', '.join(KINDS)})")
        if np.isnan(self.snr_db):
            raise DataError("snr_db must not be NaN")
        if not (self.gain_factor > 0):
            raise DataError("gain_factor must be positive")
        if not (self.rt60_seconds > 0):
            raise DataError("rt60_seconds must be positive")
        if abs(self.pitch_semitones) > 12:
            raise DataError("pitch_semitones must be within [-12, 12]")
        if self.jitter_sigma < 0:
            raise DataError("jitter_sigma must be nonnegative")
        for k in self.mixed_kinds:
            if k not in BASE_KINDS:
                raise DataError(f"mixed_kinds entry {k!r} is not a base augmentation")

    @property
    def embedding_space(self) -> bool:
        """True when this spec augments embeddings rather than waveforms."""
        return self.kind in ("jitter", "none")


def _clip(samples: np.ndarray) -> np.ndarray:
    return np.clip(samples, -1.0, 1.0)


def add_noise(w: Waveform, snr_db: float, seed: int) -> Waveform:
    """Add white Gaussian noise scaled so the realised SNR equals ``snr_db``.

    ``snr_db = inf`` disables the noise and returns the input unchanged.
    """
    if np.isposinf(snr_db):
        return Waveform(w.samples.copy(), w.sample_rate)
    signal_rms = w.rms()
    if signal_rms <= 0.0:
        raise DataError("cannot target a finite SNR on a silent waveform")
    rng = substream(seed, "augment")
    noise = rng.standard_normal(w.samples.size)
    noise_rms = float(np.sqrt(np.mean(noise**2)))
    target_rms = signal_rms / (10.0 ** (snr_db / 20.0))
    noise *= target_rms / noise_rms
    return Waveform(_clip(w.samples + noise), w.sample_rate)


def change_volume(w: Waveform, gain_factor: float) -> Waveform:
    """Scale every sample by ``gain_factor`` and clip back into [-1, 1]."""
    if not (gain_factor > 0):
        raise DataError(f"gain_factor must be positive, got {gain_factor}")
    return Waveform(_clip(w.samples * gain_factor), w.sample_rate)


def reverb_impulse_response(rt60_seconds: float, sample_rate: int, seed: int) -> np.ndarray:
    """Synthetic room response: unit direct path plus exponentially decaying noise.

    The tail reaches -60 dB at ``rt60_seconds``; an rt60 shorter than one
    sample degenerates to the identity response.
    """
    if not (rt60_seconds > 0):
        raise DataError("rt60_seconds must be positive")
    tail_len = int(round(rt60_seconds * sample_rate))
    ir = np.zeros(tail_len + 1)
    ir[0] = 1.0
    if tail_len > 0:
        rng = substream(seed, "augment")
        n = np.arange(1, tail_len + 1, dtype=np.float64)
        decay = 10.0 ** (-3.0 * n / (rt60_seconds * sample_rate))
        ir[1:] = _REVERB_TAIL_GAIN * rng.standard_normal(tail_len) * decay
    return ir


def add_reverb(w: Waveform, rt60_seconds: float, seed: int) -> Waveform:
    """Convolve with a synthetic decaying impulse response, truncate to the
    input length, and re-normalise the peak to the input peak."""
    ir = reverb_impulse_response(rt60_seconds, w.sample_rate, seed)
    wet = np.convolve(w.samples, ir)[: w.samples.size]
    in_peak = float(np.abs(w.samples).max()) if w.samples.size else 0.0
    out_peak = float(np.abs(wet).max()) if wet.size else 0.0
    if in_peak > 0.0 and out_peak > 0.0:
        wet = wet * (in_peak / out_peak)
    return Waveform(_clip(wet), w.sample_rate)


def shift_pitch(w: Waveform, semitones: float) -> Waveform:
    """Shift pitch by plain resampling with linear interpolation.

    The factor is 2^(semitones/12); the output length is
    round(len / factor) and the nominal sample rate is unchanged, so the
    audio plays back faster (higher) or slower (lower).
    """
    if abs(semitones) > 12:
        raise DataError("pitch shift limited to +-12 semitones")
    factor = 2.0 ** (semitones / 12.0)
    n = w.samples.size
    out_len = int(round(n / factor))
    if semitones == 0 or n == 0 or out_len == 0:
        return Waveform(w.samples.copy(), w.sample_rate)
    positions = np.arange(out_len, dtype=np.float64) * factor
    lo = np.floor(positions).astype(np.int64)
    lo = np.minimum(lo, n - 1)
    hi = np.minimum(lo + 1, n - 1)
    frac = positions - lo
    out = (1.0 - frac) * w.samples[lo] + frac * w.samples[hi]
    return Waveform(_clip(out), w.sample_rate)


def augment_mixed(w: Waveform, spec: AugmentSpec, seed: int) -> Waveform:
    """Apply a seeded random subset of the base augmentations.

    At least two of the eligible kinds are applied (all of them when fewer
    are configured), always in the fixed order noise -> volume ->
    reverberation -> pitch, with parameters drawn from the ranges in
    ``spec``.
    """
    if not spec.mixed_kinds:
        raise DataError("mixed augmentation needs a non-empty kind list")
    eligible = [k for k in BASE_KINDS if k in spec.mixed_kinds]
    rng = substream(seed, "augment")
    k_min = min(2, len(eligible))
    k = int(rng.integers(k_min, len(eligible) + 1))
    chosen_idx = sorted(rng.choice(len(eligible), size=k, replace=False).tolist())
    chosen = [eligible[i] for i in chosen_idx]
    out = w
    for kind in chosen:
        if kind == "noise":
            snr = float(rng.uniform(*spec.snr_range))
            out = add_noise(out, snr, seed=int(rng.integers(0, 2**31 - 1)))
        elif kind == "volume":
            out = change_volume(out, float(rng.uniform(*spec.gain_range)))
        elif kind == "reverberation":
            rt60 = float(rng.uniform(*spec.rt60_range))
            out = add_reverb(out, rt60, seed=int(rng.integers(0, 2**31 - 1)))
        elif kind == "pitch":
            out = shift_pitch(out, float(rng.uniform(*spec.pitch_range)))
    return out


def apply_augment(w: Waveform, spec: AugmentSpec, seed: int) -> Waveform:
    """Dispatch a single augmentation spec against a waveform."""
    if spec.kind == "none":
        return Waveform(w.samples.copy(), w.sample_rate)
    if spec.kind == "noise":
        return add_noise(w, spec.snr_db, seed)
    if spec.kind == "volume":
        return change_volume(w, spec.gain_factor)
    if spec.kind == "reverberation":
        return add_reverb(w, spec.rt60_seconds, seed)
    if spec.kind == "pitch":
        return shift_pitch(w, spec.pitch_semitones)
    if spec.kind == "mixed":
        return augment_mixed(w, spec, seed)
    raise DataError(f"augmentation kind {spec.kind!r} does not apply to waveforms")


def jitter_embedding(x: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Embedding-space view: additive isotropic Gaussian noise.

    Used when the corpus carries embeddings instead of audio; reports must
    flag runs that relied on this instead of waveform augmentation.
    """
    if sigma < 0:
        raise DataError("jitter sigma must be nonnegative")
    x = np.asarray(x, dtype=np.float64)
    return (x + sigma * rng.standard_normal(x.shape)).astype(np.float32)


def make_augmenter(spec: AugmentSpec) -> Callable:
    """Return ``f(payload, rng) -> payload`` for use by the batch builder.

    Embedding specs expect ndarray payloads; waveform specs expect
    :class:`Waveform` payloads.
    """
    if spec.kind == "none":
        def identity(payload, rng):
            return payload

        return identity
    if spec.kind == "jitter":
        def jitter(x, rng):
            if isinstance(x, Waveform):
                raise DataError("kind=jitter augments embeddings, not waveforms")
            return jitter_embedding(x, spec.jitter_sigma, rng)

        return jitter

    def wav_augment(w, rng):
        if not isinstance(w, Waveform):
            raise DataError(
                f"kind={spec.kind!r} needs waveform inputs; use kind=jitter for embedding corpora"
            )
        return apply_augment(w, spec, seed=int(rng.integers(0, 2**31 - 1)))

    return wav_augment


def fit_length(w: Waveform, max_seconds: float) -> Waveform:
    """Truncate to ``max_seconds``; zero-pad shorter inputs to that length."""
    if not (max_seconds > 0):
        raise DataError("max_seconds must be positive")
    target = int(round(max_seconds * w.sample_rate))
    if w.samples.size >= target:
        return Waveform(w.samples[:target].copy(), w.sample_rate)
    padded = np.zeros(target)
    padded[: w.samples.size] = w.samples
    return Waveform(padded, w.sample_rate)


def load_wav(path: str | Path) -> Waveform:
    """Read a mono 16-bit PCM WAV file."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"WAV file not found: {path}")
    try:
        with wave.open(str(path), "rb") as fh:
            if fh.getcomptype() != "NONE":
                raise DataError(f"{path}: only uncompressed PCM WAV is supported")
            if fh.getnchannels() != 1:
                raise DataError(f"{path}: only mono WAV is supported, got {fh.getnchannels()} channels")
            if fh.getsampwidth() != 2:
                raise DataError(
                    f"{path}: only 16-bit PCM is supported, got {8 * fh.getsampwidth()}-bit"
                )
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except wave.Error as exc:
        raise DataError(f"{path}: not a readable WAV file ({exc})") from exc
    ints = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    return Waveform(np.clip(ints / 32767.0, -1.0, 1.0), rate)


def save_wav(path: str | Path, w: Waveform) -> None:
    """Write a mono 16-bit PCM WAV file."""
    ints = np.clip(np.round(w.samples * 32767.0), -32767, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(ints.tobytes())
