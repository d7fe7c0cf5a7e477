"""Audio buffers, WAV I/O, windows, FFT, STFT/ISTFT and 2:1 resampling."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
from scipy.io import wavfile

PathLike = Union[str, Path]


class WavFormatError(ValueError):
    """Raised for WAV files this package cannot read."""


@dataclass(frozen=True, eq=False)
class AudioBuffer:
    """Mono float64 samples at an integer sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.ascontiguousarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("AudioBuffer samples must be 1-D")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("AudioBuffer samples contain NaN or Inf")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def replace(self, samples: np.ndarray) -> "AudioBuffer":
        return AudioBuffer(samples, self.sample_rate)


@dataclass(frozen=True, eq=False)
class Spectrogram:
    bins: np.ndarray  # (n_fft // 2 + 1, T) complex
    n_fft: int
    hop: int
    win_length: int
    sample_rate: int

    def __post_init__(self):
        if self.bins.shape[0] != self.n_fft // 2 + 1:
            raise ValueError("spectrogram rows must equal n_fft // 2 + 1")
        if not (0 < self.hop <= self.win_length <= self.n_fft):
            raise ValueError("need 0 < hop <= win_length <= n_fft")

    @property
    def n_frames(self) -> int:
        return self.bins.shape[1]


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------


def read_wav(path: PathLike) -> AudioBuffer:
    """Read a PCM16 or float32 WAV file, averaging channels to mono."""
    try:
        sr, data = wavfile.read(str(path))
    except FileNotFoundError:
        raise
    except (ValueError, EOFError) as exc:
        raise WavFormatError(f"{path}: {exc}") from exc
    if data.dtype == np.int16:
        data = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        data = data.astype(np.float64)
    else:
        raise WavFormatError(f"{path}: unsupported sample format {data.dtype}")
    if data.ndim == 2:
        data = data.mean(axis=1)
    if data.shape[0] == 0:
        raise WavFormatError(f"{path}: empty data chunk")
    return AudioBuffer(data, sr)


def write_wav(buffer: AudioBuffer, path: PathLike) -> None:
    """Write ``buffer`` as mono PCM16, clipping to [-1, 1] first."""
    q = np.round(np.clip(buffer.samples, -1.0, 1.0) * 32768.0)
    q = np.clip(q, -32768, 32767).astype("<i2")
    wavfile.write(str(path), buffer.sample_rate, q)


# ---------------------------------------------------------------------------
# Windows and FFT
# ---------------------------------------------------------------------------


def blackman_window(n: int) -> np.ndarray:
    """Symmetric Blackman window of length ``n``."""
    if n < 2:
        raise ValueError("window length must be at least 2")
    k = np.arange(n)
    phase = 2.0 * np.pi * k / (n - 1)
    w = 0.42 - 0.5 * np.cos(phase) + 0.08 * np.cos(2.0 * phase)
    # enforce exact symmetry and endpoint zeros against cos rounding
    w = 0.5 * (w + w[::-1])
    w[0] = w[-1] = 0.0
    if n % 2 == 1:
        w[n // 2] = 1.0
    return w


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def fft(x, n: int) -> np.ndarray:
    """Iterative radix-2 decimation-in-time FFT along the last axis.

    ``x`` is zero-padded to ``n``, which must be a power of two.
    Leading axes are treated as a batch.
    """
    if not _is_pow2(n):
        raise ValueError(f"FFT length must be a power of two, got {n}")
    x = np.asarray(x, dtype=np.complex128)
    m = x.shape[-1]
    if m > n:
        raise ValueError(f"input length {m} exceeds FFT length {n}")
    if m < n:
        pad = [(0, 0)] * (x.ndim - 1) + [(0, n - m)]
        x = np.pad(x, pad)
    lead = x.shape[:-1]
    X = x[..., _bit_reverse(n)]
    size = 2
    while size <= n:
        half = size // 2
        twiddle = np.exp(-2j * np.pi * np.arange(half) / size)
        X = X.reshape(lead + (n // size, size))
        even = X[..., :half]
        odd = X[..., half:] * twiddle
        X = np.concatenate([even + odd, even - odd], axis=-1)
        size *= 2
    return X.reshape(lead + (n,))


def ifft(X, n: int) -> np.ndarray:
    """Inverse of :func:`fft` with 1/n normalization."""
    X = np.asarray(X, dtype=np.complex128)
    return np.conj(fft(np.conj(X), n)) / n


# ---------------------------------------------------------------------------
# STFT / ISTFT
# ---------------------------------------------------------------------------


def stft(buffer: AudioBuffer, n_fft: int = 1024, hop: int = 128, window=None) -> Spectrogram:
    """Centered STFT with reflect padding of ``n_fft // 2`` on both sides.

    Produces ``1 + len // hop`` frames. The window defaults to a symmetric
    Blackman window of length ``n_fft``.
    """
    if hop <= 0:
        raise ValueError("hop must be positive")
    if len(buffer) < 1:
        raise ValueError("empty buffer")
    if not _is_pow2(n_fft):
        raise ValueError(f"n_fft must be a power of two, got {n_fft}")
    w = blackman_window(n_fft) if window is None else np.asarray(window, dtype=np.float64)
    x = buffer.samples
    pad = n_fft // 2
    padded = np.pad(x, pad, mode="reflect") if len(x) > 1 else np.pad(x, pad)
    n_frames = 1 + len(x) // hop
    frames = np.lib.stride_tricks.sliding_window_view(padded, n_fft)[::hop][:n_frames]
    bins = np.fft.rfft(frames * w, n=n_fft, axis=-1).T
    return Spectrogram(bins, n_fft, hop, len(w), buffer.sample_rate)


def istft(spec: Spectrogram, out_len: int, window=None) -> AudioBuffer:
    """Weighted overlap-add inverse of :func:`stft`."""
    n_fft, hop = spec.n_fft, spec.hop
    w = blackman_window(n_fft) if window is None else np.asarray(window, dtype=np.float64)
    frames = np.fft.irfft(spec.bins.T, n=n_fft, axis=-1) * w
    n_frames = frames.shape[0]
    total = n_fft + hop * (n_frames - 1)
    y = np.zeros(total)
    norm = np.zeros(total)
    w2 = w * w
    for t in range(n_frames):
        s = t * hop
        y[s : s + n_fft] += frames[t]
        norm[s : s + n_fft] += w2
    pad = n_fft // 2
    y = y[pad : pad + out_len]
    norm = norm[pad : pad + out_len]
    if y.shape[0] < out_len:
        raise ValueError("spectrogram too short for requested output length")
    if np.any(norm < 1e-10):
        raise ValueError("overlap-add normalization vanishes; window/hop pathological")
    return AudioBuffer(y / norm, spec.sample_rate)


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

RESAMPLE_ORDER = 8
RESAMPLE_RIPPLE_DB = 0.05
RESAMPLE_CUTOFF = 0.8  # fraction of the lower Nyquist


def resample(buffer: AudioBuffer, target_rate: int) -> AudioBuffer:
    """2:1 decimation or 1:2 interpolation with a Chebyshev I anti-alias filter."""
    from .filters import FilterSpec, design_cheby1, sosfilt

    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    sr = buffer.sample_rate
    if target_rate == sr:
        return buffer
    if sr == 2 * target_rate:
        spec = FilterSpec(RESAMPLE_ORDER, RESAMPLE_RIPPLE_DB, RESAMPLE_CUTOFF * target_rate / 2, sr)
        filtered = sosfilt(design_cheby1(spec), buffer)
        return AudioBuffer(filtered.samples[::2], target_rate)
    if target_rate == 2 * sr:
        stuffed = np.zeros(2 * len(buffer))
        stuffed[::2] = buffer.samples
        spec = FilterSpec(RESAMPLE_ORDER, RESAMPLE_RIPPLE_DB, RESAMPLE_CUTOFF * sr / 2, target_rate)
        filtered = sosfilt(design_cheby1(spec), AudioBuffer(stuffed, target_rate))
        return AudioBuffer(2.0 * filtered.samples, target_rate)
    raise ValueError(f"unsupported resampling ratio {sr} -> {target_rate}")
