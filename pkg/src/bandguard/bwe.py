"""Bandwidth extension of low-pass-filtered 16 kHz speech.

Two extenders share one interface: spectral mirroring about the cutoff with
a fixed rolloff, and a per-frame ridge regressor from low-band to high-band
log-magnitudes.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .features import LOG_FLOOR
from .signal import AudioBuffer, Spectrogram, istft, stft

log = logging.getLogger(__name__)

N_FFT = 1024
HOP = 128
ROLLOFF_DB_PER_OCTAVE = -12.0

KINDS = ("replicate", "linear_regressor")


@dataclass(frozen=True, eq=False)
class BweInput:
    narrowband: AudioBuffer
    cutoff_fraction: float

    def __post_init__(self):
        if not 0 < self.cutoff_fraction < 1:
            raise ValueError("cutoff_fraction must lie in (0, 1)")


@dataclass(frozen=True, eq=False)
class BweExtender:
    kind: str
    cutoff_fraction: float
    n_fft: int = N_FFT
    weights: np.ndarray | None = None  # (n_high, n_low)
    bias: np.ndarray | None = None  # (n_high,)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown extender kind {self.kind!r}")
        if self.kind == "linear_regressor":
            n_low, n_high = band_sizes(self.cutoff_fraction, self.n_fft)
            if self.weights is None or self.weights.shape != (n_high, n_low):
                raise ValueError(f"regressor weights must have shape {(n_high, n_low)}")
            if self.bias is None or self.bias.shape != (n_high,):
                raise ValueError(f"regressor bias must have shape {(n_high,)}")
            if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
                raise ValueError("regressor parameters must be finite")


@dataclass(frozen=True)
class BweQuality:
    lsd: float
    highband_snr: float


def cutoff_bin(fraction: float, n_fft: int = N_FFT) -> int:
    """Last low-band bin; the boundary bin belongs to the low band."""
    return int(np.floor(fraction * (n_fft // 2)))


def band_sizes(fraction: float, n_fft: int = N_FFT) -> tuple[int, int]:
    c = cutoff_bin(fraction, n_fft)
    return c + 1, n_fft // 2 - c


def mirror_sources(c: int, n_high: int) -> np.ndarray:
    """Low-band bin mirrored onto high bins c+1 .. c+n_high (reflecting as needed)."""
    j = np.arange(1, n_high + 1)
    if c == 0:
        return np.zeros(n_high, dtype=np.int64)
    p = j % (2 * c)
    return np.where(p <= c, c - p, p - c)


def rolloff_gain(c: int, n_high: int) -> np.ndarray:
    """Amplitude gain (bin / cutoff bin) ** (dB-per-octave / 20 / log10 2)."""
    bins = np.arange(c + 1, c + n_high + 1, dtype=np.float64)
    exponent = ROLLOFF_DB_PER_OCTAVE / (20.0 * np.log10(2.0))
    return (bins / max(c, 1)) ** exponent


def _check_narrowband(inp: BweInput, spec: Spectrogram, c: int) -> None:
    power = np.abs(spec.bins) ** 2
    total = power.sum()
    if total > 0 and power[c + 1 :].sum() > 1e-4 * total:
        log.warning("narrowband input has more than -40 dB of energy above the cutoff")


def _low_and_phase(inp: BweInput):
    spec = stft(inp.narrowband, n_fft=N_FFT, hop=HOP)
    c = cutoff_bin(inp.cutoff_fraction, N_FFT)
    n_high = N_FFT // 2 - c
    if n_high < 2:
        raise ValueError("cutoff leaves fewer than two high-band bins")
    _check_narrowband(inp, spec, c)
    src = mirror_sources(c, n_high)
    mirrored_phase = -np.angle(spec.bins[src])
    return spec, c, n_high, src, mirrored_phase


def _finish(inp: BweInput, spec: Spectrogram, c: int, high: np.ndarray) -> tuple[AudioBuffer, Spectrogram]:
    bins = spec.bins.copy()
    bins[c + 1 :] = high
    out_spec = Spectrogram(bins, spec.n_fft, spec.hop, spec.win_length, spec.sample_rate)
    return istft(out_spec, len(inp.narrowband)), out_spec


def extend_replicate_spectrogram(inp: BweInput) -> tuple[AudioBuffer, Spectrogram]:
    spec, c, n_high, src, phase = _low_and_phase(inp)
    mag = np.abs(spec.bins[src]) * rolloff_gain(c, n_high)[:, None]
    return _finish(inp, spec, c, mag * np.exp(1j * phase))


def extend_replicate(inp: BweInput) -> AudioBuffer:
    """Fill the high band with the low band mirrored about the cutoff."""
    return extend_replicate_spectrogram(inp)[0]


def _log_mag(bins: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(np.abs(bins), LOG_FLOOR))


def fit_ridge(X: np.ndarray, Y: np.ndarray, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Ridge regression Y ~ X W^T + b with an unpenalized bias (rows are samples)."""
    stats = _RidgeStats(X.shape[1], Y.shape[1])
    stats.add(X, Y)
    return stats.solve(lam)


class _RidgeStats:
    """Running sufficient statistics so training never holds all frames at once."""

    def __init__(self, n_in: int, n_out: int):
        self.n = 0
        self.sx = np.zeros(n_in)
        self.sy = np.zeros(n_out)
        self.sxx = np.zeros((n_in, n_in))
        self.sxy = np.zeros((n_in, n_out))

    def add(self, X: np.ndarray, Y: np.ndarray) -> None:
        self.n += X.shape[0]
        self.sx += X.sum(axis=0)
        self.sy += Y.sum(axis=0)
        self.sxx += X.T @ X
        self.sxy += X.T @ Y

    def solve(self, lam: float) -> tuple[np.ndarray, np.ndarray]:
        if lam <= 0:
            raise ValueError("ridge_lambda must be positive")
        mx, my = self.sx / self.n, self.sy / self.n
        cxx = self.sxx - self.n * np.outer(mx, mx)
        cxy = self.sxy - self.n * np.outer(mx, my)
        A = cxx + lam * np.eye(cxx.shape[0])
        try:
            W = np.linalg.solve(A, cxy).T
        except np.linalg.LinAlgError as exc:
            raise ValueError("normal matrix is singular") from exc
        return W, my - W @ mx


def train_linear_regressor(pairs, cutoff_fraction: float, ridge_lambda: float = 1e-3) -> BweExtender:
    """Fit high-band log-magnitudes from low-band log-magnitudes per frame.

    ``pairs`` yields (narrowband, wideband) buffers of equal length; the
    wideband buffer is the original before low-pass filtering.
    """
    c = cutoff_bin(cutoff_fraction, N_FFT)
    n_low, n_high = band_sizes(cutoff_fraction, N_FFT)
    stats = _RidgeStats(n_low, n_high)
    for narrow, wide in pairs:
        if len(narrow) != len(wide):
            raise ValueError("narrowband and wideband buffers must be aligned")
        X = _log_mag(stft(narrow, N_FFT, HOP).bins[: c + 1]).T
        Y = _log_mag(stft(wide, N_FFT, HOP).bins[c + 1 :]).T
        stats.add(X, Y)
    if stats.n < 100:
        raise ValueError(f"need at least 100 aligned frames, got {stats.n}")
    W, b = stats.solve(ridge_lambda)
    return BweExtender("linear_regressor", cutoff_fraction, N_FFT, W, b)


def extend_spectrogram(inp: BweInput, extender: BweExtender) -> tuple[AudioBuffer, Spectrogram]:
    if abs(extender.cutoff_fraction - inp.cutoff_fraction) > 1e-12:
        raise ValueError(
            f"extender trained for fraction {extender.cutoff_fraction}, input uses {inp.cutoff_fraction}"
        )
    if extender.kind == "replicate":
        return extend_replicate_spectrogram(inp)
    spec, c, n_high, src, phase = _low_and_phase(inp)
    if extender.weights.shape != (n_high, c + 1):
        raise ValueError("extender shape does not match the input's bin partition")
    pred = extender.weights @ _log_mag(spec.bins[: c + 1]) + extender.bias[:, None]
    return _finish(inp, spec, c, np.exp(pred) * np.exp(1j * phase))


def extend(inp: BweInput, extender: BweExtender) -> AudioBuffer:
    """Regenerate the band above the cutoff; the low band is left untouched."""
    return extend_spectrogram(inp, extender)[0]


def measure_quality(extended: AudioBuffer, reference: AudioBuffer, cutoff_fraction: float) -> BweQuality:
    """High-band log-spectral distance (dB) and high-band SNR (dB)."""
    if len(extended) != len(reference) or extended.sample_rate != reference.sample_rate:
        raise ValueError("extended and reference must have equal length and rate")
    c = cutoff_bin(cutoff_fraction, N_FFT)
    se = stft(extended, N_FFT, HOP)
    sr = stft(reference, N_FFT, HOP)
    me = np.maximum(np.abs(se.bins[c + 1 :]), LOG_FLOOR)
    mr = np.maximum(np.abs(sr.bins[c + 1 :]), LOG_FLOOR)
    lsd = float(np.mean(np.sqrt(np.mean((20.0 * np.log10(me / mr)) ** 2, axis=0))))

    def highpass(spec: Spectrogram) -> np.ndarray:
        bins = spec.bins.copy()
        bins[: c + 1] = 0
        hp = Spectrogram(bins, spec.n_fft, spec.hop, spec.win_length, spec.sample_rate)
        return istft(hp, len(reference)).samples

    he, hr = highpass(se), highpass(sr)
    err = float(np.sum((he - hr) ** 2))
    ref = float(np.sum(hr**2))
    snr = 10.0 * np.log10(max(ref, 1e-20) / max(err, 1e-20))
    return BweQuality(lsd, snr)


# ---------------------------------------------------------------------------
# "BWE1" files: magic, u32 kind, u32 n_fft, u32 n_high, u32 n_low,
# f64 cutoff fraction, f64 weights row-major, f64 bias
# ---------------------------------------------------------------------------

_MAGIC = b"BWE1"


def save_extender(extender: BweExtender, path) -> None:
    kind = KINDS.index(extender.kind)
    n_low, n_high = band_sizes(extender.cutoff_fraction, extender.n_fft)
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<IIIId", kind, extender.n_fft, n_high, n_low, extender.cutoff_fraction))
        if extender.kind == "linear_regressor":
            fh.write(np.ascontiguousarray(extender.weights, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(extender.bias, dtype="<f8").tobytes())


def load_extender(path) -> BweExtender:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not a BWE1 file")
    kind, n_fft, n_high, n_low, fraction = struct.unpack("<IIIId", data[4:28])
    if kind >= len(KINDS):
        raise ValueError(f"{path}: unknown extender kind {kind}")
    if KINDS[kind] == "replicate":
        return BweExtender("replicate", fraction, n_fft)
    expected = 28 + 8 * (n_high * n_low + n_high)
    if len(data) != expected:
        raise ValueError(f"{path}: payload size mismatch")
    flat = np.frombuffer(data, dtype="<f8", offset=28)
    W = flat[: n_high * n_low].reshape(n_high, n_low).copy()
    b = flat[n_high * n_low :].copy()
    return BweExtender("linear_regressor", fraction, n_fft, W, b)
