"""Mel filterbank, log-mel FBANK, band trimming, length normalization, VAD."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .signal import AudioBuffer, stft

N_MELS = 80
N_FFT = 1024
HOP = 128
LOG_FLOOR = 1e-10
EVAL_SECONDS = 4.0
TRAIN_SECONDS = (3.0, 5.0)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass(frozen=True, eq=False)
class MelFilterbank:
    weights: np.ndarray  # (n_mels, n_fft // 2 + 1)
    n_mels: int
    n_fft: int
    sample_rate: int
    f_min: float
    f_max: float
    breakpoints_hz: np.ndarray  # n_mels + 2 triangle corners

    @property
    def centers_hz(self) -> np.ndarray:
        return self.breakpoints_hz[1:-1]


@dataclass(frozen=True, eq=False)
class FbankMatrix:
    values: np.ndarray  # (n_mels, T)
    hop: int = HOP
    sample_rate: int = 16000

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]

    @property
    def frames_per_second(self) -> float:
        return self.sample_rate / self.hop


@dataclass(frozen=True)
class TrimSpec:
    fraction: float
    n_low: int
    n_full: int
    f_full: float
    f_low_effective: float


@dataclass(frozen=True, eq=False)
class VadResult:
    start: int
    end: int
    trimmed: AudioBuffer


@lru_cache(maxsize=16)
def build_mel_filterbank(
    n_mels: int = N_MELS,
    n_fft: int = N_FFT,
    sample_rate: int = 16000,
    f_min: float = 0.0,
    f_max: float | None = None,
) -> MelFilterbank:
    """HTK-mel triangular filterbank with unit peak height."""
    if f_max is None:
        f_max = sample_rate / 2
    if n_mels < 1:
        raise ValueError("n_mels must be >= 1")
    if not 0 <= f_min < f_max <= sample_rate / 2:
        raise ValueError("need 0 <= f_min < f_max <= Nyquist")
    mels = np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2)
    pts = mel_to_hz(mels)
    pts[0], pts[-1] = f_min, f_max
    bin_hz = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    left, center, right = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    rising = (bin_hz - left) / (center - left)
    falling = (right - bin_hz) / (right - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(weights.max(axis=1) <= 0)
    if empty.size:
        raise ValueError(
            f"{n_mels} mel bands too many for n_fft={n_fft}: band {empty[0]} covers no FFT bin"
        )
    weights.setflags(write=False)
    pts.setflags(write=False)
    return MelFilterbank(weights, n_mels, n_fft, sample_rate, f_min, f_max, pts)


def fbank(buffer: AudioBuffer, bank: MelFilterbank | None = None, hop: int = HOP) -> FbankMatrix:
    """Natural-log mel energies of the power spectrogram, floored at 1e-10."""
    if bank is None:
        bank = build_mel_filterbank(sample_rate=buffer.sample_rate)
    if buffer.sample_rate != bank.sample_rate:
        raise ValueError(
            f"sample rate {buffer.sample_rate} does not match filterbank rate {bank.sample_rate}"
        )
    spec = stft(buffer, n_fft=bank.n_fft, hop=hop)
    power = spec.bins.real**2 + spec.bins.imag**2
    energies = bank.weights @ power
    return FbankMatrix(np.log(np.maximum(energies, LOG_FLOOR)), hop, buffer.sample_rate)


def trim_index(fraction: float, n_full: int = N_MELS, f_full: float = 8000.0) -> TrimSpec:
    """Number of low mel bands covering ``fraction`` of the full band.

    n_low = floor(n_full * log(1 + f_low/700) / log(1 + f_full/700)), and the
    effective cutoff is the mel-inverse of the floored index.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    f_low = fraction * f_full
    ratio = math.log1p(f_low / 700.0) / math.log1p(f_full / 700.0)
    n_low = n_full if fraction == 1 else math.floor(n_full * ratio)
    if n_low < 1:
        raise ValueError(f"fraction {fraction} keeps no mel band")
    f_eff = 700.0 * ((1.0 + f_full / 700.0) ** (n_low / n_full) - 1.0)
    return TrimSpec(fraction, n_low, n_full, f_full, f_eff)


def trim_bands(features: FbankMatrix, spec: TrimSpec) -> FbankMatrix:
    if spec.n_low > features.n_rows:
        raise ValueError(f"cannot keep {spec.n_low} rows of a {features.n_rows}-row FBANK")
    return FbankMatrix(features.values[: spec.n_low].copy(), features.hop, features.sample_rate)


def normalize_length(
    features: FbankMatrix,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    target_seconds: tuple[float, float] = TRAIN_SECONDS,
    eval_seconds: float = EVAL_SECONDS,
) -> FbankMatrix:
    """Crop or self-concatenate along time to a 3-5 s (train) or 4 s (eval) length."""
    T = features.n_frames
    if T == 0 or features.n_rows == 0:
        raise ValueError("cannot length-normalize empty features")
    if mode == "train":
        if rng is None:
            raise ValueError("train mode requires an rng")
        seconds = rng.uniform(*target_seconds)
    elif mode == "eval":
        seconds = eval_seconds
    else:
        raise ValueError(f"unknown mode {mode!r}")
    target = int(round(seconds * features.frames_per_second))
    values = features.values
    if T < target:
        values = np.tile(values, (1, -(-target // T)))
        start = 0
    else:
        start = int(rng.integers(0, T - target + 1)) if mode == "train" else 0
    return FbankMatrix(values[:, start : start + target].copy(), features.hop, features.sample_rate)


def vad_trim(buffer: AudioBuffer, top_db: float = 40.0, frame: int = 2048, hop: int = 512) -> VadResult:
    """Trim leading/trailing frames quieter than ``top_db`` below the loudest frame.

    Frames are centered on multiples of ``hop`` (zero padded by ``frame // 2``);
    the kept span runs from the first loud frame's center to one hop past the
    last loud frame's center, clipped to the signal.
    """
    x = buffer.samples
    if x.size == 0:
        raise ValueError("empty buffer")
    padded = np.pad(x, frame // 2)
    n_frames = 1 + len(x) // hop
    frames = np.lib.stride_tricks.sliding_window_view(padded, frame)[::hop][:n_frames]
    power = np.mean(frames * frames, axis=1)
    peak = power.max()
    if peak <= 0:
        raise ValueError("all-silence utterance")
    with np.errstate(divide="ignore"):
        db = 10.0 * np.log10(power / peak)
    loud = np.flatnonzero(db >= -top_db)
    start = int(loud[0] * hop)
    end = int(min(len(x), (loud[-1] + 1) * hop))
    return VadResult(start, end, AudioBuffer(x[start:end], buffer.sample_rate))


# ---------------------------------------------------------------------------
# .fbnk files: "FBNK", u32 version, u32 rows, u32 cols, f32 row-major
# ---------------------------------------------------------------------------

_FBNK_MAGIC = b"FBNK"
_FBNK_VERSION = 1


def write_fbank(features: FbankMatrix, path) -> None:
    values = np.ascontiguousarray(features.values, dtype="<f4")
    rows, cols = values.shape
    with open(path, "wb") as fh:
        fh.write(_FBNK_MAGIC + struct.pack("<III", _FBNK_VERSION, rows, cols))
        fh.write(values.tobytes())


def read_fbank(path, hop: int = HOP, sample_rate: int = 16000) -> FbankMatrix:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != _FBNK_MAGIC:
        raise ValueError(f"{path}: not an FBNK file")
    version, rows, cols = struct.unpack("<III", data[4:16])
    if version != _FBNK_VERSION:
        raise ValueError(f"{path}: unsupported FBNK version {version}")
    if len(data) != 16 + 4 * rows * cols:
        raise ValueError(f"{path}: payload size does not match {rows}x{cols}")
    values = np.frombuffer(data, dtype="<f4", offset=16).reshape(rows, cols).astype(np.float64)
    return FbankMatrix(values, hop, sample_rate)
