"""Chebyshev Type I low-pass design and second-order-section filtering."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.signal

from .signal import AudioBuffer

FRONTEND_ORDER = 8
FRONTEND_RIPPLE_DB = 0.05  # the ripple is in dB


@dataclass(frozen=True)
class FilterSpec:
    order: int
    ripple_db: float
    cutoff_hz: float
    sample_rate: int

    def __post_init__(self):
        if self.order < 1:
            raise ValueError("filter order must be >= 1")
        if self.ripple_db <= 0:
            raise ValueError("ripple_db must be positive")
        nyq = self.sample_rate / 2
        if not 0 < self.cutoff_hz < nyq:
            raise ValueError(f"cutoff {self.cutoff_hz} Hz must lie in (0, {nyq}) Hz")


@dataclass(frozen=True, eq=False)
class SosFilter:
    """Cascade of biquads; each row is (b0, b1, b2, a1, a2) with a0 = 1."""

    sections: np.ndarray
    overall_gain: float

    def __post_init__(self):
        sections = np.asarray(self.sections, dtype=np.float64).reshape(-1, 5)
        sections.setflags(write=False)
        object.__setattr__(self, "sections", sections)

    @property
    def n_sections(self) -> int:
        return self.sections.shape[0]

    def poles(self) -> np.ndarray:
        out = []
        for _, _, _, a1, a2 in self.sections:
            out.extend(np.roots([1.0, a1, a2]) if a2 != 0 else [-a1])
        return np.asarray(out, dtype=np.complex128)

    def as_scipy_sos(self) -> np.ndarray:
        sos = np.zeros((self.n_sections, 6))
        sos[:, :3] = self.sections[:, :3]
        sos[:, 3] = 1.0
        sos[:, 4:] = self.sections[:, 3:]
        sos[0, :3] *= self.overall_gain
        return sos

    def dump(self) -> str:
        """Plain-text coefficient dump, 17 significant digits."""
        lines = [f"gain {self.overall_gain:.17g}"]
        for row in self.sections:
            lines.append(" ".join(f"{c:.17g}" for c in row))
        return "\n".join(lines) + "\n"


def cheby1_epsilon(ripple_db: float) -> float:
    return math.sqrt(10.0 ** (ripple_db / 10.0) - 1.0)


@lru_cache(maxsize=256)
def design_cheby1(spec: FilterSpec) -> SosFilter:
    """Digital Chebyshev Type I low-pass via the prewarped bilinear transform.

    Poles of the analog prototype sit on the ellipse set by the ripple
    factor; the prototype is scaled to the prewarped cutoff so the digital
    magnitude at ``cutoff_hz`` is exactly ``-ripple_db`` dB. Conjugate pole
    pairs become biquads with a double zero at z = -1, ordered by
    ascending pole magnitude.
    """
    n = spec.order
    fs = float(spec.sample_rate)
    eps = cheby1_epsilon(spec.ripple_db)
    mu = math.asinh(1.0 / eps) / n
    k = np.arange(1, n + 1)
    theta = np.pi * (2 * k - 1) / (2 * n)
    p = -math.sinh(mu) * np.sin(theta) + 1j * math.cosh(mu) * np.cos(theta)
    gain = float(np.real(np.prod(-p)))
    if n % 2 == 0:
        gain /= math.sqrt(1.0 + eps * eps)

    warped = 2.0 * fs * math.tan(math.pi * spec.cutoff_hz / fs)
    p = p * warped
    gain *= warped**n

    fs2 = 2.0 * fs
    z = (fs2 + p) / (fs2 - p)
    gain = float(np.real(gain / np.prod(fs2 - p)))

    # one representative per conjugate pair, plus the real pole for odd order
    upper = z[np.imag(z) > 1e-14]
    real = z[np.abs(np.imag(z)) <= 1e-14]
    sections = []
    for zp in sorted(upper, key=lambda q: (abs(q), q.real)):
        sections.append((1.0, 2.0, 1.0, -2.0 * zp.real, abs(zp) ** 2))
    for zr in sorted(np.real(real)):
        sections.append((1.0, 1.0, 0.0, -zr, 0.0))
    sections.sort(key=lambda s: math.sqrt(abs(s[4])) if s[4] != 0 else abs(s[3]))
    return SosFilter(np.array(sections), gain)


def freq_response(filt: SosFilter, freqs_hz, sample_rate: int) -> np.ndarray:
    """Complex response of the cascade at ``freqs_hz``."""
    f = np.asarray(freqs_hz, dtype=np.float64)
    if np.any(f < 0) or np.any(f > sample_rate / 2):
        raise ValueError("frequencies must lie in [0, Nyquist]")
    zi = np.exp(-1j * 2.0 * np.pi * f / sample_rate)
    h = np.full(f.shape, filt.overall_gain, dtype=np.complex128)
    for b0, b1, b2, a1, a2 in filt.sections:
        h *= (b0 + b1 * zi + b2 * zi * zi) / (1.0 + a1 * zi + a2 * zi * zi)
    return h


def sosfilt(filt: SosFilter, buffer: AudioBuffer) -> AudioBuffer:
    """Causal cascade filtering (transposed direct form II), zero initial state."""
    y = scipy.signal.sosfilt(filt.as_scipy_sos(), buffer.samples)
    if not np.all(np.isfinite(y)):
        raise FloatingPointError("filter output is not finite")
    return AudioBuffer(y, buffer.sample_rate)


def frontend_spec(fraction: float, sample_rate: int = 16000) -> FilterSpec:
    if not 0 < fraction < 1:
        raise ValueError(f"cutoff fraction must lie in (0, 1), got {fraction}")
    return FilterSpec(FRONTEND_ORDER, FRONTEND_RIPPLE_DB, fraction * sample_rate / 2, sample_rate)


def lowpass_frontend(buffer: AudioBuffer, fraction: float) -> AudioBuffer:
    """Order-8, 0.05 dB Chebyshev I low-pass at ``fraction`` of Nyquist."""
    return sosfilt(design_cheby1(frontend_spec(fraction, buffer.sample_rate)), buffer)
