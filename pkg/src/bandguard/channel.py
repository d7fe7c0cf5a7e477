"""Noise/reverb augmentation, telephone codec simulation and the synthetic corpus."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.signal

from .filters import FilterSpec, design_cheby1, sosfilt
from .signal import AudioBuffer, read_wav, resample, write_wav

MAX_SNR_DB = 100.0
RT60_DECAY = np.log(1e3)  # 60 dB amplitude decay = ln(10^3)

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def sub_seed(master: int, index: int, stream: int = 0) -> int:
    """Per-item seed from (master seed, item index, stream tag)."""
    return splitmix64(splitmix64(splitmix64(master & _MASK64) ^ (index & _MASK64)) ^ stream)


def sub_rng(master: int, index: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng(sub_seed(master, index, stream))


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    apply_probability: float = 2.0 / 3.0
    snr_range_db: tuple[float, float] = (5.0, 20.0)
    reverb_rt60_range_s: tuple[float, float] = (0.1, 0.5)
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.apply_probability <= 1:
            raise ValueError("apply_probability must lie in [0, 1]")
        if self.snr_range_db[0] > self.snr_range_db[1]:
            raise ValueError("snr range min exceeds max")
        lo, hi = self.reverb_rt60_range_s
        if not 0 < lo <= hi:
            raise ValueError("rt60 range must be positive and ordered")


def _power(x: np.ndarray) -> float:
    return float(np.mean(x * x))


def add_noise(clean: AudioBuffer, noise: AudioBuffer, snr_db: float) -> AudioBuffer:
    """Mix ``noise`` into ``clean`` at ``snr_db`` (full-utterance powers)."""
    if len(noise) == 0:
        raise ValueError("empty noise buffer")
    p_clean = _power(clean.samples)
    if p_clean <= 0:
        raise ValueError("clean signal has zero power")
    n = np.resize(noise.samples, len(clean))
    p_noise = _power(n)
    if p_noise <= 0:
        return clean
    snr_db = min(float(snr_db), MAX_SNR_DB)
    scale = np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    return clean.replace(clean.samples + scale * n)


def add_reverb(dry: AudioBuffer, rir: AudioBuffer) -> AudioBuffer:
    """Convolve with ``rir``, keep the dry length and restore the dry peak."""
    if len(rir) == 0:
        raise ValueError("empty impulse response")
    wet = scipy.signal.convolve(dry.samples, rir.samples, mode="full")[: len(dry)]
    peak_wet = np.max(np.abs(wet))
    peak_dry = np.max(np.abs(dry.samples))
    if peak_wet > 0:
        wet = wet * (peak_dry / peak_wet)
    return dry.replace(wet)


def rir_envelope(t, rt60_s: float):
    return np.exp(-np.asarray(t) * (RT60_DECAY / rt60_s))


def synth_rir(rt60_s: float, sample_rate: int, rng: np.random.Generator) -> AudioBuffer:
    """Exponentially decaying white noise, 1.5 x RT60 long, unit peak."""
    if rt60_s <= 0:
        raise ValueError("rt60 must be positive")
    n = max(1, int(1.5 * rt60_s * sample_rate))
    t = np.arange(n) / sample_rate
    h = rng.standard_normal(n) * rir_envelope(t, rt60_s)
    return AudioBuffer(h / np.max(np.abs(h)), sample_rate)


def white_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal(n)


def pink_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    """White noise shaped to -3 dB/octave in the frequency domain."""
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(spec.shape[0], dtype=np.float64)
    f[0] = 1.0
    return np.fft.irfft(spec / np.sqrt(f), n=n)


def _harmonic_sum(phase: np.ndarray, coefs: np.ndarray) -> np.ndarray:
    """sum_k Im(coefs[k-1] * exp(1j * k * phase)) via a running phasor product."""
    z = np.exp(1j * phase)
    zk = np.ones_like(z)
    acc = np.zeros_like(z)
    for c in coefs:
        zk *= z
        acc += c * zk
    return acc.imag


def babble_noise(n: int, rng: np.random.Generator, sample_rate: int = 16000, talkers: int = 5) -> np.ndarray:
    """Sum of a few amplitude-modulated harmonic series with random pitch."""
    t = np.arange(n) / sample_rate
    out = np.zeros(n)
    for _ in range(talkers):
        f0 = rng.uniform(90.0, 250.0)
        n_harm = int(4000 // f0)
        k = np.arange(1, n_harm + 1)
        amps = (1.0 / k) * rng.uniform(0.5, 1.0, size=n_harm)
        phases = rng.uniform(0, 2 * np.pi, size=n_harm)
        voice = _harmonic_sum(2 * np.pi * f0 * t, amps * np.exp(1j * phases))
        rate = rng.uniform(2.0, 5.0)
        env = 0.5 * (1 - np.cos(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)))
        out += voice * env
    return out


NOISE_KINDS = ("white", "pink", "babble")


def noise_bank(kind: str, n: int, rng: np.random.Generator, sample_rate: int = 16000) -> AudioBuffer:
    if kind == "white":
        x = white_noise(n, rng)
    elif kind == "pink":
        x = pink_noise(n, rng)
    elif kind == "babble":
        x = babble_noise(n, rng, sample_rate)
    else:
        raise ValueError(f"unknown noise kind {kind!r}")
    return AudioBuffer(x, sample_rate)


@dataclass(frozen=True, eq=False)
class Utterance:
    id: str
    audio: AudioBuffer
    label: str  # "bonafide" | "spoof"
    subset: str  # "train" | "dev" | "eval"


LABELS = ("bonafide", "spoof")
SUBSETS = ("train", "dev", "eval")


def augment_audio(audio: AudioBuffer, cfg: AugmentConfig, rng: np.random.Generator) -> tuple[AudioBuffer, str]:
    """Possibly augment one waveform; returns the result and the applied kind."""
    if rng.random() >= cfg.apply_probability:
        return audio, "none"
    kind = ("noise", "reverb", "both")[int(rng.integers(0, 3))]
    out = audio
    if kind in ("reverb", "both"):
        rt60 = rng.uniform(*cfg.reverb_rt60_range_s)
        out = add_reverb(out, synth_rir(rt60, audio.sample_rate, rng))
    if kind in ("noise", "both") and _power(out.samples) > 0:
        noise = noise_bank(NOISE_KINDS[int(rng.integers(0, 3))], len(out), rng, audio.sample_rate)
        out = add_noise(out, noise, rng.uniform(*cfg.snr_range_db))
    return out, kind


def augment_batch(utts, cfg: AugmentConfig) -> list[Utterance]:
    """Augment each utterance with probability ``cfg.apply_probability``."""
    out = []
    for i, u in enumerate(utts):
        audio, _ = augment_audio(u.audio, cfg, sub_rng(cfg.seed, i, stream=0xA6))
        out.append(u if audio is u.audio else replace(u, audio=audio))
    return out


# ---------------------------------------------------------------------------
# Codec simulation
# ---------------------------------------------------------------------------


def mulaw_compand(x, mu: float = 255.0):
    x = np.asarray(x, dtype=np.float64)
    if np.any(np.abs(x) > 1.0):
        raise ValueError("mu-law input must lie in [-1, 1]; clip first")
    return np.sign(x) * np.log1p(mu * np.abs(x)) / np.log1p(mu)


def mulaw_expand(y, mu: float = 255.0):
    y = np.asarray(y, dtype=np.float64)
    return np.sign(y) * ((1.0 + mu) ** np.abs(y) - 1.0) / mu


def quantize_8bit(y):
    """Snap companded values to the nearest of 256 uniform levels on [-1, 1]."""
    k = np.clip(np.round((np.asarray(y) + 1.0) * 127.5), 0, 255)
    return k / 127.5 - 1.0


@dataclass(frozen=True)
class CodecProfile:
    name: str = "clean"  # clean | g711_mulaw | bandlimit
    mu: float = 255.0
    narrow_rate: int = 8000
    cutoff_hz: float = 3400.0
    noise_floor_db: float = 40.0
    seed: int = 0

    def __post_init__(self):
        if self.name not in CODEC_NAMES:
            raise ValueError(f"unknown codec profile {self.name!r}")


CODEC_NAMES = ("clean", "g711_mulaw", "bandlimit")


def _fit_length(x: np.ndarray, n: int) -> np.ndarray:
    if len(x) >= n:
        return x[:n]
    return np.pad(x, (0, n - len(x)))


def apply_codec(buffer: AudioBuffer, profile: CodecProfile) -> AudioBuffer:
    """Simulate a transmission channel; output stays at 16 kHz, same length."""
    if buffer.sample_rate != 16000:
        raise ValueError(f"codec simulation expects 16 kHz input, got {buffer.sample_rate}")
    if profile.name == "clean":
        return buffer
    if profile.name == "g711_mulaw":
        narrow = resample(buffer, profile.narrow_rate)
        y = quantize_8bit(mulaw_compand(np.clip(narrow.samples, -1.0, 1.0), profile.mu))
        narrow = narrow.replace(mulaw_expand(y, profile.mu))
        wide = resample(narrow, buffer.sample_rate)
        return buffer.replace(_fit_length(wide.samples, len(buffer)))
    # bandlimit
    spec = FilterSpec(8, 0.05, profile.cutoff_hz, buffer.sample_rate)
    out = sosfilt(design_cheby1(spec), buffer).samples
    rms = np.sqrt(_power(out))
    rng = np.random.default_rng(profile.seed)
    noise = rng.standard_normal(len(out)) * rms * 10.0 ** (-profile.noise_floor_db / 20.0)
    return buffer.replace(out + noise)


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ArtifactConfig:
    low_strength_db: float = -11.0  # tone cluster level relative to speech RMS
    high_strength_db: float = -25.0  # mirrored-harmonic level relative to speech RMS
    spread_db: float = 6.0  # per-utterance uniform jitter of both levels
    enabled: bool = True


@dataclass(frozen=True)
class CorpusSpec:
    n_bonafide: int = 500
    n_spoof: int = 500
    duration_range_s: tuple[float, float] = (2.0, 4.0)
    sample_rate: int = 16000
    artifacts: ArtifactConfig = field(default_factory=ArtifactConfig)
    silence_pad_range_s: tuple[float, float] = (0.2, 0.6)
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0

    def __post_init__(self):
        if self.n_bonafide < 1 or self.n_spoof < 1:
            raise ValueError("corpus needs at least one utterance per label")
        if not 0 < self.duration_range_s[0] <= self.duration_range_s[1]:
            raise ValueError("durations must be positive and ordered")
        if not 0 <= self.silence_pad_range_s[0] <= self.silence_pad_range_s[1]:
            raise ValueError("silence pads must be non-negative and ordered")
        if len(self.split) != 3 or min(self.split) < 0 or abs(sum(self.split) - 1) > 1e-9:
            raise ValueError("split must be three non-negative fractions summing to 1")


def _formant_gain(freqs: np.ndarray, centers, bandwidths) -> np.ndarray:
    g = np.zeros_like(freqs)
    for fc, bw in zip(centers, bandwidths):
        g += 1.0 / (1.0 + ((freqs - fc) / (bw / 2.0)) ** 2)
    return g


def synth_speech(rng: np.random.Generator, n_speech: int, sample_rate: int):
    """Harmonic source-filter signal; returns (waveform, envelope, f0 track)."""
    t = np.arange(n_speech) / sample_rate
    f0_base = rng.uniform(80.0, 300.0)
    vib_rate, vib_depth = rng.uniform(3.0, 6.0), rng.uniform(0.01, 0.04)
    f0 = f0_base * (1.0 + vib_depth * np.sin(2 * np.pi * vib_rate * t + rng.uniform(0, 2 * np.pi)))
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    centers = (rng.uniform(300, 900), rng.uniform(900, 2500), rng.uniform(2500, 3500))
    bandwidths = (rng.uniform(80, 160), rng.uniform(100, 200), rng.uniform(150, 300))
    n_harm = int(7800.0 // (f0_base * (1 + vib_depth)))
    fk = f0_base * np.arange(1, n_harm + 1)
    amps = (_formant_gain(fk, centers, bandwidths) + 0.02) * (500.0 / (fk + 500.0)) ** 1.5
    offsets = rng.uniform(0, 2 * np.pi, size=n_harm)
    x = _harmonic_sum(phase, amps * np.exp(1j * offsets))
    rate = rng.uniform(2.0, 5.0)
    env = 0.55 - 0.45 * np.cos(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
    # smooth onset/offset so the speech region has no clicks
    ramp = min(n_speech // 4, int(0.02 * sample_rate))
    if ramp > 0:
        fade = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        env[:ramp] *= fade
        env[-ramp:] *= fade[::-1]
    return x * env, env, f0


def _low_band_artifact(rng, t, env, sample_rate):
    """Dense inharmonic tone cluster in 2.0-3.1 kHz, following the envelope.

    The upper edge stays below the 8 kHz telephone path's passband so the
    cue survives the codec.
    """
    n_tones = int(rng.integers(20, 33))
    freqs = rng.uniform(2000.0, 3100.0, size=n_tones)
    phases = rng.uniform(0, 2 * np.pi, size=n_tones)
    a = np.zeros_like(t)
    for f, ph in zip(freqs, phases):
        a += np.sin(2 * np.pi * f * t + ph)
    return a * env


def _high_band_artifact(rng, t, env, f0, sample_rate):
    """Low harmonics mirrored about Nyquist, landing between 6 and 7.9 kHz."""
    nyq = sample_rate / 2
    f0_mean = float(np.mean(f0))
    out = np.zeros_like(t)
    for k in range(1, int((nyq - 6000.0) // f0_mean) + 1):
        if nyq - k * f0_mean > 7900.0:
            continue
        inst = nyq - k * f0
        out += np.sin(2 * np.pi * np.cumsum(inst) / sample_rate + rng.uniform(0, 2 * np.pi))
    return out * env


def synth_utterance(spec: CorpusSpec, label: str, rng: np.random.Generator) -> np.ndarray:
    sr = spec.sample_rate
    n_speech = int(rng.uniform(*spec.duration_range_s) * sr)
    pad_l = int(rng.uniform(*spec.silence_pad_range_s) * sr)
    pad_r = int(rng.uniform(*spec.silence_pad_range_s) * sr)
    speech, env, f0 = synth_speech(rng, n_speech, sr)
    speech_rms = np.sqrt(_power(speech))
    floor = rng.standard_normal(pad_l + n_speech + pad_r) * speech_rms * 1e-2  # -40 dB
    art_seed = int(rng.integers(0, 2**63))
    x = floor
    x[pad_l : pad_l + n_speech] += speech
    if label == "spoof" and spec.artifacts.enabled:
        arng = np.random.default_rng(art_seed)
        t = np.arange(n_speech) / sr
        low = _low_band_artifact(arng, t, env, sr)
        high = _high_band_artifact(arng, t, env, f0, sr)
        spread = spec.artifacts.spread_db
        for art, level_db in ((low, spec.artifacts.low_strength_db), (high, spec.artifacts.high_strength_db)):
            level_db += arng.uniform(-spread, spread) if spread > 0 else 0.0
            p = _power(art)
            if p > 0:
                x[pad_l : pad_l + n_speech] += art * speech_rms * 10 ** (level_db / 20) / np.sqrt(p)
    return x / (np.max(np.abs(x)) / 0.5)


def _subset_counts(n: int, split) -> tuple[int, int, int]:
    n_train = int(round(n * split[0]))
    n_dev = int(round(n * split[1]))
    n_dev = min(n_dev, n - n_train)
    return n_train, n_dev, n - n_train - n_dev


def generate_corpus(spec: CorpusSpec) -> list[Utterance]:
    """Deterministic synthetic bonafide/spoof corpus, split per label."""
    utts = []
    index = 0
    for label, count in (("bonafide", spec.n_bonafide), ("spoof", spec.n_spoof)):
        n_train, n_dev, _ = _subset_counts(count, spec.split)
        per_subset = {"train": 0, "dev": 0, "eval": 0}
        for i in range(count):
            subset = "train" if i < n_train else "dev" if i < n_train + n_dev else "eval"
            rng = sub_rng(spec.seed, index, stream=0xC0)
            audio = AudioBuffer(synth_utterance(spec, label, rng), spec.sample_rate)
            utts.append(Utterance(f"synth-{subset}-{label}-{per_subset[subset]}", audio, label, subset))
            per_subset[subset] += 1
            index += 1
    return utts


# ---------------------------------------------------------------------------
# Manifest TSV: utt_id, path, label, subset
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    utt_id: str
    path: Path
    label: str
    subset: str


def write_corpus(utts, out_dir) -> Path:
    """Write WAVs under ``out_dir/wav`` and the manifest TSV; returns its path."""
    out_dir = Path(out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.tsv"
    with open(manifest, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        for u in utts:
            rel = Path("wav") / f"{u.id}.wav"
            write_wav(u.audio, out_dir / rel)
            w.writerow([u.id, rel.as_posix(), u.label, u.subset])
    return manifest


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    entries, seen = [], set()
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter="\t"), 1):
            if not row:
                continue
            if len(row) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 columns, got {len(row)}")
            utt_id, rel, label, subset = row
            if label not in LABELS:
                raise ValueError(f"{path}:{lineno}: unknown label {label!r}")
            if subset not in SUBSETS:
                raise ValueError(f"{path}:{lineno}: unknown subset {subset!r}")
            if utt_id in seen:
                raise ValueError(f"{path}:{lineno}: duplicate utterance id {utt_id!r}")
            seen.add(utt_id)
            entries.append(ManifestEntry(utt_id, path.parent / rel, label, subset))
    return entries


def load_utterance(entry: ManifestEntry) -> Utterance:
    return Utterance(entry.utt_id, read_wav(entry.path), entry.label, entry.subset)
