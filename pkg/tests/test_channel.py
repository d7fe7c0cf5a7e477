import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bandguard.channel import (
    LABELS,
    ArtifactConfig,
    AugmentConfig,
    CodecProfile,
    CorpusSpec,
    Utterance,
    add_noise,
    add_reverb,
    apply_codec,
    augment_audio,
    augment_batch,
    generate_corpus,
    load_utterance,
    mulaw_compand,
    mulaw_expand,
    noise_bank,
    quantize_8bit,
    read_manifest,
    rir_envelope,
    sub_rng,
    sub_seed,
    synth_rir,
    synth_utterance,
    write_corpus,
)
from bandguard.signal import AudioBuffer

SR = 16000


def rms(x):
    return float(np.sqrt(np.mean(np.square(x))))


def tone(freq, n=SR, amp=0.5):
    return AudioBuffer(amp * np.sin(2 * np.pi * freq * np.arange(n) / SR), SR)


def tone_amplitude(x, freq, sr=SR):
    t = np.arange(len(x)) / sr
    A = np.stack([np.sin(2 * np.pi * freq * t), np.cos(2 * np.pi * freq * t)], axis=1)
    coef, *_ = np.linalg.lstsq(A, x, rcond=None)
    return float(np.hypot(*coef))


def schroeder_rt60(h, sr):
    """RT60 from a -5..-25 dB line fit of the backward-integrated energy decay."""
    edc = np.cumsum(h[::-1] ** 2)[::-1]
    db = 10 * np.log10(edc / edc[0])
    sel = (db <= -5) & (db >= -25)
    t = np.arange(len(h))[sel] / sr
    slope = np.polyfit(t, db[sel], 1)[0]
    return -60.0 / slope


class TestSeeding:
    def test_streams_and_indices_differ(self):
        seeds = {sub_seed(0, i, s) for i in range(50) for s in range(3)}
        assert len(seeds) == 150

    def test_stable_value(self):
        assert sub_seed(7, 3, 1) == sub_seed(7, 3, 1)


class TestAddNoise:
    def test_huge_snr_is_identity(self):
        clean = tone(440)
        out = add_noise(clean, noise_bank("white", 800, np.random.default_rng(0)), 1e9)
        assert rms(out.samples - clean.samples) < 1e-4

    def test_zero_db_unit_scale(self):
        rng = np.random.default_rng(1)
        c = rng.standard_normal(4000)
        n = rng.standard_normal(4000)
        c /= rms(c)
        n /= rms(n)
        out = add_noise(AudioBuffer(c, SR), AudioBuffer(n, SR), 0.0)
        np.testing.assert_allclose(out.samples - c, n, atol=1e-12)

    @pytest.mark.parametrize("kind", ["white", "pink", "babble"])
    def test_measured_snr(self, kind):
        clean = tone(300, 12000)
        noise = noise_bank(kind, 5000, np.random.default_rng(2))
        out = add_noise(clean, noise, 10.0)
        resid = out.samples - clean.samples
        snr = 10 * np.log10(np.mean(clean.samples**2) / np.mean(resid**2))
        assert abs(snr - 10.0) < 0.01

    def test_errors(self):
        with pytest.raises(ValueError):
            add_noise(AudioBuffer(np.zeros(10), SR), AudioBuffer(np.ones(10), SR), 5)
        with pytest.raises(ValueError):
            add_noise(tone(100, 10), AudioBuffer(np.zeros(0), SR), 5)


class TestReverb:
    def test_delta_identity(self):
        dry = tone(200, 2000)
        assert np.array_equal(add_reverb(dry, AudioBuffer(np.array([1.0]), SR)).samples, dry.samples)

    def test_delayed_delta_shifts(self):
        dry = tone(200, 2000)
        h = np.zeros(101)
        h[100] = 1.0
        out = add_reverb(dry, AudioBuffer(h, SR)).samples
        shifted = np.concatenate([np.zeros(100), dry.samples[:-100]])
        expected = shifted * (np.max(np.abs(dry.samples)) / np.max(np.abs(shifted)))
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_rir_definition(self):
        assert rir_envelope(0.3, 0.3) == pytest.approx(1e-3, rel=1e-12)
        rir = synth_rir(0.3, SR, np.random.default_rng(0))
        assert len(rir) == int(1.5 * 0.3 * SR)
        assert np.max(np.abs(rir.samples)) == 1.0
        again = synth_rir(0.3, SR, np.random.default_rng(0))
        assert np.array_equal(rir.samples, again.samples)

    def test_schroeder_decay(self):
        rir = synth_rir(0.3, SR, np.random.default_rng(4))
        impulse = np.zeros(2 * len(rir))
        impulse[0] = 1.0
        tail = add_reverb(AudioBuffer(impulse, SR), rir).samples
        assert abs(schroeder_rt60(tail[: len(rir)], SR) - 0.3) <= 0.3 * 0.2


class TestAugment:
    def short_utts(self, n):
        rng = np.random.default_rng(0)
        return [Utterance(f"u{i}", AudioBuffer(rng.standard_normal(160), SR), "bonafide", "train") for i in range(n)]

    def test_probability_zero_is_identity(self):
        utts = self.short_utts(20)
        out = augment_batch(utts, AugmentConfig(apply_probability=0.0))
        assert all(a.audio is b.audio for a, b in zip(utts, out))

    def test_binomial_band(self):
        cfg = AugmentConfig(reverb_rt60_range_s=(0.001, 0.002))
        audio = AudioBuffer(np.random.default_rng(0).standard_normal(64), SR)
        kinds = [augment_audio(audio, cfg, sub_rng(cfg.seed, i, 0xA6))[1] for i in range(3000)]
        applied = sum(k != "none" for k in kinds)
        assert abs(applied - 2000) <= 80
        assert {"noise", "reverb", "both"} <= set(kinds)

    def test_deterministic_and_metadata_untouched(self):
        utts = self.short_utts(30)
        cfg = AugmentConfig(seed=9, reverb_rt60_range_s=(0.001, 0.003))
        a = augment_batch(utts, cfg)
        b = augment_batch(utts, cfg)
        assert all(np.array_equal(x.audio.samples, y.audio.samples) for x, y in zip(a, b))
        assert [(u.id, u.label, u.subset) for u in a] == [(u.id, u.label, u.subset) for u in utts]
        assert all(len(x.audio) == len(u.audio) and x.audio.sample_rate == SR for x, u in zip(a, utts))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            AugmentConfig(apply_probability=1.5)
        with pytest.raises(ValueError):
            AugmentConfig(snr_range_db=(20, 5))


class TestMulaw:
    def test_endpoints(self):
        assert mulaw_compand(0.0) == 0.0
        assert mulaw_compand(1.0) == pytest.approx(1.0, abs=1e-15)
        assert mulaw_compand(-1.0) == pytest.approx(-1.0, abs=1e-15)

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            mulaw_compand(np.array([0.5, 1.01]))

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-1, 1))
    def test_expand_inverts_compand(self, x):
        assert mulaw_expand(mulaw_compand(x)) == pytest.approx(x, abs=1e-12)

    def test_quantizer_levels(self):
        y = quantize_8bit(np.linspace(-1, 1, 10001))
        assert len(np.unique(y)) == 256
        assert np.max(np.abs(y - np.linspace(-1, 1, 10001))) <= 1 / 255 + 1e-12

    def test_companding_snr(self):
        x = np.sin(2 * np.pi * 1000 * np.arange(8000) / 8000.0 + 0.1)
        y = mulaw_expand(quantize_8bit(mulaw_compand(x)))
        snr = 10 * np.log10(np.sum(x**2) / np.sum((y - x) ** 2))
        assert snr >= 30


class TestCodec:
    def test_clean_identity(self):
        buf = tone(1000)
        assert apply_codec(buf, CodecProfile("clean")) is buf

    def test_passband_tone(self):
        out = apply_codec(tone(1000), CodecProfile("g711_mulaw")).samples[4000:]
        assert abs(20 * np.log10(tone_amplitude(out, 1000) / 0.5)) <= 1.0

    @pytest.mark.parametrize("freq", [5000, 6000, 7000])
    def test_removes_above_4k(self, freq):
        buf = tone(freq)
        out = apply_codec(buf, CodecProfile("g711_mulaw")).samples[4000:]
        assert 20 * np.log10(tone_amplitude(out, freq) / 0.5) <= -20

    @pytest.mark.parametrize("name", ["g711_mulaw", "bandlimit"])
    @pytest.mark.parametrize("n", [16000, 16001, 12345])
    def test_rate_and_length(self, name, n):
        out = apply_codec(tone(500, n), CodecProfile(name))
        assert out.sample_rate == SR and len(out) == n

    def test_bandlimit_noise_floor(self):
        out = apply_codec(tone(1000), CodecProfile("bandlimit")).samples
        t = np.arange(len(out)) / SR
        A = np.stack([np.sin(2 * np.pi * 1000 * t), np.cos(2 * np.pi * 1000 * t)], axis=1)
        coef, *_ = np.linalg.lstsq(A[4000:], out[4000:], rcond=None)
        floor_db = 20 * np.log10(rms(out[4000:] - A[4000:] @ coef) / rms(out))
        assert abs(floor_db + 40) < 1.0

    def test_rejects_other_rates(self):
        with pytest.raises(ValueError):
            apply_codec(AudioBuffer(np.zeros(100), 8000), CodecProfile("g711_mulaw"))
        with pytest.raises(ValueError):
            CodecProfile("opus")


def band_share_db(x, lo, hi):
    power = np.abs(np.fft.rfft(x)) ** 2
    f = np.fft.rfftfreq(len(x), 1 / SR)
    return 10 * np.log10(power[(f >= lo) & (f < hi)].sum() / power.sum())


class TestCorpus:
    def test_counts_labels_ids(self):
        utts = generate_corpus(CorpusSpec(n_bonafide=10, n_spoof=10, duration_range_s=(0.5, 0.8)))
        assert len(utts) == 20
        assert sum(u.label == "bonafide" for u in utts) == 10
        assert len({u.id for u in utts}) == 20
        assert all(u.id.startswith(f"synth-{u.subset}-{u.label}-") for u in utts)
        assert {u.subset for u in utts} == {"train", "dev", "eval"}

    def test_disabled_artifacts_degenerate_to_bonafide(self):
        spec = CorpusSpec(duration_range_s=(0.5, 1.0))
        off = CorpusSpec(duration_range_s=(0.5, 1.0), artifacts=ArtifactConfig(enabled=False))
        a = synth_utterance(off, "spoof", np.random.default_rng(5))
        b = synth_utterance(spec, "bonafide", np.random.default_rng(5))
        assert np.array_equal(a, b)

    def test_band_energy_shares(self):
        utts = generate_corpus(CorpusSpec(n_bonafide=60, n_spoof=60, seed=0))
        share = {lab: np.mean([band_share_db(u.audio.samples, 2000, 3800) for u in utts if u.label == lab]) for lab in LABELS}
        high = {lab: np.mean([band_share_db(u.audio.samples, 6000, 8000) for u in utts if u.label == lab]) for lab in LABELS}
        assert share["spoof"] - share["bonafide"] >= 3.0
        assert high["spoof"] - high["bonafide"] >= 10.0

    def test_leading_and_trailing_silence(self):
        u = generate_corpus(CorpusSpec(n_bonafide=1, n_spoof=1, duration_range_s=(1, 1)))[0]
        x = u.audio.samples
        assert rms(x[:1000]) < 0.05 * rms(x)
        assert rms(x[-1000:]) < 0.05 * rms(x)
        assert np.max(np.abs(x)) == pytest.approx(0.5)

    def test_byte_identical_wavs(self, tmp_path):
        spec = CorpusSpec(n_bonafide=3, n_spoof=3, duration_range_s=(0.3, 0.5), seed=11)
        write_corpus(generate_corpus(spec), tmp_path / "a")
        write_corpus(generate_corpus(spec), tmp_path / "b")
        for p in sorted((tmp_path / "a" / "wav").iterdir()):
            assert p.read_bytes() == (tmp_path / "b" / "wav" / p.name).read_bytes()
        assert (tmp_path / "a" / "manifest.tsv").read_bytes() == (tmp_path / "b" / "manifest.tsv").read_bytes()

    def test_manifest_roundtrip(self, tmp_path):
        utts = generate_corpus(CorpusSpec(n_bonafide=2, n_spoof=2, duration_range_s=(0.3, 0.4)))
        entries = read_manifest(write_corpus(utts, tmp_path))
        loaded = [load_utterance(e) for e in entries]
        assert [u.id for u in loaded] == [u.id for u in utts]
        for a, b in zip(loaded, utts):
            assert np.max(np.abs(a.audio.samples - b.audio.samples)) <= 1 / 32768

    def test_manifest_errors(self, tmp_path):
        bad = tmp_path / "m.tsv"
        bad.write_text("u1\twav/u1.wav\tmaybe\ttrain\n")
        with pytest.raises(ValueError):
            read_manifest(bad)
        bad.write_text("u1\twav/u1.wav\tspoof\ttrain\nu1\twav/u1.wav\tspoof\ttrain\n")
        with pytest.raises(ValueError):
            read_manifest(bad)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            CorpusSpec(n_bonafide=0)
        with pytest.raises(ValueError):
            CorpusSpec(split=(0.5, 0.5, 0.5))
