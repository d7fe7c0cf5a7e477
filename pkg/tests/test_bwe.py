import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bandguard.bwe import (
    BweExtender,
    BweInput,
    band_sizes,
    cutoff_bin,
    extend,
    extend_replicate,
    extend_replicate_spectrogram,
    extend_spectrogram,
    fit_ridge,
    load_extender,
    measure_quality,
    mirror_sources,
    rolloff_gain,
    save_extender,
    train_linear_regressor,
)
from bandguard.channel import CorpusSpec, generate_corpus
from bandguard.features import LOG_FLOOR
from bandguard.filters import lowpass_frontend
from bandguard.signal import AudioBuffer, stft

SR = 16000


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(CorpusSpec(n_bonafide=14, n_spoof=14, duration_range_s=(1.0, 1.5), seed=5))


def pairs_for(utts, fraction):
    return [(lowpass_frontend(u.audio, fraction), u.audio) for u in utts]


@pytest.fixture(scope="module")
def trained(corpus):
    return train_linear_regressor(pairs_for(corpus[:10] + corpus[14:24], 0.5), 0.5)


class TestPartition:
    def test_cutoff_bin(self):
        assert cutoff_bin(0.5) == 256
        assert band_sizes(0.5) == (257, 256)
        assert sum(band_sizes(0.37)) == 513

    def test_mirror_sources(self):
        np.testing.assert_array_equal(mirror_sources(5, 4), [4, 3, 2, 1])
        # reflects back up once the mirror hits DC
        np.testing.assert_array_equal(mirror_sources(3, 8), [2, 1, 0, 1, 2, 3, 2, 1])

    @pytest.mark.parametrize("fraction", [0.2, 0.4, 0.5, 0.7])
    def test_rolloff_never_amplifies(self, fraction):
        c = cutoff_bin(fraction)
        g = rolloff_gain(c, 512 - c)
        assert np.all(g <= 1.0) and np.all(np.diff(g) < 0)
        # -12 dB per doubling of frequency
        assert 20 * np.log10(rolloff_gain(c, c)[-1]) == pytest.approx(-12.0, abs=1e-9)


class TestReplicate:
    def test_zero_in_zero_out(self):
        out = extend_replicate(BweInput(AudioBuffer(np.zeros(4000), SR), 0.5))
        assert np.all(out.samples == 0) and len(out) == 4000

    def test_low_band_preserved(self, corpus):
        nb = lowpass_frontend(corpus[0].audio, 0.5)
        inp = BweInput(nb, 0.5)
        out, spec = extend_replicate_spectrogram(inp)
        c = cutoff_bin(0.5)
        src = stft(nb).bins[: c + 1]
        assert np.array_equal(spec.bins[: c + 1], src)
        again = stft(out).bins[: c + 1]
        # re-analysis spills the new high band into the bins right below the cutoff
        err = np.abs(again - src)[: c - 10].max() / np.abs(src).max()
        assert err < 1e-4

    def test_sine_mirror(self):
        x = AudioBuffer(0.5 * np.sin(2 * np.pi * 1000 * np.arange(SR) / SR), SR)
        out = extend_replicate(BweInput(lowpass_frontend(x, 0.5), 0.5)).samples[4000:-4000]
        spec = np.abs(np.fft.rfft(out * np.hanning(len(out))))
        f = np.fft.rfftfreq(len(out), 1 / SR)
        ref = np.abs(np.fft.rfft(lowpass_frontend(x, 0.5).samples[4000:-4000] * np.hanning(len(out))))
        assert spec[f > 4000].max() > 1e-3 * spec.max()
        k = np.argmin(np.abs(f - 1000))
        assert abs(20 * np.log10(spec[k] / ref[k])) < 0.1

    def test_high_band_bounded_by_mirrored_source(self, corpus):
        nb = lowpass_frontend(corpus[3].audio, 0.4)
        _, spec = extend_replicate_spectrogram(BweInput(nb, 0.4))
        c = cutoff_bin(0.4)
        src = np.abs(spec.bins[mirror_sources(c, 512 - c)])
        assert np.all(np.abs(spec.bins[c + 1 :]) <= src * (1 + 1e-12))

    def test_too_few_high_bins(self):
        with pytest.raises(ValueError):
            extend_replicate(BweInput(AudioBuffer(np.ones(3000), SR), 0.999))

    def test_wideband_input_warns(self, caplog):
        x = AudioBuffer(np.random.default_rng(0).standard_normal(4000), SR)
        with caplog.at_level(logging.WARNING):
            extend_replicate(BweInput(x, 0.5))
        assert "above the cutoff" in caplog.text


class TestRidge:
    def test_silent_high_band(self):
        rng = np.random.default_rng(0)
        X = rng.standard_normal((500, 12))
        Y = np.full((500, 7), np.log(LOG_FLOOR))
        W, b = fit_ridge(X, Y, 1e-3)
        assert np.linalg.norm(W) < 1e-3
        np.testing.assert_allclose(b, np.log(LOG_FLOOR), atol=1e-9)

    def test_silent_wideband_pairs(self, corpus):
        pairs = [(lowpass_frontend(u.audio, 0.5), u.audio.replace(np.zeros(len(u.audio)))) for u in corpus[:4]]
        ext = train_linear_regressor(pairs, 0.5)
        assert np.linalg.norm(ext.weights) < 1e-3
        np.testing.assert_allclose(ext.bias, np.log(LOG_FLOOR), atol=1e-9)

    def test_exact_recovery_of_log_linear_relation(self):
        c = cutoff_bin(0.5)
        n_low, n_high = band_sizes(0.5)
        src = mirror_sources(c, n_high)
        rng = np.random.default_rng(1)
        X = rng.standard_normal((20000, n_low)) * 2.0
        Y = X[:, src] + np.log(0.5)
        W, b = fit_ridge(X, Y, 1e-3)
        X_test = rng.standard_normal((200, n_low)) * 2.0
        err = np.abs(X_test @ W.T + b - (X_test[:, src] + np.log(0.5)))
        assert err.max() < 1e-6

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(3, 30), st.integers(1, 10), st.floats(1e-4, 10.0))
    def test_stationarity(self, seed, n_in, n_out, lam):
        rng = np.random.default_rng(seed)
        X = rng.standard_normal((n_in * 4 + 5, n_in)) * rng.uniform(0.1, 5)
        Y = rng.standard_normal((X.shape[0], n_out))
        W, b = fit_ridge(X, Y, lam)
        R = X @ W.T + b - Y
        grad_W = 2 * (R.T @ X + lam * W)
        grad_b = 2 * R.sum(axis=0)
        scale = np.linalg.norm(X) * np.linalg.norm(Y) + 1.0
        assert np.linalg.norm(grad_W) < 1e-6 * scale
        assert np.linalg.norm(grad_b) < 1e-6 * scale

    def test_bad_lambda(self):
        with pytest.raises(ValueError):
            fit_ridge(np.ones((5, 2)), np.ones((5, 1)), 0.0)

    def test_needs_enough_frames(self):
        tiny = AudioBuffer(np.random.default_rng(0).standard_normal(2000), SR)
        with pytest.raises(ValueError, match="100"):
            train_linear_regressor([(tiny, tiny)], 0.5)


class TestRegressor:
    def test_low_band_preserved(self, trained, corpus):
        nb = lowpass_frontend(corpus[12].audio, 0.5)
        _, spec = extend_spectrogram(BweInput(nb, 0.5), trained)
        assert np.array_equal(spec.bins[:257], stft(nb).bins[:257])
        assert len(extend(BweInput(nb, 0.5), trained)) == len(nb)

    def test_deterministic(self, trained, corpus):
        inp = BweInput(lowpass_frontend(corpus[11].audio, 0.5), 0.5)
        assert np.array_equal(extend(inp, trained).samples, extend(inp, trained).samples)

    def test_beats_replication_on_held_out(self, trained, corpus):
        held = corpus[10:14] + corpus[24:]
        rep = BweExtender("replicate", 0.5)
        lsd_reg = np.mean([measure_quality(extend(BweInput(nb, 0.5), trained), wb, 0.5).lsd for nb, wb in pairs_for(held, 0.5)])
        lsd_rep = np.mean([measure_quality(extend(BweInput(nb, 0.5), rep), wb, 0.5).lsd for nb, wb in pairs_for(held, 0.5)])
        assert lsd_reg < lsd_rep

    def test_replicate_dispatch(self, corpus):
        inp = BweInput(lowpass_frontend(corpus[0].audio, 0.5), 0.5)
        assert np.array_equal(extend(inp, BweExtender("replicate", 0.5)).samples, extend_replicate(inp).samples)

    def test_mismatch_errors(self, trained, corpus):
        nb = lowpass_frontend(corpus[0].audio, 0.4)
        with pytest.raises(ValueError):
            extend(BweInput(nb, 0.4), trained)
        with pytest.raises(ValueError, match="shape"):
            BweExtender("linear_regressor", 0.5, 1024, trained.weights[:, :10], trained.bias)

    def test_file_roundtrip(self, trained, tmp_path):
        save_extender(trained, tmp_path / "r.bwe")
        back = load_extender(tmp_path / "r.bwe")
        assert back.kind == "linear_regressor" and back.cutoff_fraction == 0.5
        assert np.array_equal(back.weights, trained.weights) and np.array_equal(back.bias, trained.bias)
        save_extender(BweExtender("replicate", 0.3), tmp_path / "p.bwe")
        assert load_extender(tmp_path / "p.bwe").kind == "replicate"
        (tmp_path / "x.bwe").write_bytes(b"NOPE")
        with pytest.raises(ValueError):
            load_extender(tmp_path / "x.bwe")


class TestQuality:
    def test_identical_is_zero(self, corpus):
        a = corpus[1].audio
        q = measure_quality(a, a, 0.5)
        assert q.lsd == 0.0 and q.highband_snr > 100

    def test_zeroed_high_band_is_finite(self):
        rng = np.random.default_rng(2)
        ref = AudioBuffer(rng.standard_normal(8000) * 0.01, SR)
        silent = lowpass_frontend(ref, 0.5).replace(np.zeros(8000))
        q = measure_quality(silent, ref, 0.5)
        assert np.isfinite(q.lsd) and q.lsd > 0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            measure_quality(AudioBuffer(np.zeros(10), SR), AudioBuffer(np.zeros(11), SR), 0.5)
