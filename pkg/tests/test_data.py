import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from sicrn import data
from sicrn.data import SynthConfig
from sicrn.dsp_io import AudioClip, wav_write
from sicrn.errors import ArgumentError


@pytest.fixture(scope="module")
def pools():
    return data.synthetic_pools(3, 2, SynthConfig(duration=0.25), seed=0)


class TestSpeech:
    def test_harmonic_peaks(self):
        cfg = SynthConfig(duration=1.0, vibrato_depth=0.0, envelope_rate=0.5, n_harmonics=5, seed=1)
        x = data.synth_speech(cfg, f0=200.0).samples
        spec = np.abs(np.fft.rfft(x * np.hanning(len(x))))
        freqs = np.fft.rfftfreq(len(x), 1 / 16000)
        top = np.sort(freqs[np.argsort(spec)[-40:]])
        for k in range(1, 6):
            assert np.min(np.abs(top - 200 * k)) <= 2.0

    def test_peak_and_determinism(self):
        cfg = SynthConfig(duration=0.5, seed=7)
        a, b = data.synth_speech(cfg), data.synth_speech(cfg)
        assert np.max(np.abs(a.samples)) == pytest.approx(0.9)
        np.testing.assert_array_equal(a.samples, b.samples)
        assert len(a) == 8000

    def test_aliasing_rejected(self):
        with pytest.raises(ArgumentError):
            SynthConfig(f0_range=(80, 1000), n_harmonics=10)

    def test_f0_outside_range(self):
        with pytest.raises(ArgumentError):
            data.synth_speech(SynthConfig(duration=0.1), f0=500.0)


class TestNoise:
    @pytest.mark.parametrize("kind", ["white", "pink"])
    def test_unit_std(self, kind):
        x = data.synth_noise(16000, kind, seed=0).samples
        assert np.std(x) == pytest.approx(1.0)

    def test_pink_spectrum_slope(self):
        x = data.synth_noise(2**16, "pink", seed=1).samples
        p = np.abs(np.fft.rfft(x)) ** 2
        f = np.arange(len(p))
        band = (f > 100) & (f < 20000)
        slope = np.polyfit(np.log(f[band]), np.log(p[band]), 1)[0]
        assert slope == pytest.approx(-1.0, abs=0.1)

    def test_unknown_kind(self):
        with pytest.raises(ArgumentError):
            data.synth_noise(10, "brown")


class TestRir:
    @pytest.mark.parametrize("t60", [0.16, 0.36, 0.7])
    def test_decays_sixty_db_at_t60(self, t60):
        n = int(round(t60 * 16000))
        # energy envelope averaged over many draws, then a log-linear fit
        env = np.mean([data.synth_rir(t60, seed=s)[1:n + 1] ** 2 for s in range(200)], axis=0)
        t = np.arange(1, n + 1) / 16000
        slope = np.polyfit(t, 10 * np.log10(env), 1)[0]
        assert slope * t60 == pytest.approx(-60.0, abs=1.0)

    def test_direct_path(self):
        h = data.synth_rir(0.3, seed=0)
        assert h[0] == 1.0
        assert len(h) == int(round(1.2 * 0.3 * 16000))

    def test_tiny_t60_is_a_delta(self):
        h = data.synth_rir(1e-5, seed=0)
        np.testing.assert_array_equal(h, [1.0])
        x = AudioClip(np.random.default_rng(0).standard_normal(50))
        np.testing.assert_array_equal(data.reverberate(x, h).samples, x.samples)

    def test_bad_t60(self):
        with pytest.raises(ArgumentError):
            data.synth_rir(0.0)


class TestMixing:
    @pytest.mark.parametrize("snr", [0.0, 10.0, -5.0, 20.0])
    def test_exact_snr(self, snr):
        rng = np.random.default_rng(1)
        clean, noise = AudioClip(0.3 * rng.standard_normal(4000)), AudioClip(rng.standard_normal(4000))
        mix = data.mix_at_snr(clean, noise, snr)
        assert data.realized_snr(mix) == pytest.approx(snr, abs=1e-9)
        np.testing.assert_allclose(mix.noisy.samples, mix.clean.samples + mix.noise, atol=1e-15)

    def test_clipping_keeps_snr(self):
        rng = np.random.default_rng(2)
        clean, noise = AudioClip(0.9 * np.sign(rng.standard_normal(1000))), AudioClip(rng.standard_normal(1000))
        mix = data.mix_at_snr(clean, noise, -5.0)
        assert np.max(np.abs(mix.noisy.samples)) == pytest.approx(1.0)
        assert data.realized_snr(mix) == pytest.approx(-5.0, abs=1e-9)

    @pytest.mark.parametrize("snr", [np.inf, -np.inf, np.nan])
    def test_nonfinite_snr(self, snr):
        x = AudioClip(np.ones(10))
        with pytest.raises(ArgumentError):
            data.mix_at_snr(x, x, snr)

    def test_silent_inputs(self):
        x, z = AudioClip(np.ones(10)), AudioClip(np.zeros(10))
        with pytest.raises(ArgumentError):
            data.mix_at_snr(x, z, 0.0)
        with pytest.raises(ArgumentError):
            data.mix_at_snr(z, x, 0.0)

    def test_length_mismatch(self):
        with pytest.raises(ArgumentError):
            data.mix_at_snr(AudioClip(np.ones(10)), AudioClip(np.ones(11)), 0.0)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-30, 40), st.integers(0, 2**31 - 1))
    def test_snr_property(self, snr, seed):
        rng = np.random.default_rng(seed)
        clean = AudioClip(0.5 * rng.standard_normal(500))
        noise = AudioClip(rng.standard_normal(500))
        mix = data.mix_at_snr(clean, noise, snr)
        assert data.realized_snr(mix) == pytest.approx(snr, abs=1e-8)
        assert np.max(np.abs(mix.noisy.samples)) <= 1.0 + 1e-12


class TestDynamicMixing:
    def test_distribution(self):
        clean, noise = data.synthetic_pools(2, 2, SynthConfig(duration=0.01), seed=0)
        mixes = list(data.dynamic_mix_epoch(clean, noise, np.random.default_rng(0), 10000))
        assert np.mean([m.reverberant for m in mixes]) == pytest.approx(0.75, abs=0.02)
        snrs = [m.snr_db for m in mixes]
        assert all(-5 <= v <= 20 for v in snrs)
        assert stats.kstest(snrs, stats.uniform(-5, 25).cdf).pvalue > 0.01

    def test_seeded_reproducibility(self, pools):
        clean, noise = pools
        a = data.sample_mixture(clean, noise, seed=42)
        b = data.sample_mixture(clean, noise, seed=42)
        np.testing.assert_array_equal(a.noisy.samples, b.noisy.samples)
        np.testing.assert_array_equal(a.clean.samples, b.clean.samples)
        c = data.sample_mixture(clean, noise, seed=43)
        assert not np.array_equal(a.noisy.samples, c.noisy.samples)

    def test_epochs_differ(self, pools):
        clean, noise = pools
        rng = np.random.default_rng(0)
        e1 = [m.noisy.samples for m in data.dynamic_mix_epoch(clean, noise, rng, 3)]
        e2 = [m.noisy.samples for m in data.dynamic_mix_epoch(clean, noise, rng, 3)]
        assert not all(np.array_equal(a, b) for a, b in zip(e1, e2))

    def test_reverberant_target(self, pools):
        clean, noise = pools
        seed = next(s for s in range(100) if data.sample_mixture(clean, noise, s, p_reverb=1.0).reverberant)
        wet = data.sample_mixture(clean, noise, seed, p_reverb=1.0)
        dry = data.sample_mixture(clean, noise, seed, p_reverb=1.0, target="dry")
        np.testing.assert_array_equal(wet.noisy.samples, dry.noisy.samples)
        assert not np.allclose(wet.clean.samples, dry.clean.samples)

    def test_dry_mixture_without_reverb(self, pools):
        clean, noise = pools
        mix = data.sample_mixture(clean, noise, 0, p_reverb=0.0)
        assert not mix.reverberant
        assert data.realized_snr(mix) == pytest.approx(mix.snr_db, abs=1e-9)

    def test_bad_target(self, pools):
        with pytest.raises(ArgumentError):
            data.sample_mixture(*pools, seed=0, target="wet")

    def test_empty_pools(self):
        with pytest.raises(ArgumentError):
            list(data.dynamic_mix_epoch([], [], 0))

    def test_short_noise_is_tiled(self):
        clean = [AudioClip(np.sin(np.arange(1000) * 0.1))]
        noise = [AudioClip(np.random.default_rng(0).standard_normal(300))]
        mix = data.sample_mixture(clean, noise, 0, p_reverb=0.0)
        assert len(mix.noisy) == 1000


class TestWavDir:
    def test_load(self, tmp_path):
        for sub, n in (("clean", 2), ("noise", 1)):
            (tmp_path / sub).mkdir()
            for i in range(n):
                wav_write(tmp_path / sub / f"{i}.wav", AudioClip(0.1 * np.ones(100)))
        clean, noise = data.load_wav_dir(tmp_path)
        assert len(clean) == 2 and len(noise) == 1

    def test_missing(self, tmp_path):
        with pytest.raises(ArgumentError):
            data.load_wav_dir(tmp_path)
