import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sicrn import autodiff as ad
from sicrn.checks import tiny_config
from sicrn.data import AudioClip, mix_at_snr
from sicrn.errors import ArgumentError, NumericError
from sicrn.model import SICRNModel
from sicrn.training import (AdamState, PlateauScheduler, SyntheticSource, TrainConfig, adam_step, evaluate, loss,
                            resume_state, scheduler_step, si_snr, si_snr_var, stack_batch, train_loop, train_step)


def small_train_config(**overrides):
    kw = dict(win_length=16, hop=8, clip_seconds=0.02, train_clips=4, val_clips=2, pool_clean=2, pool_noise=2,
              batch_size=2, epochs=3, seed=5)
    kw.update(overrides)
    return TrainConfig(**kw)


def small_model(seed=0):
    return SICRNModel(tiny_config(seed=seed))  # freq_bins 9 == 16 // 2 + 1


class TestSiSnr:
    def test_hand_example(self):
        assert si_snr(np.array([1.0, 1.0]), np.array([1.0, 0.0])) == pytest.approx(0.0, abs=1e-12)

    def test_known_value(self):
        # estimate = s + n with n orthogonal to s and ||n|| = ||s|| / 2 -> 10 log10(4)
        s, n = np.array([2.0, 0.0]), np.array([0.0, 1.0])
        assert si_snr(s + n, s) == pytest.approx(10 * np.log10(4.0))

    @settings(max_examples=40, deadline=None)
    @given(st.floats(1e-3, 1e3), st.integers(0, 2**31 - 1))
    def test_target_scale_invariance(self, a, seed):
        rng = np.random.default_rng(seed)
        e, s = rng.standard_normal(256), rng.standard_normal(256)
        assert abs(si_snr(e, a * s) - si_snr(e, s)) < 1e-9

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0.01, 100.0), st.integers(0, 2**31 - 1))
    def test_estimate_scale_saturates(self, a, seed):
        s = np.random.default_rng(seed).standard_normal(16000)
        assert si_snr(a * s, s) >= 80

    def test_orthogonal_estimate(self):
        s, e = np.array([1.0, 0.0]), np.array([0.0, 1.0])
        assert loss(e[None], s[None]) == pytest.approx(80.0, abs=1e-6)

    def test_shift_lowers_score(self):
        s = np.random.default_rng(1).standard_normal(2000)
        assert si_snr(np.roll(s, 3), s) < -10

    def test_zero_db_mixture(self):
        rng = np.random.default_rng(2)
        clean = AudioClip(0.1 * rng.standard_normal(16000))
        mix = mix_at_snr(clean, AudioClip(rng.standard_normal(16000)), 0.0)
        assert si_snr(mix.noisy.samples, mix.clean.samples) == pytest.approx(0.0, abs=0.1)

    def test_batched(self):
        rng = np.random.default_rng(3)
        e, s = rng.standard_normal((3, 50)), rng.standard_normal((3, 50))
        np.testing.assert_allclose(si_snr(e, s), [si_snr(e[i], s[i]) for i in range(3)])

    def test_rejects_bad_input(self):
        with pytest.raises(ArgumentError):
            si_snr(np.ones(3), np.zeros(3))
        with pytest.raises(ArgumentError):
            si_snr(np.ones(3), np.ones(4))

    def test_var_matches_numpy(self):
        rng = np.random.default_rng(4)
        e, s = rng.standard_normal((2, 40)), rng.standard_normal((2, 40))
        np.testing.assert_allclose(si_snr_var(ad.Var(e), s).value, si_snr(e, s), rtol=1e-12)
        assert float(loss(ad.Var(e), s).value) == pytest.approx(loss(e, s))

    def test_loss_gradient(self):
        rng = np.random.default_rng(5)
        s = rng.standard_normal((2, 30))
        report = ad.grad_check(lambda e: loss(e, s), [s + 0.3 * rng.standard_normal((2, 30))])
        assert report.passed, report.worst


class TestAdam:
    def test_first_step_is_lr_times_sign(self):
        params = {"w": np.array([1.0, -2.0, 3.0])}
        adam_step(AdamState(lr=0.01), params, {"w": np.array([0.5, -4.0, 1e-3])})
        np.testing.assert_allclose(params["w"], [0.99, -1.99, 2.99], atol=1e-7)

    def test_zero_grad_leaves_params(self):
        params = {"w": np.array([1.0, 2.0])}
        adam_step(AdamState(), params, {"w": np.zeros(2)})
        np.testing.assert_array_equal(params["w"], [1.0, 2.0])

    def test_nonfinite_grad_aborts_without_update(self):
        params = {"w": np.array([1.0, 2.0])}
        opt = AdamState()
        with pytest.raises(NumericError):
            adam_step(opt, params, {"w": np.array([np.nan, 0.0])})
        np.testing.assert_array_equal(params["w"], [1.0, 2.0])
        assert opt.step == 0

    def test_reference_sequence(self):
        # two steps worked by hand from the bias-corrected update
        p = {"w": np.array([0.0])}
        opt = AdamState(lr=0.1)
        adam_step(opt, p, {"w": np.array([1.0])})
        adam_step(opt, p, {"w": np.array([3.0])})
        m = 0.9 * 0.1 + 0.1 * 3.0
        v = 0.999 * 0.001 + 0.001 * 9.0
        step2 = 0.1 * (m / (1 - 0.9**2)) / (np.sqrt(v / (1 - 0.999**2)) + 1e-8)
        step1 = 0.1 * 1.0 / (1.0 + 1e-8)
        np.testing.assert_allclose(p["w"], [-step1 - step2], rtol=1e-12)

    def test_float32_params_stay_float32(self):
        p = {"w": np.ones(3, dtype=np.float32)}
        adam_step(AdamState(), p, {"w": np.ones(3, dtype=np.float32)})
        assert p["w"].dtype == np.float32

    def test_bad_inputs(self):
        with pytest.raises(ArgumentError):
            AdamState(lr=0.0)
        with pytest.raises(ArgumentError):
            adam_step(AdamState(), {"w": np.ones(2)}, {"v": np.ones(2)})
        with pytest.raises(ArgumentError):
            adam_step(AdamState(), {"w": np.ones(2)}, {"w": np.ones(3)})


class TestScheduler:
    def test_halves_after_patience(self):
        s = PlateauScheduler(lr=1.0)
        lrs = [scheduler_step(s, v) for v in [5, 4, 4, 4, 4, 4, 3, 3.5, 3.5, 3.5, 3.5]]
        assert lrs == [1.0] * 5 + [0.5] * 5 + [0.25]

    def test_improvement_resets_counter(self):
        s = PlateauScheduler(lr=1.0)
        lrs = [scheduler_step(s, v) for v in [5, 6, 6, 6, 4, 6, 6, 6, 6]]
        assert lrs == [1.0] * 8 + [0.5]

    def test_equal_loss_is_not_improvement(self):
        s = PlateauScheduler(lr=1.0, patience=1)
        scheduler_step(s, 1.0)
        assert scheduler_step(s, 1.0) == 0.5

    def test_nonfinite(self):
        with pytest.raises(ArgumentError):
            scheduler_step(PlateauScheduler(), float("nan"))


class TestTrainStep:
    def _batch(self, cfg):
        return stack_batch(SyntheticSource(cfg).epoch(0)[: cfg.batch_size])

    def test_deterministic(self):
        cfg = small_train_config()
        a, b = small_model(), small_model()
        la = [train_step(a, self._batch(cfg), cfg.stft, opt) for opt in [AdamState()] for _ in range(2)]
        lb = [train_step(b, self._batch(cfg), cfg.stft, opt) for opt in [AdamState()] for _ in range(2)]
        assert la == lb
        assert all(np.array_equal(a.store.params[k], b.store.params[k]) for k in a.store.params)

    def test_updates_every_parameter(self):
        cfg = small_train_config()
        model = small_model()
        before = {k: v.copy() for k, v in model.store.params.items()}
        train_step(model, self._batch(cfg), cfg.stft, AdamState(lr=1e-3))
        unchanged = [k for k in before if np.array_equal(before[k], model.store.params[k])]
        assert unchanged == []

    def test_loss_decreases_on_fixed_batch(self):
        cfg = small_train_config()
        model = small_model()
        batch = self._batch(cfg)
        opt = AdamState(lr=3e-3)
        losses = [train_step(model, batch, cfg.stft, opt) for _ in range(15)]
        assert losses[-1] < losses[0]

    def test_nan_input_is_reported(self):
        cfg = small_train_config()
        noisy, clean, seeds = self._batch(cfg)
        noisy = noisy.copy()
        noisy[0, 3] = np.nan
        with pytest.raises(NumericError, match="seeds"):
            train_step(small_model(), (noisy, clean, seeds), cfg.stft, AdamState())

    def test_evaluate(self):
        cfg = small_train_config()
        source = SyntheticSource(cfg)
        r = evaluate(small_model(), source.validation(), cfg.stft)
        assert len(r["per_clip"]) == cfg.val_clips
        assert r["loss"] == pytest.approx(-r["sisdr"])
        with pytest.raises(ArgumentError):
            evaluate(small_model(), [], cfg.stft)


class TestLoop:
    def test_artifacts_and_rows(self, tmp_path):
        cfg = small_train_config()
        result = train_loop(cfg, small_model(), SyntheticSource(cfg), tmp_path)
        assert len(result.rows) == 3
        assert {p.name for p in tmp_path.iterdir()} == {"metrics.csv", "best.ckpt", "last.ckpt"}
        with open(tmp_path / "metrics.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["epoch", "step", "train_loss", "val_loss", "val_sisdr", "lr", "seconds"]
        assert len(rows) == 4
        assert result.best_val == min(r["val_loss"] for r in result.rows)

    def test_resume_is_bit_identical(self, tmp_path):
        cfg = small_train_config()
        full = train_loop(cfg, small_model(), SyntheticSource(cfg), tmp_path / "full")
        short = small_train_config(epochs=1)
        train_loop(short, small_model(), SyntheticSource(short), tmp_path / "part")
        resumed_model = small_model()
        resumed = train_loop(cfg, resumed_model, SyntheticSource(cfg), tmp_path / "part",
                             resume=tmp_path / "part" / "last.ckpt")
        assert [r["val_loss"] for r in resumed.rows] == [r["val_loss"] for r in full.rows[1:]]
        model, opt, sched, epoch, step, best = resume_state(tmp_path / "part" / "last.ckpt")
        ref, ref_opt, *_ = resume_state(tmp_path / "full" / "last.ckpt")
        assert epoch == 3 and opt.step == ref_opt.step
        for k in model.store.params:
            assert np.array_equal(model.store.params[k], ref.store.params[k])
        for k in opt.m:
            assert np.array_equal(opt.m[k], ref_opt.m[k]) and np.array_equal(opt.v[k], ref_opt.v[k])
        with open(tmp_path / "part" / "metrics.csv") as fh:
            assert len(list(csv.reader(fh))) == 4

    def test_epochs_are_seeded(self):
        cfg = small_train_config()
        a, b = SyntheticSource(cfg), SyntheticSource(cfg)
        np.testing.assert_array_equal(a.epoch(1)[0].noisy.samples, b.epoch(1)[0].noisy.samples)
        assert not np.array_equal(a.epoch(0)[0].noisy.samples, a.epoch(1)[0].noisy.samples)

    def test_bad_config(self):
        with pytest.raises(ArgumentError):
            TrainConfig(lr=-1.0)
        with pytest.raises(ArgumentError):
            TrainConfig(batch_size=0)
