"""Hybrid scorer: one-class fit, GRU gradients, calibration, CUSUM, smoothing."""

import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qkdguard.defender import (
    CusumState,
    DefenderModel,
    TemporalScorer,
    calibrate_threshold,
    cusum_fit,
    cusum_llr,
    cusum_step,
    cusum_update,
    decide,
    load_model,
    mixed_score,
    oc_fit,
    oc_score,
    oc_to_unit,
    save_model,
    score_gradient,
    score_stream,
    smoothed_score,
    temporal_score,
    windowed,
)
from qkdguard.telemetry import Normalizer

RNG = np.random.default_rng(1234)


def make_model(lambda_mix=0.5, tau=0.5, seed=3):
    X = RNG.normal(0, 1, size=(400, 16))
    mean, prec = oc_fit(X)
    return DefenderModel(
        normalizer=Normalizer(center=np.zeros(16), scale=np.ones(16)),
        oc_mean=mean,
        oc_precision=prec,
        temporal=TemporalScorer(seed=seed),
        lambda_mix=lambda_mix,
        tau=tau,
    )


class TestOneClass:
    def test_identical_vectors_degenerate_fit(self):
        X = np.tile(np.linspace(0, 1, 16), (200, 1))
        mean, prec = oc_fit(X)
        assert oc_score(mean, prec, X[0]) == pytest.approx(0.0, abs=1e-9)

    def test_standard_normal_scores(self):
        X = RNG.normal(0, 1, size=(10_000, 16))
        mean, prec = oc_fit(X)
        assert oc_score(mean, prec, np.zeros(16)) == pytest.approx(0.0, abs=0.15)
        far = np.zeros(16)
        far[4] = 5.0
        assert oc_score(mean, prec, far) == pytest.approx(25.0, rel=0.1)

    def test_order_invariance(self):
        X = RNG.normal(0, 1, size=(500, 16))
        m1, p1 = oc_fit(X)
        m2, p2 = oc_fit(X[RNG.permutation(500)])
        assert np.allclose(m1, m2)
        assert np.allclose(p1, p2)

    def test_score_matches_naive_quadratic_form(self):
        X = RNG.normal(0, 1, size=(300, 16))
        mean, prec = oc_fit(X)
        x = RNG.normal(0, 2, size=16)
        naive = 0.0
        for i in range(16):
            for j in range(16):
                naive += (x[i] - mean[i]) * prec[i, j] * (x[j] - mean[j])
        assert oc_score(mean, prec, x) == pytest.approx(naive, abs=1e-12)

    def test_sample_floor(self):
        with pytest.raises(ValueError):
            oc_fit(RNG.normal(0, 1, size=(100, 16)))


class TestTemporalScorer:
    def test_zero_weights_give_half(self):
        sc = TemporalScorer(seed=0)
        for k in sc.params:
            sc.params[k] = np.zeros_like(sc.params[k])
        assert temporal_score(sc, np.ones((8, 16))) == 0.5

    def test_deterministic(self):
        sc = TemporalScorer(seed=5)
        win = RNG.normal(0, 1, size=(8, 16))
        assert temporal_score(sc, win) == temporal_score(sc, win)
        assert 0.0 < temporal_score(sc, win) < 1.0

    def test_gradient_matches_finite_differences(self):
        # Central differences at step 1e-5, 20 random instances.
        rng = np.random.default_rng(7)
        for i in range(20):
            sc = TemporalScorer(seed=50 + i)
            win = rng.normal(0, 1, size=(8, 16)) * min(1.0, 3.0 / 8.0)
            grad = score_gradient(sc, win)
            theta = sc.param_vector()
            for j in rng.integers(0, theta.size, size=12):
                tp = theta.copy()
                tp[j] += 1e-5
                sc.set_param_vector(tp)
                fp = temporal_score(sc, win)
                tp[j] -= 2e-5
                sc.set_param_vector(tp)
                fm = temporal_score(sc, win)
                sc.set_param_vector(theta)
                fd = (fp - fm) / 2e-5
                denom = max(abs(grad[j]), abs(fd))
                if denom > 1e-9:
                    assert abs(grad[j] - fd) / denom <= 1e-4

    def test_training_reduces_loss(self):
        sc = TemporalScorer(seed=9)
        win = np.random.default_rng(3).normal(0, 1, size=(1, 8, 16))
        labels, weights = np.array([1.0]), np.array([1.0])
        losses = [sc.train_step(win, labels, weights, lr=1e-2) for _ in range(100)]
        assert losses[-1] < losses[0]
        assert all(b <= a + 1e-9 for a, b in zip(losses, losses[1:]))

    def test_zero_weight_batch_is_noop(self):
        sc = TemporalScorer(seed=11)
        before = sc.param_vector().copy()
        win = RNG.normal(0, 1, size=(4, 8, 16))
        sc.train_step(win, np.zeros(4), np.zeros(4), lr=0.1)
        assert np.array_equal(sc.param_vector(), before)

    def test_masked_prefix_matches_short_window(self):
        sc = TemporalScorer(seed=13)
        rows = RNG.normal(0, 1, size=(3, 16))
        win = np.vstack([np.zeros((5, 16)), rows])
        mask = np.array([[0, 0, 0, 0, 0, 1, 1, 1]], dtype=float)
        padded = sc.score(win[None], mask)[0]
        bare = sc.score(rows[None])[0]
        assert padded == pytest.approx(bare, rel=1e-12)


class TestMixingAndThreshold:
    def test_lambda_boundaries(self):
        model = make_model(lambda_mix=1.0)
        x = RNG.normal(0, 1, 16)
        win = np.tile(x, (8, 1))
        s_oc = oc_to_unit(oc_score(model.oc_mean, model.oc_precision, x))
        assert mixed_score(model, x, win) == pytest.approx(float(s_oc), rel=1e-12)
        model.lambda_mix = 0.0
        assert mixed_score(model, x, win) == pytest.approx(
            temporal_score(model.temporal, win), rel=1e-12
        )

    def test_arithmetic_mix(self):
        # lambda=0.5 with component scores 0.2 / 0.8 mixes to 0.5.
        assert 0.5 * 0.2 + 0.5 * 0.8 == pytest.approx(0.5)

    @given(st.floats(0.0, 1.0))
    @settings(max_examples=50, deadline=None)
    def test_mixed_score_in_unit_interval(self, lam):
        model = make_model(lambda_mix=lam)
        x = np.linspace(-2, 2, 16)
        win = np.tile(x, (8, 1))
        assert 0.0 <= mixed_score(model, x, win) <= 1.0

    def test_calibrate_order_statistics(self):
        tau = calibrate_threshold(np.arange(1.0, 1001.0), 0.01)
        assert tau == 991.0
        scores = np.arange(1.0, 1001.0)
        assert int(np.sum(scores >= tau)) == 10

    def test_calibrate_tie_bump(self):
        scores = np.full(500, 3.25)
        tau = calibrate_threshold(scores, 0.01)
        assert tau > 3.25
        assert int(np.sum(scores >= tau)) == 0

    def test_calibrate_never_exceeds_budget(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            scores = rng.normal(0, 1, size=rng.integers(50, 2000))
            far = rng.uniform(0.002, 0.05)
            tau = calibrate_threshold(scores, far)
            assert np.sum(scores >= tau) <= math.floor(far * scores.size)

    def test_calibrate_empty_rejected(self):
        with pytest.raises(ValueError):
            calibrate_threshold(np.array([]), 0.01)

    def test_decide(self):
        assert decide(1.0, 1.0) is True
        assert decide(1.0 - 1e-9, 1.0) is False
        with pytest.raises(ValueError):
            decide(float("nan"), 1.0)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(8)
        scores = rng.normal(0, 1, 500)
        fresh = rng.normal(0, 1, 300)
        tau = calibrate_threshold(scores, 0.02)
        alarms = fresh >= tau
        tau2 = calibrate_threshold(np.exp(scores), 0.02)
        alarms2 = np.exp(fresh) >= tau2
        assert np.array_equal(alarms, alarms2)


class TestCusum:
    def test_recurrence_hand_arithmetic(self):
        s = 0.0
        out = []
        for L in (0.5, -0.2, 0.9):
            s = cusum_update(s, L)
            out.append(s)
        assert out == [0.5, 0.3, 1.2]

    def test_indistinguishable_models_never_alarm(self):
        state = CusumState(mu0=0.0, sigma0=1.0, mu1=0.0, sigma1=1.0, h_cusum=1.0)
        for s in np.random.default_rng(0).normal(0, 1, 200):
            assert cusum_llr(state, float(s)) == pytest.approx(0.0, abs=1e-12)
            state, alarm = cusum_step(state, float(s))
            assert state.S == 0.0 and not alarm

    def test_statistic_never_negative(self):
        state = CusumState(mu0=0.0, sigma0=1.0, mu1=1.0, sigma1=1.0, h_cusum=50.0)
        rng = np.random.default_rng(1)
        for s in rng.normal(-2.0, 1.0, 500):
            state, _ = cusum_step(state, float(s))
            assert state.S >= 0.0

    def test_zero_variance_rejected(self):
        with pytest.raises(ValueError):
            cusum_fit(np.full(10, 1.0), np.arange(10.0))

    def test_fit_calibrates_arl0_and_detects_fast(self):
        rng = np.random.default_rng(202)
        state = cusum_fit(rng.normal(0, 1, 4000), rng.normal(1, 1, 4000))
        # Detection delay under a true 1-sigma shift, 300 trials.
        delays = []
        for _ in range(300):
            st_run = replace(state, S=0.0)
            delay = 200
            for i, v in enumerate(rng.normal(1.0, 1.0, 200)):
                st_run, alarm = cusum_step(st_run, float(v))
                if alarm:
                    delay = i
                    break
            delays.append(delay)
        assert float(np.mean(delays)) <= 10.0
        # Honest stream: no alarm in a typical short window.
        runs_alarmed = 0
        for _ in range(50):
            st_run = replace(state, S=0.0)
            for v in rng.normal(0.0, 1.0, 100):
                st_run, alarm = cusum_step(st_run, float(v))
                if alarm:
                    runs_alarmed += 1
                    break
        assert runs_alarmed <= 20


class TestSmoothing:
    def test_zero_noise_reduces_to_point_score(self):
        model = make_model(lambda_mix=0.7, tau=0.4)
        x = RNG.normal(0, 1, 16)
        win = np.tile(x, (8, 1))
        s_bar, certified, margin = smoothed_score(model, x, win, 0.0, 200, seed=1)
        assert s_bar == pytest.approx(mixed_score(model, x, win), rel=1e-12)
        assert margin == 0.0
        assert certified == (s_bar != model.tau)

    def test_concentration_shrinks_with_samples(self):
        model = make_model(lambda_mix=0.5, tau=0.5)
        x = RNG.normal(0, 1, 16)
        win = np.tile(x, (8, 1))
        _, _, m1 = smoothed_score(model, x, win, 0.3, 400, seed=2)
        _, _, m2 = smoothed_score(model, x, win, 0.3, 1600, seed=2)
        assert m2 < m1

    def test_deterministic_for_seed(self):
        model = make_model()
        x = RNG.normal(0, 1, 16)
        win = np.tile(x, (8, 1))
        assert smoothed_score(model, x, win, 0.2, 150, seed=9) == smoothed_score(
            model, x, win, 0.2, 150, seed=9
        )


class TestPersistence:
    def test_round_trip_scores(self, tmp_path):
        model = make_model(lambda_mix=0.3, tau=0.77)
        rng = np.random.default_rng(3)
        probe = rng.normal(0, 1, size=(40, 16))
        before = score_stream(model, probe)
        path = tmp_path / "model.txt"
        save_model(model, path)
        loaded = load_model(path)
        after = score_stream(loaded, probe)
        assert np.array_equal(before, after)
        assert loaded.lambda_mix == model.lambda_mix
        assert loaded.tau == model.tau

    def test_cusum_round_trip(self, tmp_path):
        model = make_model()
        model.cusum = CusumState(mu0=0.1, sigma0=0.2, mu1=0.8, sigma1=0.3, h_cusum=4.5)
        save_model(model, tmp_path / "m.txt")
        loaded = load_model(tmp_path / "m.txt")
        assert loaded.cusum == model.cusum

    def test_version_mismatch_fails_loudly(self, tmp_path):
        model = make_model()
        path = tmp_path / "m.txt"
        save_model(model, path)
        text = path.read_text().replace("qkdguard-defender v1", "qkdguard-defender v9")
        path.write_text(text)
        with pytest.raises(ValueError):
            load_model(path)


class TestWindowing:
    def test_prefix_padding_and_mask(self):
        feats = np.arange(5 * 16, dtype=float).reshape(5, 16)
        wins, mask = windowed(feats, 3)
        assert wins.shape == (5, 3, 16)
        assert mask[0].tolist() == [0.0, 0.0, 1.0]
        assert np.array_equal(wins[0, 2], feats[0])
        assert np.array_equal(wins[4], feats[2:5])
