"""Evolution-strategy search and the DRO family mixture."""

import numpy as np
import pytest

from qkdguard.adversary import (
    FAMILIES,
    FamilyMixture,
    budgeted_loss,
    dro_reweight,
    propose,
    search_init,
    tv_from_uniform,
    update,
)
from qkdguard.attacks import (
    Blinding,
    FeasibleSet,
    Null,
    TimeShift,
    attack_vector,
    is_feasible,
)
from qkdguard.physics import ChannelParams, DecoyConfig

CH = ChannelParams()
DC = DecoyConfig()
FEAS = FeasibleSet.from_channel(CH, n_pulses=200_000)


class TestSearchInit:
    def test_construction_rule(self):
        state = search_init("time_shift", FEAS, 16, seed=1, channel=CH, decoy=DC)
        assert state.mean.tolist() == [0.0]
        # Normalized step 0.3 corresponds to 0.3 * dt_max in raw units.
        assert state.step_size * FEAS.dt_max == pytest.approx(45.0)

    def test_deterministic(self):
        a = search_init("trojan", FEAS, 8, seed=5, channel=CH, decoy=DC)
        b = search_init("trojan", FEAS, 8, seed=5, channel=CH, decoy=DC)
        assert a.mean.tolist() == b.mean.tolist()
        assert propose(a)[0] == propose(b)[0]

    def test_small_population_rejected(self):
        with pytest.raises(ValueError):
            search_init("pns", FEAS, 3, seed=0)


class TestPropose:
    def test_all_candidates_feasible(self):
        for family in FAMILIES:
            n_gen = 3 if family == "pns" else 40
            state = search_init(family, FEAS, 16, seed=2, channel=CH, decoy=DC)
            for _ in range(n_gen):
                cands = propose(state)
                assert len(cands) == 16
                for c in cands:
                    assert is_feasible(c, FEAS, CH, DC)
                state = update(state, [(c, 0.0) for c in cands])

    def test_degenerate_step_collapses_to_projected_mean(self):
        from dataclasses import replace

        state = search_init("time_shift", FEAS, 8, seed=12, channel=CH, decoy=DC)
        tiny = replace(state, step_size=1e-12)
        cands = propose(tiny)
        assert all(abs(c.dt) <= 1e-6 for c in cands)  # project(mean) = dt 0

    def test_repeat_without_update_identical(self):
        state = search_init("blinding", FEAS, 8, seed=3, channel=CH, decoy=DC)
        first = [attack_vector(c).tolist() for c in propose(state)]
        second = [attack_vector(c).tolist() for c in propose(state)]
        assert first == second

    def test_mismatched_evaluation_rejected(self):
        state = search_init("time_shift", FEAS, 8, seed=4, channel=CH, decoy=DC)
        cands = propose(state)
        with pytest.raises(ValueError):
            update(state, [(c, 0.0) for c in cands[:-1]])
        with pytest.raises(ValueError):
            update(state, [(Blinding(), 0.0)] * 8)


class TestUpdate:
    def test_quadratic_bowl_convergence(self):
        # Analytic objective: maximize -(dt - 60)^2; mean must come within
        # 5% of the box half-width in at most 30 generations.
        state = search_init("time_shift", FEAS, 16, seed=6, channel=CH, decoy=DC)
        for _ in range(30):
            cands = propose(state)
            state = update(state, [(c, -((c.dt - 60.0) ** 2)) for c in cands])
        assert abs(state.mean[0] * FEAS.dt_max - 60.0) <= 0.05 * FEAS.dt_max
        assert abs(state.best_attack.dt - 60.0) <= 0.05 * FEAS.dt_max

    def test_quadratic_bowl_2d(self):
        target = np.array([0.3, 0.45])
        state = search_init("trojan", FEAS, 16, seed=7, channel=CH, decoy=DC)
        for _ in range(30):
            cands = propose(state)
            state = update(
                state,
                [(c, -float(np.sum((attack_vector(c) - target) ** 2))) for c in cands],
            )
        assert np.linalg.norm(attack_vector(state.best_attack) - target) <= 0.05

    def test_best_loss_monotone(self):
        rng = np.random.default_rng(0)
        state = search_init("blinding", FEAS, 8, seed=8, channel=CH, decoy=DC)
        best = -np.inf
        for _ in range(15):
            cands = propose(state)
            state = update(state, [(c, float(rng.normal())) for c in cands])
            assert state.best_loss >= best
            best = state.best_loss

    def test_equal_losses_keep_best(self):
        state = search_init("pns", FEAS, 8, seed=9, channel=CH, decoy=DC)
        cands = propose(state)
        state = update(state, [(c, 1.0) for c in cands])
        first_best = state.best_attack
        cands = propose(state)
        state = update(state, [(c, 1.0) for c in cands])
        assert state.best_attack == first_best


class TestBudgetedLoss:
    def test_zero_cost_identity(self):
        assert budgeted_loss(3.5, TimeShift(dt=100.0), FEAS, 0.0) == 3.5

    def test_null_attack_free(self):
        assert budgeted_loss(2.0, Null(), FEAS, 5.0) == 2.0

    def test_boundary_penalty(self):
        loss = budgeted_loss(1.0, TimeShift(dt=FEAS.dt_max), FEAS, 0.25)
        assert loss == pytest.approx(0.75)

    def test_negative_lambda_rejected(self):
        with pytest.raises(ValueError):
            budgeted_loss(1.0, Null(), FEAS, -0.1)


class TestDro:
    def test_equal_losses_identity(self):
        mix = FamilyMixture()
        out = dro_reweight(mix, {f: 3.0 for f in FAMILIES}, 1.0)
        for f in FAMILIES:
            assert out.weights[f] == pytest.approx(0.25, abs=1e-12)

    def test_zero_eta_identity(self):
        mix = FamilyMixture()
        out = dro_reweight(mix, {f: float(i) for i, f in enumerate(FAMILIES)}, 0.0)
        for f in FAMILIES:
            assert out.weights[f] == pytest.approx(0.25, abs=1e-12)

    def test_dominant_family_hits_tv_boundary(self):
        mix = FamilyMixture(budget=0.3)
        out = dro_reweight(mix, {"time_shift": 50.0, "blinding": 0.0, "pns": 0.0, "trojan": 0.0}, 1.0)
        assert tv_from_uniform(out.weights) == pytest.approx(0.3, abs=1e-12)
        assert sum(out.weights.values()) == pytest.approx(1.0, abs=1e-12)

    def test_simplex_preserved(self):
        rng = np.random.default_rng(11)
        mix = FamilyMixture()
        for _ in range(100):
            losses = {f: float(rng.normal(0, 5)) for f in FAMILIES}
            mix = dro_reweight(mix, losses, 0.7)
            vals = np.array(list(mix.weights.values()))
            assert np.all(vals >= -1e-12)
            assert vals.sum() == pytest.approx(1.0, abs=1e-9)
            assert tv_from_uniform(mix.weights) <= mix.budget + 1e-9

    def test_nonfinite_losses_rejected(self):
        with pytest.raises(ValueError):
            dro_reweight(FamilyMixture(), {f: float("inf") for f in FAMILIES}, 1.0)
