"""Monte Carlo block generation vs the analytic channel model."""

import numpy as np
import pytest

from qkdguard.attacks import Blinding, Null, TimeShift
from qkdguard.physics import ChannelParams, DecoyConfig, error_gain, gain
from qkdguard.simulator import (
    CELL_KEYS,
    block_from_dict,
    block_to_dict,
    hist_midpoints,
    pool_blocks,
    simulate_block,
    simulate_stream,
)

CH = ChannelParams()
DC = DecoyConfig()


def cell_tolerance(rate, n, k=3.0):
    """k binomial standard errors, floored at k counts for sparse cells."""
    return max(k * np.sqrt(rate * (1.0 - rate) / n), k / n)


class TestHonestConvergence:
    @pytest.fixture(scope="class")
    def big_block(self):
        return simulate_block(CH, DC, Null(), 2_000_000, seed=101)

    def test_gain_cells_match_closed_forms(self, big_block):
        mu_of = {"s": DC.mu_s, "w": DC.mu_w, "v": DC.mu_v}
        for key in CELL_KEYS:
            cell = big_block.cells[key]
            q = gain(mu_of[key[0]], CH.eta, CH.p_d)
            eq = error_gain(mu_of[key[0]], CH.eta, CH.p_d, CH.e_d)
            assert abs(cell.detections / cell.sifted - q) <= cell_tolerance(q, cell.sifted)
            assert abs(cell.errors / cell.sifted - eq) <= cell_tolerance(eq, cell.sifted)

    def test_vacuum_detections_at_dark_rate(self, big_block):
        det = big_block.cells["v_Z"].detections + big_block.cells["v_X"].detections
        sifted = big_block.cells["v_Z"].sifted + big_block.cells["v_X"].sifted
        assert abs(det / sifted - CH.p_d) <= cell_tolerance(CH.p_d, sifted)

    def test_sifted_key_cell_size(self, big_block):
        # N * p_s * p_Z * (basis-match factor p_Z), 3 SE binomial.
        expect = DC.p_s * DC.p_Z * DC.p_Z
        n_sift = big_block.cells["s_Z"].sifted
        assert abs(n_sift / big_block.N - expect) <= cell_tolerance(expect, big_block.N)

    def test_double_clicks_positive_honest(self, big_block):
        assert big_block.double_clicks > 0

    def test_record_invariants(self, big_block):
        total_em = sum(c.emissions for c in big_block.cells.values())
        assert total_em == big_block.N
        assert int(big_block.timing_hist.sum()) == big_block.total_detections


class TestDeterminism:
    def test_same_seed_bit_identical(self):
        a = simulate_block(CH, DC, Null(), 50_000, seed=7)
        b = simulate_block(CH, DC, Null(), 50_000, seed=7)
        assert block_to_dict(a) == block_to_dict(b)

    def test_different_seed_differs(self):
        a = simulate_block(CH, DC, Null(), 50_000, seed=7)
        b = simulate_block(CH, DC, Null(), 50_000, seed=8)
        assert block_to_dict(a) != block_to_dict(b)

    def test_stream_thread_count_invariance(self, monkeypatch):
        sched = [Null(), TimeShift(dt=80.0), Null(), Blinding(I0=0.8, t1=0.0, t2=600.0)]
        monkeypatch.setenv("QKDGUARD_THREADS", "1")
        serial = simulate_stream(CH, DC, sched, 20_000, base_seed=5)
        monkeypatch.setenv("QKDGUARD_THREADS", "4")
        threaded = simulate_stream(CH, DC, sched, 20_000, base_seed=5)
        for x, y in zip(serial, threaded):
            assert block_to_dict(x) == block_to_dict(y)

    def test_stream_block_seeds_xor(self):
        stream = simulate_stream(CH, DC, [Null()] * 3, 20_000, base_seed=12)
        direct = [simulate_block(CH, DC, Null(), 20_000, seed=12 ^ t) for t in range(3)]
        for x, y in zip(stream, direct):
            assert block_to_dict(x) == block_to_dict(y)


class TestAttackEffects:
    def test_timeshift_moves_histogram_mean(self):
        dt = 120.0
        stream = simulate_stream(CH, DC, [Null(), TimeShift(dt=dt)], 200_000, base_seed=3)
        mids = hist_midpoints()
        means = [float(b.timing_hist @ mids / b.total_detections) for b in stream]
        n_det = stream[1].total_detections
        # 4 SE of the jitter plus a bin-quantization allowance.
        tol = 4.0 * CH.sigma_t / np.sqrt(n_det) + 1.0
        assert abs(means[1] - means[0] - dt) <= tol

    def test_timeshift_detector_imbalance_direction(self):
        block = simulate_block(CH, DC, TimeShift(dt=100.0), 500_000, seed=4)
        # Positive dt favors detector 1 through the gate profiles.
        assert block.det1_clicks > block.det0_clicks

    def test_full_blinding_suppresses_doubles(self):
        block = simulate_block(
            CH, DC, Blinding(I0=1.0, t1=0.0, t2=600.0), 2_000_000, seed=5
        )
        assert block.double_clicks == 0
        # Gains stay honest under control.
        cell = block.cells["s_Z"]
        q = gain(DC.mu_s, CH.eta, CH.p_d)
        assert abs(cell.detections / cell.sifted - q) <= cell_tolerance(q, cell.sifted)

    def test_null_attack_matches_honest_distribution(self):
        # Same seed, honest path vs neutral overrides: identical draws.
        a = simulate_block(CH, DC, Null(), 100_000, seed=9)
        b = simulate_block(CH, DC, TimeShift(dt=0.0), 100_000, seed=9)
        assert block_to_dict(a)["cells"] == block_to_dict(b)["cells"]

    def test_schedule_length_preserved(self):
        stream = simulate_stream(CH, DC, [Null()] * 5, 10_000, base_seed=1)
        assert len(stream) == 5

    def test_infeasible_attack_rejected(self):
        with pytest.raises(ValueError):
            simulate_block(CH, DC, TimeShift(dt=1e5), 10_000, seed=0)

    def test_invalid_block_size_rejected(self):
        with pytest.raises(ValueError):
            simulate_block(CH, DC, Null(), 0, seed=0)
        with pytest.raises(ValueError):
            simulate_block(CH, DC, Null(), 1.5, seed=0)


class TestSerializationAndPooling:
    def test_round_trip(self):
        block = simulate_block(CH, DC, TimeShift(dt=50.0), 30_000, seed=2)
        again = block_from_dict(block_to_dict(block))
        assert block_to_dict(again) == block_to_dict(block)

    def test_pooling_sums_counts(self):
        blocks = simulate_stream(CH, DC, [Null()] * 4, 25_000, base_seed=6)
        pooled = pool_blocks(blocks)
        assert pooled.N == 100_000
        for key in CELL_KEYS:
            assert pooled.cells[key].detections == sum(
                b.cells[key].detections for b in blocks
            )
        assert int(pooled.timing_hist.sum()) == pooled.total_detections

    def test_randomized_stream_uses_per_block_params(self):
        stream = simulate_stream(
            CH, DC, [Null()] * 3, 10_000, base_seed=4, randomize=True
        )
        snapshots = {b.truth.channel.p_d for b in stream}
        assert len(snapshots) == 3
