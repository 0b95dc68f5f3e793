import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from decoypns.analysis import gain, dark_count_rate, merge_records
from decoypns.config import TABLE5_GAINS, table5_optimization_input, table5_receiver_loss_db
from decoypns.channel import LinkConfig
from decoypns.engine import RoundSpec, simulate_round
from decoypns.errors import ConfigError, IntegrityError, OptimizationError
from decoypns.optimizer import (
    OptimizationInput,
    expected_decoy_detections,
    optimize_occurrences,
    required_total_pulses,
)
from decoypns.receiver import DetectorConfig
from decoypns.source import ProtocolConfig, PulseClass


class TestPulseCount:
    def test_simple(self):
        assert required_total_pulses(1e5, 1.0, 0.01) == pytest.approx(1e7)

    def test_fielded(self):
        assert required_total_pulses(100_000, 0.99435, 6.36e-3) == pytest.approx(1.5813e7, rel=5e-4)

    def test_zero_denominator(self):
        with pytest.raises(OptimizationError):
            required_total_pulses(1e5, 0.0, 0.01)

    def test_decoy_count(self):
        assert expected_decoy_detections(6.5e-4, 8.61e-4, 1.58e7) == pytest.approx(8.85, abs=0.01)
        with pytest.raises(ValueError):
            expected_decoy_detections(-1, 0.1, 1)


class TestInput:
    @pytest.mark.parametrize("kw", [dict(q_mu=0.0), dict(q_nu=1.5), dict(n_mu=0), dict(s_y0=0.0),
                                    dict(n_nu_min=0.5), dict(y0=math.nan)])
    def test_invalid(self, kw):
        base = dict(q_mu=6.36e-3, q_nu=8.61e-4, y0=1e-4)
        with pytest.raises(ConfigError):
            OptimizationInput(**{**base, **kw})

    def test_integrity(self):
        with pytest.raises(IntegrityError):
            optimize_occurrences(OptimizationInput(6.36e-3, 1e-4, 1e-4))


class TestOptimize:
    def test_fielded_golden(self):
        res = optimize_occurrences(table5_optimization_input())
        s_mu, s_nu = oracles.fixed_point_occurrences(6.36e-3, 8.61e-4, 100_000, 9, 0.005)
        assert res.feasible
        assert res.s_mu == pytest.approx(s_mu, rel=1e-10)
        assert res.s_nu == pytest.approx(s_nu, rel=1e-10)
        assert res.s_mu == pytest.approx(0.99434, abs=5e-6)
        assert res.s_nu == pytest.approx(6.61e-4, abs=1e-6)
        assert res.n_total == pytest.approx(1.581e7, rel=1e-3)
        assert res.expected_n_nu == pytest.approx(9.0, rel=1e-9)
        assert res.throughput_gain(0.75) == pytest.approx(0.3258, abs=5e-4)

    def test_quoted_decoy_share_is_rounded(self):
        # the published 6.5e-4 decoy share leaves N_nu just under 9
        res = optimize_occurrences(table5_optimization_input())
        assert abs(res.s_nu - 6.5e-4) > 5e-6
        assert expected_decoy_detections(6.5e-4, TABLE5_GAINS["q_nu"], res.n_total) < 9

    @given(st.floats(1e-3, 0.1), st.floats(1e-4, 0.05), st.integers(1000, 10**6), st.floats(1, 50), st.floats(1e-3, 0.2))
    def test_fixed_point_consistency(self, q_mu, q_nu, n_mu, n_nu, s_y0):
        c = n_nu * q_mu / (q_nu * n_mu)
        res = optimize_occurrences(OptimizationInput(q_mu, q_nu, 0.0, n_mu, n_nu, s_y0))
        assert res.s_mu + res.s_nu + res.s_y0 == pytest.approx(1.0, abs=1e-12)
        assert abs(res.s_nu - c * res.s_mu) < 1e-10 * max(1.0, c)
        assert res.expected_n_nu == pytest.approx(n_nu, rel=1e-8)
        s_mu, s_nu = oracles.fixed_point_occurrences(q_mu, q_nu, n_mu, n_nu, s_y0)
        assert res.s_mu == pytest.approx(s_mu, abs=1e-9)

    def test_slow_contraction_uses_exact_fixed_point(self):
        # slope 0.9999: plain iteration would need ~2.8e5 steps
        inp = OptimizationInput(0.09999, 1e-4, 0.0, n_mu=1000, n_nu_min=1.0, s_y0=0.1)
        res = optimize_occurrences(inp)
        assert res.iterations == 1000
        assert res.s_mu == pytest.approx(oracles.fixed_point_occurrences(0.09999, 1e-4, 1000, 1.0, 0.1)[0], rel=1e-12)

    def test_maximal(self):
        inp = table5_optimization_input()
        res = optimize_occurrences(inp)
        # any larger signal share leaves fewer than n_nu_min expected decoy detections
        for bump in (1e-6, 1e-5, 1e-4):
            s_mu = res.s_mu + bump
            s_nu = 1 - s_mu - inp.s_y0
            n_total = required_total_pulses(inp.n_mu, s_mu, inp.q_mu)
            assert expected_decoy_detections(s_nu, inp.q_nu, n_total) < inp.n_nu_min

    def test_monotone_in_requirement(self):
        shares = [optimize_occurrences(table5_optimization_input(n_nu_min=k)).s_mu for k in (1, 5, 9, 20, 50)]
        assert all(a > b for a, b in zip(shares, shares[1:]))

    def test_monotone_in_decoy_gain(self):
        lo = optimize_occurrences(OptimizationInput(6.36e-3, 5e-4, 1e-4))
        hi = optimize_occurrences(OptimizationInput(6.36e-3, 2e-3, 1e-4))
        assert hi.s_mu > lo.s_mu

    def test_as_dict(self):
        d = optimize_occurrences(table5_optimization_input()).as_dict()
        assert set(d) == {"s_mu", "s_nu", "s_y0", "n_total", "expected_n_nu", "feasible", "iterations"}


def test_closed_loop_decoy_count():
    """Optimize from measured gains, then check the realized decoy count per round."""
    n_mu = 3000
    link = LinkConfig(20, receiver_loss_db=table5_receiver_loss_db())
    det = DetectorConfig()
    fielded = ProtocolConfig(mu=0.65, nu=0.08, s_mu=0.75, s_nu=0.125, s_y0=0.125)
    cal = [simulate_round(RoundSpec(fielded, link, det, round_target=20_000), np.random.default_rng([1, i])).record
           for i in range(5)]
    pooled = merge_records(cal)
    inp = OptimizationInput(gain(pooled, PulseClass.SIGNAL), gain(pooled, PulseClass.DECOY),
                            dark_count_rate(pooled), n_mu=n_mu)
    res = optimize_occurrences(inp)
    proto = ProtocolConfig(mu=0.65, nu=0.08, s_mu=1 - res.s_nu - res.s_y0, s_nu=res.s_nu, s_y0=res.s_y0)
    spec = RoundSpec(proto, link, det, round_target=n_mu)
    counts = np.array([simulate_round(spec, np.random.default_rng([2, i])).record.detected_decoy
                       for i in range(200)])
    se = counts.std(ddof=1) / math.sqrt(counts.size)
    assert abs(counts.mean() - res.expected_n_nu) < 3 * se
