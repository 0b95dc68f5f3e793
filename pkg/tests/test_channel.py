import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

import oracles
from decoypns.channel import (
    AdversaryConfig,
    LinkConfig,
    eve_induced_loss_db,
    forwarded_click_probability,
    gain_match_probability,
    jitter_average,
    photon_click_probability,
    pns_intercept,
    pns_intercept_batch,
    transmit_passive,
)
from decoypns.engine import RoundSpec, simulate_round
from decoypns.errors import ConfigError
from decoypns.receiver import DetectorConfig
from decoypns.source import AdversaryAction, Basis, ProtocolConfig, PulseClass, PulseRecord, SourceJitter


def _pulse(n):
    return PulseRecord(0, PulseClass.SIGNAL, 0.5, n, 0, Basis.RECTILINEAR)


class TestLinkConfig:
    def test_budgets(self):
        assert LinkConfig(20).channel_loss_db == pytest.approx(4.0)
        assert LinkConfig(50).channel_loss_db == pytest.approx(10.0)
        assert LinkConfig(20).channel_transmittance == pytest.approx(0.398, abs=5e-4)
        assert LinkConfig(50).channel_transmittance == pytest.approx(0.1)

    @pytest.mark.parametrize("kw", [dict(distance_km=-1), dict(receiver_loss_db=-0.1), dict(distance_km=math.inf)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            LinkConfig(**kw)


class TestAdversaryConfig:
    def test_bounds(self):
        with pytest.raises(ConfigError):
            AdversaryConfig(True, 1.5)
        with pytest.raises(ConfigError):
            AdversaryConfig(True, 0.5, store_split_photon=False)


class TestTransmitPassive:
    def test_lossless_and_empty(self, rng):
        assert transmit_passive(7, 0.0, rng) == 7
        assert transmit_passive(0, 12.0, rng) == 0

    def test_negative_loss(self, rng):
        with pytest.raises(ValueError):
            transmit_passive(3, -1.0, rng)

    def test_four_db_survival(self, rng):
        n = 1_000_000
        survived = transmit_passive(np.ones(n, dtype=np.int64), 4.0, rng)
        p = oracles.db(4.0)
        assert p == pytest.approx(0.398, abs=5e-4)
        assert abs(survived.mean() - p) < 3 * oracles.binomial_sigma(p, n)

    def test_thinning_composes(self, rng):
        n = 100_000
        start = rng.poisson(3.0, n)
        two_step = transmit_passive(transmit_passive(start, 2.0, rng), 3.0, rng)
        one_step = transmit_passive(start, 5.0, rng)
        k = max(two_step.max(), one_step.max()) + 1
        table = np.array([np.bincount(two_step, minlength=k), np.bincount(one_step, minlength=k)])
        table = table[:, table.sum(axis=0) >= 5]
        assert stats.chi2_contingency(table)[1] > 0.001

    @given(st.integers(0, 50), st.floats(0.0, 30.0))
    def test_never_creates_photons(self, n, loss):
        out = transmit_passive(n, loss, np.random.default_rng(n))
        assert 0 <= out <= n


class TestPnsIntercept:
    @pytest.mark.parametrize("n", [0, 1])
    def test_blocks_single_and_empty(self, rng, n):
        p = pns_intercept(_pulse(n), AdversaryConfig(True, 1.0), rng)
        assert p.adversary_action is AdversaryAction.BLOCKED and p.photons_delivered == 0

    def test_splits_two_photons(self, rng):
        p = pns_intercept(_pulse(2), AdversaryConfig(True, 1.0), rng)
        assert p.adversary_action is AdversaryAction.SPLIT_FORWARDED and p.photons_delivered == 1

    def test_throttle_blocks(self, rng):
        p = pns_intercept(_pulse(5), AdversaryConfig(True, 0.0), rng)
        assert p.adversary_action is AdversaryAction.BLOCKED and p.photons_delivered == 0

    def test_requires_enabled(self, rng):
        with pytest.raises(ValueError):
            pns_intercept(_pulse(2), AdversaryConfig(False), rng)

    def test_forwarded_fraction(self, rng):
        n = 1_000_000
        counts = rng.poisson(0.5, n)
        action, delivered = pns_intercept_batch(counts, 1.0, rng)
        p = oracles.poisson_tail(2, 0.5)
        frac = np.mean(action == AdversaryAction.SPLIT_FORWARDED)
        assert abs(frac - p) < 3 * oracles.binomial_sigma(p, n)
        assert np.all(delivered[counts <= 1] == 0)
        assert np.all(delivered <= counts) and np.all(delivered[counts >= 2] == counts[counts >= 2] - 1)

    @given(st.integers(0, 30), st.floats(0.0, 1.0))
    def test_record_invariants(self, n, t):
        p = pns_intercept(_pulse(n), AdversaryConfig(True, t), np.random.default_rng(n))
        assert p.photons_delivered <= p.photon_count
        if p.adversary_action is AdversaryAction.BLOCKED:
            assert p.photons_delivered == 0


class TestEveInducedLoss:
    def test_half_photon_pulse(self):
        assert eve_induced_loss_db(0.5) == pytest.approx(oracles.eve_loss_db(0.5), rel=1e-10)
        assert eve_induced_loss_db(0.5) == pytest.approx(6.7, abs=0.05)

    def test_quoted_value_differs(self):
        # the value quoted in the source text (~7.4 dB) is not reproduced by this definition
        assert abs(eve_induced_loss_db(0.5) - 7.4) > 0.5

    def test_small_mu_diverges(self):
        assert eve_induced_loss_db(1e-6) > 60

    def test_invalid(self):
        with pytest.raises(ValueError):
            eve_induced_loss_db(0.0)

    @given(st.floats(0.01, 5.0), st.floats(0.01, 1.0))
    def test_strictly_decreasing(self, mu, step):
        assert eve_induced_loss_db(mu + step) < eve_induced_loss_db(mu)


class TestClickProbabilities:
    def test_forwarded_matches_direct_sum(self):
        for mu in (0.1, 0.5, 0.8):
            assert forwarded_click_probability(mu, 0.0447)[0] == pytest.approx(oracles.click_forwarded(mu, 0.0447),
                                                                              rel=1e-10)

    def test_no_attack(self):
        assert photon_click_probability(0.5, 0.1) == pytest.approx(1 - math.exp(-0.05))

    def test_jitter_average_without_jitter(self):
        assert jitter_average(lambda m: m ** 2, 0.5, 0.0) == pytest.approx(0.25)

    def test_jitter_average_second_moment(self):
        # E[(mu (1 + s Z))^2] = mu^2 (1 + s^2)
        assert jitter_average(lambda m: m ** 2, 0.5, 0.05) == pytest.approx(0.25 * (1 + 0.0025), rel=1e-10)


class TestGainMatch:
    def test_twenty_km_infeasible(self):
        gm = gain_match_probability(ProtocolConfig(), LinkConfig(20), DetectorConfig())
        assert not gm.feasible and gm.t == 1.0 and gm.required_probability > 1

    def test_fifty_km_feasible(self):
        gm = gain_match_probability(ProtocolConfig(), LinkConfig(50), DetectorConfig())
        assert gm.feasible and 0 < gm.t < 1
        assert gm.photon_gain_attack == pytest.approx(gm.photon_gain_no_attack, rel=1e-12)

    def test_against_unjittered_oracle(self):
        link, det = LinkConfig(50), DetectorConfig()
        gm = gain_match_probability(ProtocolConfig(), link, det, SourceJitter(0.0))
        eta_rx = oracles.db(3.5) * 0.1
        expected = (1 - math.exp(-0.5 * oracles.eta_total(50))) / oracles.click_forwarded(0.5, eta_rx)
        assert gm.required_probability == pytest.approx(expected, rel=1e-10)

    def test_zero_loss_link_is_infeasible(self):
        # Without fiber loss Eve has no budget to hide her blocking: required t > 1.
        gm = gain_match_probability(ProtocolConfig(), LinkConfig(0.0), DetectorConfig())
        assert not gm.feasible and gm.required_probability > 4

    def test_simulated_gain_matches(self):
        proto, link, det = ProtocolConfig(), LinkConfig(50), DetectorConfig()
        gm = gain_match_probability(proto, link, det)
        target = 7000  # ~3.1e6 signal pulses per mode
        recs = []
        for adv in (AdversaryConfig(), AdversaryConfig(True, gm.t)):
            spec = RoundSpec(proto, link, det, adv, round_target=target)
            recs.append(simulate_round(spec, np.random.default_rng(5)).record)
        q = [r.detected_signal / r.sent_signal for r in recs]
        sigma = math.hypot(*(math.sqrt(qi * (1 - qi) / r.sent_signal) for qi, r in zip(q, recs)))
        assert abs(q[0] - q[1]) < 3 * sigma

    def test_infeasible_attack_suppresses_rate(self):
        proto, link, det = ProtocolConfig(), LinkConfig(20), DetectorConfig()
        q = []
        for adv in (AdversaryConfig(), AdversaryConfig(True, 1.0)):
            rec = simulate_round(RoundSpec(proto, link, det, adv, round_target=5000), np.random.default_rng(2)).record
            q.append(rec.detected_signal / rec.sent_signal)
        assert q[1] < q[0]
