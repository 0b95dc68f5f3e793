import math
from dataclasses import replace

import numpy as np
import pytest

from decoypns.analysis import COUNT_FIELDS, Decision
from decoypns.channel import LinkConfig
from decoypns.errors import ConfigError, TrialAborted
from decoypns.harness import (
    Configuration,
    ExperimentPlan,
    cell_name,
    round_seed,
    run_factorial,
    run_round,
    run_trial,
    summarize_trial,
    table4_configurations,
    treatment_id,
)
from decoypns.source import ProtocolConfig

BASE = Configuration("base", ProtocolConfig(), LinkConfig(50))
SMALL = ExperimentPlan((BASE,), rounds_per_trial=6, round_target=1000, calibration_rounds=30, master_seed=3)


class TestDesign:
    def test_eighty_treatments(self):
        plan = ExperimentPlan(table4_configurations())
        ids = [treatment_id(c, a) for c, a in plan.treatments()]
        assert len(ids) == 80 and len(set(ids)) == 80

    def test_one_configuration_two_treatments(self):
        assert [a for _, a in ExperimentPlan((BASE,)).treatments()] == [False, True]

    def test_cell_name(self):
        assert cell_name(20, 0.5, 0.1, (0.7, 0.2, 0.1)) == "L20_mu0.5_nu0.1_S70-20-10"

    @pytest.mark.parametrize("kw", [dict(rounds_per_trial=0), dict(engine="warp"), dict(alpha=0.0),
                                    dict(attack_modes=(True, True)), dict(configurations=(BASE, BASE))])
    def test_invalid_plan(self, kw):
        with pytest.raises(ConfigError):
            replace(SMALL, **kw)

    def test_invalid_name(self):
        with pytest.raises(ConfigError):
            Configuration("a/b")

    def test_gain_matched_adversary(self):
        adv = BASE.adversary_for(True)
        assert adv.enabled and adv.forward_probability == pytest.approx(BASE.gain_match().t)
        assert not BASE.adversary_for(False).enabled


class TestSeeding:
    def test_distinct_streams(self):
        keys = {round_seed(0, "a", 1, 0).generate_state(2).tobytes(),
                round_seed(0, "a", 1, 1).generate_state(2).tobytes(),
                round_seed(0, "b", 1, 0).generate_state(2).tobytes(),
                round_seed(0, "a", 0, 0).generate_state(2).tobytes(),
                round_seed(1, "a", 1, 0).generate_state(2).tobytes()}
        assert len(keys) == 5

    def test_run_round_reproducible(self):
        a = run_round(BASE, True, round_seed(7, "x", 1, 0), round_target=500)
        b = run_round(BASE, True, round_seed(7, "x", 1, 0), round_target=500)
        assert a == b and a.detected_signal == 500


class TestTrial:
    def test_single_round(self):
        stats = run_trial(BASE, False, 1, 0, plan=SMALL, calibration=[])
        assert len(stats.rounds) == 1 and stats.delta == math.inf
        assert stats.verdict.decision is Decision.SECURE

    def test_conservation(self):
        stats = run_trial(BASE, True, 4, 1, plan=SMALL, calibration=[])
        for r in stats.rounds:
            assert r.pulses_sent == r.sent_signal + r.sent_decoy + r.sent_vacuum
            assert r.detected_signal == SMALL.round_target
            assert r.detections == r.detected_signal + r.detected_decoy + r.detected_vacuum
            assert r.compromised_sifted <= r.sifted_signal <= r.detected_signal

    def test_workers_do_not_change_results(self):
        a = run_trial(BASE, True, 6, 5, plan=SMALL)
        b = run_trial(BASE, True, 6, 5, plan=SMALL, workers=2)
        assert a.rounds == b.rounds and a.calibration == b.calibration
        assert a.delta == b.delta and a.p_value == b.p_value

    def test_abort_keeps_partial_results(self):
        plan = replace(SMALL, round_target=2000, pulse_budget=1_270_000)
        # roughly half the rounds at 50 km need more than the budget
        with pytest.raises(TrialAborted) as err:
            run_trial(BASE, False, 30, 0, plan=plan, calibration=[])
        partial = err.value.partial
        done = partial.rounds if hasattr(partial, "rounds") else partial
        assert len(done) < 30
        assert all(r.detected_signal == 2000 for r in done)

    def test_calibration_shared_between_modes(self):
        plan = replace(SMALL, attack_modes=(False, True))
        out = run_factorial(plan)
        clean, attack = out["base/clean"], out["base/attack"]
        assert clean.calibration == attack.calibration and clean.delta == attack.delta
        assert clean.rounds != attack.rounds

    def test_factorial_matches_trials(self):
        out = run_factorial(SMALL)
        trial = run_trial(BASE, True, SMALL.rounds_per_trial, SMALL.master_seed, plan=SMALL)
        assert out["base/attack"].rounds == trial.rounds

    def test_progress_callback(self):
        seen = []
        run_factorial(replace(SMALL, calibration_rounds=2, rounds_per_trial=2), progress=lambda d, t: seen.append((d, t)))
        assert seen[-1] == (6, 6)

    def test_summarize_is_pure(self):
        stats = run_trial(BASE, False, 3, 2, plan=SMALL, calibration=[])
        again = summarize_trial(BASE, False, stats.rounds, (), SMALL, delta=math.inf)
        assert np.array_equal(again.eta_signal, stats.eta_signal) and again.p_value == stats.p_value
        assert sum(again.decoy_histogram.values()) == 3

    def test_count_fields_present(self):
        stats = run_trial(BASE, False, 1, 0, plan=SMALL, calibration=[])
        assert all(getattr(stats.rounds[0], f) >= 0 for f in COUNT_FIELDS)


@pytest.mark.slow
def test_attack_lowers_decoy_efficiency_everywhere(desk_factorial):
    """Sign test over all 40 cells: the attack always pushes eta_decoy below eta_signal."""
    plan, results = desk_factorial
    gaps = []
    for c in plan.configurations:
        s = results[treatment_id(c, True)]
        gaps.append(s.eta_signal.mean() - s.eta_decoy.mean())
    assert all(g > 0 for g in gaps)
