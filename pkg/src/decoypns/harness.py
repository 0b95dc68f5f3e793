"""Rounds, trials, calibration and the full factorial, with counter-based seeding.

Every round draws from its own Philox stream keyed by
(master_seed, sha256(label)[:8], phase, round index), so results never depend on
execution order or worker count. Calibration rounds are keyed by the
configuration name and are always attack-free, so the clean and attacked
treatments of a cell share one calibration.
"""
from __future__ import annotations

import hashlib
import itertools
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from numpy.random import Generator, Philox, SeedSequence

from .analysis import (
    KeyRateParams,
    RoundRecord,
    Verdict,
    calibrate_delta,
    estimate_efficiencies,
    key_rate_summary,
    merge_records,
    pns_verdict,
    two_sample_test,
)
from .channel import AdversaryConfig, GainMatch, LinkConfig, gain_match_probability
from .engine import DEFAULT_PULSE_BUDGET, ENGINES, RoundSpec, simulate_round
from .errors import ConfigError, TrialAborted
from .receiver import DetectorConfig
from .source import ProtocolConfig, SourceJitter

__all__ = [
    "Configuration", "ExperimentPlan", "TrialStats", "run_round", "run_trial", "run_factorial",
    "two_sample_test", "table4_configurations", "round_generator", "treatment_id",
]

DESK_ROUNDS = 100
DESK_ROUND_TARGET = 10_000
FULL_ROUNDS = 1000
FULL_ROUND_TARGET = 100_000

PHASE_CALIBRATION = 0
PHASE_MEASUREMENT = 1

TABLE4_DISTANCES = (20.0, 50.0)
TABLE4_MU = (0.5, 0.8)
TABLE4_NU = (0.1, 0.2)
TABLE4_OCCURRENCES = ((0.60, 0.30, 0.10), (0.70, 0.20, 0.10), (0.80, 0.10, 0.10),
                      (0.90, 0.05, 0.05), (0.99, 0.005, 0.005))


@dataclass(frozen=True)
class Configuration:
    """One factorial cell. ``adversary`` describes Eve when the attack is switched on;
    with ``gain_matched`` her forwarding probability is solved from the link instead."""

    name: str
    protocol: ProtocolConfig = ProtocolConfig()
    link: LinkConfig = LinkConfig()
    detector: DetectorConfig = DetectorConfig()
    adversary: AdversaryConfig = AdversaryConfig(enabled=True)
    jitter: SourceJitter = SourceJitter()
    gain_matched: bool = True

    def __post_init__(self):
        if not self.name or "/" in self.name:
            raise ConfigError("configuration name must be non-empty and contain no '/'")

    def gain_match(self) -> GainMatch:
        return gain_match_probability(self.protocol, self.link, self.detector, self.jitter)

    def adversary_for(self, attack: bool) -> AdversaryConfig:
        if not attack:
            return AdversaryConfig(enabled=False)
        t = self.gain_match().t if self.gain_matched else self.adversary.forward_probability
        return AdversaryConfig(enabled=True, forward_probability=t)


def cell_name(distance_km, mu, nu, occ) -> str:
    pct = "-".join(f"{100 * s:g}" for s in occ)
    return f"L{distance_km:g}_mu{mu:g}_nu{nu:g}_S{pct}"


def table4_configurations(detector: DetectorConfig = DetectorConfig()) -> tuple[Configuration, ...]:
    """The 40 cells of the distance x MPN x occurrence design."""
    out = []
    for d, mu, nu, occ in itertools.product(TABLE4_DISTANCES, TABLE4_MU, TABLE4_NU, TABLE4_OCCURRENCES):
        proto = ProtocolConfig(mu=mu, nu=nu, s_mu=occ[0], s_nu=occ[1], s_y0=occ[2])
        out.append(Configuration(cell_name(d, mu, nu, occ), proto, LinkConfig(distance_km=d), detector))
    return tuple(out)


@dataclass(frozen=True)
class ExperimentPlan:
    configurations: tuple
    rounds_per_trial: int = DESK_ROUNDS
    round_target: int = DESK_ROUND_TARGET
    master_seed: int = 0
    calibration_rounds: int = DESK_ROUNDS
    attack_modes: tuple = (False, True)
    alpha: float = 0.001
    coverage: float = 0.999
    persistent_rounds: int = 3
    pulse_budget: int = DEFAULT_PULSE_BUDGET
    engine: str = "sparse"
    key_rate: KeyRateParams = KeyRateParams()
    n_nu_min: float = 9.0
    s_y0_min: float = 0.005

    def __post_init__(self):
        object.__setattr__(self, "configurations", tuple(self.configurations))
        object.__setattr__(self, "attack_modes", tuple(bool(a) for a in self.attack_modes))
        if not self.configurations:
            raise ConfigError("configurations must be non-empty")
        names = [c.name for c in self.configurations]
        if len(set(names)) != len(names):
            raise ConfigError("configuration names must be unique")
        for name in ("rounds_per_trial", "round_target", "calibration_rounds", "persistent_rounds", "pulse_budget"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0 <= self.master_seed < 2 ** 64:
            raise ConfigError("master_seed must be a 64-bit unsigned value")
        if not self.attack_modes or len(set(self.attack_modes)) != len(self.attack_modes):
            raise ConfigError("attack_modes must be a non-empty subset of {false, true}")
        if not 0 < self.alpha < 1 or not 0 < self.coverage < 1:
            raise ConfigError("alpha and coverage must lie in (0, 1)")
        if self.engine not in ENGINES:
            raise ConfigError(f"engine must be one of {ENGINES}")

    def treatments(self) -> list[tuple[Configuration, bool]]:
        return [(c, a) for c in self.configurations for a in self.attack_modes]


def treatment_id(config: Configuration, attack: bool) -> str:
    return f"{config.name}/{'attack' if attack else 'clean'}"


def _label_hash(label: str) -> int:
    return int.from_bytes(hashlib.sha256(label.encode("utf-8")).digest()[:8], "big")


def round_seed(master_seed: int, label: str, phase: int, index: int) -> SeedSequence:
    return SeedSequence(master_seed, spawn_key=(_label_hash(label), phase, index))


def round_generator(seed) -> Generator:
    if not isinstance(seed, SeedSequence):
        seed = SeedSequence(seed)
    return Generator(Philox(seed))


def _spec(config: Configuration, attack: bool, round_target: int, pulse_budget: int) -> RoundSpec:
    return RoundSpec(config.protocol, config.link, config.detector, config.adversary_for(attack),
                     config.jitter, round_target, pulse_budget)


def run_round(configs: Configuration, attack_enabled: bool, round_seed, round_target: int = DESK_ROUND_TARGET,
              pulse_budget: int = DEFAULT_PULSE_BUDGET, engine: str = "sparse") -> RoundRecord:
    """One round: pulses until ``round_target`` signal detections."""
    spec = _spec(configs, attack_enabled, round_target, pulse_budget)
    return simulate_round(spec, round_generator(round_seed), engine).record


@dataclass(frozen=True)
class _RoundTask:
    spec: RoundSpec
    seed: SeedSequence
    engine: str


def _execute(task: _RoundTask) -> RoundRecord:
    return simulate_round(task.spec, round_generator(task.seed), task.engine).record


def _map_rounds(tasks: Sequence[_RoundTask], workers: int):
    """Yield round results in task order (exceptions surface at their position)."""
    if workers <= 1 or len(tasks) <= 1:
        for t in tasks:
            yield _execute(t)
        return
    chunk = max(1, len(tasks) // (workers * 8))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        yield from pool.map(_execute, tasks, chunksize=chunk)


@dataclass(frozen=True)
class TrialStats:
    treatment: str
    configuration: Configuration
    attack: bool
    forward_probability: Optional[float]
    gain_match_feasible: Optional[bool]
    rounds: tuple
    calibration: tuple
    eta_signal: np.ndarray
    eta_decoy: np.ndarray
    delta: float
    verdict: Optional[Verdict]
    decoy_histogram: dict
    fraction_with_decoy: float
    key_rate: dict
    wall_clock_s: float

    @property
    def p_value(self) -> float:
        return self.verdict.p_value if self.verdict else float("nan")

    @property
    def decision(self) -> Optional[str]:
        return self.verdict.decision.value if self.verdict else None

    def mean_var(self) -> dict:
        def mv(x):
            return float(np.mean(x)), float(np.var(x, ddof=1)) if len(x) > 1 else 0.0
        (ms, vs), (md, vd) = mv(self.eta_signal), mv(self.eta_decoy)
        return {"eta_signal_mean": ms, "eta_signal_var": vs, "eta_decoy_mean": md, "eta_decoy_var": vd}


def summarize_trial(config: Configuration, attack: bool, rounds: Sequence[RoundRecord],
                    calibration: Sequence[RoundRecord], plan: ExperimentPlan, wall_clock_s: float = 0.0,
                    delta: Optional[float] = None) -> TrialStats:
    """Pure aggregation of round tallies into trial statistics."""
    rounds = tuple(rounds)
    calibration = tuple(calibration)
    est = [estimate_efficiencies(r) for r in rounds]
    if delta is None:
        delta = calibrate_delta(calibration, plan.coverage) if calibration else math.inf
    verdict = pns_verdict(rounds, delta, plan.alpha, plan.persistent_rounds) if rounds else None
    decoys = [r.detected_decoy for r in rounds]
    hist = {int(k): int(v) for k, v in zip(*np.unique(decoys, return_counts=True))} if decoys else {}
    gm = config.gain_match() if attack and config.gain_matched else None
    adv = config.adversary_for(attack)
    return TrialStats(
        treatment=treatment_id(config, attack),
        configuration=config,
        attack=attack,
        forward_probability=adv.forward_probability if attack else None,
        gain_match_feasible=gm.feasible if gm else None,
        rounds=rounds,
        calibration=calibration,
        eta_signal=np.array([e.eta_signal for e in est]),
        eta_decoy=np.array([e.eta_decoy for e in est]),
        delta=delta,
        verdict=verdict,
        decoy_histogram=hist,
        fraction_with_decoy=float(np.mean([d > 0 for d in decoys])) if decoys else float("nan"),
        key_rate=key_rate_summary(merge_records(rounds), plan.key_rate, config.protocol.s_mu) if rounds else {},
        wall_clock_s=wall_clock_s,
    )


def _calibration_tasks(config: Configuration, plan: ExperimentPlan) -> list[_RoundTask]:
    spec = _spec(config, False, plan.round_target, plan.pulse_budget)
    return [_RoundTask(spec, round_seed(plan.master_seed, config.name, PHASE_CALIBRATION, i), plan.engine)
            for i in range(plan.calibration_rounds)]


def _measurement_tasks(config: Configuration, attack: bool, plan: ExperimentPlan) -> list[_RoundTask]:
    spec = _spec(config, attack, plan.round_target, plan.pulse_budget)
    label = treatment_id(config, attack)
    return [_RoundTask(spec, round_seed(plan.master_seed, label, PHASE_MEASUREMENT, i), plan.engine)
            for i in range(plan.rounds_per_trial)]


def _collect(tasks, workers):
    done = []
    try:
        for rec in _map_rounds(tasks, workers):
            done.append(rec)
    except Exception as exc:  # noqa: BLE001 - re-raised with the partial tallies attached
        raise TrialAborted(f"round {len(done)} failed: {exc}", partial=tuple(done)) from exc
    return done


def run_trial(configs: Configuration, attack: bool, rounds: int, master_seed: int, *,
              plan: Optional[ExperimentPlan] = None, calibration: Optional[Sequence[RoundRecord]] = None,
              workers: int = 1) -> TrialStats:
    """Calibrate (unless ``calibration`` is given), run ``rounds`` measurement rounds, aggregate.

    With fewer calibration rounds than the Delta estimator needs, the per-round
    check is disabled (Delta = inf) and only the multi-round test decides.
    """
    plan = replace(plan or ExperimentPlan((configs,)), rounds_per_trial=rounds, master_seed=master_seed)
    start = time.perf_counter()
    if calibration is None:
        calibration = _collect(_calibration_tasks(configs, plan), workers)
    try:
        measured = _collect(_measurement_tasks(configs, attack, plan), workers)
    except TrialAborted as exc:
        exc.partial = _partial(configs, attack, exc.partial, calibration, plan, start)
        raise
    return _finish(configs, attack, measured, calibration, plan, start)


def _delta_or_inf(calibration, plan):
    from .analysis import MIN_CALIBRATION_ROUNDS
    if len(calibration) < MIN_CALIBRATION_ROUNDS:
        return math.inf
    return calibrate_delta(calibration, plan.coverage)


def _finish(config, attack, measured, calibration, plan, start):
    return summarize_trial(config, attack, measured, calibration, plan, time.perf_counter() - start,
                           delta=_delta_or_inf(calibration, plan))


def _partial(config, attack, measured, calibration, plan, start):
    try:
        return _finish(config, attack, measured, calibration, plan, start)
    except Exception:  # noqa: BLE001 - partial results are best effort
        return tuple(measured)


def run_factorial(plan: ExperimentPlan, workers: int = 1, progress=None) -> dict:
    """Every (configuration, attack mode) treatment, keyed by treatment id, in plan order.

    All rounds of the plan are scheduled on one pool so a single slow cell does
    not serialize the run.
    """
    tasks: list[_RoundTask] = []
    slices = {}
    for config in plan.configurations:
        cal = _calibration_tasks(config, plan)
        slices[(config.name, "cal")] = (len(tasks), len(tasks) + len(cal))
        tasks += cal
        for attack in plan.attack_modes:
            meas = _measurement_tasks(config, attack, plan)
            slices[(config.name, attack)] = (len(tasks), len(tasks) + len(meas))
            tasks += meas
    start = time.perf_counter()
    records = []
    for rec in _map_rounds(tasks, workers):
        records.append(rec)
        if progress is not None:
            progress(len(records), len(tasks))
    elapsed = time.perf_counter() - start
    out = {}
    for config in plan.configurations:
        a, b = slices[(config.name, "cal")]
        calibration = records[a:b]
        for attack in plan.attack_modes:
            a, b = slices[(config.name, attack)]
            share = elapsed * (b - a) / max(1, len(tasks))
            stats = summarize_trial(config, attack, records[a:b], calibration, plan, share,
                                    delta=_delta_or_inf(calibration, plan))
            out[stats.treatment] = stats
    return out
