"""Measurement formulas, the efficiency-based PNS check and the secret key rate."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from enum import Enum
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .errors import AnalysisError
from .source import PulseClass

_CLASS_SUFFIX = {PulseClass.SIGNAL: "signal", PulseClass.DECOY: "decoy", PulseClass.VACUUM: "vacuum"}


@dataclass(frozen=True)
class RoundRecord:
    """Tallies for one round of quantum exchange.

    Key bits come from signal pulses, so the single-photon, compromise and
    photon-caused counters refer to signal-state detections only.
    """

    mu: float
    nu: float
    pulse_rate: float
    sent_signal: int = 0
    sent_decoy: int = 0
    sent_vacuum: int = 0
    detected_signal: int = 0
    detected_decoy: int = 0
    detected_vacuum: int = 0
    sifted_signal: int = 0
    sifted_decoy: int = 0
    sifted_vacuum: int = 0
    errors_signal: int = 0
    errors_decoy: int = 0
    errors_vacuum: int = 0
    dark_clicks: int = 0
    afterpulse_clicks: int = 0
    multiple_clicks: int = 0
    single_photon_detected: int = 0
    single_photon_sifted: int = 0
    single_photon_errors: int = 0
    photon_sifted_signal: int = 0
    compromised_sifted: int = 0

    def __post_init__(self):
        for cls in PulseClass:
            if self.detected(cls) > self.sent(cls):
                raise AnalysisError(f"{cls.name.lower()} detections exceed pulses sent")
            if not 0 <= self.errors(cls) <= self.sifted(cls) <= self.detected(cls):
                raise AnalysisError(f"{cls.name.lower()} error/sift counts are inconsistent")
        for f in fields(self):
            if f.type == "int" and getattr(self, f.name) < 0:
                raise AnalysisError(f"{f.name} is negative")

    def sent(self, cls) -> int:
        return getattr(self, "sent_" + _CLASS_SUFFIX[PulseClass(cls)])

    def detected(self, cls) -> int:
        return getattr(self, "detected_" + _CLASS_SUFFIX[PulseClass(cls)])

    def sifted(self, cls) -> int:
        return getattr(self, "sifted_" + _CLASS_SUFFIX[PulseClass(cls)])

    def errors(self, cls) -> int:
        return getattr(self, "errors_" + _CLASS_SUFFIX[PulseClass(cls)])

    @property
    def pulses_sent(self) -> int:
        return self.sent_signal + self.sent_decoy + self.sent_vacuum

    @property
    def detections(self) -> int:
        return self.detected_signal + self.detected_decoy + self.detected_vacuum

    @property
    def duration_s(self) -> float:
        return self.pulses_sent / self.pulse_rate

    def as_dict(self) -> dict:
        return asdict(self)


COUNT_FIELDS = tuple(f.name for f in fields(RoundRecord) if f.type == "int")


def merge_records(records: Iterable[RoundRecord]) -> RoundRecord:
    """Pool tallies of rounds that share mu, nu and pulse rate."""
    records = list(records)
    if not records:
        raise AnalysisError("nothing to merge")
    first = records[0]
    totals = {name: sum(getattr(r, name) for r in records) for name in COUNT_FIELDS}
    return RoundRecord(first.mu, first.nu, first.pulse_rate, **totals)


@dataclass(frozen=True)
class EfficiencyEstimate:
    y0: float
    q_mu: float
    q_nu: float
    eta_signal: float
    eta_decoy: float


@dataclass(frozen=True)
class KeyRateParams:
    """q: sifting/protocol factor. f: error-correction inefficiency."""

    q: float = 0.5
    f: float = 1.22

    def __post_init__(self):
        if not 0 < self.q <= 1:
            raise AnalysisError("q must lie in (0, 1]")
        if self.f < 1:
            raise AnalysisError("f must be >= 1")


class Decision(str, Enum):
    SECURE = "Secure"
    ATTACK = "Attack"
    INCONCLUSIVE = "Inconclusive"


@dataclass(frozen=True)
class Verdict:
    flags: tuple
    delta_used: float
    p_value: float
    decision: Decision
    longest_flag_run: int
    longest_integrity_run: int
    mean_eta_signal: float
    mean_eta_decoy: float

    @property
    def per_round_flag(self) -> bool:
        return any(self.flags)

    @property
    def flag_rate(self) -> float:
        return sum(self.flags) / len(self.flags)


def dark_count_rate(round: RoundRecord) -> float:
    """Y0: vacuum detections per vacuum pulse."""
    if round.sent_vacuum <= 0:
        raise AnalysisError("no vacuum pulses were sent; Y0 is undefined")
    return round.detected_vacuum / round.sent_vacuum


def gain(round: RoundRecord, cls) -> float:
    """Q: detections per pulse sent for one pulse class."""
    sent = round.sent(cls)
    if sent <= 0:
        raise AnalysisError(f"no {PulseClass(cls).name.lower()} pulses were sent")
    return round.detected(cls) / sent


def state_efficiency(q_state: float, y0: float, mpn: float) -> float:
    """eta = -ln(1 + Y0 - Q) / mpn."""
    if mpn <= 0:
        raise AnalysisError("mpn must be positive")
    arg = 1.0 + y0 - q_state
    if arg <= 0:
        raise AnalysisError(f"gain {q_state} exceeds 1 + Y0; data are impossible")
    return -math.log1p(y0 - q_state) / mpn


def estimate_efficiencies(round: RoundRecord) -> EfficiencyEstimate:
    y0 = dark_count_rate(round)
    q_mu = gain(round, PulseClass.SIGNAL)
    q_nu = gain(round, PulseClass.DECOY)
    return EfficiencyEstimate(
        y0=y0,
        q_mu=q_mu,
        q_nu=q_nu,
        eta_signal=state_efficiency(q_mu, y0, round.mu),
        eta_decoy=state_efficiency(q_nu, y0, round.nu),
    )


def yield_n(y0: float, eta: float, n: int) -> float:
    """Y_n = Y0 + 1 - (1 - eta)**n (the Y0 * eta_n cross term is dropped)."""
    if n < 0:
        raise ValueError("n must be >= 0")
    return y0 - math.expm1(n * math.log1p(-eta)) if eta < 1 else y0 + (1.0 if n else 0.0)


def binary_entropy(p: float) -> float:
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    if p == 0.0 or p == 1.0:
        return 0.0
    return -p * math.log2(p) - (1.0 - p) * math.log2(1.0 - p)


def secret_key_rate(params: KeyRateParams, q1: float, e1: float, q_mu: float, e_mu: float) -> float:
    """R = q {Q1 [1 - H2(e1)] - Q_mu f H2(E_mu)} per signal pulse. May be negative."""
    for name, value in (("q1", q1), ("e1", e1), ("q_mu", q_mu), ("e_mu", e_mu)):
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1]")
    return params.q * (q1 * (1.0 - binary_entropy(e1)) - q_mu * params.f * binary_entropy(e_mu))


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def key_rate_summary(record: RoundRecord, params: KeyRateParams, s_mu: float) -> dict:
    """Eq.-2 key rate from ground-truth tagged single-photon tallies."""
    q1 = _ratio(record.single_photon_detected, record.sent_signal)
    e1 = _ratio(record.single_photon_errors, record.single_photon_sifted)
    q_mu = _ratio(record.detected_signal, record.sent_signal)
    e_mu = _ratio(record.errors_signal, record.sifted_signal)
    rate = secret_key_rate(params, q1, e1, q_mu, e_mu)
    return {
        "q1": q1,
        "e1": e1,
        "q_mu": q_mu,
        "e_mu": e_mu,
        "rate_per_signal_pulse": rate,
        "rate_per_second": rate * s_mu * record.pulse_rate,
        "usable_rate_per_second": max(0.0, rate) * s_mu * record.pulse_rate,
        "negative": rate < 0,
    }


def two_sample_test(a: Sequence[float], b: Sequence[float]) -> float:
    """Two-sided Welch (unequal-variance) t-test p-value.

    Two constant series give p = 1 when equal and p = 0 otherwise.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise AnalysisError("each series needs at least two values")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise AnalysisError("series contain non-finite values")
    va = a.var(ddof=1) / a.size
    vb = b.var(ddof=1) / b.size
    diff = a.mean() - b.mean()
    se2 = va + vb
    if se2 == 0.0:
        return 1.0 if diff == 0.0 else 0.0
    t = diff / math.sqrt(se2)
    df = se2 ** 2 / (va ** 2 / (a.size - 1) + vb ** 2 / (b.size - 1))
    return float(min(1.0, 2.0 * stats.t.sf(abs(t), df)))


MIN_CALIBRATION_ROUNDS = 30


def calibrate_delta(calibration_rounds: Sequence[RoundRecord], coverage: float = 0.999) -> float:
    """Half-width of the normal prediction interval for a new round's eta_signal - eta_decoy."""
    if len(calibration_rounds) < MIN_CALIBRATION_ROUNDS:
        raise AnalysisError(f"need at least {MIN_CALIBRATION_ROUNDS} calibration rounds")
    if not 0 < coverage < 1:
        raise AnalysisError("coverage must lie in (0, 1)")
    diffs = np.array([e.eta_signal - e.eta_decoy for e in map(estimate_efficiencies, calibration_rounds)])
    n = diffs.size
    z = stats.norm.ppf(0.5 + coverage / 2.0)
    return float(z * diffs.std(ddof=1) * math.sqrt(1.0 + 1.0 / n))


def _longest_run(mask: Sequence[bool]) -> int:
    best = run = 0
    for m in mask:
        run = run + 1 if m else 0
        best = max(best, run)
    return best


def pns_verdict(
    rounds: Sequence[RoundRecord],
    delta: float,
    alpha: float = 0.001,
    persistent_rounds: int = 3,
) -> Verdict:
    """Per-round Delta check plus a multi-round Welch test of signal vs decoy efficiency.

    A round is flagged when |eta_signal - eta_decoy| > Delta or Q_nu <= Y0.
    Attack: p < alpha, or Q_nu <= Y0 for ``persistent_rounds`` consecutive rounds.
    Secure: p >= alpha and no flag run that long. Otherwise Inconclusive.
    """
    if not rounds:
        raise AnalysisError("need at least one round")
    est = [estimate_efficiencies(r) for r in rounds]
    eta_s = np.array([e.eta_signal for e in est])
    eta_d = np.array([e.eta_decoy for e in est])
    integrity = [e.q_nu <= e.y0 for e in est]
    flags = tuple(bool(abs(s - d) > delta or bad) for s, d, bad in zip(eta_s, eta_d, integrity))
    p = two_sample_test(eta_s, eta_d) if len(rounds) >= 2 else 1.0
    flag_run = _longest_run(flags)
    integrity_run = _longest_run(integrity)
    if p < alpha or integrity_run >= persistent_rounds:
        decision = Decision.ATTACK
    elif flag_run < persistent_rounds:
        decision = Decision.SECURE
    else:
        decision = Decision.INCONCLUSIVE
    return Verdict(
        flags=flags,
        delta_used=delta,
        p_value=p,
        decision=decision,
        longest_flag_run=flag_run,
        longest_integrity_run=integrity_run,
        mean_eta_signal=float(eta_s.mean()),
        mean_eta_decoy=float(eta_d.mean()),
    )
