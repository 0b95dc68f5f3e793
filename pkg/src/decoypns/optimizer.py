"""Occurrence-probability optimizer: push the signal share toward 1 while keeping
enough expected decoy detections per round to test for a PNS attack."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

from .errors import ConfigError, IntegrityError, OptimizationError

MAX_ITERATIONS = 1000
TOLERANCE = 1e-12


@dataclass(frozen=True)
class OptimizationInput:
    q_mu: float
    q_nu: float
    y0: float
    n_mu: int = 100_000
    n_nu_min: float = 9.0
    s_y0: float = 0.005

    def __post_init__(self):
        for name in ("q_mu", "q_nu", "y0"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and 0.0 <= v <= 1.0):
                raise ConfigError(f"{name} must be a probability (got {v!r})")
        if self.q_mu <= 0:
            raise ConfigError("q_mu must be positive")
        if self.n_mu < 1:
            raise ConfigError("n_mu must be >= 1")
        if self.n_nu_min < 1:
            raise ConfigError("n_nu_min must be >= 1")
        if not 0.0 < self.s_y0 < 1.0:
            raise ConfigError("s_y0 must lie in (0, 1)")


@dataclass(frozen=True)
class OptimizationResult:
    s_mu: float
    s_nu: float
    s_y0: float
    n_total: float
    expected_n_nu: float
    feasible: bool
    iterations: int

    def throughput_gain(self, reference_s_mu: float) -> float:
        """Relative increase in signal pulses over a reference signal share."""
        return self.s_mu / reference_s_mu - 1.0

    def as_dict(self) -> dict:
        return asdict(self)


def required_total_pulses(n_mu: float, s_mu: float, q_mu: float) -> float:
    """Expected pulses per round: N_total = N_mu / (S_mu Q_mu)."""
    den = s_mu * q_mu
    if den <= 0:
        raise OptimizationError("s_mu * q_mu must be positive")
    return n_mu / den


def expected_decoy_detections(s_nu: float, q_nu: float, n_total: float) -> float:
    """N_nu = S_nu Q_nu N_total."""
    if min(s_nu, q_nu, n_total) < 0:
        raise ValueError("inputs must be >= 0")
    return s_nu * q_nu * n_total


def optimize_occurrences(inp: OptimizationInput) -> OptimizationResult:
    """Largest S_mu whose round still yields n_nu_min expected decoy detections.

    Fixed-point iteration on S_nu = N_nu S_mu Q_mu / (Q_nu N_mu), S_mu = 1 - S_nu - S_Y0,
    starting from S_mu = 1 - S_Y0. The map is affine with slope -c, so when c is
    close to or above 1 the iteration stalls or oscillates; the exact fixed point
    (1 - S_Y0) / (1 + c) is used instead.
    """
    if inp.q_nu <= inp.y0:
        raise IntegrityError(f"decoy gain {inp.q_nu} does not exceed the dark rate {inp.y0}")
    coupling = inp.n_nu_min * inp.q_mu / (inp.q_nu * inp.n_mu)
    s_mu = 1.0 - inp.s_y0
    s_nu = 0.0
    for it in range(1, MAX_ITERATIONS + 1):
        nxt = coupling * s_mu
        s_mu = 1.0 - nxt - inp.s_y0
        if abs(nxt - s_nu) < TOLERANCE:
            s_nu = nxt
            break
        s_nu = nxt
    else:
        s_mu = (1.0 - inp.s_y0) / (1.0 + coupling)
        s_nu = coupling * s_mu
    feasible = s_mu > 0.0 and s_nu < 1.0 - inp.s_y0
    if not feasible:
        return OptimizationResult(s_mu, s_nu, inp.s_y0, math.inf, 0.0, False, it)
    n_total = required_total_pulses(inp.n_mu, s_mu, inp.q_mu)
    return OptimizationResult(s_mu, s_nu, inp.s_y0, n_total,
                              expected_decoy_detections(s_nu, inp.q_nu, n_total), True, it)
