"""Alice's weak coherent source: pulse classes, MPN jitter, photon numbers, BB84 encoding."""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum
from typing import Sequence

import numpy as np
from numpy.random import Generator
from scipy.special import gammaln
from scipy.stats import norm

from .errors import ConfigError

PROB_SUM_TOL = 1e-12

# Jitter draws above this many standard deviations are redrawn. The mass
# involved (~6e-16) is below double precision, and the bound lets the sparse
# round engine dominate the per-pulse MPN by a constant.
JITTER_TRUNCATION = 8.0


def _calibrated_sigma(nominal: float = 0.55, half_width: float = 0.06, coverage: float = 0.999) -> float:
    return half_width / (nominal * norm.ppf(0.5 + coverage / 2.0))


# ~3.32%: puts the 99.9% interval of a 0.55 pulse at [0.49, 0.61].
DEFAULT_RELATIVE_SIGMA = _calibrated_sigma()


class PulseClass(IntEnum):
    SIGNAL = 0
    DECOY = 1
    VACUUM = 2


class Basis(IntEnum):
    RECTILINEAR = 0
    DIAGONAL = 1


class AdversaryAction(IntEnum):
    NONE = 0
    BLOCKED = 1
    SPLIT_FORWARDED = 2


@dataclass(frozen=True)
class ProtocolConfig:
    """Decoy-state source settings: MPNs, occurrence probabilities and pulse rate."""

    mu: float = 0.5
    nu: float = 0.1
    s_mu: float = 0.7
    s_nu: float = 0.2
    s_y0: float = 0.1
    pulse_rate: float = 5e6
    gamma0: float = 0.0

    def __post_init__(self):
        for name in ("mu", "nu", "s_mu", "s_nu", "s_y0", "pulse_rate", "gamma0"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or isinstance(value, bool) or not math.isfinite(value):
                raise ConfigError(f"{name} must be a finite number (got {value!r})")
        for name in ("s_mu", "s_nu", "s_y0"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1] (got {getattr(self, name)})")
        total = self.s_mu + self.s_nu + self.s_y0
        if abs(total - 1.0) > PROB_SUM_TOL:
            raise ConfigError(f"occurrence probabilities must sum to 1 (got {total:.15g})")
        if not 0.0 <= self.nu < self.mu:
            raise ConfigError(f"need 0 <= nu < mu (got nu={self.nu}, mu={self.mu})")
        if self.gamma0 != 0.0:
            raise ConfigError("vacuum MPN gamma0 is fixed at 0")
        if self.pulse_rate <= 0:
            raise ConfigError("pulse_rate must be positive")

    @property
    def mpns(self) -> np.ndarray:
        """Nominal MPN indexed by PulseClass."""
        return np.array([self.mu, self.nu, self.gamma0])

    @property
    def occurrences(self) -> np.ndarray:
        """Occurrence probability indexed by PulseClass."""
        return np.array([self.s_mu, self.s_nu, self.s_y0])


@dataclass(frozen=True)
class SourceJitter:
    """Multiplicative Gaussian pulse-to-pulse MPN noise."""

    relative_sigma: float = DEFAULT_RELATIVE_SIGMA

    def __post_init__(self):
        if not (math.isfinite(self.relative_sigma) and self.relative_sigma >= 0):
            raise ConfigError("relative_sigma must be finite and >= 0")


@dataclass
class PulseRecord:
    """Ground truth for one emitted pulse."""

    index: int
    pulse_class: PulseClass
    effective_mpn: float
    photon_count: int
    bit: int
    basis: Basis
    adversary_action: AdversaryAction = AdversaryAction.NONE
    photons_delivered: int = 0


@dataclass
class PulseBatch:
    """Column-wise pulses; the vectorized counterpart of PulseRecord."""

    pulse_class: np.ndarray
    effective_mpn: np.ndarray
    photon_count: np.ndarray
    bit: np.ndarray
    basis: np.ndarray

    def __len__(self):
        return len(self.pulse_class)

    def record(self, i: int, offset: int = 0) -> PulseRecord:
        return PulseRecord(
            index=offset + i,
            pulse_class=PulseClass(int(self.pulse_class[i])),
            effective_mpn=float(self.effective_mpn[i]),
            photon_count=int(self.photon_count[i]),
            bit=int(self.bit[i]),
            basis=Basis(int(self.basis[i])),
        )


def poisson_pmf(n, mpn):
    """P(n | mpn) = mpn**n exp(-mpn) / n!, elementwise over arrays."""
    n_arr = np.asarray(n)
    m_arr = np.asarray(mpn, dtype=float)
    if np.any(m_arr < 0):
        raise ValueError("mean photon number must be non-negative")
    if np.any(n_arr < 0):
        raise ValueError("photon number must be non-negative")
    n_f = n_arr.astype(float)
    with np.errstate(divide="ignore", invalid="ignore"):
        logp = n_f * np.log(m_arr) - m_arr - gammaln(n_f + 1.0)
    # 0**0 = 1 for the vacuum term
    out = np.where(n_f == 0, np.exp(-m_arr), np.where(m_arr == 0, 0.0, np.exp(logp)))
    return float(out) if out.ndim == 0 else out


def truncated_normal(rng: Generator, size) -> np.ndarray:
    z = rng.standard_normal(size)
    bad = z > JITTER_TRUNCATION
    while np.any(bad):
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = z > JITTER_TRUNCATION
    return z


def jittered_mpn(nominal: np.ndarray, sigma: float, z: np.ndarray) -> np.ndarray:
    return nominal * np.maximum(0.0, 1.0 + sigma * z)


def sample_classes(occurrences: np.ndarray, rng: Generator, size: int) -> np.ndarray:
    edges = np.cumsum(occurrences)[:-1]
    return np.searchsorted(edges, rng.random(size), side="right").astype(np.int8)


def sample_pulses(config: ProtocolConfig, jitter: SourceJitter, rng: Generator, size: int) -> PulseBatch:
    """Draw ``size`` independent pulses."""
    cls = sample_classes(config.occurrences, rng, size)
    nominal = config.mpns[cls]
    mpn = jittered_mpn(nominal, jitter.relative_sigma, truncated_normal(rng, size))
    mpn[cls == PulseClass.VACUUM] = 0.0
    photons = rng.poisson(mpn)
    bits = rng.integers(0, 2, size, dtype=np.int8)
    bases = rng.integers(0, 2, size, dtype=np.int8)
    return PulseBatch(cls, mpn, photons, bits, bases)


def sample_pulse(config: ProtocolConfig, jitter: SourceJitter, rng: Generator, index: int = 0) -> PulseRecord:
    """Draw a single pulse."""
    cls = PulseClass(int(sample_classes(config.occurrences, rng, 1)[0]))
    if cls is PulseClass.VACUUM:
        mpn = 0.0
    else:
        z = float(truncated_normal(rng, 1)[0])
        mpn = float(config.mpns[cls]) * max(0.0, 1.0 + jitter.relative_sigma * z)
    return PulseRecord(
        index=index,
        pulse_class=cls,
        effective_mpn=mpn,
        photon_count=int(rng.poisson(mpn)),
        bit=int(rng.integers(0, 2)),
        basis=Basis(int(rng.integers(0, 2))),
    )


def class_fractions(records: Sequence[PulseRecord] | PulseBatch) -> tuple[float, float, float]:
    """Empirical (signal, decoy, vacuum) fractions."""
    if isinstance(records, PulseBatch):
        classes = records.pulse_class
    else:
        classes = np.fromiter((int(r.pulse_class) for r in records), dtype=np.int8)
    if len(classes) == 0:
        raise ValueError("class_fractions needs at least one pulse")
    counts = np.bincount(classes, minlength=3)
    return tuple(float(c) / len(classes) for c in counts)
