"""Bob's receiver: passive basis split, gated APDs with dark counts and afterpulsing."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import TYPE_CHECKING, Optional

import numpy as np
from numpy.random import Generator

from .errors import ConfigError

if TYPE_CHECKING:
    from .channel import LinkConfig
    from .source import PulseRecord


class Cause(IntEnum):
    NONE = 0
    PHOTON = 1
    DARK = 2
    AFTERPULSE = 3
    MULTIPLE = 4


@dataclass(frozen=True)
class DetectorConfig:
    """Gated APD bank.

    With four detectors (2 bases x 2 bits) each photon picks a basis arm at a
    50:50 splitter. With two detectors Bob picks one basis per gate. Dark and
    afterpulse probabilities are per detector per gate.
    """

    efficiency: float = 0.10
    dark_count_prob: float = 5e-6
    afterpulse_prob: float = 0.01
    num_detectors: int = 4
    misalignment_error: float = 0.01

    def __post_init__(self):
        for name in ("efficiency", "dark_count_prob", "afterpulse_prob", "misalignment_error"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must be a probability in [0, 1] (got {value!r})")
        if self.num_detectors not in (2, 4):
            raise ConfigError("num_detectors must be 2 or 4")

    @property
    def aggregate_dark_prob(self) -> float:
        """Probability that at least one detector dark-clicks in a gate."""
        return -math.expm1(self.num_detectors * math.log1p(-self.dark_count_prob))


def receiver_transmittance(link: "LinkConfig", det: DetectorConfig) -> float:
    """Bob-internal transmittance times detector efficiency (no fiber)."""
    return 10.0 ** (-link.receiver_loss_db / 10.0) * det.efficiency


def effective_eta(link: "LinkConfig", det: DetectorConfig) -> float:
    """End-to-end single-photon transmittance: fiber, receiver loss and detector efficiency."""
    return 10.0 ** (-(link.channel_loss_db + link.receiver_loss_db) / 10.0) * det.efficiency


@dataclass
class AfterpulseState:
    """Which detectors clicked on the previous gate."""

    fired: np.ndarray = field(default_factory=lambda: np.zeros(4, dtype=bool))

    @classmethod
    def fresh(cls, det: DetectorConfig) -> "AfterpulseState":
        return cls(np.zeros(det.num_detectors, dtype=bool))


@dataclass(frozen=True)
class DetectionOutcome:
    clicked: bool
    bit_measured: Optional[int]
    bob_basis: Optional[int]
    basis_match: bool
    cause: Cause
    error: bool
    photons_absorbed: int = 0


def route_photons(absorbed, alice_bit, alice_basis, bob_basis, det: DetectorConfig, rng: Generator) -> np.ndarray:
    """Send each absorbed photon to a detector; returns an (k, num_detectors) hit mask.

    Matched basis: correct-bit detector with probability 1 - misalignment_error.
    Mismatched basis: either bit detector with probability 1/2.
    """
    absorbed = np.asarray(absorbed)
    k = len(absorbed)
    hits = np.zeros((k, det.num_detectors), dtype=bool)
    rows = np.repeat(np.arange(k), absorbed)
    if rows.size == 0:
        return hits
    p = rows.size
    if det.num_detectors == 4:
        arm = rng.integers(0, 2, p, dtype=np.int8)
    else:
        arm = np.asarray(bob_basis)[rows]
    matched = arm == np.asarray(alice_basis)[rows]
    flip = (rng.random(p) < det.misalignment_error).astype(np.int8)
    random_bit = rng.integers(0, 2, p, dtype=np.int8)
    bit = np.where(matched, np.asarray(alice_bit)[rows] ^ flip, random_bit)
    column = arm * 2 + bit if det.num_detectors == 4 else bit
    hits[rows, column] = True
    return hits


@dataclass
class ClickResolution:
    clicked: np.ndarray
    detector: np.ndarray
    cause: np.ndarray
    bob_basis: np.ndarray
    bit_measured: np.ndarray


def resolve_clicks(photon_hits, dark_hits, afterpulse_hits, bob_basis, det: DetectorConfig, rng: Generator) -> ClickResolution:
    """Collapse per-detector hits into one registered outcome per gate.

    Several firing detectors resolve to a uniformly random one with cause MULTIPLE.
    ``bob_basis`` is only read for two-detector receivers.
    """
    fired = photon_hits | dark_hits | afterpulse_hits
    nfired = fired.sum(axis=1)
    clicked = nfired > 0
    k = len(nfired)
    detector = np.full(k, -1, dtype=np.int16)
    cause = np.zeros(k, dtype=np.int8)
    rows = np.flatnonzero(clicked)
    if rows.size:
        f = fired[rows]
        pick = np.floor(rng.random(rows.size) * nfired[rows]).astype(np.int64)
        chosen = np.argmax(np.cumsum(f, axis=1) > pick[:, None], axis=1)
        detector[rows] = chosen
        single = nfired[rows] == 1
        by_photon = photon_hits[rows, chosen]
        by_ap = afterpulse_hits[rows, chosen]
        c = np.where(by_photon, Cause.PHOTON, np.where(by_ap, Cause.AFTERPULSE, Cause.DARK))
        cause[rows] = np.where(single, c, Cause.MULTIPLE)
    if det.num_detectors == 4:
        basis = np.where(clicked, detector // 2, -1).astype(np.int8)
        bit = np.where(clicked, detector % 2, -1).astype(np.int8)
    else:
        basis = np.asarray(bob_basis, dtype=np.int8)
        bit = np.where(clicked, detector, -1).astype(np.int8)
    return ClickResolution(clicked, detector, cause, basis, bit)


def detect(
    photons_arriving: int,
    pulse: "PulseRecord",
    det: DetectorConfig,
    afterpulse_state: AfterpulseState,
    rng: Generator,
) -> DetectionOutcome:
    """Detect one gate. ``photons_arriving`` has already passed Bob's receiver loss.

    ``afterpulse_state`` is updated in place.
    """
    if photons_arriving < 0:
        raise ValueError("photons_arriving must be >= 0")
    d = det.num_detectors
    absorbed = int(rng.binomial(photons_arriving, det.efficiency)) if photons_arriving else 0
    bob_basis = np.array([rng.integers(0, 2)], dtype=np.int8)
    photon_hits = route_photons(np.array([absorbed]), np.array([pulse.bit], dtype=np.int8),
                                np.array([int(pulse.basis)], dtype=np.int8), bob_basis, det, rng)
    dark_hits = (rng.random(d) < det.dark_count_prob)[None, :]
    ap_hits = (afterpulse_state.fired & (rng.random(d) < det.afterpulse_prob))[None, :]
    res = resolve_clicks(photon_hits, dark_hits, ap_hits, bob_basis, det, rng)
    afterpulse_state.fired = (photon_hits | dark_hits | ap_hits)[0]
    if not res.clicked[0]:
        return DetectionOutcome(False, None, None, False, Cause.NONE, False, absorbed)
    basis = int(res.bob_basis[0])
    bit = int(res.bit_measured[0])
    match = basis == int(pulse.basis)
    return DetectionOutcome(True, bit, basis, match, Cause(int(res.cause[0])), match and bit != pulse.bit, absorbed)
