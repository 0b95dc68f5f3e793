"""Round simulation: stream pulses through source, channel or adversary, and receiver.

Three interchangeable engines produce the same distribution of RoundRecords:

``pulse``
    One PulseRecord at a time through sample_pulse / pns_intercept /
    transmit_passive / detect. Slow; a literal reference.
``dense``
    The same per-pulse model vectorized over chunks of pulses.
``sparse``
    Event driven. Every pulse's photons are split (Poisson thinning) into the
    ones that could still be absorbed at Bob and the rest. Only pulses with a
    potentially absorbed photon, a dark count or an afterpulse are
    materialized; the classes of the remaining pulses are drawn in bulk.
    The MPN jitter is dominated by its truncation bound so the candidate rate
    is a known constant; a binomial thinning step restores the exact jittered
    rate. Exact in distribution, 30-100x fewer random draws than ``dense``.

Afterpulsing is a one-gate memory per detector. Each click gets a single
Bernoulli trial to fire the same detector on the next gate; that is applied as
a sparse overlay after fresh clicks are known, carrying across chunk edges.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np
from numpy.random import Generator
from scipy.special import gammainc

from .analysis import RoundRecord
from .channel import (
    AdversaryConfig,
    LinkConfig,
    forwarded_click_probability,
    jitter_average,
    photon_click_probability,
    pns_intercept,
    pns_intercept_batch,
    transmit_passive,
)
from .errors import RoundTimeout
from .receiver import (
    AfterpulseState,
    Cause,
    DetectionOutcome,
    DetectorConfig,
    detect,
    receiver_transmittance,
    resolve_clicks,
    route_photons,
)
from .source import (
    JITTER_TRUNCATION,
    AdversaryAction,
    ProtocolConfig,
    PulseClass,
    PulseRecord,
    SourceJitter,
    jittered_mpn,
    sample_classes,
    sample_pulse,
    sample_pulses,
    truncated_normal,
)

DEFAULT_PULSE_BUDGET = 10 ** 10
MAX_SPARSE_CHUNK = 1 << 25
MAX_DENSE_CHUNK = 1 << 20
ENGINES = ("sparse", "dense", "pulse")


@dataclass(frozen=True)
class RoundSpec:
    """Everything a round needs besides its random stream."""

    protocol: ProtocolConfig
    link: LinkConfig
    detector: DetectorConfig
    adversary: AdversaryConfig = AdversaryConfig()
    jitter: SourceJitter = SourceJitter()
    round_target: int = 10_000
    pulse_budget: int = DEFAULT_PULSE_BUDGET

    def __post_init__(self):
        if self.round_target < 1:
            raise ValueError("round_target must be >= 1")
        if self.pulse_budget < 1:
            raise ValueError("pulse_budget must be >= 1")

    @property
    def eta_receiver(self) -> float:
        return receiver_transmittance(self.link, self.detector)

    @property
    def eta_total(self) -> float:
        return self.eta_receiver * self.link.channel_transmittance

    def expected_photon_click(self, cls: PulseClass) -> float:
        """Analytic photon-caused click probability per pulse of a class (no afterpulses)."""
        mpn = float(self.protocol.mpns[cls])
        sigma = self.jitter.relative_sigma
        if mpn == 0:
            return 0.0
        if self.adversary.enabled:
            eta = self.eta_receiver
            return self.adversary.forward_probability * jitter_average(
                lambda m: forwarded_click_probability(m, eta), mpn, sigma)
        eta = self.eta_total
        return jitter_average(lambda m: photon_click_probability(m, eta), mpn, sigma)

    def expected_gain(self, cls: PulseClass) -> float:
        dark = self.detector.aggregate_dark_prob
        return 1.0 - (1.0 - dark) * (1.0 - self.expected_photon_click(cls))


@dataclass
class PhotonNumberTally:
    """Ground-truth sent/detected counts by class and emitted photon number."""

    sent: np.ndarray = field(default_factory=lambda: np.zeros((3, 0), dtype=np.int64))
    detected: np.ndarray = field(default_factory=lambda: np.zeros((3, 0), dtype=np.int64))

    def add(self, cls: np.ndarray, n: np.ndarray, clicked: np.ndarray) -> None:
        width = int(n.max()) + 1 if n.size else 1
        self._grow(width)
        np.add.at(self.sent, (cls, n), 1)
        np.add.at(self.detected, (cls[clicked], n[clicked]), 1)

    def _grow(self, width: int) -> None:
        if width > self.sent.shape[1]:
            pad = width - self.sent.shape[1]
            self.sent = np.pad(self.sent, ((0, 0), (0, pad)))
            self.detected = np.pad(self.detected, ((0, 0), (0, pad)))

    def yield_of(self, cls, n: int) -> tuple[int, int]:
        """(detections, pulses sent) for n-photon pulses of a class."""
        if n >= self.sent.shape[1]:
            return 0, 0
        return int(self.detected[cls, n]), int(self.sent[cls, n])


@dataclass
class RoundResult:
    record: RoundRecord
    photon_tally: Optional[PhotonNumberTally] = None
    chunks: int = 1


# --------------------------------------------------------------------------- rows


@dataclass
class _Rows:
    """Materialized gates, one row each, sorted by slot."""

    slot: np.ndarray
    cls: np.ndarray
    n: np.ndarray
    bit: np.ndarray
    basis: np.ndarray
    bob_basis: np.ndarray
    action: np.ndarray
    absorbed: np.ndarray
    photon_hits: np.ndarray
    dark_hits: np.ndarray
    ap_hits: np.ndarray = None

    def __len__(self):
        return len(self.slot)

    def take(self, idx) -> "_Rows":
        return _Rows(**{k: (None if v is None else v[idx]) for k, v in vars(self).items()})

    @staticmethod
    def concat(a: "_Rows", b: "_Rows") -> "_Rows":
        return _Rows(**{k: None if v is None else np.concatenate([v, getattr(b, k)]) for k, v in vars(a).items()})


def bernoulli_positions(length: int, p: float, rng: Generator) -> np.ndarray:
    """Indices of successes among ``length`` independent Bernoulli(p) trials."""
    if length <= 0 or p <= 0.0:
        return np.empty(0, dtype=np.int64)
    if p >= 1.0:
        return np.arange(length, dtype=np.int64)
    parts = []
    last = -1
    while True:
        left = length - 1 - last
        expected = left * p
        m = int(expected + 6.0 * math.sqrt(expected) + 16)
        gaps = rng.geometric(p, m)
        gaps[(gaps <= 0) | (gaps > length)] = length + 1  # tiny p overflows int64
        pos = last + np.cumsum(gaps)
        inside = pos[pos < length]
        parts.append(inside)
        if inside.size < pos.size:
            break
        last = int(pos[-1])
    return np.concatenate(parts)


def zero_truncated_poisson(lam: np.ndarray, rng: Generator) -> np.ndarray:
    """Poisson(lam) conditioned on >= 1, by inverse survival function."""
    lam = np.asarray(lam, dtype=float)
    v = (1.0 - rng.random(lam.shape)) * -np.expm1(-lam)
    out = np.ones(lam.shape, dtype=np.int64)
    r = 1
    while True:
        sf = gammainc(r + 1, lam)  # P(X > r)
        more = sf > v
        if not np.any(more):
            return out
        out += more
        r += 1


def _overlay_afterpulses(slot, fired, carry, length, p_ap, num_det, rng):
    """Propagate afterpulses through sorted rows of one chunk.

    ``fired`` holds fresh (photon or dark) hits; ``carry`` lists detectors hit by
    afterpulse at slot 0 from the previous chunk. Returns afterpulse keys
    (slot * num_det + detector) landing inside the chunk and the detectors to
    carry into the next one.
    """
    r, c = np.nonzero(fired)
    fired_keys = np.sort(slot[r] * num_det + c)
    carry_keys = np.asarray(carry, dtype=np.int64)
    fresh_carry = carry_keys[~np.isin(carry_keys, fired_keys)]
    ap_keys = [fresh_carry]
    fired_keys = np.union1d(fired_keys, fresh_carry)
    frontier = fired_keys
    if p_ap <= 0.0:
        return fresh_carry, np.empty(0, dtype=np.int64)
    while frontier.size:
        nxt = frontier[rng.random(frontier.size) < p_ap] + num_det
        nxt = np.unique(nxt)
        nxt = nxt[~np.isin(nxt, fired_keys, assume_unique=True)]
        fired_keys = np.union1d(fired_keys, nxt)
        ap_keys.append(nxt)
        frontier = nxt
    keys = np.concatenate(ap_keys)
    inside = keys < length * num_det
    out_carry = keys[~inside] - length * num_det
    return keys[inside], out_carry


# ------------------------------------------------------------------------ engines


class _ChunkSampler:
    """Common chunk bookkeeping: overlays afterpulses and resolves clicks."""

    def __init__(self, spec: RoundSpec, rng: Generator, photon_tally: bool):
        self.spec = spec
        self.rng = rng
        self.det = spec.detector
        self.D = spec.detector.num_detectors
        self.tally = PhotonNumberTally() if photon_tally else None

    def finish(self, rows: _Rows, carry, length):
        """Add afterpulse hits (creating rows when needed) and resolve each gate."""
        D = self.D
        ap_keys, out_carry = _overlay_afterpulses(
            rows.slot, rows.photon_hits | rows.dark_hits, carry, length,
            self.det.afterpulse_prob, D, self.rng)
        ap_slots = ap_keys // D
        new_slots = np.setdiff1d(ap_slots, rows.slot)
        if new_slots.size:
            rows = _Rows.concat(rows, self.quiet_rows(new_slots))
            rows = rows.take(np.argsort(rows.slot, kind="stable"))
        ap = np.zeros((len(rows), D), dtype=bool)
        ap[np.searchsorted(rows.slot, ap_slots), ap_keys % D] = True
        rows.ap_hits = ap
        res = resolve_clicks(rows.photon_hits, rows.dark_hits, rows.ap_hits, rows.bob_basis, self.det, self.rng)
        return rows, res, out_carry


class _SparseSampler(_ChunkSampler):
    def __init__(self, spec, rng, photon_tally=False):
        if photon_tally:
            raise ValueError("the sparse engine does not materialize every pulse; use engine='dense'")
        super().__init__(spec, rng, False)
        p = spec.protocol
        self.attack = spec.adversary.enabled
        self.t = spec.adversary.forward_probability
        self.sigma = spec.jitter.relative_sigma
        self.eta_cand = spec.eta_receiver if self.attack else spec.eta_total
        self.mpn = p.mpns
        self.mpn_max = self.mpn * (1.0 + JITTER_TRUNCATION * self.sigma)
        self.lam = self.mpn_max * self.eta_cand
        b = -np.expm1(-self.lam)
        occ = p.occurrences
        self.cand_rate = float(np.dot(occ, b))
        self.cand_p = occ * b / self.cand_rate if self.cand_rate > 0 else occ
        quiet = occ * (1.0 - b)
        self.quiet_p = quiet / quiet.sum()

    def _draw_classes(self, probs, size):
        return sample_classes(probs, self.rng, size)

    def _photons(self, cls, candidate):
        """Jittered photon number plus the candidate photons that may be absorbed."""
        rng = self.rng
        k = cls.size
        m = jittered_mpn(self.mpn[cls], self.sigma, truncated_normal(rng, k))
        potential = np.zeros(k, dtype=np.int64)
        if candidate.any():
            ci = np.flatnonzero(candidate)
            c = cls[ci]
            r_dom = zero_truncated_poisson(self.lam[c], rng)
            keep = np.minimum(1.0, m[ci] / self.mpn_max[c])
            potential[ci] = rng.binomial(r_dom, keep)
        lost = rng.poisson(m * (1.0 - self.eta_cand))
        return potential + lost, potential

    def _adversary(self, n, potential):
        rng = self.rng
        k = n.size
        if not self.attack:
            return np.zeros(k, dtype=np.int8), potential
        action, _ = pns_intercept_batch(n, self.t, rng)
        fwd = action == AdversaryAction.SPLIT_FORWARDED
        # Eve keeps a uniformly chosen photon; it is a potentially absorbed one with prob potential/n
        kept = np.zeros(k, dtype=np.int64)
        if fwd.any():
            fi = np.flatnonzero(fwd)
            kept[fi] = rng.random(fi.size) * n[fi] < potential[fi]
        absorbed = np.where(fwd, potential - kept, 0)
        return action, absorbed

    def _rows(self, slots, cls, candidate, dark_hits):
        rng = self.rng
        k = slots.size
        n, potential = self._photons(cls, candidate)
        action, absorbed = self._adversary(n, potential)
        bit = rng.integers(0, 2, k, dtype=np.int8)
        basis = rng.integers(0, 2, k, dtype=np.int8)
        bob = rng.integers(0, 2, k, dtype=np.int8)
        hits = route_photons(absorbed, bit, basis, bob, self.det, rng)
        return _Rows(slots, cls.astype(np.int8), n, bit, basis, bob, action, absorbed, hits, dark_hits)

    def quiet_rows(self, slots):
        k = slots.size
        cls = self._draw_classes(self.quiet_p, k)
        return self._rows(slots, cls, np.zeros(k, dtype=bool), np.zeros((k, self.D), dtype=bool))

    def chunk(self, length, carry):
        rng = self.rng
        D = self.D
        cand = bernoulli_positions(length, self.cand_rate, rng)
        darks = [bernoulli_positions(length, self.det.dark_count_prob, rng) for _ in range(D)]
        carry_slots = np.zeros(len(carry), dtype=np.int64)
        slots = np.unique(np.concatenate([cand, carry_slots, *darks]))
        k = slots.size
        candidate = np.zeros(k, dtype=bool)
        candidate[np.searchsorted(slots, cand)] = True
        dark_hits = np.zeros((k, D), dtype=bool)
        for j, pos in enumerate(darks):
            dark_hits[np.searchsorted(slots, pos), j] = True
        cls = np.empty(k, dtype=np.int8)
        cls[candidate] = self._draw_classes(self.cand_p, int(candidate.sum()))
        cls[~candidate] = self._draw_classes(self.quiet_p, int((~candidate).sum()))
        rows = self._rows(slots, cls, candidate, dark_hits)
        return self.finish(rows, carry, length)

    def untouched_classes(self, count):
        return self.rng.multinomial(count, self.quiet_p)


class _DenseSampler(_ChunkSampler):
    def __init__(self, spec, rng, photon_tally=False):
        super().__init__(spec, rng, photon_tally)
        self.batch = None

    def chunk(self, length, carry):
        spec, rng, D = self.spec, self.rng, self.D
        b = sample_pulses(spec.protocol, spec.jitter, rng, length)
        if spec.adversary.enabled:
            action, delivered = pns_intercept_batch(b.photon_count, spec.adversary.forward_probability, rng)
            arriving = transmit_passive(delivered, spec.link.receiver_loss_db, rng)
        else:
            action = np.zeros(length, dtype=np.int8)
            through = transmit_passive(b.photon_count, spec.link.channel_loss_db, rng)
            arriving = transmit_passive(through, spec.link.receiver_loss_db, rng)
        absorbed = rng.binomial(arriving, self.det.efficiency)
        dark = rng.random((length, D)) < self.det.dark_count_prob
        bob = rng.integers(0, 2, length, dtype=np.int8)
        self.batch = (b, action, absorbed, dark, bob)
        touched = np.flatnonzero((absorbed > 0) | dark.any(axis=1) | (np.arange(length) == 0) & (len(carry) > 0))
        rows = self._take(touched)
        rows.photon_hits = route_photons(rows.absorbed, rows.bit, rows.basis, rows.bob_basis, self.det, rng)
        return self.finish(rows, carry, length)

    def _take(self, idx):
        b, action, absorbed, dark, bob = self.batch
        k = idx.size
        return _Rows(idx.astype(np.int64), b.pulse_class[idx], b.photon_count[idx], b.bit[idx], b.basis[idx],
                     bob[idx], action[idx], absorbed[idx], np.zeros((k, self.D), dtype=bool), dark[idx])

    def quiet_rows(self, slots):
        return self._take(slots)

    def untouched_classes(self, count):
        raise NotImplementedError

    def class_counts(self, end):
        return np.bincount(self.batch[0].pulse_class[:end], minlength=3)

    def tally_photons(self, end, rows, clicked):
        if self.tally is None:
            return
        b = self.batch[0]
        click_all = np.zeros(end, dtype=bool)
        inside = rows.slot < end
        click_all[rows.slot[inside]] = clicked[inside]
        self.tally.add(b.pulse_class[:end].astype(np.int64), b.photon_count[:end], click_all)


class _Tally:
    def __init__(self):
        self.sent = np.zeros(3, dtype=np.int64)
        self.detected = np.zeros(3, dtype=np.int64)
        self.sifted = np.zeros(3, dtype=np.int64)
        self.errors = np.zeros(3, dtype=np.int64)
        self.misc = dict(dark_clicks=0, afterpulse_clicks=0, multiple_clicks=0, single_photon_detected=0,
                         single_photon_sifted=0, single_photon_errors=0, photon_sifted_signal=0,
                         compromised_sifted=0)

    def add(self, rows: _Rows, res, sel):
        cls = rows.cls[sel].astype(np.int64)
        clicked = res.clicked[sel]
        sift = clicked & (res.bob_basis[sel] == rows.basis[sel])
        err = sift & (res.bit_measured[sel] != rows.bit[sel])
        self.sent += np.bincount(cls, minlength=3)
        self.detected += np.bincount(cls[clicked], minlength=3)
        self.sifted += np.bincount(cls[sift], minlength=3)
        self.errors += np.bincount(cls[err], minlength=3)
        cause = res.cause[sel]
        m = self.misc
        m["dark_clicks"] += int(np.count_nonzero(cause == Cause.DARK))
        m["afterpulse_clicks"] += int(np.count_nonzero(cause == Cause.AFTERPULSE))
        m["multiple_clicks"] += int(np.count_nonzero(cause == Cause.MULTIPLE))
        sig = cls == PulseClass.SIGNAL
        single = sig & (rows.n[sel] == 1)
        m["single_photon_detected"] += int(np.count_nonzero(single & clicked))
        m["single_photon_sifted"] += int(np.count_nonzero(single & sift))
        m["single_photon_errors"] += int(np.count_nonzero(single & err))
        m["photon_sifted_signal"] += int(np.count_nonzero(sig & sift & (rows.absorbed[sel] > 0)))
        m["compromised_sifted"] += int(np.count_nonzero(sig & sift & (rows.action[sel] == AdversaryAction.SPLIT_FORWARDED)))

    def record(self, protocol: ProtocolConfig) -> RoundRecord:
        names = ("signal", "decoy", "vacuum")
        kw = {}
        for arr, prefix in ((self.sent, "sent"), (self.detected, "detected"), (self.sifted, "sifted"), (self.errors, "errors")):
            kw.update({f"{prefix}_{nm}": int(v) for nm, v in zip(names, arr)})
        kw.update(self.misc)
        return RoundRecord(protocol.mu, protocol.nu, protocol.pulse_rate, **kw)


def _chunk_length(spec: RoundSpec, remaining: int, cap: int) -> int:
    p_sig = spec.protocol.s_mu * spec.expected_gain(PulseClass.SIGNAL)
    if p_sig <= 0:
        return cap
    want = (remaining + 4.0 * math.sqrt(remaining) + 8.0) / p_sig
    return int(min(cap, max(1024, math.ceil(want))))


def simulate_round(spec: RoundSpec, rng: Generator, engine: str = "sparse", photon_tally: bool = False) -> RoundResult:
    """Run pulses until ``spec.round_target`` signal-state detections have been registered."""
    if engine == "pulse":
        return _simulate_round_pulsewise(spec, rng, photon_tally)
    if engine == "sparse":
        sampler = _SparseSampler(spec, rng, photon_tally)
        cap = MAX_SPARSE_CHUNK
    elif engine == "dense":
        sampler = _DenseSampler(spec, rng, photon_tally)
        cap = MAX_DENSE_CHUNK
    else:
        raise ValueError(f"unknown engine {engine!r}; choose from {ENGINES}")
    tally = _Tally()
    remaining = spec.round_target
    done = 0
    carry = np.empty(0, dtype=np.int64)
    chunks = 0
    while remaining > 0:
        length = min(_chunk_length(spec, remaining, cap), spec.pulse_budget - done)
        if length <= 0:
            raise RoundTimeout(f"pulse budget {spec.pulse_budget} exhausted with {remaining} signal detections missing",
                               pulses_sent=done)
        rows, res, carry = sampler.chunk(length, carry)
        chunks += 1
        sig_clicks = res.clicked & (rows.cls == PulseClass.SIGNAL)
        cum = np.cumsum(sig_clicks)
        if cum.size and cum[-1] >= remaining:
            last = int(np.searchsorted(cum, remaining))
            end = int(rows.slot[last]) + 1
            remaining = 0
        else:
            end = length
            remaining -= int(cum[-1]) if cum.size else 0
        sel = rows.slot < end
        tally.add(rows, res, sel)
        if engine == "sparse":
            tally.sent += sampler.untouched_classes(end - int(np.count_nonzero(sel)))
        else:
            tally.sent += sampler.class_counts(end) - np.bincount(rows.cls[sel].astype(np.int64), minlength=3)
            sampler.tally_photons(end, rows, res.clicked)
        done += end
    return RoundResult(tally.record(spec.protocol), sampler.tally, chunks)


# ------------------------------------------------------------- per-pulse reference


def stream_pulses(spec: RoundSpec, rng: Generator) -> Iterator[tuple[PulseRecord, DetectionOutcome]]:
    """Endless stream of (pulse, detection) pairs, one gate at a time."""
    state = AfterpulseState.fresh(spec.detector)
    index = 0
    while True:
        pulse = sample_pulse(spec.protocol, spec.jitter, rng, index)
        if spec.adversary.enabled:
            pns_intercept(pulse, spec.adversary, rng)
            arriving = transmit_passive(pulse.photons_delivered, spec.link.receiver_loss_db, rng)
        else:
            pulse.photons_delivered = transmit_passive(pulse.photon_count, spec.link.channel_loss_db, rng)
            arriving = transmit_passive(pulse.photons_delivered, spec.link.receiver_loss_db, rng)
        yield pulse, detect(arriving, pulse, spec.detector, state, rng)
        index += 1


def _simulate_round_pulsewise(spec: RoundSpec, rng: Generator, photon_tally: bool) -> RoundResult:
    names = ("signal", "decoy", "vacuum")
    kw = {f"{p}_{nm}": 0 for p in ("sent", "detected", "sifted", "errors") for nm in names}
    misc = dict(dark_clicks=0, afterpulse_clicks=0, multiple_clicks=0, single_photon_detected=0,
                single_photon_sifted=0, single_photon_errors=0, photon_sifted_signal=0, compromised_sifted=0)
    ptally = PhotonNumberTally() if photon_tally else None
    remaining = spec.round_target
    for pulse, out in stream_pulses(spec, rng):
        if pulse.index >= spec.pulse_budget:
            raise RoundTimeout("pulse budget exhausted", pulses_sent=pulse.index)
        nm = names[pulse.pulse_class]
        kw["sent_" + nm] += 1
        if ptally is not None:
            ptally.add(np.array([int(pulse.pulse_class)]), np.array([pulse.photon_count]), np.array([out.clicked]))
        if not out.clicked:
            continue
        kw["detected_" + nm] += 1
        kw["sifted_" + nm] += out.basis_match
        kw["errors_" + nm] += out.error
        if out.cause is Cause.DARK:
            misc["dark_clicks"] += 1
        elif out.cause is Cause.AFTERPULSE:
            misc["afterpulse_clicks"] += 1
        elif out.cause is Cause.MULTIPLE:
            misc["multiple_clicks"] += 1
        if pulse.pulse_class is PulseClass.SIGNAL:
            if pulse.photon_count == 1:
                misc["single_photon_detected"] += 1
                misc["single_photon_sifted"] += out.basis_match
                misc["single_photon_errors"] += out.error
            if out.basis_match and out.photons_absorbed > 0:
                misc["photon_sifted_signal"] += 1
            if out.basis_match and pulse.adversary_action is AdversaryAction.SPLIT_FORWARDED:
                misc["compromised_sifted"] += 1
            remaining -= 1
            if remaining == 0:
                break
    p = spec.protocol
    return RoundResult(RoundRecord(p.mu, p.nu, p.pulse_rate, **kw, **misc), ptally, 1)
