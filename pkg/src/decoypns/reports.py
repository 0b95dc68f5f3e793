"""Deterministic report emission: rounds.csv, summary.json, plotdata/ and a manifest.

summary.json is computed from the text of rounds.csv (plus the analysis
settings echoed in config.json), so every reported number can be re-derived
from the per-round table alone.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
from collections import OrderedDict
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Mapping, Optional

import numpy as np

from . import __version__
from .analysis import (
    COUNT_FIELDS,
    MIN_CALIBRATION_ROUNDS,
    AnalysisError,
    KeyRateParams,
    RoundRecord,
    calibrate_delta,
    estimate_efficiencies,
    key_rate_summary,
    merge_records,
    pns_verdict,
)
from .config import canonical_json, config_digest, plan_to_dict
from .errors import IntegrityError
from .harness import ExperimentPlan, TrialStats
from .optimizer import OptimizationInput, optimize_occurrences

CONTEXT_COLUMNS = ("treatment", "configuration", "attack", "phase", "round", "mu", "nu", "s_mu", "s_nu", "s_y0",
                   "pulse_rate")
DERIVED_COLUMNS = ("pulses_sent", "duration_s", "y0", "q_mu", "q_nu", "eta_signal", "eta_decoy",
                   "decoy_detections", "flag", "integrity_flag")
ROUND_COLUMNS = CONTEXT_COLUMNS + COUNT_FIELDS + DERIVED_COLUMNS
FLOAT_FORMAT = "{:.12e}"
PHASES = ("calibration", "measurement")

SCHEMA = {
    "rounds.csv": {
        "columns": list(ROUND_COLUMNS),
        "row_order": "configurations in plan order; per configuration the calibration rounds, then each attack "
                     "mode's measurement rounds, each by round index",
        "formats": {
            "integers": "plain decimal",
            "mu, nu, s_mu, s_nu, s_y0, pulse_rate": "shortest round-trip decimal (Python repr)",
            "duration_s, y0, q_mu, q_nu, eta_signal, eta_decoy": "scientific notation, 12 digits after the point",
            "attack, flag, integrity_flag": "0 or 1",
        },
        "phase": "calibration rounds are attack-free and shared by both attack modes of a configuration; "
                 "their treatment column is '<configuration>/calibration' and their flags are 0",
        "flag": "|eta_signal - eta_decoy| > delta, or q_nu <= y0",
    },
    "summary.json": "per-treatment statistics recomputed from rounds.csv and config.json",
    "plotdata/boxplot.csv": {
        "columns": ["treatment", "state", "n", "min", "whisker_low", "q1", "median", "q3", "whisker_high", "max",
                    "mean"],
        "notes": "quartiles use linear interpolation; whiskers are the most extreme data within 1.5 IQR",
    },
    "plotdata/decoy_histogram.csv": {
        "columns": ["treatment", "decoy_detections", "rounds"],
        "notes": "every count from 0 to the maximum observed appears, including empty bins",
    },
}


@dataclass(frozen=True)
class RunManifest:
    tool_version: str
    config_digest: str
    master_seed: int
    started: str
    finished: str
    treatments: tuple

    def as_dict(self) -> dict:
        d = asdict(self)
        d["treatments"] = list(self.treatments)
        return d


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def make_manifest(plan: ExperimentPlan, dataset: Mapping[str, TrialStats], started: str,
                  finished: Optional[str] = None) -> RunManifest:
    return RunManifest(__version__, config_digest(plan), plan.master_seed, started, finished or utc_now(),
                       tuple(dataset))


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, float):
        return FLOAT_FORMAT.format(value)
    return str(value)


def _safe_eta(record: RoundRecord):
    try:
        return estimate_efficiencies(record)
    except AnalysisError:
        return None


def _round_row(treatment, cfg, attack, phase, index, rec: RoundRecord, delta) -> list:
    p = cfg.protocol
    est = _safe_eta(rec)
    nan = float("nan")
    row = [treatment, cfg.name, _fmt(attack), phase, str(index), repr(p.mu), repr(p.nu), repr(p.s_mu),
           repr(p.s_nu), repr(p.s_y0), repr(p.pulse_rate)]
    row += [_fmt(getattr(rec, f)) for f in COUNT_FIELDS]
    if est is None:
        derived = [nan] * 5
        flag = integrity = False
    else:
        derived = [est.y0, est.q_mu, est.q_nu, est.eta_signal, est.eta_decoy]
        integrity = est.q_nu <= est.y0
        flag = phase == "measurement" and (abs(est.eta_signal - est.eta_decoy) > delta or integrity)
        integrity = phase == "measurement" and integrity
    row += [_fmt(rec.pulses_sent), _fmt(rec.duration_s)] + [_fmt(x) for x in derived]
    row += [_fmt(rec.detected_decoy), _fmt(bool(flag)), _fmt(bool(integrity))]
    return row


def rounds_csv_text(dataset: Mapping[str, TrialStats]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROUND_COLUMNS)
    seen = set()
    for stats in dataset.values():
        cfg = stats.configuration
        if cfg.name not in seen:
            seen.add(cfg.name)
            for i, rec in enumerate(stats.calibration):
                w.writerow(_round_row(f"{cfg.name}/calibration", cfg, False, "calibration", i, rec, math.inf))
        for i, rec in enumerate(stats.rounds):
            w.writerow(_round_row(stats.treatment, cfg, stats.attack, "measurement", i, rec, stats.delta))
    return buf.getvalue()


def read_rounds_csv(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    if rows and tuple(rows[0].keys()) != ROUND_COLUMNS:
        raise ValueError("rounds.csv columns do not match the schema")
    return rows


def _record(row: dict) -> RoundRecord:
    return RoundRecord(float(row["mu"]), float(row["nu"]), float(row["pulse_rate"]),
                       **{f: int(row[f]) for f in COUNT_FIELDS})


def _num(x):
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


def summary_from_rows(rows: Iterable[dict], settings: dict) -> dict:
    """Per-treatment summary from rounds.csv rows and the plan's analysis settings."""
    coverage = settings.get("coverage", 0.999)
    alpha = settings.get("alpha", 0.001)
    persistent = settings.get("persistent_rounds", 3)
    kr = KeyRateParams(**settings.get("key_rate", {}))
    n_nu_min = settings.get("n_nu_min", 9.0)
    s_y0_min = settings.get("s_y0_min", 0.005)
    calib: dict[str, list] = OrderedDict()
    meas: dict[str, list] = OrderedDict()
    meta: dict[str, dict] = {}
    for row in rows:
        rec = _record(row)
        if row["phase"] == "calibration":
            calib.setdefault(row["configuration"], []).append(rec)
        else:
            meas.setdefault(row["treatment"], []).append(rec)
            meta[row["treatment"]] = row
    treatments = OrderedDict()
    verdicts = {"Secure": 0, "Attack": 0, "Inconclusive": 0}
    for tid, records in meas.items():
        row = meta[tid]
        cal = calib.get(row["configuration"], [])
        delta = calibrate_delta(cal, coverage) if len(cal) >= MIN_CALIBRATION_ROUNDS else math.inf
        v = pns_verdict(records, delta, alpha, persistent)
        verdicts[v.decision.value] += 1
        est = [estimate_efficiencies(r) for r in records]
        eta_s = np.array([e.eta_signal for e in est])
        eta_d = np.array([e.eta_decoy for e in est])
        decoys = np.array([r.detected_decoy for r in records])
        pooled = merge_records(records)
        attack = row["attack"] == "1"
        entry = OrderedDict(
            configuration=row["configuration"],
            attack=attack,
            rounds=len(records),
            calibration_rounds=len(cal),
            delta=_num(delta),
            p_value=_num(v.p_value),
            verdict=v.decision.value,
            flagged_rounds=int(sum(v.flags)),
            flag_rate=v.flag_rate,
            longest_flag_run=v.longest_flag_run,
            longest_integrity_run=v.longest_integrity_run,
            eta_signal_mean=float(eta_s.mean()),
            eta_signal_var=float(eta_s.var(ddof=1)) if len(eta_s) > 1 else 0.0,
            eta_decoy_mean=float(eta_d.mean()),
            eta_decoy_var=float(eta_d.var(ddof=1)) if len(eta_d) > 1 else 0.0,
            y0_mean=float(np.mean([e.y0 for e in est])),
            q_mu_mean=float(np.mean([e.q_mu for e in est])),
            q_nu_mean=float(np.mean([e.q_nu for e in est])),
            mean_pulses_per_round=float(np.mean([r.pulses_sent for r in records])),
            mean_duration_s=float(np.mean([r.duration_s for r in records])),
            decoy_detections_mean=float(decoys.mean()),
            fraction_rounds_with_decoy=float(np.mean(decoys > 0)),
            key_rate=key_rate_summary(pooled, kr, float(row["s_mu"])),
            compromised_fraction=(pooled.compromised_sifted / pooled.sifted_signal) if pooled.sifted_signal else 0.0,
        )
        if not attack:
            entry["optimization"] = _optimization_echo(pooled, settings.get("round_target", 10_000),
                                                       n_nu_min, s_y0_min)
        treatments[tid] = entry
    settings = json.loads(canonical_json(settings))  # key order independent of the source
    return OrderedDict(verdict_counts=verdicts, settings=settings, treatments=treatments)


def _optimization_echo(pooled: RoundRecord, n_mu, n_nu_min, s_y0_min) -> dict:
    """Occurrence optimization fed with this treatment's measured no-attack gains."""
    try:
        inp = OptimizationInput(q_mu=pooled.detected_signal / pooled.sent_signal,
                                q_nu=pooled.detected_decoy / pooled.sent_decoy,
                                y0=pooled.detected_vacuum / pooled.sent_vacuum,
                                n_mu=int(n_mu), n_nu_min=n_nu_min, s_y0=s_y0_min)
        return {"status": "ok", **optimize_occurrences(inp).as_dict()}
    except IntegrityError as exc:
        return {"status": "integrity_violation", "message": str(exc)}
    except (ZeroDivisionError, ValueError, RuntimeError) as exc:
        return {"status": "error", "message": str(exc)}


def _settings(plan: ExperimentPlan) -> dict:
    d = plan_to_dict(plan)
    return {k: d[k] for k in ("alpha", "coverage", "persistent_rounds", "key_rate", "n_nu_min", "s_y0_min",
                              "round_target")}


def summary_from_csv(text: str, settings: dict) -> dict:
    return summary_from_rows(read_rounds_csv(text), settings)


def _quantiles(x: np.ndarray) -> list:
    q1, med, q3 = np.quantile(x, [0.25, 0.5, 0.75])
    iqr = q3 - q1
    lo = x[x >= q1 - 1.5 * iqr].min()
    hi = x[x <= q3 + 1.5 * iqr].max()
    return [x.min(), lo, q1, med, q3, hi, x.max(), x.mean()]


def plotdata_from_rows(rows: list[dict]) -> tuple[str, str]:
    series: dict[str, dict] = OrderedDict()
    for row in rows:
        if row["phase"] != "measurement":
            continue
        s = series.setdefault(row["treatment"], {"signal": [], "decoy": [], "decoys": []})
        s["signal"].append(float(row["eta_signal"]))
        s["decoy"].append(float(row["eta_decoy"]))
        s["decoys"].append(int(row["decoy_detections"]))
    box = io.StringIO()
    w = csv.writer(box, lineterminator="\n")
    w.writerow(SCHEMA["plotdata/boxplot.csv"]["columns"])
    hist = io.StringIO()
    h = csv.writer(hist, lineterminator="\n")
    h.writerow(SCHEMA["plotdata/decoy_histogram.csv"]["columns"])
    for tid, s in series.items():
        for state in ("signal", "decoy"):
            x = np.array(s[state])
            x = x[np.isfinite(x)]
            if x.size:
                w.writerow([tid, state, x.size] + [_fmt(float(v)) for v in _quantiles(x)])
        counts = np.bincount(np.array(s["decoys"], dtype=np.int64))
        for k, c in enumerate(counts):
            h.writerow([tid, k, int(c)])
    return box.getvalue(), hist.getvalue()


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8", newline="")


def emit_reports(dataset: Mapping[str, TrialStats], manifest: RunManifest, out_dir, plan: ExperimentPlan) -> list:
    """Write every report file under ``out_dir``; returns the paths written."""
    if not dataset:
        raise ValueError("dataset is empty")
    out = Path(out_dir)
    try:
        (out / "plotdata").mkdir(parents=True, exist_ok=True)
        if not os.access(out, os.W_OK):
            raise PermissionError(f"{out} is not writable")
    except OSError as exc:
        raise OSError(f"cannot write reports to {out}: {exc}") from exc
    rounds_text = rounds_csv_text(dataset)
    rows = read_rounds_csv(rounds_text)
    summary = summary_from_rows(rows, _settings(plan))
    box, hist = plotdata_from_rows(rows)
    files = {
        "rounds.csv": rounds_text,
        "summary.json": json.dumps(summary, indent=2, allow_nan=False) + "\n",
        "plotdata/boxplot.csv": box,
        "plotdata/decoy_histogram.csv": hist,
        "schema.json": json.dumps(SCHEMA, indent=2) + "\n",
        "config.json": json.dumps(plan_to_dict(plan), indent=2, sort_keys=True) + "\n",
        "manifest.json": json.dumps(manifest.as_dict(), indent=2) + "\n",
    }
    written = []
    for name, text in files.items():
        _write(out / name, text)
        written.append(out / name)
    return written


def summary_from_out_dir(out_dir) -> dict:
    """Recompute summary.json from a report directory's rounds.csv and config.json."""
    out = Path(out_dir)
    cfg = json.loads((out / "config.json").read_text(encoding="utf-8"))
    settings = {k: cfg[k] for k in ("alpha", "coverage", "persistent_rounds", "key_rate", "n_nu_min", "s_y0_min",
                                    "round_target")}
    return summary_from_csv((out / "rounds.csv").read_text(encoding="utf-8"), settings)
