"""Bag-level AUC, precursor extraction, localization metrics and explanation files."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError, UndefinedMetricError

DEFAULT_DELTA = 0.5


def auc(scores, labels) -> float:
    """Mann-Whitney AUC from average ranks; tied pairs get half credit."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"{len(s)} scores for {len(y)} labels")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    ranks = rankdata(s)
    # rank sums of ties are exact multiples of 0.5, so this is exact for any realistic size
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def check_delta(delta: float) -> float:
    delta = float(delta)
    if not 0.0 < delta < 1.0:
        raise ConfigError(f"delta must lie strictly between 0 and 1, got {delta}")
    return delta


def extract_precursors(p, mask=None, delta: float = DEFAULT_DELTA) -> tuple[np.ndarray, int]:
    """Steps with p_t > delta among the valid ones, plus the earliest argmax."""
    delta = check_delta(delta)
    p = np.asarray(p, dtype=np.float64)
    valid = np.ones(len(p), bool) if mask is None else np.asarray(mask, bool)
    q = np.where(valid, p, -np.inf)
    return np.flatnonzero(valid & (p > delta)), int(np.argmax(q))


@dataclass
class PrecursorReport:
    flight_id: int
    p: np.ndarray
    delta: float
    precursors: np.ndarray
    argmax_step: int
    checkpoint_step: int | None = None
    truth_windows: list = field(default_factory=list)
    excerpts: dict = field(default_factory=dict)

    @classmethod
    def build(cls, flight_id, p, delta=DEFAULT_DELTA, checkpoint_step=None, truth_windows=(), excerpts=None):
        p = np.asarray(p, dtype=np.float64)
        pre, am = extract_precursors(p, None, delta)
        return cls(flight_id, p, float(delta), pre, am, checkpoint_step, [tuple(w) for w in truth_windows],
                   dict(excerpts or {}))

    def truth_mask(self) -> np.ndarray:
        m = np.zeros(len(self.p), bool)
        for s, e, *_ in self.truth_windows:
            m[s:e + 1] = True
        return m


def localization_metrics(reports) -> tuple[float, float]:
    """(hit_rate, separation) over reports that carry truth windows.

    A hit is an argmax inside a truth window or anywhere from the earliest
    window start up to the checkpoint.  Separation pools every flight's steps:
    mean p inside windows minus mean p outside windows but before the checkpoint.
    """
    hits = []
    inside, outside = [], []
    for r in reports:
        if not r.truth_windows:
            continue
        tm = r.truth_mask()
        start = min(w[0] for w in r.truth_windows)
        cp = r.checkpoint_step if r.checkpoint_step is not None else len(r.p) - 1
        hits.append(bool(tm[r.argmax_step] or start <= r.argmax_step <= cp))
        inside.append(r.p[tm])
        before = np.arange(len(r.p)) <= cp
        outside.append(r.p[~tm & before])
    if not hits:
        raise UndefinedMetricError("no flights with truth windows to localize against")
    inside = np.concatenate(inside)
    outside = np.concatenate(outside)
    if len(inside) == 0 or len(outside) == 0:
        raise UndefinedMetricError("separation needs steps both inside and outside truth windows")
    return float(np.mean(hits)), float(inside.mean() - outside.mean())


@dataclass
class EvalSummary:
    split: str
    n: int
    auc: float | None
    tp: int
    fp: int
    tn: int
    fn: int
    hit_rate: float | None = None
    separation: float | None = None
    instance_auc: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def confusion(y_hat, labels, threshold: float = 0.5) -> tuple[int, int, int, int]:
    pred = np.asarray(y_hat) > threshold
    y = np.asarray(labels).astype(bool)
    return int((pred & y).sum()), int((pred & ~y).sum()), int((~pred & ~y).sum()), int((~pred & y).sum())


def evaluate_split(split: str, y_hat, labels, p=None, mask=None, records=None,
                   delta: float = DEFAULT_DELTA, strict: bool = True) -> EvalSummary:
    """Bag AUC and confusion counts; localization too when instance traces and records are given.

    With ``strict`` a single-class split raises; otherwise its AUC is reported as None.
    """
    labels = np.asarray(labels)
    try:
        a = auc(y_hat, labels)
    except UndefinedMetricError:
        if strict:
            raise
        a = None
    tp, fp, tn, fn = confusion(y_hat, labels)
    summary = EvalSummary(split, len(labels), a, tp, fp, tn, fn)
    if p is not None and records is not None:
        reports = []
        for i, rec in enumerate(records):
            if rec.label != 1:
                continue
            n = int(mask[i].sum())
            reports.append(PrecursorReport.build(rec.id, p[i, :n], delta, rec.checkpoint_step, rec.truth_windows))
        if any(r.truth_windows for r in reports):
            summary.hit_rate, summary.separation = localization_metrics(reports)
        peaks = np.where(mask, p, -np.inf).max(axis=1)
        try:
            summary.instance_auc = auc(peaks, labels)
        except UndefinedMetricError:
            summary.instance_auc = None
    return summary


EXPLAIN_BASE = ("step", "distance_nm", "altitude")
EXPLAIN_TAIL = ("p_t", "precursor", "truth")


def emit_explanation(record, report: PrecursorReport, path, channels=("speed_reference", "engine_n1",
                                                                      "flap_setting", "autopilot")) -> Path:
    """Write one row per step: position, selected raw channels, p_t and the two flags."""
    cols = [record.channel(c) for c in channels]  # raises ConfigError on unknown names
    if len(report.p) != record.L:
        raise ConfigError(f"report has {len(report.p)} steps, flight {record.id} has {record.L}")
    pre = np.zeros(record.L, bool)
    pre[report.precursors] = True
    truth = report.truth_mask()
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EXPLAIN_BASE + tuple(channels) + EXPLAIN_TAIL)
        alt = record.channel("altitude")
        for t in range(record.L):
            w.writerow([t, repr(float(record.distance_nm[t])), repr(float(alt[t]))]
                       + [repr(float(c[t])) for c in cols]
                       + [repr(float(report.p[t])), int(pre[t]), int(truth[t])])
    return path


def flap_timing(records, margin_nm: float = 1.0) -> dict:
    """Final-flap distance relative to the checkpoint, grouped by label."""
    out = {0: [], 1: []}
    for r in records:
        out[int(r.label)].append(r.final_flap_distance() - float(r.distance_nm[r.checkpoint_step]))
    early = {k: (float(np.mean(np.asarray(v) >= margin_nm - 1e-9)) if v else float("nan")) for k, v in out.items()}
    return {"lead_nm": out, "early_fraction": early}


def emit_flap_timing(records, path, margin_nm: float = 1.0) -> dict:
    """CSV of (flight_id, label, final_flap_nm, lead_nm, early) rows; returns the per-label early fraction."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("flight_id", "label", "final_flap_nm", "lead_nm", "early"))
        for r in records:
            d = r.final_flap_distance()
            lead = d - float(r.distance_nm[r.checkpoint_step])
            w.writerow([r.id, r.label, repr(d), repr(lead), int(lead >= margin_nm - 1e-9)])
    return flap_timing(records, margin_nm)["early_fraction"]
