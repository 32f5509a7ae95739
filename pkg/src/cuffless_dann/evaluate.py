"""Accuracy metrics, agreement statistics, the ISO gate and the gap study."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from .dataio import BeatRecord, Gap, gap_filter
from .errors import InputError, TrainingError

ISO_THRESHOLD_MMHG = 10.0
ISO_REQUIRED_PCT = 85.0
LOA_MULTIPLIER = 1.96

# Gap lower bounds used for position sweeps (mmHg).
DBP_GAP_STARTS = (55, 65, 70, 75, 80, 85)
SBP_GAP_STARTS = tuple(range(90, 150, 5))
DBP_GAP_SIZES = (3, 5, 7, 10)
SBP_GAP_SIZES = (5, 6, 7, 10)


def _pair(pred, target, min_len=1):
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if pred.shape != target.shape:
        raise InputError(f"length mismatch: {pred.size} predictions vs {target.size} targets")
    if pred.size < min_len:
        raise InputError(f"need at least {min_len} samples, got {pred.size}")
    return pred, target


def rmse(pred, target) -> float:
    pred, target = _pair(pred, target)
    return float(np.sqrt(np.mean((pred - target) ** 2)))


class PearsonResult(NamedTuple):
    r: float
    degenerate: bool


def pearson_r(x, y) -> PearsonResult:
    """Sample correlation; a constant input gives ``r = 0`` flagged degenerate."""
    x, y = _pair(x, y, min_len=2)
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    denom = np.sqrt(sxx) * np.sqrt(syy)  # separate roots avoid underflow of the product
    if denom == 0.0:
        return PearsonResult(0.0, True)
    r = float(dx @ dy) / denom
    return PearsonResult(float(np.clip(r, -1.0, 1.0)), False)


@dataclass
class BlandAltman:
    bias: float
    sd: float
    lower: float
    upper: float
    pct_within_10: float
    n: int


def bland_altman(pred, target) -> BlandAltman:
    """Agreement of ``pred`` against ``target`` with differences ``pred - target``."""
    pred, target = _pair(pred, target, min_len=2)
    d = pred - target
    bias = float(d.mean())
    sd = float(d.std(ddof=1))
    within = 100.0 * np.count_nonzero(np.abs(d) < ISO_THRESHOLD_MMHG) / d.size
    return BlandAltman(bias, sd, bias - LOA_MULTIPLIER * sd, bias + LOA_MULTIPLIER * sd, float(within), d.size)


class IsoVerdict(NamedTuple):
    dbp_pass: bool
    sbp_pass: bool
    passed: bool


def iso_gate(dbp_pct: float, sbp_pct: float) -> IsoVerdict:
    d = dbp_pct >= ISO_REQUIRED_PCT
    s = sbp_pct >= ISO_REQUIRED_PCT
    return IsoVerdict(d, s, d and s)


@dataclass
class MetricsReport:
    dbp_rmse: float
    sbp_rmse: float
    dbp_r: float
    sbp_r: float
    n: int
    dbp_agreement: BlandAltman | None = None
    sbp_agreement: BlandAltman | None = None
    degenerate: tuple[bool, bool] = (False, False)

    @property
    def iso(self) -> IsoVerdict | None:
        if self.dbp_agreement is None or self.sbp_agreement is None:
            return None
        return iso_gate(self.dbp_agreement.pct_within_10, self.sbp_agreement.pct_within_10)


def metrics_report(pred_mmhg: np.ndarray, target_mmhg: np.ndarray) -> MetricsReport:
    """All per-pressure metrics from ``(N, 2)`` arrays in mmHg (dbp, sbp)."""
    pred_mmhg = np.asarray(pred_mmhg, dtype=np.float64).reshape(-1, 2)
    target_mmhg = np.asarray(target_mmhg, dtype=np.float64).reshape(-1, 2)
    if pred_mmhg.shape != target_mmhg.shape:
        raise InputError("prediction and target arrays differ in shape")
    rd = pearson_r(pred_mmhg[:, 0], target_mmhg[:, 0])
    rs = pearson_r(pred_mmhg[:, 1], target_mmhg[:, 1])
    return MetricsReport(
        dbp_rmse=rmse(pred_mmhg[:, 0], target_mmhg[:, 0]),
        sbp_rmse=rmse(pred_mmhg[:, 1], target_mmhg[:, 1]),
        dbp_r=rd.r,
        sbp_r=rs.r,
        n=len(pred_mmhg),
        dbp_agreement=bland_altman(pred_mmhg[:, 0], target_mmhg[:, 0]),
        sbp_agreement=bland_altman(pred_mmhg[:, 1], target_mmhg[:, 1]),
        degenerate=(rd.degenerate, rs.degenerate),
    )


def write_bland_altman_csv(path, pred, target) -> Path:
    """Plot data: one row per sample with ``mean_of_pair`` and ``difference``."""
    pred, target = _pair(pred, target)
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mean_of_pair", "difference"])
        for p, t in zip(pred, target):
            w.writerow([repr(float((p + t) / 2.0)), repr(float(p - t))])
    return path


# --------------------------------------------------------------------------
# Gap study
# --------------------------------------------------------------------------


@dataclass
class GapReport:
    gap: Gap
    overall_rmse: float | None
    in_gap_rmse: float | None
    n_test: int
    n_in_gap: int
    n_train: int
    error: str = ""


def gap_positions(which: str, size: float, labels: np.ndarray | None = None) -> list[Gap]:
    """Gaps of ``size`` mmHg at the standard start points.

    With ``labels`` given, only gaps that lie strictly inside the label range
    are kept (a subject whose pressure never reaches a gap is not tested on it).
    """
    starts = DBP_GAP_STARTS if which == "dbp" else SBP_GAP_STARTS
    gaps = [Gap(which, float(s), float(s + size)) for s in starts]
    if labels is not None:
        labels = np.asarray(labels)
        gaps = [g for g in gaps if labels.min() < g.lo and labels.max() >= g.hi]
    return gaps


def gap_study(
    trainer: Callable[[list[BeatRecord]], Callable[[list[BeatRecord]], np.ndarray]],
    train: list[BeatRecord],
    test: list[BeatRecord],
    gaps: list[Gap],
) -> list[GapReport]:
    """Retrain without each gap's training beats and score on the full test set.

    ``trainer(train_beats)`` must return a predictor mapping beats to ``(N, 2)``
    mmHg predictions. A gap that empties the training set, or whose training
    fails, is reported with ``error`` set instead of raising.
    """
    target = np.array([[b.dbp, b.sbp] for b in test])
    reports = []
    for gap in gaps:
        kept = gap_filter(train, gap)
        col = 0 if gap.which == "dbp" else 1
        in_gap = gap.contains(target[:, col])
        if not kept:
            reports.append(GapReport(gap, None, None, len(test), int(in_gap.sum()), 0, "gap removes every training beat"))
            continue
        try:
            predict = trainer(kept)
            pred = predict(test)
        except (TrainingError, InputError) as exc:
            reports.append(GapReport(gap, None, None, len(test), int(in_gap.sum()), len(kept), str(exc)))
            continue
        overall = rmse(pred[:, col], target[:, col])
        inside = rmse(pred[in_gap, col], target[in_gap, col]) if in_gap.any() else None
        reports.append(GapReport(gap, overall, inside, len(test), int(in_gap.sum()), len(kept)))
    return reports


def average_gap_reports(reports: list[GapReport]) -> tuple[float | None, float | None]:
    """Mean overall and in-gap RMSE across gap positions (absent values skipped)."""
    overall = [r.overall_rmse for r in reports if r.overall_rmse is not None]
    inside = [r.in_gap_rmse for r in reports if r.in_gap_rmse is not None]
    return (float(np.mean(overall)) if overall else None, float(np.mean(inside)) if inside else None)


GAP_CSV_HEADER = ("subject", "gap_type", "gap_lo", "gap_hi", "gap_size", "overall_rmse", "in_gap_rmse", "n_in_gap", "n_train", "error")


def write_gap_csv(path, rows: list[tuple[str, GapReport]]) -> Path:
    fmt = lambda v: "" if v is None else repr(float(v))
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GAP_CSV_HEADER)
        for subject, r in rows:
            w.writerow(
                [subject, r.gap.which.upper(), fmt(r.gap.lo), fmt(r.gap.hi), fmt(r.gap.hi - r.gap.lo),
                 fmt(r.overall_rmse), fmt(r.in_gap_rmse), r.n_in_gap, r.n_train, r.error]
            )
    return path
