import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cuffless_dann.dataio import N_FEATURES, BeatRecord, Gap, Normalizer
from cuffless_dann.errors import InputError, TrainingError
from cuffless_dann.evaluate import (
    DBP_GAP_SIZES,
    GAP_CSV_HEADER,
    SBP_GAP_SIZES,
    SBP_GAP_STARTS,
    average_gap_reports,
    bland_altman,
    gap_positions,
    gap_study,
    iso_gate,
    metrics_report,
    pearson_r,
    rmse,
    write_bland_altman_csv,
    write_gap_csv,
)

from oracles import brute_bland_altman, brute_iso, brute_pearson, brute_rmse

finite = st.floats(-300, 300, allow_nan=False)


# --------------------------------------------------------------------------
# examples
# --------------------------------------------------------------------------


def test_rmse_examples():
    assert rmse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert rmse([0, 0], [3, 4]) == pytest.approx(math.sqrt(12.5), abs=1e-12)
    assert rmse([0, 0], [3, 4]) == pytest.approx(3.5355, abs=1e-4)


def test_rmse_errors():
    with pytest.raises(InputError):
        rmse([], [])
    with pytest.raises(InputError):
        rmse([1, 2], [1])


def test_pearson_examples():
    x = np.arange(10.0)
    assert pearson_r(x, 2 * x + 1).r == pytest.approx(1.0, abs=1e-12)
    assert pearson_r(x, -x).r == pytest.approx(-1.0, abs=1e-12)
    res = pearson_r(np.full(5, 3.0), np.arange(5.0))
    assert res.r == 0.0 and res.degenerate
    assert not pearson_r(x, x**2).degenerate
    with pytest.raises(InputError):
        pearson_r([1.0], [2.0])


def test_bland_altman_examples():
    ba = bland_altman([80, 90, 100], [80, 90, 100])
    assert (ba.bias, ba.lower, ba.upper, ba.pct_within_10) == (0.0, 0.0, 0.0, 100.0)
    target = np.zeros(4)
    assert bland_altman(np.array([5, 12, 3, 9.0]), target).pct_within_10 == 75.0
    assert bland_altman([10.0, 0.0], [0.0, 0.0]).pct_within_10 == 50.0  # |e| = 10 is outside
    with pytest.raises(InputError):
        bland_altman([1.0], [1.0])


def test_bland_altman_sign_is_pred_minus_target():
    assert bland_altman([12.0, 14.0], [10.0, 10.0]).bias == 3.0


@pytest.mark.parametrize(
    "dbp,sbp,d_ok,s_ok,ok",
    [
        (96.1, 85.2, True, True, True),
        (96.0, 84.5, True, False, False),
        (85.0, 85.0, True, True, True),
        (84.9, 99.0, False, True, False),
    ],
)
def test_iso_gate_examples(dbp, sbp, d_ok, s_ok, ok):
    assert tuple(iso_gate(dbp, sbp)) == (d_ok, s_ok, ok)


def test_metrics_report_fields():
    rng = np.random.default_rng(0)
    target = np.column_stack([rng.uniform(60, 90, 50), rng.uniform(100, 150, 50)])
    pred = target + rng.normal(scale=[2.0, 4.0], size=target.shape)
    rep = metrics_report(pred, target)
    assert rep.n == 50
    assert rep.dbp_rmse == pytest.approx(brute_rmse(pred[:, 0], target[:, 0]), abs=1e-12)
    assert rep.sbp_r == pytest.approx(brute_pearson(pred[:, 1], target[:, 1]), abs=1e-12)
    assert rep.iso.passed
    assert rep.dbp_agreement.lower <= rep.dbp_agreement.bias <= rep.dbp_agreement.upper
    with pytest.raises(InputError):
        metrics_report(pred[:10], target[:11])


def test_metrics_in_normalized_space_rescale_by_label_range():
    rng = np.random.default_rng(1)
    n = Normalizer(np.zeros(N_FEATURES), np.ones(N_FEATURES), np.array([55.0, 95.0]), np.array([95.0, 170.0]))
    target = np.column_stack([rng.uniform(60, 90, 40), rng.uniform(100, 160, 40)])
    pred = target + rng.normal(scale=3.0, size=target.shape)
    zp, zt = n.apply_labels(pred), n.apply_labels(target)
    span = n.label_max - n.label_min
    for c in range(2):
        assert rmse(pred[:, c], target[:, c]) == pytest.approx(span[c] * rmse(zp[:, c], zt[:, c]), rel=1e-12)


# --------------------------------------------------------------------------
# brute-force agreement and properties
# --------------------------------------------------------------------------


def test_metrics_match_brute_force_on_random_instances():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 40))
        p = rng.uniform(40, 200, n)
        t = p + rng.normal(scale=rng.uniform(0.1, 20), size=n)
        worst = max(worst, abs(rmse(p, t) - brute_rmse(p, t)))
        worst = max(worst, abs(pearson_r(p, t).r - brute_pearson(p, t)))
        ba = bland_altman(p, t)
        ref = brute_bland_altman(p, t)
        worst = max(worst, *(abs(a - b) for a, b in zip((ba.bias, ba.sd, ba.lower, ba.upper, ba.pct_within_10), ref)))
        dp, sp = rng.uniform(70, 100, 2)
        assert iso_gate(dp, sp).passed == brute_iso(dp, sp)
    assert worst <= 1e-9


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 100), st.floats(0, 100))
def test_iso_overall_iff_min_at_least_85(a, b):
    assert iso_gate(a, b).passed == (min(a, b) >= 85.0)
    assert iso_gate(a, b).passed == iso_gate(b, a).passed


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(2, 30), elements=finite), st.randoms(use_true_random=False))
def test_pct_within_10_is_permutation_invariant(d, rnd):
    target = np.zeros_like(d)
    perm = list(range(len(d)))
    rnd.shuffle(perm)
    assert bland_altman(d, target).pct_within_10 == bland_altman(d[perm], target).pct_within_10


@settings(max_examples=100, deadline=None)
@given(
    arrays(np.float64, st.integers(1, 30), elements=finite),
    st.floats(-10, 10).filter(lambda c: abs(c) > 1e-3),
)
def test_rmse_is_scale_equivariant(p, c):
    t = np.linspace(0, 1, len(p))
    assert rmse(c * p, c * t) == pytest.approx(abs(c) * rmse(p, t), rel=1e-9, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(2, 30), elements=finite), arrays(np.float64, 30, elements=finite))
def test_pearson_bounded(x, y):
    r = pearson_r(x, y[: len(x)])
    assert -1.0 <= r.r <= 1.0
    assert rmse(x, y[: len(x)]) >= 0.0


def test_bland_altman_csv(tmp_path):
    path = write_bland_altman_csv(tmp_path / "ba.csv", [82.0, 90.0], [80.0, 95.0])
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["mean_of_pair", "difference"]
    assert [tuple(map(float, r)) for r in rows[1:]] == [(81.0, 2.0), (92.5, -5.0)]


# --------------------------------------------------------------------------
# gap study
# --------------------------------------------------------------------------


def beat(dbp, sbp):
    return BeatRecord("A", np.zeros((2, N_FEATURES)), float(dbp), float(sbp))


def test_gap_sweep_lists():
    assert DBP_GAP_SIZES == (3, 5, 7, 10)
    assert SBP_GAP_SIZES == (5, 6, 7, 10)
    sbp = gap_positions("sbp", 6)
    assert (sbp[0].lo, sbp[0].hi) == (90, 96)
    assert (sbp[1].lo, sbp[1].hi) == (95, 101)
    assert (sbp[-1].lo, sbp[-1].hi) == (145, 151)
    assert len(sbp) == len(SBP_GAP_STARTS)
    assert Gap("sbp", 125, 131) in sbp


def test_gap_positions_filtered_by_label_range():
    kept = gap_positions("dbp", 5, np.array([62.0, 78.0]))
    assert [(g.lo, g.hi) for g in kept] == [(65, 70), (70, 75)]


class RecordingTrainer:
    """Predicts the mean training label; remembers what it was trained on."""

    def __init__(self):
        self.seen = []

    def __call__(self, kept):
        self.seen.append(kept)
        mean = np.mean([[b.dbp, b.sbp] for b in kept], axis=0)
        return lambda beats: np.tile(mean, (len(beats), 1))


def test_gap_study_mechanics():
    train = [beat(d, d + 45) for d in (60, 66, 71, 73, 80, 84)]
    test = [beat(d, d + 45) for d in (61, 70, 72, 74.9, 75, 82)]
    trainer = RecordingTrainer()
    gaps = [Gap("dbp", 70, 75), Gap("dbp", 90, 95)]
    reports = gap_study(trainer, train, test, gaps)
    assert [b.dbp for b in trainer.seen[0]] == [60, 66, 80, 84]
    assert trainer.seen[1] == train
    r = reports[0]
    assert (r.n_test, r.n_in_gap, r.n_train) == (6, 3, 4)
    target = np.array([61, 70, 72, 74.9, 75, 82])
    assert r.overall_rmse == pytest.approx(brute_rmse([72.5] * 6, target))
    assert r.in_gap_rmse == pytest.approx(brute_rmse([72.5] * 3, [70, 72, 74.9]))
    assert reports[1].in_gap_rmse is None and reports[1].n_in_gap == 0


def test_gap_study_records_failures():
    train = [beat(72, 120)]
    test = [beat(72, 120), beat(80, 130)]

    def failing(kept):
        raise TrainingError("diverged")

    empty = gap_study(RecordingTrainer(), train, test, [Gap("dbp", 70, 75)])[0]
    assert empty.error and empty.overall_rmse is None and empty.n_train == 0
    failed = gap_study(failing, train, test, [Gap("sbp", 140, 150)])[0]
    assert failed.error == "diverged" and failed.n_train == 1


def test_average_and_csv(tmp_path):
    train = [beat(d, d + 45) for d in (60, 66, 71, 73, 80, 84)]
    test = [beat(d, d + 45) for d in (61, 72, 82)]
    reports = gap_study(RecordingTrainer(), train, test, [Gap("dbp", 70, 75), Gap("dbp", 90, 95)])
    overall, inside = average_gap_reports(reports)
    assert overall == pytest.approx(np.mean([r.overall_rmse for r in reports]))
    assert inside == reports[0].in_gap_rmse
    assert average_gap_reports([]) == (None, None)
    path = write_gap_csv(tmp_path / "gap.csv", [("S1", r) for r in reports])
    rows = list(csv.DictReader(path.open()))
    assert tuple(rows[0]) == GAP_CSV_HEADER
    assert rows[0]["gap_type"] == "DBP" and float(rows[0]["gap_size"]) == 5.0
    assert rows[1]["in_gap_rmse"] == ""
