import json

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cuffless_dann.dataio import (
    N_FEATURES,
    BeatRecord,
    Episode,
    Gap,
    Normalizer,
    RawBeat,
    SubjectDataset,
    SyntheticSubjectSpec,
    _draw_episodes,
    apply_normalizer,
    budget_beats,
    budget_split,
    derive_features,
    downsample,
    fit_normalizer,
    fraction_split,
    gap_filter,
    generate_raw_beats,
    generate_subject,
    invert_normalizer,
    load_spec_file,
    pad_sequence,
    random_cohort_specs,
    read_dataset,
    read_subject_csv,
    stack_beats,
    write_dataset,
    write_subject_csv,
)
from cuffless_dann.errors import ConfigError, InputError, StateError
from cuffless_dann.model import DannNet, ModelConfig, extract_features


def record(dbp, sbp, length=3, value=0.0, subject="A"):
    return BeatRecord(subject, np.full((length, N_FEATURES), value), float(dbp), float(sbp))


def toy_subject(n, heart_rate=75.0, seed=0):
    rng = np.random.default_rng(seed)
    beats = [record(60 + rng.uniform(0, 20), 110 + rng.uniform(0, 30), value=k) for k in range(n)]
    return SubjectDataset("T", beats, heart_rate)


# --------------------------------------------------------------------------
# preprocessing
# --------------------------------------------------------------------------


def test_downsample_stride():
    npt.assert_array_equal(downsample(np.arange(10), 10, 5), [0, 2, 4, 6, 8])


def test_downsample_source_rate_beat_length():
    assert downsample(np.zeros(20000), 20000, 100).shape == (100,)
    npt.assert_array_equal(downsample(np.arange(400), 20000, 100), [0, 200])


def test_downsample_equal_rates_is_identity():
    x = np.arange(7.0)
    npt.assert_array_equal(downsample(x, 100, 100), x)


def test_downsample_rejects_non_divisible_rates():
    with pytest.raises(ConfigError):
        downsample(np.zeros(10), 250, 100)


def raw(ch, dbp=70.0, sbp=115.0):
    return RawBeat("A", np.asarray(ch, dtype=float), dbp, sbp)


def test_derive_features_layout():
    ch = np.array([[0, 1, 3, 3, 3], [2] * 5, [0, 1, 2, 3, 4], [5, 4, 3, 2, 1]], dtype=float)
    rec = derive_features(raw(ch))
    assert rec.features.shape == (5, N_FEATURES)
    npt.assert_array_equal(rec.features[:, :4], ch.T)
    npt.assert_array_equal(rec.features[:3, 4], [1, 1, 2])
    npt.assert_array_equal(rec.features[:, 5], 0.0)
    npt.assert_array_equal(rec.features[:, 6], 1.0)  # linear channel has constant derivative
    npt.assert_allclose(rec.features[:, 8], [0, 0.2, 0.4, 0.6, 0.8])


def test_derive_features_is_deterministic():
    ch = np.random.default_rng(0).normal(size=(4, 30))
    a, b = derive_features(raw(ch)), derive_features(raw(ch))
    assert a.features.tobytes() == b.features.tobytes()


def test_derive_features_needs_two_samples():
    with pytest.raises(InputError):
        derive_features(raw(np.zeros((4, 1))))


def test_raw_beat_label_checks():
    with pytest.raises(InputError):
        raw(np.zeros((4, 3)), dbp=120.0, sbp=80.0)
    with pytest.raises(InputError):
        raw(np.zeros((4, 3)), dbp=20.0, sbp=80.0)
    with pytest.raises(InputError):
        RawBeat("A", np.zeros((3, 5)), 70.0, 110.0)


def test_pad_sequence():
    rec = record(70, 110, length=3, value=1.0)
    padded = pad_sequence(rec, 5)
    assert padded.features.shape == (5, N_FEATURES)
    assert not padded.features[:2].any()
    npt.assert_array_equal(padded.features[2:], rec.features)
    assert (padded.dbp, padded.sbp) == (70, 110)
    assert pad_sequence(rec, 3) is rec
    with pytest.raises(InputError):
        pad_sequence(rec, 2)


def test_zero_padding_is_a_fixed_point_of_bias_free_lstm():
    # with zero biases a zero input row keeps a zero state at zero
    net = DannNet.init(ModelConfig(lstm_hidden=4, shared_width=3, head_hidden=3, domain_hidden=3), np.random.default_rng(0))
    net.fe.lstm.bias[:] = 0.0
    x = np.zeros((1, 6, N_FEATURES))
    x[0, 4:] = 0.7
    feats, _ = extract_features(net.fe, x)
    unpadded, _ = extract_features(net.fe, x[:, 4:])
    npt.assert_array_equal(feats, unpadded)


# --------------------------------------------------------------------------
# normalizer
# --------------------------------------------------------------------------


def test_normalizer_min_max_formula():
    beats = [record(60 + k, 110 + 5 * k, length=1, value=2 + k) for k in range(5)]
    n = fit_normalizer(beats)
    assert apply_normalizer(n, features=np.full((1, N_FEATURES), 4.0))[0, 0] == 0.5
    z = apply_normalizer(n, features=np.vstack([b.features for b in beats]))
    npt.assert_array_equal(z[:, 0].min(), 0.0)
    npt.assert_array_equal(z[:, 0].max(), 1.0)
    assert apply_normalizer(n, features=np.full((1, N_FEATURES), 10.0))[0, 0] == 2.0  # not clipped


def test_normalizer_label_example():
    n = Normalizer(np.zeros(N_FEATURES), np.ones(N_FEATURES), np.array([60.0, 100.0]), np.array([110.0, 150.0]))
    npt.assert_allclose(apply_normalizer(n, labels=np.array([80.0, 100.0])), [0.4, 0.0])


def test_normalizer_constant_column_maps_to_zero():
    beats = [record(70, 110, value=3.0), record(75, 120, value=3.0)]
    n = fit_normalizer(beats)
    out = apply_normalizer(n, features=np.full((2, N_FEATURES), 3.0))
    npt.assert_array_equal(out, 0.0)


def test_normalizer_unfitted_and_empty():
    with pytest.raises(StateError):
        apply_normalizer(Normalizer(), features=np.zeros((1, N_FEATURES)))
    with pytest.raises(InputError):
        fit_normalizer([])


@settings(max_examples=100, deadline=None)
@given(
    arrays(np.float64, (6, N_FEATURES), elements=st.floats(-1e3, 1e3)),
    arrays(np.float64, (4, N_FEATURES), elements=st.floats(-1e3, 1e3)),
)
def test_normalizer_round_trip(train_rows, data):
    beats = [BeatRecord("A", train_rows[:3], 60.0, 100.0), BeatRecord("A", train_rows[3:], 90.0, 160.0)]
    n = fit_normalizer(beats)
    span = n.feat_max - n.feat_min
    back = invert_normalizer(n, features=apply_normalizer(n, features=data))
    live = span > 0
    assert np.max(np.abs(back[:, live] - data[:, live]), initial=0.0) <= 1e-9
    labels = np.array([[70.0, 130.0], [55.5, 170.25]])
    npt.assert_allclose(invert_normalizer(n, labels=apply_normalizer(n, labels=labels)), labels, atol=1e-9, rtol=0)


def test_normalizer_dict_round_trip():
    n = fit_normalizer([record(60, 100, value=1.0), record(80, 140, value=2.0)])
    m = Normalizer.from_dict(json.loads(json.dumps(n.to_dict())))
    for k in ("feat_min", "feat_max", "label_min", "label_max"):
        npt.assert_array_equal(getattr(n, k), getattr(m, k))


def test_stack_beats_pads_after_scaling():
    beats = [record(60, 100, length=2, value=5.0), record(80, 140, length=4, value=7.0)]
    n = fit_normalizer(beats)
    x, y = stack_beats(beats, 5, n)
    assert x.shape == (2, 5, N_FEATURES)
    assert not x[0, :3].any()  # padded rows are exactly zero, not -min/span
    npt.assert_array_equal(x[1, 1:], 1.0)
    npt.assert_array_equal(y, [[0.0, 0.0], [1.0, 1.0]])
    with pytest.raises(InputError):
        stack_beats(beats, 3, n)


# --------------------------------------------------------------------------
# splits and gaps
# --------------------------------------------------------------------------


def test_budget_four_minutes_at_75_bpm():
    assert budget_beats(75.0, 4) == 300
    train, test = budget_split(toy_subject(400), 4)
    assert len(train) == 300 and len(test) == 100


def test_budget_zero_minutes():
    ds = toy_subject(10)
    train, test = budget_split(ds, 0)
    assert train == [] and test == ds.beats


def test_budget_exceeding_data():
    with pytest.raises(InputError):
        budget_split(toy_subject(10), 1)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 200), st.floats(40.0, 120.0), st.floats(0.0, 3.0), st.floats(0.0, 3.0))
def test_budget_split_partition(n, heart_rate, m1, m2):
    ds = toy_subject(n, heart_rate)
    lo, hi = sorted((m1, m2))
    for minutes in (lo, hi):
        if budget_beats(heart_rate, minutes) > n:
            with pytest.raises(InputError):
                budget_split(ds, minutes)
            return
    train_lo, _ = budget_split(ds, lo)
    train, test = budget_split(ds, hi)
    assert train + test == ds.beats  # union, disjointness and order in one check
    assert len(train) == budget_beats(heart_rate, hi)
    assert len(train_lo) <= len(train)
    assert train[: len(train_lo)] == train_lo


def test_fraction_split_shape():
    beats = toy_subject(100).beats
    a, b, c = fraction_split(beats, np.random.default_rng(0))
    assert (len(a), len(b), len(c)) == (80, 10, 10)
    ids = sorted(id(x) for x in a + b + c)
    assert ids == sorted(id(x) for x in beats)


def test_gap_filter_half_open():
    beats = [record(72, 120), record(75, 120), record(70, 121), record(69.9, 140)]
    kept = gap_filter(beats, Gap("dbp", 70, 75))
    assert [b.dbp for b in kept] == [75, 69.9]


def test_gap_filter_sbp_configuration():
    beats = [record(70, s) for s in (124.9, 125, 128, 130.99, 131)]
    assert [b.sbp for b in gap_filter(beats, Gap("sbp", 125, 131))] == [124.9, 131]


def test_gap_filter_outside_range_is_noop():
    beats = [record(70, 120), record(72, 125)]
    assert gap_filter(beats, Gap("dbp", 90, 95)) == beats


def test_gap_validation():
    with pytest.raises(ConfigError):
        Gap("dbp", 75, 70)
    with pytest.raises(ConfigError):
        Gap("map", 70, 75)


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.tuples(st.floats(40, 100), st.floats(0, 80)), min_size=0, max_size=40),
    st.sampled_from(["dbp", "sbp"]),
    st.floats(40, 180),
    st.floats(0.5, 20),
)
def test_gap_filter_property(pairs, which, lo, size):
    beats = [record(d, d + 5 + s) for d, s in pairs]
    gap = Gap(which, lo, lo + size)
    kept = gap_filter(beats, gap)
    values = np.array([gap.label_of(b) for b in kept])
    assert not gap.contains(values).any()
    assert len(kept) == int((~gap.contains([gap.label_of(b) for b in beats])).sum()) if beats else kept == []
    assert all(any(k is b for b in beats) for k in kept)


# --------------------------------------------------------------------------
# synthetic subjects
# --------------------------------------------------------------------------


def small_spec(**kw):
    base = dict(seed=11, subject_id="X", beat_count=60)
    base.update(kw)
    return SyntheticSubjectSpec(**base)


def test_generate_subject_deterministic():
    a, b = generate_subject(small_spec()), generate_subject(small_spec())
    assert len(a) == len(b) == 60
    for x, y in zip(a.beats, b.beats):
        assert x.features.tobytes() == y.features.tobytes()
        assert (x.dbp, x.sbp) == (y.dbp, y.sbp)


def test_generate_dbp_below_sbp():
    for spec in random_cohort_specs(3, 5, beat_count=200):
        labels = generate_subject(spec).labels()
        assert (labels[:, 0] < labels[:, 1]).all()


def test_equal_latent_bp_gives_identical_noiseless_beats():
    episodes = [Episode(10, 20, 30.0)]
    kw = dict(noise=0.0, label_noise=0.0, wander=0.0, episodes=episodes, beat_count=40, heart_rate=72.0)
    a = generate_raw_beats(SyntheticSubjectSpec(seed=1, subject_id="A", **kw))
    b = generate_raw_beats(SyntheticSubjectSpec(seed=2, subject_id="B", **kw))
    for x, y in zip(a, b):
        npt.assert_array_equal(x.channels, y.channels)


def test_waveform_tracks_pressure():
    # higher pressure shortens the beat and moves the channel levels monotonically
    kw = dict(noise=0.0, label_noise=0.0, wander=0.0, beat_count=80, heart_rate=70.0)
    beats = generate_raw_beats(SyntheticSubjectSpec(seed=3, episodes=[Episode(20, 40, 45.0)], **kw))
    rest, peak = beats[0], beats[40]
    assert peak.sbp > rest.sbp + 30
    assert peak.channels.shape[1] < rest.channels.shape[1]
    assert peak.channels.min() < rest.channels.min()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(50, 2000))
def test_episodes_span_the_recording(seed, n):
    eps = _draw_episodes(np.random.default_rng(seed), n)
    assert eps and eps[0].start < 0.15 * n
    assert all(25.0 <= e.amplitude <= 50.0 for e in eps)
    assert all(a.start + a.duration < b.start for a, b in zip(eps, eps[1:]))
    assert eps[-1].start + eps[-1].duration >= 0.8 * n - 1


def test_spec_validation():
    with pytest.raises(ConfigError):
        SyntheticSubjectSpec(seed=0, gains=(1, 1, 1))
    with pytest.raises(ConfigError):
        SyntheticSubjectSpec(seed=0, gains=(1, 1, 0, 1))
    with pytest.raises(ConfigError):
        SyntheticSubjectSpec.from_dict({"seed": 0, "colour": "red"})
    with pytest.raises(ConfigError):
        SyntheticSubjectSpec.from_dict({"gains": [1, 1, 1, 1]})


def test_spec_dict_round_trip():
    spec = small_spec(episodes=[Episode(5, 10, 20.0)])
    again = SyntheticSubjectSpec.from_dict(json.loads(json.dumps(spec.to_dict())))
    assert again == spec


def test_load_spec_file_forms(tmp_path):
    p = tmp_path / "cohort.json"
    p.write_text(json.dumps({"schema_version": 1, "cohort": {"n_subjects": 11, "seed": 4, "beat_count": 50}}))
    specs = load_spec_file(p)
    assert len(specs) == 11 and len({s.subject_id for s in specs}) == 11
    p.write_text(json.dumps({"schema_version": 1, "subjects": [{"seed": 1, "subject_id": "A"}]}))
    assert load_spec_file(p)[0].subject_id == "A"


@pytest.mark.parametrize(
    "doc",
    [
        "not json",
        json.dumps({"cohort": {"n_subjects": 2, "seed": 0}}),
        json.dumps({"schema_version": 1}),
        json.dumps({"schema_version": 1, "subjects": [{"seed": 1, "subject_id": "A"}, {"seed": 2, "subject_id": "A"}]}),
        json.dumps({"schema_version": 1, "cohort": {"seed": 0}}),
    ],
)
def test_load_spec_file_rejects(tmp_path, doc):
    p = tmp_path / "bad.json"
    p.write_text(doc)
    with pytest.raises(ConfigError):
        load_spec_file(p)


# --------------------------------------------------------------------------
# CSV files
# --------------------------------------------------------------------------


def test_subject_csv_round_trip(tmp_path):
    ds = generate_subject(small_spec(beat_count=20))
    back = read_subject_csv(write_subject_csv(ds, tmp_path / "X.csv"), heart_rate=ds.heart_rate)
    assert back.subject_id == "X" and len(back) == 20
    for a, b in zip(ds.beats, back.beats):
        assert a.features.tobytes() == b.features.tobytes()
        assert (a.dbp, a.sbp) == (b.dbp, b.sbp)


def test_subject_csv_bad_header(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(InputError):
        read_subject_csv(p)


def test_dataset_directory_round_trip(tmp_path):
    subjects = [generate_subject(s) for s in random_cohort_specs(2, 0, beat_count=15)]
    manifest = write_dataset(subjects, tmp_path / "data")
    doc = json.loads(manifest.read_text())
    assert doc["max_len"] == max(s.max_len for s in subjects)
    back = read_dataset(tmp_path / "data")
    assert [s.subject_id for s in back] == ["S01", "S02"]
    assert [s.heart_rate for s in back] == [s.heart_rate for s in subjects]


def test_read_dataset_missing(tmp_path):
    with pytest.raises(InputError):
        read_dataset(tmp_path / "nope")
