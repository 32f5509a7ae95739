"""Beat records, preprocessing, synthetic subjects and dataset files."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError, StateError

N_CHANNELS = 4
N_FEATURES = 9
TARGET_RATE = 100
BP_RANGE = (30.0, 250.0)
SPEC_SCHEMA_VERSION = 1
CSV_HEADER = ("subject_id", "beat_index", "t_index", "ch1", "ch2", "ch3", "ch4", "dbp", "sbp")


def validate_labels(dbp: float, sbp: float) -> None:
    lo, hi = BP_RANGE
    if not (lo <= dbp <= hi and lo <= sbp <= hi):
        raise InputError(f"blood pressure ({dbp}, {sbp}) outside physiological range {BP_RANGE}")
    if not dbp < sbp:
        raise InputError(f"diastolic {dbp} is not below systolic {sbp}")


@dataclass
class RawBeat:
    subject_id: str
    channels: np.ndarray  # (4, L)
    dbp: float
    sbp: float
    rate: int = TARGET_RATE

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float64)
        if self.channels.ndim != 2 or self.channels.shape[0] != N_CHANNELS:
            raise InputError(f"a raw beat needs {N_CHANNELS} equal-length channels, got {self.channels.shape}")
        validate_labels(self.dbp, self.sbp)


@dataclass
class BeatRecord:
    subject_id: str
    features: np.ndarray  # (T, 9)
    dbp: float
    sbp: float

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[1] != N_FEATURES:
            raise InputError(f"beat features must be (T, {N_FEATURES}), got {self.features.shape}")

    @property
    def length(self) -> int:
        return self.features.shape[0]

    @property
    def labels(self) -> np.ndarray:
        return np.array([self.dbp, self.sbp])


@dataclass
class SubjectDataset:
    subject_id: str
    beats: list[BeatRecord]
    heart_rate: float

    def __post_init__(self):
        if not self.beats:
            raise InputError(f"subject {self.subject_id} has no beats")

    def __len__(self) -> int:
        return len(self.beats)

    @property
    def max_len(self) -> int:
        return max(b.length for b in self.beats)

    def labels(self) -> np.ndarray:
        return np.array([[b.dbp, b.sbp] for b in self.beats])


# --------------------------------------------------------------------------
# Preprocessing
# --------------------------------------------------------------------------


def downsample(channel, src_rate: int, dst_rate: int) -> np.ndarray:
    """Keep every ``src_rate // dst_rate``-th sample, starting at index 0."""
    if dst_rate <= 0 or src_rate <= 0 or src_rate % dst_rate:
        raise ConfigError(f"source rate {src_rate} is not a multiple of target rate {dst_rate}")
    return np.asarray(channel)[..., :: src_rate // dst_rate]


def derive_features(beat: RawBeat) -> BeatRecord:
    """Raw channels, their forward differences and the per-beat phase t/T."""
    if beat.rate != TARGET_RATE:
        raise InputError(f"derive_features expects {TARGET_RATE} Hz beats, got {beat.rate} Hz")
    ch = beat.channels
    t_len = ch.shape[1]
    if t_len < 2:
        raise InputError("a beat needs at least two samples to differentiate")
    diff = np.diff(ch, axis=1)
    deriv = np.concatenate([diff[:, :1], diff], axis=1)
    phase = np.arange(t_len) / t_len
    feats = np.concatenate([ch, deriv, phase[None, :]], axis=0).T
    return BeatRecord(beat.subject_id, np.ascontiguousarray(feats), float(beat.dbp), float(beat.sbp))


def pad_sequence(record: BeatRecord, max_len: int) -> BeatRecord:
    """Prepend zero rows up to ``max_len``."""
    if record.length > max_len:
        raise InputError(f"record of length {record.length} exceeds max_len {max_len}")
    if record.length == max_len:
        return record
    pad = np.zeros((max_len - record.length, N_FEATURES))
    return BeatRecord(record.subject_id, np.vstack([pad, record.features]), record.dbp, record.sbp)


@dataclass
class Normalizer:
    """Per-column min/max scaling for features and (dbp, sbp) labels."""

    feat_min: np.ndarray | None = None
    feat_max: np.ndarray | None = None
    label_min: np.ndarray | None = None
    label_max: np.ndarray | None = None

    @property
    def fitted(self) -> bool:
        return self.feat_min is not None

    def _require(self):
        if not self.fitted:
            raise StateError("normalizer has not been fitted")

    @staticmethod
    def _scale(lo, hi):
        span = hi - lo
        # constant columns map to 0
        return np.where(span > 0, span, np.inf)

    def apply_features(self, x: np.ndarray) -> np.ndarray:
        self._require()
        return (x - self.feat_min) / self._scale(self.feat_min, self.feat_max)

    def apply_labels(self, y: np.ndarray) -> np.ndarray:
        self._require()
        return (y - self.label_min) / self._scale(self.label_min, self.label_max)

    def invert_features(self, x: np.ndarray) -> np.ndarray:
        self._require()
        return x * (self.feat_max - self.feat_min) + self.feat_min

    def invert_labels(self, y: np.ndarray) -> np.ndarray:
        self._require()
        return y * (self.label_max - self.label_min) + self.label_min

    def to_dict(self) -> dict:
        self._require()
        return {k: getattr(self, k).tolist() for k in ("feat_min", "feat_max", "label_min", "label_max")}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(**{k: np.asarray(d[k], dtype=np.float64) for k in ("feat_min", "feat_max", "label_min", "label_max")})


def fit_normalizer(train: list[BeatRecord]) -> Normalizer:
    """Min/max over every real (unpadded) timestep and every training label."""
    if not train:
        raise InputError("cannot fit a normalizer on an empty training set")
    rows = np.vstack([b.features for b in train])
    labels = np.array([[b.dbp, b.sbp] for b in train])
    return Normalizer(rows.min(axis=0), rows.max(axis=0), labels.min(axis=0), labels.max(axis=0))


def apply_normalizer(n: Normalizer, features=None, labels=None):
    """Scale features and/or labels; returns whichever were given."""
    out = []
    if features is not None:
        out.append(n.apply_features(np.asarray(features, dtype=np.float64)))
    if labels is not None:
        out.append(n.apply_labels(np.asarray(labels, dtype=np.float64)))
    return out[0] if len(out) == 1 else tuple(out)


def invert_normalizer(n: Normalizer, features=None, labels=None):
    out = []
    if features is not None:
        out.append(n.invert_features(np.asarray(features, dtype=np.float64)))
    if labels is not None:
        out.append(n.invert_labels(np.asarray(labels, dtype=np.float64)))
    return out[0] if len(out) == 1 else tuple(out)


def stack_beats(beats: list[BeatRecord], max_len: int, normalizer: Normalizer):
    """Normalize each beat, left-pad with zero rows and stack.

    Returns ``(x, y)`` with ``x`` of shape ``(N, max_len, 9)`` and normalized
    labels ``y`` of shape ``(N, 2)``. Padding happens after scaling so padded
    rows stay exactly zero.
    """
    x = np.zeros((len(beats), max_len, N_FEATURES))
    for k, b in enumerate(beats):
        if b.length > max_len:
            raise InputError(f"beat of length {b.length} exceeds max_len {max_len}")
        x[k, max_len - b.length :] = normalizer.apply_features(b.features)
    y = normalizer.apply_labels(np.array([[b.dbp, b.sbp] for b in beats]).reshape(-1, 2))
    return x, y


# --------------------------------------------------------------------------
# Splits
# --------------------------------------------------------------------------


def budget_beats(heart_rate: float, minutes: float) -> int:
    return int(math.floor(minutes * heart_rate + 1e-9))


def budget_split(ds: SubjectDataset, minutes: float):
    """Chronological prefix of ``floor(minutes * heart_rate)`` beats for training."""
    if minutes < 0:
        raise InputError("budget must be non-negative")
    n = budget_beats(ds.heart_rate, minutes)
    if n > len(ds.beats):
        raise InputError(
            f"subject {ds.subject_id}: budget of {minutes} min needs {n} beats, only {len(ds.beats)} available"
        )
    return ds.beats[:n], ds.beats[n:]


def fraction_split(beats: list[BeatRecord], rng: np.random.Generator, fractions=(0.8, 0.1, 0.1)):
    """Random train/validation/test split by fractions."""
    idx = rng.permutation(len(beats))
    n_train = int(round(fractions[0] * len(beats)))
    n_val = int(round(fractions[1] * len(beats)))
    pick = lambda ids: [beats[i] for i in sorted(ids)]
    return pick(idx[:n_train]), pick(idx[n_train : n_train + n_val]), pick(idx[n_train + n_val :])


@dataclass(frozen=True)
class Gap:
    which: str  # "dbp" or "sbp"
    lo: float
    hi: float

    def __post_init__(self):
        if self.which not in ("dbp", "sbp"):
            raise ConfigError(f"gap pressure must be 'dbp' or 'sbp', got {self.which!r}")
        if not self.lo < self.hi:
            raise ConfigError(f"gap bounds must satisfy lo < hi, got [{self.lo}, {self.hi})")

    def contains(self, values) -> np.ndarray:
        values = np.asarray(values)
        return (values >= self.lo) & (values < self.hi)

    def label_of(self, beat: BeatRecord) -> float:
        return beat.dbp if self.which == "dbp" else beat.sbp


def gap_filter(train: list[BeatRecord], gap: Gap) -> list[BeatRecord]:
    """Drop training beats whose selected label lies in ``[lo, hi)``."""
    return [b for b in train if not gap.lo <= gap.label_of(b) < gap.hi]


# --------------------------------------------------------------------------
# Synthetic subjects
# --------------------------------------------------------------------------

CHANNEL_DELAYS = (0.0, 0.012, 0.004, 0.018)  # s, relative arrival per electrode pair


@dataclass
class Episode:
    start: int  # beat index
    duration: int  # beats
    amplitude: float  # systolic rise at peak, mmHg


@dataclass
class SyntheticSubjectSpec:
    """Recipe for one synthetic subject.

    Every subject shares the same pressure-to-waveform map; subjects differ
    through per-channel gains/offsets, heart rate, noise and BP trajectory.
    ``episodes=None`` draws exercise episodes from ``seed``.
    """

    seed: int
    subject_id: str = ""
    gains: tuple = (1.0, 1.0, 1.0, 1.0)
    offsets: tuple = (0.0, 0.0, 0.0, 0.0)
    noise: float = 0.02
    heart_rate: float = 75.0
    beat_count: int = 800
    dbp_base: float = 68.0
    sbp_base: float = 110.0
    drift: float = 0.0
    wander: float = 1.5
    label_noise: float = 1.0
    episodes: list | None = None
    source_rate: int = 1000

    def __post_init__(self):
        if len(self.gains) != N_CHANNELS or len(self.offsets) != N_CHANNELS:
            raise ConfigError("gains and offsets need one value per channel")
        if any(g <= 0 for g in self.gains):
            raise ConfigError("channel gains must be positive")
        if self.noise < 0 or self.label_noise < 0 or self.wander < 0:
            raise ConfigError("noise levels must be non-negative")
        if self.heart_rate <= 0 or self.beat_count < 2:
            raise ConfigError("heart_rate must be positive and beat_count at least 2")
        if self.source_rate % TARGET_RATE:
            raise ConfigError(f"source_rate must be a multiple of {TARGET_RATE}")
        if self.episodes is not None:
            self.episodes = [e if isinstance(e, Episode) else Episode(**e) for e in self.episodes]
        self.gains = tuple(float(g) for g in self.gains)
        self.offsets = tuple(float(o) for o in self.offsets)
        if not self.subject_id:
            self.subject_id = f"S{self.seed}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gains"] = list(self.gains)
        d["offsets"] = list(self.offsets)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSubjectSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synthetic spec fields: {sorted(unknown)}")
        if "seed" not in d:
            raise ConfigError("synthetic spec needs a seed")
        return cls(**d)


def _draw_episodes(rng: np.random.Generator, n_beats: int) -> list[Episode]:
    """Exercise bouts of random length and strength spread over the recording."""
    episodes = []
    start = int(rng.uniform(0.06, 0.14) * n_beats)
    while start < n_beats * 0.9:
        duration = int(rng.uniform(0.10, 0.22) * n_beats)
        episodes.append(Episode(start, duration, float(rng.uniform(25.0, 50.0))))
        start += duration + int(rng.uniform(0.02, 0.10) * n_beats)
    return episodes


def bp_trajectory(spec: SyntheticSubjectSpec, rng: np.random.Generator) -> np.ndarray:
    """Latent (dbp, sbp) per beat: baseline + smooth exercise bumps + drift + wander."""
    n = spec.beat_count
    episodes = spec.episodes if spec.episodes is not None else _draw_episodes(rng, n)
    k = np.arange(n)
    rise = np.zeros(n)
    for e in episodes:
        u = (k - e.start) / max(e.duration, 1)
        inside = (u >= 0) & (u <= 1)
        rise[inside] += e.amplitude * np.sin(np.pi * u[inside]) ** 2
    ramp = spec.drift * k / max(n - 1, 1)
    # AR(1) wander, shared partly between the two pressures
    phi = 0.97
    w = np.zeros((n, 2))
    eps = rng.normal(size=(n, 2)) * spec.wander * np.sqrt(1 - phi**2)
    for t in range(1, n):
        w[t] = phi * w[t - 1] + eps[t]
    sbp = spec.sbp_base + rise + ramp + w[:, 1]
    dbp = spec.dbp_base + 0.5 * rise + 0.5 * ramp + 0.6 * w[:, 1] + 0.8 * w[:, 0]
    dbp = np.minimum(dbp, sbp - 20.0)
    return np.stack([dbp, sbp], axis=1)


def pulse_waveform(dbp: float, sbp: float, heart_rate: float, rate: int) -> np.ndarray:
    """Noise-free 4-channel impedance pulse for one beat, gains 1, offsets 0.

    The impedance drop tracks a pressure-like curve that starts and ends near
    the diastolic level and peaks near the systolic one. A sharp upstroke at
    the arrival time is followed by a run-off decay. Arrival time falls and
    run-off quickens as mean pressure rises, the reflected-wave ratio grows
    with pulse pressure, and the beat shortens as pressure rises.
    """
    mean_p = dbp + (sbp - dbp) / 3.0
    pulse_p = sbp - dbp
    hr = heart_rate * (1.0 + 0.004 * (mean_p - 90.0))
    n = max(int(round(rate * 60.0 / hr)), 2)
    t = np.arange(n) / rate
    arrival = 0.12 - 0.0015 * (mean_p - 90.0)
    tau = 0.25 * np.exp(-0.012 * (mean_p - 90.0))
    refl = 0.25 + 0.006 * (pulse_p - 40.0)
    out = np.empty((N_CHANNELS, n))
    for c, delay in enumerate(CHANNEL_DELAYS):
        t0 = arrival + delay
        rise = 0.5 * (1.0 + np.tanh((t - t0) / 0.02))
        shape = rise * np.exp(-np.clip(t - t0, 0.0, None) / tau)
        shape = shape + refl * np.exp(-(((t - t0 - 0.16) / 0.05) ** 2))
        pressure = dbp + pulse_p * shape / (1.0 + refl)
        out[c] = -(pressure - 90.0) / 40.0
    return out


def generate_raw_beats(spec: SyntheticSubjectSpec) -> list[RawBeat]:
    rng = np.random.default_rng(spec.seed)
    latent = bp_trajectory(spec, rng)
    gains = np.asarray(spec.gains)[:, None]
    offsets = np.asarray(spec.offsets)[:, None]
    beats = []
    for dbp, sbp in latent:
        wave = pulse_waveform(dbp, sbp, spec.heart_rate, spec.source_rate)
        wave = gains * wave + offsets
        if spec.noise > 0:
            wave = wave + rng.normal(scale=spec.noise, size=wave.shape)
        wave = downsample(wave, spec.source_rate, TARGET_RATE)
        obs = rng.normal(scale=spec.label_noise, size=2) if spec.label_noise > 0 else np.zeros(2)
        d, s = float(dbp + obs[0]), float(sbp + obs[1])
        if s - d < 5.0:
            d = s - 5.0
        beats.append(RawBeat(spec.subject_id, wave, round(d, 6), round(s, 6), TARGET_RATE))
    return beats


def generate_subject(spec: SyntheticSubjectSpec) -> SubjectDataset:
    beats = [derive_features(b) for b in generate_raw_beats(spec)]
    return SubjectDataset(spec.subject_id, beats, float(spec.heart_rate))


def random_cohort_specs(n_subjects: int, seed: int, beat_count: int = 800) -> list[SyntheticSubjectSpec]:
    """Subjects with random channel morphology, baselines and heart rates."""
    rng = np.random.default_rng(seed)
    specs = []
    for k in range(n_subjects):
        specs.append(
            SyntheticSubjectSpec(
                seed=int(rng.integers(2**31)),
                subject_id=f"S{k + 1:02d}",
                gains=tuple(np.exp(rng.uniform(np.log(0.5), np.log(2.0), N_CHANNELS)).round(4)),
                offsets=tuple(rng.uniform(-0.6, 0.6, N_CHANNELS).round(4)),
                noise=0.03,
                heart_rate=round(float(rng.uniform(66.0, 84.0)), 2),
                beat_count=beat_count,
                dbp_base=round(float(rng.uniform(60.0, 74.0)), 2),
                sbp_base=round(float(rng.uniform(100.0, 120.0)), 2),
                drift=round(float(rng.uniform(-6.0, 6.0)), 2),
            )
        )
    return specs


def load_spec_file(path) -> list[SyntheticSubjectSpec]:
    """Read a synthetic cohort file (JSON, ``schema_version`` 1).

    Either ``{"subjects": [...]}`` with explicit subject specs, or
    ``{"cohort": {"n_subjects": N, "seed": S, "beat_count": B}}``.
    """
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read spec file {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("schema_version") != SPEC_SCHEMA_VERSION:
        raise ConfigError(f"spec file must be an object with schema_version {SPEC_SCHEMA_VERSION}")
    if "subjects" in doc:
        try:
            specs = [SyntheticSubjectSpec.from_dict(s) for s in doc["subjects"]]
        except TypeError as exc:
            raise ConfigError(f"malformed subject spec: {exc}") from exc
    elif "cohort" in doc:
        c = doc["cohort"]
        try:
            specs = random_cohort_specs(int(c["n_subjects"]), int(c["seed"]), int(c.get("beat_count", 800)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed cohort block: {exc}") from exc
    else:
        raise ConfigError("spec file needs a 'subjects' list or a 'cohort' block")
    ids = [s.subject_id for s in specs]
    if len(set(ids)) != len(ids) or not ids:
        raise ConfigError("subject ids must be unique and at least one subject is required")
    return specs


# --------------------------------------------------------------------------
# Beat CSV files
# --------------------------------------------------------------------------


def write_subject_csv(ds: SubjectDataset, path) -> Path:
    """One row per 100 Hz timestep; floats written with ``repr`` so reloads are exact."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for bi, b in enumerate(ds.beats):
            for ti in range(b.length):
                ch = b.features[ti, :N_CHANNELS]
                w.writerow([ds.subject_id, bi, ti, *map(repr, map(float, ch)), repr(b.dbp), repr(b.sbp)])
    return path


def read_subject_csv(path, heart_rate: float | None = None) -> SubjectDataset:
    """Load one subject's beats; heart rate defaults to the mean beat rate."""
    path = Path(path)
    rows: dict[int, list] = {}
    subject = None
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != CSV_HEADER:
            raise InputError(f"{path}: expected header {','.join(CSV_HEADER)}")
        for r in reader:
            if subject is None:
                subject = r["subject_id"]
            elif r["subject_id"] != subject:
                raise InputError(f"{path}: mixes subjects {subject} and {r['subject_id']}")
            rows.setdefault(int(r["beat_index"]), []).append(r)
    if not rows:
        raise InputError(f"{path}: no beats")
    beats = []
    for bi in sorted(rows):
        rs = sorted(rows[bi], key=lambda r: int(r["t_index"]))
        ch = np.array([[float(r[f"ch{c + 1}"]) for r in rs] for c in range(N_CHANNELS)])
        raw = RawBeat(subject, ch, float(rs[0]["dbp"]), float(rs[0]["sbp"]), TARGET_RATE)
        beats.append(derive_features(raw))
    if heart_rate is None:
        heart_rate = 60.0 * TARGET_RATE / float(np.mean([b.length for b in beats]))
    return SubjectDataset(subject, beats, float(heart_rate))


def write_dataset(datasets: list[SubjectDataset], out_dir, extra: dict | None = None) -> Path:
    """Write per-subject CSVs plus ``dataset.json`` listing files and heart rates."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for ds in datasets:
        fname = f"{ds.subject_id}.csv"
        write_subject_csv(ds, out_dir / fname)
        entries.append(
            {"subject_id": ds.subject_id, "file": fname, "heart_rate": ds.heart_rate, "n_beats": len(ds), "max_len": ds.max_len}
        )
    manifest = {
        "schema_version": SPEC_SCHEMA_VERSION,
        "rate_hz": TARGET_RATE,
        "max_len": max(ds.max_len for ds in datasets),
        "subjects": entries,
        **(extra or {}),
    }
    path = out_dir / "dataset.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_dataset(path) -> list[SubjectDataset]:
    """Load a dataset directory (or its ``dataset.json``); without a manifest,
    every ``*.csv`` in the directory is read."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"dataset path {path} does not exist")
    if path.is_dir() and (path / "dataset.json").exists():
        path = path / "dataset.json"
    if path.is_file() and path.suffix == ".json":
        manifest = json.loads(path.read_text())
        return [read_subject_csv(path.parent / e["file"], e.get("heart_rate")) for e in manifest["subjects"]]
    if path.is_file():
        return [read_subject_csv(path)]
    files = sorted(path.glob("*.csv"))
    if not files:
        raise InputError(f"no beat CSV files under {path}")
    return [read_subject_csv(f) for f in files]
