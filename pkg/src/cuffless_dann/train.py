"""Training regimes: direct, pretrained + fine-tune, and DANN with retraining."""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataio import BeatRecord, Normalizer, SubjectDataset, budget_beats, budget_split, fit_normalizer, fraction_split, stack_beats
from .errors import CheckpointError, ConfigError, InputError, TrainingError
from .evaluate import MetricsReport, metrics_report
from .model import (
    Batch,
    DannNet,
    ModelConfig,
    adversarial_step,
    classify_backward,
    classify_domain,
    domain_loss_grad,
    model_meta,
    mtl_gradients,
    mtl_step,
    net_from_params,
)
from .numkernel import OptimizerState, load_checkpoint, optimizer_step, save_checkpoint

log = logging.getLogger(__name__)

REGIMES = ("direct", "pretrained", "dann")
EXTRA_REGIMES = ("dann_loso",)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    lam: float = 1.0
    budget_minutes: float = 3.0
    epochs: int = 200
    finetune_epochs: int = 200
    batch_size: int = 64
    seed: int = 0
    regime: str = "dann"
    optimizer: str = "adam"
    conv_window: int = 10
    conv_tol: float = 1e-3
    patience: int = 20
    domain_mode: str = "binary"
    max_len: int | None = None
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")
        if self.lam < 0:
            raise ConfigError("loss weight lambda must be non-negative")
        if self.epochs < 1 or self.finetune_epochs < 0:
            raise ConfigError("epochs must be >= 1 and finetune_epochs >= 0")
        if self.batch_size < 2:
            raise ConfigError("batch size must be at least 2")
        if self.regime not in REGIMES + EXTRA_REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}")
        if self.domain_mode not in ("binary", "subject"):
            raise ConfigError(f"domain_mode must be 'binary' or 'subject', got {self.domain_mode!r}")
        if self.conv_window < 2:
            raise ConfigError("convergence window must be at least 2")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training config fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Predictor:
    """A trained network together with the scaling it was trained under."""

    net: DannNet
    normalizer: Normalizer
    max_len: int

    def predict_normalized(self, beats: list[BeatRecord]) -> np.ndarray:
        x, _ = stack_beats(beats, self.max_len, self.normalizer)
        return self.net.predict(x)

    def predict_mmhg(self, beats: list[BeatRecord]) -> np.ndarray:
        return self.normalizer.invert_labels(self.predict_normalized(beats))

    def __call__(self, beats):
        return self.predict_mmhg(beats)

    def evaluate(self, beats: list[BeatRecord]) -> MetricsReport:
        target = np.array([[b.dbp, b.sbp] for b in beats])
        return metrics_report(self.predict_mmhg(beats), target)

    def save(self, path, extra: dict | None = None) -> Path:
        meta = {**model_meta(self.net), "normalizer": self.normalizer.to_dict(), "max_len": self.max_len, **(extra or {})}
        return save_checkpoint(path, self.net.parameters(), meta)

    @classmethod
    def load(cls, path) -> "Predictor":
        params, meta = load_checkpoint(path)
        if "normalizer" not in meta or "max_len" not in meta:
            raise CheckpointError(f"{path} is missing normalizer or max_len metadata")
        return cls(net_from_params(params, meta), Normalizer.from_dict(meta["normalizer"]), int(meta["max_len"]))


@dataclass
class RegimeResult:
    predictor: Predictor
    history: list[float]
    seconds: float
    regime: str
    metrics: MetricsReport | None = None
    domain_history: list[float] = field(default_factory=list)
    phase2_history: list[float] = field(default_factory=list)
    info: dict = field(default_factory=dict)


def check_convergence(history, window: int = 10, tol: float = 1e-3) -> bool:
    """True when the mean of the last ``window`` losses differs from the mean
    of the ``window`` before it by less than ``tol`` (relative)."""
    if window < 2:
        raise ConfigError("convergence window must be at least 2")
    if len(history) < 2 * window:
        return False
    recent = float(np.mean(history[-window:]))
    before = float(np.mean(history[-2 * window : -window]))
    scale = max(abs(before), 1e-12)
    return abs(recent - before) / scale < tol


def _max_len(config: TrainConfig, *groups) -> int:
    longest = max(b.length for g in groups for b in g)
    if config.max_len is None:
        return longest
    if longest > config.max_len:
        raise InputError(f"beat of length {longest} exceeds configured max_len {config.max_len}")
    return config.max_len


def _optimizer(config: TrainConfig) -> OptimizerState:
    return OptimizerState(lr=config.lr, kind=config.optimizer)


def _seed_sequence(seed) -> np.random.SeedSequence:
    # spawning mutates a SeedSequence, so always work on a fresh copy
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(seed.entropy, spawn_key=seed.spawn_key)
    return np.random.SeedSequence(seed)


def _rngs(seed) -> tuple[np.random.Generator, ...]:
    """Independent generators for initialization, batch order, dropout and splitting."""
    return tuple(np.random.default_rng(s) for s in _seed_sequence(seed).spawn(4))


def _fit_mtl(net, x, y, config, epochs, order_rng, drop_rng, val=None):
    """Mini-batch descent on the summed BP loss.

    Returns per-epoch mean per-sample loss. With ``val`` given, keeps the
    parameters with the lowest validation loss and stops after ``patience``
    epochs without improvement; otherwise stops on the convergence rule.
    """
    opt = _optimizer(config)
    history: list[float] = []
    n = len(x)
    best = (math.inf, None, 0)
    for epoch in range(epochs):
        perm = order_rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            total += mtl_step(net, x[idx], y[idx], opt, drop_rng)
        history.append(total / n)
        if not np.isfinite(history[-1]):
            raise TrainingError("training loss diverged")
        if val is not None:
            vloss, _ = mtl_gradients(net, val[0], val[1], "eval")
            if vloss < best[0]:
                best = (vloss, {k: v.copy() for k, v in net.parameters().items()}, epoch)
            elif epoch - best[2] >= config.patience:
                break
        elif check_convergence(history, config.conv_window, config.conv_tol):
            break
    if val is not None and best[1] is not None:
        net.load_parameters(best[1])
    return history


def train_direct(train: list[BeatRecord], config: TrainConfig, seed=None) -> RegimeResult:
    """Fresh initialization trained only on the given beats."""
    if not train:
        raise InputError("direct training needs a non-empty training set")
    t0 = time.perf_counter()
    init_rng, order_rng, drop_rng, _ = _rngs(config.seed if seed is None else seed)
    max_len = _max_len(config, train)
    norm = fit_normalizer(train)
    x, y = stack_beats(train, max_len, norm)
    net = DannNet.init(config.model, init_rng)
    history = _fit_mtl(net, x, y, config, config.epochs, order_rng, drop_rng)
    return RegimeResult(Predictor(net, norm, max_len), history, time.perf_counter() - t0, "direct")


def train_reference(ds: SubjectDataset, config: TrainConfig, seed=None) -> RegimeResult:
    """80/10/10 protocol: random split, early stopping on validation BP loss.

    Used both as the 80%-data baseline and to build donor models.
    """
    t0 = time.perf_counter()
    init_rng, order_rng, drop_rng, split_rng = _rngs(config.seed if seed is None else seed)
    train, val, test = fraction_split(ds.beats, split_rng)
    if not train or not val or not test:
        raise InputError(f"subject {ds.subject_id} is too small for an 80/10/10 split")
    max_len = _max_len(config, ds.beats)
    norm = fit_normalizer(train)
    x, y = stack_beats(train, max_len, norm)
    val_xy = stack_beats(val, max_len, norm)
    net = DannNet.init(config.model, init_rng)
    history = _fit_mtl(net, x, y, config, config.epochs, order_rng, drop_rng, val=val_xy)
    pred = Predictor(net, norm, max_len)
    return RegimeResult(
        pred, history, time.perf_counter() - t0, "reference", metrics=pred.evaluate(test),
        info={"n_train": len(train), "n_val": len(val), "n_test": len(test)},
    )


def train_pretrained(train: list[BeatRecord], donor: Predictor, config: TrainConfig, seed=None) -> RegimeResult:
    """Start from the donor's parameters and scaling and retrain every layer
    on the new subject's beats for ``finetune_epochs``."""
    if config.model != donor.net.config:
        raise CheckpointError("donor model shape differs from the configured model")
    t0 = time.perf_counter()
    _, order_rng, drop_rng, _ = _rngs(config.seed if seed is None else seed)
    net = donor.net.copy()
    history: list[float] = []
    if config.finetune_epochs > 0:
        if not train:
            raise InputError("fine-tuning needs a non-empty training set")
        x, y = stack_beats(train, donor.max_len, donor.normalizer)
        history = _fit_mtl(net, x, y, config, config.finetune_epochs, order_rng, drop_rng)
    return RegimeResult(Predictor(net, donor.normalizer, donor.max_len), history, time.perf_counter() - t0, "pretrained")


def _cycled(rng, n, total):
    """``total`` indices drawn by cycling through fresh permutations of ``range(n)``."""
    reps = -(-total // n)
    return np.concatenate([rng.permutation(n) for _ in range(reps)])[:total]


def balanced_batches(domains: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """One epoch of batches holding equal counts from every domain.

    The epoch is long enough to visit every sample of the largest domain once;
    smaller domains are cycled.
    """
    labels = np.unique(domains)
    pools = [np.flatnonzero(domains == d) for d in labels]
    per = max(batch_size // len(labels), 1)
    n_batches = max(-(-len(p) // per) for p in pools)
    draws = [p[_cycled(rng, len(p), n_batches * per)] for p in pools]
    return [np.concatenate([d[k * per : (k + 1) * per] for d in draws]) for k in range(n_batches)]


def _adversarial_phase(net, x, y, domains, config, order_rng, drop_rng):
    opt = _optimizer(config)
    bp_hist, d_hist, total_hist = [], [], []
    for _ in range(config.epochs):
        bp_sum = d_sum = 0.0
        count = 0
        batches = balanced_batches(domains, config.batch_size, order_rng)
        for idx in batches:
            losses = adversarial_step(net, Batch(x[idx], y[idx], domains[idx]), opt, config.lam, drop_rng)
            bp_sum += losses.bp
            d_sum += losses.domain * len(idx)
            count += len(idx)
        bp_hist.append(bp_sum / count)
        d_hist.append(d_sum / count)
        total_hist.append(bp_hist[-1] + d_hist[-1])
        if not np.isfinite(total_hist[-1]):
            raise TrainingError("adversarial training diverged")
        if check_convergence(total_hist, config.conv_window, config.conv_tol):
            break
    return bp_hist, d_hist


def train_dann(
    train: list[BeatRecord],
    source: list[BeatRecord],
    aux_target: list[BeatRecord],
    config: TrainConfig,
    seed=None,
) -> RegimeResult:
    """Adversarial phase on source vs (auxiliary + new) data, then retraining
    of the feature extractor and BP heads on the new subject's beats only.

    Domain labels: binary mode uses 0 for source and 1 for the pooled target;
    subject mode gives source, auxiliary and new subject their own class.
    """
    if not train or not source or not aux_target:
        raise ConfigError("DANN needs a new subject plus distinct source and auxiliary subjects")
    t0 = time.perf_counter()
    init_rng, order_rng, drop_rng, _ = _rngs(config.seed if seed is None else seed)
    max_len = _max_len(config, train, source, aux_target)
    pooled = source + aux_target + train
    if config.domain_mode == "binary":
        domains = np.array([0] * len(source) + [1] * (len(aux_target) + len(train)))
        model_cfg = replace(config.model, n_domains=2)
    else:
        domains = np.array([0] * len(source) + [1] * len(aux_target) + [2] * len(train))
        model_cfg = replace(config.model, n_domains=3)
    norm = fit_normalizer(pooled)
    x, y = stack_beats(pooled, max_len, norm)
    net = DannNet.init(model_cfg, init_rng)
    bp_hist, d_hist = _adversarial_phase(net, x, y, domains, config, order_rng, drop_rng)

    theta_d = {k: v.copy() for k, v in net.partition("theta_d").items()}
    xn, yn = stack_beats(train, max_len, norm)
    phase2 = _fit_mtl(net, xn, yn, config, config.finetune_epochs, order_rng, drop_rng) if config.finetune_epochs else []
    return RegimeResult(
        Predictor(net, norm, max_len), bp_hist, time.perf_counter() - t0, "dann",
        domain_history=d_hist, phase2_history=phase2, info={"theta_d_after_phase1": theta_d},
    )


def train_dann_loso(train: list[BeatRecord], others: list[list[BeatRecord]], config: TrainConfig, seed=None) -> RegimeResult:
    """Leave-one-subject-out variant: every other subject is its own source
    domain and the new subject is the last class. Expected not to converge;
    provided for completeness, with no accuracy claim."""
    if len(others) < 2:
        raise ConfigError("leave-one-subject-out DANN needs at least two other subjects")
    t0 = time.perf_counter()
    init_rng, order_rng, drop_rng, _ = _rngs(config.seed if seed is None else seed)
    max_len = _max_len(config, train, *others)
    pooled = [b for o in others for b in o] + train
    domains = np.concatenate([np.full(len(o), k) for k, o in enumerate(others)] + [np.full(len(train), len(others))])
    norm = fit_normalizer(pooled)
    x, y = stack_beats(pooled, max_len, norm)
    net = DannNet.init(replace(config.model, n_domains=len(others) + 1), init_rng)
    bp_hist, d_hist = _adversarial_phase(net, x, y, domains, config, order_rng, drop_rng)
    xn, yn = stack_beats(train, max_len, norm)
    phase2 = _fit_mtl(net, xn, yn, config, config.finetune_epochs, order_rng, drop_rng) if config.finetune_epochs else []
    return RegimeResult(Predictor(net, norm, max_len), bp_hist, time.perf_counter() - t0, "dann_loso",
                        domain_history=d_hist, phase2_history=phase2)


def probe_domain_accuracy(
    features_train: np.ndarray,
    domains_train: np.ndarray,
    features_test: np.ndarray,
    domains_test: np.ndarray,
    config: ModelConfig,
    rng: np.random.Generator,
    epochs: int = 100,
    lr: float = 1e-3,
    batch_size: int = 32,
) -> float:
    """Held-out accuracy of a fresh domain classifier trained on frozen features.

    Measures how much domain information the features still carry.
    """
    n_domains = int(max(domains_train.max(), domains_test.max())) + 1
    dc = DannNet.fresh_classifier(replace(config, n_domains=n_domains), rng)
    params = dc.parameters()
    opt = OptimizerState(lr=lr)
    n = len(features_train)
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            probs, caches = classify_domain(dc, features_train[idx])
            grads, _ = classify_backward(dc, caches, domain_loss_grad(probs, domains_train[idx]))
            optimizer_step(opt, params, grads)
    probs, _ = classify_domain(dc, features_test)
    return float(np.mean(np.argmax(probs, axis=1) == domains_test))


# --------------------------------------------------------------------------
# Experiment matrix
# --------------------------------------------------------------------------

RESULT_COLUMNS = ("subject", "budget_minutes", "regime", "repeat", "dbp_rmse", "sbp_rmse", "dbp_r", "sbp_r", "seconds")
SUMMARY_METRICS = ("dbp_rmse", "sbp_rmse", "dbp_r", "sbp_r")


@dataclass
class CellResult:
    subject: str
    budget_minutes: float
    regime: str
    repeat: int
    dbp_rmse: float | None = None
    sbp_rmse: float | None = None
    dbp_r: float | None = None
    sbp_r: float | None = None
    seconds: float | None = None
    partners: tuple = ()
    error: str = ""
    dbp_pct_within_10: float | None = None
    sbp_pct_within_10: float | None = None
    checkpoint: str = ""


@dataclass
class MatrixResult:
    cells: list[CellResult]
    skipped: list[tuple[str, float, str]]
    donors: dict[str, Predictor] = field(default_factory=dict)

    def ok_cells(self) -> list[CellResult]:
        return [c for c in self.cells if not c.error]


def cell_seed(base: int, *keys: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([base, *keys])


def _budget_key(minutes: float) -> int:
    return int(round(minutes * 1000))


def _run_cell(task):
    (kind, subj_idx, budget, repeat, partners, config, subjects, donor, ckpt) = task
    new = subjects[subj_idx]
    train, test = budget_split(new, budget)
    seed = cell_seed(config.seed, subj_idx, _budget_key(budget), REGIMES.index(kind) if kind in REGIMES else 9, repeat)
    cell = CellResult(new.subject_id, budget, kind, repeat, partners=tuple(subjects[p].subject_id for p in partners))
    try:
        if kind == "direct":
            res = train_direct(train, config, seed)
        elif kind == "pretrained":
            res = train_pretrained(train, donor, config, seed)
        elif kind == "dann":
            src, aux = (subjects[p].beats for p in partners)
            res = train_dann(train, src, aux, config, seed)
        else:
            res = train_dann_loso(train, [subjects[p].beats for p in partners], config, seed)
        m = res.predictor.evaluate(test)
    except (TrainingError, InputError, ConfigError, CheckpointError) as exc:
        cell.error = f"{type(exc).__name__}: {exc}"
        return cell
    cell.dbp_rmse, cell.sbp_rmse, cell.dbp_r, cell.sbp_r = m.dbp_rmse, m.sbp_rmse, m.dbp_r, m.sbp_r
    cell.dbp_pct_within_10 = m.dbp_agreement.pct_within_10
    cell.sbp_pct_within_10 = m.sbp_agreement.pct_within_10
    cell.seconds = res.seconds
    if ckpt is not None:
        meta = {"subject": new.subject_id, "budget_minutes": budget, "regime": kind, "repeat": repeat,
                "partners": list(cell.partners), "n_train": len(train), "n_test": len(test)}
        cell.checkpoint = str(res.predictor.save(ckpt, meta))
    return cell


def build_donors(subjects: list[SubjectDataset], config: TrainConfig, indices=None) -> dict[int, Predictor]:
    """One 80/10/10 reference model per subject, used as pretrained donors."""
    indices = range(len(subjects)) if indices is None else indices
    return {k: train_reference(subjects[k], config, cell_seed(config.seed, k, 0, 7, 0)).predictor for k in indices}


def run_experiment_matrix(
    subjects: list[SubjectDataset],
    budgets,
    regimes,
    repeats: int,
    config: TrainConfig,
    pretrained_donors: int | None = None,
    workers: int = 1,
    donors: dict[int, Predictor] | None = None,
    checkpoint_dir=None,
) -> MatrixResult:
    """Every subject x budget x regime cell, repeated.

    ``direct`` repeats reinitialize; ``pretrained`` runs once per donor (all
    other subjects, or ``pretrained_donors`` of them drawn at random);
    ``dann`` draws a random (source, auxiliary) pair per repeat. Subjects
    without data beyond the budget are skipped with a recorded reason.
    With ``checkpoint_dir`` set, every cell saves its model to its own file.
    """
    for r in regimes:
        if r not in REGIMES + EXTRA_REGIMES:
            raise ConfigError(f"unknown regime {r!r}")
    max_len = max(ds.max_len for ds in subjects)
    config = replace(config, max_len=config.max_len or max_len)
    n = len(subjects)
    tasks, skipped = [], []
    needed_donors: set[int] = set()
    plan = []
    for si, ds in enumerate(subjects):
        for budget in budgets:
            nb = budget_beats(ds.heart_rate, budget)
            if nb >= len(ds):
                skipped.append((ds.subject_id, budget, f"budget needs {nb} beats, subject has {len(ds)}"))
                continue
            others = [k for k in range(n) if k != si]
            for regime in regimes:
                pick = np.random.default_rng(cell_seed(config.seed, si, _budget_key(budget), 100 + (REGIMES + EXTRA_REGIMES).index(regime)))
                if regime == "direct":
                    plan += [("direct", si, budget, r, ()) for r in range(repeats)]
                elif regime == "pretrained":
                    donors_here = others if pretrained_donors is None else list(pick.choice(others, min(pretrained_donors, len(others)), replace=False))
                    plan += [("pretrained", si, budget, r, (int(d),)) for r, d in enumerate(donors_here)]
                    needed_donors.update(int(d) for d in donors_here)
                elif regime == "dann":
                    if len(others) < 2:
                        skipped.append((ds.subject_id, budget, "DANN needs two other subjects"))
                        continue
                    for r in range(repeats):
                        pair = pick.choice(others, 2, replace=False)
                        plan.append(("dann", si, budget, r, (int(pair[0]), int(pair[1]))))
                else:
                    if len(others) < 2:
                        skipped.append((ds.subject_id, budget, "leave-one-out DANN needs two other subjects"))
                        continue
                    plan += [("dann_loso", si, budget, r, tuple(others)) for r in range(repeats)]
    donors = dict(donors or {})
    missing = sorted(needed_donors - set(donors))
    if missing:
        donors.update(build_donors(subjects, config, missing))
    for kind, si, budget, r, partners in plan:
        donor = donors[partners[0]] if kind == "pretrained" else None
        ckpt = None
        if checkpoint_dir is not None:
            ckpt = Path(checkpoint_dir) / f"{subjects[si].subject_id}_{budget:g}min_{kind}_{r}.npz"
        tasks.append((kind, si, budget, r, partners, config, subjects, donor, ckpt))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(_run_cell, tasks))
    else:
        cells = [_run_cell(t) for t in tasks]
    for c in cells:
        if c.error:
            log.warning("cell %s/%s/%s/%d failed: %s", c.subject, c.budget_minutes, c.regime, c.repeat, c.error)
    return MatrixResult(cells, skipped, {subjects[k].subject_id: p for k, p in donors.items()})


def summarize(cells: list[CellResult]) -> list[dict]:
    """Mean and std over repeats per (subject, budget, regime), followed by a
    ``mean`` row per (budget, regime) aggregating the per-subject means."""
    groups: dict[tuple, list[CellResult]] = {}
    for c in cells:
        if not c.error:
            groups.setdefault((c.subject, c.budget_minutes, c.regime), []).append(c)
    rows = []
    per_subject: dict[tuple, list[dict]] = {}
    for (subj, budget, regime), cs in groups.items():
        row = {"subject": subj, "budget_minutes": budget, "regime": regime, "n": len(cs)}
        for m in SUMMARY_METRICS:
            vals = np.array([getattr(c, m) for c in cs])
            row[f"{m}_mean"] = float(vals.mean())
            row[f"{m}_std"] = float(vals.std())
        rows.append(row)
        per_subject.setdefault((budget, regime), []).append(row)
    for (budget, regime), rs in per_subject.items():
        row = {"subject": "mean", "budget_minutes": budget, "regime": regime, "n": len(rs)}
        for m in SUMMARY_METRICS:
            vals = np.array([r[f"{m}_mean"] for r in rs])
            row[f"{m}_mean"] = float(vals.mean())
            row[f"{m}_std"] = float(vals.std())
        rows.append(row)
    return rows


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_results_csv(path, cells: list[CellResult], record_timing: bool = False) -> Path:
    """Per-cell rows. ``seconds`` is left empty unless ``record_timing`` so that
    reruns with the same seeds produce byte-identical files."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS + ("partners", "error"))
        for c in cells:
            w.writerow(
                [c.subject, _fmt(float(c.budget_minutes)), c.regime, c.repeat, _fmt(c.dbp_rmse), _fmt(c.sbp_rmse),
                 _fmt(c.dbp_r), _fmt(c.sbp_r), _fmt(c.seconds) if record_timing else "", "|".join(c.partners), c.error]
            )
    return path


SUMMARY_COLUMNS = ("subject", "budget_minutes", "regime", "n") + tuple(
    f"{m}_{s}" for m in SUMMARY_METRICS for s in ("mean", "std")
)


def write_summary_csv(path, rows: list[dict]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for r in rows:
            w.writerow([_fmt(float(r[k])) if k == "budget_minutes" else _fmt(r[k]) for k in SUMMARY_COLUMNS])
    return path
