"""Command-line entry point: ``generate``, ``train``, ``eval`` and ``gradcheck``.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import shutil
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .dataio import budget_split, generate_subject, load_spec_file, read_dataset, write_dataset
from .errors import CheckpointError, ConfigError, DannError, InputError, NumericError, TrainingError
from .evaluate import (
    DBP_GAP_SIZES,
    SBP_GAP_SIZES,
    average_gap_reports,
    gap_positions,
    gap_study,
    write_bland_altman_csv,
    write_gap_csv,
)
from .model import Batch, DannNet, ModelConfig, adversarial_gradients
from .numkernel import finite_diff_check, load_checkpoint
from .train import (
    REGIMES,
    EXTRA_REGIMES,
    Predictor,
    TrainConfig,
    run_experiment_matrix,
    summarize,
    train_dann,
    train_direct,
    write_results_csv,
    write_summary_csv,
)

log = logging.getLogger("cuffless_dann")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
CONFIG_SCHEMA_VERSION = 1


# --------------------------------------------------------------------------
# Experiment configuration
# --------------------------------------------------------------------------


@dataclass
class GapStudyConfig:
    enabled: bool = False
    budget_minutes: float = 4.0
    regime: str = "dann"
    dbp_sizes: tuple = DBP_GAP_SIZES
    sbp_sizes: tuple = SBP_GAP_SIZES


@dataclass
class ExperimentConfig:
    dataset: str | None = None
    spec_file: str | None = None
    budgets: tuple = (3.0, 4.0, 5.0)
    regimes: tuple = REGIMES
    repeats: int = 10
    pretrained_donors: int | None = None
    record_timing: bool = False
    save_checkpoints: bool = True
    workers: int = 1
    out: str = "run"
    train: TrainConfig = field(default_factory=TrainConfig)
    gap_study: GapStudyConfig = field(default_factory=GapStudyConfig)

    def validate(self) -> None:
        if (self.dataset is None) == (self.spec_file is None):
            raise ConfigError("config needs exactly one of 'dataset' or 'spec_file'")
        src = Path(self.dataset or self.spec_file)
        if not src.exists():
            raise ConfigError(f"data source {src} does not exist")
        if not self.budgets or any(b <= 0 for b in self.budgets):
            raise ConfigError("budgets must be a non-empty list of positive minutes")
        for r in self.regimes:
            if r not in REGIMES + EXTRA_REGIMES:
                raise ConfigError(f"unknown regime {r!r}")
        if self.repeats < 1 or self.workers < 1:
            raise ConfigError("repeats and workers must be at least 1")
        if self.gap_study.regime not in ("direct", "dann"):
            raise ConfigError("gap study regime must be 'direct' or 'dann'")


def load_experiment_config(path) -> ExperimentConfig:
    """Read a JSON experiment config. Relative paths resolve against the file's directory."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return experiment_config_from_dict(doc, base=path.parent)


def experiment_config_from_dict(doc: dict, base: Path | None = None) -> ExperimentConfig:
    if not isinstance(doc, dict) or doc.get("schema_version", CONFIG_SCHEMA_VERSION) != CONFIG_SCHEMA_VERSION:
        raise ConfigError(f"config must be an object with schema_version {CONFIG_SCHEMA_VERSION}")
    doc = {k: v for k, v in doc.items() if k != "schema_version"}
    unknown = set(doc) - set(ExperimentConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    try:
        train = TrainConfig.from_dict(doc.pop("train", {}))
        gap = GapStudyConfig(**doc.pop("gap_study", {}))
        cfg = ExperimentConfig(train=train, gap_study=gap, **doc)
    except TypeError as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    for key in ("dataset", "spec_file", "out"):
        val = getattr(cfg, key)
        if val is not None and base is not None and not Path(val).is_absolute():
            setattr(cfg, key, str(base / val))
    cfg.budgets = tuple(float(b) for b in cfg.budgets)
    cfg.regimes = tuple(cfg.regimes)
    return cfg


# --------------------------------------------------------------------------
# Output plumbing
# --------------------------------------------------------------------------


@contextlib.contextmanager
def staged_output(out_dir):
    """Yield a scratch directory; on success move its files into ``out_dir``.

    Nothing lands in ``out_dir`` if the body raises, so a failed command never
    leaves partial files behind.
    """
    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    scratch = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}.", dir=out_dir.parent))
    try:
        yield scratch
        out_dir.mkdir(exist_ok=True)
        for src in sorted(scratch.rglob("*")):
            if src.is_file():
                dst = out_dir / src.relative_to(scratch)
                dst.parent.mkdir(parents=True, exist_ok=True)
                os.replace(src, dst)
    finally:
        shutil.rmtree(scratch, ignore_errors=True)


def write_manifest(scratch: Path, command: str, config: dict, seeds: dict, extra: dict | None = None) -> Path:
    """``manifest.json`` listing every file written by the command."""
    outputs = sorted(str(p.relative_to(scratch)) for p in scratch.rglob("*") if p.is_file())
    manifest = {
        "command": command,
        "code_version": __version__,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "config": config,
        "seeds": seeds,
        "outputs": outputs + ["manifest.json"],
        **(extra or {}),
    }
    path = scratch / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    if isinstance(o, (tuple, set)):
        return list(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _load_subjects(cfg: ExperimentConfig):
    if cfg.dataset is not None:
        return read_dataset(cfg.dataset)
    return [generate_subject(s) for s in load_spec_file(cfg.spec_file)]


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_generate(spec_file, out_dir) -> int:
    specs = load_spec_file(spec_file)
    datasets = [generate_subject(s) for s in specs]
    with staged_output(out_dir) as scratch:
        write_dataset(datasets, scratch, extra={"specs": [s.to_dict() for s in specs]})
        write_manifest(scratch, "generate", {"spec_file": str(spec_file)}, {"subjects": [s.seed for s in specs]})
    print(f"wrote {len(datasets)} subjects to {out_dir}")
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig) -> int:
    cfg.validate()
    subjects = _load_subjects(cfg)
    out_dir = Path(cfg.out)
    with staged_output(out_dir) as scratch:
        ckpt_dir = None
        if cfg.save_checkpoints:
            ckpt_dir = scratch / "checkpoints"
            ckpt_dir.mkdir()
        result = run_experiment_matrix(
            subjects, cfg.budgets, cfg.regimes, cfg.repeats, cfg.train,
            pretrained_donors=cfg.pretrained_donors, workers=cfg.workers, checkpoint_dir=ckpt_dir,
        )
        ok = result.ok_cells()
        if result.cells and not ok:
            raise TrainingError(f"all {len(result.cells)} cells failed; first error: {result.cells[0].error}")
        write_results_csv(scratch / "results.csv", result.cells, record_timing=cfg.record_timing)
        write_summary_csv(scratch / "summary.csv", summarize(result.cells))
        if cfg.save_checkpoints and result.donors:
            (scratch / "donors").mkdir()
            for sid, pred in result.donors.items():
                pred.save(scratch / "donors" / f"{sid}.npz", {"subject": sid, "regime": "reference"})
        with open(scratch / "skipped.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["subject", "budget_minutes", "reason"])
            w.writerows([[s, repr(float(b)), reason] for s, b, reason in result.skipped])
        cells = [
            {"subject": c.subject, "budget_minutes": c.budget_minutes, "regime": c.regime, "repeat": c.repeat,
             "partners": list(c.partners), "error": c.error,
             "checkpoint": str(Path(c.checkpoint).relative_to(scratch)) if c.checkpoint else ""}
            for c in result.cells
        ]
        write_manifest(scratch, "train", _config_snapshot(cfg), {"base": cfg.train.seed}, {"cells": cells})
    print(f"{len(ok)}/{len(result.cells)} cells succeeded, {len(result.skipped)} skipped; outputs in {out_dir}")
    _print_summary(summarize(result.cells))
    return EXIT_OK


def _config_snapshot(cfg: ExperimentConfig) -> dict:
    d = asdict(cfg)
    d["schema_version"] = CONFIG_SCHEMA_VERSION
    return d


def _print_summary(rows):
    print(f"{'subject':>8} {'budget':>6} {'regime':>10}  {'DBP RMSE':>14} {'DBP R':>6}  {'SBP RMSE':>14} {'SBP R':>6}")
    for r in rows:
        print(
            f"{r['subject']:>8} {r['budget_minutes']:>6g} {r['regime']:>10}  "
            f"{r['dbp_rmse_mean']:6.2f} ± {r['dbp_rmse_std']:5.2f} {r['dbp_r_mean']:6.2f}  "
            f"{r['sbp_rmse_mean']:6.2f} ± {r['sbp_rmse_std']:5.2f} {r['sbp_r_mean']:6.2f}"
        )


def cmd_eval(checkpoint, dataset, out_dir, subject=None, budget=None, gap_study_on=False,
             gap_cfg: GapStudyConfig | None = None, train_cfg: TrainConfig | None = None, seed=0) -> int:
    """Score a checkpoint on a subject's held-out beats and optionally run the gap sweep."""
    pred = Predictor.load(checkpoint)
    _, meta = load_checkpoint(checkpoint)
    subjects = read_dataset(dataset)
    subject = subject or meta.get("subject")
    by_id = {s.subject_id: s for s in subjects}
    if subject is None:
        if len(subjects) != 1:
            raise ConfigError("dataset holds several subjects; choose one with --subject")
        subject = subjects[0].subject_id
    if subject not in by_id:
        raise ConfigError(f"subject {subject!r} not in dataset")
    ds = by_id[subject]
    budget = float(meta.get("budget_minutes", 0.0)) if budget is None else float(budget)
    train, test = budget_split(ds, budget)
    if not test:
        raise InputError(f"no test beats remain after a {budget:g}-minute budget")
    if max(b.length for b in test) > pred.max_len:
        raise CheckpointError(f"dataset beats are longer than the checkpoint's padding length {pred.max_len}")
    report = pred.evaluate(test)
    target = np.array([b.labels for b in test])
    mmhg = pred.predict_mmhg(test)
    verdict = report.iso

    print(f"subject {subject}  regime {meta.get('regime', '?')}  budget {budget:g} min  n {report.n}")
    print(f"DBP  RMSE {report.dbp_rmse:.3f} mmHg  R {report.dbp_r:.3f}  within 10 mmHg {report.dbp_agreement.pct_within_10:.1f}%")
    print(f"SBP  RMSE {report.sbp_rmse:.3f} mmHg  R {report.sbp_r:.3f}  within 10 mmHg {report.sbp_agreement.pct_within_10:.1f}%")
    print(f"ISO gate: DBP {'pass' if verdict.dbp_pass else 'fail'}, SBP {'pass' if verdict.sbp_pass else 'fail'}, "
          f"overall {'PASS' if verdict.passed else 'FAIL'}")

    with staged_output(out_dir) as scratch:
        write_bland_altman_csv(scratch / "bland_altman_dbp.csv", mmhg[:, 0], target[:, 0])
        write_bland_altman_csv(scratch / "bland_altman_sbp.csv", mmhg[:, 1], target[:, 1])
        metrics = {
            "subject": subject, "regime": meta.get("regime"), "budget_minutes": budget, "n": report.n,
            "dbp_rmse": report.dbp_rmse, "sbp_rmse": report.sbp_rmse, "dbp_r": report.dbp_r, "sbp_r": report.sbp_r,
            "dbp_agreement": asdict(report.dbp_agreement), "sbp_agreement": asdict(report.sbp_agreement),
            "iso": verdict._asdict(),
        }
        (scratch / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True, default=_json_default) + "\n")
        if gap_study_on:
            rows = run_gap_sweep(ds, subjects, gap_cfg or GapStudyConfig(), train_cfg or TrainConfig(), seed)
            write_gap_csv(scratch / "gap_study.csv", rows)
        write_manifest(scratch, "eval", {"checkpoint": str(checkpoint), "dataset": str(dataset), "subject": subject,
                                         "budget_minutes": budget, "gap_study": gap_study_on}, {"base": seed})
    return EXIT_OK


def run_gap_sweep(ds, subjects, gap_cfg: GapStudyConfig, train_cfg: TrainConfig, seed=0):
    """Every gap size and in-range position for one subject; returns ``(subject, GapReport)`` rows."""
    train, test = budget_split(ds, gap_cfg.budget_minutes)
    max_len = max(s.max_len for s in subjects)
    cfg = TrainConfig.from_dict({**train_cfg.to_dict(), "max_len": max_len})
    others = [s for s in subjects if s.subject_id != ds.subject_id]
    if gap_cfg.regime == "dann":
        if len(others) < 2:
            raise ConfigError("a DANN gap study needs two other subjects in the dataset")
        pick = np.random.default_rng(seed).choice(len(others), 2, replace=False)
        source, aux = others[pick[0]].beats, others[pick[1]].beats
        trainer = lambda kept: train_dann(kept, source, aux, cfg).predictor
    else:
        trainer = lambda kept: train_direct(kept, cfg).predictor
    labels = ds.labels()
    rows = []
    for which, sizes, col in (("dbp", gap_cfg.dbp_sizes, 0), ("sbp", gap_cfg.sbp_sizes, 1)):
        for size in sizes:
            gaps = gap_positions(which, size, labels[:, col])
            reports = gap_study(trainer, train, test, gaps)
            rows += [(ds.subject_id, r) for r in reports]
            overall, inside = average_gap_reports(reports)
            if overall is not None:
                print(f"{which.upper()} gap {size:g} mmHg over {len(gaps)} positions: overall {overall:.3f}"
                      + (f", in-gap {inside:.3f}" if inside is not None else ""))
    return rows


def gradcheck_model(seed=0) -> tuple[DannNet, Batch, float]:
    """A small full-stack model and batch for the finite-difference check."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(lstm_hidden=3, shared_width=4, head_hidden=3, domain_hidden=3)
    net = DannNet.init(cfg, rng)
    # random biases keep relu pre-activations off the kink at exactly zero
    for name, arr in net.parameters().items():
        if name.endswith("bias"):
            arr[...] = rng.uniform(-0.5, 0.5, size=arr.shape)
    x = rng.uniform(-1.0, 1.0, size=(4, 5, cfg.n_features))
    y = rng.uniform(0.0, 1.0, size=(4, 2))
    return net, Batch(x, y, np.array([0, 1, 0, 1])), 0.7


def run_gradcheck(seed=0, fault: str | None = None):
    """Check every parameter of the full stack.

    ``theta_f`` and ``theta_bp`` are checked against L_bp - lam * L_d (the
    objective the reversal layer makes the feature extractor descend);
    ``theta_d`` against L_d. ``fault='sign-flip'`` negates the analytic
    gradient of the LSTM weights as a negative control.
    """
    net, batch, lam = gradcheck_model(seed)

    def grads():
        losses, g = adversarial_gradients(net, batch, lam, "eval")
        if fault == "sign-flip":
            g = dict(g)
            g["theta_f.lstm.weights"] = -g["theta_f.lstm.weights"]
        return losses, g

    def joint():
        losses, g = grads()
        return losses.bp - lam * losses.domain, g

    def domain():
        losses, g = grads()
        return losses.domain, g

    main_params = {**net.partition("theta_f"), **net.partition("theta_bp")}
    r1 = finite_diff_check(main_params, joint)
    r2 = finite_diff_check(net.partition("theta_d"), domain)
    per = {**r1.per_parameter, **r2.per_parameter}
    return per, net.n_parameters(), r1.n_checked + r2.n_checked


def cmd_gradcheck(out_dir=None, seed=0, fault=None, tol=1e-4) -> int:
    t0 = time.perf_counter()
    per, n_params, n_checked = run_gradcheck(seed, fault)
    worst = max(per, key=per.get)
    for name, err in per.items():
        print(f"  {name:<28} {err:.3e}")
    elapsed = time.perf_counter() - t0
    passed = per[worst] <= tol
    print(f"{n_params} parameters, {n_checked} entries checked in {elapsed:.1f}s")
    print(f"worst: {worst} relative error {per[worst]:.3e} (tol {tol:g}) -> {'PASS' if passed else 'FAIL'}")
    if out_dir is not None:
        with staged_output(out_dir) as scratch:
            with open(scratch / "gradcheck.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["parameter", "max_rel_error"])
                w.writerows([[k, repr(float(v))] for k, v in per.items()])
            write_manifest(scratch, "gradcheck", {"fault": fault, "tol": tol}, {"base": seed})
    return EXIT_OK if passed else EXIT_NUMERIC


# --------------------------------------------------------------------------
# Argument parsing
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cuffless-dann", description="Domain-adversarial cuffless BP estimation.")
    p.add_argument("--seed", type=int, default=None, help="base seed (overrides config)")
    p.add_argument("--workers", type=int, default=None, help="parallel matrix cells (overrides config)")
    p.add_argument("--out", default=None, help="output directory (overrides config)")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset from a spec file")
    g.add_argument("spec_file")

    t = sub.add_parser("train", help="run the experiment matrix described by a config file")
    t.add_argument("config")
    t.add_argument("--budgets", type=float, nargs="+")
    t.add_argument("--regimes", nargs="+", choices=REGIMES + EXTRA_REGIMES)
    t.add_argument("--repeats", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--finetune-epochs", type=int)
    t.add_argument("--lam", type=float)
    t.add_argument("--lr", type=float)
    t.add_argument("--pretrained-donors", type=int)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset")
    e.add_argument("checkpoint")
    e.add_argument("dataset")
    e.add_argument("--subject")
    e.add_argument("--budget", type=float, help="minutes of training prefix to exclude (default from checkpoint)")
    e.add_argument("--gap-study", action="store_true", help="run the gap interpolation sweep")
    e.add_argument("--gap-regime", choices=("direct", "dann"), default="dann")
    e.add_argument("--config", help="experiment config supplying training settings for the gap study")

    c = sub.add_parser("gradcheck", help="finite-difference check of the full model stack")
    c.add_argument("--fault", choices=("sign-flip",), help="inject a gradient fault (negative control)")
    c.add_argument("--tol", type=float, default=1e-4)
    return p


def _dispatch(args) -> int:
    if args.command == "generate":
        return cmd_generate(args.spec_file, args.out or "dataset")
    if args.command == "gradcheck":
        return cmd_gradcheck(args.out, args.seed or 0, args.fault, args.tol)
    if args.command == "train":
        cfg = load_experiment_config(args.config)
        overrides = {k: getattr(args, k) for k in ("budgets", "regimes", "repeats", "pretrained_donors", "workers", "out")}
        for k, v in overrides.items():
            if v is not None:
                setattr(cfg, k, tuple(v) if isinstance(v, list) else v)
        tr = cfg.train.to_dict()
        for k in ("epochs", "finetune_epochs", "lam", "lr", "seed"):
            if getattr(args, k) is not None:
                tr[k] = getattr(args, k)
        cfg.train = TrainConfig.from_dict(tr)
        return cmd_train(cfg)
    if args.command == "eval":
        gap_cfg, train_cfg = GapStudyConfig(regime=args.gap_regime), TrainConfig()
        if args.config:
            cfg = load_experiment_config(args.config)
            gap_cfg, train_cfg = cfg.gap_study, cfg.train
            gap_cfg.regime = args.gap_regime
        if args.seed is not None:
            train_cfg = TrainConfig.from_dict({**train_cfg.to_dict(), "seed": args.seed})
        return cmd_eval(args.checkpoint, args.dataset, args.out or "eval", args.subject, args.budget,
                        args.gap_study, gap_cfg, train_cfg, args.seed or 0)
    raise ConfigError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return _dispatch(args)
    except (NumericError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, InputError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DannError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
