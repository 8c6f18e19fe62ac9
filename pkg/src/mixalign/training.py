"""Experiment driver: train / evaluate / ablate from a :class:`TrainConfig`.

Files written by :func:`run_train` into the output directory:

``config.resolved``
    the full config, every key spelled out
``runlog.csv``
    one row per epoch (loss aggregates, lr, student and EMA validation metrics);
    deterministic for a fixed config, so wall time lives in ``timing.csv``
``metrics.csv``
    final val and held-out reports of the returned model
``last.ckpt`` / ``best.ckpt``
    resumable state after the latest epoch / at the best monitored epoch
``diagnostic.npz`` + ``diagnostic.json``
    only when a non-finite loss aborts the run
"""

from __future__ import annotations

import csv
import json
import logging
import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import COMPONENTS, TrainConfig
from .data import SyntheticSplit, make_domains, make_split
from .estimator import MixAlignDistilClassifier, NonFiniteLossError
from .metrics import MetricsReport

__all__ = [
    "TrainingAborted",
    "RunResult",
    "build_split",
    "run_train",
    "run_eval",
    "run_ablation",
    "load_estimator",
    "summarize_ablation",
]

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "heldout")


class TrainingAborted(RuntimeError):
    pass


@dataclass
class RunResult:
    estimator: MixAlignDistilClassifier
    out_dir: Path
    val: MetricsReport
    heldout: MetricsReport


_split_cache: dict[tuple, SyntheticSplit] = {}


def build_split(cfg: TrainConfig, cache: bool = True) -> SyntheticSplit:
    """Generate (or reuse) the synthetic data described by ``cfg.data``."""
    d = cfg.data
    key = (d.n_train_domains, d.n_heldout_domains, d.n_per_domain, d.imbalance_ratio, d.val_fraction, cfg.data_seed)
    if cache and key in _split_cache:
        return _split_cache[key]
    train_domains, heldout_domains = make_domains(d.n_train_domains, d.n_heldout_domains, seed=cfg.data_seed)
    split = make_split(
        train_domains,
        n_per_domain=d.n_per_domain,
        imbalance_ratio=d.imbalance_ratio,
        seed=cfg.data_seed,
        heldout_domains=heldout_domains,
        val_fraction=d.val_fraction,
    )
    if cache:
        _split_cache.clear()
        _split_cache[key] = split
    return split


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _save(path: Path, est: MixAlignDistilClassifier, cfg: TrainConfig) -> None:
    meta, arrays = est.state()
    save_checkpoint(path, {"estimator": meta, "config": cfg.dumps(), "config_hash": cfg.config_hash()}, arrays)


def load_estimator(path, expected: TrainConfig | None = None) -> tuple[MixAlignDistilClassifier, TrainConfig]:
    """Rebuild the estimator and its config; warn when ``expected`` hashes differently."""
    meta, arrays = load_checkpoint(path)
    cfg = TrainConfig.loads(meta["config"])
    if expected is not None and expected.config_hash() != meta["config_hash"]:
        warnings.warn(
            f"config hash mismatch: checkpoint {meta['config_hash']} vs supplied {expected.config_hash()}",
            stacklevel=2,
        )
    return MixAlignDistilClassifier.from_state(meta["estimator"], arrays), cfg


# ---------------------------------------------------------------------------
# logging
# ---------------------------------------------------------------------------

_TIMING_KEYS = ("seconds",)


class _CsvLog:
    """Append-only CSV whose columns are fixed by the first row."""

    def __init__(self, path: Path, rows: list[dict] = ()):
        self.path = path
        self.columns: list[str] | None = None
        path.write_text("")
        for row in rows:
            self.append(row)

    def append(self, row: dict) -> None:
        if self.columns is None:
            self.columns = list(row)
            with self.path.open("w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(self.columns)
        with self.path.open("a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow([_cell(row.get(c, "")) for c in self.columns])


def _cell(value):
    if isinstance(value, float):
        return repr(value)
    return value


_LEADING = ("epoch", "lr", "l_cls", "l_align", "l_kd", "lambda_align", "lambda_kd", "l_total", "grad_norm", "steps")


def _split_row(row: dict) -> tuple[dict, dict]:
    # fixed column order: rows restored from a checkpoint come back with sorted keys
    keys = [k for k in _LEADING if k in row] + sorted(k for k in row if k not in _LEADING)
    log = {k: row[k] for k in keys if k not in _TIMING_KEYS}
    timing = {"epoch": row["epoch"], **{k: row[k] for k in _TIMING_KEYS if k in row}}
    return log, timing


def _write_metrics(path: Path, reports: dict[str, MetricsReport]) -> None:
    with path.open("w", newline="") as fh:
        writer = None
        for split, report in reports.items():
            row = {"split": split, **report.as_row()}
            if writer is None:
                writer = csv.DictWriter(fh, fieldnames=list(row), lineterminator="\n")
                writer.writeheader()
            writer.writerow({k: _cell(v) for k, v in row.items()})


# ---------------------------------------------------------------------------
# train / eval / ablate
# ---------------------------------------------------------------------------

def run_train(
    cfg: TrainConfig,
    out_dir=None,
    resume: bool = False,
    split: SyntheticSplit | None = None,
    stop_after_epochs: int | None = None,
) -> RunResult:
    """Train one model; with ``resume`` continue from ``last.ckpt`` in ``out_dir``.

    ``stop_after_epochs`` ends the call early (as if the process were killed
    after that many epochs in this call); the checkpoint written at that
    point can be resumed.
    """
    out = Path(out_dir if out_dir is not None else cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(cfg.dumps())
    split = build_split(cfg) if split is None else split

    last = out / "last.ckpt"
    if resume and last.exists():
        est, _ = load_estimator(last, expected=cfg)
        est.set_params(warm_start=True)
    else:
        est = MixAlignDistilClassifier(**cfg.estimator_params())
    history = list(getattr(est, "history_", []))
    runlog = _CsvLog(out / "runlog.csv", [_split_row(r)[0] for r in history])
    timing = _CsvLog(out / "timing.csv", [_split_row(r)[1] for r in history])

    class _Stop(Exception):
        pass

    done = [0]

    def on_epoch(estimator, row):
        log_row, time_row = _split_row(row)
        runlog.append(log_row)
        timing.append(time_row)
        _save(last, estimator, cfg)
        if estimator.best_epoch_ == row["epoch"]:
            _save(out / "best.ckpt", estimator, cfg)
        logger.info("epoch %d done", row["epoch"])
        done[0] += 1
        if stop_after_epochs is not None and done[0] >= stop_after_epochs:
            raise _Stop

    try:
        est.fit(
            split.train.images,
            split.train.labels,
            split.train.domain_ids,
            eval_set=(split.val.images, split.val.labels),
            callbacks=[on_epoch],
        )
    except _Stop:
        pass
    except NonFiniteLossError as exc:
        batch = exc.batch
        arrays = {k: np.asarray(v) for k, v in batch.items() if isinstance(v, np.ndarray)}
        np.savez(out / "diagnostic.npz", **arrays)
        scalars = {k: v for k, v in batch.items() if not isinstance(v, np.ndarray)}
        (out / "diagnostic.json").write_text(json.dumps({"error": str(exc), **scalars}, indent=2, default=float))
        raise TrainingAborted(f"non-finite loss; batch dumped to {out / 'diagnostic.npz'}") from exc

    reports = {
        "val": est.evaluate(split.val.images, split.val.labels),
        "heldout": est.evaluate(split.heldout.images, split.heldout.labels),
    }
    _write_metrics(out / "metrics.csv", reports)
    return RunResult(est, out, reports["val"], reports["heldout"])


def run_eval(ckpt, split_name: str = "heldout", config: TrainConfig | None = None, out_path=None) -> MetricsReport:
    """Evaluate a checkpoint on one split with the weights ``predict`` would use (EMA by default)."""
    if split_name not in SPLITS:
        raise ValueError(f"split must be one of {', '.join(SPLITS)}, got {split_name!r}")
    est, cfg = load_estimator(ckpt, expected=config)
    part = build_split(cfg)[split_name]
    report = est.evaluate(part.images, part.labels)
    path = Path(out_path) if out_path is not None else Path(ckpt).with_name(f"eval_{split_name}.csv")
    _write_metrics(path, {split_name: report})
    return report


def summarize_ablation(rows: list[dict]) -> list[dict]:
    """Mean and sample standard deviation of held-out metrics per component."""
    out = []
    for component in dict.fromkeys(r["component"] for r in rows):
        cell = [r for r in rows if r["component"] == component]
        summary = {"component": component, "n_seeds": len(cell)}
        for metric in ("balanced_accuracy", "sensitivity", "specificity", "roc_auc"):
            values = np.array([r[metric] for r in cell], dtype=np.float64)
            summary[f"{metric}_mean"] = float(values.mean())
            summary[f"{metric}_std"] = float(values.std(ddof=1)) if len(values) > 1 else 0.0
        out.append(summary)
    return out


def run_ablation(cfg: TrainConfig, seeds, components=COMPONENTS, out_dir=None) -> tuple[list[dict], list[dict]]:
    """Train every (component, seed) cell; write ``ablation.csv`` and ``ablation_summary.csv``.

    ``seeds`` is a count (seeds ``0..N-1``) or an explicit list. Returns the
    per-cell rows and the per-component summary.
    """
    seeds = list(range(seeds)) if isinstance(seeds, int) else [int(s) for s in seeds]
    if not seeds:
        raise ValueError("need at least one seed")
    for c in components:
        if c not in COMPONENTS:
            raise ValueError(f"unknown component {c!r}; expected one of {', '.join(COMPONENTS)}")
    base = Path(out_dir if out_dir is not None else cfg.run.out_dir)
    base.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in seeds:
        for component in components:
            cell_cfg = cfg.with_components(component).with_seed(seed)
            started = time.perf_counter()
            result = run_train(cell_cfg, base / component / f"seed{seed}")
            row = {"component": component, "seed": seed, **result.heldout.as_row()}
            row["epochs_run"] = result.estimator.epoch_
            row["seconds"] = time.perf_counter() - started
            rows.append(row)
            logger.info("%s seed %d: heldout BA %.4f", component, seed, result.heldout.balanced_accuracy)
    order = {c: i for i, c in enumerate(components)}
    rows.sort(key=lambda r: (order[r["component"]], r["seed"]))
    _write_rows(base / "ablation.csv", rows)
    summary = summarize_ablation(rows)
    _write_rows(base / "ablation_summary.csv", summary)
    return rows, summary


def _write_rows(path: Path, rows: list[dict]) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _cell(v) for k, v in row.items()})
