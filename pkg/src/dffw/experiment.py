"""Cross-validation harness and the hidden/factor energy sweep.

A fold trains one model on the fold's training trajectories (normalizer
fitted on those only) and evaluates it on the held-out trajectories:

* classification from the 2D part of the present layer plus history,
* present-step 3D estimation with the 2D units clamped,
* autonomous multi-step rollouts started every ``stride`` frames; the
  k-step prediction from a rollout seeded at frame ``t0`` is scored
  against frame ``t0 + k - 1``.

Regression scores are computed per test trajectory in world units on the
unknown (3D) coordinates and pooled across folds.
"""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .data import (
    BALLS_PARTITION, NormStats, Samples, VisiblePartition, build_samples, fit_normalizer,
    history_feedback, kfold_by_trajectory,
)
from .inference import (
    NonFiniteRolloutError, classify, dataset_energy, estimate_present, predict_multistep,
)
from .metrics import EvalReport, accuracy, mean_std, series_scores
from .model import LayerDims, ModelParams, init_params
from .training import TrainConfig, train

log = logging.getLogger(__name__)

MODEL_KINDS = ("dffw", "ffw")


@dataclass(frozen=True)
class ExperimentConfig:
    history: int = 50
    n_h: int = 10
    n_f: int = 100
    init_std: float = 0.3
    init_seed: int = 0
    eval_seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    gibbs_steps: int = 3
    horizons: tuple = (1, 50)
    stride: int = 10
    n_train: int = 1
    partition: VisiblePartition = BALLS_PARTITION

    def dims(self, kind: str, n_v: int, n_l: int) -> LayerDims:
        if kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
        n_f2 = self.n_f if kind == "dffw" else 0
        return LayerDims(n_v, self.n_h, 2 * self.history, n_l, self.n_f, n_f2)


@dataclass
class FoldData:
    fold: int
    train_ids: list
    test_ids: list
    stats: NormStats
    train: Samples  # normalized
    test: Samples  # normalized
    test_raw: Samples


def prepare_fold(samples: Samples, fold: int, train_ids, test_ids) -> FoldData:
    train_raw = samples.for_trajectories(train_ids)
    test_raw = samples.for_trajectories(test_ids)
    stats = fit_normalizer(train_raw)
    return FoldData(fold, list(train_ids), list(test_ids), stats,
                    stats.apply(train_raw), stats.apply(test_raw), test_raw)


def fit_model(kind: str, train_samples: Samples, cfg: ExperimentConfig):
    """Initialize and train one machine. Returns ``(params, epoch_log)``."""
    dims = cfg.dims(kind, train_samples.present.shape[1], train_samples.label.shape[1])
    params = init_params(dims, cfg.init_seed, cfg.init_std)
    return train(params, train_samples, cfg.train)


@dataclass
class FoldResult:
    fold: int
    kind: str
    accuracy: float
    present: list  # one score dict per test trajectory
    multistep: dict  # horizon -> list of score dicts
    epoch_log: list = field(default_factory=list)
    rollout_failed_step: int | None = None
    params: ModelParams | None = None

    def mean(self, metric: str, horizon: int | None = None) -> float:
        scores = self.present if horizon is None else self.multistep[horizon]
        return float(np.mean([s[metric] for s in scores]))


def _fold_rng(cfg: ExperimentConfig, fold: int, task: int) -> np.random.Generator:
    return np.random.default_rng([cfg.eval_seed, fold, task])


def evaluate_classification(params: ModelParams, data: FoldData, cfg: ExperimentConfig):
    pred, _ = classify(params, data.test.present, data.test.hist, cfg.gibbs_steps,
                       _fold_rng(cfg, data.fold, 0), known_idx=cfg.partition.known_idx)
    return accuracy(pred, data.test.class_id), pred


def evaluate_present_step(params: ModelParams, data: FoldData, cfg: ExperimentConfig):
    known = list(cfg.partition.known_idx)
    unknown = list(cfg.partition.unknown_idx)
    est = estimate_present(params, data.test.present[:, known], data.test.hist, None,
                           cfg.partition, cfg.gibbs_steps, _fold_rng(cfg, data.fold, 1))
    est_raw = data.stats.present_to_raw(est)
    scores = []
    for tid in data.test_ids:
        rows = data.test.traj_id == tid
        scores.append(series_scores(est_raw[rows][:, unknown], data.test_raw.present[rows][:, unknown]))
    return scores


def rollout_starts(n_samples: int, max_horizon: int, stride: int) -> np.ndarray:
    """Sample indices (within one trajectory) whose history seeds a rollout
    that stays inside the trajectory for ``max_horizon`` steps."""
    return np.arange(0, n_samples - max_horizon + 1, stride)


def evaluate_multistep(params: ModelParams, data: FoldData, cfg: ExperimentConfig):
    """Returns ``(scores by horizon, failed_step)``; ``failed_step`` is the
    rollout step that produced a non-finite value, or None."""
    horizons = tuple(sorted(set(cfg.horizons)))
    max_h = horizons[-1]
    unknown = list(cfg.partition.unknown_idx)
    seeds, truths, owners = [], [], []
    for tid in data.test_ids:
        rows = np.flatnonzero(data.test.traj_id == tid)
        starts = rollout_starts(rows.size, max_h, cfg.stride)
        if starts.size < 3:
            log.warning("trajectory %d too short for %d-step rollouts; skipped", tid, max_h)
            continue
        seeds.append(data.test.hist[rows[starts]])
        truths.append(np.stack([data.test_raw.present[rows[starts + k - 1]] for k in horizons], axis=1))
        owners.append(np.full(starts.size, tid))
    out = {k: [] for k in horizons}
    if not seeds:
        return out, None
    seed_hist, truth, owner = np.concatenate(seeds), np.concatenate(truths), np.concatenate(owners)
    feedback = history_feedback(data.stats, cfg.partition.known_idx, len(cfg.partition.known_idx))
    try:
        pred = predict_multistep(params, seed_hist, None, max_h, cfg.partition,
                                 _fold_rng(cfg, data.fold, 2), cfg.gibbs_steps, feedback)
    except NonFiniteRolloutError as exc:
        log.warning("fold %d: %s", data.fold, exc)
        return {k: [] for k in horizons}, exc.step
    pred_raw = data.stats.present_to_raw(pred)
    for j, k in enumerate(horizons):
        for tid in np.unique(owner):
            rows = owner == tid
            out[k].append(series_scores(pred_raw[rows, k - 1][:, unknown], truth[rows, j][:, unknown]))
    return out, None


def run_fold(kind: str, data: FoldData, cfg: ExperimentConfig) -> FoldResult:
    params, epoch_log = fit_model(kind, data.train, cfg)
    acc, _ = evaluate_classification(params, data, cfg)
    present = evaluate_present_step(params, data, cfg)
    multi, failed = evaluate_multistep(params, data, cfg)
    log.info("fold %d %s: accuracy %.2f, present nrmse %.3f", data.fold, kind, acc,
             float(np.mean([s["nrmse"] for s in present])))
    return FoldResult(data.fold, kind, acc, present, multi, epoch_log, failed, params)


def run_cv(trajs, cfg: ExperimentConfig, kinds=MODEL_KINDS, folds=None, threads: int = 1):
    """Cross-validate every model kind. Returns ``{kind: [FoldResult, ...]}``
    ordered by fold."""
    samples = build_samples(trajs, cfg.history)
    splits = kfold_by_trajectory(trajs, cfg.n_train)
    chosen = range(len(splits)) if folds is None else folds
    prepared = [prepare_fold(samples, i, *splits[i]) for i in chosen]
    jobs = [(kind, data) for data in prepared for kind in kinds]
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(lambda job: run_fold(job[0], job[1], cfg), jobs))
    out = {kind: [] for kind in kinds}
    for res in results:
        out[res.kind].append(res)
    return out


def cv_reports(results) -> list[EvalReport]:
    """Classification accuracy per fold; regression scores per trajectory."""
    results = list(results)
    reports = [EvalReport("classification")]
    for r in results:
        reports[0].add("accuracy", r.accuracy)
    present = EvalReport("present_step")
    for r in results:
        for s in r.present:
            for metric, value in s.items():
                present.add(metric, value)
    reports.append(present)
    horizons = sorted({k for r in results for k in r.multistep})
    for k in horizons:
        rep = EvalReport(f"multistep({k})")
        for r in results:
            for s in r.multistep.get(k, []):
                for metric, value in s.items():
                    rep.add(metric, value)
        reports.append(rep)
    return reports


def fold_margin(a: list, b: list, metric: str, lower_is_better: bool, horizon: int | None = None) -> int:
    """Number of folds where ``a`` beats ``b`` minus folds where it loses."""
    margin = 0
    for ra, rb in zip(a, b):
        da, db = ra.mean(metric, horizon), rb.mean(metric, horizon)
        if da == db:
            continue
        better = da < db if lower_is_better else da > db
        margin += 1 if better else -1
    return margin


# -- energy sweep -------------------------------------------------------------

SWEEP_HEADER = ["model", "n_h", "n_f", "energy_mean", "energy_std"]


@dataclass
class SweepCell:
    model: str
    n_h: int
    n_f: int
    energy_mean: float = float("nan")
    energy_std: float = float("nan")
    error: str | None = None


def energy_split(trajs, cfg: ExperimentConfig, fold: int = 0):
    """Normalized (train, all) samples of one fold: the model trains on the
    fold's training trajectories; energy is reported over every trajectory."""
    samples = build_samples(trajs, cfg.history)
    train_ids, _ = kfold_by_trajectory(trajs, cfg.n_train)[fold]
    stats = fit_normalizer(samples.for_trajectories(train_ids))
    return stats.apply(samples.for_trajectories(train_ids)), stats.apply(samples)


def energy_cell(kind: str, train_samples: Samples, eval_samples: Samples, cfg: ExperimentConfig) -> SweepCell:
    cell = SweepCell(kind, cfg.n_h, cfg.n_f)
    try:
        params, _ = fit_model(kind, train_samples, cfg)
        cell.energy_mean, cell.energy_std = dataset_energy(params, eval_samples, cfg.gibbs_steps)
    except (FloatingPointError, ValueError) as exc:
        cell.error = f"{type(exc).__name__}: {exc}"
        log.warning("sweep cell %s n_h=%d n_f=%d failed: %s", kind, cfg.n_h, cfg.n_f, exc)
    return cell


def sweep(trajs, cfg: ExperimentConfig, hidden=(10, 20, 40), factors=(10, 40, 100),
          kinds=MODEL_KINDS, fold: int = 0, threads: int = 1) -> list[SweepCell]:
    """Retrain from scratch for every (n_h, n_f, kind) and record the
    dataset energy. Failed cells are kept with their error message."""
    if not hidden or not factors:
        raise ValueError("sweep grid is empty")
    train_samples, eval_samples = energy_split(trajs, cfg, fold)
    jobs = [(kind, replace(cfg, n_h=h, n_f=f)) for h in hidden for f in factors for kind in kinds]
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        return list(pool.map(lambda job: energy_cell(job[0], train_samples, eval_samples, job[1]), jobs))


def write_sweep(path, cells) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SWEEP_HEADER)
        for c in cells:
            writer.writerow([c.model, c.n_h, c.n_f, repr(c.energy_mean), repr(c.energy_std)])


def write_sweep_errors(path, cells) -> int:
    failed = [c for c in cells if c.error]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["model", "n_h", "n_f", "error"])
        for c in failed:
            writer.writerow([c.model, c.n_h, c.n_f, c.error])
    return len(failed)


def energy_summary(cells) -> dict:
    """Fraction of grid points where DFFW has strictly lower energy."""
    by_key = {(c.model, c.n_h, c.n_f): c for c in cells}
    wins = total = 0
    for (model, h, f), c in by_key.items():
        other = by_key.get(("ffw", h, f))
        if model != "dffw" or other is None or c.error or other.error:
            continue
        total += 1
        wins += c.energy_mean < other.energy_mean
    return {"cells": total, "dffw_lower": wins, "fraction": wins / total if total else float("nan")}


__all__ = [
    "ExperimentConfig", "FoldData", "FoldResult", "MODEL_KINDS", "SweepCell", "cv_reports",
    "energy_cell", "energy_split", "energy_summary", "evaluate_classification",
    "evaluate_multistep", "evaluate_present_step", "fit_model", "fold_margin", "mean_std",
    "prepare_fold", "rollout_starts", "run_cv", "run_fold", "sweep", "write_sweep",
    "write_sweep_errors",
]
