"""Evaluation metrics: NRMSE, Pearson correlation and its p-value, accuracy,
and mean/std aggregation into report rows."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import special


def _as_columns(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x[:, None] if x.ndim == 1 else x


def nrmse(pred, truth) -> float:
    """Root-mean-square error as a percentage of the ground-truth range.

    Multi-dimensional series (T, D) are scored per dimension and averaged.
    """
    pred, truth = _as_columns(pred), _as_columns(truth)
    if pred.shape != truth.shape or pred.shape[0] < 2:
        raise ValueError(f"need equal-shape series of length >= 2, got {pred.shape} and {truth.shape}")
    span = truth.max(axis=0) - truth.min(axis=0)
    if np.any(span == 0):
        raise ValueError("ground truth is constant in at least one dimension; range undefined")
    rmse = np.sqrt(np.mean((pred - truth) ** 2, axis=0))
    return float(np.mean(100.0 * rmse / span))


def pcc(pred, truth) -> float:
    """Sample Pearson correlation, per dimension then averaged."""
    pred, truth = _as_columns(pred), _as_columns(truth)
    if pred.shape != truth.shape or pred.shape[0] < 3:
        raise ValueError(f"need equal-shape series of length >= 3, got {pred.shape} and {truth.shape}")
    dp = pred - pred.mean(axis=0)
    dt = truth - truth.mean(axis=0)
    sp = np.sqrt((dp ** 2).sum(axis=0))
    st = np.sqrt((dt ** 2).sum(axis=0))
    if np.any(sp == 0) or np.any(st == 0):
        raise ValueError("correlation undefined for a constant series")
    r = (dp * dt).sum(axis=0) / (sp * st)
    return float(np.mean(np.clip(r, -1.0, 1.0)))


def pcc_pvalue(r: float, n: int) -> float:
    """Two-sided p-value of Pearson ``r`` from ``n`` pairs (t-test, n-2 dof)."""
    if n < 3:
        raise ValueError(f"need n >= 3, got {n}")
    if abs(r) > 1.0:
        raise ValueError(f"|r| must be <= 1, got {r}")
    if abs(r) == 1.0:
        return 0.0
    df = n - 2
    t2 = r * r * df / (1.0 - r * r)
    # P(|T| > |t|) = I_{df/(df+t^2)}(df/2, 1/2)
    return float(special.betainc(0.5 * df, 0.5, df / (df + t2)))


def series_scores(pred, truth) -> dict:
    """NRMSE, PCC and per-dimension-averaged p-value for one sequence."""
    pred, truth = _as_columns(pred), _as_columns(truth)
    n = pred.shape[0]
    rs = [pcc(pred[:, d], truth[:, d]) for d in range(pred.shape[1])]
    return {
        "nrmse": nrmse(pred, truth),
        "pcc": float(np.mean(rs)),
        "pvalue": float(np.mean([pcc_pvalue(r, n) for r in rs])),
    }


def accuracy(pred_labels, true_labels) -> float:
    pred_labels, true_labels = np.asarray(pred_labels), np.asarray(true_labels)
    if pred_labels.shape != true_labels.shape or pred_labels.size < 1:
        raise ValueError("label vectors must be non-empty and of equal length")
    return float(100.0 * np.mean(pred_labels == true_labels))


def mean_std(values) -> tuple[float, float]:
    """Unweighted mean and sample standard deviation (0 for one value)."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("nothing to aggregate")
    std = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return float(values.mean()), std


@dataclass
class EvalReport:
    """Aggregated metrics of one task: ``classification``, ``present_step``
    or ``multistep(k)``. ``values`` maps metric name -> per-fold or
    per-sequence values; aggregation happens on demand."""

    task: str
    values: dict = field(default_factory=dict)
    n: int = 0

    def add(self, metric: str, value: float) -> None:
        self.values.setdefault(metric, []).append(float(value))

    def rows(self):
        for metric, vals in self.values.items():
            mean, std = mean_std(vals)
            yield {"task": self.task, "metric": metric, "mean": mean, "std": std, "n": self.n or len(vals)}


def aggregate(reports) -> EvalReport:
    """Pool reports of the same task (e.g. one per fold) into one."""
    reports = list(reports)
    tasks = {r.task for r in reports}
    if len(tasks) != 1:
        raise ValueError(f"cannot aggregate different tasks: {sorted(tasks)}")
    out = EvalReport(tasks.pop())
    for r in reports:
        for metric, vals in r.values.items():
            for v in vals:
                out.add(metric, v)
        out.n += r.n
    return out


REPORT_HEADER = ["task", "metric", "mean", "std", "n"]


def write_report(path, reports, header_comment: str | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header_comment:
            for line in header_comment.splitlines():
                fh.write(f"# {line}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_HEADER)
        for report in reports:
            for row in report.rows():
                writer.writerow([row["task"], row["metric"], repr(row["mean"]), repr(row["std"]), row["n"]])


def read_report(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    rows = list(csv.DictReader(lines))
    for row in rows:
        row["mean"], row["std"], row["n"] = float(row["mean"]), float(row["std"]), int(row["n"])
    return rows
