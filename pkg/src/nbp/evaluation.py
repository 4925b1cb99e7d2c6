"""Sample-based metrics for conditional function prediction.

The log-likelihood of the held-out targets is measured by fitting a
multivariate Gaussian to model samples of the target block and scoring the
true outputs under it.  It is reported per target point (joint log-density
divided by the number of target values).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import EvalProtocol
from .diffusion import DiffusionModel, SamplerConfig, conditional_sample
from .synthdata import Task, task_seed

COV_REG = 1e-6
LOGLIK_NORMALIZATION = "per_point"
# (name, True if larger is better)
METRICS = (("loglik", True), ("mse", False))


def gaussian_fit_loglik(samples: np.ndarray, y_true: np.ndarray, reg: float = COV_REG) -> float:
    """Per-point log-density of ``y_true`` under a Gaussian fitted to ``samples`` (S, M)."""
    samples = np.asarray(samples, dtype=np.float64)
    y_true = np.asarray(y_true, dtype=np.float64).reshape(-1)
    if samples.ndim != 2:
        raise ValueError(f"samples must be (S, M), got shape {samples.shape}")
    S, M = samples.shape
    if S < 2:
        raise ValueError("need at least 2 samples to estimate a covariance")
    if y_true.shape != (M,):
        raise ValueError(f"y_true has {y_true.size} values, samples have {M}")
    mean = samples.mean(axis=0)
    centered = samples - mean
    cov = centered.T @ centered / (S - 1) + reg * np.eye(M)
    L = np.linalg.cholesky(cov)
    z = np.linalg.solve(L, y_true - mean)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    return float(-0.5 * (M * math.log(2 * math.pi) + logdet + z @ z) / M)


def conditional_mse(samples: np.ndarray, y_true: np.ndarray) -> float:
    samples = np.asarray(samples, dtype=np.float64)
    y_true = np.asarray(y_true, dtype=np.float64).reshape(-1)
    if samples.ndim != 2 or samples.shape[1] != y_true.size or samples.shape[0] < 1:
        raise ValueError(f"samples {samples.shape} do not match y_true with {y_true.size} values")
    return float(np.mean((samples - y_true) ** 2))


@dataclass
class TaskRecord:
    task_seed: int
    n_context: int
    loglik: float
    mse: float


@dataclass
class MetricReport:
    label: str
    records: list[TaskRecord] = field(default_factory=list)
    protocol: dict = field(default_factory=dict)

    def aggregate(self, metric: str) -> tuple[float, float]:
        """Mean and standard error (sample std / sqrt(#tasks)) of a per-task metric."""
        vals = np.array([getattr(r, metric) for r in self.records], dtype=np.float64)
        if vals.size == 0:
            raise ValueError("report has no records")
        se = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0
        return float(vals.mean()), se

    def aggregates(self) -> dict:
        out = {}
        for name, _ in METRICS:
            mean, se = self.aggregate(name)
            out[name] = {"mean": mean, "se": se}
        return out

    def to_json(self) -> str:
        doc = {
            "label": self.label,
            "n_tasks": len(self.records),
            "loglik_normalization": LOGLIK_NORMALIZATION,
            "protocol": self.protocol,
            "metrics": self.aggregates(),
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task_seed", "n_context", "loglik_per_point", "mse"])
        for r in self.records:
            w.writerow([r.task_seed, r.n_context, repr(r.loglik), repr(r.mse)])
        return buf.getvalue()

    def write(self, out_dir, stem: str = "report") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.json"
        csv_path.write_text(self.to_csv(), encoding="utf-8")
        json_path.write_text(self.to_json(), encoding="utf-8")
        return csv_path, json_path


def evaluate_task(task: Task, model: DiffusionModel, protocol: EvalProtocol) -> TaskRecord:
    x_c, y_c = task.context()
    x_t, y_t = task.target()
    sampler = SamplerConfig(repaint_repeats=protocol.repaint, seed=task_seed(protocol.seed, task.seed))
    samples = conditional_sample(x_c, y_c, x_t, model, sampler, n_samples=protocol.n_samples, d_y=task.y.shape[1])
    flat = samples.reshape(protocol.n_samples, -1)
    truth = y_t.reshape(-1)
    return TaskRecord(
        task_seed=task.seed,
        n_context=task.n_context,
        loglik=gaussian_fit_loglik(flat, truth),
        mse=conditional_mse(flat, truth),
    )


def evaluate_run(
    model: DiffusionModel,
    tasks: Sequence[Task],
    protocol: EvalProtocol,
    label: str = "model",
    progress: Callable[[int, TaskRecord], None] | None = None,
) -> MetricReport:
    """Score ``model`` (already carrying the weights to evaluate, normally EMA) on ``tasks``.

    The sampler seed of each task is derived from ``(protocol.seed, task.seed)``,
    so results do not depend on task order or on which other tasks are present.
    """
    if not tasks:
        raise ValueError("empty task set")
    report = MetricReport(label=label, protocol=protocol.to_dict())
    for i, task in enumerate(tasks):
        rec = evaluate_task(task, model, protocol)
        report.records.append(rec)
        if progress is not None:
            progress(i, rec)
    return report


def read_report(path) -> dict:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if "metrics" not in doc or "label" not in doc:
        raise ValueError(f"{path} is not a metric report")
    return doc


@dataclass
class Comparison:
    rows: list[dict]
    label_a: str
    label_b: str

    @property
    def wins(self) -> int:
        return sum(r["winner"] == self.label_a for r in self.rows)

    @property
    def verdict(self) -> str:
        return f"{self.label_a} wins {self.wins}/{len(self.rows)}"

    def to_text(self) -> str:
        lines = [f"{'metric':<8} {self.label_a:>12} {self.label_b:>12} {'diff':>12} {'joint_se':>10}  winner"]
        for r in self.rows:
            lines.append(
                f"{r['metric']:<8} {r['a']:>12.6f} {r['b']:>12.6f} {r['diff']:>12.6f} {r['joint_se']:>10.6f}  {r['winner']}"
            )
        lines.append(self.verdict)
        return "\n".join(lines) + "\n"


def compare(report_a: dict, report_b: dict) -> Comparison:
    """Metric-by-metric comparison of two report documents (as read by :func:`read_report`).

    ``joint_se`` is sqrt(se_a^2 + se_b^2).  Ties go to neither side.
    """
    la, lb = report_a["label"], report_b["label"]
    if la == lb:
        lb = lb + "_b"
    rows = []
    for name, higher_better in METRICS:
        a, b = report_a["metrics"][name], report_b["metrics"][name]
        diff = a["mean"] - b["mean"]
        better = diff > 0 if higher_better else diff < 0
        winner = la if better else (lb if diff != 0 else "tie")
        rows.append(
            {
                "metric": name,
                "a": a["mean"],
                "b": b["mean"],
                "diff": diff,
                "joint_se": math.hypot(a["se"], b["se"]),
                "winner": winner,
            }
        )
    return Comparison(rows=rows, label_a=la, label_b=lb)
