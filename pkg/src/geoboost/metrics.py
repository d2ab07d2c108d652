"""Evaluation: the cosine@k ranking score for branch visits, ROC AUC for
the application task, and the monitoring losses."""

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import NumericError, UndefinedMetricError, ValidationError


@dataclass(frozen=True)
class Task1Prediction:
    """Top-5 submission for one customer: branch ids with predicted visit
    values, ordered by descending value (ties by ascending branch id)."""

    branch_ids: tuple[int, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.branch_ids) != 5 or len(self.values) != 5:
            raise ValidationError("a top-5 prediction needs exactly 5 branches and 5 values")
        if len(set(self.branch_ids)) != 5:
            raise ValidationError(f"duplicate branch ids in {self.branch_ids}")
        for v in self.values:
            if not (math.isfinite(v) and v > 0):
                raise ValidationError(f"predicted values must be finite and > 0, got {v}")
        for a, b, ia, ib in zip(self.values, self.values[1:], self.branch_ids, self.branch_ids[1:]):
            if a < b or (a == b and ia > ib):
                raise ValidationError("values must be descending with ties by ascending branch id")


@dataclass(frozen=True)
class MetricReport:
    task: str
    score: float
    n_scored: int
    cosine1_mean: float | None = None
    cosine5_mean: float | None = None
    n_zero_excluded: int | None = None
    auc: float | None = None
    per_customer: dict | None = None

    def as_lines(self):
        lines = [f"task={self.task}", f"n_scored={self.n_scored}"]
        if self.task == "task1":
            lines += [
                f"n_zero_excluded={self.n_zero_excluded}",
                f"cosine1_mean={self.cosine1_mean!r}",
                f"cosine5_mean={self.cosine5_mean!r}",
                f"task1_score={self.score!r}",
            ]
        else:
            lines.append(f"auc={self.score!r}")
        return lines


def cosine_at_k(true_counts, selected, k: int) -> float:
    """Cosine between the full true visit vector and the first k submitted
    (branch, value) pairs; the true norm runs over all branches, the
    submitted norm over the k pairs. 0 when either norm is 0."""
    y = np.asarray(true_counts, dtype=float)
    if k > len(selected):
        raise ValueError(f"k={k} exceeds the {len(selected)} submitted pairs")
    branches = [b for b, _ in selected]
    if len(set(branches)) != len(branches):
        raise ValidationError(f"duplicate branch in selection {branches}")
    top = selected[:k]
    num = sum(y[b] * v for b, v in top)
    y_norm = math.sqrt(float(np.sum(y * y)))
    v_norm = math.sqrt(sum(v * v for _, v in top))
    if y_norm == 0.0 or v_norm == 0.0:
        return 0.0
    return num / (y_norm * v_norm)


def task1_score(truth, predictions) -> MetricReport:
    """Mean of (cosine@1 + cosine@5)/2 over customers with at least one
    visit; zero-visit customers are excluded from the mean.

    truth maps customer_id -> full visit-count vector over all branches;
    predictions maps customer_id -> Task1Prediction.
    """
    per_customer = {}
    c1s, c5s = [], []
    n_excluded = 0
    for cid in sorted(truth):
        if cid not in predictions:
            raise ValidationError(f"no prediction for customer {cid}")
        y = np.asarray(truth[cid], dtype=float)
        if not np.any(y > 0):
            n_excluded += 1
            continue
        pred = predictions[cid]
        pairs = list(zip(pred.branch_ids, pred.values))
        c1 = cosine_at_k(y, pairs, 1)
        c5 = cosine_at_k(y, pairs, 5)
        per_customer[cid] = (c1, c5)
        c1s.append(c1)
        c5s.append(c5)
    if not c1s:
        raise UndefinedMetricError("no customer has a nonzero visit vector")
    c1_mean = float(np.mean(c1s))
    c5_mean = float(np.mean(c5s))
    return MetricReport(
        task="task1",
        score=0.5 * (c1_mean + c5_mean),
        n_scored=len(c1s),
        cosine1_mean=c1_mean,
        cosine5_mean=c5_mean,
        n_zero_excluded=n_excluded,
        per_customer=per_customer,
    )


def auc(labels, scores) -> float:
    """Mann-Whitney AUC via rank sums; tied scores get average ranks
    (half credit per tied positive-negative pair)."""
    y = np.asarray(labels)
    s = np.asarray(scores, dtype=float)
    if y.shape != s.shape or y.ndim != 1:
        raise ValueError("labels and scores must be 1-D and aligned")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC undefined: only one class present")
    ranks = rankdata(s, method="average")
    u = float(ranks[y == 1].sum()) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def task2_report(labels, scores) -> MetricReport:
    value = auc(labels, scores)
    return MetricReport(task="task2", score=value, n_scored=len(labels), auc=value)


def poisson_deviance(y, mu) -> float:
    """Mean Poisson deviance 2*mean[y*log(y/mu) - (y - mu)], with the
    y*log(y/mu) term taken as 0 at y = 0."""
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if np.any(mu <= 0) or not np.isfinite(mu).all():
        raise NumericError("poisson deviance needs mu > 0")
    if np.any(y < 0):
        raise ValueError("poisson deviance needs y >= 0")
    term = np.zeros_like(y)
    nz = y > 0
    term[nz] = y[nz] * np.log(y[nz] / mu[nz])
    return float(2.0 * np.mean(term - (y - mu)))


def log_loss(y, p, pos_weight: float = 1.0) -> float:
    """Mean class-weighted logistic loss in probability space."""
    y = np.asarray(y, dtype=float)
    p = np.asarray(p, dtype=float)
    if np.any(p <= 0) or np.any(p >= 1):
        raise NumericError("log loss needs p in (0,1)")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    w = np.where(y == 1, pos_weight, 1.0)
    return float(np.mean(w * (-y * np.log(p) - (1.0 - y) * np.log(1.0 - p))))


__all__ = [
    "Task1Prediction",
    "MetricReport",
    "cosine_at_k",
    "task1_score",
    "auc",
    "task2_report",
    "poisson_deviance",
    "log_loss",
]
