"""Second-order gradient boosted regression trees.

Newton boosting with L2 leaf regularization and exact greedy split
finding. Two losses: Poisson (log link, for visit counts) and
class-weighted logistic (for the application flag). Trees are grown
depth-first to max_depth; the only pruning is gain > 0 and a minimum
child hessian sum. Deterministic for a fixed seed, independent of the
kernel backend.
"""

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import kernels
from .errors import NumericError, ParseError, ValidationError
from .features import FeatureMatrix

MODEL_FORMAT_VERSION = 1
_BASE_EPS = 1e-12


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PoissonLoss:
    """Poisson negative log-likelihood in log-link raw-score space:
    l(s, y) = exp(s) - y*s."""

    tag = "poisson"

    def validate_targets(self, y):
        if np.any(y < 0) or not np.isfinite(y).all():
            raise ValueError("poisson targets must be finite and >= 0")

    def base_score(self, y) -> float:
        return math.log(float(np.mean(y)) + _BASE_EPS)

    def grad_hess(self, raw, y):
        mu = np.exp(raw)
        return mu - y, mu

    def value(self, raw, y):
        return np.exp(raw) - y * raw

    def predict(self, raw):
        return np.exp(raw)

    def to_json(self):
        return {"tag": self.tag}


@dataclass(frozen=True)
class WeightedLogisticLoss:
    """Logistic loss with a positive-class weight:
    l(s, y) = w * [y*log(1+e^-s) + (1-y)*log(1+e^s)], w = pos_weight if y=1 else 1."""

    pos_weight: float = 1.0

    tag = "weighted_logistic"

    def __post_init__(self):
        if not self.pos_weight > 0:
            raise ValueError(f"pos_weight must be > 0, got {self.pos_weight}")

    def _weights(self, y):
        return np.where(y == 1, self.pos_weight, 1.0)

    def validate_targets(self, y):
        if not np.isin(y, (0, 1)).all():
            raise ValueError("logistic targets must be 0 or 1")

    def base_score(self, y) -> float:
        w = self._weights(y)
        p = float(np.sum(w * y) / np.sum(w))
        p = min(max(p, _BASE_EPS), 1.0 - _BASE_EPS)
        return math.log(p / (1.0 - p))

    def grad_hess(self, raw, y):
        p = expit(raw)
        w = self._weights(y)
        return w * (p - y), w * p * (1.0 - p)

    def value(self, raw, y):
        # log(1+e^x) evaluated stably via logaddexp(0, x)
        return self._weights(y) * (
            y * np.logaddexp(0.0, -raw) + (1.0 - y) * np.logaddexp(0.0, raw)
        )

    def predict(self, raw):
        return expit(raw)

    def to_json(self):
        return {"tag": self.tag, "pos_weight": self.pos_weight}


def loss_from_json(obj):
    if not isinstance(obj, dict) or "tag" not in obj:
        raise ParseError("loss: expected an object with a 'tag'")
    if obj["tag"] == "poisson":
        return PoissonLoss()
    if obj["tag"] == "weighted_logistic":
        return WeightedLogisticLoss(pos_weight=float(obj.get("pos_weight", 1.0)))
    raise ParseError(f"loss: unknown tag {obj['tag']!r}")


def grad_hess(loss, raw_score, target):
    """Gradient and hessian of the loss at the given raw score(s)."""
    raw = np.asarray(raw_score, dtype=float)
    y = np.asarray(target, dtype=float)
    loss.validate_targets(y)
    g, h = loss.grad_hess(raw, y)
    if np.isscalar(raw_score) or raw.ndim == 0:
        return float(g), float(h)
    return g, h


def leaf_weight(G: float, H: float, lambda_l2: float) -> float:
    """Newton-optimal leaf value -G/(H + lambda)."""
    denom = H + lambda_l2
    if denom <= 0:
        raise NumericError(f"leaf weight undefined: H + lambda = {denom}")
    return -G / denom


def split_gain(G_L, H_L, G_R, H_R, lambda_l2) -> float:
    return 0.5 * (
        G_L * G_L / (H_L + lambda_l2)
        + G_R * G_R / (H_R + lambda_l2)
        - (G_L + G_R) ** 2 / (H_L + H_R + lambda_l2)
    )


# ---------------------------------------------------------------------------
# hyperparameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HyperConfig:
    n_trees: int = 100
    eta: float = 0.1
    max_depth: int = 6
    min_child_weight: float = 1.0
    lambda_l2: float = 1.0
    subsample: float = 1.0
    colsample: float = 1.0
    pos_weight_multiplier: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 0:
            raise ValueError("n_trees must be >= 0")
        if not self.eta > 0:
            raise ValueError("eta must be > 0")
        if self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        if self.min_child_weight < 0 or self.lambda_l2 < 0:
            raise ValueError("min_child_weight and lambda_l2 must be >= 0")
        if self.min_child_weight + self.lambda_l2 <= 0:
            raise ValueError("min_child_weight + lambda_l2 must be > 0")
        for name in ("subsample", "colsample"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must be in (0,1], got {v}")
        if not self.pos_weight_multiplier > 0:
            raise ValueError("pos_weight_multiplier must be > 0")

    @classmethod
    def from_file(cls, path, **overrides) -> "HyperConfig":
        """key=value text file; unknown keys rejected; overrides win."""
        valid = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValidationError(f"{path}: line {lineno}: expected key=value")
                key, _, value = line.partition("=")
                key = key.strip()
                if key not in valid:
                    raise ValidationError(f"{path}: line {lineno}: unknown key {key!r}")
                caster = int if valid[key] in (int, "int") else float
                try:
                    kwargs[key] = caster(value.strip())
                except ValueError:
                    raise ValidationError(f"{path}: line {lineno}: bad value for {key}") from None
        kwargs.update(overrides)
        try:
            return cls(**kwargs)
        except ValueError as exc:
            raise ValidationError(str(exc)) from None


# ---------------------------------------------------------------------------
# trees
# ---------------------------------------------------------------------------

class Tree:
    """Flat-array binary tree: feature[i] < 0 marks node i as a leaf.
    Internal nodes route x[feature] < threshold to left, else right."""

    def __init__(self, feature, threshold, left, right, weight):
        self.feature = np.asarray(feature, dtype=np.int64)
        self.threshold = np.asarray(threshold, dtype=float)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.weight = np.asarray(weight, dtype=float)

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]

    @property
    def n_internal(self) -> int:
        return int((self.feature >= 0).sum())

    def apply(self, X) -> np.ndarray:
        return kernels.tree_apply(self.feature, self.threshold, self.left, self.right, self.weight, X)

    def depth(self) -> int:
        def rec(i):
            if self.feature[i] < 0:
                return 0
            return 1 + max(rec(self.left[i]), rec(self.right[i]))

        return rec(0)

    def to_dict(self):
        def rec(i):
            if self.feature[i] < 0:
                return {"weight": float(self.weight[i])}
            return {
                "feature": int(self.feature[i]),
                "threshold": float(self.threshold[i]),
                "left": rec(int(self.left[i])),
                "right": rec(int(self.right[i])),
            }

        return rec(0)

    @classmethod
    def from_dict(cls, obj, n_columns: int, where: str) -> "Tree":
        feature, threshold, left, right, weight = [], [], [], [], []

        def rec(node, path):
            if not isinstance(node, dict):
                raise ParseError(f"{where}{path}: expected an object")
            i = len(feature)
            if "weight" in node:
                if not isinstance(node["weight"], (int, float)):
                    raise ParseError(f"{where}{path}.weight: expected a number")
                feature.append(-1)
                threshold.append(0.0)
                left.append(-1)
                right.append(-1)
                weight.append(float(node["weight"]))
                return i
            for key in ("feature", "threshold", "left", "right"):
                if key not in node:
                    raise ParseError(f"{where}{path}: missing {key!r}")
            f = node["feature"]
            if not isinstance(f, int) or not 0 <= f < n_columns:
                raise ParseError(f"{where}{path}.feature: {f!r} out of range [0,{n_columns})")
            feature.append(f)
            threshold.append(float(node["threshold"]))
            left.append(-1)
            right.append(-1)
            weight.append(0.0)
            left[i] = rec(node["left"], path + ".left")
            right[i] = rec(node["right"], path + ".right")
            return i

        rec(obj, "")
        return cls(feature, threshold, left, right, weight)


def find_best_split(matrix, rows, g, h, lambda_l2: float, min_child_weight: float,
                    feature_ids=None):
    """Exact greedy search over all midpoints between consecutive distinct
    values of each candidate column; returns (feature, threshold, gain) or
    None when no split has positive gain and admissible child hessians.
    Ties break toward the lower feature index, then the lower threshold."""
    X = matrix.values if isinstance(matrix, FeatureMatrix) else np.asarray(matrix, dtype=float)
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size == 0:
        raise ValueError("node rows must be nonempty")
    if feature_ids is None:
        feature_ids = np.arange(X.shape[1], dtype=np.int64)
    else:
        feature_ids = np.asarray(feature_ids, dtype=np.int64)
    Xsub = np.ascontiguousarray(X[np.ix_(rows, feature_ids)])
    col, thr, gain = kernels.best_split(
        Xsub,
        np.ascontiguousarray(g[rows]),
        np.ascontiguousarray(h[rows]),
        float(lambda_l2),
        float(min_child_weight),
    )
    if col < 0:
        return None
    return int(feature_ids[col]), float(thr), float(gain)


def _grow_tree(X, g, h, rows, feature_ids, config: HyperConfig) -> Tree:
    feature, threshold, left, right, weight = [], [], [], [], []

    def build(node_rows, depth):
        i = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        weight.append(0.0)
        split = None
        if depth < config.max_depth and node_rows.size >= 2:
            split = find_best_split(
                X, node_rows, g, h, config.lambda_l2, config.min_child_weight, feature_ids
            )
        if split is None:
            G = float(g[node_rows].sum())
            H = float(h[node_rows].sum())
            weight[i] = leaf_weight(G, H, config.lambda_l2)
            return i
        f, thr, _ = split
        feature[i] = f
        threshold[i] = thr
        mask = X[node_rows, f] < thr
        left[i] = build(node_rows[mask], depth + 1)
        right[i] = build(node_rows[~mask], depth + 1)
        return i

    build(rows, 0)
    return Tree(feature, threshold, left, right, weight)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class GbdtModel:
    base_score: float
    trees: tuple
    eta: float
    loss: object
    column_names: tuple[str, ...]
    train_raw_scores_: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def n_columns(self) -> int:
        return len(self.column_names)

    def raw_predict(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=float)
        raw = np.full(X.shape[0], self.base_score)
        for tree in self.trees:
            raw += self.eta * tree.apply(X)
        return raw

    def predict(self, matrix) -> np.ndarray:
        return predict(self, matrix)


def _subsample_count(fraction: float, n: int) -> int:
    return max(1, int(fraction * n + 0.5))


def train(matrix, targets, loss, config: HyperConfig) -> GbdtModel:
    """Train a boosted-tree model. Base score is the loss-optimal constant;
    each round fits one tree to the Newton gradients at the current raw
    scores, with seeded row/column subsampling."""
    if isinstance(matrix, FeatureMatrix):
        X = matrix.values
        column_names = matrix.column_names
    else:
        X = np.asarray(matrix, dtype=float)
        column_names = tuple(f"f{i}" for i in range(X.shape[1]))
    y = np.asarray(targets, dtype=float)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ValueError(f"matrix {X.shape} and targets {y.shape} do not align")
    if X.shape[0] < 1:
        raise ValueError("need at least one row")
    loss.validate_targets(y)
    X = np.ascontiguousarray(X, dtype=float)

    n, d = X.shape
    base = loss.base_score(y)
    raw = np.full(n, base)
    rng = np.random.default_rng(config.seed)
    all_rows = np.arange(n, dtype=np.int64)
    all_cols = np.arange(d, dtype=np.int64)
    trees = []
    for _ in range(config.n_trees):
        g, h = loss.grad_hess(raw, y)
        if config.subsample < 1.0:
            m = _subsample_count(config.subsample, n)
            rows = np.sort(rng.choice(n, size=m, replace=False)).astype(np.int64)
        else:
            rows = all_rows
        if config.colsample < 1.0:
            c = _subsample_count(config.colsample, d)
            cols = np.sort(rng.choice(d, size=c, replace=False)).astype(np.int64)
        else:
            cols = all_cols
        tree = _grow_tree(X, g, h, rows, cols, config)
        trees.append(tree)
        raw += config.eta * tree.apply(X)

    return GbdtModel(
        base_score=base,
        trees=tuple(trees),
        eta=config.eta,
        loss=loss,
        column_names=column_names,
        train_raw_scores_=raw,
    )


def predict(model: GbdtModel, matrix) -> np.ndarray:
    """Predictions in target space: exp(raw) for Poisson (always > 0),
    sigmoid(raw) for logistic (in (0,1))."""
    X = matrix.values if isinstance(matrix, FeatureMatrix) else np.asarray(matrix, dtype=float)
    if X.ndim != 2 or X.shape[1] != model.n_columns:
        raise ValueError(
            f"matrix has {X.shape[1] if X.ndim == 2 else '?'} columns, model expects {model.n_columns}"
        )
    return model.loss.predict(model.raw_predict(X))


def feature_importance(model: GbdtModel) -> dict:
    """Fraction of internal nodes splitting on each column; sums to 1
    when the model has any split, all zeros otherwise."""
    counts = np.zeros(model.n_columns)
    for tree in model.trees:
        internal = tree.feature[tree.feature >= 0]
        np.add.at(counts, internal, 1.0)
    total = counts.sum()
    if total > 0:
        counts = counts / total
    return {name: float(counts[i]) for i, name in enumerate(model.column_names)}


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def save_model(model: GbdtModel, path) -> None:
    doc = {
        "version": MODEL_FORMAT_VERSION,
        "loss": model.loss.to_json(),
        "base_score": model.base_score,
        "eta": model.eta,
        "column_names": list(model.column_names),
        "trees": [t.to_dict() for t in model.trees],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_model(path) -> GbdtModel:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: expected a JSON object")
    if doc.get("version") != MODEL_FORMAT_VERSION:
        raise ParseError(f"{path}: unsupported model version {doc.get('version')!r}")
    for key in ("loss", "base_score", "eta", "column_names", "trees"):
        if key not in doc:
            raise ParseError(f"{path}: missing {key!r}")
    column_names = tuple(doc["column_names"])
    trees = tuple(
        Tree.from_dict(t, len(column_names), f"trees[{i}]") for i, t in enumerate(doc["trees"])
    )
    return GbdtModel(
        base_score=float(doc["base_score"]),
        trees=trees,
        eta=float(doc["eta"]),
        loss=loss_from_json(doc["loss"]),
        column_names=column_names,
    )


__all__ = [
    "PoissonLoss",
    "WeightedLogisticLoss",
    "HyperConfig",
    "Tree",
    "GbdtModel",
    "grad_hess",
    "leaf_weight",
    "split_gain",
    "find_best_split",
    "train",
    "predict",
    "feature_importance",
    "save_model",
    "load_model",
]
