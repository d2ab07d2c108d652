"""Sequential model-based optimization of training hyperparameters.

A Matérn-5/2 Gaussian process is fit to (normalized config, loss)
observations with losses standardized to zero mean / unit variance;
(lengthscale, noise) are picked by exact log marginal likelihood over a
small grid. Proposals maximize expected improvement over seeded random
candidates; parallel batches use the constant-liar trick (pending points
temporarily take the incumbent loss). The first 10 trials are random.
"""

import csv
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.stats import norm

from .errors import NumericError, ValidationError

LENGTHSCALE_GRID = (0.05, 0.1, 0.2, 0.4, 0.8, 1.6)
NOISE_GRID = (1e-6, 1e-4, 1e-2, 1e-1)
BASE_JITTER = 1e-10
MAX_JITTER = 1e-4
N_RANDOM_INIT = 10
N_CANDIDATES = 1000
# candidates this close (L-inf) to a pending/lied point are excluded
PENDING_EXCLUSION_RADIUS = 1e-6

FAILED_LOSS = math.inf


# ---------------------------------------------------------------------------
# search space
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Dim:
    name: str
    lower: float
    upper: float
    scale: str = "linear"  # linear | log
    kind: str = "real"     # real | integer

    def __post_init__(self):
        if self.scale not in ("linear", "log"):
            raise ValueError(f"dim {self.name}: scale must be linear or log")
        if self.kind not in ("real", "integer"):
            raise ValueError(f"dim {self.name}: kind must be real or integer")
        if not self.lower < self.upper:
            raise ValueError(f"dim {self.name}: lower must be < upper")
        if self.scale == "log" and self.lower <= 0:
            raise ValueError(f"dim {self.name}: log scale needs positive bounds")

    def to_unit(self, value: float) -> float:
        if not self.lower <= value <= self.upper:
            raise ValueError(f"dim {self.name}: {value} outside [{self.lower}, {self.upper}]")
        if self.scale == "log":
            return (math.log(value) - math.log(self.lower)) / (
                math.log(self.upper) - math.log(self.lower)
            )
        return (value - self.lower) / (self.upper - self.lower)

    def from_unit(self, u: float):
        if self.scale == "log":
            value = math.exp(
                math.log(self.lower) + u * (math.log(self.upper) - math.log(self.lower))
            )
        else:
            value = self.lower + u * (self.upper - self.lower)
        if self.kind == "integer":
            return int(min(max(math.floor(value + 0.5), self.lower), self.upper))
        return min(max(value, self.lower), self.upper)


@dataclass(frozen=True)
class SearchSpace:
    dims: tuple

    @property
    def d(self) -> int:
        return len(self.dims)

    @property
    def names(self):
        return tuple(dim.name for dim in self.dims)

    def normalize(self, config) -> np.ndarray:
        return np.array([dim.to_unit(config[dim.name]) for dim in self.dims])

    def denormalize(self, point) -> dict:
        point = np.asarray(point, dtype=float)
        if point.shape != (self.d,) or np.any(point < 0) or np.any(point > 1):
            raise ValueError(f"point must lie in [0,1]^{self.d}")
        return {dim.name: dim.from_unit(float(u)) for dim, u in zip(self.dims, point)}

    @classmethod
    def from_file(cls, path) -> "SearchSpace":
        """One dim per line: name = lower, upper, scale, kind."""
        dims = []
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValidationError(f"{path}: line {lineno}: expected name = lo, hi, scale, kind")
                name, _, rest = line.partition("=")
                parts = [p.strip() for p in rest.split(",")]
                if len(parts) != 4:
                    raise ValidationError(f"{path}: line {lineno}: expected 4 fields after '='")
                try:
                    dims.append(Dim(name.strip(), float(parts[0]), float(parts[1]), parts[2], parts[3]))
                except ValueError as exc:
                    raise ValidationError(f"{path}: line {lineno}: {exc}") from None
        if not dims:
            raise ValidationError(f"{path}: no dimensions")
        return cls(dims=tuple(dims))


def task1_space() -> SearchSpace:
    return SearchSpace(
        dims=(
            Dim("n_trees", 50, 500, "log", "integer"),
            Dim("eta", 0.01, 0.3, "log"),
            Dim("max_depth", 2, 10, "linear", "integer"),
            Dim("min_child_weight", 1.0, 100.0, "log"),
            Dim("lambda_l2", 1e-3, 10.0, "log"),
            Dim("subsample", 0.5, 1.0),
            Dim("colsample", 0.5, 1.0),
        )
    )


def task2_space() -> SearchSpace:
    return SearchSpace(dims=task1_space().dims + (Dim("pos_weight_multiplier", 0.5, 2.0, "log"),))


# ---------------------------------------------------------------------------
# trials
# ---------------------------------------------------------------------------

@dataclass
class TrialRecord:
    trial_id: int
    point: np.ndarray
    config: dict
    loss: float = math.nan
    status: str = "pending"  # pending | done | failed
    wall_seconds: float = 0.0

    def is_usable(self) -> bool:
        return self.status == "done" and math.isfinite(self.loss)


# ---------------------------------------------------------------------------
# Gaussian-process surrogate
# ---------------------------------------------------------------------------

def _matern52(A, B, lengthscale: float) -> np.ndarray:
    diff = A[:, None, :] - B[None, :, :]
    r = np.sqrt((diff * diff).sum(axis=2))
    q = math.sqrt(5.0) * r / lengthscale
    return (1.0 + q + q * q / 3.0) * np.exp(-q)


@dataclass(eq=False)
class GpSurrogate:
    X: np.ndarray
    lengthscale: float
    noise_var: float
    loss_mean: float
    loss_std: float
    jitter: float
    cho: tuple
    alpha: np.ndarray
    log_marginal_likelihood: float


def _factorize(K, noise_var):
    n = K.shape[0]
    jitter = BASE_JITTER
    while True:
        try:
            cho = cho_factor(K + (noise_var + jitter) * np.eye(n), lower=True)
            return cho, jitter
        except LinAlgError:
            jitter *= 10.0
            if jitter > MAX_JITTER:
                raise NumericError(
                    f"GP factorization failed even with jitter {MAX_JITTER}"
                ) from None


def _fit_fixed(X, y_std, lengthscale, noise_var):
    """Factorize for fixed hyperparameters; returns (cho, alpha, lml, jitter)."""
    K = _matern52(X, X, lengthscale)
    cho, jitter = _factorize(K, noise_var)
    alpha = cho_solve(cho, y_std)
    n = X.shape[0]
    log_det_half = float(np.sum(np.log(np.diag(cho[0]))))
    lml = -0.5 * float(y_std @ alpha) - log_det_half - 0.5 * n * math.log(2.0 * math.pi)
    return cho, alpha, lml, jitter


def gp_fit(trials) -> GpSurrogate:
    """Fit the surrogate on the usable trials: standardize losses, then
    pick (lengthscale, noise) by exact log marginal likelihood over the
    grid."""
    done = [t for t in trials if t.is_usable()]
    if len(done) < 2:
        raise ValueError(f"GP fit needs at least 2 done trials, got {len(done)}")
    X = np.array([t.point for t in done])
    y = np.array([t.loss for t in done])
    return _gp_fit_xy(X, y)


def _gp_fit_xy(X, y) -> GpSurrogate:
    mean = float(y.mean())
    std = float(y.std())
    if std == 0.0:
        std = 1.0
    y_std = (y - mean) / std

    best = None
    for lengthscale in LENGTHSCALE_GRID:
        for noise_var in NOISE_GRID:
            cho, alpha, lml, jitter = _fit_fixed(X, y_std, lengthscale, noise_var)
            if best is None or lml > best[0]:
                best = (lml, lengthscale, noise_var, cho, alpha, jitter)
    lml, lengthscale, noise_var, cho, alpha, jitter = best
    return GpSurrogate(
        X=X,
        lengthscale=lengthscale,
        noise_var=noise_var,
        loss_mean=mean,
        loss_std=std,
        jitter=jitter,
        cho=cho,
        alpha=alpha,
        log_marginal_likelihood=lml,
    )


def gp_predict(surrogate: GpSurrogate, points):
    """Posterior mean and variance of the latent loss at the points,
    de-standardized; variance clamped at 0."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    Ks = _matern52(pts, surrogate.X, surrogate.lengthscale)
    mean_std = Ks @ surrogate.alpha
    v = cho_solve(surrogate.cho, Ks.T)
    var_std = np.maximum(1.0 - np.einsum("ij,ji->i", Ks, v), 0.0)
    mean = mean_std * surrogate.loss_std + surrogate.loss_mean
    var = var_std * surrogate.loss_std ** 2
    if np.asarray(points).ndim == 1:
        return float(mean[0]), float(var[0])
    return mean, var


def expected_improvement(surrogate: GpSurrogate, points, best_loss: float):
    """EI for minimization: (f*-mu)*Phi(z) + sigma*phi(z), z=(f*-mu)/sigma;
    max(f*-mu, 0) where sigma = 0."""
    single = np.asarray(points).ndim == 1
    mean, var = gp_predict(surrogate, np.atleast_2d(points))
    sigma = np.sqrt(var)
    improve = best_loss - mean
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sigma > 0, improve / np.where(sigma > 0, sigma, 1.0), 0.0)
    ei = np.where(
        sigma > 0,
        improve * norm.cdf(z) + sigma * norm.pdf(z),
        np.maximum(improve, 0.0),
    )
    ei = np.maximum(ei, 0.0)
    return float(ei[0]) if single else ei


# ---------------------------------------------------------------------------
# proposals
# ---------------------------------------------------------------------------

def _too_close(candidates, points):
    if not points:
        return np.zeros(candidates.shape[0], dtype=bool)
    P = np.array(points)
    dist = np.abs(candidates[:, None, :] - P[None, :, :]).max(axis=2)
    return (dist < PENDING_EXCLUSION_RADIUS).any(axis=1)


def propose_batch(space: SearchSpace, trials, batch_size: int, seed: int,
                  n_candidates: int = N_CANDIDATES):
    """Propose batch_size points in [0,1]^d. Fewer than 10 done trials:
    seeded random points. Otherwise, for each slot, fit the GP on done +
    lied trials, take argmax EI over seeded random candidates (pending
    points' neighborhoods excluded), and lie the incumbent loss onto the
    pick so the rest of the batch diversifies."""
    rng = np.random.default_rng(seed)
    done = [t for t in trials if t.is_usable()]
    pending = [t.point for t in trials if t.status == "pending"]
    if len(done) < N_RANDOM_INIT:
        return [rng.random(space.d) for _ in range(batch_size)]

    best_loss = min(t.loss for t in done)
    X = [t.point for t in done]
    y = [t.loss for t in done]
    picked = []
    for _ in range(batch_size):
        surrogate = _gp_fit_xy(np.array(X), np.array(y))
        candidates = rng.random((n_candidates, space.d))
        keep = ~_too_close(candidates, pending + picked)
        candidates = candidates[keep]
        if candidates.shape[0] == 0:
            point = rng.random(space.d)
        else:
            ei = expected_improvement(surrogate, candidates, best_loss)
            point = candidates[int(np.argmax(ei))]
        picked.append(point)
        X.append(point)
        y.append(best_loss)  # constant liar
    return picked


# ---------------------------------------------------------------------------
# trial log persistence
# ---------------------------------------------------------------------------

def _log_header(space: SearchSpace):
    return ["trial_id", *space.names, "loss", "status", "wall_seconds"]


def read_trial_log(path, space: SearchSpace):
    """Rebuild trial records from a trials.csv written by tune."""
    trials = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != _log_header(space):
            raise ValidationError(f"{path}: trial log header does not match the search space")
        for row in reader:
            config = {
                dim.name: (int(v) if dim.kind == "integer" else float(v))
                for dim, v in zip(space.dims, row[1 : 1 + space.d])
            }
            trials.append(
                TrialRecord(
                    trial_id=int(row[0]),
                    point=space.normalize(config),
                    config=config,
                    loss=float(row[1 + space.d]),
                    status=row[2 + space.d],
                    wall_seconds=float(row[3 + space.d]),
                )
            )
    return trials


class _TrialLogWriter:
    def __init__(self, path, space):
        self.path = Path(path) if path is not None else None
        self.space = space
        if self.path is not None and not self.path.exists():
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(_log_header(space))

    def append(self, trial: TrialRecord):
        if self.path is None:
            return
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow(
                [trial.trial_id]
                + [repr(trial.config[n]) if isinstance(trial.config[n], float) else trial.config[n]
                   for n in self.space.names]
                + [repr(trial.loss), trial.status, repr(trial.wall_seconds)]
            )


# ---------------------------------------------------------------------------
# the optimization loop
# ---------------------------------------------------------------------------

def _evaluate(objective, config):
    start = time.perf_counter()
    try:
        loss = float(objective(config))
        status = "done"
        if not math.isfinite(loss):
            loss, status = FAILED_LOSS, "failed"
    except Exception:
        loss, status = FAILED_LOSS, "failed"
    return loss, status, time.perf_counter() - start


def tune(objective, space: SearchSpace, budget: int, parallelism: int = 1,
         seed: int = 0, log_path=None):
    """Minimize objective(config) over the space with up to `parallelism`
    concurrent evaluations per proposal batch, until `budget` trials have
    completed (existing trials in log_path count toward the budget).
    Returns (best trial, all trials). Deterministic for a fixed seed; for
    parallelism 1 the trial sequence is strictly sequential SMBO."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    trials = []
    if log_path is not None and Path(log_path).exists():
        trials = read_trial_log(log_path, space)
    writer = _TrialLogWriter(log_path, space)

    while len(trials) < budget:
        batch = min(parallelism, budget - len(trials))
        points = propose_batch(space, trials, batch, seed=_batch_seed(seed, len(trials)))
        batch_trials = []
        for point in points:
            point = np.clip(np.asarray(point, dtype=float), 0.0, 1.0)
            record = TrialRecord(
                trial_id=len(trials) + len(batch_trials),
                point=point,
                config=space.denormalize(point),
            )
            batch_trials.append(record)
        configs = [t.config for t in batch_trials]
        if batch == 1:
            results = [_evaluate(objective, configs[0])]
        else:
            with ThreadPoolExecutor(max_workers=batch) as pool:
                results = list(pool.map(lambda c: _evaluate(objective, c), configs))
        for record, (loss, status, wall) in zip(batch_trials, results):
            record.loss = loss
            record.status = status
            record.wall_seconds = wall
            trials.append(record)
            writer.append(record)

    best = min(trials, key=lambda t: (not t.is_usable(), t.loss, t.trial_id))
    return best, trials


def _batch_seed(seed: int, n_completed: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=seed, spawn_key=(n_completed,))


__all__ = [
    "Dim",
    "SearchSpace",
    "TrialRecord",
    "GpSurrogate",
    "task1_space",
    "task2_space",
    "gp_fit",
    "gp_predict",
    "expected_improvement",
    "propose_batch",
    "tune",
    "read_trial_log",
]
