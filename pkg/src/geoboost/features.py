"""Feature engineering: named numeric columns for both prediction tasks.

Task 1 (per-branch visit counts) gets demographics, wealth-trajectory,
channel activity counts, and the location-aware block: residence-branch
distance, order statistics of activity-branch distances, and neighbor-mean
visit features for k = 1, 2, 4, ..., 1024. Task 2 (card application) gets
demographics, wealth and card trajectories, and channel counts only.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .dataset import Dataset, DataSplit, N_MONTHS, euclidean
from .errors import ValidationError

K_LIST = tuple(2 ** i for i in range(11))

# neighbor order lists are truncated here; max k is 1024, one extra slot
# covers leave-one-out, the rest is margin for coincident residences
_ORDER_CAP = 2048


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """Dense row-per-customer matrix with named columns."""

    column_names: tuple[str, ...]
    values: np.ndarray
    row_ids: tuple[int, ...]

    def __post_init__(self):
        n, d = self.values.shape
        if len(self.column_names) != d:
            raise ValidationError(
                f"{len(self.column_names)} column names for {d} columns"
            )
        if len(self.row_ids) != n:
            raise ValidationError(f"{len(self.row_ids)} row ids for {n} rows")
        if len(set(self.row_ids)) != n:
            raise ValidationError("row_ids must be unique")
        if not np.isfinite(self.values).all():
            raise ValidationError("feature matrix contains NaN or infinity")

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_columns(self) -> int:
        return self.values.shape[1]

    def drop_columns(self, names) -> "FeatureMatrix":
        drop = set(names)
        unknown = drop - set(self.column_names)
        if unknown:
            raise ValidationError(f"unknown columns: {sorted(unknown)}")
        keep = [i for i, c in enumerate(self.column_names) if c not in drop]
        return FeatureMatrix(
            column_names=tuple(self.column_names[i] for i in keep),
            values=np.ascontiguousarray(self.values[:, keep]),
            row_ids=self.row_ids,
        )

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(",".join(("customer_id",) + self.column_names) + "\n")
            for cid, row in zip(self.row_ids, self.values):
                fh.write(",".join([str(cid)] + [repr(v) for v in row]) + "\n")


def trajectory_category(flags) -> int:
    """5-way encoding of a monthly binary series: 1 all-on, 2 all-off,
    3 one on->off switch, 4 one off->on switch, 5 several switches."""
    if len(flags) != N_MONTHS:
        raise ValueError(f"expected {N_MONTHS} flags, got {len(flags)}")
    changes = sum(1 for t in range(N_MONTHS - 1) if flags[t] != flags[t + 1])
    if changes == 0:
        return 1 if flags[0] == 1 else 2
    if changes == 1:
        return 3 if flags[0] == 1 else 4
    return 5


def one_hot(value, domain) -> np.ndarray:
    ordered = sorted(domain)
    if value not in ordered:
        raise ValueError(f"value {value!r} not in domain {ordered}")
    out = np.zeros(len(ordered))
    out[ordered.index(value)] = 1.0
    return out


def channel_counts(activities, customer_id: int, channels) -> np.ndarray:
    """Activity counts per channel (sorted channel order) for one customer."""
    ordered = sorted(channels)
    pos = {ch: i for i, ch in enumerate(ordered)}
    out = np.zeros(len(ordered))
    for a in activities:
        if a.customer_id == customer_id and a.channel in pos:
            out[pos[a.channel]] += 1.0
    return out


def residence_branch_distance(customer, branch) -> float:
    return euclidean(customer.residence, branch.location)


def activity_distance_stats(customer, activities, branch):
    """(max, min, mean, median) distance from the branch to the customer's
    geolocated activities; all four fall back to the residence-branch
    distance when the customer has no geolocated activities."""
    dists = [
        euclidean(a.geo, branch.location)
        for a in activities
        if a.customer_id == customer.customer_id and a.geo is not None
    ]
    if not dists:
        d = residence_branch_distance(customer, branch)
        return (d, d, d, d)
    arr = np.asarray(dists)
    return (float(arr.max()), float(arr.min()), float(arr.mean()), float(np.median(arr)))


class KnnIndex:
    """Shared sorted-neighbor index over the training customers.

    Train rows are sorted by customer_id, so the stable sort on squared
    distance breaks ties by ascending id. Read-only after construction.
    """

    def __init__(self, train_customers):
        pool = sorted(train_customers, key=lambda c: c.customer_id)
        if not pool:
            raise ValueError("kNN index needs a nonempty training set")
        self.train_ids = np.array([c.customer_id for c in pool], dtype=np.int64)
        self.train_xy = np.array([c.residence for c in pool])

    @property
    def n_train(self) -> int:
        return self.train_ids.shape[0]

    def order_for(self, query_xy: np.ndarray, query_ids) -> tuple[np.ndarray, np.ndarray]:
        """Neighbor-order matrix and available-neighbor counts for the
        queries; a query that is itself a training customer is excluded
        from its own neighbor list (leave-one-out)."""
        cap = min(self.n_train, _ORDER_CAP)
        order = kernels.neighbor_order(self.train_xy, np.asarray(query_xy, dtype=float), cap)
        avail = np.full(len(query_ids), self.n_train, dtype=np.int64)
        self_pos = np.searchsorted(self.train_ids, query_ids)
        for r, (p, qid) in enumerate(zip(self_pos, query_ids)):
            if p < self.n_train and self.train_ids[p] == qid:
                row = order[r]
                kept = row[row != p]
                order[r, : kept.size] = kept
                order[r, kept.size :] = -1
                avail[r] = self.n_train - 1
        return order, avail

    def prefix_means(self, order, avail, counts, k_list=K_LIST) -> np.ndarray:
        ks = np.asarray(k_list, dtype=np.int64)
        return kernels.knn_prefix_means(order, np.asarray(counts, dtype=float), avail, ks)


def knn_visit_features(train_customers, train_visits, query_customer, branch_id: int,
                       k_list=K_LIST) -> np.ndarray:
    """Mean visit count to the branch over the k nearest training
    customers (Euclidean residence distance), for each k; k is capped at
    the available neighbor count."""
    index = KnnIndex(train_customers)
    counts = np.array([train_visits.get((int(cid), branch_id), 0) for cid in index.train_ids], dtype=float)
    order, avail = index.order_for(
        np.asarray([query_customer.residence]), [query_customer.customer_id]
    )
    return index.prefix_means(order, avail, counts, k_list)[0]


# ---------------------------------------------------------------------------
# matrix assembly
# ---------------------------------------------------------------------------

_AGE_DOMAIN = (1, 2, 3)
_INCOME_DOMAIN = (1, 2, 3)
_GENDER_DOMAIN = ("F", "M")
_TRAJ_DOMAIN = (1, 2, 3, 4, 5)


def _onehot_block(values, domain):
    ordered = sorted(domain)
    block = np.zeros((len(values), len(ordered)))
    pos = {v: j for j, v in enumerate(ordered)}
    for i, v in enumerate(values):
        block[i, pos[v]] = 1.0
    return block


class Task1FeatureBuilder:
    """Assembles per-branch Task-1 matrices for a fixed row set, sharing
    the expensive pieces (kNN neighbor order, channel counts) across
    branches. Pure reads after __init__; safe for concurrent build()."""

    def __init__(self, dataset: Dataset, split: DataSplit, ids=None):
        self.dataset = dataset
        self.ids = tuple(ids) if ids is not None else dataset.customer_ids()
        unknown = [i for i in self.ids if i not in dataset.customer_by_id]
        if unknown:
            raise ValidationError(f"unknown customer ids: {unknown[:5]}")
        self.channels = dataset.channels
        rows = [dataset.customer_by_id[cid] for cid in self.ids]
        self._base = np.hstack(
            [
                _onehot_block([c.age_cat for c in rows], _AGE_DOMAIN),
                _onehot_block([c.income_cat for c in rows], _INCOME_DOMAIN),
                _onehot_block([c.gender for c in rows], _GENDER_DOMAIN),
                _onehot_block([trajectory_category(c.wealth_flags) for c in rows], _TRAJ_DOMAIN),
                self._channel_block(rows),
            ]
        )
        self._rows = rows
        self._res = np.array([c.residence for c in rows])
        self._geo_acts = {}
        for a in dataset.activities:
            if a.geo is not None:
                self._geo_acts.setdefault(a.customer_id, []).append(a.geo)
        self._geo_acts = {cid: np.asarray(pts) for cid, pts in self._geo_acts.items()}

        train_pool = [dataset.customer_by_id[cid] for cid in split.train_ids]
        self._index = KnnIndex(train_pool)
        self._order, self._avail = self._index.order_for(self._res, self.ids)

    def _channel_block(self, rows):
        by_cid = {}
        for a in self.dataset.activities:
            key = by_cid.setdefault(a.customer_id, {})
            key[a.channel] = key.get(a.channel, 0) + 1
        block = np.zeros((len(rows), len(self.channels)))
        for i, c in enumerate(rows):
            counts = by_cid.get(c.customer_id, {})
            for j, ch in enumerate(self.channels):
                block[i, j] = counts.get(ch, 0)
        return block

    def base_column_names(self) -> tuple[str, ...]:
        return tuple(
            [f"age_{v}" for v in _AGE_DOMAIN]
            + [f"income_{v}" for v in _INCOME_DOMAIN]
            + [f"gender_{v}" for v in _GENDER_DOMAIN]
            + [f"wealth_traj_{v}" for v in _TRAJ_DOMAIN]
            + [f"act_{ch}" for ch in self.channels]
        )

    def column_names(self) -> tuple[str, ...]:
        return self.base_column_names() + tuple(
            ["dist_residence", "dist_act_max", "dist_act_min", "dist_act_mean", "dist_act_median"]
            + [f"knn_{k}" for k in K_LIST]
        )

    def build(self, branch_id: int) -> FeatureMatrix:
        branch = self.dataset.branch_by_id.get(branch_id)
        if branch is None:
            raise ValidationError(f"unknown branch_id {branch_id}")
        bx, by = branch.location
        dist_res = np.hypot(self._res[:, 0] - bx, self._res[:, 1] - by)
        stats = np.empty((len(self._rows), 4))
        for i, c in enumerate(self._rows):
            pts = self._geo_acts.get(c.customer_id)
            if pts is None:
                stats[i, :] = dist_res[i]
            else:
                d = np.hypot(pts[:, 0] - bx, pts[:, 1] - by)
                stats[i, 0] = d.max()
                stats[i, 1] = d.min()
                stats[i, 2] = d.mean()
                stats[i, 3] = np.median(d)
        counts = np.array(
            [self.dataset.labels.visits.get((int(cid), branch_id), 0) for cid in self._index.train_ids],
            dtype=float,
        )
        knn = self._index.prefix_means(self._order, self._avail, counts)
        values = np.ascontiguousarray(
            np.hstack([self._base, dist_res[:, None], stats, knn])
        )
        return FeatureMatrix(column_names=self.column_names(), values=values, row_ids=self.ids)


def assemble_task1(dataset: Dataset, split: DataSplit, branch_id: int, ids=None) -> FeatureMatrix:
    """Task-1 matrix for one branch: demographics + wealth trajectory +
    channel counts + distance block + kNN block; no credit-card columns."""
    return Task1FeatureBuilder(dataset, split, ids).build(branch_id)


def assemble_task2(dataset: Dataset, split: DataSplit = None, ids=None) -> FeatureMatrix:
    """Task-2 matrix: demographics + wealth and card trajectories +
    channel counts; no location-derived columns."""
    ids = tuple(ids) if ids is not None else dataset.customer_ids()
    unknown = [i for i in ids if i not in dataset.customer_by_id]
    if unknown:
        raise ValidationError(f"unknown customer ids: {unknown[:5]}")
    rows = [dataset.customer_by_id[cid] for cid in ids]
    channels = dataset.channels
    by_cid = {}
    for a in dataset.activities:
        key = by_cid.setdefault(a.customer_id, {})
        key[a.channel] = key.get(a.channel, 0) + 1
    channel_block = np.zeros((len(rows), len(channels)))
    for i, c in enumerate(rows):
        counts = by_cid.get(c.customer_id, {})
        for j, ch in enumerate(channels):
            channel_block[i, j] = counts.get(ch, 0)
    values = np.ascontiguousarray(
        np.hstack(
            [
                _onehot_block([c.age_cat for c in rows], _AGE_DOMAIN),
                _onehot_block([c.income_cat for c in rows], _INCOME_DOMAIN),
                _onehot_block([c.gender for c in rows], _GENDER_DOMAIN),
                _onehot_block([trajectory_category(c.wealth_flags) for c in rows], _TRAJ_DOMAIN),
                _onehot_block([trajectory_category(c.card_flags) for c in rows], _TRAJ_DOMAIN),
                channel_block,
            ]
        )
    )
    names = tuple(
        [f"age_{v}" for v in _AGE_DOMAIN]
        + [f"income_{v}" for v in _INCOME_DOMAIN]
        + [f"gender_{v}" for v in _GENDER_DOMAIN]
        + [f"wealth_traj_{v}" for v in _TRAJ_DOMAIN]
        + [f"card_traj_{v}" for v in _TRAJ_DOMAIN]
        + [f"act_{ch}" for ch in channels]
    )
    return FeatureMatrix(column_names=names, values=values, row_ids=ids)


__all__ = [
    "K_LIST",
    "FeatureMatrix",
    "trajectory_category",
    "one_hot",
    "channel_counts",
    "residence_branch_distance",
    "activity_distance_stats",
    "KnnIndex",
    "knn_visit_features",
    "Task1FeatureBuilder",
    "assemble_task1",
    "assemble_task2",
]
