"""Data schema, CSV loading/validation, splitting, and synthetic generation.

The on-disk dataset is five CSV files (one header row, comma separated,
"." decimal point, empty field = absent coordinate):

* ``customers.csv``  customer_id,age_cat,income_cat,gender,res_x,res_y,
  wealth_m1..wealth_m12,card_m1..card_m12
* ``branches.csv``   branch_id,x,y
* ``activities.csv`` customer_id,month,channel,x,y
* ``visits.csv``     customer_id,branch_id,count (absent pair = 0)
* ``labels_task2.csv`` customer_id,applied
"""

import csv
import math
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import ValidationError

N_MONTHS = 12

# channel name pools used by the generator; loaders infer geolocated-ness
# from the data itself (a channel must carry coordinates on all rows or none)
GEO_CHANNEL_NAMES = ("pos", "atm", "branch", "merchant", "kiosk", "agent")
NONGEO_CHANNEL_NAMES = ("web", "mobile", "phone", "mail")


@dataclass(frozen=True)
class Customer:
    customer_id: int
    age_cat: int
    income_cat: int
    gender: str
    residence: tuple[float, float]
    wealth_flags: tuple[int, ...]
    card_flags: tuple[int, ...]

    def __post_init__(self):
        if self.age_cat not in (1, 2, 3):
            raise ValidationError(f"customer {self.customer_id}: age_cat {self.age_cat} not in 1..3")
        if self.income_cat not in (1, 2, 3):
            raise ValidationError(f"customer {self.customer_id}: income_cat {self.income_cat} not in 1..3")
        if self.gender not in ("M", "F"):
            raise ValidationError(f"customer {self.customer_id}: gender {self.gender!r} not in {{M,F}}")
        for label, flags in (("wealth", self.wealth_flags), ("card", self.card_flags)):
            if len(flags) != N_MONTHS:
                raise ValidationError(
                    f"customer {self.customer_id}: {label} flags have length {len(flags)}, expected {N_MONTHS}"
                )
            if any(f not in (0, 1) for f in flags):
                raise ValidationError(f"customer {self.customer_id}: non-binary {label} flag")


@dataclass(frozen=True)
class Branch:
    branch_id: int
    location: tuple[float, float]


@dataclass(frozen=True)
class Activity:
    customer_id: int
    month: int
    channel: str
    geo: tuple[float, float] | None

    def __post_init__(self):
        if not 1 <= self.month <= N_MONTHS:
            raise ValidationError(
                f"activity of customer {self.customer_id}: month {self.month} not in 1..{N_MONTHS}"
            )


@dataclass(frozen=True)
class Labels:
    """Targets: branch-visit counts (sparse; absent pair = 0) and the
    binary credit-card application flag."""

    visits: dict
    applied: dict


@dataclass(frozen=True)
class DataSplit:
    train_ids: tuple[int, ...]
    valid_ids: tuple[int, ...]
    seed: int


class Dataset:
    """Immutable in-memory dataset with id indexes; safe to share across
    threads after construction."""

    def __init__(self, customers, branches, activities, labels):
        self.customers = tuple(sorted(customers, key=lambda c: c.customer_id))
        self.branches = tuple(sorted(branches, key=lambda b: b.branch_id))
        self.activities = tuple(activities)
        self.labels = labels
        self.customer_by_id = {c.customer_id: c for c in self.customers}
        self.branch_by_id = {b.branch_id: b for b in self.branches}
        self.channels = tuple(sorted({a.channel for a in self.activities}))
        self._validate()

    @property
    def n_branches(self) -> int:
        return len(self.branches)

    def customer_ids(self) -> tuple[int, ...]:
        return tuple(c.customer_id for c in self.customers)

    def with_activities(self, activities) -> "Dataset":
        return Dataset(self.customers, self.branches, activities, self.labels)

    def _validate(self):
        if len(self.customer_by_id) != len(self.customers):
            raise ValidationError("duplicate customer_id")
        b = len(self.branches)
        if b < 5:
            raise ValidationError(f"need at least 5 branches for top-5 selection, got {b}")
        if [br.branch_id for br in self.branches] != list(range(b)):
            raise ValidationError("branch_ids must be contiguous 0..b-1")
        geo_status = {}
        for a in self.activities:
            if a.customer_id not in self.customer_by_id:
                raise ValidationError(f"activity references unknown customer_id {a.customer_id}")
            has_geo = a.geo is not None
            prev = geo_status.setdefault(a.channel, has_geo)
            if prev != has_geo:
                raise ValidationError(
                    f"channel {a.channel!r} mixes geolocated and non-geolocated activities"
                )
        for (cid, bid), count in self.labels.visits.items():
            if cid not in self.customer_by_id:
                raise ValidationError(f"visits reference unknown customer_id {cid}")
            if bid not in self.branch_by_id:
                raise ValidationError(f"visits reference unknown branch_id {bid}")
            if count < 0:
                raise ValidationError(f"negative visit count for customer {cid}, branch {bid}")
        for cid, applied in self.labels.applied.items():
            if cid not in self.customer_by_id:
                raise ValidationError(f"labels_task2 reference unknown customer_id {cid}")
            if applied not in (0, 1):
                raise ValidationError(f"customer {cid}: applied must be 0 or 1")


def visits_matrix(labels: Labels, ids, n_branches: int) -> np.ndarray:
    """Dense (len(ids), n_branches) float matrix of visit counts."""
    out = np.zeros((len(ids), n_branches))
    pos = {cid: i for i, cid in enumerate(ids)}
    for (cid, bid), count in labels.visits.items():
        i = pos.get(cid)
        if i is not None:
            out[i, bid] = count
    return out


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

def split_customers(ids, fraction: float, seed: int) -> DataSplit:
    """Uniform random customer-level split: Fisher-Yates shuffle of the
    sorted ids, first round(fraction*n) to train (half rounds up)."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0,1), got {fraction}")
    arr = sorted(set(ids))
    n = len(arr)
    if n < 2:
        raise ValueError("need at least 2 ids to split")
    rng = np.random.default_rng(seed)
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        arr[i], arr[j] = arr[j], arr[i]
    n_train = int(fraction * n + 0.5)
    n_train = min(max(n_train, 1), n - 1)
    return DataSplit(
        train_ids=tuple(sorted(arr[:n_train])),
        valid_ids=tuple(sorted(arr[n_train:])),
        seed=seed,
    )


def restrict_activities(activities, max_month: int = 6):
    """Keep only activities with month <= max_month (applied to all
    customers before feature extraction, so folds see the same months)."""
    return tuple(a for a in activities if a.month <= max_month)


# ---------------------------------------------------------------------------
# CSV loading
# ---------------------------------------------------------------------------

def _read_rows(path: Path, expected_header):
    if not path.exists():
        raise ValidationError(f"missing dataset file: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path.name}: empty file, expected header") from None
        if header != list(expected_header):
            raise ValidationError(
                f"{path.name}: bad header {header}, expected {list(expected_header)}"
            )
        return list(reader)


def _row_int(row, idx, path, rownum, what):
    try:
        return int(row[idx])
    except (ValueError, IndexError):
        raise ValidationError(f"{path}: row {rownum}: bad {what}: {row}") from None


def _row_float(row, idx, path, rownum, what):
    try:
        return float(row[idx])
    except (ValueError, IndexError):
        raise ValidationError(f"{path}: row {rownum}: bad {what}: {row}") from None


CUSTOMER_HEADER = (
    ["customer_id", "age_cat", "income_cat", "gender", "res_x", "res_y"]
    + [f"wealth_m{m}" for m in range(1, N_MONTHS + 1)]
    + [f"card_m{m}" for m in range(1, N_MONTHS + 1)]
)
BRANCH_HEADER = ["branch_id", "x", "y"]
ACTIVITY_HEADER = ["customer_id", "month", "channel", "x", "y"]
VISITS_HEADER = ["customer_id", "branch_id", "count"]
LABELS_HEADER = ["customer_id", "applied"]


def load_dataset(dir_path) -> Dataset:
    """Load and fully validate a dataset directory; raises ValidationError
    naming the file and row on the first violation."""
    d = Path(dir_path)

    customers = []
    for i, row in enumerate(_read_rows(d / "customers.csv", CUSTOMER_HEADER), start=2):
        cid = _row_int(row, 0, "customers.csv", i, "customer_id")
        flags = [_row_int(row, 6 + j, "customers.csv", i, "flag") for j in range(2 * N_MONTHS)]
        try:
            customers.append(
                Customer(
                    customer_id=cid,
                    age_cat=_row_int(row, 1, "customers.csv", i, "age_cat"),
                    income_cat=_row_int(row, 2, "customers.csv", i, "income_cat"),
                    gender=row[3],
                    residence=(
                        _row_float(row, 4, "customers.csv", i, "res_x"),
                        _row_float(row, 5, "customers.csv", i, "res_y"),
                    ),
                    wealth_flags=tuple(flags[:N_MONTHS]),
                    card_flags=tuple(flags[N_MONTHS:]),
                )
            )
        except ValidationError as exc:
            raise ValidationError(f"customers.csv: row {i}: {exc}") from None

    branches = [
        Branch(
            branch_id=_row_int(row, 0, "branches.csv", i, "branch_id"),
            location=(
                _row_float(row, 1, "branches.csv", i, "x"),
                _row_float(row, 2, "branches.csv", i, "y"),
            ),
        )
        for i, row in enumerate(_read_rows(d / "branches.csv", BRANCH_HEADER), start=2)
    ]

    activities = []
    for i, row in enumerate(_read_rows(d / "activities.csv", ACTIVITY_HEADER), start=2):
        if len(row) != 5:
            raise ValidationError(f"activities.csv: row {i}: expected 5 fields, got {len(row)}")
        has_x, has_y = row[3] != "", row[4] != ""
        if has_x != has_y:
            raise ValidationError(f"activities.csv: row {i}: partial coordinates")
        geo = (
            (_row_float(row, 3, "activities.csv", i, "x"), _row_float(row, 4, "activities.csv", i, "y"))
            if has_x
            else None
        )
        try:
            activities.append(
                Activity(
                    customer_id=_row_int(row, 0, "activities.csv", i, "customer_id"),
                    month=_row_int(row, 1, "activities.csv", i, "month"),
                    channel=row[2],
                    geo=geo,
                )
            )
        except ValidationError as exc:
            raise ValidationError(f"activities.csv: row {i}: {exc}") from None

    visits = {}
    for i, row in enumerate(_read_rows(d / "visits.csv", VISITS_HEADER), start=2):
        key = (
            _row_int(row, 0, "visits.csv", i, "customer_id"),
            _row_int(row, 1, "visits.csv", i, "branch_id"),
        )
        if key in visits:
            raise ValidationError(f"visits.csv: row {i}: duplicate (customer_id, branch_id) {key}")
        visits[key] = _row_int(row, 2, "visits.csv", i, "count")

    applied = {}
    for i, row in enumerate(_read_rows(d / "labels_task2.csv", LABELS_HEADER), start=2):
        cid = _row_int(row, 0, "labels_task2.csv", i, "customer_id")
        if cid in applied:
            raise ValidationError(f"labels_task2.csv: row {i}: duplicate customer_id {cid}")
        applied[cid] = _row_int(row, 1, "labels_task2.csv", i, "applied")

    return Dataset(customers, branches, activities, Labels(visits=visits, applied=applied))


def write_dataset(dir_path, dataset: Dataset) -> None:
    """Write the five CSV files; floats use repr (exact round-trip)."""
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)

    def dump(name, header, rows):
        with open(d / name, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)

    dump(
        "customers.csv",
        CUSTOMER_HEADER,
        (
            [c.customer_id, c.age_cat, c.income_cat, c.gender, repr(c.residence[0]), repr(c.residence[1])]
            + list(c.wealth_flags)
            + list(c.card_flags)
            for c in dataset.customers
        ),
    )
    dump(
        "branches.csv",
        BRANCH_HEADER,
        ([b.branch_id, repr(b.location[0]), repr(b.location[1])] for b in dataset.branches),
    )
    dump(
        "activities.csv",
        ACTIVITY_HEADER,
        (
            [a.customer_id, a.month, a.channel]
            + ([repr(a.geo[0]), repr(a.geo[1])] if a.geo is not None else ["", ""])
            for a in dataset.activities
        ),
    )
    dump(
        "visits.csv",
        VISITS_HEADER,
        ([cid, bid, count] for (cid, bid), count in sorted(dataset.labels.visits.items()) if count > 0),
    )
    dump(
        "labels_task2.csv",
        LABELS_HEADER,
        ([cid, a] for cid, a in sorted(dataset.labels.applied.items())),
    )


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GenConfig:
    """Synthetic dataset knobs. Residences and branches are uniform on a
    square map; visit counts are Poisson with rate
    visit_amplitude * exp(-distance / visit_decay), so distance genuinely
    predicts visits; task-2 labels are Bernoulli of a logistic latent built
    from task-2-visible features plus Gaussian noise, with the intercept
    solved to hit positive_rate."""

    n_customers: int = 1000
    n_branches: int = 8
    n_channels: int = 3
    n_nongeo_channels: int = 1
    extent: float = 100.0
    mean_activities: float = 8.0
    activity_jitter: float = 8.0
    visit_amplitude: float = 6.0
    visit_decay: float = 15.0
    positive_rate: float = 0.10
    task2_noise: float = 1.0
    wealth_start_prob: float = 0.5
    wealth_flip_prob: float = 0.1
    card_start_prob: float = 0.5
    card_flip_prob: float = 0.1

    def __post_init__(self):
        if self.n_branches < 5:
            raise ValueError(f"n_branches must be >= 5 (top-5 selection), got {self.n_branches}")
        if self.n_customers < 2:
            raise ValueError("n_customers must be >= 2")
        n_geo = self.n_channels - self.n_nongeo_channels
        if not (0 <= self.n_nongeo_channels <= len(NONGEO_CHANNEL_NAMES)):
            raise ValueError("n_nongeo_channels out of range")
        if not (0 <= n_geo <= len(GEO_CHANNEL_NAMES)) or self.n_channels < 1:
            raise ValueError("n_channels out of range")
        if not 0.0 < self.positive_rate < 1.0:
            raise ValueError("positive_rate must be in (0,1)")
        if self.extent <= 0 or self.visit_decay <= 0 or self.visit_amplitude < 0:
            raise ValueError("extent, visit_decay must be > 0 and visit_amplitude >= 0")
        for p in (self.wealth_start_prob, self.wealth_flip_prob, self.card_start_prob, self.card_flip_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("flag probabilities must be in [0,1]")

    def channel_names(self):
        n_geo = self.n_channels - self.n_nongeo_channels
        return GEO_CHANNEL_NAMES[:n_geo] + NONGEO_CHANNEL_NAMES[: self.n_nongeo_channels]

    def geo_channels(self):
        return set(GEO_CHANNEL_NAMES[: self.n_channels - self.n_nongeo_channels])


def parse_genconfig(path) -> GenConfig:
    """Read GenConfig overrides from a key=value text file ('#' comments)."""
    valid = {f.name: f.type for f in fields(GenConfig)}
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
    try:
        return GenConfig(**kwargs)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None


def _flag_series(rng, n, start_prob, flip_prob):
    flags = np.empty((n, N_MONTHS), dtype=np.int64)
    flags[:, 0] = rng.random(n) < start_prob
    for m in range(1, N_MONTHS):
        flip = rng.random(n) < flip_prob
        flags[:, m] = np.where(flip, 1 - flags[:, m - 1], flags[:, m - 1])
    return flags


# latent weights for the task-2 label; only task-2-visible features enter
_TRAJ_WEALTH_W = {1: 0.9, 2: -0.9, 3: 0.45, 4: -0.45, 5: 0.0}
_TRAJ_CARD_W = {1: -1.0, 2: 1.0, 3: -0.5, 4: 0.7, 5: 0.2}
_AGE_W = (-0.3, 0.0, 0.3)
_INCOME_W = (-0.4, 0.0, 0.4)
_CHANNEL_W = (0.8, -0.5, 0.6, -0.4, 0.5, -0.3, 0.4, -0.2, 0.3, -0.1)


def _trajectory_cat(flags) -> int:
    changes = sum(1 for t in range(N_MONTHS - 1) if flags[t] != flags[t + 1])
    if changes == 0:
        return 1 if flags[0] == 1 else 2
    if changes == 1:
        return 3 if flags[0] == 1 else 4
    return 5


def _solve_intercept(latent, rate):
    lo, hi = -30.0, 30.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if float(np.mean(expit(latent + mid))) < rate:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def generate(config: GenConfig, seed: int, out_dir) -> Path:
    """Generate a synthetic dataset on disk; deterministic per seed."""
    ss = np.random.SeedSequence(seed)
    r_cust, r_act, r_vis, r_lab = (np.random.default_rng(s) for s in ss.spawn(4))
    n = config.n_customers
    ext = config.extent

    res = r_cust.uniform(0.0, ext, size=(n, 2))
    age = r_cust.integers(1, 4, size=n)
    income = r_cust.integers(1, 4, size=n)
    gender = np.where(r_cust.random(n) < 0.5, "M", "F")
    wealth = _flag_series(r_cust, n, config.wealth_start_prob, config.wealth_flip_prob)
    card = _flag_series(r_cust, n, config.card_start_prob, config.card_flip_prob)

    customers = [
        Customer(
            customer_id=i + 1,
            age_cat=int(age[i]),
            income_cat=int(income[i]),
            gender=str(gender[i]),
            residence=(float(res[i, 0]), float(res[i, 1])),
            wealth_flags=tuple(int(v) for v in wealth[i]),
            card_flags=tuple(int(v) for v in card[i]),
        )
        for i in range(n)
    ]

    branch_xy = r_cust.uniform(0.0, ext, size=(config.n_branches, 2))
    branches = [
        Branch(branch_id=b, location=(float(branch_xy[b, 0]), float(branch_xy[b, 1])))
        for b in range(config.n_branches)
    ]

    channels = config.channel_names()
    geo_set = config.geo_channels()
    activities = []
    n_acts = r_act.poisson(config.mean_activities, size=n)
    channel_counts = np.zeros((n, len(channels)), dtype=np.int64)
    for i in range(n):
        for _ in range(int(n_acts[i])):
            ch_idx = int(r_act.integers(0, len(channels)))
            ch = channels[ch_idx]
            channel_counts[i, ch_idx] += 1
            month = int(r_act.integers(1, N_MONTHS + 1))
            if ch in geo_set:
                jitter = r_act.normal(0.0, config.activity_jitter, size=2)
                geo = (float(res[i, 0] + jitter[0]), float(res[i, 1] + jitter[1]))
            else:
                geo = None
            activities.append(Activity(customer_id=i + 1, month=month, channel=ch, geo=geo))

    dist = np.sqrt(((res[:, None, :] - branch_xy[None, :, :]) ** 2).sum(axis=2))
    lam = config.visit_amplitude * np.exp(-dist / config.visit_decay)
    counts = r_vis.poisson(lam)
    visits = {
        (i + 1, b): int(counts[i, b])
        for i in range(n)
        for b in range(config.n_branches)
        if counts[i, b] > 0
    }

    # task-2 latent from task-2-visible features only
    cc = channel_counts.astype(float)
    mu = cc.mean(axis=0)
    sd = cc.std(axis=0)
    sd[sd == 0] = 1.0
    z = (cc - mu) / sd
    ch_w = np.array(_CHANNEL_W[: len(channels)])
    latent = z @ ch_w
    latent += np.array([_TRAJ_WEALTH_W[_trajectory_cat(c.wealth_flags)] for c in customers])
    latent += np.array([_TRAJ_CARD_W[_trajectory_cat(c.card_flags)] for c in customers])
    latent += np.array([_AGE_W[c.age_cat - 1] for c in customers])
    latent += np.array([_INCOME_W[c.income_cat - 1] for c in customers])
    latent += np.where(gender == "M", 0.2, -0.2)
    latent += config.task2_noise * r_lab.normal(0.0, 1.0, size=n)
    intercept = _solve_intercept(latent, config.positive_rate)
    applied_arr = (r_lab.random(n) < expit(latent + intercept)).astype(int)
    applied = {i + 1: int(applied_arr[i]) for i in range(n)}

    ds = Dataset(customers, branches, activities, Labels(visits=visits, applied=applied))
    out = Path(out_dir)
    write_dataset(out, ds)
    return out


def euclidean(a, b) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


__all__ = [
    "Customer",
    "Branch",
    "Activity",
    "Labels",
    "DataSplit",
    "Dataset",
    "GenConfig",
    "load_dataset",
    "write_dataset",
    "split_customers",
    "restrict_activities",
    "generate",
    "parse_genconfig",
    "visits_matrix",
    "euclidean",
]
