"""Sorption data ingestion, feature engineering, robust scaling and
experiment-level (group-aware) partitioning."""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

log = logging.getLogger(__name__)

R_GAS = 8.314  # J/(mol K)
T_CRIT_CH4 = 190.6  # K
P_CRIT_CH4 = 4.60  # MPa

COLUMNS = ("experiment_id", "temperature", "pressure", "moisture", "ash", "volatile", "adsorption")
FEATURE_NAMES = ("t", "p", "moisture", "ash", "volatile", "t_r", "p_r", "fc", "om", "beta", "pt", "mv")
COMPOSITIONAL = ("moisture", "ash", "volatile", "fc", "om")

TEMPERATURE_BANDS = ((293.0, 303.0), (303.0, 313.0), (313.0, 323.0))
PRESSURE_REGIMES = (3.0, 6.0)
# volatile-matter thresholds (wt%) separating high / medium / low rank
RANK_EDGES = (15.0, 30.0)
RANK_LABELS = ("high", "medium", "low")

VIF_CAP = 1e6


class DataError(ValueError):
    """Malformed or physically inconsistent input data."""


@dataclass(frozen=True)
class Measurement:
    experiment_id: str
    temperature: float  # K
    pressure: float  # MPa
    moisture: float  # wt%
    ash: float
    volatile: float
    adsorption: float  # m3/t

    def validate(self):
        if not self.temperature > 0:
            raise DataError(f"{self.experiment_id}: temperature must be > 0 K")
        if self.pressure < 0:
            raise DataError(f"{self.experiment_id}: negative pressure")
        if min(self.moisture, self.ash, self.volatile) < 0:
            raise DataError(f"{self.experiment_id}: negative composition")
        if self.moisture + self.ash + self.volatile > 100:
            raise DataError(f"{self.experiment_id}: moisture+ash+volatile exceeds 100 wt%")
        if self.adsorption < 0:
            raise DataError(f"{self.experiment_id}: negative adsorption")


@dataclass
class Dataset:
    """Measurements in columnar form; row ``i`` belongs to ``experiment_id[i]``."""

    experiment_id: np.ndarray
    temperature: np.ndarray
    pressure: np.ndarray
    moisture: np.ndarray
    ash: np.ndarray
    volatile: np.ndarray
    adsorption: np.ndarray
    rejected: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.temperature)

    @classmethod
    def from_measurements(cls, rows, rejected=None):
        rows = list(rows)
        for m in rows:
            m.validate()
        cols = {c: [getattr(m, c) for m in rows] for c in COLUMNS}
        return cls(
            experiment_id=np.array(cols["experiment_id"], dtype=object),
            **{c: np.array(cols[c], dtype=float) for c in COLUMNS[1:]},
            rejected=dict(rejected or {}),
        )

    def measurements(self):
        for i in range(len(self)):
            yield Measurement(
                str(self.experiment_id[i]),
                *(float(getattr(self, c)[i]) for c in COLUMNS[1:]),
            )

    def subset(self, mask):
        mask = np.asarray(mask)
        return Dataset(**{c: getattr(self, c)[mask] for c in COLUMNS})

    @property
    def experiments(self):
        # first-appearance order, so downstream RNG use is independent of set ordering
        _, first = np.unique(self.experiment_id.astype(str), return_index=True)
        return [str(self.experiment_id[i]) for i in sorted(first)]

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(COLUMNS)
            for m in self.measurements():
                w.writerow([m.experiment_id] + [repr(getattr(m, c)) for c in COLUMNS[1:]])


def load_dataset(path, schema=None):
    """Read a measurement CSV.

    ``schema`` is a dict (or path to a JSON sidecar) with an optional
    ``temperature_unit`` of ``"K"`` or ``"C"`` and an optional ``columns``
    mapping from canonical column names to the names used in the file.
    Rows with blank cells and exact duplicate rows are dropped and counted in
    ``Dataset.rejected``.
    """
    if isinstance(schema, (str, Path)):
        schema = json.loads(Path(schema).read_text())
    schema = schema or {}
    unit = schema.get("temperature_unit", "K")
    if unit not in ("K", "C"):
        raise DataError(f"temperature_unit must be 'K' or 'C', got {unit!r}")
    renames = schema.get("columns", {})

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file")
        header = [h.strip() for h in reader.fieldnames]
        lookup = {c: renames.get(c, c) for c in COLUMNS}
        missing = [c for c, name in lookup.items() if name not in header]
        if missing:
            raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
        raw_rows = [{k.strip(): (v or "").strip() for k, v in r.items() if k} for r in reader]
    if not raw_rows:
        raise DataError(f"{path}: no data rows")

    rows, seen = [], set()
    n_missing = n_dup = 0
    for lineno, r in enumerate(raw_rows, start=2):
        cells = [r.get(lookup[c], "") for c in COLUMNS]
        if any(c == "" for c in cells):
            n_missing += 1
            continue
        key = tuple(cells)
        if key in seen:
            n_dup += 1
            continue
        seen.add(key)
        values = []
        for c, cell in zip(COLUMNS[1:], cells[1:]):
            try:
                values.append(float(cell))
            except ValueError:
                raise DataError(f"{path}: line {lineno}, column {c!r}: cannot parse {cell!r}") from None
        if unit == "C":
            values[0] += 273.15
        rows.append(Measurement(cells[0], *values))
    if n_missing or n_dup:
        log.info("rejected %d rows with missing values and %d duplicates", n_missing, n_dup)
    return Dataset.from_measurements(rows, rejected={"missing": n_missing, "duplicate": n_dup})


# ---------------------------------------------------------------- outliers


def quartiles(x):
    q1, q3 = np.quantile(np.asarray(x, dtype=float), [0.25, 0.75], method="linear")
    return float(q1), float(q3)


@dataclass
class OutlierReport:
    flags: dict  # variable -> row indices outside the 3*IQR fences
    fences: dict  # variable -> (low, high)
    insufficient: bool = False

    @property
    def flagged_rows(self):
        rows = set()
        for idx in self.flags.values():
            rows.update(int(i) for i in idx)
        return sorted(rows)

    def rate(self, n_rows):
        return len(self.flagged_rows) / n_rows if n_rows else 0.0


def screen_outliers(ds, variables=("temperature", "pressure", "moisture", "ash", "volatile", "adsorption"), k=3.0):
    """Flag values beyond ``Q1 - k*IQR`` / ``Q3 + k*IQR``. Nothing is removed.

    ``ds`` is a :class:`Dataset` or a mapping from variable name to values.
    """
    n_rows = len(ds) if not isinstance(ds, dict) else min(len(ds[v]) for v in variables)
    if n_rows < 4:
        return OutlierReport({}, {}, insufficient=True)
    flags, fences = {}, {}
    for v in variables:
        x = getattr(ds, v) if not isinstance(ds, dict) else np.asarray(ds[v], dtype=float)
        q1, q3 = quartiles(x)
        iqr = q3 - q1
        lo, hi = q1 - k * iqr, q3 + k * iqr
        fences[v] = (lo, hi)
        flags[v] = np.flatnonzero((x > hi) | (x < lo)).tolist()
    return OutlierReport(flags, fences)


# ---------------------------------------------------------------- features


def engineer_features(m):
    """12-entry feature vector (order :data:`FEATURE_NAMES`) for one measurement."""
    fc = 100.0 - (m.moisture + m.ash + m.volatile)
    if fc < 0:
        raise DataError(f"{m.experiment_id}: fixed carbon {fc:.3f} < 0 (mass balance)")
    return np.array([
        m.temperature,
        m.pressure,
        m.moisture,
        m.ash,
        m.volatile,
        m.temperature / T_CRIT_CH4,
        m.pressure / P_CRIT_CH4,
        fc,
        (m.volatile + fc) / 100.0,
        1.0 / (R_GAS * m.temperature),
        m.pressure * m.temperature,
        m.moisture * m.volatile,
    ])


def feature_matrix(ds):
    """Vectorized :func:`engineer_features` over a whole :class:`Dataset`."""
    t, p = ds.temperature, ds.pressure
    fc = 100.0 - (ds.moisture + ds.ash + ds.volatile)
    if np.any(fc < 0):
        i = int(np.flatnonzero(fc < 0)[0])
        raise DataError(f"row {i} ({ds.experiment_id[i]}): fixed carbon < 0 (mass balance)")
    return np.column_stack([
        t, p, ds.moisture, ds.ash, ds.volatile,
        t / T_CRIT_CH4, p / P_CRIT_CH4, fc, (ds.volatile + fc) / 100.0,
        1.0 / (R_GAS * t), p * t, ds.moisture * ds.volatile,
    ])


def with_pressure(raw, pressure):
    """Copy of a raw feature matrix with pressure-dependent columns recomputed."""
    out = np.array(raw, dtype=float, copy=True)
    out[:, 1] = pressure
    out[:, 6] = pressure / P_CRIT_CH4
    out[:, 10] = pressure * out[:, 0]
    return out


# ---------------------------------------------------------------- scaling


@dataclass(frozen=True)
class ScalerState:
    median: np.ndarray
    iqr: np.ndarray

    def to_dict(self):
        return {"median": self.median.tolist(), "iqr": self.iqr.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["median"], float), np.asarray(d["iqr"], float))


def fit_scaler(train):
    """Median / IQR robust scaler. Zero IQRs are replaced by 1.0 with a warning."""
    train = np.atleast_2d(np.asarray(train, dtype=float))
    if train.shape[0] == 0:
        raise DataError("cannot fit scaler on an empty training set")
    if train.shape[0] < 2:
        raise DataError("scaler needs at least 2 training rows")
    median = np.median(train, axis=0)
    q1, q3 = np.quantile(train, [0.25, 0.75], axis=0, method="linear")
    iqr = q3 - q1
    degenerate = iqr <= 0
    if degenerate.any():
        warnings.warn(
            f"zero IQR for feature column(s) {np.flatnonzero(degenerate).tolist()}; using 1.0",
            RuntimeWarning,
            stacklevel=2,
        )
        iqr = np.where(degenerate, 1.0, iqr)
    return ScalerState(median, iqr)


def transform(x, s):
    return (np.asarray(x, dtype=float) - s.median) / s.iqr


def inverse_transform(z, s):
    return np.asarray(z, dtype=float) * s.iqr + s.median


def transform_target(y):
    return np.log1p(y)


def inverse_target(y_log):
    return np.expm1(y_log)


# ---------------------------------------------------------------- splitting


def strata(ds):
    """Temperature band x pressure regime label per measurement, e.g. ``"T1P0"``."""
    t = ds.temperature
    band = np.digitize(t, [b[1] for b in TEMPERATURE_BANDS[:-1]])
    regime = np.digitize(ds.pressure, PRESSURE_REGIMES, right=False)
    return np.array([f"T{b}P{r}" for b, r in zip(band, regime)], dtype=object)


def rank_category(volatile):
    """high / medium / low rank from volatile matter; intervals are left-closed."""
    idx = np.digitize(np.asarray(volatile, dtype=float), RANK_EDGES, right=False)
    return np.array([RANK_LABELS[i] for i in np.atleast_1d(idx)], dtype=object)


@dataclass
class SplitResult:
    seed: int
    test_fraction: float
    train_experiments: list
    test_experiments: list
    partition: np.ndarray  # "train" / "test" per measurement
    stratum: np.ndarray

    def leakage(self, ds):
        """Fraction of test measurements whose experiment also occurs in training."""
        train_ids = set(ds.experiment_id[self.partition == "train"])
        test_ids = ds.experiment_id[self.partition == "test"]
        if len(test_ids) == 0:
            return 0.0
        return float(np.mean([e in train_ids for e in test_ids]))

    def to_dict(self):
        return {
            "seed": self.seed,
            "test_fraction": self.test_fraction,
            "train_experiments": list(self.train_experiments),
            "test_experiments": list(self.test_experiments),
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path, ds):
        d = json.loads(Path(path).read_text())
        return cls.from_experiments(ds, d["train_experiments"], d["test_experiments"], d["seed"], d["test_fraction"])

    @classmethod
    def from_experiments(cls, ds, train_ids, test_ids, seed=0, test_fraction=0.0):
        test_set = set(test_ids)
        if test_set & set(train_ids):
            raise DataError("train and test experiments overlap")
        partition = np.array(["test" if e in test_set else "train" for e in ds.experiment_id], dtype=object)
        return cls(seed, test_fraction, list(train_ids), list(test_ids), partition, strata(ds))


def _stratum_counts(labels, keys):
    return np.array([np.sum(labels == k) for k in keys], dtype=float)


def group_split(ds, test_fraction=0.2, seed=0):
    """Experiment-level train/test split with greedy stratum balancing.

    Experiments are visited in a seeded random order. The number of test
    experiments is ``round(test_fraction * n_experiments)`` (at least one on
    each side). Each experiment goes to the test side when that lowers the
    total absolute difference between the test and train stratum proportions
    and the test quota is not yet full.
    """
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    exps = ds.experiments
    if len(exps) < 2:
        raise DataError("group split needs at least 2 experiments")
    n_test = min(max(int(round(test_fraction * len(exps))), 1), len(exps) - 1)

    rng = np.random.default_rng(seed)
    order = [exps[i] for i in rng.permutation(len(exps))]
    lab = strata(ds)
    keys = sorted(set(lab))
    per_exp = {e: _stratum_counts(lab[ds.experiment_id == e], keys) for e in exps}
    total = sum(per_exp.values())

    test, test_counts = [], np.zeros(len(keys))

    def deviation(tc):
        tr = total - tc
        return np.abs(tc / max(tc.sum(), 1) - tr / max(tr.sum(), 1)).sum()

    remaining = list(order)
    # the first pick is the RNG's choice; later picks are greedy
    while len(test) < n_test:
        if not test:
            best = remaining[0]
        else:
            scores = [deviation(test_counts + per_exp[e]) for e in remaining]
            best = remaining[int(np.argmin(scores))]
        test.append(best)
        test_counts = test_counts + per_exp[best]
        remaining.remove(best)
    train = [e for e in order if e not in set(test)]
    return SplitResult.from_experiments(ds, train, test, seed, test_fraction)


def group_kfold(ds, k=5, seed=0):
    """Assign each experiment to one of ``k`` folds; sizes differ by at most one.

    Returns a list of ``k`` lists of experiment ids.
    """
    exps = ds.experiments if isinstance(ds, Dataset) else list(ds)
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > len(exps):
        raise DataError(f"k={k} exceeds the number of experiments ({len(exps)})")
    rng = np.random.default_rng(seed)
    order = [exps[i] for i in rng.permutation(len(exps))]
    return [order[i::k] for i in range(k)]


# ---------------------------------------------------------------- balance audit


def kolmogorov_pvalue(d, n1, n2):
    """Asymptotic two-sample KS p-value from the Kolmogorov distribution.

    Uses the effective-size correction ``(sqrt(ne) + 0.12 + 0.11/sqrt(ne)) d``.
    The survival function is evaluated in full (scipy's ``kstwobign``) since
    a truncated series collapses towards 0 for small statistics.
    """
    if d <= 0:
        return 1.0
    en = math.sqrt(n1 * n2 / (n1 + n2))
    lam = (en + 0.12 + 0.11 / en) * d
    return float(min(max(stats.kstwobign.sf(lam), 0.0), 1.0))


def ks_2samp(a, b):
    a, b = np.sort(np.asarray(a, float)), np.sort(np.asarray(b, float))
    grid = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, grid, side="right") / len(a)
    cdf_b = np.searchsorted(b, grid, side="right") / len(b)
    d = float(np.max(np.abs(cdf_a - cdf_b)))
    return d, kolmogorov_pvalue(d, len(a), len(b))


def cohens_d(a, b):
    """Standardized mean difference with the (n-1)-weighted pooled SD.

    Negative when ``a`` has the smaller mean. Zero pooled SD gives 0 for equal
    means and a signed infinity otherwise.
    """
    a, b = np.asarray(a, float), np.asarray(b, float)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each sample needs at least 2 values")
    diff = a.mean() - b.mean()
    pooled = math.sqrt(((len(a) - 1) * a.var(ddof=1) + (len(b) - 1) * b.var(ddof=1)) / (len(a) + len(b) - 2))
    if pooled == 0:
        return 0.0 if diff == 0 else math.copysign(math.inf, diff)
    return float(diff / pooled)


@dataclass
class BalanceReport:
    ks: dict  # feature -> (statistic, p-value)
    cohens_d: dict
    rank_proportions: dict  # partition -> {category: proportion}
    rank_deviation: dict  # category -> max |partition - overall| proportion

    def compliant(self, alpha=0.05, max_d=0.15):
        return all(p > alpha for _, p in self.ks.values()) and all(abs(d) < max_d for d in self.cohens_d.values())

    def to_dict(self):
        return {
            "ks": {k: {"statistic": s, "p_value": p} for k, (s, p) in self.ks.items()},
            "cohens_d": self.cohens_d,
            "rank_proportions": self.rank_proportions,
            "rank_deviation": self.rank_deviation,
        }


def verify_balance(split, ds):
    """KS tests, Cohen's d and rank-category proportions, train vs test."""
    feats = feature_matrix(ds)
    tr = split.partition == "train"
    te = split.partition == "test"
    if tr.sum() < 2 or te.sum() < 2:
        raise DataError("each partition needs at least 2 rows for a balance audit")
    ks, d = {}, {}
    for name in COMPOSITIONAL:
        j = FEATURE_NAMES.index(name)
        ks[name] = ks_2samp(feats[tr, j], feats[te, j])
        d[name] = cohens_d(feats[tr, j], feats[te, j])
    ranks = rank_category(ds.volatile)
    props = {}
    for part, mask in (("all", np.ones(len(ds), bool)), ("train", tr), ("test", te)):
        props[part] = {c: float(np.mean(ranks[mask] == c)) for c in RANK_LABELS}
    dev = {c: max(abs(props["train"][c] - props["all"][c]), abs(props["test"][c] - props["all"][c])) for c in RANK_LABELS}
    return BalanceReport(ks, d, props, dev)


# ---------------------------------------------------------------- collinearity


def compute_vif(features):
    """Variance inflation factor of each column against all the others.

    Returns ``(vif, collinear)``: ``collinear[j]`` is set when column ``j`` is
    (numerically) an exact linear combination of the rest, in which case its
    VIF is capped at ``1e6``.
    """
    X = np.asarray(features, dtype=float)
    n, p = X.shape
    if p < 2:
        raise ValueError("VIF needs at least 2 features")
    if n <= p:
        raise ValueError("VIF needs more rows than features")
    vif = np.empty(p)
    flag = np.zeros(p, dtype=bool)
    for j in range(p):
        y = X[:, j]
        A = np.column_stack([np.ones(n), np.delete(X, j, axis=1)])
        coef, *_ = np.linalg.lstsq(A, y, rcond=None)
        ss_res = float(np.sum((y - A @ coef) ** 2))
        ss_tot = float(np.sum((y - y.mean()) ** 2))
        if ss_tot == 0:
            vif[j], flag[j] = VIF_CAP, True
            continue
        r2 = 1.0 - ss_res / ss_tot
        if r2 >= 1.0 - 1.0 / VIF_CAP:
            vif[j], flag[j] = VIF_CAP, True
        else:
            vif[j] = max(1.0, 1.0 / (1.0 - r2))
    return vif, flag
