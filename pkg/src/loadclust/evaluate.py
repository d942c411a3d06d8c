"""Partition validation and description.

Adjusted Rand index between partitions, chi-squared independence tests of
clusters against an external categorical segmentation, medoid prototypes,
time-of-day consumption profiles and per-cluster feature means.

The chi-squared p-value needs the regularized incomplete gamma function,
implemented here directly (series expansion for small arguments, Lentz
continued fraction otherwise) so the package carries no statistics-runtime
dependency.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .dissimilarity import CondensedMatrix
from .errors import EvaluateError
from .hclust import Partition
from .ingest import LoadSeries

log = logging.getLogger(__name__)

_GAMMA_TOL = 1e-12
_GAMMA_MAX_ITER = 1000


@dataclass
class ContingencyTable:
    rows: list[int]          # cluster ids
    cols: list[str]          # external category names
    counts: np.ndarray       # shape (len(rows), len(cols)), non-negative ints

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (len(self.rows), len(self.cols)):
            raise EvaluateError("contingency counts shape mismatch")
        if (self.counts < 0).any():
            raise EvaluateError("negative contingency counts")

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def _pair_counts(labels_a: np.ndarray, labels_b: np.ndarray):
    """Contingency-based pair sums used by the adjusted Rand index."""
    _, a_codes = np.unique(labels_a, return_inverse=True)
    _, b_codes = np.unique(labels_b, return_inverse=True)
    ka, kb = a_codes.max() + 1, b_codes.max() + 1
    table = np.zeros((ka, kb), dtype=np.int64)
    np.add.at(table, (a_codes, b_codes), 1)

    def comb2(x):
        x = x.astype(object)  # exact integer arithmetic
        return (x * (x - 1) // 2).sum()

    sum_cells = comb2(table.ravel())
    sum_rows = comb2(table.sum(axis=1))
    sum_cols = comb2(table.sum(axis=0))
    n = len(labels_a)
    total_pairs = n * (n - 1) // 2
    return sum_cells, sum_rows, sum_cols, total_pairs


def adjusted_rand_index(p1: Partition, p2: Partition) -> float:
    """Chance-corrected pair-counting agreement between two partitions.

    1 means identical cluster structure, around 0 means chance level.  If
    both partitions are trivial (the chance correction degenerates), the
    result is 1 for identical partitions and 0 otherwise.
    """
    if len(p1) != len(p2):
        raise EvaluateError(f"partition size mismatch: {len(p1)} vs {len(p2)}")
    a, b = p1.labels, p2.labels
    sum_cells, sum_rows, sum_cols, total_pairs = _pair_counts(a, b)
    expected = sum_rows * sum_cols / total_pairs
    max_index = (sum_rows + sum_cols) / 2
    if max_index == expected:
        _, ca = np.unique(a, return_inverse=True)
        _, cb = np.unique(b, return_inverse=True)
        # identical up to relabeling iff the codes match after first-seen order
        return 1.0 if np.array_equal(ca, cb) else 0.0
    return float((sum_cells - expected) / (max_index - expected))


def contingency_table(
    partition: Partition,
    labels,
    meter_ids=None,
    include_atypical: bool = False,
) -> ContingencyTable:
    """Cross-tabulate cluster membership against external categories.

    ``labels`` holds one category per leaf; a missing (None/empty) label is
    an error naming the offending meters.  Clusters flagged atypical are
    excluded unless ``include_atypical``.
    """
    labels = list(labels)
    if len(labels) != len(partition):
        raise EvaluateError("labels length != partition size")
    missing = [i for i, lab in enumerate(labels) if lab is None or lab == ""]
    if missing:
        names = [meter_ids[i] for i in missing] if meter_ids else missing
        raise EvaluateError(f"missing external label for: {names[:20]}")

    clusters = [
        c for c in range(partition.k)
        if include_atypical or not partition.atypical[c]
    ]
    categories = sorted(set(labels))
    cat_index = {c: j for j, c in enumerate(categories)}
    counts = np.zeros((len(clusters), len(categories)), dtype=np.int64)
    row_index = {c: i for i, c in enumerate(clusters)}
    for leaf, (cluster, lab) in enumerate(zip(partition.labels, labels)):
        row = row_index.get(int(cluster))
        if row is not None:
            counts[row, cat_index[lab]] += 1
    return ContingencyTable(rows=clusters, cols=categories, counts=counts)


def regularized_gamma_p(a: float, x: float) -> float:
    """Lower regularized incomplete gamma P(a, x)."""
    if a <= 0:
        raise EvaluateError("shape parameter must be > 0")
    if x < 0:
        raise EvaluateError("x must be >= 0")
    if x == 0.0:
        return 0.0
    if x < a + 1.0:
        return _gamma_series(a, x)
    return 1.0 - _gamma_cont_frac(a, x)


def regularized_gamma_q(a: float, x: float) -> float:
    """Upper regularized incomplete gamma Q(a, x) = 1 - P(a, x)."""
    if a <= 0:
        raise EvaluateError("shape parameter must be > 0")
    if x < 0:
        raise EvaluateError("x must be >= 0")
    if x == 0.0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _gamma_series(a, x)
    return _gamma_cont_frac(a, x)


def _gamma_series(a: float, x: float) -> float:
    # P(a,x) = x^a e^-x / Gamma(a) * sum_k x^k / (a(a+1)...(a+k)) ... / a
    term = 1.0 / a
    total = term
    denom = a
    for _ in range(_GAMMA_MAX_ITER):
        denom += 1.0
        term *= x / denom
        total += term
        if abs(term) < abs(total) * _GAMMA_TOL:
            break
    else:
        raise EvaluateError("incomplete gamma series failed to converge")
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_cont_frac(a: float, x: float) -> float:
    # Q(a,x) via the Lentz continued fraction.
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, _GAMMA_MAX_ITER + 1):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _GAMMA_TOL:
            break
    else:
        raise EvaluateError("incomplete gamma continued fraction failed to converge")
    return h * math.exp(-x + a * math.log(x) - math.lgamma(a))


def chi_squared_test(table: ContingencyTable) -> tuple[float, int, float]:
    """Pearson chi-squared independence test on a contingency table.

    Returns (statistic, degrees of freedom, p-value).  Expected counts
    below 5 trigger a warning; a zero row or column sum is an error.
    """
    counts = table.counts.astype(np.float64)
    total = counts.sum()
    if total == 0:
        raise EvaluateError("empty contingency table")
    row_sums = counts.sum(axis=1)
    col_sums = counts.sum(axis=0)
    if (row_sums == 0).any() or (col_sums == 0).any():
        raise EvaluateError("contingency table has an empty row or column")
    expected = np.outer(row_sums, col_sums) / total
    if (expected < 5).any():
        log.warning(
            "chi-squared test: %d expected cell(s) below 5",
            int((expected < 5).sum()),
        )
    statistic = float(((counts - expected) ** 2 / expected).sum())
    df = (counts.shape[0] - 1) * (counts.shape[1] - 1)
    if df == 0:
        raise EvaluateError("chi-squared test needs at least a 2x2 table")
    p_value = regularized_gamma_q(df / 2.0, statistic / 2.0)
    return statistic, df, p_value


def medoid(cluster_members, matrix: CondensedMatrix) -> int:
    """Member with minimal average dissimilarity to the rest of the cluster.

    Singletons are their own medoid; ties resolve to the smallest index.
    """
    members = [int(m) for m in cluster_members]
    if not members:
        raise EvaluateError("empty cluster has no medoid")
    for m in members:
        if not 0 <= m < matrix.n:
            raise EvaluateError(f"member index {m} out of range")
    if len(members) == 1:
        return members[0]
    members_sorted = sorted(members)
    best_idx, best_mean = -1, np.inf
    for m in members_sorted:
        mean = sum(matrix.get(m, o) for o in members_sorted if o != m) / (
            len(members_sorted) - 1
        )
        if mean < best_mean:
            best_idx, best_mean = m, mean
    return best_idx


def hourly_profile(series: LoadSeries, slots: int = 48) -> tuple[np.ndarray, np.ndarray]:
    """Mean consumption per time-of-day slot.

    With 48 slots each half hour gets its own mean; ``slots=24`` aggregates
    to hours.  Returns (profile, empty_mask); slots with no observed data
    hold NaN and are flagged in the mask.
    """
    if len(series) == 0:
        raise EvaluateError("empty series has no profile")
    if 1440 % slots != 0:
        raise EvaluateError(f"slots must divide the day, got {slots}")
    slot_minutes = 1440 // slots
    start_minutes = series.start.hour * 60 + series.start.minute
    step_minutes = int(series.step.total_seconds()) // 60
    t = np.arange(len(series))
    slot = ((start_minutes + t * step_minutes) // slot_minutes) % slots

    observed = ~series.missing
    sums = np.bincount(slot[observed], weights=series.values[observed], minlength=slots)
    counts = np.bincount(slot[observed], minlength=slots)
    empty = counts == 0
    profile = np.full(slots, np.nan)
    profile[~empty] = sums[~empty] / counts[~empty]
    return profile, empty


def cluster_feature_means(
    features, partition: Partition, include_atypical: bool = False
) -> dict[int, np.ndarray]:
    """Arithmetic mean feature vector per (non-atypical) cluster."""
    features = list(features)
    if len(features) != len(partition):
        raise EvaluateError("features length != partition size")
    stacked = np.vstack([fv.values for fv in features])
    means: dict[int, np.ndarray] = {}
    for c in range(partition.k):
        if not include_atypical and partition.atypical[c]:
            continue
        rows = partition.members(c)
        if rows.size:
            means[c] = stacked[rows].mean(axis=0)
    return means
