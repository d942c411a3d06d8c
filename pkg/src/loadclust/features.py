"""Per-series feature extraction: autocorrelations, partial autocorrelations
and quantile autocovariances.

All estimators tolerate residual missing values by working on
pairwise-complete observations: at lag ``j`` only pairs ``(t, t + j)``
with both entries observed contribute, and the divisor is the number of
such pairs.  On a complete series of usable length ``T`` this reduces to
the classical ``T - j`` divisor.

The autocorrelation at lag ``j`` divides the lagged covariance by the
product of the two marginal standard deviations computed over the same
pairs (lag-local marginals).  The quantile autocovariance at lag ``j``
and levels ``(tau, tau')`` is the mean of the indicator products
``I(x[t] <= q_tau) * I(x[t+j] <= q_tau')`` minus ``tau * tau'``, with
both quantiles estimated once from all observed values of the series.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import FeatureError
from .preprocess import DiffSeries

log = logging.getLogger(__name__)

#: maximum autocorrelation lag used when BIC selection is not requested
DEFAULT_K_MAX = 96
DEFAULT_QC_LAGS = (1,)
DEFAULT_QC_QUANTILES = (0.1, 0.5, 0.9)

KINDS = ("AC", "PAC", "QC")


@dataclass
class FeatureVector:
    meter_id: str
    kind: str
    values: np.ndarray
    k_max: int = 0
    lag_set: tuple[int, ...] = ()
    quantile_grid: tuple[tuple[float, float], ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise FeatureError(f"unknown feature kind {self.kind!r}")
        self.values = np.asarray(self.values, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.values)


def sample_quantile(values, tau: float) -> float:
    """Order-statistic quantile with linear interpolation at ``h = (n-1)*tau``.

    tau=0 returns the minimum and tau=1 the maximum.  The caller excludes
    missing entries.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise FeatureError("sample_quantile: empty input")
    if not np.isfinite(values).all():
        raise FeatureError("sample_quantile: non-finite input")
    if not 0.0 <= tau <= 1.0:
        raise FeatureError(f"sample_quantile: tau {tau} outside [0, 1]")
    return _quantile_sorted(np.sort(values), tau)


def _quantile_sorted(sorted_values: np.ndarray, tau: float) -> float:
    n = sorted_values.size
    h = (n - 1) * tau
    lo = int(np.floor(h))
    if lo >= n - 1:
        return float(sorted_values[n - 1])
    frac = h - lo
    return float(sorted_values[lo] + frac * (sorted_values[lo + 1] - sorted_values[lo]))


def _masked(series: DiffSeries) -> tuple[np.ndarray, np.ndarray]:
    """Return (values zero-filled at missing, 0/1 observation weights)."""
    v = (~series.missing).astype(np.float64)
    z = np.where(series.missing, 0.0, series.values)
    if not np.isfinite(z).all():
        raise FeatureError(f"meter {series.meter_id}: non-finite values")
    return z, v


def acf(series: DiffSeries, k_max: int) -> FeatureVector:
    """Sample autocorrelations at lags 1..k_max over pairwise-complete pairs."""
    rho, _ = _acf_internal(series, k_max)
    return FeatureVector(series.meter_id, "AC", rho, k_max=k_max)


def _acf_internal(series: DiffSeries, k_max: int) -> tuple[np.ndarray, float]:
    """Autocorrelations plus the lag-0 sample variance (for BIC)."""
    if k_max < 1:
        raise FeatureError("k_max must be >= 1")
    z, v = _masked(series)
    n0 = v.sum()
    if n0 < 2:
        raise FeatureError(f"meter {series.meter_id}: too few observations")
    mean0 = z.sum() / n0
    var0 = (z * z).sum() / n0 - mean0 * mean0
    if var0 <= 0.0:
        raise FeatureError(f"meter {series.meter_id}: degenerate series (zero variance)")

    rho = np.empty(k_max, dtype=np.float64)
    for j in range(1, k_max + 1):
        a_z, a_v = z[:-j], v[:-j]
        b_z, b_v = z[j:], v[j:]
        n = a_v @ b_v
        if n < 2:
            raise FeatureError(
                f"meter {series.meter_id}: too few complete pairs at lag {j}"
            )
        sx = a_z @ b_v
        sy = a_v @ b_z
        sxy = a_z @ b_z
        sxx = (a_z * a_z) @ b_v
        syy = a_v @ (b_z * b_z)
        mx, my = sx / n, sy / n
        cov = sxy / n - mx * my
        vx = sxx / n - mx * mx
        vy = syy / n - my * my
        if vx <= 0.0 or vy <= 0.0:
            raise FeatureError(
                f"meter {series.meter_id}: degenerate series at lag {j}"
            )
        rho[j - 1] = cov / np.sqrt(vx * vy)
    np.clip(rho, -1.0, 1.0, out=rho)
    return rho, float(var0)


def pacf_from_acf(rho) -> np.ndarray:
    """Partial autocorrelations from an autocorrelation sequence.

    Runs the Durbin-Levinson recursion on ``rho[0..K-1]`` = autocorrelations
    at lags 1..K (the implicit lag-0 value is 1) and returns the reflection
    coefficients, i.e. the partial autocorrelations at lags 1..K.
    """
    rho = np.asarray(rho, dtype=np.float64)
    k_max = rho.size
    pac, _ = _durbin_levinson(rho, k_max)
    return pac


def _durbin_levinson(rho: np.ndarray, order: int) -> tuple[np.ndarray, np.ndarray]:
    """Levinson recursion on autocorrelations at lags 1..order.

    Returns (partial autocorrelations pi[1..order], innovation variance
    ratios v[0..order] relative to the series variance).
    """
    pac = np.zeros(order, dtype=np.float64)
    vratio = np.ones(order + 1, dtype=np.float64)
    if order == 0:
        return pac, vratio
    phi = np.zeros(order, dtype=np.float64)
    pac[0] = phi[0] = rho[0]
    vratio[1] = 1.0 - rho[0] ** 2
    for k in range(2, order + 1):
        prev = phi[: k - 1]
        denom = 1.0 - prev @ rho[: k - 1]
        if abs(denom) < 1e-12:
            raise FeatureError(f"near-singular recursion at order {k}")
        num = rho[k - 1] - prev @ rho[k - 2 :: -1]
        refl = num / denom
        phi[: k - 1] = prev - refl * prev[::-1]
        phi[k - 1] = refl
        pac[k - 1] = refl
        vratio[k] = vratio[k - 1] * (1.0 - refl ** 2)
    return pac, vratio


def pacf(series: DiffSeries, k_max: int) -> FeatureVector:
    """Partial autocorrelations at lags 1..k_max via Durbin-Levinson."""
    rho, _ = _acf_internal(series, k_max)
    pac = pacf_from_acf(rho)
    np.clip(pac, -1.0, 1.0, out=pac)
    return FeatureVector(series.meter_id, "PAC", pac, k_max=k_max)


def autocorrelation_features(series: DiffSeries, k_max: int) -> tuple[FeatureVector, FeatureVector]:
    """(acf, pacf) computed from a single pass over the series."""
    rho, _ = _acf_internal(series, k_max)
    pac = pacf_from_acf(rho)
    np.clip(pac, -1.0, 1.0, out=pac)
    return (
        FeatureVector(series.meter_id, "AC", rho, k_max=k_max),
        FeatureVector(series.meter_id, "PAC", pac, k_max=k_max),
    )


def quantile_autocov(series: DiffSeries, j: int, tau: float, tau2: float) -> float:
    """Quantile autocovariance at lag ``j`` and levels ``(tau, tau2)``."""
    if j < 1:
        raise FeatureError("lag must be >= 1")
    if not (0.0 < tau < 1.0 and 0.0 < tau2 < 1.0):
        raise FeatureError("quantile levels must lie in (0, 1)")
    z, v = _masked(series)
    obs = series.values[~series.missing]
    if obs.size == 0:
        raise FeatureError(f"meter {series.meter_id}: no observations")
    sorted_obs = np.sort(obs)
    q1 = _quantile_sorted(sorted_obs, tau)
    q2 = _quantile_sorted(sorted_obs, tau2)
    ind1 = np.where(z <= q1, v, 0.0)
    ind2 = np.where(z <= q2, v, 0.0)
    if len(z) <= j:
        raise FeatureError(f"meter {series.meter_id}: no complete pairs at lag {j}")
    n = v[:-j] @ v[j:]
    if n < 1:
        raise FeatureError(f"meter {series.meter_id}: no complete pairs at lag {j}")
    return float(ind1[:-j] @ ind2[j:] / n - tau * tau2)


def qac_feature_vector(
    series: DiffSeries,
    lags=DEFAULT_QC_LAGS,
    quantiles=DEFAULT_QC_QUANTILES,
) -> FeatureVector:
    """All quantile autocovariances over the (lag, tau, tau') grid.

    Entries are ordered lexicographically by (lag, tau, tau') over the full
    Cartesian product of the quantile list with itself; the defaults give
    the 9-entry vector for lag 1 and levels 0.1/0.5/0.9.
    """
    lags = tuple(int(j) for j in lags)
    quantiles = tuple(float(q) for q in quantiles)
    if not lags or not quantiles:
        raise FeatureError("lags and quantiles must be non-empty")
    z, v = _masked(series)
    obs = series.values[~series.missing]
    if obs.size == 0:
        raise FeatureError(f"meter {series.meter_id}: no observations")
    sorted_obs = np.sort(obs)
    qs = {tau: _quantile_sorted(sorted_obs, tau) for tau in quantiles}
    indicators = {tau: np.where(z <= qs[tau], v, 0.0) for tau in quantiles}

    grid = []
    out = []
    for j in sorted(lags):
        if len(z) <= j:
            raise FeatureError(
                f"meter {series.meter_id}: no complete pairs at lag {j}"
            )
        n = v[:-j] @ v[j:]
        if n < 1:
            raise FeatureError(
                f"meter {series.meter_id}: no complete pairs at lag {j}"
            )
        for tau in quantiles:
            for tau2 in quantiles:
                s = indicators[tau][:-j] @ indicators[tau2][j:]
                out.append(s / n - tau * tau2)
                grid.append((tau, tau2))
    return FeatureVector(
        series.meter_id,
        "QC",
        np.asarray(out),
        lag_set=tuple(sorted(lags)),
        quantile_grid=tuple(grid),
    )


def select_max_lag_bic(series_set, p_max: int) -> int:
    """Largest BIC-selected AR order across a set of series.

    Each series is fitted with AR(p) for p = 0..p_max via Yule-Walker on
    its sample autocorrelations; BIC(p) = n*ln(innovation variance) +
    p*ln(n) with n the number of observed values, ties resolved toward the
    smaller order.  Degenerate series are skipped with a warning.
    """
    if p_max < 1:
        raise FeatureError("p_max must be >= 1")
    best_orders = []
    for series in series_set:
        try:
            rho, var0 = _acf_internal(series, p_max)
            _, vratio = _durbin_levinson(rho, p_max)
        except FeatureError as exc:
            log.warning("order selection skipped for %s: %s", series.meter_id, exc)
            continue
        n = int((~series.missing).sum())
        # innovation variance at order p is var0 * prod(1 - pac_k^2, k<=p)
        sigma2 = var0 * vratio
        with np.errstate(divide="ignore"):
            bic = n * np.log(sigma2) + np.arange(p_max + 1) * np.log(n)
        best_orders.append(int(np.argmin(bic)))
    if not best_orders:
        raise FeatureError("order selection failed for every series")
    return max(best_orders)


def feature_names(kind: str, k_max: int = DEFAULT_K_MAX,
                  lags=DEFAULT_QC_LAGS, quantiles=DEFAULT_QC_QUANTILES) -> list[str]:
    """Column names for a feature matrix of the given kind."""
    if kind == "AC":
        return [f"ac_{j}" for j in range(1, k_max + 1)]
    if kind == "PAC":
        return [f"pac_{j}" for j in range(1, k_max + 1)]
    if kind == "QC":
        return [
            f"qc_lag{j}_q{tau:g}_q{tau2:g}"
            for j in sorted(lags)
            for tau in quantiles
            for tau2 in quantiles
        ]
    raise FeatureError(f"unknown feature kind {kind!r}")


def write_feature_csv(features, path, config_hash: str | None = None) -> None:
    """Write a feature matrix as CSV ``meter_id,kind,f1..fM``."""
    features = list(features)
    if not features:
        raise FeatureError("no feature vectors to write")
    width = len(features[0])
    with open(path, "w", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        writer = csv.writer(fh)
        writer.writerow(["meter_id", "kind"] + [f"f{i}" for i in range(1, width + 1)])
        for fv in features:
            if len(fv) != width:
                raise FeatureError(
                    f"inconsistent feature width for {fv.meter_id}: "
                    f"{len(fv)} != {width}"
                )
            writer.writerow([fv.meter_id, fv.kind] + [repr(float(x)) for x in fv.values])


def read_feature_csv(path) -> tuple[list[FeatureVector], str | None]:
    """Read a feature matrix CSV; returns (vectors, config_hash or None)."""
    config_hash = None
    features = []
    with open(path, "r", newline="") as fh:
        first = fh.readline()
        if first.startswith("# config_hash="):
            config_hash = first.strip().split("=", 1)[1]
        else:
            fh.seek(0)
        reader = csv.reader(fh)
        header = next(reader)
        width = len(header) - 2
        for row in reader:
            if not row:
                continue
            values = np.array([float(x) for x in row[2:]], dtype=np.float64)
            if values.size != width:
                raise FeatureError(f"bad row width in {path}")
            kind = row[1]
            kw = {}
            if kind in ("AC", "PAC"):
                kw["k_max"] = width
            features.append(FeatureVector(row[0], kind, values, **kw))
    if not features:
        raise FeatureError(f"no feature rows in {path}")
    return features, config_hash


def write_feature_bin(features, path, config_hash: str | None = None) -> None:
    """Binary sidecar: row-major little-endian f64 plus a JSON header file."""
    features = list(features)
    matrix = np.vstack([fv.values for fv in features]).astype("<f8")
    matrix.tofile(path)
    meta = {
        "rows": int(matrix.shape[0]),
        "cols": int(matrix.shape[1]),
        "dtype": "<f8",
        "order": "row-major",
        "kind": features[0].kind,
        "meter_ids": [fv.meter_id for fv in features],
    }
    if config_hash:
        meta["config_hash"] = config_hash
    with open(str(path) + ".json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
