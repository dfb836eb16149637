"""Agreement and group-comparison statistics.

Correlation, Bland-Altman limits, one-way ANOVA with Welch/Holm post-hoc
tests and Tukey-fence boxplot summaries. Test statistics are computed from
their definitions; tail probabilities go through the regularized
incomplete beta function.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from scipy import special

LIMIT_FACTOR = 1.96                     # Bland-Altman limits: bias +- 1.96 SD
Z_CRIT_95 = float(special.ndtri(0.975))  # Fisher-z confidence interval


class DegenerateVarianceError(ValueError):
    """Raised when a variance needed in a denominator is zero."""


@dataclasses.dataclass
class BoxplotStats:
    q1: float
    median: float
    q3: float
    iqr: float
    low_fence: float
    high_fence: float
    outliers: list[float]


def _t_sf_two_sided(t: float, df: float) -> float:
    if df <= 0:
        raise ValueError(f"degrees of freedom must be positive, got {df}")
    if not np.isfinite(t):
        return 0.0
    x = df / (df + t * t)
    return float(special.betainc(df / 2.0, 0.5, x))


def _f_sf(f: float, d1: float, d2: float) -> float:
    if not np.isfinite(f):
        return 0.0
    x = d2 / (d2 + d1 * f)
    return float(special.betainc(d2 / 2.0, d1 / 2.0, x))


def pearson(xs, ys) -> tuple[float, float, tuple[float, float]]:
    """Sample correlation with a two-sided p (t distribution, n-2 df) and a
    Fisher-z 95% confidence interval."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("inputs must be 1D sequences of equal length")
    n = x.size
    if n < 3:
        raise ValueError(f"need at least 3 pairs, got {n}")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = np.sqrt((dx * dx).sum())
    sy = np.sqrt((dy * dy).sum())
    if sx == 0.0 or sy == 0.0:
        raise DegenerateVarianceError("zero variance in one of the inputs")
    r = float((dx * dy).sum() / (sx * sy))
    r = max(-1.0, min(1.0, r))
    if abs(r) == 1.0:
        p = 0.0
    else:
        t = r * np.sqrt((n - 2) / (1.0 - r * r))
        p = _t_sf_two_sided(float(t), n - 2)
    if n == 3 or abs(r) == 1.0:
        ci = (-1.0, 1.0) if abs(r) < 1.0 else (r, r)
    else:
        z = np.arctanh(r)
        half = Z_CRIT_95 / np.sqrt(n - 3)
        ci = (float(np.tanh(z - half)), float(np.tanh(z + half)))
    return r, p, ci


def bland_altman(gt_values, pred_values) -> tuple[float, float, float]:
    """(bias, lower limit, upper limit) of the differences pred - gt."""
    gt = np.asarray(gt_values, dtype=np.float64)
    pred = np.asarray(pred_values, dtype=np.float64)
    if gt.shape != pred.shape or gt.ndim != 1:
        raise ValueError("inputs must be 1D sequences of equal length")
    if gt.size < 2:
        raise ValueError(f"need at least 2 pairs, got {gt.size}")
    d = pred - gt
    bias = float(d.mean())
    sd = float(d.std(ddof=1))
    return bias, bias - LIMIT_FACTOR * sd, bias + LIMIT_FACTOR * sd


def one_way_anova(groups) -> tuple[float, tuple[int, int], float]:
    """Classical F test over >= 2 groups: (F, (df_between, df_within), p)."""
    arrays = [np.asarray(g, dtype=np.float64) for g in groups]
    if len(arrays) < 2:
        raise ValueError(f"need at least 2 groups, got {len(arrays)}")
    for g in arrays:
        if g.ndim != 1 or g.size < 2:
            raise ValueError("every group needs at least 2 values")
    n_total = sum(g.size for g in arrays)
    grand = sum(g.sum() for g in arrays) / n_total
    ss_between = sum(g.size * (g.mean() - grand) ** 2 for g in arrays)
    ss_within = sum(((g - g.mean()) ** 2).sum() for g in arrays)
    df_between = len(arrays) - 1
    df_within = n_total - len(arrays)
    if ss_within == 0.0:
        raise DegenerateVarianceError("zero within-group variance, F undefined")
    f = float((ss_between / df_between) / (ss_within / df_within))
    return f, (df_between, df_within), _f_sf(f, df_between, df_within)


def _welch_p(a: np.ndarray, b: np.ndarray) -> float:
    v1, v2 = a.var(ddof=1), b.var(ddof=1)
    se2 = v1 / a.size + v2 / b.size
    if se2 == 0.0:
        return 1.0 if a.mean() == b.mean() else 0.0
    t = (a.mean() - b.mean()) / np.sqrt(se2)
    df = se2 ** 2 / ((v1 / a.size) ** 2 / (a.size - 1) + (v2 / b.size) ** 2 / (b.size - 1))
    return _t_sf_two_sided(float(t), float(df))


def holm_adjust(p_values) -> np.ndarray:
    """Step-down Holm adjustment; monotone and never below the raw value."""
    p = np.asarray(p_values, dtype=np.float64)
    m = p.size
    order = np.argsort(p, kind="stable")
    adj = np.empty(m)
    running = 0.0
    for rank, idx in enumerate(order):
        running = max(running, min(1.0, (m - rank) * p[idx]))
        adj[idx] = running
    return adj


def posthoc_pairwise(groups) -> np.ndarray:
    """Holm-adjusted Welch t-test p-values for every pair of groups.

    Returns a symmetric k x k matrix with NaN on the diagonal.
    """
    arrays = [np.asarray(g, dtype=np.float64) for g in groups]
    if len(arrays) < 2:
        raise ValueError(f"need at least 2 groups, got {len(arrays)}")
    for g in arrays:
        if g.ndim != 1 or g.size < 2:
            raise ValueError("every group needs at least 2 values")
    k = len(arrays)
    pairs = [(i, j) for i in range(k) for j in range(i + 1, k)]
    raw = np.array([_welch_p(arrays[i], arrays[j]) for i, j in pairs])
    adj = holm_adjust(raw)
    out = np.full((k, k), np.nan)
    for (i, j), p in zip(pairs, adj):
        out[i, j] = out[j, i] = p
    return out


def boxplot_stats(values) -> BoxplotStats:
    """Quartiles by linear interpolation plus Tukey-fence outliers."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 1:
        raise ValueError("need a non-empty 1D sequence")
    q1, med, q3 = (float(q) for q in np.percentile(arr, [25, 50, 75]))
    iqr = q3 - q1
    low, high = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    outliers = [float(v) for v in arr[(arr < low) | (arr > high)]]
    return BoxplotStats(q1, med, q3, iqr, low, high, outliers)
