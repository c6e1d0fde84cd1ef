"""One-way ANOVA over sweep records: between/within-group mean squares, the
F-statistic, and an F-distribution p-value via the regularized incomplete
beta function (Lentz continued fraction)."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError, GroupingError

FACTORS = ("input_pos", "output_class", "activation", "scale")


@dataclass(frozen=True)
class AnovaResult:
    k: int
    n: int
    ssb: float
    sse: float
    f: float
    p: float
    degenerate: bool = False  # SSE == 0; F reported as +inf

    @property
    def df_between(self) -> int:
        return self.k - 1

    @property
    def df_within(self) -> int:
        return self.n - self.k

    @property
    def msb(self) -> float:
        return self.ssb / self.df_between

    @property
    def mse(self) -> float:
        return self.sse / self.df_within


def one_way_anova(groups: dict) -> AnovaResult:
    """groups: map of factor level -> observations.

    SSB = sum_g n_g (mean_g - grand)^2, SSE = sum_g sum_i (y - mean_g)^2,
    F = (SSB / (k-1)) / (SSE / (N-k)).
    """
    if len(groups) < 2:
        raise GroupingError(f"need at least 2 groups, got {len(groups)}")
    arrays = {lvl: np.asarray(vals, dtype=np.float64) for lvl, vals in groups.items()}
    if any(a.size == 0 for a in arrays.values()):
        raise GroupingError("every group must be nonempty")
    k = len(arrays)
    n = sum(a.size for a in arrays.values())
    if n <= k:
        raise GroupingError(f"need more observations ({n}) than groups ({k})")
    grand = sum(a.sum() for a in arrays.values()) / n
    ssb = sum(a.size * (a.mean() - grand) ** 2 for a in arrays.values())
    sse = sum(((a - a.mean()) ** 2).sum() for a in arrays.values())
    if sse == 0.0:
        return AnovaResult(k, n, float(ssb), 0.0, math.inf, 0.0, degenerate=True)
    f = (ssb / (k - 1)) / (sse / (n - k))
    return AnovaResult(k, n, float(ssb), float(sse), float(f), f_p_value(f, k - 1, n - k))


def _betacf(a: float, b: float, x: float, tol: float = 1e-12, max_iter: int = 500) -> float:
    """Continued fraction for the incomplete beta, modified Lentz method."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError(f"incomplete beta did not converge for a={a}, b={b}, x={x}")


def reg_inc_beta(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b), abs error ~1e-10."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log(1.0 - x)
    )
    front = math.exp(ln_front)
    # evaluate the fraction on whichever side converges fast
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def f_p_value(f: float, df1: int, df2: int) -> float:
    """Upper-tail probability of the F(df1, df2) distribution."""
    if df1 < 1 or df2 < 1:
        raise GroupingError(f"degrees of freedom must be >= 1, got {df1}, {df2}")
    if f < 0:
        raise GroupingError(f"F must be nonnegative, got {f}")
    if f == 0.0:
        return 1.0
    if math.isinf(f):
        return 0.0
    # P(F' > f) = I_{df2/(df2 + df1 f)}(df2/2, df1/2)
    x = df2 / (df2 + df1 * f)
    return min(max(reg_inc_beta(df2 / 2.0, df1 / 2.0, x), 0.0), 1.0)


# --- factor reports ----------------------------------------------------------------


def group_records(records, factor: str, metric: str) -> dict:
    groups: dict = {}
    for rec in records:
        if factor not in rec or metric not in rec:
            raise DataError(f"record missing {factor!r} or {metric!r}: {sorted(rec)}")
        groups.setdefault(rec[factor], []).append(rec[metric])
    return groups


def anova_report(records, metric: str, factors=FACTORS) -> list[dict]:
    """One row per factor, in the given order. Factors without at least two
    levels are flagged not analyzable instead of raising."""
    if not records:
        raise DataError("no records to analyze")
    rows = []
    for factor in factors:
        groups = group_records(records, factor, metric)
        try:
            rows.append({"factor": factor, "status": "ok", "result": one_way_anova(groups)})
        except GroupingError as exc:
            rows.append({"factor": factor, "status": f"not analyzable ({exc})", "result": None})
    return rows


def report_to_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["factor", "k", "N", "SSB", "SSE", "F", "p", "status"])
        for row in rows:
            r = row["result"]
            if r is None:
                writer.writerow([row["factor"], "", "", "", "", "", "", row["status"]])
            else:
                writer.writerow(
                    [row["factor"], r.k, r.n, f"{r.ssb:.10g}", f"{r.sse:.10g}",
                     "inf" if math.isinf(r.f) else f"{r.f:.10g}", f"{r.p:.10g}", row["status"]]
                )
