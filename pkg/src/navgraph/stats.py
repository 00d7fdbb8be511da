"""Two-sample tests and summary statistics used by the hubness analysis.

Both tests are one-sided with the alternative that ``a`` tends to be larger
than ``b``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy import special
from scipy import stats as sps

EXACT_MAX_TOTAL = 12


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    effect_size: float
    n_a: int
    n_b: int
    df: float | None = None
    method: str = ""

    __test__ = False  # not a pytest class

    def as_dict(self) -> dict:
        return {
            "statistic": self.statistic,
            "p_value": self.p_value,
            "effect_size": self.effect_size,
            "n_a": self.n_a,
            "n_b": self.n_b,
            "df": self.df,
            "method": self.method,
        }


def _sample(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64).ravel()
    if a.size == 0:
        raise ValueError(f"sample {name} is empty")
    return a


def skewness(samples) -> float:
    """Population skewness ``m3 / m2**1.5``."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < 2:
        raise ValueError("skewness needs at least two values")
    dev = x - x.mean()
    m2 = np.mean(dev ** 2)
    if m2 == 0.0:
        raise ValueError("skewness is undefined for zero variance")
    m3 = np.mean(dev ** 3)
    return float(m3 / m2 ** 1.5)


def effect_size(a, b) -> float:
    """Cohen's d with the pooled (n-1 weighted) standard deviation."""
    a = _sample(a, "a")
    b = _sample(b, "b")
    if a.size + b.size < 3:
        raise ValueError("effect size needs at least three observations in total")
    pooled = ((a.size - 1) * np.var(a, ddof=1 if a.size > 1 else 0)
              + (b.size - 1) * np.var(b, ddof=1 if b.size > 1 else 0)) / (a.size + b.size - 2)
    if pooled <= 0.0:
        raise ValueError("pooled standard deviation is zero")
    return float((a.mean() - b.mean()) / math.sqrt(pooled))


def _effect_or_nan(a, b) -> float:
    try:
        return effect_size(a, b)
    except ValueError:
        return float("nan")


def _u_statistic(a: np.ndarray, b: np.ndarray):
    ranks = sps.rankdata(np.concatenate([a, b]))  # midranks for ties
    r_a = ranks[:a.size].sum()
    u = r_a - a.size * (a.size + 1) / 2.0
    return float(u), ranks


def mann_whitney_exact_p(a, b) -> float:
    """One-sided p by enumerating every split of the pooled sample."""
    a = _sample(a, "a")
    b = _sample(b, "b")
    u_obs, ranks = _u_statistic(a, b)
    n, m = a.size, a.size + b.size
    base = n * (n + 1) / 2.0
    hits = total = 0
    for idx in itertools.combinations(range(m), n):
        u = ranks[list(idx)].sum() - base
        total += 1
        if u >= u_obs - 1e-9:
            hits += 1
    return hits / total


def mann_whitney_normal_p(a, b) -> float:
    """One-sided p by the normal approximation with tie and continuity corrections."""
    a = _sample(a, "a")
    b = _sample(b, "b")
    u, ranks = _u_statistic(a, b)
    n1, n2 = a.size, b.size
    nn = n1 + n2
    _, counts = np.unique(ranks, return_counts=True)
    tie = float(np.sum(counts ** 3 - counts))
    var = n1 * n2 / 12.0 * ((nn + 1) - tie / (nn * (nn - 1))) if nn > 1 else 0.0
    if var <= 0.0:
        return 1.0 if u <= n1 * n2 / 2.0 else 0.0
    z = (u - n1 * n2 / 2.0 - 0.5) / math.sqrt(var)
    return float(min(1.0, max(0.0, special.ndtr(-z))))


def mann_whitney_u(a, b, method: str = "auto") -> TestResult:
    """Mann-Whitney U test of ``a`` stochastically greater than ``b``.

    ``method`` is ``"exact"`` (full enumeration), ``"normal"`` or ``"auto"``,
    which enumerates when the pooled size is at most :data:`EXACT_MAX_TOTAL`.
    """
    a = _sample(a, "a")
    b = _sample(b, "b")
    if method == "auto":
        method = "exact" if a.size + b.size <= EXACT_MAX_TOTAL else "normal"
    if method == "exact":
        p = mann_whitney_exact_p(a, b)
    elif method == "normal":
        p = mann_whitney_normal_p(a, b)
    else:
        raise ValueError(f"unknown method {method!r}")
    u, _ = _u_statistic(a, b)
    return TestResult(u, p, _effect_or_nan(a, b), a.size, b.size, method=f"mann-whitney-{method}")


def welch(a, b) -> tuple[float, float]:
    """Welch's t statistic and Welch-Satterthwaite degrees of freedom."""
    a = _sample(a, "a")
    b = _sample(b, "b")
    if a.size < 2 or b.size < 2:
        raise ValueError("Welch's t-test needs at least two values per sample")
    va = np.var(a, ddof=1) / a.size
    vb = np.var(b, ddof=1) / b.size
    se2 = va + vb
    if se2 == 0.0:
        raise ValueError("both samples have zero variance")
    t = (a.mean() - b.mean()) / math.sqrt(se2)
    df = se2 ** 2 / (va ** 2 / (a.size - 1) + vb ** 2 / (b.size - 1))
    return float(t), float(df)


def two_sample_t(a, b) -> TestResult:
    """Welch's unequal-variance t-test, one-sided (mean of ``a`` larger)."""
    t, df = welch(a, b)
    p = float(sps.t.sf(t, df))
    return TestResult(t, p, _effect_or_nan(a, b), np.size(a), np.size(b), df=df,
                      method="welch-t")
