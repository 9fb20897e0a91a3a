"""Distribution comparison of metric samples: 1-D EMD, two-sample KS and
descriptive statistics."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Significance",
    "ComparisonResult",
    "DescriptiveStats",
    "emd_1d",
    "ks_two_sample",
    "kolmogorov_q",
    "classify_significance",
    "in_unmapped_gap",
    "compare",
    "describe",
]


def _values(a) -> np.ndarray:
    v = np.asarray(getattr(a, "values", a), dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("sample set is empty")
    if not np.all(np.isfinite(v)):
        raise ValueError("sample set contains non-finite values")
    return v


def _ecdfs(a: np.ndarray, b: np.ndarray, points: np.ndarray, side: str = "right"):
    fa = np.searchsorted(np.sort(a), points, side=side) / a.size
    fb = np.searchsorted(np.sort(b), points, side=side) / b.size
    return fa, fb


def emd_1d(a, b) -> float:
    """Wasserstein-1 distance: integral of |F_a - F_b| over the merged support."""
    a, b = _values(a), _values(b)
    if a.size == b.size:
        # equal sizes: the optimal plan matches order statistics one to one
        return float(np.mean(np.abs(np.sort(a) - np.sort(b))))
    support = np.unique(np.concatenate([a, b]))
    if support.size < 2:
        return 0.0
    fa, fb = _ecdfs(a, b, support[:-1])
    return float(np.sum(np.abs(fa - fb) * np.diff(support)))


def kolmogorov_q(lam: float, tol: float = 1e-10) -> float:
    """Q(lam) = 2 * sum_{k>=1} (-1)^(k-1) exp(-2 k^2 lam^2), clamped to (0, 1]."""
    if lam <= 0:
        return 1.0
    total, k = 0.0, 1
    while True:
        term = math.exp(-2.0 * k * k * lam * lam)
        if term < tol:
            break
        total += term if k % 2 else -term
        k += 1
        if k > 100_000:
            break
    p = 2.0 * total
    return min(1.0, max(p, np.finfo(float).tiny))


def ks_two_sample(a, b) -> tuple[float, float]:
    """Two-sample KS statistic and its asymptotic p-value.

    lam = (sqrt(ne) + 0.12 + 0.11 / sqrt(ne)) * d with ne = n*m/(n+m).
    """
    a, b = _values(a), _values(b)
    points = np.concatenate([a, b])
    d = 0.0
    for side in ("right", "left"):  # at each point and just below it
        fa, fb = _ecdfs(a, b, points, side)
        d = max(d, float(np.max(np.abs(fa - fb))))
    if d == 0.0:
        return 0.0, 1.0
    ne = a.size * b.size / (a.size + b.size)
    root = math.sqrt(ne)
    return d, float(kolmogorov_q((root + 0.12 + 0.11 / root) * d))


class Significance(enum.Enum):
    STAR = "star"
    DOUBLE_STAR = "double_star"
    NONE = "none"

    @property
    def symbol(self) -> str:
        return {"star": "*", "double_star": "**", "none": "ns"}[self.value]


def classify_significance(p: float) -> Significance:
    """Star classes as captioned: * for p < 0.001, ** for 0.005 < p < 0.05."""
    if p < 0.001:
        return Significance.STAR
    if 0.005 < p < 0.05:
        return Significance.DOUBLE_STAR
    return Significance.NONE


def in_unmapped_gap(p: float) -> bool:
    """True for 0.001 <= p <= 0.005, which neither star class covers."""
    return bool(0.001 <= p <= 0.005)


@dataclass(frozen=True)
class ComparisonResult:
    emd: float
    ks_d: float
    p_value: float
    significance: Significance
    gap: bool = False

    def to_dict(self) -> dict:
        return {"emd": self.emd, "ks_d": self.ks_d, "p_value": self.p_value,
                "significance": self.significance.value, "unmapped_gap": self.gap}


def compare(reference, sample) -> ComparisonResult:
    d, p = ks_two_sample(reference, sample)
    return ComparisonResult(emd_1d(reference, sample), d, p, classify_significance(p), in_unmapped_gap(p))


@dataclass(frozen=True)
class DescriptiveStats:
    count: int
    mean: float
    std: float
    min: float
    q1: float
    median: float
    q3: float
    max: float
    iqr: float
    mean_difference: float | None = None

    def to_dict(self) -> dict:
        return {"count": self.count, "mean": self.mean, "mean_difference": self.mean_difference,
                "std": self.std, "min": self.min, "q1": self.q1, "median": self.median,
                "q3": self.q3, "max": self.max, "iqr": self.iqr}

    @classmethod
    def from_dict(cls, d: dict) -> "DescriptiveStats":
        return cls(**{k: d[k] for k in ("count", "mean", "std", "min", "q1", "median", "q3", "max", "iqr")},
                   mean_difference=d.get("mean_difference"))


def describe(a, reference_mean: float | None = None) -> DescriptiveStats:
    """Table-style summary; quartiles by linear interpolation, std with n-1."""
    v = _values(a)
    q1, median, q3 = np.percentile(v, [25, 50, 75])
    mean = float(np.mean(v))
    std = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
    diff = None if reference_mean is None else mean - reference_mean
    return DescriptiveStats(int(v.size), mean, std, float(v.min()), float(q1), float(median),
                            float(q3), float(v.max()), float(q3 - q1), diff)
