"""Two-sided Mann-Whitney U test and Bonferroni correction for group comparisons."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

EXACT_MAX_N = 12


@dataclass(frozen=True)
class GroupSample:
    group_label: str
    values: tuple[float, ...]

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if not vals:
            raise ValueError(f"group {self.group_label!r} is empty")
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"group {self.group_label!r} has non-finite values")
        object.__setattr__(self, "values", vals)


@dataclass(frozen=True)
class TestResult:
    u_statistic: float
    p_value: float
    p_adjusted: float
    significant: bool
    threshold: float
    m: int

    __test__ = False  # not a pytest class


@lru_cache(maxsize=None)
def _u_counts(n1: int, n2: int) -> tuple[int, ...]:
    """Number of rank arrangements giving each U in 0..n1*n2 (no ties)."""
    if n1 == 0 or n2 == 0:
        return (1,)
    # U counts pairs (x in sample 1, y in sample 2) with x > y; recurse on the largest value
    a = _u_counts(n1 - 1, n2)  # largest belongs to sample 1: adds n2
    b = _u_counts(n1, n2 - 1)  # largest belongs to sample 2: adds 0
    out = [0] * (n1 * n2 + 1)
    for u, c in enumerate(a):
        out[u + n2] += c
    for u, c in enumerate(b):
        out[u] += c
    return tuple(out)


def exact_p(u: float, n1: int, n2: int) -> float:
    """Two-sided exact p for U = min(U1, U2) without ties."""
    counts = _u_counts(n1, n2)
    total = sum(counts)
    k = int(math.floor(u + 1e-9))
    tail = sum(counts[: k + 1])
    return min(1.0, 2.0 * tail / total)


def mann_whitney_u(a: GroupSample, b: GroupSample, method: str = "auto") -> tuple[float, float]:
    """Return (U, two-sided p) with U = min(U_a, U_b).

    ``auto`` enumerates the exact null distribution when the pooled sample
    has at most 12 values and no ties; otherwise it uses the normal
    approximation with tie-corrected variance and continuity correction.
    """
    if not isinstance(a, GroupSample):
        a = GroupSample("a", tuple(a))
    if not isinstance(b, GroupSample):
        b = GroupSample("b", tuple(b))
    x = np.asarray(a.values)
    y = np.asarray(b.values)
    n1, n2 = len(x), len(y)
    pooled = np.concatenate([x, y])
    ranks = rankdata(pooled)
    u1 = float(ranks[:n1].sum() - n1 * (n1 + 1) / 2)
    u2 = n1 * n2 - u1
    u = min(u1, u2)
    has_ties = len(np.unique(pooled)) < len(pooled)

    if method not in ("auto", "exact", "asymptotic"):
        raise ValueError(f"unknown method {method!r}")
    use_exact = method == "exact" or (method == "auto" and n1 + n2 <= EXACT_MAX_N and not has_ties)
    if use_exact:
        if has_ties:
            raise ValueError("exact distribution requires untied data")
        return u, exact_p(u, n1, n2)

    n = n1 + n2
    _, t = np.unique(pooled, return_counts=True)
    tie_term = float((t**3 - t).sum()) / (n * (n - 1)) if n > 1 else 0.0
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term)
    if var <= 0:
        return u, 1.0
    z = (abs(u - n1 * n2 / 2.0) - 0.5) / math.sqrt(var)
    z = max(z, 0.0)
    return u, min(1.0, math.erfc(z / math.sqrt(2.0)))


def bonferroni(p_values, alpha: float = 0.05, m: int | None = None, u_values=None) -> list[TestResult]:
    """Significance at threshold alpha/m; adjusted p = min(1, p*m)."""
    p_values = [float(p) for p in p_values]
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    m = len(p_values) if m is None else int(m)
    if m < max(1, len(p_values)):
        raise ValueError(f"m={m} is smaller than the number of tests ({len(p_values)})")
    thr = alpha / m
    us = list(u_values) if u_values is not None else [math.nan] * len(p_values)
    return [TestResult(float(u), p, min(1.0, p * m), p < thr, thr, m) for u, p in zip(us, p_values)]


def format_threshold(thr: float) -> str:
    """Threshold as tables print it, e.g. 0.00625 -> '0.006'."""
    digits = max(1, -int(math.floor(math.log10(thr))))
    return f"{math.floor(thr * 10**digits) / 10**digits:.{digits}f}"


# ---------------------------------------------------------------------------
# Table-style group comparison from CSV
# ---------------------------------------------------------------------------


@dataclass
class RoiComparison:
    roi: str
    method: str
    u: float
    p_raw: float
    p_adjusted: float
    significant: bool


def read_group_csv(path) -> list[dict]:
    """Rows of ``subject_id,group,roi,normalized_volume[,method]``."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    need = {"subject_id", "group", "roi", "normalized_volume"}
    if rows and not need <= set(rows[0]):
        raise ValueError(f"group CSV needs columns {sorted(need)}")
    return rows


def group_stats(rows: list[dict], groups: tuple[str, str], alpha: float = 0.05, m: int | None = None,
                default_method: str = "") -> list[RoiComparison]:
    """One Mann-Whitney test per (method, roi) between the two groups, Bonferroni-corrected."""
    g1, g2 = groups
    cells: dict[tuple[str, str], dict[str, list[float]]] = {}
    for r in rows:
        key = (r.get("method") or default_method, r["roi"])
        cells.setdefault(key, {}).setdefault(r["group"], []).append(float(r["normalized_volume"]))
    keys = sorted(cells)
    tests = []
    for method, roi in keys:
        vals = cells[(method, roi)]
        if g1 not in vals or g2 not in vals:
            raise ValueError(f"{method}/{roi}: both groups {g1!r} and {g2!r} need values")
        tests.append(mann_whitney_u(GroupSample(g1, vals[g1]), GroupSample(g2, vals[g2])))
    results = bonferroni([p for _, p in tests], alpha, m, [u for u, _ in tests])
    return [RoiComparison(roi, method, res.u_statistic, res.p_value, res.p_adjusted, res.significant)
            for (method, roi), res in zip(keys, results)]


def write_group_csv(results: list[RoiComparison], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["roi", "method", "p_raw", "p_adjusted", "significant"])
        for r in results:
            w.writerow([r.roi, r.method, repr(r.p_raw), repr(r.p_adjusted), int(r.significant)])
