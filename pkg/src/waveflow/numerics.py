"""Shared numerical helpers: Gauss-Legendre quadrature, KS statistics,
permutation parity."""

import numpy as np

# Asymptotic Kolmogorov-Smirnov critical constants c(alpha), D_crit = c/sqrt(n).
_KS_CONSTANTS = {0.10: 1.22385, 0.05: 1.35810, 0.01: 1.62762}


def gauss_legendre(n: int, a: float, b: float):
    """Gauss-Legendre nodes and weights on [a, b]."""
    x, w = np.polynomial.legendre.leggauss(n)
    mid, half = 0.5 * (a + b), 0.5 * (b - a)
    return mid + half * x, half * w


def composite_gauss_legendre(breakpoints, nodes_per_span: int):
    """Gauss-Legendre rule applied on each span of a breakpoint sequence.

    Returns concatenated (nodes, weights); exact for polynomials of degree
    <= 2*nodes_per_span - 1 on each span.
    """
    breakpoints = np.asarray(breakpoints, dtype=float)
    xs, ws = [], []
    for lo, hi in zip(breakpoints[:-1], breakpoints[1:]):
        if hi <= lo:
            continue
        x, w = gauss_legendre(nodes_per_span, lo, hi)
        xs.append(x)
        ws.append(w)
    return np.concatenate(xs), np.concatenate(ws)


def ks_statistic(samples, cdf) -> float:
    """Two-sided Kolmogorov-Smirnov distance between samples and a CDF callable."""
    x = np.sort(np.asarray(samples, dtype=float))
    n = x.size
    f = np.asarray(cdf(x), dtype=float)
    upper = np.max(np.arange(1, n + 1) / n - f)
    lower = np.max(f - np.arange(0, n) / n)
    return float(max(upper, lower))


def ks_critical(n: int, alpha: float = 0.01) -> float:
    """Asymptotic KS critical value at significance alpha (n large)."""
    try:
        c = _KS_CONSTANTS[alpha]
    except KeyError:
        raise ValueError(f"no tabulated KS constant for alpha={alpha}")
    return c / np.sqrt(n)


def inversion_count(seq) -> int:
    """Number of pairwise inversions of a sequence (O(n^2); n is tiny here)."""
    a = np.asarray(seq)
    n = a.shape[-1]
    i, j = np.triu_indices(n, k=1)
    return int(np.sum(a[..., i] > a[..., j]))


def inversion_count_rows(arr) -> np.ndarray:
    """Row-wise inversion counts of a (batch, n) array."""
    a = np.asarray(arr)
    i, j = np.triu_indices(a.shape[1], k=1)
    return np.sum(a[:, i] > a[:, j], axis=1)
