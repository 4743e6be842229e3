"""MCMC convergence diagnostics and sample-set comparison metrics."""

from __future__ import annotations

import math

import numpy as np


def autocorrelation(chain_values, max_lag: int) -> np.ndarray:
    """Normalized autocorrelation function at lags 0..max_lag.

    A variance-zero (constant) chain is defined to have rho_k = 0 for all
    k >= 1.
    """
    x = np.asarray(chain_values, dtype=np.float64)
    n = x.size
    if n <= max_lag:
        raise ValueError(f"chain length {n} must exceed max_lag {max_lag}")
    x = x - x.mean()
    denom = float(np.dot(x, x))
    rho = np.zeros(max_lag + 1)
    rho[0] = 1.0
    if denom == 0.0:
        return rho
    for k in range(1, max_lag + 1):
        rho[k] = float(np.dot(x[:-k], x[k:])) / denom
    return rho


def autocorrelation_ess(chain_values, max_lag: int = 1000) -> float:
    """n / (1 + 2 sum rho_k), truncating the sum at the first negative rho."""
    x = np.asarray(chain_values, dtype=np.float64)
    max_lag = min(max_lag, x.size - 1)
    rho = autocorrelation(x, max_lag)
    s = 0.0
    for k in range(1, max_lag + 1):
        if rho[k] < 0:
            break
        s += rho[k]
    return x.size / (1.0 + 2.0 * s)


def gelman_rubin(chains) -> float:
    """Potential scale reduction factor across independent chains.

    R_hat = sqrt(((n-1)/n * W + B/n) / W) with W the mean within-chain
    variance and B = n * variance of the chain means. Identical chains give
    exactly sqrt((n-1)/n) because B = 0.
    """
    arrays = [np.asarray(c, dtype=np.float64) for c in chains]
    m = len(arrays)
    if m < 2:
        raise ValueError("need at least 2 chains")
    n = arrays[0].size
    if n < 10:
        raise ValueError("chains must have length >= 10")
    if any(a.size != n for a in arrays):
        raise ValueError("chains must have equal length")
    stacked = np.stack(arrays)
    within = float(np.mean(np.var(stacked, axis=1, ddof=1)))
    means = stacked.mean(axis=1)
    between = n * float(np.var(means, ddof=1))
    if within == 0.0:
        return 1.0 if between == 0.0 else math.inf
    v_hat = (n - 1) / n * within + between / n
    return math.sqrt(v_hat / within)


def wasserstein1(values_a, weights_a, values_b, weights_b) -> float:
    """Wasserstein-1 distance between two weighted empirical distributions."""
    xa = np.asarray(values_a, dtype=np.float64)
    xb = np.asarray(values_b, dtype=np.float64)
    wa = np.asarray(weights_a, dtype=np.float64)
    wb = np.asarray(weights_b, dtype=np.float64)
    if xa.size == 0 or xb.size == 0:
        raise ValueError("empty sample set")
    wa = wa / wa.sum()
    wb = wb / wb.sum()
    grid = np.union1d(xa, xb)
    if grid.size == 1:
        return 0.0
    cdf_a = _weighted_cdf(xa, wa, grid)
    cdf_b = _weighted_cdf(xb, wb, grid)
    return float(np.sum(np.abs(cdf_a - cdf_b)[:-1] * np.diff(grid)))


def _weighted_cdf(x, w, grid):
    order = np.argsort(x, kind="stable")
    xs = x[order]
    cw = np.cumsum(w[order])
    idx = np.searchsorted(xs, grid, side="right")
    return np.concatenate([[0.0], cw])[idx]
