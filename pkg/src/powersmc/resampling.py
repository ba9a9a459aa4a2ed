"""Effective sample size and unbiased resampling schemes.

All schemes return 0-based ancestor indices and invert the cumulative weight
function in ascending particle order.
"""
from __future__ import annotations

import math

import numpy as np

from powersmc.errors import InputError

SCHEMES = ("systematic", "multinomial", "stratified", "residual")


def _check(weights) -> np.ndarray:
    return _prepare(weights)[0]


def _prepare(weights):
    """Validated weights, their minimum and cumulative sum."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise InputError("weights must be a non-empty vector")
    cdf = np.cumsum(w)
    s = float(cdf[-1])
    lo = float(w.min())
    if not math.isfinite(s) or lo < 0:
        raise InputError("weights must be finite and non-negative")
    if s == 0:
        raise InputError("all weights are zero")
    if abs(s - 1.0) > 1e-9:
        raise InputError(f"weights sum to {s}, not 1")
    return w, lo, cdf


def normalize_log_weights(log_w) -> np.ndarray:
    log_w = np.asarray(log_w, dtype=np.float64)
    m = np.max(log_w)
    if not np.isfinite(m):
        raise InputError("no particle has positive weight")
    w = np.exp(log_w - m)
    return w / w.sum()


def ess(weights) -> float:
    """1 / sum w_i^2 for normalized weights."""
    w = _check(weights)
    return float(1.0 / np.dot(w, w))


def _invert(prepared, positions: np.ndarray) -> np.ndarray:
    """min{j : cdf_j >= p} for positions in [0, 1); never returns a zero-weight index."""
    w, lo, cdf = prepared
    if lo > 0:
        cdf[-1] = 1.0
        return np.searchsorted(cdf, positions, side="left")
    support = np.flatnonzero(w > 0)
    cdf = np.cumsum(w[support])
    cdf[-1] = 1.0
    return support[np.searchsorted(cdf, positions, side="left")]


def resample_systematic(weights, u0) -> np.ndarray:
    """A_i = min{j : W_1 + ... + W_j >= (u0 + i) / N}, i = 0..N-1.

    ``u0`` may be an array of offsets, one per independent resampling event;
    the result then has one row of ancestors per offset.
    """
    prep = _prepare(weights)
    u0 = np.asarray(u0, dtype=np.float64)
    if np.any(u0 < 0.0) or np.any(u0 >= 1.0):
        raise InputError("u0 must lie in [0, 1)")
    n = prep[0].size
    return _invert(prep, (u0[..., None] + np.arange(n)) / n)


def _shape(n: int, size: int | None) -> tuple:
    return (n,) if size is None else (size, n)


def resample_stratified(weights, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    prep = _prepare(weights)
    n = prep[0].size
    return _invert(prep, (np.arange(n) + rng.random(_shape(n, size))) / n)


def resample_multinomial(weights, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    prep = _prepare(weights)
    n = prep[0].size
    return _invert(prep, np.sort(rng.random(_shape(n, size)), axis=-1))


def resample_residual(weights, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """floor(N w_i) deterministic copies, the remainder drawn multinomially."""
    w = _check(weights)
    n = w.size
    scaled = n * w
    copies = np.floor(scaled).astype(np.int64)
    fixed = np.repeat(np.arange(n), copies)
    rest = n - fixed.size
    if size is not None:
        fixed = np.broadcast_to(fixed, (size, fixed.size))
    if not rest:
        return fixed.copy()
    resid = scaled - copies
    resid /= resid.sum()
    drawn = _invert(_prepare(resid), np.sort(rng.random(_shape(rest, size)), axis=-1))
    return np.concatenate([fixed, drawn], axis=-1)


def resample(weights, scheme: str, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Ancestors for one resampling event, or ``size`` independent events (one per row)."""
    if scheme == "systematic":
        return resample_systematic(weights, rng.random() if size is None else rng.random(size))
    if scheme == "multinomial":
        return resample_multinomial(weights, rng, size)
    if scheme == "stratified":
        return resample_stratified(weights, rng, size)
    if scheme == "residual":
        return resample_residual(weights, rng, size)
    raise InputError(f"unknown resampling scheme {scheme!r}; expected one of {SCHEMES}")
