"""Hot Monte Carlo kernels for the extrapolation measurement harness.

The bias/variance harness evaluates the extrapolation operators on named
scalar test functions over 1e6..1e7 replications; these inner loops dominate
the runtime of the measurement presets.  They are compiled with numba when
available.  Setting the environment variable ``CSO_DEBIAS_NO_NUMBA=1`` (or
numba being absent) selects a pure-numpy fallback implementing the same
arithmetic; ``benchmarks/bench_kernels.py`` compares the two paths.

Layout of the per-estimate base-draw rows (independent budget):

    order 1:  m draws                -> one D_m mean
    order 2:  2m draws               -> two D_m means
    order 3:  32m draws, blocks of 2*j*m for j in (1, 2, 3, 4, 6)

Shared-pool budget: every order consumes one pool of 12m draws; order 1
averages the pool (a D_12m mean), order 2 averages the two 6m halves, and
order 3 forms its D_jm pairs from prefixes of the two halves.
"""

from __future__ import annotations

import math
import os

import numpy as np

NUMBA_DISABLED = os.environ.get("CSO_DEBIAS_NO_NUMBA", "").strip() not in ("", "0")

try:  # pragma: no cover - exercised via the env flag in the benchmark
    if NUMBA_DISABLED:
        raise ImportError
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

    def njit(*args, **kwargs):  # no-op decorator fallback
        if args and callable(args[0]):
            return args[0]

        def wrap(f):
            return f

        return wrap


BACKEND = "numba" if HAVE_NUMBA else "numpy"

# scalar test-function codes
QUAD = 0  # x^2 / 2
QUARTIC = 1  # x^4
RELU = 2  # max(x, 0)
TRIWAVE = 3  # x^2/2 + TriangleWave(x) + 1
AFFINE = 4  # 3x + 1

# third-order operator: affine combination of second-order operators over
# D_{j m} with these (coefficient, j) pairs; coefficients sum to 1
ORDER3_COEFFS = (-1.0 / 36.0, 5.0 / 9.0, -3.0 / 4.0, -16.0 / 9.0, 3.0)
ORDER3_LEVELS = (1, 2, 3, 4, 6)


def triangle_wave(x):
    """Period-2 triangle wave spanning [-1, 1]."""
    x = np.asarray(x, dtype=float)
    return 2.0 * np.abs(2.0 * (x / 2.0 - np.floor(x / 2.0 + 0.5))) - 1.0


def base_draws_per_estimate(order: int, m: int, shared: bool = False) -> int:
    """Base draws one operator application consumes."""
    if shared:
        return 12 * m
    return {1: m, 2: 2 * m, 3: 32 * m}[order]


def dm_draws_per_application(order: int) -> int:
    """Draws from the averaged law one application consumes (1, 2 or 10)."""
    return {1: 1, 2: 2, 3: 10}[order]


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------


@njit(cache=True)
def _q_scalar(code, x):
    if code == QUAD:
        return 0.5 * x * x
    if code == QUARTIC:
        return x * x * x * x
    if code == RELU:
        return x if x > 0.0 else 0.0
    if code == TRIWAVE:
        tw = 2.0 * abs(2.0 * (x / 2.0 - math.floor(x / 2.0 + 0.5))) - 1.0
        return 0.5 * x * x + tw + 1.0
    return 3.0 * x + 1.0


@njit(cache=True)
def _seg_mean(row, lo, hi):
    acc = 0.0
    for i in range(lo, hi):
        acc += row[i]
    return acc / (hi - lo)


@njit(cache=True)
def _l2(code, s, d1, d2):
    mid = 0.5 * (d1 + d2)
    return 2.0 * _q_scalar(code, s + mid) - 0.5 * (
        _q_scalar(code, s + d1) + _q_scalar(code, s + d2)
    )


@njit(cache=True)
def _order1_nb(code, s, draws, out):
    n, width = draws.shape
    for r in range(n):
        out[r] = _q_scalar(code, s + _seg_mean(draws[r], 0, width))


@njit(cache=True)
def _order2_nb(code, s, draws, out):
    n, width = draws.shape
    m = width // 2
    for r in range(n):
        d1 = _seg_mean(draws[r], 0, m)
        d2 = _seg_mean(draws[r], m, 2 * m)
        out[r] = _l2(code, s, d1, d2)


@njit(cache=True)
def _order3_nb(code, s, draws, m, out):
    n = draws.shape[0]
    coeffs = (-1.0 / 36.0, 5.0 / 9.0, -3.0 / 4.0, -16.0 / 9.0, 3.0)
    levels = (1, 2, 3, 4, 6)
    for r in range(n):
        row = draws[r]
        acc = 0.0
        off = 0
        for k in range(5):
            jm = levels[k] * m
            d1 = _seg_mean(row, off, off + jm)
            d2 = _seg_mean(row, off + jm, off + 2 * jm)
            acc += coeffs[k] * _l2(code, s, d1, d2)
            off += 2 * jm
        out[r] = acc


@njit(cache=True)
def _order3_shared_nb(code, s, draws, m, out):
    n = draws.shape[0]
    coeffs = (-1.0 / 36.0, 5.0 / 9.0, -3.0 / 4.0, -16.0 / 9.0, 3.0)
    levels = (1, 2, 3, 4, 6)
    half = 6 * m
    for r in range(n):
        row = draws[r]
        acc = 0.0
        for k in range(5):
            jm = levels[k] * m
            d1 = _seg_mean(row, 0, jm)
            d2 = _seg_mean(row, half, half + jm)
            acc += coeffs[k] * _l2(code, s, d1, d2)
        out[r] = acc


# ---------------------------------------------------------------------------
# numpy path
# ---------------------------------------------------------------------------


def _q_array(code: int, x: np.ndarray) -> np.ndarray:
    if code == QUAD:
        return 0.5 * x * x
    if code == QUARTIC:
        return x**4
    if code == RELU:
        return np.maximum(x, 0.0)
    if code == TRIWAVE:
        return 0.5 * x * x + triangle_wave(x) + 1.0
    if code == AFFINE:
        return 3.0 * x + 1.0
    raise ValueError(f"unknown scalar function code {code}")


def _l2_array(code, s, d1, d2):
    mid = 0.5 * (d1 + d2)
    return 2.0 * _q_array(code, s + mid) - 0.5 * (
        _q_array(code, s + d1) + _q_array(code, s + d2)
    )


def _order1_np(code, s, draws):
    return _q_array(code, s + draws.mean(axis=1))


def _order2_np(code, s, draws):
    m = draws.shape[1] // 2
    return _l2_array(code, s, draws[:, :m].mean(axis=1), draws[:, m:].mean(axis=1))


def _order3_np(code, s, draws, m):
    out = np.zeros(draws.shape[0])
    off = 0
    for c, j in zip(ORDER3_COEFFS, ORDER3_LEVELS):
        jm = j * m
        d1 = draws[:, off : off + jm].mean(axis=1)
        d2 = draws[:, off + jm : off + 2 * jm].mean(axis=1)
        out += c * _l2_array(code, s, d1, d2)
        off += 2 * jm
    return out


def _order3_shared_np(code, s, draws, m):
    out = np.zeros(draws.shape[0])
    half = 6 * m
    for c, j in zip(ORDER3_COEFFS, ORDER3_LEVELS):
        jm = j * m
        d1 = draws[:, :jm].mean(axis=1)
        d2 = draws[:, half : half + jm].mean(axis=1)
        out += c * _l2_array(code, s, d1, d2)
    return out


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def batch_estimates(
    order: int, code: int, s: float, draws: np.ndarray, m: int, shared: bool = False
) -> np.ndarray:
    """Per-row operator estimates for a (reps, draws_per_estimate) array."""
    draws = np.ascontiguousarray(draws, dtype=np.float64)
    expected = base_draws_per_estimate(order, m, shared)
    if draws.ndim != 2 or draws.shape[1] != expected:
        raise ValueError(
            f"order-{order} rows need {expected} base draws, got shape {draws.shape}"
        )
    if HAVE_NUMBA:
        out = np.empty(draws.shape[0])
        if order == 1:
            _order1_nb(code, s, draws, out)
        elif order == 2:
            _order2_nb(code, s, draws, out)
        elif shared:
            _order3_shared_nb(code, s, draws, m, out)
        else:
            _order3_nb(code, s, draws, m, out)
        return out
    if order == 1:
        return _order1_np(code, s, draws)
    if order == 2:
        return _order2_np(code, s, draws)
    if shared:
        return _order3_shared_np(code, s, draws, m)
    return _order3_np(code, s, draws, m)
