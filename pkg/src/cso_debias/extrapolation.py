"""Stochastic extrapolation operators and a bias/variance measurement harness.

The operators approximate ``q(s + E[delta])`` from noisy evaluations of
``q(s + delta)`` where ``delta`` follows the averaged law
:class:`~cso_debias.distributions.SampleAverage`.  Order k has expectation
error O(m^-k) in the inner batch size m:

    order 1:  q(s + delta)
    order 2:  2 q(s + (d1+d2)/2) - [q(s + d1) + q(s + d2)] / 2
    order 3:  affine combination of order-2 operators over the averaged
              laws with batch sizes (m, 2m, 3m, 4m, 6m); the coefficients
              (-1/36, 5/9, -3/4, -16/9, 3) sum to one.

Inside the order-2 operator the midpoint argument is always the average of
the two already-drawn means (equal in law to one 2m-average), never a fresh
third draw.

Budget accounting counts base draws: m, 2m and 32m per application for
orders 1-3 when each constituent draws independently (the default).  The
``shared-pool`` budget instead draws a single pool of 12m base samples per
application and forms all sub-averages from its two halves, so that every
order costs exactly 12m; use it for equal-budget comparisons, the default
for correctness of variance analysis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from cso_debias import kernels
from cso_debias.distributions import Distribution, SampleAverage
from cso_debias.rng import RngStream

__all__ = [
    "QueryFunction",
    "ScalarFunction",
    "SCALAR_FUNCTIONS",
    "ORDER3_COEFFICIENTS",
    "extrapolate1",
    "extrapolate2",
    "extrapolate3",
    "apply_operator",
    "second_order_combination",
    "measure_bias_and_variance",
    "base_draws_per_application",
    "triangle_wave",
]

triangle_wave = kernels.triangle_wave

#: (coefficient, batch-size multiple) pairs of the third-order operator.
ORDER3_COEFFICIENTS = tuple(zip(kernels.ORDER3_COEFFS, kernels.ORDER3_LEVELS))

_VALID_ORDERS = (1, 2, 3)


@dataclass(frozen=True)
class QueryFunction:
    """A deterministic map from R^p to R^l queried by the operators."""

    fn: Callable[[np.ndarray], np.ndarray]
    input_dim: int | None = None
    output_dim: int | None = None

    def __call__(self, x):
        return self.fn(x)


@dataclass(frozen=True)
class ScalarFunction(QueryFunction):
    """A named scalar test function with a compiled-kernel code."""

    name: str = ""
    code: int = -1


SCALAR_FUNCTIONS = {
    "quad": ScalarFunction(lambda x: 0.5 * x * x, 1, 1, "quad", kernels.QUAD),
    "quartic": ScalarFunction(lambda x: x**4, 1, 1, "quartic", kernels.QUARTIC),
    "relu": ScalarFunction(lambda x: np.maximum(x, 0.0), 1, 1, "relu", kernels.RELU),
    "triwave": ScalarFunction(
        lambda x: 0.5 * x * x + triangle_wave(x) + 1.0, 1, 1, "triwave", kernels.TRIWAVE
    ),
    "affine": ScalarFunction(lambda x: 3.0 * x + 1.0, 1, 1, "affine", kernels.AFFINE),
}


def _check_order(order: int) -> int:
    if order not in _VALID_ORDERS:
        raise ValueError("extrapolation order must be 1, 2 or 3")
    return order


def _check_shift(q, s):
    s = np.asarray(s, dtype=float)
    if isinstance(q, QueryFunction) and q.input_dim is not None:
        got = 1 if s.ndim == 0 else s.shape[-1]
        if got != q.input_dim:
            raise ValueError(f"shift has dimension {got}, function expects {q.input_dim}")
    return s


def base_draws_per_application(order: int, m: int, budget: str = "independent") -> int:
    """Base draws one operator application consumes under a budget mode."""
    _check_order(order)
    if budget == "independent":
        return kernels.base_draws_per_estimate(order, m)
    if budget == "shared-pool":
        return 12 * m
    raise ValueError("budget must be 'independent' or 'shared-pool'")


def extrapolate1(q, s, avg: SampleAverage, rng: RngStream):
    """First-order operator: q at the shifted m-sample mean."""
    s = _check_shift(q, s)
    return q(s + avg.sample(rng.generator))


def second_order_combination(q, s, d1, d2):
    """The order-2 affine combination for two realized draws.

    Exposed separately because the gradient estimators reuse it on draws
    they construct themselves (pooled batch means, tracker realizations).
    """
    mid = 0.5 * (d1 + d2)
    return 2.0 * q(s + mid) - 0.5 * (q(s + d1) + q(s + d2))


def extrapolate2(q, s, avg: SampleAverage, rng: RngStream):
    """Second-order operator; consumes exactly 2m base draws."""
    s = _check_shift(q, s)
    gen = rng.generator
    d1 = avg.sample(gen)
    d2 = avg.sample(gen)
    return second_order_combination(q, s, d1, d2)


def extrapolate3(q, s, avg: SampleAverage, rng: RngStream, budget: str = "independent"):
    """Third-order operator as an affine combination of order-2 operators.

    With the default independent budget each constituent order-2 operator
    draws its own pair of averaged samples (32m base draws total).  With
    ``budget='shared-pool'`` one pool of 12m base draws is split into two
    halves and each constituent averages prefixes of the halves, so the
    pairs stay independent while samples are reused across constituents.
    """
    s = _check_shift(q, s)
    gen = rng.generator
    out = None
    if budget == "independent":
        for coeff, level in ORDER3_COEFFICIENTS:
            sub = SampleAverage(avg.base, level * avg.m)
            term = coeff * second_order_combination(q, s, sub.sample(gen), sub.sample(gen))
            out = term if out is None else out + term
        return out
    if budget != "shared-pool":
        raise ValueError("budget must be 'independent' or 'shared-pool'")
    pool = avg.base.sample_array(gen, 12 * avg.m)
    half = 6 * avg.m
    for coeff, level in ORDER3_COEFFICIENTS:
        jm = level * avg.m
        d1 = pool[:jm].mean(axis=0)
        d2 = pool[half : half + jm].mean(axis=0)
        term = coeff * second_order_combination(q, s, d1, d2)
        out = term if out is None else out + term
    return out


def apply_operator(order, q, s, avg, rng, budget="independent"):
    _check_order(order)
    if budget == "shared-pool":
        # equalized 12m budget: order 1 averages the full pool, order 2 the halves
        if order == 1:
            return extrapolate1(q, s, SampleAverage(avg.base, 12 * avg.m), rng)
        if order == 2:
            return extrapolate2(q, s, SampleAverage(avg.base, 6 * avg.m), rng)
        return extrapolate3(q, s, avg, rng, budget="shared-pool")
    if order == 1:
        return extrapolate1(q, s, avg, rng)
    if order == 2:
        return extrapolate2(q, s, avg, rng)
    return extrapolate3(q, s, avg, rng)


_CHUNK_DRAWS = 8_000_000  # base draws per generated block in the fast path


def measure_bias_and_variance(
    order: int,
    q,
    s,
    base: Distribution,
    m: int,
    reps: int,
    rng: RngStream,
    true_value: float | None = None,
    budget: str = "independent",
    running_errors_at: list[int] | None = None,
) -> dict:
    """Monte Carlo bias and variance of one operator configuration.

    Returns a dict with ``bias_est`` (sample mean minus the true value
    ``q(s + E[delta])``), ``bias_ci_halfwidth`` (95% normal CI), ``variance_est``
    (sample variance of the operator output) and ``mean_est``.  When
    ``running_errors_at`` is given, also returns ``running`` as a list of
    ``(n_estimates, abs_error)`` pairs of the running-mean estimate.

    Named :class:`ScalarFunction` queries on scalar laws run through the
    compiled kernels; anything else falls back to a generic per-replication
    loop with per-replication substreams.
    """
    _check_order(order)
    if reps < 100:
        raise ValueError("reps must be >= 100")
    if true_value is None:
        try:
            mean_shift = base.mean()
        except NotImplementedError as exc:
            raise ValueError(
                "the law has no known mean; pass true_value explicitly"
            ) from exc
        true_value = q(np.asarray(s, dtype=float) + mean_shift)
    true_value = float(np.asarray(true_value))

    fast = isinstance(q, ScalarFunction) and q.code >= 0 and base.dim is None
    if fast:
        outputs = _scalar_mc_outputs(order, q.code, float(s), base, m, reps, rng, budget)
    else:
        outputs = np.empty(reps)
        avg = SampleAverage(base, m)
        for r in range(reps):
            outputs[r] = np.asarray(
                apply_operator(order, q, s, avg, rng.substream(r), budget=budget)
            )

    mean_est = float(outputs.mean())
    var_est = float(outputs.var(ddof=1))
    result = {
        "mean_est": mean_est,
        "bias_est": mean_est - true_value,
        "bias_ci_halfwidth": 1.96 * math.sqrt(var_est / reps),
        "variance_est": var_est,
        "true_value": true_value,
        "n_reps": reps,
    }
    if running_errors_at:
        csum = np.cumsum(outputs)
        running = []
        for n in running_errors_at:
            n = min(int(n), reps)
            running.append((n, abs(csum[n - 1] / n - true_value)))
        result["running"] = running
    return result


def _scalar_mc_outputs(order, code, s, base, m, reps, rng, budget):
    shared = budget == "shared-pool"
    if not shared and budget != "independent":
        raise ValueError("budget must be 'independent' or 'shared-pool'")
    if shared:
        width, kernel_order, kernel_m = 12 * m, order, m
    else:
        width, kernel_order, kernel_m = (
            kernels.base_draws_per_estimate(order, m),
            order,
            m,
        )
    gen = rng.generator
    outputs = np.empty(reps)
    done = 0
    chunk = max(1, _CHUNK_DRAWS // width)
    while done < reps:
        take = min(chunk, reps - done)
        draws = base.sample_array(gen, take * width).reshape(take, width)
        outputs[done : done + take] = kernels.batch_estimates(
            kernel_order, code, s, draws, kernel_m, shared=shared
        )
        done += take
    return outputs
