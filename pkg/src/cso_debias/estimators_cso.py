"""Gradient estimators for the streaming-outer-variable nested problem.

Four estimators: the plain nested estimator (``bsgd``), its second- or
third-order extrapolated variant (``ebsgd``), and their variance-reduced
outer loops (``bspiderboost`` / ``ebspiderboost``) that alternate a large
fresh batch with small coupled-difference corrections.

Draw layout per outer sample, via role-keyed substreams (so the plain and
extrapolated paths consume identical outer/Jacobian draws):

    ROLE_XI                one outer sample
    ROLE_INNER_VALUES      m conditional draws for the inner-mean estimate
    ROLE_INNER_VALUES_ALT  m more draws (second value set, extrapolated only)
    ROLE_INNER_JACS        m independent draws for the Jacobian average

Budget accounting counts conditional draws: 2m per plain call, 3m per
order-2 extrapolated call (m Jacobians + 2m values), and B times the
per-call cost per variance-reduced step; coupled pairs draw once and
evaluate twice.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from cso_debias.extrapolation import ORDER3_COEFFICIENTS
from cso_debias.problems import CsoProblem
from cso_debias.rng import (
    ROLE_COIN_OUT,
    ROLE_INNER_JACS,
    ROLE_INNER_VALUES,
    ROLE_INNER_VALUES_ALT,
    ROLE_XI,
    RngStream,
)

__all__ = [
    "CsoHyperParams",
    "SpiderState",
    "SampleLedger",
    "bsgd_gradient",
    "ebsgd_gradient",
    "spider_step",
]


@dataclass
class SampleLedger:
    """Running count of conditional (inner) draws and outer samples."""

    inner: int = 0
    outer: int = 0

    def charge(self, inner: int = 0, outer: int = 0) -> None:
        self.inner += int(inner)
        self.outer += int(outer)


@dataclass(frozen=True)
class CsoHyperParams:
    m: int
    gamma: float
    B1: int = 1
    B2: int = 1
    p_out: float = 1.0
    order: int = 2

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if not 1 <= self.B2 <= self.B1:
            raise ValueError("need 1 <= B2 <= B1")
        if not 0.0 < self.p_out <= 1.0:
            raise ValueError("p_out must be in (0, 1]")
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")
        if self.order not in (1, 2, 3):
            raise ValueError("order must be 1, 2 or 3")


@dataclass
class SpiderState:
    """Carried gradient estimate for the variance-reduced outer loop."""

    last_grad: np.ndarray
    last_x: np.ndarray
    last_inner_draws_seedkey: int = 0


def _draw_etas(problem, xi, count, stream, ledger):
    if ledger is not None:
        ledger.charge(inner=count)
    return problem.sample_eta_batch(xi, count, stream.generator)


def _plain_value_vector(problem, points, xi, m, rng, ledger):
    """grad_f at the m-draw inner mean, for one or more evaluation points.

    The conditional draws are made once and shared by all points (coupled
    evaluation), which the variance-reduced correction relies on.
    """
    etas = _draw_etas(problem, xi, m, rng.substream(ROLE_INNER_VALUES), ledger)
    out = []
    for x in points:
        y = problem.g_value(x, etas, xi).mean(axis=0)
        out.append(problem.grad_f(y, xi))
    return out


def _extrapolated_value_vector(problem, points, xi, m, order, rng, ledger):
    """Extrapolated grad_f estimate over the inner-batch-mean law.

    Order 2 draws the two m-sample sets and evaluates grad_f at the two set
    means and at their pooled 2m mean (the average of the two set means).
    Order 3 applies the affine combination of order-2 operators over batch
    sizes (m, 2m, 3m, 4m, 6m) with independent draws.
    """
    if order == 1:
        return _plain_value_vector(problem, points, xi, m, rng, ledger)
    if order == 2:
        etas_a = _draw_etas(problem, xi, m, rng.substream(ROLE_INNER_VALUES), ledger)
        etas_b = _draw_etas(problem, xi, m, rng.substream(ROLE_INNER_VALUES_ALT), ledger)
        out = []
        for x in points:
            ya = problem.g_value(x, etas_a, xi).mean(axis=0)
            yb = problem.g_value(x, etas_b, xi).mean(axis=0)
            mid = 0.5 * (ya + yb)
            out.append(
                2.0 * problem.grad_f(mid, xi)
                - 0.5 * (problem.grad_f(ya, xi) + problem.grad_f(yb, xi))
            )
        return out
    # order 3
    out = [np.zeros(problem.dim_y) for _ in points]
    for block, (coeff, level) in enumerate(ORDER3_COEFFICIENTS):
        jm = level * m
        etas_a = _draw_etas(
            problem, xi, jm, rng.substream(ROLE_INNER_VALUES, block), ledger
        )
        etas_b = _draw_etas(
            problem, xi, jm, rng.substream(ROLE_INNER_VALUES_ALT, block), ledger
        )
        for k, x in enumerate(points):
            ya = problem.g_value(x, etas_a, xi).mean(axis=0)
            yb = problem.g_value(x, etas_b, xi).mean(axis=0)
            mid = 0.5 * (ya + yb)
            out[k] = out[k] + coeff * (
                2.0 * problem.grad_f(mid, xi)
                - 0.5 * (problem.grad_f(ya, xi) + problem.grad_f(yb, xi))
            )
    return out


def _per_xi_gradients(problem, points, xi, m, order, extrapolated, rng, ledger):
    """Per-outer-sample gradient estimates at each point, coupled draws."""
    if extrapolated:
        vecs = _extrapolated_value_vector(problem, points, xi, m, order, rng, ledger)
    else:
        vecs = _plain_value_vector(problem, points, xi, m, rng, ledger)
    etas_jac = _draw_etas(problem, xi, m, rng.substream(ROLE_INNER_JACS), ledger)
    return [
        problem.jacobian_tvp(x, etas_jac, xi, v) for x, v in zip(points, vecs)
    ]


def _sample_xi(problem, stream, ledger):
    if ledger is not None:
        ledger.charge(outer=1)
    return problem.sample_xi(stream.generator)


def bsgd_gradient(
    problem: CsoProblem,
    x: np.ndarray,
    m: int,
    rng: RngStream,
    ledger: SampleLedger | None = None,
) -> np.ndarray:
    """One plain nested gradient estimate: mean Jacobian^T grad_f(mean g).

    Draws one outer sample and 2m conditional samples (m values, m
    Jacobians, independent sets); adds the penalty gradient if present.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    xi = _sample_xi(problem, rng.substream(ROLE_XI), ledger)
    (grad,) = _per_xi_gradients(problem, [x], xi, m, 1, False, rng, ledger)
    return problem.add_penalty(x, grad)


def ebsgd_gradient(
    problem: CsoProblem,
    x: np.ndarray,
    m: int,
    order: int,
    rng: RngStream,
    ledger: SampleLedger | None = None,
) -> np.ndarray:
    """Extrapolated nested gradient estimate (order 2 by default use).

    Order 2 consumes 3m conditional draws (m Jacobians + two m value sets);
    the midpoint evaluation reuses the pooled 2m mean of the two sets.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    if order not in (1, 2, 3):
        raise ValueError("order must be 1, 2 or 3")
    xi = _sample_xi(problem, rng.substream(ROLE_XI), ledger)
    (grad,) = _per_xi_gradients(problem, [x], xi, m, order, True, rng, ledger)
    return problem.add_penalty(x, grad)


def _penalty(problem, x):
    return problem.penalty_grad(x) if problem.penalty_grad is not None else 0.0


def spider_step(
    state: SpiderState | None,
    problem: CsoProblem,
    x_t: np.ndarray,
    params: CsoHyperParams,
    use_extrapolation: bool,
    rng: RngStream,
    t: int = 0,
    ledger: SampleLedger | None = None,
):
    """One variance-reduced step; returns ``(grad, new_state)``.

    Iteration 0 (or a missing state) unconditionally takes the large-batch
    branch: the average of B1 fresh per-outer-sample estimates.  Otherwise a
    Bernoulli(p_out) coin picks between that restart and the small-batch
    correction, where each of B2 fresh outer samples is evaluated at both
    ``x_t`` and the carried point with the SAME conditional draws, so the
    correction vanishes identically when the iterate has not moved.
    """
    restart = state is None or t == 0
    if not restart:
        coin = rng.substream(ROLE_COIN_OUT).generator.random()
        restart = coin < params.p_out

    if restart:
        total = np.zeros(problem.dim_x)
        for j in range(params.B1):
            sj = rng.substream(0x100, j)
            xi = _sample_xi(problem, sj.substream(ROLE_XI), ledger)
            (gj,) = _per_xi_gradients(
                problem, [x_t], xi, params.m, params.order, use_extrapolation, sj, ledger
            )
            total += gj
        grad = np.asarray(problem.add_penalty(x_t, total / params.B1))
    else:
        correction = np.zeros(problem.dim_x)
        for j in range(params.B2):
            sj = rng.substream(0x200, j)
            xi = _sample_xi(problem, sj.substream(ROLE_XI), ledger)
            g_new, g_old = _per_xi_gradients(
                problem,
                [x_t, state.last_x],
                xi,
                params.m,
                params.order,
                use_extrapolation,
                sj,
                ledger,
            )
            correction += g_new - g_old
        grad = (
            state.last_grad
            + correction / params.B2
            + (_penalty(problem, x_t) - _penalty(problem, state.last_x))
        )
    new_state = SpiderState(
        last_grad=np.asarray(grad, dtype=float),
        last_x=np.array(x_t, dtype=float),
        last_inner_draws_seedkey=rng.substream(0x100).stream_id,
    )
    return new_state.last_grad, new_state
