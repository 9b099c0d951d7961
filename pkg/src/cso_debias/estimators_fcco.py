"""Finite-sum estimators with per-index inner trackers.

Each index i keeps a tracker pair (y_i, z_i) approximating the conditional
mean of the inner map and of its Jacobian at the anchor point phi_i (the
iterate at i's last visit).  A visited index refreshes its trackers either
from a large fresh batch (S1, probability p_in or iteration 0) or by a
coupled small-batch correction (S2, same draws evaluated at the current
point and at the anchor).  Unvisited indices carry their state bit-for-bit.

The step estimators nest this inside an outer variance-reduced loop over
indices: a large outer batch averages fresh per-index terms, while the
small outer branch corrects the carried estimate with per-index
differences; the subtrahend re-evaluates the previous tracker through an
independent re-draw of its last update (its distributional copy).  The
extrapolated step applies the second-order combination to the outer-loss
gradient over the tracker's sampling law: the inner batch is split into
two halves, each half builds one tracker realization, and the midpoint is
their average; the carried state always stores the full-batch tracker.

The inner fresh/correction coin is drawn once per iteration and shared by
the selected indices; both outer batches are drawn uniformly WITHOUT
replacement, and per-index terms are reduced in ascending index order.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from cso_debias.estimators_cso import SampleLedger, _draw_etas
from cso_debias.problems import FccoProblem
from cso_debias.rng import (
    ROLE_COIN_IN,
    ROLE_COIN_OUT,
    ROLE_INDICES,
    ROLE_INNER_JACS,
    ROLE_INNER_VALUES,
    ROLE_REPLAY,
    RngStream,
)

__all__ = [
    "FccoHyperParams",
    "InnerState",
    "FccoCarry",
    "update_inner_value",
    "update_inner_jacobian",
    "nestedvr_step",
    "enestedvr_step",
]

_FRESH = "fresh"
_CORR = "corr"


@dataclass(frozen=True)
class FccoHyperParams:
    gamma: float
    B1: int
    B2: int
    p_out: float
    S1: int
    S2: int
    p_in: float
    order: int = 2

    def __post_init__(self):
        if not 1 <= self.B2 <= self.B1:
            raise ValueError("need 1 <= B2 <= B1")
        if not 1 <= self.S2 <= self.S1:
            raise ValueError("need 1 <= S2 <= S1")
        if not (0.0 < self.p_out <= 1.0 and 0.0 < self.p_in <= 1.0):
            raise ValueError("probabilities must be in (0, 1]")
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")
        if self.order not in (1, 2, 3):
            raise ValueError("order must be 1, 2 or 3")


@dataclass
class InnerState:
    """Tracker state of one index; updated only when the index is selected."""

    y: np.ndarray  # inner-value tracker, shape (p,)
    z: np.ndarray  # inner-Jacobian tracker, shape (p, d)
    phi: np.ndarray  # anchor: iterate at the last visit
    last_visit: int
    # replay record of the last y update, for drawing distributional copies
    y_kind: str = _FRESH
    y_base: np.ndarray | None = None  # tracker value before a correction update
    prev_phi: np.ndarray | None = None  # anchor before the last update


@dataclass
class FccoCarry:
    """Carried outer estimate and the point it was computed at."""

    grad: np.ndarray
    x: np.ndarray


def _value_update(problem, state, i, x_t, batch, fresh, stream, ledger):
    """New y tracker plus the two half-batch realizations for extrapolation.

    Fresh branch: the tracker is the batch mean of g at ``x_t``.  Correction
    branch: the carried tracker plus the batch mean of g(x_t) - g(phi) with
    the SAME draws at both points.  Halves realize two tracker copies whose
    average is (for even batches) the full-batch tracker.
    """
    etas = _draw_etas(problem, i, batch, stream, ledger)
    half = batch // 2 if batch >= 2 else 1
    if fresh:
        vals = problem.g_value(x_t, etas, i)
        y = vals.mean(axis=0)
        ya = vals[:half].mean(axis=0)
        yb = vals[half:].mean(axis=0)
        return y, ya, yb, dict(y_kind=_FRESH, y_base=None, prev_phi=None)
    diffs = problem.g_value(x_t, etas, i) - problem.g_value(state.phi, etas, i)
    y = state.y + diffs.mean(axis=0)
    ya = state.y + diffs[:half].mean(axis=0)
    yb = state.y + diffs[half:].mean(axis=0)
    return (
        y,
        ya,
        yb,
        dict(y_kind=_CORR, y_base=state.y.copy(), prev_phi=state.phi.copy()),
    )


def _jacobian_update(problem, state, i, x_t, batch, fresh, stream, ledger):
    etas = _draw_etas(problem, i, batch, stream, ledger)
    if fresh:
        return problem.g_jacobian(x_t, etas, i).mean(axis=0)
    diffs = problem.g_jacobian(x_t, etas, i) - problem.g_jacobian(state.phi, etas, i)
    return state.z + diffs.mean(axis=0)


def _replay_y(problem, state, i, params, stream, ledger):
    """Independent re-draw of the last y update: a distributional copy.

    Returns the copy and its two half-batch realizations, evaluated at the
    stored anchors with fresh conditional draws.
    """
    if state.y_kind == _FRESH:
        batch = params.S1
        etas = _draw_etas(problem, i, batch, stream, ledger)
        vals = problem.g_value(state.phi, etas, i)
        half = batch // 2 if batch >= 2 else 1
        return vals.mean(axis=0), vals[:half].mean(axis=0), vals[half:].mean(axis=0)
    batch = params.S2
    etas = _draw_etas(problem, i, batch, stream, ledger)
    diffs = problem.g_value(state.phi, etas, i) - problem.g_value(state.prev_phi, etas, i)
    half = batch // 2 if batch >= 2 else 1
    return (
        state.y_base + diffs.mean(axis=0),
        state.y_base + diffs[:half].mean(axis=0),
        state.y_base + diffs[half:].mean(axis=0),
    )


def update_inner_value(
    state: InnerState | None,
    problem: FccoProblem,
    i: int,
    x_t: np.ndarray,
    params: FccoHyperParams,
    rng: RngStream,
    t: int = 0,
    fresh: bool | None = None,
    ledger: SampleLedger | None = None,
) -> InnerState:
    """Tracker update for the inner value of a selected index.

    ``fresh=None`` draws the branch coin here; the step functions instead
    draw one coin per iteration and pass it in.  The first visit of an
    index is always fresh.
    """
    if fresh is None:
        fresh = t == 0 or rng.substream(ROLE_COIN_IN).generator.random() < params.p_in
    fresh = fresh or state is None
    batch = params.S1 if fresh else params.S2
    y, _, _, record = _value_update(
        problem, state, i, x_t, batch, fresh, rng.substream(ROLE_INNER_VALUES, i), ledger
    )
    if state is None:
        z = np.zeros((problem.dim_y, problem.dim_x))
        return InnerState(y=y, z=z, phi=np.array(x_t), last_visit=t, **record)
    return replace(state, y=y, phi=np.array(x_t), last_visit=t, **record)


def update_inner_jacobian(
    state: InnerState | None,
    problem: FccoProblem,
    i: int,
    x_t: np.ndarray,
    params: FccoHyperParams,
    rng: RngStream,
    t: int = 0,
    fresh: bool | None = None,
    ledger: SampleLedger | None = None,
) -> InnerState:
    """Tracker update for the inner Jacobian, with an independent sample set."""
    if fresh is None:
        fresh = t == 0 or rng.substream(ROLE_COIN_IN).generator.random() < params.p_in
    fresh = fresh or state is None
    batch = params.S1 if fresh else params.S2
    z = _jacobian_update(
        problem, state, i, x_t, batch, fresh, rng.substream(ROLE_INNER_JACS, i), ledger
    )
    if state is None:
        y = np.zeros(problem.dim_y)
        return InnerState(y=y, z=z, phi=np.array(x_t), last_visit=t)
    return replace(state, z=z, phi=np.array(x_t), last_visit=t)


def _grad_f_term(problem, z, i, y, ya, yb, extrapolated):
    """(z)^T grad_f with or without the second-order combination over trackers."""
    if not extrapolated:
        v = problem.grad_f(y, i)
    else:
        mid = 0.5 * (ya + yb)
        v = 2.0 * problem.grad_f(mid, i) - 0.5 * (
            problem.grad_f(ya, i) + problem.grad_f(yb, i)
        )
    return z.T @ v


def _penalty(problem, x):
    return problem.penalty_grad(x) if problem.penalty_grad is not None else 0.0


def _step(states, carry, problem, x_t, params, t, rng, extrapolated, ledger):
    restart = carry is None or t == 0
    if not restart:
        restart = rng.substream(ROLE_COIN_OUT).generator.random() < params.p_out
    fresh_inner = t == 0 or rng.substream(ROLE_COIN_IN).generator.random() < params.p_in

    gen_idx = rng.substream(ROLE_INDICES).generator
    if restart:
        idx = np.sort(problem.sample_indices(params.B1, gen_idx))
        if ledger is not None:
            ledger.charge(outer=len(idx))
        total = np.zeros(problem.dim_x)
        for i in idx:
            i = int(i)
            state = states.get(i)
            fresh = fresh_inner or state is None
            batch = params.S1 if fresh else params.S2
            y, ya, yb, record = _value_update(
                problem, state, i, x_t, batch, fresh,
                rng.substream(ROLE_INNER_VALUES, i), ledger,
            )
            z = _jacobian_update(
                problem, state, i, x_t, batch, fresh,
                rng.substream(ROLE_INNER_JACS, i), ledger,
            )
            states[i] = InnerState(
                y=y, z=z, phi=np.array(x_t), last_visit=t, **record
            )
            total += _grad_f_term(problem, z, i, y, ya, yb, extrapolated)
        grad = np.asarray(total / len(idx) + _penalty(problem, x_t))
    else:
        idx = np.sort(problem.sample_indices(params.B2, gen_idx))
        if ledger is not None:
            ledger.charge(outer=len(idx))
        correction = np.zeros(problem.dim_x)
        for i in idx:
            i = int(i)
            state = states.get(i)
            old_term = None
            if state is not None:
                y_old, ya_old, yb_old = _replay_y(
                    problem, state, i, params, rng.substream(ROLE_REPLAY, i), ledger
                )
                old_term = _grad_f_term(
                    problem, state.z, i, y_old, ya_old, yb_old, extrapolated
                )
            fresh = fresh_inner or state is None
            batch = params.S1 if fresh else params.S2
            y, ya, yb, record = _value_update(
                problem, state, i, x_t, batch, fresh,
                rng.substream(ROLE_INNER_VALUES, i), ledger,
            )
            z = _jacobian_update(
                problem, state, i, x_t, batch, fresh,
                rng.substream(ROLE_INNER_JACS, i), ledger,
            )
            states[i] = InnerState(
                y=y, z=z, phi=np.array(x_t), last_visit=t, **record
            )
            if old_term is not None:
                # first visits contribute nothing to the correction
                correction += (
                    _grad_f_term(problem, z, i, y, ya, yb, extrapolated) - old_term
                )
        grad = (
            carry.grad
            + correction / len(idx)
            + (_penalty(problem, x_t) - _penalty(problem, carry.x))
        )
    carry = FccoCarry(grad=np.asarray(grad, dtype=float), x=np.array(x_t, dtype=float))
    return carry.grad, states, carry


def nestedvr_step(
    states: dict,
    carry: FccoCarry | None,
    problem: FccoProblem,
    x_t: np.ndarray,
    params: FccoHyperParams,
    t: int,
    rng: RngStream,
    ledger: SampleLedger | None = None,
):
    """One nested variance-reduced step; returns ``(grad, states, carry)``.

    Iteration 0 (or a missing carry) forces the large outer batch.  In the
    small branch the per-index correction is the current tracker term minus
    the re-drawn previous tracker term; an index visited for the first time
    just initializes its trackers and contributes zero to the correction.
    """
    return _step(states, carry, problem, x_t, params, t, rng, False, ledger)


def enestedvr_step(
    states: dict,
    carry: FccoCarry | None,
    problem: FccoProblem,
    x_t: np.ndarray,
    params: FccoHyperParams,
    t: int,
    rng: RngStream,
    ledger: SampleLedger | None = None,
):
    """Extrapolated nested variance-reduced step (same control flow).

    The outer-loss gradient at each tracker is replaced by the second-order
    combination over two half-batch tracker realizations; with degenerate
    inner noise the combination collapses to the plain term and the two
    steps produce identical output.
    """
    return _step(states, carry, problem, x_t, params, t, rng, True, ledger)
