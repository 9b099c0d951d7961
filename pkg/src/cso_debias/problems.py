"""Nested stochastic optimization problems and the synthetic instance suite.

A problem is the tuple (outer sampler, conditional inner sampler, inner map
value + Jacobian, outer-loss gradient) defining

    F(x) = E_xi[ f_xi( E_{eta|xi}[ g_eta(x; xi) ] ) ]  (+ optional penalty),

or its finite-sum variant where xi runs uniformly over indices 1..n.
Problems optionally expose the exact conditional mean, the exact full
gradient and the exact objective, which the runner uses as evaluation
oracles.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit

from cso_debias import neuralnet as nn
from cso_debias.rng import ROLE_DATA, RngStream

__all__ = [
    "CsoProblem",
    "FccoProblem",
    "SmoothnessConstants",
    "SinusoidTask",
    "make_invariant_lr",
    "make_invariant_lr_from_arrays",
    "make_iv_regression",
    "make_iv_regression_from_arrays",
    "make_sinusoid_maml",
    "compute_constants",
    "dump_dataset",
    "load_dataset",
]


@dataclass
class CsoProblem:
    """One nested-optimization instance.

    Batched callables: ``sample_eta_batch(xi, count, gen)`` returns the raw
    inner samples; ``g_value(x, etas, xi)`` maps them to a (count, p) array
    and ``g_jacobian(x, etas, xi)`` to (count, p, d).  ``grad_f(y, xi)``
    is the outer-loss gradient at an inner-mean estimate y (shape (p,)).
    """

    dim_x: int
    dim_y: int
    sample_xi: Callable
    sample_eta_batch: Callable
    g_value: Callable
    g_jacobian: Callable
    grad_f: Callable
    f_value: Callable | None = None
    inner_mean: Callable | None = None
    true_grad: Callable | None = None
    penalty_grad: Callable | None = None
    jac_tvp: Callable | None = None
    name: str = ""
    extras: dict = field(default_factory=dict)

    def jacobian_tvp(self, x, etas, xi, v):
        """(1/count sum_k grad g_k)^T v without materializing Jacobians."""
        if self.jac_tvp is not None:
            return self.jac_tvp(x, etas, xi, v)
        jac = self.g_jacobian(x, etas, xi)
        return np.einsum("kpd,p->d", jac, v) / jac.shape[0]

    def mean_jacobian(self, x, etas, xi):
        return self.g_jacobian(x, etas, xi).mean(axis=0)

    def add_penalty(self, x, grad):
        if self.penalty_grad is None:
            return grad
        return grad + self.penalty_grad(x)


@dataclass
class FccoProblem(CsoProblem):
    """Finite-sum variant: the outer variable is a uniform index in 0..n-1."""

    n: int = 0

    def sample_indices(self, count, gen, replace=False):
        if count == self.n and not replace:
            return np.arange(self.n)
        return gen.choice(self.n, size=count, replace=replace)

    def objective_value(self, x):
        """Exact F_n(x) via the conditional means; needs both oracles."""
        if "objective_vec" in self.extras:
            return float(self.extras["objective_vec"](np.asarray(x, dtype=float)))
        if self.inner_mean is None or self.f_value is None:
            raise ValueError("objective_value needs inner_mean and f_value")
        total = 0.0
        for i in range(self.n):
            total += float(self.f_value(self.inner_mean(x, i), i))
        total /= self.n
        pen = self.extras.get("l2_coeff", 0.0)
        return total + 0.5 * pen * float(x @ x)

    def reference_minimizer(self, tol: float = 1e-12) -> np.ndarray:
        """High-accuracy full-information minimizer, computed once and cached."""
        if "x_ref" not in self.extras:
            from scipy.optimize import minimize

            if self.true_grad is None:
                raise ValueError("reference minimizer needs the exact gradient oracle")
            x0 = np.zeros(self.dim_x)
            res = minimize(
                fun=self.objective_value,
                x0=x0,
                jac=self.true_grad,
                method="L-BFGS-B",
                options={"gtol": tol, "ftol": 1e-16, "maxiter": 20000},
            )
            self.extras["x_ref"] = np.asarray(res.x, dtype=float)
        return self.extras["x_ref"]


# ---------------------------------------------------------------------------
# invariant logistic regression
# ---------------------------------------------------------------------------


def make_invariant_lr(
    n: int,
    d: int = 10,
    noise_variance: float = 100.0,
    l2_coeff: float = 1e-3,
    seed: int = 0,
) -> FccoProblem:
    """Binary classification where only a noisy view of each sample is seen.

    A planted separator x* ~ N(0, I) labels clean samples a_i ~ N(0, I) via
    b_i = sgn(a_i^T x*) (ties broken to +1); the inner law draws noisy
    observations eta ~ N(a_i, noise_variance * I).  The outer loss is the
    logistic loss on b_i * E[eta]^T x, plus an l2 penalty whose gradient is
    added unbiasedly outside the nested composition.
    """
    if n < 1 or d < 1 or noise_variance < 0:
        raise ValueError("need n >= 1, d >= 1, noise_variance >= 0")
    gen = RngStream(seed, ROLE_DATA).generator
    x_star = gen.standard_normal(d)
    a = gen.standard_normal((n, d))
    b = np.where(a @ x_star >= 0.0, 1.0, -1.0)
    return make_invariant_lr_from_arrays(a, b, noise_variance, l2_coeff)


def make_invariant_lr_from_arrays(
    a: np.ndarray, b: np.ndarray, noise_variance: float, l2_coeff: float
) -> FccoProblem:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n, d = a.shape
    noise_std = math.sqrt(noise_variance)

    def sample_xi(gen):
        return int(gen.integers(n))

    def sample_eta_batch(i, count, gen):
        return a[i] + noise_std * gen.standard_normal((count, d))

    def g_value(x, etas, i):
        return (etas @ x)[:, None]

    def g_jacobian(x, etas, i):
        return etas[:, None, :]

    def grad_f(y, i):
        # d/dy log(1 + exp(-b y)) = -b * sigmoid(-b y)
        return np.array([-b[i] * expit(-b[i] * float(y[0]))])

    def f_value(y, i):
        return float(np.logaddexp(0.0, -b[i] * float(y[0])))

    def inner_mean(x, i):
        return np.array([a[i] @ x])

    def true_grad(x):
        z = a @ x
        s = -b * expit(-b * z)
        return a.T @ s / n + l2_coeff * x

    def penalty_grad(x):
        return l2_coeff * x

    prob = FccoProblem(
        dim_x=d,
        dim_y=1,
        sample_xi=sample_xi,
        sample_eta_batch=sample_eta_batch,
        g_value=g_value,
        g_jacobian=g_jacobian,
        grad_f=grad_f,
        f_value=f_value,
        inner_mean=inner_mean,
        true_grad=true_grad,
        penalty_grad=penalty_grad if l2_coeff > 0 else None,
        name="invariant_lr",
        n=n,
    )
    prob.extras.update(
        {"a": a, "b": b, "noise_variance": noise_variance, "l2_coeff": l2_coeff}
    )
    prob.extras["objective_vec"] = lambda x: (
        np.mean(np.logaddexp(0.0, -b * (a @ x))) + 0.5 * l2_coeff * float(x @ x)
    )
    return prob


# ---------------------------------------------------------------------------
# instrumental variable regression
# ---------------------------------------------------------------------------

_IV_GAMMA_RATE = 10.0  # Exponential RATE: mean contribution 0.1


def make_iv_regression(n: int, seed: int = 0) -> FccoProblem:
    """Causal-effect regression with an instrument.

    Structural model: Z ~ Uniform([-3,3]^2), confounder e ~ N(0,1), noise
    delta ~ N(0, 0.1), gamma ~ Exponential(rate 10); X = z1/2 + e/2 + gamma
    and Y = X + e + delta.  The regressor is linear in X lifted with an
    intercept: g_X(w) = w0*X + w1, so w lives in R^2.  The outer loss is
    log cosh(yhat - Y), whose gradient tanh(yhat - Y) is bounded by 1.
    """
    if n < 1:
        raise ValueError("need n >= 1")
    gen = RngStream(seed, ROLE_DATA).generator
    z = gen.uniform(-3.0, 3.0, size=(n, 2))
    e = gen.standard_normal(n)
    delta = gen.normal(0.0, math.sqrt(0.1), size=n)
    gam = gen.exponential(1.0 / _IV_GAMMA_RATE, size=n)
    x_obs = 0.5 * z[:, 0] + 0.5 * e + gam
    y_obs = x_obs + e + delta
    return make_iv_regression_from_arrays(z, y_obs)


def make_iv_regression_from_arrays(z: np.ndarray, y_obs: np.ndarray) -> FccoProblem:
    z = np.asarray(z, dtype=float)
    y_obs = np.asarray(y_obs, dtype=float)
    n = z.shape[0]

    def sample_xi(gen):
        return int(gen.integers(n))

    def sample_eta_batch(i, count, gen):
        # conditional draw of X | Z_i: redraw confounder and gamma
        e = gen.standard_normal(count)
        gam = gen.exponential(1.0 / _IV_GAMMA_RATE, size=count)
        return 0.5 * z[i, 0] + 0.5 * e + gam

    def g_value(w, xs, i):
        return (w[0] * xs + w[1])[:, None]

    def g_jacobian(w, xs, i):
        return np.stack([xs, np.ones_like(xs)], axis=1)[:, None, :]

    def grad_f(yhat, i):
        return np.array([math.tanh(float(yhat[0]) - y_obs[i])])

    def f_value(yhat, i):
        u = float(yhat[0]) - y_obs[i]
        # stable log cosh
        au = abs(u)
        return au + math.log1p(math.exp(-2.0 * au)) - math.log(2.0)

    def inner_mean(w, i):
        mu = 0.5 * z[i, 0] + 1.0 / _IV_GAMMA_RATE
        return np.array([w[0] * mu + w[1]])

    mu_all = 0.5 * z[:, 0] + 1.0 / _IV_GAMMA_RATE

    def true_grad(w):
        t = np.tanh(w[0] * mu_all + w[1] - y_obs)
        return np.array([mu_all @ t, t.sum()]) / n

    prob = FccoProblem(
        dim_x=2,
        dim_y=1,
        sample_xi=sample_xi,
        sample_eta_batch=sample_eta_batch,
        g_value=g_value,
        g_jacobian=g_jacobian,
        grad_f=grad_f,
        f_value=f_value,
        inner_mean=inner_mean,
        true_grad=true_grad,
        name="iv_regression",
        n=n,
    )
    prob.extras.update({"z": z, "y_obs": y_obs})

    def _objective_vec(w):
        u = np.abs(w[0] * mu_all + w[1] - y_obs)
        return float(np.mean(u + np.log1p(np.exp(-2.0 * u)) - math.log(2.0)))

    prob.extras["objective_vec"] = _objective_vec
    return prob


# ---------------------------------------------------------------------------
# sinusoid few-shot regression (first-order meta-learning)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SinusoidTask:
    amplitude: float
    phase: float
    query_t: np.ndarray


def make_sinusoid_maml(
    alpha: float = 0.01,
    net_spec: nn.NetSpec | None = None,
    seed: int = 0,
    support_size: int = 10,
    query_size: int = 10,
    jacobian_mode: str = "identity",
) -> CsoProblem:
    """Few-shot sine regression: adapt a tanh net with one inner step.

    Tasks draw amplitude ~ U(0.1, 5), phase ~ U(0, pi) and data t ~ U(-5, 5).
    The inner map is one gradient step on the support loss,
    g(x) = x - alpha * grad l(x; support), and the outer loss is the query
    loss at the adapted weights.  ``jacobian_mode='identity'`` drops the
    second-order term (first-order semantics, the default);
    ``'hvp'`` applies I - alpha * Hessian via central finite-difference
    directional products and is exact up to the difference step.
    """
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if jacobian_mode not in ("identity", "hvp"):
        raise ValueError("jacobian_mode must be 'identity' or 'hvp'")
    spec = net_spec if net_spec is not None else nn.NetSpec((1, 40, 40, 1))
    d = nn.param_count(spec)

    def sample_xi(gen):
        return SinusoidTask(
            amplitude=float(gen.uniform(0.1, 5.0)),
            phase=float(gen.uniform(0.0, math.pi)),
            query_t=gen.uniform(-5.0, 5.0, size=query_size),
        )

    def sample_eta_batch(task, count, gen):
        return gen.uniform(-5.0, 5.0, size=(count, support_size))

    def adapt(x, support_t, task):
        _, grad = nn.loss_and_grad(spec, x, support_t, task.amplitude, task.phase)
        return x - alpha * grad

    def g_value(x, supports, task):
        return np.stack([adapt(x, row, task) for row in supports])

    def support_hvp(x, support_t, task, v):
        step = 1e-6 * max(1.0, float(np.linalg.norm(x))) / max(
            1e-12, float(np.linalg.norm(v))
        )
        _, gp = nn.loss_and_grad(spec, x + step * v, support_t, task.amplitude, task.phase)
        _, gm = nn.loss_and_grad(spec, x - step * v, support_t, task.amplitude, task.phase)
        return (gp - gm) / (2.0 * step)

    def jac_tvp(x, supports, task, v):
        if jacobian_mode == "identity":
            return np.asarray(v, dtype=float).copy()
        acc = np.zeros(d)
        for row in supports:
            acc += v - alpha * support_hvp(x, row, task, v)
        return acc / len(supports)

    def g_jacobian(x, supports, task):
        # materialized only for small nets (tests); the estimators use jac_tvp
        eye = np.eye(d)
        if jacobian_mode == "identity":
            return np.broadcast_to(eye, (len(supports), d, d)).copy()
        out = np.empty((len(supports), d, d))
        for k, row in enumerate(supports):
            cols = [eye[:, j] - alpha * support_hvp(x, row, task, eye[:, j]) for j in range(d)]
            out[k] = np.stack(cols, axis=1)
        return out

    def grad_f(y, task):
        _, grad = nn.loss_and_grad(spec, y, task.query_t, task.amplitude, task.phase)
        return grad

    def f_value(y, task):
        loss, _ = nn.loss_and_grad(spec, y, task.query_t, task.amplitude, task.phase)
        return loss

    prob = CsoProblem(
        dim_x=d,
        dim_y=d,
        sample_xi=sample_xi,
        sample_eta_batch=sample_eta_batch,
        g_value=g_value,
        g_jacobian=g_jacobian,
        grad_f=grad_f,
        f_value=f_value,
        jac_tvp=jac_tvp,
        name="sinusoid_maml",
    )
    prob.extras.update(
        {
            "alpha": alpha,
            "net_spec": spec,
            "support_size": support_size,
            "query_size": query_size,
            "jacobian_mode": jacobian_mode,
            "seed": seed,
        }
    )
    return prob


# ---------------------------------------------------------------------------
# empirical smoothness and moment constants
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SmoothnessConstants:
    """Empirical estimates of the regularity constants of one problem.

    ``a1..a4`` bound the 1st..4th derivatives of the outer-loss gradient
    (as the function the extrapolation operators are applied to);
    ``sigma2..sigma4`` are coordinate-summed central moments of the inner
    map values.  All values are estimates from finitely many probes and are
    labeled as such when printed.
    """

    a1: float
    a2: float
    a3: float
    a4: float
    sigma2: float
    sigma3: float
    sigma4: float
    C_f: float
    C_g: float
    L_f: float
    L_g: float
    sigma_g: float = 0.0
    zeta_g: float = 0.0
    L_F: float | None = None
    C_F: float | None = None
    Ltilde_F: float | None = None

    def __post_init__(self):
        if self.L_F is None:
            object.__setattr__(self, "L_F", self.L_g * self.C_f + self.C_g**2 * self.L_f)
        if self.C_F is None:
            object.__setattr__(self, "C_F", self.C_f * self.C_g)
        if self.Ltilde_F is None:
            object.__setattr__(
                self, "Ltilde_F", self.zeta_g * self.C_f + self.sigma_g * self.C_g * self.L_f
            )

    def describe(self) -> str:
        pairs = [
            ("a1", self.a1), ("a2", self.a2), ("a3", self.a3), ("a4", self.a4),
            ("sigma2", self.sigma2), ("sigma3", self.sigma3), ("sigma4", self.sigma4),
            ("C_f", self.C_f), ("C_g", self.C_g), ("L_f", self.L_f), ("L_g", self.L_g),
            ("L_F", self.L_F), ("C_F", self.C_F), ("Ltilde_F", self.Ltilde_F),
        ]
        body = ", ".join(f"{k}={v:.6g}" for k, v in pairs)
        return f"estimated constants (finite-probe estimates): {body}"


def _directional_derivatives(q, y0: np.ndarray, direction: np.ndarray, h: float):
    """Norms of directional derivatives 1..4 of q along a unit direction."""
    vals = {k: np.asarray(q(y0 + k * h * direction)) for k in range(-3, 4)}
    d1 = (vals[1] - vals[-1]) / (2 * h)
    d2 = (vals[1] - 2 * vals[0] + vals[-1]) / h**2
    d3 = (vals[2] - 2 * vals[1] + 2 * vals[-1] - vals[-2]) / (2 * h**3)
    d4 = (vals[2] - 4 * vals[1] + 6 * vals[0] - 4 * vals[-1] + vals[-2]) / h**4
    return tuple(float(np.linalg.norm(d)) for d in (d1, d2, d3, d4))


def compute_constants(
    problem: CsoProblem, probes: int = 50, rng: RngStream | None = None,
    moment_samples: int = 4000, fd_step: float = 1e-3,
) -> SmoothnessConstants:
    """Probe-and-maximize estimates of the problem's regularity constants."""
    if probes < 10:
        raise ValueError("need probes >= 10")
    rng = rng if rng is not None else RngStream(0, 1)
    gen = rng.generator
    d, p = problem.dim_x, problem.dim_y

    a = [0.0] * 4
    c_f = c_g = l_g = 0.0
    sig = {2: 0.0, 3: 0.0, 4: 0.0}
    sigma_g_sq = zeta_g_sq = 0.0

    for _ in range(probes):
        x = gen.standard_normal(d)
        xi = problem.sample_xi(gen)
        etas = problem.sample_eta_batch(xi, moment_samples, gen)
        vals = problem.g_value(x, etas, xi)
        centered = vals - vals.mean(axis=0)
        for k in (2, 3, 4):
            sig[k] = max(sig[k], abs(float(np.mean(np.sum(centered**k, axis=1)))))
        sigma_g_sq = max(sigma_g_sq, float(np.mean(np.sum(centered**2, axis=1))))

        jac = problem.g_jacobian(x, etas[: min(len(etas), 64)], xi)
        c_g = max(c_g, float(np.max(np.linalg.norm(jac, axis=(1, 2)))))
        jac_mean = jac.mean(axis=0)
        zeta_g_sq = max(
            zeta_g_sq, float(np.mean(np.sum((jac - jac_mean) ** 2, axis=(1, 2))))
        )

        # second probe point for the Lipschitz constant of the Jacobian
        x2 = x + gen.standard_normal(d)
        jac2 = problem.g_jacobian(x2, etas[: min(len(etas), 64)], xi)
        denom = float(np.linalg.norm(x2 - x))
        if denom > 0:
            l_g = max(
                l_g,
                float(np.max(np.linalg.norm(jac2 - jac, axis=(1, 2)))) / denom,
            )

        if problem.inner_mean is not None:
            y0 = np.asarray(problem.inner_mean(x, xi), dtype=float)
        else:
            y0 = vals.mean(axis=0)
        direction = gen.standard_normal(p)
        direction /= np.linalg.norm(direction)
        q = lambda y: problem.grad_f(np.atleast_1d(y), xi)  # noqa: E731
        c_f = max(c_f, float(np.linalg.norm(q(y0))))
        ders = _directional_derivatives(q, y0, direction, fd_step)
        a = [max(ai, di) for ai, di in zip(a, ders)]

    return SmoothnessConstants(
        a1=a[0], a2=a[1], a3=a[2], a4=a[3],
        sigma2=sig[2], sigma3=sig[3], sigma4=sig[4],
        C_f=c_f, C_g=c_g, L_f=a[0], L_g=l_g,
        sigma_g=math.sqrt(sigma_g_sq), zeta_g=math.sqrt(zeta_g_sq),
    )


# ---------------------------------------------------------------------------
# dataset dump/load
# ---------------------------------------------------------------------------


def dump_dataset(problem: CsoProblem, path) -> None:
    """Write the problem's fixed dataset as CSV for reproducibility audits."""
    fmt = lambda v: f"{float(v):.17g}"  # noqa: E731
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if problem.name == "invariant_lr":
            a, b = problem.extras["a"], problem.extras["b"]
            writer.writerow([f"a{j}" for j in range(a.shape[1])] + ["b"])
            for i in range(a.shape[0]):
                writer.writerow([fmt(v) for v in a[i]] + [fmt(b[i])])
        elif problem.name == "iv_regression":
            z, y = problem.extras["z"], problem.extras["y_obs"]
            writer.writerow(["z0", "z1", "y"])
            for i in range(z.shape[0]):
                writer.writerow([fmt(z[i, 0]), fmt(z[i, 1]), fmt(y[i])])
        else:
            raise ValueError(f"no dataset dump for problem {problem.name!r}")


def load_dataset(path) -> dict:
    """Read a dataset CSV written by :func:`dump_dataset` back into arrays."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = np.array([[float(v) for v in row] for row in reader])
    # contiguous copies so rebuilt problems reproduce gradients bit-for-bit
    if header[-1] == "b":
        return {"a": np.ascontiguousarray(rows[:, :-1]), "b": rows[:, -1].copy()}
    if header == ["z0", "z1", "y"]:
        return {"z": np.ascontiguousarray(rows[:, :2]), "y_obs": rows[:, 2].copy()}
    raise ValueError(f"unrecognized dataset header {header}")
