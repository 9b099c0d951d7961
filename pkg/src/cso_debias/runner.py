"""Optimization loop, evaluation metrics, budget ledger, hyperparameter rules.

A run executes T steps x <- x - gamma * G (or Adam updates when requested),
records (iteration, cumulative inner/outer sample counts, metric) rows for
CSV emission, and also reports the iterate at a uniformly random step (the
output convention of the convergence guarantees) alongside the last
iterate.  The suggester evaluates the convergence-rate hyperparameter
formulas with all unspecified rate constants set to 1, exposed as a single
user multiplier.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from cso_debias import neuralnet as nn
from cso_debias.estimators_cso import (
    CsoHyperParams,
    SampleLedger,
    bsgd_gradient,
    ebsgd_gradient,
    spider_step,
)
from cso_debias.estimators_fcco import FccoHyperParams, nestedvr_step, enestedvr_step
from cso_debias.problems import (
    CsoProblem,
    FccoProblem,
    SmoothnessConstants,
    make_invariant_lr,
    make_iv_regression,
    make_sinusoid_maml,
)
from cso_debias.rng import ROLE_EVAL, ROLE_INIT, ROLE_OUTPUT, RngStream

__all__ = [
    "RunConfig",
    "RunTrace",
    "ConfigError",
    "DivergenceError",
    "HyperParams",
    "ALGORITHMS",
    "build_problem",
    "run",
    "true_grad_norm",
    "compute_Ce",
    "suggest_hyperparams",
]

ALGORITHMS = ("bsgd", "ebsgd", "bspiderboost", "ebspiderboost", "nestedvr", "enestedvr")
_FCCO_ALGOS = ("nestedvr", "enestedvr")
METRICS = ("dist_to_ref", "true_grad_norm", "eval_loss")
DIVERGENCE_LIMIT = 1e8


class ConfigError(ValueError):
    """A run configuration field failed validation; the message names it."""


class DivergenceError(RuntimeError):
    """The run metric exceeded the divergence guard."""


@dataclass
class RunConfig:
    problem: str
    algorithm: str
    iterations: int
    seed: int = 0
    eval_every: int = 10
    metric: str = "dist_to_ref"
    optimizer: str = "sgd"
    problem_params: dict = field(default_factory=dict)
    hyperparams: dict = field(default_factory=dict)
    optimizer_params: dict = field(default_factory=dict)
    max_inner_samples: int | None = None

    def validate(self) -> "RunConfig":
        if self.problem not in PROBLEM_BUILDERS:
            raise ConfigError(
                f"problem: unknown preset {self.problem!r}; "
                f"expected one of {sorted(PROBLEM_BUILDERS)}"
            )
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(
                f"algorithm: unknown {self.algorithm!r}; expected one of {ALGORITHMS}"
            )
        if self.iterations < 1:
            raise ConfigError("iterations: must be >= 1")
        if self.eval_every < 1:
            raise ConfigError("eval_every: must be >= 1")
        if self.metric not in METRICS:
            raise ConfigError(f"metric: unknown {self.metric!r}; expected one of {METRICS}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError("optimizer: must be 'sgd' or 'adam'")
        hp = self.hyperparams
        for key in ("gamma",):
            if key in hp and not (isinstance(hp[key], (int, float)) and hp[key] > 0):
                raise ConfigError(f"{key}: must be a positive number")
        for key in ("m", "B1", "B2", "S1", "S2"):
            if key in hp and (not isinstance(hp[key], int) or hp[key] < 1):
                raise ConfigError(f"{key}: must be a positive integer")
        for key in ("p_out", "p_in"):
            if key in hp and not 0.0 < float(hp[key]) <= 1.0:
                raise ConfigError(f"{key}: must be in (0, 1]")
        if "order" in hp and hp["order"] not in (1, 2, 3):
            raise ConfigError("order: must be 1, 2 or 3")
        if self.max_inner_samples is not None and self.max_inner_samples < 1:
            raise ConfigError("max_inner_samples: must be >= 1 when given")
        return self

    def to_dict(self) -> dict:
        return {
            "problem": self.problem,
            "algorithm": self.algorithm,
            "iterations": self.iterations,
            "seed": self.seed,
            "eval_every": self.eval_every,
            "metric": self.metric,
            "optimizer": self.optimizer,
            "problem_params": dict(self.problem_params),
            "hyperparams": dict(self.hyperparams),
            "optimizer_params": dict(self.optimizer_params),
            "max_inner_samples": self.max_inner_samples,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"{sorted(unknown)[0]}: unknown configuration field")
        missing = {"problem", "algorithm", "iterations"} - set(data)
        if missing:
            raise ConfigError(f"{sorted(missing)[0]}: required field missing")
        return cls(**data).validate()


@dataclass
class RunTrace:
    """Metric time series plus the dual output convention.

    ``rows`` hold (iteration, cumulative inner samples, cumulative outer
    samples, metric value, wallclock seconds); counters are nondecreasing
    and row 0 records the initial point.  ``x_output`` is the iterate at
    the uniformly drawn ``output_index``; ``x_last`` the final iterate.
    """

    algorithm: str
    metric: str
    rows: list = field(default_factory=list)
    output_index: int = 0
    x_output: np.ndarray | None = None
    x_last: np.ndarray | None = None

    @property
    def final_metric(self) -> float:
        return self.rows[-1][3]

    def write_csv(self, path) -> None:
        """Pinned schema: iter, inner_samples, outer_samples, error."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write("iter,inner_samples,outer_samples,error\n")
            for it, inner, outer, value, _wall in self.rows:
                fh.write(f"{it},{inner},{outer},{value:.17g}\n")


PROBLEM_BUILDERS = {
    "invariant_lr": make_invariant_lr,
    "iv_regression": make_iv_regression,
    "sinusoid_maml": make_sinusoid_maml,
}


def build_problem(name: str, params: dict | None = None) -> CsoProblem:
    if name not in PROBLEM_BUILDERS:
        raise ConfigError(f"problem: unknown preset {name!r}")
    return PROBLEM_BUILDERS[name](**(params or {}))


def _initial_point(problem: CsoProblem, root: RngStream) -> np.ndarray:
    if problem.name == "sinusoid_maml":
        return nn.init_weights(problem.extras["net_spec"], root.substream(ROLE_INIT))
    return np.zeros(problem.dim_x)


def _maml_eval_tasks(problem, root, n_tasks=128):
    gen = root.substream(ROLE_EVAL).generator
    tasks = []
    for _ in range(n_tasks):
        task = problem.sample_xi(gen)
        support = problem.sample_eta_batch(task, 1, gen)[0]
        tasks.append((task, support))
    return tasks


def _maml_eval_mse(problem, x, tasks):
    """Full mean-squared error on query sets after one adaptation step."""
    spec = problem.extras["net_spec"]
    alpha = problem.extras["alpha"]
    total = 0.0
    for task, support in tasks:
        _, grad = nn.loss_and_grad(spec, x, support, task.amplitude, task.phase)
        adapted = x - alpha * grad
        preds = nn.forward_batch(spec, adapted, task.query_t)
        targets = task.amplitude * np.sin(task.query_t - task.phase)
        total += float(np.mean((preds - targets) ** 2))
    return total / len(tasks)


def _make_metric(problem, config, root):
    if config.metric == "dist_to_ref":
        x_ref = problem.reference_minimizer()
        return lambda x: float(np.linalg.norm(x - x_ref))
    if config.metric == "true_grad_norm":
        return lambda x: true_grad_norm(problem, x)
    # eval_loss
    if problem.name == "sinusoid_maml":
        tasks = _maml_eval_tasks(problem, root)
        return lambda x: _maml_eval_mse(problem, x, tasks)
    if isinstance(problem, FccoProblem):
        return lambda x: float(problem.objective_value(x))
    raise ConfigError("metric: eval_loss needs an exact objective or a meta problem")


def _cso_hyperparams(hp: dict) -> CsoHyperParams:
    return CsoHyperParams(
        m=hp.get("m", 1),
        gamma=hp["gamma"],
        B1=hp.get("B1", 1),
        B2=hp.get("B2", 1),
        p_out=hp.get("p_out", 1.0),
        order=hp.get("order", 2),
    )


def _fcco_hyperparams(hp: dict) -> FccoHyperParams:
    return FccoHyperParams(
        gamma=hp["gamma"],
        B1=hp["B1"],
        B2=hp.get("B2", hp["B1"]),
        p_out=hp.get("p_out", 1.0),
        S1=hp["S1"],
        S2=hp.get("S2", hp["S1"]),
        p_in=hp.get("p_in", 1.0),
        order=hp.get("order", 2),
    )


def run(config: RunConfig, problem: CsoProblem | None = None) -> RunTrace:
    """Execute one configured optimization run and return its trace.

    A prebuilt ``problem`` may be supplied so sweeps share one dataset and
    reference minimizer.  Aborts with :class:`DivergenceError` when the
    metric exceeds 1e8.  Reruns with identical config and problem produce
    identical traces.
    """
    config.validate()
    if "gamma" not in config.hyperparams:
        raise ConfigError("gamma: required hyperparameter missing")
    if problem is None:
        problem = build_problem(config.problem, config.problem_params)
    if config.algorithm in _FCCO_ALGOS and not isinstance(problem, FccoProblem):
        raise ConfigError("algorithm: finite-sum algorithms require a finite-sum problem")

    root = RngStream(config.seed)
    x = _initial_point(problem, root)
    metric_fn = _make_metric(problem, config, root)
    ledger = SampleLedger()
    gamma = float(config.hyperparams["gamma"])
    extrapolated = config.algorithm.startswith("e")

    adam_state = None
    if config.optimizer == "adam":
        op = config.optimizer_params
        adam_state = nn.AdamState.zeros(
            problem.dim_x,
            lr=op.get("lr", 1e-3),
            beta1=op.get("beta1", 0.9),
            beta2=op.get("beta2", 0.999),
            eps=op.get("eps", 1e-8),
        )

    spider_state = None
    fcco_states: dict = {}
    fcco_carry = None
    if config.algorithm in ("bspiderboost", "ebspiderboost"):
        hp_cso = _cso_hyperparams(config.hyperparams)
    elif config.algorithm in _FCCO_ALGOS:
        hp_fcco = _fcco_hyperparams(config.hyperparams)
    else:
        m = config.hyperparams.get("m", 1)
        order = config.hyperparams.get("order", 2)

    # uniformly random output index over {0, .., T-1}, drawn up front so the
    # corresponding iterate can be captured without storing the whole path
    output_index = int(root.substream(ROLE_OUTPUT).generator.integers(config.iterations))

    start = time.perf_counter()
    trace = RunTrace(algorithm=config.algorithm, metric=config.metric)
    value0 = metric_fn(x)
    trace.rows.append((0, 0, 0, value0, 0.0))
    x_output = x.copy()

    for t in range(config.iterations):
        if t == output_index:
            x_output = x.copy()
        rng_t = root.substream(0x1000, t)
        if config.algorithm in ("bsgd", "ebsgd"):
            batch = config.hyperparams.get("B1", 1)
            if batch > 1:
                # outer-batched variant: average over a fresh batch of outer
                # samples each step (meta-batch training)
                hp = CsoHyperParams(m=m, gamma=gamma, B1=batch, B2=batch, p_out=1.0, order=order)
                grad, _ = spider_step(
                    None, problem, x, hp, extrapolated, rng_t, t=0, ledger=ledger
                )
            elif config.algorithm == "bsgd":
                grad = bsgd_gradient(problem, x, m, rng_t, ledger)
            else:
                grad = ebsgd_gradient(problem, x, m, order, rng_t, ledger)
        elif config.algorithm in ("bspiderboost", "ebspiderboost"):
            grad, spider_state = spider_step(
                spider_state, problem, x, hp_cso, extrapolated, rng_t, t, ledger
            )
        else:
            step_fn = enestedvr_step if extrapolated else nestedvr_step
            grad, fcco_states, fcco_carry = step_fn(
                fcco_states, fcco_carry, problem, x, hp_fcco, t, rng_t, ledger
            )

        clip = config.optimizer_params.get("clip")
        if clip is not None:
            norm = float(np.linalg.norm(grad))
            if norm > clip:
                grad = grad * (clip / norm)
        if adam_state is not None:
            if "lr_final" in config.optimizer_params and config.iterations > 1:
                # hold the peak rate, then decay linearly to lr_final
                start = int(config.optimizer_params.get("lr_decay_start", 0))
                span = max(1, config.iterations - 1 - start)
                frac = min(1.0, max(0.0, (t - start) / span))
                lr_t = (1 - frac) * config.optimizer_params.get("lr", 1e-3) + (
                    frac * config.optimizer_params["lr_final"]
                )
                adam_state = replace(adam_state, lr=lr_t)
            delta, adam_state = nn.adam_step(adam_state, grad)
            x = x + delta
        else:
            x = x - gamma * grad

        budget_hit = (
            config.max_inner_samples is not None
            and ledger.inner >= config.max_inner_samples
        )
        last = t == config.iterations - 1 or budget_hit
        if (t + 1) % config.eval_every == 0 or last:
            value = metric_fn(x)
            trace.rows.append(
                (t + 1, ledger.inner, ledger.outer, value, time.perf_counter() - start)
            )
            if not math.isfinite(value) or value > DIVERGENCE_LIMIT:
                raise DivergenceError(
                    f"{config.algorithm} diverged at iteration {t + 1}: "
                    f"{config.metric} = {value:.3g} exceeds {DIVERGENCE_LIMIT:.0e} "
                    f"(gamma={gamma:.3g})"
                )
        if budget_hit:
            break

    trace.output_index = output_index
    trace.x_output = x_output
    trace.x_last = x
    return trace


def true_grad_norm(
    problem: CsoProblem,
    x: np.ndarray,
    mc_outer: int = 2000,
    mc_inner: int = 500,
    rng: RngStream | None = None,
) -> float:
    """Squared gradient norm of the smoothed objective at ``x``.

    Uses the problem's exact gradient oracle when available, otherwise a
    high-budget Monte Carlo estimate averaging ``mc_outer`` per-sample
    gradients with ``mc_inner`` conditional draws each.
    """
    if problem.true_grad is not None:
        g = np.asarray(problem.true_grad(x), dtype=float)
        return float(g @ g)
    rng = rng if rng is not None else RngStream(0, 0xE0A1)
    gen = rng.generator
    acc = np.zeros(problem.dim_x)
    for _ in range(mc_outer):
        xi = problem.sample_xi(gen)
        etas_val = problem.sample_eta_batch(xi, mc_inner, gen)
        y = problem.g_value(x, etas_val, xi).mean(axis=0)
        v = problem.grad_f(y, xi)
        etas_jac = problem.sample_eta_batch(xi, mc_inner, gen)
        acc += problem.jacobian_tvp(x, etas_jac, xi, v)
    g = problem.add_penalty(x, acc / mc_outer)
    g = np.asarray(g, dtype=float)
    return float(g @ g)


def compute_Ce(a3: float, a4: float, sigma2: float, sigma3: float, sigma4: float) -> float:
    """Leading constant of the order-2 extrapolation bias bound.

    (8 a3 sigma3 + 18 a4 sigma2^2 + 5 a4 sigma4) / 96, for a3/a4 the third
    and fourth derivative bounds of the extrapolated gradient map and
    sigma_k the inner-value central moment bounds.
    """
    for name, v in (("a3", a3), ("a4", a4), ("sigma2", sigma2),
                    ("sigma3", sigma3), ("sigma4", sigma4)):
        if v < 0:
            raise ValueError(f"{name} must be >= 0")
    return (8.0 * a3 * sigma3 + 18.0 * a4 * sigma2**2 + 5.0 * a4 * sigma4) / 96.0


@dataclass(frozen=True)
class HyperParams:
    """A suggested hyperparameter bundle; unused fields are None."""

    gamma: float
    order: int
    m: int | None = None
    B1: int | None = None
    B2: int | None = None
    p_out: float | None = None
    S1: int | None = None
    S2: int | None = None
    p_in: float | None = None

    def describe(self) -> str:
        parts = []
        for name in ("m", "B1", "B2", "p_out", "S1", "S2", "p_in"):
            v = getattr(self, name)
            if v is not None:
                parts.append(f"{name}={v:.6g}" if isinstance(v, float) else f"{name}={v}")
        parts.append(f"gamma={self.gamma:.6g}")
        parts.append(f"order={self.order}")
        return " ".join(parts)


_THEOREM_ALIASES = {
    "ebsgd": "ebsgd",
    "ebsb": "ebsb",
    "ebspiderboost": "ebsb",
    "envr": "envr",
    "enestedvr": "envr",
    "envr_small_n": "envr_small_n",
    "envr_large_n": "envr_large_n",
    "nvr": "nvr",
    "nestedvr": "nvr",
}


def suggest_hyperparams(
    theorem: str,
    constants: SmoothnessConstants,
    epsilon: float,
    n: int | None = None,
    scale: float = 1.0,
) -> HyperParams:
    """Evaluate a convergence-guarantee hyperparameter rule.

    The rate statements fix hyperparameters only up to constants; all are
    set to 1 here and ``scale`` multiplies every batch-size formula (and
    the inner refresh probability) uniformly.  The finite-sum rules need
    ``n``; ``envr`` picks its small-/large-n branch by comparing n with
    epsilon^(-2/3).
    """
    key = _THEOREM_ALIASES.get(theorem.lower().replace("-", "_"))
    if key is None:
        raise ValueError(f"unknown theorem rule {theorem!r}")
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    if scale <= 0:
        raise ValueError("scale must be > 0")
    L_F = constants.L_F
    Lt = constants.Ltilde_F
    if L_F <= 0:
        raise ValueError("L_F must be > 0")
    ce_cg = (
        compute_Ce(
            constants.a3, constants.a4, constants.sigma2,
            abs(constants.sigma3), constants.sigma4,
        )
        * constants.C_g
    )

    def size(v: float) -> int:
        return max(1, math.ceil(scale * v))

    if key == "ebsgd":
        return HyperParams(
            gamma=1.0 / (2.0 * L_F), order=2, m=size(ce_cg / math.sqrt(epsilon))
        )
    if key == "ebsb":
        m = size(ce_cg / math.sqrt(epsilon))
        B1 = size((Lt**2 / m + constants.C_F**2) / epsilon**2)
        B2 = max(1, math.ceil(math.sqrt(B1)))
        return HyperParams(
            gamma=1.0 / (13.0 * L_F), order=2, m=m, B1=B1, B2=B2, p_out=1.0 / B2
        )
    if key in ("envr", "envr_small_n", "envr_large_n", "nvr") and n is None:
        raise ValueError("finite-sum rules need n")
    if key == "envr":
        key = "envr_small_n" if n <= epsilon ** (-2.0 / 3.0) else "envr_large_n"
    if key == "envr_small_n":
        return HyperParams(
            gamma=1.0 / (2.0 * L_F),
            order=2,
            B1=n,
            B2=n,
            p_out=1.0,
            S1=size(Lt**2 / epsilon**2),
            S2=min(size(Lt / epsilon), size(Lt**2 / epsilon**2)),
            p_in=min(1.0, scale * epsilon / Lt) if Lt > 0 else 1.0,
        )
    if key == "envr_large_n":
        B2 = max(1, math.ceil(math.sqrt(n)))
        s = size(max(ce_cg / math.sqrt(epsilon), Lt**2 / (n * epsilon**2)))
        return HyperParams(
            gamma=1.0 / (2.0 * L_F),
            order=2,
            B1=n,
            B2=B2,
            p_out=1.0 / B2,
            S1=s,
            S2=s,
            p_in=1.0,
        )
    # nvr
    B2 = max(1, math.ceil(math.sqrt(n)))
    return HyperParams(
        gamma=min(1.0 / (2.0 * L_F), 1.0 / (math.sqrt(n) * L_F)),
        order=1,
        B1=n,
        B2=B2,
        p_out=1.0 / B2,
        S1=size(Lt**2 / epsilon**2),
        S2=min(size(Lt / epsilon), size(Lt**2 / epsilon**2)),
        p_in=min(1.0, scale * epsilon / Lt) if Lt > 0 else 1.0,
    )
