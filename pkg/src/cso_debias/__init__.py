"""Debiased stochastic gradient estimation for nested (conditional) stochastic optimization.

The package provides:

- counter-based deterministic RNG substreams (:mod:`cso_debias.rng`),
- the base sampling laws and sample-averaged distributions (:mod:`cso_debias.distributions`),
- stochastic extrapolation operators of orders 1-3 plus a bias/variance
  measurement harness (:mod:`cso_debias.extrapolation`),
- synthetic nested-optimization problems (:mod:`cso_debias.problems`),
- gradient estimators with and without extrapolation, for both the
  streaming-outer-variable and the finite-sum settings
  (:mod:`cso_debias.estimators_cso`, :mod:`cso_debias.estimators_fcco`),
- an optimization runner with sample-budget accounting and a
  rate-formula hyperparameter suggester (:mod:`cso_debias.runner`),
- an experiment CLI emitting CSV traces (:mod:`cso_debias.cli`).
"""

from cso_debias.rng import RngStream
from cso_debias.distributions import (
    Normal,
    Uniform,
    Exponential,
    DensityOnInterval,
    MultivariateNormalDiag,
    Degenerate,
    SampleAverage,
    ramp_density,
    draw,
    draw_mean,
    central_moment,
    predicted_moment_of_average,
)

__version__ = "0.1.0"

__all__ = [
    "RngStream",
    "Normal",
    "Uniform",
    "Exponential",
    "DensityOnInterval",
    "MultivariateNormalDiag",
    "Degenerate",
    "SampleAverage",
    "ramp_density",
    "draw",
    "draw_mean",
    "central_moment",
    "predicted_moment_of_average",
]
