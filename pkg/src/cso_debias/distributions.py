"""Base sampling laws and the sample-averaged distribution.

All laws expose ``sample`` (one draw), ``sample_array`` (vectorized draws),
``mean`` and, where a closed form exists, exact central moments.
:class:`SampleAverage` wraps a base law and draws the arithmetic mean of
``m`` independent base draws; its central moments shrink with ``m`` as

    k=2:  sigma2 / m
    k=3:  sigma3 / m^2
    k=4:  sigma4 / m^3 + 3 (m-1) sigma2^2 / m^3

which :func:`predicted_moment_of_average` evaluates directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.interpolate import PchipInterpolator

from cso_debias.rng import RngStream

__all__ = [
    "Distribution",
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


class Distribution:
    """A samplable law with optional known moments."""

    #: None for scalar laws, the vector dimension otherwise.
    dim: int | None = None

    def sample_array(self, gen: np.random.Generator, n: int) -> np.ndarray:
        raise NotImplementedError

    def sample(self, gen: np.random.Generator):
        out = self.sample_array(gen, 1)
        return out[0] if self.dim is None else out[0, :]

    def mean(self):
        """E[delta]; raises if the law cannot produce it."""
        raise NotImplementedError

    def exact_central_moment(self, k: int) -> float:
        """Closed-form E[(delta - E[delta])^k]; raises ValueError if unknown.

        For vector laws the convention is the coordinate sum
        E[sum_i (delta - E[delta])_i^k].
        """
        raise ValueError(f"no closed-form central moment for {self!r}")


@dataclass(frozen=True)
class Normal(Distribution):
    mean_value: float = 0.0
    variance: float = 1.0

    def __post_init__(self):
        if self.variance < 0:
            raise ValueError("variance must be >= 0")

    def sample_array(self, gen, n):
        return gen.normal(self.mean_value, math.sqrt(self.variance), size=n)

    def mean(self):
        return self.mean_value

    def exact_central_moment(self, k):
        _check_moment_order(k)
        if k % 2 == 1:
            return 0.0
        # (k-1)!! * sigma^k
        return float(
            self.variance ** (k // 2) * math.prod(range(k - 1, 0, -2))
        )


@dataclass(frozen=True)
class Uniform(Distribution):
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError("need lo < hi")

    def sample_array(self, gen, n):
        return gen.uniform(self.lo, self.hi, size=n)

    def mean(self):
        return 0.5 * (self.lo + self.hi)

    def exact_central_moment(self, k):
        _check_moment_order(k)
        if k % 2 == 1:
            return 0.0
        half = 0.5 * (self.hi - self.lo)
        return half**k / (k + 1)


@dataclass(frozen=True)
class Exponential(Distribution):
    """Exponential with RATE parameter: mean is 1/rate."""

    rate: float

    def __post_init__(self):
        if self.rate <= 0:
            raise ValueError("rate must be > 0")

    def sample_array(self, gen, n):
        return gen.exponential(1.0 / self.rate, size=n)

    def mean(self):
        return 1.0 / self.rate

    # central moments of Exp(1), scaled by rate^-k
    _UNIT_CENTRAL = {2: 1.0, 3: 2.0, 4: 9.0, 5: 44.0, 6: 265.0}

    def exact_central_moment(self, k):
        _check_moment_order(k)
        return self._UNIT_CENTRAL[k] / self.rate**k


@dataclass(frozen=True)
class Degenerate(Distribution):
    value: float

    def sample_array(self, gen, n):
        return np.full(n, self.value, dtype=float)

    def mean(self):
        return self.value

    def exact_central_moment(self, k):
        _check_moment_order(k)
        return 0.0


@dataclass(frozen=True)
class MultivariateNormalDiag(Distribution):
    """Isotropic Gaussian vector: N(mean, variance * I)."""

    mean_vector: tuple
    variance: float

    def __post_init__(self):
        if self.variance < 0:
            raise ValueError("variance must be >= 0")
        object.__setattr__(self, "mean_vector", tuple(float(v) for v in self.mean_vector))

    @property
    def dim(self):
        return len(self.mean_vector)

    def sample_array(self, gen, n):
        mu = np.asarray(self.mean_vector)
        return mu + math.sqrt(self.variance) * gen.standard_normal((n, self.dim))

    def mean(self):
        return np.asarray(self.mean_vector)

    def exact_central_moment(self, k):
        _check_moment_order(k)
        return self.dim * Normal(0.0, self.variance).exact_central_moment(k)


@dataclass(frozen=True)
class DensityOnInterval(Distribution):
    """A scalar law given by a pdf on [lo, hi], sampled by inverse CDF.

    When ``inverse_cdf`` is supplied it is used directly (exact sampling);
    otherwise a monotone interpolant of the numerically integrated CDF is
    inverted and polished with Newton steps to |F(x) - u| <= 1e-12.
    """

    pdf: Callable[[np.ndarray], np.ndarray]
    lo: float
    hi: float
    inverse_cdf: Callable[[np.ndarray], np.ndarray] | None = None
    _tables: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError("need lo < hi")

    # -- numeric CDF machinery -------------------------------------------
    _PANELS = 2048
    _GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(12)

    def _panel_integrals(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Gauss-Legendre integrals of the pdf over [a_i, b_i]."""
        mid = 0.5 * (a + b)
        half = 0.5 * (b - a)
        x = mid[:, None] + half[:, None] * self._GL_NODES[None, :]
        return half * (self.pdf(x) @ self._GL_WEIGHTS)

    def _ensure_tables(self):
        if self._tables:
            return
        edges = np.linspace(self.lo, self.hi, self._PANELS + 1)
        pieces = self._panel_integrals(edges[:-1], edges[1:])
        cdf = np.concatenate([[0.0], np.cumsum(pieces)])
        total = cdf[-1]
        if not math.isfinite(total) or total <= 0:
            raise ValueError("pdf does not integrate to a positive value")
        cdf /= total
        cdf[-1] = 1.0
        # strictly increasing knots are required for the inverse interpolant
        keep = np.concatenate([[True], np.diff(cdf) > 0])
        keep[0] = keep[-1] = True
        self._tables["norm"] = total
        self._tables["edges"] = edges
        self._tables["cdf"] = cdf
        self._tables["inv"] = PchipInterpolator(cdf[keep], edges[keep])
        # first raw moment, for mean()
        mids = 0.5 * (edges[:-1] + edges[1:])
        halfw = 0.5 * (edges[1] - edges[0])
        nodes = mids[:, None] + halfw * self._GL_NODES[None, :]
        m1 = halfw * np.sum((nodes * self.pdf(nodes)) @ self._GL_WEIGHTS)
        self._tables["mean"] = m1 / total

    def _cdf(self, x: np.ndarray) -> np.ndarray:
        self._ensure_tables()
        edges, cdf, norm = self._tables["edges"], self._tables["cdf"], self._tables["norm"]
        idx = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, len(edges) - 2)
        return cdf[idx] + self._panel_integrals(edges[idx], x) / norm

    def _invert(self, u: np.ndarray) -> np.ndarray:
        # Newton converges slowly where the density vanishes at an endpoint
        # (steps only halve the error), hence the generous iteration cap.
        self._ensure_tables()
        x = np.asarray(self._tables["inv"](u), dtype=float)
        for _ in range(60):
            resid = self._cdf(x) - u
            if np.max(np.abs(resid)) <= 1e-12:
                break
            dens = np.maximum(self.pdf(x) / self._tables["norm"], 1e-300)
            x = np.clip(x - resid / dens, self.lo, self.hi)
        return x

    # -- Distribution API -------------------------------------------------
    def sample_array(self, gen, n):
        u = gen.random(n)
        if self.inverse_cdf is not None:
            return np.asarray(self.inverse_cdf(u), dtype=float)
        return self._invert(u)

    def mean(self):
        self._ensure_tables()
        return self._tables["mean"]

    def exact_central_moment(self, k):
        """Central moment by adaptive quadrature of the (normalized) pdf."""
        _check_moment_order(k)
        from scipy.integrate import quad

        norm = quad(lambda t: self.pdf(np.asarray(t)), self.lo, self.hi, limit=200)[0]
        mu = quad(lambda t: t * self.pdf(np.asarray(t)), self.lo, self.hi, limit=200)[0] / norm
        val = quad(
            lambda t: (t - mu) ** k * self.pdf(np.asarray(t)), self.lo, self.hi, limit=200
        )[0]
        return val / norm


def ramp_density() -> DensityOnInterval:
    """The linearly increasing density p(x) = x/2 on [0, 2].

    Its CDF is x^2/4, so the inverse CDF is 2*sqrt(u), used in closed form.
    """
    return DensityOnInterval(
        pdf=lambda x: np.asarray(x) / 2.0,
        lo=0.0,
        hi=2.0,
        inverse_cdf=lambda u: 2.0 * np.sqrt(u),
    )


@dataclass(frozen=True)
class SampleAverage(Distribution):
    """The law of the mean of ``m`` i.i.d. draws from ``base``.

    One draw consumes exactly ``m`` base draws; m=1 reduces to the base law
    bit-for-bit.
    """

    base: Distribution
    m: int

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be >= 1")

    @property
    def dim(self):
        return self.base.dim

    def sample_array(self, gen, n):
        if self.base.dim is None:
            return self.base.sample_array(gen, n * self.m).reshape(n, self.m).mean(axis=1)
        flat = self.base.sample_array(gen, n * self.m)
        return flat.reshape(n, self.m, self.base.dim).mean(axis=1)

    def mean(self):
        return self.base.mean()

    def exact_central_moment(self, k):
        _check_moment_order(k)
        if k <= 4:
            return predicted_moment_of_average(
                sigma2=self.base.exact_central_moment(2),
                sigma3=self.base.exact_central_moment(3),
                sigma4=self.base.exact_central_moment(4),
                m=self.m,
                k=k,
            )
        if k == 5:
            s2 = self.base.exact_central_moment(2)
            s3 = self.base.exact_central_moment(3)
            s5 = self.base.exact_central_moment(5)
            return s5 / self.m**4 + 10 * (self.m - 1) * s3 * s2 / self.m**4
        raise ValueError("closed form for averaged law implemented for k <= 5")


def _check_moment_order(k: int) -> None:
    if not 2 <= int(k) <= 6:
        raise ValueError("moment order k must be in 2..6")


# ---------------------------------------------------------------------------
# module-level operations
# ---------------------------------------------------------------------------


def draw(dist: Distribution, rng: RngStream):
    """One sample from the law; advancing ``rng`` is the only side effect."""
    return dist.sample(rng.generator)


def draw_mean(avg: SampleAverage, rng: RngStream):
    """Mean of ``avg.m`` i.i.d. base draws, consuming exactly that many."""
    return avg.sample(rng.generator)


def central_moment(
    dist_or_samples,
    k: int,
    rng: RngStream | None = None,
    n_samples: int | None = None,
    method: str = "auto",
) -> float:
    """E[(delta - E[delta])^k], exactly when possible or by Monte Carlo.

    ``dist_or_samples`` may be a :class:`Distribution` or an array of draws.
    ``method`` is one of ``auto`` (closed form if available), ``exact`` or
    ``mc``.  Vector laws use the coordinate-sum convention.
    """
    _check_moment_order(k)
    if isinstance(dist_or_samples, np.ndarray) or isinstance(dist_or_samples, (list, tuple)):
        return empirical_central_moment(np.asarray(dist_or_samples, dtype=float), k)
    dist = dist_or_samples
    if method not in ("auto", "exact", "mc"):
        raise ValueError("method must be auto, exact or mc")
    if method in ("auto", "exact"):
        try:
            return float(dist.exact_central_moment(k))
        except ValueError:
            if method == "exact":
                raise
    if rng is None or n_samples is None:
        raise ValueError("Monte Carlo moment estimation needs rng and n_samples")
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    return empirical_central_moment(dist.sample_array(rng.generator, int(n_samples)), k)


def empirical_central_moment(samples: np.ndarray, k: int) -> float:
    """Sample central moment; coordinate-summed for 2-d sample arrays."""
    _check_moment_order(k)
    if samples.ndim == 1:
        return float(np.mean((samples - samples.mean()) ** k))
    centered = samples - samples.mean(axis=0)
    return float(np.mean(np.sum(centered**k, axis=1)))


def predicted_moment_of_average(
    sigma2: float, sigma3: float = 0.0, sigma4: float = 0.0, *, m: int, k: int
) -> float:
    """Central moment of the m-sample average from base central moments."""
    if m < 1:
        raise ValueError("m must be >= 1")
    if k == 2:
        return sigma2 / m
    if k == 3:
        return sigma3 / m**2
    if k == 4:
        return sigma4 / m**3 + 3.0 * (m - 1) * sigma2**2 / m**3
    raise ValueError("supported moment orders are k in {2, 3, 4}")
