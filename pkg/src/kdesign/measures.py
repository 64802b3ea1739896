"""Discrete signed measures, potentials, energies and discrepancies.

The uniform probability measure on the unit cube has closed-form potentials
``P_mu(x) = S(x) + S(1 - x) + T(x)`` and energies for the one-dimensional
kernel families below.  Tensor-product kernels inherit product forms:
``E = prod_i E_i`` and ``P(x) = prod_i P_i(x_i)``.

Other measures, or radial kernels in dimension larger than one, go through
:class:`MonteCarloProvider`, which averages the kernel over a fixed sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import singledispatch
from typing import Callable, Protocol

import numpy as np
from scipy import special

from kdesign.kernels import (
    DefinitenessClass,
    DistanceInduced,
    Exponential,
    GeneralizedMultiquadric,
    Kernel,
    Matern32,
    Matern52,
    NegDistance,
    RieszLog,
    RieszSingular,
    ShiftedInverseDistance,
    SquaredExponential,
    TensorProduct,
    TriangularOneMinus,
    as_points,
)

NONNEG_TOL = 1e-12
"""Absolute tolerance below zero accepted for energies that must be nonnegative."""


class DefinitenessError(ArithmeticError):
    """Raised when a squared discrepancy is negative beyond rounding."""


# ---------------------------------------------------------------------------
# Discrete signed measures
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DiscreteSignedMeasure:
    """Finite signed measure ``sum_i w_i delta_{x_i}`` with distinct support points."""

    support: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        support = as_points(self.support)
        weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if support.shape[0] != weights.shape[0]:
            raise ValueError("support and weights have different lengths")
        if support.shape[0] and np.unique(support, axis=0).shape[0] != support.shape[0]:
            raise ValueError("support points must be pairwise distinct")
        support.flags.writeable = False
        weights.flags.writeable = False
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def empirical(cls, points) -> DiscreteSignedMeasure:
        """Uniform probability measure on the rows of ``points``."""
        points = as_points(points)
        n = points.shape[0]
        return cls(points, np.full(n, 1.0 / n))

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.support.shape[1]

    def total_mass(self) -> float:
        """Sum of the weights accumulated left to right."""
        return sum(self.weights.tolist(), 0.0)

    def scaled(self, factor: float) -> DiscreteSignedMeasure:
        return DiscreteSignedMeasure(self.support, factor * self.weights)

    def potential(self, kernel: Kernel, X) -> np.ndarray:
        """Potential ``P_xi(x) = sum_i w_i K(x, x_i)`` at the rows of ``X``."""
        return kernel(X, self.support) @ self.weights

    def _key(self) -> bytes:
        return self.support.tobytes() + self.weights.tobytes()


def mixture(a: DiscreteSignedMeasure, b: DiscreteSignedMeasure, ca: float = 1.0, cb: float = 1.0):
    """Measure ``ca * a + cb * b`` with coincident support points merged."""
    points = np.vstack([a.support, b.support])
    weights = np.concatenate([ca * a.weights, cb * b.weights])
    uniq, inverse = np.unique(points, axis=0, return_inverse=True)
    merged = np.zeros(uniq.shape[0])
    np.add.at(merged, inverse.reshape(-1), weights)
    return DiscreteSignedMeasure(uniq, merged)


# ---------------------------------------------------------------------------
# Closed-form potentials for the uniform measure on [0, 1]
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UniformPotentialForm:
    """Potential and energy of the uniform measure on [0, 1].

    ``P(x) = S(x) + S(1 - x) + T(x)``; ``T`` is ``None`` for translation
    invariant kernels.
    """

    energy: float
    S: Callable[[np.ndarray], np.ndarray]
    T: Callable[[np.ndarray], np.ndarray] | None = None

    def potential(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if np.any(x < 0) or np.any(x > 1):
            raise ValueError("closed-form uniform potentials need points in [0, 1]")
        out = self.S(x) + self.S(1.0 - x)
        if self.T is not None:
            out = out + self.T(x)
        return out


@singledispatch
def uniform_form(kernel: Kernel) -> UniformPotentialForm:
    """Closed-form :class:`UniformPotentialForm` of a one-dimensional kernel."""
    raise NotImplementedError(f"no closed-form uniform potential for {kernel!r}")


@uniform_form.register
def _(k: Exponential):
    th = k.theta
    return UniformPotentialForm(
        energy=2.0 * (th + math.expm1(-th)) / th**2,
        S=lambda x: -np.expm1(-th * x) / th,
    )


@uniform_form.register
def _(k: Matern32):
    a = math.sqrt(3.0) * k.theta
    ea = math.exp(-a)
    return UniformPotentialForm(
        energy=2.0 * (a * (2.0 + ea) + 3.0 * (ea - 1.0)) / a**2,
        S=lambda x: (2.0 - (2.0 + a * x) * np.exp(-a * x)) / a,
    )


@uniform_form.register
def _(k: Matern52):
    a = math.sqrt(5.0) * k.theta
    ea = math.exp(-a)
    return UniformPotentialForm(
        energy=2.0 * (8.0 * a - 15.0 + (15.0 + 7.0 * a + a**2) * ea) / (3.0 * a**2),
        S=lambda x: (8.0 - (8.0 + 5.0 * a * x + (a * x) ** 2) * np.exp(-a * x)) / (3.0 * a),
    )


@uniform_form.register
def _(k: SquaredExponential):
    rt = math.sqrt(k.t)
    return UniformPotentialForm(
        energy=math.sqrt(math.pi) * math.erf(rt) / rt + math.expm1(-k.t) / k.t,
        S=lambda x: math.sqrt(math.pi) * special.erf(rt * x) / (2.0 * rt),
    )


@uniform_form.register
def _(k: GeneralizedMultiquadric):
    s, eps = k.s, k.eps
    re = math.sqrt(eps)
    if s == 2.0:
        S = lambda x: np.arctan(x / re) / re  # noqa: E731
    elif s == 1.0:
        S = lambda x: np.arcsinh(x / re)  # noqa: E731
    else:
        S = lambda x: x * eps ** (-s / 2) * special.hyp2f1(0.5, s / 2, 1.5, -(x**2) / eps)  # noqa: E731
    # E = 2 * int_0^1 (1 - u) (u^2 + eps)^(-s/2) du
    if s == 2.0:
        first_moment = 0.5 * math.log1p(1.0 / eps)
    else:
        first_moment = ((1.0 + eps) ** (1 - s / 2) - eps ** (1 - s / 2)) / (2.0 - s)
    return UniformPotentialForm(energy=2.0 * (float(S(np.float64(1.0))) - first_moment), S=S)


@uniform_form.register
def _(k: ShiftedInverseDistance):
    s, eps = k.s, k.eps
    if s == 1.0:
        S = lambda x: np.log1p(x / eps)  # noqa: E731
        energy = 2.0 * ((1.0 + eps) * math.log1p(1.0 / eps) - 1.0)
    else:
        S = lambda x: ((x + eps) ** (1 - s) - eps ** (1 - s)) / (1 - s)  # noqa: E731
        if s == 2.0:
            energy = 2.0 * (1.0 / eps - math.log1p(1.0 / eps))
        else:
            energy = 2.0 * (
                (1 + eps) * ((1 + eps) ** (1 - s) - eps ** (1 - s)) / (1 - s)
                - ((1 + eps) ** (2 - s) - eps ** (2 - s)) / (2 - s)
            )
    return UniformPotentialForm(energy=energy, S=S)


@uniform_form.register
def _(k: RieszSingular):
    s = k.s
    if s >= 1:
        raise ValueError("the uniform measure on [0, 1] has infinite energy for s >= 1")
    return UniformPotentialForm(
        energy=2.0 / ((1 - s) * (2 - s)),
        S=lambda x: np.asarray(x, dtype=float) ** (1 - s) / (1 - s),
    )


@uniform_form.register
def _(k: RieszLog):
    return UniformPotentialForm(energy=1.5, S=lambda x: 0.5 - special.xlogy(x, x))


@uniform_form.register
def _(k: NegDistance):
    s = k.s
    return UniformPotentialForm(
        energy=-2.0 / ((s + 1) * (s + 2)),
        S=lambda x: -np.asarray(x, dtype=float) ** (s + 1) / (s + 1),
    )


@uniform_form.register
def _(k: DistanceInduced):
    s = k.s
    return UniformPotentialForm(
        energy=2.0 / (s + 2),
        S=lambda x: 0.5 / (s + 1) - np.asarray(x, dtype=float) ** (s + 1) / (s + 1),
        T=lambda x: np.asarray(x, dtype=float) ** s,
    )


@uniform_form.register
def _(k: TriangularOneMinus):
    th = k.theta
    return UniformPotentialForm(energy=1.0 - th / 3.0, S=lambda x: 0.5 - th * np.asarray(x) ** 2 / 2.0)


# ---------------------------------------------------------------------------
# Potential providers
# ---------------------------------------------------------------------------


class PotentialProvider(Protocol):
    """Potential field ``P_mu`` and energy ``E_K(mu)`` of a fixed measure mu."""

    kernel: Kernel

    def __call__(self, X) -> np.ndarray: ...

    def energy(self) -> float: ...


@dataclass(frozen=True, eq=False)
class ClosedFormUniform:
    """Exact potentials of the uniform measure on ``[0, 1]^d``.

    Works for one-dimensional kernels with a registered closed form and for
    tensor products of such kernels.
    """

    kernel: Kernel
    forms: tuple[UniformPotentialForm, ...] = field(init=False)

    def __post_init__(self):
        if isinstance(self.kernel, TensorProduct):
            forms = tuple(uniform_form(f) for f in self.kernel.factors)
        elif self.kernel.dim in (None, 1):
            forms = (uniform_form(self.kernel),)
        else:
            raise NotImplementedError(f"no closed form for {self.kernel!r}")
        object.__setattr__(self, "forms", forms)

    @property
    def dim(self) -> int:
        return len(self.forms)

    def __call__(self, X) -> np.ndarray:
        X = as_points(X, self.dim)
        out = self.forms[0].potential(X[:, 0])
        for i, form in enumerate(self.forms[1:], start=1):
            out = out * form.potential(X[:, i])
        return out

    def energy(self) -> float:
        return math.prod(f.energy for f in self.forms)


def sample_measure(spec: str, N: int, seed: int) -> np.ndarray:
    """Draw ``N`` i.i.d. points from a named measure.

    Supported specs: ``uniform:d=<d>`` (unit cube), ``sphere:d=<d>`` (uniform
    on the unit sphere of R^d) and ``ball:d=<d>`` (uniform in the unit ball).
    """
    if N < 1:
        raise ValueError("N must be at least 1")
    name, _, args = spec.partition(":")
    params = dict(item.split("=", 1) for item in args.split(",") if item)
    d = int(params.get("d", 1))
    rng = np.random.default_rng(seed)
    if name == "uniform":
        return rng.random((N, d))
    if name in ("sphere", "ball"):
        g = rng.standard_normal((N, d))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        if name == "ball":
            g *= rng.random((N, 1)) ** (1.0 / d)
        return g
    raise ValueError(f"unsupported measure spec {spec!r}")


@dataclass(frozen=True, eq=False)
class MonteCarloProvider:
    """Potentials of the empirical measure of a fixed sample.

    ``P(x) = (1/N) sum_j K(x, x_j)`` is exact for the empirical measure and an
    unbiased estimate of the potential of the sampled measure.
    """

    kernel: Kernel
    sample: np.ndarray
    chunk_elements: int = 4_000_000

    def __post_init__(self):
        sample = as_points(self.sample, self.kernel.dim)
        sample.flags.writeable = False
        object.__setattr__(self, "sample", sample)

    @property
    def N(self) -> int:
        return self.sample.shape[0]

    @property
    def dim(self) -> int:
        return self.sample.shape[1]

    def _rows(self, X):
        X = as_points(X, self.dim)
        step = max(1, self.chunk_elements // self.N)
        for start in range(0, X.shape[0], step):
            yield self.kernel(X[start : start + step], self.sample)

    def __call__(self, X) -> np.ndarray:
        return np.concatenate([rows.mean(axis=1) for rows in self._rows(X)])

    def potential_with_se(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Potential estimates together with their standard errors."""
        means, ses = [], []
        for rows in self._rows(X):
            means.append(rows.mean(axis=1))
            ses.append(rows.std(axis=1, ddof=1) / math.sqrt(self.N) if self.N > 1 else np.full(rows.shape[0], np.nan))
        return np.concatenate(means), np.concatenate(ses)

    def energy_with_se(self, full_limit: int = 4096) -> tuple[float, float]:
        """Energy estimate of the sampled measure and its standard error.

        Up to ``full_limit`` points the full double sum is used: the
        V-statistic (diagonal included) for bounded kernels and the
        U-statistic (diagonal excluded) for singular ones.  The standard error
        then comes from the first-order projection.  Larger samples use the
        paired estimator ``mean_i K(x_{2i}, x_{2i+1})``.
        """
        N = self.N
        if N <= full_limit:
            G = self.kernel(self.sample)
            if self.kernel.singular:
                if N < 2:
                    raise ValueError("the U-statistic needs at least two points")
                np.fill_diagonal(G, 0.0)
                row = G.sum(axis=1) / (N - 1)
                value = G.sum() / (N * (N - 1))
            else:
                row = G.mean(axis=1)
                value = float(G.mean())
            se = 2.0 * row.std(ddof=1) / math.sqrt(N) if N > 1 else math.nan
            return float(value), float(se)
        half = N // 2
        vals = self.kernel.paired(self.sample[0 : 2 * half : 2], self.sample[1 : 2 * half : 2])
        return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(half))

    def energy(self) -> float:
        return self.energy_with_se()[0]


def mc_potential_provider(kernel: Kernel, spec: str, N: int, seed: int) -> MonteCarloProvider:
    """Monte-Carlo provider for the measure named by ``spec``; deterministic in ``seed``."""
    return MonteCarloProvider(kernel, sample_measure(spec, N, seed))


def potential(provider: PotentialProvider, kernel: Kernel, X) -> np.ndarray:
    """``P_mu`` at the rows of ``X``; the provider must be built for ``kernel``."""
    if provider.kernel != kernel:
        raise ValueError(f"provider was built for {provider.kernel!r}, not {kernel!r}")
    return provider(X)


def energy_of_uniform(provider: PotentialProvider) -> float:
    return provider.energy()


# ---------------------------------------------------------------------------
# Energies and discrepancies of discrete measures
# ---------------------------------------------------------------------------


def energy(kernel: Kernel, xi: DiscreteSignedMeasure) -> float:
    """Energy ``sum_ij w_i w_j K(x_i, x_j)``; infinite for singular kernels."""
    if kernel.singular and xi.n:
        return math.inf
    return float(xi.weights @ kernel(xi.support) @ xi.weights)


def mutual_energy(kernel: Kernel, xi: DiscreteSignedMeasure, nu: DiscreteSignedMeasure) -> float:
    return float(xi.weights @ kernel(xi.support, nu.support) @ nu.weights)


def energy_of_signed_diff(
    kernel: Kernel,
    xi: DiscreteSignedMeasure,
    provider: PotentialProvider,
    Emu: float | None = None,
) -> float:
    """Squared MMD ``E_K(xi - mu) = w'Kw - 2 w'p + E_K(mu)``.

    Raises :class:`DefinitenessError` when the result is below ``-1e-12`` for
    an ISPD kernel.
    """
    if Emu is None:
        Emu = provider.energy()
    p = provider(xi.support)
    if not np.all(np.isfinite(p)):
        raise ValueError("non-finite potential values at the support points")
    # Compensated summation: the three terms nearly cancel for good designs.
    w = xi.weights
    K = kernel(xi.support)
    value = math.fsum(np.concatenate([(np.outer(w, w) * K).ravel(), -2.0 * w * p, [Emu]]))
    _check_nonneg(kernel, value)
    return value


def squared_mmd(kernel: Kernel, xi: DiscreteSignedMeasure, nu: DiscreteSignedMeasure) -> float:
    """``E_K(nu - xi)`` for two discrete measures; exactly symmetric in its arguments."""
    if xi._key() > nu._key():
        xi, nu = nu, xi
    value = (energy(kernel, xi) + energy(kernel, nu)) - 2.0 * mutual_energy(kernel, xi, nu)
    _check_nonneg(kernel, value)
    return value


def mmd(kernel: Kernel, xi: DiscreteSignedMeasure, nu: DiscreteSignedMeasure) -> float:
    """Kernel discrepancy ``gamma_K(xi, nu) = E_K(nu - xi)^(1/2)``."""
    return math.sqrt(max(squared_mmd(kernel, xi, nu), 0.0))


def _check_nonneg(kernel: Kernel, value: float) -> None:
    if kernel.definiteness is DefinitenessClass.ISPD and value < -NONNEG_TOL:
        raise DefinitenessError(f"negative squared discrepancy {value!r} for an ISPD kernel")


# ---------------------------------------------------------------------------
# Known minimum-energy values for the kernels -||x - x'||^s
# ---------------------------------------------------------------------------


def negdist_equilibrium_energy_1d(s: float) -> float:
    """Minimum energy over probability measures on [0, 1] for ``-|x - x'|^s``, ``0 < s < 1``."""
    if not 0 < s < 1:
        raise ValueError("closed form valid for 0 < s < 1")
    return -math.sqrt(math.pi) * math.gamma(1 - s / 2) / (
        2**s * math.gamma((1 - s) / 2) * math.cos(math.pi * s / 2)
    )


def negdist_equilibrium_density_1d(s: float, x) -> np.ndarray:
    """Density of the minimum-energy probability measure on [0, 1], ``0 < s < 1``."""
    c = math.gamma(1 - s / 2) / (2**s * math.sqrt(math.pi) * math.gamma((1 - s) / 2))
    x = np.asarray(x, dtype=float)
    return c / (x * (1 - x)) ** ((1 + s) / 2)


def three_point_measure(w: float) -> DiscreteSignedMeasure:
    """``((1 + w)/2)(delta_0 + delta_1) - w delta_{1/2}`` on [0, 1]."""
    return DiscreteSignedMeasure(np.array([[0.0], [0.5], [1.0]]), np.array([(1 + w) / 2, -w, (1 + w) / 2]))


def three_point_energy(s: float, w: float) -> float:
    """Energy of :func:`three_point_measure` under ``-|x - x'|^s``."""
    return -(1 + w) * (1 + w - 2 ** (2 - s) * w) / 2


def three_point_optimal_weight(s: float) -> float:
    return (1 - 2 ** (1 - s)) / (2 ** (2 - s) - 1)


def three_point_optimal_energy(s: float) -> float:
    return 2 * (1 - 2 ** (2 - s)) / (4 - 2**s) ** 2


def negdist_sphere_energy(s: float, d: int) -> float:
    """Energy of the uniform measure on the unit sphere of R^d under ``-||x - x'||^s``.

    This measure has minimum energy over probability measures on the unit
    ball for ``0 < s < 2``.
    """
    return -(
        2 ** (d + s - 2)
        * math.gamma(d / 2)
        * math.gamma((d + s - 1) / 2)
        / (math.sqrt(math.pi) * math.gamma(d + s / 2 - 1))
    )
