"""Gram matrices, optimal quadrature weights and posterior variances.

Notation: ``K`` is the Gram matrix of the design, ``p`` the vector of
potentials ``P_mu(x_i)``, ``E`` the energy of mu and
``Kt = K - p 1' - 1 p' + E 1 1'`` the Gram matrix of the reduced kernel.
Variances are reported without the process variance factor.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
from scipy import linalg
from scipy.linalg import lapack

from kdesign.kernels import Kernel, as_points
from kdesign.measures import DiscreteSignedMeasure, PotentialProvider

JITTER_SCHEDULE = (0.0, 1e-12, 1e-10, 1e-8)
"""Diagonal jitter levels, relative to the mean diagonal, tried in order."""


class SingularGramError(np.linalg.LinAlgError):
    """Raised when a Gram matrix cannot be factorized even with maximal jitter."""

    def __init__(self, message: str, pivot: int | None = None):
        super().__init__(message)
        self.pivot = pivot


@dataclass(frozen=True)
class Factorization:
    """Lower Cholesky factor of ``A + jitter * I``."""

    lower: np.ndarray
    jitter: float

    def solve(self, b) -> np.ndarray:
        return linalg.cho_solve((self.lower, True), b, check_finite=False)

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.lower))))


def factorize(A: np.ndarray, jitters=JITTER_SCHEDULE) -> Factorization:
    """Cholesky factorization with escalating diagonal jitter.

    Raises :class:`SingularGramError` carrying the failing pivot (0-based)
    when every jitter level fails.
    """
    A = np.asarray(A, dtype=float)
    if not np.all(np.isfinite(A)):
        raise SingularGramError("matrix has non-finite entries")
    scale = abs(float(np.mean(np.diag(A)))) or 1.0
    info = 0
    for level in jitters:
        jitter = level * scale
        M = A + jitter * np.eye(A.shape[0]) if jitter else A
        L, info = lapack.dpotrf(M, lower=1, clean=1, overwrite_a=0)
        if info == 0:
            return Factorization(L, jitter)
    raise SingularGramError(f"Cholesky failed at pivot {info - 1} even with maximal jitter", pivot=info - 1)


@dataclass(frozen=True, eq=False)
class GramBundle:
    """Gram matrices and potentials of a design with respect to a measure mu."""

    design: np.ndarray
    K: np.ndarray
    Kt: np.ndarray
    p: np.ndarray
    Emu: float
    kernel: Kernel | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.K.shape[0]

    @cached_property
    def _K_fact(self):
        try:
            return factorize(self.K)
        except SingularGramError as err:
            return err

    @cached_property
    def _Kt_fact(self):
        try:
            return factorize(self.Kt)
        except SingularGramError as err:
            return err

    @property
    def K_factor(self) -> Factorization:
        fact = self._K_fact
        if isinstance(fact, SingularGramError):
            raise fact
        return fact

    @property
    def Kt_factor(self) -> Factorization:
        fact = self._Kt_fact
        if isinstance(fact, SingularGramError):
            raise fact
        return fact

    @property
    def K_singular(self) -> bool:
        return isinstance(self._K_fact, SingularGramError)

    @property
    def Kt_singular(self) -> bool:
        return isinstance(self._Kt_fact, SingularGramError)

    def inv_quad_ones(self) -> float:
        """``1' Kt^{-1} 1``."""
        return float(np.sum(self.Kt_factor.solve(np.ones(self.n))))


def _check_distinct(design: np.ndarray) -> None:
    if np.unique(design, axis=0).shape[0] != design.shape[0]:
        raise ValueError("design points must be pairwise distinct")


def assemble(kernel: Kernel, design, provider: PotentialProvider, Emu: float | None = None) -> GramBundle:
    """Gram matrix, reduced Gram matrix and potentials of ``design``."""
    design = as_points(design, kernel.dim)
    _check_distinct(design)
    K = kernel(design)
    if not np.all(np.isfinite(np.diag(K))):
        raise ValueError("kernel is singular on the diagonal; Gram matrices are undefined")
    if Emu is None:
        Emu = provider.energy()
    p = np.asarray(provider(design), dtype=float)
    Kt = K - (p[:, None] + p[None, :]) + Emu
    return GramBundle(design, K, Kt, p, float(Emu), kernel)


class QuadratureMode(enum.Enum):
    UNCONSTRAINED = "Unconstrained"
    SUM_TO_ONE = "SumToOne"
    KNOWN_MEAN = "KnownMean"


@dataclass(frozen=True)
class QuadratureSolution:
    weights: np.ndarray
    variance: float
    mode: QuadratureMode
    estimate: float | None = None

    def to_json(self) -> dict:
        out = {"mode": self.mode.value, "weights": self.weights.tolist(), "variance": self.variance}
        if self.estimate is not None:
            out["estimate"] = self.estimate
        return out


def _refined_solve(g: GramBundle, rhs: np.ndarray) -> np.ndarray:
    """``K^{-1} rhs`` with one step of iterative refinement."""
    x = g.K_factor.solve(rhs)
    return x + g.K_factor.solve(rhs - g.K @ x)


def optimal_weights_unconstrained(g: GramBundle) -> QuadratureSolution:
    """``w* = K^{-1} p`` with variance ``E - p' K^{-1} p``."""
    w = _refined_solve(g, g.p)
    return QuadratureSolution(w, g.Emu - math.fsum(g.p * w), QuadratureMode.UNCONSTRAINED)


def optimal_weights_sum_to_one(g: GramBundle) -> QuadratureSolution:
    """Weights minimizing ``E_K(xi - mu)`` subject to ``sum(w) = 1``.

    Computed from ``K``; the variance is
    ``E - p'K^{-1}p + (1 - 1'K^{-1}p)^2 / (1'K^{-1}1)``.  Falls through to
    :func:`bordered_weights` when ``K`` cannot be factorized.
    """
    if g.K_singular:
        return bordered_weights(g)
    ones = np.ones(g.n)
    a = _refined_solve(g, ones)
    b = _refined_solve(g, g.p)
    sa = math.fsum(a)
    w = b + a * (1.0 - math.fsum(b)) / sa
    variance = g.Emu - math.fsum(g.p * b) + (1.0 - math.fsum(g.p * a)) ** 2 / sa
    return QuadratureSolution(w, variance, QuadratureMode.SUM_TO_ONE)


def variance_reduced(g: GramBundle) -> float:
    """``(1' Kt^{-1} 1)^{-1}``, the sum-to-one variance from the reduced Gram matrix."""
    return 1.0 / g.inv_quad_ones()


def weights_reduced(g: GramBundle) -> np.ndarray:
    """``Kt^{-1} 1 / (1' Kt^{-1} 1)``."""
    u = g.Kt_factor.solve(np.ones(g.n))
    return u / np.sum(u)


def bordered_weights(g: GramBundle) -> QuadratureSolution:
    """Sum-to-one weights from ``(Kt + 1 1')``, valid for conditionally definite kernels."""
    ones = np.ones(g.n)
    try:
        fact = factorize(g.Kt + 1.0)
    except SingularGramError as err:
        raise SingularGramError("bordered matrix is singular", err.pivot) from err
    u = fact.solve(ones)
    su = float(np.sum(u))
    return QuadratureSolution(u / su, 1.0 / su - 1.0, QuadratureMode.SUM_TO_ONE)


def estimate_integral(sol: QuadratureSolution, y) -> float:
    """``w' y`` for a sum-to-one rule."""
    y = np.asarray(y, dtype=float).reshape(-1)
    if sol.mode is not QuadratureMode.SUM_TO_ONE:
        raise ValueError("integral estimates need a sum-to-one solution")
    if y.shape[0] != sol.weights.shape[0]:
        raise ValueError("length mismatch between weights and observations")
    return float(sol.weights @ y)


def estimate_integral_reduced(g: GramBundle, y) -> float:
    """``1'Kt^{-1}y / 1'Kt^{-1}1``."""
    u = g.Kt_factor.solve(np.ones(g.n))
    return float(u @ np.asarray(y, dtype=float)) / float(np.sum(u))


def estimate_integral_blup(g: GramBundle, y) -> float:
    """Posterior mean ``beta + p'K^{-1}(y - beta 1)`` with ``beta`` the discrete BLUE."""
    y = np.asarray(y, dtype=float)
    beta, _ = discrete_blue(g, y)
    return beta + float(g.p @ g.K_factor.solve(y - beta))


def blue_weights(g: GramBundle) -> np.ndarray:
    a = g.K_factor.solve(np.ones(g.n))
    return a / np.sum(a)


def _mp_profile(kernel: Kernel):
    import mpmath as mp

    from kdesign.kernels import Exponential, Matern32, Matern52, SquaredExponential

    if isinstance(kernel, SquaredExponential):
        t = mp.mpf(kernel.t)
        return lambda r: mp.exp(-t * r**2)
    if isinstance(kernel, Exponential):
        th = mp.mpf(kernel.theta)
        return lambda r: mp.exp(-th * r)
    if isinstance(kernel, Matern32):
        a = mp.sqrt(3) * mp.mpf(kernel.theta)
        return lambda r: (1 + a * r) * mp.exp(-a * r)
    if isinstance(kernel, Matern52):
        a = mp.sqrt(5) * mp.mpf(kernel.theta)
        return lambda r: (1 + a * r + (a * r) ** 2 / 3) * mp.exp(-a * r)
    raise TypeError(f"no extended-precision profile for {kernel!r}")


def blue_weights_extended(kernel: Kernel, design, dps: int = 300) -> np.ndarray:
    """BLUE weights ``K^{-1}1 / 1'K^{-1}1`` solved with ``dps`` significant digits.

    For smooth kernels on fine grids ``K`` is far too ill-conditioned for
    double precision; here the kernel entries and the solve use mpmath and
    only the final weights are rounded to doubles.  Supports the squared
    exponential, exponential and Matern kernels.
    """
    import mpmath as mp

    design = as_points(design, kernel.dim)
    n = design.shape[0]
    with mp.workdps(dps):
        prof = _mp_profile(kernel)
        pts = [[mp.mpf(float(v)) for v in row] for row in design]
        K = mp.matrix(n, n)
        for i in range(n):
            K[i, i] = prof(mp.mpf(0))
            for j in range(i):
                r = mp.sqrt(mp.fsum((a - b) ** 2 for a, b in zip(pts[i], pts[j])))
                K[i, j] = K[j, i] = prof(r)
        a = mp.lu_solve(K, mp.matrix([1] * n))
        total = mp.fsum(a)
        return np.array([float(v / total) for v in a])


def discrete_blue(g: GramBundle, y) -> tuple[float, float]:
    """BLUE of the mean ``1'K^{-1}y / 1'K^{-1}1`` and its variance ``1 / 1'K^{-1}1``."""
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.shape[0] != g.n:
        raise ValueError("length mismatch between design and observations")
    a = g.K_factor.solve(np.ones(g.n))
    sa = float(np.sum(a))
    return float(a @ y) / sa, 1.0 / sa


def mean_diagonal(kernel: Kernel) -> float:
    """``int K(x, x) dmu`` for kernels whose diagonal is constant."""
    from kdesign.kernels import RadialKernel, TensorProduct

    if isinstance(kernel, RadialKernel):
        return float(kernel.profile(np.zeros(1))[0])
    if isinstance(kernel, TensorProduct):
        return math.prod(mean_diagonal(f) for f in kernel.factors)
    raise ValueError(f"the diagonal of {kernel!r} is not constant; pass mean_diag explicitly")


def h_matrix(kernel: Kernel, design, nodes_per_piece: int = 24) -> np.ndarray:
    """``H_jk = int K(x, x_j) K(x, x_k) dx`` for the uniform measure on the unit cube.

    Only for one-dimensional kernels and tensor products: each coordinate is
    integrated with Gauss-Legendre rules on the pieces of [0, 1] delimited by
    the design coordinates, and the per-coordinate matrices are multiplied
    entrywise.
    """
    from kdesign.kernels import TensorProduct

    design = as_points(design, kernel.dim)
    factors = kernel.factors if isinstance(kernel, TensorProduct) else (kernel,)
    if len(factors) != design.shape[1]:
        raise ValueError("per-coordinate quadrature needs a tensor-product kernel")
    gx, gw = np.polynomial.legendre.leggauss(nodes_per_piece)
    H = np.ones((design.shape[0], design.shape[0]))
    for i, f in enumerate(factors):
        coords = design[:, i]
        breaks = np.unique(np.concatenate([[0.0, 1.0], np.clip(coords, 0.0, 1.0)]))
        lo, hi = breaks[:-1], breaks[1:]
        x = ((hi - lo)[:, None] * (gx[None, :] + 1) / 2 + lo[:, None]).ravel()
        w = ((hi - lo)[:, None] * gw[None, :] / 2).ravel()
        F = f(x[:, None], coords[:, None])
        H *= F.T @ (w[:, None] * F)
    return H


def h_matrix_mc(kernel: Kernel, design, sample) -> np.ndarray:
    """Monte-Carlo version of :func:`h_matrix` over an arbitrary sample."""
    F = kernel(as_points(sample, kernel.dim), design)
    return F.T @ F / F.shape[0]


def imspe(g: GramBundle, H: np.ndarray, mean_diag: float | None = None) -> float:
    """Integrated mean-squared prediction error of the ordinary-kriging predictor.

    ``int K(x,x)dmu + 1/(1'K^{-1}1) - 2 p'K^{-1}1/(1'K^{-1}1) - tr[K^{-1} Q H]``
    with ``Q = I - 1 1'K^{-1} / (1'K^{-1}1)``.  ``mean_diag`` is
    ``int K(x, x) dmu``; it defaults to the constant diagonal of the kernel.
    """
    if mean_diag is None:
        if g.kernel is None:
            raise ValueError("mean_diag is required when the bundle has no kernel")
        mean_diag = mean_diagonal(g.kernel)
    ones = np.ones(g.n)
    a = g.K_factor.solve(ones)
    sa = float(np.sum(a))
    KinvH = g.K_factor.solve(H)
    # tr[K^{-1} Q H] = tr(K^{-1}H) - a'Ha / sa
    trace = float(np.trace(KinvH)) - float(a @ H @ a) / sa
    return mean_diag + 1.0 / sa - 2.0 * float(g.p @ a) / sa - trace


def kriging_variance(g: GramBundle, kernel: Kernel, X) -> np.ndarray:
    """Ordinary-kriging variance ``rho_n^2(x)`` at the rows of ``X``."""
    X = as_points(X, kernel.dim)
    k = kernel(g.design, X)
    ones = np.ones(g.n)
    a = g.K_factor.solve(ones)
    Kk = g.K_factor.solve(k)
    sa = float(np.sum(a))
    return kernel.diag(X) - np.sum(k * Kk, axis=0) + (1.0 - ones @ Kk) ** 2 / sa


# ---------------------------------------------------------------------------
# Several integrals
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MultiIntegralSpec:
    """Integrals ``int f(x) r(x) dmu`` with ``r = (1, r_1, ..., r_p)``.

    ``M_r = E{r r'}``, ``u_mu(x) = E{r(X) K(X, x)}`` (a function returning a
    ``(p+1, m)`` array) and ``U = E{r(X) r(X')' K(X, X')}``.
    """

    kernel: Kernel
    r: Callable[[np.ndarray], np.ndarray]
    M_r: np.ndarray
    u_mu: Callable[[np.ndarray], np.ndarray]
    U: np.ndarray

    def __post_init__(self):
        M = np.atleast_2d(np.asarray(self.M_r, dtype=float))
        U = np.atleast_2d(np.asarray(self.U, dtype=float))
        if not np.allclose(M, M.T, rtol=0, atol=1e-14 * np.abs(M).max()):
            raise ValueError("M_r must be symmetric")
        np.linalg.cholesky(M)
        object.__setattr__(self, "M_r", M)
        object.__setattr__(self, "U", 0.5 * (U + U.T))

    @property
    def p(self) -> int:
        return self.M_r.shape[0] - 1

    @property
    def B(self) -> np.ndarray:
        """``E{r h'}`` for the trend ``h = r``."""
        return self.M_r

    def R(self, X) -> np.ndarray:
        return np.atleast_2d(np.asarray(self.r(as_points(X, self.kernel.dim)), dtype=float))

    @classmethod
    def constant(cls, kernel: Kernel, provider: PotentialProvider) -> MultiIntegralSpec:
        """The single integral ``int f dmu`` (``p = 0``) from exact potentials."""
        E = provider.energy()
        return cls(
            kernel,
            lambda X: np.ones((X.shape[0], 1)),
            np.ones((1, 1)),
            lambda X: np.asarray(provider(X), dtype=float)[None, :],
            np.array([[E]]),
        )

    @classmethod
    def from_sample(cls, kernel: Kernel, r, sample) -> MultiIntegralSpec:
        """Moments of the empirical measure of ``sample`` (exact for that measure).

        ``U`` is a full double sum, so the cost grows as the square of the
        sample size.
        """
        S = as_points(sample, kernel.dim)
        RS = np.atleast_2d(r(S))
        N = S.shape[0]
        M = RS.T @ RS / N

        def u_mu(X):
            return RS.T @ kernel(S, as_points(X, kernel.dim)) / N

        U = np.zeros((RS.shape[1], RS.shape[1]))
        step = max(1, 4_000_000 // N)
        for start in range(0, N, step):
            U += RS[start : start + step].T @ (kernel(S[start : start + step], S) @ RS)
        U /= N * N
        return cls(kernel, r, M, u_mu, U)

    def reduced(self, X, Y=None) -> np.ndarray:
        """Generalized reduced kernel between the rows of ``X`` and ``Y``."""
        X = as_points(X, self.kernel.dim)
        Y = X if Y is None else as_points(Y, self.kernel.dim)
        Minv = np.linalg.inv(self.M_r)
        RX, RY = self.R(X), self.R(Y)
        uX, uY = self.u_mu(X), self.u_mu(Y)
        cross = uX.T @ Minv @ RY.T
        cross_t = RX @ Minv @ uY
        return self.kernel(X, Y) - (cross + cross_t) + RX @ Minv @ self.U @ Minv @ RY.T


@dataclass(frozen=True)
class MultiIntegralPosterior:
    V: np.ndarray
    estimate: np.ndarray | None = None


def multi_integral_posterior(spec: MultiIntegralSpec, design, y=None) -> MultiIntegralPosterior:
    """Posterior covariance ``V = M_r (R'Kt^{-1}R)^{-1} M_r`` and mean of the integrals."""
    design = as_points(design, spec.kernel.dim)
    _check_distinct(design)
    R = spec.R(design)
    if np.linalg.matrix_rank(R) < R.shape[1]:
        raise np.linalg.LinAlgError("R_n is rank deficient")
    fact = factorize(spec.reduced(design))
    KiR = fact.solve(R)
    A = R.T @ KiR
    V = spec.M_r @ np.linalg.solve(A, spec.M_r)
    V = 0.5 * (V + V.T)
    estimate = None
    if y is not None:
        y = np.asarray(y, dtype=float)
        estimate = spec.M_r @ np.linalg.solve(A, KiR.T @ y)
    return MultiIntegralPosterior(V, estimate)


def multi_integral_posterior_direct(spec: MultiIntegralSpec, design, y=None) -> MultiIntegralPosterior:
    """Same quantities from the unreduced kernel with ``B``, ``U`` and ``P_n``."""
    design = as_points(design, spec.kernel.dim)
    R = spec.R(design)
    fact = factorize(spec.kernel(design))
    P = spec.u_mu(design)
    KiR = fact.solve(R)
    A = R.T @ KiR
    C = spec.B - P @ KiR
    V = spec.U - P @ fact.solve(P.T) + C @ np.linalg.solve(A, C.T)
    V = 0.5 * (V + V.T)
    estimate = None
    if y is not None:
        y = np.asarray(y, dtype=float)
        beta = np.linalg.solve(A, KiR.T @ y)
        estimate = spec.B @ beta + P @ fact.solve(y - R @ beta)
    return MultiIntegralPosterior(V, estimate)


@dataclass(frozen=True)
class GreedyScores:
    det_ratio: float
    trace_drop: float


def multi_integral_greedy_scores(spec: MultiIntegralSpec, design, x) -> GreedyScores:
    """``det(V_{n+1}) / det(V_n)`` and ``tr(V_n) - tr(V_{n+1})`` for adding ``x``.

    With ``g = r(x) - R'Kt^{-1}k`` and ``A = R'Kt^{-1}R``, the normalizer is
    ``rho^2 = Kt(x,x) - k'Kt^{-1}k + g'A^{-1}g``; for ``p = 0`` the last term is
    ``(1 - k'Kt^{-1}1)^2 / (1'Kt^{-1}1)``.
    """
    design = as_points(design, spec.kernel.dim)
    x = as_points(x, spec.kernel.dim)
    R = spec.R(design)
    fact = factorize(spec.reduced(design))
    k = spec.reduced(design, x)[:, 0]
    kxx = float(spec.reduced(x)[0, 0])
    Kik = fact.solve(k)
    D = kxx - float(k @ Kik)
    if not D > 1e-14 * max(abs(kxx), 1.0):
        raise np.linalg.LinAlgError("degenerate candidate: conditional variance is not positive")
    A = R.T @ fact.solve(R)
    g = spec.R(x)[0] - R.T @ Kik
    Aig = np.linalg.solve(A, g)
    rho2 = D + float(g @ Aig)
    MAig = spec.M_r @ Aig
    return GreedyScores(D / rho2, float(MAig @ MAig) / rho2)


def quadrature_measure(g: GramBundle, sol: QuadratureSolution) -> DiscreteSignedMeasure:
    return DiscreteSignedMeasure(g.design, sol.weights)
