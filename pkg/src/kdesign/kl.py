"""Karhunen-Loeve basis of a reduced kernel and Bayesian c-optimal designs.

The integral operator of the kernel reduced with respect to ``mu`` is
approximated by replacing ``mu`` with the uniform measure ``mu_q`` on a
regular quadrature grid.  Reducing with respect to ``mu_q`` itself makes the
grid eigenvectors exactly orthogonal to constants.  For tensor-product
kernels the reduced grid operator ``(I - P)(K_1 x ... x K_d)(I - P)`` is
diagonalized with a Lanczos solver whose matrix-vector product uses the
Kronecker structure, so a 100 x 100 grid never forms the full Gram matrix.

The Bayesian linear model has regressors ``psi(x) = (1, phi_1(x), ...,
phi_{M-1}(x))`` and residual variance ``v(x)``; a design measure ``xi`` has
information matrix ``M_B(xi) = sum_i xi_i psi psi' / v + Lambda^{-1} / m``
with a zero prior precision on the intercept.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, eigh
from scipy.optimize import minimize_scalar
from scipy.sparse.linalg import LinearOperator, eigsh

from kdesign.kernels import Kernel, TensorProduct, as_points
from kdesign.measures import DiscreteSignedMeasure

log = logging.getLogger(__name__)

V_FLOOR = 1e-10
"""Floor applied to the residual variance ``v(x)``."""


# ---------------------------------------------------------------------------
# Nystrom basis
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KLBasis:
    """Leading eigenpairs of the grid-reduced kernel operator.

    ``vectors[:, k]`` holds ``phi_k`` on the grid, normalized so that the
    grid mean of ``phi_j phi_k`` is ``delta_jk``; ``grid_axis`` is the 1-D
    grid whose Cartesian power is the quadrature grid.
    """

    kernel: Kernel
    factors: tuple[Kernel, ...]
    grid_axis: np.ndarray
    eigenvalues: np.ndarray
    vectors: np.ndarray
    min_v_on_grid: float
    _pq_axis: tuple[np.ndarray, ...] = field(repr=False)
    _Eq: float = field(repr=False)

    @property
    def M(self) -> int:
        return self.eigenvalues.size + 1

    @property
    def dim(self) -> int:
        return len(self.factors)

    @property
    def grid(self) -> np.ndarray:
        mesh = np.meshgrid(*([self.grid_axis] * self.dim), indexing="ij")
        return np.column_stack([g.ravel() for g in mesh])

    def grid_potential(self, X) -> np.ndarray:
        """``P_q(x)``, the potential of the quadrature measure."""
        X = as_points(X, self.dim)
        out = np.ones(X.shape[0])
        for i, f in enumerate(self.factors):
            out *= f(X[:, i : i + 1], self.grid_axis[:, None]).mean(axis=1)
        return out

    def reduced_diag(self, X) -> np.ndarray:
        """``K_q(x, x) = K(x, x) - 2 P_q(x) + E_q``."""
        X = as_points(X, self.dim)
        return self.kernel.diag(X) - 2.0 * self.grid_potential(X) + self._Eq

    def eigenfunctions(self, X) -> np.ndarray:
        """Nystrom extensions ``phi'_k(x)``, one column per eigenpair."""
        X = as_points(X, self.dim)
        g = self.grid_axis.size
        N = g**self.dim
        A = [f(X[:, i : i + 1], self.grid_axis[:, None]) for i, f in enumerate(self.factors)]
        out = np.empty((X.shape[0], self.eigenvalues.size))
        for k in range(self.eigenvalues.size):
            T = self.vectors[:, k].reshape((g,) * self.dim)
            T = np.tensordot(A[0], T, axes=(1, 0))
            for Ai in A[1:]:
                T = np.einsum("mi,mi...->m...", Ai, T)
            # the P_q(x) and E_q parts of K_q vanish against a mean-zero phi_k
            out[:, k] = (T - self._pq_phi[k]) / (N * self.eigenvalues[k])
        return out

    @property
    def _pq_phi(self) -> np.ndarray:
        pq = self._pq_axis[0]
        for p in self._pq_axis[1:]:
            pq = np.multiply.outer(pq, p)
        return pq.ravel() @ self.vectors

    def residual_variance(self, X, clamp: bool = True) -> np.ndarray:
        """``v(x) = K_q(x, x) - sum_k Lambda_k phi'_k(x)^2``, floored at ``V_FLOOR``."""
        phi = self.eigenfunctions(X)
        v = self.reduced_diag(X) - phi**2 @ self.eigenvalues
        if clamp:
            low = v < V_FLOOR
            if np.any(v < 0):
                log.info("residual variance negative at %d point(s), min %.3e", int(np.sum(v < 0)), float(v.min()))
            v = np.where(low, V_FLOOR, v)
        return v

    def reconstruct(self) -> np.ndarray:
        """``sum_k Lambda_k phi_k(z) phi_k(z')`` on grid pairs."""
        return (self.vectors * self.eigenvalues) @ self.vectors.T

    def header(self) -> dict:
        """JSON-serializable description of the basis."""
        from kdesign.io import format_kernel

        return {
            "M": self.M,
            "kernel": format_kernel(self.kernel),
            "grid": self.grid_axis.size,
            "eigenvalues": self.eigenvalues.tolist(),
        }


def _factors(kernel: Kernel) -> tuple[Kernel, ...]:
    if isinstance(kernel, TensorProduct):
        return kernel.factors
    if kernel.dim in (None, 1):
        return (kernel,)
    raise ValueError("the KL basis needs a one-dimensional or tensor-product kernel")


def _fix_signs(V: np.ndarray) -> np.ndarray:
    """Make the entry of largest magnitude in each column positive."""
    idx = np.argmax(np.abs(V), axis=0)
    signs = np.sign(V[idx, np.arange(V.shape[1])])
    signs[signs == 0] = 1.0
    return V * signs


def nystrom_basis(kernel: Kernel, M: int, grid_points: int = 100, dense_limit: int = 2000) -> KLBasis:
    """KL basis with ``M - 1`` eigenpairs on the grid ``0, 1/(g-1), ..., 1``.

    Grids with at most ``dense_limit`` points are diagonalized densely (all
    eigenvalues are then computed); larger tensor grids use Lanczos.
    """
    if M < 2:
        raise ValueError("M must be at least 2")
    if kernel.singular:
        raise ValueError("the KL basis needs a kernel that is finite on the diagonal")
    factors = _factors(kernel)
    d = len(factors)
    z = np.linspace(0.0, 1.0, grid_points)
    Ks = [f(z[:, None], z[:, None]) for f in factors]
    pq_axis = tuple(Ki.mean(axis=1) for Ki in Ks)
    Eq = math.prod(float(p.mean()) for p in pq_axis)
    N = grid_points**d
    k = M - 1
    if k >= N:
        raise ValueError(f"M - 1 = {k} eigenpairs requested from a grid of {N} points")

    if N <= dense_limit:
        K = Ks[0]
        for Ki in Ks[1:]:
            K = np.kron(K, Ki)
        C = K - K.mean(axis=0, keepdims=True)
        C = C - C.mean(axis=1, keepdims=True)
        C = 0.5 * (C + C.T)
        lam, V = eigh(C / N)
        lam, V = lam[::-1], V[:, ::-1]
    else:
        shape = (grid_points,) * d

        def matvec(x):
            x = np.asarray(x).ravel()
            x = x - x.mean()
            T = x.reshape(shape)
            for axis, Ki in enumerate(Ks):
                T = np.moveaxis(np.tensordot(Ki, T, axes=(1, axis)), 0, axis)
            y = T.ravel()
            return (y - y.mean()) / N

        op = LinearOperator((N, N), matvec=matvec, dtype=float)
        v0 = np.ones(N) + np.linspace(-0.5, 0.5, N)
        lam, V = eigsh(op, k=k, which="LA", v0=v0 - v0.mean(), tol=1e-13)
        order = np.argsort(-lam, kind="stable")
        lam, V = lam[order], V[:, order]
    lam_k, V_k = lam[:k], V[:, :k]
    if np.any(lam_k <= 0):
        raise ValueError(f"fewer than M - 1 = {k} positive eigenvalues")
    vectors = _fix_signs(V_k) * math.sqrt(N)
    basis = KLBasis(kernel, tuple(factors), z, lam_k.copy(), vectors, math.nan, pq_axis, Eq)
    # residual variance on the grid, before clamping
    diag_q = basis.reduced_diag(basis.grid)
    v_grid = diag_q - vectors**2 @ lam_k
    object.__setattr__(basis, "min_v_on_grid", float(v_grid.min()))
    if v_grid.min() < 0:
        log.info("residual variance on the grid reaches %.3e before clamping", v_grid.min())
    return basis


def grid_eigenvalues(kernel: Kernel, grid_points: int = 100) -> np.ndarray:
    """All eigenvalues of the grid-reduced operator of a 1-D kernel."""
    z = np.linspace(0.0, 1.0, grid_points)[:, None]
    K = kernel(z)
    C = K - K.mean(axis=0, keepdims=True)
    C = C - C.mean(axis=1, keepdims=True)
    return eigh(0.5 * (C + C.T) / grid_points, eigvals_only=True)[::-1]


# ---------------------------------------------------------------------------
# Bayesian information matrix
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Regressors:
    """Scaled regressors ``a(x) = psi(x) / sqrt(v(x))`` at a set of points."""

    points: np.ndarray
    a: np.ndarray
    floored: np.ndarray

    @classmethod
    def at(cls, basis: KLBasis, X) -> Regressors:
        X = as_points(X, basis.dim)
        phi = basis.eigenfunctions(X)
        v_raw = basis.reduced_diag(X) - phi**2 @ basis.eigenvalues
        floored = v_raw < V_FLOOR
        if np.any(floored):
            log.info("residual variance floored at %d point(s)", int(floored.sum()))
        v = np.where(floored, V_FLOOR, v_raw)
        psi = np.column_stack([np.ones(X.shape[0]), phi])
        return cls(X, psi / np.sqrt(v)[:, None], floored)


@dataclass(frozen=True)
class BayesInfoMatrix:
    matrix: np.ndarray
    m: float
    prior: np.ndarray
    floored: bool

    def inverse_11(self) -> float:
        """``{M_B^{-1}}_{1,1}``, the c-optimality criterion for the intercept."""
        c = np.zeros(self.matrix.shape[0])
        c[0] = 1.0
        return float(cho_solve(cho_factor(self.matrix), c)[0])

    def a_criterion(self) -> float:
        """``tr M_B^{-1}``, reported for information only."""
        return float(np.trace(cho_solve(cho_factor(self.matrix), np.eye(self.matrix.shape[0]))))


def prior_precision(basis: KLBasis) -> np.ndarray:
    """``diag(0, 1/Lambda_1, ..., 1/Lambda_{M-1})``."""
    return np.concatenate([[0.0], 1.0 / basis.eigenvalues])


def info_matrix(basis: KLBasis, xi: DiscreteSignedMeasure, m: float, regressors: Regressors | None = None) -> BayesInfoMatrix:
    """``M_{B,m}(xi) = sum_i xi_i psi psi' / v + Lambda^{-1} / m``."""
    if m <= 0:
        raise ValueError("m must be positive")
    if np.any(xi.weights < 0) or abs(xi.total_mass() - 1.0) > 1e-12:
        raise ValueError("xi must be a probability measure")
    reg = regressors if regressors is not None else Regressors.at(basis, xi.support)
    a = reg.a
    prior = prior_precision(basis)
    Mb = (a * xi.weights[:, None]).T @ a + np.diag(prior / m)
    return BayesInfoMatrix(0.5 * (Mb + Mb.T), float(m), prior, bool(reg.floored.any()))


def info_matrix_design(basis: KLBasis, X) -> np.ndarray:
    """``M_B(X_n) = sum_i psi(x_i) psi(x_i)' / v(x_i) + Lambda^{-1}`` for an exact design."""
    a = Regressors.at(basis, X).a
    return a.T @ a + np.diag(prior_precision(basis))


# ---------------------------------------------------------------------------
# c-optimal design measure by vertex exchange
# ---------------------------------------------------------------------------


@dataclass
class COptimalResult:
    candidates: np.ndarray
    weights: np.ndarray
    criterion: list[float]
    min_derivative: float
    iterations: int
    converged: bool

    @property
    def measure(self) -> DiscreteSignedMeasure:
        supp = np.flatnonzero(self.weights > 0)
        return DiscreteSignedMeasure(self.candidates[supp], self.weights[supp])

    @property
    def support_indices(self) -> np.ndarray:
        return np.flatnonzero(self.weights > 0)


def _info(a: np.ndarray, w: np.ndarray, prior_m: np.ndarray) -> np.ndarray:
    supp = np.flatnonzero(w > 0)
    As = a[supp]
    return (As * w[supp, None]).T @ As + np.diag(prior_m)


def directional_derivatives(a: np.ndarray, w: np.ndarray, prior_m: np.ndarray) -> tuple[np.ndarray, float]:
    """``d/dalpha {M_B^{-1}[(1-alpha) xi + alpha delta_x]}_{11}`` at 0 for every row of ``a``.

    Returns the derivatives and the current criterion value.
    """
    Mb = _info(a, w, prior_m)
    q = cho_solve(cho_factor(Mb), np.eye(Mb.shape[0])[:, 0])
    s = a @ q
    return -(s**2) + float(np.sum(w * s**2)), float(q[0])


def c_optimal_measure(
    basis: KLBasis,
    candidates,
    m: float,
    max_iter: int = 5000,
    tol: float = 1e-6,
) -> COptimalResult:
    """Minimize ``{M_{B,m}^{-1}(xi)}_{1,1}`` over probability measures on the candidates.

    Vertex exchange from the uniform measure: each iteration moves mass from
    the support point with the largest directional derivative to the
    candidate with the smallest one, with the step minimizing the criterion
    exactly along that segment.  Stops once every directional derivative
    exceeds ``-tol``.
    """
    candidates = as_points(candidates, basis.dim)
    a = Regressors.at(basis, candidates).a
    prior_m = prior_precision(basis) / m
    Omega = candidates.shape[0]
    w = np.full(Omega, 1.0 / Omega)
    e1 = np.zeros(a.shape[1])
    e1[0] = 1.0
    F, crit = directional_derivatives(a, w, prior_m)
    trace = [crit]
    it = 0
    converged = False
    while True:
        if F.min() > -tol:
            converged = True
            break
        if it >= max_iter:
            log.warning("c-optimal design stopped after %d iterations (min derivative %.3e)", it, F.min())
            break
        it += 1
        supp = np.flatnonzero(w > 0)
        i_plus = int(np.argmin(F))
        i_minus = int(supp[np.argmax(F[supp])])
        alpha = 0.0
        if i_plus != i_minus:
            Mb = _info(a, w, prior_m)
            cf = cho_factor(Mb)
            U = np.column_stack([a[i_plus], a[i_minus]])
            MiU = cho_solve(cf, U)
            G = U.T @ MiU
            b = MiU.T @ e1
            S = np.diag([1.0, -1.0])

            def drop(t):
                # criterion decrease along the segment, by the Woodbury identity
                return t * float(b @ np.linalg.solve(S + t * G, b))

            cap = float(w[i_minus])
            res = minimize_scalar(lambda t: -drop(t), bounds=(0.0, cap), method="bounded", options={"xatol": 1e-14 + 1e-10 * cap})
            best_t, best_drop = 0.0, 0.0
            for t in (float(res.x), cap):
                dt = drop(t)
                if dt > best_drop:
                    best_t, best_drop = t, dt
            alpha = best_t
        if alpha > 0:
            w[i_plus] += alpha
            w[i_minus] = 0.0 if alpha >= w[i_minus] else w[i_minus] - alpha
        F_new, crit_new = directional_derivatives(a, w, prior_m)
        if crit_new > trace[-1]:
            # rounding in the Woodbury form; undo the move
            w[i_minus] += alpha
            w[i_plus] -= alpha
            F_new, crit_new = directional_derivatives(a, w, prior_m)
            alpha = 0.0
        F, crit = F_new, crit_new
        trace.append(crit)
        if alpha == 0.0 and i_plus != i_minus and F.min() <= -tol:
            # no progress possible along the exchange direction
            log.warning("vertex exchange stalled at iteration %d", it)
            break
    return COptimalResult(candidates, w, trace, float(F.min()), it, converged)


def extract_exact_design(xi: DiscreteSignedMeasure, n: int) -> np.ndarray:
    """``n`` support points chosen by decreasing weight with a spacing rule.

    A point is skipped when it lies within half the median nearest-neighbour
    distance of the support from an already chosen point; skipped points are
    used afterwards, again by decreasing weight, if fewer than ``n`` were
    chosen.  Returns indices into ``xi.support``.
    """
    if not 1 <= n <= xi.n:
        raise ValueError(f"n must lie in [1, {xi.n}]")
    order = np.argsort(-xi.weights, kind="stable")
    if xi.n == 1:
        return order[:1]
    X = xi.support
    D = np.sqrt(np.sum((X[:, None, :] - X[None, :, :]) ** 2, axis=-1))
    np.fill_diagonal(D, np.inf)
    threshold = 0.5 * float(np.median(D.min(axis=1)))
    chosen: list[int] = []
    skipped: list[int] = []
    for i in order:
        if len(chosen) == n:
            break
        if chosen and D[i, chosen].min() < threshold:
            skipped.append(int(i))
        else:
            chosen.append(int(i))
    chosen.extend(skipped[: n - len(chosen)])
    return np.asarray(chosen)
