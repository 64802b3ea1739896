"""Space-filling metrics, spectral quantities and convergence-bound evaluators."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import pdist

from kdesign.kernels import Kernel, RieszLog, RieszSingular, as_points


def covering_radius(design, eval_set) -> float:
    """``max_{z in eval_set} min_i ||z - x_i||``.

    This under-approximates the covering radius of the continuous domain
    unless ``eval_set`` contains the maximizer.
    """
    design = as_points(design)
    eval_set = as_points(eval_set)
    if design.shape[0] == 0 or eval_set.shape[0] == 0:
        raise ValueError("design and evaluation set must be nonempty")
    if design.shape[1] != eval_set.shape[1]:
        raise ValueError("dimension mismatch between design and evaluation set")
    dist, _ = cKDTree(design).query(eval_set, k=1)
    return float(np.max(dist))


def packing_radius(design) -> float:
    """Half the minimum pairwise distance."""
    design = as_points(design)
    if design.shape[0] < 2:
        raise ValueError("the packing radius needs at least two points")
    return 0.5 * float(np.min(pdist(design)))


@dataclass(frozen=True)
class MetricReport:
    cr: float
    pr: float
    cr_exact: bool
    evaluation_set_size: int


def metric_report(design, eval_set) -> MetricReport:
    eval_set = as_points(eval_set)
    return MetricReport(covering_radius(design, eval_set), packing_radius(design), False, eval_set.shape[0])


def physical_energy(design, kernel: Kernel) -> float:
    """Mean off-diagonal kernel value ``2/(n(n-1)) sum_{i<j} K(x_i, x_j)``."""
    if not isinstance(kernel, (RieszSingular, RieszLog)):
        raise TypeError("physical energy is defined for Riesz and logarithmic kernels")
    design = as_points(design)
    n = design.shape[0]
    if n < 2:
        raise ValueError("physical energy needs at least two points")
    r = pdist(design)
    if np.any(r == 0):
        raise ValueError("design points must be pairwise distinct")
    return float(np.mean(kernel.profile(r)))


def fine_grid(d: int, per_axis: int = 2**7) -> np.ndarray:
    """Regular grid with ``per_axis`` points per coordinate, boundaries included."""
    axis = np.linspace(0.0, 1.0, per_axis)
    mesh = np.meshgrid(*([axis] * d), indexing="ij")
    return np.column_stack([m.ravel() for m in mesh])


def default_eval_set(d: int, candidates=None) -> np.ndarray:
    """Evaluation set for covering radii.

    The candidate set when one is supplied; otherwise a 2^7-per-axis grid for
    ``d <= 3`` and 2^19 Sobol points completed by the 3^d factorial design
    (``d <= 12``) beyond that.
    """
    if candidates is not None:
        return as_points(candidates)
    if d <= 3:
        return fine_grid(d)
    from kdesign.candidates import sobol

    pts = sobol(d, 2**19).points
    if d <= 12:
        pts = np.vstack([pts, fine_grid(d, 3)])
    return pts


def lambda_max(A, tol: float = 1e-10, max_iter: int = 100_000, seed: int = 0) -> float:
    """Largest eigenvalue of a symmetric matrix by power iteration.

    The iteration converges to the eigenvalue of largest magnitude; if that
    one is negative, the matrix is shifted by its magnitude and the iteration
    rerun so that the algebraically largest eigenvalue is returned.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("lambda_max needs a square matrix")
    if not np.allclose(A, A.T, rtol=0, atol=1e-12 * max(1.0, np.abs(A).max())):
        raise ValueError("lambda_max needs a symmetric matrix")
    lam = _power_iteration(A, tol, max_iter, seed)
    if lam < 0:
        shift = -lam
        lam = _power_iteration(A + shift * np.eye(A.shape[0]), tol, max_iter, seed) - shift
    return lam


def _power_iteration(A, tol, max_iter, seed) -> float:
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(A.shape[0])
    v /= np.linalg.norm(v)
    w = A @ v
    lam = float(v @ w)
    for _ in range(max_iter):
        # for symmetric A the Rayleigh-quotient error is of order |r|^2 / gap
        if np.linalg.norm(w - lam * v) <= 0.1 * math.sqrt(tol) * abs(lam):
            break
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        w = A @ v
        lam = float(v @ w)
    return lam


# ---------------------------------------------------------------------------
# Convergence bounds for conditional-gradient herding
# ---------------------------------------------------------------------------


class Lemma(enum.Enum):
    HARMONIC = "harmonic"
    TWO_OVER_N_PLUS_3 = "two-over-n-plus-3"
    OPTIMAL_STEP = "optimal-step"
    INTERIOR = "interior"
    INITIAL_PHASE = "initial-phase"
    VERTEX_EXCHANGE = "vertex-exchange"


@dataclass(frozen=True)
class BoundInputs:
    """Constants entering the bounds on ``||omega_n - omega_hat||_K^2``."""

    lambda_max: float
    omega: int
    w_star: float = math.nan
    L: float = math.nan

    @property
    def R_star(self) -> float:
        return math.sqrt(self.lambda_max * (1.0 - 1.0 / self.omega))

    @property
    def alpha_star(self) -> float:
        return self.w_star / self.L

    @classmethod
    def from_matrix(cls, K: np.ndarray, w_hat: np.ndarray | None = None) -> BoundInputs:
        """Constants for Gram matrix ``K`` and optimal weights ``w_hat``."""
        lam = lambda_max(K)
        if w_hat is None:
            return cls(lam, K.shape[0])
        L = math.sqrt(float(np.max(np.diag(np.linalg.inv(K)))))
        return cls(lam, K.shape[0], float(np.min(w_hat)), L)


def bound_value(lemma: Lemma | str, inputs: BoundInputs, n: int) -> float:
    """Right-hand side of the selected bound at iteration ``n >= 1``."""
    lemma = Lemma(lemma)
    lam = inputs.lambda_max
    if n < 1:
        raise ValueError("bounds are stated for n >= 1")
    if lemma is Lemma.HARMONIC:
        return 2.0 * lam * (1.0 + 2.0 * math.log(n + 1)) / n
    if lemma in (Lemma.TWO_OVER_N_PLUS_3, Lemma.OPTIMAL_STEP, Lemma.VERTEX_EXCHANGE):
        return 8.0 * lam / (n + 3)
    if lemma is Lemma.INTERIOR:
        R2 = inputs.R_star**2
        return 4.0 * R2 * (1.0 + R2 / inputs.alpha_star**2) / n**2
    if lemma is Lemma.INITIAL_PHASE:
        return lam / n
    raise ValueError(f"unknown lemma {lemma!r}")
