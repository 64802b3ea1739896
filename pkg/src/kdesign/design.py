"""Sequential design constructions over a finite candidate set.

Kernel herding is conditional-gradient minimization of ``E_K(xi - mu)`` over
probability measures on the candidates.  The state stores a dense weight
vector ``omega`` and the cached potentials ``K omega``; every selection is an
argmin of ``K omega - p`` where ``p`` holds the target potentials ``P_mu``.
The same engine runs on an explicit matrix (:class:`MatrixColumns`), which
is how the convergence bounds are exercised on abstract instances.
"""

from __future__ import annotations

import enum
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from kdesign.kernels import Kernel, as_points
from kdesign.measures import PotentialProvider
from kdesign.quadrature import GramBundle, factorize

log = logging.getLogger(__name__)

RECOMPUTE_EVERY = 64
"""Number of steps between exact recomputations of the cached potentials."""


# ---------------------------------------------------------------------------
# Gram-column sources
# ---------------------------------------------------------------------------


class GramColumns(Protocol):
    size: int
    singular: bool

    def column(self, i: int) -> np.ndarray: ...

    def diag(self) -> np.ndarray: ...


def _chunks(size: int, parts: int) -> list[slice]:
    bounds = np.linspace(0, size, parts + 1).astype(int)
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


class KernelColumns:
    """Columns ``K(s_., s_i)`` of the candidate Gram matrix, computed on demand.

    With ``threads > 1`` a column is evaluated in contiguous chunks by a thread
    pool; each entry is computed independently, so the result does not depend
    on the number of threads.
    """

    def __init__(self, kernel: Kernel, candidates, threads: int = 1):
        self.kernel = kernel
        self.candidates = as_points(candidates, kernel.dim)
        self.size = self.candidates.shape[0]
        self.singular = kernel.singular
        self.threads = max(1, int(threads))
        self._cache: dict[int, np.ndarray] = {}
        self._pool = ThreadPoolExecutor(self.threads) if self.threads > 1 else None

    def column(self, i: int) -> np.ndarray:
        col = self._cache.get(i)
        if col is None:
            x = self.candidates[i : i + 1]
            if self._pool is None:
                col = self.kernel(self.candidates, x)[:, 0]
            else:
                parts = _chunks(self.size, self.threads)
                col = np.concatenate(list(self._pool.map(lambda s: self.kernel(self.candidates[s], x)[:, 0], parts)))
            col.flags.writeable = False
            self._cache[i] = col
        return col

    def diag(self) -> np.ndarray:
        return self.kernel.diag(self.candidates)

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()


class MatrixColumns:
    """Columns of an explicit symmetric matrix."""

    def __init__(self, K: np.ndarray):
        self.K = np.asarray(K, dtype=float)
        self.size = self.K.shape[0]
        self.singular = False

    def column(self, i: int) -> np.ndarray:
        return self.K[:, i]

    def diag(self) -> np.ndarray:
        return np.diag(self.K).copy()


def lowest_argmin(values: np.ndarray, threads: int = 1) -> int:
    """Index of the minimum, the lowest index among ties, reduced over chunks."""
    if values.size == 0:
        raise ValueError("empty candidate set")
    if threads <= 1:
        return int(np.argmin(values))
    best_val, best_idx = math.inf, -1
    for part in _chunks(values.size, threads):
        j = part.start + int(np.argmin(values[part]))
        if values[j] < best_val or best_idx < 0:
            best_val, best_idx = values[j], j
    return best_idx


# ---------------------------------------------------------------------------
# Step-size policies
# ---------------------------------------------------------------------------


class StepPolicy(enum.Enum):
    HARMONIC = "harmonic"
    TWO_OVER_N_PLUS_3 = "two-over-n-plus-3"
    DUNN = "dunn"
    OPTIMAL = "optimal"


def dunn_sequence(n: int) -> float:
    """``alpha_n`` of the recursion ``alpha_{k+1} = alpha_k - alpha_k^2 / 2``, ``alpha_0 = 1``."""
    a = 1.0
    for _ in range(n):
        a -= a * a / 2.0
    return a


# ---------------------------------------------------------------------------
# Herding state
# ---------------------------------------------------------------------------


@dataclass
class HerdingState:
    """Weights on the candidates and cached potentials of the current measure.

    ``n`` counts iterations; the initial measure is ``omega^{(1)}``.
    """

    columns: GramColumns
    target: np.ndarray
    Emu: float
    omega: np.ndarray
    potentials: np.ndarray
    n: int = 1
    energy: float = math.nan
    cross: float = math.nan
    history: list[int] = field(default_factory=list)
    alphas: list[float] = field(default_factory=list)
    threads: int = 1
    steps_since_refresh: int = 0
    dunn_alpha: float = 1.0
    converged: bool = False

    @classmethod
    def start(
        cls,
        columns: GramColumns,
        target,
        Emu: float,
        init_index: int | None = None,
        init_weights=None,
        threads: int = 1,
    ) -> HerdingState:
        """State at a vertex ``e_{init_index}`` or at arbitrary simplex weights."""
        target = np.asarray(target, dtype=float)
        if target.shape != (columns.size,):
            raise ValueError("target potentials must have one entry per candidate")
        if init_weights is None:
            if init_index is None:
                raise ValueError("give either init_index or init_weights")
            omega = np.zeros(columns.size)
            omega[init_index] = 1.0
            history = [int(init_index)]
        else:
            omega = np.asarray(init_weights, dtype=float).copy()
            if np.any(omega < 0) or abs(omega.sum() - 1.0) > 1e-12:
                raise ValueError("initial weights must lie in the probability simplex")
            history = []
        st = cls(columns, target, float(Emu), omega, np.zeros(columns.size), history=history, threads=threads)
        st.refresh()
        st.dunn_alpha = dunn_sequence(1)
        return st

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.omega > 0)

    def refresh(self) -> None:
        """Recompute potentials and energies exactly, in a fixed summation order."""
        pot = np.zeros(self.columns.size)
        for j in self.support:
            pot += self.omega[j] * self.columns.column(int(j))
        self.potentials = pot
        supp = self.support
        with np.errstate(invalid="ignore"):
            self.energy = float(np.sum(self.omega[supp] * pot[supp]))
        self.cross = float(np.sum(self.omega[supp] * self.target[supp]))
        self.steps_since_refresh = 0

    def scores(self) -> np.ndarray:
        """``P_xi(s) - P_mu(s)`` on the candidates."""
        return self.potentials - self.target

    def mmd_sq(self) -> float:
        """``E_K(xi - mu) = E(xi) - 2 int P_mu dxi + E_K(mu)``."""
        return self.energy - 2.0 * self.cross + self.Emu

    def _after_update(self) -> None:
        self.n += 1
        self.steps_since_refresh += 1
        if self.steps_since_refresh >= RECOMPUTE_EVERY:
            self.refresh()


def herd_select(st: HerdingState) -> int:
    """Candidate minimizing ``P_xi - P_mu``; ties go to the lowest index."""
    return lowest_argmin(st.scores(), st.threads)


def optimal_step(st: HerdingState, i: int) -> float:
    """Unclamped line-search step towards vertex ``i``.

    ``[E(xi) - P_xi(x) - int P_mu dxi + P_mu(x)] / [E(xi) - 2 P_xi(x) + K(x, x)]``.
    """
    col = st.columns.column(i)
    num = st.energy - st.potentials[i] - st.cross + st.target[i]
    den = st.energy - 2.0 * st.potentials[i] + col[i]
    if den <= 0:
        return 0.0
    return num / den


def herd_step(st: HerdingState, policy: StepPolicy | str = StepPolicy.HARMONIC) -> tuple[int, float]:
    """One conditional-gradient step ``xi <- (1 - alpha) xi + alpha delta_x``.

    Returns the selected index and the step size used.
    """
    policy = StepPolicy(policy)
    i = herd_select(st)
    n = st.n
    if policy is StepPolicy.HARMONIC:
        alpha = 1.0 / (n + 1)
    elif policy is StepPolicy.TWO_OVER_N_PLUS_3:
        alpha = 2.0 / (n + 3)
    elif policy is StepPolicy.DUNN:
        alpha = st.dunn_alpha
        st.dunn_alpha -= alpha * alpha / 2.0
    else:
        if st.columns.singular:
            raise ValueError("the optimal step needs a kernel that is finite on the diagonal")
        alpha = min(1.0, max(0.0, optimal_step(st, i)))
    col = st.columns.column(i)
    p_i, kii = st.potentials[i], col[i]
    st.energy = (1 - alpha) ** 2 * st.energy + 2 * alpha * (1 - alpha) * p_i + alpha**2 * kii
    st.cross = (1 - alpha) * st.cross + alpha * st.target[i]
    st.omega *= 1.0 - alpha
    st.omega[i] += alpha
    st.potentials = (1.0 - alpha) * st.potentials + alpha * col
    st.history.append(i)
    st.alphas.append(alpha)
    st._after_update()
    return i, alpha


@dataclass(frozen=True)
class ExchangeInfo:
    added: int
    removed: int
    alpha: float
    alpha_hat: float
    clipped: bool


def vertex_exchange_step(st: HerdingState) -> ExchangeInfo:
    """Move mass from the worst support point to the best candidate.

    The step is the exact line minimizer, capped by the mass available at the
    removed point.  A zero step sets ``st.converged``.
    """
    g = st.scores()
    supp = st.support
    if supp.size == 0:
        raise ValueError("vertex exchange needs a nonempty support")
    i_plus = lowest_argmin(g, st.threads)
    i_minus = int(supp[np.argmax(g[supp])])
    col_p = st.columns.column(i_plus)
    col_m = st.columns.column(i_minus)
    den = col_m[i_minus] + col_p[i_plus] - 2.0 * col_p[i_minus]
    if i_plus == i_minus or not den > 0 or g[i_minus] <= g[i_plus]:
        st.converged = True
        st.n += 1
        st.alphas.append(0.0)
        st.history.append(i_plus)
        return ExchangeInfo(i_plus, i_minus, 0.0, 0.0, False)
    alpha_hat = (g[i_minus] - g[i_plus]) / den
    available = st.omega[i_minus]
    clipped = alpha_hat > available
    alpha = available if clipped else alpha_hat
    if clipped:
        log.debug("vertex exchange step %d clipped: alpha_hat %.3e > available mass %.3e", st.n, alpha_hat, available)
    pot_p, pot_m = st.potentials[i_plus], st.potentials[i_minus]
    # E(omega + alpha d) with d = e+ - e-
    st.energy = st.energy + 2 * alpha * (pot_p - pot_m) + alpha**2 * den
    st.cross = st.cross + alpha * (st.target[i_plus] - st.target[i_minus])
    st.omega[i_plus] += alpha
    if clipped:
        st.omega[i_minus] = 0.0
    else:
        st.omega[i_minus] -= alpha
    st.potentials = st.potentials + alpha * (col_p - col_m)
    st.history.append(i_plus)
    st.alphas.append(alpha)
    st._after_update()
    return ExchangeInfo(i_plus, i_minus, alpha, alpha_hat, bool(clipped))


def center_index(candidates, center=None) -> int:
    """Candidate nearest to ``center`` (default: the middle of the unit cube)."""
    candidates = as_points(candidates)
    if center is None:
        center = np.full(candidates.shape[1], 0.5)
    d = np.sum((candidates - np.asarray(center, dtype=float)) ** 2, axis=1)
    return int(np.argmin(d))


# ---------------------------------------------------------------------------
# Herding runs with traces
# ---------------------------------------------------------------------------


@dataclass
class HerdingRun:
    """Result of a herding or vertex-exchange run.

    ``trace`` rows hold ``n, selected_index, alpha, mmd_sq, cr, pr``; the
    covering and packing radii are those of the distinct selected points.
    """

    candidates: np.ndarray
    state: HerdingState
    design_indices: list[int]
    trace: list[tuple[int, int, float, float, float, float]]

    @property
    def design(self) -> np.ndarray:
        return self.candidates[self.design_indices]


class _GeometryTracker:
    """Incremental covering radius (over a fixed set) and packing radius."""

    def __init__(self, eval_set: np.ndarray):
        self.eval_set = eval_set
        self.dmin = np.full(eval_set.shape[0], np.inf)
        self.points: list[np.ndarray] = []
        self.pr = math.inf

    def add(self, x: np.ndarray) -> None:
        d = np.sqrt(np.sum((self.eval_set - x) ** 2, axis=1))
        np.minimum(self.dmin, d, out=self.dmin)
        if self.points:
            dp = np.sqrt(np.sum((np.asarray(self.points) - x) ** 2, axis=1))
            self.pr = min(self.pr, 0.5 * float(dp.min()))
        self.points.append(x)

    @property
    def cr(self) -> float:
        return float(self.dmin.max())


def herding(
    kernel: Kernel,
    provider: PotentialProvider,
    candidates,
    n_max: int,
    policy: StepPolicy | str = StepPolicy.HARMONIC,
    init_index: int | None = None,
    eval_set=None,
    threads: int = 1,
    algorithm: str = "herding",
) -> HerdingRun:
    """Run kernel herding (or vertex exchange) for ``n_max`` iterations.

    The design is the sequence of distinct selected candidates, in order of
    first selection.
    """
    candidates = as_points(candidates, kernel.dim)
    policy = StepPolicy(policy)
    if policy is StepPolicy.OPTIMAL and kernel.singular:
        raise ValueError("the optimal step is not available for singular kernels")
    if init_index is None:
        init_index = center_index(candidates)
    columns = KernelColumns(kernel, candidates, threads)
    try:
        target = provider(candidates)
        st = HerdingState.start(columns, target, provider.energy(), init_index=init_index, threads=threads)
        geo = _GeometryTracker(candidates if eval_set is None else as_points(eval_set))
        design = [init_index]
        seen = {init_index}
        geo.add(candidates[init_index])
        trace = [(1, init_index, 1.0, st.mmd_sq(), geo.cr, geo.pr)]
        while st.n < n_max:
            if algorithm == "herding":
                i, alpha = herd_step(st, policy)
            elif algorithm == "vertex-exchange":
                info = vertex_exchange_step(st)
                i, alpha = info.added, info.alpha
                if st.converged:
                    break
            else:
                raise ValueError(f"unknown algorithm {algorithm!r}")
            if i not in seen:
                seen.add(i)
                design.append(i)
                geo.add(candidates[i])
            trace.append((st.n, i, alpha, st.mmd_sq(), geo.cr, geo.pr))
    finally:
        columns.close()
    return HerdingRun(candidates, st, design, trace)


def empirical_mmd_trace(kernel: Kernel, provider: PotentialProvider, points) -> np.ndarray:
    """``E_K(xi_{n,e} - mu)`` for every prefix of ``points``, computed incrementally."""
    points = as_points(points, kernel.dim)
    p = provider(points)
    Emu = provider.energy()
    out = np.empty(points.shape[0])
    total = 0.0
    for n in range(points.shape[0]):
        k = kernel(points[: n + 1], points[n : n + 1])[:, 0]
        kt = k - (p[: n + 1] + p[n]) + Emu
        total += 2.0 * float(np.sum(kt[:n])) + float(kt[n])
        out[n] = total / (n + 1) ** 2
    return out


# ---------------------------------------------------------------------------
# Sequential Bayesian quadrature
# ---------------------------------------------------------------------------


def sbq_scores(g: GramBundle, kernel: Kernel, provider: PotentialProvider, candidates) -> np.ndarray:
    """``(1 - kt'Kt^{-1}1)^2 / (K_mu(x,x) - kt'Kt^{-1}kt)`` for each candidate.

    Degenerate candidates (conditional variance below 1e-14) score ``-inf``.
    """
    candidates = as_points(candidates, kernel.dim)
    pc = provider(candidates)
    kt = kernel(g.design, candidates) - (g.p[:, None] + pc[None, :]) + g.Emu
    kmu_diag = kernel.diag(candidates) - 2.0 * pc + g.Emu
    fact = g.Kt_factor
    u = fact.solve(np.ones(g.n))
    V = fact.solve(kt)
    num = (1.0 - u @ kt) ** 2
    den = kmu_diag - np.sum(kt * V, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den > 1e-14, num / den, -np.inf)


def sbq_greedy(g: GramBundle, kernel: Kernel, provider: PotentialProvider, candidates) -> tuple[int, float]:
    """Best next candidate and the resulting ``s_{n+1}^2``."""
    scores = sbq_scores(g, kernel, provider, candidates)
    if not np.any(np.isfinite(scores)):
        raise np.linalg.LinAlgError("all candidates are degenerate")
    i = int(np.argmax(scores))
    return i, 1.0 / (g.inv_quad_ones() + scores[i])


# ---------------------------------------------------------------------------
# Coffee-house ordering
# ---------------------------------------------------------------------------


def coffee_house_order(pool, center=None) -> list[int]:
    """Greedy farthest-point ordering of ``pool`` starting next to ``center``."""
    pool = as_points(pool)
    if pool.shape[0] == 0:
        raise ValueError("empty pool")
    first = center_index(pool, center)
    order = [first]
    dmin = np.sqrt(np.sum((pool - pool[first]) ** 2, axis=1))
    dmin[first] = -np.inf
    for _ in range(pool.shape[0] - 1):
        j = int(np.argmax(dmin))
        order.append(j)
        np.minimum(dmin, np.sqrt(np.sum((pool - pool[j]) ** 2, axis=1)), out=dmin)
        dmin[order] = -np.inf
    return order


# ---------------------------------------------------------------------------
# Local refinement of a design
# ---------------------------------------------------------------------------


class RefineObjective(enum.Enum):
    MAXIMIZE_INV_QUAD = "max-inv-quad"
    MINIMIZE_EMPIRICAL_MMD = "min-empirical-mmd"


@dataclass
class RefineResult:
    design: np.ndarray
    objective: float
    history: list[float]
    evaluations: int
    final_step: float


def refine_design(
    design,
    kernel: Kernel,
    provider: PotentialProvider,
    objective: RefineObjective | str = RefineObjective.MAXIMIZE_INV_QUAD,
    budget: int = 200_000,
    step: float | None = None,
    shrink: float = 0.5,
    min_step: float = 1e-4,
    lower: float = 0.0,
    upper: float = 1.0,
) -> RefineResult:
    """Coordinate-wise pattern search on the design points.

    Each sweep tries ``x_i +/- h e_c`` for every point and coordinate and
    keeps improving moves; ``h`` shrinks when a sweep brings no improvement.
    ``budget`` bounds the number of trial evaluations.  The objective is
    ``1'Kt^{-1}1`` (maximized) or ``1'Kt 1 / n^2`` (minimized); points stay
    inside ``[lower, upper]^d``.
    """
    objective = RefineObjective(objective)
    if budget <= 0:
        raise ValueError("budget must be positive")
    X = as_points(design, kernel.dim).copy()
    n, d = X.shape
    Emu = provider.energy()
    if step is None:
        step = 0.05 * (upper - lower)
    maximize = objective is RefineObjective.MAXIMIZE_INV_QUAD
    sign = 1.0 if maximize else -1.0

    def reduced_gram(P):
        p = provider(P)
        return kernel(P) - (p[:, None] + p[None, :]) + Emu, p

    def value_of(P):
        Kt, _ = reduced_gram(P)
        if maximize:
            return float(np.sum(factorize(Kt).solve(np.ones(n))))
        return float(np.sum(Kt)) / n**2

    current = value_of(X)
    history = [current]
    evals = 0
    h = step
    ones = np.ones(n - 1)
    while h >= min_step and evals < budget:
        improved = False
        Kt, p = reduced_gram(X)
        C = factorize(Kt).solve(np.eye(n)) if maximize else None
        for i in range(n):
            if evals >= budget:
                break
            others = np.delete(np.arange(n), i)
            Xo = X[others]
            if maximize:
                c = C[others, i]
                A = C[np.ix_(others, others)] - np.outer(c, c) / C[i, i]
                a1 = A @ ones
                base = float(np.sum(a1))
            else:
                row_old = Kt[i, others]
                diag_old = Kt[i, i]
            for coord in range(d):
                for direction in (1.0, -1.0):
                    if evals >= budget:
                        break
                    trial = X[i].copy()
                    trial[coord] = min(upper, max(lower, trial[coord] + direction * h))
                    if trial[coord] == X[i, coord] or np.any(np.all(Xo == trial, axis=1)):
                        continue
                    evals += 1
                    pt = float(provider(trial[None, :])[0])
                    k = kernel(Xo, trial[None, :])[:, 0] - (p[others] + pt) + Emu
                    kxx = float(kernel.diag(trial[None, :])[0]) - 2.0 * pt + Emu
                    if maximize:
                        Ak = A @ k
                        schur = kxx - float(k @ Ak)
                        if not schur > 0:
                            continue
                        new = base + (1.0 - float(k @ a1)) ** 2 / schur
                    else:
                        new = current + (2.0 * float(np.sum(k - row_old)) + kxx - diag_old) / n**2
                    if sign * (new - current) > 1e-15 * abs(current):
                        X[i] = trial
                        p[i] = pt
                        current = new
                        improved = True
                        if maximize:
                            # block-inverse update of Kt^{-1} after moving point i
                            Ak = A @ k
                            C = np.empty((n, n))
                            C[np.ix_(others, others)] = A + np.outer(Ak, Ak) / schur
                            C[others, i] = C[i, others] = -Ak / schur
                            C[i, i] = 1.0 / schur
                        else:
                            Kt[i, others] = Kt[others, i] = k
                            Kt[i, i] = kxx
                            row_old, diag_old = k, kxx
                        break
                else:
                    continue
        current = value_of(X)
        history.append(current)
        if not improved:
            h *= shrink
    return RefineResult(X, current, history, evals, h)


# ---------------------------------------------------------------------------
# Minimum-energy probability weights on a finite set
# ---------------------------------------------------------------------------


def min_energy_weights(K: np.ndarray, max_iter: int = 100_000, tol: float = 1e-12) -> np.ndarray:
    """Probability weights minimizing ``w'Kw`` for a symmetric matrix ``K``.

    The sum-to-one minimizer comes from the KKT system; when it has negative
    entries the simplex-constrained problem is solved by vertex exchange
    from the uniform weights.
    """
    K = np.asarray(K, dtype=float)
    n = K.shape[0]
    kkt = np.zeros((n + 1, n + 1))
    kkt[:n, :n] = K
    kkt[:n, n] = kkt[n, :n] = 1.0
    rhs = np.zeros(n + 1)
    rhs[n] = 1.0
    try:
        w = np.linalg.solve(kkt, rhs)[:n]
        if np.all(w >= 0):
            return w
    except np.linalg.LinAlgError:
        pass
    st = HerdingState.start(MatrixColumns(K), np.zeros(n), 0.0, init_weights=np.full(n, 1.0 / n))
    for _ in range(max_iter):
        g = st.scores()
        supp = st.support
        if g[supp].max() - g.min() <= tol * max(1.0, abs(st.energy)):
            break
        vertex_exchange_step(st)
        if st.converged:
            break
    return st.omega.copy()
