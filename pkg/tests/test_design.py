import itertools

import numpy as np
import pytest

from kdesign.candidates import grid, sobol
from kdesign.design import (
    HerdingState,
    KernelColumns,
    MatrixColumns,
    RefineObjective,
    center_index,
    coffee_house_order,
    dunn_sequence,
    empirical_mmd_trace,
    herd_select,
    herd_step,
    herding,
    lowest_argmin,
    min_energy_weights,
    optimal_step,
    refine_design,
    sbq_greedy,
    sbq_scores,
    vertex_exchange_step,
)
from kdesign.kernels import Matern32, TensorProduct, TriangularOneMinus
from kdesign.measures import ClosedFormUniform, DiscreteSignedMeasure, energy_of_signed_diff
from kdesign.metrics import covering_radius, packing_radius
from kdesign.quadrature import assemble, variance_reduced

K2 = TensorProduct.power(Matern32(10.0), 2)


def _reduced_instance(per_axis=8):
    cand = grid(2, per_axis).points
    g = assemble(K2, cand, ClosedFormUniform(K2))
    u = g.Kt_factor.solve(np.ones(len(cand)))
    return cand, g.Kt, u / u.sum()


def test_herd_select_on_three_points():
    k = TriangularOneMinus(1.0)
    cand = np.array([[0.0], [0.5], [1.0]])
    st = HerdingState.start(KernelColumns(k, cand), ClosedFormUniform(k)(cand), 2 / 3, init_index=1)
    np.testing.assert_allclose(st.scores(), [0.0, 0.25, 0.0], atol=1e-15)
    assert herd_select(st) == 0


def test_harmonic_step_gives_equal_weights():
    cand, Kt, _ = _reduced_instance()
    st = HerdingState.start(MatrixColumns(Kt), np.zeros(len(cand)), 0.0, init_index=0)
    i, alpha = herd_step(st, "harmonic")
    assert alpha == 0.5
    assert st.omega[0] == 0.5 and st.omega[i] == 0.5


def test_lowest_argmin_breaks_ties_by_index_for_any_thread_count():
    v = np.array([3.0, 1.0, 2.0, 1.0, 1.0, 5.0, 1.0])
    assert all(lowest_argmin(v, t) == 1 for t in (1, 2, 3, 7, 16))
    with pytest.raises(ValueError):
        lowest_argmin(np.array([]))


def test_dunn_sequence():
    assert dunn_sequence(0) == 1.0
    assert dunn_sequence(1) == 0.5
    assert dunn_sequence(2) == 0.375
    cand, Kt, _ = _reduced_instance()
    st = HerdingState.start(MatrixColumns(Kt), np.zeros(len(cand)), 0.0, init_index=0)
    alphas = [herd_step(st, "dunn")[1] for _ in range(5)]
    assert alphas == [dunn_sequence(k) for k in range(1, 6)]


def test_optimal_step_matches_the_reduced_gram_formula(rng):
    cand, Kt, w_hat = _reduced_instance()
    N = len(cand)
    for _ in range(5):
        omega = np.zeros(N)
        idx = rng.choice(N, 20, replace=False)
        omega[idx] = rng.dirichlet(np.ones(20))
        st = HerdingState.start(MatrixColumns(Kt), np.zeros(N), 0.0, init_weights=omega)
        i = herd_select(st)
        d = -omega.copy()
        d[i] += 1
        expected = d @ Kt @ (w_hat - omega) / (d @ Kt @ d)
        assert optimal_step(st, i) == pytest.approx(expected, rel=1e-9)


def test_cached_quantities_match_a_fresh_computation():
    cand, Kt, _ = _reduced_instance()
    st = HerdingState.start(MatrixColumns(Kt), np.zeros(len(cand)), 0.0, init_index=center_index(cand))
    for _ in range(50):
        herd_step(st, "two-over-n-plus-3")
    np.testing.assert_allclose(st.potentials, Kt @ st.omega, atol=1e-13)
    assert st.mmd_sq() == pytest.approx(st.omega @ Kt @ st.omega, rel=1e-11)
    assert st.omega.sum() == pytest.approx(1.0, abs=1e-14)


def test_vertex_exchange_decreases_the_energy():
    cand, Kt, _ = _reduced_instance()
    st = HerdingState.start(MatrixColumns(Kt), np.zeros(len(cand)), 0.0, init_index=center_index(cand))
    previous = st.mmd_sq()
    for _ in range(200):
        info = vertex_exchange_step(st)
        assert st.mmd_sq() <= previous + 1e-15
        assert info.alpha <= info.alpha_hat + 1e-15
        previous = st.mmd_sq()
        if st.converged:
            break
    assert np.all(st.omega >= 0)
    assert st.omega.sum() == pytest.approx(1.0, abs=1e-13)


def test_herding_trace_reports_the_exact_mmd():
    k = TensorProduct.power(Matern32(4.0), 2)
    prov = ClosedFormUniform(k)
    cand = sobol(2, 256).points
    run = herding(k, prov, cand, 30)
    omega = run.state.omega
    xi = DiscreteSignedMeasure(cand[omega > 0], omega[omega > 0])
    assert run.trace[-1][3] == pytest.approx(energy_of_signed_diff(k, xi, prov), rel=1e-9)
    assert run.trace[-1][4] == pytest.approx(covering_radius(run.design, cand))
    assert run.trace[-1][5] == pytest.approx(packing_radius(run.design))
    assert len(set(run.design_indices)) == len(run.design_indices)


def test_herding_is_independent_of_the_thread_count():
    prov = ClosedFormUniform(K2)
    cand = sobol(2, 512).points
    a = herding(K2, prov, cand, 40, threads=1)
    b = herding(K2, prov, cand, 40, threads=5)
    assert a.design_indices == b.design_indices
    assert [r[3] for r in a.trace] == [r[3] for r in b.trace]


def test_vertex_exchange_run():
    prov = ClosedFormUniform(K2)
    cand = sobol(2, 256).points
    run = herding(K2, prov, cand, 60, algorithm="vertex-exchange")
    mmd = [r[3] for r in run.trace]
    assert all(b <= a + 1e-14 for a, b in zip(mmd, mmd[1:]))
    with pytest.raises(ValueError):
        herding(K2, prov, cand, 5, algorithm="simplex")


def test_empirical_mmd_trace_matches_direct_evaluation(rng):
    prov = ClosedFormUniform(K2)
    X = rng.random((12, 2))
    trace = empirical_mmd_trace(K2, prov, X)
    for n in (1, 5, 12):
        xi = DiscreteSignedMeasure.empirical(X[:n])
        assert trace[n - 1] == pytest.approx(energy_of_signed_diff(K2, xi, prov), rel=1e-10)


def test_sequential_bayesian_quadrature_incremental_variance(rng):
    prov = ClosedFormUniform(K2)
    cand = sobol(2, 128).points
    X = rng.random((4, 2))
    for _ in range(6):
        g = assemble(K2, X, prov)
        i, s2 = sbq_greedy(g, K2, prov, cand)
        X = np.vstack([X, cand[i]])
        assert s2 == pytest.approx(variance_reduced(assemble(K2, X, prov)), rel=1e-8)
    # design points are degenerate candidates
    assert np.all(np.isneginf(sbq_scores(assemble(K2, X, prov), K2, prov, X)))


def test_coffee_house_order_small_pool():
    assert coffee_house_order([0.1, 0.5, 0.9]) == [1, 0, 2]


def test_coffee_house_prefixes_are_within_twice_the_best_covering(rng):
    pool = rng.random((8, 2))
    order = coffee_house_order(pool)
    assert sorted(order) == list(range(8))
    for n in range(1, 8):
        prefix = pool[order[:n]]
        cr = covering_radius(prefix, pool)
        best = min(covering_radius(pool[list(s)], pool) for s in itertools.combinations(range(8), n))
        assert cr <= 2 * best + 1e-15
        if n > 1:
            assert cr <= 2 * packing_radius(prefix) + 1e-15


@pytest.mark.parametrize("objective", list(RefineObjective))
def test_refinement_improves_monotonically_and_stays_in_the_box(objective, rng):
    prov = ClosedFormUniform(K2)
    X = rng.random((10, 2))
    res = refine_design(X, K2, prov, objective, budget=2000)
    h = np.array(res.history)
    if objective is RefineObjective.MAXIMIZE_INV_QUAD:
        assert np.all(np.diff(h) >= -1e-12 * np.abs(h[1:]))
        assert res.objective > h[0]
    else:
        assert np.all(np.diff(h) <= 1e-12 * np.abs(h[1:]))
        assert res.objective < h[0]
    assert res.design.min() >= 0 and res.design.max() <= 1
    assert res.evaluations <= 2000


def test_min_energy_weights():
    x = np.linspace(0, 1, 5)
    K = -np.abs(x[:, None] - x[None, :])
    w = min_energy_weights(K)
    assert np.all(w >= 0) and w.sum() == pytest.approx(1.0)
    # the minimizer for -|x - x'| on [0, 1] puts all mass on the endpoints
    np.testing.assert_allclose(w, [0.5, 0, 0, 0, 0.5], atol=1e-9)
    A = np.array([[2.0, 0.5], [0.5, 1.0]])
    np.testing.assert_allclose(min_energy_weights(A), [0.25, 0.75])
