import math

import numpy as np
import pytest
from scipy.spatial.distance import cdist

from kdesign.kernels import Matern32, RieszLog, RieszSingular
from kdesign.metrics import (
    BoundInputs,
    Lemma,
    bound_value,
    covering_radius,
    default_eval_set,
    fine_grid,
    lambda_max,
    metric_report,
    packing_radius,
    physical_energy,
)


def test_covering_and_packing_radii_against_brute_force(rng):
    X = rng.random((30, 3))
    Z = rng.random((500, 3))
    assert covering_radius(X, Z) == pytest.approx(cdist(Z, X).min(axis=1).max(), rel=1e-15)
    D = cdist(X, X)
    np.fill_diagonal(D, np.inf)
    assert packing_radius(X) == pytest.approx(D.min() / 2, rel=1e-15)


def test_radii_of_small_known_designs():
    X = np.array([[0.25], [0.75]])
    assert packing_radius(X) == 0.25
    assert covering_radius(X, np.linspace(0, 1, 101)) == pytest.approx(0.25)
    report = metric_report(X, np.linspace(0, 1, 101))
    assert report.evaluation_set_size == 101 and not report.cr_exact


def test_radius_argument_checks():
    with pytest.raises(ValueError):
        packing_radius([[0.5, 0.5]])
    with pytest.raises(ValueError):
        covering_radius(np.zeros((2, 2)), np.zeros((3, 3)))


def test_physical_energy():
    X = np.array([0.0, 0.5, 1.0])
    assert physical_energy(X, RieszSingular(1.0)) == pytest.approx((2 + 2 + 1) / 3)
    assert physical_energy(X, RieszLog()) == pytest.approx((2 * math.log(2)) / 3)
    with pytest.raises(TypeError):
        physical_energy(X, Matern32(1.0))


def test_fine_grid_and_default_evaluation_sets():
    G = fine_grid(2, 5)
    assert G.shape == (25, 2)
    assert G.min() == 0.0 and G.max() == 1.0
    assert default_eval_set(2).shape == (128**2, 2)
    cand = np.random.default_rng(0).random((10, 4))
    np.testing.assert_array_equal(default_eval_set(4, cand), cand)


def test_lambda_max_matches_the_dense_eigensolver(rng):
    A = rng.standard_normal((40, 40))
    A = A @ A.T
    assert lambda_max(A) == pytest.approx(np.linalg.eigvalsh(A)[-1], rel=1e-10)


def test_lambda_max_returns_the_algebraically_largest_eigenvalue():
    A = np.diag([-5.0, 1.0, 2.0])
    assert lambda_max(A) == pytest.approx(2.0, rel=1e-9)
    assert lambda_max(-np.eye(3) * 2) == pytest.approx(-2.0, rel=1e-9)
    with pytest.raises(ValueError):
        lambda_max(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_bound_values():
    inputs = BoundInputs(lambda_max=2.0, omega=10, w_star=0.05, L=3.0)
    assert bound_value(Lemma.HARMONIC, inputs, 1) == pytest.approx(4.0 * (1 + 2 * math.log(2)))
    assert bound_value("two-over-n-plus-3", inputs, 5) == pytest.approx(2.0)
    assert bound_value(Lemma.OPTIMAL_STEP, inputs, 5) == bound_value(Lemma.VERTEX_EXCHANGE, inputs, 5)
    assert bound_value(Lemma.INITIAL_PHASE, inputs, 4) == pytest.approx(0.5)
    R2 = 2.0 * 0.9
    a = 0.05 / 3.0
    assert bound_value(Lemma.INTERIOR, inputs, 2) == pytest.approx(R2 * (1 + R2 / a**2))
    with pytest.raises(ValueError):
        bound_value(Lemma.HARMONIC, inputs, 0)


def test_bound_inputs_from_matrix(rng):
    A = rng.standard_normal((6, 6))
    K = A @ A.T + 6 * np.eye(6)
    w = np.full(6, 1 / 6)
    inputs = BoundInputs.from_matrix(K, w)
    assert inputs.lambda_max == pytest.approx(np.linalg.eigvalsh(K)[-1], rel=1e-9)
    assert inputs.L == pytest.approx(math.sqrt(np.diag(np.linalg.inv(K)).max()))
    assert inputs.w_star == pytest.approx(1 / 6)
    assert math.isnan(BoundInputs.from_matrix(K).w_star)
