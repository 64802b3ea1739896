import math

import numpy as np
import pytest

from kdesign.kernels import (
    DefinitenessClass,
    DistanceInduced,
    Exponential,
    GeneralizedMultiquadric,
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
    reduce,
)
from kdesign.measures import ClosedFormUniform, DiscreteSignedMeasure, energy

SMOOTH = [
    SquaredExponential(3.0),
    Exponential(2.0),
    Matern32(4.0),
    Matern52(4.0),
    GeneralizedMultiquadric(1.0, 0.3),
    ShiftedInverseDistance(0.5, 0.2),
    TriangularOneMinus(0.7),
]


def test_profiles_at_known_distances():
    r = np.array([0.0, 0.5])
    assert SquaredExponential(2.0).profile(r) == pytest.approx([1.0, math.exp(-0.5)])
    assert Exponential(2.0).profile(r) == pytest.approx([1.0, math.exp(-1.0)])
    a, b = math.sqrt(3.0), math.sqrt(5.0)
    assert Matern32(2.0).profile(r) == pytest.approx([1.0, (1 + a) * math.exp(-a)])
    assert Matern52(2.0).profile(r) == pytest.approx([1.0, (1 + b + 5 / 3) * math.exp(-b)])
    assert GeneralizedMultiquadric(2.0, 0.25).profile(r) == pytest.approx([4.0, 2.0])
    assert ShiftedInverseDistance(1.0, 0.5).profile(r) == pytest.approx([2.0, 1.0])
    assert TriangularOneMinus(0.5).profile(r) == pytest.approx([1.0, 0.75])
    assert NegDistance(1.5).profile(np.array([0.25])) == pytest.approx([-0.125])


def test_singular_kernels_are_infinite_on_the_diagonal():
    for k in (RieszSingular(0.5), RieszLog()):
        assert k.singular
        assert np.isinf(k.eval(0.3, 0.3))
    assert RieszSingular(0.5).eval(0.0, 0.25) == pytest.approx(2.0)
    assert RieszLog().eval(0.0, math.exp(-2.0)) == pytest.approx(2.0)


@pytest.mark.parametrize("kernel", SMOOTH, ids=lambda k: type(k).__name__)
def test_gram_is_symmetric_and_matches_paired(kernel, rng):
    X = rng.random((12, 1))
    Y = rng.random((12, 1))
    K = kernel(X)
    np.testing.assert_array_equal(K, K.T)
    np.testing.assert_allclose(np.diag(kernel(X, Y)), kernel.paired(X, Y), rtol=1e-14)
    np.testing.assert_allclose(kernel.diag(X), np.diag(K), rtol=1e-14)


@pytest.mark.parametrize("kernel", [k for k in SMOOTH if k.definiteness is DefinitenessClass.ISPD], ids=lambda k: type(k).__name__)
def test_ispd_gram_matrices_are_positive_definite(kernel):
    X = np.linspace(0.0, 1.0, 6)
    assert np.linalg.eigvalsh(kernel(X)).min() > 0


def test_conditionally_positive_kernels_are_positive_on_zero_mass_vectors(rng):
    X = rng.random((20, 1))
    for kernel in (NegDistance(1.0), NegDistance(0.5), DistanceInduced(1.0)):
        K = kernel(X)
        for _ in range(20):
            v = rng.standard_normal(20)
            v -= v.mean()
            assert v @ K @ v > 0


def test_definiteness_classes():
    assert SquaredExponential(1.0).definiteness is DefinitenessClass.ISPD
    assert NegDistance(1.0).definiteness is DefinitenessClass.CISPD
    assert NegDistance(2.5).definiteness is DefinitenessClass.UNKNOWN
    assert TriangularOneMinus(1.5).definiteness is DefinitenessClass.UNKNOWN
    assert TensorProduct.power(Matern32(1.0), 3).definiteness is DefinitenessClass.ISPD
    assert TensorProduct((Matern32(1.0), NegDistance(1.0))).definiteness is DefinitenessClass.UNKNOWN


@pytest.mark.parametrize("bad", [0.0, -1.0, math.inf, math.nan])
def test_parameters_must_be_positive_and_finite(bad):
    with pytest.raises(ValueError):
        Matern32(bad)


def test_tensor_product_is_the_product_of_factors(rng):
    k = TensorProduct((Matern32(2.0), SquaredExponential(5.0)))
    X = rng.random((7, 2))
    Y = rng.random((5, 2))
    expected = Matern32(2.0)(X[:, :1], Y[:, :1]) * SquaredExponential(5.0)(X[:, 1:], Y[:, 1:])
    np.testing.assert_allclose(k(X, Y), expected, rtol=1e-15)
    assert k.dim == 2 and k.is_tensor


def test_tensor_product_rejects_nested_and_wrong_dimensions(rng):
    k = TensorProduct.power(Matern32(2.0), 2)
    with pytest.raises(ValueError):
        TensorProduct((k,))
    with pytest.raises(ValueError):
        k(rng.random((3, 3)))


def test_kernels_are_hashable_values():
    assert Matern32(2.0) == Matern32(2.0)
    assert len({Matern32(2.0), Matern32(2.0), Matern52(2.0)}) == 2


def test_as_points_shapes():
    assert as_points(0.3).shape == (1, 1)
    assert as_points([0.1, 0.2]).shape == (2, 1)
    assert as_points([[0.1, 0.2]], dim=2).shape == (1, 2)
    with pytest.raises(ValueError):
        as_points([[0.1, 0.2]], dim=3)


def test_reduced_kernel_gives_zero_potential_and_energy_to_mu():
    kernel = Matern32(3.0)
    prov = ClosedFormUniform(kernel)
    Kmu = reduce(kernel, prov)
    nodes, w = np.polynomial.legendre.leggauss(200)
    nodes = 0.5 * (nodes + 1)
    w = 0.5 * w
    x = np.array([0.0, 0.3, 1.0])
    np.testing.assert_allclose(Kmu(x, nodes) @ w, 0.0, atol=1e-7)
    assert w @ Kmu(nodes) @ w == pytest.approx(0.0, abs=1e-7)
    assert Kmu.definiteness is DefinitenessClass.CISPD


def test_reduced_energy_of_a_probability_measure_is_the_squared_mmd(rng):
    kernel = SquaredExponential(10.0)
    prov = ClosedFormUniform(kernel)
    X = rng.random(6)
    xi = DiscreteSignedMeasure(X, np.full(6, 1 / 6))
    direct = energy(kernel, xi) - 2 * xi.weights @ prov(X) + prov.energy()
    assert energy(reduce(kernel, prov), xi) == pytest.approx(direct, rel=1e-12)
