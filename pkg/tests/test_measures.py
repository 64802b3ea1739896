import math

import numpy as np
import pytest
from scipy import integrate

from kdesign.kernels import (
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
)
from kdesign.measures import (
    ClosedFormUniform,
    DefinitenessError,
    DiscreteSignedMeasure,
    MonteCarloProvider,
    energy,
    energy_of_signed_diff,
    mc_potential_provider,
    mixture,
    mmd,
    negdist_equilibrium_density_1d,
    negdist_equilibrium_energy_1d,
    negdist_sphere_energy,
    potential,
    sample_measure,
    squared_mmd,
    three_point_energy,
    three_point_measure,
    three_point_optimal_energy,
    three_point_optimal_weight,
)

ONE_D = [
    SquaredExponential(4.0),
    Exponential(2.0),
    Matern32(2.0),
    Matern52(3.0),
    GeneralizedMultiquadric(2.0, 0.5),
    GeneralizedMultiquadric(0.5, 0.2),
    ShiftedInverseDistance(1.0, 0.5),
    ShiftedInverseDistance(0.5, 0.3),
    TriangularOneMinus(0.8),
    NegDistance(0.7),
    DistanceInduced(0.5),
    RieszSingular(0.3),
    RieszLog(),
]


def _quad_potential(kernel, x):
    # split at x so the kink or singularity sits at an interval end
    f = lambda y: kernel.eval(x, y)
    left = integrate.quad(f, 0.0, x, limit=200, epsabs=1e-13, epsrel=1e-12)[0] if x > 0 else 0.0
    right = integrate.quad(f, x, 1.0, limit=200, epsabs=1e-13, epsrel=1e-12)[0] if x < 1 else 0.0
    return left + right


@pytest.mark.parametrize("kernel", ONE_D, ids=repr)
def test_closed_form_potentials_match_adaptive_quadrature(kernel):
    prov = ClosedFormUniform(kernel)
    x = np.array([0.0, 0.13, 0.5, 0.77, 1.0])
    expected = [_quad_potential(kernel, xi) for xi in x]
    np.testing.assert_allclose(prov(x), expected, rtol=1e-8, atol=1e-10)


@pytest.mark.parametrize("kernel", ONE_D, ids=repr)
def test_closed_form_energy_is_the_integral_of_the_potential(kernel):
    prov = ClosedFormUniform(kernel)
    value = integrate.quad(lambda x: float(prov(np.array([x]))[0]), 0.0, 1.0, epsabs=1e-13, epsrel=1e-11)[0]
    assert prov.energy() == pytest.approx(value, rel=1e-8, abs=1e-10)


def test_tensor_product_potential_and_energy_factorize(rng):
    k = TensorProduct((Matern32(2.0), SquaredExponential(3.0)))
    prov = ClosedFormUniform(k)
    X = rng.random((5, 2))
    p1 = ClosedFormUniform(Matern32(2.0))(X[:, 0])
    p2 = ClosedFormUniform(SquaredExponential(3.0))(X[:, 1])
    np.testing.assert_allclose(prov(X), p1 * p2, rtol=1e-15)
    assert prov.energy() == pytest.approx(
        ClosedFormUniform(Matern32(2.0)).energy() * ClosedFormUniform(SquaredExponential(3.0)).energy()
    )


def test_closed_form_rejects_points_outside_the_unit_interval():
    with pytest.raises(ValueError):
        ClosedFormUniform(Matern32(1.0))(np.array([1.2]))


def test_potential_checks_the_provider_kernel():
    prov = ClosedFormUniform(Matern32(1.0))
    with pytest.raises(ValueError):
        potential(prov, Matern32(2.0), [0.5])


def test_monte_carlo_provider_is_deterministic_and_close_to_closed_form():
    k = Matern32(2.0)
    a = mc_potential_provider(k, "uniform:d=1", 20_000, seed=3)
    b = mc_potential_provider(k, "uniform:d=1", 20_000, seed=3)
    x = np.linspace(0, 1, 7)
    np.testing.assert_array_equal(a(x), b(x))
    p, se = a.potential_with_se(x)
    assert np.all(np.abs(p - ClosedFormUniform(k)(x)) < 5 * se)
    E, se_E = a.energy_with_se()
    assert abs(E - ClosedFormUniform(k).energy()) < 5 * se_E


def test_monte_carlo_energy_of_a_singular_kernel_uses_off_diagonal_pairs():
    k = RieszSingular(0.3)
    prov = MonteCarloProvider(k, sample_measure("uniform:d=1", 3000, seed=4))
    E, se = prov.energy_with_se()
    assert math.isfinite(E)
    assert abs(E - ClosedFormUniform(k).energy()) < 5 * se


def test_sample_measure_specs():
    s = sample_measure("sphere:d=3", 100, seed=0)
    np.testing.assert_allclose(np.linalg.norm(s, axis=1), 1.0)
    b = sample_measure("ball:d=2", 100, seed=0)
    assert np.all(np.linalg.norm(b, axis=1) <= 1.0)
    assert sample_measure("uniform:d=4", 10, seed=0).shape == (10, 4)
    with pytest.raises(ValueError):
        sample_measure("cube:d=2", 10, seed=0)


def test_discrete_measure_validation():
    with pytest.raises(ValueError):
        DiscreteSignedMeasure([0.1, 0.1], [0.5, 0.5])
    with pytest.raises(ValueError):
        DiscreteSignedMeasure([0.1, 0.2], [1.0])
    xi = DiscreteSignedMeasure.empirical([0.1, 0.4, 0.9])
    assert xi.total_mass() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        xi.weights[0] = 2.0


def test_mixture_merges_coincident_points():
    a = DiscreteSignedMeasure([0.1, 0.5], [0.5, 0.5])
    b = DiscreteSignedMeasure([0.5, 0.9], [0.5, 0.5])
    m = mixture(a, b, 1.0, -1.0)
    assert m.n == 3
    np.testing.assert_allclose(m.weights, [0.5, 0.0, -0.5])


def test_squared_mmd_is_symmetric_and_matches_the_energy_of_the_difference(rng):
    k = Matern52(2.0)
    xi = DiscreteSignedMeasure.empirical(rng.random(5))
    nu = DiscreteSignedMeasure.empirical(rng.random(7))
    assert squared_mmd(k, xi, nu) == squared_mmd(k, nu, xi)
    assert squared_mmd(k, xi, nu) == pytest.approx(energy(k, mixture(nu, xi, 1.0, -1.0)), rel=1e-12)
    assert mmd(k, xi, xi) == 0.0


def test_energy_of_signed_difference_against_closed_form_uniform(rng):
    k = Matern32(3.0)
    prov = ClosedFormUniform(k)
    xi = DiscreteSignedMeasure.empirical(rng.random(8))
    value = energy(k, xi) - 2 * np.mean(prov(xi.support)) + prov.energy()
    assert energy_of_signed_diff(k, xi, prov) == pytest.approx(value, rel=1e-12)


def test_negative_energy_for_a_positive_definite_kernel_is_an_error():
    class Liar:
        kernel = Matern32(1.0)

        def __call__(self, X):
            return np.full(len(X), 10.0)

        def energy(self):
            return 1.0

    with pytest.raises(DefinitenessError):
        energy_of_signed_diff(Matern32(1.0), DiscreteSignedMeasure.empirical([0.5]), Liar())


@pytest.mark.parametrize("s", [0.25, 0.5, 0.75])
def test_equilibrium_density_has_constant_potential(s):
    a = -(1 + s) / 2
    c = negdist_equilibrium_density_1d(s, 0.5) / 0.25**a

    def pot(x):
        left = integrate.quad(lambda y: -((x - y) ** s) * (1 - y) ** a, 0, x, weight="alg", wvar=(a, 0))[0]
        right = integrate.quad(lambda y: -((y - x) ** s) * y**a, x, 1, weight="alg", wvar=(0, a))[0]
        return c * (left + right)

    E = negdist_equilibrium_energy_1d(s)
    for x in (0.1, 0.3, 0.5, 0.8):
        assert pot(x) == pytest.approx(E, rel=1e-7)


def test_three_point_optimum():
    s = 1.5
    w = three_point_optimal_weight(s)
    assert energy(NegDistance(s), three_point_measure(w)) == pytest.approx(three_point_energy(s, w), abs=1e-14)
    assert three_point_energy(s, w) == pytest.approx(three_point_optimal_energy(s), abs=1e-14)
    for dw in (-1e-3, 1e-3):
        assert three_point_energy(s, w + dw) > three_point_energy(s, w)


def test_sphere_energy_values():
    assert negdist_sphere_energy(1.0, 2) == pytest.approx(-4 / math.pi, rel=1e-15)
    # on S^2 the mean distance between uniform points is 4/3
    assert negdist_sphere_energy(1.0, 3) == pytest.approx(-4 / 3, rel=1e-15)
    # for s = 2 the energy is -2 in every dimension
    assert negdist_sphere_energy(2.0, 5) == pytest.approx(-2.0, rel=1e-14)
