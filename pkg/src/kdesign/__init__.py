"""Kernel discrepancy, Bayesian quadrature and space-filling design."""

from kdesign.kernels import (
    DefinitenessClass,
    DistanceInduced,
    Exponential,
    GeneralizedMultiquadric,
    Kernel,
    Matern32,
    Matern52,
    NegDistance,
    ReducedKernel,
    RieszLog,
    RieszSingular,
    ShiftedInverseDistance,
    SquaredExponential,
    TensorProduct,
    TriangularOneMinus,
    reduce,
)
from kdesign.measures import ClosedFormUniform, DiscreteSignedMeasure, MonteCarloProvider

__all__ = [
    "ClosedFormUniform",
    "DefinitenessClass",
    "DiscreteSignedMeasure",
    "DistanceInduced",
    "Exponential",
    "GeneralizedMultiquadric",
    "Kernel",
    "Matern32",
    "Matern52",
    "MonteCarloProvider",
    "NegDistance",
    "ReducedKernel",
    "RieszLog",
    "RieszSingular",
    "ShiftedInverseDistance",
    "SquaredExponential",
    "TensorProduct",
    "TriangularOneMinus",
    "reduce",
]
