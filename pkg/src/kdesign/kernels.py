"""Kernel families, tensor products and the reduced kernel.

All kernels act on points given as rows of 2-D arrays.  Three evaluation
modes are exposed:

* ``k(X, Y)`` returns the full cross Gram matrix ``K[i, j] = K(X[i], Y[j])``;
* ``k.paired(X, Y)`` returns ``K(X[i], Y[i])`` for rows of equal-length arrays;
* ``k.eval(x, y)`` evaluates a single pair and returns a float.

Singular families (Riesz and logarithmic) return ``math.inf`` on the
diagonal instead of raising, so that greedy constructions never pick a point
twice.
"""

from __future__ import annotations

import enum
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np
from scipy.spatial.distance import cdist

if TYPE_CHECKING:
    from kdesign.measures import PotentialProvider

INFINITY = math.inf
"""Value returned by singular kernels at coincident points."""


class DefinitenessClass(enum.Enum):
    """Declarative positive-definiteness class of a kernel family."""

    ISPD = "ISPD"
    CISPD = "CISPD"
    SPD_ONLY = "SPD-only"
    UNKNOWN = "Unknown"


def as_points(x, dim: int | None = None) -> np.ndarray:
    """Coerce ``x`` to a float array of shape ``(n, d)``.

    A 1-D array is read as ``n`` scalar points when ``dim`` is ``None`` or 1,
    and as a single point otherwise.
    """
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        if dim is None or dim == 1:
            arr = arr.reshape(-1, 1)
        else:
            arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ValueError(f"points must be at most 2-D, got shape {arr.shape}")
    if dim is not None and arr.shape[1] != dim:
        raise ValueError(f"expected points of dimension {dim}, got {arr.shape[1]}")
    return arr


class Kernel(ABC):
    """Symmetric kernel on R^d.

    Subclasses are frozen dataclasses, hence immutable and hashable, and all
    evaluation methods are pure functions of their arguments.
    """

    #: fixed ambient dimension, or ``None`` when any dimension is accepted
    dim: int | None = None
    #: True when the kernel is infinite on the diagonal
    singular: bool = False

    @property
    @abstractmethod
    def definiteness(self) -> DefinitenessClass:
        """Definiteness class as stated for the family."""

    @abstractmethod
    def __call__(self, X, Y=None) -> np.ndarray:
        """Cross Gram matrix between the rows of ``X`` and ``Y`` (``Y=X`` if omitted)."""

    @abstractmethod
    def paired(self, X, Y) -> np.ndarray:
        """Row-wise evaluation ``K(X[i], Y[i])``."""

    def diag(self, X) -> np.ndarray:
        """Values ``K(x, x)`` for every row of ``X``."""
        X = as_points(X, self.dim)
        return self.paired(X, X)

    def eval(self, x, y) -> float:
        """Evaluate the kernel at a single pair of points."""
        x = as_points(x, self.dim)
        y = as_points(y, self.dim)
        if x.shape[0] != 1 or y.shape[0] != 1 or x.shape[1] != y.shape[1]:
            raise ValueError("eval expects two points of the same dimension")
        return float(self.paired(x, y)[0])

    @property
    def is_tensor(self) -> bool:
        return False


class RadialKernel(Kernel):
    """Kernel depending only on the Euclidean distance ``r = ||x - x'||``."""

    @abstractmethod
    def profile(self, r: np.ndarray) -> np.ndarray:
        """Kernel value as a function of distance."""

    def __call__(self, X, Y=None) -> np.ndarray:
        X = as_points(X, self.dim)
        Y = X if Y is None else as_points(Y, self.dim)
        if X.shape[1] != Y.shape[1]:
            raise ValueError("dimension mismatch between point sets")
        if X.shape[1] == 1:
            r = np.abs(X - Y.T)
        else:
            r = cdist(X, Y)
        return self.profile(r)

    def paired(self, X, Y) -> np.ndarray:
        X = as_points(X, self.dim)
        Y = as_points(Y, self.dim)
        if X.shape != Y.shape:
            raise ValueError("paired evaluation needs arrays of equal shape")
        if X.shape[1] == 1:
            r = np.abs(X[:, 0] - Y[:, 0])
        else:
            r = np.sqrt(np.sum((X - Y) ** 2, axis=1))
        return self.profile(r)


def _positive(name: str, value: float) -> float:
    value = float(value)
    if not value > 0 or not math.isfinite(value):
        raise ValueError(f"{name} must be a positive finite number, got {value}")
    return value


@dataclass(frozen=True)
class SquaredExponential(RadialKernel):
    """``exp(-t r^2)``."""

    t: float

    def __post_init__(self):
        object.__setattr__(self, "t", _positive("t", self.t))

    @property
    def definiteness(self):
        return DefinitenessClass.ISPD

    def profile(self, r):
        return np.exp(-self.t * r**2)


@dataclass(frozen=True)
class Exponential(RadialKernel):
    """``exp(-theta r)``, the Matern kernel with smoothness 1/2."""

    theta: float

    def __post_init__(self):
        object.__setattr__(self, "theta", _positive("theta", self.theta))

    @property
    def definiteness(self):
        return DefinitenessClass.ISPD

    def profile(self, r):
        return np.exp(-self.theta * r)


@dataclass(frozen=True)
class Matern32(RadialKernel):
    """``(1 + sqrt(3) theta r) exp(-sqrt(3) theta r)``."""

    theta: float

    def __post_init__(self):
        object.__setattr__(self, "theta", _positive("theta", self.theta))

    @property
    def definiteness(self):
        return DefinitenessClass.ISPD

    def profile(self, r):
        a = math.sqrt(3.0) * self.theta * r
        return (1.0 + a) * np.exp(-a)


@dataclass(frozen=True)
class Matern52(RadialKernel):
    """``(1 + sqrt(5) theta r + 5 theta^2 r^2 / 3) exp(-sqrt(5) theta r)``."""

    theta: float

    def __post_init__(self):
        object.__setattr__(self, "theta", _positive("theta", self.theta))

    @property
    def definiteness(self):
        return DefinitenessClass.ISPD

    def profile(self, r):
        a = math.sqrt(5.0) * self.theta * r
        return (1.0 + a + a**2 / 3.0) * np.exp(-a)


@dataclass(frozen=True)
class GeneralizedMultiquadric(RadialKernel):
    """Generalized inverse multiquadric ``(r^2 + eps)^(-s/2)``."""

    s: float
    eps: float

    def __post_init__(self):
        object.__setattr__(self, "s", _positive("s", self.s))
        object.__setattr__(self, "eps", _positive("eps", self.eps))

    @property
    def definiteness(self):
        return DefinitenessClass.ISPD

    def profile(self, r):
        return (r**2 + self.eps) ** (-self.s / 2.0)


@dataclass(frozen=True)
class ShiftedInverseDistance(RadialKernel):
    """``(r + eps)^(-s)``: distance, not squared distance, inside the power.

    No definiteness statement is available for this family, so it is marked
    ``Unknown``.
    """

    s: float
    eps: float

    def __post_init__(self):
        object.__setattr__(self, "s", _positive("s", self.s))
        object.__setattr__(self, "eps", _positive("eps", self.eps))

    @property
    def definiteness(self):
        return DefinitenessClass.UNKNOWN

    def profile(self, r):
        return (r + self.eps) ** (-self.s)


@dataclass(frozen=True)
class RieszSingular(RadialKernel):
    """Riesz kernel ``r^(-s)``, ISPD for ``0 < s < d``; infinite at ``r = 0``."""

    s: float
    singular = True

    def __post_init__(self):
        object.__setattr__(self, "s", _positive("s", self.s))

    @property
    def definiteness(self):
        return DefinitenessClass.ISPD

    def profile(self, r):
        r = np.asarray(r, dtype=float)
        with np.errstate(divide="ignore"):
            return np.where(r > 0, r ** (-self.s), INFINITY)


@dataclass(frozen=True)
class RieszLog(RadialKernel):
    """Logarithmic kernel ``-log r``; CISPD on compact sets, infinite at ``r = 0``."""

    singular = True

    @property
    def definiteness(self):
        return DefinitenessClass.CISPD

    def profile(self, r):
        r = np.asarray(r, dtype=float)
        with np.errstate(divide="ignore"):
            return -np.log(r)


@dataclass(frozen=True)
class NegDistance(RadialKernel):
    """``-r^s``; CISPD for ``s`` in (0, 2).

    Values of ``s`` outside (0, 2) are accepted but the definiteness class is
    then ``Unknown``.
    """

    s: float

    def __post_init__(self):
        object.__setattr__(self, "s", _positive("s", self.s))

    @property
    def definiteness(self):
        return DefinitenessClass.CISPD if self.s < 2 else DefinitenessClass.UNKNOWN

    def profile(self, r):
        return -(r**self.s)


@dataclass(frozen=True)
class DistanceInduced(Kernel):
    """Distance-induced kernel ``||x||^s + ||x'||^s - ||x - x'||^s``.

    CISPD for ``s`` in (0, 2).  The kernel is not translation invariant; the
    origin is the lower corner of the unit cube.
    """

    s: float

    def __post_init__(self):
        object.__setattr__(self, "s", _positive("s", self.s))

    @property
    def definiteness(self):
        return DefinitenessClass.CISPD if self.s < 2 else DefinitenessClass.UNKNOWN

    def _norm_s(self, X):
        return np.sqrt(np.sum(X**2, axis=1)) ** self.s

    def __call__(self, X, Y=None):
        X = as_points(X)
        Y = X if Y is None else as_points(Y)
        if X.shape[1] != Y.shape[1]:
            raise ValueError("dimension mismatch between point sets")
        r = np.abs(X - Y.T) if X.shape[1] == 1 else cdist(X, Y)
        return self._norm_s(X)[:, None] + self._norm_s(Y)[None, :] - r**self.s

    def paired(self, X, Y):
        X = as_points(X)
        Y = as_points(Y)
        if X.shape != Y.shape:
            raise ValueError("paired evaluation needs arrays of equal shape")
        r = np.sqrt(np.sum((X - Y) ** 2, axis=1))
        return self._norm_s(X) + self._norm_s(Y) - r**self.s


@dataclass(frozen=True)
class TriangularOneMinus(RadialKernel):
    """``1 - theta r``; ISPD on [0, 1] for ``0 < theta <= 1``."""

    theta: float
    dim = 1

    def __post_init__(self):
        object.__setattr__(self, "theta", _positive("theta", self.theta))

    @property
    def definiteness(self):
        return DefinitenessClass.ISPD if self.theta <= 1 else DefinitenessClass.UNKNOWN

    def profile(self, r):
        return 1.0 - self.theta * r


@dataclass(frozen=True)
class TensorProduct(Kernel):
    """Product ``prod_i K_i(x_i, x'_i)`` of one-dimensional factor kernels."""

    factors: tuple[Kernel, ...]

    def __post_init__(self):
        factors = tuple(self.factors)
        if not factors:
            raise ValueError("a tensor product needs at least one factor")
        for f in factors:
            if isinstance(f, TensorProduct):
                raise ValueError("nested tensor products are not supported")
            if f.dim not in (None, 1):
                raise ValueError(f"tensor factors must be one-dimensional, got {f!r}")
        object.__setattr__(self, "factors", factors)

    @classmethod
    def power(cls, factor: Kernel, d: int) -> TensorProduct:
        """Tensor product of ``d`` copies of ``factor``."""
        if d < 1:
            raise ValueError("d must be at least 1")
        return cls((factor,) * d)

    @property
    def dim(self) -> int:  # type: ignore[override]
        return len(self.factors)

    @property
    def singular(self) -> bool:  # type: ignore[override]
        return any(f.singular for f in self.factors)

    @property
    def is_tensor(self) -> bool:
        return True

    @property
    def definiteness(self):
        classes = {f.definiteness for f in self.factors}
        if classes == {DefinitenessClass.ISPD}:
            return DefinitenessClass.ISPD
        return DefinitenessClass.UNKNOWN

    def __call__(self, X, Y=None):
        X = as_points(X, self.dim)
        Y = X if Y is None else as_points(Y, self.dim)
        out = self.factors[0](X[:, :1], Y[:, :1])
        for i, f in enumerate(self.factors[1:], start=1):
            out = out * f(X[:, i : i + 1], Y[:, i : i + 1])
        return out

    def paired(self, X, Y):
        X = as_points(X, self.dim)
        Y = as_points(Y, self.dim)
        if X.shape != Y.shape:
            raise ValueError("paired evaluation needs arrays of equal shape")
        out = self.factors[0].paired(X[:, :1], Y[:, :1])
        for i, f in enumerate(self.factors[1:], start=1):
            out = out * f.paired(X[:, i : i + 1], Y[:, i : i + 1])
        return out


@dataclass(frozen=True)
class ReducedKernel(Kernel):
    """Kernel recentred on a probability measure mu.

    ``K_mu(x, x') = K(x, x') - P_mu(x) - P_mu(x') + E_K(mu)``, so that mu has
    zero potential and zero energy under ``K_mu``.
    """

    base: Kernel
    potential: PotentialProvider = field(compare=False)
    energy: float

    def __post_init__(self):
        if not math.isfinite(self.energy):
            raise ValueError("the reduced kernel needs a measure with finite energy")

    @property
    def dim(self):  # type: ignore[override]
        return self.base.dim

    @property
    def singular(self):  # type: ignore[override]
        return self.base.singular

    @property
    def definiteness(self):
        if self.base.definiteness in (DefinitenessClass.ISPD, DefinitenessClass.CISPD):
            return DefinitenessClass.CISPD
        return DefinitenessClass.UNKNOWN

    def __call__(self, X, Y=None):
        X = as_points(X, self.dim)
        Y = X if Y is None else as_points(Y, self.dim)
        px = self.potential(X)
        py = px if Y is X else self.potential(Y)
        return self.base(X, Y) - (px[:, None] + py[None, :]) + self.energy

    def paired(self, X, Y):
        X = as_points(X, self.dim)
        Y = as_points(Y, self.dim)
        return self.base.paired(X, Y) - (self.potential(X) + self.potential(Y)) + self.energy


def reduce(kernel: Kernel, potential: PotentialProvider, energy: float | None = None) -> ReducedKernel:
    """Reduced kernel of ``kernel`` with respect to the measure behind ``potential``.

    When ``energy`` is omitted it is taken from the provider.
    """
    if energy is None:
        energy = potential.energy()
    return ReducedKernel(kernel, potential, float(energy))
