"""Finite candidate sets on the unit cube."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import qmc

SOBOL_MAX_DIM = 21201
"""Largest dimension covered by the Joe-Kuo direction-number table."""


@dataclass(frozen=True)
class Sobol:
    m: int
    skip: int = 0


@dataclass(frozen=True)
class Grid:
    per_axis: int


@dataclass(frozen=True)
class File:
    path: str


@dataclass(frozen=True)
class CandidateSet:
    points: np.ndarray
    provenance: Sobol | Grid | File

    def __post_init__(self):
        pts = np.array(self.points, dtype=float, ndmin=2)
        if pts.shape[0] < 1:
            raise ValueError("a candidate set needs at least one point")
        if np.any(pts < 0.0) or np.any(pts > 1.0):
            raise ValueError("candidate points must lie in [0, 1]^d")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def sobol(d: int, m: int, skip: int = 0) -> CandidateSet:
    """First ``m`` points of the unscrambled Sobol sequence after ``skip`` points.

    Uses scipy's generator (Joe-Kuo direction numbers); without ``skip`` the
    first point is the origin.
    """
    if not 1 <= d <= SOBOL_MAX_DIM:
        raise ValueError(f"Sobol points are available for 1 <= d <= {SOBOL_MAX_DIM}, got d={d}")
    if m < 1 or skip < 0:
        raise ValueError("need m >= 1 and skip >= 0")
    engine = qmc.Sobol(d, scramble=False)
    with warnings.catch_warnings():
        # scipy warns when the count is not a power of two
        warnings.simplefilter("ignore", UserWarning)
        if skip:
            engine.fast_forward(skip)
        pts = engine.random(m)
    return CandidateSet(pts, Sobol(m, skip))


def grid(d: int, per_axis: int) -> CandidateSet:
    """Regular grid with ``per_axis`` points ``0, 1/(k-1), ..., 1`` per coordinate."""
    if per_axis < 1:
        raise ValueError("per_axis must be positive")
    axis = np.linspace(0.0, 1.0, per_axis) if per_axis > 1 else np.array([0.5])
    mesh = np.meshgrid(*([axis] * d), indexing="ij")
    return CandidateSet(np.column_stack([g.ravel() for g in mesh]), Grid(per_axis))


def from_file(path: str | Path) -> CandidateSet:
    """Candidates read from a CSV file of coordinates (optional header row)."""
    from kdesign.io import read_points

    return CandidateSet(read_points(path), File(str(path)))
