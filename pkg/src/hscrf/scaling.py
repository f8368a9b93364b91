"""Per-column scaling of the inside/outside masses.

Long sequences overflow the probability-domain recursions.  After column
``j`` is complete, every mass ending at ``j`` is divided by

    kappa_j = sum over (s, u) of the level-0 asymmetric inside mass at [0, j],

which keeps the level-0 column summing to one.  Outside masses are then run
through the unchanged equations on the scaled inside masses and pick up the
complementary factors automatically, so every ratio of the form
``inside * outside / Z`` is scale-free and

    log Z = log(sum_s scaled dhat[0][s, 0, T-1]) + sum_j log kappa_j.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ScaleMismatch, ZeroColumn

AUTO_THRESHOLD = 64
MODES = ("exact", "scaled", "auto")


def resolve_numerics(mode: str, T: int) -> str:
    if mode not in MODES:
        raise ValueError(f"numerics must be one of {MODES}, got {mode!r}")
    if mode == "auto":
        return "scaled" if T > AUTO_THRESHOLD else "exact"
    return mode


def column_scale(alpha: list, dhat: list, j: int) -> float:
    """``kappa_j`` for a freshly filled column.

    Under label constraints the level-0 mass may vanish at ``j`` while lower
    levels still carry mass; the largest entry of the column stands in then.
    ``dhat`` rather than ``delta`` is searched because the bottom ``delta``
    is the identity by convention and would hide an empty column.
    """
    k = float(alpha[0][:, 0, j, :].sum())
    if k > 0 and math.isfinite(k):
        return k
    peak = max([float(a[:, :, j, :].max(initial=0.0)) for a in alpha] + [float(m[:, :, j].max(initial=0.0)) for m in dhat])
    if not peak > 0 or not math.isfinite(peak):
        raise ZeroColumn(f"no mass survives at column {j}", column=j)
    return peak


@dataclass(frozen=True)
class ScaleVector:
    kappa: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.kappa, dtype=float)
        if not (np.isfinite(k).all() and (k > 0).all()):
            raise ScaleMismatch("scale factors must be positive and finite")
        object.__setattr__(self, "kappa", k)

    @property
    def cumulative_log(self) -> np.ndarray:
        return np.cumsum(np.log(self.kappa))

    @property
    def total_log(self) -> float:
        return float(np.log(self.kappa).sum())


def scaled_inside(lattice, topology, indicators=None):
    """Scaled inside family; returns ``(masses, ScaleVector, log_Z)``."""
    from .aio import Indicators, InferenceResult, compute_inside

    ind = indicators or Indicators.structural(topology, lattice.T)
    masses = compute_inside(lattice, topology, ind, scale=True)
    result = InferenceResult(topology, lattice, masses, ind)
    return masses, ScaleVector(masses.kappa), result.log_Z


def scaled_outside(masses, scales: ScaleVector, lattice, topology, indicators=None):
    """Outside family on already-scaled inside masses."""
    from .aio import Indicators, compute_outside

    if masses.kappa.shape != scales.kappa.shape or not np.array_equal(masses.kappa, scales.kappa):
        raise ScaleMismatch("scale vector does not belong to these masses")
    ind = indicators or Indicators.structural(topology, lattice.T)
    return compute_outside(lattice, topology, masses, ind)
