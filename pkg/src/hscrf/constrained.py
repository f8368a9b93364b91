"""Inference under partially observed states and ending indicators.

Observed variables act through 0/1 indicators on the inside masses: a
level-``d`` segment ``(s, i, j)`` survives only if

1. no observed level-``d`` state inside ``[i, j]`` differs from ``s``,
2. the observed ending at ``i - 1`` (if any) is not 0,
3. no observed ending inside ``[i, j - 1]`` is 1,
4. the observed ending at ``j`` is not 0.

The asymmetric masses use 1-3 for the parent plus "child state at ``j`` is
``u`` or unobserved" and "child ending at ``j`` is not 0".  Blocks whose
indicators vanish are skipped by the recursions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .aio import Indicators, InferenceResult, infer
from .errors import InconsistentLabels
from .topology import Configuration, Topology


@dataclass(frozen=True)
class PartialLabels:
    """Sparse observed states ``{(d, t): s}`` and endings ``{(d, t): 0 | 1}``."""

    states: Mapping[tuple[int, int], int] = field(default_factory=dict)
    ends: Mapping[tuple[int, int], int] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "states", {(int(d), int(t)): int(s) for (d, t), s in dict(self.states).items()})
        object.__setattr__(self, "ends", {(int(d), int(t)): int(v) for (d, t), v in dict(self.ends).items()})

    def __len__(self):
        return len(self.states) + len(self.ends)

    @property
    def empty(self) -> bool:
        return not self.states and not self.ends

    def is_complete(self, depth: int, T: int) -> bool:
        return len(self.states) == depth * T and len(self.ends) == depth * T

    @classmethod
    def from_configuration(cls, config: Configuration) -> "PartialLabels":
        D, T = config.x.shape
        states = {(d, t): int(config.x[d, t]) for d in range(D) for t in range(T)}
        ends = {(d, t): int(config.e[d, t]) for d in range(D) for t in range(T)}
        return cls(states, ends)

    @classmethod
    def reveal(cls, config: Configuration, fraction: float, rng: np.random.Generator,
               states: bool = True, ends: bool = True) -> "PartialLabels":
        """Reveal a random ``fraction`` of the ``(d, t)`` positions of ``config``."""
        D, T = config.x.shape
        cells = [(d, t) for d in range(D) for t in range(T)]
        k = int(round(fraction * len(cells)))
        picked = [cells[n] for n in sorted(rng.choice(len(cells), size=k, replace=False))]
        return cls(
            {c: int(config.x[c]) for c in picked} if states else {},
            {c: int(config.e[c]) for c in picked} if ends else {},
        )

    def union(self, other: "PartialLabels") -> "PartialLabels":
        return PartialLabels({**self.states, **other.states}, {**self.ends, **other.ends})

    def to_configuration(self, depth: int, T: int) -> Configuration:
        if not self.is_complete(depth, T):
            raise InconsistentLabels("labels do not cover every position")
        x = np.zeros((depth, T), dtype=np.int64)
        e = np.zeros((depth, T), dtype=np.int8)
        for (d, t), s in self.states.items():
            x[d, t] = s
        for (d, t), v in self.ends.items():
            e[d, t] = v
        return Configuration(x, e)

    def arrays(self, depth: int, T: int) -> tuple[np.ndarray, np.ndarray]:
        """Dense ``(D, T)`` arrays with -1 marking unobserved entries."""
        x = np.full((depth, T), -1, dtype=np.int64)
        e = np.full((depth, T), -1, dtype=np.int64)
        for (d, t), s in self.states.items():
            x[d, t] = s
        for (d, t), v in self.ends.items():
            e[d, t] = v
        return x, e


def validate_labels(labels: PartialLabels, topology: Topology, T: int) -> None:
    """Reject label sets that break the hierarchical constraints outright."""
    D = topology.depth
    bad = []
    for (d, t), s in labels.states.items():
        if not (0 <= d < D and 0 <= t < T and 0 <= s < topology.sizes[d]):
            raise InconsistentLabels(f"state label {s} at level {d} time {t} is out of range", [(d, t)])
    for (d, t), v in labels.ends.items():
        if not (0 <= d < D and 0 <= t < T and v in (0, 1)):
            raise InconsistentLabels(f"ending label {v} at level {d} time {t} is out of range", [(d, t)])
        if v == 1 and d == 0 and t < T - 1:
            bad.append((d, t))
        if v == 0 and (t == T - 1 or d == D - 1):
            bad.append((d, t))
    x, e = labels.arrays(D, T)
    # an ending forces every lower level to end; a persisting level keeps its ancestors alive
    for t in range(T):
        ones = [d for d in range(D) if e[d, t] == 1]
        zeros = [d for d in range(D) if e[d, t] == 0]
        if ones and zeros and min(ones) < max(zeros):
            bad.append((max(zeros), t))
    for d in range(D - 1):
        both = (x[d] >= 0) & (x[d + 1] >= 0)
        for t in np.flatnonzero(both):
            if not topology.child_mask[d][x[d, t], x[d + 1, t]]:
                bad.append((d + 1, int(t)))
    for d in range(D):
        for t in range(T - 1):
            if x[d, t] >= 0 and x[d, t + 1] >= 0 and x[d, t] != x[d, t + 1] and e[d, t] == 0:
                bad.append((d, t))
    if bad:
        coords = sorted(set(bad))
        raise InconsistentLabels(f"labels violate the hierarchical constraints at {coords}", coords)


def _segment_ok(x_row: np.ndarray, e_row: np.ndarray, S: int) -> np.ndarray:
    """Conditions 1-3 as an ``(S, T, T)`` table (``i <= j`` only)."""
    T = len(x_row)
    clash = (x_row[None, :] >= 0) & (x_row[None, :] != np.arange(S)[:, None])
    cum = np.concatenate([np.zeros((S, 1), dtype=np.int64), np.cumsum(clash, axis=1)], axis=1)
    ok = cum[:, None, 1:] - cum[:, :-1, None] == 0  # [s, i, j]: no clash in [i, j]
    prev_ok = np.ones(T, dtype=bool)
    prev_ok[1:] = e_row[:-1] != 0
    ones = np.concatenate([[0], np.cumsum(e_row == 1)])
    # ending-1 count in [i, j-1]
    interior = ones[None, :T] - ones[:T, None] == 0
    return ok & prev_ok[None, :, None] & interior[None]


def label_indicators(topology: Topology, T: int, labels: PartialLabels | None) -> Indicators:
    """Structural indicators AND-ed with the label consistency conditions."""
    if labels is None or labels.empty:
        return Indicators.structural(topology, T)
    base_delta, base_alpha = Indicators.structural_tables(topology, T)
    D = topology.depth
    x, e = labels.arrays(D, T)
    seg = [_segment_ok(x[d], e[d], topology.sizes[d]) for d in range(D)]
    delta = [base_delta[d] & seg[d] & (e[d] != 0)[None, None, :] for d in range(D)]
    alpha = []
    for d in range(D - 1):
        U = topology.sizes[d + 1]
        child_ok = ((x[d + 1][:, None] < 0) | (x[d + 1][:, None] == np.arange(U)[None, :])) & (e[d + 1] != 0)[:, None]
        alpha.append(base_alpha[d] & seg[d][..., None] & child_ok[None, None, :, :])
    return Indicators(delta, alpha, labeled=True)


def indicator_inside(labels: PartialLabels, d: int, s: int, i: int, j: int, T: int | None = None) -> int:
    """Scalar form of the segment indicator (conditions 1-4)."""
    for t in range(i, j + 1):
        if labels.states.get((d, t), s) != s:
            return 0
    if i > 0 and labels.ends.get((d, i - 1)) == 0:
        return 0
    if any(labels.ends.get((d, k)) == 1 for k in range(i, j)):
        return 0
    return int(labels.ends.get((d, j)) != 0)


def indicator_alpha(labels: PartialLabels, d: int, s: int, i: int, j: int, u: int) -> int:
    for t in range(i, j + 1):
        if labels.states.get((d, t), s) != s:
            return 0
    if i > 0 and labels.ends.get((d, i - 1)) == 0:
        return 0
    if any(labels.ends.get((d, k)) == 1 for k in range(i, j)):
        return 0
    if labels.states.get((d + 1, j), u) != u:
        return 0
    return int(labels.ends.get((d + 1, j)) != 0)


def constrained_infer(lattice, topology: Topology, labels: PartialLabels | None, numerics: str = "auto",
                      outside: bool = True) -> InferenceResult:
    if labels is not None:
        validate_labels(labels, topology, lattice.T)
    return infer(lattice, topology, label_indicators(topology, lattice.T, labels), numerics, outside)


def constrained_partition(lattice, topology: Topology, labels: PartialLabels | None, numerics: str = "auto") -> float:
    """``log Z(labels)``: log of the summed potential of all consistent configurations."""
    return constrained_infer(lattice, topology, labels, numerics, outside=False).log_Z


def constrained_marginal(lattice, topology, labels, d: int, t: int, numerics: str = "auto") -> np.ndarray:
    return constrained_infer(lattice, topology, labels, numerics).state_marginal(d, t)


def constrained_viterbi(lattice, topology: Topology, labels: PartialLabels | None):
    """MAP segment tree among configurations agreeing with ``labels``."""
    from .viterbi import backtrack, viterbi_forward

    if labels is not None:
        validate_labels(labels, topology, lattice.T)
    _, book = viterbi_forward(lattice, topology, label_indicators(topology, lattice.T, labels))
    return backtrack(book, topology)


def constrained_ess(lattice, topology: Topology, labels: PartialLabels | None, model, obs,
                    numerics: str = "auto") -> np.ndarray:
    """Feature expectations under ``Pr(h | labels, z)``."""
    res = constrained_infer(lattice, topology, labels, numerics)
    return model.expected_features(res.clique_posteriors(), obs)
