"""Flat semi-Markov CRF with a maximum segment length.

A standalone engine (forward, backward, scaled forward, constrained
partition, Viterbi) that doubles as the reduction target of a three-level
HSCRF whose root and bottom levels have a single state.

Conventions: ``log_R[s, i, j]`` scores a segment of state ``s`` covering
``[i, j]`` (``j - i + 1 <= L``); ``log_A[a, b, t]`` scores ``a`` ending at
``t`` followed by ``b`` starting at ``t + 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, NoConsistentConfiguration, TopologyError, ZeroColumn
from .potentials import CliquePosteriors, PotentialLattice
from .topology import Segment, SegmentTree, Topology

NEG = -np.inf


@dataclass
class SemiModel:
    log_R: np.ndarray
    log_A: np.ndarray
    L: int | None = None

    def __post_init__(self):
        self.log_R = np.array(self.log_R, dtype=float)
        self.log_A = np.asarray(self.log_A, dtype=float)
        S, T, T2 = self.log_R.shape
        if T != T2 or self.log_A.shape != (S, S, T):
            raise DimensionMismatch(f"segment table {self.log_R.shape} and transition table {self.log_A.shape} disagree")
        self.L = T if self.L is None else int(self.L)
        if not 1 <= self.L:
            raise DimensionMismatch("maximum segment length must be >= 1")
        self.L = min(self.L, T)
        i, j = np.indices((T, T))
        self.log_R[:, (i > j) | (j - i + 1 > self.L)] = NEG

    @property
    def S(self) -> int:
        return self.log_R.shape[0]

    @property
    def T(self) -> int:
        return self.log_R.shape[1]

    def window(self, j: int) -> range:
        """Admissible segment starts for a segment ending at ``j``."""
        return range(max(0, j - self.L + 1), j + 1)

    def masked(self, labels) -> "SemiModel":
        """Copy with segments inconsistent with ``labels`` removed.

        ``labels`` carries level-0 keys: ``states[(0, t)]`` and ``ends[(0, t)]``.
        """
        ok = semi_indicators(self.S, self.T, labels)
        return SemiModel(np.where(ok, self.log_R, NEG), self.log_A, self.L)

    def log_potential(self, segments) -> float:
        total = 0.0
        prev = None
        for s, i, j in segments:
            total += self.log_R[s, i, j]
            if prev is not None:
                total += self.log_A[prev, s, i - 1]
            prev = s
        return float(total)


def semi_indicators(S: int, T: int, labels) -> np.ndarray:
    """``(S, T, T)`` consistency of each segment with observed states/endings."""
    ok = np.ones((S, T, T), dtype=bool)
    if labels is None:
        return ok
    x = np.full(T, -1)
    e = np.full(T, -1)
    for (d, t), s in labels.states.items():
        if d == 0:
            x[t] = s
    for (d, t), v in labels.ends.items():
        if d == 0:
            e[t] = v
    clash = (x[None, :] >= 0) & (x[None, :] != np.arange(S)[:, None])
    cum = np.concatenate([np.zeros((S, 1), dtype=np.int64), np.cumsum(clash, axis=1)], axis=1)
    ok &= cum[:, None, 1:] - cum[:, :-1, None] == 0
    prev = np.ones(T, dtype=bool)
    prev[1:] = e[:-1] != 0
    ones = np.concatenate([[0], np.cumsum(e == 1)])
    ok &= prev[None, :, None]
    ok &= (ones[None, :T] - ones[:T, None] == 0)[None]
    ok &= (e != 0)[None, None, :]
    return ok


@dataclass
class ForwardBackward:
    alpha: np.ndarray  # (T, S)
    beta: np.ndarray  # (T, S)
    log_Z: float
    log_kappa: np.ndarray | None = None


def _exp(a):
    with np.errstate(under="ignore", over="ignore"):
        return np.exp(a)


def semi_forward(model: SemiModel, scaled: bool = False):
    """``(alpha, log Z, log kappa)``; with ``scaled`` each ``alpha_j`` sums to one."""
    S, T = model.S, model.T
    A = _exp(model.log_A)
    alpha = np.zeros((T, S))
    logk = np.zeros(T)
    C = np.zeros(T + 1)  # C[t + 1] = sum of log kappa up to t
    with np.errstate(over="ignore", invalid="ignore"):
        for j in range(T):
            starts = np.arange(max(0, j - model.L + 1), j + 1)
            logR = model.log_R[:, starts, j]
            if scaled:
                # partial scaling: b / prod_k a_k = exp(log b - sum_k log a_k) over [i, j-1]
                logR = logR - (C[j] - C[starts])
            R = _exp(logR)
            pre = np.zeros((S, len(starts)))
            inner = starts > 0
            pre[:, inner] = np.einsum("ia,abi->bi", alpha[starts[inner] - 1], A[:, :, starts[inner] - 1])
            pre[:, ~inner] = 1.0
            col = (pre * R).sum(axis=1)
            if scaled:
                k = col.sum()
                if not k > 0:
                    raise ZeroColumn(f"no mass survives at column {j}", column=j)
                col = col / k
                logk[j] = math.log(k)
                C[j + 1] = C[j] + logk[j]
            alpha[j] = col
    z = alpha[T - 1].sum()
    log_Z = (math.log(z) if z > 0 else -math.inf) if math.isfinite(z) else math.inf
    return alpha, log_Z + float(logk.sum()), logk


def semi_backward(model: SemiModel, log_kappa: np.ndarray | None = None):
    """``(beta, log Z)``; with ``log_kappa`` the forward scale factors are reused."""
    S, T = model.S, model.T
    A = _exp(model.log_A)
    beta = np.zeros((T, S))
    C = np.concatenate([[0.0], np.cumsum(log_kappa)]) if log_kappa is not None else None
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(T - 1, -1, -1):
            ends = np.arange(i, min(i + model.L, T))
            logR = model.log_R[:, i, ends]
            if C is not None:
                logR = logR - (C[ends + 1] - C[i])
            R = _exp(logR)
            post = np.zeros((S, len(ends)))
            inner = ends < T - 1
            post[:, inner] = np.einsum("abj,jb->aj", A[:, :, ends[inner]], beta[ends[inner] + 1])
            post[:, ~inner] = 1.0
            beta[i] = (R * post).sum(axis=1)
    z = beta[0].sum()
    log_Z = (math.log(z) if z > 0 else -math.inf) if math.isfinite(z) else math.inf
    if C is not None:
        log_Z += C[-1]
    return beta, log_Z


def semi_scaled(model: SemiModel) -> float:
    return semi_forward(model, scaled=True)[1]


def semi_constrained(model: SemiModel, labels, scaled: bool = False) -> float:
    """``log Z(labels)``."""
    return semi_forward(model.masked(labels), scaled)[1]


def forward_backward(model: SemiModel, scaled: bool = False) -> ForwardBackward:
    alpha, log_Z, logk = semi_forward(model, scaled)
    beta, _ = semi_backward(model, logk if scaled else None)
    return ForwardBackward(alpha, beta, log_Z, logk if scaled else None)


def semi_posteriors(model: SemiModel, fb: ForwardBackward | None = None, scaled: bool = False):
    """``(segment marginals (S, T, T), transition marginals (S, S, T))``."""
    fb = fb or forward_backward(model, scaled)
    S, T = model.S, model.T
    A = _exp(model.log_A)
    logR = model.log_R
    if fb.log_kappa is not None:
        C = np.concatenate([[0.0], np.cumsum(fb.log_kappa)])
        logR = logR - (C[None, None, 1:] - C[None, :-1, None])
        Z = float(fb.alpha[T - 1].sum())
    else:
        Z = math.exp(fb.log_Z)
    R = _exp(logR)
    pre = np.ones((S, T))
    pre[:, 1:] = np.einsum("ta,abt->bt", fb.alpha[:-1], A[:, :, :-1])
    post = np.ones((S, T))
    post[:, :-1] = np.einsum("abt,tb->at", A[:, :, :-1], fb.beta[1:])
    seg = pre[:, :, None] * R * post[:, None, :] / Z
    trans = np.zeros((S, S, T))
    trans[:, :, :-1] = fb.alpha[:-1].T[:, None, :] * A[:, :, :-1] * fb.beta[1:].T[None, :, :] / Z
    return np.nan_to_num(seg), np.nan_to_num(trans)


def semi_marginals(model: SemiModel, scaled: bool = False) -> np.ndarray:
    """``(S, T)`` state marginals."""
    seg, _ = semi_posteriors(model, scaled=scaled)
    return CliquePosteriors([seg], [], [], []).occupancy(0)


def semi_viterbi(model: SemiModel) -> tuple[float, list[Segment]]:
    """MAP segmentation; ties favour the lower state, then the earlier start."""
    S, T = model.S, model.T
    delta = np.full((T, S), NEG)
    back = np.zeros((T, S, 2), dtype=np.int64)
    for j in range(T):
        for s in range(S):
            best, arg = NEG, (-1, -1)
            for i in model.window(j):
                r = model.log_R[s, i, j]
                if r == NEG:
                    continue
                if i == 0:
                    cand, a = r, (-1, 0)
                else:
                    prev = delta[i - 1] + model.log_A[:, s, i - 1]
                    sp = int(np.argmax(prev))
                    cand, a = prev[sp] + r, (sp, i)
                if cand > best:
                    best, arg = cand, a
            delta[j, s] = best
            back[j, s] = arg
    s = int(np.argmax(delta[T - 1]))
    best = float(delta[T - 1, s])
    if best == NEG:
        raise NoConsistentConfiguration("no segmentation has positive potential")
    segs = []
    j = T - 1
    while j >= 0:
        sp, i = back[j, s]
        segs.append(Segment(s, int(i), j))
        j, s = int(i) - 1, int(sp)
    return best, segs[::-1]


# ---------------------------------------------------------------- HSCRF bridge


def check_flat(topology: Topology) -> None:
    if topology.depth != 3 or topology.sizes[0] != 1 or topology.sizes[2] != 1:
        raise TopologyError("the flat engine needs depth 3 with single-state root and bottom levels")


def reduce_from_hscrf(topology: Topology, lattice: PotentialLattice) -> SemiModel:
    """Collapse a three-level lattice with dummy root/bottom into a flat model."""
    check_flat(topology)
    T = lattice.T
    S = topology.sizes[1]
    i, j = np.indices((T, T))
    valid = i <= j
    R2 = lattice.log_persist(2)[0].diagonal()
    cR2 = np.concatenate([[0.0], np.cumsum(R2)])
    A2 = lattice.log_A[2][:, 0, 0, :]  # (S, T): bottom transition under parent s
    cA2 = np.concatenate([np.zeros((S, 1)), np.cumsum(A2, axis=1)], axis=1)
    with np.errstate(invalid="ignore"):
        R = lattice.log_persist(1).copy()
        R += lattice.log_pi[1][:, 0, :][:, :, None]
        R += lattice.log_E[1][:, 0, :][:, None, :]
        R += np.where(valid, cR2[None, 1:] - cR2[:-1, None], 0.0)[None]
        R += np.where(valid[None], cA2[:, None, 1:] - cA2[:, :-1, None] - A2[:, None, :], 0.0)
        R[:, 0, :] += lattice.log_pi[0][0, :, 0][:, None] + lattice.log_persist(0)[0, 0, T - 1]
        R[:, :, T - 1] += lattice.log_E[0][0, :, T - 1][:, None]
    R[:, ~valid] = NEG
    R = np.where(np.isnan(R), NEG, R)
    return SemiModel(R, lattice.log_A[1][0], lattice.max_duration[1])


def hscrf_posteriors(topology: Topology, model: SemiModel, scaled: bool = False) -> CliquePosteriors:
    """Lift flat posteriors back to three-level clique posteriors."""
    check_flat(topology)
    seg, trans = semi_posteriors(model, scaled=scaled)
    S, T = model.S, model.T
    out = CliquePosteriors.zeros(topology, T)
    out.seg[0][0, 0, T - 1] = 1.0
    out.seg[1] = seg
    out.seg[2][0, np.arange(T), np.arange(T)] = 1.0
    out.trans[1][0] = trans
    # bottom transition at t happens inside every level-1 segment with i <= t < j
    Q = np.cumsum(seg, axis=1)
    Q = np.cumsum(Q[:, :, ::-1], axis=2)[:, :, ::-1]
    for t in range(T - 1):
        out.trans[2][:, 0, 0, t] = Q[:, t, t + 1]
    out.init[0][0, :, 0] = seg[:, 0, :].sum(axis=1)
    out.end[0][0, :, T - 1] = seg[:, :, T - 1].sum(axis=1)
    out.init[1][:, 0, :] = seg.sum(axis=2)
    out.end[1][:, 0, :] = seg.sum(axis=1)
    return out


def hscrf_tree(segments: list[Segment], T: int) -> SegmentTree:
    """Three-level segment tree for a flat segmentation."""
    return SegmentTree(((Segment(0, 0, T - 1),), tuple(segments), tuple(Segment(0, t, t) for t in range(T))), T)


def flat_labels(labels) -> object | None:
    """Level-1 labels of a three-level label set, re-keyed to the flat level 0."""
    if labels is None:
        return None
    from .constrained import PartialLabels

    return PartialLabels({(0, t): s for (d, t), s in labels.states.items() if d == 1},
                         {(0, t): v for (d, t), v in labels.ends.items() if d == 1})


def semi_infer(topology: Topology, lattice: PotentialLattice, labels=None, scaled: bool = False,
               posteriors: bool = True):
    """``(log Z, three-level clique posteriors or None)`` through the flat engine."""
    model = reduce_from_hscrf(topology, lattice)
    if labels is not None:
        model = model.masked(flat_labels(labels))
    fb = forward_backward(model, scaled) if posteriors else None
    log_Z = fb.log_Z if fb else semi_forward(model, scaled)[1]
    return log_Z, (hscrf_posteriors(topology, model, scaled) if posteriors else None)
