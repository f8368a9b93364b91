"""Generalised Viterbi in log space: max-product over nested segments, with
bookkeepers recording the winning child and transition, then top-down
backtracking.

Ties are broken deterministically: the lowest child state wins at segment
ends, and for transitions the lowest previous child state, then the earliest
boundary.  The initialisation branch wins any tie with the transition branch,
in which case the transition bookkeeper stays undefined.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .aio import Indicators
from .errors import CorruptBookkeeper, NoConsistentConfiguration
from .potentials import PotentialLattice
from .topology import Configuration, Segment, SegmentTree, Topology

NEG = -np.inf


class Undefined(enum.Enum):
    """Transition bookkeeper marker: the child was initialised at the parent's start."""

    UNDEFINED = "undefined"


UNDEFINED = Undefined.UNDEFINED


@dataclass
class BookKeeper:
    """``delta_arg[d][s,i,j]`` best last child; ``alpha_v/alpha_k`` best previous
    child and its end time, meaningful only where ``alpha_defined`` is true."""

    delta_arg: list
    alpha_v: list
    alpha_k: list
    alpha_defined: list
    root: int
    T: int
    log_alpha: list
    log_dhat: list

    def alpha_arg(self, d, s, i, j, u):
        if not self.alpha_defined[d][s, i, j, u]:
            return UNDEFINED
        return int(self.alpha_v[d][s, i, j, u]), int(self.alpha_k[d][s, i, j, u])


def viterbi_forward(lattice: PotentialLattice, topology: Topology, indicators: Indicators | None = None):
    """Max-product recursion; returns ``(max log Phi, BookKeeper)``."""
    T = lattice.T
    S = topology.sizes
    D = len(S)
    ind = indicators or Indicators.structural(topology, T)
    logA, logpi, logE = lattice.log_A, lattice.log_pi, lattice.log_E
    gate = lambda m: np.where(m, 0.0, NEG)

    ldelta = [np.full((S[d], T, T), NEG) for d in range(D)]
    ldhat = [np.full((S[d], T, T), NEG) for d in range(D)]
    lalpha = [np.full((S[d], T, T, S[d + 1]), NEG) for d in range(D - 1)]
    darg = [np.full((S[d], T, T), -1, dtype=np.int64) for d in range(D)]
    av = [np.full((S[d], T, T, S[d + 1]), -1, dtype=np.int64) for d in range(D - 1)]
    ak = [np.full((S[d], T, T, S[d + 1]), -1, dtype=np.int64) for d in range(D - 1)]
    adef = [np.zeros((S[d], T, T, S[d + 1]), dtype=bool) for d in range(D - 1)]
    b = D - 1

    for j in range(T):
        ldelta[b][:, j, j] = gate(ind.delta[b][:, j, j])
        ldhat[b][:, j, j] = ldelta[b][:, j, j] + lattice.log_persist_column(b, j)[:, j]
        for d in range(D - 2, -1, -1):
            rows = ind.rows_alpha[d][j]
            if not rows.size:
                continue
            child = ldhat[d + 1][:, :, j]  # (U, T)
            init = logpi[d][:, :, rows].transpose(0, 2, 1) + child[:, rows].T[None]
            best = init
            if j > 0:
                # cand[s, i, v, k, u]; v-major flattening so argmax favours low v, then low k
                prev = lalpha[d][:, rows, :j, :]  # (S, I, K, V)
                A = logA[d + 1][:, :, :, :j]  # (S, V, U, K)
                cand = prev.transpose(0, 1, 3, 2)[..., None] + A.transpose(0, 1, 3, 2)[:, None] + child[:, 1 : j + 1].T[None, None, None]
                n_s, n_i, V, K, U = cand.shape
                flat = cand.reshape(n_s, n_i, V * K, U)
                arg = flat.argmax(axis=2)
                tr = np.take_along_axis(flat, arg[:, :, None, :], axis=2)[:, :, 0, :]
                wins = tr > init
                best = np.where(wins, tr, init)
                v, k = np.divmod(arg, K)
                av[d][:, rows, j, :] = np.where(wins, v, -1)
                ak[d][:, rows, j, :] = np.where(wins, k, -1)
                adef[d][:, rows, j, :] = wins
            lalpha[d][:, rows, j, :] = best + gate(ind.alpha[d][:, rows, j, :])
            drows = ind.rows_delta[d][j]
            if drows.size:
                tot = lalpha[d][:, drows, j, :] + logE[d][:, None, :, j]
                darg[d][:, drows, j] = tot.argmax(axis=2)
                ldelta[d][:, drows, j] = tot.max(axis=2) + gate(ind.delta[d][:, drows, j])
                ldhat[d][:, drows, j] = ldelta[d][:, drows, j] + lattice.log_persist_column(d, j)[:, drows]

    top = ldhat[0][:, 0, T - 1]
    root = int(np.argmax(top))
    best = float(top[root])
    if best == NEG or math.isnan(best):
        raise NoConsistentConfiguration("no configuration has positive potential")
    return best, BookKeeper(darg, av, ak, adef, root, T, lalpha, ldhat)


def backtrack(book: BookKeeper, topology: Topology) -> SegmentTree:
    """Recover the MAP segment tree, top-down and right-to-left within each parent."""
    D = topology.depth
    T = book.T
    levels = [[] for _ in range(D)]
    stack = [(0, Segment(book.root, 0, T - 1))]
    while stack:
        d, seg = stack.pop()
        levels[d].append(seg)
        if d == D - 1:
            continue
        s, i, j = seg
        u = int(book.delta_arg[d][s, i, j])
        if u < 0:
            raise CorruptBookkeeper(f"no best child for level {d} segment {seg}")
        while True:
            arg = book.alpha_arg(d, s, i, j, u)
            if arg is UNDEFINED:
                if book.log_dhat[d + 1][u, i, j] == NEG:
                    raise CorruptBookkeeper(f"level {d + 1} child {u} cannot span [{i}, {j}]")
                stack.append((d + 1, Segment(u, i, j)))
                break
            v, k = arg
            if not i <= k < j:
                raise CorruptBookkeeper(f"transition time {k} outside [{i}, {j})")
            stack.append((d + 1, Segment(u, k + 1, j)))
            u, j = v, k
    return SegmentTree(tuple(tuple(sorted(l, key=lambda g: g.start)) for l in levels), T)


def viterbi(lattice: PotentialLattice, topology: Topology, indicators: Indicators | None = None):
    """``(max log Phi, Configuration)`` in one call."""
    best, book = viterbi_forward(lattice, topology, indicators)
    return best, backtrack(book, topology).to_configuration()
