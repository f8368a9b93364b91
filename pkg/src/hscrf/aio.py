"""Asymmetric inside-outside: inside/outside masses, the partition function
and posterior clique probabilities.

Mass arrays (0-based; ``U`` is the alphabet of level ``d + 1``):

* ``delta[d]``, ``dhat[d]`` ``(S_d, T, T)``: symmetric inside mass of a
  complete level-``d`` segment ``[i, j]`` of state ``s``, without / with its
  own persistence potential.
* ``alpha[d]`` ``(S_d, T, T, U)`` for ``d <= D-2``: asymmetric inside mass,
  parent ``s`` started at ``i`` still running, child ``u`` ends at ``j``.
* ``beta[d]``: ``alpha`` pushed through one transition,
  ``beta[d][s,i,k,u] = sum_v alpha[d][s,i,k,v] A[d+1][s,v,u,k]``.
* ``lam_sym[d]``, ``lam_hat[d]``, ``lam[d]``: the matching outside masses.

Columns are filled in order of the right end ``j``; within a column levels
go bottom-up.  When scaling is on, every column is divided by ``kappa_j``
as soon as it is complete, so every mass spanning ``[i, j]`` carries the
factor ``1 / prod(kappa[i:j+1])`` and every outside mass the complement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InsideNotComputed, MassesMissing, NoConsistentConfiguration
from .potentials import CliquePosteriors, PotentialLattice
from .topology import Configuration, Segment, SegmentTree, Topology


# ---------------------------------------------------------------- indicators


@dataclass
class Indicators:
    """0/1 consistency tables gating each mass entry.

    ``delta[d]`` is ``(S_d, T, T)`` and ``alpha[d]`` is ``(S_d, T, T, U)``.
    The structural version only encodes which index ranges exist (root spans
    everything, bottom segments are single steps); label constraints are
    AND-ed in by :mod:`hscrf.constrained`.
    """

    delta: list
    alpha: list
    labeled: bool = False
    rows_alpha: list = field(init=False, repr=False)
    rows_delta: list = field(init=False, repr=False)

    def __post_init__(self):
        self.refresh()

    def refresh(self):
        self.block_alpha = [np.triu(a.any(axis=(0, 3))) for a in self.alpha]
        self.block_delta = [np.triu(m.any(axis=0)) for m in self.delta]
        self.rows_alpha = [_rows_by_column(b) for b in self.block_alpha]
        self.rows_delta = [_rows_by_column(b) for b in self.block_delta]
        self.cols_delta = [_rows_by_column(b.T) for b in self.block_delta]

    @staticmethod
    def structural_tables(topology: Topology, T: int) -> tuple[list, list]:
        S = topology.sizes
        D = len(S)
        upper = np.triu(np.ones((T, T), dtype=bool))
        delta = []
        for d in range(D):
            m = np.zeros((S[d], T, T), dtype=bool)
            if d == 0:
                m[:, 0, T - 1] = True
            elif d == D - 1:
                m[:, np.arange(T), np.arange(T)] = True
            else:
                m[:] = upper
            delta.append(m)
        alpha = []
        for d in range(D - 1):
            m = np.zeros((S[d], T, T, S[d + 1]), dtype=bool)
            if d == 0:
                m[:, 0, :, :] = True
            else:
                m[:] = upper[None, :, :, None]
            alpha.append(m)
        return delta, alpha

    @classmethod
    def structural(cls, topology: Topology, T: int) -> "Indicators":
        return cls(*cls.structural_tables(topology, T))


def _rows_by_column(block: np.ndarray) -> list:
    """``[flatnonzero(block[:, j]) for j]`` in one pass."""
    cols, rows = np.nonzero(block.T)
    return np.split(rows, np.searchsorted(cols, np.arange(1, block.shape[1])))


# ---------------------------------------------------------------- masses


@dataclass
class MassLattice:
    delta: list
    dhat: list
    alpha: list
    beta: list
    kappa: np.ndarray
    lam_sym: list | None = None
    lam_hat: list | None = None
    lam: list | None = None

    @property
    def has_outside(self) -> bool:
        return self.lam is not None

    @property
    def log_scale(self) -> float:
        return float(np.log(self.kappa).sum())


def _exp(a):
    with np.errstate(under="ignore"):
        return np.exp(a)


class _Tables:
    """Probability-domain potentials, exponentiated once per lattice."""

    def __init__(self, lattice: PotentialLattice):
        self.lattice = lattice
        self.A = [None] + [_exp(a) for a in lattice.log_A[1:]]
        self.pi = [_exp(p) for p in lattice.log_pi]
        self.E = [_exp(e) for e in lattice.log_E]
        self.R = [_exp(r) for r in lattice._log_R] if lattice._log_R is not None else None

    def R_col(self, d, j):
        if self.R is not None:
            return self.R[d][:, : j + 1, j]
        return _exp(self.lattice.log_persist_column(d, j))


def _live(block: np.ndarray, rows: np.ndarray, stop: int, start: int = 0) -> np.ndarray:
    """Columns in ``[start, stop)`` where any of ``rows`` has alpha mass."""
    return np.flatnonzero(block[rows, start:stop].any(axis=0)) + start


def compute_inside(lattice: PotentialLattice, topology: Topology, indicators: Indicators | None = None,
                   scale: bool = False) -> MassLattice:
    """Fill the inside family column by column.

    With ``scale=True`` each column is normalised by the level-0 asymmetric
    mass ``kappa_j`` (see :mod:`hscrf.scaling`); otherwise ``kappa`` is all ones.
    """
    from .scaling import column_scale

    T = lattice.T
    S = topology.sizes
    D = len(S)
    ind = indicators or Indicators.structural(topology, T)
    tab = _Tables(lattice)

    delta = [np.zeros((S[d], T, T)) for d in range(D)]
    dhat = [np.zeros((S[d], T, T)) for d in range(D)]
    alpha = [np.zeros((S[d], T, T, S[d + 1])) for d in range(D - 1)]
    beta = [np.zeros((S[d], T, T, S[d + 1])) for d in range(D - 1)]
    kappa = np.ones(T)
    bottom = D - 1

    with np.errstate(over="ignore", invalid="ignore"):
        for j in range(T):
            delta[bottom][:, j, j] = ind.delta[bottom][:, j, j]
            dhat[bottom][:, j, j] = delta[bottom][:, j, j] * tab.R_col(bottom, j)[:, j]
            for d in range(D - 2, -1, -1):
                rows = ind.rows_alpha[d][j]
                if not rows.size:
                    continue
                child = dhat[d + 1][:, :, j]  # (U, T): child segments ending at j
                val = tab.pi[d][:, :, rows].transpose(0, 2, 1) * child[:, rows].T[None]
                if j > 0:
                    # transition branch: previous child ended at k, next one spans [k+1, j]
                    ks = _live(ind.block_alpha[d], rows, j)
                    if ks.size:
                        val = val + np.einsum("sikU,Uk->siU", beta[d][:, rows][:, :, ks, :], child[:, ks + 1])
                val *= ind.alpha[d][:, rows, j, :]
                alpha[d][:, rows, j, :] = val
                drows = ind.rows_delta[d][j]
                if drows.size:
                    a = alpha[d][:, drows, j, :]
                    delta[d][:, drows, j] = ind.delta[d][:, drows, j] * np.einsum("siu,su->si", a, tab.E[d][:, :, j])
                    dhat[d][:, drows, j] = delta[d][:, drows, j] * tab.R_col(d, j)[:, drows]
            if scale:
                k = column_scale(alpha, dhat, j)
                kappa[j] = k
                for d in range(D - 1):
                    alpha[d][:, ind.rows_alpha[d][j], j, :] /= k
                for d in range(D):
                    rows = ind.rows_delta[d][j]
                    delta[d][:, rows, j] /= k
                    dhat[d][:, rows, j] /= k
            if j < T - 1:
                for d in range(D - 1):
                    rows = ind.rows_alpha[d][j]
                    if rows.size:
                        beta[d][:, rows, j, :] = np.einsum("siv,svu->siu", alpha[d][:, rows, j, :], tab.A[d + 1][:, :, :, j])
    return MassLattice(delta, dhat, alpha, beta, kappa)


def compute_outside(lattice: PotentialLattice, topology: Topology, inside: MassLattice | None,
                    indicators: Indicators | None = None) -> MassLattice:
    """Fill the outside family top-down, ``j`` descending within a level."""
    if inside is None or inside.alpha is None:
        raise InsideNotComputed("run compute_inside first")
    T = lattice.T
    S = topology.sizes
    D = len(S)
    ind = indicators or Indicators.structural(topology, T)
    tab = _Tables(lattice)
    dhat, beta = inside.dhat, inside.beta

    lam_sym = [np.zeros((S[d], T, T)) for d in range(D)]
    lam_hat = [np.zeros((S[d], T, T)) for d in range(D)]
    lam = [np.zeros((S[d], T, T, S[d + 1])) for d in range(D - 1)]
    lam_sym[0][:, 0, T - 1] = ind.delta[0][:, 0, T - 1]
    lam_hat[0][:, 0, T - 1] = lam_sym[0][:, 0, T - 1] * tab.R_col(0, T - 1)[:, 0]

    with np.errstate(over="ignore", invalid="ignore"):
        for d in range(D - 1):
            child = dhat[d + 1]
            for j in range(T - 1, -1, -1):
                rows = ind.rows_alpha[d][j]
                if not rows.size:
                    continue
                val = lam_hat[d][:, rows, j][:, :, None] * tab.E[d][:, None, :, j]
                if j < T - 1:
                    # next child v spans [j+1, t] inside the same parent
                    ts = _live(ind.block_alpha[d], rows, T, j + 1)
                    if ts.size:
                        C = np.einsum("sitv,vt->siv", lam[d][:, rows][:, :, ts, :], child[:, j + 1, ts])
                        val = val + np.einsum("siv,suv->siu", C, tab.A[d + 1][:, :, :, j])
                lam[d][:, rows, j, :] = val * ind.alpha[d][:, rows, j, :]
            for i in range(T):
                cols = ind.cols_delta[d + 1][i]
                if not cols.size:
                    continue
                acc = np.einsum("sju,su->uj", lam[d][:, i, cols, :], tab.pi[d][:, :, i])
                if i > 0:
                    starts = ind.rows_alpha[d][i - 1]
                    if starts.size:
                        acc = acc + np.einsum("stju,stu->uj", lam[d][:, starts][:, :, cols, :], beta[d][:, starts, i - 1, :])
                lam_sym[d + 1][:, i, cols] = acc * ind.delta[d + 1][:, i, cols]
            for j in range(T):
                rows = ind.rows_delta[d + 1][j]
                if rows.size:
                    lam_hat[d + 1][:, rows, j] = lam_sym[d + 1][:, rows, j] * tab.R_col(d + 1, j)[:, rows]
    inside.lam_sym, inside.lam_hat, inside.lam = lam_sym, lam_hat, lam
    return inside


# ---------------------------------------------------------------- results


@dataclass
class InferenceResult:
    """Masses plus the normaliser; all ratios are scale-free."""

    topology: Topology
    lattice: PotentialLattice
    masses: MassLattice
    indicators: Indicators

    @property
    def T(self) -> int:
        return self.lattice.T

    @property
    def scaled_Z(self) -> float:
        return float(self.masses.dhat[0][:, 0, self.T - 1].sum())

    @property
    def log_Z(self) -> float:
        z = self.scaled_Z
        if not math.isfinite(z):
            return math.inf
        if z <= 0:
            return -math.inf
        return math.log(z) + self.masses.log_scale

    def _need_outside(self):
        if not self.masses.has_outside:
            raise MassesMissing("outside masses have not been computed")

    def partition_function(self, via: str = "inside_top", i: int = 0, d: int = 1, t: int = 0) -> float:
        """``log Z`` by one of three routes: ``inside_top``, ``outside_bottom``, ``general``."""
        m = self.masses
        if via == "inside_top":
            return self.log_Z
        self._need_outside()
        if via == "outside_bottom":
            b = self.topology.depth - 1
            z = float((m.delta[b][:, i, i] * m.lam_hat[b][:, i, i]).sum())
        elif via == "general":
            T = self.T
            mask = np.zeros((T, T), dtype=bool)
            mask[: t + 1, t:] = True
            z = float((m.delta[d] * m.lam_hat[d])[:, mask].sum())
        else:
            raise ValueError(f"unknown route {via!r}")
        return math.log(z) + m.log_scale if z > 0 else -math.inf

    def segment_posteriors(self, d: int) -> np.ndarray:
        """``Pr(level d has a complete segment (s, i, j))`` as ``(S_d, T, T)``."""
        self._need_outside()
        m = self.masses
        return m.dhat[d] * m.lam_sym[d] / self.scaled_Z

    def state_marginal(self, d: int, t: int) -> np.ndarray:
        P = self.segment_posteriors(d)
        return P[:, : t + 1, t:].sum(axis=(1, 2))

    def state_marginals(self, d: int) -> np.ndarray:
        """``(S_d, T)`` table of all state marginals at level ``d``."""
        post = CliquePosteriors([self.segment_posteriors(d)], [], [], [])
        return post.occupancy(0)

    def clique_posteriors(self) -> CliquePosteriors:
        self._need_outside()
        m = self.masses
        T = self.T
        D = self.topology.depth
        Z = self.scaled_Z
        tab = _Tables(self.lattice)
        seg = [self.segment_posteriors(d) for d in range(D)]
        init, end = [], []
        with np.errstate(invalid="ignore"):
            for d in range(D - 1):
                init.append(tab.pi[d] * np.einsum("siju,uij->sui", m.lam[d], m.dhat[d + 1]) / Z)
                end.append(tab.E[d] * np.einsum("sij,siju->suj", m.lam_hat[d], m.alpha[d]) / Z)
            trans = [None]
            for c in range(1, D):
                P = np.zeros(tab.A[c].shape)
                for t in range(T - 1):
                    G = np.einsum("sijv,vj->siv", m.lam[c - 1][:, : t + 1, t + 1 :, :], m.dhat[c][:, t + 1, t + 1 :])
                    P[..., t] = tab.A[c][..., t] * np.einsum("siu,siv->suv", m.alpha[c - 1][:, : t + 1, t, :], G)
                trans.append(P / Z)
        clean = lambda xs: [None if a is None else np.nan_to_num(a, nan=0.0) for a in xs]
        return CliquePosteriors(seg, clean(trans), clean(init), clean(end))

    def sample(self, rng: np.random.Generator) -> Configuration:
        """Exact draw by stochastic top-down backtracking through the inside masses."""
        m = self.masses
        tab = _Tables(self.lattice)
        D = self.topology.depth
        T = self.T

        def pick(w):
            w = np.asarray(w, dtype=float).ravel()
            tot = w.sum()
            if not tot > 0:
                raise NoConsistentConfiguration("zero inside mass while sampling")
            return int(rng.choice(w.size, p=w / tot))

        levels = [[] for _ in range(D)]
        s = pick(m.dhat[0][:, 0, T - 1])
        stack = [(0, Segment(s, 0, T - 1))]
        while stack:
            d, seg = stack.pop()
            levels[d].append(seg)
            if d == D - 1:
                continue
            s, i, j = seg
            u = pick(m.alpha[d][s, i, j, :] * tab.E[d][s, :, j])
            while True:
                # branches: init (child spans [i, j]) or transition from (v, k)
                w_init = m.dhat[d + 1][u, i, j] * tab.pi[d][s, u, i]
                w_tr = (m.alpha[d][s, i, i:j, :] * tab.A[d + 1][s, :, u, i:j].T) * m.dhat[d + 1][u, i + 1 : j + 1, j][:, None]
                choice = pick(np.concatenate([[w_init], w_tr.ravel()]))
                if choice == 0:
                    stack.append((d + 1, Segment(u, i, j)))
                    break
                k, v = divmod(choice - 1, w_tr.shape[1])
                k += i
                stack.append((d + 1, Segment(u, k + 1, j)))
                u, j = v, k
        tree = SegmentTree(tuple(tuple(sorted(l, key=lambda g: g.start)) for l in levels), T)
        return tree.to_configuration()


def infer(lattice: PotentialLattice, topology: Topology, indicators: Indicators | None = None,
          numerics: str = "auto", outside: bool = True) -> InferenceResult:
    """Inside (and optionally outside) pass with the chosen numerics mode."""
    from .scaling import resolve_numerics

    ind = indicators or Indicators.structural(topology, lattice.T)
    scale = resolve_numerics(numerics, lattice.T) == "scaled"
    masses = compute_inside(lattice, topology, ind, scale=scale)
    if outside:
        compute_outside(lattice, topology, masses, ind)
    return InferenceResult(topology, lattice, masses, ind)


def partition_function(result: InferenceResult, via: str = "inside_top", **kw) -> float:
    return result.partition_function(via, **kw)


def state_marginal(result: InferenceResult, d: int, t: int) -> np.ndarray:
    return result.state_marginal(d, t)


def log_partition(lattice: PotentialLattice, topology: Topology, numerics: str = "auto") -> float:
    return infer(lattice, topology, numerics=numerics, outside=False).log_Z


def sample_from_inside(topology: Topology, lattice: PotentialLattice, rng: np.random.Generator,
                       indicators: Indicators | None = None) -> Configuration:
    return infer(lattice, topology, indicators, numerics="scaled", outside=False).sample(rng)
