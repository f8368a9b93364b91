"""Brute-force reference computations by explicit enumeration.

Everything here sums or maximises over the full list of legal
configurations, scoring each one by direct clique lookup.  It is
exponential in ``T`` and meant for small instances and for checking the
dynamic programs.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np
from scipy.special import logsumexp

from .errors import BudgetExceeded, NoConsistentConfiguration
from .potentials import CliquePosteriors, FeatureModel, ObservationSequence, PotentialLattice
from .topology import Configuration, Topology

DEFAULT_BUDGET = 2_000_000


@dataclass
class EnumerationBudget:
    limit: int = DEFAULT_BUDGET
    reached: bool = False


def count_configurations(topology: Topology, T: int) -> int:
    """Number of legal configurations of length ``T`` (exact integer)."""
    S = topology.sizes
    D = len(S)
    # ways[s][n]: fillings of a level-d segment of state s and length n
    ways = [[1 if n == 1 else 0 for n in range(T + 1)] for _ in range(S[D - 1])]
    for d in range(D - 2, -1, -1):
        child = ways
        ways = []
        for s in range(S[d]):
            one = [sum(child[u][n] for u in topology.children[d][s]) for n in range(T + 1)]
            F = [1] + [0] * T
            for m in range(1, T + 1):
                F[m] = sum(one[l] * F[m - l] for l in range(1, m + 1))
            F[0] = 0
            ways.append(F)
    return sum(ways[s][T] for s in range(S[0]))


def _ending_patterns(D: int, T: int):
    """Each interior time picks the highest ending level ``m``; levels ``>= m`` end."""
    for ms in itertools.product(range(D - 1, 0, -1), repeat=T - 1):
        e = np.zeros((D, T), dtype=np.int8)
        e[:, T - 1] = 1
        for t, m in enumerate(ms):
            e[m:, t] = 1
        yield e


def _segments(row: np.ndarray) -> list[tuple[int, int]]:
    ends = np.flatnonzero(row)
    starts = np.concatenate([[0], ends[:-1] + 1])
    return list(zip(starts.tolist(), ends.tolist()))


def enumerate_arrays(topology: Topology, T: int, budget: int | EnumerationBudget = DEFAULT_BUDGET):
    """All legal configurations as stacked ``(N, D, T)`` int8 arrays ``(x, e)``."""
    limit = budget.limit if isinstance(budget, EnumerationBudget) else int(budget)
    n = count_configurations(topology, T)
    if n > limit:
        if isinstance(budget, EnumerationBudget):
            budget.reached = True
        raise BudgetExceeded(f"{n} configurations exceed the budget of {limit}", count=n, budget=limit)
    S = topology.sizes
    D = len(S)
    xs, es = [], []
    for e in _ending_patterns(D, T):
        x = np.zeros((S[0], D, T), dtype=np.int8)
        x[:, 0, :] = np.arange(S[0])[:, None]
        for d in range(1, D):
            mask = topology.child_mask[d - 1]
            for a, b in _segments(e[d]):
                grown = np.repeat(x, S[d], axis=0)
                u = np.tile(np.arange(S[d]), len(x))
                grown[:, d, a : b + 1] = u[:, None]
                x = grown[mask[grown[:, d - 1, a], u]]
        xs.append(x)
        es.append(np.broadcast_to(e, x.shape))
    X = np.concatenate(xs)
    E = np.ascontiguousarray(np.concatenate(es))
    assert len(X) == n
    return X, E


def enumerate_configurations(topology: Topology, T: int, budget: int = DEFAULT_BUDGET) -> Iterator[Configuration]:
    """Yield every legal configuration exactly once."""
    X, E = enumerate_arrays(topology, T, budget)
    for x, e in zip(X, E):
        yield Configuration(x, e)


def _segment_starts(E: np.ndarray) -> np.ndarray:
    """``start[n, d, t]``: first index of the segment covering ``t``."""
    N, D, T = E.shape
    begins = np.zeros_like(E, dtype=bool)
    begins[:, :, 0] = True
    begins[:, :, 1:] = E[:, :, :-1] == 1
    idx = np.where(begins, np.arange(T), 0)
    return np.maximum.accumulate(idx, axis=2)


def log_potentials(lattice: PotentialLattice, X: np.ndarray, E: np.ndarray) -> np.ndarray:
    """``log Phi`` for each stacked configuration, by direct lookup."""
    X = X.astype(np.int64)
    N, D, T = X.shape
    start = _segment_starts(E)
    t = np.broadcast_to(np.arange(T), (N, T))
    ends = E == 1
    total = np.zeros(N)

    def masked(mask, vals):
        return np.where(mask, vals, 0.0).sum(axis=1)

    for d in range(D):
        R = lattice.log_persist(d)
        total += masked(ends[:, d], R[X[:, d], start[:, d], t])
    begins = start == np.arange(T)
    for d in range(D - 1):
        total += masked(begins[:, d], lattice.log_pi[d][X[:, d], X[:, d + 1], t])
        total += masked(ends[:, d], lattice.log_E[d][X[:, d], X[:, d + 1], t])
    for c in range(1, D):
        tt = t[:, : T - 1]
        mask = ends[:, c, : T - 1] & ~ends[:, c - 1, : T - 1]
        vals = lattice.log_A[c][X[:, c - 1, 1:], X[:, c, :-1], X[:, c, 1:], tt]
        total += masked(mask, vals)
    return total


def consistent(X: np.ndarray, E: np.ndarray, labels) -> np.ndarray:
    """Boolean mask of configurations agreeing with every label."""
    keep = np.ones(len(X), dtype=bool)
    if labels is None:
        return keep
    for (d, t), s in labels.states.items():
        keep &= X[:, d, t] == s
    for (d, t), v in labels.ends.items():
        keep &= E[:, d, t] == v
    return keep


class Oracle:
    """Enumeration-backed reference for one lattice (optionally label-filtered)."""

    def __init__(self, topology: Topology, lattice: PotentialLattice, labels=None, budget: int = DEFAULT_BUDGET):
        self.topology = topology
        self.lattice = lattice
        X, E = enumerate_arrays(topology, lattice.T, budget)
        keep = consistent(X, E, labels)
        self.X, self.E = X[keep], E[keep]
        self.log_phi = log_potentials(lattice, self.X, self.E)

    @property
    def count(self) -> int:
        return len(self.X)

    def log_Z(self) -> float:
        if self.count == 0:
            return -math.inf
        return float(logsumexp(self.log_phi))

    def probabilities(self) -> np.ndarray:
        return np.exp(self.log_phi - self.log_Z())

    def marginal(self, d: int, t: int) -> np.ndarray:
        p = self.probabilities()
        return np.bincount(self.X[:, d, t].astype(np.int64), weights=p, minlength=self.topology.sizes[d])

    def max(self) -> tuple[float, Configuration]:
        if self.count == 0:
            raise NoConsistentConfiguration("no configuration is consistent with the labels")
        n = int(np.argmax(self.log_phi))
        return float(self.log_phi[n]), Configuration(self.X[n], self.E[n])

    def clique_posteriors(self) -> CliquePosteriors:
        """Expected clique counts under ``Pr(zeta | z)``."""
        p = self.probabilities()
        X = self.X.astype(np.int64)
        N, D, T = X.shape
        out = CliquePosteriors.zeros(self.topology, T)
        start = _segment_starts(self.E)
        ends = self.E == 1
        begins = start == np.arange(T)
        pw = np.broadcast_to(p[:, None], (N, T))
        tt = np.broadcast_to(np.arange(T), (N, T))
        for d in range(D):
            m = ends[:, d]
            np.add.at(out.seg[d], (X[:, d][m], start[:, d][m], tt[m]), pw[m])
            if d < D - 1:
                b = begins[:, d]
                np.add.at(out.init[d], (X[:, d][b], X[:, d + 1][b], tt[b]), pw[b])
                np.add.at(out.end[d], (X[:, d][m], X[:, d + 1][m], tt[m]), pw[m])
        for c in range(1, D):
            m = ends[:, c, :-1] & ~ends[:, c - 1, :-1]
            idx = (X[:, c - 1, 1:][m], X[:, c, :-1][m], X[:, c, 1:][m], tt[:, :-1][m])
            np.add.at(out.trans[c], idx, pw[:, :-1][m])
        return out

    def sample(self, n: int, rng: np.random.Generator) -> list[Configuration]:
        picks = rng.choice(self.count, size=n, p=self.probabilities())
        return [Configuration(self.X[k], self.E[k]) for k in picks]


def oracle_Z(topology, lattice, labels=None):
    return Oracle(topology, lattice, labels).log_Z()


def oracle_marginal(topology, lattice, d, t, labels=None):
    return Oracle(topology, lattice, labels).marginal(d, t)


def oracle_ess(topology, lattice, model: FeatureModel, obs: ObservationSequence, labels=None):
    return model.expected_features(Oracle(topology, lattice, labels).clique_posteriors(), obs)


def oracle_map(topology, lattice, labels=None):
    return Oracle(topology, lattice, labels).max()


# ---------------------------------------------------------------- naive features


def naive_feature_counts(model: FeatureModel, obs: ObservationSequence, config: Configuration) -> dict:
    """Global feature counts ``F(zeta)`` accumulated clique by clique, keyed by feature key."""
    cfg = model.config
    idx = model.index
    x, e = config.x, config.e
    D, T = x.shape
    F: dict = {}

    def bump(key, v):
        F[key] = F.get(key, 0.0) + v

    def obs_at(t):
        return [(idx.column(k), v) for k, v in obs.features[t].items() if k in idx.ids]

    for d in range(D):
        for s, i, j in config.segments(d):
            bump(("persist", d, s, 0), 1.0)
            if cfg.duration:
                bump(("persist", d, s, 1), math.log(j - i + 1))
                bump(("persist", d, s, 2), float(j - i + 1))
            if cfg.persist_obs:
                for t in range(i, j + 1):
                    for k, v in obs_at(t):
                        bump(("persist", d, s, 3 + k), v)
            if d == D - 1:
                continue
            for fam, t, on in (("init", i, cfg.init_obs), ("end", j, cfg.end_obs)):
                u = int(x[d + 1, t])
                bump((fam, d, s, u, 0), 1.0)
                if on:
                    for k, v in obs_at(t):
                        bump((fam, d, s, u, 1 + k), v)
            for t in range(i, j):
                if e[d + 1, t]:
                    u, v_ = int(x[d + 1, t]), int(x[d + 1, t + 1])
                    bump(("transit", d + 1, s, u, v_, 0), 1.0)
                    if cfg.transit_obs:
                        for k, v in obs_at(t):
                            bump(("transit", d + 1, s, u, v_, 1 + k), v)
    return F


def naive_feature_vector(model: FeatureModel, obs: ObservationSequence, config: Configuration) -> np.ndarray:
    out = np.zeros(model.size)
    for key, v in naive_feature_counts(model, obs, config).items():
        out[model.position(key)] += v
    return out


# ---------------------------------------------------------------- linear chain


def chain_log_partition(log_unary: np.ndarray, log_trans: np.ndarray) -> float:
    """Textbook forward recursion for a linear chain.

    ``log_unary`` is ``(T, S)``; ``log_trans[a, b, t]`` scores ``a`` at ``t``
    followed by ``b`` at ``t + 1``.
    """
    a = log_unary[0].copy()
    for t in range(1, len(log_unary)):
        a = logsumexp(a[:, None] + log_trans[:, :, t - 1], axis=0) + log_unary[t]
    return float(logsumexp(a))


# ---------------------------------------------------------------- random instances


def random_topology(rng: np.random.Generator, depth: int, max_size: int = 3, root_size: int | None = None) -> Topology:
    """Random hierarchy with possibly shared children and no orphans."""
    sizes = [int(root_size) if root_size else int(rng.integers(1, max_size + 1))]
    sizes += [int(rng.integers(1, max_size + 1)) for _ in range(depth - 1)]
    children = []
    for d in range(depth - 1):
        m = rng.random((sizes[d], sizes[d + 1])) < 0.6
        for s in range(sizes[d]):
            if not m[s].any():
                m[s, rng.integers(sizes[d + 1])] = True
        for u in range(sizes[d + 1]):
            if not m[:, u].any():
                m[rng.integers(sizes[d]), u] = True
        children.append(tuple(tuple(int(u) for u in np.flatnonzero(m[s])) for s in range(sizes[d])))
    return Topology(tuple(sizes), tuple(children))


def random_lattice(topology: Topology, T: int, rng: np.random.Generator, low: float = 0.5, high: float = 2.0,
                   max_duration=None) -> PotentialLattice:
    """Potentials drawn uniformly from ``[low, high]``."""
    S = topology.sizes
    D = len(S)
    draw = lambda *shape: np.log(rng.uniform(low, high, size=shape))
    log_R = [draw(S[d], T, T) for d in range(D)]
    log_A = [None] + [draw(S[c - 1], S[c], S[c], T) for c in range(1, D)]
    log_pi = [draw(S[d], S[d + 1], T) for d in range(D - 1)]
    log_E = [draw(S[d], S[d + 1], T) for d in range(D - 1)]
    return PotentialLattice.from_arrays(topology, log_R, log_A, log_pi, log_E, max_duration=max_duration)


def random_observations(T: int, vocab, rng: np.random.Generator, per_step: int = 1) -> ObservationSequence:
    """Each position fires ``per_step`` random ids with value 1.

    ``vocab`` is either a count (ids ``0..vocab-1``) or a sequence of ids.
    """
    ids = np.arange(vocab) if np.isscalar(vocab) else np.asarray(vocab)
    return ObservationSequence(tuple({int(k): 1.0 for k in rng.choice(ids, size=per_step)} for _ in range(T)))


# ---------------------------------------------------------------- sampling


ENUMERATE_BELOW = 20_000


def sample_configurations(topology: Topology, lattice: PotentialLattice, n: int, rng: np.random.Generator,
                          budget: int = ENUMERATE_BELOW) -> list[Configuration]:
    """Exact draws from ``Pr(zeta | z)``.

    Instances with at most ``budget`` configurations sample from the
    enumerated distribution.  Larger ones use an exact top-down stochastic
    backtrack through the inside masses.
    """
    if n == 0:
        return []
    if count_configurations(topology, lattice.T) <= budget:
        return Oracle(topology, lattice, budget=budget).sample(n, rng)
    from .aio import sample_from_inside

    return [sample_from_inside(topology, lattice, rng) for _ in range(n)]


def sample_dataset(topology: Topology, model: FeatureModel, n: int, T: int, seed: int,
                   per_step: int = 1, budget: int = ENUMERATE_BELOW) -> list[tuple[ObservationSequence, Configuration]]:
    """``n`` sequences: random one-hot observations, then a gold draw from the planted model."""
    rng = np.random.default_rng(seed)
    vocab = model.index.ids or 1
    out = []
    for _ in range(n):
        obs = random_observations(T, vocab, rng, per_step)
        lattice = model.build_lattice(obs)
        (config,) = sample_configurations(topology, lattice, 1, rng, budget)
        out.append((obs, config))
    return out
