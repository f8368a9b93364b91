"""Log-linear clique potentials and the per-sequence potential lattice.

All potentials are held in the log domain.  Topology-forbidden cliques and
segments longer than a level's duration cap are ``-inf``.

Array conventions (0-based levels, states and times; ``U`` is the child
alphabet of the level above):

* persistence ``R[d]``: ``(S_d, T, T)`` indexed ``[s, i, j]``, ``i <= j``
* transition ``A[c]`` for child level ``c >= 1``: ``(S_{c-1}, S_c, S_c, T)``
  indexed ``[parent, u, v, t]`` with ``u`` ending at ``t`` and ``v`` starting
  at ``t + 1``
* initialisation ``Pi[d]`` for ``d <= D-2``: ``(S_d, S_{d+1}, T)`` indexed
  ``[s, u, i]`` with ``i`` the parent's start
* ending ``E[d]``: same shape, indexed ``[s, u, j]`` with ``j`` the parent's end
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DimensionMismatch, NonFiniteWeight, UnknownFeatureId
from .topology import Configuration, Topology

NEG_INF = -np.inf
PRECOMPUTE_LIMIT = 512


# ---------------------------------------------------------------- observations


@dataclass(frozen=True)
class ObservationSequence:
    """Sparse per-position feature bundles ``g(z_t)``: ``{feature id: value}``."""

    features: tuple[Mapping[int, float], ...]

    def __post_init__(self):
        feats = tuple({int(k): float(v) for k, v in dict(f).items()} for f in self.features)
        if not feats:
            raise DimensionMismatch("observation sequence must have length >= 1")
        for t, f in enumerate(feats):
            if not all(math.isfinite(v) for v in f.values()):
                raise DimensionMismatch(f"non-finite feature value at position {t}")
        object.__setattr__(self, "features", feats)

    @classmethod
    def empty(cls, length: int) -> "ObservationSequence":
        return cls(tuple({} for _ in range(length)))

    @property
    def length(self) -> int:
        return len(self.features)

    def ids(self) -> set[int]:
        return {k for f in self.features for k in f}


@dataclass(frozen=True)
class FeatureIndex:
    """Sorted registry of observation feature ids; position = dense column."""

    ids: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(sorted({int(i) for i in self.ids})))
        object.__setattr__(self, "_pos", {k: n for n, k in enumerate(self.ids)})

    @classmethod
    def register(cls, sequences: Iterable[ObservationSequence]) -> "FeatureIndex":
        seen: set[int] = set()
        for seq in sequences:
            seen |= seq.ids()
        return cls(tuple(seen))

    def __len__(self):
        return len(self.ids)

    def column(self, fid: int) -> int:
        return self._pos[fid]

    def dense(self, obs: ObservationSequence, strict: bool = False) -> np.ndarray:
        """``(T, K)`` matrix of registered feature values; unseen ids dropped."""
        X = np.zeros((obs.length, len(self.ids)))
        for t, f in enumerate(obs.features):
            for k, v in f.items():
                n = self._pos.get(k)
                if n is None:
                    if strict:
                        raise UnknownFeatureId(k)
                    continue
                X[t, n] += v
        return X


def duration_features(s: int, delta_t: int) -> dict[tuple[str, int], float]:
    """Gamma-duration sufficient statistics for a segment of state ``s``."""
    if delta_t < 1:
        raise ValueError("duration must be >= 1")
    return {("log_duration", s): math.log(delta_t), ("duration", s): float(delta_t)}


# ---------------------------------------------------------------- lattice


class PotentialLattice:
    """Log clique potentials for one sequence.

    Persistence potentials are either materialised (``mode="precomputed"``)
    or evaluated per column from cumulative projections (``mode="on_the_fly"``).
    Both go through :meth:`log_persist_column`.
    """

    def __init__(self, topology, T, log_A, log_pi, log_E, *, log_R=None, persist_fn=None,
                 max_duration=None, mode="precomputed"):
        self.topology = topology
        self.T = int(T)
        self.max_duration = _caps(topology, self.T, max_duration)
        self.log_A = [None] + [np.asarray(a, dtype=float) for a in log_A[1:]] if log_A else [None]
        self.log_pi = [np.asarray(p, dtype=float) for p in log_pi]
        self.log_E = [np.asarray(e, dtype=float) for e in log_E]
        self.mode = mode
        self._persist_fn = persist_fn
        self._log_R = None
        self._check_shapes()
        self._apply_child_masks()
        if log_R is not None:
            self._log_R = [self._cap_persist(d, np.array(r, dtype=float)) for d, r in enumerate(log_R)]
            for d, r in enumerate(self._log_R):
                if r.shape != (topology.sizes[d], self.T, self.T):
                    raise DimensionMismatch(f"persistence level {d} has shape {r.shape}")
        elif persist_fn is None:
            raise ValueError("need log_R or persist_fn")

    @classmethod
    def from_arrays(cls, topology: Topology, log_R, log_A, log_pi, log_E, max_duration=None):
        """Wrap raw log-potential arrays (``log_A[0]`` is ignored)."""
        T = np.asarray(log_R[0]).shape[-1]
        return cls(topology, T, list(log_A), list(log_pi), list(log_E), log_R=list(log_R),
                   max_duration=max_duration)

    @property
    def depth(self) -> int:
        return self.topology.depth

    def _check_shapes(self):
        S, T = self.topology.sizes, self.T
        if len(self.log_A) != len(S):
            raise DimensionMismatch("need one transition table per non-root level")
        for c in range(1, len(S)):
            if self.log_A[c].shape != (S[c - 1], S[c], S[c], T):
                raise DimensionMismatch(f"transition level {c} has shape {self.log_A[c].shape}")
        for name, tabs in (("initialisation", self.log_pi), ("ending", self.log_E)):
            if len(tabs) != len(S) - 1:
                raise DimensionMismatch(f"need {len(S) - 1} {name} tables")
            for d, tab in enumerate(tabs):
                if tab.shape != (S[d], S[d + 1], T):
                    raise DimensionMismatch(f"{name} level {d} has shape {tab.shape}")

    def _apply_child_masks(self):
        for d, m in enumerate(self.topology.child_mask):
            off = ~m
            self.log_pi[d] = np.where(off[:, :, None], NEG_INF, self.log_pi[d])
            self.log_E[d] = np.where(off[:, :, None], NEG_INF, self.log_E[d])
            pair = m[:, :, None] & m[:, None, :]
            self.log_A[d + 1] = np.where(pair[..., None], self.log_A[d + 1], NEG_INF)

    def _cap_persist(self, d, r):
        T = self.T
        i, j = np.indices((T, T))
        bad = (i > j) | (j - i + 1 > self.max_duration[d])
        r[:, bad] = NEG_INF
        return r

    def log_persist_column(self, d: int, j: int) -> np.ndarray:
        """``log R[d][:, 0:j+1, j]`` as an ``(S_d, j+1)`` array."""
        if self._log_R is not None:
            return self._log_R[d][:, : j + 1, j]
        col = self._persist_fn(d, j)
        too_long = np.arange(j + 1) < j + 1 - self.max_duration[d]
        col[:, too_long] = NEG_INF
        return col

    def log_persist(self, d: int) -> np.ndarray:
        """Full ``(S_d, T, T)`` persistence table (materialised on demand)."""
        if self._log_R is not None:
            return self._log_R[d]
        out = np.full((self.topology.sizes[d], self.T, self.T), NEG_INF)
        for j in range(self.T):
            out[:, : j + 1, j] = self.log_persist_column(d, j)
        return out

    def precompute(self) -> "PotentialLattice":
        if self._log_R is None:
            self._log_R = [self.log_persist(d) for d in range(self.depth)]
            self.mode = "precomputed"
        return self

    def allocated_entries(self) -> int:
        """Number of stored potential entries."""
        n = sum(a.size for a in self.log_A[1:]) + sum(p.size for p in self.log_pi) + sum(e.size for e in self.log_E)
        if self._log_R is not None:
            n += sum(r.size for r in self._log_R)
        return n

    def log_potential(self, config: Configuration) -> float:
        """``log Phi`` of a full configuration by direct clique lookup."""
        x, e = config.x, config.e
        D, T = x.shape
        if (D, T) != (self.depth, self.T):
            raise DimensionMismatch(f"configuration {x.shape} vs lattice {(self.depth, self.T)}")
        total = 0.0
        for d in range(D):
            R = self.log_persist(d)
            for seg in config.segments(d):
                total += R[seg.state, seg.start, seg.end]
        for d in range(D - 1):
            for seg in config.segments(d):
                total += self.log_pi[d][seg.state, x[d + 1, seg.start], seg.start]
                total += self.log_E[d][seg.state, x[d + 1, seg.end], seg.end]
                for t in range(seg.start, seg.end):
                    if e[d + 1, t]:
                        total += self.log_A[d + 1][seg.state, x[d + 1, t], x[d + 1, t + 1], t]
        return float(total)


def _caps(topology, T, max_duration):
    if max_duration is None:
        return tuple(T for _ in topology.sizes)
    if isinstance(max_duration, (int, np.integer)):
        caps = [int(max_duration)] * topology.depth
        caps[0] = T
    else:
        caps = [T if c is None else int(c) for c in max_duration]
    if len(caps) != topology.depth or any(c < 1 for c in caps):
        raise DimensionMismatch(f"bad duration caps {max_duration}")
    return tuple(min(c, T) for c in caps)


# ---------------------------------------------------------------- posteriors


@dataclass
class CliquePosteriors:
    """Expected clique counts (posterior probabilities or one-hot indicators).

    ``seg[d]`` is ``(S_d, T, T)``; ``trans[c]`` (``c >= 1``, index 0 is None)
    is ``(S_{c-1}, S_c, S_c, T)``; ``init[d]`` and ``end[d]`` are
    ``(S_d, S_{d+1}, T)``.
    """

    seg: list
    trans: list
    init: list
    end: list

    @classmethod
    def zeros(cls, topology: Topology, T: int) -> "CliquePosteriors":
        S = topology.sizes
        D = len(S)
        return cls(
            [np.zeros((S[d], T, T)) for d in range(D)],
            [None] + [np.zeros((S[c - 1], S[c], S[c], T)) for c in range(1, D)],
            [np.zeros((S[d], S[d + 1], T)) for d in range(D - 1)],
            [np.zeros((S[d], S[d + 1], T)) for d in range(D - 1)],
        )

    @classmethod
    def from_configuration(cls, topology: Topology, config: Configuration) -> "CliquePosteriors":
        x, e = config.x, config.e
        D, T = x.shape
        out = cls.zeros(topology, T)
        for d in range(D):
            for seg in config.segments(d):
                out.seg[d][seg.state, seg.start, seg.end] += 1
                if d < D - 1:
                    out.init[d][seg.state, x[d + 1, seg.start], seg.start] += 1
                    out.end[d][seg.state, x[d + 1, seg.end], seg.end] += 1
        for c in range(1, D):
            t = np.flatnonzero((e[c, : T - 1] == 1) & (e[c - 1, : T - 1] == 0))
            np.add.at(out.trans[c], (x[c - 1, t], x[c, t], x[c, t + 1], t), 1)
        return out

    def scaled(self, factor: float) -> "CliquePosteriors":
        f = lambda xs: [None if a is None else a * factor for a in xs]
        return CliquePosteriors(f(self.seg), f(self.trans), f(self.init), f(self.end))

    def add(self, other: "CliquePosteriors") -> "CliquePosteriors":
        f = lambda xs, ys: [None if a is None else a + b for a, b in zip(xs, ys)]
        return CliquePosteriors(f(self.seg, other.seg), f(self.trans, other.trans),
                                f(self.init, other.init), f(self.end, other.end))

    def occupancy(self, d: int) -> np.ndarray:
        """``(S_d, T)``: expected indicator that level ``d`` is in state ``s`` at ``t``."""
        P = self.seg[d]
        Q = np.cumsum(P, axis=1)
        Q = np.cumsum(Q[:, :, ::-1], axis=2)[:, :, ::-1]
        return np.einsum("stt->st", Q)


# ---------------------------------------------------------------- feature model


@dataclass(frozen=True)
class FeatureConfig:
    """Which observation conjunctions each clique family carries."""

    persist_obs: bool = True
    transit_obs: bool = False
    init_obs: bool = False
    end_obs: bool = False
    duration: bool = True

    def to_dict(self):
        return {k: getattr(self, k) for k in ("persist_obs", "transit_obs", "init_obs", "end_obs", "duration")}


PERSIST_SLOTS = ("bias", "log_duration", "duration")


@dataclass(frozen=True)
class Block:
    family: str
    level: int
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def _layout(topology: Topology, K: int, cfg: FeatureConfig) -> tuple[Block, ...]:
    S = topology.sizes
    D = len(S)
    blocks = []
    off = 0

    def add(family, level, shape):
        nonlocal off
        blocks.append(Block(family, level, tuple(shape), off))
        off += int(np.prod(shape))

    for d in range(D):
        add("persist", d, (S[d], len(PERSIST_SLOTS) + (K if cfg.persist_obs else 0)))
    for c in range(1, D):
        add("transit", c, (S[c - 1], S[c], S[c], 1 + (K if cfg.transit_obs else 0)))
    for d in range(D - 1):
        add("init", d, (S[d], S[d + 1], 1 + (K if cfg.init_obs else 0)))
    for d in range(D - 1):
        add("end", d, (S[d], S[d + 1], 1 + (K if cfg.end_obs else 0)))
    return tuple(blocks)


@dataclass(frozen=True)
class FeatureModel:
    """Weights over a fixed block layout of indicator/duration/observation features.

    A feature key is ``(family, level, *states, slot)``.  Persistence slots
    0..2 are bias, log-duration and duration; slot ``3 + k`` (or ``1 + k`` for
    the other families) conjoins the clique with observation column ``k``.
    """

    topology: Topology
    index: FeatureIndex = field(default_factory=FeatureIndex)
    config: FeatureConfig = field(default_factory=FeatureConfig)
    weights: np.ndarray | None = None
    max_duration: tuple | int | None = None
    blocks: tuple[Block, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        blocks = _layout(self.topology, len(self.index), self.config)
        object.__setattr__(self, "blocks", blocks)
        n = blocks[-1].offset + blocks[-1].size
        w = np.zeros(n) if self.weights is None else np.array(self.weights, dtype=float)
        if w.shape != (n,):
            raise DimensionMismatch(f"weight vector has shape {w.shape}, layout needs ({n},)")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.weights.size

    def with_weights(self, w) -> "FeatureModel":
        return replace(self, weights=np.asarray(w, dtype=float))

    def block(self, family: str, level: int) -> Block:
        for b in self.blocks:
            if b.family == family and b.level == level:
                return b
        raise KeyError((family, level))

    def view(self, family: str, level: int, w=None) -> np.ndarray:
        b = self.block(family, level)
        w = self.weights if w is None else w
        return w[b.offset : b.offset + b.size].reshape(b.shape)

    def position(self, key: Sequence) -> int:
        family, level, *rest = key
        b = self.block(family, level)
        try:
            return b.offset + int(np.ravel_multi_index(tuple(rest), b.shape))
        except ValueError as exc:
            raise UnknownFeatureId(tuple(key)) from exc

    def key(self, position: int) -> tuple:
        for b in self.blocks:
            if b.offset <= position < b.offset + b.size:
                return (b.family, b.level, *map(int, np.unravel_index(position - b.offset, b.shape)))
        raise UnknownFeatureId(position)

    def describe(self, position: int) -> str:
        """Readable name with 1-based levels and states, e.g. ``persist 2 3 obs=17``."""
        family, level, *states, slot = self.key(position)
        fixed = ("bias", "log_duration", "duration") if family == "persist" else ("bias",)
        name = fixed[slot] if slot < len(fixed) else f"obs={self.index.ids[slot - len(fixed)]}"
        return " ".join([family, str(level + 1), *(str(s + 1) for s in states), name])

    # -- lattice

    def build_lattice(self, obs: ObservationSequence, mode: str | None = None, strict: bool = False) -> PotentialLattice:
        if not np.isfinite(self.weights).all():
            raise NonFiniteWeight("weight vector contains non-finite entries")
        T = obs.length
        X = self.index.dense(obs, strict=strict)
        topo = self.topology
        D = topo.depth
        mode = mode or ("precomputed" if T <= PRECOMPUTE_LIMIT else "on_the_fly")

        log_A = [None]
        for c in range(1, D):
            W = self.view("transit", c)
            log_A.append(W[..., 0, None] + W[..., 1:] @ X.T if self.config.transit_obs else np.repeat(W[..., :1], T, -1))
        log_pi, log_E = [], []
        for fam, obs_on, out in (("init", self.config.init_obs, log_pi), ("end", self.config.end_obs, log_E)):
            for d in range(D - 1):
                W = self.view(fam, d)
                out.append(W[..., 0, None] + W[..., 1:] @ X.T if obs_on else np.repeat(W[..., :1], T, -1))

        cum = []
        for d in range(D):
            W = self.view("persist", d)
            proj = X @ W[:, 3:].T if self.config.persist_obs else np.zeros((T, W.shape[0]))
            cum.append(np.vstack([np.zeros((1, W.shape[0])), np.cumsum(proj, axis=0)]).T)
        dur = self.config.duration

        def persist_fn(d, j):
            W = self.view("persist", d)
            L = j + 1 - np.arange(j + 1)
            col = W[:, 0, None] + cum[d][:, j + 1, None] - cum[d][:, : j + 1]
            if dur:
                col = col + W[:, 1, None] * np.log(L) + W[:, 2, None] * L
            return col

        lat = PotentialLattice(topo, T, log_A, log_pi, log_E, persist_fn=persist_fn,
                               max_duration=self.max_duration, mode=mode)
        return lat.precompute() if mode == "precomputed" else lat

    # -- sufficient statistics

    def expected_features(self, post: CliquePosteriors, obs: ObservationSequence) -> np.ndarray:
        """Contract clique counts with feature values into a weight-shaped vector."""
        X = self.index.dense(obs)
        T = obs.length
        out = np.zeros(self.size)
        i, j = np.indices((T, T))
        L = np.where(i <= j, j - i + 1, 1).astype(float)
        for d in range(self.topology.depth):
            P = post.seg[d]
            g = self.view("persist", d, out)
            g[:, 0] = P.sum(axis=(1, 2))
            if self.config.duration:
                g[:, 1] = np.einsum("sij,ij->s", P, np.log(L))
                g[:, 2] = np.einsum("sij,ij->s", P, L)
            if self.config.persist_obs:
                g[:, 3:] = post.occupancy(d) @ X
        for c in range(1, self.topology.depth):
            g = self.view("transit", c, out)
            g[..., 0] = post.trans[c].sum(-1)
            if self.config.transit_obs:
                g[..., 1:] = post.trans[c] @ X
        for fam, obs_on, tabs in (("init", self.config.init_obs, post.init), ("end", self.config.end_obs, post.end)):
            for d in range(self.topology.depth - 1):
                g = self.view(fam, d, out)
                g[..., 0] = tabs[d].sum(-1)
                if obs_on:
                    g[..., 1:] = tabs[d] @ X
        return out

    def observed_features(self, config: Configuration, obs: ObservationSequence) -> np.ndarray:
        return self.expected_features(CliquePosteriors.from_configuration(self.topology, config), obs)

    # -- persistence

    def to_dict(self) -> dict:
        return {
            "topology": self.topology.to_dict(),
            "feature_ids": list(self.index.ids),
            "config": self.config.to_dict(),
            "max_duration": self.max_duration if not isinstance(self.max_duration, tuple) else list(self.max_duration),
            "weights": [float(v) for v in self.weights],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "FeatureModel":
        md = data.get("max_duration")
        return cls(
            Topology.from_dict(data["topology"]),
            FeatureIndex(tuple(data["feature_ids"])),
            FeatureConfig(**data["config"]),
            np.asarray(data["weights"], dtype=float),
            tuple(md) if isinstance(md, list) else md,
        )
