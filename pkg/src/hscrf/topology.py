"""State hierarchy and configurations.

Levels, states and time indices are 0-based throughout the Python API:
level 0 is the root, level ``depth - 1`` the bottom.  Text formats handled
by :mod:`hscrf.io` are 1-based and converted at the boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import BadBounds, DimensionMismatch, EmptyChildSet, OrphanState, TopologyError


@dataclass(frozen=True)
class Topology:
    """Depth, per-level alphabets and the parent -> children relation.

    ``children[d][s]`` lists the children (at level ``d + 1``) of state ``s``
    at level ``d``.  Children may be shared between parents.  The parent sets
    and boolean child masks are derived at construction.
    """

    sizes: tuple[int, ...]
    children: tuple[tuple[tuple[int, ...], ...], ...]
    parents: tuple[tuple[tuple[int, ...], ...], ...] = field(init=False, repr=False, compare=False)
    child_mask: tuple[np.ndarray, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        sizes = tuple(int(n) for n in self.sizes)
        children = tuple(tuple(tuple(int(u) for u in ch) for ch in level) for level in self.children)
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "children", children)
        validate(self)
        masks = []
        parents = []
        for d in range(self.depth - 1):
            m = np.zeros((sizes[d], sizes[d + 1]), dtype=bool)
            for s, ch in enumerate(children[d]):
                m[s, list(ch)] = True
            m.setflags(write=False)
            masks.append(m)
            parents.append(tuple(tuple(int(p) for p in np.flatnonzero(m[:, u])) for u in range(sizes[d + 1])))
        object.__setattr__(self, "child_mask", tuple(masks))
        object.__setattr__(self, "parents", tuple(parents))

    @property
    def depth(self) -> int:
        return len(self.sizes)

    @classmethod
    def full(cls, sizes: Sequence[int]) -> "Topology":
        """Every state is a child of every state one level up."""
        sizes = tuple(sizes)
        children = tuple(
            tuple(tuple(range(sizes[d + 1])) for _ in range(sizes[d])) for d in range(len(sizes) - 1)
        )
        return cls(sizes, children)

    @classmethod
    def from_mapping(cls, sizes: Sequence[int], children: Mapping[tuple[int, int], Iterable[int]]) -> "Topology":
        """Build from ``{(level, state): children}``; missing entries mean no children."""
        sizes = tuple(sizes)
        levels = tuple(
            tuple(tuple(children.get((d, s), ())) for s in range(sizes[d])) for d in range(len(sizes) - 1)
        )
        return cls(sizes, levels)

    def pa(self, d: int, s: int) -> tuple[int, ...]:
        """Parents (at level ``d - 1``) of state ``s`` at level ``d``."""
        if d == 0:
            return ()
        return self.parents[d - 1][s]

    def to_dict(self) -> dict:
        return {"sizes": list(self.sizes), "children": [[list(ch) for ch in level] for level in self.children]}

    @classmethod
    def from_dict(cls, data: Mapping) -> "Topology":
        return cls(tuple(data["sizes"]), tuple(tuple(tuple(ch) for ch in level) for level in data["children"]))


def validate(topology: Topology) -> None:
    """Raise a :class:`TopologyError` subclass unless the hierarchy is well formed."""
    sizes = topology.sizes
    if len(sizes) < 2:
        raise TopologyError(f"depth must be at least 2, got {len(sizes)}")
    for d, n in enumerate(sizes):
        if n < 1:
            raise BadBounds(f"level {d} has empty alphabet", level=d)
    if len(topology.children) != len(sizes) - 1:
        raise TopologyError(f"expected child sets for {len(sizes) - 1} levels, got {len(topology.children)}")
    for d in range(len(sizes) - 1):
        level = topology.children[d]
        if len(level) != sizes[d]:
            missing = len(level)
            raise EmptyChildSet(f"level {d} state {missing} has no child set", level=d, state=missing)
        covered = set()
        for s, ch in enumerate(level):
            if not ch:
                raise EmptyChildSet(f"level {d} state {s} has no children", level=d, state=s)
            for u in ch:
                if not 0 <= u < sizes[d + 1]:
                    raise BadBounds(f"level {d} state {s} lists child {u} outside [0, {sizes[d + 1]})", level=d, state=s)
            if len(set(ch)) != len(ch):
                raise BadBounds(f"level {d} state {s} lists a child twice", level=d, state=s)
            covered.update(ch)
        for u in range(sizes[d + 1]):
            if u not in covered:
                raise OrphanState(f"level {d + 1} state {u} has no parent", level=d + 1, state=u)


class Segment(NamedTuple):
    state: int
    start: int
    end: int  # inclusive


@dataclass(frozen=True)
class Configuration:
    """A full assignment of states ``x[d, t]`` and ending indicators ``e[d, t]``."""

    x: np.ndarray
    e: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.int64)
        e = np.asarray(self.e, dtype=np.int8)
        if x.ndim != 2 or x.shape != e.shape:
            raise DimensionMismatch(f"state array {x.shape} and ending array {e.shape} disagree")
        x.setflags(write=False)
        e.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "e", e)

    @property
    def depth(self) -> int:
        return self.x.shape[0]

    @property
    def length(self) -> int:
        return self.x.shape[1]

    def segments(self, d: int) -> list[Segment]:
        out = []
        start = 0
        for t in range(self.length):
            if self.e[d, t] or t == self.length - 1:
                out.append(Segment(int(self.x[d, start]), start, t))
                start = t + 1
        return out

    def to_tree(self) -> "SegmentTree":
        return SegmentTree(tuple(tuple(self.segments(d)) for d in range(self.depth)), self.length)

    def __eq__(self, other):
        if not isinstance(other, Configuration):
            return NotImplemented
        return np.array_equal(self.x, other.x) and np.array_equal(self.e, other.e)

    def __hash__(self):
        return hash((self.x.tobytes(), self.e.tobytes(), self.x.shape))


@dataclass(frozen=True)
class SegmentTree:
    """Per-level segments ``(state, start, end)`` partitioning ``[0, T)``."""

    levels: tuple[tuple[Segment, ...], ...]
    length: int

    def to_configuration(self) -> Configuration:
        depth = len(self.levels)
        x = np.full((depth, self.length), -1, dtype=np.int64)
        e = np.zeros((depth, self.length), dtype=np.int8)
        for d, segs in enumerate(self.levels):
            for seg in segs:
                x[d, seg.start : seg.end + 1] = seg.state
                e[d, seg.end] = 1
        if (x < 0).any():
            raise DimensionMismatch("segments do not cover every position")
        return Configuration(x, e)

    def __iter__(self):
        for d, segs in enumerate(self.levels):
            for seg in segs:
                yield d, seg


def is_legal_configuration(topology: Topology, config: Configuration) -> bool:
    """True iff ``config`` satisfies every hierarchical constraint of ``topology``."""
    x, e = config.x, config.e
    D = topology.depth
    if x.shape[0] != D or x.shape[1] < 1:
        raise DimensionMismatch(f"configuration has shape {x.shape}, topology depth is {D}")
    T = x.shape[1]
    for d in range(D):
        if x[d].min() < 0 or x[d].max() >= topology.sizes[d]:
            return False
    if not ((e == 0) | (e == 1)).all():
        return False
    # root persists until T; everything ends at T; bottom never persists
    if e[0, : T - 1].any() or not e[:, T - 1].all() or not e[D - 1].all():
        return False
    # an ending level forces every level below it to end
    if (e[:-1] > e[1:]).any():
        return False
    # states are constant inside a segment
    persist = e[:, : T - 1] == 0
    if (x[:, : T - 1][persist] != x[:, 1:][persist]).any():
        return False
    for d in range(D - 1):
        if not topology.child_mask[d][x[d], x[d + 1]].all():
            return False
    return True
