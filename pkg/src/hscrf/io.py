"""Text formats: topology, datasets, segment files and checkpoints.

Every index in a file (level, state, time) is 1-based; the Python objects
returned are 0-based.

Topology::

    depth 3
    sizes 1 3 4
    child 1 1: 1 2 3
    child 2 1: 1 2

Dataset blocks are separated by blank lines.  Each block holds observation
rows ``pos id:val id:val ...`` with positions ``1..T`` in order, plus
optional ``label d t state`` and ``end d t 0|1`` rows.

Segment files hold one ``d s i j`` line per segment, blocks separated by
blank lines.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .constrained import PartialLabels, validate_labels
from .errors import InconsistentLabels, ParseError
from .potentials import FeatureModel, ObservationSequence
from .topology import Configuration, Segment, SegmentTree, Topology, is_legal_configuration

CHECKPOINT_FORMAT = "hscrf-checkpoint"
CHECKPOINT_VERSION = 1


def _lines(text: str):
    for n, raw in enumerate(text.splitlines(), 1):
        yield n, raw.split("#", 1)[0].strip()


def _ints(fields, path, n):
    try:
        return [int(f) for f in fields]
    except ValueError:
        raise ParseError(f"expected integers, got {' '.join(fields)!r}", path, n) from None


# ---------------------------------------------------------------- topology


def parse_topology(text: str, path=None) -> Topology:
    depth = sizes = None
    children: dict[tuple[int, int], list[int]] = {}
    for n, line in _lines(text):
        if not line:
            continue
        key, _, rest = line.partition(" ")
        if key == "depth":
            vals = _ints(rest.split(), path, n)
            if len(vals) != 1:
                raise ParseError("depth line needs one integer", path, n)
            depth = vals[0]
        elif key == "sizes":
            sizes = _ints(rest.split(), path, n)
        elif key == "child":
            head, colon, tail = rest.partition(":")
            if not colon:
                raise ParseError("child line needs 'child d s: u1 u2 ...'", path, n)
            ds = _ints(head.split(), path, n)
            if len(ds) != 2:
                raise ParseError("child line needs a level and a state", path, n)
            d, s = ds
            children.setdefault((d - 1, s - 1), []).extend(u - 1 for u in _ints(tail.split(), path, n))
        else:
            raise ParseError(f"unknown directive {key!r}", path, n)
    if sizes is None:
        raise ParseError("missing 'sizes' line", path)
    if depth is not None and depth != len(sizes):
        raise ParseError(f"depth {depth} does not match {len(sizes)} sizes", path)
    for (d, s) in children:
        if not (0 <= d < len(sizes) - 1 and 0 <= s < sizes[d]):
            raise ParseError(f"child line for level {d + 1} state {s + 1} is out of range", path)
    return Topology.from_mapping(sizes, children)


def format_topology(topology: Topology) -> str:
    out = [f"depth {topology.depth}", "sizes " + " ".join(map(str, topology.sizes))]
    for d, level in enumerate(topology.children):
        for s, ch in enumerate(level):
            out.append(f"child {d + 1} {s + 1}: " + " ".join(str(u + 1) for u in ch))
    return "\n".join(out) + "\n"


def read_topology(path) -> Topology:
    return parse_topology(Path(path).read_text(), str(path))


# ---------------------------------------------------------------- datasets


@dataclass
class Record:
    obs: ObservationSequence
    labels: Configuration | PartialLabels | None
    line: int = 0


def _finish(rows, states, ends, start, path, topology):
    T = len(rows)
    if T == 0:
        raise ParseError("label rows without observation rows", path, start)
    obs = ObservationSequence(tuple(rows))
    labels = PartialLabels(states, ends) if states or ends else None
    if labels is not None and topology is not None:
        try:
            validate_labels(labels, topology, T)
        except InconsistentLabels as exc:
            coords = [(d + 1, t + 1) for d, t in exc.coords]
            raise InconsistentLabels(f"{path or '<input>'}:{start}: labels violate the hierarchy at (level, time) {coords}",
                                     exc.coords) from None
        if labels.is_complete(topology.depth, T):
            config = labels.to_configuration(topology.depth, T)
            if not is_legal_configuration(topology, config):
                raise InconsistentLabels(f"{path or '<input>'}:{start}: labeled configuration is not legal")
            labels = config
    return Record(obs, labels, start)


def parse_dataset(text: str, path=None, topology: Topology | None = None) -> list[Record]:
    records = []
    rows, states, ends = [], {}, {}
    start = None

    def flush():
        nonlocal rows, states, ends, start
        if start is not None:
            records.append(_finish(rows, states, ends, start, path, topology))
        rows, states, ends, start = [], {}, {}, None

    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            if not raw.strip():
                flush()
            continue
        start = start or n
        fields = line.split()
        if fields[0] in ("label", "end"):
            vals = _ints(fields[1:], path, n)
            if len(vals) != 3:
                raise ParseError(f"{fields[0]} row needs 'd t value'", path, n)
            d, t, v = vals
            if d < 1 or t < 1:
                raise ParseError("levels and times are 1-based", path, n)
            if fields[0] == "label":
                if v < 1:
                    raise ParseError("states are 1-based", path, n)
                states[(d - 1, t - 1)] = v - 1
            else:
                if v not in (0, 1):
                    raise ParseError("ending indicator must be 0 or 1", path, n)
                ends[(d - 1, t - 1)] = v
            continue
        (pos,) = _ints(fields[:1], path, n)
        if pos != len(rows) + 1:
            raise ParseError(f"expected position {len(rows) + 1}, got {pos}", path, n)
        feats = {}
        for item in fields[1:]:
            k, colon, v = item.partition(":")
            try:
                feats[int(k)] = feats.get(int(k), 0.0) + (float(v) if colon else 1.0)
            except ValueError:
                raise ParseError(f"bad feature {item!r}", path, n) from None
        rows.append(feats)
    flush()
    return records


def read_dataset(path, topology: Topology | None = None) -> list[Record]:
    return parse_dataset(Path(path).read_text(), str(path), topology)


def format_record(obs: ObservationSequence, labels=None) -> str:
    out = []
    for t, f in enumerate(obs.features):
        out.append(" ".join([str(t + 1)] + [f"{k}:{v!r}" for k, v in sorted(f.items())]))
    if isinstance(labels, Configuration):
        labels = PartialLabels.from_configuration(labels)
    if labels is not None:
        for (d, t), s in sorted(labels.states.items()):
            out.append(f"label {d + 1} {t + 1} {s + 1}")
        for (d, t), v in sorted(labels.ends.items()):
            out.append(f"end {d + 1} {t + 1} {v}")
    return "\n".join(out) + "\n"


def format_dataset(records: Iterable) -> str:
    return "\n".join(format_record(obs, labels) for obs, labels in records)


# ---------------------------------------------------------------- segments


def format_segments(tree: SegmentTree) -> str:
    return "".join(f"{d + 1} {seg.state + 1} {seg.start + 1} {seg.end + 1}\n" for d, seg in tree)


def parse_segments(text: str, path=None) -> list[SegmentTree]:
    trees = []
    block: list[tuple[int, Segment]] = []

    def flush():
        nonlocal block
        if block:
            depth = max(d for d, _ in block) + 1
            T = max(seg.end for _, seg in block) + 1
            levels = [[] for _ in range(depth)]
            for d, seg in block:
                levels[d].append(seg)
            trees.append(SegmentTree(tuple(tuple(sorted(l, key=lambda g: g.start)) for l in levels), T))
        block = []

    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            if not raw.strip():
                flush()
            continue
        vals = _ints(line.split(), path, n)
        if len(vals) != 4 or min(vals) < 1 or vals[2] > vals[3]:
            raise ParseError("segment line needs 'd s i j' with 1 <= i <= j", path, n)
        d, s, i, j = vals
        block.append((d - 1, Segment(s - 1, i - 1, j - 1)))
    flush()
    return trees


def looks_like_dataset(text: str) -> bool:
    for _, line in _lines(text):
        if not line:
            continue
        if ":" in line or line.split()[0] in ("label", "end"):
            return True
        if len(line.split()) != 4:
            return True
    return False


def state_grids(path) -> list[np.ndarray]:
    """Per-sequence ``(D, T)`` state grids (-1 = unknown) from a segment or dataset file."""
    text = Path(path).read_text()
    grids = []
    if looks_like_dataset(text):
        for rec in parse_dataset(text, str(path)):
            T = rec.obs.length
            lab = rec.labels
            if isinstance(lab, Configuration):
                grids.append(np.asarray(lab.x, dtype=np.int64))
                continue
            states = lab.states if lab is not None else {}
            D = max((d for d, _ in states), default=-1) + 1
            g = np.full((D, T), -1, dtype=np.int64)
            for (d, t), s in states.items():
                g[d, t] = s
            grids.append(g)
    else:
        for tree in parse_segments(text, str(path)):
            g = np.full((len(tree.levels), tree.length), -1, dtype=np.int64)
            for d, seg in tree:
                g[d, seg.start : seg.end + 1] = seg.state
            grids.append(g)
    return grids


# ---------------------------------------------------------------- checkpoints


def checkpoint_dict(model: FeatureModel, numerics: str = "auto", engine: str = "hscrf") -> dict:
    return {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "model": model.to_dict(),
            "numerics": numerics, "engine": engine}


def dumps_checkpoint(data: dict) -> str:
    return json.dumps(data, sort_keys=True, indent=1) + "\n"


def save_checkpoint(path, model: FeatureModel, numerics: str = "auto", engine: str = "hscrf") -> None:
    Path(path).write_text(dumps_checkpoint(checkpoint_dict(model, numerics, engine)))


def load_checkpoint(path) -> tuple[FeatureModel, dict]:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"checkpoint is not valid JSON: {exc.msg}", str(path), exc.lineno) from None
    if data.get("format") != CHECKPOINT_FORMAT:
        raise ParseError("not a checkpoint file", str(path))
    if data.get("version") != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {data.get('version')}", str(path))
    return FeatureModel.from_dict(data["model"]), data
