"""Command line interface: ``hscrf train|decode|eval|validate|inspect|sample``.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import io
from .aio import infer
from .constrained import PartialLabels, constrained_viterbi, label_indicators
from .errors import (BudgetExceeded, DimensionMismatch, EmptyDataset, HSCRFError, InconsistentLabels,
                     NoConsistentConfiguration, NonFiniteWeight, ParseError, TopologyError, UnknownFeatureId,
                     ZeroColumn)
from .learning import TrainConfig, train_sgd
from .oracle import DEFAULT_BUDGET, Oracle, count_configurations, random_lattice, sample_dataset
from .potentials import FeatureConfig, FeatureIndex, FeatureModel
from .semicrf import check_flat, flat_labels, hscrf_tree, reduce_from_hscrf, semi_viterbi
from .topology import Configuration
from .viterbi import backtrack, viterbi_forward

log = logging.getLogger("hscrf")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DATA_ERRORS = (ParseError, InconsistentLabels, TopologyError, DimensionMismatch, EmptyDataset, BudgetExceeded,
               UnknownFeatureId, OSError)
NUMERIC_ERRORS = (ZeroColumn, NoConsistentConfiguration, NonFiniteWeight, FloatingPointError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def parse_max_duration(text: str | None, depth: int | None = None):
    """``"5"`` caps every non-root level; ``"2:5,3:1"`` caps 1-based levels individually."""
    if text is None:
        return None
    try:
        if ":" not in text:
            return int(text)
        caps = {}
        for item in text.split(","):
            d, L = item.split(":")
            caps[int(d) - 1] = int(L)
    except ValueError:
        raise UsageError(f"bad --max-duration {text!r}") from None
    if depth is None:
        depth = max(caps) + 1
    return tuple(caps.get(d) for d in range(depth))


# ---------------------------------------------------------------- decode


def decode_one(model: FeatureModel, obs, labels, engine: str = "hscrf", constrain: bool = False):
    """MAP segment tree for one sequence, optionally respecting its labels."""
    lattice = model.build_lattice(obs)
    topo = model.topology
    if constrain and isinstance(labels, Configuration):
        labels = PartialLabels.from_configuration(labels)
    use = labels if constrain else None
    if engine == "semicrf":
        check_flat(topo)
        sm = reduce_from_hscrf(topo, lattice)
        if use is not None:
            sm = sm.masked(flat_labels(use))
        _, segs = semi_viterbi(sm)
        return hscrf_tree(segs, obs.length)
    if use is not None:
        return constrained_viterbi(lattice, topo, use)
    _, book = viterbi_forward(lattice, topo)
    return backtrack(book, topo)


def _decode_task(args):
    return io.format_segments(decode_one(*args))


def _pmap(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------- validate


def validate_lattice(topology, lattice, tol: float = 1e-8, numerics: str = "auto", budget: int = DEFAULT_BUDGET):
    """Compare engine outputs to enumeration; returns a list of mismatch strings (empty = pass)."""
    T = lattice.T
    oracle = Oracle(topology, lattice, budget=budget)
    res = infer(lattice, topology, numerics=numerics)
    problems = []
    ref = oracle.log_Z()
    routes = [("inside_top", {})] + [("outside_bottom", {"i": i}) for i in range(T)]
    routes += [("general", {"d": d, "t": t}) for d in range(topology.depth) for t in range(T)]
    for via, kw in routes:
        got = res.partition_function(via, **kw)
        if not abs(got - ref) <= tol:
            where = " ".join(f"{k}={v + 1}" for k, v in kw.items())
            problems.append(f"log Z via {via} {where}: engine {got:.12g} oracle {ref:.12g}".replace("  ", " "))
    for d in range(topology.depth):
        for t in range(T):
            got, want = res.state_marginal(d, t), oracle.marginal(d, t)
            bad = np.flatnonzero(~(np.abs(got - want) <= tol))
            if bad.size:
                s = int(bad[0])
                problems.append(f"marginal level {d + 1} time {t + 1} state {s + 1}: engine {got[s]:.12g} oracle {want[s]:.12g}")
    best, book = viterbi_forward(lattice, topology)
    want, _ = oracle.max()
    if not abs(best - want) <= tol:
        problems.append(f"max log potential: engine {best:.12g} oracle {want:.12g}")
    return problems


def _validate_task(args):
    topology, lattice, tol, numerics, budget = args
    return validate_lattice(topology, lattice, tol, numerics, budget)


# ---------------------------------------------------------------- commands


def cmd_train(a) -> int:
    topo = io.read_topology(a.topology) if a.topology else None
    base = None
    if a.init:
        base, meta = io.load_checkpoint(a.init)
        topo = topo or base.topology
    if topo is None:
        raise UsageError("train needs --topology or --init")
    records = io.read_dataset(a.data, topo)
    if not records:
        raise EmptyDataset(f"{a.data}: no sequences")
    heldout = io.read_dataset(a.heldout, topo) if a.heldout else None
    if base is None:
        cfg = FeatureConfig(persist_obs=not a.no_persist_obs, transit_obs=a.transit_obs, init_obs=a.init_obs,
                            end_obs=a.end_obs, duration=not a.no_duration)
        base = FeatureModel(topo, FeatureIndex.register(r.obs for r in records), cfg,
                            max_duration=parse_max_duration(a.max_duration, topo.depth))
    engine = a.engine or "hscrf"
    numerics = a.numerics or "auto"
    if engine == "semicrf":
        check_flat(topo)
    config = TrainConfig(epochs=a.epochs, lr=a.lr, l2=a.l2, seed=a.seed, numerics=numerics, engine=engine)
    state = train_sgd(base, [(r.obs, r.labels) for r in records], config,
                      heldout=[(r.obs, r.labels) for r in heldout] if heldout else None)
    if not all(math.isfinite(v) for v in state.nll):
        log.error("training produced a non-finite likelihood")
        return EXIT_NUMERIC
    io.save_checkpoint(a.out, state.model, numerics, engine)
    trace = {"nll": state.nll, "heldout_nll": state.heldout_nll, "epochs": state.epoch}
    Path(a.trace or f"{a.out}.trace.json").write_text(json.dumps(trace, sort_keys=True, indent=1) + "\n")
    for n, v in enumerate(state.nll):
        print(f"epoch {n} nll {v:.6f}")
    return EXIT_OK


def _model_for(a):
    model, meta = io.load_checkpoint(a.model)
    if a.max_duration:
        from dataclasses import replace

        model = replace(model, max_duration=parse_max_duration(a.max_duration, model.topology.depth))
    return model, a.engine or meta.get("engine", "hscrf")


def cmd_decode(a) -> int:
    model, engine = _model_for(a)
    records = io.read_dataset(a.data, model.topology)
    tasks = [(model, r.obs, r.labels, engine, a.constrain) for r in records]
    blocks = _pmap(_decode_task, tasks, a.jobs)
    text = "\n".join(blocks)
    if a.out:
        Path(a.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def accuracy_report(pred_grids, gold_grids):
    if len(pred_grids) != len(gold_grids):
        raise DimensionMismatch(f"{len(pred_grids)} predicted sequences vs {len(gold_grids)} gold sequences")
    depth = max([g.shape[0] for g in gold_grids] + [0])
    hits = np.zeros(depth)
    total = np.zeros(depth)
    for p, g in zip(pred_grids, gold_grids):
        if p.shape[1] != g.shape[1]:
            raise DimensionMismatch(f"sequence lengths differ: {p.shape[1]} vs {g.shape[1]}")
        for d in range(g.shape[0]):
            known = g[d] >= 0
            total[d] += known.sum()
            if d < p.shape[0]:
                hits[d] += (p[d][known] == g[d][known]).sum()
    return [(d, hits[d] / total[d] if total[d] else float("nan"), int(hits[d]), int(total[d])) for d in range(depth)]


def cmd_eval(a) -> int:
    report = accuracy_report(io.state_grids(a.pred), io.state_grids(a.gold))
    for d, acc, h, n in report:
        print(f"level {d + 1} accuracy {acc:.6f} ({h}/{n})")
    return EXIT_OK


def cmd_validate(a) -> int:
    budget = a.budget
    numerics = a.numerics or "auto"
    tasks = []
    if a.model:
        model, _ = _model_for(a)
        topo = model.topology
        records = io.read_dataset(a.data, topo) if a.data else []
        for r in records:
            n = count_configurations(topo, r.obs.length)
            if n > budget:
                raise BudgetExceeded(f"sequence of length {r.obs.length} has {n} configurations, budget is {budget}",
                                     count=n, budget=budget)
            tasks.append((topo, model.build_lattice(r.obs), a.tol, numerics, budget))
    else:
        if not a.topology:
            raise UsageError("validate needs --topology or --model")
        topo = io.read_topology(a.topology)
        n = count_configurations(topo, a.length)
        if n > budget:
            raise BudgetExceeded(f"length {a.length} has {n} configurations, budget is {budget}", count=n, budget=budget)
        rng = np.random.default_rng(a.seed)
        tasks = [(topo, random_lattice(topo, a.length, rng), a.tol, numerics, budget) for _ in range(a.models)]
    results = _pmap(_validate_task, tasks, a.jobs)
    failed = 0
    for k, problems in enumerate(results):
        if problems:
            failed += 1
            print(f"instance {k + 1}: FAIL ({len(problems)} mismatches); first: {problems[0]}")
        else:
            print(f"instance {k + 1}: ok")
    print(f"{len(results) - failed}/{len(results)} instances agree with enumeration")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_inspect(a) -> int:
    if a.model:
        model, meta = io.load_checkpoint(a.model)
        topo = model.topology
        print(f"engine {meta.get('engine')} numerics {meta.get('numerics')}")
        print(f"features {model.size} observation ids {len(model.index)}")
        sys.stdout.write(io.format_topology(topo))
        order = np.argsort(-np.abs(model.weights), kind="stable")[: a.top]
        for pos in order:
            print(f"weight {model.weights[pos]: .6f} {model.describe(int(pos))}")
        return EXIT_OK
    if a.topology:
        topo = io.read_topology(a.topology)
        sys.stdout.write(io.format_topology(topo))
        for d in range(1, topo.depth):
            for u in range(topo.sizes[d]):
                print(f"parents {d + 1} {u + 1}: " + " ".join(str(p + 1) for p in topo.pa(d, u)))
        if a.length:
            print(f"configurations at length {a.length}: {count_configurations(topo, a.length)}")
        return EXIT_OK
    raise UsageError("inspect needs --model or --topology")


def cmd_sample(a) -> int:
    model, _ = _model_for(a)
    data = sample_dataset(model.topology, model, a.n, a.length, a.seed)
    text = io.format_dataset(data)
    if a.out:
        Path(a.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--engine", choices=("hscrf", "semicrf"))
    common.add_argument("--numerics", choices=("exact", "scaled", "auto"))
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--jobs", type=int, default=1)
    common.add_argument("--max-duration", help="cap for all non-root levels, or 'level:cap,...' (1-based)")

    p = _Parser(prog="hscrf", description="Hierarchical semi-Markov CRFs")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", parents=[common], help="fit weights by stochastic gradient ascent")
    t.add_argument("--data", required=True)
    t.add_argument("--topology")
    t.add_argument("--init", help="start from this checkpoint")
    t.add_argument("--out", required=True)
    t.add_argument("--trace")
    t.add_argument("--heldout")
    t.add_argument("--epochs", type=int, default=5)
    t.add_argument("--lr", type=float, default=0.1)
    t.add_argument("--l2", type=float, default=0.0)
    t.add_argument("--transit-obs", action="store_true")
    t.add_argument("--init-obs", action="store_true")
    t.add_argument("--end-obs", action="store_true")
    t.add_argument("--no-duration", action="store_true")
    t.add_argument("--no-persist-obs", action="store_true")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("decode", parents=[common], help="MAP segment trees")
    d.add_argument("--model", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--constrain", action="store_true", help="respect labels present in the data")
    d.add_argument("--out")
    d.set_defaults(func=cmd_decode)

    e = sub.add_parser("eval", help="per-level accuracy")
    e.add_argument("--pred", required=True)
    e.add_argument("--gold", required=True)
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("validate", parents=[common], help="compare the engine against enumeration")
    v.add_argument("--topology")
    v.add_argument("--model")
    v.add_argument("--data")
    v.add_argument("--length", type=int, default=4)
    v.add_argument("--models", type=int, default=5)
    v.add_argument("--tol", type=float, default=1e-8)
    v.add_argument("--budget", type=int, default=DEFAULT_BUDGET)
    v.set_defaults(func=cmd_validate)

    i = sub.add_parser("inspect", help="describe a checkpoint or topology")
    i.add_argument("--model")
    i.add_argument("--topology")
    i.add_argument("--length", type=int)
    i.add_argument("--top", type=int, default=20)
    i.set_defaults(func=cmd_inspect)

    s = sub.add_parser("sample", parents=[common], help="draw a labeled dataset from a checkpoint")
    s.add_argument("--model", required=True)
    s.add_argument("--n", type=int, default=10)
    s.add_argument("--length", type=int, default=8)
    s.add_argument("--out")
    s.set_defaults(func=cmd_sample)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("HSCRF_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except NUMERIC_ERRORS as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except HSCRFError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
