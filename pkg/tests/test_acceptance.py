"""Acceptance gate: one PASS/FAIL line per criterion.

Run under pytest (``pytest tests/test_acceptance.py -v``) or directly with
``python tests/test_acceptance.py``.
"""

import functools
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from conftest import nested_labels, random_instances, shared_topology  # noqa: E402
from hscrf import (FeatureConfig, FeatureIndex, FeatureModel, PartialLabels, Topology, TrainConfig,  # noqa: E402
                   constrained_ess, constrained_infer, constrained_viterbi, infer, is_legal_configuration,
                   train_sgd, viterbi)
from hscrf.learning import ess  # noqa: E402
from hscrf.oracle import (Oracle, chain_log_partition, oracle_ess, random_lattice, random_observations,  # noqa: E402
                          random_topology, sample_configurations, sample_dataset)
from hscrf.potentials import PotentialLattice  # noqa: E402
from hscrf.semicrf import reduce_from_hscrf, semi_backward, semi_forward  # noqa: E402

RESULTS = {}


def report(n: int, title: str, ok: bool, detail: str, capsys=None):
    line = f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    RESULTS[n] = ok
    if capsys is not None:
        with capsys.disabled():
            print("\n" + line)
    else:
        print(line)
    return ok


@functools.lru_cache(maxsize=None)
def models():
    return random_instances(seed=20240601, n=100, depths=(2, 3, 4), max_T=6, max_size=3, budget=20_000)


@functools.lru_cache(maxsize=None)
def oracles():
    return [Oracle(topo, lat) for topo, lat in models()]


@functools.lru_cache(maxsize=None)
def exact_results():
    return [infer(lat, topo, numerics="exact") for topo, lat in models()]


def _feature_instances(seed, n, budget=3000):
    rng = np.random.default_rng(seed)
    cfg = FeatureConfig(persist_obs=True, transit_obs=True, init_obs=True, end_obs=True, duration=True)
    out = []
    while len(out) < n:
        topo = random_topology(rng, int(rng.integers(2, 5)), 3)
        T = int(rng.integers(1, 6))
        from hscrf.oracle import count_configurations

        if count_configurations(topo, T) > budget:
            continue
        index = FeatureIndex((2, 5, 9))
        model = FeatureModel(topo, index, cfg)
        model = model.with_weights(rng.normal(0, 0.4, model.size))
        obs = random_observations(T, index.ids, rng, per_step=2)
        out.append((topo, model, obs))
    return out


# ---------------------------------------------------------------- 1-3


def check_partition(capsys=None):
    start = time.perf_counter()
    worst = max(abs(infer(lat, topo, numerics="exact", outside=False).log_Z - Oracle(topo, lat).log_Z())
                for topo, lat in models())
    elapsed = time.perf_counter() - start
    return report(1, "oracle partition equivalence", worst <= 1e-8 and elapsed < 60,
                  f"{len(models())} models, max |dlogZ| = {worst:.2e}, {elapsed:.1f} s", capsys)


def check_identities(capsys=None):
    worst = 0.0
    for (topo, lat), r in zip(models(), exact_results()):
        ref = r.partition_function("inside_top")
        routes = [r.partition_function("outside_bottom", i=i) for i in range(lat.T)]
        routes += [r.partition_function("general", d=d, t=t) for d in range(topo.depth) for t in range(lat.T)]
        # log-domain difference equals the relative error of Z to first order
        worst = max([worst] + [abs(z - ref) for z in routes])
    return report(2, "Z-identity triple", worst <= 1e-10, f"max relative spread = {worst:.2e}", capsys)


def check_marginals(capsys=None):
    sum_err = match_err = 0.0
    for (topo, lat), r, o in zip(models(), exact_results(), oracles()):
        for d in range(topo.depth):
            for t in range(lat.T):
                m = r.state_marginal(d, t)
                sum_err = max(sum_err, abs(m.sum() - 1))
                match_err = max(match_err, float(np.abs(m - o.marginal(d, t)).max()))
    ok = sum_err <= 1e-9 and match_err <= 1e-8
    return report(3, "marginals", ok, f"max |sum-1| = {sum_err:.2e}, max |p-oracle| = {match_err:.2e}", capsys)


# ---------------------------------------------------------------- 4


def check_ess(capsys=None):
    worst = 0.0
    fd_worst = 0.0
    h = 1e-5
    instances = _feature_instances(seed=404, n=24)
    rng = np.random.default_rng(405)
    for topo, model, obs in instances:
        lat = model.build_lattice(obs)
        got = ess(infer(lat, topo, numerics="exact"), model, obs)
        worst = max(worst, float(np.abs(got - oracle_ess(topo, lat, model, obs)).max()))
        for k in rng.choice(model.size, size=6, replace=False):
            wp, wm = model.weights.copy(), model.weights.copy()
            wp[k] += h
            wm[k] -= h
            zp = infer(model.with_weights(wp).build_lattice(obs), topo, numerics="exact", outside=False).log_Z
            zm = infer(model.with_weights(wm).build_lattice(obs), topo, numerics="exact", outside=False).log_Z
            fd = (zp - zm) / (2 * h)
            fd_worst = max(fd_worst, abs(fd - got[k]) / max(abs(got[k]), 1e-3))
    ok = worst <= 1e-8 and fd_worst <= 1e-4
    return report(4, "ESS", ok, f"{len(instances)} models, max |ESS-oracle| = {worst:.2e}, "
                  f"max finite-difference rel. error = {fd_worst:.2e}", capsys)


# ---------------------------------------------------------------- 5


def check_viterbi(capsys=None):
    worst = 0.0
    legal = True
    for (topo, lat), o in zip(models(), oracles()):
        best, config = viterbi(lat, topo)
        legal &= is_legal_configuration(topo, config)
        worst = max(worst, abs(lat.log_potential(config) - best), abs(best - o.max()[0]))
    ok = legal and worst <= 1e-9
    return report(5, "Viterbi", ok, f"all legal = {legal}, max |dlogPhi| = {worst:.2e}", capsys)


# ---------------------------------------------------------------- 6


def check_constrained(capsys=None):
    rng = np.random.default_rng(606)
    fracs = (0.0, 0.25, 0.5, 1.0)
    worst = 0.0
    monotone = True
    for topo, lat in models()[:60]:
        gold = sample_configurations(topo, lat, 1, rng)[0]
        prev = math.inf
        for labels in nested_labels(gold, fracs, rng):
            o = Oracle(topo, lat, labels)
            r = constrained_infer(lat, topo, labels, "exact")
            worst = max(worst, abs(r.log_Z - o.log_Z()))
            for d in range(topo.depth):
                for t in range(lat.T):
                    worst = max(worst, float(np.abs(r.state_marginal(d, t) - o.marginal(d, t)).max()))
            tree = constrained_viterbi(lat, topo, labels)
            worst = max(worst, abs(lat.log_potential(tree.to_configuration()) - o.max()[0]))
            monotone &= r.log_Z <= prev + 1e-12
            prev = r.log_Z
    for topo, model, obs in _feature_instances(seed=607, n=15):
        lat = model.build_lattice(obs)
        gold = sample_configurations(topo, lat, 1, rng)[0]
        for labels in nested_labels(gold, fracs, rng):
            got = constrained_ess(lat, topo, labels, model, obs, "exact")
            worst = max(worst, float(np.abs(got - oracle_ess(topo, lat, model, obs, labels)).max()))
    ok = worst <= 1e-8 and monotone
    return report(6, "constrained inference", ok, f"max error = {worst:.2e}, Z monotone = {monotone}", capsys)


# ---------------------------------------------------------------- 7


def overflow_instance(T=200, log_phi=5.0):
    topo = Topology.full((1, 2, 2))
    S = topo.sizes
    D = len(S)
    full = lambda *shape: np.full(shape, log_phi)
    return topo, PotentialLattice.from_arrays(
        topo,
        [full(S[d], T, T) for d in range(D)],
        [None] + [full(S[c - 1], S[c], S[c], T) for c in range(1, D)],
        [full(S[d], S[d + 1], T) for d in range(D - 1)],
        [full(S[d], S[d + 1], T) for d in range(D - 1)],
    )


def check_scaling(capsys=None):
    worst = 0.0
    for (topo, lat), r in zip(models(), exact_results()):
        worst = max(worst, abs(infer(lat, topo, numerics="scaled", outside=False).log_Z - r.log_Z))
    topo, lat = overflow_instance()
    scaled = infer(lat, topo, numerics="scaled", outside=False).log_Z
    exact = infer(lat, topo, numerics="exact", outside=False).log_Z
    ok = worst <= 1e-9 and math.isfinite(scaled) and not math.isfinite(exact)
    return report(7, "scaling", ok, f"max |scaled-exact| = {worst:.2e}; e^5 potentials at T=200: "
                  f"scaled log Z = {scaled:.6g}, exact log Z = {exact}", capsys)


# ---------------------------------------------------------------- 8


def check_semicrf(capsys=None):
    rng = np.random.default_rng(808)
    fb = red = chain = 0.0
    n_chain = 0
    for _ in range(50):
        S = int(rng.integers(1, 4))
        T = int(rng.integers(1, 9))
        L = int(rng.integers(1, T + 1))
        topo = Topology((1, S, 1), ((tuple(range(S)),), tuple((0,) for _ in range(S))))
        lat = random_lattice(topo, T, rng, max_duration=(None, L, None))
        sm = reduce_from_hscrf(topo, lat)
        _, z_fwd, _ = semi_forward(sm)
        _, z_bwd = semi_backward(sm)
        fb = max(fb, abs(z_fwd - z_bwd))
        red = max(red, abs(z_fwd - infer(lat, topo, numerics="exact", outside=False).log_Z))
    for _ in range(20):
        S = int(rng.integers(1, 4))
        T = int(rng.integers(1, 9))
        topo = Topology((1, S, 1), ((tuple(range(S)),), tuple((0,) for _ in range(S))))
        sm = reduce_from_hscrf(topo, random_lattice(topo, T, rng, max_duration=(None, 1, None)))
        _, z, _ = semi_forward(sm)
        unary = np.einsum("stt->ts", sm.log_R)
        chain = max(chain, abs(z - chain_log_partition(unary, sm.log_A)))
        n_chain += 1
    ok = fb <= 1e-10 and red <= 1e-8 and chain <= 1e-10
    return report(8, "SemiCRF", ok, f"|fwd-bwd| = {fb:.2e}, |semi-HSCRF| = {red:.2e} on 50 instances, "
                  f"|L=1 - chain| = {chain:.2e} on {n_chain}", capsys)


# ---------------------------------------------------------------- 9


def _accuracy(model, topo, data, level):
    hits = total = 0
    for obs, gold in data:
        pred = viterbi(model.build_lattice(obs), topo)[1]
        hits += int((pred.x[level] == gold.x[level]).sum())
        total += gold.x.shape[1]
    return hits / total


def check_planted(capsys=None):
    topo = shared_topology()
    base = FeatureModel(topo, FeatureIndex(tuple(range(6))), FeatureConfig())
    rng = np.random.default_rng(0)
    planted = base.with_weights(rng.normal(0, 1.0, base.size))
    train = sample_dataset(topo, planted, 200, 8, seed=100)
    held = sample_dataset(topo, planted, 100, 8, seed=200)
    state = train_sgd(base, train, TrainConfig(epochs=5, lr=0.006, seed=0), heldout=held)
    trace = np.array(state.heldout_nll)
    decreasing = bool((np.diff(trace) < 0).all())
    parts = [f"held-out NLL {' > '.join(f'{v:.1f}' for v in trace)}"]
    beats = True
    for d in (1, 2):
        counts = np.bincount(np.concatenate([c.x[d] for _, c in train]), minlength=topo.sizes[d])
        majority = int(counts.argmax())
        base_acc = float(np.mean(np.concatenate([c.x[d] for _, c in held]) == majority))
        acc = _accuracy(state.model, topo, held, d)
        beats &= acc > base_acc
        parts.append(f"level {d + 1} accuracy {acc:.3f} vs majority {base_acc:.3f}")
    ok_a = decreasing and beats

    noisy = base.with_weights(np.random.default_rng(1).normal(0, 0.5, base.size))
    data = sample_dataset(topo, noisy, 100, 8, seed=301)
    lrng = np.random.default_rng(401)
    h0 = h40 = n = 0
    for obs, gold in data:
        labels = PartialLabels.reveal(gold, 0.4, lrng)
        lat = noisy.build_lattice(obs)
        p0 = viterbi(lat, topo)[1]
        p40 = constrained_viterbi(lat, topo, labels).to_configuration()
        hidden = np.ones(gold.x.shape, dtype=bool)
        hidden[0] = False
        for cell in labels.states:
            hidden[cell] = False
        h0 += int((p0.x == gold.x)[hidden].sum())
        h40 += int((p40.x == gold.x)[hidden].sum())
        n += int(hidden.sum())
    ok_b = h40 / n > h0 / n
    parts.append(f"uplift on unrevealed cells {h0 / n:.3f} -> {h40 / n:.3f}")
    return report(9, "planted-model experiment", ok_a and ok_b, "; ".join(parts), capsys)


# ---------------------------------------------------------------- 10


def _mean_time(fn, runs=5):
    fn()
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.mean(times))


def check_complexity(capsys=None):
    topo = Topology.full((1, 16, 16))
    rng = np.random.default_rng(1010)
    times = {}
    for T in (16, 32):
        lat = random_lattice(topo, T, rng)
        times[T] = _mean_time(lambda: infer(lat, topo, numerics="exact"))
    growth = times[32] / times[16]
    T = 64
    lat = random_lattice(topo, T, rng)
    gold = sample_configurations(topo, lat, 1, rng)[0]
    ends = PartialLabels({}, {(d, t): int(gold.e[d, t]) for d in range(topo.depth) for t in range(T)})
    free = _mean_time(lambda: infer(lat, topo, numerics="exact"))
    pinned = _mean_time(lambda: constrained_infer(lat, topo, ends, "exact"))
    ratio = pinned / free
    ok = growth <= 10 and ratio <= 0.2
    return report(10, "complexity smoke", ok, f"T 16->32 time ratio {growth:.2f}; all endings labeled at T=64: "
                  f"{pinned * 1e3:.1f} ms vs {free * 1e3:.1f} ms unlabeled (ratio {ratio:.3f})", capsys)


CHECKS = [check_partition, check_identities, check_marginals, check_ess, check_viterbi, check_constrained,
          check_scaling, check_semicrf, check_planted, check_complexity]


@pytest.mark.parametrize("check", CHECKS, ids=[f"criterion_{n}" for n in range(1, 11)])
def test_criterion(check, capsys):
    assert check(capsys)


if __name__ == "__main__":
    outcomes = [check() for check in CHECKS]
    print(f"{sum(outcomes)}/{len(outcomes)} criteria pass")
    sys.exit(0 if all(outcomes) else 1)
