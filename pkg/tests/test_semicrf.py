import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import logsumexp

from hscrf import PartialLabels, Segment, Topology, infer, viterbi
from hscrf.errors import DimensionMismatch, TopologyError, ZeroColumn
from hscrf.oracle import random_lattice
from hscrf.semicrf import (SemiModel, check_flat, flat_labels, forward_backward, hscrf_tree, reduce_from_hscrf,
                           semi_backward, semi_constrained, semi_forward, semi_infer, semi_marginals,
                           semi_posteriors, semi_scaled, semi_viterbi)


def _segmentations(S, T, L):
    """Every labelled segmentation of [0, T) with segment lengths <= L."""
    for cuts in itertools.product((0, 1), repeat=T - 1):
        bounds = [0] + [t + 1 for t, c in enumerate(cuts) if c] + [T]
        spans = [(a, b - 1) for a, b in zip(bounds, bounds[1:])]
        if any(j - i + 1 > L for i, j in spans):
            continue
        for states in itertools.product(range(S), repeat=len(spans)):
            yield [(s, i, j) for s, (i, j) in zip(states, spans)]


def _brute(model, keep=lambda seg: True):
    scores = [model.log_potential(seg) for seg in _segmentations(model.S, model.T, model.L) if keep(seg)]
    return logsumexp(scores), scores


def _random_model(rng, S, T, L=None):
    return SemiModel(rng.normal(0, 1, (S, T, T)), rng.normal(0, 1, (S, S, T)), L)


def _unit(S, T, L=None):
    return SemiModel(np.zeros((S, T, T)), np.zeros((S, S, T)), L)


def test_unit_chain_counts_label_sequences():
    assert math.exp(semi_forward(_unit(2, 3, L=1))[1]) == pytest.approx(8)


def test_single_state_counts_compositions():
    assert math.exp(semi_forward(_unit(1, 3))[1]) == pytest.approx(4)


def test_forward_and_backward_agree():
    m = _random_model(np.random.default_rng(0), 3, 7, L=3)
    assert semi_backward(m)[1] == pytest.approx(semi_forward(m)[1], abs=1e-12)


def test_single_step_backward():
    m = _random_model(np.random.default_rng(1), 3, 1)
    beta, log_Z = semi_backward(m)
    np.testing.assert_allclose(beta[0], np.exp(m.log_R[:, 0, 0]))
    assert log_Z == pytest.approx(logsumexp(m.log_R[:, 0, 0]))


def test_time_reversal_symmetric_marginals():
    rng = np.random.default_rng(2)
    S, T = 2, 6
    R = rng.normal(0, 1, (S, T, T))
    # a segment [i, j] scores the same as its mirror [T-1-j, T-1-i]; transitions are symmetric and constant
    R = (R + R[:, ::-1, ::-1].transpose(0, 2, 1)) / 2
    B = rng.normal(0, 1, (S, S))
    A = np.repeat(((B + B.T) / 2)[:, :, None], T, axis=2)
    p = semi_marginals(SemiModel(R, A))
    np.testing.assert_allclose(p, p[:, ::-1], atol=1e-12)


def test_length_cap_removes_long_segments():
    m = _unit(2, 5, L=2)
    assert np.isneginf(m.log_R[:, 0, 2]).all()
    assert [list(m.window(j)) for j in (0, 4)] == [[0], [3, 4]]
    assert math.exp(semi_forward(m)[1]) == pytest.approx(len(list(_segmentations(2, 5, 2))))


def test_bad_shapes():
    with pytest.raises(DimensionMismatch):
        SemiModel(np.zeros((2, 3, 3)), np.zeros((2, 2, 4)))
    with pytest.raises(DimensionMismatch):
        SemiModel(np.zeros((2, 3, 3)), np.zeros((2, 2, 3)), L=0)


def test_scaled_forward_survives_long_sequences():
    S, T = 3, 500
    m = SemiModel(np.full((S, T, T), 5.0), np.zeros((S, S, T)), L=4)
    alpha, log_Z, logk = semi_forward(m, scaled=True)
    assert math.isinf(semi_forward(m)[1])
    assert math.isfinite(log_Z) and log_Z > 5 * T / 4
    np.testing.assert_allclose(alpha.sum(axis=1), 1.0)
    p = semi_marginals(m, scaled=True)
    np.testing.assert_allclose(p.sum(axis=0), 1.0, atol=1e-9)


def test_scaled_matches_plain_on_short_sequences():
    m = _random_model(np.random.default_rng(3), 3, 9, L=4)
    assert semi_scaled(m) == pytest.approx(semi_forward(m)[1], abs=1e-12)
    a = semi_posteriors(m)
    b = semi_posteriors(m, scaled=True)
    for x, y in zip(a, b):
        np.testing.assert_allclose(x, y, atol=1e-12)


def test_dead_column_raises():
    m = _unit(2, 3)
    m.log_R[:, :, 1] = -np.inf
    m.log_R[:, :, 2] = -np.inf
    with pytest.raises(ZeroColumn):
        semi_forward(m, scaled=True)


def test_constrained_partition_against_enumeration():
    rng = np.random.default_rng(4)
    m = _random_model(rng, 2, 5, L=3)
    labels = PartialLabels({(0, 1): 1, (0, 4): 0}, {(0, 2): 1})

    def keep(seg):
        state = {t: s for s, i, j in seg for t in range(i, j + 1)}
        ends = {j for _, _, j in seg}
        return state[1] == 1 and state[4] == 0 and 2 in ends

    assert semi_constrained(m, labels) == pytest.approx(_brute(m, keep)[0], abs=1e-12)
    assert semi_constrained(m, labels, scaled=True) == pytest.approx(_brute(m, keep)[0], abs=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_random_models_agree_with_enumeration(seed):
    rng = np.random.default_rng(seed)
    S, T = int(rng.integers(1, 4)), int(rng.integers(1, 6))
    m = _random_model(rng, S, T, int(rng.integers(1, T + 1)))
    ref, scores = _brute(m)
    assert semi_forward(m)[1] == pytest.approx(ref, abs=1e-10)
    assert semi_backward(m)[1] == pytest.approx(ref, abs=1e-10)
    best, segs = semi_viterbi(m)
    assert best == pytest.approx(max(scores), abs=1e-10)
    assert m.log_potential(segs) == pytest.approx(best, abs=1e-10)
    fb = forward_backward(m)
    assert fb.log_Z == pytest.approx(ref, abs=1e-10)


def test_viterbi_prefers_lower_state_on_ties():
    _, segs = semi_viterbi(_unit(2, 1))
    assert segs == [Segment(0, 0, 0)]


def _flat_topology(S):
    return Topology.full((1, S, 1))


def test_flatness_check():
    check_flat(_flat_topology(3))
    with pytest.raises(TopologyError):
        check_flat(Topology.full((1, 2, 2)))


def test_reduction_matches_hierarchical_engine():
    rng = np.random.default_rng(5)
    topo = _flat_topology(3)
    lat = random_lattice(topo, 6, rng, max_duration=(None, 3, None))
    ref = infer(lat, topo, numerics="exact")
    m = reduce_from_hscrf(topo, lat)
    assert m.L == 3
    log_Z, post = semi_infer(topo, lat)
    assert log_Z == pytest.approx(ref.log_Z, abs=1e-10)
    for d in range(3):
        np.testing.assert_allclose(post.seg[d], ref.segment_posteriors(d), atol=1e-10)
    best, tree = viterbi(lat, topo)
    flat_best, segs = semi_viterbi(m)
    assert flat_best == pytest.approx(best, abs=1e-10)
    assert hscrf_tree(segs, 6).to_configuration() == tree


def test_unit_segments_reduce_to_a_chain():
    rng = np.random.default_rng(6)
    topo = _flat_topology(2)
    lat = random_lattice(topo, 5, rng, max_duration=(None, 1, None))
    m = reduce_from_hscrf(topo, lat)
    unary = np.array([m.log_R[:, t, t] for t in range(5)])
    from hscrf.oracle import chain_log_partition

    assert semi_forward(m)[1] == pytest.approx(chain_log_partition(unary, m.log_A), abs=1e-10)


def test_labels_route_through_the_flat_engine():
    rng = np.random.default_rng(7)
    topo = _flat_topology(3)
    lat = random_lattice(topo, 5, rng)
    labels = PartialLabels({(1, 0): 2, (1, 3): 1}, {(1, 1): 0})
    assert flat_labels(labels) == PartialLabels({(0, 0): 2, (0, 3): 1}, {(0, 1): 0})
    from hscrf.constrained import constrained_partition

    log_Z, _ = semi_infer(topo, lat, labels, posteriors=False)
    assert log_Z == pytest.approx(constrained_partition(lat, topo, labels), abs=1e-10)
