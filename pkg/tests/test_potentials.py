import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hscrf import FeatureConfig, FeatureIndex, FeatureModel, ObservationSequence, PotentialLattice, Topology
from hscrf.errors import DimensionMismatch, NonFiniteWeight, UnknownFeatureId
from hscrf.oracle import (enumerate_configurations, naive_feature_vector, random_lattice, random_observations,
                          random_topology)
from hscrf.potentials import duration_features

ALL_ON = FeatureConfig(persist_obs=True, transit_obs=True, init_obs=True, end_obs=True, duration=True)


def test_zero_weights_give_unit_potentials(shared):
    model = FeatureModel(shared, FeatureIndex((1, 2)), ALL_ON)
    lat = model.build_lattice(random_observations(4, (1, 2), np.random.default_rng(0)))
    for d in range(3):
        R = lat.log_persist(d)
        upper = np.triu(np.ones((4, 4), dtype=bool))
        assert np.all(R[:, upper] == 0)
    # forbidden child pairs stay at -inf even with zero weights
    assert lat.log_pi[1][1, 1, 0] == -np.inf
    assert np.all(lat.log_pi[1][shared.child_mask[1]] == 0)


def test_log_duration_feature_gives_segment_length():
    topo = Topology.full((1, 2))
    model = FeatureModel(topo, FeatureIndex(), FeatureConfig(persist_obs=False))
    w = np.zeros(model.size)
    w[model.position(("persist", 0, 0, 1))] = 1.0
    lat = model.with_weights(w).build_lattice(ObservationSequence.empty(5))
    # segment [2, 4] in 1-based time is [1, 3] here
    assert math.isclose(math.exp(lat.log_persist(0)[0, 1, 3]), 3.0)


def test_duration_features_values():
    assert duration_features(2, 1) == {("log_duration", 2): 0.0, ("duration", 2): 1.0}
    f = duration_features(0, 5)
    assert math.isclose(f[("log_duration", 0)], math.log(5)) and f[("duration", 0)] == 5.0
    assert ("duration", 1) not in f
    with pytest.raises(ValueError):
        duration_features(0, 0)


@given(st.integers(0, 2**32 - 1))
def test_lattice_matches_naive_dot_products(seed):
    rng = np.random.default_rng(seed)
    topo = random_topology(rng, int(rng.integers(2, 4)), 2)
    index = FeatureIndex((4, 8, 15))
    model = FeatureModel(topo, index, ALL_ON)
    model = model.with_weights(rng.normal(0, 1, model.size))
    T = int(rng.integers(1, 5))
    obs = random_observations(T, index.ids, rng, per_step=2)
    lat = model.build_lattice(obs)
    for config in list(enumerate_configurations(topo, T, budget=10_000))[:40]:
        naive = float(model.weights @ naive_feature_vector(model, obs, config))
        assert lat.log_potential(config) == pytest.approx(naive, abs=1e-10)


@given(st.integers(0, 2**32 - 1), st.floats(-3, 3))
def test_log_linearity(seed, c):
    rng = np.random.default_rng(seed)
    topo = Topology.full((1, 2, 2))
    index = FeatureIndex((0, 1))
    model = FeatureModel(topo, index, ALL_ON)
    k = int(rng.integers(model.size))
    w = np.zeros(model.size)
    w[k] = 1.0
    obs = random_observations(3, index.ids, rng)
    base = model.with_weights(w).build_lattice(obs)
    scaled = model.with_weights(c * w).build_lattice(obs)
    for d in range(3):
        a, b = base.log_persist(d), scaled.log_persist(d)
        finite = np.isfinite(a)
        np.testing.assert_allclose(b[finite], c * a[finite], atol=1e-12)


def test_on_the_fly_matches_precomputed():
    rng = np.random.default_rng(3)
    topo = Topology.full((1, 2, 3))
    index = FeatureIndex((0, 1, 2))
    model = FeatureModel(topo, index, ALL_ON, max_duration=3)
    model = model.with_weights(rng.normal(0, 1, model.size))
    obs = random_observations(7, index.ids, rng)
    pre = model.build_lattice(obs, mode="precomputed")
    lazy = model.build_lattice(obs, mode="on_the_fly")
    assert lazy.allocated_entries() < pre.allocated_entries()
    for d in range(3):
        np.testing.assert_array_equal(pre.log_persist(d), lazy.log_persist(d))
        for j in range(7):
            np.testing.assert_array_equal(pre.log_persist_column(d, j), lazy.log_persist_column(d, j))


def test_duration_cap_masks_long_segments():
    topo = Topology.full((1, 2, 2))
    lat = random_lattice(topo, 6, np.random.default_rng(0), max_duration=2)
    R = lat.log_persist(1)
    assert np.isneginf(R[:, 0, 2]).all() and np.isfinite(R[:, 0, 1]).all()
    # the root keeps its full span
    assert np.isfinite(lat.log_persist(0)[:, 0, 5]).all()


def test_allocation_matches_closed_form():
    topo = Topology.full((2, 3, 2))
    T = 5
    lat = random_lattice(topo, T, np.random.default_rng(0))
    S = topo.sizes
    expected = sum(S[d] * T * T for d in range(3))
    expected += sum(S[c - 1] * S[c] * S[c] * T for c in (1, 2))
    expected += 2 * sum(S[d] * S[d + 1] * T for d in (0, 1))
    assert lat.allocated_entries() == expected


def test_unknown_feature_ids():
    index = FeatureIndex((1, 2))
    obs = ObservationSequence(({1: 1.0, 99: 2.0},))
    assert index.dense(obs).tolist() == [[1.0, 0.0]]
    with pytest.raises(UnknownFeatureId):
        index.dense(obs, strict=True)


def test_non_finite_weights_rejected(shared):
    model = FeatureModel(shared, FeatureIndex(), FeatureConfig())
    w = np.zeros(model.size)
    w[3] = np.nan
    with pytest.raises(NonFiniteWeight):
        model.with_weights(w).build_lattice(ObservationSequence.empty(2))


def test_bad_shapes_rejected(shared):
    with pytest.raises(DimensionMismatch):
        FeatureModel(shared, FeatureIndex(), FeatureConfig(), np.zeros(3))
    T = 2
    S = shared.sizes
    with pytest.raises(DimensionMismatch):
        PotentialLattice.from_arrays(shared, [np.zeros((S[d], T, T)) for d in range(3)],
                                     [None, np.zeros((1, 3, 3, T)), np.zeros((3, 4, 4, T + 1))],
                                     [np.zeros((1, 3, T)), np.zeros((3, 4, T))],
                                     [np.zeros((1, 3, T)), np.zeros((3, 4, T))])


def test_feature_keys_round_trip(shared):
    model = FeatureModel(shared, FeatureIndex((5, 6)), ALL_ON)
    for pos in range(model.size):
        assert model.position(model.key(pos)) == pos
    with pytest.raises(UnknownFeatureId):
        model.position(("persist", 0, 5, 0))


def test_model_dict_round_trip(shared):
    model = FeatureModel(shared, FeatureIndex((5, 6)), ALL_ON, max_duration=(None, 3, 1))
    model = model.with_weights(np.random.default_rng(0).normal(size=model.size))
    back = FeatureModel.from_dict(model.to_dict())
    assert back.topology == model.topology and back.max_duration == model.max_duration
    np.testing.assert_array_equal(back.weights, model.weights)
