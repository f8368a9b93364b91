import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hscrf import Segment, Topology, infer, is_legal_configuration, viterbi
from hscrf.errors import CorruptBookkeeper
from hscrf.oracle import Oracle, count_configurations, random_lattice, random_topology
from hscrf.viterbi import UNDEFINED, Undefined, backtrack, viterbi_forward

from .test_oracle import unit_lattice


def test_unit_potentials_have_zero_max(shared):
    best, config = viterbi(unit_lattice(shared, 4), shared)
    assert best == 0.0
    assert is_legal_configuration(shared, config)


def test_dominating_bottom_factor_is_decoded():
    topo = Topology.full((1, 2, 3))
    lat = unit_lattice(topo, 5)
    lat.log_persist(2)[1, 3, 3] = 1.0
    best, book = viterbi_forward(lat, topo)
    assert best == pytest.approx(1.0)
    tree = backtrack(book, topo)
    assert Segment(1, 3, 3) in tree.levels[2]


def test_single_step_gives_one_segment_per_level():
    topo = Topology.full((1, 2))
    _, book = viterbi_forward(random_lattice(topo, 1, np.random.default_rng(0)), topo)
    tree = backtrack(book, topo)
    assert [len(level) for level in tree.levels] == [1, 1]


def test_undefined_marker_is_an_enum():
    assert isinstance(UNDEFINED, Undefined)
    topo = Topology.full((1, 2))
    _, book = viterbi_forward(random_lattice(topo, 3, np.random.default_rng(1)), topo)
    # a child starting with its parent is always an initialisation
    assert book.alpha_arg(0, 0, 0, 0, 0) is UNDEFINED


def test_tie_prefers_initialisation_and_low_states():
    topo = Topology.full((1, 2))
    _, book = viterbi_forward(unit_lattice(topo, 3), topo)
    tree = backtrack(book, topo)
    assert [seg.state for seg in tree.levels[1]] == [0, 0, 0]


def test_corrupt_bookkeeper_is_detected():
    topo = Topology.full((1, 2, 2))
    _, book = viterbi_forward(random_lattice(topo, 4, np.random.default_rng(2)), topo)
    book.delta_arg[0][:] = -1
    with pytest.raises(CorruptBookkeeper):
        backtrack(book, topo)


def test_decoding_is_deterministic(shared):
    lat = random_lattice(shared, 6, np.random.default_rng(5))
    assert viterbi(lat, shared)[1] == viterbi(lat, shared)[1]


@given(st.integers(0, 2**32 - 1))
def test_matches_brute_force_max(seed):
    rng = np.random.default_rng(seed)
    topo = random_topology(rng, int(rng.integers(2, 5)), 3)
    T = int(rng.integers(1, 6))
    if count_configurations(topo, T) > 5000:
        return
    lat = random_lattice(topo, T, rng)
    best, config = viterbi(lat, topo)
    assert is_legal_configuration(topo, config)
    assert lat.log_potential(config) == pytest.approx(best, abs=1e-9)
    assert best == pytest.approx(Oracle(topo, lat).max()[0], abs=1e-9)
    assert best <= infer(lat, topo, outside=False).log_Z + 1e-12
