import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hscrf import Topology
from hscrf.oracle import count_configurations, random_lattice, random_topology

settings.register_profile("default", max_examples=25, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def shared_topology() -> Topology:
    """Three levels, sizes 1/3/4, bottom state 0 shared by parents 0 and 1."""
    return Topology.from_mapping((1, 3, 4), {(0, 0): (0, 1, 2), (1, 0): (0, 1), (1, 1): (0, 2), (1, 2): (2, 3)})


def random_instances(seed: int, n: int, depths=(2, 3, 4), max_T: int = 6, max_size: int = 3, budget: int = 5000,
                     min_T: int = 1):
    """``n`` (topology, lattice) pairs small enough to enumerate; oversized draws are redrawn."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        D = int(rng.choice(depths))
        topo = random_topology(rng, D, max_size)
        T = int(rng.integers(min_T, max_T + 1))
        if count_configurations(topo, T) > budget:
            continue
        out.append((topo, random_lattice(topo, T, rng)))
    return out


def nested_labels(config, fractions, rng):
    """Label sets revealing growing prefixes of one random ordering of the ``(d, t)`` cells."""
    from hscrf import PartialLabels

    D, T = config.x.shape
    cells = [(d, t) for d in range(D) for t in range(T)]
    order = [cells[k] for k in rng.permutation(len(cells))]
    out = []
    for f in fractions:
        picked = order[: int(round(f * len(cells)))]
        out.append(PartialLabels({c: int(config.x[c]) for c in picked}, {c: int(config.e[c]) for c in picked}))
    return out


@pytest.fixture
def shared():
    return shared_topology()
