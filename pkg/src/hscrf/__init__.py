"""Hierarchical semi-Markov conditional random fields.

Exact inference (partition function, marginals, expected sufficient
statistics), MAP decoding, constrained inference under partial labels,
column scaling for long sequences, a flat semi-Markov special case and a
brute-force enumeration oracle for checking all of the above.
"""

from .aio import Indicators, InferenceResult, infer, log_partition, partition_function, state_marginal
from .constrained import (PartialLabels, constrained_ess, constrained_infer, constrained_marginal,
                          constrained_partition, constrained_viterbi)
from .errors import *  # noqa: F401,F403
from .learning import (TrainConfig, TrainState, ess, log_likelihood_and_gradient, negative_log_likelihood,
                       sequence_objective, train_sgd)
from .oracle import Oracle, count_configurations, enumerate_configurations
from .potentials import (CliquePosteriors, FeatureConfig, FeatureIndex, FeatureModel, ObservationSequence,
                         PotentialLattice)
from .scaling import ScaleVector, resolve_numerics
from .semicrf import SemiModel, forward_backward, reduce_from_hscrf, semi_viterbi
from .topology import Configuration, Segment, SegmentTree, Topology, is_legal_configuration
from .viterbi import UNDEFINED, viterbi

__version__ = "0.1.0"
