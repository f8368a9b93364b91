"""Expected sufficient statistics, conditional log-likelihood and SGD training."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .aio import InferenceResult, infer
from .constrained import PartialLabels, constrained_infer, validate_labels
from .errors import EmptyDataset, InconsistentLabels
from .potentials import FeatureModel, ObservationSequence
from .scaling import resolve_numerics
from .semicrf import semi_infer
from .topology import Configuration, is_legal_configuration

log = logging.getLogger(__name__)

FAMILIES = ("persist", "transit", "init", "end")


def _family_only(model: FeatureModel, vec: np.ndarray, family: str) -> np.ndarray:
    out = np.zeros_like(vec)
    for b in model.blocks:
        if b.family == family:
            out[b.offset : b.offset + b.size] = vec[b.offset : b.offset + b.size]
    return out


def ess(result: InferenceResult, model: FeatureModel, obs: ObservationSequence) -> np.ndarray:
    """All four families of ``E[F]`` under the distribution behind ``result``."""
    return model.expected_features(result.clique_posteriors(), obs)


def ess_persist(result, model, obs):
    return _family_only(model, ess(result, model, obs), "persist")


def ess_transit(result, model, obs):
    return _family_only(model, ess(result, model, obs), "transit")


def ess_init(result, model, obs):
    return _family_only(model, ess(result, model, obs), "init")


def ess_end(result, model, obs):
    return _family_only(model, ess(result, model, obs), "end")


Labels = Configuration | PartialLabels | None


def _normalise(labels: Labels, model: FeatureModel, T: int) -> Labels:
    topo = model.topology
    if isinstance(labels, PartialLabels):
        if labels.empty:
            return None
        validate_labels(labels, topo, T)
        if labels.is_complete(topo.depth, T):
            labels = labels.to_configuration(topo.depth, T)
        else:
            return labels
    if isinstance(labels, Configuration):
        if labels.x.shape != (topo.depth, T) or not is_legal_configuration(topo, labels):
            raise InconsistentLabels("labeled configuration violates the hierarchical constraints")
    return labels


def sequence_objective(model: FeatureModel, obs: ObservationSequence, labels: Labels,
                       numerics: str = "auto", gradient: bool = True, engine: str = "hscrf"):
    """``(log Z(labels) - log Z, gradient)`` for one sequence (no regulariser).

    With ``gradient=False`` only the outside-free inside passes run and the
    second element is None.  ``engine="semicrf"`` routes three-level models
    with single-state root and bottom through the flat engine.
    """
    labels = _normalise(labels, model, obs.length)
    if labels is None:
        return 0.0, np.zeros(model.size) if gradient else None
    lattice = model.build_lattice(obs)
    if engine == "semicrf":
        return _flat_objective(model, lattice, obs, labels, numerics, gradient)
    full = infer(lattice, model.topology, numerics=numerics, outside=gradient)
    if isinstance(labels, Configuration):
        observed = model.observed_features(labels, obs)
        ll = float(model.weights @ observed) - full.log_Z
        return ll, (observed - ess(full, model, obs)) if gradient else None
    part = constrained_infer(lattice, model.topology, labels, numerics, outside=gradient)
    ll = part.log_Z - full.log_Z
    return ll, (ess(part, model, obs) - ess(full, model, obs)) if gradient else None


def _flat_objective(model, lattice, obs, labels, numerics, gradient):
    scaled = resolve_numerics(numerics, obs.length) == "scaled"
    log_Z, post = semi_infer(model.topology, lattice, None, scaled, gradient)
    expected = model.expected_features(post, obs) if gradient else None
    if isinstance(labels, Configuration):
        observed = model.observed_features(labels, obs)
        return float(model.weights @ observed) - log_Z, (observed - expected) if gradient else None
    log_Zc, cpost = semi_infer(model.topology, lattice, labels, scaled, gradient)
    return log_Zc - log_Z, (model.expected_features(cpost, obs) - expected) if gradient else None


def log_likelihood_and_gradient(model: FeatureModel, batch: Sequence[tuple[ObservationSequence, Labels]],
                                l2: float = 0.0, numerics: str = "auto", engine: str = "hscrf") -> tuple[float, np.ndarray]:
    """Summed conditional log-likelihood and its gradient, reduced in input order."""
    total = 0.0
    grad = np.zeros(model.size)
    for obs, labels in batch:
        ll, g = sequence_objective(model, obs, labels, numerics, engine=engine)
        total += ll
        grad += g
    if l2:
        total -= 0.5 * l2 * float(model.weights @ model.weights)
        grad -= l2 * model.weights
    return total, grad


def negative_log_likelihood(model, batch, numerics="auto", l2: float = 0.0, engine: str = "hscrf") -> float:
    """``-L`` without computing any gradient."""
    ll = sum(sequence_objective(model, obs, labels, numerics, False, engine)[0] for obs, labels in batch)
    if l2:
        ll -= 0.5 * l2 * float(model.weights @ model.weights)
    return -ll


@dataclass
class TrainConfig:
    epochs: int = 5
    lr: float = 0.1
    l2: float = 0.0
    seed: int = 0
    decay: bool = True
    numerics: str = "auto"
    engine: str = "hscrf"


@dataclass
class TrainState:
    model: FeatureModel
    epoch: int = 0
    nll: list = field(default_factory=list)
    heldout_nll: list = field(default_factory=list)

    @property
    def weights(self) -> np.ndarray:
        return self.model.weights


def train_sgd(model: FeatureModel, dataset: Sequence[tuple[ObservationSequence, Labels]],
              config: TrainConfig = TrainConfig(), heldout=None,
              on_epoch: Callable[[TrainState], None] | None = None) -> TrainState:
    """Online gradient ascent with rate ``lr / (1 + epoch)``.

    ``nll`` and ``heldout_nll`` start with the value before training and gain
    one entry per epoch.
    """
    if not dataset:
        raise EmptyDataset("training set is empty")
    rng = np.random.default_rng(config.seed)
    state = TrainState(model)
    state.nll.append(_penalised_nll(model, dataset, config))
    if heldout:
        state.heldout_nll.append(negative_log_likelihood(model, heldout, config.numerics, engine=config.engine))
    w = model.weights.copy()
    n = len(dataset)
    for epoch in range(config.epochs):
        rate = config.lr / (1 + epoch) if config.decay else config.lr
        for k in rng.permutation(n):
            current = model.with_weights(w)
            obs, labels = dataset[k]
            _, g = sequence_objective(current, obs, labels, config.numerics, engine=config.engine)
            if config.l2:
                g = g - (config.l2 / n) * w
            w = w + rate * g
        model = model.with_weights(w)
        state.model = model
        state.epoch = epoch + 1
        state.nll.append(_penalised_nll(model, dataset, config))
        if heldout:
            state.heldout_nll.append(negative_log_likelihood(model, heldout, config.numerics, engine=config.engine))
        log.info("epoch %d nll %.6f", state.epoch, state.nll[-1])
        if on_epoch:
            on_epoch(state)
    return state


def _penalised_nll(model, dataset, config):
    nll = negative_log_likelihood(model, dataset, config.numerics, config.l2, config.engine)
    if not math.isfinite(nll):
        log.warning("non-finite log-likelihood")
    return nll
