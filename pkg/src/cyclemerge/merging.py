"""Aggregating models: universe mapping, C2M3 and baseline merges, REPAIR."""

from __future__ import annotations

import logging
import warnings
from typing import NamedTuple, Sequence

import numpy as np

from .matching import MatchConfig, UniverseMatch, coordinate_descent_match, fw_match_multi
from .model import (
    ActivationStats,
    Dataset,
    MlpParams,
    apply_permutations,
    check_same_architecture,
    forward,
)
from .perm import InvalidInputError, Permutation, invert

log = logging.getLogger(__name__)

DEGENERATE_STD = 1e-12


class MergeResult(NamedTuple):
    merged: MlpParams
    match: UniverseMatch


def mean_params(models: Sequence[MlpParams]) -> MlpParams:
    """Unweighted elementwise mean.

    Written as ``first + mean(m_i - first)`` so that averaging identical
    models returns them bit for bit.
    """
    models = list(models)
    if not models:
        raise InvalidInputError("need at least one model to average")
    check_same_architecture(*models)
    first = models[0]
    if len(models) == 1:
        return first
    n = len(models)

    def avg(arrs):
        base = arrs[0]
        delta = np.zeros_like(base)
        for x in arrs[1:]:
            delta += x - base
        return base + delta / n

    ws = [avg([m.weights[i] for m in models]) for i in range(first.n_layers)]
    bs = [avg([m.biases[i] for m in models]) for i in range(first.n_layers)]
    return first.replace(ws, bs)


def naive_merge(models: Sequence[MlpParams]) -> MlpParams:
    """Plain weight averaging without any alignment (FedAvg-style)."""
    return mean_params(models)


def map_to_universe(m: MlpParams, perms: Sequence[Permutation]) -> MlpParams:
    """``W_l -> P_l^T W_l P_{l-1}``, i.e. undo the universe-to-model maps."""
    return apply_permutations(m, [invert(p) for p in perms])


def map_from_universe(m: MlpParams, perms: Sequence[Permutation]) -> MlpParams:
    return apply_permutations(m, perms)


def _universe_models(models, match: UniverseMatch):
    if len(models) != match.n_models:
        raise InvalidInputError(f"{len(models)} models but match covers {match.n_models}")
    return [map_to_universe(m, p) for m, p in zip(models, match.perms)]


def c2m3_merge(models: Sequence[MlpParams], config: MatchConfig = MatchConfig()) -> MergeResult:
    """Match all models jointly to a universe and average them there."""
    models = list(models)
    match = fw_match_multi(models, config)
    merged = mean_params(_universe_models(models, match))
    return MergeResult(merged, match)


def merge_subset(models: Sequence[MlpParams], match: UniverseMatch, subset: Sequence[int]) -> MlpParams:
    """Average a subset of models using permutations from a joint match."""
    subset = list(subset)
    if not subset:
        raise InvalidInputError("subset must not be empty")
    for i in subset:
        if not 0 <= i < len(models):
            raise IndexError(f"model index {i} out of range for {len(models)} models")
    if len(models) != match.n_models:
        raise InvalidInputError(f"{len(models)} models but match covers {match.n_models}")
    return mean_params([map_to_universe(models[i], match.perms[i]) for i in subset])


def merge_many(models: Sequence[MlpParams], seed: int = 0, max_outer_iters: int = 100) -> MlpParams:
    """Iteratively align each model to the mean of the others, then average.

    The inner matcher is :func:`coordinate_descent_match`. Stops once a full
    pass leaves every permutation at the identity.
    """
    models = list(models)
    if len(models) < 2:
        raise InvalidInputError("merge_many needs at least two models")
    check_same_architecture(*models)
    rng = np.random.default_rng(seed)
    for outer in range(max_outer_iters):
        changed = False
        for i in rng.permutation(len(models)):
            reference = mean_params([m for j, m in enumerate(models) if j != i])
            match = coordinate_descent_match(reference, models[i], seed=int(rng.integers(2**31)))
            if not all(p.is_identity() for p in match.perms):
                models[i] = apply_permutations(models[i], match.perms)
                changed = True
        if not changed:
            break
    else:
        log.warning("merge_many stopped at max_outer_iters=%d", max_outer_iters)
    return mean_params(models)


def collect_stats(m: MlpParams, data: Dataset) -> ActivationStats:
    if len(data) == 0:
        raise ValueError("cannot collect statistics on an empty dataset")
    pre = forward(m, data.features).pre_activations
    return ActivationStats([z.mean(axis=0) for z in pre], [z.std(axis=0) for z in pre])


def repair(merged: MlpParams, endpoints: Sequence[MlpParams], data: Dataset) -> MlpParams:
    """Rescale hidden neurons so their pre-activation mean/std match the
    endpoint average.

    Targets are the uniform mean over ``endpoints`` of per-neuron means and
    stds. The affine correction is folded into each layer's weights and bias,
    working from input to output so each layer sees already-repaired inputs.
    Neurons whose merged or target std is below ``1e-12`` keep gain 1 but are
    still shifted.
    """
    endpoints = list(endpoints)
    if not endpoints:
        raise InvalidInputError("repair needs at least one endpoint model")
    check_same_architecture(merged, *endpoints)
    if len(data) == 0:
        raise ValueError("cannot repair with an empty dataset")
    stats = [collect_stats(e, data) for e in endpoints]
    n_hidden = merged.n_layers - 1
    ws, bs = list(merged.weights), list(merged.biases)
    x = data.features
    for k in range(n_hidden):
        target_mu = np.mean([s.means[k] for s in stats], axis=0)
        target_sd = np.mean([s.stds[k] for s in stats], axis=0)
        z = x @ ws[k].T + bs[k]
        mu, sd = z.mean(axis=0), z.std(axis=0)
        degenerate = (sd < DEGENERATE_STD) | (target_sd < DEGENERATE_STD)
        if degenerate.any():
            warnings.warn(f"repair: {int(degenerate.sum())} degenerate neuron(s) in hidden layer {k}; gain set to 1",
                          RuntimeWarning, stacklevel=2)
        gain = np.where(degenerate, 1.0, target_sd / np.where(degenerate, 1.0, sd))
        ws[k] = ws[k] * gain[:, None]
        bs[k] = gain * (bs[k] - mu) + target_mu
        x = np.maximum(x @ ws[k].T + bs[k], 0.0)
    return merged.replace(ws, bs)
