"""Cycle-consistent multi-model merging of MLPs via Frank-Wolfe permutation matching."""

__version__ = "0.1.0"

from .perm import (
    InvalidInputError,
    Permutation,
    compose,
    invert,
    is_doubly_stochastic,
    lap_maximize,
    project_to_permutation,
    sinkhorn_knopp,
)
from .model import (
    Dataset,
    MlpParams,
    ModelFormatError,
    ShapeMismatchError,
    apply_permutations,
    forward,
    load_model,
    loss_and_accuracy,
    save_model,
)
from .matching import (
    MatchConfig,
    MatchTrace,
    PairwiseMatch,
    UniverseMatch,
    coordinate_descent_match,
    fw_match_multi,
    fw_match_pair,
    load_match,
    save_match,
)
from .merging import c2m3_merge, map_to_universe, merge_many, merge_subset, naive_merge, repair
from .evaluation import cka, cycle_error, interpolate, loss_barrier, similarity_report
from .training import SyntheticSpec, TrainConfig, init_mlp, load_csv_dataset, make_dataset, train_mlp
from .fedsim import FedConfig, run_simulation

__all__ = [name for name in dir() if not name.startswith("_")]
