"""Ensembles of non-overlapping subnetworks trained inside one network."""

from .edgepop import PruneConfig, init_scores, optimize_mask, select_mask, ste_score_grads
from .evaluation import (
    EvalReport,
    PredictionMatrix,
    aggregate,
    ece,
    evaluate,
    interrater_agreement,
    mc_dropout_predict,
    nll,
    per_member_accuracy,
    sweep_k,
)
from .masks import Mask, MaskSet, availability, claim, random_orthogonal_partition, verify
from .nn import Architecture, LayerSpec, WeightStore, backward, forward, init_network, mlp, small_cnn
from .trainer import ModelBundle, TrainConfig, train_deep_ensemble, train_mc_dropout, train_orthogonal

__version__ = "0.1.0"
