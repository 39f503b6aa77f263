"""From-scratch CNN ensemble and discriminative RBM head."""

from .cnn import NetworkSpec, activations, backward, build_network, forward, init_weights
from .ensemble import (ALL_MODEL_IDS, CnnModel, HybridModel, hybrid_score, make_ensemble, model_output,
                       pooled_features)
from .rbm import RbmParams, rbm_loss_and_grad, rbm_posterior
from .train import TrainConfig, TrainingPair, train_hybrid, train_phases

__all__ = ["NetworkSpec", "activations", "backward", "build_network", "forward", "init_weights",
           "ALL_MODEL_IDS", "CnnModel", "HybridModel", "hybrid_score", "make_ensemble", "model_output",
           "pooled_features", "RbmParams", "rbm_loss_and_grad", "rbm_posterior", "TrainConfig",
           "TrainingPair", "train_hybrid", "train_phases"]
