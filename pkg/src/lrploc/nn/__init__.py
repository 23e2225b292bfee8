"""Minimal layer-graph engine: forward traces, gradients, Adam training, checkpoints."""
from .checkpoint import (CheckpointError, FingerprintMismatch, TruncatedCheckpoint,
                         VersionMismatch, load_weights, save_weights)
from .graph import (INPUT, ForwardTrace, LayerGraph, NonFiniteError, StaleTraceError,
                    backward, forward, init_parameters, predict)
from .layers import (Conv1D, Dense, Dropout, ElementwiseMultiply, GlobalAvgPool1D, Layer,
                     MaxPool1D, ReLU, ResidualAdd, ShapeError, Sigmoid)
from .train import (History, OptimizerState, TrainConfig, TrainingDiverged, load_training_state,
                    save_training_state, train)

__all__ = [
    "INPUT", "CheckpointError", "Conv1D", "Dense", "Dropout", "ElementwiseMultiply",
    "FingerprintMismatch", "ForwardTrace", "GlobalAvgPool1D", "History", "Layer", "LayerGraph",
    "MaxPool1D", "NonFiniteError", "OptimizerState", "ReLU", "ResidualAdd", "ShapeError",
    "Sigmoid", "StaleTraceError", "TrainConfig", "TrainingDiverged", "TruncatedCheckpoint",
    "VersionMismatch", "backward", "forward", "init_parameters", "load_training_state",
    "load_weights", "predict", "save_training_state", "save_weights", "train",
]
