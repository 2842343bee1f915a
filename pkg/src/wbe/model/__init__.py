"""Trainable networks: the tape, the two architectures, Adam and the training loop."""

from .networks import (ModelConfig, ModelParams, closed_form_counts, conv_filter, forward,
                       init_params, param_count, predict)
from .optim import Adam, staircase_lr
from .tape import Tape, TapeError, Var
from .train import (TrainConfig, TrainingError, load_checkpoint, loss_and_grads, loss_mse,
                    metric_rel_rmse, save_checkpoint, train, write_history)

__all__ = [
    "ModelConfig", "ModelParams", "closed_form_counts", "conv_filter", "forward",
    "init_params", "param_count", "predict", "Adam", "staircase_lr", "Tape", "TapeError",
    "Var", "TrainConfig", "TrainingError", "load_checkpoint", "loss_and_grads", "loss_mse",
    "metric_rel_rmse", "save_checkpoint", "train", "write_history",
]
