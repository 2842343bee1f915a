"""Loss, metric, the training loop, checkpoints and history files."""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..core import Rng, read_tensor, write_tensor
from .networks import ModelConfig, ModelParams, forward, predict
from .optim import Adam
from .tape import Tape

__all__ = [
    "TrainConfig",
    "TrainingError",
    "loss_mse",
    "metric_rel_rmse",
    "loss_and_grads",
    "train",
    "write_history",
    "save_checkpoint",
    "load_checkpoint",
]

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """The loss became non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    batch: int = 16
    epochs: int = 100
    decay_rate: float = 0.96
    decay_steps: int = 50
    seed: int = 0
    init: str = "glorot"

    def __post_init__(self):
        if not (self.lr > 0 and self.batch > 0 and self.epochs >= 0
                and 0 < self.decay_rate <= 1 and self.decay_steps > 0):
            raise ValueError(f"invalid training configuration: {self}")
        if self.init not in ("glorot", "kernel-init"):
            raise ValueError(f"unknown init {self.init!r}")


def loss_mse(pred, true) -> float:
    """Mean of squared entrywise differences."""
    pred, true = np.asarray(pred), np.asarray(true)
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {true.shape}")
    return float(np.mean((pred - true) ** 2))


def metric_rel_rmse(preds, trues) -> float:
    """Mean over samples of ``||pred - true|| / ||true||``.

    Samples whose ground truth is identically zero are skipped with a warning.
    """
    preds, trues = np.asarray(preds), np.asarray(trues)
    if preds.shape != trues.shape:
        raise ValueError(f"shape mismatch {preds.shape} vs {trues.shape}")
    P = preds.reshape(preds.shape[0], -1)
    T = trues.reshape(trues.shape[0], -1)
    tn = np.linalg.norm(T, axis=1)
    ok = tn > 0
    if not ok.all():
        warnings.warn(f"{int((~ok).sum())} zero-norm samples excluded from rel_rmse")
    if not ok.any():
        raise ValueError("every ground-truth sample has zero norm")
    return float(np.mean(np.linalg.norm(P[ok] - T[ok], axis=1) / tn[ok]))


def loss_and_grads(params: ModelParams, lam, eta):
    """Batch-mean MSE and its gradient with respect to every tensor."""
    tape = Tape()
    out, P = forward(params, lam, tape)
    loss = tape.mse(out, tape.const(eta))
    tape.backward(loss)
    return float(loss.value), {k: v.grad for k, v in P.items()}


def train(params: ModelParams, lam_train, eta_train, lam_val, eta_val, config: TrainConfig,
          log_every: int = 0):
    """Fit ``params`` (a copy is trained and returned) with Adam on the MSE loss.

    Batches are reshuffled every epoch from ``config.seed`` so two runs with the
    same inputs are bit-identical.

    Returns
    -------
    params : ModelParams
    history : list of dict
        One row per epoch: epoch, train_mse, val_rel_rmse, lr.
    """
    params = params.copy()
    opt = Adam(config.lr, config.decay_rate, config.decay_steps)
    rng = Rng(config.seed)
    n = lam_train.shape[0]
    history = []
    for epoch in range(1, config.epochs + 1):
        order = rng.fork(epoch).permutation(n)
        losses, sizes = [], []
        for start in range(0, n, config.batch):
            idx = order[start:start + config.batch]
            loss, grads = loss_and_grads(params, lam_train[idx], eta_train[idx])
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at optimizer step {opt.t + 1}")
            opt.step(params.tensors, grads)
            if not all(np.isfinite(v).all() for v in params.tensors.values()):
                raise TrainingError(f"non-finite parameters after optimizer step {opt.t}")
            losses.append(loss)
            sizes.append(idx.size)
        row = {"epoch": epoch,
               "train_mse": float(np.average(losses, weights=sizes)),
               "val_rel_rmse": metric_rel_rmse(predict(params, lam_val), eta_val),
               "lr": opt.current_lr()}
        if not math.isfinite(row["val_rel_rmse"]):
            raise TrainingError(f"non-finite validation error after epoch {epoch} "
                                f"(optimizer step {opt.t})")
        history.append(row)
        if log_every and epoch % log_every == 0:
            log.info("epoch %d  train_mse %.4e  val_rel_rmse %.4f", epoch,
                     row["train_mse"], row["val_rel_rmse"])
    params.metadata["epoch"] = params.metadata.get("epoch", 0) + config.epochs
    params.metadata["optimizer_steps"] = opt.t
    return params, history


def write_history(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_mse", "val_rel_rmse", "lr"])
        for row in history:
            w.writerow([row["epoch"], f"{row['train_mse']:.17g}",
                        f"{row['val_rel_rmse']:.17g}", f"{row['lr']:.17g}"])


def save_checkpoint(params: ModelParams, directory, train_config: TrainConfig | None = None) -> None:
    """One WBT1 file per tensor plus ``manifest.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = {}
    for k, v in params.tensors.items():
        name = k.replace("/", "_") + ".wbt"
        write_tensor(d / name, v)
        files[k] = name
    manifest = {
        "kind": params.config.kind,
        "config": params.config.as_dict(),
        "channel_scale": params.channel_scale.tolist(),
        "tensors": files,
        "metadata": params.metadata,
        "train_config": asdict(train_config) if train_config else None,
        "rng_state": Rng(train_config.seed).state() if train_config else None,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_checkpoint(directory) -> ModelParams:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    cfg_d = dict(manifest["config"])
    cfg_d["freqs"] = tuple(cfg_d["freqs"])
    cfg_d["conv_channels"] = tuple(cfg_d["conv_channels"])
    cfg = ModelConfig(**cfg_d)
    tensors = {k: read_tensor(d / f) for k, f in manifest["tensors"].items()}
    return ModelParams(cfg, tensors, np.asarray(manifest["channel_scale"]), manifest["metadata"])
