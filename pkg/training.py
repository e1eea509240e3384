"""
Training Module for SurrogateMPC
CRBM pretraining and the three-stage schedule (pretrain, single step,
multi step) for the recurrent surrogate
"""

import copy
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np
import pandas as pd
import torch

from core import TrainingDivergenceError, window_length
from datagen import WindowedDataset
from surrogate import Cell, SurrogateModel, dataset_tensors, batch_loss

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ["stage", "epoch", "train_loss", "val_loss", "best_val_loss", "lr"]


@dataclass(frozen=True)
class StageConfig:
    """Mini-batch settings for one supervised stage"""
    epochs: int = 30
    batch_size: int = 128
    learning_rate: float = 2e-3


@dataclass(frozen=True)
class CRBMConfig:
    """Contrastive-divergence settings"""
    epochs: int = 10
    hidden_units: int = 50
    learning_rate: float = 1e-3
    batch_size: int = 128


@dataclass(frozen=True)
class TrainConfig:
    """Which stages run and how"""
    crbm_pretrain: bool = False
    single_step: bool = True
    multi_step: bool = True
    crbm: CRBMConfig = field(default_factory=CRBMConfig)
    stage2: StageConfig = field(default_factory=StageConfig)
    stage3: StageConfig = field(default_factory=StageConfig)
    clip_norm: float = 5.0
    seed: int = 0

    def validate(self) -> List[str]:
        problems = []
        for name, stage in (("stage2", self.stage2), ("stage3", self.stage3)):
            if stage.epochs < 0 or stage.batch_size < 1 or not stage.learning_rate > 0:
                problems.append(f"train.{name} needs epochs >= 0, batch_size >= 1 and learning_rate > 0")
        if self.crbm.epochs < 0 or self.crbm.hidden_units < 1 or not self.crbm.learning_rate > 0:
            problems.append("train.crbm needs epochs >= 0, hidden_units >= 1 and learning_rate > 0")
        if not self.clip_norm > 0:
            problems.append("train.clip_norm must be positive")
        return problems


@dataclass
class TrainResult:
    """Trained model plus per-epoch loss history"""
    model: SurrogateModel
    history: pd.DataFrame

    @property
    def final_train_loss(self) -> float:
        return float(self.history["train_loss"].iloc[-1]) if len(self.history) else float("nan")


# --------------------------------------------------------------------------
# CRBM pretraining
# --------------------------------------------------------------------------

def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def pretrain_crbm(model: SurrogateModel, data: WindowedDataset, config: CRBMConfig, seed: int = 0) -> Cell:
    """
    Initialize the latent net's first layer from a conditional RBM

    Gaussian visible units hold the newest observation of the first decoder window,
    the rest of that window is the conditioning history, hidden units are binary.
    After CD-1 training the hidden-unit weights are copied into the first layer
    (halved, since tanh(x/2) = 2*sigmoid(x) - 1); all other layers keep a seeded
    random initialization.

    Args:
        model: Model whose cell is initialized in place
        data: Windowed training data
        config: CRBMConfig
        seed: Seed for initialization, sampling and batching

    Returns:
        The model's cell
    """
    if len(data) == 0:
        raise ValueError("CRBM pretraining needs data")
    if config.epochs == 0:
        return model.cell
    model.reset_parameters(seed)
    rng = np.random.default_rng(seed)

    p, m, d = model.p, model.m, model.d
    L = model.history_length
    window = np.concatenate([
        (data.z_hist[:, L - window_length(d):] - model.z_mean.numpy()) / model.z_std.numpy(),
        np.concatenate([data.u_hist[:, L - window_length(d):L - 1], data.controls[:, :1]], axis=1)
        - model.u_mean.numpy(),
    ], axis=2)
    window[:, :, p:] /= model.u_std.numpy()
    flat = window.reshape(len(data), -1)
    visible_idx = np.arange((2 * d + 1) * (p + m), (2 * d + 1) * (p + m) + p)
    cond_idx = np.setdiff1d(np.arange(flat.shape[1]), visible_idx)
    v_all, x_all = flat[:, visible_idx], flat[:, cond_idx]

    H = config.hidden_units
    W = rng.normal(0.0, 0.01, size=(H, p))
    B = rng.normal(0.0, 0.01, size=(H, len(cond_idx)))
    A = rng.normal(0.0, 0.01, size=(p, len(cond_idx)))
    b_h = np.zeros(H)
    b_v = np.zeros(p)
    lr = config.learning_rate

    for epoch in range(config.epochs):
        order = rng.permutation(len(data))
        recon = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            v0, x = v_all[idx], x_all[idx]
            ph0 = _sigmoid(v0 @ W.T + x @ B.T + b_h)
            h0 = (rng.random(ph0.shape) < ph0).astype(float)
            v1 = h0 @ W + x @ A.T + b_v
            ph1 = _sigmoid(v1 @ W.T + x @ B.T + b_h)
            n = len(idx)
            W += lr * (ph0.T @ v0 - ph1.T @ v1) / n
            B += lr * ((ph0 - ph1).T @ x) / n
            A += lr * ((v0 - v1).T @ x) / n
            b_h += lr * np.mean(ph0 - ph1, axis=0)
            b_v += lr * np.mean(v0 - v1, axis=0)
            recon += float(np.sum((v0 - v1) ** 2))
        logger.debug(f"CRBM epoch {epoch + 1}/{config.epochs}: reconstruction error {recon / len(order):.6g}")

    first = model.cell.latent.layers[0].linear
    rows = min(H, first.out_features)
    offset = model.h_dim
    with torch.no_grad():
        weight = first.weight.detach().numpy().copy()
        bias = first.bias.detach().numpy().copy()
        weight[:rows, offset + visible_idx] = 0.5 * W[:rows]
        weight[:rows, offset + cond_idx] = 0.5 * B[:rows]
        bias[:rows] = 0.5 * b_h[:rows]
        first.weight.copy_(torch.as_tensor(weight))
        first.bias.copy_(torch.as_tensor(bias))
    logger.info(f"CRBM pretraining finished: {config.epochs} epochs, {H} hidden units")
    return model.cell


# --------------------------------------------------------------------------
# Supervised stages
# --------------------------------------------------------------------------

def _evaluate(model: SurrogateModel, tensors) -> float:
    with torch.no_grad():
        return float(batch_loss(model, *tensors))


def _run_stage(model: SurrogateModel, name: str, data: WindowedDataset, validation: Optional[WindowedDataset],
               stage: StageConfig, clip_norm: float, seed: int,
               progress_callback: Optional[Callable] = None) -> List[dict]:
    tensors = dataset_tensors(data)
    val_tensors = dataset_tensors(validation) if validation is not None and len(validation) else None
    optimizer = torch.optim.Adam(model.parameters(), lr=stage.learning_rate)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=max(1, stage.epochs))
    generator = torch.Generator().manual_seed(int(seed))
    n = len(data)

    rows = []
    train_loss = _evaluate(model, tensors)
    val_loss = _evaluate(model, val_tensors) if val_tensors else train_loss
    best = val_loss if math.isfinite(val_loss) else float("inf")
    best_state = copy.deepcopy(model.state_dict())
    rows.append(dict(stage=name, epoch=0, train_loss=train_loss, val_loss=val_loss,
                     best_val_loss=best, lr=stage.learning_rate))

    for epoch in range(1, stage.epochs + 1):
        lr = optimizer.param_groups[0]["lr"]
        order = torch.randperm(n, generator=generator)
        total = 0.0
        for start in range(0, n, stage.batch_size):
            idx = order[start:start + stage.batch_size]
            value = batch_loss(model, *(t[idx] for t in tensors))
            if not torch.isfinite(value):
                logger.error(f"Stage {name} diverged at epoch {epoch}")
                raise TrainingDivergenceError(name, epoch, float(value))
            optimizer.zero_grad()
            value.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), clip_norm)
            optimizer.step()
            total += float(value) * len(idx)
        scheduler.step()
        train_loss = total / n
        val_loss = _evaluate(model, val_tensors) if val_tensors else train_loss
        if not math.isfinite(val_loss):
            raise TrainingDivergenceError(name, epoch, val_loss)
        if val_loss < best:
            best = val_loss
            best_state = copy.deepcopy(model.state_dict())
        rows.append(dict(stage=name, epoch=epoch, train_loss=train_loss, val_loss=val_loss,
                         best_val_loss=best, lr=lr))
        logger.debug(f"Stage {name} epoch {epoch}/{stage.epochs}: train {train_loss:.6g}, val {val_loss:.6g}")
        if progress_callback:
            progress_callback(name, epoch, stage.epochs)

    model.load_state_dict(best_state)
    logger.info(f"Stage {name} finished after {stage.epochs} epochs, best validation loss {best:.6g}")
    return rows


def train(model: SurrogateModel, data: WindowedDataset, config: TrainConfig,
          validation: Optional[WindowedDataset] = None,
          progress_callback: Optional[Callable] = None) -> TrainResult:
    """
    Run the enabled training stages in order

    Stage 2 trains one decoder step from measured history only; stage 3 trains
    the full free-running horizon. After each stage the weights with the best
    validation loss are restored.

    Args:
        model: Model trained in place
        data: Windowed training data for the model's (M, N, d)
        config: TrainConfig
        validation: Optional held-out windows; the training loss is used otherwise
        progress_callback: Optional callable(stage, epoch, epochs)

    Returns:
        TrainResult with the per-epoch loss history
    """
    problems = config.validate()
    if problems:
        raise ValueError("; ".join(problems))
    if (data.M, data.N, data.d) != (model.M, model.N, model.d):
        raise ValueError(f"data windows are (M={data.M}, N={data.N}, d={data.d}), "
                         f"model is (M={model.M}, N={model.N}, d={model.d})")
    if len(data) == 0:
        raise ValueError("training needs at least one window")

    started = time.time()
    rows: List[dict] = []
    if config.crbm_pretrain:
        pretrain_crbm(model, data, config.crbm, seed=config.seed)
    if config.single_step and config.stage2.epochs > 0:
        rows += _run_stage(model, "single_step", data.truncate_horizon(1),
                           validation.truncate_horizon(1) if validation is not None else None,
                           config.stage2, config.clip_norm, config.seed + 1, progress_callback)
    if config.multi_step and config.stage3.epochs > 0:
        rows += _run_stage(model, "multi_step", data, validation, config.stage3,
                           config.clip_norm, config.seed + 2, progress_callback)
    logger.info(f"Model training completed in {time.time() - started:.2f} seconds")
    return TrainResult(model, pd.DataFrame(rows, columns=HISTORY_COLUMNS))


def fine_tune(model: SurrogateModel, data: WindowedDataset, epochs: int, learning_rate: float,
              batch_size: int = 64, clip_norm: float = 5.0, seed: int = 0) -> TrainResult:
    """Multi-step training on new data only, as used between online intervals"""
    config = TrainConfig(single_step=False, multi_step=True,
                         stage3=StageConfig(epochs=epochs, batch_size=batch_size, learning_rate=learning_rate),
                         clip_norm=clip_norm, seed=seed)
    return train(model, data, config)
