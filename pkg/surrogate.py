"""
Surrogate Module for SurrogateMPC
Recurrent encoder/decoder model of the control-relevant observations:
cell forward pass, multi-step prediction, gradients through time and the
checkpoint format
"""

import hashlib
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from torch import nn

from core import (CheckpointFormatError, CheckpointVersionError, DelayWindow, DimensionError,
                  TimeSeries, WindowIndexError, history_length, window_length)
from datagen import WindowedDataset, split_windows

logger = logging.getLogger(__name__)

DTYPE = torch.float64
CHECKPOINT_FORMAT = "surrogate-mpc-checkpoint"
CHECKPOINT_VERSION = 1

ACTIVATIONS = {
    "tanh": torch.tanh,
    "linear": lambda x: x,
}


# --------------------------------------------------------------------------
# Network pieces
# --------------------------------------------------------------------------

class DenseLayer(nn.Module):
    """Affine map followed by a named activation"""

    def __init__(self, n_in: int, n_out: int, activation: str = "tanh"):
        super().__init__()
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation '{activation}'")
        self.linear = nn.Linear(n_in, n_out, dtype=DTYPE)
        self.activation = activation

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return ACTIVATIONS[self.activation](self.linear(x))


class DenseStack(nn.Module):
    """Chain of dense layers"""

    def __init__(self, sizes: Sequence[int], activations: Sequence[str]):
        super().__init__()
        if len(sizes) != len(activations) + 1 or len(activations) < 1:
            raise ValueError("a stack needs one activation per layer")
        self.layers = nn.ModuleList(
            DenseLayer(n_in, n_out, act) for n_in, n_out, act in zip(sizes[:-1], sizes[1:], activations)
        )

    @property
    def in_features(self) -> int:
        return self.layers[0].linear.in_features

    @property
    def out_features(self) -> int:
        return self.layers[-1].linear.out_features

    @property
    def activations(self) -> List[str]:
        return [layer.activation for layer in self.layers]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


class Cell(nn.Module):
    """
    Recurrent cell split into three sub-networks.

    latent:  [h, flattened (z,u) history] -> h'
    control: [flattened recent controls]  -> c
    output:  [h', c]                      -> z'

    An encoder step uses only the latent part.
    """

    def __init__(self, latent: DenseStack, control: DenseStack, output: DenseStack):
        super().__init__()
        self.latent = latent
        self.control = control
        self.output = output

    @property
    def h_dim(self) -> int:
        return self.latent.out_features

    def encode(self, h: torch.Tensor, zu_flat: torch.Tensor) -> torch.Tensor:
        return self.latent(torch.cat([h, zu_flat], dim=-1))

    def forward(self, h: torch.Tensor, zu_flat: torch.Tensor,
                u_recent_flat: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        h_next = self.encode(h, zu_flat)
        c = self.control(u_recent_flat)
        return h_next, self.output(torch.cat([h_next, c], dim=-1))


class SurrogateModel(nn.Module):
    """
    Encoder/decoder surrogate predicting N future observations.

    Inputs and outputs are normalized per channel with statistics frozen into
    the model. The encoder reuses the decoder cell's latent network, so the two
    always share one parameter block.
    """

    def __init__(self, cell: Cell, p: int, m: int, M: int, N: int, d: int):
        super().__init__()
        if M < 1 or N < 1 or d < 0:
            raise ValueError(f"invalid model sizes M={M}, N={N}, d={d}")
        zu_features = window_length(d) * (p + m)
        if cell.latent.in_features != cell.h_dim + zu_features:
            raise DimensionError(f"latent net expects {cell.latent.in_features} inputs, "
                                 f"window provides {cell.h_dim} + {zu_features}")
        if cell.control.in_features != (d + 1) * m:
            raise DimensionError(f"control net expects {cell.control.in_features} inputs, "
                                 f"window provides {(d + 1) * m}")
        if cell.output.in_features != cell.h_dim + cell.control.out_features:
            raise DimensionError("output net input does not match latent and control widths")
        if cell.output.out_features != p:
            raise DimensionError(f"output net produces {cell.output.out_features} values for p={p}")
        self.cell = cell
        self.p, self.m, self.M, self.N, self.d = p, m, M, N, d
        self.register_buffer("z_mean", torch.zeros(p, dtype=DTYPE))
        self.register_buffer("z_std", torch.ones(p, dtype=DTYPE))
        self.register_buffer("u_mean", torch.zeros(m, dtype=DTYPE))
        self.register_buffer("u_std", torch.ones(m, dtype=DTYPE))

    @classmethod
    def create(cls, p: int, m: int, M: int = 10, N: int = 5, d: int = 3, h_dim: int = 32,
               hidden: int = 64, control_width: Optional[int] = None, seed: int = 0) -> "SurrogateModel":
        """
        Build the default architecture with seeded initialization

        Args:
            p: Observation dimension
            m: Control dimension
            M: Encoder cells
            N: Decoder cells
            d: Delay count
            h_dim: Latent size
            hidden: Hidden width of the latent and output nets
            control_width: Width of the control net (defaults to hidden)
            seed: Initialization seed

        Returns:
            SurrogateModel
        """
        control_width = hidden if control_width is None else control_width
        zu_features = window_length(d) * (p + m)
        cell = Cell(
            latent=DenseStack([h_dim + zu_features, hidden, h_dim], ["tanh", "tanh"]),
            control=DenseStack([(d + 1) * m, control_width], ["tanh"]),
            output=DenseStack([h_dim + control_width, hidden, p], ["tanh", "linear"]),
        )
        model = cls(cell, p, m, M, N, d)
        model.reset_parameters(seed)
        return model

    @property
    def h_dim(self) -> int:
        return self.cell.h_dim

    @property
    def encoder_cell(self) -> DenseStack:
        return self.cell.latent

    @property
    def decoder_cell(self) -> Cell:
        return self.cell

    @property
    def history_length(self) -> int:
        return history_length(self.M, self.d)

    def reset_parameters(self, seed: int):
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, from a private generator"""
        generator = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for module in self.modules():
                if isinstance(module, nn.Linear):
                    bound = 1.0 / np.sqrt(module.in_features)
                    module.weight.copy_((torch.rand(module.weight.shape, generator=generator, dtype=DTYPE)
                                         * 2.0 - 1.0) * bound)
                    module.bias.zero_()

    # -- normalization ------------------------------------------------------

    def fit_normalization(self, episodes: Sequence[TimeSeries]):
        """Freeze per-channel mean/std of the training episodes into the model"""
        z = np.concatenate([episode.z for episode in episodes])
        u = np.concatenate([episode.u for episode in episodes])
        self.set_normalization(z.mean(axis=0), z.std(axis=0), u.mean(axis=0), u.std(axis=0))

    def set_normalization(self, z_mean, z_std, u_mean, u_std):
        z_std = np.where(np.asarray(z_std) > 1e-12, z_std, 1.0)
        u_std = np.where(np.asarray(u_std) > 1e-12, u_std, 1.0)
        with torch.no_grad():
            self.z_mean.copy_(torch.as_tensor(np.asarray(z_mean, dtype=float)))
            self.z_std.copy_(torch.as_tensor(np.asarray(z_std, dtype=float)))
            self.u_mean.copy_(torch.as_tensor(np.asarray(u_mean, dtype=float)))
            self.u_std.copy_(torch.as_tensor(np.asarray(u_std, dtype=float)))

    def normalize_z(self, z):
        return (z - self.z_mean) / self.z_std

    def denormalize_z(self, z):
        return z * self.z_std + self.z_mean

    def normalize_u(self, u):
        return (u - self.u_mean) / self.u_std

    # -- rollout ------------------------------------------------------------

    def rollout(self, z_hist: torch.Tensor, u_hist: torch.Tensor, controls: torch.Tensor) -> torch.Tensor:
        """
        Run M encoder and len(controls) decoder cells in normalized units

        Args:
            z_hist: (B, L, p) measured observations, L = M+2d+2
            u_hist: (B, L, m) measured controls; the last entry is replaced by controls[:, 0]
            controls: (B, N, m) decoder controls

        Returns:
            (B, N, p) predicted observations following the last history sample
        """
        L = self.history_length
        d = self.d
        batch = z_hist.shape[0]
        n_steps = controls.shape[1]
        z_seq = list(z_hist.unbind(dim=1))
        u_seq = torch.cat([u_hist[:, :L - 1], controls], dim=1)

        def zu_window(k):
            return torch.cat([torch.cat([z_seq[j], u_seq[:, j]], dim=1)
                              for j in range(k - 2 * d - 1, k + 1)], dim=1)

        h = torch.zeros(batch, self.h_dim, dtype=DTYPE)
        for k in range(2 * d + 1, L - 1):
            h = self.cell.encode(h, zu_window(k))
        predictions = []
        for i in range(n_steps):
            k = L - 1 + i
            h, z_next = self.cell(h, zu_window(k), u_seq[:, k - d:k + 1].reshape(batch, -1))
            z_seq.append(z_next)
            predictions.append(z_next)
        return torch.stack(predictions, dim=1)

    def forward(self, z_hist: torch.Tensor, u_hist: torch.Tensor, controls: torch.Tensor) -> torch.Tensor:
        """Raw-unit rollout: normalize, run the cells, denormalize"""
        out = self.rollout(self.normalize_z(z_hist), self.normalize_u(u_hist), self.normalize_u(controls))
        return self.denormalize_z(out)


# --------------------------------------------------------------------------
# Operations
# --------------------------------------------------------------------------

def _tensor(array) -> torch.Tensor:
    return torch.as_tensor(np.asarray(array, dtype=float), dtype=DTYPE)


def cell_forward(cell: Cell, h: np.ndarray, window: DelayWindow) -> Tuple[np.ndarray, np.ndarray]:
    """
    One decoder cell application on normalized inputs

    Args:
        cell: Cell weights
        h: Latent vector
        window: Delay window (normalized units)

    Returns:
        (h', z')
    """
    h = np.asarray(h, dtype=float)
    if h.shape != (cell.h_dim,):
        raise DimensionError(f"latent vector must have {cell.h_dim} entries, got {h.shape}")
    with torch.no_grad():
        h_next, z_next = cell(_tensor(h)[None], _tensor(window.flat_history())[None],
                              _tensor(window.u_recent.ravel())[None])
    return h_next[0].numpy(), z_next[0].numpy()


def _history_tensors(model: SurrogateModel, history: TimeSeries, controls) -> Tuple[torch.Tensor, ...]:
    L = model.history_length
    if len(history) != L:
        raise WindowIndexError(f"history must hold exactly {L} samples (M+2d+2), got {len(history)}")
    if history.p != model.p or history.m != model.m:
        raise DimensionError(f"history is (p={history.p}, m={history.m}), model is (p={model.p}, m={model.m})")
    controls = np.asarray(controls, dtype=float).reshape(-1, model.m)
    if len(controls) < 1:
        raise ValueError("at least one control is required")
    return _tensor(history.z)[None], _tensor(history.u)[None], _tensor(controls)[None]


def predict(model: SurrogateModel, history: TimeSeries, controls) -> np.ndarray:
    """
    Predict the observations following the history under the given controls

    Args:
        model: Trained surrogate
        history: Exactly M+2d+2 samples; the last sample's control slot is ignored
        controls: (N, m) controls, the first applied at the last history sample

    Returns:
        (N, p) predicted observations
    """
    z_hist, u_hist, u = _history_tensors(model, history, controls)
    with torch.no_grad():
        return model(z_hist, u_hist, u)[0].numpy()


def dataset_tensors(batch: WindowedDataset):
    return _tensor(batch.z_hist), _tensor(batch.u_hist), _tensor(batch.controls), _tensor(batch.targets)


def batch_loss(model: SurrogateModel, z_hist, u_hist, controls, targets) -> torch.Tensor:
    """Mean squared prediction error in normalized units (differentiable)"""
    predicted = model.rollout(model.normalize_z(z_hist), model.normalize_u(u_hist), model.normalize_u(controls))
    return torch.mean((predicted - model.normalize_z(targets)) ** 2)


def loss(model: SurrogateModel, batch: WindowedDataset) -> float:
    """Mean over samples, steps and channels of the normalized squared error"""
    if len(batch) == 0:
        raise ValueError("loss needs a non-empty batch")
    with torch.no_grad():
        return float(batch_loss(model, *dataset_tensors(batch)))


def grad_weights(model: SurrogateModel, batch: WindowedDataset) -> Dict[str, np.ndarray]:
    """
    Gradient of loss() with respect to every parameter, by reverse accumulation
    through all encoder and decoder cells

    Returns:
        Mapping parameter name -> gradient array of the parameter's shape
    """
    if len(batch) == 0:
        raise ValueError("gradient needs a non-empty batch")
    names, params = zip(*model.named_parameters())
    value = batch_loss(model, *dataset_tensors(batch))
    grads = torch.autograd.grad(value, params, allow_unused=True)
    return {name: (np.zeros(tuple(param.shape)) if grad is None else grad.detach().numpy().copy())
            for name, param, grad in zip(names, params, grads)}


def tracking_value_and_grad(model: SurrogateModel, history: TimeSeries, controls, reference,
                            mask: Sequence[int]) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    Prediction term of the horizon cost and its gradient with respect to the controls

    Args:
        model: Surrogate
        history: M+2d+2 samples
        controls: (N, m) controls
        reference: (N, J) targets for the tracked channels
        mask: Tracked observation channels

    Returns:
        (sum of squared tracking errors, (N, p) predictions, (N, m) gradient)
    """
    z_hist, u_hist, u = _history_tensors(model, history, controls)
    u.requires_grad_(True)
    predicted = model(z_hist, u_hist, u)[0]
    reference = _tensor(reference).reshape(predicted.shape[0], len(mask))
    value = torch.sum((predicted[:, list(mask)] - reference) ** 2)
    (grad,) = torch.autograd.grad(value, u)
    return float(value), predicted.detach().numpy(), grad[0].numpy()


def grad_controls(model: SurrogateModel, history: TimeSeries, controls, reference,
                  mask: Sequence[int]) -> np.ndarray:
    """Gradient of the tracking term with respect to each planned control, shape (N, m)"""
    return tracking_value_and_grad(model, history, controls, reference, mask)[2]


def prediction_jacobian(model: SurrogateModel, history: TimeSeries, controls) -> np.ndarray:
    """d prediction[i, j] / d control[k, l], shape (N, p, N, m)"""
    z_hist, u_hist, u = _history_tensors(model, history, controls)

    def rollout(controls_only):
        return model(z_hist, u_hist, controls_only[None])[0]

    return torch.autograd.functional.jacobian(rollout, u[0]).numpy()


# --------------------------------------------------------------------------
# Prediction quality
# --------------------------------------------------------------------------

def rolling_windows(series: TimeSeries, model: SurrogateModel, N: Optional[int] = None) -> WindowedDataset:
    """Every anchor of an episode as a windowed sample with the episode's own controls"""
    return split_windows(series, model.M, N or model.N, model.d)


def rolling_predictions(model: SurrogateModel, series: TimeSeries, N: Optional[int] = None) -> pd.DataFrame:
    """
    N-step predictions from every admissible anchor next to the measured truth

    Returns:
        DataFrame with columns t, step, z_j_pred..., z_j_true...
    """
    N = N or model.N
    windows = rolling_windows(series, model, N)
    z_hist, u_hist, controls, targets = dataset_tensors(windows)
    with torch.no_grad():
        predicted = model(z_hist, u_hist, controls).numpy()
    anchors = np.arange(len(windows)) + model.history_length - 1
    rows = {"t": np.repeat(series.t0 + anchors * series.dt, N), "step": np.tile(np.arange(1, N + 1), len(windows))}
    for j in range(model.p):
        rows[f"z_{j + 1}_pred"] = predicted[:, :, j].ravel()
        rows[f"z_{j + 1}_true"] = windows.targets[:, :, j].ravel()
    return pd.DataFrame(rows)


def prediction_rmse(model: SurrogateModel, data: WindowedDataset) -> np.ndarray:
    """Normalized RMSE per prediction step, free-running over the decoder"""
    z_hist, u_hist, controls, targets = dataset_tensors(data)
    with torch.no_grad():
        predicted = model.rollout(model.normalize_z(z_hist), model.normalize_u(u_hist), model.normalize_u(controls))
        error = (predicted - model.normalize_z(targets)) ** 2
    return np.sqrt(error.mean(dim=(0, 2)).numpy())


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

def _hex_row(values) -> str:
    return " ".join(float(v).hex() for v in np.asarray(values, dtype=float).ravel())


def _parse_hex_row(text: str) -> List[float]:
    try:
        return [float.fromhex(token) for token in text.split()]
    except ValueError as e:
        raise CheckpointFormatError(f"bad number in checkpoint: {e}") from None


def dumps_model(model: SurrogateModel) -> str:
    lines = [
        f"format: {CHECKPOINT_FORMAT}",
        f"version: {CHECKPOINT_VERSION}",
        f"M: {model.M}",
        f"N: {model.N}",
        f"d: {model.d}",
        f"h_dim: {model.h_dim}",
        f"p: {model.p}",
        f"m: {model.m}",
        f"latent.activations: {','.join(model.cell.latent.activations)}",
        f"control.activations: {','.join(model.cell.control.activations)}",
        f"output.activations: {','.join(model.cell.output.activations)}",
        f"normalization.z_mean: {_hex_row(model.z_mean)}",
        f"normalization.z_std: {_hex_row(model.z_std)}",
        f"normalization.u_mean: {_hex_row(model.u_mean)}",
        f"normalization.u_std: {_hex_row(model.u_std)}",
    ]
    params = list(model.named_parameters())
    lines.append(f"arrays: {len(params)}")
    for name, param in params:
        array = param.detach().numpy()
        lines.append(f"array {name} {' '.join(str(s) for s in array.shape)}")
        for row in array.reshape(array.shape[0], -1):
            lines.append(_hex_row(row))
    lines.append("end")
    return "\n".join(lines) + "\n"


def save_model(model: SurrogateModel, path: str) -> str:
    """
    Write a bit-exact textual checkpoint

    Args:
        model: Model to save
        path: Output file

    Returns:
        The path written
    """
    with open(path, "w") as f:
        f.write(dumps_model(model))
    logger.info(f"Model saved to {path}")
    return path


def _stack_from_arrays(arrays: Dict[str, np.ndarray], prefix: str, activations: List[str]) -> DenseStack:
    sizes = []
    for i in range(len(activations)):
        key = f"cell.{prefix}.layers.{i}.linear.weight"
        if key not in arrays:
            raise CheckpointFormatError(f"missing array {key}")
        n_out, n_in = arrays[key].shape
        if sizes and sizes[-1] != n_in:
            raise CheckpointFormatError(f"shape chain broken at {key}")
        if not sizes:
            sizes.append(n_in)
        sizes.append(n_out)
    return DenseStack(sizes, activations)


def loads_model(text: str) -> SurrogateModel:
    lines = text.split("\n")
    if not lines or lines[-1] != "" or len(lines) < 2 or lines[-2] != "end":
        raise CheckpointFormatError("checkpoint is truncated (missing end marker)")
    header: Dict[str, str] = {}
    pos = 0
    while pos < len(lines) and not lines[pos].startswith("array "):
        key, sep, value = lines[pos].partition(":")
        if not sep:
            raise CheckpointFormatError(f"malformed header line {pos + 1}: {lines[pos]!r}")
        header[key.strip()] = value.strip()
        pos += 1
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointFormatError("not a surrogate checkpoint")
    if header.get("version") != str(CHECKPOINT_VERSION):
        raise CheckpointVersionError(f"unsupported checkpoint version {header.get('version')}")
    try:
        dims = {key: int(header[key]) for key in ("M", "N", "d", "h_dim", "p", "m", "arrays")}
        acts = {key: header[f"{key}.activations"].split(",") for key in ("latent", "control", "output")}
        norm = {key: _parse_hex_row(header[f"normalization.{key}"]) for key in ("z_mean", "z_std", "u_mean", "u_std")}
    except (KeyError, ValueError) as e:
        raise CheckpointFormatError(f"incomplete checkpoint header: {e}") from None

    arrays: Dict[str, np.ndarray] = {}
    for _ in range(dims["arrays"]):
        if pos >= len(lines) or not lines[pos].startswith("array "):
            raise CheckpointFormatError(f"expected array header at line {pos + 1}")
        parts = lines[pos].split()
        name, shape = parts[1], tuple(int(s) for s in parts[2:])
        rows = shape[0] if shape else 1
        body = lines[pos + 1:pos + 1 + rows]
        values = [v for row in body for v in _parse_hex_row(row)]
        if len(body) != rows or len(values) != int(np.prod(shape)):
            raise CheckpointFormatError(f"array {name} does not match its shape {shape}")
        arrays[name] = np.array(values, dtype=float).reshape(shape)
        pos += 1 + rows
    if lines[pos:] != ["end", ""]:
        raise CheckpointFormatError("unexpected content after the arrays")

    try:
        cell = Cell(
            _stack_from_arrays(arrays, "latent", acts["latent"]),
            _stack_from_arrays(arrays, "control", acts["control"]),
            _stack_from_arrays(arrays, "output", acts["output"]),
        )
        model = SurrogateModel(cell, dims["p"], dims["m"], dims["M"], dims["N"], dims["d"])
    except (DimensionError, ValueError) as e:
        raise CheckpointFormatError(f"inconsistent checkpoint shapes: {e}") from None
    if model.h_dim != dims["h_dim"]:
        raise CheckpointFormatError(f"latent size {model.h_dim} differs from header h_dim={dims['h_dim']}")
    expected = dict(model.named_parameters())
    if set(expected) != set(arrays):
        raise CheckpointFormatError("checkpoint arrays do not match the architecture")
    with torch.no_grad():
        for name, param in expected.items():
            if tuple(param.shape) != arrays[name].shape:
                raise CheckpointFormatError(f"array {name} has shape {arrays[name].shape}, expected {tuple(param.shape)}")
            param.copy_(torch.as_tensor(arrays[name]))
    try:
        model.set_normalization(norm["z_mean"], norm["z_std"], norm["u_mean"], norm["u_std"])
    except RuntimeError as e:
        raise CheckpointFormatError(f"normalization statistics have the wrong size: {e}") from None
    return model


def load_model(path: str) -> SurrogateModel:
    """Read a checkpoint written by save_model"""
    with open(path) as f:
        model = loads_model(f.read())
    logger.info(f"Model loaded from {path}")
    return model


def fingerprint(model: SurrogateModel) -> str:
    """SHA-256 of the checkpoint text; equal iff weights and metadata are bitwise equal"""
    return hashlib.sha256(dumps_model(model).encode()).hexdigest()


def file_sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()
