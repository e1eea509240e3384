"""
Data Generation Module for SurrogateMPC
Excitation signals, trajectory collection, symmetrization and windowing of
training data
"""

import logging
import math
import os
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.interpolate import CubicSpline

from core import (DimensionError, TimeSeries, WindowIndexError, history_length,
                  read_key_values, write_key_values)
from plants import Plant

logger = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# Excitation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ExcitationSpec:
    """Random anchors every hold_s seconds, spline-interpolated onto the dt grid"""

    duration_s: float
    seed: int = 0
    hold_s: float = 0.5
    u_min: float = -2.0
    u_max: float = 2.0
    dt: float = 0.1
    channels: int = 1

    def validate(self) -> List[str]:
        problems = []
        if not self.dt > 0:
            problems.append(f"excitation dt must be positive, got {self.dt}")
            return problems
        ratio = self.hold_s / self.dt
        if self.hold_s <= 0 or not math.isclose(ratio, round(ratio), rel_tol=1e-9):
            problems.append(f"hold_s={self.hold_s} is not an integer multiple of dt={self.dt}")
        if self.duration_s < self.hold_s:
            problems.append(f"duration_s={self.duration_s} is shorter than hold_s={self.hold_s}")
        if not self.u_min < self.u_max:
            problems.append(f"excitation bounds [{self.u_min}, {self.u_max}] are not ordered")
        if self.channels < 1:
            problems.append("excitation needs at least one channel")
        return problems


@dataclass(frozen=True)
class ControlSignal:
    """Control-only schedule on the lag grid, shape (n, m)"""

    u: np.ndarray
    dt: float
    anchor_stride: int
    anchors: np.ndarray

    def __len__(self) -> int:
        return self.u.shape[0]


def generate_excitation(spec: ExcitationSpec) -> ControlSignal:
    """
    Draw a smooth random control signal

    Uniform anchors are drawn per channel every hold_s seconds, interpolated with a
    natural cubic spline onto the dt grid and clamped to the bounds. Anchor samples
    keep their drawn values exactly.

    Args:
        spec: ExcitationSpec

    Returns:
        ControlSignal with round(duration_s/dt) samples
    """
    problems = spec.validate()
    if problems:
        raise ValueError("; ".join(problems))
    n = int(round(spec.duration_s / spec.dt))
    stride = int(round(spec.hold_s / spec.dt))
    n_anchors = (n - 1) // stride + 1
    # one extra anchor so the last grid point is never the spline's right end
    rng = np.random.default_rng(spec.seed)
    anchors = rng.uniform(spec.u_min, spec.u_max, size=(n_anchors + 1, spec.channels))
    anchor_idx = np.arange(n_anchors + 1) * stride
    grid = np.arange(n)
    if stride == 1:
        u = anchors[:n].copy()
    else:
        spline = CubicSpline(anchor_idx * spec.dt, anchors, bc_type="natural", axis=0)
        u = np.clip(spline(grid * spec.dt), spec.u_min, spec.u_max)
        u[anchor_idx[:n_anchors]] = anchors[:n_anchors]
    return ControlSignal(u=u, dt=spec.dt, anchor_stride=stride, anchors=anchors[:n_anchors])


def collect_trajectory(plant: Plant, excitation: Union[ControlSignal, np.ndarray], y0: np.ndarray,
                       dt: Optional[float] = None) -> TimeSeries:
    """
    Record (observe(y_i), u_i) while driving the plant with zero-order-held controls

    Args:
        plant: Plant to drive
        excitation: ControlSignal or raw (n, m) control array
        y0: Initial state
        dt: Lag time, required when excitation is a raw array

    Returns:
        TimeSeries with one sample per control
    """
    if isinstance(excitation, ControlSignal):
        controls, dt = excitation.u, excitation.dt if dt is None else dt
        if not math.isclose(dt, excitation.dt):
            raise ValueError(f"excitation dt={excitation.dt} differs from lag time {dt}")
    else:
        controls = np.asarray(excitation, dtype=float)
        if controls.ndim == 1:
            controls = controls.reshape(-1, 1)
        if dt is None:
            raise ValueError("dt is required for a raw control array")
    y = np.asarray(y0, dtype=float)
    if not np.all(np.isfinite(y)):
        raise ValueError("initial state must be finite")
    observations = np.empty((len(controls), plant.p))
    for i, u in enumerate(controls):
        observations[i] = plant.observe(y)
        y = plant.step(y, u, dt, t=i * dt)
    return TimeSeries(observations, controls, dt)


# --------------------------------------------------------------------------
# Symmetry
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SymmetryMap:
    """Signed channel permutations: u_hat[i] = u_sign[i]*u[u_perm[i]], same for z"""

    u_perm: Tuple[int, ...]
    u_sign: Tuple[float, ...]
    z_perm: Tuple[int, ...]
    z_sign: Tuple[float, ...]

    def __post_init__(self):
        for perm, sign, name in ((self.u_perm, self.u_sign, "u"), (self.z_perm, self.z_sign, "z")):
            if sorted(perm) != list(range(len(perm))) or len(sign) != len(perm):
                raise ValueError(f"{name} map is not a signed permutation")
            for i, j in enumerate(perm):
                if perm[j] != i or sign[i] * sign[j] != 1.0:
                    raise ValueError(f"{name} map is not an involution")

    @classmethod
    def for_plant(cls, plant: Plant) -> Optional["SymmetryMap"]:
        symmetry = plant.observation_symmetry()
        if symmetry is None:
            return None
        u_perm, u_sign, z_perm, z_sign = symmetry
        return cls(tuple(u_perm), tuple(u_sign), tuple(z_perm), tuple(z_sign))

    def apply_u(self, u: np.ndarray) -> np.ndarray:
        return np.asarray(u)[..., list(self.u_perm)] * np.asarray(self.u_sign)

    def apply_z(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z)[..., list(self.z_perm)] * np.asarray(self.z_sign)

    def apply(self, series: TimeSeries) -> TimeSeries:
        if series.m != len(self.u_perm) or series.p != len(self.z_perm):
            raise DimensionError(
                f"symmetry map is for (p={len(self.z_perm)}, m={len(self.u_perm)}), "
                f"data has (p={series.p}, m={series.m})"
            )
        return TimeSeries(self.apply_z(series.z), self.apply_u(series.u), series.dt, series.t0)


def symmetrize(data: TimeSeries, sym: SymmetryMap) -> Tuple[TimeSeries, TimeSeries]:
    """Return the original episode and its mirror image; sample count doubles"""
    return data, sym.apply(data)


def symmetrize_episodes(episodes: Sequence[TimeSeries], sym: Optional[SymmetryMap]) -> List[TimeSeries]:
    if sym is None:
        return list(episodes)
    doubled: List[TimeSeries] = []
    for episode in episodes:
        doubled.extend(symmetrize(episode, sym))
    return doubled


# --------------------------------------------------------------------------
# Windowing
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class WindowedDataset:
    """
    Training samples for an (M, N, d) surrogate.

    For each sample: z_hist/u_hist hold the M+2d+2 pairs ending at the anchor
    (u_hist[-1] is the first decoder control), controls holds the N decoder
    controls and targets the N observations after the anchor.
    """

    z_hist: np.ndarray
    u_hist: np.ndarray
    controls: np.ndarray
    targets: np.ndarray
    M: int
    N: int
    d: int

    def __len__(self) -> int:
        return self.z_hist.shape[0]

    @property
    def p(self) -> int:
        return self.z_hist.shape[2]

    @property
    def m(self) -> int:
        return self.u_hist.shape[2]

    def subset(self, index) -> "WindowedDataset":
        return WindowedDataset(self.z_hist[index], self.u_hist[index], self.controls[index],
                               self.targets[index], self.M, self.N, self.d)

    def truncate_horizon(self, N: int) -> "WindowedDataset":
        """Same anchors with only the first N decoder steps"""
        if not 1 <= N <= self.N:
            raise ValueError(f"cannot truncate horizon {self.N} to {N}")
        return WindowedDataset(self.z_hist, self.u_hist, self.controls[:, :N], self.targets[:, :N],
                               self.M, N, self.d)

    @staticmethod
    def concatenate(parts: Sequence["WindowedDataset"]) -> "WindowedDataset":
        parts = [part for part in parts if len(part)]
        if not parts:
            raise ValueError("no windows to concatenate")
        first = parts[0]
        return WindowedDataset(
            np.concatenate([x.z_hist for x in parts]), np.concatenate([x.u_hist for x in parts]),
            np.concatenate([x.controls for x in parts]), np.concatenate([x.targets for x in parts]),
            first.M, first.N, first.d,
        )


def split_windows(data: TimeSeries, M: int, N: int, d: int) -> WindowedDataset:
    """
    Slice one episode into every admissible training window

    Args:
        data: Episode
        M: Encoder length
        N: Decoder length
        d: Delay count

    Returns:
        WindowedDataset with len(data) - (M + 2d + 1 + N) samples
    """
    if M < 1 or N < 1 or d < 0:
        raise ValueError(f"invalid window sizes M={M}, N={N}, d={d}")
    L = history_length(M, d)
    count = len(data) - (M + 2 * d + 1 + N)
    if count < 1:
        raise WindowIndexError(f"series of length {len(data)} is too short for M={M}, N={N}, d={d} "
                               f"(needs {L + N})")
    starts = np.arange(count)
    hist_idx = starts[:, None] + np.arange(L)[None, :]
    ctrl_idx = starts[:, None] + (L - 1) + np.arange(N)[None, :]
    target_idx = starts[:, None] + L + np.arange(N)[None, :]
    return WindowedDataset(data.z[hist_idx], data.u[hist_idx], data.u[ctrl_idx], data.z[target_idx], M, N, d)


def windows_from_episodes(episodes: Iterable[TimeSeries], M: int, N: int, d: int) -> WindowedDataset:
    """Window each episode on its own so no sample straddles an episode boundary"""
    parts = []
    for episode in episodes:
        if len(episode) - (M + 2 * d + 1 + N) < 1:
            logger.warning(f"skipping episode of {len(episode)} samples: too short for M={M}, N={N}, d={d}")
            continue
        parts.append(split_windows(episode, M, N, d))
    if not parts:
        raise WindowIndexError("no episode is long enough to produce a training window")
    return WindowedDataset.concatenate(parts)


def train_validation_split(episodes: Sequence[TimeSeries], validation_fraction: float = 0.1
                           ) -> Tuple[List[TimeSeries], List[TimeSeries]]:
    """Hold out the final fraction of each episode, keeping temporal order"""
    train, validation = [], []
    for episode in episodes:
        n_val = int(round(len(episode) * validation_fraction))
        if n_val <= 0 or n_val >= len(episode):
            train.append(episode)
            continue
        train.append(episode.slice(0, len(episode) - n_val))
        validation.append(episode.slice(len(episode) - n_val))
    return train, validation


def take_fraction(episodes: Sequence[TimeSeries], fraction: float) -> List[TimeSeries]:
    """Leading fraction of every episode (at least one sample each)"""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    return [episode.slice(0, max(1, int(round(len(episode) * fraction)))) for episode in episodes]


# --------------------------------------------------------------------------
# Episode files
# --------------------------------------------------------------------------

def save_episode(series: TimeSeries, path: str, metadata: Optional[Dict[str, object]] = None) -> str:
    """
    Write an episode CSV and its key:value sidecar (<path>.meta)

    Args:
        series: Episode
        path: CSV path
        metadata: Seed, excitation spec, plant config, ...

    Returns:
        The CSV path
    """
    series.to_csv(path)
    with open(path + ".meta", "w") as f:
        f.write(write_key_values(metadata or {}))
    return path


def load_episode(path: str) -> Tuple[TimeSeries, Dict[str, str]]:
    series = TimeSeries.read_csv(path)
    meta_path = path + ".meta"
    metadata: Dict[str, str] = {}
    if os.path.exists(meta_path):
        with open(meta_path) as f:
            metadata = read_key_values(f.read())
    return series, metadata


def excitation_metadata(spec: ExcitationSpec) -> Dict[str, object]:
    return {f"excitation.{key}": value for key, value in asdict(spec).items()}
