"""
Core Module for SurrogateMPC
Domain types shared by every stage: time series, delay windows, references,
tracking metrics and the error hierarchy
"""

import io
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd


# --------------------------------------------------------------------------
# Errors
# --------------------------------------------------------------------------

class SurrogateMPCError(Exception):
    """Base class for every error raised by this project"""


class ConfigError(SurrogateMPCError, ValueError):
    """Invalid or inconsistent experiment configuration"""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class DimensionError(SurrogateMPCError, ValueError):
    """Array shapes do not agree"""


class WindowIndexError(SurrogateMPCError, IndexError):
    """A delay window or sample range falls outside the series"""


class PlantDivergenceError(SurrogateMPCError):
    """Plant integration produced a non-finite state"""

    def __init__(self, message: str, time: float):
        self.time = time
        super().__init__(f"{message} (t={time:.6g} s)")


class TrainingDivergenceError(SurrogateMPCError):
    """Training loss became non-finite"""

    def __init__(self, stage: str, epoch: int, loss: float):
        self.stage = stage
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"training diverged in stage '{stage}' at epoch {epoch} (loss={loss})")


class SolverError(SurrogateMPCError):
    """The horizon optimizer could not produce a usable result"""


class CheckpointError(SurrogateMPCError):
    """Checkpoint could not be read"""


class CheckpointFormatError(CheckpointError):
    """Malformed or truncated checkpoint file"""


class CheckpointVersionError(CheckpointError):
    """Checkpoint written by an unsupported format version"""


# --------------------------------------------------------------------------
# Time series
# --------------------------------------------------------------------------

def _as_matrix(values, name: str) -> np.ndarray:
    array = np.array(values, dtype=float)
    if array.ndim == 1:
        array = array.reshape(-1, 1)
    if array.ndim != 2:
        raise DimensionError(f"{name} must be a 2-D array, got shape {array.shape}")
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class TimeSeries:
    """
    Uniformly sampled record of aligned (observation, control) pairs.

    Sample i lives at time t0 + i*dt; z has shape (n, p) and u has shape (n, m).
    u[i] is the control held over [t_i, t_i + dt).
    """

    z: np.ndarray
    u: np.ndarray
    dt: float
    t0: float = 0.0

    def __post_init__(self):
        z = _as_matrix(self.z, "z")
        u = _as_matrix(self.u, "u")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "u", u)
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ValueError(f"dt must be positive, got {self.dt}")
        if len(z) < 1:
            raise ValueError("a time series needs at least one sample")
        if len(z) != len(u):
            raise DimensionError(f"z has {len(z)} samples but u has {len(u)}")
        if z.shape[1] < 1 or u.shape[1] < 1:
            raise DimensionError("observation and control dimensions must be at least 1")

    def __len__(self) -> int:
        return self.z.shape[0]

    @property
    def p(self) -> int:
        return self.z.shape[1]

    @property
    def m(self) -> int:
        return self.u.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self))

    def slice(self, start: int, stop: Optional[int] = None) -> "TimeSeries":
        """Sub-series of samples [start, stop) with t0 shifted accordingly"""
        stop = len(self) if stop is None else stop
        if not 0 <= start < stop <= len(self):
            raise WindowIndexError(f"slice [{start}, {stop}) outside series of length {len(self)}")
        return TimeSeries(self.z[start:stop], self.u[start:stop], self.dt, self.t0 + start * self.dt)

    def to_frame(self) -> pd.DataFrame:
        data = {"t": self.times}
        for j in range(self.p):
            data[f"z_{j + 1}"] = self.z[:, j]
        for j in range(self.m):
            data[f"u_{j + 1}"] = self.u[:, j]
        return pd.DataFrame(data)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "TimeSeries":
        z_cols = sorted((c for c in frame.columns if c.startswith("z_")), key=lambda c: int(c[2:]))
        u_cols = sorted((c for c in frame.columns if c.startswith("u_")), key=lambda c: int(c[2:]))
        if "t" not in frame.columns or not z_cols or not u_cols:
            raise ValueError("time series CSV needs columns t, z_1.., u_1..")
        t = frame["t"].to_numpy(dtype=float)
        if len(t) > 1:
            dt = float(np.round((t[-1] - t[0]) / (len(t) - 1), 12))
            if not np.allclose(np.diff(t), dt, rtol=1e-6, atol=1e-9):
                raise ValueError("time column is not uniformly spaced")
        else:
            raise ValueError("cannot infer dt from a single-sample CSV")
        return cls(frame[z_cols].to_numpy(float), frame[u_cols].to_numpy(float), dt, float(t[0]))

    def to_csv(self, path: str, extra: Optional[pd.DataFrame] = None) -> str:
        """
        Save the series as CSV (header t,z_1..z_p,u_1..u_m)

        Args:
            path: Output file
            extra: Optional columns appended to the right (e.g. ref_1..ref_J)

        Returns:
            The path written
        """
        frame = self.to_frame()
        if extra is not None:
            frame = pd.concat([frame, extra.reset_index(drop=True)], axis=1)
        frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
        return path

    @classmethod
    def read_csv(cls, path: str) -> "TimeSeries":
        return cls.from_frame(pd.read_csv(path, float_precision="round_trip"))


# --------------------------------------------------------------------------
# Delay windows
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DelayWindow:
    """Per-cell input: 2d+2 (z, u) pairs ending at k plus the d+1 most recent controls"""

    z_history: np.ndarray
    u_history: np.ndarray
    u_recent: np.ndarray
    d: int

    def __post_init__(self):
        length = 2 * self.d + 2
        if self.d < 0:
            raise ValueError("d must be nonnegative")
        if self.z_history.shape[0] != length or self.u_history.shape[0] != length:
            raise DimensionError(f"zu_history must hold {length} pairs")
        if self.u_recent.shape[0] != self.d + 1:
            raise DimensionError(f"u_recent must hold {self.d + 1} controls")
        if not np.array_equal(self.u_recent, self.u_history[-(self.d + 1):]):
            raise ValueError("u_recent must be the suffix of the controls in zu_history")

    @property
    def zu_history(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        return list(zip(self.z_history, self.u_history))

    def flat_history(self) -> np.ndarray:
        """Row-major [z_j, u_j] concatenation over the pairs, oldest first"""
        return np.concatenate([self.z_history, self.u_history], axis=1).ravel()


def window_length(d: int) -> int:
    """Number of (z, u) pairs a cell consumes"""
    return 2 * d + 2


def history_length(M: int, d: int) -> int:
    """Samples needed before the first prediction: M encoder windows plus one decoder window"""
    return M + 2 * d + 2


def build_delay_window(series: TimeSeries, k: int, d: int) -> DelayWindow:
    """
    Build the delay window ending at sample k

    Args:
        series: Source series
        k: Index of the newest pair
        d: Delay count

    Returns:
        DelayWindow with pairs k-2d-1..k and controls k-d..k
    """
    if d < 0:
        raise ValueError("d must be nonnegative")
    first = k - 2 * d - 1
    if first < 0 or k >= len(series):
        raise WindowIndexError(
            f"window ending at k={k} with d={d} needs indices {first}..{k}, series has {len(series)} samples"
        )
    z_hist = series.z[first:k + 1].copy()
    u_hist = series.u[first:k + 1].copy()
    return DelayWindow(z_hist, u_hist, u_hist[-(d + 1):].copy(), d)


# --------------------------------------------------------------------------
# References and metrics
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ReferenceTrajectory:
    """Per-step targets for the observation channels selected by mask (0-based)"""

    targets: np.ndarray
    mask: Tuple[int, ...]
    dt: float

    def __post_init__(self):
        targets = _as_matrix(self.targets, "targets")
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "mask", tuple(int(i) for i in self.mask))
        if not self.mask:
            raise ValueError("reference mask must select at least one channel")
        if len(set(self.mask)) != len(self.mask) or min(self.mask) < 0:
            raise ValueError(f"invalid reference mask {self.mask}")
        if targets.shape[1] != len(self.mask):
            raise DimensionError(f"targets have {targets.shape[1]} columns for {len(self.mask)} tracked channels")

    def __len__(self) -> int:
        return self.targets.shape[0]

    @property
    def J(self) -> int:
        return len(self.mask)

    def check_channels(self, p: int):
        if max(self.mask) >= p:
            raise DimensionError(f"reference mask {self.mask} invalid for {p} observation channels")

    def window(self, start: int, count: int) -> np.ndarray:
        """Targets start..start+count-1, repeating the final target past the end"""
        idx = np.minimum(np.arange(start, start + count), len(self) - 1)
        return self.targets[idx]

    @classmethod
    def piecewise_constant(cls, segments: Sequence[Tuple[Sequence[float], float]], dt: float,
                           mask: Sequence[int]) -> "ReferenceTrajectory":
        """
        Build a reference from (values, duration) segments

        Args:
            segments: Sequence of (per-channel values or scalar, duration in seconds)
            dt: Lag time
            mask: Tracked observation channels

        Returns:
            ReferenceTrajectory holding every segment back to back
        """
        rows = []
        for values, duration in segments:
            steps = int(round(duration / dt))
            if steps <= 0 or not math.isclose(steps * dt, duration, rel_tol=1e-9, abs_tol=1e-12):
                raise ValueError(f"segment duration {duration} is not a positive multiple of dt={dt}")
            vec = np.broadcast_to(np.asarray(values, dtype=float), (len(mask),))
            rows.append(np.tile(vec, (steps, 1)))
        return cls(np.vstack(rows), tuple(mask), dt)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({f"ref_{j + 1}": self.targets[:, j] for j in range(self.J)})


@dataclass(frozen=True)
class MetricsReport:
    """Tracking error and control cost over a run"""

    e_mean: float
    e_max: float
    control_cost: float
    warmup_s: float
    horizon_T: float

    def to_text(self) -> str:
        lines = [f"{name}: {float(getattr(self, name)).hex()}  # {getattr(self, name):.10g}"
                 for name in ("e_mean", "e_max", "control_cost", "warmup_s", "horizon_T")]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        values: Dict[str, float] = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition(":")
            values[key.strip()] = float.fromhex(value.strip())
        return cls(**values)

    def as_dict(self) -> Dict[str, float]:
        return {"e_mean": self.e_mean, "e_max": self.e_max, "control_cost": self.control_cost}


def _step_index(seconds: float, dt: float, name: str) -> int:
    index = int(round(seconds / dt))
    if not math.isclose(index * dt, seconds, rel_tol=1e-9, abs_tol=1e-12):
        raise ValueError(f"{name}={seconds} is not a multiple of dt={dt}")
    return index


def tracking_errors(achieved: TimeSeries, ref: ReferenceTrajectory) -> np.ndarray:
    """Per-step mean over tracked channels of the squared deviation"""
    count = min(len(achieved), len(ref))
    tracked = achieved.z[:count][:, list(ref.mask)]
    return np.mean((tracked - ref.targets[:count]) ** 2, axis=1)


def compute_metrics(achieved: TimeSeries, ref: ReferenceTrajectory, T: float, warmup: float) -> MetricsReport:
    """
    Tracking metrics over the steps warmup/dt..T/dt (inclusive)

    e_mean keeps the dt/T normalization even though the warm-up steps are left out
    of the sum; e_max is the worst per-step error over the same range.

    Args:
        achieved: Closed-loop trajectory
        ref: Reference on the same time grid
        T: Horizon in seconds; T/dt must be a valid sample index
        warmup: Seconds excluded from the sums

    Returns:
        MetricsReport
    """
    if not math.isclose(achieved.dt, ref.dt, rel_tol=1e-12):
        raise DimensionError(f"trajectory dt={achieved.dt} differs from reference dt={ref.dt}")
    ref.check_channels(achieved.p)
    dt = achieved.dt
    first = _step_index(warmup, dt, "warmup")
    last = _step_index(T, dt, "T")
    if first < 0 or first >= last:
        raise WindowIndexError(f"empty summation range: warmup={warmup}, T={T}")
    if last >= len(achieved) or last >= len(ref):
        raise WindowIndexError(
            f"T/dt={last} exceeds trajectory ({len(achieved)}) or reference ({len(ref)}) length"
        )
    errors = tracking_errors(achieved.slice(first, last + 1),
                             ReferenceTrajectory(ref.targets[first:last + 1], ref.mask, dt))
    controls = achieved.u[first:last + 1]
    return MetricsReport(
        e_mean=float(dt / T * np.sum(errors)),
        e_max=float(np.max(errors)),
        control_cost=float(np.linalg.norm(controls.ravel())),
        warmup_s=float(warmup),
        horizon_T=float(T),
    )


def read_key_values(text: str) -> Dict[str, str]:
    """Parse a flat `key: value` block, ignoring blank lines and # comments"""
    result: Dict[str, str] = {}
    for line in io.StringIO(text):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, value = stripped.partition(":")
        if not sep:
            raise ValueError(f"expected 'key: value', got {stripped!r}")
        result[key.strip()] = value.strip()
    return result


def write_key_values(values: Dict[str, object]) -> str:
    return "".join(f"{key}: {value}\n" for key, value in values.items())
