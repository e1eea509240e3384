"""
Online Module for SurrogateMPC
Closed-loop control with periodic surrogate retraining on the measurements
collected since the last update
"""

import copy
import logging
import math
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional

import numpy as np
import pandas as pd

from core import (MetricsReport, ReferenceTrajectory, TimeSeries, TrainingDivergenceError, WindowIndexError,
                  compute_metrics)
from datagen import SymmetryMap, symmetrize_episodes, windows_from_episodes
from mpc import DEFAULT_WARMUP_S, ClosedLoop, HorizonSpec, SOLVE_COLUMNS, loop_metrics, step_count
from plants import Plant
from surrogate import SurrogateModel, fingerprint
from training import fine_tune

logger = logging.getLogger(__name__)

INTERVAL_COLUMNS = ["interval", "e_mean", "e_max", "control_cost", "train_loss_final"]


class BufferPolicy(Enum):
    """Which measurements feed an update"""
    INTERVAL_ONLY = "interval-only"
    SLIDING_AGGREGATE = "sliding-aggregate"


@dataclass(frozen=True)
class OnlineSpec:
    """
    Update schedule for online learning.

    epochs=0 disables updates. With the sliding-aggregate policy the last
    aggregate_intervals intervals are used instead of only the newest one.
    """

    interval_s: float = 25.0
    epochs: int = 10
    learning_rate: float = 2e-4
    batch_size: int = 64
    symmetrize: bool = True
    symmetry: Optional[SymmetryMap] = None
    buffer_policy: BufferPolicy = BufferPolicy.INTERVAL_ONLY
    aggregate_intervals: int = 4
    clip_norm: float = 5.0
    seed: int = 0

    def validate(self, dt: Optional[float] = None) -> List[str]:
        problems = []
        if not self.interval_s > 0:
            problems.append(f"online interval_s must be positive, got {self.interval_s}")
        elif dt is not None:
            ratio = self.interval_s / dt
            if not math.isclose(ratio, round(ratio), rel_tol=1e-9):
                problems.append(f"online interval_s={self.interval_s} is not a multiple of dt={dt}")
        if self.epochs < 0:
            problems.append(f"online epochs must be >= 0, got {self.epochs}")
        if not self.learning_rate > 0 or self.batch_size < 1:
            problems.append("online learning_rate must be positive and batch_size >= 1")
        if self.aggregate_intervals < 1:
            problems.append("online aggregate_intervals must be >= 1")
        return problems

    @property
    def enabled(self) -> bool:
        return self.epochs > 0


@dataclass
class IntervalReport:
    """Metrics of one update interval and the training loss of the update that followed it"""
    interval: int
    metrics: MetricsReport
    train_loss_final: float
    updated: bool
    model_hash: str


@dataclass
class OnlineResult:
    series: TimeSeries
    intervals: List[IntervalReport]
    metrics: Optional[MetricsReport]
    solves: pd.DataFrame
    model: SurrogateModel
    failed_updates: int = 0
    feasibility_violations: int = 0
    descent_violations: int = 0

    def interval_frame(self) -> pd.DataFrame:
        rows = [dict(interval=r.interval, e_mean=r.metrics.e_mean, e_max=r.metrics.e_max,
                     control_cost=r.metrics.control_cost, train_loss_final=r.train_loss_final)
                for r in self.intervals]
        return pd.DataFrame(rows, columns=INTERVAL_COLUMNS)


def interval_metrics(series: TimeSeries, ref: ReferenceTrajectory, start: int, stop: int) -> MetricsReport:
    """
    Metrics of one interval over steps start+1..stop-1, normalized by that interval's own length

    The first sample is the warm-up, so the sum has exactly T/dt terms and e_mean
    stays a mean (never above e_max).
    """
    if stop - start < 3:
        raise ValueError(f"interval {start}..{stop} needs at least three samples")
    part = series.slice(start, stop)
    sub_ref = ReferenceTrajectory(ref.targets[start:stop], ref.mask, ref.dt)
    return compute_metrics(part, sub_ref, (len(part) - 1) * part.dt, part.dt)


def _update(model: SurrogateModel, episodes: List[TimeSeries], ospec: OnlineSpec, symmetry: Optional[SymmetryMap],
            interval: int) -> Optional[tuple]:
    data = symmetrize_episodes(episodes, symmetry)
    try:
        windows = windows_from_episodes(data, model.M, model.N, model.d)
    except WindowIndexError as e:
        logger.warning(f"Interval {interval}: no training windows ({e}); keeping the current model")
        return None
    candidate = copy.deepcopy(model)
    try:
        result = fine_tune(candidate, windows, ospec.epochs, ospec.learning_rate, ospec.batch_size,
                           ospec.clip_norm, seed=ospec.seed + interval)
    except TrainingDivergenceError as e:
        logger.warning(f"Interval {interval}: retraining diverged ({e}); keeping the previous model")
        return None
    logger.info(f"Interval {interval}: model updated on {sum(len(x) for x in data)} points "
                f"({len(windows)} windows), final loss {result.final_train_loss:.6g}")
    return candidate, result.final_train_loss


def run_online(plant: Plant, model: SurrogateModel, ref: ReferenceTrajectory, spec: HorizonSpec,
               ospec: OnlineSpec, y0: np.ndarray, duration: float,
               warmup: float = DEFAULT_WARMUP_S) -> OnlineResult:
    """
    Closed loop with the surrogate retrained at every interval boundary

    Control pauses while the model is updated; the model is constant inside an
    interval. The caller's model is never modified.

    Args:
        plant: Plant
        model: Initial surrogate
        ref: Reference covering the run
        spec: HorizonSpec
        ospec: OnlineSpec
        y0: Initial plant state
        duration: Seconds, at least two intervals
        warmup: Seconds excluded from the whole-run metrics

    Returns:
        OnlineResult with the trajectory and one IntervalReport per interval
    """
    problems = ospec.validate(spec.dt)
    if problems:
        raise ValueError("; ".join(problems))
    steps = step_count(duration, spec.dt)
    per_interval = int(round(ospec.interval_s / spec.dt))
    if per_interval < 3:
        raise ValueError(f"online interval_s={ospec.interval_s} must span at least three samples")
    if steps < 2 * per_interval:
        raise ValueError(f"duration {duration} s is shorter than two {ospec.interval_s} s intervals")
    if len(ref) < steps:
        raise ValueError(f"reference covers {len(ref)} steps, run needs {steps}")

    symmetry = None
    if ospec.symmetrize:
        symmetry = ospec.symmetry or SymmetryMap.for_plant(plant)
        if symmetry is None:
            logger.warning(f"{plant.kind.value} has no known symmetry; updates use unsymmetrized data")

    current = copy.deepcopy(model)
    loop = ClosedLoop(plant, current, ref, spec, y0)
    buffer = deque(maxlen=ospec.aggregate_intervals
                   if ospec.buffer_policy is BufferPolicy.SLIDING_AGGREGATE else 1)
    reports: List[IntervalReport] = []
    failed = 0
    # a partial trailing interval is folded into the last full one
    n_intervals = steps // per_interval

    for k in range(n_intervals):
        start = k * per_interval
        stop = steps if k == n_intervals - 1 else start + per_interval
        model_hash = fingerprint(loop.model)
        for _ in range(start, stop):
            loop.advance()
        buffer.append(loop.trajectory(start, stop))
        train_loss, updated = float("nan"), False
        if ospec.enabled and stop < steps:
            outcome = _update(loop.model, list(buffer), ospec, symmetry, k)
            if outcome is None:
                failed += 1
            else:
                loop.model, train_loss = outcome
                updated = True
        reports.append(IntervalReport(k, interval_metrics(loop.trajectory(), ref, start, stop),
                                      train_loss, updated, model_hash))
        logger.info(f"Interval {k}: e_mean={reports[-1].metrics.e_mean:.6g}, "
                    f"control_cost={reports[-1].metrics.control_cost:.6g}")

    series = loop.trajectory()
    return OnlineResult(series, reports, loop_metrics(series, ref, warmup),
                        pd.DataFrame(loop.solve_log, columns=SOLVE_COLUMNS), loop.model, failed,
                        loop.feasibility_violations, loop.descent_violations)
