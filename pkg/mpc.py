"""
MPC Module for SurrogateMPC
Receding-horizon control with the recurrent surrogate: horizon cost, bounded
quasi-Newton solve and the closed feedback loop against a plant
"""

import logging
import math
import time
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.optimize import minimize

from core import (DimensionError, MetricsReport, ReferenceTrajectory, TimeSeries, compute_metrics)
from datagen import collect_trajectory
from plants import Plant
from surrogate import SurrogateModel, tracking_value_and_grad

logger = logging.getLogger(__name__)

DEFAULT_WARMUP_S = 4.0


@dataclass(frozen=True)
class HorizonSpec:
    """Horizon length, weights, control box and inner-solver limits"""

    N: int = 5
    dt: float = 0.1
    alpha: float = 0.0
    beta: float = 0.01
    u_min: Tuple[float, ...] = (-2.0,)
    u_max: Tuple[float, ...] = (2.0,)
    max_iters: int = 50
    grad_tol: float = 1e-6

    def validate(self) -> List[str]:
        problems = []
        if self.N < 1:
            problems.append(f"horizon N must be at least 1, got {self.N}")
        if not self.dt > 0:
            problems.append(f"horizon dt must be positive, got {self.dt}")
        if self.alpha < 0 or self.beta < 0:
            problems.append("alpha and beta must be nonnegative")
        if len(self.u_min) != len(self.u_max):
            problems.append("u_min and u_max need the same number of channels")
        elif any(lo >= hi for lo, hi in zip(self.u_min, self.u_max)):
            problems.append(f"control bounds {self.u_min} .. {self.u_max} are not ordered")
        if self.max_iters < 0 or not self.grad_tol > 0:
            problems.append("max_iters must be >= 0 and grad_tol > 0")
        return problems

    def bounds(self, m: int) -> Tuple[np.ndarray, np.ndarray]:
        """Per-channel box, broadcasting a single-channel bound to m channels"""
        lo = np.broadcast_to(np.asarray(self.u_min, dtype=float), (m,)).copy()
        hi = np.broadcast_to(np.asarray(self.u_max, dtype=float), (m,)).copy()
        return lo, hi


class Phase(Enum):
    """Controller phase"""
    INITIALIZING = "initializing"
    ACTIVE = "active"


@dataclass
class ControllerState:
    """Measured history, previous control and warm start of a running loop"""

    history: deque
    u_prev: np.ndarray
    warm_start: np.ndarray
    step: int = 0
    phase: Phase = Phase.INITIALIZING

    @classmethod
    def initial(cls, length: int, spec: HorizonSpec, m: int) -> "ControllerState":
        lo, hi = spec.bounds(m)
        zero = np.clip(np.zeros(m), lo, hi)
        return cls(history=deque(maxlen=length), u_prev=zero,
                   warm_start=np.tile(zero, (spec.N, 1)))

    def history_series(self, z_now: np.ndarray, dt: float) -> TimeSeries:
        """Buffered pairs plus the current measurement; its control slot holds u_prev"""
        pairs = list(self.history)[1:] + [(z_now, self.u_prev)]
        return TimeSeries(np.array([z for z, _ in pairs]), np.array([u for _, u in pairs]), dt)


@dataclass
class SolveResult:
    """Outcome of one horizon optimization"""
    controls: np.ndarray
    cost: float
    warm_cost: float
    iterations: int
    fallback: bool
    elapsed_s: float
    message: str = ""


def mpc_cost(predicted: np.ndarray, ref_slice: np.ndarray, mask: Sequence[int], controls: np.ndarray,
             u_prev: np.ndarray, spec: HorizonSpec) -> float:
    """
    Horizon cost: tracking error plus control magnitude and variation penalties

    Args:
        predicted: (N, p) predicted observations z_1..z_N
        ref_slice: (N, J) targets for the tracked channels
        mask: Tracked observation channels
        controls: (N, m) planned controls u_0..u_{N-1}
        u_prev: Control applied in the previous step
        spec: HorizonSpec with alpha and beta

    Returns:
        Scalar cost
    """
    predicted = np.asarray(predicted, dtype=float)
    controls = np.asarray(controls, dtype=float).reshape(len(predicted), -1)
    ref_slice = np.asarray(ref_slice, dtype=float).reshape(len(predicted), len(mask))
    tracking = np.sum((predicted[:, list(mask)] - ref_slice) ** 2)
    return float(tracking) + _regularization(controls, np.asarray(u_prev, dtype=float), spec)[0]


def _regularization(controls: np.ndarray, u_prev: np.ndarray, spec: HorizonSpec) -> Tuple[float, np.ndarray]:
    variation = np.diff(np.vstack([u_prev.reshape(1, -1), controls]), axis=0)
    value = spec.alpha * np.sum(controls ** 2) + spec.beta * np.sum(variation ** 2)
    grad = 2.0 * spec.alpha * controls + 2.0 * spec.beta * variation
    grad[:-1] -= 2.0 * spec.beta * variation[1:]
    return float(value), grad


class _NonFiniteCost(Exception):
    pass


def solve_horizon(model: SurrogateModel, state: ControllerState, z_now: np.ndarray, ref_slice: np.ndarray,
                  mask: Sequence[int], spec: HorizonSpec) -> SolveResult:
    """
    Minimize the horizon cost over the box with L-BFGS-B

    The surrogate supplies the tracking term and its gradient by backpropagation
    through time; the penalties are differentiated analytically. The returned
    sequence is always inside the box and never costs more than the warm start.

    Args:
        model: Surrogate
        state: Active controller state (history buffer, u_prev, warm start)
        z_now: Current measurement
        ref_slice: (N, J) targets for steps 1..N
        mask: Tracked observation channels
        spec: HorizonSpec

    Returns:
        SolveResult
    """
    started = time.perf_counter()
    history = state.history_series(np.asarray(z_now, dtype=float), spec.dt)
    m = model.m
    lo, hi = spec.bounds(m)
    u_prev = np.asarray(state.u_prev, dtype=float)
    warm = np.clip(np.asarray(state.warm_start, dtype=float).reshape(spec.N, m), lo, hi)

    def objective(x):
        controls = x.reshape(spec.N, m)
        _, predicted, grad = tracking_value_and_grad(model, history, controls, ref_slice, mask)
        value = mpc_cost(predicted, ref_slice, mask, controls, u_prev, spec)
        grad = grad + _regularization(controls, u_prev, spec)[1]
        if not (math.isfinite(value) and np.all(np.isfinite(grad))):
            raise _NonFiniteCost(value)
        return value, grad.ravel()

    try:
        warm_cost, _ = objective(warm.ravel())
    except _NonFiniteCost as e:
        logger.warning(f"Non-finite cost at the warm start ({e}); keeping the warm start")
        return SolveResult(warm, float("inf"), float("inf"), 0, True, time.perf_counter() - started,
                           "non-finite warm-start cost")

    try:
        result = minimize(objective, warm.ravel(), jac=True, method="L-BFGS-B",
                          bounds=list(zip(np.tile(lo, spec.N), np.tile(hi, spec.N))),
                          options={"maxiter": spec.max_iters, "gtol": spec.grad_tol})
    except _NonFiniteCost as e:
        logger.warning(f"Non-finite cost during line search ({e}); falling back to the warm start")
        return SolveResult(warm, warm_cost, warm_cost, 0, True, time.perf_counter() - started,
                           "non-finite cost during line search")

    controls = np.clip(result.x.reshape(spec.N, m), lo, hi)
    try:
        cost, _ = objective(controls.ravel())
    except _NonFiniteCost:
        cost = float("inf")
    if cost > warm_cost:
        logger.debug(f"Solver ended above the warm start ({cost:.6g} > {warm_cost:.6g}); keeping the warm start")
        return SolveResult(warm, warm_cost, warm_cost, int(result.nit), True,
                           time.perf_counter() - started, "no descent")
    return SolveResult(controls, cost, warm_cost, int(result.nit), False, time.perf_counter() - started,
                       str(result.message))


@dataclass
class ClosedLoopResult:
    """Trajectory, metrics and per-step solver records of a closed-loop run"""
    series: TimeSeries
    metrics: Optional[MetricsReport]
    solves: pd.DataFrame
    feasibility_violations: int = 0
    descent_violations: int = 0

    @property
    def fallbacks(self) -> int:
        return int(self.solves["fallback"].sum()) if len(self.solves) else 0


SOLVE_COLUMNS = ["step", "iterations", "cost", "warm_cost", "fallback", "elapsed_s"]


class ClosedLoop:
    """
    Plant + surrogate controller stepped one lag time at a time.

    The first M+2d+2 steps apply u=0 while the history buffer fills. Afterwards
    each step solves the horizon problem, applies the first control and shifts
    the solution into the next warm start.
    """

    def __init__(self, plant: Plant, model: SurrogateModel, ref: ReferenceTrajectory, spec: HorizonSpec,
                 y0: np.ndarray):
        problems = spec.validate()
        if problems:
            raise ValueError("; ".join(problems))
        if model.p != plant.p or model.m != plant.m:
            raise DimensionError(f"model is (p={model.p}, m={model.m}), plant is (p={plant.p}, m={plant.m})")
        if not math.isclose(ref.dt, spec.dt):
            raise DimensionError(f"reference dt={ref.dt} differs from horizon dt={spec.dt}")
        ref.check_channels(plant.p)
        self.plant = plant
        self.model = model
        self.ref = ref
        self.spec = spec
        self.y = np.asarray(y0, dtype=float)
        self.lo, self.hi = spec.bounds(plant.m)
        self.state = ControllerState.initial(model.history_length, spec, plant.m)
        self.z_log: List[np.ndarray] = []
        self.u_log: List[np.ndarray] = []
        self.solve_log: List[dict] = []
        self.feasibility_violations = 0
        self.descent_violations = 0

    @property
    def steps_taken(self) -> int:
        return self.state.step

    def advance(self) -> np.ndarray:
        """Measure, choose a control, record the pair and step the plant; returns the control"""
        i = self.state.step
        z = self.plant.observe(self.y)
        if i < self.model.history_length:
            u = np.clip(np.zeros(self.plant.m), self.lo, self.hi)
        else:
            if self.state.phase is Phase.INITIALIZING:
                self.state.phase = Phase.ACTIVE
                logger.info(f"Controller active at step {i} (t={i * self.spec.dt:.3f} s)")
            result = solve_horizon(self.model, self.state, z, self.ref.window(i + 1, self.spec.N),
                                   self.ref.mask, self.spec)
            self._audit(i, result)
            u = result.controls[0].copy()
            self.state.warm_start = np.vstack([result.controls[1:], result.controls[-1:]])
        self.z_log.append(z)
        self.u_log.append(u)
        self.state.history.append((z, u))
        self.state.u_prev = u
        self.y = self.plant.step(self.y, u, self.spec.dt, t=i * self.spec.dt)
        self.state.step += 1
        return u

    def _audit(self, i: int, result: SolveResult):
        if np.any(result.controls < self.lo) or np.any(result.controls > self.hi):
            self.feasibility_violations += 1
            logger.error(f"Step {i}: solver returned a control outside the box")
        if result.cost > result.warm_cost:
            self.descent_violations += 1
            logger.error(f"Step {i}: solver cost {result.cost} above warm start {result.warm_cost}")
        if result.fallback and result.message != "no descent":
            logger.warning(f"Step {i}: solver fell back to the warm start ({result.message})")
        self.solve_log.append(dict(step=i, iterations=result.iterations, cost=result.cost,
                                   warm_cost=result.warm_cost, fallback=result.fallback,
                                   elapsed_s=result.elapsed_s))

    def trajectory(self, start: int = 0, stop: Optional[int] = None) -> TimeSeries:
        stop = len(self.z_log) if stop is None else stop
        return TimeSeries(np.array(self.z_log[start:stop]), np.array(self.u_log[start:stop]),
                          self.spec.dt, start * self.spec.dt)

    def result(self, warmup: float = DEFAULT_WARMUP_S) -> ClosedLoopResult:
        series = self.trajectory()
        return ClosedLoopResult(series, loop_metrics(series, self.ref, warmup),
                                pd.DataFrame(self.solve_log, columns=SOLVE_COLUMNS),
                                self.feasibility_violations, self.descent_violations)


def step_count(duration: float, dt: float) -> int:
    steps = int(round(duration / dt))
    if steps < 1 or not math.isclose(steps * dt, duration, rel_tol=1e-9):
        raise ValueError(f"duration {duration} is not a positive multiple of dt={dt}")
    return steps


def loop_metrics(series: TimeSeries, ref: ReferenceTrajectory, warmup: float = DEFAULT_WARMUP_S
                 ) -> Optional[MetricsReport]:
    """Metrics over a whole run, using the last recorded sample as T"""
    T = (len(series) - 1) * series.dt
    if warmup >= T:
        logger.warning(f"Run of {T:.3f} s is not longer than the {warmup} s warm-up; no metrics")
        return None
    return compute_metrics(series, ref, T, warmup)


def run_closed_loop(plant: Plant, model: SurrogateModel, ref: ReferenceTrajectory, spec: HorizonSpec,
                    y0: np.ndarray, duration: float, warmup: float = DEFAULT_WARMUP_S) -> ClosedLoopResult:
    """
    Run the surrogate controller against the plant

    Args:
        plant: Plant
        model: Surrogate with dimensions matching the plant
        ref: Reference covering the run
        spec: HorizonSpec
        y0: Initial plant state
        duration: Seconds; the trajectory has duration/dt samples
        warmup: Seconds excluded from the metrics

    Returns:
        ClosedLoopResult
    """
    steps = step_count(duration, spec.dt)
    if len(ref) < steps:
        raise ValueError(f"reference covers {len(ref)} steps, run needs {steps}")
    loop = ClosedLoop(plant, model, ref, spec, y0)
    for _ in range(steps):
        loop.advance()
    result = loop.result(warmup)
    logger.info(f"Closed loop finished: {steps} steps, {result.fallbacks} solver fallbacks"
                + (f", e_mean={result.metrics.e_mean:.6g}" if result.metrics else ""))
    return result


def run_uncontrolled(plant: Plant, ref: ReferenceTrajectory, spec: HorizonSpec, y0: np.ndarray,
                     duration: float, warmup: float = DEFAULT_WARMUP_S) -> ClosedLoopResult:
    """Baseline with u = 0 throughout"""
    steps = step_count(duration, spec.dt)
    series = collect_trajectory(plant, np.zeros((steps, plant.m)), y0, dt=spec.dt)
    return ClosedLoopResult(series, loop_metrics(series, ref, warmup), pd.DataFrame(columns=SOLVE_COLUMNS))
