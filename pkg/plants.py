"""
Plants Module for SurrogateMPC
Time-T maps of small ODE plants integrated with fixed-step RK4, plus their
observation maps
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np

from core import DimensionError, PlantDivergenceError

logger = logging.getLogger(__name__)


class PlantKind(Enum):
    """Built-in plants"""
    LINEAR = "Linear"
    VAN_DER_POL = "VanDerPol"
    LORENZ_CONTROLLED = "LorenzControlled"
    MIRROR_OSCILLATOR = "MirrorOscillator"


DEFAULT_PARAMETERS: Dict[PlantKind, Dict[str, float]] = {
    PlantKind.LINEAR: {"dim": 1.0, "decay": 1.0, "gain": 1.0},
    PlantKind.VAN_DER_POL: {"mu": 1.0},
    PlantKind.LORENZ_CONTROLLED: {"sigma": 10.0, "rho": 28.0, "beta_l": 8.0 / 3.0},
    PlantKind.MIRROR_OSCILLATOR: {"mu": 1.0, "kappa": 0.3},
}


@dataclass(frozen=True)
class PlantConfig:
    """
    Plant selection and integration settings.

    dt is the lag time the plant will be stepped with; it must be an integer
    multiple of dt_plant. m and p are optional cross-checks against the kind.
    regime picks a step of regime_ladder(kind), counting from 0; explicit
    parameters still override it.
    """

    kind: str
    parameters: Dict[str, float] = field(default_factory=dict)
    dt_plant: float = 0.01
    dt: float = 0.1
    m: Optional[int] = None
    p: Optional[int] = None
    regime: Optional[int] = None


def substep_count(dt: float, dt_plant: float) -> int:
    """Number of inner RK4 steps per lag step; dt_plant must divide dt"""
    count = int(round(dt / dt_plant))
    if count < 1 or not math.isclose(count * dt_plant, dt, rel_tol=1e-9, abs_tol=1e-15):
        raise ValueError(f"dt_plant={dt_plant} does not divide the lag time dt={dt}")
    return count


class Plant:
    """Base class: subclasses provide rhs() and observe()"""

    kind: PlantKind
    state_dim: int
    m: int
    p: int

    def __init__(self, parameters: Dict[str, float], dt_plant: float):
        if not (dt_plant > 0 and math.isfinite(dt_plant)):
            raise ValueError(f"dt_plant must be positive, got {dt_plant}")
        for name, value in parameters.items():
            if not math.isfinite(value):
                raise ValueError(f"plant parameter {name} is not finite")
        self.parameters = dict(parameters)
        self.dt_plant = float(dt_plant)

    def rhs(self, y: np.ndarray, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def observe(self, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def default_state(self) -> np.ndarray:
        return np.ones(self.state_dim)

    def observation_symmetry(self) -> Optional[Tuple[List[int], List[float], List[int], List[float]]]:
        """(u_perm, u_sign, z_perm, z_sign) of a known equivariance, if the plant has one"""
        return None

    def _rk4(self, y: np.ndarray, u: np.ndarray, h: float) -> np.ndarray:
        k1 = self.rhs(y, u)
        k2 = self.rhs(y + 0.5 * h * k1, u)
        k3 = self.rhs(y + 0.5 * h * k2, u)
        k4 = self.rhs(y + h * k3, u)
        return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    def step(self, y: np.ndarray, u: np.ndarray, dt: float, t: float = 0.0) -> np.ndarray:
        """
        Advance the state by dt with u held constant

        Args:
            y: Current state
            u: Control, held over [t, t+dt)
            dt: Lag time, a multiple of dt_plant
            t: Absolute time of y (used only for divergence reports)

        Returns:
            New state
        """
        y = np.asarray(y, dtype=float)
        u = np.asarray(u, dtype=float).reshape(-1)
        if y.shape != (self.state_dim,):
            raise DimensionError(f"{self.kind.value} state must have shape ({self.state_dim},), got {y.shape}")
        if u.shape != (self.m,):
            raise DimensionError(f"{self.kind.value} control must have {self.m} entries, got {u.shape[0]}")
        if not dt > 0:
            raise ValueError(f"dt must be positive, got {dt}")
        substeps = substep_count(dt, self.dt_plant)
        for i in range(substeps):
            y = self._rk4(y, u, self.dt_plant)
            if not np.all(np.isfinite(y)):
                logger.error(f"{self.kind.value} diverged at t={t + (i + 1) * self.dt_plant:.6g}")
                raise PlantDivergenceError(f"{self.kind.value} produced a non-finite state",
                                           t + (i + 1) * self.dt_plant)
        return y


class LinearPlant(Plant):
    """dy/dt = -decay*y + gain*u, one actuator per state, identity observation"""

    kind = PlantKind.LINEAR

    def __init__(self, parameters: Dict[str, float], dt_plant: float):
        super().__init__(parameters, dt_plant)
        dim = parameters["dim"]
        if dim < 1 or dim != int(dim):
            raise ValueError(f"Linear plant dim must be a positive integer, got {dim}")
        self.state_dim = self.m = self.p = int(dim)
        self.decay = parameters["decay"]
        self.gain = parameters["gain"]

    def rhs(self, y, u):
        return -self.decay * y + self.gain * u

    def observe(self, y):
        return np.array(y, dtype=float)


class VanDerPolPlant(Plant):
    """Forced Van der Pol oscillator with full-state observation"""

    kind = PlantKind.VAN_DER_POL
    state_dim = 2
    m = 1
    p = 2

    def rhs(self, y, u):
        mu = self.parameters["mu"]
        return np.array([y[1], mu * (1.0 - y[0] ** 2) * y[1] - y[0] + u[0]])

    def observe(self, y):
        return np.array([y[0], y[1]], dtype=float)

    def default_state(self):
        return np.array([2.0, 0.0])


class LorenzControlledPlant(Plant):
    """Lorenz system with the control added to the second equation"""

    kind = PlantKind.LORENZ_CONTROLLED
    state_dim = 3
    m = 1
    p = 3

    def rhs(self, y, u):
        sigma = self.parameters["sigma"]
        rho = self.parameters["rho"]
        beta_l = self.parameters["beta_l"]
        return np.array([
            sigma * (y[1] - y[0]),
            y[0] * (rho - y[2]) - y[1] + u[0],
            y[0] * y[1] - beta_l * y[2],
        ])

    def observe(self, y):
        return np.array(y, dtype=float)


class MirrorOscillatorPlant(Plant):
    """
    Two cross-coupled Van der Pol oscillators, each driven by its own actuator.

    State (a1, b1, a2, b2). The map (a1, b1, a2, b2) -> (-a2, -b2, -a1, -b1) with
    controls (u1, u2) -> (-u2, -u1) is an exact equivariance. The observation mimics
    three lift-like and three drag-like coefficients:
    z = (a1, a2, a1 + a2, b1^2, b2^2, b1^2 + b2^2).
    """

    kind = PlantKind.MIRROR_OSCILLATOR
    state_dim = 4
    m = 2
    p = 6

    def rhs(self, y, u):
        mu = self.parameters["mu"]
        kappa = self.parameters["kappa"]
        a1, b1, a2, b2 = y
        return np.array([
            b1,
            mu * (1.0 - a1 ** 2) * b1 - a1 - kappa * a2 + u[0],
            b2,
            mu * (1.0 - a2 ** 2) * b2 - a2 - kappa * a1 + u[1],
        ])

    def observe(self, y):
        a1, b1, a2, b2 = y
        return np.array([a1, a2, a1 + a2, b1 ** 2, b2 ** 2, b1 ** 2 + b2 ** 2], dtype=float)

    def default_state(self):
        return np.array([1.0, 0.0, -0.5, 0.2])

    def observation_symmetry(self):
        return ([1, 0], [-1.0, -1.0],
                [1, 0, 2, 4, 3, 5], [-1.0, -1.0, -1.0, 1.0, 1.0, 1.0])

    @staticmethod
    def mirror_state(y: np.ndarray) -> np.ndarray:
        a1, b1, a2, b2 = y
        return np.array([-a2, -b2, -a1, -b1])


PLANT_CLASSES = {
    PlantKind.LINEAR: LinearPlant,
    PlantKind.VAN_DER_POL: VanDerPolPlant,
    PlantKind.LORENZ_CONTROLLED: LorenzControlledPlant,
    PlantKind.MIRROR_OSCILLATOR: MirrorOscillatorPlant,
}


def make_plant(config: PlantConfig) -> Plant:
    """
    Construct a plant from its configuration

    Args:
        config: PlantConfig; unset parameters take the kind's defaults

    Returns:
        Plant exposing step() and observe()
    """
    try:
        kind = PlantKind(config.kind)
    except ValueError:
        raise ValueError(f"unknown plant kind '{config.kind}'; expected one of "
                         f"{', '.join(k.value for k in PlantKind)}") from None
    defaults = DEFAULT_PARAMETERS[kind]
    unknown = sorted(set(config.parameters) - set(defaults))
    if unknown:
        raise ValueError(f"unknown parameters for {kind.value}: {', '.join(unknown)}")
    ladder_step: Dict[str, float] = {}
    if config.regime is not None:
        ladder = regime_ladder(kind.value)
        if not 0 <= config.regime < len(ladder):
            raise ValueError(f"regime {config.regime} is outside 0..{len(ladder) - 1} for {kind.value}")
        ladder_step = ladder[config.regime]
    parameters = {**defaults, **ladder_step, **{k: float(v) for k, v in config.parameters.items()}}
    substep_count(config.dt, config.dt_plant)
    plant = PLANT_CLASSES[kind](parameters, config.dt_plant)
    if config.m is not None and config.m != plant.m:
        raise DimensionError(f"{kind.value} has {plant.m} inputs, config says m={config.m}")
    if config.p is not None and config.p != plant.p:
        raise DimensionError(f"{kind.value} has {plant.p} outputs, config says p={config.p}")
    return plant


def regime_ladder(kind: str) -> List[Dict[str, float]]:
    """Parameter sets of increasing dynamical difficulty for a plant kind"""
    kind = PlantKind(kind)
    if kind == PlantKind.MIRROR_OSCILLATOR:
        return [{"mu": 1.0, "kappa": kappa} for kappa in (0.3, 0.8, 1.5)]
    if kind == PlantKind.LORENZ_CONTROLLED:
        return [{"sigma": 10.0, "rho": rho, "beta_l": 8.0 / 3.0} for rho in (14.0, 24.0, 28.0)]
    if kind == PlantKind.VAN_DER_POL:
        return [{"mu": mu} for mu in (0.5, 1.0, 2.0)]
    return [dict(DEFAULT_PARAMETERS[kind])]
