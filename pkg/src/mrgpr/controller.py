"""Model-reference output-feedback control through a learned plant inverse.

At each step the controller asks the inverse model for the input that takes
the output from ``y(t)`` to the reference model's ``f_r(y(t))``, given the
last ``n-1`` outputs and applied inputs. Until that history is full it
applies a cold-start input instead.
"""

from __future__ import annotations

import math
from collections import deque
from typing import Callable, Optional

import numpy as np

from mrgpr.data_pipeline import build_regressor
from mrgpr.gp_core import GpModel, posterior_mean
from mrgpr.plant import NormalFormPlant, ReferenceModel, Trajectory, ideal_control


class ControllerFault(RuntimeError):
    pass


class HistoryBuffer:
    """Last ``capacity`` outputs and applied inputs, read oldest first."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError(f"history capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._y: deque[float] = deque(maxlen=capacity)
        self._u: deque[float] = deque(maxlen=capacity)
        self.steps_seen = 0

    @property
    def warmed_up(self) -> bool:
        return self.steps_seen >= self.capacity

    @property
    def y_hist(self) -> tuple[float, ...]:
        return tuple(self._y)

    @property
    def u_hist(self) -> tuple[float, ...]:
        return tuple(self._u)

    def push(self, y: float, u: float) -> None:
        self._y.append(float(y))
        self._u.append(float(u))
        self.steps_seen += 1

    def clear(self) -> None:
        self._y.clear()
        self._u.clear()
        self.steps_seen = 0


ColdStart = Callable[[int], float]


def zero_input() -> ColdStart:
    return lambda k: 0.0


def constant_input(value: float) -> ColdStart:
    value = float(value)
    return lambda k: value


def random_input(seed: int, box=(-1.2, 1.2)) -> ColdStart:
    """Uniform input for cold-start step ``k``, a pure function of (seed, k)."""
    lo, hi = box
    return lambda k: float(np.random.default_rng([seed, k]).uniform(lo, hi))


class ModelReferenceController:
    """Output feedback ``u(t) = inverse([y_hist; u_hist; y(t); f_r(y(t))])``.

    ``queries`` logs every regressor passed to ``inverse`` since the last
    reset, in order.
    """

    def __init__(
        self,
        inverse: Callable[[np.ndarray], float],
        ref: ReferenceModel,
        n: int,
        cold_start: Optional[ColdStart] = None,
    ):
        if n < 2:
            raise ValueError(f"plant dimension must be >= 2, got {n}")
        self.inverse = inverse
        self.ref = ref
        self.n = n
        self.cold_start = cold_start if cold_start is not None else zero_input()
        self.buffer = HistoryBuffer(n - 1)
        self.queries: list[np.ndarray] = []

    def regressor(self, y: float) -> np.ndarray:
        b = self.buffer
        return build_regressor([*b.y_hist, y, self.ref(y)], b.u_hist)

    def control(self, y: float) -> float:
        y = float(y)
        if not math.isfinite(y):
            raise ValueError(f"non-finite measurement y = {y}")
        if self.buffer.warmed_up:
            xi = self.regressor(y)
            u = float(self.inverse(xi))
            if not math.isfinite(u):
                raise ControllerFault(f"inverse model returned {u} at {xi.tolist()}")
            self.queries.append(xi)
        else:
            u = float(self.cold_start(self.buffer.steps_seen))
        self.buffer.push(y, u)
        return u

    def reset(self) -> None:
        self.buffer.clear()
        self.queries = []


class MrGprController(ModelReferenceController):
    """Model-reference controller whose inverse is a GP posterior mean."""

    def __init__(self, model: GpModel, ref: ReferenceModel, cold_start: Optional[ColdStart] = None):
        if model.dim % 2:
            raise ValueError(f"GP regressor dimension {model.dim} is not 2n")
        self.model = model
        super().__init__(lambda xi: posterior_mean(model, xi), ref, model.dim // 2, cold_start)


def oracle_inverse(plant: NormalFormPlant) -> Callable[[np.ndarray], float]:
    """The plant's exact inverse ``c`` as a function of the full regressor."""
    return lambda xi: ideal_control(plant, xi[:-1], xi[-1])


def oracle_controller(
    plant: NormalFormPlant, ref: ReferenceModel, cold_start: Optional[ColdStart] = None
) -> ModelReferenceController:
    return ModelReferenceController(oracle_inverse(plant), ref, plant.n, cold_start)


def closed_loop_error(traj: Trajectory, ref: ReferenceModel) -> np.ndarray:
    """``e_t = y(t+1) - f_r(y(t))`` for every simulated step."""
    y = traj.y
    return np.array([y[t + 1] - ref(y[t]) for t in range(traj.horizon)])


def tail_peak(y, fraction: float = 0.2) -> float:
    """max |y(t)| over the final ``fraction`` of the horizon (t >= ceil((1-fraction) H))."""
    y = np.asarray(y, dtype=float)
    horizon = y.size - 1
    start = math.ceil((1.0 - fraction) * horizon - 1e-12)
    return float(np.abs(y[start:]).max())


def iss_gain_bound(delta: float, ref_gain: float, gain_bound: float = 1.0) -> float:
    """Asymptotic |y| bound ``delta * g_bar / (1 - |a|)`` for ``f_r(y) = a y``."""
    if not abs(ref_gain) < 1:
        raise ValueError(f"reference gain {ref_gain} is not contractive")
    return delta * gain_bound / (1.0 - abs(ref_gain))
