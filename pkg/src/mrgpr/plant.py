"""Discrete-time SISO plants in normal form, the reference model and the
analytic oracles (observer map and ideal inverse) of the benchmark plant.

A plant evolves as::

    y(t+1) = f(z, y) + g(z, y) * u(t)
    z(t+1) = h(z, y)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from mrgpr._csv import write_rows

DIVERGENCE_LIMIT = 1e6
MIN_INPUT_GAIN = 1e-12


class DivergenceError(RuntimeError):
    def __init__(self, step: Optional[int], component: str, value, trajectory=None):
        self.step = step
        self.component = component
        self.value = value
        self.trajectory = trajectory
        where = "" if step is None else f" at step {step}"
        super().__init__(f"plant diverged{where}: {component} = {value}")


class RelativeDegreeError(ValueError):
    """Input gain g(z, y) vanished, so the plant is not relative degree one there."""


@dataclass(frozen=True, eq=False)
class PlantState:
    z: np.ndarray
    y: float

    def __post_init__(self):
        z = np.array(self.z, dtype=float).reshape(-1)
        z.setflags(write=False)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "y", float(self.y))
        if not (math.isfinite(self.y) and np.all(np.isfinite(z))):
            raise ValueError(f"non-finite plant state (y={self.y}, z={z})")


@dataclass(frozen=True)
class NormalFormPlant:
    """A plant given by pluggable ``f``, ``g``, ``h``.

    ``theta`` is optional: the map from ``(zeta0, y)`` to the internal state.
    Plants that provide it can be used with :func:`ideal_control`.
    """

    n: int
    f: Callable[[np.ndarray, float], float]
    g: Callable[[np.ndarray, float], float]
    h: Callable[[np.ndarray, float], np.ndarray]
    theta: Optional[Callable[[np.ndarray, float], np.ndarray]] = None
    name: str = "plant"

    def __post_init__(self):
        if self.n < 2:
            raise ValueError(f"plant dimension must be >= 2, got {self.n}")

    def input_gain(self, z, y) -> float:
        gv = float(self.g(z, y))
        if not abs(gv) >= MIN_INPUT_GAIN:
            raise RelativeDegreeError(f"input gain g(z={list(z)}, y={y}) = {gv} vanishes")
        return gv


@dataclass(frozen=True)
class ReferenceModel:
    f_r: Callable[[float], float]
    gain: Optional[float] = field(default=None)

    @classmethod
    def linear(cls, a: float = -0.4) -> "ReferenceModel":
        if not abs(a) < 1:
            raise ValueError(f"linear reference model needs |a| < 1, got {a}")
        a = float(a)
        return cls(lambda y: a * y, a)

    def __call__(self, y: float) -> float:
        return float(self.f_r(y))


def reference_step(ref: ReferenceModel, y_r: float) -> float:
    return ref(y_r)


def reference_trajectory(ref: ReferenceModel, y0: float, horizon: int) -> np.ndarray:
    ys = np.empty(horizon + 1)
    ys[0] = y0
    for t in range(horizon):
        ys[t + 1] = reference_step(ref, ys[t])
    return ys


def step(plant: NormalFormPlant, state: PlantState, u: float) -> PlantState:
    z, y = state.z, state.y
    u = float(u)
    if not math.isfinite(u):
        raise ValueError(f"non-finite input u = {u}")
    y_next = float(plant.f(z, y)) + plant.input_gain(z, y) * u
    z_next = np.asarray(plant.h(z, y), dtype=float).reshape(-1)
    if not math.isfinite(y_next):
        raise DivergenceError(None, "y", y_next)
    if not np.all(np.isfinite(z_next)):
        raise DivergenceError(None, "z", z_next)
    return PlantState(z_next, y_next)


def example_theta(zeta0, y: float) -> float:
    """Internal state of the benchmark plant from (y(t-1), u(t-1)) and y(t)."""
    y_prev, u_prev = float(zeta0[0]), float(zeta0[1])
    return 0.5 * math.sin(y_prev) * (y - y_prev * y_prev - u_prev)


def example_plant() -> NormalFormPlant:
    """``y+ = y^2 + z + u``, ``z+ = 0.5 sin(y) z``."""
    return NormalFormPlant(
        n=2,
        f=lambda z, y: y * y + z[0],
        g=lambda z, y: 1.0,
        h=lambda z, y: np.array([0.5 * math.sin(y) * z[0]]),
        theta=lambda zeta0, y: np.array([example_theta(zeta0, y)]),
        name="example",
    )


def ideal_control(plant: NormalFormPlant, zeta1, s: float) -> float:
    """Exact inverse ``c([zeta1; s])``: the input that drives the output to ``s``."""
    if plant.theta is None:
        raise TypeError(f"plant {plant.name!r} has no analytic observer map")
    zeta1 = np.asarray(zeta1, dtype=float).ravel()
    if zeta1.size != 2 * plant.n - 1:
        raise ValueError(f"zeta1 must have length {2 * plant.n - 1}, got {zeta1.size}")
    zeta0, y = zeta1[:-1], float(zeta1[-1])
    z = np.asarray(plant.theta(zeta0, y), dtype=float).reshape(-1)
    return (float(s) - float(plant.f(z, y))) / plant.input_gain(z, y)


def ideal_state_feedback(plant: NormalFormPlant, ref: ReferenceModel) -> Callable[[PlantState], float]:
    """State-feedback law ``(f_r(y) - f(z, y)) / g(z, y)``; reads the true z."""

    def policy(state: PlantState) -> float:
        return (ref(state.y) - float(plant.f(state.z, state.y))) / plant.input_gain(state.z, state.y)

    return policy


@dataclass(frozen=True, eq=False)
class Trajectory:
    """``u`` has ``horizon`` entries; ``y`` and ``z`` have ``horizon + 1``."""

    u: np.ndarray
    y: np.ndarray
    z: np.ndarray

    @property
    def horizon(self) -> int:
        return len(self.u)

    def to_rows(self):
        for t in range(len(self.y)):
            u = self.u[t] if t < len(self.u) else math.nan
            yield (t, u, self.y[t], *self.z[t])


def rollout(plant: NormalFormPlant, controller, initial: PlantState, horizon: int) -> Trajectory:
    """Simulate ``horizon`` steps.

    ``controller`` is one of: a sequence of inputs (open loop); an object with
    ``control(y)`` (output feedback, sees only y); or a callable taking the
    full :class:`PlantState` (state feedback).
    """
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    if hasattr(controller, "control"):
        policy = lambda t, s: controller.control(s.y)  # noqa: E731
    elif callable(controller):
        policy = lambda t, s: controller(s)  # noqa: E731
    else:
        inputs = np.asarray(controller, dtype=float)
        if inputs.size < horizon:
            raise ValueError(f"open-loop input sequence has {inputs.size} entries, horizon is {horizon}")
        policy = lambda t, s: inputs[t]  # noqa: E731

    us = np.empty(horizon)
    ys = np.empty(horizon + 1)
    zs = np.empty((horizon + 1, plant.n - 1))
    state = initial
    ys[0], zs[0] = state.y, state.z

    def partial(t):
        return Trajectory(us[:t].copy(), ys[: t + 1].copy(), zs[: t + 1].copy())

    for t in range(horizon):
        u = float(policy(t, state))
        if not math.isfinite(u):
            raise DivergenceError(t, "u", u, partial(t))
        us[t] = u
        try:
            state = step(plant, state, u)
        except DivergenceError as exc:
            raise DivergenceError(t + 1, exc.component, exc.value, partial(t)) from None
        if abs(state.y) > DIVERGENCE_LIMIT:
            raise DivergenceError(t + 1, "y", state.y, partial(t))
        if np.linalg.norm(state.z) > DIVERGENCE_LIMIT:
            raise DivergenceError(t + 1, "z", state.z, partial(t))
        ys[t + 1], zs[t + 1] = state.y, state.z
    return Trajectory(us, ys, zs)


def trajectory_header(n: int) -> list[str]:
    return ["t", "u", "y"] + [f"z_{i + 1}" for i in range(n - 1)]


def write_trajectory(traj: Trajectory, path) -> None:
    n = traj.z.shape[1] + 1
    write_rows(path, trajectory_header(n), traj.to_rows())


def write_reference(ys: Sequence[float], path) -> None:
    write_rows(path, ["t", "y_r"], ((t, y) for t, y in enumerate(ys)))
