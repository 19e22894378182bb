"""Turn recorded input/output episodes into inverse-model training pairs.

Episodes are 0-based: ``u[0..N-1]`` and ``y[0..N-1]``. For a plant of
dimension ``n`` the pair at time ``t`` (``t = n-1 .. N-2``) has regressor::

    [y(t-n+1) .. y(t-1), u(t-n+1) .. u(t-1), y(t), y(t+1)]

and target ``u(t)``, giving ``N - n`` pairs per episode.

Randomness: episode ``i`` of a collection run uses
``numpy.random.default_rng(base_seed + i)`` (PCG64). Within an episode the
initial output is drawn first, then the ``n-1`` internal states, then the
``N`` inputs, all uniform on their boxes.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from mrgpr._csv import read_rows, write_rows
from mrgpr.gp_core import TrainingPair
from mrgpr.plant import DivergenceError, NormalFormPlant, PlantState, step

DEFAULT_BOX = (-1.2, 1.2)


@dataclass(frozen=True, eq=False)
class Episode:
    inputs: np.ndarray
    outputs: np.ndarray
    id: str = "0"

    def __post_init__(self):
        u = np.array(self.inputs, dtype=float).reshape(-1)
        y = np.array(self.outputs, dtype=float).reshape(-1)
        if u.shape != y.shape:
            raise ValueError(f"episode {self.id}: {u.size} inputs but {y.size} outputs")
        u.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "inputs", u)
        object.__setattr__(self, "outputs", y)
        object.__setattr__(self, "id", str(self.id))

    def __len__(self):
        return self.inputs.size


@dataclass(frozen=True, eq=False)
class Dataset:
    n: int
    regressors: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        X = np.array(self.regressors, dtype=float).reshape(-1, 2 * self.n)
        u = np.array(self.targets, dtype=float).reshape(-1)
        if X.shape[0] != u.size:
            raise ValueError(f"{X.shape[0]} regressors but {u.size} targets")
        X.setflags(write=False)
        u.setflags(write=False)
        object.__setattr__(self, "regressors", X)
        object.__setattr__(self, "targets", u)

    def __len__(self):
        return self.targets.size

    @property
    def pairs(self) -> list[TrainingPair]:
        return [TrainingPair(x, t) for x, t in zip(self.regressors, self.targets)]

    @classmethod
    def from_pairs(cls, n: int, pairs: Sequence[TrainingPair]) -> "Dataset":
        pairs = list(pairs)
        for p in pairs:
            if len(p.regressor) != 2 * n:
                raise ValueError(f"regressor of length {len(p.regressor)} in a dataset with n={n}")
        return cls(n, [p.regressor for p in pairs], [p.target for p in pairs])


def build_regressor(y_window, u_window) -> np.ndarray:
    """Stack ``y(t-n+1..t+1)`` and ``u(t-n+1..t-1)`` (both oldest first)."""
    y_window = np.asarray(y_window, dtype=float).ravel()
    u_window = np.asarray(u_window, dtype=float).ravel()
    n = y_window.size - 1
    if n < 2:
        raise ValueError(f"y_window must have length n+1 >= 3, got {y_window.size}")
    if u_window.size != n - 1:
        raise ValueError(
            f"u_window must have length n-1 = {n - 1} for a y_window of length {y_window.size}, "
            f"got {u_window.size}"
        )
    return np.concatenate([y_window[: n - 1], u_window, y_window[n - 1 :]])


def episode_to_pairs(ep: Episode, n: int) -> list[TrainingPair]:
    return episode_to_dataset(ep, n).pairs


def episode_to_dataset(ep: Episode, n: int) -> Dataset:
    N = len(ep)
    if N <= n:
        raise ValueError(f"episode {ep.id} too short: length {N} must exceed n={n}")
    y, u = ep.outputs, ep.inputs
    rows = [build_regressor(y[t - n + 1 : t + 2], u[t - n + 1 : t]) for t in range(n - 1, N - 1)]
    return Dataset(n, np.array(rows), u[n - 1 : N - 1])


def union(datasets: Sequence[Dataset], n: int) -> Dataset:
    datasets = list(datasets)
    bad = sorted({d.n for d in datasets if d.n != n})
    if bad:
        raise ValueError(f"cannot union datasets with n={bad} into a dataset with n={n}")
    if not datasets:
        return Dataset(n, np.zeros((0, 2 * n)), np.zeros(0))
    return Dataset(
        n,
        np.concatenate([d.regressors for d in datasets]),
        np.concatenate([d.targets for d in datasets]),
    )


def dataset_from_episodes(episodes: Sequence[Episode], n: int) -> Dataset:
    return union([episode_to_dataset(ep, n) for ep in episodes], n)


InputSampler = Callable[[np.random.Generator, int], np.ndarray]
InitSampler = Callable[[np.random.Generator], PlantState]


def uniform_inputs(box=DEFAULT_BOX) -> InputSampler:
    lo, hi = box

    def sample(rng, length):
        return rng.uniform(lo, hi, size=length)

    return sample


def uniform_initial_state(n: int, box=DEFAULT_BOX) -> InitSampler:
    lo, hi = box

    def sample(rng):
        y0 = rng.uniform(lo, hi)
        z0 = rng.uniform(lo, hi, size=n - 1)
        return PlantState(z0, y0)

    return sample


def collect_episode(
    plant: NormalFormPlant,
    input_sampler: InputSampler,
    init_sampler: InitSampler,
    length: int,
    rng_seed: int,
    id=None,
) -> Episode:
    if length <= plant.n:
        raise ValueError(f"episode length {length} must exceed n={plant.n}")
    rng = np.random.default_rng(rng_seed)
    state = init_sampler(rng)
    u = np.asarray(input_sampler(rng, length), dtype=float)
    if u.shape != (length,):
        raise ValueError(f"input sampler returned shape {u.shape}, expected ({length},)")
    y = np.empty(length)
    y[0] = state.y
    for t in range(length - 1):
        try:
            state = step(plant, state, u[t])
        except DivergenceError as exc:
            raise DivergenceError(t + 1, exc.component, exc.value) from None
        y[t + 1] = state.y
    return Episode(u, y, rng_seed if id is None else id)


def collect_episodes(
    plant: NormalFormPlant,
    count: int,
    length: int,
    base_seed: int = 0,
    input_box=DEFAULT_BOX,
    init_box=DEFAULT_BOX,
) -> list[Episode]:
    inputs = uniform_inputs(input_box)
    init = uniform_initial_state(plant.n, init_box)
    return [collect_episode(plant, inputs, init, length, base_seed + i, id=i) for i in range(count)]


def dataset_header(n: int) -> list[str]:
    return (
        [f"y_hist_{i + 1}" for i in range(n - 1)]
        + [f"u_hist_{i + 1}" for i in range(n - 1)]
        + ["y_t", "y_next", "target"]
    )


def write_dataset(ds: Dataset, path) -> None:
    rows = (tuple(x) + (t,) for x, t in zip(ds.regressors, ds.targets))
    write_rows(path, dataset_header(ds.n), rows, comments=[f"mrgpr-dataset n={ds.n}"])


def read_dataset(path) -> Dataset:
    comments, header, rows = read_rows(path)
    n = None
    for c in comments:
        m = re.match(r"mrgpr-dataset n=(\d+)", c)
        if m:
            n = int(m.group(1))
    if n is None:
        raise ValueError(f"{path}: missing 'mrgpr-dataset n=' header line")
    if header != dataset_header(n):
        raise ValueError(f"{path}: unexpected columns {header}")
    data = np.array(rows, dtype=float).reshape(-1, 2 * n + 1)
    return Dataset(n, data[:, :-1], data[:, -1])


def write_episodes(episodes: Sequence[Episode], path) -> None:
    def rows():
        for ep in episodes:
            for t, (u, y) in enumerate(zip(ep.inputs, ep.outputs)):
                yield ep.id, t, u, y

    write_rows(path, ["episode", "t", "u", "y"], rows())


def read_episodes(path) -> list[Episode]:
    _, header, rows = read_rows(path)
    if header != ["episode", "t", "u", "y"]:
        raise ValueError(f"{path}: unexpected columns {header}")
    grouped: dict[str, list] = {}
    for ep_id, t, u, y in rows:
        grouped.setdefault(ep_id, []).append((int(t), float(u), float(y)))
    episodes = []
    for ep_id, samples in grouped.items():
        samples.sort()
        if [s[0] for s in samples] != list(range(len(samples))):
            raise ValueError(f"{path}: episode {ep_id} has gaps in t")
        episodes.append(Episode([s[1] for s in samples], [s[2] for s in samples], ep_id))
    return episodes
