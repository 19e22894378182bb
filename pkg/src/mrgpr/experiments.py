"""End-to-end benchmark on the example plant.

Stages: collect episodes, fit hyperparameters, train the GP inverse, run
closed-loop rollouts (learned and ideal controller), evaluate the learned
and ideal inverse on a 2-D grid, summarise. Every stage writes delimited
text into one output directory::

    config.json            effective configuration
    episodes.csv           episode,t,u,y
    dataset.csv            training pairs (y_hist_1,u_hist_1,y_t,y_next,target)
    hyperparameters.json   fitted kernel hyperparameters
    model.json             GP model (hyperparameters + training pairs, hex floats)
    trajectories/          mrgpr_ic<k>.csv, ideal_ic<k>.csv, reference_ic<k>.csv
    grid.csv               y_prev,y,mu,c,e,var
    summary.json           error and convergence metrics with pass flags
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from mrgpr import gp_core
from mrgpr._csv import read_rows, write_rows
from mrgpr.controller import MrGprController, iss_gain_bound, oracle_inverse, tail_peak
from mrgpr.data_pipeline import (
    Dataset,
    collect_episodes,
    dataset_from_episodes,
    read_dataset,
    write_dataset,
    write_episodes,
)
from mrgpr.gp_core import CholeskyError, GpModel, Hyperparameters
from mrgpr.plant import (
    DivergenceError,
    PlantState,
    ReferenceModel,
    Trajectory,
    example_plant,
    ideal_control,
    ideal_state_feedback,
    reference_trajectory,
    rollout,
    write_reference,
    write_trajectory,
)

logger = logging.getLogger(__name__)

DEFAULT_INITIAL_CONDITIONS = ((1.1, 1.1), (1.1, -1.1), (-1.1, 1.1), (-1.1, -1.1))
STUDY_SEEDS = (0, 1, 2, 3, 4)
IDEAL_LIMSUP_TOL = 1e-8
BOUND_SLACK = 0.01
MAX_JITTER_RETRIES = 6


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage}: {type(cause).__name__}: {cause}")


@dataclass
class ExperimentConfig:
    T: int = 2000
    episode_length: int = 5
    n: int = 2
    input_box: tuple[float, float] = (-1.2, 1.2)
    init_box: tuple[float, float] = (-1.2, 1.2)
    ref_gain: float = -0.4
    horizon: int = 50
    initial_conditions: tuple[tuple[float, float], ...] = DEFAULT_INITIAL_CONDITIONS
    grid_range: tuple[float, float] = (-1.2, 1.2)
    grid_resolution: int = 49
    fixed_u_prev: float = 0.2
    base_seed: int = 0
    hp_budget: int = gp_core.DEFAULT_BUDGET
    subsample_cap: int = gp_core.DEFAULT_SUBSAMPLE_CAP
    jitter_rel: float = 1e-8
    limsup_threshold: float = 0.05
    tail_fraction: float = 0.2

    def __post_init__(self):
        self.input_box = tuple(float(v) for v in self.input_box)
        self.init_box = tuple(float(v) for v in self.init_box)
        self.grid_range = tuple(float(v) for v in self.grid_range)
        self.initial_conditions = tuple(tuple(float(v) for v in ic) for ic in self.initial_conditions)
        self.validate()

    def validate(self) -> None:
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if self.n != 2:
            raise ValueError(f"the example plant has n=2, got n={self.n}")
        if self.episode_length <= self.n:
            raise ValueError(f"episode_length must exceed n={self.n}, got {self.episode_length}")
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")
        if self.grid_resolution < 2:
            raise ValueError(f"grid_resolution must be >= 2, got {self.grid_resolution}")
        for name in ("input_box", "init_box", "grid_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name} must be an interval (lo <= hi), got {(lo, hi)}")
        if not abs(self.ref_gain) < 1:
            raise ValueError(f"ref_gain must satisfy |a| < 1, got {self.ref_gain}")
        if not 0 < self.tail_fraction <= 1:
            raise ValueError(f"tail_fraction must be in (0, 1], got {self.tail_fraction}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["input_box"] = list(self.input_box)
        d["init_box"] = list(self.init_box)
        d["grid_range"] = list(self.grid_range)
        d["initial_conditions"] = [list(ic) for ic in self.initial_conditions]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class GridSpec:
    lo: float = -1.2
    hi: float = 1.2
    resolution: int = 49

    def axis(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.resolution)


@dataclass(frozen=True)
class GridResult:
    """Surfaces indexed ``[i, j]`` = (y_prev_axis[i], y_axis[j])."""

    y_prev_axis: np.ndarray
    y_axis: np.ndarray
    mu: np.ndarray
    c: np.ndarray
    var: np.ndarray

    @property
    def e(self) -> np.ndarray:
        return self.mu - self.c

    def rows(self):
        for i, yp in enumerate(self.y_prev_axis):
            for j, y in enumerate(self.y_axis):
                yield yp, y, self.mu[i, j], self.c[i, j], self.e[i, j], self.var[i, j]


GRID_HEADER = ["y_prev", "y", "mu", "c", "e", "var"]


def grid_queries(y_prev_axis, y_axis, fixed_u_prev: float, ref_gain: float) -> np.ndarray:
    """Regressors ``(y_prev, u_prev, y, ref_gain * y)`` in row-major grid order."""
    YP, Y = np.meshgrid(y_prev_axis, y_axis, indexing="ij")
    yp, y = YP.ravel(), Y.ravel()
    return np.column_stack([yp, np.full(yp.size, float(fixed_u_prev)), y, ref_gain * y])


def grid_eval(
    model: GpModel,
    oracle: Callable[[np.ndarray], float],
    grid: GridSpec,
    fixed_u_prev: float,
    ref_gain: float,
) -> GridResult:
    ax = grid.axis()
    shape = (ax.size, ax.size)
    Q = grid_queries(ax, ax, fixed_u_prev, ref_gain)
    if Q.shape[0] == 0:
        empty = np.zeros(shape)
        return GridResult(ax, ax, empty, empty, empty)
    mu, var = gp_core.predict(model, Q)
    c = np.array([oracle(q) for q in Q])
    return GridResult(ax, ax, mu.reshape(shape), c.reshape(shape), var.reshape(shape))


def write_grid(result: GridResult, path) -> None:
    write_rows(path, GRID_HEADER, result.rows())


def read_grid(path) -> GridResult:
    _, header, rows = read_rows(path)
    if header != GRID_HEADER:
        raise ValueError(f"{path}: unexpected grid columns {header}")
    data = np.array(rows, dtype=float).reshape(-1, len(GRID_HEADER))
    yp_axis = np.unique(data[:, 0])
    y_axis = np.unique(data[:, 1])
    shape = (yp_axis.size, y_axis.size)
    return GridResult(
        yp_axis, y_axis, data[:, 2].reshape(shape), data[:, 3].reshape(shape), data[:, 5].reshape(shape)
    )


@dataclass
class RolloutRecord:
    initial_condition: tuple[float, float]
    mrgpr: Trajectory
    ideal: Trajectory
    reference: np.ndarray
    mrgpr_diverged: bool = False


@dataclass
class Artifacts:
    config: ExperimentConfig
    rollouts: list[RolloutRecord] = field(default_factory=list)
    grid: Optional[GridResult] = None
    dataset: Optional[Dataset] = None
    model: Optional[GpModel] = None
    raw_pair_count: Optional[int] = None
    summary: Optional[dict] = None


def collect(config: ExperimentConfig) -> tuple[list, Dataset]:
    plant = example_plant()
    episodes = collect_episodes(
        plant, config.T, config.episode_length, config.base_seed, config.input_box, config.init_box
    )
    return episodes, dataset_from_episodes(episodes, config.n)


def fit_hyperparameters(config: ExperimentConfig, dataset: Dataset) -> Hyperparameters:
    X, u = gp_core.deduplicate(dataset)
    pairs = gp_core.pairs_from_arrays(X, u)
    init = Hyperparameters.from_data(X, u, config.jitter_rel)
    return gp_core.optimize_hyperparameters(
        pairs, init, budget=config.hp_budget, subsample_cap=config.subsample_cap, seed=config.base_seed
    )


def train(dataset: Dataset, hp: Hyperparameters) -> GpModel:
    """Fit on all (deduplicated) pairs, raising the jitter tenfold on Cholesky failure."""
    X, u = gp_core.deduplicate(dataset)
    pairs = gp_core.pairs_from_arrays(X, u)
    for attempt in range(MAX_JITTER_RETRIES + 1):
        try:
            return gp_core.fit(pairs, hp)
        except CholeskyError:
            if attempt == MAX_JITTER_RETRIES:
                raise
            bumped = max(hp.jitter * 10.0, 1e-10 * hp.signal_var)
            logger.warning("Cholesky failed with jitter %g; retrying with %g", hp.jitter, bumped)
            hp = dataclasses.replace(hp, jitter=bumped)
    raise AssertionError("unreachable")


def run_rollouts(config: ExperimentConfig, model: GpModel) -> list[RolloutRecord]:
    plant = example_plant()
    ref = ReferenceModel.linear(config.ref_gain)
    ideal = ideal_state_feedback(plant, ref)
    records = []
    for y0, z0 in config.initial_conditions:
        x0 = PlantState([z0], y0)
        ctrl = MrGprController(model, ref)
        diverged = False
        try:
            traj = rollout(plant, ctrl, x0, config.horizon)
        except DivergenceError as exc:
            logger.warning("MR-GPR rollout from %s diverged: %s", (y0, z0), exc)
            traj, diverged = exc.trajectory, True
        records.append(
            RolloutRecord(
                (y0, z0),
                traj,
                rollout(plant, ideal, x0, config.horizon),
                reference_trajectory(ref, y0, config.horizon),
                diverged,
            )
        )
    return records


def evaluate_grid(config: ExperimentConfig, model: GpModel) -> GridResult:
    grid = GridSpec(config.grid_range[0], config.grid_range[1], config.grid_resolution)
    return grid_eval(model, oracle_inverse(example_plant()), grid, config.fixed_u_prev, config.ref_gain)


def visited_errors(traj: Trajectory, ref: ReferenceModel) -> np.ndarray:
    """|u(t) - c(q_t)| at every query the controller made (t >= 1 for n = 2).

    ``u(t)`` is the posterior mean at ``q_t = (y(t-1), u(t-1), y(t), f_r(y(t)))``
    so this is |mu - c| over the visited queries, read off the log alone.
    """
    plant = example_plant()
    errs = []
    for t in range(1, traj.horizon):
        zeta1 = (traj.y[t - 1], traj.u[t - 1], traj.y[t])
        errs.append(abs(traj.u[t] - ideal_control(plant, zeta1, ref(traj.y[t]))))
    return np.array(errs)


def _stats(a: np.ndarray) -> Optional[dict]:
    if a.size == 0:
        return None
    return {"max": float(a.max()), "mean": float(a.mean())}


def summarize(artifacts: Artifacts) -> dict:
    cfg = artifacts.config
    ref = ReferenceModel.linear(cfg.ref_gain)
    summary: dict = {"T": cfg.T, "base_seed": cfg.base_seed}
    if artifacts.raw_pair_count is not None:
        summary["raw_pairs"] = artifacts.raw_pair_count
    if artifacts.model is not None:
        summary["training_pairs"] = len(artifacts.model)
        summary["hyperparameters"] = artifacts.model.hyperparameters.to_dict()
    grid_stats = None
    if artifacts.grid is not None:
        grid_stats = _stats(np.abs(artifacts.grid.e))
    summary["grid_abs_error"] = grid_stats

    runs = []
    for rec in artifacts.rollouts:
        limsup = math.inf if rec.mrgpr_diverged else tail_peak(rec.mrgpr.y, cfg.tail_fraction)
        errs = visited_errors(rec.mrgpr, ref)
        delta = float(errs.max()) if errs.size else 0.0
        bound = iss_gain_bound(delta, cfg.ref_gain) + BOUND_SLACK
        runs.append(
            {
                "initial_condition": list(rec.initial_condition),
                "mrgpr_limsup": limsup,
                "ideal_limsup": tail_peak(rec.ideal.y, cfg.tail_fraction),
                "visited_max_error": delta,
                "gain_bound": bound,
                "diverged": rec.mrgpr_diverged,
            }
        )
    summary["rollouts"] = runs
    flags = {
        "mrgpr_converged": all(r["mrgpr_limsup"] <= cfg.limsup_threshold for r in runs),
        "ideal_converged": all(r["ideal_limsup"] <= IDEAL_LIMSUP_TOL for r in runs),
        "gain_bound": all(r["mrgpr_limsup"] <= r["gain_bound"] for r in runs),
    }
    summary["checks"] = flags
    summary["passed"] = all(flags.values())
    return summary


def write_summary(summary: dict, path) -> None:
    Path(path).write_text(json.dumps(summary, indent=2, allow_nan=True) + "\n")


def write_rollouts(records: list[RolloutRecord], out: Path) -> None:
    tdir = out / "trajectories"
    tdir.mkdir(parents=True, exist_ok=True)
    for k, rec in enumerate(records):
        write_trajectory(rec.mrgpr, tdir / f"mrgpr_ic{k}.csv")
        write_trajectory(rec.ideal, tdir / f"ideal_ic{k}.csv")
        write_reference(rec.reference, tdir / f"reference_ic{k}.csv")


def read_trajectory(path) -> Trajectory:
    _, header, rows = read_rows(path)
    if header[:3] != ["t", "u", "y"]:
        raise ValueError(f"{path}: unexpected trajectory columns {header}")
    data = np.array(rows, dtype=float).reshape(-1, len(header))
    return Trajectory(data[:-1, 1], data[:, 2], data[:, 3:])


def read_rollouts(config: ExperimentConfig, out: Path) -> list[RolloutRecord]:
    tdir = Path(out) / "trajectories"
    records = []
    for k, ic in enumerate(config.initial_conditions):
        mrgpr = read_trajectory(tdir / f"mrgpr_ic{k}.csv")
        _, _, ref_rows = read_rows(tdir / f"reference_ic{k}.csv")
        records.append(
            RolloutRecord(
                ic,
                mrgpr,
                read_trajectory(tdir / f"ideal_ic{k}.csv"),
                np.array([float(r[1]) for r in ref_rows]),
                mrgpr.horizon < config.horizon,
            )
        )
    return records


def load_artifacts(out) -> Artifacts:
    out = Path(out)
    config = ExperimentConfig.load(out / "config.json")
    art = Artifacts(config)
    if (out / "trajectories").exists():
        art.rollouts = read_rollouts(config, out)
    if (out / "grid.csv").exists():
        art.grid = read_grid(out / "grid.csv")
    if (out / "model.json").exists():
        art.model = gp_core.load_model(out / "model.json")
    if (out / "dataset.csv").exists():
        art.raw_pair_count = len(read_dataset(out / "dataset.csv"))
    return art


def _stage(label: str, fn, *args):
    try:
        return fn(*args)
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - relabel every failure with its stage
        raise StageError(label, exc) from exc


def run_pipeline(config: ExperimentConfig, out=None) -> Artifacts:
    """Run every stage; write artifacts to ``out`` when given."""
    out = Path(out) if out is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        config.save(out / "config.json")
    episodes, dataset = _stage("collect", collect, config)
    if out is not None:
        write_episodes(episodes, out / "episodes.csv")
        write_dataset(dataset, out / "dataset.csv")
    hp = _stage("fit", fit_hyperparameters, config, dataset)
    if out is not None:
        (out / "hyperparameters.json").write_text(json.dumps(hp.to_dict(), indent=2) + "\n")
    model = _stage("train", train, dataset, hp)
    if out is not None:
        gp_core.save_model(model, out / "model.json")
    records = _stage("rollout", run_rollouts, config, model)
    if out is not None:
        write_rollouts(records, out)
    grid = _stage("grid", evaluate_grid, config, model)
    if out is not None:
        write_grid(grid, out / "grid.csv")
    art = Artifacts(config, records, grid, dataset, model, len(dataset))
    art.summary = summarize(art)
    if out is not None:
        write_summary(art.summary, out / "summary.json")
    return art

