"""Command-line entry point: ``mrgpr <stage> --out DIR [overrides]``.

Exit status: 0 on success (for ``run``/``summarize``: all checks passed),
1 when the summary checks fail, 2 when a stage raises.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from mrgpr import gp_core
from mrgpr.data_pipeline import read_dataset, write_dataset, write_episodes
from mrgpr.experiments import (
    Artifacts,
    ExperimentConfig,
    StageError,
    _stage,
    collect,
    evaluate_grid,
    fit_hyperparameters,
    load_artifacts,
    run_pipeline,
    run_rollouts,
    summarize,
    train,
    write_grid,
    write_rollouts,
    write_summary,
)
from mrgpr.gp_core import Hyperparameters

DATA_BUDGETS = (20, 2000)


def _field_parser(f: dataclasses.Field):
    if f.type in ("int", int):
        return int
    if f.type in ("float", float):
        return float
    return json.loads  # tuples and nested tuples as JSON lists


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", type=Path, default=Path("out"), help="artifact directory (default: out)")
    p.add_argument("--config", type=Path, help="JSON config file (default: <out>/config.json if present)")
    p.add_argument("--seed", type=int, dest="base_seed", default=None, help="base RNG seed (default 0)")
    p.add_argument("-v", "--verbose", action="store_true")
    for f in dataclasses.fields(ExperimentConfig):
        if f.name == "base_seed":
            continue
        p.add_argument(
            "--" + f.name.replace("_", "-"), dest=f.name, type=_field_parser(f), default=None,
            help=f"override {f.name} (default {f.default!r})",
        )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mrgpr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in [
        ("collect", "simulate episodes and build the training dataset"),
        ("fit", "fit kernel hyperparameters on the dataset"),
        ("train", "fit the GP inverse model on all pairs"),
        ("rollout", "closed-loop rollouts with the learned and ideal controllers"),
        ("grid", "evaluate learned and ideal inverse on the 2-D grid"),
        ("summarize", "compute metrics and pass/fail checks from the artifacts"),
        ("run", "full pipeline"),
    ]:
        p = sub.add_parser(name, help=text)
        _add_common(p)
        if name == "run":
            p.add_argument(
                "--paper", action="store_true",
                help=f"run both data budgets T={DATA_BUDGETS} into <out>/T<k> and compare them",
            )
    return parser


def resolve_config(args) -> ExperimentConfig:
    if args.config is not None:
        cfg = ExperimentConfig.load(args.config)
    elif (args.out / "config.json").exists() and args.command != "run":
        cfg = ExperimentConfig.load(args.out / "config.json")
    else:
        cfg = ExperimentConfig()
    overrides = {
        f.name: getattr(args, f.name)
        for f in dataclasses.fields(ExperimentConfig)
        if getattr(args, f.name, None) is not None
    }
    return cfg.replace(**overrides) if overrides else cfg


def _save_config(cfg: ExperimentConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")


def _report(summary: dict) -> int:
    print(json.dumps(summary["checks"]))
    for r in summary["rollouts"]:
        print(
            f"ic={r['initial_condition']} limsup={r['mrgpr_limsup']:.3e} "
            f"bound={r['gain_bound']:.3e} ideal={r['ideal_limsup']:.1e}"
        )
    if summary["grid_abs_error"]:
        g = summary["grid_abs_error"]
        print(f"grid |e|: max={g['max']:.4e} mean={g['mean']:.4e}")
    print("PASS" if summary["passed"] else "FAIL")
    return 0 if summary["passed"] else 1


def _run_budgets(cfg: ExperimentConfig, out: Path) -> int:
    results = {}
    for T in DATA_BUDGETS:
        art = run_pipeline(cfg.replace(T=T), out / f"T{T}")
        results[T] = art.summary
        print(f"T={T}:")
        _report(art.summary)
    small, large = (results[T]["grid_abs_error"]["max"] for T in DATA_BUDGETS)
    comparison = {
        "max_grid_abs_error": {str(T): results[T]["grid_abs_error"]["max"] for T in DATA_BUDGETS},
        "more_data_is_better": large < small,
        "large_budget_passed": results[DATA_BUDGETS[-1]]["passed"],
    }
    (out / "comparison.json").write_text(json.dumps(comparison, indent=2) + "\n")
    print(json.dumps(comparison))
    return 0 if comparison["more_data_is_better"] and comparison["large_budget_passed"] else 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    out: Path = args.out
    try:
        try:
            cfg = resolve_config(args)
        except (ValueError, TypeError, OSError, json.JSONDecodeError) as exc:
            raise StageError("config", exc) from exc
        cmd = args.command
        if cmd == "run":
            if args.paper:
                return _run_budgets(cfg, out)
            return _report(run_pipeline(cfg, out).summary)
        _save_config(cfg, out)
        if cmd == "collect":
            episodes, ds = _stage("collect", collect, cfg)
            write_episodes(episodes, out / "episodes.csv")
            write_dataset(ds, out / "dataset.csv")
            print(f"{len(episodes)} episodes, {len(ds)} pairs -> {out}")
        elif cmd == "fit":
            ds = _stage("fit", read_dataset, out / "dataset.csv")
            hp = _stage("fit", fit_hyperparameters, cfg, ds)
            (out / "hyperparameters.json").write_text(json.dumps(hp.to_dict(), indent=2) + "\n")
            print(json.dumps(hp.to_dict()))
        elif cmd == "train":
            ds = _stage("train", read_dataset, out / "dataset.csv")
            hp_path = out / "hyperparameters.json"
            hp = _stage("train", lambda: Hyperparameters.from_dict(json.loads(hp_path.read_text())))
            model = _stage("train", train, ds, hp)
            gp_core.save_model(model, out / "model.json")
            print(f"model on {len(model)} pairs -> {out / 'model.json'}")
        elif cmd == "rollout":
            model = _stage("rollout", gp_core.load_model, out / "model.json")
            write_rollouts(_stage("rollout", run_rollouts, cfg, model), out)
        elif cmd == "grid":
            model = _stage("grid", gp_core.load_model, out / "model.json")
            write_grid(_stage("grid", evaluate_grid, cfg, model), out / "grid.csv")
        elif cmd == "summarize":
            art: Artifacts = _stage("summarize", load_artifacts, out)
            summary = _stage("summarize", summarize, art)
            write_summary(summary, out / "summary.json")
            return _report(summary)
        return 0
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
