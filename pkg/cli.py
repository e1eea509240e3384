"""
CLI Module for SurrogateMPC
Experiment driver: generate data, train, predict, control, online, metrics, sweep
"""

import argparse
import glob
import logging
import os
import sys
import time
from dataclasses import replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from dotenv import load_dotenv

from config import ExperimentConfig, parse_config
from core import (CheckpointError, ConfigError, DimensionError, PlantDivergenceError,
                  ReferenceTrajectory, SolverError, SurrogateMPCError, TimeSeries, TrainingDivergenceError,
                  compute_metrics, write_key_values)
from datagen import (SymmetryMap, collect_trajectory, excitation_metadata, generate_excitation, load_episode,
                     save_episode, symmetrize, take_fraction, train_validation_split, windows_from_episodes)
from job_manager import JobManager, JobStatus
from mpc import DEFAULT_WARMUP_S, ClosedLoopResult, run_closed_loop
from online import OnlineResult, run_online
from plants import Plant, make_plant
from surrogate import (SurrogateModel, file_sha256, load_model, prediction_rmse, rolling_predictions,
                       rolling_windows, save_model)
from training import train

load_dotenv()

logger = logging.getLogger(__name__)

VERSION = "0.1.0"

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGENCE = 4
EXIT_SOLVER = 5


class UsageError(SurrogateMPCError):
    """Bad command line"""


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# Helpers
# --------------------------------------------------------------------------

def derive_seeds(master: int, count: int) -> List[int]:
    """Independent per-episode seeds from the master seed"""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(master).spawn(count)]


def output_dir(args, config: Optional[ExperimentConfig], stage: str) -> str:
    base = args.out or (config.run.out if config and config.run.out else None) \
        or os.getenv("SURROGATE_MPC_OUT", "out")
    path = os.path.join(base, stage)
    os.makedirs(path, exist_ok=True)
    return path


def load_config(args) -> ExperimentConfig:
    if not args.config:
        raise UsageError(f"{args.command} needs --config")
    config = parse_config(args.config)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    return config


def initial_state(config: ExperimentConfig, plant: Plant) -> np.ndarray:
    return np.array(config.run.y0, dtype=float) if config.run.y0 is not None else plant.default_state()


def write_manifest(directory: str, command: str, config: Optional[ExperimentConfig],
                   artifacts: Sequence[str], extra: Optional[Dict[str, object]] = None) -> str:
    """
    Write manifest.txt (key: value) and the verbatim config echo next to the artifacts

    Args:
        directory: Artifact directory
        command: Subcommand that produced it
        config: Parsed config, echoed as config.ini
        artifacts: Paths to hash
        extra: Seeds, checkpoint hashes, totals, ...

    Returns:
        Manifest path
    """
    values: Dict[str, object] = {"tool": "surrogate-mpc", "version": VERSION, "command": command}
    if config is not None:
        echo = os.path.join(directory, "config.ini")
        with open(echo, "w") as f:
            f.write(config.source_text)
        values["seed"] = config.seed
        artifacts = list(artifacts) + [echo]
    values.update(extra or {})
    for path in artifacts:
        values[f"sha256.{os.path.basename(path)}"] = file_sha256(path)
    manifest = os.path.join(directory, "manifest.txt")
    with open(manifest, "w") as f:
        f.write(write_key_values(values))
    return manifest


def read_episodes(data_dir: str) -> List[TimeSeries]:
    paths = sorted(glob.glob(os.path.join(data_dir, "episode_*.csv")))
    if not paths:
        raise FileNotFoundError(f"no episode_*.csv files in {data_dir}")
    return [load_episode(path)[0] for path in paths]


def write_loop_csv(result_series: TimeSeries, ref: ReferenceTrajectory, path: str) -> str:
    return result_series.to_csv(path, extra=ref.to_frame().iloc[:len(result_series)])


def check_solver(result: Union[ClosedLoopResult, OnlineResult]):
    if result.feasibility_violations or result.descent_violations:
        raise SolverError(f"{result.feasibility_violations} feasibility and {result.descent_violations} "
                          f"descent violations")


def fit_model(config: ExperimentConfig, episodes: List[TimeSeries], seed: int) -> Tuple[SurrogateModel, pd.DataFrame]:
    """Create, normalize and train a surrogate on episodes"""
    dims = config.model
    train_eps, val_eps = train_validation_split(episodes, config.data.validation_fraction)
    sample = episodes[0]
    model = SurrogateModel.create(sample.p, sample.m, M=dims.M, N=dims.N, d=dims.d, h_dim=dims.h_dim,
                                  hidden=dims.hidden, seed=seed)
    model.fit_normalization(train_eps)
    data = windows_from_episodes(train_eps, dims.M, dims.N, dims.d)
    validation = None
    long_enough = [e for e in val_eps if len(e) > dims.M + 2 * dims.d + 1 + dims.N]
    if long_enough:
        validation = windows_from_episodes(long_enough, dims.M, dims.N, dims.d)
    result = train(model, data, replace(config.train, seed=seed), validation)
    return result.model, result.history


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------

def cmd_generate_data(args) -> int:
    config = load_config(args)
    out = output_dir(args, config, "data")
    plant = make_plant(config.plant)
    symmetry = SymmetryMap.for_plant(plant) if config.data.symmetrize else None
    if config.data.symmetrize and symmetry is None:
        logger.warning(f"{plant.kind.value} has no known symmetry; episodes are not symmetrized")
    seeds = derive_seeds(config.seed, config.data.episodes)
    written = []
    for k, seed in enumerate(seeds):
        spec = replace(config.excitation, seed=seed, channels=plant.m)
        series = collect_trajectory(plant, generate_excitation(spec), initial_state(config, plant))
        metadata = {"plant": plant.kind.value, **excitation_metadata(spec)}
        written.append(save_episode(series, os.path.join(out, f"episode_{k:03d}.csv"), metadata))
        if symmetry is not None:
            _, mirrored = symmetrize(series, symmetry)
            written.append(save_episode(mirrored, os.path.join(out, f"episode_{k:03d}_mirror.csv"),
                                        {**metadata, "mirrored": "true"}))
        logger.info(f"Episode {k}: {len(series)} samples (seed {seed})")
    write_manifest(out, "generate-data", config, written,
                   {f"seed.episode_{k:03d}": seed for k, seed in enumerate(seeds)})
    print(f"✓ Wrote {len(written)} episodes to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = load_config(args)
    data_dir = args.data or output_dir(args, config, "data")
    out = output_dir(args, config, "model")
    episodes = read_episodes(data_dir)
    model, history = fit_model(config, episodes, config.seed)
    checkpoint = save_model(model, os.path.join(out, "checkpoint.txt"))
    history_path = os.path.join(out, "loss_history.csv")
    history.to_csv(history_path, index=False, float_format="%.17g", lineterminator="\n")
    write_manifest(out, "train", config, [checkpoint, history_path],
                   {"episodes": len(episodes), "checkpoint_sha256": file_sha256(checkpoint)})
    print(f"✓ Model trained on {len(episodes)} episodes, checkpoint {checkpoint}")
    return EXIT_OK


def cmd_predict(args) -> int:
    if not args.checkpoint or not args.episode:
        raise UsageError("predict needs --checkpoint and --episode")
    model = load_model(args.checkpoint)
    series, _ = load_episode(args.episode)
    out = output_dir(args, None, "predict")
    table = rolling_predictions(model, series, args.steps)
    path = os.path.join(out, "predictions.csv")
    table.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    rmse = prediction_rmse(model, rolling_windows(series, model, args.steps))
    rmse_path = os.path.join(out, "prediction_rmse.csv")
    pd.DataFrame({"step": np.arange(1, len(rmse) + 1), "nrmse": rmse}).to_csv(
        rmse_path, index=False, float_format="%.17g", lineterminator="\n")
    write_manifest(out, "predict", None, [path, rmse_path], {"checkpoint_sha256": file_sha256(args.checkpoint)})
    print(f"✓ {len(table)} prediction rows written to {path}; step-1 NRMSE {rmse[0]:.6g}")
    return EXIT_OK


def _control_setup(args):
    config = load_config(args)
    checkpoint = args.checkpoint or os.path.join(output_dir(args, config, "model"), "checkpoint.txt")
    model = load_model(checkpoint)
    plant = make_plant(config.plant)
    ref = config.reference.build(config.horizon.dt)
    return config, checkpoint, model, plant, ref


def cmd_control(args) -> int:
    config, checkpoint, model, plant, ref = _control_setup(args)
    out = output_dir(args, config, "control")
    result = run_closed_loop(plant, model, ref, config.horizon, initial_state(config, plant),
                             config.run.duration_s, config.run.warmup_s)
    check_solver(result)
    loop_path = write_loop_csv(result.series, ref, os.path.join(out, "closed_loop.csv"))
    solves_path = os.path.join(out, "solves.csv")
    result.solves.drop(columns=["elapsed_s"]).to_csv(solves_path, index=False, float_format="%.17g",
                                                     lineterminator="\n")
    artifacts = [loop_path, solves_path]
    if result.metrics is not None:
        metrics_path = os.path.join(out, "metrics.txt")
        with open(metrics_path, "w") as f:
            f.write(result.metrics.to_text())
        artifacts.append(metrics_path)
        print(result.metrics.to_text(), end="")
    write_manifest(out, "control", config, artifacts, {
        "checkpoint_sha256": file_sha256(checkpoint),
        "solver_fallbacks": result.fallbacks,
        "solve_time_total_s": f"{result.solves['elapsed_s'].sum():.3f}",
    })
    print(f"✓ Closed loop written to {loop_path}")
    return EXIT_OK


def cmd_online(args) -> int:
    config, checkpoint, model, plant, ref = _control_setup(args)
    out = output_dir(args, config, "online")
    result = run_online(plant, model, ref, config.horizon, config.online, initial_state(config, plant),
                        config.run.duration_s, config.run.warmup_s)
    check_solver(result)
    loop_path = write_loop_csv(result.series, ref, os.path.join(out, "closed_loop.csv"))
    intervals_path = os.path.join(out, "intervals.csv")
    result.interval_frame().to_csv(intervals_path, index=False, float_format="%.17g", lineterminator="\n")
    final_checkpoint = save_model(result.model, os.path.join(out, "checkpoint_final.txt"))
    write_manifest(out, "online", config, [loop_path, intervals_path, final_checkpoint], {
        "checkpoint_sha256": file_sha256(checkpoint),
        "failed_updates": result.failed_updates,
        **{f"interval_{r.interval}.model_sha256": r.model_hash for r in result.intervals},
    })
    print(result.interval_frame().to_string(index=False))
    return EXIT_OK


def cmd_metrics(args) -> int:
    if not args.trajectory:
        raise UsageError("metrics needs --trajectory")
    config = load_config(args) if args.config else None
    frame = pd.read_csv(args.trajectory, float_precision="round_trip")
    achieved = TimeSeries.from_frame(frame)
    ref_frame = pd.read_csv(args.reference, float_precision="round_trip") if args.reference else frame
    ref_cols = sorted((c for c in ref_frame.columns if c.startswith("ref_")), key=lambda c: int(c[4:]))
    if ref_cols:
        if args.mask:
            mask = tuple(int(x) - 1 for x in args.mask.split(","))
        elif config is not None:
            mask = config.reference.mask
        else:
            mask = tuple(range(len(ref_cols)))
        ref = ReferenceTrajectory(ref_frame[ref_cols].to_numpy(float), mask, achieved.dt)
    elif config is not None:
        ref = config.reference.build(achieved.dt)
    else:
        raise UsageError("metrics needs ref_ columns, --reference or --config")
    T = args.T if args.T is not None else (len(achieved) - 1) * achieved.dt
    warmup = args.warmup if args.warmup is not None else (config.run.warmup_s if config else DEFAULT_WARMUP_S)
    report = compute_metrics(achieved, ref, T, warmup)
    print(report.to_text(), end="")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "metrics.txt"), "w") as f:
            f.write(report.to_text())
    return EXIT_OK


SWEEP_COLUMNS = ["row", "seed", "fraction", "e_mean", "e_max", "control_cost", "e_mean_std", "e_max_std"]


def sweep_table(results: Sequence[Tuple[int, float, Optional[Dict]]]) -> pd.DataFrame:
    """One row per run in (seed, fraction) order, then one aggregate row per fraction"""
    rows = []
    for seed, fraction, summary in results:
        summary = summary or {}
        rows.append(dict(row="run", seed=seed, fraction=fraction, e_mean=summary.get("e_mean", np.nan),
                         e_max=summary.get("e_max", np.nan), control_cost=summary.get("control_cost", np.nan)))
    runs = pd.DataFrame(rows)
    for fraction in sorted({fraction for _, fraction, _ in results}):
        part = runs[runs["fraction"] == fraction]
        rows.append(dict(row="aggregate", seed=np.nan, fraction=fraction,
                         e_mean=part["e_mean"].mean(), e_max=part["e_max"].mean(),
                         control_cost=part["control_cost"].mean(),
                         e_mean_std=part["e_mean"].std(ddof=0), e_max_std=part["e_max"].std(ddof=0)))
    return pd.DataFrame(rows, columns=SWEEP_COLUMNS)


def completed_summary(manager: JobManager, job_id: str) -> Optional[Dict]:
    """Metrics of a run whose record says completed, read back from its saved result row"""
    record = manager.get_job(job_id)
    if not record or record['status'] != JobStatus.COMPLETED.value:
        return None
    table = manager.load_partial_results(job_id)
    if table is None or list(table.columns) != SWEEP_COLUMNS or len(table) != 1:
        return None
    row = table.iloc[0]
    return {"e_mean": float(row["e_mean"]), "e_max": float(row["e_max"]), "control_cost": float(row["control_cost"])}


def cmd_sweep(args) -> int:
    config = load_config(args)
    data_dir = args.data or output_dir(args, config, "data")
    out = output_dir(args, config, "sweep")
    episodes = read_episodes(data_dir)
    plant_config = config.plant
    ref = config.reference.build(config.horizon.dt)
    seeds = [config.seed + k for k in range(config.run.sweep_seeds)]
    fractions = list(config.run.sweep_fractions)
    workers = int(os.getenv("SURROGATE_MPC_WORKERS", config.run.workers))
    manager = JobManager(jobs_dir=os.path.join(out, "runs"))

    def make_work(job_id: str, seed: int, fraction: float):
        def work(progress):
            plant = make_plant(plant_config)
            model, history = fit_model(config, take_fraction(episodes, fraction), seed)
            manager.save_partial_results(job_id, history)
            progress(1, 2)
            result = run_closed_loop(plant, model, ref, config.horizon, initial_state(config, plant),
                                     config.run.duration_s, config.run.warmup_s)
            progress(2, 2)
            if result.metrics is None:
                raise ValueError("run too short for metrics")
            summary = {**result.metrics.as_dict(), "fallbacks": result.fallbacks}
            manager.save_partial_results(job_id, sweep_table([(seed, fraction, summary)]).iloc[:1])
            return summary
        return work

    grid = [(seed, fraction) for seed in seeds for fraction in fractions]
    job_ids = [f"seed{seed}_frac{fraction:g}" for seed, fraction in grid]
    summaries: Dict[str, Optional[Dict]] = {}
    runs = []
    for job_id, (seed, fraction) in zip(job_ids, grid):
        if args.resume:
            summary = completed_summary(manager, job_id)
            if summary is not None:
                summaries[job_id] = summary
                continue
        manager.create_job(job_id, 2, {"seed": seed, "fraction": fraction})
        runs.append((job_id, make_work(job_id, seed, fraction)))
    if summaries:
        logger.info(f"Reusing {len(summaries)} completed runs from {manager.jobs_dir}")
    started = time.time()
    for (job_id, _), summary in zip(runs, manager.run_parallel(runs, workers=workers)):
        summaries[job_id] = summary
    for job in manager.list_jobs():
        if job['status'] == JobStatus.FAILED.value:
            logger.error(f"Run {job['job_id']} failed: {job['error']}")
    table = sweep_table([(s, f, summaries[job_id]) for job_id, (s, f) in zip(job_ids, grid)])
    path = os.path.join(out, "sweep.csv")
    table.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    failed = sum(summaries[job_id] is None for job_id in job_ids)
    write_manifest(out, "sweep", config, [path], {"runs": len(runs), "reused_runs": len(job_ids) - len(runs),
                                                  "failed_runs": failed, "workers": workers,
                                                  "elapsed_s": f"{time.time() - started:.1f}"})
    print(table.to_string(index=False))
    return EXIT_OK if failed == 0 else EXIT_ERROR


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "predict": cmd_predict,
    "control": cmd_control,
    "online": cmd_online,
    "metrics": cmd_metrics,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    common = _ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config file")
    common.add_argument("--seed", type=int, help="override the master seed")
    common.add_argument("--out", help="output directory (default $SURROGATE_MPC_OUT or ./out)")
    common.add_argument("--quiet", action="store_true", help="only log warnings and errors")

    parser = _ArgumentParser(prog="surrogate-mpc", description="Surrogate-model predictive control experiments")
    parser.add_argument("--version", action="version", version=f"%(prog)s {VERSION}")
    sub = parser.add_subparsers(dest="command", parser_class=_ArgumentParser, required=True)
    sub.add_parser("generate-data", parents=[common], help="excite the plant and write episode files")
    p = sub.add_parser("train", parents=[common], help="train a surrogate on episode files")
    p.add_argument("--data", help="episode directory (default <out>/data)")
    p = sub.add_parser("predict", parents=[common], help="multi-step predictions along an episode")
    p.add_argument("--checkpoint")
    p.add_argument("--episode")
    p.add_argument("--steps", type=int, help="prediction horizon (default: model N)")
    for name, text in (("control", "closed-loop tracking"), ("online", "closed loop with online updates")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--checkpoint", help="default <out>/model/checkpoint.txt")
    p = sub.add_parser("metrics", parents=[common], help="tracking metrics of a trajectory CSV")
    p.add_argument("--trajectory")
    p.add_argument("--reference", help="CSV with ref_ columns (default: the trajectory file)")
    p.add_argument("--mask", help="tracked channels counting from 1, comma-separated")
    p.add_argument("--T", type=float, help="horizon in seconds (default: last sample)")
    p.add_argument("--warmup", type=float, help=f"seconds excluded (default: config or {DEFAULT_WARMUP_S:g})")
    p = sub.add_parser("sweep", parents=[common], help="train/control over seeds and data fractions")
    p.add_argument("--data", help="episode directory (default <out>/data)")
    p.add_argument("--resume", action="store_true", help="reuse runs already completed under <out>/sweep/runs")
    return parser


def configure_logging(quiet: bool):
    level = logging.WARNING if quiet else getattr(logging, os.getenv("SURROGATE_MPC_LOG_LEVEL", "INFO").upper(),
                                                  logging.INFO)
    logging.basicConfig(level=level, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s", force=True)


def run_command(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse argv, run the subcommand and map failures to exit codes

    Args:
        argv: Arguments without the program name (default sys.argv[1:])

    Returns:
        0 ok, 2 config/usage, 3 I/O, 4 divergence, 5 solver failure, 1 anything else
    """
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as e:
        return int(e.code or 0)
    configure_logging(args.quiet)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError, DimensionError) as e:
        logger.error(f"Configuration error: {e}")
        print(e, file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, CheckpointError) as e:
        logger.error(f"I/O error: {e}")
        return EXIT_IO
    except (PlantDivergenceError, TrainingDivergenceError) as e:
        logger.error(f"Divergence: {e}")
        return EXIT_DIVERGENCE
    except SolverError as e:
        logger.error(f"Solver failure: {e}")
        return EXIT_SOLVER
    except Exception as e:
        logger.exception(f"Unexpected error: {e}")
        return EXIT_ERROR


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
