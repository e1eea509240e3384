"""
Test for the command-line driver: exit codes, artifacts and determinism
"""

import contextlib
import io
import os
import shutil
import unittest

import numpy as np
import pandas as pd

from cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, check_solver, derive_seeds, run_command, sweep_table
from core import MetricsReport, ReferenceTrajectory, SolverError, TimeSeries, read_key_values
from online import OnlineResult

TINY_CONFIG = """
[plant]
kind = Linear

[excitation]
duration_s = 20
episodes = 2

[model]
M = 2
N = 2
d = 0
h_dim = 3
hidden = 6

[train.stage2]
epochs = 2
batch_size = 32
learning_rate = 0.01

[train.stage3]
epochs = 2
batch_size = 32
learning_rate = 0.01

[horizon]
N = 2
max_iters = 10

[online]
interval_s = 2
epochs = 1
batch_size = 16
learning_rate = 0.001

[reference]
mask = 1
segments = 0.5 @ 2.5; -0.5 @ 2.5

[run]
warmup_s = 1
sweep_seeds = 1
sweep_fractions = 0.5, 1.0
"""


def run_quiet(argv):
    """Run the CLI and return (exit code, stdout)"""
    buffer = io.StringIO()
    with contextlib.redirect_stdout(buffer), contextlib.redirect_stderr(io.StringIO()):
        code = run_command(argv)
    return code, buffer.getvalue()


def read_bytes(path):
    with open(path, "rb") as f:
        return f.read()


class TestPipeline(unittest.TestCase):
    """Test cases running the subcommands end to end on a tiny experiment"""

    @classmethod
    def setUpClass(cls):
        cls.test_dir = "test_cli_files"
        os.makedirs(cls.test_dir, exist_ok=True)
        cls.config_path = os.path.join(cls.test_dir, "tiny.ini")
        with open(cls.config_path, "w") as f:
            f.write(TINY_CONFIG)
        cls.out = os.path.join(cls.test_dir, "out")
        cls.common = ["--config", cls.config_path, "--out", cls.out, "--quiet"]
        cls.generate_code, _ = run_quiet(["generate-data"] + cls.common)
        cls.train_code, _ = run_quiet(["train"] + cls.common)
        cls.checkpoint = os.path.join(cls.out, "model", "checkpoint.txt")

    @classmethod
    def tearDownClass(cls):
        if os.path.exists(cls.test_dir):
            shutil.rmtree(cls.test_dir)

    def test_generate_data(self):
        self.assertEqual(self.generate_code, EXIT_OK)
        data_dir = os.path.join(self.out, "data")
        self.assertTrue(os.path.exists(os.path.join(data_dir, "episode_000.csv")))
        self.assertTrue(os.path.exists(os.path.join(data_dir, "episode_001.csv")))
        manifest = read_key_values(open(os.path.join(data_dir, "manifest.txt")).read())
        self.assertEqual(manifest["command"], "generate-data")
        self.assertEqual(int(manifest["seed.episode_000"]), derive_seeds(0, 2)[0])
        self.assertEqual(read_bytes(os.path.join(data_dir, "config.ini")).decode(), TINY_CONFIG)

        again = os.path.join(self.test_dir, "again")
        code, _ = run_quiet(["generate-data", "--config", self.config_path, "--out", again, "--quiet"])
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(read_bytes(os.path.join(data_dir, "episode_000.csv")),
                         read_bytes(os.path.join(again, "data", "episode_000.csv")))
        print("✓ generate-data test passed")

    def test_train(self):
        self.assertEqual(self.train_code, EXIT_OK)
        self.assertTrue(os.path.exists(self.checkpoint))
        history = pd.read_csv(os.path.join(self.out, "model", "loss_history.csv"))
        self.assertEqual(len(history), 2 * 3)
        print("✓ train test passed")

    def test_predict(self):
        episode = os.path.join(self.out, "data", "episode_000.csv")
        code, _ = run_quiet(["predict", "--checkpoint", self.checkpoint, "--episode", episode,
                             "--out", self.out, "--quiet"])
        self.assertEqual(code, EXIT_OK)
        rmse = pd.read_csv(os.path.join(self.out, "predict", "prediction_rmse.csv"))
        self.assertEqual(list(rmse["step"]), [1, 2])
        self.assertTrue(np.all(np.isfinite(rmse["nrmse"])))
        print("✓ predict test passed")

    def test_control_is_deterministic(self):
        outputs = []
        for name in ("control_a", "control_b"):
            out = os.path.join(self.test_dir, name)
            code, _ = run_quiet(["control", "--config", self.config_path, "--checkpoint", self.checkpoint,
                                 "--out", out, "--quiet"])
            self.assertEqual(code, EXIT_OK)
            outputs.append(os.path.join(out, "control"))
        for filename in ("closed_loop.csv", "solves.csv", "metrics.txt"):
            self.assertEqual(read_bytes(os.path.join(outputs[0], filename)),
                             read_bytes(os.path.join(outputs[1], filename)))
        loop = TimeSeries.read_csv(os.path.join(outputs[0], "closed_loop.csv"))
        self.assertEqual(len(loop), 50)
        self.assertTrue(np.all(np.abs(loop.u) <= 2.0))

        metrics_out = os.path.join(self.test_dir, "metrics")
        code, _ = run_quiet(["metrics", "--trajectory", os.path.join(outputs[0], "closed_loop.csv"),
                             "--warmup", "1", "--out", metrics_out])
        self.assertEqual(code, EXIT_OK)
        recomputed = MetricsReport.from_text(open(os.path.join(metrics_out, "metrics.txt")).read())
        reported = MetricsReport.from_text(open(os.path.join(outputs[0], "metrics.txt")).read())
        self.assertAlmostEqual(recomputed.e_mean, reported.e_mean, places=12)
        self.assertAlmostEqual(recomputed.control_cost, reported.control_cost, places=10)
        print("✓ control determinism test passed")

    def test_online(self):
        out = os.path.join(self.test_dir, "online_run")
        code, _ = run_quiet(["online", "--config", self.config_path, "--checkpoint", self.checkpoint,
                             "--out", out, "--quiet"])
        self.assertEqual(code, EXIT_OK)
        intervals = pd.read_csv(os.path.join(out, "online", "intervals.csv"))
        self.assertEqual(list(intervals["interval"]), [0, 1])
        self.assertTrue(np.isnan(intervals["train_loss_final"].iloc[-1]))
        self.assertTrue(os.path.exists(os.path.join(out, "online", "checkpoint_final.txt")))
        print("✓ online test passed")

    def test_sweep(self):
        out = os.path.join(self.test_dir, "sweep_run")
        code, _ = run_quiet(["sweep", "--config", self.config_path, "--data", os.path.join(self.out, "data"),
                             "--out", out, "--quiet"])
        self.assertEqual(code, EXIT_OK)
        table = pd.read_csv(os.path.join(out, "sweep", "sweep.csv"), float_precision="round_trip")
        self.assertEqual(list(table["row"]), ["run", "run", "aggregate", "aggregate"])
        self.assertEqual(list(table["fraction"].iloc[2:]), [0.5, 1.0])
        runs_dir = os.path.join(out, "sweep", "runs")
        for job_id in ("seed0_frac0.5", "seed0_frac1"):
            saved = pd.read_csv(os.path.join(runs_dir, f"{job_id}_results.csv"), float_precision="round_trip")
            self.assertEqual(len(saved), 1)
            run_row = table[(table["row"] == "run") & (table["fraction"] == saved["fraction"].iloc[0])].iloc[0]
            self.assertEqual(saved["e_mean"].iloc[0], run_row["e_mean"])
        print("✓ sweep test passed")

    def test_sweep_resume_reuses_completed_runs(self):
        out = os.path.join(self.test_dir, "sweep_resume")
        argv = ["sweep", "--config", self.config_path, "--data", os.path.join(self.out, "data"), "--out", out, "--quiet"]
        self.assertEqual(run_quiet(argv)[0], EXIT_OK)
        saved_path = os.path.join(out, "sweep", "runs", "seed0_frac0.5_results.csv")
        saved = pd.read_csv(saved_path, float_precision="round_trip")
        saved.loc[0, "e_mean"] = 123.0
        saved.to_csv(saved_path, index=False)

        self.assertEqual(run_quiet(argv + ["--resume"])[0], EXIT_OK)
        table = pd.read_csv(os.path.join(out, "sweep", "sweep.csv"))
        runs = table[table["row"] == "run"]
        self.assertEqual(list(runs["e_mean"])[0], 123.0)
        manifest = read_key_values(open(os.path.join(out, "sweep", "manifest.txt")).read())
        self.assertEqual((manifest["runs"], manifest["reused_runs"]), ("0", "2"))

        self.assertEqual(run_quiet(argv)[0], EXIT_OK)
        table = pd.read_csv(os.path.join(out, "sweep", "sweep.csv"))
        self.assertNotEqual(list(table[table["row"] == "run"]["e_mean"])[0], 123.0)
        print("✓ sweep resume test passed")


class TestExitCodes(unittest.TestCase):
    """Test cases for argument handling and error mapping"""

    def setUp(self):
        self.test_dir = "test_cli_codes"
        os.makedirs(self.test_dir, exist_ok=True)

    def tearDown(self):
        if os.path.exists(self.test_dir):
            shutil.rmtree(self.test_dir)

    def test_zero_error_metrics(self):
        n = 101
        ref = ReferenceTrajectory(np.ones((n, 1)), (0,), 0.1)
        series = TimeSeries(np.ones((n, 1)), np.zeros((n, 1)), 0.1)
        path = series.to_csv(os.path.join(self.test_dir, "tracked.csv"), extra=ref.to_frame())
        code, output = run_quiet(["metrics", "--trajectory", path, "--warmup", "4"])
        self.assertEqual(code, EXIT_OK)
        report = MetricsReport.from_text(output)
        self.assertEqual(report.e_mean, 0.0)
        self.assertEqual(report.e_max, 0.0)
        print("✓ Zero-error metrics command test passed")

    def test_metrics_default_warmup(self):
        n = 101
        ref = ReferenceTrajectory(np.zeros((n, 1)), (0,), 0.1)
        series = TimeSeries(np.full((n, 1), 0.1), np.zeros((n, 1)), 0.1)
        path = series.to_csv(os.path.join(self.test_dir, "offset.csv"), extra=ref.to_frame())
        code, output = run_quiet(["metrics", "--trajectory", path])
        self.assertEqual(code, EXIT_OK)
        report = MetricsReport.from_text(output)
        self.assertEqual(report.warmup_s, 4.0)
        self.assertAlmostEqual(report.e_mean, 0.0061, places=12)
        self.assertGreaterEqual(report.e_max, report.e_mean)
        print("✓ Metrics default warm-up test passed")

    def test_online_solver_violations_are_errors(self):
        series = TimeSeries(np.zeros((3, 1)), np.zeros((3, 1)), 0.1)
        clean = OnlineResult(series, [], None, pd.DataFrame(), None)
        check_solver(clean)
        for counts in ((1, 0), (0, 2)):
            with self.assertRaises(SolverError):
                check_solver(OnlineResult(series, [], None, pd.DataFrame(), None, 0, *counts))
        print("✓ Online solver check test passed")

    def test_usage_errors(self):
        self.assertEqual(run_quiet(["control", "--bogus"])[0], EXIT_CONFIG)
        self.assertEqual(run_quiet(["control", "--quiet"])[0], EXIT_CONFIG)
        self.assertEqual(run_quiet([])[0], EXIT_CONFIG)
        self.assertEqual(run_quiet(["--help"])[0], EXIT_OK)
        print("✓ Usage error test passed")

    def test_config_and_io_errors(self):
        bad = os.path.join(self.test_dir, "bad.ini")
        with open(bad, "w") as f:
            f.write("[plant]\nkind = Pendulum\n[reference]\nsegments = 1 @ 5\n")
        self.assertEqual(run_quiet(["generate-data", "--config", bad, "--quiet"])[0], EXIT_CONFIG)
        missing = os.path.join(self.test_dir, "missing.ini")
        self.assertEqual(run_quiet(["generate-data", "--config", missing, "--quiet"])[0], EXIT_IO)
        print("✓ Config and I/O error test passed")


class TestSweepTable(unittest.TestCase):
    """Test cases for the sweep summary table"""

    def test_rows_and_aggregates(self):
        results = []
        for seed in range(5):
            for fraction in (0.1, 0.5, 1.0):
                results.append((seed, fraction, {"e_mean": fraction * (seed + 1), "e_max": 1.0,
                                                 "control_cost": 2.0}))
        table = sweep_table(results)
        self.assertEqual(len(table), 15 + 3)
        aggregates = table[table["row"] == "aggregate"]
        self.assertEqual(list(aggregates["fraction"]), [0.1, 0.5, 1.0])
        full = aggregates[aggregates["fraction"] == 1.0].iloc[0]
        self.assertAlmostEqual(full["e_mean"], 3.0)
        self.assertAlmostEqual(full["e_mean_std"], np.std([1.0, 2.0, 3.0, 4.0, 5.0]))
        self.assertEqual(full["e_max_std"], 0.0)
        print("✓ Sweep table test passed")

    def test_failed_run_is_nan(self):
        table = sweep_table([(0, 1.0, None), (1, 1.0, {"e_mean": 1.0, "e_max": 1.0, "control_cost": 1.0})])
        self.assertTrue(np.isnan(table["e_mean"].iloc[0]))
        self.assertAlmostEqual(table["e_mean"].iloc[2], 1.0)
        print("✓ Failed sweep run test passed")


if __name__ == '__main__':
    unittest.main()
