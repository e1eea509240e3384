"""
Test for online learning: interval bookkeeping, updates and the no-update path
"""

import math
import unittest

import numpy as np

from core import ReferenceTrajectory, TimeSeries, compute_metrics
from mpc import HorizonSpec, run_closed_loop
from online import INTERVAL_COLUMNS, BufferPolicy, OnlineSpec, interval_metrics, run_online
from plants import PlantConfig, make_plant
from surrogate import SurrogateModel, fingerprint


class TestOnline(unittest.TestCase):
    """Test cases for run_online"""

    def setUp(self):
        self.plant = make_plant(PlantConfig("Linear"))
        self.ref = ReferenceTrajectory.piecewise_constant([(0.5, 1.5), (-0.5, 1.5)], 0.1, (0,))
        self.spec = HorizonSpec(N=2, max_iters=10)
        self.model = SurrogateModel.create(1, 1, M=2, N=2, d=0, h_dim=3, hidden=6, seed=5)
        self.y0 = np.zeros(1)

    def test_no_update_matches_closed_loop(self):
        online = run_online(self.plant, self.model, self.ref, self.spec, OnlineSpec(interval_s=1.0, epochs=0),
                            self.y0, 3.0, warmup=1.0)
        plain = run_closed_loop(self.plant, self.model, self.ref, self.spec, self.y0, 3.0, warmup=1.0)
        np.testing.assert_array_equal(online.series.z, plain.series.z)
        np.testing.assert_array_equal(online.series.u, plain.series.u)
        self.assertEqual(online.metrics, plain.metrics)
        self.assertEqual((online.feasibility_violations, online.descent_violations),
                         (plain.feasibility_violations, plain.descent_violations))
        self.assertEqual((online.feasibility_violations, online.descent_violations), (0, 0))
        self.assertEqual(len(online.intervals), 3)
        self.assertTrue(all(not r.updated for r in online.intervals))
        self.assertTrue(all(math.isnan(r.train_loss_final) for r in online.intervals))
        print("✓ Update-free online run test passed")

    def test_interval_metrics_match_subranges(self):
        result = run_online(self.plant, self.model, self.ref, self.spec, OnlineSpec(interval_s=1.0, epochs=0),
                            self.y0, 3.0, warmup=1.0)
        for report in result.intervals:
            start, stop = 10 * report.interval, 10 * (report.interval + 1)
            part = result.series.slice(start, stop)
            sub_ref = ReferenceTrajectory(self.ref.targets[start:stop], (0,), 0.1)
            expected = compute_metrics(part, sub_ref, 0.9, 0.1)
            self.assertAlmostEqual(report.metrics.e_mean, expected.e_mean, places=12)
            self.assertEqual(report.metrics, interval_metrics(result.series, self.ref, start, stop))
        print("✓ Interval metrics test passed")

    def test_interval_mean_never_exceeds_max(self):
        """A constant tracking error gives e_mean equal to e_max on every interval"""
        targets = np.linspace(-1.0, 1.0, 250).reshape(-1, 1)
        ref = ReferenceTrajectory(targets, (0,), 0.1)
        series = TimeSeries(targets + 0.1, np.zeros((250, 1)), 0.1)
        for start, stop in ((0, 250), (100, 130), (247, 250)):
            report = interval_metrics(series, ref, start, stop)
            self.assertAlmostEqual(report.e_max, 0.01, places=12)
            self.assertAlmostEqual(report.e_mean, 0.01, places=12)
            self.assertLessEqual(report.e_mean, report.e_max * (1 + 1e-12))
        with self.assertRaises(ValueError):
            interval_metrics(series, ref, 10, 12)
        print("✓ Interval mean bound test passed")

    def test_updates_change_model_between_intervals(self):
        before = fingerprint(self.model)
        ospec = OnlineSpec(interval_s=1.5, epochs=1, learning_rate=1e-3, batch_size=8, symmetrize=False)
        result = run_online(self.plant, self.model, self.ref, self.spec, ospec, self.y0, 3.0, warmup=1.0)
        first, last = result.intervals
        self.assertTrue(first.updated)
        self.assertTrue(np.isfinite(first.train_loss_final))
        self.assertFalse(last.updated)
        self.assertTrue(math.isnan(last.train_loss_final))
        self.assertEqual(first.model_hash, before)
        self.assertNotEqual(last.model_hash, first.model_hash)
        self.assertEqual(fingerprint(result.model), last.model_hash)
        self.assertEqual(fingerprint(self.model), before)
        print("✓ Online update test passed")

    def test_sliding_aggregate(self):
        ospec = OnlineSpec(interval_s=1.0, epochs=1, learning_rate=1e-3, batch_size=8, symmetrize=False,
                           buffer_policy=BufferPolicy.SLIDING_AGGREGATE, aggregate_intervals=2)
        result = run_online(self.plant, self.model, self.ref, self.spec, ospec, self.y0, 3.0, warmup=1.0)
        self.assertEqual([r.updated for r in result.intervals], [True, True, False])
        self.assertEqual(result.failed_updates, 0)
        print("✓ Sliding aggregate test passed")

    def test_too_few_windows_keeps_model(self):
        ospec = OnlineSpec(interval_s=0.5, epochs=1, symmetrize=False)
        result = run_online(self.plant, self.model, self.ref, self.spec, ospec, self.y0, 1.0, warmup=0.0)
        self.assertEqual(result.failed_updates, 1)
        self.assertEqual(result.intervals[0].model_hash, result.intervals[1].model_hash)
        print("✓ Failed update test passed")

    def test_partial_interval_is_folded(self):
        ospec = OnlineSpec(interval_s=1.0, epochs=0)
        result = run_online(self.plant, self.model, self.ref, self.spec, ospec, self.y0, 2.5, warmup=1.0)
        self.assertEqual(len(result.intervals), 2)
        self.assertEqual(len(result.series), 25)
        print("✓ Partial interval test passed")

    def test_invalid_schedules(self):
        with self.assertRaises(ValueError):
            run_online(self.plant, self.model, self.ref, self.spec, OnlineSpec(interval_s=2.0), self.y0, 3.0)
        with self.assertRaises(ValueError):
            run_online(self.plant, self.model, self.ref, self.spec, OnlineSpec(interval_s=0.25), self.y0, 3.0)
        with self.assertRaises(ValueError):
            run_online(self.plant, self.model, self.ref, self.spec, OnlineSpec(interval_s=0.2, epochs=0), self.y0, 3.0)
        self.assertEqual(len(OnlineSpec(epochs=-1, aggregate_intervals=0).validate()), 2)
        print("✓ Online schedule validation test passed")

    def test_interval_frame(self):
        result = run_online(self.plant, self.model, self.ref, self.spec, OnlineSpec(interval_s=1.0, epochs=0),
                            self.y0, 3.0, warmup=1.0)
        frame = result.interval_frame()
        self.assertEqual(list(frame.columns), INTERVAL_COLUMNS)
        self.assertEqual(list(frame["interval"]), [0, 1, 2])
        print("✓ Interval table test passed")


if __name__ == '__main__':
    unittest.main()
