"""
Test for run records, result tables and parallel run execution
"""

import os
import shutil
import time
import unittest

import pandas as pd

from job_manager import JobManager, JobStatus


class TestJobManager(unittest.TestCase):
    """Test cases for job manager"""

    def setUp(self):
        """Set up test environment"""
        self.test_jobs_dir = "test_jobs"
        self.job_manager = JobManager(jobs_dir=self.test_jobs_dir)

    def tearDown(self):
        """Clean up test environment"""
        if os.path.exists(self.test_jobs_dir):
            shutil.rmtree(self.test_jobs_dir)

    def test_create_job(self):
        """Test creating a new run record"""
        config = {'seed': 3, 'fraction': 0.5, 'plant': 'VanDerPol'}
        job_data = self.job_manager.create_job("sweep_000", 4, config)

        self.assertEqual(job_data['job_id'], "sweep_000")
        self.assertEqual(job_data['status'], JobStatus.QUEUED.value)
        self.assertEqual(job_data['total_steps'], 4)
        self.assertEqual(job_data['completed_steps'], 0)
        self.assertEqual(job_data['config'], config)
        self.assertIsNone(job_data['summary'])
        print("✓ Job creation test passed")

    def test_get_and_update_job(self):
        """Test retrieving and updating a run record"""
        self.job_manager.create_job("sweep_001", 4, {'seed': 1})
        self.job_manager.update_job("sweep_001", {'status': JobStatus.RUNNING.value, 'completed_steps': 2})

        job_data = self.job_manager.get_job("sweep_001")
        self.assertEqual(job_data['status'], JobStatus.RUNNING.value)
        self.assertEqual(job_data['completed_steps'], 2)
        self.assertIsNone(self.job_manager.get_job("missing"))
        print("✓ Job update test passed")

    def test_list_jobs_newest_first(self):
        """Test listing run records newest first"""
        for i in range(3):
            self.job_manager.create_job(f"sweep_{i:03d}", 4, {'seed': i})
            time.sleep(0.01)
        jobs = self.job_manager.list_jobs()
        self.assertEqual([job['job_id'] for job in jobs], ["sweep_002", "sweep_001", "sweep_000"])
        print("✓ Job listing test passed")

    def test_save_and_load_partial_results(self):
        """Test saving and loading a run's result table"""
        results_df = pd.DataFrame({'row': ['run', 'run'], 'seed': [0, 1], 'e_mean': [0.01, 0.02]})
        self.job_manager.save_partial_results("sweep_results", results_df)

        loaded_df = self.job_manager.load_partial_results("sweep_results")
        self.assertIsNotNone(loaded_df)
        self.assertEqual(len(loaded_df), 2)
        self.assertEqual(loaded_df['e_mean'].iloc[1], 0.02)

        exact = pd.DataFrame({"e_mean": [0.1 + 0.2, 1.0 / 3.0]})
        self.job_manager.save_partial_results("sweep_results", exact)
        self.assertEqual(self.job_manager.load_partial_results("sweep_results")["e_mean"].tolist(), exact["e_mean"].tolist())
        self.assertIsNone(self.job_manager.load_partial_results("missing"))
        print("✓ Partial results save/load test passed")

    def test_run_job_records_completion(self):
        """Test a successful run moves to completed with its summary"""
        self.job_manager.create_job("run_ok", 3, {'seed': 0})
        seen = []

        def work(progress):
            for step in range(1, 4):
                progress(step, 3)
                seen.append(self.job_manager.get_job("run_ok")['status'])
            return {'e_mean': 0.5}

        summary = self.job_manager.run_job("run_ok", work)
        self.assertEqual(summary, {'e_mean': 0.5})
        self.assertEqual(seen, [JobStatus.RUNNING.value] * 3)
        job_data = self.job_manager.get_job("run_ok")
        self.assertEqual(job_data['status'], JobStatus.COMPLETED.value)
        self.assertEqual(job_data['completed_steps'], 3)
        self.assertEqual(job_data['summary'], {'e_mean': 0.5})
        print("✓ Run completion test passed")

    def test_run_job_records_failure(self):
        """Test a failing run is recorded, not raised"""
        self.job_manager.create_job("run_bad", 3, {'seed': 0})

        def work(progress):
            raise RuntimeError("plant diverged")

        self.assertIsNone(self.job_manager.run_job("run_bad", work))
        job_data = self.job_manager.get_job("run_bad")
        self.assertEqual(job_data['status'], JobStatus.FAILED.value)
        self.assertEqual(job_data['error'], "RuntimeError: plant diverged")
        self.assertIsNone(self.job_manager.run_job("never_created", work))
        print("✓ Run failure test passed")

    def test_run_parallel_keeps_order(self):
        """Test parallel summaries come back in submission order"""
        runs = []
        for i in range(6):
            job_id = f"parallel_{i}"
            self.job_manager.create_job(job_id, 1, {'seed': i})

            def work(progress, i=i):
                time.sleep(0.01 * (6 - i))
                return {'seed': i}

            runs.append((job_id, work))

        summaries = self.job_manager.run_parallel(runs, workers=3)
        self.assertEqual(summaries, [{'seed': i} for i in range(6)])
        with self.assertRaises(ValueError):
            self.job_manager.run_parallel(runs, workers=0)
        print("✓ Parallel run order test passed")


if __name__ == '__main__':
    unittest.main()
