"""
Job Manager Module for SurrogateMPC
Persistent run records, result tables and parallel execution of experiment runs
"""

import json
import logging
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import pandas as pd

logger = logging.getLogger(__name__)


class JobStatus(Enum):
    """Run status enumeration"""
    QUEUED = "queued"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"


# A run's work receives a progress callback (done, total) and returns a JSON-able summary
RunWork = Callable[[Callable[[int, int], None]], Dict]


class JobManager:
    """Manages experiment runs with one JSON record per run"""

    def __init__(self, jobs_dir: str = "runs"):
        """
        Initialize job manager

        Args:
            jobs_dir: Directory to store run records and result tables
        """
        self.jobs_dir = jobs_dir
        os.makedirs(jobs_dir, exist_ok=True)

    def create_job(self, job_id: str, total_steps: int, config: Dict) -> Dict:
        """
        Create a new run record

        Args:
            job_id: Unique run identifier
            total_steps: Number of progress steps the run will report
            config: Run configuration (seed, data fraction, config echo, ...)

        Returns:
            Run record dictionary
        """
        now = datetime.now().isoformat()
        job_data = {
            'job_id': job_id,
            'status': JobStatus.QUEUED.value,
            'total_steps': total_steps,
            'completed_steps': 0,
            'created_at': now,
            'updated_at': now,
            'config': config,
            'summary': None,
            'error': None
        }
        self._save_job(job_id, job_data)
        return job_data

    def get_job(self, job_id: str) -> Optional[Dict]:
        """
        Get a run record

        Args:
            job_id: Run identifier

        Returns:
            Run record or None if missing, empty or unreadable
        """
        job_file = self._job_file(job_id)
        if not os.path.exists(job_file):
            return None
        try:
            with open(job_file, 'r') as f:
                content = f.read()
            if not content.strip():
                return None
            return json.loads(content)
        except (OSError, json.JSONDecodeError):
            return None

    def update_job(self, job_id: str, updates: Dict):
        """Merge updates into a run record and stamp updated_at"""
        job_data = self.get_job(job_id)
        if job_data:
            job_data.update(updates)
            job_data['updated_at'] = datetime.now().isoformat()
            self._save_job(job_id, job_data)

    def list_jobs(self) -> List[Dict]:
        """All readable run records, newest first"""
        jobs = []
        for filename in os.listdir(self.jobs_dir):
            if filename.endswith('.json'):
                job_data = self.get_job(filename[:-5])
                if job_data:
                    jobs.append(job_data)
        jobs.sort(key=lambda x: x.get('created_at', ''), reverse=True)
        return jobs

    def save_partial_results(self, job_id: str, results_df: pd.DataFrame):
        """Write (or overwrite) the result table stored next to a run record"""
        results_df.to_csv(self._results_file(job_id), index=False, float_format="%.17g", lineterminator="\n")

    def load_partial_results(self, job_id: str) -> Optional[pd.DataFrame]:
        results_file = self._results_file(job_id)
        if os.path.exists(results_file):
            return pd.read_csv(results_file, float_precision="round_trip")
        return None

    def run_job(self, job_id: str, work: RunWork) -> Optional[Dict]:
        """Execute a run in the calling thread, recording status transitions; failures are recorded, not raised"""
        if not self.get_job(job_id):
            logger.warning(f"Run {job_id} has no record; skipping")
            return None

        def progress(done: int, total: int):
            self.update_job(job_id, {'completed_steps': done, 'total_steps': total})

        self.update_job(job_id, {'status': JobStatus.RUNNING.value})
        logger.info(f"Run {job_id} started")
        try:
            summary = work(progress)
        except Exception as e:
            logger.error(f"Run {job_id} failed: {e}")
            self.update_job(job_id, {'status': JobStatus.FAILED.value, 'error': f"{type(e).__name__}: {e}"})
            return None
        job_data = self.get_job(job_id) or {}
        self.update_job(job_id, {'status': JobStatus.COMPLETED.value, 'summary': summary,
                                 'completed_steps': job_data.get('total_steps', 0)})
        logger.info(f"Run {job_id} completed")
        return summary

    def run_parallel(self, runs: Sequence[Tuple[str, RunWork]], workers: int = 1) -> List[Optional[Dict]]:
        """
        Execute created runs on a thread pool

        Args:
            runs: (job_id, work) pairs
            workers: Pool size

        Returns:
            Summaries (None for failed runs) in the order of runs, whatever order they finish in
        """
        if workers < 1:
            raise ValueError(f"workers must be >= 1, got {workers}")
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(self.run_job, job_id, work) for job_id, work in runs]
            return [future.result() for future in futures]

    def _job_file(self, job_id: str) -> str:
        return os.path.join(self.jobs_dir, f"{job_id}.json")

    def _results_file(self, job_id: str) -> str:
        return os.path.join(self.jobs_dir, f"{job_id}_results.csv")

    def _save_job(self, job_id: str, job_data: Dict):
        """
        Save a run record atomically so readers never see a partial file

        Args:
            job_id: Run identifier
            job_data: Run record
        """
        os.makedirs(self.jobs_dir, exist_ok=True)
        temp_path = None
        try:
            with tempfile.NamedTemporaryFile(mode='w', dir=self.jobs_dir, prefix=f'{job_id}_', suffix='.tmp',
                                             delete=False) as temp_file:
                temp_path = temp_file.name
                json.dump(job_data, temp_file, indent=2)
            os.replace(temp_path, self._job_file(job_id))
        except Exception:
            if temp_path and os.path.exists(temp_path):
                try:
                    os.remove(temp_path)
                except OSError:
                    pass
            raise
