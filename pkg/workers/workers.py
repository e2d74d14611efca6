"""Workers for independent per-ε runs."""

import logging
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Callable, Dict, List, Optional, Sequence

from services.errors import SolverError

logger = logging.getLogger(__name__)


class SweepJob:
    """A module-level function and the picklable payload it is called with."""

    def __init__(self, name: str, func: Callable[[Dict[str, Any]], Any], payload: Dict[str, Any]):
        self.name = name
        self.func = func
        self.payload = payload


class JobResult:
    def __init__(self, name: str, success: bool, result: Any = None, error: str = ""):
        self.name = name
        self.success = success
        self.result = result
        self.error = error

    def to_dict(self) -> Dict[str, Any]:
        return {"name": self.name, "success": self.success, "error": self.error}


class SweepWorker:
    """Runs jobs serially or on a process pool; results come back in submission order.

    A failed job is logged and reported through `finished(False, None, message)`;
    the worker itself never raises for it.
    """

    def __init__(
        self,
        jobs: Sequence[SweepJob],
        workers: int = 1,
        finished: Optional[Callable[[bool, Any, str], None]] = None,
    ):
        self._jobs = list(jobs)
        self._workers = max(1, int(workers))
        self._finished = finished

    def _emit(self, result: JobResult) -> None:
        if self._finished is not None:
            self._finished(result.success, result.result, result.error)

    def run(self) -> List[JobResult]:
        if not self._jobs:
            return []
        logger.info(f"Running {len(self._jobs)} job(s) on {self._workers} worker(s)")
        results = self._run_pool() if self._workers > 1 and len(self._jobs) > 1 else self._run_serial()
        failed = [r.name for r in results if not r.success]
        if failed:
            logger.warning(f"{len(failed)} job(s) failed: {', '.join(failed)}")
        return results

    def _run_serial(self) -> List[JobResult]:
        results = []
        for job in self._jobs:
            try:
                result = JobResult(job.name, True, job.func(job.payload))
            except Exception as exc:
                logger.exception(f"Error while running job {job.name}")
                result = JobResult(job.name, False, None, f"{type(exc).__name__}: {exc}")
            self._emit(result)
            results.append(result)
        return results

    def _run_pool(self) -> List[JobResult]:
        results = []
        with ProcessPoolExecutor(max_workers=min(self._workers, len(self._jobs))) as pool:
            futures = [pool.submit(job.func, job.payload) for job in self._jobs]
            for job, future in zip(self._jobs, futures):
                try:
                    result = JobResult(job.name, True, future.result())
                except Exception as exc:
                    logger.exception(f"Error while running job {job.name}")
                    result = JobResult(job.name, False, None, f"{type(exc).__name__}: {exc}")
                self._emit(result)
                results.append(result)
        return results


def collect(results: Sequence[JobResult]) -> List[Any]:
    """Job results in order, raising the first failure."""
    for r in results:
        if not r.success:
            raise SolverError(f"job {r.name} failed: {r.error}")
    return [r.result for r in results]
