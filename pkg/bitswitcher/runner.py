"""
Background queue for independent experiment jobs (sweeps, ablations, fine-tuning).
"""
import logging
import threading
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional


@dataclass
class Job:
    name: str
    func: Callable[..., Any]
    kwargs: Dict[str, Any]


class ExperimentQueue(threading.Thread):
    """
    A thread that runs queued jobs one after another.

    A failing job is logged and reported through ``on_error``; the remaining
    jobs still run. ``stop()`` ends the queue after the current job.

    Args:
        on_progress (callable, optional): Called with (job name, percent done).
        on_finished (callable, optional): Called with (job name, result).
        on_error (callable, optional): Called with (job name, error message).
        on_all_finished (callable, optional): Called once the queue is drained.
    """

    def __init__(self, on_progress: Optional[Callable[[str, int], None]] = None,
                 on_finished: Optional[Callable[[str, Any], None]] = None,
                 on_error: Optional[Callable[[str, str], None]] = None,
                 on_all_finished: Optional[Callable[[], None]] = None):
        super().__init__(daemon=True)
        self.job_queue: List[Job] = []
        self.results: Dict[str, Any] = {}
        self.errors: Dict[str, str] = {}
        self.is_stopped = False
        self.on_progress = on_progress
        self.on_finished = on_finished
        self.on_error = on_error
        self.on_all_finished = on_all_finished

    def add_job(self, name: str, func: Callable[..., Any], **kwargs):
        """
        Adds a job to the queue.

        Args:
            name (str): Unique job name, used as the result key.
            func (callable): Job function, called with ``kwargs``.
        """
        if name in (job.name for job in self.job_queue):
            raise ValueError(f"duplicate job name '{name}'")
        self.job_queue.append(Job(name, func, kwargs))

    def stop(self):
        self.is_stopped = True

    def run(self):
        total = len(self.job_queue)
        for done, job in enumerate(self.job_queue):
            if self.is_stopped:
                logging.info(f"Experiment queue stopped before job {job.name}")
                break
            try:
                logging.info(f"Starting job: {job.name}")
                result = job.func(**job.kwargs)
                self.results[job.name] = result
                if self.on_finished is not None:
                    self.on_finished(job.name, result)
            except Exception as e:
                logging.error(f"Job error for {job.name}: {str(e)}")
                self.errors[job.name] = str(e)
                if self.on_error is not None:
                    self.on_error(job.name, str(e))
            if self.on_progress is not None:
                self.on_progress(job.name, int(100 * (done + 1) / total))

        if not self.is_stopped and self.on_all_finished is not None:
            self.on_all_finished()
        self.is_stopped = False

    def run_all(self) -> Dict[str, Any]:
        """Starts the thread, waits for it and returns the results by job name."""
        self.start()
        self.join()
        return self.results
