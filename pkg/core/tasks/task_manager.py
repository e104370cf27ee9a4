import logging
import threading
import time
from collections import OrderedDict
from concurrent.futures import Future, ThreadPoolExecutor
from enum import Enum
from typing import Any, Callable, Dict, Iterable, List, Optional

logger = logging.getLogger(__name__)


class TaskStatus(Enum):
    PENDING = "pending"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"


class TaskManager:
    """
    Thread-pool runner for independent numerical jobs (fit starts, Monte-Carlo
    realizations). Results are always collected in submission order, so the
    outcome does not depend on ``max_workers``.
    """

    def __init__(self, max_workers: int = 1, max_task_history: int = 10000):
        if max_workers <= 0:
            raise ValueError("max_workers must be positive")
        if max_task_history <= 0:
            raise ValueError("max_task_history must be positive")

        self.max_workers = max_workers
        self.max_task_history = max_task_history
        self.executor = ThreadPoolExecutor(max_workers=self.max_workers, thread_name_prefix="msgp_worker_")
        self.tasks: OrderedDict[str, Dict[str, Any]] = OrderedDict()
        self.futures: Dict[str, Future] = {}
        self.lock = threading.RLock()
        self._shutdown = False

    def submit_task(self, task_name: str, task_fn: Callable, *args, **kwargs) -> Future:
        if not task_name or not isinstance(task_name, str):
            raise ValueError("task_name must be a non-empty string")
        if not callable(task_fn):
            raise ValueError("task_fn must be callable")
        if self._shutdown:
            raise RuntimeError("TaskManager is shutdown")

        with self.lock:
            if task_name in self.tasks and self.tasks[task_name]["status"] in (
                TaskStatus.PENDING.value,
                TaskStatus.RUNNING.value,
            ):
                logger.warning(f"Task '{task_name}' is already queued, returning existing future")
                return self.futures[task_name]
            self.tasks[task_name] = {
                "name": task_name,
                "status": TaskStatus.PENDING.value,
                "exception": None,
                "start_time": time.time(),
                "finish_time": None,
            }
            self._trim_history()

        future = self.executor.submit(self._wrap_task, task_name, task_fn, *args, **kwargs)
        with self.lock:
            self.futures[task_name] = future
        return future

    def _trim_history(self) -> None:
        while len(self.tasks) > self.max_task_history:
            task_id, _ = self.tasks.popitem(last=False)
            self.futures.pop(task_id, None)

    def _set(self, task_name: str, **fields) -> None:
        with self.lock:
            if task_name in self.tasks:
                self.tasks[task_name].update(fields)

    def _wrap_task(self, task_name: str, task_fn: Callable, *args, **kwargs) -> Any:
        self._set(task_name, status=TaskStatus.RUNNING.value)
        try:
            result = task_fn(*args, **kwargs)
        except Exception as e:
            self._set(
                task_name,
                status=TaskStatus.FAILED.value,
                exception=str(e),
                finish_time=time.time(),
            )
            logger.debug(f"Task {task_name} failed: {e}")
            raise
        self._set(task_name, status=TaskStatus.COMPLETED.value, finish_time=time.time())
        return result

    def map_ordered(self, prefix: str, fn: Callable, items: Iterable) -> List[Any]:
        """Run ``fn(item)`` for every item and return the results in item order.

        The first failure (in item order) is re-raised after all tasks settle.
        """
        items = list(items)
        if self.max_workers == 1:
            return [self._run_inline(f"{prefix}-{i}", fn, item) for i, item in enumerate(items)]
        futures = [self.submit_task(f"{prefix}-{i}", fn, item) for i, item in enumerate(items)]
        errors = [f.exception() for f in futures]
        for error in errors:
            if error is not None:
                raise error
        return [f.result() for f in futures]

    def _run_inline(self, task_name: str, fn: Callable, item: Any) -> Any:
        with self.lock:
            self.tasks[task_name] = {
                "name": task_name,
                "status": TaskStatus.PENDING.value,
                "exception": None,
                "start_time": time.time(),
                "finish_time": None,
            }
            self._trim_history()
        return self._wrap_task(task_name, fn, item)

    def get_task_status(self, task_name: str) -> Dict[str, Any]:
        with self.lock:
            return self.tasks.get(task_name, {}).copy()

    def list_tasks(self, filter_status: Optional[str] = None) -> Dict[str, Dict[str, Any]]:
        with self.lock:
            if filter_status:
                return {k: v for k, v in self.tasks.items() if v["status"] == filter_status}
            return self.tasks.copy()

    def get_task_count(self, status: Optional[str] = None) -> int:
        with self.lock:
            if status:
                return sum(1 for task in self.tasks.values() if task["status"] == status)
            return len(self.tasks)

    def shutdown(self, wait: bool = True) -> None:
        if self._shutdown:
            return
        self._shutdown = True
        with self.lock:
            for future in self.futures.values():
                if not future.done():
                    future.cancel()
        self.executor.shutdown(wait=wait)
        logger.debug("TaskManager shutdown complete")

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.shutdown()
