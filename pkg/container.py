import os
import logging
import threading
from concurrent.futures import ThreadPoolExecutor


class Container:
    """Process-wide services, each built on first use."""

    def __init__(self):
        self._logger = None
        self._executor = None
        self._threads = int(os.environ.get("PLDC_THREADS", os.cpu_count() or 1))
        self._log_level = os.environ.get("PLDC_LOG_LEVEL", "INFO").upper()

    def configure(self, threads: int | None = None, log_level: str | None = None):
        """Applies CLI overrides; must run before the logger or executor is first used."""
        if threads is not None:
            if threads < 1:
                raise ValueError("threads must be at least 1")
            self._threads = threads
        if log_level is not None:
            self._log_level = log_level.upper()

    @property
    def threads(self) -> int:
        return self._threads

    @property
    def logger(self):
        if not self._logger:
            logging.basicConfig(
                level=getattr(logging, self._log_level, logging.INFO),
                format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
            )
            self._logger = logging.getLogger("PLDC")
        return self._logger

    @property
    def executor(self):
        if not self._executor:
            self._executor = ThreadPoolExecutor(max_workers=self._threads, thread_name_prefix="pldc")
            self.logger.debug(f"Started worker pool with {self._threads} threads")
        return self._executor

    def parallel_map(self, fn, items):
        """Maps ``fn`` over ``items``, returning results in input order."""
        items = list(items)
        # calls made from a worker thread run inline
        nested = threading.current_thread().name.startswith("pldc")
        if self._threads == 1 or len(items) < 2 or nested:
            return [fn(item) for item in items]
        return list(self.executor.map(fn, items))

    def shutdown(self):
        if self._executor:
            self._executor.shutdown(wait=True)
            self._executor = None


container = Container()
