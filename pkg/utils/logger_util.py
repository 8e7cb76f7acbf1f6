import logging
import logging.handlers
import multiprocessing
import os
import sys

from pathlib import Path
from typing import Optional

LOG_FORMAT = '%(asctime)s | %(name)s | %(levelname)s | %(filename)s:%(lineno)d | %(process)d | %(message)s'
DATE_FORMAT = '%m-%d %H:%M:%S'


class MultiProcessLoggerUtil:
    """Collects records from the main process and pool workers through one
    queue; a dedicated process writes them to ``<log_dir>/<file_name>.log``
    and stdout."""

    def __init__(self, file_name: str, log_dir: Optional[str] = None, level: int = logging.INFO) -> None:
        self.manager = multiprocessing.Manager()
        self.queue = self.manager.Queue(-1)
        self.file_name = file_name
        self.log_dir = log_dir or os.path.join(Path(__file__).parent, '..', 'logs')
        self.level = level

        self.process = multiprocessing.get_context('fork').Process(
            target=self._process_target,
        )
        self.process.start()

        self.redirect_main_process_log_to_queue()

    def get_log_file_path(self) -> str:
        Path(self.log_dir).mkdir(parents=True, exist_ok=True)
        return os.path.join(self.log_dir, f'{self.file_name}.log')

    def redirect_main_process_log_to_queue(self):

        main_process_id = os.getpid()

        def filter(record: logging.LogRecord):
            return record.process == main_process_id

        root = logging.getLogger()
        root.setLevel(self.level)

        self.handler = logging.handlers.QueueHandler(self.queue)
        self.handler.addFilter(filter)
        root.addHandler(self.handler)

    def init_logger_configure(self):
        root = logging.getLogger()
        root.setLevel(self.level)
        formatter = logging.Formatter(fmt=LOG_FORMAT, datefmt=DATE_FORMAT)

        file_handler = logging.handlers.RotatingFileHandler(
            self.get_log_file_path(),
            mode='w',
            encoding='utf-8',
        )
        file_handler.setLevel(self.level)
        file_handler.setFormatter(formatter)
        root.addHandler(file_handler)

        std_handler = logging.StreamHandler(sys.stdout)
        std_handler.setLevel(logging.DEBUG)
        std_handler.setFormatter(formatter)
        root.addHandler(std_handler)

    def _process_target(self):
        self.init_logger_configure()
        while True:
            record: logging.LogRecord = self.queue.get()
            if record is None:
                break
            logger = logging.getLogger(record.name)
            logger.handle(record)

    def close(self):
        logging.getLogger().removeHandler(self.handler)
        self.queue.put_nowait(None)
        self.process.join(timeout=5)
        if self.process.is_alive():
            self.process.terminate()
        self.manager.shutdown()


def queue_logger(queue: Optional[multiprocessing.Queue], name: str) -> logging.Logger:
    """Named logger for a pool worker. The worker's root logger gets one
    QueueHandler so library loggers reach the logging process too; pass no
    queue when running inline in the main process."""
    logger = logging.getLogger(name)
    if queue is None:
        return logger
    root = logging.getLogger()
    worker_id = os.getpid()
    if not any(getattr(handler, 'worker_id', None) == worker_id for handler in root.handlers):
        handler = logging.handlers.QueueHandler(queue)
        handler.worker_id = worker_id
        root.addHandler(handler)
        root.setLevel(logging.INFO)
    return logger
