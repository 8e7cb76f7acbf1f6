from collections import namedtuple
import argparse
import logging
import multiprocessing

from .database_utils import DatabaseUtil, JsonUtil, CsvUtil
from typing import Optional, Union, List, Dict, Any, Iterator, Callable
from multiprocessing.pool import Pool

# index orders rows across tasks; failure is a dict describing what went wrong.
Outcome = namedtuple('Outcome', ['index', 'rows', 'failure', 'details'], defaults=(None, None))
logger = logging.getLogger('experiment_util')


class ExperimentUtil:

    database: Union[DatabaseUtil, JsonUtil, CsvUtil, None] = None

    def __init__(
            self,
            database: Union[DatabaseUtil, JsonUtil, CsvUtil],
            failures: Optional[JsonUtil] = None,
            extra_databases: Optional[List[Union[DatabaseUtil, JsonUtil, CsvUtil]]] = None,
            flush_size: int = 500,
        ) -> None:
        self.collected_data = []
        self.failures = []
        self.total_count = 0
        self.flush_size = flush_size
        self.failures_database = failures
        self.extra_databases = list(extra_databases or [])
        self._pending: Dict[int, Outcome] = {}
        self._next_index = 0
        self.__class__.database = database

    def set_database(self, database: Union[DatabaseUtil, JsonUtil, CsvUtil]):
        self.__class__.database = database

    def extend(self, data: List[Dict[str, Any]]):
        self.collected_data.extend(data)
        if len(self.collected_data) >= self.flush_size:
            self.save()

    def save(self):
        if not self.collected_data:
            return
        self.total_count += len(self.collected_data)
        logger.info("Saved %s rows into %s", len(self.collected_data), type(self.database).__name__)
        self.database.save(self.collected_data)
        for database in self.extra_databases:
            database.save(self.collected_data)
        self.collected_data = []

    def save_failures(self):
        if not self.failures:
            return
        if self.failures_database is None:
            logger.warning("%s failures not persisted, no failure store configured", len(self.failures))
        else:
            self.failures_database.save(self.failures)
        self.failures = []

    def reset(self):
        self.collected_data = []
        self.failures = []
        self.total_count = 0
        self._pending = {}
        self._next_index = 0

    def close(self, pool: Optional[Pool]):
        if pool is not None:
            pool.terminate()

    def _accept(self, outcome: Outcome):
        """Buffers an outcome and releases the contiguous prefix of task indices,
        so rows reach the database in task order whatever the completion order."""
        self._pending[outcome.index] = outcome
        while self._next_index in self._pending:
            ready = self._pending.pop(self._next_index)
            self._next_index += 1
            if ready.failure:
                self.failures.append(ready.failure)
            if ready.rows:
                self.extend(ready.rows)

    def imap(self, pool: Optional[Pool], function: Callable[[Any], Union[Outcome, List[Outcome]]], inputs: List[Any]) -> List[Outcome]:
        """Runs ``function`` over ``inputs`` (in the pool, or inline without one)
        and returns the outcomes sorted by task index. Tasks are indexed from 0;
        a function may return one Outcome or a list of them for a chunk."""
        self._pending = {}
        self._next_index = 0
        outcomes = []
        results: Iterator[Union[Outcome, List[Outcome]]] = \
            pool.imap_unordered(function, inputs) if pool is not None else map(function, inputs)
        for result in results:
            for outcome in (result if isinstance(result, list) else [result]):
                outcomes.append(outcome)
                self._accept(outcome)
        for index in sorted(self._pending):
            self._accept_leftover(self._pending.pop(index))
        if self.failures:
            self.save_failures()
        return sorted(outcomes, key=lambda outcome: outcome.index)

    def _accept_leftover(self, outcome: Outcome):
        logger.warning("Task %s arrived after a gap in task indices", outcome.index)
        if outcome.failure:
            self.failures.append(outcome.failure)
        if outcome.rows:
            self.extend(outcome.rows)


class ExperimentConfig:
    """Resolved command-line settings plus the shared runtime objects."""

    def __init__(
            self,
            arguments: Union[argparse.Namespace, Dict[str, Any]],
            experiment_util: Optional[ExperimentUtil] = None,
            logger_queue: Optional[multiprocessing.Queue] = None,
        ) -> None:
        values = vars(arguments) if isinstance(arguments, argparse.Namespace) else dict(arguments)
        self.values = {key: value for key, value in values.items() if not callable(value)}
        for key, value in self.values.items():
            setattr(self, key, value)
        self.experiment_util = experiment_util
        self.logger_queue = logger_queue
        self.process_num = values.get('processes', 1)
        self.chunk_size = values.get('chunk_size', 1)

    def validate(self) -> List[str]:
        problems = []
        if self.process_num < 1:
            problems.append(f'--processes must be >= 1, got {self.process_num}')
        if self.chunk_size < 1:
            problems.append(f'--chunk-size must be >= 1, got {self.chunk_size}')
        if not self.values.get('out'):
            problems.append('--out is required')
        return problems

    def as_dict(self) -> Dict[str, Any]:
        return dict(self.values)
