import logging
import multiprocessing
import os
import sys
from collections import namedtuple
from functools import lru_cache, partial
from itertools import product
from multiprocessing import Pool
from typing import Dict, List, Optional, Sequence, Tuple
sys.path.append(os.path.dirname(os.path.abspath(__file__)) + "/../../")

import numpy as np

from experiments.cell_segmentation.common import (
    EXIT_OK,
    EXIT_RUNTIME,
    MODEL_PLAIN,
    MODEL_POST_TV,
    MODEL_REGULARIZED,
    checkpoint_path,
    dataset_path,
    open_stores,
    write_manifest,
)
from experiments.cell_segmentation.table import METRICS_FIELDS, Metrics
from tvseg.eval_metrics import ConfusionMatrix, mean_regularization_effect
from tvseg.mini_net import CheckpointError, MiniUnet, load_checkpoint, predict
from tvseg.reg_activation import DEFAULT_TEST_ITERATIONS, post_tv
from tvseg.synth_data import CLASS_COUNT, NetpbmError, NoiseKind, NoiseSpec, Sample, read_dataset
from utils.database_utils import DataBaseType, init_database
from utils.experiment_util import ExperimentConfig, ExperimentUtil, Outcome
from utils.helper import derive_seed, split_chunk
from utils.logger_util import queue_logger
from utils.svg_utils import write_line_chart

logger = logging.getLogger('sweep')

CLEAN = 'clean'
DEFAULT_SWEEP = 'gauss:0.01..0.09:0.02,pepper:0.01,salt:0.01'
DEFAULT_POST_TV_LAMBDA = 0.5
POST_TV_CANDIDATES = (0.1, 0.25, 0.5, 1.0, 2.0)
NOISE_NAMES = {
    'gauss': NoiseKind.GAUSSIAN.value,
    'gaussian': NoiseKind.GAUSSIAN.value,
    'salt': NoiseKind.SALT.value,
    'pepper': NoiseKind.PEPPER.value,
    'both': NoiseKind.BOTH.value,
}

NoisePoint = namedtuple('NoisePoint', ['kind', 'level'])
SweepTask = namedtuple(
    'SweepTask',
    ['index', 'model', 'checkpoint', 'noise_kind', 'level', 'dataset', 'seed', 'iterations', 'post_tv_lambda'],
)


def _levels(text: str, item: str) -> List[float]:
    if '..' not in text:
        return [float(text)]
    bounds, _, step_text = text.partition(':')
    start_text, _, stop_text = bounds.partition('..')
    start, stop = float(start_text), float(stop_text)
    step = float(step_text) if step_text else 0.01
    if step <= 0 or stop < start:
        raise ValueError(f'sweep item {item!r} needs start <= stop and a positive step')
    count = int(np.floor((stop - start) / step + 1e-9)) + 1
    return [round(start + n * step, 10) for n in range(count)]


def parse_sweep(text: str) -> List[NoisePoint]:
    """``kind:level`` or ``kind:start..stop:step`` items, comma separated.
    The clean point always comes first."""
    points = [NoisePoint(CLEAN, 0.0)]
    for item in (part.strip() for part in str(text).split(',')):
        if not item or item == CLEAN:
            continue
        name, _, values = item.partition(':')
        if name not in NOISE_NAMES or not values:
            raise ValueError(f'cannot parse sweep item {item!r}')
        kind = NOISE_NAMES[name]
        try:
            levels = _levels(values, item)
        except ValueError as error:
            raise ValueError(f'cannot parse sweep item {item!r}: {error}')
        for level in levels:
            if level < 0 or (kind != NoiseKind.GAUSSIAN.value and level > 1):
                raise ValueError(f'level {level} out of range for {kind} noise')
            point = NoisePoint(kind, level)
            if point not in points:
                points.append(point)
    return points


def sweep_models(mode: str) -> List[str]:
    if mode == 'plain':
        return [MODEL_PLAIN, MODEL_POST_TV]
    if mode == 'regularized':
        return [MODEL_REGULARIZED]
    return [MODEL_PLAIN, MODEL_REGULARIZED, MODEL_POST_TV]


def _stamp(path: str) -> Tuple[int, int]:
    status = os.stat(path)
    return status.st_mtime_ns, status.st_size


@lru_cache(maxsize=8)
def _cached_network(path: str, stamp: Tuple[int, int]) -> MiniUnet:
    return load_checkpoint(path)


@lru_cache(maxsize=2)
def _cached_split(path: str, stamp: Tuple[int, int], split: str) -> Tuple[Sample, ...]:
    return tuple(read_dataset(path).get(split, []))


def load_split(path: str, split: str) -> Tuple[Sample, ...]:
    return _cached_split(path, _stamp(os.path.join(path, 'manifest.txt')), split)


def noisy_image(image: np.ndarray, kind: str, level: float, seed: int) -> np.ndarray:
    if kind == CLEAN:
        return image
    if kind == NoiseKind.GAUSSIAN.value:
        return NoiseSpec(NoiseKind.GAUSSIAN, sigma=level, seed=seed).apply(image)
    return NoiseSpec(NoiseKind(kind), fraction=level, seed=seed).apply(image)


def predict_labels(network: MiniUnet, model: str, image: np.ndarray, iterations: int, post_tv_lambda: float) -> np.ndarray:
    if model == MODEL_POST_TV:
        o, _ = network.logits(image)
        return np.argmax(post_tv(o, post_tv_lambda, iterations), axis=0)
    _, labels = predict(network, image, iterations)
    return labels


def evaluate(
        network: MiniUnet,
        model: str,
        samples: Sequence[Sample],
        noise: NoisePoint = NoisePoint(CLEAN, 0.0),
        seed: int = 0,
        iterations: int = DEFAULT_TEST_ITERATIONS,
        post_tv_lambda: float = DEFAULT_POST_TV_LAMBDA,
    ) -> Tuple[ConfusionMatrix, List[np.ndarray]]:
    """Aggregated confusion matrix and predicted label maps over ``samples``.

    Noise seeds depend on the noise point and sample position only, so every
    model sees the same corrupted images.
    """
    matrix = ConfusionMatrix(CLASS_COUNT)
    predictions = []
    for n, sample in enumerate(samples):
        image = noisy_image(sample.image, noise.kind, noise.level, derive_seed(seed, noise.kind, repr(noise.level), n))
        labels = predict_labels(network, model, image, iterations, post_tv_lambda)
        matrix.add(labels, sample.label)
        predictions.append(labels)
    return matrix, predictions


def _metrics_row(task: SweepTask, miou: float, accuracy: float, re: float) -> Dict[str, object]:
    return {
        'model': task.model,
        'noise_kind': task.noise_kind,
        'level': task.level,
        'miou': round(miou, 6),
        'accuracy': round(accuracy, 6),
        're': round(re, 6),
    }


def evaluate_point(queue: Optional[multiprocessing.Queue], task: SweepTask) -> Outcome:
    sub_logger = queue_logger(queue, 'sweep')
    if not os.path.isfile(task.checkpoint):
        sub_logger.error("Missing checkpoint %s for model %s", task.checkpoint, task.model)
        return Outcome(
            index=task.index,
            rows=[_metrics_row(task, float('nan'), float('nan'), float('nan'))],
            failure={'model': task.model, 'noise_kind': task.noise_kind, 'level': task.level,
                     'error': f'missing checkpoint {task.checkpoint}'},
        )
    try:
        network = _cached_network(task.checkpoint, _stamp(task.checkpoint))
        samples = load_split(task.dataset, 'test')
        matrix, predictions = evaluate(
            network,
            task.model,
            samples,
            NoisePoint(task.noise_kind, task.level),
            task.seed,
            task.iterations,
            task.post_tv_lambda,
        )
    except (CheckpointError, NetpbmError, OSError, ValueError) as error:
        sub_logger.error("Error occurred %s %s:%s %s", task.model, task.noise_kind, task.level, error)
        return Outcome(
            index=task.index,
            rows=[_metrics_row(task, float('nan'), float('nan'), float('nan'))],
            failure={'model': task.model, 'noise_kind': task.noise_kind, 'level': task.level, 'error': str(error)},
        )
    row = _metrics_row(task, matrix.miou(), matrix.accuracy(), mean_regularization_effect(predictions))
    sub_logger.info("Evaluated %s %s:%s miou %.2f re %.3f", task.model, task.noise_kind, task.level, row['miou'], row['re'])
    return Outcome(index=task.index, rows=[row], failure=None, details={'confusion': matrix.counts.tolist()})


def evaluate_chunk(queue: Optional[multiprocessing.Queue], tasks: List[SweepTask]) -> List[Outcome]:
    return [evaluate_point(queue, task) for task in tasks]


def select_post_tv_lambda(
        network: MiniUnet,
        samples: Sequence[Sample],
        candidates: Sequence[float] = POST_TV_CANDIDATES,
        iterations: int = DEFAULT_TEST_ITERATIONS,
    ) -> Tuple[float, Dict[float, float]]:
    """Candidate with the best clean mIoU; ties go to the smaller lambda."""
    if not candidates:
        raise ValueError('no post-TV lambda candidates')
    logits = [network.logits(sample.image)[0] for sample in samples]
    scores = {}
    for lam in sorted(candidates):
        matrix = ConfusionMatrix(CLASS_COUNT)
        for o, sample in zip(logits, samples):
            matrix.add(np.argmax(post_tv(o, lam, iterations), axis=0), sample.label)
        scores[lam] = matrix.miou()
        logger.info("Post-TV lambda %s: train miou %.3f", lam, scores[lam])
    best = max(scores, key=lambda lam: (scores[lam], -lam))
    return best, scores


def _sigma_series(outcomes: List[Outcome], models: List[str]) -> Dict[str, List[Tuple[float, float]]]:
    series = {}
    for model in models:
        points = []
        for outcome in outcomes:
            for row in outcome.rows:
                if row['model'] == model and row['noise_kind'] in (CLEAN, NoiseKind.GAUSSIAN.value) \
                        and np.isfinite(row['miou']):
                    points.append((row['level'], row['miou']))
        if points:
            series[model] = points
    return series


def run_sweep(config: ExperimentConfig) -> int:
    points = parse_sweep(config.sweep)
    path = dataset_path(config)
    checkpoints = config.checkpoints or config.out
    models = sweep_models(config.mode)

    post_tv_lambda = config.post_tv_lambda
    plain_checkpoint = checkpoint_path(checkpoints, MODEL_PLAIN)
    if config.post_tv_select and MODEL_POST_TV in models:
        if os.path.isfile(plain_checkpoint):
            post_tv_lambda, _ = select_post_tv_lambda(
                load_checkpoint(plain_checkpoint), load_split(path, 'train'), iterations=config.iters)
            logger.info("Selected post-TV lambda %s", post_tv_lambda)
        else:
            logger.warning("Cannot select post-TV lambda without %s", plain_checkpoint)

    tasks = []
    for index, (model, point) in enumerate(product(models, points)):
        source = MODEL_PLAIN if model == MODEL_POST_TV else model
        tasks.append(SweepTask(
            index=index,
            model=model,
            checkpoint=checkpoint_path(checkpoints, source),
            noise_kind=point.kind,
            level=point.level,
            dataset=path,
            seed=config.seed,
            iterations=config.iters,
            post_tv_lambda=post_tv_lambda,
        ))
    logger.info("Sweeping %s models over %s noise points", len(models), len(points))

    metrics, extra = open_stores(config, 'metrics', METRICS_FIELDS, Metrics)
    failures = init_database(name='failures', database_type=DataBaseType.JSON, path=config.out)
    experiment_util = config.experiment_util or ExperimentUtil(database=metrics, failures=failures, extra_databases=extra)

    # must init all processes inside the main process.
    pool = Pool(processes=config.process_num) if config.process_num > 1 else None
    queue = config.logger_queue if pool is not None else None
    try:
        outcomes = experiment_util.imap(pool, partial(evaluate_chunk, queue), list(split_chunk(tasks, config.chunk_size)))
    except Exception as error:
        logger.critical("Sweep aborted: %s", error)
        return EXIT_RUNTIME
    finally:
        experiment_util.save()
        experiment_util.close(pool)
    logger.info("Total saved %s rows", experiment_util.total_count)

    confusion = {}
    for outcome, task in zip(outcomes, tasks):
        if outcome.details:
            confusion.setdefault(task.model, {})[f'{task.noise_kind}:{task.level!r}'] = outcome.details['confusion']
    init_database(name='confusion', database_type=DataBaseType.JSON, path=config.out).save(confusion)

    outputs = {'metrics': metrics.path, 'confusion': os.path.join(config.out, 'confusion.json'),
               'post_tv_lambda': post_tv_lambda}
    if extra:
        outputs['metrics_sqlite'] = extra[0].path
    if config.svg:
        svg_path = os.path.join(config.out, 'miou_vs_sigma.svg')
        series = _sigma_series(outcomes, models)
        if series:
            write_line_chart(svg_path, series, 'gaussian sigma', 'mIoU (%)', 'mIoU under gaussian noise')
            outputs['svg'] = svg_path
        else:
            logger.warning("No finite gaussian rows to chart")
    write_manifest(config, outputs)
    return EXIT_OK
