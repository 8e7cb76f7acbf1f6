"""Segmentation scores: global accuracy, mIoU over an aggregated confusion
matrix, and the regularization effect RE = 100 / (N1 N2) * sum |grad u|."""
from collections import namedtuple
from enum import Enum
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .grid_calculus import ShapeError, tv_value

MetricsRow = namedtuple('MetricsRow', ['model', 'noise_kind', 'level', 'miou', 'accuracy', 're'])

LabelMaps = Union[np.ndarray, Sequence[np.ndarray]]


class REMode(Enum):
    LABEL_INDEX = 'label_index'
    ONE_HOT = 'one_hot'


class ConfusionMatrix:
    """counts[t, p] is the number of pixels of true class t predicted as p."""

    def __init__(self, classes: int) -> None:
        self.classes = classes
        self.counts = np.zeros((classes, classes), dtype=np.int64)

    def add(self, pred: np.ndarray, truth: np.ndarray) -> 'ConfusionMatrix':
        pred = np.asarray(pred, dtype=np.int64)
        truth = np.asarray(truth, dtype=np.int64)
        if pred.shape != truth.shape:
            raise ShapeError(f'prediction shape {pred.shape} does not match truth shape {truth.shape}')
        if pred.size and (min(pred.min(), truth.min()) < 0 or max(pred.max(), truth.max()) >= self.classes):
            raise ValueError(f'labels must lie in [0, {self.classes})')
        flat = truth.ravel() * self.classes + pred.ravel()
        self.counts += np.bincount(flat, minlength=self.classes ** 2).reshape(self.classes, self.classes)
        return self

    def merge(self, other: 'ConfusionMatrix') -> 'ConfusionMatrix':
        merged = ConfusionMatrix(self.classes)
        merged.counts = self.counts + other.counts
        return merged

    def accuracy(self) -> float:
        total = self.counts.sum()
        return 100.0 * float(np.trace(self.counts)) / float(total) if total else 0.0

    def iou(self) -> np.ndarray:
        """Per-class IoU; NaN for classes absent from both truth and prediction."""
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(axis=0) + self.counts.sum(axis=1) - tp
        with np.errstate(invalid='ignore', divide='ignore'):
            return np.where(union > 0, tp / union, np.nan)

    def miou(self) -> float:
        iou = self.iou()
        present = ~np.isnan(iou)
        return 100.0 * float(iou[present].mean()) if present.any() else 0.0


def _as_list(maps: LabelMaps) -> list:
    if isinstance(maps, np.ndarray) and maps.ndim == 2:
        return [maps]
    return list(maps)


def confusion(pred: LabelMaps, truth: LabelMaps, classes: int) -> ConfusionMatrix:
    preds, truths = _as_list(pred), _as_list(truth)
    if len(preds) != len(truths):
        raise ShapeError(f'{len(preds)} predictions for {len(truths)} ground truths')
    matrix = ConfusionMatrix(classes)
    for p, t in zip(preds, truths):
        matrix.add(p, t)
    return matrix


def _class_count(*maps: LabelMaps) -> int:
    return int(max(np.max(m) for group in maps for m in _as_list(group))) + 1


def global_accuracy(pred: LabelMaps, truth: LabelMaps) -> float:
    """Pixel-weighted accuracy in percent over one map or a test set."""
    return confusion(pred, truth, _class_count(pred, truth)).accuracy()


def miou(pred: LabelMaps, truth: LabelMaps, classes: Optional[int] = None) -> float:
    if classes is None:
        classes = _class_count(pred, truth)
    return confusion(pred, truth, classes).miou()


def regularization_effect(
        u: np.ndarray,
        mode: REMode = REMode.LABEL_INDEX,
        classes: Optional[int] = None,
    ) -> float:
    """RE of a label map, or of a single-channel field in label-index mode."""
    u = np.asarray(u)
    if u.ndim == 3:
        if u.shape[0] != 1:
            raise ShapeError(f'expected a single-channel field, got {u.shape}')
        u = u[0]
    height, width = u.shape
    mode = REMode(mode)
    if mode is REMode.LABEL_INDEX:
        field = u.astype(np.float64)[None]
    else:
        labels = u.astype(np.int64)
        count = classes if classes is not None else int(labels.max()) + 1
        field = (labels[None] == np.arange(count)[:, None, None]).astype(np.float64)
    return 100.0 * tv_value(field) / (height * width)


def mean_regularization_effect(maps: Iterable[np.ndarray], mode: REMode = REMode.LABEL_INDEX) -> float:
    values = [regularization_effect(m, mode) for m in maps]
    return float(np.mean(values)) if values else 0.0
