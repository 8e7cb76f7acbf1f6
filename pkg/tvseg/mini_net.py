"""A small encoder-decoder segmentation network written directly in numpy.

Layout for ``levels`` = L and ``widths`` = (w_0, ..., w_{L-1}):

    enc_k : 3x3 conv -> ReLU, then 2x2 max-pool        k = 0..L-1
    mid   : 3x3 conv -> ReLU at the coarsest scale
    dec_k : 2x nearest upsample, concat enc_k, 3x3 conv -> ReLU   k = L-1..0
    head  : 1x1 conv to C class logits, then the final activation

With L = 0 the network is the head alone, i.e. per-pixel logistic regression.
"""
import logging
import struct
from collections import namedtuple
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .grid_calculus import ShapeError
from .reg_activation import (
    ActivationMode,
    DEFAULT_TEST_ITERATIONS,
    RegActConfig,
    reg_softmax_iterative,
    reg_softmax_onestep,
    softmax,
)
from .reg_backward import (
    TapeError,
    lambda_gradient,
    reg_softmax_onestep_backward,
    reg_softmax_unrolled_backward,
    softmax_jvp,
    update_lambda,
)

logger = logging.getLogger('mini_net')

DEFAULT_LEARNING_RATE = 0.01
DEFAULT_LAMBDA_LEARNING_RATE = 0.01
DEFAULT_MOMENTUM = 0.9


class FinalActivation(Enum):
    PLAIN = 'plain'
    REGULARIZED = 'regularized'


class BuildError(ValueError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, iteration: int, loss: float) -> None:
        super().__init__(f'non-finite loss {loss} at iteration {iteration}')
        self.iteration = iteration
        self.loss = loss


class CheckpointError(ValueError):
    pass


class NetSpec:
    def __init__(
            self,
            in_channels: int = 3,
            classes: int = 3,
            levels: int = 2,
            widths: Sequence[int] = (16, 32),
            final: FinalActivation = FinalActivation.PLAIN,
            reg: Optional[RegActConfig] = None,
        ) -> None:
        self.in_channels = int(in_channels)
        self.classes = int(classes)
        self.levels = int(levels)
        self.widths = tuple(int(width) for width in widths)
        self.final = FinalActivation(final)
        self.reg = reg if reg is not None else RegActConfig()

        problems = []
        if self.in_channels < 1:
            problems.append('in_channels must be >= 1')
        if self.classes < 2:
            problems.append('classes must be >= 2')
        if self.levels < 0:
            problems.append('levels must be >= 0')
        if len(self.widths) != self.levels:
            problems.append(f'expected {self.levels} widths, got {len(self.widths)}')
        if any(width < 1 for width in self.widths):
            problems.append('widths must be positive')
        if problems:
            raise BuildError('; '.join(problems))

    @property
    def divisor(self) -> int:
        return 2 ** self.levels

    def check_image_size(self, height: int, width: int) -> None:
        if height % self.divisor or width % self.divisor:
            raise BuildError(
                f'image size {height}x{width} is not divisible by {self.divisor} for {self.levels} pooling levels')

    def layer_shapes(self) -> List[Tuple[str, Tuple[int, ...]]]:
        """(name, kernel shape) in declaration order."""
        shapes = []
        channels = self.in_channels
        for k, width in enumerate(self.widths):
            shapes.append((f'enc{k}', (width, channels, 3, 3)))
            channels = width
        if self.levels:
            shapes.append(('mid', (channels, channels, 3, 3)))
            for k in reversed(range(self.levels)):
                shapes.append((f'dec{k}', (self.widths[k], channels + self.widths[k], 3, 3)))
                channels = self.widths[k]
        shapes.append(('head', (self.classes, channels, 1, 1)))
        return shapes


class ParamSet:
    def __init__(
            self,
            params: Dict[str, np.ndarray],
            learning_rate: float = DEFAULT_LEARNING_RATE,
            momentum: float = DEFAULT_MOMENTUM,
        ) -> None:
        self.params = params
        self.velocity = {name: np.zeros_like(value) for name, value in params.items()}
        self.learning_rate = float(learning_rate)
        self.momentum = float(momentum)

    def names(self) -> List[str]:
        return list(self.params)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]


class TrainLog:
    def __init__(self, seed: int) -> None:
        self.seed = seed
        self.losses: List[float] = []
        self.lambdas: List[float] = []
        self.epoch_lambdas: List[float] = []

    @property
    def iterations(self) -> int:
        return len(self.losses)

    def rows(self) -> List[Dict[str, Any]]:
        return [
            {'iteration': n + 1, 'loss': repr(loss), 'lambda': repr(lam)}
            for n, (loss, lam) in enumerate(zip(self.losses, self.lambdas))
        ]

    def __eq__(self, other) -> bool:
        if not isinstance(other, TrainLog):
            return NotImplemented
        return (self.seed, self.losses, self.lambdas, self.epoch_lambdas) == \
            (other.seed, other.losses, other.lambdas, other.epoch_lambdas)


# caches: per layer tuples consumed by backward; version guards against stale tapes.
ForwardTape = namedtuple('ForwardTape', ['version', 'caches', 'activation_tape', 'logits', 'activation'])


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Stride-1 convolution with zero padding k // 2; x is (Cin, H, W)."""
    pad = w.shape[-1] // 2
    padded = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    windows = sliding_window_view(padded, w.shape[-2:], axis=(1, 2))
    out = np.tensordot(w, windows, axes=([1, 2, 3], [0, 3, 4])) + b[:, None, None]
    return out, windows


def conv2d_backward(d_out: np.ndarray, windows: np.ndarray, w: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    d_w = np.tensordot(d_out, windows, axes=([1, 2], [1, 2]))
    d_b = d_out.sum(axis=(1, 2))
    flipped = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    d_x, _ = conv2d_forward(d_out, flipped, np.zeros(w.shape[1]))
    return d_x, d_w, d_b


def maxpool_forward(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    c, h, w = x.shape
    blocks = x.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h // 2, w // 2, 4)
    index = blocks.argmax(axis=-1)
    return np.take_along_axis(blocks, index[..., None], axis=-1)[..., 0], index


def maxpool_backward(d_out: np.ndarray, index: np.ndarray) -> np.ndarray:
    c, h2, w2 = d_out.shape
    blocks = np.zeros((c, h2, w2, 4))
    np.put_along_axis(blocks, index[..., None], d_out[..., None], axis=-1)
    return blocks.reshape(c, h2, w2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, 2 * h2, 2 * w2)


def upsample_forward(x: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def upsample_backward(d_out: np.ndarray) -> np.ndarray:
    c, h, w = d_out.shape
    return d_out.reshape(c, h // 2, 2, w // 2, 2).sum(axis=(2, 4))


def cross_entropy(a: np.ndarray, target: np.ndarray, normalizer: Optional[int] = None) -> Tuple[float, np.ndarray]:
    """Mean negative log-likelihood over ``normalizer`` pixels (default: this map's)."""
    target = np.asarray(target, dtype=np.int64)
    if a.shape[1:] != target.shape:
        raise ShapeError(f'activation shape {a.shape} does not match label shape {target.shape}')
    m = normalizer if normalizer is not None else target.size
    picked = np.take_along_axis(a, target[None], axis=0)[0]
    loss = float(-np.log(picked).sum() / m)
    d_a = np.zeros_like(a)
    np.put_along_axis(d_a, target[None], (-1.0 / (m * picked))[None], axis=0)
    return loss, d_a


class MiniUnet:

    def __init__(self, spec: NetSpec, params: ParamSet, lam: Optional[float] = None) -> None:
        self.spec = spec
        self.params = params
        self.lam = float(spec.reg.lam if lam is None else lam)
        self.version = 0

    def _activation_config(self, test_iterations: Optional[int]) -> RegActConfig:
        if test_iterations is None:
            return self.spec.reg.replace(lam=self.lam, mode=ActivationMode.ONE_STEP, iterations=1)
        return self.spec.reg.replace(lam=self.lam, mode=ActivationMode.ITERATIVE, iterations=test_iterations)

    def _conv_relu(self, name: str, x: np.ndarray, caches: List[Tuple]) -> np.ndarray:
        out, windows = conv2d_forward(x, self.params[f'{name}.w'], self.params[f'{name}.b'])
        out = np.maximum(0.0, out)
        caches.append(('conv_relu', name, windows, out))
        return out

    def logits(self, image: np.ndarray) -> Tuple[np.ndarray, List[Tuple]]:
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[0] != self.spec.in_channels:
            raise ShapeError(f'expected a ({self.spec.in_channels}, H, W) image, got {image.shape}')
        self.spec.check_image_size(*image.shape[1:])

        caches: List[Tuple] = []
        skips = []
        h = image
        for k in range(self.spec.levels):
            h = self._conv_relu(f'enc{k}', h, caches)
            skips.append(h)
            h, index = maxpool_forward(h)
            caches.append(('pool', index))
        if self.spec.levels:
            h = self._conv_relu('mid', h, caches)
            for k in reversed(range(self.spec.levels)):
                up = upsample_forward(h)
                caches.append(('up_concat', up.shape[0]))
                h = self._conv_relu(f'dec{k}', np.concatenate([up, skips[k]], axis=0), caches)
        o, windows = conv2d_forward(h, self.params['head.w'], self.params['head.b'])
        caches.append(('head', 'head', windows))
        return o, caches

    def forward(
            self,
            image: np.ndarray,
            test_iterations: Optional[int] = None,
            record: bool = True,
        ) -> Tuple[np.ndarray, np.ndarray, ForwardTape]:
        """Logits, final activation and the tape for backward.

        The regularized activation runs the one-step scheme unless
        ``test_iterations`` asks for the full dual iteration, whose history is
        kept only when ``record`` is set.
        """
        o, caches = self.logits(image)
        activation_tape = None
        if self.spec.final is FinalActivation.PLAIN:
            a = softmax(o)
        elif test_iterations is None:
            a, activation_tape = reg_softmax_onestep(o, self._activation_config(None))
        else:
            a, _, activation_tape = reg_softmax_iterative(o, self._activation_config(test_iterations), record)
        return o, a, ForwardTape(self.version, caches, activation_tape, o, a)

    def backward(self, tape: ForwardTape, d_a: np.ndarray) -> Tuple[Dict[str, np.ndarray], Optional[float]]:
        """Parameter gradients and, for one-step tapes, dL/dlambda."""
        if tape.version != self.version:
            raise TapeError(f'tape from parameter version {tape.version}, network is at {self.version}')
        if d_a.shape != tape.activation.shape:
            raise TapeError(f'gradient shape {d_a.shape} does not match activation {tape.activation.shape}')

        lambda_grad = None
        act = tape.activation_tape
        if act is None:
            d_h = softmax_jvp(tape.activation, d_a)
        elif act.mode is ActivationMode.ONE_STEP:
            d_h = reg_softmax_onestep_backward(act, d_a)
            lambda_grad = lambda_gradient(act, d_a)
        else:
            d_h = reg_softmax_unrolled_backward(act, d_a)

        grads: Dict[str, np.ndarray] = {}
        skip_grads: List[np.ndarray] = []
        for cache in reversed(tape.caches):
            kind = cache[0]
            if kind == 'head':
                _, name, windows = cache
                d_h, grads[f'{name}.w'], grads[f'{name}.b'] = conv2d_backward(d_h, windows, self.params[f'{name}.w'])
            elif kind == 'conv_relu':
                _, name, windows, out = cache
                d_pre = np.where(out > 0, d_h, 0.0)
                d_h, grads[f'{name}.w'], grads[f'{name}.b'] = conv2d_backward(d_pre, windows, self.params[f'{name}.w'])
            elif kind == 'up_concat':
                _, up_channels = cache
                skip_grads.append(d_h[up_channels:])
                d_h = upsample_backward(d_h[:up_channels])
            elif kind == 'pool':
                _, index = cache
                d_h = maxpool_backward(d_h, index) + skip_grads.pop()
        return {name: grads[name] for name in self.params.names()}, lambda_grad

    def step(self, grads: Dict[str, np.ndarray], lambda_grad: Optional[float], tau_lambda: float) -> None:
        self.lam = sgd_momentum_step(self.params, grads, self.lam, lambda_grad, tau_lambda)
        self.version += 1


def _param_names(spec: NetSpec) -> List[Tuple[str, Tuple[int, ...]]]:
    names = []
    for layer, shape in spec.layer_shapes():
        names.append((f'{layer}.w', shape))
        names.append((f'{layer}.b', (shape[0],)))
    return names


def build(
        spec: NetSpec,
        seed: int,
        learning_rate: float = DEFAULT_LEARNING_RATE,
        momentum: float = DEFAULT_MOMENTUM,
        image_size: Optional[Tuple[int, int]] = None,
    ) -> MiniUnet:
    """He-initialized network; biases start at zero."""
    if image_size is not None:
        spec.check_image_size(*image_size)
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in _param_names(spec):
        if name.endswith('.b'):
            params[name] = np.zeros(shape)
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    return MiniUnet(spec, ParamSet(params, learning_rate, momentum))


def sgd_momentum_step(
        params: ParamSet,
        grads: Dict[str, np.ndarray],
        lam: float,
        lambda_grad: Optional[float],
        tau_lambda: float,
    ) -> float:
    """v <- mu v + g; theta <- theta - lr v. Returns the updated lambda."""
    for name, value in params.params.items():
        velocity = params.velocity[name]
        velocity *= params.momentum
        velocity += grads[name]
        value -= params.learning_rate * velocity
    if lambda_grad is None:
        return lam
    return update_lambda(lam, lambda_grad, tau_lambda)


def train(
        network: MiniUnet,
        dataset: Sequence[Any],
        epochs: int,
        batch_size: int,
        seed: int,
        tau_lambda: float = DEFAULT_LAMBDA_LEARNING_RATE,
    ) -> Tuple[MiniUnet, TrainLog]:
    """Mini-batch SGD over ``dataset`` (items with ``image`` and ``label``)."""
    if not len(dataset):
        raise ValueError('dataset is empty')
    if batch_size < 1 or epochs < 0:
        raise ValueError('batch_size must be >= 1 and epochs >= 0')

    rng = np.random.default_rng(seed)
    log = TrainLog(seed)
    # a zero initial lambda switches the regularizer off for the whole run
    train_lambda = network.lam > 0
    if network.spec.final is FinalActivation.REGULARIZED and not train_lambda:
        logger.info('Initial lambda is 0, keeping it fixed')
    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        for start in range(0, len(order), batch_size):
            batch = [dataset[i] for i in order[start:start + batch_size]]
            normalizer = sum(sample.label.size for sample in batch)
            loss = 0.0
            total_grads = None
            total_lambda_grad = None
            for sample in batch:
                _, a, tape = network.forward(sample.image)
                sample_loss, d_a = cross_entropy(a, sample.label, normalizer)
                loss += sample_loss
                if not np.isfinite(loss):
                    logger.critical('Non-finite loss %s at iteration %d', loss, log.iterations + 1)
                    raise TrainingError(log.iterations + 1, loss)
                grads, lambda_grad = network.backward(tape, d_a)
                if total_grads is None:
                    total_grads = grads
                else:
                    for name in total_grads:
                        total_grads[name] += grads[name]
                if lambda_grad is not None and train_lambda:
                    total_lambda_grad = lambda_grad + (total_lambda_grad or 0.0)
            network.step(total_grads, total_lambda_grad, tau_lambda)
            log.losses.append(loss)
            log.lambdas.append(network.lam)
        log.epoch_lambdas.append(network.lam)
        logger.info('Epoch %d/%d loss %.5f lambda %.5f', epoch + 1, epochs, log.losses[-1], network.lam)
    return network, log


def predict(
        network: MiniUnet,
        image: np.ndarray,
        test_mode_iterations: int = DEFAULT_TEST_ITERATIONS,
    ) -> Tuple[np.ndarray, np.ndarray]:
    """Class probabilities and the argmax label map (ties go to the lowest class)."""
    if network.spec.final is FinalActivation.REGULARIZED:
        _, a, _ = network.forward(image, test_iterations=test_mode_iterations, record=False)
    else:
        _, a, _ = network.forward(image)
    return a, np.argmax(a, axis=0)


CHECKPOINT_MAGIC = b'TVSG'
CHECKPOINT_VERSION = 2
_FINAL_CODES = {FinalActivation.PLAIN: 0, FinalActivation.REGULARIZED: 1}


def save_checkpoint(network: MiniUnet, path: str) -> None:
    """Header, then every parameter as little-endian float64 in declaration order."""
    spec = network.spec
    header = struct.pack('<4sI', CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    header += struct.pack('<IIII', spec.in_channels, spec.classes, spec.levels, _FINAL_CODES[spec.final])
    header += struct.pack(f'<{spec.levels}I', *spec.widths)
    header += struct.pack('<ddddI', spec.reg.lam, network.lam, spec.reg.kappa, spec.reg.tau, spec.reg.iterations)
    header += struct.pack('<dd', network.params.learning_rate, network.params.momentum)
    with open(path, 'wb') as checkpoint:
        checkpoint.write(header)
        for name in network.params.names():
            checkpoint.write(np.ascontiguousarray(network.params[name], dtype='<f8').tobytes())


def _unpack(fmt: str, data: bytes, offset: int) -> Tuple[tuple, int]:
    size = struct.calcsize(fmt)
    if offset + size > len(data):
        raise CheckpointError('checkpoint header is truncated')
    return struct.unpack_from(fmt, data, offset), offset + size


def load_checkpoint(path: str) -> MiniUnet:
    with open(path, 'rb') as checkpoint:
        data = checkpoint.read()
    (magic, version), offset = _unpack('<4sI', data, 0)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f'{path} is not a checkpoint (magic {magic!r})')
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f'unsupported checkpoint version {version}')
    (in_channels, classes, levels, final_code), offset = _unpack('<IIII', data, offset)
    widths, offset = _unpack(f'<{levels}I', data, offset)
    (initial_lam, lam, kappa, tau, iterations), offset = _unpack('<ddddI', data, offset)
    (learning_rate, momentum), offset = _unpack('<dd', data, offset)
    finals = {code: final for final, code in _FINAL_CODES.items()}
    if final_code not in finals:
        raise CheckpointError(f'unknown final activation code {final_code}')

    spec = NetSpec(
        in_channels=in_channels,
        classes=classes,
        levels=levels,
        widths=widths,
        final=finals[final_code],
        reg=RegActConfig(lam=initial_lam, kappa=kappa, tau=tau, iterations=iterations),
    )
    params = {}
    for name, shape in _param_names(spec):
        count = int(np.prod(shape))
        end = offset + 8 * count
        if end > len(data):
            raise CheckpointError(f'checkpoint payload is truncated at {name}')
        params[name] = np.frombuffer(data, dtype='<f8', count=count, offset=offset).astype(np.float64).reshape(shape)
        offset = end
    if offset != len(data):
        raise CheckpointError(f'{len(data) - offset} trailing bytes in checkpoint')
    return MiniUnet(spec, ParamSet(params, learning_rate, momentum), lam=lam)
