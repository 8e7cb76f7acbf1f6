"""Synthetic white-blood-cell images, noise models and netpbm file I/O.

Each image shows one cell on a textured background with a few red-cell
distractors. Labels: 0 background, 1 cytoplasm, 2 nucleus.
"""
import logging
import os
from collections import namedtuple
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger('synth_data')

Sample = namedtuple('Sample', ['image', 'label'])

BACKGROUND, CYTOPLASM, NUCLEUS = 0, 1, 2
CLASS_COUNT = 3

TRAIN_NOISE_SIGMA = 0.05
TRAIN_NOISE_FRACTION = 0.01

_BACKGROUND_COLOR = np.array([0.92, 0.84, 0.86])
_RED_CELL_COLOR = np.array([0.86, 0.56, 0.60])
_CYTOPLASM_COLOR = np.array([0.74, 0.64, 0.86])
_NUCLEUS_COLOR = np.array([0.36, 0.16, 0.50])


class NoiseKind(Enum):
    GAUSSIAN = 'gaussian'
    SALT = 'salt'
    PEPPER = 'pepper'
    BOTH = 'both'


class NoiseSpec:
    def __init__(self, kind: NoiseKind, sigma: float = 0.0, fraction: float = 0.0, seed: int = 0) -> None:
        self.kind = NoiseKind(kind)
        self.sigma = float(sigma)
        self.fraction = float(fraction)
        self.seed = seed
        if self.sigma < 0:
            raise ValueError(f'sigma must be >= 0, got {self.sigma}')
        if not (0.0 <= self.fraction <= 1.0):
            raise ValueError(f'fraction must be in [0, 1], got {self.fraction}')

    def apply(self, image: np.ndarray) -> np.ndarray:
        if self.kind is NoiseKind.GAUSSIAN:
            return add_gaussian_noise(image, self.sigma, self.seed)
        return add_salt_pepper(image, self.fraction, self.kind, self.seed)


class NetpbmError(ValueError):
    pass


class NetpbmHeaderError(NetpbmError):
    pass


class NetpbmPayloadError(NetpbmError):
    pass


class NetpbmMaxvalError(NetpbmError):
    pass


def _ellipse(size: int, center: Tuple[float, float], axes: Tuple[float, float], angle: float) -> np.ndarray:
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = rows - center[0], cols - center[1]
    u = dx * np.cos(angle) + dy * np.sin(angle)
    v = -dx * np.sin(angle) + dy * np.cos(angle)
    return (u / axes[0]) ** 2 + (v / axes[1]) ** 2


def _smooth_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    """Low-frequency texture in [-1, 1] by bilinear upsampling of a coarse grid."""
    coarse = rng.uniform(-1.0, 1.0, size=(cells + 1, cells + 1))
    positions = np.linspace(0, cells, size)
    base = np.floor(positions).astype(int).clip(0, cells - 1)
    frac = positions - base
    rows = coarse[base] * (1 - frac)[:, None] + coarse[base + 1] * frac[:, None]
    return rows[:, base] * (1 - frac)[None, :] + rows[:, base + 1] * frac[None, :]


def _draw_cell(rng: np.random.Generator, size: int) -> Optional[Sample]:
    """One attempt; None when the nucleus leaves the cytoplasm."""
    label = np.zeros((size, size), dtype=np.int64)
    image = _BACKGROUND_COLOR[:, None, None] + 0.04 * _smooth_noise(rng, size, 4)[None]

    for _ in range(rng.integers(2, 6)):
        radius = rng.uniform(0.08, 0.14) * size
        center = rng.uniform(0, size, size=2)
        blob = _ellipse(size, tuple(center), (radius, radius), 0.0)
        inside = blob <= 1.0
        shade = 1.0 - 0.25 * (1.0 - np.clip(blob, 0.0, 1.0))
        image = np.where(inside[None], _RED_CELL_COLOR[:, None, None] * shade[None], image)

    cyto_axes = tuple(rng.uniform(0.22, 0.32, size=2) * size)
    margin = max(cyto_axes) + 1.0
    cyto_center = tuple(rng.uniform(margin, size - margin, size=2))
    angle = rng.uniform(0, np.pi)
    cyto = _ellipse(size, cyto_center, cyto_axes, angle)

    scale = rng.uniform(0.4, 0.65)
    nucleus_axes = (cyto_axes[0] * scale, cyto_axes[1] * scale)
    slack = (1.0 - scale) * min(cyto_axes) * 0.8
    offset = rng.uniform(-slack, slack, size=2) / np.sqrt(2.0)
    nucleus_center = (cyto_center[0] + offset[0], cyto_center[1] + offset[1])
    nucleus = _ellipse(size, nucleus_center, nucleus_axes, angle + rng.uniform(-0.3, 0.3))

    cyto_mask = cyto <= 1.0
    nucleus_mask = nucleus <= 1.0
    if not np.all(cyto_mask[nucleus_mask]):
        return None
    texture = _smooth_noise(rng, size, 8)
    cyto_shade = 1.0 - 0.12 * np.clip(cyto, 0.0, 1.0) + 0.03 * texture
    nucleus_shade = 1.0 + 0.15 * np.clip(nucleus, 0.0, 1.0) + 0.05 * texture
    image = np.where(cyto_mask[None], _CYTOPLASM_COLOR[:, None, None] * cyto_shade[None], image)
    image = np.where(nucleus_mask[None], _NUCLEUS_COLOR[:, None, None] * nucleus_shade[None], image)
    label[cyto_mask] = CYTOPLASM
    label[nucleus_mask] = NUCLEUS

    image = image + rng.normal(0.0, 0.01, size=image.shape)
    return Sample(image=np.clip(image, 0.0, 1.0), label=label)


def _valid_geometry(sample: Sample) -> bool:
    counts = np.bincount(sample.label.ravel(), minlength=CLASS_COUNT)
    return bool(counts[NUCLEUS] > 0 and counts[NUCLEUS] < counts[CYTOPLASM] < counts[BACKGROUND])


def generate_cells(count: int, size: int, seed: int) -> List[Sample]:
    if size < 32 or size % 4:
        raise ValueError(f'size must be >= 32 and divisible by 4, got {size}')
    samples = []
    for sample_seed in np.random.SeedSequence(seed).spawn(count):
        rng = np.random.default_rng(sample_seed)
        while True:
            sample = _draw_cell(rng, size)
            if sample is not None and _valid_geometry(sample):
                break
            logger.debug('Resampling degenerate cell geometry')
        samples.append(sample)
    logger.info('Generated %s cells of size %s', count, size)
    return samples


def add_gaussian_noise(image: np.ndarray, sigma: float, seed) -> np.ndarray:
    if sigma == 0:
        return image.copy()
    rng = np.random.default_rng(seed)
    return np.clip(image + rng.normal(0.0, sigma, size=image.shape), 0.0, 1.0)


def add_salt_pepper(image: np.ndarray, fraction: float, kind: NoiseKind, seed) -> np.ndarray:
    """Sets floor(fraction * N1 * N2) whole pixels to 1 (salt) or 0 (pepper);
    ``both`` splits them evenly, salt first."""
    kind = NoiseKind(kind)
    if kind is NoiseKind.GAUSSIAN:
        raise ValueError('gaussian is not an impulse noise kind')
    if not (0.0 <= fraction <= 1.0):
        raise ValueError(f'fraction must be in [0, 1], got {fraction}')
    noisy = image.copy()
    _, height, width = image.shape
    count = int(np.floor(fraction * height * width))
    if count == 0:
        return noisy
    rng = np.random.default_rng(seed)
    chosen = rng.choice(height * width, size=count, replace=False)
    rows, cols = np.unravel_index(chosen, (height, width))
    if kind is NoiseKind.SALT:
        noisy[:, rows, cols] = 1.0
    elif kind is NoiseKind.PEPPER:
        noisy[:, rows, cols] = 0.0
    else:
        half = count // 2
        noisy[:, rows[:half], cols[:half]] = 1.0
        noisy[:, rows[half:], cols[half:]] = 0.0
    return noisy


def corrupt_training_subset(dataset: Sequence[Sample], subset_count: int, seed: int) -> List[Sample]:
    """Gaussian (sigma 0.05) or salt-and-pepper (1% of pixels) on a random subset."""
    if subset_count > len(dataset):
        raise ValueError(f'cannot corrupt {subset_count} of {len(dataset)} samples')
    corrupted = list(dataset)
    if subset_count == 0:
        return corrupted
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(dataset), size=subset_count, replace=False)
    noise_seeds = np.random.SeedSequence(seed).spawn(subset_count)
    for index, noise_seed in zip(chosen, noise_seeds):
        sample = corrupted[index]
        if rng.random() < 0.5:
            noisy = add_gaussian_noise(sample.image, TRAIN_NOISE_SIGMA, noise_seed)
        else:
            noisy = add_salt_pepper(sample.image, TRAIN_NOISE_FRACTION, NoiseKind.BOTH, noise_seed)
        corrupted[index] = Sample(image=noisy, label=sample.label)
    logger.info('Corrupted %s of %s training samples', subset_count, len(dataset))
    return corrupted


def _read_header(data: bytes, magic: bytes) -> Tuple[int, int, int, int]:
    """Parses magic, width, height and maxval; returns them with the payload offset."""
    tokens = []
    position = 0
    while len(tokens) < 4:
        while position < len(data) and data[position:position + 1].isspace():
            position += 1
        if position < len(data) and data[position:position + 1] == b'#':
            while position < len(data) and data[position:position + 1] not in (b'\n', b'\r'):
                position += 1
            continue
        start = position
        while position < len(data) and not data[position:position + 1].isspace() and data[position:position + 1] != b'#':
            position += 1
        if start == position:
            raise NetpbmHeaderError('header ended early')
        tokens.append(data[start:position])
    if tokens[0] != magic:
        raise NetpbmHeaderError(f'expected magic {magic!r}, got {tokens[0]!r}')
    try:
        width, height, maxval = (int(token) for token in tokens[1:])
    except ValueError:
        raise NetpbmHeaderError(f'non-numeric header fields {tokens[1:]!r}')
    if width < 1 or height < 1:
        raise NetpbmHeaderError(f'invalid size {width}x{height}')
    if maxval != 255:
        raise NetpbmMaxvalError(f'maxval must be 255, got {maxval}')
    if position >= len(data) or not data[position:position + 1].isspace():
        raise NetpbmHeaderError('missing whitespace after header')
    return width, height, maxval, position + 1


def _read_payload(path: str, magic: bytes, channels: int) -> np.ndarray:
    with open(path, 'rb') as netpbm_file:
        data = netpbm_file.read()
    width, height, _, offset = _read_header(data, magic)
    expected = width * height * channels
    payload = data[offset:offset + expected]
    if len(payload) < expected:
        raise NetpbmPayloadError(f'{path}: expected {expected} payload bytes, got {len(payload)}')
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)


def write_image(path: str, image: np.ndarray) -> None:
    """(3, H, W) values in [0, 1] as binary PPM."""
    _, height, width = image.shape
    pixels = np.rint(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8).transpose(1, 2, 0)
    with open(path, 'wb') as ppm:
        ppm.write(b'P6\n%d %d\n255\n' % (width, height))
        ppm.write(pixels.tobytes())


def read_image(path: str) -> np.ndarray:
    return _read_payload(path, b'P6', 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def write_label(path: str, label: np.ndarray) -> None:
    """Raw class indices as binary PGM."""
    height, width = label.shape
    with open(path, 'wb') as pgm:
        pgm.write(b'P5\n%d %d\n255\n' % (width, height))
        pgm.write(np.asarray(label, dtype=np.uint8).tobytes())


def read_label(path: str) -> np.ndarray:
    return _read_payload(path, b'P5', 1)[:, :, 0].astype(np.int64)


def write_dataset(path: str, samples: Sequence[Sample], splits: Dict[str, Sequence[int]], settings: Dict[str, object]) -> None:
    """images/NNNN.ppm, labels/NNNN.pgm and manifest.txt (key=value lines)."""
    root = Path(path)
    (root / 'images').mkdir(parents=True, exist_ok=True)
    (root / 'labels').mkdir(parents=True, exist_ok=True)
    for index, sample in enumerate(samples):
        write_image(str(root / 'images' / f'{index:04d}.ppm'), sample.image)
        write_label(str(root / 'labels' / f'{index:04d}.pgm'), sample.label)
    lines = [f'{key}={value}' for key, value in settings.items()]
    lines.append(f'count={len(samples)}')
    for split, indices in splits.items():
        lines.append(f'{split}=' + ','.join(f'{index:04d}' for index in indices))
    with open(root / 'manifest.txt', 'w', encoding='utf-8') as manifest:
        manifest.write('\n'.join(lines) + '\n')
    logger.info('Wrote %s samples into %s', len(samples), path)


def read_manifest(path: str) -> Dict[str, str]:
    manifest = {}
    with open(os.path.join(path, 'manifest.txt'), 'r', encoding='utf-8') as manifest_file:
        for line in manifest_file:
            line = line.strip()
            if line and not line.startswith('#'):
                key, value = line.split('=', 1)
                manifest[key] = value
    return manifest


def read_dataset(path: str) -> Dict[str, List[Sample]]:
    """Samples per split named in the manifest."""
    manifest = read_manifest(path)
    count = int(manifest['count'])
    splits = {}
    for key in ('train', 'test'):
        if key not in manifest:
            continue
        names = [name for name in manifest[key].split(',') if name]
        samples = []
        for name in names:
            if int(name) >= count:
                raise ValueError(f'{key} split names sample {name} beyond count {count}')
            samples.append(Sample(
                image=read_image(os.path.join(path, 'images', f'{name}.ppm')),
                label=read_label(os.path.join(path, 'labels', f'{name}.pgm')),
            ))
        splits[key] = samples
    return splits
