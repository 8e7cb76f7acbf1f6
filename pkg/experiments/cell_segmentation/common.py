"""Settings, paths, stores and manifests shared by the train, sweep and
gradcheck commands."""
import json
import logging
import os
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional, Sequence

from sqlalchemy.orm.decl_api import DeclarativeMeta

from tvseg.mini_net import FinalActivation, NetSpec
from tvseg.reg_activation import ActivationMode, RegActConfig
from tvseg.synth_data import Sample, generate_cells, read_dataset, write_dataset
from utils.database_utils import DataBaseType, init_database
from utils.experiment_util import ExperimentConfig
from utils.helper import derive_seed

logger = logging.getLogger('cell_segmentation')

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_GRADCHECK = 3

TRAIN_FRACTION = 0.6
MODEL_PLAIN = 'plain'
MODEL_REGULARIZED = 'regularized'
MODEL_POST_TV = 'plain+tv'


class ConfigError(ValueError):
    def __init__(self, problems: Sequence[str]) -> None:
        super().__init__('; '.join(problems))
        self.problems = list(problems)


def parse_widths(text: str) -> List[int]:
    if not str(text).strip():
        return []
    return [int(width) for width in str(text).split(',')]


def dataset_path(config: ExperimentConfig) -> str:
    return config.dataset or os.path.join(config.out, 'dataset')


def dataset_exists(path: str) -> bool:
    return os.path.isfile(os.path.join(path, 'manifest.txt'))


def trained_models(mode: str) -> List[str]:
    if mode == 'plain':
        return [MODEL_PLAIN]
    if mode == 'regularized':
        return [MODEL_REGULARIZED]
    return [MODEL_PLAIN, MODEL_REGULARIZED]


def checkpoint_path(directory: str, model: str) -> str:
    return os.path.join(directory, f'{model}.ckpt')


def reg_config(config: ExperimentConfig) -> RegActConfig:
    """Regularized activation settings; ``iters`` is the test-time iteration count."""
    return RegActConfig(
        lam=config.lam,
        kappa=config.kappa,
        tau=config.tau,
        iterations=config.iters,
        mode=ActivationMode.ONE_STEP,
    )


def net_spec(config: ExperimentConfig, model: str) -> NetSpec:
    final = FinalActivation.REGULARIZED if model == MODEL_REGULARIZED else FinalActivation.PLAIN
    return NetSpec(
        in_channels=3,
        classes=3,
        levels=config.levels,
        widths=parse_widths(config.widths),
        final=final,
        reg=reg_config(config),
    )


def generate_dataset(config: ExperimentConfig, path: str) -> None:
    samples = generate_cells(config.count, config.size, derive_seed(config.seed, 'dataset'))
    train_count = int(round(TRAIN_FRACTION * config.count))
    splits = {
        'train': list(range(train_count)),
        'test': list(range(train_count, config.count)),
    }
    write_dataset(path, samples, splits, {'seed': config.seed, 'size': config.size})


def load_dataset(path: str) -> Dict[str, List[Sample]]:
    splits = read_dataset(path)
    logger.info('Loaded %s train and %s test samples from %s',
                len(splits.get('train', [])), len(splits.get('test', [])), path)
    return splits


def open_stores(config: ExperimentConfig, name: str, fields: List[str], table: Optional[DeclarativeMeta]):
    """CSV store for ``<out>/<name>.csv`` plus, with ``--store sqlite``, the same
    rows in ``<out>/<name>.sqlite3``."""
    csv_store = init_database(name=name, database_type=DataBaseType.CSV, path=config.out, fields=fields)
    extra = []
    if table is not None and config.values.get('store') == 'sqlite':
        extra.append(init_database(name=name, database_type=DataBaseType.DATABASE, path=config.out, fields=table))
    return csv_store, extra


def write_manifest(config: ExperimentConfig, outputs: Dict[str, Any]) -> str:
    """``<out>/<command>_manifest.json``; the only file carrying a timestamp."""
    manifest = init_database(name=f'{config.command}_manifest', database_type=DataBaseType.JSON, path=config.out)
    resolved = {key: value for key, value in config.as_dict().items() if key != 'manifest'}
    manifest.save({
        'command': config.command,
        'config': resolved,
        'outputs': outputs,
        'created_at': datetime.now(timezone.utc).isoformat(),
    })
    return manifest.path


def load_manifest(path: str) -> Dict[str, Any]:
    try:
        with open(path, 'r', encoding='utf-8') as manifest_file:
            manifest = json.load(manifest_file)
    except (OSError, ValueError) as error:
        raise ConfigError([f'cannot read manifest {path}: {error}'])
    if not isinstance(manifest, dict) or 'command' not in manifest or 'config' not in manifest:
        raise ConfigError([f'{path} is not a manifest'])
    return manifest
