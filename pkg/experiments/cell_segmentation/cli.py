import argparse
import logging
import os
import sys
from typing import Dict, List, Optional, Sequence
sys.path.append(os.path.dirname(os.path.abspath(__file__)) + "/../../")

from experiments.cell_segmentation.common import (
    EXIT_OK,
    EXIT_RUNTIME,
    EXIT_USAGE,
    ConfigError,
    checkpoint_path,
    dataset_exists,
    dataset_path,
    generate_dataset,
    load_dataset,
    load_manifest,
    net_spec,
    open_stores,
    parse_widths,
    reg_config,
    trained_models,
    write_manifest,
)
from experiments.cell_segmentation.gradcheck import CHECKS, DEFAULT_INSTANCES, run_gradcheck
from experiments.cell_segmentation.sweep import DEFAULT_POST_TV_LAMBDA, DEFAULT_SWEEP, parse_sweep, run_sweep
from experiments.cell_segmentation.table import TRAIN_LOG_FIELDS
from tvseg.mini_net import (
    DEFAULT_LAMBDA_LEARNING_RATE,
    DEFAULT_LEARNING_RATE,
    DEFAULT_MOMENTUM,
    BuildError,
    CheckpointError,
    TrainingError,
    build,
    save_checkpoint,
    train,
)
from tvseg.reg_activation import DEFAULT_KAPPA, DEFAULT_TAU, DEFAULT_TEST_ITERATIONS
from tvseg.synth_data import NetpbmError, corrupt_training_subset
from utils.experiment_util import ExperimentConfig
from utils.helper import derive_seed
from utils.logger_util import MultiProcessLoggerUtil

logger = logging.getLogger('main')

site_name = 'cell_segmentation'


class ArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with status 1 instead of argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f'{self.prog}: error: {message}\n')


def _common_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument("--out", help="output directory", default='output')
    parser.add_argument("--seed", help="seed of every random choice", type=int, default=0)
    parser.add_argument("--store", help="also store rows in SQLite", choices=['csv', 'sqlite'], default='csv')
    parser.add_argument("-p", "--processes", help="run with n processes", type=int, default=1)
    parser.add_argument("-c", "--chunk-size", help="size of tasks inside one process.", type=int, default=1)
    parser.add_argument("--log-name", help="log file name under <out>/logs", default=None)
    parser.add_argument("--manifest", help="re-run the command recorded in a manifest", default=None)
    return parser


def _model_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument("--dataset", help="dataset directory (default <out>/dataset)", default=None)
    parser.add_argument("--mode", choices=['plain', 'regularized', 'both'], default='both')
    parser.add_argument("--iters", help="dual iterations at test time", type=int, default=DEFAULT_TEST_ITERATIONS)
    return parser


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog='cell_segmentation', description='TV-regularized segmentation experiments')
    subparsers = parser.add_subparsers(dest='command', parser_class=ArgumentParser)
    subparsers.required = True
    common, model = _common_parser(), _model_parser()

    train_parser = subparsers.add_parser('train', parents=[common, model], help='train plain and regularized networks')
    train_parser.add_argument("--generate", help="generate the synthetic dataset first", action='store_true')
    train_parser.add_argument("--size", help="generated image size", type=int, default=64)
    train_parser.add_argument("--count", help="generated image count", type=int, default=100)
    train_parser.add_argument("--lambda", dest='lam', help="initial regularization weight", type=float, default=0.5)
    train_parser.add_argument("--kappa", help="one-step dual step", type=float, default=DEFAULT_KAPPA)
    train_parser.add_argument("--tau", help="iterative dual step", type=float, default=DEFAULT_TAU)
    train_parser.add_argument("--levels", help="encoder levels", type=int, default=2)
    train_parser.add_argument("--widths", help="channels per level, comma separated", default='16,32')
    train_parser.add_argument("--epochs", type=int, default=20)
    train_parser.add_argument("--batch", type=int, default=4)
    train_parser.add_argument("--lr", help="learning rate of the weights", type=float, default=DEFAULT_LEARNING_RATE)
    train_parser.add_argument("--lr-lambda", help="learning rate of lambda", type=float, default=DEFAULT_LAMBDA_LEARNING_RATE)
    train_parser.add_argument("--momentum", type=float, default=DEFAULT_MOMENTUM)
    train_parser.add_argument("--noise-train", choices=['none', 'paper'], default='none',
                              help="'paper' corrupts a third of the training images")

    sweep_parser = subparsers.add_parser('sweep', parents=[common, model], help='evaluate checkpoints under noise')
    sweep_parser.add_argument("--checkpoints", help="checkpoint directory (default --out)", default=None)
    sweep_parser.add_argument("--sweep", help="noise points", default=DEFAULT_SWEEP)
    sweep_parser.add_argument("--svg", help="write an mIoU vs sigma chart", action='store_true')
    sweep_parser.add_argument("--post-tv-lambda", type=float, default=DEFAULT_POST_TV_LAMBDA)
    sweep_parser.add_argument("--post-tv-select", help="pick the post-TV lambda on the training split",
                              action='store_true')

    gradcheck_parser = subparsers.add_parser('gradcheck', parents=[common], help='check analytic gradients')
    gradcheck_parser.add_argument("--instances", type=int, default=DEFAULT_INSTANCES)
    gradcheck_parser.add_argument("--inject-failure", choices=sorted(CHECKS), default=None,
                                  help="double one check's analytic gradient")

    parser.subparsers_by_name = {'train': train_parser, 'sweep': sweep_parser, 'gradcheck': gradcheck_parser}
    return parser


def parse_arguments(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    """Parses ``argv``; with ``--manifest`` the recorded config becomes the
    defaults and explicit flags still win."""
    parser = build_parser()
    arguments = parser.parse_args(argv)
    if arguments.manifest:
        try:
            manifest = load_manifest(arguments.manifest)
        except ConfigError as error:
            parser.error(str(error))
        if manifest['command'] != arguments.command:
            parser.error(f"manifest records '{manifest['command']}', not '{arguments.command}'")
        subparser = parser.subparsers_by_name[arguments.command]
        subparser.set_defaults(**{key: value for key, value in manifest['config'].items()
                                  if key not in ('command', 'manifest')})
        arguments = parser.parse_args(argv)
    return arguments


def validate(config: ExperimentConfig) -> List[str]:
    """Every problem with the resolved config, not just the first."""
    problems = config.validate()
    values = config.values
    if config.command in ('train', 'sweep'):
        if values['iters'] < 1:
            problems.append(f"--iters must be >= 1, got {values['iters']}")
        path = dataset_path(config)
        if not values.get('generate') and not dataset_exists(path):
            problems.append(f'no dataset at {path}; pass --generate or --dataset')
    if config.command == 'train':
        try:
            widths = parse_widths(values['widths'])
        except ValueError:
            problems.append(f"--widths must be comma separated integers, got {values['widths']!r}")
            widths = None
        try:
            reg = reg_config(config)
        except ValueError as error:
            problems.append(str(error))
            reg = None
        if widths is not None and reg is not None:
            try:
                spec = net_spec(config, 'plain')
                if values['generate']:
                    spec.check_image_size(values['size'], values['size'])
            except BuildError as error:
                problems.append(str(error))
        if values['generate'] and (values['size'] < 32 or values['size'] % 4):
            problems.append(f"--size must be >= 32 and divisible by 4, got {values['size']}")
        if values['generate'] and values['count'] < 2:
            problems.append(f"--count must be >= 2, got {values['count']}")
        for flag, key in (('--epochs', 'epochs'), ('--batch', 'batch')):
            if values[key] < (0 if key == 'epochs' else 1):
                problems.append(f'{flag} is out of range: {values[key]}')
        for flag, key in (('--lr', 'lr'), ('--lr-lambda', 'lr_lambda')):
            if not values[key] > 0:
                problems.append(f'{flag} must be > 0, got {values[key]}')
        if not 0 <= values['momentum'] < 1:
            problems.append(f"--momentum must be in [0, 1), got {values['momentum']}")
    if config.command == 'sweep':
        try:
            parse_sweep(values['sweep'])
        except ValueError as error:
            problems.append(str(error))
        if values['post_tv_lambda'] < 0:
            problems.append(f"--post-tv-lambda must be >= 0, got {values['post_tv_lambda']}")
    if config.command == 'gradcheck' and values['instances'] < 1:
        problems.append(f"--instances must be >= 1, got {values['instances']}")
    return problems


def run_train(config: ExperimentConfig) -> int:
    path = dataset_path(config)
    if config.generate:
        generate_dataset(config, path)
    splits = load_dataset(path)
    train_set = splits.get('train', [])
    if not train_set:
        logger.error("Dataset %s has no training samples", path)
        return EXIT_RUNTIME
    if config.noise_train == 'paper':
        train_set = corrupt_training_subset(train_set, len(train_set) // 3, derive_seed(config.seed, 'noise-train'))

    image_size = train_set[0].label.shape
    outputs: Dict[str, object] = {'dataset': path}
    for model in trained_models(config.mode):
        network = build(net_spec(config, model), config.seed, config.lr, config.momentum, image_size)
        logger.info("Training %s for %s epochs on %s samples", model, config.epochs, len(train_set))
        network, log = train(network, train_set, config.epochs, config.batch, config.seed, config.lr_lambda)

        save_checkpoint(network, checkpoint_path(config.out, model))
        train_log, _ = open_stores(config, f'{model}_train_log', TRAIN_LOG_FIELDS, None)
        train_log.save(log.rows())
        outputs[model] = {
            'checkpoint': checkpoint_path(config.out, model),
            'train_log': train_log.path,
            'final_loss': log.losses[-1] if log.losses else None,
            'final_lambda': network.lam,
        }
        if log.losses:
            logger.info("Finished %s: final loss %.6f lambda %.6f", model, log.losses[-1], network.lam)
    write_manifest(config, outputs)
    return EXIT_OK


COMMANDS = {'train': run_train, 'sweep': run_sweep, 'gradcheck': run_gradcheck}


def main(argv: Optional[Sequence[str]] = None) -> int:
    arguments = parse_arguments(argv)
    os.makedirs(arguments.out, exist_ok=True)
    logger_util = MultiProcessLoggerUtil(arguments.log_name or f'{site_name}_{arguments.command}',
                                         log_dir=os.path.join(arguments.out, 'logs'))
    config = ExperimentConfig(arguments, logger_queue=logger_util.queue)
    try:
        problems = validate(config)
        if problems:
            for problem in problems:
                logger.error("Config problem: %s", problem)
            return EXIT_USAGE
        return COMMANDS[config.command](config)
    except TrainingError as error:
        logger.critical("Training aborted at iteration %s: %s", error.iteration, error)
        return EXIT_RUNTIME
    except (BuildError, CheckpointError, NetpbmError, OSError) as error:
        logger.critical("Run failed: %s", error)
        return EXIT_RUNTIME
    finally:
        logger_util.close()


if __name__ == "__main__":
    sys.exit(main())
