import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from .config import ConfigError, ExperimentConfig, load_config, dump_config, code_version
from .datagen import read_dataset, write_dataset
from .sweep import report_from_csv, run_sweep
from .train import Trainer

logger = logging.getLogger(__package__)

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def _progress() -> bool:
    return sys.stderr.isatty()


def cmd_gen_data(config: ExperimentConfig, output: Optional[str] = None) -> Path:
    try:
        config.data.validate()
    except ValueError as e:
        raise ConfigError(f"[data] {e}") from e
    path = Path(output or config.paths.dataset)
    path.parent.mkdir(parents=True, exist_ok=True)
    checksum = write_dataset(path, config.data, progress=_progress())
    print(f"{config.data.n_samples} samples written to {path}")
    print(f"sha256 {checksum}")
    return path


def cmd_train(config: ExperimentConfig, resume: bool = False) -> Path:
    config.validate()
    dataset = read_dataset(config.paths.dataset)
    out = config.paths.output
    out.mkdir(parents=True, exist_ok=True)
    dump_config(config, out / 'config.yaml')
    trainer = Trainer(config.train, config.model, config.aux, dataset.train, dataset.val,
                      config_hash=config.run_hash(), code_version=code_version(), progress=_progress())
    checkpoint = out / 'checkpoint.mqck'
    state = None
    if resume:
        if checkpoint.exists():
            state = trainer.load_checkpoint(checkpoint)
        else:
            logger.warning(f"no checkpoint at '{checkpoint}', starting from scratch")
    csv_path = out / 'metrics.csv'
    _, rows = trainer.run(csv_path, checkpoint, state)
    if rows:
        last = rows[-1]
        print(f"step {last['step']}: val_loss={last['val_loss']} rel_l2={last['rel_l2']} "
              f"macs_int8eq={last['macs_int8eq']}")
    return csv_path


def cmd_sweep(config: ExperimentConfig, resume: bool = False) -> Path:
    config.validate(sweep=True)
    if not Path(config.paths.dataset).exists():
        raise FileNotFoundError(f"No such dataset: '{config.paths.dataset}'")
    path = run_sweep(config, resume=resume, progress=_progress())
    print(f"sweep results written to {path}")
    return path


def cmd_report(config: ExperimentConfig, csv_paths: Sequence[str], output_dir: Optional[str] = None,
               plot: bool = False) -> Path:
    paths = list(csv_paths) or [str(config.paths.output / 'sweep.csv')]
    path = report_from_csv(paths, output_dir or config.paths.output, plot=plot or config.sweep.plot)
    print(f"report written to {path}")
    return path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='meshquant',
                                     description='Adaptive mixed-precision quantization of mesh MPNN surrogates')
    parser.add_argument('--config', '-c', help='YAML experiment config')
    parser.add_argument('--set', dest='overrides', action='append', default=[], metavar='SECTION.KEY=VALUE',
                        help='override a config value (repeatable)')
    parser.add_argument('--log-level', default=os.environ.get('MESHQUANT_LOG_LEVEL', 'INFO'),
                        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'], type=str.upper)
    verbs = parser.add_subparsers(dest='verb', required=True)

    gen = verbs.add_parser('gen-data', help='generate the synthetic Darcy dataset')
    gen.add_argument('--output', '-o', help='dataset path (default: paths.dataset)')

    train = verbs.add_parser('train', help='run joint training')
    train.add_argument('--resume', action='store_true', help='continue from the checkpoint in paths.output_dir')

    sweep = verbs.add_parser('sweep', help='train every sweep grid point over all seeds')
    sweep.add_argument('--resume', action='store_true', help='skip grid points that already finished')

    report = verbs.add_parser('report', help='summarize sweep CSVs into a Pareto report')
    report.add_argument('csv', nargs='*', help='sweep CSVs (default: paths.output_dir/sweep.csv)')
    report.add_argument('--output-dir', help='where report.csv goes (default: paths.output_dir)')
    report.add_argument('--plot', action='store_true', help='also write pareto.png')
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format='%(asctime)s [%(levelname)s] %(name)s: %(message)s')
    try:
        config = load_config(args.config, args.overrides)
        if args.verb == 'gen-data':
            cmd_gen_data(config, args.output)
        elif args.verb == 'train':
            cmd_train(config, args.resume)
        elif args.verb == 'sweep':
            cmd_sweep(config, args.resume)
        else:
            cmd_report(config, args.csv, args.output_dir, args.plot)
    except ConfigError as e:
        logger.error(f"invalid configuration: {e}")
        return EXIT_CONFIG
    except Exception as e:
        logger.error(f"{args.verb} failed: {e!r}")
        return EXIT_RUNTIME
    return EXIT_OK
