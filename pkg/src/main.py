import os
import sys
import json
import argparse
import logging
from enum import IntEnum
from typing import List, Optional

import pandas as pd
from dotenv import load_dotenv

from architecture import ArchError, InputShape, build_arch_spec, compute_c_max
from dataset import DEFAULT_VAL_FRACTION, DatasetError, load_dataset, prepare_dataset, save_dataset
from profiler import PROFILES, ProfilerConfig, ResourceLimits, check_feasibility, layer_costs, profile
from report import ReportError, ReportWriter, RunReport, read_report, summarize_report
from search import SearchConfig, build_and_profile, run_search
from synthetic_data import make_waveform_dataset
from training import (ParamsFormatError, PlateauSchedule, TrainConfig, TrainingError, evaluate_accuracy,
                      load_params, save_params, train_full)

# Load environment variables
load_dotenv()

# Set up logging
log = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'


class ExitCode(IntEnum):
    OK = 0
    INTERNAL = 1
    BAD_FLAGS = 2
    BAD_DATASET = 3
    INVALID_ARCH = 4


class ConfigurationError(ValueError):
    """A flag or environment value is out of range"""


def resolve_seed(seed: Optional[int]) -> int:
    """Explicit --seed, else TINYTNAS_SEED, else 0"""
    if seed is not None:
        return seed
    value = os.getenv('TINYTNAS_SEED', '0')
    try:
        return int(value)
    except ValueError as e:
        raise ConfigurationError(f"TINYTNAS_SEED must be an integer, got '{value}'") from e


def resolve_profiler(name: str) -> ProfilerConfig:
    try:
        return ProfilerConfig.from_profile(name)
    except ValueError as e:
        raise ConfigurationError(str(e)) from e


def _load_prepared(args, seed: int):
    raw = load_dataset(args.data, channels=args.channels, num_classes=args.num_classes)
    if not 0.0 < args.val_fraction < 1.0:
        raise ConfigurationError(f"--val-fraction must lie in (0, 1), got {args.val_fraction}")
    return raw, prepare_dataset(raw, args.val_fraction, seed)


def _resource_table(spec) -> pd.DataFrame:
    return pd.DataFrame(layer_costs(spec), columns=['layer', 'step', 'macs', 'weights', 'biases', 'live_bytes'])


def cmd_search(args) -> ExitCode:
    """Run one time-bound search and write its report"""
    seed = resolve_seed(args.seed)
    profiler_cfg = resolve_profiler(args.profiler_profile)
    if args.time_min < 0:
        raise ConfigurationError(f"--time-min must be >= 0, got {args.time_min}")
    try:
        limits = ResourceLimits.from_kb(args.ram_kb, args.flash_kb, args.mac)
    except ValueError as e:
        raise ConfigurationError(str(e)) from e

    try:
        cfg = SearchConfig(limits=limits, search_time=args.time_min * 60.0,
                           candidate_epochs=args.epochs_per_candidate, seed=seed, profiler_cfg=profiler_cfg)
    except ValueError as e:
        raise ConfigurationError(str(e)) from e

    raw, dataset = _load_prepared(args, seed)

    c_max = compute_c_max(dataset.meta.length)
    report = RunReport(config={
        'dataset': args.data,
        'dataset_digest': raw.digest(),
        'input_shape': dataset.meta.to_dict(),
        'val_fraction': args.val_fraction,
        'search': cfg.to_dict(),
        'initial_pair': [cfg.initial_k, min(cfg.initial_c, c_max)],
        'clamped': cfg.initial_c > c_max,
    })

    writer = ReportWriter(args.out)
    try:
        writer.write_config(report)
        result = run_search(dataset, cfg, on_record=writer.write_record)
        spec, resources = build_and_profile(result.K, result.C, dataset.meta, profiler_cfg)
        report.records = result.records
        report.K = result.K
        report.C = result.C
        report.resources = resources
        report.total_wall_ms = result.wall_ms
        writer.write_summary(report)
    finally:
        writer.close()

    print(spec.describe())
    print(_resource_table(spec).to_string(index=False))
    print(f"Resources: {resources.describe()}")
    print(f"Candidates evaluated: {len(result.records)}, best candidate accuracy {result.max_acc_found:.4f}")
    if not check_feasibility(resources, limits):
        log.warning(f"No feasible candidate was trained; k={result.K}, c={result.C} exceeds the limits")
    return ExitCode.OK


def cmd_profile(args) -> ExitCode:
    """Profile one (k, c) for an input shape without any dataset"""
    profiler_cfg = resolve_profiler(args.profiler_profile)
    shape = InputShape(args.length, args.channels, args.classes)
    spec = build_arch_spec(args.k, args.c, shape)
    estimate = profile(spec, profiler_cfg)
    if args.json:
        print(json.dumps(estimate.to_dict(), sort_keys=True))
        return ExitCode.OK
    print(spec.describe())
    print(_resource_table(spec).to_string(index=False))
    print(f"Resources ({profiler_cfg.name}): {estimate.describe()}")
    return ExitCode.OK


def cmd_train(args) -> ExitCode:
    """Full training of one architecture with best-epoch checkpointing"""
    seed = resolve_seed(args.seed)
    _, dataset = _load_prepared(args, seed)
    spec = build_arch_spec(args.k, args.c, dataset.meta)
    try:
        schedule = PlateauSchedule(factor=args.factor, patience=args.patience, min_lr=args.min_lr)
        cfg = TrainConfig(epochs=args.epochs, learning_rate=args.learning_rate, batch_size=args.batch_size,
                          seed=seed, plateau_schedule=schedule)
    except ValueError as e:
        raise ConfigurationError(str(e)) from e

    log.info(f"Training {spec.compact()} for {cfg.epochs} epochs")
    result = train_full(spec, dataset, cfg)
    save_params(result.best_params, args.out)

    history = pd.DataFrame([record.to_dict() for record in result.history])
    history_path = args.history or os.path.splitext(args.out)[0] + '_history.csv'
    history.to_csv(history_path, index=False)
    log.info(f"History written to {history_path}")

    print(history.to_string(index=False))
    print(f"Best validation accuracy {result.best_val_accuracy:.4f} at epoch {result.best_epoch}, "
          f"parameters saved to {args.out}")
    return ExitCode.OK


def cmd_evaluate(args) -> ExitCode:
    """Reload saved parameters and measure validation accuracy"""
    seed = resolve_seed(args.seed)
    _, dataset = _load_prepared(args, seed)
    spec = build_arch_spec(args.k, args.c, dataset.meta)
    params = load_params(args.params, spec)
    accuracy = evaluate_accuracy(spec, params, dataset.val_x, dataset.val_y)
    print(f"Validation accuracy of {spec.compact()}: {accuracy:.6f}")
    return ExitCode.OK


def cmd_generate(args) -> ExitCode:
    """Write the synthetic three-class waveform dataset as a TTS1 container"""
    seed = resolve_seed(args.seed)
    try:
        dataset = make_waveform_dataset(n=args.n, length=args.length, channels=args.channels,
                                        noise=args.noise, seed=seed)
    except (ValueError, ArchError) as e:
        raise ConfigurationError(str(e)) from e
    save_dataset(dataset, args.out)
    print(f"Wrote {len(dataset)} windows ({dataset.class_counts()}) to {args.out}")
    return ExitCode.OK


def cmd_report(args) -> ExitCode:
    """Print the candidates and the result of a saved report"""
    try:
        report = read_report(args.path)
    except OSError as e:
        log.error(f"Cannot read report {args.path}: {e}")
        return ExitCode.BAD_DATASET
    except ReportError as e:
        log.error(f"Invalid report {args.path}: {e}")
        return ExitCode.BAD_DATASET
    print(summarize_report(report))
    return ExitCode.OK


def _add_data_flags(parser: argparse.ArgumentParser):
    parser.add_argument('--data', required=True, help='TTS1 directory or CSV file')
    parser.add_argument('--channels', type=int, default=None, help='CSV only: channel count')
    parser.add_argument('--num-classes', type=int, default=None, help='CSV only: class count')
    parser.add_argument('--val-fraction', type=float, default=DEFAULT_VAL_FRACTION)
    parser.add_argument('--seed', type=int, default=None, help='Defaults to TINYTNAS_SEED')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='tinytnas',
                                     description='Time-bound hardware-aware architecture search for '
                                                 'time-series classification on microcontrollers')
    commands = parser.add_subparsers(dest='command', required=True)
    default_profile = os.getenv('TINYTNAS_PROFILER_PROFILE', 'exact-zero')

    search = commands.add_parser('search', help='Search (k, c) under resource limits and a time budget')
    _add_data_flags(search)
    search.add_argument('--ram-kb', type=float, default=20)
    search.add_argument('--flash-kb', type=float, default=64)
    search.add_argument('--mac', type=int, default=60000)
    search.add_argument('--time-min', type=float, default=10)
    search.add_argument('--epochs-per-candidate', type=int, default=4)
    search.add_argument('--profiler-profile', choices=sorted(PROFILES), default=default_profile)
    search.add_argument('--out', default='run.jsonl', help='JSONL report path')
    search.set_defaults(handler=cmd_search)

    prof = commands.add_parser('profile', help='Print the resource estimate of one architecture')
    prof.add_argument('--k', type=int, required=True)
    prof.add_argument('--c', type=int, required=True)
    prof.add_argument('--length', type=int, required=True)
    prof.add_argument('--channels', type=int, required=True)
    prof.add_argument('--classes', type=int, required=True)
    prof.add_argument('--profiler-profile', choices=sorted(PROFILES), default=default_profile)
    prof.add_argument('--json', action='store_true', help='Print the estimate as JSON only')
    prof.set_defaults(handler=cmd_profile)

    train = commands.add_parser('train', help='Fully train one architecture')
    _add_data_flags(train)
    train.add_argument('--k', type=int, required=True)
    train.add_argument('--c', type=int, required=True)
    train.add_argument('--epochs', type=int, default=200)
    train.add_argument('--learning-rate', type=float, default=1e-3)
    train.add_argument('--batch-size', type=int, default=64)
    train.add_argument('--factor', type=float, default=0.5)
    train.add_argument('--patience', type=int, default=20)
    train.add_argument('--min-lr', type=float, default=1e-5)
    train.add_argument('--out', default='model.ttnn', help='TTNN parameter file')
    train.add_argument('--history', default=None, help='CSV of the per-epoch history')
    train.set_defaults(handler=cmd_train)

    evaluate = commands.add_parser('evaluate', help='Validation accuracy of saved parameters')
    _add_data_flags(evaluate)
    evaluate.add_argument('--k', type=int, required=True)
    evaluate.add_argument('--c', type=int, required=True)
    evaluate.add_argument('--params', required=True, help='TTNN parameter file')
    evaluate.set_defaults(handler=cmd_evaluate)

    generate = commands.add_parser('generate', help='Write the synthetic waveform dataset')
    generate.add_argument('--out', required=True, help='Target TTS1 directory')
    generate.add_argument('--n', type=int, default=1500)
    generate.add_argument('--length', type=int, default=64)
    generate.add_argument('--channels', type=int, default=3)
    generate.add_argument('--noise', type=float, default=0.1)
    generate.add_argument('--seed', type=int, default=None)
    generate.set_defaults(handler=cmd_generate)

    rep = commands.add_parser('report', help='Summarize a search report')
    rep.add_argument('path')
    rep.set_defaults(handler=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point"""
    logging.basicConfig(level=os.getenv('TINYTNAS_LOG_LEVEL', 'INFO').upper(), format=LOG_FORMAT)
    args = build_parser().parse_args(argv)

    try:
        return int(args.handler(args))
    except ConfigurationError as e:
        log.error(f"Invalid configuration: {e}")
        return ExitCode.BAD_FLAGS
    except DatasetError as e:
        log.error(f"Invalid dataset: {e}")
        return ExitCode.BAD_DATASET
    except (ArchError, ParamsFormatError) as e:
        log.error(f"Invalid architecture: {e}")
        return ExitCode.INVALID_ARCH
    except TrainingError as e:
        log.error(f"Training failed: {e}")
        return ExitCode.INTERNAL
    except Exception as e:
        log.error(f"Unexpected error: {e}", exc_info=True)
        return ExitCode.INTERNAL


if __name__ == "__main__":
    sys.exit(main())
