import argparse
import logging
import logging.handlers
from pathlib import Path

from .artifacts import ArtifactError
from .config_parser import ConfigError, ConfigParser
from .data import DataFormatError
from .experiments import run_evaluation, run_knn_baseline, run_sweep, run_trace, run_training
from .optim import DivergenceError

# Configuration Constants
LOG_FILENAME = 'metaneighbors.log'
LOG_MAX_BYTES = 2097152  # 2MB
LOG_BACKUP_COUNT = 5
LOG_FORMAT = '%(asctime)s:%(name)s:%(levelname)s: %(message)s'

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

COMMANDS = ('train', 'eval', 'sweep', 'trace', 'knn-baseline')


def setup_logging(log_to_console=True, log_level=logging.INFO, log_dir=None):
    """Set up and return the main logger for metaneighbors with the specified output and log level."""
    main_logger = logging.getLogger("metaneighbors")
    main_logger.setLevel(log_level)
    formatter = logging.Formatter(LOG_FORMAT)
    if log_to_console:
        handler = logging.StreamHandler()
    else:
        log_dir = Path(log_dir or '.')
        log_dir.mkdir(parents=True, exist_ok=True)
        handler = logging.handlers.RotatingFileHandler(
            log_dir / LOG_FILENAME, maxBytes=LOG_MAX_BYTES, backupCount=LOG_BACKUP_COUNT)
    handler.setFormatter(formatter)
    main_logger.handlers.clear()  # Avoid duplicate logs
    main_logger.addHandler(handler)
    return main_logger


def build_parser():
    parser = argparse.ArgumentParser(
        prog="metaneighbors",
        description="Meta-Neighborhoods: per-query fine-tuning against a learned neighbor dictionary"
    )
    parser.add_argument("command", choices=COMMANDS, help="What to run")
    parser.add_argument("--config", type=Path, help="Path to YAML run configuration")
    parser.add_argument("--seed", type=int, help="Override the configured seed")
    parser.add_argument("--out", type=Path, help="Override the configured output directory")
    parser.add_argument("--artifact", type=Path, help="Model artifact to evaluate (eval only)")
    parser.add_argument("--log-level", default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"],
                        help="Set the logging level")
    parser.add_argument("--log-file", action="store_true",
                        help="Log to a rotating file in the output directory instead of the console")
    return parser


def run_command(command, config, artifact=None):
    """Dispatch one subcommand; returns what the experiment driver returns."""
    out_dir = Path(config.output_dir)
    if command == 'train':
        return run_training(config, out_dir)
    elif command == 'eval':
        if artifact is None:
            raise ConfigError('artifact', "eval needs --artifact")
        return run_evaluation(config, artifact, out_dir)
    elif command == 'sweep':
        return run_sweep(config, out_dir)
    elif command == 'trace':
        return run_trace(config, out_dir)
    elif command == 'knn-baseline':
        return run_knn_baseline(config, out_dir)
    raise ConfigError('command', f"Unknown command: {command}")


def main(argv=None):
    """Main entry point for metaneighbors."""
    parser = build_parser()
    args = parser.parse_args(argv)

    log_level = getattr(logging, args.log_level.upper(), logging.INFO)
    logger = setup_logging(log_to_console=True, log_level=log_level)

    # Load configuration
    config_parser = ConfigParser()
    try:
        config = config_parser.load_config(config_path=args.config)
        config = config.with_overrides(seed=args.seed, output_dir=args.out)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        parser.print_help()
        return EXIT_CONFIG

    if args.log_file:
        logger = setup_logging(log_to_console=False, log_level=log_level, log_dir=config.output_dir)

    logger.info('Starting metaneighbors %s', args.command)
    logger.info('Task: %s, method: %s, seed: %d', config.task, config.model.method, config.seed)
    logger.info('Output directory: %s', config.output_dir)

    try:
        run_command(args.command, config, args.artifact)
    except (ConfigError, ArtifactError, DataFormatError) as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except DivergenceError as e:
        logger.error(f"Numerical failure: {e}")
        return EXIT_NUMERICAL
    except ValueError as e:
        # NeighborhoodError, ZeroNormError, ShapeError and malformed batches
        logger.error(f"Invalid input: {type(e).__name__}: {e}")
        return EXIT_CONFIG
    except KeyboardInterrupt:
        logger.info('Shutting down metaneighbors')
        return 1

    logger.info('Finished %s', args.command)
    return EXIT_OK


if __name__ == '__main__':
    raise SystemExit(main())
