import argparse
import logging
import sys

from config import Settings, load_config
from models import ConfigError, StageError
from pipeline_service import ScenarioPipeline

USAGE = """
Occupancy reconstruction lab.

  generate   build the empirical tables and ground-truth universe per seed
  publish    evaluate the query workload and apply each scenario's mechanism
  attack     detect and reconstruct from the published statistics on disk
  evaluate   score the attack files against the ground truth
  report     comparison table and plots from report files (or the run registry)
  sweep      every scenario over every seed, end to end
"""

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_STAGE = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(formatter_class=argparse.RawDescriptionHelpFormatter, description=USAGE)
    parser.add_argument("verb", choices=["generate", "publish", "attack", "evaluate", "report", "sweep"])
    parser.add_argument("--config", type=str, default=None, help="JSON scenario config (defaults when omitted)")
    parser.add_argument("--seed", type=int, action="append", default=None,
                        help="Seed override; repeat for several seeds")
    parser.add_argument("--scenario", type=str, action="append", default=None,
                        help="Scenario label; repeat for several (default: all in the config)")
    parser.add_argument("--output-dir", type=str, default=None, help="Output directory")
    parser.add_argument("--workers", type=int, default=None, help="Parallel block workers")
    parser.add_argument("--from-store", action="store_true", help="report: read the run registry instead of files")
    return parser


def run(args: argparse.Namespace) -> int:
    settings = Settings.from_env()
    config = load_config(args.config)
    output_dir = args.output_dir or config.output_dir or settings.output_dir
    workers = args.workers or settings.workers
    if workers < 1:
        raise ConfigError(f"--workers must be positive, got {workers}")
    seeds = args.seed or config.seeds
    pipeline = ScenarioPipeline(config, output_dir, workers)
    labels = [s.label for s in config.scenarios] if not args.scenario else args.scenario
    for label in labels:
        config.scenario(label)

    if args.verb == "generate":
        for seed in seeds:
            pipeline.generate(seed)
    elif args.verb == "publish":
        for seed in seeds:
            for label in labels:
                pipeline.publish(label, seed)
    elif args.verb == "attack":
        for seed in seeds:
            for label in labels:
                pipeline.attack(label, seed)
    elif args.verb == "evaluate":
        for seed in seeds:
            for label in labels:
                pipeline.evaluate(label, seed)
    elif args.verb == "report":
        table = pipeline.report(from_store=args.from_store, seeds=seeds, labels=labels)
        print(table.to_string(index=False))
    elif args.verb == "sweep":
        pipeline.sweep(seeds=seeds, labels=labels)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=Settings.from_env().log_level.upper(),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    try:
        return run(args)
    except ConfigError as e:
        logging.error(f"Configuration error: {str(e)}")
        return EXIT_CONFIG
    except StageError as e:
        logging.error(f"Stage '{e.stage}' failed: {str(e.cause)}")
        return EXIT_STAGE
    except Exception as e:
        logging.error(f"Unexpected failure: {str(e)}", exc_info=True)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
