import sys
import os

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.config import ConfigError, RunConfig, setup_logging
from src.runner import EXIT_USAGE, PipelineRunner


def main(argv=None) -> int:
    try:
        config = RunConfig.from_args(argv)
    except (ConfigError, FileNotFoundError) as e:
        print(f"sharpfield: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logger = setup_logging(config.verbose)
    logger.info(f"sharpfield {config.command} starting with inputs {config.inputs}")

    runner = PipelineRunner(config)
    return runner.run()


if __name__ == "__main__":
    sys.exit(main())
