import argparse
import logging
import os
import sys
from typing import List, Optional

from dotenv import load_dotenv

from analysis_modules.pipeline_stages import COMMAND_STAGES, STAGES, run_command
from src.config import RunConfig, resolve_path
from src.errors import EXIT_OK, EXIT_STAGE_FAILURE, SynthRankError

logger = logging.getLogger(__name__)

COMMANDS = list(COMMAND_STAGES) + ['run']

COMMAND_HELP = {
    'ingest': "Ingest the corpus into corpus.jsonl",
    'genqueries': "Sample seed documents and generate one synthetic query per seed",
    'index': "Embed the search pool into a dense index",
    'retrieve': "Retrieve the top-k candidates of every query",
    'mine': "Score candidates with the LLM judge and mine triplets",
    'split': "Split triplets into train and test sets",
    'train': "Train the cross-encoder on the training split",
    'eval': "Evaluate a checkpoint on the test sets",
    'ablate': "Run the dataset-size ablation",
    'report': "Write CSV/JSON/HTML reports for the ablation",
    'run': "Run every pipeline stage from ingest to split",
}


def parse_sizes(value: str) -> List[int]:
    try:
        return [int(part) for part in value.split(',') if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"Expected a comma-separated list of integers, got {value!r}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', default='config.json', help="Path of the JSON run configuration")
    common.add_argument('--out', help="Output directory (overrides output_dir)")
    common.add_argument('--resume', action='store_true', help="Skip stages already complete in the manifest")
    common.add_argument('--mock-backends', action='store_true', help="Use the deterministic mock LLM and embedder")
    common.add_argument('--seed', type=int, help="Override every rng seed of the configuration")
    common.add_argument('--log-level', default='INFO', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])
    common.add_argument('--progress', action='store_true', help="Show progress bars")

    parser = argparse.ArgumentParser(prog='synthrank',
                                     description="Query-less fine-tuning pipeline for cross-encoder rerankers")
    subparsers = parser.add_subparsers(dest='command', required=True)
    commands = {name: subparsers.add_parser(name, parents=[common], help=COMMAND_HELP[name]) for name in COMMANDS}

    commands['run'].add_argument('--until', choices=STAGES, help="Last stage to run")
    commands['eval'].add_argument('--checkpoint', help="Checkpoint to evaluate (default: <out>/checkpoint.ckpt)")
    commands['ablate'].add_argument('--sizes', type=parse_sizes, help="Comma-separated subset sizes")
    commands['ablate'].add_argument('--epochs', type=int, help="Epochs per subset size")
    commands['report'].add_argument('--format', dest='fmt', default='all',
                                    choices=['csv', 'table', 'json', 'html', 'all'])
    return parser


def load_run_config(args: argparse.Namespace) -> RunConfig:
    """Config file plus the global CLI overrides."""
    config = RunConfig.load_config(resolve_path(args.config))
    if args.out:
        config.output_dir = args.out
    if args.mock_backends:
        config.use_mock_backends()
    if args.seed is not None:
        config.apply_seed(args.seed)
    return config


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)

    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        stream=sys.stdout
    )

    options = {}
    if args.command == 'run':
        options['until'] = args.until
    elif args.command == 'eval' and args.checkpoint:
        options['checkpoint_path'] = args.checkpoint
    elif args.command == 'ablate':
        options.update(sizes=args.sizes, epochs=args.epochs)
    elif args.command == 'report':
        options['fmt'] = args.fmt

    try:
        config = load_run_config(args)
        manifest = run_command(config, args.command, resume=args.resume, progress=args.progress, **options)
    except SynthRankError as e:
        logger.error(f"{args.command} failed: {e}")
        return e.exit_code
    except Exception as e:
        logger.exception(f"{args.command} failed with an unexpected error: {e}")
        return EXIT_STAGE_FAILURE

    logger.info(f"{args.command} finished; manifest at {os.path.join(manifest.output_dir, 'manifest.json')}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
