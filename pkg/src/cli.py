"""
Command-line surface: one subcommand per pipeline step.

Machine-readable TSV goes to standard output; progress and diagnostics go to
standard error through logging.
"""
import argparse
import logging
import os
import sys
from typing import List, Optional, Sequence

from src.benchmark import format_rows, memory_report, time_real_valued, time_search
from src.config import DEFAULT_THREADS, LOG_FILE, LOG_LEVEL, load_config, parse_config_text
from src.errors import PoshError, UsageError
from src.evalmetrics import write_report
from src.hash_index import format_hits, read_codes
from src.pipeline import STRUCTURE_SUFFIXES, PoshPipeline, setup_logging
from src.synth import FamilySpec
from src.tmscore import format_pair_rows

logger = logging.getLogger(__name__)


def _read_ids(values: Sequence[str]) -> List[str]:
    """Expand `@file` arguments into the whitespace-separated ids they contain."""
    ids = []
    for value in values:
        if value.startswith('@'):
            with open(value[1:], 'r', encoding='utf-8') as f:
                ids.extend(f.read().split())
        else:
            ids.append(value)
    return ids


def cmd_fetch(pipeline: PoshPipeline, args, out) -> int:
    summary = pipeline.fetch(_read_ids(args.ids), args.output)
    for key, value in summary.items():
        out.write(f"{key}\t{value}\n")
    return 0 if summary['failed'] == 0 else 1


def cmd_ingest(pipeline: PoshPipeline, args, out) -> int:
    chains, _ = pipeline.ingest(args.pdb_dir, args.output, args.chain)
    for chain in chains:
        out.write(f"{chain.id}\t{len(chain)}\n")
    return 0


def cmd_featurize(pipeline: PoshPipeline, args, out) -> int:
    for graph in pipeline.featurize(args.chains, args.output):
        out.write(f"{graph.id}\t{graph.n_residues}\t{graph.n_edges}\n")
    return 0


def cmd_tmscore(pipeline: PoshPipeline, args, out) -> int:
    if args.fragments:
        plan = pipeline.fragment_plan(args.chains, args.output)
        for structure_id, length in plan.min_length.items():
            out.write(f"{structure_id}\t{length}\n")
        return 0
    pair_ids = None
    if args.pairs:
        with open(args.pairs, 'r', encoding='utf-8') as f:
            pair_ids = [tuple(line.split()[:2]) for line in f if line.strip()]
        if any(len(p) != 2 for p in pair_ids):
            raise UsageError(f"{args.pairs}: each line needs two structure ids")
    text = format_pair_rows(pipeline.tmscore_pairs(args.chains, pair_ids))
    if args.output:
        with open(args.output, 'w', encoding='utf-8') as f:
            f.write(text)
    out.write(text)
    return 0


def cmd_train(pipeline: PoshPipeline, args, out) -> int:
    history = pipeline.train(args.graphs, args.similarity, args.output, chains_path=args.chains,
                             metrics_path=args.metrics, progress=not args.no_progress)
    out.write('step\tl_sim\tl_hash\tloss\n')
    for step, l_sim, l_hash, loss in history.rows:
        out.write(f"{step}\t{l_sim:.6f}\t{l_hash:.6f}\t{loss:.6f}\n")
    return 0


def cmd_encode(pipeline: PoshPipeline, args, out) -> int:
    for code in pipeline.encode(args.checkpoint, args.graphs, args.output):
        out.write(f"{code.id}\t{code.n_residues}\t{code.popcount()}\n")
    return 0


def cmd_index(pipeline: PoshPipeline, args, out) -> int:
    db = pipeline.build_index(args.codes, args.output)
    out.write(f"{len(db)}\t{db.code_length}\t{os.path.getsize(args.output)}\n")
    return 0


def cmd_search(pipeline: PoshPipeline, args, out) -> int:
    if args.query.lower().endswith(STRUCTURE_SUFFIXES):
        if not args.model:
            raise UsageError("Searching with a structure file needs --model <checkpoint>")
        queries = [pipeline.structure_code(args.model, args.query)]
    else:
        queries = read_codes(args.query)
    results = pipeline.search(args.index, queries, args.k)
    for query, hits in results:
        out.write(format_hits(hits, query.id if len(results) > 1 else None))
    return 0


def cmd_eval(pipeline: PoshPipeline, args, out) -> int:
    report = pipeline.evaluate(args.index, args.queries, args.similarity)
    out.write(write_report(args.output, report))
    return 0


def cmd_synth(pipeline: PoshPipeline, args, out) -> int:
    spec = FamilySpec()
    if args.spec:
        with open(args.spec, 'r', encoding='utf-8') as f:
            spec = FamilySpec.from_text(f.read())
    overrides = {
        'n_families': args.families, 'members': args.members, 'min_length': args.min_length,
        'max_length': args.max_length, 'sigma': args.sigma, 'seed': args.seed,
    }
    for key, value in overrides.items():
        if value is not None:
            setattr(spec, key, value)
    dataset = pipeline.synth(spec.validate(), args.output)
    for chain, family in zip(dataset.chains, dataset.families):
        out.write(f"{chain.id}\t{family}\t{len(chain)}\n")
    return 0


def cmd_benchmark(pipeline: PoshPipeline, args, out) -> int:
    try:
        sizes = [int(s) for s in args.sizes.split(',') if s]
    except ValueError:
        raise UsageError(f"--sizes must be comma-separated integers, got {args.sizes!r}")
    if args.memory:
        out.write('n\td\tbinary_bytes\treal_bytes\tratio\n')
        for n in sizes:
            m = memory_report(n, args.bits)
            out.write(f"{m['n']}\t{m['d']}\t{m['binary_bytes']}\t{m['real_bytes']}\t{m['ratio']:.1f}\n")
        return 0
    rows = time_search(sizes, args.bits, args.repeats, args.k, pipeline.threads, pipeline.config.seed)
    if args.real:
        rows += time_real_valued(sizes, args.bits, args.repeats, args.k, pipeline.config.seed)
    out.write(format_rows(rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('-c', '--config', help='key = value config file')
    common.add_argument('--set', action='append', default=[], metavar='KEY=VALUE',
                        help='Override one config value (repeatable)')
    common.add_argument('--seed', type=int, help='Random seed (overrides config)')
    common.add_argument('--threads', type=int,
                        help=f'Worker threads (default: POSH_THREADS or {DEFAULT_THREADS})')
    common.add_argument('--log-level', default=LOG_LEVEL, help='Logging level')
    common.add_argument('--log-file', default=LOG_FILE, help='Log file ("" disables)')

    parser = argparse.ArgumentParser(prog='posh', description='Protein structure hashing engine')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('fetch', parents=[common], help='Download PDB files')
    p.add_argument('ids', nargs='+', help='PDB ids or @file with ids')
    p.add_argument('-o', '--output', required=True, help='Target directory')
    p.set_defaults(handler=cmd_fetch)

    p = sub.add_parser('ingest', parents=[common], help='Parse PDB files into a chain file')
    p.add_argument('pdb_dir')
    p.add_argument('-o', '--output', required=True)
    p.add_argument('--chain', help='Chain id to select (default: first)')
    p.set_defaults(handler=cmd_ingest)

    p = sub.add_parser('featurize', parents=[common], help='Build kNN graphs')
    p.add_argument('chains')
    p.add_argument('-o', '--output', required=True)
    p.set_defaults(handler=cmd_featurize)

    p = sub.add_parser('tmscore', parents=[common], help='Pairwise TM-scores or window plans')
    p.add_argument('chains')
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument('--pairs', nargs='?', const='', default=None,
                      help='Score pairs listed in a file (default: all pairs)')
    mode.add_argument('--fragments', action='store_true',
                      help='Minimum substructure length per chain')
    p.add_argument('-o', '--output', help='Also write the rows to this file')
    p.set_defaults(handler=cmd_tmscore)

    p = sub.add_parser('train', parents=[common], help='Train an encoder')
    p.add_argument('graphs')
    p.add_argument('similarity')
    p.add_argument('-o', '--output', required=True, help='Checkpoint path')
    p.add_argument('--chains', help='Chain file enabling substructure sampling')
    p.add_argument('--metrics', help='Loss log TSV')
    p.add_argument('--no-progress', action='store_true')
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser('encode', parents=[common], help='Hash graphs with a trained encoder')
    p.add_argument('checkpoint')
    p.add_argument('graphs')
    p.add_argument('-o', '--output', required=True)
    p.set_defaults(handler=cmd_encode)

    p = sub.add_parser('index', parents=[common], help='Build an index from a codes file')
    p.add_argument('codes')
    p.add_argument('-o', '--output', required=True)
    p.set_defaults(handler=cmd_index)

    p = sub.add_parser('search', parents=[common], help='Top-k search')
    p.add_argument('index')
    p.add_argument('--query', required=True, help='Codes file or PDB structure')
    p.add_argument('-k', type=int, default=10)
    p.add_argument('--model', help='Checkpoint for structure queries')
    p.set_defaults(handler=cmd_search)

    p = sub.add_parser('eval', parents=[common], help='Retrieval metrics')
    p.add_argument('index')
    p.add_argument('queries', help='Codes file of the queries')
    p.add_argument('similarity')
    p.add_argument('-o', '--output', help='Also write the report here')
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser('synth', parents=[common], help='Generate a synthetic dataset')
    p.add_argument('spec', nargs='?', help='key = value family spec file')
    p.add_argument('-o', '--output', required=True)
    p.add_argument('--families', type=int)
    p.add_argument('--members', type=int)
    p.add_argument('--min-length', type=int)
    p.add_argument('--max-length', type=int)
    p.add_argument('--sigma', type=float)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser('benchmark', parents=[common], help='Search time and memory')
    p.add_argument('--sizes', default='100000,1000000')
    p.add_argument('-d', '--bits', type=int, default=400)
    p.add_argument('--repeats', type=int, default=3)
    p.add_argument('-k', type=int, default=10)
    p.add_argument('--real', action='store_true', help='Include the float32 cosine baseline')
    p.add_argument('--memory', action='store_true', help='Print storage sizes instead of timings')
    p.set_defaults(handler=cmd_benchmark)
    return parser


def run(argv: Optional[Sequence[str]] = None, out=None) -> int:
    """
    Parse arguments and run one subcommand.

    Returns:
        0 on success, 1 on a failed step, 2 on a usage error
    """
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    setup_logging(args.log_level, args.log_file)
    try:
        config = load_config(args.config)
        if args.set:
            config = parse_config_text('\n'.join(args.set), config)
        config = config.updated(seed=args.seed).validate()
        threads = args.threads if args.threads is not None else DEFAULT_THREADS
        if threads < 1:
            raise UsageError("--threads must be >= 1")
        logger.debug(f"Running {args.command} with config {config.as_dict()}")
        return args.handler(PoshPipeline(config, threads), args, out)
    except UsageError as e:
        logger.error(f"{args.command}: {e}")
        return 2
    except (PoshError, OSError, ValueError) as e:
        logger.error(f"{args.command}: {e}")
        return 1


def main():
    sys.exit(run())
