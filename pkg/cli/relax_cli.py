#!/usr/bin/env python3
"""
Relaxed Steiner CLI
Solve, batch and render relaxed Steiner tree / irrigation problems
"""
import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

# Add parent directory to path to import app modules
# Use realpath to properly resolve symlinks
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.realpath(__file__))))

from app.config_manager import load_config
from app.errors import ConfigError, RelaxError
from app.graph_io import read_graph
from app.graph_steiner import GRAPH_METHODS, GraphOptions
from app.render import render_file
from app.runner import BatchRunner, run, run_graph, threads_from_env
from app.solver import StoppingRule, SolveStatus

EXIT_MAX_ITERS = 5


# ANSI color codes
class Colors:
    HEADER = '\033[95m'
    CYAN = '\033[96m'
    GREEN = '\033[92m'
    YELLOW = '\033[93m'
    RED = '\033[91m'
    BOLD = '\033[1m'
    END = '\033[0m'


def color_text(text, color):
    """Apply color to text"""
    return f"{color}{text}{Colors.END}"


def _add_overrides(parser):
    parser.add_argument('--seed', type=int, default=None, help='Random seed')
    parser.add_argument('--rounds', type=int, default=None, help='Refinement rounds')
    parser.add_argument('--alpha', type=float, default=None, help='Exponent in [0, 1]')
    parser.add_argument('--gamma', type=float, default=None, help='Step-size exponent')
    parser.add_argument('--max-iters', type=int, default=None, help='Iteration budget')


def _overrides(args):
    out = {'seed': args.seed, 'rounds': args.rounds, 'alpha': args.alpha,
           'gamma': args.gamma, 'max_iters': args.max_iters}
    if 'RELAX_THREADS' in os.environ:
        out['workers'] = threads_from_env()
    return out


def _report_error(exc):
    print(color_text(f"error ({type(exc).__name__}, exit {exc.exit_code}):", Colors.RED))
    if isinstance(exc, ConfigError):
        for v in exc.violations:
            print(color_text(f"  - {v}", Colors.RED))
    else:
        print(color_text(f"  {exc}", Colors.RED))
    return exc.exit_code


def _print_result(res):
    color = Colors.GREEN if res.status == SolveStatus.CONVERGED else Colors.YELLOW
    print(color_text(f"energy    {res.energy:.9g}", Colors.BOLD))
    print(color_text(f"status    {res.status.value}", color))
    if len(res.round_energies) > 1:
        print("rounds    " + "  ".join(f"{e:.6g}" for e in res.round_energies))
    if res.pairing is not None:
        print(f"pairing   {','.join(map(str, res.pairing))}")
    if res.exact_length is not None:
        print(f"exact     {res.exact_length:.9g}")
    if res.calibration is not None:
        cert = res.calibration
        print(f"certified {cert.certified} (curl {cert.curl_residual:.2e}, "
              f"gap {cert.gap:.2e})")
    print(f"wall      {res.wall_time:.1f}s")
    for key, path in sorted(res.artifacts.items()):
        print(color_text(f"  {key:<17}", Colors.CYAN) + str(path))


# ============================================================================
# Subcommands
# ============================================================================

def cmd_solve(argv):
    """`relax-cli solve --config FILE [--out-dir DIR] [overrides]`"""
    parser = argparse.ArgumentParser(prog='relax-cli solve')
    parser.add_argument('--config', required=True, help='Problem file (INI)')
    parser.add_argument('--out-dir', default=None,
                        help='Output directory (default: out/<name>)')
    _add_overrides(parser)
    args = parser.parse_args(argv)
    try:
        cfg, text = load_config(args.config, _overrides(args))
        res = run(cfg, args.out_dir or os.path.join('out', cfg.name), text)
    except RelaxError as exc:
        return _report_error(exc)
    _print_result(res)
    return res.exit_code


def cmd_graph(argv):
    """`relax-cli graph (--config FILE | --graph FILE) [--out-dir DIR]`"""
    parser = argparse.ArgumentParser(prog='relax-cli graph')
    src = parser.add_mutually_exclusive_group(required=True)
    src.add_argument('--config', help='Problem file with mode = graph_stp')
    src.add_argument('--graph', help='Edge-list graph file (sink is the last terminal)')
    parser.add_argument('--out-dir', default=None)
    parser.add_argument('--method', choices=GRAPH_METHODS, default=None)
    _add_overrides(parser)
    args = parser.parse_args(argv)
    try:
        if args.config:
            cfg, text = load_config(args.config, _overrides(args))
            if cfg.mode != 'graph_stp':
                raise ConfigError([f"graph needs mode graph_stp, not {cfg.mode}"])
            if args.method:
                cfg = replace(cfg, graph=replace(cfg.graph, method=args.method))
            res = run(cfg, args.out_dir or os.path.join('out', cfg.name), text)
            _print_result(res)
            return res.exit_code

        g = read_graph(args.graph)
        stop = StoppingRule(max_iters=args.max_iters or StoppingRule().max_iters)
        opts = GraphOptions(method=args.method or 'pd',
                            gamma=0.6 if args.gamma is None else args.gamma, stop=stop)
        out = args.out_dir or os.path.join('out', os.path.splitext(os.path.basename(args.graph))[0])
        os.makedirs(out, exist_ok=True)
        sol, exact = run_graph(g, opts, Path(out))
    except RelaxError as exc:
        return _report_error(exc)
    color = Colors.GREEN if sol.status == SolveStatus.CONVERGED else Colors.YELLOW
    print(color_text(f"energy    {sol.energy:.9g}", Colors.BOLD))
    print(color_text(f"status    {sol.status.value}", color))
    print(f"support   {len(sol.support)} edges")
    if exact is not None:
        print(f"exact     {exact:.9g}")
    return 0 if sol.status == SolveStatus.CONVERGED else EXIT_MAX_ITERS


def cmd_batch(argv):
    """`relax-cli batch CONFIG... --out-dir DIR [--workers N] [overrides]`"""
    parser = argparse.ArgumentParser(prog='relax-cli batch')
    parser.add_argument('configs', nargs='+', help='Problem files')
    parser.add_argument('--out-dir', default='out/batch')
    parser.add_argument('--workers', type=int, default=None,
                        help='Concurrent runs (default: $RELAX_THREADS or 1)')
    _add_overrides(parser)
    args = parser.parse_args(argv)
    overrides = _overrides(args)
    overrides.pop('workers', None)
    runner = BatchRunner(args.out_dir, args.workers or threads_from_env())
    entries = runner.run(args.configs, overrides)
    for e in entries:
        color = Colors.GREEN if e.exit_code == 0 else (
            Colors.YELLOW if e.exit_code == EXIT_MAX_ITERS else Colors.RED)
        energy = '-' if e.energy is None else f"{e.energy:.9g}"
        print(color_text(f"{e.name:<24} {e.status:<10} {energy:>14}", color)
              + (f"  {e.message}" if e.message else ''))
    status = runner.get_status()
    print(f"{status['completed']} run(s), {status['failed']} not converged or failed")
    return max((e.exit_code for e in entries), default=0)


def cmd_render(argv):
    """`relax-cli render DUMP [--output SVG]`"""
    parser = argparse.ArgumentParser(prog='relax-cli render')
    parser.add_argument('dump', help='Grid dump file')
    parser.add_argument('--output', default=None, help='SVG path (default: DUMP.svg)')
    args = parser.parse_args(argv)
    try:
        out = render_file(args.dump, args.output)
    except RelaxError as exc:
        return _report_error(exc)
    print(color_text(f"wrote {out}", Colors.GREEN))
    return 0


HANDLERS = {
    'solve':  cmd_solve,
    'graph':  cmd_graph,
    'batch':  cmd_batch,
    'render': cmd_render,
}


def print_usage():
    print(color_text("Relaxed Steiner CLI", Colors.BOLD))
    print("Usage:")
    print("  relax-cli solve  --config FILE [--out-dir DIR] [--seed N] [--rounds N]")
    print("                   [--alpha A] [--gamma G] [--max-iters N]")
    print("  relax-cli graph  (--config FILE | --graph FILE) [--method pd|lp]")
    print("  relax-cli batch  CONFIG... [--out-dir DIR] [--workers N]")
    print("  relax-cli render DUMP [--output SVG]")
    print("Environment: RELAX_THREADS (permutation / batch workers)")


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv or argv[0] in ('-h', '--help', 'help'):
        print_usage()
        return 0 if argv else 2
    sub = argv[0]
    if sub not in HANDLERS:
        print(color_text(f"unknown subcommand {sub!r}", Colors.RED))
        print_usage()
        return 2
    return HANDLERS[sub](argv[1:]) or 0


if __name__ == '__main__':
    sys.exit(main())
