"""Run orchestration.

:func:`run` takes a validated :class:`~app.config_manager.TerminalConfig`
and dispatches it:

* ``single_sink`` / ``who_goes_where`` -> :func:`~app.refine.refine_loop`
* ``free_pairing`` -> :func:`~app.solver.who_goes_where` on the initial
  grid, then the refinement loop on the best pairing
* ``graph_stp`` -> :func:`~app.graph_steiner.solve_graph`

Artifacts land in one output directory: ``config_echo.ini`` (input
verbatim), ``config_effective.ini``, ``energy_table.tsv``, dumps
(``round_XX.dump``, ``final.dump``), ``final.svg`` and ``progress.log``.

:class:`BatchRunner` runs many configs, each in its own directory, keeps
a bounded in-memory log and writes ``batch_summary.tsv``.
"""
from __future__ import annotations

import logging
import os
import threading
import time
from collections import deque
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from app._fileutil import PathLike, atomic_write_text, try_write_text
from app.calibration import CalibrationReport, check_calibration
from app.config_manager import TerminalConfig, dump_config, load_config, write_config_echo
from app.dump import read_dump, write_dump
from app.errors import RelaxError
from app.graph_io import write_flows, write_graph, write_lp
from app.graph_steiner import (EmbeddedGraph, exact_steiner_dp, solve_graph,
                               terminal_scatter_graph)
from app.grid2d import build_uniform
from app.presets import expand_preset
from app.refine import RefineResult, refine_loop
from app.render import render_dump, render_graph
from app.solver import SolveStatus, Solution, who_goes_where

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_MAX_ITERS = 5
# Exact Steiner trees are added to graph runs up to this many terminals.
RUN_EXACT_CAP = 6
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


@dataclass
class RunResult:
    energy: float
    round_energies: List[float]
    residuals: List[float]
    pairing: Optional[Tuple[int, ...]]
    artifacts: Dict[str, Path]
    config_echo: str
    wall_time: float
    status: SolveStatus
    calibration: Optional[CalibrationReport] = None
    exact_length: Optional[float] = None

    @property
    def exit_code(self) -> int:
        return EXIT_OK if self.status == SolveStatus.CONVERGED else EXIT_MAX_ITERS


def _num(x) -> str:
    return "" if x is None else f"{float(x):.9g}"


def _table(header: Sequence[str], rows: Sequence[Sequence[object]]) -> str:
    lines = ["\t".join(header)]
    lines += ["\t".join(str(c) for c in row) for row in rows]
    return "\n".join(lines) + "\n"


class _ProgressLog:
    """Mirror every record of the run into ``progress.log``."""

    def __init__(self, path: Path):
        self.handler = logging.FileHandler(path, mode="w", encoding="utf-8")
        self.handler.setLevel(logging.INFO)
        self.handler.setFormatter(logging.Formatter(LOG_FORMAT))
        self.root = logging.getLogger()
        self.level = self.root.level

    def __enter__(self):
        self.root.addHandler(self.handler)
        if self.root.level == logging.NOTSET or self.root.level > logging.INFO:
            self.root.setLevel(logging.INFO)
        return self

    def __exit__(self, *exc):
        self.root.removeHandler(self.handler)
        self.root.setLevel(self.level)
        self.handler.close()
        return False


# ---------------------------------------------------------------------------
# Flat problems
# ---------------------------------------------------------------------------
def _certify(sol: Solution) -> Optional[CalibrationReport]:
    phi = sol.report.phi
    if phi is None:
        return None
    cert = check_calibration(sol.grid, phi, sol.v, sol.alpha, sol.energy)
    log.info("calibration: membership=%.3e curl=%.3e pairing=%.9g gap=%.3e certified=%s",
             cert.membership_violation, cert.curl_residual, cert.pairing, cert.gap,
             cert.certified)
    return cert


def _finish_flat(cfg: TerminalConfig, out: Path, refined: RefineResult,
                 artifacts: Dict[str, Path]) -> Solution:
    sol = refined.solution
    terminals = cfg.terminal_records()
    artifacts["final_dump"] = write_dump(out / "final.dump", sol.grid, sol.cell_fields(),
                                         sol.report.density, terminals)
    if cfg.output.snapshots:
        for r in range(len(refined.rounds)):
            path = out / f"round_{r:02d}.dump"
            if path.exists():
                artifacts[f"round_{r:02d}"] = path
    if cfg.output.render:
        artifacts["final_svg"] = out / "final.svg"
        render_dump(read_dump(artifacts["final_dump"]), artifacts["final_svg"])
    return sol


def _round_rows(refined: RefineResult) -> List[List[object]]:
    return [["round", r.round, "", r.n_cells, r.n_blocks, _num(r.finest_h),
             _num(r.energy), r.status, r.iterations] for r in refined.rounds]


TABLE_HEADER = ("kind", "index", "pairing", "cells", "blocks", "h_min", "energy",
                "status", "iterations")


def _run_flat(cfg: TerminalConfig, out: Path, artifacts: Dict[str, Path]):
    refined = refine_loop(cfg.pairs(), cfg.alpha, cfg.refine, cfg.solver,
                          snapshot_dir=out if cfg.output.snapshots else None,
                          terminals=cfg.terminal_records())
    sol = _finish_flat(cfg, out, refined, artifacts)
    artifacts["energy_table"] = atomic_write_text(
        out / "energy_table.tsv", _table(TABLE_HEADER, _round_rows(refined)))
    return sol, refined, None


def _run_pairing(cfg: TerminalConfig, out: Path, artifacts: Dict[str, Path]):
    grid = build_uniform(cfg.refine.initial_size)
    found = who_goes_where(cfg.sources, cfg.sinks, cfg.alpha, grid, cfg.solver)
    rows = []
    for k, (perm, energy) in enumerate(found.energies.items()):
        rows.append(["permutation", k, ",".join(map(str, perm)), grid.n_cells, "",
                     _num(grid.h.min()), _num(energy), "", ""])
    best_pairs = [(cfg.sources[i], cfg.sinks[found.best[i]]) for i in range(len(cfg.sources))]
    log.info("PAIRING best=%s energy=%.9g", ",".join(map(str, found.best)),
             found.energies[found.best])
    refined = refine_loop(best_pairs, cfg.alpha, cfg.refine, cfg.solver,
                          snapshot_dir=out if cfg.output.snapshots else None,
                          terminals=cfg.terminal_records())
    sol = _finish_flat(cfg, out, refined, artifacts)
    artifacts["energy_table"] = atomic_write_text(
        out / "energy_table.tsv", _table(TABLE_HEADER, rows + _round_rows(refined)))
    return sol, refined, found.best


# ---------------------------------------------------------------------------
# Graphs
# ---------------------------------------------------------------------------
def graph_for(cfg: TerminalConfig) -> EmbeddedGraph:
    if cfg.preset:
        layout = expand_preset(cfg.preset, cfg.seed)
        if layout.graph is not None:
            return layout.graph
    g = cfg.graph
    return terminal_scatter_graph(cfg.points, g.k_points, g.neighbors, g.scatter, cfg.seed)


def run_graph(g: EmbeddedGraph, cfg_graph, out: Path, render: bool = True,
              artifacts: Optional[Dict[str, Path]] = None):
    artifacts = {} if artifacts is None else artifacts
    artifacts["graph"] = write_graph(out / "graph.txt", g)
    artifacts["lp"] = write_lp(out / "program.lp", g)
    sol = solve_graph(g, cfg_graph)
    artifacts["flows"] = write_flows(out / "flows.tsv", g, sol)
    rows = [[sol.method, _num(sol.energy), _num(sol.residual), sol.status.value,
             sol.iterations, len(sol.support)]]
    exact = None
    if len(g.terminals) <= RUN_EXACT_CAP:
        tree = exact_steiner_dp(g)
        exact = tree.length
        rows.append(["exact", _num(tree.length), "0", SolveStatus.CONVERGED.value, 0,
                     len(tree.edges)])
        log.info("exact Steiner tree length=%.9g relaxed=%.9g", tree.length, sol.energy)
    artifacts["energy_table"] = atomic_write_text(
        out / "energy_table.tsv",
        _table(("method", "energy", "residual", "status", "iterations", "support"), rows))
    if render:
        artifacts["graph_svg"] = out / "graph.svg"
        render_graph(g, sol, artifacts["graph_svg"])
    return sol, exact


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------
def run(cfg: TerminalConfig, out_dir: PathLike, config_text: Optional[str] = None) -> RunResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    echo = config_text if config_text is not None else dump_config(cfg)
    artifacts: Dict[str, Path] = {}
    t0 = time.monotonic()
    with _ProgressLog(out / "progress.log"):
        artifacts["config_echo"], artifacts["config_effective"] = \
            write_config_echo(out, echo, cfg)
        log.info("run %s: mode=%s alpha=%s path=%s out=%s", cfg.name, cfg.mode,
                 cfg.alpha, cfg.solver.path, out)
        if cfg.mode == "graph_stp":
            sol, exact = run_graph(graph_for(cfg), cfg.graph, out, cfg.output.render,
                                   artifacts)
            result = RunResult(sol.energy, [sol.energy],
                               [h.feasibility for h in sol.history] or [sol.residual],
                               None, artifacts, echo, 0.0, sol.status, exact_length=exact)
        else:
            runner = _run_pairing if cfg.mode == "free_pairing" else _run_flat
            sol, refined, pairing = runner(cfg, out, artifacts)
            result = RunResult(sol.energy, refined.energies,
                               [h.feasibility for h in sol.history],
                               pairing, artifacts, echo, 0.0, sol.status,
                               calibration=_certify(sol))
        result.wall_time = time.monotonic() - t0
        log.info("run %s finished: energy=%.9g status=%s wall=%.1fs", cfg.name,
                 result.energy, result.status.value, result.wall_time)
    artifacts["progress_log"] = out / "progress.log"
    return result


# ---------------------------------------------------------------------------
# Batch
# ---------------------------------------------------------------------------
@dataclass
class BatchEntry:
    name: str
    config: str
    out_dir: str
    exit_code: int = -1
    status: str = "pending"
    energy: Optional[float] = None
    message: str = ""
    wall_time: float = 0.0


def _batch_job(config_path: str, out_dir: str, overrides: Dict[str, object]) -> BatchEntry:
    name = Path(out_dir).name
    entry = BatchEntry(name, config_path, out_dir)
    t0 = time.monotonic()
    try:
        cfg, text = load_config(config_path, overrides)
        res = run(cfg, out_dir, text)
        entry.exit_code, entry.status, entry.energy = res.exit_code, res.status.value, res.energy
    except RelaxError as exc:
        entry.exit_code, entry.status, entry.message = exc.exit_code, "failed", str(exc)
    entry.wall_time = time.monotonic() - t0
    return entry


def _unique_dirs(out_root: Path, configs: Sequence[PathLike]) -> List[Path]:
    taken: Dict[str, int] = {}
    dirs = []
    for c in configs:
        stem = Path(c).stem
        k = taken.get(stem, 0)
        taken[stem] = k + 1
        dirs.append(out_root / (stem if k == 0 else f"{stem}_{k}"))
    return dirs


class BatchRunner:
    """Independent configs, one output directory each."""

    def __init__(self, out_root: PathLike, workers: int = 1):
        self.out_root = Path(out_root)
        self.workers = max(1, int(workers))
        self.logs: deque[dict] = deque(maxlen=200)
        self.lock = threading.Lock()
        self.entries: Dict[str, BatchEntry] = {}
        self.completed = 0
        self.failed = 0

    # ------------------------------------------------------------------
    def add_log(self, level, message):
        with self.lock:
            self.logs.append({
                'timestamp': datetime.now().strftime('%Y-%m-%d %H:%M:%S'),
                'level':     level,
                'message':   message,
            })
        getattr(log, str(level).lower(), log.info)(message)

    def get_logs(self, count=100):
        with self.lock:
            return list(self.logs)[-count:]

    def get_status(self):
        with self.lock:
            return {
                'out_root':  str(self.out_root),
                'workers':   self.workers,
                'total':     len(self.entries),
                'completed': self.completed,
                'failed':    self.failed,
            }

    # ------------------------------------------------------------------
    def _record(self, entry: BatchEntry) -> None:
        with self.lock:
            self.entries[entry.name] = entry
            self.completed += 1
            if entry.exit_code != EXIT_OK:
                self.failed += 1
        if entry.status == "failed":
            self.add_log("ERROR", f"{entry.name}: exit {entry.exit_code}: {entry.message}")
        else:
            self.add_log("INFO" if entry.exit_code == EXIT_OK else "WARNING",
                         f"{entry.name}: {entry.status} energy={_num(entry.energy)} "
                         f"({entry.wall_time:.1f}s)")

    def run(self, configs: Sequence[PathLike],
            overrides: Optional[Dict[str, object]] = None) -> List[BatchEntry]:
        # Inner permutation solves stay serial; concurrency lives at this level.
        overrides = {**(overrides or {}), "workers": 1}
        dirs = _unique_dirs(self.out_root, configs)
        jobs = [(str(c), str(d), overrides) for c, d in zip(configs, dirs)]
        with self.lock:
            for c, d in zip(configs, dirs):
                self.entries[d.name] = BatchEntry(d.name, str(c), str(d))
        self.add_log("INFO", f"batch of {len(jobs)} configs, {self.workers} worker(s)")

        if self.workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=self.workers) as pool:
                futures = [pool.submit(_batch_job, *job) for job in jobs]
                for fut in as_completed(futures):
                    self._record(fut.result())
        else:
            for job in jobs:
                self._record(_batch_job(*job))

        ordered = [self.entries[d.name] for d in dirs]
        self.write_summary(ordered)
        return ordered

    def write_summary(self, entries: Sequence[BatchEntry]) -> Tuple[bool, str]:
        rows = [[e.name, e.exit_code, e.status, _num(e.energy), f"{e.wall_time:.1f}",
                 e.out_dir, e.message.replace("\t", " ")] for e in entries]
        text = _table(("name", "exit_code", "status", "energy", "wall_s", "out_dir",
                       "message"), rows)
        return try_write_text(self.out_root / "batch_summary.tsv", text)


def threads_from_env(default: int = 1) -> int:
    try:
        return max(1, int(os.environ.get("RELAX_THREADS", default)))
    except ValueError:
        log.warning("ignoring non-integer RELAX_THREADS=%r", os.environ.get("RELAX_THREADS"))
        return default
