"""Problem-file manager.

A problem is an INI document with the sections ``[problem]``, ``[solver]``,
``[refine]``, ``[graph]`` and ``[output]``::

    [problem]
    mode = single_sink
    points = 0.25,0.3333; 0.75,0.6667
    alpha = 0

* **Collect, then raise** — every violation in the file (unknown keys,
  points outside the unit square, alpha out of [0, 1] ...) is gathered and
  reported in one :class:`~app.errors.ConfigError`.
* **Presets** — ``preset = pentagon(0.5)`` replaces explicit points; giving
  both is a violation.
* **Round trip** — :func:`dump_config` renders a normalized document such
  that ``parse_config(dump_config(cfg)) == cfg``.
* **Atomic echo** — the input text is copied to the output directory
  byte-for-byte.
"""
from __future__ import annotations

import configparser
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from app._fileutil import PathLike, atomic_write_text
from app.errors import ConfigError, InvalidInputError
from app.graph_steiner import GRAPH_METHODS, SCATTER_MODES, GraphOptions
from app.presets import expand_preset
from app.refine import RefinePolicy
from app.solver import PATHS, SolverOptions, StoppingRule

log = logging.getLogger(__name__)

MODES = ("single_sink", "who_goes_where", "free_pairing", "graph_stp")
FLAT_MODES = MODES[:3]

Point = Tuple[float, float]
Pair = Tuple[Point, Point]

# section -> allowed keys
SCHEMA: Dict[str, Tuple[str, ...]] = {
    "problem": ("name", "mode", "preset", "points", "sources", "sinks",
                "alpha", "seed"),
    "solver": ("path", "gamma", "max_iters", "eps_feas", "eps_rel", "window",
               "dykstra_sweeps", "workers", "permutation_cap"),
    "refine": ("grid", "rounds", "used_threshold", "unused_threshold",
               "selection_radius", "adaptive", "seed_from_phi", "seed_iters"),
    "graph": ("method", "k_points", "neighbors", "scatter", "support_floor"),
    "output": ("render", "snapshots"),
}

# CLI flag -> (section, key)
OVERRIDES: Dict[str, Tuple[str, str]] = {
    "seed": ("problem", "seed"),
    "alpha": ("problem", "alpha"),
    "rounds": ("refine", "rounds"),
    "gamma": ("solver", "gamma"),
    "max_iters": ("solver", "max_iters"),
    "workers": ("solver", "workers"),
}


@dataclass(frozen=True)
class OutputOptions:
    render: bool = True
    snapshots: bool = True


@dataclass(frozen=True)
class TerminalConfig:
    mode: str
    alpha: float
    points: Tuple[Point, ...] = ()
    sources: Tuple[Point, ...] = ()
    sinks: Tuple[Point, ...] = ()
    preset: Optional[str] = None
    seed: int = 0
    name: str = "run"
    solver: SolverOptions = field(default_factory=SolverOptions)
    refine: RefinePolicy = field(default_factory=RefinePolicy)
    graph: GraphOptions = field(default_factory=GraphOptions)
    output: OutputOptions = field(default_factory=OutputOptions)

    def pairs(self) -> List[Pair]:
        """Source/sink couples, one per field.  A single-sink problem sends
        every terminal but the last to the last; free pairing starts from
        the listed order."""
        if self.mode in ("single_sink", "graph_stp"):
            sink = self.points[-1]
            return [(p, sink) for p in self.points[:-1]]
        return list(zip(self.sources, self.sinks))

    def terminal_records(self) -> List[Tuple[float, float, str]]:
        if self.mode in ("single_sink", "graph_stp"):
            out = [(x, y, "source") for x, y in self.points[:-1]]
            return out + [(*self.points[-1], "sink")]
        seen = []
        for x, y in self.sinks:
            if (x, y) not in seen:
                seen.append((x, y))
        return [(x, y, "source") for x, y in self.sources] + [(x, y, "sink") for x, y in seen]


# ---------------------------------------------------------------------------
# Validation helpers (None on invalid)
# ---------------------------------------------------------------------------
def _valid_float(text, lo: float = -math.inf, hi: float = math.inf,
                 open_lo: bool = False) -> Optional[float]:
    try:
        x = float(text)
    except (TypeError, ValueError):
        return None
    if not math.isfinite(x) or x > hi or x < lo or (open_lo and x == lo):
        return None
    return x


def _valid_int(text, lo: int = 0) -> Optional[int]:
    try:
        x = int(str(text).strip())
    except (TypeError, ValueError):
        return None
    return x if x >= lo else None


def _valid_bool(text) -> Optional[bool]:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    return None


def _valid_point(text: str) -> Optional[Point]:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 2:
        return None
    x, y = _valid_float(parts[0]), _valid_float(parts[1])
    if x is None or y is None:
        return None
    return (x, y)


def _inside(p: Point) -> bool:
    return 0.0 < p[0] < 1.0 and 0.0 < p[1] < 1.0


def _point_list(text: str, key: str, errors: List[str]) -> Tuple[Point, ...]:
    out = []
    for k, chunk in enumerate(c for c in text.split(";") if c.strip()):
        p = _valid_point(chunk)
        if p is None:
            errors.append(f"[problem] {key}: entry {k + 1} {chunk.strip()!r} is not 'x,y'")
        elif not _inside(p):
            errors.append(f"[problem] {key}: point {p} is outside the open unit square")
        else:
            out.append(p)
    return tuple(out)


def format_points(points: Sequence[Point]) -> str:
    return "; ".join(f"{float(x)!r},{float(y)!r}" for x, y in points)


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------
class _Reader:
    """Typed access to one section that records violations instead of raising."""

    def __init__(self, parser: configparser.ConfigParser, section: str, errors: List[str]):
        self.values = dict(parser[section]) if parser.has_section(section) else {}
        self.section = section
        self.errors = errors

    def has(self, key: str) -> bool:
        return key in self.values

    def raw(self, key: str, default: Optional[str] = None) -> Optional[str]:
        return self.values.get(key, default)

    def _get(self, key, default, check, what):
        if key not in self.values:
            return default
        value = check(self.values[key])
        if value is None:
            self.errors.append(f"[{self.section}] {key} = {self.values[key]!r}: {what}")
            return default
        return value

    def get_float(self, key, default, lo=-math.inf, hi=math.inf, open_lo=False, what=None):
        return self._get(key, default, lambda t: _valid_float(t, lo, hi, open_lo),
                         what or f"must be a number in {'(' if open_lo else '['}{lo}, {hi}]")

    def get_int(self, key, default, lo=0):
        return self._get(key, default, lambda t: _valid_int(t, lo), f"must be an integer >= {lo}")

    def get_bool(self, key, default):
        return self._get(key, default, _valid_bool, "must be true or false")

    def get_choice(self, key, default, choices):
        return self._get(key, default, lambda t: t.strip() if t.strip() in choices else None,
                         f"must be one of {', '.join(choices)}")


def _build(errors: List[str], ctor, **kwargs):
    try:
        return ctor(**kwargs)
    except InvalidInputError as exc:
        errors.append(str(exc))
        return ctor()


def _read_problem(r: _Reader, errors: List[str]) -> dict:
    alpha = r.get_float("alpha", None, 0.0, 1.0, what="alpha must lie in [0, 1]")
    if not r.has("alpha"):
        errors.append("[problem] alpha is required (a number in [0, 1])")
    seed = r.get_int("seed", 0)
    mode = r.get_choice("mode", None, MODES)
    out = dict(alpha=alpha, seed=seed, name=(r.raw("name") or "run").strip() or "run")

    explicit = [k for k in ("points", "sources", "sinks") if r.has(k)]
    preset = (r.raw("preset") or "").strip() or None
    if preset:
        if explicit:
            errors.append(f"[problem] preset and {', '.join(explicit)} are mutually exclusive")
            return {**out, "mode": mode}
        try:
            layout = expand_preset(preset, seed)
        except InvalidInputError as exc:
            errors.append(f"[problem] preset: {exc}")
            return {**out, "mode": mode}
        if mode is not None and mode != layout.mode:
            errors.append(f"[problem] mode {mode} does not match preset {preset} ({layout.mode})")
        return {**out, "mode": layout.mode, "preset": preset, "points": layout.points,
                "sources": layout.sources, "sinks": layout.sinks}

    if r.has("mode") and mode is None:
        return out
    if mode is None:
        errors.append("[problem] mode is required unless a preset is given")
        return out
    points = _point_list(r.raw("points", ""), "points", errors)
    sources = _point_list(r.raw("sources", ""), "sources", errors)
    sinks = _point_list(r.raw("sinks", ""), "sinks", errors)
    if mode in ("single_sink", "graph_stp"):
        if sources or sinks:
            errors.append(f"[problem] {mode} takes 'points' (sink last), not sources/sinks")
        if len(points) < 2 and r.has("points"):
            errors.append(f"[problem] {mode} needs at least 2 points, got {len(points)}")
        elif not r.has("points"):
            errors.append(f"[problem] {mode} needs 'points'")
        if len(set(points)) != len(points):
            errors.append("[problem] points must be distinct")
    else:
        if points:
            errors.append(f"[problem] {mode} takes sources and sinks, not 'points'")
        if not sources or len(sources) != len(sinks):
            errors.append(f"[problem] {mode} needs equal, nonzero source and sink "
                          f"counts, got {len(sources)} and {len(sinks)}")
    return {**out, "mode": mode, "points": points, "sources": sources, "sinks": sinks}


def _read_solver(r: _Reader, errors: List[str]) -> Tuple[SolverOptions, StoppingRule]:
    d, ds = SolverOptions(), StoppingRule()
    stop = _build(errors, StoppingRule,
                  max_iters=r.get_int("max_iters", ds.max_iters, 1),
                  eps_feas=r.get_float("eps_feas", ds.eps_feas, 0.0, open_lo=True),
                  eps_rel=r.get_float("eps_rel", ds.eps_rel, 0.0, open_lo=True),
                  window=r.get_int("window", ds.window, 1),
                  divergence_limit=ds.divergence_limit,
                  alarm_window=ds.alarm_window)
    opts = _build(errors, SolverOptions,
                  path=r.get_choice("path", d.path, PATHS),
                  gamma=r.get_float("gamma", d.gamma, 0.0, 2.0),
                  stop=stop,
                  dykstra_sweeps=r.get_int("dykstra_sweeps", d.dykstra_sweeps, 1),
                  workers=r.get_int("workers", d.workers, 1),
                  permutation_cap=r.get_int("permutation_cap", d.permutation_cap, 1))
    return opts, stop


def _read_refine(r: _Reader, errors: List[str]) -> RefinePolicy:
    d = RefinePolicy()
    return _build(errors, RefinePolicy,
                  used_threshold=r.get_float("used_threshold", d.used_threshold, 0.0, 1.0, True),
                  unused_threshold=r.get_float("unused_threshold", d.unused_threshold, 0.0,
                                           open_lo=True),
                  max_rounds=r.get_int("rounds", d.max_rounds, 1),
                  selection_radius=r.get_int("selection_radius", d.selection_radius, 0),
                  initial_size=r.get_int("grid", d.initial_size, 2),
                  adaptive=r.get_bool("adaptive", d.adaptive),
                  seed_from_phi=r.get_bool("seed_from_phi", d.seed_from_phi),
                  seed_iters=r.get_int("seed_iters", d.seed_iters, 1))


def _read_graph(r: _Reader, errors: List[str], solver: SolverOptions) -> GraphOptions:
    d = GraphOptions()
    return _build(errors, GraphOptions,
                  method=r.get_choice("method", d.method, GRAPH_METHODS),
                  gamma=solver.gamma,
                  stop=solver.stop,
                  support_floor=r.get_float("support_floor", d.support_floor, 0.0),
                  scatter=r.get_choice("scatter", d.scatter, SCATTER_MODES),
                  k_points=r.get_int("k_points", d.k_points, 0),
                  neighbors=r.get_int("neighbors", d.neighbors, 1))


def _parser_from(text: str, errors: List[str]) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([f"malformed problem file: {exc}"])
    for section in parser.sections():
        if section not in SCHEMA:
            errors.append(f"unknown section [{section}]")
            continue
        for key in parser[section]:
            if key not in SCHEMA[section]:
                errors.append(f"[{section}] unknown key {key!r}")
    return parser


def parse_config(text: str, overrides: Optional[Dict[str, object]] = None) -> TerminalConfig:
    """Validate a problem file.  ``overrides`` maps CLI flag names
    (see :data:`OVERRIDES`) to values that replace the file's."""
    errors: List[str] = []
    parser = _parser_from(text, errors)
    for flag, value in (overrides or {}).items():
        if value is None:
            continue
        if flag not in OVERRIDES:
            raise ConfigError([f"unknown override {flag!r}"])
        section, key = OVERRIDES[flag]
        if not parser.has_section(section):
            parser.add_section(section)
        parser[section][key] = str(value)

    problem = _read_problem(_Reader(parser, "problem", errors), errors)
    solver, _ = _read_solver(_Reader(parser, "solver", errors), errors)
    refine = _read_refine(_Reader(parser, "refine", errors), errors)
    graph = _read_graph(_Reader(parser, "graph", errors), errors, solver)
    o = _Reader(parser, "output", errors)
    output = OutputOptions(render=o.get_bool("render", True),
                           snapshots=o.get_bool("snapshots", True))

    if errors:
        raise ConfigError(errors)
    return TerminalConfig(solver=solver, refine=refine, graph=graph,
                          output=output, **problem)


def load_config(path: PathLike, overrides: Optional[Dict[str, object]] = None
                ) -> Tuple[TerminalConfig, str]:
    """Read and validate a problem file; returns the config and the raw text."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError([f"cannot read {path}: {exc}"])
    return parse_config(text, overrides), text


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------
def _bool(x: bool) -> str:
    return "true" if x else "false"


def dump_config(cfg: TerminalConfig) -> str:
    """Normalized problem file.  Floats use ``repr`` so they read back
    exactly; a preset is written instead of the points it expands to."""
    s, st, r, g = cfg.solver, cfg.solver.stop, cfg.refine, cfg.graph
    problem = [("name", cfg.name), ("mode", cfg.mode), ("alpha", repr(cfg.alpha)),
               ("seed", str(cfg.seed))]
    if cfg.preset:
        problem.append(("preset", cfg.preset))
    elif cfg.mode in ("single_sink", "graph_stp"):
        problem.append(("points", format_points(cfg.points)))
    else:
        problem += [("sources", format_points(cfg.sources)),
                    ("sinks", format_points(cfg.sinks))]
    sections = {
        "problem": problem,
        "solver": [("path", s.path), ("gamma", repr(s.gamma)),
                   ("max_iters", str(st.max_iters)), ("eps_feas", repr(st.eps_feas)),
                   ("eps_rel", repr(st.eps_rel)), ("window", str(st.window)),
                   ("dykstra_sweeps", str(s.dykstra_sweeps)), ("workers", str(s.workers)),
                   ("permutation_cap", str(s.permutation_cap))],
        "refine": [("grid", str(r.initial_size)), ("rounds", str(r.max_rounds)),
                   ("used_threshold", repr(r.used_threshold)),
                   ("unused_threshold", repr(r.unused_threshold)),
                   ("selection_radius", str(r.selection_radius)),
                   ("adaptive", _bool(r.adaptive)),
                   ("seed_from_phi", _bool(r.seed_from_phi)),
                   ("seed_iters", str(r.seed_iters))],
        "graph": [("method", g.method), ("k_points", str(g.k_points)),
                  ("neighbors", str(g.neighbors)), ("scatter", g.scatter),
                  ("support_floor", repr(g.support_floor))],
        "output": [("render", _bool(cfg.output.render)),
                   ("snapshots", _bool(cfg.output.snapshots))],
    }
    blocks = []
    for name, items in sections.items():
        blocks.append(f"[{name}]\n" + "".join(f"{k} = {v}\n" for k, v in items))
    return "\n".join(blocks)


def write_config_echo(out_dir: PathLike, text: str, cfg: Optional[TerminalConfig] = None
                      ) -> List[Path]:
    """``config_echo.ini`` is the input verbatim; ``config_effective.ini``
    the normalized config after overrides."""
    out = Path(out_dir)
    written = [atomic_write_text(out / "config_echo.ini", text)]
    if cfg is not None:
        written.append(atomic_write_text(out / "config_effective.ini", dump_config(cfg)))
    return written
