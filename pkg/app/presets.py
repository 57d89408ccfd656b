"""Named terminal layouts.

``preset = name`` or ``preset = name(arg)`` in a problem file expands to one
of the layouts below.  Flat layouts are centred on ``(0.5, 0.5)``; the sink
is always the last terminal.

=====================  ==============  ======================================
name                   mode            layout
=====================  ==============  ======================================
two_points             single_sink     (1/4, 1/3) -> (3/4, 2/3)
triangle(s)            single_sink     equilateral triangle, side s
square(s)              single_sink     square, side s
pentagon(l)            single_sink     regular pentagon, side l
hexagon(s)             single_sink     regular hexagon, side s
pentagon_center(l)     single_sink     pentagon vertices, sink at the centre
hexagon_center(s)      single_sink     hexagon vertices, sink at the centre
random(n)              single_sink     n seeded points in [0.1, 0.9]^2
irrigation4            single_sink     four sources, one sink
switch4                free_pairing    four sources, two sinks of mass two
graph3/graph4          graph_stp       triangle / square on a k-NN graph
graph13                graph_stp       13 seeded points on a k-NN graph
pentagon_graph(l)      graph_stp       union of the star and Steiner tree
=====================  ==============  ======================================
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from app.errors import InvalidInputError
from app.graph_steiner import EmbeddedGraph

Point = Tuple[float, float]

CENTER = (0.5, 0.5)
PENTAGON_BETA = 3.0 * math.pi / 10.0

_CALL_RE = re.compile(r"^\s*([a-z_][a-z0-9_]*)\s*(?:\(\s*([^()]*?)\s*\))?\s*$")


@dataclass(frozen=True)
class Layout:
    mode: str
    points: Tuple[Point, ...] = ()
    sources: Tuple[Point, ...] = ()
    sinks: Tuple[Point, ...] = ()
    graph: Optional[EmbeddedGraph] = None


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------
def regular_polygon(k: int, side: float, center: Point = CENTER,
                    phase: float = math.pi / 2) -> List[Point]:
    radius = side / (2.0 * math.sin(math.pi / k))
    return [(center[0] + radius * math.cos(phase + 2 * math.pi * t / k),
             center[1] + radius * math.sin(phase + 2 * math.pi * t / k))
            for t in range(k)]


def pentagon_steiner_length(side: float) -> float:
    """Length of a Steiner tree of the regular pentagon."""
    b = PENTAGON_BETA
    return side * math.tan(b) * (1 + math.sin(b) + math.sqrt(3) * math.cos(b))


def pentagon_star_energy(side: float) -> float:
    """Relaxed energy of the five-fold star (half its total length)."""
    return 1.25 * side * (math.sqrt(3) + math.tan(PENTAGON_BETA))


def _weiszfeld(points: np.ndarray, neighbors: List[List[int]], fixed: int,
               iters: int = 5000, tol: float = 1e-14) -> np.ndarray:
    """Relocate the free points (index >= ``fixed``) to geometric medians of
    their neighbours until nothing moves."""
    pts = points.copy()
    for _ in range(iters):
        moved = 0.0
        for k in range(fixed, len(pts)):
            nb = pts[neighbors[k]]
            d = np.maximum(np.linalg.norm(nb - pts[k], axis=1), 1e-15)
            new = (nb / d[:, None]).sum(axis=0) / (1.0 / d).sum()
            moved = max(moved, float(np.linalg.norm(new - pts[k])))
            pts[k] = new
        if moved < tol:
            break
    return pts


def pentagon_union_graph(side: float, center: Point = CENTER) -> EmbeddedGraph:
    """The star (five Y pieces joined at the centre) together with one
    Steiner tree of the pentagon, as a single graph.  Vertices: the five
    pentagon corners (terminals, sink last), the centre, five star branch
    points, three Steiner points."""
    corners = np.array(regular_polygon(5, side, center))
    c = np.array(center)
    star = []
    for k in range(5):
        mid = 0.5 * (corners[k] + corners[(k + 1) % 5])
        inward = (c - mid) / np.linalg.norm(c - mid)
        star.append(mid + inward * side / (2.0 * math.sqrt(3.0)))
    pts = [*corners, c, *star]
    edges = []
    for k in range(5):
        s = 6 + k
        edges += [(k, s), ((k + 1) % 5, s), (s, 5)]

    # Steiner topology: corner 0 joins the middle point, corners {1, 2} and
    # {3, 4} join the outer points.
    base = len(pts)
    seed = np.vstack([corners, [(corners[1] + corners[2]) / 2,
                                (corners[3] + corners[4]) / 2, c]])
    nbrs: List[List[int]] = [[] for _ in range(8)]
    nbrs[5] = [1, 2, 7]
    nbrs[6] = [3, 4, 7]
    nbrs[7] = [0, 5, 6]
    tree = _weiszfeld(seed, nbrs, fixed=5)
    pts += [tree[5], tree[6], tree[7]]
    a, b, m = base, base + 1, base + 2
    edges += [(1, a), (2, a), (3, b), (4, b), (0, m), (a, m), (b, m)]
    return EmbeddedGraph(np.array(pts), np.array(edges), (0, 1, 2, 3, 4))


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------
def _polygon(k: int, default: float, phase: float = math.pi / 2) -> Callable:
    def build(arg: Optional[float], seed: int) -> Layout:
        return Layout("single_sink", tuple(regular_polygon(k, arg or default, phase=phase)))
    return build


def _polygon_center(k: int, default: float) -> Callable:
    def build(arg: Optional[float], seed: int) -> Layout:
        return Layout("single_sink",
                      tuple(regular_polygon(k, arg or default)) + (CENTER,))
    return build


def _random(arg: Optional[float], seed: int) -> Layout:
    n = int(arg or 5)
    if n < 2 or n != (arg or 5):
        raise InvalidInputError("random(n) needs an integer n >= 2")
    rng = np.random.default_rng(seed)
    return Layout("single_sink", tuple(map(tuple, 0.1 + 0.8 * rng.random((n, 2)))))


def _two_points(arg, seed) -> Layout:
    return Layout("single_sink", ((0.25, 1.0 / 3.0), (0.75, 2.0 / 3.0)))


def _irrigation4(arg, seed) -> Layout:
    return Layout("single_sink", ((0.4, 0.9), (0.3, 0.65), (0.2, 0.4),
                                  (0.1, 0.15), (0.9, 0.27)))


def _switch4(arg, seed) -> Layout:
    t1, t2 = (0.9, 0.2), (0.9, 0.45)
    return Layout("free_pairing",
                  sources=((0.1, 0.55), (0.1, 0.4), (0.1, 0.25), (0.1, 0.1)),
                  sinks=(t1, t1, t2, t2))


def _graph_polygon(k: int, phase: float = math.pi / 2) -> Callable:
    def build(arg: Optional[float], seed: int) -> Layout:
        return Layout("graph_stp", tuple(regular_polygon(k, arg or 0.6, phase=phase)))
    return build


def _graph13(arg, seed) -> Layout:
    rng = np.random.default_rng(seed)
    return Layout("graph_stp", tuple(map(tuple, 0.05 + 0.9 * rng.random((13, 2)))))


def _pentagon_graph(arg, seed) -> Layout:
    g = pentagon_union_graph(arg or 0.5)
    return Layout("graph_stp", tuple(map(tuple, g.points[list(g.terminals)])), graph=g)


PRESETS: Dict[str, Callable[[Optional[float], int], Layout]] = {
    "two_points": _two_points,
    "triangle": _polygon(3, 0.5),
    "square": _polygon(4, 0.5, phase=math.pi / 4),
    "pentagon": _polygon(5, 0.5),
    "hexagon": _polygon(6, 0.4),
    "pentagon_center": _polygon_center(5, 0.5),
    "hexagon_center": _polygon_center(6, 0.4),
    "random": _random,
    "irrigation4": _irrigation4,
    "switch4": _switch4,
    "graph3": _graph_polygon(3),
    "graph4": _graph_polygon(4, phase=math.pi / 4),
    "graph13": _graph13,
    "pentagon_graph": _pentagon_graph,
}


def parse_preset(text: str) -> Tuple[str, Optional[float]]:
    """``'pentagon(0.5)'`` -> ``('pentagon', 0.5)``; ``None`` when no argument."""
    m = _CALL_RE.match(text or "")
    if not m or m.group(1) not in PRESETS:
        raise InvalidInputError(
            f"unknown preset {text!r}; choose from {', '.join(sorted(PRESETS))}")
    arg = m.group(2)
    if arg is None or arg == "":
        return m.group(1), None
    try:
        value = float(arg)
    except ValueError:
        raise InvalidInputError(f"preset argument {arg!r} is not a number")
    if not math.isfinite(value) or value <= 0:
        raise InvalidInputError(f"preset argument must be positive, got {arg}")
    return m.group(1), value


def expand_preset(text: str, seed: int = 0) -> Layout:
    name, arg = parse_preset(text)
    return PRESETS[name](arg, seed)
