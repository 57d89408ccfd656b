"""Static SVG renderings.

* Per-cell gray shading of the energy density (white = 0, black = max).
* Cell outlines when the grid has more than one level.
* Terminals: sources as red dots, sinks as blue squares.
* Graph solutions: every edge in light gray, the support on top with a
  width proportional to the flow norm.

The same input always gives the same bytes: the SVG hash salt is fixed
and the date metadata is dropped.
"""
from __future__ import annotations

import io
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
from matplotlib import rc_context
from matplotlib.collections import LineCollection, PolyCollection
from matplotlib.figure import Figure

from app._fileutil import PathLike, atomic_write_bytes
from app.dump import GridDump, read_dump
from app.graph_steiner import EmbeddedGraph, FlowSolution
from app.kalpha import flow_norm

FIGSIZE = (6.0, 6.0)
_RC = {"svg.hashsalt": "relaxed-steiner", "svg.fonttype": "none"}
_MARKERS = {"source": ("o", "#c0392b"), "sink": ("s", "#1f4e9c")}


def _canvas() -> Tuple[Figure, object]:
    fig = Figure(figsize=FIGSIZE)
    ax = fig.add_axes([0.02, 0.02, 0.96, 0.96])
    ax.set_xlim(0.0, 1.0)
    ax.set_ylim(0.0, 1.0)
    ax.set_aspect("equal")
    ax.set_xticks([])
    ax.set_yticks([])
    return fig, ax


def _terminals(ax, terminals: Sequence[Tuple[float, float, str]]) -> None:
    for role, (marker, color) in _MARKERS.items():
        pts = [(x, y) for x, y, r in terminals if r == role]
        if pts:
            xs, ys = zip(*pts)
            ax.scatter(xs, ys, s=36, marker=marker, c=color, zorder=5,
                       edgecolors="white", linewidths=0.6)
    other = [(x, y) for x, y, r in terminals if r not in _MARKERS]
    if other:
        xs, ys = zip(*other)
        ax.scatter(xs, ys, s=36, marker="o", c="black", zorder=5)


def _to_svg(fig: Figure) -> bytes:
    buf = io.BytesIO()
    with rc_context(_RC):
        fig.savefig(buf, format="svg", metadata={"Date": None})
    return buf.getvalue()


def render_dump(dump: GridDump, path: Optional[PathLike] = None) -> bytes:
    grid = dump.grid
    fig, ax = _canvas()
    density = np.clip(np.asarray(dump.density, dtype=float), 0.0, None)
    top = float(density.max(initial=0.0))
    multilevel = grid.n_cells > 0 and int(grid.level.max()) > 0
    if top > 0.0 or multilevel:
        x0, y0, h = grid.x0, grid.y0, grid.h
        verts = np.stack([np.stack([x0, y0], 1), np.stack([x0 + h, y0], 1),
                          np.stack([x0 + h, y0 + h], 1), np.stack([x0, y0 + h], 1)], 1)
        shade = 1.0 - density / top if top > 0.0 else np.ones(grid.n_cells)
        faces = np.repeat(shade[:, None], 3, axis=1)
        coll = PolyCollection(verts, facecolors=faces,
                              edgecolors="#b0b0b0" if multilevel else "none",
                              linewidths=0.2 if multilevel else 0.0)
        ax.add_collection(coll)
    _terminals(ax, dump.terminals)
    data = _to_svg(fig)
    if path is not None:
        atomic_write_bytes(path, data)
    return data


def render_graph(g: EmbeddedGraph, sol: Optional[FlowSolution] = None,
                 path: Optional[PathLike] = None) -> bytes:
    fig, ax = _canvas()
    segs = g.points[g.edges]
    ax.add_collection(LineCollection(segs, colors="#d5d5d5", linewidths=0.3, zorder=1))
    if sol is not None and sol.support:
        idx = list(sol.support)
        norms = flow_norm(sol.flows[idx])
        width = 0.6 + 2.4 * norms / max(float(norms.max()), 1e-12)
        ax.add_collection(LineCollection(segs[idx], colors="black",
                                         linewidths=width, zorder=3))
    terminals = [(*g.points[t], "source") for t in g.terminals[:-1]]
    terminals.append((*g.points[g.terminals[-1]], "sink"))
    _terminals(ax, terminals)
    data = _to_svg(fig)
    if path is not None:
        atomic_write_bytes(path, data)
    return data


def render_file(dump_path: PathLike, svg_path: Optional[PathLike] = None) -> Path:
    out = Path(svg_path) if svg_path else Path(dump_path).with_suffix(".svg")
    render_dump(read_dump(dump_path), out)
    return out
