"""Graph files.

Edge-list format (``#`` starts a comment)::

    vertices 4
    0.1 0.1
    ...
    edges 5
    0 1
    ...
    terminals 0 2 3        # sink last

Also writes the linearized program in CPLEX LP text and per-edge flow
tables for a finished solve.
"""
from __future__ import annotations

from pathlib import Path
from typing import List

import numpy as np

from app._fileutil import PathLike, atomic_write_text
from app.errors import ConfigError
from app.graph_steiner import EmbeddedGraph, FlowSolution, lp_program


def _num(x: float) -> str:
    return f"{float(x) + 0.0:.12g}"


def format_graph(g: EmbeddedGraph) -> str:
    lines = ["# relaxed-steiner graph", f"vertices {g.n_vertices}"]
    lines += [f"{_num(x)} {_num(y)}" for x, y in g.points]
    lines.append(f"edges {g.n_edges}")
    lines += [f"{u} {v}" for u, v in g.edges.tolist()]
    lines.append("terminals " + " ".join(str(t) for t in g.terminals))
    return "\n".join(lines) + "\n"


def write_graph(path: PathLike, g: EmbeddedGraph) -> Path:
    return atomic_write_text(path, format_graph(g))


def parse_graph(text: str) -> EmbeddedGraph:
    rows: List[List[str]] = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            rows.append(line.split())
    errors = []
    try:
        k = 0
        if rows[k][0] != "vertices":
            raise ConfigError(["graph file must start with 'vertices <n>'"])
        nv = int(rows[k][1])
        pts = np.array([[float(a), float(b)] for a, b in rows[k + 1:k + 1 + nv]])
        k += 1 + nv
        if rows[k][0] != "edges":
            raise ConfigError(["expected 'edges <m>' after the vertex block"])
        ne = int(rows[k][1])
        edges = np.array([[int(a), int(b)] for a, b in rows[k + 1:k + 1 + ne]],
                         dtype=np.int64).reshape(-1, 2)
        k += 1 + ne
        if rows[k][0] != "terminals":
            raise ConfigError(["expected a 'terminals' line after the edge block"])
        terminals = tuple(int(t) for t in rows[k][1:])
    except (IndexError, ValueError) as exc:
        errors.append(f"malformed graph file: {exc}")
    if errors:
        raise ConfigError(errors)
    if len(pts) != nv or len(edges) != ne:
        raise ConfigError(["graph file is truncated"])
    return EmbeddedGraph(pts, edges, terminals)


def read_graph(path: PathLike) -> EmbeddedGraph:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError([f"cannot read graph file {path}: {exc}"])
    return parse_graph(text)


def _row_terms(matrix, row: int, names) -> str:
    start, end = matrix.indptr[row], matrix.indptr[row + 1]
    out = []
    for col, val in zip(matrix.indices[start:end], matrix.data[start:end]):
        sign = "-" if val < 0 else "+"
        out.append(f"{sign} {_num(abs(val))} {names[col]}")
    text = " ".join(out) or "0 " + names[0]
    return text[2:] if text.startswith("+ ") else text


def format_lp(g: EmbeddedGraph) -> str:
    prog = lp_program(g)
    names = prog.names
    lines = ["\\ relaxed Steiner tree program", "Minimize"]
    obj = []
    for col in np.nonzero(prog.c)[0]:
        val = prog.c[col]
        obj.append(f"{'-' if val < 0 else '+'} {_num(abs(val))} {names[col]}")
    text = " ".join(obj)
    lines.append(" obj: " + (text[2:] if text.startswith("+ ") else text))
    lines.append("Subject To")
    a_eq = prog.a_eq.tocsr()
    for r in range(a_eq.shape[0]):
        lines.append(f" {prog.row_names_eq[r]}: {_row_terms(a_eq, r, names)} = "
                     f"{_num(prog.b_eq[r])}")
    a_ub = prog.a_ub.tocsr()
    for r in range(a_ub.shape[0]):
        lines.append(f" {prog.row_names_ub[r]}: {_row_terms(a_ub, r, names)} <= "
                     f"{_num(prog.b_ub[r])}")
    lines.append("Bounds")
    for name, (lo, hi) in zip(names, prog.bounds):
        if lo is None and hi is None:
            lines.append(f" {name} free")
        elif lo is None:
            lines.append(f" -inf <= {name} <= {_num(hi)}")
        else:
            lines.append(f" {name} >= {_num(lo)}")
    lines.append("End")
    return "\n".join(lines) + "\n"


def write_lp(path: PathLike, g: EmbeddedGraph) -> Path:
    return atomic_write_text(path, format_lp(g))


def format_flows(g: EmbeddedGraph, sol: FlowSolution) -> str:
    head = ["edge", "u", "v", "length"] + [f"V{i + 1}" for i in range(g.n_fields)]
    lines = [f"# method={sol.method} status={sol.status.value} "
             f"energy={_num(sol.energy)} residual={_num(sol.residual)}",
             "\t".join(head)]
    for e, ((u, v), length) in enumerate(zip(g.edges.tolist(), g.lengths)):
        lines.append("\t".join([str(e), str(u), str(v), _num(length)]
                               + [_num(x) for x in sol.flows[e]]))
    return "\n".join(lines) + "\n"


def write_flows(path: PathLike, g: EmbeddedGraph, sol: FlowSolution) -> Path:
    return atomic_write_text(path, format_flows(g, sol))
