"""Grid/field dump format.

Line-oriented text, one record per cell in grid order (base cells
row-major, Morton inside)::

    # relaxed-steiner grid dump
    # version 1
    # base 32
    # fields 2
    # cells 1024
    # terminal 0.25 0.3333333333 source
    # columns level i j h v1x v1y v2x v2y density
    0 0 0 0.03125 0 0 0 0 0

``v<k>x v<k>y`` is the face-averaged vector of field ``k`` in the cell,
``density`` the energy per unit area.  Numbers use ``%.12g``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np

from app._fileutil import PathLike, atomic_write_text
from app.errors import DumpFormatError, GridError
from app.grid2d import QuadGrid

MAGIC = "# relaxed-steiner grid dump"
VERSION = 1

Terminal = Tuple[float, float, str]


@dataclass
class GridDump:
    grid: QuadGrid
    fields: np.ndarray          # (n_cells, 2, n_fields)
    density: np.ndarray         # (n_cells,)
    terminals: List[Terminal]

    @property
    def n_fields(self) -> int:
        return self.fields.shape[2]


def _num(x: float) -> str:
    return f"{float(x) + 0.0:.12g}"


def format_dump(grid: QuadGrid, fields: np.ndarray, density: np.ndarray,
                terminals: Sequence[Terminal] = ()) -> str:
    fields = np.asarray(fields, dtype=float)
    density = np.asarray(density, dtype=float)
    if fields.ndim != 3 or fields.shape[:2] != (grid.n_cells, 2):
        raise GridError(f"field array {fields.shape} does not match the grid")
    if density.shape != (grid.n_cells,):
        raise GridError(f"density array {density.shape} does not match the grid")
    n = fields.shape[2]
    cols = ["level", "i", "j", "h"]
    for k in range(1, n + 1):
        cols += [f"v{k}x", f"v{k}y"]
    cols.append("density")
    lines = [MAGIC, f"# version {VERSION}", f"# base {grid.base}",
             f"# fields {n}", f"# cells {grid.n_cells}"]
    for x, y, role in terminals:
        lines.append(f"# terminal {_num(x)} {_num(y)} {role}")
    lines.append("# columns " + " ".join(cols))
    for c, (level, i, j) in enumerate(grid.cells):
        vals = [_num(x) for x in fields[c].T.ravel()]
        lines.append(" ".join([str(level), str(i), str(j), _num(grid.h[c])]
                              + vals + [_num(density[c])]))
    return "\n".join(lines) + "\n"


def write_dump(path: PathLike, grid: QuadGrid, fields: np.ndarray,
               density: np.ndarray, terminals: Sequence[Terminal] = ()) -> Path:
    return atomic_write_text(path, format_dump(grid, fields, density, terminals))


def parse_dump(text: str) -> GridDump:
    lines = text.splitlines()
    if not lines or lines[0].strip() != MAGIC:
        raise DumpFormatError("not a grid dump (missing header)")
    header = {}
    terminals: List[Terminal] = []
    body = []
    for no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if not parts:
                continue
            if parts[0] == "terminal":
                if len(parts) != 4:
                    raise DumpFormatError(f"line {no}: malformed terminal record")
                try:
                    terminals.append((float(parts[1]), float(parts[2]), parts[3]))
                except ValueError:
                    raise DumpFormatError(f"line {no}: malformed terminal record")
            else:
                header[parts[0]] = parts[1:]
            continue
        body.append((no, line.split()))

    try:
        version = int(header["version"][0])
        base = int(header["base"][0])
        n = int(header["fields"][0])
        n_cells = int(header["cells"][0])
    except (KeyError, IndexError, ValueError):
        raise DumpFormatError("header lacks version/base/fields/cells")
    if version != VERSION:
        raise DumpFormatError(f"unsupported dump version {version}")
    if len(body) != n_cells:
        raise DumpFormatError(f"expected {n_cells} cell records, found {len(body)}")

    width = 4 + 2 * n + 1
    addrs, vals = [], np.zeros((n_cells, width - 4))
    for row, (no, parts) in enumerate(body):
        if len(parts) != width:
            raise DumpFormatError(f"line {no}: expected {width} columns, got {len(parts)}")
        try:
            addrs.append((int(parts[0]), int(parts[1]), int(parts[2])))
            vals[row] = [float(x) for x in parts[4:]]
        except ValueError:
            raise DumpFormatError(f"line {no}: non-numeric entry")
    try:
        grid = QuadGrid(base, addrs)
    except GridError as exc:
        raise DumpFormatError(f"cells do not form a valid grid: {exc}")
    order = [grid.index[a] for a in addrs]
    fields = np.zeros((n_cells, 2, n))
    density = np.zeros(n_cells)
    fields[order] = vals[:, :2 * n].reshape(n_cells, n, 2).transpose(0, 2, 1)
    density[order] = vals[:, -1]
    return GridDump(grid, fields, density, terminals)


def read_dump(path: Union[PathLike, str]) -> GridDump:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DumpFormatError(f"cannot read {path}: {exc}")
    return parse_dump(text)
