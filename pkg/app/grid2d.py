"""Staggered discretization on uniform and 2:1-balanced quadtree grids.

Cells are addressed ``(level, i, j)`` on top of an ``M0 x M0`` base grid, so
a level-``L`` cell has side ``1 / (M0 * 2**L)``.  A uniform ``M x M`` grid is
simply ``M0 = M`` with every cell at level 0.

* **Face DOFs** — one normal-flux value per interior face, keyed
  ``(orientation, level, line, pos)``.  A coarse face next to two finer
  cells is a single DOF shared by both hanging subfaces.  Boundary faces
  carry no DOF (zero flux).
* **Field layout** — a field stack ``v`` is field-major: entry
  ``i * n_faces + f`` is face ``f`` of field ``i``.
* **Cell layout** — per-cell 2-vectors are stacked ``(cell, direction,
  field)`` and flattened row-major, which is the row order of the pairing
  and coupling operators.
* **Ordering** — cells are sorted row-major over base cells and Morton
  (x bit lowest) inside each base cell; DOFs are numbered in first-visit
  order over that cell order.
"""
from __future__ import annotations

import logging
from collections import defaultdict, deque
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from app.errors import GeometryError, GridError, InvalidInputError
from app.kalpha import popcount, subset_table

log = logging.getLogger(__name__)

CellAddr = Tuple[int, int, int]
FaceKey = Tuple[int, int, int, int]
Point = Tuple[float, float]

LEFT, RIGHT, BOTTOM, TOP = 0, 1, 2, 3
VERTICAL, HORIZONTAL = 0, 1

_SIDE_SIGN = np.array([-1.0, 1.0, -1.0, 1.0])
_SIDE_DIR = np.array([0, 0, 1, 1])


def _interleave(x: int, y: int, bits: int) -> int:
    code = 0
    for b in range(bits):
        code |= ((x >> b) & 1) << (2 * b)
        code |= ((y >> b) & 1) << (2 * b + 1)
    return code


def cell_order_key(addr: CellAddr, depth: int) -> Tuple[int, int, int]:
    """Sort key: base cell row-major, then Morton order at ``depth``."""
    level, i, j = addr
    shift = depth - level
    x, y = i << shift, j << shift
    mask = (1 << depth) - 1
    return (y >> depth, x >> depth, _interleave(x & mask, y & mask, depth))


def children(addr: CellAddr) -> Tuple[CellAddr, ...]:
    level, i, j = addr
    return ((level + 1, 2 * i, 2 * j), (level + 1, 2 * i + 1, 2 * j),
            (level + 1, 2 * i, 2 * j + 1), (level + 1, 2 * i + 1, 2 * j + 1))


def parent(addr: CellAddr) -> CellAddr:
    level, i, j = addr
    if level == 0:
        raise GridError(f"base cell {addr} has no parent")
    return (level - 1, i >> 1, j >> 1)


def _covering(leaves, level: int, i: int, j: int) -> Optional[CellAddr]:
    """Leaf at ``level`` or coarser that contains address ``(level, i, j)``."""
    for up in range(level + 1):
        addr = (level - up, i >> up, j >> up)
        if addr in leaves:
            return addr
    return None


# ---------------------------------------------------------------------------
# Grid
# ---------------------------------------------------------------------------
class QuadGrid:
    """Immutable leaf set of a 2:1-balanced quadtree over the unit square."""

    def __init__(self, base: int, cells: Iterable[CellAddr]):
        if int(base) < 1:
            raise InvalidInputError(f"base size must be >= 1, got {base}")
        self.base = int(base)
        leaves = {tuple(int(x) for x in c) for c in cells}
        if not leaves:
            raise GridError("a grid needs at least one cell")
        depth = max(c[0] for c in leaves)
        for level, i, j in leaves:
            side = self.base << level
            if level < 0 or not (0 <= i < side and 0 <= j < side):
                raise GridError(f"cell {(level, i, j)} lies outside the domain")
        # Exact tiling check in integer units of the finest cell.
        covered = sum(4 ** (depth - c[0]) for c in leaves)
        if covered != (self.base ** 2) * 4 ** depth:
            raise GridError("cells do not tile the unit square")
        for c in leaves:
            if c[0] and _covering(leaves, c[0] - 1, c[1] >> 1, c[2] >> 1):
                raise GridError(f"cell {c} overlaps one of its ancestors")

        self.max_level = depth
        self.cells: Tuple[CellAddr, ...] = tuple(
            sorted(leaves, key=lambda a: cell_order_key(a, depth)))
        self.index: Dict[CellAddr, int] = {a: k for k, a in enumerate(self.cells)}
        arr = np.array(self.cells, dtype=np.int64).reshape(-1, 3)
        self.level = arr[:, 0]
        self.ii = arr[:, 1]
        self.jj = arr[:, 2]
        self.h = 1.0 / (self.base * np.power(2.0, self.level))
        self.area = self.h ** 2
        self.x0 = self.ii * self.h
        self.y0 = self.jj * self.h
        self._build_faces()

    @classmethod
    def uniform(cls, m: int) -> "QuadGrid":
        return cls(m, ((0, i, j) for j in range(m) for i in range(m)))

    def __repr__(self) -> str:
        return (f"QuadGrid(base={self.base}, cells={self.n_cells}, "
                f"faces={self.n_faces}, max_level={self.max_level})")

    def __eq__(self, other) -> bool:
        return (isinstance(other, QuadGrid) and self.base == other.base
                and self.cells == other.cells)

    def __hash__(self) -> int:
        return hash((self.base, self.cells))

    # -- faces ------------------------------------------------------------
    def _neighbor_level(self, level: int, i: int, j: int) -> Optional[int]:
        hit = _covering(self.index, level, i, j)
        return None if hit is None else hit[0]

    def _build_faces(self) -> None:
        keys: Dict[FaceKey, int] = {}
        minus: List[List[int]] = []
        plus: List[List[int]] = []
        sides = np.full((self.n_cells, 4), -1, dtype=np.int64)
        boundary = 0
        for c, (level, i, j) in enumerate(self.cells):
            n_side = self.base << level
            for side in (LEFT, RIGHT, BOTTOM, TOP):
                if side == LEFT:
                    ni, nj, orient, line, pos = i - 1, j, VERTICAL, i, j
                elif side == RIGHT:
                    ni, nj, orient, line, pos = i + 1, j, VERTICAL, i + 1, j
                elif side == BOTTOM:
                    ni, nj, orient, line, pos = i, j - 1, HORIZONTAL, j, i
                else:
                    ni, nj, orient, line, pos = i, j + 1, HORIZONTAL, j + 1, i
                if not (0 <= ni < n_side and 0 <= nj < n_side):
                    boundary += 1
                    continue
                nb = self._neighbor_level(level, ni, nj)
                if nb is None or nb == level:
                    key = (orient, level, line, pos)
                elif nb == level - 1:
                    if side == LEFT:
                        cline, cpos = (ni >> 1) + 1, nj >> 1
                    elif side == RIGHT:
                        cline, cpos = ni >> 1, nj >> 1
                    elif side == BOTTOM:
                        cline, cpos = (nj >> 1) + 1, ni >> 1
                    else:
                        cline, cpos = nj >> 1, ni >> 1
                    key = (orient, level - 1, cline, cpos)
                else:
                    raise GridError(
                        f"cell {(level, i, j)} borders a cell {level - nb} levels "
                        "coarser; the grid is not 2:1 balanced")
                dof = keys.get(key)
                if dof is None:
                    dof = keys[key] = len(keys)
                    minus.append([])
                    plus.append([])
                sides[c, side] = dof
                (plus if side in (LEFT, BOTTOM) else minus)[dof].append(c)

        self.face_keys: Tuple[FaceKey, ...] = tuple(keys)
        self.face_index = keys
        self.cell_sides = sides
        self.cell_sides.setflags(write=False)
        self.face_minus = tuple(tuple(m) for m in minus)
        self.face_plus = tuple(tuple(p) for p in plus)
        self.n_boundary_faces = boundary
        fk = np.array(self.face_keys, dtype=np.int64).reshape(-1, 4)
        self.face_orient = fk[:, 0]
        self.face_level = fk[:, 1]
        self.face_line = fk[:, 2]
        self.face_pos = fk[:, 3]
        self.face_length = 1.0 / (self.base * np.power(2.0, self.face_level))

    # -- queries ----------------------------------------------------------
    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_faces(self) -> int:
        return len(self.face_keys)

    @property
    def total_area(self) -> float:
        return float(self.area.sum())

    def covering_index(self, addr: CellAddr) -> Optional[int]:
        hit = _covering(self.index, *addr)
        return None if hit is None else self.index[hit]

    def locate(self, point: Sequence[float]) -> int:
        """Cell containing ``point``; points on a grid line go right/top."""
        x, y = float(point[0]), float(point[1])
        if not (0.0 < x < 1.0 and 0.0 < y < 1.0):
            raise GeometryError(
                f"terminal {(x, y)} is not strictly inside the unit square")
        n = self.base << self.max_level
        fx = min(int(np.floor(x * n)), n - 1)
        fy = min(int(np.floor(y * n)), n - 1)
        return self.index[_covering(self.index, self.max_level, fx, fy)]

    def neighbors(self, c: int) -> List[int]:
        out = set()
        for dof in self.cell_sides[c]:
            if dof >= 0:
                out.update(self.face_minus[dof])
                out.update(self.face_plus[dof])
        out.discard(c)
        return sorted(out)

    def max_level_jump(self) -> int:
        jump = 0
        for m, p in zip(self.face_minus, self.face_plus):
            levels = [self.level[c] for c in m + p]
            jump = max(jump, int(max(levels) - min(levels)))
        return jump

    def terminal_cells(self, points: Sequence[Point]) -> List[int]:
        """Locate terminals; distinct points may not share a cell."""
        owner: Dict[int, Tuple[float, float]] = {}
        out = []
        for pt in points:
            pt = (float(pt[0]), float(pt[1]))
            c = self.locate(pt)
            prev = owner.setdefault(c, pt)
            if prev != pt:
                raise GeometryError(
                    f"terminals {prev} and {pt} fall into the same cell "
                    f"{self.cells[c]}; refine the grid")
            out.append(c)
        return out


def build_uniform(m: int) -> QuadGrid:
    if int(m) < 2:
        raise InvalidInputError(f"uniform grid needs M >= 2, got {m}")
    return QuadGrid.uniform(int(m))


# ---------------------------------------------------------------------------
# Operators
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class ConstraintSystem:
    matrix: sp.csr_matrix
    rhs: np.ndarray
    row_meta: np.ndarray            # (rows, 2): field, cell
    flagged: Tuple[Tuple[int, int], ...] = ()

    @property
    def n_rows(self) -> int:
        return self.matrix.shape[0]

    def residual(self, x: np.ndarray) -> float:
        if self.n_rows == 0:
            return 0.0
        return float(np.abs(self.matrix @ x - self.rhs).max())

    def with_rhs(self, rhs: np.ndarray) -> "ConstraintSystem":
        return ConstraintSystem(self.matrix, np.asarray(rhs, dtype=float),
                                self.row_meta, self.flagged)


def _side_entries(grid: QuadGrid):
    cells, sides = np.nonzero(grid.cell_sides >= 0)
    return cells, sides, grid.cell_sides[cells, sides]


def divergence_operator(grid: QuadGrid) -> sp.csr_matrix:
    """Single-field cell flux: ``F = h (V_r - V_l) + h (V_t - V_b)``."""
    cells, sides, dofs = _side_entries(grid)
    vals = _SIDE_SIGN[sides] * grid.h[cells]
    return sp.csr_matrix((vals, (cells, dofs)), shape=(grid.n_cells, grid.n_faces))


def _row_meta(n_fields: int, n_cells: int) -> np.ndarray:
    return np.column_stack([np.repeat(np.arange(n_fields), n_cells),
                            np.tile(np.arange(n_cells), n_fields)])


def divergence_rhs(grid: QuadGrid, pairs: Sequence[Tuple[Point, Point]]) -> np.ndarray:
    """+1 on the source cell and -1 on the sink cell of each field."""
    points = [p for pair in pairs for p in pair]
    cells = grid.terminal_cells(points)
    b = np.zeros(len(pairs) * grid.n_cells)
    for i in range(len(pairs)):
        src, snk = cells[2 * i], cells[2 * i + 1]
        if src == snk:
            raise GeometryError(f"field {i}: source and sink coincide")
        b[i * grid.n_cells + src] += 1.0
        b[i * grid.n_cells + snk] -= 1.0
    return b


def assemble_divergence(grid: QuadGrid,
                        pairs: Sequence[Tuple[Point, Point]]) -> ConstraintSystem:
    n = len(pairs)
    if n < 1:
        raise InvalidInputError("need at least one source/sink pair")
    div = divergence_operator(grid)
    matrix = sp.kron(sp.identity(n, format="csr"), div, format="csr")
    return ConstraintSystem(matrix, divergence_rhs(grid, pairs),
                            _row_meta(n, grid.n_cells))


def averaging_operator(grid: QuadGrid) -> sp.csr_matrix:
    """Single-field face-to-cell average, rows ``2 * cell + direction``."""
    cells, sides, dofs = _side_entries(grid)
    rows = 2 * cells + _SIDE_DIR[sides]
    return sp.csr_matrix((np.full(len(rows), 0.5), (rows, dofs)),
                         shape=(2 * grid.n_cells, grid.n_faces))


def _stack_fields(single: sp.csr_matrix, n_fields: int) -> sp.csr_matrix:
    """Lift a single-field cell operator to the (cell, direction, field) rows
    and field-major columns used everywhere else."""
    coo = single.tocoo()
    nr, nc = single.shape
    rows = (coo.row[None, :] * n_fields + np.arange(n_fields)[:, None]).ravel()
    cols = (coo.col[None, :] + nc * np.arange(n_fields)[:, None]).ravel()
    vals = np.tile(coo.data, n_fields)
    return sp.csr_matrix((vals, (rows, cols)), shape=(nr * n_fields, nc * n_fields))


def assemble_pairing(grid: QuadGrid, n_fields: int = 1) -> sp.csr_matrix:
    """``B``: cell area times the face-averaged vector of every field."""
    avg = averaging_operator(grid)
    scaled = sp.diags(np.repeat(grid.area, 2)) @ avg
    return _stack_fields(scaled.tocsr(), n_fields)


def cell_averages(grid: QuadGrid, v: np.ndarray, n_fields: int) -> np.ndarray:
    """Face-averaged vectors ``(n_cells, 2, n_fields)``."""
    mat = np.asarray(v, dtype=float).reshape(n_fields, grid.n_faces).T
    return (averaging_operator(grid) @ mat).reshape(grid.n_cells, 2, n_fields)


# ---------------------------------------------------------------------------
# psi variables
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class PsiLayout:
    """Active subsets per cell; blocks are numbered cell by cell."""

    n_fields: int
    active: Tuple[Tuple[int, ...], ...]

    def __post_init__(self):
        top = 1 << self.n_fields
        for c, masks in enumerate(self.active):
            if len(set(masks)) != len(masks):
                raise InvalidInputError(f"cell {c}: duplicate active subsets")
            for m in masks:
                if not 0 < m < top:
                    raise InvalidInputError(f"cell {c}: invalid subset mask {m}")

    @classmethod
    def full(cls, n_cells: int, n_fields: int) -> "PsiLayout":
        masks = tuple(int(m) for m in subset_table(n_fields)[0])
        return cls(n_fields, tuple(masks for _ in range(n_cells)))

    @classmethod
    def from_lists(cls, n_fields: int, lists: Iterable[Iterable[int]]) -> "PsiLayout":
        return cls(n_fields, tuple(tuple(sorted(set(int(m) for m in masks)))
                                   for masks in lists))

    @property
    def n_cells(self) -> int:
        return len(self.active)

    @cached_property
    def block_cell(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_cells), [len(a) for a in self.active])

    @cached_property
    def block_mask(self) -> np.ndarray:
        return np.array([m for a in self.active for m in a], dtype=np.int64)

    @cached_property
    def block_card(self) -> np.ndarray:
        return np.array([popcount(m) for m in self.block_mask], dtype=np.int64)

    @property
    def n_blocks(self) -> int:
        return len(self.block_mask)

    def block_index(self) -> Dict[Tuple[int, int], int]:
        return {(int(c), int(m)): b for b, (c, m)
                in enumerate(zip(self.block_cell, self.block_mask))}


def psi_weights(grid: QuadGrid, layout: PsiLayout, alpha: float) -> np.ndarray:
    return grid.area[layout.block_cell] * layout.block_card.astype(float) ** alpha


def assemble_psi_coupling(grid: QuadGrid, layout: PsiLayout) -> ConstraintSystem:
    """Rows ``avg V_i - sum_{J contains i} psi_J = 0`` per (cell, direction,
    field), over the columns ``[v ; psi]`` with ``psi`` flattened
    ``block * 2 + direction``.  ``flagged`` lists (cell, field) pairs no
    active block can carry; those rows pin the cell average to zero."""
    if layout.n_cells != grid.n_cells:
        raise GridError("psi layout and grid disagree on the number of cells")
    n = layout.n_fields
    nv = n * grid.n_faces
    v_part = _stack_fields(averaging_operator(grid), n).tocoo()

    rows, cols = [], []
    for b, (c, mask) in enumerate(zip(layout.block_cell, layout.block_mask)):
        for i in range(n):
            if mask >> i & 1:
                for d in (0, 1):
                    rows.append((2 * c + d) * n + i)
                    cols.append(nv + 2 * b + d)
    psi_rows = np.array(rows, dtype=np.int64)
    psi_cols = np.array(cols, dtype=np.int64)
    matrix = sp.csr_matrix(
        (np.concatenate([v_part.data, -np.ones(len(psi_rows))]),
         (np.concatenate([v_part.row, psi_rows]),
          np.concatenate([v_part.col, psi_cols]))),
        shape=(2 * grid.n_cells * n, nv + 2 * layout.n_blocks))

    covered = np.zeros((grid.n_cells, n), dtype=bool)
    for c, mask in zip(layout.block_cell, layout.block_mask):
        for i in range(n):
            if mask >> i & 1:
                covered[c, i] = True
    flagged = tuple((int(c), int(i)) for c, i in zip(*np.nonzero(~covered)))

    meta = np.column_stack([np.tile(np.arange(n), 2 * grid.n_cells),
                            np.repeat(np.arange(grid.n_cells), 2 * n)])
    return ConstraintSystem(matrix, np.zeros(matrix.shape[0]), meta, flagged)


# ---------------------------------------------------------------------------
# Refinement
# ---------------------------------------------------------------------------
def _side_addresses(addr: CellAddr) -> List[CellAddr]:
    level, i, j = addr
    return [(level, i - 1, j), (level, i + 1, j), (level, i, j - 1), (level, i, j + 1)]


def _inside(base: int, addr: CellAddr) -> bool:
    n = base << addr[0]
    return 0 <= addr[1] < n and 0 <= addr[2] < n


def subdivide(grid: QuadGrid, cells: Iterable[int]) -> QuadGrid:
    """Split the given cells in four, splitting neighbours as needed to keep
    the 2:1 balance."""
    leaves = set(grid.cells)
    queue = deque(grid.cells[c] for c in sorted(set(int(c) for c in cells)))
    forced = 0
    while queue:
        addr = queue.popleft()
        if addr not in leaves:
            continue
        leaves.remove(addr)
        leaves.update(children(addr))
        for nb in _side_addresses(addr):
            if not _inside(grid.base, nb):
                continue
            hit = _covering(leaves, *nb)
            if hit is not None and hit[0] < addr[0]:
                queue.append(hit)
                forced += 1
    if forced:
        log.debug("subdivide: %d extra splits for 2:1 balance", forced)
    return QuadGrid(grid.base, leaves)


def sibling_groups(grid: QuadGrid, cells: Iterable[int]) -> List[Tuple[int, ...]]:
    """Complete groups of four marked siblings, as cell indices."""
    marked = set(int(c) for c in cells)
    groups: Dict[CellAddr, List[int]] = defaultdict(list)
    for c in marked:
        addr = grid.cells[c]
        if addr[0] > 0:
            groups[parent(addr)].append(c)
    out = []
    for par in sorted(groups, key=lambda a: cell_order_key(a, grid.max_level)):
        kids = groups[par]
        if len(kids) == 4:
            out.append(tuple(sorted(kids)))
    return out


def _merge_keeps_balance(leaves, base: int, par: CellAddr) -> bool:
    level, i, j = par
    fine = level + 1
    around = [(fine, 2 * i - 1, 2 * j), (fine, 2 * i - 1, 2 * j + 1),
              (fine, 2 * i + 2, 2 * j), (fine, 2 * i + 2, 2 * j + 1),
              (fine, 2 * i, 2 * j - 1), (fine, 2 * i + 1, 2 * j - 1),
              (fine, 2 * i, 2 * j + 2), (fine, 2 * i + 1, 2 * j + 2)]
    return all(_covering(leaves, *a) is not None
               for a in around if _inside(base, a))


def merge(grid: QuadGrid, cells: Iterable[int]) -> QuadGrid:
    """Merge groups of four siblings into their father.

    Every given cell must belong to a complete group of four; groups whose
    merge would break the 2:1 balance are left alone.
    """
    groups: Dict[CellAddr, set] = defaultdict(set)
    for c in set(int(c) for c in cells):
        addr = grid.cells[c]
        if addr[0] == 0:
            raise GridError(f"cell {addr} is a base cell and cannot be merged")
        groups[parent(addr)].add(addr)
    for par, kids in groups.items():
        if kids != set(children(par)):
            raise GridError(f"cells {sorted(kids)} are not four siblings of {par}")

    leaves = set(grid.cells)
    skipped = 0
    for par in sorted(groups, key=lambda a: (-a[0], cell_order_key(a, grid.max_level))):
        if _merge_keeps_balance(leaves, grid.base, par):
            leaves.difference_update(children(par))
            leaves.add(par)
        else:
            skipped += 1
    if skipped:
        log.debug("merge: %d groups kept to preserve 2:1 balance", skipped)
    return QuadGrid(grid.base, leaves)


# ---------------------------------------------------------------------------
# Transfer between grids
# ---------------------------------------------------------------------------
def cell_sources(old: QuadGrid, new: QuadGrid) -> List[Tuple[int, ...]]:
    """For each new cell, the old cells it takes values from: the covering
    old cell, or every old cell it now contains."""
    if old.base != new.base:
        raise GridError("grids have different base sizes")
    out = []
    for addr in new.cells:
        hit = old.covering_index(addr)
        if hit is not None:
            out.append((hit,))
            continue
        found, stack = [], list(children(addr))
        while stack:
            a = stack.pop()
            if a in old.index:
                found.append(old.index[a])
            else:
                stack.extend(children(a))
        out.append(tuple(sorted(found)))
    return out


def transfer_cell_values(old: QuadGrid, new: QuadGrid, values: np.ndarray) -> np.ndarray:
    """Children inherit, merged cells take the area-weighted mean."""
    values = np.asarray(values, dtype=float)
    out = np.zeros((new.n_cells,) + values.shape[1:])
    for k, src in enumerate(cell_sources(old, new)):
        if len(src) == 1:
            out[k] = values[src[0]]
        else:
            w = old.area[list(src)]
            out[k] = np.tensordot(w / w.sum(), values[list(src)], axes=1)
    return out


def _face_lines(grid: QuadGrid, depth: int):
    lines: Dict[Tuple[int, int], List[Tuple[int, int, int]]] = defaultdict(list)
    for f, (o, level, line, pos) in enumerate(grid.face_keys):
        s = 1 << (depth - level)
        lines[(o, line * s)].append((pos * s, (pos + 1) * s, f))
    out = {}
    for key, segs in lines.items():
        segs.sort()
        arr = np.array(segs, dtype=np.int64)
        out[key] = (arr[:, 0], arr[:, 1], arr[:, 2])
    return out


def transfer_field(old: QuadGrid, new: QuadGrid, v: np.ndarray,
                   n_fields: int) -> np.ndarray:
    """Carry a field stack to a new grid.

    Faces present in both grids copy their value, coarse faces take the
    length-weighted mean of the old subfaces, and faces created inside an
    old cell interpolate linearly between that cell's opposite faces.
    """
    if old.base != new.base:
        raise GridError("grids have different base sizes")
    old_v = np.asarray(v, dtype=float).reshape(n_fields, old.n_faces)
    out = np.zeros((n_fields, new.n_faces))
    depth = max(old.max_level, new.max_level)
    lines = None
    for f, key in enumerate(new.face_keys):
        hit = old.face_index.get(key)
        if hit is not None:
            out[:, f] = old_v[:, hit]
            continue
        if lines is None:
            lines = _face_lines(old, depth)
        o, level, line, pos = key
        s = 1 << (depth - level)
        lo, hi = pos * s, (pos + 1) * s
        seg = lines.get((o, line * s))
        acc = np.zeros(n_fields)
        covered = 0
        if seg is not None:
            starts, ends, dofs = seg
            k = int(np.searchsorted(starts, hi, side="left")) - 1
            while k >= 0 and ends[k] > lo:
                overlap = min(hi, ends[k]) - max(lo, starts[k])
                acc += overlap * old_v[:, dofs[k]]
                covered += overlap
                k -= 1
        if covered:
            out[:, f] = acc / covered
            continue
        out[:, f] = _interpolate_inside(old, new, old_v, f)
    return out.ravel()


def _interpolate_inside(old: QuadGrid, new: QuadGrid, old_v: np.ndarray,
                        f: int) -> np.ndarray:
    c_new = (new.face_plus[f] or new.face_minus[f])[0]
    c_old = old.covering_index(new.cells[c_new])
    if c_old is None:
        raise GridError(f"face {new.face_keys[f]} has no enclosing old cell")
    o, level, line, _ = new.face_keys[f]
    coord = line / (new.base * 2.0 ** level)
    if o == VERTICAL:
        t = (coord - old.x0[c_old]) / old.h[c_old]
        lo_dof, hi_dof = old.cell_sides[c_old, LEFT], old.cell_sides[c_old, RIGHT]
    else:
        t = (coord - old.y0[c_old]) / old.h[c_old]
        lo_dof, hi_dof = old.cell_sides[c_old, BOTTOM], old.cell_sides[c_old, TOP]
    lo_val = old_v[:, lo_dof] if lo_dof >= 0 else 0.0
    hi_val = old_v[:, hi_dof] if hi_dof >= 0 else 0.0
    return (1.0 - t) * lo_val + t * hi_val


def transfer_layout(old: QuadGrid, new: QuadGrid,
                    lists: Sequence[Iterable[int]]) -> List[Tuple[int, ...]]:
    """Children inherit their father's active list; merged cells take the
    union of their children's lists."""
    out = []
    for src in cell_sources(old, new):
        merged = set()
        for s in src:
            merged.update(lists[s])
        out.append(tuple(sorted(merged)))
    return out


def transfer_psi(old: QuadGrid, new: QuadGrid, old_layout: PsiLayout,
                 new_layout: PsiLayout, psi: np.ndarray) -> np.ndarray:
    """Carry per-block psi values (``(n_blocks, 2)``) onto a new layout."""
    psi = np.asarray(psi, dtype=float).reshape(old_layout.n_blocks, 2)
    where = old_layout.block_index()
    sources = cell_sources(old, new)
    out = np.zeros((new_layout.n_blocks, 2))
    for b, (c, mask) in enumerate(zip(new_layout.block_cell, new_layout.block_mask)):
        src = sources[c]
        w = old.area[list(src)]
        w = w / w.sum()
        for s, ws in zip(src, w):
            ob = where.get((s, int(mask)))
            if ob is not None:
                out[b] += ws * psi[ob]
    return out
