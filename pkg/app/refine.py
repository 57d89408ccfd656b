"""Adaptive outer loop.

Solve, mark cells where the energy concentrates ("used") or vanishes
("unused"), subdivide the used cells and merge complete groups of unused
siblings, shrink the per-cell psi subsets to those seen nearby, carry the
solution over and solve again.

* Terminal cells are always marked used and are never merged, so they sit
  at the finest level of every round.
* Cells that are neither used nor unused keep their level.
* Each round may write a snapshot dump ``round_XX.dump``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from app.dump import write_dump
from app.errors import DegenerateInstanceError, InvalidInputError
from app.grid2d import (PsiLayout, QuadGrid, build_uniform, merge, sibling_groups,
                        subdivide, transfer_cell_values, transfer_field,
                        transfer_layout, transfer_psi, psi_weights)
from app.kalpha import subset_mask, subset_table
from app.solver import (PHI_PATH, PSI_PATH, PsiResult, Solution, SolverOptions,
                        SolverState, closed_form_energy, solve_pairs)

log = logging.getLogger(__name__)

Point = Tuple[float, float]
Pair = Tuple[Point, Point]


@dataclass(frozen=True)
class RefinePolicy:
    used_threshold: float = 1e-2
    unused_threshold: float = 1e-8
    max_rounds: int = 5
    selection_radius: int = 1
    initial_size: int = 32
    adaptive: bool = True
    seed_from_phi: bool = False
    seed_iters: int = 20000

    def __post_init__(self):
        if not 0.0 < self.used_threshold <= 1.0:
            raise InvalidInputError("used_threshold must lie in (0, 1]")
        if not 0.0 < self.unused_threshold:
            raise InvalidInputError("unused_threshold must be positive")
        if self.max_rounds < 1:
            raise InvalidInputError("max_rounds must be >= 1")
        if self.selection_radius < 0:
            raise InvalidInputError("selection_radius must be >= 0")
        if self.initial_size < 2:
            raise InvalidInputError("initial_size must be >= 2")
        if self.seed_iters < 1:
            raise InvalidInputError("seed_iters must be >= 1")


# ---------------------------------------------------------------------------
# Marking and selection
# ---------------------------------------------------------------------------
def mark_cells(density, policy: RefinePolicy) -> Tuple[Set[int], Set[int]]:
    density = np.asarray(density, dtype=float)
    if np.any(density < -1e-14):
        raise InvalidInputError("energy densities must be nonnegative")
    top = float(density.max(initial=0.0))
    used = set()
    if top > 0.0:
        used = set(np.nonzero(density >= policy.used_threshold * top)[0].tolist())
    unused = set(np.nonzero(density <= policy.unused_threshold)[0].tolist()) - used
    return used, unused


def _touching(grid: QuadGrid, a: int, b: int) -> bool:
    eps = 1e-12
    return (grid.x0[a] <= grid.x0[b] + grid.h[b] + eps
            and grid.x0[b] <= grid.x0[a] + grid.h[a] + eps
            and grid.y0[a] <= grid.y0[b] + grid.h[b] + eps
            and grid.y0[b] <= grid.y0[a] + grid.h[a] + eps)


def cell_rings(grid: QuadGrid, radius: int) -> List[Set[int]]:
    """Cells within ``radius`` rings of each cell, corners included."""
    side = [set(grid.neighbors(c)) for c in range(grid.n_cells)]
    touch = []
    for c in range(grid.n_cells):
        cand = set(side[c])
        for nb in side[c]:
            cand |= side[nb]
        cand.discard(c)
        touch.append({o for o in cand if _touching(grid, c, o)})
    rings = []
    for c in range(grid.n_cells):
        seen = {c}
        frontier = {c}
        for _ in range(radius):
            frontier = set().union(*(touch[f] for f in frontier)) - seen
            seen |= frontier
        rings.append(seen)
    return rings


def terminal_masks(grid: QuadGrid, pairs: Sequence[Pair]) -> Dict[int, Set[int]]:
    """Singleton subsets every terminal cell must keep."""
    cells = grid.terminal_cells([p for pair in pairs for p in pair])
    need: Dict[int, Set[int]] = {}
    for i in range(len(pairs)):
        for c in (cells[2 * i], cells[2 * i + 1]):
            need.setdefault(c, set()).add(1 << i)
    return need


def select_variables(grid: QuadGrid, layout: PsiLayout, psi: np.ndarray,
                     policy: RefinePolicy,
                     required: Optional[Dict[int, Set[int]]] = None) -> List[Tuple[int, ...]]:
    """Keep, per cell, the active subsets whose psi is above the unused
    floor somewhere in the cell's neighbourhood."""
    psi = np.asarray(psi, dtype=float).reshape(layout.n_blocks, 2)
    if layout.n_fields == 1:
        return [(1,)] * grid.n_cells
    alive: List[Set[int]] = [set() for _ in range(grid.n_cells)]
    big = np.linalg.norm(psi, axis=1) > policy.unused_threshold
    for c, m in zip(layout.block_cell[big], layout.block_mask[big]):
        alive[c].add(int(m))
    rings = cell_rings(grid, policy.selection_radius)
    required = required or {}
    out = []
    for c in range(grid.n_cells):
        seen = set().union(*(alive[o] for o in rings[c]))
        keep = {m for m in layout.active[c] if m in seen}
        keep |= required.get(c, set())
        out.append(tuple(sorted(keep)))
    return out


def seed_variables(grid: QuadGrid, cell_fields: np.ndarray, policy: RefinePolicy,
                   required: Optional[Dict[int, Set[int]]] = None) -> List[Tuple[int, ...]]:
    """Active subsets from an approximate solution: ``J`` is introduced only
    if every field of ``J`` is nonzero somewhere in the neighbourhood."""
    cell_fields = np.asarray(cell_fields, dtype=float)
    n = cell_fields.shape[2]
    present = np.linalg.norm(cell_fields, axis=1) > policy.unused_threshold  # (nc, n)
    masks = subset_table(n)[0]
    rings = cell_rings(grid, policy.selection_radius)
    required = required or {}
    out = []
    for c in range(grid.n_cells):
        near = present[sorted(rings[c])].any(axis=0)
        mask_near = subset_mask(np.nonzero(near)[0])
        keep = {int(m) for m in masks if int(m) & ~mask_near == 0}
        keep |= required.get(c, set())
        out.append(tuple(sorted(keep)))
    return out


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class RoundRecord:
    round: int
    n_cells: int
    n_blocks: int
    energy: float
    finest_h: float
    status: str
    iterations: int
    n_used: int = 0
    n_unused: int = 0
    transferred_energy: Optional[float] = None


@dataclass
class RefineResult:
    solution: Solution
    rounds: List[RoundRecord] = field(default_factory=list)
    grids: List[QuadGrid] = field(default_factory=list)

    @property
    def energies(self) -> List[float]:
        return [r.energy for r in self.rounds]


def _carry_over(sol: Solution, new: QuadGrid, new_layout: Optional[PsiLayout]):
    """Warm start on ``new`` plus the energy of the transferred state."""
    old = sol.grid
    n = sol.n_fields
    v = transfer_field(old, new, sol.v, n)
    lam = transfer_cell_values(old, new, sol.state.lam.reshape(n, old.n_cells).T).T.ravel()
    if isinstance(sol.state, PsiResult):
        prob = sol.problem
        psi = transfer_psi(old, new, prob.layout, new_layout, sol.state.psi)
        phi = transfer_cell_values(old, new, sol.state.raw_phi(prob))
        mu = (phi * new.area[:, None, None]).ravel()
        weights = psi_weights(new, new_layout, sol.alpha)
        energy = float(weights @ np.linalg.norm(psi, axis=1))
        return PsiResult(psi, v, lam, mu, sol.state.iter), energy
    phi = transfer_cell_values(old, new, sol.state.cell_phi(sol.problem)).ravel()
    per_cell = closed_form_energy(new, v, n, sol.alpha)
    energy = float(per_cell.sum()) if per_cell is not None else None
    return SolverState(v, phi, lam, sol.state.iter), energy


def _snapshot(snapshot_dir, r: int, sol: Solution, terminals) -> None:
    if snapshot_dir is None:
        return
    path = Path(snapshot_dir) / f"round_{r:02d}.dump"
    write_dump(path, sol.grid, sol.cell_fields(), sol.report.density, terminals)


def refine_loop(pairs: Sequence[Pair], alpha, policy: RefinePolicy = RefinePolicy(),
                options: SolverOptions = SolverOptions(), snapshot_dir=None,
                terminals: Sequence[Tuple[float, float, str]] = (),
                grid: Optional[QuadGrid] = None) -> RefineResult:
    pairs = [tuple(map(tuple, p)) for p in pairs]
    n = len(pairs)
    grid = grid if grid is not None else build_uniform(policy.initial_size)
    layout: Optional[PsiLayout] = None

    if options.path == PSI_PATH and policy.seed_from_phi and n > 1:
        coarse_opts = replace(options, path=PHI_PATH,
                              stop=replace(options.stop, max_iters=policy.seed_iters))
        coarse = solve_pairs(grid, pairs, alpha, coarse_opts)
        layout = PsiLayout.from_lists(
            n, seed_variables(grid, coarse.cell_fields(), policy,
                              terminal_masks(grid, pairs)))
        log.info("ROUND seed blocks=%d from a %d-iteration phi solve",
                 layout.n_blocks, coarse.iterations)

    result = None
    warm = None
    for r in range(policy.max_rounds + 1):
        sol = solve_pairs(grid, pairs, alpha, options, layout, warm)
        n_blocks = sol.problem.layout.n_blocks if options.path == PSI_PATH else 0
        record = RoundRecord(r, grid.n_cells, n_blocks, sol.energy,
                             float(grid.h.min()), sol.status.value, sol.iterations)
        if result is None:
            result = RefineResult(sol)
        elif sol.energy > 1.01 * result.rounds[-1].energy:
            log.warning("ROUND %d energy %.6g rose more than 1%% above %.6g",
                        r, sol.energy, result.rounds[-1].energy)
        result.solution = sol
        result.grids.append(grid)
        _snapshot(snapshot_dir, r, sol, terminals)
        log.info("ROUND %d cells=%d blocks=%d h_min=%.3e energy=%.9g status=%s",
                 r, grid.n_cells, n_blocks, record.finest_h, sol.energy,
                 sol.status.value)

        if r == policy.max_rounds or not policy.adaptive:
            result.rounds.append(record)
            break

        used, unused = mark_cells(sol.report.density, policy)
        need = terminal_masks(grid, pairs)
        term = set(need)
        if r == 0 and not used - term:
            raise DegenerateInstanceError(
                "no cell carries energy after the first solve; check the terminals")
        used |= term
        unused -= term

        groups = sibling_groups(grid, unused)
        merged = merge(grid, [c for g in groups for c in g])
        used_addrs = [grid.cells[c] for c in sorted(used)]
        new = subdivide(merged, [merged.index[a] for a in used_addrs])

        new_layout = None
        if options.path == PSI_PATH:
            lists = select_variables(grid, sol.problem.layout, sol.state.psi, policy, need)
            lists = transfer_layout(grid, new, lists)
            new_need = terminal_masks(new, pairs)
            lists = [tuple(sorted(set(masks) | new_need.get(c, set())))
                     for c, masks in enumerate(lists)]
            new_layout = PsiLayout.from_lists(n, lists)
        warm, moved = _carry_over(sol, new, new_layout)
        if moved is not None and sol.energy > 0:
            drift = abs(moved - sol.energy) / sol.energy
            level = logging.WARNING if drift > 0.05 else logging.INFO
            log.log(level, "TRANSFER round=%d before=%.9g after=%.9g drift=%.2f%%",
                    r, sol.energy, moved, 100 * drift)
        result.rounds.append(replace(record, n_used=len(used), n_unused=len(unused),
                                     transferred_energy=moved))
        grid, layout = new, new_layout
    return result
