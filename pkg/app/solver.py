"""First-order solvers for the discrete relaxation.

Two formulations of the same convex program, both driven by the
diagonally preconditioned primal-dual iteration (step sizes from the
row/column sums of ``|K|**gamma`` and ``|K|**(2-gamma)``):

* **phi path** — saddle problem
  ``min_v max_{phi in K^alpha, lambda} <phi, B v> + <lambda, A v - b>``;
  the per-cell dual matrices are projected with Dykstra every step.
* **psi path** — conic program
  ``min sum_J w_J ||psi_J||`` subject to the flux constraints and the
  coupling between face averages and psi; the norms are handled by block
  soft-thresholding, the constraints by multipliers.

Progress goes to the module logger as ``PROGRESS key=value`` lines, one
per check window, so runs can be grepped and plotted afterwards.
"""
from __future__ import annotations

import itertools
import logging
import math
import time
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp

from app.errors import (CapacityError, DivergenceError, InvalidInputError,
                        LayoutError)
from app.grid2d import (ConstraintSystem, PsiLayout, QuadGrid, assemble_divergence,
                        assemble_pairing, assemble_psi_coupling, cell_averages,
                        divergence_rhs, psi_weights)
from app.kalpha import check_alpha, project_kalpha_cells

log = logging.getLogger(__name__)

PHI_PATH = "phi_path"
PSI_PATH = "psi_path"
PATHS = (PHI_PATH, PSI_PATH)

# Largest field count for which reports project the recovered dual.
REPORT_PROJECTION_CAP = 10

Point = Tuple[float, float]
Pair = Tuple[Point, Point]


class SolveStatus(str, Enum):
    CONVERGED = "converged"
    MAX_ITERS = "max_iters"


@dataclass(frozen=True)
class StoppingRule:
    max_iters: int = 300000
    eps_feas: float = 1e-5
    eps_rel: float = 1e-6
    window: int = 500
    divergence_limit: float = 1e8
    alarm_window: int = 1000

    def __post_init__(self):
        if self.max_iters < 1:
            raise InvalidInputError("max_iters must be >= 1")
        if self.window < 1 or self.alarm_window < 1:
            raise InvalidInputError("check windows must be >= 1")
        if self.eps_feas <= 0 or self.eps_rel <= 0:
            raise InvalidInputError("stopping tolerances must be positive")


@dataclass(frozen=True)
class SolverOptions:
    path: str = PSI_PATH
    gamma: float = 0.6
    stop: StoppingRule = field(default_factory=StoppingRule)
    dykstra_sweeps: int = 50
    dykstra_rel_tol: float = 1e-8
    workers: int = 1
    permutation_cap: int = 7

    def __post_init__(self):
        if self.path not in PATHS:
            raise InvalidInputError(f"unknown solver path {self.path!r}")
        if not 0.0 <= self.gamma <= 2.0:
            raise InvalidInputError(f"gamma must lie in [0, 2], got {self.gamma}")
        if self.dykstra_sweeps < 1 or self.workers < 1 or self.permutation_cap < 1:
            raise InvalidInputError("sweep, worker and permutation caps must be >= 1")


@dataclass(frozen=True)
class HistoryEntry:
    iter: int
    energy: float
    pairing: float
    feasibility: float
    slack: float
    gap: float


def diagonal_steps(operator: sp.spmatrix, gamma: float) -> Tuple[np.ndarray, np.ndarray]:
    """Primal (column) and dual (row) step sizes; empty rows/columns get 0."""
    mag = abs(sp.csr_matrix(operator))
    col = np.asarray(mag.power(2.0 - gamma).sum(axis=0)).ravel()
    row = np.asarray(mag.power(gamma).sum(axis=1)).ravel()
    tau = np.divide(1.0, col, out=np.zeros_like(col), where=col > 0)
    sigma = np.divide(1.0, row, out=np.zeros_like(row), where=row > 0)
    return tau, sigma


class ProgressMonitor:
    """Check-window bookkeeping shared by both paths."""

    def __init__(self, stop: StoppingRule, label: str):
        self.stop = stop
        self.label = label
        self.prev_energy: Optional[float] = None
        self.marks: deque = deque(maxlen=stop.alarm_window // stop.window + 2)

    def check(self, entry: HistoryEntry, magnitude: float) -> bool:
        if not math.isfinite(magnitude) or magnitude > self.stop.divergence_limit:
            raise DivergenceError(
                f"{self.label}: iterate magnitude {magnitude:.3e} exceeds "
                f"{self.stop.divergence_limit:.1e} at iteration {entry.iter}")
        log.info("PROGRESS path=%s iter=%d energy=%.9g pairing=%.9g feas=%.3e "
                 "slack=%.3e gap=%.3e", self.label, entry.iter, entry.energy,
                 entry.pairing, entry.feasibility, entry.slack, entry.gap)

        for it, feas in self.marks:
            if entry.iter - it >= self.stop.alarm_window:
                if entry.feasibility > 1.1 * feas and feas > 0:
                    log.warning("FEAS_ALARM path=%s iter=%d feas=%.3e was=%.3e at iter=%d",
                                self.label, entry.iter, entry.feasibility, feas, it)
                break
        self.marks.appendleft((entry.iter, entry.feasibility))

        rel = math.inf
        if self.prev_energy is not None:
            rel = abs(entry.energy - self.prev_energy) / max(abs(entry.energy), 1e-12)
        self.prev_energy = entry.energy
        return entry.feasibility < self.stop.eps_feas and rel < self.stop.eps_rel


# ---------------------------------------------------------------------------
# phi path
# ---------------------------------------------------------------------------
@dataclass
class SaddleProblem:
    grid: QuadGrid
    pairing: sp.csr_matrix
    divergence: ConstraintSystem
    alpha: float
    gamma: float
    n_fields: int
    tau: np.ndarray
    sigma: np.ndarray
    sigma_tilde: np.ndarray

    @classmethod
    def build(cls, grid: QuadGrid, pairs: Sequence[Pair], alpha,
              gamma: float = 0.6) -> "SaddleProblem":
        alpha = check_alpha(alpha)
        n = len(pairs)
        pairing = assemble_pairing(grid, n)
        divergence = assemble_divergence(grid, pairs)
        tau, _ = diagonal_steps(sp.vstack([pairing, divergence.matrix]), gamma)
        _, sigma = diagonal_steps(pairing, gamma)
        _, sigma_tilde = diagonal_steps(divergence.matrix, gamma)
        return cls(grid, pairing, divergence, alpha, gamma, n,
                   tau, sigma, sigma_tilde)

    @property
    def rhs(self) -> np.ndarray:
        return self.divergence.rhs

    def with_rhs(self, rhs: np.ndarray) -> "SaddleProblem":
        return replace(self, divergence=self.divergence.with_rhs(rhs))


@dataclass
class SolverState:
    v: np.ndarray
    phi: np.ndarray
    lam: np.ndarray
    iter: int = 0
    history: List[HistoryEntry] = field(default_factory=list)
    status: SolveStatus = SolveStatus.MAX_ITERS
    slack: float = 0.0
    budget_hits: int = 0

    @classmethod
    def zeros(cls, prob: SaddleProblem) -> "SolverState":
        return cls(np.zeros(prob.pairing.shape[1]), np.zeros(prob.pairing.shape[0]),
                   np.zeros(prob.divergence.n_rows))

    def cell_phi(self, prob: SaddleProblem) -> np.ndarray:
        return self.phi.reshape(prob.grid.n_cells, 2, prob.n_fields)


def pd_step(state: SolverState, prob: SaddleProblem, sweeps: int = 50,
            rel_tol: float = 1e-8) -> SolverState:
    """One primal-dual iteration: descent in v, projected ascent in phi,
    ascent in lambda, each using the extrapolation ``2 v_new - v``."""
    A = prob.divergence.matrix
    B = prob.pairing
    v_new = state.v - prob.tau * (B.T @ state.phi + A.T @ state.lam)
    bar = 2.0 * v_new - state.v

    phi_hat = state.phi + prob.sigma * (B @ bar)
    tol = rel_tol * (1.0 + float(np.linalg.norm(state.phi)))
    proj = project_kalpha_cells(
        phi_hat.reshape(prob.grid.n_cells, 2, prob.n_fields), prob.alpha,
        tol=tol, max_sweeps=sweeps, report_budget=False)
    lam_new = state.lam + prob.sigma_tilde * (A @ bar - prob.rhs)
    return SolverState(v_new, proj.point.ravel(), lam_new, state.iter + 1,
                       state.history, state.status, proj.slack,
                       state.budget_hits + int(not proj.converged))


def closed_form_energy(grid: QuadGrid, v: np.ndarray, n_fields: int,
                       alpha: float) -> Optional[np.ndarray]:
    """Per-cell energy where the support function has a closed form: one
    field (Euclidean norm) or ``alpha == 1`` (sum of column norms)."""
    avg = cell_averages(grid, v, n_fields)
    if n_fields == 1:
        return grid.area * np.linalg.norm(avg[:, :, 0], axis=1)
    if alpha == 1.0:
        return grid.area * np.linalg.norm(avg, axis=1).sum(axis=1)
    return None


def _phi_entry(state: SolverState, prob: SaddleProblem) -> HistoryEntry:
    pairing = float(state.phi @ (prob.pairing @ state.v))
    per_cell = closed_form_energy(prob.grid, state.v, prob.n_fields, prob.alpha)
    energy = float(per_cell.sum()) if per_cell is not None else pairing
    gap = abs(energy - pairing) if per_cell is not None else math.nan
    return HistoryEntry(state.iter, energy, pairing,
                        prob.divergence.residual(state.v), state.slack, gap)


def solve_phi_path(prob: SaddleProblem, stop: StoppingRule = StoppingRule(),
                   state: Optional[SolverState] = None, sweeps: int = 50,
                   rel_tol: float = 1e-8) -> SolverState:
    state = state if state is not None else SolverState.zeros(prob)
    monitor = ProgressMonitor(stop, PHI_PATH)
    start = state.iter
    status = SolveStatus.MAX_ITERS
    reported = state.budget_hits
    for k in range(1, stop.max_iters + 1):
        state = pd_step(state, prob, sweeps, rel_tol)
        if k % stop.window and k != stop.max_iters:
            continue
        if state.budget_hits > reported:
            log.info("DYKSTRA_BUDGET path=%s iter=%d steps=%d sweeps=%d",
                     PHI_PATH, state.iter, state.budget_hits - reported, sweeps)
            reported = state.budget_hits
        entry = _phi_entry(state, prob)
        state.history.append(entry)
        magnitude = max(np.abs(state.v).max(initial=0.0),
                        np.abs(state.lam).max(initial=0.0))
        if monitor.check(entry, magnitude):
            status = SolveStatus.CONVERGED
            break
    state.status = status
    log.info("phi path finished: status=%s iterations=%d", status.value,
             state.iter - start)
    return state


# ---------------------------------------------------------------------------
# psi path
# ---------------------------------------------------------------------------
@dataclass
class PsiProblem:
    grid: QuadGrid
    layout: PsiLayout
    alpha: float
    gamma: float
    n_fields: int
    divergence: ConstraintSystem
    coupling: ConstraintSystem
    weights: np.ndarray
    operator: sp.csr_matrix
    tau: np.ndarray
    sigma: np.ndarray

    @classmethod
    def build(cls, grid: QuadGrid, pairs: Sequence[Pair], alpha,
              layout: Optional[PsiLayout] = None, gamma: float = 0.6) -> "PsiProblem":
        alpha = check_alpha(alpha)
        n = len(pairs)
        layout = layout if layout is not None else PsiLayout.full(grid.n_cells, n)
        if layout.n_fields != n:
            raise InvalidInputError(
                f"layout carries {layout.n_fields} fields, problem has {n}")
        divergence = assemble_divergence(grid, pairs)
        coupling = assemble_psi_coupling(grid, layout)
        _check_layout(grid, pairs, coupling)
        nv = divergence.matrix.shape[1]
        zero = sp.csr_matrix((divergence.n_rows, 2 * layout.n_blocks))
        operator = sp.vstack([sp.hstack([divergence.matrix, zero]),
                              coupling.matrix], format="csr")
        tau, sigma = diagonal_steps(operator, gamma)
        weights = psi_weights(grid, layout, alpha)
        return cls(grid, layout, alpha, gamma, n, divergence, coupling,
                   weights, operator, tau, sigma)

    @property
    def n_v(self) -> int:
        return self.divergence.matrix.shape[1]

    @property
    def rhs(self) -> np.ndarray:
        return np.concatenate([self.divergence.rhs, self.coupling.rhs])

    def with_rhs(self, rhs: np.ndarray) -> "PsiProblem":
        return replace(self, divergence=self.divergence.with_rhs(rhs))


def _check_layout(grid: QuadGrid, pairs: Sequence[Pair],
                  coupling: ConstraintSystem) -> None:
    if not coupling.flagged:
        return
    cells = grid.terminal_cells([p for pair in pairs for p in pair])
    required = {(cells[2 * i + k], i) for i in range(len(pairs)) for k in (0, 1)}
    missing = sorted(required.intersection(coupling.flagged))
    if missing:
        raise LayoutError(
            f"active subsets cannot carry fields at terminal cells {missing}",
            flagged=missing)
    log.debug("psi layout pins %d (cell, field) averages to zero",
              len(coupling.flagged))


@dataclass
class PsiResult:
    psi: np.ndarray            # (n_blocks, 2)
    v: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    iter: int = 0
    history: List[HistoryEntry] = field(default_factory=list)
    status: SolveStatus = SolveStatus.MAX_ITERS

    @classmethod
    def zeros(cls, prob: PsiProblem) -> "PsiResult":
        return cls(np.zeros((prob.layout.n_blocks, 2)), np.zeros(prob.n_v),
                   np.zeros(prob.divergence.n_rows), np.zeros(prob.coupling.n_rows))

    def energy_of(self, prob: PsiProblem) -> float:
        return float(prob.weights @ np.linalg.norm(self.psi, axis=1))

    def raw_phi(self, prob: PsiProblem) -> np.ndarray:
        """Coupling multipliers divided by the cell area."""
        mu = self.mu.reshape(prob.grid.n_cells, 2, prob.n_fields)
        return mu / prob.grid.area[:, None, None]


def _psi_entry(res: PsiResult, prob: PsiProblem) -> HistoryEntry:
    energy = res.energy_of(prob)
    avg = prob.coupling.matrix[:, :prob.n_v] @ res.v
    pairing = float(res.mu @ avg)
    x = np.concatenate([res.v, res.psi.ravel()])
    feas = max(prob.divergence.residual(res.v), prob.coupling.residual(x))
    return HistoryEntry(res.iter, energy, pairing, feas, 0.0, abs(energy - pairing))


def solve_psi_path(prob: PsiProblem, stop: StoppingRule = StoppingRule(),
                   warm: Optional[PsiResult] = None) -> PsiResult:
    """Minimize the weighted psi norms under flux and coupling constraints."""
    res = warm if warm is not None else PsiResult.zeros(prob)
    nv = prob.n_v
    K = prob.operator
    KT = K.T.tocsr()
    rhs = prob.rhs
    tau, sigma = prob.tau, prob.sigma
    tau_psi = tau[nv:].reshape(-1, 2)[:, 0]
    thresh = tau_psi * prob.weights

    x = np.concatenate([res.v, res.psi.ravel()])
    y = np.concatenate([res.lam, res.mu])
    monitor = ProgressMonitor(stop, PSI_PATH)
    status = SolveStatus.MAX_ITERS
    it0 = res.iter
    history = res.history
    for k in range(1, stop.max_iters + 1):
        x_hat = x - tau * (KT @ y)
        psi_hat = x_hat[nv:].reshape(-1, 2)
        norms = np.linalg.norm(psi_hat, axis=1)
        shrink = np.maximum(0.0, 1.0 - np.divide(
            thresh, norms, out=np.full_like(norms, np.inf), where=norms > 0))
        x_new = x_hat
        x_new[nv:] = (psi_hat * shrink[:, None]).ravel()
        y = y + sigma * (K @ (2.0 * x_new - x) - rhs)
        x = x_new
        if k % stop.window and k != stop.max_iters:
            continue
        res = PsiResult(x[nv:].reshape(-1, 2).copy(), x[:nv].copy(),
                        y[:prob.divergence.n_rows].copy(),
                        y[prob.divergence.n_rows:].copy(), it0 + k, history)
        entry = _psi_entry(res, prob)
        history.append(entry)
        magnitude = max(np.abs(x).max(initial=0.0), np.abs(y).max(initial=0.0))
        if monitor.check(entry, magnitude):
            status = SolveStatus.CONVERGED
            break
    res.status = status
    log.info("psi path finished: status=%s iterations=%d blocks=%d",
             status.value, res.iter - it0, prob.layout.n_blocks)
    return res


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class EnergyReport:
    primal: Optional[float]
    pairing: float
    feasibility: float
    density: np.ndarray
    gap: Optional[float]
    phi: Optional[np.ndarray] = None

    @property
    def energy(self) -> float:
        return self.primal if self.primal is not None else self.pairing


def energy_report(result: Union[SolverState, PsiResult],
                  prob: Union[SaddleProblem, PsiProblem]) -> EnergyReport:
    grid = prob.grid
    if isinstance(result, SolverState):
        per_cell = closed_form_energy(grid, result.v, prob.n_fields, prob.alpha)
        bv = (prob.pairing @ result.v).reshape(grid.n_cells, 2, prob.n_fields)
        phi = result.cell_phi(prob)
        cell_pairing = np.einsum("cdn,cdn->c", phi, bv)
        pairing = float(cell_pairing.sum())
        if per_cell is None:
            density = np.maximum(cell_pairing, 0.0) / grid.area
            primal, gap = None, None
        else:
            density = per_cell / grid.area
            primal = float(per_cell.sum())
            gap = abs(primal - pairing)
        return EnergyReport(primal, pairing, prob.divergence.residual(result.v),
                            density, gap, phi)

    cell_energy = np.bincount(prob.layout.block_cell,
                              weights=prob.weights * np.linalg.norm(result.psi, axis=1),
                              minlength=grid.n_cells)
    primal = float(cell_energy.sum())
    phi = result.raw_phi(prob)
    if prob.n_fields <= REPORT_PROJECTION_CAP:
        phi = project_kalpha_cells(phi, prob.alpha, tol=1e-10, max_sweeps=500).point
    avg = cell_averages(grid, result.v, prob.n_fields)
    pairing = float(np.einsum("cdn,cdn,c->", phi, avg, grid.area))
    x = np.concatenate([result.v, result.psi.ravel()])
    feas = max(prob.divergence.residual(result.v), prob.coupling.residual(x))
    return EnergyReport(primal, pairing, feas, cell_energy / grid.area,
                        abs(primal - pairing), phi)


# ---------------------------------------------------------------------------
# One-call solve
# ---------------------------------------------------------------------------
@dataclass
class Solution:
    path: str
    grid: QuadGrid
    pairs: Tuple[Pair, ...]
    alpha: float
    problem: Union[SaddleProblem, PsiProblem]
    state: Union[SolverState, PsiResult]
    report: EnergyReport
    wall_time: float = 0.0

    @property
    def n_fields(self) -> int:
        return len(self.pairs)

    @property
    def energy(self) -> float:
        return self.report.energy

    @property
    def status(self) -> SolveStatus:
        return self.state.status

    @property
    def iterations(self) -> int:
        return self.state.iter

    @property
    def history(self) -> List[HistoryEntry]:
        return self.state.history

    @property
    def v(self) -> np.ndarray:
        return self.state.v

    def cell_fields(self) -> np.ndarray:
        return cell_averages(self.grid, self.state.v, self.n_fields)


def build_problem(grid: QuadGrid, pairs: Sequence[Pair], alpha,
                  options: SolverOptions, layout: Optional[PsiLayout] = None):
    if options.path == PHI_PATH:
        return SaddleProblem.build(grid, pairs, alpha, options.gamma)
    return PsiProblem.build(grid, pairs, alpha, layout, options.gamma)


def solve_problem(prob, pairs: Sequence[Pair], options: SolverOptions,
                  warm=None) -> Solution:
    t0 = time.monotonic()
    if isinstance(prob, SaddleProblem):
        state = solve_phi_path(prob, options.stop, warm, options.dykstra_sweeps,
                               options.dykstra_rel_tol)
        path = PHI_PATH
    else:
        state = solve_psi_path(prob, options.stop, warm)
        path = PSI_PATH
    report = energy_report(state, prob)
    return Solution(path, prob.grid, tuple(pairs), prob.alpha, prob, state,
                    report, time.monotonic() - t0)


def solve_pairs(grid: QuadGrid, pairs: Sequence[Pair], alpha,
                options: SolverOptions = SolverOptions(),
                layout: Optional[PsiLayout] = None, warm=None) -> Solution:
    prob = build_problem(grid, pairs, alpha, options, layout)
    return solve_problem(prob, pairs, options, warm)


# ---------------------------------------------------------------------------
# Who goes where
# ---------------------------------------------------------------------------
@dataclass
class PairingResult:
    best: Tuple[int, ...]
    energies: Dict[Tuple[int, ...], float]
    solution: Solution

    @property
    def pairs(self) -> Tuple[Pair, ...]:
        return self.solution.pairs


def unique_assignments(sinks: Sequence[Point]) -> List[Tuple[int, ...]]:
    """Permutations of the sinks, keeping one per distinct list of sink
    positions (repeated sinks make many permutations identical)."""
    seen = set()
    out = []
    for perm in itertools.permutations(range(len(sinks))):
        key = tuple(tuple(map(float, sinks[k])) for k in perm)
        if key not in seen:
            seen.add(key)
            out.append(perm)
    return out


def _solve_assignment(job) -> Tuple[Tuple[int, ...], Solution]:
    perm, prob, pairs, options = job
    return perm, solve_problem(prob, pairs, options)


def who_goes_where(sources: Sequence[Point], sinks: Sequence[Point], alpha,
                   grid: QuadGrid, options: SolverOptions = SolverOptions()) -> PairingResult:
    """Solve one transport problem per distinct assignment of sources to
    sinks and keep the cheapest.  Grid and operators are shared; only the
    right-hand side changes from one assignment to the next."""
    m = len(sources)
    if m != len(sinks) or m < 1:
        raise InvalidInputError(
            f"need as many sources as sinks, got {m} and {len(sinks)}")
    if m > options.permutation_cap:
        raise CapacityError(
            f"{m} sources exceed the permutation cap of {options.permutation_cap}")

    perms = unique_assignments(sinks)
    first = [(sources[i], sinks[perms[0][i]]) for i in range(m)]
    base = build_problem(grid, first, alpha, options)
    jobs = []
    for perm in perms:
        pairs = [(sources[i], sinks[perm[i]]) for i in range(m)]
        jobs.append((perm, base.with_rhs(divergence_rhs(grid, pairs)), pairs, options))

    if options.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=options.workers) as pool:
            results = list(pool.map(_solve_assignment, jobs))
    else:
        results = [_solve_assignment(job) for job in jobs]

    energies: Dict[Tuple[int, ...], float] = {}
    best: Optional[Tuple[Tuple[int, ...], Solution]] = None
    for perm, sol in results:
        energies[perm] = sol.energy
        log.info("PAIRING perm=%s energy=%.9g status=%s",
                 ",".join(map(str, perm)), sol.energy, sol.status.value)
        if best is None or sol.energy < best[1].energy:
            best = (perm, sol)
    return PairingResult(best[0], energies, best[1])
