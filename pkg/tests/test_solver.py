import numpy as np
import pytest
import scipy.sparse as sp

from app.errors import (CapacityError, DivergenceError, InvalidInputError,
                        LayoutError)
from app.grid2d import PsiLayout, build_uniform
from app.solver import (PHI_PATH, PSI_PATH, ProgressMonitor, HistoryEntry,
                        SaddleProblem, SolverOptions, SolverState, SolveStatus,
                        StoppingRule, PsiProblem, diagonal_steps, pd_step,
                        solve_pairs, solve_phi_path, unique_assignments,
                        who_goes_where)

# Terminals at cell centres of one grid row: the straight path is optimal
# and its discrete energy is 11 cells * h = 0.55.
STRAIGHT = [((0.225, 0.525), (0.775, 0.525))]

# One source feeding two sinks, all at cell centres of a 16x16 grid.
SOURCE = (2.5 / 16, 8.5 / 16)
Y_PAIRS = [(SOURCE, (13.5 / 16, 3.5 / 16)), (SOURCE, (13.5 / 16, 12.5 / 16))]


def test_diagonal_steps():
    tau, sigma = diagonal_steps(sp.csr_matrix([[1.0, 2.0], [0.0, 3.0]]), 1.0)
    np.testing.assert_allclose(tau, [1.0, 0.2])
    np.testing.assert_allclose(sigma, [1 / 3, 1 / 3])
    tau, sigma = diagonal_steps(sp.csr_matrix([[0.0, 2.0], [0.0, 0.0]]), 1.0)
    assert tau[0] == 0.0 and sigma[1] == 0.0


def test_option_validation():
    with pytest.raises(InvalidInputError):
        SolverOptions(path="newton")
    with pytest.raises(InvalidInputError):
        SolverOptions(gamma=2.5)
    with pytest.raises(InvalidInputError):
        StoppingRule(max_iters=0)


@pytest.mark.parametrize("path", [PSI_PATH, PHI_PATH])
def test_straight_transport(path, quick_stop):
    sol = solve_pairs(build_uniform(20), STRAIGHT, 0.5,
                      SolverOptions(path=path, stop=quick_stop))
    assert sol.path == path
    assert sol.energy == pytest.approx(0.55, rel=2e-2)
    assert sol.report.feasibility < 1e-3
    assert sol.history and sol.history[-1].iter == sol.iterations
    # mass only moves along the row of the terminals
    density = sol.report.density.reshape(20, 20)
    assert density[10].sum() > 0.9 * density.sum()


def test_phi_path_reports_gap_for_single_field(quick_stop):
    grid = build_uniform(8)
    prob = SaddleProblem.build(grid, [((0.3, 0.3), (0.7, 0.7))], 0.5)
    state = solve_phi_path(prob, quick_stop)
    assert state.history[-1].gap == pytest.approx(abs(state.history[-1].energy
                                                     - state.history[-1].pairing))


def test_pd_step_from_zero_moves_only_the_multipliers():
    prob = SaddleProblem.build(build_uniform(6), Y_PAIRS, 0.5)
    rest = pd_step(SolverState.zeros(prob), prob.with_rhs(np.zeros_like(prob.rhs)))
    assert not rest.v.any() and not rest.phi.any() and not rest.lam.any()

    step = pd_step(SolverState.zeros(prob), prob)
    assert step.iter == 1
    assert not step.v.any() and not step.phi.any()
    np.testing.assert_allclose(step.lam, -prob.sigma_tilde * prob.rhs)
    assert step.lam.any()


TIGHT_STOP = StoppingRule(max_iters=200000, eps_feas=1e-7, eps_rel=1e-8, window=100)


@pytest.mark.parametrize("alpha", [pytest.param(0.0, marks=pytest.mark.slow),
                                   pytest.param(0.5, marks=pytest.mark.slow),
                                   1.0])
def test_phi_and_psi_paths_agree(alpha):
    grid = build_uniform(16)
    psi = solve_pairs(grid, Y_PAIRS, alpha, SolverOptions(path=PSI_PATH, stop=TIGHT_STOP))
    phi = solve_pairs(grid, Y_PAIRS, alpha, SolverOptions(path=PHI_PATH, stop=TIGHT_STOP))
    assert phi.energy == pytest.approx(psi.energy, rel=1e-2)


def test_energy_scales_with_the_terminals(psi_options):
    full = solve_pairs(build_uniform(16), Y_PAIRS, 0.5, psi_options)
    # the layout shrunk by 1/2 into the lower-left quarter of a grid twice as fine
    half_pairs = [tuple((x / 2, y / 2) for x, y in pair) for pair in Y_PAIRS]
    half = solve_pairs(build_uniform(32), half_pairs, 0.5, psi_options)
    assert half.energy == pytest.approx(0.5 * full.energy, rel=2e-2)


def test_energies_are_nonnegative_along_history(psi_options):
    sol = solve_pairs(build_uniform(10), STRAIGHT, 0.3, psi_options)
    assert all(h.energy >= 0.0 for h in sol.history)


def test_who_goes_where_prefers_parallel_routes(psi_options):
    sources = [(0.25, 0.35), (0.25, 0.65)]
    sinks = [(0.75, 0.35), (0.75, 0.65)]
    res = who_goes_where(sources, sinks, 1.0, build_uniform(10), psi_options)
    assert res.best == (0, 1)
    assert set(res.energies) == {(0, 1), (1, 0)}
    assert res.energies[(0, 1)] < res.energies[(1, 0)]
    assert res.pairs == ((sources[0], sinks[0]), (sources[1], sinks[1]))


def test_who_goes_where_limits():
    grid = build_uniform(40)
    pts = [(0.1 + 0.1 * k, 0.2) for k in range(8)]
    with pytest.raises(CapacityError):
        who_goes_where(pts, [(p[0], 0.8) for p in pts], 0.5, grid)
    with pytest.raises(InvalidInputError):
        who_goes_where(pts[:2], pts[2:5], 0.5, grid)


def test_unique_assignments_skip_repeated_sinks():
    a, b = (0.9, 0.2), (0.9, 0.45)
    assert len(unique_assignments([a, a, b, b])) == 6
    assert len(unique_assignments([a, b, (0.5, 0.5)])) == 6


def test_layout_that_drops_a_terminal_is_rejected():
    grid = build_uniform(6)
    pairs = [((0.1, 0.1), (0.9, 0.9)), ((0.1, 0.9), (0.9, 0.1))]
    lists = [[1, 2, 3]] * grid.n_cells
    src = grid.locate(pairs[1][0])
    lists = [m if c != src else [1] for c, m in enumerate(lists)]
    with pytest.raises(LayoutError) as info:
        PsiProblem.build(grid, pairs, 0.5, PsiLayout.from_lists(2, lists))
    assert info.value.flagged == [(src, 1)]


def test_runaway_iterates_raise():
    stop = StoppingRule(max_iters=10, window=1, divergence_limit=1e-3)
    with pytest.raises(DivergenceError):
        solve_pairs(build_uniform(6), [((0.1, 0.5), (0.9, 0.5))], 0.5,
                    SolverOptions(path=PHI_PATH, stop=stop))


def test_budget_exhaustion_is_a_status():
    stop = StoppingRule(max_iters=3, window=1)
    sol = solve_pairs(build_uniform(6), [((0.1, 0.5), (0.9, 0.5))], 0.5,
                      SolverOptions(stop=stop))
    assert sol.status == SolveStatus.MAX_ITERS
    assert sol.iterations == 3


def test_progress_lines_are_logged(caplog):
    monitor = ProgressMonitor(StoppingRule(window=1), "psi_path")
    with caplog.at_level("INFO", logger="app.solver"):
        done = monitor.check(HistoryEntry(1, 1.0, 1.0, 1.0, 0.0, 0.0), 1.0)
    assert not done
    assert "PROGRESS path=psi_path iter=1" in caplog.text
    assert monitor.check(HistoryEntry(2, 1.0, 1.0, 1e-9, 0.0, 0.0), 1.0)
