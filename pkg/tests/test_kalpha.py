import math

import numpy as np
import pytest

from app.errors import CapacityError, InvalidInputError
from app.kalpha import (check_alpha, dual_norm_star, flow_norm, max_violation,
                        membership, project_dual_ball, project_kalpha,
                        project_kalpha_cells, project_slab, slab_bound,
                        subset_mask, subset_members, subset_table,
                        support_rank_one)


# ---------------------------------------------------------------------------
# Subsets
# ---------------------------------------------------------------------------
def test_check_alpha_names_the_bound():
    with pytest.raises(InvalidInputError, match=r"\[0, 1\]"):
        check_alpha(1.5)
    with pytest.raises(InvalidInputError):
        check_alpha(-0.1)
    with pytest.raises(InvalidInputError):
        check_alpha(float("nan"))
    assert check_alpha(0) == 0.0


def test_subset_encoding():
    assert subset_mask([0, 2]) == 5
    assert subset_members(5) == (0, 2)
    masks, indicator, cards = subset_table(3)
    assert masks.tolist() == list(range(1, 8))
    assert cards.tolist() == [1, 1, 2, 1, 2, 2, 3]
    assert indicator[4].tolist() == [1.0, 0.0, 1.0]


def test_slab_bound_alpha_zero_is_one():
    assert slab_bound(0b111, 0.0) == 1.0
    assert slab_bound(0b11, 0.5) == pytest.approx(math.sqrt(2))
    with pytest.raises(InvalidInputError):
        slab_bound(0, 0.5)


# ---------------------------------------------------------------------------
# Membership and slabs
# ---------------------------------------------------------------------------
def test_membership_reports_violated_subset():
    aligned = np.array([[1.0, 1.0], [0.0, 0.0]])
    ok, mask = membership(aligned, 0.0)
    assert not ok and mask == 0b11
    assert membership(aligned, 1.0) == (True, None)
    assert membership(np.zeros((2, 3)), 0.3) == (True, None)


def test_membership_cap():
    with pytest.raises(CapacityError):
        membership(np.zeros((2, 25)), 0.5)


def test_project_slab_only_touches_members():
    q = np.array([[2.0, 0.5, 3.0], [0.0, 0.5, 0.0]])
    p = project_slab(q, 0b001, 0.5)
    assert np.linalg.norm(p[:, 0]) == pytest.approx(1.0)
    np.testing.assert_array_equal(p[:, 1:], q[:, 1:])
    np.testing.assert_allclose(project_slab(p, 0b001, 0.5), p)


# ---------------------------------------------------------------------------
# Projection onto K^alpha
# ---------------------------------------------------------------------------
@pytest.mark.parametrize("alpha", [0.0, 0.3, 0.7])
@pytest.mark.parametrize("n", [2, 3, 4])
def test_projection_is_feasible_and_idempotent(alpha, n):
    rng = np.random.default_rng(17 + n)
    q = 2.0 * rng.normal(size=(2, n))
    res = project_kalpha(q, alpha)
    assert res.converged
    assert res.slack <= 1e-7
    again = project_kalpha(res.point, alpha)
    np.testing.assert_allclose(again.point, res.point, atol=1e-7)


@pytest.mark.parametrize("alpha", [0.0, 0.5])
def test_projection_variational_inequality(alpha):
    rng = np.random.default_rng(3)
    q = 3.0 * rng.normal(size=(2, 3))
    p = project_kalpha(q, alpha, tol=1e-12, max_sweeps=5000).point
    # <q - p, z - p> <= 0 for every z in K^alpha
    for _ in range(50):
        z = project_kalpha(2.0 * rng.normal(size=(2, 3)), alpha).point
        assert np.sum((q - p) * (z - p)) <= 1e-6


def test_fast_paths_are_columnwise_radial():
    q = np.array([[3.0, 0.2], [4.0, 0.1]])
    out = project_kalpha(q, 1.0)
    np.testing.assert_allclose(out.point[:, 0], [0.6, 0.8])
    np.testing.assert_allclose(out.point[:, 1], q[:, 1])
    assert out.sweeps == 1
    single = project_kalpha_cells(np.array([[[3.0], [4.0]]]), 0.2)
    np.testing.assert_allclose(single.point[0, :, 0], [0.6, 0.8])


def test_batched_projection_matches_single():
    rng = np.random.default_rng(5)
    batch = rng.normal(size=(6, 2, 3)) * 2.0
    stacked = project_kalpha_cells(batch, 0.4).point
    for k in range(6):
        np.testing.assert_allclose(stacked[k], project_kalpha(batch[k], 0.4).point,
                                   atol=1e-8)
    assert max_violation(stacked, 0.4).max() <= 1e-7


def test_sweep_budget_is_reported_not_raised(caplog):
    q = 5.0 * np.ones((2, 4))
    with caplog.at_level("INFO", logger="app.kalpha"):
        res = project_kalpha(q, 0.2, tol=1e-14, max_sweeps=2)
    assert not res.converged
    assert res.sweeps == 2
    budget = [r for r in caplog.records if r.getMessage().startswith("DYKSTRA_BUDGET")]
    assert len(budget) == 1 and budget[0].levelname == "INFO"
    caplog.clear()
    with caplog.at_level("INFO", logger="app.kalpha"):
        project_kalpha_cells(q[None], 0.2, tol=1e-14, max_sweeps=2, report_budget=False)
    assert "DYKSTRA_BUDGET" not in caplog.text


@pytest.mark.parametrize("n", [2, 3, 4])
def test_alpha_one_membership_is_columnwise(n):
    rng = np.random.default_rng(40 + n)
    for _ in range(200):
        q = rng.uniform(-1.0, 1.0, size=(2, n))
        ok, _ = membership(q, 1.0)
        assert ok == bool(np.all(np.linalg.norm(q, axis=0) <= 1.0))


@pytest.mark.parametrize("n", [2, 3, 4])
def test_projection_against_cvxpy(n):
    cp = pytest.importorskip("cvxpy")
    rng = np.random.default_rng(11 + n)
    for _ in range(10):
        alpha = float(rng.uniform(0.0, 1.0))
        q = 2.0 * rng.normal(size=(2, n))
        x = cp.Variable((2, n))
        masks, indicator, cards = subset_table(n)
        cons = [cp.norm(x @ indicator[s], 2) <= float(cards[s]) ** alpha
                for s in range(len(masks))]
        cp.Problem(cp.Minimize(cp.sum_squares(x - q)), cons).solve()
        ours = project_kalpha(q, alpha, tol=1e-12, max_sweeps=20000).point
        assert np.linalg.norm(ours - x.value) <= 1e-5


# ---------------------------------------------------------------------------
# Flow norm and dual ball
# ---------------------------------------------------------------------------
def test_flow_norm_charges_shared_flow_once():
    assert flow_norm([1.0, 1.0]) == 1.0
    assert flow_norm([1.0, -1.0]) == 2.0
    assert flow_norm([0.5, 1.0, -0.3]) == pytest.approx(1.3)
    np.testing.assert_allclose(flow_norm(np.array([[1, 1], [0, -2]]), axis=1), [1, 2])


def test_dual_norm_star():
    assert dual_norm_star([0.5, 0.25, -1.0]) == pytest.approx(1.0)
    assert dual_norm_star([0.0, 0.0]) == 0.0


@pytest.mark.parametrize("norm", [flow_norm, dual_norm_star], ids=["flow", "dual"])
@pytest.mark.parametrize("scale", [0.0, 2.5, -0.7])
def test_norms_are_absolutely_homogeneous(norm, scale):
    rng = np.random.default_rng(21)
    for _ in range(50):
        v = rng.normal(size=4)
        assert norm(scale * v) == pytest.approx(abs(scale) * norm(v), abs=1e-12)


@pytest.mark.parametrize("norm", [flow_norm, dual_norm_star], ids=["flow", "dual"])
def test_norms_satisfy_the_triangle_inequality(norm):
    rng = np.random.default_rng(22)
    for _ in range(200):
        a, b = rng.normal(size=(2, 5))
        assert norm(a + b) <= norm(a) + norm(b) + 1e-12


def _dual_ball_samples(rng, k, count):
    """The extreme points ``e_i``, ``-e_j``, ``e_i - e_j`` plus random points
    of the ball, ``count`` in total."""
    eye = np.eye(k)
    corners = [eye[i] for i in range(k)] + [-eye[j] for j in range(k)]
    corners += [eye[i] - eye[j] for i in range(k) for j in range(k) if i != j]
    inner = rng.normal(size=(count - len(corners), k))
    inner *= rng.random((len(inner), 1)) / dual_norm_star(inner, axis=1)[:, None]
    return np.vstack([corners, inner])


@pytest.mark.parametrize("k", [2, 3, 4])
def test_flow_norm_is_dual_to_the_dual_ball(k):
    rng = np.random.default_rng(23 + k)
    for _ in range(20):
        v = rng.normal(size=k)
        w = _dual_ball_samples(rng, k, 200)
        assert np.all(dual_norm_star(w, axis=1) <= 1.0 + 1e-12)
        best = float((w @ v).max())
        assert flow_norm(v) >= best - 1e-12
        assert best >= 0.95 * flow_norm(v)


def test_dual_ball_projection():
    rng = np.random.default_rng(2)
    w = 2.0 * rng.normal(size=(10, 5))
    res = project_dual_ball(w, tol=1e-13, max_sweeps=5000)
    assert res.slack <= 1e-9
    np.testing.assert_allclose(project_dual_ball(res.point).point, res.point, atol=1e-9)
    inside = np.array([0.2, -0.3, 0.1])
    np.testing.assert_allclose(project_dual_ball(inside).point, inside)


def test_dual_ball_against_cvxpy():
    cp = pytest.importorskip("cvxpy")
    rng = np.random.default_rng(8)
    for _ in range(20):
        k = int(rng.integers(2, 6))
        w = 2.0 * rng.normal(size=k)
        x = cp.Variable(k)
        cons = [cp.sum(cp.pos(x)) <= 1, cp.sum(cp.neg(x)) <= 1]
        cp.Problem(cp.Minimize(cp.sum_squares(x - w)), cons).solve()
        ours = project_dual_ball(w, tol=1e-13, max_sweeps=20000).point
        assert np.linalg.norm(ours - x.value) <= 1e-5


# ---------------------------------------------------------------------------
# Rank-one support values
# ---------------------------------------------------------------------------
def test_support_rank_one():
    assert support_rank_one([0.0, 1.0], [1, 1, 0], 0.5) == pytest.approx(math.sqrt(2))
    assert support_rank_one([1.0, 0.0], [1, 1, 1], 0.0) == 1.0
    assert support_rank_one([1.0, 0.0], [0, 0], 0.3) == 0.0
    with pytest.raises(InvalidInputError):
        support_rank_one([2.0, 0.0], [1], 0.5)
    with pytest.raises(InvalidInputError):
        support_rank_one([1.0, 0.0], [0.5, 1], 0.5)
