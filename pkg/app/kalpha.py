"""Geometry of the constraint set K^alpha.

A point of K^alpha is a ``d x n`` matrix ``q`` (one column per field) such
that for every nonempty column subset ``J``::

    || sum_{j in J} q_j ||_2  <=  |J| ** alpha

Subsets are encoded as integer bitmasks (bit ``k`` set means column ``k``
belongs to ``J``) and are always visited in ascending mask order so that
projections are reproducible run to run.

* **Slab projection** — closed form, see :func:`project_slab`.
* **Intersection projection** — Dykstra over all ``2**n - 1`` slabs,
  batched over cells (:func:`project_kalpha_cells`).  ``n == 1`` and
  ``alpha == 1`` reduce to column-wise radial projections and skip the loop.
* **Graph flow norm** and its dual ball, used by the graph solver.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Optional, Tuple

import numpy as np

from app.errors import CapacityError, InvalidInputError

log = logging.getLogger(__name__)

COLUMN_CAP = 24
DYKSTRA_TOL = 1e-9
DYKSTRA_MAX_SWEEPS = 500

# Cells evaluated at once when scanning every subset for violations.
_VIOLATION_CHUNK = 1 << 22

_TINY = 1e-300


# ---------------------------------------------------------------------------
# Subsets
# ---------------------------------------------------------------------------
def check_alpha(alpha) -> float:
    try:
        a = float(alpha)
    except (TypeError, ValueError):
        raise InvalidInputError(f"alpha must be a number in [0, 1], got {alpha!r}")
    if not math.isfinite(a) or not 0.0 <= a <= 1.0:
        raise InvalidInputError(f"alpha must lie in [0, 1], got {alpha!r}")
    return a


def popcount(mask: int) -> int:
    return bin(int(mask)).count("1")


def subset_mask(columns: Iterable[int]) -> int:
    """Bitmask of a set of 0-based column indices."""
    mask = 0
    for c in columns:
        mask |= 1 << int(c)
    return mask


def subset_members(mask: int) -> Tuple[int, ...]:
    mask = int(mask)
    out = []
    k = 0
    while mask:
        if mask & 1:
            out.append(k)
        mask >>= 1
        k += 1
    return tuple(out)


@lru_cache(maxsize=32)
def subset_table(n_cols: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(masks, indicator, cardinalities)`` for all nonempty subsets.

    ``indicator[s, k]`` is 1.0 when column ``k`` belongs to subset ``s``.
    """
    masks = np.arange(1, 1 << n_cols, dtype=np.int64)
    indicator = ((masks[:, None] >> np.arange(n_cols)) & 1).astype(float)
    cards = indicator.sum(axis=1).astype(np.int64)
    indicator.setflags(write=False)
    return masks, indicator, cards


def slab_bound(mask: int, alpha) -> float:
    """``|J| ** alpha`` with the convention ``0 ** 0 == 1`` never needed
    (``J`` is nonempty), so ``alpha == 0`` bounds every slab by 1."""
    if int(mask) <= 0:
        raise InvalidInputError("subset must be nonempty")
    return float(popcount(mask)) ** check_alpha(alpha)


def _as_matrix(q) -> np.ndarray:
    q = np.array(q, dtype=float)
    if q.ndim == 1:
        q = q[:, None]
    if q.ndim != 2 or q.shape[0] < 1 or q.shape[1] < 1:
        raise InvalidInputError(f"expected a d x n matrix, got shape {q.shape}")
    if not np.all(np.isfinite(q)):
        raise InvalidInputError("matrix entries must be finite")
    return q


def _check_cap(n_cols: int, cap: int) -> None:
    if n_cols > cap:
        raise CapacityError(
            f"{n_cols} columns exceed the subset enumeration cap of {cap}")


def _subset_sums(q: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Column sums of every subset, indexed by bitmask (row 0 is empty)."""
    sums = np.zeros((1, q.shape[0]))
    cards = np.zeros(1, dtype=np.int64)
    for k in range(q.shape[1]):
        sums = np.concatenate([sums, sums + q[:, k]])
        cards = np.concatenate([cards, cards + 1])
    return sums, cards


# ---------------------------------------------------------------------------
# Membership and single-slab projection
# ---------------------------------------------------------------------------
def membership(q, alpha, tol: float = 0.0,
               cap: int = COLUMN_CAP) -> Tuple[bool, Optional[int]]:
    """``(True, None)`` if ``q`` lies in K^alpha up to ``tol``, otherwise
    ``(False, J)`` with ``J`` the mask of a most-violated slab."""
    if tol < 0:
        raise InvalidInputError("tol must be nonnegative")
    alpha = check_alpha(alpha)
    q = _as_matrix(q)
    _check_cap(q.shape[1], cap)
    sums, cards = _subset_sums(q)
    excess = np.linalg.norm(sums[1:], axis=1) - cards[1:].astype(float) ** alpha
    worst = int(np.argmax(excess))
    if excess[worst] <= tol:
        return True, None
    return False, worst + 1


def project_slab(q, mask: int, alpha) -> np.ndarray:
    p = _as_matrix(q)
    members = list(subset_members(mask))
    if not members:
        raise InvalidInputError("subset must be nonempty")
    if members[-1] >= p.shape[1]:
        raise InvalidInputError(
            f"subset {mask:#b} references columns beyond n={p.shape[1]}")
    bound = slab_bound(mask, alpha)
    v = p[:, members].sum(axis=1)
    nv = float(np.linalg.norm(v))
    if nv <= bound or nv == 0.0:
        return p
    p[:, members] -= ((nv - bound) / (len(members) * nv) * v)[:, None]
    return p


# ---------------------------------------------------------------------------
# Dykstra on the intersection
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class Projection:
    point: np.ndarray
    converged: bool
    sweeps: int
    change: float
    slack: float


def max_violation(batch: np.ndarray, alpha) -> np.ndarray:
    """Per-cell ``max_J (||sum_J q_j|| - |J|**alpha)^+`` for ``(m, d, n)``."""
    alpha = check_alpha(alpha)
    batch = np.asarray(batch, dtype=float)
    m, _, n = batch.shape
    _, indicator, cards = subset_table(n)
    bounds = cards.astype(float) ** alpha
    out = np.zeros(m)
    step = max(1, _VIOLATION_CHUNK // max(1, len(cards) * batch.shape[1]))
    for start in range(0, m, step):
        sums = np.einsum("mdn,sn->msd", batch[start:start + step], indicator)
        excess = np.linalg.norm(sums, axis=2) - bounds
        out[start:start + step] = np.maximum(excess.max(axis=1), 0.0)
    return out


def _radial(batch: np.ndarray) -> np.ndarray:
    """Project every column of ``(m, d, n)`` onto the unit disk."""
    norms = np.linalg.norm(batch, axis=1, keepdims=True)
    return batch / np.maximum(norms, 1.0)


def _dykstra(p: np.ndarray, alpha: float, tol: float,
             max_sweeps: int) -> Tuple[np.ndarray, bool, int, float]:
    m, d, n = p.shape
    masks, _, cards = subset_table(n)
    members = [np.array(subset_members(s), dtype=np.intp) for s in masks]
    bounds = cards.astype(float) ** alpha
    # One d-vector per (subset, cell): the correction is the same on every
    # column of J and zero elsewhere.
    corr = np.zeros((len(masks), m, d))
    change = math.inf
    for sweep in range(1, max_sweeps + 1):
        prev = p.copy()
        for s, cols in enumerate(members):
            card = cards[s]
            c = corr[s]
            v = p[:, :, cols].sum(axis=2) + card * c
            nv = np.linalg.norm(v, axis=1)
            scale = np.where(nv > bounds[s],
                             (nv - bounds[s]) / (card * np.maximum(nv, _TINY)), 0.0)
            u = v * scale[:, None]
            p[:, :, cols] += (c - u)[:, :, None]
            corr[s] = u
        change = float(np.linalg.norm(p - prev))
        if change < tol:
            return p, True, sweep, change
    return p, False, max_sweeps, change


def project_kalpha_cells(batch, alpha, tol: float = DYKSTRA_TOL,
                         max_sweeps: int = DYKSTRA_MAX_SWEEPS,
                         cap: int = COLUMN_CAP,
                         with_slack: bool = True,
                         report_budget: bool = True) -> Projection:
    """Project each ``d x n`` slice of an ``(m, d, n)`` stack onto K^alpha.

    ``change`` is the Frobenius change of the whole stack over the last
    sweep; ``slack`` the largest remaining slab violation (``nan`` when
    ``with_slack`` is off).  Callers in a hot loop pass
    ``report_budget=False`` and report sweep-cap hits themselves.
    """
    alpha = check_alpha(alpha)
    if tol <= 0:
        raise InvalidInputError("tol must be positive")
    if max_sweeps < 1:
        raise InvalidInputError("max_sweeps must be >= 1")
    p = np.array(batch, dtype=float)
    if p.ndim != 3:
        raise InvalidInputError(f"expected an (m, d, n) stack, got shape {p.shape}")
    n = p.shape[2]
    _check_cap(n, cap)
    if p.shape[0] == 0:
        return Projection(p, True, 0, 0.0, 0.0)

    if n == 1 or alpha == 1.0:
        # Slabs with |J| > 1 are implied by the column disks here.
        point, converged, sweeps, change = _radial(p), True, 1, 0.0
    else:
        point, converged, sweeps, change = _dykstra(p, alpha, tol, max_sweeps)

    slack = float(max_violation(point, alpha).max()) if with_slack else math.nan
    if not converged and report_budget:
        log.info("DYKSTRA_BUDGET sweeps=%d change=%.3e tol=%.3e",
                 sweeps, change, tol)
    return Projection(point, converged, sweeps, change, slack)


def project_kalpha(q, alpha, tol: float = DYKSTRA_TOL,
                   max_sweeps: int = DYKSTRA_MAX_SWEEPS,
                   cap: int = COLUMN_CAP) -> Projection:
    """Euclidean projection of one ``d x n`` matrix onto K^alpha."""
    q = _as_matrix(q)
    res = project_kalpha_cells(q[None], alpha, tol, max_sweeps, cap)
    return Projection(res.point[0], res.converged, res.sweeps,
                      res.change, res.slack)


# ---------------------------------------------------------------------------
# Graph flow norm and its dual
# ---------------------------------------------------------------------------
def flow_norm(v, axis: int = -1):
    """``max(v^+) + max(v^-)``: shared same-sign flow is paid once."""
    v = np.asarray(v, dtype=float)
    out = np.maximum(v, 0.0).max(axis=axis) + np.maximum(-v, 0.0).max(axis=axis)
    return float(out) if np.ndim(out) == 0 else out


def dual_norm_star(w, axis: int = -1):
    w = np.asarray(w, dtype=float)
    out = np.maximum(np.maximum(w, 0.0).sum(axis=axis),
                     np.maximum(-w, 0.0).sum(axis=axis))
    return float(out) if np.ndim(out) == 0 else out


def _shrink_positive(rows: np.ndarray) -> np.ndarray:
    """Project each row onto ``{x : sum(x^+) <= 1}`` (water-filling on the
    positive coordinates, negative coordinates untouched)."""
    pos = np.maximum(rows, 0.0)
    over = pos.sum(axis=1) > 1.0
    if not np.any(over):
        return rows.copy()
    out = rows.copy()
    u = -np.sort(-pos[over], axis=1)
    css = np.cumsum(u, axis=1) - 1.0
    ind = np.arange(1, u.shape[1] + 1)
    rho = np.count_nonzero(u - css / ind > 0, axis=1)
    theta = css[np.arange(len(rho)), rho - 1] / rho
    sub = rows[over]
    out[over] = np.where(sub > 0, np.maximum(sub - theta[:, None], 0.0), sub)
    return out


def project_dual_ball(w, tol: float = DYKSTRA_TOL,
                      max_sweeps: int = DYKSTRA_MAX_SWEEPS) -> Projection:
    """Projection onto ``{sum(w^+) <= 1, sum(w^-) <= 1}``, row-wise for 2-D
    input, by Dykstra between the two half-constraints."""
    if tol <= 0:
        raise InvalidInputError("tol must be positive")
    w = np.array(w, dtype=float)
    single = w.ndim == 1
    x = w[None] if single else w
    if x.ndim != 2:
        raise InvalidInputError(f"expected a vector or row stack, got shape {w.shape}")
    corr_pos = np.zeros_like(x)
    corr_neg = np.zeros_like(x)
    converged = False
    change = math.inf
    sweep = 0
    for sweep in range(1, max_sweeps + 1):
        y = _shrink_positive(x + corr_pos)
        corr_pos = x + corr_pos - y
        nxt = -_shrink_positive(-(y + corr_neg))
        corr_neg = y + corr_neg - nxt
        change = float(np.linalg.norm(nxt - x))
        x = nxt
        if change < tol:
            converged = True
            break
    excess = np.maximum(dual_norm_star(x, axis=1) - 1.0, 0.0)
    slack = float(excess.max()) if excess.size else 0.0
    return Projection(x[0] if single else x, converged, sweep, change, slack)


# ---------------------------------------------------------------------------
# Support function on rank-one points
# ---------------------------------------------------------------------------
def support_rank_one(tau, g, alpha) -> float:
    """Support value at ``tau (x) g`` for a unit ``tau`` and binary ``g``:
    the number of active fields raised to ``alpha``."""
    alpha = check_alpha(alpha)
    tau = np.asarray(tau, dtype=float)
    if abs(float(np.linalg.norm(tau)) - 1.0) > 1e-12:
        raise InvalidInputError("tau must be a unit vector")
    g = np.asarray(g, dtype=float)
    if not np.all((g == 0.0) | (g == 1.0)):
        raise InvalidInputError("g must be a 0/1 vector")
    count = int(g.sum())
    return float(count) ** alpha if count else 0.0
