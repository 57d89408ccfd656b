"""Numerical calibration certificate.

A per-cell dual ``phi`` certifies a field ``v`` when it lies in K^alpha,
each ``phi_i`` is curl free, and the pairing ``<phi, B v>`` reaches the
energy.  For piecewise-constant ``phi`` the curl is concentrated on the
faces, so the residual reported here is the total tangential jump
``sum_faces |[phi_i . t]| * length`` (largest over fields).  It is zero
only when every tangential jump is, which is stricter than asking the
circulation around each cell corner to vanish: a straight jump line has
zero corner circulations but a nonzero residual.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from app.errors import GridError
from app.grid2d import VERTICAL, QuadGrid, cell_averages
from app.kalpha import check_alpha, max_violation


@dataclass(frozen=True)
class CalibrationReport:
    membership_violation: float
    curl_residual: float
    pairing: float
    energy: float
    gap: float
    certified: bool


def curl_residual(grid: QuadGrid, phi: np.ndarray) -> float:
    """Total variation of the face-concentrated curl, not corner circulations."""
    phi = np.asarray(phi, dtype=float)
    total = np.zeros(phi.shape[2])
    for f, (minus, plus) in enumerate(zip(grid.face_minus, grid.face_plus)):
        # Vertical faces carry the y component as tangential, horizontal the x one.
        d = 1 if grid.face_orient[f] == VERTICAL else 0
        for a in minus:
            for b in plus:
                length = min(grid.h[a], grid.h[b])
                total += length * np.abs(phi[b, d] - phi[a, d])
    return float(total.max()) if total.size else 0.0


def check_calibration(grid: QuadGrid, phi, v, alpha, energy: float,
                      tol: float = 1e-3) -> CalibrationReport:
    alpha = check_alpha(alpha)
    phi = np.asarray(phi, dtype=float)
    if phi.ndim != 3 or phi.shape[0] != grid.n_cells or phi.shape[1] != 2:
        raise GridError(
            f"dual stack of shape {phi.shape} does not live on a grid with "
            f"{grid.n_cells} cells")
    n = phi.shape[2]
    v = np.asarray(v, dtype=float)
    if v.size != n * grid.n_faces:
        raise GridError(
            f"field stack of size {v.size} does not match {n} fields on "
            f"{grid.n_faces} faces")

    violation = float(max_violation(phi, alpha).max())
    curl = curl_residual(grid, phi)
    avg = cell_averages(grid, v, n)
    pairing = float(np.einsum("cdn,cdn,c->", phi, avg, grid.area))
    gap = abs(pairing - float(energy))
    certified = (violation <= tol and curl <= tol
                 and gap <= tol * max(1.0, abs(float(energy))))
    return CalibrationReport(violation, curl, pairing, float(energy), gap, certified)
