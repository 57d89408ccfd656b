"""Relaxed Steiner tree and irrigation solver.

* :mod:`app.kalpha` and :mod:`app.calibration` — the convex set of dual
  matrices, its projections and the optimality certificate.
* :mod:`app.grid2d` — quadtree staggered grids and their operators.
* :mod:`app.solver` / :mod:`app.refine` — primal-dual solvers and the
  adaptive outer loop.
* :mod:`app.graph_steiner` — the relaxation on embedded graphs.
* :mod:`app.config_manager`, :mod:`app.runner`, :mod:`app.render` —
  problem files, orchestration and artifacts.

Nothing here configures logging; only ``run.py`` does.
"""
