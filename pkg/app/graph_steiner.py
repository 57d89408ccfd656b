"""Steiner trees on embedded graphs.

The graph relaxation sends one unit flow from each terminal ``P_i`` to the
last terminal ``P_N`` and pays ``sum_e l(e) * flow_norm(V(e))``, where the
flow norm counts same-sign flow on an edge once.  Kirchhoff conditions
are assembled per field; orientation of an edge is ``u -> v`` for the
stored pair ``(u, v)``.

* ``method="pd"`` — preconditioned primal-dual, per-edge duals projected
  on the flow-norm dual ball.
* ``method="lp"`` — the linearization with ``s_e >= max(V(e)^+)`` and
  ``i_e <= -max(V(e)^-)`` solved by HiGHS through scipy.
* :func:`exact_steiner_dp` — exact Steiner tree over terminal subsets for
  small terminal sets, used to check the relaxation.

Crossing edges of k-NN graphs are not split into vertices.
"""
from __future__ import annotations

import heapq
import logging
import math
import time
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog
from scipy.spatial import cKDTree

from app.errors import (CapacityError, DivergenceError, GeometryError,
                        GraphDisconnectedError, InvalidInputError)
from app.grid2d import ConstraintSystem
from app.kalpha import flow_norm, project_dual_ball
from app.solver import (HistoryEntry, ProgressMonitor, SolveStatus, StoppingRule,
                        diagonal_steps)

log = logging.getLogger(__name__)

GRAPH_METHODS = ("pd", "lp")
SCATTER_MODES = ("grid", "random")
DP_TERMINAL_CAP = 10


# ---------------------------------------------------------------------------
# Graph
# ---------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class EmbeddedGraph:
    points: np.ndarray
    edges: np.ndarray
    terminals: Tuple[int, ...]

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 2)
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "terminals", tuple(int(t) for t in self.terminals))
        nv = len(pts)
        if len(self.terminals) < 2:
            raise InvalidInputError("a Steiner instance needs at least two terminals")
        if len(set(self.terminals)) != len(self.terminals):
            raise InvalidInputError("terminal indices must be distinct")
        if any(not 0 <= t < nv for t in self.terminals):
            raise InvalidInputError("terminal index out of range")
        if edges.size and (edges.min() < 0 or edges.max() >= nv):
            raise InvalidInputError("edge endpoint out of range")
        if np.any(edges[:, 0] == edges[:, 1]):
            raise GeometryError("self-loops are not allowed")
        undirected = {tuple(sorted(e)) for e in edges.tolist()}
        if len(undirected) != len(edges):
            raise GeometryError("duplicate edges are not allowed")
        if np.any(self.lengths <= 0):
            raise GeometryError("every edge needs positive length")

    @property
    def n_vertices(self) -> int:
        return len(self.points)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def n_fields(self) -> int:
        return len(self.terminals) - 1

    @cached_property
    def lengths(self) -> np.ndarray:
        d = self.points[self.edges[:, 1]] - self.points[self.edges[:, 0]]
        return np.linalg.norm(d, axis=1)

    def directions(self) -> np.ndarray:
        d = self.points[self.edges[:, 1]] - self.points[self.edges[:, 0]]
        return d / self.lengths[:, None]

    def to_networkx(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(range(self.n_vertices))
        for k, ((u, v), length) in enumerate(zip(self.edges.tolist(), self.lengths)):
            g.add_edge(u, v, length=float(length), index=k)
        return g

    def is_connected(self) -> bool:
        return nx.is_connected(self.to_networkx())

    def flipped(self, edge_ids: Iterable[int]) -> "EmbeddedGraph":
        edges = self.edges.copy()
        ids = list(edge_ids)
        edges[ids] = edges[ids][:, ::-1]
        return EmbeddedGraph(self.points, edges, self.terminals)


def scatter_points(k: int, mode: str = "grid",
                   rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """``k`` points in the unit square: a regular ``sqrt(k) x sqrt(k)``
    lattice including the boundary, or uniform random."""
    if mode not in SCATTER_MODES:
        raise InvalidInputError(f"unknown scatter mode {mode!r}")
    if k < 1:
        raise InvalidInputError("need at least one scatter point")
    if mode == "grid":
        side = math.isqrt(k)
        if side * side != k or side < 2:
            raise InvalidInputError(f"grid scatter needs a square count >= 4, got {k}")
        ax = np.linspace(0.0, 1.0, side)
        xx, yy = np.meshgrid(ax, ax)
        return np.column_stack([xx.ravel(), yy.ravel()])
    rng = rng if rng is not None else np.random.default_rng(0)
    return rng.random((k, 2))


def knn_graph(points, m: int, terminals: Optional[Sequence[int]] = None) -> EmbeddedGraph:
    """Join each point to its ``m`` nearest neighbours (undirected, deduplicated)."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if m < 1:
        raise InvalidInputError("M must be >= 1")
    if len(pts) < 2:
        raise InvalidInputError("need at least two points")
    tree = cKDTree(pts)
    if tree.query_pairs(0.0):
        raise GeometryError("points must be distinct")
    k = min(m + 1, len(pts))
    _, idx = tree.query(pts, k=k)
    idx = np.asarray(idx).reshape(len(pts), k)
    pairs = set()
    for u in range(len(pts)):
        for v in idx[u, 1:]:
            v = int(v)
            if v != u:
                pairs.add((min(u, v), max(u, v)))
    edges = np.array(sorted(pairs), dtype=np.int64).reshape(-1, 2)
    terms = tuple(range(len(pts))) if terminals is None else tuple(terminals)
    g = EmbeddedGraph(pts, edges, terms)
    comps = nx.number_connected_components(g.to_networkx())
    if comps > 1:
        raise GraphDisconnectedError(
            f"k-NN graph with M={m} has {comps} components; raise M")
    return g


def terminal_scatter_graph(terminals, k: int, m: int, mode: str = "grid",
                           seed: int = 0) -> EmbeddedGraph:
    """Terminals first (sink last), then scatter points, joined by k-NN."""
    terms = np.asarray(terminals, dtype=float).reshape(-1, 2)
    scatter = (scatter_points(k, mode, np.random.default_rng(seed)) if k
               else np.zeros((0, 2)))
    if len(scatter):
        d, _ = cKDTree(terms).query(scatter)
        scatter = scatter[d > 1e-12]
    pts = np.vstack([terms, scatter])
    return knn_graph(pts, m, terminals=range(len(terms)))


def assemble_kirchhoff(g: EmbeddedGraph) -> ConstraintSystem:
    """Per field, +1 on edges leaving a vertex and -1 on edges entering it;
    rhs +1 at ``P_i`` and -1 at the sink."""
    nv, ne, n = g.n_vertices, g.n_edges, g.n_fields
    cols = np.arange(ne)
    inc = sp.csr_matrix(
        (np.concatenate([np.ones(ne), -np.ones(ne)]),
         (np.concatenate([g.edges[:, 0], g.edges[:, 1]]), np.concatenate([cols, cols]))),
        shape=(nv, ne))
    matrix = sp.kron(sp.identity(n, format="csr"), inc, format="csr")
    rhs = np.zeros(n * nv)
    sink = g.terminals[-1]
    for i in range(n):
        rhs[i * nv + g.terminals[i]] += 1.0
        rhs[i * nv + sink] -= 1.0
    meta = np.column_stack([np.repeat(np.arange(n), nv), np.tile(np.arange(nv), n)])
    return ConstraintSystem(matrix, rhs, meta)


# ---------------------------------------------------------------------------
# Relaxation
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class GraphOptions:
    method: str = "pd"
    gamma: float = 0.6
    stop: StoppingRule = field(default_factory=StoppingRule)
    support_floor: float = 1e-4
    scatter: str = "grid"
    k_points: int = 1681
    neighbors: int = 30

    def __post_init__(self):
        if self.method not in GRAPH_METHODS:
            raise InvalidInputError(f"unknown graph method {self.method!r}")
        if self.scatter not in SCATTER_MODES:
            raise InvalidInputError(f"unknown scatter mode {self.scatter!r}")
        if not 0.0 <= self.gamma <= 2.0:
            raise InvalidInputError("gamma must lie in [0, 2]")
        if self.support_floor < 0 or self.k_points < 0 or self.neighbors < 1:
            raise InvalidInputError("invalid graph parameters")


@dataclass
class FlowSolution:
    flows: np.ndarray               # (n_edges, n_fields)
    energy: float
    support: Tuple[int, ...]
    status: SolveStatus
    residual: float
    iterations: int = 0
    method: str = "pd"
    history: List[HistoryEntry] = field(default_factory=list)
    wall_time: float = 0.0


def flow_energy(g: EmbeddedGraph, flows: np.ndarray) -> float:
    flows = np.asarray(flows, dtype=float).reshape(g.n_edges, g.n_fields)
    return float(g.lengths @ flow_norm(flows, axis=1)) if g.n_edges else 0.0


def support_edges(flows: np.ndarray, floor: float) -> Tuple[int, ...]:
    mag = np.abs(np.asarray(flows, dtype=float)).max(axis=1)
    top = float(mag.max(initial=0.0))
    if top == 0.0:
        return ()
    return tuple(int(e) for e in np.nonzero(mag > floor * top)[0])


@dataclass(frozen=True)
class LinearProgram:
    """``min c.x`` s.t. ``A_ub x <= b_ub``, ``A_eq x = b_eq``, bounds; the
    variables are ``[V (field-major), s, i]``."""
    c: np.ndarray
    a_ub: sp.csr_matrix
    b_ub: np.ndarray
    a_eq: sp.csr_matrix
    b_eq: np.ndarray
    bounds: Tuple[Tuple[Optional[float], Optional[float]], ...]
    names: Tuple[str, ...]
    row_names_ub: Tuple[str, ...]
    row_names_eq: Tuple[str, ...]


def lp_program(g: EmbeddedGraph) -> LinearProgram:
    ne, n, nv = g.n_edges, g.n_fields, g.n_vertices
    kirch = assemble_kirchhoff(g)
    nflow = n * ne
    eye = sp.identity(nflow, format="csr")
    spread = sp.kron(np.ones((n, 1)), sp.identity(ne), format="csr")
    zero = sp.csr_matrix((nflow, ne))
    a_ub = sp.vstack([sp.hstack([eye, -spread, zero]),
                      sp.hstack([-eye, zero, spread])], format="csr")
    a_eq = sp.hstack([kirch.matrix, sp.csr_matrix((kirch.n_rows, 2 * ne))], format="csr")
    c = np.concatenate([np.zeros(nflow), g.lengths, -g.lengths])
    bounds = (((None, None),) * nflow + ((0.0, None),) * ne + ((None, 0.0),) * ne)
    names = tuple([f"V{i}_{e}" for i in range(n) for e in range(ne)]
                  + [f"s{e}" for e in range(ne)] + [f"i{e}" for e in range(ne)])
    ub_names = tuple([f"up{i}_{e}" for i in range(n) for e in range(ne)]
                     + [f"lo{i}_{e}" for i in range(n) for e in range(ne)])
    eq_names = tuple(f"k{i}_{v}" for i in range(n) for v in range(nv))
    return LinearProgram(c, a_ub, np.zeros(2 * nflow), a_eq, kirch.rhs, bounds,
                         names, ub_names, eq_names)


def _solve_lp(g: EmbeddedGraph, options: GraphOptions) -> FlowSolution:
    prog = lp_program(g)
    res = linprog(prog.c, A_ub=prog.a_ub, b_ub=prog.b_ub, A_eq=prog.a_eq,
                  b_eq=prog.b_eq, bounds=list(prog.bounds), method="highs")
    nflow = g.n_fields * g.n_edges
    if res.x is None:
        # a connected graph always admits a flow
        raise DivergenceError(f"LP solve failed (status {res.status}): {res.message}")
    flows = res.x[:nflow].reshape(g.n_fields, g.n_edges).T
    status = SolveStatus.CONVERGED if res.status == 0 else SolveStatus.MAX_ITERS
    kirch = assemble_kirchhoff(g)
    return FlowSolution(flows, flow_energy(g, flows),
                        support_edges(flows, options.support_floor), status,
                        kirch.residual(flows.T.ravel()), int(getattr(res, "nit", 0)),
                        "lp")


def _solve_pd(g: EmbeddedGraph, options: GraphOptions) -> FlowSolution:
    n, ne = g.n_fields, g.n_edges
    kirch = assemble_kirchhoff(g)
    A, b = kirch.matrix, kirch.rhs
    ell = np.tile(g.lengths, n)
    tau, _ = diagonal_steps(sp.vstack([sp.diags(ell), A]), options.gamma)
    sigma_w = ell ** -options.gamma
    _, sigma_l = diagonal_steps(A, options.gamma)

    x = np.zeros(n * ne)
    w = np.zeros(n * ne)
    lam = np.zeros(A.shape[0])
    stop = options.stop
    monitor = ProgressMonitor(stop, "graph")
    history: List[HistoryEntry] = []
    status = SolveStatus.MAX_ITERS
    it = 0
    for it in range(1, stop.max_iters + 1):
        x_new = x - tau * (ell * w + A.T @ lam)
        bar = 2.0 * x_new - x
        rows = (w + sigma_w * ell * bar).reshape(n, ne).T
        w = project_dual_ball(rows, tol=1e-12, max_sweeps=20).point.T.ravel()
        lam = lam + sigma_l * (A @ bar - b)
        x = x_new
        if it % stop.window and it != stop.max_iters:
            continue
        flows = x.reshape(n, ne).T
        energy = flow_energy(g, flows)
        pairing = float(w @ (ell * x))
        entry = HistoryEntry(it, energy, pairing, kirch.residual(x), 0.0,
                             abs(energy - pairing))
        history.append(entry)
        magnitude = max(np.abs(x).max(initial=0.0), np.abs(lam).max(initial=0.0))
        if monitor.check(entry, magnitude):
            status = SolveStatus.CONVERGED
            break
    flows = x.reshape(n, ne).T.copy()
    return FlowSolution(flows, flow_energy(g, flows),
                        support_edges(flows, options.support_floor), status,
                        kirch.residual(x), it, "pd", history)


def solve_graph(g: EmbeddedGraph, options: GraphOptions = GraphOptions()) -> FlowSolution:
    if not g.is_connected():
        raise GraphDisconnectedError("graph is not connected")
    t0 = time.monotonic()
    sol = _solve_lp(g, options) if options.method == "lp" else _solve_pd(g, options)
    sol.wall_time = time.monotonic() - t0
    log.info("graph solve: method=%s status=%s energy=%.9g residual=%.3e support=%d",
             sol.method, sol.status.value, sol.energy, sol.residual, len(sol.support))
    return sol


# ---------------------------------------------------------------------------
# Exact Steiner tree
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class SteinerTree:
    edges: Tuple[int, ...]
    length: float


def exact_steiner_dp(g: EmbeddedGraph, cap: int = DP_TERMINAL_CAP) -> SteinerTree:
    """Minimum Steiner tree by dynamic programming over terminal subsets,
    with a multi-source Dijkstra relaxation per subset."""
    if len(g.terminals) > cap:
        raise CapacityError(
            f"{len(g.terminals)} terminals exceed the exact-solver cap of {cap}")
    nv = g.n_vertices
    adj: List[List[Tuple[int, float, int]]] = [[] for _ in range(nv)]
    for e, ((u, v), length) in enumerate(zip(g.edges.tolist(), g.lengths)):
        adj[u].append((v, float(length), e))
        adj[v].append((u, float(length), e))

    terms = g.terminals[:-1]
    root = g.terminals[-1]
    k = len(terms)
    full = (1 << k) - 1
    cost = np.full((full + 1, nv), np.inf)
    split = np.full((full + 1, nv), -1, dtype=np.int64)
    pred_v = np.full((full + 1, nv), -1, dtype=np.int64)
    pred_e = np.full((full + 1, nv), -1, dtype=np.int64)

    for mask in range(1, full + 1):
        if mask & (mask - 1) == 0:
            cost[mask, terms[mask.bit_length() - 1]] = 0.0
        else:
            low = mask & -mask
            sub = (mask - 1) & mask
            while sub:
                # Each unordered split once: the part holding the lowest bit.
                if sub & low:
                    cand = cost[sub] + cost[mask ^ sub]
                    better = cand < cost[mask]
                    cost[mask, better] = cand[better]
                    split[mask, better] = sub
                sub = (sub - 1) & mask
        dist = cost[mask]
        heap = [(float(d), int(v)) for v, d in enumerate(dist) if np.isfinite(d)]
        heapq.heapify(heap)
        while heap:
            d, u = heapq.heappop(heap)
            if d > dist[u]:
                continue
            for w, length, e in adj[u]:
                nd = d + length
                if nd < dist[w]:
                    dist[w] = nd
                    pred_v[mask, w] = u
                    pred_e[mask, w] = e
                    split[mask, w] = -1
                    heapq.heappush(heap, (nd, w))

    if not np.isfinite(cost[full, root]):
        raise GraphDisconnectedError("terminals are not connected")
    chosen = set()
    stack = [(full, root)]
    while stack:
        mask, v = stack.pop()
        if pred_e[mask, v] >= 0:
            chosen.add(int(pred_e[mask, v]))
            stack.append((mask, int(pred_v[mask, v])))
        elif split[mask, v] >= 0:
            sub = int(split[mask, v])
            stack.append((sub, v))
            stack.append((mask ^ sub, v))
    edges = tuple(sorted(chosen))
    return SteinerTree(edges, float(g.lengths[list(edges)].sum()) if edges else 0.0)
