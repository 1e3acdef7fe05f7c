"""Pose graph built from LiDAR odometry, optimized with Levenberg-Marquardt.

Node 0 (or ``fixed_node``) is the gauge anchor and is removed from the
variable set. Edge residuals come from :func:`geometry.edge_error_arrays`;
Jacobians are central finite differences evaluated for all edges at once,
and the damped normal equations are solved with a sparse LU factorization.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .geometry import Pose6D, compose, edge_error_arrays, wrap_angle

log = logging.getLogger(__name__)

ODOMETRY = "odometry"
LOOP = "loop"


class GraphError(ValueError):
    pass


@dataclass
class GraphNode:
    id: int
    estimate: Pose6D
    timestamp: float = 0.0


@dataclass
class GraphEdge:
    from_id: int
    to_id: int
    measurement: Pose6D
    information: np.ndarray
    kind: str = ODOMETRY
    flagged: bool = False  # set for edges from non-converged registrations

    def __post_init__(self):
        if self.from_id == self.to_id:
            raise GraphError("edge endpoints must differ")
        if self.kind not in (ODOMETRY, LOOP):
            raise GraphError(f"unknown edge kind {self.kind!r}")
        omega = np.asarray(self.information, dtype=float)
        if omega.shape != (6, 6) or not np.allclose(omega, omega.T, atol=1e-12):
            raise GraphError("information must be a symmetric 6x6 matrix")
        try:
            np.linalg.cholesky(omega)
        except np.linalg.LinAlgError:
            raise GraphError("information matrix is not positive definite") from None
        self.information = omega


@dataclass
class PoseGraph:
    nodes: list = field(default_factory=list)
    edges: list = field(default_factory=list)
    fixed_node: int = 0

    def add_node(self, estimate: Pose6D, timestamp: float = 0.0) -> int:
        nid = len(self.nodes)
        self.nodes.append(GraphNode(nid, estimate, float(timestamp)))
        return nid

    def add_edge(self, edge: GraphEdge) -> None:
        n = len(self.nodes)
        if not (0 <= edge.from_id < n and 0 <= edge.to_id < n):
            raise GraphError(f"edge ({edge.from_id}, {edge.to_id}) references a missing node")
        self.edges.append(edge)

    def estimates(self) -> np.ndarray:
        return np.array([nd.estimate.as_array() for nd in self.nodes]).reshape(-1, 6)

    @property
    def flagged_edges(self) -> int:
        return sum(e.flagged for e in self.edges)

    def copy_with(self, estimates: np.ndarray) -> "PoseGraph":
        nodes = [GraphNode(nd.id, Pose6D.from_array(x), nd.timestamp)
                 for nd, x in zip(self.nodes, estimates)]
        return PoseGraph(nodes, list(self.edges), self.fixed_node)


def add_odometry(graph: PoseGraph, result, omega: np.ndarray, timestamp: float | None = None) -> int:
    """Append a node at ``last @ result.transform`` and the odometry edge to it.

    ``result`` is a RegistrationResult (or a bare Pose6D, taken as converged).
    Non-converged results still produce an edge, flagged for reporting.
    """
    if not graph.nodes:
        raise GraphError("graph has no initial node")
    transform = getattr(result, "transform", result)
    converged = bool(getattr(result, "converged", True))
    last = graph.nodes[-1]
    if timestamp is None:
        timestamp = last.timestamp
    nid = graph.add_node(compose(last.estimate, transform), timestamp)
    graph.add_edge(GraphEdge(last.id, nid, transform, omega, ODOMETRY, flagged=not converged))
    return nid


def add_loop(graph: PoseGraph, from_id: int, to_id: int, measurement: Pose6D,
             omega: np.ndarray) -> None:
    graph.add_edge(GraphEdge(from_id, to_id, measurement, omega, LOOP))


def _edge_arrays(graph: PoseGraph):
    ii = np.array([e.from_id for e in graph.edges], dtype=np.int64)
    jj = np.array([e.to_id for e in graph.edges], dtype=np.int64)
    z = np.array([e.measurement.as_array() for e in graph.edges]).reshape(-1, 6)
    om = np.array([e.information for e in graph.edges]).reshape(-1, 6, 6)
    return ii, jj, z, om


def _cost(x, ii, jj, z, om) -> float:
    if len(ii) == 0:
        return 0.0
    e = edge_error_arrays(x[ii], x[jj], z)
    return float(np.einsum("ni,nij,nj->", e, om, e))


def graph_cost(graph: PoseGraph) -> float:
    """Sum over edges of e^T Omega e."""
    return _cost(graph.estimates(), *_edge_arrays(graph))


@dataclass(frozen=True)
class OptimizerConfig:
    initial_damping: float = 1e-4
    damping_factor: float = 10.0
    relative_tolerance: float = 1e-9
    max_iterations: int = 100
    fd_step: float = 1e-6
    max_damping: float = 1e12


@dataclass
class OptimizationReport:
    costs: list  # cost after every accepted iteration, starting with the initial cost
    iterations: int
    accepted: int
    converged: bool
    reason: str

    @property
    def initial_cost(self) -> float:
        return self.costs[0]

    @property
    def final_cost(self) -> float:
        return self.costs[-1]


def _jacobians(x, ii, jj, z, h):
    """d e / d x_i and d e / d x_j for every edge, by central differences."""
    xi, xj = x[ii], x[jj]
    n = len(ii)
    Ji = np.empty((n, 6, 6))
    Jj = np.empty((n, 6, 6))
    for k in range(6):
        d = np.zeros(6)
        d[k] = h
        for src, J, other, first in ((xi, Ji, xj, True), (xj, Jj, xi, False)):
            if first:
                ep = edge_error_arrays(src + d, other, z)
                em = edge_error_arrays(src - d, other, z)
            else:
                ep = edge_error_arrays(other, src + d, z)
                em = edge_error_arrays(other, src - d, z)
            diff = ep - em
            diff[:, 3:] = wrap_angle(diff[:, 3:])
            J[:, :, k] = diff / (2 * h)
    return Ji, Jj


def _normal_equations(x, ii, jj, z, om, var_index, nvar, h):
    e = edge_error_arrays(x[ii], x[jj], z)
    Ji, Jj = _jacobians(x, ii, jj, z, h)
    J = np.concatenate([Ji, Jj], axis=2)  # (E, 6, 12)
    OJ = np.einsum("nab,nbc->nac", om, J)
    H = np.einsum("nab,nac->nbc", J, OJ)  # (E, 12, 12)
    g = np.einsum("nab,na->nb", OJ, e)  # (E, 12)

    blocks = np.stack([var_index[ii], var_index[jj]], axis=1)  # (E, 2), -1 = fixed
    col = blocks[:, :, None] * 6 + np.arange(6)[None, None, :]  # (E, 2, 6)
    col = col.reshape(-1, 12)
    valid = np.repeat(blocks >= 0, 6, axis=1)  # (E, 12)
    rr = np.broadcast_to(col[:, :, None], H.shape)
    cc = np.broadcast_to(col[:, None, :], H.shape)
    keep = valid[:, :, None] & valid[:, None, :]
    size = 6 * nvar
    Hs = sp.coo_matrix((H[keep], (rr[keep], cc[keep])), shape=(size, size)).tocsc()
    b = np.bincount(col[valid], weights=g[valid], minlength=size)
    return Hs, b


def optimize(graph: PoseGraph, cfg: OptimizerConfig | None = None):
    """Levenberg-Marquardt on the graph cost. Returns (optimized graph, report)."""
    cfg = cfg or OptimizerConfig()
    n = len(graph.nodes)
    if n == 0:
        raise GraphError("empty graph")
    if not 0 <= graph.fixed_node < n:
        raise GraphError("fixed node does not exist")
    x = graph.estimates().copy()
    ii, jj, z, om = _edge_arrays(graph)
    cost = _cost(x, ii, jj, z, om)
    costs = [cost]
    if n == 1:
        return graph.copy_with(x), OptimizationReport(costs, 0, 0, True, "single node")

    var_index = np.full(n, -1, dtype=np.int64)
    free = [k for k in range(n) if k != graph.fixed_node]
    var_index[free] = np.arange(len(free))
    touched = np.zeros(n, dtype=bool)
    touched[ii] = touched[jj] = True
    if not np.all(touched[free]):
        raise GraphError("rank-deficient graph")

    lam = cfg.initial_damping
    iterations = accepted = 0
    converged = False
    reason = "max iterations"
    if cost == 0.0:
        return graph.copy_with(x), OptimizationReport(costs, 0, 0, True, "zero cost")

    H = b = None
    while iterations < cfg.max_iterations:
        if H is None:
            H, b = _normal_equations(x, ii, jj, z, om, var_index, len(free), cfg.fd_step)
            diag = H.diagonal()
            if np.any(diag <= 0.0) or not np.all(np.isfinite(diag)):
                raise GraphError("rank-deficient graph")
        iterations += 1
        A = H + sp.diags(lam * diag, format="csc")
        try:
            step = splu(A).solve(-b)
        except RuntimeError:
            raise GraphError("rank-deficient graph") from None
        if not np.all(np.isfinite(step)):
            raise GraphError("rank-deficient graph")
        x_new = x.copy()
        x_new[free] += step.reshape(-1, 6)
        x_new[:, 3:] = wrap_angle(x_new[:, 3:])
        new_cost = _cost(x_new, ii, jj, z, om)
        if new_cost < cost:
            decrease = (cost - new_cost) / cost
            x, cost = x_new, new_cost
            costs.append(cost)
            accepted += 1
            lam = max(lam / cfg.damping_factor, 1e-15)
            H = None
            if decrease < cfg.relative_tolerance or cost == 0.0:
                converged, reason = True, "relative decrease below tolerance"
                break
        else:
            lam *= cfg.damping_factor
            if lam > cfg.max_damping:
                converged, reason = True, "no further decrease"
                break
    log.debug("LM: %d iterations, %d accepted, cost %.6g -> %.6g (%s)",
              iterations, accepted, costs[0], cost, reason)
    return graph.copy_with(x), OptimizationReport(costs, iterations, accepted, converged, reason)


def write_graph(path, graph: PoseGraph) -> None:
    """``NODE id tx ty tz rx ry rz`` and ``EDGE from to tx ty tz rx ry rz w_p w_r`` lines."""
    lines = []
    for nd in graph.nodes:
        lines.append("NODE %d " % nd.id + " ".join("%.17g" % v for v in nd.estimate.as_array()))
    for e in graph.edges:
        vals = list(e.measurement.as_array()) + [e.information[0, 0], e.information[3, 3]]
        lines.append("EDGE %d %d " % (e.from_id, e.to_id) + " ".join("%.17g" % v for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def read_graph(path) -> PoseGraph:
    """Inverse of :func:`write_graph`. Edges between consecutive ids are odometry, others loops."""
    nodes, edges = {}, []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "NODE" and len(parts) == 8:
                nodes[int(parts[1])] = Pose6D.from_array([float(v) for v in parts[2:]])
            elif parts[0] == "EDGE" and len(parts) == 11:
                i, j = int(parts[1]), int(parts[2])
                vals = [float(v) for v in parts[3:]]
                omega = np.diag([vals[6]] * 3 + [vals[7]] * 3)
                kind = ODOMETRY if j == i + 1 else LOOP
                edges.append(GraphEdge(i, j, Pose6D.from_array(vals[:6]), omega, kind))
            else:
                raise ValueError("unrecognized record")
        except (ValueError, GraphError) as exc:
            raise GraphError(f"{path}:{lineno}: {exc}") from None
    ids = sorted(nodes)
    if ids != list(range(len(ids))):
        raise GraphError(f"{path}: node ids must be dense from 0")
    graph = PoseGraph()
    for k in ids:
        graph.add_node(nodes[k])
    for e in edges:
        graph.add_edge(e)
    return graph
