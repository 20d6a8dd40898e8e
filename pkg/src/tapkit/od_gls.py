"""Initial OD-demand estimation from repeated link-flow counts.

Two-stage generalized least squares: first recover route flows from the
observed link flows and their sample covariance (a nonnegative GLS
quadratic program), then factor the route flows into a row-stochastic
route-choice matrix and per-OD demands.  The network is treated as
uncongested here (route choice independent of flow, routes enumerated at
free-flow costs); the bi-level adjustment stage corrects for congestion
downstream.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from . import paths as P
from .network import DemandVector, FlowState, Network
from .qp import QuadProgram, solve_qp


@dataclass
class GlsResult:
    """Outputs of the full pipeline, kept for reporting."""

    demand: DemandVector
    xi: np.ndarray                 # stacked route flows
    choice_matrix: np.ndarray      # (n_od, n_routes) row-stochastic
    route_set: P.RouteSet
    residual: float                # |P' g - xi|
    qp_status: str

    def to_json(self) -> dict:
        return {
            "demand": self.demand.to_json(),
            "route_flows": [float(v) for v in self.xi],
            "factorization_residual": self.residual,
            "qp_status": self.qp_status,
        }


def sample_covariance(observations: list[FlowState]) -> np.ndarray:
    """Sample covariance of K >= 2 link-flow observations.

    ``S = (1/(K-1)) sum_k (x_k - mean)(x_k - mean)'``.  When the smallest
    eigenvalue is nonpositive (always the case for K - 1 < n_links), the
    matrix is regularized to ``S + lambda I`` with
    ``lambda = 1e-6 trace(S)/n_links`` (floored at 1e-6 for the
    all-identical case) so that the GLS weighting stays invertible.
    """
    K = len(observations)
    if K < 2:
        raise ValueError("sample covariance needs at least two observations")
    X = np.stack([f.x for f in observations])
    centered = X - X.mean(axis=0)
    S = centered.T @ centered / (K - 1)
    if np.linalg.eigvalsh(S).min() <= 0:
        lam = 1e-6 * np.trace(S) / S.shape[0]
        if lam <= 0:
            lam = 1e-6
        S = S + lam * np.eye(S.shape[0])
    return S


def solve_p1(S: np.ndarray, route_set: P.RouteSet,
             observations: list[FlowState]) -> tuple[np.ndarray, str]:
    """Nonnegative GLS route-flow recovery.

    Minimizes ``(K/2) xi' A'S^-1 A xi - (sum_k A'S^-1 x_k)' xi`` over
    ``xi >= 0`` where ``A`` is the link-route incidence.  Returns the
    route-flow vector and the QP status.
    """
    K = len(observations)
    A = route_set.incidence()
    cho = sla.cho_factor(S)
    SinvA = sla.cho_solve(cho, A)
    Q = A.T @ SinvA
    b = sum(SinvA.T @ f.x for f in observations)
    prog = QuadProgram(Q=K * Q, q=-b, lb=np.zeros(A.shape[1]))
    res = solve_qp(prog, tol=1e-9, max_iter=200)
    return np.clip(res.z, 0.0, None), res.status


def solve_p2(xi: np.ndarray, route_set: P.RouteSet) -> tuple[np.ndarray, np.ndarray]:
    """Factor route flows into a route-choice matrix and demands.

    Routes belong to exactly one OD pair, so ``(P'g)_r = p_ir g_i`` and
    row-stochasticity forces ``g_i = sum of xi over the pair's routes``
    with ``p_ir = xi_r / g_i``; the factorization is unique whenever
    ``g_i > 0`` (pairs with zero flow get a uniform row).
    """
    offsets = route_set.od_offsets()
    n_od = len(route_set.per_od)
    g = np.empty(n_od)
    choice = np.zeros((n_od, route_set.n_routes))
    for i in range(n_od):
        lo, hi = offsets[i], offsets[i + 1]
        block = xi[lo:hi]
        g[i] = block.sum()
        if g[i] > 0:
            choice[i, lo:hi] = block / g[i]
        elif hi > lo:
            choice[i, lo:hi] = 1.0 / (hi - lo)
    return choice, g


def estimate_initial_demand(network: Network, observations: list[FlowState],
                            k_routes: int = 3) -> DemandVector:
    """Full pipeline: covariance, route-flow GLS, demand factorization."""
    return run_gls(network, observations, k_routes).demand


def run_gls(network: Network, observations: list[FlowState],
            k_routes: int = 3) -> GlsResult:
    if not observations:
        raise ValueError("no flow observations")
    route_set = P.enumerate_routes(network, k_routes, network.free_flow_time)
    if len(observations) == 1:
        # no covariance information; fall back to unweighted least squares
        S = np.eye(network.n_links)
    else:
        S = sample_covariance(observations)
    xi, status = solve_p1(S, route_set, observations)
    choice, g = solve_p2(xi, route_set)
    residual = float(np.linalg.norm(choice.T @ g - xi))
    return GlsResult(demand=DemandVector(g), xi=xi, choice_matrix=choice,
                     route_set=route_set, residual=residual, qp_status=status)
