"""Forward-problem solvers: user equilibrium and social optimum.

Two solvers are provided.  The method of successive averages (MSA) follows
the classic recipe: all-or-nothing assignment at current travel times,
then a ``1/iter`` averaging step, stopping on the relative gap
``|x_l - x_{l-1}| / |x_l|``.  The Frank-Wolfe solver minimizes the
Beckmann potential with an exact line search and certifies its answer
with the duality-based relative gap; by default it sharpens the search
direction with a conjugate combination of all-or-nothing targets, which
reaches tight gaps (1e-8 and beyond) orders of magnitude faster than the
plain direction while keeping every Frank-Wolfe guarantee (feasible
targets, descent, monotone objective, valid lower bound).

The social optimum reuses the same machinery: replacing the congestion
polynomial ``f`` by ``f(z) + z f'(z)`` (coefficient-wise ``(i+1) beta_i``)
turns the Beckmann potential into the total latency, so a user-equilibrium
solve under marginal costs is exactly a total-latency minimization.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .latency import CongestionFactor
from .network import DemandVector, FlowState, Network


class SolverFailure(Exception):
    """A solver could not produce a usable flow (bad costs, no progress)."""


@dataclass
class SolverReport:
    """Outcome of an equilibrium solve, including convergence traces."""

    flow: FlowState
    iterations: int
    relative_gap: np.ndarray
    objective: np.ndarray
    wall_time: float
    converged: bool
    tolerance: float
    algorithm: str
    objective_label: str = "beckmann"

    @property
    def final_gap(self) -> float:
        return float(self.relative_gap[-1]) if len(self.relative_gap) else 0.0

    @property
    def final_objective(self) -> float:
        return float(self.objective[-1]) if len(self.objective) else 0.0

    def to_json(self) -> dict:
        return {
            "algorithm": self.algorithm,
            "iterations": self.iterations,
            "converged": self.converged,
            "tolerance": self.tolerance,
            "final_relative_gap": self.final_gap,
            "objective_label": self.objective_label,
            "final_objective": self.final_objective,
            "wall_time_sec": self.wall_time,
            "flow": [float(v) for v in self.flow.x],
        }

    def write_trace_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("iteration,relative_gap,objective\n")
            for i in range(self.iterations):
                fh.write(f"{i + 1},{self.relative_gap[i]:.17g},{self.objective[i]:.17g}\n")


def _marginal_factor(cf: CongestionFactor) -> CongestionFactor:
    """Congestion factor of the marginal cost: coefficients ``(i+1) beta_i``."""
    return CongestionFactor(beta=tuple((i + 1) * b for i, b in enumerate(cf.beta)))


class _Problem:
    """Preassembled kernel arrays and workspace for one (network, demand, cost) instance."""

    def __init__(self, network: Network, demand: DemandVector, cf: CongestionFactor):
        if len(demand) != network.n_od:
            raise ValueError("demand vector length does not match the network's OD pairs")
        self.network = network
        self.demand = demand
        self.cf = cf
        self.beta = np.asarray(cf.beta, dtype=float)
        self.t0 = network.free_flow_time.astype(float)
        self.m = network.capacity.astype(float)
        self.indptr, self.heads, self.links = K.build_csr(network)
        (self.orig_nodes, self.orig_ptr, self.dests,
         self.dems, self.perm) = K.group_by_origin(network.od_pairs, demand.values)
        self.link_tails = network.tail.astype(np.int64)
        self.total_demand = float(demand.values.sum())
        self._y = np.empty(network.n_links)
        self._dist = np.empty(network.n_nodes)
        self._pred = np.empty(network.n_nodes, dtype=np.int64)
        self._hkey = np.empty(network.n_links + 2, dtype=np.float64)
        self._hnode = np.empty(network.n_links + 2, dtype=np.int64)

    def costs(self, x: np.ndarray) -> np.ndarray:
        out = np.empty(self.network.n_links)
        K.link_costs(self.t0, self.m, self.beta, x, out)
        if out.min() <= 0.0:
            raise SolverFailure("nonpositive link travel time encountered")
        return out

    def slopes(self, x: np.ndarray) -> np.ndarray:
        out = np.empty(self.network.n_links)
        K.link_cost_slopes(self.t0, self.m, self.beta, x, out)
        return out

    def beckmann(self, x: np.ndarray) -> float:
        return float(K.beckmann_total(self.t0, self.m, self.beta, x))

    def aon(self, cost: np.ndarray):
        """Fresh all-or-nothing flow and its demand-weighted shortest-route cost."""
        sptt = K.aon_into(self.indptr, self.heads, self.links, self.link_tails,
                          cost, self.orig_nodes, self.orig_ptr, self.dests, self.dems,
                          self._y, self._dist, self._pred, self._hkey, self._hnode)
        return self._y.copy(), float(sptt)

    def aon_by_od(self, cost: np.ndarray, buf: np.ndarray):
        sptt = K.aon_by_od_into(self.indptr, self.heads, self.links, self.link_tails,
                                cost, self.orig_nodes, self.orig_ptr, self.dests, self.dems,
                                self._y, buf, self._dist, self._pred, self._hkey, self._hnode)
        return self._y.copy(), float(sptt)

    def ungroup_rows(self, grouped: np.ndarray) -> np.ndarray:
        out = np.empty_like(grouped)
        out[self.perm] = grouped
        return out


def solve_ue_msa(network: Network, demand: DemandVector, cf: CongestionFactor,
                 eps: float = 1e-6, max_iter: int = 5000,
                 track_by_od: bool = False) -> SolverReport:
    """User equilibrium by the method of successive averages.

    ``eps`` is the relative-gap tolerance; when the iteration cap is hit
    first the best (latest) iterate is returned with ``converged=False``.
    With ``track_by_od`` the averaged per-OD decomposition is recorded
    (slower; intended for diagnostics such as the Wardrop check).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    p = _Problem(network, demand, cf)
    start = time.perf_counter()
    if not track_by_od:
        x, rg, obj, iters, status = K.msa_loop(
            p.indptr, p.heads, p.links, p.link_tails, p.t0, p.m, p.beta,
            p.orig_nodes, p.orig_ptr, p.dests, p.dems, eps, max_iter,
        )
        if status == K.STATUS_BAD_COST:
            raise SolverFailure("nonpositive link travel time encountered")
        return SolverReport(
            flow=FlowState(x=x), iterations=int(iters),
            relative_gap=np.asarray(rg), objective=np.asarray(obj),
            wall_time=time.perf_counter() - start,
            converged=status == K.STATUS_OK, tolerance=eps, algorithm="msa",
        )

    x = np.zeros(network.n_links)
    D = np.zeros((network.n_od, network.n_links))
    buf = np.empty_like(D)
    rg_trace, obj_trace = [], []
    converged = False
    it = 0
    for ell in range(1, max_iter + 1):
        cost = p.costs(x)
        y, _ = p.aon_by_od(cost, buf)
        lam = 1.0 / ell
        x_new = x + lam * (y - x)
        D += lam * (buf - D)
        nrm = np.linalg.norm(x_new)
        rg = 0.0 if nrm == 0.0 else float(np.linalg.norm(x_new - x) / nrm)
        x = x_new
        rg_trace.append(rg)
        obj_trace.append(p.beckmann(x))
        it = ell
        if rg < eps:
            converged = True
            break
    return SolverReport(
        flow=FlowState(x=x, by_od=p.ungroup_rows(D)), iterations=it,
        relative_gap=np.asarray(rg_trace), objective=np.asarray(obj_trace),
        wall_time=time.perf_counter() - start,
        converged=converged, tolerance=eps, algorithm="msa",
    )


def _conjugate_coefficients(h, x, y, s1, s2):
    """Weights (a, b, c) of a feasible target ``a y + b s1 + c s2`` whose
    direction is conjugate (w.r.t. the diagonal cost-slope weights ``h``)
    to the previous one or two search directions.

    Falls back from the two-condition solve to the single-condition one,
    and returns None when no valid convex combination exists.
    """
    v = y - x
    u1 = s1 - x
    hv, hu1 = h * v, h * u1
    if s2 is not None:
        u2 = s2 - x
        hu2 = h * u2
        M = np.array([
            [float(v @ hu1), float(u1 @ hu1), float(u2 @ hu1)],
            [float(v @ hu2), float(u1 @ hu2), float(u2 @ hu2)],
            [1.0, 1.0, 1.0],
        ])
        try:
            sol = np.linalg.solve(M, np.array([0.0, 0.0, 1.0]))
            if np.all(sol >= -1e-12) and np.all(np.abs(sol) < 1e8) and sol[0] > 1e-12:
                sol = np.clip(sol, 0.0, None)
                sol /= sol.sum()
                return float(sol[0]), float(sol[1]), float(sol[2])
        except np.linalg.LinAlgError:
            pass
    uhv = float(u1 @ hv)
    uhu = float(u1 @ hu1)
    denom = uhv - uhu
    if abs(denom) < 1e-300:
        return None
    alpha = min(max(uhv / denom, 0.0), 0.99)
    if alpha == 0.0:
        return None
    return 1.0 - alpha, alpha, 0.0


def _solve_fw(p: _Problem, rel_gap: float, max_iter: int, track_by_od: bool,
              conjugate: bool, x0: np.ndarray | None, algorithm: str,
              objective_label: str) -> SolverReport:
    start = time.perf_counter()
    n_od, n_links = p.network.n_od, p.network.n_links

    if p.total_demand == 0.0:
        flow = FlowState(x=np.zeros(n_links),
                         by_od=np.zeros((n_od, n_links)) if track_by_od else None)
        return SolverReport(flow=flow, iterations=0,
                            relative_gap=np.empty(0), objective=np.empty(0),
                            wall_time=time.perf_counter() - start, converged=True,
                            tolerance=rel_gap, algorithm=algorithm,
                            objective_label=objective_label)

    D_x = D_s = buf = None
    if track_by_od:
        buf = np.empty((n_od, n_links))

    if x0 is not None:
        x = np.asarray(x0, dtype=float).copy()
        if track_by_od:
            raise ValueError("warm starts cannot carry a per-OD decomposition")
    else:
        cost = p.costs(np.zeros(n_links))
        if track_by_od:
            x, _ = p.aon_by_od(cost, buf)
            D_x = buf.copy()
        else:
            x, _ = p.aon(cost)

    s1 = s2 = None          # targets used at the previous two iterations
    D_s1 = D_s2 = None
    obj = p.beckmann(x)
    rg_trace, obj_trace = [], []
    converged = False
    it = 0
    for ell in range(1, max_iter + 1):
        cost = p.costs(x)
        if track_by_od:
            y, sptt = p.aon_by_od(cost, buf)
        else:
            y, sptt = p.aon(cost)
        tt = float(x @ cost)
        gap = (tt - float(sptt)) / tt
        rg_trace.append(gap)
        obj_trace.append(obj)
        it = ell
        if gap < rel_gap:
            converged = True
            break

        s, coef = y, None
        if conjugate and s1 is not None:
            h = p.slopes(x)
            coef = _conjugate_coefficients(h, x, y, s1, s2)
            if coef is not None:
                a, b, c = coef
                cand = a * y + b * s1 + (c * s2 if s2 is not None else 0.0)
                if float(cost @ (cand - x)) < 0.0:
                    s = cand
                else:
                    coef = None
        d = s - x
        theta = float(K.exact_line_search(p.t0, p.m, p.beta, x, d))
        if theta <= 0.0 and coef is not None:
            # conjugate target stalled; retry the plain direction
            s, coef = y, None
            d = s - x
            theta = float(K.exact_line_search(p.t0, p.m, p.beta, x, d))
        if theta <= 0.0:
            break
        x = x + theta * d
        new_obj = p.beckmann(x)
        assert new_obj <= obj * (1 + 1e-12) + 1e-9, "line search increased the objective"
        obj = new_obj
        if track_by_od:
            if coef is None:
                D_target = buf.copy()
            else:
                a, b, c = coef
                D_target = a * buf + b * D_s1 + (c * D_s2 if D_s2 is not None else 0.0)
            D_x = (1.0 - theta) * D_x + theta * D_target
            D_s2, D_s1 = D_s1, D_target
        s2, s1 = s1, s

    flow = FlowState(x=x, by_od=p.ungroup_rows(D_x) if track_by_od else None)
    return SolverReport(flow=flow, iterations=it,
                        relative_gap=np.asarray(rg_trace), objective=np.asarray(obj_trace),
                        wall_time=time.perf_counter() - start, converged=converged,
                        tolerance=rel_gap, algorithm=algorithm,
                        objective_label=objective_label)


def solve_ue_fw(network: Network, demand: DemandVector, cf: CongestionFactor,
                rel_gap: float = 1e-6, max_iter: int = 2000,
                track_by_od: bool = False, conjugate: bool = True,
                x0: np.ndarray | None = None) -> SolverReport:
    """User equilibrium by Frank-Wolfe with exact bisection line search.

    Stops when ``(sum x t(x) - sum g * shortest_cost) / sum x t(x)`` drops
    below ``rel_gap``; that quantity is a certified optimality bound for
    the Beckmann program.  ``x0`` warm-starts from any feasible flow
    (feasibility does not depend on the cost parameters).
    """
    if rel_gap <= 0:
        raise ValueError("rel_gap must be positive")
    p = _Problem(network, demand, cf)
    return _solve_fw(p, rel_gap, max_iter, track_by_od, conjugate, x0,
                     algorithm="fw", objective_label="beckmann")


def solve_so(network: Network, demand: DemandVector, cf: CongestionFactor,
             rel_gap: float = 1e-6, max_iter: int = 2000,
             track_by_od: bool = False, conjugate: bool = True,
             x0: np.ndarray | None = None) -> SolverReport:
    """Socially optimal flows: total-latency minimization via marginal costs.

    Identical machinery to :func:`solve_ue_fw` under the transformed
    congestion polynomial; the reported objective trace is the total
    latency ``sum_a x_a t_a(x_a)``.
    """
    if rel_gap <= 0:
        raise ValueError("rel_gap must be positive")
    p = _Problem(network, demand, _marginal_factor(cf))
    return _solve_fw(p, rel_gap, max_iter, track_by_od, conjugate, x0,
                     algorithm="so-fw", objective_label="total_latency")


@dataclass
class WardropCheck:
    """Per-OD route-cost spread of a flow decomposition at its own travel times."""

    min_cost: np.ndarray
    max_used_cost: np.ndarray
    tol: float
    passed: bool
    worst_od: int
    worst_excess: float

    def to_json(self) -> dict:
        return {
            "passed": self.passed,
            "tol": self.tol,
            "worst_od": self.worst_od,
            "worst_relative_excess": self.worst_excess,
            "min_cost": [float(v) for v in self.min_cost],
            "max_used_cost": [float(v) for v in self.max_used_cost],
        }


def _positive_path(outgoing, resid, origin, dest, thresh):
    """DFS for a simple path through links with residual flow above ``thresh``."""
    stack = [(origin, iter(sorted(outgoing[origin])))]
    nodes = [origin]
    links = []
    visited = {origin}
    while stack:
        u, it = stack[-1]
        advanced = False
        for v, a in it:
            if v in visited or resid[a] <= thresh:
                continue
            nodes.append(v)
            links.append(a)
            visited.add(v)
            if v == dest:
                return links
            stack.append((v, iter(sorted(outgoing[v]))))
            advanced = True
            break
        if not advanced:
            stack.pop()
            if links:
                visited.discard(nodes.pop())
                links.pop()
    return None


def wardrop_check(network: Network, demand: DemandVector, cf: CongestionFactor,
                  flow: FlowState, tol: float = 1e-3) -> WardropCheck:
    """Certify a flow against the equilibrium principle.

    At the travel times induced by ``flow``, every route that carries more
    than ``tol`` flow in the decomposition must cost at most
    ``(1 + tol)`` times the cheapest route of its OD pair.  Requires the
    per-OD decomposition.
    """
    from . import paths as P
    from .latency import travel_time

    if flow.by_od is None:
        raise ValueError("wardrop_check requires a flow with per-OD decomposition")
    cost = np.asarray(travel_time(cf, network.free_flow_time, network.capacity, flow.x))
    best = P.shortest_routes(network, cost)
    outgoing = P._forward_adjacency(network)

    n = network.n_od
    min_cost = np.array([r.cost for r in best])
    max_used = np.zeros(n)
    for i in range(n):
        o, t = map(int, network.od_pairs[i])
        resid = flow.by_od[i].copy()
        worst = 0.0
        guard = 0
        while guard <= 4 * network.n_links:
            guard += 1
            path = _positive_path(outgoing, resid, o, t, tol)
            if path is None:
                break
            f = float(resid[path].min())
            resid[path] -= f
            worst = max(worst, float(cost[path].sum()))
        max_used[i] = worst if worst > 0 else min_cost[i]
    excess = (max_used - min_cost) / min_cost
    worst_od = int(np.argmax(excess))
    passed = bool(excess[worst_od] <= tol)
    return WardropCheck(min_cost=min_cost, max_used_cost=max_used, tol=tol,
                        passed=passed, worst_od=worst_od,
                        worst_excess=float(excess[worst_od]))


def total_demand_routed(network: Network, flow: FlowState) -> np.ndarray:
    """Demand actually routed per OD pair according to the decomposition."""
    if flow.by_od is None:
        raise ValueError("flow has no per-OD decomposition")
    N = network.incidence()
    out = np.empty(network.n_od)
    for i in range(network.n_od):
        bal = N @ flow.by_od[i]
        out[i] = bal[network.od_pairs[i, 1]]
    return out
