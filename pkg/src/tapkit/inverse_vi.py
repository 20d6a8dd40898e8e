"""Congestion-factor estimation from observed equilibrium flows.

Given K observations (network, demand, equilibrium link flows), the
polynomial congestion factor is recovered by a quadratic program over the
polynomial coefficients, per-OD dual prices, and per-observation
approximation slacks: dual-feasibility rows bound potential differences
by link costs, monotonicity rows keep the polynomial nondecreasing at the
observed normalized flows, and one gap row per observation ties the
primal cost to the dual value within the slack.

Two QP shapes are available.  The literal shape carries one dual-price
vector per OD pair per observation.  Since all pairs sharing an origin
face identical dual-feasibility rows and every demand is nonnegative,
those price vectors can share one potential vector per origin without
changing the optimum (shortest-path potentials maximize every
destination's price simultaneously); the aggregated shape exploits this
and is the default for estimation, cutting variables roughly by the
number of OD pairs per origin.

Monotonicity is imposed between rank-adjacent observed points only;
transitivity of the sort order makes that equivalent to all pairs.  The
observation set for these rows is the union over scenarios, each carrying
its own normalized flows.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .latency import CongestionFactor
from .network import DemandVector, FlowState, Network
from .qp import OPTIMAL, QPResult, QuadProgram, solve_qp


class InverseVIError(Exception):
    """Estimation failed (inconsistent observations or solver trouble)."""


@dataclass(frozen=True)
class Scenario:
    """One observed equilibrium: network, demand, and link flows."""

    network: Network
    demand: DemandVector
    flow: FlowState

    def __post_init__(self):
        if len(self.demand) != self.network.n_od:
            raise ValueError("demand does not match the network's OD pairs")
        if len(self.flow.x) != self.network.n_links:
            raise ValueError("flow does not match the network's links")

    @property
    def normalized(self) -> np.ndarray:
        return self.flow.x / self.network.capacity


@dataclass
class InverseVIProblem:
    """K scenarios plus estimator hyperparameters (degree, kernel scale,
    slack regularization)."""

    scenarios: list[Scenario]
    degree: int = 8
    kernel_scale: float = 1.5
    gamma: float = 0.1

    def __post_init__(self):
        if not self.scenarios:
            raise ValueError("at least one scenario required")
        if self.degree < 1:
            raise ValueError("degree must be at least 1")
        if self.kernel_scale <= 0 or self.gamma <= 0:
            raise ValueError("kernel scale and gamma must be positive")
        for s in self.scenarios:
            if s.demand.values.sum() <= 0:
                raise ValueError("scenario with zero demand is degenerate")
        self.check_feasibility()

    @property
    def K(self) -> int:
        return len(self.scenarios)

    def check_feasibility(self) -> None:
        """Exhibit a routed decomposition of each scenario's demand.

        All-or-nothing at free-flow costs produces a feasible flow for the
        demand, certifying the feasible set is nonempty with the demand
        strictly routable.
        """
        from .paths import all_or_nothing

        for s in self.scenarios:
            aon = all_or_nothing(s.network, s.demand, s.network.free_flow_time)
            if not aon.check_feasible(s.network, s.demand):
                raise InverseVIError("scenario demand admits no feasible routing")


@dataclass
class InverseQPLayout:
    """Column map of the estimation QP: beta, price, and slack blocks."""

    degree: int
    n_vars: int
    beta_cols: np.ndarray            # columns of beta_1..beta_n
    eps_cols: np.ndarray             # columns of eps_1..eps_K
    price_cols: list[dict]           # per scenario: (group, node) -> column
    aggregated: bool
    n_dual_rows: int
    n_monotonicity_rows: int
    n_gap_rows: int


def _powers(z: np.ndarray, degree: int) -> np.ndarray:
    """Stack ``z^1..z^degree`` columns, shape (len(z), degree)."""
    return np.column_stack([z ** i for i in range(1, degree + 1)])


def build_inverse_qp(problem: InverseVIProblem,
                     aggregate_origins: bool = False,
                     derivative_grid: int = 0) -> tuple[QuadProgram, InverseQPLayout]:
    """Assemble the estimation QP.

    Variables are (beta_1..beta_n, prices, slacks); beta_0 is eliminated
    by the ``f(0) = 1`` normalization and each price vector's origin entry
    is pinned to zero (prices are potentials, defined up to a constant).
    With ``aggregate_origins`` the price vectors are shared per origin.
    ``derivative_grid > 0`` adds rows pinning the polynomial's derivative
    nonnegative on that many evenly spaced points of the observed range,
    matching the grid on which fitted factors are later validated.
    """
    n = problem.degree
    c = problem.kernel_scale
    K = problem.K

    beta_cols = np.arange(n)
    col = n
    price_cols: list[dict] = []
    for s in problem.scenarios:
        net = s.network
        mapping = {}
        if aggregate_origins:
            groups = sorted({int(o) for o, _ in net.od_pairs})
            anchors = {g: g for g in groups}
        else:
            groups = list(range(net.n_od))
            anchors = {i: int(net.od_pairs[i, 0]) for i in groups}
        for grp in groups:
            for v in range(net.n_nodes):
                if v == anchors[grp]:
                    continue
                mapping[(grp, v)] = col
                col += 1
        price_cols.append(mapping)
    eps_cols = np.arange(col, col + K)
    n_vars = col + K

    rows, cols, vals, rhs = [], [], [], []
    r = 0

    def add(row_entries, b):
        nonlocal r
        for cc, vv in row_entries:
            rows.append(r)
            cols.append(cc)
            vals.append(vv)
        rhs.append(b)
        r += 1

    # dual feasibility: t0_a sum_i beta_i z^i - (y_head - y_tail) >= -t0_a
    n_dual = 0
    for k, s in enumerate(problem.scenarios):
        net = s.network
        z = s.normalized
        zp = _powers(z, n)
        mapping = price_cols[k]
        if aggregate_origins:
            groups = sorted({int(o) for o, _ in net.od_pairs})
        else:
            groups = list(range(net.n_od))
        for grp in groups:
            for a in range(net.n_links):
                entries = [(int(beta_cols[i]), float(net.free_flow_time[a] * zp[a, i]))
                           for i in range(n)]
                hc = mapping.get((grp, int(net.head[a])))
                tc = mapping.get((grp, int(net.tail[a])))
                if hc is not None:
                    entries.append((hc, -1.0))
                if tc is not None:
                    entries.append((tc, 1.0))
                add(entries, -float(net.free_flow_time[a]))
                n_dual += 1

    # monotonicity between rank-adjacent observed normalized flows
    points = []
    for k, s in enumerate(problem.scenarios):
        points.extend((float(zv), k, a) for a, zv in enumerate(s.normalized))
    points.sort(key=lambda t: t[0])
    n_mono = 0
    for (z_lo, _, _), (z_hi, _, _) in zip(points[:-1], points[1:]):
        if z_hi <= z_lo:
            continue
        entries = [(int(beta_cols[i - 1]), float(z_hi ** i - z_lo ** i))
                   for i in range(1, n + 1)]
        add(entries, 0.0)
        n_mono += 1

    if derivative_grid > 0:
        z_top = max(pt[0] for pt in points)
        for zv in np.linspace(0.0, z_top, derivative_grid):
            entries = [(int(beta_cols[i - 1]), float(i * zv ** (i - 1)))
                       for i in range(1, n + 1)]
            add(entries, 0.0)

    # per-scenario primal-dual gap:
    # eps_k + sum_w d_w y_dest - sum_a t0_a x_a sum_i beta_i z^i >= sum_a t0_a x_a
    for k, s in enumerate(problem.scenarios):
        net = s.network
        z = s.normalized
        zp = _powers(z, n)
        x = s.flow.x
        mapping = price_cols[k]
        coeff = {}
        for i in range(n):
            coeff[int(beta_cols[i])] = -float(np.sum(net.free_flow_time * x * zp[:, i]))
        for w in range(net.n_od):
            o, t = map(int, net.od_pairs[w])
            d = float(s.demand.values[w])
            grp = o if aggregate_origins else w
            yc = mapping.get((grp, t))
            if yc is not None:
                coeff[yc] = coeff.get(yc, 0.0) + d
            oc = mapping.get((grp, o))
            if oc is not None:
                coeff[oc] = coeff.get(oc, 0.0) - d
        coeff[int(eps_cols[k])] = 1.0
        add(list(coeff.items()), float(np.sum(net.free_flow_time * x)))

    weights = np.array([_binom(n, i) * c ** (n - i) for i in range(1, n + 1)])
    Qdiag = np.zeros(n_vars)
    Qdiag[beta_cols] = 2.0 / weights
    Qdiag[eps_cols] = 2.0 * problem.gamma
    Q = np.diag(Qdiag)
    q = np.zeros(n_vars)

    A_in = sp.coo_matrix((vals, (rows, cols)), shape=(r, n_vars)).tocsr()
    lb = np.full(n_vars, -np.inf)
    lb[eps_cols] = 0.0
    prog = QuadProgram(Q=Q, q=q, A_in=A_in, b_in=np.array(rhs), lb=lb)
    layout = InverseQPLayout(degree=n, n_vars=n_vars, beta_cols=beta_cols,
                             eps_cols=eps_cols, price_cols=price_cols,
                             aggregated=aggregate_origins, n_dual_rows=n_dual,
                             n_monotonicity_rows=n_mono, n_gap_rows=K)
    return prog, layout


def _binom(n: int, i: int) -> float:
    from math import comb

    return float(comb(n, i))


def extract_prices(layout: InverseQPLayout, result: QPResult, k: int,
                   n_nodes: int) -> dict:
    """Per-group potential vectors of scenario ``k`` (pinned entries are 0)."""
    out: dict = {}
    for (grp, v), colidx in layout.price_cols[k].items():
        out.setdefault(grp, np.zeros(n_nodes))[v] = result.z[colidx]
    return out


def estimate_cost(problem: InverseVIProblem, aggregate_origins: bool = True,
                  tol: float = 1e-6) -> tuple[CongestionFactor, np.ndarray, dict]:
    """Solve the estimation QP and return the fitted congestion factor.

    Returns ``(factor, per-scenario slacks, diagnostics)``.  The factor
    records the largest observed normalized flow as its validated range.
    """
    from .latency import MONOTONICITY_GRID

    prog, layout = build_inverse_qp(problem, aggregate_origins=aggregate_origins,
                                    derivative_grid=MONOTONICITY_GRID)
    result = solve_qp(prog, tol=tol, max_iter=150)
    if result.status == "infeasible":
        raise InverseVIError("estimation QP infeasible: observations are inconsistent")
    if result.status not in (OPTIMAL, "max_iterations"):
        raise InverseVIError(f"estimation QP failed with status {result.status}")
    if result.status != OPTIMAL:
        warnings.warn("estimation QP stopped at iteration cap; using best iterate",
                      RuntimeWarning, stacklevel=2)
    beta = np.concatenate([[1.0], result.z[layout.beta_cols]])
    eps = np.clip(result.z[layout.eps_cols], 0.0, None)
    z_max = max(float(s.normalized.max()) for s in problem.scenarios)
    cf = CongestionFactor(beta=tuple(beta), validated_upper=z_max)
    diagnostics = {
        "qp_status": result.status,
        "qp_iterations": result.iterations,
        "kkt": result.kkt,
        "epsilon": [float(v) for v in eps],
        "aggregated": aggregate_origins,
        "n_rows": prog.A_in.shape[0],
        "n_vars": layout.n_vars,
    }
    return cf, eps, diagnostics


@dataclass
class CrossValResult:
    kernel_scale: float
    degree: int
    gamma: float
    factor: CongestionFactor
    scores: list            # (c, n, gamma, mean held-out flow error)

    def to_json(self) -> dict:
        return {
            "kernel_scale": self.kernel_scale,
            "degree": self.degree,
            "gamma": self.gamma,
            "factor": self.factor.to_json(),
            "scores": [
                {"kernel_scale": c, "degree": n, "gamma": g, "heldout_error": e}
                for c, n, g, e in self.scores
            ],
        }


def cross_validate(scenarios: list[Scenario], grid: list[tuple[float, int, float]],
                   folds: int = 3, solver_rel_gap: float = 1e-6,
                   solver_max_iter: int = 20000) -> CrossValResult:
    """Pick (kernel scale, degree, gamma) by held-out flow reproduction.

    Scenarios are split round-robin into ``folds`` folds; each candidate
    is fitted on the training folds and scored by forward-solving the
    held-out scenarios with the fitted factor:
    ``|x_solved - x_observed| / |x_observed|``.  The best candidate is
    refitted on all scenarios.
    """
    from .equilibrium import solve_ue_fw

    if len(scenarios) < folds:
        raise ValueError("need at least as many scenarios as folds")
    if not grid:
        raise ValueError("empty hyperparameter grid")

    fold_of = [i % folds for i in range(len(scenarios))]
    scores = []
    for (c, n, gamma) in grid:
        errs = []
        for j in range(folds):
            train = [s for i, s in enumerate(scenarios) if fold_of[i] != j]
            test = [s for i, s in enumerate(scenarios) if fold_of[i] == j]
            if not train or not test:
                continue
            cf, _, _ = estimate_cost(
                InverseVIProblem(train, degree=n, kernel_scale=c, gamma=gamma))
            for s in test:
                rep = solve_ue_fw(s.network, s.demand, cf,
                                  rel_gap=solver_rel_gap, max_iter=solver_max_iter)
                errs.append(float(np.linalg.norm(rep.flow.x - s.flow.x)
                                  / np.linalg.norm(s.flow.x)))
        scores.append((c, n, gamma, float(np.mean(errs))))
    best = min(scores, key=lambda t: t[3])
    cf, _, _ = estimate_cost(
        InverseVIProblem(list(scenarios), degree=best[1], kernel_scale=best[0],
                         gamma=best[2]))
    return CrossValResult(kernel_scale=best[0], degree=best[1], gamma=best[2],
                          factor=cf, scores=scores)
