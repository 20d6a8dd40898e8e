"""Embedded convex quadratic-program solver.

Solves ``min 0.5 z'Qz + q'z`` subject to ``A_eq z = b_eq``,
``A_in z >= b_in`` and variable bounds, via a Mehrotra-style
predictor-corrector primal-dual interior-point method with dense
factorizations.  Constraint matrices may be dense or ``scipy.sparse``;
the normal-matrix product exploits sparsity, so tall sparse inequality
blocks (tens of thousands of rows) are fine as long as the variable
count stays in the low thousands.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
MAX_ITERATIONS = "max_iterations"

_BLOWUP = 1e13


class QPError(Exception):
    """Malformed quadratic program."""


def _as_csr(A, n_cols):
    if A is None:
        return sp.csr_matrix((0, n_cols))
    if sp.issparse(A):
        return A.tocsr()
    A = np.atleast_2d(np.asarray(A, dtype=float))
    return sp.csr_matrix(A)


@dataclass
class QuadProgram:
    """Data of one convex QP; validated on construction.

    ``Q`` must be symmetric positive semidefinite (verified by an
    attempted Cholesky factorization with diagonal shift at most 1e-8; a
    numerically indefinite matrix is repaired by ``mu I`` with
    ``mu = 1e-10 trace(Q)/dim`` and a warning).
    """

    Q: np.ndarray
    q: np.ndarray
    A_eq: object = None
    b_eq: np.ndarray | None = None
    A_in: object = None
    b_in: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    psd_shift: float = field(init=False, default=0.0)

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=float)
        self.q = np.asarray(self.q, dtype=float).ravel()
        n = len(self.q)
        if self.Q.shape != (n, n):
            raise QPError("Q and q dimensions disagree")
        scale = max(1.0, float(np.abs(self.Q).max()))
        if np.abs(self.Q - self.Q.T).max() > 1e-8 * scale:
            raise QPError("Q is not symmetric")
        self.Q = 0.5 * (self.Q + self.Q.T)
        self.A_eq = _as_csr(self.A_eq, n)
        self.A_in = _as_csr(self.A_in, n)
        self.b_eq = np.zeros(0) if self.b_eq is None else np.asarray(self.b_eq, dtype=float).ravel()
        self.b_in = np.zeros(0) if self.b_in is None else np.asarray(self.b_in, dtype=float).ravel()
        if self.A_eq.shape[0] != len(self.b_eq) or self.A_eq.shape[1] != n:
            raise QPError("equality constraint dimensions disagree")
        if self.A_in.shape[0] != len(self.b_in) or self.A_in.shape[1] != n:
            raise QPError("inequality constraint dimensions disagree")
        for name in ("lb", "ub"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=float).ravel()
                if len(v) != n:
                    raise QPError(f"{name} has wrong length")
                setattr(self, name, v)
        try:
            sla.cholesky(self.Q + 1e-8 * np.eye(n), lower=True)
        except sla.LinAlgError:
            mu = 1e-10 * max(np.trace(self.Q), 1.0) / n
            try:
                sla.cholesky(self.Q + (mu + 1e-8) * np.eye(n), lower=True)
            except sla.LinAlgError:
                raise QPError("Q is not positive semidefinite")
            warnings.warn(
                f"Q numerically indefinite; repaired with {mu:.3e} * I",
                RuntimeWarning, stacklevel=2,
            )
            self.psd_shift = mu

    @property
    def n(self) -> int:
        return len(self.q)

    def objective(self, z: np.ndarray) -> float:
        return float(0.5 * z @ (self.Q @ z) + self.q @ z)


@dataclass
class QPResult:
    z: np.ndarray
    dual_eq: np.ndarray
    dual_in: np.ndarray           # multipliers for stacked (A_in, lb, ub) rows
    status: str
    iterations: int
    kkt: dict

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL

    def kkt_json(self) -> str:
        return json.dumps({"status": self.status, "iterations": self.iterations, **self.kkt})


def _stack_inequalities(p: QuadProgram):
    """Fold bounds into the inequality block ``G z >= h``."""
    n = p.n
    blocks, rhs = [], []
    if p.A_in.shape[0]:
        blocks.append(p.A_in)
        rhs.append(p.b_in)
    if p.lb is not None:
        mask = np.isfinite(p.lb)
        if mask.any():
            idx = np.where(mask)[0]
            E = sp.csr_matrix((np.ones(len(idx)), (np.arange(len(idx)), idx)), shape=(len(idx), n))
            blocks.append(E)
            rhs.append(p.lb[idx])
    if p.ub is not None:
        mask = np.isfinite(p.ub)
        if mask.any():
            idx = np.where(mask)[0]
            E = sp.csr_matrix((-np.ones(len(idx)), (np.arange(len(idx)), idx)), shape=(len(idx), n))
            blocks.append(E)
            rhs.append(-p.ub[idx])
    if not blocks:
        return sp.csr_matrix((0, n)), np.zeros(0)
    return sp.vstack(blocks, format="csr"), np.concatenate(rhs)


def _kkt_residuals(p: QuadProgram, G, h, z, y, lam, scale):
    r_stat = p.Q @ z + p.q
    if p.A_eq.shape[0]:
        r_stat -= p.A_eq.T @ y
    if G.shape[0]:
        r_stat -= G.T @ lam
    r_eq = (p.A_eq @ z - p.b_eq) if p.A_eq.shape[0] else np.zeros(0)
    s = (G @ z - h) if G.shape[0] else np.zeros(0)
    return {
        "stationarity": float(np.abs(r_stat).max() / scale),
        "primal_feasibility": float(max(
            np.abs(r_eq).max(initial=0.0),
            (-s).max(initial=0.0),
        ) / scale),
        "dual_feasibility": float((-lam).max(initial=0.0) / scale),
        "complementarity": float(np.abs(lam * s).max(initial=0.0) / scale),
    }


def _solve_equality_only(p: QuadProgram, tol):
    """Direct KKT solve when no inequalities are active in the model."""
    n, me = p.n, p.A_eq.shape[0]
    A = p.A_eq.toarray() if me else np.zeros((0, n))
    K = np.zeros((n + me, n + me))
    K[:n, :n] = p.Q + p.psd_shift * np.eye(n)
    K[:n, n:] = A.T
    K[n:, :n] = A
    rhs = np.concatenate([-p.q, p.b_eq])
    try:
        sol = sla.solve(K, rhs, assume_a="sym")
    except (sla.LinAlgError, ValueError):
        sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
        if np.abs(K @ sol - rhs).max() > 1e-6 * (1 + np.abs(rhs).max()):
            # stationarity cannot be met: objective decreases without bound
            status = UNBOUNDED if me == 0 or np.abs(A @ sol[:n] - p.b_eq).max() < 1e-6 else INFEASIBLE
            return QPResult(sol[:n], sol[n:], np.zeros(0), status, 0, {})
    z, y = sol[:n], -sol[n:]
    kkt = _kkt_residuals(p, sp.csr_matrix((0, n)), np.zeros(0), z, y, np.zeros(0),
                         1.0 + np.abs(p.q).max(initial=0.0))
    status = OPTIMAL if max(kkt.values()) <= max(tol, 1e-9) else MAX_ITERATIONS
    return QPResult(z, y, np.zeros(0), status, 1, kkt)


def _equilibrate(Q, q, A, b_eq, G, h):
    """Ruiz-style diagonal scaling of variables and constraint rows.

    Returns scaled copies plus the scaling vectors (d, r_eq, r_in) with
    ``z = d * z_scaled``, ``y = r_eq * y_scaled``, ``lam = r_in * lam_scaled``.
    """
    n = len(q)
    me, mi = A.shape[0], G.shape[0]
    d = np.ones(n)
    r_eq = np.ones(me)
    r_in = np.ones(mi)
    for _ in range(6):
        Qs = np.abs(Q) * d[:, None] * d[None, :]
        col = Qs.max(axis=0, initial=0.0)
        if me:
            As = sp.diags(r_eq) @ A @ sp.diags(d)
            col = np.maximum(col, np.abs(As).max(axis=0).toarray().ravel())
        if mi:
            Gs = sp.diags(r_in) @ G @ sp.diags(d)
            col = np.maximum(col, np.abs(Gs).max(axis=0).toarray().ravel())
        col = np.sqrt(np.maximum(col, 1e-12))
        d /= col
        if me:
            rn = np.abs(sp.diags(r_eq) @ A @ sp.diags(d)).max(axis=1).toarray().ravel()
            r_eq /= np.sqrt(np.maximum(rn, 1e-12))
        if mi:
            rn = np.abs(sp.diags(r_in) @ G @ sp.diags(d)).max(axis=1).toarray().ravel()
            r_in /= np.sqrt(np.maximum(rn, 1e-12))
    D = sp.diags(d)
    Qs = Q * d[:, None] * d[None, :]
    qs = q * d
    As = (sp.diags(r_eq) @ A @ D).tocsr() if me else A
    bs = b_eq * r_eq
    Gs = (sp.diags(r_in) @ G @ D).tocsr() if mi else G
    hs = h * r_in
    return Qs, qs, As, bs, Gs, hs, d, r_eq, r_in


def solve_qp(p: QuadProgram, tol: float = 1e-8, max_iter: int = 100) -> QPResult:
    """Predictor-corrector interior-point solve of a convex QP.

    The problem is diagonally equilibrated internally; convergence is
    declared on the residuals of the original problem.  Returns a
    :class:`QPResult` whose ``status`` is one of ``optimal``,
    ``infeasible``, ``unbounded`` or ``max_iterations``; at an optimum
    every KKT residual (stationarity, primal/dual feasibility,
    complementarity) is at most ``tol * (1 + |q|)``.
    """
    G0, h0 = _stack_inequalities(p)
    mi, me, n = G0.shape[0], p.A_eq.shape[0], p.n
    if mi == 0:
        return _solve_equality_only(p, tol)
    Q0 = p.Q + p.psd_shift * np.eye(n)
    Qs, q, A, b_eq, Gd, h, dscale, r_eq, r_in = _equilibrate(
        Q0, p.q, p.A_eq, p.b_eq, G0, h0)
    Q = Qs
    GT = Gd.T.tocsr()
    qscale = 1.0 + float(np.abs(p.q).max(initial=0.0))

    def original_kkt(z, y, lam):
        return _kkt_residuals(p, G0, h0, z * dscale, y * r_eq, lam * r_in, qscale)

    # starting point: regularized equality KKT solve, slacks pushed inside
    Ad = A.toarray() if me else None
    if me == 0 and not q.any():
        sol0 = np.zeros(n)
    else:
        K0 = np.zeros((n + me, n + me))
        K0[:n, :n] = Q + np.eye(n)
        if me:
            K0[:n, n:] = Ad.T
            K0[n:, :n] = Ad
            K0[n:, n:] = -1e-8 * np.eye(me)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                sol0 = sla.solve(K0, np.concatenate([-q, b_eq]), assume_a="sym")
            if not np.all(np.isfinite(sol0)):
                sol0 = np.zeros(n + me)
        except (sla.LinAlgError, ValueError):
            sol0 = np.zeros(n + me)
    z = sol0[:n]
    y = sol0[n:]
    s0 = Gd @ z - h
    shift = max(0.0, float(-1.5 * s0.min(initial=0.0))) + 1.0
    s = s0 + shift
    lam = np.ones(mi)

    status = MAX_ITERATIONS
    it = 0
    delta = 1e-12
    best = (np.inf, z.copy(), y.copy(), lam.copy())
    best_iter = 0
    for it in range(1, max_iter + 1):
        r_d = Q @ z + q - (A.T @ y if me else 0.0) - GT @ lam
        r_p = (A @ z - b_eq) if me else np.zeros(0)
        r_g = Gd @ z - s - h
        mu = float(s @ lam) / mi

        kkt = original_kkt(z, y, lam)
        worst = max(kkt.values())
        if worst < best[0]:
            best = (worst, z.copy(), y.copy(), lam.copy())
            best_iter = it
        if worst <= tol:
            status = OPTIMAL
            break
        if np.abs(lam * r_in).max() > _BLOWUP * qscale and kkt["primal_feasibility"] > tol:
            status = INFEASIBLE
            break
        if np.abs(z * dscale).max() > _BLOWUP * max(1.0, np.abs(h0).max(initial=0.0)):
            status = UNBOUNDED
            break
        if mu < 1e-15 and it - best_iter >= 15:
            # complementarity exhausted and no residual progress: numerical floor
            break

        w = lam / s
        M = (GT.multiply(w) @ Gd).toarray() if sp.issparse(Gd) else (GT * w) @ Gd
        M += Q + delta * np.eye(n)
        K = np.zeros((n + me, n + me))
        K[:n, :n] = M
        if me:
            K[:n, n:] = -Ad.T
            K[n:, :n] = Ad
            K[n:, n:] = delta * np.eye(me)
        try:
            lu = sla.lu_factor(K)
        except (sla.LinAlgError, ValueError):
            delta = max(delta * 100, 1e-10)
            continue

        def newton(rhs4):
            # rhs4 is the complementarity right-hand side: S dlam + Lam ds = rhs4
            t1 = -r_d + GT @ (rhs4 / s - w * r_g)
            rhs = np.concatenate([t1, -r_p])
            dsol = sla.lu_solve(lu, rhs)
            dz = dsol[:n]
            dy = dsol[n:]
            ds = Gd @ dz + r_g
            dlam = (rhs4 - lam * ds) / s
            return dz, dy, ds, dlam

        # predictor
        dz_a, dy_a, ds_a, dlam_a = newton(-s * lam)
        a_p = _max_step(s, ds_a)
        a_d = _max_step(lam, dlam_a)
        mu_aff = float((s + a_p * ds_a) @ (lam + a_d * dlam_a)) / mi
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.1

        # corrector
        dz, dy, ds, dlam = newton(-s * lam + sigma * mu - ds_a * dlam_a)
        a_p = 0.995 * _max_step(s, ds)
        a_d = 0.995 * _max_step(lam, dlam)
        z = z + a_p * dz
        s = s + a_p * ds
        y = y + a_d * dy
        lam = lam + a_d * dlam

    kkt = original_kkt(z, y, lam)
    if max(kkt.values()) > best[0]:
        _, z, y, lam = best
        kkt = original_kkt(z, y, lam)
    if status == MAX_ITERATIONS and max(kkt.values()) <= tol:
        status = OPTIMAL
    z, y, lam = z * dscale, y * r_eq, lam * r_in
    if status in (OPTIMAL, MAX_ITERATIONS):
        z, y, lam, kkt = _polish(p, G0, h0, z, y, lam, kkt, qscale)
        if status == MAX_ITERATIONS and max(kkt.values()) <= tol:
            status = OPTIMAL
    return QPResult(z=z, dual_eq=y, dual_in=lam, status=status, iterations=it, kkt=kkt)


def _polish(p: QuadProgram, G, h, z, y, lam, kkt, qscale, size_cap: int = 3000):
    """Active-set refinement of an interior-point solution.

    Constraints with slack below their multiplier are pinned as equalities
    and the reduced KKT system re-solved; the refined point is kept only
    when it improves every KKT residual measure and keeps dual signs.
    """
    n, me = p.n, p.A_eq.shape[0]
    s = G @ z - h
    active = np.where(s <= lam)[0]
    ma = len(active)
    if n + me + ma > size_cap or ma == 0:
        return z, y, lam, kkt
    Ga = G[active].toarray()
    K = np.zeros((n + me + ma, n + me + ma))
    K[:n, :n] = p.Q + p.psd_shift * np.eye(n)
    rhs = np.concatenate([-p.q, p.b_eq, h[active]])
    if me:
        Ae = p.A_eq.toarray()
        K[:n, n:n + me] = -Ae.T
        K[n:n + me, :n] = Ae
    K[:n, n + me:] = -Ga.T
    K[n + me:, :n] = Ga
    try:
        sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
    except np.linalg.LinAlgError:
        return z, y, lam, kkt
    z2 = sol[:n]
    y2 = sol[n:n + me]
    lam2 = np.zeros(len(lam))
    lam2[active] = sol[n + me:]
    if lam2.min(initial=0.0) < -1e-9 * qscale:
        return z, y, lam, kkt
    lam2 = np.clip(lam2, 0.0, None)
    kkt2 = _kkt_residuals(p, G, h, z2, y2, lam2, qscale)
    if max(kkt2.values()) <= max(max(kkt.values()), 1e-12):
        return z2, y2, lam2, kkt2
    return z, y, lam, kkt


def _max_step(v: np.ndarray, dv: np.ndarray) -> float:
    neg = dv < 0
    if not neg.any():
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))
