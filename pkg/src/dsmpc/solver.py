"""Centralized convex QP solving.

Backed by cvxopt's interior-point cone solver with our own KKT verification
on top; this is the oracle the consensus-ADMM path is tested against.
Infeasibility is diagnosed separately with a phase-1 LP (scipy/HiGHS) so the
error can name the violated rows, because cvxopt may raise ``ValueError``
from inside its scaling update on strictly infeasible input rather than
returning a status.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from cvxopt import matrix as cvx_matrix
from cvxopt import solvers as cvx_solvers
from cvxopt import spmatrix as cvx_spmatrix
from scipy.optimize import linprog

from .errors import InfeasibleProblem, NotConverged, UnboundedProblem


@dataclass
class SolveReport:
    """Outcome of one QP solve (centralized or distributed)."""

    solution: np.ndarray
    objective: float
    iterations: int
    converged: bool
    method: str
    primal_residuals: list[float] = field(default_factory=list)
    dual_residuals: list[float] = field(default_factory=list)
    eq_residual: float = 0.0
    ineq_violation: float = 0.0
    stationarity: float = 0.0
    eq_multipliers: np.ndarray | None = None
    in_multipliers: np.ndarray | None = None
    message_rounds: int = 0
    message_count: int = 0
    message_floats: int = 0
    messages: list[tuple[int, int, int, int]] = field(default_factory=list)

    def residual_rows(self):
        """Rows for a residual-history CSV: (iteration, primal, dual)."""
        return [
            {"iteration": k, "primal": r, "dual": s}
            for k, (r, s) in enumerate(zip(self.primal_residuals, self.dual_residuals))
        ]

    def message_rows(self):
        return [
            {"round": rnd, "sender": a, "receiver": b, "floats": n}
            for rnd, a, b, n in self.messages
        ]


def _to_cvx_sparse(mat):
    coo = sp.coo_matrix(mat)
    return cvx_spmatrix(
        coo.data.tolist(), coo.row.tolist(), coo.col.tolist(), size=coo.shape
    )


def _to_cvx_col(vec):
    return cvx_matrix(np.asarray(vec, dtype=float).reshape(-1, 1))


def solve_qp_arrays(H, f, a_eq=None, b_eq=None, a_in=None, b_in=None, tol=1e-8,
                    labels_eq=None, labels_in=None):
    """Solve min 0.5 y'Hy + f'y subject to a_eq y = b_eq, a_in y <= b_in.

    Returns (y, eq_multipliers, in_multipliers, iterations, residual_dict).
    Raises InfeasibleProblem / UnboundedProblem / NotConverged.
    """
    f = np.asarray(f, dtype=float).reshape(-1)
    n = f.shape[0]
    H = sp.csr_matrix(H) if H is not None else sp.csr_matrix((n, n))
    have_eq = a_eq is not None and a_eq.shape[0] > 0
    have_in = a_in is not None and a_in.shape[0] > 0

    if not have_eq and not have_in:
        y = _solve_unconstrained(H, f)
        res = _kkt_residuals(H, f, None, None, None, None, y, None, None)
        return y, np.zeros(0), np.zeros(0), 0, res

    kw = {}
    if have_in:
        kw["G"], kw["h"] = _to_cvx_sparse(a_in), _to_cvx_col(b_in)
    if have_eq:
        kw["A"], kw["b"] = _to_cvx_sparse(a_eq), _to_cvx_col(b_eq)
    inner_tol = min(max(tol * 1e-1, 1e-12), 1e-7)
    options = {
        "show_progress": False,
        "abstol": inner_tol,
        "reltol": inner_tol,
        "feastol": inner_tol,
        "maxiters": 200,
    }
    try:
        sol = cvx_solvers.qp(_to_cvx_sparse(H), _to_cvx_col(f), options=options, **kw)
    except (ValueError, ArithmeticError) as exc:
        _raise_from_phase1(a_eq, b_eq, a_in, b_in, n, tol, labels_eq, labels_in,
                           context=f"cvxopt failed ({exc})")
        if _has_unbounded_direction(H, f, a_eq if have_eq else None, a_in if have_in else None):
            raise UnboundedProblem(
                "QP objective is unbounded below on the feasible set"
            ) from exc
        raise NotConverged(f"QP solver failed: {exc}") from exc

    status = sol["status"]
    if status == "primal infeasible":
        _raise_from_phase1(a_eq, b_eq, a_in, b_in, n, tol, labels_eq, labels_in,
                           context="solver reported primal infeasibility")
        raise InfeasibleProblem("QP reported primal infeasible")
    if status == "dual infeasible":
        raise UnboundedProblem("QP objective is unbounded below on the feasible set")

    y = np.asarray(sol["x"]).reshape(-1)
    lam = np.asarray(sol["y"]).reshape(-1) if have_eq else np.zeros(0)
    mu = np.asarray(sol["z"]).reshape(-1) if have_in else np.zeros(0)
    res = _kkt_residuals(H, f, a_eq if have_eq else None, b_eq if have_eq else None,
                         a_in if have_in else None, b_in if have_in else None, y, lam, mu)
    worst = max(res["eq_residual"], res["ineq_violation"], res["stationarity"])
    if worst > tol:
        if status != "optimal":
            _raise_from_phase1(a_eq, b_eq, a_in, b_in, n, tol, labels_eq, labels_in,
                               context=f"solver status {status!r}")
        raise NotConverged(
            f"QP solve ended with status {status!r} and KKT residual {worst:.2e} > {tol:.1e}"
        )
    return y, lam, mu, int(sol["iterations"]), res


def _solve_unconstrained(H, f):
    Hd = H.toarray()
    try:
        y = np.linalg.solve(Hd, -f)
    except np.linalg.LinAlgError:
        y, *_ = np.linalg.lstsq(Hd, -f, rcond=None)
        if np.linalg.norm(Hd @ y + f) > 1e-8 * max(1.0, np.linalg.norm(f)):
            raise UnboundedProblem("singular objective with no stationary point")
    return y


def _kkt_residuals(H, f, a_eq, b_eq, a_in, b_in, y, lam, mu):
    grad = H @ y + f
    if a_eq is not None and lam is not None and lam.size:
        grad = grad + a_eq.T @ lam
    if a_in is not None and mu is not None and mu.size:
        grad = grad + a_in.T @ mu
    scale = max(
        1.0,
        float(np.abs(f).max(initial=0.0)),
        float(np.abs(H @ y).max(initial=0.0)),
    )
    out = {
        "stationarity": float(np.abs(grad).max(initial=0.0)) / scale,
        "eq_residual": 0.0,
        "ineq_violation": 0.0,
    }
    if a_eq is not None:
        out["eq_residual"] = float(np.abs(a_eq @ y - b_eq).max(initial=0.0))
    if a_in is not None:
        out["ineq_violation"] = float(np.max(a_in @ y - b_in, initial=0.0))
    return out


def _has_unbounded_direction(H, f, a_eq, a_in) -> bool:
    """Recession-direction test: exists d with Hd = 0, a_eq d = 0,
    a_in d <= 0 and f'd < 0 (normalized to the unit box)."""
    n = f.shape[0]
    eq_blocks = [sp.csr_matrix(H)]
    if a_eq is not None:
        eq_blocks.append(sp.csr_matrix(a_eq))
    A_eq = sp.vstack(eq_blocks)
    res = linprog(
        f,
        A_ub=sp.csr_matrix(a_in) if a_in is not None else None,
        b_ub=np.zeros(a_in.shape[0]) if a_in is not None else None,
        A_eq=A_eq,
        b_eq=np.zeros(A_eq.shape[0]),
        bounds=[(-1, 1)] * n,
        method="highs",
    )
    return bool(res.success) and res.fun < -1e-9


def _raise_from_phase1(a_eq, b_eq, a_in, b_in, n, tol, labels_eq, labels_in, context=""):
    """Raise InfeasibleProblem with the violated row set if phase-1 says so."""
    violated = diagnose_infeasibility(a_eq, b_eq, a_in, b_in, n, tol, labels_eq, labels_in)
    if violated is not None:
        raise InfeasibleProblem(
            f"QP infeasible ({context}); {len(violated)} unsatisfiable rows",
            violated_rows=violated,
        )


def diagnose_infeasibility(a_eq, b_eq, a_in, b_in, n, tol=1e-8,
                           labels_eq=None, labels_in=None):
    """Phase-1 LP: minimal total constraint slack.

    Returns None when a feasible point exists (slack below tolerance),
    otherwise the list of (label, violation) pairs for rows needing slack.
    """
    n_in = a_in.shape[0] if a_in is not None else 0
    n_eq = a_eq.shape[0] if a_eq is not None else 0
    if n_in == 0 and n_eq == 0:
        return None
    # variables: [y (free), s_in >= 0, s_eq+ >= 0, s_eq- >= 0]
    cols = n + n_in + 2 * n_eq
    c = np.concatenate([np.zeros(n), np.ones(n_in + 2 * n_eq)])
    A_ub = None
    b_ub = None
    if n_in:
        A_ub = sp.hstack(
            [sp.csr_matrix(a_in), -sp.eye(n_in), sp.csr_matrix((n_in, 2 * n_eq))]
        ).tocsr()
        b_ub = np.asarray(b_in, dtype=float)
    A_eq = None
    beq = None
    if n_eq:
        A_eq = sp.hstack(
            [sp.csr_matrix(a_eq), sp.csr_matrix((n_eq, n_in)), sp.eye(n_eq), -sp.eye(n_eq)]
        ).tocsr()
        beq = np.asarray(b_eq, dtype=float)
    bounds = [(None, None)] * n + [(0, None)] * (n_in + 2 * n_eq)
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=beq, bounds=bounds,
                  method="highs")
    if not res.success:
        # HiGHS failing on phase-1 means the relaxation itself broke; treat
        # as infeasible without row attribution.
        return [(None, float("nan"))]
    slack_tol = max(tol, 1e-9)
    if res.fun <= slack_tol * max(1, n_in + n_eq):
        return None
    s = res.x[n:]
    violated = []
    for r in range(n_in):
        if s[r] > slack_tol:
            label = labels_in[r] if labels_in else f"ineq[{r}]"
            violated.append((label, float(s[r])))
    for r in range(n_eq):
        amount = s[n_in + r] + s[n_in + n_eq + r]
        if amount > slack_tol:
            label = labels_eq[r] if labels_eq else f"eq[{r}]"
            violated.append((label, float(amount)))
    return violated


def solve_centralized(qp, tol=1e-8) -> SolveReport:
    """Solve a structured QpProblem to KKT residual <= tol."""
    y, lam, mu, iters, res = solve_qp_arrays(
        qp.quad, qp.lin, qp.a_eq, qp.b_eq, qp.a_in, qp.b_in, tol=tol,
        labels_eq=qp.eq_labels, labels_in=qp.in_labels,
    )
    worst = max(res["eq_residual"], res["ineq_violation"], res["stationarity"])
    return SolveReport(
        solution=y,
        objective=qp.objective_value(y),
        iterations=iters,
        converged=worst <= tol,
        method="central",
        primal_residuals=[max(res["eq_residual"], res["ineq_violation"])],
        dual_residuals=[res["stationarity"]],
        eq_residual=res["eq_residual"],
        ineq_violation=res["ineq_violation"],
        stationarity=res["stationarity"],
        eq_multipliers=lam,
        in_multipliers=mu,
    )
