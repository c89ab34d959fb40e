"""Consensus ADMM over the neighbor graph.

The stacked QP is split by agent: each agent keeps its own nominal states
and inputs plus local copies of the neighbor states appearing in its
coupling rows. Copies must agree with the owner's variable; agreement is
enforced by general-form consensus ADMM with scaled duals:

    y_i  <- argmin f_i(y_i) + (rho/2) ||S_i y_i - g + u_i||^2   (local rows hold)
    g_c  <- mean over references of (y + u)
    u_i  <- u_i + S_i y_i - g

Rounds are bulk-synchronous; within a round every agent solves its local QP
(via the centralized oracle), then copiers ship copy-plus-dual values to the
owner, the owner averages and broadcasts the new consensus value. All
traffic goes through an in-process bus that records (round, sender,
receiver, floats) for the locality audit. Residual-balancing adaptation of
the penalty is on by default (factor 2 when one residual exceeds the other
tenfold).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError
from .solver import SolveReport, solve_qp_arrays


@dataclass
class AdmmParameters:
    penalty: float = 1.0
    eps_abs: float = 1e-6
    eps_rel: float = 1e-6
    max_iters: int = 5000
    adaptive: bool = True
    balance_factor: float = 2.0
    balance_threshold: float = 10.0
    local_tol: float = 1e-9

    @staticmethod
    def from_dict(doc: dict) -> "AdmmParameters":
        keys = ("penalty", "eps_abs", "eps_rel", "max_iters", "adaptive",
                "balance_factor", "balance_threshold", "local_tol")
        return AdmmParameters(**{k: doc[k] for k in keys if k in doc})


@dataclass
class AgentSubproblem:
    """Agent-local slice of the stacked QP.

    Local variables are the agent's own columns followed by copies of each
    strict neighbor's nominal-state trajectory (ascending neighbor index).
    ``copies[j]`` gives the local positions holding the copy of neighbor j's
    states; ``owned_shared`` are local positions of own variables that some
    neighbor copies. Row submatrices carry the agent's own constraint rows
    only, re-indexed to local columns.
    """

    agent: int
    local_cols: np.ndarray  # global column id per local position
    num_own: int
    quad: sp.csr_matrix
    lin: np.ndarray
    constant: float
    a_eq: sp.csr_matrix
    b_eq: np.ndarray
    a_in: sp.csr_matrix
    b_in: np.ndarray
    eq_row_ids: np.ndarray
    in_row_ids: np.ndarray
    copies: dict[int, np.ndarray] = field(default_factory=dict)
    owned_shared: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    neighbors: list[int] = field(default_factory=list)

    @property
    def shared_positions(self) -> np.ndarray:
        parts = [self.owned_shared] + [self.copies[j] for j in sorted(self.copies)]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=int)


def _submatrix(mat, rows, col_map, n_local, agent):
    sub = mat[rows].tocoo() if len(rows) else sp.coo_matrix((0, mat.shape[1]))
    local = col_map[sub.col] if sub.col.size else sub.col
    if local.size and np.any(local < 0):
        raise ConfigError(
            f"agent {agent} has constraint rows touching non-neighbor variables; "
            "QP structure annotation is inconsistent"
        )
    return sp.coo_matrix((sub.data, (sub.row, local)), shape=(len(rows), n_local)).tocsr()


def partition_problem(qp, model) -> list[AgentSubproblem]:
    """Split a structured QP into per-agent subproblems with neighbor copies.

    The union of all agents' rows is exactly the original row set, and every
    column is owned by exactly one agent; copies exist for each (i, j) with
    j a strict neighbor of i, covering z_j(0..N).
    """
    if not qp.agents:
        raise ConfigError("QP carries no agent-block annotations; cannot partition")
    by_index = {blocks.index: blocks for blocks in qp.agents}
    copied_from: dict[int, set[int]] = {blocks.index: set() for blocks in qp.agents}
    for blocks in qp.agents:
        for j in blocks.neighbors:
            if j != blocks.index:
                copied_from[j].add(blocks.index)

    subproblems = []
    for blocks in sorted(qp.agents, key=lambda b: b.index):
        i = blocks.index
        own = np.concatenate([blocks.z_cols.reshape(-1), blocks.v_cols.reshape(-1)])
        local_cols = [own]
        copies = {}
        pos = own.size
        for j in sorted(j for j in blocks.neighbors if j != i):
            cols_j = by_index[j].z_cols.reshape(-1)
            copies[j] = np.arange(pos, pos + cols_j.size)
            local_cols.append(cols_j)
            pos += cols_j.size
        local_cols = np.concatenate(local_cols)
        col_map = np.full(qp.num_vars, -1, dtype=int)
        col_map[local_cols] = np.arange(local_cols.size)

        own_rows = qp.quad[own.tolist()].tocoo()
        own_local = col_map[own_rows.col] if own_rows.col.size else own_rows.col
        if own_local.size and (np.any(own_local < 0) or np.any(own_local >= own.size)):
            raise ConfigError(f"objective couples agent {i} to other agents' variables")
        quad = sp.coo_matrix(
            (own_rows.data, (own_rows.row, own_local)),
            shape=(local_cols.size, local_cols.size),
        ).tocsr()
        lin = np.zeros(local_cols.size)
        lin[: own.size] = qp.lin[own]

        z_own = blocks.z_cols.reshape(-1)
        owned_shared = (
            col_map[z_own] if copied_from[i] else np.zeros(0, dtype=int)
        )
        subproblems.append(
            AgentSubproblem(
                agent=i,
                local_cols=local_cols,
                num_own=own.size,
                quad=quad,
                lin=lin,
                constant=qp.constant / len(qp.agents),
                a_eq=_submatrix(qp.a_eq, blocks.eq_rows.tolist(), col_map, local_cols.size, i),
                b_eq=qp.b_eq[blocks.eq_rows] if blocks.eq_rows.size else np.zeros(0),
                a_in=_submatrix(qp.a_in, blocks.in_rows.tolist(), col_map, local_cols.size, i),
                b_in=qp.b_in[blocks.in_rows] if blocks.in_rows.size else np.zeros(0),
                eq_row_ids=blocks.eq_rows.copy(),
                in_row_ids=blocks.in_rows.copy(),
                copies=copies,
                owned_shared=owned_shared,
                neighbors=list(blocks.neighbors),
            )
        )
    return subproblems


class _MessageBus:
    """Round-based in-process transport that records every message."""

    def __init__(self):
        self.log: list[tuple[int, int, int, int]] = []

    def send(self, round_idx, sender, receiver, floats):
        self.log.append((round_idx, sender, receiver, int(floats)))


def solve_admm(subproblems, params: AdmmParameters | None = None,
               warm_start=None, num_vars=None) -> SolveReport:
    """Run bulk-synchronous consensus rounds until residual tolerances hold.

    Terminates when both the primal residual (copy disagreement) and dual
    residual (consensus movement) fall below eps_abs/eps_rel-scaled bounds.
    Hitting max_iters returns the partial report with ``converged=False``.
    """
    params = params or AdmmParameters()
    subproblems = sorted(subproblems, key=lambda s: s.agent)
    if num_vars is None:
        num_vars = 1 + max(int(s.local_cols.max()) for s in subproblems)
    rho = float(params.penalty)
    bus = _MessageBus()

    # consensus references: global col -> list of (subproblem idx, local pos)
    refs: dict[int, list[tuple[int, int]]] = {}
    for si, sub in enumerate(subproblems):
        for pos in sub.shared_positions:
            refs.setdefault(int(sub.local_cols[pos]), []).append((si, int(pos)))
    shared_cols = sorted(refs)
    col_slot = {c: k for k, c in enumerate(shared_cols)}
    n_refs = sum(len(v) for v in refs.values())

    g = np.zeros(len(shared_cols))
    if warm_start is not None:
        warm = np.asarray(warm_start, dtype=float)
        g = warm[shared_cols] if len(shared_cols) else g
    duals = [np.zeros(sub.shared_positions.size) for sub in subproblems]
    locals_ = [np.zeros(sub.local_cols.size) for sub in subproblems]
    shared_pos = [sub.shared_positions for sub in subproblems]
    shared_slot = [
        np.array([col_slot[int(sub.local_cols[p])] for p in shared_pos[si]], dtype=int)
        for si, sub in enumerate(subproblems)
    ]

    primal_hist: list[float] = []
    dual_hist: list[float] = []
    converged = False
    iterations = 0
    for it in range(params.max_iters):
        iterations = it + 1
        # 1) parallelizable local solves (sequential here for determinism)
        for si, sub in enumerate(subproblems):
            H = sub.quad
            lin = sub.lin.copy()
            if shared_pos[si].size:
                prox = np.zeros(sub.local_cols.size)
                prox[shared_pos[si]] = rho
                H = H + sp.diags(prox)
                lin[shared_pos[si]] += rho * (duals[si] - g[shared_slot[si]])
            y, _, _, _, _ = solve_qp_arrays(
                H, lin, sub.a_eq, sub.b_eq, sub.a_in, sub.b_in, tol=params.local_tol
            )
            locals_[si] = y
        if not shared_cols:
            primal_hist.append(0.0)
            dual_hist.append(0.0)
            converged = True
            break
        # 2) copiers ship copy+dual values to the owners
        for si, sub in enumerate(subproblems):
            for j, pos in sorted(sub.copies.items()):
                bus.send(it, sub.agent, j, pos.size)
        # 3) owners average and broadcast
        g_old = g
        sums = np.zeros(len(shared_cols))
        counts = np.zeros(len(shared_cols))
        for si in range(len(subproblems)):
            np.add.at(sums, shared_slot[si], locals_[si][shared_pos[si]] + duals[si])
            np.add.at(counts, shared_slot[si], 1.0)
        g = sums / counts
        for si, sub in enumerate(subproblems):
            for j, pos in sorted(sub.copies.items()):
                bus.send(it, j, sub.agent, pos.size)
        # 4) dual update and residuals
        r_sq = 0.0
        y_sq = 0.0
        u_sq = 0.0
        for si in range(len(subproblems)):
            y_shared = locals_[si][shared_pos[si]]
            diff = y_shared - g[shared_slot[si]]
            duals[si] = duals[si] + diff
            r_sq += float(diff @ diff)
            y_sq += float(y_shared @ y_shared)
            u_sq += float(duals[si] @ duals[si])
        g_rep_sq = float(counts @ (g * g))
        s_sq = rho * rho * float(counts @ ((g - g_old) * (g - g_old)))
        r = np.sqrt(r_sq)
        s = np.sqrt(s_sq)
        primal_hist.append(r)
        dual_hist.append(s)
        eps_pri = np.sqrt(n_refs) * params.eps_abs + params.eps_rel * max(
            np.sqrt(y_sq), np.sqrt(g_rep_sq)
        )
        eps_dual = np.sqrt(n_refs) * params.eps_abs + params.eps_rel * rho * np.sqrt(u_sq)
        if r <= eps_pri and s <= eps_dual:
            converged = True
            break
        # 5) residual balancing (scaled duals shrink when rho grows)
        if params.adaptive:
            if r > params.balance_threshold * s:
                rho *= params.balance_factor
                for si in range(len(subproblems)):
                    duals[si] = duals[si] / params.balance_factor
            elif s > params.balance_threshold * r:
                rho /= params.balance_factor
                for si in range(len(subproblems)):
                    duals[si] = duals[si] * params.balance_factor

    solution = np.zeros(num_vars)
    objective = 0.0
    for si, sub in enumerate(subproblems):
        own = sub.local_cols[: sub.num_own]
        y_own = locals_[si][: sub.num_own]
        solution[own] = y_own
        objective += float(
            0.5 * y_own @ (sub.quad[: sub.num_own, : sub.num_own] @ y_own)
            + sub.lin[: sub.num_own] @ y_own
        ) + sub.constant
    return SolveReport(
        solution=solution,
        objective=objective,
        iterations=iterations,
        converged=converged,
        method="admm",
        primal_residuals=primal_hist,
        dual_residuals=dual_hist,
        message_rounds=iterations,
        message_count=len(bus.log),
        message_floats=sum(m[3] for m in bus.log),
        messages=bus.log,
    )
