"""Structured quadratic program container.

The QP minimizes 0.5 y' H y + f' y + constant over stacked decision
variables y subject to equality and inequality rows. Variables are grouped
per agent (nominal states z_i(0..N), then nominal inputs v_i(0..N-1)), rows
are grouped per agent as well, and every row touches only columns of the
owning agent's neighborhood. That annotation is what the distributed solver
partitions on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp


@dataclass(frozen=True)
class RowLabel:
    """Identity of one constraint row, used in diagnostics and reports."""

    category: str  # "init" | "dynamics" | "terminal" | "state" | "input"
    agent: int
    constraint: int  # j for half-space rows, state component otherwise
    step: int  # prediction index k (or 0 for init/terminal)

    def __str__(self):
        return f"{self.category}(agent={self.agent}, j={self.constraint}, k={self.step})"


@dataclass
class AgentBlocks:
    """Column/row bookkeeping for one agent inside the stacked QP."""

    index: int
    z_cols: np.ndarray  # (N+1, n_i) global column ids
    v_cols: np.ndarray  # (N, m_i)
    eq_rows: np.ndarray
    in_rows: np.ndarray
    neighbors: list[int]


@dataclass
class QpProblem:
    """Stacked convex QP with agent-block structure annotations."""

    quad: sp.csr_matrix
    lin: np.ndarray
    constant: float
    a_eq: sp.csr_matrix
    b_eq: np.ndarray
    a_in: sp.csr_matrix
    b_in: np.ndarray
    eq_labels: list[RowLabel]
    in_labels: list[RowLabel]
    agents: list[AgentBlocks] = field(default_factory=list)
    horizon: int = 0

    @property
    def num_vars(self) -> int:
        return self.lin.shape[0]

    @property
    def num_eq(self) -> int:
        return self.a_eq.shape[0]

    @property
    def num_in(self) -> int:
        return self.a_in.shape[0]

    def objective_value(self, y) -> float:
        y = np.asarray(y, dtype=float)
        return float(0.5 * y @ (self.quad @ y) + self.lin @ y + self.constant)

    def residuals(self, y) -> tuple[float, float]:
        """(max |eq residual|, max positive inequality violation)."""
        y = np.asarray(y, dtype=float)
        eq = float(np.max(np.abs(self.a_eq @ y - self.b_eq))) if self.num_eq else 0.0
        iq = float(np.max(self.a_in @ y - self.b_in, initial=0.0)) if self.num_in else 0.0
        return eq, iq

    def violated_rows(self, y, tol=1e-8):
        y = np.asarray(y, dtype=float)
        out = []
        if self.num_eq:
            res = np.abs(self.a_eq @ y - self.b_eq)
            out += [(self.eq_labels[r], float(res[r])) for r in np.nonzero(res > tol)[0]]
        if self.num_in:
            res = self.a_in @ y - self.b_in
            out += [(self.in_labels[r], float(res[r])) for r in np.nonzero(res > tol)[0]]
        return out

    def export_triplets(self, path):
        """Plain-text sparse export for external verification.

        Sections: header line `qp <num_vars> <num_eq> <num_in> <constant>`,
        then `H i j value`, `f i value`, `Aeq r c value` / `beq r value`,
        `Ain r c value` / `bin r value`, one entry per line.
        """
        lines = [f"qp {self.num_vars} {self.num_eq} {self.num_in} {self.constant:.17g}"]
        H = self.quad.tocoo()
        lines += [f"H {r} {c} {v:.17g}" for r, c, v in zip(H.row, H.col, H.data)]
        lines += [f"f {i} {v:.17g}" for i, v in enumerate(self.lin) if v != 0.0]
        for mat_name, vec_name, mat, vec in (
            ("Aeq", "beq", self.a_eq, self.b_eq),
            ("Ain", "bin", self.a_in, self.b_in),
        ):
            coo = mat.tocoo()
            lines += [f"{mat_name} {r} {c} {v:.17g}" for r, c, v in zip(coo.row, coo.col, coo.data)]
            lines += [f"{vec_name} {r} {v:.17g}" for r, v in enumerate(vec)]
        Path(path).write_text("\n".join(lines) + "\n")


class TripletBuilder:
    """Accumulates (row, col, value) entries for one sparse matrix."""

    def __init__(self):
        self.rows, self.cols, self.vals = [], [], []

    def add_block(self, row0, cols, block):
        block = np.atleast_2d(np.asarray(block, dtype=float))
        r, c = np.nonzero(block)
        self.rows += (row0 + r).tolist()
        self.cols += np.asarray(cols)[c].tolist()
        self.vals += block[r, c].tolist()

    def add_row(self, row, cols, values):
        values = np.asarray(values, dtype=float)
        keep = values != 0.0
        self.rows += [row] * int(keep.sum())
        self.cols += np.asarray(cols)[keep].tolist()
        self.vals += values[keep].tolist()

    def build(self, shape) -> sp.csr_matrix:
        return sp.coo_matrix((self.vals, (self.rows, self.cols)), shape=shape).tocsr()
