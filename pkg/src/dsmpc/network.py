"""Coupled linear time-invariant network models.

A network is an ordered collection of subsystems with block-sparse state
coupling: subsystem i evolves as

    x_i(t+1) = sum_j A_ij x_j(t) + B_i u_i(t) + G_i w_i(t)

where A_ij is stored only for neighbors j (blocks with nonzero entries).
Neighborhood vectors always stack components in ascending subsystem index;
every consumer of neighborhood slices (tube feedback, QP assembly, the
distributed solver) relies on that ordering.

Construction never raises on structural problems; ``validate_network``
returns the full violation report and stepping refuses to run on an invalid
model. Models are immutable after construction and safe to share.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionMismatch


@dataclass(frozen=True)
class SubsystemModel:
    """One subsystem: local dimensions and its coupling/input/noise blocks.

    ``A`` maps neighbor index j to the n_i x n_j coupling block. A subsystem
    is its own neighbor whenever the diagonal block is present; callers that
    need the coupling graph without self-loops use ``strict_neighbors``.
    """

    index: int
    nx: int
    nu: int
    nw: int
    A: dict[int, np.ndarray]
    B: np.ndarray
    G: np.ndarray

    def neighbors(self) -> list[int]:
        """Neighbor indices in ascending order (includes self if A_ii stored)."""
        return sorted(self.A.keys())

    def strict_neighbors(self) -> list[int]:
        return [j for j in self.neighbors() if j != self.index]


@dataclass(frozen=True)
class HalfSpace:
    """Half-space chance constraint  Pr(direction' y <= 1) >= probability.

    ``kind`` is "state" or "input"; ``direction`` has the owner's state or
    input dimension. The right-hand level is fixed to 1 by normalization, so
    constraints through the origin are unsupported (see ``normalized``).
    """

    owner: int
    kind: str
    direction: np.ndarray
    probability: float

    @staticmethod
    def normalized(owner, kind, direction, bound=1.0, probability=0.9) -> "HalfSpace":
        """Build a half-space from  direction' y <= bound  with bound > 0."""
        direction = np.asarray(direction, dtype=float).reshape(-1)
        if bound <= 0:
            raise ConfigError(
                f"half-space for subsystem {owner} has bound {bound}; only strictly "
                "positive bounds are supported (constraints through the origin are not)"
            )
        if not np.any(direction):
            raise ConfigError(f"half-space for subsystem {owner} has a zero direction")
        if not 0.0 < probability < 1.0:
            raise ConfigError(f"probability level {probability} outside (0, 1)")
        return HalfSpace(owner, kind, direction / bound, probability)


class ConstraintSet:
    """All half-space constraints of a network, grouped per owner.

    Within one owner the per-kind ordering follows insertion order; that
    position is the constraint index j used by tightening tables and reports.
    """

    def __init__(self, halfspaces=()):
        self._state: dict[int, list[HalfSpace]] = {}
        self._input: dict[int, list[HalfSpace]] = {}
        for hs in halfspaces:
            self.add(hs)

    def add(self, hs: HalfSpace):
        if hs.kind not in ("state", "input"):
            raise ConfigError(f"unknown constraint kind {hs.kind!r}")
        table = self._state if hs.kind == "state" else self._input
        table.setdefault(hs.owner, []).append(hs)

    def state_for(self, i) -> list[HalfSpace]:
        return self._state.get(i, [])

    def input_for(self, i) -> list[HalfSpace]:
        return self._input.get(i, [])

    def owners(self) -> list[int]:
        return sorted(set(self._state) | set(self._input))

    def __iter__(self):
        for i in self.owners():
            yield from self.state_for(i)
            yield from self.input_for(i)

    def __len__(self):
        return sum(len(v) for v in self._state.values()) + sum(
            len(v) for v in self._input.values()
        )


class NetworkModel:
    """Immutable network of coupled LTI subsystems.

    Offsets into the stacked state/input/disturbance vectors are precomputed;
    ``state_slice(i)`` etc. give each subsystem's span. Dense assembled
    matrices are available through ``full_state_matrix`` and friends; they
    serve oracles and small-scale checks, not large-M stepping.
    """

    def __init__(self, subsystems):
        subs = sorted(subsystems, key=lambda s: s.index)
        self.subsystems: tuple[SubsystemModel, ...] = tuple(subs)
        self.M = len(subs)
        self.violations: list[str] = validate_network_list(subs)
        self._x_off = np.cumsum([0] + [s.nx for s in subs])
        self._u_off = np.cumsum([0] + [s.nu for s in subs])
        self._w_off = np.cumsum([0] + [s.nw for s in subs])
        self._nbr_state_idx = {}
        self._nbr_block_cache: dict[int, np.ndarray] = {}
        for pos, s in enumerate(subs):
            spans = [
                np.arange(self._x_off[j], self._x_off[j + 1])
                for j in s.neighbors()
                if 0 <= j < self.M
            ]
            self._nbr_state_idx[pos] = (
                np.concatenate(spans) if spans else np.zeros(0, dtype=int)
            )

    def require_valid(self):
        if self.violations:
            raise ConfigError("invalid network model: " + "; ".join(self.violations))

    # -- dimensions and slicing ------------------------------------------------

    @property
    def nx_total(self) -> int:
        return int(self._x_off[-1])

    @property
    def nu_total(self) -> int:
        return int(self._u_off[-1])

    @property
    def nw_total(self) -> int:
        return int(self._w_off[-1])

    def state_slice(self, i) -> slice:
        return slice(int(self._x_off[i]), int(self._x_off[i + 1]))

    def input_slice(self, i) -> slice:
        return slice(int(self._u_off[i]), int(self._u_off[i + 1]))

    def disturbance_slice(self, i) -> slice:
        return slice(int(self._w_off[i]), int(self._w_off[i + 1]))

    def neighborhood_state_indices(self, i) -> np.ndarray:
        """Global state indices of the stacked neighborhood vector x_{N_i}."""
        return self._nbr_state_idx[i]

    def neighborhood_state_dim(self, i) -> int:
        return int(self._nbr_state_idx[i].size)

    def neighborhood_block(self, i) -> np.ndarray:
        """A_{N_i}: the n_i x n_{N_i} matrix acting on the neighborhood vector."""
        if i not in self._nbr_block_cache:
            s = self.subsystems[i]
            blocks = [s.A[j] for j in s.neighbors()]
            self._nbr_block_cache[i] = np.hstack(blocks) if blocks else np.zeros((s.nx, 0))
        return self._nbr_block_cache[i]

    # -- dynamics ----------------------------------------------------------------

    def step(self, x, u, w) -> np.ndarray:
        """One exact step of the stacked dynamics, block by block."""
        self.require_valid()
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        w = np.asarray(w, dtype=float)
        for name, vec, expected in (
            ("state", x, self.nx_total),
            ("input", u, self.nu_total),
            ("disturbance", w, self.nw_total),
        ):
            if vec.shape != (expected,):
                got = vec.shape[0] if vec.ndim == 1 else -1
                raise DimensionMismatch(
                    f"{name} vector has shape {vec.shape}, expected ({expected},)",
                    subsystem=self._locate_dim_break(name, got),
                )
        out = np.empty(self.nx_total)
        for s in self.subsystems:
            acc = s.B @ u[self.input_slice(s.index)] + s.G @ w[self.disturbance_slice(s.index)]
            for j in s.neighbors():
                acc = acc + s.A[j] @ x[self.state_slice(j)]
            out[self.state_slice(s.index)] = acc
        return out

    def _locate_dim_break(self, name, got):
        # First subsystem whose cumulative span exceeds the supplied data;
        # for over-long data the trailing subsystem's span is the break point.
        off = {"state": self._x_off, "input": self._u_off, "disturbance": self._w_off}[name]
        for i in range(self.M):
            if off[i + 1] > got:
                return i
        return self.M - 1 if self.M else None

    # -- dense assembled views (oracle path) --------------------------------------

    def full_state_matrix(self) -> np.ndarray:
        A = np.zeros((self.nx_total, self.nx_total))
        for s in self.subsystems:
            for j in s.neighbors():
                A[self.state_slice(s.index), self.state_slice(j)] = s.A[j]
        return A

    def full_input_matrix(self) -> np.ndarray:
        B = np.zeros((self.nx_total, self.nu_total))
        for s in self.subsystems:
            B[self.state_slice(s.index), self.input_slice(s.index)] = s.B
        return B

    def full_noise_matrix(self) -> np.ndarray:
        G = np.zeros((self.nx_total, self.nw_total))
        for s in self.subsystems:
            G[self.state_slice(s.index), self.disturbance_slice(s.index)] = s.G
        return G

    def step_dense(self, x, u, w) -> np.ndarray:
        """Full-matrix stepping; reference implementation for tests."""
        return (
            self.full_state_matrix() @ np.asarray(x, dtype=float)
            + self.full_input_matrix() @ np.asarray(u, dtype=float)
            + self.full_noise_matrix() @ np.asarray(w, dtype=float)
        )

    # -- serialization -------------------------------------------------------------

    def to_dict(self, constraints: ConstraintSet | None = None) -> dict:
        doc = {
            "subsystems": [
                {
                    "index": s.index,
                    "state_dim": s.nx,
                    "input_dim": s.nu,
                    "disturbance_dim": s.nw,
                    "couplings": {str(j): s.A[j].tolist() for j in s.neighbors()},
                    "input_matrix": s.B.tolist(),
                    "noise_matrix": s.G.tolist(),
                }
                for s in self.subsystems
            ]
        }
        if constraints is not None:
            doc["constraints"] = [
                {
                    "owner": hs.owner,
                    "kind": hs.kind,
                    "direction": hs.direction.tolist(),
                    "probability": hs.probability,
                }
                for hs in constraints
            ]
        return doc

    def save(self, path, constraints: ConstraintSet | None = None):
        Path(path).write_text(json.dumps(self.to_dict(constraints), indent=2))


def validate_network_list(subsystems) -> list[str]:
    """Collect every structural violation; empty list means valid."""
    report = []
    M = len(subsystems)
    seen = {}
    for s in subsystems:
        if s.index in seen:
            report.append(f"duplicate subsystem index {s.index}")
        seen[s.index] = s
    for i in range(M):
        if i not in seen:
            report.append(f"missing subsystem index {i} (indices must cover 0..M-1)")
    for s in subsystems:
        i = s.index
        if s.B.shape != (s.nx, s.nu):
            report.append(f"subsystem {i}: input matrix shape {s.B.shape} != ({s.nx}, {s.nu})")
        if s.G.shape != (s.nx, s.nw):
            report.append(f"subsystem {i}: noise matrix shape {s.G.shape} != ({s.nx}, {s.nw})")
        for j in sorted(s.A.keys()):
            block = s.A[j]
            if j < 0 or j >= M:
                report.append(f"subsystem {i}: coupling to nonexistent subsystem {j}")
                continue
            nj = seen[j].nx if j in seen else None
            if nj is not None and block.shape != (s.nx, nj):
                report.append(
                    f"subsystem {i}: coupling block to {j} has shape {block.shape}, "
                    f"expected ({s.nx}, {nj})"
                )
            if not np.any(block):
                report.append(
                    f"subsystem {i}: stored all-zero coupling block marks {j} as a spurious neighbor"
                )
    return report


def validate_network(model) -> list[str]:
    """Report-style validation of a model or a plain subsystem list."""
    subs = model.subsystems if isinstance(model, NetworkModel) else list(model)
    return validate_network_list(subs)


def gersgorin_stable(matrix) -> bool:
    """Strict row-sum condition |a_ii| + sum_{j != i} |a_ij| < 1 for every row."""
    A = np.asarray(matrix, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {A.shape}")
    return bool(np.all(np.sum(np.abs(A), axis=1) < 1.0))


def gersgorin_row_sums(matrix) -> np.ndarray:
    A = np.asarray(matrix, dtype=float)
    return np.sum(np.abs(A), axis=1)


def subsystem_from_dict(doc: dict) -> SubsystemModel:
    try:
        couplings = {
            int(j): np.asarray(block, dtype=float)
            for j, block in doc.get("couplings", {}).items()
        }
        return SubsystemModel(
            index=int(doc["index"]),
            nx=int(doc["state_dim"]),
            nu=int(doc["input_dim"]),
            nw=int(doc["disturbance_dim"]),
            A=couplings,
            B=np.asarray(doc["input_matrix"], dtype=float),
            G=np.asarray(doc["noise_matrix"], dtype=float),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad subsystem entry: {exc}") from exc


def load_network(source) -> tuple[NetworkModel, ConstraintSet]:
    """Load a network and its constraint list from a JSON file path or dict.

    Schema: ``{"subsystems": [{index, state_dim, input_dim, disturbance_dim,
    couplings: {j: rows}, input_matrix, noise_matrix}], "constraints":
    [{owner, kind, direction, bound?, probability}]}``. Matrices are
    row-major nested lists; ``bound`` defaults to 1 and rescales ``direction``
    so the stored level is always 1.
    """
    if isinstance(source, (str, Path)):
        doc = json.loads(Path(source).read_text())
    else:
        doc = source
    if not isinstance(doc, dict) or "subsystems" not in doc:
        raise ConfigError("network document must be an object with 'subsystems'")
    model = NetworkModel([subsystem_from_dict(s) for s in doc["subsystems"]])
    model.require_valid()
    constraints = ConstraintSet()
    for c in doc.get("constraints", []):
        try:
            constraints.add(
                HalfSpace.normalized(
                    owner=int(c["owner"]),
                    kind=c["kind"],
                    direction=c["direction"],
                    bound=float(c.get("bound", 1.0)),
                    probability=float(c["probability"]),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad constraint entry: {exc}") from exc
    for hs in constraints:
        if hs.owner < 0 or hs.owner >= model.M:
            raise ConfigError(f"constraint owner {hs.owner} outside 0..{model.M - 1}")
        dim = model.subsystems[hs.owner].nx if hs.kind == "state" else model.subsystems[hs.owner].nu
        if hs.direction.shape != (dim,):
            raise ConfigError(
                f"constraint on subsystem {hs.owner} has direction length "
                f"{hs.direction.size}, expected {dim}"
            )
    return model, constraints
