"""Shared builders for small test networks."""

import numpy as np

from dsmpc.network import ConstraintSet, HalfSpace, NetworkModel, SubsystemModel


def scalar_subsystem(i, a_blocks, b=1.0, g=1.0):
    return SubsystemModel(
        index=i,
        nx=1,
        nu=1,
        nw=1,
        A={j: np.array([[float(v)]]) for j, v in a_blocks.items()},
        B=np.array([[float(b)]]),
        G=np.array([[float(g)]]),
    )


def scalar_network(diagonals, couplings=None, b=1.0, g=1.0):
    """Network of scalar agents: diagonals per agent, couplings {(i, j): value}."""
    couplings = couplings or {}
    blocks = {i: {i: d} for i, d in enumerate(diagonals)}
    for (i, j), v in couplings.items():
        blocks[i][j] = v
    return NetworkModel([scalar_subsystem(i, blocks[i], b, g) for i in range(len(diagonals))])


def single_agent(a=0.5, b=1.0, g=1.0):
    return scalar_network([a], b=b, g=g)


def box_constraints(model, x_bound=5.0, u_bound=1.0, p=0.9):
    """Two-sided state/input bounds as four half-spaces per scalar agent."""
    cs = ConstraintSet()
    for s in model.subsystems:
        cs.add(HalfSpace.normalized(s.index, "state", [1.0], x_bound, p))
        cs.add(HalfSpace.normalized(s.index, "state", [-1.0], x_bound, p))
        cs.add(HalfSpace.normalized(s.index, "input", [1.0], u_bound, p))
        cs.add(HalfSpace.normalized(s.index, "input", [-1.0], u_bound, p))
    return cs


def random_scalar_network(rng, m, diag=1.01, coupling=0.01, density=0.5, b=1.0, g=1.0):
    """Random sparse coupling pattern, Gersgorin-friendly magnitudes."""
    couplings = {}
    for i in range(m):
        for j in range(m):
            if i != j and rng.random() < density:
                couplings[(i, j)] = coupling * (0.5 + rng.random())
    return scalar_network([diag] * m, couplings, b=b, g=g)
