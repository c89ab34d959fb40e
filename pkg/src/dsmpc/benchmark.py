"""Data-center cooling benchmark: a large network of thermally coupled servers.

Each server's scalar state is its temperature deviation from the desired
operating point; servers heat their neighbors within a coupling radius, with
strength decaying as 0.01/(1 + distance) around a self-term of 1.01. The
square hosting the uniformly placed servers is calibrated by bisection so
the expected number of strict neighbors matches the target (22.4 at M=100):
for two uniform points in a square of side L and radius r <= L,

    P(dist <= r) = pi (r/L)^2 - (8/3) (r/L)^3 + (1/2) (r/L)^4.

Disturbances model computational load: a known sinusoidal daily mean plus
AR(1) deviations. Amplitudes below are chosen so the tightened input
constraints are exercised during load peaks while the closed-loop error map
stays Gersgorin-stable; construction rejects any instance whose error-map
row sums reach 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .disturbance import DisturbanceSpec
from .errors import ConfigError
from .errorsim import TubeController, closed_loop_error_matrix
from .mpc import CostSpec
from .network import (
    ConstraintSet,
    HalfSpace,
    NetworkModel,
    SubsystemModel,
    gersgorin_row_sums,
)


@dataclass
class BenchmarkSpec:
    """Parameters of the cooling benchmark; defaults are the paper-scale run."""

    num_subsystems: int = 100
    coupling_radius: float = 1.0
    mean_degree: float = 22.4
    self_coupling: float = 1.01
    coupling_scale: float = 0.01
    tube_gain: float = -0.5
    state_bound: float = 5.0
    input_bound: float = 1.0
    probability: float = 0.9
    state_weight: float = 1.0
    input_weight: float = 1000.0
    terminal_weight: float = 1.0
    prediction_horizon: int = 24  # 12 h at 0.5 h sampling
    run_steps: int = 96  # 2 days
    num_scenarios: int = 100
    mpc_samples: int = 10
    beta: float = 0.01
    load_amplitude: float = 0.2
    load_offset: float = 0.0
    load_period: float = 48.0  # one day at 0.5 h sampling
    load_phase: float = 0.0
    load_rho: float = 0.8
    load_innovation_std: float = 0.08

    @property
    def task_horizon(self) -> int:
        return self.run_steps + self.prediction_horizon

    @staticmethod
    def from_dict(doc: dict) -> "BenchmarkSpec":
        fields = BenchmarkSpec.__dataclass_fields__
        unknown = set(doc) - set(fields)
        if unknown:
            raise ConfigError(f"unknown benchmark keys: {sorted(unknown)}")
        return BenchmarkSpec(**doc)


def pair_within_radius_probability(radius, side) -> float:
    """P(two uniform points in a side x side square are within radius)."""
    if radius >= side:
        raise ConfigError("calibration assumes radius <= side length")
    q = radius / side
    return np.pi * q**2 - (8.0 / 3.0) * q**3 + 0.5 * q**4


def calibrate_side_length(spec: BenchmarkSpec) -> float:
    """Bisection on the square side so E[strict degree] = mean_degree."""
    target = spec.mean_degree / (spec.num_subsystems - 1)
    if not 0.0 < target < 0.97:
        raise ConfigError(
            f"mean degree {spec.mean_degree} unreachable with M={spec.num_subsystems}"
        )
    lo = spec.coupling_radius * 1.0000001
    hi = spec.coupling_radius * 2.0
    while pair_within_radius_probability(spec.coupling_radius, hi) > target:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if pair_within_radius_probability(spec.coupling_radius, mid) > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass
class BenchmarkArtifacts:
    """Everything the closed-loop pipeline needs, plus placement provenance."""

    model: NetworkModel
    constraints: ConstraintSet
    tube: TubeController
    cost: CostSpec
    disturbance: DisturbanceSpec
    spec: BenchmarkSpec
    positions: np.ndarray
    side_length: float

    def mean_strict_degree(self) -> float:
        return float(
            np.mean([len(s.strict_neighbors()) for s in self.model.subsystems])
        )


def build_datacenter_benchmark(spec: BenchmarkSpec, seed=0) -> BenchmarkArtifacts:
    """Place servers, build couplings, constraints, cost, and load model.

    Raises ConfigError when the closed-loop error map violates the strict
    Gersgorin row condition, listing the offending rows.
    """
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0xB,)))
    M = spec.num_subsystems
    if M == 1:
        side = 1.0
        positions = np.zeros((1, 2))
    else:
        side = calibrate_side_length(spec)
        positions = rng.uniform(0.0, side, size=(M, 2))
    subsystems = []
    for i in range(M):
        blocks = {i: np.array([[spec.self_coupling]])}
        if M > 1:
            d = np.linalg.norm(positions - positions[i], axis=1)
            for j in np.nonzero((d <= spec.coupling_radius) & (np.arange(M) != i))[0]:
                blocks[int(j)] = np.array([[spec.coupling_scale / (1.0 + d[j])]])
        subsystems.append(
            SubsystemModel(index=i, nx=1, nu=1, nw=1, A=blocks,
                           B=np.array([[1.0]]), G=np.array([[1.0]]))
        )
    model = NetworkModel(subsystems)
    model.require_valid()

    constraints = ConstraintSet()
    for i in range(M):
        constraints.add(HalfSpace.normalized(i, "state", [1.0], spec.state_bound, spec.probability))
        constraints.add(HalfSpace.normalized(i, "state", [-1.0], spec.state_bound, spec.probability))
        constraints.add(HalfSpace.normalized(i, "input", [1.0], spec.input_bound, spec.probability))
        constraints.add(HalfSpace.normalized(i, "input", [-1.0], spec.input_bound, spec.probability))

    tube = TubeController.own_state_gain(model, spec.tube_gain)
    row_sums = gersgorin_row_sums(closed_loop_error_matrix(model, tube))
    bad = np.nonzero(row_sums >= 1.0)[0]
    if bad.size:
        worst = {int(i): float(row_sums[i]) for i in bad[:10]}
        raise ConfigError(
            f"closed-loop error map fails the Gersgorin row condition at rows {worst}"
        )

    cost = CostSpec.uniform(
        model,
        state=spec.state_weight,
        input=spec.input_weight,
        terminal=spec.terminal_weight,
        mpc_samples=spec.mpc_samples,
    )
    disturbance = DisturbanceSpec(
        kind="periodic-mean-ar1",
        covariance=spec.load_innovation_std**2,
        rho=spec.load_rho,
        mean=spec.load_offset,
        amplitude=spec.load_amplitude,
        period=spec.load_period,
        phase=spec.load_phase,
    )
    return BenchmarkArtifacts(
        model=model,
        constraints=constraints,
        tube=tube,
        cost=cost,
        disturbance=disturbance,
        spec=spec,
        positions=positions,
        side_length=side,
    )
