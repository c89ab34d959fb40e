"""Constraint tightening from error scenarios or Gaussian covariances.

For each half-space and time step, the scenario route discards the N_d most
restricting of N_s sampled projections and takes the maximum of the rest:

    N_d = max(0, floor((1-p) N_s - sqrt(2 (1-p) N_s ln(1/beta)))),
    c   = max over kept samples of h' xi.

State entries project error samples e_i(t); input entries project the stored
feedback samples pi_i(t). The analytic route, valid for zero-mean Gaussian
errors under linear tube feedback, is c = qnorm(p) * sqrt(h' Sigma h).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import norm

from .errors import ConfigError, DimensionMismatch


def discard_count(num_samples, p, beta) -> int:
    """Number of scenarios that may be discarded, floored and clamped at 0."""
    if num_samples < 1:
        raise ConfigError(f"sample count must be >= 1, got {num_samples}")
    if not 0.0 < p <= 1.0:
        raise ConfigError(f"probability level {p} outside (0, 1]")
    if not 0.0 < beta < 1.0:
        raise ConfigError(f"confidence parameter {beta} outside (0, 1)")
    raw = (1.0 - p) * num_samples - math.sqrt(
        2.0 * (1.0 - p) * num_samples * math.log(1.0 / beta)
    )
    return max(0, math.floor(raw))


def tighten_halfspace(direction, samples, p, beta) -> float:
    """Tightening value for one half-space from projected samples.

    Sorting the projections descending and dropping the first N_d is
    identical to iteratively discarding the argmax (ties broken toward the
    lowest sample index); the next projection is the returned maximum over
    the kept samples.
    """
    h = np.asarray(direction, dtype=float).reshape(-1)
    xi = np.asarray(samples, dtype=float)
    if xi.ndim == 1:
        xi = xi[:, None]
    if xi.shape[1] != h.size:
        raise DimensionMismatch(f"sample dim {xi.shape[1]} != direction dim {h.size}")
    ns = xi.shape[0]
    if ns < 1:
        raise ConfigError("need at least one sample")
    nd = discard_count(ns, p, beta)
    if ns - nd < 1:
        raise ConfigError(f"would discard all samples (N_s={ns}, N_d={nd})")
    proj = xi @ h
    order = np.argsort(-proj, kind="stable")
    return float(proj[order[nd]])


@dataclass
class TighteningTable:
    """Tightening values for every subsystem, half-space, and time step.

    ``state[i]`` and ``input[i]`` are arrays of shape (n_constraints_i,
    horizon+1); entry [j, t] is the value subtracted from the level-1
    right-hand side at absolute time t. ``state_meta``/``input_meta`` carry
    (p, N_d) per constraint row; ``num_samples``/``beta`` apply table-wide
    (the analytic route stores N_d = 0 and num_samples = 0).
    """

    horizon: int
    state: dict[int, np.ndarray] = field(default_factory=dict)
    input: dict[int, np.ndarray] = field(default_factory=dict)
    state_meta: dict[int, list[tuple[float, int]]] = field(default_factory=dict)
    input_meta: dict[int, list[tuple[float, int]]] = field(default_factory=dict)
    num_samples: int = 0
    beta: float = 0.0
    method: str = "scenario"

    def state_value(self, i, j, t) -> float:
        try:
            return float(self.state[i][j, t])
        except (KeyError, IndexError):
            raise ConfigError(f"no state tightening entry for (i={i}, j={j}, t={t})")

    def input_value(self, i, j, t) -> float:
        try:
            return float(self.input[i][j, t])
        except (KeyError, IndexError):
            raise ConfigError(f"no input tightening entry for (i={i}, j={j}, t={t})")

    @staticmethod
    def zeros(model, constraints, horizon) -> "TighteningTable":
        """All-zero table: the untightened nominal problem."""
        table = TighteningTable(horizon=horizon, method="zero")
        for i in range(model.M):
            ns, nu = len(constraints.state_for(i)), len(constraints.input_for(i))
            table.state[i] = np.zeros((ns, horizon + 1))
            table.input[i] = np.zeros((nu, horizon + 1))
            table.state_meta[i] = [(hs.probability, 0) for hs in constraints.state_for(i)]
            table.input_meta[i] = [(hs.probability, 0) for hs in constraints.input_for(i)]
        return table

    def max_value(self) -> float:
        vals = [a.max() for a in self.state.values() if a.size] + [
            a.max() for a in self.input.values() if a.size
        ]
        return max(vals) if vals else 0.0

    def save(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["kind", "i", "j", "t", "c", "N_s", "N_d", "p", "beta"])
            for kind, values, meta in (
                ("state", self.state, self.state_meta),
                ("input", self.input, self.input_meta),
            ):
                for i in sorted(values):
                    arr = values[i]
                    for j in range(arr.shape[0]):
                        p, nd = meta[i][j]
                        for t in range(arr.shape[1]):
                            writer.writerow(
                                [kind, i, j, t, f"{arr[j, t]:.17g}", self.num_samples,
                                 nd, f"{p:.17g}", f"{self.beta:.17g}"]
                            )

    @staticmethod
    def load(path) -> "TighteningTable":
        rows = []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                rows.append(row)
        if not rows:
            raise ConfigError(f"empty tightening table {path}")
        horizon = max(int(r["t"]) for r in rows)
        table = TighteningTable(
            horizon=horizon,
            num_samples=int(rows[0]["N_s"]),
            beta=float(rows[0]["beta"]),
        )
        shapes: dict[tuple[str, int], int] = {}
        for r in rows:
            key = (r["kind"], int(r["i"]))
            shapes[key] = max(shapes.get(key, -1), int(r["j"]))
        for (kind, i), jmax in shapes.items():
            target = table.state if kind == "state" else table.input
            meta = table.state_meta if kind == "state" else table.input_meta
            target[i] = np.zeros((jmax + 1, horizon + 1))
            meta[i] = [(0.0, 0)] * (jmax + 1)
        for r in rows:
            kind, i, j, t = r["kind"], int(r["i"]), int(r["j"]), int(r["t"])
            target = table.state if kind == "state" else table.input
            meta = table.state_meta if kind == "state" else table.input_meta
            target[i][j, t] = float(r["c"])
            meta[i][j] = (float(r["p"]), int(r["N_d"]))
        return table


def tighten_all(model, constraints, errorbank, controller, beta) -> TighteningTable:
    """Scenario tightening for every (subsystem, half-space, time) entry.

    State half-spaces are tightened against the sampled errors e_i(t); input
    half-spaces against the sampled feedbacks pi_i(t) stored alongside them.
    """
    controller.validate_against(model)
    table = TighteningTable(
        horizon=errorbank.horizon, num_samples=errorbank.count, beta=beta
    )
    known = set(range(model.M))
    for hs in constraints:
        if hs.owner not in known:
            raise ConfigError(f"constraint owner {hs.owner} not in the model")
    for i in range(model.M):
        state_hs = constraints.state_for(i)
        input_hs = constraints.input_for(i)
        table.state[i] = np.zeros((len(state_hs), errorbank.horizon + 1))
        table.input[i] = np.zeros((len(input_hs), errorbank.horizon + 1))
        table.state_meta[i] = [
            (hs.probability, discard_count(errorbank.count, hs.probability, beta))
            for hs in state_hs
        ]
        table.input_meta[i] = [
            (hs.probability, discard_count(errorbank.count, hs.probability, beta))
            for hs in input_hs
        ]
        for t in range(errorbank.horizon + 1):
            e = errorbank.errors_at(model, i, t)
            pi = errorbank.feedbacks_at(model, i, t)
            for j, hs in enumerate(state_hs):
                table.state[i][j, t] = tighten_halfspace(hs.direction, e, hs.probability, beta)
            for j, hs in enumerate(input_hs):
                table.input[i][j, t] = tighten_halfspace(hs.direction, pi, hs.probability, beta)
    return table


def analytic_tightening(direction, covariance, p) -> float:
    """Gaussian quantile tightening: qnorm(p) * sqrt(h' Sigma h)."""
    if not 0.0 < p < 1.0:
        raise ConfigError(f"probability level {p} outside (0, 1)")
    h = np.asarray(direction, dtype=float).reshape(-1)
    sigma = np.atleast_2d(np.asarray(covariance, dtype=float))
    if sigma.shape != (h.size, h.size):
        raise DimensionMismatch(f"covariance shape {sigma.shape} != ({h.size}, {h.size})")
    if not np.allclose(sigma, sigma.T, atol=1e-10):
        raise ConfigError("covariance must be symmetric")
    variance = float(h @ sigma @ h)
    if variance < -1e-10 * max(1.0, float(np.abs(sigma).max())):
        raise ConfigError("covariance is not positive semidefinite along the direction")
    return float(norm.ppf(p) * math.sqrt(max(variance, 0.0)))


def analytic_table(model, constraints, controller, covariances, horizon) -> TighteningTable:
    """Tightening table from propagated error covariances.

    State entries use the marginal error covariance; input entries the
    feedback covariance K_i Sigma_{N_i}(t) K_i'. Assumes zero-mean errors
    (linear tube feedback, zero-mean disturbances).
    """
    table = TighteningTable(horizon=horizon, num_samples=0, beta=0.0, method="analytic")
    for i in range(model.M):
        state_hs = constraints.state_for(i)
        input_hs = constraints.input_for(i)
        table.state[i] = np.zeros((len(state_hs), horizon + 1))
        table.input[i] = np.zeros((len(input_hs), horizon + 1))
        table.state_meta[i] = [(hs.probability, 0) for hs in state_hs]
        table.input_meta[i] = [(hs.probability, 0) for hs in input_hs]
        K = controller.gains[i]
        for t in range(horizon + 1):
            sig_i = covariances.marginal(model, i, t)
            sig_pi = K @ covariances.neighborhood(model, i, t) @ K.T
            for j, hs in enumerate(state_hs):
                table.state[i][j, t] = analytic_tightening(hs.direction, sig_i, hs.probability)
            for j, hs in enumerate(input_hs):
                table.input[i][j, t] = analytic_tightening(hs.direction, sig_pi, hs.probability)
    return table
