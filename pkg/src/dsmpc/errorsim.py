"""Tube feedback and autonomous error-system simulation.

The closed-loop error obeys

    e_i(t+1) = A_{N_i} e_{N_i}(t) + B_i pi_i(e_{N_i}(t)) + G_i w_i(t),
    e_i(0) = 0,

independently of the MPC optimization, so whole banks of error trajectories
can be rolled out offline from disturbance scenarios. The same rollout core
serves the per-step error predictions of the MPC cost (arbitrary initial
error, conditional disturbance samples).

For linear (unsaturated) tube feedback and Gaussian AR(1) disturbances the
error covariance admits an exact recursion on the joint (error, deviation)
process, used by the analytic tightening shortcut.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .disturbance import ScenarioBank
from .errors import ConfigError, DimensionMismatch, UnsupportedModel


@dataclass(frozen=True)
class TubeController:
    """Per-subsystem error feedback  pi_i = clamp(K_i e_{N_i}).

    ``gains[i]`` has shape (m_i, n_{N_i}) in canonical neighborhood ordering.
    ``saturation[i]``, when present, is an (lo, hi) pair of per-channel input
    bounds applied elementwise after the linear map.
    """

    gains: dict[int, np.ndarray]
    saturation: dict[int, tuple[np.ndarray, np.ndarray]] | None = None

    @property
    def is_saturated(self) -> bool:
        return bool(self.saturation)

    def bounds_for(self, i):
        if self.saturation and i in self.saturation:
            return self.saturation[i]
        return None

    @staticmethod
    def own_state_gain(model, gain, saturation=None) -> "TubeController":
        """Gain acting on the subsystem's own error only: pi_i = gain * e_i.

        ``gain`` is a scalar or per-subsystem dict of scalars; requires
        m_i == n_i per subsystem. ``saturation`` is an optional (lo, hi)
        scalar pair applied to every channel of every subsystem.
        """
        gains = {}
        for s in model.subsystems:
            if s.nu != s.nx:
                raise ConfigError(
                    f"own-state gain needs m_i == n_i, subsystem {s.index} has "
                    f"({s.nu}, {s.nx})"
                )
            g = gain[s.index] if isinstance(gain, dict) else gain
            K = np.zeros((s.nu, model.neighborhood_state_dim(s.index)))
            nbrs = s.neighbors()
            if s.index not in nbrs:
                raise ConfigError(
                    f"subsystem {s.index} has no diagonal block; own-state gain undefined"
                )
            col = 0
            for j in nbrs:
                nj = model.subsystems[j].nx
                if j == s.index:
                    K[:, col : col + nj] = g * np.eye(s.nx)
                col += nj
            gains[s.index] = K
        sat = None
        if saturation is not None:
            lo, hi = saturation
            sat = {
                s.index: (np.full(s.nu, float(lo)), np.full(s.nu, float(hi)))
                for s in model.subsystems
            }
        return TubeController(gains=gains, saturation=sat)

    def validate_against(self, model):
        for s in model.subsystems:
            if s.index not in self.gains:
                raise ConfigError(f"missing tube gain for subsystem {s.index}")
            K = self.gains[s.index]
            expected = (s.nu, model.neighborhood_state_dim(s.index))
            if K.shape != expected:
                raise DimensionMismatch(
                    f"tube gain for subsystem {s.index} has shape {K.shape}, "
                    f"expected {expected}",
                    subsystem=s.index,
                )
            b = self.bounds_for(s.index)
            if b is not None:
                lo, hi = b
                if lo.shape != (s.nu,) or hi.shape != (s.nu,) or np.any(lo > hi):
                    raise ConfigError(f"bad saturation bounds for subsystem {s.index}")


def tube_feedback(controller, i, e_neighborhood) -> np.ndarray:
    """Feedback input of subsystem i for one neighborhood error vector."""
    e = np.asarray(e_neighborhood, dtype=float).reshape(-1)
    K = controller.gains[i]
    if e.shape != (K.shape[1],):
        raise DimensionMismatch(
            f"neighborhood error length {e.size} != gain width {K.shape[1]}",
            subsystem=i,
        )
    out = K @ e
    b = controller.bounds_for(i)
    if b is not None:
        out = np.clip(out, b[0], b[1])
    return out


def tube_feedback_batch(controller, i, e_batch) -> np.ndarray:
    """Feedback for a batch of neighborhood error vectors, shape (S, n_Ni)."""
    out = e_batch @ controller.gains[i].T
    b = controller.bounds_for(i)
    if b is not None:
        out = np.clip(out, b[0], b[1])
    return out


def local_error_step(model, controller, i, e_neighborhood, w_i):
    """One error step of agent i from neighborhood data only (batched).

    Returns (next errors (S, n_i), feedbacks used (S, m_i)). This is the
    exact update the bank simulation applies, so recomputing a trajectory
    from stored neighbor slices reproduces it bit for bit.
    """
    s = model.subsystems[i]
    pi = tube_feedback_batch(controller, i, e_neighborhood)
    nxt = e_neighborhood @ model.neighborhood_block(i).T + pi @ s.B.T + w_i @ s.G.T
    return nxt, pi


def roll_errors(model, controller, e_init, disturbances):
    """Vectorized error rollout for a batch of scenarios.

    ``e_init`` is (S, n) or (n,); ``disturbances`` is (S, T, P). Returns
    (errors, feedbacks) of shapes (S, T+1, n) and (S, T+1, m); the feedback
    at the final time uses the final error but never drives a further step.
    """
    model.require_valid()
    controller.validate_against(model)
    W = np.asarray(disturbances, dtype=float)
    if W.ndim != 3 or W.shape[2] != model.nw_total:
        raise DimensionMismatch(
            f"disturbance batch shape {W.shape} incompatible with stacked dim "
            f"{model.nw_total}"
        )
    S, T = W.shape[0], W.shape[1]
    e0 = np.broadcast_to(np.asarray(e_init, dtype=float), (S, model.nx_total))
    errors = np.empty((S, T + 1, model.nx_total))
    feedbacks = np.empty((S, T + 1, model.nu_total))
    errors[:, 0] = e0
    nbr_idx = {s.index: model.neighborhood_state_indices(s.index) for s in model.subsystems}
    for t in range(T + 1):
        cur = errors[:, t]
        if t < T:
            for s in model.subsystems:
                i = s.index
                nxt, pi = local_error_step(
                    model, controller, i, cur[:, nbr_idx[i]],
                    W[:, t, model.disturbance_slice(i)],
                )
                errors[:, t + 1, model.state_slice(i)] = nxt
                feedbacks[:, t, model.input_slice(i)] = pi
        else:
            for s in model.subsystems:
                i = s.index
                feedbacks[:, t, model.input_slice(i)] = tube_feedback_batch(
                    controller, i, cur[:, nbr_idx[i]]
                )
    return errors, feedbacks


@dataclass
class ErrorBank:
    """Simulated error trajectories and feedback values for a scenario bank.

    ``errors`` is (N_s, horizon+1, n_total), ``feedbacks`` is
    (N_s, horizon+1, m_total); sample l corresponds to scenario l of the
    originating bank. e(0) = 0 for every sample.
    """

    errors: np.ndarray
    feedbacks: np.ndarray

    @property
    def count(self) -> int:
        return self.errors.shape[0]

    @property
    def horizon(self) -> int:
        return self.errors.shape[1] - 1

    def errors_at(self, model, i, t) -> np.ndarray:
        return self.errors[:, t, model.state_slice(i)]

    def feedbacks_at(self, model, i, t) -> np.ndarray:
        return self.feedbacks[:, t, model.input_slice(i)]

    def save(self, csv_path):
        csv_path = Path(csv_path)
        ns, steps, n = self.errors.shape
        m = self.feedbacks.shape[2]
        idx = np.indices((ns, steps)).reshape(2, -1).T
        body = np.hstack([idx, self.errors.reshape(-1, n), self.feedbacks.reshape(-1, m)])
        header = (
            "sample,t,"
            + ",".join(f"e{k}" for k in range(n))
            + ","
            + ",".join(f"pi{k}" for k in range(m))
        )
        np.savetxt(csv_path, body, delimiter=",", header=header, comments="",
                   fmt=["%d", "%d"] + ["%.17g"] * (n + m))
        meta = {"count": ns, "horizon": steps - 1, "state_dim": n, "input_dim": m}
        csv_path.with_suffix(".json").write_text(json.dumps(meta, indent=2))

    @staticmethod
    def load(csv_path) -> "ErrorBank":
        csv_path = Path(csv_path)
        meta = json.loads(csv_path.with_suffix(".json").read_text())
        raw = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
        ns, steps = meta["count"], meta["horizon"] + 1
        n, m = meta["state_dim"], meta["input_dim"]
        order = np.lexsort((raw[:, 1], raw[:, 0]))
        raw = raw[order]
        return ErrorBank(
            errors=raw[:, 2 : 2 + n].reshape(ns, steps, n),
            feedbacks=raw[:, 2 + n :].reshape(ns, steps, m),
        )


def simulate_error_bank(model, controller, bank: ScenarioBank) -> ErrorBank:
    """Roll the autonomous error system over every scenario of the bank.

    Depends only on (model, controller, bank): cost or constraint settings
    never enter, so repeated calls are bit-identical.
    """
    if bank.dim != model.nw_total:
        raise DimensionMismatch(
            f"bank disturbance dim {bank.dim} != model dim {model.nw_total}"
        )
    errors, feedbacks = roll_errors(
        model, controller, np.zeros(model.nx_total), bank.samples[:, : bank.horizon]
    )
    return ErrorBank(errors=errors, feedbacks=feedbacks)


def closed_loop_error_matrix(model, controller) -> np.ndarray:
    """Linear part of the error map: A + B K with K assembled network-wide."""
    controller.validate_against(model)
    K = np.zeros((model.nu_total, model.nx_total))
    for s in model.subsystems:
        K[model.input_slice(s.index), model.neighborhood_state_indices(s.index)] = (
            controller.gains[s.index]
        )
    return model.full_state_matrix() + model.full_input_matrix() @ K


@dataclass
class ErrorCovariances:
    """Exact marginal error covariances Sigma_e(t), t = 0..horizon."""

    cov: np.ndarray  # (horizon+1, n_total, n_total)

    def marginal(self, model, i, t) -> np.ndarray:
        sl = model.state_slice(i)
        return self.cov[t, sl, sl]

    def neighborhood(self, model, i, t) -> np.ndarray:
        idx = model.neighborhood_state_indices(i)
        return self.cov[t][np.ix_(idx, idx)]


def propagate_error_covariance(model, controller, covariance, rho, horizon) -> ErrorCovariances:
    """Closed-form covariance recursion for linear tube feedback.

    The disturbance is the Gaussian AR(1) family: deviations d(t+1) =
    rho d(t) + eps(t) with innovation covariance ``covariance``, started at
    the stationary marginal (matching ``generate_bank``). The joint
    (e, d) process is linear, so

        Sigma(t+1) = F Sigma(t) F' + blkdiag(0, Sigma_eps),
        F = [[A + B K, G], [0, rho I]],

    and the error covariance is the leading block. Deterministic mean
    profiles do not affect covariances. Saturated controllers are rejected:
    the clipped map is nonlinear and this recursion does not apply.
    """
    if controller.is_saturated:
        raise UnsupportedModel(
            "analytic covariance propagation requires an unsaturated (linear) tube controller"
        )
    if not -1.0 < rho < 1.0:
        raise ConfigError(f"AR coefficient {rho} outside (-1, 1)")
    model.require_valid()
    n, p = model.nx_total, model.nw_total
    from .disturbance import DisturbanceSpec

    spec = DisturbanceSpec(kind="ar1-gaussian", covariance=covariance, rho=rho)
    sigma_eps = spec.covariance_matrix(p)
    a_cl = closed_loop_error_matrix(model, controller)
    G = model.full_noise_matrix()
    F = np.zeros((n + p, n + p))
    F[:n, :n] = a_cl
    F[:n, n:] = G
    F[n:, n:] = rho * np.eye(p)
    joint = np.zeros((n + p, n + p))
    joint[n:, n:] = sigma_eps / (1.0 - rho**2)
    out = np.empty((horizon + 1, n, n))
    out[0] = joint[:n, :n]
    for t in range(horizon):
        joint = F @ joint @ F.T
        joint[n:, n:] += sigma_eps
        out[t + 1] = joint[:n, :n]
    return ErrorCovariances(cov=out)


def error_summary_rows(model, constraints, errorbank) -> list[dict]:
    """Per (constraint, t) empirical mean/max of the sample projections.

    State constraints project errors, input constraints project feedbacks;
    rows feed the inspection CSV written next to a persisted error bank.
    """
    rows = []
    for i in range(model.M):
        for t in range(errorbank.horizon + 1):
            e = errorbank.errors_at(model, i, t)
            pi = errorbank.feedbacks_at(model, i, t)
            for j, hs in enumerate(constraints.state_for(i)):
                proj = e @ hs.direction
                rows.append(
                    {"kind": "state", "i": i, "j": j, "t": t,
                     "mean": float(proj.mean()), "max": float(proj.max())}
                )
            for j, hs in enumerate(constraints.input_for(i)):
                proj = pi @ hs.direction
                rows.append(
                    {"kind": "input", "i": i, "j": j, "t": t,
                     "mean": float(proj.mean()), "max": float(proj.max())}
                )
    return rows
