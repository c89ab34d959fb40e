"""Correlated disturbance scenarios over the task horizon.

All Gaussian kinds share one engine: a deterministic mean profile mu(t) plus
AR(1) deviations d(t+1) = rho * d(t) + eps(t) with i.i.d. Gaussian
innovations. The deviation process starts at its stationary marginal
N(0, Sigma/(1 - rho^2)) so pooled lag statistics match AR(1) theory from
t = 0. The i.i.d. kind is rho = 0; the empirical kind resamples stored
trajectories by nearest recent history.

Sample l of a bank is drawn from the dedicated substream seeded by
(seed, l), so banks are bit-reproducible and samples are independent.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionMismatch

GAUSSIAN_KINDS = ("iid-gaussian", "ar1-gaussian", "periodic-mean-ar1")
KINDS = GAUSSIAN_KINDS + ("empirical-file",)


@dataclass
class DisturbanceSpec:
    """Parametric description of the stacked disturbance process.

    ``covariance`` is the innovation covariance: a scalar (isotropic), a
    length-P vector (diagonal), or a full P x P matrix, with P the stacked
    disturbance dimension. ``mean`` is a constant offset; the periodic kind
    adds ``amplitude * sin(2*pi*(t + phase)/period)`` on top of it. The
    empirical kind ignores the Gaussian parameters and draws from ``path``.
    """

    kind: str
    covariance: float | np.ndarray = 1.0
    rho: float = 0.0
    mean: float | np.ndarray = 0.0
    amplitude: float | np.ndarray = 0.0
    period: float = 48.0
    phase: float = 0.0
    path: str | None = None
    k_nearest: int = 10
    lookback: int = 4

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown disturbance kind {self.kind!r}; one of {KINDS}")
        if self.kind == "iid-gaussian":
            self.rho = 0.0
        if not -1.0 < self.rho < 1.0:
            raise ConfigError(f"AR coefficient {self.rho} outside (-1, 1)")
        if self.kind == "empirical-file" and not self.path:
            raise ConfigError("empirical-file kind needs a bank path")
        if self.kind == "periodic-mean-ar1" and self.period <= 0:
            raise ConfigError("mean period must be positive")

    # -- Gaussian machinery ----------------------------------------------------

    def covariance_matrix(self, dim) -> np.ndarray:
        cov = np.asarray(self.covariance, dtype=float)
        if cov.ndim == 0:
            cov = float(cov) * np.eye(dim)
        elif cov.ndim == 1:
            if cov.size != dim:
                raise DimensionMismatch(f"diagonal covariance length {cov.size} != {dim}")
            cov = np.diag(cov)
        elif cov.shape != (dim, dim):
            raise DimensionMismatch(f"covariance shape {cov.shape} != ({dim}, {dim})")
        if not np.allclose(cov, cov.T, atol=1e-12):
            raise ConfigError("covariance must be symmetric")
        return cov

    def innovation_factor(self, dim) -> np.ndarray:
        """Square factor L with L L' = covariance; rejects indefinite input."""
        cov = self.covariance_matrix(dim)
        vals, vecs = np.linalg.eigh(cov)
        tol = 1e-10 * max(1.0, float(np.max(np.abs(vals), initial=0.0)))
        if np.min(vals, initial=0.0) < -tol:
            raise ConfigError("covariance is not positive semidefinite")
        return vecs @ np.diag(np.sqrt(np.clip(vals, 0.0, None)))

    def stationary_factor(self, dim) -> np.ndarray:
        return self.innovation_factor(dim) / np.sqrt(1.0 - self.rho**2)

    def stationary_std(self, dim) -> np.ndarray:
        cov = self.covariance_matrix(dim) / (1.0 - self.rho**2)
        return np.sqrt(np.diag(cov))

    def mean_at(self, t, dim) -> np.ndarray:
        base = np.broadcast_to(np.asarray(self.mean, dtype=float).reshape(-1), (dim,)).copy()
        if self.kind == "periodic-mean-ar1":
            amp = np.broadcast_to(np.asarray(self.amplitude, dtype=float).reshape(-1), (dim,))
            base += amp * np.sin(2.0 * np.pi * (t + self.phase) / self.period)
        return base

    def mean_profile(self, horizon, dim) -> np.ndarray:
        return np.stack([self.mean_at(t, dim) for t in range(horizon + 1)])

    def to_dict(self) -> dict:
        def plain(v):
            return v.tolist() if isinstance(v, np.ndarray) else v

        return {
            "kind": self.kind,
            "covariance": plain(self.covariance),
            "rho": self.rho,
            "mean": plain(self.mean),
            "amplitude": plain(self.amplitude),
            "period": self.period,
            "phase": self.phase,
            "path": self.path,
            "k_nearest": self.k_nearest,
            "lookback": self.lookback,
        }

    @staticmethod
    def from_dict(doc: dict) -> "DisturbanceSpec":
        known = {
            k: doc[k]
            for k in (
                "kind", "covariance", "rho", "mean", "amplitude",
                "period", "phase", "path", "k_nearest", "lookback",
            )
            if k in doc
        }
        for key in ("covariance", "mean", "amplitude"):
            if key in known and isinstance(known[key], list):
                known[key] = np.asarray(known[key], dtype=float)
        return DisturbanceSpec(**known)


@dataclass
class ScenarioBank:
    """N_s disturbance trajectories, each covering t = 0..horizon.

    ``samples`` has shape (N_s, horizon+1, P) with P the stacked disturbance
    dimension; subsystem slices come from the network model. ``seed`` and
    ``spec`` record provenance.
    """

    samples: np.ndarray
    seed: int
    spec: DisturbanceSpec

    @property
    def count(self) -> int:
        return self.samples.shape[0]

    @property
    def horizon(self) -> int:
        return self.samples.shape[1] - 1

    @property
    def dim(self) -> int:
        return self.samples.shape[2]

    def save(self, csv_path):
        """Write one row per (sample, t) at full double precision plus a
        JSON sidecar (same stem, .json) with dims, seed and spec."""
        csv_path = Path(csv_path)
        ns, steps, dim = self.samples.shape
        flat = self.samples.reshape(ns * steps, dim)
        idx = np.indices((ns, steps)).reshape(2, -1).T
        header = "sample,t," + ",".join(f"w{k}" for k in range(dim))
        body = np.hstack([idx, flat])
        fmt = ["%d", "%d"] + ["%.17g"] * dim
        np.savetxt(csv_path, body, delimiter=",", header=header, comments="", fmt=fmt)
        meta = {
            "count": ns,
            "horizon": steps - 1,
            "dim": dim,
            "seed": self.seed,
            "spec": self.spec.to_dict(),
        }
        csv_path.with_suffix(".json").write_text(json.dumps(meta, indent=2))

    @staticmethod
    def load(csv_path) -> "ScenarioBank":
        csv_path = Path(csv_path)
        meta = json.loads(csv_path.with_suffix(".json").read_text())
        raw = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
        ns, steps, dim = meta["count"], meta["horizon"] + 1, meta["dim"]
        if raw.shape != (ns * steps, dim + 2):
            raise ConfigError(f"bank file {csv_path} does not match its sidecar dimensions")
        order = np.lexsort((raw[:, 1], raw[:, 0]))
        samples = raw[order, 2:].reshape(ns, steps, dim)
        return ScenarioBank(samples=samples, seed=int(meta["seed"]),
                            spec=DisturbanceSpec.from_dict(meta["spec"]))


def _sample_stream(seed, index) -> np.random.Generator:
    """Independent deterministic substream for sample ``index``.

    PCG64 jumps are cheap, so building one stream per sample stays fast even
    for 1e5-sample banks."""
    return np.random.Generator(np.random.PCG64(seed).jumped(index))


def _ar1_path(spec, start_dev, transitions, t0, steps, dim, innov_factor):
    """Mean profile plus AR(1) deviations; ``transitions`` holds the
    standard-normal innovations for steps 1..steps-1, shape (steps-1, dim)."""
    devs = np.empty((steps, dim))
    devs[0] = start_dev
    for k in range(1, steps):
        devs[k] = spec.rho * devs[k - 1] + innov_factor @ transitions[k - 1]
    means = np.stack([spec.mean_at(t0 + k, dim) for k in range(steps)])
    return means + devs


def generate_bank(spec: DisturbanceSpec, model, horizon, count, seed) -> ScenarioBank:
    """Draw ``count`` full-horizon scenarios for the model's stacked disturbance.

    Reproducible: identical (spec, horizon, count, seed) yield bit-identical
    banks. Sample l only consumes the substream (seed, l), so subsets agree
    with larger banks drawn from the same seed.
    """
    if horizon < 1:
        raise ConfigError(f"task horizon must be >= 1, got {horizon}")
    if count < 1:
        raise ConfigError(f"sample count must be >= 1, got {count}")
    dim = model.nw_total
    if spec.kind == "empirical-file":
        stored = ScenarioBank.load(spec.path)
        if stored.dim != dim:
            raise DimensionMismatch(f"stored bank dim {stored.dim} != model dim {dim}")
        if stored.horizon < horizon:
            raise ConfigError(f"stored bank horizon {stored.horizon} < requested {horizon}")
        rng = np.random.default_rng(seed)
        pick = rng.integers(0, stored.count, size=count)
        return ScenarioBank(stored.samples[pick, : horizon + 1].copy(), seed, spec)
    innov = spec.innovation_factor(dim)
    stat = spec.stationary_factor(dim)
    # one substream per sample; the AR recursion is vectorized across samples
    draws = np.empty((count, horizon + 1, dim))
    root = np.random.PCG64(seed)
    for l in range(count):
        draws[l] = np.random.Generator(root.jumped(l)).standard_normal((horizon + 1, dim))
    devs = np.empty_like(draws)
    devs[:, 0] = draws[:, 0] @ stat.T
    for t in range(1, horizon + 1):
        devs[:, t] = spec.rho * devs[:, t - 1] + draws[:, t] @ innov.T
    means = spec.mean_profile(horizon, dim)
    return ScenarioBank(samples=devs + means[None, :, :], seed=seed, spec=spec)


def conditional_samples(spec, model, history, t, steps, count, seed,
                        subsystem=None, innovations=None):
    """Prediction samples of w(t..t+steps-1) given realized history w(0..t-1).

    ``history`` is an array of shape (t, P); the Gaussian AR(1) kinds condition
    exactly on w(t-1) (the process is Markov), the i.i.d. kind ignores history,
    and the empirical kind block-resamples stored scenarios whose recent
    history (up to ``spec.lookback`` steps) is nearest in Euclidean norm,
    choosing uniformly among the ``spec.k_nearest`` closest. Returns an array
    (count, steps, P), or the subsystem's slice when ``subsystem`` is given;
    whole-network trajectories are drawn first so cross-subsystem correlation
    is preserved under slicing.

    ``innovations`` optionally supplies the standard normal draws for the
    Gaussian kinds as an array (count, steps, P) -- slot 0 drives the first
    predicted step, the rest the transitions. Passing the same array at every
    control step gives common random numbers across steps; the empirical kind
    ignores it. By default draws come from the substream (seed, t).
    """
    if steps < 1:
        raise ConfigError(f"prediction steps must be >= 1, got {steps}")
    dim = model.nw_total
    history = np.asarray(history, dtype=float).reshape(-1, dim) if t > 0 else np.zeros((0, dim))
    if t > 0 and history.shape[0] < t:
        raise ConfigError(
            f"conditional sampling at t={t} needs {t} history steps, got {history.shape[0]}"
        )
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(t,)))
    if spec.kind == "empirical-file":
        out = _empirical_conditional(spec, history, t, steps, count, rng, dim)
    else:
        if innovations is None:
            innovations = rng.standard_normal((count, steps, dim))
        elif innovations.shape != (count, steps, dim):
            raise DimensionMismatch(
                f"innovations shape {innovations.shape} != ({count}, {steps}, {dim})"
            )
        innov = spec.innovation_factor(dim)
        out = np.empty((count, steps, dim))
        for s in range(count):
            if t == 0 or spec.rho == 0.0:
                d = spec.stationary_factor(dim) @ innovations[s, 0]
            else:
                prev_dev = history[t - 1] - spec.mean_at(t - 1, dim)
                d = spec.rho * prev_dev + innov @ innovations[s, 0]
            out[s] = _ar1_path(spec, d, innovations[s, 1:steps], t, steps, dim, innov)
    if subsystem is not None:
        return out[:, :, model.disturbance_slice(subsystem)]
    return out


def _empirical_conditional(spec, history, t, steps, count, rng, dim):
    stored = ScenarioBank.load(spec.path)
    if stored.horizon + 1 < t + steps:
        raise ConfigError(
            f"stored bank covers {stored.horizon + 1} steps; need {t + steps} for "
            f"prediction at t={t}"
        )
    if t == 0:
        pick = rng.integers(0, stored.count, size=count)
    else:
        lb = min(t, max(1, spec.lookback))
        recent = history[t - lb : t].reshape(-1)
        window = stored.samples[:, t - lb : t].reshape(stored.count, -1)
        dist = np.linalg.norm(window - recent, axis=1)
        k = min(max(1, spec.k_nearest), stored.count)
        nearest = np.argsort(dist, kind="stable")[:k]
        pick = nearest[rng.integers(0, k, size=count)]
    return stored.samples[pick, t : t + steps].copy()
