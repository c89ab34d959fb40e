"""Experiment configuration: one JSON document drives every CLI subcommand.

Top-level keys (all optional unless a subcommand needs them):

    seed          int, master seed; CLI --seed overrides
    network       inline network document or {"path": "net.json"}
    tube          {"gain": -0.5} or {"gains": {"0": [[...]]}},
                  optional "saturation": [lo, hi]
    disturbance   DisturbanceSpec fields (kind, covariance, rho, mean, ...)
    horizons      {"task": 120, "prediction": 24}
    tightening    {"num_scenarios": 100, "beta": 0.01,
                   "method": "scenario"|"analytic"}
    cost          {"state_weight", "input_weight", "terminal_weight",
                   "mpc_samples", "sample_mode"}
    solver        {"kind": "central"|"admm", "tol": 1e-8, "admm": {...}}
    simulation    {"runs": 1, "steps": null, "initial_state": 0.0,
                   "confidence": 0.95}
    benchmark     BenchmarkSpec overrides (only used by the benchmark command)
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .admm import AdmmParameters
from .benchmark import BenchmarkSpec
from .disturbance import DisturbanceSpec
from .errors import ConfigError
from .errorsim import TubeController
from .mpc import CostSpec
from .network import ConstraintSet, NetworkModel, load_network


@dataclass
class ExperimentConfig:
    raw: dict
    base_dir: Path
    seed: int

    @staticmethod
    def load(path, seed_override=None) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
        seed = int(raw.get("seed", 0)) if seed_override is None else int(seed_override)
        return ExperimentConfig(raw=raw, base_dir=path.parent, seed=seed)

    def section(self, name, default=None) -> dict:
        value = self.raw.get(name, {} if default is None else default)
        if not isinstance(value, dict):
            raise ConfigError(f"config section {name!r} must be an object")
        return value

    # -- builders -------------------------------------------------------------

    def network(self) -> tuple[NetworkModel, ConstraintSet]:
        doc = self.raw.get("network")
        if doc is None:
            raise ConfigError("config has no 'network' section")
        if isinstance(doc, dict) and "path" in doc:
            return load_network(self.base_dir / doc["path"])
        return load_network(doc)

    def tube(self, model) -> TubeController:
        doc = self.section("tube", {"gain": -0.5})
        saturation = doc.get("saturation")
        if saturation is not None:
            saturation = (float(saturation[0]), float(saturation[1]))
        if "gains" in doc:
            gains = {
                int(i): np.asarray(block, dtype=float) for i, block in doc["gains"].items()
            }
            sat = None
            if saturation is not None:
                sat = {
                    s.index: (np.full(s.nu, saturation[0]), np.full(s.nu, saturation[1]))
                    for s in model.subsystems
                }
            ctl = TubeController(gains=gains, saturation=sat)
            ctl.validate_against(model)
            return ctl
        gain = doc.get("gain", -0.5)
        gain = {int(k): float(v) for k, v in gain.items()} if isinstance(gain, dict) else float(gain)
        return TubeController.own_state_gain(model, gain, saturation=saturation)

    def disturbance(self) -> DisturbanceSpec:
        doc = dict(self.section("disturbance", {"kind": "iid-gaussian"}))
        if "path" in doc and doc["path"]:
            doc["path"] = str(self.base_dir / doc["path"])
        return DisturbanceSpec.from_dict(doc)

    def horizons(self) -> tuple[int, int]:
        doc = self.section("horizons")
        task = int(doc.get("task", 120))
        prediction = int(doc.get("prediction", 24))
        if prediction < 1 or task <= prediction:
            raise ConfigError(
                f"need task horizon > prediction horizon >= 1, got ({task}, {prediction})"
            )
        return task, prediction

    def tightening_options(self) -> dict:
        doc = self.section("tightening")
        method = doc.get("method", "scenario")
        if method not in ("scenario", "analytic"):
            raise ConfigError(f"unknown tightening method {method!r}")
        return {
            "num_scenarios": int(doc.get("num_scenarios", 100)),
            "beta": float(doc.get("beta", 0.01)),
            "method": method,
        }

    def cost(self, model) -> CostSpec:
        doc = self.section("cost")
        return CostSpec.uniform(
            model,
            state=float(doc.get("state_weight", 1.0)),
            input=float(doc.get("input_weight", 1.0)),
            terminal=doc.get("terminal_weight"),
            mpc_samples=int(doc.get("mpc_samples", 10)),
            sample_mode=doc.get("sample_mode", "per-step"),
        )

    def solver_options(self, kind_override=None) -> dict:
        doc = self.section("solver")
        kind = kind_override or doc.get("kind", "central")
        if kind not in ("central", "admm"):
            raise ConfigError(f"unknown solver kind {kind!r}")
        return {
            "kind": kind,
            "tol": float(doc.get("tol", 1e-8)),
            "admm": AdmmParameters.from_dict(self.section("solver").get("admm", {})),
        }

    def simulation_options(self) -> dict:
        doc = self.section("simulation")
        return {
            "runs": int(doc.get("runs", 1)),
            "steps": doc.get("steps"),
            "initial_state": doc.get("initial_state", 0.0),
            "confidence": float(doc.get("confidence", 0.95)),
        }

    def benchmark_spec(self) -> BenchmarkSpec:
        return BenchmarkSpec.from_dict(self.section("benchmark"))

    def initial_state_vector(self, model) -> np.ndarray:
        x0 = self.simulation_options()["initial_state"]
        if isinstance(x0, (int, float)):
            return np.full(model.nx_total, float(x0))
        x0 = np.asarray(x0, dtype=float).reshape(-1)
        if x0.shape != (model.nx_total,):
            raise ConfigError(
                f"initial_state length {x0.size} != stacked state dim {model.nx_total}"
            )
        return x0
