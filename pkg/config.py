#!/usr/bin/env python3
"""
Experiment configuration: JSON file sections, flag overrides and dry-run
validation of every precondition before any sampling.
"""

import copy
import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from errors import ConfigError, GmcLabError
from field_sampler import GridSpec, field_memory_bytes
from gmc_core import GmcParams
from kernel_lab import MOLLIFIERS, MollifierSpec

logger = logging.getLogger(__name__)

DEFAULT_CONFIG: Dict[str, Any] = {
    "seed": 20240611,
    "kernel": {"mollifier": "bump", "params": {}, "table_resolution": 4096},
    "field": {"n": 256, "pad_factor": 2, "step": 0.25, "t": 2.0, "fused": True},
    "gmc": {"alpha": 1.0, "gamma": 1.5, "d": 2},
    "experiment": {
        "replicas": 2000,
        "workers": 1,
        "sigma": 3.0,
        "orders": [0, 1, 2],
        "t_grid": [1.0, 2.0, 3.0],
        "p": 1.0,
        "q": 0.0,
        "s_grid": [0.0, 0.5, 1.0, 1.5],
        "scaling_width": 1.0,
        "tail_quantiles": [0.9, 0.95, 0.99, 0.995, 0.999, 0.9995, 0.9999],
        "tail_t_grid": [],
        "mu_grid": [0.0, 0.5, 1.0, 2.0, 4.0, 8.0],
        "small_ball_t_grid": [0.0, 0.5, 1.0, 1.5, 2.0],
        "small_ball_n": 64,
        "grad_s_grid": [1.0, 2.0],
        "grad_m_grid": [1, 2, 4],
        "tilt_slopes": [],
        "cascade_es": 2,
        "kahane_side_points": 4,
        "kahane_replicas": 100000,
        "kernel_layers": [[0.0, 1.0], [1.0, 2.0], [2.0, 3.0]],
        "snapshots": 1,
        "subadditivity_pairs": 50,
        "perturbation_amplitude": 0.0,
        "small_ball_probability": None,
    },
}

SECTIONS = ("kernel", "field", "gmc", "experiment")


def _merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in update.items():
        nested = isinstance(value, dict) and isinstance(merged.get(key), dict)
        if nested and key != "params":
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment configuration (sections kept as plain dicts)."""

    seed: int
    kernel: Dict[str, Any]
    field: Dict[str, Any]
    gmc: Dict[str, Any]
    experiment: Dict[str, Any]

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentConfig":
        unknown = set(data) - set(SECTIONS) - {"seed"}
        if unknown:
            raise ConfigError(f"Unknown config sections: {sorted(unknown)}")
        merged = _merge(DEFAULT_CONFIG, data)
        try:
            seed = int(merged["seed"])
        except (TypeError, ValueError):
            raise ConfigError(f"Seed must be an integer, got {merged['seed']!r}")
        return cls(
            seed, merged["kernel"], merged["field"], merged["gmc"], merged["experiment"]
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "kernel": copy.deepcopy(self.kernel),
            "field": copy.deepcopy(self.field),
            "gmc": copy.deepcopy(self.gmc),
            "experiment": copy.deepcopy(self.experiment),
        }

    @property
    def digest(self) -> str:
        """sha256 of the canonical JSON form."""
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def mollifier_spec(self) -> MollifierSpec:
        return MollifierSpec(
            name=self.kernel["mollifier"],
            params=dict(self.kernel.get("params") or {}),
            table_resolution=int(self.kernel["table_resolution"]),
            dimension=int(self.gmc.get("d", 2)),
        )

    def grid(self, n: Optional[int] = None) -> GridSpec:
        return GridSpec(int(n or self.field["n"]), int(self.field["pad_factor"]))

    def params(self, t: Optional[float] = None) -> GmcParams:
        return GmcParams(
            float(self.gmc["alpha"]),
            float(self.gmc["gamma"]),
            int(self.gmc.get("d", 2)),
            float(self.field["t"] if t is None else t),
        )

    @property
    def replicas(self) -> int:
        return int(self.experiment["replicas"])

    def with_overrides(self, overrides: Dict[str, Any]) -> "ExperimentConfig":
        """New config with dotted-key overrides ("gmc.alpha": 0.8) applied."""
        data = self.to_dict()
        for dotted, value in overrides.items():
            if value is None:
                continue
            if dotted == "seed":
                data["seed"] = value
                continue
            section, _, key = dotted.partition(".")
            if section not in SECTIONS or not key:
                raise ConfigError(f"Override '{dotted}' must look like section.key")
            data[section][key] = value
        return ExperimentConfig.from_dict(data)


def load_config(path: Optional[Union[str, Path]]) -> ExperimentConfig:
    """
    Load a JSON config file merged over the defaults (defaults only if None).

    A run manifest is accepted as well; its echoed config is used.

    Raises:
        ConfigError: if the file is missing or malformed
    """
    if path is None:
        return ExperimentConfig.from_dict({})
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {e}")
    if not isinstance(data, dict):
        raise ConfigError("Config file must contain a JSON object")
    if "config" in data and "outputs" in data:
        # run manifest: re-run its echoed config
        data = data["config"]
    logger.info(f"Config loaded from {path}")
    return ExperimentConfig.from_dict(data)


def parse_assignment(text: str) -> tuple:
    """Parse 'section.key=value'; value is JSON when it parses, else a string."""
    if "=" not in text:
        raise ConfigError(f"Override '{text}' must look like section.key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _check_resolved(grid: GridSpec, t: float, setting: str) -> None:
    limit = grid.max_resolved_scale()
    if t > limit + 1e-12:
        raise ConfigError(
            f"Grid spacing h = 1/{grid.n} violates h <= e^-t/4 at t = {t:g} "
            f"(largest resolved t is {limit:.3f}; raise {setting})"
        )


def validate_config(config: ExperimentConfig) -> Dict[str, Any]:
    """
    Dry-run check of every precondition; no sampling.

    Returns:
        Report with the largest resolved scale and a memory estimate

    Raises:
        ConfigError: describing the first violated precondition
    """
    try:
        if config.kernel["mollifier"] not in MOLLIFIERS:
            raise ConfigError(
                f"Unknown mollifier '{config.kernel['mollifier']}' (known: {sorted(MOLLIFIERS)})"
            )
        if int(config.kernel["table_resolution"]) < 64:
            raise ConfigError("kernel.table_resolution must be at least 64")
        if not 0 <= config.seed < 2**64:
            raise ConfigError(f"Seed must be a 64-bit unsigned integer, got {config.seed}")

        params = config.params()
        grid = config.grid()
        step = float(config.field["step"])
        if step <= 0:
            raise ConfigError(f"field.step must be positive, got {step}")
        experiment = config.experiment
        if config.replicas < 1 or int(experiment["workers"]) < 1:
            raise ConfigError("experiment.replicas and experiment.workers must be >= 1")

        scales: List[float] = [params.t] + [float(t) for t in experiment["t_grid"]]
        scales += [float(t) for t in experiment["tail_t_grid"]]
        if any(t < 0 for t in scales):
            raise ConfigError("Scales must be nonnegative")
        t_max = max(scales)
        limit = grid.max_resolved_scale()
        _check_resolved(grid, t_max, "field.n")
        small_ball_ts = [float(t) for t in experiment["small_ball_t_grid"]]
        if not small_ball_ts:
            raise ConfigError("experiment.small_ball_t_grid must not be empty")
        small_ball_grid = config.grid(int(experiment["small_ball_n"]))
        _check_resolved(small_ball_grid, max(small_ball_ts), "experiment.small_ball_n")
        grad_ss = [float(s) for s in experiment["grad_s_grid"]]
        if grad_ss:
            _check_resolved(grid, max(grad_ss), "field.n (experiment.grad_s_grid)")

        es = int(experiment["cascade_es"])
        if es != 1 and es % 2:
            raise ConfigError("experiment.cascade_es must be 1 or even")
        if grid.n % es:
            raise ConfigError("experiment.cascade_es must divide field.n")
        if params.t < math.log(es):
            raise ConfigError(
                f"Cascade needs field.t >= ln(experiment.cascade_es) = {math.log(es):.4f}, "
                f"got {params.t:g}"
            )
        if any(float(m) < 0 for m in experiment["mu_grid"]):
            raise ConfigError("experiment.mu_grid must be nonnegative")
        if not 1 <= int(experiment["kahane_side_points"]) ** 2 <= 64:
            raise ConfigError("experiment.kahane_side_points^2 must be between 1 and 64")
    except ConfigError:
        raise
    except (GmcLabError, KeyError, TypeError, ValueError) as e:
        raise ConfigError(str(e))

    workers = int(experiment["workers"])
    memory = field_memory_bytes(grid, t_max) * workers
    return {
        "status": "success",
        "alpha": params.alpha,
        "gamma": params.gamma,
        "d": params.d,
        "t_max": t_max,
        "max_resolved_t": round(limit, 6),
        "grid_n": grid.n,
        "memory_estimate_bytes": memory,
        "memory_estimate_mib": round(memory / 2**20, 2),
        "config_digest": config.digest,
    }


def describe(config: ExperimentConfig) -> str:
    """One-line summary for log banners."""
    params = config.params()
    return (
        f"alpha={params.alpha:g} gamma={params.gamma:g} d={params.d} t={params.t:g} "
        f"n={config.field['n']} seed={config.seed}"
    )

