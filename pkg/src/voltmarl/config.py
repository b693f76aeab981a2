"""Scenario configuration, presets, the JSON run-config schema and seeding."""
from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import jsonschema
import numpy as np


class ConfigError(Exception):
    pass


# Named RNG sub-streams fanned out from one master seed.
SEED_STREAMS = {"assignment": 1, "profiles": 2, "policy_init": 3, "sampling": 4, "minibatch": 5}


def substream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), SEED_STREAMS[name]])


def stream_seed(seed: int, name: str, *extra: int) -> list[int]:
    return [int(seed), SEED_STREAMS[name], *map(int, extra)]


# Building counts per type for the full 192-building portfolio.
PAPER_PORTFOLIO = {"office": 4, "restaurant": 37, "retail": 5, "strip_mall": 1, "residential": 145}
DESK_PORTFOLIO = {"office": 1, "restaurant": 12, "retail": 2, "strip_mall": 1, "residential": 48}

# Device sizing and PV ratings per building type (kW, kWh). Not given in any
# source; these are placeholders sized relative to each type's peak demand.
DEFAULT_BUILDING_TYPES = {
    "residential": {
        "pv_rated": 18.0,
        "devices": {
            "hvac_tes": {"cap_kwh": 28.0, "p_kw": 20.0, "efficiency": 0.95},
            "dhw_tes": {"cap_kwh": 12.0, "p_kw": 7.5, "efficiency": 0.95},
        },
    },
    "office": {
        "pv_rated": 75.0,
        "devices": {
            "hvac_tes": {"cap_kwh": 120.0, "p_kw": 90.0, "efficiency": 0.95},
            "dhw_tes": {"cap_kwh": 10.0, "p_kw": 6.0, "efficiency": 0.95},
        },
    },
    "restaurant": {
        "pv_rated": 35.0,
        "devices": {
            "hvac_tes": {"cap_kwh": 60.0, "p_kw": 45.0, "efficiency": 0.95},
            "dhw_tes": {"cap_kwh": 30.0, "p_kw": 20.0, "efficiency": 0.95},
        },
    },
    "retail": {
        "pv_rated": 60.0,
        "devices": {
            "hvac_tes": {"cap_kwh": 90.0, "p_kw": 65.0, "efficiency": 0.95},
            "dhw_tes": {"cap_kwh": 8.0, "p_kw": 5.0, "efficiency": 0.95},
        },
    },
    "strip_mall": {
        "pv_rated": 70.0,
        "devices": {
            "hvac_tes": {"cap_kwh": 110.0, "p_kw": 80.0, "efficiency": 0.95},
            "dhw_tes": {"cap_kwh": 10.0, "p_kw": 7.5, "efficiency": 0.95},
        },
    },
}


@dataclass
class ScenarioConfig:
    preset: str = "paper-scale"
    network: str = "ieee33"
    buildings_per_bus: int = 6
    portfolio: dict = field(default_factory=lambda: dict(PAPER_PORTFOLIO))
    rl_fraction: float = 0.5
    dt: float = 0.25
    episode_days: int = 14
    start_day: int = 150
    summer_days: tuple = (152, 244)
    seed: int = 0
    alpha: float = 20.0
    alpha_overrides: dict = field(default_factory=dict)
    phi_max: float = math.acos(0.8)
    rbc_magnitude: float = 0.34
    failure_penalty: float = -10.0
    load_scale: float = 1.0
    pv_scale: float = 1.0
    keep_network_loads: bool = False
    building_types: dict = field(default_factory=lambda: copy.deepcopy(DEFAULT_BUILDING_TYPES))
    profile_csv: dict = field(default_factory=dict)
    weather: dict = field(default_factory=dict)
    temp_range: tuple = (-10.0, 40.0)
    voltage_range: tuple = (0.9, 1.1)

    def __post_init__(self):
        self.summer_days = tuple(self.summer_days)
        self.temp_range = tuple(self.temp_range)
        self.voltage_range = tuple(self.voltage_range)
        self.validate()

    @property
    def n_buildings(self) -> int:
        return sum(self.portfolio.values())

    @property
    def steps_per_day(self) -> int:
        return int(round(24 / self.dt))

    @property
    def horizon(self) -> int:
        return self.episode_days * self.steps_per_day

    def validate(self) -> None:
        if not 0 <= self.rl_fraction <= 1:
            raise ConfigError("rl_fraction must lie in [0, 1]")
        k = 1.0 / self.dt if self.dt > 0 else 0
        if self.dt <= 0 or abs(k - round(k)) > 1e-9:
            raise ConfigError(f"dt={self.dt} h does not divide one hour")
        if self.buildings_per_bus < 1 or self.episode_days < 1:
            raise ConfigError("buildings_per_bus and episode_days must be >= 1")
        if self.alpha <= 0 or any(a <= 0 for a in self.alpha_overrides.values()):
            raise ConfigError("alpha must be positive")
        unknown = set(self.portfolio) - set(self.building_types)
        if unknown:
            raise ConfigError(f"portfolio references undefined building types {sorted(unknown)}")
        if any(c < 0 for c in self.portfolio.values()):
            raise ConfigError("portfolio counts must be >= 0")
        if self.phi_max < 0 or self.phi_max >= math.pi / 2:
            raise ConfigError("phi_max must lie in [0, pi/2)")

    def replace(self, **changes) -> "ScenarioConfig":
        d = self.to_dict()
        d.update(changes)
        return ScenarioConfig.from_dict(d)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("summer_days", "temp_range", "voltage_range"):
            d[k] = list(d[k])
        d["alpha_overrides"] = {str(k): v for k, v in d["alpha_overrides"].items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown scenario fields {sorted(unknown)}")
        d = dict(d)
        if "alpha_overrides" in d:
            d["alpha_overrides"] = {int(k): float(v) for k, v in d["alpha_overrides"].items()}
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


PRESETS = {
    "paper-scale": {},
    # 2 buildings on each of the 32 load buses; loads and PV scaled x3 so the
    # feeder carries roughly the same aggregate demand as the 6-per-bus case.
    "desk-scale": {
        "buildings_per_bus": 2,
        "portfolio": DESK_PORTFOLIO,
        "load_scale": 3.0,
        "pv_scale": 3.0,
        "episode_days": 7,
    },
}


def preset_scenario(name: str, **overrides) -> ScenarioConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    d = ScenarioConfig().to_dict()
    d.update(copy.deepcopy(PRESETS[name]))
    d["preset"] = name
    d.update(overrides)
    return ScenarioConfig.from_dict(d)


RUN_CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "voltmarl run configuration",
    "type": "object",
    "properties": {
        "preset": {"enum": sorted(PRESETS)},
        "seed": {"type": "integer", "minimum": 0},
        "scenario": {
            "type": "object",
            "properties": {
                "network": {"type": "string"},
                "buildings_per_bus": {"type": "integer", "minimum": 1},
                "portfolio": {"type": "object", "additionalProperties": {"type": "integer", "minimum": 0}},
                "rl_fraction": {"type": "number", "minimum": 0, "maximum": 1},
                "dt": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "episode_days": {"type": "integer", "minimum": 1},
                "start_day": {"type": "integer", "minimum": 0},
                "summer_days": {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2},
                "alpha": {"type": "number", "exclusiveMinimum": 0},
                "alpha_overrides": {"type": "object", "additionalProperties": {"type": "number", "exclusiveMinimum": 0}},
                "phi_max": {"type": "number", "minimum": 0},
                "rbc_magnitude": {"type": "number", "minimum": 0, "maximum": 1},
                "failure_penalty": {"type": "number"},
                "load_scale": {"type": "number", "exclusiveMinimum": 0},
                "pv_scale": {"type": "number", "minimum": 0},
                "keep_network_loads": {"type": "boolean"},
                "building_types": {"type": "object"},
                "profile_csv": {"type": "object", "additionalProperties": {"type": "string"}},
                "weather": {"type": "object"},
                "temp_range": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
                "voltage_range": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
            },
            "additionalProperties": False,
        },
        "ppo": {
            "type": "object",
            "properties": {
                "gamma": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "clip_eps": {"type": "number", "exclusiveMinimum": 0},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "steps_per_update": {"type": "integer", "minimum": 1},
                "total_steps": {"type": "integer", "minimum": 1},
                "gae_lambda": {"type": "number", "minimum": 0, "maximum": 1},
                "value_coef": {"type": "number", "minimum": 0},
                "entropy_coef": {"type": "number", "minimum": 0},
                "epochs_per_update": {"type": "integer", "minimum": 1},
                "hidden": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                "max_grad_norm": {"type": ["number", "null"]},
                "init_log_std": {"type": "number"},
                "checkpoint_every": {"type": "integer", "minimum": 1},
            },
            "additionalProperties": False,
        },
    },
    "required": ["preset"],
    "additionalProperties": False,
}


@dataclass
class RunConfig:
    scenario: ScenarioConfig
    ppo: "object"
    seed: int
    source: dict

    @property
    def hash(self) -> str:
        return config_hash(self.source)


def config_hash(doc: dict) -> str:
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def parse_run_config(doc: dict, seed: int | None = None, preset: str | None = None) -> RunConfig:
    """Validate a run-config document and build its scenario and PPO settings.

    ``seed`` and ``preset`` (command-line overrides) take precedence over the
    document's own fields.
    """
    from .ppo import PPOConfig

    doc = copy.deepcopy(doc)
    if preset is not None:
        doc["preset"] = preset
    if seed is not None:
        doc["seed"] = seed
    try:
        jsonschema.validate(doc, RUN_CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{path}: {exc.message}") from None
    run_seed = int(doc.get("seed", 0))
    scen = preset_scenario(doc["preset"], seed=run_seed, **doc.get("scenario", {}))
    ppo = PPOConfig.for_preset(doc["preset"], **doc.get("ppo", {}))
    return RunConfig(scen, ppo, run_seed, doc)


def load_run_config(path, seed: int | None = None, preset: str | None = None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_run_config(doc, seed, preset)
