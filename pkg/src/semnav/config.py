"""Configuration: every tunable of the pipeline in one validated structure.

Configs load from YAML (comments permitted), reject unknown keys, range-check
every field, and round-trip exactly through save/load. Environment variables
prefixed SEMNAV_ (e.g. SEMNAV_BENCHMARK_N_EPISODES=10, SEMNAV_SEED=3)
override file values; nested fields use SECTION_FIELD names.
"""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field, fields

import yaml

ENV_PREFIX = "SEMNAV_"

DEFAULT_CATEGORIES = ["chair", "table", "bed", "toilet",
                      "sofa", "plant", "sink", "tv"]
DEFAULT_GROUPS = [["chair", "table", "tv"], ["bed", "plant"],
                  ["toilet", "sink"], ["sofa"]]


class ConfigError(ValueError):
    pass


def _require(cond: bool, message: str):
    if not cond:
        raise ConfigError(message)


@dataclass
class MappingConfig:
    feature_dim: int = 24
    prior_variance: float = 1.0
    eps_var: float = 1e-3
    d_opt: float = 2.5                 # optimal detection distance [m]
    p: float = 0.02                    # blur growth per squared meter
    truncation_sigmas: float = 3.0
    min_kernel_radius: int = 1
    feature_variance_exponent: str = "half-error-squared"
    literal_variance_weights: bool = False

    def validate(self):
        _require(self.feature_dim >= 1, "mapping.feature_dim must be >= 1")
        _require(self.prior_variance > 0, "mapping.prior_variance must be > 0")
        _require(0 < self.eps_var < self.prior_variance,
                 "mapping.eps_var must be in (0, prior_variance)")
        _require(self.d_opt > 0, "mapping.d_opt must be > 0")
        _require(self.p >= 0, "mapping.p must be >= 0")
        _require(self.truncation_sigmas > 0,
                 "mapping.truncation_sigmas must be > 0")
        _require(self.min_kernel_radius >= 1,
                 "mapping.min_kernel_radius must be >= 1")
        _require(self.feature_variance_exponent in
                 ("half-error-squared", "error-squared-half"),
                 "mapping.feature_variance_exponent unknown")


@dataclass
class ExplorationConfig:
    tau_e_frac: float = 0.3            # fraction of the prior variance
    tau_c_frac: float = 0.3
    tau_sim: float = 0.35
    consensus_percentile: float = 5.0
    consensus_filtering: bool = True
    min_frontier_length: int = 3

    def validate(self):
        _require(0 < self.tau_e_frac < 1, "exploration.tau_e_frac in (0,1)")
        _require(0 < self.tau_c_frac < 1, "exploration.tau_c_frac in (0,1)")
        _require(-1 < self.tau_sim < 1, "exploration.tau_sim in (-1,1)")
        _require(0 < self.consensus_percentile < 100,
                 "exploration.consensus_percentile in (0,100)")
        _require(self.min_frontier_length >= 1,
                 "exploration.min_frontier_length must be >= 1")


@dataclass
class PlanningConfig:
    agent_radius: float = 0.2          # [m]
    goal_snap_radius: float = 1.5      # [m]
    replan_every_step: bool = False

    def validate(self):
        _require(self.agent_radius > 0, "planning.agent_radius must be > 0")
        _require(self.goal_snap_radius > 0,
                 "planning.goal_snap_radius must be > 0")


@dataclass
class SimulatorConfig:
    world_extent: float = 16.0         # [m]
    cells_per_meter: float = 5.0
    n_rooms: int = 4
    room_min: float = 3.0              # [m]
    room_max: float = 5.5              # [m]
    corridor_width: int = 3            # [cells]
    object_cells: int = 2              # [cells]
    instances_per_category: int = 1
    categories: list[str] = field(default_factory=lambda:
                                  list(DEFAULT_CATEGORIES))
    co_location_groups: list[list[str]] = field(
        default_factory=lambda: [list(g) for g in DEFAULT_GROUPS])
    co_location_bias: float = 0.8
    n_rays: int = 96
    fov_deg: float = 100.0
    max_range: float = 8.0             # sensor range [m]
    step_size: float = 0.25            # agent step [m]
    patch_rays: int = 4                # rays per feature patch
    depth_noise: float = 0.008        # sigma = depth_noise * d^2 [m]; the
    #                                   distance-dependent uncertainty that
    #                                   drives informative exploration

    def validate(self):
        _require(self.world_extent > 0, "simulator.world_extent must be > 0")
        _require(self.cells_per_meter > 0,
                 "simulator.cells_per_meter must be > 0")
        _require(self.n_rooms >= 1, "simulator.n_rooms must be >= 1")
        _require(0 < self.room_min <= self.room_max,
                 "simulator.room_min/room_max out of order")
        _require(self.room_max < self.world_extent,
                 "simulator.room_max must fit in world_extent")
        _require(self.corridor_width >= 1,
                 "simulator.corridor_width must be >= 1")
        _require(self.object_cells >= 1,
                 "simulator.object_cells must be >= 1")
        _require(self.instances_per_category >= 1,
                 "simulator.instances_per_category must be >= 1")
        _require(len(self.categories) > 0, "simulator.categories empty")
        _require(len(set(self.categories)) == len(self.categories),
                 "simulator.categories has duplicates")
        grouped = [c for g in self.co_location_groups for c in g]
        _require(all(c in self.categories for c in grouped),
                 "simulator.co_location_groups names unknown category")
        _require(len(set(grouped)) == len(grouped),
                 "simulator.co_location_groups overlap")
        _require(0 <= self.co_location_bias <= 1,
                 "simulator.co_location_bias in [0,1]")
        _require(self.n_rays >= 8, "simulator.n_rays must be >= 8")
        _require(0 < self.fov_deg <= 360, "simulator.fov_deg in (0,360]")
        _require(self.max_range > 0, "simulator.max_range must be > 0")
        _require(self.step_size > 0, "simulator.step_size must be > 0")
        _require(self.patch_rays >= 1 and self.n_rays % self.patch_rays == 0,
                 "simulator.patch_rays must divide n_rays")
        _require(self.depth_noise >= 0, "simulator.depth_noise must be >= 0")

    @property
    def fov(self) -> float:
        return math.radians(self.fov_deg)


@dataclass
class DetectorConfig:
    tp_rate: float = 1.0
    fp_rate: float = 0.0
    det_range: float = 8.0             # [m]
    conf_threshold: float = 0.0

    def validate(self):
        _require(0 <= self.tp_rate <= 1, "detector.tp_rate in [0,1]")
        _require(0 <= self.fp_rate <= 1, "detector.fp_rate in [0,1]")
        _require(self.det_range > 0, "detector.det_range must be > 0")
        _require(0 <= self.conf_threshold <= 1,
                 "detector.conf_threshold in [0,1]")


@dataclass
class EmbeddingConfig:
    noise_sigma: float = 0.05
    distractor_overlap: float = 0.3

    def validate(self):
        _require(self.noise_sigma >= 0, "embedding.noise_sigma must be >= 0")
        _require(0 <= self.distractor_overlap < 1,
                 "embedding.distractor_overlap in [0,1)")


@dataclass
class BenchmarkConfig:
    n_worlds: int = 10
    n_episodes: int = 100
    seq_len: int = 3
    step_budget: int = 500             # simulator steps per object goal
    success_radius: float = 1.5        # [m]
    reuse_map: bool = True

    def validate(self):
        _require(self.n_worlds >= 1, "benchmark.n_worlds must be >= 1")
        _require(self.n_episodes >= 0, "benchmark.n_episodes must be >= 0")
        _require(self.seq_len >= 1, "benchmark.seq_len must be >= 1")
        _require(self.step_budget >= 1, "benchmark.step_budget must be >= 1")
        _require(self.success_radius > 0,
                 "benchmark.success_radius must be > 0")


@dataclass
class Config:
    seed: int = 7
    mapping: MappingConfig = field(default_factory=MappingConfig)
    exploration: ExplorationConfig = field(default_factory=ExplorationConfig)
    planning: PlanningConfig = field(default_factory=PlanningConfig)
    simulator: SimulatorConfig = field(default_factory=SimulatorConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)

    def validate(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if dataclasses.is_dataclass(v):
                v.validate()
        _require(len(self.simulator.categories) >= self.benchmark.seq_len,
                 "need at least seq_len distinct categories")

    # thresholds are stored as fractions of the prior
    @property
    def tau_e(self) -> float:
        return self.exploration.tau_e_frac * self.mapping.prior_variance

    @property
    def tau_c(self) -> float:
        return self.exploration.tau_c_frac * self.mapping.prior_variance


_SECTIONS = {f.name: f.type for f in fields(Config)
             if f.name not in ("seed",)}


def config_to_dict(cfg: Config) -> dict:
    return dataclasses.asdict(cfg)


def config_from_dict(doc: dict) -> Config:
    """Strict construction: unknown keys anywhere are rejected."""
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a mapping")
    cfg = Config()
    known = {f.name for f in fields(Config)}
    for key in doc:
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
    if "seed" in doc:
        cfg.seed = int(doc["seed"])
    for name in known - {"seed"}:
        if name not in doc:
            continue
        section = getattr(cfg, name)
        sub = doc[name]
        if not isinstance(sub, dict):
            raise ConfigError(f"config section {name!r} must be a mapping")
        valid = {f.name: f for f in fields(section)}
        for k, v in sub.items():
            if k not in valid:
                raise ConfigError(f"unknown config key {name}.{k!r}")
            setattr(section, k, v)
    cfg = apply_env_overrides(cfg)
    cfg.validate()
    return cfg


def apply_env_overrides(cfg: Config, environ=None) -> Config:
    environ = os.environ if environ is None else environ
    for key, raw in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        tail = key[len(ENV_PREFIX):].lower()
        value = yaml.safe_load(raw)
        if tail == "seed":
            cfg.seed = int(value)
            continue
        for name in _SECTIONS:
            if tail.startswith(name + "_"):
                fname = tail[len(name) + 1:]
                section = getattr(cfg, name)
                if any(f.name == fname for f in fields(section)):
                    setattr(section, fname, value)
                    break
        else:
            raise ConfigError(f"unrecognized override {key}")
    return cfg


def load_config(path=None) -> Config:
    """Load and validate a YAML config; None loads pure defaults (still
    subject to environment overrides)."""
    if path is None:
        cfg = apply_env_overrides(Config())
        cfg.validate()
        return cfg
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if doc is None:
        doc = {}
    return config_from_dict(doc)


def save_config(cfg: Config, path) -> None:
    with open(path, "w") as fh:
        fh.write("# semnav configuration (all tunables, units in field "
                 "comments of config.py)\n")
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=True,
                       default_flow_style=False)
