"""Scenario and experiment configuration: YAML schema, defaults, hashing.

The documented schema lives in the README; unknown keys are rejected so a
typo fails fast instead of silently running defaults.
"""

import hashlib
import json
import math
from dataclasses import dataclass, field

import yaml

from .channel import ChannelParams
from .world import MapBounds, OwnshipLimits, TerminalConfig


class ConfigError(ValueError):
    """Raised for malformed or inconsistent configuration input."""


def _check_keys(section: str, data: dict, allowed):
    unknown = set(data) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in '{section}': {sorted(unknown)}")


def _coerce(cls, section: str, data: dict) -> dict:
    """Convert YAML scalars to the field types (YAML 1.1 reads 2.0e9 as str)."""
    out = {}
    for key, value in data.items():
        ftype = getattr(cls.__dataclass_fields__.get(key), "type", None)
        try:
            if ftype is float and isinstance(value, (int, str)):
                value = float(value)
            elif ftype is int and isinstance(value, (float, str)):
                value = int(value)
        except ValueError as exc:
            raise ConfigError(f"bad value for '{section}.{key}': {exc}") from exc
        out[key] = value
    return out


@dataclass(frozen=True)
class ScenarioConfig:
    """World and channel description shared by both phases.

    The service area defaults to a 500 m square centered inside the
    2000 m planning map, so service coordinates double as planning goals
    without any frame shift.
    """

    service_bounds: MapBounds = MapBounds(750.0, 1250.0, 750.0, 1250.0, 100.0, 300.0)
    planning_bounds: MapBounds = MapBounds(0.0, 2000.0, 0.0, 2000.0)
    num_users: int = 4
    service_step_m: float = 10.0
    start_altitude: float = 100.0
    channel: ChannelParams = ChannelParams()
    p_max_w: float = 1.0
    r_qos_bps: float = 1.0e5
    ownship_limits: OwnshipLimits = OwnshipLimits()
    dt: float = 1.0
    own_start_xy: tuple = (100.0, 100.0)
    own_start_speed: float = 40.0
    d_min: float = 50.0
    goal_radius: float = 50.0
    s_max: int = 200
    intruder_speed_min: float = 10.0
    intruder_speed_max: float = 30.0
    spawn_clearance: float = 150.0

    def __post_init__(self):
        if self.num_users < 1:
            raise ConfigError("num_users must be >= 1")
        if self.p_max_w <= 0.0:
            raise ConfigError("p_max_w must be positive")
        if not 0.0 < self.intruder_speed_min <= self.intruder_speed_max:
            raise ConfigError("need 0 < intruder_speed_min <= intruder_speed_max")
        if not self.planning_bounds.contains_xy(*self.own_start_xy):
            raise ConfigError("own_start_xy must lie inside planning bounds")

    def terminal_config(self) -> TerminalConfig:
        return TerminalConfig(
            bounds=self.planning_bounds,
            d_min=self.d_min,
            goal_radius=self.goal_radius,
            s_max=self.s_max,
        )


@dataclass(frozen=True)
class D3QNConfig:
    """Hyperparameters of the service-phase learning agent."""

    episodes: int = 500
    steps_per_episode: int = 100
    epsilon_start: float = 0.9
    epsilon_end: float = 0.1
    discount: float = 0.95
    batch_size: int = 64
    buffer_capacity: int = 10_000
    learning_rate: float = 1.0e-3
    target_sync_every: int = 200
    hidden_sizes: tuple = (40, 40, 40)
    power_levels: int = 6
    reward_scale: float = 1.0e-6
    norm_warmup_steps: int = 200
    target_mode: str = "double"

    def __post_init__(self):
        if self.target_mode not in ("double", "vanilla"):
            raise ConfigError("target_mode must be 'double' or 'vanilla'")
        if not 0.0 <= self.epsilon_end <= self.epsilon_start <= 1.0:
            raise ConfigError("need 0 <= epsilon_end <= epsilon_start <= 1")
        if self.power_levels < 2:
            raise ConfigError("power_levels must be >= 2")


@dataclass(frozen=True)
class SearchProfileConfig:
    """One MCTS planner profile (simulation budget and lookahead depth)."""

    simulations: int = 2000
    search_depth: int = 4
    exploration_c: float = 1.0 / math.sqrt(2.0)
    reward_goal: float = 1.0
    reward_timeout: float = 0.1
    reward_collision: float = 0.0

    def __post_init__(self):
        if self.simulations < 1 or self.search_depth < 1:
            raise ConfigError("simulations and search_depth must be >= 1")
        if self.exploration_c <= 0.0:
            raise ConfigError("exploration_c must be positive")


@dataclass(frozen=True)
class AvoidDqnConfig:
    """Hyperparameters of the fixed-intruder-count avoidance DQN baseline."""

    train_intruders: int = 10
    episodes: int = 300
    epsilon_start: float = 0.9
    epsilon_end: float = 0.1
    discount: float = 0.99
    batch_size: int = 64
    buffer_capacity: int = 10_000
    learning_rate: float = 1.0e-3
    target_sync_every: int = 200
    hidden_sizes: tuple = (40, 40, 40)
    shaping_gain: float = 10.0


@dataclass(frozen=True)
class SweepConfig:
    """Stage-2 evaluation grid."""

    intruder_counts: tuple = (5, 10, 15, 20, 25, 30)
    episodes_per_cell: int = 100
    seeds: tuple = (1, 2, 3)
    profiles: tuple = ("tree-depth", "tree-fast", "dqn-avoid", "random-avoid")
    trace: bool = True

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("sweep needs at least one seed")
        if not self.intruder_counts:
            raise ConfigError("sweep needs at least one intruder count")


DEFAULT_PROFILES = {
    "tree-depth": SearchProfileConfig(simulations=2000, search_depth=4),
    "tree-fast": SearchProfileConfig(simulations=200, search_depth=2),
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Top-level bundle consumed by the harness and the CLI."""

    scenario: ScenarioConfig = ScenarioConfig()
    d3qn: D3QNConfig = D3QNConfig()
    profiles: dict = field(default_factory=lambda: dict(DEFAULT_PROFILES))
    avoid_dqn: AvoidDqnConfig = AvoidDqnConfig()
    sweep: SweepConfig = SweepConfig()
    agent: str = "d3qn"
    seed: int = 7

    def __post_init__(self):
        if self.agent not in ("d3qn", "dqn", "random"):
            raise ConfigError("agent must be d3qn, dqn or random")
        for name in self.sweep.profiles:
            if name in ("dqn-avoid", "random-avoid"):
                continue
            if name not in self.profiles:
                raise ConfigError(f"sweep references undefined profile '{name}'")


# --- dict / YAML parsing ----------------------------------------------------

_BOUNDS_KEYS = ("x_min", "x_max", "y_min", "y_max", "h_min", "h_max")


def _bounds_from(section, data):
    _check_keys(section, data, _BOUNDS_KEYS)
    try:
        clean = {k: (None if v is None else float(v)) for k, v in data.items()}
        return MapBounds(**clean)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad bounds in '{section}': {exc}") from exc


def _scenario_from(data: dict) -> ScenarioConfig:
    _check_keys("scenario", data, (
        "service_bounds", "planning_bounds", "num_users", "service_step_m",
        "start_altitude", "channel", "p_max_w", "r_qos_bps", "ownship",
        "dt", "own_start_xy", "own_start_speed", "d_min", "goal_radius",
        "s_max", "intruder_speed_min", "intruder_speed_max", "spawn_clearance",
    ))
    kwargs = {}
    if "service_bounds" in data:
        kwargs["service_bounds"] = _bounds_from("scenario.service_bounds",
                                                data["service_bounds"])
    if "planning_bounds" in data:
        kwargs["planning_bounds"] = _bounds_from("scenario.planning_bounds",
                                                 data["planning_bounds"])
    if "channel" in data:
        ch = dict(data["channel"])
        _check_keys("scenario.channel", ch, (
            "carrier_freq_hz", "bandwidth_hz", "noise_power_w",
            "excess_loss_los_db", "excess_loss_nlos_db", "los_a", "los_b",
            "fading_mode",
        ))
        try:
            kwargs["channel"] = ChannelParams(**_coerce(ChannelParams,
                                                        "scenario.channel", ch))
        except ValueError as exc:
            raise ConfigError(f"bad channel params: {exc}") from exc
    if "ownship" in data:
        own = dict(data["ownship"])
        _check_keys("scenario.ownship", own, (
            "v_min", "v_max", "tilt_step_deg", "tilt_max_deg", "accel_step",
            "g_accel",
        ))
        if "tilt_step_deg" in own:
            own["tilt_step"] = math.radians(float(own.pop("tilt_step_deg")))
        if "tilt_max_deg" in own:
            own["tilt_max"] = math.radians(float(own.pop("tilt_max_deg")))
        try:
            kwargs["ownship_limits"] = OwnshipLimits(**_coerce(OwnshipLimits,
                                                               "scenario.ownship", own))
        except ValueError as exc:
            raise ConfigError(f"bad ownship limits: {exc}") from exc
    for key in ("num_users", "service_step_m", "start_altitude", "p_max_w",
                "r_qos_bps", "dt", "own_start_speed", "d_min", "goal_radius",
                "s_max", "intruder_speed_min", "intruder_speed_max",
                "spawn_clearance"):
        if key in data:
            kwargs[key] = data[key]
    if "own_start_xy" in data:
        xy = data["own_start_xy"]
        if not (isinstance(xy, (list, tuple)) and len(xy) == 2):
            raise ConfigError("own_start_xy must be a [x, y] pair")
        kwargs["own_start_xy"] = (float(xy[0]), float(xy[1]))
    try:
        return ScenarioConfig(**_coerce(ScenarioConfig, "scenario", kwargs))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _simple_from(cls, section, data: dict):
    fields = {f for f in cls.__dataclass_fields__}
    _check_keys(section, data, fields)
    clean = {
        k: tuple(v) if isinstance(v, list) else v
        for k, v in data.items()
    }
    clean = _coerce(cls, section, clean)
    try:
        return cls(**clean)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad '{section}' section: {exc}") from exc


def experiment_from_dict(raw: dict) -> ExperimentConfig:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    _check_keys("config", raw, (
        "scenario", "d3qn", "profiles", "avoid_dqn", "sweep", "agent", "seed",
    ))
    kwargs = {}
    if "scenario" in raw:
        kwargs["scenario"] = _scenario_from(raw["scenario"] or {})
    if "d3qn" in raw:
        kwargs["d3qn"] = _simple_from(D3QNConfig, "d3qn", raw["d3qn"] or {})
    if "avoid_dqn" in raw:
        kwargs["avoid_dqn"] = _simple_from(AvoidDqnConfig, "avoid_dqn",
                                           raw["avoid_dqn"] or {})
    if "sweep" in raw:
        kwargs["sweep"] = _simple_from(SweepConfig, "sweep", raw["sweep"] or {})
    if "profiles" in raw:
        profiles = dict(DEFAULT_PROFILES)
        for name, body in (raw["profiles"] or {}).items():
            profiles[name] = _simple_from(SearchProfileConfig,
                                          f"profiles.{name}", body or {})
        kwargs["profiles"] = profiles
    for key in ("agent", "seed"):
        if key in raw:
            kwargs[key] = raw[key]
    try:
        return ExperimentConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> tuple[ExperimentConfig, dict]:
    """Parse a YAML experiment file; returns (config, raw dict for hashing)."""
    with open(path, encoding="utf-8") as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"unparseable YAML in {path}: {exc}") from exc
    return experiment_from_dict(raw or {}), raw or {}


def config_hash(raw: dict) -> str:
    """Stable digest of the raw config mapping (order-independent)."""
    blob = json.dumps(raw, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()
