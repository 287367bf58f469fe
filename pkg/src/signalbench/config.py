"""Run configuration: one canonical JSON document, validated and dumpable.

A config file is a JSON object with the nested sections below; every
value has a default, command-line flags override file values, and
``--dump-config`` prints the merged effective document.  Dump and load
round-trip bit-exactly (sorted keys, fixed indentation), and the
effective document is written next to every report for provenance.
"""

from __future__ import annotations

import copy
import json
import os

from signalbench.agent import REWARD_AS_PRINTED, REWARD_QUEUE_DECREASE
from signalbench.geometry import IntersectionGeometry
from signalbench.harness import CONTROLLER_KINDS, MAX_EPISODES, ControllerSetup, RunParams
from signalbench.microsim import CarFollowingParams
from signalbench.scenarios import AFTER_MAX, BEFORE_MAX, ScenarioSpec, get_scenario, library

OUTPUT_ROOT_ENV = "SIGNALBENCH_OUTPUT_ROOT"


class ConfigError(Exception):
    """Invalid configuration; the message names the offending field."""


DEFAULTS: dict = {
    "scenario": "base",
    "controller": "fixed",
    "episodes": 1,
    "replications": 1,
    "seed": None,
    "parallelism": 1,
    "output_dir": None,
    "episode_length_s": None,
    "warmup_s": None,
    "failure_injection": None,
    "failure_target": None,
    "checkpoint_in": None,
    "checkpoint_out": False,
    "pretrain_scenario": "base",
    "pretrain_episodes": 40,
    "emit_events": False,
    "plots": False,
    "agent": {
        "hidden_sizes": [64, 64],
        "dropout_rate": 0.2,
        "learning_rate": None,
        "tau": None,
        "gamma": 0.95,
        "batch_size": 32,
        "buffer_capacity": 10000,
        "epsilon_start": 0.5,
        "epsilon_end": 0.1,
        "epsilon_steps": 1000,
        "queue_cap": 77,
        "green_cap_s": 300.0,
        "reward_sign": REWARD_QUEUE_DECREASE,
        "learning_enabled": True,
        "huber_delta": 1.0,
        "reward_scale": 1e-3,
        "train_steps_per_decision": 1,
    },
    "control": {
        "min_green_s": 10.0,
        "max_green_s": 60.0,
        "passage_gap_s": 3.0,
        "yellow_s": 3.0,
        "all_red_s": 1.0,
        "fixed_greens_s": None,
    },
    "sim": {
        "dt_s": 0.5,
        "decision_interval_s": 10.0,
        "lane_length_m": 500.0,
        "desired_speed_kmh": 50.0,
        "queue_speed_kmh": 4.0,
        "jam_spacing_m": 6.5,
        "accel_ms2": 2.0,
        "decel_ms2": 4.0,
        "safe_headway_s": 1.0,
    },
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config field {where!r}")
        if isinstance(base[key], dict) and key in ("agent", "control", "sim"):
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be a section (object)")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config_file(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path}: line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return data


def effective_config(file_config: dict | None = None, overrides: dict | None = None) -> dict:
    """Defaults, then file values, then explicit overrides."""
    cfg = _merge(DEFAULTS, file_config or {})
    cfg = _merge(cfg, overrides or {})
    return cfg


def dump_config(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, indent=2) + "\n"


def validate_config(cfg: dict, *, require_seed: bool = True, transfer: bool = False) -> None:
    if cfg["controller"] not in CONTROLLER_KINDS:
        raise ConfigError(
            f"controller must be one of {', '.join(CONTROLLER_KINDS)}; got {cfg['controller']!r}"
        )
    scenario = cfg["scenario"]
    if isinstance(scenario, str):
        if scenario not in library():
            names = ", ".join(sorted(library()))
            raise ConfigError(f"unknown scenario {scenario!r}; available: {names}")
    elif isinstance(scenario, dict):
        try:
            ScenarioSpec.from_dict(scenario)
        except Exception as exc:  # noqa: BLE001
            raise ConfigError(f"inline scenario is invalid: {exc}") from exc
    else:
        raise ConfigError("scenario must be a name or an inline scenario object")
    if not (1 <= int(cfg["episodes"]) <= MAX_EPISODES):
        raise ConfigError(f"episodes must be within [1, {MAX_EPISODES}]")
    if int(cfg["replications"]) < 1:
        raise ConfigError("replications must be >= 1")
    if require_seed and cfg["seed"] is None:
        raise ConfigError("seed is required for reproducible runs (set seed)")
    if cfg["failure_injection"] not in (None, BEFORE_MAX, AFTER_MAX):
        raise ConfigError(
            f"failure_injection must be {BEFORE_MAX!r} or {AFTER_MAX!r}"
        )
    if cfg["agent"]["reward_sign"] not in (REWARD_QUEUE_DECREASE, REWARD_AS_PRINTED):
        raise ConfigError("agent.reward_sign must be a known sign convention")
    if transfer:
        if cfg["controller"] not in ("rl_phase_selection", "rl_time_extension"):
            raise ConfigError("transfer runs need an RL controller")
        if cfg["pretrain_scenario"] not in library():
            raise ConfigError(f"unknown pretrain scenario {cfg['pretrain_scenario']!r}")
        if int(cfg["pretrain_episodes"]) < 0:
            raise ConfigError("pretrain_episodes must be >= 0")
    sim = cfg["sim"]
    for key in ("dt_s", "lane_length_m", "desired_speed_kmh", "jam_spacing_m"):
        if not sim[key] or sim[key] <= 0:
            raise ConfigError(f"sim.{key} must be positive")


# ---------------------------------------------------------------------------
# Config -> runtime objects


def resolve_scenario(cfg: dict) -> ScenarioSpec:
    scenario = cfg["scenario"]
    if isinstance(scenario, dict):
        spec = ScenarioSpec.from_dict(scenario)
        if cfg["failure_injection"] or cfg["failure_target"] is not None:
            raise ConfigError("failure overrides apply to named scenarios only")
        return spec
    return get_scenario(
        scenario,
        failure_injection=cfg["failure_injection"],
        failure_target=cfg["failure_target"],
    )


def build_run_params(cfg: dict, *, audit: bool = False, collect_maxima: bool = False) -> RunParams:
    sim = cfg["sim"]
    control = cfg["control"]
    geometry = IntersectionGeometry(
        lane_length_m=sim["lane_length_m"],
        desired_speed_ms=sim["desired_speed_kmh"] / 3.6,
        jam_spacing_m=sim["jam_spacing_m"],
        queue_speed_ms=sim["queue_speed_kmh"] / 3.6,
    )
    carfollowing = CarFollowingParams(
        accel_ms2=sim["accel_ms2"],
        decel_ms2=sim["decel_ms2"],
        safe_headway_s=sim["safe_headway_s"],
    )
    return RunParams(
        dt_s=sim["dt_s"],
        episode_length_s=cfg["episode_length_s"],
        warmup_s=cfg["warmup_s"],
        decision_interval_s=sim["decision_interval_s"],
        yellow_s=control["yellow_s"],
        all_red_s=control["all_red_s"],
        min_green_s=control["min_green_s"],
        max_green_s=control["max_green_s"],
        passage_gap_s=control["passage_gap_s"],
        geometry=geometry,
        carfollowing=carfollowing,
        audit=audit,
        log_events=cfg["emit_events"],
        collect_maxima=collect_maxima,
    )


def build_setup(cfg: dict) -> ControllerSetup:
    # Only explicit deviations from the defaults become overrides, so an
    # agent restored from a checkpoint keeps its saved hyperparameters
    # unless the user actually asked for a change.
    agent = dict(cfg["agent"])
    agent["hidden_sizes"] = tuple(agent["hidden_sizes"])
    defaults = dict(DEFAULTS["agent"])
    defaults["hidden_sizes"] = tuple(defaults["hidden_sizes"])
    overrides = {k: v for k, v in agent.items() if v != defaults[k]}
    greens = cfg["control"]["fixed_greens_s"]
    return ControllerSetup(
        kind=cfg["controller"],
        agent_overrides=overrides,
        fixed_greens_s=tuple(greens) if greens else None,
        checkpoint_in=cfg["checkpoint_in"],
    )


def default_output_dir(cfg: dict, suffix: str = "") -> str:
    root = os.environ.get(OUTPUT_ROOT_ENV, "runs")
    scenario = cfg["scenario"] if isinstance(cfg["scenario"], str) else cfg["scenario"].get("name", "inline")
    name = f"{scenario}-{cfg['controller']}-seed{cfg['seed']}{suffix}"
    return os.path.join(root, name)
