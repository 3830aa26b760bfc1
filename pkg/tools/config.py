"""Scenario and lab configuration.

configs/defaults.yaml holds every tunable with its default value; a
scenario file (configs/scenarios/*.yaml) describes one world and may
override any default section.  The two are deep-merged (scenario wins)
and turned into the frozen dataclasses the rest of the lab consumes.
Everything is validated here, so a world never starts on a bad config.
"""

import logging
import math
from dataclasses import dataclass, fields
from pathlib import Path

import yaml

from baseline import HandoverConfig
from dataset import OracleConfig
from engine import DecisionPolicy
from errors import ConfigError
from mobility import Anchor, Bounds, DeviceType, Pattern, UeProfile
from network import CellSite, NetworkSchedule, RadioConfig, ScheduleWindow, Severity, Tech
from nn import Activation, OptimizerKind, RecurrentKind, TrainConfig
from sim import Scenario

logger = logging.getLogger(__name__)

REPO_ROOT = Path(__file__).resolve().parent.parent
DEFAULTS_PATH = REPO_ROOT / "configs" / "defaults.yaml"
SCENARIO_DIR = REPO_ROOT / "configs" / "scenarios"

SCENARIO_KEYS = {
    "name", "duration_s", "seed", "world", "cells", "ues", "schedule",
    "radio", "handover", "oracle", "policy", "sim", "model", "training",
}
CELL_KEYS = {
    "cell_id", "enb_id", "pci", "tac", "mcc", "mnc", "band", "earfcn", "tech",
    "position_m", "tx_power_dbm", "bandwidth_mhz", "backhaul_mbps", "max_users",
}
UE_KEYS = {
    "ue_id", "count", "spacing_m", "device_type", "qci", "speed_mps", "pattern",
    "start_m", "anchors", "jitter_sigma_m", "initial_cell",
}
WINDOW_KEYS = {"cell_id", "start_s", "end_s", "period_s", "severity", "extra_users", "offset_db"}


@dataclass(frozen=True)
class ModelSettings:
    recurrent: RecurrentKind = RecurrentKind.LSTM
    hidden_dim: int = 16
    head_layers: tuple = (12, 8)
    activation: Activation = Activation.TANH
    paper_exact_cell_update: bool = False
    freeze_biases: bool = False
    window_len: int = 10


@dataclass(frozen=True)
class LabSettings:
    """Everything gen-dataset / train / eval need besides the world itself."""

    model: ModelSettings
    training: TrainConfig
    val_fraction: float = 0.3


# ---------------------------------------------------------------------------
# YAML helpers
# ---------------------------------------------------------------------------
def load_yaml(path):
    """Parse a YAML mapping; every failure becomes a ConfigError."""
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"{path}: file not found") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def deep_merge(base, override):
    """Recursively merge two mappings; ``override`` wins, lists are replaced."""
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def _check_keys(section, allowed, where):
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")


def _require(section, key, where):
    if key not in section:
        raise ConfigError(f"{where}: missing required key '{key}'")
    return section[key]


def _enum(cls, raw, where):
    """Look an enum member up by value or by name, case-insensitively."""
    def norm(v):
        return str(v).replace("_", "").lower()

    for member in cls:
        if norm(raw) in (norm(member.value), norm(member.name)):
            return member
    choices = ", ".join(str(m.value) for m in cls)
    raise ConfigError(f"{where}: '{raw}' is not one of {choices}")


def _point(raw, where):
    try:
        x, y = (float(v) for v in raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: expected [x, y], got {raw!r}") from exc
    if not (math.isfinite(x) and math.isfinite(y)):
        raise ConfigError(f"{where}: coordinates must be finite")
    return (x, y)


def _build(cls, section, where, converters=None):
    """Instantiate a flat dataclass from a mapping with strict key checking."""
    section = section or {}
    names = {f.name for f in fields(cls)}
    _check_keys(section, names, where)
    converters = converters or {}
    kwargs = {}
    for key, value in section.items():
        kwargs[key] = converters[key](value) if key in converters else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


# ---------------------------------------------------------------------------
# Section builders
# ---------------------------------------------------------------------------
def _build_cell(raw, where):
    _check_keys(raw, CELL_KEYS, where)
    try:
        return CellSite(
            cell_id=int(_require(raw, "cell_id", where)),
            enb_id=int(raw.get("enb_id", raw["cell_id"])),
            pci=int(_require(raw, "pci", where)),
            tac=int(raw.get("tac", 1)),
            mcc=int(raw.get("mcc", 1)),
            mnc=int(raw.get("mnc", 1)),
            band=str(_require(raw, "band", where)),
            earfcn=int(_require(raw, "earfcn", where)),
            tech=_enum(Tech, raw.get("tech", "ENODEB_4G"), f"{where}.tech"),
            position=_point(_require(raw, "position_m", where), f"{where}.position_m"),
            tx_power_dbm=float(raw.get("tx_power_dbm", 46.0)),
            bandwidth_mhz=float(raw.get("bandwidth_mhz", 10.0)),
            backhaul_mbps=float(raw.get("backhaul_mbps", 1000.0)),
            max_users=int(raw.get("max_users", 200)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _build_ues(raw, where):
    """One profile per entry, or ``count`` profiles with consecutive ue_ids."""
    _check_keys(raw, UE_KEYS, where)
    first_id = int(_require(raw, "ue_id", where))
    count = int(raw.get("count", 1))
    if count < 1:
        raise ConfigError(f"{where}: count must be >= 1")
    spacing = _point(raw.get("spacing_m", [0, 0]), f"{where}.spacing_m")
    start = _point(raw.get("start_m", [0, 0]), f"{where}.start_m")
    anchors = []
    for j, a in enumerate(raw.get("anchors") or []):
        aw = f"{where}.anchors[{j}]"
        _check_keys(a, {"position_m", "dwell_s"}, aw)
        x, y = _point(_require(a, "position_m", aw), f"{aw}.position_m")
        anchors.append((x, y, float(a.get("dwell_s", 0.0))))

    profiles = []
    for k in range(count):
        dx, dy = spacing[0] * k, spacing[1] * k
        profiles.append(UeProfile(
            ue_id=first_id + k,
            device_type=_enum(DeviceType, raw.get("device_type", "PHONE_5G"),
                              f"{where}.device_type"),
            qci=int(raw.get("qci", 9)),
            speed_mps=float(raw.get("speed_mps", 0.0)),
            pattern=_enum(Pattern, _require(raw, "pattern", where), f"{where}.pattern"),
            anchors=tuple(Anchor(x + dx, y + dy, d) for x, y, d in anchors),
            start=(start[0] + dx, start[1] + dy),
            jitter_sigma_m=float(raw.get("jitter_sigma_m", 5.0)),
            initial_cell=None if raw.get("initial_cell") is None else int(raw["initial_cell"]),
        ))
    return profiles


def _build_window(raw, kind, where):
    _check_keys(raw, WINDOW_KEYS, where)
    value_key = {"alarms": "severity", "tickets": "severity",
                 "load": "extra_users", "power": "offset_db"}[kind]
    raw_value = _require(raw, value_key, where)
    if value_key == "severity":
        value = _enum(Severity, raw_value, f"{where}.severity")
    elif value_key == "extra_users":
        value = int(raw_value)
    else:
        value = float(raw_value)
    return ScheduleWindow(
        cell_id=int(_require(raw, "cell_id", where)),
        start_s=float(raw.get("start_s", 0.0)),
        end_s=float(raw.get("end_s", math.inf)),
        value=value,
        period_s=float(raw.get("period_s", 0.0)),
    )


def _build_schedule(raw):
    raw = raw or {}
    _check_keys(raw, {"alarms", "tickets", "load", "power"}, "schedule")
    return NetworkSchedule(**{
        kind: [_build_window(w, kind, f"schedule.{kind}[{i}]")
               for i, w in enumerate(raw.get(kind) or [])]
        for kind in ("alarms", "tickets", "load", "power")
    })


def _build_bounds(raw):
    _check_keys(raw, {"x_min_m", "y_min_m", "x_max_m", "y_max_m"}, "world")
    b = Bounds(*(float(_require(raw, k, "world")) for k in ("x_min_m", "y_min_m",
                                                             "x_max_m", "y_max_m")))
    if b.x_max <= b.x_min or b.y_max <= b.y_min:
        raise ConfigError("world: max must exceed min on both axes")
    return b


def build_settings(merged):
    """LabSettings from a merged defaults/scenario mapping."""
    model = _build(ModelSettings, merged.get("model"), "model", {
        "recurrent": lambda v: _enum(RecurrentKind, v, "model.recurrent"),
        "activation": lambda v: _enum(Activation, v, "model.activation"),
        "head_layers": lambda v: tuple(int(n) for n in v),
    })
    if model.hidden_dim < 1 or model.window_len < 1 or any(n < 1 for n in model.head_layers):
        raise ConfigError("model: hidden_dim, window_len and head_layers must be >= 1")

    training = dict(merged.get("training") or {})
    val_fraction = float(training.pop("val_fraction", 0.3))
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError(f"training.val_fraction {val_fraction} outside (0, 1)")
    hp = _build(TrainConfig, training, "training", {
        "optimizer": lambda v: _enum(OptimizerKind, v, "training.optimizer"),
    })
    if hp.epochs < 0 or hp.batch_size < 1 or hp.learning_rate <= 0:
        raise ConfigError("training: epochs >= 0, batch_size >= 1, learning_rate > 0 required")
    if not 0.0 < hp.lr_backoff <= 1.0:
        raise ConfigError(f"training.lr_backoff {hp.lr_backoff} outside (0, 1]")
    return LabSettings(model=model, training=hp, val_fraction=val_fraction)


# ---------------------------------------------------------------------------
# Public API
# ---------------------------------------------------------------------------
def load_defaults(path=None):
    return load_yaml(path or DEFAULTS_PATH)


def resolve_scenario_path(name_or_path):
    """A path as given, or configs/scenarios/<name>.yaml for a bare name."""
    p = Path(name_or_path)
    if p.suffix in (".yaml", ".yml") or p.exists():
        return p
    return SCENARIO_DIR / f"{name_or_path}.yaml"


def build_scenario(merged, seed=None):
    """Scenario from a merged mapping.

    Args:
        merged:  defaults deep-merged with the scenario file
        seed:    overrides the scenario's own seed when given

    Returns:
        A validated Scenario.
    """
    _check_keys(merged, SCENARIO_KEYS, "scenario")
    name = str(_require(merged, "name", "scenario"))
    sim_cfg = merged.get("sim") or {}
    _check_keys(sim_cfg, {"tick_ms", "epoch_day", "ping_pong_window_s"}, "sim")

    handover = _build(HandoverConfig, merged.get("handover"), "handover")
    cells = tuple(_build_cell(c, f"cells[{i}]")
                  for i, c in enumerate(_require(merged, "cells", "scenario") or []))
    ues = []
    for i, u in enumerate(_require(merged, "ues", "scenario") or []):
        ues.extend(_build_ues(u, f"ues[{i}]"))

    scenario = Scenario(
        name=name,
        duration_s=float(_require(merged, "duration_s", "scenario")),
        tick_ms=int(sim_cfg.get("tick_ms", handover.tick_ms)),
        seed=int(seed if seed is not None else merged.get("seed", 0)),
        bounds=_build_bounds(_require(merged, "world", "scenario")),
        cells=cells,
        ues=tuple(ues),
        schedule=_build_schedule(merged.get("schedule")),
        radio=_build(RadioConfig, merged.get("radio"), "radio"),
        handover=handover,
        oracle=_build(OracleConfig, merged.get("oracle"), "oracle"),
        policy=_build(DecisionPolicy, merged.get("policy"), "policy"),
        epoch_day=int(sim_cfg.get("epoch_day", 0)),
        ping_pong_window_s=float(sim_cfg.get("ping_pong_window_s", 5.0)),
    )
    return scenario.validate()


def load_scenario(name_or_path, defaults_path=None, seed=None):
    """Load, merge and validate a scenario.

    Returns:
        (Scenario, LabSettings, merged mapping)
    """
    path = resolve_scenario_path(name_or_path)
    merged = deep_merge(load_defaults(defaults_path), load_yaml(path))
    scenario = build_scenario(merged, seed)
    settings = build_settings(merged)
    logger.info("Loaded scenario '%s' from %s: %d cells, %d UEs, %.0f s",
                scenario.name, path, len(scenario.cells), len(scenario.ues),
                scenario.duration_s)
    return scenario, settings, merged
