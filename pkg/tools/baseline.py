"""Classical network-controlled A3-event handover (HOM + hysteresis + TTT).

The effective margin a neighbour must beat is HOM = a3_offset_db +
hysteresis_db.  Timers advance in whole ticks, so ttt_ms must be a
multiple of tick_ms.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum

from errors import ConfigError

logger = logging.getLogger(__name__)

A3_QUANTITIES = ("rsrp", "rsrq")


class Cause(Enum):
    A3 = "A3"
    ENGINE = "Engine"
    GREEDY = "Greedy"
    ORACLE = "Oracle"
    RLF_RECOVERY = "RlfRecovery"


class Outcome(Enum):
    SUCCESS = "Success"
    FAILURE = "Failure"


@dataclass(frozen=True)
class HandoverConfig:
    a3_offset_db: float = 2.0
    hysteresis_db: float = 1.0
    ttt_ms: int = 480
    tick_ms: int = 120
    min_time_between_ho_s: float = 1.0
    a3_quantity: str = "rsrp"
    qout_db: float = -8.0
    qout_duration_ms: int = 960

    def __post_init__(self):
        for name in ("a3_offset_db", "hysteresis_db", "ttt_ms", "tick_ms",
                     "min_time_between_ho_s", "qout_duration_ms"):
            if getattr(self, name) < 0:
                raise ConfigError(f"handover.{name} must be >= 0")
        if self.tick_ms <= 0:
            raise ConfigError("handover.tick_ms must be > 0")
        if self.ttt_ms % self.tick_ms != 0:
            raise ConfigError(
                f"handover.ttt_ms ({self.ttt_ms}) must be a multiple of tick_ms ({self.tick_ms})"
            )
        if self.a3_quantity not in A3_QUANTITIES:
            raise ConfigError(f"handover.a3_quantity must be one of {A3_QUANTITIES}")

    @property
    def hom_db(self):
        return self.a3_offset_db + self.hysteresis_db


@dataclass
class A3State:
    timers_ms: dict = field(default_factory=dict)
    last_ho_time: float = -math.inf


@dataclass(frozen=True)
class HandoverEvent:
    t: float
    ue_id: int
    from_cell: int
    to_cell: int
    cause: Cause
    outcome: Outcome

    def __post_init__(self):
        if self.from_cell == self.to_cell:
            raise ValueError("handover from a cell to itself")


# ---------------------------------------------------------------------------
# A3 state machine
# ---------------------------------------------------------------------------
def a3_update(state, serving_value, neighbor_values, cfg, t):
    """Advance the A3 timers by one tick and return a target, if any.

    Args:
        state:            A3State of this UE (mutated)
        serving_value:    serving RSRP (dBm) or RSRQ (dB), per cfg.a3_quantity
        neighbor_values:  dict cell_id -> same quantity for each neighbour
        cfg:              HandoverConfig
        t:                current time in seconds

    Returns:
        cell_id of the handover target, or None.
    """
    threshold = serving_value + cfg.hom_db
    timers = {}
    for cell_id, value in neighbor_values.items():
        if value > threshold:
            timers[cell_id] = min(state.timers_ms.get(cell_id, 0) + cfg.tick_ms, cfg.ttt_ms)
    state.timers_ms = timers

    ready = [cid for cid, ms in timers.items() if ms >= cfg.ttt_ms]
    if not ready:
        return None
    if t - state.last_ho_time < cfg.min_time_between_ho_s:
        logger.debug("A3 trigger at t=%.3f suppressed by min_time_between_ho_s", t)
        return None

    target = min(ready, key=lambda cid: (-neighbor_values[cid], cid))
    state.timers_ms = {}
    state.last_ho_time = t
    return target


# ---------------------------------------------------------------------------
# Radio link failure
# ---------------------------------------------------------------------------
def rlf_check(sinr_history, qout_db, qout_duration_ms, tick_ms):
    """True iff the most recent SINR samples stayed below qout_db for the duration.

    Args:
        sinr_history:      SINR samples in dB, oldest first, one per tick
        qout_db:           out-of-sync threshold
        qout_duration_ms:  how long the link must stay out of sync
        tick_ms:           sampling interval of the history
    """
    run = 0
    for sinr in reversed(sinr_history):
        if sinr >= qout_db:
            break
        run += 1
    return run * tick_ms >= qout_duration_ms and run > 0
