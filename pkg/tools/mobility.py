"""UE movement: random waypoint, daily routine and stationary regimes.

Pure state transitions.  All randomness comes from the numpy Generator
passed in, so a world seeded once replays bit-identically.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum

from errors import ConfigError

logger = logging.getLogger(__name__)

SECONDS_PER_DAY = 86400
JITTER_SIGMA_M = 5.0
MAX_SPEED_MPS = 40.0


class DeviceType(Enum):
    PHONE_5G = "PHONE_5G"
    PHONE_4G = "PHONE_4G"
    IOT_STATIONARY = "IOT_STATIONARY"


class Pattern(Enum):
    RANDOM_WAYPOINT = "RandomWaypoint"
    ROUTINE = "Routine"
    STATIONARY = "Stationary"


@dataclass(frozen=True)
class Anchor:
    x: float
    y: float
    dwell_s: float


@dataclass(frozen=True)
class UeProfile:
    ue_id: int
    device_type: DeviceType
    qci: int
    speed_mps: float
    pattern: Pattern
    anchors: tuple = ()
    start: tuple = (0.0, 0.0)
    jitter_sigma_m: float = JITTER_SIGMA_M
    initial_cell: int = None

    def __post_init__(self):
        if not 1 <= self.qci <= 9:
            raise ConfigError(f"ue {self.ue_id}: qci {self.qci} outside [1, 9]")
        if not 0.0 <= self.speed_mps <= MAX_SPEED_MPS:
            raise ConfigError(f"ue {self.ue_id}: speed_mps {self.speed_mps} outside [0, 40]")
        if self.pattern is Pattern.ROUTINE:
            if len(self.anchors) < 1:
                raise ConfigError(f"ue {self.ue_id}: Routine pattern needs at least one anchor")
            if len(self.anchors) > 1 and self.speed_mps <= 0:
                raise ConfigError(f"ue {self.ue_id}: Routine with several anchors needs speed > 0")
        if self.pattern is Pattern.STATIONARY and self.speed_mps != 0:
            raise ConfigError(f"ue {self.ue_id}: Stationary pattern requires speed_mps 0")

    def start_position(self):
        if self.pattern is Pattern.ROUTINE:
            return (self.anchors[0].x, self.anchors[0].y)
        return tuple(self.start)


@dataclass(frozen=True)
class UeState:
    position: tuple
    velocity: tuple = (0.0, 0.0)
    serving_cell: int = None
    attach_time: float = 0.0
    # movement bookkeeping
    waypoint: tuple = None
    routine_phase_s: float = 0.0


@dataclass(frozen=True)
class Bounds:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def clamp(self, pos):
        return (
            min(max(pos[0], self.x_min), self.x_max),
            min(max(pos[1], self.y_min), self.y_max),
        )

    def contains(self, pos):
        return self.x_min <= pos[0] <= self.x_max and self.y_min <= pos[1] <= self.y_max


# ---------------------------------------------------------------------------
# Routine cycle
# ---------------------------------------------------------------------------
def routine_legs(profile):
    """Expand anchors into (kind, duration_s, start, end) legs of one cycle.

    Each anchor contributes a dwell leg followed by a travel leg to the
    next anchor (cyclically).  A single anchor is one dwell leg.
    """
    anchors = profile.anchors
    legs = []
    for i, a in enumerate(anchors):
        here = (a.x, a.y)
        legs.append(("dwell", a.dwell_s, here, here))
        if len(anchors) > 1:
            nxt = anchors[(i + 1) % len(anchors)]
            there = (nxt.x, nxt.y)
            legs.append(("travel", math.dist(here, there) / profile.speed_mps, here, there))
    return legs


def cycle_period_s(profile):
    return sum(leg[1] for leg in routine_legs(profile))


def routine_position(profile, phase_s):
    """Nominal (jitter-free) position at ``phase_s`` seconds into the cycle."""
    period = cycle_period_s(profile)
    remaining = phase_s % period if math.isfinite(period) and period > 0 else phase_s
    for kind, duration, start, end in routine_legs(profile):
        if remaining < duration:
            if kind == "dwell":
                return start
            frac = remaining / duration
            return (start[0] + frac * (end[0] - start[0]),
                    start[1] + frac * (end[1] - start[1]))
        remaining -= duration
    a = profile.anchors[0]
    return (a.x, a.y)


# ---------------------------------------------------------------------------
# Public API
# ---------------------------------------------------------------------------
def initial_state(profile, bounds, rng):
    pos = bounds.clamp(profile.start_position())
    waypoint = None
    if profile.pattern is Pattern.RANDOM_WAYPOINT:
        waypoint = _random_point(bounds, rng)
    return UeState(position=pos, waypoint=waypoint)


def step(state, profile, dt, bounds, rng):
    """Advance one UE by ``dt`` seconds.

    Args:
        state:    UeState
        profile:  UeProfile
        dt:       step length in seconds (> 0)
        bounds:   Bounds of the world; positions are clamped into it
        rng:      numpy Generator

    Returns:
        The next UeState.
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")

    if profile.pattern is Pattern.STATIONARY:
        return replace(state, velocity=(0.0, 0.0))

    if profile.pattern is Pattern.RANDOM_WAYPOINT:
        return _step_waypoint(state, profile, dt, bounds, rng)

    return _step_routine(state, profile, dt, bounds, rng)


def time_context(t, epoch):
    """(day_of_week 0..6, time_of_day_s 0..86399) for time ``t`` seconds."""
    if t < 0:
        raise ValueError("t must be >= 0")
    whole = math.floor(t)
    return (epoch + whole // SECONDS_PER_DAY) % 7, whole % SECONDS_PER_DAY


# ---------------------------------------------------------------------------
# Internal helpers
# ---------------------------------------------------------------------------
def _random_point(bounds, rng):
    return (float(rng.uniform(bounds.x_min, bounds.x_max)),
            float(rng.uniform(bounds.y_min, bounds.y_max)))


def _step_waypoint(state, profile, dt, bounds, rng):
    waypoint = state.waypoint or _random_point(bounds, rng)
    x, y = state.position
    dx, dy = waypoint[0] - x, waypoint[1] - y
    dist = math.hypot(dx, dy)
    reach = profile.speed_mps * dt

    if reach >= dist:
        new_pos = bounds.clamp(waypoint)
        velocity = (dx / dt, dy / dt)
        waypoint = _random_point(bounds, rng)
    else:
        ux, uy = dx / dist, dy / dist
        new_pos = bounds.clamp((x + ux * reach, y + uy * reach))
        velocity = (ux * profile.speed_mps, uy * profile.speed_mps)

    return replace(state, position=new_pos, velocity=velocity, waypoint=waypoint)


def _step_routine(state, profile, dt, bounds, rng):
    period = cycle_period_s(profile)
    old_phase = state.routine_phase_s
    phase = (old_phase + dt) % period if math.isfinite(period) and period > 0 else old_phase + dt

    before = routine_position(profile, old_phase)
    nominal = routine_position(profile, phase)
    velocity = ((nominal[0] - before[0]) / dt, (nominal[1] - before[1]) / dt)

    sigma = profile.jitter_sigma_m
    if sigma > 0:
        jx, jy = rng.normal(0.0, sigma, size=2)
        nominal = (nominal[0] + float(jx), nominal[1] + float(jy))

    return replace(state, position=bounds.clamp(nominal), velocity=velocity,
                   routine_phase_s=phase)
