"""Cell topology, radio propagation and network-side state.

Owns everything the UE would see on the air interface (RSRP, RSRQ,
RSSI, SINR, CQI) and everything the operator sees on the network side
(load, EMS alarms, maintenance tickets, KPI rates).  Pure logic plus a
per-UE shadowing state object; no file I/O.
"""

import logging
import math
import re
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from errors import ConfigError

logger = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# Constants
# ---------------------------------------------------------------------------
RSRP_RANGE_DBM = (-156.0, -31.0)
RSRQ_RANGE_DB = (-34.0, 3.0)
CQI_MAX = 15

# Minimum SINR for CQI k is CQI_SINR_THRESHOLDS_DB[k]; below entry 0 -> CQI 0.
CQI_SINR_THRESHOLDS_DB = np.linspace(-6.7, 22.7, 16)

SUBCARRIERS_PER_PRB = 12
SMOOTHING_FACTOR = 0.05
MIN_DISTANCE_M = 1.0

_BAND_RE = re.compile(r"^(B|n|U)(\d+)$")
_BAND_OFFSETS = {"B": 0, "n": 1000, "U": 2000}


class Tech(Enum):
    BTS_3G = "BTS_3G"
    ENODEB_4G = "ENODEB_4G"
    GNODEB_5G = "GNODEB_5G"


class Severity(Enum):
    """EMS alarm / maintenance ticket status.  Values are the dataset codes."""

    NONE = 0
    ALLOWED = 1
    SERVICE_IMPACTING = 2


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class CellSite:
    cell_id: int
    enb_id: int
    pci: int
    tac: int
    mcc: int
    mnc: int
    band: str
    earfcn: int
    tech: Tech
    position: tuple
    tx_power_dbm: float
    bandwidth_mhz: float
    backhaul_mbps: float
    max_users: int

    def __post_init__(self):
        if not 0 <= self.pci <= 503:
            raise ConfigError(f"cell {self.cell_id}: pci {self.pci} outside [0, 503]")
        if not 10.0 <= self.tx_power_dbm <= 50.0:
            raise ConfigError(
                f"cell {self.cell_id}: tx_power_dbm {self.tx_power_dbm} outside [10, 50]"
            )
        if self.bandwidth_mhz <= 0:
            raise ConfigError(f"cell {self.cell_id}: bandwidth_mhz must be > 0")
        if self.max_users < 1:
            raise ConfigError(f"cell {self.cell_id}: max_users must be >= 1")
        if self.backhaul_mbps < 0:
            raise ConfigError(f"cell {self.cell_id}: backhaul_mbps must be >= 0")
        if not _BAND_RE.match(self.band):
            raise ConfigError(f"cell {self.cell_id}: unknown band label '{self.band}'")
        if not all(math.isfinite(v) for v in self.position):
            raise ConfigError(f"cell {self.cell_id}: position must be finite")


@dataclass
class NetworkAttributes:
    connected_users: int = 0
    alarm: Severity = Severity.NONE
    ticket: Severity = Severity.NONE
    cfr: float = 0.0
    cdr: float = 0.0
    hof_rate: float = 0.0
    rlf_rate: float = 0.0


@dataclass(frozen=True)
class RadioConfig:
    pl0_db: float = 38.0
    path_loss_exp: float = 3.5
    shadowing_sigma_db: float = 4.0
    shadowing_corr_m: float = 50.0
    noise_dbm: float = -95.0
    n_prb: int = 50
    fast_fading: bool = False

    def __post_init__(self):
        if not 2.0 <= self.path_loss_exp <= 5.0:
            raise ConfigError(f"path_loss_exp {self.path_loss_exp} outside [2.0, 5.0]")
        if self.shadowing_sigma_db < 0:
            raise ConfigError("shadowing_sigma_db must be >= 0")
        if self.shadowing_corr_m <= 0:
            raise ConfigError("shadowing_corr_m must be > 0")
        if self.n_prb < 1:
            raise ConfigError("n_prb must be >= 1")


@dataclass(frozen=True)
class MeasurementSample:
    cell_id: int
    rsrp_dbm: float
    rsrq_db: float
    rssi_dbm: float
    sinr_db: float
    cqi: int


@dataclass(frozen=True)
class ScheduleWindow:
    """Half-open [start_s, end_s) window, optionally repeating every period_s."""

    cell_id: int
    start_s: float
    end_s: float
    value: object
    period_s: float = 0.0

    def active(self, t):
        if self.period_s > 0:
            t = t % self.period_s
        return self.start_s <= t < self.end_s


@dataclass
class NetworkSchedule:
    """Alarm, ticket, background-load and tx-power windows for one world."""

    alarms: list = field(default_factory=list)
    tickets: list = field(default_factory=list)
    load: list = field(default_factory=list)
    power: list = field(default_factory=list)

    def validate(self, cell_ids):
        """Raise ConfigError if any window references an unknown cell."""
        known = set(cell_ids)
        for kind in ("alarms", "tickets", "load", "power"):
            for w in getattr(self, kind):
                if w.cell_id not in known:
                    raise ConfigError(f"{kind} schedule references unknown cell_id {w.cell_id}")
                if w.end_s < w.start_s:
                    raise ConfigError(
                        f"{kind} window for cell {w.cell_id} ends before it starts"
                    )

    def severity(self, kind, cell_id, t):
        """Highest severity of the active windows; NONE when nothing is active."""
        worst = Severity.NONE
        for w in getattr(self, kind):
            if w.cell_id == cell_id and w.active(t) and w.value.value > worst.value:
                worst = w.value
        return worst

    def extra_users(self, cell_id, t):
        return sum(int(w.value) for w in self.load if w.cell_id == cell_id and w.active(t))

    def tx_offset_db(self, cell_id, t):
        return sum(float(w.value) for w in self.power if w.cell_id == cell_id and w.active(t))


@dataclass
class CellTickEvents:
    """Per-cell event tallies for one tick, fed into the KPI smoothing."""

    attached: int = 0
    cqi_zero: int = 0
    rlf: int = 0
    dropped: int = 0  # RLF the UE did not recover from by a successful handover
    ho_in: int = 0
    ho_in_failed: int = 0


# ---------------------------------------------------------------------------
# dB helpers: every dB <-> linear conversion goes through these two
# ---------------------------------------------------------------------------
def db_to_linear(db):
    return 10.0 ** (db / 10.0)


def linear_to_db(lin):
    return 10.0 * math.log10(lin)


def band_code(band):
    """Numeric code for a band label: B3 -> 3, n78 -> 1078, U1 -> 2001."""
    m = _BAND_RE.match(band)
    if not m:
        raise ConfigError(f"unknown band label '{band}'")
    return _BAND_OFFSETS[m.group(1)] + int(m.group(2))


def ca_enabled(cell, cells):
    """Carrier aggregation is possible when the same eNB radiates another EARFCN."""
    return any(
        other.enb_id == cell.enb_id and other.earfcn != cell.earfcn
        for other in cells
        if other.cell_id != cell.cell_id
    )


# ---------------------------------------------------------------------------
# Propagation
# ---------------------------------------------------------------------------
def path_loss_db(distance_m, cfg):
    """Log-distance path loss; distances below 1 m are clamped to 1 m."""
    d = max(float(distance_m), MIN_DISTANCE_M)
    return cfg.pl0_db + 10.0 * cfg.path_loss_exp * math.log10(d)


def sinr_to_cqi(sinr_db):
    if sinr_db < CQI_SINR_THRESHOLDS_DB[0]:
        return 0
    idx = int(np.searchsorted(CQI_SINR_THRESHOLDS_DB, sinr_db, side="right")) - 1
    return min(max(idx, 0), CQI_MAX)


class ShadowField:
    """Correlated log-normal shadowing (and optional fast fading) seen by one UE.

    Shadowing per cell follows an exponentially correlated process over the
    distance the UE has travelled: moving d metres gives
    s' = rho*s + sqrt(1 - rho^2)*sigma*N(0, 1) with rho = exp(-d / d_corr).
    A UE that has not moved keeps its value and consumes no randomness.

    Fast fading is one Rayleigh power draw per cell per tick; call
    new_tick() once per tick before measuring.
    """

    def __init__(self, cfg):
        self._cfg = cfg
        self._shadow = {}   # cell_id -> (position, value_db)
        self._fading = {}   # cell_id -> gain_db, cleared every tick

    def new_tick(self):
        self._fading.clear()

    def shadowing_db(self, cell_id, position, rng):
        sigma = self._cfg.shadowing_sigma_db
        if sigma == 0:
            return 0.0
        prev = self._shadow.get(cell_id)
        if prev is None:
            value = sigma * rng.standard_normal()
        else:
            last_pos, last_value = prev
            moved = math.dist(last_pos, position)
            if moved == 0:
                return last_value
            rho = math.exp(-moved / self._cfg.shadowing_corr_m)
            value = rho * last_value + math.sqrt(1.0 - rho * rho) * sigma * rng.standard_normal()
        self._shadow[cell_id] = (tuple(position), value)
        return value

    def fading_db(self, cell_id, rng):
        if not self._cfg.fast_fading:
            return 0.0
        gain = self._fading.get(cell_id)
        if gain is None:
            # Rayleigh amplitude -> exponentially distributed power, mean 1.
            gain = linear_to_db(max(rng.exponential(1.0), 1e-12))
            self._fading[cell_id] = gain
        return gain


def rx_power_dbm(ue_pos, cell, shadow_field, cfg, rng, tx_offset_db=0.0):
    """Wideband received power of ``cell`` at ``ue_pos``."""
    distance = math.dist(ue_pos, cell.position)
    return (
        cell.tx_power_dbm
        + tx_offset_db
        - path_loss_db(distance, cfg)
        - shadow_field.shadowing_db(cell.cell_id, ue_pos, rng)
        + shadow_field.fading_db(cell.cell_id, rng)
    )


def _clamp(v, lo, hi):
    return min(max(v, lo), hi)


def sample_from_powers(cell_id, serving_dbm, interferer_dbm, cfg):
    """Build a MeasurementSample from wideband powers.

    Args:
        cell_id:         measured cell
        serving_dbm:     wideband received power of the measured cell
        interferer_dbm:  iterable of co-channel wideband powers
        cfg:             RadioConfig

    Returns:
        MeasurementSample clamped to the reporting ranges.
    """
    s_lin = db_to_linear(serving_dbm)
    i_lin = sum(db_to_linear(p) for p in interferer_dbm)
    n_lin = db_to_linear(cfg.noise_dbm)
    rssi_lin = s_lin + i_lin + n_lin

    n_re = SUBCARRIERS_PER_PRB * cfg.n_prb
    rsrp = serving_dbm - linear_to_db(n_re)
    rsrq = linear_to_db(n_re * db_to_linear(rsrp) / rssi_lin)
    sinr = linear_to_db(s_lin / (i_lin + n_lin))

    return MeasurementSample(
        cell_id=cell_id,
        rsrp_dbm=_clamp(rsrp, *RSRP_RANGE_DBM),
        rsrq_db=_clamp(rsrq, *RSRQ_RANGE_DB),
        rssi_dbm=linear_to_db(rssi_lin),
        sinr_db=sinr,
        cqi=sinr_to_cqi(sinr),
    )


def measure(ue_pos, cell, interferers, shadow_field, cfg, rng, tx_offsets=None):
    """Measure one cell at ``ue_pos`` against the given interferers."""
    tx_offsets = tx_offsets or {}
    serving = rx_power_dbm(ue_pos, cell, shadow_field, cfg, rng,
                           tx_offsets.get(cell.cell_id, 0.0))
    others = [
        rx_power_dbm(ue_pos, c, shadow_field, cfg, rng, tx_offsets.get(c.cell_id, 0.0))
        for c in interferers
        if c.cell_id != cell.cell_id
    ]
    return sample_from_powers(cell.cell_id, serving, others, cfg)


def measure_all(ue_pos, cells, shadow_field, cfg, rng, tx_offsets=None):
    """Measure every cell once; co-channel cells (same EARFCN) interfere.

    Returns:
        dict cell_id -> MeasurementSample
    """
    tx_offsets = tx_offsets or {}
    powers = {
        c.cell_id: rx_power_dbm(ue_pos, c, shadow_field, cfg, rng,
                                tx_offsets.get(c.cell_id, 0.0))
        for c in cells
    }
    samples = {}
    for c in cells:
        co_channel = [
            powers[o.cell_id] for o in cells
            if o.cell_id != c.cell_id and o.earfcn == c.earfcn
        ]
        samples[c.cell_id] = sample_from_powers(c.cell_id, powers[c.cell_id], co_channel, cfg)
    return samples


def top_neighbors(cells, serving_id, k, samples):
    """The k strongest non-serving cells by RSRP, ties to the lower cell_id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    candidates = [
        c.cell_id for c in cells
        if c.cell_id != serving_id and c.cell_id in samples
    ]
    candidates.sort(key=lambda cid: (-samples[cid].rsrp_dbm, cid))
    return candidates[:k]


# ---------------------------------------------------------------------------
# Network-side state
# ---------------------------------------------------------------------------
def initial_network_state(cells):
    return {c.cell_id: NetworkAttributes() for c in cells}


def _smooth(prev, x, alpha):
    return _clamp((1.0 - alpha) * prev + alpha * x, 0.0, 1.0)


def advance_network(state, schedule, t, cells, attached=None, events=None,
                    smoothing=SMOOTHING_FACTOR):
    """Return the network state at time ``t``.

    Args:
        state:      dict cell_id -> NetworkAttributes (previous tick)
        schedule:   NetworkSchedule
        t:          simulation time in seconds
        cells:      list of CellSite (for max_users)
        attached:   dict cell_id -> number of attached UEs (None = 0)
        events:     dict cell_id -> CellTickEvents for this tick (None = no events)
        smoothing:  exponential smoothing factor applied to the KPI rates

    Returns:
        New dict cell_id -> NetworkAttributes; the input is not modified.
    """
    attached = attached or {}
    events = events or {}
    new_state = {}
    for cell in cells:
        prev = state[cell.cell_id]
        ev = events.get(cell.cell_id, CellTickEvents())
        users = attached.get(cell.cell_id, 0) + schedule.extra_users(cell.cell_id, t)
        base = max(ev.attached, 1)
        new_state[cell.cell_id] = replace(
            prev,
            connected_users=min(max(users, 0), cell.max_users),
            alarm=schedule.severity("alarms", cell.cell_id, t),
            ticket=schedule.severity("tickets", cell.cell_id, t),
            cfr=_smooth(prev.cfr, ev.cqi_zero / base, smoothing),
            cdr=_smooth(prev.cdr, ev.dropped / base, smoothing),
            hof_rate=_smooth(
                prev.hof_rate,
                ev.ho_in_failed / ev.ho_in if ev.ho_in else 0.0,
                smoothing,
            ),
            rlf_rate=_smooth(prev.rlf_rate, ev.rlf / base, smoothing),
        )
    return new_state
