"""Deep-Mobility decision engine.

Keeps a per-UE sliding window of KPI records, scores it with the model
and applies the network-side policy layer on top: service-impacting
alarm/ticket veto (lifted on radio link failure), score margin and
handover rate limiting.
"""

import logging
from collections import deque
from dataclasses import dataclass
from enum import Enum

from dataset import SLOTS, is_padding, normalize_many
from errors import ConfigError, DataError
from nn import forward
from tables import neighbor_column

logger = logging.getLogger(__name__)


class Reason(Enum):
    MODEL_CHOICE = "ModelChoice"
    ALARM_VETO = "AlarmVeto"
    RATE_LIMITED = "RateLimited"
    MARGIN_NOT_MET = "MarginNotMet"
    RLF_OVERRIDE = "RlfOverride"


@dataclass(frozen=True)
class DecisionPolicy:
    veto_service_impacting: bool = True
    allow_veto_override_on_rlf: bool = True
    min_time_between_ho_s: float = 1.0
    score_margin: float = 0.05

    def __post_init__(self):
        if self.score_margin < 0:
            raise ConfigError("policy.score_margin must be >= 0")
        if self.min_time_between_ho_s < 0:
            raise ConfigError("policy.min_time_between_ho_s must be >= 0")


@dataclass(frozen=True)
class Decision:
    slot: int                 # 0 = stay, 1..4 = hand over to that neighbour slot
    scores: tuple
    vetoed_slots: frozenset
    reason: Reason

    @property
    def action(self):
        return "Stay" if self.slot == 0 else f"HandOver({self.slot})"

    def log_row(self, t, ue_id):
        row = {
            "t": float(t), "ue_id": ue_id, "action": self.action,
            "reason": self.reason.value, "score_stay": float(self.scores[0]),
            "vetoed_mask": sum(1 << (s - 1) for s in self.vetoed_slots),
        }
        for slot in range(1, SLOTS + 1):
            row[f"score_{slot}"] = float(self.scores[slot])
        return row


# ---------------------------------------------------------------------------
# Sliding window
# ---------------------------------------------------------------------------
class WindowBuffer:
    """Fixed-capacity ring of a UE's most recent records."""

    def __init__(self, capacity):
        if capacity < 1:
            raise ConfigError("window length must be >= 1")
        self.capacity = capacity
        self._ring = deque(maxlen=capacity)

    def __len__(self):
        return len(self._ring)

    def push(self, record):
        self._ring.append(record)

    def read(self):
        """The window, oldest first, front-padded by repeating the oldest record."""
        if not self._ring:
            return []
        items = list(self._ring)
        return [items[0]] * (self.capacity - len(items)) + items


def window_push(buffer, record):
    buffer.push(record)
    return buffer


def pad_window(records, length):
    if not records:
        raise DataError("empty decision window")
    records = list(records)[-length:]
    return [records[0]] * (length - len(records)) + records


# ---------------------------------------------------------------------------
# Decision
# ---------------------------------------------------------------------------
def _service_impacting(record, slot):
    return (record[neighbor_column(slot, "alarm_code")] == 2
            or record[neighbor_column(slot, "ticket_code")] == 2)


def decide(model, window, scaler, policy, rlf, t, last_ho):
    """Score the window and apply the policy layer.

    Args:
        model:    DeepMobilityModel
        window:   this UE's recent KPI records, oldest first (front-padded to
                  model.window_len when shorter)
        scaler:   fitted dataset.Scaler
        policy:   DecisionPolicy
        rlf:      True when the serving link is in radio link failure
        t:        current time in seconds
        last_ho:  time of this UE's previous handover in seconds

    Returns:
        Decision
    """
    if scaler is None:
        raise DataError("scaler has not been fitted")
    window = pad_window(window, model.window_len)
    seq, _ = normalize_many(window, scaler, with_static=False)
    _, static = normalize_many(window[-1:], scaler)
    scores = forward(model, seq, static[0])

    last = window[-1]
    real = [s for s in range(1, SLOTS + 1) if not is_padding(last, s)]
    vetoed = set()
    if policy.veto_service_impacting:
        vetoed = {s for s in real if _service_impacting(last, s)}

    allowed = [s for s in real if s not in vetoed]
    if rlf and policy.allow_veto_override_on_rlf:
        allowed = real

    best = 0
    for s in allowed:
        if scores[s] > scores[best]:
            best = s
    frozen = frozenset(vetoed)
    score_tuple = tuple(float(v) for v in scores)

    if best == 0:
        top_real = max(real, key=lambda s: scores[s], default=None)
        vetoed_winner = top_real in vetoed and scores[top_real] > scores[0]
        reason = Reason.ALARM_VETO if vetoed_winner else Reason.MODEL_CHOICE
        return Decision(0, score_tuple, frozen, reason)

    if scores[best] - scores[0] < policy.score_margin:
        return Decision(0, score_tuple, frozen, Reason.MARGIN_NOT_MET)
    if t - last_ho < policy.min_time_between_ho_s:
        return Decision(0, score_tuple, frozen, Reason.RATE_LIMITED)

    reason = Reason.RLF_OVERRIDE if best in vetoed else Reason.MODEL_CHOICE
    logger.debug("t=%.3f handover to slot %d (%s)", t, best, reason.value)
    return Decision(best, score_tuple, frozen, reason)
