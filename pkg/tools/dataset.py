"""KPI record assembly, oracle labelling, normalisation, windowing and split.

A record is a plain dict keyed by tables.KPI_HEADERS: the serving-cell
block, four neighbour blocks (padded when the UE hears fewer cells),
UE/time context and the oracle label.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

import tables
from errors import ConfigError, DataError
from mobility import DeviceType, time_context
from network import RSRP_RANGE_DBM, RSRQ_RANGE_DB, Tech, band_code, ca_enabled

logger = logging.getLogger(__name__)

SLOTS = tables.NEIGHBOR_SLOTS
PADDING = {
    "cell_id": -1,
    "rsrp_dbm": RSRP_RANGE_DBM[0],
    "rsrq_db": RSRQ_RANGE_DB[0],
    "load_frac": 1.0,
    "alarm_code": 2,
    "ticket_code": 2,
    "backhaul_mbps": 0.0,
}

RSRP_SPAN_DB = RSRP_RANGE_DBM[1] - RSRP_RANGE_DBM[0]

# Standard QCI table: qci -> (packet delay budget ms, packet error loss rate).
QCI_CHARACTERISTICS = {
    1: (100, 1e-2),
    2: (150, 1e-3),
    3: (50, 1e-3),
    4: (300, 1e-6),
    5: (100, 1e-6),
    6: (300, 1e-6),
    7: (100, 1e-3),
    8: (300, 1e-6),
    9: (300, 1e-6),
}


@dataclass(frozen=True)
class OracleConfig:
    w_rsrp: float = 1.0
    w_load: float = 0.5
    w_bh: float = 0.3
    p_alarm: float = 10.0
    p_ticket: float = 5.0
    stickiness_db: float = 3.0
    backhaul_ref_mbps: float = 10000.0
    horizon_s: float = 0.0

    def __post_init__(self):
        if self.horizon_s < 0:
            raise ConfigError("oracle.horizon_s must be >= 0")


# ---------------------------------------------------------------------------
# Feature layout: fixed order, documented in workflows/config_reference.md
# ---------------------------------------------------------------------------
SEQ_FEATURES = (
    ["s_rsrp_dbm", "s_rsrq_db", "s_sinr_db", "s_cqi"]
    + [tables.neighbor_column(i, f) for i in range(1, SLOTS + 1) for f in ("rsrp_dbm", "rsrq_db")]
)

STATIC_NUMERIC = (
    ["day_of_week", "time_of_day_s", "qci", "s_ca_enabled", "s_rsrp_dbm", "s_load_frac",
     "s_backhaul_mbps", "s_cfr", "s_cdr", "s_hof_rate", "s_rlf_rate"]
    + [tables.neighbor_column(i, f) for i in range(1, SLOTS + 1)
       for f in ("rsrp_dbm", "load_frac", "backhaul_mbps")]
)

NUMERIC_FEATURES = list(dict.fromkeys(SEQ_FEATURES + STATIC_NUMERIC))

DEVICE_ORDER = [d.value for d in DeviceType]
TECH_ORDER = [t.value for t in Tech]
SEVERITY_CODES = (0, 1, 2)


def _onehot_names():
    names = [f"device_type={d}" for d in DEVICE_ORDER]
    names += [f"s_tech={t}" for t in TECH_ORDER]
    for col in ["s_alarm_code", "s_ticket_code"] + [
        tables.neighbor_column(i, f) for i in range(1, SLOTS + 1)
        for f in ("alarm_code", "ticket_code")
    ]:
        names += [f"{col}={c}" for c in SEVERITY_CODES]
    names += [f"n{i}_is_padding" for i in range(1, SLOTS + 1)]
    return names


ONEHOT_FEATURES = _onehot_names()
STATIC_FEATURES = STATIC_NUMERIC + ONEHOT_FEATURES


# ---------------------------------------------------------------------------
# Record assembly
# ---------------------------------------------------------------------------
def assemble_record(profile, state, serving, neighbors, attrs, cells, t, epoch=0):
    """Flatten one UE tick into an unlabelled KPI record.

    Args:
        profile:    UeProfile
        state:      UeState (serving_cell must match ``serving.cell_id``)
        serving:    MeasurementSample of the serving cell
        neighbors:  list of (cell_id, MeasurementSample), strongest first, <= 4
        attrs:      dict cell_id -> NetworkAttributes
        cells:      dict cell_id -> CellSite
        t:          simulation time in seconds
        epoch:      day of week at t = 0

    Returns:
        dict keyed by tables.KPI_HEADERS with label None.
    """
    if len(neighbors) > SLOTS:
        raise ValueError(f"at most {SLOTS} neighbours per record")
    day, tod = time_context(t, epoch)
    cell = cells[serving.cell_id]
    a = attrs[serving.cell_id]

    rec = {
        "schema_version": tables.SCHEMA_VERSION,
        "t": float(t),
        "ue_id": profile.ue_id,
        "day_of_week": day,
        "time_of_day_s": tod,
        "device_type": profile.device_type.value,
        "qci": profile.qci,
        "s_cell_id": cell.cell_id,
        "s_tech": cell.tech.value,
        "s_band_code": band_code(cell.band),
        "s_earfcn": cell.earfcn,
        "s_ca_enabled": int(ca_enabled(cell, cells.values())),
        "s_rsrp_dbm": serving.rsrp_dbm,
        "s_rsrq_db": serving.rsrq_db,
        "s_rssi_dbm": serving.rssi_dbm,
        "s_sinr_db": serving.sinr_db,
        "s_cqi": serving.cqi,
        "s_load_frac": a.connected_users / cell.max_users,
        "s_alarm_code": a.alarm.value,
        "s_ticket_code": a.ticket.value,
        "s_backhaul_mbps": float(cell.backhaul_mbps),
        "s_cfr": a.cfr,
        "s_cdr": a.cdr,
        "s_hof_rate": a.hof_rate,
        "s_rlf_rate": a.rlf_rate,
        "label": None,
    }

    for slot in range(1, SLOTS + 1):
        if slot <= len(neighbors):
            cid, sample = neighbors[slot - 1]
            ncell, na = cells[cid], attrs[cid]
            block = {
                "cell_id": cid,
                "rsrp_dbm": sample.rsrp_dbm,
                "rsrq_db": sample.rsrq_db,
                "load_frac": na.connected_users / ncell.max_users,
                "alarm_code": na.alarm.value,
                "ticket_code": na.ticket.value,
                "backhaul_mbps": float(ncell.backhaul_mbps),
            }
        else:
            block = PADDING
        for name, value in block.items():
            rec[tables.neighbor_column(slot, name)] = value
    return rec


def is_padding(record, slot):
    return record[tables.neighbor_column(slot, "cell_id")] < 0


def slot_cell(record, slot):
    """cell_id behind a decision slot (0 = serving)."""
    if slot == 0:
        return record["s_cell_id"]
    return record[tables.neighbor_column(slot, "cell_id")]


def qci_characteristics(qci):
    """(packet delay budget ms, packet error loss rate) for a QCI 1..9."""
    try:
        return QCI_CHARACTERISTICS[qci]
    except KeyError as exc:
        raise DataError(f"unknown QCI {qci}") from exc


# ---------------------------------------------------------------------------
# Oracle labeller
# ---------------------------------------------------------------------------
def _norm_rsrp(rsrp_dbm):
    return min(max((rsrp_dbm - RSRP_RANGE_DBM[0]) / RSRP_SPAN_DB, 0.0), 1.0)


def _utility(cfg, rsrp, load, backhaul, alarm, ticket):
    return (
        cfg.w_rsrp * _norm_rsrp(rsrp)
        + cfg.w_load * (1.0 - load)
        + cfg.w_bh * min(backhaul / cfg.backhaul_ref_mbps, 1.0)
        - cfg.p_alarm * (alarm == 2)
        - cfg.p_ticket * (ticket == 2)
    )


def _stickiness(cfg):
    return cfg.w_rsrp * cfg.stickiness_db / RSRP_SPAN_DB


def cell_utilities(record, cfg):
    """Utility of every real cell in the record, keyed by cell_id (no stickiness)."""
    out = {
        record["s_cell_id"]: _utility(
            cfg, record["s_rsrp_dbm"], record["s_load_frac"], record["s_backhaul_mbps"],
            record["s_alarm_code"], record["s_ticket_code"]),
    }
    for slot in range(1, SLOTS + 1):
        if is_padding(record, slot):
            continue
        col = lambda name: record[tables.neighbor_column(slot, name)]  # noqa: E731
        out[col("cell_id")] = _utility(cfg, col("rsrp_dbm"), col("load_frac"),
                                       col("backhaul_mbps"), col("alarm_code"),
                                       col("ticket_code"))
    return out


def _slot_scores(record, utilities, cfg):
    scores = [utilities[record["s_cell_id"]] + _stickiness(cfg)]
    for slot in range(1, SLOTS + 1):
        if is_padding(record, slot):
            scores.append(-math.inf)
        else:
            scores.append(utilities[slot_cell(record, slot)])
    return scores


def _best(scores):
    best = 0
    for i in range(1, len(scores)):
        if scores[i] > scores[best]:
            best = i
    return best


def candidate_scores(record, cfg):
    """Utility of staying (index 0) and of each neighbour slot (1..4).

    Padded slots score -inf so they can never be selected.
    """
    return _slot_scores(record, cell_utilities(record, cfg), cfg)


def oracle_label(record, cfg):
    """Index of the best candidate; ties go to serving, then the lowest slot."""
    return _best(candidate_scores(record, cfg))


def hindsight_labels(records, cfg):
    """Label every record, judging candidates over the next ``cfg.horizon_s``.

    A candidate's utility is its mean over the same UE's records with
    t' in [t, t + horizon_s] that measured that cell.  The serving cell
    keeps its stickiness bonus and padded slots never win.  With
    horizon_s = 0 every label equals oracle_label(record, cfg).

    Args:
        records:  KPI records of one run, any UE order; labelled in place
        cfg:      OracleConfig

    Returns:
        ``records``.
    """
    if cfg.horizon_s <= 0:
        for rec in records:
            rec["label"] = oracle_label(rec, cfg)
        return records

    by_ue = {}
    for rec in records:
        by_ue.setdefault(rec["ue_id"], []).append(rec)

    for stream in by_ue.values():
        stream.sort(key=lambda r: r["t"])
        utilities = [cell_utilities(r, cfg) for r in stream]
        end = 0
        for i, rec in enumerate(stream):
            horizon_end = rec["t"] + cfg.horizon_s + 1e-9
            end = max(end, i + 1)
            while end < len(stream) and stream[end]["t"] <= horizon_end:
                end += 1
            sums, counts = {}, {}
            for u in utilities[i:end]:
                for cid, value in u.items():
                    sums[cid] = sums.get(cid, 0.0) + value
                    counts[cid] = counts.get(cid, 0) + 1
            mean = {cid: sums[cid] / counts[cid] for cid in sums}
            rec["label"] = _best(_slot_scores(rec, mean, cfg))
    logger.debug("Hindsight labels over %.1f s for %d UE(s)", cfg.horizon_s, len(by_ue))
    return records


# ---------------------------------------------------------------------------
# Normalisation
# ---------------------------------------------------------------------------
@dataclass
class Scaler:
    names: list
    mins: np.ndarray
    maxs: np.ndarray

    def to_dict(self):
        return {"names": list(self.names), "mins": self.mins.tolist(),
                "maxs": self.maxs.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(list(d["names"]), np.asarray(d["mins"], dtype=float),
                   np.asarray(d["maxs"], dtype=float))


def _numeric_matrix(records):
    return np.array([[float(r[n]) for n in NUMERIC_FEATURES] for r in records], dtype=float)


def _onehot_matrix(records):
    out = np.zeros((len(records), len(ONEHOT_FEATURES)))
    index = {name: i for i, name in enumerate(ONEHOT_FEATURES)}
    for row, r in enumerate(records):
        out[row, index[f"device_type={r['device_type']}"]] = 1.0
        out[row, index[f"s_tech={r['s_tech']}"]] = 1.0
        for col in ("s_alarm_code", "s_ticket_code"):
            out[row, index[f"{col}={r[col]}"]] = 1.0
        for slot in range(1, SLOTS + 1):
            for f in ("alarm_code", "ticket_code"):
                col = tables.neighbor_column(slot, f)
                out[row, index[f"{col}={r[col]}"]] = 1.0
            if is_padding(r, slot):
                out[row, index[f"n{slot}_is_padding"]] = 1.0
    return out


def fit_scaler(records):
    """Per-feature min/max over the training rows."""
    if not records:
        raise DataError("empty training set")
    m = _numeric_matrix(records)
    return Scaler(list(NUMERIC_FEATURES), m.min(axis=0), m.max(axis=0))


def _scale(values, scaler):
    span = scaler.maxs - scaler.mins
    safe = np.where(span > 0, span, 1.0)
    scaled = np.where(span > 0, (values - scaler.mins) / safe, 0.0)
    return np.clip(scaled, 0.0, 1.0)


def normalize_many(records, scaler, with_static=True):
    """Feature matrices for many records.

    Returns:
        (seq, static): arrays of shape (N, len(SEQ_FEATURES)) and
        (N, len(STATIC_FEATURES)), every entry in [0, 1].  ``static`` is
        None when with_static is False.
    """
    if scaler is None:
        raise DataError("scaler has not been fitted")
    if list(scaler.names) != NUMERIC_FEATURES:
        raise DataError("scaler feature list does not match this schema")
    scaled = _scale(_numeric_matrix(records), scaler)
    pos = {n: i for i, n in enumerate(NUMERIC_FEATURES)}
    seq = scaled[:, [pos[n] for n in SEQ_FEATURES]]
    if not with_static:
        return seq, None
    static = np.hstack([scaled[:, [pos[n] for n in STATIC_NUMERIC]], _onehot_matrix(records)])
    return seq, static


def normalize(record, scaler):
    """Flat feature vector (SEQ_FEATURES + STATIC_FEATURES) for one record."""
    seq, static = normalize_many([record], scaler)
    return np.concatenate([seq[0], static[0]])


# ---------------------------------------------------------------------------
# Windows and split
# ---------------------------------------------------------------------------
def build_windows(records, window_len):
    """Cut each UE's time-ordered stream into non-overlapping full windows."""
    if window_len < 1:
        raise DataError("window_len must be >= 1")
    by_ue = {}
    for rec in records:
        by_ue.setdefault(rec["ue_id"], []).append(rec)

    windows = []
    dropped = 0
    for ue_id in sorted(by_ue):
        stream = sorted(by_ue[ue_id], key=lambda r: r["t"])
        full = len(stream) // window_len
        dropped += len(stream) - full * window_len
        windows.extend(stream[i * window_len:(i + 1) * window_len] for i in range(full))
    logger.debug("Built %d windows of %d records (%d trailing records dropped)",
                 len(windows), window_len, dropped)
    return windows


def split(windows, val_fraction=0.3, seed=0):
    """Random window-level split; |validation| = round(val_fraction * N) exactly.

    Raises DataError when the rounded size would leave either side empty.

    Returns:
        (train_windows, val_windows), each in original order.
    """
    n = len(windows)
    if n < 2:
        raise DataError(f"need at least 2 windows to split, got {n}")
    if not 0.0 < val_fraction < 1.0:
        raise DataError(f"val_fraction {val_fraction} outside (0, 1)")
    n_val = int(math.floor(val_fraction * n + 0.5))
    if not 0 < n_val < n:
        raise DataError(
            f"val_fraction {val_fraction} of {n} windows gives {n_val} validation windows"
        )
    perm = np.random.default_rng(seed).permutation(n)
    val_idx = set(perm[:n_val].tolist())
    train = [w for i, w in enumerate(windows) if i not in val_idx]
    val = [w for i, w in enumerate(windows) if i in val_idx]
    return train, val


def windows_to_arrays(windows, scaler):
    """Stack windows into model inputs.

    Returns:
        (seq, static, labels): (N, T, D_seq), (N, D_static) from each
        window's last record, and (N,) integer labels.
    """
    if not windows:
        raise DataError("empty training set")
    t_len = len(windows[0])
    if any(len(w) != t_len for w in windows):
        raise DataError("windows of unequal length")
    flat = [rec for w in windows for rec in w]
    seq, _ = normalize_many(flat, scaler, with_static=False)
    _, static = normalize_many([w[-1] for w in windows], scaler)
    seq = seq.reshape(len(windows), t_len, len(SEQ_FEATURES))
    labels = np.array([w[-1]["label"] for w in windows], dtype=int)
    return seq, static, labels


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------
def write_csv(records, path):
    tables.write_kpi_rows(path, records)


def read_csv(path):
    return tables.read_kpi_rows(path)
