"""File I/O for the Deep-Mobility lab.

All CSV and JSON reading/writing lives here: frozen column schemas,
dataset rows, training history, decision / event logs, run manifests
and the run log.  No business logic, only transport.
"""

import csv
import json
import logging
import os
import tempfile
from pathlib import Path

from errors import DataError

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
NEIGHBOR_SLOTS = 4
FLOAT_FORMAT = "{:.6f}"

# ---------------------------------------------------------------------------
# Schema definitions. Column order is frozen; bump SCHEMA_VERSION to change.
# ---------------------------------------------------------------------------
SERVING_COLUMNS = [
    ("s_cell_id", int),
    ("s_tech", str),
    ("s_band_code", int),
    ("s_earfcn", int),
    ("s_ca_enabled", int),
    ("s_rsrp_dbm", float),
    ("s_rsrq_db", float),
    ("s_rssi_dbm", float),
    ("s_sinr_db", float),
    ("s_cqi", int),
    ("s_load_frac", float),
    ("s_alarm_code", int),
    ("s_ticket_code", int),
    ("s_backhaul_mbps", float),
    ("s_cfr", float),
    ("s_cdr", float),
    ("s_hof_rate", float),
    ("s_rlf_rate", float),
]

NEIGHBOR_FIELDS = [
    ("cell_id", int),
    ("rsrp_dbm", float),
    ("rsrq_db", float),
    ("load_frac", float),
    ("alarm_code", int),
    ("ticket_code", int),
    ("backhaul_mbps", float),
]


def neighbor_column(slot, name):
    """Column name of field ``name`` in neighbour slot 1..4."""
    return f"n{slot}_{name}"


KPI_COLUMNS = (
    [
        ("schema_version", int),
        ("t", float),
        ("ue_id", int),
        ("day_of_week", int),
        ("time_of_day_s", int),
        ("device_type", str),
        ("qci", int),
    ]
    + SERVING_COLUMNS
    + [
        (neighbor_column(slot, name), kind)
        for slot in range(1, NEIGHBOR_SLOTS + 1)
        for name, kind in NEIGHBOR_FIELDS
    ]
    + [("label", int)]
)

KPI_HEADERS = [name for name, _ in KPI_COLUMNS]
KPI_TYPES = dict(KPI_COLUMNS)

HISTORY_HEADERS = ["epoch", "train_loss", "train_acc", "val_loss", "val_acc", "learning_rate"]

DECISION_LOG_HEADERS = [
    "t", "ue_id", "action", "reason", "score_stay",
    "score_1", "score_2", "score_3", "score_4", "vetoed_mask",
]

EVENT_LOG_HEADERS = ["t", "ue_id", "from_cell", "to_cell", "cause", "outcome"]

REPORT_HEADERS = [
    "policy", "handover_count", "ping_pong_count", "hof_count",
    "rlf_count", "mean_sinr_db", "time_on_vetoed_cells_s",
]

RUN_LOG_HEADERS = [
    "command", "started_at", "finished_at", "duration_seconds", "status", "errors",
]


# ---------------------------------------------------------------------------
# Generic helpers
# ---------------------------------------------------------------------------
def format_value(value):
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return FLOAT_FORMAT.format(value)
    return str(value)


def write_rows(path, headers, rows):
    """Write dict rows as a UTF-8 CSV with a mandatory header row.

    Column order matches ``headers`` exactly; missing keys are written empty.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(headers)
        for row in rows:
            writer.writerow([format_value(row.get(h, "")) for h in headers])
    logger.debug("Wrote %s", path)


def append_row(path, headers, row):
    """Append one dict row, creating the file with its header when new."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new_file = not path.exists()
    with open(path, "a", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if new_file:
            writer.writerow(headers)
        writer.writerow([format_value(row.get(h, "")) for h in headers])


def write_json_atomic(path, payload):
    """Write JSON to a temp file in the target directory, then rename over."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise DataError(f"{path}: file not found") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc


# ---------------------------------------------------------------------------
# KPI dataset
# ---------------------------------------------------------------------------
def write_kpi_rows(path, records):
    rows = []
    for rec in records:
        if rec.get("label") is None:
            raise DataError(f"record ue={rec.get('ue_id')} t={rec.get('t')} has no label")
        rows.append(rec)
    write_rows(path, KPI_HEADERS, rows)
    logger.info("Wrote %d KPI records to %s", len(rows), path)


def read_kpi_rows(path):
    """Read a KPI CSV back into typed dict rows.

    Raises DataError naming the line for malformed rows, and for unknown
    or missing columns.
    """
    try:
        fh = open(path, newline="", encoding="utf-8")
    except FileNotFoundError as exc:
        raise DataError(f"{path}: file not found") from exc

    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: missing header row")
        unknown = [h for h in header if h not in KPI_TYPES]
        if unknown:
            raise DataError(f"{path}: unknown column(s) {', '.join(unknown)}")
        missing = [h for h in KPI_HEADERS if h not in header]
        if missing:
            raise DataError(f"{path}: missing column(s) {', '.join(missing)}")

        records = []
        for line_no, values in enumerate(reader, start=2):
            if not values:
                continue
            if len(values) != len(header):
                raise DataError(
                    f"{path}:{line_no}: expected {len(header)} fields, got {len(values)}"
                )
            rec = {}
            for name, raw in zip(header, values):
                kind = KPI_TYPES[name]
                try:
                    rec[name] = kind(raw) if kind is not str else raw
                except ValueError as exc:
                    raise DataError(f"{path}:{line_no}: bad value for {name}: '{raw}'") from exc
            if rec["schema_version"] != SCHEMA_VERSION:
                raise DataError(
                    f"{path}:{line_no}: schema_version {rec['schema_version']} "
                    f"(expected {SCHEMA_VERSION})"
                )
            label = rec["label"]
            if not 0 <= label <= NEIGHBOR_SLOTS:
                raise DataError(f"{path}:{line_no}: label {label} outside [0, {NEIGHBOR_SLOTS}]")
            if label > 0 and rec[neighbor_column(label, "cell_id")] < 0:
                raise DataError(f"{path}:{line_no}: label {label} points at a padded slot")
            records.append(rec)

    logger.info("Read %d KPI records from %s", len(records), path)
    return records


# ---------------------------------------------------------------------------
# Training history
# ---------------------------------------------------------------------------
def write_history(path, history):
    rows = [dict(entry, epoch=i + 1) for i, entry in enumerate(history)]
    write_rows(path, HISTORY_HEADERS, rows)


def read_history(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            {
                "epoch": int(r["epoch"]),
                **{k: float(r[k]) for k in HISTORY_HEADERS[1:]},
            }
            for r in csv.DictReader(fh)
        ]


# ---------------------------------------------------------------------------
# Simulation logs
# ---------------------------------------------------------------------------
def write_events(path, events):
    rows = [
        {
            "t": e.t, "ue_id": e.ue_id, "from_cell": e.from_cell,
            "to_cell": e.to_cell, "cause": e.cause.value, "outcome": e.outcome.value,
        }
        for e in events
    ]
    write_rows(path, EVENT_LOG_HEADERS, rows)


def write_decisions(path, rows):
    write_rows(path, DECISION_LOG_HEADERS, rows)


def write_reports(path, reports):
    """One row per policy; ``reports`` maps policy name -> SimReport."""
    rows = []
    for name, report in reports.items():
        row = {"policy": name}
        row.update(report.metrics())
        rows.append(row)
    write_rows(path, REPORT_HEADERS, rows)


def log_run(path, summary):
    """Append one summary row to the run log.  Column order = RUN_LOG_HEADERS."""
    append_row(path, RUN_LOG_HEADERS, summary)
    logger.info("Logged run summary to '%s'", path)
