"""Closed-loop handover simulation.

Ticks a seeded world (mobility -> network state -> measurements ->
KPI record -> policy -> handover execution) and reports comparative
handover-quality metrics per policy.  One world is single-threaded and
owns all of its mutable state; worlds never share anything.
"""

import logging
import math
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

import baseline
import dataset
import engine
import mobility
import network
from baseline import A3State, Cause, HandoverEvent, Outcome
from errors import ConfigError, DataError
from network import CellTickEvents, Severity

logger = logging.getLogger(__name__)

PING_PONG_WINDOW_S = 5.0
NEIGHBOR_K = dataset.SLOTS

METRIC_NAMES = [
    "handover_count", "ping_pong_count", "hof_count",
    "rlf_count", "mean_sinr_db", "time_on_vetoed_cells_s",
]


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class Scenario:
    name: str
    duration_s: float
    tick_ms: int
    seed: int
    bounds: mobility.Bounds
    cells: tuple
    ues: tuple
    schedule: network.NetworkSchedule
    radio: network.RadioConfig
    handover: baseline.HandoverConfig
    oracle: dataset.OracleConfig
    policy: engine.DecisionPolicy
    epoch_day: int = 0
    ping_pong_window_s: float = PING_PONG_WINDOW_S

    def validate(self):
        if self.duration_s <= 0:
            raise ConfigError(f"scenario {self.name}: duration_s must be > 0")
        if self.tick_ms != self.handover.tick_ms:
            raise ConfigError(
                f"scenario {self.name}: tick_ms {self.tick_ms} != handover.tick_ms "
                f"{self.handover.tick_ms}"
            )
        ids = [c.cell_id for c in self.cells]
        if not ids:
            raise ConfigError(f"scenario {self.name}: no cells")
        if len(set(ids)) != len(ids):
            raise ConfigError(f"scenario {self.name}: duplicate cell_id")
        ue_ids = [u.ue_id for u in self.ues]
        if len(set(ue_ids)) != len(ue_ids):
            raise ConfigError(f"scenario {self.name}: duplicate ue_id")
        for u in self.ues:
            if u.initial_cell is not None and u.initial_cell not in ids:
                raise ConfigError(f"ue {u.ue_id}: initial_cell {u.initial_cell} is not a cell")
        self.schedule.validate(ids)
        return self

    @property
    def n_ticks(self):
        return int(round(self.duration_s * 1000.0 / self.tick_ms))

    def with_seed(self, seed):
        return replace(self, seed=seed)


@dataclass
class SimReport:
    policy: str
    scenario: str
    seed: int
    handover_count: int = 0
    ping_pong_count: int = 0
    hof_count: int = 0
    rlf_count: int = 0
    mean_sinr_db: float = 0.0
    time_on_vetoed_cells_s: float = 0.0
    events: list = field(default_factory=list)
    decisions: list = field(default_factory=list)
    records: list = field(default_factory=list)

    def metrics(self):
        return {name: getattr(self, name) for name in METRIC_NAMES}


@dataclass
class UeTick:
    """What a policy sees for one UE at one tick."""

    ue_id: int
    t: float
    record: dict
    samples: dict
    serving_cell: int
    neighbor_ids: list
    rlf: bool
    last_ho: float


# ---------------------------------------------------------------------------
# Policies: one UeTick in, optional target cell out
# ---------------------------------------------------------------------------
class A3Policy:
    name = "a3"
    cause = Cause.A3

    def __init__(self, cfg):
        self.cfg = cfg
        self._states = {}

    def decide(self, tick):
        state = self._states.setdefault(tick.ue_id, A3State())
        quantity = "rsrp_dbm" if self.cfg.a3_quantity == "rsrp" else "rsrq_db"
        serving = getattr(tick.samples[tick.serving_cell], quantity)
        neighbors = {cid: getattr(tick.samples[cid], quantity) for cid in tick.neighbor_ids}
        return baseline.a3_update(state, serving, neighbors, self.cfg, tick.t)

    def on_handover(self, ue_id, t):
        state = self._states.setdefault(ue_id, A3State())
        state.timers_ms = {}
        state.last_ho_time = t


class GreedyPolicy:
    """Hand over whenever any neighbour's RSRP exceeds the serving RSRP."""

    name = "greedy"
    cause = Cause.GREEDY

    def decide(self, tick):
        serving = tick.samples[tick.serving_cell].rsrp_dbm
        better = [c for c in tick.neighbor_ids if tick.samples[c].rsrp_dbm > serving]
        if not better:
            return None
        return min(better, key=lambda c: (-tick.samples[c].rsrp_dbm, c))

    def on_handover(self, ue_id, t):
        pass


class OraclePolicy:
    """Follow the oracle label, at most one handover per min_time_between_ho_s."""

    name = "oracle"
    cause = Cause.ORACLE

    def __init__(self, oracle_cfg, min_time_between_ho_s):
        self.oracle_cfg = oracle_cfg
        self.min_time_between_ho_s = min_time_between_ho_s

    def decide(self, tick):
        slot = dataset.oracle_label(tick.record, self.oracle_cfg)
        if slot == 0 or tick.t - tick.last_ho < self.min_time_between_ho_s:
            return None
        return dataset.slot_cell(tick.record, slot)

    def on_handover(self, ue_id, t):
        pass


class DeepMobilityPolicy:
    """The learned engine behind the policy interface; logs every decision."""

    name = "deep"
    cause = Cause.ENGINE

    def __init__(self, model, decision_policy, log_decisions=True):
        if model.scaler is None:
            raise DataError("model has no fitted scaler")
        self.model = model
        self.decision_policy = decision_policy
        self.log_decisions = log_decisions
        self.decision_log = []
        self._buffers = {}

    def decide(self, tick):
        buf = self._buffers.setdefault(tick.ue_id, engine.WindowBuffer(self.model.window_len))
        engine.window_push(buf, tick.record)
        decision = engine.decide(self.model, buf.read(), self.model.scaler,
                                 self.decision_policy, tick.rlf, tick.t, tick.last_ho)
        if self.log_decisions:
            self.decision_log.append(decision.log_row(tick.t, tick.ue_id))
        if decision.slot == 0:
            return None
        return dataset.slot_cell(tick.record, decision.slot)

    def on_handover(self, ue_id, t):
        pass


def make_policy(name, scenario, model_loader=None):
    """Build a policy from its CLI name: a3, greedy, oracle or deep:MODEL."""
    if name == "a3":
        return A3Policy(scenario.handover)
    if name == "greedy":
        return GreedyPolicy()
    if name == "oracle":
        return OraclePolicy(scenario.oracle, scenario.handover.min_time_between_ho_s)
    if name.startswith("deep:"):
        if model_loader is None:
            raise ConfigError("deep policy needs a model loader")
        return DeepMobilityPolicy(model_loader(name.split(":", 1)[1]), scenario.policy)
    raise ConfigError(f"unknown policy '{name}' (expected a3, greedy, oracle or deep:MODEL)")


# ---------------------------------------------------------------------------
# World
# ---------------------------------------------------------------------------
class World:
    """All mutable state of one seeded simulation."""

    def __init__(self, scenario):
        self.scenario = scenario
        self.rng = np.random.default_rng(scenario.seed)
        self.cells = list(scenario.cells)
        self.cells_by_id = {c.cell_id: c for c in self.cells}
        self.profiles = sorted(scenario.ues, key=lambda u: u.ue_id)
        self.tick_s = scenario.tick_ms / 1000.0
        self.net_state = network.initial_network_state(self.cells)
        self.shadow = {u.ue_id: network.ShadowField(scenario.radio) for u in self.profiles}
        history_len = int(math.ceil(scenario.handover.qout_duration_ms / scenario.tick_ms)) + 1
        self.sinr_history = {u.ue_id: deque(maxlen=history_len) for u in self.profiles}
        self.last_ho = {u.ue_id: -math.inf for u in self.profiles}
        self.states = {}
        for u in self.profiles:
            state = mobility.initial_state(u, scenario.bounds, self.rng)
            serving = u.initial_cell
            if serving is None:
                samples = self.measure(u.ue_id, state.position, t=0.0)
                serving = min(samples, key=lambda c: (-samples[c].rsrp_dbm, c))
            self.states[u.ue_id] = replace(state, serving_cell=serving, attach_time=0.0)

    def measure(self, ue_id, position, t):
        sched = self.scenario.schedule
        offsets = {c.cell_id: sched.tx_offset_db(c.cell_id, t) for c in self.cells}
        field_ = self.shadow[ue_id]
        field_.new_tick()
        return network.measure_all(position, self.cells, field_, self.scenario.radio,
                                   self.rng, offsets)

    def attached_counts(self):
        counts = {}
        for st in self.states.values():
            counts[st.serving_cell] = counts.get(st.serving_cell, 0) + 1
        return counts


def _service_impacting(attrs):
    return (attrs.alarm is Severity.SERVICE_IMPACTING
            or attrs.ticket is Severity.SERVICE_IMPACTING)


def run(scenario, policy, collect_records=False):
    """Simulate ``scenario`` under ``policy``.

    Args:
        scenario:         validated Scenario
        policy:           object with decide(UeTick) -> cell_id | None and
                          on_handover(ue_id, t)
        collect_records:  keep every oracle-labelled KPI record on the report

    Returns:
        SimReport
    """

    world = World(scenario)
    ho_cfg = scenario.handover
    report = SimReport(policy=policy.name, scenario=scenario.name, seed=scenario.seed)
    events_prev = {}
    sinr_sum, sinr_n = 0.0, 0

    for k in range(1, scenario.n_ticks + 1):
        t = k * world.tick_s

        for u in world.profiles:
            world.states[u.ue_id] = mobility.step(
                world.states[u.ue_id], u, world.tick_s, scenario.bounds, world.rng)

        world.net_state = network.advance_network(
            world.net_state, scenario.schedule, t, world.cells,
            attached=world.attached_counts(), events=events_prev)
        attrs = world.net_state
        tick_events = {c.cell_id: CellTickEvents() for c in world.cells}

        for u in world.profiles:
            state = world.states[u.ue_id]
            samples = world.measure(u.ue_id, state.position, t)
            serving_id = state.serving_cell
            serving = samples[serving_id]

            history = world.sinr_history[u.ue_id]
            history.append(serving.sinr_db)
            rlf = baseline.rlf_check(history, ho_cfg.qout_db, ho_cfg.qout_duration_ms,
                                     scenario.tick_ms)

            neighbor_ids = network.top_neighbors(world.cells, serving_id, NEIGHBOR_K, samples)
            record = dataset.assemble_record(
                u, state, serving, [(c, samples[c]) for c in neighbor_ids],
                attrs, world.cells_by_id, t, scenario.epoch_day)
            record["label"] = dataset.oracle_label(record, scenario.oracle)
            if collect_records:
                report.records.append(record)

            ev = tick_events[serving_id]
            ev.attached += 1
            ev.cqi_zero += serving.cqi == 0
            sinr_sum += serving.sinr_db
            sinr_n += 1

            tick = UeTick(u.ue_id, t, record, samples, serving_id, neighbor_ids, rlf,
                          world.last_ho[u.ue_id])
            target = policy.decide(tick)
            cause = policy.cause

            if rlf:
                report.rlf_count += 1
                ev.rlf += 1
                history.clear()
                if target is None:
                    others = [c for c in samples if c != serving_id]
                    if others:
                        target = min(others, key=lambda c: (-samples[c].rsrp_dbm, c))
                        cause = Cause.RLF_RECOVERY

            if target is not None and target != serving_id:
                failed = (samples[target].sinr_db < ho_cfg.qout_db
                          or attrs[target].alarm is Severity.SERVICE_IMPACTING)
                outcome = Outcome.FAILURE if failed else Outcome.SUCCESS
                report.events.append(HandoverEvent(t, u.ue_id, serving_id, target, cause, outcome))
                tick_events[target].ho_in += 1
                tick_events[target].ho_in_failed += failed
                world.states[u.ue_id] = replace(state, serving_cell=target, attach_time=t)
                world.last_ho[u.ue_id] = t
                policy.on_handover(u.ue_id, t)
                if cause is Cause.RLF_RECOVERY:
                    history.clear()
                recovered = not failed
            else:
                recovered = False
            if rlf and not recovered:
                ev.dropped += 1

            if _service_impacting(attrs[world.states[u.ue_id].serving_cell]):
                report.time_on_vetoed_cells_s += world.tick_s

        events_prev = tick_events

    report.handover_count = len(report.events)
    report.hof_count = sum(e.outcome is Outcome.FAILURE for e in report.events)
    report.ping_pong_count = ping_pong_count(report.events, scenario.ping_pong_window_s)
    report.mean_sinr_db = sinr_sum / sinr_n if sinr_n else 0.0
    report.time_on_vetoed_cells_s = round(report.time_on_vetoed_cells_s, 6)
    report.decisions = list(getattr(policy, "decision_log", []))

    logger.info("%-8s %s seed=%d  HO %d  ping-pong %d  HOF %d  RLF %d  SINR %.2f dB",
                policy.name, scenario.name, scenario.seed, report.handover_count,
                report.ping_pong_count, report.hof_count, report.rlf_count,
                report.mean_sinr_db)
    return report


def generate_dataset(scenario):
    """KPI records from an A3-driven run, relabelled by the hindsight oracle.

    With ``oracle.horizon_s`` at 0 the labels are the instantaneous oracle choice.
    """
    records = run(scenario, A3Policy(scenario.handover), collect_records=True).records
    return dataset.hindsight_labels(records, scenario.oracle)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------
def _by_ue(events):
    per_ue = {}
    for e in events:
        seq = per_ue.setdefault(e.ue_id, [])
        if seq and e.t < seq[-1].t:
            raise DataError(f"handover events of ue {e.ue_id} are not time-ordered")
        seq.append(e)
    return per_ue


def _ping_pong_pairs(events, window_s):
    pairs = []
    for seq in _by_ue(events).values():
        i = 0
        while i < len(seq) - 1:
            e1, e2 = seq[i], seq[i + 1]
            if (e2.from_cell == e1.to_cell and e2.to_cell == e1.from_cell
                    and e2.t - e1.t <= window_s):
                pairs.append((e1, e2))
                i += 2
            else:
                i += 1
    return pairs


def ping_pong_count(events, window_s=PING_PONG_WINDOW_S):
    """A->B followed by the same UE's next handover B->A within window_s.

    Pairs are taken greedily earliest-first; an event joins at most one pair.
    """
    return len(_ping_pong_pairs(events, window_s))


def handover_breakdown(events, window_s=PING_PONG_WINDOW_S):
    """Per (from_cell, to_cell) handover, failure and ping-pong counts."""
    columns = ["from_cell", "to_cell", "handovers", "failures", "ping_pongs"]
    if not events:
        return pd.DataFrame(columns=columns)
    frame = pd.DataFrame({
        "from_cell": [e.from_cell for e in events],
        "to_cell": [e.to_cell for e in events],
        "failures": [int(e.outcome is Outcome.FAILURE) for e in events],
    })
    pp_keys = pd.DataFrame(
        [(e1.from_cell, e1.to_cell) for e1, _ in _ping_pong_pairs(events, window_s)],
        columns=["from_cell", "to_cell"],
    )
    out = (frame.groupby(["from_cell", "to_cell"])
           .agg(handovers=("failures", "size"), failures=("failures", "sum"))
           .reset_index())
    pp = pp_keys.groupby(["from_cell", "to_cell"]).size().rename("ping_pongs").reset_index()
    out = out.merge(pp, on=["from_cell", "to_cell"], how="left").fillna({"ping_pongs": 0})
    out["ping_pongs"] = out["ping_pongs"].astype(int)
    return out.sort_values(["handovers", "from_cell", "to_cell"],
                           ascending=[False, True, True])[columns].reset_index(drop=True)


def compare(reports, reference=None):
    """Side-by-side metrics with relative deltas against a reference policy.

    Args:
        reports:    dict policy name -> SimReport, all from one scenario + seed
        reference:  policy name the deltas are relative to (default: first)

    Returns:
        pandas DataFrame indexed by metric name.
    """
    if len(reports) < 2:
        raise DataError("compare needs at least two reports")
    keys = {(r.scenario, r.seed) for r in reports.values()}
    if len(keys) != 1:
        raise DataError(f"reports come from different scenarios/seeds: {sorted(keys)}")
    reference = reference or next(iter(reports))
    if reference not in reports:
        raise DataError(f"reference policy '{reference}' not among the reports")

    table = pd.DataFrame({name: r.metrics() for name, r in reports.items()}, index=METRIC_NAMES)
    ref = table[reference]
    for name in reports:
        if name == reference:
            continue
        delta = []
        for metric in METRIC_NAMES:
            base, value = ref[metric], table.loc[metric, name]
            if base == 0:
                delta.append(0.0 if value == 0 else math.copysign(math.inf, value))
            else:
                delta.append((value - base) / abs(base))
        table[f"{name}_vs_{reference}"] = delta
    table.index.name = "metric"
    return table


def format_comparison(table):
    return table.to_string(float_format=lambda v: f"{v:.4f}")
