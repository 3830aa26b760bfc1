import math
from dataclasses import replace

import numpy as np
import pytest

import config
import dataset
import nn
import sim
import trainer
from baseline import Cause, HandoverConfig, HandoverEvent, Outcome
from dataset import OracleConfig
from engine import DecisionPolicy
from errors import ConfigError, DataError
from mobility import Bounds, DeviceType, Pattern, UeProfile
from network import NetworkSchedule, RadioConfig


def _event(t, a, b, ue=1, outcome=Outcome.SUCCESS):
    return HandoverEvent(t, ue, a, b, Cause.A3, outcome)


def _fixed_deep_policy(scenario, scores, min_records=50):
    """An engine policy whose model always emits ``scores``."""
    model = nn.init_model(len(dataset.SEQ_FEATURES), len(dataset.STATIC_FEATURES),
                          hidden_dim=2, head_layers=(), window_len=3)
    for _, arr in model.named_params():
        arr[...] = 0.0
    model.head.layers[-1].bias[...] = scores
    short = replace(scenario, duration_s=min_records * scenario.tick_ms / 1000.0)
    model.scaler = dataset.fit_scaler(sim.generate_dataset(short))
    return sim.DeepMobilityPolicy(model, scenario.policy)


@pytest.fixture
def one_cell(make_cell):
    profile = UeProfile(ue_id=1, device_type=DeviceType.IOT_STATIONARY, qci=9,
                        speed_mps=0.0, pattern=Pattern.STATIONARY, start=(100.0, 0.0))
    return sim.Scenario(
        name="one-cell", duration_s=30.0, tick_ms=120, seed=3,
        bounds=Bounds(-500.0, -500.0, 500.0, 500.0),
        cells=(make_cell(1),), ues=(profile,), schedule=NetworkSchedule(),
        radio=RadioConfig(), handover=HandoverConfig(), oracle=OracleConfig(),
        policy=DecisionPolicy(),
    ).validate()


@pytest.fixture(scope="module")
def corridor():
    scenario, _, _ = config.load_scenario("corridor")
    return scenario


@pytest.fixture(scope="module")
def alarm_veto():
    scenario, _, _ = config.load_scenario("alarm-veto")
    return scenario


# ---------------------------------------------------------------------------
# Closed loop
# ---------------------------------------------------------------------------
def test_single_cell_never_hands_over(one_cell):
    policies = [sim.A3Policy(one_cell.handover), sim.GreedyPolicy(),
                sim.OraclePolicy(one_cell.oracle, 1.0),
                _fixed_deep_policy(one_cell, [0.0, 1.0, 1.0, 1.0, 1.0])]
    for policy in policies:
        report = sim.run(one_cell, policy)
        assert report.handover_count == 0
        assert report.rlf_count == 0


def test_corridor_a3_hands_over_once_to_cell_2(corridor):
    report = sim.run(corridor, sim.A3Policy(corridor.handover))
    assert report.handover_count == 1
    event = report.events[0]
    assert (event.from_cell, event.to_cell) == (1, 2)
    assert event.cause is Cause.A3
    assert event.outcome is Outcome.SUCCESS


def test_same_seed_same_report(corridor):
    a = sim.run(corridor, sim.A3Policy(corridor.handover))
    b = sim.run(corridor, sim.A3Policy(corridor.handover))
    assert a == b


def test_every_ue_attached_once_per_tick(corridor):
    report = sim.run(corridor, sim.GreedyPolicy(), collect_records=True)
    keys = [(r["t"], r["ue_id"]) for r in report.records]
    assert len(keys) == corridor.n_ticks * len(corridor.ues)
    assert len(set(keys)) == len(keys)
    assert all(r["s_cell_id"] in (1, 2) for r in report.records)


def test_event_log_consistency(alarm_veto):
    for seed in range(3):
        report = sim.run(alarm_veto.with_seed(seed), sim.A3Policy(alarm_veto.handover))
        assert report.handover_count == len(report.events)
        assert report.hof_count == sum(e.outcome is Outcome.FAILURE for e in report.events)
        assert 0 <= report.ping_pong_count <= report.handover_count


def test_greedy_hands_over_at_least_as_often_as_a3(corridor):
    for seed in range(3):
        scenario = replace(corridor.with_seed(seed),
                           radio=replace(corridor.radio, shadowing_sigma_db=3.0))
        greedy = sim.run(scenario, sim.GreedyPolicy())
        a3 = sim.run(scenario, sim.A3Policy(scenario.handover))
        assert greedy.handover_count >= a3.handover_count


def test_alarm_veto_keeps_ue_home(alarm_veto):
    deep = _fixed_deep_policy(alarm_veto, [0.0, 1.0, 0.0, 0.0, 0.0])
    for seed in range(20):
        scenario = alarm_veto.with_seed(seed)
        a3 = sim.run(scenario, sim.A3Policy(scenario.handover))
        assert a3.events and a3.events[0].to_cell == 2
        assert a3.time_on_vetoed_cells_s > 0

        engine_report = sim.run(scenario, sim.DeepMobilityPolicy(deep.model, scenario.policy))
        assert engine_report.handover_count == 0
        assert engine_report.time_on_vetoed_cells_s == 0.0
        assert {row["reason"] for row in engine_report.decisions} == {"AlarmVeto"}


def test_alarm_veto_holds_with_a_trained_model(alarm_veto):
    settings = config.build_settings(config.load_defaults())
    records = sim.generate_dataset(alarm_veto)
    assert any(r["label"] != 0 for r in records)
    model, _, _, _ = trainer.train_on_records(
        records, replace(settings.model, window_len=5),
        replace(settings.training, epochs=5), settings.val_fraction)

    for seed in range(20):
        report = sim.run(alarm_veto.with_seed(seed),
                         sim.DeepMobilityPolicy(model, alarm_veto.policy))
        assert report.handover_count == 0
        assert report.time_on_vetoed_cells_s == 0.0


def test_generate_dataset_is_labelled(corridor):
    short = replace(corridor, duration_s=6.0)
    records = sim.generate_dataset(short)
    assert len(records) == short.n_ticks
    assert all(r["label"] in range(5) for r in records)
    assert records == sim.generate_dataset(short)


# ---------------------------------------------------------------------------
# Policies and scenario plumbing
# ---------------------------------------------------------------------------
def test_make_policy_names(corridor):
    assert isinstance(sim.make_policy("a3", corridor), sim.A3Policy)
    assert isinstance(sim.make_policy("greedy", corridor), sim.GreedyPolicy)
    assert isinstance(sim.make_policy("oracle", corridor), sim.OraclePolicy)
    with pytest.raises(ConfigError, match="unknown policy"):
        sim.make_policy("random", corridor)
    with pytest.raises(ConfigError):
        sim.make_policy("deep:model.json", corridor)


def test_deep_policy_requires_scaler():
    model = nn.init_model(len(dataset.SEQ_FEATURES), len(dataset.STATIC_FEATURES))
    with pytest.raises(DataError, match="scaler"):
        sim.DeepMobilityPolicy(model, DecisionPolicy())


def test_tick_mismatch_rejected(one_cell):
    with pytest.raises(ConfigError, match="tick_ms"):
        replace(one_cell, tick_ms=100).validate()


def test_unknown_initial_cell_rejected(one_cell):
    bad = replace(one_cell.ues[0], initial_cell=9)
    with pytest.raises(ConfigError, match="initial_cell"):
        replace(one_cell, ues=(bad,)).validate()


def test_n_ticks(one_cell):
    assert one_cell.n_ticks == 250


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------
def test_ping_pong_single_return():
    assert sim.ping_pong_count([_event(10.0, 1, 2), _event(12.0, 2, 1)], 5.0) == 1


def test_ping_pong_needs_immediate_return():
    events = [_event(10.0, 1, 2), _event(11.0, 2, 3), _event(12.0, 3, 1)]
    assert sim.ping_pong_count(events, 5.0) == 0


def test_ping_pong_greedy_pairing():
    events = [_event(1.0, 1, 2), _event(2.0, 2, 1), _event(3.0, 1, 2), _event(4.0, 2, 1)]
    assert sim.ping_pong_count(events, 5.0) == 2


def test_ping_pong_window_is_inclusive():
    assert sim.ping_pong_count([_event(0.0, 1, 2), _event(5.0, 2, 1)], 5.0) == 1
    assert sim.ping_pong_count([_event(0.0, 1, 2), _event(5.5, 2, 1)], 5.0) == 0


def test_ping_pong_is_per_ue():
    events = [_event(1.0, 1, 2, ue=1), _event(2.0, 2, 1, ue=2)]
    assert sim.ping_pong_count(events) == 0


def test_unordered_events_rejected():
    with pytest.raises(DataError, match="time-ordered"):
        sim.ping_pong_count([_event(3.0, 1, 2), _event(1.0, 2, 1)])


def test_handover_breakdown():
    events = [_event(1.0, 1, 2), _event(2.0, 2, 1, outcome=Outcome.FAILURE),
              _event(20.0, 1, 2)]
    table = sim.handover_breakdown(events)
    assert list(table.columns) == ["from_cell", "to_cell", "handovers", "failures", "ping_pongs"]
    rows = {(r.from_cell, r.to_cell): (r.handovers, r.failures, r.ping_pongs)
            for r in table.itertuples()}
    assert rows == {(1, 2): (2, 0, 1), (2, 1): (1, 1, 0)}
    assert sim.handover_breakdown([]).empty


def _report(policy, **metrics):
    return sim.SimReport(policy=policy, scenario="s", seed=1, **metrics)


def test_compare_identical_reports_has_zero_deltas():
    a = _report("a3", handover_count=4, ping_pong_count=1, mean_sinr_db=7.5)
    b = _report("copy", handover_count=4, ping_pong_count=1, mean_sinr_db=7.5)
    table = sim.compare({"a3": a, "copy": b})
    assert (table["copy_vs_a3"] == 0.0).all()
    assert list(table.index) == sim.METRIC_NAMES


def test_compare_relative_deltas():
    table = sim.compare({"greedy": _report("greedy", handover_count=10, ping_pong_count=4),
                         "deep": _report("deep", handover_count=5, ping_pong_count=0)},
                        reference="greedy")
    assert table.loc["handover_count", "deep_vs_greedy"] == pytest.approx(-0.5)
    assert table.loc["ping_pong_count", "deep_vs_greedy"] == pytest.approx(-1.0)
    assert table.loc["hof_count", "deep_vs_greedy"] == 0.0


def test_compare_zero_reference_gives_infinite_delta():
    table = sim.compare({"a": _report("a"), "b": _report("b", rlf_count=2)})
    assert table.loc["rlf_count", "b_vs_a"] == math.inf


def test_compare_preconditions():
    with pytest.raises(DataError, match="at least two"):
        sim.compare({"a3": _report("a3")})
    other = sim.SimReport(policy="b", scenario="s", seed=2)
    with pytest.raises(DataError, match="different"):
        sim.compare({"a": _report("a"), "b": other})
    with pytest.raises(DataError, match="reference"):
        sim.compare({"a": _report("a"), "b": _report("b")}, reference="c")


def test_format_comparison_is_text():
    text = sim.format_comparison(sim.compare({"a": _report("a"), "b": _report("b")}))
    assert "handover_count" in text and "b_vs_a" in text


# ---------------------------------------------------------------------------
# Scenario regression (slow)
# ---------------------------------------------------------------------------
@pytest.mark.slow
def test_son_conflict_engine_reduces_ping_pong():
    scenario, settings, _ = config.load_scenario("son-conflict")
    assert scenario.policy.min_time_between_ho_s == 1.0
    records = sim.generate_dataset(scenario)
    model, _, _, val_w = trainer.train_on_records(
        records, settings.model, replace(settings.training, epochs=10), settings.val_fraction)
    assert val_w

    totals = {"deep": 0, "greedy": 0, "a3": 0}
    for seed in range(10):
        world = scenario.with_seed(seed)
        totals["deep"] += sim.run(world, sim.DeepMobilityPolicy(model, world.policy,
                                                                log_decisions=False)).ping_pong_count
        totals["greedy"] += sim.run(world, sim.GreedyPolicy()).ping_pong_count
        totals["a3"] += sim.run(world, sim.A3Policy(world.handover)).ping_pong_count
    assert totals["greedy"] > 0
    assert totals["deep"] <= 0.5 * totals["greedy"]
    assert totals["deep"] <= totals["a3"]


@pytest.mark.slow
def test_dense_urban_training_reaches_high_accuracy():
    scenario, settings, _ = config.load_scenario("dense-urban")
    records = sim.generate_dataset(scenario)
    labels = [r["label"] for r in records]
    majority = max(labels.count(k) for k in set(labels)) / len(labels)
    assert majority <= 0.9

    _, history, train_w, val_w = trainer.train_on_records(
        records, settings.model, settings.training, settings.val_fraction)
    assert len(train_w) + len(val_w) >= 20000

    assert len(history) <= 50
    assert history[-1]["train_acc"] >= 0.95
    assert history[-1]["val_acc"] >= 0.90
    # at least half of the majority-class error rate removed
    assert 1.0 - history[-1]["val_acc"] <= 0.5 * (1.0 - majority)
    losses = np.array([h["train_loss"] for h in history])
    smoothed = np.convolve(losses, np.ones(5) / 5, mode="valid")
    assert np.all(np.diff(smoothed) <= 1e-9)
