import numpy as np
import pytest

import dataset
import engine
import nn
from engine import DecisionPolicy, Reason, WindowBuffer
from errors import ConfigError, DataError

POLICY = DecisionPolicy(min_time_between_ho_s=1.0, score_margin=0.05)


def _fixed_model(scores, window_len=3):
    """A model whose output is ``scores`` whatever the input."""
    model = nn.init_model(len(dataset.SEQ_FEATURES), len(dataset.STATIC_FEATURES),
                          hidden_dim=2, head_layers=(), window_len=window_len)
    for _, arr in model.named_params():
        arr[...] = 0.0
    model.head.layers[-1].bias[...] = scores
    return model


def _decide(scores, window, rlf=False, t=10.0, last_ho=0.0, policy=POLICY):
    model = _fixed_model(scores)
    scaler = dataset.fit_scaler(window)
    return engine.decide(model, window, scaler, policy, rlf, t, last_ho)


# ---------------------------------------------------------------------------
# Policy layer
# ---------------------------------------------------------------------------
def test_alarmed_best_neighbour_is_vetoed(make_record):
    rec = make_record(neighbors=[(2, -85.0, 2), (3, -95.0)])
    d = _decide([0.2, 0.9, 0.1, 0.0, 0.0], [rec])
    assert d.action == "Stay"
    assert d.reason is Reason.ALARM_VETO
    assert d.vetoed_slots == frozenset({1})


def test_rlf_readmits_vetoed_slots(make_record):
    rec = make_record(neighbors=[(2, -85.0, 2), (3, -86.0, 2)])
    d = _decide([0.1, 0.5, 0.8, 0.0, 0.0], [rec], rlf=True)
    assert d.action == "HandOver(2)"
    assert d.reason is Reason.RLF_OVERRIDE


def test_rlf_override_can_be_disabled(make_record):
    rec = make_record(neighbors=[(2, -85.0, 2), (3, -86.0, 2)])
    policy = DecisionPolicy(allow_veto_override_on_rlf=False)
    d = _decide([0.1, 0.5, 0.8, 0.0, 0.0], [rec], rlf=True, policy=policy)
    assert d.slot == 0 and d.reason is Reason.ALARM_VETO


def test_veto_can_be_disabled(make_record):
    rec = make_record(neighbors=[(2, -85.0, 2)])
    d = _decide([0.2, 0.9, 0.0, 0.0, 0.0], [rec], policy=DecisionPolicy(veto_service_impacting=False))
    assert d.slot == 1 and d.reason is Reason.MODEL_CHOICE
    assert d.vetoed_slots == frozenset()


def test_margin_just_below_is_not_met(make_record):
    rec = make_record(neighbors=[(2, -85.0)])
    d = _decide([0.5, 0.54, 0.0, 0.0, 0.0], [rec])
    assert d.slot == 0 and d.reason is Reason.MARGIN_NOT_MET


def test_margin_met_hands_over(make_record):
    rec = make_record(neighbors=[(2, -85.0)])
    d = _decide([0.5, 0.6, 0.0, 0.0, 0.0], [rec])
    assert d.action == "HandOver(1)" and d.reason is Reason.MODEL_CHOICE


def test_rate_limit(make_record):
    rec = make_record(neighbors=[(2, -85.0)])
    scores = [0.0, 1.0, 0.0, 0.0, 0.0]
    assert _decide(scores, [rec], t=10.5, last_ho=10.0).reason is Reason.RATE_LIMITED
    assert _decide(scores, [rec], t=11.0, last_ho=10.0).slot == 1


def test_padding_slots_are_never_chosen(make_record):
    rec = make_record()
    d = _decide([0.0, 0.3, 0.9, 0.9, 0.9], [rec])
    assert d.slot == 0 and d.reason is Reason.MODEL_CHOICE


def test_stay_preferred_by_model(make_record):
    rec = make_record(neighbors=[(2, -85.0)])
    d = _decide([0.9, 0.1, 0.0, 0.0, 0.0], [rec])
    assert d.slot == 0 and d.reason is Reason.MODEL_CHOICE


def test_veto_soundness_on_random_inputs(make_record):
    rng = np.random.default_rng(21)
    for _ in range(200):
        n = int(rng.integers(1, 5))
        nbrs = [(c, float(rng.uniform(-120, -60)), int(rng.integers(0, 3)))
                for c in range(2, 2 + n)]
        rec = make_record(serving_rsrp=float(rng.uniform(-120, -60)), neighbors=nbrs)
        d = _decide(rng.normal(size=5), [rec])
        if d.slot:
            assert rec[f"n{d.slot}_alarm_code"] != 2
            assert d.slot not in d.vetoed_slots


def test_decision_is_deterministic(make_record):
    window = [make_record(t=0.12 * k, neighbors=[(2, -90.0 + k)]) for k in range(3)]
    assert _decide([0.1, 0.7, 0, 0, 0], window) == _decide([0.1, 0.7, 0, 0, 0], window)


def test_missing_scaler_is_data_error(make_record):
    with pytest.raises(DataError, match="scaler"):
        engine.decide(_fixed_model([0] * 5), [make_record()], None, POLICY, False, 0.0, 0.0)


def test_log_row_layout(make_record):
    rec = make_record(neighbors=[(2, -85.0, 2), (3, -95.0, 2)])
    row = _decide([0.2, 0.9, 0.1, 0.0, 0.0], [rec]).log_row(1.5, 7)
    assert row["action"] == "Stay"
    assert row["reason"] == "AlarmVeto"
    assert row["vetoed_mask"] == 0b11
    assert row["score_1"] == pytest.approx(0.9)


def test_negative_margin_rejected():
    with pytest.raises(ConfigError, match="score_margin"):
        DecisionPolicy(score_margin=-0.1)


# ---------------------------------------------------------------------------
# Window buffer
# ---------------------------------------------------------------------------
def test_short_window_is_front_padded():
    buf = WindowBuffer(3)
    engine.window_push(buf, "a")
    assert buf.read() == ["a", "a", "a"]
    engine.window_push(buf, "b")
    assert buf.read() == ["a", "a", "b"]


def test_full_window_evicts_oldest():
    buf = WindowBuffer(3)
    for item in "abcde":
        buf.push(item)
    assert len(buf) == 3
    assert buf.read() == ["c", "d", "e"]


def test_window_capacity_must_be_positive():
    with pytest.raises(ConfigError):
        WindowBuffer(0)


def test_pad_window():
    assert engine.pad_window(["x", "y"], 4) == ["x", "x", "x", "y"]
    assert engine.pad_window(list("abcdef"), 2) == ["e", "f"]
    with pytest.raises(DataError):
        engine.pad_window([], 3)
