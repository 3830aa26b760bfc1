import math

import numpy as np
import pytest

import nn
from dataset import Scaler
from errors import DataError, NumericError
from nn import Activation, LstmParams, LstmState, OptimizerKind, RecurrentKind, TrainConfig


def _scalar_lstm(paper_exact=False):
    one, zero = np.ones((1, 1)), np.zeros(1)
    kw = {f"U_{g}": one.copy() for g in nn.GATES}
    kw.update({f"W_{g}": one.copy() for g in nn.GATES})
    kw.update({f"b_{g}": zero.copy() for g in nn.GATES})
    return LstmParams(**kw, paper_exact_cell_update=paper_exact)


def _tiny_model(kind=RecurrentKind.LSTM, paper_exact=False, freeze=False, seed=0,
                seq_dim=3, static_dim=2, hidden=3, head=(3,)):
    model = nn.init_model(seq_dim, static_dim, hidden_dim=hidden, head_layers=head,
                          recurrent_kind=kind, paper_exact_cell_update=paper_exact,
                          freeze_biases=freeze, seed=seed)
    rng = np.random.default_rng(seed + 1000)
    for name, arr in model.named_params():
        if model.is_bias(name) and not freeze:
            arr[...] = rng.uniform(-0.5, 0.5, size=arr.shape)
    return model


# ---------------------------------------------------------------------------
# Activations and cells
# ---------------------------------------------------------------------------
def test_activation_fixed_points():
    assert nn.sigmoid(0.0) == 0.5
    assert nn.tanh(0.0) == 0.0


def test_sigmoid_is_stable_far_out():
    low = float(nn.sigmoid(-1000.0))
    assert 0.0 < low <= 1e-300
    assert float(nn.sigmoid(1000.0)) == 1.0
    assert not np.any(np.isnan(nn.sigmoid(np.array([-1e308, 1e308]))))


def test_lstm_zero_params_give_zero_output():
    p = LstmParams(**{n: np.zeros((2, 3)) if n[0] == "U" else
                      np.zeros((3, 3)) if n[0] == "W" else np.zeros(3)
                      for n in LstmParams.NAMES})
    s = LstmState(c=np.zeros(3), h=np.zeros(3))
    for x in ([0.0, 0.0], [5.0, -3.0], [1e3, 1e3]):
        s, h = nn.lstm_step(p, s, np.array(x))
        np.testing.assert_array_equal(h, np.zeros(3))


def test_lstm_scalar_standard_update():
    s, h = nn.lstm_step(_scalar_lstm(), LstmState(c=np.ones(1), h=np.zeros(1)), np.zeros(1))
    assert s.c[0] == pytest.approx(0.5)
    assert h[0] == pytest.approx(0.231059, abs=1e-6)


def test_lstm_scalar_wrapped_cell_update():
    s, h = nn.lstm_step(_scalar_lstm(True), LstmState(c=np.ones(1), h=np.zeros(1)), np.zeros(1))
    c_expected = 1.0 / (1.0 + math.exp(-0.5))
    assert s.c[0] == pytest.approx(0.622459, abs=1e-6)
    assert h[0] == pytest.approx(0.5 * math.tanh(c_expected), abs=1e-12)


def test_lstm_outputs_are_bounded():
    rng = np.random.default_rng(0)
    for paper_exact in (False, True):
        p = _tiny_model(paper_exact=paper_exact, seed=3).recurrent
        s = LstmState(c=np.zeros(3), h=np.zeros(3))
        for _ in range(50):
            s, h = nn.lstm_step(p, s, rng.normal(0, 5, size=3))
            assert np.all(np.abs(h) <= 1.0)
            if paper_exact:
                assert np.all((s.c > 0.0) & (s.c < 1.0))


def test_rnn_step_examples():
    zero = np.zeros((1, 1))
    assert nn.rnn_step(zero, zero, np.zeros(1), np.zeros(1), np.ones(1))[0] == 0.0
    one = np.ones((1, 1))
    h = nn.rnn_step(one, one, np.zeros(1), np.zeros(1), np.ones(1))
    assert h[0] == pytest.approx(0.761594, abs=1e-6)


def test_lstm_rejects_wrong_input_width():
    with pytest.raises(DataError, match="lstm input"):
        nn.lstm_step(_scalar_lstm(), LstmState(c=np.ones(1), h=np.zeros(1)), np.zeros(2))


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------
def test_all_zero_model_scores_are_final_biases():
    model = _tiny_model()
    for _, arr in model.named_params():
        arr[...] = 0.0
    model.head.layers[-1].bias[...] = [0.1, 0.2, 0.3, 0.4, 0.5]
    scores = nn.forward(model, np.ones((4, 3)), np.ones(2))
    np.testing.assert_allclose(scores, [0.1, 0.2, 0.3, 0.4, 0.5])


def test_single_tick_is_one_step_then_head():
    model = _tiny_model(seed=5)
    x, static = np.array([[0.2, -0.4, 0.9]]), np.array([0.3, 0.7])
    _, h = nn.lstm_step(model.recurrent, LstmState(np.zeros(3), np.zeros(3)), x[0])
    a = np.concatenate([h, static])
    for layer in model.head.layers:
        z = a @ layer.weight + layer.bias
        a = np.tanh(z) if layer.activation is Activation.TANH else z
    np.testing.assert_allclose(nn.forward(model, x, static), a, rtol=0, atol=1e-12)


def _sig(v):
    return 1.0 / (1.0 + math.exp(-v))


def _reference_forward(model, seq, static):
    """Element-by-element LSTM + head, written without any matrix products."""
    p = model.recurrent
    n_h = p.hidden_dim
    h, c = [0.0] * n_h, [0.0] * n_h

    def pre(gate, x, h_prev, j):
        U, W, b = getattr(p, f"U_{gate}"), getattr(p, f"W_{gate}"), getattr(p, f"b_{gate}")
        return (sum(x[k] * U[k, j] for k in range(len(x)))
                + sum(h_prev[k] * W[k, j] for k in range(n_h)) + b[j])

    for x in seq:
        new_h, new_c = [], []
        for j in range(n_h):
            f, i = _sig(pre("f", x, h, j)), _sig(pre("i", x, h, j))
            g, o = math.tanh(pre("g", x, h, j)), _sig(pre("o", x, h, j))
            cj = f * c[j] + i * g
            new_c.append(cj)
            new_h.append(math.tanh(cj) * o)
        h, c = new_h, new_c

    a = list(h) + list(static)
    for layer in model.head.layers:
        out = []
        for j in range(layer.weight.shape[1]):
            z = sum(a[k] * layer.weight[k, j] for k in range(len(a))) + layer.bias[j]
            out.append(math.tanh(z) if layer.activation is Activation.TANH else z)
        a = out
    return np.array(a)


def test_forward_matches_elementwise_reference():
    rng = np.random.default_rng(17)
    for seed in range(10):
        model = _tiny_model(seed=seed)
        seq, static = rng.normal(size=(6, 3)), rng.normal(size=2)
        np.testing.assert_allclose(nn.forward(model, seq, static),
                                   _reference_forward(model, seq, static), rtol=0, atol=1e-12)


def test_batched_forward_matches_single():
    model = _tiny_model(seed=2)
    rng = np.random.default_rng(2)
    seq, static = rng.normal(size=(4, 5, 3)), rng.normal(size=(4, 2))
    batched = nn.forward(model, seq, static)
    for b in range(4):
        np.testing.assert_allclose(batched[b], nn.forward(model, seq[b], static[b]), atol=1e-14)


def test_argmax_is_shift_invariant():
    rng = np.random.default_rng(8)
    scores = rng.normal(size=(100, 5))
    np.testing.assert_array_equal(nn.predict(scores), nn.predict(scores + 3.7))


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------
def test_perfect_scores_have_zero_output_gradient():
    model = _tiny_model(head=())
    for _, arr in model.named_params():
        arr[...] = 0.0
    model.head.layers[-1].bias[...] = [0.0, 0.0, 1.0, 0.0, 0.0]
    loss, grads = nn.loss_and_grad(model, np.ones((2, 4, 3)), np.ones((2, 2)), [2, 2])
    assert loss == 0.0
    np.testing.assert_array_equal(grads["head.0.weight"], 0.0)
    np.testing.assert_array_equal(grads["head.0.bias"], 0.0)


def _max_relative_error(model, seq, static, labels, h=1e-5):
    _, grads = nn.loss_and_grad(model, seq, static, labels)
    worst = 0.0
    for name, arr in model.named_params():
        if model.freeze_biases and model.is_bias(name):
            np.testing.assert_array_equal(grads[name], 0.0)
            continue
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            up, _ = nn.loss_and_grad(model, seq, static, labels)
            arr[idx] = orig - h
            down, _ = nn.loss_and_grad(model, seq, static, labels)
            arr[idx] = orig
            numeric = (up - down) / (2 * h)
            analytic = grads[name][idx]
            denom = max(abs(numeric), abs(analytic), 1e-5)
            worst = max(worst, abs(numeric - analytic) / denom)
    return worst


@pytest.mark.parametrize("kind,paper_exact", [
    (RecurrentKind.LSTM, False),
    (RecurrentKind.LSTM, True),
    (RecurrentKind.RNN, False),
])
@pytest.mark.parametrize("freeze", [False, True])
def test_gradients_match_finite_differences(kind, paper_exact, freeze):
    rng = np.random.default_rng(99)
    for seed in range(100):
        model = _tiny_model(kind, paper_exact, freeze, seed=seed, seq_dim=2, static_dim=1,
                            hidden=2, head=(2,))
        seq = rng.normal(size=(3, 4, 2))
        static = rng.uniform(size=(3, 1))
        labels = rng.integers(0, 5, size=3)
        assert _max_relative_error(model, seq, static, labels) < 1e-4


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------
def _blobs(n=500, seed=0):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=n)
    centre = np.where(labels[:, None] == 1, 1.0, -1.0)
    seq = centre[:, None, :] + rng.normal(0.0, 0.3, size=(n, 3, 2))
    static = np.zeros((n, 1))
    return seq, static, labels


def _toy_model(seed=0):
    return nn.init_model(2, 1, hidden_dim=4, head_layers=(4,), seed=seed, window_len=3)


def test_zero_epochs_changes_nothing():
    model = _toy_model()
    before = {n: a.copy() for n, a in model.named_params()}
    data = _blobs(20)
    model, history = nn.train(model, data, data, TrainConfig(epochs=0))
    assert history == []
    for name, arr in model.named_params():
        np.testing.assert_array_equal(arr, before[name])


def test_separable_blobs_are_learned():
    data = _blobs(500)
    hp = TrainConfig(epochs=30, batch_size=32, learning_rate=0.01, seed=1)
    _, history = nn.train(_toy_model(), data, _blobs(200, seed=1), hp)
    assert len(history) == 30
    assert history[-1]["train_acc"] >= 0.95


def test_plain_sgd_reduces_loss():
    data = _blobs(200)
    hp = TrainConfig(epochs=10, batch_size=20, learning_rate=0.05, optimizer=OptimizerKind.SGD)
    _, history = nn.train(_toy_model(), data, data, hp)
    assert history[-1]["train_loss"] < history[0]["train_loss"]


def test_training_is_deterministic():
    data = _blobs(100)
    hp = TrainConfig(epochs=3, batch_size=16, seed=4)
    m1, h1 = nn.train(_toy_model(), data, data, hp)
    m2, h2 = nn.train(_toy_model(), data, data, hp)
    assert h1 == h2
    assert nn.model_to_dict(m1) == nn.model_to_dict(m2)


def test_non_finite_loss_names_epoch_and_batch():
    model = _toy_model()
    model.head.layers[-1].bias[0] = np.nan
    data = _blobs(40)
    with pytest.raises(NumericError, match="epoch 1, batch 1"):
        nn.train(model, data, data, TrainConfig(epochs=2))


def test_empty_sets_are_rejected():
    data = _blobs(10)
    empty = (data[0][:0], data[1][:0], data[2][:0])
    with pytest.raises(DataError, match="empty training set"):
        nn.train(_toy_model(), empty, data, TrainConfig(epochs=1))


def _scripted_evaluate(monkeypatch, train_seq, train_losses):
    """Make nn.evaluate report ``train_losses`` in turn for the training set."""
    losses = iter(train_losses)

    def fake(model, seq, static, labels):
        if seq is train_seq:
            return next(losses), 0.5
        return 0.3, 0.6

    monkeypatch.setattr(nn, "evaluate", fake)


def test_epoch_that_raises_training_loss_is_undone(monkeypatch):
    data = _blobs(40)
    _scripted_evaluate(monkeypatch, data[0], [1.0, 0.8, 0.9, 0.7])
    hp = TrainConfig(epochs=3, batch_size=8, learning_rate=0.01, seed=2)
    _, history = nn.train(_toy_model(), data, _blobs(10, seed=3), hp)
    assert [h["train_loss"] for h in history] == [0.8, 0.8, 0.7]
    assert [h["learning_rate"] for h in history] == pytest.approx([0.01, 0.01, 0.005])


@pytest.mark.parametrize("optimizer", [OptimizerKind.SGD, OptimizerKind.ADAPTIVE_MOMENTS])
def test_rejected_epochs_restore_parameters(monkeypatch, optimizer):
    data = _blobs(40)
    model = _toy_model()
    before = {n: a.copy() for n, a in model.named_params()}
    _scripted_evaluate(monkeypatch, data[0], [1.0, 2.0, 3.0, 4.0])
    hp = TrainConfig(epochs=3, batch_size=8, learning_rate=0.02, optimizer=optimizer)
    model, history = nn.train(model, data, _blobs(10, seed=3), hp)
    for name, arr in model.named_params():
        np.testing.assert_array_equal(arr, before[name])
    assert [h["learning_rate"] for h in history] == pytest.approx([0.02, 0.01, 0.005])
    assert all(h["train_loss"] == 1.0 for h in history)


def test_rejection_can_be_switched_off(monkeypatch):
    data = _blobs(40)
    _scripted_evaluate(monkeypatch, data[0], [1.0, 2.0, 3.0])
    hp = TrainConfig(epochs=2, batch_size=8, learning_rate=0.01, reject_worse_epochs=False)
    _, history = nn.train(_toy_model(), data, _blobs(10, seed=3), hp)
    assert [h["train_loss"] for h in history] == [2.0, 3.0]
    assert [h["learning_rate"] for h in history] == [0.01, 0.01]


def test_recorded_training_loss_never_increases():
    data = _blobs(300)
    hp = TrainConfig(epochs=25, batch_size=16, learning_rate=0.05, seed=5)
    _, history = nn.train(_toy_model(), data, _blobs(100, seed=6), hp)
    losses = [h["train_loss"] for h in history]
    assert all(b <= a for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]


# ---------------------------------------------------------------------------
# Serialisation
# ---------------------------------------------------------------------------
@pytest.mark.parametrize("kind,paper_exact", [
    (RecurrentKind.LSTM, False), (RecurrentKind.LSTM, True), (RecurrentKind.RNN, False),
])
def test_model_file_round_trip(tmp_path, kind, paper_exact):
    model = _tiny_model(kind, paper_exact, seed=6)
    model.scaler = Scaler(["a", "b"], np.array([0.0, -1.0]), np.array([1.0, 2.5]))
    path = tmp_path / "model.json"
    nn.save_model(model, path)
    back = nn.load_model(path, Scaler.from_dict)
    rng = np.random.default_rng(6)
    seq, static = rng.normal(size=(5, 3)), rng.normal(size=2)
    np.testing.assert_array_equal(nn.forward(back, seq, static), nn.forward(model, seq, static))
    assert back.scaler.names == ["a", "b"]
    assert back.recurrent_kind is kind
    nn.save_model(back, tmp_path / "again.json")
    assert (tmp_path / "again.json").read_bytes() == path.read_bytes()


def test_foreign_json_is_not_a_model(tmp_path):
    path = tmp_path / "other.json"
    path.write_text('{"format": "something-else"}', encoding="utf-8")
    with pytest.raises(DataError, match="not a deep-mobility model"):
        nn.load_model(path)
