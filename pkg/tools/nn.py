"""From-scratch recurrent network for handover decisions.

An LSTM (or plain RNN) runs over the per-tick RF feature sequence; its
final hidden state is concatenated with the static context features and
fed through a small dense head whose last layer is linear.  Training
uses mean squared error against one-hot targets, backpropagation through
time, and SGD or adaptive-moment updates.

Row-vector convention throughout: pre-activation = x @ U + h @ W + b.
Every function accepts a leading batch axis.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

import tables
from errors import DataError, NumericError

logger = logging.getLogger(__name__)

MODEL_FORMAT = "deep-mobility-model"
MODEL_VERSION = 1
OUTPUT_DIM = 5
SIGMOID_CLIP = 700.0
EVAL_CHUNK = 4096

GATES = ("f", "i", "g", "o")


class Activation(Enum):
    TANH = "Tanh"
    RELU = "Relu"
    LINEAR = "Linear"


class RecurrentKind(Enum):
    LSTM = "LSTM"
    RNN = "RNN"


class OptimizerKind(Enum):
    SGD = "SGD"
    ADAPTIVE_MOMENTS = "AdaptiveMoments"


# ---------------------------------------------------------------------------
# Parameter structures
# ---------------------------------------------------------------------------
@dataclass
class LstmParams:
    U_f: np.ndarray
    U_i: np.ndarray
    U_g: np.ndarray
    U_o: np.ndarray
    W_f: np.ndarray
    W_i: np.ndarray
    W_g: np.ndarray
    W_o: np.ndarray
    b_f: np.ndarray
    b_i: np.ndarray
    b_g: np.ndarray
    b_o: np.ndarray
    paper_exact_cell_update: bool = False

    NAMES = tuple(f"{m}_{g}" for m in ("U", "W", "b") for g in GATES)

    @property
    def input_dim(self):
        return self.U_f.shape[0]

    @property
    def hidden_dim(self):
        return self.U_f.shape[1]


@dataclass
class LstmState:
    c: np.ndarray
    h: np.ndarray


@dataclass
class RnnParams:
    U: np.ndarray
    W: np.ndarray
    b: np.ndarray

    NAMES = ("U", "W", "b")

    @property
    def input_dim(self):
        return self.U.shape[0]

    @property
    def hidden_dim(self):
        return self.U.shape[1]


@dataclass
class DenseLayer:
    weight: np.ndarray
    bias: np.ndarray
    activation: Activation


@dataclass
class MlpParams:
    layers: list

    def __post_init__(self):
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.weight.shape[1] != nxt.weight.shape[0]:
                raise DataError("dense layer shapes do not chain")
        if self.layers and self.layers[-1].activation is not Activation.LINEAR:
            raise DataError("final head layer must be Linear")


@dataclass
class DeepMobilityModel:
    recurrent_kind: RecurrentKind
    recurrent: object
    head: MlpParams
    static_dim: int
    freeze_biases: bool = False
    window_len: int = 10
    scaler: object = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = self.recurrent.hidden_dim + self.static_dim
        if self.head.layers[0].weight.shape[0] != expected:
            raise DataError(
                f"head input dim {self.head.layers[0].weight.shape[0]} != "
                f"hidden {self.recurrent.hidden_dim} + static {self.static_dim}"
            )
        if self.head.layers[-1].weight.shape[1] != OUTPUT_DIM:
            raise DataError(f"head output dim must be {OUTPUT_DIM}")

    @property
    def seq_dim(self):
        return self.recurrent.input_dim

    def named_params(self):
        """(name, array) pairs in a fixed order; arrays are the live parameters."""
        prefix = "lstm" if self.recurrent_kind is RecurrentKind.LSTM else "rnn"
        out = [(f"{prefix}.{n}", getattr(self.recurrent, n)) for n in self.recurrent.NAMES]
        for i, layer in enumerate(self.head.layers):
            out.append((f"head.{i}.weight", layer.weight))
            out.append((f"head.{i}.bias", layer.bias))
        return out

    def is_bias(self, name):
        return name.endswith(".bias") or name.split(".")[-1].startswith("b")


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------
def sigmoid(x):
    """Logistic function; inputs are clipped to +-700 so exp never overflows."""
    x = np.clip(np.asarray(x, dtype=float), -SIGMOID_CLIP, SIGMOID_CLIP)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def tanh(x):
    return np.tanh(np.asarray(x, dtype=float))


def _activate(z, activation):
    if activation is Activation.TANH:
        return np.tanh(z)
    if activation is Activation.RELU:
        return np.maximum(z, 0.0)
    return z


def _activation_grad(z, a, activation):
    if activation is Activation.TANH:
        return 1.0 - a * a
    if activation is Activation.RELU:
        return (z > 0).astype(float)
    return np.ones_like(z)


# ---------------------------------------------------------------------------
# Cells
# ---------------------------------------------------------------------------
def _check_dim(x, expected, what):
    if np.shape(x)[-1] != expected:
        raise DataError(f"{what}: expected last dimension {expected}, got {np.shape(x)[-1]}")


def _lstm_gates(p, h_prev, x):
    pre = {g: x @ getattr(p, f"U_{g}") + h_prev @ getattr(p, f"W_{g}") + getattr(p, f"b_{g}")
           for g in GATES}
    return sigmoid(pre["f"]), sigmoid(pre["i"]), np.tanh(pre["g"]), sigmoid(pre["o"])


def lstm_step(p, s, x):
    """One LSTM step.

    f, i, o are sigmoid gates, g the tanh candidate.  The cell update is
    c = f*c_prev + i*g, or sigmoid of that when p.paper_exact_cell_update
    is set.  h = tanh(c) * o.

    Returns:
        (LstmState, h)
    """
    x = np.asarray(x, dtype=float)
    _check_dim(x, p.input_dim, "lstm input")
    _check_dim(s.h, p.hidden_dim, "lstm hidden state")
    _check_dim(s.c, p.hidden_dim, "lstm cell state")
    f, i, g, o = _lstm_gates(p, s.h, x)
    c = f * s.c + i * g
    if p.paper_exact_cell_update:
        c = sigmoid(c)
    h = np.tanh(c) * o
    return LstmState(c=c, h=h), h


def rnn_step(U, W, b, h_prev, x):
    """h = tanh(x U + h_prev W + b)."""
    x = np.asarray(x, dtype=float)
    _check_dim(x, U.shape[0], "rnn input")
    _check_dim(h_prev, W.shape[0], "rnn hidden state")
    return np.tanh(x @ U + h_prev @ W + b)


# ---------------------------------------------------------------------------
# Model construction
# ---------------------------------------------------------------------------
def _glorot(rng, fan_in, fan_out):
    r = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-r, r, size=(fan_in, fan_out))


def init_model(seq_dim, static_dim, hidden_dim=16, head_layers=(12, 8),
               recurrent_kind=RecurrentKind.LSTM, paper_exact_cell_update=False,
               freeze_biases=False, activation=Activation.TANH, window_len=10, seed=0):
    """Glorot-uniform weights, zero biases, all drawn from one seeded stream."""
    rng = np.random.default_rng(seed)
    zeros = lambda n: np.zeros(n)  # noqa: E731

    if recurrent_kind is RecurrentKind.LSTM:
        kw = {}
        for g in GATES:
            kw[f"U_{g}"] = _glorot(rng, seq_dim, hidden_dim)
            kw[f"W_{g}"] = _glorot(rng, hidden_dim, hidden_dim)
            kw[f"b_{g}"] = zeros(hidden_dim)
        recurrent = LstmParams(**kw, paper_exact_cell_update=paper_exact_cell_update)
    else:
        recurrent = RnnParams(U=_glorot(rng, seq_dim, hidden_dim),
                              W=_glorot(rng, hidden_dim, hidden_dim),
                              b=zeros(hidden_dim))

    sizes = [hidden_dim + static_dim] + list(head_layers) + [OUTPUT_DIM]
    layers = []
    for k, (n_in, n_out) in enumerate(zip(sizes, sizes[1:])):
        act = Activation.LINEAR if k == len(sizes) - 2 else activation
        layers.append(DenseLayer(_glorot(rng, n_in, n_out), zeros(n_out), act))

    return DeepMobilityModel(
        recurrent_kind=recurrent_kind,
        recurrent=recurrent,
        head=MlpParams(layers),
        static_dim=static_dim,
        freeze_biases=freeze_biases,
        window_len=window_len,
    )


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------
def _as_batch(seq, static):
    seq = np.asarray(seq, dtype=float)
    static = np.asarray(static, dtype=float)
    single = seq.ndim == 2
    if single:
        seq, static = seq[None, ...], static[None, ...]
    if seq.ndim != 3 or static.ndim != 2 or seq.shape[0] != static.shape[0]:
        raise DataError("expected seq (B, T, D) and static (B, S)")
    if seq.shape[1] < 1:
        raise DataError("sequence must contain at least one tick")
    return seq, static, single


def _run_forward(model, seq, static):
    p = model.recurrent
    _check_dim(seq, p.input_dim, "sequence features")
    _check_dim(static, model.static_dim, "static features")
    batch = seq.shape[0]
    h = np.zeros((batch, p.hidden_dim))
    c = np.zeros((batch, p.hidden_dim))
    steps = []

    for t in range(seq.shape[1]):
        x = seq[:, t, :]
        if model.recurrent_kind is RecurrentKind.LSTM:
            f, i, g, o = _lstm_gates(p, h, x)
            c_new = f * c + i * g
            if p.paper_exact_cell_update:
                c_new = sigmoid(c_new)
            tc = np.tanh(c_new)
            h_new = tc * o
            steps.append((x, h, c, f, i, g, o, c_new, tc))
            h, c = h_new, c_new
        else:
            h_new = np.tanh(x @ p.U + h @ p.W + p.b)
            steps.append((x, h, h_new))
            h = h_new

    a = np.hstack([h, static])
    head_cache = []
    for layer in model.head.layers:
        z = a @ layer.weight + layer.bias
        out = _activate(z, layer.activation)
        head_cache.append((a, z, out))
        a = out
    return a, (steps, head_cache)


def forward(model, seq, static):
    """Raw (linear) scores for stay + 4 neighbour slots.

    Args:
        model:   DeepMobilityModel
        seq:     (T, D_seq) or (B, T, D_seq) normalised sequence features
        static:  (D_static,) or (B, D_static)

    Returns:
        (5,) or (B, 5) scores.
    """
    seq, static, single = _as_batch(seq, static)
    scores, _ = _run_forward(model, seq, static)
    return scores[0] if single else scores


def _onehot(labels, n=OUTPUT_DIM):
    out = np.zeros((len(labels), n))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def loss_and_grad(model, seq, static, labels):
    """Mean over the batch of 0.5 * sum((scores - onehot)^2), and its gradient.

    Returns:
        (loss, grads) where grads maps every name in model.named_params()
        to an array of the same shape.
    """
    labels = np.asarray(labels, dtype=int)
    if labels.size == 0:
        raise DataError("empty batch")
    seq, static, _ = _as_batch(seq, static)
    if seq.shape[0] != labels.shape[0]:
        raise DataError("labels do not match batch size")

    scores, (steps, head_cache) = _run_forward(model, seq, static)
    batch = seq.shape[0]
    diff = scores - _onehot(labels)
    loss = 0.5 * float(np.sum(diff * diff)) / batch

    grads = {}
    d_a = diff / batch
    for k in range(len(model.head.layers) - 1, -1, -1):
        layer = model.head.layers[k]
        a_in, z, out = head_cache[k]
        dz = d_a * _activation_grad(z, out, layer.activation)
        grads[f"head.{k}.weight"] = a_in.T @ dz
        grads[f"head.{k}.bias"] = dz.sum(axis=0)
        d_a = dz @ layer.weight.T

    p = model.recurrent
    dh = d_a[:, :p.hidden_dim]
    if model.recurrent_kind is RecurrentKind.LSTM:
        _lstm_backward(p, steps, dh, grads)
    else:
        _rnn_backward(p, steps, dh, grads)

    if model.freeze_biases:
        for name, arr in model.named_params():
            if model.is_bias(name):
                grads[name] = np.zeros_like(arr)
    return loss, grads


def _lstm_backward(p, steps, dh, grads):
    g_acc = {n: np.zeros_like(getattr(p, n)) for n in LstmParams.NAMES}
    dc_next = np.zeros_like(dh)
    for x, h_prev, c_prev, f, i, g, o, c, tc in reversed(steps):
        do = dh * tc
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dz = dc * c * (1.0 - c) if p.paper_exact_cell_update else dc
        dpre = {
            "f": dz * c_prev * f * (1.0 - f),
            "i": dz * g * i * (1.0 - i),
            "g": dz * i * (1.0 - g * g),
            "o": do * o * (1.0 - o),
        }
        dc_next = dz * f
        dh = np.zeros_like(dh)
        for gate, d in dpre.items():
            g_acc[f"U_{gate}"] += x.T @ d
            g_acc[f"W_{gate}"] += h_prev.T @ d
            g_acc[f"b_{gate}"] += d.sum(axis=0)
            dh += d @ getattr(p, f"W_{gate}").T
    for n, arr in g_acc.items():
        grads[f"lstm.{n}"] = arr


def _rnn_backward(p, steps, dh, grads):
    dU, dW, db = np.zeros_like(p.U), np.zeros_like(p.W), np.zeros_like(p.b)
    for x, h_prev, h in reversed(steps):
        da = dh * (1.0 - h * h)
        dU += x.T @ da
        dW += h_prev.T @ da
        db += da.sum(axis=0)
        dh = da @ p.W.T
    grads["rnn.U"], grads["rnn.W"], grads["rnn.b"] = dU, dW, db


# ---------------------------------------------------------------------------
# Optimisers
# ---------------------------------------------------------------------------
class Sgd:
    def __init__(self, learning_rate):
        self.learning_rate = learning_rate

    def state(self):
        return None

    def restore(self, state):
        pass

    def step(self, model, grads):
        for name, arr in model.named_params():
            arr -= self.learning_rate * grads[name]


class AdaptiveMoments:
    """Per-parameter first/second moment estimates with bias correction."""

    def __init__(self, learning_rate, beta1=0.9, beta2=0.999, eps=1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, model, grads):
        self.t += 1
        lr_t = self.learning_rate * math.sqrt(1 - self.beta2 ** self.t) / (1 - self.beta1 ** self.t)
        for name, arr in model.named_params():
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(arr))
            v = self.v.setdefault(name, np.zeros_like(arr))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            arr -= lr_t * m / (np.sqrt(v) + self.eps)

    def state(self):
        return (self.t, {k: v.copy() for k, v in self.m.items()},
                {k: v.copy() for k, v in self.v.items()})

    def restore(self, state):
        self.t, self.m, self.v = state


def make_optimizer(kind, learning_rate):
    if kind is OptimizerKind.SGD:
        return Sgd(learning_rate)
    return AdaptiveMoments(learning_rate)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 0.005
    seed: int = 0
    optimizer: OptimizerKind = OptimizerKind.ADAPTIVE_MOMENTS
    reject_worse_epochs: bool = True
    lr_backoff: float = 0.5


def predict(scores):
    """Argmax per row; ties resolve to the lowest index."""
    return np.argmax(scores, axis=-1)


def evaluate(model, seq, static, labels):
    """(mean loss, accuracy) over a whole data set, in fixed-size chunks."""
    labels = np.asarray(labels, dtype=int)
    if labels.size == 0:
        raise DataError("empty evaluation set")
    total_loss, correct = 0.0, 0
    for start in range(0, len(labels), EVAL_CHUNK):
        sl = slice(start, start + EVAL_CHUNK)
        scores = forward(model, seq[sl], static[sl])
        diff = scores - _onehot(labels[sl])
        total_loss += 0.5 * float(np.sum(diff * diff))
        correct += int(np.sum(predict(scores) == labels[sl]))
    return total_loss / len(labels), correct / len(labels)


def train(model, train_set, val_set, hp):
    """Mini-batch training.

    After every epoch the whole training set is re-scored.  With
    ``hp.reject_worse_epochs`` an epoch that raises that loss is undone
    (parameters and optimiser state) and the learning rate is multiplied
    by ``hp.lr_backoff``, so the recorded training loss never increases.

    Args:
        model:      DeepMobilityModel, updated in place
        train_set:  (seq, static, labels) arrays
        val_set:    (seq, static, labels) arrays
        hp:         TrainConfig

    Returns:
        (model, history) where history has one dict per epoch with
        train_loss, train_acc, val_loss, val_acc and learning_rate.
    """
    for name, data in (("training", train_set), ("validation", val_set)):
        if data is None or len(data[2]) == 0:
            raise DataError(f"empty {name} set")

    seq, static, labels = train_set
    rng = np.random.default_rng(hp.seed)
    optimizer = make_optimizer(hp.optimizer, hp.learning_rate)
    history = []
    n = len(labels)
    if hp.epochs > 0:
        last = evaluate(model, *train_set) + evaluate(model, *val_set)

    for epoch in range(1, hp.epochs + 1):
        lr = optimizer.learning_rate
        if hp.reject_worse_epochs:
            saved_params = [arr.copy() for _, arr in model.named_params()]
            saved_state = optimizer.state()

        order = rng.permutation(n)
        for b, start in enumerate(range(0, n, hp.batch_size), start=1):
            idx = order[start:start + hp.batch_size]
            loss, grads = loss_and_grad(model, seq[idx], static[idx], labels[idx])
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
            optimizer.step(model, grads)

        train_loss, train_acc = evaluate(model, *train_set)
        if not math.isfinite(train_loss):
            raise NumericError(f"non-finite loss after epoch {epoch}")
        if hp.reject_worse_epochs and train_loss > last[0]:
            for (_, arr), saved in zip(model.named_params(), saved_params):
                arr[...] = saved
            optimizer.restore(saved_state)
            optimizer.learning_rate = lr * hp.lr_backoff
            logger.info("Epoch %3d/%d  rejected: train loss %.5f > %.5f, learning rate -> %.3g",
                        epoch, hp.epochs, train_loss, last[0], optimizer.learning_rate)
        else:
            val_loss, val_acc = evaluate(model, *val_set)
            if not math.isfinite(val_loss):
                raise NumericError(f"non-finite loss after epoch {epoch}")
            last = (train_loss, train_acc, val_loss, val_acc)
            logger.info("Epoch %3d/%d  train loss %.5f acc %.4f  |  val loss %.5f acc %.4f",
                        epoch, hp.epochs, train_loss, train_acc, val_loss, val_acc)

        history.append({
            "train_loss": last[0], "train_acc": last[1],
            "val_loss": last[2], "val_acc": last[3],
            "learning_rate": lr,
        })

    return model, history


# ---------------------------------------------------------------------------
# Serialisation
# ---------------------------------------------------------------------------
def model_to_dict(model):
    params = {
        name: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
        for name, arr in model.named_params()
    }
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "recurrent_kind": model.recurrent_kind.value,
        "paper_exact_cell_update": bool(
            getattr(model.recurrent, "paper_exact_cell_update", False)),
        "freeze_biases": model.freeze_biases,
        "window_len": model.window_len,
        "static_dim": model.static_dim,
        "activations": [layer.activation.value for layer in model.head.layers],
        "params": params,
        "scaler": model.scaler.to_dict() if model.scaler is not None else None,
        "metadata": model.metadata,
    }


def model_from_dict(d, scaler_factory=None):
    if d.get("format") != MODEL_FORMAT:
        raise DataError("not a deep-mobility model file")
    if d.get("version") != MODEL_VERSION:
        raise DataError(f"unsupported model version {d.get('version')}")

    def arr(name):
        try:
            entry = d["params"][name]
        except KeyError as exc:
            raise DataError(f"model file lacks parameter {name}") from exc
        return np.asarray(entry["data"], dtype=float).reshape(entry["shape"])

    kind = RecurrentKind(d["recurrent_kind"])
    if kind is RecurrentKind.LSTM:
        recurrent = LstmParams(**{n: arr(f"lstm.{n}") for n in LstmParams.NAMES},
                               paper_exact_cell_update=d["paper_exact_cell_update"])
    else:
        recurrent = RnnParams(**{n: arr(f"rnn.{n}") for n in RnnParams.NAMES})

    layers = [
        DenseLayer(arr(f"head.{k}.weight"), arr(f"head.{k}.bias"), Activation(act))
        for k, act in enumerate(d["activations"])
    ]
    scaler = None
    if d.get("scaler") is not None and scaler_factory is not None:
        scaler = scaler_factory(d["scaler"])
    return DeepMobilityModel(
        recurrent_kind=kind,
        recurrent=recurrent,
        head=MlpParams(layers),
        static_dim=d["static_dim"],
        freeze_biases=d["freeze_biases"],
        window_len=d["window_len"],
        scaler=scaler,
        metadata=d.get("metadata", {}),
    )


def save_model(model, path):
    tables.write_json_atomic(path, model_to_dict(model))
    logger.info("Saved model to %s", path)


def load_model(path, scaler_factory=None):
    return model_from_dict(tables.read_json(path), scaler_factory)
