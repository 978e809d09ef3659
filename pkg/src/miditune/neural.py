"""Recurrent next-pitch model, built from scratch on numpy.

Two stacked LSTM cells, a rectified dense layer and an 88-way softmax head.
Forward inference exists in window and streaming form (bit-identical),
training is exact backpropagation through time with plain mini-batch SGD,
and the whole thing round-trips through a small binary model file.

Gate weights are packed row-wise per cell in the order input, forget,
candidate, output: w has shape (4H, D_in + H) and acts on [x; h].
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .representation import LEVELS, N_KEYS, SCHEME_ONE_HOT_BOTH, encode_batch, input_width


class ModelFormatError(ValueError):
    pass


@dataclass
class LstmModel:
    level: str
    input_width: int
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    wd: np.ndarray
    bd: np.ndarray
    wo: np.ndarray
    bo: np.ndarray

    @property
    def hidden_size(self) -> int:
        return self.b1.size // 4

    @property
    def dense_size(self) -> int:
        return self.bd.size

    def params(self) -> dict[str, np.ndarray]:
        """Live parameter arrays, in serialization order."""
        return {
            "w1": self.w1, "b1": self.b1,
            "w2": self.w2, "b2": self.b2,
            "wd": self.wd, "bd": self.bd,
            "wo": self.wo, "bo": self.bo,
        }

    def copy(self) -> "LstmModel":
        return LstmModel(
            self.level, self.input_width,
            **{name: array.copy() for name, array in self.params().items()},
        )

    def validate(self) -> None:
        h = self.hidden_size
        expected = {
            "w1": (4 * h, self.input_width + h), "b1": (4 * h,),
            "w2": (4 * h, 2 * h), "b2": (4 * h,),
            "wd": (self.dense_size, h), "bd": (self.dense_size,),
            "wo": (N_KEYS, self.dense_size), "bo": (N_KEYS,),
        }
        for name, array in self.params().items():
            if array.shape != expected[name]:
                raise ModelFormatError(
                    f"{name} has shape {array.shape}, expected {expected[name]}"
                )
            if not np.all(np.isfinite(array)):
                raise ModelFormatError(f"{name} contains non-finite values")
        if self.level not in LEVELS:
            raise ModelFormatError(f"unknown level {self.level!r}")


@dataclass
class Hyperparams:
    sequence_length: int = 64
    lstm_hidden: int = 256
    dense_size: int = 128
    epochs: int = 20
    batch_size: int = 64
    dropout: float = 0.0
    learning_rate: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if min(self.sequence_length, self.lstm_hidden, self.dense_size,
               self.epochs, self.batch_size) <= 0:
            raise ValueError("size, epoch and batch hyperparameters must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        # zero is allowed so that a no-op training run stays expressible
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be non-negative, got {self.learning_rate}")


@dataclass
class EpochStats:
    epoch: int
    loss: float
    accuracy: float


@dataclass
class RecurrentState:
    """Per-layer hidden and cell vectors for streaming inference."""

    h1: np.ndarray
    c1: np.ndarray
    h2: np.ndarray
    c2: np.ndarray


def zero_state(model: LstmModel) -> RecurrentState:
    h = model.hidden_size
    return RecurrentState(*(np.zeros(h) for _ in range(4)))


def new_model(
    level: str,
    lstm_hidden: int,
    dense_size: int,
    scheme: str = SCHEME_ONE_HOT_BOTH,
    seed: int = 0,
) -> LstmModel:
    """Randomly initialized model; weights are float32-representable so a
    fresh model survives save/load bit-exactly."""
    width = input_width(level, scheme)
    rng = np.random.default_rng(seed)

    def init(rows, cols):
        w = rng.standard_normal((rows, cols)) / np.sqrt(cols)
        return w.astype(np.float32).astype(np.float64)

    h = lstm_hidden
    b1 = np.zeros(4 * h)
    b2 = np.zeros(4 * h)
    b1[h:2 * h] = 1.0  # forget gates start open
    b2[h:2 * h] = 1.0
    model = LstmModel(
        level=level,
        input_width=width,
        w1=init(4 * h, width + h), b1=b1,
        w2=init(4 * h, 2 * h), b2=b2,
        wd=init(dense_size, h), bd=np.zeros(dense_size),
        wo=init(N_KEYS, dense_size), bo=np.zeros(N_KEYS),
    )
    model.validate()
    return model


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    positive = x >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-x[positive]))
    ex = np.exp(x[~positive])
    out[~positive] = ex / (1.0 + ex)
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=-1, keepdims=True)


def _cell_step(w, b, x, h, c):
    size = h.shape[-1]
    z = w @ np.concatenate([x, h]) + b
    i = _sigmoid(z[:size])
    f = _sigmoid(z[size:2 * size])
    g = np.tanh(z[2 * size:3 * size])
    o = _sigmoid(z[3 * size:])
    c_next = f * c + i * g
    h_next = o * np.tanh(c_next)
    return h_next, c_next


def _head_logits(model: LstmModel, h2: np.ndarray) -> np.ndarray:
    dense = np.maximum(model.wd @ h2 + model.bd, 0.0)
    return model.wo @ dense + model.bo


def forward_streaming(
    model: LstmModel, state: RecurrentState, x: np.ndarray
) -> tuple[np.ndarray, RecurrentState]:
    """Consume one encoded event; next-pitch distribution and updated state."""
    if x.shape != (model.input_width,):
        raise ValueError(f"expected input of shape ({model.input_width},), got {x.shape}")
    h1, c1 = _cell_step(model.w1, model.b1, x, state.h1, state.c1)
    h2, c2 = _cell_step(model.w2, model.b2, h1, state.h2, state.c2)
    return softmax(_head_logits(model, h2)), RecurrentState(h1, c1, h2, c2)


def prior_distribution(model: LstmModel) -> np.ndarray:
    """Next-pitch distribution before any event has been consumed."""
    return softmax(_head_logits(model, np.zeros(model.hidden_size)))


def forward(model: LstmModel, window: np.ndarray) -> np.ndarray:
    """Probability over the 88 pitches after consuming a whole window.

    Implemented as repeated streaming steps, so it is bit-identical to
    forward_streaming by construction.
    """
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 2 or window.shape[1] != model.input_width:
        raise ValueError(
            f"expected window of shape (T, {model.input_width}), got {window.shape}"
        )
    state = zero_state(model)
    probs = None
    for x in window:
        probs, state = forward_streaming(model, state, x)
    if probs is None:
        raise ValueError("window must contain at least one event")
    return probs


def loss(probabilities: np.ndarray, target: int) -> float:
    """Sparse categorical cross-entropy against a pitch class index."""
    if not 0 <= target < N_KEYS:
        raise ValueError(f"target out of range: {target}")
    return float(-np.log(probabilities[target]))


def loss_from_logits(logits: np.ndarray, target: int) -> float:
    """Same loss, computed stably via log-sum-exp; never NaN for finite logits."""
    m = logits.max()
    return float(m + np.log(np.exp(logits - m).sum()) - logits[target])


# ---------------------------------------------------------------------------
# Batched training path


def _cell_forward_batch(w, b, x_seq):
    """Run one LSTM layer over (B, T, D_in); returns the h sequence and caches."""
    batch, steps, _ = x_seq.shape
    size = b.size // 4
    h = np.zeros((batch, size))
    c = np.zeros((batch, size))
    h_seq = np.zeros((batch, steps, size))
    caches = []
    for t in range(steps):
        hin = np.concatenate([x_seq[:, t], h], axis=1)
        z = hin @ w.T + b
        i = _sigmoid(z[:, :size])
        f = _sigmoid(z[:, size:2 * size])
        g = np.tanh(z[:, 2 * size:3 * size])
        o = _sigmoid(z[:, 3 * size:])
        c_next = f * c + i * g
        tanh_c = np.tanh(c_next)
        h = o * tanh_c
        caches.append((hin, i, f, g, o, c, c_next, tanh_c))
        c = c_next
        h_seq[:, t] = h
    return h_seq, caches


def _cell_backward_batch(w, caches, dh_ext):
    """BPTT through one layer. dh_ext is the per-timestep downstream gradient."""
    batch, steps, size = dh_ext.shape
    d_in = w.shape[1] - size
    dw = np.zeros_like(w)
    db = np.zeros(w.shape[0])
    dx_seq = np.zeros((batch, steps, d_in))
    dh_rec = np.zeros((batch, size))
    dc = np.zeros((batch, size))
    for t in reversed(range(steps)):
        hin, i, f, g, o, c_prev, _, tanh_c = caches[t]
        dh = dh_ext[:, t] + dh_rec
        do = dh * tanh_c
        dc = dc + dh * o * (1.0 - tanh_c * tanh_c)
        di = dc * g
        df = dc * c_prev
        dg = dc * i
        dc = dc * f
        dz = np.concatenate(
            [di * i * (1 - i), df * f * (1 - f), dg * (1 - g * g), do * o * (1 - o)],
            axis=1,
        )
        dw += dz.T @ hin
        db += dz.sum(axis=0)
        dhin = dz @ w
        dx_seq[:, t] = dhin[:, :d_in]
        dh_rec = dhin[:, d_in:]
    return dw, db, dx_seq


def _forward_batch(model, x, dropout=0.0, rng=None):
    """Training forward over (B, T, D); returns logits and the backward cache."""
    h1_seq, cache1 = _cell_forward_batch(model.w1, model.b1, x)
    mask1 = mask2 = None
    if dropout > 0.0:
        keep = 1.0 - dropout
        mask1 = (rng.random(h1_seq.shape) >= dropout) / keep
        h1_seq = h1_seq * mask1
    h2_seq, cache2 = _cell_forward_batch(model.w2, model.b2, h1_seq)
    h2 = h2_seq[:, -1]
    if dropout > 0.0:
        mask2 = (rng.random(h2.shape) >= dropout) / (1.0 - dropout)
        h2 = h2 * mask2
    dense_pre = h2 @ model.wd.T + model.bd
    dense = np.maximum(dense_pre, 0.0)
    logits = dense @ model.wo.T + model.bo
    cache = (cache1, cache2, mask1, mask2, h2, dense_pre, dense, x.shape[1])
    return logits, cache


def _backward_batch(model, cache, dlogits):
    cache1, cache2, mask1, mask2, h2, dense_pre, dense, steps = cache
    batch = dlogits.shape[0]
    grads = {
        "wo": dlogits.T @ dense,
        "bo": dlogits.sum(axis=0),
    }
    d_dense = (dlogits @ model.wo) * (dense_pre > 0)
    grads["wd"] = d_dense.T @ h2
    grads["bd"] = d_dense.sum(axis=0)
    dh2 = d_dense @ model.wd
    if mask2 is not None:
        dh2 = dh2 * mask2
    dh2_ext = np.zeros((batch, steps, model.hidden_size))
    dh2_ext[:, -1] = dh2
    grads["w2"], grads["b2"], dh1_ext = _cell_backward_batch(model.w2, cache2, dh2_ext)
    if mask1 is not None:
        dh1_ext = dh1_ext * mask1
    grads["w1"], grads["b1"], _ = _cell_backward_batch(model.w1, cache1, dh1_ext)
    return grads


def backward(model: LstmModel, window: np.ndarray, target: int) -> dict[str, np.ndarray]:
    """Exact gradients of loss(forward(model, window), target) via BPTT."""
    window = np.asarray(window, dtype=np.float64)
    logits, cache = _forward_batch(model, window[np.newaxis])
    dlogits = softmax(logits)
    dlogits[0, target] -= 1.0
    return _backward_batch(model, cache, dlogits)


def _clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> None:
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale


GRADIENT_CLIP_NORM = 5.0


def train(model, dataset, hp: Hyperparams, seed: int | None = None):
    """Mini-batch SGD over a window set; deterministic for a fixed seed.

    Returns the trained model (updated in place) and per-epoch mean loss and
    next-pitch top-1 accuracy, accumulated over the training passes.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("dataset is empty")
    if dataset.level != model.level:
        raise ValueError(
            f"dataset level {dataset.level!r} does not match model level {model.level!r}"
        )
    if input_width(dataset.level, dataset.scheme) != model.input_width:
        raise ValueError("dataset encoding does not match model input width")

    rng = np.random.default_rng(hp.seed if seed is None else seed)
    params = model.params()
    history: list[EpochStats] = []
    for epoch in range(hp.epochs):
        order = rng.permutation(n)
        total_loss = 0.0
        correct = 0
        for begin in range(0, n, hp.batch_size):
            idx = order[begin:begin + hp.batch_size]
            x = encode_batch(dataset.tokens[idx], dataset.level, dataset.scheme)
            y = dataset.targets[idx].astype(np.int64)
            logits, cache = _forward_batch(model, x, hp.dropout, rng)

            shifted = logits - logits.max(axis=1, keepdims=True)
            log_norm = np.log(np.exp(shifted).sum(axis=1))
            total_loss += float(
                (log_norm - shifted[np.arange(len(y)), y]).sum()
            )
            correct += int((logits.argmax(axis=1) == y).sum())

            dlogits = softmax(logits)
            dlogits[np.arange(len(y)), y] -= 1.0
            dlogits /= len(y)
            grads = _backward_batch(model, cache, dlogits)
            _clip_global_norm(grads, GRADIENT_CLIP_NORM)
            for name, p in params.items():
                p -= hp.learning_rate * grads[name]
        history.append(EpochStats(epoch, total_loss / n, correct / n))
    model.validate()
    return model, history


# ---------------------------------------------------------------------------
# Model file

_MODEL_MAGIC = b"MTRN"
_MODEL_VERSION = 1
_MODEL_HEADER = struct.Struct("<4sHBIII")


def save_model(model: LstmModel, destination: str | Path, metadata: dict | None = None) -> None:
    """Write the binary weight file; metadata, when given, lands in a JSON sidecar."""
    model.validate()
    path = Path(destination)
    header = _MODEL_HEADER.pack(
        _MODEL_MAGIC,
        _MODEL_VERSION,
        LEVELS.index(model.level),
        model.input_width,
        model.hidden_size,
        model.dense_size,
    )
    blocks = b"".join(
        np.ascontiguousarray(array, dtype="<f4").tobytes()
        for array in model.params().values()
    )
    path.write_bytes(header + blocks)
    if metadata is not None:
        Path(str(path) + ".json").write_text(json.dumps(metadata, indent=2) + "\n")


def load_model(source: str | Path) -> LstmModel:
    data = Path(source).read_bytes()
    if len(data) < _MODEL_HEADER.size:
        raise ModelFormatError("file shorter than model header")
    magic, version, level_tag, width, hidden, dense = _MODEL_HEADER.unpack_from(data)
    if magic != _MODEL_MAGIC:
        raise ModelFormatError(f"bad model magic {magic!r}")
    if version != _MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {version}")
    if level_tag >= len(LEVELS):
        raise ModelFormatError(f"unknown level tag {level_tag}")
    if min(width, hidden, dense) <= 0:
        raise ModelFormatError("non-positive dimension in header")
    shapes = {
        "w1": (4 * hidden, width + hidden), "b1": (4 * hidden,),
        "w2": (4 * hidden, 2 * hidden), "b2": (4 * hidden,),
        "wd": (dense, hidden), "bd": (dense,),
        "wo": (N_KEYS, dense), "bo": (N_KEYS,),
    }
    expected = sum(int(np.prod(s)) for s in shapes.values()) * 4
    body = data[_MODEL_HEADER.size:]
    if len(body) != expected:
        raise ModelFormatError(
            f"expected {expected} weight bytes, found {len(body)}"
        )
    arrays = {}
    offset = 0
    for name, shape in shapes.items():
        count = int(np.prod(shape))
        arrays[name] = (
            np.frombuffer(body, dtype="<f4", count=count, offset=offset)
            .astype(np.float64)
            .reshape(shape)
        )
        offset += count * 4
    model = LstmModel(level=LEVELS[level_tag], input_width=width, **arrays)
    model.validate()
    return model


def load_metadata(source: str | Path) -> dict | None:
    sidecar = Path(str(source) + ".json")
    if not sidecar.exists():
        return None
    return json.loads(sidecar.read_text())
