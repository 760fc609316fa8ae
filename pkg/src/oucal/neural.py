"""Two-layer LSTM regressor from a path to (theta_hat, sigma_sq_hat), in numpy.

Architecture: LSTM(1 -> H) -> LSTM(H -> H) -> ELU on the last hidden state
-> Linear(H -> 2). Gate blocks are stacked in the order (i, f, g, o):

    i = sigmoid(W_ii x + b_ii + W_hi h + b_hi)
    f = sigmoid(W_if x + b_if + W_hf h + b_hf)
    g = tanh   (W_ig x + b_ig + W_hg h + b_hg)
    o = sigmoid(W_io x + b_io + W_ho h + b_ho)
    c' = f * c + i * g,   h' = o * tanh(c')

Gradients are computed by hand (backpropagation through time) and the
parameters are updated with Adam.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import CacheMismatch, DimensionMismatch, EmptyDataset
from .ou_core import make_rng

log = logging.getLogger(__name__)

GATES = ("i", "f", "g", "o")
MODEL_MAGIC = b"OULSTM\x00\x01"
MODEL_VERSION = 1


@dataclass(frozen=True)
class LossConfig:
    delta: float = 1.0
    w_theta: float = 1.0
    w_sigma_sq: float = 0.5

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be > 0")
        if self.w_theta < 0 or self.w_sigma_sq < 0 or (self.w_theta == 0 and self.w_sigma_sq == 0):
            raise ValueError("loss weights must be >= 0 and not both zero")

    @property
    def weights(self) -> np.ndarray:
        return np.array([self.w_theta, self.w_sigma_sq])


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    learning_rate: float = 1e-3
    split_fraction: float = 0.8
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    hidden_size: int = 32
    elu_alpha: float = 1.0

    def __post_init__(self):
        if not 0 < self.split_fraction < 1:
            raise ValueError("split_fraction must lie in (0, 1)")
        if self.batch_size < 1 or self.epochs < 0 or self.hidden_size < 1:
            raise ValueError("batch_size and hidden_size must be >= 1, epochs >= 0")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")


# ---------------------------------------------------------------- elementwise


def huber_loss(residual, delta: float = 1.0):
    r = np.abs(residual)
    out = np.where(r <= delta, 0.5 * r * r, delta * (r - 0.5 * delta))
    return float(out) if np.ndim(out) == 0 else out


def huber_grad(residual, delta: float = 1.0):
    return np.clip(residual, -delta, delta)


def composite_loss(pred, target, config: LossConfig = LossConfig()):
    """Weighted per-parameter Huber loss, averaged over any leading batch axis."""
    r = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    per = huber_loss(r, config.delta) @ config.weights if r.ndim > 1 else float(
        np.dot(huber_loss(r, config.delta), config.weights))
    return float(np.mean(per))


def composite_loss_grad(pred, target, config: LossConfig = LossConfig()):
    """d(batch-mean composite loss)/d pred, shape (B, 2)."""
    r = np.atleast_2d(np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64))
    return huber_grad(r, config.delta) * config.weights / r.shape[0]


def elu(x, alpha: float = 1.0):
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x > 0, x, alpha * np.expm1(np.minimum(x, 0.0)))
    return float(out) if out.ndim == 0 else out


def elu_grad(x, alpha: float = 1.0):
    return np.where(x > 0, 1.0, alpha * np.exp(np.minimum(x, 0.0)))


def _sigmoid(z):
    # split form avoids overflow for large |z|
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------- model


@dataclass
class LstmLayerWeights:
    """Stacked gate weights: rows [0:H) input gate, [H:2H) forget, [2H:3H) cell, [3H:4H) output."""

    W_ih: np.ndarray  # (4H, input)
    W_hh: np.ndarray  # (4H, H)
    b_ih: np.ndarray  # (4H,)
    b_hh: np.ndarray  # (4H,)

    def __post_init__(self):
        four_h = self.W_ih.shape[0]
        if four_h % 4 or self.W_hh.shape != (four_h, four_h // 4) or \
                self.b_ih.shape != (four_h,) or self.b_hh.shape != (four_h,):
            raise DimensionMismatch("inconsistent LSTM layer shapes")

    @property
    def hidden_size(self) -> int:
        return self.W_hh.shape[1]

    @property
    def input_size(self) -> int:
        return self.W_ih.shape[1]

    def gate(self, name: str):
        """(W_i*, W_h*, b_i*, b_h*) views for one gate."""
        k = GATES.index(name)
        H = self.hidden_size
        s = slice(k * H, (k + 1) * H)
        return self.W_ih[s], self.W_hh[s], self.b_ih[s], self.b_hh[s]

    @classmethod
    def init(cls, input_size: int, hidden_size: int, rng: np.random.Generator):
        k = 1.0 / math.sqrt(hidden_size)
        u = lambda *shape: rng.uniform(-k, k, size=shape)
        return cls(u(4 * hidden_size, input_size), u(4 * hidden_size, hidden_size),
                   u(4 * hidden_size), u(4 * hidden_size))


@dataclass
class LstmModel:
    layers: list
    head_W: np.ndarray  # (2, H)
    head_b: np.ndarray  # (2,)
    elu_alpha: float = 1.0
    norm_shift: float = 0.0
    norm_scale: float = 1.0
    seq_len: int = 0  # path length seen in training; 0 = unchecked

    def __post_init__(self):
        if len(self.layers) != 2:
            raise DimensionMismatch(f"expected 2 stacked LSTM layers, got {len(self.layers)}")
        H = self.layers[0].hidden_size
        if self.layers[0].input_size != 1 or self.layers[1].input_size != H or self.layers[1].hidden_size != H:
            raise DimensionMismatch("layer 1 must map 1 -> H and layer 2 H -> H")
        if self.head_W.shape != (2, H) or self.head_b.shape != (2,):
            raise DimensionMismatch(f"head must map {H} -> 2")
        if not self.norm_scale > 0:
            raise ValueError("norm_scale must be > 0")

    @property
    def hidden_size(self) -> int:
        return self.layers[0].hidden_size

    @classmethod
    def init(cls, hidden_size: int, seed: int = 0, elu_alpha: float = 1.0):
        rng = make_rng(seed, (1,))
        layers = [LstmLayerWeights.init(1, hidden_size, rng), LstmLayerWeights.init(hidden_size, hidden_size, rng)]
        k = 1.0 / math.sqrt(hidden_size)
        head_W = rng.uniform(-k, k, size=(2, hidden_size))
        head_b = rng.uniform(-k, k, size=2)
        return cls(layers, head_W, head_b, elu_alpha)

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        """Named references to every trainable array, in a fixed order."""
        out = []
        for li, layer in enumerate(self.layers):
            for nm in ("W_ih", "W_hh", "b_ih", "b_hh"):
                out.append((f"layer{li}.{nm}", getattr(layer, nm)))
        out.append(("head.W", self.head_W))
        out.append(("head.b", self.head_b))
        return out

    def copy(self) -> "LstmModel":
        layers = [LstmLayerWeights(l.W_ih.copy(), l.W_hh.copy(), l.b_ih.copy(), l.b_hh.copy()) for l in self.layers]
        return LstmModel(layers, self.head_W.copy(), self.head_b.copy(), self.elu_alpha,
                         self.norm_shift, self.norm_scale, self.seq_len)

    def normalize(self, paths):
        return (np.asarray(paths, dtype=np.float64) - self.norm_shift) / self.norm_scale

    def denormalize(self, z):
        return np.asarray(z, dtype=np.float64) * self.norm_scale + self.norm_shift


@dataclass
class LstmState:
    h: list
    c: list


@dataclass
class ForwardCache:
    inputs: list = field(default_factory=list)   # per layer (T, B, in)
    gates: list = field(default_factory=list)    # per layer (T, B, 4H) post-activation
    c: list = field(default_factory=list)        # per layer (T+1, B, H), c[0] = 0
    h: list = field(default_factory=list)        # per layer (T+1, B, H), h[0] = 0
    tanh_c: list = field(default_factory=list)   # per layer (T, B, H)
    h_top: np.ndarray | None = None
    act: np.ndarray | None = None
    shape: tuple = ()

    def final_state(self) -> LstmState:
        return LstmState([h[-1] for h in self.h], [c[-1] for c in self.c])


def _layer_forward(layer: LstmLayerWeights, inp: np.ndarray, cache: ForwardCache):
    T, B, _ = inp.shape
    H = layer.hidden_size
    zx = inp @ layer.W_ih.T + (layer.b_ih + layer.b_hh)
    gates = np.empty((T, B, 4 * H))
    c = np.zeros((T + 1, B, H))
    h = np.zeros((T + 1, B, H))
    tanh_c = np.empty((T, B, H))
    W_hh_T = layer.W_hh.T
    for t in range(T):
        z = zx[t] + h[t] @ W_hh_T
        a = gates[t]
        a[:, :2 * H] = _sigmoid(z[:, :2 * H])
        a[:, 2 * H:3 * H] = np.tanh(z[:, 2 * H:3 * H])
        a[:, 3 * H:] = _sigmoid(z[:, 3 * H:])
        c[t + 1] = a[:, H:2 * H] * c[t] + a[:, :H] * a[:, 2 * H:3 * H]
        tanh_c[t] = np.tanh(c[t + 1])
        h[t + 1] = a[:, 3 * H:] * tanh_c[t]
    cache.inputs.append(inp)
    cache.gates.append(gates)
    cache.c.append(c)
    cache.h.append(h)
    cache.tanh_c.append(tanh_c)
    return h[1:]


def lstm_forward(model: LstmModel, paths):
    """Run already-normalized paths of shape (B, T) (or (T,)) through the network.

    Returns (predictions (B, 2), cache).
    """
    x = np.asarray(paths, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] < 1:
        raise DimensionMismatch(f"expected paths of shape (batch, T>=1), got {x.shape}")
    cache = ForwardCache(shape=x.shape)
    seq = x.T[:, :, None]
    for layer in model.layers:
        seq = _layer_forward(layer, seq, cache)
    cache.h_top = seq[-1]
    cache.act = elu(cache.h_top, model.elu_alpha)
    pred = cache.act @ model.head_W.T + model.head_b
    return pred, cache


def lstm_backward(model: LstmModel, cache: ForwardCache, d_pred) -> list[np.ndarray]:
    """Gradients for every array of ``model.parameters()``, same order."""
    d_pred = np.atleast_2d(np.asarray(d_pred, dtype=np.float64))
    if cache.act is None or d_pred.shape != (cache.shape[0], 2) or len(cache.gates) != 2:
        raise CacheMismatch("cache does not match the upstream gradient")
    H = model.hidden_size
    if cache.gates[0].shape[2] != 4 * H:
        raise CacheMismatch("cache was produced by a model of a different width")

    g_head_W = d_pred.T @ cache.act
    g_head_b = d_pred.sum(axis=0)
    d_top = (d_pred @ model.head_W) * elu_grad(cache.h_top, model.elu_alpha)

    T, B = cache.gates[0].shape[:2]
    d_h_seq = np.zeros((T, B, H))
    d_h_seq[-1] = d_top
    grads_by_layer = [None, None]
    for li in (1, 0):
        layer = model.layers[li]
        gates, c, h, tanh_c = cache.gates[li], cache.c[li], cache.h[li], cache.tanh_c[li]
        dZ = np.empty((T, B, 4 * H))
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        W_hh = layer.W_hh
        for t in range(T - 1, -1, -1):
            a = gates[t]
            i, f, g, o = a[:, :H], a[:, H:2 * H], a[:, 2 * H:3 * H], a[:, 3 * H:]
            dh = d_h_seq[t] + dh_next
            tc = tanh_c[t]
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dz = dZ[t]
            dz[:, :H] = dc * g * i * (1.0 - i)
            dz[:, H:2 * H] = dc * c[t] * f * (1.0 - f)
            dz[:, 2 * H:3 * H] = dc * i * (1.0 - g * g)
            dz[:, 3 * H:] = dh * tc * o * (1.0 - o)
            dc_next = dc * f
            dh_next = dz @ W_hh
        inp = cache.inputs[li]
        flat = dZ.reshape(T * B, 4 * H)
        g_W_ih = flat.T @ inp.reshape(T * B, -1)
        g_W_hh = flat.T @ h[:-1].reshape(T * B, H)
        g_b = flat.sum(axis=0)
        grads_by_layer[li] = [g_W_ih, g_W_hh, g_b, g_b.copy()]
        if li == 1:
            d_h_seq = dZ @ layer.W_ih
    return grads_by_layer[0] + grads_by_layer[1] + [g_head_W, g_head_b]


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, arrays):
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays])


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState, t: int,
              config: TrainConfig = TrainConfig()) -> AdamState:
    """In-place Adam update with bias correction; ``t`` counts from 1."""
    if t < 1:
        raise ValueError("Adam step count starts at 1")
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    lr = config.learning_rate
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
    state.t = t
    return state


# ---------------------------------------------------------------- training


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    n_train: int = 0
    n_val: int = 0

    def rows(self):
        return [(e + 1, tr, va) for e, (tr, va) in enumerate(zip(self.train_loss, self.val_loss))]


def _stack(dataset):
    if len(dataset) == 0:
        raise EmptyDataset("no trajectories to train on")
    lengths = {len(traj.x) for traj, _ in dataset}
    if len(lengths) != 1:
        raise DimensionMismatch(f"trajectories have differing lengths {sorted(lengths)}")
    X = np.stack([traj.x for traj, _ in dataset])
    Y = np.array([p.as_tuple() for _, p in dataset])
    return X, Y


def split_indices(n: int, split_fraction: float, seed: int):
    """Seeded shuffle, then the first round(split * n) indices go to training."""
    perm = make_rng(seed, (2,)).permutation(n)
    n_train = int(round(split_fraction * n))
    n_train = min(max(n_train, 1), n - 1) if n > 1 else n
    return perm[:n_train], perm[n_train:]


def per_sample_loss(pred, target, loss: LossConfig):
    return huber_loss(pred - target, loss.delta) @ loss.weights


def _predict_raw(model, Z, chunk=512):
    out = np.empty((Z.shape[0], 2))
    for s in range(0, Z.shape[0], chunk):
        out[s:s + chunk] = lstm_forward(model, Z[s:s + chunk])[0]
    return out


def train(dataset, config: TrainConfig = TrainConfig(), loss: LossConfig = LossConfig(),
          callback=None):
    """Fit a fresh model on labelled (Trajectory, OUParams) pairs.

    Returns (model, history). Per-epoch training loss is the mean per-sample
    composite loss accumulated over that epoch's minibatches; validation loss
    is evaluated after the epoch. The input normalizer (one shift, one scale)
    is fitted on the training split.
    """
    X, Y = _stack(dataset)
    tr_idx, va_idx = split_indices(len(X), config.split_fraction, config.seed)
    model = LstmModel.init(config.hidden_size, config.seed, config.elu_alpha)
    Xtr = X[tr_idx]
    model.norm_shift = float(Xtr.mean())
    model.norm_scale = float(Xtr.std()) or 1.0
    model.seq_len = X.shape[1]
    Ztr, Ytr = model.normalize(Xtr), Y[tr_idx]
    Zva, Yva = model.normalize(X[va_idx]), Y[va_idx]

    params = [p for _, p in model.parameters()]
    state = AdamState.zeros_like(params)
    rng = make_rng(config.seed, (3,))
    hist = TrainHistory(n_train=len(tr_idx), n_val=len(va_idx))
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(tr_idx))
        sample_loss = np.empty(len(tr_idx))
        for s in range(0, len(order), config.batch_size):
            b = order[s:s + config.batch_size]
            pred, cache = lstm_forward(model, Ztr[b])
            sample_loss[b] = per_sample_loss(pred, Ytr[b], loss)
            grads = lstm_backward(model, cache, composite_loss_grad(pred, Ytr[b], loss))
            step += 1
            adam_step(params, grads, state, step, config)
        hist.train_loss.append(float(sample_loss.mean()))
        if len(va_idx):
            hist.val_loss.append(float(per_sample_loss(_predict_raw(model, Zva), Yva, loss).mean()))
        else:
            hist.val_loss.append(math.nan)
        log.info("epoch %d train %.5f val %.5f", epoch + 1, hist.train_loss[-1], hist.val_loss[-1])
        if callback is not None:
            callback(epoch + 1, hist)
    return model, hist


def infer(model: LstmModel, trajectories) -> np.ndarray:
    """(theta_hat, sigma_sq_hat) per path, shape (N, 2)."""
    paths = [np.asarray(getattr(t, "x", t), dtype=np.float64) for t in trajectories]
    lengths = sorted({p.size for p in paths})
    if model.seq_len and lengths != [model.seq_len]:
        raise DimensionMismatch(f"model expects paths of length {model.seq_len}, got lengths {lengths}")
    if len(lengths) > 1:
        raise DimensionMismatch(f"paths have differing lengths {lengths}")
    X = np.stack(paths)
    return _predict_raw(model, model.normalize(X))


# ---------------------------------------------------------------- model file


def save_model(model: LstmModel, path) -> None:
    """Little-endian binary layout.

    magic(8) | version u32 | hidden u32 | n_layers u32 | seq_len u32 | elu_alpha f64 |
    norm_shift f64 | norm_scale f64 | n_tensors u32 |
    per tensor: rank u32, dims u32 * rank, data f64 row-major.
    """
    tensors = [a for _, a in model.parameters()]
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<IIII", MODEL_VERSION, model.hidden_size, len(model.layers), model.seq_len))
        fh.write(struct.pack("<ddd", model.elu_alpha, model.norm_shift, model.norm_scale))
        fh.write(struct.pack("<I", len(tensors)))
        for a in tensors:
            fh.write(struct.pack("<I", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_model(path) -> LstmModel:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != MODEL_MAGIC:
        raise ValueError(f"{path}: not an oucal model file")
    off = 8
    version, H, n_layers, seq_len = struct.unpack_from("<IIII", buf, off)
    off += 16
    if version != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported model version {version}")
    if n_layers != 2:
        raise DimensionMismatch(f"{path}: expected 2 layers, file has {n_layers}")
    alpha, shift, scale = struct.unpack_from("<ddd", buf, off)
    off += 24
    (n_tensors,) = struct.unpack_from("<I", buf, off)
    off += 4
    expected = [(4 * H, 1), (4 * H, H), (4 * H,), (4 * H,), (4 * H, H), (4 * H, H), (4 * H,), (4 * H,), (2, H), (2,)]
    if n_tensors != len(expected):
        raise DimensionMismatch(f"{path}: expected {len(expected)} tensors, got {n_tensors}")
    arrays = []
    for want in expected:
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        if tuple(dims) != want:
            raise DimensionMismatch(f"{path}: tensor shape {dims}, expected {want}")
        count = int(np.prod(dims))
        arrays.append(np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(dims).astype(np.float64))
        off += 8 * count
    layers = [LstmLayerWeights(*arrays[0:4]), LstmLayerWeights(*arrays[4:8])]
    return LstmModel(layers, arrays[8], arrays[9], alpha, shift, scale, seq_len)
