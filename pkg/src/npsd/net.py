"""Two-layer LSTM sequence regressor with a time-distributed dense head.

Packed gate order inside every kernel is (input, forget, cell, output).
Training and inference run in float32; pass float64 parameters to get a
float64 forward/backward (used for gradient checking).
"""

from __future__ import annotations

import copy
import logging
import struct
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import FormatError, InvalidArgumentError, ShapeMismatchError, TrainingDivergedError, UnsupportedVersionError

log = logging.getLogger(__name__)

INPUT_SIZE = 3
HIDDEN = (128, 64)

CKPT_MAGIC = b"NPSD"
CKPT_VERSION = 1


@dataclass
class LSTMLayer:
    W: np.ndarray  # (4H, I)
    U: np.ndarray  # (4H, H)
    b: np.ndarray  # (4H,)

    @property
    def hidden_size(self) -> int:
        return self.U.shape[1]

    @property
    def input_size(self) -> int:
        return self.W.shape[1]


@dataclass
class NetworkParams:
    layers: list[LSTMLayer]
    dense_w: np.ndarray  # (H_last,)
    dense_b: np.ndarray  # (1,)
    trained_steps: int = 0
    seed: int = 0

    def __post_init__(self):
        prev = self.layers[0].input_size
        for layer in self.layers:
            h = layer.hidden_size
            if layer.W.shape != (4 * h, prev) or layer.U.shape != (4 * h, h) or layer.b.shape != (4 * h,):
                raise ShapeMismatchError("inconsistent LSTM layer dimensions")
            prev = h
        if self.dense_w.shape != (prev,) or self.dense_b.shape != (1,):
            raise ShapeMismatchError("dense head does not match last LSTM layer")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.layers[0].input_size, *(l.hidden_size for l in self.layers))

    @property
    def dtype(self):
        return self.dense_w.dtype

    def arrays(self) -> list[np.ndarray]:
        """Every stored array in checkpoint order."""
        out = []
        for layer in self.layers:
            out += [layer.W, layer.U, layer.b]
        return out + [self.dense_w, self.dense_b]

    def replace_arrays(self, arrays) -> "NetworkParams":
        arrays = list(arrays)
        layers = [LSTMLayer(*arrays[3 * j:3 * j + 3]) for j in range(len(self.layers))]
        return NetworkParams(layers, arrays[-2], arrays[-1], self.trained_steps, self.seed)

    def astype(self, dtype) -> "NetworkParams":
        return self.replace_arrays(a.astype(dtype) for a in self.arrays())

    def copy(self) -> "NetworkParams":
        return copy.deepcopy(self)


def init_params(input_size: int = INPUT_SIZE, hidden: tuple[int, ...] = HIDDEN, seed: int = 0,
                dtype=np.float32) -> NetworkParams:
    """Glorot-uniform kernels, zero biases except forget-gate bias 1."""
    if min(hidden) < 1 or input_size < 1:
        raise InvalidArgumentError(f"invalid dims {(input_size, *hidden)}")
    rng = np.random.default_rng(seed)

    def glorot(rows, cols):
        r = np.sqrt(6.0 / (rows + cols))
        return rng.uniform(-r, r, size=(rows, cols))

    layers = []
    prev = input_size
    for h in hidden:
        b = np.zeros(4 * h)
        b[h:2 * h] = 1.0
        layers.append(LSTMLayer(glorot(4 * h, prev), glorot(4 * h, h), b))
        prev = h
    dense_w = glorot(prev, 1)[:, 0]
    params = NetworkParams(layers, dense_w, np.zeros(1), seed=seed)
    return params.astype(dtype)


def count_parameters(input_size: int = INPUT_SIZE, h1: int = HIDDEN[0], h2: int = HIDDEN[1]) -> int:
    total = 0
    prev = input_size
    for h in (h1, h2):
        total += 4 * (h * (prev + h) + h)
        prev = h
    return total + h2 + 1


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def lstm_cell_step(layer: LSTMLayer, x_t: np.ndarray, h: np.ndarray, c: np.ndarray):
    """One LSTM update; works on single vectors or on (B, .) batches.

    Returns ``(h_new, c_new)``.
    """
    H = layer.hidden_size
    z = x_t @ layer.W.T + h @ layer.U.T + layer.b
    i = expit(z[..., :H])
    f = expit(z[..., H:2 * H])
    g = np.tanh(z[..., 2 * H:3 * H])
    o = expit(z[..., 3 * H:])
    c_new = f * c + i * g
    return o * np.tanh(c_new), c_new


@dataclass
class _LayerCache:
    x: np.ndarray  # (T, B, I)
    hs: np.ndarray  # (T+1, B, H), hs[0] = 0
    cs: np.ndarray  # (T+1, B, H)
    gates: np.ndarray  # (T, B, 4H) activated
    tanh_c: np.ndarray  # (T, B, H)


@dataclass
class ForwardCache:
    layers: list[_LayerCache]
    top: np.ndarray  # (T, B, H_last)
    batch_size: int
    seq_len: int


def _layer_forward(layer: LSTMLayer, x: np.ndarray) -> _LayerCache:
    T, B, _ = x.shape
    H = layer.hidden_size
    dtype = layer.W.dtype
    zx = x @ layer.W.T + layer.b
    hs = np.zeros((T + 1, B, H), dtype)
    cs = np.zeros((T + 1, B, H), dtype)
    gates = np.empty((T, B, 4 * H), dtype)
    tanh_c = np.empty((T, B, H), dtype)
    UT = np.ascontiguousarray(layer.U.T)
    for t in range(T):
        z = zx[t]
        z += hs[t] @ UT
        a = gates[t]
        expit(z, out=a)
        np.tanh(z[:, 2 * H:3 * H], out=a[:, 2 * H:3 * H])
        c = cs[t + 1]
        np.multiply(a[:, H:2 * H], cs[t], out=c)
        c += a[:, :H] * a[:, 2 * H:3 * H]
        np.tanh(c, out=tanh_c[t])
        np.multiply(a[:, 3 * H:], tanh_c[t], out=hs[t + 1])
    return _LayerCache(x, hs, cs, gates, tanh_c)


def forward(params: NetworkParams, inputs: np.ndarray, keep_cache: bool = True):
    """Run the network from zero state.

    ``inputs`` is (B, T, I) or (T, I). Returns ``(predictions, cache)`` with
    predictions of shape (B, T) (or (T,) for a single sequence).
    """
    single = inputs.ndim == 2
    x = inputs[None] if single else inputs
    x = np.ascontiguousarray(np.transpose(x, (1, 0, 2)), dtype=params.dtype)
    caches = []
    for layer in params.layers:
        cache = _layer_forward(layer, x)
        x = cache.hs[1:]
        if keep_cache:
            caches.append(cache)
    y = (x @ params.dense_w + params.dense_b[0]).T
    out = y[0] if single else y
    if not keep_cache:
        return out, None
    return out, ForwardCache(caches, x, y.shape[0], y.shape[1])


def predict(params: NetworkParams, inputs: np.ndarray, batch_size: int = 512) -> np.ndarray:
    out = np.empty(inputs.shape[:2], dtype=params.dtype)
    for s in range(0, inputs.shape[0], batch_size):
        out[s:s + batch_size], _ = forward(params, inputs[s:s + batch_size], keep_cache=False)
    return out


def mse_loss(predictions: np.ndarray, targets: np.ndarray) -> float:
    predictions = np.asarray(predictions)
    targets = np.asarray(targets)
    if predictions.shape != targets.shape:
        raise ShapeMismatchError(f"prediction shape {predictions.shape} != target shape {targets.shape}")
    d = predictions.astype(np.float64) - targets
    return float(np.mean(d * d))


def _layer_backward(layer: LSTMLayer, cache: _LayerCache, dh_out: np.ndarray):
    """BPTT through one layer. ``dh_out`` is dL/dh_t from above, (T, B, H)."""
    T, B, H = dh_out.shape
    dz = np.empty_like(cache.gates)
    dh_next = np.zeros((B, H), dh_out.dtype)
    dc_next = np.zeros((B, H), dh_out.dtype)
    U = layer.U
    for t in range(T - 1, -1, -1):
        a = cache.gates[t]
        i, f, g, o = a[:, :H], a[:, H:2 * H], a[:, 2 * H:3 * H], a[:, 3 * H:]
        tc = cache.tanh_c[t]
        dh = dh_out[t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        d = dz[t]
        d[:, :H] = dc * g * i * (1.0 - i)
        d[:, H:2 * H] = dc * cache.cs[t] * f * (1.0 - f)
        d[:, 2 * H:3 * H] = dc * i * (1.0 - g * g)
        d[:, 3 * H:] = dh * tc * o * (1.0 - o)
        dc_next = dc * f
        dh_next = d @ U
    flat_dz = dz.reshape(T * B, 4 * H)
    dW = flat_dz.T @ cache.x.reshape(T * B, -1)
    dU = flat_dz.T @ cache.hs[:-1].reshape(T * B, H)
    db = flat_dz.sum(axis=0)
    dx = dz @ layer.W
    return dW, dU, db, dx


def backward(params: NetworkParams, cache: ForwardCache, predictions: np.ndarray,
             targets: np.ndarray) -> list[np.ndarray]:
    """Exact gradient of the batch MSE w.r.t. every array of ``params``.

    Gradients are returned in :meth:`NetworkParams.arrays` order.
    """
    y = predictions[None] if predictions.ndim == 1 else predictions
    tgt = targets[None] if np.ndim(targets) == 1 else targets
    if y.shape != (cache.batch_size, cache.seq_len) or tgt.shape != y.shape:
        raise ShapeMismatchError("cache, predictions and targets do not match")
    dy = (2.0 / y.size) * (y - tgt)
    dy = dy.T.astype(params.dtype)  # (T, B)
    d_dense_w = np.tensordot(dy, cache.top, axes=([0, 1], [0, 1]))
    d_dense_b = np.array([dy.sum()], dtype=params.dtype)
    dh = dy[..., None] * params.dense_w
    grads: list[np.ndarray] = []
    for layer, lc in zip(reversed(params.layers), reversed(cache.layers)):
        dW, dU, db, dh = _layer_backward(layer, lc, dh)
        grads = [dW, dU, db] + grads
    return grads + [d_dense_w, d_dense_b]


def loss_and_grads(params: NetworkParams, inputs: np.ndarray, targets: np.ndarray):
    y, cache = forward(params, inputs)
    return mse_loss(y, targets), backward(params, cache, y, targets)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, arrays, **kwargs) -> "AdamState":
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], **kwargs)


def adam_step(arrays: list[np.ndarray], grads: list[np.ndarray], state: AdamState):
    """Bias-corrected Adam update applied in place; returns ``(arrays, state)``."""
    if len(arrays) != len(grads) or len(arrays) != len(state.m):
        raise ShapeMismatchError("params, grads and Adam moments differ in length")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(arrays, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeMismatchError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return arrays, state


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 512
    patience: int = 2
    max_epochs: int = 100
    seed: int = 0
    clip_norm: float | None = None
    max_seconds: float | None = None  # wall-clock cap; breaks bit-reproducibility when it binds


@dataclass
class EpochRecord:
    epoch: int
    train_mse: float
    val_mse: float


@dataclass
class TrainResult:
    params: NetworkParams
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False


def evaluate_mse(params: NetworkParams, inputs: np.ndarray, targets: np.ndarray, batch_size: int = 512) -> float:
    total = 0.0
    for s in range(0, inputs.shape[0], batch_size):
        y, _ = forward(params, inputs[s:s + batch_size], keep_cache=False)
        d = y.astype(np.float64) - targets[s:s + batch_size]
        total += float(np.sum(d * d))
    return total / targets.size


def _clip(grads: list[np.ndarray], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


def train(params: NetworkParams, train_inputs: np.ndarray, train_targets: np.ndarray,
          val_inputs: np.ndarray, val_targets: np.ndarray, config: TrainConfig = TrainConfig(),
          on_epoch=None) -> TrainResult:
    """Mini-batch Adam on the MSE with early stopping on validation MSE.

    Sequences are reshuffled every epoch; the last partial batch is kept.
    Training stops once validation MSE has not improved for ``patience``
    consecutive epochs and the best-validation parameters are returned.
    """
    n = train_inputs.shape[0]
    if n == 0 or val_inputs.shape[0] == 0:
        raise InvalidArgumentError("training and validation sets must be non-empty")
    params = params.copy()
    arrays = params.arrays()
    state = AdamState.zeros_like(arrays, lr=config.lr)
    rng = np.random.default_rng(config.seed)
    result = TrainResult(params.copy())
    best = np.inf
    wait = 0
    started = time.monotonic()
    previous = slowest = 0.0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        weighted = 0.0
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            loss, grads = loss_and_grads(params, train_inputs[idx], train_targets[idx])
            if not np.isfinite(loss):
                norm = float(np.sqrt(sum(float(np.sum(np.nan_to_num(g, nan=0.0, posinf=0.0, neginf=0.0) ** 2)) for g in grads)))
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {s // config.batch_size} "
                    f"(finite part of gradient norm {norm:.3g}, step {params.trained_steps})"
                )
            if config.clip_norm is not None:
                _clip(grads, config.clip_norm)
            adam_step(arrays, grads, state)
            params.trained_steps += 1
            weighted += loss * idx.size
        val = evaluate_mse(params, val_inputs, val_targets, config.batch_size)
        record = EpochRecord(epoch, weighted / n, val)
        result.history.append(record)
        log.info("epoch %d  train %.5f  val %.5f", epoch, record.train_mse, val)
        if on_epoch is not None:
            on_epoch(record)
        if val < best:
            best = val
            wait = 0
            result.params = params.copy()
            result.best_epoch = epoch
        else:
            wait += 1
            if wait >= config.patience:
                result.stopped_early = True
                break
        if config.max_seconds is not None:
            # stop unless another epoch as long as the slowest so far still fits
            elapsed = time.monotonic() - started
            slowest = max(slowest, elapsed - previous)
            previous = elapsed
            if elapsed + slowest > config.max_seconds:
                log.warning("stopping after epoch %d: time budget of %.0f s reached", epoch, config.max_seconds)
                break
    return result


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(params: NetworkParams, path) -> None:
    """Write ``NPSD`` v1: magic, u32 version, u32 dims (I, H1, H2, 1), arrays as
    little-endian float32 in (W1, U1, b1, W2, U2, b2, w_d, b_d) order, then the
    u64 trained-step counter and u64 seed."""
    if len(params.layers) != 2:
        raise InvalidArgumentError("checkpoint format stores exactly two LSTM layers")
    i, h1, h2 = params.dims
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<5I", CKPT_VERSION, i, h1, h2, 1))
        for a in params.arrays():
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
        fh.write(struct.pack("<QQ", params.trained_steps, params.seed))


def load_checkpoint(path) -> NetworkParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 24 or blob[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not an NPSD checkpoint")
    version, i, h1, h2, out = struct.unpack("<5I", blob[4:24])
    if version != CKPT_VERSION:
        raise UnsupportedVersionError(f"{path}: checkpoint version {version} is not supported")
    if out != 1 or min(i, h1, h2) < 1:
        raise FormatError(f"{path}: invalid dims {(i, h1, h2, out)}")
    shapes = [(4 * h1, i), (4 * h1, h1), (4 * h1,), (4 * h2, h1), (4 * h2, h2), (4 * h2,), (h2,), (1,)]
    n_floats = sum(int(np.prod(s)) for s in shapes)
    expected = 24 + 4 * n_floats + 16
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(blob)} (truncated or corrupt)")
    flat = np.frombuffer(blob, dtype="<f4", count=n_floats, offset=24).astype(np.float32)
    arrays, pos = [], 0
    for s in shapes:
        size = int(np.prod(s))
        arrays.append(flat[pos:pos + size].reshape(s).copy())
        pos += size
    steps, seed = struct.unpack("<QQ", blob[-16:])
    layers = [LSTMLayer(*arrays[0:3]), LSTMLayer(*arrays[3:6])]
    return NetworkParams(layers, arrays[6], arrays[7], steps, seed)
