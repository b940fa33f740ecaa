"""TristouNet embedding: BiLSTM, temporal mean pooling, two tanh layers, L2 norm.

All arrays are float64.  The forward and backward passes work on batches of
equal-length sequences shaped ``(B, T, F)``; single sequences are handled by
``embed``/``embed_backward`` as a batch of one.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import FeatureSequence

GATES = ("input", "forget", "cell", "output")
FORMAT_VERSION = 1
MAGIC = b"TRSTNET\x00"


class ModelFormatError(ValueError):
    pass


class DegenerateEmbeddingError(ArithmeticError):
    pass


@dataclass
class LstmParams:
    input_weights: np.ndarray  # (4, d1, F), gate order input/forget/cell/output
    recurrent_weights: np.ndarray  # (4, d1, d1)
    biases: np.ndarray  # (4, d1)

    @property
    def units(self) -> int:
        return self.biases.shape[1]

    @property
    def input_dim(self) -> int:
        return self.input_weights.shape[2]


@dataclass
class DenseParams:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)


@dataclass
class TristouNetParams:
    forward_lstm: LstmParams
    backward_lstm: LstmParams
    dense1: DenseParams
    dense2: DenseParams

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return (
            self.forward_lstm.input_dim,
            self.forward_lstm.units,
            self.dense1.bias.shape[0],
            self.dense2.bias.shape[0],
        )

    def arrays(self) -> dict[str, np.ndarray]:
        """Name -> array view, in serialization order."""
        out = {}
        for lstm_name in ("forward_lstm", "backward_lstm"):
            lstm = getattr(self, lstm_name)
            for attr in ("input_weights", "recurrent_weights", "biases"):
                out[f"{lstm_name}.{attr}"] = getattr(lstm, attr)
        for dense_name in ("dense1", "dense2"):
            dense = getattr(self, dense_name)
            out[f"{dense_name}.weights"] = dense.weights
            out[f"{dense_name}.bias"] = dense.bias
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "TristouNetParams":
        def lstm(prefix):
            return LstmParams(*(arrays[f"{prefix}.{a}"] for a in ("input_weights", "recurrent_weights", "biases")))

        def dense(prefix):
            return DenseParams(arrays[f"{prefix}.weights"], arrays[f"{prefix}.bias"])

        params = cls(lstm("forward_lstm"), lstm("backward_lstm"), dense("dense1"), dense("dense2"))
        validate_params(params)
        return params

    def map(self, fn) -> "TristouNetParams":
        return TristouNetParams.from_arrays({k: fn(v) for k, v in self.arrays().items()})

    def copy(self) -> "TristouNetParams":
        return self.map(np.array)

    def zeros_like(self) -> "TristouNetParams":
        return self.map(np.zeros_like)

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays().values())


# gradients share the parameter layout
Gradients = TristouNetParams


def validate_params(params: TristouNetParams) -> None:
    f, d1, d2, d = params.dims
    expected = {
        "forward_lstm.input_weights": (4, d1, f),
        "forward_lstm.recurrent_weights": (4, d1, d1),
        "forward_lstm.biases": (4, d1),
        "dense1.weights": (d2, 2 * d1),
        "dense1.bias": (d2,),
        "dense2.weights": (d, d2),
        "dense2.bias": (d,),
    }
    for prefix in ("forward_lstm", "backward_lstm"):
        for suffix in ("input_weights", "recurrent_weights", "biases"):
            expected[f"{prefix}.{suffix}"] = expected[f"forward_lstm.{suffix}"]
    for name, array in params.arrays().items():
        if array.shape != expected[name]:
            raise ModelFormatError(f"{name}: shape {array.shape}, expected {expected[name]}")


def _glorot(rng, fan_out, fan_in, size):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=size)


def _orthogonal(rng, n):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def _init_lstm(rng, input_dim, units) -> LstmParams:
    biases = np.zeros((4, units))
    biases[1] = 1.0
    return LstmParams(
        _glorot(rng, units, input_dim, (4, units, input_dim)),
        np.stack([_orthogonal(rng, units) for _ in GATES]),
        biases,
    )


def init_params(dims=(35, 16, 16, 16), rng: np.random.Generator | int | None = 0) -> TristouNetParams:
    """Glorot-uniform input/dense weights, orthogonal recurrent weights, forget bias 1."""
    f, d1, d2, d = dims
    if min(dims) < 1:
        raise ValueError(f"dims must be positive, got {dims}")
    rng = np.random.default_rng(rng)
    return TristouNetParams(
        _init_lstm(rng, f, d1),
        _init_lstm(rng, f, d1),
        DenseParams(_glorot(rng, d2, 2 * d1, (d2, 2 * d1)), np.zeros(d2)),
        DenseParams(_glorot(rng, d, d2, (d, d2)), np.zeros(d)),
    )


def parameter_count(dims) -> int:
    f, d1, d2, d = dims
    return 2 * 4 * (d1 * f + d1 * d1 + d1) + (d2 * 2 * d1 + d2) + (d * d2 + d)


# --- LSTM ----------------------------------------------------------------------
#
# Several LSTMs reading the same input run in lockstep: arrays carry a leading
# "stack" axis K (K = 2 for the forward/backward pair of the embedding).
# Sigmoid gates are computed as 0.5 + 0.5 tanh(a / 2) so that one tanh call
# covers all four gates.

@dataclass
class LstmCache:
    inputs: np.ndarray  # (K, T, B, F) in processing order
    gates: np.ndarray  # (K, T, B, 4 d1) activations
    cells: np.ndarray  # (K, T + 1, B, d1), cells[:, 0] = 0
    tanh_cells: np.ndarray  # (K, T, B, d1)
    hidden: np.ndarray  # (K, T + 1, B, d1), hidden[:, 0] = 0
    reverse: tuple[bool, ...]


def _as_batch(x) -> np.ndarray:
    if isinstance(x, FeatureSequence):
        x = x.frames
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1] < 1:
        raise ValueError(f"expected (T, F) or (B, T, F) input, got shape {x.shape}")
    return x


def _gate_affine(d: int) -> tuple[np.ndarray, np.ndarray]:
    scale = np.full(4 * d, 0.5)
    scale[2 * d:3 * d] = 1.0
    offset = np.full(4 * d, 0.5)
    offset[2 * d:3 * d] = 0.0
    return scale, offset


def _stacked_forward(lstms, x: np.ndarray, reverse) -> tuple[np.ndarray, LstmCache]:
    batch, steps, dim = x.shape
    for p in lstms:
        if p.input_dim != dim:
            raise ValueError(f"input has {dim} features, LSTM expects {p.input_dim}")
    d = lstms[0].units
    k = len(lstms)
    scale, offset = _gate_affine(d)
    w = np.stack([p.input_weights.reshape(4 * d, dim).T for p in lstms]) * scale
    u = np.stack([p.recurrent_weights.reshape(4 * d, d).T for p in lstms]) * scale
    b = np.stack([p.biases.reshape(-1) for p in lstms]) * scale

    time_major = np.swapaxes(x, 0, 1)
    inputs = np.stack([time_major[::-1] if r else time_major for r in reverse])
    projected = (inputs.reshape(k, steps * batch, dim) @ w).reshape(k, steps, batch, 4 * d)
    projected += b[:, None, None, :]

    gates = np.empty((k, steps, batch, 4 * d))
    cells = np.zeros((k, steps + 1, batch, d))
    tanh_cells = np.empty((k, steps, batch, d))
    hidden = np.zeros((k, steps + 1, batch, d))
    for t in range(steps):
        g = np.tanh(projected[:, t] + hidden[:, t] @ u)
        g *= scale
        g += offset
        gates[:, t] = g
        c = cells[:, t + 1]
        np.multiply(g[..., d:2 * d], cells[:, t], out=c)
        c += g[..., :d] * g[..., 2 * d:3 * d]
        tc = tanh_cells[:, t]
        np.tanh(c, out=tc)
        np.multiply(g[..., 3 * d:], tc, out=hidden[:, t + 1])

    outputs = hidden[:, 1:].copy()
    for j, r in enumerate(reverse):
        if r:
            outputs[j] = outputs[j, ::-1]
    cache = LstmCache(inputs, gates, cells, tanh_cells, hidden, tuple(reverse))
    return np.swapaxes(outputs, 1, 2), cache


def _stacked_backward(lstms, cache: LstmCache, grad_outputs: np.ndarray) -> list[LstmParams]:
    """``grad_outputs`` is ``(K, B, T, d1)`` in original time order."""
    d = lstms[0].units
    k, steps, batch, _ = cache.gates.shape
    u = np.stack([p.recurrent_weights.reshape(4 * d, d) for p in lstms])
    grad_h = np.swapaxes(grad_outputs, 1, 2).copy()
    for j, r in enumerate(cache.reverse):
        if r:
            grad_h[j] = grad_h[j, ::-1]

    g = cache.gates
    i, f, c, o = g[..., :d], g[..., d:2 * d], g[..., 2 * d:3 * d], g[..., 3 * d:]
    tc = cache.tanh_cells
    # local derivatives of the pre-activations, multiplied by dc (first three) or dh (last)
    local = np.concatenate([
        c * i * (1.0 - i),
        cache.cells[:, :-1] * f * (1.0 - f),
        i * (1.0 - c * c),
        tc * o * (1.0 - o),
    ], axis=-1)
    cell_from_h = o * (1.0 - tc * tc)

    grad_pre = np.empty((k, steps, batch, 4 * d))
    dh_next = np.zeros((k, batch, d))
    dc_next = np.zeros((k, batch, d))
    for t in range(steps - 1, -1, -1):
        dh = grad_h[:, t] + dh_next
        dc = dh * cell_from_h[:, t]
        dc += dc_next
        da = np.concatenate([dc, dc, dc, dh], axis=-1)
        da *= local[:, t]
        grad_pre[:, t] = da
        dc_next = dc * f[:, t]
        dh_next = da @ u

    flat = grad_pre.reshape(k, steps * batch, 4 * d)
    grad_w = np.swapaxes(flat, 1, 2) @ cache.inputs.reshape(k, steps * batch, -1)
    grad_u = np.swapaxes(flat, 1, 2) @ cache.hidden[:, :-1].reshape(k, steps * batch, d)
    grad_b = flat.sum(axis=1)
    return [
        LstmParams(grad_w[j].reshape(p.input_weights.shape), grad_u[j].reshape(p.recurrent_weights.shape),
                   grad_b[j].reshape(p.biases.shape))
        for j, p in enumerate(lstms)
    ]


def lstm_forward(p: LstmParams, x, reverse: bool = False) -> tuple[np.ndarray, LstmCache]:
    """Run one LSTM over ``x`` (``(T, F)`` or ``(B, T, F)``) from a zero state.

    With ``reverse`` the recurrence runs from the last frame to the first;
    outputs are always returned in the original time order, shaped ``(B, T, d1)``.
    """
    outputs, cache = _stacked_forward([p], _as_batch(x), (reverse,))
    return outputs[0], cache


def lstm_backward(p: LstmParams, cache: LstmCache, grad_outputs: np.ndarray) -> LstmParams:
    """Backpropagation through time; ``grad_outputs`` is ``(B, T, d1)`` in original order.

    Returns parameter gradients summed over the batch.
    """
    return _stacked_backward([p], cache, np.asarray(grad_outputs)[None])[0]


def average_pool(outputs: np.ndarray) -> np.ndarray:
    """Mean over the time axis (second to last)."""
    return np.mean(outputs, axis=-2)


# --- full network ----------------------------------------------------------------

@dataclass
class ForwardCache:
    params: TristouNetParams
    lstm: LstmCache  # forward and backward LSTMs stacked
    pooled: np.ndarray  # (B, 2 d1)
    hidden1: np.ndarray  # (B, d2), after tanh
    hidden2: np.ndarray  # (B, d), after tanh, before normalization
    norms: np.ndarray  # (B,)
    output: np.ndarray  # (B, d)
    single: bool = field(default=False)


def embed_batch(p: TristouNetParams, x) -> tuple[np.ndarray, ForwardCache]:
    """Embed a batch of equal-length sequences, ``(B, T, F) -> (B, d)`` unit vectors."""
    x = _as_batch(x)
    outputs, lstm_cache = _stacked_forward([p.forward_lstm, p.backward_lstm], x, (False, True))
    pooled = np.concatenate([average_pool(outputs[0]), average_pool(outputs[1])], axis=1)
    hidden1 = np.tanh(pooled @ p.dense1.weights.T + p.dense1.bias)
    hidden2 = np.tanh(hidden1 @ p.dense2.weights.T + p.dense2.bias)
    norms = np.linalg.norm(hidden2, axis=1)
    if np.any(norms < 1e-12):
        raise DegenerateEmbeddingError("pre-normalization embedding has (near) zero norm")
    output = hidden2 / norms[:, None]
    return output, ForwardCache(p, lstm_cache, pooled, hidden1, hidden2, norms, output)


def embed(p: TristouNetParams, x) -> tuple[np.ndarray, ForwardCache]:
    """Embed one sequence (``FeatureSequence`` or ``(T, F)`` array) onto the unit sphere.

    A 3-D input is treated as a batch and returns ``(B, d)``.
    """
    single = np.ndim(x.frames if isinstance(x, FeatureSequence) else x) == 2
    output, cache = embed_batch(p, x)
    cache.single = single
    return (output[0] if single else output), cache


def embed_many(p: TristouNetParams, sequences, batch_size: int = 256) -> np.ndarray:
    """Embeddings of a ``(N, T, F)`` array without keeping caches."""
    sequences = _as_batch(sequences)
    chunks = [embed_batch(p, sequences[i:i + batch_size])[0] for i in range(0, len(sequences), batch_size)]
    return np.concatenate(chunks) if chunks else np.zeros((0, p.dims[3]))


def embed_backward(cache: ForwardCache, grad_output: np.ndarray) -> Gradients:
    """Gradients of ``sum_b <grad_output[b], embed(x_b)>`` w.r.t. every parameter."""
    p = cache.params
    g = np.asarray(grad_output, dtype=np.float64)
    if g.ndim == 1:
        g = g[None]
    y = cache.output
    # through y = z / |z|
    grad_z = (g - y * np.sum(g * y, axis=1, keepdims=True)) / cache.norms[:, None]
    grad_pre2 = grad_z * (1.0 - cache.hidden2 ** 2)
    grad_dense2 = DenseParams(grad_pre2.T @ cache.hidden1, grad_pre2.sum(axis=0))
    grad_pre1 = (grad_pre2 @ p.dense2.weights) * (1.0 - cache.hidden1 ** 2)
    grad_dense1 = DenseParams(grad_pre1.T @ cache.pooled, grad_pre1.sum(axis=0))
    grad_pooled = grad_pre1 @ p.dense1.weights

    d1 = p.forward_lstm.units
    steps = cache.lstm.gates.shape[1]
    # mean pooling spreads the gradient uniformly over time
    per_direction = np.stack([grad_pooled[:, :d1], grad_pooled[:, d1:]]) / steps
    spread = np.broadcast_to(per_direction[:, :, None, :], (2, len(g), steps, d1))
    grads = _stacked_backward([p.forward_lstm, p.backward_lstm], cache.lstm, spread)
    return TristouNetParams(grads[0], grads[1], grad_dense1, grad_dense2)


# --- serialization ----------------------------------------------------------------

def save_params(params: TristouNetParams, path, extra: dict[str, np.ndarray] | None = None,
                meta: dict | None = None) -> None:
    """Write the model file: magic, uint64 header length, JSON header, float64 blob.

    ``extra`` arrays (e.g. optimizer accumulators) are appended to the blob
    and listed in the manifest under their own names.
    """
    arrays = dict(params.arrays())
    for name, array in (extra or {}).items():
        arrays[f"extra.{name}"] = array
    manifest, offset = [], 0
    for name, array in arrays.items():
        manifest.append({"name": name, "shape": list(array.shape), "offset": offset})
        offset += array.size * 8
    header = {
        "format_version": FORMAT_VERSION,
        "dims": list(params.dims),
        "dtype": "<f8",
        "blob_bytes": offset,
        "parameters": manifest,
        "meta": meta or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays.values())
    Path(path).write_bytes(MAGIC + struct.pack("<Q", len(header_bytes)) + header_bytes + blob)


def read_model_file(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a model file into its header and every stored array."""
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != MAGIC:
        raise ModelFormatError(f"{path}: not a model file")
    (header_len,) = struct.unpack("<Q", data[8:16])
    if 16 + header_len > len(data):
        raise ModelFormatError(f"{path}: truncated header")
    try:
        header = json.loads(data[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{path}: corrupt header") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise ModelFormatError(f"{path}: unsupported format_version {header.get('format_version')}")
    blob = data[16 + header_len:]
    if len(blob) != header["blob_bytes"]:
        raise ModelFormatError(f"{path}: truncated blob ({len(blob)} of {header['blob_bytes']} bytes)")
    arrays = {}
    for entry in header["parameters"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        chunk = blob[start:start + 8 * count]
        if len(chunk) != 8 * count:
            raise ModelFormatError(f"{path}: array {entry['name']} out of bounds")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(entry["shape"])
    return header, arrays


def load_params(path, input_dim: int | None = None) -> TristouNetParams:
    header, arrays = read_model_file(path)
    params = TristouNetParams.from_arrays({k: v for k, v in arrays.items() if not k.startswith("extra.")})
    if tuple(header["dims"]) != params.dims:
        raise ModelFormatError(f"{path}: header dims {header['dims']} disagree with arrays {params.dims}")
    if input_dim is not None and params.dims[0] != input_dim:
        raise ModelFormatError(f"{path}: model expects {params.dims[0]} features, got {input_dim}")
    for name, array in arrays.items():
        if not np.all(np.isfinite(array)):
            raise ModelFormatError(f"{path}: non-finite values in {name}")
    return params
