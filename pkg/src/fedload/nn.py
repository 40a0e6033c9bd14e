"""LSTM + dense load forecaster written directly in numpy.

Layer stack: one LSTM layer over the look-back window, two ReLU dense
layers, and a linear output unit producing the next-hour load. Gradients
come from hand-written backpropagation through time; training uses Adam.

All trainable tensors live in a single flat float64 vector
(:class:`ParameterVector`) so that weights can be averaged, hashed and
shipped between processes without knowing the layer layout. Tensor order in
the flat vector::

    lstm.w_ih  (4H, I)   input weights, gate blocks [input, forget, cell, output]
    lstm.w_hh  (4H, H)   recurrent weights, same gate blocks
    lstm.b     (4H,)     gate biases
    fc1.w      (F1, H)   fc1.b (F1,)
    fc2.w      (F2, F1)  fc2.b (F2,)
    out.w      (1, F2)   out.b (1,)
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from fedload.data import WindowedDataset

Manifest = tuple[tuple[str, tuple[int, ...]], ...]

_HEADER_LEN = struct.Struct("<I")


class ShapeError(ValueError):
    """Weights, spec or data do not fit together."""


@dataclass(frozen=True)
class NetworkSpec:
    input_size: int = 1
    lstm_hidden: int = 20
    fc1_neurons: int = 32
    fc2_neurons: int = 85
    output_size: int = 1

    def __post_init__(self):
        for name in ("input_size", "lstm_hidden", "fc1_neurons", "fc2_neurons", "output_size"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.output_size != 1:
            raise ValueError("only single-output forecasters are supported")

    def manifest(self) -> Manifest:
        i, h = self.input_size, self.lstm_hidden
        f1, f2, o = self.fc1_neurons, self.fc2_neurons, self.output_size
        return (
            ("lstm.w_ih", (4 * h, i)),
            ("lstm.w_hh", (4 * h, h)),
            ("lstm.b", (4 * h,)),
            ("fc1.w", (f1, h)),
            ("fc1.b", (f1,)),
            ("fc2.w", (f2, f1)),
            ("fc2.b", (f2,)),
            ("out.w", (o, f2)),
            ("out.b", (o,)),
        )

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.manifest())

    @classmethod
    def from_manifest(cls, manifest: Manifest) -> NetworkSpec:
        shapes = {name: tuple(shape) for name, shape in manifest}
        try:
            four_h, i = shapes["lstm.w_ih"]
            f1, h = shapes["fc1.w"]
            f2, _ = shapes["fc2.w"]
            o, _ = shapes["out.w"]
        except (KeyError, ValueError) as exc:
            raise ShapeError(f"not a forecaster manifest: {exc}") from exc
        spec = cls(i, h, f1, f2, o)
        if spec.manifest() != tuple((n, tuple(s)) for n, s in manifest):
            raise ShapeError("manifest is inconsistent with a forecaster layout")
        return spec


@dataclass(frozen=True, eq=False)
class ParameterVector:
    """Flat, read-only weight vector plus the manifest needed to unflatten it."""

    values: np.ndarray
    manifest: Manifest

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True).ravel()
        expected = sum(int(np.prod(shape)) for _, shape in self.manifest)
        if values.size != expected:
            raise ShapeError(f"manifest describes {expected} values, got {values.size}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(
            self, "manifest", tuple((str(n), tuple(int(d) for d in s)) for n, s in self.manifest)
        )

    def __len__(self) -> int:
        return self.values.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParameterVector):
            return NotImplemented
        return self.manifest == other.manifest and np.array_equal(self.values, other.values)

    def tensors(self) -> dict[str, np.ndarray]:
        out, offset = {}, 0
        for name, shape in self.manifest:
            size = int(np.prod(shape))
            out[name] = self.values[offset : offset + size].reshape(shape)
            offset += size
        return out

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray], manifest: Manifest) -> ParameterVector:
        parts = []
        for name, shape in manifest:
            arr = np.asarray(tensors[name], dtype=np.float64)
            if arr.shape != tuple(shape):
                raise ShapeError(f"{name}: expected shape {shape}, got {arr.shape}")
            parts.append(arr.ravel())
        return cls(np.concatenate(parts), manifest)

    def with_values(self, values: np.ndarray) -> ParameterVector:
        return ParameterVector(values, self.manifest)

    def checksum(self) -> str:
        """sha256 over the manifest and the little-endian value bytes."""
        h = hashlib.sha256()
        h.update(json.dumps(self.manifest).encode())
        h.update(self.values.astype("<f8").tobytes())
        return h.hexdigest()

    def to_bytes(self, meta: dict | None = None) -> bytes:
        """uint32 header length, JSON header (manifest plus optional meta), little-endian f64 values."""
        head = {"dtype": "<f8", "manifest": self.manifest}
        if meta:
            head["meta"] = meta
        header = json.dumps(head, sort_keys=True).encode()
        return _HEADER_LEN.pack(len(header)) + header + self.values.astype("<f8").tobytes()

    @staticmethod
    def _split_blob(blob: bytes) -> tuple[dict, bytes]:
        (n,) = _HEADER_LEN.unpack_from(blob, 0)
        start = _HEADER_LEN.size
        return json.loads(blob[start : start + n].decode()), blob[start + n :]

    @classmethod
    def from_bytes(cls, blob: bytes) -> ParameterVector:
        header, body = cls._split_blob(blob)
        manifest = tuple((name, tuple(shape)) for name, shape in header["manifest"])
        return cls(np.frombuffer(body, dtype="<f8"), manifest)

    @classmethod
    def read_meta(cls, path: str | Path) -> dict:
        return cls._split_blob(Path(path).read_bytes())[0].get("meta", {})

    def save(self, path: str | Path, meta: dict | None = None) -> None:
        Path(path).write_bytes(self.to_bytes(meta))

    @classmethod
    def load(cls, path: str | Path) -> ParameterVector:
        return cls.from_bytes(Path(path).read_bytes())


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # datasets up to this many windows train full-batch
    full_batch_limit: int = 2048
    batch_size: int = 256


@dataclass(frozen=True, eq=False)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, config: AdamConfig | None = None) -> AdamState:
        config = config or AdamConfig()
        return cls(
            m=np.zeros(n), v=np.zeros(n), step=0,
            lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps,
        )


@dataclass(frozen=True, eq=False)
class TrainReport:
    losses: np.ndarray
    weights: ParameterVector
    n_samples: int
    state: AdamState = field(repr=False, default=None)


def _check(weights: ParameterVector, spec: NetworkSpec) -> dict[str, np.ndarray]:
    if weights.manifest != spec.manifest():
        raise ShapeError("weight manifest does not match network spec")
    return weights.tensors()


def init_forecaster(spec: NetworkSpec, seed: int) -> ParameterVector:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) per tensor, forget-gate bias 1.

    Fan-in is the number of inputs feeding the tensor's units; the LSTM bias
    uses input_size + lstm_hidden.
    """
    rng = np.random.default_rng(seed)
    i, h = spec.input_size, spec.lstm_hidden
    fan_in = {
        "lstm.w_ih": i, "lstm.w_hh": h, "lstm.b": i + h,
        "fc1.w": h, "fc1.b": h,
        "fc2.w": spec.fc1_neurons, "fc2.b": spec.fc1_neurons,
        "out.w": spec.fc2_neurons, "out.b": spec.fc2_neurons,
    }
    tensors = {}
    for name, shape in spec.manifest():
        bound = 1.0 / np.sqrt(fan_in[name])
        tensors[name] = rng.uniform(-bound, bound, size=shape)
    tensors["lstm.b"][h : 2 * h] = 1.0
    return ParameterVector.from_tensors(tensors, spec.manifest())


def _sigmoid_inplace(z: np.ndarray) -> np.ndarray:
    np.negative(z, out=z)
    with np.errstate(over="ignore"):
        np.exp(z, out=z)
    z += 1.0
    np.reciprocal(z, out=z)
    return z


def _as_batch(inputs, spec: NetworkSpec) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim == 2:
        x = x[:, :, None]
    if x.ndim != 3 or x.shape[2] != spec.input_size:
        raise ShapeError(f"inputs of shape {np.shape(inputs)} do not fit input_size={spec.input_size}")
    return x


def _forward(p: dict[str, np.ndarray], x: np.ndarray, keep: bool):
    """Run the network on a (batch, steps, input) array.

    Recurrent buffers are time-major. The cell-candidate block is computed as
    tanh(z) = 2*sigmoid(2z) - 1 so a single exp pass covers all four gates.
    """
    batch, steps, _ = x.shape
    hid = p["lstm.w_hh"].shape[1]
    xt = np.ascontiguousarray(x.transpose(1, 0, 2))
    gates = xt @ p["lstm.w_ih"].T + p["lstm.b"]
    w_hh_t = np.ascontiguousarray(p["lstm.w_hh"].T)
    hs = np.zeros((steps + 1, batch, hid))
    cs = np.zeros((steps + 1, batch, hid))
    tcs = np.empty((steps, batch, hid))
    rec = np.empty((batch, 4 * hid))
    ig = np.empty((batch, hid))
    cand = slice(2 * hid, 3 * hid)
    for t in range(steps):
        z = gates[t]
        np.matmul(hs[t], w_hh_t, out=rec)
        z += rec
        z[:, cand] *= 2.0
        _sigmoid_inplace(z)
        z[:, cand] *= 2.0
        z[:, cand] -= 1.0
        np.multiply(z[:, hid : 2 * hid], cs[t], out=cs[t + 1])
        np.multiply(z[:, :hid], z[:, cand], out=ig)
        cs[t + 1] += ig
        np.tanh(cs[t + 1], out=tcs[t])
        np.multiply(z[:, 3 * hid :], tcs[t], out=hs[t + 1])
    h = hs[steps]
    a1 = h @ p["fc1.w"].T + p["fc1.b"]
    r1 = np.maximum(a1, 0.0)
    a2 = r1 @ p["fc2.w"].T + p["fc2.b"]
    r2 = np.maximum(a2, 0.0)
    y = (r2 @ p["out.w"].T + p["out.b"])[:, 0]
    cache = (xt, gates, hs, cs, tcs, a1, r1, a2, r2) if keep else None
    return y, cache


def predict(weights: ParameterVector, spec: NetworkSpec, inputs) -> np.ndarray:
    """Batch forward pass; ``inputs`` is (batch, lookback) for univariate load."""
    p = _check(weights, spec)
    y, _ = _forward(p, _as_batch(inputs, spec), keep=False)
    return y


def forward(weights: ParameterVector, spec: NetworkSpec, window) -> float:
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 1 and not (window.ndim == 2 and window.shape[1] == spec.input_size):
        raise ShapeError("forward takes a single window")
    return float(predict(weights, spec, window[None, ...])[0])


def mse_loss(predicted, actual) -> float:
    predicted = np.asarray(predicted, dtype=np.float64).ravel()
    actual = np.asarray(actual, dtype=np.float64).ravel()
    if predicted.size == 0 or predicted.size != actual.size:
        raise ValueError(f"mse_loss needs equal nonzero lengths, got {predicted.size} and {actual.size}")
    return float(np.mean((actual - predicted) ** 2))


def _loss_and_grad(p: dict[str, np.ndarray], x: np.ndarray, targets: np.ndarray):
    y, (xt, gates, hs, cs, tcs, a1, r1, a2, r2) = _forward(p, x, keep=True)
    steps, batch, hid = tcs.shape
    diff = y - targets
    loss = float(np.mean(diff * diff))
    g = {}

    dy = (2.0 / batch) * diff[:, None]
    g["out.w"] = dy.T @ r2
    g["out.b"] = dy.sum(axis=0)
    da2 = (dy @ p["out.w"]) * (a2 > 0)
    g["fc2.w"] = da2.T @ r1
    g["fc2.b"] = da2.sum(axis=0)
    da1 = (da2 @ p["fc2.w"]) * (a1 > 0)
    g["fc1.w"] = da1.T @ hs[steps]
    g["fc1.b"] = da1.sum(axis=0)
    dh = da1 @ p["fc1.w"]

    w_hh = p["lstm.w_hh"]
    dzs = np.empty_like(gates)
    dc = np.zeros((batch, hid))
    for t in range(steps - 1, -1, -1):
        act = gates[t]
        i, f = act[:, :hid], act[:, hid : 2 * hid]
        gg, o = act[:, 2 * hid : 3 * hid], act[:, 3 * hid :]
        tc = tcs[t]
        dc += dh * o * (1.0 - tc * tc)
        dz = dzs[t]
        np.multiply(dc * gg, i * (1.0 - i), out=dz[:, :hid])
        np.multiply(dc * cs[t], f * (1.0 - f), out=dz[:, hid : 2 * hid])
        np.multiply(dc * i, 1.0 - gg * gg, out=dz[:, 2 * hid : 3 * hid])
        np.multiply(dh * tc, o * (1.0 - o), out=dz[:, 3 * hid :])
        dh = dz @ w_hh
        dc *= f
    flat_dz = dzs.reshape(steps * batch, 4 * hid)
    g["lstm.w_ih"] = flat_dz.T @ xt.reshape(steps * batch, -1)
    g["lstm.w_hh"] = flat_dz.T @ hs[:steps].reshape(steps * batch, hid)
    g["lstm.b"] = flat_dz.sum(axis=0)
    return loss, g


def _batch_arrays(batch) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(batch, "inputs"):
        return np.asarray(batch.inputs, dtype=np.float64), np.asarray(batch.targets, dtype=np.float64)
    batch = list(batch)
    if not batch:
        raise ValueError("empty batch")
    inputs = np.stack([np.asarray(w, dtype=np.float64) for w, _ in batch])
    targets = np.array([float(t) for _, t in batch])
    return inputs, targets


def loss_and_gradients(weights: ParameterVector, spec: NetworkSpec, batch) -> tuple[float, ParameterVector]:
    """Batch-mean MSE and its gradient. ``batch`` is a dataset or (window, target) pairs."""
    p = _check(weights, spec)
    inputs, targets = _batch_arrays(batch)
    if targets.size == 0:
        raise ValueError("empty batch")
    loss, g = _loss_and_grad(p, _as_batch(inputs, spec), targets)
    return loss, ParameterVector.from_tensors(g, weights.manifest)


def compute_gradients(weights: ParameterVector, spec: NetworkSpec, batch) -> ParameterVector:
    return loss_and_gradients(weights, spec, batch)[1]


def adam_step(
    weights: ParameterVector, gradients: ParameterVector, state: AdamState
) -> tuple[ParameterVector, AdamState]:
    g = gradients.values
    if not (len(weights) == g.size == state.m.size == state.v.size):
        raise ShapeError("weights, gradients and Adam moments differ in length")
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    m_hat = m / (1.0 - state.beta1**step)
    v_hat = v / (1.0 - state.beta2**step)
    new = weights.values - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return weights.with_values(new), replace(state, m=m, v=v, step=step)


def train(
    weights: ParameterVector,
    spec: NetworkSpec,
    dataset: WindowedDataset,
    epochs: int,
    optimizer: AdamConfig | None = None,
    seed: int = 0,
    state: AdamState | None = None,
    epoch_offset: int = 0,
) -> TrainReport:
    """Train with Adam for ``epochs`` epochs.

    Small datasets (up to ``optimizer.full_batch_limit`` windows) take one
    full-batch step per epoch; larger ones are shuffled into mini-batches
    using a generator keyed on ``(seed, epoch_offset + epoch)``. Passing the
    returned ``state`` and an advanced ``epoch_offset`` back in continues a
    run bit-for-bit, which is how federated clients resume between rounds.
    The recorded loss of an epoch is the mean MSE over its batches, each
    evaluated before that batch's update.
    """
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    optimizer = optimizer or AdamConfig()
    _check(weights, spec)
    inputs, targets = _batch_arrays(dataset)
    n = targets.size
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    x = _as_batch(inputs, spec)
    if state is None:
        state = AdamState.zeros(len(weights), optimizer)
    losses = np.empty(epochs)
    full_batch = n <= optimizer.full_batch_limit
    for e in range(epochs):
        if full_batch:
            loss, g = _loss_and_grad(weights.tensors(), x, targets)
            weights, state = adam_step(weights, ParameterVector.from_tensors(g, weights.manifest), state)
            losses[e] = loss
            continue
        order = np.random.default_rng([seed, epoch_offset + e]).permutation(n)
        total = 0.0
        for start in range(0, n, optimizer.batch_size):
            idx = order[start : start + optimizer.batch_size]
            loss, g = _loss_and_grad(weights.tensors(), x[idx], targets[idx])
            weights, state = adam_step(weights, ParameterVector.from_tensors(g, weights.manifest), state)
            total += loss * idx.size
        losses[e] = total / n
    return TrainReport(losses=losses, weights=weights, n_samples=n, state=state)
