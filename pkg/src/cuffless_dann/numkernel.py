"""Small dense/recurrent network kernel with hand-written backward passes.

Everything works on float64 numpy arrays. Batches are the leading axis:
dense layers take ``(N, in)`` inputs, the LSTM takes ``(N, T, F)``
sequences (a single ``(T, F)`` sequence is treated as a batch of one).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import CheckpointError, ConfigError, DimensionError, InputError, NumericError, StateError

ACTIVATIONS = ("identity", "relu", "sigmoid", "tanh", "softmax")
CHECKPOINT_VERSION = 1


def sigmoid(x):
    # tanh form: overflow-free and cheaper than expit on small arrays
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape)


@dataclass
class LayerGradients:
    """Gradients for one layer: ``params`` mirrors the layer's parameter
    names and shapes, ``input`` is the gradient w.r.t. the layer input."""

    params: dict[str, np.ndarray]
    input: np.ndarray


# --------------------------------------------------------------------------
# Dense
# --------------------------------------------------------------------------


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise DimensionError(
                f"dense weights {self.weights.shape} and bias {self.bias.shape} are inconsistent"
            )

    @classmethod
    def init(cls, rng, n_in: int, n_out: int, activation: str = "identity") -> "DenseLayer":
        return cls(glorot_uniform(rng, (n_out, n_in), n_in, n_out), np.zeros(n_out), activation)

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]

    def parameters(self) -> dict[str, np.ndarray]:
        return {"weights": self.weights, "bias": self.bias}


def _activate(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "identity":
        return z
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "sigmoid":
        return sigmoid(z)
    if kind == "tanh":
        return np.tanh(z)
    return softmax(z)


def _activation_backward(kind: str, z: np.ndarray, y: np.ndarray, g: np.ndarray) -> np.ndarray:
    if kind == "identity":
        return g
    if kind == "relu":
        return g * (z > 0)
    if kind == "sigmoid":
        return g * y * (1.0 - y)
    if kind == "tanh":
        return g * (1.0 - y * y)
    # softmax: J^T g = y * (g - <g, y>)
    return y * (g - np.sum(g * y, axis=-1, keepdims=True))


def dense_forward(layer: DenseLayer, x: np.ndarray):
    """Return ``(activation(x @ W.T + b), cache)``; 1-D input is one sample."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[-1] != layer.n_in:
        raise DimensionError(f"dense layer expects {layer.n_in} inputs, got {x.shape[-1]}")
    z = x @ layer.weights.T + layer.bias
    y = _activate(layer.activation, z)
    return y, {"x": x, "z": z, "y": y}


def dense_backward(layer: DenseLayer, cache, upstream: np.ndarray) -> LayerGradients:
    if cache is None:
        raise StateError("dense_backward called without a forward cache")
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.ndim == 1:
        upstream = upstream[None, :]
    if upstream.shape != cache["y"].shape:
        raise DimensionError(f"upstream gradient {upstream.shape} != output {cache['y'].shape}")
    dz = _activation_backward(layer.activation, cache["z"], cache["y"], upstream)
    return LayerGradients(
        params={"weights": dz.T @ cache["x"], "bias": dz.sum(axis=0)},
        input=dz @ layer.weights,
    )


# --------------------------------------------------------------------------
# LSTM
# --------------------------------------------------------------------------

GATES = ("input", "forget", "output", "candidate")


@dataclass
class LstmLayer:
    """LSTM with gate blocks stacked along axis 0 in ``GATES`` order.

    ``weights[k]`` is ``(hidden, input + hidden)`` acting on ``[x_t, h_{t-1}]``;
    ``bias[k]`` is ``(hidden,)``.
    """

    weights: np.ndarray  # (4, H, F + H)
    bias: np.ndarray  # (4, H)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 3 or self.weights.shape[0] != 4:
            raise DimensionError(f"LSTM weights must be (4, H, F+H), got {self.weights.shape}")
        h = self.weights.shape[1]
        if self.weights.shape[2] <= h or self.bias.shape != (4, h):
            raise DimensionError("LSTM gate blocks have inconsistent shapes")

    @classmethod
    def init(cls, rng, n_in: int, hidden: int, forget_bias: float = 1.0) -> "LstmLayer":
        """Glorot-uniform weights; biases zero except the forget gate, which
        starts at ``forget_bias`` so early training keeps long-range memory."""
        w = glorot_uniform(rng, (4, hidden, n_in + hidden), n_in + hidden, hidden)
        b = np.zeros((4, hidden))
        b[GATES.index("forget")] = forget_bias
        return cls(w, b)

    @property
    def hidden(self) -> int:
        return self.weights.shape[1]

    @property
    def n_in(self) -> int:
        return self.weights.shape[2] - self.hidden

    def parameters(self) -> dict[str, np.ndarray]:
        return {"weights": self.weights, "bias": self.bias}


def lstm_forward(layer: LstmLayer, seq: np.ndarray):
    """Run the recurrence from zero state and return ``(h_T, cache)``.

    ``h_T`` has shape ``(N, H)``; the cache keeps every timestep for BPTT.
    """
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim == 2:
        seq = seq[None]
    if seq.ndim != 3:
        raise DimensionError(f"LSTM input must be (N, T, F), got shape {seq.shape}")
    n, t_len, f = seq.shape
    if t_len == 0 or n == 0:
        raise InputError("LSTM input sequence is empty")
    if f != layer.n_in:
        raise DimensionError(f"LSTM expects {layer.n_in} features, got {f}")
    hid = layer.hidden
    w = layer.weights.reshape(4 * hid, f + hid)
    w_h = w[:, f:].T.copy()
    # input projections for every timestep at once: (T, N, 4H)
    x_t = np.ascontiguousarray(seq.transpose(1, 0, 2))
    pre = (x_t.reshape(t_len * n, f) @ w[:, :f].T).reshape(t_len, n, 4 * hid) + layer.bias.reshape(4 * hid)

    acts = np.empty((t_len, n, 4 * hid))
    hs = np.empty((t_len + 1, n, hid))
    cs = np.empty((t_len + 1, n, hid))
    tcs = np.empty((t_len, n, hid))
    hs[0] = 0.0
    cs[0] = 0.0
    # one tanh call per step: sigmoid(a) = (1 + tanh(a / 2)) / 2 for the three gates
    scale = np.concatenate([np.full(3 * hid, 0.5), np.ones(hid)])
    pre *= scale
    w_h *= scale
    for t in range(t_len):
        act = acts[t]
        np.matmul(hs[t], w_h, out=act)
        act += pre[t]
        np.tanh(act, out=act)
        sig = act[:, : 3 * hid]
        sig *= 0.5
        sig += 0.5
        c = cs[t + 1]
        np.multiply(act[:, hid : 2 * hid], cs[t], out=c)
        c += act[:, :hid] * act[:, 3 * hid :]
        np.tanh(c, out=tcs[t])
        np.multiply(act[:, 2 * hid : 3 * hid], tcs[t], out=hs[t + 1])
    cache = {"x": x_t, "h": hs, "acts": acts, "c": cs, "tanh_c": tcs}
    return hs[t_len].copy(), cache


def lstm_backward(layer: LstmLayer, cache, upstream: np.ndarray) -> LayerGradients:
    """Backpropagation through time from a gradient on the final hidden state.

    The returned ``input`` gradient has shape ``(N, T, F)``.
    """
    if cache is None:
        raise StateError("lstm_backward called without a forward cache")
    x, hs, acts, cs, tcs = cache["x"], cache["h"], cache["acts"], cache["c"], cache["tanh_c"]
    t_len, n, f = x.shape
    if acts.shape[0] != t_len or cs.shape[0] != t_len + 1 or hs.shape[0] != t_len + 1 or tcs.shape[0] != t_len:
        raise StateError("LSTM cache does not cover every timestep")
    hid = layer.hidden
    if f != layer.n_in or acts.shape[2] != 4 * hid:
        raise StateError("LSTM cache was produced by a layer of a different shape")
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.ndim == 1:
        upstream = upstream[None]
    if upstream.shape != (n, hid):
        raise DimensionError(f"upstream gradient {upstream.shape} != ({n}, {hid})")
    w = layer.weights.reshape(4 * hid, f + hid)
    w_h = w[:, f:]

    i, fg, o, g = acts[..., :hid], acts[..., hid : 2 * hid], acts[..., 2 * hid : 3 * hid], acts[..., 3 * hid :]
    # local derivatives that do not depend on the recurrence
    dc_from_h = o * (1.0 - tcs * tcs)
    k_i = g * i * (1.0 - i)
    k_f = cs[:-1] * fg * (1.0 - fg)
    k_o = tcs * o * (1.0 - o)
    k_g = i * (1.0 - g * g)

    das = np.empty((t_len, n, 4 * hid))
    dh = upstream.copy()
    dc = np.zeros((n, hid))
    for t in range(t_len - 1, -1, -1):
        dc = dc + dh * dc_from_h[t]
        da = das[t]
        da[:, :hid] = dc * k_i[t]
        da[:, hid : 2 * hid] = dc * k_f[t]
        da[:, 2 * hid : 3 * hid] = dh * k_o[t]
        da[:, 3 * hid :] = dc * k_g[t]
        dc = dc * fg[t]
        dh = da @ w_h
    flat = das.reshape(t_len * n, 4 * hid)
    dw_x = flat.T @ x.reshape(t_len * n, f)
    dw_h = flat.T @ hs[:-1].reshape(t_len * n, hid)
    dw = np.concatenate([dw_x, dw_h], axis=1)
    db = flat.sum(axis=0)
    dx = (flat @ w[:, :f]).reshape(t_len, n, f).transpose(1, 0, 2)
    return LayerGradients(
        params={"weights": dw.reshape(layer.weights.shape), "bias": db.reshape(layer.bias.shape)},
        input=dx,
    )


# --------------------------------------------------------------------------
# Dropout and gradient reversal
# --------------------------------------------------------------------------


@dataclass
class DropoutSpec:
    rate: float = 0.2
    mode: str = "train"

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {self.rate}")
        if self.mode not in ("train", "eval"):
            raise ConfigError(f"dropout mode must be 'train' or 'eval', got {self.mode!r}")


def dropout_apply(spec: DropoutSpec, x: np.ndarray, rng: np.random.Generator | None):
    """Inverted dropout. Returns ``(output, mask)``; the mask is ``None`` when
    the layer is an identity (eval mode or rate 0)."""
    if spec.mode == "eval" or spec.rate == 0.0:
        return x, None
    if rng is None:
        raise StateError("dropout in train mode needs a random generator")
    keep = 1.0 - spec.rate
    mask = (rng.random(x.shape) < keep) / keep
    return x * mask, mask


def dropout_backward(mask, upstream):
    return upstream if mask is None else upstream * mask


def grad_reverse(upstream: np.ndarray, lam: float) -> np.ndarray:
    """Backward pass of the reversal layer (its forward pass is the identity)."""
    if lam < 0:
        raise ConfigError(f"reversal weight must be non-negative, got {lam}")
    return -lam * np.asarray(upstream, dtype=np.float64)


# --------------------------------------------------------------------------
# Optimizers
# --------------------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float = 1e-3
    kind: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.kind not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.kind!r}")


def optimizer_step(state: OptimizerState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
    """Descend ``grads`` in place on ``params`` (only names present in ``grads``)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    if state.kind == "sgd":
        for name, g in grads.items():
            params[name] -= state.lr * g
        return params
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# --------------------------------------------------------------------------
# Finite-difference checking
# --------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_parameter: str
    per_parameter: dict[str, float]
    tol: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def finite_diff_check(
    params: dict[str, np.ndarray],
    loss_and_grads: Callable[[], tuple[float, dict[str, np.ndarray]]],
    eps: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients against central differences, element by element.

    ``loss_and_grads`` must evaluate the loss (and its analytic gradients) at the
    current contents of ``params``; entries are perturbed in place and restored.
    The per-element relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    loss0, analytic = loss_and_grads()
    if not np.isfinite(loss0):
        raise NumericError("loss is not finite at the base point")
    per_param: dict[str, float] = {}
    count = 0
    for name, p in params.items():
        if name not in analytic:
            raise StateError(f"no analytic gradient for {name!r}")
        a = analytic[name]
        worst = 0.0
        flat = p.reshape(-1)
        a_flat = a.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            lp, _ = loss_and_grads()
            flat[k] = orig - eps
            lm, _ = loss_and_grads()
            flat[k] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NumericError(f"loss became non-finite while perturbing {name!r}")
            num = (lp - lm) / (2.0 * eps)
            denom = max(abs(a_flat[k]), abs(num), floor)
            worst = max(worst, abs(a_flat[k] - num) / denom)
            count += 1
        per_param[name] = worst
    worst_name = max(per_param, key=per_param.get) if per_param else ""
    return GradCheckReport(
        max_rel_error=per_param.get(worst_name, 0.0),
        worst_parameter=worst_name,
        per_parameter=per_param,
        tol=tol,
        n_checked=count,
    )


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------


def save_checkpoint(path, params: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    """Write named float64 arrays to an ``.npz`` container.

    Metadata travels as a JSON string under ``__meta__`` together with the
    format version; arrays are stored uncompressed so values round-trip exactly.
    """
    path = Path(path)
    payload = {"__meta__": np.array(json.dumps({"version": CHECKPOINT_VERSION, **(meta or {})}, sort_keys=True))}
    for name, arr in params.items():
        if name.startswith("__"):
            raise CheckpointError(f"reserved parameter name {name!r}")
        payload[name] = np.asarray(arr, dtype=np.float64)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with np.load(Path(path), allow_pickle=False) as data:
            meta = json.loads(str(data["__meta__"]))
            params = {k: data[k].copy() for k in data.files if k != "__meta__"}
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {meta.get('version')!r}")
    return params, meta
