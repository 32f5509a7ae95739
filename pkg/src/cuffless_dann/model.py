"""Feature extractor, two-head BP estimator and domain classifier.

Parameters are addressed by dotted names whose first component is the
partition: ``theta_f`` (LSTM + shared dense), ``theta_bp`` (both regression
heads) and ``theta_d`` (domain classifier).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import CheckpointError, DimensionError, InputError
from .numkernel import (
    DenseLayer,
    DropoutSpec,
    LstmLayer,
    OptimizerState,
    dense_backward,
    dense_forward,
    dropout_apply,
    dropout_backward,
    grad_reverse,
    lstm_backward,
    lstm_forward,
    optimizer_step,
)

DBP, SBP = 0, 1
PARTITIONS = ("theta_f", "theta_bp", "theta_d")
PROB_FLOOR = 1e-12


@dataclass
class ModelConfig:
    n_features: int = 9
    lstm_hidden: int = 30
    shared_width: int = 30
    head_hidden: int = 30
    head_layers: int = 3
    domain_hidden: int = 30
    n_domains: int = 2
    dropout: float = 0.2
    shared_activation: str = "relu"
    head_activation: str = "relu"
    domain_activation: str = "relu"

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class FeatureExtractor:
    lstm: LstmLayer
    shared: DenseLayer
    dropout: float = 0.2

    @property
    def width(self) -> int:
        return self.shared.n_out

    def parameters(self) -> dict[str, np.ndarray]:
        return {
            "lstm.weights": self.lstm.weights,
            "lstm.bias": self.lstm.bias,
            "shared.weights": self.shared.weights,
            "shared.bias": self.shared.bias,
        }


@dataclass
class BpEstimator:
    dia: list[DenseLayer]
    sys: list[DenseLayer]
    dropout: float = 0.2

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for head_name, head in (("dia", self.dia), ("sys", self.sys)):
            for k, layer in enumerate(head):
                out[f"{head_name}.{k}.weights"] = layer.weights
                out[f"{head_name}.{k}.bias"] = layer.bias
        return out


@dataclass
class DomainClassifier:
    layers: list[DenseLayer]

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for k, layer in enumerate(self.layers):
            out[f"{k}.weights"] = layer.weights
            out[f"{k}.bias"] = layer.bias
        return out


@dataclass
class LossBundle:
    bp: float
    domain: float
    lam: float


@dataclass
class Batch:
    """One adversarial mini-batch.

    ``y`` holds normalized (dbp, sbp) targets; rows with ``bp_mask`` False carry
    no BP label. ``domain`` holds integer domain labels for every row.
    """

    x: np.ndarray
    y: np.ndarray
    domain: np.ndarray
    bp_mask: np.ndarray | None = None

    def __post_init__(self):
        if self.bp_mask is None:
            self.bp_mask = np.ones(len(self.x), dtype=bool)


# --------------------------------------------------------------------------
# Forward/backward pieces
# --------------------------------------------------------------------------


def extract_features(fe: FeatureExtractor, x: np.ndarray, mode: str = "eval", rng=None):
    """LSTM final state -> dropout -> shared dense. Returns ``(features, cache)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.shape[-1] != fe.lstm.n_in:
        raise InputError(f"beats must have {fe.lstm.n_in} feature columns, got {x.shape[-1]}")
    h, lstm_cache = lstm_forward(fe.lstm, x)
    h_drop, mask = dropout_apply(DropoutSpec(fe.dropout, mode), h, rng)
    feat, shared_cache = dense_forward(fe.shared, h_drop)
    return feat, (lstm_cache, mask, shared_cache)


def features_backward(fe: FeatureExtractor, cache, upstream) -> dict[str, np.ndarray]:
    lstm_cache, mask, shared_cache = cache
    gs = dense_backward(fe.shared, shared_cache, upstream)
    gl = lstm_backward(fe.lstm, lstm_cache, dropout_backward(mask, gs.input))
    return {
        "lstm.weights": gl.params["weights"],
        "lstm.bias": gl.params["bias"],
        "shared.weights": gs.params["weights"],
        "shared.bias": gs.params["bias"],
    }


def _head_forward(layers, dropout, x, mode, rng):
    caches = []
    for k, layer in enumerate(layers):
        x, c = dense_forward(layer, x)
        mask = None
        if k < len(layers) - 1:
            x, mask = dropout_apply(DropoutSpec(dropout, mode), x, rng)
        caches.append((c, mask))
    return x, caches


def _head_backward(layers, caches, g, prefix, grads):
    for k in range(len(layers) - 1, -1, -1):
        c, mask = caches[k]
        lg = dense_backward(layers[k], c, dropout_backward(mask, g))
        grads[f"{prefix}.{k}.weights"] = lg.params["weights"]
        grads[f"{prefix}.{k}.bias"] = lg.params["bias"]
        g = lg.input
    return g


def estimate_bp(est: BpEstimator, features: np.ndarray, mode: str = "eval", rng=None):
    """Both heads on the same features. Returns ``(pred, cache)`` with
    ``pred[:, DBP]`` and ``pred[:, SBP]``."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[None]
    if features.shape[-1] != est.dia[0].n_in or features.shape[-1] != est.sys[0].n_in:
        raise DimensionError(f"heads expect {est.dia[0].n_in} features, got {features.shape[-1]}")
    d, dcache = _head_forward(est.dia, est.dropout, features, mode, rng)
    s, scache = _head_forward(est.sys, est.dropout, features, mode, rng)
    return np.concatenate([d, s], axis=1), (dcache, scache)


def estimate_backward(est: BpEstimator, cache, grad_pred):
    """Gradients for ``theta_bp`` plus the gradient w.r.t. the features."""
    dcache, scache = cache
    grads: dict[str, np.ndarray] = {}
    g_feat = _head_backward(est.dia, dcache, grad_pred[:, DBP : DBP + 1], "dia", grads)
    g_feat = g_feat + _head_backward(est.sys, scache, grad_pred[:, SBP : SBP + 1], "sys", grads)
    return grads, g_feat


def classify_domain(dc: DomainClassifier, features: np.ndarray):
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[None]
    if features.shape[-1] != dc.layers[0].n_in:
        raise DimensionError(f"classifier expects {dc.layers[0].n_in} features, got {features.shape[-1]}")
    caches = []
    x = features
    for layer in dc.layers:
        x, c = dense_forward(layer, x)
        caches.append(c)
    return x, caches


def classify_backward(dc: DomainClassifier, caches, grad_probs):
    grads: dict[str, np.ndarray] = {}
    g = grad_probs
    for k in range(len(dc.layers) - 1, -1, -1):
        lg = dense_backward(dc.layers[k], caches[k], g)
        grads[f"{k}.weights"] = lg.params["weights"]
        grads[f"{k}.bias"] = lg.params["bias"]
        g = lg.input
    return grads, g


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------


def bp_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Sum over samples of squared systolic plus squared diastolic error."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise InputError(f"prediction shape {pred.shape} != target shape {target.shape}")
    return float(np.sum((pred - target) ** 2))


def bp_loss_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    return 2.0 * (pred - target)


def _check_labels(probs, labels):
    labels = np.asarray(labels)
    if labels.shape != (probs.shape[0],):
        raise InputError("need exactly one domain label per row")
    if not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise InputError(f"domain labels must be integers in [0, {probs.shape[1]})")
    return labels


def domain_loss(probs: np.ndarray, labels) -> float:
    """Mean cross-entropy with probabilities clamped at 1e-12."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    labels = _check_labels(probs, labels)
    p = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(p, PROB_FLOOR))))


def domain_loss_grad(probs: np.ndarray, labels) -> np.ndarray:
    labels = _check_labels(probs, labels)
    n = len(labels)
    rows = np.arange(n)
    p = probs[rows, labels]
    g = np.zeros_like(probs)
    g[rows, labels] = np.where(p > PROB_FLOOR, -1.0 / (n * np.maximum(p, PROB_FLOOR)), 0.0)
    return g


# --------------------------------------------------------------------------
# Whole network
# --------------------------------------------------------------------------


class DannNet:
    """Feature extractor + BP estimator + domain classifier."""

    def __init__(self, config: ModelConfig, fe: FeatureExtractor, est: BpEstimator, dc: DomainClassifier):
        self.config = config
        self.fe = fe
        self.est = est
        self.dc = dc

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator) -> "DannNet":
        c = config
        fe = FeatureExtractor(
            LstmLayer.init(rng, c.n_features, c.lstm_hidden),
            DenseLayer.init(rng, c.lstm_hidden, c.shared_width, c.shared_activation),
            c.dropout,
        )

        def head():
            widths = [c.shared_width] + [c.head_hidden] * (c.head_layers - 1) + [1]
            acts = [c.head_activation] * (c.head_layers - 1) + ["identity"]
            return [DenseLayer.init(rng, widths[k], widths[k + 1], acts[k]) for k in range(c.head_layers)]

        est = BpEstimator(head(), head(), c.dropout)
        dc = cls.fresh_classifier(c, rng)
        return cls(config, fe, est, dc)

    @staticmethod
    def fresh_classifier(c: ModelConfig, rng) -> DomainClassifier:
        return DomainClassifier(
            [
                DenseLayer.init(rng, c.shared_width, c.domain_hidden, c.domain_activation),
                DenseLayer.init(rng, c.domain_hidden, c.n_domains, "softmax"),
            ]
        )

    def reset_classifier(self, rng) -> None:
        self.dc = self.fresh_classifier(self.config, rng)

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for part, mod in zip(PARTITIONS, (self.fe, self.est, self.dc)):
            for name, arr in mod.parameters().items():
                out[f"{part}.{name}"] = arr
        return out

    def partition(self, part: str) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.parameters().items() if k.startswith(part + ".")}

    def n_parameters(self) -> int:
        return sum(a.size for a in self.parameters().values())

    def copy(self) -> "DannNet":
        other = DannNet.init(self.config, np.random.default_rng(0))
        other.load_parameters({k: v.copy() for k, v in self.parameters().items()})
        return other

    def load_parameters(self, params: dict[str, np.ndarray], partitions=PARTITIONS) -> None:
        """Copy values into this network's arrays (shapes must match)."""
        own = self.parameters()
        for name, arr in own.items():
            if name.split(".", 1)[0] not in partitions:
                continue
            if name not in params:
                raise CheckpointError(f"checkpoint lacks parameter {name!r}")
            src = np.asarray(params[name])
            if src.shape != arr.shape:
                raise CheckpointError(f"shape mismatch for {name!r}: {src.shape} vs {arr.shape}")
            arr[...] = src

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Eval-mode (normalized) predictions, shape ``(N, 2)``."""
        out = []
        for start in range(0, len(x), batch_size):
            feat, _ = extract_features(self.fe, x[start : start + batch_size], "eval")
            pred, _ = estimate_bp(self.est, feat, "eval")
            out.append(pred)
        return np.concatenate(out, axis=0) if out else np.zeros((0, 2))

    def features(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = [extract_features(self.fe, x[s : s + batch_size], "eval")[0] for s in range(0, len(x), batch_size)]
        return np.concatenate(out, axis=0)


def _prefixed(prefix, grads):
    return {f"{prefix}.{k}": v for k, v in grads.items()}


def mtl_gradients(net: DannNet, x, y, mode="train", rng=None):
    """Loss and gradients of the summed BP loss for ``theta_f`` and ``theta_bp``."""
    feat, fcache = extract_features(net.fe, x, mode, rng)
    pred, ecache = estimate_bp(net.est, feat, mode, rng)
    loss = bp_loss(pred, y)
    g_est, g_feat = estimate_backward(net.est, ecache, bp_loss_grad(pred, y))
    grads = _prefixed("theta_bp", g_est)
    grads.update(_prefixed("theta_f", features_backward(net.fe, fcache, g_feat)))
    return loss, grads


def mtl_step(net: DannNet, x, y, opt: OptimizerState, rng) -> float:
    """One plain multitask update of ``theta_f`` and ``theta_bp``."""
    loss, grads = mtl_gradients(net, x, y, "train", rng)
    optimizer_step(opt, net.parameters(), grads)
    return loss


def adversarial_gradients(net: DannNet, batch: Batch, lam: float, mode="train", rng=None):
    """Joint gradients for one batch without applying them.

    ``theta_bp`` gets dL_bp, ``theta_d`` gets dL_d, and ``theta_f`` gets
    dL_bp - lam * dL_d through the reversal layer.
    """
    mask = np.asarray(batch.bp_mask, dtype=bool)
    if not mask.any():
        raise InputError("adversarial batch has no BP-labeled samples")
    domain = np.asarray(batch.domain)
    if domain.size != len(batch.x) or len(np.unique(domain)) < 2:
        raise InputError("adversarial batch needs domain labels from at least two domains")

    feat, fcache = extract_features(net.fe, batch.x, mode, rng)
    pred, ecache = estimate_bp(net.est, feat, mode, rng)
    y = np.asarray(batch.y, dtype=np.float64)
    diff_pred = np.where(mask[:, None], pred, 0.0)
    diff_y = np.where(mask[:, None], y, 0.0)
    l_bp = bp_loss(diff_pred, diff_y)
    g_est, g_feat_bp = estimate_backward(net.est, ecache, bp_loss_grad(diff_pred, diff_y))

    probs, ccache = classify_domain(net.dc, feat)
    l_d = domain_loss(probs, domain)
    g_dc, g_feat_d = classify_backward(net.dc, ccache, domain_loss_grad(probs, domain))

    g_feat = g_feat_bp + grad_reverse(g_feat_d, lam)
    grads = _prefixed("theta_bp", g_est)
    grads.update(_prefixed("theta_d", g_dc))
    grads.update(_prefixed("theta_f", features_backward(net.fe, fcache, g_feat)))
    return LossBundle(l_bp, l_d, lam), grads


def adversarial_step(net: DannNet, batch: Batch, opt: OptimizerState, lam: float, rng) -> LossBundle:
    """Apply one joint update; returns the losses measured before it."""
    losses, grads = adversarial_gradients(net, batch, lam, "train", rng)
    optimizer_step(opt, net.parameters(), grads)
    return losses


def model_meta(net: DannNet) -> dict:
    return {"model_config": asdict(net.config)}


def net_from_params(params: dict[str, np.ndarray], meta: dict) -> DannNet:
    if "model_config" not in meta:
        raise CheckpointError("checkpoint metadata lacks model_config")
    net = DannNet.init(ModelConfig.from_dict(meta["model_config"]), np.random.default_rng(0))
    net.load_parameters(params)
    return net
