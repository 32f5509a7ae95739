"""Independent reference implementations used as test oracles."""

import math
from dataclasses import replace

import numpy as np

from cuffless_dann.dataio import fit_normalizer, stack_beats
from cuffless_dann.model import DannNet, mtl_step
from cuffless_dann.numkernel import OptimizerState
from cuffless_dann.train import _rngs, balanced_batches


def ref_sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def ref_lstm(weights, bias, seq):
    """Step-by-step recurrence on one sequence, one gate at a time."""
    hidden = weights.shape[1]
    h = np.zeros(hidden)
    c = np.zeros(hidden)
    for x_t in seq:
        z = np.concatenate([x_t, h])
        i = ref_sigmoid(weights[0] @ z + bias[0])
        f = ref_sigmoid(weights[1] @ z + bias[1])
        o = ref_sigmoid(weights[2] @ z + bias[2])
        g = np.tanh(weights[3] @ z + bias[3])
        c = f * c + i * g
        h = o * np.tanh(c)
    return h


def brute_rmse(p, t):
    total = 0.0
    for a, b in zip(p, t):
        total += (a - b) * (a - b)
    return math.sqrt(total / len(p))


def brute_pearson(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def brute_bland_altman(p, t):
    d = [a - b for a, b in zip(p, t)]
    n = len(d)
    bias = sum(d) / n
    sd = math.sqrt(sum((v - bias) ** 2 for v in d) / (n - 1))
    within = 100.0 * sum(1 for v in d if abs(v) < 10.0) / n
    return bias, sd, bias - 1.96 * sd, bias + 1.96 * sd, within


def brute_iso(dbp_pct, sbp_pct):
    return dbp_pct >= 85.0 and sbp_pct >= 85.0


def replay_phase1_as_mtl(train, source, aux, cfg, seed):
    """Pooled MTL pretraining driven by the same batches and generators as phase 1."""
    init_rng, order_rng, drop_rng, _ = _rngs(seed)
    pooled = source + aux + train
    domains = np.array([0] * len(source) + [1] * (len(aux) + len(train)))
    norm = fit_normalizer(pooled)
    x, y = stack_beats(pooled, cfg.max_len, norm)
    net = DannNet.init(replace(cfg.model, n_domains=2), init_rng)
    opt = OptimizerState(lr=cfg.lr)
    history = []
    for _ in range(cfg.epochs):
        total, count = 0.0, 0
        for idx in balanced_batches(domains, cfg.batch_size, order_rng):
            total += mtl_step(net, x[idx], y[idx], opt, drop_rng)
            count += len(idx)
        history.append(total / count)
    return net, history
