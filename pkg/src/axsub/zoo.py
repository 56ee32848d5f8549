"""Desk-scale architectures and a one-off float trainer.

Training is a utility for producing pre-trained float weights, not part of
the substitution pipeline.
"""

from __future__ import annotations

import numpy as np

from .netsim import (AvgPool2d, BatchNorm2d, Conv2d, Flatten, Linear, MaxPool2d, ModelGraph, ReLU,
                     Add, Save, backward, ce_seed, forward, loss_ce)


def _he(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def lenet_small(input_shape=(1, 8, 8), n_classes=10, width=8, seed=0) -> ModelGraph:
    """conv-relu-pool x2 then a linear classifier."""
    rng = np.random.default_rng(seed)
    c, h, w = input_shape
    c1, c2 = width, 2 * width
    flat = c2 * (h // 4) * (w // 4)
    layers = [
        Conv2d(_he(rng, (c1, c, 3, 3), c * 9), np.zeros(c1), 1, 1),
        ReLU(),
        MaxPool2d(2),
        Conv2d(_he(rng, (c2, c1, 3, 3), c1 * 9), np.zeros(c2), 1, 1),
        ReLU(),
        MaxPool2d(2),
        Flatten(),
        Linear(_he(rng, (n_classes, flat), flat), np.zeros(n_classes)),
    ]
    return ModelGraph(layers, n_classes, input_shape)


def toy_resnet(input_shape=(1, 8, 8), n_classes=10, width=8, seed=0) -> ModelGraph:
    """Stem conv+BN, one residual block, average pool, linear head."""
    rng = np.random.default_rng(seed)
    c, h, w = input_shape

    def bn(ch):
        return BatchNorm2d(np.ones(ch), np.zeros(ch), np.zeros(ch), np.ones(ch))

    layers = [
        Conv2d(_he(rng, (width, c, 3, 3), c * 9), np.zeros(width), 1, 1), bn(width), ReLU(),
        Save("block1"),
        Conv2d(_he(rng, (width, width, 3, 3), width * 9), np.zeros(width), 1, 1), bn(width), ReLU(),
        Conv2d(_he(rng, (width, width, 3, 3), width * 9) * 0.5, np.zeros(width), 1, 1), bn(width),
        Add("block1"), ReLU(),
        AvgPool2d(2),
        Flatten(),
        Linear(_he(rng, (n_classes, width * (h // 2) * (w // 2)), width * (h // 2) * (w // 2)),
               np.zeros(n_classes)),
    ]
    return ModelGraph(layers, n_classes, input_shape)


ARCHITECTURES = {"lenet-small": lenet_small, "toy-resnet": toy_resnet}


def _params(model):
    out = []
    for layer in model.layers:
        if layer.kind in ("conv2d", "linear"):
            out.append(layer)
    return out


def train_float(model: ModelGraph, x, y, epochs: int = 30, lr: float = 1e-2, batch_size: int = 64,
                seed: int = 0, weight_decay: float = 1e-4, verbose: bool = False) -> ModelGraph:
    """Adam on the float model.

    Batch-norm statistics are not trained; they are reset from the first 512
    training samples at the start of every epoch and once more at the end.
    """
    model = model.copy()
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    layers = _params(model)
    state = {}
    for i, layer in enumerate(layers):
        for name in ("weight", "bias"):
            p = getattr(layer, name).astype(np.float64)
            state[(i, name)] = [p, np.zeros_like(p), np.zeros_like(p)]
    b1, b2, eps = 0.9, 0.999, 1e-8
    t = 0
    for ep in range(epochs):
        _refresh_bn(model, x[:512])
        order = rng.permutation(len(x))
        total = 0.0
        for s in range(0, len(x), batch_size):
            idx = order[s:s + batch_size]
            tr = forward(model, x[idx], mode="float", retain=True)
            loss, probs = loss_ce(tr.logits, y[idx])
            total += loss * len(idx)
            g = backward(model, tr, ce_seed(probs, y[idx]))
            t += 1
            for i, layer in enumerate(layers):
                for name, grad in (("weight", g.dweight[i]), ("bias", g.dbias[i])):
                    p, m, v = state[(i, name)]
                    if name == "weight":
                        grad = grad + weight_decay * p
                    m[:] = b1 * m + (1 - b1) * grad
                    v[:] = b2 * v + (1 - b2) * grad * grad
                    p -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
                    setattr(layer, name, p.astype(np.float32))
        if verbose:
            print(f"epoch {ep + 1}: loss {total / len(x):.4f}")
    _refresh_bn(model, x[:512])
    return model


def _refresh_bn(model, x):
    """Set batch-norm statistics to the per-channel moments of their inputs on ``x``."""
    if any(layer.kind == "batchnorm2d" for layer in model.layers):
        forward(model, x, mode="float", bn_stats=True)
