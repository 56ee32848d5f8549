"""Retraining-free recovery for a model running approximate multipliers.

Phase 1 re-fits each layer's input grid: the approximate model's activations
are clipped at a sweep of symmetric quantiles and the level whose quantized
tensor is closest (mean relative error) to the exact model's quantized
activations wins.  Phase 2 learns sigmoid-gated weight clipping bounds by plain gradient
descent on the task loss, straight-through the table lookups.

Both phases are guarded by the cross-entropy on the calibration samples: a
searched grid or the learned clipping is dropped when it raises that loss.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .netsim import ModelGraph, backward, ce_seed, evaluate_loss, forward, loss_ce
from .quant import QuantParams, dequantize, fit_params, quantize, params_from_range, quantile_range

log = logging.getLogger(__name__)

Q_GRID = np.round(np.arange(0, 50) * 0.01, 2)
MRE_EPS = 1e-8
LWC_INIT = float(np.log(999.0))


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def mre(a, x, eps: float = MRE_EPS) -> float:
    """Mean of ``|a - x| / (|x| + eps)``."""
    a = np.asarray(a, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean(np.abs(a - x) / (np.abs(x) + eps)))


def lwc_bounds(w, gamma, beta) -> tuple[float, float]:
    w = np.asarray(w, dtype=np.float64)
    return float(sigmoid(gamma) * w.min()), float(sigmoid(beta) * w.max())


def lwc_clip(w, gamma, beta) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        raise ValueError("weight tensor is empty")
    lo, hi = lwc_bounds(w, gamma, beta)
    return np.clip(w, lo, hi)


def lwc_gradients(w, w_clipped, gamma, beta, grad_clipped) -> tuple[float, float]:
    """Chain rule from dL/dW' to the two clipping parameters.

    Elements sitting on the lower bound receive ``min(W') * (1 - sigmoid(gamma))``,
    those on the upper bound ``max(W') * (1 - sigmoid(beta))``, all others 0.
    """
    w = np.asarray(w, dtype=np.float64)
    wc = np.asarray(w_clipped, dtype=np.float64)
    gc = np.asarray(grad_clipped, dtype=np.float64)
    if not (w.shape == wc.shape == gc.shape):
        raise ValueError(f"shape mismatch: W {w.shape}, W' {wc.shape}, dL/dW' {gc.shape}")
    lo, hi = lwc_bounds(w, gamma, beta)
    if not np.allclose(wc, np.clip(w, lo, hi), rtol=0, atol=1e-12 * max(1.0, np.abs(w).max())):
        raise ValueError("W' is not lwc_clip(W, gamma, beta)")
    sg, sb = float(sigmoid(gamma)), float(sigmoid(beta))
    lower = w <= lo
    upper = w >= hi
    d_gamma = float(np.sum(gc[lower])) * lo * (1.0 - sg)
    d_beta = float(np.sum(gc[upper])) * hi * (1.0 - sb)
    return d_gamma, d_beta


@dataclass
class LayerCalib:
    q: float = 0.0
    scale_x: float | None = None
    gamma: float = LWC_INIT
    beta: float = LWC_INIT
    searched_q: float | None = None  # MRE winner when the loss guard rejected it

    def to_dict(self) -> dict:
        return {"q": self.q, "scale_x": self.scale_x, "gamma": self.gamma, "beta": self.beta,
                "searched_q": self.searched_q}

    @classmethod
    def from_dict(cls, d) -> "LayerCalib":
        sq = d.get("searched_q")
        return cls(float(d["q"]), None if d["scale_x"] is None else float(d["scale_x"]),
                   float(d["gamma"]), float(d["beta"]), None if sq is None else float(sq))


@dataclass
class CalibState:
    layers: dict = field(default_factory=dict)
    epochs: int = 5
    lr: float = 0.1
    batch_size: int = 64
    lr_halvings: int = 0
    diverged: bool = False
    history: list = field(default_factory=list)
    lwc_kept: bool = True  # False when learned clipping raised the calibration loss and was dropped

    def to_dict(self) -> dict:
        return {"layers": {str(k): v.to_dict() for k, v in sorted(self.layers.items())},
                "epochs": self.epochs, "lr": self.lr, "batch_size": self.batch_size,
                "lr_halvings": self.lr_halvings, "diverged": self.diverged, "lwc_kept": self.lwc_kept}

    @classmethod
    def from_dict(cls, d) -> "CalibState":
        return cls({int(k): LayerCalib.from_dict(v) for k, v in d["layers"].items()},
                   int(d["epochs"]), float(d["lr"]), int(d["batch_size"]),
                   int(d.get("lr_halvings", 0)), bool(d.get("diverged", False)),
                   lwc_kept=bool(d.get("lwc_kept", True)))


def input_scale_search(x_approx, x_exact, bits: int, grid=Q_GRID, base: QuantParams | None = None):
    """Pick the input grid whose quantized approximate input best matches the exact one.

    For q > 0 the grid is re-fitted to the (q, 1-q) quantiles of
    ``x_approx``; q = 0 keeps ``base``, the layer's grid in the exact model
    (fitted at q = 0 when not given).  Both sides are compared as the values
    the layer actually multiplies: ``x_approx`` through each candidate grid,
    ``x_exact`` through ``base``.  Returns ``(q*, params, mre_by_q)``; ties
    go to the smaller q, and levels whose clip range collapses to a single
    value score ``inf``.
    """
    xa = np.asarray(x_approx, dtype=np.float64)
    xe = np.asarray(x_exact, dtype=np.float64)
    if xa.size == 0:
        raise ValueError("empty sample set")
    if xa.shape != xe.shape:
        raise ValueError(f"approximate {xa.shape} and exact {xe.shape} activations differ in shape")
    if base is None:
        ref_params, zero_params = fit_params(xe, bits), fit_params(xa, bits)
    else:
        ref_params = zero_params = base
    ref = dequantize(quantize(xe, ref_params))
    scores, params = [], []
    for q in grid:
        if q == 0:
            p = zero_params
        else:
            lo, hi = quantile_range(xa, float(q))
            if hi <= lo:
                scores.append(np.inf)
                params.append(None)
                continue
            p = params_from_range(lo, hi, bits)
        scores.append(mre(dequantize(quantize(xa, p)), ref))
        params.append(p)
    scores = np.array(scores)
    best = int(np.flatnonzero(scores == scores.min())[0])
    return float(grid[best]), params[best], scores


def _apply_lwc(layer, lc: LayerCalib):
    lo, hi = lwc_bounds(layer.w2d, lc.gamma, lc.beta)
    layer.qw = params_from_range(lo, hi, layer.bits_w)


def layer_inputs(model, x, assignment=None, library=None, batch_size=512) -> dict:
    """Float inputs seen by every multiplicative layer over a sample set."""
    out = {}
    for s in range(0, len(x), batch_size):
        tr = forward(model, x[s:s + batch_size], assignment, library, retain=True)
        for k, rec in tr.records.items():
            out.setdefault(k, []).append(rec.x)
    return {k: np.concatenate(v) for k, v in out.items()}


def layer_outputs(model, x, assignment=None, library=None, batch_size=512) -> dict:
    out = {}
    for s in range(0, len(x), batch_size):
        tr = forward(model, x[s:s + batch_size], assignment, library, retain=True)
        for k, rec in tr.records.items():
            out.setdefault(k, []).append(rec.y)
    return {k: np.concatenate(v) for k, v in out.items()}


def calibrate(model: ModelGraph, assignment, library, x, y, epochs: int = 5, lr: float = 0.1,
              batch_size: int = 64, seed: int = 0, max_restarts: int = 3,
              reference: ModelGraph | None = None, guard: bool = True):
    """Return ``(calibrated model copy, CalibState)``.

    ``reference`` is the quantized-exact model whose activations phase 1
    matches; it defaults to ``model`` run without approximation.  With
    ``guard`` a searched input grid is kept only if it does not raise the
    cross-entropy on the calibration samples; relative error rewards shrinking
    a badly corrupted activation towards zero, which can wreck accuracy.
    Multiplier tables and the assignment are never touched.
    """
    model = model.copy()
    ref = model.copy() if reference is None else reference
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if len(x) == 0:
        raise ValueError("empty sample set")
    mls = model.mult_layers()
    state = CalibState({k: LayerCalib() for k in range(len(mls))}, epochs, lr, batch_size)

    exact_inputs = layer_inputs(ref, x)
    for k, layer in enumerate(mls):
        # upstream layers already carry their refitted grids
        xa = _inputs_of(model, x, assignment, library, k)
        base = ref.mult_layers()[k].qx
        q, params, _ = input_scale_search(xa, exact_inputs[k], layer.bits_x, base=base)
        if guard and q > 0:
            layer.qx = base
            keep = evaluate_loss(model, x, y, assignment, library)
            layer.qx = params
            if evaluate_loss(model, x, y, assignment, library) > keep:
                log.info("layer %d: q=%.2f lowers MRE but raises the calibration loss; keeping its grid", k, q)
                state.layers[k].searched_q = q
                q, params = 0.0, base
        layer.qx = params
        state.layers[k].q = q
        state.layers[k].scale_x = params.scale
    # weights keep their grids until the first update; sigma = 0.999 would
    # otherwise shift every weight grid before any learning happens
    prepared = [layer.qw for layer in mls]
    if epochs <= 0:
        return model, state
    start_loss = evaluate_loss(model, x, y, assignment, library)

    rng = np.random.default_rng(seed)
    n = len(x)
    cur_lr = lr
    init_loss = None
    epoch = 0
    while epoch < epochs:
        snapshot = {k: (v.gamma, v.beta, mls[k].qw) for k, v in state.layers.items()}
        order = rng.permutation(n)
        diverged = False
        losses = []
        for s in range(0, n, batch_size):
            idx = order[s:s + batch_size]
            tr = forward(model, x[idx], assignment, library, retain=True)
            loss, probs = loss_ce(tr.logits, y[idx])
            if init_loss is None:
                init_loss = loss
            if not np.isfinite(loss) or loss > 10.0 * max(init_loss, 1e-12):
                diverged = True
                break
            losses.append(loss)
            grads = backward(model, tr, ce_seed(probs, y[idx]))
            for k, layer in enumerate(mls):
                lc = state.layers[k]
                w = layer.w2d
                wc = lwc_clip(w, lc.gamma, lc.beta)
                dg, dbt = lwc_gradients(w, wc, lc.gamma, lc.beta, grads.dweight[k].reshape(w.shape))
                lc.gamma -= cur_lr * dg
                lc.beta -= cur_lr * dbt
                _apply_lwc(layer, lc)
        if diverged:
            for k, (g, b, qw) in snapshot.items():
                state.layers[k].gamma, state.layers[k].beta = g, b
                mls[k].qw = qw
            if state.lr_halvings >= max_restarts:
                state.diverged = True
                log.warning("calibration diverged after %d learning-rate halvings; keeping epoch-%d state",
                            state.lr_halvings, epoch)
                break
            state.lr_halvings += 1
            cur_lr *= 0.5
            log.info("loss blew up; halving lr to %g and restarting epoch %d", cur_lr, epoch + 1)
            continue
        state.history.append(float(np.mean(losses)))
        epoch += 1
    state.lr = cur_lr
    if evaluate_loss(model, x, y, assignment, library) > start_loss:
        log.info("learned weight clipping raised the calibration loss; keeping the prepared weight grids")
        for layer, qw in zip(mls, prepared):
            layer.qw = qw
        state.lwc_kept = False
    return model, state


def _inputs_of(model, x, assignment, library, k, batch_size=512):
    parts = []
    for s in range(0, len(x), batch_size):
        tr = forward(model, x[s:s + batch_size], assignment, library, retain=True)
        parts.append(tr.records[k].x)
    return np.concatenate(parts)


def apply_state(model: ModelGraph, state: CalibState) -> ModelGraph:
    """Re-create a calibrated model's grids from a stored state and the fitted input params."""
    model = model.copy()
    for k, layer in enumerate(model.mult_layers()):
        if k in state.layers and state.lwc_kept:
            _apply_lwc(layer, state.layers[k])
    return model


def output_mre(model_a, model_b, x, assignment_a=None, assignment_b=None, library=None) -> dict:
    """Per-layer MRE between the outputs of two model variants on the same inputs."""
    ya = layer_outputs(model_a, x, assignment_a, library)
    yb = layer_outputs(model_b, x, assignment_b, library)
    return {k: mre(ya[k], yb[k]) for k in ya}
