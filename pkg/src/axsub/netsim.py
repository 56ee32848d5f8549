"""Bit-exact quantized CNN engine with LUT multipliers and backprop.

Multiplicative layers (``Conv2d`` and ``Linear``) quantize their input with
static per-tensor parameters and accumulate integer code products, either
exactly or through a multiplier table; the affine correction terms and the
bias are added in float64.  ``Linear`` runs through the same path as a 1x1
convolution over a 1x1 map.

Backward uses the straight-through estimator: rounding is identity inside
the clip range (zero outside) and table lookups differentiate like exact
products.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .mullib import LutMultiplier, MultiplierLibrary
from .quant import QuantParams, QuantTensor, dequantize_codes, in_range_mask, quantize_codes

MODES = ("quant", "float", "ste")


class ModelError(ValueError):
    pass


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Conv2d:
    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0
    bits_x: int = 8
    bits_w: int = 8
    qx: QuantParams | None = None
    qw: QuantParams | None = None
    kind = "conv2d"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float32)
        self.bias = np.asarray(self.bias, dtype=np.float32)
        if self.weight.ndim != 4 or self.bias.shape != (self.weight.shape[0],):
            raise ModelError(f"conv2d weight {self.weight.shape} / bias {self.bias.shape} mismatch")
        if self.stride < 1 or self.padding < 0:
            raise ModelError("conv2d stride must be >= 1 and padding >= 0")

    @property
    def w2d(self) -> np.ndarray:
        return self.weight.reshape(self.weight.shape[0], -1).astype(np.float64)


@dataclass(eq=False)
class Linear:
    weight: np.ndarray
    bias: np.ndarray
    bits_x: int = 8
    bits_w: int = 8
    qx: QuantParams | None = None
    qw: QuantParams | None = None
    kind = "linear"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float32)
        self.bias = np.asarray(self.bias, dtype=np.float32)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ModelError(f"linear weight {self.weight.shape} / bias {self.bias.shape} mismatch")

    @property
    def w2d(self) -> np.ndarray:
        return self.weight.astype(np.float64)


@dataclass(eq=False)
class BatchNorm2d:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5
    kind = "batchnorm2d"

    def __post_init__(self):
        for name in ("gamma", "beta", "mean", "var"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float32))

    def factor(self):
        return self.gamma.astype(np.float64) / np.sqrt(self.var.astype(np.float64) + self.eps)


@dataclass(eq=False)
class ReLU:
    kind = "relu"


@dataclass(eq=False)
class MaxPool2d:
    kernel: int = 2
    stride: int | None = None
    kind = "maxpool2d"

    def __post_init__(self):
        if self.stride is None:
            self.stride = self.kernel


@dataclass(eq=False)
class AvgPool2d:
    kernel: int = 2
    stride: int | None = None
    kind = "avgpool2d"

    def __post_init__(self):
        if self.stride is None:
            self.stride = self.kernel


@dataclass(eq=False)
class Flatten:
    kind = "flatten"


@dataclass(eq=False)
class Save:
    """Stash the current activation for a later ``Add`` with the same tag."""
    tag: str = "skip"
    kind = "save"


@dataclass(eq=False)
class Add:
    """Residual sum with the activation stashed under ``tag``."""
    tag: str = "skip"
    kind = "add"


MULT_KINDS = ("conv2d", "linear")


@dataclass(eq=False)
class ModelGraph:
    layers: list
    n_classes: int
    input_shape: tuple

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)

    def mult_layers(self) -> list:
        """Multiplicative layers in forward order; list position is the layer index ``k``."""
        return [layer for layer in self.layers if layer.kind in MULT_KINDS]

    @property
    def prepared(self) -> bool:
        return all(layer.qx is not None and layer.qw is not None for layer in self.mult_layers())

    def copy(self) -> "ModelGraph":
        return copy.deepcopy(self)


@dataclass(frozen=True)
class LayerShape:
    n_out: int
    n_in: int
    kernel_h: int
    kernel_w: int
    stride: int
    padding: int
    h: int
    w: int

    @property
    def mults_per_sample(self) -> int:
        return self.n_out * self.h * self.w * self.n_in * self.kernel_h * self.kernel_w


# ---------------------------------------------------------------------------
# im2col geometry
# ---------------------------------------------------------------------------

@lru_cache(maxsize=256)
def _im2col_index(c, h, w, kh, kw, stride, pad):
    hp, wp = h + 2 * pad, w + 2 * pad
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ModelError(f"kernel {kh}x{kw} does not fit input {h}x{w} with padding {pad}")
    ci = np.arange(c)[:, None, None]
    ki = np.arange(kh)[None, :, None]
    kj = np.arange(kw)[None, None, :]
    k_off = (ci * hp * wp + ki * wp + kj).reshape(-1)
    oy = np.arange(ho) * stride
    ox = np.arange(wo) * stride
    l_off = (oy[:, None] * wp + ox[None, :]).reshape(-1)
    idx = l_off[:, None] + k_off[None, :]
    idx.setflags(write=False)
    return idx, ho, wo


def _pad(x, pad, value):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=value)


def _cols(x, kh, kw, stride, pad, pad_value=0):
    n, c, h, w = x.shape
    idx, ho, wo = _im2col_index(c, h, w, kh, kw, stride, pad)
    xp = _pad(x, pad, pad_value).reshape(n, -1)
    return xp[:, idx], ho, wo


def _col2im(dcols, x_shape, kh, kw, stride, pad):
    n, c, h, w = x_shape
    idx, _, _ = _im2col_index(c, h, w, kh, kw, stride, pad)
    hp, wp = h + 2 * pad, w + 2 * pad
    p = c * hp * wp
    flat = (np.arange(n)[:, None, None] * p + idx[None]).ravel()
    dx = np.bincount(flat, weights=dcols.ravel(), minlength=n * p).reshape(n, c, hp, wp)
    if pad:
        dx = dx[:, :, pad:pad + h, pad:pad + w]
    return dx


# ---------------------------------------------------------------------------
# integer accumulation
# ---------------------------------------------------------------------------

def accumulate_exact(xcols: np.ndarray, wcodes: np.ndarray) -> np.ndarray:
    """Integer ``sum_k x[n,l,k] * w[o,k]``, returned as int64 of shape (N, L, O)."""
    # integer-valued float64 products/sums stay exact far below 2**53
    acc = np.matmul(xcols.astype(np.float64), wcodes.T.astype(np.float64))
    return np.rint(acc).astype(np.int64)


def accumulate_table(xcols: np.ndarray, wcodes: np.ndarray, table: np.ndarray) -> np.ndarray:
    """``sum_k table[x[n,l,k], w[o,k]]``; integer tables give int64, real tables float64."""
    table = np.asarray(table)
    is_int = np.issubdtype(table.dtype, np.integer)
    n, l, k = xcols.shape
    flat = xcols.reshape(n * l, k)
    acc = np.zeros((n * l, wcodes.shape[0]), dtype=np.float64)
    for m in np.unique(flat):
        mask = (flat == m).astype(np.float64)
        acc += mask @ table[m][wcodes].T.astype(np.float64)
    acc = acc.reshape(n, l, -1)
    return np.rint(acc).astype(np.int64) if is_int else acc


def affine_output(acc, xcols, wcodes, qx: QuantParams, qw: QuantParams, bias) -> np.ndarray:
    """Scale an integer accumulation back to real outputs, adding the three offset terms and bias."""
    k = xcols.shape[-1]
    xsum = xcols.sum(axis=-1, dtype=np.int64).astype(np.float64)
    wsum = wcodes.sum(axis=-1, dtype=np.int64).astype(np.float64)
    y = (qx.scale * qw.scale) * np.asarray(acc, dtype=np.float64)
    y = y + (qx.scale * qw.offset) * xsum[..., None]
    y = y + (qw.scale * qx.offset) * wsum[None, None, :]
    y = y + k * qx.offset * qw.offset
    return y + np.asarray(bias, dtype=np.float64)


def _conv_codes(xq: QuantTensor, wq: QuantTensor, stride, padding):
    x = np.asarray(xq.codes)
    w = np.asarray(wq.codes)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ModelError(f"shape mismatch: input codes {x.shape}, weight codes {w.shape}")
    zero = int(quantize_codes(0.0, xq.params))
    cols, ho, wo = _cols(x, w.shape[2], w.shape[3], stride, padding, zero)
    return cols, w.reshape(w.shape[0], -1), ho, wo


def _to_nchw(y, ho, wo):
    n, _, o = y.shape
    return y.transpose(0, 2, 1).reshape(n, o, ho, wo)


def conv_exact_quant(xq: QuantTensor, wq: QuantTensor, bias=None, stride=1, padding=0) -> np.ndarray:
    """Quantized convolution with exact integer products.  Padding uses the code of 0.0."""
    cols, w2, ho, wo = _conv_codes(xq, wq, stride, padding)
    bias = np.zeros(w2.shape[0]) if bias is None else bias
    acc = accumulate_exact(cols, w2)
    return _to_nchw(affine_output(acc, cols, w2, xq.params, wq.params, bias), ho, wo)


def conv_approx(xq: QuantTensor, wq: QuantTensor, mul: LutMultiplier, bias=None, stride=1, padding=0) -> np.ndarray:
    """As ``conv_exact_quant`` with every code product looked up in ``mul.table``."""
    if mul.bits != (xq.params.bits, wq.params.bits):
        raise ModelError(
            f"multiplier {mul.name} is {mul.bitwidth_a}x{mul.bitwidth_b}, "
            f"layer is {xq.params.bits}x{wq.params.bits}")
    cols, w2, ho, wo = _conv_codes(xq, wq, stride, padding)
    bias = np.zeros(w2.shape[0]) if bias is None else bias
    acc = accumulate_table(cols, w2, mul.table)
    return _to_nchw(affine_output(acc, cols, w2, xq.params, wq.params, bias), ho, wo)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

@dataclass
class LayerRecord:
    """What a multiplicative layer saw and produced during one forward."""
    k: int
    x: np.ndarray
    cols: np.ndarray
    wcodes: np.ndarray | None
    qx: QuantParams | None
    qw: QuantParams | None
    y: np.ndarray
    out_hw: tuple

    @property
    def y_cols(self) -> np.ndarray:
        """Output in (N, L, O) layout, matching ``cols``."""
        return to_cols_layout(self.y)


@dataclass
class ForwardTrace:
    logits: np.ndarray
    mode: str
    records: dict = field(default_factory=dict)
    caches: list = field(default_factory=list)
    loss: float | None = None
    probs: np.ndarray | None = None


@dataclass
class Gradients:
    dlogits: np.ndarray
    dy: dict
    dweight: dict
    dbias: dict
    dx: np.ndarray


def to_cols_layout(y: np.ndarray) -> np.ndarray:
    if y.ndim == 2:
        return y[:, None, :]
    n, o, ho, wo = y.shape
    return y.reshape(n, o, ho * wo).transpose(0, 2, 1)


def weight_codes(layer) -> np.ndarray:
    """Weight codes in (O, K) layout under the layer's stored weight grid."""
    if layer.qw is None:
        raise ModelError("layer has no weight quantization parameters; run prepare first")
    return quantize_codes(layer.w2d, layer.qw)


def dequantized_weight(layer) -> np.ndarray:
    return dequantize_codes(weight_codes(layer), layer.qw)


def resolve_assignment(model: ModelGraph, assignment=None, library: MultiplierLibrary | None = None) -> dict:
    """Map layer index -> LutMultiplier, or None for exact products.

    Values may be multiplier objects, library names, or ``"exact"``.
    """
    out = {}
    mls = model.mult_layers()
    assignment = assignment or {}
    for k in assignment:
        if not 0 <= int(k) < len(mls):
            raise ModelError(f"assignment names layer {k}, model has {len(mls)} multiplicative layers")
    for k, layer in enumerate(mls):
        sel = assignment.get(k, assignment.get(str(k)))
        if sel is None or (isinstance(sel, str) and sel == "exact"):
            out[k] = None
            continue
        if isinstance(sel, str):
            if library is None:
                raise ModelError(f"layer {k}: multiplier {sel!r} given by name but no library supplied")
            try:
                sel = library.get(sel)
            except KeyError:
                raise ModelError(f"layer {k}: unknown multiplier {sel!r}") from None
        if sel.bits != (layer.bits_x, layer.bits_w):
            raise ModelError(
                f"layer {k}: multiplier {sel.name} is {sel.bitwidth_a}x{sel.bitwidth_b}, "
                f"layer is {layer.bits_x}x{layer.bits_w}")
        out[k] = None if sel.is_exact else sel
    return out


def _layer_cols(layer, x, pad_value):
    if layer.kind == "linear":
        return x.reshape(x.shape[0], 1, -1), (1, 1)
    _, _, kh, kw = layer.weight.shape
    cols, ho, wo = _cols(x, kh, kw, layer.stride, layer.padding, pad_value)
    return cols, (ho, wo)


def _surrogate(layer, x, w2, bias):
    xc = np.clip(x, layer.qx.clip_lo, layer.qx.clip_hi)
    cols, hw = _layer_cols(layer, xc, 0.0)
    return cols @ w2.T + bias, cols, hw, xc


def _mult_forward(k, layer, x, mode, mul, inject, relaxed, weights, anchor=None):
    if layer.kind == "linear" and (x.ndim != 2 or x.shape[1] != layer.weight.shape[1]):
        raise ModelError(f"linear layer {k} expects a flat input of {layer.weight.shape[1]} features, "
                         f"got shape {x.shape}")
    if layer.kind == "conv2d" and (x.ndim != 4 or x.shape[1] != layer.weight.shape[1]):
        raise ModelError(f"conv layer {k} expects {layer.weight.shape[1]} input channels, got shape {x.shape}")
    bias = layer.bias.astype(np.float64)
    if mode == "float":
        w2 = layer.w2d if weights is None or k not in weights else np.asarray(weights[k], np.float64).reshape(layer.w2d.shape)
        cols, hw = _layer_cols(layer, x, 0.0)
        y = cols @ w2.T + bias
        return LayerRecord(k, x, cols, None, None, None, _natural(y, hw), hw), None
    if layer.qx is None or layer.qw is None:
        raise ModelError(f"layer {k} is not prepared (missing quantization parameters)")
    wcodes = weight_codes(layer)
    if mode == "ste" or relaxed:
        # straight-through surrogate: clip instead of round, dequantized weights
        w2 = dequantize_codes(wcodes, layer.qw)
        if weights is not None and k in weights:
            w2 = np.asarray(weights[k], np.float64).reshape(w2.shape)
        y, cols, hw, xc = _surrogate(layer, x, w2, bias)
        y = _natural(y, hw)
        if anchor is not None:
            # keep the quantized operating point, move linearly around it
            y = anchor.y + (y - _natural(_surrogate(layer, anchor.x, w2, bias)[0], hw))
        return LayerRecord(k, x, cols, wcodes, layer.qx, layer.qw, y, hw), xc
    codes = quantize_codes(x, layer.qx)
    zero = int(quantize_codes(0.0, layer.qx))
    cols, hw = _layer_cols(layer, codes, zero)
    if inject is not None and k in inject:
        if mul is None:
            base = np.arange(1 << layer.bits_x)[:, None] * np.arange(1 << layer.bits_w)[None, :]
        else:
            base = mul.table
        table = base.astype(np.float64) + np.asarray(inject[k], np.float64).reshape(base.shape)
        acc = accumulate_table(cols, wcodes, table)
    elif mul is None:
        acc = accumulate_exact(cols, wcodes)
    else:
        acc = accumulate_table(cols, wcodes, mul.table)
    y = affine_output(acc, cols, wcodes, layer.qx, layer.qw, bias)
    return LayerRecord(k, x, cols, wcodes, layer.qx, layer.qw, _natural(y, hw), hw), None


def _natural(y, hw):
    if hw == (1, 1) and y.shape[1] == 1:
        return y[:, 0, :]
    return _to_nchw(y, *hw)


def forward(model: ModelGraph, x, assignment=None, library=None, *, mode: str = "quant",
            retain: bool = False, inject: dict | None = None, relax_after: int | None = None,
            weights: dict | None = None, bn_stats: bool = False) -> ForwardTrace:
    """Run the model on a batch.

    ``mode`` is ``"quant"`` (bit-exact integer path, LUTs per ``assignment``),
    ``"float"`` (no quantization) or ``"ste"`` (clip-only surrogate whose
    gradient is the straight-through gradient).  ``inject`` maps layer index
    to a real-valued error vector added to that layer's table; multiplicative
    layers after ``relax_after`` run the surrogate, anchored so that without
    injection they reproduce the quantized outputs exactly; their slope is the
    straight-through gradient.  Both exist for finite-difference oracles.  ``weights`` overrides (dequantized) weights in
    the float and surrogate paths.  ``bn_stats`` overwrites batch-norm
    statistics with the moments of the current batch (training utility).
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if mode != "float" and not model.prepared:
        raise ModelError("model is not prepared: every conv/linear layer needs input and weight quantization parameters")
    muls = resolve_assignment(model, assignment, library) if mode == "quant" else {}
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != model.input_shape:
        raise ModelError(f"input shape {x.shape[1:]} does not match model input {model.input_shape}")
    anchors = {}
    if relax_after is not None and mode == "quant":
        anchors = forward(model, x, assignment, library, retain=True).records
    trace = ForwardTrace(logits=None, mode=mode)
    saved = {}
    k = -1
    for layer in model.layers:
        kind = layer.kind
        cache = None
        if kind in MULT_KINDS:
            k += 1
            relaxed = relax_after is not None and k > relax_after
            rec, xc = _mult_forward(k, layer, x, mode, muls.get(k), inject, relaxed, weights,
                                    anchors.get(k) if relaxed else None)
            trace.records[k] = rec
            cache = rec
            x = rec.y
        elif kind == "relu":
            cache = x > 0
            x = np.where(cache, x, 0.0)
        elif kind == "batchnorm2d":
            if bn_stats:
                layer.mean = x.mean(axis=(0, 2, 3)).astype(np.float32)
                layer.var = x.var(axis=(0, 2, 3)).astype(np.float32)
            f = layer.factor()[None, :, None, None]
            x = (x - layer.mean[None, :, None, None]) * f + layer.beta[None, :, None, None]
            cache = f
        elif kind in ("maxpool2d", "avgpool2d"):
            n, c, h, w = x.shape
            cols, ho, wo = _cols(x.reshape(n * c, 1, h, w), layer.kernel, layer.kernel, layer.stride, 0)
            if kind == "maxpool2d":
                arg = cols.argmax(axis=-1)
                y = np.take_along_axis(cols, arg[..., None], axis=-1)[..., 0]
                cache = (x.shape, arg)
            else:
                y = cols.mean(axis=-1)
                cache = (x.shape, None)
            x = y.reshape(n, c, ho, wo)
        elif kind == "flatten":
            cache = x.shape
            x = x.reshape(x.shape[0], -1)
        elif kind == "save":
            saved[layer.tag] = x
        elif kind == "add":
            if layer.tag not in saved:
                raise ModelError(f"add layer references unknown tag {layer.tag!r}")
            if saved[layer.tag].shape != x.shape:
                raise ModelError(f"residual shape mismatch for tag {layer.tag!r}")
            x = x + saved[layer.tag]
        else:
            raise ModelError(f"unsupported layer type {kind!r}")
        trace.caches.append(cache)
    if x.ndim != 2 or x.shape[1] != model.n_classes:
        raise ModelError(f"model output shape {x.shape} does not match {model.n_classes} classes")
    trace.logits = x
    if not retain:
        trace.records = {}
        trace.caches = []
    return trace


def loss_ce(logits, labels):
    """Batch-mean softmax cross-entropy and per-sample probabilities."""
    z = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    if labels.shape != (z.shape[0],):
        raise ValueError(f"labels shape {labels.shape} does not match batch {z.shape[0]}")
    if labels.size and (labels.min() < 0 or labels.max() >= z.shape[1]):
        raise ValueError(f"label out of range [0, {z.shape[1] - 1}]")
    zs = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(zs).sum(axis=1))
    logp = zs - lse[:, None]
    loss = float(-logp[np.arange(z.shape[0]), labels].mean())
    return loss, np.exp(logp)


def ce_seed(probs, labels) -> np.ndarray:
    """Gradient of the batch-mean cross-entropy w.r.t. the logits."""
    g = np.array(probs, dtype=np.float64)
    g[np.arange(g.shape[0]), labels] -= 1.0
    return g / g.shape[0]


def backward(model: ModelGraph, trace: ForwardTrace, seed_grad) -> Gradients:
    """Reverse-mode pass from ``seed_grad`` (dL/dlogits) through a retained trace."""
    if not trace.caches:
        raise ModelError("backward needs a trace recorded with retain=True")
    g = np.asarray(seed_grad, dtype=np.float64)
    if g.shape != trace.logits.shape:
        raise ValueError(f"seed shape {g.shape} != logits shape {trace.logits.shape}")
    dlogits = g
    dy, dw, db = {}, {}, {}
    saved_grad = {}
    mls = model.mult_layers()
    for layer, cache in zip(reversed(model.layers), reversed(trace.caches)):
        kind = layer.kind
        if kind in MULT_KINDS:
            rec = cache
            k = rec.k
            dy[k] = g
            gc = to_cols_layout(g)
            if trace.mode == "float":
                w2 = mls[k].w2d
                cols = rec.cols
            elif trace.mode == "ste" or rec.cols.dtype.kind == "f":
                w2 = dequantize_codes(rec.wcodes, rec.qw)
                cols = rec.cols
            else:
                w2 = dequantize_codes(rec.wcodes, rec.qw)
                cols = dequantize_codes(rec.cols, rec.qx)
            dw[k] = np.einsum("nlk,nlo->ok", cols, gc, optimize=True).reshape(layer.weight.shape)
            db[k] = gc.sum(axis=(0, 1))
            dcols = gc @ w2
            if layer.kind == "linear":
                dx = dcols[:, 0, :]
            else:
                _, _, kh, kw = layer.weight.shape
                dx = _col2im(dcols, rec.x.shape, kh, kw, layer.stride, layer.padding)
            if trace.mode != "float":
                dx = dx * in_range_mask(rec.x, rec.qx)
            g = dx
        elif kind == "relu":
            g = np.where(cache, g, 0.0)
        elif kind == "batchnorm2d":
            g = g * cache
        elif kind in ("maxpool2d", "avgpool2d"):
            shape, arg = cache
            n, c, h, w = shape
            kk = layer.kernel * layer.kernel
            gflat = g.reshape(n * c, -1)
            if arg is not None:
                dcols = np.zeros(gflat.shape + (kk,))
                np.put_along_axis(dcols, arg[..., None], gflat[..., None], axis=-1)
            else:
                dcols = np.repeat(gflat[..., None] / kk, kk, axis=-1)
            g = _col2im(dcols, (n * c, 1, h, w), layer.kernel, layer.kernel, layer.stride, 0).reshape(shape)
        elif kind == "flatten":
            g = g.reshape(cache)
        elif kind == "add":
            saved_grad[layer.tag] = g
        elif kind == "save":
            g = g + saved_grad.pop(layer.tag)
    return Gradients(dlogits=dlogits, dy=dy, dweight=dw, dbias=db, dx=g)


# ---------------------------------------------------------------------------
# model utilities
# ---------------------------------------------------------------------------

def fold_batchnorm(model: ModelGraph) -> ModelGraph:
    """Return a copy with every BatchNorm2d absorbed into the preceding conv."""
    out = []
    for layer in model.layers:
        if layer.kind == "batchnorm2d":
            prev = out[-1] if out else None
            if prev is None or prev.kind != "conv2d":
                raise ModelError("batchnorm2d must directly follow a conv2d layer to be folded")
            f = layer.factor()
            w = prev.weight.astype(np.float64) * f[:, None, None, None]
            b = (prev.bias.astype(np.float64) - layer.mean) * f + layer.beta
            out[-1] = Conv2d(w, b, prev.stride, prev.padding, prev.bits_x, prev.bits_w, prev.qx, prev.qw)
        else:
            out.append(copy.deepcopy(layer))
    return ModelGraph(out, model.n_classes, model.input_shape)


def layer_shapes(model: ModelGraph) -> list[LayerShape]:
    """Per-sample geometry of every multiplicative layer."""
    trace = forward(model, np.zeros((1,) + model.input_shape), mode="float", retain=True)
    shapes = []
    for k, layer in enumerate(model.mult_layers()):
        rec = trace.records[k]
        if layer.kind == "linear":
            o, i = layer.weight.shape
            shapes.append(LayerShape(o, i, 1, 1, 1, 0, 1, 1))
        else:
            o, c, kh, kw = layer.weight.shape
            shapes.append(LayerShape(o, c, kh, kw, layer.stride, layer.padding, *rec.out_hw))
    return shapes


def predict(model, x, assignment=None, library=None, mode="quant", batch_size=512) -> np.ndarray:
    out = []
    for s in range(0, len(x), batch_size):
        out.append(forward(model, x[s:s + batch_size], assignment, library, mode=mode).logits)
    return np.concatenate(out, axis=0)


def accuracy(model, x, y, assignment=None, library=None, mode="quant", batch_size=512) -> float:
    """Top-1 accuracy in percent."""
    logits = predict(model, x, assignment, library, mode, batch_size)
    return float(100.0 * np.mean(logits.argmax(axis=1) == np.asarray(y)))


def evaluate_loss(model, x, y, assignment=None, library=None, mode="quant", batch_size=512) -> float:
    logits = predict(model, x, assignment, library, mode, batch_size)
    return loss_ce(logits, y)[0]
