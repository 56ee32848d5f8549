"""Loss-perturbation estimates for substituting a multiplier into one layer.

A layer's output changes by ``s_x * s_w * sum_{m,n} C[m, n] * E[m, n]`` when
its products go through a table with error matrix ``E``, where ``C`` counts
how often each operand pair ``(m, n)`` is multiplied.  Counting matrices are
never materialized per output element; instead every pair occurrence is
scattered into a ``2**a x 2**b`` accumulator with a per-output weight, which
directly yields gradient and Jacobian rows over the flattened error vector.

The second-order term uses the Gauss-Newton form ``J^T H_z J`` per sample,
with ``H_z = diag(p) - p p^T`` for softmax cross-entropy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .mullib import MultiplierLibrary, error_matrix
from .netsim import ModelGraph, backward, ce_seed, forward, loss_ce, to_cols_layout

FULL_HESSIAN_MAX_DIM = 4096
HESSIAN_MODES = ("full", "rank1", "auto")
_CHUNK = 1 << 22


# ---------------------------------------------------------------------------
# counting
# ---------------------------------------------------------------------------

@dataclass
class CountingAccumulator:
    bitwidth_a: int
    bitwidth_b: int
    counts: np.ndarray
    mode: str
    output_index: tuple | None = None

    @property
    def flat(self) -> np.ndarray:
        return self.counts.reshape(-1)


def _pair_blocks(xcols, wcodes, bits_b, per_sample):
    """Yield (sample slice, flat pair index of shape (n, L, O, K)) in bounded chunks."""
    n, l, k = xcols.shape
    o = wcodes.shape[0]
    step = max(1, _CHUNK // max(1, l * o * k))
    shift = np.int64(bits_b)
    for s in range(0, n, step):
        xc = xcols[s:s + step].astype(np.int64)
        idx = (xc[:, :, None, :] << shift) + wcodes[None, None, :, :].astype(np.int64)
        yield slice(s, s + xc.shape[0]), idx


def pair_scatter(xcols, wcodes, bits, weights=None, per_sample=False) -> np.ndarray:
    """Accumulate ``weights[n, l, o]`` at every pair ``(x[n,l,k], w[o,k])``.

    Returns the flattened ``2**(a+b)`` accumulator, or one row per sample.
    ``weights=None`` counts occurrences in integers.
    """
    a, b = bits
    d = 1 << (a + b)
    n, l, _ = xcols.shape
    o = wcodes.shape[0]
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (n, l, o):
            raise ValueError(f"weights shape {weights.shape} != layer output layout {(n, l, o)}")
    rows = n if per_sample else 1
    out = np.zeros((rows, d), dtype=np.int64 if weights is None else np.float64)
    for sl, idx in _pair_blocks(xcols, wcodes, b, per_sample):
        m = idx.shape[0]
        if per_sample:
            idx = idx + (np.arange(m, dtype=np.int64) * d)[:, None, None, None]
            length = m * d
        else:
            length = d
        if weights is None:
            acc = np.bincount(idx.ravel(), minlength=length)
        else:
            w = np.broadcast_to(weights[sl][..., None], idx.shape)
            acc = np.bincount(idx.ravel(), weights=w.ravel(), minlength=length)
        if per_sample:
            out[sl] += acc.reshape(m, d)
        else:
            out[0] += acc
    return out if per_sample else out[0]


def counting_pass(xcols, wcodes, bits, weights=None, output_index=None) -> CountingAccumulator:
    """Pair-occurrence accumulator of one layer over a batch.

    ``xcols`` are input codes in (N, L, K) layout, ``wcodes`` weight codes in
    (O, K).  With ``weights=None`` the raw integer counts are returned; with a
    (N, L, O) weight tensor each occurrence contributes the weight of the
    output it feeds; ``output_index=(n, l, o)`` counts for that single output.
    """
    a, b = bits
    xcols = np.asarray(xcols)
    wcodes = np.asarray(wcodes)
    if xcols.ndim != 3 or wcodes.ndim != 2 or xcols.shape[2] != wcodes.shape[1]:
        raise ValueError(f"shape mismatch: codes {xcols.shape}, weights {wcodes.shape}")
    if xcols.size and (xcols.min() < 0 or xcols.max() >= (1 << a)):
        raise ValueError("input codes out of range for the layer bitwidth")
    if wcodes.size and (wcodes.min() < 0 or wcodes.max() >= (1 << b)):
        raise ValueError("weight codes out of range for the layer bitwidth")
    if output_index is not None:
        n, l, o = output_index
        counts = pair_scatter(xcols[n:n + 1, l:l + 1], wcodes[o:o + 1], bits)
        mode = "output_weighted"
    elif weights is None:
        counts = pair_scatter(xcols, wcodes, bits)
        mode = "raw_count"
    else:
        counts = pair_scatter(xcols, wcodes, bits, weights)
        mode = "grad_weighted"
    return CountingAccumulator(a, b, counts.reshape(1 << a, 1 << b), mode, output_index)


def counts_per_output(xcols, wcodes, bits) -> np.ndarray:
    """Dense counting vectors, one row per output element in (N, L, O) order."""
    a, b = bits
    d = 1 << (a + b)
    n, l, k = xcols.shape
    o = wcodes.shape[0]
    idx = (xcols.astype(np.int64)[:, :, None, :] << b) + wcodes[None, None].astype(np.int64)
    idx = idx + (np.arange(n * l * o, dtype=np.int64) * d).reshape(n, l, o, 1)
    return np.bincount(idx.ravel(), minlength=n * l * o * d).reshape(n * l * o, d)


# ---------------------------------------------------------------------------
# gradient, Jacobian, output Hessian
# ---------------------------------------------------------------------------

def _scaled(rec):
    return rec.qx.scale * rec.qw.scale


def layer_gradient(rec, dy, per_sample=False) -> np.ndarray:
    """Gradient of the loss w.r.t. the layer's flattened error vector.

    ``rec`` is the layer's forward record and ``dy`` the upstream gradient
    w.r.t. its output (already carrying the batch-mean factor).
    """
    if rec is None or rec.wcodes is None or rec.cols.dtype.kind not in "iu":
        raise ValueError("layer_gradient needs a quantized forward record (retain=True)")
    if dy is None:
        raise ValueError("missing upstream gradient")
    bits = (rec.qx.bits, rec.qw.bits)
    return _scaled(rec) * pair_scatter(rec.cols, rec.wcodes, bits, to_cols_layout(dy), per_sample)


def output_jacobian(model: ModelGraph, trace, layers=None, per_sample=True) -> dict:
    """Jacobian of the logits w.r.t. each layer's error vector.

    Returns ``{k: J}`` with ``J`` of shape (N, K, D) per sample, or (K, D)
    summed over the batch.  One backward pass per logit.
    """
    n, n_out = trace.logits.shape
    layers = list(trace.records) if layers is None else list(layers)
    rows = {k: [] for k in layers}
    for i in range(n_out):
        seed = np.zeros((n, n_out))
        seed[:, i] = 1.0
        grads = backward(model, trace, seed)
        for k in layers:
            rows[k].append(layer_gradient(trace.records[k], grads.dy[k], per_sample))
    return {k: np.stack(r, axis=1 if per_sample else 0) for k, r in rows.items()}


def output_hessian_ce(probs, reduce: str | None = "mean") -> np.ndarray:
    """Hessian of softmax cross-entropy w.r.t. the logits, ``diag(p) - p p^T``."""
    p = np.asarray(probs, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    if np.any(p < -1e-12) or not np.allclose(p.sum(axis=1), 1.0, atol=1e-6):
        raise ValueError("probabilities must be non-negative and sum to 1 per sample")
    h = np.einsum("ni,ij->nij", p, np.eye(p.shape[1])) - p[:, :, None] * p[:, None, :]
    if single:
        return h[0]
    if reduce == "mean":
        return h.mean(axis=0)
    return h


@dataclass(frozen=True)
class PowerResult:
    eigenvalue: float
    eigenvector: np.ndarray
    iterations: int
    converged: bool
    degenerate: bool = False


def power_iteration(op, dim: int | None = None, max_iters: int = 100, tol: float = 1e-6,
                    seed: int = 0, eps: float = 1e-30) -> PowerResult:
    """Dominant eigenpair of a symmetric PSD operator (matrix or matvec callable).

    Stops when the Rayleigh quotient changes by less than ``tol`` relative.
    The returned eigenvalue is the Rayleigh quotient of the returned unit
    vector, so for PSD input it never exceeds the true top eigenvalue.
    """
    if callable(op):
        matvec = op
        if dim is None:
            raise ValueError("dim is required when op is a callable")
    else:
        mat = np.asarray(op, dtype=np.float64)
        if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {mat.shape}")
        dim = mat.shape[0]
        matvec = mat.__matmul__
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    lam_prev = None
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        w = matvec(v)
        nw = float(np.linalg.norm(w))
        if nw <= eps:
            return PowerResult(0.0, v, it, True, True)
        lam = float(v @ w)
        v = w / nw
        if lam_prev is not None and abs(lam - lam_prev) / max(abs(lam_prev), eps) < tol:
            converged = True
            break
        lam_prev = lam
    lam = float(v @ matvec(v))
    v = v * np.sign(v[np.argmax(np.abs(v))])
    return PowerResult(lam, v, it, converged)


# ---------------------------------------------------------------------------
# sensitivities and Omega
# ---------------------------------------------------------------------------

@dataclass
class LayerSensitivity:
    """Gradient and Hessian representation of the loss over one layer's error vector.

    ``hessian`` is the dense ``D x D`` matrix in full mode.  In rank-one mode
    each sample contributes ``lam[n] * u[n] u[n]^T``; the Hessian estimate is
    their batch mean.
    """
    k: int
    bits: tuple
    g: np.ndarray
    mode: str
    scale_x: float
    scale_w: float
    n_samples: int
    hessian: np.ndarray | None = None
    u: np.ndarray | None = None
    lam: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.g.shape[0]

    def dense_hessian(self) -> np.ndarray:
        if self.mode == "full":
            return self.hessian
        return (self.u.T * (self.lam / self.n_samples)) @ self.u


def evaluate_omega(sens: LayerSensitivity, e) -> float:
    """Second-order loss change ``g.e + e.H.e / 2`` for a flattened error vector."""
    e = np.asarray(getattr(e, "flat", e), dtype=np.float64).ravel()
    if e.shape[0] != sens.dim:
        raise ValueError(f"error vector length {e.shape[0]} != sensitivity dimension {sens.dim}")
    if not e.any():
        return 0.0
    lin = float(sens.g @ e)
    if sens.mode == "full":
        quad = float(e @ sens.hessian @ e)
    else:
        proj = sens.u @ e
        quad = float(np.sum(sens.lam * proj * proj) / sens.n_samples)
    return lin + 0.5 * quad


def _resolve_mode(mode, bits):
    d = 1 << (bits[0] + bits[1])
    if mode not in HESSIAN_MODES:
        raise ValueError(f"hessian mode must be one of {HESSIAN_MODES}")
    if mode == "auto":
        return "full" if d <= FULL_HESSIAN_MAX_DIM else "rank1"
    if mode == "full" and d > FULL_HESSIAN_MAX_DIM:
        raise ValueError(f"full Hessian infeasible for {bits[0]}x{bits[1]} bits "
                         f"({d} error entries > {FULL_HESSIAN_MAX_DIM}); use rank1")
    return mode


def layer_sensitivities(model: ModelGraph, x, labels, hessian_mode: str = "auto", layers=None,
                        seed: int = 0, max_iters: int = 100, tol: float = 1e-6) -> dict:
    """Gradient and Hessian data for every requested layer from one exact forward.

    The model runs with exact multipliers; the loss is the batch-mean
    cross-entropy.
    """
    trace = forward(model, x, mode="quant", retain=True)
    loss, probs = loss_ce(trace.logits, labels)
    trace.loss, trace.probs = loss, probs
    n, n_cls = probs.shape
    mls = model.mult_layers()
    layers = list(range(len(mls))) if layers is None else [int(k) for k in layers]
    modes = {k: _resolve_mode(hessian_mode, (mls[k].bits_x, mls[k].bits_w)) for k in layers}

    grads = backward(model, trace, ce_seed(probs, labels))
    out = {}
    for k in layers:
        rec = trace.records[k]
        out[k] = LayerSensitivity(k, (rec.qx.bits, rec.qw.bits), layer_gradient(rec, grads.dy[k]),
                                  modes[k], rec.qx.scale, rec.qw.scale, n)

    full = [k for k in layers if modes[k] == "full"]
    if full:
        hz = output_hessian_ce(probs, reduce=None)
        jac = output_jacobian(model, trace, full, per_sample=True)
        for k in full:
            j = jac[k]
            hj = np.einsum("nij,njd->nid", hz, j)
            h = np.einsum("nid,nie->de", j, hj, optimize=True) / n
            out[k].hessian = 0.5 * (h + h.T)

    rank1 = [k for k in layers if modes[k] == "rank1"]
    if rank1:
        hz = output_hessian_ce(probs, reduce=None)
        lam = np.empty(n)
        vecs = np.empty((n, n_cls))
        for i in range(n):
            res = power_iteration(hz[i], max_iters=max_iters, tol=tol, seed=seed)
            lam[i], vecs[i] = res.eigenvalue, res.eigenvector
        # one backward seeded with v_n gives J_n^T v_n for every layer at once
        grads_v = backward(model, trace, vecs)
        for k in rank1:
            out[k].u = layer_gradient(trace.records[k], grads_v.dy[k], per_sample=True)
            out[k].lam = lam
    return out


@dataclass
class PerturbationTable:
    """Estimated loss change per (layer, candidate multiplier)."""
    entries: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def omega(self, k: int, name: str) -> float:
        for nm, om in self.entries[k]:
            if nm == name:
                return om
        raise KeyError(f"layer {k} has no entry for {name!r}")

    def layers(self) -> list[int]:
        return sorted(self.entries)

    def __len__(self):
        return sum(len(v) for v in self.entries.values())

    def to_text(self) -> str:
        lines = ["# perturbation table"]
        for key in sorted(self.metadata):
            lines.append(f"# {key}={self.metadata[key]}")
        lines.append("layer\tmultiplier\tomega")
        for k in self.layers():
            for name, om in self.entries[k]:
                lines.append(f"{k}\t{name}\t{om!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PerturbationTable":
        entries, meta = {}, {}
        header_seen = False
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if "=" in body:
                    key, val = body.split("=", 1)
                    meta[key.strip()] = val.strip()
                continue
            if not header_seen:
                if line.split("\t") != ["layer", "multiplier", "omega"]:
                    raise ValueError(f"line {lineno}: expected header 'layer\\tmultiplier\\tomega'")
                header_seen = True
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"line {lineno}: expected 3 tab-separated fields")
            try:
                entries.setdefault(int(parts[0]), []).append((parts[1], float(parts[2])))
            except ValueError:
                raise ValueError(f"line {lineno}: malformed layer index or omega") from None
        return cls(entries, meta)

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def read(cls, path) -> "PerturbationTable":
        with open(path) as fh:
            return cls.from_text(fh.read())


def build_table(model: ModelGraph, x, labels, library: MultiplierLibrary, hessian_mode: str = "auto",
                seed: int = 0, return_sensitivities: bool = False):
    """Estimate Omega for every library candidate of every multiplicative layer.

    g and H are computed once per layer; candidates are scored purely from
    their error matrices, without re-simulating the model.
    """
    mls = model.mult_layers()
    for k, layer in enumerate(mls):
        if not library.group(layer.bits_x, layer.bits_w):
            raise ValueError(f"layer {k}: library has no {layer.bits_x}x{layer.bits_w} candidates")
    sens = layer_sensitivities(model, x, labels, hessian_mode, seed=seed)
    entries = {}
    for k, layer in enumerate(mls):
        entries[k] = [(m.name, evaluate_omega(sens[k], error_matrix(m)))
                      for m in library.group(layer.bits_x, layer.bits_w)]
    meta = {"batch_size": len(labels), "hessian_mode": hessian_mode,
            "modes": ",".join(sens[k].mode for k in sorted(sens))}
    table = PerturbationTable(entries, meta)
    return (table, sens) if return_sensitivities else table


def spearman(a, b) -> float:
    """Spearman rank correlation with average ranks for ties."""
    from scipy.stats import spearmanr

    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.size < 2 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return 0.0
    r = spearmanr(a, b).statistic
    return float(r) if not math.isnan(r) else 0.0
