"""End-to-end workflow: prepare -> estimate -> select -> calibrate -> evaluate.

Every stage is a plain function so scripts can run them piecemeal;
``run_pipeline`` chains them and writes a report directory.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .calib import calibrate, layer_outputs, mre
from .mullib import MultiplierLibrary, error_metrics
from .netsim import ModelGraph, accuracy, fold_batchnorm, forward, layer_shapes
from .perturb import HESSIAN_MODES, PerturbationTable, build_table
from .quant import check_bits, fit_params
from .selection import SelectionSolution, layer_energy, problem_from_table, solve


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    """A failure inside one pipeline stage; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineConfig:
    seed: int
    model: str | None = None
    library: str | None = None
    data: str | None = None
    data_kind: str = "mnist"
    output_dir: str = "axsub-out"
    table: str | None = None
    solution: str | None = None
    bits: object = 4
    budget: float = 0.8
    estimation_batch: int = 256
    calib_samples: int = 1024
    epochs: int = 5
    lr: float = 0.1
    calib_batch: int = 64
    hessian_mode: str = "auto"
    prepare_samples: int = 256

    def __post_init__(self):
        if self.seed is None or isinstance(self.seed, bool) or not isinstance(self.seed, int):
            raise ConfigError("seed is mandatory and must be an integer")
        if not (isinstance(self.budget, (int, float)) and 0.0 < self.budget <= 1.0):
            raise ConfigError(f"budget (energy ratio) must be in (0, 1], got {self.budget!r}")
        for name in ("estimation_batch", "calib_samples", "calib_batch", "prepare_samples"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if not isinstance(self.epochs, int) or self.epochs < 0:
            raise ConfigError(f"epochs must be a non-negative integer, got {self.epochs!r}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr!r}")
        if self.hessian_mode not in HESSIAN_MODES:
            raise ConfigError(f"hessian_mode must be one of {HESSIAN_MODES}")
        if self.data_kind not in ("mnist", "cifar10"):
            raise ConfigError(f"data_kind must be 'mnist' or 'cifar10', got {self.data_kind!r}")
        try:
            parse_bits(self.bits)
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        if "seed" not in d:
            raise ConfigError("seed is mandatory")
        return cls(**d)

    @classmethod
    def load(cls, path, overrides: dict | None = None, defaults: dict | None = None) -> "PipelineConfig":
        d = dict(defaults or {})
        if path is not None:
            try:
                with open(path) as fh:
                    loaded = json.load(fh)
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from None
            if not isinstance(loaded, dict):
                raise ConfigError(f"config {path} must hold a JSON object")
            d.update(loaded)
        d.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)


def parse_bits(bits, n_layers: int | None = None) -> list | int:
    """Normalize a bitwidth setting.

    Accepts an int (uniform), a list, a ``{layer: bits}`` mapping (JSON keys
    may be strings) or a string such as ``"4"`` or ``"0:8,1:4"``.  Returns an
    int for uniform settings when ``n_layers`` is None, else a full list.
    """
    if isinstance(bits, str):
        if ":" in bits:
            bits = {int(k): int(v) for k, v in (p.split(":") for p in bits.split(",") if p)}
        else:
            bits = int(bits)
    if isinstance(bits, (int, np.integer)) and not isinstance(bits, bool):
        check_bits(int(bits))
        return int(bits) if n_layers is None else [int(bits)] * n_layers
    if isinstance(bits, dict):
        m = {int(k): check_bits(int(v)) for k, v in bits.items()}
        if n_layers is None:
            return m
        missing = sorted(set(range(n_layers)) - set(m))
        extra = sorted(set(m) - set(range(n_layers)))
        if missing or extra:
            raise ValueError(f"bitwidth map must cover layers 0..{n_layers - 1} exactly "
                             f"(missing {missing}, unknown {extra})")
        return [m[k] for k in range(n_layers)]
    if isinstance(bits, (list, tuple)):
        out = [check_bits(int(v)) for v in bits]
        if n_layers is not None and len(out) != n_layers:
            raise ValueError(f"bitwidth list has {len(out)} entries for {n_layers} layers")
        return out
    raise TypeError(f"unsupported bitwidth setting {bits!r}")


def sample_subset(n_total: int, n: int, seed: int, salt: int = 0) -> np.ndarray:
    """Deterministic subset of ``min(n, n_total)`` indices, sorted."""
    rng = np.random.default_rng([seed, salt])
    return np.sort(rng.permutation(n_total)[:min(n, n_total)])


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def prepare_model(model: ModelGraph, x_sample, bits) -> ModelGraph:
    """Fold batch norm, then fit min/max weight and activation grids per layer.

    Activation ranges come from the float model on ``x_sample``.
    """
    model = fold_batchnorm(model)
    mls = model.mult_layers()
    per_layer = parse_bits(bits, len(mls))
    trace = forward(model, np.asarray(x_sample, dtype=np.float64), mode="float", retain=True)
    for k, layer in enumerate(mls):
        layer.bits_x = layer.bits_w = per_layer[k]
        layer.qw = fit_params(layer.w2d, per_layer[k], 0.0)
        layer.qx = fit_params(trace.records[k].x, per_layer[k], 0.0)
    return model


def layer_bits(model: ModelGraph) -> list[tuple[int, int]]:
    return [(layer.bits_x, layer.bits_w) for layer in model.mult_layers()]


def estimate(model: ModelGraph, library: MultiplierLibrary, x, y, hessian_mode="auto", seed=0) -> PerturbationTable:
    return build_table(model, x, y, library, hessian_mode, seed=seed)


def select(table: PerturbationTable, library: MultiplierLibrary, model: ModelGraph, budget: float) -> SelectionSolution:
    problem = problem_from_table(table, library, layer_shapes(model), budget, layer_bits(model))
    return solve(problem)


def output_difference(model_approx, model_exact, x, assignment, library) -> dict:
    """Per-layer pre-activation outputs of the approximate and quantized-exact models."""
    ya = layer_outputs(model_approx, x, assignment, library)
    ye = layer_outputs(model_exact, x)
    return {k: (ya[k], ye[k]) for k in ya}


def _diff_stats(a, e) -> dict:
    d = a - e
    return {"mre": mre(a, e), "mean_diff": float(d.mean()), "std_diff": float(d.std()),
            "max_abs_diff": float(np.abs(d).max())}


@dataclass
class RunReport:
    layers: list = field(default_factory=list)
    totals: dict = field(default_factory=dict)
    accuracy: dict = field(default_factory=dict)
    output_stats: dict = field(default_factory=dict)
    calibration: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def summary(self) -> str:
        t, a = self.totals, self.accuracy
        lines = ["approximate multiplier substitution report", ""]
        lines.append(f"{'layer':>5}  {'kind':<7} {'bits':<5} {'multiplier':<22} {'omega':>12} {'energy':>12}")
        for r in self.layers:
            lines.append(f"{r['layer']:>5}  {r['kind']:<7} {r['bits']:<5} {r['multiplier']:<22} "
                         f"{r['omega']:>12.5g} {r['energy']:>12.6g}")
        lines.append("")
        lines.append(f"energy ratio {t['energy_ratio']:.4f} (budget {t['budget']:.4f}), "
                     f"objective {t['objective']:.6g}")
        for key in ("float", "quant_exact", "approx_pre", "approx_post"):
            if a.get(key) is not None:
                lines.append(f"accuracy {key:<12} {a[key]:.2f}%")
        lines.append("")
        lines.append("per-layer output MRE vs quantized-exact (before -> after calibration)")
        for k in sorted(self.output_stats, key=int):
            s = self.output_stats[k]
            lines.append(f"  layer {k}: {s['before']['mre']:.6g} -> {s['after']['mre']:.6g}")
        return "\n".join(lines) + "\n"


def _histograms(pairs_before, pairs_after, bins=41) -> dict:
    out = {}
    for k in pairs_before:
        db = pairs_before[k][0] - pairs_before[k][1]
        da = pairs_after[k][0] - pairs_after[k][1]
        lim = float(max(np.abs(db).max(), np.abs(da).max(), 1e-12))
        edges = np.linspace(-lim, lim, bins + 1)
        out[k] = (edges, np.histogram(db, edges)[0], np.histogram(da, edges)[0])
    return out


def write_distributions(out_dir, hist: dict) -> list[Path]:
    paths = []
    for k, (edges, hb, ha) in sorted(hist.items()):
        p = Path(out_dir) / f"layer{k}_output_diff.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin_lo", "bin_hi", "count_before", "count_after"])
            for i in range(len(hb)):
                w.writerow([repr(float(edges[i])), repr(float(edges[i + 1])), int(hb[i]), int(ha[i])])
        paths.append(p)
    return paths


def _stage(name, timings, fn, *args, **kwargs):
    t0 = time.perf_counter()
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc
    finally:
        timings[name] = time.perf_counter() - t0


def run_pipeline(cfg: PipelineConfig, model: ModelGraph, library: MultiplierLibrary, train, test,
                 out_dir=None, float_model: ModelGraph | None = None):
    """Estimate, select, calibrate and evaluate a prepared model.

    ``train`` and ``test`` are ``(x, y)`` pairs.  Returns ``(report,
    calibrated_model, calib_state, table, solution, timings)``; when
    ``out_dir`` is given the artifacts are written there too.
    """
    timings = {}
    xtr, ytr = train
    xte, yte = test
    if not model.prepared:
        raise StageError("estimate", ValueError("model is not prepared; run prepare first"))
    est_idx = sample_subset(len(xtr), cfg.estimation_batch, cfg.seed, 1)
    cal_idx = sample_subset(len(xtr), cfg.calib_samples, cfg.seed, 2)

    table = _stage("estimate", timings, estimate, model, library, xtr[est_idx], ytr[est_idx],
                   cfg.hessian_mode, cfg.seed)
    solution = _stage("select", timings, select, table, library, model, cfg.budget)
    assignment = solution.assignment()
    cal_model, state = _stage("calibrate", timings, calibrate, model, assignment, library,
                              xtr[cal_idx], ytr[cal_idx], epochs=cfg.epochs, lr=cfg.lr,
                              batch_size=cfg.calib_batch, seed=cfg.seed)

    def _evaluate():
        acc = {
            "float": accuracy(float_model if float_model is not None else model, xte, yte, mode="float"),
            "quant_exact": accuracy(model, xte, yte),
            "approx_pre": accuracy(model, xte, yte, assignment, library),
            "approx_post": accuracy(cal_model, xte, yte, assignment, library),
        }
        before = output_difference(model, model, xtr[cal_idx], assignment, library)
        after = output_difference(cal_model, model, xtr[cal_idx], assignment, library)
        return acc, before, after

    acc, before, after = _stage("evaluate", timings, _evaluate)

    shapes = layer_shapes(model)
    bits = layer_bits(model)
    rows = []
    for k, name in sorted(assignment.items()):
        mul = library.get(name)
        rows.append({
            "layer": k, "kind": model.mult_layers()[k].kind, "bits": f"{bits[k][0]}x{bits[k][1]}",
            "multiplier": name, "omega": table.omega(k, name),
            "energy": layer_energy(shapes[k], mul.pdp),
            "exact_energy": layer_energy(shapes[k], library.exact(*bits[k]).pdp),
            "mred": error_metrics(mul).mred,
        })
    report = RunReport(
        layers=rows,
        totals={"energy": math.fsum(r["energy"] for r in rows),
                "exact_energy": math.fsum(r["exact_energy"] for r in rows),
                "energy_ratio": solution.energy_ratio, "objective": solution.objective,
                "budget": cfg.budget, "optimal": solution.optimal},
        accuracy=acc,
        output_stats={str(k): {"before": _diff_stats(*before[k]), "after": _diff_stats(*after[k])}
                      for k in sorted(before)},
        calibration=state.to_dict(),
        config={k: v for k, v in cfg.to_dict().items() if k != "output_dir"},
    )
    if out_dir is not None:
        from .modelio import save_model

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json())
        (out / "summary.txt").write_text(report.summary())
        table.write(out / "table.tsv")
        (out / "solution.json").write_text(solution.to_json() + "\n")
        save_model(out / "calibrated.axm", cal_model, state, {"assignment": {str(k): v for k, v in assignment.items()}})
        write_distributions(out, _histograms(before, after))
        (out / "timings.json").write_text(json.dumps(timings, indent=2, sort_keys=True) + "\n")
    return report, cal_model, state, table, solution, timings
