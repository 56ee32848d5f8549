"""Command-line front end.

Exit codes: 0 success, 2 configuration or usage error, 3 infeasible energy
budget, 4 runtime failure.  Every pipeline command accepts ``--config``
(JSON holding PipelineConfig keys) and flag overrides; the dataset root
falls back to ``$AXSUB_DATA``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import data as datamod
from .calib import calibrate
from .modelio import ModelFileError, load_model, save_model
from .mullib import LibraryFormatError, generate_library, read_library, write_library
from .netsim import ModelError, accuracy
from .perturb import PerturbationTable
from .pipeline import (ConfigError, PipelineConfig, StageError, estimate, prepare_model, run_pipeline,
                       sample_subset, select)
from .selection import InfeasibleBudget, SelectionSolution
from .zoo import ARCHITECTURES, train_float

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_RUNTIME = 0, 2, 3, 4

log = logging.getLogger("axsub")

# flag name -> PipelineConfig key
_CFG_FLAGS = {
    "model": "model", "library": "library", "data": "data", "data_kind": "data_kind", "out_dir": "output_dir",
    "table": "table", "solution": "solution", "bits": "bits", "budget": "budget",
    "estimation_batch": "estimation_batch", "calib_samples": "calib_samples", "epochs": "epochs",
    "lr": "lr", "calib_batch": "calib_batch", "hessian_mode": "hessian_mode", "seed": "seed",
    "prepare_samples": "prepare_samples",
}


def _add_config_flags(p, *names):
    p.add_argument("--config", help="JSON file with pipeline settings; flags override it")
    flag_opts = {
        "model": dict(help="model file"),
        "library": dict(help="multiplier library file"),
        "data": dict(help=f"dataset directory (default ${datamod.DATA_ENV})"),
        "data_kind": dict(choices=["mnist", "cifar10"]),
        "out_dir": dict(help="output directory"),
        "table": dict(help="perturbation table file"),
        "solution": dict(help="selection solution file"),
        "bits": dict(help="uniform bitwidth or per-layer map such as 0:8,1:4"),
        "budget": dict(type=float, help="energy ratio budget in (0, 1]"),
        "estimation_batch": dict(type=int),
        "calib_samples": dict(type=int),
        "epochs": dict(type=int),
        "lr": dict(type=float),
        "calib_batch": dict(type=int),
        "hessian_mode": dict(choices=["auto", "full", "rank1"]),
        "seed": dict(type=int),
        "prepare_samples": dict(type=int),
    }
    for n in names:
        p.add_argument("--" + n.replace("_", "-"), dest=n, default=None, **flag_opts[n])


def _config(args, seedless: bool = False) -> PipelineConfig:
    overrides = {_CFG_FLAGS[k]: getattr(args, k) for k in _CFG_FLAGS if getattr(args, k, None) is not None}
    # select and evaluate draw no random numbers
    defaults = {"seed": 0} if seedless else None
    return PipelineConfig.load(getattr(args, "config", None), overrides, defaults)


def _need(value, what):
    if value is None:
        raise ConfigError(f"{what} is required (flag or config)")
    return value


def _load_split(cfg: PipelineConfig, split: str):
    try:
        root = datamod.data_root(cfg.data)
    except datamod.DatasetError as exc:
        raise ConfigError(str(exc)) from None
    return datamod.load_dataset(root, cfg.data_kind, split)


def _check_input(model, x, where):
    if tuple(x.shape[1:]) != tuple(model.input_shape):
        raise ConfigError(f"{where}: dataset samples have shape {tuple(x.shape[1:])}, "
                          f"model expects {tuple(model.input_shape)}")


def _emit(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_lib(args):
    try:
        lib = generate_library(args.bitwidths, args.count, args.seed, args.mred_cap)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    write_library(lib, args.out)
    print(f"wrote {len(lib)} multipliers to {args.out}")


def cmd_export_digits(args):
    out = datamod.export_digits_idx(args.out, args.test_size, args.seed)
    print(f"wrote MNIST-format digits to {out}")


def cmd_train(args):
    x, y = datamod.load_dataset(datamod.data_root(args.data), args.data_kind, "train")
    build = ARCHITECTURES[args.arch]
    model = build(input_shape=tuple(x.shape[1:]), n_classes=int(args.classes), width=args.width, seed=args.seed)
    model = train_float(model, x, y, epochs=args.epochs, lr=args.lr, seed=args.seed, verbose=args.verbose)
    save_model(args.out, model, meta={"arch": args.arch})
    xt, yt = datamod.load_dataset(datamod.data_root(args.data), args.data_kind, "test")
    _emit({"float_accuracy": accuracy(model, xt, yt, mode="float")})


def cmd_prepare(args):
    cfg = _config(args)
    model, _, meta = load_model(_need(cfg.model, "model"))
    x, _ = _load_split(cfg, "train")
    _check_input(model, x, "prepare")
    idx = sample_subset(len(x), cfg.prepare_samples, cfg.seed, 0)
    prepared = prepare_model(model, x[idx], cfg.bits)
    out = _need(args.out, "--out")
    meta = dict(meta)
    meta["bits"] = [layer.bits_x for layer in prepared.mult_layers()]
    save_model(out, prepared, meta=meta)
    xt, yt = _load_split(cfg, "test")
    _emit({"quant_exact_accuracy": accuracy(prepared, xt, yt), "float_accuracy": accuracy(model, xt, yt, mode="float"),
           "bits": meta["bits"], "model": str(out)})


def cmd_estimate(args):
    cfg = _config(args)
    model, _, _ = load_model(_need(cfg.model, "model"))
    lib = read_library(_need(cfg.library, "library"))
    x, y = _load_split(cfg, "train")
    _check_input(model, x, "estimate")
    idx = sample_subset(len(x), cfg.estimation_batch, cfg.seed, 1)
    table = estimate(model, lib, x[idx], y[idx], cfg.hessian_mode, cfg.seed)
    out = _need(args.out or cfg.table, "--out")
    table.write(out)
    print(f"wrote {len(table)} entries to {out}")


def cmd_select(args):
    cfg = _config(args, seedless=True)
    model, _, _ = load_model(_need(cfg.model, "model"))
    lib = read_library(_need(cfg.library, "library"))
    table = PerturbationTable.read(_need(cfg.table, "table"))
    sol = select(table, lib, model, cfg.budget)
    text = sol.to_json() + "\n"
    out = args.out or cfg.solution
    if out:
        Path(out).write_text(text)
    print(text, end="")


def _assignment(cfg):
    sol = SelectionSolution.from_json(Path(_need(cfg.solution, "solution")).read_text())
    return sol.assignment()


def cmd_calibrate(args):
    cfg = _config(args)
    model, _, meta = load_model(_need(cfg.model, "model"))
    lib = read_library(_need(cfg.library, "library"))
    assignment = _assignment(cfg)
    x, y = _load_split(cfg, "train")
    _check_input(model, x, "calibrate")
    idx = sample_subset(len(x), cfg.calib_samples, cfg.seed, 2)
    cal, state = calibrate(model, assignment, lib, x[idx], y[idx], epochs=cfg.epochs, lr=cfg.lr,
                           batch_size=cfg.calib_batch, seed=cfg.seed)
    meta = dict(meta)
    meta["assignment"] = {str(k): v for k, v in sorted(assignment.items())}
    out = _need(args.out, "--out")
    save_model(out, cal, state, meta)
    _emit({"calibration": state.to_dict(), "model": str(out)})


def cmd_evaluate(args):
    cfg = _config(args, seedless=True)
    model, _, meta = load_model(_need(cfg.model, "model"))
    x, y = _load_split(cfg, "test")
    _check_input(model, x, "evaluate")
    result = {}
    if args.float or not model.prepared:
        result["float_accuracy"] = accuracy(model, x, y, mode="float")
    if not model.prepared:
        # a float checkpoint: nothing quantized to evaluate
        _emit(result)
        return
    if cfg.solution is not None:
        assignment = _assignment(cfg)
    elif "assignment" in meta:
        assignment = {int(k): v for k, v in meta["assignment"].items()}
    else:
        assignment = None
    lib = read_library(cfg.library) if cfg.library else None
    if assignment is not None and lib is None:
        raise ConfigError("the model carries a multiplier assignment; --library is required")
    result["accuracy"] = accuracy(model, x, y, assignment, lib)
    result["assignment"] = None if assignment is None else {str(k): v for k, v in sorted(assignment.items())}
    _emit(result)


def cmd_run(args):
    cfg = _config(args)
    model, _, _ = load_model(_need(cfg.model, "model"))
    lib = read_library(_need(cfg.library, "library"))
    train, test = _load_split(cfg, "train"), _load_split(cfg, "test")
    _check_input(model, train[0], "run")
    if not model.prepared:
        idx = sample_subset(len(train[0]), cfg.prepare_samples, cfg.seed, 0)
        float_model = model
        model = prepare_model(model, train[0][idx], cfg.bits)
    else:
        float_model = None
    report, *_ = run_pipeline(cfg, model, lib, train, test, cfg.output_dir, float_model)
    print(report.summary(), end="")
    print(f"artifacts in {cfg.output_dir}")


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="axsub", description="Approximate multiplier substitution for quantized CNNs.")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS/OpenMP worker threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-lib", help="generate a multiplier library")
    s.add_argument("bitwidths", type=int, nargs="+")
    s.add_argument("--count", type=int, default=8, help="generated candidates per bitwidth")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--mred-cap", type=float, default=0.2)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_lib)

    s = sub.add_parser("export-digits", help="write scikit-learn's 8x8 digits as MNIST IDX files")
    s.add_argument("--out", required=True)
    s.add_argument("--test-size", type=int, default=500)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_export_digits)

    s = sub.add_parser("train", help="one-off float training of a bundled architecture")
    s.add_argument("--arch", choices=sorted(ARCHITECTURES), default="lenet-small")
    s.add_argument("--data", default=None)
    s.add_argument("--data-kind", dest="data_kind", choices=["mnist", "cifar10"], default="mnist")
    s.add_argument("--classes", type=int, default=10)
    s.add_argument("--width", type=int, default=8)
    s.add_argument("--epochs", type=int, default=30)
    s.add_argument("--lr", type=float, default=1e-2)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("prepare", help="fold batch norm and fit quantization grids")
    _add_config_flags(s, "model", "data", "data_kind", "bits", "seed", "prepare_samples")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("estimate", help="build the perturbation table")
    _add_config_flags(s, "model", "library", "data", "data_kind", "estimation_batch", "hessian_mode", "seed", "table")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("select", help="solve the multiplier assignment under the energy budget")
    _add_config_flags(s, "model", "library", "table", "budget", "seed", "solution")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_select)

    s = sub.add_parser("calibrate", help="input-scale search and learnable weight clipping")
    _add_config_flags(s, "model", "library", "solution", "data", "data_kind", "calib_samples", "epochs", "lr",
                      "calib_batch", "seed")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("evaluate", help="test-split accuracy")
    _add_config_flags(s, "model", "library", "solution", "data", "data_kind", "seed")
    s.add_argument("--float", action="store_true", help="also report float accuracy")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("run", help="estimate, select, calibrate and evaluate in one go")
    _add_config_flags(s, *_CFG_FLAGS)
    s.set_defaults(func=cmd_run)
    return p


def _limits(threads):
    if threads is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=threads)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _limits(args.threads):
            args.func(args)
    except InfeasibleBudget as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc.cause, InfeasibleBudget):
            return EXIT_INFEASIBLE
        if isinstance(exc.cause, ConfigError):
            return EXIT_CONFIG
        return EXIT_RUNTIME
    except (ConfigError, FileNotFoundError, LibraryFormatError, ModelFileError, datamod.DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ModelError, ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
