"""Compare estimated loss changes with re-simulated ones on a small digits CNN.

For every layer and every candidate multiplier the script prints the
second-order estimate next to the loss change measured by actually running
the substituted network, then the per-layer rank correlation.  Finally it
sweeps the energy budget and reports what the solver picks.

    python3 demos/estimate_vs_actual.py [work_dir]
"""
import sys
import tempfile

from axsub.data import export_digits_idx, load_dataset
from axsub.mullib import generate_library
from axsub.netsim import accuracy, evaluate_loss
from axsub.perturb import spearman
from axsub.pipeline import estimate, prepare_model, sample_subset, select
from axsub.selection import InfeasibleBudget
from axsub.zoo import lenet_small, train_float


def main(work):
    root = export_digits_idx(work)
    x, y = load_dataset(root, "mnist", "train")
    xt, yt = load_dataset(root, "mnist", "test")
    net = train_float(lenet_small(seed=0), x, y, epochs=30, seed=0)
    model = prepare_model(net, x[sample_subset(len(x), 256, 0, 0)], 4)
    lib = generate_library([4], 8, seed=1)
    print(f"float {accuracy(net, xt, yt, mode='float'):.1f}%, 4-bit exact {accuracy(model, xt, yt):.1f}%")

    idx = sample_subset(len(x), 256, 0, 1)
    xs, ys = x[idx], y[idx]
    table = estimate(model, lib, xs, ys)
    base = evaluate_loss(model, xs, ys)
    for k in table.layers():
        print(f"\nlayer {k}")
        est, act = [], []
        for name, om in sorted(table.entries[k], key=lambda t: t[1]):
            d = evaluate_loss(model, xs, ys, {k: name}, lib) - base
            est.append(om)
            act.append(d)
            print(f"  {name:<20} estimate {om:+.5f}  actual {d:+.5f}")
        print(f"  rank correlation {spearman(est, act):.3f}")

    print("\nbudget sweep")
    for r in (1.0, 0.95, 0.9, 0.85, 0.8):
        try:
            sol = select(table, lib, model, r)
        except InfeasibleBudget as err:
            print(f"  R={r}: {err}")
            continue
        acc = accuracy(model, xt, yt, sol.assignment(), lib)
        print(f"  R={r}: ratio {sol.energy_ratio:.4f}, {acc:.1f}%  {', '.join(sol.choices)}")


if __name__ == "__main__":
    if len(sys.argv) > 1:
        main(sys.argv[1])
    else:
        with tempfile.TemporaryDirectory() as d:
            main(d)
