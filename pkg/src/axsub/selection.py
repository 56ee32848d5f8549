"""Per-layer multiplier selection under an energy-ratio budget.

The problem is a multiple-choice knapsack: pick one candidate per layer,
minimize the summed perturbation, keep total energy within ``R`` times the
all-exact energy.  ``solve`` is a best-first branch and bound; all
comparisons run on exact integers (floats are dyadic rationals, so scaling by
a common power of two loses nothing; the budget ratio is read as the decimal
it prints as), so the budget check never leaks and
ties are resolved reproducibly: lower objective, then lower energy, then the
lexicographically smaller tuple of candidate names.
"""

from __future__ import annotations

import heapq
import itertools
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .mullib import MultiplierLibrary, error_matrix, error_metrics
from .netsim import LayerShape
from .perturb import PerturbationTable


class InfeasibleBudget(ValueError):
    def __init__(self, min_ratio: float, budget: float):
        self.min_ratio = min_ratio
        self.budget = budget
        super().__init__(f"energy budget R={budget} infeasible; minimum achievable ratio is {min_ratio:.6g}")


class ProblemTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class Candidate:
    name: str
    perturbation: float
    energy: float


@dataclass
class SelectionProblem:
    layers: list
    exact_energy: list
    budget: float
    layer_ids: list | None = None

    def __post_init__(self):
        if not 0 < self.budget <= 1:
            raise ValueError(f"energy ratio budget must be in (0, 1], got {self.budget!r}")
        if len(self.layers) != len(self.exact_energy) or not self.layers:
            raise ValueError("need one candidate list and one exact energy per layer")
        if self.layer_ids is None:
            self.layer_ids = list(range(len(self.layers)))
        for k, cands in enumerate(self.layers):
            if not cands:
                raise ValueError(f"layer {self.layer_ids[k]} has no candidates")
            names = [c.name for c in cands]
            if len(set(names)) != len(names):
                raise ValueError(f"layer {self.layer_ids[k]} has duplicate candidate names")
            for c in cands:
                if not (c.energy > 0 and math.isfinite(c.energy)):
                    raise ValueError(f"layer {self.layer_ids[k]}: candidate {c.name} energy must be positive")
                if not math.isfinite(c.perturbation):
                    raise ValueError(f"layer {self.layer_ids[k]}: candidate {c.name} perturbation not finite")
            if not self.exact_energy[k] > 0:
                raise ValueError(f"layer {self.layer_ids[k]}: exact energy must be positive")


@dataclass
class SelectionSolution:
    choices: list
    objective: float
    energy: float
    energy_ratio: float
    optimal: bool = True
    nodes: int = 0
    layer_ids: list = field(default_factory=list)

    def assignment(self) -> dict:
        return {k: name for k, name in zip(self.layer_ids, self.choices)}

    def to_json(self) -> str:
        return json.dumps({"assignment": {str(k): v for k, v in self.assignment().items()},
                           "objective": self.objective, "energy": self.energy,
                           "energy_ratio": self.energy_ratio, "optimal": self.optimal},
                          indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SelectionSolution":
        d = json.loads(text)
        ids = sorted(int(k) for k in d["assignment"])
        return cls([d["assignment"][str(k)] for k in ids], d["objective"], d["energy"],
                   d["energy_ratio"], d.get("optimal", True), 0, ids)


def layer_energy(shape: LayerShape, pdp: float) -> float:
    """Per-sample energy of all multiplications in a layer."""
    if not pdp > 0:
        raise ValueError(f"pdp must be positive, got {pdp!r}")
    return pdp * shape.n_out * shape.h * shape.w * shape.n_in * shape.kernel_w * shape.kernel_h


# ---------------------------------------------------------------------------
# exact integer encoding
# ---------------------------------------------------------------------------

def budget_fraction(r: float) -> Fraction:
    """The budget as the decimal it was written as (0.7 means 7/10, not the nearest double)."""
    return Fraction(repr(float(r)))


def _common_scale(values) -> int:
    den = 1
    for v in values:
        den = max(den, Fraction(v).denominator)
    return den


def _encode(problem: SelectionProblem):
    """Scale perturbations and energies to Python ints sharing one power-of-two denominator each."""
    pert = [c.perturbation for cands in problem.layers for c in cands]
    ener = [c.energy for cands in problem.layers for c in cands] + list(problem.exact_energy)
    ps, es = _common_scale(pert), _common_scale(ener)
    layers = [[(int(Fraction(c.perturbation) * ps), int(Fraction(c.energy) * es), c.name, i)
               for i, c in enumerate(cands)] for cands in problem.layers]
    total_exact = sum(Fraction(e) * es for e in problem.exact_energy)
    budget = math.floor(budget_fraction(problem.budget) * total_exact)
    return layers, budget, ps, es


def _finish(problem, idx, nodes, optimal=True):
    chosen = [problem.layers[k][i] for k, i in enumerate(idx)]
    energy = math.fsum(c.energy for c in chosen)
    return SelectionSolution(
        choices=[c.name for c in chosen],
        objective=float(sum(Fraction(c.perturbation) for c in chosen)),
        energy=energy,
        energy_ratio=float(sum(Fraction(c.energy) for c in chosen) / sum(Fraction(e) for e in problem.exact_energy)),
        optimal=optimal, nodes=nodes, layer_ids=list(problem.layer_ids))


def _check_feasible(problem, layers, budget, es):
    min_e = sum(min(c[1] for c in cands) for cands in layers)
    if min_e > budget:
        total = sum(Fraction(e) for e in problem.exact_energy)
        raise InfeasibleBudget(float(Fraction(min_e, es) / total), problem.budget)


# ---------------------------------------------------------------------------
# branch and bound
# ---------------------------------------------------------------------------

def _prune_dominated(cands):
    """Drop candidates another one beats in both perturbation and energy (ties -> smaller name)."""
    keep = []
    for c in cands:
        dominated = False
        for d in cands:
            if d is c:
                continue
            if d[0] <= c[0] and d[1] <= c[1] and (d[0] < c[0] or d[1] < c[1] or d[2] < c[2]):
                dominated = True
                break
        if not dominated:
            keep.append(c)
    return sorted(keep, key=lambda c: (c[1], c[0], c[2]))


def _lp_hull(cands):
    """Lower convex hull in (energy, perturbation), ordered by energy."""
    pts = []
    for c in sorted(cands, key=lambda c: (c[1], c[0])):
        if pts and pts[-1][1] == c[1]:
            continue
        if pts and c[0] >= pts[-1][0]:
            continue
        while len(pts) >= 2:
            (p1, e1), (p2, e2) = (pts[-2][0], pts[-2][1]), (pts[-1][0], pts[-1][1])
            # drop middle point if it lies on/above the segment from pts[-2] to c
            if (p2 - p1) * (c[1] - e1) >= (c[0] - p1) * (e2 - e1):
                pts.pop()
            else:
                break
        pts.append(c)
    return pts


class _Bound:
    """Greedy fractional lower bound on the remaining layers' perturbation."""

    def __init__(self, layers):
        self.hulls = [_lp_hull(c) for c in layers]
        self.base_p = [h[0][0] for h in self.hulls]
        self.base_e = [h[0][1] for h in self.hulls]
        self.steps = []
        for k, h in enumerate(self.hulls):
            for a, b in zip(h, h[1:]):
                # upgrading from a to b: spend energy (a.e - b.e) >= 0?  hull is ordered by
                # rising energy and falling perturbation, so moving right costs energy
                self.steps.append((Fraction(b[0] - a[0], b[1] - a[1]), k, b[1] - a[1], b[0] - a[0]))
        self.steps.sort(key=lambda s: s[0])

    def value(self, depth, order, remaining):
        """Lower bound for layers order[depth:], given ``remaining`` energy (exact Fraction result)."""
        free = set(order[depth:])
        if not free:
            return Fraction(0)
        p = sum(self.base_p[k] for k in free)
        cap = remaining - sum(self.base_e[k] for k in free)
        if cap < 0:
            return None
        lb = Fraction(p)
        for slope, k, de, dp in self.steps:
            if k not in free:
                continue
            if slope >= 0 or cap <= 0:
                break
            if de <= cap:
                lb += dp
                cap -= de
            else:
                lb += Fraction(dp * cap, de)
                cap = 0
                break
        return lb


def solve(problem: SelectionProblem, prune_dominated: bool = True) -> SelectionSolution:
    """Globally optimal assignment by best-first branch and bound."""
    layers, budget, ps, es = _encode(problem)
    _check_feasible(problem, layers, budget, es)
    work = [_prune_dominated(c) if prune_dominated else sorted(c, key=lambda c: (c[1], c[0], c[2]))
            for c in layers]
    n = len(work)
    # branch on layers with the widest perturbation spread first
    order = sorted(range(n), key=lambda k: (-(max(c[0] for c in work[k]) - min(c[0] for c in work[k])), k))
    bound = _Bound(work)
    min_e_suffix = [0] * (n + 1)
    for d in range(n - 1, -1, -1):
        min_e_suffix[d] = min_e_suffix[d + 1] + min(c[1] for c in work[order[d]])

    best_key = None
    best_sel = None
    counter = itertools.count()
    root = bound.value(0, order, budget)
    heap = [(root, 0, next(counter), 0, 0, ())]
    nodes = 0
    while heap:
        lb, _, _, p_acc, e_acc, sel = heapq.heappop(heap)
        if best_key is not None and lb > best_key[0]:
            break
        nodes += 1
        depth = len(sel)
        if depth == n:
            names = [None] * n
            for d, c in enumerate(sel):
                names[order[d]] = c[2]
            key = (p_acc, e_acc, tuple(names))
            if best_key is None or key < best_key:
                best_key = key
                best_sel = sel
            continue
        k = order[depth]
        for c in work[k]:
            e_new = e_acc + c[1]
            if e_new + min_e_suffix[depth + 1] > budget:
                continue
            rest = bound.value(depth + 1, order, budget - e_new)
            if rest is None:
                continue
            child_lb = p_acc + c[0] + rest
            if best_key is not None and child_lb > best_key[0]:
                continue
            heapq.heappush(heap, (child_lb, -(depth + 1), next(counter), p_acc + c[0], e_new, sel + (c,)))
    idx = [0] * n
    for d, c in enumerate(best_sel):
        idx[order[d]] = c[3]
    return _finish(problem, idx, nodes)


def solve_exhaustive(problem: SelectionProblem, limit: int = 10 ** 6) -> SelectionSolution:
    """Enumerate every assignment; exact Fractions, same tie-breaking as ``solve``."""
    size = math.prod(len(c) for c in problem.layers)
    if size > limit:
        raise ProblemTooLarge(f"{size} assignments exceed the enumeration limit {limit}")
    total = sum(Fraction(e) for e in problem.exact_energy)
    cap = budget_fraction(problem.budget) * total
    best = None
    for combo in itertools.product(*[range(len(c)) for c in problem.layers]):
        chosen = [problem.layers[k][i] for k, i in enumerate(combo)]
        energy = sum(Fraction(c.energy) for c in chosen)
        if energy > cap:
            continue
        key = (sum(Fraction(c.perturbation) for c in chosen), energy, tuple(c.name for c in chosen))
        if best is None or key < best[0]:
            best = (key, combo)
    if best is None:
        min_e = sum(min(Fraction(c.energy) for c in cands) for cands in problem.layers)
        raise InfeasibleBudget(float(min_e / total), problem.budget)
    return _finish(problem, list(best[1]), size)


# ---------------------------------------------------------------------------
# building problems
# ---------------------------------------------------------------------------

def problem_from_table(table: PerturbationTable, library: MultiplierLibrary, shapes, budget: float,
                       layer_bits=None) -> SelectionProblem:
    """Attach per-layer energies (from ``shapes`` and library PDPs) to a perturbation table."""
    layers, exact = [], []
    ids = table.layers()
    for k in ids:
        cands = []
        for name, om in table.entries[k]:
            cands.append(Candidate(name, om, layer_energy(shapes[k], library.get(name).pdp)))
        bits = layer_bits[k] if layer_bits is not None else library.get(table.entries[k][0][0]).bits
        exact.append(layer_energy(shapes[k], library.exact(*bits).pdp))
        layers.append(cands)
    return SelectionProblem(layers, exact, budget, ids)


def baseline_tables(library: MultiplierLibrary, layer_bits, metric: str = "l2_error") -> PerturbationTable:
    """Layer-independent scores in place of Omega: ``l2_error`` (||E||_2) or ``mred``."""
    if metric not in ("l2_error", "mred"):
        raise ValueError(f"unknown baseline metric {metric!r}")
    entries = {}
    for k, bits in enumerate(layer_bits):
        group = library.group(*bits)
        if not group:
            raise ValueError(f"library has no {bits[0]}x{bits[1]} multipliers")
        if metric == "l2_error":
            entries[k] = [(m.name, float(np.linalg.norm(error_matrix(m).flat.astype(np.float64)))) for m in group]
        else:
            entries[k] = [(m.name, error_metrics(m).mred) for m in group]
    return PerturbationTable(entries, {"baseline": metric})


def uniform_assignments(library: MultiplierLibrary, layer_bits) -> list[dict]:
    """All assignments using one multiplier per bitwidth group across every layer of that width."""
    groups = sorted(set(layer_bits))
    opts = [library.group(*g) for g in groups]
    out = []
    for combo in itertools.product(*opts):
        pick = dict(zip(groups, combo))
        out.append({k: pick[b].name for k, b in enumerate(layer_bits)})
    return out


def assignment_energy_ratio(assignment: dict, library: MultiplierLibrary, shapes, layer_bits) -> float:
    num = math.fsum(layer_energy(shapes[k], library.get(assignment[k]).pdp) for k in range(len(shapes)))
    den = math.fsum(layer_energy(shapes[k], library.exact(*layer_bits[k]).pdp) for k in range(len(shapes)))
    return num / den
