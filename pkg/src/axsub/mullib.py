"""Lookup-table multipliers: generators, error characterization and library files.

A multiplier of ``a x b`` bits is a ``2**a x 2**b`` table of unsigned
products.  Operands are unsigned codes; signedness lives in the affine
quantization offsets, so the table never sees negative inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .quant import MAX_BITS, MIN_BITS

PROVENANCES = ("exact", "generated", "imported")
# pJ per multiplication per operand-bit product; proxy only
PDP_KAPPA = 0.1


class LibraryFormatError(ValueError):
    pass


def _check_bitwidth(bits):
    if not isinstance(bits, (int, np.integer)) or not MIN_BITS <= bits <= MAX_BITS:
        raise ValueError(f"multiplier bitwidth must be in [{MIN_BITS}, {MAX_BITS}], got {bits!r}")
    return int(bits)


@dataclass(frozen=True, eq=False)
class LutMultiplier:
    name: str
    bitwidth_a: int
    bitwidth_b: int
    table: np.ndarray
    pdp: float
    provenance: str = "generated"

    def __post_init__(self):
        a = _check_bitwidth(self.bitwidth_a)
        b = _check_bitwidth(self.bitwidth_b)
        if not self.name or any(c.isspace() for c in self.name) or self.name.startswith("#"):
            raise ValueError(f"invalid multiplier name {self.name!r}")
        table = np.array(self.table, dtype=np.int64)
        if table.shape != (1 << a, 1 << b):
            raise ValueError(
                f"{self.name}: table shape {table.shape} != {(1 << a, 1 << b)} for {a}x{b} bits")
        top = (1 << (a + b)) - 1
        if table.min() < 0 or table.max() > top:
            bad = np.argwhere((table < 0) | (table > top))[0]
            raise ValueError(
                f"{self.name}: entry {table[tuple(bad)]} at {tuple(int(x) for x in bad)} "
                f"outside [0, {top}]")
        if not (math.isfinite(self.pdp) and self.pdp > 0):
            raise ValueError(f"{self.name}: pdp must be positive, got {self.pdp!r}")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"{self.name}: unknown provenance {self.provenance!r}")
        table.setflags(write=False)
        object.__setattr__(self, "table", table)
        object.__setattr__(self, "bitwidth_a", a)
        object.__setattr__(self, "bitwidth_b", b)
        object.__setattr__(self, "pdp", float(self.pdp))

    @property
    def bits(self) -> tuple[int, int]:
        return self.bitwidth_a, self.bitwidth_b

    @property
    def is_exact(self) -> bool:
        return bool(np.array_equal(self.table, _exact_table(*self.bits)))

    def __eq__(self, other):
        if not isinstance(other, LutMultiplier):
            return NotImplemented
        return (self.name == other.name and self.bits == other.bits
                and self.pdp == other.pdp and self.provenance == other.provenance
                and np.array_equal(self.table, other.table))

    def __hash__(self):
        return hash((self.name, self.bits, self.pdp))

    @property
    def error(self) -> "ErrorMatrix":
        return error_matrix(self)

    @property
    def mred(self) -> float:
        return error_metrics(self).mred


@dataclass(frozen=True)
class ErrorMatrix:
    bitwidth_a: int
    bitwidth_b: int
    entries: np.ndarray

    @property
    def flat(self) -> np.ndarray:
        """Row-major flattening, ``e[i * 2**b + j] = E[i, j]``."""
        return self.entries.reshape(-1)


@dataclass(frozen=True)
class MulErrorMetrics:
    mred: float
    med: float
    max_abs_error: int
    error_rate: float


def _exact_table(a: int, b: int) -> np.ndarray:
    return np.arange(1 << a, dtype=np.int64)[:, None] * np.arange(1 << b, dtype=np.int64)[None, :]


def pdp_exact(a: int, b: int) -> float:
    return PDP_KAPPA * a * b


def proxy_pdp(a: int, b: int, dropped_pp_bits: int) -> float:
    """Energy proxy: each removed partial-product bit saves half its share."""
    return pdp_exact(a, b) * (1.0 - 0.5 * dropped_pp_bits / (a * b))


def gen_exact(bitwidth_a: int, bitwidth_b: int) -> LutMultiplier:
    a, b = _check_bitwidth(bitwidth_a), _check_bitwidth(bitwidth_b)
    return LutMultiplier(f"exact{a}x{b}", a, b, _exact_table(a, b), pdp_exact(a, b), "exact")


def _pp_bits_in_columns(a: int, b: int, n_cols: int) -> int:
    return sum(1 for p in range(a) for q in range(b) if p + q < n_cols)


def gen_truncated(bitwidth_a: int, bitwidth_b: int, drop_columns: int) -> LutMultiplier:
    """Clear the ``drop_columns`` least-significant product columns."""
    a, b = _check_bitwidth(bitwidth_a), _check_bitwidth(bitwidth_b)
    if not isinstance(drop_columns, (int, np.integer)) or not 0 <= drop_columns < a + b:
        raise ValueError(f"drop_columns must be in [0, {a + b - 1}], got {drop_columns!r}")
    if drop_columns == 0:
        return gen_exact(a, b)
    table = (_exact_table(a, b) >> drop_columns) << drop_columns
    pdp = proxy_pdp(a, b, _pp_bits_in_columns(a, b, drop_columns))
    return LutMultiplier(f"trunc{a}x{b}_d{drop_columns}", a, b, table, pdp, "generated")


def _mred_of(table: np.ndarray, exact: np.ndarray) -> float:
    return float(np.mean(np.abs(table - exact) / np.maximum(exact, 1)))


def _pruned_table(a: int, b: int, removed, compensation: int) -> np.ndarray:
    i = np.arange(1 << a, dtype=np.int64)[:, None]
    j = np.arange(1 << b, dtype=np.int64)[None, :]
    table = _exact_table(a, b).copy()
    for p, q in removed:
        table -= (((i >> p) & 1) * ((j >> q) & 1)) << (p + q)
    if compensation:
        table += compensation * ((i > 0) & (j > 0))
    return np.clip(table, 0, (1 << (a + b)) - 1)


def gen_perturbed(bitwidth_a: int, bitwidth_b: int, seed: int, target_mred: float = 0.2) -> LutMultiplier:
    """Seeded approximate multiplier with MRED no larger than ``target_mred``.

    Two stages.  First, partial-product AND terms are removed in a randomized
    low-significance-first order, each removal paired with the compensation
    constant (added when both operands are nonzero) that minimizes MRED; a
    removal is kept only while MRED stays within a seed-drawn share of the
    budget.  Second, a few single table entries are nudged by signed powers
    of two, again only inside the budget.  The energy proxy counts removed
    partial-product bits.
    """
    a, b = _check_bitwidth(bitwidth_a), _check_bitwidth(bitwidth_b)
    if not 0.0 < target_mred <= 0.2:
        raise ValueError(f"target_mred must be in (0, 0.2], got {target_mred!r}")
    rng = np.random.default_rng(seed)
    exact = _exact_table(a, b)
    top = (1 << (a + b)) - 1

    pp = [(p, q) for p in range(a) for q in range(b)]
    jitter = rng.uniform(0.0, 1.5, size=len(pp))
    order = sorted(range(len(pp)), key=lambda t: (pp[t][0] + pp[t][1] + jitter[t], t))
    prune_budget = target_mred * rng.uniform(0.3, 1.0)

    removed: list[tuple[int, int]] = []
    comp = 0
    table = exact
    misses = 0
    for t in order:
        if misses >= 4:
            break
        trial = removed + [pp[t]]
        span = sum(1 << (p + q) for p, q in trial)
        best = None
        for c in np.unique(np.linspace(0, span, min(span + 1, 33)).round().astype(int)):
            c = int(c)
            cand = _pruned_table(a, b, trial, c)
            m = _mred_of(cand, exact)
            if best is None or m < best[0]:
                best = (m, c, cand)
        if best[0] <= prune_budget:
            removed, comp, table = trial, best[1], best[2]
            misses = 0
        else:
            misses += 1

    table = table.copy()
    mred = _mred_of(table, exact)
    n_tweaks = int(rng.integers(1, 9))
    max_shift = max(1, (a + b) // 2)
    accepted = 0
    for _ in range(64 * n_tweaks):
        if accepted >= n_tweaks:
            break
        i = int(rng.integers(0, 1 << a))
        j = int(rng.integers(0, 1 << b))
        delta = int(rng.choice([-1, 1])) << int(rng.integers(0, max_shift))
        new = table[i, j] + delta
        if not 0 <= new <= top:
            continue
        d_mred = (abs(new - exact[i, j]) - abs(table[i, j] - exact[i, j])) / max(exact[i, j], 1) / exact.size
        if mred + d_mred <= target_mred:
            table[i, j] = new
            mred += d_mred
            accepted += 1
    if np.array_equal(table, exact):
        i, j = (1 << a) - 1, (1 << b) - 1
        if 1.0 / (i * j) / exact.size <= target_mred:
            table[i, j] -= 1

    name = f"pp{a}x{b}_s{seed}_m{int(round(target_mred * 1000)):03d}"
    return LutMultiplier(name, a, b, table, proxy_pdp(a, b, len(removed)), "generated")


def error_matrix(mul: LutMultiplier) -> ErrorMatrix:
    entries = mul.table - _exact_table(*mul.bits)
    entries.setflags(write=False)
    return ErrorMatrix(mul.bitwidth_a, mul.bitwidth_b, entries)


def error_metrics(mul: LutMultiplier) -> MulErrorMetrics:
    exact = _exact_table(*mul.bits)
    err = np.abs(mul.table - exact)
    return MulErrorMetrics(
        mred=float(np.mean(err / np.maximum(exact, 1))),
        med=float(np.mean(err)),
        max_abs_error=int(err.max()),
        error_rate=float(np.mean(err != 0)),
    )


@dataclass
class MultiplierLibrary:
    entries: list[LutMultiplier] = field(default_factory=list)

    def __post_init__(self):
        self.entries = list(self.entries)
        seen = set()
        for m in self.entries:
            if m.name in seen:
                raise ValueError(f"duplicate multiplier name {m.name!r}")
            seen.add(m.name)
        for bits in self.groups():
            exacts = [m for m in self.group(*bits) if m.provenance == "exact"]
            if len(exacts) != 1:
                raise ValueError(f"group {bits[0]}x{bits[1]} needs exactly one exact multiplier, has {len(exacts)}")
            if not exacts[0].is_exact:
                raise ValueError(f"{exacts[0].name}: marked exact but table is not i*j")

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def __eq__(self, other):
        return isinstance(other, MultiplierLibrary) and self.entries == other.entries

    def groups(self) -> list[tuple[int, int]]:
        return sorted({m.bits for m in self.entries})

    def group(self, a: int, b: int) -> list[LutMultiplier]:
        return [m for m in self.entries if m.bits == (a, b)]

    def exact(self, a: int, b: int) -> LutMultiplier:
        for m in self.group(a, b):
            if m.provenance == "exact":
                return m
        raise KeyError(f"no exact {a}x{b} multiplier in library")

    def get(self, name: str) -> LutMultiplier:
        for m in self.entries:
            if m.name == name:
                return m
        raise KeyError(f"unknown multiplier {name!r}")

    def names(self) -> list[str]:
        return [m.name for m in self.entries]

    def filter_mred(self, cap: float) -> "MultiplierLibrary":
        return MultiplierLibrary([m for m in self.entries if m.provenance == "exact" or m.mred <= cap])


def write_library(lib: MultiplierLibrary, path) -> None:
    Path(path).write_text(format_library(lib))


def format_library(lib: MultiplierLibrary) -> str:
    lines = ["# multiplier library", "# pdp in pJ per multiplication; pdp_source=proxy marks model estimates"]
    for m in lib:
        met = error_metrics(m)
        source = "measured" if m.provenance == "imported" else "proxy"
        lines.append(f"# mred={met.mred:.6f} med={met.med:.6f} max_abs={met.max_abs_error} "
                     f"error_rate={met.error_rate:.6f} pdp_source={source}")
        lines.append(f"mul {m.name} {m.bitwidth_a} {m.bitwidth_b} {m.pdp!r} {m.provenance}")
        lines.extend(" ".join(str(int(v)) for v in row) for row in m.table)
        lines.append("end")
    return "\n".join(lines) + "\n"


def read_library(path) -> MultiplierLibrary:
    return parse_library(Path(path).read_text(), source=str(path))


def parse_library(text: str, source: str = "<string>") -> MultiplierLibrary:
    lines = [(n, ln.strip()) for n, ln in enumerate(text.splitlines(), 1)]
    lines = [(n, ln) for n, ln in lines if ln and not ln.startswith("#")]
    entries: list[LutMultiplier] = []
    names: set[str] = set()
    pos = 0

    def fail(msg, lineno, name=None):
        where = f"{source}:{lineno}"
        raise LibraryFormatError(f"{where}: {name + ': ' if name else ''}{msg}")

    while pos < len(lines):
        lineno, head = lines[pos]
        tok = head.split()
        if tok[0] != "mul" or len(tok) != 6:
            fail(f"expected 'mul <name> <a> <b> <pdp> <provenance>', got {head!r}", lineno)
        _, name, a_s, b_s, pdp_s, prov = tok
        try:
            a, b, pdp = int(a_s), int(b_s), float(pdp_s)
        except ValueError:
            fail("non-numeric bitwidth or pdp", lineno, name)
        if not (MIN_BITS <= a <= MAX_BITS and MIN_BITS <= b <= MAX_BITS):
            fail(f"bitwidths {a}x{b} out of range", lineno, name)
        if name in names:
            fail("duplicate multiplier name", lineno, name)
        names.add(name)
        rows = []
        top = (1 << (a + b)) - 1
        for r in range(1 << a):
            pos += 1
            if pos >= len(lines):
                fail(f"unexpected end of file in table row {r}", lineno, name)
            rn, row = lines[pos]
            if row == "end":
                fail(f"dimension mismatch: {r} rows, expected {1 << a}", rn, name)
            try:
                vals = [int(v) for v in row.split()]
            except ValueError:
                fail(f"non-integer value in row {r}", rn, name)
            if len(vals) != (1 << b):
                fail(f"dimension mismatch: row {r} has {len(vals)} entries, expected {1 << b}", rn, name)
            for c, v in enumerate(vals):
                if not 0 <= v <= top:
                    fail(f"out-of-range entry {v} at ({r}, {c}); max {top}", rn, name)
            rows.append(vals)
        pos += 1
        if pos >= len(lines) or lines[pos][1] != "end":
            where = lines[pos][0] if pos < len(lines) else lineno
            fail(f"dimension mismatch: expected 'end' after {1 << a} rows", where, name)
        pos += 1
        try:
            entries.append(LutMultiplier(name, a, b, np.array(rows, dtype=np.int64), pdp, prov))
        except ValueError as exc:
            fail(str(exc), lineno, name)
    try:
        return MultiplierLibrary(entries)
    except ValueError as exc:
        raise LibraryFormatError(f"{source}: {exc}") from None


def generate_library(bitwidths, count: int, seed: int, mred_cap: float = 0.2) -> MultiplierLibrary:
    """Exact reference plus ``count`` seeded candidates per square bitwidth.

    Truncated multipliers within the cap come first, the rest are filled
    with ``gen_perturbed`` draws.  Duplicate tables are skipped.
    """
    entries = []
    for bits in bitwidths:
        exact = gen_exact(bits, bits)
        entries.append(exact)
        seen = {exact.table.tobytes()}
        made = 0
        for d in range(1, 2 * bits):
            if made >= count:
                break
            m = gen_truncated(bits, bits, d)
            if m.mred <= mred_cap and m.table.tobytes() not in seen:
                entries.append(m)
                seen.add(m.table.tobytes())
                made += 1
        draws = 0
        while made < count and draws < 50 * count:
            m = gen_perturbed(bits, bits, seed * 1000 + draws, mred_cap)
            draws += 1
            if m.table.tobytes() in seen:
                continue
            entries.append(m)
            seen.add(m.table.tobytes())
            made += 1
    return MultiplierLibrary(entries)
