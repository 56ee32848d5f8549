import re

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from axsub.mullib import (LibraryFormatError, LutMultiplier, MultiplierLibrary, error_matrix, error_metrics,
                          format_library, gen_exact, gen_perturbed, gen_truncated, generate_library,
                          parse_library, pdp_exact, read_library, write_library)


def products(a, b):
    return np.arange(1 << a)[:, None] * np.arange(1 << b)[None, :]


def test_exact_tables():
    assert gen_exact(2, 2).table[3][3] == 9
    assert gen_exact(4, 4).table[15][15] == 225
    assert not error_matrix(gen_exact(2, 2)).entries.any()
    assert error_matrix(gen_exact(2, 2)).entries.shape == (4, 4)
    assert gen_exact(3, 5).table.shape == (8, 32)
    assert gen_exact(4, 4).pdp == pytest.approx(0.1 * 16)


@pytest.mark.parametrize("bits", [1, 9, 0])
def test_bitwidth_rejected(bits):
    with pytest.raises(ValueError, match="bitwidth"):
        gen_exact(bits, 4)


def test_truncated_examples():
    t = gen_truncated(2, 2, 1)
    assert t.table[3][3] == 8
    e = error_matrix(t).entries
    assert e[3][1] == -1 and e[1][1] == -1 and e[2][1] == 0
    m = error_metrics(t)
    assert m.med == pytest.approx(0.25)
    assert m.error_rate == pytest.approx(0.25)
    assert gen_truncated(2, 2, 0) == gen_exact(2, 2)


def test_truncated_range_checked():
    with pytest.raises(ValueError):
        gen_truncated(2, 2, 4)
    with pytest.raises(ValueError):
        gen_truncated(2, 2, -1)


def test_truncation_never_overshoots_and_med_monotone():
    for a, b in [(2, 2), (3, 4), (4, 4)]:
        meds = []
        for d in range(a + b):
            t = gen_truncated(a, b, d)
            assert error_matrix(t).entries.max() <= 0
            meds.append(error_metrics(t).med)
        assert all(x <= y for x, y in zip(meds, meds[1:]))


def test_truncated_pdp_counts_partial_products():
    # d=2 on 2x2 removes the pp bits in columns 0 and 1: (0,0), (0,1), (1,0)
    assert gen_truncated(2, 2, 2).pdp == pytest.approx(pdp_exact(2, 2) * (1 - 0.5 * 3 / 4))


def test_flattening_index():
    t = gen_truncated(2, 2, 2)
    e = error_matrix(t)
    assert e.flat[3 * 4 + 2] == e.entries[3][2]
    assert np.array_equal(e.flat.reshape(4, 4), e.entries)


def test_metrics_definitions():
    table = products(3, 3).copy()
    table[0, 5] = 2    # zero product: relative term uses denominator 1
    table[4, 4] = 13   # 16 -> 13
    m = LutMultiplier("x", 3, 3, table, 1.0)
    met = error_metrics(m)
    assert met.mred == pytest.approx((2 / 1 + 3 / 16) / 64)
    assert met.med == pytest.approx(5 / 64)
    assert met.max_abs_error == 3
    assert met.error_rate == pytest.approx(2 / 64)
    zero = error_metrics(gen_exact(3, 3))
    assert (zero.mred, zero.med, zero.max_abs_error, zero.error_rate) == (0, 0, 0, 0)


def test_perturbed_within_cap_and_deterministic():
    for s in range(6):
        m = gen_perturbed(4, 4, s, 0.2)
        assert 0 < m.mred <= 0.2
        assert np.array_equal(m.table, gen_perturbed(4, 4, s, 0.2).table)
        assert m.pdp <= pdp_exact(4, 4)


def test_perturbed_tiny_budget():
    m = gen_perturbed(2, 2, 7, 0.01)
    diff = np.argwhere(error_matrix(m).entries != 0)
    assert len(diff) <= 1
    assert 0 < m.mred <= 0.01


def test_perturbed_rejects_cap():
    with pytest.raises(ValueError):
        gen_perturbed(4, 4, 0, 0.3)
    with pytest.raises(ValueError):
        gen_perturbed(4, 4, 0, 0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 5), st.integers(0, 10_000), st.sampled_from([0.02, 0.05, 0.1, 0.2]))
def test_generated_error_identity(bits, seed, cap):
    m = gen_perturbed(bits, bits, seed, cap)
    e = error_matrix(m).entries
    assert np.array_equal(e + products(bits, bits), m.table)
    assert np.abs(e).max() <= (1 << 2 * bits) - 1
    assert m.mred <= cap


def test_invariants_enforced():
    with pytest.raises(ValueError, match="shape"):
        LutMultiplier("bad", 2, 2, np.zeros((4, 5)), 1.0)
    with pytest.raises(ValueError, match="outside"):
        LutMultiplier("bad", 2, 2, np.full((4, 4), 16), 1.0)
    with pytest.raises(ValueError, match="pdp"):
        LutMultiplier("bad", 2, 2, products(2, 2), 0.0)
    with pytest.raises(ValueError, match="exact"):
        MultiplierLibrary([gen_truncated(2, 2, 1)])
    with pytest.raises(ValueError, match="duplicate"):
        MultiplierLibrary([gen_exact(2, 2), gen_exact(2, 2)])


def test_round_trip(tmp_path):
    lib = MultiplierLibrary([gen_exact(4, 4), gen_truncated(4, 4, 2), gen_perturbed(4, 4, 3, 0.1)])
    p = tmp_path / "lib.txt"
    write_library(lib, p)
    back = read_library(p)
    assert back == lib
    assert [m.pdp for m in back] == [m.pdp for m in lib]
    assert format_library(back) == p.read_text()


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(2, 4), st.integers(0, 99)), min_size=1, max_size=5, unique=True),
       st.floats(0.01, 10.0))
def test_round_trip_property(cases, pdp):
    entries, seen = [], set()
    for bits, seed in cases:
        if bits not in seen:
            entries.append(gen_exact(bits, bits))
            seen.add(bits)
        m = gen_perturbed(bits, bits, seed, 0.2)
        entries.append(LutMultiplier(m.name, bits, bits, m.table, pdp * (1 + seed), "imported"))
    names = [m.name for m in entries]
    if len(set(names)) != len(names):
        return
    lib = MultiplierLibrary(entries)
    assert parse_library(format_library(lib)) == lib


def _entry(name, rows, a=2, b=2, pdp="0.4"):
    return f"mul {name} {a} {b} {pdp} generated\n" + "\n".join(rows) + "\nend\n"


EXACT2 = "mul exact2x2 2 2 0.4 exact\n0 0 0 0\n0 1 2 3\n0 2 4 6\n0 3 6 9\nend\n"


def test_parse_dimension_mismatch_row_length():
    bad = EXACT2 + _entry("wide", ["0 " * 17, "0 1 2 3", "0 2 4 6", "0 3 6 9"])
    with pytest.raises(LibraryFormatError, match=r"wide: dimension mismatch.*17 entries") as ei:
        parse_library(bad, "f.txt")
    assert re.search(r"f\.txt:8", str(ei.value))


def test_parse_dimension_mismatch_rows():
    bad = EXACT2 + _entry("short", ["0 0 0 0", "0 1 2 3", "0 2 4 6"])
    with pytest.raises(LibraryFormatError, match="short: dimension mismatch"):
        parse_library(bad)


def test_parse_out_of_range():
    rows = [" ".join(str(i * j) for j in range(16)) for i in range(16)]
    rows[3] = rows[3].replace("45", "256")
    text = "mul exact4x4 4 4 1.6 exact\n" + "\n".join(" ".join(str(i * j) for j in range(16)) for i in range(16))
    text += "\nend\n" + _entry("big", rows, 4, 4)
    with pytest.raises(LibraryFormatError, match=r"big: out-of-range entry 256.*max 255"):
        parse_library(text)


def test_parse_duplicate_name():
    with pytest.raises(LibraryFormatError, match="exact2x2: duplicate"):
        parse_library(EXACT2 + EXACT2)


def test_parse_malformed_header():
    with pytest.raises(LibraryFormatError, match=":1:"):
        parse_library("multiplier x 2 2\n")


def test_generate_library_counts_and_cap():
    lib = generate_library([4], 8, seed=3)
    assert len(lib.group(4, 4)) == 9
    assert sum(m.provenance == "exact" for m in lib) == 1
    assert all(m.mred <= 0.2 for m in lib)
    assert len({m.table.tobytes() for m in lib}) == len(lib)
    text = format_library(lib)
    headers = re.findall(r"# mred=([0-9.]+)", text)
    assert len(headers) == 9 and all(float(v) <= 0.2 for v in headers)
    assert format_library(generate_library([4], 8, seed=3)) == text


def test_filter_mred():
    lib = MultiplierLibrary([gen_exact(3, 3)] + [gen_truncated(3, 3, d) for d in range(1, 6)])
    kept = lib.filter_mred(0.2)
    assert all(m.mred <= 0.2 for m in kept)
    assert kept.exact(3, 3).is_exact
