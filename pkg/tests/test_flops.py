import csv
import io
from fractions import Fraction

import pytest

from oracles import oracle_break_even
from swankv.exceptions import InvalidInputError
from swankv.flops import (
    CSV_COLUMNS,
    NEVER,
    break_even_length,
    crossover_validate,
    flops_standard,
    flops_swan,
    write_flops_csv,
)


def test_flops_standard_examples():
    assert flops_standard(1, 128) == 512
    assert flops_standard(256, 128) == 131072


def test_flops_swan_example():
    assert flops_swan(171, 128, 32, 0) == 4 * 16384 + 4 * 171 * 32 == 87424


@pytest.mark.parametrize("L", [1, 10, 500])
def test_flops_swan_no_pruning_limit(L):
    assert flops_swan(L, 64, 64, 0) == 4 * 64 * 64 + 4 * L * 64


def test_flops_swan_clamps_below_buffer():
    # fewer tokens than buffer slots: everything is dense
    assert flops_swan(5, 16, 4, 8) == 4 * 256 + 4 * 5 * 16
    assert flops_swan(8, 16, 4, 8) == 4 * 256 + 4 * 8 * 16
    assert flops_swan(9, 16, 4, 8) == 4 * 256 + 4 * 1 * 4 + 4 * 8 * 16


def test_flops_swan_rejects_k_above_dim():
    with pytest.raises(InvalidInputError):
        flops_swan(10, 16, 17, 0)


@pytest.mark.parametrize(
    "d_h,k,b,expected",
    [(128, 32, 0, 171), (128, 64, 0, 257), (128, 32, 128, 299), (128, 96, 128, 641), (128, 64, 128, 385), (64, 16, 0, 86)],
)
def test_break_even_examples(d_h, k, b, expected):
    assert break_even_length(d_h, k, b) == expected == oracle_break_even(d_h, k, b)


def test_break_even_never():
    assert break_even_length(128, 128, 0) == NEVER
    assert break_even_length(16, 16, 4) == NEVER


def test_break_even_shift_by_b():
    for b in (0, 1, 17, 128):
        assert break_even_length(64, 16, b) - break_even_length(64, 16, 0) == b


@pytest.mark.parametrize("d_h", [16, 32, 64, 128])
def test_break_even_equivalence_exhaustive(d_h):
    for k in range(1, d_h, max(1, d_h // 8)):
        for b in (0, d_h):
            be = break_even_length(d_h, k, b)
            assert be == oracle_break_even(d_h, k, b)
            bound = Fraction(d_h * d_h, d_h - k) + b
            for L in range(max(1, b), 4 * be + 1):
                assert (flops_swan(L, d_h, k, b) < flops_standard(L, d_h)) == (L > bound)


def test_crossover_never_when_no_pruning():
    rep = crossover_validate(16, 16, 0, L_max=200)
    assert rep.modeled == NEVER and rep.measured == NEVER and not rep.reached
    assert rep.agrees()


def test_crossover_d64_k16():
    rep = crossover_validate(64, 16, 0)
    assert rep.modeled == 86
    assert rep.reached and abs(rep.measured - 86) <= 2


def test_crossover_not_reached_within_short_run():
    rep = crossover_validate(64, 16, 0, L_max=40)
    assert not rep.reached
    assert not rep.agrees()


def test_measured_counts_match_model_and_are_monotone():
    rep = crossover_validate(32, 8, 4, L_max=80)
    prev_std = prev_swan = -1
    for r in rep.rows:
        assert r.measured_standard == r.modeled_standard
        assert r.measured_swan == r.modeled_swan
        assert r.softmax_standard == r.softmax_swan == 5 * r.L
        assert r.measured_standard >= prev_std and r.measured_swan >= prev_swan
        prev_std, prev_swan = r.measured_standard, r.measured_swan


def test_csv_emission():
    rep = crossover_validate(16, 4, 0, L_max=3)
    buf = io.StringIO()
    write_flops_csv(buf, rep.rows)
    rows = list(csv.reader(io.StringIO(buf.getvalue())))
    assert tuple(rows[0]) == CSV_COLUMNS == ("L", "mode", "modeled_flops", "measured_flops", "bytes_cache")
    assert len(rows) == 1 + 2 * 3
    assert rows[1][:4] == ["1", "standard", str(flops_standard(1, 16)), str(rep.rows[0].measured_standard)]
