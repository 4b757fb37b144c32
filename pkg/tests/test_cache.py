import itertools
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swankv.cache import (
    DenseKVCache,
    HybridKVCache,
    MemoryModel,
    compression_curve,
    dense_vector_bytes,
    densify,
    memory_break_even_k,
    sparse_vector_bytes,
    sparsify,
    top_k_indices,
)
from swankv.exceptions import CacheStateError, InvalidInputError


# --- memory model ----------------------------------------------------------


def test_sparse_bytes_fp16_example():
    assert sparse_vector_bytes(64, "fp16") == 194
    assert dense_vector_bytes(128) == 256
    assert MemoryModel(128, 64).compression_ratio == pytest.approx(194 / 256)


def test_sparse_bytes_fp8_example():
    assert sparse_vector_bytes(64, "fp8") == 130


def test_empty_sparse_vector_is_offset_only():
    assert sparse_vector_bytes(0, "fp16") == sparse_vector_bytes(0, "fp8") == 2


@pytest.mark.parametrize("k", [0, 1, 17, 128])
def test_closed_forms(k):
    assert sparse_vector_bytes(k, "fp16") == 3 * k + 2
    assert sparse_vector_bytes(k, "fp8") == 2 * k + 2


def test_memory_model_fields():
    m = MemoryModel(128, 32, "fp8")
    assert (m.bytes_per_sparse_vector, m.bytes_per_dense_vector) == (66, 256)


def test_break_even_k():
    # 3k + 2 <= 256 and 2k + 2 <= 256, solved by hand
    assert memory_break_even_k(128, "fp16") == 84
    assert memory_break_even_k(128, "fp8") == 127
    assert 84 / 128 == pytest.approx(0.656, abs=1e-3)


def test_compression_curve_crossing():
    curve = compression_curve(128, "fp16")
    assert len(curve) == 129
    assert curve[0] == (0.0, 2 / 256)
    below = [r for r, m in curve if m <= 1.0]
    above = [r for r, m in curve if m > 1.0]
    assert max(below) == 84 / 128 and min(above) == 85 / 128
    assert 0.65 <= max(below) <= 0.66


def test_compression_curve_fp8_never_above_one_until_full():
    curve = compression_curve(128, "fp8")
    assert all(m <= 1.0 for _, m in curve[:128])
    assert curve[128][1] > 1.0


def test_compression_curve_rejects_large_dim():
    with pytest.raises(InvalidInputError):
        compression_curve(512)


# --- top-k and sparsify ----------------------------------------------------


def test_top_k_hand_case():
    assert top_k_indices([0.1, -5, 3], 2).tolist() == [1, 2]


def test_top_k_all():
    assert top_k_indices(np.arange(6.0), 6).tolist() == list(range(6))


def test_top_k_ties_lower_index():
    assert top_k_indices([1.0, -1.0, 1.0, 0.5], 2).tolist() == [0, 1]


def test_top_k_matches_full_sort(rng):
    v = rng.standard_normal(128).astype(np.float32)
    mags = sorted(((abs(float(x)), -i) for i, x in enumerate(v)), reverse=True)
    expected = sorted(-i for _, i in mags[:32])
    assert top_k_indices(v, 32).tolist() == expected


def test_top_k_rejects_k_above_dim():
    with pytest.raises(InvalidInputError):
        top_k_indices(np.ones(4), 5)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 10))
def test_pruning_is_l2_optimal(seed, d):
    v = np.random.default_rng(seed).standard_normal(d).astype(np.float32)
    for k in range(d + 1):
        chosen = top_k_indices(v, k)
        err = np.sum(np.delete(v, chosen).astype(np.float64) ** 2)
        best = min(np.sum(np.delete(v, list(s)).astype(np.float64) ** 2) for s in itertools.combinations(range(d), k))
        assert err == best


def test_sparsify_full_round_trip(rng):
    v = rng.standard_normal(16).astype(np.float32)
    sv = sparsify(v, np.arange(16), "fp16")
    assert np.array_equal(densify(sv), v.astype(np.float16).astype(np.float32))


def test_sparsify_empty():
    sv = sparsify(np.ones(8), [], "fp16")
    assert np.array_equal(densify(sv), np.zeros(8))
    assert sv.nbytes == 2


def test_sparsify_size(rng):
    v = rng.standard_normal(128)
    sv = sparsify(v, top_k_indices(v, 64), "fp16")
    assert sv.nbytes == 194
    assert sv.indices.dtype == np.uint8 and sv.values.dtype == np.float16


def test_sparsify_fp8_values(rng):
    from swankv.fp8 import round_fp8

    v = rng.standard_normal(32).astype(np.float32)
    idx = top_k_indices(v, 8)
    sv = sparsify(v, idx, "fp8")
    assert sv.values.dtype == np.uint8
    assert np.array_equal(sv.decoded(), round_fp8(v[idx]))


def test_sparsify_rejects_bad_index():
    with pytest.raises(InvalidInputError):
        sparsify(np.ones(4), [4])


# --- hybrid cache ----------------------------------------------------------


def test_zero_buffer_sparsifies_immediately(rng):
    c = HybridKVCache(8, 0, 3)
    ev = c.append(rng.standard_normal(8), rng.standard_normal(8))
    assert ev is not None and c.n_sparse == 1 and c.n_buffer == 0


def test_buffer_counting(rng):
    c = HybridKVCache(8, 2, 3)
    for _ in range(3):
        c.append(rng.standard_normal(8), rng.standard_normal(8))
    assert (c.n_sparse, c.n_buffer, len(c)) == (1, 2, 3)


def test_fifo_eviction_prunes_oldest():
    c = HybridKVCache(4, 1, 1, 2, precision="f32")
    c.append([1, 2, 3, 4], [4, 3, 2, 1])
    assert c.n_sparse == 0
    k_sp, v_sp = c.append([0, 0, 0, 9], [0, 0, 0, 9])
    assert k_sp.indices.tolist() == [3] and k_sp.decoded().tolist() == [4.0]
    assert v_sp.indices.tolist() == [0, 1] and v_sp.decoded().tolist() == [4.0, 3.0]


@pytest.mark.parametrize("b", [0, 1, 2, 64, 128])
def test_order_preserved(rng, b):
    c = HybridKVCache(16, b, 16, precision="f32")
    ks = rng.standard_normal((150, 16)).astype(np.float32)
    vs = rng.standard_normal((150, 16)).astype(np.float32)
    for k, v in zip(ks, vs):
        c.append(k, v)
    dk, dv = c.densify()
    assert np.array_equal(dk, ks) and np.array_equal(dv, vs)
    assert c.n_buffer == min(b, 150)


@pytest.mark.parametrize("b", [0, 3, 40])
def test_no_pruning_fidelity_fp16(rng, b):
    c = HybridKVCache(32, b, 32)
    shadow = DenseKVCache(32, "f32")
    for _ in range(40):
        k = rng.standard_normal(32).astype(np.float32) * 5
        v = rng.standard_normal(32).astype(np.float32)
        c.append(k, v)
        shadow.append(k, v)
    dk, dv = c.densify()
    for got, ref in ((dk, shadow.keys), (dv, shadow.values)):
        assert np.all(np.abs(got - ref) <= 2.0**-10 * np.abs(ref))


def _independent_bytes(c):
    """Sum of array sizes actually held, plus 2 bytes of count per sparse row."""
    total = 0
    for store in (c.sparse_k, c.sparse_v):
        for sv in store:
            total += sv.indices.nbytes + sv.values.nbytes + 2
    elem = 4 if c.precision == "f32" else 2
    total += 2 * c.n_buffer * c.d_head * elem
    return total


@settings(max_examples=40, deadline=None)
@given(
    st.sampled_from([8, 16, 64]),
    st.integers(0, 8),
    st.floats(0, 1),
    st.floats(0, 1),
    st.sampled_from(["fp16", "fp8", "f32"]),
    st.integers(0, 30),
    st.integers(0, 2**32 - 1),
)
def test_byte_accounting_exact(d, b, rk, rv, precision, n, seed):
    rng = np.random.default_rng(seed)
    c = HybridKVCache(d, b, int(rk * d), int(rv * d), precision)
    for _ in range(n):
        c.append(rng.standard_normal(d), rng.standard_normal(d))
    fp = c.memory_footprint()
    assert fp.total == _independent_bytes(c)
    assert fp.sparse_k == c.n_sparse * sparse_vector_bytes(c.k_key, precision)


@pytest.mark.parametrize("precision,per", [("fp16", 194), ("fp8", 130)])
def test_thousand_token_footprint(rng, precision, per):
    c = HybridKVCache(128, 0, 64, precision=precision)
    x = rng.standard_normal((1000, 128)).astype(np.float32)
    for row in x:
        c.append(row, row)
    fp = c.memory_footprint()
    assert fp.sparse_k == fp.sparse_v == 1000 * per
    assert fp.buffer_k == fp.buffer_v == 0


def test_every_token_keeps_information(rng):
    c = HybridKVCache(16, 0, 1)
    for _ in range(20):
        c.append(rng.standard_normal(16), rng.standard_normal(16))
    dk, _ = c.densify()
    assert np.all(np.count_nonzero(dk, axis=1) == 1)


def test_append_rejects_non_finite():
    c = HybridKVCache(4, 1, 2)
    with pytest.raises(InvalidInputError):
        c.append([0, np.nan, 0, 0], [0, 0, 0, 0])
    with pytest.raises(InvalidInputError):
        c.append([0, 0, 0], [0, 0, 0])


def test_constructor_validation():
    with pytest.raises(InvalidInputError):
        HybridKVCache(8, 0, 9)
    with pytest.raises(InvalidInputError):
        HybridKVCache(300, 0, 1)
    with pytest.raises(InvalidInputError):
        HybridKVCache(8, 0, 2, precision="int4")


def test_dense_cache_footprint():
    c = DenseKVCache(16, "fp16")
    for _ in range(5):
        c.append(np.ones(16), np.ones(16))
    assert c.memory_footprint().total == 5 * 2 * 32
    with pytest.raises(CacheStateError):
        DenseKVCache(4).require_nonempty()


# --- snapshot ----------------------------------------------------------------


def test_snapshot_golden_bytes():
    c = HybridKVCache(4, 1, 2, 1, "fp16")
    c.append([1.0, -3.0, 0.5, 2.0], [0.25, 0.0, -4.0, 1.0])
    c.append([0.0, 0.0, 1.5, 0.0], [1.0, 1.0, 1.0, 1.0])
    expected = b"SWANKV01" + struct.pack("<HBIHHII", 4, 0, 1, 2, 1, 1, 1)
    # sparse K row: top-2 of |[1,-3,.5,2]| -> indices 1,3
    expected += struct.pack("<H", 2) + bytes([1, 3]) + np.array([-3.0, 2.0], "<f2").tobytes()
    # sparse V row: top-1 -> index 2
    expected += struct.pack("<H", 1) + bytes([2]) + np.array([-4.0], "<f2").tobytes()
    expected += np.array([0, 0, 1.5, 0], "<f2").tobytes() + np.array([1, 1, 1, 1], "<f2").tobytes()
    assert c.to_bytes() == expected


@pytest.mark.parametrize("precision", ["fp16", "fp8", "f32"])
def test_snapshot_round_trip(rng, precision):
    c = HybridKVCache(16, 3, 5, 7, precision)
    for _ in range(10):
        c.append(rng.standard_normal(16), rng.standard_normal(16))
    data = c.to_bytes()
    back = HybridKVCache.from_bytes(data)
    assert back.to_bytes() == data
    for a, b in zip(c.densify(), back.densify()):
        assert np.array_equal(a, b)
    with pytest.raises(InvalidInputError):
        HybridKVCache.from_bytes(data + b"\0")
    with pytest.raises(InvalidInputError):
        HybridKVCache.from_bytes(b"SWANKV02" + data[8:])


def test_validate_flags_fp8_nan_sentinel(rng):
    c = HybridKVCache(8, 0, 2, precision="fp8")
    c.append(rng.standard_normal(8), rng.standard_normal(8))
    c.validate()
    data = bytearray(c.to_bytes())
    # first stored value of the sparse K row follows header, count and 2 indices
    data[8 + struct.calcsize("<HBIHHII") + 2 + 2] = 0x7F
    with pytest.raises(CacheStateError):
        HybridKVCache.from_bytes(bytes(data)).validate()
