"""Hybrid KV storage: a dense FIFO buffer of recent tokens in front of an
append-only history of magnitude-pruned sparse vectors.

Byte accounting
---------------
A sparse vector with ``k`` retained components costs ``k * (value_bytes + 1)
+ 2`` bytes: the values, one ``uint8`` index per value, and a 2-byte count
(the per-vector CSR offset). With fp16 values that is ``3k + 2``; with fp8
it is ``2k + 2``. Dense vectors cost ``2 * d_head`` bytes for the fp16 and
fp8 settings (the dense buffer stays in fp16) and ``4 * d_head`` for f32.
"""

import struct
from collections import deque
from dataclasses import dataclass

import numpy as np

from .exceptions import CacheStateError, ConfigurationError, InvalidInputError
from .fp8 import NAN_CODE, decode_fp8, encode_fp8
from .validation import as_vector, check_count

PRECISIONS = ("fp16", "fp8", "f32")
VALUE_BYTES = {"fp16": 2, "fp8": 1, "f32": 4}
DENSE_ELEMENT_BYTES = {"fp16": 2, "fp8": 2, "f32": 4}
OFFSET_BYTES = 2
INDEX_BYTES = 1
MAX_HEAD_DIM = 256

_STORAGE_DTYPE = {"fp16": np.float16, "fp8": np.uint8, "f32": np.float32}
_PRECISION_CODE = {"fp16": 0, "fp8": 1, "f32": 2}
_SNAPSHOT_MAGIC = b"SWANKV01"
_SNAPSHOT_HEADER = struct.Struct("<HBIHHII")


def check_precision(precision):
    if precision not in PRECISIONS:
        raise InvalidInputError(f"precision must be one of {PRECISIONS}, got {precision!r}")
    return precision


def encode_values(x, precision):
    """Convert float32 values to their stored representation."""
    x = np.asarray(x, dtype=np.float32)
    if precision == "fp8":
        return encode_fp8(x)
    return x.astype(_STORAGE_DTYPE[precision])


def decode_values(stored, precision):
    """Convert stored values back to float32 for arithmetic."""
    if precision == "fp8":
        return decode_fp8(stored)
    return np.asarray(stored).astype(np.float32)


def round_dense(x, precision):
    """Round a dense vector to what the buffer stores (fp16 unless f32)."""
    x = np.asarray(x, dtype=np.float32)
    if precision == "f32":
        return x
    return x.astype(np.float16).astype(np.float32)


# ---------------------------------------------------------------------------
# memory model


def sparse_vector_bytes(k_active, precision="fp16"):
    """Bytes used by one sparse vector: ``k * (value + index) + 2``."""
    check_precision(precision)
    k_active = check_count(k_active, "k_active")
    return k_active * (VALUE_BYTES[precision] + INDEX_BYTES) + OFFSET_BYTES


def dense_vector_bytes(d_head, precision="fp16"):
    """Bytes used by one dense vector in the buffer or a dense cache."""
    check_precision(precision)
    return check_count(d_head, "d_head", minimum=1) * DENSE_ELEMENT_BYTES[precision]


@dataclass(frozen=True)
class MemoryModel:
    """Closed-form per-vector sizes for one ``(d_head, k_active, precision)``.

    The ratio is always taken against an fp16 dense vector, the uncompressed
    reference cache.
    """

    d_head: int
    k_active: int
    precision: str = "fp16"

    @property
    def bytes_per_sparse_vector(self):
        return sparse_vector_bytes(self.k_active, self.precision)

    @property
    def bytes_per_dense_vector(self):
        return dense_vector_bytes(self.d_head, "fp16")

    @property
    def compression_ratio(self):
        return self.bytes_per_sparse_vector / self.bytes_per_dense_vector


def compression_curve(d_head, precision="fp16"):
    """``(retention, memory_ratio)`` for every ``k`` in ``0..d_head``."""
    d_head = check_count(d_head, "d_head", minimum=1, maximum=MAX_HEAD_DIM)
    dense = dense_vector_bytes(d_head, "fp16")
    return [(k / d_head, sparse_vector_bytes(k, precision) / dense) for k in range(d_head + 1)]


def memory_break_even_k(d_head, precision="fp16"):
    """Largest ``k`` whose sparse vector is no bigger than the fp16 dense one."""
    dense = dense_vector_bytes(d_head, "fp16")
    per = VALUE_BYTES[check_precision(precision)] + INDEX_BYTES
    return min(d_head, (dense - OFFSET_BYTES) // per)


# ---------------------------------------------------------------------------
# sparse vectors


@dataclass(frozen=True, eq=False)
class SparseVector:
    """A pruned head vector: ascending ``uint8`` indices plus stored values."""

    indices: np.ndarray
    values: np.ndarray
    precision: str
    d_head: int

    def __post_init__(self):
        check_precision(self.precision)
        if self.indices.shape != self.values.shape or self.indices.ndim != 1:
            raise InvalidInputError("indices and values must be 1-D arrays of equal length")
        if self.indices.size and (
            np.any(np.diff(self.indices.astype(np.int64)) <= 0) or int(self.indices[-1]) >= self.d_head
        ):
            raise InvalidInputError("indices must be strictly ascending and < d_head")

    @property
    def k_active(self):
        return int(self.indices.shape[0])

    @property
    def nbytes(self):
        return sparse_vector_bytes(self.k_active, self.precision)

    def decoded(self):
        return decode_values(self.values, self.precision)

    def densify(self):
        """Dense float32 copy. Debug and test use only; attention never calls it."""
        out = np.zeros(self.d_head, dtype=np.float32)
        out[self.indices] = self.decoded()
        return out


def top_k_indices(v, k):
    """Indices of the ``k`` largest ``|v|`` entries, ascending.

    Ties go to the lower index (stable sort on descending magnitude).
    """
    v = as_vector(v, "v")
    k = check_count(k, "k", maximum=v.shape[0])
    order = np.argsort(-np.abs(v), kind="stable")
    return np.sort(order[:k]).astype(np.uint8 if v.shape[0] <= MAX_HEAD_DIM else np.int64)


def sparsify(v, indices, precision="fp16"):
    """Keep ``v[indices]`` at the requested precision; everything else is zero."""
    v = as_vector(v, "v")
    idx = np.asarray(indices, dtype=np.int64)
    if v.shape[0] > MAX_HEAD_DIM:
        raise InvalidInputError(f"head dimension {v.shape[0]} exceeds uint8 index range")
    if idx.size and (idx.min() < 0 or idx.max() >= v.shape[0]):
        raise InvalidInputError("index out of range")
    return SparseVector(
        indices=idx.astype(np.uint8),
        values=encode_values(v[idx], check_precision(precision)),
        precision=precision,
        d_head=v.shape[0],
    )


def densify(sv):
    return sv.densify()


# ---------------------------------------------------------------------------
# caches


@dataclass(frozen=True)
class MemoryFootprint:
    sparse_k: int
    sparse_v: int
    buffer_k: int
    buffer_v: int

    @property
    def total(self):
        return self.sparse_k + self.sparse_v + self.buffer_k + self.buffer_v

    def __add__(self, other):
        return MemoryFootprint(
            self.sparse_k + other.sparse_k,
            self.sparse_v + other.sparse_v,
            self.buffer_k + other.buffer_k,
            self.buffer_v + other.buffer_v,
        )


class _GrowableRows:
    """Append-only 2-D array with amortised O(1) appends."""

    def __init__(self, width, dtype, capacity=16):
        self._data = np.empty((capacity, width), dtype=dtype)
        self._n = 0

    def append(self, row):
        if self._n == self._data.shape[0]:
            grown = np.empty((2 * self._data.shape[0], self._data.shape[1]), dtype=self._data.dtype)
            grown[: self._n] = self._data[: self._n]
            self._data = grown
        self._data[self._n] = row
        self._n += 1

    def view(self):
        return self._data[: self._n]

    def __len__(self):
        return self._n


class SparseStore:
    """Row-packed sparse history for one of K or V.

    Every row has the same ``k`` (the cache's retention for that kind), so
    indices and stored values pack into two ``(n, k)`` arrays.
    """

    def __init__(self, d_head, k, precision):
        self.d_head = d_head
        self.k = k
        self.precision = precision
        self._indices = _GrowableRows(k, np.uint8)
        self._values = _GrowableRows(k, _STORAGE_DTYPE[precision])

    def append(self, sv):
        self._indices.append(sv.indices)
        self._values.append(sv.values)

    def __len__(self):
        return len(self._indices)

    @property
    def indices(self):
        return self._indices.view()

    @property
    def stored_values(self):
        return self._values.view()

    def decoded_values(self):
        return decode_values(self.stored_values, self.precision)

    def __getitem__(self, i):
        return SparseVector(
            indices=self.indices[i].copy(),
            values=self.stored_values[i].copy(),
            precision=self.precision,
            d_head=self.d_head,
        )

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @property
    def nbytes(self):
        return len(self) * sparse_vector_bytes(self.k, self.precision)


class HybridKVCache:
    """Per-head cache: dense FIFO buffer of capacity ``buffer_size`` in front
    of an append-only sparse history.

    Logical token order is the sparse history (oldest first) followed by the
    buffer (oldest first). Vectors passed to :meth:`append` must already be
    in the rotated space.
    """

    def __init__(self, d_head, buffer_size, k_key, k_value=None, precision="fp16"):
        self.d_head = check_count(d_head, "d_head", minimum=1, maximum=MAX_HEAD_DIM)
        self.buffer_size = check_count(buffer_size, "buffer_size")
        self.k_key = check_count(k_key, "k_key", maximum=self.d_head)
        self.k_value = check_count(self.k_key if k_value is None else k_value, "k_value", maximum=self.d_head)
        self.precision = check_precision(precision)
        self._buffer = deque()
        self.sparse_k = SparseStore(self.d_head, self.k_key, self.precision)
        self.sparse_v = SparseStore(self.d_head, self.k_value, self.precision)

    def __len__(self):
        return len(self.sparse_k) + len(self._buffer)

    @property
    def n_sparse(self):
        return len(self.sparse_k)

    @property
    def n_buffer(self):
        return len(self._buffer)

    @property
    def buffer_k(self):
        if not self._buffer:
            return np.zeros((0, self.d_head), dtype=np.float32)
        return np.stack([k for k, _ in self._buffer])

    @property
    def buffer_v(self):
        if not self._buffer:
            return np.zeros((0, self.d_head), dtype=np.float32)
        return np.stack([v for _, v in self._buffer])

    def append(self, k_rot, v_rot):
        """Push one rotated (k, v) pair; return the pruned pair if one was evicted."""
        k_rot = as_vector(k_rot, "k_rot", self.d_head)
        v_rot = as_vector(v_rot, "v_rot", self.d_head)
        self._buffer.append((round_dense(k_rot, self.precision), round_dense(v_rot, self.precision)))
        if len(self._buffer) <= self.buffer_size:
            return None
        k_old, v_old = self._buffer.popleft()
        k_sparse = sparsify(k_old, top_k_indices(k_old, self.k_key), self.precision)
        v_sparse = sparsify(v_old, top_k_indices(v_old, self.k_value), self.precision)
        self.sparse_k.append(k_sparse)
        self.sparse_v.append(v_sparse)
        return k_sparse, v_sparse

    def memory_footprint(self):
        dense = dense_vector_bytes(self.d_head, self.precision)
        return MemoryFootprint(
            sparse_k=self.sparse_k.nbytes,
            sparse_v=self.sparse_v.nbytes,
            buffer_k=self.n_buffer * dense,
            buffer_v=self.n_buffer * dense,
        )

    def densify(self):
        """Dense ``(K, V)`` in logical order. Debug and test use only."""
        ks = [sv.densify() for sv in self.sparse_k] + [k for k, _ in self._buffer]
        vs = [sv.densify() for sv in self.sparse_v] + [v for _, v in self._buffer]
        if not ks:
            empty = np.zeros((0, self.d_head), dtype=np.float32)
            return empty, empty.copy()
        return np.stack(ks), np.stack(vs)

    def validate(self):
        """Raise :class:`CacheStateError` if stored data violates an invariant."""
        if self.n_buffer > self.buffer_size:
            raise CacheStateError("buffer occupancy exceeds capacity")
        if len(self.sparse_k) != len(self.sparse_v):
            raise CacheStateError("sparse K and V histories differ in length")
        for store in (self.sparse_k, self.sparse_v):
            if store.precision == "fp8" and np.any((store.stored_values & 0x7F) == NAN_CODE):
                raise CacheStateError("fp8 NaN sentinel present in sparse history")
            if not np.all(np.isfinite(store.decoded_values())):
                raise CacheStateError("non-finite value in sparse history")
            idx = store.indices.astype(np.int64)
            if idx.size and (np.any(np.diff(idx, axis=1) <= 0) or idx.max() >= self.d_head):
                raise CacheStateError("sparse indices not strictly ascending or out of range")

    # -- snapshot ---------------------------------------------------------

    def to_bytes(self):
        """Serialise to the ``SWANKV01`` debug snapshot format (docs/formats.md)."""
        out = bytearray(_SNAPSHOT_MAGIC)
        out += _SNAPSHOT_HEADER.pack(
            self.d_head,
            _PRECISION_CODE[self.precision],
            self.buffer_size,
            self.k_key,
            self.k_value,
            self.n_sparse,
            self.n_buffer,
        )
        for sk, sv in zip(self.sparse_k, self.sparse_v):
            for vec in (sk, sv):
                out += struct.pack("<H", vec.k_active)
                out += vec.indices.tobytes()
                out += vec.values.astype(vec.values.dtype.newbyteorder("<")).tobytes()
        dense_dtype = np.dtype("<f4" if self.precision == "f32" else "<f2")
        for k, v in self._buffer:
            out += k.astype(dense_dtype).tobytes() + v.astype(dense_dtype).tobytes()
        return bytes(out)

    @classmethod
    def from_bytes(cls, data):
        if data[:8] != _SNAPSHOT_MAGIC:
            raise InvalidInputError("not a SWANKV01 snapshot")
        d_head, pcode, buffer_size, k_key, k_value, n_sparse, n_buffer = _SNAPSHOT_HEADER.unpack_from(data, 8)
        precision = {c: p for p, c in _PRECISION_CODE.items()}[pcode]
        cache = cls(d_head, buffer_size, k_key, k_value, precision)
        value_dtype = np.dtype(_STORAGE_DTYPE[precision]).newbyteorder("<")
        pos = 8 + _SNAPSHOT_HEADER.size
        for _ in range(n_sparse):
            for store in (cache.sparse_k, cache.sparse_v):
                (count,) = struct.unpack_from("<H", data, pos)
                pos += 2
                idx = np.frombuffer(data, np.uint8, count, pos)
                pos += count
                vals = np.frombuffer(data, value_dtype, count, pos)
                pos += count * value_dtype.itemsize
                store.append(SparseVector(idx.copy(), vals.astype(_STORAGE_DTYPE[precision]), precision, d_head))
        dense_dtype = np.dtype("<f4" if precision == "f32" else "<f2")
        width = d_head * dense_dtype.itemsize
        for _ in range(n_buffer):
            k = np.frombuffer(data, dense_dtype, d_head, pos).astype(np.float32)
            v = np.frombuffer(data, dense_dtype, d_head, pos + width).astype(np.float32)
            pos += 2 * width
            cache._buffer.append((k, v))
        if pos != len(data):
            raise InvalidInputError("trailing bytes in snapshot")
        return cache


class DenseKVCache:
    """Uncompressed per-head cache used by the baseline decode path."""

    def __init__(self, d_head, precision="f32"):
        self.d_head = check_count(d_head, "d_head", minimum=1)
        self.precision = check_precision(precision)
        self._k = _GrowableRows(self.d_head, np.float32)
        self._v = _GrowableRows(self.d_head, np.float32)

    def __len__(self):
        return len(self._k)

    def append(self, k, v):
        self._k.append(round_dense(as_vector(k, "k", self.d_head), self.precision))
        self._v.append(round_dense(as_vector(v, "v", self.d_head), self.precision))

    @property
    def keys(self):
        return self._k.view()

    @property
    def values(self):
        return self._v.view()

    def memory_footprint(self):
        dense = dense_vector_bytes(self.d_head, self.precision)
        return MemoryFootprint(0, 0, len(self) * dense, len(self) * dense)

    def require_nonempty(self):
        if not len(self):
            raise CacheStateError("attention over an empty cache")
