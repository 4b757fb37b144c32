"""Analytical attention cost model and the instrumented FLOP counter.

Convention: one multiply-add is 2 FLOPs. Softmax work (scale, max-subtract,
exp, sum, divide; 5 FLOPs per score) is tallied separately as the
lower-order term and left out of the standard-vs-SWAN comparison.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import InvalidInputError
from .validation import check_count

NEVER = math.inf
SOFTMAX_FLOPS_PER_SCORE = 5
CSV_COLUMNS = ("L", "mode", "modeled_flops", "measured_flops", "bytes_cache")


@dataclass
class FlopCounter:
    """Mutable tally filled in by the attention kernels."""

    projection: int = 0
    scores: int = 0
    values: int = 0
    softmax: int = 0

    @property
    def total(self):
        """Main-term FLOPs (everything except softmax)."""
        return self.projection + self.scores + self.values

    def add(self, other):
        self.projection += other.projection
        self.scores += other.scores
        self.values += other.values
        self.softmax += other.softmax
        return self

    def snapshot(self):
        return FlopCounter(self.projection, self.scores, self.values, self.softmax)


@dataclass(frozen=True)
class FlopsReport:
    """Modeled and measured FLOPs for one decode step of one head."""

    L: int
    d_h: int
    k_active: int
    b: int
    modeled_standard: int
    modeled_swan: int
    measured_standard: int
    measured_swan: int
    softmax_standard: int = 0
    softmax_swan: int = 0


def flops_standard(L, d_h):
    """Dense single-head decode step: ``4 * L * d_h``."""
    L = check_count(L, "L", minimum=1)
    d_h = check_count(d_h, "d_h", minimum=1)
    return 4 * L * d_h


def flops_swan(L, d_h, k, b):
    """SWAN single-head decode step: ``4 d_h² + 4 (L-b) k + 4 b d_h``.

    With fewer than ``b`` tokens only ``L`` vectors sit in the buffer and
    none are sparse, so the dense term uses ``min(L, b)``; for ``L >= b``
    this is exactly the closed form.
    """
    L = check_count(L, "L", minimum=1)
    d_h = check_count(d_h, "d_h", minimum=1)
    b = check_count(b, "b")
    if not isinstance(k, (int, np.integer)) or k < 0 or k > d_h:
        raise InvalidInputError(f"k must be an integer in [0, {d_h}], got {k!r}")
    dense = min(L, b)
    sparse = L - dense
    return 4 * d_h * d_h + 4 * sparse * int(k) + 4 * dense * d_h


def break_even_length(d_h, k, b=0):
    """Smallest integer ``L`` with ``L > d_h² / (d_h - k) + b``.

    Returns :data:`NEVER` (``math.inf``) when ``k >= d_h``: the projection
    overhead is never recovered.
    """
    d_h = check_count(d_h, "d_h", minimum=1)
    k = check_count(k, "k")
    b = check_count(b, "b")
    if k >= d_h:
        return NEVER
    return b + (d_h * d_h) // (d_h - k) + 1


@dataclass
class CrossoverReport:
    d_h: int
    k_active: int
    b: int
    L_max: int
    modeled: float
    measured: float
    rows: list = field(default_factory=list, repr=False)
    bytes_standard: list = field(default_factory=list, repr=False)
    bytes_swan: list = field(default_factory=list, repr=False)

    @property
    def reached(self):
        return self.measured != NEVER

    @property
    def gap(self):
        if self.modeled == NEVER and self.measured == NEVER:
            return 0
        if NEVER in (self.modeled, self.measured):
            return NEVER
        return abs(self.measured - self.modeled)

    def agrees(self, tolerance=2):
        return self.gap <= tolerance


def crossover_validate(d_h, k, b=0, L_max=None, seed=0, precision="fp16"):
    """Run an instrumented single-head decode in both modes and locate the
    first length at which the SWAN step is cheaper than the dense one.

    The workload is random (seeded); only the operation counts matter.
    """
    from .attention import AttentionStepInput, dense_attention_step, swan_attention_step
    from .cache import DenseKVCache, HybridKVCache
    from .tensor import random_orthogonal

    d_h = check_count(d_h, "d_h", minimum=1)
    modeled = break_even_length(d_h, k, b)
    if L_max is None:
        L_max = 2 * (break_even_length(d_h, d_h // 2, b)) if modeled == NEVER else 2 * int(modeled)
    L_max = check_count(L_max, "L_max", minimum=1)
    rng = np.random.default_rng(seed)
    p_qk = random_orthogonal(d_h, seed)
    swan_cache = HybridKVCache(d_h, b, k, k, precision)
    dense_cache = DenseKVCache(d_h, precision)
    rows = []
    bytes_std, bytes_sw = [], []
    measured = NEVER
    for L in range(1, L_max + 1):
        q, kk, v = rng.standard_normal((3, d_h)).astype(np.float32)
        std = FlopCounter()
        dense_cache.append(kk, v)
        dense_attention_step(q, dense_cache, counter=std)
        sw = FlopCounter()
        swan_attention_step(AttentionStepInput(q, kk, v, position=L - 1), swan_cache, p_qk, counter=sw)
        rows.append(
            FlopsReport(
                L=L,
                d_h=d_h,
                k_active=k,
                b=b,
                modeled_standard=flops_standard(L, d_h),
                modeled_swan=flops_swan(L, d_h, k, b),
                measured_standard=std.total,
                measured_swan=sw.total,
                softmax_standard=std.softmax,
                softmax_swan=sw.softmax,
            )
        )
        bytes_std.append(dense_cache.memory_footprint().total)
        bytes_sw.append(swan_cache.memory_footprint().total)
        if measured == NEVER and sw.total < std.total:
            measured = L
    return CrossoverReport(d_h, k, b, L_max, modeled, measured, rows, bytes_std, bytes_sw)


def write_flops_csv(path_or_file, rows, bytes_standard=None, bytes_swan=None):
    """Emit ``L, mode, modeled_flops, measured_flops, bytes_cache`` rows.

    ``bytes_*`` are optional per-row sequences aligned with ``rows``.
    """
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    fh = open(path_or_file, "w", newline="", encoding="utf-8") if own else path_or_file
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for i, r in enumerate(rows):
            bs = "" if bytes_standard is None else bytes_standard[i]
            bw = "" if bytes_swan is None else bytes_swan[i]
            writer.writerow((r.L, "standard", r.modeled_standard, r.measured_standard, bs))
            writer.writerow((r.L, "swan", r.modeled_swan, r.measured_swan, bw))
    finally:
        if own:
            fh.close()
