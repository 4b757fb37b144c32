"""Evaluation harnesses shared by the CLI and the acceptance suite.

Every harness is deterministic in its inputs. Grid points are independent
and can be spread over a thread pool (``max_workers``); results always come
back in grid order.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .cache import MemoryModel
from .calibration import (
    VARIANTS,
    calibrate,
    collect_activations,
    make_ablation_variant,
    pruned_reconstruction_error,
    top_k_energy_fraction,
)
from .corpus import bundled_corpus
from .exceptions import InvalidInputError
from .model import DecodeSession, SwanParams, build_toy_model, log_softmax64
from .tensor import random_orthogonal
from .validation import as_tokens, check_count

RETENTION_GRID = (1.0, 0.9, 0.75, 0.5, 0.3)
SPLIT_KEY_RATIOS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
ABLATION_VARIANTS = ("learned", "head_shuffle", "layer_shuffle", "kv_shuffle", "random")
WINDOW_LENGTH = 192
WINDOW_COUNT = 2
HELDOUT_ACTIVATION_TOKENS = 2048


def retention_to_k(ratio, d_head):
    """``round(ratio * d_head)`` with ties to even."""
    d_head = check_count(d_head, "d_head", minimum=1)
    ratio = float(ratio)
    if not 0.0 <= ratio <= 1.0:
        raise InvalidInputError(f"retention ratio must be in [0, 1], got {ratio}")
    return int(round(ratio * d_head))


def _map(fn, items, max_workers):
    items = list(items)
    if max_workers is None or max_workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(fn, items))


@dataclass
class Workbench:
    """A seeded toy model with its learned projections and corpus."""

    model: object
    projections: object
    corpus: object
    seed: int

    def windows(self, length=WINDOW_LENGTH, count=WINDOW_COUNT):
        return self.corpus.heldout_windows(length, count, self.seed)


def prepare(config, seed=0, corpus=None, n_calibration=None):
    corpus = bundled_corpus() if corpus is None else corpus
    model = build_toy_model(config, seed)
    pset = calibrate(model, corpus.calibration_tokens(n_calibration), seed=seed, corpus_id=corpus.corpus_id)
    return Workbench(model, pset, corpus, int(seed))


# ---------------------------------------------------------------------------
# single-pass window evaluation


@dataclass
class WindowEval:
    """Teacher-forced pass over one text window.

    ``nll``/``ref_ce`` are sums over the ``n`` predicted positions: the label
    negative log-likelihood and the cross-entropy against the uncompressed
    model's next-token distribution.
    """

    n: int = 0
    nll: float = 0.0
    ref_ce: float = 0.0
    drift_l2: list = field(default_factory=list)
    drift_max: list = field(default_factory=list)
    cache_bytes: int = 0
    baseline_cache_bytes: int = 0

    @property
    def perplexity(self):
        return float(np.exp(self.nll / self.n))

    @property
    def reference_perplexity(self):
        return float(np.exp(self.ref_ce / self.n))


def evaluate_window(model, text, mode="swan", params=None):
    text = as_tokens(text, model.config.vocab_size, min_length=2, name="text")
    session = DecodeSession(model, mode, params)
    ref = session if mode == "baseline" else DecodeSession(model, "baseline")
    ev = WindowEval()
    for i in range(len(text)):
        lg = session.step(int(text[i]))
        base = lg if ref is session else ref.step(int(text[i]))
        diff = lg.astype(np.float64) - base.astype(np.float64)
        ev.drift_l2.append(float(np.linalg.norm(diff)))
        ev.drift_max.append(float(np.max(np.abs(diff))))
        if i + 1 < len(text):
            lq = log_softmax64(lg)
            lp = lq if ref is session else log_softmax64(base)
            ev.nll -= float(lq[int(text[i + 1])])
            ev.ref_ce -= float(np.exp(lp) @ lq)
            ev.n += 1
    ev.cache_bytes = session.cache_bytes()
    ev.baseline_cache_bytes = ref.cache_bytes()
    return ev


@dataclass(frozen=True)
class EvalSummary:
    mean_drift: float
    max_drift: float
    perplexity: float
    reference_perplexity: float
    cache_bytes: int
    baseline_cache_bytes: int


def evaluate(model, windows, mode="swan", params=None):
    """Aggregate :func:`evaluate_window` over several windows (token-weighted)."""
    evs = [evaluate_window(model, w, mode, params) for w in windows]
    n = sum(e.n for e in evs)
    return EvalSummary(
        mean_drift=float(np.mean([np.mean(e.drift_l2) for e in evs])),
        max_drift=float(max(max(e.drift_max) for e in evs)),
        perplexity=float(np.exp(sum(e.nll for e in evs) / n)),
        reference_perplexity=float(np.exp(sum(e.ref_ce for e in evs) / n)),
        cache_bytes=int(sum(e.cache_bytes for e in evs)),
        baseline_cache_bytes=int(sum(e.baseline_cache_bytes for e in evs)),
    )


# ---------------------------------------------------------------------------
# sweeps


@dataclass(frozen=True)
class SplitRow:
    key_ratio: float
    value_ratio: float
    k_key: int
    k_value: int
    mean_drift: float


def kv_split_grid(d_head, key_ratios=SPLIT_KEY_RATIOS):
    """``(key_ratio, value_ratio, k_key, k_value)`` with ``k_key + k_value == d_head``."""
    out = []
    for r in key_ratios:
        kk = retention_to_k(r, d_head)
        out.append((float(r), round(1.0 - float(r), 10), kk, d_head - kk))
    return out


def kv_split_sweep(model, projections, windows, buffer_size=0, precision="fp16", key_ratios=SPLIT_KEY_RATIOS, max_workers=1):
    d_head = model.config.d_head

    def point(entry):
        r, vr, kk, kv = entry
        params = SwanParams(kk, kv, buffer_size, precision, projections)
        drift = float(np.mean([np.mean(evaluate_window(model, w, "swan", params).drift_l2) for w in windows]))
        return SplitRow(r, vr, kk, kv, drift)

    return _map(point, kv_split_grid(d_head, key_ratios), max_workers)


@dataclass(frozen=True)
class DegradationRow:
    retention: float
    k_active: int
    reference_perplexity: float
    perplexity: float
    mean_drift: float


def degradation_sweep(model, projections, windows, retentions=RETENTION_GRID, buffer_size=0, precision="fp16", max_workers=1):
    d_head = model.config.d_head

    def point(r):
        k = retention_to_k(r, d_head)
        s = evaluate(model, windows, "swan", SwanParams(k, k, buffer_size, precision, projections))
        return DegradationRow(float(r), k, s.reference_perplexity, s.perplexity, s.mean_drift)

    return _map(point, retentions, max_workers)


@dataclass(frozen=True)
class SweepRow:
    retention: float
    k_key: int
    k_value: int
    precision: str
    buffer: int
    memory_ratio: float
    cache_bytes: int
    baseline_cache_bytes: int
    mean_drift: float
    max_drift: float
    perplexity: float
    reference_perplexity: float
    key_ratio: float = None


SWEEP_CSV_COLUMNS = (
    "retention", "key_ratio", "k_key", "k_value", "precision", "buffer", "memory_ratio",
    "bytes_cache", "bytes_cache_baseline", "mean_drift", "max_drift", "perplexity", "reference_perplexity",
)


def _sweep_row(model, projections, windows, kk, kv, precision, buffer_size, retention, key_ratio=None):
    s = evaluate(model, windows, "swan", SwanParams(kk, kv, buffer_size, precision, projections))
    d_head = model.config.d_head
    mem = (MemoryModel(d_head, kk, precision).compression_ratio + MemoryModel(d_head, kv, precision).compression_ratio) / 2
    return SweepRow(
        retention, kk, kv, precision, buffer_size, mem, s.cache_bytes, s.baseline_cache_bytes,
        s.mean_drift, s.max_drift, s.perplexity, s.reference_perplexity, key_ratio,
    )


def compression_sweep(model, projections, windows, retentions, precisions=("fp16", "fp8"), buffers=(0,), max_workers=1):
    """One row per (retention, precision, buffer) with memory ratio, drift and perplexity.

    ``memory_ratio`` is the per-vector sparse size over the dense fp16 size,
    averaged over keys and values.
    """
    if not retentions or not precisions or not buffers:
        raise InvalidInputError("sweep grid is empty")
    d_head = model.config.d_head
    grid = [(float(r), p, int(b)) for r in retentions for p in precisions for b in buffers]

    def point(g):
        r, p, b = g
        k = retention_to_k(r, d_head)
        return _sweep_row(model, projections, windows, k, k, p, b, r)

    return _map(point, grid, max_workers)


def split_sweep_rows(model, projections, windows, precisions=("fp16",), buffers=(0,), key_ratios=SPLIT_KEY_RATIOS, max_workers=1):
    """The K/V-split grid (``k_key + k_value == d_head``) in sweep-row form."""
    grid = [(e, p, int(b)) for e in kv_split_grid(model.config.d_head, key_ratios) for p in precisions for b in buffers]

    def point(g):
        (r, _, kk, kv), p, b = g
        return _sweep_row(model, projections, windows, kk, kv, p, b, 0.5, key_ratio=r)

    return _map(point, grid, max_workers)


# ---------------------------------------------------------------------------
# projection quality


@dataclass(frozen=True)
class AblationRow:
    variant: str
    key_error: float
    value_error: float

    @property
    def error(self):
        return (self.key_error + self.value_error) / 2


def ablation_study(base, batch, retention=0.5, seed=0, variants=ABLATION_VARIANTS):
    """Mean pruned-reconstruction error of rotated keys (P_QK) and values
    (P_VO) on ``batch`` for each projection variant."""
    cfg = base.config
    k = retention_to_k(retention, cfg.d_head)
    rows = []
    for name in variants:
        if name not in VARIANTS:
            raise InvalidInputError(f"unknown projection variant {name!r}")
        pset = make_ablation_variant(base, name, seed)
        ke, ve = [], []
        for li in range(cfg.num_layers):
            for j in range(cfg.n_kv_heads):
                ke.append(pruned_reconstruction_error(batch.k[li][j], pset.p_qk[li, j], k))
                ve.append(pruned_reconstruction_error(batch.v[li][j], pset.p_vo[li, j], k))
        rows.append(AblationRow(name, float(np.mean(ke)), float(np.mean(ve))))
    return rows


def heldout_batch(bench, n_tokens=HELDOUT_ACTIVATION_TOKENS):
    held = bench.corpus.heldout_tokens()
    return collect_activations(bench.model, held[: min(n_tokens, len(held))])


@dataclass(frozen=True)
class EnergyRow:
    layer: int
    k: int
    learned: float
    random_max: float
    per_head_learned: tuple
    per_head_random_max: tuple

    @property
    def learned_wins(self):
        return self.learned >= self.random_max


def energy_concentration(projections, batch, ks=None, n_random=20, seed=0):
    """Top-k energy fraction of calibration keys under the learned P_QK
    versus ``n_random`` seeded random orthogonal bases, per layer.

    Layer figures average over KV heads; each random basis is shared by all
    heads of the layer.
    """
    cfg = projections.config
    dh = cfg.d_head
    ks = (dh // 4, dh // 2, (3 * dh) // 4) if ks is None else ks
    randoms = [random_orthogonal(dh, seed * 1000 + i) for i in range(n_random)]
    rows = []
    for li in range(cfg.num_layers):
        for k in ks:
            learned = [top_k_energy_fraction(batch.k[li][j], projections.p_qk[li, j], k) for j in range(cfg.n_kv_heads)]
            rand = np.array([[top_k_energy_fraction(batch.k[li][j], r, k) for j in range(cfg.n_kv_heads)] for r in randoms])
            rows.append(
                EnergyRow(
                    layer=li,
                    k=int(k),
                    learned=float(np.mean(learned)),
                    random_max=float(rand.mean(axis=1).max()),
                    per_head_learned=tuple(float(x) for x in learned),
                    per_head_random_max=tuple(float(x) for x in rand.max(axis=0)),
                )
            )
    return rows
