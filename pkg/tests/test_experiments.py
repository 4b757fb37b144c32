import numpy as np
import pytest

from swankv.calibration import collect_activations
from swankv.config import ModelConfig
from swankv.corpus import bundled_corpus, heldout_windows
from swankv.exceptions import InvalidInputError
from swankv.experiments import (
    ablation_study,
    compression_sweep,
    degradation_sweep,
    energy_concentration,
    evaluate,
    evaluate_window,
    kv_split_grid,
    kv_split_sweep,
    prepare,
    retention_to_k,
    split_sweep_rows,
)
from swankv.model import SwanParams, perplexity, reference_perplexity


@pytest.mark.parametrize(
    "ratio,d,k",
    [(1.0, 16, 16), (0.9, 16, 14), (0.75, 16, 12), (0.5, 16, 8), (0.3, 16, 5), (0.3, 128, 38), (0.9, 128, 115),
     (0.125, 4, 0), (0.375, 4, 2), (0.625, 4, 2), (0.875, 4, 4), (0.0, 8, 0)],
)
def test_retention_to_k_ties_to_even(ratio, d, k):
    assert retention_to_k(ratio, d) == k


def test_retention_to_k_rejects():
    with pytest.raises(InvalidInputError):
        retention_to_k(1.5, 16)


def test_kv_split_grid_sums_to_d():
    grid = kv_split_grid(16)
    assert [g[2] for g in grid] == [2, 3, 5, 6, 8, 10, 11, 13, 14]
    assert all(kk + kv == 16 for _, _, kk, kv in grid)
    assert grid[0][1] == 0.9


def test_evaluate_window_matches_model_metrics(tiny_model, tiny_projections):
    w = heldout_windows(40, 1)[0]
    params = SwanParams(3, 3, 2, "fp16", tiny_projections)
    ev = evaluate_window(tiny_model, w, "swan", params)
    assert ev.n == 39 and len(ev.drift_l2) == 40
    assert ev.perplexity == pytest.approx(perplexity(tiny_model, w, "swan", params), rel=1e-9)
    assert ev.reference_perplexity == pytest.approx(reference_perplexity(tiny_model, w, "swan", params), rel=1e-9)
    base = evaluate_window(tiny_model, w, "baseline")
    assert max(base.drift_l2) == 0 and base.cache_bytes == base.baseline_cache_bytes


def test_evaluate_pools_token_weighted(tiny_model, tiny_projections):
    ws = heldout_windows(30, 2, seed=1)
    params = SwanParams(4, 4, 0, "fp8", tiny_projections)
    evs = [evaluate_window(tiny_model, w, "swan", params) for w in ws]
    s = evaluate(tiny_model, ws, "swan", params)
    assert s.perplexity == pytest.approx(np.exp((evs[0].nll + evs[1].nll) / 58), rel=1e-12)
    assert s.max_drift == max(max(e.drift_max) for e in evs)
    assert s.cache_bytes == evs[0].cache_bytes + evs[1].cache_bytes


def test_sweeps_shape(tiny_model, tiny_projections):
    ws = heldout_windows(24, 1)
    rows = compression_sweep(tiny_model, tiny_projections, ws, (1.0, 0.5), ("fp16", "fp8"), (0, 4))
    assert len(rows) == 8
    full = [r for r in rows if r.retention == 1.0 and r.precision == "fp16" and r.buffer == 0][0]
    assert full.memory_ratio == pytest.approx(26 / 16)
    assert all(r.k_key == r.k_value for r in rows)
    with pytest.raises(InvalidInputError):
        compression_sweep(tiny_model, tiny_projections, ws, ())
    split = split_sweep_rows(tiny_model, tiny_projections, ws, key_ratios=(0.25, 0.5))
    assert [(r.k_key, r.k_value) for r in split] == [(2, 6), (4, 4)]
    deg = degradation_sweep(tiny_model, tiny_projections, ws, (1.0, 0.25))
    assert deg[0].mean_drift < deg[1].mean_drift
    kv = kv_split_sweep(tiny_model, tiny_projections, ws, key_ratios=(0.5,), max_workers=2)
    assert kv[0].k_key == 4


def test_prepare_deterministic():
    cfg = ModelConfig.from_heads(8, 1, 2, 2)
    a, b = prepare(cfg, 5, n_calibration=256), prepare(cfg, 5, n_calibration=256)
    assert a.projections.to_bytes() == b.projections.to_bytes()
    assert a.corpus.corpus_id == bundled_corpus().corpus_id


def test_ablation_and_energy(tiny_model, tiny_projections):
    batch = collect_activations(tiny_model, heldout_windows(256, 1)[0])
    rows = ablation_study(tiny_projections, batch, 0.5, seed=0)
    names = [r.variant for r in rows]
    assert names == ["learned", "head_shuffle", "layer_shuffle", "kv_shuffle", "random"]
    assert all(0 <= r.error <= 1 for r in rows)
    full = ablation_study(tiny_projections, batch, 1.0, variants=("learned", "random"))
    assert all(r.error < 1e-10 for r in full)
    with pytest.raises(InvalidInputError):
        ablation_study(tiny_projections, batch, variants=("bogus",))
    energy = energy_concentration(tiny_projections, batch, ks=(2, 8), n_random=3)
    assert len(energy) == 4
    assert all(r.learned == pytest.approx(1.0) for r in energy if r.k == 8)
