"""Seeded toy decoder with a token-by-token decode loop.

Architecture (fixed by this package, not by the method it exercises):
byte embedding, ``num_layers`` pre-norm blocks of RoPE attention plus a
GELU MLP, final LayerNorm, untied unembedding. Attention is MHA or GQA
according to the config.

Key/value/query weights are built with low-rank-dominant spectra over
bases that are shared model-wide up to per-layer and per-head
perturbations, so activations have the concentrated, partially shared
subspaces that make rotation-then-pruning meaningful. Top key directions
are aligned with RoPE pairs so the structure survives the rotation.
"""

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .attention import AttentionStepInput, check_projection, dense_attention_step, swan_attention_step
from .cache import PRECISIONS, DenseKVCache, HybridKVCache
from .config import ModelConfig
from .exceptions import ConfigurationError, InvalidInputError
from .flops import FlopCounter
from .tensor import rope
from .validation import as_tokens, check_count

LN_EPS = 1e-5
# spectrum shape for K/V/Q weights: the leading 3/4 of the head dimension
# decays geometrically over this range; the rest is a small noise floor
SPECTRUM_TOP = 1.0
SPECTRUM_BOTTOM = 0.2
SPECTRUM_FLOOR = 0.03
LAYER_PERTURBATION = 0.3
HEAD_PERTURBATION = 0.3
KV_PERTURBATION = 0.5
QK_SCALE = 1.0
V_SCALE = 1.0
O_SCALE = 1.5
MLP_SCALE = 0.5
LOGIT_SCALE = 2.0
# positional heads: the pre-attention LayerNorm bias along the uniform
# direction gives every token the same component; rank-1 terms on W_Q/W_K turn it into constant q/k parts
# on the fastest RoPE planes, phased so each KV head attends to a fixed
# look-back offset
LN_BIAS_SCALE = 4.0
POS_PAIRS = 4
POS_AMPLITUDE = 8.0
POS_MAX_OFFSET = 3
# softmax-regression readout fitted on the calibration split
READOUT_TOKENS = 2048
READOUT_STEPS = 150
READOUT_LR = 0.05
READOUT_L2 = 1e-3


@dataclass
class LayerWeights:
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray
    w_up: np.ndarray
    b_up: np.ndarray
    w_down: np.ndarray
    b_down: np.ndarray

    TENSORS = (
        "ln1_gain", "ln1_bias", "w_q", "w_k", "w_v", "w_o",
        "ln2_gain", "ln2_bias", "w_up", "b_up", "w_down", "b_down",
    )


@dataclass
class ToyModel:
    """Weights plus (optionally) absorbed value/output weights for SWAN mode.

    ``w_v_hat`` / ``w_o_hat`` are per-layer lists populated by
    :func:`swankv.calibration.absorb_projections`; ``projections`` is the
    set they were derived from.
    """

    config: ModelConfig
    seed: int
    embed: np.ndarray
    layers: list
    lnf_gain: np.ndarray
    lnf_bias: np.ndarray
    unembed: np.ndarray
    projections: object = None
    w_v_hat: list = field(default=None, repr=False)
    w_o_hat: list = field(default=None, repr=False)

    def tensors(self):
        """``(name, array)`` pairs in serialisation order."""
        yield "embed", self.embed
        for i, layer in enumerate(self.layers):
            for name in LayerWeights.TENSORS:
                yield f"layers.{i}.{name}", getattr(layer, name)
        yield "lnf_gain", self.lnf_gain
        yield "lnf_bias", self.lnf_bias
        yield "unembed", self.unembed


def _perturbation(rng, dim, eps):
    """Orthogonal matrix near the identity: QR of ``I + eps * G / sqrt(dim)``."""
    q, r = np.linalg.qr(np.eye(dim) + eps * rng.standard_normal((dim, dim)) / np.sqrt(dim))
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)


def _orthonormal_columns(rng, rows, cols):
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)


def _spectrum(d_head):
    rank = (3 * d_head) // 4
    top = SPECTRUM_TOP * (SPECTRUM_BOTTOM / SPECTRUM_TOP) ** (np.arange(rank) / max(rank - 1, 1))
    return np.concatenate([top, np.full(d_head - rank, SPECTRUM_FLOOR * SPECTRUM_TOP)])


def _pair_aligned_basis(rng, d_head):
    """Orthogonal basis whose leading columns pair up on RoPE planes."""
    pairs = rng.permutation(d_head // 2)
    perm = np.zeros((d_head, d_head))
    for i, p in enumerate(pairs):
        perm[2 * p, 2 * i] = 1.0
        perm[2 * p + 1, 2 * i + 1] = 1.0
    return perm @ _perturbation(rng, d_head, 0.15)


def _head_weight(rng, d_in, basis, spectrum, scale):
    """``d_in x d_head`` weight ``U diag(spectrum) basisᵀ`` times ``scale``."""
    u = _orthonormal_columns(rng, d_in, basis.shape[0])
    return scale * (u * spectrum) @ basis.T


def _positional_pair(rng, d_head, theta_base, offset, amplitude):
    """Constant (pre-RoPE) query and key parts whose post-RoPE dot product
    peaks when the key is ``offset`` positions behind the query."""
    inv_freq = theta_base ** (-np.arange(0, d_head, 2) / d_head)
    c_q = np.zeros(d_head)
    c_k = np.zeros(d_head)
    for p in range(min(POS_PAIRS, d_head // 2)):
        phase = rng.uniform(0, 2 * np.pi)
        c_q[2 * p : 2 * p + 2] = amplitude * np.array([np.cos(phase), np.sin(phase)])
        ang = phase + offset * inv_freq[p]
        c_k[2 * p : 2 * p + 2] = amplitude * np.array([np.cos(ang), np.sin(ang)])
    return c_q, c_k


def build_toy_model(config, seed=0, fit_readout=True):
    """Deterministically build a :class:`ToyModel` from ``(config, seed)``.

    With ``fit_readout`` (and a byte vocabulary) the unembedding is then fit
    to next-byte prediction on the bundled calibration text, so the model
    has a meaningful perplexity; everything upstream stays random.
    """
    if not isinstance(config, ModelConfig):
        raise ConfigurationError("config must be a ModelConfig")
    rng = np.random.default_rng(seed)
    d, dh, nq, nkv, g = config.d_model, config.d_head, config.n_q_heads, config.n_kv_heads, config.group_size
    spec = _spectrum(dh)
    base_k = _pair_aligned_basis(rng, dh)
    base_v = base_k @ _perturbation(rng, dh, KV_PERTURBATION)
    layers = []
    for li in range(config.num_layers):
        # LayerNorm output is zero-mean across features, so h . bias_dir is
        # exactly LN_BIAS_SCALE for every token
        bias_dir = np.full(d, 1.0 / np.sqrt(d))
        layer_k = base_k @ _perturbation(rng, dh, LAYER_PERTURBATION)
        layer_v = base_v @ _perturbation(rng, dh, LAYER_PERTURBATION)
        w_q = np.zeros((d, nq * dh))
        w_k = np.zeros((d, nkv * dh))
        w_v = np.zeros((d, nkv * dh))
        w_o = np.zeros((nq * dh, d))
        for j in range(nkv):
            bk = layer_k @ _perturbation(rng, dh, HEAD_PERTURBATION)
            bv = layer_v @ _perturbation(rng, dh, HEAD_PERTURBATION)
            w_k[:, j * dh : (j + 1) * dh] = _head_weight(rng, d, bk, spec, QK_SCALE)
            w_v[:, j * dh : (j + 1) * dh] = _head_weight(rng, d, bv, spec, V_SCALE)
            offset = 1 + (li * nkv + j) % POS_MAX_OFFSET
            c_q, c_k = _positional_pair(rng, dh, config.theta_base, offset, POS_AMPLITUDE / max(LN_BIAS_SCALE, 1e-12))
            if LN_BIAS_SCALE > 0:
                w_k[:, j * dh : (j + 1) * dh] += np.outer(bias_dir, c_k)
            for h in range(j * g, (j + 1) * g):
                w_q[:, h * dh : (h + 1) * dh] = _head_weight(rng, d, bk, spec, QK_SCALE)
                if LN_BIAS_SCALE > 0:
                    w_q[:, h * dh : (h + 1) * dh] += np.outer(bias_dir, c_q)
                w_o[h * dh : (h + 1) * dh, :] = _head_weight(rng, d, bv, spec, O_SCALE).T
        layers.append(
            LayerWeights(
                ln1_gain=np.ones(d),
                ln1_bias=LN_BIAS_SCALE * bias_dir,
                w_q=w_q,
                w_k=w_k,
                w_v=w_v,
                w_o=w_o,
                ln2_gain=np.ones(d),
                ln2_bias=np.zeros(d),
                w_up=rng.standard_normal((d, config.d_ff)) / np.sqrt(d),
                b_up=np.zeros(config.d_ff),
                w_down=MLP_SCALE * rng.standard_normal((config.d_ff, d)) / np.sqrt(config.d_ff),
                b_down=np.zeros(d),
            )
        )
    model = ToyModel(
        config=config,
        seed=int(seed),
        embed=rng.standard_normal((config.vocab_size, d)),
        layers=layers,
        lnf_gain=np.ones(d),
        lnf_bias=np.zeros(d),
        unembed=LOGIT_SCALE * rng.standard_normal((d, config.vocab_size)) / np.sqrt(d),
    )
    model = _as_float32(model)
    if fit_readout and config.vocab_size >= 256:
        from .corpus import calibration_tokens

        model = fit_readout_weights(model, calibration_tokens(READOUT_TOKENS))
    return model


def final_hidden(model, tokens):
    """Final-LayerNorm outputs of a batched forward pass, shape ``(n, d_model)``."""
    probe = replace(model, unembed=np.eye(model.config.d_model, dtype=np.float32))
    return forward_sequence(probe, tokens)[0]


def fit_readout_weights(model, tokens, steps=None, lr=None, l2=None):
    """Copy of ``model`` whose unembedding is an L2-regularised softmax
    regression from final hidden states to the next token (Adam, float64,
    full batch, zero init: deterministic)."""
    steps = READOUT_STEPS if steps is None else check_count(steps, "steps", minimum=1)
    lr = READOUT_LR if lr is None else float(lr)
    l2 = READOUT_L2 if l2 is None else float(l2)
    tokens = as_tokens(tokens, model.config.vocab_size, min_length=2)
    x = final_hidden(model, tokens)[:-1].astype(np.float64)
    y = tokens[1:]
    n = len(y)
    w = np.zeros((x.shape[1], model.config.vocab_size))
    m1, m2 = np.zeros_like(w), np.zeros_like(w)
    b1, b2 = 0.9, 0.999
    for it in range(1, steps + 1):
        p = np.exp(log_softmax64(x @ w))
        p[np.arange(n), y] -= 1.0
        g = x.T @ p / n + l2 * w
        m1 = b1 * m1 + (1 - b1) * g
        m2 = b2 * m2 + (1 - b2) * g * g
        w -= lr * (m1 / (1 - b1**it)) / (np.sqrt(m2 / (1 - b2**it)) + 1e-8)
    return replace(model, unembed=np.ascontiguousarray(w, dtype=np.float32))


def _as_float32(model):
    for layer in model.layers:
        for name in LayerWeights.TENSORS:
            setattr(layer, name, np.ascontiguousarray(getattr(layer, name), dtype=np.float32))
    model.embed = np.ascontiguousarray(model.embed, dtype=np.float32)
    model.lnf_gain = np.ascontiguousarray(model.lnf_gain, dtype=np.float32)
    model.lnf_bias = np.ascontiguousarray(model.lnf_bias, dtype=np.float32)
    model.unembed = np.ascontiguousarray(model.unembed, dtype=np.float32)
    return model


def expand_kv_heads(model):
    """Equivalent MHA model: every KV head replicated for each query head in its group."""
    cfg = model.config
    if not cfg.is_gqa:
        return model
    dh, g = cfg.d_head, cfg.group_size
    cols = np.concatenate([np.arange(j * dh, (j + 1) * dh) for h in range(cfg.n_q_heads) for j in [h // g]])
    layers = [replace(layer, w_k=layer.w_k[:, cols].copy(), w_v=layer.w_v[:, cols].copy()) for layer in model.layers]
    return replace(
        model,
        config=replace(cfg, n_kv_heads=cfg.n_q_heads),
        layers=layers,
        projections=None,
        w_v_hat=None,
        w_o_hat=None,
    )


# ---------------------------------------------------------------------------
# numerics


def layer_norm(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + np.float32(LN_EPS)) * gain + bias


def gelu(x):
    return np.float32(0.5) * x * (1 + np.tanh(np.float32(0.7978845608) * (x + np.float32(0.044715) * x**3)))


def log_softmax64(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class SequenceTrace:
    """Activations captured by :func:`forward_sequence` (per layer lists).

    ``q``: ``(N_q, n, d_h)`` post-RoPE; ``k``/``v``: ``(N_kv, n, d_h)``;
    ``q_pre``/``k_pre`` are the same before RoPE.
    """

    q: list = field(default_factory=list)
    k: list = field(default_factory=list)
    v: list = field(default_factory=list)
    q_pre: list = field(default_factory=list)
    k_pre: list = field(default_factory=list)
    attn_out: list = field(default_factory=list)


FORWARD_CHUNK = 512


def _causal_attention(q, k, v, group_size):
    """Batched causal softmax attention, ``(N_q, n, d_h)`` out.

    Query rows are processed in chunks so each chunk only scores the keys
    it can see; a query head uses KV head ``h // group_size``.
    """
    n_q, n, dh = q.shape
    n_kv = k.shape[0]
    scale = np.float32(1.0 / np.sqrt(dh))
    qg = q.reshape(n_kv, group_size, n, dh)
    out = np.empty((n_kv, group_size, n, dh), dtype=np.float32)
    for c0 in range(0, n, FORWARD_CHUNK):
        c1 = min(n, c0 + FORWARD_CHUNK)
        s = qg[:, :, c0:c1] @ k[:, None, :c1].swapaxes(-1, -2)
        s *= scale
        future = np.arange(c1)[None, :] > np.arange(c0, c1)[:, None]
        s += np.where(future, -np.inf, 0.0).astype(np.float32)
        s -= s.max(axis=-1, keepdims=True)
        np.exp(s, out=s)
        s /= s.sum(axis=-1, keepdims=True)
        out[:, :, c0:c1] = s @ v[:, None, :c1]
    return out.reshape(n_q, n, dh)


def forward_sequence(model, tokens, capture=False):
    """Batched causal forward pass with the original (unrotated) weights.

    Returns ``(logits, trace)``; ``trace`` is None unless ``capture``.
    """
    cfg = model.config
    tokens = as_tokens(tokens, cfg.vocab_size)
    n, dh, nq, nkv, g = len(tokens), cfg.d_head, cfg.n_q_heads, cfg.n_kv_heads, cfg.group_size
    trace = SequenceTrace() if capture else None
    positions = np.arange(n)
    x = model.embed[tokens]
    for layer in model.layers:
        h = layer_norm(x, layer.ln1_gain, layer.ln1_bias)
        q_pre = (h @ layer.w_q).reshape(n, nq, dh).transpose(1, 0, 2)
        k_pre = (h @ layer.w_k).reshape(n, nkv, dh).transpose(1, 0, 2)
        v = np.ascontiguousarray((h @ layer.w_v).reshape(n, nkv, dh).transpose(1, 0, 2))
        q = rope(q_pre, positions, cfg.theta_base)
        k = rope(k_pre, positions, cfg.theta_base)
        heads = _causal_attention(q, k, v, g).transpose(1, 0, 2)
        attn = np.ascontiguousarray(heads).reshape(n, nq * dh) @ layer.w_o
        x = x + attn
        x = x + gelu(layer_norm(x, layer.ln2_gain, layer.ln2_bias) @ layer.w_up + layer.b_up) @ layer.w_down + layer.b_down
        if capture:
            trace.q.append(q)
            trace.k.append(k)
            trace.v.append(v)
            trace.q_pre.append(q_pre)
            trace.k_pre.append(k_pre)
            trace.attn_out.append(attn)
    logits = layer_norm(x, model.lnf_gain, model.lnf_bias) @ model.unembed
    return logits, trace


# ---------------------------------------------------------------------------
# decode


@dataclass(frozen=True)
class SwanParams:
    """Cache settings for SWAN mode. ``k_value`` defaults to ``k_key``."""

    k_key: int
    k_value: int = None
    buffer_size: int = 0
    precision: str = "fp16"
    projections: object = None

    def __post_init__(self):
        if self.k_value is None:
            object.__setattr__(self, "k_value", self.k_key)
        if self.precision not in PRECISIONS:
            raise InvalidInputError(f"precision must be one of {PRECISIONS}")
        check_count(self.k_key, "k_key")
        check_count(self.k_value, "k_value")
        check_count(self.buffer_size, "buffer_size")


def modeled_step_flops(config, L, mode, k_key=None, k_value=None, buffer_size=0):
    """Closed-form attention FLOPs of one decode step summed over all heads and layers."""
    dh, nq, nkv = config.d_head, config.n_q_heads, config.n_kv_heads
    if mode == "baseline":
        per_layer = nq * 4 * L * dh
    else:
        dense = min(L, buffer_size)
        sparse = L - dense
        per_layer = (
            2 * dh * dh * (nq + nkv)
            + nq * (2 * sparse * k_key + 2 * sparse * k_value + 4 * dense * dh)
        )
    return per_layer * config.num_layers


class DecodeSession:
    """Incremental decoder state: per-(layer, KV head) caches and position."""

    def __init__(self, model, mode="baseline", params=None, baseline_precision="f32"):
        if mode not in ("baseline", "swan"):
            raise InvalidInputError(f"mode must be 'baseline' or 'swan', got {mode!r}")
        cfg = model.config
        self.mode = mode
        self.params = params
        if mode == "swan":
            if params is None or params.projections is None:
                raise ConfigurationError("swan mode requires SwanParams with a ProjectionSet")
            if params.projections.config != cfg:
                raise ConfigurationError("projection set was calibrated for a different model config")
            if params.k_key > cfg.d_head or params.k_value > cfg.d_head:
                raise ConfigurationError("k_key/k_value exceed the head dimension")
            if model.projections is not params.projections:
                from .calibration import absorb_projections

                model = absorb_projections(model, params.projections)
            for layer_p in params.projections.p_qk:
                for p in layer_p:
                    check_projection(p, cfg.d_head)
            self.caches = [
                [
                    HybridKVCache(cfg.d_head, params.buffer_size, params.k_key, params.k_value, params.precision)
                    for _ in range(cfg.n_kv_heads)
                ]
                for _ in range(cfg.num_layers)
            ]
        else:
            self.caches = [
                [DenseKVCache(cfg.d_head, baseline_precision) for _ in range(cfg.n_kv_heads)]
                for _ in range(cfg.num_layers)
            ]
        self.model = model
        self.position = 0
        self.counter = FlopCounter()
        self.last_attn_outputs = []

    def __len__(self):
        return self.position

    def cache_bytes(self):
        return sum(c.memory_footprint().total for row in self.caches for c in row)

    def step(self, token):
        """Feed one token; return float32 logits for the next one."""
        model, cfg = self.model, self.model.config
        if not 0 <= int(token) < cfg.vocab_size:
            raise InvalidInputError(f"token {token} outside vocabulary")
        dh, nq, nkv, g = cfg.d_head, cfg.n_q_heads, cfg.n_kv_heads, cfg.group_size
        swan = self.mode == "swan"
        pos = self.position
        self.counter = FlopCounter()
        self.last_attn_outputs = []
        x = model.embed[int(token)]
        for li, layer in enumerate(model.layers):
            h = layer_norm(x, layer.ln1_gain, layer.ln1_bias)
            w_v = model.w_v_hat[li] if swan else layer.w_v
            w_o = model.w_o_hat[li] if swan else layer.w_o
            q = rope((h @ layer.w_q).reshape(nq, dh), pos, cfg.theta_base)
            k = rope((h @ layer.w_k).reshape(nkv, dh), pos, cfg.theta_base)
            v = (h @ w_v).reshape(nkv, dh)
            heads = np.empty((nq, dh), dtype=np.float32)
            for j in range(nkv):
                cache = self.caches[li][j]
                q_block = q[j * g : (j + 1) * g]
                if swan:
                    res = swan_attention_step(
                        AttentionStepInput(q_block, k[j], v[j], pos, li, j),
                        cache,
                        self.params.projections.p_qk[li][j],
                        counter=self.counter,
                        check=False,
                    )
                    heads[j * g : (j + 1) * g] = res.output
                else:
                    cache.append(k[j], v[j])
                    heads[j * g : (j + 1) * g] = dense_attention_step(q_block, cache, counter=self.counter)
            attn = heads.reshape(-1) @ w_o
            self.last_attn_outputs.append(attn)
            x = x + attn
            x = x + gelu(layer_norm(x, layer.ln2_gain, layer.ln2_bias) @ layer.w_up + layer.b_up) @ layer.w_down + layer.b_down
        self.position += 1
        return layer_norm(x, model.lnf_gain, model.lnf_bias) @ model.unembed


@dataclass
class RunMetrics:
    """Per-step records of a decode run (one entry per processed token)."""

    mode: str
    L: list = field(default_factory=list)
    measured_flops: list = field(default_factory=list)
    modeled_flops_standard: list = field(default_factory=list)
    modeled_flops_swan: list = field(default_factory=list)
    measured_flops_baseline: list = field(default_factory=list)
    cache_bytes: list = field(default_factory=list)
    baseline_cache_bytes: list = field(default_factory=list)
    drift_max: list = field(default_factory=list)
    drift_l2: list = field(default_factory=list)
    layer_drift_max: list = field(default_factory=list)
    tokens_generated: int = 0
    perplexity: float = None

    @property
    def steps(self):
        return len(self.L)

    def mean_drift(self):
        return float(np.mean(self.drift_l2)) if self.drift_l2 else 0.0


RUN_CSV_COLUMNS = (
    "step", "L", "mode",
    "modeled_flops_standard", "modeled_flops_swan",
    "measured_flops_standard", "measured_flops_swan",
    "bytes_cache", "bytes_cache_baseline",
    "drift_max", "drift_l2",
)


def _record(metrics, session, shadow, logits, base_logits, params):
    cfg = session.model.config
    L = session.position
    metrics.L.append(L)
    metrics.measured_flops.append(session.counter.total)
    metrics.modeled_flops_standard.append(modeled_step_flops(cfg, L, "baseline"))
    if params is not None:
        metrics.modeled_flops_swan.append(
            modeled_step_flops(cfg, L, "swan", params.k_key, params.k_value, params.buffer_size)
        )
    else:
        metrics.modeled_flops_swan.append(None)
    metrics.cache_bytes.append(session.cache_bytes())
    if shadow is not None:
        diff = logits.astype(np.float64) - base_logits.astype(np.float64)
        metrics.measured_flops_baseline.append(shadow.counter.total)
        metrics.baseline_cache_bytes.append(shadow.cache_bytes())
        metrics.drift_max.append(float(np.max(np.abs(diff))))
        metrics.drift_l2.append(float(np.linalg.norm(diff)))
        metrics.layer_drift_max.append(
            max(
                float(np.max(np.abs(a.astype(np.float64) - b)))
                for a, b in zip(session.last_attn_outputs, shadow.last_attn_outputs)
            )
        )


def decode(model, prompt, steps, mode="baseline", params=None, track_drift=True):
    """Greedy decode. The prompt is fed token by token through the same cache
    path as generated tokens.

    In SWAN mode with ``track_drift`` a baseline shadow session consumes the
    same token stream, and per-step logit drift and per-layer attention
    output drift are recorded. Returns ``(tokens, RunMetrics)`` where
    ``tokens`` is prompt followed by the ``steps`` generated ids.
    """
    prompt = as_tokens(prompt, model.config.vocab_size, min_length=1, name="prompt")
    steps = check_count(steps, "steps")
    session = DecodeSession(model, mode, params)
    shadow = DecodeSession(model, "baseline") if (mode == "swan" and track_drift) else None
    metrics = RunMetrics(mode=mode)
    out = [int(t) for t in prompt]
    logits = None

    def feed(token):
        lg = session.step(token)
        base = shadow.step(token) if shadow is not None else None
        _record(metrics, session, shadow, lg, base, params if mode == "swan" else None)
        return lg

    for t in prompt:
        logits = feed(int(t))
    for _ in range(steps):
        nxt = int(np.argmax(logits))
        out.append(nxt)
        logits = feed(nxt)
    metrics.tokens_generated = steps
    return np.array(out, dtype=np.int64), metrics


def perplexity(model, text, mode="baseline", params=None):
    """``exp(mean NLL)`` of ``text[1:]`` under teacher forcing with the chosen cache."""
    text = as_tokens(text, model.config.vocab_size, min_length=2, name="text")
    session = DecodeSession(model, mode, params)
    nll = 0.0
    for i in range(len(text) - 1):
        lp = log_softmax64(session.step(int(text[i])))
        nll -= lp[int(text[i + 1])]
    return float(np.exp(nll / (len(text) - 1)))


def reference_perplexity(model, text, mode="baseline", params=None):
    """``exp`` of the mean cross-entropy of the selected cache mode's
    next-token distribution against the uncompressed model's distribution,
    teacher-forced along ``text``.

    Each term equals ``H(p_t) + KL(p_t || q_t)`` with ``p_t`` the baseline
    and ``q_t`` the evaluated prediction, so this is the label perplexity's
    expectation when text is drawn from the baseline itself, without the
    sampling noise. In baseline mode it is ``exp`` of the mean entropy.
    """
    text = as_tokens(text, model.config.vocab_size, min_length=2, name="text")
    session = DecodeSession(model, mode, params)
    ref = session if mode == "baseline" else DecodeSession(model, "baseline")
    total = 0.0
    for i in range(len(text) - 1):
        lq = log_softmax64(session.step(int(text[i])))
        lp = lq if ref is session else log_softmax64(ref.step(int(text[i])))
        total -= float(np.exp(lp) @ lq)
    return float(np.exp(total / (len(text) - 1)))


# ---------------------------------------------------------------------------
# weight file


_WEIGHTS_MAGIC = b"SWANTOY1"


def model_to_bytes(model):
    """Serialise weights: magic, u64 header length, JSON header, f32 LE payloads."""
    entries, payload, offset = [], [], 0
    for name, arr in model.tensors():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        payload.append(data)
        offset += len(data)
    header = json.dumps(
        {"config": model.config.to_dict(), "seed": model.seed, "dtype": "f32", "tensors": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    return _WEIGHTS_MAGIC + struct.pack("<Q", len(header)) + header + b"".join(payload)


def model_from_bytes(data):
    if data[:8] != _WEIGHTS_MAGIC:
        raise InvalidInputError("not a toy-model weight file")
    (hlen,) = struct.unpack_from("<Q", data, 8)
    header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    base = 16 + hlen
    cfg = ModelConfig(**header["config"])
    arrays = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        arrays[e["name"]] = np.frombuffer(data, "<f4", e["nbytes"] // 4, start).reshape(e["shape"]).astype(np.float32)
    layers = [
        LayerWeights(**{name: arrays[f"layers.{i}.{name}"] for name in LayerWeights.TENSORS})
        for i in range(cfg.num_layers)
    ]
    return ToyModel(
        config=cfg,
        seed=header["seed"],
        embed=arrays["embed"],
        layers=layers,
        lnf_gain=arrays["lnf_gain"],
        lnf_bias=arrays["lnf_bias"],
        unembed=arrays["unembed"],
    )


def save_model(model, path):
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def load_model(path):
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
