"""Decode-step attention kernels.

``swan_attention_step`` runs one token through the hybrid cache: rotate the
new query and key by ``P_QK``, push the pair into the cache (possibly
pruning the oldest buffered pair into the sparse history), score against
sparse history and dense buffer in one concatenated pass, softmax, and
aggregate values the same way. Sparse rows are never densified; scores and
outputs touch only the stored components.

``dense_attention_step`` is the plain scaled-dot-product reference.

Both accept either a single query vector or a ``(G, d_head)`` block of
queries sharing one KV head (GQA).
"""

from dataclasses import dataclass, field

import numpy as np

from .cache import DenseKVCache, HybridKVCache
from .exceptions import CacheStateError, ConfigurationError, InvalidInputError
from .flops import SOFTMAX_FLOPS_PER_SCORE, FlopCounter
from .tensor import softmax
from .validation import as_head_block, as_matrix, as_vector

ORTHOGONALITY_LIMIT = 1e-3


@dataclass(frozen=True)
class AttentionStepInput:
    """New query (or GQA query block), key and pre-rotated value for one step.

    ``q_new`` and ``k_new`` are post-RoPE but not yet rotated by ``P_QK``;
    ``v_new_rotated`` already came out of the absorbed value weights.
    """

    q_new: np.ndarray
    k_new: np.ndarray
    v_new_rotated: np.ndarray
    position: int = 0
    layer: int = 0
    kv_head: int = 0


@dataclass
class AttentionStepOutput:
    output: np.ndarray
    scores: np.ndarray
    weights: np.ndarray
    flops: FlopCounter = field(default_factory=FlopCounter)


def _dense_scores(q_block, keys):
    return q_block @ keys.T


def _dense_aggregate(weights, values):
    return weights @ values


def sparse_dense_dot(q_rot, sv, counter=None):
    """``sum_j q[idx_j] * value_j`` over the stored components only.

    Accumulates sequentially in float32, in index order.
    """
    q_rot = as_vector(q_rot, "q_rot")
    if sv.indices.size and int(sv.indices.max()) >= q_rot.shape[0]:
        raise InvalidInputError("sparse index outside query length")
    vals = sv.decoded()
    gathered = q_rot[sv.indices.astype(np.intp)]
    acc = np.float32(0.0)
    for a, b in zip(gathered, vals):
        acc = np.float32(acc + np.float32(a * b))
    if counter is not None:
        counter.scores += 2 * sv.k_active
    return float(acc)


def sparse_scores(q_block, store, counter=None):
    """Scores of each query row against every row of a packed sparse store."""
    idx = store.indices.astype(np.intp)
    vals = store.decoded_values()
    if counter is not None:
        counter.scores += 2 * idx.size * q_block.shape[0]
    if idx.shape[0] == 0:
        return np.zeros((q_block.shape[0], 0), dtype=np.float32)
    return np.einsum("gnk,nk->gn", q_block[:, idx], vals)


def sparse_aggregate(weights, store, d_head, counter=None):
    """``weights @ V_sparse`` computed by scattering into the retained columns."""
    g = weights.shape[0]
    out = np.zeros((g, d_head), dtype=np.float32)
    idx = store.indices.astype(np.intp)
    if counter is not None:
        counter.values += 2 * idx.size * g
    if idx.size == 0:
        return out
    contrib = weights[:, :, None] * store.decoded_values()[None, :, :]
    flat = (np.arange(g)[:, None, None] * d_head + idx[None, :, :]).ravel()
    np.add.at(out.reshape(-1), flat, contrib.ravel())
    return out


def _count_dense(counter, g, n, d_head):
    if counter is not None:
        counter.scores += 2 * g * n * d_head
        counter.values += 2 * g * n * d_head


def dense_attention_step(q, cache, values=None, counter=None):
    """Reference attention ``softmax(q Kᵀ / sqrt(d_h)) V``.

    ``cache`` is a :class:`DenseKVCache` or a key matrix (with ``values``).
    Returns an array shaped like ``q``.
    """
    if isinstance(cache, DenseKVCache):
        cache.require_nonempty()
        keys, vals = cache.keys, cache.values
    else:
        if cache is None or values is None or len(cache) == 0:
            raise CacheStateError("attention over an empty cache")
        keys = as_matrix(cache, "keys")
        vals = as_matrix(values, "values")
    d_head = keys.shape[1]
    q_block = as_head_block(q, d_head, "q")
    scores = _dense_scores(q_block, keys)
    weights = softmax(scores, 1.0 / np.sqrt(d_head))
    out = _dense_aggregate(weights, vals)
    _count_dense(counter, q_block.shape[0], keys.shape[0], d_head)
    if counter is not None:
        counter.softmax += SOFTMAX_FLOPS_PER_SCORE * scores.size
    return out[0] if np.ndim(q) == 1 else out


def check_projection(p_qk, d_head):
    p = as_matrix(p_qk, "p_qk")
    if p.shape != (d_head, d_head):
        raise ConfigurationError(f"p_qk must be {d_head}x{d_head}, got {p.shape}")
    resid = np.max(np.abs(p.astype(np.float64) @ p.T.astype(np.float64) - np.eye(d_head)))
    if resid > ORTHOGONALITY_LIMIT:
        raise ConfigurationError(f"p_qk is not orthogonal (residual {resid:.2e})")
    return p


def swan_attention_step(inp, cache, p_qk, counter=None, check=True):
    """One SWAN decode step against ``cache`` (mutated: the new pair is appended)."""
    if not isinstance(cache, HybridKVCache):
        raise ConfigurationError("swan_attention_step needs a HybridKVCache")
    d_head = cache.d_head
    p = check_projection(p_qk, d_head) if check else p_qk
    q_block = as_head_block(inp.q_new, d_head, "q_new")
    k_new = as_vector(inp.k_new, "k_new", d_head)
    v_new = as_vector(inp.v_new_rotated, "v_new_rotated", d_head)
    step = FlopCounter()

    q_rot = q_block @ p
    k_rot = k_new @ p
    step.projection += 2 * d_head * d_head * (q_block.shape[0] + 1)

    cache.append(k_rot, v_new)

    buf_k, buf_v = cache.buffer_k, cache.buffer_v
    dense_scores = _dense_scores(q_rot, buf_k)
    if cache.n_sparse:
        scores = np.concatenate([sparse_scores(q_rot, cache.sparse_k, step), dense_scores], axis=1)
    else:
        scores = dense_scores
    weights = softmax(scores, 1.0 / np.sqrt(d_head))
    step.softmax += SOFTMAX_FLOPS_PER_SCORE * scores.size

    n_sp = cache.n_sparse
    out = _dense_aggregate(weights[:, n_sp:], buf_v)
    _count_dense(step, q_block.shape[0], buf_k.shape[0], d_head)
    if n_sp:
        out = sparse_aggregate(weights[:, :n_sp], cache.sparse_v, d_head, step) + out

    if counter is not None:
        counter.add(step)
    if np.ndim(inp.q_new) == 1:
        return AttentionStepOutput(out[0], scores[0], weights[0], step)
    return AttentionStepOutput(out, scores, weights, step)
