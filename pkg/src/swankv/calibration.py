"""Offline derivation of the per-head rotation bases.

For every layer and KV head two orthogonal ``d_h x d_h`` bases are built:

* ``P_QK`` from the right singular vectors of the post-RoPE queries of the
  head's query group stacked on top of its post-RoPE keys;
* ``P_VO`` from the right singular vectors of the values stacked on top of
  the transposed output-weight slices of the same query group.

``P_VO`` is folded into the value and output weights ahead of time;
``P_QK`` has to be applied at decode time because RoPE sits between the
query/key weights and the attention scores.
"""

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .config import ModelConfig
from .exceptions import ConfigurationError, InvalidInputError
from .model import forward_sequence
from .tensor import matmul, orthogonality_residual, random_orthogonal, right_singular_vectors, svd
from .validation import as_matrix, as_tokens, check_count

VARIANTS = ("learned", "random", "layer_shuffle", "kv_shuffle", "head_shuffle", "identity")
DEFAULT_CALIBRATION_TOKENS = 4096
ORTHOGONALITY_TOL = 1e-5
# joint matrices at least this many times taller than wide go through SᵀS
GRAM_ROUTE_ASPECT = 4

_MAGIC = b"SWANPROJ"
_VERSION = 1
_CONFIG_STRUCT = struct.Struct("<IIIIIfI")


@dataclass
class CalibrationBatch:
    """Activations captured in one forward pass (lists indexed by layer).

    ``q[l]``: ``(N_q, n, d_h)`` post-RoPE queries; ``k[l]``: ``(N_kv, n, d_h)``
    post-RoPE keys; ``v[l]``: ``(N_kv, n, d_h)``; ``w_o[l]``: the layer's
    ``(N_q d_h) x d`` output weight. ``q_pre``/``k_pre`` keep the pre-RoPE
    tensors so the RoPE placement can be checked.
    """

    config: ModelConfig
    n_tokens: int
    q: list
    k: list
    v: list
    w_o: list
    q_pre: list = field(default_factory=list, repr=False)
    k_pre: list = field(default_factory=list, repr=False)


@dataclass(frozen=True, eq=False)
class ProjectionSet:
    """Per-layer, per-KV-head rotation bases.

    ``p_qk`` and ``p_vo`` are float32 arrays of shape
    ``(num_layers, n_kv_heads, d_head, d_head)``.
    """

    config: ModelConfig
    p_qk: np.ndarray
    p_vo: np.ndarray
    variant: str = "learned"
    seed: int = 0
    n_tokens: int = 0
    corpus_id: str = ""

    def __post_init__(self):
        cfg = self.config
        shape = (cfg.num_layers, cfg.n_kv_heads, cfg.d_head, cfg.d_head)
        for name in ("p_qk", "p_vo"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float32)
            if arr.shape != shape:
                raise ConfigurationError(f"{name} must have shape {shape}, got {arr.shape}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.variant not in VARIANTS:
            raise InvalidInputError(f"unknown projection variant {self.variant!r}")

    def residuals(self):
        """Orthogonality residual of every matrix, shape ``(layers, kv_heads, 2)``."""
        cfg = self.config
        out = np.zeros((cfg.num_layers, cfg.n_kv_heads, 2))
        for li in range(cfg.num_layers):
            for j in range(cfg.n_kv_heads):
                out[li, j, 0] = orthogonality_residual(self.p_qk[li, j])
                out[li, j, 1] = orthogonality_residual(self.p_vo[li, j])
        return out

    def max_residual(self):
        return float(self.residuals().max())

    def equals(self, other):
        return (
            self.config == other.config
            and np.array_equal(self.p_qk, other.p_qk)
            and np.array_equal(self.p_vo, other.p_vo)
        )

    # -- file format --------------------------------------------------------

    def to_bytes(self):
        """Little-endian projection file; see docs/formats.md."""
        cfg = self.config
        out = bytearray(_MAGIC)
        out += struct.pack("<I", _VERSION)
        out += _CONFIG_STRUCT.pack(
            cfg.d_model, cfg.d_head, cfg.num_layers, cfg.n_q_heads, cfg.n_kv_heads, cfg.theta_base, cfg.vocab_size
        )
        out += struct.pack("<BQ", VARIANTS.index(self.variant), self.seed)
        for li in range(cfg.num_layers):
            for j in range(cfg.n_kv_heads):
                out += self.p_qk[li, j].astype("<f4").tobytes()
                out += self.p_vo[li, j].astype("<f4").tobytes()
        corpus = self.corpus_id.encode("utf-8")
        out += struct.pack("<IH", self.n_tokens, len(corpus)) + corpus
        return bytes(out)

    @classmethod
    def from_bytes(cls, data):
        if data[:8] != _MAGIC:
            raise InvalidInputError("not a SWANPROJ file")
        (version,) = struct.unpack_from("<I", data, 8)
        if version != _VERSION:
            raise InvalidInputError(f"unsupported projection file version {version}")
        pos = 12
        d_model, d_head, layers, nq, nkv, theta, vocab = _CONFIG_STRUCT.unpack_from(data, pos)
        pos += _CONFIG_STRUCT.size
        cfg = ModelConfig(d_model, d_head, layers, nq, nkv, float(theta), vocab)
        tag, seed = struct.unpack_from("<BQ", data, pos)
        pos += 9
        p_qk = np.empty((layers, nkv, d_head, d_head), dtype=np.float32)
        p_vo = np.empty_like(p_qk)
        size = d_head * d_head
        for li in range(layers):
            for j in range(nkv):
                p_qk[li, j] = np.frombuffer(data, "<f4", size, pos).reshape(d_head, d_head)
                pos += 4 * size
                p_vo[li, j] = np.frombuffer(data, "<f4", size, pos).reshape(d_head, d_head)
                pos += 4 * size
        n_tokens, clen = struct.unpack_from("<IH", data, pos)
        pos += 6
        corpus = data[pos : pos + clen].decode("utf-8")
        if pos + clen != len(data):
            raise InvalidInputError("trailing bytes in projection file")
        return cls(cfg, p_qk, p_vo, VARIANTS[tag], seed, n_tokens, corpus)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


# ---------------------------------------------------------------------------
# activation collection and grouping


def collect_activations(model, tokens):
    """Run ``tokens`` through ``model`` once and keep what calibration needs."""
    tokens = as_tokens(tokens, model.config.vocab_size, min_length=1)
    _, trace = forward_sequence(model, tokens, capture=True)
    return CalibrationBatch(
        config=model.config,
        n_tokens=len(tokens),
        q=trace.q,
        k=trace.k,
        v=trace.v,
        w_o=[layer.w_o for layer in model.layers],
        q_pre=trace.q_pre,
        k_pre=trace.k_pre,
    )


def group_queries(q, n_kv):
    """``(N_q, n, d_h)`` -> ``(N_kv, n*G, d_h)``.

    Query head ``h`` belongs to KV group ``h // G``. Within a group rows are
    head-major then token-major: rows ``[i*n, (i+1)*n)`` are the ``i``-th
    head of the group.
    """
    q = np.asarray(q, dtype=np.float32)
    if q.ndim != 3:
        raise InvalidInputError(f"queries must be (N_q, n, d_h), got shape {q.shape}")
    n_kv = check_count(n_kv, "n_kv", minimum=1)
    n_q, n, d_h = q.shape
    if n_q % n_kv:
        raise ConfigurationError(f"{n_q} query heads cannot be grouped over {n_kv} KV heads")
    return q.reshape(n_kv, (n_q // n_kv) * n, d_h)


def ungroup_queries(q_grouped, n_tokens):
    """Inverse of :func:`group_queries`."""
    n_kv, rows, d_h = q_grouped.shape
    return q_grouped.reshape(n_kv * (rows // n_tokens), n_tokens, d_h)


def group_output_weights(w_o, n_q, n_kv):
    """Slice ``W_O`` (``(N_q d_h) x d``) into ``(N_kv, G, d_h, d)``.

    Slice ``[j, i]`` is query head ``j*G + i``: the same grouping as
    :func:`group_queries`.
    """
    w_o = as_matrix(w_o, "w_o")
    n_q = check_count(n_q, "n_q", minimum=1)
    n_kv = check_count(n_kv, "n_kv", minimum=1)
    if n_q % n_kv:
        raise ConfigurationError(f"{n_q} query heads cannot be grouped over {n_kv} KV heads")
    if w_o.shape[0] % n_q:
        raise InvalidInputError(f"W_O has {w_o.shape[0]} rows, not a multiple of {n_q} heads")
    d_h = w_o.shape[0] // n_q
    return w_o.reshape(n_kv, n_q // n_kv, d_h, w_o.shape[1])


def build_joint_qk(q_grouped, k):
    """Stack a query group's rows on top of its key rows."""
    q_grouped = as_matrix(q_grouped, "q_grouped")
    k = as_matrix(k, "k")
    if q_grouped.shape[1] != k.shape[1]:
        raise InvalidInputError("query and key widths differ")
    return np.concatenate([q_grouped, k], axis=0)


def build_joint_vo(v, w_o_group):
    """Stack value rows on top of each transposed output slice of the group.

    ``w_o_group`` is ``(G, d_h, d)``; the result has ``n + G*d`` rows.
    """
    v = as_matrix(v, "v")
    w = np.asarray(w_o_group, dtype=np.float32)
    if w.ndim == 2:
        w = w[None]
    if w.ndim != 3 or w.shape[1] != v.shape[1]:
        raise InvalidInputError(f"output slices must be (G, {v.shape[1]}, d), got {w.shape}")
    return np.concatenate([v] + [s.T for s in w], axis=0)


def derive_projection(s):
    """Right singular basis of ``s``, columns by descending singular value."""
    s = as_matrix(s, "s")
    rows, cols = s.shape
    if rows < cols:
        raise InvalidInputError(f"need at least {cols} rows to span a {cols}-dim basis, got {rows}")
    if rows >= GRAM_ROUTE_ASPECT * cols:
        _, v = right_singular_vectors(s)
    else:
        v = svd(s).v
    return v


def calibrate(model, tokens, seed=0, corpus_id=""):
    """Derive a learned :class:`ProjectionSet` from one pass over ``tokens``."""
    batch = collect_activations(model, tokens)
    return projections_from_batch(batch, seed=seed, corpus_id=corpus_id)


def projections_from_batch(batch, seed=0, corpus_id=""):
    cfg = batch.config
    p_qk = np.empty((cfg.num_layers, cfg.n_kv_heads, cfg.d_head, cfg.d_head), dtype=np.float32)
    p_vo = np.empty_like(p_qk)
    for li in range(cfg.num_layers):
        q_grouped = group_queries(batch.q[li], cfg.n_kv_heads)
        w_groups = group_output_weights(batch.w_o[li], cfg.n_q_heads, cfg.n_kv_heads)
        for j in range(cfg.n_kv_heads):
            p_qk[li, j] = derive_projection(build_joint_qk(q_grouped[j], batch.k[li][j]))
            p_vo[li, j] = derive_projection(build_joint_vo(batch.v[li][j], w_groups[j]))
    return ProjectionSet(cfg, p_qk, p_vo, "learned", int(seed), batch.n_tokens, corpus_id)


# ---------------------------------------------------------------------------
# absorption


def absorb_value_projection(w_v, p_vo):
    """``W_V @ P_VO``: values come out already rotated."""
    w_v = as_matrix(w_v, "w_v")
    p_vo = as_matrix(p_vo, "p_vo")
    if w_v.shape[1] != p_vo.shape[0]:
        raise InvalidInputError(f"W_V {w_v.shape} does not compose with P_VO {p_vo.shape}")
    return matmul(w_v, p_vo)


def absorb_output_projection(w_o, projections, layer):
    """Replace each query head's ``W_O`` slice by ``P_VOᵀ @ slice`` using its KV group's basis."""
    cfg = projections.config
    w_o = as_matrix(w_o, "w_o")
    layer = check_count(layer, "layer")
    if layer >= cfg.num_layers:
        raise ConfigurationError(f"no projection for layer {layer}")
    dh, g = cfg.d_head, cfg.group_size
    if w_o.shape[0] != cfg.n_q_heads * dh:
        raise ConfigurationError(
            f"W_O has {w_o.shape[0]} rows but the projection set covers {cfg.n_q_heads} heads of width {dh}"
        )
    out = np.empty_like(w_o)
    for h in range(cfg.n_q_heads):
        band = slice(h * dh, (h + 1) * dh)
        out[band] = matmul(projections.p_vo[layer, h // g].T, w_o[band])
    return out


def absorb_projections(model, projections):
    """Model copy carrying absorbed ``Ŵ_V`` and ``Ŵ_O`` for every layer."""
    cfg = model.config
    if projections.config != cfg:
        raise ConfigurationError("projection set was calibrated for a different model config")
    dh = cfg.d_head
    w_v_hat, w_o_hat = [], []
    for li, layer in enumerate(model.layers):
        wv = np.empty_like(layer.w_v)
        for j in range(cfg.n_kv_heads):
            band = slice(j * dh, (j + 1) * dh)
            wv[:, band] = absorb_value_projection(layer.w_v[:, band], projections.p_vo[li, j])
        w_v_hat.append(wv)
        w_o_hat.append(absorb_output_projection(layer.w_o, projections, li))
    return replace(model, projections=projections, w_v_hat=w_v_hat, w_o_hat=w_o_hat)


# ---------------------------------------------------------------------------
# ablation variants


def _derangement(rng, n):
    """Seeded permutation with no fixed points (identity when ``n == 1``)."""
    if n < 2:
        return np.arange(n)
    while True:
        perm = rng.permutation(n)
        if np.all(perm != np.arange(n)):
            return perm


def make_ablation_variant(base, variant, seed=0):
    """Derived projection set for the ablation study.

    ``random`` draws a fresh Haar-orthogonal matrix for every slot;
    ``layer_shuffle`` and ``head_shuffle`` reassign whole (P_QK, P_VO)
    slots across layers or across KV heads within a layer using seeded
    derangements; ``kv_shuffle`` swaps P_QK and P_VO; ``identity`` is the
    no-rotation control.
    """
    if variant not in VARIANTS:
        raise InvalidInputError(f"unknown projection variant {variant!r}; expected one of {VARIANTS}")
    cfg = base.config
    rng = np.random.default_rng(seed)
    p_qk, p_vo = base.p_qk.copy(), base.p_vo.copy()
    tag = variant
    if variant == "learned":
        tag = base.variant
    elif variant == "random":
        seeds = rng.integers(0, 2**63, size=(cfg.num_layers, cfg.n_kv_heads, 2))
        for li in range(cfg.num_layers):
            for j in range(cfg.n_kv_heads):
                p_qk[li, j] = random_orthogonal(cfg.d_head, int(seeds[li, j, 0]))
                p_vo[li, j] = random_orthogonal(cfg.d_head, int(seeds[li, j, 1]))
    elif variant == "layer_shuffle":
        perm = _derangement(rng, cfg.num_layers)
        p_qk, p_vo = p_qk[perm], p_vo[perm]
    elif variant == "head_shuffle":
        for li in range(cfg.num_layers):
            perm = _derangement(rng, cfg.n_kv_heads)
            p_qk[li], p_vo[li] = base.p_qk[li][perm], base.p_vo[li][perm]
    elif variant == "kv_shuffle":
        p_qk, p_vo = p_vo, p_qk
        if base.variant == "kv_shuffle":
            tag = "learned"
    elif variant == "identity":
        eye = np.eye(cfg.d_head, dtype=np.float32)
        p_qk = np.broadcast_to(eye, p_qk.shape).copy()
        p_vo = p_qk.copy()
    return ProjectionSet(cfg, p_qk, p_vo, tag, int(seed), base.n_tokens, base.corpus_id)


# ---------------------------------------------------------------------------
# quality measures


def top_k_energy_fraction(x, p, k):
    """Mean fraction of ``|x_i|²`` kept by the ``k`` largest-magnitude
    coordinates of ``x_i @ p``."""
    y = np.asarray(x, dtype=np.float64) @ np.asarray(p, dtype=np.float64)
    sq = np.sort(y * y, axis=1)[:, ::-1]
    total = sq.sum(axis=1)
    keep = sq[:, :k].sum(axis=1)
    ok = total > 0
    return float(np.mean(keep[ok] / total[ok]))


def pruned_reconstruction_error(x, p, k):
    """Mean relative squared error of ``x_i`` after rotate, top-k prune, rotate back."""
    x = np.asarray(x, dtype=np.float64)
    y = x @ np.asarray(p, dtype=np.float64)
    order = np.argsort(-np.abs(y), axis=1, kind="stable")
    mask = np.zeros_like(y, dtype=bool)
    np.put_along_axis(mask, order[:, :k], True, axis=1)
    # rotation is orthogonal, so the error equals the dropped energy
    dropped = np.where(mask, 0.0, y * y).sum(axis=1)
    total = (x * x).sum(axis=1)
    ok = total > 0
    return float(np.mean(dropped[ok] / total[ok]))


def projection_quality(projections, batch, retention=0.5):
    """Mean pruned-reconstruction error of keys (via P_QK) and values (via P_VO)."""
    cfg = projections.config
    k = int(round(retention * cfg.d_head))
    errs = []
    for li in range(cfg.num_layers):
        for j in range(cfg.n_kv_heads):
            errs.append(pruned_reconstruction_error(batch.k[li][j], projections.p_qk[li, j], k))
            errs.append(pruned_reconstruction_error(batch.v[li][j], projections.p_vo[li, j], k))
    return float(np.mean(errs))
