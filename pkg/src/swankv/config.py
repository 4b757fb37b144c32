from dataclasses import asdict, dataclass

from .exceptions import ConfigurationError


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters of a toy decoder.

    ``d_model == n_q_heads * d_head`` and ``n_q_heads % n_kv_heads == 0``;
    ``n_q_heads == n_kv_heads`` is plain multi-head attention, anything else
    is grouped-query attention with ``group_size`` query heads per KV head.
    """

    d_model: int = 128
    d_head: int = 16
    num_layers: int = 2
    n_q_heads: int = 8
    n_kv_heads: int = 8
    theta_base: float = 10000.0
    vocab_size: int = 256

    def __post_init__(self):
        for name in ("d_model", "d_head", "num_layers", "n_q_heads", "n_kv_heads", "vocab_size"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")
        if self.n_q_heads % self.n_kv_heads:
            raise ConfigurationError(
                f"n_q_heads ({self.n_q_heads}) must be divisible by n_kv_heads ({self.n_kv_heads})"
            )
        if self.d_model != self.n_q_heads * self.d_head:
            raise ConfigurationError(
                f"d_model ({self.d_model}) must equal n_q_heads * d_head ({self.n_q_heads * self.d_head})"
            )
        if self.d_head % 2:
            raise ConfigurationError(f"d_head must be even for RoPE, got {self.d_head}")
        if self.d_head > 256:
            raise ConfigurationError("d_head above 256 does not fit uint8 sparse indices")
        if not self.theta_base > 0:
            raise ConfigurationError(f"theta_base must be positive, got {self.theta_base}")

    @property
    def group_size(self):
        return self.n_q_heads // self.n_kv_heads

    @property
    def d_ff(self):
        return 4 * self.d_model

    @property
    def is_gqa(self):
        return self.n_q_heads != self.n_kv_heads

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_heads(cls, d_head=16, num_layers=2, n_q_heads=8, n_kv_heads=None, **kwargs):
        """Build a config deriving ``d_model`` from the head layout."""
        n_kv_heads = n_q_heads if n_kv_heads is None else n_kv_heads
        return cls(
            d_model=d_head * n_q_heads,
            d_head=d_head,
            num_layers=num_layers,
            n_q_heads=n_q_heads,
            n_kv_heads=n_kv_heads,
            **kwargs,
        )
