"""Input validation helpers.

Every public entry point funnels arrays through these so that the kernels
can assume contiguous, finite float32 data of the right rank.
"""

import numpy as np

from .exceptions import InvalidInputError


def as_matrix(a, name="matrix", allow_empty=False):
    """Return ``a`` as a C-contiguous 2-D float32 array, rejecting bad input."""
    arr = np.asarray(a)
    if arr.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-D, got shape {arr.shape}")
    if not allow_empty and arr.size == 0:
        raise InvalidInputError(f"{name} must be non-empty, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.number):
        raise InvalidInputError(f"{name} must be numeric, got dtype {arr.dtype}")
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains NaN or Inf")
    return arr


def as_vector(v, name="vector", length=None):
    """Return ``v`` as a 1-D finite float32 array, optionally of a fixed length."""
    arr = np.asarray(v)
    if arr.ndim != 1:
        raise InvalidInputError(f"{name} must be 1-D, got shape {arr.shape}")
    if length is not None and arr.shape[0] != length:
        raise InvalidInputError(f"{name} must have length {length}, got {arr.shape[0]}")
    if not np.issubdtype(arr.dtype, np.number):
        raise InvalidInputError(f"{name} must be numeric, got dtype {arr.dtype}")
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains NaN or Inf")
    return arr


def as_head_block(x, d_head, name="queries"):
    """Accept a single head vector or a (G, d_head) block; always return 2-D."""
    arr = np.asarray(x)
    if arr.ndim == 1:
        return as_vector(arr, name, d_head)[None, :]
    arr = as_matrix(arr, name)
    if arr.shape[1] != d_head:
        raise InvalidInputError(f"{name} must have width {d_head}, got {arr.shape[1]}")
    return arr


def as_tokens(tokens, vocab_size=None, min_length=1, name="tokens"):
    """Return a 1-D int64 token array with every id inside the vocabulary."""
    arr = np.asarray(tokens)
    if arr.ndim != 1:
        raise InvalidInputError(f"{name} must be 1-D, got shape {arr.shape}")
    if arr.shape[0] < min_length:
        raise InvalidInputError(f"{name} needs at least {min_length} entries, got {arr.shape[0]}")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        raise InvalidInputError(f"{name} must be integer ids, got dtype {arr.dtype}")
    arr = arr.astype(np.int64)
    if vocab_size is not None and arr.size and (arr.min() < 0 or arr.max() >= vocab_size):
        raise InvalidInputError(f"{name} contains ids outside [0, {vocab_size})")
    return arr


def check_count(value, name, minimum=0, maximum=None):
    """Validate a non-negative integer parameter and return it as ``int``."""
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        raise InvalidInputError(f"{name} must be an integer, got {value!r}")
    value = int(value)
    if value < minimum:
        raise InvalidInputError(f"{name} must be >= {minimum}, got {value}")
    if maximum is not None and value > maximum:
        raise InvalidInputError(f"{name} must be <= {maximum}, got {value}")
    return value
