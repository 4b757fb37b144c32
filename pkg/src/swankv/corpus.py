"""Byte-level text used for calibration and held-out evaluation.

The bundled text is original prose shipped with the package; any UTF-8 or
binary file can stand in for it. Tokens are raw bytes (vocabulary 256). The
first ``calibration_bytes`` bytes are reserved for calibration and evaluation
windows are drawn from the remainder.
"""

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .exceptions import InvalidInputError
from .validation import check_count

BUNDLED_ID = "swankv-harbour-v1"
CALIBRATION_BYTES = 4096


def encode(text):
    """Byte tokens of a ``str`` (UTF-8) or ``bytes`` object."""
    if isinstance(text, str):
        text = text.encode("utf-8")
    return np.frombuffer(bytes(text), dtype=np.uint8).astype(np.int64)


def decode_tokens(tokens):
    return bytes(int(t) for t in tokens).decode("utf-8", errors="replace")


@dataclass(frozen=True, eq=False)
class Corpus:
    tokens: np.ndarray
    corpus_id: str
    calibration_bytes: int = CALIBRATION_BYTES

    def __post_init__(self):
        if len(self.tokens) <= self.calibration_bytes:
            raise InvalidInputError(
                f"corpus {self.corpus_id!r} has {len(self.tokens)} bytes; need more than "
                f"{self.calibration_bytes} to leave held-out text"
            )

    def calibration_tokens(self, n_tokens=None):
        n = self.calibration_bytes if n_tokens is None else check_count(n_tokens, "n_tokens", minimum=1)
        if n > len(self.tokens):
            raise InvalidInputError(f"corpus has only {len(self.tokens)} tokens, asked for {n}")
        return self.tokens[:n]

    def heldout_tokens(self):
        return self.tokens[self.calibration_bytes :]

    def heldout_windows(self, length, count, seed=0):
        """``count`` seeded, non-overlapping windows of ``length`` held-out tokens."""
        length = check_count(length, "length", minimum=2)
        count = check_count(count, "count", minimum=1)
        held = self.heldout_tokens()
        slots = len(held) // length
        if slots < count:
            raise InvalidInputError(f"held-out text fits {slots} windows of {length}, asked for {count}")
        picks = np.sort(np.random.default_rng(seed).choice(slots, size=count, replace=False))
        return [held[i * length : (i + 1) * length] for i in picks]


def bundled_corpus():
    data = resources.files("swankv").joinpath("data/corpus.txt").read_bytes()
    return Corpus(encode(data), BUNDLED_ID)


def load_corpus(path=None):
    """The bundled corpus, or the file at ``path`` (id = file name)."""
    if path is None:
        return bundled_corpus()
    path = Path(path)
    return Corpus(encode(path.read_bytes()), path.name)


def calibration_tokens(n_tokens=CALIBRATION_BYTES):
    return bundled_corpus().calibration_tokens(n_tokens)


def heldout_tokens():
    return bundled_corpus().heldout_tokens()


def heldout_windows(length, count, seed=0):
    return bundled_corpus().heldout_windows(length, count, seed)
