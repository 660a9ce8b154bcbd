"""Seeded randomness.

Two facilities:

* :func:`substream` derives independent numpy Generators from one run seed
  and a stream name, so data, init, dropout and SPSA draws never interfere.
* :class:`GaussianStream` is a counter-based standard-normal sequence keyed
  by integers. Coordinate ``j`` is a pure function of (key, j), so a long
  perturbation vector can be regenerated chunk by chunk, any number of times,
  without ever being stored.
"""

from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("data", "init", "dropout", "spsa", "shuffle", "select")

_TWO_PI = 2.0 * np.pi
_U53 = 2.0 ** -53


def _stream_id(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Generator for the named substream of ``seed``."""
    return np.random.default_rng([int(seed), _stream_id(name), *map(int, extra)])


class GaussianStream:
    """Counter-addressable N(0, 1) values.

    Uses the Philox counter-based bit generator: each pair of coordinates is
    produced by Box-Muller from two 64-bit words at a fixed counter position,
    so values do not depend on how the sequence is chunked.
    """

    def __init__(self, *key: int):
        words = np.random.SeedSequence([int(k) for k in key]).generate_state(2, np.uint64)
        self._key = words
        self._last = None  # most recent (start, count, values); bounded by one chunk

    def chunk(self, start: int, count: int) -> np.ndarray:
        """Coordinates ``start .. start+count-1``."""
        if count <= 0:
            return np.empty(0)
        if self._last is not None and self._last[:2] == (start, count):
            return self._last[2].copy()
        first_pair = start // 2
        last_pair = (start + count - 1) // 2
        n_pairs = last_pair - first_pair + 1
        first_word = 2 * first_pair
        bg = np.random.Philox(key=self._key)
        block, skip = divmod(first_word, 4)
        if block:
            bg.advance(block)
        raw = bg.random_raw(skip + 2 * n_pairs)[skip:]
        u1 = ((raw[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * _U53  # (0, 1]
        u2 = (raw[1::2] >> np.uint64(11)).astype(np.float64) * _U53  # [0, 1)
        r = np.sqrt(-2.0 * np.log(u1))
        pairs = np.empty(2 * n_pairs)
        pairs[0::2] = r * np.cos(_TWO_PI * u2)
        pairs[1::2] = r * np.sin(_TWO_PI * u2)
        off = start - 2 * first_pair
        out = pairs[off: off + count]
        self._last = (start, count, out.copy())
        return out

    def take(self, count: int) -> np.ndarray:
        return self.chunk(0, count)
