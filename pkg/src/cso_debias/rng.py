"""Counter-based deterministic RNG streams.

Every random draw in the package comes from an :class:`RngStream`, a cheap
value identified by ``(seed, stream_id)``.  Streams are backed by the Philox
counter-based bit generator, so the same ``(seed, stream_id)`` pair replays
the identical sequence on any platform, and distinct stream ids are
statistically independent.  Substreams are derived by hashing integer keys
(iteration, role, sample index, ...) into a new stream id, which makes draw
sequences independent of scheduling: parallel and serial execution see the
same values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_MASK64 = (1 << 64) - 1

# Role keys for substream derivation.  Keeping them in one place documents
# the draw layout and lets tests rebuild the exact streams an algorithm used.
ROLE_XI = 0x01
ROLE_INNER_VALUES = 0x02
ROLE_INNER_VALUES_ALT = 0x03  # second value set used by second-order extrapolation
ROLE_INNER_JACS = 0x04
ROLE_COIN_OUT = 0x05
ROLE_COIN_IN = 0x06
ROLE_INDICES = 0x07
ROLE_INIT = 0x08
ROLE_EVAL = 0x09
ROLE_REPLAY = 0x0A
ROLE_OUTPUT = 0x0B
ROLE_DATA = 0x0C


def _splitmix64(z: int) -> int:
    """One round of the splitmix64 finalizer; a bijective 64-bit mixer."""
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def derive_stream_id(stream_id: int, *keys: int) -> int:
    """Hash integer keys into a parent stream id, giving a child id."""
    sid = stream_id & _MASK64
    for k in keys:
        sid = _splitmix64(sid ^ _splitmix64(int(k) & _MASK64))
    return sid


@dataclass
class RngStream:
    """A deterministic random stream identified by ``(seed, stream_id)``.

    The value itself is cheap and copyable; the backing generator is
    materialized lazily on first draw.  Copies made before any draw replay
    the same sequence.  Each thread should own its streams.
    """

    seed: int
    stream_id: int = 0
    _gen: np.random.Generator | None = field(
        default=None, repr=False, compare=False
    )

    @property
    def generator(self) -> np.random.Generator:
        """The backing numpy Generator (Philox keyed by seed and stream id)."""
        if self._gen is None:
            key = [self.seed & _MASK64, self.stream_id & _MASK64]
            self._gen = np.random.Generator(np.random.Philox(key=key))
        return self._gen

    def substream(self, *keys: int) -> "RngStream":
        """Derive a fresh, unconsumed child stream from integer keys.

        Same parent and keys always give the same child, so per-(iteration,
        role, index) substreams draw identical values regardless of the
        order in which they are consumed.
        """
        return RngStream(self.seed, derive_stream_id(self.stream_id, *keys))

    def fresh(self) -> "RngStream":
        """An unconsumed copy of this stream's identity."""
        return RngStream(self.seed, self.stream_id)
