"""Deterministic random number generation.

Every stochastic step in the toolkit (scatterer fields, PSF jitter, patch
sampling, weight init) draws from :class:`Stream` so that runs are bit-exact
reproducible from a 64-bit seed, independent of thread count and of numpy's
global RNG state.

The generator is counter-mode SplitMix64: output ``i`` of a stream with seed
``s`` is ``mix64(s + (i + 1) * 0x9E3779B97F4A7C15)`` (all arithmetic mod
2^64), where ``mix64`` is the xorshift-multiply finalizer

    z ^= z >> 30;  z *= 0xBF58476D1CE4E5B9
    z ^= z >> 27;  z *= 0x94D049BB133111EB
    z ^= z >> 31

This matches the classic sequential SplitMix64 stream while allowing whole
blocks of outputs to be computed vectorized from their counter values.

Derived quantities are fixed as follows and must not change, or stored
corpora stop being reproducible:

- uniform double in [0, 1):  ``(u64 >> 11) * 2**-53``
- standard normals: Box-Muller on consecutive output pairs ``(a, b)``:
  ``r = sqrt(-2 ln u1)`` with ``u1 = ((a >> 11) + 1) * 2**-53`` (in (0, 1]),
  ``phi = 2 pi u2`` with ``u2 = (b >> 11) * 2**-53``; the pair yields
  ``(r cos phi, r sin phi)`` in that order.
- integer in [0, n): ``u64 % n`` (modulo bias < 2**-50 for the small n used
  here).
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MUL1 = 0xBF58476D1CE4E5B9
_MUL2 = 0x94D049BB133111EB

_TWO_NEG53 = 2.0 ** -53


def _mix64(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer on a uint64 array (wrapping arithmetic)."""
    z = z.astype(np.uint64, copy=True)
    z ^= z >> np.uint64(30)
    z *= np.uint64(_MUL1)
    z ^= z >> np.uint64(27)
    z *= np.uint64(_MUL2)
    z ^= z >> np.uint64(31)
    return z


class Stream:
    """A seekable deterministic stream of 64-bit words.

    Draw order matters: every call consumes counters, so two call sequences
    that interleave differently read different words. Each operation in the
    toolkit documents its own draw order.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._counter = 0

    def _block(self, n: int) -> np.ndarray:
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        z = np.uint64(self.seed) + idx * np.uint64(_GOLDEN)
        return _mix64(z)

    def u64(self, n: int | None = None):
        """Next raw word (int) or block of words (uint64 array)."""
        if n is None:
            return int(self._block(1)[0])
        return self._block(n)

    def uniform(self, lo: float = 0.0, hi: float = 1.0, n: int | None = None):
        """Uniform draw(s) in [lo, hi)."""
        scalar = n is None
        u = (self._block(1 if scalar else n) >> np.uint64(11)).astype(np.float64)
        u = u * _TWO_NEG53 * (hi - lo) + lo
        return float(u[0]) if scalar else u

    def normal(self, n: int, std: float = 1.0) -> np.ndarray:
        """``n`` iid N(0, std^2) doubles via Box-Muller."""
        pairs = (n + 1) // 2
        w = self._block(2 * pairs)
        a, b = w[0::2], w[1::2]
        u1 = ((a >> np.uint64(11)).astype(np.float64) + 1.0) * _TWO_NEG53
        u2 = (b >> np.uint64(11)).astype(np.float64) * _TWO_NEG53
        r = np.sqrt(-2.0 * np.log(u1))
        phi = (2.0 * np.pi) * u2
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(phi)
        out[1::2] = r * np.sin(phi)
        return out[:n] * std

    def randint(self, n: int) -> int:
        """Integer in [0, n)."""
        if n <= 0:
            raise ValueError("randint requires n >= 1")
        return self.u64() % n

    def spawn_seed(self) -> int:
        """A fresh 64-bit seed for a child stream."""
        return self.u64()
