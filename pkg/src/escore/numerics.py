"""Deterministic counter-based RNG and small matrix statistics.

The RNG is a thin wrapper over the Philox counter-based bit generator:
every draw is addressed by an explicit stream position, so identical
seed + identical call sequence gives a bitwise-identical stream, and a
batch element can own a substream that does not depend on batch size.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

_INV_2_53 = 2.0 ** -53


class Rng:
    """Counter-based random stream keyed by (seed, stream).

    Draws are indexed: drawing ``dim`` values advances an internal
    counter by exactly ``dim`` positions, so two consecutive dim-2
    calls consume the same positions as one dim-4 call.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = int(stream) & 0xFFFFFFFFFFFFFFFF
        self.counter = 0

    def split(self, index: int) -> "Rng":
        """Independent child stream; deterministic in (seed, stream, index)."""
        child = (self.stream * 1_000_003 + 1 + int(index)) & 0xFFFFFFFFFFFFFFFF
        return Rng(self.seed, child)

    def _raw(self, n: int) -> np.ndarray:
        bg = np.random.Philox(key=[self.seed, self.stream])
        block, offset = divmod(self.counter, 4)
        if block:
            bg.advance(block)
        raw = bg.random_raw(offset + n)[offset:]
        self.counter += n
        return raw

    def uniform(self, shape=()) -> np.ndarray:
        """Uniform draws in (0, 1), one stream position each."""
        n = int(np.prod(shape, dtype=int)) if shape else 1
        u = ((self._raw(n) >> 11) + 1).astype(np.float64) * _INV_2_53
        return u.reshape(shape) if shape else float(u[0])

    def normal(self, shape=()) -> np.ndarray:
        """Standard normal draws via inverse CDF, one position each."""
        u = self.uniform(shape if shape else (1,))
        z = ndtri(np.clip(u, _INV_2_53, 1.0 - _INV_2_53))
        return z if shape else float(z[0])

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Uniform integers in [low, high), one position each (modulo bias
        is negligible for the small ranges used here)."""
        n = int(np.prod(shape, dtype=int)) if shape else 1
        v = low + (self._raw(n) % (high - low)).astype(np.int64)
        return v.reshape(shape) if shape else int(v[0])


def gaussian_sample(rng: Rng, dim: int) -> np.ndarray:
    """dim iid standard-normal draws; advances the stream by dim."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    return rng.normal((dim,))


def frobenius_norm(m: np.ndarray) -> float:
    return float(np.sqrt(np.sum(np.asarray(m, dtype=np.float64) ** 2)))


def sym_defect(m: np.ndarray) -> float:
    """Relative asymmetry of a square matrix; 0 iff exactly symmetric."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"sym_defect needs a square matrix, got {m.shape}")
    return frobenius_norm(m - m.T) / max(1.0, frobenius_norm(m))
