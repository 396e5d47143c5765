"""Counter-based random streams.

Every stochastic choice in the pipeline (stratified jitter, fine-sample
draws, point-location probe directions) is keyed by a (seed, stream,
counter) triple and hashed to uniforms.  The value for a given key never
depends on evaluation order, chunking, or thread count, which is what makes
whole-frame renders bit-reproducible under parallelism.

The mixer is splitmix64; statistical quality is more than adequate for
stratified jitter and direction sampling.
"""

from __future__ import annotations

import numpy as np

# distinct stream ids so different consumers of the same pixel/point key
# never see correlated values
STREAM_COARSE_JITTER = 0x01
STREAM_FINE_DRAWS = 0x02
STREAM_LOCATE_DIR = 0x03
STREAM_FIT_BATCH = 0x04

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _mix(h: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        h = (h ^ (h >> np.uint64(30))) * _MIX1
        h = (h ^ (h >> np.uint64(27))) * _MIX2
        return h ^ (h >> np.uint64(31))


def hash_u64(seed: int, stream: int, *counters) -> np.ndarray:
    """Hash (seed, stream, counters...) to uint64.  Broadcast over counters."""
    with np.errstate(over="ignore"):
        h0 = (seed * int(_GOLDEN) + stream) & 0xFFFFFFFFFFFFFFFF
        h = _mix(np.asarray(h0, dtype=np.uint64))
        for c in counters:
            c = np.asarray(c, dtype=np.uint64)
            h = _mix(h + c * _GOLDEN + np.uint64(1))
    return h


def uniforms(seed: int, stream: int, index, count: int) -> np.ndarray:
    """Per-index uniforms in [0, 1): shape (len(index), count)."""
    index = np.atleast_1d(np.asarray(index, dtype=np.uint64))
    k = np.arange(count, dtype=np.uint64)
    h = hash_u64(seed, stream, index[:, None], k[None, :])
    return (h >> np.uint64(11)).astype(np.float64) * (2.0**-53)


def unit_directions(seed: int, stream: int, index, retry=0) -> np.ndarray:
    """Deterministic pseudo-random unit vectors, one per index."""
    index = np.atleast_1d(np.asarray(index, dtype=np.uint64))
    r = np.asarray(retry, dtype=np.uint64)
    u1 = hash_u64(seed, stream, index, r, np.uint64(0))
    u2 = hash_u64(seed, stream, index, r, np.uint64(1))
    z = 2.0 * (u1 >> np.uint64(11)).astype(np.float64) * (2.0**-53) - 1.0
    phi = 2.0 * np.pi * (u2 >> np.uint64(11)).astype(np.float64) * (2.0**-53)
    s = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    return np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=-1)
