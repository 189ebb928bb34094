"""Deterministic random fields from a counter-based generator.

Noise that is part of a reproducibility contract (dataset corruption, sampler
initialization) comes from Philox, a counter-based bit generator, so the same
seed yields the same field regardless of how work is split up. Gaussian draws
use an explicit Box-Muller transform on Philox uniforms.
"""

from __future__ import annotations

import numpy as np


def philox(seed: int) -> np.random.Generator:
    """Philox-backed Generator keyed by ``seed``."""
    return np.random.Generator(np.random.Philox(seed))


def normal_field(shape, seed: int, dtype=np.float64) -> np.ndarray:
    """Standard-normal array of ``shape`` via Box-Muller on Philox uniforms.

    Bit-reproducible for a given (shape, seed, dtype).
    """
    gen = philox(seed)
    n = int(np.prod(shape)) if len(tuple(np.atleast_1d(shape))) else 1
    n = max(n, 1)
    m = (n + 1) // 2
    u1 = gen.random(m)
    u2 = gen.random(m)
    # log1p(-u1) keeps the argument strictly negative even when u1 == 0
    r = np.sqrt(-2.0 * np.log1p(-u1))
    theta = 2.0 * np.pi * u2
    z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
    return z.reshape(shape).astype(dtype, copy=False)
