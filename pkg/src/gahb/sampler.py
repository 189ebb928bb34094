"""Deterministic coarse-to-fine sampling by iterated denoising.

Starting from pure noise at level sigma0, each iteration takes a small step
along the denoiser residual s_t = f(x) - x, whose magnitude doubles as the
running noise-level estimate: sigma_t^2 = ||s_t||^2 / d. Iteration stops once
sigma_t falls below sigma_inf. The denoiser is blind: it receives only the
current iterate, never a noise level.

Chains are processed strictly one at a time, so batched entry points are
bit-identical to looping sample() manually.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SamplerError
from .rng import normal_field


@dataclass
class SamplerConfig:
    h: float = 0.01
    sigma0: float = 1.0
    sigma_inf: float = 0.01
    max_iters: int = 10000

    def to_dict(self) -> dict:
        return {"h": self.h, "sigma0": self.sigma0,
                "sigma_inf": self.sigma_inf, "max_iters": self.max_iters}


@dataclass
class SampleResult:
    x: np.ndarray
    sigma_trace: np.ndarray
    iterations: int
    hit_max_iters: bool


def init_noise(shape, seed: int, sigma0: float) -> np.ndarray:
    """Deterministic N(0, sigma0^2 I) start, shape (1, c, h, w)."""
    return sigma0 * normal_field(shape, seed)


def sample(denoiser, config: SamplerConfig | None = None,
           x0: np.ndarray | None = None, shape=None,
           seed: int | None = None) -> SampleResult:
    """Run one chain. Either pass ``x0`` explicitly or (shape, seed)."""
    cfg = config or SamplerConfig()
    if x0 is None:
        if shape is None or seed is None:
            raise SamplerError("sample needs x0 or both shape and seed")
        x0 = init_noise(shape, seed, cfg.sigma0)
    x = np.array(x0, copy=True)
    trace = []
    hit_max = False

    if cfg.sigma0 < cfg.sigma_inf:
        return SampleResult(x, np.zeros(0), 0, False)

    iterations = 0
    while True:
        if iterations >= cfg.max_iters:
            hit_max = True
            break
        s = denoiser(x) - x
        sigma_t = float(np.sqrt(np.mean(np.square(s))))
        if not np.isfinite(sigma_t):
            raise SamplerError(
                f"non-finite residual at iteration {iterations + 1}")
        x = x + cfg.h * s
        trace.append(sigma_t)
        iterations += 1
        if sigma_t < cfg.sigma_inf:
            break

    if not np.all(np.isfinite(x)):
        raise SamplerError(f"non-finite iterate after {iterations} iterations")
    return SampleResult(x, np.asarray(trace), iterations, hit_max)


def sample_batch(denoiser, config: SamplerConfig | None, x0_batch: np.ndarray
                 ) -> list[SampleResult]:
    """Independent chains from a stacked (n, c, h, w) start; results are
    bit-identical to calling sample() per element."""
    return [sample(denoiser, config, x0=x0_batch[i:i + 1])
            for i in range(x0_batch.shape[0])]


def paired_sample(denoiser_a, denoiser_b, config: SamplerConfig | None,
                  shape, n_seeds: int, seed0: int = 0):
    """Run both denoisers from identical noise initializations.

    Returns (outputs_a, outputs_b, seeds) with aligned first axes; n_seeds
    of 0 yields empty stacks.
    """
    cfg = config or SamplerConfig()
    seeds = [seed0 + i for i in range(n_seeds)]
    outs_a, outs_b = [], []
    for s in seeds:
        x0 = init_noise(shape, s, cfg.sigma0)
        outs_a.append(sample(denoiser_a, cfg, x0=x0.copy()).x)
        outs_b.append(sample(denoiser_b, cfg, x0=x0.copy()).x)
    empty = np.zeros((0,) + tuple(shape[1:]))
    a = np.concatenate(outs_a) if outs_a else empty
    b = np.concatenate(outs_b) if outs_b else empty
    return a, b, np.asarray(seeds)


def write_sigma_trace_csv(path, trace: np.ndarray) -> None:
    with open(path, "w") as f:
        f.write("iter,sigma_t\n")
        for i, s in enumerate(trace, start=1):
            f.write(f"{i},{s:.8e}\n")
