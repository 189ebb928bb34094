"""Bias-free CNN denoisers with deterministic reverse-diffusion sampling and
Jacobian spectral analysis, plus closed-form Gaussian oracles to verify the
estimation identities the whole pipeline rests on."""

__version__ = "0.1.0"
