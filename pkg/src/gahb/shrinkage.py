"""Fixed-basis shrinkage baselines: oracle factors, soft thresholding, and
M-term approximation error.

Signals are flat vectors or images; a basis is a (d, d) array whose rows are
the analysis directions, or None for the canonical basis (coefficients are
then the signal entries themselves, which keeps large sweeps cheap).
"""

from __future__ import annotations

import numpy as np

from .errors import AnalysisError, DimensionMismatch
from .rng import philox


def _flatten(v, d=None, name="signal"):
    flat = np.asarray(v, dtype=np.float64).reshape(-1)
    if d is not None and flat.shape[0] != d:
        raise DimensionMismatch("length", d, flat.shape[0], name)
    return flat


def check_basis(basis, d: int):
    """Validate a (d, d) orthonormal-row basis; None passes through.

    Small bases get the full Gram check; large ones a two-probe Parseval and
    reconstruction check, which costs O(d^2) instead of O(d^3).
    """
    if basis is None:
        return None
    basis = np.asarray(basis, dtype=np.float64)
    if basis.shape != (d, d):
        raise DimensionMismatch("basis", (d, d), basis.shape, "check_basis")
    if d <= 512:
        err = float(np.max(np.abs(basis @ basis.T - np.eye(d))))
    else:
        probes = philox(7).standard_normal((d, 2))
        err = float(np.max(np.abs(basis.T @ (basis @ probes) - probes)))
    if err > 1e-8:
        raise AnalysisError(f"basis rows are not orthonormal "
                            f"(deviation {err:.3g})")
    return basis


def _coefficients(flat, basis):
    return flat if basis is None else basis @ flat


def _synthesize(coeff, basis):
    return coeff if basis is None else basis.T @ coeff


def oracle_shrinkage_denoise(x, y, basis=None, sigma: float = 0.0):
    """Per-coefficient optimal shrinkage using the clean signal's energy.

    Factor on coefficient k is c_k^2 / (c_k^2 + sigma^2) with c_k the clean
    coefficient; applied to the noisy coefficients and synthesized back.
    Returns (estimate shaped like y, risk) where risk = sigma^2 * sum of
    factors is the expected squared error of this estimator.
    """
    if sigma < 0:
        raise AnalysisError(f"sigma must be >= 0, got {sigma}")
    y_arr = np.asarray(y, dtype=np.float64)
    d = y_arr.size
    xf = _flatten(x, d, "oracle_shrinkage_denoise")
    basis = check_basis(basis, d)
    cx = _coefficients(xf, basis)
    cy = _coefficients(y_arr.reshape(-1), basis)
    denom = cx * cx + sigma * sigma
    factors = np.divide(cx * cx, denom, out=np.zeros_like(cx),
                        where=denom > 0)
    xhat = _synthesize(factors * cy, basis).reshape(y_arr.shape)
    return xhat, float(sigma * sigma * np.sum(factors))


def universal_threshold(sigma: float, d: int) -> float:
    """sigma * sqrt(2 ln d), the threshold that kills pure noise whp."""
    if d < 2:
        raise AnalysisError(f"universal threshold needs d >= 2, got {d}")
    return float(sigma * np.sqrt(2.0 * np.log(d)))


def soft_threshold_denoise(y, basis=None, threshold: float | None = None,
                           sigma: float | None = None):
    """Soft thresholding of basis coefficients.

    Coefficients with |c| <= t are zeroed, the rest shrunk toward zero by t.
    threshold defaults to universal_threshold(sigma, d); pass one of the two.
    """
    y_arr = np.asarray(y, dtype=np.float64)
    d = y_arr.size
    if threshold is None:
        if sigma is None:
            raise AnalysisError("need a threshold or a sigma to derive one")
        threshold = universal_threshold(sigma, d)
    if threshold < 0:
        raise AnalysisError(f"threshold must be >= 0, got {threshold}")
    basis = check_basis(basis, d)
    c = _coefficients(y_arr.reshape(-1), basis)
    shrunk = np.sign(c) * np.maximum(np.abs(c) - threshold, 0.0)
    return _synthesize(shrunk, basis).reshape(y_arr.shape)


def m_term_error(x, basis=None, sigma: float = 0.0):
    """Keep the coefficients above sigma, drop the rest.

    Returns (M, tail, combined): M counts coefficients with |c_k| > sigma,
    tail is the squared error of dropping the others, combined adds the
    M sigma^2 price of estimating the kept ones from noise.
    """
    if sigma < 0:
        raise AnalysisError(f"sigma must be >= 0, got {sigma}")
    xf = _flatten(x)
    basis = check_basis(basis, xf.shape[0])
    c = _coefficients(xf, basis)
    keep = np.abs(c) > sigma
    m = int(np.count_nonzero(keep))
    tail = float(np.sum(c[~keep] ** 2))
    return m, tail, m * sigma * sigma + tail


def power_law_coefficients(d: int, alpha: float) -> np.ndarray:
    """c_k = k^{-(alpha + 1)/2} for k = 1..d.

    The squared coefficients then decay like k^{-(alpha+1)}, the rate whose
    best-M-term error balances at sigma^{2 alpha/(alpha+1)}.
    """
    if d < 1:
        raise AnalysisError(f"need d >= 1, got {d}")
    if alpha <= 0:
        raise AnalysisError(f"alpha must be > 0, got {alpha}")
    k = np.arange(1, d + 1, dtype=np.float64)
    return k ** (-(alpha + 1.0) / 2.0)


class OracleShrinkageDenoiser:
    """psnr_curve-compatible wrapper around oracle_shrinkage_denoise.

    Opts into clean-image and noise-level side information, shrinking each
    image of the batch toward its own clean coefficients.
    """

    needs_truth = True
    needs_sigma = True

    def __init__(self, basis=None):
        self.basis = basis

    def __call__(self, y, x, sigma):
        y = np.asarray(y, dtype=np.float64)
        out = np.empty_like(y)
        for i in range(y.shape[0]):
            out[i], _ = oracle_shrinkage_denoise(x[i], y[i], self.basis, sigma)
        return out


def soft_threshold_risk(coeffs, sigma: float, threshold: float,
                        n_quad: int = 120) -> float:
    """Expected squared error of soft thresholding at noise level sigma.

    Gauss-Hermite quadrature of E[(eta_t(c + sigma z) - c)^2] per
    coefficient, summed. Deterministic, no sampling error.
    """
    if sigma < 0 or threshold < 0:
        raise AnalysisError("sigma and threshold must be >= 0")
    c = _flatten(coeffs)
    nodes, weights = np.polynomial.hermite.hermgauss(n_quad)
    z = np.sqrt(2.0) * nodes
    w = weights / np.sqrt(np.pi)
    u = c[:, None] + sigma * z[None, :]
    eta = np.sign(u) * np.maximum(np.abs(u) - threshold, 0.0)
    per_coeff = np.sum(w[None, :] * (eta - c[:, None]) ** 2, axis=1)
    return float(np.sum(per_coeff))
