"""Closed-form priors and the identities that tie denoising to them.

Gaussian and Gaussian-mixture priors expose noisy densities, scores, and
posterior means in closed form. On top of those sit three checks used
throughout the test suite: the posterior-mean / score identity
f*(y) = y + sigma^2 grad log p_sigma(y), Stein's unbiased risk estimate,
and the identity expressing the KL divergence between two priors as the
integral over noise levels of their optimal denoisers' mean squared
discrepancy.

Priors operate on flat vectors of length d; the denoiser wrappers at the
bottom adapt them to (n, c, h, w) image batches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import OracleError
from .rng import philox

_LOG_2PI = float(np.log(2.0 * np.pi))

# np.trapz was renamed; support both so the package tracks numpy releases
_trapezoid = getattr(np, "trapezoid", None) or np.trapz


def _logsumexp(a: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    out = m.squeeze(axis) + np.log(np.sum(np.exp(a - m), axis=axis))
    return out


@dataclass
class GaussianPrior:
    """N(mean, cov) stored through the eigendecomposition of cov.

    eigvecs holds eigenvectors in columns; eigvals may contain zeros, in
    which case the prior is degenerate along those directions and only
    noisy (sigma > 0) queries are well posed.
    """

    mean: np.ndarray
    eigvecs: np.ndarray
    eigvals: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.eigvecs = np.asarray(self.eigvecs, dtype=np.float64)
        self.eigvals = np.asarray(self.eigvals, dtype=np.float64)
        d = self.mean.shape[0]
        if self.mean.ndim != 1:
            raise OracleError("mean must be a flat vector")
        if self.eigvecs.shape != (d, d) or self.eigvals.shape != (d,):
            raise OracleError(
                f"eigendecomposition shapes {self.eigvecs.shape}, "
                f"{self.eigvals.shape} do not match dimension {d}")
        if np.any(self.eigvals < 0):
            raise OracleError("covariance eigenvalues must be >= 0")
        gram = self.eigvecs.T @ self.eigvecs
        if not np.allclose(gram, np.eye(d), atol=1e-8):
            raise OracleError("eigvecs must be orthonormal columns")

    @classmethod
    def from_cov(cls, mean, cov) -> "GaussianPrior":
        cov = np.asarray(cov, dtype=np.float64)
        if not np.allclose(cov, cov.T, atol=1e-10 * max(1.0, np.abs(cov).max())):
            raise OracleError("covariance must be symmetric")
        vals, vecs = np.linalg.eigh(cov)
        if vals.min() < -1e-10 * max(1.0, vals.max()):
            raise OracleError(f"covariance not PSD: min eigenvalue {vals.min()}")
        return cls(np.asarray(mean, dtype=np.float64), vecs,
                   np.clip(vals, 0.0, None))

    @property
    def d(self) -> int:
        return self.mean.shape[0]

    def cov(self) -> np.ndarray:
        return (self.eigvecs * self.eigvals) @ self.eigvecs.T

    def sample(self, n: int, seed: int) -> np.ndarray:
        z = philox(seed).standard_normal((n, self.d))
        return self.mean + (z * np.sqrt(self.eigvals)) @ self.eigvecs.T

    def _coords(self, y: np.ndarray) -> np.ndarray:
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        return (y - self.mean) @ self.eigvecs

    def noisy_log_density(self, y, sigma: float) -> np.ndarray:
        """log of the density of x + sigma*z, x from the prior."""
        var = self.eigvals + sigma ** 2
        if var.min() <= 0:
            raise OracleError("degenerate prior needs sigma > 0")
        c = self._coords(y)
        quad = np.sum(c * c / var, axis=1)
        return -0.5 * (self.d * _LOG_2PI + np.sum(np.log(var)) + quad)

    def noisy_score(self, y, sigma: float) -> np.ndarray:
        var = self.eigvals + sigma ** 2
        if var.min() <= 0:
            raise OracleError("degenerate prior needs sigma > 0")
        c = self._coords(y)
        return -(c / var) @ self.eigvecs.T

    def denoise(self, y, sigma: float) -> np.ndarray:
        """Posterior mean E[x | y] for y = x + sigma*z."""
        if sigma <= 0:
            raise OracleError("denoise needs sigma > 0")
        factor = self.eigvals / (self.eigvals + sigma ** 2)
        c = self._coords(y)
        return self.mean + (c * factor) @ self.eigvecs.T

    def posterior_cov(self, sigma: float) -> np.ndarray:
        if sigma <= 0:
            raise OracleError("posterior_cov needs sigma > 0")
        pv = self.eigvals * sigma ** 2 / (self.eigvals + sigma ** 2)
        return (self.eigvecs * pv) @ self.eigvecs.T

    def noisy_hessian(self, sigma: float) -> np.ndarray:
        """Hessian of log p_sigma; constant in y for a Gaussian."""
        var = self.eigvals + sigma ** 2
        if var.min() <= 0:
            raise OracleError("degenerate prior needs sigma > 0")
        return -(self.eigvecs / var) @ self.eigvecs.T

    def denoiser_jacobian(self, sigma: float) -> np.ndarray:
        """Jacobian of the posterior mean; equals posterior_cov / sigma^2."""
        factor = self.eigvals / (self.eigvals + sigma ** 2)
        return (self.eigvecs * factor) @ self.eigvecs.T

    def smoothed(self, sigma: float) -> "GaussianPrior":
        """The prior convolved with N(0, sigma^2 I)."""
        return GaussianPrior(self.mean, self.eigvecs,
                             self.eigvals + sigma ** 2)


@dataclass
class MixturePrior:
    """Finite mixture of GaussianPrior components."""

    weights: np.ndarray
    components: list

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if len(self.components) != self.weights.shape[0]:
            raise OracleError("one weight per component required")
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1.0) > 1e-8:
            raise OracleError("weights must be positive and sum to 1")
        self.weights = self.weights / self.weights.sum()
        dims = {c.d for c in self.components}
        if len(dims) != 1:
            raise OracleError(f"components disagree on dimension: {dims}")

    @property
    def d(self) -> int:
        return self.components[0].d

    def sample(self, n: int, seed: int) -> np.ndarray:
        gen = philox(seed)
        which = gen.choice(len(self.components), size=n, p=self.weights)
        z = gen.standard_normal((n, self.d))
        out = np.empty((n, self.d))
        for k, comp in enumerate(self.components):
            mask = which == k
            out[mask] = comp.mean + (
                z[mask] * np.sqrt(comp.eigvals)) @ comp.eigvecs.T
        return out

    def _component_log_densities(self, y, sigma: float) -> np.ndarray:
        cols = [comp.noisy_log_density(y, sigma) for comp in self.components]
        return np.stack(cols, axis=1) + np.log(self.weights)

    def noisy_log_density(self, y, sigma: float) -> np.ndarray:
        return _logsumexp(self._component_log_densities(y, sigma), axis=1)

    def responsibilities(self, y, sigma: float) -> np.ndarray:
        lp = self._component_log_densities(y, sigma)
        return np.exp(lp - _logsumexp(lp, axis=1)[:, None])

    def noisy_score(self, y, sigma: float) -> np.ndarray:
        r = self.responsibilities(y, sigma)
        out = np.zeros_like(np.atleast_2d(np.asarray(y, dtype=np.float64)))
        for k, comp in enumerate(self.components):
            out += r[:, k:k + 1] * comp.noisy_score(y, sigma)
        return out

    def denoise(self, y, sigma: float) -> np.ndarray:
        """Posterior mean: responsibility-weighted component posteriors."""
        r = self.responsibilities(y, sigma)
        out = np.zeros_like(np.atleast_2d(np.asarray(y, dtype=np.float64)))
        for k, comp in enumerate(self.components):
            out += r[:, k:k + 1] * comp.denoise(y, sigma)
        return out

    def posterior_cov(self, y: np.ndarray, sigma: float) -> np.ndarray:
        """Cov[x | y] at a single point, by the law of total variance."""
        y = np.asarray(y, dtype=np.float64).reshape(1, -1)
        r = self.responsibilities(y, sigma)[0]
        means = [comp.denoise(y, sigma)[0] for comp in self.components]
        mbar = sum(ri * mi for ri, mi in zip(r, means))
        out = -np.outer(mbar, mbar)
        for ri, mi, comp in zip(r, means, self.components):
            out += ri * (comp.posterior_cov(sigma) + np.outer(mi, mi))
        return out


def _fd_hessian_of_score(prior, y: np.ndarray, sigma: float,
                         step: float) -> np.ndarray:
    """Hessian of log p_sigma at one point from central differences of the
    (closed-form) score."""
    d = y.shape[0]
    hess = np.empty((d, d))
    for j in range(d):
        yp = y.copy()
        yp[j] += step
        ym = y.copy()
        ym[j] -= step
        hess[j] = (prior.noisy_score(yp[None], sigma)
                   - prior.noisy_score(ym[None], sigma))[0] / (2 * step)
    return 0.5 * (hess + hess.T)


def verify_miyasawa(prior, sigma: float, n: int = 200, seed: int = 0,
                    fd_step: float | None = None, cov_points: int = 20) -> dict:
    """Check both posterior-moment identities on sampled noisy points:

        E[x|y]   = y + sigma^2 grad log p_sigma(y)
        Cov[x|y] = sigma^2 (I + sigma^2 hess log p_sigma(y))

    For a GaussianPrior both sides are closed form and the residuals are at
    machine precision. Otherwise (or when fd_step is given) the score comes
    from central differences of the noisy log density and the Hessian from
    central differences of the score, making the two sides independent; the
    covariance identity is checked at the first ``cov_points`` points.
    """
    if sigma <= 0:
        raise OracleError("the score identity requires sigma > 0")
    x = prior.sample(n, seed)
    z = philox(seed + 1).standard_normal(x.shape)
    y = x + sigma * z
    d = prior.d
    eye = np.eye(d)
    analytic = fd_step is None and isinstance(prior, GaussianPrior)
    step = 1e-4 if fd_step is None else fd_step

    if analytic:
        mode = "analytic"
        score = prior.noisy_score(y, sigma)
        cov_rhs = sigma ** 2 * (eye + sigma ** 2 * prior.noisy_hessian(sigma))
        cov_resid = float(np.abs(prior.posterior_cov(sigma) - cov_rhs).max())
    else:
        mode = "fd"
        score = np.empty_like(y)
        for j in range(d):
            yp = y.copy()
            yp[:, j] += step
            ym = y.copy()
            ym[:, j] -= step
            score[:, j] = (prior.noisy_log_density(yp, sigma)
                           - prior.noisy_log_density(ym, sigma)) / (2 * step)
        cov_resid = 0.0
        for i in range(min(cov_points, n)):
            hess = _fd_hessian_of_score(prior, y[i], sigma, step)
            rhs = sigma ** 2 * (eye + sigma ** 2 * hess)
            if isinstance(prior, GaussianPrior):
                lhs = prior.posterior_cov(sigma)
            else:
                lhs = prior.posterior_cov(y[i], sigma)
            cov_resid = max(cov_resid, float(np.abs(lhs - rhs).max()))

    resid = np.abs(prior.denoise(y, sigma) - (y + sigma ** 2 * score))
    return {"mode": mode, "sigma": sigma, "n": n,
            "max_residual": float(resid.max()),
            "mean_residual": float(resid.mean()),
            "max_cov_residual": cov_resid}


def verify_sure(denoiser, clean_source, sigma: float, n: int = 2000,
                seed: int = 0, n_probes: int = 4,
                exact_divergence=None) -> dict:
    """Compare true squared error against Stein's unbiased risk estimate.

    clean_source is either an (n, c, h, w) stack or a callable
    ``(n, seed) -> stack`` drawing from the prior. One noise draw is made
    per image and SURE(y) = ||f(y)-y||^2 + 2 sigma^2 div f(y) - sigma^2 d
    is evaluated per sample. The divergence uses Hutchinson probes through
    denoiser.vjp unless exact_divergence (a constant or a callable of one
    image) is supplied. Returns the paired mean gap and its standard
    error; the gap is zero in expectation for any denoiser whatsoever.
    """
    if sigma <= 0:
        raise OracleError("verify_sure requires sigma > 0")
    if callable(clean_source):
        clean = np.asarray(clean_source(n, seed), dtype=np.float64)
    else:
        clean = np.asarray(clean_source, dtype=np.float64)
    n = clean.shape[0]
    d = int(np.prod(clean.shape[1:]))
    z = philox(seed).standard_normal(clean.shape)
    y = clean + sigma * z
    fy = denoiser(y)
    axes = tuple(range(1, clean.ndim))
    true_se = np.sum((fy - clean) ** 2, axis=axes)
    resid_se = np.sum((fy - y) ** 2, axis=axes)

    div = np.empty(n)
    if exact_divergence is None:
        # independent probes per sample: the estimator error then both
        # averages across the batch and is visible to the paired SE
        probes = philox(seed + 1).standard_normal(
            (n, n_probes) + clean.shape[1:])
        for i in range(n):
            yi = y[i:i + 1]
            acc = 0.0
            for j in range(n_probes):
                pj = probes[i, j:j + 1]
                acc += float(np.sum(pj * denoiser.vjp(yi, pj)))
            div[i] = acc / n_probes
    elif callable(exact_divergence):
        for i in range(n):
            div[i] = float(exact_divergence(y[i:i + 1]))
    else:
        div[:] = float(exact_divergence)

    sure = resid_se + 2.0 * sigma ** 2 * div - sigma ** 2 * d
    diff = true_se - sure
    se = float(np.std(diff, ddof=1) / np.sqrt(n)) if n > 1 else float("inf")
    return {"sigma": sigma, "n": n,
            "mean_true": float(true_se.mean()),
            "mean_sure": float(sure.mean()),
            "gap": float(diff.mean()),
            "paired_se": se}


def gaussian_kl(p1: GaussianPrior, p2: GaussianPrior) -> float:
    """Exact KL(p1 || p2); both covariances must be nonsingular."""
    if p1.eigvals.min() <= 0 or p2.eigvals.min() <= 0:
        raise OracleError("gaussian_kl requires nonsingular covariances")
    d = p1.d
    if p2.d != d:
        raise OracleError("priors live in different dimensions")
    s1 = p1.cov()
    s2 = p2.cov()
    m = p2.mean - p1.mean
    sol = np.linalg.solve(s2, s1)
    quad = float(m @ np.linalg.solve(s2, m))
    logdet = float(np.sum(np.log(p2.eigvals)) - np.sum(np.log(p1.eigvals)))
    return 0.5 * (float(np.trace(sol)) + quad - d + logdet)


def denoiser_gap_second_moment(p1: GaussianPrior, p2: GaussianPrior,
                               sigma: float) -> float:
    """E_{y ~ p1 * N(0, sigma^2 I)} ||f1*(y) - f2*(y)||^2 in closed form.

    Both optimal denoisers are affine, so the gap is B y + c with
    B = A1 - A2, and the expectation is a Gaussian quadratic form. Equals
    the excess risk mse_mismatched - mse_optimal (tower property).
    """
    a1 = p1.denoiser_jacobian(sigma)
    a2 = p2.denoiser_jacobian(sigma)
    b = a1 - a2
    c = (p1.mean - a1 @ p1.mean) - (p2.mean - a2 @ p2.mean)
    mean_term = b @ p1.mean + c
    cov_y = p1.cov() + sigma ** 2 * np.eye(p1.d)
    return float(mean_term @ mean_term + np.sum(b * (b @ cov_y)))


def mse_optimal(prior: GaussianPrior, sigma: float) -> float:
    """Risk of the matched optimal denoiser: trace of the posterior cov."""
    lam = prior.eigvals
    return float(np.sum(sigma ** 2 * lam / (lam + sigma ** 2)))


def mse_mismatched(p1: GaussianPrior, p2: GaussianPrior,
                   sigma: float) -> float:
    """Risk of p2's optimal denoiser applied to noisy draws from p1."""
    a2 = p2.denoiser_jacobian(sigma)
    b = a2 - np.eye(p1.d)
    shift = b @ (p1.mean - p2.mean)
    return float(np.sum(b * (b @ p1.cov())) + shift @ shift
                 + sigma ** 2 * np.sum(a2 * a2))


def kl_bound_check(p1: GaussianPrior, p2: GaussianPrior,
                   sigma_min: float = 1e-3, sigma_max: float = 1e3,
                   n_points: int = 200) -> dict:
    """Quadrature check of the denoising identity for the KL divergence:

        KL(p1||p2) = int_0^inf [mse(f2 on p1) - mse(f1 on p1)] sigma^-3 dsigma

    with both risks in closed form. The integral over [sigma_min, sigma_max]
    uses trapezoid on a log grid; below sigma_min the integrand vanishes
    linearly and its triangle area is added in closed form; above sigma_max
    the remaining mass is exactly the KL between the sigma_max-smoothed
    priors. Returns the exact KL alongside the reconstruction so callers
    can assert both the inequality and the near-equality.
    """
    sigmas = np.geomspace(sigma_min, sigma_max, n_points)
    excess = np.array([mse_mismatched(p1, p2, s) - mse_optimal(p1, s)
                       for s in sigmas])
    integrand = excess / sigmas ** 3
    integral = float(_trapezoid(integrand * sigmas, x=np.log(sigmas)))
    head = 0.5 * sigma_min * integrand[0]
    tail = gaussian_kl(p1.smoothed(sigma_max), p2.smoothed(sigma_max))
    kl = gaussian_kl(p1, p2)
    total = integral + head + tail
    return {"kl_exact": kl, "integral": integral, "head": head, "tail": tail,
            "total": total,
            "rel_gap": (total - kl) / kl if kl > 0 else 0.0}


def _check_image_shape(prior, image_shape) -> tuple:
    image_shape = tuple(int(s) for s in image_shape)
    if int(np.prod(image_shape)) != prior.d:
        raise OracleError(
            f"image shape {image_shape} has {int(np.prod(image_shape))} "
            f"pixels but the prior lives in dimension {prior.d}")
    return image_shape


class OptimalGaussianDenoiser:
    """Posterior-mean denoiser for a Gaussian prior at a fixed noise level.

    Callable on (n, c, h, w) batches; vjp applies the (symmetric) Jacobian
    to a cotangent image.
    """

    def __init__(self, prior: GaussianPrior, sigma: float, image_shape):
        if sigma <= 0:
            raise OracleError("OptimalGaussianDenoiser needs sigma > 0")
        self.prior = prior
        self.sigma = float(sigma)
        self.image_shape = _check_image_shape(prior, image_shape)

    def __call__(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        flat = y.reshape(y.shape[0], -1)
        out = self.prior.denoise(flat, self.sigma)
        return out.reshape(y.shape)

    def vjp(self, y: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
        # affine map: the Jacobian is constant and symmetric
        cot = np.asarray(cotangent, dtype=np.float64)
        flat = cot.reshape(cot.shape[0], -1)
        out = flat @ self.prior.denoiser_jacobian(self.sigma)
        return out.reshape(cot.shape)

    def jacobian(self) -> np.ndarray:
        return self.prior.denoiser_jacobian(self.sigma)


class ScheduledGaussianDenoiser:
    """Gaussian-optimal denoiser that follows the sampler's noise schedule.

    The sampler update x <- x + h (f(x) - x) is the exact probability-flow
    discretization under the geometric schedule sigma_t = sigma0 (1-h)^t,
    so the analytic stand-in for a blind network evaluates the sigma-aware
    optimal denoiser at that schedule. Each call advances the schedule one
    step; use one instance per chain (or call reset between chains). The
    floor keeps the level strictly positive once the schedule undershoots
    the sampler's own stopping threshold.
    """

    def __init__(self, prior: GaussianPrior, image_shape, h: float = 0.01,
                 sigma0: float = 1.0, sigma_floor: float = 1e-3):
        if not 0 < h < 1:
            raise OracleError("step size h must lie in (0, 1)")
        self.prior = prior
        self.image_shape = _check_image_shape(prior, image_shape)
        self.h = float(h)
        self.sigma0 = float(sigma0)
        self.sigma_floor = float(sigma_floor)
        self.sigma = self.sigma0

    def reset(self) -> None:
        self.sigma = self.sigma0

    def __call__(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        flat = y.reshape(y.shape[0], -1)
        out = self.prior.denoise(flat, max(self.sigma, self.sigma_floor))
        self.sigma *= 1.0 - self.h
        return out.reshape(y.shape)


class ManifoldProjectionDenoiser:
    """Affine projection onto the tangent plane at a manifold point.

    f(y) = base + P (y - base) with P the orthogonal projector onto the
    row span of the tangent stack; its Jacobian is P itself, so the vjp is
    another projection.
    """

    def __init__(self, base: np.ndarray, tangent: np.ndarray):
        self.base = np.asarray(base, dtype=np.float64)
        tan = np.asarray(tangent, dtype=np.float64)
        self.image_shape = self.base.shape[1:]
        self._v = tan.reshape(tan.shape[0], -1)
        gram = self._v @ self._v.T
        if not np.allclose(gram, np.eye(tan.shape[0]), atol=1e-8):
            raise OracleError("tangent stack must be orthonormal")

    def _project(self, flat: np.ndarray) -> np.ndarray:
        return (flat @ self._v.T) @ self._v

    def __call__(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        r = (y - self.base).reshape(y.shape[0], -1)
        return self.base + self._project(r).reshape(y.shape)

    def vjp(self, y: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
        cot = np.asarray(cotangent, dtype=np.float64)
        flat = cot.reshape(cot.shape[0], -1)
        return self._project(flat).reshape(cot.shape)
