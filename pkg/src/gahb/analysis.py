"""Denoiser introspection: Jacobian spectra, PSNR sweeps, similarity reports.

A denoiser here is any callable on (n, c, h, w) arrays that also exposes
vjp(y, cotangent) for the pullback at y. Jacobians are assembled one row per
vjp call, symmetrized for eigenanalysis, and the asymmetry discarded by the
symmetrization is always reported rather than hidden.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import AnalysisError, DimensionMismatch
from .rng import philox

# dense eigendecomposition stays tractable up to this side length
DENSE_LIMIT = 4096


def thread_count() -> int:
    """Worker cap: GAHB_THREADS when set to a positive int, else cpu_count."""
    try:
        n = int(os.environ.get("GAHB_THREADS", ""))
    except ValueError:
        n = 0
    return n if n > 0 else (os.cpu_count() or 1)


# ---------------------------------------------------------------------------
# Jacobian assembly


def _single_image(y, context):
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 4 or y.shape[0] != 1:
        raise DimensionMismatch("batch", "(1, c, h, w)", y.shape, context)
    return y


def jacobian(denoiser, y: np.ndarray, n_threads: int | None = None) -> np.ndarray:
    """Dense d x d Jacobian of the denoiser at one image, one vjp per row.

    Row i is the pullback of the i-th one-hot cotangent, i.e. e_i^T J. Rows
    are filled in parallel over disjoint index blocks; the result does not
    depend on the worker count.
    """
    y = _single_image(y, "jacobian")
    d = int(np.prod(y.shape[1:]))
    if d > DENSE_LIMIT:
        raise AnalysisError(
            f"dense Jacobian assembly supports d <= {DENSE_LIMIT}, got {d}; "
            "use topk_spectrum for a matrix-free top-k estimate")
    out = np.empty((d, d))

    def fill(rows):
        cot = np.zeros_like(y)
        flat = cot.reshape(-1)
        for i in rows:
            flat[i] = 1.0
            out[i] = denoiser.vjp(y, cot).reshape(-1)
            flat[i] = 0.0

    workers = min(n_threads or thread_count(), d)
    if workers <= 1:
        fill(range(d))
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(fill, [range(j, d, workers) for j in range(workers)]))
    return out


# ---------------------------------------------------------------------------
# spectra


@dataclass
class JacobianSpectrum:
    """Eigen-decomposition of the symmetrized Jacobian at one input.

    eigenvalues are sorted descending; column k of eigenvectors pairs with
    eigenvalues[k]. coeff_clean and coeff_noisy are the projections of the
    clean and noisy image onto each eigenvector. asymmetry is
    ||J - J^T||_F / ||J||_F of the raw Jacobian, and recon_error is the
    relative error of reconstructing f(y) as sum_k lambda_k <y, e_k> e_k.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    coeff_clean: np.ndarray
    coeff_noisy: np.ndarray
    asymmetry: float
    recon_error: float
    image_shape: tuple

    def __post_init__(self):
        d = self.eigenvalues.shape[0]
        if self.eigenvectors.shape != (d, d):
            raise DimensionMismatch("eigenvectors", (d, d),
                                    self.eigenvectors.shape, "JacobianSpectrum")
        if np.any(np.diff(self.eigenvalues) > 1e-12):
            raise AnalysisError("eigenvalues must be sorted descending")
        # completeness probe; for a square set this implies orthonormality
        v = philox(0).standard_normal(d)
        w = self.eigenvectors @ (self.eigenvectors.T @ v)
        if np.linalg.norm(w - v) > 1e-8 * np.linalg.norm(v):
            raise AnalysisError("eigenvectors are not orthonormal")

    @property
    def d(self) -> int:
        return self.eigenvalues.shape[0]

    def eigenimage(self, k: int) -> np.ndarray:
        return self.eigenvectors[:, k].reshape(self.image_shape)


def spectrum(J: np.ndarray, x: np.ndarray, y: np.ndarray,
             f_y: np.ndarray | None = None) -> JacobianSpectrum:
    """Symmetrize, eigendecompose, and project the clean/noisy pair onto the
    eigenbasis.

    f_y defaults to J y, which is exact for the piecewise-linear denoisers
    built here; pass the actual denoiser output instead to fold Jacobian
    assembly error into recon_error as well.
    """
    J = np.asarray(J, dtype=np.float64)
    if J.ndim != 2 or J.shape[0] != J.shape[1]:
        raise DimensionMismatch("matrix", "square", J.shape, "spectrum")
    d = J.shape[0]
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xf, yf = x.reshape(-1), y.reshape(-1)
    if xf.shape[0] != d or yf.shape[0] != d:
        raise DimensionMismatch("pixels", d, (xf.shape[0], yf.shape[0]),
                                "spectrum")
    image_shape = y.shape[1:] if (y.ndim == 4 and y.shape[0] == 1) else y.shape

    frob = np.linalg.norm(J)
    asymmetry = float(np.linalg.norm(J - J.T) / frob) if frob > 0 else 0.0
    lam, vecs = np.linalg.eigh(0.5 * (J + J.T))
    order = np.argsort(lam)[::-1]
    lam, vecs = lam[order], vecs[:, order]

    target = J @ yf if f_y is None else np.asarray(f_y, np.float64).reshape(-1)
    recon = vecs @ (lam * (vecs.T @ yf))
    tn = np.linalg.norm(target)
    recon_error = float(np.linalg.norm(target - recon) / tn) if tn > 0 else 0.0
    return JacobianSpectrum(lam, vecs, vecs.T @ xf, vecs.T @ yf,
                            asymmetry, recon_error, tuple(image_shape))


def _eigvals(spec) -> np.ndarray:
    if isinstance(spec, JacobianSpectrum):
        return spec.eigenvalues
    return np.asarray(spec, dtype=np.float64)


def effective_rank(spec, threshold: float = 0.1) -> int:
    """Number of eigenvalues at or above the absolute threshold."""
    return int(np.count_nonzero(_eigvals(spec) >= threshold))


def trace(spec) -> float:
    """Sum of eigenvalues; sigma^2 times this is the local MSE proxy."""
    return float(np.sum(_eigvals(spec)))


def topk_spectrum(denoiser, y: np.ndarray, k: int = 64, n_iters: int = 300,
                  tol: float = 1e-10, seed: int = 0,
                  fd_step: float | None = None):
    """Leading eigenpairs of the symmetrized Jacobian without forming it.

    Power iteration with deflation against previously found vectors. J^T v
    comes from vjp; J v from a central difference along v, which is exact
    inside a linear region of a piecewise-linear net. Returns (eigenvalues,
    eigenvectors as columns) ordered by decreasing |eigenvalue|.
    """
    y = _single_image(y, "topk_spectrum")
    d = int(np.prod(y.shape[1:]))
    k = min(k, d)
    if fd_step is None:
        fd_step = 1e-3 * max(float(np.linalg.norm(y)) / np.sqrt(d), 1.0)

    def sym_matvec(v):
        direction = (fd_step * v).reshape(y.shape)
        jv = (denoiser(y + direction) - denoiser(y - direction)).reshape(-1)
        jv /= 2.0 * fd_step
        jtv = denoiser.vjp(y, v.reshape(y.shape)).reshape(-1)
        return 0.5 * (jv + jtv)

    gen = philox(seed)
    lams = np.empty(k)
    vecs = np.empty((d, k))
    for j in range(k):
        found = vecs[:, :j]
        v = gen.standard_normal(d)
        v -= found @ (found.T @ v)
        v /= np.linalg.norm(v)
        for _ in range(n_iters):
            w = sym_matvec(v)
            w -= found @ (found.T @ w)
            nw = np.linalg.norm(w)
            if nw == 0.0:
                break  # v sits in the kernel; keep it with eigenvalue 0
            w /= nw
            if np.dot(w, v) < 0:
                w = -w  # align signs so the step test sees convergence
            step = np.linalg.norm(w - v)
            v = w
            if step < tol:
                break
        lams[j] = float(np.dot(v, sym_matvec(v)))
        vecs[:, j] = v
    order = np.argsort(-np.abs(lams), kind="stable")
    return lams[order], vecs[:, order]


# ---------------------------------------------------------------------------
# PSNR curves


@dataclass
class PSNRCurve:
    """(input PSNR, output PSNR) points, sorted by input PSNR ascending."""

    sigmas: np.ndarray
    in_db: np.ndarray
    out_db: np.ndarray
    mse: np.ndarray

    def __post_init__(self):
        n = self.in_db.shape[0]
        for name in ("sigmas", "out_db", "mse"):
            arr = getattr(self, name)
            if arr.shape != (n,):
                raise DimensionMismatch(name, (n,), arr.shape, "PSNRCurve")
        order = np.argsort(self.in_db, kind="stable")
        self.sigmas = self.sigmas[order]
        self.in_db = self.in_db[order]
        self.out_db = self.out_db[order]
        self.mse = self.mse[order]


def evaluate_denoiser(denoiser, y, x, sigma):
    """Call a denoiser, passing side information only if it opts in.

    Reference denoisers that need the clean image or the noise level set
    needs_truth / needs_sigma attributes; plain denoisers stay blind.
    """
    kwargs = {}
    if getattr(denoiser, "needs_truth", False):
        kwargs["x"] = x
    if getattr(denoiser, "needs_sigma", False):
        kwargs["sigma"] = sigma
    return denoiser(y, **kwargs) if kwargs else denoiser(y)


def psnr_curve(denoiser, test_images, sigma_grid, seed: int = 0) -> PSNRCurve:
    """Output PSNR against input PSNR over a grid of noise levels.

    Per sigma: corrupt every test image with fresh seeded noise, denoise,
    average the per-pixel squared error across the whole set, then convert
    to dB. Peak is 1.0, so input PSNR is -20 log10 sigma. Noise draws are
    rescaled so their realized per-pixel power is exactly sigma^2, which
    makes the nominal input PSNR exact (the identity denoiser then lands on
    the diagonal to floating-point rounding).
    """
    x = np.asarray(test_images, dtype=np.float64)
    if x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4 or x.shape[0] == 0:
        raise AnalysisError(
            f"test set must be a nonempty (n, c, h, w) stack, got shape "
            f"{np.asarray(test_images).shape}")
    sigmas = np.asarray(sigma_grid, dtype=np.float64).reshape(-1)
    if sigmas.size == 0:
        raise AnalysisError("sigma grid is empty")
    if np.any(~(sigmas > 0)):
        raise AnalysisError("sigma grid must be strictly positive")

    gen = philox(seed)
    mse = np.empty(sigmas.size)
    for i, s in enumerate(sigmas):
        z = gen.standard_normal(x.shape)
        z *= np.sqrt(z.size / np.sum(z * z))
        y = x + s * z
        xhat = evaluate_denoiser(denoiser, y, x, float(s))
        mse[i] = float(np.mean((np.asarray(xhat) - x) ** 2))
    with np.errstate(divide="ignore"):
        out_db = 10.0 * np.log10(1.0 / mse)
    in_db = -20.0 * np.log10(sigmas)
    return PSNRCurve(sigmas.copy(), in_db, out_db, mse)


def fit_slope(curve, window=(20.0, 40.0)):
    """Least-squares line out_db = slope * in_db + intercept inside the
    window (input-PSNR dB). Returns (slope, intercept, rms_residual)."""
    if isinstance(curve, PSNRCurve):
        in_db, out_db = curve.in_db, curve.out_db
    else:
        in_db, out_db = (np.asarray(a, dtype=np.float64) for a in curve)
    lo, hi = window
    mask = (in_db >= lo) & (in_db <= hi)
    m = int(np.count_nonzero(mask))
    if m < 2:
        raise AnalysisError(
            f"slope window [{lo}, {hi}] dB contains {m} points, need >= 2")
    a = np.stack([in_db[mask], np.ones(m)], axis=1)
    coef, *_ = np.linalg.lstsq(a, out_db[mask], rcond=None)
    resid = out_db[mask] - a @ coef
    return float(coef[0]), float(coef[1]), float(np.sqrt(np.mean(resid ** 2)))


# ---------------------------------------------------------------------------
# similarity


@dataclass
class SimilarityReport:
    """Cosine-similarity summary of two image sets.

    paired holds aligned-pair cosines when the sets have equal size (None
    otherwise); nn_ab / nn_ba hold each image's best match against the other
    set. Histogram counts share bin_edges (width 0.02 on [-1, 1]).
    """

    paired: np.ndarray | None
    nn_ab: np.ndarray
    nn_ba: np.ndarray
    bin_edges: np.ndarray
    count_pairs: np.ndarray
    count_nn: np.ndarray


def _unit_rows(images, name):
    flat = np.asarray(images, dtype=np.float64)
    if flat.shape[0] == 0:
        raise AnalysisError(f"{name} is empty")
    flat = flat.reshape(flat.shape[0], -1)
    norms = np.linalg.norm(flat, axis=1, keepdims=True)
    # all-zero images have no direction; they score 0 against everything
    return flat / np.where(norms > 0, norms, 1.0)


def similarity_report(set_a, set_b) -> SimilarityReport:
    a = _unit_rows(set_a, "set_a")
    b = _unit_rows(set_b, "set_b")
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatch("pixels", a.shape[1], b.shape[1],
                                "similarity_report")
    # rounding can push unit-vector dots a hair past 1; keep them in range
    gram = np.clip(a @ b.T, -1.0, 1.0)
    if a.shape[0] == b.shape[0]:
        paired = np.clip(np.sum(a * b, axis=1), -1.0, 1.0)
    else:
        paired = None
    nn_ab = gram.max(axis=1)
    nn_ba = gram.max(axis=0)
    edges = np.linspace(-1.0, 1.0, 101)
    if paired is None:
        count_pairs = np.zeros(100, dtype=np.int64)
    else:
        count_pairs, _ = np.histogram(paired, bins=edges)
    count_nn, _ = np.histogram(np.concatenate([nn_ab, nn_ba]), bins=edges)
    return SimilarityReport(paired, nn_ab, nn_ba, edges, count_pairs, count_nn)


def principal_angles(span_a: np.ndarray, span_b: np.ndarray) -> np.ndarray:
    """Principal angles (degrees, ascending) between the row spans."""
    out = []
    for span in (span_a, span_b):
        mat = np.asarray(span, dtype=np.float64)
        mat = mat.reshape(mat.shape[0], -1).T
        u, s, _ = np.linalg.svd(mat, full_matrices=False)
        rank = int(np.count_nonzero(s > 1e-10 * s[0])) if s.size else 0
        if rank == 0:
            raise AnalysisError("principal_angles needs nonzero spans")
        out.append(u[:, :rank])
    ua, ub = out
    if ua.shape[0] != ub.shape[0]:
        raise DimensionMismatch("pixels", ua.shape[0], ub.shape[0],
                                "principal_angles")
    cosines = np.linalg.svd(ua.T @ ub, compute_uv=False)
    return np.degrees(np.arccos(np.clip(cosines, -1.0, 1.0)))


# ---------------------------------------------------------------------------
# reports


def write_spectrum_csv(path, spec: JacobianSpectrum) -> None:
    with open(path, "w") as f:
        f.write("k,lambda,coeff_clean_abs,coeff_noisy_abs\n")
        for k in range(spec.d):
            f.write(f"{k},{spec.eigenvalues[k]:.8e},"
                    f"{abs(spec.coeff_clean[k]):.8e},"
                    f"{abs(spec.coeff_noisy[k]):.8e}\n")


def write_psnr_csv(path, curve: PSNRCurve) -> None:
    with open(path, "w") as f:
        f.write("sigma,in_db,out_db\n")
        for s, i, o in zip(curve.sigmas, curve.in_db, curve.out_db):
            f.write(f"{s:.8e},{i:.8e},{o:.8e}\n")


def write_similarity_csv(path, report: SimilarityReport) -> None:
    with open(path, "w") as f:
        f.write("bin_lo,bin_hi,count_pairs,count_nn\n")
        for i in range(report.count_nn.shape[0]):
            f.write(f"{report.bin_edges[i]:.2f},{report.bin_edges[i + 1]:.2f},"
                    f"{report.count_pairs[i]},{report.count_nn[i]}\n")


def vector_mosaic(vectors: np.ndarray, image_shape, n_top: int = 16,
                  cols: int = 4, pad: int = 1) -> np.ndarray:
    """Leading basis vectors (columns) tiled into one [0, 1] image.

    Each tile is rescaled independently (an eigenvector's sign and scale are
    arbitrary); padding pixels sit at mid-gray.
    """
    n_top = min(n_top, vectors.shape[1])
    if n_top < 1 or cols < 1:
        raise AnalysisError("mosaic needs at least one tile and one column")
    h, w = image_shape[-2], image_shape[-1]
    cols = min(cols, n_top)
    rows = -(-n_top // cols)
    canvas = np.full((rows * (h + pad) + pad, cols * (w + pad) + pad), 0.5)
    for k in range(n_top):
        tile = vectors[:, k].reshape(-1, h, w)[0]
        lo, hi = float(tile.min()), float(tile.max())
        tile = (tile - lo) / (hi - lo) if hi > lo else np.full_like(tile, 0.5)
        r, c = divmod(k, cols)
        top, left = pad + r * (h + pad), pad + c * (w + pad)
        canvas[top:top + h, left:left + w] = tile
    return canvas


def eigvec_mosaic(spec: JacobianSpectrum, n_top: int = 16, cols: int = 4,
                  pad: int = 1) -> np.ndarray:
    return vector_mosaic(spec.eigenvectors, spec.image_shape, n_top, cols, pad)
