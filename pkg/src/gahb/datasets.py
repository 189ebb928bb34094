"""Synthetic image families with known geometric structure.

Four generators, each tailored to probe a different property of a denoiser:

* ``calpha``: two fractal background fields split by a fractal contour, with
  independently controlled boundary and texture regularity exponents.
* ``disks``: anti-aliased disks, a curved 5-parameter image manifold with an
  analytically computable tangent space.
* ``sine_cone``: gratings ``0.5 + a*sin(2*pi*u/w + phase)``, a flat (conic)
  2-parameter family used as the easy baseline.
* ``single_image_ray``: positive rescalings of one base image, the 1-dim
  degenerate case.

All draws come from counter-based Philox streams (one stream per sample,
derived by jumps from the dataset seed) so generation is bit-reproducible and
order-independent. Pixel values always land in [0, 1]; additive noise applied
afterwards is never clipped.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DatasetError, DimensionMismatch
from .rng import normal_field

MAX_ALPHA = 16.0


@dataclass
class DatasetSpec:
    kind: str
    count: int
    image_size: tuple[int, int]
    seed: int
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.image_size = tuple(self.image_size)
        if self.kind not in ("calpha", "disks", "sine_cone", "single_image_ray",
                            "shuffled", "image_dir"):
            raise DatasetError(f"unknown dataset kind {self.kind!r}")
        if self.count < 1:
            raise DatasetError(f"count must be >= 1, got {self.count}")
        if len(self.image_size) != 2 or min(self.image_size) < 8:
            raise DatasetError(
                f"image_size must be at least 8x8, got {self.image_size}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "count": self.count,
                "image_size": list(self.image_size), "seed": self.seed,
                "params": self.params}


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent Philox stream for sample ``index`` of a dataset."""
    return np.random.Generator(np.random.Philox(seed).jumped(index))


# ---------------------------------------------------------------------------
# calpha


def _check_alpha(alpha: float, name: str) -> float:
    alpha = float(alpha)
    if not (0.0 < alpha <= MAX_ALPHA):
        raise DatasetError(f"{name} must lie in (0, {MAX_ALPHA}], got {alpha}")
    return alpha


def _spectral_integrate_1d(noise: np.ndarray, alpha: float) -> np.ndarray:
    """Filter white noise by |omega|^(-alpha) in Fourier, zeroing DC."""
    n = noise.shape[0]
    freq = np.abs(np.fft.fftfreq(n) * n)
    gain = np.zeros(n)
    nz = freq > 0
    gain[nz] = freq[nz] ** (-alpha)
    return np.real(np.fft.ifft(np.fft.fft(noise) * gain))


def _spectral_integrate_2d(noise: np.ndarray, alpha: float) -> np.ndarray:
    """Filter white noise by (w1^2 + w2^2)^(-alpha/2) in Fourier, zeroing DC."""
    h, w = noise.shape
    fy = np.fft.fftfreq(h) * h
    fx = np.fft.fftfreq(w) * w
    r2 = fy[:, None] ** 2 + fx[None, :] ** 2
    gain = np.zeros((h, w))
    nz = r2 > 0
    gain[nz] = r2[nz] ** (-alpha / 2.0)
    return np.real(np.fft.ifft2(np.fft.fft2(noise) * gain))


def _rescale(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    xmin, xmax = float(np.min(x)), float(np.max(x))
    if xmax - xmin < 1e-300:
        return np.full_like(x, 0.5 * (lo + hi))
    return lo + (x - xmin) * ((hi - lo) / (xmax - xmin))


def calpha_fields(image_size, alpha_contour: float, alpha_texture: float,
                  seed: int) -> dict:
    """Generate one sample and return all intermediate fields.

    Steps: draw iid uniform 1D noise and integrate it spectrally to get the
    contour; rescale the contour into the central half of the frame; draw two
    iid uniform 2D fields and integrate them spectrally to get the background
    textures; mask rows below/above the contour; combine; rescale to [0, 1].
    """
    h, w = image_size
    a1 = _check_alpha(alpha_contour, "alpha_contour")
    a2 = _check_alpha(alpha_texture, "alpha_texture")
    gen = _sample_rng(seed, 0)

    contour_noise = gen.uniform(-0.5, 0.5, w)
    contour = _spectral_integrate_1d(contour_noise, a1)
    contour = _rescale(contour, h / 4.0, 3.0 * h / 4.0)

    field_a = _spectral_integrate_2d(gen.uniform(-0.5, 0.5, (h, w)), a2)
    field_b = _spectral_integrate_2d(gen.uniform(-0.5, 0.5, (h, w)), a2)

    rows = np.arange(h, dtype=np.float64)[:, None]
    mask = (rows > contour[None, :]).astype(np.float64)
    combined = mask * field_a + (1.0 - mask) * field_b
    image = _rescale(combined, 0.0, 1.0)
    return {"contour": contour, "field_a": field_a, "field_b": field_b,
            "mask": mask, "image": image}


def synth_calpha(image_size, alpha_contour: float, alpha_texture: float,
                 seed: int) -> np.ndarray:
    return calpha_fields(image_size, alpha_contour, alpha_texture, seed)["image"]


# ---------------------------------------------------------------------------
# disks


def render_disk(image_size, cx: float, cy: float, radius: float,
                fg: float, bg: float) -> np.ndarray:
    """Anti-aliased disk: coverage = clip(0.5 + radius - dist, 0, 1).

    The edge profile is linear over one pixel, so pixel values are piecewise
    smooth in (cx, cy, radius, fg, bg). The disk (including its soft edge)
    must lie fully inside the frame.
    """
    h, w = image_size
    if radius < 0:
        raise DatasetError(f"radius must be >= 0, got {radius}")
    if cx < radius or cx > w - 1 - radius or cy < radius or cy > h - 1 - radius:
        raise DatasetError(
            f"disk (cx={cx}, cy={cy}, r={radius}) is not fully inside "
            f"a {h}x{w} frame")
    yy = np.arange(h, dtype=np.float64)[:, None]
    xx = np.arange(w, dtype=np.float64)[None, :]
    dist = np.hypot(xx - cx, yy - cy)
    coverage = np.clip(0.5 + radius - dist, 0.0, 1.0)
    # fg*c + bg*(1-c) rather than bg + (fg-bg)*c: fully covered or fully
    # exterior pixels then hit fg/bg bit-exactly
    return fg * coverage + bg * (1.0 - coverage)


def draw_disk_params(image_size, gen: np.random.Generator,
                     radius_frac=(0.1, 0.35), min_contrast: float = 0.2) -> dict:
    """One uniform parameter draw with rejection on the contrast constraint."""
    h, w = image_size
    m = min(h, w)
    radius = gen.uniform(radius_frac[0] * m, radius_frac[1] * m)
    cx = gen.uniform(radius, w - 1 - radius)
    cy = gen.uniform(radius, h - 1 - radius)
    while True:
        fg, bg = gen.uniform(0.0, 1.0), gen.uniform(0.0, 1.0)
        if abs(fg - bg) >= min_contrast:
            break
    return {"cx": cx, "cy": cy, "radius": radius, "fg": fg, "bg": bg}


def disk_tangent_basis(image_size, cx, cy, radius, fg, bg,
                       step: float = 1e-3) -> np.ndarray:
    """Orthonormal basis of the 5-dim tangent space at a disk.

    Central differences in each parameter, orthonormalized by QR. Returns
    shape (5, 1, h, w). Raises on rank-deficient configurations (radius 0,
    fg == bg) where some derivative directions vanish.
    """
    h, w = image_size
    if radius <= step:
        raise DatasetError(
            f"disk tangent basis is rank deficient: radius {radius} leaves no "
            "two-sided neighborhood for the radius direction")
    params = [cx, cy, radius, fg, bg]
    cols = []
    for i in range(5):
        hi = list(params)
        lo = list(params)
        hi[i] += step
        lo[i] -= step
        diff = (render_disk(image_size, *hi) - render_disk(image_size, *lo)) / (2 * step)
        cols.append(diff.ravel())
    mat = np.stack(cols, axis=1)  # (d, 5)
    sv = np.linalg.svd(mat, compute_uv=False)
    if sv[-1] < 1e-6 * sv[0]:
        raise DatasetError(
            "disk tangent basis is rank deficient (degenerate parameters, "
            f"singular values {sv})")
    q, r = np.linalg.qr(mat)
    # fix QR sign convention so the basis is deterministic
    q = q * np.sign(np.diag(r))[None, :]
    return q.T.reshape(5, 1, h, w)


# ---------------------------------------------------------------------------
# sine cone


def render_sine(image_size, phase: float, amplitude: float) -> np.ndarray:
    """Horizontal grating 0.5 + a*sin(2*pi*u/w + phase), one period across."""
    h, w = image_size
    if not (0.0 < amplitude <= 0.5):
        raise DatasetError(f"amplitude must lie in (0, 0.5], got {amplitude}")
    u = np.arange(w, dtype=np.float64)
    row = 0.5 + amplitude * np.sin(2.0 * np.pi * u / w + phase)
    return np.tile(row, (h, 1))


def sine_tangent(image_size, phase: float, amplitude: float) -> np.ndarray:
    """Unnormalized tangent vectors (d/dphase, d/damplitude), shape (2, h, w)."""
    h, w = image_size
    u = np.arange(w, dtype=np.float64)
    arg = 2.0 * np.pi * u / w + phase
    dphase = np.tile(amplitude * np.cos(arg), (h, 1))
    damp = np.tile(np.sin(arg), (h, 1))
    return np.stack([dphase, damp])


# ---------------------------------------------------------------------------
# permutation


def pixel_permutation(n_pixels: int, perm_seed: int) -> np.ndarray:
    """Fixed Fisher-Yates permutation of pixel indices, keyed by seed."""
    gen = np.random.Generator(np.random.Philox(perm_seed))
    return gen.permutation(n_pixels)


def invert_permutation(perm: np.ndarray) -> np.ndarray:
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    return inv


def apply_permutation(images: np.ndarray, perm: np.ndarray) -> np.ndarray:
    """Apply one fixed pixel permutation to every image in (n, 1, h, w)."""
    n, c, h, w = images.shape
    if perm.shape != (h * w,):
        raise DimensionMismatch("pixels", h * w, perm.shape, "apply_permutation")
    flat = images.reshape(n, c, h * w)
    return flat[:, :, perm].reshape(n, c, h, w)


# ---------------------------------------------------------------------------
# noise, splits


def add_noise(x: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    """y = x + sigma * z with z from Box-Muller over Philox. Unclipped."""
    if sigma < 0:
        raise DatasetError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0.0:
        return np.array(x, copy=True)
    return x + sigma * normal_field(np.shape(x), seed, dtype=np.asarray(x).dtype)


def split_disjoint(n: int, sizes, seed: int) -> list[np.ndarray]:
    """Disjoint index subsets of range(n), shuffled by seed."""
    sizes = list(sizes)
    if any(s < 0 for s in sizes):
        raise DatasetError(f"split sizes must be >= 0, got {sizes}")
    if sum(sizes) > n:
        raise DatasetError(f"cannot split {n} samples into subsets of sizes {sizes}")
    perm = np.random.Generator(np.random.Philox(seed)).permutation(n)
    out, start = [], 0
    for s in sizes:
        out.append(np.sort(perm[start:start + s]))
        start += s
    return out


# ---------------------------------------------------------------------------
# dataset-level generation


def generate(spec: DatasetSpec) -> tuple[np.ndarray, list[dict]]:
    """Render a dataset: (count, 1, h, w) float64 in [0, 1] plus per-sample
    metadata sufficient to re-render bit-exactly."""
    h, w = spec.image_size
    images = np.empty((spec.count, 1, h, w), dtype=np.float64)
    metas: list[dict] = []

    if spec.kind == "calpha":
        a1 = spec.params.get("alpha_contour", spec.params.get("alpha", 2.0))
        a2 = spec.params.get("alpha_texture", spec.params.get("alpha", 2.0))
        for i in range(spec.count):
            sample_seed = spec.seed + i
            images[i, 0] = synth_calpha(spec.image_size, a1, a2, sample_seed)
            metas.append({"kind": "calpha", "alpha_contour": float(a1),
                          "alpha_texture": float(a2), "seed": sample_seed})

    elif spec.kind == "disks":
        radius_frac = tuple(spec.params.get("radius_frac", (0.1, 0.35)))
        min_contrast = float(spec.params.get("min_contrast", 0.2))
        for i in range(spec.count):
            gen = _sample_rng(spec.seed, i)
            p = draw_disk_params(spec.image_size, gen, radius_frac, min_contrast)
            images[i, 0] = render_disk(spec.image_size, **p)
            metas.append({"kind": "disks", **{k: float(v) for k, v in p.items()}})

    elif spec.kind == "sine_cone":
        amp_range = tuple(spec.params.get("amplitude_range", (0.05, 0.5)))
        for i in range(spec.count):
            gen = _sample_rng(spec.seed, i)
            phase = gen.uniform(0.0, 2.0 * np.pi)
            amp = gen.uniform(*amp_range)
            images[i, 0] = render_sine(spec.image_size, phase, amp)
            metas.append({"kind": "sine_cone", "phase": float(phase),
                          "amplitude": float(amp)})

    elif spec.kind == "single_image_ray":
        base = spec.params.get("base_image")
        if base is None:
            raise DatasetError("single_image_ray needs params['base_image']")
        base = np.asarray(base, dtype=np.float64).reshape(h, w)
        lo, hi = spec.params.get("scale_range", (0.2, 1.0))
        if not (0.0 < lo <= hi <= 1.0):
            raise DatasetError(f"scale_range must satisfy 0 < lo <= hi <= 1, "
                               f"got ({lo}, {hi})")
        for i in range(spec.count):
            gen = _sample_rng(spec.seed, i)
            s = gen.uniform(lo, hi)
            images[i, 0] = s * base
            metas.append({"kind": "single_image_ray", "scale": float(s)})

    elif spec.kind == "shuffled":
        inner = spec.params.get("inner")
        source = spec.params.get("source_images")
        perm_seed = int(spec.params.get("perm_seed", spec.seed))
        if inner is not None:
            inner_spec = inner if isinstance(inner, DatasetSpec) else DatasetSpec(**inner)
            images, metas = generate(inner_spec)
        elif source is not None:
            images = np.asarray(source, dtype=np.float64)
            if images.ndim == 3:
                images = images[:, None]
            metas = [{"kind": "shuffled_source", "index": i}
                     for i in range(images.shape[0])]
        else:
            raise DatasetError("shuffled needs params['inner'] or "
                               "params['source_images']")
        perm = pixel_permutation(images.shape[2] * images.shape[3], perm_seed)
        images = apply_permutation(images, perm)
        metas = [{**m, "perm_seed": perm_seed} for m in metas]

    elif spec.kind == "image_dir":
        from .dataio import load_image_dir
        source = spec.params.get("path")
        if source is None:
            raise DatasetError("image_dir needs params['path']")
        images, metas = load_image_dir(source, spec.image_size)
        if images.shape[0] < spec.count:
            raise DatasetError(f"{source}: found {images.shape[0]} images, "
                               f"spec wants {spec.count}")
        images, metas = images[:spec.count], metas[:spec.count]

    else:
        raise DatasetError(f"generate does not handle kind {spec.kind!r}")

    return images, metas
