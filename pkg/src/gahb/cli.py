"""Command-line front end tying the library into runnable experiment recipes.

Every subcommand resolves its settings from built-in defaults, then an
optional JSON config file (``--config``), then explicit flags, in that
order (later wins). The resolved values are echoed to ``manifest.json``
in the output directory, and a manifest is itself a valid config file, so
any run can be repeated bit-exactly from its manifest alone (timestamps
aside). All outputs land under ``--out``; inputs may live anywhere.

Exit codes: 0 success, 1 usage error, 2 runtime error, 3 verification
failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import analysis, sampler
from .dataio import load_packed, read_pgm, save_packed, write_pgm
from .datasets import DatasetSpec, add_noise, disk_tangent_basis, generate, \
    split_disjoint
from .denoiser import BFCNNConfig, ModelDenoiser, TrainConfig, build_model, \
    load_checkpoint, param_count, save_checkpoint, train, write_loss_trace_csv
from .errors import GahbError
from .oracle import GaussianPrior, MixturePrior, OptimalGaussianDenoiser, \
    kl_bound_check, verify_miyasawa, verify_sure
from .rng import philox
from .svgplot import write_line_plot


class UsageError(Exception):
    """Bad flags or config values; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    # argparse wants to sys.exit(2) on bad flags; route through our codes
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# config resolution

DEFAULTS = {
    "synth": {"out": None, "kind": "disks", "n": 16, "size": 16,
              "alpha": 2.0, "seed": 0},
    "train": {"out": None, "dataset": None, "layers": 9, "channels": 32,
              "steps": 500, "batch": 16, "lr": 1e-3, "sigma_min": 0.0,
              "sigma_max": 1.0, "seed": 0, "resume": None},
    "sample": {"out": None, "checkpoint": None, "n": 1, "h": 0.01,
               "sigma0": 1.0, "sigma_inf": 0.01, "max_iters": 10000,
               "seed": 0, "paired": False},
    "analyze": {"out": None, "checkpoint": None, "image": None,
                "dataset": None, "index": 0, "sigma": 0.05, "seed": 0,
                "topk": 0, "n_top": 16, "tangent_check": False},
    "psnr": {"out": None, "checkpoint": None, "identity": False,
             "dataset": None, "sigmas": [0.03, 0.05, 0.1, 0.2, 0.3],
             "window_lo": 20.0, "window_hi": 40.0, "alpha": None, "seed": 0},
    "verify": {"out": None, "only": None, "seed": 0},
    "memgen": {"out": None, "dataset": None, "sizes": None, "layers": 5,
               "channels": 16, "steps": 600, "batch": 8, "lr": 1e-3,
               "sigma_min": 0.0, "sigma_max": 1.0, "n_samples": 8,
               "h": 0.01, "sigma0": 1.0, "sigma_inf": 0.01, "seed": 0},
}


def _csv_floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _csv_ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def resolve_config(command: str, ns: argparse.Namespace) -> dict:
    """defaults < config file < explicit flags; rejects unknown file keys."""
    resolved = dict(DEFAULTS[command])
    config_path = getattr(ns, "config", None)
    if config_path:
        try:
            doc = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {config_path}: {exc}")
        if isinstance(doc, dict) and "config" in doc and "command" in doc:
            if doc["command"] != command:
                raise UsageError(f"manifest is for {doc['command']!r}, "
                                 f"not {command!r}")
            doc = doc["config"]
        if not isinstance(doc, dict):
            raise UsageError(f"config {config_path} must hold a JSON object")
        unknown = sorted(set(doc) - set(resolved))
        if unknown:
            raise UsageError(f"unknown config keys for {command}: "
                             f"{', '.join(unknown)}")
        resolved.update(doc)
    explicit = {k: v for k, v in vars(ns).items()
                if k not in ("command", "config")}
    resolved.update(explicit)
    return resolved


def _require(cfg: dict, key: str, flag: str):
    if cfg.get(key) in (None, []):
        raise UsageError(f"{flag} is required")
    return cfg[key]


def _outdir(cfg: dict) -> Path:
    out = Path(_require(cfg, "out", "--out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out: Path, command: str, cfg: dict, extras: dict | None
                   = None) -> None:
    doc = {"command": command, "config": cfg,
           "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())}
    if extras:
        doc.update(extras)
    with open(out / "manifest.json", "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(cfg: dict) -> int:
    out = _outdir(cfg)
    kind = cfg["kind"]
    if kind not in ("disks", "calpha", "sine_cone"):
        raise UsageError(f"unknown dataset kind {kind!r}")
    alpha = float(cfg["alpha"])
    if kind == "calpha" and alpha <= 0:
        raise UsageError(f"alpha must be positive, got {alpha}")
    params = {"alpha": alpha} if kind == "calpha" else {}
    spec = DatasetSpec(kind, int(cfg["n"]), (int(cfg["size"]),) * 2,
                       int(cfg["seed"]), params)
    images, metas = generate(spec)
    path = out / "dataset.gahb"
    save_packed(path, images, metas, spec.to_dict())
    write_manifest(out, "synth", cfg)
    print(f"wrote {path} ({images.shape[0]} x {images.shape[2]}"
          f"x{images.shape[3]})")
    return 0


def _load_images(path) -> np.ndarray:
    images, _ = load_packed(path)
    return images.astype(np.float64)


def cmd_train(cfg: dict) -> int:
    out = _outdir(cfg)
    images = _load_images(_require(cfg, "dataset", "--dataset"))
    size = images.shape[2:]
    if cfg["resume"]:
        model = load_checkpoint(cfg["resume"])
    else:
        model = build_model(BFCNNConfig(int(cfg["layers"]),
                                        int(cfg["channels"]), size),
                            seed=int(cfg["seed"]))
    start_step = model.step
    tc = TrainConfig(int(cfg["steps"]), int(cfg["batch"]), float(cfg["lr"]),
                     (float(cfg["sigma_min"]), float(cfg["sigma_max"])),
                     int(cfg["seed"]))
    result = train(model, images, tc)
    ckpt = out / "model.bfck"
    save_checkpoint(ckpt, model)
    write_loss_trace_csv(out / "loss.csv", result.loss_trace)
    write_manifest(out, "train", cfg, {
        "param_count": param_count(model.config),
        "start_step": start_step, "final_step": model.step})
    final = result.loss_trace[-1, 2] if len(result.loss_trace) else float("nan")
    print(f"wrote {ckpt} (step {model.step}, loss {final:.3e})")
    return 0


def cmd_sample(cfg: dict) -> int:
    out = _outdir(cfg)
    paths = _require(cfg, "checkpoint", "--checkpoint")
    if isinstance(paths, str):
        paths = [paths]
    if len(paths) > 2:
        raise UsageError(f"at most two checkpoints, got {len(paths)}")
    if cfg["paired"] and len(paths) != 2:
        raise UsageError("--paired needs exactly two checkpoints")
    denoisers = [ModelDenoiser(load_checkpoint(p)) for p in paths]
    shape = (1, 1) + tuple(denoisers[0].image_size)
    scfg = sampler.SamplerConfig(float(cfg["h"]), float(cfg["sigma0"]),
                                 float(cfg["sigma_inf"]),
                                 int(cfg["max_iters"]))
    tags = ["_a", "_b"] if len(denoisers) == 2 else [""]
    iters = []
    for i in range(int(cfg["n"])):
        x0 = sampler.init_noise(shape, int(cfg["seed"]) + i, scfg.sigma0)
        for tag, den in zip(tags, denoisers):
            res = sampler.sample(den, scfg, x0=x0.copy())
            stem = f"pair_{i:03d}{tag}" if tag else f"sample_{i:03d}"
            write_pgm(out / f"{stem}.pgm", res.x[0, 0])
            sampler.write_sigma_trace_csv(out / f"trace_{i:03d}{tag}.csv",
                                          res.sigma_trace)
            iters.append(res.iterations)
    write_manifest(out, "sample", cfg, {"iterations": iters})
    print(f"wrote {len(iters)} samples to {out}")
    return 0


def _analyze_point(cfg: dict) -> tuple[np.ndarray, dict | None]:
    """Clean image plus its metadata (when it came from a dataset)."""
    if (cfg["image"] is None) == (cfg["dataset"] is None):
        raise UsageError("analyze needs exactly one of --image or --dataset")
    if cfg["image"] is not None:
        return read_pgm(cfg["image"])[None, None], None
    images, trailer = load_packed(cfg["dataset"])
    idx = int(cfg["index"])
    if not 0 <= idx < images.shape[0]:
        raise UsageError(f"--index {idx} outside dataset of "
                         f"{images.shape[0]}")
    metas = trailer.get("samples", [])
    meta = metas[idx] if idx < len(metas) else None
    return images[idx:idx + 1].astype(np.float64), meta


def cmd_analyze(cfg: dict) -> int:
    out = _outdir(cfg)
    model = load_checkpoint(_require(cfg, "checkpoint", "--checkpoint"))
    den = ModelDenoiser(model, dtype=np.float64)
    x, meta = _analyze_point(cfg)
    if x.shape[2:] != tuple(den.image_size):
        raise UsageError(f"image is {x.shape[2:]} but the checkpoint expects "
                         f"{tuple(den.image_size)}")
    sigma = float(cfg["sigma"])
    y = add_noise(x, sigma, int(cfg["seed"])) if sigma > 0 else x.copy()
    d = x[0].size
    k = int(cfg["topk"])
    if d > analysis.DENSE_LIMIT and k < 1:
        raise UsageError(f"d={d} exceeds the dense-Jacobian limit "
                         f"{analysis.DENSE_LIMIT}; pass --topk K for the "
                         f"leading eigenpairs instead")

    report = {"sigma": sigma, "d": d}
    if k >= 1:
        lams, vecs = analysis.topk_spectrum(den, y, k=k)
        report.update({"mode": "topk", "k": int(lams.size),
                       "asymmetry": None, "recon_error": None})
    else:
        spec = analysis.spectrum(analysis.jacobian(den, y), x, y, f_y=den(y))
        lams, vecs = spec.eigenvalues, spec.eigenvectors
        analysis.write_spectrum_csv(out / "spectrum.csv", spec)
        report.update({"mode": "dense", "k": d,
                       "asymmetry": spec.asymmetry,
                       "recon_error": spec.recon_error,
                       "effective_rank": analysis.effective_rank(spec),
                       "trace": analysis.trace(spec)})
    if k >= 1:
        cc = np.abs(vecs.T @ x.reshape(-1))
        cn = np.abs(vecs.T @ y.reshape(-1))
        with open(out / "spectrum.csv", "w") as f:
            f.write("k,lambda,coeff_clean_abs,coeff_noisy_abs\n")
            for i in range(lams.size):
                f.write(f"{i},{lams[i]:.10e},{cc[i]:.10e},{cn[i]:.10e}\n")
    mosaic = analysis.vector_mosaic(vecs, x.shape, n_top=int(cfg["n_top"]))
    write_pgm(out / "eigvecs.pgm", mosaic)

    if cfg["tangent_check"]:
        if not meta or meta.get("kind") != "disks":
            raise UsageError("--tangent-check needs --dataset with disk "
                             "metadata")
        basis = disk_tangent_basis(x.shape[2:], meta["cx"], meta["cy"],
                                   meta["radius"], meta["fg"], meta["bg"])
        n_dir = min(5, vecs.shape[1])
        # both arguments are row-stacks of basis vectors
        angles = analysis.principal_angles(vecs[:, :n_dir].T, basis)
        with open(out / "tangent_angles.csv", "w") as f:
            f.write("k,angle_deg\n")
            for i, a in enumerate(angles):
                f.write(f"{i},{a:.4f}\n")
        report["tangent_angles_deg"] = [round(float(a), 4) for a in angles]
        print(f"principal angles vs disk tangent basis (deg): "
              f"{np.round(angles, 2)}")

    with open(out / "report.json", "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    write_manifest(out, "analyze", cfg)
    top = ", ".join(f"{v:.3f}" for v in lams[:5])
    print(f"top eigenvalues: {top}")
    if report.get("asymmetry") is not None:
        print(f"asymmetry {report['asymmetry']:.4f}, reconstruction error "
              f"{report['recon_error']:.4f}")
    return 0


class _IdentityDenoiser:
    """f(y) = y stub; its PSNR curve is exactly the diagonal."""

    def __call__(self, y):
        return y


def cmd_psnr(cfg: dict) -> int:
    out = _outdir(cfg)
    if cfg["identity"]:
        den = _IdentityDenoiser()
    elif cfg["checkpoint"]:
        den = ModelDenoiser(load_checkpoint(cfg["checkpoint"]),
                            dtype=np.float64)
    else:
        raise UsageError("psnr needs --checkpoint or --identity")
    images = _load_images(_require(cfg, "dataset", "--dataset"))
    sigmas = [float(s) for s in cfg["sigmas"]]
    if not sigmas:
        raise UsageError("--sigmas must list at least one noise level")
    curve = analysis.psnr_curve(den, images, sigmas, seed=int(cfg["seed"]))
    analysis.write_psnr_csv(out / "psnr.csv", curve)
    lo, hi = float(cfg["window_lo"]), float(cfg["window_hi"])
    slope, intercept, resid = analysis.fit_slope(curve, (lo, hi))
    diag = (min(curve.in_db), max(curve.in_db))
    write_line_plot(out / "psnr.svg",
                    [("denoiser", curve.in_db, curve.out_db),
                     ("identity", np.asarray(diag), np.asarray(diag))],
                    title="denoising performance",
                    xlabel="input PSNR (dB)", ylabel="output PSNR (dB)")
    write_manifest(out, "psnr", cfg, {"slope": slope, "intercept": intercept,
                                      "rms_residual": resid})
    print(f"slope {slope:.3f} intercept {intercept:.2f} dB over "
          f"[{lo:g}, {hi:g}] dB")
    if cfg["alpha"] is not None:
        a = float(cfg["alpha"])
        print(f"alpha/(alpha+1) reference slope: {a / (a + 1):.3f}")
    return 0


# ---------------------------------------------------------------------------
# verification registry: name -> (residual, tolerance), pass iff r <= tol


def _random_prior(d: int, seed: int, scale: float = 1.0) -> GaussianPrior:
    gen = philox(seed)
    q, _ = np.linalg.qr(gen.standard_normal((d, d)))
    lam = scale * gen.uniform(0.1, 1.0, d)
    return GaussianPrior(gen.standard_normal(d) * 0.3, q, lam)


def _check_miyasawa_gaussian(seed):
    r = verify_miyasawa(_random_prior(6, seed + 100), sigma=0.4, n=200,
                        seed=seed)
    return [("miyasawa_gaussian_mean", r["max_residual"], 1e-10),
            ("miyasawa_gaussian_cov", r["max_cov_residual"], 1e-10)]


def _check_miyasawa_mixture(seed):
    gen = philox(seed + 200)
    d = 4
    comps = [GaussianPrior(gen.uniform(-1.0, 1.0, d), np.eye(d),
                           np.full(d, 0.09)) for _ in range(3)]
    prior = MixturePrior(np.full(3, 1 / 3), comps)
    r = verify_miyasawa(prior, sigma=0.5, n=60, seed=seed, fd_step=1e-4,
                        cov_points=6)
    return [("miyasawa_mixture_mean", r["max_residual"], 1e-5),
            ("miyasawa_mixture_cov", r["max_cov_residual"], 1e-5)]


def _check_jacobian_cov(seed):
    prior = _random_prior(5, seed + 300)
    sigma = 0.3
    resid = np.abs(prior.denoiser_jacobian(sigma)
                   - prior.posterior_cov(sigma) / sigma ** 2).max()
    return [("jacobian_equals_scaled_posterior_cov", float(resid), 1e-8)]


def _check_sure(seed):
    d = 12
    c = 0.7

    class Shrink:
        def __call__(self, y):
            return c * y

    clean = philox(seed + 400).standard_normal((2000, 1, 3, 4))
    r = verify_sure(Shrink(), clean, sigma=0.3, seed=seed,
                    exact_divergence=c * d)
    return [("sure_linear_shrinker_gap", abs(r["gap"]), 4 * r["paired_se"])]


def _check_kl(seed):
    p1 = _random_prior(8, seed + 500)
    p2 = _random_prior(8, seed + 501)
    r = kl_bound_check(p1, p2)
    # the identity is an equality, so the quadrature can land a hair on
    # either side; hold the inequality up to float-level slack
    return [("kl_quadrature_rel_gap", abs(r["rel_gap"]), 0.02),
            ("kl_exact_below_bound", r["kl_exact"] - r["total"],
             1e-6 * r["kl_exact"])]


def _check_bias_free(seed):
    cfg = BFCNNConfig(layers=3, channels=4, image_size=(8, 8))
    den = ModelDenoiser(build_model(cfg, seed=seed + 600), dtype=np.float64)
    y = philox(seed + 601).standard_normal((1, 1, 8, 8))
    zero = float(np.abs(den(np.zeros_like(y))).max())
    fy = den(y)
    homog = float(np.abs(den(1.7 * y) - 1.7 * fy).max()
                  / max(np.abs(fy).max(), 1e-30))
    return [("bias_free_zero_fixed_point", zero, 0.0),
            ("bias_free_homogeneity", homog, 1e-10)]


VERIFY_CHECKS = [_check_miyasawa_gaussian, _check_miyasawa_mixture,
                 _check_jacobian_cov, _check_sure, _check_kl,
                 _check_bias_free]


def cmd_verify(cfg: dict) -> int:
    out = _outdir(cfg)
    seed = int(cfg["seed"])
    entries = []
    for check in VERIFY_CHECKS:
        for name, resid, tol in check(seed):
            entries.append({"identity": name, "residual": float(resid),
                            "tolerance": float(tol),
                            "pass": bool(resid <= tol)})
    if cfg["only"]:
        entries = [e for e in entries if cfg["only"] in e["identity"]]
        if not entries:
            raise UsageError(f"--only {cfg['only']!r} matches no checks")
    with open(out / "verify.json", "w") as f:
        json.dump(entries, f, indent=2, sort_keys=True)
        f.write("\n")
    write_manifest(out, "verify", cfg)
    failed = 0
    for e in entries:
        status = "pass" if e["pass"] else "FAIL"
        failed += not e["pass"]
        print(f"[{status}] {e['identity']}: residual {e['residual']:.3e} "
              f"tol {e['tolerance']:.3e}")
    print(f"{len(entries) - failed}/{len(entries)} identities verified")
    return 3 if failed else 0


def _hist_csv(path, edges: np.ndarray, counts: np.ndarray) -> None:
    with open(path, "w") as f:
        f.write("bin_lo,bin_hi,count\n")
        for i in range(counts.size):
            f.write(f"{edges[i]:.2f},{edges[i + 1]:.2f},{counts[i]}\n")


def cmd_memgen(cfg: dict) -> int:
    out = _outdir(cfg)
    images = _load_images(_require(cfg, "dataset", "--dataset"))
    sizes = [int(s) for s in _require(cfg, "sizes", "--sizes")]
    n_total = images.shape[0]
    for n in sizes:
        if n < 1 or 2 * n > n_total:
            raise UsageError(f"size {n} needs 2n <= {n_total} dataset images")
    size = images.shape[2:]
    seed = int(cfg["seed"])
    tc = lambda s: TrainConfig(int(cfg["steps"]), int(cfg["batch"]),
                               float(cfg["lr"]),
                               (float(cfg["sigma_min"]),
                                float(cfg["sigma_max"])), s)
    scfg = sampler.SamplerConfig(float(cfg["h"]), float(cfg["sigma0"]),
                                 float(cfg["sigma_inf"]))
    subsets = {}
    summary = {}
    for n in sizes:
        idx_a, idx_b = split_disjoint(n_total, [n, n], seed + n)
        subsets[str(n)] = {"a": idx_a.tolist(), "b": idx_b.tolist()}
        models = []
        for j, idx in enumerate((idx_a, idx_b)):
            m = build_model(BFCNNConfig(int(cfg["layers"]),
                                        int(cfg["channels"]), size),
                            seed=seed + 10 * n + j)
            train(m, images[idx], tc(seed + 10 * n + j))
            models.append(ModelDenoiser(m))
        a, b, _ = sampler.paired_sample(models[0], models[1], scfg,
                                        (1, 1) + tuple(size),
                                        int(cfg["n_samples"]),
                                        seed0=seed + 1000 * n)
        rep = analysis.similarity_report(a, b)
        _hist_csv(out / f"pairs_N{n}.csv", rep.bin_edges, rep.count_pairs)
        # nearest-train: each sample against its own model's training subset
        nn = np.concatenate([
            analysis.similarity_report(a, images[idx_a]).nn_ab,
            analysis.similarity_report(b, images[idx_b]).nn_ab])
        counts, _ = np.histogram(nn, bins=rep.bin_edges)
        _hist_csv(out / f"nearest_train_N{n}.csv", rep.bin_edges, counts)
        summary[str(n)] = {"mean_pairwise": float(rep.paired.mean()),
                           "mean_nearest_train": float(nn.mean())}
        print(f"N={n}: pairwise mean {rep.paired.mean():.3f}, "
              f"nearest-train mean {nn.mean():.3f}")
    write_manifest(out, "memgen", cfg, {"subsets": subsets,
                                        "similarity": summary})
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> _Parser:
    parser = _Parser(prog="gahb", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="cmd")
    S = argparse.SUPPRESS

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, argument_default=S)
        p.add_argument("--config", default=None,
                       help="JSON config or manifest; flags override it")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        return p

    p = add("synth", "render a dataset to a packed file")
    p.add_argument("--kind", choices=["disks", "calpha", "sine_cone"])
    p.add_argument("--n", type=int, help="number of images")
    p.add_argument("--size", type=int, help="square image side")
    p.add_argument("--alpha", type=float, help="regularity for calpha")

    p = add("train", "train a bias-free denoiser")
    p.add_argument("--dataset", help="packed dataset path")
    p.add_argument("--layers", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--sigma-min", type=float, dest="sigma_min")
    p.add_argument("--sigma-max", type=float, dest="sigma_max")
    p.add_argument("--resume", help="checkpoint to continue from")

    p = add("sample", "run the deterministic reverse-diffusion sampler")
    p.add_argument("--checkpoint", nargs="+", help="one or two checkpoints")
    p.add_argument("--n", type=int, help="number of chains")
    p.add_argument("--h", type=float, help="step size")
    p.add_argument("--sigma0", type=float, help="initial noise level")
    p.add_argument("--sigma-inf", type=float, dest="sigma_inf",
                   help="stopping noise level")
    p.add_argument("--max-iters", type=int, dest="max_iters")
    p.add_argument("--paired", action="store_true",
                   help="share initial noise across two checkpoints")

    p = add("analyze", "Jacobian spectrum at a noisy image")
    p.add_argument("--checkpoint")
    p.add_argument("--image", help="clean PGM image")
    p.add_argument("--dataset", help="packed dataset to draw the image from")
    p.add_argument("--index", type=int, help="image index within --dataset")
    p.add_argument("--sigma", type=float, help="evaluation noise level")
    p.add_argument("--topk", type=int,
                   help="matrix-free leading eigenpairs instead of dense")
    p.add_argument("--n-top", type=int, dest="n_top",
                   help="eigenvectors in the mosaic")
    p.add_argument("--tangent-check", action="store_true",
                   dest="tangent_check",
                   help="principal angles vs the disk tangent basis")

    p = add("psnr", "input/output PSNR curve and slope")
    p.add_argument("--checkpoint")
    p.add_argument("--identity", action="store_true",
                   help="use the identity stub instead of a checkpoint")
    p.add_argument("--dataset", help="packed test set")
    p.add_argument("--sigmas", type=_csv_floats,
                   help="comma-separated noise levels")
    p.add_argument("--window-lo", type=float, dest="window_lo")
    p.add_argument("--window-hi", type=float, dest="window_hi")
    p.add_argument("--alpha", type=float,
                   help="print the alpha/(alpha+1) reference slope")

    p = add("verify", "run the analytic identity checks")
    p.add_argument("--only", help="substring filter on identity names")

    p = add("memgen", "memorization vs generalization protocol")
    p.add_argument("--dataset", help="packed dataset path")
    p.add_argument("--sizes", type=_csv_ints,
                   help="comma-separated training-set sizes N")
    p.add_argument("--layers", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--sigma-min", type=float, dest="sigma_min")
    p.add_argument("--sigma-max", type=float, dest="sigma_max")
    p.add_argument("--n-samples", type=int, dest="n_samples",
                   help="paired samples per N")
    p.add_argument("--h", type=float)
    p.add_argument("--sigma0", type=float)
    p.add_argument("--sigma-inf", type=float, dest="sigma_inf")
    return parser


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "sample": cmd_sample,
            "analyze": cmd_analyze, "psnr": cmd_psnr, "verify": cmd_verify,
            "memgen": cmd_memgen}


def main(argv=None) -> int:
    try:
        ns = build_parser().parse_args(argv)
        cfg = resolve_config(ns.command, ns)
        return COMMANDS[ns.command](cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (GahbError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
