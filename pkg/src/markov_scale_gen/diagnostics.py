"""Analysis instruments: cross-scale alignment, perturbation spread, scaling fits.

All three tools are pure numpy over frozen models; none build gradients.
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import NumericError, ShapeError, resize_array
from .sampler import generate


def _project(feat: np.ndarray, proj: np.ndarray | None, rng: np.random.Generator, dim: int) -> np.ndarray:
    feat = np.asarray(feat, dtype=np.float64)
    if feat.ndim != 3:
        raise ShapeError(f"rfa_score: features must be (S, S, C), got {feat.shape}")
    if proj is None:
        proj = rng.normal(0.0, 1.0 / math.sqrt(feat.shape[-1]), size=(feat.shape[-1], dim))
    proj = np.asarray(proj, dtype=np.float64)
    if proj.ndim != 2 or proj.shape[0] != feat.shape[-1]:
        raise ShapeError(
            f"rfa_score: projection {proj.shape} does not map channel dim {feat.shape[-1]}"
        )
    return feat @ proj


def rfa_score(
    out_feat: np.ndarray,
    in_feat: np.ndarray,
    proj_out: np.ndarray | None = None,
    proj_in: np.ndarray | None = None,
    proj_dim: int = 16,
    seed: int = 0,
    kernel: str = "bilinear",
) -> float:
    """Signed-square-root cosine between two per-position projected features.

    Both (S, S, C) features are projected per position (1x1 linear; a fresh
    seeded random map when none is supplied), resampled to the finer of the
    two grids, flattened, and compared by cosine; the score is
    sign(c)*sqrt(|c|), compressing magnitude while keeping direction.
    """
    rng = np.random.default_rng(seed)
    a = _project(out_feat, proj_out, rng, proj_dim)
    b = _project(in_feat, proj_in, rng, proj_dim)
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(
            f"rfa_score: projected dims differ, {a.shape[-1]} vs {b.shape[-1]}"
        )
    common = max(a.shape[0], b.shape[0])
    a = resize_array(a, common, kernel).ravel()
    b = resize_array(b, common, kernel).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise NumericError("rfa_score: zero-norm feature, score undefined")
    c = float(a @ b / (na * nb))
    c = max(-1.0, min(1.0, c))
    return math.copysign(math.sqrt(abs(c)), c)


def perturb_experiment(
    model,
    codebook,
    inject_scale: int,
    sigma: float,
    seeds,
    *,
    class_ids=None,
    tokenizer=None,
    temperature: float = 1.0,
    top_k: int | None = None,
    kernel: str = "bilinear",
    noise_seed: int = 7_001,
) -> dict:
    """Image-space divergence caused by noising one scale's embedded tokens.

    Each seed runs generation twice with identical sampling RNG streams; the
    perturbed run adds Gaussian noise (std ``sigma``) to the embedded tokens
    of scale ``inject_scale`` before state assembly, drawn from a separate
    noise stream so the sampling draws stay aligned. The final scale has no
    embedded successor, so injecting there compares two identical runs.
    Returns mean MSE and L1 between the paired outputs, plus per-seed values.
    """
    num_scales = model.config.schedule.num_scales
    if not 1 <= inject_scale <= num_scales:
        raise ValueError(f"perturb_experiment: scale {inject_scale} outside [1, {num_scales}]")
    if sigma < 0:
        raise ValueError(f"perturb_experiment: sigma must be >= 0, got {sigma}")
    seeds = list(seeds)
    if class_ids is None:
        class_ids = [s % model.config.num_classes for s in seeds]
    class_ids = list(class_ids)
    if len(class_ids) != len(seeds):
        raise ValueError(f"perturb_experiment: {len(seeds)} seeds vs {len(class_ids)} classes")
    noise_rng = np.random.default_rng(noise_seed)
    mses, l1s = [], []
    for seed, cls in zip(seeds, class_ids):
        common = dict(
            tokenizer=tokenizer, seed=seed, temperature=temperature, top_k=top_k, kernel=kernel
        )
        clean, _ = generate(model, codebook, cls, **common)

        def noisy(t, e):
            if t == inject_scale:
                return e + sigma * noise_rng.standard_normal(e.shape)
            return e

        dirty, _ = generate(model, codebook, cls, embed_hook=noisy, **common)
        diff = np.asarray(clean, dtype=np.float64) - np.asarray(dirty, dtype=np.float64)
        mses.append(float(np.mean(diff * diff)))
        l1s.append(float(np.mean(np.abs(diff))))
    return {
        "inject_scale": inject_scale,
        "sigma": sigma,
        "mse": float(np.mean(mses)),
        "l1": float(np.mean(l1s)),
        "per_seed_mse": mses,
        "per_seed_l1": l1s,
    }


def power_law_fit(xs, ys) -> tuple[float, float, float]:
    """Least-squares fit of y = a * x**b on log-log axes; returns (a, b, R2).

    R2 is that of the log-log fit; an exactly constant y with zero residual
    is a perfect fit (R2 = 1), avoiding 0/0.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError(f"power_law_fit: need matching 1-D arrays, got {xs.shape}, {ys.shape}")
    if xs.size < 2:
        raise ValueError(f"power_law_fit: need at least 2 points, got {xs.size}")
    if np.any(xs <= 0) or np.any(ys <= 0):
        raise ValueError("power_law_fit: all values must be positive")
    lx, ly = np.log(xs), np.log(ys)
    design = np.stack([lx, np.ones_like(lx)], axis=1)
    (b, log_a), *_ = np.linalg.lstsq(design, ly, rcond=None)
    resid = ly - design @ np.array([b, log_a])
    ss_res = float(resid @ resid)
    ss_tot = float(((ly - ly.mean()) ** 2).sum())
    if ss_tot == 0.0:
        r2 = 1.0 if np.isclose(ss_res, 0.0, atol=1e-24) else 0.0
    else:
        r2 = 1.0 - ss_res / ss_tot
    return float(math.exp(log_a)), float(b), float(r2)
