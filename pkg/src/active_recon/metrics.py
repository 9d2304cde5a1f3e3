"""Reconstruction and rendering metrics against the scene oracle."""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial import cKDTree

from .scene import gt_sdf, render_rgbd, sample_gt_surface

PSNR_CAP = 99.0


def eval_geometry(points, scene, threshold, gt_points=None, n=20000, seed=0):
    """Acc, Com and C.R. (percent) of a reconstruction point set."""
    if gt_points is None:
        gt_points = sample_gt_surface(scene, n, seed=seed)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        return {"Acc": math.nan, "Com": math.inf, "CR": 0.0, "acc_defined": False}
    rng = np.random.default_rng(seed)
    sub = points if len(points) <= n else points[rng.choice(len(points), n, replace=False)]
    acc = float(np.mean(np.abs(gt_sdf(scene, sub))))
    d, _ = cKDTree(points).query(gt_points, k=1)
    return {"Acc": acc, "Com": float(np.mean(d)), "CR": float(100.0 * np.mean(d <= threshold)),
            "acc_defined": True}


def psnr(a, b):
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def ssim(a, b, sigma=1.5, k1=0.01, k2=0.03, data_range=1.0):
    """Mean SSIM with an 11x11 Gaussian window over the valid (unpadded) region."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 3:
        return float(np.mean([ssim(a[..., c], b[..., c], sigma, k1, k2, data_range)
                              for c in range(a.shape[2])]))
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2

    def filt(x):
        return gaussian_filter(x, sigma, truncate=3.5)

    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a ** 2
    sbb = filt(b * b) - mu_b ** 2
    sab = filt(a * b) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * sab + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2))
    pad = 5
    return float(s[pad:-pad, pad:-pad].mean())


def eval_render(splat_map, poses, scene, intr):
    from .splats import render_splats

    if len(poses) == 0:
        raise ValueError("need at least one holdout pose")
    ps, ss = [], []
    for p in poses:
        gt = render_rgbd(scene, p, intr).image
        out = render_splats(splat_map, p, intr).image
        ps.append(psnr(out, gt))
        ss.append(ssim(out, gt))
    return {"PSNR": float(np.mean(ps)), "SSIM": float(np.mean(ss))}


def _band_samples(scene, n, band, seed):
    rng = np.random.default_rng(seed)
    lo, hi = scene.bounds
    out = []
    count = 0
    while count < n:
        p = rng.uniform(lo, hi, size=(max(4 * n, 10000), 3))
        p = p[np.abs(gt_sdf(scene, p)) < band]
        out.append(p)
        count += len(p)
    return np.concatenate(out)[:n]


def eval_mad(sdf_fn, scene, n=20000, seed=0, band=0.4):
    """Mean |sdf - gt_sdf| over uniform samples with |gt_sdf| < band."""
    f = sdf_fn.sdf if hasattr(sdf_fn, "sdf") else sdf_fn
    pts = _band_samples(scene, n, band, seed)
    return float(np.mean(np.abs(f(pts) - gt_sdf(scene, pts))))
