"""Deterministic 2-D PCA by power iteration, and a static SVG scatter plot."""
from __future__ import annotations

import numpy as np

from .errors import DataError

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2",
           "#7f7f7f", "#bcbd22", "#17becf"]


def power_iteration_pca(x: np.ndarray, k: int = 2, seed: int = 0, tol: float = 1e-10,
                        max_iter: int = 100_000):
    """Top-``k`` principal axes of ``x`` via power iteration with deflation.

    Returns (components (k, dims), eigenvalues (k,), mean). Each component is
    sign-fixed so its largest-magnitude entry is positive.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DataError(f"PCA needs at least 2 samples, got shape {x.shape}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (x.shape[0] - 1)
    rng = np.random.default_rng(seed)
    dims = cov.shape[0]
    comps, vals = [], []
    work = cov.copy()
    for _ in range(min(k, dims)):
        v = rng.standard_normal(dims)
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(max_iter):
            w = work @ v
            norm = np.linalg.norm(w)
            if norm < tol:  # remaining spectrum is numerically zero
                lam = 0.0
                break
            w /= norm
            lam = float(w @ work @ w)
            resid = np.linalg.norm(work @ w - lam * w)
            v = w
            if resid < tol * max(1.0, abs(lam)):
                break
        for c in comps:  # re-orthogonalise against earlier axes
            v -= (v @ c) * c
        v /= np.linalg.norm(v)
        v *= np.sign(v[np.argmax(np.abs(v))])
        lam = float(v @ cov @ v)
        comps.append(v)
        vals.append(lam)
        work = work - lam * np.outer(v, v)
    return np.array(comps), np.array(vals), mean


def project(x: np.ndarray, k: int = 2, seed: int = 0) -> np.ndarray:
    comps, _, mean = power_iteration_pca(x, k, seed)
    return (np.asarray(x, dtype=float) - mean) @ comps.T


def scatter_svg(points: np.ndarray, labels, attack_type, title: str = "",
                size: int = 480) -> str:
    """Live points as circles, fake points as squares; colour by attack type."""
    pad = 40
    lo, hi = points.min(axis=0), points.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    scaled = pad + (points - lo) / span * (size - 2 * pad)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
             f'viewBox="0 0 {size} {size}">',
             f'<rect width="{size}" height="{size}" fill="white"/>']
    if title:
        parts.append(f'<text x="{size / 2:.1f}" y="20" text-anchor="middle" '
                     f'font-family="sans-serif" font-size="14">{title}</text>')
    for (px, py), y, t in zip(scaled, labels, attack_type):
        colour = PALETTE[int(t) % len(PALETTE)]
        py = size - py
        if int(y) == 0:
            parts.append(f'<circle cx="{px:.2f}" cy="{py:.2f}" r="3" fill="{colour}" '
                         f'fill-opacity="0.7"/>')
        else:
            parts.append(f'<rect x="{px - 3:.2f}" y="{py - 3:.2f}" width="6" height="6" '
                         f'fill="{colour}" fill-opacity="0.7"/>')
    types = sorted({int(t) for t in attack_type})
    for i, t in enumerate(types):
        label = "live" if t == 0 else f"attack {t}"
        parts.append(f'<rect x="{size - 95}" y="{30 + 16 * i}" width="10" height="10" '
                     f'fill="{PALETTE[t % len(PALETTE)]}"/>')
        parts.append(f'<text x="{size - 80}" y="{39 + 16 * i}" font-family="sans-serif" '
                     f'font-size="11">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def class_geometry(features: np.ndarray, labels) -> dict:
    """Live/fake center cosine and mean sample-to-own-center distance."""
    x = np.asarray(features, dtype=float)
    labels = np.asarray(labels, dtype=int)
    centers = np.stack([x[labels == c].mean(axis=0) for c in (0, 1)])
    cosine = float(centers[0] @ centers[1] /
                   (np.linalg.norm(centers[0]) * np.linalg.norm(centers[1])))
    spread = float(np.linalg.norm(x - centers[labels], axis=1).mean())
    return {"center_cosine": cosine, "intra_distance": spread}
