"""Coordinate-decoding precision and heatmap memory accounting."""

from __future__ import annotations

import numpy as np

from .heatmap_ops import activation_memory, argmax_2d, default_sigma, render_gaussian_2d, soft_argmax_2d

STRATEGY_FIELDS = ("strategy", "trials", "noise", "size", "sigma", "mean_axis_error_px", "mean_euclidean_error_px")
MEMORY_FIELDS = ("size", "n_joints", "marginal_scalars", "volumetric_scalars", "ratio", "ratio_float")


def bench_strategies(trials: int, noise: float = 0.0, size: int = 16, sigma: float | None = None,
                     seed: int = 0, margin: float = 4.0) -> list:
    """Decode Gaussians centred at uniform sub-pixel positions with argmax and soft-argmax.

    Centres stay ``margin`` pixels from the border so truncation does not
    bias the expectation. ``noise`` adds i.i.d. Gaussian noise with that
    standard deviation relative to the peak; the noisy map is clipped at
    zero and renormalized before decoding.
    """
    if trials < 0:
        raise ValueError("trials must be >= 0")
    if trials == 0:
        return []
    sigma = default_sigma(size) if sigma is None else sigma
    rng = np.random.default_rng(seed)
    centres = rng.uniform(margin, size - 1 - margin, size=(trials, 2))
    hms = render_gaussian_2d(centres, sigma, (size, size))
    if noise > 0:
        peak = hms.max(axis=(-2, -1), keepdims=True)
        hms = np.clip(hms + noise * peak * rng.normal(size=hms.shape), 0.0, None)
        hms = hms / hms.sum(axis=(-2, -1), keepdims=True)
    rows = []
    for name, decoded in (("argmax", argmax_2d(hms)), ("soft_argmax", soft_argmax_2d(hms, validate=False))):
        err = decoded - centres
        rows.append(
            {
                "strategy": name,
                "trials": trials,
                "noise": noise,
                "size": size,
                "sigma": sigma,
                "mean_axis_error_px": float(np.abs(err).mean()),
                "mean_euclidean_error_px": float(np.linalg.norm(err, axis=-1).mean()),
            }
        )
    return rows


def memory_table(sizes=(16, 32, 64), n_joints: int = 17) -> list:
    rows = []
    for h in sizes:
        marginal, volumetric, ratio = activation_memory(n_joints, h)
        rows.append(
            {
                "size": h,
                "n_joints": n_joints,
                "marginal_scalars": marginal,
                "volumetric_scalars": volumetric,
                "ratio": f"{ratio.numerator}/{ratio.denominator}",
                "ratio_float": float(ratio),
            }
        )
    return rows
