"""Probability-mass heatmap maths.

All functions operate on the trailing two (or three, for volumes) axes and
broadcast over any leading axes, so the same code serves a single joint and a
``(batch, joints, H, W)`` stack. Coordinates are pixel indices with the origin
at index 0: for a 2D grid, ``x`` is the column index and ``y`` the row index.

Marginal plane layouts (``D`` is the depth resolution):

* ``xy``: ``(H, W)``, rows y, columns x
* ``zy``: ``(H, D)``, rows y, columns z
* ``xz``: ``(D, W)``, rows z, columns x
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateTargetError,
    InvalidInputError,
    InvalidParameterError,
    PMFContractError,
    ShapeError,
    StateError,
)

LOG_FLOOR = 1e-12
PMF_ATOL = 1e-6


class Plane(str, enum.Enum):
    XY = "xy"
    ZY = "zy"
    XZ = "xz"


@dataclass
class MarginalHeatmapSet:
    """The three marginal heatmaps of one or more joints."""

    xy: np.ndarray
    zy: np.ndarray
    xz: np.ndarray

    def __post_init__(self):
        h, w = self.xy.shape[-2:]
        if self.zy.shape[-2] != h or self.xz.shape[-1] != w or self.zy.shape[-1] != self.xz.shape[-2]:
            raise ShapeError(
                f"inconsistent marginal shapes xy={self.xy.shape} zy={self.zy.shape} xz={self.xz.shape}"
            )
        if not (self.xy.shape[:-2] == self.zy.shape[:-2] == self.xz.shape[:-2]):
            raise ShapeError("marginals disagree on leading dimensions")

    @property
    def depth(self) -> int:
        return self.zy.shape[-1]

    def planes(self):
        return {Plane.XY: self.xy, Plane.ZY: self.zy, Plane.XZ: self.xz}


def default_sigma(heatmap_size: int) -> float:
    """Gaussian target width in pixels, scaled from 1 px at 32x32 and floored at 0.75 px."""
    return max(heatmap_size / 32.0, 0.75)


def coord_grid(axis: str, shape) -> np.ndarray:
    """Index-valued grid: the X grid holds column indices, the Y grid row indices."""
    h, w = shape
    if axis in ("x", "X"):
        return np.broadcast_to(np.arange(w, dtype=np.float64), (h, w))
    if axis in ("y", "Y"):
        return np.broadcast_to(np.arange(h, dtype=np.float64)[:, None], (h, w))
    raise InvalidParameterError(f"unknown axis {axis!r}")


def check_pmf(hm: np.ndarray, ndim: int = 2, atol: float = PMF_ATOL) -> None:
    hm = np.asarray(hm)
    if hm.ndim < ndim:
        raise ShapeError(f"expected at least {ndim} dims, got shape {hm.shape}")
    if not np.all(np.isfinite(hm)):
        raise PMFContractError("heatmap contains non-finite values")
    if np.any(hm < 0):
        raise PMFContractError("heatmap has negative entries; normalize_to_pmf first")
    axes = tuple(range(-ndim, 0))
    totals = hm.sum(axis=axes, dtype=np.float64)
    if np.any(np.abs(totals - 1.0) > atol):
        raise PMFContractError(
            f"heatmap mass {float(np.max(np.abs(totals - 1.0))):.3g} away from 1; normalize_to_pmf first"
        )


def render_gaussian_2d(center, sigma: float, shape, dtype=np.float64) -> np.ndarray:
    """Discretized isotropic Gaussian, truncated to the grid and renormalized.

    ``center`` is ``(x, y)`` in pixels, or an array of shape ``(..., 2)`` to
    render a stack of targets at once.
    """
    if not sigma > 0:
        raise InvalidParameterError(f"sigma must be positive, got {sigma}")
    h, w = shape
    if h < 1 or w < 1:
        raise InvalidParameterError(f"bad grid shape {shape}")
    center = np.asarray(center, dtype=np.float64)
    cx = center[..., 0, None]
    cy = center[..., 1, None]
    gx = np.exp(-((np.arange(w) - cx) ** 2) / (2.0 * sigma**2))
    gy = np.exp(-((np.arange(h) - cy) ** 2) / (2.0 * sigma**2))
    grid = gy[..., :, None] * gx[..., None, :]
    total = grid.sum(axis=(-2, -1), keepdims=True)
    if np.any(total <= 0):
        raise DegenerateTargetError("Gaussian target has no mass on the grid")
    out = (grid / total).astype(dtype, copy=False)
    if out.dtype == np.float32:
        out[out < 1e-30] = 0.0
    return out


def normalize_to_pmf(raw: np.ndarray) -> np.ndarray:
    """Spatial softmax over the trailing two axes."""
    raw = np.asarray(raw)
    if not np.all(np.isfinite(raw)):
        raise InvalidInputError("raw heatmap contains NaN or Inf")
    shifted = raw - raw.max(axis=(-2, -1), keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=(-2, -1), keepdims=True)


def normalize_to_pmf_backward(pmf: np.ndarray, grad_pmf: np.ndarray) -> np.ndarray:
    inner = (grad_pmf * pmf).sum(axis=(-2, -1), keepdims=True)
    return pmf * (grad_pmf - inner)


def soft_argmax_2d(hm: np.ndarray, validate: bool = True) -> np.ndarray:
    """Expected ``(x, y)`` under the heatmap; returns shape ``(..., 2)``."""
    hm = np.asarray(hm)
    if validate:
        check_pmf(hm)
    h, w = hm.shape[-2:]
    mu_x = hm.sum(axis=-2) @ np.arange(w, dtype=hm.dtype)
    mu_y = hm.sum(axis=-1) @ np.arange(h, dtype=hm.dtype)
    return np.stack([mu_x, mu_y], axis=-1)


def soft_argmax_2d_backward(shape, grad_mu: np.ndarray) -> np.ndarray:
    """Gradient of the expectation w.r.t. the grid: ``gx * X + gy * Y``."""
    h, w = shape
    grad_mu = np.asarray(grad_mu)
    xs = np.arange(w, dtype=grad_mu.dtype)
    ys = np.arange(h, dtype=grad_mu.dtype)
    return grad_mu[..., 0, None, None] * xs + grad_mu[..., 1, None, None] * ys[:, None]


def soft_argmax_3d_volumetric(vol: np.ndarray, validate: bool = True) -> np.ndarray:
    """Expected ``(x, y, z)`` of a ``(D, H, W)`` volume; x indexes W, y H, z D."""
    vol = np.asarray(vol)
    if validate:
        check_pmf(vol, ndim=3)
    d, h, w = vol.shape[-3:]
    mu_x = vol.sum(axis=(-3, -2)) @ np.arange(w, dtype=vol.dtype)
    mu_y = vol.sum(axis=(-3, -1)) @ np.arange(h, dtype=vol.dtype)
    mu_z = vol.sum(axis=(-2, -1)) @ np.arange(d, dtype=vol.dtype)
    return np.stack([mu_x, mu_y, mu_z], axis=-1)


def marginalize_volume(vol: np.ndarray, validate: bool = True) -> MarginalHeatmapSet:
    vol = np.asarray(vol)
    if validate:
        check_pmf(vol, ndim=3)
    xy = vol.sum(axis=-3)
    zy = np.swapaxes(vol.sum(axis=-1), -1, -2)
    xz = vol.sum(axis=-2)
    return MarginalHeatmapSet(xy, zy, xz)


def marginal_coords(hms: MarginalHeatmapSet, validate: bool = True) -> np.ndarray:
    """Joint location from marginals: x and y from ``xy``, z averaged over ``zy`` and ``xz``."""
    if validate:
        for hm in (hms.xy, hms.zy, hms.xz):
            check_pmf(hm)
    xy, zy, xz = hms.xy, hms.zy, hms.xz
    h, w = xy.shape[-2:]
    d = zy.shape[-1]
    mu_x = xy.sum(axis=-2) @ np.arange(w, dtype=xy.dtype)
    mu_y = xy.sum(axis=-1) @ np.arange(h, dtype=xy.dtype)
    zs = np.arange(d, dtype=xy.dtype)
    mu_z = 0.5 * (zy.sum(axis=-2) @ zs) + 0.5 * (xz.sum(axis=-1) @ zs)
    return np.stack([mu_x, mu_y, mu_z], axis=-1)


def marginal_coords_backward(shapes, grad_mu: np.ndarray) -> MarginalHeatmapSet:
    """Gradients of :func:`marginal_coords` w.r.t. the three heatmaps.

    ``shapes`` is ``(H, W, D)``; ``grad_mu`` has shape ``(..., 3)``.
    """
    h, w, d = shapes
    grad_mu = np.asarray(grad_mu)
    g_xy = soft_argmax_2d_backward((h, w), grad_mu[..., :2])
    zs = np.arange(d, dtype=grad_mu.dtype)
    half_gz = 0.5 * grad_mu[..., 2, None, None]
    g_zy = np.broadcast_to(half_gz * zs, grad_mu.shape[:-1] + (h, d)).copy()
    g_xz = np.broadcast_to(half_gz * zs[:, None], grad_mu.shape[:-1] + (d, w)).copy()
    return MarginalHeatmapSet(g_xy, g_zy, g_xz)


def _same_shape(p, q):
    if p.shape != q.shape:
        raise ShapeError(f"shape mismatch {p.shape} vs {q.shape}")


def kl_divergence(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """KL(p || q) in nats over the trailing two axes. Zero-mass p terms contribute 0."""
    p = np.asarray(p)
    q = np.asarray(q)
    _same_shape(p, q)
    safe_p = np.where(p > 0, p, 1.0)
    terms = np.where(p > 0, p * (np.log(safe_p) - np.log(np.maximum(q, LOG_FLOOR))), 0.0)
    return terms.sum(axis=(-2, -1))


def jsd(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Jensen-Shannon divergence in nats; symmetric and bounded by ln 2."""
    p = np.asarray(p)
    q = np.asarray(q)
    _same_shape(p, q)
    m = 0.5 * (p + q)
    return 0.5 * kl_divergence(p, m) + 0.5 * kl_divergence(q, m)


def jsd_backward(p: np.ndarray, q: np.ndarray):
    """Partial derivatives ``(dJSD/dp, dJSD/dq)``; each is ``0.5 * ln(p / m)``."""
    p = np.asarray(p)
    q = np.asarray(q)
    _same_shape(p, q)
    log_m = np.log(np.maximum(0.5 * (p + q), LOG_FLOOR))
    gp = 0.5 * (np.log(np.maximum(p, LOG_FLOOR)) - log_m)
    gq = 0.5 * (np.log(np.maximum(q, LOG_FLOOR)) - log_m)
    return gp, gq


def loss_heatmap_mse(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Sum of squared entry differences (heatmap-matching baseline)."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    _same_shape(pred, target)
    return ((pred - target) ** 2).sum(axis=(-2, -1))


def loss_heatmap_mse_backward(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    return 2.0 * (np.asarray(pred) - np.asarray(target))


def argmax_2d(hm: np.ndarray) -> np.ndarray:
    """Hard argmax ``(x, y)``; ties go to the first index in row-major order."""
    hm = np.asarray(hm)
    h, w = hm.shape[-2:]
    flat = hm.reshape(hm.shape[:-2] + (h * w,)).argmax(axis=-1)
    return np.stack([flat % w, flat // w], axis=-1).astype(np.float64)


def loss_coords_l2(mu, target) -> np.ndarray:
    """Euclidean distance (not squared) over the last axis."""
    diff = np.asarray(mu, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return np.sqrt((diff**2).sum(axis=-1))


def loss_coords_l2_backward(mu, target) -> np.ndarray:
    """Unit vector from target to prediction; zero where they coincide."""
    mu = np.asarray(mu)
    diff = mu - np.asarray(target, dtype=mu.dtype)
    norm = np.sqrt((diff**2).sum(axis=-1, keepdims=True))
    return np.where(norm > 0, diff / np.where(norm > 0, norm, 1.0), 0.0)


def gaussian_targets(gt, shapes, sigma: float, dtype=np.float64) -> MarginalHeatmapSet:
    """Gaussian targets for every plane, centred on the projections of ``gt = (..., 3)``."""
    h, w, d = shapes
    gt = np.asarray(gt, dtype=np.float64)
    gx, gy, gz = gt[..., 0], gt[..., 1], gt[..., 2]
    xy = render_gaussian_2d(np.stack([gx, gy], -1), sigma, (h, w), dtype)
    zy = render_gaussian_2d(np.stack([gz, gy], -1), sigma, (h, d), dtype)
    xz = render_gaussian_2d(np.stack([gx, gz], -1), sigma, (d, w), dtype)
    return MarginalHeatmapSet(xy, zy, xz)


def _shapes(pred: MarginalHeatmapSet):
    h, w = pred.xy.shape[-2:]
    return h, w, pred.depth


def loss_3d(pred: MarginalHeatmapSet, mu, gt, sigma: float, regularize: bool = True) -> np.ndarray:
    """Coordinate distance plus the JSD of each marginal from its Gaussian target."""
    total = loss_coords_l2(mu, gt)
    if regularize:
        targets = gaussian_targets(gt, _shapes(pred), sigma, pred.xy.dtype)
        total = total + jsd(pred.xy, targets.xy) + jsd(pred.zy, targets.zy) + jsd(pred.xz, targets.xz)
    return total


def loss_3d_backward(pred: MarginalHeatmapSet, mu, gt, sigma: float, regularize: bool = True):
    """Returns ``(grads w.r.t. the heatmaps, grad w.r.t. mu)`` with ``mu`` held independent."""
    grad_mu = loss_coords_l2_backward(mu, gt)
    if regularize:
        targets = gaussian_targets(gt, _shapes(pred), sigma, pred.xy.dtype)
        grads = MarginalHeatmapSet(
            jsd_backward(pred.xy, targets.xy)[0],
            jsd_backward(pred.zy, targets.zy)[0],
            jsd_backward(pred.xz, targets.xz)[0],
        )
    else:
        grads = MarginalHeatmapSet(np.zeros_like(pred.xy), np.zeros_like(pred.zy), np.zeros_like(pred.xz))
    return grads, grad_mu


def loss_2d(pred_xy: np.ndarray, mu_xy, gt_xy, sigma: float, regularize: bool = True) -> np.ndarray:
    total = loss_coords_l2(mu_xy, gt_xy)
    if regularize:
        target = render_gaussian_2d(gt_xy, sigma, pred_xy.shape[-2:], pred_xy.dtype)
        total = total + jsd(pred_xy, target)
    return total


def loss_2d_backward(pred_xy: np.ndarray, mu_xy, gt_xy, sigma: float, regularize: bool = True):
    grad_mu = loss_coords_l2_backward(mu_xy, gt_xy)
    if regularize:
        target = render_gaussian_2d(gt_xy, sigma, pred_xy.shape[-2:], pred_xy.dtype)
        grad_hm = jsd_backward(pred_xy, target)[0]
    else:
        grad_hm = np.zeros_like(pred_xy)
    return grad_hm, grad_mu


class MarginalLossHead:
    """Softmax -> marginal soft-argmax -> per-joint loss, with a cached backward.

    ``forward`` takes raw logits for the three planes, shaped ``(N, J, ...)``,
    and a ground-truth array ``(N, J, 3)`` in heatmap pixels. Examples whose
    ``has_3d`` flag is false are scored with the xy-only loss.
    """

    def __init__(self, sigma: float, regularize: bool = True):
        self.sigma = sigma
        self.regularize = regularize
        self._cache = None

    def predict(self, logits_xy, logits_zy, logits_xz):
        hms = MarginalHeatmapSet(
            normalize_to_pmf(logits_xy), normalize_to_pmf(logits_zy), normalize_to_pmf(logits_xz)
        )
        return hms, marginal_coords(hms, validate=False)

    def forward(self, hms: MarginalHeatmapSet, mu, gt, has_3d) -> np.ndarray:
        """Per-example loss summed over joints, shape ``(N,)``."""
        has_3d = np.asarray(has_3d, dtype=bool)
        gt = np.asarray(gt, dtype=hms.xy.dtype)
        shapes = _shapes(hms)
        targets = gaussian_targets(gt, shapes, self.sigma, hms.xy.dtype) if self.regularize else None
        mask3 = has_3d[:, None]
        # 2D examples ignore z entirely: distance in the xy plane only.
        diff = mu - gt
        diff = np.where(mask3[..., None], diff, diff * np.array([1, 1, 0], dtype=diff.dtype))
        dist = np.sqrt((diff**2).sum(-1))
        per_joint = dist
        if self.regularize:
            per_joint = per_joint + jsd(hms.xy, targets.xy)
            per_joint = per_joint + np.where(mask3, jsd(hms.zy, targets.zy) + jsd(hms.xz, targets.xz), 0.0)
        self._cache = (hms, diff, dist, targets, has_3d)
        return per_joint.sum(axis=-1)

    def backward(self, grad_loss) -> MarginalHeatmapSet:
        """Gradient w.r.t. the heatmaps (not the logits) given ``dL/d(per-example loss)``.

        The softmax backward is left to the caller so that gradients arriving
        from later stages can be added in heatmap space first; see
        :meth:`logit_grads`.
        """
        if self._cache is None:
            raise StateError("backward called before forward")
        hms, diff, dist, targets, has_3d = self._cache
        g = np.asarray(grad_loss, dtype=hms.xy.dtype)[:, None]
        safe = np.where(dist > 0, dist, 1.0)
        grad_mu = np.where((dist > 0)[..., None], diff / safe[..., None], 0.0) * g[..., None]
        grads = marginal_coords_backward(_shapes(hms), grad_mu)
        if self.regularize:
            mask3 = has_3d[:, None, None, None]
            grads.xy += g[..., None, None] * jsd_backward(hms.xy, targets.xy)[0]
            grads.zy += np.where(mask3, g[..., None, None] * jsd_backward(hms.zy, targets.zy)[0], 0.0)
            grads.xz += np.where(mask3, g[..., None, None] * jsd_backward(hms.xz, targets.xz)[0], 0.0)
        # Exact zeros for 2D-only examples in the depth planes.
        grads.zy[~has_3d] = 0.0
        grads.xz[~has_3d] = 0.0
        return MarginalHeatmapSet(
            grads.xy.astype(hms.xy.dtype, copy=False),
            grads.zy.astype(hms.zy.dtype, copy=False),
            grads.xz.astype(hms.xz.dtype, copy=False),
        )

    def logit_grads(self, grad_loss) -> MarginalHeatmapSet:
        """Gradient w.r.t. the softmax logits."""
        g = self.backward(grad_loss)
        hms = self._cache[0]
        return MarginalHeatmapSet(
            normalize_to_pmf_backward(hms.xy, g.xy).astype(hms.xy.dtype, copy=False),
            normalize_to_pmf_backward(hms.zy, g.zy).astype(hms.zy.dtype, copy=False),
            normalize_to_pmf_backward(hms.xz, g.xz).astype(hms.xz.dtype, copy=False),
        )


def activation_memory(n_joints: int, size: int):
    """Heatmap output scalars for marginal vs volumetric heads at equal resolution.

    Returns ``(marginal, volumetric, ratio)`` with ``ratio`` an exact ``Fraction``.
    """
    from fractions import Fraction

    marginal = 3 * n_joints * size * size
    volumetric = n_joints * size**3
    return marginal, volumetric, Fraction(marginal, volumetric)
