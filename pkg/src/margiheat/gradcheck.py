"""Finite-difference checks of every hand-written backward pass.

Each check builds a random scalar ``L = sum(w * f(x))`` and compares the
analytic gradient with central differences. The error measure is
``|num - ana| / max(|num|, |ana|)`` over the whole sampled gradient vector
(Euclidean norms), which stays meaningful when individual entries are tiny.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import heatmap_ops as ops
from .heatmap_ops import MarginalHeatmapSet, Plane
from .network import Conv2d, MargiNet, ModelConfig, ResidualBlock, axis_permute

EPS = 1e-6
CLOSED_FORM_TOL = 1e-4
LAYER_TOL = 1e-3


def rel_error(num, ana) -> float:
    num = np.ravel(num)
    ana = np.ravel(ana)
    denom = max(np.linalg.norm(num), np.linalg.norm(ana))
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(num - ana) / denom)


def numeric_grad(f, x, idx=None, eps=EPS):
    """Central differences of scalar ``f()`` w.r.t. entries ``idx`` of ``x`` (modified in place, then restored)."""
    idx = range(x.size) if idx is None else idx
    out = []
    for i in idx:
        old = x.flat[i]
        x.flat[i] = old + eps
        fp = f()
        x.flat[i] = old - eps
        fm = f()
        x.flat[i] = old
        out.append((fp - fm) / (2 * eps))
    return np.array(out)


def _pmf(rng, shape):
    return ops.normalize_to_pmf(rng.normal(size=shape))


def check_softmax(rng):
    x = rng.normal(size=(3, 5, 4))
    w = rng.normal(size=x.shape)
    ana = ops.normalize_to_pmf_backward(ops.normalize_to_pmf(x), w)
    num = numeric_grad(lambda: float((w * ops.normalize_to_pmf(x)).sum()), x)
    return rel_error(num, ana)


def check_soft_argmax(rng):
    p = _pmf(rng, (2, 5, 6))
    w = rng.normal(size=(2, 2))
    ana = ops.soft_argmax_2d_backward(p.shape[-2:], w)
    num = numeric_grad(lambda: float((w * ops.soft_argmax_2d(p, validate=False)).sum()), p)
    return rel_error(num, ana)


def check_marginal_coords(rng):
    h, w_, d = 5, 6, 4
    hms = MarginalHeatmapSet(_pmf(rng, (2, h, w_)), _pmf(rng, (2, h, d)), _pmf(rng, (2, d, w_)))
    w = rng.normal(size=(2, 3))
    ana = ops.marginal_coords_backward((h, w_, d), w)

    def f():
        return float((w * ops.marginal_coords(hms, validate=False)).sum())

    num = [numeric_grad(f, a) for a in (hms.xy, hms.zy, hms.xz)]
    return rel_error(np.concatenate(num), np.concatenate([ana.xy.ravel(), ana.zy.ravel(), ana.xz.ravel()]))


def check_jsd(rng):
    p = _pmf(rng, (3, 4, 5))
    q = _pmf(rng, (3, 4, 5))
    w = rng.normal(size=3)
    gp, gq = ops.jsd_backward(p, q)
    ana = np.concatenate([(w[:, None, None] * gp).ravel(), (w[:, None, None] * gq).ravel()])

    def f():
        return float((w * ops.jsd(p, q)).sum())

    return rel_error(np.concatenate([numeric_grad(f, p), numeric_grad(f, q)]), ana)


def _logit_set(rng, n, j, h, w, d):
    return [rng.normal(size=(n, j, h, w)), rng.normal(size=(n, j, h, d)), rng.normal(size=(n, j, d, w))]


def check_loss_3d(rng):
    """loss_3d composed with softmax and marginal soft-argmax, from logits."""
    h, w_, d = 6, 5, 4
    logits = _logit_set(rng, 1, 2, h, w_, d)
    gt = rng.uniform(0.5, 3.5, size=(1, 2, 3))
    weights = rng.uniform(0.5, 1.5, size=(1, 2))
    sigma = 1.0

    def f():
        hms = MarginalHeatmapSet(*(ops.normalize_to_pmf(a) for a in logits))
        return float((weights * ops.loss_3d(hms, ops.marginal_coords(hms, False), gt, sigma)).sum())

    hms = MarginalHeatmapSet(*(ops.normalize_to_pmf(a) for a in logits))
    mu = ops.marginal_coords(hms, False)
    g_hm, g_mu = ops.loss_3d_backward(hms, mu, gt, sigma)
    g_mu = g_mu * weights[..., None]
    g_c = ops.marginal_coords_backward((h, w_, d), g_mu)
    ana = []
    for pmf, a, b in ((hms.xy, g_hm.xy, g_c.xy), (hms.zy, g_hm.zy, g_c.zy), (hms.xz, g_hm.xz, g_c.xz)):
        ana.append(ops.normalize_to_pmf_backward(pmf, a * weights[..., None, None] + b).ravel())
    num = np.concatenate([numeric_grad(f, a) for a in logits])
    return rel_error(num, np.concatenate(ana))


def check_loss_2d(rng):
    h, w_ = 6, 5
    logits = rng.normal(size=(2, 3, h, w_))
    gt = rng.uniform(0.5, 3.5, size=(2, 3, 2))
    weights = rng.uniform(0.5, 1.5, size=(2, 3))
    sigma = 1.0

    def f():
        p = ops.normalize_to_pmf(logits)
        return float((weights * ops.loss_2d(p, ops.soft_argmax_2d(p, False), gt, sigma)).sum())

    p = ops.normalize_to_pmf(logits)
    g_hm, g_mu = ops.loss_2d_backward(p, ops.soft_argmax_2d(p, False), gt, sigma)
    g = g_hm * weights[..., None, None] + ops.soft_argmax_2d_backward(p.shape[-2:], g_mu * weights[..., None])
    return rel_error(numeric_grad(f, logits), ops.normalize_to_pmf_backward(p, g))


def check_axis_permute(rng):
    errs = []
    for plane in (Plane.ZY, Plane.XZ):
        x = rng.normal(size=(4, 2, 4, 4))
        w = rng.normal(size=x.shape)
        ana = axis_permute(w, plane)  # backward is the same permutation
        num = numeric_grad(lambda: float((w * axis_permute(x, plane)).sum()), x)
        errs.append(rel_error(num, ana))
    return max(errs)


def _layer_check(layer, x, rng, n_param_samples=20):
    """Input and parameter gradients of ``sum(w * layer(x))``."""
    out = layer.forward(x, cache=True)
    w = rng.normal(size=out.shape)
    for g in layer.grads():
        g[...] = 0
    gx = layer.backward(w)
    ana = [gx.ravel()]
    num = [numeric_grad(lambda: float((w * layer.forward(x)).sum()), x)]
    for p, g in zip(layer.params(), layer.grads()):
        idx = rng.choice(p.size, min(n_param_samples, p.size), replace=False)
        num.append(numeric_grad(lambda: float((w * layer.forward(x)).sum()), p, idx))
        ana.append(g.ravel()[idx])
    return rel_error(np.concatenate(num), np.concatenate(ana))


def check_conv3x3(rng):
    conv = Conv2d(2, 3, 3, 1, rng, np.float64)
    conv.bias[...] = rng.normal(size=conv.bias.shape)
    return _layer_check(conv, rng.normal(size=(2, 2, 6, 5)), rng)


def check_conv3x3_stride2(rng):
    conv = Conv2d(2, 3, 3, 2, rng, np.float64)
    conv.bias[...] = rng.normal(size=conv.bias.shape)
    return _layer_check(conv, rng.normal(size=(2, 2, 8, 8)), rng)


def check_conv1x1(rng):
    conv = Conv2d(3, 2, 1, 1, rng, np.float64)
    conv.bias[...] = rng.normal(size=conv.bias.shape)
    return _layer_check(conv, rng.normal(size=(3, 2, 4, 5)), rng)


def check_residual(rng):
    block = ResidualBlock(2, 3, rng, np.float64)
    return _layer_check(block, rng.normal(size=(2, 2, 5, 5)), rng)


def check_model(rng, n_stages=1):
    """Full model plus the training loss on a mixed 3D/2D batch, sampling every parameter array."""
    cfg = ModelConfig(n_stages=n_stages, n_joints=3, input_size=16, heatmap_size=8, fe_channels=(4, 4, 4),
                      stage_width=4)
    model = MargiNet(cfg, seed=int(rng.integers(2**31)), dtype=np.float64)
    # Non-zero biases so bias gradients are exercised away from init.
    for p in model.params():
        if p.ndim == 1:
            p[...] = 0.1 * rng.normal(size=p.shape)
    x = rng.random((2, 3, 16, 16))
    gt = rng.uniform(1.0, 6.0, size=(2, 3, 3))
    has_3d = np.array([True, False])
    sigma = 1.0

    def f():
        total = 0.0
        for p in model.forward(x):
            total += float(ops.MarginalLossHead(sigma).forward(p.heatmaps, p.coords, gt, has_3d).mean())
        return total

    model.zero_grad()
    grads = []
    for p in model.forward(x, cache=True):
        head = ops.MarginalLossHead(sigma)
        head.forward(p.heatmaps, p.coords, gt, has_3d)
        grads.append(head.backward(np.full(2, 0.5)))
    model.backward(grads)
    num, ana = [], []
    for p, g in zip(model.params(), model.grads()):
        idx = rng.choice(p.size, min(2, p.size), replace=False)
        num.append(numeric_grad(f, p, idx))
        ana.append(g.ravel()[idx])
    return rel_error(np.concatenate(num), np.concatenate(ana))


@dataclass(frozen=True)
class Check:
    name: str
    fn: object
    tolerance: float


CHECKS = (
    Check("softmax_normalize", check_softmax, CLOSED_FORM_TOL),
    Check("soft_argmax_2d", check_soft_argmax, CLOSED_FORM_TOL),
    Check("marginal_coords", check_marginal_coords, CLOSED_FORM_TOL),
    Check("jsd", check_jsd, CLOSED_FORM_TOL),
    Check("loss_3d", check_loss_3d, CLOSED_FORM_TOL),
    Check("loss_2d", check_loss_2d, CLOSED_FORM_TOL),
    Check("axis_permute", check_axis_permute, CLOSED_FORM_TOL),
    Check("conv3x3", check_conv3x3, CLOSED_FORM_TOL),
    Check("conv3x3_stride2", check_conv3x3_stride2, CLOSED_FORM_TOL),
    Check("conv1x1", check_conv1x1, CLOSED_FORM_TOL),
    Check("residual_block", check_residual, LAYER_TOL),
    Check("model_1stage", check_model, LAYER_TOL),
)


@dataclass
class CheckResult:
    name: str
    worst: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance


def run_suite(seed: int = 0, n_seeds: int = 20, tolerance: float | None = None, checks=CHECKS) -> list:
    """Run every check over ``n_seeds`` seeds; ``tolerance`` overrides the per-check defaults."""
    results = []
    for k, check in enumerate(checks):
        worst = 0.0
        for s in range(seed, seed + n_seeds):
            rng = np.random.default_rng([s, k])
            worst = max(worst, check.fn(rng))
        results.append(CheckResult(check.name, worst, check.tolerance if tolerance is None else tolerance))
    return results
