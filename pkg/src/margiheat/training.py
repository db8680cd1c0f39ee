"""SGD training loop with a 1-cycle schedule and per-stage supervision."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import data_synth, network, skeleton
from .errors import InvalidParameterError, TrainingDivergedError
from .heatmap_ops import MarginalLossHead, default_sigma, gaussian_targets, jsd

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    # model
    n_stages: int = 1
    stage_width: int = 32
    fe_channels: tuple = (16, 32, 32)
    input_size: int = 64
    heatmap_size: int = 16
    # optimisation
    batch_size: int = 32
    n3d: int = 16
    n2d: int = 16
    momentum: float = 0.9
    lr_max: float = 0.01
    total_iters: int = 1000
    grad_clip: float = 10.0
    sigma_px: float | None = None
    regularize: bool = True
    seed: int = 0
    # data
    data_seed: int = 0
    n_train: int = 500
    n_train_2d: int = 500
    n_test: int = 100
    augment: bool = True
    # bookkeeping
    log_interval: int = 100
    eval_interval: int = 500
    checkpoint_interval: int = 0

    def __post_init__(self):
        self.fe_channels = tuple(int(c) for c in self.fe_channels)
        if self.n3d + self.n2d != self.batch_size:
            raise InvalidParameterError(f"n3d + n2d ({self.n3d} + {self.n2d}) must equal batch_size ({self.batch_size})")
        if not self.lr_max > 0:
            raise InvalidParameterError("lr_max must be positive")
        if self.total_iters < 0:
            raise InvalidParameterError("total_iters must be >= 0")
        if self.n3d < 0 or self.n2d < 0:
            raise InvalidParameterError("n3d and n2d must be non-negative")
        if self.n3d and self.n_train < 1:
            raise InvalidParameterError("n3d > 0 needs n_train >= 1")
        if self.n2d and self.n_train_2d < 1:
            raise InvalidParameterError("n2d > 0 needs n_train_2d >= 1")
        if self.log_interval < 1 or self.eval_interval < 0 or self.checkpoint_interval < 0:
            raise InvalidParameterError("intervals must be non-negative (log_interval >= 1)")
        if self.sigma_px is not None and not self.sigma_px > 0:
            raise InvalidParameterError("sigma_px must be positive")

    @property
    def sigma(self) -> float:
        return self.sigma_px if self.sigma_px is not None else default_sigma(self.heatmap_size)

    def model_config(self) -> network.ModelConfig:
        return network.ModelConfig(
            n_stages=self.n_stages,
            input_size=self.input_size,
            heatmap_size=self.heatmap_size,
            fe_channels=self.fe_channels,
            stage_width=self.stage_width,
        )

    def to_dict(self):
        d = asdict(self)
        d["fe_channels"] = list(self.fe_channels)
        d["sigma_px"] = self.sigma
        return d

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


def onecycle_lr(it: int, total: int, lr_max: float) -> float:
    """45% linear warm-up from lr_max/10, 45% back down, then 10% down to lr_max/100."""
    if total <= 0:
        return lr_max / 10.0
    frac = it / total
    lo = lr_max / 10.0
    if frac <= 0.45:
        return lo + (lr_max - lo) * frac / 0.45
    if frac <= 0.9:
        return lr_max - (lr_max - lo) * (frac - 0.45) / 0.45
    return lo - (lo - lr_max / 100.0) * min((frac - 0.9) / 0.1, 1.0)


def sgd_momentum_step(params, grads, velocity, lr: float, momentum: float = 0.9):
    """Classical momentum, in place: ``v = momentum * v + g; p -= lr * v``."""
    for p, g, v in zip(params, grads, velocity):
        v *= momentum
        v += g
        p -= lr * v
    return params


def clip_grad_norm(grads, max_norm: float) -> float:
    """Scale gradients in place to global norm ``max_norm``; returns the norm before clipping."""
    norm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads)))
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= g.dtype.type(scale)
    return norm


def gt_pixels(examples, heatmap_size: int) -> np.ndarray:
    joints = np.stack([ex.pose_gt.joints for ex in examples])
    return skeleton.normalized_to_pixel(joints, heatmap_size)


def batch_loss(preds, examples, sigma: float, regularize: bool = True, return_grads: bool = False):
    """Mean over the batch of per-example losses summed over joints and stages.

    3D examples use the full loss and 2D ones the xy-only loss. Returns
    ``(loss, per_stage_losses)`` and, with ``return_grads``, the heatmap
    gradients for each stage as a third item.
    """
    hm = preds[0].heatmaps.xy.shape[-1]
    gt = gt_pixels(examples, hm)
    has_3d = np.array([ex.has_3d for ex in examples])
    n = len(examples)
    stage_losses, grads = [], []
    for p in preds:
        head = MarginalLossHead(sigma, regularize)
        per_example = head.forward(p.heatmaps, p.coords, gt, has_3d)
        stage_losses.append(float(per_example.astype(np.float64).mean()))
        if return_grads:
            grads.append(head.backward(np.full(n, 1.0 / n)))
    total = float(sum(stage_losses))
    if return_grads:
        return total, stage_losses, grads
    return total, stage_losses


def predict(model: network.MargiNet, images, chunk: int = 32):
    """Last-stage predictions for many images, in chunks."""
    out = []
    for i in range(0, len(images), chunk):
        out.append(model.forward(images[i : i + chunk])[-1])
    return out


def evaluate_model(model: network.MargiNet, examples, sigma: float | None = None, chunk: int = 32) -> dict:
    """Error summaries over all joints.

    ``mpjpe_mm`` is root-relative, in mm at the 1 m cube; ``mpjpe_normalized``
    is the absolute error in cube units; ``jsd_xy`` is the mean JSD of the xy
    heatmaps to their Gaussian targets.
    """
    hm = model.config.heatmap_size
    sigma = sigma if sigma is not None else default_sigma(hm)
    images = data_synth.stack_images(examples, model.dtype)
    preds = predict(model, images, chunk)
    coords = np.concatenate([p.coords for p in preds]).astype(np.float64)
    xy = np.concatenate([p.heatmaps.xy for p in preds])
    gt = gt_pixels(examples, hm)
    pred_mm = skeleton.root_align_array(skeleton.pixel_to_normalized(coords, hm)) * skeleton.DEFAULT_CUBE_HALF_EXTENT_MM
    gt_mm = skeleton.root_align_array(skeleton.pixel_to_normalized(gt, hm)) * skeleton.DEFAULT_CUBE_HALF_EXTENT_MM
    targets = gaussian_targets(gt, (hm, hm, hm), sigma, np.float64)
    abs_err = skeleton.pixel_to_normalized(coords, hm) - skeleton.pixel_to_normalized(gt, hm)
    return {
        "mpjpe_mm": float(np.linalg.norm(pred_mm - gt_mm, axis=-1).mean()),
        "mpjpe_normalized": float(np.linalg.norm(abs_err, axis=-1).mean()),
        "jsd_xy": float(jsd(xy.astype(np.float64), targets.xy).mean()),
    }


@dataclass
class SyntheticTask:
    train_3d: list
    train_2d: list
    test: list


def build_task(cfg: TrainConfig) -> SyntheticTask:
    """Fixed train/test pools drawn from ``cfg.data_seed``; stored unaugmented."""
    ss = np.random.SeedSequence(cfg.data_seed)
    s3, s2, st = (int(c.generate_state(1)[0]) for c in ss.spawn(3))
    size = cfg.input_size

    def pool(seed, n):
        return [data_synth.generate_example(s, size, augmented=False) for s in data_synth.example_seeds(seed, n)]

    return SyntheticTask(
        pool(s3, cfg.n_train if cfg.n3d else 0),
        pool(s2, cfg.n_train_2d if cfg.n2d else 0),
        pool(st, cfg.n_test),
    )


def sample_batch(task: SyntheticTask, cfg: TrainConfig, it: int) -> list:
    """Batch for iteration ``it``; a pure function of ``(seed, it)`` so resumed runs match."""
    rng = np.random.default_rng([cfg.seed, it])
    batch = []
    for pool, n, is_3d in ((task.train_3d, cfg.n3d, True), (task.train_2d, cfg.n2d, False)):
        for i in rng.integers(0, max(len(pool), 1), size=n):
            ex = pool[i]
            if cfg.augment:
                ex = data_synth.augment(ex, rng)
            batch.append(ex if is_3d else data_synth.withhold_depth(ex))
    return batch


@dataclass
class TrainResult:
    out_dir: Path
    final_checkpoint: Path
    log_path: Path
    rows: list = field(default_factory=list)
    final_eval: dict | None = None
    model: network.MargiNet | None = None


def _checkpoint_path(out_dir, it):
    return Path(out_dir) / f"ckpt_{it:07d}.mhpm"


def _save_state(model, velocity, out_dir, it, cfg):
    path = _checkpoint_path(out_dir, it)
    network.save_checkpoint(model, path, extra={"iteration": it, "train_config": cfg.to_dict()})
    np.savez(path.with_suffix(".opt.npz"), iteration=np.int64(it), *velocity)
    return path


def _fmt(x):
    return "" if x is None else repr(float(x))


def train(cfg: TrainConfig, out_dir, resume_from=None, task: SyntheticTask | None = None,
          dtype=np.float32) -> TrainResult:
    """Train a model; deterministic for a given config.

    Writes ``config.json``, ``log.csv`` and checkpoints ``ckpt_<iter>.mhpm``
    (with ``.json`` sidecar and ``.opt.npz`` optimizer state) at iteration
    0, every ``checkpoint_interval`` iterations and at the end.
    ``resume_from`` continues from such a checkpoint and reproduces the
    uninterrupted run exactly.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    task = task if task is not None else build_task(cfg)
    model = network.MargiNet(cfg.model_config(), seed=cfg.seed, dtype=dtype)
    velocity = [np.zeros_like(p) for p in model.params()]
    header = ["iteration", "lr", "loss"] + [f"stage{s}_loss" for s in range(cfg.n_stages)] + ["grad_norm", "eval_mpjpe_mm"]
    log_path = out / "log.csv"
    start = 0
    rows = []
    if resume_from is not None:
        resume_from = Path(resume_from)
        loaded = network.load_checkpoint(resume_from, dtype)
        for p, q in zip(model.params(), loaded.params()):
            p[...] = q
        state = np.load(resume_from.with_suffix(".opt.npz"))
        start = int(state["iteration"])
        for i, v in enumerate(velocity):
            v[...] = state[f"arr_{i}"]
        with open(log_path) as f:
            rows = [r for r in csv.reader(f)][1:]
        rows = [r for r in rows if int(r[0]) <= start]
    else:
        _save_state(model, velocity, out, 0, cfg)

    def write_log():
        with open(log_path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)

    write_log()
    params, grads = model.params(), model.grads()
    window_loss, window_stage, window_norm = [], [], []
    last_path = _checkpoint_path(out, start)
    for it in range(start, cfg.total_iters):
        lr = onecycle_lr(it, cfg.total_iters, cfg.lr_max)
        batch = sample_batch(task, cfg, it)
        images = data_synth.stack_images(batch, model.dtype)
        model.zero_grad()
        preds = model.forward(images, cache=True)
        loss, stage_losses, hm_grads = batch_loss(preds, batch, cfg.sigma, cfg.regularize, return_grads=True)
        model.backward(hm_grads)
        max_grad = max(float(np.abs(g).max()) for g in grads)
        if not (np.isfinite(loss) and np.isfinite(max_grad)):
            raise TrainingDivergedError(
                f"non-finite loss at iteration {it} (lr={lr:.6g}, loss={loss}, max |grad|={max_grad:.6g})"
            )
        norm = clip_grad_norm(grads, cfg.grad_clip)
        sgd_momentum_step(params, grads, velocity, lr, cfg.momentum)
        window_loss.append(loss)
        window_stage.append(stage_losses)
        window_norm.append(norm)
        done = it + 1
        if done % cfg.log_interval == 0 or done == cfg.total_iters:
            ev = None
            if task.test and (done == cfg.total_iters or (cfg.eval_interval and done % cfg.eval_interval == 0)):
                ev = evaluate_model(model, task.test, cfg.sigma)["mpjpe_mm"]
            rows.append(
                [str(done), _fmt(lr), _fmt(np.mean(window_loss))]
                + [_fmt(x) for x in np.mean(window_stage, axis=0)]
                + [_fmt(np.mean(window_norm)), _fmt(ev)]
            )
            log.info("iter %d lr %.4g loss %.4f%s", done, lr, np.mean(window_loss),
                     "" if ev is None else f" eval {ev:.1f} mm")
            window_loss, window_stage, window_norm = [], [], []
            write_log()
        if done == cfg.total_iters or (cfg.checkpoint_interval and done % cfg.checkpoint_interval == 0):
            last_path = _save_state(model, velocity, out, done, cfg)
    final_eval = evaluate_model(model, task.test, cfg.sigma) if task.test else None
    return TrainResult(out, last_path, log_path, rows, final_eval, model)


def read_log(path) -> list:
    with open(path) as f:
        return list(csv.DictReader(f))
