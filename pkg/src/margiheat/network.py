"""Convolutional marginal-heatmap model with hand-written backpropagation.

Activations use a channel-first, batch-second layout ``(C, N, H, W)`` so that
a 1x1 convolution is a single matrix product and axis permutation is a plain
``swapaxes``. Layers cache what they need during a forward pass called with
``cache=True``; a ``backward`` accumulates into the layer's gradient buffers.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidParameterError, ShapeError, StateError
from .heatmap_ops import MarginalHeatmapSet, Plane, marginal_coords, normalize_to_pmf, normalize_to_pmf_backward

CHECKPOINT_MAGIC = b"MHPM1"
# Heatmap logit layers start 10x below fan-in scale so initial heatmaps are
# close to uniform rather than saturated.
HEATMAP_INIT_GAIN = 0.1


# ---------------------------------------------------------------------------
# Layers


class Conv2d:
    """Zero-padded 2D convolution: 1x1, or 3x3 with stride 1 or 2."""

    def __init__(self, cin: int, cout: int, kernel: int = 3, stride: int = 1, rng=None, dtype=np.float32,
                 init_gain: float = 1.0):
        if kernel not in (1, 3) or stride not in (1, 2) or (kernel == 1 and stride != 1):
            raise InvalidParameterError(f"unsupported conv kernel={kernel} stride={stride}")
        self.cin, self.cout, self.kernel, self.stride = cin, cout, kernel, stride
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = cin * kernel * kernel
        std = init_gain * math.sqrt(2.0 / fan_in)
        self.weight = (rng.standard_normal((cout, cin, kernel, kernel)) * std).astype(dtype)
        self.bias = np.zeros(cout, dtype=dtype)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self._cache = None

    def params(self):
        return [self.weight, self.bias]

    def grads(self):
        return [self.grad_weight, self.grad_bias]

    def _wmat(self):
        # Column order (ky, kx, c) matches the im2col stacking below.
        return np.ascontiguousarray(self.weight.transpose(0, 2, 3, 1)).reshape(self.cout, -1)

    def _out_size(self, n):
        return (n - 1) // self.stride + 1

    def forward(self, x: np.ndarray, cache: bool = False) -> np.ndarray:
        c, n, h, w = x.shape
        if c != self.cin:
            raise ShapeError(f"conv expects {self.cin} input channels, got {c}")
        if self.kernel == 3 and self.stride == 1:
            return self._forward_shifted(x, cache)
        if self.kernel == 1:
            cols = x.reshape(c, -1)
            ho, wo = h, w
        else:
            k, s, pad = self.kernel, self.stride, self.kernel // 2
            ho, wo = self._out_size(h), self._out_size(w)
            xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
            cols = np.empty((k * k, c, n, ho, wo), dtype=x.dtype)
            for t in range(k * k):
                dy, dx = divmod(t, k)
                cols[t] = xp[:, :, dy : dy + s * ho : s, dx : dx + s * wo : s]
            cols = cols.reshape(k * k * c, -1)
        out = self._wmat() @ cols + self.bias[:, None]
        if cache:
            self._cache = ("cols", cols, x.shape)
        return out.reshape(self.cout, n, ho, wo)

    # Stride-1 3x3: in the flattened zero-padded image every kernel tap is a
    # constant offset, so the convolution is nine matmuls on shifted views.
    # Positions that straddle a row or image boundary land in the padding
    # margin and are cropped away.
    def _forward_shifted(self, x, cache):
        c, n, h, w = x.shape
        hp, wp = h + 2, w + 2
        xp = np.zeros((c, n, hp, wp), dtype=x.dtype)
        xp[:, :, 1:-1, 1:-1] = x
        xf = xp.reshape(c, -1)
        span = n * hp * wp - (2 * wp + 2)
        taps = np.ascontiguousarray(self.weight.transpose(2, 3, 0, 1)).reshape(9, self.cout, c)
        out = np.zeros((self.cout, n * hp * wp), dtype=x.dtype)
        acc = out[:, :span]
        for t in range(9):
            off = (t // 3) * wp + t % 3
            acc += taps[t] @ xf[:, off : off + span]
        if cache:
            self._cache = ("shift", xf, x.shape)
        return out.reshape(self.cout, n, hp, wp)[:, :, :h, :w] + self.bias[:, None, None, None]

    def _backward_shifted(self, grad_out, xf, in_shape, need_input_grad):
        c, n, h, w = in_shape
        hp, wp = h + 2, w + 2
        span = n * hp * wp - (2 * wp + 2)
        gp = np.zeros((self.cout, n, hp, wp), dtype=grad_out.dtype)
        gp[:, :, :h, :w] = grad_out
        gf = gp.reshape(self.cout, -1)[:, :span]
        taps = np.ascontiguousarray(self.weight.transpose(2, 3, 0, 1)).reshape(9, self.cout, c)
        gtaps = np.empty_like(taps)
        gxf = np.zeros((c, n * hp * wp), dtype=grad_out.dtype) if need_input_grad else None
        for t in range(9):
            off = (t // 3) * wp + t % 3
            gtaps[t] = gf @ xf[:, off : off + span].T
            if need_input_grad:
                gxf[:, off : off + span] += taps[t].T @ gf
        self.grad_weight += gtaps.reshape(3, 3, self.cout, c).transpose(2, 3, 0, 1)
        self.grad_bias += grad_out.sum(axis=(1, 2, 3))
        if not need_input_grad:
            return None
        return gxf.reshape(c, n, hp, wp)[:, :, 1:-1, 1:-1]

    def backward(self, grad_out: np.ndarray, need_input_grad: bool = True):
        if self._cache is None:
            raise StateError("Conv2d.backward called before a caching forward")
        kind, saved, in_shape = self._cache
        self._cache = None
        if kind == "shift":
            return self._backward_shifted(grad_out, saved, in_shape, need_input_grad)
        cols = saved
        g = grad_out.reshape(self.cout, -1)
        self.grad_bias += g.sum(axis=1)
        gw = g @ cols.T
        self.grad_weight += gw.reshape(self.cout, self.kernel, self.kernel, self.cin).transpose(0, 3, 1, 2)
        if not need_input_grad:
            return None
        gcols = self._wmat().T @ g
        c, n, h, w = in_shape
        if self.kernel == 1:
            return gcols.reshape(in_shape)
        k, s, pad = self.kernel, self.stride, self.kernel // 2
        ho, wo = grad_out.shape[2:]
        gcols = gcols.reshape(k * k, c, n, ho, wo)
        gxp = np.zeros((c, n, h + 2 * pad, w + 2 * pad), dtype=grad_out.dtype)
        for t in range(k * k):
            dy, dx = divmod(t, k)
            gxp[:, :, dy : dy + s * ho : s, dx : dx + s * wo : s] += gcols[t]
        return gxp[:, :, pad : pad + h, pad : pad + w]


class ReLU:
    def __init__(self):
        self._mask = None

    def params(self):
        return []

    def grads(self):
        return []

    def forward(self, x, cache: bool = False):
        mask = x > 0
        if cache:
            self._mask = mask
        return np.where(mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, grad_out):
        if self._mask is None:
            raise StateError("ReLU.backward called before a caching forward")
        g = np.where(self._mask, grad_out, 0).astype(grad_out.dtype, copy=False)
        self._mask = None
        return g


class ResidualBlock:
    """``relu(conv3x3(relu(conv3x3(x))) + conv1x1(x))``: projection shortcut on every block."""

    def __init__(self, cin: int, cout: int, rng=None, dtype=np.float32):
        self.conv1 = Conv2d(cin, cout, 3, rng=rng, dtype=dtype)
        self.relu1 = ReLU()
        self.conv2 = Conv2d(cout, cout, 3, rng=rng, dtype=dtype)
        self.proj = Conv2d(cin, cout, 1, rng=rng, dtype=dtype)
        self.relu_out = ReLU()

    def layers(self):
        return [self.conv1, self.conv2, self.proj]

    def params(self):
        return [p for layer in self.layers() for p in layer.params()]

    def grads(self):
        return [g for layer in self.layers() for g in layer.grads()]

    def forward(self, x, cache: bool = False):
        h = self.relu1.forward(self.conv1.forward(x, cache), cache)
        h = self.conv2.forward(h, cache)
        return self.relu_out.forward(h + self.proj.forward(x, cache), cache)

    def backward(self, grad_out):
        g = self.relu_out.backward(grad_out)
        g_short = self.proj.backward(g)
        g = self.conv2.backward(g)
        g = self.relu1.backward(g)
        return self.conv1.backward(g) + g_short


# ---------------------------------------------------------------------------
# Axis permutation


@dataclass
class FeatureMap:
    """Activations ``(C, ..., H, W)`` with labels for the channel, vertical and horizontal axes."""

    values: np.ndarray
    axes: tuple = ("z", "y", "x")


def _permute_array(values: np.ndarray, plane: Plane) -> np.ndarray:
    plane = Plane(plane)
    if plane == Plane.ZY:
        if values.shape[0] != values.shape[-1]:
            raise ShapeError(f"ZY permutation needs channels == width, got {values.shape}")
        return np.swapaxes(values, 0, -1)
    if plane == Plane.XZ:
        if values.shape[0] != values.shape[-2]:
            raise ShapeError(f"XZ permutation needs channels == height, got {values.shape}")
        return np.swapaxes(values, 0, -2)
    raise InvalidParameterError("axis permutation targets ZY or XZ only")


def axis_permute(fm, target_plane):
    """Swap the channel axis with the horizontal (ZY) or vertical (XZ) spatial axis.

    Parameter-free and its own inverse, so its backward pass is the same
    permutation applied to the upstream gradient. Accepts a :class:`FeatureMap`
    or a bare array.
    """
    plane = Plane(target_plane)
    if isinstance(fm, FeatureMap):
        c, v, hz = fm.axes
        axes = (hz, v, c) if plane == Plane.ZY else (v, c, hz)
        return FeatureMap(_permute_array(fm.values, plane), axes)
    return _permute_array(np.asarray(fm), plane)


axis_permute_backward = axis_permute


# ---------------------------------------------------------------------------
# Model


@dataclass(frozen=True)
class ModelConfig:
    n_stages: int = 1
    n_joints: int = 17
    input_size: int = 64
    heatmap_size: int = 16
    in_channels: int = 3
    fe_channels: tuple = (16, 32, 32)
    stage_width: int = 32

    def __post_init__(self):
        object.__setattr__(self, "fe_channels", tuple(int(c) for c in self.fe_channels))
        if self.n_stages < 1:
            raise InvalidParameterError("n_stages must be >= 1")
        if self.heatmap_size < 2 or self.input_size < self.heatmap_size:
            raise InvalidParameterError("need input_size >= heatmap_size >= 2")
        ratio = self.input_size // self.heatmap_size
        if self.input_size % self.heatmap_size or ratio & (ratio - 1) or self.input_size & (self.input_size - 1):
            raise InvalidParameterError("input_size must be a power of two and a power-of-two multiple of heatmap_size")
        if self.n_downsample > 1 + len(self.fe_channels):
            raise InvalidParameterError("too much downsampling for the feature extractor depth")
        if len(self.fe_channels) != 3:
            raise InvalidParameterError("fe_channels needs three entries (the fourth block outputs stage_width)")

    @property
    def n_downsample(self) -> int:
        return int(round(math.log2(self.input_size // self.heatmap_size)))

    def to_dict(self):
        d = asdict(self)
        d["fe_channels"] = list(self.fe_channels)
        return d


@dataclass
class StagePrediction:
    heatmaps: MarginalHeatmapSet  # each plane (N, J, ., .)
    coords: np.ndarray  # (N, J, 3) heatmap pixels
    stage_index: int


class Stage:
    """Shared residual trunk, then xy / zy / xz branches; depth branches permute mid-way."""

    def __init__(self, width: int, n_joints: int, size: int, rng, dtype=np.float32):
        self.size = size
        self.width = width
        self.dtype = np.dtype(dtype)
        self.trunk = [ResidualBlock(width, width, rng, dtype), ResidualBlock(width, width, rng, dtype)]
        self.xy_blocks = [ResidualBlock(width, width, rng, dtype), ResidualBlock(width, width, rng, dtype)]
        self.xy_out = Conv2d(width, n_joints, 1, rng=rng, dtype=dtype, init_gain=HEATMAP_INIT_GAIN)
        self.depth = {}
        for plane in (Plane.ZY, Plane.XZ):
            self.depth[plane] = {
                "pre": ResidualBlock(width, width, rng, dtype),
                "to_depth": Conv2d(width, size, 1, rng=rng, dtype=dtype),
                "post": ResidualBlock(size, width, rng, dtype),
                "out": Conv2d(width, n_joints, 1, rng=rng, dtype=dtype, init_gain=HEATMAP_INIT_GAIN),
            }

    def layers(self):
        out = list(self.trunk) + list(self.xy_blocks) + [self.xy_out]
        for plane in (Plane.ZY, Plane.XZ):
            b = self.depth[plane]
            out += [b["pre"], b["to_depth"], b["post"], b["out"]]
        return out

    def params(self):
        return [p for layer in self.layers() for p in layer.params()]

    def grads(self):
        return [g for layer in self.layers() for g in layer.grads()]

    def forward(self, x, cache: bool = False):
        """Returns logits ``{plane: (J, N, rows, cols)}``."""
        t = x
        for block in self.trunk:
            t = block.forward(t, cache)
        h = t
        for block in self.xy_blocks:
            h = block.forward(h, cache)
        logits = {Plane.XY: self.xy_out.forward(h, cache)}
        for plane, b in self.depth.items():
            h = b["to_depth"].forward(b["pre"].forward(t, cache), cache)
            h = axis_permute(h, plane)
            h = b["post"].forward(h, cache)
            logits[plane] = b["out"].forward(h, cache)
        return logits

    def backward(self, grad_logits):
        h = self.xy_out.backward(grad_logits[Plane.XY])
        for block in reversed(self.xy_blocks):
            h = block.backward(h)
        g_trunk = h
        for plane, b in self.depth.items():
            h = b["post"].backward(b["out"].backward(grad_logits[plane]))
            h = axis_permute_backward(h, plane)
            g_trunk = g_trunk + b["pre"].backward(b["to_depth"].backward(h))
        for block in reversed(self.trunk):
            g_trunk = block.backward(g_trunk)
        return g_trunk


def flush_subnormal(a: np.ndarray) -> np.ndarray:
    """Zero float32 entries too small to matter; subnormals slow BLAS by orders of magnitude."""
    if a.dtype == np.float32:
        a[np.abs(a) < 1e-30] = 0.0
    return a


def _to_heatmaps(logits):
    """``(J, N, r, c)`` logits -> ``(N, J, r, c)`` PMFs per plane."""
    return MarginalHeatmapSet(
        *(flush_subnormal(normalize_to_pmf(logits[p].transpose(1, 0, 2, 3))) for p in (Plane.XY, Plane.ZY, Plane.XZ))
    )


def stage_forward(features, stage: Stage, stage_index: int = 0) -> StagePrediction:
    """Run one stage on ``(N, C, H, W)`` features and decode its coordinates."""
    features = np.asarray(features, dtype=stage.dtype)
    if features.ndim != 4 or features.shape[1] != stage.width:
        raise ShapeError(f"stage expects (N, {stage.width}, H, W) features, got {features.shape}")
    hms = _to_heatmaps(stage.forward(features.transpose(1, 0, 2, 3)))
    return StagePrediction(hms, marginal_coords(hms, validate=False), stage_index)


class MargiNet:
    """Feature extractor, stacked heatmap stages and 1x1 adapters between stages.

    The feature extractor is four conv3x3+ReLU blocks; the first
    ``log2(input_size / heatmap_size)`` of them have stride 2. Stage ``s > 0``
    takes the previous stage's input plus an adapter projection of the
    previous stage's concatenated heatmaps.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        chans = [config.in_channels, *config.fe_channels, config.stage_width]
        self.fe = []
        for i in range(4):
            stride = 2 if i < config.n_downsample else 1
            self.fe.append((Conv2d(chans[i], chans[i + 1], 3, stride, rng, dtype), ReLU()))
        self.stages = []
        self.adapters = []
        for s in range(config.n_stages):
            if s > 0:
                self.adapters.append(Conv2d(3 * config.n_joints, config.stage_width, 1, rng=rng, dtype=dtype))
            self.stages.append(Stage(config.stage_width, config.n_joints, config.heatmap_size, rng, dtype))
        self._stage_cache = None

    # Declaration order: feature extractor convs, then per stage its adapter
    # (stages after the first) followed by the stage's own layers.
    def layers(self):
        out = [conv for conv, _ in self.fe]
        for s, stage in enumerate(self.stages):
            if s > 0:
                out.append(self.adapters[s - 1])
            out += stage.layers()
        return out

    def params(self):
        return [p for layer in self.layers() for p in layer.params()]

    def grads(self):
        return [g for layer in self.layers() for g in layer.grads()]

    def param_count(self) -> int:
        return sum(p.size for p in self.params())

    def zero_grad(self):
        for g in self.grads():
            g[...] = 0

    def extract_features(self, images, cache: bool = False):
        x = np.asarray(images, dtype=self.dtype).transpose(1, 0, 2, 3)
        for conv, relu in self.fe:
            x = relu.forward(conv.forward(x, cache), cache)
        return x

    def forward(self, images, cache: bool = False):
        """Images ``(N, C, S, S)`` -> one :class:`StagePrediction` per stage."""
        images = np.asarray(images)
        c = self.config
        if images.ndim != 4 or images.shape[1:] != (c.in_channels, c.input_size, c.input_size):
            raise ShapeError(f"expected images (N, {c.in_channels}, {c.input_size}, {c.input_size}), got {images.shape}")
        x = self.extract_features(images, cache)
        preds = []
        stage_hms = []
        for s, stage in enumerate(self.stages):
            if s > 0:
                prev = stage_hms[-1]
                stacked = np.concatenate([prev.xy, prev.zy, prev.xz], axis=1).transpose(1, 0, 2, 3)
                x = x + self.adapters[s - 1].forward(stacked, cache)
            logits = stage.forward(x, cache)
            hms = _to_heatmaps(logits)
            stage_hms.append(hms)
            preds.append(StagePrediction(hms, marginal_coords(hms, validate=False), s))
        if cache:
            self._stage_cache = stage_hms
        return preds

    def backward(self, heatmap_grads):
        """Backpropagate per-stage heatmap gradients (list of MarginalHeatmapSet, ``(N, J, ., .)``).

        Accumulates into every layer's gradient buffer. ``None`` entries mean
        no loss on that stage.
        """
        if self._stage_cache is None:
            raise StateError("MargiNet.backward called before a caching forward")
        stage_hms = self._stage_cache
        self._stage_cache = None
        j = self.config.n_joints
        g_next = None
        for s in reversed(range(len(self.stages))):
            hms = stage_hms[s]
            g = heatmap_grads[s]
            gxy = np.zeros_like(hms.xy) if g is None else g.xy.astype(self.dtype, copy=True)
            gzy = np.zeros_like(hms.zy) if g is None else g.zy.astype(self.dtype, copy=True)
            gxz = np.zeros_like(hms.xz) if g is None else g.xz.astype(self.dtype, copy=True)
            if s + 1 < len(self.stages):
                ga = self.adapters[s].backward(g_next).transpose(1, 0, 2, 3)
                gxy += ga[:, :j]
                gzy += ga[:, j : 2 * j]
                gxz += ga[:, 2 * j :]
            grad_logits = {
                Plane.XY: normalize_to_pmf_backward(hms.xy, gxy).transpose(1, 0, 2, 3),
                Plane.ZY: normalize_to_pmf_backward(hms.zy, gzy).transpose(1, 0, 2, 3),
                Plane.XZ: normalize_to_pmf_backward(hms.xz, gxz).transpose(1, 0, 2, 3),
            }
            g_in = self.stages[s].backward(grad_logits)
            g_next = g_in if g_next is None else g_in + g_next
        g = g_next
        for i in reversed(range(len(self.fe))):
            conv, relu = self.fe[i]
            g = conv.backward(relu.backward(g), need_input_grad=i > 0)
        return None


def param_count_closed_form(config: ModelConfig) -> int:
    """Parameter count from layer shapes: weights ``cout*cin*k*k`` plus ``cout`` biases per conv."""

    def conv(cin, cout, k):
        return cout * cin * k * k + cout

    def block(cin, cout):
        return conv(cin, cout, 3) + conv(cout, cout, 3) + conv(cin, cout, 1)

    w, j, d = config.stage_width, config.n_joints, config.heatmap_size
    chans = [config.in_channels, *config.fe_channels, w]
    fe = sum(conv(chans[i], chans[i + 1], 3) for i in range(4))
    stage = 2 * block(w, w) + 2 * block(w, w) + conv(w, j, 1)
    stage += 2 * (block(w, w) + conv(w, d, 1) + block(d, w) + conv(w, j, 1))
    adapter = conv(3 * j, w, 1)
    return fe + config.n_stages * stage + (config.n_stages - 1) * adapter


# ---------------------------------------------------------------------------
# Checkpoints

_CONFIG_FIELDS = ("n_stages", "n_joints", "input_size", "heatmap_size", "in_channels", "stage_width")


def _config_u32(config: ModelConfig):
    return [getattr(config, f) for f in _CONFIG_FIELDS] + list(config.fe_channels)


def save_checkpoint(model: MargiNet, path, extra: dict | None = None) -> None:
    """Binary checkpoint plus a ``.json`` sidecar.

    Layout (little-endian): ``b"MHPM1"``, u32 field count, u32 config fields
    (n_stages, n_joints, input_size, heatmap_size, in_channels, stage_width,
    fe_channels[0..2]), u32 total parameter count, then every parameter array
    as f32 in declaration order (each conv: weight ``(cout, cin, k, k)`` then
    bias).
    """
    path = Path(path)
    fields = _config_u32(model.config)
    params = model.params()
    total = sum(p.size for p in params)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(fields)))
        f.write(struct.pack(f"<{len(fields)}I", *fields))
        f.write(struct.pack("<I", total))
        for p in params:
            f.write(np.ascontiguousarray(p, dtype="<f4").tobytes())
    sidecar = {"config": model.config.to_dict(), "param_count": total}
    if extra:
        sidecar.update(extra)
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path, dtype=np.float32) -> MargiNet:
    data = Path(path).read_bytes()
    if data[:5] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint (bad magic)")
    pos = 5
    (n_fields,) = struct.unpack_from("<I", data, pos)
    pos += 4
    fields = struct.unpack_from(f"<{n_fields}I", data, pos)
    pos += 4 * n_fields
    k = len(_CONFIG_FIELDS)
    config = ModelConfig(**dict(zip(_CONFIG_FIELDS, fields[:k])), fe_channels=tuple(fields[k:]))
    (total,) = struct.unpack_from("<I", data, pos)
    pos += 4
    model = MargiNet(config, seed=0, dtype=dtype)
    if total != model.param_count():
        raise ValueError(f"{path}: parameter count {total} does not match config ({model.param_count()})")
    flat = np.frombuffer(data, dtype="<f4", count=total, offset=pos)
    offset = 0
    for p in model.params():
        p[...] = flat[offset : offset + p.size].reshape(p.shape)
        offset += p.size
    return model
