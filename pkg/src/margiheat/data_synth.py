"""Synthetic stick-figure data with monocular depth cues.

Poses come from a small keyframe library perturbed by random joint
rotations. Limbs are drawn as anti-aliased capsules whose thickness and
brightness fall off with camera distance, so depth can be read from a
single image. This is a stand-in for licensed motion-capture footage and
its numbers are not comparable with real benchmarks.

Conventions: cube coordinates have x to the right, y down and z away from
the camera. The camera sits at ``z = -CAM_DIST`` looking along +z; the image
plane spans ``[-F/CAM_DIST, F/CAM_DIST]`` so that the ``z = 0`` slice of the
cube fills the image exactly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import skeleton
from .pnm import write_pgm
from .skeleton import BONES, JOINT_INDEX, N_JOINTS, PARENTS, ROOT, Pose3D, Space

FOCAL = 2.0
CAM_DIST = 4.0
IMAGE_HALF_EXTENT = FOCAL / CAM_DIST
CUBE_LIMIT = 0.98

# Bone lengths in millimetres, keyed by child joint.
BONE_LENGTH_MM = {
    "head_top": 250.0,
    "head_front": 180.0,
    "neck": 250.0,
    "l_shoulder": 170.0,
    "r_shoulder": 170.0,
    "l_elbow": 280.0,
    "r_elbow": 280.0,
    "l_wrist": 250.0,
    "r_wrist": 250.0,
    "l_hip": 120.0,
    "r_hip": 120.0,
    "l_knee": 440.0,
    "r_knee": 440.0,
    "l_ankle": 420.0,
    "r_ankle": 420.0,
    "spine_mid": 250.0,
}
BONE_LENGTHS = np.array([BONE_LENGTH_MM[skeleton.JOINT_NAMES[c]] for c, _ in BONES]) / 1000.0

_DOWN = (0.0, 1.0, 0.0)
_UP = (0.0, -1.0, 0.0)
_FWD = (0.0, 0.0, -1.0)  # towards the camera

_STAND = {
    "spine_mid": _UP,
    "neck": _UP,
    "head_top": _UP,
    "head_front": (0.0, -0.6, -0.8),
    "l_shoulder": (1.0, 0.0, 0.0),
    "r_shoulder": (-1.0, 0.0, 0.0),
    "l_elbow": _DOWN,
    "r_elbow": _DOWN,
    "l_wrist": _DOWN,
    "r_wrist": _DOWN,
    "l_hip": (1.0, 0.0, 0.0),
    "r_hip": (-1.0, 0.0, 0.0),
    "l_knee": _DOWN,
    "r_knee": _DOWN,
    "l_ankle": _DOWN,
    "r_ankle": _DOWN,
}


def _keyframe(**changes):
    d = dict(_STAND)
    d.update(changes)
    return d


KEYFRAMES = {
    "stand": _STAND,
    "sit": _keyframe(l_knee=_FWD, r_knee=_FWD, l_wrist=_FWD, r_wrist=_FWD),
    "reach": _keyframe(r_elbow=(-0.8, -0.6, 0.0), r_wrist=(-0.3, -0.95, 0.0), l_elbow=_FWD, l_wrist=(0.3, 0.0, -0.95)),
    "walk": _keyframe(
        l_knee=(0.0, 0.94, -0.34),
        l_ankle=(0.0, 0.98, 0.2),
        r_knee=(0.0, 0.94, 0.34),
        r_ankle=(0.0, 0.8, 0.6),
        l_elbow=(0.0, 0.94, 0.34),
        r_elbow=(0.0, 0.94, -0.34),
        l_wrist=(0.0, 0.8, -0.6),
        r_wrist=(0.0, 0.8, -0.6),
    ),
}
KEYFRAME_NAMES = tuple(KEYFRAMES)

MAX_JOINT_ANGLE_DEG = 25.0
MAX_YAW_DEG = 180.0
MAX_ROOT_OFFSET = 0.1


def _topo_order():
    order, seen = [ROOT], {ROOT}
    while len(order) < N_JOINTS:
        for j, p in enumerate(PARENTS):
            if j not in seen and p in seen:
                order.append(j)
                seen.add(j)
    return tuple(order)


_ORDER = _topo_order()


def _rotation(axis, angle) -> np.ndarray:
    """Rodrigues rotation matrix about a unit axis."""
    x, y, z = axis
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def _random_rotation(rng, max_angle) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return _rotation(axis, rng.uniform(0.0, max_angle))


def pose_from_keyframe(name: str, rotations=None, yaw: float = 0.0, offset=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Forward kinematics for a keyframe.

    ``rotations`` maps joint index to a 3x3 rotation applied at that bone's
    parent, so it moves the whole subtree below the joint.
    """
    dirs = KEYFRAMES[name]
    rotations = rotations or {}
    length = dict(zip((c for c, _ in BONES), BONE_LENGTHS))
    frame = {ROOT: _rotation((0.0, 1.0, 0.0), yaw)}
    joints = np.zeros((N_JOINTS, 3))
    joints[ROOT] = offset
    for j in _ORDER[1:]:
        p = PARENTS[j]
        frame[j] = frame[p] @ rotations.get(j, np.eye(3))
        d = np.asarray(dirs[skeleton.JOINT_NAMES[j]], dtype=np.float64)
        joints[j] = joints[p] + length[j] * (frame[j] @ (d / np.linalg.norm(d)))
    return joints


def _inside(joints) -> bool:
    if np.abs(joints).max() > CUBE_LIMIT:
        return False
    q = joints[:, :2] * CAM_DIST / (joints[:, 2:] + CAM_DIST)
    return bool(np.abs(q).max() <= CUBE_LIMIT)


def sample_pose(rng, jitter: float = 1.0, keyframe: str | None = None, max_tries: int = 100) -> Pose3D:
    """Random pose in the normalized cube.

    ``jitter`` scales every random perturbation (joint rotations, global yaw
    and root offset); ``jitter=0`` returns the keyframe exactly. Poses that
    leave the cube are redrawn.
    """
    for _ in range(max_tries):
        name = keyframe if keyframe is not None else KEYFRAME_NAMES[rng.integers(len(KEYFRAME_NAMES))]
        if jitter == 0:
            joints = pose_from_keyframe(name)
        else:
            max_angle = np.deg2rad(MAX_JOINT_ANGLE_DEG) * jitter
            rotations = {j: _random_rotation(rng, max_angle) for j in _ORDER[1:]}
            yaw = rng.uniform(-1.0, 1.0) * np.deg2rad(MAX_YAW_DEG) * jitter
            offset = rng.uniform(-1.0, 1.0, size=3) * MAX_ROOT_OFFSET * jitter
            joints = pose_from_keyframe(name, rotations, yaw, offset)
        if _inside(joints):
            return Pose3D(joints, Space.NORMALIZED_CUBE)
    raise RuntimeError(f"could not sample an in-cube pose in {max_tries} tries")


# ---------------------------------------------------------------------------
# Rendering

LIMB_RADIUS_PX = 2.0  # at 64 px and camera distance CAM_DIST
BRIGHTNESS_GAIN = 0.55


def _limb_colours():
    # Equal channel mean for every limb so brightness alone carries depth.
    hues = 2 * np.pi * np.arange(len(BONES)) * 7 / len(BONES)
    offsets = np.array([0.0, 2 * np.pi / 3, -2 * np.pi / 3])
    return 0.5 + 0.45 * np.cos(hues[:, None] - offsets[None, :])


LIMB_COLOURS = _limb_colours()


@dataclass
class SynthExample:
    image: np.ndarray  # (3, S, S) in [0, 1]
    pose_gt: Pose3D
    has_3d: bool = True
    rng_seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.pose_gt.space != Space.NORMALIZED_CUBE:
            raise ValueError("pose_gt must be in NORMALIZED_CUBE space")
        if not np.all(np.isfinite(self.image)):
            raise ValueError("image has non-finite values")

    @property
    def size(self) -> int:
        return self.image.shape[-1]


def project(joints, size: int) -> np.ndarray:
    """Pinhole projection of cube points to ``(col, row)`` pixel coordinates."""
    joints = np.asarray(joints, dtype=np.float64)
    depth = joints[..., 2:] + CAM_DIST
    u = FOCAL * joints[..., :2] / depth
    return (u / IMAGE_HALF_EXTENT + 1.0) * (size - 1) / 2.0


def camera_distance(joints) -> np.ndarray:
    return np.asarray(joints, dtype=np.float64)[..., 2] + CAM_DIST


def _limb_layers(joints, size):
    """Per-limb coverage, brightness and mean depth, each ``(B, S, S)`` / ``(B,)``."""
    pix = project(joints, size)
    dist = camera_distance(joints)
    child = np.array([c for c, _ in BONES])
    parent = np.array([p for _, p in BONES])
    a, b = pix[parent], pix[child]
    da, db = dist[parent], dist[child]
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    pts = np.stack([cols, rows], axis=-1)[None]  # (1, S, S, 2)
    ab = (b - a)[:, None, None, :]
    denom = np.maximum((ab**2).sum(-1), 1e-12)
    t = np.clip(((pts - a[:, None, None, :]) * ab).sum(-1) / denom, 0.0, 1.0)
    closest = a[:, None, None, :] + t[..., None] * ab
    d_px = np.sqrt(((pts - closest) ** 2).sum(-1))
    depth = da[:, None, None] + t * (db - da)[:, None, None]
    radius = LIMB_RADIUS_PX * (size / 64.0) * CAM_DIST / depth
    coverage = np.clip(radius - d_px + 0.5, 0.0, 1.0)
    brightness = np.minimum(BRIGHTNESS_GAIN * (CAM_DIST / depth) ** 2, 1.0)
    return coverage, brightness, 0.5 * (da + db)


def render_image(joints, size: int = 64):
    """Painter's-order capsule rendering; returns ``(image (3,S,S), front_limb (S,S))``.

    ``front_limb`` holds the index of the nearest limb covering each pixel,
    or -1 for background.
    """
    coverage, brightness, mean_depth = _limb_layers(joints, size)
    image = np.zeros((3, size, size))
    front = np.full((size, size), -1)
    for k in np.argsort(-mean_depth, kind="stable"):
        alpha = coverage[k]
        colour = LIMB_COLOURS[k][:, None, None] * brightness[k][None]
        image = image * (1.0 - alpha) + colour * alpha
        front[alpha >= 0.5] = k
    return np.clip(image, 0.0, 1.0), front


def render_example(pose: Pose3D, size: int = 64, has_3d: bool = True, rng_seed=None) -> SynthExample:
    image, _ = render_image(pose.joints, size)
    return SynthExample(image, pose, has_3d, rng_seed)


def limb_intensity(pose: Pose3D, size: int = 64):
    """Mean image intensity over the pixels where each limb is frontmost, and each limb's mean camera distance.

    Limbs that win no pixel get NaN intensity.
    """
    image, front = render_image(pose.joints, size)
    lum = image.mean(axis=0)
    _, _, mean_depth = _limb_layers(pose.joints, size)
    out = np.full(len(BONES), np.nan)
    for k in range(len(BONES)):
        mask = front == k
        if mask.any():
            out[k] = lum[mask].mean()
    return out, mean_depth


# ---------------------------------------------------------------------------
# Augmentation


@dataclass(frozen=True)
class AugmentRanges:
    scale: tuple = (0.7, 1.3)
    translate_px: float = 8.0
    rotate_deg: float = 30.0
    gain: tuple = (0.8, 1.2)
    flip_prob: float = 0.5
    max_tries: int = 10


@dataclass(frozen=True)
class AugmentParams:
    scale: float = 1.0
    tx: float = 0.0  # pixels, +x to the right
    ty: float = 0.0  # pixels, +y down
    rotate_deg: float = 0.0
    gain: tuple = (1.0, 1.0, 1.0)
    flip: bool = False

    def is_identity(self) -> bool:
        return self == AugmentParams()

    def linear(self) -> np.ndarray:
        """2x2 map on centred image coordinates: flip, then rotate, then scale."""
        th = np.deg2rad(self.rotate_deg)
        rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
        flip = np.diag([-1.0, 1.0]) if self.flip else np.eye(2)
        return self.scale * rot @ flip


def sample_augment_params(rng, ranges: AugmentRanges = AugmentRanges()) -> AugmentParams:
    return AugmentParams(
        scale=float(rng.uniform(*ranges.scale)),
        tx=float(rng.uniform(-ranges.translate_px, ranges.translate_px)),
        ty=float(rng.uniform(-ranges.translate_px, ranges.translate_px)),
        rotate_deg=float(rng.uniform(-ranges.rotate_deg, ranges.rotate_deg)),
        gain=tuple(float(g) for g in rng.uniform(*ranges.gain, size=3)),
        flip=bool(rng.random() < ranges.flip_prob),
    )


def transform_points(pix, params: AugmentParams, size: int) -> np.ndarray:
    """Apply the image-space transform to ``(col, row)`` pixel coordinates."""
    c = (size - 1) / 2.0
    pix = np.asarray(pix, dtype=np.float64)
    return (pix - c) @ params.linear().T + c + np.array([params.tx, params.ty])


def warp_image(image, params: AugmentParams) -> np.ndarray:
    """Resample ``(C, S, S)`` so that content at ``p`` moves to ``transform_points(p)``."""
    size = image.shape[-1]
    c = (size - 1) / 2.0
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    out_pts = np.stack([cols.ravel(), rows.ravel()], axis=-1)
    inv = np.linalg.inv(params.linear())
    src = (out_pts - c - np.array([params.tx, params.ty])) @ inv.T + c
    coords = [src[:, 1].reshape(size, size), src[:, 0].reshape(size, size)]
    return np.stack([ndimage.map_coordinates(ch, coords, order=1, mode="constant", cval=0.0) for ch in image])


def transform_pose(joints, params: AugmentParams, size: int) -> np.ndarray:
    """3D pose whose projection equals the transformed projection of ``joints``.

    x and y are moved, z is kept; flips also swap left and right labels.
    """
    joints = np.asarray(joints, dtype=np.float64)
    depth = joints[:, 2:] + CAM_DIST
    q = joints[:, :2] * CAM_DIST / depth  # image coordinates in cube units
    t = np.array([params.tx, params.ty]) * 2.0 / (size - 1)
    q_new = q @ params.linear().T + t
    out = joints.copy()
    out[:, :2] = q_new * depth / CAM_DIST
    if params.flip:
        out = out[list(skeleton.FLIP_PERMUTATION)]
    return out


def apply_augment(ex: SynthExample, params: AugmentParams):
    """Augmented copy of ``ex``, or None if the transformed pose leaves the cube."""
    if params.is_identity():
        return replace(ex, image=ex.image.copy(), meta=dict(ex.meta))
    joints = transform_pose(ex.pose_gt.joints, params, ex.size)
    if np.abs(joints).max() > 1.0:
        return None
    image = np.clip(warp_image(ex.image, params) * np.asarray(params.gain)[:, None, None], 0.0, 1.0)
    meta = dict(ex.meta)
    meta["augment"] = params
    return replace(ex, image=image, pose_gt=Pose3D(joints, Space.NORMALIZED_CUBE), meta=meta)


def augment(ex: SynthExample, rng, ranges: AugmentRanges = AugmentRanges()) -> SynthExample:
    """Random augmentation; after ``ranges.max_tries`` out-of-cube draws the example is returned unaugmented."""
    for _ in range(ranges.max_tries):
        out = apply_augment(ex, sample_augment_params(rng, ranges))
        if out is not None:
            return out
    return ex


def withhold_depth(ex: SynthExample) -> SynthExample:
    """2D-only copy: z ground truth zeroed and ``has_3d`` cleared."""
    joints = ex.pose_gt.joints.copy()
    joints[:, 2] = 0.0
    return replace(ex, pose_gt=Pose3D(joints, Space.NORMALIZED_CUBE), has_3d=False)


# ---------------------------------------------------------------------------
# Examples and batches


def generate_example(seed: int, size: int = 64, augmented: bool = True, jitter: float = 1.0) -> SynthExample:
    """Everything about the example is a function of ``seed``."""
    rng = np.random.default_rng(seed)
    ex = render_example(sample_pose(rng, jitter), size, rng_seed=int(seed))
    if augmented:
        ex = augment(ex, rng)
    return ex


def make_batch(rng, n3d: int, n2d: int, size: int = 64, augmented: bool = True) -> list:
    """``n3d`` full examples and ``n2d`` depth-withheld ones, shuffled by ``rng``."""
    if n3d < 0 or n2d < 0:
        raise ValueError("example counts must be non-negative")
    seeds = rng.integers(0, 2**63 - 1, size=n3d + n2d)
    examples = []
    for i, seed in enumerate(seeds):
        ex = generate_example(int(seed), size, augmented)
        examples.append(ex if i < n3d else withhold_depth(ex))
    return [examples[i] for i in rng.permutation(len(examples))]


def example_seeds(seed: int, n: int) -> list:
    return [int(s) for s in np.random.default_rng(seed).integers(0, 2**63 - 1, size=n)]


def stack_images(examples, dtype=np.float32) -> np.ndarray:
    return np.stack([ex.image for ex in examples]).astype(dtype)


# ---------------------------------------------------------------------------
# Dataset dump


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def dump_dataset(out_dir, n: int, seed: int, size: int = 64, n2d: int = 0, augmented: bool = True) -> dict:
    """Write ``images/*.pgm``, ``poses.jsonl`` and ``manifest.json``.

    Each PGM stacks the three colour planes vertically (``3S x S``). The
    manifest lists the per-example seeds, so ``generate_example(seed)``
    regenerates any example exactly.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    seeds = example_seeds(seed, n)
    records, entries = [], []
    for i, s in enumerate(seeds):
        ex = generate_example(s, size, augmented)
        if i >= n - n2d:
            ex = withhold_depth(ex)
        name = f"{i:05d}"
        img_path = out / "images" / f"{name}.pgm"
        write_pgm(img_path, ex.image.reshape(3 * size, size), normalize=False)
        records.append((name, ex.pose_gt))
        entries.append({"id": name, "seed": s, "has_3d": ex.has_3d, "image": f"images/{name}.pgm",
                        "sha256": _sha256(img_path)})
    skeleton.write_poses(out / "poses.jsonl", records)
    manifest = {
        "format": "margiheat-synth-1",
        "n": n,
        "n2d": n2d,
        "seed": seed,
        "size": size,
        "augmented": augmented,
        "poses": "poses.jsonl",
        "poses_sha256": _sha256(out / "poses.jsonl"),
        "examples": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest
