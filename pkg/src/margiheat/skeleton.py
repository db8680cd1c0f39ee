"""Canonical 17-joint skeleton, coordinate spaces and pose files."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegeneratePoseError, InvalidParameterError

JOINT_NAMES = (
    "head_top",
    "head_front",
    "neck",
    "l_shoulder",
    "r_shoulder",
    "l_elbow",
    "r_elbow",
    "l_wrist",
    "r_wrist",
    "l_hip",
    "r_hip",
    "l_knee",
    "r_knee",
    "l_ankle",
    "r_ankle",
    "pelvis",
    "spine_mid",
)
N_JOINTS = len(JOINT_NAMES)
JOINT_INDEX = {name: i for i, name in enumerate(JOINT_NAMES)}
ROOT = JOINT_INDEX["pelvis"]

_PARENT_NAMES = {
    "head_top": "neck",
    "head_front": "neck",
    "neck": "spine_mid",
    "l_shoulder": "neck",
    "r_shoulder": "neck",
    "l_elbow": "l_shoulder",
    "r_elbow": "r_shoulder",
    "l_wrist": "l_elbow",
    "r_wrist": "r_elbow",
    "l_hip": "pelvis",
    "r_hip": "pelvis",
    "l_knee": "l_hip",
    "r_knee": "r_hip",
    "l_ankle": "l_knee",
    "r_ankle": "r_knee",
    "pelvis": None,
    "spine_mid": "pelvis",
}
PARENTS = tuple(-1 if _PARENT_NAMES[n] is None else JOINT_INDEX[_PARENT_NAMES[n]] for n in JOINT_NAMES)
# (child, parent) pairs, one per bone.
BONES = tuple((j, p) for j, p in enumerate(PARENTS) if p >= 0)


def _mirror(name: str) -> str:
    if name.startswith("l_"):
        return "r_" + name[2:]
    if name.startswith("r_"):
        return "l_" + name[2:]
    return name


FLIP_PERMUTATION = tuple(JOINT_INDEX[_mirror(n)] for n in JOINT_NAMES)

# Evaluation subset: everything except pelvis, spine and front of head.
EVAL_SUBSET_14 = tuple(i for i, n in enumerate(JOINT_NAMES) if n not in ("pelvis", "spine_mid", "head_front"))
ALL_JOINTS = tuple(range(N_JOINTS))

KNEE_NECK_PATH = tuple(JOINT_INDEX[n] for n in ("r_knee", "r_hip", "pelvis", "spine_mid", "neck"))
UNIVERSAL_KNEE_NECK_MM = 920.0
DEFAULT_CUBE_HALF_EXTENT_MM = 1000.0


class Space(str, enum.Enum):
    PIXEL_HM = "PIXEL_HM"
    NORMALIZED_CUBE = "NORMALIZED_CUBE"
    MILLIMETRES_ROOT_RELATIVE = "MILLIMETRES_ROOT_RELATIVE"
    MILLIMETRES_CAMERA = "MILLIMETRES_CAMERA"


@dataclass
class Pose3D:
    joints: np.ndarray
    space: Space

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64)
        self.space = Space(self.space)
        if self.joints.shape != (N_JOINTS, 3):
            raise ValueError(f"expected ({N_JOINTS}, 3) joints, got {self.joints.shape}")
        if not np.all(np.isfinite(self.joints)):
            raise ValueError("pose has non-finite coordinates")


def _expect(p: Pose3D, *spaces: Space):
    if p.space not in spaces:
        raise ValueError(f"pose is in {p.space.value}, expected one of {[s.value for s in spaces]}")


def hm_to_normalized(p: Pose3D, hm_size: int) -> Pose3D:
    _expect(p, Space.PIXEL_HM)
    return Pose3D(pixel_to_normalized(p.joints, hm_size), Space.NORMALIZED_CUBE)


def normalized_to_hm(p: Pose3D, hm_size: int) -> Pose3D:
    _expect(p, Space.NORMALIZED_CUBE)
    return Pose3D(normalized_to_pixel(p.joints, hm_size), Space.PIXEL_HM)


def pixel_to_normalized(coords, hm_size: int) -> np.ndarray:
    """Array form of :func:`hm_to_normalized`: index 0 -> -1, index ``hm_size - 1`` -> +1."""
    if hm_size < 2:
        raise InvalidParameterError("hm_size must be at least 2")
    return 2.0 * np.asarray(coords, dtype=np.float64) / (hm_size - 1) - 1.0


def normalized_to_pixel(coords, hm_size: int) -> np.ndarray:
    if hm_size < 2:
        raise InvalidParameterError("hm_size must be at least 2")
    return (np.asarray(coords, dtype=np.float64) + 1.0) * (hm_size - 1) / 2.0


def root_align_array(joints) -> np.ndarray:
    joints = np.asarray(joints, dtype=np.float64)
    return joints - joints[..., ROOT : ROOT + 1, :]


def root_align(p: Pose3D) -> Pose3D:
    return Pose3D(root_align_array(p.joints), p.space)


def normalized_to_mm(p: Pose3D, cube_half_extent_mm: float = DEFAULT_CUBE_HALF_EXTENT_MM) -> Pose3D:
    """Scale cube units to millimetres and move the pelvis to the origin."""
    _expect(p, Space.NORMALIZED_CUBE)
    if not cube_half_extent_mm > 0:
        raise InvalidParameterError("cube half-extent must be positive")
    return Pose3D(root_align_array(p.joints * cube_half_extent_mm), Space.MILLIMETRES_ROOT_RELATIVE)


def mm_to_normalized(p: Pose3D, cube_half_extent_mm: float = DEFAULT_CUBE_HALF_EXTENT_MM) -> Pose3D:
    _expect(p, Space.MILLIMETRES_ROOT_RELATIVE)
    if not cube_half_extent_mm > 0:
        raise InvalidParameterError("cube half-extent must be positive")
    return Pose3D(p.joints / cube_half_extent_mm, Space.NORMALIZED_CUBE)


def bone_lengths(joints) -> np.ndarray:
    joints = np.asarray(joints, dtype=np.float64)
    child = [c for c, _ in BONES]
    parent = [p for _, p in BONES]
    return np.linalg.norm(joints[..., child, :] - joints[..., parent, :], axis=-1)


def knee_neck_length(joints) -> np.ndarray:
    """Path length right knee -> right hip -> pelvis -> spine_mid -> neck."""
    joints = np.asarray(joints, dtype=np.float64)
    path = joints[..., list(KNEE_NECK_PATH), :]
    return np.linalg.norm(np.diff(path, axis=-2), axis=-1).sum(axis=-1)


def universal_scale(p: Pose3D, target_mm: float = UNIVERSAL_KNEE_NECK_MM) -> Pose3D:
    _expect(p, Space.MILLIMETRES_ROOT_RELATIVE)
    length = float(knee_neck_length(p.joints))
    if not length > 0:
        raise DegeneratePoseError("knee-neck length is zero")
    return Pose3D(p.joints * (target_mm / length), p.space)


def recover_depth_with_root(p_rel: Pose3D, gt_root_depth_mm: float) -> Pose3D:
    _expect(p_rel, Space.MILLIMETRES_ROOT_RELATIVE)
    joints = p_rel.joints.copy()
    joints[:, 2] += gt_root_depth_mm
    return Pose3D(joints, Space.MILLIMETRES_CAMERA)


def flip_joints(joints) -> np.ndarray:
    """Negate x and swap left/right joints; works on any ``(..., 17, 3)`` array."""
    joints = np.array(joints, dtype=np.float64)
    joints[..., 0] *= -1.0
    return joints[..., list(FLIP_PERMUTATION), :]


def flip_pose(p: Pose3D) -> Pose3D:
    return Pose3D(flip_joints(p.joints), p.space)


class PoseFileError(ValueError):
    def __init__(self, path, lineno, message):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


def write_poses(path, records) -> None:
    """Write ``(id, Pose3D)`` pairs as JSON Lines."""
    with open(Path(path), "w") as f:
        for pose_id, pose in records:
            line = {"id": str(pose_id), "space": pose.space.value, "joints": pose.joints.tolist()}
            f.write(json.dumps(line) + "\n")


def read_poses(path):
    """Read a JSON Lines pose file into a list of ``(id, Pose3D)``."""
    records = []
    with open(Path(path)) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise PoseFileError(path, lineno, f"malformed JSON ({e.msg})") from None
            try:
                joints = np.asarray(obj["joints"], dtype=np.float64)
                space = Space(obj["space"])
                pose_id = str(obj["id"])
            except (KeyError, ValueError, TypeError) as e:
                raise PoseFileError(path, lineno, f"bad pose record ({e})") from None
            if joints.shape != (N_JOINTS, 3):
                raise PoseFileError(path, lineno, f"expected {N_JOINTS} joints of 3 coords, got shape {joints.shape}")
            if not np.all(np.isfinite(joints)):
                raise PoseFileError(path, lineno, "non-finite coordinate")
            records.append((pose_id, Pose3D(joints, space)))
    return records
