"""Pose evaluation: MPJPE, PCK, AUC and Procrustes alignment."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import skeleton
from .errors import AlignmentError
from .skeleton import JOINT_NAMES, Pose3D, Space

PCK_THRESHOLD_MM = 150.0
# 0, 5, ..., 150 mm
AUC_THRESHOLDS_MM = tuple(float(t) for t in np.linspace(0.0, 150.0, 31))

SUBSETS = {"all": skeleton.ALL_JOINTS, "eval14": skeleton.EVAL_SUBSET_14}


def _joints(p):
    return p.joints if isinstance(p, Pose3D) else np.asarray(p, dtype=np.float64)


def _subset(subset):
    if subset is None:
        return list(skeleton.ALL_JOINTS)
    if isinstance(subset, str):
        return list(SUBSETS[subset])
    subset = list(subset)
    if not subset:
        raise ValueError("joint subset is empty")
    return subset


def joint_errors(pred, gt) -> np.ndarray:
    return np.linalg.norm(_joints(pred) - _joints(gt), axis=-1)


def mpjpe(pred, gt, subset=None) -> float:
    return float(joint_errors(pred, gt)[..., _subset(subset)].mean())


def pck(pred, gt, threshold_mm: float = PCK_THRESHOLD_MM, subset=None) -> float:
    """Percentage of joints strictly closer than the threshold."""
    err = joint_errors(pred, gt)[..., _subset(subset)]
    return float(100.0 * np.mean(err < threshold_mm))


def auc(pred, gt, subset=None, thresholds=AUC_THRESHOLDS_MM) -> float:
    err = joint_errors(pred, gt)[..., _subset(subset)]
    t = np.asarray(thresholds, dtype=np.float64)
    return float(100.0 * np.mean(err[..., None] < t))


def similarity_transform(pred, gt, subset=None):
    """Least-squares ``(scale, rotation, translation)`` taking ``pred`` onto ``gt``.

    Reflections are excluded (``det(R) = +1``).
    """
    idx = _subset(subset)
    x = _joints(pred)[idx]
    y = _joints(gt)[idx]
    if len(idx) < 3:
        raise AlignmentError("need at least 3 joints for Procrustes alignment")
    mu_x = x.mean(0)
    mu_y = y.mean(0)
    x0 = x - mu_x
    y0 = y - mu_y
    for name, pts in (("prediction", x0), ("ground truth", y0)):
        sv = np.linalg.svd(pts, compute_uv=False)
        if sv[0] == 0 or sv[1] <= 1e-9 * sv[0]:
            raise AlignmentError(f"{name} joints are coincident or collinear")
    u, s, vt = np.linalg.svd(x0.T @ y0)
    d = np.ones(3)
    d[-1] = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag(d) @ u.T
    scale = float((s * d).sum() / (x0**2).sum())
    trans = mu_y - scale * rot @ mu_x
    return scale, rot, trans


def procrustes_align(pred, gt, subset=None) -> Pose3D:
    """Fit a similarity transform on ``subset`` and apply it to every joint of ``pred``."""
    scale, rot, trans = similarity_transform(pred, gt, subset)
    aligned = scale * _joints(pred) @ rot.T + trans
    space = pred.space if isinstance(pred, Pose3D) else Space.MILLIMETRES_ROOT_RELATIVE
    return Pose3D(aligned, space)


def to_metric(p: Pose3D, cube_half_extent_mm: float = skeleton.DEFAULT_CUBE_HALF_EXTENT_MM) -> Pose3D:
    """Root-relative millimetres from any metric or normalized space."""
    if p.space == Space.NORMALIZED_CUBE:
        return skeleton.normalized_to_mm(p, cube_half_extent_mm)
    if p.space in (Space.MILLIMETRES_ROOT_RELATIVE, Space.MILLIMETRES_CAMERA):
        return Pose3D(skeleton.root_align_array(p.joints), Space.MILLIMETRES_ROOT_RELATIVE)
    raise ValueError(f"cannot evaluate poses in {p.space.value}; convert heatmap pixels first")


@dataclass
class EvalReport:
    mpjpe_mm: float
    pck: float
    auc: float
    per_joint_mpjpe_mm: dict
    procrustes_applied: bool
    joint_subset: list
    n_poses: int
    pck_threshold_mm: float = PCK_THRESHOLD_MM
    per_pose: list = field(default_factory=list, repr=False)

    def to_json(self, include_per_pose: bool = False) -> str:
        d = asdict(self)
        if not include_per_pose:
            d.pop("per_pose")
        return json.dumps(d, indent=2)

    def table(self) -> str:
        lines = [
            f"poses: {self.n_poses}   procrustes: {'yes' if self.procrustes_applied else 'no'}   joints: {len(self.joint_subset)}",
            f"{'joint':<12} {'MPJPE (mm)':>11}",
        ]
        for name, value in self.per_joint_mpjpe_mm.items():
            lines.append(f"{name:<12} {value:>11.2f}")
        lines.append("-" * 24)
        lines.append(f"{'MPJPE':<12} {self.mpjpe_mm:>11.2f}")
        lines.append(f"{'PCK@' + format(self.pck_threshold_mm, 'g'):<12} {self.pck:>11.2f}")
        lines.append(f"{'AUC':<12} {self.auc:>11.2f}")
        return "\n".join(lines)

    def csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["id", "mpjpe_mm", "pck", "auc"])
        for row in self.per_pose:
            writer.writerow([row["id"], f"{row['mpjpe_mm']:.6f}", f"{row['pck']:.6f}", f"{row['auc']:.6f}"])
        return buf.getvalue()


def evaluate_poses(
    preds,
    gts,
    ids=None,
    procrustes: bool = False,
    subset="eval14",
    thresholds=AUC_THRESHOLDS_MM,
    pck_threshold_mm: float = PCK_THRESHOLD_MM,
    universal: bool = False,
) -> EvalReport:
    """Score matched lists of poses; aggregates are unweighted means over poses."""
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions vs {len(gts)} ground-truth poses")
    idx = _subset(subset)
    ids = list(ids) if ids is not None else [str(i) for i in range(len(preds))]
    per_pose = []
    per_joint = []
    for pose_id, pred, gt in zip(ids, preds, gts):
        pred = to_metric(pred)
        gt = to_metric(gt)
        if universal:
            pred = skeleton.universal_scale(pred)
            gt = skeleton.universal_scale(gt)
        if procrustes:
            pred = procrustes_align(pred, gt, idx)
        err = joint_errors(pred, gt)
        per_joint.append(err)
        per_pose.append(
            {
                "id": pose_id,
                "mpjpe_mm": float(err[idx].mean()),
                "pck": float(100.0 * np.mean(err[idx] < pck_threshold_mm)),
                "auc": float(100.0 * np.mean(err[idx][:, None] < np.asarray(thresholds))),
            }
        )
    n = len(per_pose)
    if n == 0:
        raise ValueError("no poses to evaluate")
    per_joint = np.mean(per_joint, axis=0)
    return EvalReport(
        mpjpe_mm=sum(r["mpjpe_mm"] for r in per_pose) / n,
        pck=sum(r["pck"] for r in per_pose) / n,
        auc=sum(r["auc"] for r in per_pose) / n,
        per_joint_mpjpe_mm={JOINT_NAMES[j]: float(per_joint[j]) for j in idx},
        procrustes_applied=procrustes,
        joint_subset=[JOINT_NAMES[j] for j in idx],
        n_poses=n,
        pck_threshold_mm=pck_threshold_mm,
        per_pose=per_pose,
    )


def evaluate(pred_file, gt_file, procrustes: bool = False, subset="eval14", thresholds=AUC_THRESHOLDS_MM,
             universal: bool = False) -> EvalReport:
    """Evaluate two pose files, matching records by id."""
    preds = dict(skeleton.read_poses(pred_file))
    gts = skeleton.read_poses(gt_file)
    missing = [pid for pid, _ in gts if pid not in preds]
    if missing:
        raise ValueError(f"{pred_file}: no prediction for id(s) {missing[:5]}")
    ids = [pid for pid, _ in gts]
    return evaluate_poses(
        [preds[pid] for pid in ids], [g for _, g in gts], ids,
        procrustes=procrustes, subset=subset, thresholds=thresholds, universal=universal,
    )
