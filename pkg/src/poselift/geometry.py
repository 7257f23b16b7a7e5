"""Camera projection, Procrustes alignment and pose-evaluation metrics.

Poses are ``(N, 3)`` (or batched ``(B, N, 3)``) arrays in millimetres. All
metric functions accept either a single pose or a batch and average over
everything.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

DEFAULT_AUC_THRESHOLDS = tuple(float(t) for t in range(5, 155, 5))


class ProjectionError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


@dataclass
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64)
        if self.R.shape != (3, 3) or not np.allclose(self.R @ self.R.T, np.eye(3), atol=1e-9):
            raise ValueError("camera rotation must be a 3x3 orthonormal matrix")

    def to_camera(self, pose_world: np.ndarray) -> np.ndarray:
        return pose_world @ self.R.T + self.t

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


def project(pose_cam: np.ndarray, cam: CameraModel) -> np.ndarray:
    """Pinhole projection of camera-frame joints to pixels ``(u, v)``.

    ``u`` runs along image columns (x), ``v`` along rows (y).
    """
    pose_cam = np.asarray(pose_cam, dtype=np.float64)
    z = pose_cam[..., 2]
    bad = np.argwhere(z <= 0)
    if bad.size:
        raise ProjectionError(f"joint {tuple(int(i) for i in bad[0])} has nonpositive depth {z[tuple(bad[0])]}")
    u = cam.fx * pose_cam[..., 0] / z + cam.cx
    v = cam.fy * pose_cam[..., 1] / z + cam.cy
    return np.stack([u, v], axis=-1)


def project_world(pose_world: np.ndarray, cam: CameraModel) -> np.ndarray:
    return project(cam.to_camera(pose_world), cam)


def root_center(pose: np.ndarray, root: int = 0) -> np.ndarray:
    return pose - pose[..., root:root + 1, :]


def _check(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"joint count mismatch: pred {pred.shape} vs gt {gt.shape}")
    return pred, gt


def joint_errors(pred, gt, root: int = 0) -> np.ndarray:
    """Per-joint Euclidean error after aligning the roots."""
    pred, gt = _check(pred, gt)
    return np.linalg.norm(root_center(pred, root) - root_center(gt, root), axis=-1)


def mpjpe(pred, gt, root: int = 0) -> float:
    return float(joint_errors(pred, gt, root).mean())


def procrustes_align(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Best similarity transform (scale, proper rotation, translation) of ``pred`` onto ``gt``."""
    pred, gt = _check(pred, gt)
    if pred.ndim == 3:
        return np.stack([procrustes_align(p, g) for p, g in zip(pred, gt)])
    if pred.shape[0] < 3:
        raise AlignmentError("Procrustes alignment needs at least 3 joints")
    mu_p, mu_g = pred.mean(0), gt.mean(0)
    P, G = pred - mu_p, gt - mu_g
    if np.linalg.matrix_rank(G, tol=1e-9 * max(1.0, np.abs(G).max())) < 2:
        raise AlignmentError("degenerate ground truth: joints are collinear")
    norm_p = np.sqrt((P**2).sum())
    if norm_p < 1e-12:
        raise AlignmentError("degenerate prediction: all joints coincide")
    U, s, Vt = np.linalg.svd(P.T @ G)
    d = np.sign(np.linalg.det(U @ Vt))
    D = np.diag([1.0, 1.0, d])
    R = U @ D @ Vt
    scale = (s * np.diag(D)).sum() / norm_p**2
    return scale * P @ R + mu_g


def p_mpjpe(pred, gt) -> float:
    pred, gt = _check(pred, gt)
    aligned = procrustes_align(pred, gt)
    return float(np.linalg.norm(aligned - gt, axis=-1).mean())


def pck(pred, gt, threshold: float = 150.0, root: int = 0) -> float:
    """Fraction of joints whose root-aligned error is strictly below ``threshold`` mm."""
    return float((joint_errors(pred, gt, root) < threshold).mean())


def auc(pred, gt, thresholds=DEFAULT_AUC_THRESHOLDS, root: int = 0) -> float:
    thresholds = list(thresholds)
    if not thresholds:
        raise ValueError("auc needs at least one threshold")
    if any(b < a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("auc thresholds must be ascending")
    err = joint_errors(pred, gt, root)
    return float(np.mean([(err < t).mean() for t in thresholds]))


@dataclass
class MetricsReport:
    mpjpe: float
    p_mpjpe: float
    pck: float
    auc: float
    pck_threshold: float = 150.0
    auc_thresholds: list = field(default_factory=lambda: list(DEFAULT_AUC_THRESHOLDS))
    count: int = 0
    per_joint: list = field(default_factory=list)
    per_sample: list = field(default_factory=list)

    def to_text(self) -> str:
        lines = [
            f"count={self.count}",
            f"mpjpe={self.mpjpe:.6f}",
            f"p_mpjpe={self.p_mpjpe:.6f}",
            f"pck={self.pck:.6f}",
            f"pck_threshold={self.pck_threshold:g}",
            f"auc={self.auc:.6f}",
            "auc_thresholds=" + ",".join(f"{t:g}" for t in self.auc_thresholds),
        ]
        lines += [f"joint_{j}_mpjpe={e:.6f}" for j, e in enumerate(self.per_joint)]
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    def write(self, stem: str):
        with open(f"{stem}.txt", "w") as f:
            f.write(self.to_text())
        with open(f"{stem}.json", "w") as f:
            f.write(self.to_json())

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))


def evaluate(pred, gt, root: int = 0, pck_threshold: float = 150.0,
             auc_thresholds=DEFAULT_AUC_THRESHOLDS, with_procrustes: bool = True) -> MetricsReport:
    """All four metrics over a batch ``(B, N, 3)``."""
    pred, gt = _check(pred, gt)
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    err = joint_errors(pred, gt, root)
    pm = p_mpjpe(pred, gt) if with_procrustes else float("nan")
    return MetricsReport(
        mpjpe=float(err.mean()),
        p_mpjpe=pm,
        pck=float((err < pck_threshold).mean()),
        auc=auc(pred, gt, auc_thresholds, root),
        pck_threshold=pck_threshold,
        auc_thresholds=[float(t) for t in auc_thresholds],
        count=int(pred.shape[0]),
        per_joint=[float(e) for e in err.mean(axis=0)],
        per_sample=[float(e) for e in err.mean(axis=1)],
    )
