"""Standard 6D-pose and mask evaluation metrics.

Model points are the mesh vertices (no surface resampling).  All batch
metrics are pure functions of their inputs; errors are in meters unless
stated otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyList
from .geometry import Pose, SymmetrySet, TriMesh, pos_neg_split, transform_points

_BRUTE_FORCE_LIMIT = 512


@dataclass(frozen=True)
class PoseEstimate:
    """A predicted/ground-truth pose pair for one object instance."""

    pred: Pose
    gt: Pose
    mesh: TriMesh
    sym: SymmetrySet

    @property
    def diameter(self) -> float:
        return self.mesh.diameter


def e_add(est: PoseEstimate) -> float:
    """Average distance of corresponding model points (meters)."""
    p_gt = transform_points(est.gt, est.mesh.vertices)
    p_pred = transform_points(est.pred, est.mesh.vertices)
    return float(np.linalg.norm(p_gt - p_pred, axis=1).mean())


def e_add_s(est: PoseEstimate) -> float:
    """Average distance to the closest model point (meters).

    Exact nearest neighbors: brute force for small meshes, k-d tree above
    512 vertices.
    """
    p_gt = transform_points(est.gt, est.mesh.vertices)
    p_pred = transform_points(est.pred, est.mesh.vertices)
    if len(p_gt) <= _BRUTE_FORCE_LIMIT:
        d2 = np.sum((p_pred[:, None, :] - p_gt[None, :, :]) ** 2, axis=2)
        return float(np.sqrt(d2.min(axis=1)).mean())
    d, _ = cKDTree(p_gt).query(p_pred, k=1)
    return float(d.mean())


def add_recall(
    estimates: list[PoseEstimate],
    threshold_frac: float = 0.1,
    use_adds_for_sym: bool = True,
) -> float:
    """Percentage of estimates below ``threshold_frac`` of the diameter.

    With ``use_adds_for_sym``, objects carrying a non-trivial symmetry set
    are scored with the symmetric metric (ADD(-S) convention); otherwise
    every object uses plain ADD.
    """
    if not estimates:
        raise EmptyList("no estimates to score")
    if threshold_frac <= 0:
        raise ValueError("threshold_frac must be positive")
    hits = 0
    for est in estimates:
        err = (
            e_add_s(est)
            if use_adds_for_sym and not est.sym.is_trivial
            else e_add(est)
        )
        hits += err < threshold_frac * est.diameter
    return 100.0 * hits / len(estimates)


def auc(errors, max_threshold: float = 0.10) -> float:
    """Area under the accuracy-vs-threshold curve, as a percentage.

    Exact closed form of the integral of the empirical step curve from 0 to
    ``max_threshold``, normalized: the mean over samples of
    ``max(0, 1 - error / max_threshold)``.
    """
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        raise EmptyList("no errors to integrate")
    if max_threshold <= 0:
        raise ValueError("max_threshold must be positive")
    return float(np.mean(np.clip(1.0 - errors / max_threshold, 0.0, 1.0)) * 100.0)


def auc_sweep(errors, max_threshold: float = 0.10, steps: int = 1000) -> float:
    """Threshold-sweep cross-check of :func:`auc` (right-endpoint sum)."""
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        raise EmptyList("no errors to integrate")
    taus = max_threshold * (np.arange(1, steps + 1) / steps)
    acc = (errors[None, :] < taus[:, None]).mean(axis=1)
    return float(acc.mean() * 100.0)


def miou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mask intersection over union, in percent (100 if both empty)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    p, _ = pos_neg_split(pred)
    g, _ = pos_neg_split(gt)
    union = int(np.sum(p | g))
    if union == 0:
        return 100.0
    return 100.0 * int(np.sum(p & g)) / union


def rotation_angle_error(pred: Pose, gt: Pose) -> float:
    """Geodesic rotation distance in degrees."""
    R = pred.matrix().T @ gt.matrix()
    c = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.degrees(np.arccos(c)))


def translation_error(pred: Pose, gt: Pose) -> float:
    """Euclidean translation distance in meters."""
    return float(np.linalg.norm(pred.trans - gt.trans))
