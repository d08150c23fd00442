"""Pose refinement by gradient descent on the self-supervision objective.

The 9 pose parameters (6 rotation + 3 translation) are optimized directly
against a single sensor frame and its pseudo labels.  Rotation and
translation get separate learning rates since their natural scales differ;
the translation rate is tied to the object diameter.  The loop returns the
best-scoring iterate rather than the last one, which guards against
late-iteration silhouette-gradient noise, and records a full per-iteration
trace for convergence analysis.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import LengthMismatch, NoOverlap, RenderfitError
from .features import FeaturePyramid
from .geometry import Pose, SymmetrySet, TriMesh, pos_neg_split
from .losses import (
    LossWeights,
    PseudoLabels,
    SensorFrame,
    build_sensor_cache,
    farthest_point_sample,
    self_loss,
)
from .metrics import rotation_angle_error, translation_error
from .render import RenderConfig, RenderOutput, render

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimConfig:
    """Refinement loop settings.

    ``lr_trans`` is multiplied by the object diameter, making the step size
    scale-invariant.  Convergence: relative loss improvement below
    ``convergence_tol`` for ``patience`` consecutive iterations.
    """

    max_iters: int = 500
    lr_rot6: float = 1e-2
    lr_trans: float = 1e-3   # x object diameter
    optimizer_kind: str = "adam"  # adam | gradient_descent
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    convergence_tol: float = 1e-5
    patience: int = 20
    log_every: int = 0

    def __post_init__(self):
        if self.max_iters < 1:
            raise RenderfitError("max_iters must be >= 1")
        if self.lr_rot6 <= 0 or self.lr_trans <= 0:
            raise RenderfitError("learning rates must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise RenderfitError("betas must be in (0, 1)")
        if self.optimizer_kind not in ("adam", "gradient_descent"):
            raise RenderfitError(f"unknown optimizer '{self.optimizer_kind}'")


@dataclass
class TraceRecord:
    iteration: int
    total: float
    terms: dict[str, float]
    rot_err_deg: float | None = None
    trans_err_m: float | None = None


@dataclass
class Trace:
    """Per-iteration loss/error records plus the refinement outcome."""

    records: list[TraceRecord] = field(default_factory=list)
    status: str = "converged"  # converged | max_iters | nonfinite

    def totals(self) -> np.ndarray:
        return np.array([r.total for r in self.records])

    def rot_errors(self) -> np.ndarray:
        return np.array(
            [r.rot_err_deg for r in self.records], dtype=np.float64
        )

    def term_names(self) -> list[str]:
        names: list[str] = []
        for r in self.records:
            for n in r.terms:
                if n not in names:
                    names.append(n)
        return names


class Adam:
    """Adam with per-parameter learning rates (bias-corrected)."""

    def __init__(self, lr: np.ndarray, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = np.asarray(lr, dtype=np.float64)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros_like(self.lr)
        self.v = np.zeros_like(self.lr)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad**2
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class GradientDescent:
    """Plain first-order baseline with the same interface."""

    def __init__(self, lr: np.ndarray):
        self.lr = np.asarray(lr, dtype=np.float64)

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return theta - self.lr * grad


def ema_update(
    teacher: np.ndarray, student: np.ndarray, momentum: float
) -> np.ndarray:
    """Exponential moving average: ``momentum * teacher + (1 - momentum) * student``.

    The teacher-update rule used in mean-teacher training (momentum 0.999
    by convention).  Operates on generic parameter vectors; it is not
    applied to the pose itself, which lives on a manifold.
    """
    teacher = np.asarray(teacher, dtype=np.float64)
    student = np.asarray(student, dtype=np.float64)
    if teacher.shape != student.shape:
        raise LengthMismatch(
            f"teacher shape {teacher.shape} != student shape {student.shape}"
        )
    if not 0.0 <= momentum <= 1.0:
        raise RenderfitError("momentum must be in [0, 1]")
    return momentum * teacher + (1.0 - momentum) * student


def _mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    pa, _ = pos_neg_split(a)
    pb, _ = pos_neg_split(b)
    union = int(np.sum(pa | pb))
    if union == 0:
        return 0.0
    return int(np.sum(pa & pb)) / union


def refine(
    init: Pose,
    mesh: TriMesh,
    sensor: SensorFrame,
    pseudo: PseudoLabels,
    w: LossWeights,
    rcfg: RenderConfig,
    ocfg: OptimConfig,
    *,
    rgb_only: bool = False,
    gt: Pose | None = None,
    sym: SymmetrySet | None = None,
    extractor: FeaturePyramid | None = None,
    ms_scales: int | str = "auto",
    pm_disentangled: bool = True,
    pm_max_points: int = 1024,
    lambda1_source: str = "amodal",
    min_overlap: float = 0.05,
    iteration_callback=None,
) -> tuple[Pose, Trace]:
    """Refine a pose against one frame by minimizing the self-supervision loss.

    Args:
        init: starting pose; must render with IoU >= ``min_overlap``
            against the positive visible pseudo mask.
        gt: optional ground truth; when given, per-iteration rotation and
            translation errors are recorded in the trace.
        iteration_callback: optional ``f(iteration, pose, render_out)`` hook
            (used for debug render dumps).

    Returns:
        (best pose, trace): the iterate with the lowest recorded total
        loss, never worse than the initial pose.

    Raises:
        NoOverlap: if the initial rendering misses the pseudo visible mask.
    """
    first = render(mesh, init, sensor.cam, rcfg)
    iou = _mask_iou(first.mask, pseudo.mask_vis)
    if iou < min_overlap:
        raise NoOverlap(
            f"initial render overlaps pseudo visible mask with IoU {iou:.3f} "
            f"< {min_overlap}"
        )

    lr = np.concatenate(
        [np.full(6, ocfg.lr_rot6), np.full(3, ocfg.lr_trans * mesh.diameter)]
    )
    if ocfg.optimizer_kind == "adam":
        opt = Adam(lr, ocfg.beta1, ocfg.beta2, ocfg.eps)
    else:
        opt = GradientDescent(lr)

    pm_points = farthest_point_sample(mesh.vertices, pm_max_points)
    sensor_cache = build_sensor_cache(sensor, pseudo.mask_vis, extractor, ms_scales)
    theta = init.params()
    best_theta = theta.copy()
    best_total = np.inf
    prev_total = None
    stall = 0
    trace = Trace()
    render_out: RenderOutput | None = first

    for it in range(ocfg.max_iters):
        pose = Pose.from_params(theta)
        if render_out is None:  # first iteration reuses the overlap render
            render_out = render(mesh, pose, sensor.cam, rcfg)
        report = self_loss(
            pose,
            mesh,
            sensor,
            pseudo,
            w,
            rcfg,
            rgb_only=rgb_only,
            sym=sym,
            extractor=extractor,
            ms_scales=ms_scales,
            pm_points=pm_points,
            pm_disentangled=pm_disentangled,
            lambda1_source=lambda1_source,
            render_out=render_out,
            sensor_cache=sensor_cache,
        )

        if not np.isfinite(report.total) or not np.all(np.isfinite(report.grad)):
            logger.warning("non-finite loss at iteration %d; aborting", it)
            trace.status = "nonfinite"
            break

        rec = TraceRecord(iteration=it, total=report.total, terms=dict(report.terms))
        if gt is not None:
            rec.rot_err_deg = rotation_angle_error(pose, gt)
            rec.trans_err_m = translation_error(pose, gt)
        trace.records.append(rec)
        if ocfg.log_every and it % ocfg.log_every == 0:
            logger.info("iter %d: total %.6f", it, report.total)
        if iteration_callback is not None:
            iteration_callback(it, pose, render_out)
        render_out = None

        if prev_total is not None:
            # improvement relative to the best loss seen so far; plain
            # previous-iterate comparison never settles because the
            # optimizer oscillates around the optimum
            improvement = (best_total - report.total) / max(abs(best_total), 1e-12)
            stall = stall + 1 if improvement < ocfg.convergence_tol else 0
        if report.total < best_total:
            best_total = report.total
            best_theta = theta.copy()
        if prev_total is not None and stall >= ocfg.patience:
            break
        prev_total = report.total

        theta = opt.step(theta, report.grad)
    else:
        if trace.status == "converged":
            trace.status = "max_iters"

    return Pose.from_params(best_theta), trace
