"""Core 3D types and projection math.

Conventions used throughout the package:

* Right-handed camera frame, +z in front of the camera, units of meters.
* Rotations act on column vectors, ``x_cam = R @ x_obj + t``.
* Pixel ``(row, col)`` has its center at continuous image coordinates
  ``(x, y) = (col + 0.5, row + 0.5)`` so projection and backprojection are
  exact inverses.
* Masks are plain ``(H, W)`` float arrays with values in ``[0, 1]``.

All types are immutable after construction and all functions are pure.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BehindCamera,
    DegenerateRotation,
    EmptyCloud,
    RenderfitError,
)

_EPS_PARALLEL = 1e-12
NEAR_PLANE = 1e-4


# ---------------------------------------------------------------------------
# rotation parametrization
# ---------------------------------------------------------------------------

def rot6_to_matrix(rot6: np.ndarray) -> np.ndarray:
    """Map a 6-parameter rotation to a proper rotation matrix.

    The first 3-vector is normalized to the first column, the second is
    Gram-Schmidt orthonormalized against it, and the third column is their
    cross product.  Continuous and singularity-free, which is why the
    refinement loop optimizes in this parametrization.

    Args:
        rot6: array-like of 6 scalars, two stacked 3-vectors.

    Returns:
        (3, 3) rotation matrix with ``R.T @ R = I`` and ``det R = +1``.

    Raises:
        DegenerateRotation: if either vector has near-zero norm or the two
            vectors are parallel.
    """
    r = np.asarray(rot6, dtype=np.float64).reshape(6)
    if not np.all(np.isfinite(r)):
        raise DegenerateRotation("rot6 contains non-finite values")
    a, b = r[:3], r[3:]
    na = np.linalg.norm(a)
    if na < _EPS_PARALLEL:
        raise DegenerateRotation(f"first rot6 vector has norm {na:.3e}")
    r1 = a / na
    u = b - np.dot(r1, b) * r1
    nu = np.linalg.norm(u)
    if nu < _EPS_PARALLEL or np.linalg.norm(b) < _EPS_PARALLEL:
        raise DegenerateRotation("rot6 vectors are parallel or second is zero")
    r2 = u / nu
    r3 = np.cross(r1, r2)
    return np.column_stack([r1, r2, r3])


def rot6_from_matrix(R: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rot6_to_matrix`: the first two columns, stacked."""
    R = np.asarray(R, dtype=np.float64).reshape(3, 3)
    return np.concatenate([R[:, 0], R[:, 1]])


def rot6_to_matrix_jac(rot6: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotation matrix and its analytic Jacobian w.r.t. the 6 parameters.

    Returns:
        (R, dR) where ``R`` is (3, 3) and ``dR`` is (3, 3, 6) with
        ``dR[:, :, k] = dR / d rot6[k]``.
    """
    r = np.asarray(rot6, dtype=np.float64).reshape(6)
    a, b = r[:3], r[3:]
    na = np.linalg.norm(a)
    if na < _EPS_PARALLEL:
        raise DegenerateRotation(f"first rot6 vector has norm {na:.3e}")
    r1 = a / na
    u = b - np.dot(r1, b) * r1
    nu = np.linalg.norm(u)
    if nu < _EPS_PARALLEL:
        raise DegenerateRotation("rot6 vectors are parallel")
    r2 = u / nu
    r3 = np.cross(r1, r2)

    # d r1 / d a = (I - r1 r1^T) / |a|;  d r1 / d b = 0
    P1 = (np.eye(3) - np.outer(r1, r1)) / na
    dr1 = np.zeros((3, 6))
    dr1[:, :3] = P1

    # u = b - (r1 . b) r1
    du = np.zeros((3, 6))
    rb = np.dot(r1, b)
    for k in range(3):
        dr1k = P1[:, k]
        du[:, k] = -np.dot(dr1k, b) * r1 - rb * dr1k
    du[:, 3:] = np.eye(3) - np.outer(r1, r1)

    P2 = (np.eye(3) - np.outer(r2, r2)) / nu
    dr2 = P2 @ du

    dr3 = np.cross(dr1.T, r2).T + np.cross(r1, dr2.T).T

    R = np.column_stack([r1, r2, r3])
    dR = np.stack([dr1, dr2, dr3], axis=1)  # (3, col, 6)
    return R, dR


# ---------------------------------------------------------------------------
# value types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Pose:
    """Rigid transform: 6-parameter rotation plus camera-frame translation."""

    rot6: np.ndarray
    trans: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rot6", np.asarray(self.rot6, dtype=np.float64).reshape(6))
        object.__setattr__(self, "trans", np.asarray(self.trans, dtype=np.float64).reshape(3))
        self.rot6.flags.writeable = False
        self.trans.flags.writeable = False

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.array([1.0, 0, 0, 0, 1.0, 0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, R: np.ndarray, t: np.ndarray) -> "Pose":
        return cls(rot6_from_matrix(R), np.asarray(t, dtype=np.float64))

    @classmethod
    def from_params(cls, theta: np.ndarray) -> "Pose":
        theta = np.asarray(theta, dtype=np.float64).reshape(9)
        return cls(theta[:6], theta[6:])

    def matrix(self) -> np.ndarray:
        """The (3, 3) rotation matrix."""
        return rot6_to_matrix(self.rot6)

    def params(self) -> np.ndarray:
        """The 9-vector (rot6, trans) the optimizer works on."""
        return np.concatenate([self.rot6, self.trans])

    def compose(self, other: "Pose") -> "Pose":
        """Composition: apply ``other`` first, then ``self``."""
        Ra, Rb = self.matrix(), other.matrix()
        return Pose.from_matrix(Ra @ Rb, Ra @ other.trans + self.trans)


@dataclass(frozen=True)
class Camera:
    """Pinhole intrinsics and image size (pixels)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise RenderfitError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise RenderfitError("image dimensions must be >= 1")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


def _max_pairwise_distance(pts: np.ndarray) -> float:
    """Exact max pairwise distance, chunked so memory stays bounded."""
    n = len(pts)
    best = 0.0
    step = max(1, 2 ** 22 // max(n, 1))
    for i0 in range(0, n, step):
        block = pts[i0 : i0 + step]
        d2 = np.sum((block[:, None, :] - pts[None, :, :]) ** 2, axis=-1)
        best = max(best, float(d2.max()))
    return float(np.sqrt(best))


@dataclass(frozen=True)
class TriMesh:
    """Watertight triangle mesh with per-vertex colors, object frame, meters."""

    vertices: np.ndarray
    faces: np.ndarray
    vertex_colors: np.ndarray
    diameter: float = field(default=0.0)

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3))
        f = np.ascontiguousarray(np.asarray(self.faces, dtype=np.int64).reshape(-1, 3))
        c = np.ascontiguousarray(np.asarray(self.vertex_colors, dtype=np.float64).reshape(-1, 3))
        if not np.all(np.isfinite(v)):
            raise RenderfitError("mesh vertices contain non-finite values")
        if len(c) != len(v):
            raise RenderfitError(
                f"vertex_colors length {len(c)} != vertex count {len(v)}"
            )
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise RenderfitError("face index out of range")
        degen = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        if np.any(degen):
            raise RenderfitError(
                f"{int(degen.sum())} degenerate face(s) with repeated vertex indices"
            )
        diam = self.diameter if self.diameter > 0 else _max_pairwise_distance(v)
        for name, arr in (("vertices", v), ("faces", f), ("vertex_colors", c)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "diameter", diam)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)


def _check_rotation(R: np.ndarray, tol: float = 1e-9) -> None:
    if np.abs(R.T @ R - np.eye(3)).max() > tol or abs(np.linalg.det(R) - 1.0) > tol:
        raise RenderfitError("matrix is not a proper rotation")


@dataclass(frozen=True)
class SymmetrySet:
    """Finite set of object-frame rotations mapping the object onto itself.

    Element 0 is always the identity.  Continuous symmetries must be
    discretized by the caller at whatever density the application needs.
    """

    rotations: np.ndarray

    def __post_init__(self):
        rots = np.asarray(self.rotations, dtype=np.float64).reshape(-1, 3, 3)
        if len(rots) == 0:
            raise RenderfitError("symmetry set must be non-empty")
        for R in rots:
            _check_rotation(R)
        if np.abs(rots[0] - np.eye(3)).max() > 1e-9:
            rots = np.concatenate([np.eye(3)[None], rots], axis=0)
        rots = np.ascontiguousarray(rots)
        rots.flags.writeable = False
        object.__setattr__(self, "rotations", rots)

    @classmethod
    def trivial(cls) -> "SymmetrySet":
        return cls(np.eye(3)[None])

    @classmethod
    def cyclic(cls, axis: np.ndarray, order: int) -> "SymmetrySet":
        """Discrete rotational symmetry of the given order about ``axis``."""
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        rots = [axis_angle_matrix(axis, 2 * np.pi * k / order) for k in range(order)]
        return cls(np.stack(rots))

    @property
    def is_trivial(self) -> bool:
        return len(self.rotations) == 1


def axis_angle_matrix(axis: np.ndarray, angle_rad: float) -> np.ndarray:
    """Rodrigues rotation about a unit axis."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = np.array(
        [
            [0.0, -axis[2], axis[1]],
            [axis[2], 0.0, -axis[0]],
            [-axis[1], axis[0], 0.0],
        ]
    )
    return np.eye(3) + np.sin(angle_rad) * K + (1 - np.cos(angle_rad)) * (K @ K)


# ---------------------------------------------------------------------------
# projections
# ---------------------------------------------------------------------------

def transform_points(pose: Pose, pts: np.ndarray) -> np.ndarray:
    """Apply ``R x + t`` to an (N, 3) array of points."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    return pts @ pose.matrix().T + pose.trans


def project(cam: Camera, pt_cam: np.ndarray) -> np.ndarray:
    """Project a camera-frame point to continuous pixel coordinates.

    Raises:
        BehindCamera: if ``z <= 1e-9``.
    """
    p = np.asarray(pt_cam, dtype=np.float64).reshape(3)
    if p[2] <= 1e-9:
        raise BehindCamera(f"point z = {p[2]:.3e} is not in front of the camera")
    return np.array(
        [cam.fx * p[0] / p[2] + cam.cx, cam.fy * p[1] / p[2] + cam.cy]
    )


def backproject(
    depth: np.ndarray,
    mask: np.ndarray,
    cam: Camera,
    threshold: float = 0.5,
    return_pixels: bool = False,
):
    """Lift masked depth pixels into a camera-frame point cloud.

    A pixel ``(row, col)`` with depth ``d > 0`` and mask value above
    ``threshold`` yields ``d * K^-1 (col + 0.5, row + 0.5, 1)``.

    Args:
        depth: (H, W) depth map in meters, 0 meaning invalid.
        mask: (H, W) mask selecting pixels.
        cam: intrinsics.
        threshold: mask binarization threshold.
        return_pixels: also return the flat pixel indices of each point.

    Returns:
        (N, 3) points, or ``(points, flat_indices)`` if ``return_pixels``.

    Raises:
        EmptyCloud: if no pixel qualifies.
    """
    depth = np.asarray(depth, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if depth.shape != mask.shape:
        raise RenderfitError(
            f"depth shape {depth.shape} != mask shape {mask.shape}"
        )
    keep = (mask >= threshold) & (depth > 0)
    idx = np.flatnonzero(keep)
    if idx.size == 0:
        raise EmptyCloud("no masked pixel with positive depth")
    rows, cols = np.unravel_index(idx, depth.shape)
    d = depth.reshape(-1)[idx]
    x = (cols + 0.5 - cam.cx) / cam.fx
    y = (rows + 0.5 - cam.cy) / cam.fy
    pts = np.stack([x * d, y * d, d], axis=1)
    if return_pixels:
        return pts, idx
    return pts


def pos_neg_split(
    mask: np.ndarray, threshold: float = 0.5
) -> tuple[np.ndarray, np.ndarray]:
    """Split a mask into positive (``>= threshold``) and negative pixels.

    Returns two boolean (H, W) arrays that are disjoint and cover the image.
    """
    mask = np.asarray(mask, dtype=np.float64)
    pos = mask >= threshold
    return pos, ~pos


# ---------------------------------------------------------------------------
# mesh / symmetry ingestion
# ---------------------------------------------------------------------------

def load_obj(path: str) -> TriMesh:
    """Load a Wavefront OBJ subset: ``v x y z [r g b]`` and triangle ``f`` lines.

    Vertex colors default to 0.7 gray when the file carries none.  Face
    indices are 1-based; ``v/vt/vn`` tokens keep only the vertex index.
    Any other line type is ignored.
    """
    verts: list[list[float]] = []
    colors: list[list[float]] = []
    faces: list[list[int]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            parts = raw.split()
            if not parts:
                continue
            if parts[0] == "v":
                if len(parts) not in (4, 7):
                    raise RenderfitError(
                        f"{path}:{lineno}: vertex line needs 3 or 6 numbers"
                    )
                verts.append([float(x) for x in parts[1:4]])
                if len(parts) == 7:
                    colors.append([float(x) for x in parts[4:7]])
                else:
                    colors.append([0.7, 0.7, 0.7])
            elif parts[0] == "f":
                if len(parts) != 4:
                    raise RenderfitError(
                        f"{path}:{lineno}: only triangle faces are supported"
                    )
                faces.append([int(tok.split("/")[0]) - 1 for tok in parts[1:]])
    return TriMesh(np.array(verts), np.array(faces, dtype=np.int64), np.array(colors))


def load_symmetries(path: str) -> SymmetrySet:
    """Load a JSON array of 3x3 row-major rotation matrices."""
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    rots = np.asarray(data, dtype=np.float64)
    if rots.ndim != 3 or rots.shape[1:] != (3, 3):
        raise RenderfitError(f"{path}: expected an array of 3x3 matrices")
    return SymmetrySet(rots)
