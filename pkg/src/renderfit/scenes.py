"""Deterministic synthetic scene factory.

Stands in for real sensor data: renders a known mesh at a ground-truth
pose, corrupts color and depth with seeded noise, derives visible/amodal
pseudo masks (with an optional image-space occluder band), and produces
perturbed initializations.  Everything is a pure function of the spec and
its seed, so whole-pipeline properties are testable without datasets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyRendering, RenderfitError
from .geometry import Camera, Pose, TriMesh, axis_angle_matrix
from .losses import PseudoLabels, SensorFrame
from .render import RenderConfig, render

_OCCLUDER_COLOR = (0.35, 0.32, 0.3)


# ---------------------------------------------------------------------------
# mesh builders
# ---------------------------------------------------------------------------

_FACE_PALETTE = np.array(
    [
        [0.90, 0.10, 0.10],
        [0.10, 0.80, 0.10],
        [0.10, 0.20, 0.95],
        [0.95, 0.85, 0.10],
        [0.85, 0.10, 0.85],
        [0.10, 0.85, 0.85],
    ]
)


def unit_cube(coloring: str = "distinct_faces", rgb=(0.7, 0.7, 0.7)) -> TriMesh:
    """Axis-aligned cube with 1 m edges centered at the origin.

    ``distinct_faces`` gives every face a unique saturated color (vertices
    are duplicated per face), which makes the rotation visually
    unambiguous; ``gradient`` maps position to color on shared vertices;
    ``uniform`` paints everything with ``rgb``.
    """
    corners = np.array(
        [
            [-0.5, -0.5, -0.5],
            [+0.5, -0.5, -0.5],
            [+0.5, +0.5, -0.5],
            [-0.5, +0.5, -0.5],
            [-0.5, -0.5, +0.5],
            [+0.5, -0.5, +0.5],
            [+0.5, +0.5, +0.5],
            [-0.5, +0.5, +0.5],
        ]
    )
    quads = [
        [0, 1, 2, 3],  # z = -0.5
        [4, 7, 6, 5],  # z = +0.5
        [0, 4, 5, 1],  # y = -0.5
        [3, 2, 6, 7],  # y = +0.5
        [0, 3, 7, 4],  # x = -0.5
        [1, 5, 6, 2],  # x = +0.5
    ]
    if coloring == "distinct_faces":
        verts, faces, colors = [], [], []
        for qi, quad in enumerate(quads):
            base = len(verts)
            verts.extend(corners[quad])
            colors.extend([_FACE_PALETTE[qi]] * 4)
            faces.append([base, base + 1, base + 2])
            faces.append([base, base + 2, base + 3])
        return TriMesh(np.array(verts), np.array(faces), np.array(colors))

    faces = []
    for quad in quads:
        faces.append([quad[0], quad[1], quad[2]])
        faces.append([quad[0], quad[2], quad[3]])
    if coloring == "gradient":
        colors = np.clip(corners + 0.5, 0.0, 1.0)
    elif coloring == "uniform":
        colors = np.tile(np.asarray(rgb, dtype=np.float64), (8, 1))
    else:
        raise RenderfitError(f"unknown coloring '{coloring}'")
    return TriMesh(corners, np.array(faces), colors)


def icosphere(subdivisions: int = 1, coloring: str = "gradient") -> TriMesh:
    """Unit-diameter sphere from midpoint-subdivided icosahedron."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    for _ in range(subdivisions):
        mid_cache: dict[tuple[int, int], int] = {}
        new_faces = []
        vlist = list(verts)

        def midpoint(i: int, j: int) -> int:
            key = (min(i, j), max(i, j))
            if key not in mid_cache:
                m = vlist[i] + vlist[j]
                m /= np.linalg.norm(m)
                mid_cache[key] = len(vlist)
                vlist.append(m)
            return mid_cache[key]

        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]
        verts = np.array(vlist)
        faces = np.array(new_faces, dtype=np.int64)

    verts = verts * 0.5  # unit diameter
    if coloring == "gradient":
        colors = np.clip(verts + 0.5, 0.0, 1.0)
    elif coloring == "uniform":
        colors = np.full_like(verts, 0.7)
    else:
        raise RenderfitError(f"unknown coloring '{coloring}'")
    return TriMesh(verts, faces, colors)


# ---------------------------------------------------------------------------
# scene spec & synthesis
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SceneSpec:
    """Everything needed to deterministically synthesize one frame.

    ``noise`` is (color std, depth std in meters, depth dropout fraction);
    ``occluder`` masks that fraction of image columns from the left with a
    flat distractor.  ``pseudo_rot_deg`` / ``pseudo_trans_frac`` perturb
    the pseudo pose away from ground truth to emulate an imperfect teacher.
    """

    mesh_kind: str = "unit_cube"          # unit_cube | icosphere | loaded
    face_coloring: str = "distinct_faces"  # distinct_faces | gradient | uniform
    gt_pose: Pose = field(default_factory=lambda: Pose.identity())
    cam: Camera = field(default_factory=lambda: Camera(120.0, 120.0, 32.0, 32.0, 64, 64))
    noise: tuple[float, float, float] = (0.0, 0.0, 0.0)
    occluder: float | None = None
    seed: int = 0
    subdivisions: int = 1
    mesh_path: str | None = None
    uniform_rgb: tuple[float, float, float] = (0.7, 0.7, 0.7)
    pseudo_rot_deg: float = 0.0
    pseudo_trans_frac: float = 0.0

    def __post_init__(self):
        if any(x < 0 for x in self.noise):
            raise RenderfitError("noise parameters must be non-negative")
        if self.noise[2] >= 1:
            raise RenderfitError("dropout fraction must be < 1")
        if self.occluder is not None and not (0 <= self.occluder < 1):
            raise RenderfitError("occluder fraction must be in [0, 1)")


def build_mesh(spec: SceneSpec) -> TriMesh:
    """Instantiate the mesh a scene spec asks for."""
    if spec.mesh_kind == "unit_cube":
        return unit_cube(spec.face_coloring, spec.uniform_rgb)
    if spec.mesh_kind == "icosphere":
        coloring = "uniform" if spec.face_coloring == "uniform" else "gradient"
        return icosphere(spec.subdivisions, coloring)
    if spec.mesh_kind == "loaded":
        from .geometry import load_obj

        if spec.mesh_path is None:
            raise RenderfitError("mesh_kind 'loaded' requires mesh_path")
        return load_obj(spec.mesh_path)
    raise RenderfitError(f"unknown mesh_kind '{spec.mesh_kind}'")


def perturb_pose(
    pose: Pose,
    rot_deg: float,
    trans_frac_of_diameter: float,
    diameter: float,
    seed: int,
) -> Pose:
    """Compose a seeded random-axis rotation of exactly ``rot_deg`` degrees
    and a seeded random-direction translation of exactly
    ``trans_frac_of_diameter * diameter`` meters."""
    if rot_deg < 0 or trans_frac_of_diameter < 0:
        raise RenderfitError("perturbation magnitudes must be non-negative")
    rng = np.random.default_rng(seed)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    R = pose.matrix() @ axis_angle_matrix(axis, np.radians(rot_deg))
    t = pose.trans + direction * trans_frac_of_diameter * diameter
    return Pose.from_matrix(R, t)


def synthesize(
    spec: SceneSpec, rcfg: RenderConfig
) -> tuple[SensorFrame, PseudoLabels, Pose]:
    """Render a ground-truth frame and derive sensor data and pseudo labels.

    Sensor color is the rendering plus clamped Gaussian noise; sensor depth
    is the hard z-buffer (real sensors report hard depth) plus noise and
    seeded dropout.  The amodal pseudo mask is the binarized rendered
    silhouette; the visible mask additionally excludes the occluder band,
    whose sensor pixels are overwritten with a flat distractor color and
    zero depth.

    Returns:
        (sensor frame, pseudo labels, ground-truth pose).

    Raises:
        EmptyRendering: if the ground-truth pose yields no foreground.
    """
    mesh = build_mesh(spec)
    out = render(mesh, spec.gt_pose, spec.cam, rcfg, with_tape=False)
    amodal = (out.mask >= 0.5).astype(np.float64)
    if amodal.sum() == 0:
        raise EmptyRendering("ground-truth pose renders no foreground")

    rng = np.random.default_rng(spec.seed)
    color_std, depth_std, dropout = spec.noise

    color = out.color.copy()
    if color_std > 0:
        color = np.clip(color + rng.normal(0.0, color_std, color.shape), 0.0, 1.0)

    depth = out.depth_hard.copy()
    valid = depth > 0
    if depth_std > 0:
        noise = rng.normal(0.0, depth_std, depth.shape)
        depth = np.where(valid, np.maximum(depth + noise, 0.0), 0.0)
    if dropout > 0:
        drop = rng.random(depth.shape) < dropout
        depth = np.where(drop, 0.0, depth)

    vis = amodal.copy()
    if spec.occluder is not None and spec.occluder > 0:
        band = int(np.floor(spec.occluder * spec.cam.width))
        vis[:, :band] = 0.0
        color[:, :band] = _OCCLUDER_COLOR
        depth[:, :band] = 0.0

    pseudo_pose = spec.gt_pose
    if spec.pseudo_rot_deg > 0 or spec.pseudo_trans_frac > 0:
        pseudo_pose = perturb_pose(
            spec.gt_pose,
            spec.pseudo_rot_deg,
            spec.pseudo_trans_frac,
            mesh.diameter,
            seed=spec.seed + 1,
        )

    sensor = SensorFrame(color=color, depth=depth, cam=spec.cam)
    pseudo = PseudoLabels(pose=pseudo_pose, mask_vis=vis, mask_amodal=amodal)
    return sensor, pseudo, spec.gt_pose
