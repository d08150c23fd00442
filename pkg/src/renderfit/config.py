"""Run configuration: strict JSON parsing with total unknown-key rejection.

Every section validates its keys before any computation happens, so a
misspelled option fails the run immediately with the offending key named.
All state flows through the config; no environment variables are read.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .geometry import Camera, Pose, SymmetrySet, load_symmetries
from .losses import LossWeights
from .optim import OptimConfig
from .render import RenderConfig
from .scenes import SceneSpec


def _check_keys(section: str, d: dict, allowed: set[str]) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(
            f"unknown key '{sorted(unknown)[0]}' in section '{section}'"
        )


def _camera(d: dict) -> Camera:
    _check_keys("camera", d, {"fx", "fy", "cx", "cy", "width", "height"})
    try:
        return Camera(
            fx=float(d["fx"]), fy=float(d["fy"]),
            cx=float(d["cx"]), cy=float(d["cy"]),
            width=int(d["width"]), height=int(d["height"]),
        )
    except KeyError as err:
        raise ConfigError(f"camera section missing key {err}") from err


def _render(d: dict) -> RenderConfig:
    _check_keys("render", d, {"sigma", "gamma", "background_color"})
    return RenderConfig(
        sigma=float(d.get("sigma", 3.0)),
        gamma=float(d.get("gamma", 0.05)),
        background_color=tuple(d.get("background_color", (0.0, 0.0, 0.0))),
    )


def _loss(d: dict) -> tuple[LossWeights, dict]:
    allowed = {f"lambda{i}" for i in range(1, 9)} | {
        "perceptual_seed", "ms_scales", "pm_disentangled", "pm_max_points",
        "lambda1_source",
    }
    _check_keys("loss", d, allowed)
    weights = LossWeights.from_dict(d)
    opts = {
        "perceptual_seed": int(d.get("perceptual_seed", 0)),
        "ms_scales": d.get("ms_scales", "auto"),
        "pm_disentangled": bool(d.get("pm_disentangled", True)),
        "pm_max_points": int(d.get("pm_max_points", 1024)),
        "lambda1_source": str(d.get("lambda1_source", "amodal")),
    }
    if opts["lambda1_source"] not in ("amodal", "visible"):
        raise ConfigError("loss.lambda1_source must be 'amodal' or 'visible'")
    return weights, opts


def _optim(d: dict) -> OptimConfig:
    allowed = {
        "max_iters", "lr_rot6", "lr_trans", "optimizer_kind",
        "beta1", "beta2", "eps", "convergence_tol", "patience", "log_every",
    }
    _check_keys("optim", d, allowed)
    return OptimConfig(**{k: d[k] for k in allowed if k in d})


def _pose(d: dict, section: str) -> Pose:
    _check_keys(section, d, {"rotation", "translation"})
    try:
        R = np.asarray(d["rotation"], dtype=np.float64)
        t = np.asarray(d["translation"], dtype=np.float64)
    except KeyError as err:
        raise ConfigError(f"{section} missing key {err}") from err
    return Pose.from_matrix(R, t)


def _scene(d: dict, cam: Camera) -> SceneSpec:
    allowed = {
        "mesh_kind", "face_coloring", "gt_pose", "noise", "occluder", "seed",
        "subdivisions", "mesh_path", "uniform_rgb",
        "pseudo_rot_deg", "pseudo_trans_frac",
    }
    _check_keys("scene", d, allowed)
    kwargs = dict(d)
    if "gt_pose" in kwargs:
        kwargs["gt_pose"] = _pose(kwargs["gt_pose"], "scene.gt_pose")
    if "noise" in kwargs:
        kwargs["noise"] = tuple(float(x) for x in kwargs["noise"])
    if "uniform_rgb" in kwargs:
        kwargs["uniform_rgb"] = tuple(float(x) for x in kwargs["uniform_rgb"])
    return SceneSpec(cam=cam, **kwargs)


@dataclass
class RunConfig:
    """Validated run configuration for every CLI command."""

    camera: Camera
    render: RenderConfig = field(default_factory=RenderConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss_opts: dict = field(default_factory=dict)
    scene: SceneSpec | None = None
    frames: list[str] = field(default_factory=list)
    mesh_kind: str = "unit_cube"
    mesh_path: str | None = None
    face_coloring: str = "distinct_faces"
    subdivisions: int = 1
    symmetries: SymmetrySet | None = None
    init_pose: Pose | None = None
    rgb_only: bool = False
    out_dir: str = "out"
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        top_allowed = {
            "camera", "render", "loss", "optim", "scene", "frames", "mesh",
            "symmetries", "init_pose", "rgb_only", "out_dir", "seed",
        }
        _check_keys("<top level>", d, top_allowed)
        if "camera" not in d:
            raise ConfigError("config requires a 'camera' section")
        cam = _camera(d["camera"])
        weights, loss_opts = _loss(d.get("loss", {}))

        mesh_kind, mesh_path = "unit_cube", None
        face_coloring, subdivisions = "distinct_faces", 1
        if "mesh" in d:
            _check_keys("mesh", d["mesh"], {"kind", "path", "coloring", "subdivisions"})
            mesh_kind = d["mesh"].get("kind", "unit_cube")
            mesh_path = d["mesh"].get("path")
            face_coloring = d["mesh"].get("coloring", "distinct_faces")
            subdivisions = int(d["mesh"].get("subdivisions", 1))
            if mesh_kind == "loaded" and not mesh_path:
                raise ConfigError("mesh.kind 'loaded' requires mesh.path")

        scene = _scene(d["scene"], cam) if "scene" in d else None
        if scene is not None and "scene" in d and "mesh_kind" not in d["scene"]:
            scene = SceneSpec(
                **{**scene.__dict__, "mesh_kind": mesh_kind,
                   "face_coloring": face_coloring, "subdivisions": subdivisions,
                   "mesh_path": mesh_path}
            )

        sym = None
        if "symmetries" in d:
            sym = load_symmetries(d["symmetries"])

        init_pose = _pose(d["init_pose"], "init_pose") if "init_pose" in d else None

        return cls(
            camera=cam,
            render=_render(d.get("render", {})),
            weights=weights,
            optim=_optim(d.get("optim", {})),
            loss_opts=loss_opts,
            scene=scene,
            frames=list(d.get("frames", [])),
            mesh_kind=mesh_kind,
            mesh_path=mesh_path,
            face_coloring=face_coloring,
            subdivisions=subdivisions,
            symmetries=sym,
            init_pose=init_pose,
            rgb_only=bool(d.get("rgb_only", False)),
            out_dir=str(d.get("out_dir", "out")),
            seed=int(d.get("seed", 0)),
        )

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                data = json.load(fh)
        except FileNotFoundError as err:
            raise ConfigError(f"config file not found: {path}") from err
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: invalid JSON: {err}") from err
        return cls.from_dict(data)

    def build_mesh(self):
        from .scenes import SceneSpec as _SS, build_mesh

        spec = self.scene or _SS(
            mesh_kind=self.mesh_kind,
            face_coloring=self.face_coloring,
            subdivisions=self.subdivisions,
            mesh_path=self.mesh_path,
            cam=self.camera,
        )
        return build_mesh(spec)
