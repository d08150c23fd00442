"""Self-supervision loss stack for render-and-compare pose refinement.

Every loss returns its scalar value together with the gradient information
needed to descend on the 9 pose parameters: either a direct 9-vector (point
matching) or cotangent maps that :meth:`RenderOutput.pose_grad` chains
through the renderer (mask, color, structural, perceptual, chamfer terms).

The weighted composite mirrors the standard occlusion-aware formulation:

* reweighted cross-entropy between pseudo and rendered/predicted masks,
* chroma-only color coherence in CIELAB space,
* multi-scale SSIM and a feature-pyramid perceptual distance on the
  visibility-masked images,
* a symmetry-aware point-matching loss between predicted and pseudo poses
  (optionally disentangled into rotation / image-plane / depth parts),
* a two-sided chamfer distance between the backprojected sensor and
  rendered depth clouds (RGB-D only).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d
from scipy.spatial import cKDTree

from .colorspace import rgb_to_ab, rgb_to_ab_jac
from .errors import (
    EmptyCloud,
    EmptyRegion,
    MissingDepth,
    RenderfitError,
    ShapeMismatch,
    TooSmall,
)
from .features import FeaturePyramid, normalize_channels, normalize_channels_vjp
from .geometry import (
    Camera,
    Pose,
    SymmetrySet,
    TriMesh,
    backproject,
    pos_neg_split,
    rot6_to_matrix_jac,
)
from .render import RenderConfig, RenderOutput, render

logger = logging.getLogger(__name__)

_CLAMP_EPS = 1e-7
_BRUTE_FORCE_LIMIT = 512 * 512


# ---------------------------------------------------------------------------
# containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossWeights:
    """Weights lambda1..lambda8 of the composite objective.

    Defaults keep the individual contributions in a similar range on the
    synthetic reference scene; they are plain config values, overridable
    per run.  Setting ``lam8 = 0`` (with ``rgb_only``) gives the depth-free
    objective.
    """

    lam1: float = 1.0   # rwce(pseudo amodal, rendered mask)
    lam2: float = 1.0   # rwce(pseudo amodal, predicted amodal)  [diagnostic]
    lam3: float = 1.0   # rwce(pseudo visible, predicted visible) [diagnostic]
    lam4: float = 1.0   # chroma coherence
    lam5: float = 1.0   # MS-SSIM
    lam6: float = 0.15  # perceptual
    lam7: float = 1.0   # point matching
    lam8: float = 10.0  # chamfer

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            if getattr(self, name) < 0:
                raise RenderfitError(f"{name} must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        return cls(**{f"lam{i}": float(d[f"lambda{i}"]) for i in range(1, 9) if f"lambda{i}" in d})

    def to_dict(self) -> dict:
        return {f"lambda{i}": getattr(self, f"lam{i}") for i in range(1, 9)}


@dataclass(frozen=True)
class PseudoLabels:
    """Teacher-side pseudo labels: pose and visible/amodal masks."""

    pose: Pose
    mask_vis: np.ndarray
    mask_amodal: np.ndarray

    def __post_init__(self):
        mv = np.asarray(self.mask_vis, dtype=np.float64)
        ma = np.asarray(self.mask_amodal, dtype=np.float64)
        if mv.shape != ma.shape:
            raise ShapeMismatch("visible and amodal masks differ in shape")
        pos_v, _ = pos_neg_split(mv)
        pos_a, _ = pos_neg_split(ma)
        if np.any(pos_v & ~pos_a):
            raise RenderfitError("visible mask exceeds amodal mask")
        object.__setattr__(self, "mask_vis", mv)
        object.__setattr__(self, "mask_amodal", ma)


@dataclass(frozen=True)
class SensorFrame:
    """Observed RGB image, optional depth map and intrinsics."""

    color: np.ndarray
    depth: np.ndarray | None
    cam: Camera

    def __post_init__(self):
        c = np.asarray(self.color, dtype=np.float64)
        if c.ndim != 3 or c.shape[2] != 3:
            raise ShapeMismatch(f"color must be (H, W, 3), got {c.shape}")
        object.__setattr__(self, "color", c)
        if self.depth is not None:
            d = np.asarray(self.depth, dtype=np.float64)
            if d.shape != c.shape[:2]:
                raise ShapeMismatch("depth shape does not match color")
            if not np.all(np.isfinite(d)) or d.min() < 0:
                raise RenderfitError("depth must be finite and non-negative")
            object.__setattr__(self, "depth", d)


@dataclass
class LossReport:
    """Named weighted loss terms, their total, and the pose gradient."""

    terms: dict[str, float]
    total: float
    grad: np.ndarray = field(default_factory=lambda: np.zeros(9))

    @staticmethod
    def csv_header(term_names) -> list[str]:
        return ["total"] + [f"term:{n}" for n in term_names]

    def csv_row(self, term_names) -> list[float]:
        return [self.total] + [self.terms.get(n, 0.0) for n in term_names]


# ---------------------------------------------------------------------------
# mask losses
# ---------------------------------------------------------------------------

def rwce(pseudo: np.ndarray, pred: np.ndarray) -> tuple[float, np.ndarray]:
    """Reweighted cross entropy between a pseudo mask and a predicted mask.

    Positive and negative regions of the pseudo mask are averaged
    separately, which rebalances their contributions regardless of object
    size.  Predicted values are clamped to ``[1e-7, 1 - 1e-7]`` before the
    logs; the gradient is the exact derivative of the clamped expression
    (zero where the clamp is active).

    Returns:
        (value, grad) with ``grad`` the (H, W) derivative w.r.t. ``pred``.

    Raises:
        EmptyRegion: if the pseudo mask has no positive or no negative
            pixels.
    """
    pseudo = np.asarray(pseudo, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if pseudo.shape != pred.shape:
        raise ShapeMismatch(f"mask shapes differ: {pseudo.shape} vs {pred.shape}")
    pos, neg = pos_neg_split(pseudo)
    n_pos, n_neg = int(pos.sum()), int(neg.sum())
    if n_pos == 0 or n_neg == 0:
        raise EmptyRegion(f"degenerate pseudo mask: |Pos|={n_pos}, |Neg|={n_neg}")

    clamped = np.clip(pred, _CLAMP_EPS, 1.0 - _CLAMP_EPS)
    value = (
        -np.sum(pseudo[pos] * np.log(clamped[pos])) / n_pos
        - np.sum(np.log1p(-clamped[neg])) / n_neg
    )
    active = (pred > _CLAMP_EPS) & (pred < 1.0 - _CLAMP_EPS)
    grad = np.zeros_like(pred)
    gp = pos & active
    gn = neg & active
    grad[gp] = -pseudo[gp] / clamped[gp] / n_pos
    grad[gn] = 1.0 / (1.0 - clamped[gn]) / n_neg
    return float(value), grad


def mask_loss(
    pseudo: PseudoLabels,
    pred_vis: np.ndarray,
    pred_amodal: np.ndarray,
    rendered: np.ndarray,
    w: LossWeights,
    lambda1_source: str = "amodal",
) -> tuple[float, np.ndarray, dict[str, float]]:
    """Combined mask objective.

    Only the rendered-mask term backpropagates to the pose; the two
    predicted-mask terms are diagnostics (their trainable target is an
    external network).  ``lambda1_source`` selects which pseudo mask
    supervises the rendered silhouette: ``"amodal"`` (occlusion-robust
    default) or ``"visible"`` (ablation configuration).

    Returns:
        (value, grad_rendered, weighted term dict).
    """
    src = pseudo.mask_amodal if lambda1_source == "amodal" else pseudo.mask_vis
    v1, g1 = rwce(src, rendered)
    v2, _ = rwce(pseudo.mask_amodal, pred_amodal)
    v3, _ = rwce(pseudo.mask_vis, pred_vis)
    terms = {
        "mask_render": w.lam1 * v1,
        "mask_amodal": w.lam2 * v2,
        "mask_vis": w.lam3 * v3,
    }
    value = sum(terms.values())
    return value, w.lam1 * g1, terms


# ---------------------------------------------------------------------------
# color / structural / perceptual losses
# ---------------------------------------------------------------------------

def lab_loss(
    sensor_color: np.ndarray,
    rendered_color: np.ndarray,
    mask_vis: np.ndarray,
) -> tuple[float, np.ndarray]:
    """Chroma coherence on the visible region.

    L1 distance between the mask-scaled sensor chroma and the rendered
    chroma (CIELAB a/b channels), averaged over Pos(mask).

    Returns:
        (value, grad) with ``grad`` the (H, W, 3) derivative w.r.t. the
        rendered color.
    """
    sensor_color = np.asarray(sensor_color, dtype=np.float64)
    rendered_color = np.asarray(rendered_color, dtype=np.float64)
    mask_vis = np.asarray(mask_vis, dtype=np.float64)
    if sensor_color.shape != rendered_color.shape:
        raise ShapeMismatch("sensor and rendered color shapes differ")
    pos, _ = pos_neg_split(mask_vis)
    n_pos = int(pos.sum())
    if n_pos == 0:
        raise EmptyRegion("visible pseudo mask has no positive pixels")

    ab_s = rgb_to_ab(sensor_color[pos])
    ab_r, jac_r = rgb_to_ab_jac(rendered_color[pos])
    diff = ab_s * mask_vis[pos][:, None] - ab_r
    value = float(np.sum(np.abs(diff)) / n_pos)
    sgn = np.sign(diff)
    grad_pos = -np.einsum("pc,pcr->pr", sgn, jac_r) / n_pos
    grad = np.zeros_like(rendered_color)
    grad[pos] = grad_pos
    return value, grad


_MS_WEIGHTS = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333])
_SSIM_C1 = 0.01**2
_SSIM_C2 = 0.03**2
_SSIM_WIN = 11
_SSIM_HALF = _SSIM_WIN // 2


def _gauss_kernel(size: int = _SSIM_WIN, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(x**2) / (2.0 * sigma**2))
    return k / k.sum()


_GK = _gauss_kernel()


def _gfilt(x: np.ndarray) -> np.ndarray:
    """Separable 11x11 Gaussian, valid region only."""
    y = correlate1d(x, _GK, axis=0, mode="constant")
    y = correlate1d(y, _GK, axis=1, mode="constant")
    return y[_SSIM_HALF:-_SSIM_HALF, _SSIM_HALF:-_SSIM_HALF]


def _gfilt_adj(g: np.ndarray, shape) -> np.ndarray:
    """Adjoint of :func:`_gfilt` (kernel is symmetric)."""
    buf = np.zeros(shape)
    buf[_SSIM_HALF:-_SSIM_HALF, _SSIM_HALF:-_SSIM_HALF] = g
    y = correlate1d(buf, _GK, axis=0, mode="constant")
    return correlate1d(y, _GK, axis=1, mode="constant")


def _pool2(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[:2]
    he, we = (h // 2) * 2, (w // 2) * 2
    v = x[:he, :we]
    return v.reshape(he // 2, 2, we // 2, 2, -1).mean(axis=(1, 3)).reshape(
        he // 2, we // 2, *x.shape[2:]
    )


def _pool2_adj(g: np.ndarray, shape) -> np.ndarray:
    out = np.zeros(shape)
    gq = np.repeat(np.repeat(g, 2, axis=0), 2, axis=1) / 4.0
    out[: gq.shape[0], : gq.shape[1]] = gq
    return out


def _ms_pyramid(a: np.ndarray, scales: int) -> list[dict]:
    """Per-scale images and Gaussian statistics of the constant input."""
    pyr = []
    aj = a
    for j in range(scales):
        mu_a = _gfilt(aj)
        s_aa = _gfilt(aj * aj) - mu_a**2
        pyr.append(dict(a=aj, mu_a=mu_a, s_aa=s_aa))
        if j < scales - 1:
            aj = _pool2(aj)
    return pyr


def ms_ssim_loss(
    sensor_masked: np.ndarray,
    rendered: np.ndarray,
    scales: int = 5,
    a_pyramid: list[dict] | None = None,
) -> tuple[float, np.ndarray]:
    """1 - MS-SSIM between the masked sensor image and the rendered image.

    Standard construction: 11x11 Gaussian window (sigma 1.5), constants
    C1 = 0.01^2 and C2 = 0.03^2, contrast-structure means at every scale,
    the luminance term at the coarsest scale only, per-scale exponents
    (0.0448, 0.2856, 0.3001, 0.2363, 0.1333) truncated to ``scales``, and
    dyadic 2x2 mean-pool downsampling.  Negative scale means are clamped
    at zero (with zero gradient), as is conventional.

    Returns:
        (value, grad) with ``grad`` the derivative w.r.t. ``rendered``.

    Raises:
        TooSmall: if ``min(H, W) < 11 * 2**(scales - 1)``.
    """
    a = np.asarray(sensor_masked, dtype=np.float64)
    b = np.asarray(rendered, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    if not 1 <= scales <= 5:
        raise RenderfitError("scales must be between 1 and 5")
    need = _SSIM_WIN * 2 ** (scales - 1)
    if min(a.shape[:2]) < need:
        raise TooSmall(
            f"{a.shape[1]}x{a.shape[0]} too small for {scales} scales "
            f"(needs >= {need} px per side)"
        )

    if a_pyramid is None:
        a_pyramid = _ms_pyramid(a, scales)
    packs = []
    terms = np.zeros(scales)
    bj = b
    for j in range(scales):
        aj = a_pyramid[j]["a"]
        mu_a, s_aa = a_pyramid[j]["mu_a"], a_pyramid[j]["s_aa"]
        mu_b = _gfilt(bj)
        s_bb = _gfilt(bj * bj) - mu_b**2
        s_ab = _gfilt(aj * bj) - mu_a * mu_b
        v1 = 2.0 * s_ab + _SSIM_C2
        v2 = s_aa + s_bb + _SSIM_C2
        cs = v1 / v2
        pack = dict(a=aj, b=bj, mu_a=mu_a, mu_b=mu_b, v1=v1, v2=v2, cs=cs)
        if j == scales - 1:
            u1 = 2.0 * mu_a * mu_b + _SSIM_C1
            u2 = mu_a**2 + mu_b**2 + _SSIM_C1
            lum = u1 / u2
            pack.update(u1=u1, u2=u2, lum=lum)
            terms[j] = max(float((lum * cs).mean()), 0.0)
        else:
            terms[j] = max(float(cs.mean()), 0.0)
        packs.append(pack)
        if j < scales - 1:
            bj = _pool2(bj)

    weights = _MS_WEIGHTS[:scales]
    if np.any(terms == 0.0):
        # flat region of the clamp: value 0, subgradient 0
        return 1.0, np.zeros_like(b).reshape(rendered.shape)

    value = float(np.prod(terms**weights))
    dterm = -value * weights / terms  # d(1 - msssim)/d term_j

    grad_next = None  # gradient w.r.t. b_{j+1}, flows back through pooling
    for j in range(scales - 1, -1, -1):
        p = packs[j]
        n = p["cs"].size
        if j == scales - 1:
            cot_cs = dterm[j] * p["lum"] / n
            cot_lum = dterm[j] * p["cs"] / n
        else:
            cot_cs = np.full_like(p["cs"], dterm[j] / n)
            cot_lum = None

        cot_sab = cot_cs * 2.0 / p["v2"]
        cot_sbb = cot_cs * (-p["v1"] / p["v2"] ** 2)
        cot_mub = -p["mu_a"] * cot_sab - 2.0 * p["mu_b"] * cot_sbb
        if cot_lum is not None:
            cot_mub += cot_lum * (
                2.0 * p["mu_a"] * p["u2"] - p["u1"] * 2.0 * p["mu_b"]
            ) / p["u2"] ** 2

        shape = p["b"].shape
        g_bj = (
            _gfilt_adj(cot_mub, shape)
            + p["a"] * _gfilt_adj(cot_sab, shape)
            + 2.0 * p["b"] * _gfilt_adj(cot_sbb, shape)
        )
        if grad_next is not None:
            g_bj += _pool2_adj(grad_next, shape)
        grad_next = g_bj

    return 1.0 - value, grad_next.reshape(rendered.shape)


_EXTRACTOR_CACHE: dict[int, FeaturePyramid] = {}


def default_extractor(seed: int = 0) -> FeaturePyramid:
    """Shared per-seed feature pyramid instance."""
    if seed not in _EXTRACTOR_CACHE:
        _EXTRACTOR_CACHE[seed] = FeaturePyramid(seed)
    return _EXTRACTOR_CACHE[seed]


def perceptual_loss(
    sensor_masked: np.ndarray,
    rendered: np.ndarray,
    extractor: FeaturePyramid | None = None,
    a_normed: list[np.ndarray] | None = None,
) -> tuple[float, np.ndarray]:
    """Mean squared distance between channel-normalized feature pyramids.

    Per level: unit-normalize each pixel's channel vector, take the squared
    L2 distance, average spatially; sum the five levels.  ``a_normed`` can
    carry the precomputed normalized features of the constant input.

    Returns:
        (value, grad) with ``grad`` the derivative w.r.t. ``rendered``.
    """
    a = np.asarray(sensor_masked, dtype=np.float64)
    b = np.asarray(rendered, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    ex = extractor or default_extractor()

    if a_normed is None:
        a_normed = [normalize_channels(fa) for fa in ex.forward(a)]
    feats_b, vjp = ex.forward_vjp(b)
    value = 0.0
    cots: list[np.ndarray | None] = []
    for na, fb in zip(a_normed, feats_b):
        nb = normalize_channels(fb)
        diff = nb - na
        npix = fb.shape[0] * fb.shape[1]
        value += float(np.sum(diff**2) / npix)
        g_nb = 2.0 * diff / npix
        cots.append(normalize_channels_vjp(fb, g_nb))
    return value, vjp(cots)


def resolve_ms_scales(requested: int | str, height: int, width: int) -> int:
    """Resolve ``"auto"`` to the largest scale count the resolution allows."""
    if requested == "auto":
        return max(1, min(5, int(np.log2(min(height, width) / _SSIM_WIN)) + 1))
    return int(requested)


@dataclass
class SensorCache:
    """Precomputed constant-side inputs, reused across refinement iterations."""

    masked: np.ndarray
    a_pyramid: list[dict]
    a_normed: list[np.ndarray]
    scales: int


def build_sensor_cache(
    sensor: SensorFrame,
    mask_vis: np.ndarray,
    extractor: FeaturePyramid | None = None,
    ms_scales: int | str = "auto",
) -> SensorCache:
    """Precompute the masked image, its SSIM pyramid and its features."""
    h, w_img = sensor.color.shape[:2]
    scales = resolve_ms_scales(ms_scales, h, w_img)
    masked = sensor.color * np.asarray(mask_vis, dtype=np.float64)[:, :, None]
    ex = extractor or default_extractor()
    return SensorCache(
        masked=masked,
        a_pyramid=_ms_pyramid(masked, scales),
        a_normed=[normalize_channels(f) for f in ex.forward(masked)],
        scales=scales,
    )


def visual_loss(
    sensor: SensorFrame,
    rendered: RenderOutput,
    pseudo: PseudoLabels,
    w: LossWeights,
    *,
    extractor: FeaturePyramid | None = None,
    ms_scales: int | str = "auto",
    lambda1_source: str = "amodal",
    pred_vis: np.ndarray | None = None,
    pred_amodal: np.ndarray | None = None,
    sensor_cache: SensorCache | None = None,
) -> tuple[float, dict[str, float], np.ndarray, np.ndarray]:
    """Weighted visual composite: masks + chroma + MS-SSIM + perceptual.

    A component whose pseudo-mask region is degenerate is dropped with a
    logged warning rather than failing the whole evaluation.

    Returns:
        (value, weighted terms, d_color, d_mask) where the cotangent maps
        are ready for :meth:`RenderOutput.pose_grad`.
    """
    h, w_img = rendered.mask.shape
    d_color = np.zeros((h, w_img, 3))
    d_mask = np.zeros((h, w_img))
    terms: dict[str, float] = {}

    pv = pseudo.mask_vis if pred_vis is None else pred_vis
    pa = pseudo.mask_amodal if pred_amodal is None else pred_amodal
    try:
        _, g_mask, mask_terms = mask_loss(
            pseudo, pv, pa, rendered.mask, w, lambda1_source=lambda1_source
        )
        terms.update(mask_terms)
        d_mask += g_mask
    except EmptyRegion as err:
        logger.warning("dropping mask term: %s", err)

    try:
        v_ab, g_ab = lab_loss(sensor.color, rendered.color, pseudo.mask_vis)
        terms["ab"] = w.lam4 * v_ab
        d_color += w.lam4 * g_ab
    except EmptyRegion as err:
        logger.warning("dropping chroma term: %s", err)

    scales = resolve_ms_scales(ms_scales, h, w_img)
    if sensor_cache is not None and sensor_cache.scales == scales:
        masked = sensor_cache.masked
        a_pyr = sensor_cache.a_pyramid
        a_normed = sensor_cache.a_normed
    else:
        masked = sensor.color * pseudo.mask_vis[:, :, None]
        a_pyr = None
        a_normed = None
    v_ms, g_ms = ms_ssim_loss(
        masked, rendered.color, scales=scales, a_pyramid=a_pyr
    )
    terms["ms_ssim"] = w.lam5 * v_ms
    d_color += w.lam5 * g_ms

    v_pc, g_pc = perceptual_loss(masked, rendered.color, extractor, a_normed=a_normed)
    terms["perceptual"] = w.lam6 * v_pc
    d_color += w.lam6 * g_pc

    return sum(terms.values()), terms, d_color, d_mask


# ---------------------------------------------------------------------------
# geometric losses
# ---------------------------------------------------------------------------

def farthest_point_sample(
    points: np.ndarray, max_points: int = 1024, seed: int = 0
) -> np.ndarray:
    """Deterministic farthest-point subsample (seeded start index)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if n <= max_points:
        return pts
    rng = np.random.default_rng(seed)
    start = int(rng.integers(0, n))
    chosen = np.empty(max_points, dtype=np.int64)
    chosen[0] = start
    dist = np.linalg.norm(pts - pts[start], axis=1)
    for i in range(1, max_points):
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        dist = np.minimum(dist, np.linalg.norm(pts - pts[nxt], axis=1))
    return pts[chosen]


def _sym_targets(pseudo: Pose, sym: SymmetrySet, points: np.ndarray) -> np.ndarray:
    """Pseudo-pose model points under each symmetry branch: (k, n, 3)."""
    Rt = pseudo.matrix()
    out = np.empty((len(sym.rotations), len(points), 3))
    for k, S in enumerate(sym.rotations):
        out[k] = points @ (Rt @ S).T + pseudo.trans
    return out


def pm_loss(
    pred: Pose,
    pseudo: Pose,
    mesh_points: np.ndarray,
    sym: SymmetrySet | None = None,
    disentangle: bool = False,
) -> tuple[float, np.ndarray]:
    """Symmetry-aware point-matching loss between predicted and pseudo pose.

    Plain form: the minimum over symmetry branches of the mean L1 distance
    between correspondingly transformed model points.  Disentangled form:
    the average of three such terms where only the rotation, only the
    image-plane translation, and only the depth take predicted values
    while the rest are held at pseudo values; gradients are cleaner because
    each parameter group is scored in isolation.

    Returns:
        (value, grad) with ``grad`` the (9,) derivative w.r.t. the
        predicted pose parameters; only the argmin symmetry branch
        contributes.
    """
    points = np.asarray(mesh_points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise EmptyCloud("pm_loss needs at least one model point")
    sym = sym or SymmetrySet.trivial()
    targets = _sym_targets(pseudo, sym, points)
    n = len(points)

    Rp, dRp = rot6_to_matrix_jac(pred.rot6)
    pred_rot_pts = points @ Rp.T
    # d(R x)/d rot6: (n, 3, 6)
    dpred_rot = np.einsum("nj,cjk->nck", points, dRp)
    Rt_pts = points @ pseudo.matrix().T

    def branch_min(pred_pts: np.ndarray) -> tuple[int, np.ndarray, float]:
        diffs = pred_pts[None] - targets
        vals = np.abs(diffs).sum(axis=2).mean(axis=1)
        k = int(np.argmin(vals))
        return k, diffs[k], float(vals[k])

    if not disentangle:
        _, diff, value = branch_min(pred_rot_pts + pred.trans)
        sgn = np.sign(diff)
        grad = np.zeros(9)
        grad[:6] = np.einsum("nc,nck->k", sgn, dpred_rot) / n
        grad[6:] = sgn.sum(axis=0) / n
        return value, grad

    grad = np.zeros(9)
    # rotation-only term
    _, diff, v_rot = branch_min(pred_rot_pts + pseudo.trans)
    grad[:6] = np.einsum("nc,nck->k", np.sign(diff), dpred_rot) / n
    # image-plane translation term
    t_xy = np.array([pred.trans[0], pred.trans[1], pseudo.trans[2]])
    _, diff, v_xy = branch_min(Rt_pts + t_xy)
    sgn = np.sign(diff)
    grad[6] = sgn[:, 0].sum() / n
    grad[7] = sgn[:, 1].sum() / n
    # depth term
    t_z = np.array([pseudo.trans[0], pseudo.trans[1], pred.trans[2]])
    _, diff, v_z = branch_min(Rt_pts + t_z)
    grad[8] = np.sign(diff)[:, 2].sum() / n
    return (v_rot + v_xy + v_z) / 3.0, grad / 3.0


def chamfer_loss(
    cloud_s: np.ndarray, cloud_r: np.ndarray
) -> tuple[float, np.ndarray]:
    """Two-sided chamfer distance (unsquared) with exact nearest neighbors.

    Brute force below ~262k pairs (first-minimum tie break), k-d tree above.

    Returns:
        (value, grad) with ``grad`` the (m, 3) derivative w.r.t.
        ``cloud_r``; matched zero-distance pairs contribute zero gradient.

    Raises:
        EmptyCloud: if either cloud is empty.
    """
    s = np.asarray(cloud_s, dtype=np.float64).reshape(-1, 3)
    r = np.asarray(cloud_r, dtype=np.float64).reshape(-1, 3)
    if len(s) == 0 or len(r) == 0:
        raise EmptyCloud(f"chamfer needs non-empty clouds ({len(s)}, {len(r)})")

    if len(s) * len(r) <= _BRUTE_FORCE_LIMIT:
        d2 = np.sum((s[:, None, :] - r[None, :, :]) ** 2, axis=2)
        idx_sr = np.argmin(d2, axis=1)
        idx_rs = np.argmin(d2, axis=0)
        d_sr = np.sqrt(d2[np.arange(len(s)), idx_sr])
        d_rs = np.sqrt(d2[idx_rs, np.arange(len(r))])
    else:
        d_sr, idx_sr = cKDTree(r).query(s, k=1)
        d_rs, idx_rs = cKDTree(s).query(r, k=1)

    value = float(d_sr.mean() + d_rs.mean())

    grad = np.zeros_like(r)
    # term 1: sensor -> rendered (gradient lands on the matched r point)
    diff = r[idx_sr] - s
    safe = np.where(d_sr > 0, d_sr, 1.0)
    contrib = np.where(d_sr[:, None] > 0, diff / safe[:, None], 0.0) / len(s)
    np.add.at(grad, idx_sr, contrib)
    # term 2: rendered -> sensor
    diff = r - s[idx_rs]
    safe = np.where(d_rs > 0, d_rs, 1.0)
    grad += np.where(d_rs[:, None] > 0, diff / safe[:, None], 0.0) / len(r)
    return value, grad


def rendered_cloud(
    out: RenderOutput, cam: Camera
) -> tuple[np.ndarray, np.ndarray]:
    """Backproject the rendered surface depth on the binarized silhouette.

    Uses the composited surface depth (not the mask-weighted map) so the
    gradient path stays differentiable, restricted to pixels with at least
    0.5 coverage that are also inside the hard silhouette: soft-fringe
    pixels outside any triangle interior carry edge-extrapolated depths
    (off the true surface, badly conditioned at grazing faces), and
    including them would both bias the alignment and make the loss step
    whenever one crosses the coverage threshold.

    Returns:
        (points, flat pixel indices).
    """
    support = np.where(out.depth_hard > 0, out.zsurf, 0.0)
    return backproject(support, out.mask, cam, threshold=0.5, return_pixels=True)


def geom_loss(
    pred: Pose,
    pseudo: PseudoLabels,
    sensor: SensorFrame,
    rendered: RenderOutput,
    w: LossWeights,
    *,
    rgb_only: bool = False,
    sym: SymmetrySet | None = None,
    pm_points: np.ndarray | None = None,
    pm_disentangled: bool = True,
    mesh: TriMesh | None = None,
) -> tuple[float, dict[str, float], np.ndarray, np.ndarray]:
    """Weighted geometric composite: point matching plus (RGB-D) chamfer.

    Returns:
        (value, weighted terms, direct 9-gradient, d_zsurf cotangent map).

    Raises:
        MissingDepth: if ``rgb_only`` is false and the frame has no depth.
    """
    if pm_points is None:
        if mesh is None:
            raise RenderfitError("geom_loss needs pm_points or a mesh")
        pm_points = farthest_point_sample(mesh.vertices)
    v_pm, g_pm = pm_loss(pred, pseudo.pose, pm_points, sym, disentangle=pm_disentangled)
    terms = {"pm": w.lam7 * v_pm}
    grad = w.lam7 * g_pm
    d_zsurf = np.zeros_like(rendered.zsurf)

    if not rgb_only:
        if sensor.depth is None:
            raise MissingDepth("RGB-D objective requested on a depth-free frame")
        cloud_s = backproject(sensor.depth, pseudo.mask_vis, sensor.cam)
        pts_r, pix_r = rendered_cloud(rendered, sensor.cam)
        v_ch, g_pts = chamfer_loss(cloud_s, pts_r)
        terms["chamfer"] = w.lam8 * v_ch
        # point = depth * K^-1 (x, y, 1): chain the point gradient onto depth
        rows, cols = np.unravel_index(pix_r, rendered.zsurf.shape)
        rays = np.stack(
            [
                (cols + 0.5 - sensor.cam.cx) / sensor.cam.fx,
                (rows + 0.5 - sensor.cam.cy) / sensor.cam.fy,
                np.ones(len(pix_r)),
            ],
            axis=1,
        )
        d_depth_flat = np.einsum("pc,pc->p", g_pts, rays)
        d_zsurf.reshape(-1)[pix_r] += w.lam8 * d_depth_flat

    return sum(terms.values()), terms, grad, d_zsurf


# ---------------------------------------------------------------------------
# full composite
# ---------------------------------------------------------------------------

def self_loss(
    pred: Pose,
    mesh: TriMesh,
    sensor: SensorFrame,
    pseudo: PseudoLabels,
    w: LossWeights,
    rcfg: RenderConfig,
    *,
    rgb_only: bool = False,
    sym: SymmetrySet | None = None,
    extractor: FeaturePyramid | None = None,
    ms_scales: int | str = "auto",
    pm_points: np.ndarray | None = None,
    pm_disentangled: bool = True,
    lambda1_source: str = "amodal",
    pred_vis: np.ndarray | None = None,
    pred_amodal: np.ndarray | None = None,
    render_out: RenderOutput | None = None,
    sensor_cache: SensorCache | None = None,
) -> LossReport:
    """Evaluate the full self-supervision objective and its pose gradient.

    Renders the mesh at ``pred`` (unless ``render_out`` is supplied),
    evaluates the visual and geometric composites, and assembles the total
    gradient by chaining all image-space cotangents through the renderer
    in a single backward pass.

    The report's ``terms`` hold the weighted contributions, so their sum
    equals ``total`` exactly; an RGB-only report carries no chamfer entry.
    """
    if render_out is None:
        render_out = render(mesh, pred, sensor.cam, rcfg)

    v_vis, terms, d_color, d_mask = visual_loss(
        sensor,
        render_out,
        pseudo,
        w,
        extractor=extractor,
        ms_scales=ms_scales,
        lambda1_source=lambda1_source,
        pred_vis=pred_vis,
        pred_amodal=pred_amodal,
        sensor_cache=sensor_cache,
    )
    v_geom, geom_terms, grad, d_zsurf = geom_loss(
        pred,
        pseudo,
        sensor,
        render_out,
        w,
        rgb_only=rgb_only,
        sym=sym,
        pm_points=pm_points,
        pm_disentangled=pm_disentangled,
        mesh=mesh,
    )
    terms.update(geom_terms)

    grad = grad + render_out.pose_grad(
        d_color=d_color, d_mask=d_mask, d_zsurf=d_zsurf
    )
    return LossReport(terms=terms, total=v_vis + v_geom, grad=grad)
