"""Differentiable soft rasterizer.

Renders a colored triangle mesh under a pinhole camera into a color image,
a depth map and a probabilistic amodal silhouette, and can propagate
image-space cotangents back to the 9 pose parameters (6 rotation
parameters + 3 translation components) analytically.

Rasterization model
-------------------
Each triangle contributes a coverage weight per pixel:

* ``alpha = 1`` for pixels whose center lies inside the projected triangle,
* ``alpha = exp(-d^2 / sigma)`` outside, where ``d`` is the 2D Euclidean
  distance from the pixel center to the triangle boundary,
* ``alpha = 0`` beyond a cutoff radius of ``4.25 * sqrt(sigma)``.  The
  truncation bounds the rasterization cost; its radius is chosen so the
  discarded coverage (below ``e^-18 ~ 1.4e-8``) sits under the ``1e-7``
  clamp floor of the mask cross-entropy, which keeps that loss free of
  value steps when a triangle's cutoff ring crosses a pixel center.

The silhouette is the union of coverages, ``M = 1 - prod(1 - alpha_T)``.
Color and view-space depth are interpolated per triangle with
perspective-correct barycentric weights (clamped to the nearest boundary
point for pixels outside the triangle) and composited across triangles by
a softmax over ``-z / gamma`` weighted by the coverage, so the nearest
surface dominates as ``gamma -> 0``.  The compositing weight is the
coverage rescaled to reach exactly zero at the cutoff radius and
sharpened (raised to the 6th power): with the raw coverage, a
barely-covering triangle that holds the per-pixel depth minimum would
dominate the softmax regardless of its coverage (the ``exp(dz / gamma)``
advantage is unbounded), and its cutoff entry/exit would step the
composited outputs, breaking finite-difference gradient checks.  The
sharpening makes that influence die off over about a pixel of distance
instead.  The silhouette itself keeps the raw coverage, so the mask
matches the stated formula exactly.  The reported color is alpha-blended
over the background by
``M`` and the reported depth is ``M`` times the composited surface depth,
keeping both outputs continuous in the pose.  The pre-blend surface depth
and a conventional hard z-buffer are exposed alongside.

Implementation notes
--------------------
The rasterizer is vectorized over "slots" (pixel, triangle) pairs inside
inflated triangle bounding boxes.  A render with ``with_tape=True`` caches
the per-slot forward intermediates; :meth:`RenderOutput.pose_grad` then
runs a hand-derived reverse sweep: image cotangents -> per-slot cotangents
-> per-triangle screen-vertex cotangents -> pose, using the analytic
Jacobian of projection and of the Gram-Schmidt rotation map.  Scatter
reductions use a fixed slot order, so renders and gradients are
bit-identical across runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyMesh, ShapeMismatch
from .geometry import NEAR_PLANE, Camera, Pose, TriMesh, rot6_to_matrix_jac

_AREA_EPS = 1e-9  # px^2; below this the projected triangle has no interior
_EDGE_EPS = 1e-18
_CUT_MULT = 4.25  # cutoff radius in units of sqrt(sigma)
_ALPHA_FLOOR = np.exp(-_CUT_MULT**2)  # coverage at the cutoff radius (~1.4e-8)
_COV_POWER = 6.0  # sharpening of the compositing weight, see module docstring


@dataclass(frozen=True)
class RenderConfig:
    """Soft-rasterization hyperparameters.

    Attributes:
        sigma: silhouette falloff in px^2; larger means softer edges.
        gamma: z-compositing temperature in meters; smaller means harder
            occlusion.
        background_color: RGB emitted where nothing is rendered.
    """

    sigma: float = 3.0
    gamma: float = 0.05
    background_color: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")


@dataclass
class RenderTape:
    """Opaque backward-pass state: per-slot forward intermediates."""

    # per-slot arrays (kept slots only)
    pidx: np.ndarray       # flat pixel index
    tri: np.ndarray        # triangle index into the kept-face arrays
    inside: np.ndarray
    alpha: np.ndarray
    e_w: np.ndarray
    g_w: np.ndarray
    zpx: np.ndarray
    S: np.ndarray
    s: np.ndarray          # (m, 3) perspective weights lam_i / z_i
    lam: np.ndarray        # (m, 3)
    cpx: np.ndarray        # (m, 3)
    qx: np.ndarray
    qy: np.ndarray
    eidx: np.ndarray       # nearest edge (outside slots)
    tpar: np.ndarray       # clamped edge parameter
    # per-pixel arrays (flat)
    sum_log: np.ndarray
    n_zero: np.ndarray
    denom: np.ndarray
    fg: np.ndarray         # (npx, 3)
    # per-face arrays
    verts2d: np.ndarray    # (F, 3, 2) projected vertices
    zvert: np.ndarray      # (F, 3)
    colv: np.ndarray       # (F, 3, 3)
    area: np.ndarray       # (F,)
    dattr: np.ndarray      # (F, 9, 9) d(ax, ay, za, ...)/d pose
    sigma: float
    gamma: float


@dataclass
class RenderOutput:
    """Result of :func:`render`.

    ``depth`` is the mask-weighted composite (continuous in the pose, zero
    exactly where no triangle reaches the pixel).  ``zsurf`` is the
    composited surface depth before mask weighting and ``depth_hard`` is a
    conventional z-buffer; they back the geometric losses and the
    synthetic sensor respectively.
    """

    color: np.ndarray       # (H, W, 3)
    depth: np.ndarray       # (H, W), = mask * zsurf
    mask: np.ndarray        # (H, W)
    zsurf: np.ndarray       # (H, W)
    depth_hard: np.ndarray  # (H, W)
    dropped_faces: int
    tape: RenderTape | None
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def pose_grad(
        self,
        d_color: np.ndarray | None = None,
        d_depth: np.ndarray | None = None,
        d_mask: np.ndarray | None = None,
        d_zsurf: np.ndarray | None = None,
    ) -> np.ndarray:
        """Chain output cotangents back to the 9 pose parameters."""
        if self.tape is None:
            raise ShapeMismatch("render output carries no tape (with_tape=False)")
        h, w = self.mask.shape
        for name, arr, shape in (
            ("d_color", d_color, (h, w, 3)),
            ("d_depth", d_depth, (h, w)),
            ("d_mask", d_mask, (h, w)),
            ("d_zsurf", d_zsurf, (h, w)),
        ):
            if arr is not None and np.shape(arr) != shape:
                raise ShapeMismatch(f"{name} shape {np.shape(arr)} != {shape}")
        return _backward(self, d_color, d_depth, d_mask, d_zsurf)


def grad_render(
    out: RenderOutput,
    dL_dcolor: np.ndarray,
    dL_ddepth: np.ndarray,
    dL_dmask: np.ndarray,
) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. the pose, given output cotangents.

    Args:
        out: a :class:`RenderOutput` produced with ``with_tape=True``.
        dL_dcolor: (H, W, 3) cotangent of the color image.
        dL_ddepth: (H, W) cotangent of the depth map.
        dL_dmask: (H, W) cotangent of the mask.

    Returns:
        (9,) gradient w.r.t. ``(rot6, trans)``.
    """
    return out.pose_grad(d_color=dL_dcolor, d_depth=dL_ddepth, d_mask=dL_dmask)


def _empty_output(cam: Camera, cfg: RenderConfig, dropped: int) -> RenderOutput:
    h, w = cam.height, cam.width
    color = np.broadcast_to(
        np.asarray(cfg.background_color, dtype=np.float64), (h, w, 3)
    ).copy()
    return RenderOutput(
        color=color,
        depth=np.zeros((h, w)),
        mask=np.zeros((h, w)),
        zsurf=np.zeros((h, w)),
        depth_hard=np.zeros((h, w)),
        dropped_faces=dropped,
        tape=None,
        background=cfg.background_color,
    )


def render(
    mesh: TriMesh,
    pose: Pose,
    cam: Camera,
    cfg: RenderConfig,
    with_tape: bool = True,
) -> RenderOutput:
    """Render the mesh at the given pose.

    Triangles with any vertex closer than the near plane (1e-4 m) are
    dropped for the frame and counted in ``dropped_faces``.  If nothing
    remains in front of the camera, an all-background output is returned
    (with an empty tape).

    Args:
        mesh: triangle mesh with per-vertex colors.
        pose: object-to-camera transform.
        cam: pinhole intrinsics.
        cfg: softness parameters.
        with_tape: cache backward state for :func:`grad_render`; disable
            for cheap value-only renders.

    Raises:
        EmptyMesh: if the mesh has no faces.
    """
    if mesh.n_faces == 0:
        raise EmptyMesh("mesh has no faces")

    R, dR = rot6_to_matrix_jac(pose.rot6)
    V = mesh.vertices @ R.T + pose.trans
    z_all = V[:, 2]
    front = z_all > NEAR_PLANE
    keep = front[mesh.faces].all(axis=1)
    dropped = int(mesh.n_faces - keep.sum())
    if not keep.any():
        out = _empty_output(cam, cfg, dropped)
        if with_tape:
            out.tape = _EMPTY_TAPE
        return out
    faces = mesh.faces[keep]
    nfaces = len(faces)

    x, y, z = V[:, 0], V[:, 1], V[:, 2]
    zs = np.where(front, z, 1.0)  # dummy for behind-camera verts, never used
    px = cam.fx * x / zs + cam.cx
    py = cam.fy * y / zs + cam.cy

    h, w = cam.height, cam.width
    npx = h * w
    sigma, gamma = cfg.sigma, cfg.gamma
    rcut = _CUT_MULT * np.sqrt(sigma)
    r2cut = _CUT_MULT**2 * sigma

    # per-face screen-space data
    fv = faces  # (F, 3)
    ax, ay = px[fv[:, 0]], py[fv[:, 0]]
    bx, by = px[fv[:, 1]], py[fv[:, 1]]
    cx_, cy_ = px[fv[:, 2]], py[fv[:, 2]]
    verts2d = np.stack(
        [np.stack([ax, ay], 1), np.stack([bx, by], 1), np.stack([cx_, cy_], 1)],
        axis=1,
    )  # (F, 3, 2)
    zvert = z_all[fv]  # (F, 3)
    area = (bx - ax) * (cy_ - ay) - (by - ay) * (cx_ - ax)

    # inflated integer bounding boxes
    x0 = np.clip(np.floor(np.minimum(np.minimum(ax, bx), cx_) - rcut - 0.5), 0, w - 1).astype(np.int64)
    x1 = np.clip(np.ceil(np.maximum(np.maximum(ax, bx), cx_) + rcut - 0.5), 0, w - 1).astype(np.int64)
    y0 = np.clip(np.floor(np.minimum(np.minimum(ay, by), cy_) - rcut - 0.5), 0, h - 1).astype(np.int64)
    y1 = np.clip(np.ceil(np.maximum(np.maximum(ay, by), cy_) + rcut - 0.5), 0, h - 1).astype(np.int64)
    offscreen = (
        (np.maximum(np.maximum(ax, bx), cx_) < -rcut)
        | (np.minimum(np.minimum(ax, bx), cx_) > w + rcut)
        | (np.maximum(np.maximum(ay, by), cy_) < -rcut)
        | (np.minimum(np.minimum(ay, by), cy_) > h + rcut)
    )
    wbl = np.where(offscreen, 0, x1 - x0 + 1)
    hbl = np.where(offscreen, 0, y1 - y0 + 1)
    counts = wbl * hbl
    total = int(counts.sum())
    if total == 0:
        out = _empty_output(cam, cfg, dropped)
        if with_tape:
            out.tape = _EMPTY_TAPE
        return out

    # slot construction: (pixel, triangle) pairs, fixed order
    tri = np.repeat(np.arange(nfaces), counts)
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    local = np.arange(total) - offsets[tri]
    wtri = wbl[tri]
    rows = y0[tri] + local // wtri
    cols = x0[tri] + local % wtri
    qx = cols + 0.5
    qy = rows + 0.5

    # per-slot triangle vertex coordinates
    t_ax, t_ay = ax[tri], ay[tri]
    t_bx, t_by = bx[tri], by[tri]
    t_cx, t_cy = cx_[tri], cy_[tri]
    t_area = area[tri]

    s_a = (t_cx - t_bx) * (qy - t_by) - (t_cy - t_by) * (qx - t_bx)
    s_b = (t_ax - t_cx) * (qy - t_cy) - (t_ay - t_cy) * (qx - t_cx)
    s_c = (t_bx - t_ax) * (qy - t_ay) - (t_by - t_ay) * (qx - t_ax)
    nondegen = np.abs(t_area) >= _AREA_EPS
    pos_side = (s_a >= 0) & (s_b >= 0) & (s_c >= 0)
    neg_side = (s_a <= 0) & (s_b <= 0) & (s_c <= 0)
    inside = nondegen & np.where(t_area > 0, pos_side, neg_side)

    # nearest edge: 0 = (a, b), 1 = (b, c), 2 = (c, a)
    d2 = np.full(total, np.inf)
    eidx = np.zeros(total, dtype=np.int8)
    tpar = np.zeros(total)
    edge_px = (t_ax, t_bx, t_cx)
    edge_py = (t_ay, t_by, t_cy)
    edge_qx2 = (t_bx, t_cx, t_ax)
    edge_qy2 = (t_by, t_cy, t_ay)
    for e in range(3):
        ex_ = edge_qx2[e] - edge_px[e]
        ey_ = edge_qy2[e] - edge_py[e]
        L2 = ex_ * ex_ + ey_ * ey_
        te = ((qx - edge_px[e]) * ex_ + (qy - edge_py[e]) * ey_) / np.maximum(L2, _EDGE_EPS)
        te = np.clip(np.where(L2 < _EDGE_EPS, 0.0, te), 0.0, 1.0)
        dxe = qx - (edge_px[e] + te * ex_)
        dye = qy - (edge_py[e] + te * ey_)
        d2_e = dxe * dxe + dye * dye
        better = d2_e < d2
        d2 = np.where(better, d2_e, d2)
        eidx = np.where(better, np.int8(e), eidx)
        tpar = np.where(better, te, tpar)

    contrib = inside | (d2 <= r2cut)
    if not contrib.any():
        out = _empty_output(cam, cfg, dropped)
        if with_tape:
            out.tape = _EMPTY_TAPE
        return out

    tri = tri[contrib]
    pidx = (rows[contrib] * w + cols[contrib]).astype(np.int64)
    qx, qy = qx[contrib], qy[contrib]
    inside = inside[contrib]
    d2 = d2[contrib]
    eidx = eidx[contrib]
    tpar = tpar[contrib]
    s_abc = np.stack([s_a[contrib], s_b[contrib], s_c[contrib]], axis=1)
    t_area = t_area[contrib]
    m = len(pidx)

    alpha = np.where(inside, 1.0, np.exp(-d2 / sigma))

    # barycentric weights: area form inside, edge clamp outside
    lam = np.where(
        (np.abs(t_area) >= _AREA_EPS)[:, None],
        s_abc / np.where(np.abs(t_area) >= _AREA_EPS, t_area, 1.0)[:, None],
        0.0,
    )
    out_rows = ~inside
    if out_rows.any():
        e = eidx[out_rows].astype(np.int64)
        t = tpar[out_rows]
        lo = np.zeros((int(out_rows.sum()), 3))
        rng = np.arange(len(e))
        lo[rng, e] = 1.0 - t
        lo[rng, (e + 1) % 3] = t
        lam[out_rows] = lo

    zv = zvert[tri]  # (m, 3)
    s = lam / zv
    S = s.sum(axis=1)
    zpx = 1.0 / S
    colv_all = mesh.vertex_colors[fv]  # (F, 3, 3)
    cnum = np.einsum("mv,mvc->mc", s, colv_all[tri])
    cpx = cnum / S[:, None]

    # reference depth per pixel for a stable softmax (cancels exactly)
    zref = np.full(npx, np.inf)
    np.minimum.at(zref, pidx, zpx)

    zhard = np.full(npx, np.inf)
    if inside.any():
        np.minimum.at(zhard, pidx[inside], zpx[inside])

    e_w = np.exp(-(zpx - zref[pidx]) / gamma)
    a_scaled = np.clip((alpha - _ALPHA_FLOOR) / (1.0 - _ALPHA_FLOOR), 0.0, None)
    w_cov = a_scaled**_COV_POWER
    g_w = w_cov * e_w

    denom = np.zeros(npx)
    num_c = np.zeros((npx, 3))
    num_z = np.zeros(npx)
    np.add.at(denom, pidx, g_w)
    np.add.at(num_c, pidx, g_w[:, None] * cpx)
    np.add.at(num_z, pidx, g_w * zpx)

    one_minus = 1.0 - alpha
    zero_f = one_minus <= 0.0
    sum_log = np.zeros(npx)
    n_zero = np.zeros(npx, dtype=np.int64)
    with np.errstate(divide="ignore"):
        logs = np.where(zero_f, 0.0, np.log(np.where(zero_f, 1.0, one_minus)))
    np.add.at(sum_log, pidx, logs)
    np.add.at(n_zero, pidx, zero_f.astype(np.int64))

    prod = np.where(n_zero > 0, 0.0, np.exp(sum_log))
    mask = 1.0 - prod
    cover = denom > 0.0
    safe_denom = np.where(cover, denom, 1.0)
    zsurf = np.where(cover, num_z / safe_denom, 0.0)
    bg = np.asarray(cfg.background_color, dtype=np.float64)
    fg = np.where(cover[:, None], num_c / safe_denom[:, None], bg)
    color = bg[None, :] + mask[:, None] * (fg - bg)
    depth = mask * zsurf
    zhard = np.where(np.isfinite(zhard), zhard, 0.0)

    tape = None
    if with_tape:
        # d(screen attrs)/d(pose): attrs = (ax, ay, za, bx, by, zb, cx, cy, zc)
        dV = np.zeros((len(V), 3, 9))
        dV[:, :, :6] = np.einsum("nj,ijk->nik", mesh.vertices, dR)
        dV[:, 0, 6] = 1.0
        dV[:, 1, 7] = 1.0
        dV[:, 2, 8] = 1.0
        dz = dV[:, 2, :]
        zc = zs[:, None]
        dpx = cam.fx * (dV[:, 0, :] * zc - x[:, None] * dz) / zc**2
        dpy = cam.fy * (dV[:, 1, :] * zc - y[:, None] * dz) / zc**2
        dattr = np.empty((nfaces, 9, 9))
        for v in range(3):
            vid = fv[:, v]
            dattr[:, 3 * v + 0, :] = dpx[vid]
            dattr[:, 3 * v + 1, :] = dpy[vid]
            dattr[:, 3 * v + 2, :] = dz[vid]
        tape = RenderTape(
            pidx=pidx, tri=tri, inside=inside, alpha=alpha, e_w=e_w, g_w=g_w,
            zpx=zpx, S=S, s=s, lam=lam, cpx=cpx, qx=qx, qy=qy,
            eidx=eidx, tpar=tpar,
            sum_log=sum_log, n_zero=n_zero, denom=denom, fg=fg,
            verts2d=verts2d, zvert=zvert, colv=colv_all, area=area,
            dattr=dattr, sigma=sigma, gamma=gamma,
        )

    return RenderOutput(
        color=color.reshape(h, w, 3),
        depth=depth.reshape(h, w),
        mask=mask.reshape(h, w),
        zsurf=zsurf.reshape(h, w),
        depth_hard=zhard.reshape(h, w),
        dropped_faces=dropped,
        tape=tape,
        background=cfg.background_color,
    )


class _EmptyTape:
    """Sentinel tape for all-background renders: gradient is zero."""


_EMPTY_TAPE = _EmptyTape()


def _backward(out: RenderOutput, d_color, d_depth, d_mask, d_zsurf) -> np.ndarray:
    tape = out.tape
    if isinstance(tape, _EmptyTape):
        return np.zeros(9)

    npx = out.mask.size
    mask = out.mask.reshape(-1)
    zsurf = out.zsurf.reshape(-1)
    fg = tape.fg
    denom = tape.denom
    cover = denom > 0.0
    safe_denom = np.where(cover, denom, 1.0)
    bg = np.asarray(out.background, dtype=np.float64)

    cot_color = np.zeros((npx, 3)) if d_color is None else np.asarray(d_color, dtype=np.float64).reshape(npx, 3)
    cot_mask_in = np.zeros(npx) if d_mask is None else np.asarray(d_mask, dtype=np.float64).reshape(npx)
    cot_depth = np.zeros(npx) if d_depth is None else np.asarray(d_depth, dtype=np.float64).reshape(npx)
    cot_zsurf_in = np.zeros(npx) if d_zsurf is None else np.asarray(d_zsurf, dtype=np.float64).reshape(npx)

    # ---- per-pixel chain ----
    cot_M = cot_mask_in + cot_depth * zsurf + np.einsum("pc,pc->p", cot_color, fg - bg)
    cot_zs = cot_zsurf_in + cot_depth * mask
    cot_fg = cot_color * mask[:, None]
    cot_N = np.where(cover[:, None], cot_fg / safe_denom[:, None], 0.0)
    cot_Z = np.where(cover, cot_zs / safe_denom, 0.0)
    cot_D = np.where(
        cover,
        -(np.einsum("pc,pc->p", cot_fg, fg) + cot_zs * zsurf) / safe_denom,
        0.0,
    )
    cot_P = -cot_M

    # ---- per-slot chain ----
    pidx, tri = tape.pidx, tape.tri
    alpha, e_w, g_w = tape.alpha, tape.e_w, tape.g_w
    zpx, S, s, lam, cpx = tape.zpx, tape.S, tape.s, tape.lam, tape.cpx
    inside = tape.inside
    gamma, sigma = tape.gamma, tape.sigma
    colv = tape.colv[tri]  # (m, 3v, 3c)

    cot_g = cot_D[pidx] + cot_Z[pidx] * zpx + np.einsum("mc,mc->m", cot_N[pidx], cpx)

    # exclusion product for the mask union: prod_{S != T} (1 - alpha_S)
    one_minus = 1.0 - alpha
    zero_f = one_minus <= 0.0
    with np.errstate(divide="ignore"):
        logs = np.where(zero_f, 0.0, np.log(np.where(zero_f, 1.0, one_minus)))
    n0 = tape.n_zero[pidx]
    sum_log = tape.sum_log[pidx]
    excl = np.where(
        n0 == 0,
        np.exp(sum_log - logs),
        np.where((n0 == 1) & zero_f, np.exp(sum_log), 0.0),
    )
    a_scaled = np.clip((alpha - _ALPHA_FLOOR) / (1.0 - _ALPHA_FLOOR), 0.0, None)
    w_cov = a_scaled**_COV_POWER
    cot_alpha = (
        cot_g * e_w * _COV_POWER * a_scaled ** (_COV_POWER - 1.0)
        * (alpha > _ALPHA_FLOOR) / (1.0 - _ALPHA_FLOOR)
        - cot_P[pidx] * excl
    )
    cot_e = cot_g * w_cov
    cot_zpx = cot_Z[pidx] * g_w - cot_e * e_w / gamma
    cot_cpx = cot_N[pidx] * g_w[:, None]

    # interpolation: cpx = cnum / S, zpx = 1 / S, s_i = lam_i / z_i
    cot_cnum = cot_cpx / S[:, None]
    cot_S = -(np.einsum("mc,mc->m", cot_cpx, cpx) / S) - cot_zpx / S**2
    cot_s = cot_S[:, None] + np.einsum("mc,mvc->mv", cot_cnum, colv)
    zv = tape.zvert[tri]
    cot_lam = cot_s / zv
    cot_zvert = -cot_s * s / zv  # (m, 3)

    # ---- slot cotangents -> screen-vertex coefficient matrix ----
    C = np.zeros((len(pidx), 9))  # columns: ax, ay, za, bx, by, zb, cx, cy, zc
    C[:, 2] = cot_zvert[:, 0]
    C[:, 5] = cot_zvert[:, 1]
    C[:, 8] = cot_zvert[:, 2]

    qx, qy = tape.qx, tape.qy
    v2 = tape.verts2d[tri]  # (m, 3, 2)
    t_ax, t_ay = v2[:, 0, 0], v2[:, 0, 1]
    t_bx, t_by = v2[:, 1, 0], v2[:, 1, 1]
    t_cx, t_cy = v2[:, 2, 0], v2[:, 2, 1]

    ii = inside & (np.abs(tape.area[tri]) >= _AREA_EPS)
    if ii.any():
        A = tape.area[tri][ii]
        cl = cot_lam[ii]
        lm = lam[ii]
        cot_sa = cl[:, 0] / A
        cot_sb = cl[:, 1] / A
        cot_sc = cl[:, 2] / A
        cot_A = -np.einsum("mv,mv->m", cl, lm) / A
        qxi, qyi = qx[ii], qy[ii]
        axi, ayi = t_ax[ii], t_ay[ii]
        bxi, byi = t_bx[ii], t_by[ii]
        cxi, cyi = t_cx[ii], t_cy[ii]
        C[ii, 0] += cot_sb * (qyi - cyi) + cot_sc * (byi - qyi) + cot_A * (byi - cyi)
        C[ii, 1] += cot_sb * (cxi - qxi) + cot_sc * (qxi - bxi) + cot_A * (cxi - bxi)
        C[ii, 3] += cot_sa * (cyi - qyi) + cot_sc * (qyi - ayi) + cot_A * (cyi - ayi)
        C[ii, 4] += cot_sa * (qxi - cxi) + cot_sc * (axi - qxi) + cot_A * (axi - cxi)
        C[ii, 6] += cot_sa * (qyi - byi) + cot_sb * (ayi - qyi) + cot_A * (ayi - byi)
        C[ii, 7] += cot_sa * (bxi - qxi) + cot_sb * (qxi - axi) + cot_A * (bxi - axi)

    oo = ~inside
    if oo.any():
        e0 = tape.eidx[oo].astype(np.int64)
        e1 = (e0 + 1) % 3
        t = tape.tpar[oo]
        mo = int(oo.sum())
        rng = np.arange(mo)
        v2o = v2[oo]
        Px, Py = v2o[rng, e0, 0], v2o[rng, e0, 1]
        Qx, Qy = v2o[rng, e1, 0], v2o[rng, e1, 1]
        qxo, qyo = qx[oo], qy[oo]
        ex_, ey_ = Qx - Px, Qy - Py
        L2 = np.maximum(ex_**2 + ey_**2, _EDGE_EPS)

        # coverage: alpha = exp(-d^2 / sigma); the nearest point moves with
        # the edge while t stays fixed (envelope of the clamped minimum)
        cot_d2 = -cot_alpha[oo] * alpha[oo] / sigma
        cptx = Px + t * ex_
        cpty = Py + t * ey_
        rx, ry = qxo - cptx, qyo - cpty
        gPx = cot_d2 * (-2.0 * rx * (1.0 - t))
        gPy = cot_d2 * (-2.0 * ry * (1.0 - t))
        gQx = cot_d2 * (-2.0 * rx * t)
        gQy = cot_d2 * (-2.0 * ry * t)

        # edge-clamped barycentric weights: lam[e0] = 1 - t, lam[e1] = t
        cot_t = cot_lam[oo][rng, e1] - cot_lam[oo][rng, e0]
        interior = (t > 0.0) & (t < 1.0)
        cot_w = np.where(interior, cot_t / L2, 0.0)
        cot_L2 = np.where(interior, -cot_t * t / L2, 0.0)
        gPx += cot_w * (-ex_ - (qxo - Px)) + cot_L2 * (-2.0 * ex_)
        gPy += cot_w * (-ey_ - (qyo - Py)) + cot_L2 * (-2.0 * ey_)
        gQx += cot_w * (qxo - Px) + cot_L2 * (2.0 * ex_)
        gQy += cot_w * (qyo - Py) + cot_L2 * (2.0 * ey_)

        # scatter into the e0/e1 vertex-coordinate columns
        oidx = np.flatnonzero(oo)
        np.add.at(C, (oidx, 3 * e0 + 0), gPx)
        np.add.at(C, (oidx, 3 * e0 + 1), gPy)
        np.add.at(C, (oidx, 3 * e1 + 0), gQx)
        np.add.at(C, (oidx, 3 * e1 + 1), gQy)

    # ---- contract per-triangle: grad = sum_slots C . dattr[tri] ----
    nfaces = len(tape.area)
    H = np.empty((nfaces, 9))
    for a in range(9):
        H[:, a] = np.bincount(tri, weights=C[:, a], minlength=nfaces)
    return np.einsum("fa,fak->k", H, tape.dattr)
