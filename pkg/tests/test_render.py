"""Soft rasterizer: output semantics, examples, invariants."""

import numpy as np
import pytest

from renderfit import Camera, Pose, RenderConfig, TriMesh, render
from renderfit.errors import EmptyMesh
from renderfit.scenes import icosphere

IDENT = np.array([1.0, 0, 0, 0, 1, 0])


def facing_square(z=1.0, side=1.0, color=(0.5, 0.5, 0.5)):
    s = side / 2
    verts = [[-s, -s, z], [s, -s, z], [s, s, z], [-s, s, z]]
    return TriMesh(verts, [[0, 1, 2], [0, 2, 3]], [color] * 4)


class TestExamples:
    def test_fully_covered_pixel_takes_vertex_color(self):
        tri = TriMesh([[-1, -1, 0], [3, -1, 0], [-1, 3, 0]], [[0, 1, 2]], [[1, 0, 0]] * 3)
        cam = Camera(10, 10, 2, 2, 4, 4)
        out = render(tri, Pose(IDENT, [0, 0, 1.0]), cam, RenderConfig())
        np.testing.assert_allclose(out.color[2, 2], [1, 0, 0], atol=1e-12)
        assert out.mask[2, 2] >= 1 - 1e-6

    def test_facing_square_depth_is_constant(self):
        cam = Camera(40, 40, 32, 32, 64, 64)
        out = render(facing_square(z=1.0), Pose(IDENT, [0, 0, 0]), cam, RenderConfig())
        interior = out.mask > 1 - 1e-9
        assert interior.sum() > 1000
        assert np.abs(out.depth[interior] - 1.0).max() < 1e-4

    def test_mask_value_at_known_distance(self):
        # a pixel at distance d outside the boundary has coverage exp(-d^2/sigma)
        sigma = 3.0
        verts = [[10.0, -100.0, 1.0], [10.0, 100.0, 1.0], [-200.0, 0.0, 1.0]]
        tri = TriMesh(verts, [[0, 1, 2]], [[1, 1, 1]] * 3)
        cam = Camera(1.0, 1.0, 0.0, 0.0, 40, 40)
        out = render(tri, Pose(IDENT, [0, 0, 0]), cam, RenderConfig(sigma=sigma))
        col = 11  # center x = 11.5, distance 1.5 from the edge at x = 10
        d = col + 0.5 - 10.0
        expected = np.exp(-d * d / sigma)
        assert abs(out.mask[20, col] - expected) < 1e-6
        # the d = sqrt(sigma ln 2) point gives exactly one half
        d_half = np.sqrt(sigma * np.log(2.0))
        assert abs(np.exp(-d_half**2 / sigma) - 0.5) < 1e-12

    def test_empty_face_list_raises(self):
        mesh = TriMesh(np.eye(3), np.zeros((0, 3), dtype=np.int64), np.zeros((3, 3)))
        cam = Camera(10, 10, 2, 2, 4, 4)
        with pytest.raises(EmptyMesh):
            render(mesh, Pose(IDENT, [0, 0, 1.0]), cam, RenderConfig())

    def test_all_behind_camera_gives_background(self, cube, cam64):
        cfg = RenderConfig(background_color=(0.2, 0.3, 0.4))
        out = render(cube, Pose(IDENT, [0, 0, -5.0]), cam64, cfg)
        assert out.dropped_faces == cube.n_faces
        assert np.allclose(out.color, np.array([0.2, 0.3, 0.4]))
        assert out.mask.sum() == 0 and out.depth.sum() == 0
        np.testing.assert_allclose(out.pose_grad(d_mask=np.ones((64, 64))), 0)


class TestInvariants:
    def test_mask_monotone_in_sigma(self, cube, cam64):
        pose = Pose(np.array([0.9, 0.2, -0.1, 0.1, 1.1, 0.3]), [0.1, -0.05, 3.0])
        prev = None
        for sigma in (0.5, 1.0, 3.0, 6.0):
            out = render(cube, pose, cam64, RenderConfig(sigma=sigma), with_tape=False)
            if prev is not None:
                assert np.all(out.mask >= prev - 1e-12)
            prev = out.mask

    def test_occlusion_two_squares(self):
        verts = np.array(
            [[-0.5, -0.5, 1.0], [0.5, -0.5, 1.0], [0.5, 0.5, 1.0], [-0.5, 0.5, 1.0],
             [-0.5, -0.5, 2.0], [0.5, -0.5, 2.0], [0.5, 0.5, 2.0], [-0.5, 0.5, 2.0]]
        )
        mesh = TriMesh(
            verts, [[0, 1, 2], [0, 2, 3], [4, 5, 6], [4, 6, 7]], [[0.5] * 3] * 8
        )
        cam = Camera(40, 40, 32, 32, 64, 64)
        out = render(mesh, Pose(IDENT, [0, 0, 0]), cam, RenderConfig(gamma=1e-3))
        interior = out.mask > 1 - 1e-9
        assert np.abs(out.depth[interior] - 1.0).max() < 1e-3

    def test_determinism(self, cube, cam64, rcfg):
        pose = Pose(np.array([0.9, 0.2, -0.1, 0.1, 1.1, 0.3]), [0.1, -0.05, 3.0])
        a = render(cube, pose, cam64, rcfg)
        b = render(cube, pose, cam64, rcfg)
        assert np.array_equal(a.color, b.color)
        assert np.array_equal(a.depth, b.depth)
        assert np.array_equal(a.mask, b.mask)
        g1 = a.pose_grad(d_mask=np.ones((64, 64)))
        g2 = b.pose_grad(d_mask=np.ones((64, 64)))
        assert np.array_equal(g1, g2)

    def test_mask_is_amodal(self, cube, cam64, rcfg):
        # rendering a second, closer object in a separate call leaves the
        # target's silhouette untouched: renders are pure
        pose = Pose(IDENT, [0.0, 0.0, 3.0])
        target = render(cube, pose, cam64, rcfg, with_tape=False)
        occluder = render(
            icosphere(1), Pose(IDENT, [0.0, 0.0, 1.5]), cam64, rcfg, with_tape=False
        )
        assert occluder.mask.sum() > 0
        target_again = render(cube, pose, cam64, rcfg, with_tape=False)
        assert np.array_equal(target.mask, target_again.mask)

    def test_depth_support_and_color_background(self, cube, cam64):
        cfg = RenderConfig(background_color=(0.1, 0.2, 0.3))
        pose = Pose(np.array([0.9, 0.2, -0.1, 0.1, 1.1, 0.3]), [0.1, -0.05, 3.0])
        out = render(cube, pose, cam64, cfg, with_tape=False)
        # depth is positive exactly where coverage is positive
        assert np.array_equal(out.depth > 0, out.mask > 0)
        np.testing.assert_allclose(out.depth, out.mask * out.zsurf)
        bgpix = out.mask < 1e-6
        assert np.abs(out.color[bgpix] - np.array([0.1, 0.2, 0.3])).max() < 1e-6

    def test_mask_in_unit_range(self, cube, cam64, rcfg):
        pose = Pose(np.array([0.9, 0.2, -0.1, 0.1, 1.1, 0.3]), [0.1, -0.05, 3.0])
        out = render(cube, pose, cam64, rcfg, with_tape=False)
        assert out.mask.min() >= 0.0 and out.mask.max() <= 1.0

    def test_near_plane_drop_counter(self, cube, cam64, rcfg):
        # one corner pokes through the near plane
        out = render(cube, Pose(IDENT, [0, 0, 0.4]), cam64, rcfg, with_tape=False)
        assert 0 < out.dropped_faces <= cube.n_faces
