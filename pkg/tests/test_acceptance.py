"""Acceptance criteria, one test per criterion, one PASS line each.

The behavioral criteria (5-8) run on synthetic scenes built by the scene
factory; their parameters are frozen here.  Criterion 6 mirrors the
loss-vs-pose-error convergence study at desk scale; criterion 8 puts the
pseudo labels and initialization in the basin-edge regime where the
amodal/visible mask ablation separates.

Run with ``pytest -m acceptance -s`` to see the per-criterion lines.
"""

import io
import time

import numpy as np
import pytest
from scipy.spatial.distance import cdist
from scipy.stats import spearmanr

from renderfit import (
    Camera,
    LossWeights,
    OptimConfig,
    Pose,
    PoseEstimate,
    RenderConfig,
    SceneSpec,
    SensorFrame,
    SymmetrySet,
    TriMesh,
    auc,
    auc_sweep,
    axis_angle_matrix,
    chamfer_loss,
    e_add,
    e_add_s,
    ema_update,
    miou,
    pm_loss,
    refine,
    rotation_angle_error,
    self_loss,
    translation_error,
)
from renderfit.gradcheck import run_gradcheck
from renderfit.scenes import perturb_pose, synthesize, unit_cube

from conftest import make_selfconsistent_scene

pytestmark = pytest.mark.acceptance

CUBE = unit_cube()
DIAM = CUBE.diameter
CAM = Camera(150.0, 150.0, 64.0, 64.0, 128, 128)
GT = Pose(np.array([0.9, 0.25, -0.15, 0.1, 1.05, 0.2]), np.array([0.05, -0.03, 3.0]))
RCFG = RenderConfig()
OCFG = OptimConfig(max_iters=500, convergence_tol=1e-3, patience=20)

# criterion 8 scene: object shifted into the 30% occluder band (52% of it
# hidden), sparse depth, imperfect pseudo pose, basin-edge initialization
C8_GT = Pose(np.array([0.9, 0.25, -0.15, 0.1, 1.05, 0.2]), np.array([-0.45, -0.03, 3.0]))
C8_SPEC = SceneSpec(
    mesh_kind="unit_cube",
    gt_pose=C8_GT,
    cam=CAM,
    seed=42,
    occluder=0.30,
    noise=(0.01, 0.003, 0.5),
    pseudo_rot_deg=8.0,
    pseudo_trans_frac=0.04,
)
C8_INIT_ROT, C8_INIT_TRANS = 25.0, 0.12

N_TRIALS = 50


def _c6_scene():
    spec = SceneSpec(mesh_kind="unit_cube", gt_pose=GT, cam=CAM, seed=42)
    return synthesize(spec, RCFG)


def _run_trial(sensor, pseudo, gt, seed, *, rgb_only=False, lambda1_source="amodal",
               init_rot=10.0, init_trans=0.05):
    init = perturb_pose(gt, init_rot, init_trans, DIAM, seed=seed)
    return refine(
        init, CUBE, sensor, pseudo,
        LossWeights(lam8=0.0) if rgb_only else LossWeights(),
        RCFG, OCFG, rgb_only=rgb_only, gt=gt, lambda1_source=lambda1_source,
    )


def _trace_bytes(trace) -> bytes:
    buf = io.StringIO()
    names = trace.term_names()
    for r in trace.records:
        buf.write(
            f"{r.iteration},{r.total!r},"
            + ",".join(repr(r.terms.get(n, 0.0)) for n in names)
            + f",{r.rot_err_deg!r},{r.trans_err_m!r}\n"
        )
    return buf.getvalue().encode()


class TestCriterion1:
    def test_gradient_fidelity(self):
        report = run_gradcheck(n_configs=10, seed=0)
        for term in report.terms:
            assert not term.degenerate, f"{term.name}: no measurable gradient"
            assert term.median_rel <= 0.02, (
                f"{term.name} median {term.median_rel:.4f}"
            )
            assert term.max_rel <= 0.10, f"{term.name} max {term.max_rel:.4f}"
        assert report.elapsed_s <= 300.0
        print(
            f"\nPASS criterion 1: gradcheck over {len(report.terms)} terms, "
            f"worst max {max(t.max_rel for t in report.terms) * 100:.2f}%, "
            f"{report.elapsed_s:.0f}s"
        )


class TestCriterion2:
    def test_chamfer_matches_brute_force(self, rng):
        worst = 0.0
        for i in range(50):
            n, m = rng.integers(2, 513, size=2)
            s = rng.normal(size=(n, 3))
            r = rng.normal(size=(m, 3))
            v, _ = chamfer_loss(s, r)
            d = cdist(s, r)
            expect = d.min(axis=1).mean() + d.min(axis=0).mean()
            worst = max(worst, abs(v - expect) / max(abs(expect), 1e-300))
        assert worst <= 1e-9
        print(f"\nPASS criterion 2a: chamfer vs brute force, worst rel {worst:.2e}")

    def test_chamfer_matches_pure_python_loops(self, rng):
        for _ in range(3):
            s = rng.normal(size=(60, 3))
            r = rng.normal(size=(45, 3))
            v, _ = chamfer_loss(s, r)
            t1 = np.mean([min(np.linalg.norm(p - q) for q in r) for p in s])
            t2 = np.mean([min(np.linalg.norm(p - q) for p in s) for q in r])
            assert abs(v - (t1 + t2)) <= 1e-9 * (t1 + t2)

    def test_e_add_s_matches_brute_force(self, rng):
        worst = 0.0
        for i in range(50):
            n = int(rng.integers(4, 513))
            verts = rng.normal(size=(n, 3))
            mesh = TriMesh(verts, [[0, 1, 2]], np.full((n, 3), 0.5))
            est = PoseEstimate(
                pred=Pose(rng.normal(size=6), rng.normal(size=3)),
                gt=Pose(rng.normal(size=6), rng.normal(size=3)),
                mesh=mesh,
                sym=SymmetrySet.trivial(),
            )
            from renderfit import transform_points

            p_gt = transform_points(est.gt, verts)
            p_pred = transform_points(est.pred, verts)
            expect = cdist(p_pred, p_gt).min(axis=1).mean()
            worst = max(worst, abs(e_add_s(est) - expect) / max(expect, 1e-300))
        assert worst <= 1e-9
        print(f"\nPASS criterion 2b: e_add_s vs brute force, worst rel {worst:.2e}")


class TestCriterion3:
    def test_metric_exactness(self, rng):
        errors = rng.uniform(0, 0.2, size=500)
        assert abs(auc(errors) - auc_sweep(errors)) <= 0.1

        pred = Pose(np.array([1.0, 0, 0, 0, 1, 0]), [0, 0, 0.01])
        est = PoseEstimate(pred, Pose.identity(), CUBE, SymmetrySet.trivial())
        assert abs(e_add(est) - 0.01) < 1e-15

        m = (rng.random((32, 32)) > 0.5).astype(float)
        assert miou(m, m) == 100.0
        a, b = np.zeros((4, 4)), np.zeros((4, 4))
        a[0, 0], b[3, 3] = 1, 1
        assert miou(a, b) == 0.0
        sq_a, sq_b = np.zeros((8, 16)), np.zeros((8, 16))
        sq_a[:, :8], sq_b[:, 4:12] = 1, 1
        assert abs(miou(sq_a, sq_b) - 100.0 / 3.0) <= 0.01

        ninety = Pose.from_matrix(axis_angle_matrix([0, 1, 0], np.pi / 2), np.zeros(3))
        assert abs(rotation_angle_error(ninety, Pose.identity()) - 90.0) <= 1e-9
        print("\nPASS criterion 3: AUC/e_add/mIoU/angle closed forms exact")


class TestCriterion4:
    def test_symmetry_invariance(self):
        pseudo = Pose(np.array([0.9, 0.2, 0.1, -0.2, 1.0, 0.3]), [0.1, 0.2, 1.0])
        pts = CUBE.vertices
        worst = 0.0
        for order in (2, 4):
            sym = SymmetrySet.cyclic([0, 0, 1], order)
            for S in sym.rotations:
                composed = Pose.from_matrix(pseudo.matrix() @ S, pseudo.trans)
                v, _ = pm_loss(composed, pseudo, pts, sym, disentangle=False)
                worst = max(worst, v)
        assert worst < 1e-9
        print(f"\nPASS criterion 4: symmetry invariance, worst pm {worst:.2e}")


class TestCriterion5:
    def test_self_consistency_fixed_point(self):
        sensor, pseudo, gt, rcfg = make_selfconsistent_scene(CAM)
        report = self_loss(gt, CUBE, sensor, pseudo, LossWeights(), rcfg)
        assert report.total < 1e-3

        best, trace = refine(
            gt, CUBE, sensor, pseudo, LossWeights(), rcfg, OCFG, gt=gt
        )
        rot_moved = rotation_angle_error(best, gt)
        trans_moved = translation_error(best, gt)
        assert rot_moved < 0.1
        assert trans_moved < 1e-4
        print(
            f"\nPASS criterion 5: loss at gt {report.total:.2e}, refine moved "
            f"{rot_moved:.2e} deg / {trans_moved:.2e} m"
        )


@pytest.fixture(scope="module")
def c6_results():
    sensor, pseudo, gt = _c6_scene()
    t0 = time.time()
    results = []
    for trial in range(N_TRIALS):
        best, trace = _run_trial(sensor, pseudo, gt, 100 + trial)
        results.append((best, trace))
    return results, gt, time.time() - t0


class TestCriterion6:
    def test_convergence_study(self, c6_results):
        results, gt, elapsed = c6_results
        hits = 0
        rhos = []
        for best, trace in results:
            re = rotation_angle_error(best, gt)
            te = translation_error(best, gt)
            assert len(trace.records) <= 500
            if re < 2.0 and te < 0.02 * DIAM:
                hits += 1
            if trace.status == "converged":
                rho = spearmanr(trace.totals(), trace.rot_errors()).statistic
                if np.isfinite(rho):
                    rhos.append(rho)
        rate = 100.0 * hits / len(results)
        mean_rho = float(np.mean(rhos))
        assert rate >= 80.0, f"success rate {rate:.0f}%"
        assert mean_rho >= 0.8, f"mean spearman {mean_rho:.3f}"
        assert elapsed <= 900.0, f"elapsed {elapsed:.0f}s"
        print(
            f"\nPASS criterion 6: {rate:.0f}% of {len(results)} trials "
            f"< 2 deg / 2% diameter, mean Spearman(loss, rot err) "
            f"{mean_rho:.3f}, {elapsed:.0f}s"
        )


class TestCriterion7:
    def test_rgb_only_halves_rotation_error(self):
        sensor, pseudo, gt = _c6_scene()
        nodepth = SensorFrame(color=sensor.color, depth=None, cam=CAM)
        init_errs, final_errs = [], []
        for trial in range(N_TRIALS):
            init = perturb_pose(gt, 10.0, 0.05, DIAM, seed=100 + trial)
            best, _ = refine(
                init, CUBE, nodepth, pseudo, LossWeights(lam8=0.0), RCFG, OCFG,
                rgb_only=True, gt=gt,
            )
            init_errs.append(rotation_angle_error(init, gt))
            final_errs.append(rotation_angle_error(best, gt))
        med_init = float(np.median(init_errs))
        med_final = float(np.median(final_errs))
        assert med_final <= 0.5 * med_init, f"{med_init:.2f} -> {med_final:.2f}"
        print(
            f"\nPASS criterion 7: RGB-only median rotation error "
            f"{med_init:.2f} -> {med_final:.3f} deg"
        )


@pytest.fixture(scope="module")
def c8_results():
    sensor, pseudo, gt = synthesize(C8_SPEC, RCFG)
    out = {}
    for src in ("amodal", "visible"):
        hits = 0
        for trial in range(N_TRIALS):
            try:
                best, _ = _run_trial(
                    sensor, pseudo, gt, 200 + trial, lambda1_source=src,
                    init_rot=C8_INIT_ROT, init_trans=C8_INIT_TRANS,
                )
                re = rotation_angle_error(best, gt)
                te = translation_error(best, gt)
            except Exception:
                re, te = 180.0, np.inf
            hits += re < 5.0 and te < 0.05 * DIAM
        out[src] = hits
    return out


class TestCriterion8:
    def test_occlusion_robustness(self, c8_results):
        amodal = 100.0 * c8_results["amodal"] / N_TRIALS
        visible = 100.0 * c8_results["visible"] / N_TRIALS
        assert amodal >= 60.0, f"amodal success {amodal:.0f}%"
        assert visible < amodal, f"visible {visible:.0f}% !< amodal {amodal:.0f}%"
        print(
            f"\nPASS criterion 8: amodal mask {amodal:.0f}% vs "
            f"visible-only {visible:.0f}% success under a 30% occluder"
        )


class TestCriterion9:
    def test_ema_exactness(self, rng):
        worst = 0.0
        for _ in range(20):
            t = rng.normal(size=128)
            s = rng.normal(size=128)
            out = ema_update(t, s, 0.999)
            worst = max(worst, np.abs(out - (0.999 * t + 0.001 * s)).max())
        assert worst <= 1e-12
        print(f"\nPASS criterion 9: EMA closed form, worst abs err {worst:.2e}")


class TestCriterion10:
    def test_seeded_traces_are_byte_identical(self):
        # representative re-runs of the criterion 5-8 configurations
        sensor5, pseudo5, gt5, rcfg5 = make_selfconsistent_scene(CAM)
        sensor6, pseudo6, gt6 = _c6_scene()
        sensor8, pseudo8, gt8 = synthesize(C8_SPEC, RCFG)
        nodepth = SensorFrame(color=sensor6.color, depth=None, cam=CAM)

        def run5():
            return refine(gt5, CUBE, sensor5, pseudo5, LossWeights(), rcfg5, OCFG, gt=gt5)[1]

        def run6():
            return _run_trial(sensor6, pseudo6, gt6, 100)[1]

        def run7():
            init = perturb_pose(gt6, 10.0, 0.05, DIAM, seed=101)
            return refine(
                init, CUBE, nodepth, pseudo6, LossWeights(lam8=0.0), RCFG, OCFG,
                rgb_only=True, gt=gt6,
            )[1]

        def run8():
            return _run_trial(
                sensor8, pseudo8, gt8, 200, lambda1_source="amodal",
                init_rot=C8_INIT_ROT, init_trans=C8_INIT_TRANS,
            )[1]

        for name, runner in (("c5", run5), ("c6", run6), ("c7", run7), ("c8", run8)):
            b1 = _trace_bytes(runner())
            b2 = _trace_bytes(runner())
            assert b1 == b2, f"{name} traces differ between runs"
        print("\nPASS criterion 10: repeated seeded runs byte-identical")
