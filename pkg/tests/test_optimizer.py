import numpy as np
import pytest

from symvo.errors import DegenerateProblemError
from symvo.geometry import CameraIntrinsics, Pose, project, so3_exp
from symvo.optimizer import (
    ObsTerm,
    OptimizationProblem,
    OutlierMode,
    OutlierPolicy,
    _Assembled,
    _evaluate,
    _retract,
    _term_jacobians,
    evaluate_cost,
    local_bundle_adjustment,
    optimize_pose,
    solve_problem,
)
from symvo.uncertainty import CovarianceModel, ResidualWeighting

CAM = CameraIntrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)

STANDARD = ResidualWeighting(model=CovarianceModel.STANDARD)
SYMMETRIC = ResidualWeighting(model=CovarianceModel.SYMMETRIC)


def make_scene(rng, n_poses=4, n_points=30, spacing=0.6):
    """Cameras advancing along +z watching a landmark cloud ahead."""
    poses = {}
    for k in range(1, n_poses + 1):
        poses[k] = Pose(np.eye(3), np.array([0.0, 0.0, (k - 1) * spacing]))
    points = {}
    pid = 1
    while len(points) < n_points:
        p = np.array([
            rng.uniform(-4, 4), rng.uniform(-3, 3),
            rng.uniform(n_poses * spacing + 3, n_poses * spacing + 25),
        ])
        ok = True
        for pose in poses.values():
            q = pose.inverse().apply(p)
            if q[2] < 0.5 or not CAM.contains(project(q, CAM)):
                ok = False
                break
        if ok:
            points[pid] = p
            pid += 1
    return poses, points


def make_observations(poses, points, weighting, noise=0.0, rng=None,
                      sigma2=1.0):
    """Perfect or noisy measurements; reference = lowest observing kf."""
    terms = []
    ref_kf = min(poses)
    for pid in sorted(points):
        for kf_id in sorted(poses):
            uv = project(poses[kf_id].inverse().apply(points[pid]), CAM)
            if noise and rng is not None:
                uv = uv + rng.normal(scale=noise, size=2)
            if kf_id == ref_kf:
                terms.append(ObsTerm(pid, kf_id, tuple(uv), 2.0 * sigma2))
            else:
                ref_uv = project(poses[ref_kf].inverse().apply(points[pid]), CAM)
                if noise and rng is not None:
                    ref_uv = ref_uv + rng.normal(scale=noise, size=2)
                terms.append(
                    ObsTerm(pid, kf_id, tuple(uv), 2.0 * sigma2,
                            ref_kf_id=ref_kf, ref_uv=tuple(ref_uv),
                            ref_sigma2=2.0 * sigma2)
                )
    return terms


def perturbed(poses, points, rng, rot=0.02, trans=0.02, pt=0.05, skip=()):
    new_poses = {}
    for k, pose in poses.items():
        if k in skip:
            new_poses[k] = pose
        else:
            new_poses[k] = Pose(
                so3_exp(rng.normal(scale=rot, size=3)) @ pose.rotation,
                pose.translation + rng.normal(scale=trans, size=3),
            )
    new_points = {
        p: pos + rng.normal(scale=pt, size=3) for p, pos in points.items()
    }
    return new_poses, new_points


class TestJacobians:
    """Analytic residual Jacobians vs central finite differences."""

    @pytest.mark.parametrize("weighting", [STANDARD, SYMMETRIC],
                             ids=["standard", "symmetric"])
    def test_matches_finite_differences(self, weighting):
        rng = np.random.default_rng(42)
        h = 1e-6
        checked = 0
        while checked < 250:
            poses, points = make_scene(rng, n_poses=2, n_points=1)
            poses, points = perturbed(poses, points, rng, rot=0.3, trans=0.3,
                                      pt=0.3)
            terms = make_observations(poses, points, weighting)
            problem = OptimizationProblem(
                cam=CAM, poses=poses, points=points, observations=terms,
                weighting=weighting,
                variable_pose_ids=(2,), variable_point_ids=(1,),
            )
            asm = _Assembled(problem)
            state = asm.initial_state(problem)
            ev = _evaluate(asm, state)
            if not (np.all(ev.valid_f) and np.all(ev.valid_b)):
                continue
            jac = _term_jacobians(asm, state, ev)

            def stack(st):
                e = _evaluate(asm, st)
                return np.concatenate([e.r_f.ravel(), e.r_b.ravel()])

            var_rows = np.array([sorted(poses).index(2)])
            pt_rows = np.array([0])
            n_res = 2 * (asm.n_forward + asm.n_backward)
            J_fd = np.zeros((n_res, 9))
            for k in range(6):
                dp = np.zeros((1, 6))
                dp[0, k] = h
                plus = stack(_retract(asm, state, dp, np.zeros((1, 3)),
                                      var_rows, pt_rows))
                minus = stack(_retract(asm, state, -dp, np.zeros((1, 3)),
                                       var_rows, pt_rows))
                J_fd[:, k] = (plus - minus) / (2 * h)
            for k in range(3):
                dl = np.zeros((1, 3))
                dl[0, k] = h
                plus = stack(_retract(asm, state, np.zeros((1, 6)), dl,
                                      var_rows, pt_rows))
                minus = stack(_retract(asm, state, np.zeros((1, 6)), -dl,
                                       var_rows, pt_rows))
                J_fd[:, 6 + k] = (plus - minus) / (2 * h)

            J_an = np.zeros((n_res, 9))
            row = 0
            for i in range(asm.n_forward):
                if asm.f_kf_var[i] >= 0:
                    J_an[row:row + 2, :6] = jac.f_pose[i]
                J_an[row:row + 2, 6:] = jac.f_pt[i]
                row += 2
            for b in range(asm.n_backward):
                if asm.f_kf_var[asm.b_fwd[b]] >= 0:
                    J_an[row:row + 2, :6] += jac.b_pose_k[b]
                if asm.b_ref_var[b] >= 0:
                    J_an[row:row + 2, :6] += jac.b_pose_j[b]
                J_an[row:row + 2, 6:] = jac.b_pt[b]
                row += 2

            scale = np.maximum(np.abs(J_fd), 1.0)
            assert np.all(np.abs(J_an - J_fd) / scale < 1e-5)
            checked += 1


class TestOptimizePose:
    def test_recovers_ground_truth_from_perturbation(self):
        rng = np.random.default_rng(1)
        poses, points = make_scene(rng)
        truth = poses[4]
        for weighting in (STANDARD, SYMMETRIC):
            start = Pose(
                so3_exp(rng.normal(scale=0.05 / np.sqrt(3), size=3))
                @ truth.rotation,
                truth.translation + rng.normal(scale=0.05 / np.sqrt(3), size=3),
            )
            terms = [t for t in make_observations(poses, points, weighting)
                     if t.kf_id == 4]
            problem = OptimizationProblem(
                cam=CAM, poses={**poses, 4: start}, points=points,
                observations=terms, weighting=weighting,
                variable_pose_ids=(4,),
            )
            result = optimize_pose(problem)
            assert np.allclose(result.pose.translation, truth.translation,
                               atol=1e-6)
            assert np.allclose(result.pose.rotation, truth.rotation, atol=1e-6)
            assert all(result.inlier.values())

    def test_already_optimal_pose_is_fixed_point(self):
        rng = np.random.default_rng(2)
        poses, points = make_scene(rng)
        terms = [t for t in make_observations(poses, points, STANDARD)
                 if t.kf_id == 3]
        problem = OptimizationProblem(
            cam=CAM, poses=poses, points=points, observations=terms,
            weighting=STANDARD, variable_pose_ids=(3,),
        )
        result = optimize_pose(problem)
        assert result.cost == pytest.approx(0.0, abs=1e-18)
        assert result.pose.almost_equal(poses[3], tol=1e-12)

    def test_robust_to_gross_outliers(self):
        rng = np.random.default_rng(3)
        poses, points = make_scene(rng, n_points=100)
        truth = poses[4]
        start = Pose(
            so3_exp(rng.normal(scale=0.02, size=3)) @ truth.rotation,
            truth.translation + rng.normal(scale=0.02, size=3),
        )
        base_terms = [
            t for t in make_observations(poses, points, STANDARD, noise=1.0,
                                         rng=np.random.default_rng(7))
            if t.kf_id == 4
        ]
        corrupt_rng = np.random.default_rng(8)
        corrupt = {
            t.point_id for t in base_terms if corrupt_rng.uniform() < 0.3
        }

        def run(with_outliers):
            terms = []
            for t in base_terms:
                if with_outliers and t.point_id in corrupt:
                    draw = np.random.default_rng(1000 + t.point_id)
                    t = ObsTerm(t.point_id, t.kf_id,
                                (draw.uniform(0, 640), draw.uniform(0, 480)),
                                t.sigma2)
                terms.append(t)
            problem = OptimizationProblem(
                cam=CAM, poses={**poses, 4: start}, points=points,
                observations=terms, weighting=STANDARD,
                variable_pose_ids=(4,),
            )
            result = optimize_pose(problem)
            return np.linalg.norm(result.pose.translation - truth.translation)

        clean = run(False)
        contaminated = run(True)
        assert contaminated < 5 * clean

    def test_too_few_observations_raise(self):
        rng = np.random.default_rng(4)
        poses, points = make_scene(rng, n_points=5)
        terms = [t for t in make_observations(poses, points, STANDARD)
                 if t.kf_id == 2]
        problem = OptimizationProblem(
            cam=CAM, poses=poses, points=points, observations=terms,
            weighting=STANDARD, variable_pose_ids=(2,),
        )
        with pytest.raises(DegenerateProblemError):
            optimize_pose(problem)


class TestLocalBundleAdjustment:
    def build(self, rng, weighting, noise=0.0, perturb=True):
        poses, points = make_scene(rng, n_poses=5, n_points=40)
        terms = make_observations(poses, points, weighting, noise=noise,
                                  rng=rng)
        start_poses, start_points = poses, points
        if perturb:
            start_poses, start_points = perturbed(
                poses, points, rng, rot=0.01, trans=0.01, pt=0.02,
                skip=(1, 2),
            )
        problem = OptimizationProblem(
            cam=CAM, poses=start_poses, points=start_points,
            observations=terms, weighting=weighting,
            variable_pose_ids=(3, 4, 5),
            variable_point_ids=tuple(sorted(points)),
        )
        return poses, points, problem

    @pytest.mark.parametrize("weighting", [STANDARD, SYMMETRIC],
                             ids=["standard", "symmetric"])
    def test_noiseless_window_converges_to_truth(self, weighting):
        rng = np.random.default_rng(5)
        poses, points, problem = self.build(rng, weighting)
        result = local_bundle_adjustment(problem)
        # reprojection RMSE after convergence
        errs = []
        for t in problem.observations:
            q = result.poses[t.kf_id].inverse().apply(result.points[t.point_id])
            errs.append(project(q, CAM) - np.asarray(t.uv))
        rmse = np.sqrt(np.mean(np.square(errs)))
        assert rmse < 1e-8
        for k in (3, 4, 5):
            assert np.allclose(result.poses[k].translation,
                               poses[k].translation, atol=1e-6)

    def test_keep_all_preserves_observation_count(self):
        rng = np.random.default_rng(6)
        _, _, problem = self.build(rng, SYMMETRIC, noise=2.0)
        n_before = len(problem.observations)
        result = local_bundle_adjustment(
            problem, OutlierPolicy(mode=OutlierMode.KEEP_ALL_ROBUST)
        )
        assert result.removed == []
        assert len(problem.observations) == n_before

    def test_early_removal_deletes_exactly_the_planted_outliers(self):
        rng = np.random.default_rng(7)
        poses, points = make_scene(rng, n_poses=4, n_points=30)
        terms = make_observations(poses, points, STANDARD, noise=0.2, rng=rng)
        planted = {(5, 3), (12, 4), (20, 2)}
        corrupted = []
        for t in terms:
            if (t.point_id, t.kf_id) in planted:
                t = ObsTerm(t.point_id, t.kf_id,
                            (t.uv[0] + 40.0, t.uv[1] - 35.0), t.sigma2,
                            t.ref_kf_id, t.ref_uv, t.ref_sigma2)
            corrupted.append(t)
        # points stay fixed so a planted outlier cannot drag its siblings
        # over the threshold
        problem = OptimizationProblem(
            cam=CAM, poses=poses, points=points, observations=corrupted,
            weighting=STANDARD,
            variable_pose_ids=(3, 4),
        )
        result = local_bundle_adjustment(
            problem, OutlierPolicy(mode=OutlierMode.EARLY_REMOVAL)
        )
        assert set(result.removed) == planted

    def test_gauge_free_problem_rejected(self):
        rng = np.random.default_rng(8)
        poses, points = make_scene(rng, n_poses=2, n_points=10)
        terms = make_observations(poses, points, STANDARD)
        with pytest.raises(DegenerateProblemError):
            OptimizationProblem(
                cam=CAM, poses=poses, points=points, observations=terms,
                weighting=STANDARD, variable_pose_ids=(1, 2),
            )

    def test_underobserved_variable_point_rejected(self):
        rng = np.random.default_rng(9)
        poses, points = make_scene(rng, n_poses=2, n_points=4)
        terms = [t for t in make_observations(poses, points, STANDARD)
                 if not (t.point_id == 2 and t.kf_id == 2)]
        with pytest.raises(DegenerateProblemError):
            OptimizationProblem(
                cam=CAM, poses=poses, points=points, observations=terms,
                weighting=STANDARD, variable_pose_ids=(2,),
                variable_point_ids=(2,),
            )


class TestSolverProperties:
    def test_monotone_decrease(self):
        rng = np.random.default_rng(10)
        poses, points = make_scene(rng, n_poses=3, n_points=25)
        terms = make_observations(poses, points, SYMMETRIC, noise=1.0, rng=rng)
        start_poses, start_points = perturbed(poses, points, rng, skip=(1,))
        problem = OptimizationProblem(
            cam=CAM, poses=start_poses, points=start_points,
            observations=terms, weighting=SYMMETRIC,
            variable_pose_ids=(2, 3),
            variable_point_ids=tuple(sorted(points)),
        )
        trace = []
        local_bundle_adjustment(problem, trace=trace)
        costs = [rec.cost for rec in trace]
        assert all(b < a for a, b in zip(costs, costs[1:])) or len(costs) <= 1

    def test_bit_identical_reruns(self):
        rng = np.random.default_rng(11)
        poses, points = make_scene(rng, n_poses=3, n_points=25)
        terms = make_observations(poses, points, SYMMETRIC, noise=1.0, rng=rng)
        start_poses, start_points = perturbed(poses, points, rng, skip=(1,))

        def run():
            problem = OptimizationProblem(
                cam=CAM,
                poses=dict(start_poses),
                points={k: v.copy() for k, v in start_points.items()},
                observations=list(terms), weighting=SYMMETRIC,
                variable_pose_ids=(2, 3),
                variable_point_ids=tuple(sorted(points)),
            )
            trace = []
            result = local_bundle_adjustment(problem, trace=trace)
            return result, [(r.cost, r.lambda_, r.step_norm) for r in trace]

        res_a, trace_a = run()
        res_b, trace_b = run()
        assert trace_a == trace_b
        for k in res_a.poses:
            assert np.array_equal(res_a.poses[k].rotation, res_b.poses[k].rotation)
            assert np.array_equal(res_a.poses[k].translation,
                                  res_b.poses[k].translation)
        for p in res_a.points:
            assert np.array_equal(res_a.points[p], res_b.points[p])

    def test_evaluate_cost_zero_residual(self):
        rng = np.random.default_rng(12)
        poses, points = make_scene(rng, n_poses=2, n_points=8)
        terms = make_observations(poses, points, SYMMETRIC)
        problem = OptimizationProblem(
            cam=CAM, poses=poses, points=points, observations=terms,
            weighting=SYMMETRIC, variable_pose_ids=(2,),
        )
        report = evaluate_cost(problem)
        assert report.total == pytest.approx(0.0, abs=1e-16)
        assert report.behind_camera == []

    def test_evaluate_cost_hand_value(self):
        pose = Pose.identity()
        point = np.array([0.0, 0.0, 5.0])
        # 2 px offset, sigma2_r = 2: m2 = 4/2 = 2 (inside the kernel)
        terms = [ObsTerm(1, 1, (322.0, 240.0), 2.0)]
        problem = OptimizationProblem(
            cam=CAM, poses={1: pose}, points={1: point}, observations=terms,
            weighting=STANDARD,
        )
        report = evaluate_cost(problem)
        assert report.total == pytest.approx(2.0)
        assert report.m2_forward[(1, 1)] == pytest.approx(2.0)

    def test_evaluate_cost_huber_region(self):
        pose = Pose.identity()
        point = np.array([0.0, 0.0, 5.0])
        # 20 px offset: m2 = 200, sqrt = 14.14 > delta -> linear branch
        terms = [ObsTerm(1, 1, (340.0, 240.0), 2.0)]
        problem = OptimizationProblem(
            cam=CAM, poses={1: pose}, points={1: point}, observations=terms,
            weighting=STANDARD,
        )
        delta = STANDARD.huber_delta
        expected = 2 * delta * np.sqrt(200.0) - delta**2
        assert evaluate_cost(problem).total == pytest.approx(expected)

    def test_symmetric_cost_invariant_under_window_reversal(self):
        rng = np.random.default_rng(13)
        poses, points = make_scene(rng, n_poses=4, n_points=15)
        terms = make_observations(poses, points, SYMMETRIC, noise=0.5, rng=rng)
        problem = OptimizationProblem(
            cam=CAM, poses=poses, points=points, observations=terms,
            weighting=SYMMETRIC, variable_pose_ids=(2, 3, 4),
        )
        total_fwd = evaluate_cost(problem).total
        reversed_problem = OptimizationProblem(
            cam=CAM, poses=poses, points=points,
            observations=list(reversed(terms)), weighting=SYMMETRIC,
            variable_pose_ids=(2, 3, 4),
        )
        assert evaluate_cost(reversed_problem).total == pytest.approx(
            total_fwd, rel=1e-15
        )

    def test_behind_camera_capped_and_flagged(self):
        pose = Pose.identity()
        point = np.array([0.0, 0.0, -5.0])
        terms = [
            ObsTerm(1, 1, (322.0, 240.0), 2.0),
            ObsTerm(2, 1, (100.0, 100.0), 2.0),
        ]
        problem = OptimizationProblem(
            cam=CAM, poses={1: pose},
            points={1: point, 2: np.array([0.0, 0.0, 5.0])},
            observations=terms, weighting=STANDARD,
        )
        report = evaluate_cost(problem)
        assert (1, 1) in report.behind_camera
        assert np.isfinite(report.total)
