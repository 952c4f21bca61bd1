import numpy as np
import pytest

from gbp_ba import (
    BuildError,
    Intrinsics,
    ProblemSpec,
    ScheduleParams,
    assemble,
    build,
    generate_priors,
    perturb,
    solve,
    synthesize,
)
from gbp_ba.camera import jacobian_many
from gbp_ba.dense_oracle import stack_states
from gbp_ba.factor_graph import huber_energy


def one_factor_problem(z=(0.0, 0.0), sigma=1.0):
    return ProblemSpec(
        intrinsics=Intrinsics(1.0, 1.0, 0.0, 0.0),
        kf_init=np.zeros((1, 6)),
        lm_init=np.array([[0.0, 0.0, 1.0]]),
        meas_kf=[0],
        meas_lm=[0],
        meas_uv=[list(z)],
        meas_sigma=[sigma],
    )


class TestBuild:
    def test_minimal_topology(self):
        graph = build(one_factor_problem())
        assert graph.n_variables == 2
        assert graph.n_measurement_factors == 1
        assert graph.n_factor_nodes == 3  # 2 priors + 1 measurement

    def test_desk_scale_counts(self):
        # 63 keyframes, 2913 landmarks, 13514 measurements ->
        # 2976 variables and 16490 factor nodes
        rng = np.random.default_rng(0)
        n_kf, n_lm, n_meas = 63, 2913, 13514
        meas_lm = np.concatenate([np.arange(n_lm), rng.integers(0, n_lm, n_meas - n_lm)])
        meas_kf = rng.integers(0, n_kf, n_meas)
        prob = ProblemSpec(
            kf_init=np.tile([0, 0, 0, 0, 0, 0.0], (n_kf, 1)),
            lm_init=rng.uniform(-1, 1, (n_lm, 3)) + [0, 0, 5.0],
            meas_kf=meas_kf,
            meas_lm=meas_lm,
            meas_uv=rng.uniform(0, 480, (n_meas, 2)),
            meas_sigma=np.ones(n_meas),
        )
        graph = build(prob)
        assert graph.n_variables == 2976
        assert graph.n_factor_nodes == 16490

    def test_empty_measurements_solve_returns_prior_means(self):
        prob = ProblemSpec(
            kf_init=np.array([[0.1, 0, 0, 1.0, 2.0, 3.0]]),
            lm_init=np.array([[4.0, 5.0, 6.0]]),
        )
        graph = build(prob)
        report = solve(graph, ScheduleParams(max_iters=5))
        assert report.converged and report.iterations == 0
        np.testing.assert_array_equal(report.kf_states, prob.kf_init)
        np.testing.assert_array_equal(report.lm_states, prob.lm_init)

    def test_dangling_ids_error(self):
        prob = one_factor_problem()
        prob.meas_lm = np.array([5])
        with pytest.raises(ValueError, match="landmark 5"):
            prob.validate()

    def test_factor_rank_two_after_linearisation(self):
        graph = build(synthesize(3, 20, seed=1))
        eigs = np.linalg.eigvalsh(graph.f_lam)
        assert np.all(eigs[:, -3] < 1e-9 * np.maximum(eigs[:, -1], 1.0))
        assert graph.validate() == {"belief_not_psd": 0, "factor_rank": 0, "asymmetry": 0}

    def test_messages_start_at_zero_information(self):
        graph = build(synthesize(3, 20, seed=1))
        assert not graph.f_msg_kf_eta.any() and not graph.f_msg_kf_lam.any()
        assert not graph.f_msg_lm_eta.any() and not graph.f_msg_lm_lam.any()


class TestPriors:
    def test_single_factor_prior_matches_information_diag(self):
        prob = synthesize(2, 12, seed=3, pixel_sigma=0.0)
        graph = build(prob)
        # landmark observed exactly twice: prior diag == summed J' Sigma^-1 J diag
        jac = jacobian_many(graph.f_lin[:, :6], graph.f_lin[:, 6:], graph.intrinsics)
        for j in range(graph.n_landmarks):
            rows = np.flatnonzero(graph.f_lm == j)
            expect = np.zeros(3)
            for m in rows:
                block = jac[m][:, 6:].T @ jac[m][:, 6:] / graph.f_sigma[m] ** 2
                expect += np.diag(block)
            np.testing.assert_allclose(graph.lm_prior_diag0[j], expect, rtol=1e-12)

    def test_keyframe_prior_matches_information_diag(self):
        prob = synthesize(2, 12, seed=3, pixel_sigma=0.0)
        graph = build(prob)
        jac = jacobian_many(graph.f_lin[:, :6], graph.f_lin[:, 6:], graph.intrinsics)
        for i in range(graph.n_keyframes):
            rows = np.flatnonzero(graph.f_kf == i)
            expect = np.zeros(6)
            for m in rows:
                block = jac[m][:, :6].T @ jac[m][:, :6] / graph.f_sigma[m] ** 2
                expect += np.diag(block)
            np.testing.assert_allclose(graph.kf_prior_diag0[i], expect, rtol=1e-12)

    def test_unobserved_variable_gets_unit_fallback(self):
        prob = ProblemSpec(
            kf_init=np.zeros((1, 6)),
            lm_init=np.array([[0, 0, 1.0], [5.0, 5.0, 5.0]]),
            meas_kf=[0],
            meas_lm=[0],
            meas_uv=[[0.0, 0.0]],
            meas_sigma=[1.0],
        )
        graph = build(prob)
        assert graph.lm_prior_fallback[1]
        np.testing.assert_array_equal(graph.lm_prior_diag0[1], np.ones(3))
        np.testing.assert_array_equal(graph.lm_prior_mean[1], [5.0, 5.0, 5.0])

    def test_prior_mean_fixed_under_weakening(self):
        from gbp_ba.engine import run

        graph = build(synthesize(3, 20, seed=5))
        mean_before = graph.kf_prior_mean.copy()
        run(graph, ScheduleParams(max_iters=30), n=15)
        np.testing.assert_array_equal(graph.kf_prior_mean, mean_before)
        # current prior eta / diag still encode the same mean
        eta, diag = graph.prior_information("keyframe")
        np.testing.assert_allclose(eta / diag, mean_before, rtol=1e-12)

    def test_weakening_schedule(self):
        from gbp_ba.engine import iterate

        graph = build(synthesize(2, 15, seed=6))
        scales = []
        for _ in range(14):
            rep = iterate(graph, ScheduleParams())
            scales.append(rep.prior_scale)
        expect = [0.01 ** (min(t, 10) / 10) for t in range(14)]
        np.testing.assert_allclose(scales, expect, rtol=1e-12)
        # weakened to exactly 1/100 from iteration 10 onward, monotone before
        assert scales[10] == scales[11] == scales[13] == pytest.approx(0.01)
        assert all(scales[i + 1] <= scales[i] for i in range(13))

    def test_regenerate_uses_current_linearisation(self):
        graph = build(synthesize(3, 20, seed=7))
        diag_before = graph.lm_prior_diag0.copy()
        generate_priors(graph)
        np.testing.assert_array_equal(graph.lm_prior_diag0, diag_before)


class TestEnergyAndAre:
    def test_zero_at_prior_means_with_zero_residuals(self):
        prob = synthesize(3, 20, seed=8, pixel_sigma=0.0)
        graph = build(prob)  # states at ground truth, priors centred there
        assert graph.energy() < 1e-9
        assert graph.average_reprojection_error() < 1e-9

    def test_single_measurement_quadratic_term(self):
        sigma = 0.5
        prob = one_factor_problem(z=(0.3, -0.4), sigma=sigma)
        graph = build(prob)
        r2 = 0.3**2 + 0.4**2
        np.testing.assert_allclose(graph.energy(), r2 / sigma**2, rtol=1e-12)

    def test_huber_modified_term(self):
        # residual 5 px at sigma 1 -> mahalanobis 5 > 2: linear contribution
        prob = one_factor_problem(z=(3.0, 4.0), sigma=1.0)
        graph = build(prob)
        np.testing.assert_allclose(graph.energy(), 2 * 2.0 * 5.0 - 4.0, rtol=1e-12)
        np.testing.assert_allclose(graph.energy(), huber_energy(5.0, 2.0), rtol=1e-12)

    def test_matches_dense_quadratic_form(self):
        # freshly built graph: quadratic form of the assembled system at the
        # linearisation point equals the graph energy of the linearised model
        prob = perturb(synthesize(4, 30, seed=9, pixel_sigma=0.7), 0.03, "backproject", seed=10)
        graph = build(prob)
        system = assemble(graph)
        np.testing.assert_allclose(
            system.quadratic_form(stack_states(graph)),
            graph.energy(),
            rtol=1e-10,
        )

    def test_are_offset_hypot(self):
        prob = one_factor_problem(z=(3.0, 4.0))
        graph = build(prob)
        np.testing.assert_allclose(graph.average_reprojection_error(), 5.0, rtol=1e-14)

    def test_read_only(self):
        graph = build(synthesize(3, 20, seed=11, pixel_sigma=0.5))
        before = {
            k: v.copy() for k, v in vars(graph).items() if isinstance(v, np.ndarray)
        }
        graph.energy()
        graph.average_reprojection_error()
        graph.classify_outliers()
        for k, v in before.items():
            np.testing.assert_array_equal(getattr(graph, k), v, err_msg=k)

    def test_behind_camera_sentinel(self):
        prob = one_factor_problem()
        graph = build(prob)
        graph.lm_state = np.array([[0.0, 0.0, -1.0]])  # shove landmark behind
        assert graph.average_reprojection_error() == pytest.approx(1e6)
        assert graph.notes["are_behind_camera"] == 1


class TestViews:
    def test_variable_views(self):
        graph = build(synthesize(2, 10, seed=12))
        kf = graph.keyframe(1)
        assert kf.kind == "keyframe" and kf.dim == 6 and kf.id == 1
        np.testing.assert_array_equal(kf.state, graph.kf_state[1])
        lm = graph.landmark(0)
        assert lm.kind == "landmark" and lm.dim == 3
        # target prior is 1/100 of initial
        np.testing.assert_allclose(
            lm.prior_target.lam, lm.prior_initial.lam / 100.0, rtol=1e-12
        )

    def test_factor_view(self):
        graph = build(one_factor_problem(z=(0.25, -0.5), sigma=2.0))
        f = graph.factor(0)
        assert f.keyframe_id == 0 and f.landmark_id == 0
        np.testing.assert_array_equal(f.z, [0.25, -0.5])
        np.testing.assert_array_equal(f.sigma_meas, 4.0 * np.eye(2))
        assert f.huber_nsigma == 2.0
        assert f.iters_since_relin == 0
        assert f.linearization_valid
        assert f.factor.dim == 9 and f.msg_to_keyframe.dim == 6 and f.msg_to_landmark.dim == 3


class TestIncrementalMutation:
    def test_add_keyframe_copies_latest_pose(self):
        graph = build(synthesize(3, 15, seed=13))
        latest = graph.kf_state[-1].copy()
        new_id = graph.add_keyframe()
        assert new_id == 3
        np.testing.assert_array_equal(graph.kf_state[new_id], latest)

    def test_add_measurement_adds_one_factor_with_zero_messages(self):
        graph = build(synthesize(3, 15, seed=13))
        n_before = graph.n_measurement_factors
        fid = graph.add_measurement(0, 1, np.array([320.0, 240.0]), sigma=1.0)
        assert graph.n_measurement_factors == n_before + 1
        f = graph.factor(fid)
        assert not f.msg_to_keyframe.lam.any() and not f.msg_to_landmark.lam.any()

    def test_duplicate_measurement_allowed_and_flagged(self):
        graph = build(synthesize(3, 15, seed=13))
        kf, lm = int(graph.f_kf[0]), int(graph.f_lm[0])
        before = graph.notes["duplicate_measurement"]
        graph.add_measurement(kf, lm, graph.f_z[0])
        assert graph.notes["duplicate_measurement"] == before + 1

    def test_dangling_id_raises(self):
        graph = build(synthesize(3, 15, seed=13))
        with pytest.raises(BuildError, match="keyframe 99"):
            graph.add_measurement(99, 0, np.zeros(2))
        with pytest.raises(BuildError, match="landmark 99"):
            graph.add_measurement(0, 99, np.zeros(2))

    def test_existing_state_untouched_by_addition(self):
        graph = build(synthesize(3, 15, seed=13))
        from gbp_ba.engine import run

        run(graph, ScheduleParams(), n=12)
        beliefs = graph.kf_belief_eta.copy()
        msgs = graph.f_msg_kf_eta.copy()
        lins = graph.f_lin.copy()
        it = graph.iteration
        kf = graph.add_keyframe()
        lm = graph.add_landmark(np.array([0.0, 0.0, 1.2]))
        graph.add_measurement(kf, lm, np.array([320.0, 240.0]))
        np.testing.assert_array_equal(graph.kf_belief_eta[:3], beliefs)
        np.testing.assert_array_equal(graph.f_msg_kf_eta[: msgs.shape[0]], msgs)
        np.testing.assert_array_equal(graph.f_lin[: lins.shape[0]], lins)
        assert graph.iteration == it  # no reset

    def test_new_variable_prior_from_adjacent_factors(self):
        graph = build(synthesize(3, 15, seed=13))
        lm_id = graph.add_landmark(np.array([0.0, 0.0, 1.2]))
        assert graph.lm_prior_fallback[lm_id]  # nothing adjacent yet
        uv, _ = __import__("gbp_ba").camera.project_many(
            graph.kf_state[0][None], graph.lm_state[lm_id][None], graph.intrinsics
        )
        graph.add_measurement(0, lm_id, uv[0])
        assert not graph.lm_prior_fallback[lm_id]
        jac = jacobian_many(graph.f_lin[-1:, :6], graph.f_lin[-1:, 6:], graph.intrinsics)[0]
        expect = np.diag(jac[:, 6:].T @ jac[:, 6:])
        np.testing.assert_allclose(graph.lm_prior_diag0[lm_id], expect, rtol=1e-12)

    def test_incremental_beats_cold_restart_on_same_graph(self):
        prob = perturb(synthesize(6, 60, seed=14, pixel_sigma=0.5), 0.05, "backproject", seed=15)
        graph = build(prob)
        sched = ScheduleParams(max_iters=400)
        solve(graph, sched)
        # drop in one more keyframe observing existing landmarks
        new_kf = graph.add_keyframe()
        seen = np.unique(graph.f_lm[graph.f_kf == graph.n_keyframes - 2])[:12]
        from gbp_ba.camera import project_many

        uv, _ = project_many(
            np.repeat(graph.kf_state[new_kf][None], seen.size, 0),
            graph.lm_state[seen],
            graph.intrinsics,
        )
        graph.add_measurements(np.full(seen.size, new_kf), seen, uv, np.ones(seen.size))
        warm = solve(graph.copy(), sched)
        cold = solve(graph.cold_restart(), sched)
        assert warm.converged
        assert warm.iterations < cold.iterations

    def test_copy_independent(self):
        graph = build(synthesize(3, 15, seed=16))
        clone = graph.copy()
        clone.kf_state += 1.0
        assert not np.allclose(graph.kf_state, clone.kf_state)


def test_float32_mode():
    graph = build(synthesize(3, 20, seed=17, pixel_sigma=0.5)).astype(np.float32)
    assert graph.kf_state.dtype == np.float32
    from gbp_ba.engine import run

    run(graph, ScheduleParams(), n=5)
    assert graph.kf_belief_eta.dtype == np.float32
    assert np.isfinite(graph.average_reprojection_error())
