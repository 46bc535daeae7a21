"""Continuation solver tests: predictor/corrector identities on closed-form
systems, snap-through tracing, and the load-control failure mode at limit
points."""

import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings as hsettings, strategies as st

from damrom import fem, meshing, solver
from damrom.material import PARAMS_PLATE


class LinearSpring:
    """1-dof linear system r = k u, reference load p."""

    ndof_free = 1

    def __init__(self, k=10.0, p=2.0):
        self.k = k
        self.p = p
        self.p0_free = np.array([p])
        self.res_scale_free = np.array([abs(p)])

    def assemble(self, u, tangent=True, elements=None):
        return solver._ScalarAsm(np.array([self.k * u[0]]), np.array([[self.k]]))

    def commit(self):
        pass

    def u_monitor(self, u):
        return float(u[0])

    def dbar_max(self, u):
        return 0.0


def block_provider(sigma0=None, y0=1e12):
    """Four-element cube, clamped on x0, pulled on x1."""
    mesh = meshing.gen_block(1.0, 1.0, 1.0, 2, 2, 1)
    params = PARAMS_PLATE
    if sigma0 is not None:
        params = dataclasses.replace(params, sigma0=sigma0)
    params = dataclasses.replace(params, y0=y0)
    dm = fem.DofMap.build(mesh, {"x0": (0, 1, 2)})
    return fem.FemProvider(mesh, params, dm, [fem.TractionLoad("x1", (1.0, 0.0, 0.0))])


class TestSignSwitch:
    def test_sign_change_with_decreasing_history_flips(self):
        # history 2.0 -> 1.5 approaching the axis, then crossing
        assert solver.predictor_sign_switch(-0.5, 1.5, 2.0)

    def test_mirrored_sequence_flips(self):
        assert solver.predictor_sign_switch(0.5, -1.5, -2.0)

    def test_monotone_stiffening_keeps_sign(self):
        assert not solver.predictor_sign_switch(1.2, 1.1, 1.0)

    def test_sign_change_without_monotone_history_keeps_sign(self):
        assert not solver.predictor_sign_switch(-0.5, 1.5, 1.0)

    def test_seeded_histories_never_fire_on_first_steps(self):
        assert not solver.predictor_sign_switch(1.0, 1.0, 1.0)
        assert not solver.predictor_sign_switch(0.7, 1.0, 1.0)


class TestNewtonSolve:
    def test_linear_problem_converges_in_one_iteration(self):
        sys = LinearSpring(k=10.0, p=2.0)
        u, out, info = solver.newton_solve(sys, np.zeros(1), 3.0, solver.NewtonSettings())
        assert info.converged
        assert info.n_iter == 1
        assert u[0] == pytest.approx(3.0 * 2.0 / 10.0, rel=1e-14)

    def test_zero_load_is_free(self):
        sys = LinearSpring()
        u, out, info = solver.newton_solve(sys, np.zeros(1), 0.0, solver.NewtonSettings())
        assert info.converged
        assert info.n_iter == 0
        assert u[0] == 0.0

    def test_quadratic_contraction_on_smooth_step(self):
        truss = solver.TwoBarTruss()
        _, lam_lim = truss.limit_points()
        u, out, info = solver.newton_solve(
            truss, np.zeros(2), 0.5 * lam_lim, solver.NewtonSettings()
        )
        assert info.converged
        assert 2 <= info.n_iter <= 8

    def test_nonconvergence_is_reported_not_raised(self):
        truss = solver.TwoBarTruss()
        _, lam_lim = truss.limit_points()
        # one iteration cannot solve a nonlinear problem at half the limit load
        u, out, info = solver.newton_solve(
            truss, np.zeros(2), 0.5 * lam_lim, solver.NewtonSettings(max_iter=1)
        )
        assert not info.converged


class TestLinearArcPath:
    def test_spring_path_stays_on_exact_line(self):
        sys = LinearSpring(k=10.0, p=2.0)
        res = solver.run_arc_length(sys, solver.ArcSettings(dlam0=0.1, n_steps=6))
        for p in res.points:
            assert p.u[0] == pytest.approx(p.lam * sys.p / sys.k, abs=1e-14)

    def test_first_step_reproduces_plain_load_increment(self):
        sys = LinearSpring(k=10.0, p=2.0)
        res = solver.run_arc_length(sys, solver.ArcSettings(dlam0=0.1, n_steps=1))
        assert res.points[0].lam == pytest.approx(0.1, rel=1e-12)

    def test_explicit_ds0_sets_predictor_load_increment(self):
        # predictor load increment is ds0 * k / p for the linear spring
        sys = LinearSpring(k=10.0, p=2.0)
        ds0 = 0.05
        res = solver.run_arc_length(sys, solver.ArcSettings(dlam0=0.1, ds0=ds0, n_steps=1))
        assert res.points[0].lam == pytest.approx(ds0 * sys.k / sys.p, rel=1e-12)
        assert res.points[0].predictor_norm == pytest.approx(ds0, rel=1e-12)

    @given(
        k=st.floats(0.5, 50.0),
        p=st.floats(0.5, 5.0),
        dlam0=st.floats(0.01, 0.5),
    )
    @hsettings(max_examples=25, deadline=None)
    def test_spring_line_property(self, k, p, dlam0):
        sys = LinearSpring(k=k, p=p)
        res = solver.run_arc_length(sys, solver.ArcSettings(dlam0=dlam0, n_steps=4))
        for pt in res.points:
            assert abs(pt.u[0] - pt.lam * p / k) <= 1e-10 * max(abs(pt.u[0]), 1.0)


class TestTrussSnapThrough:
    def run(self, n_steps=60):
        truss = solver.TwoBarTruss(ea=1.0, h0=1.0, w=2.0)
        res = solver.run_arc_length(truss, solver.ArcSettings(dlam0=0.01, n_steps=n_steps))
        return truss, res

    def test_every_point_on_analytic_curve(self):
        truss, res = self.run()
        for p in res.points:
            assert abs(p.lam - truss.analytic_lambda(p.u_monitor)) <= 1e-8

    def test_full_snap_through_is_traced(self):
        truss, res = self.run()
        d_lim, lam_lim = truss.limit_points()
        defl = res.u_monitor
        lam = res.lam
        # deflection advances monotonically through and far beyond the limit point
        assert np.all(np.diff(defl) > 0.0)
        assert defl[-1] > 2.0 * d_lim
        # before the snap completes the load peaks at the first limit point
        pre = lam[defl <= truss.h0]
        assert pre.max() <= lam_lim + 1e-8
        assert pre.max() >= 0.98 * lam_lim
        assert lam.min() < 0.0  # descending branch reached
        # predictor reverses once at each of the two limit points
        signs = np.array([p.predictor_sign for p in res.points])
        flips = np.flatnonzero(np.diff(signs) != 0.0)
        d_lim2 = truss.h0 * (1.0 + 1.0 / np.sqrt(3.0))
        assert len(flips) == 2
        assert defl[flips[0] - 1] <= d_lim <= defl[flips[0] + 1]
        assert defl[flips[1] - 1] <= d_lim2 <= defl[flips[1] + 1]

    def test_predictor_norm_equals_radius(self):
        _, res = self.run(n_steps=20)
        for p in res.points:
            assert abs(p.predictor_norm - p.ds) <= 1e-12 * p.ds

    def test_symmetry_is_preserved(self):
        _, res = self.run(n_steps=20)
        assert max(abs(p.u[0]) for p in res.points) == 0.0

    @given(
        ea=st.floats(0.5, 10.0),
        h0=st.floats(0.5, 2.0),
        w=st.floats(1.0, 4.0),
    )
    @hsettings(max_examples=15, deadline=None)
    def test_curve_agreement_property(self, ea, h0, w):
        truss = solver.TwoBarTruss(ea=ea, h0=h0, w=w)
        res = solver.run_arc_length(truss, solver.ArcSettings(dlam0=0.01, n_steps=12))
        for p in res.points:
            assert abs(p.lam - truss.analytic_lambda(p.u_monitor)) <= 1e-8


class TestAsymmetricTruss:
    """Unequal spans make the apex path two-dimensional, so the corrector
    constraint is exercised away from the collinear special case."""

    def run(self):
        truss = solver.TwoBarTruss(ea=1.0, h0=1.0, w=(2.0, 1.2))
        res = solver.run_arc_length(truss, solver.ArcSettings(dlam0=0.01, n_steps=50))
        return truss, res

    def test_orthogonality_every_iteration(self):
        _, res = self.run()
        orth = np.array([p.orth_max for p in res.points])
        assert orth.max() <= 1e-12
        assert orth.max() > 0.0  # the measure is nondegenerate here

    def test_apex_moves_sideways(self):
        _, res = self.run()
        assert max(abs(p.u[0]) for p in res.points) > 1e-3

    def test_accepted_points_satisfy_analytic_equilibrium(self):
        truss, res = self.run()
        for p in res.points:
            apex = np.array([p.u[0], truss.h0 + p.u[1]])
            r = np.zeros(2)
            for ea, l0, sup in zip(truss.ea, truss.l0, truss.supports):
                d = apex - sup
                strain = (d @ d - l0**2) / (2.0 * l0**2)
                r += ea * strain * d / l0
            assert np.max(np.abs(r - p.lam * truss.p0_free)) <= 1e-8

    def test_snap_through_traversed(self):
        _, res = self.run()
        lam = res.lam
        assert lam.min() < 0.0 < lam.max()


class TestLoadControlAtLimit:
    def test_incremental_load_control_fails_past_limit(self):
        truss = solver.TwoBarTruss(ea=1.0, h0=1.0, w=2.0)
        _, lam_lim = truss.limit_points()
        ramp = np.linspace(lam_lim / 20, 1.05 * lam_lim, 20)
        with pytest.raises(solver.SolveError) as exc:
            # plain textbook load stepping, no bisection rescue
            solver.run_load_sequence(
                truss, ramp, solver.NewtonSettings(max_iter=25), max_halvings=0
            )
        partial = exc.value.partial
        assert partial is not None
        assert 0 < len(partial.points) < 20
        # everything accepted before the failure sits below the limit load
        assert partial.lam.max() < lam_lim

    def test_same_ramp_converges_below_limit(self):
        truss = solver.TwoBarTruss(ea=1.0, h0=1.0, w=2.0)
        _, lam_lim = truss.limit_points()
        ramp = np.linspace(lam_lim / 20, 0.9 * lam_lim, 10)
        res = solver.run_load_sequence(truss, ramp)
        assert len(res.points) == 10
        for p in res.points:
            assert abs(p.lam - truss.analytic_lambda(p.u_monitor)) <= 1e-8

    def test_arc_length_succeeds_where_load_control_fails(self):
        truss = solver.TwoBarTruss(ea=1.0, h0=1.0, w=2.0)
        d_lim, lam_lim = truss.limit_points()
        res = solver.run_arc_length(truss, solver.ArcSettings(dlam0=0.01, n_steps=40))
        assert res.u_monitor.max() > d_lim  # continued past the limit point


class TestToleranceConsistency:
    def test_tightening_tolerances_barely_moves_the_path(self):
        loose = solver.NewtonSettings(tol_energy=1e-10, tol_force=1e-8)
        tight = solver.NewtonSettings(tol_energy=1e-11, tol_force=1e-9)
        res_l = solver.run_arc_length(
            solver.TwoBarTruss(), solver.ArcSettings(dlam0=0.01, n_steps=25, newton=loose)
        )
        res_t = solver.run_arc_length(
            solver.TwoBarTruss(), solver.ArcSettings(dlam0=0.01, n_steps=25, newton=tight)
        )
        dlam = np.abs(res_l.lam - res_t.lam)
        du = np.abs(res_l.u_monitor - res_t.u_monitor)
        assert dlam.max() <= 1e-8
        assert du.max() <= 1e-8


class TestRunResult:
    def test_snapshot_matrices_mirror_points(self):
        res = solver.run_arc_length(
            solver.TwoBarTruss(), solver.ArcSettings(dlam0=0.02, n_steps=5)
        )
        U = res.snapshots()
        R = res.force_snapshots()
        assert U.shape == (2, 5)
        assert R.shape == (2, 5)
        for j, p in enumerate(res.points):
            assert np.array_equal(U[:, j], p.u)
            assert np.array_equal(R[:, j], p.r_int)

    def test_iteration_stats_sum(self):
        res = solver.run_arc_length(
            solver.TwoBarTruss(), solver.ArcSettings(dlam0=0.02, n_steps=5)
        )
        it, wall, wall_lin = res.iteration_stats()
        assert it == sum(p.n_iter for p in res.points)
        assert wall >= wall_lin >= 0.0


class TestArcOnFem:
    def test_plastic_block_path(self):
        prov = block_provider()
        res = solver.run_arc_length(
            prov, solver.ArcSettings(dlam0=150.0, n_steps=6, newton=solver.NewtonSettings())
        )
        assert len(res.points) == 6
        lam = res.lam
        assert np.all(np.diff(lam) > 0.0)  # hardening path, no limit point
        assert lam[-1] > 350.0  # well past first yield at sigma0 = 325
        assert res.u_monitor[-1] > 0.0
        for p in res.points:
            assert p.orth_max <= 1e-12
            assert abs(p.predictor_norm - p.ds) <= 1e-12 * p.ds
        # final accepted point is in equilibrium for the committed state
        out = prov.assemble(res.points[-1].u, tangent=False)
        g = out.r - lam[-1] * prov.p0_free
        assert np.max(np.abs(g) / prov.res_scale_free) <= 1e-8

    def test_deterministic_rerun(self):
        res_a = solver.run_arc_length(block_provider(), solver.ArcSettings(dlam0=150.0, n_steps=4))
        res_b = solver.run_arc_length(block_provider(), solver.ArcSettings(dlam0=150.0, n_steps=4))
        assert np.array_equal(res_a.snapshots(), res_b.snapshots())
        assert np.array_equal(res_a.lam, res_b.lam)

    def test_load_sequence_matches_arc_at_same_load(self):
        # drive load control to the final arc-length load factor; paths agree
        res_arc = solver.run_arc_length(block_provider(), solver.ArcSettings(dlam0=150.0, n_steps=4))
        lam_t = res_arc.lam
        res_seq = solver.run_load_sequence(block_provider(), lam_t)
        du = np.abs(res_seq.snapshots() - res_arc.snapshots())
        assert du.max() <= 1e-7 * max(1.0, np.abs(res_arc.snapshots()).max())


def stretch_provider(sigma0=None):
    """Uniaxial block on symmetry supports, driven by an end displacement."""
    mesh = meshing.gen_block(1.0, 1.0, 1.0, 2, 2, 1)
    params = dataclasses.replace(PARAMS_PLATE, y0=1e12)
    if sigma0 is not None:
        params = dataclasses.replace(params, sigma0=sigma0)
    dm = fem.DofMap.build(mesh, {"x0": (0,), "y0": (1,), "z0": (2,), "x1": (0,)})
    drive = fem.DisplacementDrive("x1", 0, 1.0)
    return fem.FemProvider(mesh, params, dm, [], drive=drive)


class TestDisplacementControl:
    def test_monitor_rides_the_drive(self):
        prov = stretch_provider(sigma0=325.0)
        lams = np.linspace(0.002, 0.01, 5)
        res = solver.run_load_sequence(prov, lams)
        assert np.allclose(res.u_monitor, lams, rtol=0.0, atol=1e-15)
        # past the yield strain the end state must be plastic
        assert prov.committed.xi_p.max() > 0.0

    def test_reaction_is_positive_and_hardening(self):
        prov = stretch_provider(sigma0=325.0)
        res = solver.run_load_sequence(prov, np.linspace(0.002, 0.01, 5))
        R = np.array([p.reaction for p in res.points])
        assert np.all(R > 0.0)
        assert np.all(np.diff(R) > 0.0)

    def test_matches_load_control_dual(self):
        # hyperelastic response: the end state is unique, so re-applying the
        # measured reaction as a dead traction must reproduce the stretch
        prov = stretch_provider(sigma0=1e12)
        res = solver.run_load_sequence(prov, [0.005, 0.01])
        R = res.points[-1].reaction
        mesh = meshing.gen_block(1.0, 1.0, 1.0, 2, 2, 1)
        params = dataclasses.replace(PARAMS_PLATE, y0=1e12, sigma0=1e12)
        dm = fem.DofMap.build(mesh, {"x0": (0,), "y0": (1,), "z0": (2,)})
        dual = fem.FemProvider(mesh, params, dm, [fem.TractionLoad("x1", (R, 0.0, 0.0))])
        res_dual = solver.run_load_sequence(dual, [0.5, 1.0])
        assert res_dual.points[-1].u_monitor == pytest.approx(0.01, rel=1e-7)
        full_disp = prov.expand_with_drive(res.points[-1].u)
        full_dual = dual.dofmap.expand(res_dual.points[-1].u)
        assert np.abs(full_disp - full_dual).max() < 1e-8

    def test_arc_length_rejects_drive(self):
        prov = stretch_provider()
        with pytest.raises(ValueError, match="load-parameterized"):
            solver.run_arc_length(prov, solver.ArcSettings(dlam0=0.1, n_steps=2))
