"""Metrics, limit-load detection and CSV export."""

import numpy as np
import pytest
from hypothesis import given, settings as hsettings, strategies as st

from damrom import postproc, solver

from test_solver import block_provider


def synthetic_record(lam, u=None, p=None, n_iter=None, wall=None, dbar=None):
    lam = np.asarray(lam, dtype=float)
    n = lam.size
    u = np.asarray(u, dtype=float) if u is not None else lam * 0.1
    p = np.asarray(p, dtype=float) if p is not None else lam.copy()
    n_iter = np.asarray(n_iter, dtype=int) if n_iter is not None else np.full(n, 3)
    wall = np.asarray(wall, dtype=float) if wall is not None else np.full(n, 0.01)
    return postproc.PathRecord(
        lam=lam,
        u_monitor=u,
        p=p,
        n_iter=n_iter,
        wall=wall,
        dbar_max=dbar,
        u_norm=np.abs(u),
    )


class TestLimitLoad:
    def test_clean_peak_found(self):
        p = np.array([1.0, 2.0, 3.0, 2.5, 1.5])
        idx, val = postproc.limit_load(p)
        assert idx == 2 and val == 3.0

    def test_monotone_raises(self):
        with pytest.raises(postproc.NoLimitLoad, match="no limit load"):
            postproc.limit_load(np.linspace(0.1, 5.0, 20))

    def test_corrector_wiggle_ignored(self):
        # a 0.05% dip is below the prominence threshold
        p = np.array([1.0, 2.0, 2.0 * (1 - 5e-4), 2.5, 3.0])
        with pytest.raises(postproc.NoLimitLoad):
            postproc.limit_load(p)

    def test_prominent_dip_detected(self):
        p = np.array([1.0, 2.0, 2.0 * (1 - 5e-3), 2.5, 3.0])
        idx, val = postproc.limit_load(p)
        assert idx == 1 and val == 2.0

    def test_truss_snap_through_limit_matches_analytic(self):
        truss = solver.TwoBarTruss()
        res = solver.run_arc_length(truss, solver.ArcSettings(dlam0=0.02, n_steps=60))
        rec = postproc.PathRecord.from_run(res)
        idx, val = postproc.limit_load(rec.p)
        d_lim, lam_lim = truss.limit_points()
        assert val <= lam_lim + 1e-8
        assert val >= 0.98 * lam_lim


class TestErrorMetrics:
    def test_identical_records_give_zero(self):
        a = synthetic_record([1.0, 2.0, 3.0])
        b = synthetic_record([1.0, 2.0, 3.0])
        assert postproc.eps_ua(a, b) == 0.0

    def test_one_percent_low(self):
        fom = synthetic_record([1.0, 2.0], u=[0.5, 1.0])
        rom = synthetic_record([1.0, 2.0], u=[0.5, 0.99])
        assert np.isclose(postproc.eps_ua(fom, rom), 0.01)

    def test_zero_reference_rejected(self):
        fom = synthetic_record([1.0], u=[0.0])
        with pytest.raises(ValueError, match="zero"):
            postproc.eps_ua(fom, fom)

    def test_limit_load_error_two_percent(self):
        fom = synthetic_record([1.0, 2.0, 1.5], p=[1.0, 2.0, 1.5])
        rom = synthetic_record([1.0, 1.96, 1.4], p=[1.0, 1.96, 1.4])
        assert np.isclose(postproc.eps_pmax(fom, rom), 0.02)

    def test_limit_load_error_requires_maxima(self):
        fom = synthetic_record([1.0, 2.0, 1.5], p=[1.0, 2.0, 1.5])
        rom = synthetic_record([1.0, 2.0, 3.0], p=[1.0, 2.0, 3.0])
        with pytest.raises(postproc.NoLimitLoad):
            postproc.eps_pmax(fom, rom)

    def test_dbar_error(self):
        f = np.array([0.0, 0.5, 0.2])
        r = np.array([0.0, 0.45, 0.2])
        assert np.isclose(postproc.eps_dbar_b(f, r), 0.1)
        assert postproc.eps_dbar_b(f, f) == 0.0
        with pytest.raises(ValueError, match="zero"):
            postproc.eps_dbar_b(np.zeros(3), r)


class TestSpeedup:
    def test_identical_timings_give_one(self):
        a = synthetic_record([1.0, 2.0], n_iter=[4, 4], wall=[0.04, 0.04])
        assert postproc.speedup(a, a) == 1.0

    def test_synthetic_ratio(self):
        fom = synthetic_record([1.0], n_iter=[1], wall=[0.010])
        rom = synthetic_record([1.0], n_iter=[1], wall=[0.002])
        assert np.isclose(postproc.speedup(fom, rom), 5.0)

    def test_zero_iterations_rejected(self):
        fom = synthetic_record([1.0], n_iter=[0])
        rom = synthetic_record([1.0], n_iter=[3])
        with pytest.raises(ValueError, match="no Newton iterations"):
            postproc.speedup(fom, rom)

    @given(st.integers(2, 30))
    @hsettings(max_examples=20, deadline=None)
    def test_invariant_to_completed_steps_when_stationary(self, n):
        # stationary per-iteration times: the ratio ignores step counts
        fom = synthetic_record(np.arange(1, n + 1), n_iter=np.full(n, 5), wall=np.full(n, 0.05))
        rom = synthetic_record(np.arange(1, 4), n_iter=np.full(3, 2), wall=np.full(3, 0.004))
        assert np.isclose(postproc.speedup(fom, rom), 5.0)


class TestArtificialUnloading:
    def test_loading_run_not_flagged(self):
        rec = synthetic_record(np.linspace(1, 5, 10))
        assert not postproc.artificial_unloading(rec)

    def test_three_step_reversal_flagged(self):
        lam = np.array([1.0, 2.0, 3.0, 2.8, 2.5, 2.1])
        rec = synthetic_record(lam, u=lam * 0.1)
        assert postproc.artificial_unloading(rec)

    def test_two_step_reversal_not_flagged(self):
        lam = np.array([1.0, 2.0, 3.0, 2.8, 2.5, 2.6])
        rec = synthetic_record(lam, u=lam * 0.1)
        assert not postproc.artificial_unloading(rec)

    def test_reference_that_also_unloads_suppresses_flag(self):
        # genuine snap-through: the reference path turns back as well
        lam = np.array([1.0, 2.0, 3.0, 2.8, 2.5, 2.1])
        rec = synthetic_record(lam, u=lam * 0.1)
        ref = synthetic_record(lam * 1.01, u=lam * 0.1)
        assert not postproc.artificial_unloading(rec, reference=ref)

    def test_loading_reference_confirms_flag(self):
        lam = np.array([1.0, 2.0, 3.0, 2.8, 2.5, 2.1])
        rec = synthetic_record(lam, u=lam * 0.1)
        ref = synthetic_record(np.linspace(1, 4, 6))
        assert postproc.artificial_unloading(rec, reference=ref)

    def test_norm_must_decrease_too(self):
        lam = np.array([1.0, 2.0, 3.0, 2.8, 2.5, 2.1])
        rec = synthetic_record(lam, u=np.linspace(0.1, 0.6, 6))
        assert not postproc.artificial_unloading(rec)


class TestCsvExport:
    def test_path_csv_round_numbers(self, tmp_path):
        rec = synthetic_record([1.0, 2.0, 3.0], u=[0.1, 0.2, 0.3])
        out = postproc.write_path_csv(tmp_path / "path.csv", rec, config_hash="abc123")
        lines = out.read_text().splitlines()
        assert lines[0] == "# config abc123"
        assert lines[1].split(",") == ["t", "lambda", "u_A", "p", "p_over_pmax", "n_iters", "wall_ms"]
        assert len(lines) == 2 + 3
        last = lines[-1].split(",")
        assert last[0] == "3"
        assert float(last[4]) == 1.0

    def test_sweep_csv_columns_and_missing_metrics(self, tmp_path):
        rows = [
            {"m": 10, "k": 4, "eps_uA": 1e-3, "speedup": 2.5, "stable": True,
             "artificial_unloading": False},
            {"m": 10, "k": 6, "eps_uA": None, "stable": False,
             "artificial_unloading": True},
        ]
        out = postproc.write_sweep_csv(tmp_path / "sweep.csv", rows, config_hash="ff00")
        lines = out.read_text().splitlines()
        assert lines[0] == "# config ff00"
        assert lines[1] == ",".join(postproc.SWEEP_COLUMNS)
        first = lines[2].split(",")
        assert first[:2] == ["10", "4"] and first[6] == "1"
        second = lines[3].split(",")
        assert second[2] == "nan" and second[6] == "0" and second[7] == "1"

    def test_node_field_csv(self, tmp_path):
        prov = block_provider()
        res = solver.run_load_sequence(prov, [200.0])
        out = postproc.write_node_field_csv(tmp_path / "nodes.csv", prov, res.points[-1].u)
        lines = out.read_text().splitlines()
        assert lines[0] == "node,x,y,z,u_x,u_y,u_z,dbar"
        assert len(lines) == 1 + prov.mesh.nodes.shape[0]
        row = lines[1].split(",")
        assert len(row) == 8

    def test_gp_state_csv(self, tmp_path):
        prov = block_provider(sigma0=50.0)
        res = solver.run_load_sequence(prov, [150.0, 300.0])
        out = postproc.write_gp_state_csv(tmp_path / "gp.csv", prov)
        lines = out.read_text().splitlines()
        assert lines[0] == "element,gp,xi_p,xi_d,D"
        assert len(lines) == 1 + prov.n_elems * 8
        xi_p = np.array([float(l.split(",")[2]) for l in lines[1:]])
        assert xi_p.max() > 0.0


class TestRecordFromRun:
    def test_fem_run_record(self):
        prov = block_provider()
        res = solver.run_load_sequence(prov, [100.0, 200.0, 300.0])
        p_ref = float(np.linalg.norm(prov.ref_force))
        rec = postproc.PathRecord.from_run(res, p_ref=p_ref)
        assert rec.n_steps == 3
        assert np.allclose(rec.p, rec.lam * p_ref)
        assert rec.u_norm is not None and np.all(np.diff(rec.u_norm) > 0)
        assert np.all(rec.n_iter >= 1)
        assert np.all(rec.wall >= 0)

    def test_empty_run_rejected(self):
        class Empty:
            points = []

        with pytest.raises(ValueError, match="no accepted points"):
            postproc.PathRecord.from_run(Empty())
