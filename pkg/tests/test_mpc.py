"""Condensation into both dual forms, the pitch benchmark model, closed loop."""

import io
import os

import numpy as np
import pytest
from numpy.testing import assert_allclose

import fastdual.solver
from fastdual.curvature import applicable_curvature
from fastdual.errors import CapReached, ProblemFormatError
from fastdual.linalg import kkt_factor
from fastdual.metric import metric_from_dense, scalar_metric
from fastdual.mpc import (
    ClosedLoopResult,
    MpcInstance,
    MpcWeights,
    OutputBound,
    Plant,
    Scenario,
    SolverConfig,
    afti16_model,
    afti16_scenario,
    closed_loop_run,
    condense_eqdual,
    condense_ineqdual,
    reference_solution,
)
from fastdual.problem import HTerm
from fastdual.solver import StopRule, fdgm_run, fdgm_setup

DATA_DIR = os.path.join(os.path.dirname(__file__), "data")


def exact_metrics(p):
    cm = applicable_curvature(p)
    met = metric_from_dense(cm.value.a)
    llam, lmu = met.split(p.m)
    return (llam if p.m else None), (lmu if p.p else None)


def scalar_metrics(p):
    cm = applicable_curvature(p)
    met = scalar_metric(cm)
    llam, lmu = met.split(p.m)
    return (llam if p.m else None), (lmu if p.p else None)


def integrator_instance(n_h=2, u_cap=0.4, x0=0.0, y_ref=0.0, r_w=0.1):
    plant = Plant([[1.0]], [[1.0]], [[1.0]])
    weights = MpcWeights([[1.0]], [[r_w]], [[1.0]])
    return MpcInstance(
        plant, weights, n_h, -u_cap, u_cap, x0=[x0], y_ref=[y_ref]
    )


def double_integrator_soft(x0=(1.2, 0.4), y_ref=0.5):
    plant = Plant([[1.0, 1.0], [0.0, 1.0]], [[0.5], [1.0]], [[1.0, 0.0]])
    weights = MpcWeights.from_output_weights(
        plant.c_out, [[2.0]], 0.1 * np.eye(2), [[0.5]], slack_weight=50.0
    )
    bound = OutputBound(0, -0.3, 0.8)
    return MpcInstance(
        plant, weights, 3, -1.0, 1.0, (bound,), x0=x0, y_ref=[y_ref]
    )


class TestPlantAndWeights:
    def test_plant_shape_validation(self):
        with pytest.raises(ValueError):
            Plant(np.ones((2, 3)), np.ones((2, 1)), np.ones((1, 2)))
        with pytest.raises(ValueError):
            Plant(np.eye(2), np.ones((3, 1)), np.ones((1, 2)))
        with pytest.raises(ValueError):
            Plant(np.eye(2), np.ones((2, 1)), np.ones((1, 3)))

    def test_weights_need_pd_input_cost(self):
        with pytest.raises(ValueError):
            MpcWeights([[1.0]], [[0.0]], [[1.0]])

    def test_output_weight_assembly(self):
        c = np.array([[0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0]])
        w = MpcWeights.from_output_weights(
            c, 100.0 * np.eye(2), np.diag([1e-4, 0.0, 1e-3, 0.0]),
            1e-2 * np.eye(2),
        )
        assert_allclose(w.q, np.diag([1e-4, 100.0, 1e-3, 100.0]))
        assert_allclose(w.q_f, w.q)

    def test_x_ref_is_least_norm(self, rng):
        c = rng.standard_normal((2, 5))
        plant = Plant(np.eye(5), np.ones((5, 1)), c)
        w = MpcWeights(np.eye(5), [[1.0]], np.eye(5))
        inst = MpcInstance(plant, w, 1, -1.0, 1.0, x0=np.zeros(5),
                           y_ref=[0.7, -1.1])
        x_r = inst.x_ref()
        assert_allclose(c @ x_r, [0.7, -1.1], atol=1e-12)
        assert_allclose(x_r, np.linalg.pinv(c) @ np.array([0.7, -1.1]),
                        atol=1e-12)

    def test_soft_bound_needs_slack_weight(self):
        plant = Plant([[1.0]], [[1.0]], [[1.0]])
        w = MpcWeights([[1.0]], [[1.0]], [[1.0]])  # slack weight 0
        with pytest.raises(ValueError, match="slack weight"):
            MpcInstance(plant, w, 2, -1.0, 1.0, (OutputBound(0, -1.0, 1.0),))


class TestCondensation:
    def test_integrator_equality_rows(self):
        # x+ = x + u, N = 2: variables (x0, x1, x2, u0, u1)
        inst = integrator_instance(n_h=2, x0=0.7)
        p = condense_eqdual(inst)
        a_expect = np.array(
            [
                [1.0, 0.0, 0.0, 0.0, 0.0],
                [-1.0, 1.0, 0.0, -1.0, 0.0],
                [0.0, -1.0, 1.0, 0.0, -1.0],
            ]
        )
        assert_allclose(p.eq.a, a_expect)
        assert_allclose(p.eq.b, [0.7, 0.0, 0.0])
        assert p.h.kind == HTerm.BOX
        assert_allclose(p.h.y_min, [-np.inf] * 3 + [-0.4] * 2)
        assert_allclose(p.h.y_max, [np.inf] * 3 + [0.4] * 2)

    def test_stacked_cost_blocks(self, rng):
        plant = Plant(rng.standard_normal((2, 2)), rng.standard_normal((2, 1)),
                      np.array([[1.0, 0.0]]))
        q = np.diag(rng.uniform(0.5, 2.0, 2))
        q_f = np.diag(rng.uniform(0.5, 2.0, 2))
        r = np.array([[0.7]])
        inst = MpcInstance(plant, MpcWeights(q, r, q_f), 2, -1.0, 1.0,
                           y_ref=[0.3])
        p = condense_eqdual(inst)
        import scipy.linalg

        assert_allclose(p.cost.h.a, scipy.linalg.block_diag(q, q, q_f, r, r))
        x_r = inst.x_ref()
        assert_allclose(p.cost.zeta[:2], -q @ x_r)
        assert_allclose(p.cost.zeta[4:6], -q_f @ x_r)
        assert_allclose(p.cost.zeta[6:], 0.0)

    def test_afti_dimensions_and_conditioning(self):
        inst = afti16_model()
        p_eq = condense_eqdual(inst)
        assert p_eq.n == 108  # 44 states + 20 inputs + 44 slacks
        assert p_eq.m == 44
        assert p_eq.eq.row_rank == 44
        assert p_eq.cost.is_diagonal
        d = np.diag(p_eq.cost.h.a)
        assert_allclose(d.max() / d.min(), 1e10)
        p_in = condense_ineqdual(inst)
        assert p_in.m == 0
        assert p_in.h.eq.m == 44
        assert p_in.p == 108
        assert np.linalg.matrix_rank(p_in.g.b) == 86
        # unstable plant: spectral radius beyond one
        rho = np.abs(np.linalg.eigvals(inst.plant.phi)).max()
        assert_allclose(rho, 1.313, atol=2e-3)

    def test_trajectory_feasibility_and_cost(self, rng):
        inst = double_integrator_soft()
        lay_n_h = inst.horizon
        p_eq = condense_eqdual(inst)
        p_in = condense_ineqdual(inst)
        # both forms share the stacked cost and the dynamics rows
        assert_allclose(p_in.h.eq.a, p_eq.eq.a)
        assert_allclose(p_in.cost.h.a, p_eq.cost.h.a)
        for _ in range(5):
            x = np.asarray(inst.x0, dtype=float)
            xs, us = [x], []
            for _ in range(lay_n_h):
                u = rng.uniform(-1.0, 1.0, 1)
                x = inst.plant.step(x, u)
                xs.append(x)
                us.append(u)
            slacks = rng.uniform(0.0, 0.5, (lay_n_h + 1) * 2)
            y = np.concatenate([np.concatenate(xs), np.concatenate(us), slacks])
            assert np.max(np.abs(p_eq.eq.a @ y - p_eq.eq.b)) < 1e-12
            w = inst.weights
            x_r = inst.x_ref()
            stage = 0.0
            for k in range(lay_n_h):
                dx = xs[k] - x_r
                stage += 0.5 * dx @ w.q @ dx + 0.5 * us[k] @ w.r @ us[k]
            dxn = xs[-1] - x_r
            stage += 0.5 * dxn @ w.q_f @ dxn
            stage += 0.5 * w.slack_weight * slacks @ slacks
            const = 0.5 * lay_n_h * x_r @ w.q @ x_r + 0.5 * x_r @ w.q_f @ x_r
            assert_allclose(p_eq.cost.value(y) + const, stage, atol=1e-10)

    def test_soft_rows_layout(self):
        inst = double_integrator_soft()
        p = condense_ineqdual(inst)
        n_h = inst.horizon
        # per stage: lower row (+c, +s_lo), upper row (+c, -s_up)
        n_state_rows = 2 * (n_h + 1)
        n_input_rows = n_h
        n_slack_rows = 2 * (n_h + 1)
        assert p.p == n_state_rows + n_input_rows + n_slack_rows
        row0 = p.g.b[0]
        s_off = (n_h + 1) * 2 + n_h
        assert row0[0] == 1.0 and row0[s_off] == 1.0
        assert p.g.d_lo[0] == -0.3 and p.g.d_hi[0] == np.inf
        row1 = p.g.b[1]
        assert row1[0] == 1.0 and row1[s_off + 1] == -1.0
        assert p.g.d_lo[1] == -np.inf and p.g.d_hi[1] == 0.8
        # input rows are two-sided unit selectors
        r_u = p.g.b[n_state_rows]
        assert r_u[s_off - n_h] == 1.0
        assert p.g.d_lo[n_state_rows] == -1.0
        assert p.g.d_hi[n_state_rows] == 1.0
        # slack rows pin nonnegativity
        assert p.g.d_lo[-1] == 0.0 and p.g.d_hi[-1] == np.inf

    def test_nonselector_output_rejected_in_eqdual(self):
        plant = Plant(np.eye(2), np.ones((2, 1)), np.array([[1.0, 1.0]]))
        w = MpcWeights.from_output_weights(plant.c_out, [[1.0]], np.eye(2),
                                           [[1.0]], slack_weight=10.0)
        inst = MpcInstance(plant, w, 2, -1.0, 1.0, (OutputBound(0, -1.0, 1.0),))
        with pytest.raises(ValueError, match="selector"):
            condense_eqdual(inst)
        condense_ineqdual(inst)  # general rows are fine here

    def test_forms_agree_at_optimum(self):
        inst = double_integrator_soft()
        y_eq = reference_solution(condense_eqdual(inst))
        y_in = reference_solution(condense_ineqdual(inst))
        assert_allclose(y_eq, y_in, atol=1e-8)
        # the start state violates the soft band, so a slack must engage
        assert y_eq[inst.horizon * 3 + 1 :].max() > 1e-3


class TestSolveAgreement:
    def test_eqdual_solver_hits_reference(self):
        inst = double_integrator_soft()
        p = condense_eqdual(inst)
        llam, _ = exact_metrics(p)
        stop = StopRule.residual(1e-9, 1e-9, 1e-11, max_iter=50000)
        res = fdgm_run(p, llam, None, stop=stop)
        y_star = reference_solution(p)
        scale = np.max(np.abs(y_star))
        assert np.max(np.abs(res.y - y_star)) <= 1e-6 * max(1.0, scale)

    def test_ineqdual_solver_hits_reference(self):
        inst = double_integrator_soft()
        p = condense_ineqdual(inst)
        _, lmu = scalar_metrics(p)
        stop = StopRule.residual(1e-9, 1e-9, 1e-11, max_iter=200000)
        res = fdgm_run(p, None, lmu, stop=stop)
        y_star = reference_solution(p)
        scale = np.max(np.abs(y_star))
        assert np.max(np.abs(res.y - y_star)) <= 1e-6 * max(1.0, scale)


class TestScenario:
    def test_expand_and_roundtrip(self, tmp_path):
        sc = Scenario(np.zeros(2), ((3, [0.0, 1.0]), (2, [0.5, 0.0])))
        refs = sc.expand()
        assert refs.shape == (5, 2)
        assert_allclose(refs[2], [0.0, 1.0])
        assert_allclose(refs[3], [0.5, 0.0])
        path = tmp_path / "sc.json"
        sc.save(path)
        back = Scenario.load(path)
        assert_allclose(back.x0, sc.x0)
        assert back.n_samples == 5
        assert_allclose(back.expand(), refs)

    def test_bad_file_raises(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"x0": [0.0]}')
        with pytest.raises(ProblemFormatError):
            Scenario.load(path)

    def test_afti_scenario_defaults(self):
        sc = afti16_scenario()
        assert sc.n_samples == 60
        assert_allclose(sc.x0, 0.0)
        refs = sc.expand()
        assert_allclose(refs[:30], np.tile([0.0, 10.0], (30, 1)))
        assert_allclose(refs[30:], 0.0)
        jit = afti16_scenario(seed=7)
        assert np.all(jit.x0 != 0.0) and np.max(np.abs(jit.x0)) < 1e-2
        assert_allclose(jit.x0, afti16_scenario(seed=7).x0)


class TestClosedLoop:
    def _config_eq(self, p, **kw):
        llam, _ = exact_metrics(p)
        return SolverConfig(
            form="eqdual", llam=llam, stop_mode="residual",
            eps_eq=1e-8, eps_ineq=1e-8, eps_fp=1e-10, max_iter=50000, **kw
        )

    def test_zero_reference_is_trivial(self):
        inst = integrator_instance(n_h=3)
        p = condense_eqdual(inst)
        sc = Scenario(np.zeros(1), ((5, [0.0]),))
        res = closed_loop_run(inst, self._config_eq(p), sc)
        assert np.all(res.iterations <= 2)
        assert_allclose(res.states, 0.0, atol=1e-14)
        assert_allclose(res.inputs, 0.0, atol=1e-14)

    def test_integrator_step_tracking(self):
        inst = integrator_instance(n_h=3)
        p = condense_eqdual(inst)
        sc = Scenario(np.zeros(1), ((12, [1.0]),))
        res = closed_loop_run(inst, self._config_eq(p), sc)
        x = res.states[:, 0]
        assert np.all(np.diff(x) > -1e-12)  # monotone approach
        assert abs(x[-1] - 1.0) < 0.05
        assert np.all(res.inputs <= 0.4 + 1e-9)
        assert res.outputs.shape == (12, 1)
        assert_allclose(res.outputs[:, 0], x[:-1])

    def test_integrator_golden_trajectory(self):
        # frozen from the first verified run of the step-tracking scenario
        inst = integrator_instance(n_h=3)
        p = condense_eqdual(inst)
        sc = Scenario(np.zeros(1), ((12, [1.0]),))
        res = closed_loop_run(inst, self._config_eq(p), sc)
        buf = io.StringIO()
        res.write_csv(buf)
        got = buf.getvalue().strip().splitlines()
        with open(os.path.join(DATA_DIR, "integrator_golden.csv")) as fh:
            want = fh.read().strip().splitlines()
        assert got[0] == want[0]
        assert len(got) == len(want)
        for line_got, line_want in zip(got[1:], want[1:]):
            g = [float(v) for v in line_got.split(",")]
            w = [float(v) for v in line_want.split(",")]
            assert_allclose(g, w, rtol=0.0, atol=1e-9)

    def test_warm_start_runs_and_tracks(self):
        inst = double_integrator_soft()
        p = condense_eqdual(inst)
        cfg = self._config_eq(p, warm_start=True)
        sc = Scenario(np.array([1.2, 0.4]), ((8, [0.5]),))
        res = closed_loop_run(inst, cfg, sc)
        assert res.iterations.shape == (8,)
        assert abs(res.states[-1, 0] - 0.5) < 0.2

    def test_oracle_stop_mode(self):
        inst = integrator_instance(n_h=2)
        cfg = SolverConfig(form="eqdual", stop_mode="oracle", rel_tol=5e-3,
                           max_iter=50000)
        p = condense_eqdual(inst)
        cfg.llam, _ = exact_metrics(p)
        sc = Scenario(np.array([0.3]), ((4, [1.0]),))
        res = closed_loop_run(inst, cfg, sc)
        assert res.iterations.shape == (4,)
        assert np.all(res.iterations >= 1)

    def test_no_refactorization_across_samples(self, monkeypatch):
        calls = {"n": 0}
        real = kkt_factor

        def counting(*a, **kw):
            calls["n"] += 1
            return real(*a, **kw)

        monkeypatch.setattr(fastdual.solver, "kkt_factor", counting)
        inst = double_integrator_soft()
        p = condense_ineqdual(inst)
        _, lmu = scalar_metrics(p)
        cfg = SolverConfig(
            form="ineqdual", lmu=lmu, stop_mode="residual",
            eps_eq=1e-7, eps_ineq=1e-7, eps_fp=1e-9, max_iter=200000,
        )
        sc = Scenario(np.array([1.2, 0.4]), ((4, [0.5]),))
        closed_loop_run(inst, cfg, sc)
        assert calls["n"] == 1
        calls["n"] = 0
        cfg_admm = SolverConfig(
            algorithm="admm", form="ineqdual", rho=1.0, stop_mode="residual",
            eps_eq=1e-7, eps_ineq=1e-7, max_iter=200000,
        )
        closed_loop_run(inst, cfg_admm, sc)
        assert calls["n"] == 1

    def test_cap_aborts_with_partial_log(self):
        inst = integrator_instance(n_h=2)
        p = condense_eqdual(inst)
        llam, _ = exact_metrics(p)
        cfg = SolverConfig(
            form="eqdual", llam=llam, stop_mode="residual",
            eps_eq=-1.0, eps_ineq=-1.0, eps_fp=-1.0, max_iter=5,
        )
        sc = Scenario(np.array([0.3]), ((3, [1.0]),))
        with pytest.raises(CapReached) as exc_info:
            closed_loop_run(inst, cfg, sc)
        partial = exc_info.value.result
        assert isinstance(partial, ClosedLoopResult)
        assert partial.inputs.shape == (0, 1)
        assert partial.states.shape == (1, 1)

    def test_csv_layout(self):
        inst = integrator_instance(n_h=2)
        p = condense_eqdual(inst)
        sc = Scenario(np.array([0.2]), ((3, [1.0]),))
        res = closed_loop_run(inst, self._config_eq(p), sc)
        buf = io.StringIO()
        res.write_csv(buf)
        lines = buf.getvalue().strip().splitlines()
        assert lines[0] == "t,x1,u1,y1,slack_max,iterations"
        assert len(lines) == 4
        first = lines[1].split(",")
        assert first[0] == "0"
        assert float(first[1]) == 0.2
