"""Dense active-set oracle: verified KKT points for small QPs."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from conftest import random_spd

from fastdual.curvature import applicable_curvature
from fastdual.metric import scalar_metric
from fastdual.problem import (
    AffineEq,
    ComposedProblem,
    CoupledBound,
    GTerm,
    HTerm,
    QuadCost,
)
from fastdual.prox import box_prox_enumerate
from fastdual.reference import reference_solution
from fastdual.solver import StopRule, fdgm_run


class TestBasics:
    def test_unconstrained(self, rng):
        cost = QuadCost(random_spd(rng, 4), rng.standard_normal(4))
        p = ComposedProblem(cost, HTerm.zero())
        y = reference_solution(p)
        assert_allclose(y, np.linalg.solve(cost.h.a, -cost.zeta), atol=1e-10)

    def test_one_dimensional_bound_hit(self):
        cost = QuadCost([[2.0]], [-4.0])  # unconstrained minimizer at 2
        p = ComposedProblem(cost, HTerm.box([-1.0], [1.0]))
        assert_allclose(reference_solution(p), [1.0], atol=1e-12)

    def test_equality_only(self, rng):
        cost = QuadCost(random_spd(rng, 5), rng.standard_normal(5))
        a = rng.standard_normal((2, 5))
        b = rng.standard_normal(2)
        p = ComposedProblem(cost, HTerm.zero(), eq=AffineEq(a, b))
        y = reference_solution(p)
        # KKT by hand
        k = np.block([[cost.h.a, a.T], [a, np.zeros((2, 2))]])
        sol = np.linalg.solve(k, np.concatenate([-cost.zeta, b]))
        assert_allclose(y, sol[:5], atol=1e-9)

    def test_box_qp_matches_projection_when_cost_identity(self, rng):
        # H = I: constrained minimizer is the euclidean box projection
        z = 2.0 * rng.standard_normal(4)
        cost = QuadCost(np.eye(4), -z)
        lo, hi = -np.ones(4), np.ones(4)
        p = ComposedProblem(cost, HTerm.box(lo, hi))
        assert_allclose(reference_solution(p), np.clip(z, lo, hi), atol=1e-10)

    def test_general_box_qp_vs_enumeration(self, rng):
        for _ in range(20):
            n = 4
            h = random_spd(rng, n)
            z = rng.standard_normal(n)
            lo, hi = -rng.uniform(0.2, 1.0, n), rng.uniform(0.2, 1.0, n)
            cost = QuadCost(h, z)
            p = ComposedProblem(cost, HTerm.box(lo, hi))
            y = reference_solution(p)
            # min .5 y'Hy + z'y over box == prox at H^{-1}(-z) in metric H
            oracle = box_prox_enumerate(h, np.linalg.solve(h, -z), lo, hi)
            assert_allclose(y, oracle, atol=1e-8)

    def test_inequality_rows(self, rng):
        for _ in range(10):
            n, p_rows = 4, 3
            cost = QuadCost(random_spd(rng, n), rng.standard_normal(n))
            b = rng.standard_normal((p_rows, n))
            x0 = 0.2 * rng.standard_normal(n)
            g = GTerm.box(b, b @ x0 - 0.3, b @ x0 + 0.3)
            p = ComposedProblem(cost, HTerm.zero(), g=g)
            y = reference_solution(p)
            by = b @ y
            assert np.all(by <= g.d_hi + 1e-9)
            assert np.all(by >= g.d_lo - 1e-9)

    def test_soft_box_rows(self):
        # equality forces y past the soft bound; slack must absorb exactly
        cost = QuadCost(np.diag([1.0, 1.0, 1.0]), np.zeros(3))
        h = HTerm.soft_box(
            [-np.inf, 0.0, 0.0],
            [np.inf, np.inf, np.inf],
            [CoupledBound(0, -0.5, 0.5, 1, 2)],
        )
        p = ComposedProblem(cost, h, eq=AffineEq([[1.0, 0.0, 0.0]], [2.0]))
        y = reference_solution(p)
        assert_allclose(y[0], 2.0, atol=1e-10)
        assert_allclose(y[2], 1.5, atol=1e-10)  # y <= 0.5 + s_up tight
        assert_allclose(y[1], 0.0, atol=1e-10)

    def test_multiplier_info(self, rng):
        cost = QuadCost([[2.0]], [-4.0])
        g = GTerm.box([[1.0]], [-1.0], [1.0])
        p = ComposedProblem(cost, HTerm.zero(), g=g)
        info = reference_solution(p, return_info=True)
        assert_allclose(info.y, [1.0], atol=1e-10)
        # stationarity 2y - 4 + mu = 0 at y=1 gives mu = 2 (upper side)
        assert_allclose(info.mu_g, [2.0], atol=1e-9)
        assert info.kkt_residual <= 1e-10


class TestCrossSolverAgreement:
    def test_fdgm_matches_reference(self, rng):
        hits = 0
        for trial in range(50):
            n = int(rng.integers(3, 7))
            form = trial % 2
            if form == 0:  # dualized equalities, box inner
                hd = rng.uniform(0.5, 3.0, n)
                cost = QuadCost(np.diag(hd), rng.standard_normal(n))
                lo, hi = -rng.uniform(0.5, 2, n), rng.uniform(0.5, 2, n)
                m = int(rng.integers(1, max(2, n - 1)))
                a = rng.standard_normal((m, n))
                x_f = rng.uniform(0.5 * lo, 0.5 * hi)
                p = ComposedProblem(
                    cost, HTerm.box(lo, hi), eq=AffineEq(a, a @ x_f)
                )
            else:  # inner equalities, dualized box rows
                cost = QuadCost(random_spd(rng, n), rng.standard_normal(n))
                mh = int(rng.integers(1, max(2, n - 1)))
                a = rng.standard_normal((mh, n))
                x_f = 0.3 * rng.standard_normal(n)
                rows = int(rng.integers(1, 4))
                b = rng.standard_normal((rows, n))
                g = GTerm.box(
                    b,
                    b @ x_f - rng.uniform(0.2, 1.0, rows),
                    b @ x_f + rng.uniform(0.2, 1.0, rows),
                )
                p = ComposedProblem(
                    cost, HTerm.equality(a, a @ x_f), g=g
                )
            y_star = reference_solution(p)
            met = scalar_metric(applicable_curvature(p))
            llam, lmu = met.split(p.m)
            res = fdgm_run(
                p,
                llam if p.m else None,
                lmu if p.p else None,
                stop=StopRule.residual(1e-9, 1e-9, 1e-11, max_iter=200000),
            )
            denom = max(np.linalg.norm(y_star), 1e-12)
            assert np.linalg.norm(res.y - y_star) / denom <= 1e-6
            hits += 1
        assert hits == 50
