import numpy as np
import pytest

from fastdual.errors import Infeasible
from fastdual.lmi import CongruenceBlock, LmiProblem, sdp_solve


def eye_pairs(d):
    return [(i, i) for i in range(d)]


class TestOneVariable:
    def test_min_t_hand(self):
        # min t  s.t.  t*[4] >= m,  m >= [4]; optimum m=4, t=1
        lmi = LmiProblem(
            1,
            eye_pairs(1),
            [
                CongruenceBlock(const=np.zeros((1, 1)), w=np.eye(1),
                                sign=-1.0, t_mat=np.array([[4.0]])),
                CongruenceBlock(const=np.array([[-4.0]]), w=np.eye(1),
                                sign=1.0),
            ],
            t_bracket=(0.25, 10.0),
            t_sense="min",
        )
        res = sdp_solve(lmi, bisect_tol=0.005)
        assert res.feasible
        assert res.t == pytest.approx(1.0, rel=0.02)
        assert res.m_mat[0, 0] == pytest.approx(4.0, rel=0.05)

    def test_fixed_t_feasibility_against_eigs(self, rng):
        # diagonal M with G <= M <= 3 G for a random PD 2x2 G
        a = rng.standard_normal((2, 2))
        g = a @ a.T + 0.5 * np.eye(2)
        lmi = LmiProblem(
            2,
            eye_pairs(2),
            [
                CongruenceBlock(const=-g, w=np.eye(2), sign=1.0),
                CongruenceBlock(const=3.0 * g, w=np.eye(2), sign=-1.0),
            ],
        )
        res = sdp_solve(lmi)
        assert res.feasible
        m = res.m_mat
        assert np.linalg.eigvalsh(m - g)[0] >= -1e-6
        assert np.linalg.eigvalsh(3.0 * g - m)[0] >= -1e-6
        assert np.abs(m - np.diag(np.diag(m))).max() == 0.0

    def test_contradictory_ordering_infeasible(self):
        g = np.array([[2.0, 1.0], [1.0, 2.0]])
        lmi = LmiProblem(
            2,
            eye_pairs(2),
            [
                CongruenceBlock(const=-g, w=np.eye(2), sign=1.0),
                CongruenceBlock(const=0.5 * g, w=np.eye(2), sign=-1.0),
            ],
        )
        with pytest.raises(Infeasible):
            sdp_solve(lmi)


class TestProblemValidation:
    def test_variable_cap(self):
        pairs = [(i, j) for i in range(40) for j in range(i, 40)]
        with pytest.raises(ValueError, match="cap"):
            LmiProblem(40, pairs, [], var_cap=512)

    def test_bad_pair(self):
        with pytest.raises(ValueError, match="pattern pair"):
            LmiProblem(2, [(1, 0)], [])

    def test_bracket_sense_pairing(self):
        with pytest.raises(ValueError, match="go together"):
            LmiProblem(1, eye_pairs(1), [], t_bracket=(0.1, 1.0))

    def test_assemble_extract_round_trip(self, rng):
        lmi = LmiProblem(3, [(0, 0), (0, 2), (1, 1), (2, 2)], [])
        vec = rng.standard_normal(4)
        m = lmi.assemble(vec)
        assert np.allclose(m, m.T)
        assert np.array_equal(lmi.extract(m), vec)
        assert m[0, 1] == 0.0


class TestBudget:
    def test_iteration_budget_returns_best_with_warning(self):
        g = np.diag([1.0, 3.0])
        lmi = LmiProblem(
            2,
            eye_pairs(2),
            [
                CongruenceBlock(const=-g, w=np.eye(2), sign=1.0),
                CongruenceBlock(const=np.zeros((2, 2)), w=np.eye(2),
                                sign=-1.0, t_mat=g),
            ],
            t_bracket=(0.9, 5.0),
            t_sense="min",
        )
        res = sdp_solve(lmi, max_total_iter=1)
        assert res.feasible
        assert res.warning is not None
        assert res.t == pytest.approx(5.0)  # only the anchor was certified
