"""High-accuracy dense QP oracle, independent of the first-order engines.

A primal active-set method with a feasible start: phase 1 finds a feasible
point through an auxiliary LP (HiGHS), then each pass solves the
equality-constrained QP on the working set and either takes the full step,
stops at the nearest blocking row, or drops a row with a negative
multiplier.  The accepted solution is polished by one step of iterative
refinement and verified against the KKT conditions before being returned.
Small dense problems only -- this is the benchmark yardstick, not a solver
meant for production use.
"""

from dataclasses import dataclass

import numpy as np
import scipy.optimize

from .errors import CapReached, FastdualError
from .problem import GTerm, HTerm


@dataclass
class ReferenceInfo:
    """Multipliers and diagnostics of the verified KKT point."""

    y: np.ndarray
    lam_eq: np.ndarray        # top-level (dualized) equality multipliers
    mu_g: np.ndarray          # signed g-box multipliers (upper minus lower)
    active: tuple
    kkt_residual: float
    changes: int


def _gather_inequalities(p):
    """Rows (normal, offset, tag) describing every inequality as n.y <= c."""
    n = p.n
    rows = []
    h = p.h
    if h.kind in (HTerm.BOX, HTerm.SOFT_BOX):
        coupled = h.coupled_indices() if h.kind == HTerm.SOFT_BOX else set()
        for i in range(n):
            if i in coupled:
                continue
            if np.isfinite(h.y_max[i]):
                e = np.zeros(n)
                e[i] = 1.0
                rows.append((e, h.y_max[i], ("h_up", i)))
            if np.isfinite(h.y_min[i]):
                e = np.zeros(n)
                e[i] = -1.0
                rows.append((e, -h.y_min[i], ("h_lo", i)))
    if h.kind == HTerm.SOFT_BOX:
        for tr in h.coupled:
            up = np.zeros(n)
            up[tr.y_index] = 1.0
            if tr.upper_slack is not None:
                up[tr.upper_slack] = -1.0
            rows.append((up, tr.hi, ("soft_up", tr.y_index)))
            lo = np.zeros(n)
            lo[tr.y_index] = -1.0
            if tr.lower_slack is not None:
                lo[tr.lower_slack] = -1.0
            rows.append((lo, -tr.lo, ("soft_lo", tr.y_index)))
            for s in (tr.lower_slack, tr.upper_slack):
                if s is not None:
                    e = np.zeros(n)
                    e[s] = -1.0
                    rows.append((e, 0.0, ("h_lo", s)))
    if p.g.kind == GTerm.BOX:
        for j in range(p.p):
            if np.isfinite(p.g.d_hi[j]):
                rows.append((p.g.b[j].copy(), p.g.d_hi[j], ("g_up", j)))
            if np.isfinite(p.g.d_lo[j]):
                rows.append((-p.g.b[j], -p.g.d_lo[j], ("g_lo", j)))
    return rows


def _gather_equalities(p):
    blocks_a, blocks_b = [], []
    if p.m:
        blocks_a.append(p.eq.a)
        blocks_b.append(p.eq.b)
    if p.h.kind == HTerm.EQUALITY and p.h.eq.m:
        blocks_a.append(p.h.eq.a)
        blocks_b.append(p.h.eq.b)
    if blocks_a:
        return np.vstack(blocks_a), np.concatenate(blocks_b)
    return np.zeros((0, p.n)), np.zeros(0)


def _kkt_solve(h_mat, zeta, e_mat, e_rhs, g_act, g_rhs):
    """Solve the working-set KKT system with one refinement pass."""
    n = h_mat.shape[0]
    me, ma = e_mat.shape[0], g_act.shape[0]
    dim = n + me + ma
    k_mat = np.zeros((dim, dim))
    k_mat[:n, :n] = h_mat
    k_mat[:n, n : n + me] = e_mat.T
    k_mat[n : n + me, :n] = e_mat
    if ma:
        k_mat[:n, n + me :] = g_act.T
        k_mat[n + me :, :n] = g_act
    rhs = np.concatenate([-zeta, e_rhs, g_rhs])
    sol = np.linalg.solve(k_mat, rhs)
    sol += np.linalg.solve(k_mat, rhs - k_mat @ sol)
    return sol[:n], sol[n : n + me], sol[n + me :]


def _feasible_start(e_mat, e_rhs, ineqs, n):
    """Phase-1 point through the worst-violation LP ``min s, Ny - c <= s``."""
    cols = n + 1
    a_ub = np.zeros((len(ineqs), cols))
    b_ub = np.zeros(len(ineqs))
    for k, (normal, offset, _) in enumerate(ineqs):
        a_ub[k, :n] = normal
        a_ub[k, n] = -1.0
        b_ub[k] = offset
    a_eq = b_eq = None
    if e_mat.shape[0]:
        a_eq = np.hstack([e_mat, np.zeros((e_mat.shape[0], 1))])
        b_eq = e_rhs
    lp = scipy.optimize.linprog(
        c=np.concatenate([np.zeros(n), [1.0]]),
        A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=b_eq,
        bounds=[(None, None)] * n + [(0.0, None)],
        method="highs",
        options={"primal_feasibility_tolerance": 1e-10,
                 "dual_feasibility_tolerance": 1e-10},
    )
    if lp.status != 0:
        raise FastdualError(f"reference oracle: phase-1 LP failed ({lp.message})")
    if lp.x[n] > 1e-7 * max(1.0, np.abs(b_ub).max(initial=0.0)):
        raise FastdualError(
            f"reference oracle: problem infeasible (violation {lp.x[n]:.3e})"
        )
    y0 = lp.x[:n]
    if e_mat.shape[0]:  # re-polish the equalities to solve precision
        corr = np.linalg.lstsq(e_mat, e_rhs - e_mat @ y0, rcond=None)[0]
        y0 = y0 + corr
    return y0


def reference_solution(p, tol=1e-9, max_changes=3000, return_info=False):
    """Verified optimizer of a composed QP by a primal active-set walk.

    Raises CapReached when the working set fails to settle within
    ``max_changes`` updates and FastdualError when the final KKT residual
    check fails -- this oracle never returns an unverified point.
    """
    h_mat = p.cost.h.a
    zeta = p.cost.zeta
    e_mat, e_rhs = _gather_equalities(p)
    ineqs = _gather_inequalities(p)
    scale = max(
        1.0,
        np.abs(h_mat).max() if h_mat.size else 0.0,
        np.abs(zeta).max() if zeta.size else 0.0,
    )
    active: list[int] = []
    empty = np.zeros((0, p.n))
    # fast path: the equality-only optimum, feasible for most easy samples
    y, nu_eq, lam = _kkt_solve(h_mat, zeta, e_mat, e_rhs, empty, np.zeros(0))
    feasible = all(
        normal @ y - offset <= tol * max(1.0, abs(offset))
        for normal, offset, _ in ineqs
    )
    g_act, g_rhs = empty, np.zeros(0)
    change = 0
    if not feasible:
        y = _feasible_start(e_mat, e_rhs, ineqs, p.n)
        seen = set()
        bland = False
        for change in range(max_changes):
            key = frozenset(active)
            if key in seen:
                bland = True  # revisited working set: lowest-index rule
            seen.add(key)
            g_act = (
                np.array([ineqs[i][0] for i in active]) if active else empty
            )
            g_rhs = np.array([ineqs[i][1] for i in active])
            try:
                y_hat, nu_eq, lam = _kkt_solve(
                    h_mat, zeta, e_mat, e_rhs, g_act, g_rhs
                )
            except np.linalg.LinAlgError:
                if not active:
                    raise FastdualError(
                        "reference oracle: singular equality KKT system"
                    ) from None
                active.pop()  # newest row made the system degenerate
                continue
            d = y_hat - y
            d_norm = float(np.abs(d).max(initial=0.0))
            if d_norm <= 1e-11 * (1.0 + float(np.abs(y_hat).max(initial=0.0))):
                # at the working-set optimum: stop or release a row
                lam_tol = 1e-9 * max(1.0, float(np.abs(lam).max(initial=0.0)))
                neg = [i for i, l in zip(active, lam) if l < -lam_tol]
                if not neg:
                    y = y_hat
                    break
                if bland:
                    drop = min(neg)
                else:  # most negative multiplier first
                    vals = {i: lam[active.index(i)] for i in neg}
                    drop = min(vals, key=vals.get)
                active.remove(drop)
                continue
            # ratio test towards y_hat; violated rows block immediately
            alpha = 1.0
            blockers: list[int] = []
            for idx, (normal, offset, _) in enumerate(ineqs):
                if idx in active:
                    continue
                nd = float(normal @ d)
                if nd <= 1e-12 * max(1.0, d_norm):
                    continue
                a_i = max(0.0, float(offset - normal @ y)) / nd
                if a_i < alpha - 1e-12:
                    alpha, blockers = a_i, [idx]
                elif a_i <= alpha + 1e-12:
                    blockers.append(idx)
            if alpha >= 1.0 or not blockers:
                y = y_hat  # full step inside the feasible set
            else:
                y = y + alpha * d
                active.append(min(blockers))
        else:
            raise CapReached(
                f"reference oracle: active set did not settle in "
                f"{max_changes} changes",
                None,
            )
    # final verification: stationarity, feasibility, multiplier signs
    stat = h_mat @ y + zeta + e_mat.T @ nu_eq
    if len(active):
        stat = stat + g_act.T @ lam
    res = float(np.max(np.abs(stat))) if stat.size else 0.0
    if len(active):
        res = max(res, max(0.0, -float(lam.min())))
    if e_mat.shape[0]:
        res = max(res, float(np.max(np.abs(e_mat @ y - e_rhs))))
    for normal, offset, _ in ineqs:
        res = max(res, max(0.0, float(normal @ y - offset)))
    rel = res / scale / max(1.0, float(np.max(np.abs(y), initial=0.0)))
    if rel > 1e-10:
        raise FastdualError(
            f"reference oracle: KKT residual {res:.3e} (relative {rel:.3e}) "
            "exceeds tolerance"
        )
    if not return_info:
        return y
    mu_g = np.zeros(p.p)
    lam_eq = nu_eq[: p.m]
    for i, l in zip(active, lam):
        tag, j = ineqs[i][2]
        if tag == "g_up":
            mu_g[j] += l
        elif tag == "g_lo":
            mu_g[j] -= l
    return ReferenceInfo(y, lam_eq, mu_g, tuple(active), res, change + 1)
