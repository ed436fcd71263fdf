"""Metric proximal operators: ``prox_psi^L(x) = argmin psi(y) + 0.5||y-x||_L^2``.

Separable closed forms require a diagonal metric (box clipping, support
functions of boxes, coupled soft boxes); the non-diagonal box prox exists
only as a small active-set enumeration used by tests.  The conjugate prox is
obtained through the generalized Moreau decomposition

    prox_{g*}^L(x) + L^{-1} prox_g^{L^{-1}}(L x) = x.
"""

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import UnsupportedProx

_ENUM_CAP = 12


@dataclass(frozen=True)
class ZeroFunction:
    pass


@dataclass(frozen=True)
class NonnegOrthant:
    pass


class BoxIndicator:
    def __init__(self, lo, hi):
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        if self.lo.shape != self.hi.shape:
            raise ValueError("box bounds must have equal shapes")
        if np.any(self.lo > self.hi):
            raise ValueError("box requires lo <= hi")


class SupportOfBox:
    """The conjugate of a box indicator (a support function)."""

    def __init__(self, d_lo, d_hi):
        self.d_lo = np.asarray(d_lo, dtype=float)
        self.d_hi = np.asarray(d_hi, dtype=float)
        if np.any(self.d_lo > self.d_hi):
            raise ValueError("support box requires d_lo <= d_hi")


class SoftBoxCoupled:
    """Indicator of ``{lo - s_l <= y_i <= hi + s_u}`` plus plain bounds.

    ``triples`` is a sequence of (y_index, lo, hi, lower_slack, upper_slack)
    with slack indices None when that side is hard.
    """

    def __init__(self, lo, hi, triples):
        self.box = BoxIndicator(lo, hi)
        self.triples = tuple(triples)


def prox(psi, metric, x):
    """Evaluate ``prox_psi^L(x)``; see module docstring for supported pairs."""
    x = np.asarray(x, dtype=float)
    if isinstance(psi, ZeroFunction):
        return x.copy()
    if isinstance(psi, NonnegOrthant):
        psi = BoxIndicator(np.zeros_like(x), np.full_like(x, np.inf))
    if isinstance(psi, BoxIndicator):
        if metric.is_diagonal:
            return np.clip(x, psi.lo, psi.hi)
        if metric.n > _ENUM_CAP:
            raise UnsupportedProx(
                f"non-diagonal box prox limited to n <= {_ENUM_CAP}"
            )
        return box_prox_enumerate(metric.l.a, x, psi.lo, psi.hi)
    if isinstance(psi, SupportOfBox):
        return conjugate_prox_via_moreau(
            BoxIndicator(psi.d_lo, psi.d_hi), metric, x
        )
    if isinstance(psi, SoftBoxCoupled):
        if not metric.is_diagonal:
            raise UnsupportedProx("coupled soft box needs a diagonal metric")
        return _soft_box_project(psi, metric.diag, x)
    raise UnsupportedProx(f"no prox for {type(psi).__name__}")


def conjugate_prox_via_moreau(g, metric, x):
    """``prox_{g*}^L(x)`` through the generalized Moreau decomposition."""
    x = np.asarray(x, dtype=float)
    inner = prox(g, metric.inverse(), metric.apply(x))
    return x - metric.inv_apply(inner)


def support_prox_box(d_lo, d_hi, lmu_diag, v, by):
    """Closed-form conjugate-box prox step of the dual iteration.

    Componentwise ``min(v + (By - d_lo)/l, max(v + (By - d_hi)/l, 0))``;
    infinite bounds degrade gracefully (absent side contributes no clamp).
    """
    lmu_diag = np.asarray(lmu_diag, dtype=float)
    v = np.asarray(v, dtype=float)
    by = np.asarray(by, dtype=float)
    up = v + (by - np.asarray(d_hi, dtype=float)) / lmu_diag
    dn = v + (by - np.asarray(d_lo, dtype=float)) / lmu_diag
    return np.minimum(dn, np.maximum(up, 0.0))


def soft_box_inner_min(q_y, a, q_s, c, bound, side="upper"):
    """Exact minimizer of the one-sided slack-coupled scalar problem.

    side="upper": minimize ``0.5 q_y y^2 + a y + 0.5 q_s s^2 + c s`` subject
    to ``y <= bound + s, s >= 0``; side="lower" mirrors with ``y >= bound - s``.
    Region 1 keeps the constraint inactive (independent minimizers); region 2
    activates it with the nonnegativity clamp on s.
    """
    if q_y <= 0.0 or q_s <= 0.0:
        raise ValueError("quadratic coefficients must be positive")
    y_hat = -a / q_y
    s_hat = max(0.0, -c / q_s)
    if side == "upper":
        if y_hat <= bound + s_hat:
            return y_hat, s_hat
        s = max(0.0, -(q_y * bound + a + c) / (q_y + q_s))
        return bound + s, s
    if side == "lower":
        if y_hat >= bound - s_hat:
            return y_hat, s_hat
        s = max(0.0, (q_y * bound + a - c) / (q_y + q_s))
        return bound - s, s
    raise ValueError(f"side must be 'upper' or 'lower', got {side!r}")


def coupled_triple_min(q_y, a, lo, hi, lower=None, upper=None):
    """Minimize the coupled (y, s_lower, s_upper) group exactly.

    ``lower``/``upper`` are (q_s, c_s) pairs for the slack that softens that
    side, or None when the side is hard.  Objective:

        0.5 q_y y^2 + a y + sum_s (0.5 q_s s^2 + c_s s)
        s.t.  lo - s_lower <= y <= hi + s_upper,  s >= 0.

    Returns (y, s_lower, s_upper) with 0.0 for absent slacks.
    """
    if q_y <= 0.0:
        raise ValueError("quadratic coefficient must be positive")
    y_hat = -a / q_y
    if lower is not None:
        ql, cl = lower
        if ql <= 0.0:
            raise ValueError("quadratic coefficient must be positive")
        sl_hat = max(0.0, -cl / ql)
    else:
        sl_hat = 0.0
    if upper is not None:
        qu, cu = upper
        if qu <= 0.0:
            raise ValueError("quadratic coefficient must be positive")
        su_hat = max(0.0, -cu / qu)
    else:
        su_hat = 0.0
    if lo - sl_hat <= y_hat <= hi + su_hat:
        return y_hat, sl_hat, su_hat
    if y_hat > hi + su_hat:  # upper side active, lower slack stays relaxed
        if upper is None:
            return hi, sl_hat, 0.0
        y, su = soft_box_inner_min(q_y, a, qu, cu, hi, side="upper")
        return y, sl_hat, su
    if lower is None:
        return lo, 0.0, su_hat
    y, sl = soft_box_inner_min(q_y, a, ql, cl, lo, side="lower")
    return y, sl, su_hat


def _soft_box_project(psi, ldiag, x):
    """Projection onto the coupled soft-box set in a diagonal metric."""
    out = np.clip(x, psi.box.lo, psi.box.hi)
    for (iy, lo, hi, isl, isu) in psi.triples:
        lower = (ldiag[isl], -ldiag[isl] * x[isl]) if isl is not None else None
        upper = (ldiag[isu], -ldiag[isu] * x[isu]) if isu is not None else None
        y, sl, su = coupled_triple_min(
            ldiag[iy], -ldiag[iy] * x[iy], lo, hi, lower=lower, upper=upper
        )
        out[iy] = y
        if isl is not None:
            out[isl] = sl
        if isu is not None:
            out[isu] = su
    return out


def box_prox_enumerate(l_mat, x, lo, hi):
    """Exact non-diagonal box prox by active-set enumeration (n <= 12).

    Tries every lower/upper/free pattern, checking primal feasibility and the
    KKT sign conditions; the projection is unique so the first valid pattern
    is the answer.
    """
    l_mat = np.asarray(l_mat, dtype=float)
    x = np.asarray(x, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    n = x.shape[0]
    if n > _ENUM_CAP:
        raise UnsupportedProx(f"enumeration limited to n <= {_ENUM_CAP}")
    choices = []
    for i in range(n):
        opts = ["F"]
        if np.isfinite(lo[i]):
            opts.append("L")
        if np.isfinite(hi[i]):
            opts.append("U")
        choices.append(opts)
    best = None
    best_val = np.inf
    for pattern in itertools.product(*choices):
        y = np.empty(n)
        fixed = [i for i, c in enumerate(pattern) if c != "F"]
        free = [i for i, c in enumerate(pattern) if c == "F"]
        for i in fixed:
            y[i] = lo[i] if pattern[i] == "L" else hi[i]
        if free:
            rhs = (l_mat @ x)[free] - l_mat[np.ix_(free, fixed)] @ y[fixed]
            try:
                y[free] = np.linalg.solve(l_mat[np.ix_(free, free)], rhs)
            except np.linalg.LinAlgError:
                continue
        g = l_mat @ (y - x)
        tol = 1e-9 * max(1.0, np.abs(g).max())
        ok = True
        for i in free:
            if not (lo[i] - 1e-12 <= y[i] <= hi[i] + 1e-12):
                ok = False
                break
        if ok:
            for i in fixed:
                if pattern[i] == "L" and g[i] < -tol:
                    ok = False
                    break
                if pattern[i] == "U" and g[i] > tol:
                    ok = False
                    break
        if ok:
            val = 0.5 * (y - x) @ l_mat @ (y - x)
            if val < best_val:
                best_val, best = val, y.copy()
    if best is None:
        raise RuntimeError("enumeration found no KKT point (bad metric?)")
    return best
