"""Small LMI solver for the offline metric programs.

Problems are posed over a symmetric matrix variable ``M`` restricted to a
sparsity pattern (a list of (i, j) index pairs).  Each constraint block is

    S_b(M, t) = const_b + t * t_mat_b + sign_b * W_b M W_b'  >= 0 (PSD)

which covers every program this package needs: pattern-restricted metric
domination (W = I), congruence-transformed certificates (W = Q C'), and the
variable floor ``M - eps I >= 0``.

Fixed-t feasibility maximizes the uniform margin ``s`` subject to
``S_b - s I >= 0`` with a dense Newton log-barrier method: a strictly
positive margin certifies feasibility, while convergence to a negative
margin certifies infeasibility.  When a scalar ``t`` is to be optimized,
the solver verifies the caller-designated feasible bracket end and then
optimizes ``t`` directly by a barrier method on the joint variable
``(M, t)``, staged in the usual way; pattern variables are rescaled by the
column norms of the capping blocks so the Newton systems stay balanced.
The pattern basis matrices have rank at most two through each congruence,
so barrier gradients and Hessians assemble from ``W'S^{-1}W`` alone.
Problems are desk-scale (a few hundred variables), so robustness beats
sophistication.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import Infeasible

_DEFAULT_VAR_CAP = 512


@dataclass
class CongruenceBlock:
    """One PSD constraint ``const + t*t_mat + sign * W M W' >= 0``."""

    const: np.ndarray
    w: np.ndarray
    sign: float = 1.0
    t_mat: np.ndarray | None = None

    def __post_init__(self):
        self.const = np.asarray(self.const, dtype=float)
        self.w = np.atleast_2d(np.asarray(self.w, dtype=float))
        if self.t_mat is not None:
            self.t_mat = np.asarray(self.t_mat, dtype=float)
        s = self.const.shape[0]
        if self.const.shape != (s, s) or self.w.shape[0] != s:
            raise ValueError("block shapes inconsistent")


class LmiProblem:
    """Pattern-restricted matrix variable plus constraint blocks.

    ``pairs`` lists the allowed upper-triangle entries (i <= j) of the d x d
    symmetric variable.  ``t_bracket``/``t_sense`` request bisection on t:
    sense "min" assumes the upper end feasible, "max" the lower end.
    """

    def __init__(self, d, pairs, blocks, t_bracket=None, t_sense=None,
                 var_cap=_DEFAULT_VAR_CAP):
        if len(pairs) > var_cap:
            raise ValueError(
                f"{len(pairs)} pattern variables exceed the cap {var_cap}"
            )
        for (i, j) in pairs:
            if not (0 <= i <= j < d):
                raise ValueError(f"bad pattern pair ({i}, {j})")
        if t_sense not in (None, "min", "max"):
            raise ValueError(f"bad t_sense {t_sense!r}")
        if (t_bracket is None) != (t_sense is None):
            raise ValueError("t_bracket and t_sense go together")
        self.d = d
        self.pairs = list(pairs)
        self.blocks = list(blocks)
        self.t_bracket = t_bracket
        self.t_sense = t_sense
        self._ii = np.array([i for i, _ in self.pairs], dtype=int)
        self._jj = np.array([j for _, j in self.pairs], dtype=int)
        self._diag = (self._ii == self._jj)

    # -- pattern variable handling ------------------------------------------

    def assemble(self, m_vec):
        """Dense symmetric M from the pattern coefficient vector."""
        m = np.zeros((self.d, self.d))
        m[self._ii, self._jj] = m_vec
        m[self._jj, self._ii] = m_vec
        return m

    def extract(self, m_mat):
        """Pattern coefficients of (the pattern part of) a symmetric matrix."""
        return np.asarray(m_mat)[self._ii, self._jj].copy()

    def s_blocks(self, m_mat, t):
        out = []
        for blk in self.blocks:
            s = blk.const + blk.sign * (blk.w @ m_mat @ blk.w.T)
            if blk.t_mat is not None:
                s = s + t * blk.t_mat
            out.append(0.5 * (s + s.T))
        return out

    def gaps(self, m_mat, t):
        """Most-negative eigenvalue of each block (0 when PSD)."""
        return [
            min(0.0, float(np.linalg.eigvalsh(s)[0])) if s.size else 0.0
            for s in self.s_blocks(m_mat, t)
        ]


@dataclass
class SdpResult:
    m_mat: np.ndarray
    t: float | None
    feasible: bool
    iterations: int
    warning: str | None = None
    block_min_eigs: list = field(default_factory=list)


def _block_margin(lmi, m_vec, t):
    """Smallest eigenvalue over all blocks at the given point."""
    vals = [
        float(np.linalg.eigvalsh(s)[0])
        for s in lmi.s_blocks(lmi.assemble(m_vec), t)
        if s.size
    ]
    return min(vals) if vals else np.inf


def _barrier_feasibility(lmi, m_vec, t, feas_tol, max_newton):
    """Search for a strictly feasible point by maximizing the margin s.

    Newton log-barrier on ``max s  s.t.  S_b(M, t) - s I >= 0, s <= cap``;
    any point with s above the exit threshold is returned immediately.  An
    artificial cap block ``c I - M >= 0`` keeps the barrier bounded along
    pattern directions the real blocks do not see.  Returns ``(feasible,
    m_vec, gap, newton_iters)`` where gap is the worst block violation of
    the returned point.
    """
    k = len(lmi.pairs)
    d = lmi.d
    ii, jj = lmi._ii, lmi._jj
    pair_factor = np.where(lmi._diag, 1.0, 2.0)
    hess_factor = 2.0 ** (1.0 - lmi._diag[:, None] - lmi._diag[None, :])
    s_exit = 10.0 * feas_tol

    start_margin = _block_margin(lmi, m_vec, t)
    if start_margin >= s_exit:
        return True, m_vec.copy(), 0.0, 0
    if not np.isfinite(start_margin):
        return True, m_vec.copy(), 0.0, 0  # no constraints at all
    m_cap = 1e9 * max(1.0, float(np.abs(m_vec).max(initial=0.0)))
    blocks = lmi.blocks + [
        CongruenceBlock(const=m_cap * np.eye(d), w=np.eye(d), sign=-1.0)
    ]
    s_cap = 2.0 + abs(start_margin)
    x = np.concatenate([m_vec, [start_margin - 0.05 * (1.0 + abs(start_margin))]])
    nu = sum(b.const.shape[0] for b in blocks) + 1.0

    def eval_point(x):
        """(logdet_sum, chols) of the shifted blocks, None outside domain."""
        vec, s = x[:k], x[k]
        if s >= s_cap:
            return None
        m_mat = lmi.assemble(vec)
        logdet = 0.0
        chols = []
        for blk in blocks:
            sb = blk.const + blk.sign * (blk.w @ m_mat @ blk.w.T)
            if blk.t_mat is not None:
                sb = sb + t * blk.t_mat
            if not sb.size:
                chols.append(None)
                continue
            shifted = 0.5 * (sb + sb.T) - s * np.eye(sb.shape[0])
            try:
                c = np.linalg.cholesky(shifted)
            except np.linalg.LinAlgError:
                return None
            chols.append(c)
            logdet += 2.0 * float(np.log(np.diag(c)).sum())
        return logdet, chols

    def phi(x, point, tau):
        logdet, _ = point
        return -tau * x[k] - logdet - np.log(s_cap - x[k])

    used = 0
    # s-accuracy ~ nu/tau: start with the margin objective already competing
    tau = nu / max(1.0, abs(x[k]))
    point = eval_point(x)
    prev_s = -np.inf
    stalled = 0
    while used < max_newton:
        converged_stage = False
        while used < max_newton:
            used += 1
            s = x[k]
            grad = np.zeros(k + 1)
            hess = np.zeros((k + 1, k + 1))
            grad[k] = -tau + 1.0 / (s_cap - s)
            hess[k, k] = 1.0 / (s_cap - s) ** 2
            for blk, c in zip(blocks, point[1]):
                if c is None:
                    continue
                t_inv = scipy.linalg.cho_solve((c, True), np.eye(c.shape[0]))
                tw = t_inv @ blk.w
                u = blk.w.T @ tw  # W' (S - sI)^{-1} W
                v = tw.T @ tw     # W' (S - sI)^{-2} W
                grad[:k] -= blk.sign * pair_factor * u[ii, jj]
                grad[k] += float(np.trace(t_inv))
                hess[:k, :k] += hess_factor * (
                    u[np.ix_(ii, ii)] * u[np.ix_(jj, jj)]
                    + u[np.ix_(ii, jj)] * u[np.ix_(jj, ii)]
                )
                cross = blk.sign * pair_factor * v[ii, jj]
                hess[:k, k] -= cross
                hess[k, :k] -= cross
                hess[k, k] += float((t_inv * t_inv).sum())
            hess[np.diag_indices_from(hess)] += 1e-12 * max(
                1.0, float(np.abs(np.diag(hess)).max())
            )
            try:
                dx = np.linalg.solve(hess, -grad)
            except np.linalg.LinAlgError:
                dx = np.linalg.lstsq(hess, -grad, rcond=None)[0]
            decrement = float(-grad @ dx)
            if decrement <= 2e-10 * (1.0 + abs(phi(x, point, tau))):
                converged_stage = True
                break
            base = phi(x, point, tau)
            alpha = 1.0
            while alpha > 1e-13:
                cand = x + alpha * dx
                cand_point = eval_point(cand)
                if cand_point is not None and (
                    phi(cand, cand_point, tau)
                    <= base + 0.01 * alpha * float(grad @ dx)
                ):
                    break
                alpha *= 0.5
            else:
                converged_stage = True  # no descent: treat as converged
                break
            x, point = cand, cand_point
            if x[k] >= s_exit:
                return True, x[:k].copy(), 0.0, used
        if not converged_stage:
            break  # newton budget exhausted
        if nu / tau <= 0.1 * feas_tol:
            break
        if abs(x[k] - prev_s) <= max(1e-12, 1e-6 * abs(x[k])):
            stalled += 1
            if stalled >= 2:
                break
        else:
            stalled = 0
        prev_s = x[k]
        tau *= 10.0
    gap = max(0.0, -_block_margin(lmi, x[:k], t))
    return x[k] >= s_exit, x[:k].copy(), gap, used


def _barrier_direct(lmi, vec_hint, anchor, far, sigma, feas_tol, bisect_tol,
                    max_newton):
    """Optimize t by barrier stages on the joint variable (M, t).

    ``sigma`` is +1 to maximize t, -1 to minimize.  The start is built from
    the anchor hint or a scaled pattern-diagonal fallback, backed off until
    strictly feasible.  Returns ``(t, m_vec, used, converged)``; t is None
    when no strictly feasible start exists.
    """
    k = len(lmi.pairs)
    d = lmi.d
    ii, jj = lmi._ii, lmi._jj
    pair_factor = np.where(lmi._diag, 1.0, 2.0)
    hess_factor = 2.0 ** (1.0 - lmi._diag[:, None] - lmi._diag[None, :])

    # rescale pattern variables by the capping blocks' column visibility
    u = np.zeros(d)
    for blk in lmi.blocks:
        if blk.sign < 0.0 and blk.w.size:
            u = np.maximum(u, (blk.w**2).sum(axis=0))
    if u.max(initial=0.0) > 0.0:
        c_var = 1.0 / np.sqrt(np.maximum(u, 1e-16 * u.max()))
    else:
        c_var = np.ones(d)
    scale = c_var[ii] * c_var[jj]
    m_cap = 1e12 * max(1.0, float(np.abs(vec_hint).max(initial=0.0)))
    blocks = lmi.blocks + [
        CongruenceBlock(const=m_cap * np.eye(d), w=np.eye(d), sign=-1.0),
        CongruenceBlock(const=m_cap * np.eye(d), w=np.eye(d), sign=1.0),
    ]
    w_s = [blk.w * c_var[None, :] for blk in blocks]
    nu = float(sum(b.const.shape[0] for b in blocks))

    def eval_point(z):
        """(logdet_sum, chols) at z = (y, t), None outside the domain."""
        m_mat = lmi.assemble(scale * z[:k])
        t = z[k]
        logdet = 0.0
        chols = []
        for blk in blocks:
            sb = blk.const + blk.sign * (blk.w @ m_mat @ blk.w.T)
            if blk.t_mat is not None:
                sb = sb + t * blk.t_mat
            if not sb.size:
                chols.append(None)
                continue
            try:
                c = np.linalg.cholesky(0.5 * (sb + sb.T))
            except np.linalg.LinAlgError:
                return None
            chols.append(c)
            logdet += 2.0 * float(np.log(np.diag(c)).sum())
        return logdet, chols

    def phi(z, point, tau):
        return -sigma * tau * z[k] - point[0]

    # start: best-margin candidate among scalings of the hint and a scaled
    # diagonal, with t backed off from the anchor until strictly inside
    y_hint = vec_hint / scale
    y_cands = [ms * y_hint
               for ms in (1.0, 1.0 + 1e-6, 1.0 - 1e-6, 1.0 + 1e-3,
                          1.0 - 1e-3, 1.1, 0.9)]
    if lmi._diag.any():
        lam_top = 0.0
        for blk, ws in zip(lmi.blocks, w_s):
            if blk.sign < 0.0 and ws.size:
                lam_top = max(lam_top, float(np.linalg.norm(ws, 2)) ** 2)
        if lam_top > 0.0:
            y_theta = np.zeros(k)
            y_theta[lmi._diag] = 0.5 / lam_top
            y_cands.append(y_theta)
    start = None
    start_margin = -np.inf
    for y0 in y_cands:
        for delta in (0.0, 1e-9, 1e-6, 1e-3, 1e-1, 0.5):
            t0 = anchor - sigma * delta * (1.0 + abs(anchor))
            z0 = np.concatenate([y0, [t0]])
            point0 = eval_point(z0)
            if point0 is None:
                continue
            margin0 = _block_margin(lmi, scale * y0, t0)
            if margin0 > start_margin:
                start, start_margin = (z0, point0), margin0
            break
    if start is None:
        return None, None, 0, False
    z, point = start

    # balance the stage-1 objective against the barrier's pull on t
    g_t = 0.0
    for blk, c in zip(blocks, point[1]):
        if blk.t_mat is None or c is None:
            continue
        g_t += float(np.trace(scipy.linalg.cho_solve((c, True), blk.t_mat)))
    tau = min(max(1.0, -sigma * g_t), 1e12)

    used = 0
    converged = False
    t_floor = 1e-12 * (1.0 + abs(anchor))
    for _ in range(80):
        while used < max_newton:
            used += 1
            grad = np.zeros(k + 1)
            hess = np.zeros((k + 1, k + 1))
            grad[k] = -sigma * tau
            for blk, ws, c in zip(blocks, w_s, point[1]):
                if c is None:
                    continue
                tw = scipy.linalg.cho_solve((c, True), ws)
                uu = ws.T @ tw  # W' S^{-1} W in the scaled variables
                grad[:k] -= blk.sign * pair_factor * uu[ii, jj]
                hess[:k, :k] += hess_factor * (
                    uu[np.ix_(ii, ii)] * uu[np.ix_(jj, jj)]
                    + uu[np.ix_(ii, jj)] * uu[np.ix_(jj, ii)]
                )
                if blk.t_mat is not None:
                    x_t = scipy.linalg.cho_solve((c, True), blk.t_mat)
                    grad[k] -= float(np.trace(x_t))
                    hess[k, k] += float((x_t * x_t.T).sum())
                    zz = tw.T @ blk.t_mat @ tw
                    cross = blk.sign * pair_factor * zz[ii, jj]
                    hess[:k, k] += cross
                    hess[k, :k] += cross
            hess[np.diag_indices_from(hess)] += 1e-12 * max(
                1.0, float(np.abs(np.diag(hess)).max())
            )
            try:
                dx = np.linalg.solve(hess, -grad)
            except np.linalg.LinAlgError:
                dx = np.linalg.lstsq(hess, -grad, rcond=None)[0]
            decrement = float(-grad @ dx)
            if decrement <= 2e-10 * (1.0 + abs(phi(z, point, tau))):
                break
            base = phi(z, point, tau)
            alpha = 1.0
            while alpha > 1e-13:
                cand = z + alpha * dx
                cand_point = eval_point(cand)
                if cand_point is not None and (
                    phi(cand, cand_point, tau)
                    <= base + 0.01 * alpha * float(grad @ dx)
                ):
                    break
                alpha *= 0.5
            else:
                break  # no descent: stage is as centered as it gets
            z, point = cand, cand_point
        if used >= max_newton:
            break
        if nu / tau <= 0.25 * bisect_tol * max(abs(z[k]), t_floor):
            converged = True
            break
        tau *= 10.0
    return float(z[k]), scale * z[:k], used, converged


def sdp_solve(lmi, *, feas_tol=1e-7, bisect_tol=0.01, max_ap_iter=2000,
              max_total_iter=60000, m0=None):
    """Solve the LMI problem; optimize t when requested.

    Returns the best feasible point found.  Raises :class:`Infeasible` when
    even the caller-designated feasible bracket end (or the fixed-t problem)
    admits no solution.  Hitting the total iteration budget returns the best
    feasible iterate with ``warning`` set.  ``max_ap_iter`` caps the Newton
    iterations of one barrier subproblem; ``bisect_tol`` is the relative
    accuracy requested of the optimized t.
    """
    k = len(lmi.pairs)
    vec = np.zeros(k) if m0 is None else lmi.extract(np.asarray(m0))
    total = 0

    if lmi.t_sense is None:
        ok, vec, gap, used = _barrier_feasibility(
            lmi, vec, 0.0, feas_tol, max_ap_iter
        )
        if not ok:
            raise Infeasible(
                f"LMI feasibility gap {gap:.3e} after {used} iterations"
            )
        return SdpResult(
            m_mat=lmi.assemble(vec),
            t=None,
            feasible=True,
            iterations=used,
            block_min_eigs=lmi.gaps(lmi.assemble(vec), 0.0),
        )

    lo, hi = lmi.t_bracket
    if not (0.0 < lo <= hi):
        raise ValueError("t bracket must be positive and ordered")
    sigma = -1.0 if lmi.t_sense == "min" else 1.0
    anchor = hi if lmi.t_sense == "min" else lo
    far = lo if lmi.t_sense == "min" else hi

    # verify the designated feasible end (cheap when the hint already works)
    if _block_margin(lmi, vec, anchor) >= -feas_tol:
        total += 1
    else:
        ok, vec, gap, used = _barrier_feasibility(
            lmi, vec, anchor, feas_tol, max_ap_iter
        )
        total += max(used, 1)
        # the caller guarantees the anchor; accept it within the tolerance
        # (its maximal margin can legitimately sit below the strict exit)
        if not ok and gap > feas_tol:
            raise Infeasible(
                f"designated feasible end t={anchor:.6g} has gap {gap:.3e}"
            )
    best_t, best_vec = anchor, vec.copy()
    warning = None

    remaining = min(max_ap_iter, max_total_iter - total)
    if remaining > 0:
        t_dir, vec_dir, used, done = _barrier_direct(
            lmi, best_vec.copy(), anchor, far, sigma, feas_tol, bisect_tol,
            remaining,
        )
        total += used
        accepted = (
            t_dir is not None
            and sigma * (t_dir - anchor) >= 0.0
            and _block_margin(lmi, vec_dir, t_dir) >= -feas_tol
        )
        if accepted:
            best_t, best_vec = t_dir, vec_dir
            if not done:
                warning = (
                    f"iteration budget reached; returning best feasible "
                    f"t={best_t:.6g}"
                )
        else:
            warning = (
                f"t improvement unavailable; returning the designated end "
                f"t={anchor:.6g}"
            )
    else:
        warning = (
            f"iteration budget {max_total_iter} reached; returning best "
            f"feasible t={best_t:.6g}"
        )
    m_mat = lmi.assemble(best_vec)
    return SdpResult(
        m_mat=m_mat,
        t=best_t,
        feasible=True,
        iterations=total,
        warning=warning,
        block_min_eigs=lmi.gaps(m_mat, best_t),
    )
