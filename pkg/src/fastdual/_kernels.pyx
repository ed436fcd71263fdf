"""Compiled hot loops for the dual iteration (optional extension).

Mirrors the update order of the pure-Python engine exactly -- inner solve at
the extrapolated point, metric dual step, candidate primal at the updated
multipliers, momentum -- but skips the dual-objective column, so runs that
log D(nu_k) stay on the Python path.  Two shapes are covered: separable
(soft-)box inner with dualized equalities, and equality-KKT inner with
dualized box rows.
"""

from libc.math cimport fabs, fmax, fmin, sqrt
from libc.string cimport memcpy

import numpy as np

from scipy.linalg.cython_blas cimport dgemv
from scipy.linalg.cython_lapack cimport dgetrs, dpotrs

cdef double _EPS = 2.220446049250313e-16


cdef inline void _av(double[:, ::1] a, double* x, double* out,
                     int rows, int cols) noexcept nogil:
    """out = A x.  C-contiguous A is the transposed Fortran view, so the
    BLAS transpose flag is swapped."""
    cdef int inc = 1
    cdef double one = 1.0, zero = 0.0
    cdef char t = b'T'
    cdef int i
    if rows == 0:
        return
    if cols == 0:
        for i in range(rows):
            out[i] = 0.0
        return
    dgemv(&t, &cols, &rows, &one, &a[0, 0], &cols, x, &inc, &zero, out, &inc)


cdef inline void _atv(double[:, ::1] a, double* x, double* out,
                      int rows, int cols) noexcept nogil:
    """out = A' x for C-contiguous A of shape (rows, cols)."""
    cdef int inc = 1
    cdef double one = 1.0, zero = 0.0
    cdef char t = b'N'
    cdef int i
    if cols == 0:
        return
    if rows == 0:
        for i in range(cols):
            out[i] = 0.0
        return
    dgemv(&t, &cols, &rows, &one, &a[0, 0], &cols, x, &inc, &zero, out, &inc)


cdef inline double _max_abs_diff(double* a, double* b, int n) noexcept nogil:
    cdef double out = 0.0
    cdef int i
    for i in range(n):
        out = fmax(out, fabs(a[i] - b[i]))
    return out


cdef inline double _nrm2(double* a, int n) noexcept nogil:
    cdef double s = 0.0
    cdef int i
    for i in range(n):
        s += a[i] * a[i]
    return sqrt(s)


cdef void _soft_side(double q_y, double a, double q_s, double c, double bound,
                     bint upper, double* y, double* s) noexcept nogil:
    # one-sided slack coupling: independent minimizers if the constraint is
    # slack, otherwise the active-constraint solve with the s >= 0 clamp
    cdef double y_hat = -a / q_y
    cdef double s_hat = fmax(0.0, -c / q_s)
    cdef double sv
    if upper:
        if y_hat <= bound + s_hat:
            y[0] = y_hat
            s[0] = s_hat
        else:
            sv = fmax(0.0, -(q_y * bound + a + c) / (q_y + q_s))
            y[0] = bound + sv
            s[0] = sv
    else:
        if y_hat >= bound - s_hat:
            y[0] = y_hat
            s[0] = s_hat
        else:
            sv = fmax(0.0, (q_y * bound + a - c) / (q_y + q_s))
            y[0] = bound - sv
            s[0] = sv


cdef void _triple(double q_y, double a, double lo, double hi,
                  bint has_l, double ql, double cl,
                  bint has_u, double qu, double cu,
                  double* y, double* sl, double* su) noexcept nogil:
    # at most one side of the range can be active; the inactive side's slack
    # stays at its unconstrained clamp
    cdef double y_hat = -a / q_y
    cdef double sl_hat = 0.0
    cdef double su_hat = 0.0
    if has_l:
        sl_hat = fmax(0.0, -cl / ql)
    if has_u:
        su_hat = fmax(0.0, -cu / qu)
    if lo - sl_hat <= y_hat and y_hat <= hi + su_hat:
        y[0] = y_hat
        sl[0] = sl_hat
        su[0] = su_hat
        return
    if y_hat > hi + su_hat:
        sl[0] = sl_hat
        if not has_u:
            y[0] = hi
            su[0] = 0.0
        else:
            _soft_side(q_y, a, qu, cu, hi, 1, y, su)
        return
    su[0] = su_hat
    if not has_l:
        y[0] = lo
        sl[0] = 0.0
    else:
        _soft_side(q_y, a, ql, cl, lo, 0, y, sl)


cdef void _inner_sep(double[::1] hd, double[::1] lo, double[::1] hi,
                     long[::1] t_iy, double[::1] t_lo, double[::1] t_hi,
                     long[::1] t_sl, long[::1] t_su,
                     double* lin, double* x, int n) noexcept nogil:
    """Separable inner minimizer: clip, then coupled-triple overrides."""
    cdef int i, j, iy, sl, su
    cdef bint has_l, has_u
    cdef double ql, cl, qu, cu, yv, slv, suv
    for i in range(n):
        x[i] = fmin(fmax(-lin[i] / hd[i], lo[i]), hi[i])
    for j in range(t_iy.shape[0]):
        iy = <int> t_iy[j]
        sl = <int> t_sl[j]
        su = <int> t_su[j]
        has_l = sl >= 0
        has_u = su >= 0
        if has_l:
            ql = hd[sl]
            cl = lin[sl]
        else:
            ql = 1.0
            cl = 0.0
        if has_u:
            qu = hd[su]
            cu = lin[su]
        else:
            qu = 1.0
            cu = 0.0
        _triple(hd[iy], lin[iy], t_lo[j], t_hi[j],
                has_l, ql, cl, has_u, qu, cu, &yv, &slv, &suv)
        x[iy] = yv
        if has_l:
            x[sl] = slv
        if has_u:
            x[su] = suv


cdef int _kkt_solve(double[::1, :] lu, int[::1] piv, double[:, ::1] kfull,
                    double k_fro, double* rhs, double* sol, double* work,
                    int nm) noexcept nogil:
    """LU solve with the same refinement policy as the cached factor object:
    accept when the residual is below max(1e-9 ||rhs||, roundoff floor)."""
    cdef int info = 0, one_i = 1, i, it
    cdef char nt = b'N'
    cdef double res, bound, rhs_n, sol_n
    for i in range(nm):
        sol[i] = rhs[i]
    dgetrs(&nt, &nm, &one_i, &lu[0, 0], &nm, &piv[0], sol, &nm, &info)
    if info != 0:
        return -1
    _av(kfull, sol, work, nm, nm)
    res = 0.0
    rhs_n = 0.0
    sol_n = 0.0
    for i in range(nm):
        work[i] = rhs[i] - work[i]
        res += work[i] * work[i]
        rhs_n += rhs[i] * rhs[i]
        sol_n += sol[i] * sol[i]
    res = sqrt(res)
    rhs_n = sqrt(rhs_n)
    bound = fmax(1e-9 * rhs_n, 50.0 * _EPS * k_fro * (1.0 + sqrt(sol_n)))
    for it in range(3):
        if res <= bound:
            return 0
        dgetrs(&nt, &nm, &one_i, &lu[0, 0], &nm, &piv[0], work, &nm, &info)
        if info != 0:
            return -1
        for i in range(nm):
            sol[i] += work[i]
        _av(kfull, sol, work, nm, nm)
        res = 0.0
        sol_n = 0.0
        for i in range(nm):
            work[i] = rhs[i] - work[i]
            res += work[i] * work[i]
            sol_n += sol[i] * sol[i]
        res = sqrt(res)
        bound = fmax(1e-9 * rhs_n, 50.0 * _EPS * k_fro * (1.0 + sqrt(sol_n)))
    if res <= bound:
        return 0
    return -1


def fdgm_box(double[:, ::1] a_mat, double[::1] b_vec, double[::1] zeta,
             double[::1] hd, double[::1] lo, double[::1] hi,
             long[::1] t_iy, double[::1] t_lo, double[::1] t_hi,
             long[::1] t_sl, long[::1] t_su,
             int llam_diag, double[::1] llam_d, double[:, ::1] llam_low,
             double[::1] nu0,
             int oracle, double eps_eq, double eps_ineq, double eps_fp,
             double[::1] y_star, double rel_tol, int max_iter,
             double[::1] out_eq, double[::1] out_ineq, double[::1] out_fp,
             double[::1] out_rel, double[::1] out_y, double[::1] out_lam):
    """Clip-form dual iterations (box / soft-box inner, dualized equalities).

    Returns the 1-based terminating iteration, or 0 when the cap is hit;
    ``out_y``/``out_lam`` hold the final iterate either way.
    """
    cdef int n = zeta.shape[0]
    cdef int m = b_vec.shape[0]
    cdef int i, k, status = 0, info = 0, one_i = 1
    cdef char up = b'U'
    cdef double t_mom = 1.0, t_next, beta
    cdef double eq_res, fp, rel, ref = 0.0
    lam_prev_a = np.zeros(max(m, 1))
    lam_new_a = np.zeros(max(m, 1))
    z_a = np.zeros(max(m, 1))
    r_a = np.zeros(max(m, 1))
    lin_a = np.zeros(n)
    x_a = np.zeros(n)
    y_a = np.zeros(n)
    cdef double[::1] lam_prev = lam_prev_a
    cdef double[::1] lam_new = lam_new_a
    cdef double[::1] z = z_a
    cdef double[::1] r = r_a
    cdef double[::1] lin = lin_a
    cdef double[::1] x = x_a
    cdef double[::1] y = y_a
    for i in range(m):
        lam_prev[i] = nu0[i]
        z[i] = nu0[i]
        lam_new[i] = nu0[i]
    if oracle:
        ref = fmax(_nrm2(&y_star[0], n), 1e-300)
    with nogil:
        for k in range(1, max_iter + 1):
            # inner solve at the extrapolated multiplier
            _atv(a_mat, &z[0], &lin[0], m, n)
            for i in range(n):
                lin[i] += zeta[i]
            _inner_sep(hd, lo, hi, t_iy, t_lo, t_hi, t_sl, t_su,
                       &lin[0], &x[0], n)
            # metric gradient step in the equality multiplier
            if m:
                _av(a_mat, &x[0], &r[0], m, n)
                for i in range(m):
                    r[i] -= b_vec[i]
                if llam_diag:
                    for i in range(m):
                        lam_new[i] = z[i] + r[i] / llam_d[i]
                else:
                    memcpy(&lam_new[0], &r[0], m * sizeof(double))
                    dpotrs(&up, &m, &one_i, &llam_low[0, 0], &m,
                           &lam_new[0], &m, &info)
                    if info != 0:
                        status = -1
                        break
                    for i in range(m):
                        lam_new[i] += z[i]
            # candidate primal at the updated multiplier
            _atv(a_mat, &lam_new[0], &lin[0], m, n)
            for i in range(n):
                lin[i] += zeta[i]
            _inner_sep(hd, lo, hi, t_iy, t_lo, t_hi, t_sl, t_su,
                       &lin[0], &y[0], n)
            eq_res = 0.0
            if m:
                _av(a_mat, &y[0], &r[0], m, n)
                for i in range(m):
                    eq_res = fmax(eq_res, fabs(r[i] - b_vec[i]))
            fp = _max_abs_diff(&lam_new[0], &lam_prev[0], m)
            rel = 0.0
            if oracle:
                for i in range(n):
                    rel += (y[i] - y_star[i]) * (y[i] - y_star[i])
                rel = sqrt(rel) / ref
                out_rel[k - 1] = rel
            out_eq[k - 1] = eq_res
            out_ineq[k - 1] = 0.0
            out_fp[k - 1] = fp
            if oracle:
                if rel <= rel_tol:
                    break
            elif eq_res <= eps_eq and fp <= eps_fp and 0.0 <= eps_ineq:
                break
            # momentum extrapolation
            t_next = 0.5 * (1.0 + sqrt(1.0 + 4.0 * t_mom * t_mom))
            beta = (t_mom - 1.0) / t_next
            t_mom = t_next
            for i in range(m):
                z[i] = lam_new[i] + beta * (lam_new[i] - lam_prev[i])
                lam_prev[i] = lam_new[i]
        else:
            k = 0
    if status != 0:
        return status
    memcpy(&out_y[0], &y[0], n * sizeof(double))
    if m:
        memcpy(&out_lam[0], &lam_new[0], m * sizeof(double))
    return k


def fdgm_eqg(double[:, ::1] b_mat, double[::1] d_lo, double[::1] d_hi,
             double[::1] zeta,
             double[:, ::1] a_h, double[::1] b_h,
             double[::1, :] kkt_lu, int[::1] kkt_piv,
             double[:, ::1] kkt_full, double k_fro,
             double[::1] lmu_d, double[::1] nu0,
             int oracle, double eps_eq, double eps_ineq, double eps_fp,
             double[::1] y_star, double rel_tol, int max_iter,
             double[::1] out_eq, double[::1] out_ineq, double[::1] out_fp,
             double[::1] out_rel, double[::1] out_y, double[::1] out_mu):
    """Equality-inner dual iterations (KKT solve, dualized box rows).

    Returns the 1-based terminating iteration, 0 when capped, or -1 when the
    KKT refinement cannot reach its residual bound.
    """
    cdef int n = zeta.shape[0]
    cdef int p = d_lo.shape[0]
    cdef int mh = b_h.shape[0]
    cdef int nm = n + mh
    cdef int i, k, st, status = 0
    cdef double t_mom = 1.0, t_next, beta
    cdef double eq_res, ineq_res, fp, rel, v_hi, ref = 0.0
    mu_prev_a = np.zeros(p)
    mu_new_a = np.zeros(p)
    v_a = np.zeros(p)
    bx_a = np.zeros(p)
    rhs_a = np.zeros(nm)
    sol_a = np.zeros(nm)
    soly_a = np.zeros(nm)
    work_a = np.zeros(nm)
    lin_a = np.zeros(n)
    ah_a = np.zeros(max(mh, 1))
    cdef double[::1] mu_prev = mu_prev_a
    cdef double[::1] mu_new = mu_new_a
    cdef double[::1] v = v_a
    cdef double[::1] bx = bx_a
    cdef double[::1] rhs = rhs_a
    cdef double[::1] sol = sol_a
    cdef double[::1] soly = soly_a
    cdef double[::1] work = work_a
    cdef double[::1] lin = lin_a
    cdef double[::1] ah_y = ah_a
    for i in range(p):
        mu_prev[i] = nu0[i]
        v[i] = nu0[i]
        mu_new[i] = nu0[i]
    if oracle:
        ref = fmax(_nrm2(&y_star[0], n), 1e-300)
    with nogil:
        for k in range(1, max_iter + 1):
            # inner equality-constrained solve at the extrapolated multiplier
            _atv(b_mat, &v[0], &lin[0], p, n)
            for i in range(n):
                rhs[i] = -(lin[i] + zeta[i])
            for i in range(mh):
                rhs[n + i] = b_h[i]
            st = _kkt_solve(kkt_lu, kkt_piv, kkt_full, k_fro,
                            &rhs[0], &sol[0], &work[0], nm)
            if st != 0:
                status = -1
                break
            # metric prox step in the inequality multiplier
            _av(b_mat, &sol[0], &bx[0], p, n)
            for i in range(p):
                mu_new[i] = fmin(
                    v[i] + (bx[i] - d_lo[i]) / lmu_d[i],
                    fmax(v[i] + (bx[i] - d_hi[i]) / lmu_d[i], 0.0),
                )
            # candidate primal at the updated multiplier
            _atv(b_mat, &mu_new[0], &lin[0], p, n)
            for i in range(n):
                rhs[i] = -(lin[i] + zeta[i])
            st = _kkt_solve(kkt_lu, kkt_piv, kkt_full, k_fro,
                            &rhs[0], &soly[0], &work[0], nm)
            if st != 0:
                status = -1
                break
            eq_res = 0.0
            if mh:
                _av(a_h, &soly[0], &ah_y[0], mh, n)
                for i in range(mh):
                    eq_res = fmax(eq_res, fabs(ah_y[i] - b_h[i]))
            _av(b_mat, &soly[0], &bx[0], p, n)
            ineq_res = 0.0
            v_hi = -1.0
            for i in range(p):
                v_hi = fmax(v_hi, fmax(bx[i] - d_hi[i], d_lo[i] - bx[i]))
            ineq_res = fmax(0.0, v_hi)
            fp = _max_abs_diff(&mu_new[0], &mu_prev[0], p)
            rel = 0.0
            if oracle:
                for i in range(n):
                    rel += (soly[i] - y_star[i]) * (soly[i] - y_star[i])
                rel = sqrt(rel) / ref
                out_rel[k - 1] = rel
            out_eq[k - 1] = eq_res
            out_ineq[k - 1] = ineq_res
            out_fp[k - 1] = fp
            if oracle:
                if rel <= rel_tol:
                    break
            elif eq_res <= eps_eq and ineq_res <= eps_ineq and fp <= eps_fp:
                break
            t_next = 0.5 * (1.0 + sqrt(1.0 + 4.0 * t_mom * t_mom))
            beta = (t_mom - 1.0) / t_next
            t_mom = t_next
            for i in range(p):
                v[i] = mu_new[i] + beta * (mu_new[i] - mu_prev[i])
                mu_prev[i] = mu_new[i]
        else:
            k = 0
    if status != 0:
        return status
    memcpy(&out_y[0], &soly[0], n * sizeof(double))
    if p:
        memcpy(&out_mu[0], &mu_new[0], p * sizeof(double))
    return k
