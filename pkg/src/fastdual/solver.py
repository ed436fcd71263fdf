"""Accelerated first-order engines on the dual of structured QPs.

``fgm_run`` is the primal accelerated proximal gradient scheme; ``fdgm_run``
is its dual counterpart: each iteration minimizes the Lagrangian over x in
closed form, takes metric-scaled gradient steps in the equality multiplier
and a metric prox step in the inequality multiplier, then extrapolates with
the 1/k^2 momentum sequence.  ``admm_run`` is the operator-splitting baseline
on the same inequality-dual splitting.

The candidate primal iterate reported each iteration is the inner minimizer
at the *updated* multipliers, so an exact metric on an equality-constrained
QP certifies feasibility after a single dual update.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .curvature import applicable_curvature
from .errors import (
    CapReached,
    NotPositiveSemidefinite,
    RefusedUncertifiedMetric,
    UnsupportedInner,
)
from .linalg import chol_psd, kkt_factor, min_eig
from .problem import GTerm, HTerm
from .prox import coupled_triple_min, prox, support_prox_box


class MomentumState:
    """Scalar momentum recursion ``t <- (1 + sqrt(1 + 4 t^2))/2``.

    Guarantees t_k >= (k+1)/2, which drives the 1/k^2 rate.
    """

    def __init__(self):
        self.t = 1.0
        self.k = 1

    def advance(self):
        """Step the sequence; returns the extrapolation weight (t_k-1)/t_{k+1}."""
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * self.t * self.t))
        beta = (self.t - 1.0) / t_next
        self.t = t_next
        self.k += 1
        return beta


@dataclass
class StopRule:
    """Termination policy: residual thresholds or the benchmark oracle rule."""

    mode: str = "residual"
    eps_eq: float = 1e-6
    eps_ineq: float = 1e-6
    eps_fp: float = 1e-9
    y_star: np.ndarray | None = None
    rel_tol: float = 5e-3
    max_iter: int = 20000

    RESIDUAL = "residual"
    ORACLE = "oracle"

    @classmethod
    def residual(cls, eps_eq=1e-6, eps_ineq=1e-6, eps_fp=1e-9, max_iter=20000):
        return cls(cls.RESIDUAL, eps_eq, eps_ineq, eps_fp, max_iter=max_iter)

    @classmethod
    def oracle(cls, y_star, rel_tol=5e-3, max_iter=20000):
        return cls(
            cls.ORACLE,
            y_star=np.asarray(y_star, dtype=float),
            rel_tol=rel_tol,
            max_iter=max_iter,
        )

    def __post_init__(self):
        if self.mode not in (self.RESIDUAL, self.ORACLE):
            raise ValueError(f"unknown stop mode {self.mode!r}")
        if self.mode == self.ORACLE and self.y_star is None:
            raise ValueError("oracle mode needs y_star")

    def rel_err(self, y):
        ref = np.linalg.norm(self.y_star)
        return np.linalg.norm(y - self.y_star) / max(ref, 1e-300)

    def passed(self, eq_res, ineq_res, fp_res, rel):
        if self.mode == self.ORACLE:
            return rel is not None and rel <= self.rel_tol
        return (
            eq_res <= self.eps_eq
            and ineq_res <= self.eps_ineq
            and fp_res <= self.eps_fp
        )


@dataclass
class SolveLog:
    """Append-only per-iteration record; D is None when not evaluated."""

    k: list = field(default_factory=list)
    dual_obj: list = field(default_factory=list)
    eq_res: list = field(default_factory=list)
    ineq_res: list = field(default_factory=list)
    fp_res: list = field(default_factory=list)
    rel_err: list = field(default_factory=list)

    def append(self, k, d, eq, ineq, fp, rel):
        self.k.append(k)
        self.dual_obj.append(d)
        self.eq_res.append(eq)
        self.ineq_res.append(ineq)
        self.fp_res.append(fp)
        self.rel_err.append(rel)

    def __len__(self):
        return len(self.k)

    def write_csv(self, path_or_file):
        close = False
        if hasattr(path_or_file, "write"):
            fh = path_or_file
        else:
            fh = open(path_or_file, "w")
            close = True
        try:
            fh.write("k,D,eq_res,ineq_res,rel_err_if_ref\n")
            for i in range(len(self.k)):
                d = "" if self.dual_obj[i] is None else repr(self.dual_obj[i])
                r = "" if self.rel_err[i] is None else repr(self.rel_err[i])
                fh.write(
                    f"{self.k[i]},{d},{self.eq_res[i]!r},"
                    f"{self.ineq_res[i]!r},{r}\n"
                )
        finally:
            if close:
                fh.close()


@dataclass
class SolveResult:
    y: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    converged: bool
    iterations: int
    log: SolveLog
    reason: str = ""


class InnerSolver:
    """Cached closed-form minimizer of ``0.5 x'Hx + lin'x + h(x)``.

    Box and coupled-soft-box terms need a diagonal positive H; an equality
    term caches one KKT factorization; a free inner uses a Cholesky factor.
    """

    def __init__(self, p):
        self.p = p
        cost, h = p.cost, p.h
        self.kind = h.kind
        if h.kind in (HTerm.BOX, HTerm.SOFT_BOX):
            if not cost.is_diagonal:
                raise UnsupportedInner(
                    "box-style inner minimization needs a diagonal cost"
                )
            self.hdiag = np.diag(cost.h.a).copy()
            if np.any(self.hdiag <= 0.0):
                raise UnsupportedInner(
                    "box-style inner minimization needs positive diagonal cost"
                )
            self.lo = h.y_min
            self.hi = h.y_max
            if h.kind == HTerm.SOFT_BOX:
                self.triples = h.coupled
                self.special = sorted(h.coupled_indices())
        elif h.kind == HTerm.ZERO:
            if not cost.is_pd:
                raise UnsupportedInner(
                    "free inner minimization needs a positive definite cost"
                )
            self.chol, shift = chol_psd(cost.h)
            if shift != 0.0:
                raise UnsupportedInner(
                    "free inner minimization needs a numerically PD cost"
                )
        elif h.kind == HTerm.EQUALITY:
            self.kkt = kkt_factor(cost.h, h.eq.a)
            self.eq_rhs = h.eq.b
        else:  # pragma: no cover - HTerm constructor rejects other kinds
            raise UnsupportedInner(f"no inner minimizer for kind {h.kind!r}")

    def solve(self, lin, eq_rhs=None):
        if self.kind == HTerm.BOX:
            return np.clip(-lin / self.hdiag, self.lo, self.hi)
        if self.kind == HTerm.SOFT_BOX:
            x = np.clip(-lin / self.hdiag, self.lo, self.hi)
            for tr in self.triples:
                iy, sl, su = tr.y_index, tr.lower_slack, tr.upper_slack
                lower = (self.hdiag[sl], lin[sl]) if sl is not None else None
                upper = (self.hdiag[su], lin[su]) if su is not None else None
                y, s_lo, s_up = coupled_triple_min(
                    self.hdiag[iy], lin[iy], tr.lo, tr.hi, lower, upper
                )
                x[iy] = y
                if sl is not None:
                    x[sl] = s_lo
                if su is not None:
                    x[su] = s_up
            return x
        if self.kind == HTerm.ZERO:
            return scipy.linalg.cho_solve((self.chol, True), -lin)
        rhs = self.eq_rhs if eq_rhs is None else eq_rhs
        return self.kkt.solve_parts(-lin, rhs)[0]


def _g_conjugate(g, mu):
    """Support function of the g-box at mu (finite for in-range signs)."""
    if g.p == 0:
        return 0.0
    out = 0.0
    pos = mu > 0.0
    neg = mu < 0.0
    if np.any(pos):
        out += float(g.d_hi[pos] @ mu[pos])
    if np.any(neg):
        out += float(g.d_lo[neg] @ mu[neg])
    return out


def eval_dual(p, nu, inner=None):
    """Smooth dual part: value, inner minimizer, and gradient ``Cx* - c``."""
    if inner is None:
        inner = InnerSolver(p)
    nu = np.asarray(nu, dtype=float)
    m = p.m
    lam, mu = nu[:m], nu[m:]
    lin = p.cost.zeta.copy()
    if m:
        lin += p.eq.a.T @ lam
    if p.p:
        lin += p.g.b.T @ mu
    x = inner.solve(lin)
    grad = np.empty(m + p.p)
    d = p.cost.value(x)
    if m:
        r = p.eq.a @ x - p.eq.b
        grad[:m] = r
        d += lam @ r
    if p.p:
        bx = p.g.b @ x
        grad[m:] = bx
        d += mu @ bx
    return d, x, grad


def fgm_run(ell, psi, l_metric, x0, stop=None, log_values=True):
    """Accelerated proximal gradient: prox_psi^L(y - L^{-1} grad), momentum.

    ``ell`` maps x to (value, gradient).  Residual mode stops on the
    fixed-point residual; oracle mode compares against ``stop.y_star``.
    """
    if stop is None:
        stop = StopRule.residual()
    x_prev = np.asarray(x0, dtype=float).copy()
    y = x_prev.copy()
    mom = MomentumState()
    log = SolveLog()
    for k in range(1, stop.max_iter + 1):
        _, grad = ell(y)
        x = prox(psi, l_metric, y - l_metric.inv_apply(grad))
        fp = float(np.max(np.abs(x - x_prev))) if x.size else 0.0
        val = float(ell(x)[0]) if log_values else None
        rel = stop.rel_err(x) if stop.mode == StopRule.ORACLE else None
        log.append(k, val, 0.0, 0.0, fp, rel)
        if stop.passed(0.0, 0.0, fp, rel):
            return x, log
        beta = mom.advance()
        y = x + beta * (x - x_prev)
        x_prev = x
    raise CapReached(
        f"no convergence in {stop.max_iter} iterations",
        SolveResult(x, np.zeros(0), np.zeros(0), False, stop.max_iter, log),
    )


class FdgmPlan:
    """Offline state of the dual method: inner caches plus metric certificate.

    Rebinding per-sample data (zeta, equality right-hand sides) never
    refactorizes; the certificate depends only on matrices that stay fixed.
    """

    def __init__(self, p, llam, lmu, certified, cert_margin, inner):
        self.p = p
        self.llam = llam
        self.lmu = lmu
        self.certified = certified
        self.cert_margin = cert_margin
        self.inner = inner
        self._h_eq_rhs = p.h.eq.b if p.h.kind == HTerm.EQUALITY else None

    def rebind(self, *, zeta=None, eq_b=None, h_eq_b=None):
        self.p = self.p.with_updates(zeta=zeta, eq_b=eq_b, h_eq_b=h_eq_b)
        if h_eq_b is not None:
            self._h_eq_rhs = np.asarray(h_eq_b, dtype=float)
        return self


def fdgm_setup(p, llam=None, lmu=None, *, allow_uncertified=False,
               cert_tol=1e-7):
    """Build the dual-method plan and check the curvature certificate.

    The stacked metric must dominate the applicable curvature matrix; a
    failed or unavailable check raises unless explicitly overridden.
    """
    if p.m and llam is None:
        raise ValueError("equality multipliers present: llam metric required")
    if p.p and lmu is None:
        raise ValueError("inequality multipliers present: lmu metric required")
    if p.p and not lmu.is_diagonal:
        raise UnsupportedInner("the inequality-dual metric must be diagonal")
    inner = InnerSolver(p)
    if p.m + p.p == 0:  # no multipliers: nothing for a metric to certify
        return FdgmPlan(p, llam, lmu, True, np.inf, inner)
    certified = False
    margin = -np.inf
    note = ""
    try:
        cm = applicable_curvature(p)
        d = p.m + p.p
        l_stack = np.zeros((d, d))
        if p.m:
            l_stack[: p.m, : p.m] = llam.l.a
        if p.p:
            l_stack[p.m :, p.m :] = lmu.l.a
        diff = l_stack - cm.value.a
        margin = min_eig(0.5 * (diff + diff.T))
        scale = max(1.0, np.linalg.norm(cm.value.a, 2))
        certified = bool(margin >= -cert_tol * scale)
        if not certified:
            note = f"metric fails curvature dominance (margin {margin:.3e})"
    except NotPositiveSemidefinite as exc:
        note = f"curvature matrix unavailable: {exc}"
    if not certified and not allow_uncertified:
        raise RefusedUncertifiedMetric(
            note + "; pass allow_uncertified=True to run anyway"
        )
    return FdgmPlan(p, llam, lmu, certified, margin, inner)


def fdgm_run(p, llam=None, lmu=None, nu0=None, stop=None, *,
             allow_uncertified=False, log_dual=True, backend="auto"):
    """Run the accelerated dual method; accepts a problem or a prepared plan.

    Iterations count dual updates; the returned primal is the inner
    minimizer at the final multipliers.
    """
    if isinstance(p, FdgmPlan):
        plan = p
    else:
        plan = fdgm_setup(p, llam, lmu, allow_uncertified=allow_uncertified)
    if stop is None:
        stop = StopRule.residual()
    prob = plan.p
    if nu0 is None:
        nu0 = np.zeros(prob.m + prob.p)
    nu0 = np.asarray(nu0, dtype=float)
    if nu0.shape != (prob.m + prob.p,):
        raise ValueError("nu0 has wrong length")
    if backend != "py":
        from . import backend as _backend

        kernel = _backend.fdgm_kernel_for(plan, stop, log_dual, backend)
        if kernel is not None:
            return kernel(plan, nu0, stop)
    return _fdgm_engine_py(plan, nu0, stop, log_dual)


def _fdgm_engine_py(plan, nu0, stop, log_dual):
    prob, inner = plan.p, plan.inner
    m, pdim = prob.m, prob.p
    zeta = prob.cost.zeta
    a_mat = prob.eq.a if m else None
    b_vec = prob.eq.b if m else None
    b_mat = prob.g.b if pdim else None
    lam = nu0[:m].copy()
    mu = nu0[m:].copy()
    z, v = lam.copy(), mu.copy()
    mom = MomentumState()
    log = SolveLog()
    h_eq = prob.h.kind == HTerm.EQUALITY
    h_rhs = prob.h.eq.b if h_eq else None
    for k in range(1, stop.max_iter + 1):
        lin = zeta.copy()
        if m:
            lin += a_mat.T @ z
        if pdim:
            lin += b_mat.T @ v
        x = inner.solve(lin, h_rhs)
        if m:
            lam_new = z + plan.llam.inv_apply(a_mat @ x - b_vec)
        else:
            lam_new = lam
        if pdim:
            mu_new = support_prox_box(
                prob.g.d_lo, prob.g.d_hi, plan.lmu.diag, v, b_mat @ x
            )
        else:
            mu_new = mu
        # candidate primal at the updated multipliers
        lin_y = zeta.copy()
        if m:
            lin_y += a_mat.T @ lam_new
        if pdim:
            lin_y += b_mat.T @ mu_new
        y = inner.solve(lin_y, h_rhs)
        eq_res = 0.0
        if m:
            eq_res = float(np.max(np.abs(a_mat @ y - b_vec)))
        if h_eq:
            r = prob.h.eq.a @ y - prob.h.eq.b
            if r.size:
                eq_res = max(eq_res, float(np.max(np.abs(r))))
        ineq_res = 0.0
        if pdim:
            by = b_mat @ y
            viol = np.maximum(by - prob.g.d_hi, prob.g.d_lo - by)
            ineq_res = float(max(0.0, viol.max()))
        fp = 0.0
        if m:
            fp = float(np.max(np.abs(lam_new - lam), initial=0.0))
        if pdim:
            fp = max(fp, float(np.max(np.abs(mu_new - mu), initial=0.0)))
        d_val = None
        if log_dual:
            d_val = prob.cost.value(y)
            if m:
                d_val += lam_new @ (a_mat @ y - b_vec)
            if pdim:
                d_val += mu_new @ by
            d_val = float(d_val) - _g_conjugate(prob.g, mu_new)
        rel = stop.rel_err(y) if stop.mode == StopRule.ORACLE else None
        log.append(k, d_val, eq_res, ineq_res, fp, rel)
        if stop.passed(eq_res, ineq_res, fp, rel):
            return SolveResult(y, lam_new, mu_new, True, k, log)
        beta = mom.advance()
        z = lam_new + beta * (lam_new - lam)
        v = mu_new + beta * (mu_new - mu)
        lam, mu = lam_new, mu_new
    raise CapReached(
        f"no convergence in {stop.max_iter} iterations",
        SolveResult(y, lam, mu, False, stop.max_iter, log),
    )


class AdmmPlan:
    """Prefactored splitting baseline; rebinding rhs data keeps the factor."""

    def __init__(self, p, rho):
        if p.m:
            raise UnsupportedInner(
                "baseline splitting expects equalities inside h, not dualized"
            )
        if p.g.kind != GTerm.BOX or p.p == 0:
            raise UnsupportedInner("baseline splitting needs a box g-term")
        if p.h.kind not in (HTerm.EQUALITY, HTerm.ZERO):
            raise UnsupportedInner(
                "baseline splitting needs equality or free h"
            )
        if rho <= 0.0:
            raise ValueError("penalty must be positive")
        self.p = p
        self.rho = rho
        b_mat = p.g.b
        h_aug = p.cost.h.a + rho * (b_mat.T @ b_mat)
        h_aug = 0.5 * (h_aug + h_aug.T)
        if p.h.kind == HTerm.EQUALITY:
            self.kkt = kkt_factor(h_aug, p.h.eq.a)
            self.chol = None
        else:
            self.chol, shift = chol_psd(h_aug)
            if shift != 0.0:
                raise UnsupportedInner("augmented cost is not numerically PD")
            self.kkt = None

    def rebind(self, *, zeta=None, h_eq_b=None):
        self.p = self.p.with_updates(zeta=zeta, h_eq_b=h_eq_b)
        return self

    def ysolve(self, lin):
        if self.kkt is not None:
            return self.kkt.solve_parts(-lin, self.p.h.eq.b)[0]
        return scipy.linalg.cho_solve((self.chol, True), -lin)


def admm_setup(p, rho):
    return AdmmPlan(p, rho)


def admm_run(p, rho=None, stop=None, log_values=True):
    """Two-block splitting baseline on the inequality-dual formulation.

    Requires the equality-inner form (h equality or free, g box, no
    top-level dualized equalities).  Update order y -> w -> scaled
    multiplier; residual stop uses the primal gap ``||By - w||_inf`` against
    eps_ineq and the dual gap ``rho ||B'(w - w_prev)||_inf`` against eps_eq.
    """
    if isinstance(p, AdmmPlan):
        plan = p
    else:
        if rho is None:
            raise ValueError("rho required when passing a bare problem")
        plan = AdmmPlan(p, rho)
    if stop is None:
        stop = StopRule.residual()
    prob, rho = plan.p, plan.rho
    b_mat, d_lo, d_hi = prob.g.b, prob.g.d_lo, prob.g.d_hi
    w = np.zeros(prob.p)
    u = np.zeros(prob.p)
    log = SolveLog()
    for k in range(1, stop.max_iter + 1):
        y = plan.ysolve(prob.cost.zeta + rho * (b_mat.T @ (u - w)))
        by = b_mat @ y
        w_new = np.clip(by + u, d_lo, d_hi)
        u = u + by - w_new
        r_primal = float(np.max(np.abs(by - w_new)))
        r_dual = rho * float(np.max(np.abs(b_mat.T @ (w_new - w))))
        w = w_new
        eq_res = 0.0
        if prob.h.kind == HTerm.EQUALITY and prob.h.eq.m:
            eq_res = float(np.max(np.abs(prob.h.eq.a @ y - prob.h.eq.b)))
        val = float(prob.cost.value(y)) if log_values else None
        rel = stop.rel_err(y) if stop.mode == StopRule.ORACLE else None
        log.append(k, val, eq_res, r_primal, r_dual, rel)
        if stop.mode == StopRule.ORACLE:
            done = rel is not None and rel <= stop.rel_tol
        else:
            done = r_primal <= stop.eps_ineq and r_dual <= stop.eps_eq
        if done:
            return SolveResult(y, np.zeros(0), rho * u, True, k, log)
    raise CapReached(
        f"no convergence in {stop.max_iter} iterations",
        SolveResult(y, np.zeros(0), rho * u, False, stop.max_iter, log),
    )


def certify_rate(log, llam, lmu, nu0, nu_star, p, tol_rel=1e-6):
    """Check every logged dual value against the momentum-rate envelope.

    Returns the (possibly empty) list of iterations k where
    ``D(nu*) - D(nu_k)`` exceeds ``2 ||nu* - nu0||_L^2 / (k+1)^2``.
    """
    nu0 = np.asarray(nu0, dtype=float)
    nu_star = np.asarray(nu_star, dtype=float)
    m = p.m
    d_star, _, _ = eval_dual(p, nu_star)
    d_star -= _g_conjugate(p.g, nu_star[m:])
    diff = nu_star - nu0
    nrm2 = 0.0
    if m:
        nrm2 += float(diff[:m] @ llam.apply(diff[:m]))
    if p.p:
        nrm2 += float(diff[m:] @ lmu.apply(diff[m:]))
    bad = []
    for k, d_k in zip(log.k, log.dual_obj):
        if d_k is None:
            continue
        bound = 2.0 * nrm2 / (k + 1) ** 2
        gap = d_star - d_k
        if gap > bound * (1.0 + tol_rel) + 1e-10 * (1.0 + abs(d_star)):
            bad.append(k)
    return bad
