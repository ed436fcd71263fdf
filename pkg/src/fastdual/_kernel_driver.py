"""Marshal prepared plans into the compiled iteration kernels.

The flat-array view of a plan (constraint matrices, cached factorizations,
metric data) is built once and cached on the plan object; per-run data that
rebinding may change (zeta, equality right-hand sides) is read fresh every
call.  Log columns come back as arrays and are repacked into the same
``SolveLog`` shape the Python engine produces, with the dual-objective
column left empty.
"""

import numpy as np

from .errors import CapReached, SingularKkt
from .problem import HTerm
from .solver import SolveLog, SolveResult, StopRule


def _writable(a, dtype=float):
    out = np.ascontiguousarray(np.asarray(a, dtype=dtype))
    if not out.flags.writeable:
        out = out.copy()
    return out


def _box_state(plan):
    p, inner = plan.p, plan.inner
    triples = inner.triples if p.h.kind == HTerm.SOFT_BOX else ()
    state = {
        "a": _writable(p.eq.a) if p.m else np.zeros((0, p.n)),
        "hd": _writable(inner.hdiag),
        "lo": _writable(inner.lo),
        "hi": _writable(inner.hi),
        "t_iy": np.array([t.y_index for t in triples], dtype=np.int64),
        "t_lo": np.array([t.lo for t in triples], dtype=float),
        "t_hi": np.array([t.hi for t in triples], dtype=float),
        "t_sl": np.array(
            [-1 if t.lower_slack is None else t.lower_slack for t in triples],
            dtype=np.int64,
        ),
        "t_su": np.array(
            [-1 if t.upper_slack is None else t.upper_slack for t in triples],
            dtype=np.int64,
        ),
        "llam_diag": 1,
        "llam_d": np.ones(1),
        "llam_low": np.zeros((1, 1)),
    }
    if p.m:
        if plan.llam.is_diagonal:
            state["llam_d"] = _writable(plan.llam.diag)
        else:
            state["llam_diag"] = 0
            state["llam_low"] = _writable(plan.llam.chol_lower)
    return state


def _eqg_state(plan):
    p = plan.p
    kkt = plan.inner.kkt
    lu, piv = kkt._lu
    luf = np.asfortranarray(np.asarray(lu, dtype=float))
    if not luf.flags.writeable:
        luf = luf.copy(order="F")
    return {
        "b": _writable(p.g.b),
        "d_lo": _writable(p.g.d_lo),
        "d_hi": _writable(p.g.d_hi),
        "a_h": _writable(p.h.eq.a),
        "lu": luf,
        # LAPACK wants 1-based pivots
        "piv": _writable(np.asarray(piv) + 1, dtype=np.int32),
        "kfull": _writable(kkt.k),
        "k_fro": float(kkt._k_fro),
        "lmu_d": _writable(plan.lmu.diag),
    }


def run_fdgm_kernel(kernels, plan, nu0, stop):
    p = plan.p
    cache = getattr(plan, "_kernel_state", None)
    if cache is None:
        if p.h.kind in (HTerm.BOX, HTerm.SOFT_BOX):
            cache = ("box", _box_state(plan))
        else:
            cache = ("eqg", _eqg_state(plan))
        plan._kernel_state = cache
    kind, st = cache
    oracle = 1 if stop.mode == StopRule.ORACLE else 0
    mi = int(stop.max_iter)
    out_eq = np.empty(mi)
    out_ineq = np.empty(mi)
    out_fp = np.empty(mi)
    out_rel = np.empty(mi if oracle else 1)
    y_star = _writable(stop.y_star) if oracle else np.zeros(1)
    zeta = _writable(p.cost.zeta)
    nu0 = _writable(nu0)
    out_y = np.empty(p.n)
    if kind == "box":
        m = p.m
        b_vec = _writable(p.eq.b) if m else np.zeros(0)
        out_dual = np.empty(max(m, 1))
        k = kernels.fdgm_box(
            st["a"], b_vec, zeta, st["hd"], st["lo"], st["hi"],
            st["t_iy"], st["t_lo"], st["t_hi"], st["t_sl"], st["t_su"],
            st["llam_diag"], st["llam_d"], st["llam_low"],
            nu0, oracle, stop.eps_eq, stop.eps_ineq, stop.eps_fp,
            y_star, stop.rel_tol, mi,
            out_eq, out_ineq, out_fp, out_rel, out_y, out_dual,
        )
        if k == -1:
            raise SingularKkt("metric factor solve failed in compiled kernel")
        lam, mu = out_dual[:m].copy(), np.zeros(0)
    else:
        b_h = _writable(p.h.eq.b)
        pdim = p.p
        out_dual = np.empty(max(pdim, 1))
        k = kernels.fdgm_eqg(
            st["b"], st["d_lo"], st["d_hi"], zeta, st["a_h"], b_h,
            st["lu"], st["piv"], st["kfull"], st["k_fro"], st["lmu_d"],
            nu0, oracle, stop.eps_eq, stop.eps_ineq, stop.eps_fp,
            y_star, stop.rel_tol, mi,
            out_eq, out_ineq, out_fp, out_rel, out_y, out_dual,
        )
        if k == -1:
            raise SingularKkt(
                "KKT refinement could not reach its residual bound in the "
                "compiled kernel"
            )
        lam, mu = np.zeros(0), out_dual[:pdim].copy()
    iters = k if k > 0 else mi
    log = SolveLog()
    log.k = list(range(1, iters + 1))
    log.dual_obj = [None] * iters
    log.eq_res = out_eq[:iters].tolist()
    log.ineq_res = out_ineq[:iters].tolist()
    log.fp_res = out_fp[:iters].tolist()
    log.rel_err = out_rel[:iters].tolist() if oracle else [None] * iters
    result = SolveResult(out_y, lam, mu, k > 0, iters, log)
    if k > 0:
        return result
    raise CapReached(f"no convergence in {mi} iterations", result)
