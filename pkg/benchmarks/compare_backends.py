"""Per-iteration timing of the pure-Python engine vs the compiled kernels.

Runs a fixed number of forced iterations (unreachable thresholds) on the
aircraft benchmark in both dual forms plus a small dense-metric problem, and
reports microseconds per iteration and the speedup.  Results also sanity-check
that both engines agree on the final iterate.

Usage:  python3 benchmarks/compare_backends.py [--iters N]
"""

import argparse
import time

import numpy as np

from fastdual.backend import HAVE_COMPILED_KERNELS
from fastdual.curvature import applicable_curvature
from fastdual.errors import CapReached
from fastdual.metric import metric_from_dense, scalar_metric
from fastdual.mpc import afti16_model, condense_eqdual, condense_ineqdual
from fastdual.problem import AffineEq, ComposedProblem, HTerm, QuadCost
from fastdual.solver import StopRule, fdgm_run, fdgm_setup


def exact_metrics(p):
    cm = applicable_curvature(p)
    llam, lmu = metric_from_dense(cm.value.a).split(p.m)
    return (llam if p.m else None), (lmu if p.p else None)


def scalar_metrics(p):
    cm = applicable_curvature(p)
    llam, lmu = scalar_metric(cm).split(p.m)
    return (llam if p.m else None), (lmu if p.p else None)


def small_box_problem(rng, n=20, m=8):
    hd = rng.uniform(0.5, 3.0, n)
    cost = QuadCost(np.diag(hd), rng.standard_normal(n))
    a = rng.standard_normal((m, n))
    x_feas = rng.uniform(-0.5, 0.5, n)
    return ComposedProblem(
        cost, HTerm.box(-np.ones(n), np.ones(n)), eq=AffineEq(a, a @ x_feas)
    )


def timed_run(plan, n_iters, backend):
    stop = StopRule.residual(-1.0, -1.0, -1.0, max_iter=n_iters)
    t0 = time.perf_counter()
    try:
        fdgm_run(plan, stop=stop, log_dual=False, backend=backend)
    except CapReached as exc:
        y = exc.result.y
    elapsed = time.perf_counter() - t0
    return elapsed / n_iters * 1e6, y


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iters", type=int, default=3000,
                    help="forced iterations per case (default 3000)")
    args = ap.parse_args()
    if not HAVE_COMPILED_KERNELS:
        raise SystemExit("compiled kernels are not built; nothing to compare")
    rng = np.random.default_rng(0)
    inst = afti16_model()
    cases = [
        ("aircraft eq-dual, exact metric", condense_eqdual(inst), exact_metrics),
        ("aircraft eq-dual, scalar metric", condense_eqdual(inst), scalar_metrics),
        ("aircraft ineq-dual, scalar metric", condense_ineqdual(inst),
         scalar_metrics),
        ("random box QP n=20 m=8", small_box_problem(rng), exact_metrics),
    ]
    print(f"{'case':36s} {'python':>10s} {'compiled':>10s} {'speedup':>9s}")
    for name, p, mets in cases:
        llam, lmu = mets(p)
        plan = fdgm_setup(p, llam, lmu)
        t_py, y_py = timed_run(plan, args.iters, "py")
        t_c, y_c = timed_run(plan, args.iters, "compiled")
        drift = np.max(np.abs(y_py - y_c)) / max(1.0, np.max(np.abs(y_py)))
        tag = "" if drift <= 1e-9 else f"  DRIFT {drift:.1e}"
        print(f"{name:36s} {t_py:8.2f}us {t_c:8.2f}us {t_py / t_c:8.1f}x{tag}")


if __name__ == "__main__":
    main()
