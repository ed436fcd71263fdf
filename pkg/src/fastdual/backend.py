"""Select between compiled iteration kernels and the pure-Python engine.

The compiled extension is optional: it is used automatically when importable
and when the problem shape matches a kernel specialization.  Set the
environment variable ``FASTDUAL_PURE_PYTHON`` (any nonempty value) before
import to force the Python engine everywhere.
"""

import os

from .problem import GTerm, HTerm

if os.environ.get("FASTDUAL_PURE_PYTHON"):
    _kernels = None
    HAVE_COMPILED_KERNELS = False
else:
    try:
        from . import _kernels

        HAVE_COMPILED_KERNELS = True
    except ImportError:
        _kernels = None
        HAVE_COMPILED_KERNELS = False


def kernel_supports(plan, stop, log_dual):
    """True when a compiled specialization covers this run exactly.

    Kernels skip the dual-objective column (residuals and oracle errors are
    still logged), so runs that need D(nu_k) stay on the Python engine.
    """
    if log_dual:
        return False
    p = plan.p
    if p.h.kind in (HTerm.BOX, HTerm.SOFT_BOX):
        return p.g.kind == GTerm.ZERO or p.p == 0
    if p.h.kind == HTerm.EQUALITY:
        return p.m == 0 and p.g.kind == GTerm.BOX and p.p > 0
    return False


def fdgm_kernel_for(plan, stop, log_dual, request):
    """Return a runner closure for the compiled engine, or None to fall back."""
    if request not in ("auto", "compiled"):
        raise ValueError(f"unknown backend {request!r}")
    if not HAVE_COMPILED_KERNELS:
        if request == "compiled":
            raise RuntimeError("compiled kernels are not available")
        return None
    if not kernel_supports(plan, stop, log_dual):
        if request == "compiled":
            raise RuntimeError("no compiled kernel for this problem shape")
        return None
    from ._kernel_driver import run_fdgm_kernel

    def runner(plan_, nu0, stop_):
        return run_fdgm_kernel(_kernels, plan_, nu0, stop_)

    return runner
