"""fastdual: fast dual gradient QP solvers with offline metric preconditioning.

Layout
------
linalg     checked dense linear-algebra kernels (eig, PSD Cholesky, KKT, SVD)
problem    composite QP description ``min f + h + g(Bx)  s.t.  Ax = b``
prox       metric proximal operators (box, support functions, coupled slacks)
curvature  dual curvature matrices ``C P C^T`` and scalar Lipschitz baselines
lmi        small LMI solver (log-barrier feasibility and scalar optimization)
metric     offline metric (preconditioner) selection and structure patterns
solver     fast (dual) gradient methods, ADMM baseline, rate certification
reference  independent active-set QP oracle
mpc        linear MPC condensation, aircraft model, closed-loop simulation
bench      closed-loop iteration benchmark harness
cli        ``fastdual`` command-line entry point
"""

__version__ = "0.1.0"


def __getattr__(name):
    # lazy: keeps `import fastdual` cheap and build-order independent
    if name == "HAVE_COMPILED_KERNELS":
        from . import backend

        return backend.HAVE_COMPILED
    raise AttributeError(name)
