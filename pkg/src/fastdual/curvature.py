"""Dual curvature matrices ``C P C'`` and scalar Lipschitz baselines.

The negative dual function of the composite QP has a quadratic upper bound
with curvature ``C P C'`` where ``P`` depends on how the inner minimization
treats the Hessian:

* ``P = H^{-1}`` (H PD, any h),
* ``P = H^{-1/2}(I - M)H^{-1/2}`` with the projector ``M`` onto the scaled
  row space of the equality block (h an equality indicator, H PD),
* ``P = K11``, the upper-left block of the inverse KKT matrix (h an equality
  indicator, H only PSD but PD on the constraint null space).

Each construction returns a factor ``Q`` with ``P = Q'Q``; downstream metric
selection keys off the rank structure of ``Q C'``.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import NotPositiveSemidefinite
from .linalg import (
    SymMatrix,
    kkt_factor,
    min_eig,
    spectral_norm,
    sym_eig,
    sym_inv_sqrt,
    sym_product,
)
from .problem import HTerm

INVERSE_H = "inverse_h"
PROJECTED_INVERSE_H = "projected_inverse_h"
KKT_BLOCK = "kkt_block"


@dataclass
class CurvatureMatrix:
    """Curvature ``value = C P C'`` with the factor ``P = q_factor' q_factor``.

    ``value`` is built directly from the (rank-truncated) factor so the two
    representations agree exactly; ``k11`` keeps the untruncated inverse-KKT
    block when that construction was used.  ``c_mat`` is the stacked ``[A; B]``
    the curvature refers to.
    """

    value: SymMatrix
    p_source: str
    q_factor: np.ndarray
    c_mat: np.ndarray
    k11: SymMatrix | None = None

    @property
    def q(self):
        return self.q_factor.shape[0]

    def __post_init__(self):
        v = self.value
        lo = min_eig(v)
        if lo < -1e-9 * max(v.norm_max(), 1.0):
            raise NotPositiveSemidefinite(
                f"curvature matrix has eigenvalue {lo:.3e}"
            )
        w = self.c_mat @ self.q_factor.T
        recon = w @ w.T
        err = np.abs(recon - v.a).max() if v.n else 0.0
        if err > 1e-10 * max(v.norm_max(), 1.0):
            raise AssertionError(
                f"curvature reconstruction mismatch {err:.3e}"
            )


def _factor_from_psd(p_mat, tol=1e-9):
    """Rank-truncated factor Q with Q'Q ~= p_mat (PSD), rows = rank."""
    e = sym_eig(p_mat)
    w = e.values
    top = w[-1] if w.size else 0.0
    keep = w > tol * max(top, 0.0) if top > 0.0 else np.zeros_like(w, bool)
    wk = w[keep]
    vk = e.vectors[:, keep]
    return (vk * np.sqrt(wk)).T


def curvature_general(p):
    """``P = H^{-1}``; requires a PD Hessian.

    Raises
    ------
    NotPositiveSemidefinite
        If H is singular; the message points at the KKT-block construction.
    """
    if not p.cost.is_pd():
        raise NotPositiveSemidefinite(
            "Hessian is not PD; use curvature_kkt (equality h) instead"
        )
    c_mat, _ = p.stacked()
    q = sym_inv_sqrt(p.cost.h)  # symmetric, so P = Q'Q = H^{-1}
    w = c_mat @ q.T
    return CurvatureMatrix(
        value=sym_product(w @ w.T),
        p_source=INVERSE_H,
        q_factor=q,
        c_mat=c_mat,
    )


def curvature_projected(p):
    """``P = H^{-1/2}(I - M)H^{-1/2}`` for an equality-indicator h, H PD."""
    if p.h.kind != HTerm.EQUALITY:
        raise ValueError("projected curvature requires an equality h-term")
    if not p.cost.is_pd():
        raise NotPositiveSemidefinite(
            "Hessian is not PD; use curvature_kkt instead"
        )
    if not p.h.eq.full_row_rank():
        raise ValueError(
            "h equality block has dependent rows; remove the redundant rows"
        )
    hs = sym_inv_sqrt(p.cost.h)
    g = p.h.eq.a @ hs  # m_h x n, full row rank
    gram = sym_product(g @ g.T)
    cf = scipy.linalg.cho_factor(gram.a)
    proj = np.eye(p.n) - g.T @ scipy.linalg.cho_solve(cf, g)
    proj = 0.5 * (proj + proj.T)
    # (I - M) is a projector, so its square root is itself
    q = proj @ hs
    c_mat, _ = p.stacked()
    w = c_mat @ q.T
    return CurvatureMatrix(
        value=sym_product(w @ w.T),
        p_source=PROJECTED_INVERSE_H,
        q_factor=q,
        c_mat=c_mat,
    )


def curvature_kkt(p):
    """``P = K11`` from the inverse KKT matrix of (H, h-equality A).

    Verifies the structural identities ``K11 H K11 = K11`` and ``A K11 = 0``
    to 1e-9 before returning.
    """
    if p.h.kind != HTerm.EQUALITY:
        raise ValueError("KKT-block curvature requires an equality h-term")
    if not p.h.eq.full_row_rank():
        raise ValueError(
            "h equality block has dependent rows; remove the redundant rows"
        )
    a = p.h.eq.a
    f = kkt_factor(p.cost.h, a)
    rhs = np.vstack([np.eye(p.n), np.zeros((a.shape[0], p.n))])
    k11 = sym_product(f.solve(rhs)[: p.n])
    scale = max(k11.norm_max(), 1.0)
    err1 = np.abs(k11.a @ p.cost.h.a @ k11.a - k11.a).max()
    err2 = np.abs(a @ k11.a).max() if a.size else 0.0
    if err1 > 1e-9 * scale * max(p.cost.h.norm_max(), 1.0):
        raise AssertionError(f"K11 H K11 = K11 violated by {err1:.3e}")
    if err2 > 1e-9 * scale * max(np.abs(a).max(), 1.0):
        raise AssertionError(f"A K11 = 0 violated by {err2:.3e}")
    q = _factor_from_psd(k11.a)
    c_mat, _ = p.stacked()
    w = c_mat @ q.T
    return CurvatureMatrix(
        value=sym_product(w @ w.T),
        p_source=KKT_BLOCK,
        q_factor=q,
        c_mat=c_mat,
        k11=k11,
    )


def applicable_curvature(p):
    """The natural curvature for a problem: KKT block when h is an equality
    indicator (works for PSD H), else the plain inverse Hessian."""
    if p.h.kind == HTerm.EQUALITY:
        return curvature_kkt(p)
    return curvature_general(p)


NORM_OVER_SIGMA = "norm_over_sigma"
QUAD_TIGHT = "quad_tight"
KKT_TIGHT = "kkt_tight"


def scalar_lipschitz(p, variant=QUAD_TIGHT):
    """Scalar dual Lipschitz constants used by the baseline metrics.

    ``norm_over_sigma``: ``||C||^2 / sigma`` (any strongly convex cost);
    ``quad_tight``: ``||C H^{-1} C'||``; ``kkt_tight``: ``||C K11 C'||``.
    """
    if variant == NORM_OVER_SIGMA:
        if p.cost.sigma <= 0.0:
            raise ValueError(
                "norm_over_sigma needs a strongly convex cost (sigma > 0)"
            )
        c_mat, _ = p.stacked()
        return spectral_norm(c_mat) ** 2 / p.cost.sigma
    if variant == QUAD_TIGHT:
        return spectral_norm(curvature_general(p).value.a)
    if variant == KKT_TIGHT:
        return spectral_norm(curvature_kkt(p).value.a)
    raise ValueError(f"unknown scalar variant {variant!r}")
