"""Offline metric (preconditioner) selection for the dual iterations.

Given a curvature matrix ``G = C P C'`` the goal is a PD matrix ``L`` in a
prescribed sparsity pattern with ``L >= G`` whose scaled curvature
``D G D'`` (``L = (D'D)^{-1}``) has the smallest possible ratio between its
largest and smallest nonzero eigenvalues.  Three structural regimes:

* C1 — ``G`` PD: solve ``min t : G <= L <= t G`` over the pattern.
* C2 — ``G`` singular but ``W W'`` PD for ``W = Q C'``: solve
  ``max t : W M W' <= I, W M W' >= t I`` over the pattern of ``M = L^{-1}``.
* C3 — both singular with rank r: same as C2 with the lower bound restricted
  to an orthonormal basis of the range of ``W``.

``W M W' <= I`` certifies ``M^{-1} >= G`` because the nonzero eigenvalues of
``D C P C' D'`` and ``W M W'`` coincide.
"""

import json
from dataclasses import dataclass

import numpy as np

from .errors import NotPositiveSemidefinite, ProblemFormatError
from .linalg import (
    SymMatrix,
    as_sym,
    min_eig,
    range_basis,
    sym_eig,
    sym_inv_sqrt,
    sym_product,
    sym_sqrt,
)
from .lmi import CongruenceBlock, LmiProblem, sdp_solve

_RANK_TOL = 1e-9


class StructurePattern:
    """Allowed nonzero structure for L (and automatically for L^{-1}, D).

    Diagonal, block-diagonal, and full patterns are closed under inversion,
    which the metric construction relies on.
    """

    DIAGONAL = "diagonal"
    BLOCK_DIAGONAL = "block_diagonal"
    FULL = "full"

    def __init__(self, kind, block_sizes=None):
        if kind not in (self.DIAGONAL, self.BLOCK_DIAGONAL, self.FULL):
            raise ValueError(f"unknown pattern kind {kind!r}")
        if kind == self.BLOCK_DIAGONAL:
            block_sizes = tuple(int(s) for s in (block_sizes or ()))
            if not block_sizes or any(s <= 0 for s in block_sizes):
                raise ValueError("block sizes must be positive")
        else:
            block_sizes = None
        self.kind = kind
        self.block_sizes = block_sizes

    @classmethod
    def diagonal(cls):
        return cls(cls.DIAGONAL)

    @classmethod
    def block_diagonal(cls, sizes):
        return cls(cls.BLOCK_DIAGONAL, sizes)

    @classmethod
    def full(cls):
        return cls(cls.FULL)

    def validate_dim(self, d):
        if self.kind == self.BLOCK_DIAGONAL and sum(self.block_sizes) != d:
            raise ValueError(
                f"block sizes sum to {sum(self.block_sizes)}, expected {d}"
            )

    def mask(self, d):
        self.validate_dim(d)
        if self.kind == self.FULL:
            return np.ones((d, d), dtype=bool)
        if self.kind == self.DIAGONAL:
            return np.eye(d, dtype=bool)
        m = np.zeros((d, d), dtype=bool)
        off = 0
        for s in self.block_sizes:
            m[off: off + s, off: off + s] = True
            off += s
        return m

    def pairs(self, d):
        """Upper-triangle (i, j) variable index pairs."""
        mask = self.mask(d)
        return [(i, j) for i in range(d) for j in range(i, d) if mask[i, j]]

    def project(self, mat):
        mat = np.asarray(mat, dtype=float)
        return np.where(self.mask(mat.shape[0]), mat, 0.0)

    def admits(self, mat, d):
        """True when a dense matrix already lies inside the pattern."""
        mat = np.asarray(mat)
        return bool(np.all(mat[~self.mask(d)] == 0.0)) if d else True

    def splits_at(self, d, m):
        """True when the pattern cannot couple indices < m with >= m."""
        if m == 0 or m == d:
            return True
        if self.kind == self.DIAGONAL:
            return True
        if self.kind == self.BLOCK_DIAGONAL:
            off = 0
            for s in self.block_sizes:
                if off < m < off + s:
                    return False
                off += s
            return True
        return False

    def __repr__(self):
        if self.kind == self.BLOCK_DIAGONAL:
            return f"StructurePattern(block_diagonal{self.block_sizes})"
        return f"StructurePattern({self.kind})"


class Metric:
    """A PD matrix L with cached factorization for applying L^{-1}.

    ``achieved_ratio`` and ``certificate_margin`` (min eig of ``L - G``)
    are filled by the selection routines; hand-built metrics leave them None.
    """

    def __init__(self, l_mat, pattern=None, achieved_ratio=None,
                 certificate_margin=None):
        self.l = as_sym(l_mat, tol=1e-10)
        self.pattern = pattern
        self.achieved_ratio = achieved_ratio
        self.certificate_margin = certificate_margin
        a = self.l.a
        d = np.diag(a)
        self.is_diagonal = bool(
            np.count_nonzero(a - np.diag(d)) == 0
        )
        if self.n and (not self.is_diagonal or np.any(d <= 0.0)):
            try:
                self._chol = np.linalg.cholesky(a)
            except np.linalg.LinAlgError:
                raise NotPositiveSemidefinite("metric is not PD")
        else:
            self._chol = None
        self.diag = d.copy() if self.is_diagonal else None

    @property
    def n(self):
        return self.l.n

    @property
    def chol_lower(self):
        if self._chol is None and self.n:
            self._chol = np.linalg.cholesky(self.l.a)
        return self._chol

    def apply(self, x):
        x = np.asarray(x, dtype=float)
        if self.is_diagonal:
            return (x.T * self.diag).T if x.ndim > 1 else self.diag * x
        return self.l.a @ x

    def inv_apply(self, x):
        x = np.asarray(x, dtype=float)
        if self.n == 0:
            return x.copy()
        if self.is_diagonal:
            return (x.T / self.diag).T if x.ndim > 1 else x / self.diag
        import scipy.linalg

        return scipy.linalg.cho_solve((self.chol_lower, True), x)

    def norm(self, v):
        v = np.asarray(v, dtype=float)
        return float(np.sqrt(max(0.0, v @ self.apply(v))))

    def inverse(self):
        """Metric for L^{-1} (same pattern class)."""
        if self.is_diagonal:
            inv = np.diag(1.0 / self.diag) if self.n else np.zeros((0, 0))
        else:
            inv = self.inv_apply(np.eye(self.n))
            inv = 0.5 * (inv + inv.T)
        return Metric(inv, pattern=self.pattern)

    def split(self, m):
        """Split into the leading m x m and trailing blocks.

        Valid only when the off-diagonal coupling is exactly zero.
        """
        a = self.l.a
        if m and m < self.n and np.any(a[:m, m:] != 0.0):
            raise ValueError("metric couples the two blocks; cannot split")
        return (
            Metric(a[:m, :m], pattern=self.pattern),
            Metric(a[m:, m:], pattern=self.pattern),
        )


def metric_from_dense(l_mat, pattern=None):
    return Metric(l_mat, pattern=pattern or StructurePattern.full())


def metric_from_diag(d):
    d = np.asarray(d, dtype=float)
    return Metric(np.diag(d), pattern=StructurePattern.diagonal())


def identity_metric(n, scale=1.0):
    return Metric(scale * np.eye(n), pattern=StructurePattern.diagonal())


def save_metric(met, file):
    """Write a metric file: pattern descriptor, dense L, certificate fields."""
    pattern = None
    if met.pattern is not None:
        pattern = {"kind": met.pattern.kind}
        if met.pattern.block_sizes is not None:
            pattern["block_sizes"] = list(met.pattern.block_sizes)
    doc = {
        "pattern": pattern,
        "L": met.l.a.tolist(),
        "achievedRatio": (
            None if met.achieved_ratio is None else float(met.achieved_ratio)
        ),
        "certificateMargin": (
            None if met.certificate_margin is None
            else float(met.certificate_margin)
        ),
    }
    if hasattr(file, "write"):
        json.dump(doc, file, indent=1)
    else:
        with open(file, "w") as fh:
            json.dump(doc, fh, indent=1)


def load_metric(file):
    """Load a metric file written by :func:`save_metric`."""
    try:
        if hasattr(file, "read"):
            doc = json.load(file)
        else:
            with open(file) as fh:
                doc = json.load(fh)
    except (json.JSONDecodeError, OSError) as exc:
        raise ProblemFormatError(f"metric file: {exc}") from exc
    if not isinstance(doc, dict) or "L" not in doc:
        raise ProblemFormatError("metric file: missing field L")
    l_mat = np.asarray(doc["L"], dtype=float)
    if l_mat.ndim != 2 or l_mat.shape[0] != l_mat.shape[1]:
        raise ProblemFormatError(
            f"metric file: L has shape {l_mat.shape}, expected square"
        )
    pattern = None
    pat_doc = doc.get("pattern")
    if pat_doc is not None:
        try:
            pattern = StructurePattern(
                pat_doc["kind"], pat_doc.get("block_sizes")
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ProblemFormatError(f"metric file: pattern: {exc}") from exc
    ratio = doc.get("achievedRatio")
    margin = doc.get("certificateMargin")
    try:
        return Metric(
            l_mat,
            pattern=pattern,
            achieved_ratio=None if ratio is None else float(ratio),
            certificate_margin=None if margin is None else float(margin),
        )
    except ValueError as exc:
        raise ProblemFormatError(f"metric file: {exc}") from exc


@dataclass
class CaseInfo:
    case: str  # "C1" | "C2" | "C3"
    r: int  # rank of C P C'
    w: np.ndarray  # Q C', the congruence factor (q x d)
    phi: np.ndarray | None = None  # range basis of W for C3


def classify_case(cm):
    """Structural regime of a curvature matrix (see module docstring)."""
    g = cm.value
    d = g.n
    w = cm.q_factor @ cm.c_mat.T  # q x d
    ev = sym_eig(g).values
    top = ev[-1] if d else 0.0
    if d and top > 0.0 and ev[0] > _RANK_TOL * top:
        return CaseInfo(case="C1", r=d, w=w)
    g0 = sym_product(w @ w.T)
    q = w.shape[0]
    ev0 = sym_eig(g0).values if q else np.zeros(0)
    if q and ev0[-1] > 0.0 and ev0[0] > _RANK_TOL * ev0[-1]:
        return CaseInfo(case="C2", r=q, w=w)
    phi, r = range_basis(w, tol=_RANK_TOL)
    return CaseInfo(case="C3", r=r, w=w, phi=phi)


def achieved_ratio(m_act, g, r):
    """lambda_1 / lambda_r of D G D' with M = D'D, from eigenvalues."""
    if r == 0:
        raise ValueError("curvature has rank 0")
    d_half = sym_sqrt(as_sym(m_act, tol=1e-8))
    e = sym_eig(sym_product(d_half @ np.asarray(g) @ d_half))
    vals = e.values
    lam_top = vals[-1]
    lam_r = vals[len(vals) - r]
    if lam_r <= 0.0:
        return np.inf
    return float(lam_top / lam_r)


def zero_eig_count(m_act, g, tol=_RANK_TOL):
    """Number of eigenvalues of D G D' below tol * lambda_max."""
    d_half = sym_sqrt(as_sym(m_act, tol=1e-8))
    vals = sym_eig(sym_product(d_half @ np.asarray(g) @ d_half)).values
    top = vals[-1] if vals.size else 0.0
    return int(np.sum(vals <= tol * top))


def _certify(l_mat, g_sym, r, inflate=True):
    """Final Metric assembly: inflate, measure margin and ratio."""
    l_mat = 0.5 * (l_mat + np.asarray(l_mat).T)
    if inflate:
        l_mat = l_mat * (1.0 + 1e-9)
    margin = min_eig(sym_product(l_mat - g_sym.a))
    scale = max(g_sym.norm_max(), 1.0)
    if margin < -1e-8 * scale:
        raise AssertionError(
            f"metric certificate violated: margin {margin:.3e} vs scale "
            f"{scale:.3e}"
        )
    m_act = np.linalg.inv(l_mat)
    m_act = 0.5 * (m_act + m_act.T)
    ratio = achieved_ratio(m_act, g_sym.a, r)
    return l_mat, margin, ratio


def scalar_metric(cm):
    """Baseline ``L = ||C P C'|| I``; certificate margin is exactly zero."""
    g = cm.value
    ev = sym_eig(g).values
    gamma = float(ev[-1])
    if gamma <= 0.0:
        raise ValueError("curvature matrix is zero; no metric exists")
    struct = ev[ev > _RANK_TOL * gamma]
    ratio = float(gamma / struct[0])
    return Metric(
        gamma * np.eye(g.n),
        pattern=StructurePattern.diagonal(),
        achieved_ratio=ratio,
        # min eig of (gamma I - G) = gamma - lambda_max = 0 by construction
        certificate_margin=0.0,
    )


def select_metric(cm, pattern, tol=0.01, *, feas_tol=1e-7, max_ap_iter=2000,
                  max_total_iter=60000, force_case=None):
    """Pattern-restricted metric minimizing the curvature eigenvalue ratio.

    ``tol`` is the relative bisection gap on the optimized scalar; the
    returned ``achieved_ratio`` is measured a posteriori from eigenvalues,
    not taken from the bisection bound.  ``force_case`` ("C2"/"C3") exists
    for the structural-reduction tests.
    """
    g = cm.value
    d = g.n
    pattern.validate_dim(d)
    info = classify_case(cm)
    if force_case is not None:
        if info.case == "C2" and force_case == "C3":
            info = CaseInfo(
                case="C3", r=info.r, w=info.w, phi=np.eye(info.w.shape[0])
            )
        elif force_case != info.case:
            raise ValueError(
                f"cannot force case {force_case} on a {info.case} instance"
            )
    ev = sym_eig(g).values
    gamma = float(ev[-1]) if d else 0.0
    if gamma <= 0.0:
        raise ValueError("curvature matrix is zero; no metric exists")

    if info.case == "C1":
        if pattern.kind == StructurePattern.FULL or pattern.admits(g.a, d):
            l_mat, margin, ratio = _certify(g.a.copy(), g, info.r)
            return Metric(l_mat, pattern=pattern, achieved_ratio=ratio,
                          certificate_margin=margin)
        g_n = g.a / gamma
        cond = float(ev[-1] / ev[0])
        lmi = LmiProblem(
            d,
            pattern.pairs(d),
            [
                CongruenceBlock(const=-g_n, w=np.eye(d), sign=1.0),
                CongruenceBlock(const=np.zeros((d, d)), w=np.eye(d),
                                sign=-1.0, t_mat=g_n),
            ],
            t_bracket=(0.999, cond * (1.0 + 1e-6)),
            t_sense="min",
        )
        res = sdp_solve(lmi, feas_tol=feas_tol, bisect_tol=tol,
                        max_ap_iter=max_ap_iter,
                        max_total_iter=max_total_iter, m0=np.eye(d))
        l_mat = gamma * res.m_mat
        # repair any feasibility slack by a pattern-safe diagonal bump
        viol = -min(0.0, min_eig(sym_product(l_mat - g.a)))
        if viol > 0.0:
            l_mat = l_mat + 1.000001 * viol * np.eye(d)
        l_mat, margin, ratio = _certify(l_mat, g, info.r)
        met = Metric(l_mat, pattern=pattern, achieved_ratio=ratio,
                     certificate_margin=margin)
        met.sdp_warning = res.warning
        return met

    # C2 / C3: variable is M = L^{-1}
    w = info.w
    q = w.shape[0]
    s_vals = np.linalg.svd(w, compute_uv=False)
    s_max = float(s_vals[0])
    if pattern.kind == StructurePattern.FULL:
        u, s, vt = np.linalg.svd(w)
        r = int(np.sum(s > _RANK_TOL * s_max))
        v_r = vt[:r].T
        # M = V_r S^{-2} V_r' + alpha (I - V_r V_r'), alpha = 1/s_max^2
        m_act = (v_r / s[:r] ** 2) @ v_r.T + (1.0 / s_max**2) * (
            np.eye(d) - v_r @ v_r.T
        )
        l_mat = (v_r * s[:r] ** 2) @ v_r.T + s_max**2 * (
            np.eye(d) - v_r @ v_r.T
        )
        l_mat, margin, ratio = _certify(l_mat, g, info.r)
        return Metric(l_mat, pattern=pattern, achieved_ratio=ratio,
                      certificate_margin=margin)
    w_n = w / s_max
    g0_n = w_n @ w_n.T
    lam_low = float(np.linalg.eigvalsh(g0_n)[0]) if info.case == "C2" else (
        float((s_vals[info.r - 1] / s_max) ** 2)
    )
    blocks = [
        CongruenceBlock(const=np.eye(q), w=w_n, sign=-1.0),
    ]
    if info.case == "C2":
        blocks.append(
            CongruenceBlock(const=np.zeros((q, q)), w=w_n, sign=1.0,
                            t_mat=-np.eye(q))
        )
    else:
        w2 = info.phi.T @ w_n
        rr = w2.shape[0]
        blocks.append(
            CongruenceBlock(const=np.zeros((rr, rr)), w=w2, sign=1.0,
                            t_mat=-np.eye(rr))
        )
    eps_floor = 1e-10
    blocks.append(
        CongruenceBlock(const=-eps_floor * np.eye(d), w=np.eye(d), sign=1.0)
    )
    lmi = LmiProblem(
        d,
        pattern.pairs(d),
        blocks,
        t_bracket=(lam_low * (1.0 - 1e-6), 1.0),
        t_sense="max",
    )
    res = sdp_solve(lmi, feas_tol=feas_tol, bisect_tol=tol,
                    max_ap_iter=max_ap_iter, max_total_iter=max_total_iter,
                    m0=np.eye(d))
    m_n = res.m_mat
    # rescale so W M W' <= I holds exactly, then invert
    nu = float(np.linalg.eigvalsh(sym_product(w_n @ m_n @ w_n.T).a)[-1])
    if nu > 0.0:
        m_n = m_n / (nu * (1.0 + 1e-12))
    lo = float(np.linalg.eigvalsh(m_n)[0])
    if lo <= 0.0:
        m_n = m_n + (abs(lo) + 1e-12) * np.eye(d)
    m_act = m_n / s_max**2
    l_mat = np.linalg.inv(m_act)
    l_mat, margin, ratio = _certify(l_mat, g, info.r)
    met = Metric(l_mat, pattern=pattern, achieved_ratio=ratio,
                 certificate_margin=margin)
    met.sdp_warning = res.warning
    return met
