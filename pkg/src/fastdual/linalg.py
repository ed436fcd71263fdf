"""Dense symmetric linear-algebra kernels shared by the whole package.

Thin, *checked* wrappers around LAPACK via numpy/scipy: symmetric
eigendecomposition, PSD Cholesky with an escalating diagonal shift, saddle
(KKT) factorization with iterative refinement, and orthonormal range bases.
Everything here targets small dense matrices (a few hundred rows at most), so
robustness and verifiable accuracy win over scalability.
"""

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import NotPositiveSemidefinite, SingularKkt

_TINY = 1e-300


class SymMatrix:
    """Immutable dense symmetric matrix.

    Construction symmetrizes the input and rejects asymmetry beyond a relative
    tolerance, so downstream code can rely on exact ``M == M.T``.

    Parameters
    ----------
    a : array_like, shape (n, n)
    tol : float
        Largest allowed ``|M - M.T|`` entry relative to ``max|M|``.
    """

    __slots__ = ("_a",)

    def __init__(self, a, tol=1e-12):
        a = np.asarray(a, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"expected square matrix, got shape {a.shape}")
        scale = float(np.abs(a).max()) if a.size else 0.0
        asym = float(np.abs(a - a.T).max()) if a.size else 0.0
        if asym > tol * max(scale, _TINY):
            raise ValueError(
                f"matrix is not symmetric: max asymmetry {asym:.3e} "
                f"(scale {scale:.3e})"
            )
        s = 0.5 * (a + a.T)
        s.flags.writeable = False
        self._a = s

    @property
    def a(self):
        """Read-only ndarray view of the matrix."""
        return self._a

    @property
    def n(self):
        return self._a.shape[0]

    def diag(self):
        return np.diag(self._a).copy()

    def norm_max(self):
        return float(np.abs(self._a).max()) if self._a.size else 0.0

    def __repr__(self):
        return f"SymMatrix(n={self.n})"


def as_sym(m, tol=1e-12):
    """Coerce an ndarray or SymMatrix to SymMatrix."""
    if isinstance(m, SymMatrix):
        return m
    return SymMatrix(m, tol=tol)


def sym_product(x):
    """Wrap a floating-point product that is symmetric up to roundoff."""
    x = np.asarray(x, dtype=float)
    return SymMatrix(0.5 * (x + x.T))


@dataclass
class EigenDecomp:
    """Verified symmetric eigendecomposition, eigenvalues ascending."""

    values: np.ndarray
    vectors: np.ndarray

    def reconstruct(self):
        return (self.vectors * self.values) @ self.vectors.T


def sym_eig(m):
    """Symmetric eigendecomposition with a-posteriori accuracy checks.

    Returns
    -------
    EigenDecomp
        ``values`` ascending; ``vectors`` orthonormal columns.

    Raises
    ------
    RuntimeError
        If LAPACK fails to converge or the computed factors miss the
        reconstruction / orthonormality bounds (1e-9 resp. 1e-10 relative).
    """
    m = as_sym(m)
    try:
        w, v = np.linalg.eigh(m.a)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError(f"symmetric eigensolver failed to converge: {exc}")
    scale = max(m.norm_max(), _TINY)
    ortho = float(np.abs(v.T @ v - np.eye(m.n)).max()) if m.n else 0.0
    recon = float(np.abs((v * w) @ v.T - m.a).max()) if m.n else 0.0
    if ortho > 1e-10:
        raise RuntimeError(f"eigenvector orthonormality defect {ortho:.3e}")
    if recon > 1e-9 * scale:
        raise RuntimeError(
            f"eigendecomposition reconstruction error {recon:.3e} "
            f"exceeds 1e-9 * {scale:.3e}"
        )
    return EigenDecomp(values=w, vectors=v)


def chol_psd(m, shift_cap=1e-8):
    """Cholesky factor of a (nearly) PSD matrix with minimal diagonal shift.

    Tries ``delta = 0`` first, then escalates ``delta`` through a geometric
    ladder up to ``shift_cap * max|M|``.

    Returns
    -------
    (L, delta)
        Lower-triangular ``L`` with ``L @ L.T = M + delta*I``; ``delta`` is the
        shift actually used (0.0 for comfortably PD input).

    Raises
    ------
    NotPositiveSemidefinite
        If no shift within the cap makes the factorization succeed.
    """
    m = as_sym(m)
    scale = max(m.norm_max(), 1.0)
    ladder = [0.0] + [10.0**e * scale for e in range(-14, 0)]
    cap = shift_cap * scale
    for delta in ladder:
        if delta > cap:
            break
        try:
            ell = np.linalg.cholesky(m.a + delta * np.eye(m.n))
            return ell, delta
        except np.linalg.LinAlgError:
            continue
    min_eig = float(np.linalg.eigvalsh(m.a)[0]) if m.n else 0.0
    raise NotPositiveSemidefinite(
        f"matrix is indefinite beyond shift cap {cap:.3e} "
        f"(min eigenvalue {min_eig:.3e})"
    )


class KktFactor:
    """LU factorization of the saddle matrix ``[[H, A.T], [A, 0]]``.

    Every solve runs iterative refinement and asserts the final residual is
    below ``1e-9 * ||rhs||`` or, for badly scaled systems, the roundoff floor
    of evaluating ``K @ sol`` itself (~eps * ||K|| * ||sol||); a violation
    raises :class:`SingularKkt` rather than returning silently inaccurate
    output.
    """

    def __init__(self, h, a):
        h = as_sym(h)
        a = np.atleast_2d(np.asarray(a, dtype=float))
        if a.shape[1] != h.n:
            raise ValueError(
                f"constraint block has {a.shape[1]} columns, expected {h.n}"
            )
        self.n = h.n
        self.m = a.shape[0]
        k = np.zeros((self.n + self.m, self.n + self.m))
        k[: self.n, : self.n] = h.a
        k[: self.n, self.n:] = a.T
        k[self.n:, : self.n] = a
        self.k = k
        with warnings.catch_warnings():
            # exact zero pivots warn; we detect them on the U diagonal below
            warnings.simplefilter("ignore")
            try:
                self._lu = scipy.linalg.lu_factor(k)
            except (np.linalg.LinAlgError, ValueError) as exc:
                raise self._diagnose(h, a, str(exc))
        ud = np.abs(np.diag(self._lu[0]))
        if ud.size and ud.min() <= 1e-14 * max(ud.max(), 1.0):
            raise self._diagnose(h, a, "numerically singular LU pivot")
        self._k_fro = float(np.linalg.norm(k))

    @staticmethod
    def _diagnose(h, a, why):
        _, row_rank = range_basis(a.T)
        z = scipy.linalg.null_space(a)
        ns_min = None
        if z.shape[1]:
            ns_min = float(np.linalg.eigvalsh(z.T @ h.a @ z)[0])
        return SingularKkt(
            f"singular KKT matrix ({why}): constraint row rank {row_rank} of "
            f"{a.shape[0]}, Hessian min eigenvalue on constraint null space "
            f"{ns_min}",
            row_rank=row_rank,
            null_space_min_eig=ns_min,
        )

    def solve(self, rhs):
        """Solve ``K sol = rhs`` (rhs may be a vector or a column block)."""
        rhs = np.asarray(rhs, dtype=float)
        sol = scipy.linalg.lu_solve(self._lu, rhs)
        res = np.linalg.norm(rhs - self.k @ sol)
        for _ in range(3):
            if res <= self._res_bound(rhs, sol):
                break
            sol = sol + scipy.linalg.lu_solve(self._lu, rhs - self.k @ sol)
            res = np.linalg.norm(rhs - self.k @ sol)
        else:
            if res > self._res_bound(rhs, sol):
                raise SingularKkt(
                    f"KKT solve residual {res:.3e} exceeds "
                    f"{self._res_bound(rhs, sol):.3e}; matrix is too "
                    "ill-conditioned"
                )
        return sol

    def _res_bound(self, rhs, sol):
        # 1e-9 relative to the rhs, but never below the roundoff floor of
        # evaluating K @ sol in double precision
        eps = np.finfo(float).eps
        floor = 50.0 * eps * self._k_fro * (1.0 + np.linalg.norm(sol))
        return max(1e-9 * np.linalg.norm(rhs), floor)

    def solve_parts(self, top, bottom):
        """Solve for (primal, multiplier) given the two rhs blocks."""
        rhs = np.concatenate([np.asarray(top, float), np.asarray(bottom, float)])
        sol = self.solve(rhs)
        return sol[: self.n], sol[self.n:]


def kkt_factor(h, a):
    """Factor the saddle matrix ``[[H, A.T], [A, 0]]``; see KktFactor."""
    return KktFactor(h, a)


def range_basis(m, tol=1e-9):
    """Orthonormal basis of the column space of ``m``.

    Rank is decided by singular values above ``tol * s_max`` (relative).

    Returns
    -------
    (phi, r)
        ``phi`` of shape ``(rows, r)`` with orthonormal columns.
    """
    m = np.atleast_2d(np.asarray(m, dtype=float))
    if m.size == 0:
        return np.zeros((m.shape[0], 0)), 0
    u, s, _ = np.linalg.svd(m, full_matrices=False)
    r = 0 if s.size == 0 or s[0] <= 0.0 else int(np.sum(s > tol * s[0]))
    return u[:, :r].copy(), r


def null_space_basis(a, tol=1e-9):
    """Orthonormal basis of the null space of ``a`` (same rank rule)."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    u, s, vt = np.linalg.svd(a)
    r = 0 if s.size == 0 or s[0] <= 0.0 else int(np.sum(s > tol * s[0]))
    return vt[r:].T.copy()


def sym_inv_sqrt(m, tol=1e-12):
    """Symmetric inverse square root ``M^{-1/2}`` of a PD matrix.

    Raises
    ------
    NotPositiveSemidefinite
        If the smallest eigenvalue is below ``tol * max|M|`` (not safely PD).
    """
    m = as_sym(m)
    e = sym_eig(m)
    floor = tol * max(m.norm_max(), _TINY)
    if e.values.size and e.values[0] <= floor:
        raise NotPositiveSemidefinite(
            f"min eigenvalue {e.values[0]:.3e} below PD floor {floor:.3e}"
        )
    w = 1.0 / np.sqrt(e.values)
    r = (e.vectors * w) @ e.vectors.T
    return 0.5 * (r + r.T)


def sym_sqrt(m):
    """Symmetric PSD square root (small negative eigenvalues clipped to 0)."""
    e = sym_eig(m)
    w = np.sqrt(np.clip(e.values, 0.0, None))
    r = (e.vectors * w) @ e.vectors.T
    return 0.5 * (r + r.T)


def min_eig(m):
    """Smallest eigenvalue of a symmetric matrix."""
    m = as_sym(m)
    if m.n == 0:
        return 0.0
    return float(np.linalg.eigvalsh(m.a)[0])


def spectral_norm(m):
    """2-norm of a (rectangular) matrix."""
    m = np.atleast_2d(np.asarray(m, dtype=float))
    if m.size == 0:
        return 0.0
    return float(np.linalg.norm(m, 2))
