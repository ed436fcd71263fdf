"""Composite QP problem model with validation and file round-tripping.

The problem form is::

    minimize   f(x) + h(x) + g(Bx)
    subject to A x = b

with quadratic ``f(x) = 0.5 x'Hx + zeta'x``, a "simple" term ``h`` handled
inside the inner minimization (box / equality indicator / coupled soft box /
zero), and an optional box-indicator ``g`` composed with a matrix ``B``.  The
dual variables are ``nu = (lambda, mu)`` for the rows of ``C = [A; B]`` with
offset ``c = (b, 0)``.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import NotPositiveSemidefinite, ProblemFormatError
from .linalg import SymMatrix, as_sym, min_eig, range_basis

_INF = np.inf


def _pd_floor(scale):
    # absolute floor with a mild scale term: badly conditioned but genuinely
    # PD Hessians (min eig 1e-4 against norm 1e6) must classify as PD
    return max(1e-12, 1e-13 * scale)


class QuadCost:
    """Quadratic cost ``0.5 x'Hx + zeta'x`` with recorded convexity modulus.

    ``sigma`` is the smallest eigenvalue of H (clipped at 0); H must be PSD
    within ``-1e-9 * ||H||``.
    """

    def __init__(self, h, zeta):
        self.h = as_sym(h)
        self.zeta = np.asarray(zeta, dtype=float).copy()
        if self.zeta.shape != (self.h.n,):
            raise ValueError(
                f"zeta has shape {self.zeta.shape}, expected ({self.h.n},)"
            )
        self.zeta.flags.writeable = False
        lo = min_eig(self.h)
        if lo < -1e-9 * max(self.h.norm_max(), 1.0):
            raise NotPositiveSemidefinite(
                f"cost Hessian has eigenvalue {lo:.3e}"
            )
        self.sigma = max(lo, 0.0)

    @property
    def n(self):
        return self.h.n

    def is_diagonal(self):
        a = self.h.a
        return bool(np.count_nonzero(a - np.diag(np.diag(a))) == 0)

    def is_pd(self):
        return self.sigma > _pd_floor(self.h.norm_max())

    def value(self, x):
        return 0.5 * float(x @ self.h.a @ x) + float(self.zeta @ x)


class AffineEq:
    """Equality constraints ``A x = b``; row rank recorded at construction.

    Rank deficiency is not repaired here: validation and the solvers flag it
    and instruct removal of the dependent rows.
    """

    def __init__(self, a, b):
        self.a = np.atleast_2d(np.asarray(a, dtype=float)).copy()
        self.b = np.asarray(b, dtype=float).copy()
        if self.b.shape != (self.a.shape[0],):
            raise ValueError(
                f"b has shape {self.b.shape}, expected ({self.a.shape[0]},)"
            )
        self.a.flags.writeable = False
        self.b.flags.writeable = False
        _, self.row_rank = range_basis(self.a.T, tol=1e-9)

    @property
    def m(self):
        return self.a.shape[0]

    @property
    def n(self):
        return self.a.shape[1]

    def full_row_rank(self):
        return self.row_rank == self.m

    def with_b(self, b):
        """Same constraint matrix, new right-hand side (cheap)."""
        new = AffineEq.__new__(AffineEq)
        new.a = self.a
        new.b = np.asarray(b, dtype=float).copy()
        if new.b.shape != (self.m,):
            raise ValueError(f"b has shape {new.b.shape}, expected ({self.m},)")
        new.b.flags.writeable = False
        new.row_rank = self.row_rank
        return new


@dataclass(frozen=True)
class CoupledBound:
    """One softened range ``lo - s_lower <= y[y_index] <= hi + s_upper``.

    Slack components live in the same decision vector; an absent side uses
    slack index ``None``.  Slacks are constrained nonnegative via their plain
    bounds.
    """

    y_index: int
    lo: float
    hi: float
    lower_slack: int | None = None
    upper_slack: int | None = None


class HTerm:
    """The inner-minimization term h: box, equality, coupled soft box, or 0."""

    BOX = "box"
    EQUALITY = "equality"
    ZERO = "zero"
    SOFT_BOX = "soft_box"

    def __init__(self, kind, *, y_min=None, y_max=None, eq=None, coupled=None):
        self.kind = kind
        self.y_min = None
        self.y_max = None
        self.eq = None
        self.coupled = None
        if kind in (self.BOX, self.SOFT_BOX):
            self.y_min = np.asarray(y_min, dtype=float).copy()
            self.y_max = np.asarray(y_max, dtype=float).copy()
            if self.y_min.shape != self.y_max.shape:
                raise ValueError("y_min and y_max must have equal shapes")
            bad = np.nonzero(self.y_min > self.y_max)[0]
            if bad.size:
                raise ValueError(
                    f"y_min > y_max at index {int(bad[0])}: "
                    f"{self.y_min[bad[0]]} > {self.y_max[bad[0]]}"
                )
            self.y_min.flags.writeable = False
            self.y_max.flags.writeable = False
        elif kind == self.EQUALITY:
            if not isinstance(eq, AffineEq):
                raise ValueError("equality h-term requires an AffineEq")
            self.eq = eq
        elif kind != self.ZERO:
            raise ValueError(f"unknown h-term kind {kind!r}")
        if kind == self.SOFT_BOX:
            self.coupled = tuple(coupled or ())
            self._check_coupled()
        elif coupled:
            raise ValueError("coupled bounds only allowed for soft_box")

    @classmethod
    def box(cls, y_min, y_max):
        return cls(cls.BOX, y_min=y_min, y_max=y_max)

    @classmethod
    def equality(cls, a, b):
        return cls(cls.EQUALITY, eq=AffineEq(a, b))

    @classmethod
    def zero(cls):
        return cls(cls.ZERO)

    @classmethod
    def soft_box(cls, y_min, y_max, coupled):
        return cls(cls.SOFT_BOX, y_min=y_min, y_max=y_max, coupled=coupled)

    def _check_coupled(self):
        n = self.y_min.shape[0]
        outputs = set()
        slacks = set()
        for t in self.coupled:
            if not isinstance(t, CoupledBound):
                raise ValueError("coupled entries must be CoupledBound")
            if not (0 <= t.y_index < n):
                raise ValueError(f"coupled y_index {t.y_index} out of range")
            if t.lo > t.hi:
                raise ValueError(
                    f"coupled bound lo > hi at y_index {t.y_index}"
                )
            if t.y_index in outputs:
                raise ValueError(f"duplicate coupled y_index {t.y_index}")
            outputs.add(t.y_index)
            for s in (t.lower_slack, t.upper_slack):
                if s is None:
                    continue
                if not (0 <= s < n):
                    raise ValueError(f"slack index {s} out of range")
                if s in slacks:
                    raise ValueError(f"slack index {s} used twice")
                slacks.add(s)
        if outputs & slacks:
            raise ValueError(
                f"slack indices overlap output indices: {outputs & slacks}"
            )
        for t in self.coupled:
            # the softened component must not also carry plain bounds
            if np.isfinite(self.y_min[t.y_index]) or np.isfinite(
                self.y_max[t.y_index]
            ):
                raise ValueError(
                    f"coupled component {t.y_index} must have plain bounds "
                    "(-inf, inf)"
                )
        for s in sorted(slacks):
            if self.y_min[s] != 0.0 or np.isfinite(self.y_max[s]):
                raise ValueError(f"slack {s} must have plain bounds [0, inf)")

    def coupled_indices(self):
        """(output indices, slack indices) referenced by coupled bounds."""
        if not self.coupled:
            return set(), set()
        outs = {t.y_index for t in self.coupled}
        sl = set()
        for t in self.coupled:
            if t.lower_slack is not None:
                sl.add(t.lower_slack)
            if t.upper_slack is not None:
                sl.add(t.upper_slack)
        return outs, sl


class GTerm:
    """The composed term g(Bx): box indicator on Bx, or absent."""

    BOX = "box"
    ZERO = "zero"

    def __init__(self, kind, b=None, d_lo=None, d_hi=None, n=None):
        self.kind = kind
        if kind == self.BOX:
            self.b = np.atleast_2d(np.asarray(b, dtype=float)).copy()
            self.d_lo = np.asarray(d_lo, dtype=float).copy()
            self.d_hi = np.asarray(d_hi, dtype=float).copy()
            p = self.b.shape[0]
            if self.d_lo.shape != (p,) or self.d_hi.shape != (p,):
                raise ValueError("bound vectors must match the rows of B")
            bad = np.nonzero(self.d_lo > self.d_hi)[0]
            if bad.size:
                raise ValueError(
                    f"d_lo > d_hi at index {int(bad[0])}: "
                    f"{self.d_lo[bad[0]]} > {self.d_hi[bad[0]]}"
                )
            for arr in (self.b, self.d_lo, self.d_hi):
                arr.flags.writeable = False
        elif kind == self.ZERO:
            if n is None:
                raise ValueError("GTerm.zero requires the column count n")
            self.b = np.zeros((0, n))
            self.d_lo = np.zeros(0)
            self.d_hi = np.zeros(0)
        else:
            raise ValueError(f"unknown g-term kind {kind!r}")

    @classmethod
    def box(cls, b, d_lo, d_hi):
        return cls(cls.BOX, b=b, d_lo=d_lo, d_hi=d_hi)

    @classmethod
    def zero(cls, n):
        return cls(cls.ZERO, n=n)

    @property
    def p(self):
        return self.b.shape[0]


class ComposedProblem:
    """Full problem instance; stacks ``C = [A; B]`` and ``c = (b, 0)``."""

    def __init__(self, cost, h, eq=None, g=None):
        if not isinstance(cost, QuadCost):
            raise ValueError("cost must be a QuadCost")
        if not isinstance(h, HTerm):
            raise ValueError("h must be an HTerm")
        n = cost.n
        self.cost = cost
        self.h = h
        self.eq = eq
        self.g = g if g is not None else GTerm.zero(n)
        if h.kind in (HTerm.BOX, HTerm.SOFT_BOX) and h.y_min.shape != (n,):
            raise ValueError(
                f"h bounds have length {h.y_min.shape[0]}, expected {n}"
            )
        if h.kind == HTerm.EQUALITY and h.eq.n != n:
            raise ValueError(f"h equality has {h.eq.n} columns, expected {n}")
        if eq is not None and eq.n != n:
            raise ValueError(f"eq has {eq.n} columns, expected {n}")
        if self.g.b.shape[1] != n:
            raise ValueError(
                f"B has {self.g.b.shape[1]} columns, expected {n}"
            )

    @property
    def n(self):
        return self.cost.n

    @property
    def m(self):
        return self.eq.m if self.eq is not None else 0

    @property
    def p(self):
        return self.g.p

    def stacked(self):
        """(C, c) with C = [A; B] and c = (b, 0)."""
        a = self.eq.a if self.eq is not None else np.zeros((0, self.n))
        b = self.eq.b if self.eq is not None else np.zeros(0)
        c_mat = np.vstack([a, self.g.b])
        c_vec = np.concatenate([b, np.zeros(self.p)])
        return c_mat, c_vec

    def with_updates(self, *, zeta=None, eq_b=None, h_eq_b=None):
        """Copy with new linear data (matrices and factors shared)."""
        cost = self.cost
        if zeta is not None:
            new_cost = QuadCost.__new__(QuadCost)
            new_cost.h = cost.h
            new_cost.sigma = cost.sigma
            new_cost.zeta = np.asarray(zeta, dtype=float).copy()
            if new_cost.zeta.shape != (cost.n,):
                raise ValueError("zeta length mismatch")
            new_cost.zeta.flags.writeable = False
            cost = new_cost
        eq = self.eq
        if eq_b is not None:
            if eq is None:
                raise ValueError("problem has no dualized equalities")
            eq = eq.with_b(eq_b)
        h = self.h
        if h_eq_b is not None:
            if h.kind != HTerm.EQUALITY:
                raise ValueError("h is not an equality term")
            h = HTerm(HTerm.EQUALITY, eq=h.eq.with_b(h_eq_b))
        return ComposedProblem(cost, h, eq=eq, g=self.g)


@dataclass
class ValidationReport:
    """Structural findings; solvers consult ``issues`` before running."""

    h_pd: bool
    eq_full_row_rank: bool | None  # None when there is no equality block
    h_pd_on_null_space: bool | None
    curvature_paths: list = field(default_factory=list)
    issues: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.issues


def validate(p):
    """Structural validation report; never raises."""
    issues = []
    h_pd = p.cost.is_pd()
    eq_blocks = []
    if p.eq is not None:
        eq_blocks.append(("equality block", p.eq))
    if p.h.kind == HTerm.EQUALITY:
        eq_blocks.append(("h equality block", p.h.eq))
    rank_ok = None
    for label, blk in eq_blocks:
        ok = blk.full_row_rank()
        rank_ok = ok if rank_ok is None else (rank_ok and ok)
        if not ok:
            issues.append(
                f"{label} has dependent rows (rank {blk.row_rank} of "
                f"{blk.m}); remove the redundant rows"
            )
    pd_on_null = None
    if p.h.kind == HTerm.EQUALITY:
        from .linalg import null_space_basis

        z = null_space_basis(p.h.eq.a)
        if z.shape[1] == 0:
            pd_on_null = True
        else:
            lo = min_eig(0.5 * (z.T @ p.cost.h.a @ z + (z.T @ p.cost.h.a @ z).T))
            pd_on_null = lo > _pd_floor(p.cost.h.norm_max())
        if not (h_pd or pd_on_null):
            issues.append(
                "Hessian is neither PD nor PD on the equality null space"
            )
    elif not h_pd:
        issues.append("Hessian is not PD and h is not an equality term")
    paths = []
    if h_pd:
        paths.append("general")
    if p.h.kind == HTerm.EQUALITY and (rank_ok is not False):
        if h_pd:
            paths.append("projected")
        if pd_on_null:
            paths.append("kkt")
    if p.m + p.p == 0 and p.h.kind != HTerm.EQUALITY:
        issues.append("problem has no dual variables (m + p = 0)")
    return ValidationReport(
        h_pd=h_pd,
        eq_full_row_rank=rank_ok,
        h_pd_on_null_space=pd_on_null,
        curvature_paths=paths,
        issues=issues,
    )


# ---------------------------------------------------------------------------
# file round-tripping


def _require(doc, key, path=""):
    if key not in doc:
        raise ProblemFormatError(f"missing field {path}{key}")
    return doc[key]


def _as_matrix(x, rows, cols, name):
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1 and rows == 0:
        arr = arr.reshape(0, cols)
    if arr.shape != (rows, cols):
        raise ProblemFormatError(
            f"{name} has shape {arr.shape}, expected ({rows}, {cols})"
        )
    return arr


def _as_vector(x, length, name):
    arr = np.asarray(x, dtype=float)
    if arr.shape != (length,):
        raise ProblemFormatError(
            f"{name} has shape {arr.shape}, expected ({length},)"
        )
    return arr


def problem_to_dict(p):
    doc = {
        "n": p.n,
        "m": p.m,
        "p": p.p,
        "H": p.cost.h.a.tolist(),
        "zeta": p.cost.zeta.tolist(),
        "h_kind": p.h.kind,
    }
    if p.eq is not None:
        doc["A"] = p.eq.a.tolist()
        doc["b"] = p.eq.b.tolist()
    if p.p:
        doc["B"] = p.g.b.tolist()
        doc["d_lo"] = p.g.d_lo.tolist()
        doc["d_hi"] = p.g.d_hi.tolist()
    if p.h.kind in (HTerm.BOX, HTerm.SOFT_BOX):
        doc["h_y_min"] = p.h.y_min.tolist()
        doc["h_y_max"] = p.h.y_max.tolist()
    if p.h.kind == HTerm.EQUALITY:
        doc["h_A"] = p.h.eq.a.tolist()
        doc["h_b"] = p.h.eq.b.tolist()
    if p.h.kind == HTerm.SOFT_BOX:
        doc["soft"] = [
            {
                "y": t.y_index,
                "lo": t.lo,
                "hi": t.hi,
                "lower_slack": t.lower_slack,
                "upper_slack": t.upper_slack,
            }
            for t in p.h.coupled
        ]
    return doc


def problem_from_dict(doc):
    n = int(_require(doc, "n"))
    m = int(_require(doc, "m"))
    p_rows = int(_require(doc, "p"))
    h_mat = _as_matrix(_require(doc, "H"), n, n, "H")
    zeta = _as_vector(_require(doc, "zeta"), n, "zeta")
    try:
        cost = QuadCost(SymMatrix(h_mat), zeta)
    except ValueError as exc:
        raise ProblemFormatError(f"H: {exc}")
    eq = None
    if m:
        eq = AffineEq(
            _as_matrix(_require(doc, "A"), m, n, "A"),
            _as_vector(_require(doc, "b"), m, "b"),
        )
    if p_rows:
        g = GTerm.box(
            _as_matrix(_require(doc, "B"), p_rows, n, "B"),
            _as_vector(_require(doc, "d_lo"), p_rows, "d_lo"),
            _as_vector(_require(doc, "d_hi"), p_rows, "d_hi"),
        )
    else:
        g = GTerm.zero(n)
    kind = _require(doc, "h_kind")
    if kind == HTerm.BOX:
        h = HTerm.box(
            _as_vector(_require(doc, "h_y_min"), n, "h_y_min"),
            _as_vector(_require(doc, "h_y_max"), n, "h_y_max"),
        )
    elif kind == HTerm.ZERO:
        h = HTerm.zero()
    elif kind == HTerm.EQUALITY:
        h_a = np.asarray(_require(doc, "h_A"), dtype=float)
        if h_a.ndim != 2 or h_a.shape[1] != n:
            raise ProblemFormatError(
                f"h_A has shape {h_a.shape}, expected (*, {n})"
            )
        h = HTerm.equality(h_a, _as_vector(_require(doc, "h_b"), h_a.shape[0], "h_b"))
    elif kind == HTerm.SOFT_BOX:
        coupled = []
        for i, entry in enumerate(_require(doc, "soft")):
            try:
                coupled.append(
                    CoupledBound(
                        y_index=int(entry["y"]),
                        lo=float(entry["lo"]),
                        hi=float(entry["hi"]),
                        lower_slack=(
                            None
                            if entry.get("lower_slack") is None
                            else int(entry["lower_slack"])
                        ),
                        upper_slack=(
                            None
                            if entry.get("upper_slack") is None
                            else int(entry["upper_slack"])
                        ),
                    )
                )
            except KeyError as exc:
                raise ProblemFormatError(f"soft[{i}]: missing {exc}")
        h = HTerm.soft_box(
            _as_vector(_require(doc, "h_y_min"), n, "h_y_min"),
            _as_vector(_require(doc, "h_y_max"), n, "h_y_max"),
            coupled,
        )
    else:
        raise ProblemFormatError(f"h_kind: unknown kind {kind!r}")
    return ComposedProblem(cost, h, eq=eq, g=g)


def save_problem(p, file):
    """Write a problem file (JSON; ±inf serialized as Infinity literals)."""
    doc = problem_to_dict(p)
    if hasattr(file, "write"):
        json.dump(doc, file, indent=1)
    else:
        with open(file, "w") as fh:
            json.dump(doc, fh, indent=1)


def load_problem(file):
    """Load a problem file written by :func:`save_problem`."""
    try:
        if hasattr(file, "read"):
            doc = json.load(file)
        else:
            with open(file) as fh:
                doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ProblemFormatError(f"not valid JSON: {exc}")
    if not isinstance(doc, dict):
        raise ProblemFormatError("top-level value must be an object")
    return problem_from_dict(doc)
