"""MPC condensation into the two dual forms, plus a closed-loop simulator.

A horizon is stacked as ``y = (x_0..x_N, u_0..u_{N-1}, s_0..s_N)`` with
per-stage slacks for softened output bounds.  ``condense_eqdual`` dualizes
the dynamics (box/soft-box inner, clip-form iterations); ``condense_ineqdual``
keeps the dynamics inside the inner minimizer and dualizes the stacked
inequality rows.  Per-sample updates touch only right-hand sides and linear
cost terms, never the cached factorizations.
"""

import json
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import CapReached, ProblemFormatError
from .problem import (
    AffineEq,
    ComposedProblem,
    CoupledBound,
    GTerm,
    HTerm,
    QuadCost,
)
from .reference import reference_solution  # noqa: F401  (re-exported oracle)
from .solver import StopRule, admm_run, admm_setup, fdgm_run, fdgm_setup


@dataclass
class Plant:
    """Discrete-time linear plant ``x+ = Phi x + Gamma u``, ``y = C x``."""

    phi: np.ndarray
    gamma: np.ndarray
    c_out: np.ndarray

    def __post_init__(self):
        self.phi = np.atleast_2d(np.asarray(self.phi, dtype=float))
        self.gamma = np.atleast_2d(np.asarray(self.gamma, dtype=float))
        self.c_out = np.atleast_2d(np.asarray(self.c_out, dtype=float))
        if self.phi.shape[0] != self.phi.shape[1]:
            raise ValueError("dynamics matrix must be square")
        if self.gamma.shape[0] != self.phi.shape[0]:
            raise ValueError("input map row count must match state count")
        if self.c_out.shape[1] != self.phi.shape[0]:
            raise ValueError("output map column count must match state count")

    @property
    def nx(self):
        return self.phi.shape[0]

    @property
    def nu(self):
        return self.gamma.shape[1]

    @property
    def ny(self):
        return self.c_out.shape[0]

    def step(self, x, u):
        return self.phi @ x + self.gamma @ u

    def output(self, x):
        return self.c_out @ x


@dataclass
class MpcWeights:
    """Stage weights; the state weight may be assembled from output weights."""

    q: np.ndarray
    r: np.ndarray
    q_f: np.ndarray
    slack_weight: float = 0.0

    def __post_init__(self):
        self.q = np.atleast_2d(np.asarray(self.q, dtype=float))
        self.r = np.atleast_2d(np.asarray(self.r, dtype=float))
        self.q_f = np.atleast_2d(np.asarray(self.q_f, dtype=float))
        if np.linalg.eigvalsh(0.5 * (self.r + self.r.T))[0] <= 0.0:
            raise ValueError("input weight must be positive definite")
        for name, mat in (("q", self.q), ("q_f", self.q_f)):
            if np.linalg.eigvalsh(0.5 * (mat + mat.T))[0] < -1e-12 * max(
                1.0, np.abs(mat).max()
            ):
                raise ValueError(f"{name} weight must be positive semidefinite")

    @classmethod
    def from_output_weights(cls, c_out, q_y, q_x, r, slack_weight=0.0,
                            q_f=None):
        """Q = C' Q_y C + Q_x; terminal defaults to the stage weight."""
        c_out = np.atleast_2d(np.asarray(c_out, dtype=float))
        q = c_out.T @ np.atleast_2d(q_y) @ c_out + np.atleast_2d(q_x)
        return cls(q, r, q if q_f is None else q_f, slack_weight)


@dataclass(frozen=True)
class OutputBound:
    """Range on one plant output, each side optionally slack-softened."""

    index: int
    lo: float
    hi: float
    soft_lower: bool = True
    soft_upper: bool = True

    @property
    def slack_count(self):
        return int(self.soft_lower) + int(self.soft_upper)


@dataclass
class MpcInstance:
    plant: Plant
    weights: MpcWeights
    horizon: int
    u_min: np.ndarray
    u_max: np.ndarray
    output_bounds: tuple = ()
    x0: np.ndarray = None
    y_ref: np.ndarray = None

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        self.u_min = np.broadcast_to(
            np.asarray(self.u_min, dtype=float), (self.plant.nu,)
        ).copy()
        self.u_max = np.broadcast_to(
            np.asarray(self.u_max, dtype=float), (self.plant.nu,)
        ).copy()
        if not (np.all(np.isfinite(self.u_min))
                and np.all(np.isfinite(self.u_max))):
            raise ValueError("input bounds must be finite")
        self.output_bounds = tuple(self.output_bounds)
        if self.x0 is None:
            self.x0 = np.zeros(self.plant.nx)
        self.x0 = np.asarray(self.x0, dtype=float).copy()
        if self.y_ref is None:
            self.y_ref = np.zeros(self.plant.ny)
        self.y_ref = np.asarray(self.y_ref, dtype=float).copy()
        if any(b.slack_count and self.weights.slack_weight <= 0.0
               for b in self.output_bounds):
            raise ValueError("softened bounds need a positive slack weight")

    def x_ref(self, y_ref=None):
        """Least-norm state target mapping through the output matrix."""
        y_r = self.y_ref if y_ref is None else np.asarray(y_ref, dtype=float)
        c = self.plant.c_out
        return c.T @ np.linalg.solve(c @ c.T, y_r)


class _Layout:
    """Index bookkeeping for the stacked decision vector."""

    def __init__(self, inst):
        self.nx = inst.plant.nx
        self.nu = inst.plant.nu
        self.n_h = inst.horizon
        self.slack_per_stage = sum(b.slack_count for b in inst.output_bounds)
        self.x_off = 0
        self.u_off = (self.n_h + 1) * self.nx
        self.s_off = self.u_off + self.n_h * self.nu
        self.n = self.s_off + (self.n_h + 1) * self.slack_per_stage

    def x_at(self, k):
        return self.x_off + k * self.nx

    def u_at(self, k):
        return self.u_off + k * self.nu

    def slack_at(self, k, slot):
        return self.s_off + k * self.slack_per_stage + slot


def _slack_slots(inst):
    """(bound, lower_slot, upper_slot) per output bound; None when hard."""
    out = []
    slot = 0
    for b in inst.output_bounds:
        lo_slot = up_slot = None
        if b.soft_lower:
            lo_slot = slot
            slot += 1
        if b.soft_upper:
            up_slot = slot
            slot += 1
        out.append((b, lo_slot, up_slot))
    return out


def _stacked_cost(inst):
    lay = _Layout(inst)
    w = inst.weights
    n_h = lay.n_h
    blocks = [w.q] * n_h + [w.q_f] + [w.r] * n_h
    h_mat = scipy.linalg.block_diag(*blocks)
    if lay.slack_per_stage:
        s_blk = w.slack_weight * np.eye((n_h + 1) * lay.slack_per_stage)
        h_mat = scipy.linalg.block_diag(h_mat, s_blk)
    zeta = np.zeros(lay.n)
    x_r = inst.x_ref()
    for k in range(n_h):
        zeta[lay.x_at(k) : lay.x_at(k) + lay.nx] = -(w.q @ x_r)
    zeta[lay.x_at(n_h) : lay.x_at(n_h) + lay.nx] = -(w.q_f @ x_r)
    return QuadCost(h_mat, zeta), lay


def _dynamics_rows(inst, lay):
    """Equalities: x_0 pinned to the measured state, then the recursion."""
    nx, nu, n_h = lay.nx, lay.nu, lay.n_h
    m = (n_h + 1) * nx
    a_mat = np.zeros((m, lay.n))
    a_mat[:nx, :nx] = np.eye(nx)
    for k in range(n_h):
        r = (k + 1) * nx
        a_mat[r : r + nx, lay.x_at(k + 1) : lay.x_at(k + 1) + nx] = np.eye(nx)
        a_mat[r : r + nx, lay.x_at(k) : lay.x_at(k) + nx] = -inst.plant.phi
        a_mat[r : r + nx, lay.u_at(k) : lay.u_at(k) + nu] = -inst.plant.gamma
    b = np.zeros(m)
    b[:nx] = inst.x0
    return a_mat, b


def _selector_state(c_row):
    """Index of the single unit entry, or None for general output rows."""
    nz = np.nonzero(c_row)[0]
    if len(nz) == 1 and c_row[nz[0]] == 1.0:
        return int(nz[0])
    return None


def condense_eqdual(inst):
    """Dynamics-dualized form: separable inner minimization over a (soft) box.

    Output bounds must act on selector outputs (single unit entry in the
    output matrix) so they map to component bounds of the stacked vector.
    """
    cost, lay = _stacked_cost(inst)
    a_mat, b = _dynamics_rows(inst, lay)
    y_min = np.full(lay.n, -np.inf)
    y_max = np.full(lay.n, np.inf)
    for k in range(lay.n_h):
        u0 = lay.u_at(k)
        y_min[u0 : u0 + lay.nu] = inst.u_min
        y_max[u0 : u0 + lay.nu] = inst.u_max
    if lay.slack_per_stage:
        y_min[lay.s_off :] = 0.0
    coupled = []
    for b_out, lo_slot, up_slot in _slack_slots(inst):
        state = _selector_state(inst.plant.c_out[b_out.index])
        if state is None:
            raise ValueError(
                "output bounds in the dynamics-dualized form need selector "
                "outputs (single unit entry per output row)"
            )
        for k in range(lay.n_h + 1):
            idx = lay.x_at(k) + state
            if b_out.slack_count == 0:
                y_min[idx] = max(y_min[idx], b_out.lo)
                y_max[idx] = min(y_max[idx], b_out.hi)
                continue
            coupled.append(
                CoupledBound(
                    idx,
                    b_out.lo,
                    b_out.hi,
                    lay.slack_at(k, lo_slot) if lo_slot is not None else None,
                    lay.slack_at(k, up_slot) if up_slot is not None else None,
                )
            )
    if coupled:
        h = HTerm.soft_box(y_min, y_max, coupled)
    else:
        h = HTerm.box(y_min, y_max)
    return ComposedProblem(cost, h, eq=AffineEq(a_mat, b))


def condense_ineqdual(inst):
    """Inequality-dualized form: dynamics stay inside a KKT inner minimizer.

    Row order: per-stage output rows (one row per softened side, two-sided
    rows for hard bounds), then input boxes, then slack nonnegativity.
    """
    cost, lay = _stacked_cost(inst)
    a_mat, b = _dynamics_rows(inst, lay)
    rows, d_lo, d_hi = [], [], []
    for k in range(lay.n_h + 1):
        for b_out, lo_slot, up_slot in _slack_slots(inst):
            c_row = inst.plant.c_out[b_out.index]
            if b_out.slack_count == 0:
                row = np.zeros(lay.n)
                row[lay.x_at(k) : lay.x_at(k) + lay.nx] = c_row
                rows.append(row)
                d_lo.append(b_out.lo)
                d_hi.append(b_out.hi)
                continue
            if lo_slot is not None:
                row = np.zeros(lay.n)
                row[lay.x_at(k) : lay.x_at(k) + lay.nx] = c_row
                row[lay.slack_at(k, lo_slot)] = 1.0
                rows.append(row)
                d_lo.append(b_out.lo)
                d_hi.append(np.inf)
            if up_slot is not None:
                row = np.zeros(lay.n)
                row[lay.x_at(k) : lay.x_at(k) + lay.nx] = c_row
                row[lay.slack_at(k, up_slot)] = -1.0
                rows.append(row)
                d_lo.append(-np.inf)
                d_hi.append(b_out.hi)
    for k in range(lay.n_h):
        for j in range(lay.nu):
            row = np.zeros(lay.n)
            row[lay.u_at(k) + j] = 1.0
            rows.append(row)
            d_lo.append(inst.u_min[j])
            d_hi.append(inst.u_max[j])
    for idx in range(lay.s_off, lay.n):
        row = np.zeros(lay.n)
        row[idx] = 1.0
        rows.append(row)
        d_lo.append(0.0)
        d_hi.append(np.inf)
    g = GTerm.box(np.array(rows), np.array(d_lo), np.array(d_hi))
    return ComposedProblem(cost, HTerm.equality(a_mat, b), g=g)


def afti16_model():
    """Ill-conditioned unstable pitch-control benchmark (4/2/2, horizon 10)."""
    phi = np.array(
        [
            [0.999, -3.008, -0.113, -1.608],
            [-0.000, 0.986, 0.048, 0.000],
            [0.000, 2.083, 1.009, -0.000],
            [0.000, 0.053, 0.050, 1.000],
        ]
    )
    gamma = np.array(
        [
            [-0.080, -0.635],
            [-0.029, -0.014],
            [-0.868, -0.092],
            [-0.022, -0.002],
        ]
    )
    c_out = np.array([[0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0]])
    plant = Plant(phi, gamma, c_out)
    weights = MpcWeights.from_output_weights(
        c_out,
        q_y=100.0 * np.eye(2),
        q_x=np.diag([1e-4, 0.0, 1e-3, 0.0]),
        r=1e-2 * np.eye(2),
        slack_weight=1e6,
    )
    bounds = (
        OutputBound(0, -0.5, 0.5),
        OutputBound(1, -100.0, 100.0),
    )
    return MpcInstance(
        plant, weights, horizon=10, u_min=-25.0, u_max=25.0,
        output_bounds=bounds,
    )


@dataclass
class Scenario:
    """Initial state plus piecewise-constant reference segments."""

    x0: np.ndarray
    segments: tuple  # ((samples, y_ref), ...)

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float).copy()
        segs = []
        for count, y_r in self.segments:
            if count < 1:
                raise ValueError("segment sample count must be positive")
            segs.append((int(count), np.asarray(y_r, dtype=float).copy()))
        self.segments = tuple(segs)

    @property
    def n_samples(self):
        return sum(c for c, _ in self.segments)

    def expand(self):
        return np.vstack([np.tile(y, (c, 1)) for c, y in self.segments])

    def save(self, path):
        doc = {
            "x0": list(self.x0),
            "segments": [
                {"samples": c, "y_ref": list(y)} for c, y in self.segments
            ],
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            doc = json.load(fh)
        try:
            return cls(
                np.asarray(doc["x0"], dtype=float),
                tuple((s["samples"], s["y_ref"]) for s in doc["segments"]),
            )
        except (KeyError, TypeError) as exc:
            raise ProblemFormatError(f"bad scenario file: {exc}") from exc


def afti16_scenario(seed=None, pitch=10.0, up_samples=30, down_samples=30):
    """Pitch step to ``pitch`` degrees and back; seed jitters the start state."""
    x0 = np.zeros(4)
    if seed is not None:
        x0 = 1e-3 * np.random.default_rng(seed).standard_normal(4)
    return Scenario(
        x0,
        ((up_samples, np.array([0.0, pitch])),
         (down_samples, np.array([0.0, 0.0]))),
    )


@dataclass
class SolverConfig:
    """Closed-loop solver choice: algorithm, condensation form, metrics."""

    algorithm: str = "fdgm"        # fdgm | admm
    form: str = "eqdual"           # eqdual | ineqdual
    llam: object = None
    lmu: object = None
    rho: float = 1.0
    warm_start: bool = False
    stop_mode: str = "oracle"      # oracle | residual
    rel_tol: float = 5e-3
    eps_eq: float = 1e-6
    eps_ineq: float = 1e-6
    eps_fp: float = 1e-9
    max_iter: int = 200000
    backend: str = "auto"
    allow_uncertified: bool = False


@dataclass
class ClosedLoopResult:
    states: np.ndarray        # (T+1, nx) visited plant states
    inputs: np.ndarray        # (T, nu) applied first moves
    outputs: np.ndarray       # (T, ny) outputs at decision time
    refs: np.ndarray          # (T, ny)
    slack_max: np.ndarray     # (T,) largest slack in each plan
    iterations: np.ndarray    # (T,) solver iterations per sample
    final_residuals: np.ndarray  # (T, 2) eq / ineq residuals at termination
    solve_ms: np.ndarray = None  # (T,) wall time of the solver call only

    def write_csv(self, path_or_file):
        close = False
        if hasattr(path_or_file, "write"):
            fh = path_or_file
        else:
            fh = open(path_or_file, "w")
            close = True
        try:
            nx = self.states.shape[1]
            nu = self.inputs.shape[1]
            ny = self.outputs.shape[1]
            cols = (
                ["t"]
                + [f"x{i+1}" for i in range(nx)]
                + [f"u{i+1}" for i in range(nu)]
                + [f"y{i+1}" for i in range(ny)]
                + ["slack_max", "iterations"]
            )
            fh.write(",".join(cols) + "\n")
            for t in range(self.inputs.shape[0]):
                vals = (
                    [str(t)]
                    + [repr(float(v)) for v in self.states[t]]
                    + [repr(float(v)) for v in self.inputs[t]]
                    + [repr(float(v)) for v in self.outputs[t]]
                    + [repr(float(self.slack_max[t])), str(int(self.iterations[t]))]
                )
                fh.write(",".join(vals) + "\n")
        finally:
            if close:
                fh.close()


def closed_loop_run(inst, config, scenario):
    """Simulate state feedback: condense once, rebind rhs data per sample.

    The oracle stop mode terminates each sample at 0.5% relative distance
    from the verified reference solution (the benchmark rule); residual mode
    uses the library thresholds.  A solver cap aborts the run, attaching the
    partial trajectory to the raised error.
    """
    refs = scenario.expand()
    n_samples = refs.shape[0]
    work = MpcInstance(
        inst.plant, inst.weights, inst.horizon, inst.u_min, inst.u_max,
        inst.output_bounds, scenario.x0.copy(), refs[0].copy(),
    )
    lay = _Layout(work)
    if config.form == "eqdual":
        prob = condense_eqdual(work)
    elif config.form == "ineqdual":
        prob = condense_ineqdual(work)
    else:
        raise ValueError(f"unknown condensation form {config.form!r}")
    if config.algorithm == "fdgm":
        plan = fdgm_setup(
            prob,
            config.llam if prob.m else None,
            config.lmu if prob.p else None,
            allow_uncertified=config.allow_uncertified,
        )
    elif config.algorithm == "admm":
        plan = admm_setup(prob, config.rho)
    else:
        raise ValueError(f"unknown algorithm {config.algorithm!r}")
    x = scenario.x0.copy()
    nu0 = np.zeros(prob.m + prob.p)
    states = [x.copy()]
    inputs, outputs, slack_maxes, iters, final_res = [], [], [], [], []
    solve_ms = []

    def partial():
        t_done = len(inputs)
        return ClosedLoopResult(
            np.array(states),
            np.array(inputs).reshape(t_done, lay.nu),
            np.array(outputs).reshape(t_done, work.plant.ny),
            refs[:t_done],
            np.array(slack_maxes),
            np.array(iters, dtype=int),
            np.array(final_res).reshape(t_done, 2),
            np.array(solve_ms),
        )

    for t in range(n_samples):
        work.y_ref = refs[t]
        work.x0 = x
        cost_t, _ = _stacked_cost(work)
        b_t = np.zeros((lay.n_h + 1) * lay.nx)
        b_t[: lay.nx] = x
        if config.form == "eqdual":
            plan.rebind(zeta=cost_t.zeta, eq_b=b_t)
        else:
            plan.rebind(zeta=cost_t.zeta, h_eq_b=b_t)
        if config.stop_mode == "oracle":
            y_star = reference_solution(plan.p)
            stop = StopRule.oracle(y_star, config.rel_tol, config.max_iter)
        else:
            stop = StopRule.residual(
                config.eps_eq, config.eps_ineq, config.eps_fp,
                max_iter=config.max_iter,
            )
        t0 = time.perf_counter()
        try:
            if config.algorithm == "fdgm":
                res = fdgm_run(
                    plan, nu0=nu0 if config.warm_start else None,
                    stop=stop, log_dual=False, backend=config.backend,
                )
            else:
                res = admm_run(plan, stop=stop, log_values=False)
        except CapReached as exc:
            raise CapReached(
                f"sample {t}: {exc}", partial()
            ) from exc
        solve_ms.append((time.perf_counter() - t0) * 1e3)
        u0 = res.y[lay.u_off : lay.u_off + lay.nu].copy()
        inputs.append(u0)
        outputs.append(work.plant.output(x))
        slack_maxes.append(
            float(res.y[lay.s_off :].max()) if lay.slack_per_stage else 0.0
        )
        iters.append(res.iterations)
        final_res.append([res.log.eq_res[-1], res.log.ineq_res[-1]])
        if config.warm_start:
            nu0 = np.concatenate([res.lam, res.mu])
        x = work.plant.step(x, u0)
        states.append(x.copy())
    return partial()
