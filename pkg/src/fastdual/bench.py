"""Closed-loop iteration benchmark on the pitch-tracking aircraft model.

Each row runs the same reference scenario through one solver configuration
and reports per-sample iteration statistics.  Every sample terminates by
the 0.5% relative oracle rule against the verified reference solution, so
iteration columns are deterministic for a fixed scenario and comparable
across algorithms; wall-clock columns are informational only and carry no
thresholds.  A sample that hits its iteration cap aborts the whole run.
"""

from dataclasses import dataclass

import numpy as np

from .curvature import applicable_curvature, curvature_general
from .errors import CapReached
from .metric import (StructurePattern, metric_from_dense, scalar_metric,
                     select_metric)
from .mpc import (SolverConfig, afti16_model, afti16_scenario,
                  closed_loop_run, condense_eqdual, condense_ineqdual)

ROW_ORDER = (
    "eqdual-generalized",
    "eqdual-scalar",
    "ineqdual-selected-k11",
    "ineqdual-selected-hinv",
    "ineqdual-scalar-k11",
    "ineqdual-scalar-hinv",
    "admm-rho-0.3",
    "admm-rho-3",
    "admm-rho-30",
)


@dataclass
class BenchRow:
    """Per-configuration closed-loop statistics."""

    name: str
    params: str
    samples: int
    avg_iterations: float
    max_iterations: int
    avg_ms: float
    max_ms: float


@dataclass
class BenchmarkReport:
    """Benchmark table plus the settings that produced it."""

    rows: list
    seed: int | None
    rel_tol: float
    n_samples: int

    def row(self, name):
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def write_csv(self, path_or_file):
        close = False
        if hasattr(path_or_file, "write"):
            fh = path_or_file
        else:
            fh = open(path_or_file, "w")
            close = True
        try:
            fh.write(
                "name,params,samples,avg_iterations,max_iterations,"
                "avg_ms,max_ms\n"
            )
            for r in self.rows:
                fh.write(
                    f"{r.name},{r.params},{r.samples},"
                    f"{repr(float(r.avg_iterations))},{int(r.max_iterations)},"
                    f"{float(r.avg_ms):.3f},{float(r.max_ms):.3f}\n"
                )
        finally:
            if close:
                fh.close()

    def format_console(self):
        """Fixed-width table: iteration statistics first, then wall time."""
        head = ("algorithm", "parameters", "avg iters", "max iters",
                "avg ms", "max ms")
        body = [
            (r.name, r.params, f"{r.avg_iterations:.1f}",
             f"{r.max_iterations}", f"{r.avg_ms:.2f}", f"{r.max_ms:.2f}")
            for r in self.rows
        ]
        widths = [
            max(len(head[c]), *(len(row[c]) for row in body)) if body
            else len(head[c])
            for c in range(len(head))
        ]
        lines = []
        lines.append("  ".join(h.ljust(w) for h, w in zip(head, widths)))
        lines.append("  ".join("-" * w for w in widths))
        for row in body:
            cells = [row[0].ljust(widths[0]), row[1].ljust(widths[1])]
            cells += [row[c].rjust(widths[c]) for c in range(2, len(head))]
            lines.append("  ".join(cells))
        return "\n".join(lines) + "\n"


def _config_builders(rel_tol, max_iter, scalar_cap, backend):
    """Name -> (params string, config factory); factories share condensations.

    Metric selection runs lazily so a row subset only pays for what it uses.
    """
    cache = {}

    def eq_cm():
        if "eq" not in cache:
            cache["eq"] = applicable_curvature(condense_eqdual(afti16_model()))
        return cache["eq"]

    def iq_prob():
        if "iq" not in cache:
            cache["iq"] = condense_ineqdual(afti16_model())
        return cache["iq"]

    def base(**kw):
        kw.setdefault("rel_tol", rel_tol)
        kw.setdefault("max_iter", max_iter)
        kw.setdefault("backend", backend)
        return SolverConfig(stop_mode="oracle", **kw)

    def eq_generalized():
        l_mat = eq_cm().value.a * (1.0 + 1e-9)
        return base(form="eqdual", llam=metric_from_dense(l_mat))

    def eq_scalar():
        return base(form="eqdual", llam=scalar_metric(eq_cm()),
                    max_iter=scalar_cap)

    def iq_selected(general):
        cm = curvature_general(iq_prob()) if general else (
            applicable_curvature(iq_prob())
        )
        met = select_metric(cm, StructurePattern.diagonal())
        return base(form="ineqdual", lmu=met)

    def iq_scalar(general):
        cm = curvature_general(iq_prob()) if general else (
            applicable_curvature(iq_prob())
        )
        return base(form="ineqdual", lmu=scalar_metric(cm))

    def admm(rho):
        return base(algorithm="admm", form="ineqdual", rho=rho)

    return {
        "eqdual-generalized": ("L_lam = A H^-1 A'", eq_generalized),
        "eqdual-scalar": ("L_lam = ||A H^-1 A'||_2 I", eq_scalar),
        "ineqdual-selected-k11": (
            "L_mu diagonal via P = K11", lambda: iq_selected(False)),
        "ineqdual-selected-hinv": (
            "L_mu diagonal via P = H^-1", lambda: iq_selected(True)),
        "ineqdual-scalar-k11": (
            "L_mu = lam_max(B K11 B') I", lambda: iq_scalar(False)),
        "ineqdual-scalar-hinv": (
            "L_mu = lam_max(B H^-1 B') I", lambda: iq_scalar(True)),
        "admm-rho-0.3": ("rho = 0.3", lambda: admm(0.3)),
        "admm-rho-3": ("rho = 3", lambda: admm(3.0)),
        "admm-rho-30": ("rho = 30", lambda: admm(30.0)),
    }


def run_benchmark(*, seed=None, up_samples=30, down_samples=30, rel_tol=5e-3,
                  max_iter=200000, scalar_cap=10**6, rows=None,
                  backend="auto", progress=None):
    """Run the benchmark table; ``rows`` selects a subset by name.

    ``seed`` perturbs only the scenario start state.  Iteration columns are
    deterministic given the flags; timing columns are not.  A capped sample
    raises :class:`CapReached` naming the offending row.
    """
    builders = _config_builders(rel_tol, max_iter, scalar_cap, backend)
    if rows is None:
        selected = list(ROW_ORDER)
    else:
        unknown = [r for r in rows if r not in builders]
        if unknown:
            raise ValueError(
                f"unknown benchmark rows {unknown}; valid: {list(ROW_ORDER)}"
            )
        selected = [r for r in ROW_ORDER if r in set(rows)]
    inst = afti16_model()
    scen = afti16_scenario(seed=seed, up_samples=up_samples,
                           down_samples=down_samples)
    out = []
    for name in selected:
        if progress is not None:
            progress(name)
        params, make = builders[name]
        try:
            res = closed_loop_run(inst, make(), scen)
        except CapReached as exc:
            raise CapReached(
                f"benchmark row {name} hit its iteration cap: {exc}",
                exc.result,
            ) from exc
        out.append(
            BenchRow(
                name=name,
                params=params,
                samples=int(res.iterations.size),
                avg_iterations=float(res.iterations.mean()),
                max_iterations=int(res.iterations.max()),
                avg_ms=float(res.solve_ms.mean()),
                max_ms=float(res.solve_ms.max()),
            )
        )
    return BenchmarkReport(
        rows=out, seed=seed, rel_tol=rel_tol, n_samples=scen.n_samples
    )
