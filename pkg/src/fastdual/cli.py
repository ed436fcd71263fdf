"""Command-line front end: metric selection, one-shot solves, closed-loop runs.

Subcommands
-----------
``precondition``
    Read a problem file, select a pattern-restricted metric for its dualized
    constraints, and write a metric file (pattern descriptor, dense ``L``,
    achieved ratio, certificate margin).
``solve``
    Solve one problem with ``fdgm`` (metric file required), ``fgm`` (scalar
    metric derived from the problem, any metric file is ignored), or the
    ``admm`` baseline.  Writes a result file: ``# key=value`` header lines
    (algorithm, rho for admm, converged flag, iterations, final residuals)
    followed by the per-iteration trace CSV.
``mpc-sim``
    Closed-loop pitch-tracking simulation on the built-in aircraft model;
    writes the trajectory CSV.
``bench-afti16``
    The nine-row closed-loop iteration benchmark; writes the table CSV and
    prints it.

Shared flags: ``--seed`` jitters scenario start states only (solves are
deterministic), ``--out-dir`` receives default output files, ``--format``
picks the stdout style (``console`` summary or the written artifact).

Exit codes: 0 success, 1 solver failure (iteration cap, infeasible pattern,
refused certificate, non-convergence), 2 input error (malformed files,
incompatible flags).
"""

import argparse
import sys
from pathlib import Path

from .bench import ROW_ORDER, run_benchmark
from .curvature import applicable_curvature, curvature_general
from .errors import (CapReached, FastdualError, NotPositiveSemidefinite,
                     ProblemFormatError, UnsupportedInner, UnsupportedProx)
from .metric import (StructurePattern, load_metric, metric_from_dense,
                     save_metric, scalar_metric, select_metric)
from .mpc import (Scenario, SolverConfig, afti16_model, afti16_scenario,
                  closed_loop_run, condense_eqdual, condense_ineqdual)
from .problem import load_problem
from .solver import StopRule, admm_run, admm_setup, fdgm_run, fdgm_setup


def _load_problem_file(path):
    try:
        return load_problem(path)
    except NotPositiveSemidefinite as exc:
        raise ProblemFormatError(f"problem file {path}: {exc}") from exc


def _load_metric_file(path):
    try:
        return load_metric(path)
    except NotPositiveSemidefinite as exc:
        raise ProblemFormatError(f"metric file {path}: {exc}") from exc


def _parse_pattern(text):
    if text == "diagonal":
        return StructurePattern.diagonal()
    if text == "full":
        return StructurePattern.full()
    if text.startswith("block="):
        body = text[len("block="):]
        try:
            sizes = [int(s) for s in body.split(",") if s.strip()]
        except ValueError:
            raise ValueError(f"bad block sizes in pattern {text!r}") from None
        if not sizes:
            raise ValueError(f"pattern {text!r} lists no block sizes")
        return StructurePattern.block_diagonal(sizes)
    raise ValueError(
        f"unknown pattern {text!r}; use diagonal, full, or block=2,3,...")


def _out_path(args, explicit, default_name):
    if explicit:
        return Path(explicit)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir / default_name


def _echo_file(path):
    sys.stdout.write(Path(path).read_text())


# ---------------------------------------------------------------------------
# precondition


def _cmd_precondition(args):
    prob = _load_problem_file(args.problem)
    pattern = _parse_pattern(args.pattern)
    if prob.m + prob.p == 0:
        raise ValueError("problem has no dualized constraints; nothing to do")
    if args.curvature == "inverse-hessian":
        cm = curvature_general(prob)
    else:
        cm = applicable_curvature(prob)
    met = select_metric(cm, pattern, tol=args.tol)
    warning = getattr(met, "sdp_warning", None)
    if warning:
        print(f"note: {warning}", file=sys.stderr)
    out = _out_path(args, args.out, "metric.json")
    save_metric(met, out)
    if args.format == "csv":
        _echo_file(out)
    else:
        ratio = met.achieved_ratio
        margin = met.certificate_margin
        print(
            f"pattern={args.pattern} dim={met.n}"
            f" achievedRatio={'?' if ratio is None else f'{ratio:.6g}'}"
            f" certificateMargin={'?' if margin is None else f'{margin:.3e}'}"
        )
        print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------------------
# solve


def _solve_metrics(args, prob):
    """Pick (llam, lmu) for the dual engine from flags and problem shape."""
    dual_dim = prob.m + prob.p
    if dual_dim == 0:
        return None, None
    if args.algorithm == "fgm":
        met = scalar_metric(applicable_curvature(prob))
    elif args.metric is not None:
        met = _load_metric_file(args.metric)
    else:
        raise ValueError(
            "fdgm needs --metric on a problem with dualized constraints; "
            "run `fastdual precondition` first or use --algorithm fgm")
    if met.n != dual_dim:
        raise ValueError(
            f"metric dimension {met.n} does not match the problem's "
            f"dual dimension {dual_dim}")
    llam, lmu = met.split(prob.m)
    return (llam if prob.m else None), (lmu if prob.p else None)


def _write_solve_file(path, header, res):
    log = res.log
    eq = log.eq_res[-1] if len(log) else float("nan")
    ineq = log.ineq_res[-1] if len(log) else float("nan")
    fp = log.fp_res[-1] if len(log) else float("nan")
    with open(path, "w") as fh:
        for key, val in header.items():
            fh.write(f"# {key}={val}\n")
        fh.write(f"# converged={'true' if res.converged else 'false'}\n")
        fh.write(f"# iterations={res.iterations}\n")
        fh.write(f"# eq_res={float(eq)!r}\n")
        fh.write(f"# ineq_res={float(ineq)!r}\n")
        fh.write(f"# fp_res={float(fp)!r}\n")
        log.write_csv(fh)
    return eq, ineq


def _cmd_solve(args):
    prob = _load_problem_file(args.problem)
    stop = StopRule.residual(args.tol_eq, args.tol_ineq, args.tol_fp,
                             max_iter=args.max_iter)
    header = {"algorithm": args.algorithm}
    try:
        if args.algorithm == "admm":
            header["rho"] = repr(float(args.rho))
            plan = admm_setup(prob, args.rho)
            res = admm_run(plan, stop=stop)
        else:
            llam, lmu = _solve_metrics(args, prob)
            plan = fdgm_setup(prob, llam, lmu,
                              allow_uncertified=args.allow_uncertified)
            res = fdgm_run(plan, stop=stop, backend=args.backend)
    except CapReached as exc:
        # the partial trace still goes to disk, with converged=false
        if exc.result is None:
            raise
        res = exc.result
    out = _out_path(args, args.out, "solve.csv")
    eq, ineq = _write_solve_file(out, header, res)
    if args.format == "csv":
        _echo_file(out)
    else:
        print(
            f"converged={'true' if res.converged else 'false'}"
            f" iterations={res.iterations}"
            f" eq_res={eq:.3e} ineq_res={ineq:.3e}"
        )
        print(f"wrote {out}")
    if not res.converged:
        print(f"error: did not converge within {args.max_iter} iterations "
              f"(trace written to {out})", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# mpc-sim


def _mpc_config(args, inst):
    kw = dict(algorithm=args.algorithm, form=args.form, rho=args.rho,
              warm_start=args.warm_start, stop_mode=args.stop,
              rel_tol=args.rel_tol, max_iter=args.max_iter,
              backend=args.backend)
    if args.algorithm == "admm":
        return SolverConfig(**kw)
    if args.form == "eqdual":
        cm = applicable_curvature(condense_eqdual(inst))
        if args.scalar_metric:
            kw["llam"] = scalar_metric(cm)
        else:
            # exact dual curvature, inflated so the certificate check passes
            kw["llam"] = metric_from_dense(cm.value.a * (1.0 + 1e-9))
    else:
        cm = applicable_curvature(condense_ineqdual(inst))
        if args.scalar_metric:
            kw["lmu"] = scalar_metric(cm)
        else:
            kw["lmu"] = select_metric(cm, StructurePattern.diagonal())
    return SolverConfig(**kw)


def _cmd_mpc_sim(args):
    if args.algorithm == "admm" and args.form == "eqdual":
        raise ValueError("the admm baseline runs on the ineqdual form")
    inst = afti16_model()
    if args.scenario:
        scen = Scenario.load(args.scenario)
    else:
        scen = afti16_scenario(seed=args.seed, pitch=args.pitch,
                               up_samples=args.up_samples,
                               down_samples=args.down_samples)
    config = _mpc_config(args, inst)
    res = closed_loop_run(inst, config, scen)
    out = _out_path(args, args.out, "trajectory.csv")
    res.write_csv(out)
    if args.format == "csv":
        _echo_file(out)
    else:
        iters = res.iterations
        print(
            f"samples={iters.size}"
            f" avg_iterations={float(iters.mean()):.1f}"
            f" max_iterations={int(iters.max())}"
            f" max_slack={float(res.slack_max.max()):.3e}"
        )
        print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------------------
# bench-afti16


def _cmd_bench_afti16(args):
    rows = None
    if args.rows:
        rows = [r.strip() for r in args.rows.split(",") if r.strip()]
    progress = None
    if not args.quiet:
        def progress(name):
            print(f"[bench] {name}", file=sys.stderr, flush=True)
    report = run_benchmark(
        seed=args.seed, up_samples=args.up_samples,
        down_samples=args.down_samples, rel_tol=args.rel_tol,
        max_iter=args.max_iter, scalar_cap=args.scalar_cap, rows=rows,
        backend=args.backend, progress=progress,
    )
    out = _out_path(args, args.out, "bench-afti16.csv")
    report.write_csv(out)
    if args.format == "csv":
        _echo_file(out)
    else:
        print(report.format_console())
    print(f"wrote {out}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# parser


def _build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--seed", type=int, default=None,
        help="jitter scenario start states; solves themselves are "
             "deterministic")
    common.add_argument(
        "--out-dir", default=".",
        help="directory for default output files (created if missing)")
    common.add_argument(
        "--format", choices=("console", "csv"), default="console",
        help="stdout style: human summary or the written artifact")

    top = argparse.ArgumentParser(
        prog="fastdual",
        description="Fast dual gradient methods with offline metric "
                    "selection.")
    sub = top.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser(
        "precondition", parents=[common],
        help="select a metric for a problem's dualized constraints")
    p.add_argument("problem", help="problem file (JSON)")
    p.add_argument("--pattern", default="diagonal",
                   help="diagonal | full | block=2,3,... (default diagonal)")
    p.add_argument("--curvature", choices=("applicable", "inverse-hessian"),
                   default="applicable",
                   help="dual curvature to shape: the problem's natural "
                        "choice, or force P = H^-1")
    p.add_argument("--tol", type=float, default=0.01,
                   help="relative slack on the achievable ratio")
    p.add_argument("--out", default=None,
                   help="metric file path (default OUT_DIR/metric.json)")
    p.set_defaults(handler=_cmd_precondition)

    p = sub.add_parser("solve", parents=[common],
                       help="solve one problem file")
    p.add_argument("problem", help="problem file (JSON)")
    p.add_argument("--algorithm", choices=("fdgm", "fgm", "admm"),
                   default="fdgm")
    p.add_argument("--metric", default=None,
                   help="metric file for fdgm (ignored by fgm and admm)")
    p.add_argument("--rho", type=float, default=1.0,
                   help="admm penalty parameter")
    p.add_argument("--max-iter", type=int, default=20000)
    p.add_argument("--tol-eq", type=float, default=1e-6,
                   help="equality residual threshold")
    p.add_argument("--tol-ineq", type=float, default=1e-6,
                   help="inequality residual threshold")
    p.add_argument("--tol-fp", type=float, default=1e-9,
                   help="dual fixed-point residual threshold")
    p.add_argument("--allow-uncertified", action="store_true",
                   help="run even if the metric fails the curvature "
                        "certificate")
    p.add_argument("--backend", choices=("auto", "py"), default="auto",
                   help="compiled kernels when available, or pure python")
    p.add_argument("--out", default=None,
                   help="result file path (default OUT_DIR/solve.csv)")
    p.set_defaults(handler=_cmd_solve)

    p = sub.add_parser(
        "mpc-sim", parents=[common],
        help="closed-loop simulation on the built-in aircraft model")
    p.add_argument("--scenario", default=None,
                   help="scenario file (default: built-in pitch reference "
                        "profile)")
    p.add_argument("--form", choices=("eqdual", "ineqdual"),
                   default="eqdual",
                   help="which constraint group is dualized")
    p.add_argument("--algorithm", choices=("fdgm", "admm"), default="fdgm")
    p.add_argument("--scalar-metric", action="store_true",
                   help="use the scalar baseline metric instead of the "
                        "generalized / selected one")
    p.add_argument("--rho", type=float, default=3.0,
                   help="admm penalty parameter")
    p.add_argument("--stop", choices=("oracle", "residual"),
                   default="oracle",
                   help="per-sample stop rule: distance to a verified "
                        "reference, or residual thresholds")
    p.add_argument("--rel-tol", type=float, default=5e-3,
                   help="oracle stop: relative distance to the reference")
    p.add_argument("--max-iter", type=int, default=200000)
    p.add_argument("--pitch", type=float, default=10.0,
                   help="built-in scenario: pitch reference magnitude (deg)")
    p.add_argument("--up-samples", type=int, default=30,
                   help="built-in scenario: samples tracking +pitch")
    p.add_argument("--down-samples", type=int, default=30,
                   help="built-in scenario: samples tracking 0")
    p.add_argument("--warm-start", action="store_true",
                   help="carry dual iterates across samples")
    p.add_argument("--backend", choices=("auto", "py"), default="auto")
    p.add_argument("--out", default=None,
                   help="trajectory file path (default OUT_DIR/"
                        "trajectory.csv)")
    p.set_defaults(handler=_cmd_mpc_sim)

    p = sub.add_parser(
        "bench-afti16", parents=[common],
        help="closed-loop iteration benchmark (CSV + console table)")
    p.add_argument("--rows", default=None,
                   help="comma-separated subset of: " + ", ".join(ROW_ORDER))
    p.add_argument("--up-samples", type=int, default=30)
    p.add_argument("--down-samples", type=int, default=30)
    p.add_argument("--rel-tol", type=float, default=5e-3,
                   help="oracle stop: relative distance to the reference")
    p.add_argument("--max-iter", type=int, default=200000,
                   help="iteration cap for non-scalar rows")
    p.add_argument("--scalar-cap", type=int, default=10 ** 6,
                   help="iteration cap for the scalar equality-dual row")
    p.add_argument("--backend", choices=("auto", "py"), default="auto")
    p.add_argument("--quiet", action="store_true",
                   help="suppress per-row progress on stderr")
    p.add_argument("--out", default=None,
                   help="table file path (default OUT_DIR/bench-afti16.csv)")
    p.set_defaults(handler=_cmd_bench_afti16)
    return top


def main(argv=None):
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else int(exc.code)
    try:
        return args.handler(args)
    except ProblemFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (UnsupportedInner, UnsupportedProx) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FastdualError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
