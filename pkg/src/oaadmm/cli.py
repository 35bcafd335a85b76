"""Command-line entry point.

Subcommands
-----------
solve       static consensus QP read from a YAML/JSON file, writes the iteration trace
scenario    one scenario file, writes the world trace and a run summary
benchmark   all conflict cases for one protocol and grid fidelity
sweep       four-robot (D, w) sweep for adaptive and fixed-penalty ADMM
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import bench
from .core import ConsensusProblem, QuadraticObjective, SolverConfig, initial_state, quadratic_x_subsolver, \
    quadratic_z_subsolver, solve_static
from .scenario import PROTOCOLS, ClockConfig, ScenarioSpec
from .sim import OAADMMSettings, run_scenario
from .agent import AgentOptions

log = logging.getLogger("oaadmm")


def _clock(args) -> ClockConfig:
    return ClockConfig(args.control_hz, args.physics_hz, args.timeout_s)


def _settings(args) -> OAADMMSettings:
    st = OAADMMSettings()
    st.options = AgentOptions(**{**vars(st.options), "iterations_per_step": args.iterations_per_step})
    return st


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _quadratic(d: dict, n: int) -> QuadraticObjective:
    P = np.asarray(d.get("P", np.zeros((n, n))), dtype=float)
    return QuadraticObjective(P, d.get("q", np.zeros(n)), d.get("lower"), d.get("upper"), d.get("const", 0.0))


def load_static_problem(path) -> tuple:
    """Read ``{f: {P, q, lower, upper}, g: {...}, A, B, c, rho}`` from YAML or JSON."""
    data = yaml.safe_load(Path(path).read_text())
    A = np.atleast_2d(np.asarray(data["A"], dtype=float))
    B = np.atleast_2d(np.asarray(data["B"], dtype=float))
    prob = ConsensusProblem(_quadratic(data.get("f", {}), A.shape[1]), _quadratic(data.get("g", {}), B.shape[1]),
                            A, B, data["c"])
    return prob, data.get("rho", 1.0)


def cmd_solve(args) -> int:
    prob, rho = load_static_problem(args.problem)
    cfg = SolverConfig(max_iterations_per_step=args.max_iter, primal_tolerance=args.tol, dual_tolerance=args.tol)
    trace = solve_static(prob, quadratic_x_subsolver, quadratic_z_subsolver, cfg, initial_state(prob, rho))
    out = _out_dir(args)
    trace.to_csv(out / "solve_trace.csv")
    summary = {"converged": trace.converged, "iterations": trace.iterations,
               "x": trace.final.x.tolist(), "z": trace.final.z.tolist(),
               "objective": trace.objective[-1]}
    (out / "solve_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"converged={trace.converged} iterations={trace.iterations} objective={trace.objective[-1]:.6g}")
    return 0 if trace.converged else 1


def cmd_scenario(args) -> int:
    spec = ScenarioSpec.load(args.spec)
    if args.protocol:
        spec = spec.with_protocol(args.protocol)
    if args.seed is not None:
        spec.seed = args.seed
    trace = run_scenario(spec, _clock(args), _settings(args))
    out = _out_dir(args)
    trace.to_csv(out / "trace.csv")
    trace.to_json(out / "summary.json")
    print(f"{spec.label}: {trace.classification}, min clearance {trace.min_clearance:.3f} m")
    return 0


def cmd_benchmark(args) -> int:
    def progress(c):
        log.info("%s seed %d: %s delay %.3f", c.label, c.seed, c.classification, c.delay)

    res = bench.run_benchmark(args.protocol, args.fidelity, args.repetitions, args.seed,
                              _clock(args), _settings(args), progress=progress)
    out = _out_dir(args)
    stem = f"{args.protocol}_f{args.fidelity}"
    res.write_case_csv(out / f"{stem}_cases.csv")
    res.write_runs_csv(out / f"{stem}_runs.csv")
    res.write_summary(out / f"{stem}_summary.csv", out / f"{stem}_summary.json")
    s = res.summary()
    print(f"{args.protocol} f={args.fidelity}: mean delay {s['mean_delay']} s, "
          f"added {s['mean_added_delay']} s, {s['violations']} violations, {s['timeouts']} timeouts")
    return 0


def cmd_sweep(args) -> int:
    grid = bench.SweepGrid()
    if args.quick:
        grid = bench.SweepGrid(D_values=(0.0, 0.5, 1.0), w_values=(0.5, 2.0, 5.0))
    out = _out_dir(args)
    rows, summary = [], {}
    for solver in args.solvers:
        def progress(r):
            log.info("%s D=%g w=%g: %s", r.solver, r.D, r.w, r.classification)

        r, m = bench.run_sweep(grid, solver, progress=progress)
        rows += r
        summary[solver] = m.to_dict()
        print(f"{solver}: resolved {m.resolved}, violations {m.violations}, timeouts {m.timeouts}, "
              f"mean delay {m.mean_delay:.3f} s, mean MSV {m.msv:.3e}")
    bench.write_sweep_csv(rows, out / "sweep.csv")
    (out / "sweep_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=float) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="oaadmm", description="Online adaptive ADMM planning and benchmarks")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out-dir", default="out")
    common.add_argument("--control-hz", type=float, default=20.0)
    common.add_argument("--physics-hz", type=float, default=160.0)
    common.add_argument("--timeout-s", type=float, default=30.0)
    common.add_argument("--iterations-per-step", type=int, default=1)
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", parents=[common], help="static consensus problem")
    s.add_argument("problem")
    s.add_argument("--max-iter", type=int, default=2000)
    s.add_argument("--tol", type=float, default=1e-6)
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("scenario", parents=[common], help="run one scenario file")
    s.add_argument("spec")
    s.add_argument("--protocol", choices=PROTOCOLS, default=None)
    s.set_defaults(func=cmd_scenario)

    s = sub.add_parser("benchmark", parents=[common], help="all conflict cases")
    s.add_argument("--protocol", choices=PROTOCOLS, default="oa-admm")
    s.add_argument("--fidelity", type=int, default=8)
    s.add_argument("--repetitions", type=int, default=3)
    s.set_defaults(func=cmd_benchmark)

    s = sub.add_parser("sweep", parents=[common], help="four-robot (D, w) sweep")
    s.add_argument("--solvers", nargs="+", choices=bench.SOLVERS, default=list(bench.SOLVERS))
    s.add_argument("--quick", action="store_true", help="3x3 subset of the grid")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "benchmark" and args.seed is None:
        args.seed = 0
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
