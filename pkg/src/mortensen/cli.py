"""Command-line interface: scenario runs, estimation drivers, verification.

Every command reads a JSON ScenarioConfig (defaults apply when no file is
given), accepts dotted-path overrides, writes CSV trajectories and a
schema-versioned metrics JSON into the output directory, and maps errors to
exit codes: 2 for validation, 3 for solver nonconvergence or divergence,
4 for coercivity loss.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .discretization import EnergyState
from .errors import MortensenError
from .harness import (
    MetricsReport,
    Scenario,
    ScenarioConfig,
    StopWatch,
    parse_override,
    simulate,
    write_signal_csv,
    write_trajectory_csv,
)
from .lqr_riccati import riccati_integral_residual
from .observer import (
    argmin_estimator,
    compare,
    fixed_point_observer,
    kalman_bucy,
    run_observer,
)
from . import verify as verify_mod
from .adjoint import control_inner
from .dynamics import ControlSignal, OutputSignal


def _load_config(args) -> ScenarioConfig:
    raw = {}
    if args.config:
        with open(args.config) as fh:
            raw = json.load(fh)
    cfg = ScenarioConfig.from_dict(raw)
    for expr in args.override or []:
        key, val = parse_override(expr)
        cfg = cfg.override(key, val)
    if args.seed is not None:
        cfg = cfg.override("seed", args.seed)
    return cfg


def _say(args, msg):
    if not args.quiet:
        print(msg)


def _outdir(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    sc = Scenario(cfg)
    out = _outdir(args)
    watch = StopWatch()
    with watch.time("simulate"):
        sim = simulate(sc)
    write_trajectory_csv(os.path.join(out, "truth.csv"), sim.truth)
    write_trajectory_csv(os.path.join(out, "nominal.csv"), sc.nominal())
    write_signal_csv(os.path.join(out, "y_abs.csv"), sc.tgrid.times, sim.y_abs.values, "y")
    write_signal_csv(os.path.join(out, "y_rel.csv"), sc.tgrid.times, sim.y_rel.values, "y")
    report = MetricsReport(
        "simulate",
        cfg.to_dict(),
        metrics={
            "y_rel_norm": sim.y_rel.norm(),
            "control_norm": sim.control.norm(),
            "initial_error_norm": float(
                np.sqrt(
                    np.dot(sc.grid.eigenvalues * sim.initial_error.displacement,
                           sim.initial_error.displacement)
                    + np.dot(sim.initial_error.velocity, sim.initial_error.velocity)
                )
            ),
        },
        wall_times=watch.laps,
    )
    report.write(os.path.join(out, "metrics.json"))
    _say(args, f"simulate: wrote truth/outputs to {out}")
    return 0


def cmd_observe(args) -> int:
    cfg = _load_config(args)
    sc = Scenario(cfg)
    out = _outdir(args)
    watch = StopWatch()
    with watch.time("simulate"):
        sim = simulate(sc)
    with watch.time("observe"):
        run = run_observer(sim.y_rel, sc.gain, sc)
    write_trajectory_csv(os.path.join(out, "observer_shifted.csv"), run.shifted)
    write_trajectory_csv(os.path.join(out, "observer_absolute.csv"), run.absolute)
    idx = np.arange(sc.tgrid.steps + 1)
    rep = compare({"observer": (idx, run.absolute.states)}, sim.truth, sc.grid)
    report = MetricsReport(
        "observe",
        cfg.to_dict(),
        metrics={
            "terminal_error": rep["terminal_errors"]["observer"],
            "mild_residual": run.residual,
            "min_gain_margin": float(np.nanmin(run.gain_margins)),
        },
        wall_times=watch.laps,
    )
    report.write(os.path.join(out, "metrics.json"))
    _say(args, f"observe: terminal error {rep['terminal_errors']['observer']:.3e}")
    return 0


def cmd_estimate_argmin(args) -> int:
    cfg = _load_config(args)
    sc = Scenario(cfg)
    out = _outdir(args)
    watch = StopWatch()
    with watch.time("simulate"):
        sim = simulate(sc)
    count = cfg.argmin_samples
    indices = np.unique(np.linspace(0, sc.tgrid.steps, count + 1).round().astype(int))
    with watch.time("argmin"):
        est = argmin_estimator(sim.y_rel, indices.tolist(), sc)
    write_signal_rows = np.concatenate(
        [est.times[:, None], est.absolute_states], axis=1
    )
    path = os.path.join(out, "argmin_absolute.csv")
    n = sc.grid.mode_count
    header = (
        "t,"
        + ",".join(f"a_{k}" for k in range(1, n + 1))
        + ","
        + ",".join(f"b_{k}" for k in range(1, n + 1))
    )
    with open(path, "w", newline="\n") as fh:
        fh.write(header + "\n")
        for row in write_signal_rows:
            fh.write(",".join(f"{x:.17g}" for x in row) + "\n")
    rep = compare({"argmin": (est.indices, est.absolute_states)}, sim.truth, sc.grid)
    report = MetricsReport(
        "estimate-argmin",
        cfg.to_dict(),
        metrics={
            "terminal_error": rep["terminal_errors"]["argmin"],
            "grad_norms": est.grad_norms.tolist(),
            "newton_iterations": est.newton_iterations.tolist(),
            "hessian_margins": [
                None if np.isnan(m) else m for m in est.hessian_margins
            ],
        },
        wall_times=watch.laps,
    )
    report.write(os.path.join(out, "metrics.json"))
    _say(args, f"estimate-argmin: terminal error {rep['terminal_errors']['argmin']:.3e}")
    return 0


def cmd_riccati(args) -> int:
    cfg = _load_config(args)
    sc = Scenario(cfg)
    out = _outdir(args)
    watch = StopWatch()
    with watch.time("riccati"):
        ricc = sc.riccati()
        margins = sc.riccati_margins()
    steps = sc.tgrid.steps
    samples = [i for i in (steps // 4, steps // 2, (3 * steps) // 4) if (steps - i) % 2 == 0]
    with watch.time("integral_residual"):
        residuals = {
            str(i): riccati_integral_residual(
                ricc, sc.grid, sc.meas, sc.alpha, sc.cubic_on, i,
                fine_nominal=sc.fine_nominal(),
            )
            for i in samples
        }
    write_signal_csv(
        os.path.join(out, "riccati_margins.csv"), sc.tgrid.times, margins[:, None], "margin"
    )
    report = MetricsReport(
        "riccati",
        cfg.to_dict(),
        metrics={
            "min_margin": float(margins.min()),
            "integral_residuals": residuals,
        },
        wall_times=watch.laps,
    )
    report.write(os.path.join(out, "metrics.json"))
    _say(args, f"riccati: min margin {margins.min():.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args)
    sc = Scenario(cfg)
    out = _outdir(args)
    watch = StopWatch()
    rng = np.random.default_rng(np.random.SeedSequence(entropy=sc.seed, spawn_key=(99,)))
    worst = 0.0
    details = []
    with watch.time("gradcheck"):
        for trial in range(5):
            k = sc.tgrid.steps
            n = sc.grid.mode_count
            scale = 0.02
            xi = EnergyState.from_stacked(scale * rng.standard_normal(2 * n))
            y = OutputSignal(
                sc.tgrid.prefix(k),
                scale * rng.standard_normal((k + 1, sc.meas.output_dim)),
            )
            v = ControlSignal(sc.tgrid.prefix(k), scale * rng.standard_normal((k + 1, n)))
            data = sc.ocp_data(k, xi, y)
            prob = data.problem()
            cache = prob.run(v.values, xi.stacked())
            grad_v, _ = prob.gradient(cache)
            h = rng.standard_normal(v.values.shape)
            eps = 1e-5
            jp = prob.cost_only(v.values + eps * h, xi.stacked())
            jm = prob.cost_only(v.values - eps * h, xi.stacked())
            fd = (jp - jm) / (2 * eps)
            an = control_inner(grad_v, h, prob.weights)
            rel = abs(fd - an) / max(abs(an), 1e-300)
            details.append(rel)
            worst = max(worst, rel)
    report = MetricsReport(
        "gradcheck",
        cfg.to_dict(),
        metrics={"max_relative_gradient_error": worst, "trials": details},
        wall_times=watch.laps,
    )
    report.write(os.path.join(out, "metrics.json"))
    _say(args, f"gradcheck: max relative error {worst:.3e}")
    return 0 if worst <= 1e-5 else 1


def cmd_verify(args) -> int:
    cfg = _load_config(args)
    out = _outdir(args)
    results = verify_mod.run_all(cfg, quiet=args.quiet)
    report = MetricsReport(
        "verify",
        cfg.to_dict(),
        metrics={
            r.name: {"passed": r.passed, "detail": r.detail, "seconds": r.seconds}
            for r in results
        },
    )
    report.write(os.path.join(out, "metrics.json"))
    return 0 if all(r.passed for r in results) else 1


def cmd_compare(args) -> int:
    cfg = _load_config(args)
    sc = Scenario(cfg)
    out = _outdir(args)
    watch = StopWatch()
    with watch.time("simulate"):
        sim = simulate(sc)
    idx_all = np.arange(sc.tgrid.steps + 1)
    estimates = {}
    with watch.time("observer"):
        run = run_observer(sim.y_rel, sc.gain, sc)
        estimates["observer"] = (idx_all, run.absolute.states)
    with watch.time("fixed_point"):
        fp = fixed_point_observer(sim.y_rel, sc)
        estimates["fixed_point"] = (idx_all, fp.absolute.states)
    count = cfg.argmin_samples
    indices = np.unique(np.linspace(0, sc.tgrid.steps, count + 1).round().astype(int))
    with watch.time("argmin"):
        est = argmin_estimator(sim.y_rel, indices.tolist(), sc)
        estimates["argmin"] = (est.indices, est.absolute_states)
    if not sc.cubic_on:
        with watch.time("kalman"):
            kb = kalman_bucy(sim.y_rel, sc)
            estimates["kalman"] = (idx_all, kb.states)
    rep = compare(estimates, sim.truth, sc.grid)
    rep["gain_margins_min"] = float(np.nanmin(run.gain_margins))
    report = MetricsReport("compare", cfg.to_dict(), metrics=rep, wall_times=watch.laps)
    report.write(os.path.join(out, "metrics.json"))
    _say(args, "compare: " + ", ".join(
        f"{k}={v:.3e}" for k, v in rep["pairwise_discrepancy"].items()
    ))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mortensen",
        description="Minimum-energy observer toolkit for the disturbed cubic wave equation",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "simulate": cmd_simulate,
        "observe": cmd_observe,
        "estimate-argmin": cmd_estimate_argmin,
        "riccati": cmd_riccati,
        "gradcheck": cmd_gradcheck,
        "verify": cmd_verify,
        "compare": cmd_compare,
    }
    for name, fn in commands.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="path to a ScenarioConfig JSON file")
        p.add_argument("--out", default="mortensen-out", help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument(
            "--override",
            action="append",
            metavar="KEY=VALUE",
            help="dotted-path config override (JSON-typed value)",
        )
        p.add_argument("--quiet", action="store_true")
        p.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except MortensenError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
