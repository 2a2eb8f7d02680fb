"""Command-line front end.

Exit codes: 0 success, 2 config error, 3 infeasible (schedule and
covariance only), 4 runtime failure.
"""

import argparse
import json
import math
import os
import sys

import numpy as np

from . import conic, estimation, harness, pcrb, solvers
from .config import SOLVE, load_config, require_experiment_fields
from .errors import ConfigError, SpiError
from .motion import PiecewiseConstantInput, Trajectory, sample_trajectory
from .output import fmt, fmt_rate, read_csv, write_csv, write_dat, write_json
from .rng import GaussianStream, derive_seed
from .sensors import MeasurementBatch, simulate_measurements

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_RUNTIME = 0, 2, 3, 4


def _timing(cfg, value):
    return value if cfg.record_timing else None


def _status_doc(cfg, st):
    return {
        "status": st.status,
        "certificate": st.certificate,
        "iterations": st.iterations,
        "note": st.note,
        "solve_time_s": _timing(cfg, st.wall_time),
    }


def _nominal(cfg, trial=0, ka_index=0):
    return harness.trial_setup(cfg, derive_seed(cfg.base_seed, ka_index, trial))


def cmd_schedule(cfg, args):
    if cfg.schedule.rate != SOLVE:
        raise ConfigError("schedule.rate", 'the schedule command needs schedule.rate = "solve"')
    if cfg.sensor.kind == "none":
        raise ConfigError("sensor.kind", "scheduling needs a sensor")
    prior = harness.motion_prior(cfg)
    results = []
    infeasible = False
    for i, ka in enumerate(cfg.ka):
        setup = _nominal(cfg, ka_index=i)
        sensor = harness.make_sensor(cfg)
        if cfg.schedule.mode == "constant":
            sol = harness.solve_rate(cfg, prior, ka, setup.nominal)
            entry = {"ka": ka, "mode": "constant", "rate_hz": float(fmt_rate(sol.rate)) if sol.rate else None}
        else:
            init = pcrb.initialize_known_state(ka, cfg.dimension)
            sol = solvers.solve_per_step_schedule(prior, sensor, ka, setup.nominal, init,
                                                  order=cfg.sensor.quadrature_order, rel_tol=cfg.rel_tol,
                                                  m_cap=cfg.m_cap, max_steps=args.max_steps)
            entry = {"ka": ka, "mode": "per-step", "failed_step": sol.failed_step,
                     "rates": [[float(fmt(t)), float(fmt_rate(m))] for t, m in zip(sol.times, sol.rates)]}
        entry.update(_status_doc(cfg, sol.status))
        infeasible |= sol.status.status == conic.INFEASIBLE
        results.append(entry)
    write_json(os.path.join(args.out, "schedule.json"), {"command": "schedule", "seed": cfg.base_seed,
                                                         "results": results})
    return EXIT_INFEASIBLE if infeasible else EXIT_OK


def _clean(m):
    """Zero round-off entries (below 1e-15 of the largest) for readable reports."""
    if m is None:
        return None
    if isinstance(m, list):
        return [_clean(x) for x in m]
    m = np.array(m, dtype=float)
    finite = np.isfinite(m)
    if finite.any():
        m[finite & (np.abs(m) < 1e-15 * np.abs(m[finite]).max())] = 0.0
    return m


def cmd_covariance(cfg, args):
    if not isinstance(cfg.sensor.covariance, str):
        raise ConfigError("sensor.covariance", 'the covariance command needs sensor.covariance = "solve"')
    if cfg.schedule.rate == SOLVE:
        raise ConfigError("schedule.rate", "the covariance command needs a numeric query rate")
    prior = harness.motion_prior(cfg)
    results = []
    infeasible = False
    for i, ka in enumerate(cfg.ka):
        setup = _nominal(cfg, ka_index=i)
        sol = harness.solve_cov(cfg, prior, ka, setup.nominal, mode=cfg.schedule.mode, max_steps=args.max_steps)
        entry = {"ka": ka, "mode": sol.mode, "rate_hz": cfg.schedule.rate, "threshold_ka_m": sol.threshold_ka,
                 "failed_step": sol.failed_step}
        if sol.mode == "constant":
            entry["precision"] = _clean(sol.constant_precision)
            entry["implied_cov"] = _clean(sol.constant_cov)
        else:
            entry["times"] = sol.times
            entry["precision"] = _clean(sol.precision)
            entry["implied_cov"] = _clean(sol.implied_cov)
        entry.update(_status_doc(cfg, sol.status))
        infeasible |= sol.status.status == conic.INFEASIBLE
        results.append(entry)
    write_json(os.path.join(args.out, "covariance.json"), {"command": "covariance", "seed": cfg.base_seed,
                                                           "sensor": cfg.sensor.kind, "results": results})
    return EXIT_INFEASIBLE if infeasible else EXIT_OK


def cmd_pcrb_trace(cfg, args):
    rows = []
    for i, ka in enumerate(cfg.ka):
        setup = _nominal(cfg, ka_index=i)
        times, bounds, rate, st = harness.pcrb_trace(cfg, ka, setup.nominal, args.rate_divisor)
        for k, (t, b) in enumerate(zip(times, bounds)):
            rows.append([fmt(ka), k, fmt(t), fmt(b), fmt(ka**2), int(b > ka**2 + 1e-9), fmt_rate(rate), st.status])
        if "dat" in cfg.formats and len(times):
            write_dat(os.path.join(args.out, f"pcrb_trace_ka{i}.dat"), f"t lambda_max(J^-1) ka={fmt(ka)}",
                      [times, bounds])
        if not len(times):
            rows.append([fmt(ka), "", "", "", fmt(ka**2), "", fmt_rate(rate), st.status])
    write_csv(os.path.join(args.out, "pcrb_trace.csv"),
              ["ka", "step", "t", "bound", "ka_sq", "violation", "rate_hz", "status"], rows)
    return EXIT_OK


def _resolve_sensor_and_rate(cfg, prior, ka, nominal):
    """Concrete (sensor, rate, status) for simulation: solve whichever is 'solve'."""
    if cfg.sensor.kind == "none":
        raise ConfigError("sensor.kind", "simulation needs a sensor")
    if cfg.schedule.rate == SOLVE:
        rate, st = harness.resolve_rate(cfg, prior, ka, nominal)
        return harness.make_sensor(cfg), rate, st
    rate = float(cfg.schedule.rate)
    if isinstance(cfg.sensor.covariance, str):
        sol = harness.solve_cov(cfg, prior, ka, nominal)
        cov = sol.constant_cov
        if not sol.status.ok or cov is None or not np.all(np.isfinite(cov)):
            return None, rate, sol.status
        return harness.make_sensor(cfg, cov), rate, sol.status
    return harness.make_sensor(cfg), rate, conic.SolveStatus(conic.OPTIMAL)


def cmd_simulate(cfg, args):
    prior = harness.motion_prior(cfg)
    i, trial = args.ka_index, args.trial
    if not 0 <= i < len(cfg.ka):
        raise ConfigError("accuracy.ka", f"--ka-index {i} out of range")
    ka = cfg.ka[i]
    seed = derive_seed(cfg.base_seed, i, trial)
    setup = harness.trial_setup(cfg, seed)
    sensor, rate, st = _resolve_sensor_and_rate(cfg, prior, ka, setup.nominal)
    if sensor is None or not st.ok:
        raise SpiError(f"cannot simulate: parameter solve returned {st.status}: {st.certificate}")
    times = harness.query_times(rate, cfg.motion.duration)
    grid = harness._union_times(setup.grid, times)
    truth = sample_trajectory(prior, setup.x0, setup.u, grid, derive_seed(seed, harness.SEED_TRUTH))
    batch = simulate_measurements(sensor, times, truth.interpolate(times),
                                  GaussianStream(derive_seed(seed, harness.SEED_MEAS, 0)))
    d = cfg.dimension
    axes = [f"x{j + 1}" for j in range(d)]
    write_csv(os.path.join(args.out, "truth.csv"), ["t"] + axes,
              [[fmt(t, 17)] + [fmt(v, 17) for v in p] for t, p in zip(truth.times, truth.positions)])
    write_csv(os.path.join(args.out, "inputs.csv"), ["t"] + [f"u{j + 1}" for j in range(d)],
              [[fmt(t, 17)] + [fmt(v, 17) for v in u] for t, u in zip(setup.u.breaks, setup.u.values)])
    if batch.kind == "position":
        write_csv(os.path.join(args.out, "measurements.csv"), ["t"] + [f"y{j + 1}" for j in range(d)],
                  [[fmt(t, 17)] + [fmt(v, 17) for v in y] for t, y in zip(batch.times, batch.values)])
    else:
        write_csv(os.path.join(args.out, "measurements.csv"), ["t", "anchor", "range"],
                  [[fmt(t, 17), int(a), fmt(v, 17)] for t, a, v in zip(batch.times, batch.anchor_index, batch.values)])
    x0_mean = setup.x0 + ka * GaussianStream(derive_seed(seed, harness.SEED_X0)).standard_normal(d)
    cov = sensor.cov if batch.kind == "position" else sensor.variance
    write_json(os.path.join(args.out, "simulate.json"), {
        "command": "simulate", "ka": ka, "trial": trial, "seed": seed, "rate_hz": rate,
        "sensor": batch.kind, "sensor_covariance": cov, "x0": setup.x0, "x0_prior_mean": x0_mean,
        "n_measurements": len(batch), "status": st.status,
    })
    return EXIT_OK


def cmd_estimate(cfg, args):
    src = args.input_dir or args.out
    try:
        with open(os.path.join(src, "simulate.json"), encoding="utf-8") as fh:
            meta = json.load(fh)
        _, meas = read_csv(os.path.join(src, "measurements.csv"))
        _, inputs = read_csv(os.path.join(src, "inputs.csv"))
    except OSError as exc:
        raise SpiError(f"missing simulation output in {src}: {exc.strerror}") from None
    d = cfg.dimension
    prior = harness.motion_prior(cfg)
    sensor = harness.make_sensor(cfg, np.array(meta["sensor_covariance"], dtype=float))
    m = np.array(meas, dtype=float) if meas else np.zeros((0, d + 1))
    if meta["sensor"] == "position":
        batch = MeasurementBatch("position", m[:, 0], m[:, 1:])
    else:
        batch = MeasurementBatch("range", m[:, 0], m[:, 2], m[:, 1].astype(int))
    u_arr = np.array(inputs, dtype=float)
    u = PiecewiseConstantInput(u_arr[:, 0], u_arr[:, 1:])
    ka = float(meta["ka"])
    problem = estimation.build_problem(prior, sensor, batch, u=u, t0=0.0,
                                       x0_mean=np.array(meta["x0_prior_mean"]), x0_info=np.eye(d) / ka**2)
    res = estimation.solve_gauss_newton(problem)
    est = res.estimate
    write_csv(os.path.join(args.out, "estimate.csv"), ["t"] + [f"x{j + 1}" for j in range(d)],
              [[fmt(t, 17)] + [fmt(v, 17) for v in p] for t, p in zip(est.times, est.positions)])
    report = {"command": "estimate", "iterations": res.iterations, "converged": res.converged,
              "final_cost": res.final_cost, "n_states": len(est), "rmse_m": None}
    truth_path = os.path.join(src, "truth.csv")
    if os.path.exists(truth_path):
        _, rows = read_csv(truth_path)
        t = np.array(rows, dtype=float)
        truth = Trajectory(t[:, 0], t[:, 1:], np.zeros((len(t), d)))
        report["rmse_m"] = estimation.rmse(est, truth)
    write_json(os.path.join(args.out, "estimate.json"), report)
    return EXIT_OK


def experiment_rows(cfg, kind, rows):
    if kind == "rate-sweep":
        header = ["ka", "variant", "trial", "solved_rate_hz"]
        rate_of = {harness.OPTIMAL_VARIANT: 1.0, harness.SUBOPTIMAL_VARIANT: 1.0 / cfg.rate_divisor}
        solved = lambda r: [fmt_rate(r.solved[0] * rate_of[r.variant])]  # noqa: E731
    else:
        header = ["ka", "variant", "trial"] + harness.cov_columns(cfg)
        fac = {harness.OPTIMAL_VARIANT: 1.0, harness.SUBOPTIMAL_VARIANT: cfg.cov_factor}
        solved = lambda r: [fmt(v * fac[r.variant]) for v in r.solved]  # noqa: E731
    header += ["rmse_m", "status", "solver_time_s", "note"]
    out = [[fmt(r.ka), r.variant, r.trial] + solved(r) + [fmt(r.rmse), r.status, fmt(r.solver_time), r.note]
           for r in rows]
    return header, out


def cmd_experiment(cfg, args):
    kind = args.kind or cfg.experiment
    require_experiment_fields(cfg, kind)
    rows = harness.run_experiment(cfg, kind, jobs=args.jobs)
    header, out = experiment_rows(cfg, kind, rows)
    stem = kind.replace("-", "_")
    if "csv" in cfg.formats:
        write_csv(os.path.join(args.out, f"{stem}.csv"), header, out)
    means = [r for r in rows if r.trial == "mean"]
    if "dat" in cfg.formats:
        for variant in (harness.OPTIMAL_VARIANT, harness.SUBOPTIMAL_VARIANT):
            sel = [r for r in means if r.variant == variant]
            write_dat(os.path.join(args.out, f"{stem}_{variant}.dat"), f"ka mean_rmse_m ({variant})",
                      [[r.ka for r in sel], [r.rmse for r in sel]])
    if "json" in cfg.formats:
        summary = [{"ka": r.ka, "variant": r.variant, "mean_rmse_m": r.rmse, "status": r.status,
                    "solved": r.solved, "rmse_over_ka": r.rmse / r.ka if math.isfinite(r.rmse) else None}
                   for r in means]
        write_json(os.path.join(args.out, f"{stem}_summary.json"),
                   {"command": "experiment", "kind": kind, "seed": cfg.base_seed, "trials": cfg.trials,
                    "means": summary})
    return EXIT_OK


COMMANDS = {
    "schedule": cmd_schedule,
    "covariance": cmd_covariance,
    "pcrb-trace": cmd_pcrb_trace,
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "experiment": cmd_experiment,
}


def _u64(text):
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="experiment config (JSON)")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory (overrides output.directory)")
    common.add_argument("--seed", type=_u64, default=argparse.SUPPRESS, help="base seed (overrides trials.base_seed)")
    common.add_argument("--jobs", type=_positive_int, default=argparse.SUPPRESS, help="parallel worker processes")

    p = argparse.ArgumentParser(prog="spi", description="Sensor parameter identification for accuracy-bounded "
                                "state estimation.", parents=[common])
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("schedule", parents=[common], help="solve the sensor query rate or schedule")
    s.add_argument("--max-steps", type=int, default=None, help="cap on per-step schedule length")
    s = sub.add_parser("covariance", parents=[common], help="solve the sensor noise covariance")
    s.add_argument("--max-steps", type=int, default=None, help="cap on per-step solves")
    s = sub.add_parser("pcrb-trace", parents=[common], help="emit the bound trace lambda_max(J^-1) over time")
    s.add_argument("--rate-divisor", type=float, default=1.0, help="evaluate at rate / divisor")
    s = sub.add_parser("simulate", parents=[common], help="simulate ground truth and measurements")
    s.add_argument("--ka-index", type=int, default=0)
    s.add_argument("--trial", type=int, default=0)
    s = sub.add_parser("estimate", parents=[common], help="MAP estimate from simulate output")
    s.add_argument("--input-dir", default=None, help="directory with simulate output (default: --out)")
    s = sub.add_parser("experiment", parents=[common], help="run a rate or covariance sweep")
    s.add_argument("--kind", choices=["rate-sweep", "covariance-sweep"], default=None)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    if not hasattr(args, "config"):
        print("error: --config is required", file=sys.stderr)
        return EXIT_CONFIG
    args.jobs = getattr(args, "jobs", 1)
    try:
        cfg = load_config(args.config)
        if hasattr(args, "seed"):
            cfg.base_seed = args.seed
        args.out = getattr(args, "out", None) or cfg.output_dir
        os.makedirs(args.out, exist_ok=True)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SpiError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
