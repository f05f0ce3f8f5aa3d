"""Batch command-line entry point.

Subfunctions map one-to-one onto the pipeline stages: ``identify`` fits a
control model from plant data, ``assess`` quantifies flexibility for one
window, ``simulate``/``baseline`` run the 72 h closed loop, and ``verify``
exercises the randomized oracle suites. Everything emits plot-ready JSON/CSV;
there is no interactive mode.

Exit codes: 0 success, 2 configuration error, 3 solver/identification
failure, 4 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_VERIFY = 4


class ConfigError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flexassess",
        description="Assess and exercise building demand-response flexibility.")
    parser.add_argument("--mode", required=True,
                        choices=["identify", "assess", "simulate", "baseline",
                                 "verify"])
    parser.add_argument("--weather", help="weather CSV (default: bundled)")
    parser.add_argument("--price", help="price CSV (default: bundled)")
    parser.add_argument("--model", help="thermal model JSON (default: bundled fit)")
    parser.add_argument("--scenario", default="1",
                        help="1..5, 'all', or 'custom' (needs --delta-amb/--delta-sol)")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--gamma2", type=float, default=None,
                        help="fix the ramp limit instead of the default ratio policy")
    parser.add_argument("--fixed-p", action="store_true",
                        help="precompute and freeze the error-rejection matrix")
    parser.add_argument("--causal-k", action="store_true",
                        help="restrict the DR gain to already-applied entries")
    parser.add_argument("--horizon-nominal", type=float, default=12.0,
                        help="scheduling horizon, hours")
    parser.add_argument("--horizon-flex", type=float, default=2.0,
                        help="flexibility window, hours")
    parser.add_argument("--hours", type=float, default=72.0,
                        help="simulation length, hours")
    parser.add_argument("--delta-amb", type=float, default=None)
    parser.add_argument("--delta-sol", type=float, default=None)
    parser.add_argument("--order", type=int, default=2,
                        help="identified model order")
    parser.add_argument("--train", help="identification records CSV")
    parser.add_argument("--generate", action="store_true",
                        help="synthesize identification data from the bundled plant")
    parser.add_argument("--config", help="JSON file whose entries override flags")
    return parser


def apply_config_file(args: argparse.Namespace) -> argparse.Namespace:
    if not args.config:
        return args
    try:
        with open(args.config) as fh:
            overrides = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config file: {exc}") from None
    for key, value in overrides.items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            raise ConfigError(f"unknown config key {key!r}")
        setattr(args, attr, value)
    return args


def _load_series(args):
    from . import sim
    if args.weather or args.price:
        if not (args.weather and args.price):
            raise ConfigError("--weather and --price must be given together")
        for path in (args.weather, args.price):
            if not os.path.exists(path):
                raise ConfigError(f"file not found: {path}")
        return sim.load_series(args.weather, args.price)
    return sim.bundled_series()


def _load_building(args):
    from . import thermal
    truth = thermal.default_truth_model()
    if args.model:
        if not os.path.exists(args.model):
            raise ConfigError(f"file not found: {args.model}")
        with open(args.model) as fh:
            control = thermal.ThermalModel.from_json(fh.read())
    else:
        _, control = thermal.default_building_pair()
    return truth, control


def _scenario_numbers(selector: str) -> list[int]:
    if selector == "all":
        return [1, 2, 3, 4, 5]
    try:
        number = int(selector)
    except ValueError:
        raise ConfigError(f"bad scenario selector {selector!r}") from None
    if number not in (1, 2, 3, 4, 5):
        raise ConfigError("scenario number must be 1..5")
    return [number]


def _scenario_config(args, number: int | None):
    from . import sim
    overrides = dict(
        nominal_horizon_hours=args.horizon_nominal,
        flex_horizon_hours=args.horizon_flex,
        sim_hours=args.hours,
        fixed_p_mode=args.fixed_p,
        causal_k=args.causal_k,
        seed=args.seed,
    )
    if args.scenario == "custom":
        if args.delta_amb is None or args.delta_sol is None:
            raise ConfigError("custom scenario requires --delta-amb and --delta-sol")
        return sim.ScenarioConfig(label="custom", delta_amb=args.delta_amb,
                                  delta_sol=args.delta_sol, **overrides)
    return sim.scenario_preset(number, **overrides)


def cmd_identify(args) -> int:
    from . import thermal
    if args.train:
        if not os.path.exists(args.train):
            raise ConfigError(f"training file not found: {args.train}")
        records = []
        with open(args.train, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            expected = ["room_c", "u_w", "w_w", "ambient_c", "ghi_wm2"]
            if [c.strip() for c in header] != expected:
                raise ConfigError(
                    f"training CSV must have columns {','.join(expected)}")
            for row in reader:
                records.append((float(row[0]), float(row[1]), float(row[2]),
                                np.array([float(row[3]), float(row[4])])))
    elif args.generate:
        truth = thermal.default_truth_model()
        records = thermal.generate_identification_records(truth, seed=args.seed)
    else:
        raise ConfigError("identify needs --train RECORDS.csv or --generate")

    split = int(0.8 * len(records))
    try:
        model = thermal.identify_model(records[:split], order=args.order)
    except thermal.IdentificationError as exc:
        print(f"identification failed: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    rmse = float(np.sqrt(np.mean(
        thermal.one_step_residuals(model, records[split:]) ** 2)))
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "model.json")
    with open(path, "w") as fh:
        fh.write(model.to_json())
    print(f"wrote {path}")
    print(f"held-out one-step RMSE: {rmse:.4f} C")
    return EXIT_OK


def cmd_assess(args) -> int:
    from . import sim
    from .constraints import (build_flexibility_polytope,
                              build_operating_constraints, build_placement)
    from .constraints import DisturbanceUncertainty
    from .control import compute_nominal_schedule
    from .robust import (AssessmentSets, FixedGamma2, RatioGamma2,
                         assess_flexibility, precompute_disturbance_policy)
    from .thermal import lift_dynamics

    series = _load_series(args)
    truth, control = _load_building(args)
    number = None if args.scenario == "custom" else _scenario_numbers(args.scenario)[0]
    if args.scenario == "all":
        raise ConfigError("assess works on a single scenario")
    config = _scenario_config(args, number)

    n_flex = int(round(config.flex_horizon_hours * 3600 / sim.STEP_SECONDS))
    n_sched = min(int(round(config.nominal_horizon_hours * 3600
                            / sim.STEP_SECONDS)), len(series))
    d0 = np.array([series.ambient[0], series.irradiance[0]])
    x0, _ = sim.steady_state_with_room_temp(control, config.setpoint, d0)
    d_f = series.disturbance(0, n_sched)
    pv_f = sim.pv_available(series.irradiance[:n_sched])
    sched = compute_nominal_schedule(
        control, x0, series.price[:n_sched], d_f, pv_f, config.comfort_band,
        config.total_power_cap_w, setpoint=config.setpoint,
        tradeoff_lambda=config.tradeoff_lambda)

    amb_c = series.ambient[:n_flex] - config.bounds_for_assessment()[0]
    irr_c = np.maximum(series.irradiance[:n_flex]
                       - config.bounds_for_assessment()[1], 0.0)
    lo, hi = config.comfort_band
    oper = build_operating_constraints(
        (lo + config.comfort_backoff_c, hi - config.comfort_backoff_c),
        sim.pv_available(irr_c), config.total_power_cap_w, n_flex, control)
    dist = DisturbanceUncertainty.from_ambient_solar(
        *config.bounds_for_assessment(), n_flex)
    sets = AssessmentSets(
        flex=build_flexibility_polytope(0.0, 0.0, n_flex,
                                        M=build_placement(n_flex, 0, n_flex)),
        dist=dist, oper=oper)
    lifted = lift_dynamics(control, n_flex)
    fixed = precompute_disturbance_policy(lifted, sets) if args.fixed_p else None
    policy = (FixedGamma2(args.gamma2) if args.gamma2 is not None
              else RatioGamma2(config.gamma2_ratio))
    assessment = assess_flexibility(
        x0, sched.w_bar[:n_flex], d_f[:n_flex].ravel(), lifted, sets,
        gamma2_policy=policy, fixed=fixed, causal_K=args.causal_k)

    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "assessment.json")
    with open(path, "w") as fh:
        fh.write(assessment.to_json())
    if not assessment.feasible:
        print("nominal problem infeasible: zero flexibility certified",
              file=sys.stderr)
    print(f"gamma1* = {assessment.gamma1_star:.1f} W, "
          f"gamma2* = {assessment.gamma2_star:.1f} W/step, "
          f"window steps [0, {n_flex}), "
          f"LP solves {assessment.diagnostics.get('lp_solves')}")
    print(f"wrote {path}")
    return EXIT_OK


def _simulate_one(payload):
    from . import sim
    config, series, building, baseline, out = payload
    runner = sim.run_baseline if baseline else sim.run_scenario
    report = runner(config, series, building)
    suffix = config.label.replace(" ", "_")
    if baseline:
        suffix += "_baseline"
    paths = sim.save_report(report, out, suffix=suffix)
    return config.label, report.metrics(), paths


def cmd_simulate(args, baseline: bool) -> int:
    series = _load_series(args)
    building = _load_building(args)
    if args.scenario == "custom":
        configs = [_scenario_config(args, None)]
    else:
        configs = [_scenario_config(args, n)
                   for n in _scenario_numbers(args.scenario)]
    payloads = [(cfg, series, building, baseline, args.out) for cfg in configs]
    results = []
    if len(payloads) > 1:
        with ProcessPoolExecutor(max_workers=min(5, os.cpu_count() or 1)) as pool:
            results = list(pool.map(_simulate_one, payloads))
    else:
        results = [_simulate_one(payloads[0])]
    for label, metrics, paths in results:
        print(f"{label}: violations "
              f"{metrics['comfort_violation_degree_hours']:.2f} degC-h, "
              f"peak energy {metrics['peak_hour_grid_energy_kwh']:.2f} kWh, "
              f"DR delivered {metrics['delivered_dr_energy_kwh']:.2f} kWh")
        for path in paths:
            print(f"  wrote {path}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verification import run_verification
    report = run_verification(seed=args.seed)
    print(report.format_matrix())
    return EXIT_OK if report.all_passed else EXIT_VERIFY


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args = apply_config_file(args)
        if args.mode == "identify":
            return cmd_identify(args)
        if args.mode == "assess":
            return cmd_assess(args)
        if args.mode == "simulate":
            return cmd_simulate(args, baseline=False)
        if args.mode == "baseline":
            return cmd_simulate(args, baseline=True)
        if args.mode == "verify":
            return cmd_verify(args)
        raise ConfigError(f"unknown mode {args.mode!r}")
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # solver and IO failures
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
