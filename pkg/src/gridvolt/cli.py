"""Command line entry point.

Subcommands: run, sweep, validate, gen-network, gen-profiles. A JSON config
file (--config) carries the same keys as the flags; explicit flags win.
Outputs are plot-ready CSV/JSON only. Exit codes: 0 success, 2 bad
configuration, 3 simulation failure. GRIDVOLT_LOG sets the log level.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import netmodel, simeng
from .controllers import DroopSettings
from .netmodel import NetworkError

log = logging.getLogger("gridvolt.cli")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SIM = 3


class ConfigError(Exception):
    pass


def _setup_logging():
    level = os.environ.get("GRIDVOLT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON config file; flags override its keys")
    p.add_argument("--network", help="network JSON path")
    p.add_argument("--profiles", help="demand profiles CSV (omit for synthetic)")
    p.add_argument("--pv-profiles", help="PV availability CSV (omit for synthetic)")
    p.add_argument("--mode", choices=["legacy", "autonomous", "cic", "cic-fair"])
    p.add_argument("--alpha", type=float, help="fairness weight for cic-fair")
    p.add_argument("--cable", help="override every segment's cable")
    p.add_argument("--penetration", type=float, help="PV penetration in (0, 1]; 0 for none")
    p.add_argument("--scenarios", type=int, help="random placements per level (default 18)")
    p.add_argument("--seed", type=int, help="master seed (default 0)")
    p.add_argument("--out", help="output directory (default gridvolt_out)")
    p.add_argument("--jobs", type=int, help="parallel workers (default all cores)")
    p.add_argument("--balanced", action="store_true", default=None)
    p.add_argument("--unbalanced", dest="balanced", action="store_false")
    p.add_argument("--placement", choices=["random", "cluster_near", "cluster_far"])
    p.add_argument("--droop", help="JSON file overriding droop setpoints")
    p.add_argument("--loss-weight", type=float, help="line-loss weight in the objective")


def _merged(args: argparse.Namespace) -> dict:
    cfg = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        with open(path) as fh:
            cfg = json.load(fh)
    for key, val in vars(args).items():
        if key in ("command", "config", "func"):
            continue
        if val is not None:
            cfg[key.replace("-", "_")] = val
    cfg.setdefault("seed", 0)
    cfg.setdefault("out", "gridvolt_out")
    cfg.setdefault("mode", "cic")
    cfg.setdefault("alpha", 0.0)
    cfg.setdefault("scenarios", 18)
    cfg.setdefault("jobs", os.cpu_count() or 1)
    cfg.setdefault("placement", "random")
    return cfg


def _settings(cfg: dict) -> simeng.SimSettings:
    droop = DroopSettings()
    if cfg.get("droop"):
        path = Path(cfg["droop"])
        if not path.exists():
            raise ConfigError(f"droop override file not found: {path}")
        with open(path) as fh:
            droop = DroopSettings.from_dict(json.load(fh))
    s = simeng.SimSettings(droop=droop, balanced=bool(cfg.get("balanced", True)))
    if cfg.get("alpha") is not None:
        s.alpha = float(cfg["alpha"])
    if cfg.get("loss_weight") is not None:
        s.loss_weight = float(cfg["loss_weight"])
    return s


def _load_network(cfg: dict) -> netmodel.Network:
    if not cfg.get("network"):
        raise ConfigError("--network is required")
    path = Path(cfg["network"])
    if not path.exists():
        raise ConfigError(f"network file not found: {path}")
    net = netmodel.load_network(path)
    if cfg.get("cable"):
        cable = netmodel.cable_lookup(cfg["cable"])
        lines = [replace(seg, cable=cable) for seg in net.lines]
        net = netmodel.Network(
            buses=net.buses, lines=lines, slack=net.slack,
            transformer_kva=net.transformer_kva, base_voltage_v=net.base_voltage_v,
        )
    return net


def _load_profiles(cfg: dict, net: netmodel.Network) -> simeng.Profiles:
    if cfg.get("profiles"):
        path = Path(cfg["profiles"])
        if not path.exists():
            raise ConfigError(f"profiles file not found: {path}")
        pv = cfg.get("pv_profiles")
        if pv and not Path(pv).exists():
            raise ConfigError(f"PV profiles file not found: {pv}")
        return simeng.load_profiles(path, pv, seed=int(cfg["seed"]))
    return simeng.synthetic_profiles(30, seed=int(cfg["seed"]))


def _mode_key(mode: str) -> str:
    return mode.replace("-", "_")


def _pick_scenario(cfg: dict, net: netmodel.Network) -> simeng.Scenario:
    pen = float(cfg.get("penetration") or 0.0)
    mode = _mode_key(cfg["mode"])
    alpha = float(cfg["alpha"]) if mode == "cic_fair" else 0.0
    if pen == 0.0:
        return simeng.Scenario("none", 0.0, (), "none", mode, alpha)
    placements = simeng.generate_scenarios(net, pen, n_random=1, seed=int(cfg["seed"]))
    wanted = {"cluster_near": "near", "cluster_far": "far", "random": "rand00"}[
        cfg["placement"]
    ]
    scen = next(s for s in placements if s.id == wanted)
    return scen.with_mode(mode, alpha)


def cmd_run(args) -> int:
    cfg = _merged(args)
    net = _load_network(cfg)
    profiles = _load_profiles(cfg, net)
    settings = _settings(cfg)
    scen = _pick_scenario(cfg, net)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)

    baseline = simeng.run_baseline(net, profiles, settings)
    result = simeng.run_day(net, scen, profiles, settings, seed=int(cfg["seed"]))
    summary = simeng.summarize_run(result, baseline, settings)
    simeng.write_dayresult_csv(result, out / "dayresult.csv")
    simeng.write_events_csv(result, out / "events.csv")
    payload = simeng.summary_to_dict(summary)
    payload["seed"] = int(cfg["seed"])
    simeng.write_json(payload, out / "summary.json")
    print(f"utilized {summary.utilized_pct:.2f}% | peak {summary.peak_kva:.1f} kVA | "
          f"curtailed {summary.curtail_kwh:.2f} kWh")
    return EXIT_OK


def _grid(cfg: dict) -> list[float]:
    raw = cfg.get("grid") or [round(0.1 * k, 1) for k in range(1, 11)]
    grid = [float(g) for g in raw]
    if any(not (0.0 < g <= 1.0) for g in grid):
        raise ConfigError("penetration grid must lie in (0, 1]")
    return grid


def cmd_sweep(args) -> int:
    cfg = _merged(args)
    net = _load_network(cfg)
    profiles = _load_profiles(cfg, net)
    settings = _settings(cfg)
    modes = [_mode_key(m) for m in (cfg.get("modes") or ["legacy", "autonomous", "cic"])]
    grid = _grid(cfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)

    sweep = simeng.run_sweep(
        net, profiles, modes, grid,
        n_random=int(cfg["scenarios"]), seed=int(cfg["seed"]),
        settings=settings, jobs=int(cfg["jobs"]), alpha=float(cfg["alpha"]),
    )
    cables = sorted({seg.cable.label for seg in net.lines})
    cable = "+".join(cables)
    with open(out / "sweep_rows.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["mode", "cable", "penetration", "scenario", "placement", "pv_kwh",
             "curtail_kwh", "loss_kwh", "utilized_kwh", "utilized_pct", "peak_kva",
             "any_curtailment", "sigma", "trip_avg", "trip_instant", "reconnect"]
        )
        for r in sweep.rows:
            w.writerow(
                [r.mode, cable, r.penetration, r.scenario_id, r.placement,
                 repr(r.pv_kwh), repr(r.curtail_kwh), repr(r.loss_kwh),
                 repr(r.utilized_kwh), repr(r.utilized_pct), repr(r.peak_kva),
                 int(r.any_curtailment), "" if r.sigma is None else repr(r.sigma),
                 r.n_trip_avg, r.n_trip_instant, r.n_reconnect]
            )

    def cap(v):
        return "above grid max" if v is None else v

    hosting = {
        mode: {"cap_min": cap(cm), "cap_max": cap(cx)}
        for mode, (cm, cx) in sweep.hosting.items()
    }
    simeng.write_json(
        {
            "cable": cable,
            "grid": sweep.grid,
            "modes": sweep.modes,
            "seed": int(cfg["seed"]),
            "baseline_loss_kwh": sweep.baseline_loss_kwh,
            "hosting": hosting,
            "mean_utilized_pct": {
                mode: {
                    str(pen): float(
                        np.mean([r.utilized_pct for r in sweep.rows_for(mode, pen)])
                    )
                    for pen in sweep.grid
                }
                for mode in sweep.modes
            },
        },
        out / "hosting.json",
    )

    if "cic" in modes and "autonomous" in modes:
        with open(out / "mode_diff.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["penetration", "d_curtail_kwh", "d_loss_kwh"])
            for pen in grid:
                cic_rows = sweep.rows_for("cic", pen)
                aut_rows = sweep.rows_for("autonomous", pen)
                w.writerow(
                    [pen,
                     repr(float(np.mean([r.curtail_kwh for r in cic_rows])
                               - np.mean([r.curtail_kwh for r in aut_rows]))),
                     repr(float(np.mean([r.loss_kwh for r in cic_rows])
                               - np.mean([r.loss_kwh for r in aut_rows])))]
                )
    print(f"{len(sweep.rows)} runs; hosting: {hosting}")
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = _merged(args)
    net = _load_network(cfg)
    profiles = _load_profiles(cfg, net)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    pens = [float(p) for p in (cfg.get("penetrations") or [0.3, 0.6, 0.9])]

    report: dict = {"penetrations": pens, "seed": int(cfg["seed"])}
    if "balanced" in cfg:
        variants = ["balanced"] if cfg["balanced"] else ["unbalanced"]
    else:
        variants = ["balanced", "unbalanced"]
    for variant in variants:
        settings = _settings(cfg)
        settings.balanced = variant == "balanced"
        block = {}
        for pen in pens:
            placements = simeng.generate_scenarios(net, pen, n_random=1, seed=int(cfg["seed"]))
            scen = next(s for s in placements if s.id == "rand00").with_mode("cic")
            result = simeng.run_day(net, scen, profiles, settings, seed=int(cfg["seed"]))
            sigma, dvp, dvm = simeng.relative_error_sigma(
                result.v_model_mag, result.v_oracle_mag
            )
            block[f"{round(pen * 100)}"] = {
                "sigma": sigma, "max_dv_plus": dvp, "max_dv_minus": dvm,
                "infeasible_steps": len(result.infeasible_steps),
            }
        report[variant] = block
    simeng.write_json(report, out / "validation.json")
    for variant in variants:
        for pen, row in report[variant].items():
            print(f"{variant} {pen}%: sigma={row['sigma']:.3e}")
    return EXIT_OK


def cmd_gen_network(args) -> int:
    cfg = _merged(args)
    net = netmodel.generate_feeder(
        n_buses=int(cfg.get("buses", 30)),
        spacing_km=float(cfg.get("spacing", 0.04)),
        cable=cfg.get("cable") or "ow95",
        customers_per_bus=int(cfg.get("customers_per_bus", 1)),
        seed=int(cfg["seed"]),
        transformer_kva=float(cfg.get("transformer_kva", 150.0)),
    )
    out = Path(cfg.get("out_file") or "network.json")
    netmodel.save_network(net, out)
    print(f"wrote {out} ({net.n_buses} buses, {len(net.customers)} customers)")
    return EXIT_OK


def cmd_gen_profiles(args) -> int:
    cfg = _merged(args)
    n = int(cfg.get("customers", 30))
    profiles = simeng.synthetic_profiles(n, seed=int(cfg["seed"]))
    out_demand = Path(cfg.get("out_file") or "profiles.csv")
    out_pv = out_demand.with_name(out_demand.stem + "_pv" + out_demand.suffix)
    knots = list(profiles.minutes[::30])
    if knots[-1] != profiles.minutes[-1]:
        knots.append(int(profiles.minutes[-1]))  # cover the horizon end, no extrapolation

    def write(path, mat):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["timestamp", "customer_id", "p_kw"])
            for i in range(mat.shape[0]):
                for m in knots:
                    t = int(m)
                    col = int(np.where(profiles.minutes == m)[0][0])
                    w.writerow([f"{t // 60:02d}:{t % 60:02d}", i, repr(float(mat[i, col]))])

    write(out_demand, profiles.demand_kw)
    write(out_pv, profiles.pv_kw)
    print(f"wrote {out_demand} and {out_pv} ({n} customers, 30-min knots)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gridvolt")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate one day for one scenario")
    _add_common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="penetration x scenario x mode sweep")
    _add_common(p)
    p.add_argument("--modes", nargs="+", help="modes to compare")
    p.add_argument("--grid", nargs="+", type=float, help="penetration grid")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("validate", help="model-vs-oracle voltage error report")
    _add_common(p)
    p.add_argument("--penetrations", nargs="+", type=float)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("gen-network", help="write a synthetic feeder JSON")
    _add_common(p)
    p.add_argument("--buses", type=int, default=30)
    p.add_argument("--spacing", type=float, default=0.04)
    p.add_argument("--customers-per-bus", type=int, default=1)
    p.add_argument("--transformer-kva", type=float, default=150.0)
    p.add_argument("--out-file", help="output path (default network.json)")
    p.set_defaults(func=cmd_gen_network)

    p = sub.add_parser("gen-profiles", help="write synthetic demand/PV CSVs")
    _add_common(p)
    p.add_argument("--customers", type=int, default=30)
    p.add_argument("--out-file", help="output path (default profiles.csv)")
    p.set_defaults(func=cmd_gen_profiles)
    return ap


def main(argv=None) -> int:
    _setup_logging()
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, NetworkError, FileNotFoundError, json.JSONDecodeError, KeyError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # simulation-side failures
        log.exception("simulation failed")
        print(f"simulation error: {exc}", file=sys.stderr)
        return EXIT_SIM


if __name__ == "__main__":
    sys.exit(main())
