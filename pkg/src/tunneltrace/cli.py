"""Command-line front end.

Verbs: simulate, identify, estimate, evaluate, report, reproduce-paper.
Exit codes: 0 success, 2 configuration/input error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .cascade import discretize, observability_check, open_loop_simulate
from .dataio import SensorLayout, load_run, save_run
from .errors import (
    AssemblyError,
    ConfigurationError,
    DataFormatError,
    EstimationError,
    IdentificationError,
)
from .mhe import PAPER_SENSOR_CASES, MheConfig, robustness_sweep, run_offline
from .modelio import load_tunnel_model, save_tunnel_model
from .pipeline import (
    ExperimentSpec,
    identify_tunnel_model,
    load_experiment_spec,
    load_sim_config,
    load_trace,
    rmse_table,
    run_experiment,
    save_plot_data,
    save_rmse_csv,
    save_trace,
)
from .simulate import SimConfig, simulate_ground_truth
from .sysid import IdentificationConfig, rmse

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _parse_nodes(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise ConfigurationError(f"cannot parse node list {text!r}") from None


def cmd_simulate(args: argparse.Namespace) -> int:
    config = load_sim_config(args.config) if args.config else SimConfig()
    run = simulate_ground_truth(config)
    save_run(run, args.out)
    print(f"wrote {len(run)} samples x {run.node_count} nodes to {args.out}")
    return EXIT_OK


def cmd_identify(args: argparse.Namespace) -> int:
    runs = [load_run(p) for p in args.train]
    node_count = runs[0].node_count
    layout = SensorLayout(_parse_nodes(args.sensors), node_count)
    id_cfg = IdentificationConfig(order=args.order, hankel_rows=args.hankel_rows)
    model = identify_tunnel_model(runs, id_cfg, frozenset(_parse_nodes(args.fire_nodes)), layout)
    save_tunnel_model(model, args.out)
    print(f"identified {2 * node_count} node models -> {args.out}")
    return EXIT_OK


def _estimate_common(args: argparse.Namespace):
    model = load_tunnel_model(args.model)
    run = load_run(args.data)
    sensors = _parse_nodes(args.sensors)
    if sensors and max(sensors) > run.node_count:
        raise ConfigurationError(
            f"sensor index {max(sensors)} out of range for {run.node_count} nodes"
        )
    layout = SensorLayout(sensors, run.node_count)
    cfg = MheConfig(window=args.window)
    return model, run, layout, cfg


def cmd_estimate(args: argparse.Namespace) -> int:
    model, run, layout, cfg = _estimate_common(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.cases == "paper":
        sweep = robustness_sweep(model, run, cfg)
        for name, trace in sweep.traces.items():
            save_trace(trace, out / f"{name}.csv")
        with (out / "cases_summary.csv").open("w", newline="") as fh:
            fh.write("case,sensors,mean_rmse_temperature,mean_rmse_smoke\n")
            for row in sweep.summary:
                fh.write(
                    f"{row['case']},\"{row['sensors']}\","
                    f"{row['mean_rmse_temperature']!r},{row['mean_rmse_smoke']!r}\n"
                )
        print(f"ran cases {', '.join(sweep.traces)} -> {out}")
        return EXIT_OK
    trace = run_offline(model, run, layout, cfg)
    save_trace(trace, out / "trace.csv")
    table_t = rmse_table(trace.diagnostics["open_loop_rmse_temperature"], trace.rmse_temperature)
    table_s = rmse_table(trace.diagnostics["open_loop_rmse_smoke"], trace.rmse_smoke)
    save_rmse_csv(table_t, out / "rmse_thermal.csv")
    save_rmse_csv(table_s, out / "rmse_smoke.csv")
    print(f"trace and RMSE tables -> {out}")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    model, run, layout, cfg = _estimate_common(args)
    baseline = open_loop_simulate(model, run)
    trace = run_offline(model, run, layout, cfg, include_open_loop=False)
    obs_t = observability_check(discretize(model.thermal, run.sample_time, layout))
    obs_s = observability_check(discretize(model.smoke, run.sample_time, layout))
    print(
        f"observability: thermal {obs_t.rank}/{obs_t.state_dim}, "
        f"smoke {obs_s.rank}/{obs_s.state_dim}"
    )
    print("node  open-loop T   mhe T         open-loop S   mhe S")
    for i in sorted(baseline.rmse_temperature):
        print(
            f"{i:>4}  {baseline.rmse_temperature[i]:<12.4g}  {trace.rmse_temperature[i]:<12.4g}  "
            f"{baseline.rmse_smoke[i]:<12.4g}  {trace.rmse_smoke[i]:<12.4g}"
        )
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        save_rmse_csv(rmse_table(baseline.rmse_temperature, trace.rmse_temperature), out / "rmse_thermal.csv")
        save_rmse_csv(rmse_table(baseline.rmse_smoke, trace.rmse_smoke), out / "rmse_smoke.csv")
        print(f"tables -> {out}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    if not args.traces:
        raise ConfigurationError("report needs at least one trace file")
    run = load_run(args.ground_truth)
    traces = {Path(p).stem: load_trace(p) for p in args.traces}
    baseline = load_trace(args.open_loop) if args.open_loop else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    with (out / "report_summary.csv").open("w", newline="") as fh:
        fh.write("trace,node,open_loop_rmse,mhe_rmse\n")
        for name, trace in traces.items():
            for i in range(1, run.node_count + 1):
                mhe_r = rmse(trace.node_temperature[:, i - 1], run.node_temperature[:, i - 1])
                ol_r = (
                    rmse(baseline.node_temperature[:, i - 1], run.node_temperature[:, i - 1])
                    if baseline is not None
                    else float("nan")
                )
                fh.write(f"{name},{i},{ol_r!r},{mhe_r!r}\n")

    plot_nodes = {"thermal": _parse_nodes(args.plot_thermal), "smoke": _parse_nodes(args.plot_smoke)}
    if baseline is not None:
        for name, trace in traces.items():
            for kind, nodes in plot_nodes.items():
                for node in nodes:
                    if not (1 <= node <= run.node_count):
                        raise ConfigurationError(f"plot node {node} out of range")
                    save_plot_data(
                        run, baseline, trace, kind, node,
                        out / f"plot_{name}_{kind}_node{node}.csv",
                    )
    print(f"report files -> {out}")
    return EXIT_OK


def cmd_reproduce_paper(args: argparse.Namespace) -> int:
    if args.config:
        spec = load_experiment_spec(args.config)
        if args.out:
            spec.output_dir = Path(args.out)
    else:
        spec = ExperimentSpec(output_dir=Path(args.out or "paper-out"), seed=args.seed)
    results = run_experiment(spec)
    obs = results["observability"]
    print(f"experiment matrix complete -> {spec.output_dir}")
    print(
        f"observability: thermal rank {obs['thermal'].rank}/{obs['thermal'].state_dim}, "
        f"smoke rank {obs['smoke'].rank}/{obs['smoke'].state_dim}"
    )
    mean_ol = np.mean([r["open_loop_rmse"] for r in results["rmse_thermal"]])
    mean_mhe = np.mean([r["mhe_rmse"] for r in results["rmse_thermal"]])
    print(f"thermal mean RMSE: open-loop {mean_ol:.4g}, estimator {mean_mhe:.4g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tunneltrace",
        description="Reduced-order tunnel fire models with sparse-sensor state estimation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a surrogate ground-truth run CSV")
    p.add_argument("--config", help="JSON file with the flat simulation key set")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("identify", help="fit node models from training run CSVs")
    p.add_argument("--train", nargs="+", required=True, help="training run CSVs (concatenated)")
    p.add_argument("--order", type=int, default=2, help="model order per node")
    p.add_argument("--hankel-rows", type=int, default=10)
    p.add_argument("--fire-nodes", default="1", help="comma-separated fire node indices")
    p.add_argument("--sensors", default="1,5,10", help="sensor layout stored with the model")
    p.add_argument("--out", required=True, help="output model JSON path")
    p.set_defaults(func=cmd_identify)

    p = sub.add_parser("estimate", help="run the moving-horizon estimator over a run")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sensors", default="1,5,10")
    p.add_argument("--window", type=int, default=20)
    p.add_argument("--cases", choices=["paper"], default=None,
                   help="'paper' runs the four standard sensor cases")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("evaluate", help="open-loop vs estimator RMSE comparison")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sensors", default="1,5,10")
    p.add_argument("--window", type=int, default=20)
    p.add_argument("--out", default=None, help="optional directory for RMSE CSVs")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="summary tables and plot data from saved traces")
    p.add_argument("--traces", nargs="*", default=[], help="estimator trace CSVs")
    p.add_argument("--ground-truth", required=True, help="run CSV with ground truth")
    p.add_argument("--open-loop", default=None, help="open-loop trace CSV")
    p.add_argument("--plot-thermal", default="3,6,8")
    p.add_argument("--plot-smoke", default="4,7,9")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("reproduce-paper", help="full train/validate/estimate/robustness matrix")
    p.add_argument("--config", default=None, help="experiment spec JSON")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_reproduce_paper)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, DataFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IdentificationError, AssemblyError, EstimationError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
