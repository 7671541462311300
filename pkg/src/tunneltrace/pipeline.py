"""End-to-end experiment orchestration and report files.

One :class:`ExperimentSpec` drives the whole workflow: simulate the scenario
matrix, identify node models on the concatenated training runs, assemble and
gate the tunnel model, run the open-loop baseline and the estimator for every
sensor case, and persist traces plus RMSE/plot files. Every report cell is
recomputable from the persisted CSVs, and a fixed spec (including seed)
reproduces byte-identical output.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .cascade import EstimateTrace, TunnelModel, build_tunnel_model, discretize, observability_check, open_loop_simulate
from .dataio import SensorLayout, build_channel_specs, concatenate_runs, save_run
from .errors import ConfigurationError, DataFormatError
from .mhe import PAPER_SENSOR_CASES, MheConfig, robustness_sweep, run_offline
from .modelio import save_tunnel_model
from .simulate import (
    DEFAULT_Q_PEAK_PER_AH,
    HrrProfile,
    SimConfig,
    TRAIN_SCENARIOS,
    TimeSeriesRun,
    TunnelGeometry,
    VALIDATION_SCENARIO,
    generate_protocol_runs,
)
from .sysid import IdentificationConfig, identify_from_run, validation_report

DEFAULT_PLOT_NODES = {"thermal": (3, 6, 8), "smoke": (4, 7, 9)}


@dataclass
class ExperimentSpec:
    """Scenario matrix, model/estimator settings, and output location."""

    train_scenarios: tuple[tuple[float, float], ...] = TRAIN_SCENARIOS
    validation_scenario: tuple[float, float] = VALIDATION_SCENARIO
    sim: SimConfig = field(default_factory=SimConfig)
    identification: IdentificationConfig = field(default_factory=IdentificationConfig)
    mhe: MheConfig = field(default_factory=MheConfig)
    sensor_cases: dict[str, tuple[int, ...]] = field(
        default_factory=lambda: dict(PAPER_SENSOR_CASES)
    )
    primary_sensors: tuple[int, ...] = (1, 5, 10)
    fire_nodes: frozenset[int] = frozenset({1})
    plot_nodes: dict[str, tuple[int, ...]] = field(
        default_factory=lambda: dict(DEFAULT_PLOT_NODES)
    )
    q_peak_per_ah: float = DEFAULT_Q_PEAK_PER_AH
    output_dir: Path = Path("experiment-out")
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.train_scenarios:
            raise ConfigurationError("need at least one training scenario")
        if not self.validation_scenario:
            raise ConfigurationError("need a validation scenario")
        if not self.sensor_cases:
            raise ConfigurationError("sensor_cases must not be empty")
        self.output_dir = Path(self.output_dir)
        self.fire_nodes = frozenset(self.fire_nodes)


def identify_tunnel_model(
    train_runs: list[TimeSeriesRun],
    id_cfg: IdentificationConfig,
    fire_nodes: frozenset[int],
    layout: SensorLayout,
) -> TunnelModel:
    """Concatenate training runs and fit both node chains."""
    train = concatenate_runs(train_runs)
    thermal_specs, smoke_specs = build_channel_specs(train.node_count, fire_nodes)
    thermal = [identify_from_run(train, spec, id_cfg) for spec in thermal_specs]
    smoke = [identify_from_run(train, spec, id_cfg) for spec in smoke_specs]
    return build_tunnel_model(thermal, smoke, fire_nodes, layout)


def trace_header(n_states_thermal: int, n_states_smoke: int, node_count: int) -> str:
    cols = ["t"]
    cols += [f"zhat_{i}" for i in range(1, n_states_thermal + n_states_smoke + 1)]
    cols += [f"That_{i}" for i in range(1, node_count + 1)]
    cols += [f"Shat_{i}" for i in range(1, node_count + 1)]
    return ",".join(cols)


def save_trace(trace: EstimateTrace, path: str | Path) -> None:
    """Trace CSV: time, stacked state estimates (thermal block then smoke
    block), then reconstructed per-node temperatures and smoke densities."""
    n = trace.node_temperature.shape[1]
    zt = trace.states_thermal
    zs = trace.states_smoke
    if zt is None or zs is None:
        raise ConfigurationError("trace lacks state estimates; cannot serialize")
    header = trace_header(zt.shape[1], zs.shape[1], n)
    data = np.column_stack([trace.times, zt, zs, trace.node_temperature, trace.node_smoke])
    with Path(path).open("w", newline="") as fh:
        fh.write(header + "\n")
        for row in data:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")


def load_trace(path: str | Path) -> EstimateTrace:
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().strip().split(",")
        rows = [[float(x) for x in line.split(",")] for line in fh if line.strip()]
    if not rows or header[0] != "t":
        raise DataFormatError(f"{path}: not a trace file")
    data = np.asarray(rows)
    n = sum(1 for c in header if c.startswith("That_"))
    n_states = len(header) - 1 - 2 * n
    that_at = 1 + n_states
    zt_cols = sum(1 for c in header if c.startswith("zhat_"))
    if zt_cols != n_states or n == 0:
        raise DataFormatError(f"{path}: malformed trace header")
    return EstimateTrace(
        times=data[:, 0],
        node_temperature=data[:, that_at : that_at + n],
        node_smoke=data[:, that_at + n :],
        diagnostics={"loaded_from": str(path), "state_columns": n_states},
    )


def rmse_table(
    open_loop: dict[int, float], estimator: dict[int, float]
) -> list[dict]:
    return [
        {
            "node": i,
            "open_loop_rmse": open_loop[i],
            "mhe_rmse": estimator[i],
        }
        for i in sorted(open_loop)
    ]


def save_rmse_csv(table: list[dict], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        fh.write("node,open_loop_rmse,mhe_rmse\n")
        for row in table:
            fh.write(
                f"{row['node']},{float(row['open_loop_rmse'])!r},{float(row['mhe_rmse'])!r}\n"
            )


def save_plot_data(
    run: TimeSeriesRun,
    baseline: EstimateTrace,
    estimate: EstimateTrace,
    kind: str,
    node: int,
    path: str | Path,
) -> None:
    """Plot-ready series: time, ground truth, open-loop, estimate."""
    truth = run.node_temperature if kind == "thermal" else run.node_smoke
    base = baseline.node_temperature if kind == "thermal" else baseline.smoke_reported
    est = estimate.node_temperature if kind == "thermal" else estimate.smoke_reported
    t_len = min(len(run), base.shape[0], est.shape[0])
    with Path(path).open("w", newline="") as fh:
        fh.write("t,ground_truth,open_loop,mhe\n")
        for k in range(t_len):
            fh.write(
                f"{float(run.times[k])!r},{float(truth[k, node - 1])!r},"
                f"{float(base[k, node - 1])!r},{float(est[k, node - 1])!r}\n"
            )


def _scenario_name(capacity: float, ambient: float, role: str) -> str:
    return f"{role}_{capacity:g}ah_{ambient:g}c"


def run_experiment(spec: ExperimentSpec) -> dict:
    """Execute the full matrix and write all artifacts under output_dir."""
    out = spec.output_dir
    (out / "runs").mkdir(parents=True, exist_ok=True)
    (out / "traces").mkdir(exist_ok=True)
    (out / "reports").mkdir(exist_ok=True)

    sim = replace(spec.sim, rng_seed=spec.seed)
    protocol = generate_protocol_runs(
        sim,
        train_scenarios=spec.train_scenarios,
        validation_scenario=spec.validation_scenario,
        q_peak_per_ah=spec.q_peak_per_ah,
    )
    run_paths = {}
    for run in protocol.all_runs():
        name = _scenario_name(run.metadata["capacity_ah"], run.metadata["ambient_c"], run.metadata["role"])
        path = out / "runs" / f"{name}.csv"
        save_run(run, path)
        run_paths[name] = path

    layout = SensorLayout(spec.primary_sensors, sim.geometry.node_count)
    model = identify_tunnel_model(protocol.train, spec.identification, spec.fire_nodes, layout)
    save_tunnel_model(model, out / "model.json")

    val = protocol.validation
    obs_t = observability_check(discretize(model.thermal, val.sample_time))
    obs_s = observability_check(discretize(model.smoke, val.sample_time))

    node_val_t = validation_report(model.thermal_nodes, val)
    node_val_s = validation_report(model.smoke_nodes, val)

    baseline = open_loop_simulate(model, val)
    save_trace(baseline, out / "traces" / "open_loop.csv")

    sweep = robustness_sweep(model, val, spec.mhe, spec.sensor_cases)
    primary_case = None
    for name, lay in sweep.layouts.items():
        save_trace(sweep.traces[name], out / "traces" / f"{name}.csv")
        if tuple(lay.sensor_nodes) == tuple(sorted(spec.primary_sensors)):
            primary_case = name
    if primary_case is None:
        primary_layout = SensorLayout(spec.primary_sensors, val.node_count)
        primary = run_offline(model, val, primary_layout, spec.mhe, include_open_loop=False)
        save_trace(primary, out / "traces" / "primary.csv")
    else:
        primary = sweep.traces[primary_case]

    table_t = rmse_table(baseline.rmse_temperature, primary.rmse_temperature)
    table_s = rmse_table(baseline.rmse_smoke, primary.rmse_smoke)
    save_rmse_csv(table_t, out / "reports" / "rmse_thermal.csv")
    save_rmse_csv(table_s, out / "reports" / "rmse_smoke.csv")

    with (out / "reports" / "cases_summary.csv").open("w", newline="") as fh:
        fh.write("case,sensors,mean_rmse_temperature,mean_rmse_smoke\n")
        for row in sweep.summary:
            fh.write(
                f"{row['case']},\"{row['sensors']}\","
                f"{row['mean_rmse_temperature']!r},{row['mean_rmse_smoke']!r}\n"
            )

    for kind, nodes in spec.plot_nodes.items():
        for node in nodes:
            save_plot_data(
                val, baseline, primary, kind, node,
                out / "reports" / f"plot_{kind}_node{node}.csv",
            )

    summary_lines = [
        "tunneltrace experiment summary",
        f"seed: {spec.seed}",
        f"nodes: {val.node_count}, samples: {len(val)}, dt: {val.sample_time:g} s",
        f"training scenarios: {list(spec.train_scenarios)}",
        f"validation scenario: {tuple(spec.validation_scenario)}",
        f"observability: thermal rank {obs_t.rank}/{obs_t.state_dim}"
        f" ({'observable' if obs_t.observable else 'NOT observable'}),"
        f" smoke rank {obs_s.rank}/{obs_s.state_dim}"
        f" ({'observable' if obs_s.observable else 'NOT observable'})",
        f"node-model validation RMSE, worst thermal: {max(node_val_t.values()):.4g}",
        f"node-model validation RMSE, worst smoke: {max(node_val_s.values()):.4g}",
        "",
        "node  open-loop T      mhe T            open-loop S      mhe S",
    ]
    for i in sorted(baseline.rmse_temperature):
        summary_lines.append(
            f"{i:>4}  {baseline.rmse_temperature[i]:<15.6g}  {primary.rmse_temperature[i]:<15.6g}  "
            f"{baseline.rmse_smoke[i]:<15.6g}  {primary.rmse_smoke[i]:<15.6g}"
        )
    summary_lines.append("")
    for row in sweep.summary:
        summary_lines.append(
            f"{row['case']} (sensors {row['sensors']}): mean T RMSE "
            f"{row['mean_rmse_temperature']:.6g}, mean S RMSE {row['mean_rmse_smoke']:.6g}"
        )
    (out / "reports" / "summary.txt").write_text("\n".join(summary_lines) + "\n")

    return {
        "runs": run_paths,
        "model": out / "model.json",
        "observability": {"thermal": obs_t, "smoke": obs_s},
        "baseline": baseline,
        "primary": primary,
        "sweep": sweep,
        "rmse_thermal": table_t,
        "rmse_smoke": table_s,
    }


# Flat-key config file support ------------------------------------------------

_SIM_KEYS = {
    "ambient_c": "ambient_temperature",
    "ventilation_velocity": "ventilation_velocity",
    "grid_spacing": "grid_spacing",
    "sample_time": "sample_time",
    "duration": "duration",
    "thermal_diffusivity": "thermal_diffusivity",
    "wall_loss_rate": "wall_loss_rate",
    "smoke_diffusivity": "smoke_diffusivity",
    "smoke_deposition_rate": "smoke_deposition_rate",
    "temperature_source_gain": "temperature_source_gain",
    "smoke_source_gain": "smoke_source_gain",
    "loss_variation": "loss_variation",
    "rng_seed": "rng_seed",
    "solver_step": "solver_step",
    "closed_outflow": "closed_outflow",
}
_GEO_KEYS = {
    "length": "length",
    "width": "width",
    "height": "height",
    "node_count": "node_count",
    "node_spacing": "node_spacing",
    "node_positions": "node_positions",
}


def sim_config_from_dict(raw: dict) -> SimConfig:
    """Build a SimConfig from the documented flat key set."""
    raw = dict(raw)
    geo_kwargs = {}
    for key, attr in _GEO_KEYS.items():
        if key in raw:
            value = raw.pop(key)
            geo_kwargs[attr] = tuple(value) if attr == "node_positions" else value
    if "fire_start" in raw or "fire_end" in raw:
        geo_kwargs["fire_extent"] = (
            float(raw.pop("fire_start", 3.0)),
            float(raw.pop("fire_end", 6.0)),
        )
    geometry = TunnelGeometry(**geo_kwargs)

    capacity = float(raw.pop("capacity_ah", 243.0))
    hrr = HrrProfile.from_capacity(
        capacity,
        q_peak_per_ah=float(raw.pop("q_peak_per_ah", DEFAULT_Q_PEAK_PER_AH)),
        t_peak=float(raw.pop("t_peak", 275.0)),
        t_end=float(raw.pop("t_end", 600.0)),
    )
    if "q_peak" in raw:
        hrr = HrrProfile(
            q_peak=float(raw.pop("q_peak")), t_peak=hrr.t_peak, t_end=hrr.t_end,
            capacity_ah=capacity,
        )

    sim_kwargs = {}
    for key, attr in _SIM_KEYS.items():
        if key in raw:
            sim_kwargs[attr] = raw.pop(key)
    if raw:
        raise ConfigurationError(f"unknown simulation config keys: {sorted(raw)}")
    return SimConfig(geometry=geometry, hrr=hrr, **sim_kwargs)


def load_sim_config(path: str | Path) -> SimConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: config must be a JSON object")
    return sim_config_from_dict(raw)


def _filter_kwargs(cls, raw: dict) -> dict:
    names = {f.name for f in fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigurationError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return raw


def load_experiment_spec(path: str | Path) -> ExperimentSpec:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
    kwargs: dict = {}
    if "train_scenarios" in raw:
        kwargs["train_scenarios"] = tuple(tuple(s) for s in raw["train_scenarios"])
    if "validation_scenario" in raw:
        kwargs["validation_scenario"] = tuple(raw["validation_scenario"])
    if "sim" in raw:
        kwargs["sim"] = sim_config_from_dict(raw["sim"])
    if "identification" in raw:
        kwargs["identification"] = IdentificationConfig(
            **_filter_kwargs(IdentificationConfig, raw["identification"])
        )
    if "mhe" in raw:
        kwargs["mhe"] = MheConfig(**_filter_kwargs(MheConfig, raw["mhe"]))
    if "sensor_cases" in raw:
        kwargs["sensor_cases"] = {k: tuple(v) for k, v in raw["sensor_cases"].items()}
    if "primary_sensors" in raw:
        kwargs["primary_sensors"] = tuple(raw["primary_sensors"])
    if "fire_nodes" in raw:
        kwargs["fire_nodes"] = frozenset(raw["fire_nodes"])
    if "plot_nodes" in raw:
        kwargs["plot_nodes"] = {k: tuple(v) for k, v in raw["plot_nodes"].items()}
    if "q_peak_per_ah" in raw:
        kwargs["q_peak_per_ah"] = float(raw["q_peak_per_ah"])
    if "output_dir" in raw:
        kwargs["output_dir"] = Path(raw["output_dir"])
    if "seed" in raw:
        kwargs["seed"] = int(raw["seed"])
    return ExperimentSpec(**kwargs)
