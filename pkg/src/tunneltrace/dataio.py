"""Run serialization, concatenation, and per-node channel extraction.

The on-disk format is a plain CSV with header ``t,Q,T_amb,T_1,...,T_N,S_1,
...,S_N``, optionally preceded by ``# key=value`` metadata comment lines.
Channel extraction turns a run into the exact input/output signal sets each
node model is identified and simulated with.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataFormatError
from .simulate import TimeSeriesRun


@dataclass(frozen=True)
class SensorLayout:
    """Which probe nodes carry physical sensors (1-based indices)."""

    sensor_nodes: tuple[int, ...]
    node_count: int

    def __post_init__(self) -> None:
        nodes = tuple(sorted(set(int(i) for i in self.sensor_nodes)))
        object.__setattr__(self, "sensor_nodes", nodes)
        if not nodes:
            raise ConfigurationError("sensor layout must name at least one node")
        if nodes[0] < 1 or nodes[-1] > self.node_count:
            raise ConfigurationError(
                f"sensor nodes {nodes} out of range 1..{self.node_count}"
            )


@dataclass(frozen=True)
class NodeChannelSpec:
    """Input/output channel wiring for one node model.

    Fire nodes are driven directly by the HRR channel ``Q``; every other node
    is driven by its upstream neighbor's output. Smoke models additionally
    take the node's own temperature. The ambient channel ``T_amb`` is an
    exogenous input everywhere.
    """

    node_index: int
    kind: str  # "thermal" | "smoke"
    fire_node: bool
    input_channel_names: tuple[str, ...]
    output_channel_name: str

    @classmethod
    def create(cls, node_index: int, kind: str, fire_node: bool) -> "NodeChannelSpec":
        if kind not in ("thermal", "smoke"):
            raise ConfigurationError(f"unknown model kind {kind!r}")
        if node_index < 1:
            raise ConfigurationError("node_index is 1-based")
        if not fire_node and node_index == 1:
            raise ConfigurationError(
                "node 1 has no upstream neighbor and must be a fire node"
            )
        i = node_index
        if kind == "thermal":
            inputs = ("Q", "T_amb") if fire_node else (f"T_{i - 1}", "T_amb")
            output = f"T_{i}"
        else:
            first = "Q" if fire_node else f"S_{i - 1}"
            inputs = (first, f"T_{i}", "T_amb")
            output = f"S_{i}"
        return cls(i, kind, fire_node, inputs, output)

    @property
    def upstream_channel(self) -> str | None:
        """The cascade-internal input channel, or None for fire nodes."""
        if self.fire_node:
            return None
        return self.input_channel_names[0]


def build_channel_specs(
    node_count: int, fire_nodes: frozenset[int] | set[int] = frozenset({1})
) -> tuple[list[NodeChannelSpec], list[NodeChannelSpec]]:
    """Channel specs for the full thermal and smoke chains."""
    fire = set(fire_nodes)
    thermal = [NodeChannelSpec.create(i, "thermal", i in fire) for i in range(1, node_count + 1)]
    smoke = [NodeChannelSpec.create(i, "smoke", i in fire) for i in range(1, node_count + 1)]
    return thermal, smoke


def run_header(node_count: int) -> str:
    cols = ["t", "Q", "T_amb"]
    cols += [f"T_{i}" for i in range(1, node_count + 1)]
    cols += [f"S_{i}" for i in range(1, node_count + 1)]
    return ",".join(cols)


def save_run(run: TimeSeriesRun, path: str | Path) -> None:
    """Write a run as CSV; metadata goes into leading ``# key=value`` lines."""
    path = Path(path)
    n = run.node_count
    with path.open("w", newline="") as fh:
        for key, value in sorted(run.metadata.items()):
            fh.write(f"# {key}={value}\n")
        if len(run.segment_boundaries) > 1:
            joined = ",".join(str(b) for b in run.segment_boundaries)
            fh.write(f"# segment_boundaries={joined}\n")
        fh.write(run_header(n) + "\n")
        data = np.column_stack(
            [run.times, run.hrr, run.ambient, run.node_temperature, run.node_smoke]
        )
        for row in data:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")


def _parse_metadata_value(raw: str):
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            continue
    return raw


def load_run(path: str | Path) -> TimeSeriesRun:
    """Parse a run CSV, validating the schema and the uniform time grid."""
    path = Path(path)
    metadata: dict = {}
    boundaries: tuple[int, ...] = (0,)
    with path.open() as fh:
        line = fh.readline()
        while line.startswith("#"):
            body = line[1:].strip()
            if "=" in body:
                key, _, raw = body.partition("=")
                key = key.strip()
                if key == "segment_boundaries":
                    boundaries = tuple(int(b) for b in raw.split(","))
                else:
                    metadata[key] = _parse_metadata_value(raw.strip())
            line = fh.readline()
        header = line.strip()
        body_text = fh.read()

    names = header.split(",")
    if len(names) < 5 or names[:3] != ["t", "Q", "T_amb"]:
        raise DataFormatError(f"{path}: header must start with t,Q,T_amb, got {header!r}")
    n = (len(names) - 3) // 2
    expected = run_header(n).split(",")
    missing = [c for c in expected if c not in names]
    if missing or names != expected:
        if missing:
            raise DataFormatError(f"{path}: missing column {missing[0]!r}")
        raise DataFormatError(f"{path}: unexpected column order {header!r}")

    rows = []
    for lineno, raw in enumerate(io.StringIO(body_text), start=2):
        raw = raw.strip()
        if not raw:
            continue
        parts = raw.split(",")
        if len(parts) != len(names):
            raise DataFormatError(
                f"{path}: row {lineno} has {len(parts)} fields, expected {len(names)}"
            )
        try:
            rows.append([float(p) for p in parts])
        except ValueError as exc:
            raise DataFormatError(f"{path}: row {lineno}: {exc}") from None
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    data = np.asarray(rows)

    times = data[:, 0]
    if len(times) >= 2:
        steps = np.diff(times)
        if not np.allclose(steps, steps[0], rtol=0.0, atol=1e-9 * max(1.0, abs(steps[0]))):
            raise DataFormatError(f"{path}: non-uniform grid in column 't'")
    try:
        return TimeSeriesRun(
            times=times,
            hrr=data[:, 1],
            ambient=data[:, 2],
            node_temperature=data[:, 3 : 3 + n],
            node_smoke=data[:, 3 + n :],
            metadata=metadata,
            segment_boundaries=boundaries,
        )
    except ConfigurationError as exc:
        raise DataFormatError(f"{path}: {exc}") from None


def concatenate_runs(runs: list[TimeSeriesRun]) -> TimeSeriesRun:
    """Stack runs end to end, recording segment boundaries at each join.

    The time grid is rebuilt as one uniform axis; boundaries let Hankel
    construction avoid windows that mix two scenarios.
    """
    if not runs:
        raise ConfigurationError("need at least one run to concatenate")
    if len(runs) == 1:
        return runs[0]
    n = runs[0].node_count
    dt = runs[0].sample_time
    for k, run in enumerate(runs[1:], start=2):
        if run.node_count != n:
            raise ConfigurationError(
                f"run {k} has {run.node_count} nodes, expected {n}"
            )
        if not math_isclose(run.sample_time, dt):
            raise ConfigurationError(
                f"run {k} has sample_time {run.sample_time}, expected {dt}"
            )
    boundaries = [0]
    for run in runs[:-1]:
        boundaries.append(boundaries[-1] + len(run))
    total = sum(len(r) for r in runs)
    return TimeSeriesRun(
        times=np.arange(total) * dt,
        hrr=np.concatenate([r.hrr for r in runs]),
        ambient=np.concatenate([r.ambient for r in runs]),
        node_temperature=np.vstack([r.node_temperature for r in runs]),
        node_smoke=np.vstack([r.node_smoke for r in runs]),
        metadata={"concatenated_from": [r.metadata for r in runs]},
        segment_boundaries=tuple(boundaries),
    )


def math_isclose(a: float, b: float, rel: float = 1e-9) -> bool:
    return abs(a - b) <= rel * max(abs(a), abs(b), 1.0)


def channel_column(run: TimeSeriesRun, name: str) -> np.ndarray:
    """Resolve a channel name (Q, T_amb, T_i, S_i) to its signal column."""
    if name == "Q":
        return run.hrr
    if name == "T_amb":
        return run.ambient
    kind, _, idx = name.partition("_")
    if kind in ("T", "S") and idx.isdigit():
        i = int(idx)
        if 1 <= i <= run.node_count:
            source = run.node_temperature if kind == "T" else run.node_smoke
            return source[:, i - 1]
    raise DataFormatError(f"channel {name!r} not present in run with N={run.node_count}")


def extract_node_io(run: TimeSeriesRun, spec: NodeChannelSpec) -> tuple[np.ndarray, np.ndarray]:
    """Input matrix (T x m, columns in spec order) and output vector for one node.

    Ground-truth columns supply every channel, including upstream outputs;
    that is the training configuration. Estimation replaces upstream and
    temperature channels with model outputs elsewhere in the pipeline.
    """
    u = np.column_stack([channel_column(run, c) for c in spec.input_channel_names])
    y = channel_column(run, spec.output_channel_name).copy()
    return u, y
