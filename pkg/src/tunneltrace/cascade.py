"""Assembly of per-node models into compact tunnel-wide state space.

Each non-fire node is driven by its upstream neighbor's output, so
substituting y_{i-1} = C_{i-1} x_{i-1} into node i's input chain produces one
block lower-triangular A for the whole tunnel, with exogenous channels (HRR,
ambient, and for the smoke chain the per-node temperature signals) collected
into a compact B. The compact C selects sensor-node outputs; a full-output C
is kept alongside for reconstruction and output-space constraints.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataio import SensorLayout
from .errors import AssemblyError
from .sysid import NodeModel, rmse


@dataclass
class CascadeModel:
    """Compact continuous-time model of one homogeneous node chain."""

    kind: str
    a: np.ndarray                 # n_z x n_z, 1/s
    b: np.ndarray                 # n_z x n_exo
    c_full: np.ndarray            # N x n_z, one output row per node
    d_full: np.ndarray            # N x n_exo
    exo_channels: tuple[str, ...]
    node_orders: tuple[int, ...]
    layout: SensorLayout

    @property
    def state_dim(self) -> int:
        return self.a.shape[0]

    @property
    def node_count(self) -> int:
        return self.c_full.shape[0]

    def sensor_rows(self, layout: SensorLayout | None = None) -> np.ndarray:
        layout = layout or self.layout
        return np.array([i - 1 for i in layout.sensor_nodes], dtype=int)

    @property
    def c_sensors(self) -> np.ndarray:
        return self.c_full[self.sensor_rows()]

    @property
    def d_sensors(self) -> np.ndarray:
        return self.d_full[self.sensor_rows()]


@dataclass
class DiscreteModel:
    """First-order discretization A_d = I + dt*A, B_d = dt*B of a cascade."""

    ad: np.ndarray
    bd: np.ndarray
    c: np.ndarray       # sensor-node output rows
    d: np.ndarray
    dt: float
    c_full: np.ndarray  # all-node output rows, for reconstruction/constraints
    d_full: np.ndarray

    @property
    def state_dim(self) -> int:
        return self.ad.shape[0]


@dataclass
class ObservabilityResult:
    rank: int
    observable: bool
    state_dim: int
    singular_values: np.ndarray


@dataclass
class EstimateTrace:
    """Per-step reconstructed outputs for every node, with RMSE summaries.

    ``node_smoke`` holds raw solver outputs; negative round-off survives here
    so it can be audited, while :attr:`smoke_reported` applies the physical
    clamp used in reports.
    """

    times: np.ndarray
    node_temperature: np.ndarray
    node_smoke: np.ndarray
    states_thermal: np.ndarray | None = None
    states_smoke: np.ndarray | None = None
    rmse_temperature: dict = field(default_factory=dict)
    rmse_smoke: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    @property
    def smoke_reported(self) -> np.ndarray:
        return np.clip(self.node_smoke, 0.0, None)


def assemble_cascade(
    nodes: list[NodeModel],
    fire_nodes: frozenset[int] | set[int],
    layout: SensorLayout,
) -> CascadeModel:
    """Fold a chain of node models into one compact quadruple.

    Requires zero feedthrough on cascade-internal channels (upstream outputs);
    exogenous channels keep their D entries. Nodes must be a contiguous chain
    1..N of one kind, with node 1 a fire node.
    """
    if not nodes:
        raise AssemblyError("cannot assemble an empty chain")
    kind = nodes[0].kind
    n_nodes = len(nodes)
    for pos, node in enumerate(nodes, start=1):
        if node.kind != kind:
            raise AssemblyError(f"mixed node kinds: {kind} and {node.kind}")
        if node.node_index != pos:
            raise AssemblyError(
                f"nodes must form a contiguous chain; position {pos} holds node {node.node_index}"
            )
        if node.channel_spec is None:
            raise AssemblyError(f"node {pos} lacks a channel spec")

    if kind == "thermal":
        exo = ("Q", "T_amb")
    else:
        exo = ("Q", *(f"T_{i}" for i in range(1, n_nodes + 1)), "T_amb")
    exo_index = {name: j for j, name in enumerate(exo)}

    orders = tuple(node.order for node in nodes)
    offsets = np.concatenate(([0], np.cumsum(orders)))
    n_z = int(offsets[-1])

    a = np.zeros((n_z, n_z))
    b = np.zeros((n_z, len(exo)))
    c_full = np.zeros((n_nodes, n_z))
    d_full = np.zeros((n_nodes, len(exo)))

    for pos, node in enumerate(nodes):
        spec = node.channel_spec
        sl = slice(offsets[pos], offsets[pos + 1])
        a[sl, sl] = node.a
        c_full[pos, sl] = node.c[0]
        for j, name in enumerate(spec.input_channel_names):
            if name == spec.upstream_channel:
                if abs(float(node.d[0, j])) > 0.0:
                    raise AssemblyError(
                        f"node {node.node_index} has feedthrough on internal channel "
                        f"{name!r}; identify with feedthrough disabled"
                    )
                up = slice(offsets[pos - 1], offsets[pos])
                a[sl, up] += np.outer(node.b[:, j], nodes[pos - 1].c[0])
            elif name in exo_index:
                col = exo_index[name]
                b[sl, col] += node.b[:, j]
                d_full[pos, col] += float(node.d[0, j])
            else:
                raise AssemblyError(
                    f"node {node.node_index} input {name!r} is neither upstream nor exogenous"
                )

    return CascadeModel(
        kind=kind,
        a=a,
        b=b,
        c_full=c_full,
        d_full=d_full,
        exo_channels=exo,
        node_orders=orders,
        layout=layout,
    )


@dataclass
class TunnelModel:
    """Both chains plus the sensor layout they were assembled with."""

    thermal: CascadeModel
    smoke: CascadeModel
    layout: SensorLayout
    fire_nodes: frozenset[int]
    thermal_nodes: list[NodeModel] = field(default_factory=list)
    smoke_nodes: list[NodeModel] = field(default_factory=list)

    @property
    def node_count(self) -> int:
        return self.thermal.node_count


def build_tunnel_model(
    thermal_nodes: list[NodeModel],
    smoke_nodes: list[NodeModel],
    fire_nodes: frozenset[int] | set[int],
    layout: SensorLayout,
) -> TunnelModel:
    return TunnelModel(
        thermal=assemble_cascade(thermal_nodes, fire_nodes, layout),
        smoke=assemble_cascade(smoke_nodes, fire_nodes, layout),
        layout=layout,
        fire_nodes=frozenset(fire_nodes),
        thermal_nodes=list(thermal_nodes),
        smoke_nodes=list(smoke_nodes),
    )


def discretize(
    model: CascadeModel, dt: float, layout: SensorLayout | None = None
) -> DiscreteModel:
    """Eq-style first-order discretization; no higher-order correction."""
    if dt <= 0.0:
        raise AssemblyError(f"dt must be positive, got {dt}")
    rows = model.sensor_rows(layout)
    return DiscreteModel(
        ad=np.eye(model.state_dim) + dt * model.a,
        bd=dt * model.b,
        c=model.c_full[rows],
        d=model.d_full[rows],
        dt=dt,
        c_full=model.c_full,
        d_full=model.d_full,
    )


def observability_check(discrete: DiscreteModel, rel_tol: float = 1e-10) -> ObservabilityResult:
    """Rank of [C; C Ad; ...; C Ad^(n-1)] via singular values.

    Singular values below ``rel_tol`` times the largest are treated as zero;
    observable means rank equals the state dimension.
    """
    n = discrete.state_dim
    blocks = []
    power = discrete.c.copy()
    for _ in range(n):
        blocks.append(power)
        power = power @ discrete.ad
    obs = np.vstack(blocks)
    sv = np.linalg.svd(obs, compute_uv=False)
    if sv.size == 0 or sv[0] == 0.0:
        rank = 0
    else:
        rank = int(np.sum(sv > rel_tol * sv[0]))
    return ObservabilityResult(
        rank=rank, observable=rank == n, state_dim=n, singular_values=sv
    )


def rollout_discrete(
    dm: DiscreteModel, u_seq: np.ndarray, x0: np.ndarray, overflow_guard: float = 1e9
) -> tuple[np.ndarray, np.ndarray, int | None]:
    """Roll the discrete model forward, reporting all-node outputs.

    Returns (states T x n, outputs T x N, diverged_at). When an output exceeds
    the overflow guard, the rollout stops and arrays are truncated there.
    """
    t_len = len(u_seq)
    states = np.empty((t_len, dm.state_dim))
    outputs = np.empty((t_len, dm.c_full.shape[0]))
    x = np.asarray(x0, dtype=float).copy()
    for k in range(t_len):
        states[k] = x
        outputs[k] = dm.c_full @ x + dm.d_full @ u_seq[k]
        if not np.all(np.isfinite(outputs[k])) or np.max(np.abs(outputs[k])) > overflow_guard:
            return states[: k + 1], outputs[: k + 1], k
        x = dm.ad @ x + dm.bd @ u_seq[k]
    return states, outputs, None


def equilibrium_state(dm: DiscreteModel, u0: np.ndarray) -> np.ndarray:
    """Fixed point of the discrete dynamics under a frozen input."""
    n = dm.state_dim
    rhs = dm.bd @ np.asarray(u0, dtype=float)
    mat = np.eye(n) - dm.ad
    try:
        return np.linalg.solve(mat, rhs)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(mat, rhs, rcond=None)[0]


def fit_initial_state(dm: DiscreteModel, u_seq: np.ndarray, y_full: np.ndarray) -> np.ndarray:
    """Least-squares initial state matching observed all-node outputs."""
    t_len = len(u_seq)
    _, forced, diverged = rollout_discrete(dm, u_seq, np.zeros(dm.state_dim))
    if diverged is not None:
        t_len = forced.shape[0]
    n_out = dm.c_full.shape[0]
    phi = np.empty((t_len * n_out, dm.state_dim))
    x = np.eye(dm.state_dim)
    for k in range(t_len):
        phi[k * n_out : (k + 1) * n_out] = dm.c_full @ x
        x = dm.ad @ x
    resid = (y_full[:t_len] - forced).ravel()
    x0, *_ = np.linalg.lstsq(phi, resid, rcond=None)
    return x0


def thermal_input_matrix(run) -> np.ndarray:
    return np.column_stack([run.hrr, run.ambient])


def smoke_input_matrix(run, temperatures: np.ndarray) -> np.ndarray:
    t_len = temperatures.shape[0]
    return np.column_stack([run.hrr[:t_len], temperatures, run.ambient[:t_len]])


def open_loop_simulate(
    model: TunnelModel,
    run,
    x0_mode: str = "zero",
    overflow_guard: float = 1e9,
) -> EstimateTrace:
    """Zero-feedback baseline: the thermal chain runs on exogenous inputs
    only, then the smoke chain consumes the *simulated* temperatures.

    ``x0_mode`` is "zero" (default) or "fit" (least-squares initial state per
    chain against the run's ground truth).
    """
    if x0_mode not in ("zero", "fit"):
        raise ValueError(f"unknown x0_mode {x0_mode!r}")
    dt = run.sample_time
    dm_t = discretize(model.thermal, dt)
    u_t = thermal_input_matrix(run)
    x0_t = (
        fit_initial_state(dm_t, u_t, run.node_temperature)
        if x0_mode == "fit"
        else np.zeros(dm_t.state_dim)
    )
    st_t, temps, div_t = rollout_discrete(dm_t, u_t, x0_t, overflow_guard)

    t_len = temps.shape[0]
    dm_s = discretize(model.smoke, dt)
    u_s = smoke_input_matrix(run, temps)[:t_len]
    x0_s = (
        fit_initial_state(dm_s, u_s, run.node_smoke[:t_len])
        if x0_mode == "fit"
        else np.zeros(dm_s.state_dim)
    )
    st_s, smoke, div_s = rollout_discrete(dm_s, u_s, x0_s, overflow_guard)

    t_len = min(temps.shape[0], smoke.shape[0])
    trace = EstimateTrace(
        times=run.times[:t_len],
        node_temperature=temps[:t_len],
        node_smoke=smoke[:t_len],
        states_thermal=st_t[:t_len],
        states_smoke=st_s[:t_len],
        diagnostics={
            "mode": "open-loop",
            "x0_mode": x0_mode,
            "diverged_at": div_t if div_t is not None else div_s,
        },
    )
    for i in range(model.node_count):
        trace.rmse_temperature[i + 1] = rmse(
            trace.node_temperature[:, i], run.node_temperature[:t_len, i]
        )
        trace.rmse_smoke[i + 1] = rmse(trace.node_smoke[:, i], run.node_smoke[:t_len, i])
    return trace
