"""Reduced-order modeling and sparse-sensor estimation of tunnel fire transport.

The package covers the full workflow: surrogate ground-truth generation
(:mod:`tunneltrace.simulate`), run serialization and channel wiring
(:mod:`tunneltrace.dataio`), per-node subspace identification
(:mod:`tunneltrace.sysid`), cascade assembly with observability checks
(:mod:`tunneltrace.cascade`), constrained moving-horizon estimation
(:mod:`tunneltrace.mhe`), and experiment orchestration
(:mod:`tunneltrace.pipeline`, :mod:`tunneltrace.cli`).
"""

from .cascade import (
    CascadeModel,
    DiscreteModel,
    EstimateTrace,
    ObservabilityResult,
    TunnelModel,
    assemble_cascade,
    build_tunnel_model,
    discretize,
    observability_check,
    open_loop_simulate,
)
from .dataio import (
    NodeChannelSpec,
    SensorLayout,
    build_channel_specs,
    concatenate_runs,
    extract_node_io,
    load_run,
    save_run,
)
from .errors import (
    AssemblyError,
    ConfigurationError,
    DataFormatError,
    EstimationError,
    IdentificationError,
    TunneltraceError,
)
from .mhe import (
    MheConfig,
    MovingHorizonEstimator,
    HorizonBuffer,
    PAPER_SENSOR_CASES,
    effective_horizon,
    resolve_weights,
    robustness_sweep,
    run_offline,
    solve_horizon,
)
from .modelio import load_tunnel_model, save_tunnel_model
from .simulate import (
    HrrProfile,
    ProtocolRuns,
    SimConfig,
    TimeSeriesRun,
    TunnelGeometry,
    characteristic_fire_diameter,
    generate_protocol_runs,
    hrr_at,
    simulate_ground_truth,
)
from .sysid import (
    IdentificationConfig,
    NodeModel,
    build_block_hankel,
    estimate_initial_state,
    identify_from_run,
    rmse,
    simulate_node,
    subspace_identify,
    validation_report,
)

__version__ = "0.1.0"
