"""Shared fixtures: the protocol scenario matrix and the identified model.

Building these once per session keeps the suite fast; every consumer treats
them as read-only.
"""

import numpy as np
import pytest

from tunneltrace import (
    IdentificationConfig,
    MheConfig,
    SensorLayout,
    SimConfig,
    build_tunnel_model,
    build_channel_specs,
    concatenate_runs,
    generate_protocol_runs,
    identify_from_run,
    open_loop_simulate,
    run_offline,
)

PRIMARY_SENSORS = (1, 5, 10)


@pytest.fixture(scope="session")
def protocol():
    return generate_protocol_runs(SimConfig())


@pytest.fixture(scope="session")
def train_run(protocol):
    return concatenate_runs(protocol.train)


@pytest.fixture(scope="session")
def validation_run(protocol):
    return protocol.validation


@pytest.fixture(scope="session")
def tunnel_model(train_run):
    thermal_specs, smoke_specs = build_channel_specs(train_run.node_count, {1})
    cfg = IdentificationConfig()
    thermal = [identify_from_run(train_run, s, cfg) for s in thermal_specs]
    smoke = [identify_from_run(train_run, s, cfg) for s in smoke_specs]
    layout = SensorLayout(PRIMARY_SENSORS, train_run.node_count)
    return build_tunnel_model(thermal, smoke, {1}, layout)


@pytest.fixture(scope="session")
def baseline_trace(tunnel_model, validation_run):
    return open_loop_simulate(tunnel_model, validation_run)


@pytest.fixture(scope="session")
def primary_trace(tunnel_model, validation_run):
    layout = SensorLayout(PRIMARY_SENSORS, validation_run.node_count)
    return run_offline(tunnel_model, validation_run, layout, MheConfig(), include_open_loop=False)


@pytest.fixture(scope="session")
def sensor_sweep(tunnel_model, validation_run):
    from tunneltrace import robustness_sweep

    return robustness_sweep(tunnel_model, validation_run, MheConfig())


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240811)
