import numpy as np
import pytest

from tunneltrace import (
    ConfigurationError,
    DataFormatError,
    NodeChannelSpec,
    SensorLayout,
    build_channel_specs,
    concatenate_runs,
    extract_node_io,
    load_run,
    save_run,
)
from tunneltrace.dataio import channel_column, run_header
from tunneltrace.simulate import TimeSeriesRun


def tiny_run(n_nodes=4, length=30, dt=1.0, seed=0):
    rng = np.random.default_rng(seed)
    times = np.arange(length) * dt
    return TimeSeriesRun(
        times=times,
        hrr=rng.uniform(0, 500, length),
        ambient=np.full(length, 25.0),
        node_temperature=25.0 + rng.uniform(0, 40, (length, n_nodes)),
        node_smoke=rng.uniform(0, 1e-4, (length, n_nodes)),
        metadata={"capacity_ah": 60.0, "ambient_c": 25.0, "seed": 0},
    )


class TestSensorLayout:
    def test_valid(self):
        layout = SensorLayout((10, 1, 5), 10)
        assert layout.sensor_nodes == (1, 5, 10)

    def test_empty_rejected(self):
        with pytest.raises(ConfigurationError):
            SensorLayout((), 10)

    def test_out_of_range_rejected(self):
        with pytest.raises(ConfigurationError):
            SensorLayout((1, 11), 10)


class TestChannelSpecs:
    def test_thermal_fire_wiring(self):
        spec = NodeChannelSpec.create(1, "thermal", True)
        assert spec.input_channel_names == ("Q", "T_amb")
        assert spec.output_channel_name == "T_1"
        assert spec.upstream_channel is None

    def test_thermal_interior_wiring(self):
        spec = NodeChannelSpec.create(4, "thermal", False)
        assert spec.input_channel_names == ("T_3", "T_amb")
        assert spec.upstream_channel == "T_3"

    def test_smoke_fire_wiring(self):
        spec = NodeChannelSpec.create(1, "smoke", True)
        assert spec.input_channel_names == ("Q", "T_1", "T_amb")
        assert spec.output_channel_name == "S_1"

    def test_smoke_interior_wiring(self):
        spec = NodeChannelSpec.create(5, "smoke", False)
        assert spec.input_channel_names == ("S_4", "T_5", "T_amb")
        assert spec.output_channel_name == "S_5"

    def test_node_one_must_be_fire(self):
        with pytest.raises(ConfigurationError):
            NodeChannelSpec.create(1, "thermal", False)

    def test_full_chain_specs(self):
        thermal, smoke = build_channel_specs(10, {1})
        assert len(thermal) == len(smoke) == 10
        assert thermal[0].fire_node and not thermal[1].fire_node
        assert smoke[9].input_channel_names == ("S_9", "T_10", "T_amb")


class TestSaveLoad:
    def test_round_trip_identity(self, tmp_path):
        run = tiny_run()
        path = tmp_path / "run.csv"
        save_run(run, path)
        assert load_run(path) == run

    def test_header_exact(self, tmp_path):
        run = tiny_run(n_nodes=3)
        path = tmp_path / "run.csv"
        save_run(run, path)
        lines = path.read_text().splitlines()
        header = next(l for l in lines if not l.startswith("#"))
        assert header == "t,Q,T_amb,T_1,T_2,T_3,S_1,S_2,S_3"

    def test_missing_column_named(self, tmp_path):
        path = tmp_path / "bad.csv"
        cols = run_header(10).split(",")
        cols.remove("S_3")
        path.write_text(",".join(cols) + "\n" + ",".join(["0"] * len(cols)) + "\n")
        with pytest.raises(DataFormatError, match="S_3"):
            load_run(path)

    def test_non_uniform_grid_named(self, tmp_path):
        path = tmp_path / "bad.csv"
        header = run_header(1)
        rows = ["0,0,25,25,0", "1,0,25,25,0", "3,0,25,25,0"]
        path.write_text(header + "\n" + "\n".join(rows) + "\n")
        with pytest.raises(DataFormatError, match="non-uniform grid"):
            load_run(path)

    def test_ragged_row_named(self, tmp_path):
        path = tmp_path / "bad.csv"
        header = run_header(1)
        rows = ["0,0,25,25,0", "1,0,25,25", "2,0,25,25,0"]
        path.write_text(header + "\n" + "\n".join(rows) + "\n")
        with pytest.raises(DataFormatError, match="row 3"):
            load_run(path)

    def test_concatenated_round_trip_keeps_boundaries(self, tmp_path):
        joined = concatenate_runs([tiny_run(seed=1), tiny_run(seed=2)])
        path = tmp_path / "joined.csv"
        save_run(joined, path)
        assert load_run(path).segment_boundaries == joined.segment_boundaries


class TestConcatenate:
    def test_lengths_add_with_boundary(self):
        a, b = tiny_run(length=600), tiny_run(length=600, seed=1)
        joined = concatenate_runs([a, b])
        assert len(joined) == 1200
        assert joined.segment_boundaries == (0, 600)

    def test_single_run_identity(self):
        a = tiny_run()
        assert concatenate_runs([a]) is a

    def test_mismatched_node_count_rejected(self):
        with pytest.raises(ConfigurationError):
            concatenate_runs([tiny_run(n_nodes=4), tiny_run(n_nodes=5)])

    def test_mismatched_sample_time_rejected(self):
        with pytest.raises(ConfigurationError):
            concatenate_runs([tiny_run(dt=1.0), tiny_run(dt=2.0)])

    def test_signals_stack_in_order(self):
        a, b = tiny_run(seed=1), tiny_run(seed=2)
        joined = concatenate_runs([a, b])
        np.testing.assert_array_equal(joined.node_temperature[: len(a)], a.node_temperature)
        np.testing.assert_array_equal(joined.node_temperature[len(a) :], b.node_temperature)


class TestExtractNodeIo:
    def test_thermal_fire_node(self):
        run = tiny_run()
        u, y = extract_node_io(run, NodeChannelSpec.create(1, "thermal", True))
        np.testing.assert_array_equal(u[:, 0], run.hrr)
        np.testing.assert_array_equal(u[:, 1], run.ambient)
        np.testing.assert_array_equal(y, run.node_temperature[:, 0])

    def test_smoke_interior_node(self):
        run = tiny_run()
        u, y = extract_node_io(run, NodeChannelSpec.create(3, "smoke", False))
        np.testing.assert_array_equal(u[:, 0], run.node_smoke[:, 1])
        np.testing.assert_array_equal(u[:, 1], run.node_temperature[:, 2])
        np.testing.assert_array_equal(u[:, 2], run.ambient)
        np.testing.assert_array_equal(y, run.node_smoke[:, 2])

    def test_lossless_and_stable_ordering(self):
        run = tiny_run()
        spec = NodeChannelSpec.create(2, "thermal", False)
        u1, y1 = extract_node_io(run, spec)
        u2, y2 = extract_node_io(run, spec)
        np.testing.assert_array_equal(u1, u2)
        np.testing.assert_array_equal(y1, y2)

    def test_unknown_channel_rejected(self):
        run = tiny_run(n_nodes=4)
        with pytest.raises(DataFormatError, match="T_9"):
            channel_column(run, "T_9")
