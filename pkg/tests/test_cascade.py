import numpy as np
import pytest
import scipy.linalg

from tunneltrace import (
    AssemblyError,
    NodeChannelSpec,
    SensorLayout,
    assemble_cascade,
    discretize,
    extract_node_io,
    observability_check,
    open_loop_simulate,
    simulate_node,
)
from tunneltrace.cascade import (
    DiscreteModel,
    build_tunnel_model,
    equilibrium_state,
    rollout_discrete,
    thermal_input_matrix,
)
from tunneltrace.simulate import HrrProfile, SimConfig, simulate_ground_truth
from tunneltrace.sysid import NodeModel


def scalar_node(node_index, kind, fire, a, b, c=1.0, d=None):
    spec = NodeChannelSpec.create(node_index, kind, fire)
    m = len(spec.input_channel_names)
    b = np.asarray(b, dtype=float).reshape(1, m)
    d_mat = np.zeros((1, m)) if d is None else np.asarray(d, dtype=float).reshape(1, m)
    return NodeModel(
        kind=kind, node_index=node_index, order=1,
        a=np.array([[a]]), b=b, c=np.array([[c]]), d=d_mat, sample_time=1.0,
        channel_spec=spec,
    )


class TestAssembleCascade:
    def test_single_fire_node_equals_node_model(self):
        node = scalar_node(1, "thermal", True, a=-0.3, b=[0.5, 0.2])
        chain = assemble_cascade([node], {1}, SensorLayout((1,), 1))
        np.testing.assert_array_equal(chain.a, node.a)
        np.testing.assert_array_equal(chain.b, node.b)
        np.testing.assert_array_equal(chain.c_full, node.c)

    def test_two_node_substitution(self):
        # upstream output feeds node 2: A = [[a1,0],[b21,a2]], B = [[b11,b12],[0,b22]]
        a1, b11, b12 = -0.4, 0.7, 0.3
        a2, b21, b22 = -0.6, 0.9, 0.1
        n1 = scalar_node(1, "thermal", True, a=a1, b=[b11, b12])
        n2 = scalar_node(2, "thermal", False, a=a2, b=[b21, b22])
        chain = assemble_cascade([n1, n2], {1}, SensorLayout((1, 2), 2))
        np.testing.assert_allclose(chain.a, [[a1, 0.0], [b21, a2]])
        np.testing.assert_allclose(chain.b, [[b11, b12], [0.0, b22]])

    def test_internal_feedthrough_rejected(self):
        n1 = scalar_node(1, "thermal", True, a=-0.4, b=[0.7, 0.3])
        n2 = scalar_node(2, "thermal", False, a=-0.6, b=[0.9, 0.1], d=[0.5, 0.0])
        with pytest.raises(AssemblyError, match="feedthrough"):
            assemble_cascade([n1, n2], {1}, SensorLayout((1,), 2))

    def test_mixed_kinds_rejected(self):
        n1 = scalar_node(1, "thermal", True, a=-0.4, b=[0.7, 0.3])
        n2 = scalar_node(2, "smoke", False, a=-0.6, b=[0.9, 0.1, 0.0])
        with pytest.raises(AssemblyError, match="mixed"):
            assemble_cascade([n1, n2], {1}, SensorLayout((1,), 2))

    def test_compact_equals_sequential_rollout(self, tunnel_model, validation_run):
        # oracle: feed each identified node its upstream neighbor's simulated
        # output, node by node; must match the compact rollout exactly
        run = validation_run
        dt = run.sample_time
        dm = discretize(tunnel_model.thermal, dt)
        u_chain = thermal_input_matrix(run)
        _, compact_outputs, _ = rollout_discrete(dm, u_chain, np.zeros(dm.state_dim))

        upstream = None
        for i, node in enumerate(tunnel_model.thermal_nodes):
            if node.channel_spec.fire_node:
                u_node = np.column_stack([run.hrr, run.ambient])
            else:
                u_node = np.column_stack([upstream, run.ambient])
            y_node = simulate_node(node, u_node, dt=dt)
            gap = np.max(np.abs(y_node - compact_outputs[:, i]))
            assert gap <= 1e-9, f"node {i + 1}: gap {gap}"
            upstream = y_node

    def test_smoke_chain_compact_equals_sequential(self, tunnel_model, validation_run):
        run = validation_run
        dt = run.sample_time
        dm = discretize(tunnel_model.smoke, dt)
        temps = run.node_temperature
        u_chain = np.column_stack([run.hrr, temps, run.ambient])
        _, compact_outputs, _ = rollout_discrete(dm, u_chain, np.zeros(dm.state_dim))

        upstream = None
        for i, node in enumerate(tunnel_model.smoke_nodes):
            first = run.hrr if node.channel_spec.fire_node else upstream
            u_node = np.column_stack([first, temps[:, i], run.ambient])
            y_node = simulate_node(node, u_node, dt=dt)
            gap = np.max(np.abs(y_node - compact_outputs[:, i]))
            assert gap <= 1e-9, f"smoke node {i + 1}: gap {gap}"
            upstream = y_node


class TestDiscretize:
    def test_zero_dynamics_gives_identity(self):
        node = scalar_node(1, "thermal", True, a=0.0, b=[1.0, 0.0])
        chain = assemble_cascade([node], {1}, SensorLayout((1,), 1))
        dm = discretize(chain, 0.7)
        np.testing.assert_array_equal(dm.ad, np.eye(1))

    def test_scalar_against_exponential_oracle(self):
        node = scalar_node(1, "thermal", True, a=-1.0, b=[1.0, 0.0])
        chain = assemble_cascade([node], {1}, SensorLayout((1,), 1))
        dm = discretize(chain, 0.1)
        assert dm.ad[0, 0] == pytest.approx(0.9, abs=1e-15)
        exact = float(scipy.linalg.expm(np.array([[-0.1]]))[0, 0])
        assert exact == pytest.approx(0.904837, abs=1e-6)
        assert abs(dm.ad[0, 0] - exact) < 0.1 * 0.1  # O(dt^2) gap

    def test_bd_is_dt_times_b(self):
        node = scalar_node(1, "smoke", True, a=-0.5, b=[2.0, 3.0, -1.0])
        chain = assemble_cascade([node], {1}, SensorLayout((1,), 1))
        dm = discretize(chain, 0.25)
        np.testing.assert_array_equal(dm.bd, 0.25 * chain.b)

    def test_nonpositive_dt_rejected(self):
        node = scalar_node(1, "thermal", True, a=-0.5, b=[1.0, 0.0])
        chain = assemble_cascade([node], {1}, SensorLayout((1,), 1))
        with pytest.raises(AssemblyError):
            discretize(chain, 0.0)


class TestObservability:
    def test_repeated_identity_not_observable(self):
        dm = DiscreteModel(
            ad=np.eye(2), bd=np.zeros((2, 1)), c=np.array([[1.0, 0.0]]),
            d=np.zeros((1, 1)), dt=1.0, c_full=np.array([[1.0, 0.0]]),
            d_full=np.zeros((1, 1)),
        )
        res = observability_check(dm)
        assert res.rank == 1 and not res.observable

    def test_full_output_always_observable(self, rng):
        n = 5
        ad = rng.standard_normal((n, n)) * 0.2 + np.eye(n) * 0.5
        dm = DiscreteModel(
            ad=ad, bd=np.zeros((n, 1)), c=np.eye(n), d=np.zeros((n, 1)),
            dt=1.0, c_full=np.eye(n), d_full=np.zeros((n, 1)),
        )
        assert observability_check(dm).observable

    def test_default_chain_with_sparse_sensors_observable(self, tunnel_model):
        for chain in (tunnel_model.thermal, tunnel_model.smoke):
            res = observability_check(discretize(chain, 1.0))
            assert res.observable, f"{chain.kind}: rank {res.rank}/{res.state_dim}"

    def test_invariant_under_well_conditioned_similarity(self, tunnel_model, rng):
        dm = discretize(tunnel_model.thermal, 1.0)
        n = dm.state_dim
        q, _ = np.linalg.qr(rng.standard_normal((n, n)))
        t = q @ np.diag(rng.uniform(0.5, 2.0, n))
        t_inv = np.linalg.inv(t)
        transformed = DiscreteModel(
            ad=t_inv @ dm.ad @ t, bd=t_inv @ dm.bd, c=dm.c @ t, d=dm.d,
            dt=dm.dt, c_full=dm.c_full @ t, d_full=dm.d_full,
        )
        assert observability_check(transformed).observable == observability_check(dm).observable

    def test_zero_output_matrix_rank_zero(self, tunnel_model):
        dm = discretize(tunnel_model.thermal, 1.0)
        zeroed = DiscreteModel(
            ad=dm.ad, bd=dm.bd, c=np.zeros_like(dm.c), d=dm.d, dt=dm.dt,
            c_full=dm.c_full, d_full=dm.d_full,
        )
        res = observability_check(zeroed)
        assert res.rank == 0 and not res.observable


class TestOpenLoop:
    def unit_gain_tunnel(self, n_nodes=3):
        """Hand-built cascade whose ambient DC gain is exactly one."""
        thermal = []
        smoke = []
        for i in range(1, n_nodes + 1):
            fire = i == 1
            a = -0.2
            if fire:
                thermal.append(scalar_node(i, "thermal", True, a=a, b=[0.01, 0.2]))
                smoke.append(scalar_node(i, "smoke", True, a=a, b=[1e-6, 0.0, 0.0]))
            else:
                # upstream gain 0.2/0.2 = 1 keeps the ambient equilibrium exact
                thermal.append(scalar_node(i, "thermal", False, a=a, b=[0.2, 0.0]))
                smoke.append(scalar_node(i, "smoke", False, a=a, b=[0.15, 0.0, 0.0]))
        layout = SensorLayout((1, n_nodes), n_nodes)
        return build_tunnel_model(thermal, smoke, {1}, layout)

    def zero_fire_run(self, n_nodes=3, ambient=25.0, length=200):
        cfg = SimConfig(
            geometry=__import__("tunneltrace").TunnelGeometry(
                node_count=n_nodes, node_positions=tuple(8.0 * i for i in range(n_nodes))
            ),
            hrr=HrrProfile(q_peak=0.0, t_peak=30.0, t_end=80.0),
            ambient_temperature=ambient,
            duration=float(length),
        )
        return simulate_ground_truth(cfg)

    def test_zero_hrr_equilibrium(self):
        model = self.unit_gain_tunnel()
        run = self.zero_fire_run()
        trace = open_loop_simulate(model, run, x0_mode="fit")
        np.testing.assert_allclose(trace.node_temperature, 25.0, atol=1e-9)
        np.testing.assert_allclose(trace.node_smoke, 0.0, atol=1e-9)

    def test_zero_initial_state_default(self, tunnel_model, validation_run):
        trace = open_loop_simulate(tunnel_model, validation_run)
        assert trace.diagnostics["x0_mode"] == "zero"
        assert trace.node_temperature[0, 0] == pytest.approx(0.0, abs=1e-12)

    def test_fit_initial_state_supported(self, tunnel_model, validation_run):
        trace = open_loop_simulate(tunnel_model, validation_run, x0_mode="fit")
        zero = open_loop_simulate(tunnel_model, validation_run)
        assert np.mean(list(trace.rmse_temperature.values())) <= np.mean(
            list(zero.rmse_temperature.values())
        )

    def test_rmse_table_per_node(self, baseline_trace, validation_run):
        assert sorted(baseline_trace.rmse_temperature) == list(range(1, 11))
        assert sorted(baseline_trace.rmse_smoke) == list(range(1, 11))

    def test_divergence_guard_truncates(self):
        # bypass stability conventions on purpose: a > 0 diverges under Euler
        thermal = [
            scalar_node(1, "thermal", True, a=30.0, b=[50.0, 0.0]),
            scalar_node(2, "thermal", False, a=-0.2, b=[1.0, 0.0]),
        ]
        smoke = [
            scalar_node(1, "smoke", True, a=-0.2, b=[1e-6, 0.0, 0.0]),
            scalar_node(2, "smoke", False, a=-0.2, b=[0.5, 0.0, 0.0]),
        ]
        model = build_tunnel_model(thermal, smoke, {1}, SensorLayout((1, 2), 2))
        run = self.zero_fire_run(n_nodes=2)
        run.hrr[:] = 500.0
        trace = open_loop_simulate(model, run)
        assert trace.diagnostics["diverged_at"] is not None
        assert len(trace.times) < len(run.times)

    def test_smoke_clamped_in_reports_raw_retained(self, primary_trace):
        raw = primary_trace.node_smoke
        reported = primary_trace.smoke_reported
        assert np.all(reported >= 0.0)
        assert raw.min() <= reported.min()


class TestEquilibrium:
    def test_fixed_point(self, tunnel_model):
        dm = discretize(tunnel_model.thermal, 1.0)
        u0 = np.array([0.0, 25.0])
        z_eq = equilibrium_state(dm, u0)
        z_next = dm.ad @ z_eq + dm.bd @ u0
        np.testing.assert_allclose(z_next, z_eq, atol=1e-8)
