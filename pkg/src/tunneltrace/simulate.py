"""Surrogate ground-truth generator for tunnel temperature and smoke transport.

A ventilated tunnel is modeled as a 1-D domain carrying two coupled scalar
fields: gas temperature and smoke density. Both are driven by a battery
heat-release-rate (HRR) profile acting over a fixed fire extent, advected by
the ventilation flow, spread by an effective axial diffusivity (standing in
for turbulent mixing and buoyant recirculation), and relaxed by linear wall
heat loss / smoke deposition. Fields are sampled at probe nodes on a uniform
1 Hz grid, which is the data the identification and estimation stages consume.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError

# Air properties used by the characteristic fire diameter.
C_P_AIR = 1.005  # specific heat of air, kJ/(kg K)
GRAVITY = 9.8    # m/s^2

# Peak HRR per amp-hour of battery capacity (kW/Ah). The published HRR curves
# for large-format cells give shape but no absolute axis, so the magnitude is
# a documented, configurable scaling.
DEFAULT_Q_PEAK_PER_AH = 2.5

# (capacity_ah, ambient_c) pairs for the standard train/validate protocol.
TRAIN_SCENARIOS = ((60.0, 15.0), (243.0, 25.0))
VALIDATION_SCENARIO = (60.0, 25.0)


@dataclass(frozen=True)
class TunnelGeometry:
    """Tunnel dimensions, probe-node layout, and fire placement."""

    length: float = 80.0
    width: float = 9.0
    height: float = 5.5
    node_count: int = 10
    node_spacing: float = 8.0
    node_positions: tuple[float, ...] = ()
    fire_extent: tuple[float, float] = (3.0, 6.0)

    def __post_init__(self) -> None:
        if not self.node_positions:
            positions = tuple(i * self.node_spacing for i in range(self.node_count))
            object.__setattr__(self, "node_positions", positions)
        if self.node_count < 2:
            raise ConfigurationError(f"node_count must be >= 2, got {self.node_count}")
        if len(self.node_positions) != self.node_count:
            raise ConfigurationError(
                f"{len(self.node_positions)} node positions for node_count={self.node_count}"
            )
        pos = np.asarray(self.node_positions, dtype=float)
        if np.any(np.diff(pos) <= 0):
            raise ConfigurationError("node_positions must be strictly increasing")
        if pos[0] < 0 or pos[-1] > self.length:
            raise ConfigurationError("node_positions must lie within [0, length]")
        lo, hi = self.fire_extent
        if not (0.0 <= lo < hi <= self.length):
            raise ConfigurationError(f"fire_extent {self.fire_extent} not inside [0, {self.length}]")


@dataclass(frozen=True)
class HrrProfile:
    """Piecewise-linear heat release rate: 0 -> peak -> 0, in kilowatts.

    The curve rises linearly from zero at t=0 to q_peak at t_peak, decays
    linearly back to zero at t_end, and stays zero afterwards.
    """

    q_peak: float
    t_peak: float = 275.0
    t_end: float = 600.0
    capacity_ah: float | None = None

    def __post_init__(self) -> None:
        if not (0.0 < self.t_peak < self.t_end):
            raise ConfigurationError(
                f"need 0 < t_peak < t_end, got t_peak={self.t_peak}, t_end={self.t_end}"
            )
        if self.q_peak < 0.0:
            raise ConfigurationError(f"q_peak must be non-negative, got {self.q_peak}")

    @classmethod
    def from_capacity(
        cls,
        capacity_ah: float,
        q_peak_per_ah: float = DEFAULT_Q_PEAK_PER_AH,
        t_peak: float = 275.0,
        t_end: float = 600.0,
    ) -> "HrrProfile":
        """Scale peak HRR linearly with battery capacity."""
        return cls(
            q_peak=q_peak_per_ah * capacity_ah,
            t_peak=t_peak,
            t_end=t_end,
            capacity_ah=capacity_ah,
        )

    @property
    def total_energy_kj(self) -> float:
        """Area under the HRR triangle (kW * s = kJ)."""
        return 0.5 * self.q_peak * self.t_end


def hrr_at(profile: HrrProfile, t):
    """Evaluate the HRR profile at time(s) ``t`` (seconds).

    Returns a float for scalar input, an ndarray for array input.
    Negative times are rejected.
    """
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0.0):
        raise ValueError("HRR profile is undefined for negative time")
    knots_t = [0.0, profile.t_peak, profile.t_end]
    knots_q = [0.0, profile.q_peak, 0.0]
    out = np.interp(t_arr, knots_t, knots_q, left=0.0, right=0.0)
    if np.isscalar(t) or t_arr.ndim == 0:
        return float(out)
    return out


def characteristic_fire_diameter(q_kw: float, rho_inf: float, t_inf_k: float) -> float:
    """Characteristic fire diameter D* = (Q / (rho c_p T sqrt(g)))^(2/5), meters.

    ``q_kw`` is the heat release rate in kW, ``rho_inf`` the ambient air
    density in kg/m^3, ``t_inf_k`` the ambient temperature in kelvin. The
    length scale is the standard yardstick for judging CFD grid fineness.
    """
    if q_kw <= 0.0 or rho_inf <= 0.0 or t_inf_k <= 0.0:
        raise ValueError("characteristic_fire_diameter requires strictly positive inputs")
    return (q_kw / (rho_inf * C_P_AIR * t_inf_k * math.sqrt(GRAVITY))) ** 0.4


@dataclass(frozen=True)
class SimConfig:
    """Full configuration of one surrogate run.

    Transport coefficients are effective 1-D values: diffusivities fold in
    turbulent mixing, the loss/deposition rates fold in wall exchange. Source
    gains convert HRR (kJ/s) into field injection integrated over the fire
    extent: temperature_source_gain has units K*m/kJ, smoke_source_gain
    kg/(m^2 kJ).
    """

    geometry: TunnelGeometry = field(default_factory=TunnelGeometry)
    hrr: HrrProfile = field(default_factory=lambda: HrrProfile.from_capacity(243.0))
    ambient_temperature: float = 25.0  # degrees C
    ventilation_velocity: float = 1.0  # m/s
    grid_spacing: float = 0.5          # m
    sample_time: float = 1.0           # s
    duration: float = 600.0            # s
    thermal_diffusivity: float = 6.0   # m^2/s
    wall_loss_rate: float = 0.02       # 1/s
    smoke_diffusivity: float = 4.5     # m^2/s
    smoke_deposition_rate: float = 0.02  # 1/s
    temperature_source_gain: float = 0.15   # K*m/kJ
    smoke_source_gain: float = 2.0e-7       # kg/(m^2 kJ)
    loss_variation: float = 0.35       # relative axial modulation of the loss
                                       # and deposition rates; rough walls and
                                       # cross-section changes make tunnel
                                       # segments decay at different rates
    rng_seed: int = 0
    solver_step: float | None = None   # s; None -> auto substep
    closed_outflow: bool = False       # zero advective flux at both ends

    def __post_init__(self) -> None:
        if self.ventilation_velocity <= 0.0:
            raise ConfigurationError("ventilation_velocity must be positive")
        if self.grid_spacing <= 0.0 or self.sample_time <= 0.0 or self.duration <= 0.0:
            raise ConfigurationError("grid_spacing, sample_time and duration must be positive")
        for name in (
            "thermal_diffusivity",
            "wall_loss_rate",
            "smoke_diffusivity",
            "smoke_deposition_rate",
            "temperature_source_gain",
            "smoke_source_gain",
        ):
            if getattr(self, name) < 0.0:
                raise ConfigurationError(f"{name} must be non-negative")
        if not (0.0 <= self.loss_variation < 1.0):
            raise ConfigurationError("loss_variation must be in [0, 1)")
        if self.solver_step is not None:
            cfl = self.ventilation_velocity * self.solver_step / self.grid_spacing
            if cfl > 1.0:
                raise ConfigurationError(
                    f"solver_step={self.solver_step} s violates the advective stability "
                    f"bound: velocity*step/grid_spacing = {cfl:.3f} > 1"
                )

    def stable_step(self) -> float:
        """Largest explicit step satisfying advection+diffusion+decay stability."""
        kappa = max(self.thermal_diffusivity, self.smoke_diffusivity)
        decay = max(self.wall_loss_rate, self.smoke_deposition_rate) * (1.0 + self.loss_variation)
        rate = (
            self.ventilation_velocity / self.grid_spacing
            + 2.0 * kappa / self.grid_spacing**2
            + decay
        )
        return 0.9 / rate


@dataclass
class TimeSeriesRun:
    """Uniformly sampled signals for one scenario.

    Columns: HRR (kW), ambient temperature (deg C), per-node temperature
    (deg C, T x N) and smoke density (kg/m^3, T x N). ``segment_boundaries``
    lists the start index of each concatenated segment (a single fresh run
    has boundaries ``(0,)``); downstream Hankel construction must not form
    windows that straddle a boundary.
    """

    times: np.ndarray
    hrr: np.ndarray
    ambient: np.ndarray
    node_temperature: np.ndarray
    node_smoke: np.ndarray
    metadata: dict = field(default_factory=dict)
    segment_boundaries: tuple[int, ...] = (0,)

    def __post_init__(self) -> None:
        self.times = np.asarray(self.times, dtype=float)
        self.hrr = np.asarray(self.hrr, dtype=float)
        self.ambient = np.asarray(self.ambient, dtype=float)
        self.node_temperature = np.atleast_2d(np.asarray(self.node_temperature, dtype=float))
        self.node_smoke = np.atleast_2d(np.asarray(self.node_smoke, dtype=float))
        self.validate()

    def validate(self) -> None:
        n = len(self.times)
        if not (
            len(self.hrr) == len(self.ambient)
            == self.node_temperature.shape[0] == self.node_smoke.shape[0] == n
        ):
            raise ConfigurationError("all signal columns must share one length")
        if self.node_temperature.shape[1] != self.node_smoke.shape[1]:
            raise ConfigurationError("temperature and smoke must cover the same nodes")
        if n >= 2:
            steps = np.diff(self.times)
            if not np.allclose(steps, steps[0], rtol=0.0, atol=1e-9 * max(1.0, steps[0])):
                raise ConfigurationError("non-uniform grid")
        if np.any(self.node_smoke < -1e-12):
            raise ConfigurationError("node_smoke must be non-negative")
        if np.any(self.node_temperature < self.ambient[:, None] - 0.5):
            raise ConfigurationError("node_temperature fell more than 0.5 C below ambient")
        if self.segment_boundaries[0] != 0 or any(
            b2 <= b1 for b1, b2 in zip(self.segment_boundaries, self.segment_boundaries[1:])
        ):
            raise ConfigurationError("segment_boundaries must start at 0 and increase")

    @property
    def sample_time(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def node_count(self) -> int:
        return self.node_temperature.shape[1]

    def __len__(self) -> int:
        return len(self.times)

    def segment_slices(self) -> list[slice]:
        starts = list(self.segment_boundaries)
        stops = starts[1:] + [len(self.times)]
        return [slice(a, b) for a, b in zip(starts, stops)]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TimeSeriesRun):
            return NotImplemented
        return (
            np.array_equal(self.times, other.times)
            and np.array_equal(self.hrr, other.hrr)
            and np.array_equal(self.ambient, other.ambient)
            and np.array_equal(self.node_temperature, other.node_temperature)
            and np.array_equal(self.node_smoke, other.node_smoke)
            and self.segment_boundaries == other.segment_boundaries
            and self.metadata == other.metadata
        )


def _fire_cell_weights(centers: np.ndarray, dx: float, extent: tuple[float, float]) -> np.ndarray:
    """Fraction of the fire extent overlapping each grid cell (sums to 1)."""
    lo, hi = extent
    left = centers - 0.5 * dx
    right = centers + 0.5 * dx
    overlap = np.clip(np.minimum(right, hi) - np.maximum(left, lo), 0.0, None)
    return overlap / (hi - lo)


def simulate_ground_truth(config: SimConfig) -> TimeSeriesRun:
    """Integrate the two 1-D transport equations and sample at the probe nodes.

    Explicit upwind advection in conservative flux form, central diffusion
    with zero-flux ends, linear relaxation (wall loss toward ambient, smoke
    deposition toward zero) and an HRR-proportional source over the fire
    extent. The internal step is chosen to satisfy the explicit stability
    bound; a user-forced ``solver_step`` that violates it is rejected.
    Deterministic: identical configs give identical runs.
    """
    geo = config.geometry
    dx = config.grid_spacing
    v = config.ventilation_velocity
    n_cells = max(3, int(round(geo.length / dx)))
    centers = (np.arange(n_cells) + 0.5) * dx
    fire_frac = _fire_cell_weights(centers, dx, geo.fire_extent)

    # smooth axial modulation keeps per-segment decay rates distinct
    phase = 2.0 * np.pi * centers / geo.length
    wall_loss = config.wall_loss_rate * (1.0 + config.loss_variation * np.sin(1.5 * phase))
    deposition = config.smoke_deposition_rate * (
        1.0 + config.loss_variation * np.sin(2.0 * phase + 0.7)
    )

    stable = config.stable_step()
    if config.solver_step is not None:
        if config.solver_step > stable / 0.9:
            raise ConfigurationError(
                f"solver_step={config.solver_step} s violates the explicit stability bound "
                f"(max stable step {stable / 0.9:.4f} s for this configuration)"
            )
        base_step = config.solver_step
    else:
        base_step = stable
    n_sub = max(1, int(math.ceil(config.sample_time / base_step)))
    dt = config.sample_time / n_sub

    n_samples = int(round(config.duration / config.sample_time)) + 1
    times = np.arange(n_samples) * config.sample_time
    amb = config.ambient_temperature

    temp = np.full(n_cells, amb)
    smoke = np.zeros(n_cells)
    node_pos = np.asarray(geo.node_positions)

    node_temp = np.empty((n_samples, geo.node_count))
    node_smoke = np.empty((n_samples, geo.node_count))
    hrr_series = np.empty(n_samples)

    def record(k: int) -> None:
        node_temp[k] = np.interp(node_pos, centers, temp)
        node_smoke[k] = np.interp(node_pos, centers, smoke)
        hrr_series[k] = hrr_at(config.hrr, times[k])

    def advect(phi: np.ndarray, inflow: float) -> np.ndarray:
        flux = np.empty(n_cells + 1)
        flux[1:] = v * phi
        flux[0] = v * inflow
        if config.closed_outflow:
            flux[0] = 0.0
            flux[-1] = 0.0
        return -(flux[1:] - flux[:-1]) / dx

    def diffuse(phi: np.ndarray, kappa: float) -> np.ndarray:
        padded = np.concatenate(([phi[0]], phi, [phi[-1]]))  # zero-gradient ends
        return kappa * (padded[2:] - 2.0 * phi + padded[:-2]) / dx**2

    record(0)
    for k in range(1, n_samples):
        t0 = times[k - 1]
        for j in range(n_sub):
            # midpoint HRR keeps injected totals exact for piecewise-linear profiles
            q = hrr_at(config.hrr, t0 + (j + 0.5) * dt)
            d_temp = (
                advect(temp, amb)
                + diffuse(temp, config.thermal_diffusivity)
                - wall_loss * (temp - amb)
                + config.temperature_source_gain * q * fire_frac / dx
            )
            d_smoke = (
                advect(smoke, 0.0)
                + diffuse(smoke, config.smoke_diffusivity)
                - deposition * smoke
                + config.smoke_source_gain * q * fire_frac / dx
            )
            temp = temp + dt * d_temp
            smoke = smoke + dt * d_smoke
        record(k)

    np.maximum(node_smoke, 0.0, out=node_smoke)  # clip round-off negatives
    metadata = {
        "capacity_ah": config.hrr.capacity_ah,
        "ambient_c": amb,
        "seed": config.rng_seed,
    }
    return TimeSeriesRun(
        times=times,
        hrr=hrr_series,
        ambient=np.full(n_samples, amb),
        node_temperature=node_temp,
        node_smoke=node_smoke,
        metadata=metadata,
    )


def total_smoke_mass(run_or_field, dx: float | None = None) -> float:
    """Spatial integral of smoke density (per unit cross-section), kg/m^2."""
    if dx is None:
        raise ValueError("dx is required")
    return float(np.sum(run_or_field) * dx)


@dataclass
class ProtocolRuns:
    """Training pair plus validation run for the identification protocol."""

    train: list[TimeSeriesRun]
    validation: TimeSeriesRun

    def all_runs(self) -> list[TimeSeriesRun]:
        return [*self.train, self.validation]


def generate_protocol_runs(
    base: SimConfig,
    train_scenarios: tuple[tuple[float, float], ...] = TRAIN_SCENARIOS,
    validation_scenario: tuple[float, float] = VALIDATION_SCENARIO,
    q_peak_per_ah: float = DEFAULT_Q_PEAK_PER_AH,
) -> ProtocolRuns:
    """Produce the standard scenario matrix from one base configuration.

    Scenarios are (battery capacity in Ah, ambient temperature in deg C);
    peak HRR scales linearly with capacity. Training runs cover distinct
    capacities and ambients so identification sees both behaviors; the
    validation scenario differs from each training scenario.
    """

    def one(capacity: float, ambient: float, role: str) -> TimeSeriesRun:
        cfg = replace(
            base,
            hrr=HrrProfile.from_capacity(
                capacity, q_peak_per_ah, t_peak=base.hrr.t_peak, t_end=base.hrr.t_end
            ),
            ambient_temperature=ambient,
        )
        run = simulate_ground_truth(cfg)
        run.metadata["role"] = role
        return run

    train = [one(cap, ambt, "train") for cap, ambt in train_scenarios]
    validation = one(*validation_scenario, "validation")
    return ProtocolRuns(train=train, validation=validation)
