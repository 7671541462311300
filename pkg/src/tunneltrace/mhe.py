"""Constrained moving-horizon estimation over the discrete cascade models.

Each step solves a convex quadratic program over the trajectory of the last
W states: measurement residuals weighted by R^-1, dynamics residuals (process
noise, soft) weighted by Q_w^-1, and an arrival term anchoring the window's
first state to a stored prior with weight lambda. Physical output bounds
(smoke and temperature) are enforced with a primal active-set method on top
of the factorized normal equations. The thermal chain is solved first; its
reconstructed temperatures feed the smoke chain's input vector within the
same step.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from .cascade import (
    DiscreteModel,
    EstimateTrace,
    TunnelModel,
    discretize,
    equilibrium_state,
    observability_check,
    open_loop_simulate,
    smoke_input_matrix,
    thermal_input_matrix,
)
from .dataio import SensorLayout
from .errors import EstimationError
from .sysid import rmse

PAPER_SENSOR_CASES: dict[str, tuple[int, ...]] = {
    "case1": (1, 5),
    "case2": (5,),
    "case3": (5, 10),
    "case4": (1, 5, 10),
}


@dataclass(frozen=True)
class MheConfig:
    """Horizon length, weights, bounds, and solver limits.

    Weights may be given explicitly (scalar or full matrix). When left None
    they are scaled from the measured signal's dynamic range so that both
    chains behave identically in their own units: R = (r_relative*range)^2 I,
    Q_w = (q_relative*range)^2 I, lambda = 1/range^2.
    """

    window: int = 20
    r_weight: float | None = None
    q_weight: float | None = None
    arrival_weight: float | None = None
    r_relative: float = 1e-3
    q_relative: float = 1e-2
    temperature_lower: float | None = 0.0
    temperature_upper: float | None = None
    smoke_lower: float | None = 0.0
    smoke_upper: float | None = None
    constraints_enabled: bool = True
    solver_tolerance: float = 1e-9
    max_iterations: int = 500
    noise_sigma_temperature: float = 0.0
    noise_sigma_smoke: float = 0.0
    noise_seed: int = 0
    dt: float | None = None  # None -> take the run's sample time

    def __post_init__(self) -> None:
        if self.window < 1:
            raise EstimationError(f"window must be >= 1, got {self.window}")
        for name in ("r_weight", "q_weight", "arrival_weight"):
            val = getattr(self, name)
            if val is not None and np.isscalar(val) and val <= 0.0:
                raise EstimationError(f"{name} must be positive, got {val}")

    def bounds_for(self, kind: str) -> tuple[float | None, float | None]:
        if not self.constraints_enabled:
            return None, None
        if kind == "thermal":
            return self.temperature_lower, self.temperature_upper
        return self.smoke_lower, self.smoke_upper


def effective_horizon(k: int, window: int, lam: float) -> tuple[int, float]:
    """Warm-up rule: W_eff = k and lambda_eff = lambda*W/k until the first
    full window, then (W, lambda)."""
    if k < 1:
        raise EstimationError("step index starts at 1")
    if k < window:
        return k, lam * window / k
    return window, lam


@dataclass
class ChainWeights:
    """Inverse weighting matrices actually used in the cost."""

    r_inv: np.ndarray
    q_inv: np.ndarray
    lam: float


def resolve_weights(cfg: MheConfig, p: int, n_z: int, measured_range: float) -> ChainWeights:
    span = max(float(measured_range), 1e-12)

    def as_inv(value, size: int, auto_var: float) -> np.ndarray:
        if value is None:
            return np.eye(size) / auto_var
        if np.isscalar(value):
            return np.eye(size) / float(value)
        mat = np.asarray(value, dtype=float)
        if mat.shape != (size, size):
            raise EstimationError(f"weight matrix must be {size}x{size}, got {mat.shape}")
        return np.linalg.inv(mat)

    r_inv = as_inv(cfg.r_weight, p, (cfg.r_relative * span) ** 2)
    q_inv = as_inv(cfg.q_weight, n_z, (cfg.q_relative * span) ** 2)
    lam = cfg.arrival_weight if cfg.arrival_weight is not None else 1.0 / span**2
    return ChainWeights(r_inv=r_inv, q_inv=q_inv, lam=float(lam))


@dataclass
class HorizonBuffer:
    """Rolling measurement/input windows plus the arrival-cost prior."""

    window: int
    measurements: deque = field(default_factory=deque)
    inputs: deque = field(default_factory=deque)
    prior: np.ndarray | None = None

    def push(self, y: np.ndarray, u: np.ndarray) -> None:
        self.measurements.append(np.asarray(y, dtype=float))
        self.inputs.append(np.asarray(u, dtype=float))
        while len(self.measurements) > self.window:
            self.measurements.popleft()
            self.inputs.popleft()

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return np.vstack(self.measurements), np.vstack(self.inputs)

    def __len__(self) -> int:
        return len(self.measurements)


class _WindowQP:
    """Normal equations for one window size, with output-bound active set.

    The Hessian depends only on the model, weights, window length, and the
    arrival weight, so its Cholesky factor is built once and reused across
    steps; only the linear term changes with data.
    """

    def __init__(
        self,
        dm: DiscreteModel,
        w_eff: int,
        lam_eff: float,
        weights: ChainWeights,
        bounds: tuple[float | None, float | None],
        tol: float,
        max_iter: int,
    ) -> None:
        self.dm = dm
        self.w_eff = w_eff
        self.lam_eff = lam_eff
        self.weights = weights
        self.bounds = bounds
        self.tol = tol
        self.max_iter = max_iter

        n = dm.state_dim
        ad, c = dm.ad, dm.c
        r_inv, q_inv = weights.r_inv, weights.q_inv
        dim = w_eff * n
        h = np.zeros((dim, dim))
        ctrc = c.T @ r_inv @ c
        atqa = ad.T @ q_inv @ ad
        atq = ad.T @ q_inv
        qa = q_inv @ ad
        for j in range(w_eff):
            sl = slice(j * n, (j + 1) * n)
            h[sl, sl] += ctrc
            if j < w_eff - 1:
                nxt = slice((j + 1) * n, (j + 2) * n)
                h[sl, sl] += atqa
                h[nxt, nxt] += q_inv
                h[sl, nxt] -= atq
                h[nxt, sl] -= qa
        h[:n, :n] += lam_eff * np.eye(n)
        try:
            self._factor = scipy.linalg.cho_factor(h)
        except np.linalg.LinAlgError as exc:
            raise EstimationError(
                "normal matrix is singular; increase the arrival weight lambda"
            ) from exc
        self._h = h

    def _linear_term(self, ys: np.ndarray, us: np.ndarray, prior: np.ndarray) -> np.ndarray:
        dm, w = self.dm, self.w_eff
        n = dm.state_dim
        r_inv, q_inv = self.weights.r_inv, self.weights.q_inv
        g = np.zeros(w * n)
        for j in range(w):
            sl = slice(j * n, (j + 1) * n)
            g[sl] += dm.c.T @ r_inv @ (ys[j] - dm.d @ us[j])
            if j < w - 1:
                b_j = dm.bd @ us[j]
                g[sl] -= dm.ad.T @ q_inv @ b_j
                g[(j + 1) * n : (j + 2) * n] += q_inv @ b_j
        g[:n] += self.lam_eff * prior
        return g

    def _constraint_rows(self, us: np.ndarray) -> tuple[np.ndarray, np.ndarray] | None:
        """Stack output-bound rows G Z >= h over the whole window."""
        lower, upper = self.bounds
        if lower is None and upper is None:
            return None
        dm, w = self.dm, self.w_eff
        n = dm.state_dim
        n_out = dm.c_full.shape[0]
        rows = []
        rhs = []
        for j in range(w):
            feed = dm.d_full @ us[j]
            if lower is not None:
                block = np.zeros((n_out, w * n))
                block[:, j * n : (j + 1) * n] = dm.c_full
                rows.append(block)
                rhs.append(np.full(n_out, lower) - feed)
            if upper is not None:
                block = np.zeros((n_out, w * n))
                block[:, j * n : (j + 1) * n] = -dm.c_full
                rows.append(block)
                rhs.append(feed - np.full(n_out, upper))
        return np.vstack(rows), np.concatenate(rhs)

    def solve(
        self, ys: np.ndarray, us: np.ndarray, prior: np.ndarray
    ) -> tuple[np.ndarray, dict]:
        g = self._linear_term(ys, us, prior)
        z = scipy.linalg.cho_solve(self._factor, g)
        info = {"iterations": 0, "active_constraints": 0}

        cons = self._constraint_rows(us)
        if cons is None:
            return z.reshape(self.w_eff, -1), info
        g_mat, h_vec = cons
        if np.min(g_mat @ z - h_vec) >= -self.tol:
            return z.reshape(self.w_eff, -1), info

        active: list[int] = []
        z_unc = z
        last = z
        for it in range(1, self.max_iter + 1):
            if active:
                g_act = g_mat[active]
                hi_gt = scipy.linalg.cho_solve(self._factor, g_act.T)
                schur = g_act @ hi_gt
                try:
                    mu = np.linalg.solve(schur, h_vec[active] - g_act @ z_unc)
                except np.linalg.LinAlgError:
                    mu = np.linalg.lstsq(schur, h_vec[active] - g_act @ z_unc, rcond=None)[0]
                if np.min(mu) < -self.tol:
                    del active[int(np.argmin(mu))]
                    continue
                z = z_unc + hi_gt @ mu
            else:
                z = z_unc
            last = z
            slack = g_mat @ z - h_vec
            worst = int(np.argmin(slack))
            if slack[worst] >= -self.tol:
                info["iterations"] = it
                info["active_constraints"] = len(active)
                return z.reshape(self.w_eff, -1), info
            if worst in active:
                raise EstimationError(
                    f"active-set cycling on constraint {worst}; "
                    f"residual {-slack[worst]:.3e} (last iterate attached)",
                )
            active.append(worst)
        err = EstimationError(
            f"bound enforcement did not converge in {self.max_iter} iterations "
            f"(residual {-np.min(g_mat @ last - h_vec):.3e})"
        )
        err.last_iterate = last.reshape(self.w_eff, -1)
        raise err


def solve_horizon(
    dm: DiscreteModel,
    buffer: HorizonBuffer,
    weights: ChainWeights,
    lam_eff: float | None = None,
    bounds: tuple[float | None, float | None] = (None, None),
    tol: float = 1e-9,
    max_iter: int = 500,
) -> np.ndarray:
    """Solve one horizon window, returning the state trajectory (W_eff x n).

    The minimized cost sums R^-1-weighted measurement residuals over the
    window, Q_w^-1-weighted dynamics residuals between consecutive states,
    and the arrival term lam*||z_first - prior||^2.
    """
    if len(buffer) == 0:
        raise EstimationError("horizon buffer is empty")
    ys, us = buffer.arrays()
    prior = buffer.prior if buffer.prior is not None else np.zeros(dm.state_dim)
    lam = weights.lam if lam_eff is None else lam_eff
    qp = _WindowQP(dm, len(buffer), lam, weights, bounds, tol, max_iter)
    z, _ = qp.solve(ys, us, prior)
    return z


@dataclass
class StepResult:
    state_thermal: np.ndarray
    state_smoke: np.ndarray
    temperature: np.ndarray
    smoke: np.ndarray
    info: dict


class MovingHorizonEstimator:
    """Sequential thermal-then-smoke estimator over a run's measurement stream."""

    def __init__(
        self,
        model: TunnelModel,
        layout: SensorLayout,
        cfg: MheConfig,
        dt: float,
        weights_thermal: ChainWeights,
        weights_smoke: ChainWeights,
        z0_thermal: np.ndarray,
        z0_smoke: np.ndarray,
    ) -> None:
        self.model = model
        self.layout = layout
        self.cfg = cfg
        self.dm_t = discretize(model.thermal, dt, layout)
        self.dm_s = discretize(model.smoke, dt, layout)
        self.w_t = weights_thermal
        self.w_s = weights_smoke
        self.buf_t = HorizonBuffer(cfg.window, prior=np.asarray(z0_thermal, dtype=float))
        self.buf_s = HorizonBuffer(cfg.window, prior=np.asarray(z0_smoke, dtype=float))
        self.k = 0
        self._exo: deque = deque(maxlen=cfg.window)  # (hrr, ambient) pairs
        self._qp_cache: dict[tuple, _WindowQP] = {}
        self.zhat_t = np.asarray(z0_thermal, dtype=float)
        self.zhat_s = np.asarray(z0_smoke, dtype=float)

    def _qp(self, chain: str, w_eff: int, lam_eff: float) -> _WindowQP:
        key = (chain, w_eff, lam_eff)
        if key not in self._qp_cache:
            dm = self.dm_t if chain == "thermal" else self.dm_s
            weights = self.w_t if chain == "thermal" else self.w_s
            self._qp_cache[key] = _WindowQP(
                dm,
                w_eff,
                lam_eff,
                weights,
                self.cfg.bounds_for(chain),
                self.cfg.solver_tolerance,
                self.cfg.max_iterations,
            )
            # warm-up sizes are used once; keep only full-window factors hot
            if w_eff < self.cfg.window:
                qp = self._qp_cache.pop(key)
                return qp
        return self._qp_cache[key]

    def step(
        self,
        y_thermal: np.ndarray,
        y_smoke: np.ndarray,
        hrr: float,
        ambient: float,
    ) -> StepResult:
        """Advance one time index: buffer, solve thermal, splice estimated
        temperatures into the smoke inputs, solve smoke, update priors."""
        self.k += 1
        w = self.cfg.window
        self._exo.append((float(hrr), float(ambient)))
        self.buf_t.push(y_thermal, np.array([hrr, ambient]))
        # smoke input's temperature slots are rewritten each step from the
        # current thermal window solution; buffer a placeholder shape
        self.buf_s.push(y_smoke, np.zeros(self.dm_s.bd.shape[1]))

        w_eff_t, lam_eff_t = effective_horizon(self.k, w, self.w_t.lam)
        ys_t, us_t = self.buf_t.arrays()
        qp_t = self._qp("thermal", w_eff_t, lam_eff_t)
        z_t, info_t = qp_t.solve(ys_t, us_t, self.buf_t.prior)
        temps_window = z_t @ self.dm_t.c_full.T + us_t @ self.dm_t.d_full.T

        w_eff_s, lam_eff_s = effective_horizon(self.k, w, self.w_s.lam)
        exo = np.asarray(self._exo, dtype=float)
        us_s = np.column_stack([exo[:, 0], temps_window, exo[:, 1]])
        for j, u_row in enumerate(us_s):
            self.buf_s.inputs[j] = u_row
        ys_s, _ = self.buf_s.arrays()
        qp_s = self._qp("smoke", w_eff_s, lam_eff_s)
        z_s, info_s = qp_s.solve(ys_s, us_s, self.buf_s.prior)
        smoke_window = z_s @ self.dm_s.c_full.T + us_s @ self.dm_s.d_full.T

        if self.k >= w:
            self.buf_t.prior = (
                z_t[1].copy() if len(z_t) >= 2 else self.dm_t.ad @ z_t[0] + self.dm_t.bd @ us_t[0]
            )
            self.buf_s.prior = (
                z_s[1].copy() if len(z_s) >= 2 else self.dm_s.ad @ z_s[0] + self.dm_s.bd @ us_s[0]
            )

        self.zhat_t = z_t[-1]
        self.zhat_s = z_s[-1]
        return StepResult(
            state_thermal=z_t[-1],
            state_smoke=z_s[-1],
            temperature=temps_window[-1],
            smoke=smoke_window[-1],
            info={"thermal": info_t, "smoke": info_s},
        )


def _measured_range(values: np.ndarray) -> float:
    return float(np.max(values) - np.min(values))


def _project_to_bounds(
    dm: DiscreteModel,
    z: np.ndarray,
    u0: np.ndarray,
    bounds: tuple[float | None, float | None],
    tol: float = 1e-10,
    max_iter: int = 100,
) -> np.ndarray:
    """Nearest state whose outputs satisfy the box bounds (active-set, H=I)."""
    lower, upper = bounds
    if lower is None and upper is None:
        return z
    feed = dm.d_full @ u0
    rows = []
    rhs = []
    if lower is not None:
        rows.append(dm.c_full)
        rhs.append(np.full(dm.c_full.shape[0], lower) - feed)
    if upper is not None:
        rows.append(-dm.c_full)
        rhs.append(feed - np.full(dm.c_full.shape[0], upper))
    g_mat = np.vstack(rows)
    h_vec = np.concatenate(rhs)
    active: list[int] = []
    out = z
    for _ in range(max_iter):
        if active:
            g_act = g_mat[active]
            mu = np.linalg.lstsq(g_act @ g_act.T, h_vec[active] - g_act @ z, rcond=None)[0]
            if np.min(mu) < -tol:
                del active[int(np.argmin(mu))]
                continue
            out = z + g_act.T @ mu
        else:
            out = z
        slack = g_mat @ out - h_vec
        worst = int(np.argmin(slack))
        if slack[worst] >= -tol or worst in active:
            return out
        active.append(worst)
    return out


def run_offline(
    model: TunnelModel,
    run,
    layout: SensorLayout,
    cfg: MheConfig,
    z0_mode: str = "equilibrium",
    z0_thermal: np.ndarray | None = None,
    z0_smoke: np.ndarray | None = None,
    include_open_loop: bool = True,
) -> EstimateTrace:
    """Run the estimator over a whole recorded run.

    Measurements are the run's ground-truth columns at the sensor nodes,
    optionally with seeded additive Gaussian noise. The estimator refuses to
    run when the sensor matrix carries no state information (observability
    rank zero); partial observability is allowed and reported in the trace
    diagnostics.
    """
    if max(layout.sensor_nodes) > run.node_count:
        raise EstimationError(
            f"sensor nodes {layout.sensor_nodes} exceed run node count {run.node_count}"
        )
    dt = cfg.dt if cfg.dt is not None else run.sample_time
    dm_t = discretize(model.thermal, dt, layout)
    dm_s = discretize(model.smoke, dt, layout)
    obs_t = observability_check(dm_t)
    obs_s = observability_check(dm_s)
    if obs_t.rank == 0 or obs_s.rank == 0:
        raise EstimationError(
            "estimator refuses to run: observability rank is zero "
            f"(thermal rank {obs_t.rank}, smoke rank {obs_s.rank})"
        )

    sensors = [i - 1 for i in layout.sensor_nodes]
    meas_t = run.node_temperature[:, sensors].copy()
    meas_s = run.node_smoke[:, sensors].copy()
    rng = np.random.default_rng(cfg.noise_seed)
    if cfg.noise_sigma_temperature > 0.0:
        meas_t += cfg.noise_sigma_temperature * rng.standard_normal(meas_t.shape)
    if cfg.noise_sigma_smoke > 0.0:
        meas_s += cfg.noise_sigma_smoke * rng.standard_normal(meas_s.shape)

    weights_t = resolve_weights(cfg, len(sensors), dm_t.state_dim, _measured_range(meas_t))
    weights_s = resolve_weights(cfg, len(sensors), dm_s.state_dim, _measured_range(meas_s))

    if z0_mode not in ("equilibrium", "zero", "explicit"):
        raise EstimationError(f"unknown z0_mode {z0_mode!r}")
    if z0_mode == "equilibrium":
        u0_t = np.array([run.hrr[0], run.ambient[0]])
        z0_t = equilibrium_state(dm_t, u0_t)
        temps0 = dm_t.c_full @ z0_t + dm_t.d_full @ u0_t
        u0_s = np.concatenate(([run.hrr[0]], temps0, [run.ambient[0]]))
        z0_s = equilibrium_state(dm_s, u0_s)
    elif z0_mode == "zero":
        z0_t = np.zeros(dm_t.state_dim)
        z0_s = np.zeros(dm_s.state_dim)
    else:
        if z0_thermal is None or z0_smoke is None:
            raise EstimationError("explicit z0_mode requires both initial states")
        z0_t = np.asarray(z0_thermal, dtype=float)
        z0_s = np.asarray(z0_smoke, dtype=float)

    if cfg.constraints_enabled:
        u0_t = np.array([run.hrr[0], run.ambient[0]])
        z0_t = _project_to_bounds(dm_t, z0_t, u0_t, cfg.bounds_for("thermal"))
        temps0 = dm_t.c_full @ z0_t + dm_t.d_full @ u0_t
        u0_s = np.concatenate(([run.hrr[0]], temps0, [run.ambient[0]]))
        z0_s = _project_to_bounds(dm_s, z0_s, u0_s, cfg.bounds_for("smoke"))

    est = MovingHorizonEstimator(model, layout, cfg, dt, weights_t, weights_s, z0_t, z0_s)

    t_len = len(run)
    n = run.node_count
    temps = np.empty((t_len, n))
    smoke = np.empty((t_len, n))
    states_t = np.empty((t_len, dm_t.state_dim))
    states_s = np.empty((t_len, dm_s.state_dim))
    u0_t = np.array([run.hrr[0], run.ambient[0]])
    temps[0] = dm_t.c_full @ z0_t + dm_t.d_full @ u0_t
    smoke[0] = dm_s.c_full @ z0_s + dm_s.d_full @ np.concatenate(
        ([run.hrr[0]], temps[0], [run.ambient[0]])
    )
    states_t[0] = z0_t
    states_s[0] = z0_s

    iters = []
    active = []
    for k in range(1, t_len):
        res = est.step(meas_t[k], meas_s[k], run.hrr[k], run.ambient[k])
        temps[k] = res.temperature
        smoke[k] = res.smoke
        states_t[k] = res.state_thermal
        states_s[k] = res.state_smoke
        iters.append(res.info["thermal"]["iterations"] + res.info["smoke"]["iterations"])
        active.append(
            res.info["thermal"]["active_constraints"] + res.info["smoke"]["active_constraints"]
        )

    trace = EstimateTrace(
        times=run.times.copy(),
        node_temperature=temps,
        node_smoke=smoke,
        states_thermal=states_t,
        states_smoke=states_s,
        diagnostics={
            "mode": "mhe",
            "sensors": layout.sensor_nodes,
            "window": cfg.window,
            "z0_mode": z0_mode,
            "observability_rank_thermal": obs_t.rank,
            "observability_rank_smoke": obs_s.rank,
            "solver_iterations_total": int(np.sum(iters)) if iters else 0,
            "active_constraints_max": int(np.max(active)) if active else 0,
        },
    )
    for i in range(n):
        trace.rmse_temperature[i + 1] = rmse(temps[:, i], run.node_temperature[:, i])
        trace.rmse_smoke[i + 1] = rmse(smoke[:, i], run.node_smoke[:, i])

    if include_open_loop:
        baseline = open_loop_simulate(model, run)
        trace.diagnostics["open_loop_rmse_temperature"] = baseline.rmse_temperature
        trace.diagnostics["open_loop_rmse_smoke"] = baseline.rmse_smoke
    return trace


@dataclass
class SweepResult:
    """Per-case traces plus a flat comparison table."""

    traces: dict[str, EstimateTrace]
    layouts: dict[str, SensorLayout]
    summary: list[dict]


def robustness_sweep(
    model: TunnelModel,
    run,
    cfg: MheConfig,
    cases: dict[str, tuple[int, ...]] | None = None,
) -> SweepResult:
    """Run the standard sensor-placement cases with one model and config."""
    cases = dict(cases or PAPER_SENSOR_CASES)
    traces: dict[str, EstimateTrace] = {}
    layouts: dict[str, SensorLayout] = {}
    summary = []
    for name, sensors in cases.items():
        layout = SensorLayout(sensor_nodes=tuple(sensors), node_count=run.node_count)
        trace = run_offline(model, run, layout, cfg, include_open_loop=False)
        traces[name] = trace
        layouts[name] = layout
        summary.append(
            {
                "case": name,
                "sensors": ",".join(str(s) for s in sensors),
                "mean_rmse_temperature": float(np.mean(list(trace.rmse_temperature.values()))),
                "mean_rmse_smoke": float(np.mean(list(trace.rmse_smoke.values()))),
            }
        )
    return SweepResult(traces=traces, layouts=layouts, summary=summary)
