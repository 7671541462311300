"""Per-node state-space identification from input/output data.

The estimator is a deterministic subspace method in the MOESP family:
block-Hankel matrices of inputs and outputs are compressed with a triangular
(LQ) factorization, the future outputs are projected along the future inputs
onto the past data, and an SVD of that projection yields the extended
observability matrix. C is its first block row, A follows from shift
invariance, and B, D and the per-segment initial states are recovered by a
linear least-squares fit of the simulated response. The identified discrete
quadruple is converted to continuous time through the matrix logarithm (with
a documented Euler-inverse fallback when no real logarithm exists).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .dataio import NodeChannelSpec, extract_node_io
from .errors import IdentificationError
from .simulate import TimeSeriesRun


@dataclass(frozen=True)
class IdentificationConfig:
    """Knobs for one subspace fit."""

    order: int = 2            # state dimension n
    hankel_rows: int = 10     # block rows s in the past/future Hankel split
    feedthrough: bool = False  # estimate D (True) or force D = 0 (False)
    enforce_stability: bool = True
    rank_tol: float = 1e-10   # minimum sigma_n / sigma_1 of the projection
    ridge: float = 0.0        # uniform shrinkage of the scaled B/D fit
    upstream_gain_ridge: float = 3e-4  # pull of the upstream channel's scaled
                              # DC gain toward upstream_gain_target; internal
                              # gains compound down the chain, so collinearity
                              # artifacts there must be damped
    upstream_gain_target: float = 1.0  # scaled units: peak-normalized
                              # transmission of a passive stage is about 1
    balance: bool = True      # return a balanced realization

    def __post_init__(self) -> None:
        if not (self.hankel_rows > self.order >= 1):
            raise IdentificationError(
                f"need hankel_rows > order >= 1, got s={self.hankel_rows}, n={self.order}"
            )
        if self.ridge < 0.0 or self.upstream_gain_ridge < 0.0:
            raise IdentificationError("ridge weights must be non-negative")


@dataclass
class NodeModel:
    """Continuous-time state-space quadruple for one node.

    ``a`` is in units of 1/s. ``discretization`` records how the continuous
    matrices relate to the identified discrete quadruple at ``sample_time``:
    "zoh" means a = logm(A_d)/dt with the matching zero-order-hold input map,
    "euler" means the fallback a = (A_d - I)/dt, b = B_d/dt used when A_d has
    no real logarithm. Either way :meth:`exact_discrete` reproduces the
    identified discrete behavior, which is what Markov fingerprints use.
    """

    kind: str
    node_index: int
    order: int
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray
    sample_time: float
    channel_spec: NodeChannelSpec | None = None
    discretization: str = "zoh"
    stability_reflected: bool = False
    euler_clamped: bool = False
    singular_values: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.a = np.atleast_2d(np.asarray(self.a, dtype=float))
        self.b = np.atleast_2d(np.asarray(self.b, dtype=float))
        self.c = np.atleast_2d(np.asarray(self.c, dtype=float))
        self.d = np.atleast_2d(np.asarray(self.d, dtype=float))
        n = self.order
        if self.a.shape != (n, n) or self.b.shape[0] != n or self.c.shape != (1, n):
            raise IdentificationError(
                f"inconsistent dimensions for order-{n} model: "
                f"A{self.a.shape} B{self.b.shape} C{self.c.shape}"
            )
        if self.d.shape != (1, self.b.shape[1]):
            raise IdentificationError("D must be 1 x m with m matching B")
        if self.channel_spec is not None and len(self.channel_spec.input_channel_names) != self.b.shape[1]:
            raise IdentificationError("channel spec does not match input count")

    @property
    def input_count(self) -> int:
        return self.b.shape[1]

    def euler_discrete(self, dt: float) -> tuple[np.ndarray, np.ndarray]:
        """First-order discretization A_d = I + dt*A, B_d = dt*B."""
        n = self.order
        return np.eye(n) + dt * self.a, dt * self.b

    def exact_discrete(self) -> tuple[np.ndarray, np.ndarray]:
        """Discrete quadruple at the identification rate, inverting the
        conversion that produced the continuous matrices."""
        dt = self.sample_time
        n = self.order
        if self.discretization == "euler":
            return self.euler_discrete(dt)
        m = self.b.shape[1]
        aug = np.zeros((n + m, n + m))
        aug[:n, :n] = self.a * dt
        aug[:n, n:] = self.b * dt
        big = scipy.linalg.expm(aug)
        return big[:n, :n], big[:n, n:]

    def markov_parameters(self, count: int) -> np.ndarray:
        """Impulse-response coefficients (count x m): D, CB_d, CA_dB_d, ..."""
        ad, bd = self.exact_discrete()
        out = np.empty((count, self.input_count))
        out[0] = self.d[0]
        power = bd
        for k in range(1, count):
            out[k] = (self.c @ power)[0]
            power = ad @ power
        return out


def rmse(a, b) -> float:
    """Root-mean-square error between two equal-length series."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    if len(a) == 0:
        raise ValueError("rmse needs at least one sample")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def build_block_hankel(
    signal: np.ndarray, rows: int, segment_boundaries: tuple[int, ...] = (0,)
) -> np.ndarray:
    """Block-Hankel matrix with ``rows`` block rows.

    ``signal`` is T x c (a 1-D array is treated as one channel). Column j of
    the result stacks samples j .. j+rows-1. Windows never straddle a segment
    boundary; each segment must be long enough to contribute at least one
    column.
    """
    sig = np.asarray(signal, dtype=float)
    if sig.ndim == 1:
        sig = sig[:, None]
    t_total, c = sig.shape
    starts = list(segment_boundaries)
    stops = starts[1:] + [t_total]
    blocks = []
    for seg_idx, (a, b) in enumerate(zip(starts, stops)):
        length = b - a
        if length < rows:
            raise IdentificationError(
                f"segment {seg_idx} has length {length}, too short for {rows} Hankel rows"
            )
        cols = length - rows + 1
        h = np.empty((rows * c, cols))
        for i in range(rows):
            h[i * c : (i + 1) * c, :] = sig[a + i : a + i + cols, :].T
        blocks.append(h)
    return np.hstack(blocks)


def _reflect_unstable(a: np.ndarray) -> tuple[np.ndarray, bool]:
    """Mirror eigenvalues with positive real part across the imaginary axis."""
    w, v = np.linalg.eig(a)
    if np.all(w.real <= 0.0):
        return a, False
    w_fixed = np.where(w.real > 0.0, -w.real + 1j * w.imag, w)
    a_fixed = (v @ np.diag(w_fixed) @ np.linalg.inv(v)).real
    return a_fixed, True


def _project_euler_stable(a: np.ndarray, dt: float, margin: float = 0.02) -> tuple[np.ndarray, bool]:
    """Scale eigenvalues into the first-order-discretization stability disk.

    A continuous eigenvalue with Re(lambda) < -2/dt is stable yet explodes
    under x(k+1) = (I + dt A)x(k), which is the discretization the whole
    pipeline runs on. Offending eigenvalues are shrunk radially (damping
    ratio preserved) until |1 + dt*lambda| <= 1 - margin.
    """
    w, v = np.linalg.eig(a)
    target = 1.0 - margin
    changed = False
    w_fixed = w.copy()
    for i, lam in enumerate(w):
        if abs(1.0 + dt * lam) > 1.0 and lam.real < 0.0:
            rho = min(1.0, -2.0 * lam.real / (dt * abs(lam) ** 2)) * target
            w_fixed[i] = rho * lam
            changed = True
    if not changed:
        return a, False
    a_fixed = (v @ np.diag(w_fixed) @ np.linalg.inv(v)).real
    return a_fixed, True


def _balance_realization(
    a: np.ndarray, b: np.ndarray, c: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Similarity transform equalizing the controllability and observability
    gramians. Input/output behavior is untouched; compact-cascade numerics
    (observability rank, horizon conditioning) improve markedly.

    Falls back to the original coordinates when the gramians are singular
    (for example a dead channel) or the dynamics are not strictly stable.
    """
    try:
        if np.max(np.linalg.eigvals(a).real) >= -1e-12:
            return a, b, c
        wc = scipy.linalg.solve_continuous_lyapunov(a, -b @ b.T)
        wo = scipy.linalg.solve_continuous_lyapunov(a.T, -c.T @ c)
        lc = np.linalg.cholesky((wc + wc.T) / 2.0)
        lo = np.linalg.cholesky((wo + wo.T) / 2.0)
        u, sv, vt = np.linalg.svd(lo.T @ lc)
        if sv[-1] < 1e-12 * sv[0]:
            return a, b, c
        s_half = np.diag(sv**-0.5)
        t = lc @ vt.T @ s_half          # x_old = T x_new
        t_inv = s_half @ u.T @ lo.T
        return t_inv @ a @ t, t_inv @ b, c @ t
    except np.linalg.LinAlgError:
        return a, b, c


def _continuous_a(ad: np.ndarray, dt: float) -> tuple[np.ndarray, str]:
    """Matrix-logarithm conversion of the state matrix, falling back to the
    Euler inverse when no real logarithm exists (eigenvalue on the closed
    negative real axis) or the log would be singular."""
    n = ad.shape[0]
    w = np.linalg.eigvals(ad)
    on_bad_axis = np.any((w.real <= 1e-12) & (np.abs(w.imag) < 1e-12))
    if not on_bad_axis:
        ac = scipy.linalg.logm(ad)
        imag_ok = np.max(np.abs(ac.imag)) < 1e-8 * max(1.0, np.max(np.abs(ac.real)))
        if imag_ok and np.min(np.abs(np.linalg.eigvals(ac))) > 1e-12:
            return ac.real / dt, "zoh"
    return (ad - np.eye(n)) / dt, "euler"


def _zero_model(
    n: int, m: int, dt: float, kind: str, node_index: int, spec: NodeChannelSpec | None
) -> NodeModel:
    return NodeModel(
        kind=kind,
        node_index=node_index,
        order=n,
        a=-np.eye(n),
        b=np.zeros((n, m)),
        c=np.zeros((1, n)),
        d=np.zeros((1, m)),
        sample_time=dt,
        channel_spec=spec,
        discretization="zoh",
    )


def subspace_identify(
    u: np.ndarray,
    y: np.ndarray,
    cfg: IdentificationConfig,
    dt: float,
    segment_boundaries: tuple[int, ...] = (0,),
    channel_spec: NodeChannelSpec | None = None,
    kind: str = "thermal",
    node_index: int = 0,
) -> NodeModel:
    """Identify one continuous-time node model from sampled input/output data."""
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        u = u[:, None]
    y = np.asarray(y, dtype=float).ravel()
    t_total, m = u.shape
    if len(y) != t_total:
        raise IdentificationError(f"u has {t_total} samples but y has {len(y)}")
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(y))):
        raise IdentificationError("identification data must be finite")
    n = cfg.order
    s = cfg.hankel_rows

    y_scale = float(np.max(np.abs(y)))
    if y_scale < 1e-14:
        return _zero_model(n, m, dt, kind, node_index, channel_spec)
    u_scale = np.maximum(np.max(np.abs(u), axis=0), 1e-14)
    us = u / u_scale
    ys = y / y_scale

    # Past/future split with 2s block rows; columns never cross segment joins.
    hank_u = build_block_hankel(us, 2 * s, segment_boundaries)
    hank_y = build_block_hankel(ys, 2 * s, segment_boundaries)
    u_past, u_future = hank_u[: s * m], hank_u[s * m :]
    y_past, y_future = hank_y[:s], hank_y[s:]
    past = np.vstack([u_past, y_past])

    stacked = np.vstack([u_future, past, y_future])
    r_fact = np.linalg.qr(stacked.T, mode="r")
    ell = r_fact.T
    r_uf = s * m
    r_wp = s * m + s
    # future outputs projected along future inputs, restricted to the past data
    proj = ell[r_uf + r_wp :, r_uf : r_uf + r_wp]

    u_svd, sv, _ = np.linalg.svd(proj, full_matrices=False)
    if sv[0] < 1e-14 or sv[n - 1] / sv[0] <= cfg.rank_tol:
        raise IdentificationError(
            f"projection is rank deficient: singular-value ratio "
            f"{sv[n - 1] / max(sv[0], 1e-300):.2e} <= {cfg.rank_tol:.0e} "
            "(input not persistently exciting for this order)"
        )
    gamma = u_svd[:, :n] * np.sqrt(sv[:n])
    c_d = gamma[0:1, :].copy()
    a_d, *_ = np.linalg.lstsq(gamma[:-1], gamma[1:], rcond=None)

    # Stabilize A before fitting the input maps: an identified pole outside
    # the unit circle would blow up the simulated-response regressors, and B
    # must be optimal for the A that is actually kept.
    a_c, scheme = _continuous_a(a_d, dt)
    reflected = False
    euler_clamped = False
    if cfg.enforce_stability:
        a_c, reflected = _reflect_unstable(a_c)
        a_c, euler_clamped = _project_euler_stable(a_c, dt)
    if scheme == "zoh":
        a_d_used = scipy.linalg.expm(a_c * dt)
    else:
        a_d_used = np.eye(n) + dt * a_c

    gain_ridge_channels: tuple[int, ...] = ()
    if (
        cfg.upstream_gain_ridge > 0.0
        and channel_spec is not None
        and channel_spec.upstream_channel is not None
    ):
        gain_ridge_channels = (0,)  # upstream output is always the first input
    b_d, d_mat, _ = _fit_input_maps(
        a_d_used,
        c_d,
        us,
        ys,
        cfg.feedthrough,
        segment_boundaries,
        cfg.ridge,
        gain_ridge_channels,
        cfg.upstream_gain_ridge,
        cfg.upstream_gain_target,
    )

    # undo channel scaling: y = y_scale * (C x + D u/u_scale)
    c_d = y_scale * c_d
    d_mat = y_scale * d_mat / u_scale
    b_d = b_d / u_scale

    if scheme == "zoh":
        b_c = a_c @ np.linalg.solve(a_d_used - np.eye(n), b_d)
    else:
        b_c = b_d / dt

    if cfg.balance:
        a_c, b_c, c_d = _balance_realization(a_c, b_c, c_d)

    return NodeModel(
        kind=kind,
        node_index=node_index,
        order=n,
        a=a_c,
        b=b_c,
        c=c_d,
        d=d_mat,
        sample_time=dt,
        channel_spec=channel_spec,
        discretization=scheme,
        stability_reflected=reflected,
        euler_clamped=euler_clamped,
        singular_values=sv.copy(),
    )


def _fit_input_maps(
    a_d: np.ndarray,
    c_d: np.ndarray,
    u: np.ndarray,
    y: np.ndarray,
    feedthrough: bool,
    segment_boundaries: tuple[int, ...],
    ridge: float = 0.0,
    gain_ridge_channels: tuple[int, ...] = (),
    gain_ridge: float = 0.0,
    gain_target: float = 0.0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Least-squares fit of B, D and per-segment initial states.

    With A and C fixed, the simulated output is linear in (B, D, x0): the
    response to B = e_i on channel l is the rollout of u_l through the pair
    (A, e_i), and the free response to x0 = e_i is C A^k e_i. One design
    matrix covers all segments, sharing B and D but giving each segment its
    own initial state. Initial states are never penalized; ``ridge`` shrinks
    all B/D coefficients, while ``gain_ridge`` pulls the DC gain of the named
    channels toward ``gain_target`` (a basis-invariant quantity, so weak
    internal modes are not distorted).
    """
    n = a_d.shape[0]
    t_total, m = u.shape
    starts = list(segment_boundaries)
    stops = starts[1:] + [t_total]
    n_seg = len(starts)

    n_b = n * m
    n_d = m if feedthrough else 0
    cols = n_b + n_d + n * n_seg
    design = np.zeros((t_total, cols))

    for seg_idx, (a0, b0) in enumerate(zip(starts, stops)):
        length = b0 - a0
        u_seg = u[a0:b0]
        # free response columns for this segment's x0
        x = np.eye(n)
        for k in range(length):
            design[a0 + k, n_b + n_d + seg_idx * n : n_b + n_d + (seg_idx + 1) * n] = c_d @ x
            x = a_d @ x
        # forced response columns, one rollout per (state unit, input channel)
        for i in range(n):
            e_i = np.zeros(n)
            e_i[i] = 1.0
            for l in range(m):
                xk = np.zeros(n)
                col = np.empty(length)
                for k in range(length):
                    col[k] = (c_d @ xk)[0]
                    xk = a_d @ xk + e_i * u_seg[k, l]
                design[a0:b0, i * m + l] = col
        if feedthrough:
            design[a0:b0, n_b : n_b + m] = u_seg

    penalties = []
    targets = []
    if ridge > 0.0:
        block = np.zeros((n_b + n_d, cols))
        block[:, : n_b + n_d] = ridge * np.sqrt(t_total) * np.eye(n_b + n_d)
        penalties.append(block)
        targets.append(np.zeros(n_b + n_d))
    if gain_ridge > 0.0 and gain_ridge_channels:
        # DC gain of channel l: C (I - A)^-1 B[:, l] (+ D_l); one row each
        dc_state = np.linalg.solve((np.eye(n) - a_d).T, c_d[0])
        alpha = gain_ridge * np.sqrt(t_total)
        for l in gain_ridge_channels:
            row = np.zeros((1, cols))
            for i in range(n):
                row[0, i * m + l] = alpha * dc_state[i]
            if feedthrough:
                row[0, n_b + l] = alpha
            penalties.append(row)
            targets.append(np.array([alpha * gain_target]))
    if penalties:
        design = np.vstack([design, *penalties])
        y = np.concatenate([y, *targets])

    theta, *_ = np.linalg.lstsq(design, y, rcond=None)
    b_d = theta[:n_b].reshape(n, m)
    d_mat = theta[n_b : n_b + n_d].reshape(1, m) if feedthrough else np.zeros((1, m))
    x0s = theta[n_b + n_d :].reshape(n_seg, n)
    return b_d, d_mat, x0s


def simulate_node(
    model: NodeModel, u: np.ndarray, x0: np.ndarray | None = None, dt: float | None = None
) -> np.ndarray:
    """Forward-Euler rollout: x(k+1) = (I + dt A) x(k) + dt B u(k), y = Cx + Du."""
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        u = u[:, None]
    if u.shape[1] != model.input_count:
        raise ValueError(f"expected {model.input_count} input columns, got {u.shape[1]}")
    dt = model.sample_time if dt is None else dt
    ad, bd = model.euler_discrete(dt)
    x = np.zeros(model.order) if x0 is None else np.asarray(x0, dtype=float).ravel()
    if x.shape != (model.order,):
        raise ValueError(f"x0 must have length {model.order}")
    y = np.empty(len(u))
    for k in range(len(u)):
        y[k] = (model.c @ x + model.d @ u[k])[0]
        x = ad @ x + bd @ u[k]
    return y


def estimate_initial_state(
    model: NodeModel, u: np.ndarray, y: np.ndarray, dt: float | None = None
) -> np.ndarray:
    """Least-squares initial state so the rollout best matches observed output."""
    dt = model.sample_time if dt is None else dt
    y = np.asarray(y, dtype=float).ravel()
    forced = simulate_node(model, u, None, dt)
    ad, _ = model.euler_discrete(dt)
    phi = np.empty((len(y), model.order))
    x = np.eye(model.order)
    for k in range(len(y)):
        phi[k] = (model.c @ x)[0]
        x = ad @ x
    x0, *_ = np.linalg.lstsq(phi, y - forced, rcond=None)
    return x0


def identify_from_run(
    run: TimeSeriesRun, spec: NodeChannelSpec, cfg: IdentificationConfig
) -> NodeModel:
    """Extract the node's channels from a run and identify its model."""
    u, y = extract_node_io(run, spec)
    return subspace_identify(
        u,
        y,
        cfg,
        run.sample_time,
        segment_boundaries=run.segment_boundaries,
        channel_spec=spec,
        kind=spec.kind,
        node_index=spec.node_index,
    )


def validation_report(
    models: list[NodeModel], run: TimeSeriesRun, fit_initial_state: bool = True
) -> dict[int, float]:
    """Per-node open-loop RMSE of each model on a fresh run (true inputs)."""
    report = {}
    for model in models:
        if model.channel_spec is None:
            raise IdentificationError("validation requires models with channel specs")
        u, y = extract_node_io(run, model.channel_spec)
        x0 = estimate_initial_state(model, u, y, run.sample_time) if fit_initial_state else None
        y_sim = simulate_node(model, u, x0, run.sample_time)
        report[model.node_index] = rmse(y_sim, y)
    return report
