"""Monte Carlo simulation, covariance propagation, and constraint auditing.

Reproducibility contract: all randomness flows through counter-based Philox
generators keyed by (seed, trajectory index), so serial and parallel batch
runs produce bit-identical results for the same seed.

CSV outputs (headers exact):
  trajectories: traj_id,k,mode,x_0..x_{n_x-1},u_norm,lyap_value
  analytic covariance series: k,trace_X,sigma3_0..sigma3_{n_x-1}
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import (
    ClosedLoopSystem,
    ControllerGains,
    ModeIndexedSet,
    as_mode_stack,
    periodic_index,
)
from .operators import per_mode_monodromy, t_op_all
from .stability import LyapunovCertificate

QUANTILES = (0.0, 0.25, 0.5, 0.75, 1.0)
CONTROL_SLACK = 1e-6
STATE_SLACK = 1e-6
LYAP_SLACK = 1e-9


def trajectory_rng(seed: int, index: int) -> np.random.Generator:
    """Philox substream for one trajectory, derived from (seed, index)."""
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence(entropy=seed, spawn_key=(index,)))
    )


# ---------------------------------------------------------------------------
# Initial-state samplers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FixedInitial:
    """Always start at the same state."""

    x0: np.ndarray

    def sample(self, rng: np.random.Generator, mode: int) -> np.ndarray:
        return np.asarray(self.x0, dtype=float).copy()


@dataclass(frozen=True)
class HullInitial:
    """Uniform Dirichlet convex combination of the hull vertices."""

    vertices: np.ndarray  # (l, n_x)

    def sample(self, rng: np.random.Generator, mode: int) -> np.ndarray:
        verts = np.asarray(self.vertices, dtype=float)
        w = rng.dirichlet(np.ones(verts.shape[0]))
        return w @ verts


@dataclass(frozen=True)
class EllipsoidInitial:
    """Uniform sample of the per-mode ellipsoid {x : x^T S(i)^{-1} x <= 1}.

    Gaussian direction, radius drawn as U^(1/n_x), mapped through the
    Cholesky factor of the mode's shape matrix S(i).
    """

    shapes: ModeIndexedSet  # S per mode, PD

    def sample(self, rng: np.random.Generator, mode: int) -> np.ndarray:
        S = as_mode_stack(self.shapes)[mode]
        L = np.linalg.cholesky(0.5 * (S + S.T))
        d = rng.standard_normal(S.shape[0])
        d /= max(np.linalg.norm(d), 1e-300)
        r = rng.random() ** (1.0 / S.shape[0])
        return L @ (r * d)


@dataclass
class SimulationConfig:
    """Batch parameters; rho is the initial mode distribution."""

    horizon: int
    n_trajectories: int
    seed: int
    initial_sampler: object
    rho: np.ndarray

    def validate(self, num_modes: int) -> "SimulationConfig":
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.n_trajectories < 1:
            raise ValueError("n_trajectories must be >= 1")
        rho = np.asarray(self.rho, dtype=float)
        if rho.shape != (num_modes,) or np.any(rho < 0) or abs(rho.sum() - 1.0) > 1e-9:
            raise ValueError(f"rho must be a length-{num_modes} probability vector")
        return self


@dataclass
class AuditSpec:
    """Constraint data checked along every sampled path.

    u_max: per-mode control norm caps; W: (T, N, n_x, n_x) state shapes with
    x^T W x <= 1; Q, R: cost weights for the empirical quadratic cost.
    """

    u_max: np.ndarray | None = None
    W: np.ndarray | None = None
    Q: np.ndarray | None = None
    R: np.ndarray | None = None


@dataclass
class TrajectoryRecord:
    """One sampled path: modes w_0..w_H, states x_0..x_H, controls u_0..u_{H-1}."""

    modes: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    lyapunov_values: np.ndarray | None = None


@dataclass
class CovarianceSeries:
    """Analytic second-moment recursion output.

    per_mode[k] holds the mode-indicator second moments at step k; aggregate
    is their sum E[x_k x_k^T]; sigma_envelope[k] is 3*sqrt(diag aggregate).
    """

    per_mode: list
    aggregate: np.ndarray  # (H+1, n_x, n_x)
    sigma_envelope: np.ndarray  # (H+1, n_x)


@dataclass
class BatchStatistics:
    """Per-step batch summaries plus constraint-violation counters."""

    quantiles: tuple
    state_norm_quantiles: np.ndarray  # (len(quantiles), H+1)
    control_norm_quantiles: np.ndarray  # (len(quantiles), H)
    mean_square_state: np.ndarray  # (H+1,)
    control_violations: int
    state_violations: int
    lyapunov_violations: int
    mean_cost: float | None
    n_trajectories: int
    horizon: int


def sample_mode_chain(P: np.ndarray, rho: np.ndarray, horizon: int,
                      rng: np.random.Generator) -> np.ndarray:
    """Markov chain w_0..w_horizon: w_0 ~ rho, then one row lookup per step."""
    P = np.asarray(P, dtype=float)
    rho = np.asarray(rho, dtype=float)
    cum_rows = np.cumsum(P, axis=1)
    modes = np.empty(horizon + 1, dtype=np.int64)
    modes[0] = int(np.searchsorted(np.cumsum(rho), rng.random(), side="right"))
    draws = rng.random(horizon)
    for k in range(horizon):
        modes[k + 1] = int(np.searchsorted(cum_rows[modes[k]], draws[k], side="right"))
    np.clip(modes, 0, P.shape[0] - 1, out=modes)
    return modes


def simulate_trajectory(cl: ClosedLoopSystem, gains: ControllerGains,
                        x0: np.ndarray, modes: np.ndarray,
                        certificate: LyapunovCertificate | None = None) -> TrajectoryRecord:
    """Propagate x_{k+1} = phi_k(w_k) x_k, recording u_k = K_k(w_k) x_k first.

    Deterministic given (x0, modes).  With a certificate, the Lyapunov values
    V_k = x_k^T P_k(w_k) x_k are recorded alongside.
    """
    modes = np.asarray(modes, dtype=np.int64)
    H = modes.size - 1
    T, n_x = cl.period, cl.n_x
    states = np.empty((H + 1, n_x))
    controls = np.empty((H, gains.K.shape[2]))
    states[0] = np.asarray(x0, dtype=float)
    P = certificate.P_stack() if certificate is not None else None
    lyap = np.empty(H + 1) if P is not None else None
    for k in range(H):
        km = periodic_index(k, T)
        i = modes[k]
        if lyap is not None:
            lyap[k] = states[k] @ P[km, i] @ states[k]
        controls[k] = gains.K[km, i] @ states[k]
        states[k + 1] = cl.phi[km, i] @ states[k]
    if lyap is not None:
        lyap[H] = states[H] @ P[periodic_index(H, T), modes[H]] @ states[H]
    return TrajectoryRecord(modes=modes, states=states, controls=controls,
                            lyapunov_values=lyap)


def state_transition_matrix(cl: ClosedLoopSystem, modes: np.ndarray,
                            k_from: int, k_to: int) -> np.ndarray:
    """Product phi_{k_to-1}(w_{k_to-1}) ... phi_{k_from}(w_{k_from})."""
    out = np.eye(cl.n_x)
    for k in range(k_from, k_to):
        out = cl.phi[periodic_index(k, cl.period), modes[k]] @ out
    return out


def _csv_num(v: float) -> str:
    return repr(float(v))


def monte_carlo(cl: ClosedLoopSystem, gains: ControllerGains,
                config: SimulationConfig, constraints: AuditSpec | None = None,
                certificate: LyapunovCertificate | None = None,
                csv_path=None) -> BatchStatistics:
    """Run the trajectory batch; violations are counted, never raised.

    Results are merged in trajectory-index order, so the statistics (and the
    CSV bytes) are identical however the batch is executed.
    """
    config.validate(cl.num_modes)
    H, n_traj = config.horizon, config.n_trajectories
    T = cl.period
    audit = constraints or AuditSpec()
    state_norms = np.empty((n_traj, H + 1))
    control_norms = np.empty((n_traj, H))
    sq_state = np.zeros(H + 1)
    n_ctrl_viol = n_state_viol = n_lyap_viol = 0
    costs = np.zeros(n_traj)
    has_cost = audit.Q is not None and audit.R is not None

    writer = None
    if csv_path is not None:
        writer = open(csv_path, "w")
        xs = ",".join(f"x_{c}" for c in range(cl.n_x))
        writer.write(f"traj_id,k,mode,{xs},u_norm,lyap_value\n")

    try:
        for t in range(n_traj):
            rng = trajectory_rng(config.seed, t)
            modes = sample_mode_chain(cl.P, config.rho, H, rng)
            x0 = config.initial_sampler.sample(rng, int(modes[0]))
            rec = simulate_trajectory(cl, gains, x0, modes, certificate=certificate)
            sn = np.linalg.norm(rec.states, axis=1)
            un = np.linalg.norm(rec.controls, axis=1)
            state_norms[t] = sn
            control_norms[t] = un
            sq_state += sn ** 2
            if audit.u_max is not None:
                caps = np.asarray(audit.u_max, float)[modes[:H]]
                n_ctrl_viol += int(np.sum(un > caps * (1.0 + CONTROL_SLACK)))
            if audit.W is not None:
                W = np.asarray(audit.W, float)
                for k in range(H + 1):
                    Wk = W[periodic_index(k, T), modes[k]]
                    if rec.states[k] @ Wk @ rec.states[k] > 1.0 + STATE_SLACK:
                        n_state_viol += 1
            if rec.lyapunov_values is not None:
                v = rec.lyapunov_values
                n_lyap_viol += int(np.sum(v[1:] > v[:-1] * (1.0 + LYAP_SLACK)))
            if has_cost:
                Q = np.asarray(audit.Q, float)
                R = np.asarray(audit.R, float)
                c = 0.0
                for k in range(H):
                    i = modes[k]
                    c += rec.states[k] @ Q[i] @ rec.states[k]
                    c += rec.controls[k] @ R[i] @ rec.controls[k]
                costs[t] = c
            if writer is not None:
                for k in range(H + 1):
                    xs = ",".join(_csv_num(v) for v in rec.states[k])
                    u = _csv_num(un[k]) if k < H else ""
                    ly = (_csv_num(rec.lyapunov_values[k])
                          if rec.lyapunov_values is not None else "")
                    writer.write(f"{t},{k},{int(modes[k])},{xs},{u},{ly}\n")
    finally:
        if writer is not None:
            writer.close()

    qs = np.asarray(QUANTILES)
    return BatchStatistics(
        quantiles=QUANTILES,
        state_norm_quantiles=np.quantile(state_norms, qs, axis=0),
        control_norm_quantiles=(np.quantile(control_norms, qs, axis=0)
                                if H > 0 else np.zeros((qs.size, 0))),
        mean_square_state=sq_state / n_traj,
        control_violations=n_ctrl_viol,
        state_violations=n_state_viol,
        lyapunov_violations=n_lyap_viol,
        mean_cost=float(costs.mean()) if has_cost else None,
        n_trajectories=n_traj,
        horizon=H,
    )


def propagate_covariance(cl: ClosedLoopSystem, X0, horizon: int) -> CovarianceSeries:
    """Exact second-moment recursion via the per-mode propagation operator.

    For a deterministic start x0 with mode distribution rho, the k=0 entry is
    X_0(i) = rho_i x0 x0^T.
    """
    X = as_mode_stack(X0).copy()
    for i in range(X.shape[0]):
        if np.linalg.eigvalsh(0.5 * (X[i] + X[i].T)).min() < -1e-10:
            raise ValueError(f"initial second moment for mode {i} is not PSD")
    per_mode = [ModeIndexedSet(X.copy())]
    for k in range(horizon):
        X = t_op_all(X, cl, k)
        per_mode.append(ModeIndexedSet(X.copy()))
    aggregate = np.stack([ms.entries.sum(axis=0) for ms in per_mode])
    diag = np.clip(np.diagonal(aggregate, axis1=1, axis2=2), 0.0, None)
    return CovarianceSeries(per_mode=per_mode, aggregate=aggregate,
                            sigma_envelope=3.0 * np.sqrt(diag))


def initial_covariance(x0: np.ndarray, rho: np.ndarray) -> ModeIndexedSet:
    """Mode-indicator second moments for a deterministic x0 and mode law rho."""
    x0 = np.asarray(x0, dtype=float)
    rho = np.asarray(rho, dtype=float)
    return ModeIndexedSet(np.stack([r * np.outer(x0, x0) for r in rho]))


def write_covariance_csv(series: CovarianceSeries, path) -> None:
    n_x = series.aggregate.shape[1]
    with open(path, "w") as f:
        cols = ",".join(f"sigma3_{c}" for c in range(n_x))
        f.write(f"k,trace_X,{cols}\n")
        for k in range(series.aggregate.shape[0]):
            tr = _csv_num(np.trace(series.aggregate[k]))
            sig = ",".join(_csv_num(v) for v in series.sigma_envelope[k])
            f.write(f"{k},{tr},{sig}\n")


@dataclass
class DecayReport:
    """Per-period geometric decay of the batch mean square state."""

    ratio: float
    decaying: bool


def mss_empirical_check(cl: ClosedLoopSystem, config: SimulationConfig) -> DecayReport:
    """Fit the per-period decay of E[|x_k|^2] over the last half of the run.

    Requires horizon >= 4 periods.  Returns the fitted one-period ratio and
    whether it is below 1.
    """
    T = cl.period
    if config.horizon < 4 * T:
        raise ValueError(f"horizon {config.horizon} too short; need at least {4 * T}")
    config.validate(cl.num_modes)
    H = config.horizon
    sq = np.zeros(H + 1)
    for t in range(config.n_trajectories):
        rng = trajectory_rng(config.seed, t)
        modes = sample_mode_chain(cl.P, config.rho, H, rng)
        x = np.asarray(config.initial_sampler.sample(rng, int(modes[0])), dtype=float)
        sq[0] += x @ x
        for k in range(H):
            x = cl.phi[periodic_index(k, T), modes[k]] @ x
            sq[k + 1] += x @ x
    sq /= config.n_trajectories
    # per-period block sums over the last half of the horizon
    n_periods = (H + 1) // T
    start = n_periods // 2
    blocks = np.array([sq[j * T:(j + 1) * T].sum() for j in range(start, n_periods)])
    if blocks.size < 2:
        raise ValueError("horizon leaves fewer than two whole periods in the last half")
    if np.any(blocks <= 0.0):
        return DecayReport(ratio=0.0, decaying=True)
    slope = np.polyfit(np.arange(blocks.size), np.log(blocks), 1)[0]
    ratio = float(np.exp(slope))
    return DecayReport(ratio=ratio, decaying=ratio < 1.0)
