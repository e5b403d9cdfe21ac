"""LMI-based synthesis of mode-dependent periodic feedback gains.

Two convex programs over symmetric S_k(i) (inverse Lyapunov matrices) and
rectangular Y_k(i) (gain parametrizations, K_k(i) = Y_k(i) S_k(i)^{-1}):

* quadratic-cost synthesis (`synthesize_p1`): minimize the certified cost
  bound beta subject to hull containment of the initial state, a coupled
  decrease block carrying the cost weights, per-jump monotonicity for every
  target mode, and norm bounds on control (and optionally state);

* region-of-attraction synthesis (`synthesize_p2`): maximize the expected
  ellipsoid trace of {x : x^T S_0(i)^{-1} x <= 1} under a nu_k-relaxed
  one-period decrease with prod nu_k < 1 and the same jump/norm blocks.

Every returned solution is re-verified from raw model data: closed-loop
spectral radius, the de-Schur'd scalar inequalities, per-jump Lyapunov
decrease, and the gain-extraction residual.  Strict inequalities are realized
by shifting every block to `block >= eps*I` at assembly time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import sdp as sdp_mod
from .model import (
    ClosedLoopSystem,
    ControllerGains,
    ModeIndexedSet,
    ModelError,
    PeriodicMjlsModel,
    as_mode_stack,
    close_loop,
)
from .operators import l_op_all, one_period_operator, spectral_radius
from .stability import LyapunovCertificate, verify_certificate

VERIFY_TOL = 1e-7
GAIN_RESIDUAL_TOL = 1e-8


class InfeasibleError(RuntimeError):
    """The synthesis SDP is certified infeasible (constraints too tight)."""


class VerificationError(RuntimeError):
    """A solver-returned point failed the independent recomputation checks."""


def psd_sqrt(M: np.ndarray, name: str = "matrix") -> np.ndarray:
    """Symmetric square root of a PSD matrix (eigenvalues clipped at 0)."""
    M = np.asarray(M, dtype=float)
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    if w.min() < -1e-10:
        raise ModelError(f"{name} must be PSD, min eigenvalue {w.min():.3e}")
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


@dataclass
class SynthesisSpecP1:
    """Quadratic-cost synthesis data.

    Q: per-mode PSD state weights (N, n_x, n_x); R: per-mode PD control
    weights (N, n_u, n_u); u_max: per-mode control norm caps; W: optional
    (T, N, n_x, n_x) PSD state-constraint shapes (x^T W x <= 1);
    hull_vertices: (l, n_x) vertices containing the initial state.
    """

    Q: ModeIndexedSet
    R: ModeIndexedSet
    u_max: np.ndarray
    hull_vertices: np.ndarray
    W: np.ndarray | None = None

    def validate(self, model: PeriodicMjlsModel) -> "SynthesisSpecP1":
        N, n_x, n_u, T = model.num_modes, model.n_x, model.n_u, model.period
        Q, R = as_mode_stack(self.Q), as_mode_stack(self.R)
        if Q.shape != (N, n_x, n_x):
            raise ModelError(f"Q must be ({N}, {n_x}, {n_x}), got {Q.shape}")
        if R.shape != (N, n_u, n_u):
            raise ModelError(f"R must be ({N}, {n_u}, {n_u}), got {R.shape}")
        for i in range(N):
            if np.linalg.eigvalsh(0.5 * (Q[i] + Q[i].T)).min() < -1e-10:
                raise ModelError(f"Q({i}) is not PSD")
            if np.linalg.eigvalsh(0.5 * (R[i] + R[i].T)).min() <= 0:
                raise ModelError(f"R({i}) is not positive definite")
        u = np.asarray(self.u_max, dtype=float)
        if u.shape != (N,) or np.any(u <= 0):
            raise ModelError(f"u_max must be {N} positive reals")
        verts = np.asarray(self.hull_vertices, dtype=float)
        if verts.ndim != 2 or verts.shape[1] != n_x or verts.shape[0] < 1:
            raise ModelError(f"hull_vertices must be (l, {n_x}) with l >= 1")
        if self.W is not None:
            W = np.asarray(self.W, dtype=float)
            if W.shape != (T, N, n_x, n_x):
                raise ModelError(f"W must be ({T}, {N}, {n_x}, {n_x}), got {W.shape}")
            for k in range(T):
                for i in range(N):
                    psd_sqrt(W[k, i], f"W_{k}({i})")
        return self


@dataclass
class SynthesisSpecP2:
    """Region-of-attraction synthesis data.

    nu: T positive per-step relaxation factors with prod < 1; u_max: per-mode
    control norm caps; W: (T, N, n_x, n_x) PSD state-constraint shapes;
    rho: initial mode distribution.
    """

    nu: np.ndarray
    u_max: np.ndarray
    W: np.ndarray
    rho: np.ndarray

    def validate(self, model: PeriodicMjlsModel) -> "SynthesisSpecP2":
        N, n_x, T = model.num_modes, model.n_x, model.period
        nu = np.asarray(self.nu, dtype=float)
        if nu.shape != (T,) or np.any(nu <= 0):
            raise ModelError(f"nu must be {T} positive reals")
        if np.prod(nu) >= 1.0 - 1e-12:
            raise ModelError(f"prod(nu) = {np.prod(nu)!r} must be < 1")
        u = np.asarray(self.u_max, dtype=float)
        if u.shape != (N,) or np.any(u <= 0):
            raise ModelError(f"u_max must be {N} positive reals")
        W = np.asarray(self.W, dtype=float)
        if W.shape != (T, N, n_x, n_x):
            raise ModelError(f"W must be ({T}, {N}, {n_x}, {n_x}), got {W.shape}")
        for k in range(T):
            for i in range(N):
                psd_sqrt(W[k, i], f"W_{k}({i})")
        rho = np.asarray(self.rho, dtype=float)
        if rho.shape != (N,) or np.any(rho < 0) or abs(rho.sum() - 1.0) > 1e-9:
            raise ModelError(f"rho must be a length-{N} probability vector")
        return self


@dataclass
class SynthesisResult:
    """Verified synthesis output.

    S holds the solved S_k(i) sets (one per step); the certificate carries
    P_k(i) = S_k(i)^{-1}.  diagnostics maps check names to worst residuals.
    """

    gains: ControllerGains
    S: list
    Y: np.ndarray
    beta: float | None
    objective: float
    closed_loop_radius: float
    certificate: LyapunovCertificate
    diagnostics: dict
    solve_time: float

    def region_of_attraction(self) -> ModeIndexedSet:
        """Per-mode invariant ellipsoid shapes {x : x^T S_0(i)^{-1} x <= 1}."""
        return self.S[0]


# ---------------------------------------------------------------------------
# Block assembly helpers
# ---------------------------------------------------------------------------


def _put(M: np.ndarray, r: int, c: int, blk: np.ndarray) -> None:
    """Place blk at (r, c) and its transpose at (c, r)."""
    a, b = blk.shape
    M[r:r + a, c:c + b] += blk
    if r != c:
        M[c:c + b, r:r + a] += blk.T


def _merge(terms: dict, name: str, fn) -> None:
    """Additively compose linear maps that hit the same variable."""
    prev = terms.get(name)
    terms[name] = fn if prev is None else (lambda V, f=prev, g=fn: f(V) + g(V))


def _declare_sy_vars(problem: sdp_mod.SdpProblem, model: PeriodicMjlsModel) -> None:
    for k in range(model.period):
        for i in range(model.num_modes):
            problem.add_symmetric(f"S[{k}][{i}]", model.n_x)
            problem.add_rectangular(f"Y[{k}][{i}]", model.n_u, model.n_x)


def _jump_blocks(problem, model, epsilon) -> None:
    """For each (k, i, j): [[S_k(i), *], [A S + B Y, S_{k+1}(j)]] >= eps I.

    Enforced for every target mode j, including those with p_ij = 0; this is
    what makes the per-path monotonicity (and hence the norm constraints)
    hold with probability one.
    """
    T, N, n_x = model.period, model.num_modes, model.n_x
    m = 2 * n_x
    for k in range(T):
        kp = (k + 1) % T
        for i in range(N):
            A, B = model.A[k, i], model.B[k, i]
            for j in range(N):
                terms: dict = {}

                def s_ki(S, A=A, m=m, n_x=n_x):
                    out = np.zeros((m, m))
                    _put(out, 0, 0, S)
                    _put(out, n_x, 0, A @ S)
                    return out

                def y_ki(Y, B=B, m=m, n_x=n_x):
                    out = np.zeros((m, m))
                    _put(out, n_x, 0, B @ Y)
                    return out

                def s_next(S, m=m, n_x=n_x):
                    out = np.zeros((m, m))
                    _put(out, n_x, n_x, S)
                    return out

                _merge(terms, f"S[{k}][{i}]", s_ki)
                _merge(terms, f"Y[{k}][{i}]", y_ki)
                _merge(terms, f"S[{kp}][{j}]", s_next)
                problem.add_lmi_block(-epsilon * np.eye(m), terms,
                                      label=f"mono[{k},{i},{j}]")


def _ctrl_blocks(problem, model, u_max, epsilon) -> None:
    """[[u_max(i)^2 I, Y_k(i)], [Y_k(i)^T, S_k(i)]] >= eps I."""
    T, N, n_x, n_u = model.period, model.num_modes, model.n_x, model.n_u
    m = n_u + n_x
    for k in range(T):
        for i in range(N):
            F0 = np.zeros((m, m))
            F0[:n_u, :n_u] = u_max[i] ** 2 * np.eye(n_u)
            F0 -= epsilon * np.eye(m)

            def y_map(Y, m=m, n_u=n_u):
                out = np.zeros((m, m))
                _put(out, 0, n_u, Y)
                return out

            def s_map(S, m=m, n_u=n_u):
                out = np.zeros((m, m))
                _put(out, n_u, n_u, S)
                return out

            problem.add_lmi_block(F0, {f"Y[{k}][{i}]": y_map, f"S[{k}][{i}]": s_map},
                                  label=f"ctrl[{k},{i}]")


def _state_blocks(problem, model, W, epsilon) -> None:
    """I - H_k(i) S_k(i) H_k(i)^T >= eps I with H = W^{1/2}."""
    T, N, n_x = model.period, model.num_modes, model.n_x
    for k in range(T):
        for i in range(N):
            H = psd_sqrt(W[k, i], f"W_{k}({i})")
            problem.add_lmi_block(
                (1.0 - epsilon) * np.eye(n_x),
                {f"S[{k}][{i}]": (lambda S, H=H: -H @ S @ H.T)},
                label=f"state[{k},{i}]",
            )


def build_p1_sdp(model: PeriodicMjlsModel, spec: SynthesisSpecP1,
                 epsilon: float = 1e-7) -> sdp_mod.SdpProblem:
    """Assemble the quadratic-cost synthesis SDP (objective: min beta)."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    spec.validate(model)
    T, N, n_x, n_u = model.period, model.num_modes, model.n_x, model.n_u
    Q, R = as_mode_stack(spec.Q), as_mode_stack(spec.R)
    Qh = np.stack([psd_sqrt(Q[i], f"Q({i})") for i in range(N)])
    Rh = np.stack([psd_sqrt(R[i], f"R({i})") for i in range(N)])
    u_max = np.asarray(spec.u_max, dtype=float)
    verts = np.asarray(spec.hull_vertices, dtype=float)

    problem = sdp_mod.SdpProblem()
    problem.add_scalar("beta")
    _declare_sy_vars(problem, model)
    problem.set_objective(scalars={"beta": 1.0})

    # initial-state hull containment: [[1, x_v^T], [x_v, S_0(i)]] >= eps I
    for i in range(N):
        for v, x0 in enumerate(verts):
            m = 1 + n_x
            F0 = np.zeros((m, m))
            F0[0, 0] = 1.0
            F0[1:, 0] = x0
            F0[0, 1:] = x0
            F0 -= epsilon * np.eye(m)

            def s_map(S, m=m):
                out = np.zeros((m, m))
                _put(out, 1, 1, S)
                return out

            problem.add_lmi_block(F0, {f"S[0][{i}]": s_map}, label=f"hull[{v},{i}]")

    # coupled decrease-with-cost block, dimension n_x + N n_x + n_x + n_u:
    # [[S, *, *, *], [l_i^T(A S + B Y), blkdiag S_{k+1}, 0, 0],
    #  [Q^1/2 S, 0, beta I, 0], [R^1/2 Y, 0, 0, beta I]] >= eps I
    m = n_x + N * n_x + n_x + n_u
    r_cost, r_ctrl = n_x + N * n_x, n_x + N * n_x + n_x
    for k in range(T):
        kp = (k + 1) % T
        for i in range(N):
            A, B = model.A[k, i], model.B[k, i]
            sqp = np.sqrt(model.P[i])
            terms: dict = {}

            def s_ki(S, A=A, Qhi=Qh[i], sqp=sqp, m=m):
                out = np.zeros((m, m))
                _put(out, 0, 0, S)
                AS = A @ S
                for j in range(N):
                    _put(out, n_x + j * n_x, 0, sqp[j] * AS)
                _put(out, r_cost, 0, Qhi @ S)
                return out

            def y_ki(Y, B=B, Rhi=Rh[i], sqp=sqp, m=m):
                out = np.zeros((m, m))
                BY = B @ Y
                for j in range(N):
                    _put(out, n_x + j * n_x, 0, sqp[j] * BY)
                _put(out, r_ctrl, 0, Rhi @ Y)
                return out

            def beta_map(b, m=m):
                out = np.zeros((m, m))
                out[r_cost:r_cost + n_x, r_cost:r_cost + n_x] = b * np.eye(n_x)
                out[r_ctrl:, r_ctrl:] = b * np.eye(n_u)
                return out

            _merge(terms, f"S[{k}][{i}]", s_ki)
            _merge(terms, f"Y[{k}][{i}]", y_ki)
            for j in range(N):
                def s_next(S, j=j, m=m):
                    out = np.zeros((m, m))
                    _put(out, n_x + j * n_x, n_x + j * n_x, S)
                    return out

                _merge(terms, f"S[{kp}][{j}]", s_next)
            _merge(terms, "beta", beta_map)
            problem.add_lmi_block(-epsilon * np.eye(m), terms, label=f"cost[{k},{i}]")

    _jump_blocks(problem, model, epsilon)
    _ctrl_blocks(problem, model, u_max, epsilon)
    if spec.W is not None:
        _state_blocks(problem, model, np.asarray(spec.W, dtype=float), epsilon)
    return problem


def build_p2_sdp(model: PeriodicMjlsModel, spec: SynthesisSpecP2,
                 epsilon: float = 1e-7) -> sdp_mod.SdpProblem:
    """Assemble the region-of-attraction SDP (objective: max E_rho tr S_0)."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    spec.validate(model)
    T, N, n_x = model.period, model.num_modes, model.n_x
    nu = np.asarray(spec.nu, dtype=float)
    rho = np.asarray(spec.rho, dtype=float)

    problem = sdp_mod.SdpProblem()
    _declare_sy_vars(problem, model)
    problem.set_objective(matrices={
        f"S[0][{i}]": -rho[i] * np.eye(n_x) for i in range(N)
    })

    # nu-relaxed one-period decrease: [[nu_k S_k(i), *],
    #                                  [l_i^T(A S + B Y), blkdiag S_{k+1}]] >= eps I
    m = n_x + N * n_x
    for k in range(T):
        kp = (k + 1) % T
        for i in range(N):
            A, B = model.A[k, i], model.B[k, i]
            sqp = np.sqrt(model.P[i])
            terms: dict = {}

            def s_ki(S, A=A, nuk=nu[k], sqp=sqp, m=m):
                out = np.zeros((m, m))
                _put(out, 0, 0, nuk * S)
                AS = A @ S
                for j in range(N):
                    _put(out, n_x + j * n_x, 0, sqp[j] * AS)
                return out

            def y_ki(Y, B=B, sqp=sqp, m=m):
                out = np.zeros((m, m))
                BY = B @ Y
                for j in range(N):
                    _put(out, n_x + j * n_x, 0, sqp[j] * BY)
                return out

            _merge(terms, f"S[{k}][{i}]", s_ki)
            _merge(terms, f"Y[{k}][{i}]", y_ki)
            for j in range(N):
                def s_next(S, j=j, m=m):
                    out = np.zeros((m, m))
                    _put(out, n_x + j * n_x, n_x + j * n_x, S)
                    return out

                _merge(terms, f"S[{kp}][{j}]", s_next)
            problem.add_lmi_block(-epsilon * np.eye(m), terms, label=f"relax[{k},{i}]")

    _jump_blocks(problem, model, epsilon)
    _ctrl_blocks(problem, model, np.asarray(spec.u_max, dtype=float), epsilon)
    _state_blocks(problem, model, np.asarray(spec.W, dtype=float), epsilon)
    return problem


def extract_gains(S, Y, epsilon: float = 1e-7) -> ControllerGains:
    """K_k(i) = Y_k(i) S_k(i)^{-1}; requires min eig(S_k(i)) >= eps / 2."""
    S = np.asarray(S, dtype=float)
    Y = np.asarray(Y, dtype=float)
    T, N = S.shape[0], S.shape[1]
    K = np.zeros((T, N, Y.shape[2], Y.shape[3]))
    for k in range(T):
        for i in range(N):
            w = np.linalg.eigvalsh(0.5 * (S[k, i] + S[k, i].T))
            if w.min() < epsilon / 2:
                raise VerificationError(
                    f"S_{k}({i}) nearly singular: min eigenvalue {w.min():.3e}"
                )
            K[k, i] = np.linalg.solve(S[k, i].T, Y[k, i].T).T
    return ControllerGains(K=K)


def _solution_stacks(values: dict, model: PeriodicMjlsModel):
    T, N = model.period, model.num_modes
    S = np.stack([
        np.stack([0.5 * (values[f"S[{k}][{i}]"] + values[f"S[{k}][{i}]"].T)
                  for i in range(N)])
        for k in range(T)
    ])
    Y = np.stack([
        np.stack([values[f"Y[{k}][{i}]"] for i in range(N)]) for k in range(T)
    ])
    return S, Y


def _verify_common(model, S, Y, K, cl, nu=None):
    """Checks shared by both problems; returns (P, diagnostics)."""
    T, N = model.period, model.num_modes
    P = np.stack([
        np.stack([np.linalg.inv(S[k, i]) for i in range(N)]) for k in range(T)
    ])
    P = 0.5 * (P + np.transpose(P, (0, 1, 3, 2)))
    diag = {}

    resid = max(
        np.abs(K[k, i] @ S[k, i] - Y[k, i]).max() / (1.0 + np.abs(Y[k, i]).max())
        for k in range(T) for i in range(N)
    )
    diag["gain_residual"] = float(resid)
    if resid > GAIN_RESIDUAL_TOL:
        raise VerificationError(f"gain extraction residual {resid:.3e} too large")

    # per-jump decrease P_k(i) >= phi^T P_{k+1}(j) phi for every j
    worst = np.inf
    for k in range(T):
        kp = (k + 1) % T
        for i in range(N):
            for j in range(N):
                G = P[k, i] - cl.phi[k, i].T @ P[kp, j] @ cl.phi[k, i]
                worst = min(worst, np.linalg.eigvalsh(0.5 * (G + G.T)).min())
    diag["jump_decrease"] = float(worst)
    if worst < -VERIFY_TOL:
        raise VerificationError(f"per-jump Lyapunov decrease violated: {worst:.3e}")

    # de-Schur'd expectation decrease in the S coordinates
    worst = np.inf
    for k in range(T):
        kp = (k + 1) % T
        for i in range(N):
            Gam = model.A[k, i] @ S[k, i] + model.B[k, i] @ Y[k, i]
            EPinv = sum(model.P[i, j] * P[kp, j] for j in range(N))
            scale = 1.0 if nu is None else nu[k]
            G = scale * S[k, i] - Gam.T @ EPinv @ Gam
            worst = min(worst, np.linalg.eigvalsh(0.5 * (G + G.T)).min())
    diag["expected_decrease_s"] = float(worst)
    if worst < -VERIFY_TOL:
        raise VerificationError(f"expected one-step decrease violated: {worst:.3e}")
    return P, diag


def _p1_state_scale(spec: SynthesisSpecP1) -> float:
    """Characteristic state magnitude: the largest hull vertex norm."""
    return max(1.0, float(np.max(np.linalg.norm(np.asarray(spec.hull_vertices, float),
                                                axis=1), initial=0.0)))


def _p2_state_scale(spec: SynthesisSpecP2) -> float:
    """Characteristic state magnitude: the largest state-ellipsoid radius.

    For x^T W x <= 1 the reachable radius along the loosest direction is
    1/sqrt(min eig W); singular W leaves directions unbounded, so the scale
    is capped rather than taken to infinity.
    """
    radius = 1.0
    W = np.asarray(spec.W, dtype=float)
    for k in range(W.shape[0]):
        for i in range(W.shape[1]):
            w_min = np.linalg.eigvalsh(0.5 * (W[k, i] + W[k, i].T)).min()
            if w_min > 1e-12:
                radius = max(radius, 1.0 / np.sqrt(w_min))
    return min(radius, 1e6)


def _scaled_p1_spec(spec: SynthesisSpecP1, s: float) -> SynthesisSpecP1:
    """Spec in units of x/s: same dynamics and gains, rescaled data."""
    W = None if spec.W is None else np.asarray(spec.W, float) * s ** 2
    return SynthesisSpecP1(
        Q=spec.Q, R=spec.R,
        u_max=np.asarray(spec.u_max, float) / s,
        hull_vertices=np.asarray(spec.hull_vertices, float) / s,
        W=W,
    )


def _scaled_p2_spec(spec: SynthesisSpecP2, s: float) -> SynthesisSpecP2:
    return SynthesisSpecP2(
        nu=spec.nu,
        u_max=np.asarray(spec.u_max, float) / s,
        W=np.asarray(spec.W, float) * s ** 2,
        rho=spec.rho,
    )


def synthesize_p1(model: PeriodicMjlsModel, spec: SynthesisSpecP1,
                  epsilon: float = 1e-7, backend=None) -> SynthesisResult:
    """Solve the quadratic-cost problem and return verified gains.

    beta upper-bounds the expected accumulated cost from any initial state in
    the hull (for which x0^T P_0(i) x0 <= 1 in every mode).  The SDP is solved
    in state units normalized by the hull radius (an exact change of
    variables: K is invariant, S, Y and beta rescale by the radius squared),
    which keeps the conic data near unit scale for the solver.
    """
    spec.validate(model)
    s = _p1_state_scale(spec)
    problem = build_p1_sdp(model, _scaled_p1_spec(spec, s), epsilon)
    sol = sdp_mod.solve(problem, backend=backend)
    if sol.status == "infeasible":
        raise InfeasibleError(
            "quadratic-cost synthesis infeasible (control/state bounds too tight "
            "or hull too large)"
        )
    if sol.status != "optimal":
        raise sdp_mod.SolverFailure(f"synthesis solve failed: {sol.message or sol.solver_status}")
    S, Y = _solution_stacks(sol.values, model)
    S, Y = s ** 2 * S, s ** 2 * Y
    beta = s ** 2 * float(sol.values["beta"])
    gains = extract_gains(S, Y, epsilon)
    cl = close_loop(model, gains)

    K = gains.K
    P, diag = _verify_common(model, S, Y, K, cl)
    T, N = model.period, model.num_modes
    Q, R = as_mode_stack(spec.Q), as_mode_stack(spec.R)

    # performance inequality with M_k(i) = Q(i) + K^T R K
    worst = np.inf
    for k in range(T):
        L = l_op_all(P[(k + 1) % T], cl, k)
        for i in range(N):
            Mki = Q[i] + K[k, i].T @ R[i] @ K[k, i]
            G = P[k, i] - L[i] - Mki / beta
            worst = min(worst, np.linalg.eigvalsh(0.5 * (G + G.T)).min())
    diag["performance"] = float(worst)
    if worst < -VERIFY_TOL:
        raise VerificationError(f"performance inequality violated: {worst:.3e}")

    radius = spectral_radius(one_period_operator(cl))
    diag["max_constraint_violation"] = float(sol.max_constraint_violation)
    if radius >= 1.0:
        raise VerificationError(f"closed loop not mean-square stable: radius {radius}")

    cert = LyapunovCertificate(
        P=[ModeIndexedSet(P[k], symmetric=True) for k in range(T)],
        nu=None,
        epsilon=float(min(np.linalg.eigvalsh(P[k, i]).min()
                          for k in range(T) for i in range(N))),
    )
    verify_certificate(cert, cl)
    return SynthesisResult(
        gains=gains,
        S=[ModeIndexedSet(S[k], symmetric=True) for k in range(T)],
        Y=Y, beta=beta, objective=beta,
        closed_loop_radius=float(radius), certificate=cert,
        diagnostics=diag, solve_time=sol.solve_time,
    )


def synthesize_p2(model: PeriodicMjlsModel, spec: SynthesisSpecP2,
                  epsilon: float = 1e-7, backend=None) -> SynthesisResult:
    """Solve the region-of-attraction problem and return verified gains.

    The certified region is the union of per-mode ellipsoids
    {x : x^T S_0(i)^{-1} x <= 1}, each invariant along every sampled path.
    Solved in state units normalized by the state-constraint radius (exact
    change of variables, as in synthesize_p1).
    """
    spec.validate(model)
    s = _p2_state_scale(spec)
    problem = build_p2_sdp(model, _scaled_p2_spec(spec, s), epsilon)
    sol = sdp_mod.solve(problem, backend=backend)
    if sol.status == "infeasible":
        raise InfeasibleError(
            "region-of-attraction synthesis infeasible (no stabilizing gain under "
            "the given bounds)"
        )
    if sol.status != "optimal":
        raise sdp_mod.SolverFailure(f"synthesis solve failed: {sol.message or sol.solver_status}")
    S, Y = _solution_stacks(sol.values, model)
    S, Y = s ** 2 * S, s ** 2 * Y
    gains = extract_gains(S, Y, epsilon)
    cl = close_loop(model, gains)
    nu = np.asarray(spec.nu, dtype=float)

    P, diag = _verify_common(model, S, Y, gains.K, cl, nu=nu)
    T, N = model.period, model.num_modes

    # nu-scaled expectation decrease in the P coordinates
    worst = np.inf
    for k in range(T):
        L = l_op_all(P[(k + 1) % T], cl, k)
        for i in range(N):
            G = nu[k] * P[k, i] - L[i]
            worst = min(worst, np.linalg.eigvalsh(0.5 * (G + G.T)).min())
    diag["relaxed_decrease"] = float(worst)
    if worst < -VERIFY_TOL:
        raise VerificationError(f"relaxed decrease inequality violated: {worst:.3e}")

    radius = spectral_radius(one_period_operator(cl))
    diag["max_constraint_violation"] = float(sol.max_constraint_violation)
    if radius >= 1.0:
        raise VerificationError(f"closed loop not mean-square stable: radius {radius}")

    cert = LyapunovCertificate(
        P=[ModeIndexedSet(P[k], symmetric=True) for k in range(T)],
        nu=nu,
        epsilon=float(min(np.linalg.eigvalsh(P[k, i]).min()
                          for k in range(T) for i in range(N))),
    )
    verify_certificate(cert, cl)
    return SynthesisResult(
        gains=gains,
        S=[ModeIndexedSet(S[k], symmetric=True) for k in range(T)],
        Y=Y, beta=None, objective=s ** 2 * float(sol.objective_value),
        closed_loop_radius=float(radius), certificate=cert,
        diagnostics=diag, solve_time=sol.solve_time,
    )


# ---------------------------------------------------------------------------
# JSON interchange for specs and reports
# ---------------------------------------------------------------------------


def _flat(m) -> list:
    return [float(v) for v in np.asarray(m).reshape(-1)]


def _unflat(values, rows, cols, what):
    a = np.asarray(values, dtype=float)
    if a.size != rows * cols:
        raise ModelError(f"{what}: expected {rows * cols} numbers, got {a.size}")
    return a.reshape(rows, cols)


def _load_w(d: dict, model: PeriodicMjlsModel):
    if d.get("W") is None:
        return None
    T, N, n_x = model.period, model.num_modes, model.n_x
    raw = d["W"]
    if len(raw) != T or any(len(rk) != N for rk in raw):
        raise ModelError(f"W must be a {T} x {N} array of matrices")
    return np.stack([
        np.stack([_unflat(raw[k][i], n_x, n_x, f"W[{k}][{i}]") for i in range(N)])
        for k in range(T)
    ])


def p1_spec_from_dict(d: dict, model: PeriodicMjlsModel) -> SynthesisSpecP1:
    for key in ("Q", "R", "u_max", "hull_vertices"):
        if key not in d:
            raise ModelError(f"quadratic-cost spec missing field {key!r}")
    N, n_x, n_u = model.num_modes, model.n_x, model.n_u
    Q = ModeIndexedSet(np.stack([_unflat(d["Q"][i], n_x, n_x, f"Q[{i}]") for i in range(N)]),
                       symmetric=True)
    R = ModeIndexedSet(np.stack([_unflat(d["R"][i], n_u, n_u, f"R[{i}]") for i in range(N)]),
                       symmetric=True)
    return SynthesisSpecP1(
        Q=Q, R=R,
        u_max=np.asarray(d["u_max"], dtype=float),
        hull_vertices=np.asarray(d["hull_vertices"], dtype=float),
        W=_load_w(d, model),
    ).validate(model)


def p2_spec_from_dict(d: dict, model: PeriodicMjlsModel) -> SynthesisSpecP2:
    for key in ("nu", "u_max", "W", "rho"):
        if key not in d or d[key] is None:
            raise ModelError(f"region-of-attraction spec missing field {key!r}")
    return SynthesisSpecP2(
        nu=np.asarray(d["nu"], dtype=float),
        u_max=np.asarray(d["u_max"], dtype=float),
        W=_load_w(d, model),
        rho=np.asarray(d["rho"], dtype=float),
    ).validate(model)


def p1_spec_to_dict(spec: SynthesisSpecP1) -> dict:
    d = {
        "Q": [_flat(m) for m in as_mode_stack(spec.Q)],
        "R": [_flat(m) for m in as_mode_stack(spec.R)],
        "u_max": [float(v) for v in spec.u_max],
        "hull_vertices": [[float(v) for v in row] for row in np.asarray(spec.hull_vertices)],
    }
    if spec.W is not None:
        W = np.asarray(spec.W)
        d["W"] = [[_flat(W[k, i]) for i in range(W.shape[1])] for k in range(W.shape[0])]
    return d


def p2_spec_to_dict(spec: SynthesisSpecP2) -> dict:
    W = np.asarray(spec.W)
    return {
        "nu": [float(v) for v in spec.nu],
        "u_max": [float(v) for v in spec.u_max],
        "W": [[_flat(W[k, i]) for i in range(W.shape[1])] for k in range(W.shape[0])],
        "rho": [float(v) for v in spec.rho],
    }


def load_spec(path, model: PeriodicMjlsModel, kind: str):
    d = json.loads(Path(path).read_text())
    if kind == "p1":
        if "hull_vertices" not in d:
            raise ModelError("expected a quadratic-cost (p1) spec with 'hull_vertices'")
        return p1_spec_from_dict(d, model)
    if kind == "p2":
        if "nu" not in d or "hull_vertices" in d:
            raise ModelError("expected a region-of-attraction (p2) spec with 'nu' and 'rho'")
        return p2_spec_from_dict(d, model)
    raise ValueError(f"unknown problem kind {kind!r}")


def report_dict(result: SynthesisResult, kind: str, spec, model: PeriodicMjlsModel) -> dict:
    """Machine-readable synthesis report; echoes the audit data so a
    simulation run can be driven from the report alone."""
    rep = {
        "problem": kind,
        "status": "optimal",
        "objective": result.objective,
        "beta": result.beta,
        "spectral_radius_GT": result.closed_loop_radius,
        "diagnostics": {k: float(v) for k, v in result.diagnostics.items()},
        "solve_time_s": result.solve_time,
        "u_max": [float(v) for v in spec.u_max],
    }
    S0 = as_mode_stack(result.S[0])
    rep["region_ellipsoids"] = [_flat(S0[i]) for i in range(S0.shape[0])]
    rep["region_traces"] = [float(np.trace(S0[i])) for i in range(S0.shape[0])]
    if kind == "p1":
        rep["Q"] = [_flat(m) for m in as_mode_stack(spec.Q)]
        rep["R"] = [_flat(m) for m in as_mode_stack(spec.R)]
        rep["hull_vertices"] = [[float(v) for v in row]
                                for row in np.asarray(spec.hull_vertices)]
        if spec.W is not None:
            W = np.asarray(spec.W)
            rep["W"] = [[_flat(W[k, i]) for i in range(W.shape[1])]
                        for k in range(W.shape[0])]
        rep["region_avg_trace"] = None
    else:
        W = np.asarray(spec.W)
        rep["W"] = [[_flat(W[k, i]) for i in range(W.shape[1])] for k in range(W.shape[0])]
        rep["nu"] = [float(v) for v in spec.nu]
        rep["rho"] = [float(v) for v in spec.rho]
        rho = np.asarray(spec.rho, dtype=float)
        rep["region_avg_trace"] = float(sum(rho[i] * np.trace(S0[i])
                                            for i in range(S0.shape[0])))
    return rep
