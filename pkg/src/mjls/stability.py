"""Mean-square stability tests and periodic Lyapunov certificates.

A closed loop is mean-square stable (MSS) iff the one-period lifted operator
is contractive.  Equivalently there is a T-periodic family of positive
definite matrices P_k(i) with

    P_k(i) - L_k^i(P_{k+1})  >  0        (P_T = P_0)

and, in the relaxed form, nu_k P_k(i) - L_k^i(P_{k+1}) >= 0 with
prod_k nu_k < 1.  Certificates are produced either by SDP feasibility or by
the backward fixed-point recursion P_k(i) = L_k^i(P_{k+1}) + I, and are always
re-verified from raw data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import sdp as sdp_mod
from .model import ClosedLoopSystem, ModeIndexedSet, as_mode_stack
from .operators import (
    l_op_all,
    lifted_step_matrix,
    one_period_operator,
    per_mode_monodromy,
    spectral_radius,
)

RESIDUAL_TOL = 1e-8


class ConvergenceError(RuntimeError):
    """Fixed-point recursion failed to settle (system likely not MSS)."""


@dataclass
class StabilityReport:
    """Outcome of an MSS test; mss holds iff spectral_radius < 1."""

    mss: bool
    spectral_radius: float
    per_mode_radii: np.ndarray
    method: str


@dataclass
class LyapunovCertificate:
    """T-periodic positive definite matrices certifying MSS.

    P is a length-T list of symmetric mode-indexed sets.  When nu is present
    the certified inequality is nu_k P_k(i) - L_k^i(P_{k+1}) >= 0, otherwise
    P_k(i) - L_k^i(P_{k+1}) >= 0 (up to the recorded epsilon margin).
    residuals[k, i] is the minimum eigenvalue of the certified inequality,
    filled by verify_certificate.
    """

    P: list
    nu: np.ndarray | None
    epsilon: float
    residuals: np.ndarray | None = None

    @property
    def period(self) -> int:
        return len(self.P)

    def P_stack(self) -> np.ndarray:
        """(T, N, d, d) array of the certificate matrices."""
        return np.stack([as_mode_stack(Pk) for Pk in self.P])


@dataclass
class CertificateReport:
    """Residuals recomputed from raw data, independent of any solver."""

    min_P_eig: np.ndarray  # (T, N)
    residuals: np.ndarray  # (T, N)
    ok: bool
    worst: tuple  # (k, i, value) for the smallest residual


def check_mss_lti(modes, P: np.ndarray) -> StabilityReport:
    """MSS test for a time-invariant system given by per-mode phi matrices.

    Builds the lifted step matrix of the covariance map and thresholds its
    spectral radius at 1.
    """
    stack = as_mode_stack(modes)
    P = np.asarray(P, dtype=float)
    if P.shape[0] != stack.shape[0]:
        raise ValueError(
            f"{stack.shape[0]} modes but transition matrix is {P.shape}"
        )
    cl = ClosedLoopSystem(phi=stack[None, :, :, :], P=P)
    sigma = spectral_radius(lifted_step_matrix(cl, 0))
    radii = np.array([spectral_radius(m) for m in stack])
    return StabilityReport(mss=sigma < 1.0, spectral_radius=sigma,
                           per_mode_radii=radii, method="lifted-step")


def check_mss_ltvpm(cl: ClosedLoopSystem) -> StabilityReport:
    """MSS test for a periodic system via the one-period lifted operator."""
    sigma = spectral_radius(one_period_operator(cl))
    radii = np.array([
        spectral_radius(per_mode_monodromy(cl, i)) for i in range(cl.num_modes)
    ])
    return StabilityReport(mss=sigma < 1.0, spectral_radius=sigma,
                           per_mode_radii=radii, method="one-period-operator")


def canonical_lyapunov(cl: ClosedLoopSystem, tol: float = 1e-9,
                       max_periods: int = 10_000) -> LyapunovCertificate:
    """Certificate from the backward fixed-point recursion.

    Iterates whole periods of P_k(i) = L_k^i(P_{k+1}) + I starting from
    P = I until the cyclic residual P_k(i) - L_k^i(P_{k+1}) - I is within
    tol in max norm.  Converges iff the closed loop is MSS.
    """
    T, N, d = cl.period, cl.num_modes, cl.n_x
    P = np.tile(np.eye(d), (T, N, 1, 1))
    eye = np.eye(d)
    for _ in range(max_periods):
        new = P.copy()
        for k in range(T - 1, -1, -1):
            nxt = new[0] if k == T - 1 else new[k + 1]
            new[k] = l_op_all(nxt, cl, k) + eye
        P = new
        worst = 0.0
        for k in range(T):
            resid = P[k] - l_op_all(P[(k + 1) % T], cl, k) - eye
            worst = max(worst, np.abs(resid).max())
        if worst <= tol:
            cert = LyapunovCertificate(
                P=[ModeIndexedSet(P[k], symmetric=True) for k in range(T)],
                nu=None, epsilon=1.0,
            )
            verify_certificate(cert, cl)
            return cert
        if not np.all(np.isfinite(P)):
            break
    raise ConvergenceError(
        f"fixed-point recursion did not converge within {max_periods} periods "
        f"(system not MSS, or tol={tol:g} too tight)"
    )


def _decrease_blocks(problem: sdp_mod.SdpProblem, cl: ClosedLoopSystem,
                     epsilon: float, nu: np.ndarray | None) -> None:
    """Declare P variables and the per-(k, i) decrease LMI blocks."""
    T, N, d = cl.period, cl.num_modes, cl.n_x
    for k in range(T):
        for i in range(N):
            problem.add_symmetric(f"P[{k}][{i}]", d)
    for k in range(T):
        for i in range(N):
            problem.add_lmi_block(
                -epsilon * np.eye(d),
                {f"P[{k}][{i}]": lambda S: S},
                label=f"pd[{k},{i}]",
            )
    for k in range(T):
        kp = (k + 1) % T
        for i in range(N):
            phi = cl.phi[k, i]
            scale = nu[k] if nu is not None else 1.0
            shift = 0.0 if nu is not None else epsilon
            terms = {
                f"P[{k}][{i}]": (lambda S, s=scale: s * S),
            }
            for j in range(N):
                p_ij = cl.P[i, j]
                key = f"P[{kp}][{j}]"
                prev = terms.get(key)
                if prev is None:
                    terms[key] = (lambda S, ph=phi, p=p_ij: -p * ph.T @ S @ ph)
                else:
                    # k+1 wraps onto k when T == 1: fold both appearances
                    terms[key] = (
                        lambda S, f0=prev, ph=phi, p=p_ij: f0(S) - p * ph.T @ S @ ph
                    )
            problem.add_lmi_block(-shift * np.eye(d), terms, label=f"dec[{k},{i}]")


def _certificate_from_values(values: dict, T: int, N: int,
                             nu: np.ndarray | None, epsilon: float) -> LyapunovCertificate:
    P = [
        ModeIndexedSet(
            np.stack([0.5 * (values[f"P[{k}][{i}]"] + values[f"P[{k}][{i}]"].T)
                      for i in range(N)]),
            symmetric=True,
        )
        for k in range(T)
    ]
    return LyapunovCertificate(P=P, nu=None if nu is None else np.asarray(nu, float),
                               epsilon=epsilon)


def lyapunov_feasibility(cl: ClosedLoopSystem, epsilon: float = 1e-6,
                         backend=None) -> LyapunovCertificate | None:
    """Search for a periodic Lyapunov certificate by SDP feasibility.

    Finds symmetric P_k(i) with P_k(i) >= eps*I and
    P_k(i) - L_k^i(P_{k+1}) >= eps*I (indices wrap mod T).  Returns a
    verified certificate, or None when the SDP is certified infeasible
    (the system is not MSS).  Raises SolverFailure on numerical failure.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    T, N = cl.period, cl.num_modes
    problem = sdp_mod.SdpProblem()
    _decrease_blocks(problem, cl, epsilon, nu=None)
    problem.set_objective(matrices={
        f"P[{k}][{i}]": np.eye(cl.n_x) for k in range(T) for i in range(N)
    })
    sol = sdp_mod.solve(problem, backend=backend)
    if sol.status == "infeasible":
        return None
    if sol.status != "optimal":
        raise sdp_mod.SolverFailure(f"feasibility solve failed: {sol.message or sol.solver_status}")
    cert = _certificate_from_values(sol.values, T, N, None, epsilon)
    verify_certificate(cert, cl)
    return cert


def relaxed_lyapunov_feasibility(cl: ClosedLoopSystem, nu, epsilon: float = 1e-6,
                                 backend=None) -> LyapunovCertificate | None:
    """Certificate search with the per-step decrease relaxed by nu_k.

    Feasibility of nu_k P_k(i) - L_k^i(P_{k+1}) >= 0 with P_k(i) >= eps*I;
    requires all nu_k > 0 and prod_k nu_k < 1 (rejected before solving).
    """
    nu = np.asarray(nu, dtype=float)
    if nu.shape != (cl.period,):
        raise ValueError(f"nu must have length {cl.period}, got {nu.shape}")
    if np.any(nu <= 0):
        raise ValueError("all nu_k must be positive")
    if np.prod(nu) >= 1.0:
        raise ValueError(f"prod(nu) = {np.prod(nu)!r} must be < 1")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    T, N = cl.period, cl.num_modes
    problem = sdp_mod.SdpProblem()
    _decrease_blocks(problem, cl, epsilon, nu=nu)
    problem.set_objective(matrices={
        f"P[{k}][{i}]": np.eye(cl.n_x) for k in range(T) for i in range(N)
    })
    sol = sdp_mod.solve(problem, backend=backend)
    if sol.status == "infeasible":
        return None
    if sol.status != "optimal":
        raise sdp_mod.SolverFailure(f"relaxed feasibility solve failed: {sol.message or sol.solver_status}")
    cert = _certificate_from_values(sol.values, T, N, nu, epsilon)
    verify_certificate(cert, cl)
    return cert


def verify_certificate(cert: LyapunovCertificate, cl: ClosedLoopSystem) -> CertificateReport:
    """Recompute every certified inequality's minimum eigenvalue from raw data.

    Fills cert.residuals.  Independent of whatever solver produced the
    certificate.
    """
    T, N = cert.period, cl.num_modes
    if T != cl.period:
        raise ValueError(f"certificate period {T} != system period {cl.period}")
    P = cert.P_stack()
    min_eig = np.zeros((T, N))
    residuals = np.zeros((T, N))
    for k in range(T):
        L = l_op_all(P[(k + 1) % T], cl, k)
        scale = cert.nu[k] if cert.nu is not None else 1.0
        for i in range(N):
            min_eig[k, i] = np.linalg.eigvalsh(P[k, i]).min()
            M = scale * P[k, i] - L[i]
            residuals[k, i] = np.linalg.eigvalsh(0.5 * (M + M.T)).min()
    cert.residuals = residuals
    k_w, i_w = np.unravel_index(np.argmin(residuals), residuals.shape)
    ok = bool(residuals.min() >= -RESIDUAL_TOL
              and min_eig.min() >= cert.epsilon - RESIDUAL_TOL)
    return CertificateReport(min_P_eig=min_eig, residuals=residuals, ok=ok,
                             worst=(int(k_w), int(i_w), float(residuals[k_w, i_w])))


def performance_bound(cert: LyapunovCertificate, cl: ClosedLoopSystem, M,
                      beta: float, x0: np.ndarray, i0: int,
                      tol: float = 1e-8) -> float:
    """Certified upper bound on the expected accumulated quadratic cost.

    Requires P_k(i) - L_k^i(P_{k+1}) - M_k(i)/beta >= 0 (within tol) with
    every M_k(i) PSD; then

        E[sum_k x_k^T M_{k mod T}(w_k) x_k]  <=  beta * x0^T P_0(i0) x0.

    A violated inequality raises, naming the worst (k, i).
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    P = cert.P_stack()
    T, N, d = P.shape[0], P.shape[1], P.shape[2]
    Mstack = np.stack([as_mode_stack(Mk) for Mk in M])
    if Mstack.shape != (T, N, d, d):
        raise ValueError(f"cost weights must be (T, N, {d}, {d}), got {Mstack.shape}")
    for k in range(T):
        for i in range(N):
            if np.linalg.eigvalsh(0.5 * (Mstack[k, i] + Mstack[k, i].T)).min() < -1e-10:
                raise ValueError(f"cost weight M_{k}({i}) is not PSD")
    worst, worst_ki = np.inf, (0, 0)
    for k in range(T):
        L = l_op_all(P[(k + 1) % T], cl, k)
        for i in range(N):
            G = P[k, i] - L[i] - Mstack[k, i] / beta
            m = float(np.linalg.eigvalsh(0.5 * (G + G.T)).min())
            if m < worst:
                worst, worst_ki = m, (k, i)
    if worst < -tol:
        raise ValueError(
            f"performance inequality violated at (k={worst_ki[0]}, i={worst_ki[1]}): "
            f"min eigenvalue {worst:.3e}"
        )
    x0 = np.asarray(x0, dtype=float)
    if not 0 <= i0 < N:
        raise IndexError(f"initial mode {i0} out of range [0, {N})")
    return float(beta * x0 @ P[0, i0] @ x0)
