"""Operator algebra for Markov jump linear systems.

Three primitive operators act on a mode-indexed set V = (V(0), ..., V(N-1)):

    expectation_op:  E^i(V)   = sum_j p_ij V(j)
    t_op:            T_k^j(V) = sum_i p_ij phi_k(i) V(i) phi_k(i)^T
    l_op:            L_k^i(V) = phi_k(i)^T E^i(V) phi_k(i)

t_op propagates the per-mode second-moment matrices one step forward; l_op is
its adjoint in the trace inner product.  Stacking column-major vectorizations
of the N entries (mode-major) turns each of them into an (N n_x^2) square
matrix; the product of those matrices over one period governs mean-square
stability.
"""

from __future__ import annotations

import warnings

import numpy as np

from .model import ClosedLoopSystem, PeriodicMjlsModel, as_mode_stack, periodic_index

DENSE_EIG_LIMIT = 512
POWER_ITER_TOL = 1e-10
POWER_ITER_MAX = 100_000


def _check_mode(i: int, N: int) -> None:
    if not 0 <= i < N:
        raise IndexError(f"mode index {i} out of range [0, {N})")


def expectation_op(V, P: np.ndarray, i: int) -> np.ndarray:
    """E^i(V) = sum_j p_ij V(j)."""
    stack = as_mode_stack(V)
    P = np.asarray(P, dtype=float)
    _check_mode(i, P.shape[0])
    return np.tensordot(P[i], stack, axes=(0, 0))


def t_op(V, cl: ClosedLoopSystem, k: int, j: int) -> np.ndarray:
    """T_k^j(V) = sum_i p_ij phi_k(i) V(i) phi_k(i)^T."""
    stack = as_mode_stack(V)
    _check_mode(j, cl.num_modes)
    kk = periodic_index(k, cl.period)
    phi = cl.phi[kk]
    out = np.zeros((cl.n_x, cl.n_x))
    for i in range(cl.num_modes):
        out += cl.P[i, j] * phi[i] @ stack[i] @ phi[i].T
    return out


def l_op(V, cl: ClosedLoopSystem, k: int, i: int) -> np.ndarray:
    """L_k^i(V) = phi_k(i)^T E^i(V) phi_k(i)."""
    _check_mode(i, cl.num_modes)
    kk = periodic_index(k, cl.period)
    phi = cl.phi[kk, i]
    return phi.T @ expectation_op(V, cl.P, i) @ phi


def t_op_all(V, cl: ClosedLoopSystem, k: int) -> np.ndarray:
    """All N outputs of t_op at step k, stacked (N, n_x, n_x)."""
    return np.stack([t_op(V, cl, k, j) for j in range(cl.num_modes)])


def l_op_all(V, cl: ClosedLoopSystem, k: int) -> np.ndarray:
    """All N outputs of l_op at step k, stacked (N, n_x, n_x)."""
    return np.stack([l_op(V, cl, k, i) for i in range(cl.num_modes)])


def stack_vec(V) -> np.ndarray:
    """Mode-major stack of column-major vectorizations: length N*d*d."""
    stack = as_mode_stack(V)
    return np.concatenate([m.reshape(-1, order="F") for m in stack])


def unstack_vec(v: np.ndarray, N: int, d: int) -> np.ndarray:
    """Inverse of stack_vec, returning an (N, d, d) stack."""
    v = np.asarray(v, dtype=float)
    return np.stack([v[m * d * d:(m + 1) * d * d].reshape(d, d, order="F") for m in range(N)])


def lifted_step_matrix(cl: ClosedLoopSystem, k: int) -> np.ndarray:
    """Matrix of the step map V -> (T_k^0(V), ..., T_k^{N-1}(V)) on stacked vecs.

    Block (j, i) is p_ij * kron(phi_k(i), phi_k(i)); dimension N*n_x^2.
    """
    kk = periodic_index(k, cl.period)
    N, d = cl.num_modes, cl.n_x
    M = np.zeros((N * d * d, N * d * d))
    for i in range(N):
        kr = np.kron(cl.phi[kk, i], cl.phi[kk, i])
        for j in range(N):
            M[j * d * d:(j + 1) * d * d, i * d * d:(i + 1) * d * d] = cl.P[i, j] * kr
    return M


def lifted_adjoint_step_matrix(cl: ClosedLoopSystem, k: int) -> np.ndarray:
    """Matrix of the adjoint step map V -> (L_k^0(V), ..., L_k^{N-1}(V)).

    Block (i, j) is p_ij * kron(phi_k(i)^T, phi_k(i)^T).  Built directly from
    the l_op definition (not by transposing lifted_step_matrix) so the adjoint
    identity stays an independent cross-check.
    """
    kk = periodic_index(k, cl.period)
    N, d = cl.num_modes, cl.n_x
    M = np.zeros((N * d * d, N * d * d))
    for i in range(N):
        kr = np.kron(cl.phi[kk, i].T, cl.phi[kk, i].T)
        for j in range(N):
            M[i * d * d:(i + 1) * d * d, j * d * d:(j + 1) * d * d] = cl.P[i, j] * kr
    return M


def one_period_operator(cl: ClosedLoopSystem) -> np.ndarray:
    """Lifted matrix of the one-period forward map: M_{T-1} ... M_1 M_0."""
    G = np.eye(cl.num_modes * cl.n_x ** 2)
    for k in range(cl.period):
        G = lifted_step_matrix(cl, k) @ G
    return G


def f_period_operator(cl: ClosedLoopSystem) -> np.ndarray:
    """Lifted matrix of the one-period adjoint map: L_0 L_1 ... L_{T-1}.

    Its spectral radius equals that of one_period_operator (adjoint pair).
    """
    F = np.eye(cl.num_modes * cl.n_x ** 2)
    for k in range(cl.period - 1, -1, -1):
        F = lifted_adjoint_step_matrix(cl, k) @ F
    return F


def spectral_radius(M: np.ndarray) -> float:
    """Largest eigenvalue modulus.

    Dense eigensolver up to dimension 512, plain power iteration above
    (tolerance 1e-10, at most 1e5 iterations; non-convergence warns and
    returns the best estimate).
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"spectral radius needs a square matrix, got {M.shape}")
    n = M.shape[0]
    if n <= DENSE_EIG_LIMIT:
        return float(np.max(np.abs(np.linalg.eigvals(M)))) if n else 0.0
    rng = np.random.default_rng(0)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(POWER_ITER_MAX):
        w = M @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        new_est = nw
        v = w / nw
        if abs(new_est - est) <= POWER_ITER_TOL * max(1.0, new_est):
            return float(new_est)
        est = new_est
    warnings.warn(
        f"power iteration did not converge in {POWER_ITER_MAX} iterations; "
        f"returning best estimate {est:.6e}",
        RuntimeWarning,
    )
    return float(est)


def operator_norm(M: np.ndarray) -> float:
    """Largest singular value."""
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return 0.0
    return float(np.linalg.svd(M, compute_uv=False)[0])


def per_mode_monodromy(system, i: int) -> np.ndarray:
    """One-period product for mode i held fixed: X_{T-1}(i) ... X_1(i) X_0(i).

    Accepts a PeriodicMjlsModel (uses A) or a ClosedLoopSystem (uses phi).
    """
    if isinstance(system, PeriodicMjlsModel):
        mats = system.A
    elif isinstance(system, ClosedLoopSystem):
        mats = system.phi
    else:
        mats = np.asarray(system, dtype=float)
        if mats.ndim != 4:
            raise TypeError("expected a model, closed loop, or (T, N, d, d) array")
    _check_mode(i, mats.shape[1])
    out = np.eye(mats.shape[2])
    for k in range(mats.shape[0]):
        out = mats[k, i] @ out
    return out
