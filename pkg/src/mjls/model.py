"""System descriptions for periodically time-varying Markov jump linear systems.

A plant is a T-periodic family of mode-indexed pairs (A_k(i), B_k(i)) driven by
a homogeneous Markov chain with row-stochastic transition matrix P:

    x_{k+1} = A_k(w_k) x_k + B_k(w_k) u_k,        u_k = K_k(w_k) x_k

Modes are indexed 0..N-1 and time steps 0..T-1 throughout; any time index k is
reduced mod T (periodic extension).  All matrices in the JSON interchange files
are stored as flat row-major number arrays.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ROW_SUM_TOL = 1e-9
SYMMETRY_TOL = 1e-12


class ModelError(ValueError):
    """Invalid system description."""


class DimensionMismatchError(ModelError):
    """A matrix has the wrong shape; the message names the offending (k, i)."""


class StochasticityError(ModelError):
    """Transition matrix is not row-stochastic; the message carries the row sum."""


def periodic_index(k: int, period: int) -> int:
    """Reduce a time index into [0, period). Single home of the mod-T rule."""
    return k % period


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class ModeIndexedSet:
    """N square matrices of a common dimension, one per mode.

    When ``symmetric`` is set, every entry must satisfy
    max|V(i) - V(i)^T| <= 1e-12.
    """

    entries: np.ndarray  # (N, d, d)
    symmetric: bool = False

    def __post_init__(self):
        e = _freeze(np.asarray(self.entries, dtype=float))
        if e.ndim != 3 or e.shape[1] != e.shape[2]:
            raise DimensionMismatchError(
                f"mode-indexed set must be (N, d, d), got {e.shape}"
            )
        if self.symmetric:
            skew = np.abs(e - np.transpose(e, (0, 2, 1))).max() if e.size else 0.0
            if skew > SYMMETRY_TOL:
                raise ModelError(f"entries not symmetric: max|V - V^T| = {skew:.3e}")
        object.__setattr__(self, "entries", e)

    @property
    def num_modes(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    def __getitem__(self, i: int) -> np.ndarray:
        return self.entries[i]

    def __iter__(self):
        return iter(self.entries)


def as_mode_stack(V) -> np.ndarray:
    """Coerce a ModeIndexedSet or array-like to an (N, d, d) float array."""
    if isinstance(V, ModeIndexedSet):
        return V.entries
    a = np.asarray(V, dtype=float)
    if a.ndim != 3 or a.shape[1] != a.shape[2]:
        raise DimensionMismatchError(f"expected (N, d, d) stack, got {a.shape}")
    return a


@dataclass(frozen=True)
class PeriodicMjlsModel:
    """T-periodic mode-indexed plant matrices plus the mode transition matrix.

    A: (T, N, n_x, n_x), B: (T, N, n_x, n_u), P: (N, N) row-stochastic.
    Immutable after validation; safe to share across threads.
    """

    A: np.ndarray
    B: np.ndarray
    P: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "A", _freeze(self.A))
        object.__setattr__(self, "B", _freeze(self.B))
        object.__setattr__(self, "P", _freeze(self.P))

    @property
    def period(self) -> int:
        return self.A.shape[0]

    @property
    def num_modes(self) -> int:
        return self.P.shape[0]

    @property
    def n_x(self) -> int:
        return self.A.shape[2]

    @property
    def n_u(self) -> int:
        return self.B.shape[3]

    def A_at(self, k: int, i: int) -> np.ndarray:
        return self.A[periodic_index(k, self.period), i]

    def B_at(self, k: int, i: int) -> np.ndarray:
        return self.B[periodic_index(k, self.period), i]


@dataclass(frozen=True)
class ControllerGains:
    """T-periodic mode-indexed feedback gains, K: (T, N, n_u, n_x)."""

    K: np.ndarray

    def __post_init__(self):
        K = _freeze(self.K)
        if K.ndim != 4:
            raise DimensionMismatchError(f"gains must be (T, N, n_u, n_x), got {K.shape}")
        object.__setattr__(self, "K", K)

    @property
    def period(self) -> int:
        return self.K.shape[0]

    @classmethod
    def zeros(cls, model: PeriodicMjlsModel) -> "ControllerGains":
        return cls(np.zeros((model.period, model.num_modes, model.n_u, model.n_x)))


@dataclass(frozen=True)
class ClosedLoopSystem:
    """Closed-loop step matrices phi_k(i) = A_k(i) + B_k(i) K_k(i) with the chain."""

    phi: np.ndarray  # (T, N, n_x, n_x)
    P: np.ndarray  # (N, N)

    def __post_init__(self):
        object.__setattr__(self, "phi", _freeze(self.phi))
        object.__setattr__(self, "P", _freeze(self.P))

    @property
    def period(self) -> int:
        return self.phi.shape[0]

    @property
    def num_modes(self) -> int:
        return self.P.shape[0]

    @property
    def n_x(self) -> int:
        return self.phi.shape[2]

    def phi_at(self, k: int, i: int) -> np.ndarray:
        return self.phi[periodic_index(k, self.period), i]


def validate_model(model: PeriodicMjlsModel) -> PeriodicMjlsModel:
    """Check every model invariant; returns the model unchanged on success.

    Raises DimensionMismatchError naming the offending (k, i), or
    StochasticityError reporting the bad row sum.  Idempotent.
    """
    A, B, P = model.A, model.B, model.P
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise DimensionMismatchError(f"transition matrix must be square, got {P.shape}")
    N = P.shape[0]
    if A.ndim != 4 or B.ndim != 4:
        raise DimensionMismatchError(
            f"A must be (T, N, n_x, n_x) and B (T, N, n_x, n_u); got {A.shape}, {B.shape}"
        )
    T, NA, n_x, n_x2 = A.shape
    if NA != N:
        raise DimensionMismatchError(f"A has {NA} modes but transition matrix has {N}")
    if n_x != n_x2:
        raise DimensionMismatchError(f"A entries must be square, got {n_x}x{n_x2}")
    if B.shape[0] != T or B.shape[1] != N or B.shape[2] != n_x:
        # locate the first offender for the error message
        for k in range(min(T, B.shape[0])):
            for i in range(min(N, B.shape[1])):
                if B[k, i].shape != (n_x, model.n_u):
                    raise DimensionMismatchError(
                        f"B_{k}({i}) has shape {B[k, i].shape}, expected ({n_x}, {model.n_u})"
                    )
        raise DimensionMismatchError(
            f"B must be ({T}, {N}, {n_x}, n_u), got {B.shape}"
        )
    if T < 1:
        raise ModelError("period must be >= 1")
    if np.any(P < -0.0) or np.any(P > 1.0):
        bad = np.argwhere((P < 0) | (P > 1))[0]
        raise StochasticityError(
            f"transition probability p[{bad[0]},{bad[1]}] = {P[tuple(bad)]} outside [0, 1]"
        )
    sums = P.sum(axis=1)
    for i, s in enumerate(sums):
        if abs(s - 1.0) > ROW_SUM_TOL:
            raise StochasticityError(f"transition matrix row {i} sums to {s!r}, not 1")
    if not np.all(np.isfinite(A)) or not np.all(np.isfinite(B)):
        raise ModelError("system matrices contain non-finite entries")
    return model


def close_loop(model: PeriodicMjlsModel, gains: ControllerGains) -> ClosedLoopSystem:
    """Form phi_k(i) = A_k(i) + B_k(i) K_k(i) for every (k, i)."""
    K = gains.K
    T, N = model.period, model.num_modes
    if K.shape != (T, N, model.n_u, model.n_x):
        raise DimensionMismatchError(
            f"gains shape {K.shape} inconsistent with model "
            f"({T}, {N}, {model.n_u}, {model.n_x})"
        )
    phi = model.A + np.einsum("knxu,knuy->knxy", model.B, K)
    return ClosedLoopSystem(phi=phi, P=model.P)


def open_loop(model: PeriodicMjlsModel) -> ClosedLoopSystem:
    """Closed loop under zero feedback: phi_k(i) = A_k(i)."""
    return close_loop(model, ControllerGains.zeros(model))


def build_demo_system() -> PeriodicMjlsModel:
    """Two-mode actuator-failure demo plant with period 10.

    Mode 0 is actuated (B = [1; 1]); mode 1 has no control authority
    (B = 0), modeling a full actuator outage.  Each mode is stable over
    one period on its own, yet the switched system is mean-square
    unstable in open loop.
    """
    T, N, n_x, n_u = 10, 2, 2, 1
    A = np.zeros((T, N, n_x, n_x))
    B = np.zeros((T, N, n_x, n_u))
    for k in range(T):
        A[k, 0] = [[-0.5, 2.0], [-0.4, 0.8 * np.sin(0.2 * np.pi * k)]]
        A[k, 1] = [[0.5 * np.cos(0.2 * np.pi * k), 0.5], [0.8, 0.5]]
        B[k, 0] = [[1.0], [1.0]]
        B[k, 1] = [[0.0], [0.0]]
    P = np.array([[0.8, 0.2], [0.9, 0.1]])
    return validate_model(PeriodicMjlsModel(A=A, B=B, P=P))


# ---------------------------------------------------------------------------
# JSON interchange.  Matrices are flat row-major lists; see README for the
# full schema.
# ---------------------------------------------------------------------------


def _mat_to_flat(m: np.ndarray) -> list:
    return [float(v) for v in np.asarray(m).reshape(-1)]


def _flat_to_mat(values, rows: int, cols: int, what: str) -> np.ndarray:
    a = np.asarray(values, dtype=float)
    if a.size != rows * cols:
        raise ModelError(f"{what}: expected {rows * cols} numbers, got {a.size}")
    return a.reshape(rows, cols)


def model_to_dict(model: PeriodicMjlsModel) -> dict:
    T, N = model.period, model.num_modes
    return {
        "n_x": model.n_x,
        "n_u": model.n_u,
        "num_modes": N,
        "period": T,
        "A": [[_mat_to_flat(model.A[k, i]) for i in range(N)] for k in range(T)],
        "B": [[_mat_to_flat(model.B[k, i]) for i in range(N)] for k in range(T)],
        "transition_matrix": [[float(v) for v in row] for row in model.P],
    }


def model_from_dict(d: dict) -> PeriodicMjlsModel:
    try:
        n_x, n_u = int(d["n_x"]), int(d["n_u"])
        N, T = int(d["num_modes"]), int(d["period"])
        rawA, rawB, rawP = d["A"], d["B"], d["transition_matrix"]
    except KeyError as e:
        raise ModelError(f"model file missing field {e.args[0]!r}") from None
    if len(rawA) != T or len(rawB) != T:
        raise ModelError(f"A/B must have {T} time entries, got {len(rawA)}/{len(rawB)}")
    A = np.zeros((T, N, n_x, n_x))
    B = np.zeros((T, N, n_x, n_u))
    for k in range(T):
        if len(rawA[k]) != N or len(rawB[k]) != N:
            raise ModelError(f"A[{k}]/B[{k}] must have {N} mode entries")
        for i in range(N):
            A[k, i] = _flat_to_mat(rawA[k][i], n_x, n_x, f"A[{k}][{i}]")
            B[k, i] = _flat_to_mat(rawB[k][i], n_x, n_u, f"B[{k}][{i}]")
    P = np.asarray(rawP, dtype=float)
    return validate_model(PeriodicMjlsModel(A=A, B=B, P=P))


def save_model(model: PeriodicMjlsModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=2, sort_keys=True))


def load_model(path) -> PeriodicMjlsModel:
    return model_from_dict(json.loads(Path(path).read_text()))


def gains_to_dict(gains: ControllerGains) -> dict:
    T, N = gains.K.shape[0], gains.K.shape[1]
    return {"K": [[_mat_to_flat(gains.K[k, i]) for i in range(N)] for k in range(T)]}


def gains_from_dict(d: dict, model: PeriodicMjlsModel) -> ControllerGains:
    try:
        rawK = d["K"]
    except KeyError:
        raise ModelError("gains file missing field 'K'") from None
    T, N = model.period, model.num_modes
    if len(rawK) != T:
        raise ModelError(f"K must have {T} time entries, got {len(rawK)}")
    K = np.zeros((T, N, model.n_u, model.n_x))
    for k in range(T):
        if len(rawK[k]) != N:
            raise ModelError(f"K[{k}] must have {N} mode entries")
        for i in range(N):
            K[k, i] = _flat_to_mat(rawK[k][i], model.n_u, model.n_x, f"K[{k}][{i}]")
    return ControllerGains(K=K)


def save_gains(gains: ControllerGains, path) -> None:
    Path(path).write_text(json.dumps(gains_to_dict(gains), indent=2, sort_keys=True))


def load_gains(path, model: PeriodicMjlsModel) -> ControllerGains:
    return gains_from_dict(json.loads(Path(path).read_text()), model)
