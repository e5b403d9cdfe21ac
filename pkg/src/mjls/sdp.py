"""Linear SDP layer: symmetric vectorization, problem assembly, conic solve.

A problem is a linear objective over named scalar, symmetric-matrix, and
rectangular-matrix variables, subject to LMI blocks

    F_0 + sum_v  A_v(var_v)  >= 0   (positive semidefinite)

where each A_v is a linear matrix-valued map supplied as a callable; assembly
evaluates it on the coordinate basis of the variable.  Everything is lowered
to the standard conic form

    min c^T x   s.t.   A x + s = b,   s in {0}^m_eq x PSD x ... x PSD

using the scaled triangular embedding (svec), which is exactly the PSD-cone
format of the Clarabel interior-point solver that backs `solve`.  Solver
status is never trusted alone: `solve` recomputes every block's minimum
eigenvalue at the returned point and downgrades the status on violation.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy import sparse

SYMMETRY_TOL = 1e-12
VIOLATION_TOL = 1e-6

_SQRT2 = np.sqrt(2.0)


class SdpError(ValueError):
    """Malformed problem (asymmetric data, unknown variable, bad shapes)."""


class SolverFailure(RuntimeError):
    """The backend crashed or returned an unusable point."""


def svec(S: np.ndarray) -> np.ndarray:
    """Scaled lower-triangular stacking of a symmetric matrix.

    Off-diagonal entries are multiplied by sqrt(2) so that
    <svec(A), svec(B)> = tr(A B).
    """
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise SdpError(f"svec needs a square matrix, got {S.shape}")
    if np.abs(S - S.T).max(initial=0.0) > SYMMETRY_TOL:
        raise SdpError(f"svec input not symmetric: max|S - S^T| = {np.abs(S - S.T).max():.3e}")
    d = S.shape[0]
    out = np.empty(d * (d + 1) // 2)
    idx = 0
    for r in range(d):
        for c in range(r + 1):
            out[idx] = S[r, c] if r == c else _SQRT2 * S[r, c]
            idx += 1
    return out


def smat(v: np.ndarray) -> np.ndarray:
    """Inverse of svec."""
    v = np.asarray(v, dtype=float)
    n = v.size
    d = int(round((np.sqrt(8 * n + 1) - 1) / 2))
    if d * (d + 1) // 2 != n:
        raise SdpError(f"svec length {n} is not a triangular number")
    S = np.zeros((d, d))
    idx = 0
    for r in range(d):
        for c in range(r + 1):
            if r == c:
                S[r, c] = v[idx]
            else:
                S[r, c] = S[c, r] = v[idx] / _SQRT2
            idx += 1
    return S


def svec_dim(d: int) -> int:
    return d * (d + 1) // 2


def _sym_basis(d: int, coord: int) -> np.ndarray:
    """Basis matrix B_c with S = sum_c svec(S)_c * B_c."""
    B = np.zeros((d, d))
    idx = 0
    for r in range(d):
        for c in range(r + 1):
            if idx == coord:
                if r == c:
                    B[r, c] = 1.0
                else:
                    B[r, c] = B[c, r] = 1.0 / _SQRT2
                return B
            idx += 1
    raise SdpError(f"coordinate {coord} out of range for dimension {d}")


@dataclass
class _Variable:
    name: str
    kind: str  # "scalar" | "symmetric" | "rectangular"
    shape: tuple
    offset: int  # first coordinate in the stacked unknown vector

    @property
    def n_coords(self) -> int:
        if self.kind == "scalar":
            return 1
        if self.kind == "symmetric":
            return svec_dim(self.shape[0])
        return self.shape[0] * self.shape[1]

    def basis(self, coord: int):
        """Coordinate basis element, in the variable's own shape."""
        if self.kind == "scalar":
            return 1.0
        if self.kind == "symmetric":
            return _sym_basis(self.shape[0], coord)
        E = np.zeros(self.shape)
        E[coord // self.shape[1], coord % self.shape[1]] = 1.0
        return E

    def unpack(self, x: np.ndarray):
        seg = x[self.offset:self.offset + self.n_coords]
        if self.kind == "scalar":
            return float(seg[0])
        if self.kind == "symmetric":
            return smat(seg)
        return seg.reshape(self.shape)


@dataclass
class _LmiBlock:
    label: str
    constant: np.ndarray  # (m, m) symmetric
    coeffs: dict  # var name -> (n_coords, m, m) symmetric coefficient stack

    @property
    def dim(self) -> int:
        return self.constant.shape[0]


def _var_coordinates(var: "_Variable", value) -> np.ndarray:
    """Coordinates of a value in the variable's own basis ordering."""
    if var.kind == "scalar":
        return np.array([float(value)])
    value = np.asarray(value, dtype=float)
    if var.kind == "symmetric":
        return svec(0.5 * (value + value.T))
    return value.reshape(-1)


@dataclass
class ConicData:
    """Deterministic standard-form data handed to a backend."""

    c: np.ndarray
    A: sparse.csc_matrix
    b: np.ndarray
    n_eq: int
    psd_dims: list


@dataclass
class SdpSolution:
    status: str  # "optimal" | "infeasible" | "numerical-failure"
    values: dict
    objective_value: float | None
    max_constraint_violation: float | None
    solver_status: str
    solve_time: float
    message: str = ""


class SdpProblem:
    """Declarative container for one linear SDP."""

    def __init__(self):
        self._vars: dict[str, _Variable] = {}
        self._blocks: list[_LmiBlock] = []
        self._equalities: list = []  # (label, {name: coeff array/scalar}, rhs)
        self._obj_scalars: dict[str, float] = {}
        self._obj_matrices: dict[str, np.ndarray] = {}
        self._n_coords = 0

    # -- variables ---------------------------------------------------------

    def _add_var(self, name: str, kind: str, shape: tuple) -> str:
        if name in self._vars:
            raise SdpError(f"variable {name!r} already declared")
        self._vars[name] = _Variable(name, kind, shape, self._n_coords)
        self._n_coords += self._vars[name].n_coords
        return name

    def add_scalar(self, name: str) -> str:
        return self._add_var(name, "scalar", ())

    def add_symmetric(self, name: str, dim: int) -> str:
        return self._add_var(name, "symmetric", (dim, dim))

    def add_rectangular(self, name: str, rows: int, cols: int) -> str:
        """Matrix variable with free (unsymmetric) entries."""
        return self._add_var(name, "rectangular", (rows, cols))

    @property
    def variable_names(self) -> list:
        return list(self._vars)

    # -- objective and constraints ------------------------------------------

    def set_objective(self, scalars: dict | None = None, matrices: dict | None = None):
        """Minimize sum_s c_s * s + sum_v sum(C_v * V_v) (elementwise product).

        For symmetric V with symmetric C the matrix term equals tr(C V).
        """
        self._obj_scalars = dict(scalars or {})
        self._obj_matrices = {k: np.asarray(v, dtype=float) for k, v in (matrices or {}).items()}
        for name in list(self._obj_scalars) + list(self._obj_matrices):
            if name not in self._vars:
                raise SdpError(f"objective references undeclared variable {name!r}")

    def add_lmi_block(self, constant: np.ndarray, terms: dict, label: str = "") -> None:
        """Constrain constant + sum_v terms[v](var_v) >= 0 (PSD).

        Each terms[v] is a linear callable from a value of v's shape to a
        symmetric (m, m) matrix; it is evaluated on v's coordinate basis.
        """
        F0 = np.asarray(constant, dtype=float)
        if F0.ndim != 2 or F0.shape[0] != F0.shape[1]:
            raise SdpError(f"LMI constant must be square, got {F0.shape}")
        if np.abs(F0 - F0.T).max(initial=0.0) > SYMMETRY_TOL:
            raise SdpError(f"LMI block {label!r}: constant not symmetric")
        m = F0.shape[0]
        coeffs = {}
        for name, fn in terms.items():
            var = self._vars.get(name)
            if var is None:
                raise SdpError(f"LMI block {label!r} references undeclared variable {name!r}")
            stack = np.zeros((var.n_coords, m, m))
            for c in range(var.n_coords):
                C = np.asarray(fn(var.basis(c)), dtype=float)
                if C.shape != (m, m):
                    raise SdpError(
                        f"LMI block {label!r}: map for {name!r} returned shape "
                        f"{C.shape}, expected ({m}, {m})"
                    )
                if np.abs(C - C.T).max(initial=0.0) > SYMMETRY_TOL:
                    raise SdpError(f"LMI block {label!r}: coefficient for {name!r} not symmetric")
                stack[c] = C
            coeffs[name] = stack
        self._blocks.append(_LmiBlock(label or f"block{len(self._blocks)}", F0, coeffs))

    def add_equality(self, terms: dict, rhs: float = 0.0, label: str = "") -> None:
        """Linear equality sum_v <terms[v], var_v> == rhs.

        terms[v] is a scalar (for scalar vars) or an array of v's shape whose
        elementwise product with v is summed (symmetric pairs via trace).
        """
        coeffs = {}
        for name, C in terms.items():
            var = self._vars.get(name)
            if var is None:
                raise SdpError(f"equality {label!r} references undeclared variable {name!r}")
            coeffs[name] = _var_coordinates(var, C)
            if coeffs[name].size != var.n_coords:
                raise SdpError(f"equality {label!r}: coefficient shape mismatch for {name!r}")
        self._equalities.append((label or f"eq{len(self._equalities)}", coeffs, float(rhs)))

    @property
    def lmi_blocks(self) -> list:
        return list(self._blocks)

    # -- lowering ------------------------------------------------------------

    def objective_vector(self) -> np.ndarray:
        c = np.zeros(self._n_coords)
        for name, coeff in self._obj_scalars.items():
            c[self._vars[name].offset] += coeff
        for name, C in self._obj_matrices.items():
            var = self._vars[name]
            if var.kind == "symmetric":
                Csym = 0.5 * (C + C.T)
                c[var.offset:var.offset + var.n_coords] += svec(Csym)
            else:
                c[var.offset:var.offset + var.n_coords] += C.reshape(-1)
        return c

    def standard_form(self) -> ConicData:
        """Lower to `min c^T x, A x + s = b, s in {0}^n_eq x PSD blocks`.

        Row order: equalities first (zero cone), then each LMI block's svec
        rows in declaration order.  Assembly is deterministic: identical
        problems produce bit-identical data.
        """
        rows_i, cols_i, vals = [], [], []
        b_parts = []
        row = 0
        for _, coeffs, rhs in self._equalities:
            for name, cv in coeffs.items():
                var = self._vars[name]
                for c, v in enumerate(cv):
                    if v != 0.0:
                        rows_i.append(row)
                        cols_i.append(var.offset + c)
                        vals.append(v)
            b_parts.append(np.array([rhs]))
            row += 1
        n_eq = row
        psd_dims = []
        for blk in self._blocks:
            sd = svec_dim(blk.dim)
            psd_dims.append(blk.dim)
            for name, stack in blk.coeffs.items():
                var = self._vars[name]
                for c in range(stack.shape[0]):
                    col_vec = svec(stack[c])
                    for r, v in enumerate(col_vec):
                        if v != 0.0:
                            rows_i.append(row + r)
                            cols_i.append(var.offset + c)
                            vals.append(-v)  # s = b - A x must equal svec(F0 + sum x A)
            b_parts.append(svec(blk.constant))
            row += sd
        A = sparse.csc_matrix(
            (np.asarray(vals, dtype=float), (rows_i, cols_i)),
            shape=(row, self._n_coords),
        )
        b = np.concatenate(b_parts) if b_parts else np.zeros(0)
        return ConicData(c=self.objective_vector(), A=A, b=b, n_eq=n_eq, psd_dims=psd_dims)

    def unpack(self, x: np.ndarray) -> dict:
        return {name: var.unpack(x) for name, var in self._vars.items()}

    # -- diagnostics -----------------------------------------------------------

    def evaluate_block(self, blk: _LmiBlock, values: dict) -> np.ndarray:
        out = blk.constant.copy()
        for name, C in blk.coeffs.items():
            coords = _var_coordinates(self._vars[name], values[name])
            out += np.tensordot(coords, C, axes=(0, 0))
        return out

    def evaluate_violations(self, values: dict):
        """Min eigenvalue per LMI block and worst equality residual at `values`."""
        eigs = {}
        for blk in self._blocks:
            Bv = self.evaluate_block(blk, values)
            eigs[blk.label] = float(np.linalg.eigvalsh(0.5 * (Bv + Bv.T)).min())
        eq_res = 0.0
        for label, coeffs, rhs in self._equalities:
            total = -rhs
            for name, cv in coeffs.items():
                total += float(cv @ _var_coordinates(self._vars[name], values[name]))
            eq_res = max(eq_res, abs(total))
        return eigs, eq_res


def dump_standard_form(problem: SdpProblem, fileobj) -> None:
    """Plain-text sparse dump for cross-checking against external tools.

    One line per nonzero coefficient:

        block_id variable_id row col coefficient

    block_id is the LMI block label (equalities use their own label); row is
    the svec-row index inside the block (0 for equalities); col is the
    coordinate index inside the variable.  Constant terms use variable_id
    `_const` with col 0.
    """
    close = False
    if isinstance(fileobj, (str, bytes)) or hasattr(fileobj, "__fspath__"):
        fileobj = open(fileobj, "w")
        close = True
    try:
        for label, coeffs, rhs in problem._equalities:
            for name, cv in coeffs.items():
                for c, v in enumerate(cv):
                    if v != 0.0:
                        fileobj.write(f"{label} {name} 0 {c} {v!r}\n")
            if rhs != 0.0:
                fileobj.write(f"{label} _const 0 0 {rhs!r}\n")
        for blk in problem._blocks:
            for name, stack in blk.coeffs.items():
                for c in range(stack.shape[0]):
                    for r, v in enumerate(svec(stack[c])):
                        if v != 0.0:
                            fileobj.write(f"{blk.label} {name} {r} {c} {v!r}\n")
            for r, v in enumerate(svec(blk.constant)):
                if v != 0.0:
                    fileobj.write(f"{blk.label} _const {r} 0 {v!r}\n")
    finally:
        if close:
            fileobj.close()


# ---------------------------------------------------------------------------
# Backend contract: receive ConicData, return (status, x, objective, message).
# Status vocabulary: "optimal", "near_optimal", "infeasible", "failure".
# ---------------------------------------------------------------------------


@dataclass
class BackendResult:
    status: str
    x: np.ndarray | None
    objective: float | None
    message: str = ""
    dual: np.ndarray | None = None  # Farkas certificate candidate when infeasible


class ClarabelBackend:
    """Adapter to the Clarabel interior-point conic solver.

    Relies on the solver's built-in Ruiz equilibration for conditioning; the
    conic data is passed through unmodified so feasibility tolerances apply in
    the problem's own units.
    """

    def __init__(self, max_iter: int = 400, verbose: bool = False,
                 equilibrate: bool = True, tol: float = 1e-8):
        self.max_iter = max_iter
        self.verbose = verbose
        self.equilibrate = equilibrate
        self.tol = tol

    def solve_conic(self, data: ConicData) -> BackendResult:
        import clarabel

        cones = []
        if data.n_eq:
            cones.append(clarabel.ZeroConeT(data.n_eq))
        cones.extend(clarabel.PSDTriangleConeT(d) for d in data.psd_dims)

        settings = clarabel.DefaultSettings()
        settings.verbose = self.verbose
        settings.max_iter = self.max_iter
        settings.equilibrate_enable = self.equilibrate
        settings.tol_feas = self.tol
        settings.tol_gap_abs = self.tol
        settings.tol_gap_rel = self.tol
        P = sparse.csc_matrix((data.c.size, data.c.size))
        try:
            solver = clarabel.DefaultSolver(P, data.c, data.A, data.b, cones, settings)
            sol = solver.solve()
        except BaseException as e:  # the rust layer can raise non-Exception errors
            return BackendResult("failure", None, None, f"clarabel crashed: {e}")
        status = str(sol.status)
        x = np.asarray(sol.x, dtype=float)
        z = np.asarray(sol.z, dtype=float)
        if status == "Solved":
            return BackendResult("optimal", x, float(sol.obj_val), status)
        if status == "AlmostSolved":
            return BackendResult("near_optimal", x, float(sol.obj_val), status)
        if status in ("PrimalInfeasible", "AlmostPrimalInfeasible"):
            return BackendResult("infeasible", None, None, status, dual=z)
        if status == "DualInfeasible":
            return BackendResult("failure", None, None, f"{status} (objective unbounded below)")
        return BackendResult("failure", x if x.size else None, None, status)


def verify_infeasibility_certificate(data: ConicData, y: np.ndarray,
                                     tol: float = 1e-7) -> bool:
    """Check a Farkas certificate of primal infeasibility.

    y proves that {x : b - A x in K} is empty when A^T y = 0, <b, y> < 0 and
    y lies in the dual cone (free on equality rows, PSD on the block rows).
    All residuals are measured relative to the certificate's scale.
    """
    y = np.asarray(y, dtype=float)
    if y.size != data.b.size or not np.all(np.isfinite(y)):
        return False
    gap = float(data.b @ y)
    if gap >= 0.0:
        return False
    y = y / (-gap)  # normalize to <b, y> = -1
    scale = max(1.0, float(np.abs(y).max()))
    a_res = float(np.abs(data.A.T @ y).max(initial=0.0))
    if a_res > tol * scale * max(1.0, float(np.abs(data.A.data).max(initial=0.0))):
        return False
    row = data.n_eq
    for d in data.psd_dims:
        sd = svec_dim(d)
        blk = smat(y[row:row + sd])
        if np.linalg.eigvalsh(blk).min() < -tol * scale:
            return False
        row += sd
    return True


def solve(problem: SdpProblem, backend=None, violation_tol: float = VIOLATION_TOL) -> SdpSolution:
    """Solve an SdpProblem and independently re-verify the returned point.

    The backend's claimed status is downgraded to "numerical-failure" when any
    LMI block's minimum eigenvalue is below -violation_tol or an equality
    residual exceeds it.  Infeasibility claims are accepted only when the
    backend's Farkas certificate checks out.
    """
    if backend is None:
        backend = ClarabelBackend()
    data = problem.standard_form()
    t0 = time.perf_counter()
    res = backend.solve_conic(data)
    dt = time.perf_counter() - t0
    if res.status == "infeasible":
        if res.dual is not None and verify_infeasibility_certificate(data, res.dual):
            return SdpSolution("infeasible", {}, None, None, res.message, dt)
        return SdpSolution(
            "numerical-failure", {}, None, None, res.message, dt,
            message=f"{res.message}: infeasibility certificate failed verification",
        )
    if res.status == "failure" or res.x is None:
        return SdpSolution("numerical-failure", {}, None, None, res.message, dt,
                           message=res.message)
    values = problem.unpack(res.x)
    eigs, eq_res = problem.evaluate_violations(values)
    worst = max([eq_res] + [max(0.0, -e) for e in eigs.values()], default=0.0)
    objective = float(problem.objective_vector() @ res.x)
    if worst > violation_tol:
        return SdpSolution(
            "numerical-failure", values, objective, worst, res.message, dt,
            message=f"constraint violation {worst:.3e} exceeds {violation_tol:.1e}",
        )
    return SdpSolution("optimal", values, objective, worst, res.message, dt)
