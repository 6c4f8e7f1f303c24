"""Newton iteration and time stepping for the implicit finite-volume scheme.

Unknowns are flattened cell by cell, index ``K * n + i`` for species i in
cell K, so a 1D chain of cells yields a banded Jacobian with bandwidth
2n - 1 on each side.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Callable, Iterable, Optional

import numpy as np
from scipy import sparse
from scipy.linalg import LinAlgError, solve_banded
from scipy.sparse.linalg import splu

from .analysis import discrete_entropy, entropy_dissipation
from .mesh import Mesh
from .model import Model
from .scheme import Assembly, State, assemble, cell_potential


class SolverError(RuntimeError):
    pass


class NewtonFailure(SolverError):
    def __init__(self, reason: str, iterations: int, residual_norm: float):
        super().__init__(f"Newton failed after {iterations} iterations ({reason}, |R| = {residual_norm:.3e})")
        self.reason = reason
        self.iterations = iterations
        self.residual_norm = residual_norm


class TimeStepUnderflow(SolverError):
    def __init__(self, time: float, dt: float, last: Optional[NewtonFailure] = None):
        super().__init__(f"time step {dt:.3e} fell below dt_min at t = {time:.6e}"
                         + (f"; last failure: {last}" if last else ""))
        self.time = time
        self.dt = dt
        self.last = last


class EntropyInequalityWarning(UserWarning):
    pass


@dataclass
class SolverConfig:
    newton_tol: float = 1e-10
    newton_max_iter: int = 50
    dt_init: float = 1e-5
    dt_min: float = 1e-8
    dt_max: float = 1e-2
    variable_mode: str = "natural"  # or "entropy"
    jacobian_mode: str = "analytic"  # or "finite_difference"
    fd_epsilon: float = 1e-6
    adaptive: bool = True
    monitor_entropy: bool = True
    max_halvings: int = 30  # backtracking steps in the Newton line search

    def __post_init__(self):
        if not self.newton_tol > 0:
            raise ValueError("newton_tol must be positive")
        if self.newton_max_iter < 1:
            raise ValueError("newton_max_iter must be at least 1")
        if self.adaptive and not (0 < self.dt_min <= self.dt_init <= self.dt_max):
            raise ValueError("need 0 < dt_min <= dt_init <= dt_max")
        if not self.dt_init > 0:
            raise ValueError("dt_init must be positive")
        if self.variable_mode not in ("natural", "entropy"):
            raise ValueError(f"unknown variable_mode {self.variable_mode!r}")
        if self.jacobian_mode not in ("analytic", "finite_difference"):
            raise ValueError(f"unknown jacobian_mode {self.jacobian_mode!r}")
        if not self.fd_epsilon > 0:
            raise ValueError("fd_epsilon must be positive")

    @classmethod
    def for_dimension(cls, dimension: int, **kw) -> "SolverConfig":
        """Newton precision 1e-10 in 1D and 1e-8 in 2D unless overridden."""
        kw.setdefault("newton_tol", 1e-10 if dimension == 1 else 1e-8)
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepReport:
    step: int
    time: float
    accepted_dt: float
    newton_iters: int
    halvings: int
    residual_norm: float
    mass_per_species: np.ndarray
    entropy_value: float
    entropy_dissipation: float
    inequality_excess: float = float("nan")  # lhs - rhs of the entropy inequality
    inequality_checked: bool = False

    def row(self) -> list:
        return ([self.step, self.time, self.accepted_dt, self.newton_iters, self.halvings,
                 self.residual_norm] + list(self.mass_per_species)
                + [self.entropy_value, self.entropy_dissipation, self.inequality_excess])

    @staticmethod
    def header(n_species: int) -> list:
        return (["step", "time", "dt", "newton_iters", "halvings", "residual"]
                + [f"mass_{i + 1}" for i in range(n_species)]
                + ["entropy", "dissipation", "inequality_excess"])


# -- Jacobian ------------------------------------------------------------------

@lru_cache(maxsize=16)
def _block_pattern(mesh: Mesh, n: int):
    """Row and column indices of the diagonal, K-L and L-K blocks, in that order."""
    E = mesh.n_interior
    K = mesh.edge_cells[:E, 0]
    L = mesh.edge_cells[:E, 1]
    cells = np.arange(mesh.n_cells)
    ii = np.arange(n)[None, :, None]
    jj = np.arange(n)[None, None, :]
    shape_d = (mesh.n_cells, n, n)
    shape_o = (E, n, n)
    rows = np.concatenate([
        np.broadcast_to(cells[:, None, None] * n + ii, shape_d).ravel(),
        np.broadcast_to(K[:, None, None] * n + ii, shape_o).ravel(),
        np.broadcast_to(L[:, None, None] * n + ii, shape_o).ravel(),
    ])
    cols = np.concatenate([
        np.broadcast_to(cells[:, None, None] * n + jj, shape_d).ravel(),
        np.broadcast_to(L[:, None, None] * n + jj, shape_o).ravel(),
        np.broadcast_to(K[:, None, None] * n + jj, shape_o).ravel(),
    ])
    rows.flags.writeable = False
    cols.flags.writeable = False
    return rows, cols


@lru_cache(maxsize=16)
def _band_index(mesh: Mesh, n: int) -> np.ndarray:
    """Flat positions of the block entries in LAPACK band storage."""
    rows, cols = _block_pattern(mesh, n)
    bw = 2 * n - 1
    return (bw + rows - cols) * (n * mesh.n_cells) + cols


def _block_coo(mesh: Mesh, n: int, asm: Assembly):
    """Row, column and value arrays of the block Jacobian (no duplicates)."""
    rows, cols = _block_pattern(mesh, n)
    vals = np.concatenate([asm.diag.ravel(), asm.off_KL.ravel(), asm.off_LK.ravel()])
    return rows, cols, vals


def _flat(u: np.ndarray) -> np.ndarray:
    return u.T.ravel()


def _unflat(x: np.ndarray, n: int) -> np.ndarray:
    return x.reshape(-1, n).T


def _fd_jacobian(mesh, model, u, u_old, dt, eps):
    n, N = u.shape
    x = _flat(u)
    cols = []
    for k in range(n * N):
        h = eps * max(1.0, abs(x[k]))
        xp = x.copy()
        xm = x.copy()
        xp[k] += h
        xm[k] -= h
        rp = assemble(mesh, model, _unflat(xp, n), u_old, dt).residual
        rm = assemble(mesh, model, _unflat(xm, n), u_old, dt).residual
        cols.append(_flat(rp - rm) / (2 * h))
    return sparse.csr_matrix(np.column_stack(cols))


def jacobian(mesh: Mesh, model: Model, state, state_old, dt: float, mode: str = "analytic",
             fd_epsilon: float = 1e-6) -> sparse.csr_matrix:
    """d residual / d u_new as a sparse (n N) x (n N) matrix in cell-major ordering."""
    u = state.values if isinstance(state, State) else np.asarray(state, dtype=float)
    u_old = state_old.values if isinstance(state_old, State) else np.asarray(state_old, dtype=float)
    if mode == "finite_difference":
        return _fd_jacobian(mesh, model, u, u_old, dt, fd_epsilon)
    if mode != "analytic":
        raise ValueError(f"unknown jacobian mode {mode!r}")
    asm = assemble(mesh, model, u, u_old, dt, jacobian=True)
    r, c, v = _block_coo(mesh, model.n_species, asm)
    size = u.size
    return sparse.csr_matrix((v, (r, c)), shape=(size, size))


def _linear_solve(mesh: Mesh, n: int, asm: Assembly, col_scale=None) -> np.ndarray:
    """Newton direction -J^{-1} R; raises LinAlgError on a singular system."""
    r, c, v = _block_coo(mesh, n, asm)
    if col_scale is not None:
        v = v * col_scale[c]
    b = -_flat(asm.residual)
    size = b.size
    if mesh.is_chain:
        bw = 2 * n - 1
        ab = np.zeros((2 * bw + 1) * size)
        ab[_band_index(mesh, n)] = v
        ab = ab.reshape(2 * bw + 1, size)
        x = solve_banded((bw, bw), ab, b, check_finite=False)
    else:
        A = sparse.csc_matrix((v, (r, c)), shape=(size, size))
        try:
            x = splu(A).solve(b)
        except RuntimeError as exc:
            raise LinAlgError(str(exc)) from exc
    if not np.all(np.isfinite(x)):
        raise LinAlgError("non-finite Newton direction")
    return _unflat(x, n)


# -- Newton ---------------------------------------------------------------------

ENTROPY_FLOOR = 1e-300
ENTROPY_STEP_CAP = 30.0  # largest |dw_i| / weight_i per iteration in entropy mode


def _residual_norm(R, weight) -> float:
    """Sup-norm of dt / m(K) * R, the residual measured in density units."""
    v = float(np.max(np.abs(R * weight))) if R.size else 0.0
    return v if np.isfinite(v) else math.inf


def newton_solve(mesh: Mesh, model: Model, state_old: State, dt: float,
                 config: SolverConfig, guess: Optional[np.ndarray] = None):
    """One implicit Euler step; returns (State, iterations, residual norm).

    Raises NewtonFailure when the sup-norm of dt / m(K) times the residual
    (the scheme written per unit density) does not drop below ``config.newton_tol`` within ``config.newton_max_iter`` iterations.
    """
    u_old = state_old.values
    n = model.n_species
    signed = model.signed
    u = np.array(u_old if guess is None else guess, dtype=float)
    entropy_mode = config.variable_mode == "entropy"
    if entropy_mode:
        u = np.where(signed[:, None], u, np.maximum(u, ENTROPY_FLOOR))
        w = np.stack([model.entropy[i].deriv(u[i]) for i in range(n)])
        u = np.stack([model.entropy[i].deriv_inverse(w[i]) for i in range(n)])
    with_jac = config.jacobian_mode == "analytic"
    weight = dt / mesh.cell_measures
    asm = assemble(mesh, model, u, u_old, dt, jacobian=with_jac)
    res = _residual_norm(asm.residual, weight)
    it = 0
    while res > config.newton_tol:
        if it >= config.newton_max_iter:
            raise NewtonFailure("iteration limit", it, res)
        if not math.isfinite(res):
            raise NewtonFailure("non-finite residual", it, res)
        if not with_jac:
            asm = _fd_assembly(mesh, model, u, u_old, dt, config.fd_epsilon, asm)
        scale = None
        if entropy_mode:
            scale = _flat(np.stack([1.0 / model.entropy[i].deriv2(u[i]) for i in range(n)]))
        try:
            delta = _linear_solve(mesh, n, asm, scale)
        except (LinAlgError, ValueError) as exc:
            raise NewtonFailure(f"singular Jacobian: {exc}", it, res) from None
        it += 1
        if entropy_mode:
            weights = np.array([model.entropy[i].weight for i in range(n)])
            big = np.max(np.abs(delta) / weights[:, None], where=~signed[:, None], initial=0.0)
            if big > ENTROPY_STEP_CAP:
                delta = delta * (ENTROPY_STEP_CAP / big)
            # backtrack until the scaled residual decreases
            alpha = 1.0
            for _ in range(config.max_halvings):
                w_try = w + alpha * delta
                u_try = np.stack([model.entropy[i].deriv_inverse(w_try[i]) for i in range(n)])
                asm_try = assemble(mesh, model, u_try, u_old, dt, jacobian=with_jac)
                res_try = _residual_norm(asm_try.residual, weight)
                if res_try < (1.0 - 1e-4 * alpha) * res:
                    break
                alpha *= 0.5
            else:
                raise NewtonFailure("entropy-variable line search exhausted", it, res)
            w, u, asm, res = w_try, u_try, asm_try, res_try
            continue
        # projected step onto u >= 0, backtracked on the scaled residual;
        # plain positivity halving stalls when a cell is driven towards zero.
        # Near a zero density the residual is not Lipschitz (the mean behaves
        # like y / log(y / eps)), so if no damped step decreases it the full
        # projected step is taken and the iteration cap decides.
        alpha = 1.0
        for _ in range(config.max_halvings):
            cand = u + alpha * delta
            cand[~signed] = np.maximum(cand[~signed], 0.0)
            asm_try = assemble(mesh, model, cand, u_old, dt, jacobian=with_jac)
            res_try = _residual_norm(asm_try.residual, weight)
            if res_try < (1.0 - 1e-4 * alpha) * res:
                break
            alpha *= 0.5
        else:
            cand = u + delta
            cand[~signed] = np.maximum(cand[~signed], 0.0)
            asm_try = assemble(mesh, model, cand, u_old, dt, jacobian=with_jac)
            res_try = _residual_norm(asm_try.residual, weight)
        u, asm, res = cand, asm_try, res_try
    return State(u, state_old.time + dt), it, res


def _fd_assembly(mesh, model, u, u_old, dt, eps, asm):
    """Block Jacobian recovered from the dense finite-difference matrix."""
    J = _fd_jacobian(mesh, model, u, u_old, dt, eps).toarray()
    n = model.n_species
    N = mesh.n_cells
    E = mesh.n_interior
    K = mesh.edge_cells[:E, 0]
    L = mesh.edge_cells[:E, 1]
    blocks = J.reshape(N, n, N, n)
    diag = blocks[np.arange(N), :, np.arange(N), :]
    off_KL = blocks[K, :, L, :]
    off_LK = blocks[L, :, K, :]
    return Assembly(asm.residual, diag, off_KL, off_LK)


# -- time stepping ----------------------------------------------------------------

def _inequality(mesh, model, H_prev, H_new, diss, dt):
    """lhs - rhs of the discrete entropy inequality, or None when not applicable."""
    if not model.entropic or np.isnan(model.C_f):
        return None
    if model.C_f > 0 and dt * model.C_f >= 1.0:
        return None
    lhs = (1.0 - model.C_f * dt) * H_new + diss
    rhs = H_prev + model.C_f * dt * mesh.domain_measure
    if model.drift is not None:
        # half the dissipation absorbs the potential-driven flux
        phi = cell_potential(mesh, model)
        E = mesh.n_interior
        c = mesh.edge_cells[:E]
        grad = float(np.sum(mesh.transmissibilities[:E] * (phi[c[:, 1]] - phi[c[:, 0]]) ** 2))
        lhs = (1.0 - model.C_f * dt) * H_new + 0.5 * diss
        rhs += dt / (2.0 * model.c_A) * float(np.sum(model.drift.coefficients**2)) * grad
    return lhs - rhs


def _take_step(mesh, model, state, dt, config, step_no, halvings, H_prev):
    new, iters, res = newton_solve(mesh, model, state, dt, config)
    H = discrete_entropy(mesh, model, new) if config.monitor_entropy else float("nan")
    diss = (entropy_dissipation(mesh, state, new, dt, model.c_A)
            if config.monitor_entropy else float("nan"))
    report = StepReport(
        step=step_no, time=new.time, accepted_dt=dt, newton_iters=iters, halvings=halvings,
        residual_norm=res, mass_per_species=new.mass(mesh), entropy_value=H,
        entropy_dissipation=diss,
    )
    if config.monitor_entropy:
        excess = _inequality(mesh, model, H_prev, H, diss, dt)
        if excess is not None:
            report.inequality_checked = True
            report.inequality_excess = float(excess)
            if excess > 1e-8 * (1.0 + abs(H)):
                warnings.warn(
                    f"entropy inequality violated at step {step_no}, t = {new.time:.6e}, "
                    f"dt = {dt:.3e}: H_prev = {H_prev:.12e}, H = {H:.12e}, "
                    f"dissipation = {diss:.6e}, excess = {excess:.3e}",
                    EntropyInequalityWarning, stacklevel=3)
    return new, report


def advance(mesh: Mesh, model: Model, state: State, t_end: float, config: SolverConfig,
            callbacks: Iterable[Callable] = (), stop_times: Iterable[float] = ()):
    """Integrate from ``state.time`` to ``t_end``; returns (final State, reports).

    Adaptive mode halves dt on Newton failure, doubles it after each accepted
    step, keeps dt in [dt_min, dt_max] and clips steps to land on ``t_end``
    and on every entry of ``stop_times``.  Fixed mode uses N = ceil(T / dt_init)
    equal steps of size T / N.  Each callback is called as cb(state, report).
    """
    if not t_end > state.time:
        raise ValueError("t_end must exceed the initial time")
    callbacks = list(callbacks)
    reports = []
    H_prev = discrete_entropy(mesh, model, state) if config.monitor_entropy else float("nan")
    if model.C_f > 0 and config.dt_init * model.C_f >= 1.0:
        warnings.warn(f"dt_init = {config.dt_init:.3e} is not below 1/C_f = {1 / model.C_f:.3e}; "
                      "the entropy inequality is not monitored for such steps",
                      EntropyInequalityWarning, stacklevel=2)
    if not config.adaptive:
        t0 = state.time
        N = max(1, math.ceil((t_end - t0) / config.dt_init - 1e-9))
        dt = (t_end - t0) / N
        for k in range(1, N + 1):
            new, rep = _take_step(mesh, model, state, dt, config, k, 0, H_prev)
            new = State(new.values, t_end if k == N else t0 + k * dt)
            rep.time = new.time
            state, H_prev = new, rep.entropy_value
            reports.append(rep)
            for cb in callbacks:
                cb(state, rep)
        return state, reports

    stops = sorted(t for t in stop_times if state.time < t < t_end) + [t_end]
    dt = min(config.dt_init, config.dt_max)
    step_no = 0
    t_eps = 1e-12 * max(1.0, abs(t_end))
    while state.time < t_end - t_eps:
        target = next(s for s in stops if s > state.time + t_eps)
        halvings = 0
        last = None
        while True:
            h = min(dt, target - state.time)
            try:
                new, rep = _take_step(mesh, model, state, h, config, step_no + 1, halvings, H_prev)
                break
            except NewtonFailure as exc:
                last = exc
                dt = 0.5 * h
                halvings += 1
                if dt < config.dt_min:
                    raise TimeStepUnderflow(state.time, dt, last) from None
        if target - new.time <= t_eps:
            new = State(new.values, target)
            rep.time = target
        step_no += 1
        state, H_prev = new, rep.entropy_value
        reports.append(rep)
        for cb in callbacks:
            cb(state, rep)
        if h >= dt:
            dt = min(2.0 * dt, config.dt_max)
    return state, reports
