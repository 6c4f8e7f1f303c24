"""Implicit-Euler two-point finite-volume scheme with entropy-mean mobilities.

Unknowns are stored as ``u[i, K]`` (species, cell).  For an interior edge
sigma = K|L the flux leaving K for species i is

    F_i = -tau * sum_j A_ij(u_sigma) (u_jL - u_jK) + tau * d_i u_i,sigma (phi_L - phi_K)

where u_sigma is the componentwise entropy mean.  Boundary edges carry no
flux.  The residual of one time step is

    R_iK = m(K) (u_iK - u_iK^old) / dt + sum_sigma F_i,K,sigma - m(K) f_i(u_K).
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .mesh import Mesh
from .model import EntropyComponent, Model

# |x| below this switches the logarithmic mean to its series in x = (b-a)/(a+b)
SERIES_SWITCH = 1e-3
GENERIC_RTOL = 1e-12
GENERIC_MAXITER = 100


@dataclass(frozen=True)
class State:
    values: np.ndarray  # (n_species, n_cells)
    time: float = 0.0

    @property
    def n_species(self) -> int:
        return self.values.shape[0]

    def mass(self, mesh: Mesh) -> np.ndarray:
        return self.values @ mesh.cell_measures


@dataclass(frozen=True)
class EdgeMeans:
    values: np.ndarray  # (n_species, n_interior_edges)


# -- entropy means -----------------------------------------------------------

def _log_mean(a, b):
    """Logarithmic mean and its partial derivatives, zero if a or b vanishes."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    pos = (a > 0) & (b > 0)
    A = np.where(pos, a, 1.0)
    B = np.where(pos, b, 1.0)
    M = 0.5 * (A + B)
    x = (B - A) / (A + B)
    small = np.abs(x) < SERIES_SWITCH
    y = x * x
    with np.errstate(divide="ignore", invalid="ignore"):
        # artanh loses digits as |x| -> 1; half the log ratio does not
        at = np.where(np.abs(x) < 0.5, np.arctanh(x), np.sign(x) * 0.5 * np.log(np.maximum(A, B) / np.minimum(A, B)))
        one_minus_y = 4 * A * B / (A + B) ** 2
        phi = np.where(small, 1 - y / 3 - 4 * y**2 / 45, x / at)
        dphi = np.where(small, -2 * x / 3 - 16 * x * y / 45,
                        (at - x / one_minus_y) / at**2)
    L = M * phi
    dLa = 0.5 * phi - dphi * B / (2 * M)
    dLb = 0.5 * phi + dphi * A / (2 * M)
    zero = np.zeros_like(L)
    return np.where(pos, L, zero), np.where(pos, dLa, zero), np.where(pos, dLb, zero)


def _generic_mean(a, b, comp: EntropyComponent):
    """Root of h''(t) (b - a) = h'(b) - h'(a) in [min, max], plus its derivatives."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    pos = (a > 0) & (b > 0)
    lo = np.where(pos, np.minimum(a, b), 1.0)
    hi = np.where(pos, np.maximum(a, b), 1.0)
    near = (hi - lo) <= 1e-8 * (hi + lo)
    A = np.where(pos, a, 1.0)
    B = np.where(pos, b, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.where(near, 0.0, (comp.deriv(B) - comp.deriv(A)) / (B - A))
    t = 0.5 * (lo + hi)
    active = ~near
    for _ in range(GENERIC_MAXITER):
        if not active.any():
            break
        g = comp.deriv2(t) - q
        # h'' decreasing: g > 0 means the root lies above t
        lo = np.where(active & (g > 0), t, lo)
        hi = np.where(active & (g <= 0), t, hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            tn = t - g / comp.deriv3(t)
        bad = ~np.isfinite(tn) | (tn <= lo) | (tn >= hi)
        tn = np.where(bad, 0.5 * (lo + hi), tn)
        done = np.abs(tn - t) <= GENERIC_RTOL * tn
        t = np.where(active, tn, t)
        active &= ~done
    t = np.clip(t, np.minimum(A, B), np.maximum(A, B))
    with np.errstate(divide="ignore", invalid="ignore"):
        h3 = comp.deriv3(t) * (B - A)
        da = (comp.deriv2(t) - comp.deriv2(A)) / h3
        db = (comp.deriv2(B) - comp.deriv2(t)) / h3
    da = np.where(near, 0.5, da)
    db = np.where(near, 0.5, db)
    zero = np.zeros_like(t)
    return np.where(pos, t, zero), np.where(pos, da, zero), np.where(pos, db, zero)


def entropy_mean_arrays(a, b, comp: EntropyComponent):
    """Vectorised edge mean of one species with derivatives w.r.t. a and b."""
    if comp.signed or comp.kind == "quadratic":
        m = 0.5 * (np.asarray(a, float) + np.asarray(b, float))
        half = np.full_like(m, 0.5)
        return m, half, half
    if comp.kind == "boltzmann":
        return _log_mean(a, b)
    return _generic_mean(a, b, comp)


def entropy_mean(uK: float, uL: float, component: EntropyComponent) -> float:
    """Mean u_sigma solving the discrete chain rule (zero if an argument is zero)."""
    if not component.signed and (uK < 0 or uL < 0):
        raise ValueError("entropy mean needs nonnegative arguments")
    m, _, _ = entropy_mean_arrays(np.array([uK]), np.array([uL]), component)
    return float(m[0])


def _means(model: Model, uK, uL):
    out = [entropy_mean_arrays(uK[i], uL[i], model.entropy[i]) for i in range(model.n_species)]
    m = np.stack([o[0] for o in out])
    dK = np.stack([o[1] for o in out])
    dL = np.stack([o[2] for o in out])
    return m, dK, dL


def assemble_edge_means(mesh: Mesh, model: Model, state) -> EdgeMeans:
    u = _values(state)
    c = mesh.edge_cells[: mesh.n_interior]
    m, _, _ = _means(model, u[:, c[:, 0]], u[:, c[:, 1]])
    return EdgeMeans(m)


def _values(state) -> np.ndarray:
    return state.values if isinstance(state, State) else np.asarray(state, dtype=float)


# -- quadrature ----------------------------------------------------------------

_GL_X, _GL_W = np.polynomial.legendre.leggauss(5)
# degree-2 exact rule on the reference triangle (barycentric points, weights sum to 1)
_TRI_BARY = np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]])
_TRI_W = np.full(3, 1 / 3)


def _subtriangles(s: int) -> np.ndarray:
    """Barycentric vertices (s^2, 3, 3) of the uniform s-fold subdivision."""
    tris = []
    for i in range(s):
        for j in range(s - i):
            p = lambda a, b: np.array([1 - (a + b) / s, a / s, b / s])  # noqa: E731
            tris.append([p(i, j), p(i + 1, j), p(i, j + 1)])
            if i + j < s - 1:
                tris.append([p(i + 1, j), p(i + 1, j + 1), p(i, j + 1)])
    return np.array(tris)


@lru_cache(maxsize=None)
def _triangle_rule(s: int):
    sub = _subtriangles(s)  # (S, 3 vertices, 3 bary)
    pts = np.einsum("qv,svb->sqb", _TRI_BARY, sub).reshape(-1, 3)
    w = np.tile(_TRI_W, len(sub)) / len(sub)
    return pts, w


def cell_average(mesh: Mesh, func: Callable, subdivisions: int = 4) -> np.ndarray:
    """(1/m(K)) * integral of func over each cell.

    1D: 5-point Gauss-Legendre on ``subdivisions`` pieces per cell, cells are
    split at ``func.breakpoints`` so piecewise polynomial data are integrated
    exactly.  Rectangles: composite midpoint rule.  Triangles: uniform
    subdivision with a degree-2 rule on each sub-triangle.
    """
    s = int(subdivisions)
    if mesh.dimension == 1:
        nodes = mesh.vertices[:, 0]
        a, b = nodes[:-1], nodes[1:]
        edges = np.linspace(0.0, 1.0, s + 1)
        left = a[:, None] + (b - a)[:, None] * edges[None, :-1]
        right = a[:, None] + (b - a)[:, None] * edges[None, 1:]
        out = _gauss_1d(func, left, right).sum(axis=1) / (b - a)
        bps = np.asarray(getattr(func, "breakpoints", ()), dtype=float)
        for k in np.unique(np.searchsorted(nodes, bps) - 1):
            if 0 <= k < len(a):
                cuts = np.unique(np.r_[a[k], bps[(bps > a[k]) & (bps < b[k])], b[k]])
                pieces = np.concatenate([np.linspace(lo, hi, s + 1) for lo, hi in zip(cuts[:-1], cuts[1:])])
                pieces = np.unique(pieces)
                out[k] = _gauss_1d(func, pieces[None, :-1], pieces[None, 1:]).sum() / (b[k] - a[k])
        return out
    if mesh.kind == "rectangle":
        V = mesh.vertices[mesh.cell_vertices]
        lo, hi = V[:, 0], V[:, 2]
        t = (np.arange(s) + 0.5) / s
        tx, ty = np.meshgrid(t, t, indexing="xy")
        pts = lo[:, None, :] + (hi - lo)[:, None, :] * np.column_stack([tx.ravel(), ty.ravel()])[None]
        vals = np.asarray(func(pts.reshape(-1, 2)), dtype=float).reshape(len(lo), -1)
        return vals.mean(axis=1)
    bary, w = _triangle_rule(s)
    V = mesh.vertices[mesh.cell_vertices]  # (N, 3, 2)
    pts = np.einsum("qb,nbd->nqd", bary, V)
    vals = np.asarray(func(pts.reshape(-1, 2)), dtype=float).reshape(len(V), -1)
    return vals @ w


def _gauss_1d(func, left, right):
    half = 0.5 * (right - left)
    mid = 0.5 * (right + left)
    x = mid[..., None] + half[..., None] * _GL_X
    vals = np.asarray(func(x.reshape(-1, 1)), dtype=float).reshape(x.shape)
    return (vals * _GL_W).sum(axis=-1) * half


def project_initial(mesh: Mesh, u0: Sequence[Callable], signed=None, subdivisions: int = 4) -> State:
    """Cell averages of the initial densities; raises on a negative average."""
    vals = np.stack([cell_average(mesh, f, subdivisions) for f in u0])
    signed = np.zeros(len(u0), bool) if signed is None else np.asarray(signed, bool)
    bad = (vals < 0) & ~signed[:, None]
    if bad.any():
        i, k = np.argwhere(bad)[0]
        raise ValueError(f"negative initial average {vals[i, k]:.3e} for species {i} in cell {k}")
    return State(vals, 0.0)


@lru_cache(maxsize=32)
def _cell_potential(mesh: Mesh, drift) -> np.ndarray:
    return cell_average(mesh, drift.potential)


def cell_potential(mesh: Mesh, model: Model) -> np.ndarray | None:
    if model.drift is None:
        return None
    return _cell_potential(mesh, model.drift)


# -- assembly ------------------------------------------------------------------

@dataclass
class Assembly:
    residual: np.ndarray  # (n, N)
    diag: np.ndarray | None = None  # (N, n, n)
    off_KL: np.ndarray | None = None  # (E, n, n) row block K, column block L
    off_LK: np.ndarray | None = None  # (E, n, n) row block L, column block K


def assemble(mesh: Mesh, model: Model, u, u_old, dt: float, jacobian: bool = False) -> Assembly:
    """Residual of one implicit Euler step, optionally with its block Jacobian."""
    u = np.asarray(u, dtype=float)
    n = model.n_species
    E = mesh.n_interior
    c = mesh.edge_cells[:E]
    K, L = c[:, 0], c[:, 1]
    tau = mesh.transmissibilities[:E]
    uK, uL = u[:, K], u[:, L]
    du = uL - uK
    m, mK, mL = _means(model, uK, uL)
    A = model.diffusion(m)  # (n, n, E)
    F = -tau * np.einsum("ijE,jE->iE", A, du)
    phi = cell_potential(mesh, model)
    if phi is not None:
        dphi = phi[L] - phi[K]
        dcoef = model.drift.coefficients[:, None]
        F += tau * dcoef * m * dphi
    vol = mesh.cell_measures
    _, _, D = mesh.incidence
    R = vol * (u - np.asarray(u_old, dtype=float)) / dt - vol * model.source(u) + (D @ F.T).T
    if not jacobian:
        return Assembly(R)

    G = np.einsum("iljE,lE->ijE", model.diffusion_jac(m), du)
    dFdK = tau * (A - G * mK[None, :, :])
    dFdL = tau * (-A - G * mL[None, :, :])
    if phi is not None:
        idx = np.arange(n)
        dFdK[idx, idx] += tau * dcoef * dphi * mK
        dFdL[idx, idx] += tau * dcoef * dphi * mL
    dFdK = dFdK.transpose(2, 0, 1)
    dFdL = dFdL.transpose(2, 0, 1)
    SK, SL, _ = mesh.incidence
    diag = (vol / dt)[:, None, None] * np.eye(n) - vol[:, None, None] * model.source_jac(u).transpose(2, 0, 1)
    diag += (SK @ dFdK.reshape(E, -1) - SL @ dFdL.reshape(E, -1)).reshape(-1, n, n)
    return Assembly(R, diag, dFdL, -dFdK)


def residual(mesh: Mesh, model: Model, state_new, state_old, dt: float) -> np.ndarray:
    """R_iK of the scheme; a root is a finite-volume solution at the new time level."""
    return assemble(mesh, model, _values(state_new), _values(state_old), dt).residual


def _edge_flux(mesh, model, state, means, edge, species, with_drift):
    if mesh.edge_cells[edge, 1] < 0:
        return 0.0
    if edge >= mesh.n_interior:
        raise IndexError(edge)
    u = _values(state)
    k, l = mesh.edge_cells[edge]
    tau = mesh.transmissibilities[edge]
    m = means.values[:, edge] if means is not None else _means(model, u[:, [k]], u[:, [l]])[0][:, 0]
    A = model.diffusion(m[:, None])[:, :, 0]
    F = -tau * A[species] @ (u[:, l] - u[:, k])
    if with_drift:
        if model.drift is None:
            raise ValueError("model has no drift")
        phi = cell_potential(mesh, model)
        F += tau * model.drift.coefficients[species] * m[species] * (phi[l] - phi[k])
    return float(F)


def flux(mesh: Mesh, model: Model, state, means: EdgeMeans | None, edge: int, species: int) -> float:
    """Diffusive flux of ``species`` leaving edge_cells[edge, 0]; 0 on boundary edges."""
    return _edge_flux(mesh, model, state, means, edge, species, with_drift=False)


def drift_flux(mesh: Mesh, model: Model, state, means: EdgeMeans | None, edge: int, species: int) -> float:
    """Diffusive plus potential-driven flux; tau multiplies both parts."""
    return _edge_flux(mesh, model, state, means, edge, species, with_drift=True)
