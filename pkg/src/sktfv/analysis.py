"""Discrete norms, entropy monitors, convergence tables, decay fits and the
linear-stability predicate for two-species SKT equilibria."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .mesh import Mesh, build_interval_mesh
from .model import Model, SKTCoefficients


# -- norms ---------------------------------------------------------------------

@dataclass(frozen=True)
class NormKind:
    kind: str  # "Lq", "W1q_seminorm" or "W1q_norm"
    q: float = 2.0

    def __post_init__(self):
        if self.kind not in ("Lq", "W1q_seminorm", "W1q_norm"):
            raise ValueError(f"unknown norm kind {self.kind!r}")
        if not self.q >= 1:
            raise ValueError("q must be at least 1")

    @classmethod
    def Lq(cls, q=2.0):
        return cls("Lq", q)

    @classmethod
    def W1q_seminorm(cls, q=2.0):
        return cls("W1q_seminorm", q)

    @classmethod
    def W1q_norm(cls, q=2.0):
        return cls("W1q_norm", q)


def _values(state) -> np.ndarray:
    return state.values if hasattr(state, "values") else np.asarray(state, dtype=float)


def edge_differences(mesh: Mesh, v) -> np.ndarray:
    """D_sigma v = v_L - v_K on interior edges (trailing axis = cells)."""
    v = np.asarray(v, dtype=float)
    c = mesh.edge_cells[: mesh.n_interior]
    return v[..., c[:, 1]] - v[..., c[:, 0]]


def discrete_norm(mesh: Mesh, v, kind: NormKind) -> float:
    v = np.asarray(v, dtype=float)
    if v.shape != (mesh.n_cells,):
        raise ValueError("field must hold one value per cell")
    q = kind.q
    l = float(np.sum(mesh.cell_measures * np.abs(v) ** q))
    if kind.kind == "Lq":
        return l ** (1 / q)
    E = mesh.n_interior
    d = mesh.edge_distances[:E]
    s = float(np.sum(mesh.edge_measures[:E] * d * np.abs(edge_differences(mesh, v) / d) ** q))
    if kind.kind == "W1q_seminorm":
        return s ** (1 / q)
    return (s + l) ** (1 / q)


# -- entropies -----------------------------------------------------------------

def discrete_entropy(mesh: Mesh, model: Model, state) -> float:
    """H[u] = sum_K m(K) sum_i h_i(u_iK)."""
    u = _values(state)
    return float(model.entropy_density(u) @ mesh.cell_measures)


def relative_entropy(mesh: Mesh, model: Model, state, ubar) -> float:
    """Weighted relative Boltzmann entropy against a positive constant state.

    Evaluated as sum pi_i ubar_i m(K) g(u / ubar) with g(r) = r log r - r + 1
    written through log1p near r = 1, which keeps full relative accuracy there.
    """
    u = _values(state)
    ubar = np.asarray(ubar, dtype=float)
    if np.any(ubar <= 0):
        raise ValueError("ubar must be positive")
    r = u / ubar[:, None]
    d = r - 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        near = r * np.log1p(d) - d
        far = r * np.log(r) - r + 1.0
        g = np.where(r <= 0, 1.0, np.where(np.abs(d) < 0.5, near, far))
    return float(np.sum(model.pi[:, None] * ubar[:, None] * g * mesh.cell_measures))


def dissipation_sum(mesh: Mesh, state) -> float:
    """sum_i sum_sigma tau_sigma (D_sigma u_i)^2."""
    u = _values(state)
    D = edge_differences(mesh, u)
    return float(np.sum(mesh.transmissibilities[: mesh.n_interior] * D**2))


def entropy_dissipation(mesh: Mesh, state_prev, state_next, dt: float, c_A: float) -> float:
    """c_A dt sum_i sum_sigma tau_sigma (D_sigma u_i)^2 at the new time level."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    return c_A * dt * dissipation_sum(mesh, state_next)


def approximate_gradient(mesh: Mesh, v) -> np.ndarray:
    """Piecewise constant gradient on the dual cells, one vector per edge.

    On the diamond of sigma = K|L the value is m(sigma) / m(T) (v_L - v_K) nu;
    since m(T) = m(sigma) d_sigma / 2 its normal component is twice the
    difference quotient.  Boundary dual cells carry zero.
    """
    if mesh.dimension != 2:
        raise ValueError("the dual-cell gradient is defined on 2D meshes only")
    v = np.asarray(v, dtype=float)
    E = mesh.n_interior
    out = np.zeros((mesh.n_edges, 2))
    coef = mesh.edge_measures[:E] / mesh.dual_measures[:E]
    out[:E] = (coef * edge_differences(mesh, v))[:, None] * mesh.edge_normals[:E]
    return out


def normal_difference_quotient(mesh: Mesh, v) -> np.ndarray:
    """(v_L - v_K) / d_sigma on interior edges; equals grad v . nu for affine v."""
    return edge_differences(mesh, v) / mesh.edge_distances[: mesh.n_interior]


# -- linear stability of the constant equilibrium ----------------------------------

ROOT_FORMS = ("printed", "sign_corrected", "trace_leading", "turing")


@dataclass
class StabilityReport:
    Dstar: np.ndarray
    Jstar: np.ndarray
    trace_D: float
    det_D: float
    trace_J: float
    det_J: float
    k_minus: Optional[float]
    k_plus: Optional[float]
    quadratic: tuple  # (c2, c1, c0) of c2 k^2 + c1 k + c0
    root_form: str
    matched_modes: list
    conditions: dict
    unstable: bool
    coexistence: bool

    def to_dict(self) -> dict:
        return {
            "Dstar": self.Dstar.tolist(), "Jstar": self.Jstar.tolist(),
            "trace_D": self.trace_D, "det_D": self.det_D,
            "trace_J": self.trace_J, "det_J": self.det_J,
            "k_minus": self.k_minus, "k_plus": self.k_plus,
            "quadratic": list(self.quadratic), "root_form": self.root_form,
            "matched_modes": [list(p) for p in self.matched_modes],
            "conditions": self.conditions, "unstable": self.unstable,
            "coexistence": self.coexistence,
        }


def neumann_eigenvalues(Lx: float, Ly: float, mode_cap: int) -> list:
    """[(p1, p2, mu)] with mu = (p1 pi / Lx)^2 + (p2 pi / Ly)^2, (0, 0) excluded."""
    out = []
    for p1 in range(mode_cap + 1):
        for p2 in range(mode_cap + 1):
            if p1 or p2:
                out.append((p1, p2, (p1 * math.pi / Lx) ** 2 + (p2 * math.pi / Ly) ** 2))
    return out


def _quadratic(D, J, form):
    dD = float(np.linalg.det(D))
    dJ = float(np.linalg.det(J))
    if form == "printed":
        return dD, dJ + dD, dJ
    if form == "sign_corrected":
        return dD, -(dJ + dD), dJ
    if form == "trace_leading":
        tD = float(np.trace(D))
        return tD, -(dJ + tD), dJ
    if form == "turing":
        mid = D[0, 0] * J[1, 1] + D[1, 1] * J[0, 0] - D[0, 1] * J[1, 0] - D[1, 0] * J[0, 1]
        return dD, -float(mid), dJ
    raise ValueError(f"root_form must be one of {ROOT_FORMS}")


def _roots(c2, c1, c0):
    disc = c1 * c1 - 4 * c2 * c0
    if disc < 0:
        return None, None
    s = math.sqrt(disc)
    # stable evaluation: one root from the larger-magnitude expression, the other from c0/(c2 r)
    q = -0.5 * (c1 + math.copysign(s, c1)) if c1 != 0 else 0.5 * s
    r1 = q / c2
    r2 = c0 / q if q != 0 else -r1
    return min(r1, r2), max(r1, r2)


def stability_predicate(coeffs: SKTCoefficients, ustar, domain=((0.0, 1.0), (0.0, 1.0)),
                        mode_cap: int = 20, root_form: str = "printed") -> StabilityReport:
    """Cross-diffusion instability test of a coexistence equilibrium.

    Conditions: (i) trace D* > 0, (ii) det D* > 0, (iii) det D* + det J* > 0,
    (iv) some Neumann eigenvalue mu > 0 lies in [k_-, k_+] with k_- > 0.
    ``root_form`` selects the quadratic for k_+-: ``"printed"`` uses
    det D k^2 + (det J + det D) k + det J, ``"sign_corrected"`` flips the middle
    sign (it factors as (k - 1)(det D k - det J), so k_- = 1 always),
    ``"trace_leading"`` is the sign-corrected form with trace D leading, and
    ``"turing"`` uses the dispersion relation det(D mu - J) = 0 with the
    mixed middle coefficient.
    """
    if coeffs.n != 2:
        raise ValueError("the stability predicate is defined for two species")
    u = np.asarray(ustar, dtype=float)
    a0, a, b0, b = coeffs.a0, coeffs.a, coeffs.b0, coeffs.b
    f = u * (b0 - b @ u)
    if np.max(np.abs(f)) > 1e-10:
        raise ValueError(f"ustar is not an equilibrium of the sources (|f| = {np.max(np.abs(f)):.3e})")
    D = np.array([
        [a0[0] + 2 * a[0, 0] * u[0] + a[0, 1] * u[1], a[0, 1] * u[0]],
        [a[1, 0] * u[1], a0[1] + a[1, 0] * u[0] + 2 * a[1, 1] * u[1]],
    ])
    J = -b * u[:, None] + np.diag(b0 - b @ u)
    c2, c1, c0 = _quadratic(D, J, root_form)
    if c2 == 0:
        raise ValueError("det(D*) = 0, the quadratic degenerates")
    k_minus, k_plus = _roots(c2, c1, c0)
    (x0, x1), (y0, y1) = domain
    modes = []
    if k_minus is not None and k_minus > 0:
        modes = [(p1, p2) for p1, p2, mu in neumann_eigenvalues(x1 - x0, y1 - y0, mode_cap)
                 if k_minus <= mu <= k_plus]
    trD, dD = float(np.trace(D)), float(np.linalg.det(D))
    trJ, dJ = float(np.trace(J)), float(np.linalg.det(J))
    cond = {
        "trace_D_positive": trD > 0,
        "det_D_positive": dD > 0,
        "det_sum_positive": dD + dJ > 0,
        "mode_in_band": bool(modes),
    }
    coexist = bool(b0[0] / b[0, 0] < b0[1] / b[1, 0] and b0[1] / b[1, 1] < b0[0] / b[0, 1])
    return StabilityReport(D, J, trD, dD, trJ, dJ, k_minus, k_plus, (c2, c1, c0), root_form,
                           modes, cond, all(cond.values()), coexist)


# -- convergence in space ----------------------------------------------------------

@dataclass
class ConvergenceTable:
    cells: list
    errors: np.ndarray  # (rows, n_species)
    orders: np.ndarray  # (rows, n_species), nan in the first row
    reference_cells: int
    dt: float
    t_end: float
    steps: int

    def rows(self) -> list:
        return [[c] + [x for i in range(self.errors.shape[1]) for x in (self.errors[r, i], self.orders[r, i])]
                for r, c in enumerate(self.cells)]

    def write_csv(self, path) -> None:
        n = self.errors.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["cells"] + [f"{k}_u{i + 1}" for i in range(n) for k in ("error", "order")])
            for row in self.rows():
                w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])


def average_onto(fine_edges, fine_values, coarse_edges) -> np.ndarray:
    """Cell averages of a piecewise constant 1D field on a coarser partition.

    Nested partitions reduce to block means; otherwise overlap lengths weight
    the fine values.
    """
    fe = np.asarray(fine_edges, dtype=float)
    ce = np.asarray(coarse_edges, dtype=float)
    v = np.asarray(fine_values, dtype=float)
    nf, nc = len(fe) - 1, len(ce) - 1
    if nf % nc == 0 and np.allclose(fe[:: nf // nc], ce, rtol=0, atol=1e-12 * (ce[-1] - ce[0])):
        r = nf // nc
        w = np.diff(fe).reshape(nc, r)
        return (v.reshape(v.shape[:-1] + (nc, r)) * w).sum(-1) / w.sum(-1)
    # overlap weights via the cumulative integral
    cum = np.concatenate([np.zeros(v.shape[:-1] + (1,)), np.cumsum(v * np.diff(fe), axis=-1)], axis=-1)
    F = np.stack([np.interp(ce, fe, c) for c in cum.reshape(-1, nf + 1)]).reshape(v.shape[:-1] + (nc + 1,))
    return np.diff(F, axis=-1) / np.diff(ce)


def convergence_harness(model: Model, domain, cell_counts: Sequence[int], dt_ref: float,
                        t_end: float, initial: Sequence[Callable], reference_cells: int = 5120,
                        config=None, progress: Optional[Callable] = None) -> ConvergenceTable:
    """Spatial convergence table against a fine-mesh reference with a common fixed dt.

    Every run, the reference included, uses the same N = ceil(t_end / dt_ref)
    steps of size t_end / N.  Errors are discrete L^2 norms on each coarse mesh
    of the difference with the cell-averaged reference; the order between rows
    is log(e_c / e_f) / log(n_f / n_c).
    """
    from .scheme import project_initial
    from .solver import SolverConfig, advance

    counts = [int(c) for c in cell_counts]
    if any(b <= a for a, b in zip(counts, counts[1:])):
        raise ValueError("cell counts must increase")
    if reference_cells <= counts[-1]:
        raise ValueError("reference resolution must be finer than every entry")
    if config is None:
        config = SolverConfig.for_dimension(1)
    from dataclasses import replace
    config = replace(config, adaptive=False, dt_init=dt_ref, monitor_entropy=False)

    def solve(N):
        mesh = build_interval_mesh(domain[0], domain[1], N)
        s0 = project_initial(mesh, initial, signed=model.signed)
        final, reps = advance(mesh, model, s0, t_end, config)
        if progress:
            progress(N, len(reps))
        return mesh, final, len(reps)

    ref_mesh, ref, steps = solve(reference_cells)
    fine_edges = ref_mesh.vertices[:, 0]
    errors = []
    for N in counts:
        mesh, sol, _ = solve(N)
        proj = average_onto(fine_edges, ref.values, mesh.vertices[:, 0])
        diff = sol.values - proj
        errors.append([discrete_norm(mesh, diff[i], NormKind.Lq(2)) for i in range(model.n_species)])
    errors = np.array(errors)
    orders = np.full_like(errors, np.nan)
    for r in range(1, len(counts)):
        orders[r] = np.log(errors[r - 1] / errors[r]) / np.log(counts[r] / counts[r - 1])
    return ConvergenceTable(counts, errors, orders, reference_cells, t_end / steps, t_end, steps)


# -- large-time decay ------------------------------------------------------------

@dataclass
class DecayReport:
    times: np.ndarray
    relative_entropy: np.ndarray
    weighted_L1_sq: np.ndarray
    fitted_lambda: float
    fit_intercept: float
    r_squared: float
    kappa_bound_ok: bool
    C3: float
    monotone: bool
    window: tuple = field(default=(math.nan, math.nan))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time", "relative_entropy", "weighted_L1_sq"])
            for t, h, l in zip(self.times, self.relative_entropy, self.weighted_L1_sq):
                w.writerow([repr(float(t)), repr(float(h)), repr(float(l))])


def mass_average(mesh: Mesh, state) -> np.ndarray:
    return _values(state) @ mesh.cell_measures / mesh.domain_measure


def decay_analysis(history, model: Model, ubar, mesh: Mesh) -> DecayReport:
    """Relative entropy and weighted L^1 traces of a source-free run.

    ``history`` is a sequence of (time, state).  lambda is the negative slope of
    a least-squares line through (t, log H) over the second half of the time
    window.  The Csiszar-Kullback-Pinsker domination
    sum pi_i |u_i - ubar_i|_{L1}^2 <= C3 H[u|ubar] is checked at every entry,
    with C3 = 2 max ubar_i m(Omega).
    """
    ubar = np.asarray(ubar, dtype=float)
    times = np.array([float(t) for t, _ in history])
    H = np.array([relative_entropy(mesh, model, s, ubar) for _, s in history])
    l1 = np.array([
        float(np.sum(model.pi * (np.abs(_values(s) - ubar[:, None]) @ mesh.cell_measures) ** 2))
        for _, s in history
    ])
    C3 = 2.0 * float(np.max(ubar)) * mesh.domain_measure
    scale = 1e-12 * max(1.0, float(np.max(l1, initial=0.0)))
    kappa_ok = bool(np.all(l1 <= C3 * H + scale))
    monotone = bool(np.all(np.diff(H) < 0)) if len(H) > 1 else True
    if len(H) == 0 or np.all(H == 0):
        return DecayReport(times, H, l1, math.nan, math.nan, math.nan, kappa_ok, C3, True)
    t_mid = times[0] + 0.5 * (times[-1] - times[0])
    sel = times >= t_mid
    if np.any(H[sel] <= 0):
        raise ValueError("relative entropy trace is not positive on the fit window")
    if sel.sum() < 2:
        raise ValueError("too few samples in the fit window")
    y = np.log(H[sel])
    slope, intercept = np.polyfit(times[sel], y, 1)
    pred = slope * times[sel] + intercept
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return DecayReport(times, H, l1, float(-slope), float(intercept), r2, kappa_ok, C3, monotone,
                       (float(t_mid), float(times[-1])))
