"""Cross-diffusion models with an additively separable entropy.

All model maps act on arrays with species along the first axis and an
arbitrary number of trailing sample axes flattened to one:

    diffusion(u)      (n, M) -> (n, n, M)       A_ij(u)
    diffusion_jac(u)  (n, M) -> (n, n, n, M)    dA_ij / du_k
    source(u)         (n, M) -> (n, M)
    source_jac(u)     (n, M) -> (n, n, M)       df_i / du_j
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class EntropyComponent:
    """One summand h_i of the entropy density and its derivatives.

    ``kind`` selects how the edge mean is computed: ``"boltzmann"`` uses the
    closed-form logarithmic mean, ``"quadratic"`` the arithmetic mean (h''
    constant), anything else a bracketed root solve of the chain rule.
    """

    eval: Callable
    deriv: Callable
    deriv2: Callable
    deriv3: Callable
    deriv_inverse: Callable
    lower_slope: float
    kind: str = "generic"
    # h(s) >= lower_slope * s - lower_intercept on [0, inf)
    lower_intercept: float = 0.0
    weight: float = 1.0
    signed: bool = False


def _g(s):
    s = np.asarray(s, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = s * (np.log(s) - 1.0) + 1.0
    return np.where(s > 0, val, 1.0)


def boltzmann_entropy(weight: float = 1.0) -> EntropyComponent:
    """h(s) = weight * (s (log s - 1) + 1)."""
    w = float(weight)
    return EntropyComponent(
        eval=lambda s: w * _g(s),
        deriv=lambda s: w * np.log(s),
        deriv2=lambda s: w / np.asarray(s, dtype=float),
        deriv3=lambda s: -w / np.asarray(s, dtype=float) ** 2,
        deriv_inverse=lambda y: np.exp(np.asarray(y, dtype=float) / w),
        lower_slope=w,
        kind="boltzmann",
        lower_intercept=w * (math.e - 1.0),
        weight=w,
    )


def quadratic_entropy(scale: float) -> EntropyComponent:
    """h(s) = s^2 / (2 scale); h' is linear and invertible on all of R."""
    c = float(scale)
    return EntropyComponent(
        eval=lambda s: np.asarray(s, dtype=float) ** 2 / (2 * c),
        deriv=lambda s: np.asarray(s, dtype=float) / c,
        deriv2=lambda s: np.full(np.shape(s), 1.0 / c),
        deriv3=lambda s: np.zeros(np.shape(s)),
        deriv_inverse=lambda y: c * np.asarray(y, dtype=float),
        lower_slope=0.0,
        kind="quadratic",
        weight=1.0 / c,
        signed=True,
    )


def power_entropy(m: float, weight: float = 1.0) -> EntropyComponent:
    """h(s) = weight (s^m - m s + m - 1) / (m (m - 1)) for 1 < m < 2.

    h'' = weight s^(m-2) is strictly decreasing, so the edge mean is the
    root of the chain rule; no closed form is used.
    """
    if not 1.0 < m < 2.0:
        raise ModelError("power entropy needs 1 < m < 2")
    w = float(weight)
    return EntropyComponent(
        eval=lambda s: w * (np.asarray(s, float) ** m - m * np.asarray(s, float) + m - 1) / (m * (m - 1)),
        deriv=lambda s: w * (np.asarray(s, float) ** (m - 1) - 1) / (m - 1),
        deriv2=lambda s: w * np.asarray(s, float) ** (m - 2),
        deriv3=lambda s: w * (m - 2) * np.asarray(s, float) ** (m - 3),
        deriv_inverse=lambda y: (1 + (m - 1) * np.asarray(y, float) / w) ** (1 / (m - 1)),
        lower_slope=0.0,
        kind="power",
        weight=w,
    )


@dataclass(frozen=True, eq=False)
class Drift:
    """Environmental potential phi with per-species drift coefficients d_i."""

    coefficients: np.ndarray
    potential: Callable  # points (M, d) -> (M,)


@dataclass(frozen=True)
class Model:
    name: str
    n_species: int
    entropy: tuple
    pi: np.ndarray
    diffusion: Callable
    diffusion_jac: Callable
    diffusion_lipschitz: float
    source: Callable
    source_jac: Callable
    c_A: float
    C_f: float
    drift: Optional[Drift] = None
    entropic: bool = True
    has_source: bool = True
    relaxed: tuple = ()
    params: dict = field(default_factory=dict)

    @property
    def signed(self) -> np.ndarray:
        return np.array([c.signed for c in self.entropy])

    def entropy_density(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        return sum(self.entropy[i].eval(u[i]) for i in range(self.n_species))

    def with_drift(self, coefficients, potential) -> "Model":
        d = np.asarray(coefficients, dtype=float)
        if d.shape != (self.n_species,):
            raise ModelError("one drift coefficient per species is required")
        return _replace(self, drift=Drift(d, potential), name=self.name + "+drift")

    def without_source(self) -> "Model":
        n = self.n_species
        return _replace(
            self,
            source=lambda u: np.zeros_like(np.asarray(u, dtype=float)),
            source_jac=lambda u: np.zeros((n, n) + np.shape(u)[1:]),
            C_f=0.0,
            has_source=False,
            name=self.name + "-nosource",
        )


def _replace(model: Model, **changes) -> Model:
    from dataclasses import replace
    return replace(model, **changes)


@dataclass(frozen=True)
class SKTCoefficients:
    a0: np.ndarray
    a: np.ndarray
    b0: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        for name in ("a0", "a", "b0", "b"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        n = len(self.a0)
        if self.a.shape != (n, n) or self.b.shape != (n, n) or self.b0.shape != (n,):
            raise ModelError("inconsistent coefficient shapes")
        if np.any(self.a0 < 0) or np.any(self.a < 0) or np.any(self.b < 0):
            raise ModelError("a_i0, a_ij and b_ij must be nonnegative")
        if np.any(np.diag(self.a) <= 0):
            raise ModelError("a_ii > 0 is required")
        if self.has_source and np.any(np.diag(self.b) <= 0):
            raise ModelError("b_ii > 0 is required unless all b coefficients vanish")

    @property
    def has_source(self) -> bool:
        return bool(np.any(self.b0 != 0) or np.any(self.b != 0))

    @property
    def n(self) -> int:
        return len(self.a0)


# -- structural conditions -------------------------------------------------

class DetailedBalanceError(ModelError):
    def __init__(self, pair, residual):
        super().__init__(f"detailed balance fails on pair {pair} (relative residual {residual:.3e})")
        self.pair = pair
        self.residual = residual


def detailed_balance_weights(a, rtol: float = 1e-12) -> np.ndarray:
    """Weights pi with pi_i a_ij = pi_j a_ji, normalised to pi_1 = 1.

    Ratios are propagated along the graph of pairs with a_ij, a_ji > 0; every
    remaining pair (including closing edges of cycles) is then checked.
    Species not connected to species 1 get weight 1 relative to their own
    component root.
    """
    a = np.asarray(a, dtype=float)
    n = len(a)
    pi = np.full(n, np.nan)
    for root in range(n):
        if not np.isnan(pi[root]):
            continue
        pi[root] = 1.0
        queue = deque([root])
        while queue:
            i = queue.popleft()
            for j in range(n):
                if j != i and np.isnan(pi[j]) and a[i, j] > 0 and a[j, i] > 0:
                    pi[j] = pi[i] * a[i, j] / a[j, i]
                    queue.append(j)
    scale = max(np.max(np.abs(a)), np.finfo(float).tiny)
    for i in range(n):
        for j in range(i + 1, n):
            res = abs(pi[i] * a[i, j] - pi[j] * a[j, i])
            ref = max(pi[i] * a[i, j], pi[j] * a[j, i], scale)
            if res > rtol * ref:
                raise DetailedBalanceError((i, j), res / ref)
    return pi


def dominance_eta0(a) -> float:
    """eta_0 = min_i (a_ii - 1/4 sum_j (sqrt(a_ij) - sqrt(a_ji))^2)."""
    a = np.asarray(a, dtype=float)
    s = np.sqrt(a)
    return float(np.min(np.diag(a) - 0.25 * ((s - s.T) ** 2).sum(axis=1)))


def compute_Cf(coeffs: SKTCoefficients, pi) -> float:
    """Growth constant of the Lotka-Volterra terms against the weighted Boltzmann entropy."""
    pi = np.asarray(pi, dtype=float)
    inner = coeffs.b0 + (coeffs.b.T @ pi) / (math.e * pi)
    return float(2.0 / math.log(2.0) * np.max(inner))


# -- concrete models ---------------------------------------------------------

def _lv_source(b0, b):
    def source(u):
        u = np.asarray(u, dtype=float)
        return u * (b0[:, None] - b @ u) if u.ndim == 2 else u * (b0 - b @ u)

    def source_jac(u):
        u = np.asarray(u, dtype=float)
        n = len(b0)
        U = u.reshape(n, -1)
        J = -b[:, :, None] * U[:, None, :]
        J[np.arange(n), np.arange(n)] += (b0[:, None] - b @ U)
        return J.reshape((n, n) + u.shape[1:])

    return source, source_jac


def skt_model(coeffs: SKTCoefficients, pi=None) -> Model:
    """n-species SKT model with Lotka-Volterra sources."""
    a0, a, b0, b = coeffs.a0, coeffs.a, coeffs.b0, coeffs.b
    n = coeffs.n
    entropic = True
    relaxed = ()
    eta0 = dominance_eta0(a)
    if pi is None:
        try:
            pi = detailed_balance_weights(a)
            c_A = float(np.min(pi * np.diag(a)))
        except DetailedBalanceError:
            if eta0 > 0:
                pi = np.ones(n)
                c_A = 2.0 * eta0
            else:
                pi = np.ones(n)
                c_A = 0.0
                entropic = False
                relaxed = ("H5: neither detailed balance nor self-diffusion dominance holds",)
    else:
        pi = np.asarray(pi, dtype=float)
        s = pi[:, None] * a
        if np.allclose(s, s.T, rtol=1e-12, atol=0):
            c_A = float(np.min(pi * np.diag(a)))
        elif eta0 > 0 and np.allclose(pi, 1.0):
            c_A = 2.0 * eta0
        else:
            c_A = 0.0
            entropic = False
            relaxed = ("H5: given weights satisfy neither detailed balance nor dominance",)

    def diffusion(u):
        u = np.asarray(u, dtype=float)
        U = u.reshape(n, -1)
        A = a[:, :, None] * U[:, None, :]
        A[np.arange(n), np.arange(n)] += a0[:, None] + a @ U
        return A.reshape((n, n) + u.shape[1:])

    # dA_il/du_k = delta_il a_ik + a_il delta_ik
    dA = np.zeros((n, n, n))
    for i in range(n):
        dA[i, i, :] += a[i, :]
        dA[i, :, i] += a[i, :]

    def diffusion_jac(u):
        u = np.asarray(u, dtype=float)
        return np.broadcast_to(dA.reshape(n, n, n, *([1] * (u.ndim - 1))),
                               (n, n, n) + u.shape[1:])

    source, source_jac = _lv_source(b0, b)
    has_source = coeffs.has_source
    return Model(
        name="skt",
        n_species=n,
        entropy=tuple(boltzmann_entropy(p) for p in pi),
        pi=pi,
        diffusion=diffusion,
        diffusion_jac=diffusion_jac,
        diffusion_lipschitz=float(np.max(np.abs(dA).sum(axis=2))),
        source=source,
        source_jac=source_jac,
        c_A=c_A,
        C_f=compute_Cf(coeffs, pi),
        entropic=entropic,
        has_source=has_source,
        relaxed=relaxed,
        params={"a0": a0.tolist(), "a": a.tolist(), "b0": b0.tolist(), "b": b.tolist(),
                "eta0": eta0},
    )


def _no_source(n):
    return (lambda u: np.zeros_like(np.asarray(u, dtype=float)),
            lambda u: np.zeros((n, n) + np.shape(u)[1:]))


def _affine_diffusion(const, lin):
    """A_ij(u) = const_ij + sum_k lin_ijk u_k."""
    n = len(const)

    def diffusion(u):
        u = np.asarray(u, dtype=float)
        U = u.reshape(n, -1)
        A = const[:, :, None] + np.einsum("ijk,km->ijm", lin, U)
        return A.reshape((n, n) + u.shape[1:])

    def diffusion_jac(u):
        u = np.asarray(u, dtype=float)
        return np.broadcast_to(lin.reshape(n, n, n, *([1] * (u.ndim - 1))), (n, n, n) + u.shape[1:])

    return diffusion, diffusion_jac, float(np.max(np.abs(lin).sum(axis=2)))


def seawater_model(delta: float) -> Model:
    """Freshwater/saltwater heights with a flat bottom: A = [[d u1, d u1], [d u2, u2]]."""
    if not 0.0 < delta < 1.0:
        raise ModelError("delta must lie in (0, 1)")
    lin = np.zeros((2, 2, 2))
    lin[0, 0, 0] = lin[0, 1, 0] = delta
    lin[1, 0, 1] = delta
    lin[1, 1, 1] = 1.0
    diffusion, diffusion_jac, lip = _affine_diffusion(np.zeros((2, 2)), lin)
    source, source_jac = _no_source(2)
    pi = np.array([1.0 / delta, 1.0])
    return Model(
        name="seawater",
        n_species=2,
        entropy=(boltzmann_entropy(pi[0]), boltzmann_entropy(pi[1])),
        pi=pi,
        diffusion=diffusion,
        diffusion_jac=diffusion_jac,
        diffusion_lipschitz=lip,
        source=source,
        source_jac=source_jac,
        c_A=0.5 * (1.0 - delta),
        C_f=0.0,
        has_source=False,
        params={"delta": delta},
    )


def keller_segel_model(delta: float) -> Model:
    """Keller-Segel with additional cross-diffusion in the signal equation.

    The signal u2 carries the quadratic entropy u2^2 / (2 delta); it may
    change sign and its edge mean is the arithmetic mean.
    """
    if not delta > 0:
        raise ModelError("delta must be positive")
    const = np.array([[0.0, 0.0], [delta, 1.0]])
    lin = np.zeros((2, 2, 2))
    lin[0, 0, 0] = 2.0
    lin[0, 1, 0] = -1.0
    diffusion, diffusion_jac, lip = _affine_diffusion(const, lin)

    def source(u):
        u = np.asarray(u, dtype=float)
        return np.stack([np.zeros_like(u[0]), u[0] - u[1]])

    def source_jac(u):
        u = np.asarray(u, dtype=float)
        J = np.zeros((2, 2) + u.shape[1:])
        J[1, 0] = 1.0
        J[1, 1] = -1.0
        return J

    return Model(
        name="keller_segel",
        n_species=2,
        entropy=(boltzmann_entropy(1.0), quadratic_entropy(delta)),
        pi=np.array([1.0, 1.0 / delta]),
        diffusion=diffusion,
        diffusion_jac=diffusion_jac,
        diffusion_lipschitz=lip,
        source=source,
        source_jac=source_jac,
        c_A=min(2.0, 1.0 / delta),
        C_f=float("nan"),
        entropic=True,
        relaxed=(
            "H4: h_2' is linear, so h_2'' is not strictly decreasing and u_2 may change sign",
            "H6: no finite C_f for the quadratic signal entropy; source growth not checked",
        ),
        params={"delta": delta},
    )


def fluid_mixture_model(a0, a, pi) -> Model:
    """A_ij = delta_ij a_i0 + a_ij u_i with zero sources; c_A = lambda_min(pi_i a_ij)."""
    a0 = np.asarray(a0, dtype=float)
    a = np.asarray(a, dtype=float)
    pi = np.asarray(pi, dtype=float)
    n = len(a0)
    if a.shape != (n, n) or pi.shape != (n,):
        raise ModelError("inconsistent shapes")
    if np.any(a0 < 0) or np.any(a < 0) or np.any(pi <= 0):
        raise ModelError("a_i0, a_ij >= 0 and pi_i > 0 are required")
    S = pi[:, None] * a
    if not np.allclose(S, S.T, rtol=1e-12, atol=0):
        raise ModelError("(pi, a) violates detailed balance")
    lam0 = float(np.linalg.eigvalsh(0.5 * (S + S.T))[0])
    if not lam0 > 0:
        raise ModelError(f"(pi_i a_ij) is not positive definite (lambda_0 = {lam0})")
    lin = np.zeros((n, n, n))
    for i in range(n):
        lin[i, :, i] = a[i, :]
    diffusion, diffusion_jac, lip = _affine_diffusion(np.diag(a0), lin)
    source, source_jac = _no_source(n)
    return Model(
        name="fluid_mixture",
        n_species=n,
        entropy=tuple(boltzmann_entropy(p) for p in pi),
        pi=pi,
        diffusion=diffusion,
        diffusion_jac=diffusion_jac,
        diffusion_lipschitz=lip,
        source=source,
        source_jac=source_jac,
        c_A=lam0,
        C_f=0.0,
        has_source=False,
        params={"a0": a0.tolist(), "a": a.tolist()},
    )


def generic_model(name, entropy: Sequence[EntropyComponent], diffusion, diffusion_jac,
                  c_A: float, source=None, source_jac=None, C_f: float = 0.0,
                  diffusion_lipschitz: float = float("nan")) -> Model:
    """User-supplied model; maps must follow the array conventions of this module."""
    n = len(entropy)
    if source is None:
        source, source_jac = _no_source(n)
    return Model(
        name=name, n_species=n, entropy=tuple(entropy),
        pi=np.array([c.weight for c in entropy]), diffusion=diffusion,
        diffusion_jac=diffusion_jac, diffusion_lipschitz=diffusion_lipschitz,
        source=source, source_jac=source_jac, c_A=c_A, C_f=C_f,
    )


# -- hypothesis verification -------------------------------------------------

@dataclass
class HypothesisReport:
    convexity: list
    strict_concavity: list
    inverse_consistency: list
    lower_bound: list
    definiteness_margin: float
    definiteness_ok: bool
    source_margin: float
    source_ok: Optional[bool]
    source_quadratic_constant: float
    relaxed: tuple
    samples: int
    seed: int

    @property
    def violations(self) -> list:
        out = []
        for name in ("convexity", "strict_concavity", "inverse_consistency", "lower_bound"):
            for i, ok in enumerate(getattr(self, name)):
                if ok is False:
                    out.append(f"{name}[{i}]")
        if not self.definiteness_ok:
            out.append("definiteness")
        if self.source_ok is False:
            out.append("source_growth")
        return out

    @property
    def ok(self) -> bool:
        return not self.violations


def verify_hypotheses(model: Model, samples: int = 10_000, seed: int = 0) -> HypothesisReport:
    """Randomised check of the structural hypotheses on entropy, diffusion and sources.

    Densities are drawn log-uniformly from [1e-3, 1e3]; signed species also
    take negative values.  Checks that cannot apply (quadratic entropy is not
    strictly concave in h', Keller-Segel has no C_f) are reported as None.
    """
    rng = np.random.default_rng(seed)
    n = model.n_species
    convex, concave, inverse, lower = [], [], [], []
    s = np.sort(10.0 ** rng.uniform(-6, 6, size=samples))
    for comp in model.entropy:
        d1 = comp.deriv(s)
        convex.append(bool(np.all(np.diff(d1) >= -1e-12 * np.abs(d1[1:]))))
        if comp.kind == "quadratic":
            concave.append(None)
        else:
            d2 = comp.deriv2(s)
            strict = np.diff(s) > 0
            concave.append(bool(np.all(np.diff(d2)[strict] < 0)))
        back = comp.deriv_inverse(d1)
        inverse.append(bool(np.all(np.abs(back - s) <= 1e-12 * s)))
        s_low = np.concatenate([[0.0], s])
        h = comp.eval(s_low)
        lower.append(bool(np.all(h >= comp.lower_slope * s_low - comp.lower_intercept - 1e-9 * np.maximum(1, s_low))))

    u = 10.0 ** rng.uniform(-3, 3, size=(n, samples))
    signed = model.signed
    if signed.any():
        flip = rng.random((n, samples)) < 0.5
        u = np.where(signed[:, None] & flip, -u, u)
    A = model.diffusion(u)
    H2 = np.stack([model.entropy[i].deriv2(u[i]) for i in range(n)])
    M = H2[:, None, :] * A  # (h'' A)_ij
    S = 0.5 * (M + M.transpose(1, 0, 2))
    eig = np.linalg.eigvalsh(S.transpose(2, 0, 1))[:, 0]
    scale = np.maximum(1.0, np.abs(S).max(axis=(0, 1)))
    margin = float(np.min(eig - model.c_A))
    definite = bool(model.c_A > 0 and np.all(eig >= model.c_A - 1e-10 * scale))

    f = model.source(u)
    src_quad = float(np.max(np.abs(f).sum(axis=0) / (1.0 + (u**2).sum(axis=0))))
    if np.isnan(model.C_f):
        src_margin, src_ok = float("nan"), None
    else:
        upos = np.abs(u)
        w = np.stack([model.entropy[i].deriv(upos[i]) for i in range(n)])
        lhs = (model.source(upos) * w).sum(axis=0)
        rhs = model.C_f * (1.0 + model.entropy_density(upos))
        src_margin = float(np.min(rhs - lhs))
        src_ok = bool(np.all(lhs <= rhs + 1e-10 * np.maximum(1, np.abs(rhs))))
    return HypothesisReport(
        convexity=convex, strict_concavity=concave, inverse_consistency=inverse,
        lower_bound=lower, definiteness_margin=margin, definiteness_ok=definite,
        source_margin=src_margin, source_ok=src_ok, source_quadratic_constant=src_quad,
        relaxed=model.relaxed, samples=samples, seed=seed,
    )


# -- coefficient sets used in the experiments --------------------------------

def pattern_coefficients() -> SKTCoefficients:
    """Two-species coefficients of the convergence and pattern-formation runs."""
    return SKTCoefficients(
        a0=[0.05, 0.05],
        a=[[2.5e-5, 1.025], [0.075, 2.5e-5]],
        b0=[59.7, 49.75],
        b=[[24.875, 19.9], [19.9, 19.9]],
    )


def decay_coefficients() -> SKTCoefficients:
    """Three-species source-free coefficients of the large-time run."""
    return SKTCoefficients(
        a0=[1.0, 5.0, 7.0],
        a=[[1.0, 3.0, 4.0], [1.0, 2.0, 4.0 / 3.0], [1.0, 1.0, 2.0]],
        b0=[0.0, 0.0, 0.0],
        b=np.zeros((3, 3)),
    )
