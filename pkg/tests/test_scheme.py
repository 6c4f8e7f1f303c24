import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import bisection_mean, log_mean, loop_residual, lv_source, skt_matrix
from sktfv.initial import Bump, Constant, Gaussian, IndicatorRectangle, Sum
from sktfv.mesh import build_interval_mesh, build_rectangle_mesh
from sktfv.model import (SKTCoefficients, boltzmann_entropy, decay_coefficients, keller_segel_model,
                         pattern_coefficients, power_entropy, quadratic_entropy, skt_model)
from sktfv.scheme import (State, assemble_edge_means, cell_average, drift_flux, entropy_mean, entropy_mean_arrays,
                          flux, project_initial, residual)

POS = st.floats(1e-6, 1e6, allow_nan=False)


def decoupled_linear():
    """A = identity through a0 = 1 and a tiny self-diffusion scaled out of the test states."""
    c = SKTCoefficients(a0=[1.0], a=[[1e-300]], b0=[0.0], b=[[0.0]])
    return skt_model(c)


def test_entropy_mean_examples():
    comp = boltzmann_entropy()
    assert entropy_mean(2.0, 2.0, comp) == 2.0
    assert entropy_mean(0.0, 5.0, comp) == 0.0
    assert entropy_mean(1.0, math.e, comp) == pytest.approx(math.e - 1, rel=1e-14)
    oracle = bisection_mean(np.array([1.0]), np.array([math.e]),
                            lambda a, b: (np.log(b) - np.log(a)) / (b - a), lambda t: 1.0 / t)
    assert entropy_mean(1.0, math.e, comp) == pytest.approx(float(oracle[0]), rel=1e-13)


def test_entropy_mean_rejects_negative():
    with pytest.raises(ValueError):
        entropy_mean(-1.0, 2.0, boltzmann_entropy())


def test_quadratic_mean_is_arithmetic():
    assert entropy_mean(-1.0, 3.0, quadratic_entropy(2.0)) == 1.0


def test_power_mean_matches_bisection(rng):
    m = 1.5
    comp = power_entropy(m)
    a = 10 ** rng.uniform(-3, 3, 2000)
    b = 10 ** rng.uniform(-3, 3, 2000)
    got = entropy_mean_arrays(a, b, comp)[0]
    ref = bisection_mean(a, b, lambda x, y: (y ** (m - 1) - x ** (m - 1)) / ((m - 1) * (y - x)),
                         lambda t: t ** (m - 2))
    np.testing.assert_allclose(got, ref, rtol=1e-10)
    resid = comp.deriv2(got) * (b - a) - (comp.deriv(b) - comp.deriv(a))
    assert np.all(np.abs(resid) <= 1e-10 * np.abs(comp.deriv(b) - comp.deriv(a)))


def test_log_mean_derivatives(rng):
    comp = boltzmann_entropy()
    a = 10 ** rng.uniform(-2, 2, 200)
    b = a * (1 + 10 ** rng.uniform(-6, 0.5, 200))
    _, da, db = entropy_mean_arrays(a, b, comp)
    h = 1e-6 * a
    fa = (entropy_mean_arrays(a + h, b, comp)[0] - entropy_mean_arrays(a - h, b, comp)[0]) / (2 * h)
    fb = (entropy_mean_arrays(a, b + h, comp)[0] - entropy_mean_arrays(a, b - h, comp)[0]) / (2 * h)
    np.testing.assert_allclose(da, fa, rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(db, fb, rtol=1e-6, atol=1e-8)


def test_edge_means_constant_and_zero(small_meshes):
    m = skt_model(pattern_coefficients())
    for mesh in small_meshes.values():
        u = np.full((2, mesh.n_cells), 1.7)
        np.testing.assert_allclose(assemble_edge_means(mesh, m, u).values, 1.7, rtol=1e-15)
        u[0, 0] = 0.0
        means = assemble_edge_means(mesh, m, u).values
        E = mesh.n_interior
        touching = (mesh.edge_cells[:E] == 0).any(axis=1)
        assert np.all(means[0, touching] == 0.0)
        assert np.all(means[1] == pytest.approx(1.7))


def test_edge_means_bracketed(small_meshes, rng):
    m = skt_model(decay_coefficients())
    mesh = small_meshes["triangulation"]
    u = 10 ** rng.uniform(-4, 2, size=(3, mesh.n_cells))
    means = assemble_edge_means(mesh, m, u).values
    c = mesh.edge_cells[: mesh.n_interior]
    lo = np.minimum(u[:, c[:, 0]], u[:, c[:, 1]])
    hi = np.maximum(u[:, c[:, 0]], u[:, c[:, 1]])
    assert np.all(means >= lo * (1 - 1e-14)) and np.all(means <= hi * (1 + 1e-14))


def test_flux_examples():
    mesh = build_interval_mesh(0.0, 1.0, 2)  # tau = 2
    model = decoupled_linear()
    s = State(np.array([[0.0, 1.0]]))
    assert flux(mesh, model, s, None, 0, 0) == pytest.approx(-2.0)
    assert flux(mesh, model, s, None, mesh.n_interior, 0) == 0.0
    const = State(np.full((1, 2), 3.0))
    assert flux(mesh, model, const, None, 0, 0) == 0.0


def test_drift_flux_reductions(small_meshes):
    mesh = small_meshes["rectangle"]
    base = skt_model(pattern_coefficients())
    flat = base.with_drift([2.0, 2.0], Constant(1.0))
    rng = np.random.default_rng(4)
    s = State(rng.uniform(0.5, 2, size=(2, mesh.n_cells)))
    for e in range(mesh.n_interior):
        assert drift_flux(mesh, flat, s, None, e, 0) == pytest.approx(flux(mesh, flat, s, None, e, 0), abs=1e-15)
    peaked = base.with_drift([2.0, 2.0], Gaussian((0.5, 0.5), 1.0, 2.0))
    v = s.values.copy()
    v[0] = 0.0
    for e in range(mesh.n_interior):
        assert drift_flux(mesh, peaked, State(v), None, e, 0) == pytest.approx(flux(mesh, peaked, State(v), None, e, 0),
                                                                             abs=1e-15)


def _niche_setup():
    c = pattern_coefficients()
    mesh = build_rectangle_mesh((0, 1), (0, 1), 6, 6)
    model = skt_model(c).with_drift([2.0, 2.0], Gaussian((0.5, 0.5), 1.0, 2.0))
    s = project_initial(mesh, [Sum((Constant(2.0), Bump((0.25, 0.25), 0.31))),
                               Sum((Constant(0.5), Bump((0.5, 0.5), 0.2)))])
    return c, mesh, model, s


def test_drift_golden_values():
    _, mesh, model, s = _niche_setup()
    R = residual(mesh, model, s.values, 0.99 * s.values, 1e-3)
    np.testing.assert_allclose(np.abs(R).sum(axis=1), [24.112681407961663, 5.829799994144257], rtol=1e-12)
    np.testing.assert_allclose(R[:, [0, 7, 14, 35]],
                               [[1.526098695547512, 0.904111179888536, -0.03493719759110292, 1.5374651893385922],
                                [0.38339754733464804, 0.1066384940841481, -0.028574413992396408,
                                 0.38436629733464805]], rtol=1e-12)
    assert drift_flux(mesh, model, s, None, 0, 1) == pytest.approx(0.12225432922287947, rel=1e-12)
    assert drift_flux(mesh, model, s, None, 5, 1) == pytest.approx(0.14507632693716405, rel=1e-12)
    assert flux(mesh, model, s, None, 5, 1) == pytest.approx(-0.007911458333333338, rel=1e-12)


def test_drift_residual_matches_loop_oracle():
    c, mesh, model, s = _niche_setup()
    from sktfv.scheme import cell_potential
    u = s.values
    R = residual(mesh, model, u, 0.99 * u, 1e-3)
    ref = loop_residual(mesh, lambda us: skt_matrix(c.a0, c.a, us), lambda v: lv_source(c.b0, c.b, v),
                        u, 0.99 * u, 1e-3, phi=cell_potential(mesh, model), d=[2.0, 2.0])
    np.testing.assert_allclose(R, ref, rtol=1e-12, atol=1e-12 * np.abs(ref).max())


@pytest.mark.parametrize("name", ["interval", "rectangle", "triangulation"])
def test_residual_matches_loop_oracle(small_meshes, name, rng):
    c = pattern_coefficients()
    model = skt_model(c)
    mesh = small_meshes[name]
    u = rng.uniform(0.2, 3.0, size=(2, mesh.n_cells))
    u_old = rng.uniform(0.2, 3.0, size=(2, mesh.n_cells))
    R = residual(mesh, model, u, u_old, 0.01)
    ref = loop_residual(mesh, lambda us: skt_matrix(c.a0, c.a, us), lambda v: lv_source(c.b0, c.b, v),
                        u, u_old, 0.01)
    np.testing.assert_allclose(R, ref, rtol=1e-10, atol=1e-12 * np.abs(ref).max())


def test_residual_vanishes_at_equilibrium(small_meshes):
    model = skt_model(pattern_coefficients())
    for mesh in small_meshes.values():
        u = np.tile([[2.0], [0.5]], (1, mesh.n_cells))
        assert np.max(np.abs(residual(mesh, model, u, u, 1e-3))) < 1e-12


def test_residual_stationary_constant_without_sources(small_meshes):
    model = skt_model(decay_coefficients())
    for mesh in small_meshes.values():
        u = np.tile([[0.3], [1.2], [2.0]], (1, mesh.n_cells))
        assert np.max(np.abs(residual(mesh, model, u, u, 0.1))) == 0.0


def test_residual_telescopes(small_meshes, rng):
    model = skt_model(pattern_coefficients())
    for mesh in small_meshes.values():
        u = rng.uniform(0.1, 3, size=(2, mesh.n_cells))
        u_old = rng.uniform(0.1, 3, size=(2, mesh.n_cells))
        dt = 0.05
        R = residual(mesh, model, u, u_old, dt)
        expect = ((u - u_old) / dt - model.source(u)) @ mesh.cell_measures
        np.testing.assert_allclose(R.sum(axis=1), expect, rtol=1e-12, atol=1e-12)


def test_project_constant_and_u2_initial():
    mesh = build_interval_mesh(-math.pi, math.pi, 40)
    s = project_initial(mesh, [Constant(3.0), Constant(0.5)])
    assert np.all(s.values[0] == 3.0) and np.all(s.values[1] == 0.5)


def test_project_indicator_on_grid():
    mesh = build_rectangle_mesh((0, 1), (0, 1), 10, 10)
    s = project_initial(mesh, [IndicatorRectangle((0.2, 0.4), (0.2, 0.4), 1.0)])
    inside = np.isclose(s.values[0], 1.0)
    assert inside.sum() == 4
    np.testing.assert_allclose(s.values[0][~inside], 0.0)


def test_project_bump_integral_exact():
    # integral of 0.31 max(1 - 64 x^2, 0) over R is 0.31 * 4 / (3 * 8)
    mesh = build_interval_mesh(-math.pi, math.pi, 40)
    vals = cell_average(mesh, Bump((0.25,), 0.31))
    assert vals @ mesh.cell_measures == pytest.approx(0.31 * 4 / 24, rel=1e-13)


def test_project_rejects_negative_average():
    mesh = build_interval_mesh(0.0, 1.0, 4)
    with pytest.raises(ValueError):
        project_initial(mesh, [Constant(-1.0)])
    s = project_initial(mesh, [Constant(1.0), Constant(-1.0)], signed=[False, True])
    assert np.all(s.values[1] == -1.0)


def test_keller_segel_signal_may_be_negative(small_meshes):
    model = keller_segel_model(1.0)
    mesh = small_meshes["interval"]
    u = np.vstack([np.linspace(0.5, 2, mesh.n_cells), np.linspace(-1, 1, mesh.n_cells)])
    R = residual(mesh, model, u, u, 0.1)
    assert np.all(np.isfinite(R))


@given(a=POS, b=POS)
def test_log_mean_symmetric_bracketed_and_chain_rule(a, b):
    comp = boltzmann_entropy()
    m1 = entropy_mean(a, b, comp)
    m2 = entropy_mean(b, a, comp)
    assert m1 == m2
    assert min(a, b) * (1 - 1e-15) <= m1 <= max(a, b) * (1 + 1e-15)
    if a != b:
        ref = (b - a) / math.log1p((b - a) / a) if abs(b - a) < 0.5 * a else log_mean(a, b)
        assert m1 == pytest.approx(ref, rel=1e-10)


@given(a=st.lists(POS, min_size=2, max_size=2), m=st.floats(1.05, 1.95))
def test_generic_mean_chain_rule(a, m):
    comp = power_entropy(m)
    x, y = a
    t = entropy_mean(x, y, comp)
    assert min(x, y) * (1 - 1e-12) <= t <= max(x, y) * (1 + 1e-12)
    if abs(y - x) > 1e-6 * (x + y):
        jump = comp.deriv(np.array(y)) - comp.deriv(np.array(x))
        lhs = comp.deriv2(np.array(t)) * (y - x)
        assert abs(lhs - jump) <= 1e-9 * abs(jump)


@given(seed=st.integers(0, 10_000))
def test_flux_antisymmetry(seed):
    rng = np.random.default_rng(seed)
    mesh = build_rectangle_mesh((0, 1), (0, 1), 3, 3)
    model = skt_model(pattern_coefficients())
    u = rng.uniform(0.01, 5, size=(2, mesh.n_cells))
    for e in range(mesh.n_interior):
        F = flux(mesh, model, u, None, e, 0)
        swapped = u.copy()
        k, l = mesh.edge_cells[e]
        swapped[:, [k, l]] = u[:, [l, k]]
        assert flux(mesh, model, swapped, None, e, 0) == pytest.approx(-F, rel=1e-14, abs=1e-300)
