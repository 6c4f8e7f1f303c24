import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sktfv.analysis import (NormKind, approximate_gradient, average_onto, convergence_harness, decay_analysis,
                            discrete_entropy, discrete_norm, entropy_dissipation, neumann_eigenvalues,
                            normal_difference_quotient, relative_entropy, stability_predicate)
from sktfv.initial import Constant
from sktfv.mesh import build_interval_mesh, build_rectangle_mesh, import_triangulation, square_triangulation
from sktfv.model import SKTCoefficients, decay_coefficients, fluid_mixture_model, pattern_coefficients, skt_model
from sktfv.scheme import State


def one_species():
    return fluid_mixture_model([0.0], [[1.0]], [1.0])


def test_norm_kind_validation():
    with pytest.raises(ValueError):
        NormKind.Lq(0.5)
    with pytest.raises(ValueError):
        NormKind("Linf")


@pytest.mark.parametrize("q", [1.0, 2.0, 3.5])
def test_constant_field_norms(small_meshes, q):
    for mesh in small_meshes.values():
        v = np.full(mesh.n_cells, 1.3)
        assert discrete_norm(mesh, v, NormKind.Lq(q)) == pytest.approx(1.3 * mesh.domain_measure ** (1 / q))
        assert discrete_norm(mesh, v, NormKind.W1q_seminorm(q)) == 0.0


def test_two_cell_seminorm():
    mesh = build_interval_mesh(0.0, 1.0, 2)
    v = np.array([0.0, 1.0])
    assert discrete_norm(mesh, v, NormKind.W1q_seminorm(2)) == pytest.approx(math.sqrt(2))
    assert discrete_norm(mesh, v, NormKind.W1q_norm(2)) == pytest.approx(math.sqrt(2 + 0.5))


def test_discrete_entropy_examples():
    m = skt_model(decay_coefficients())
    mesh = build_rectangle_mesh((0, 1), (0, 1), 3, 3)
    assert discrete_entropy(mesh, m, np.ones((3, 9))) == 0.0
    assert discrete_entropy(mesh, m, np.zeros((3, 9))) == pytest.approx(m.pi.sum())
    one = one_species()
    assert discrete_entropy(mesh, one, np.full((1, 9), math.e)) == pytest.approx(1.0)


def test_relative_entropy_examples():
    mesh = build_rectangle_mesh((0, 1), (0, 1), 3, 3)
    one = one_species()
    ubar = np.array([0.7])
    assert relative_entropy(mesh, one, np.full((1, 9), 0.7), ubar) == 0.0
    assert relative_entropy(mesh, one, np.full((1, 9), math.e * 0.7), ubar) == pytest.approx(0.7)
    with pytest.raises(ValueError):
        relative_entropy(mesh, one, np.ones((1, 9)), [0.0])


def test_relative_entropy_small_deviation_accuracy():
    mesh = build_interval_mesh(0.0, 1.0, 4)
    one = one_species()
    eps = 1e-9
    u = np.full((1, 4), 1.0 + eps)
    # g(1 + e) = e^2 / 2 - e^3 / 6 + ...
    assert relative_entropy(mesh, one, u, [1.0]) == pytest.approx(eps**2 / 2, rel=1e-6)


def test_entropy_dissipation_examples():
    mesh = build_interval_mesh(0.0, 1.0, 2)
    assert entropy_dissipation(mesh, None, np.array([[1.0, 1.0]]), 1.0, 1.0) == 0.0
    assert entropy_dissipation(mesh, None, np.array([[0.0, 1.0]]), 1.0, 1.0) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        entropy_dissipation(mesh, None, np.array([[0.0, 1.0]]), 0.0, 1.0)


def test_gradient_constant_and_affine():
    mesh = build_rectangle_mesh((0, 1), (0, 2), 5, 7)
    assert np.all(approximate_gradient(mesh, np.full(mesh.n_cells, 3.0)) == 0)
    a = np.array([0.7, -1.3])
    v = mesh.cell_centers @ a
    E = mesh.n_interior
    np.testing.assert_allclose(normal_difference_quotient(mesh, v), mesh.edge_normals[:E] @ a, rtol=1e-12, atol=1e-12)
    g = approximate_gradient(mesh, v)
    np.testing.assert_allclose((g[:E] * mesh.edge_normals[:E]).sum(axis=1), 2 * mesh.edge_normals[:E] @ a,
                               rtol=1e-12, atol=1e-12)
    assert np.all(g[E:] == 0)


def test_gradient_affine_on_triangles():
    mesh = import_triangulation(*square_triangulation(6, 10))
    a = np.array([-0.4, 2.1])
    v = mesh.cell_centers @ a
    E = mesh.n_interior
    np.testing.assert_allclose(normal_difference_quotient(mesh, v), mesh.edge_normals[:E] @ a, rtol=1e-10, atol=1e-10)


def test_gradient_norm_identity(small_meshes, rng):
    for name in ("rectangle", "triangulation"):
        mesh = small_meshes[name]
        v = rng.standard_normal(mesh.n_cells)
        g = approximate_gradient(mesh, v)
        lhs = float(np.sum(mesh.dual_measures * (g**2).sum(axis=1)))
        semi = discrete_norm(mesh, v, NormKind.W1q_seminorm(2))
        assert lhs == pytest.approx(2 * semi**2, rel=1e-12)


def test_gradient_needs_2d():
    with pytest.raises(ValueError):
        approximate_gradient(build_interval_mesh(0, 1, 3), np.zeros(3))


def test_neumann_eigenvalues():
    ev = neumann_eigenvalues(1.0, 1.0, 2)
    assert (1, 0, math.pi**2) in ev
    assert len(ev) == 8
    assert all(mu > 0 for _, _, mu in ev)


def test_stability_pattern_coefficients():
    rep = stability_predicate(pattern_coefficients(), (2.0, 0.5), root_form="trace_leading")
    assert rep.trace_J == pytest.approx(-59.7, abs=0.05)
    assert rep.det_J == pytest.approx(99.0025, abs=0.01)
    assert rep.trace_D == pytest.approx(0.7626, abs=0.001)
    assert rep.det_D == pytest.approx(0.5626 * 0.200025 - 2.05 * 0.0375, rel=1e-12)
    assert rep.k_minus == pytest.approx(1.0, abs=0.05)
    assert rep.k_plus == pytest.approx(129.82, abs=0.5)
    assert rep.unstable and rep.coexistence
    assert rep.matched_modes
    assert rep.to_dict()["root_form"] == "trace_leading"


def test_sign_corrected_form_factors():
    rep = stability_predicate(pattern_coefficients(), (2.0, 0.5), root_form="sign_corrected")
    assert rep.k_minus == pytest.approx(1.0, rel=1e-12)
    assert rep.k_plus == pytest.approx(rep.det_J / rep.det_D, rel=1e-12)


def test_stability_printed_form_is_default():
    printed = stability_predicate(pattern_coefficients(), (2.0, 0.5))
    assert printed.root_form == "printed"
    # all coefficients positive: no positive root, so no unstable band
    assert printed.k_plus is None or printed.k_plus < 0
    assert not printed.unstable
    with pytest.raises(ValueError):
        stability_predicate(pattern_coefficients(), (2.0, 0.5), root_form="other")


def test_stability_without_cross_diffusion():
    c = pattern_coefficients()
    plain = SKTCoefficients(a0=c.a0, a=np.diag(np.diag(c.a)), b0=c.b0, b=c.b)
    for form in ("printed", "turing"):
        assert not stability_predicate(plain, (2.0, 0.5), root_form=form).unstable


def test_stability_mode_cap_zero():
    rep = stability_predicate(pattern_coefficients(), (2.0, 0.5), mode_cap=0)
    assert rep.matched_modes == [] and not rep.unstable


def test_stability_requires_equilibrium():
    with pytest.raises(ValueError):
        stability_predicate(pattern_coefficients(), (1.0, 1.0))


def test_average_onto_nested_and_overlap():
    fine = np.linspace(0, 1, 9)
    vals = np.arange(8.0)[None]
    np.testing.assert_allclose(average_onto(fine, vals, np.linspace(0, 1, 5)), [[0.5, 2.5, 4.5, 6.5]])
    # first third: cells 0 and 1 in full plus two thirds of cell 2
    assert average_onto(fine, vals, np.linspace(0, 1, 4))[0, 0] == pytest.approx(7 / 8)
    # overlap weights preserve the integral
    coarse = np.linspace(0, 1, 4)
    out = average_onto(fine, vals, coarse)
    assert out.sum() / 3 == pytest.approx(vals.mean())


def test_heat_equation_converges_second_order():
    # decoupled linear diffusion with smooth data: classical second order
    c = SKTCoefficients(a0=[1.0], a=[[1e-12]], b0=[0.0], b=[[0.0]])
    model = skt_model(c)

    def u0(x):
        x = np.asarray(x, float).reshape(len(x), -1)[:, 0]
        return 2.0 + np.cos(np.pi * x)

    tab = convergence_harness(model, (0.0, 1.0), [10, 20, 40], 1e-3, 0.02, [u0], reference_cells=320)
    assert np.all(tab.orders[1:, 0] >= 1.9)


def test_decay_constant_history():
    mesh = build_rectangle_mesh((0, 1), (0, 1), 2, 2)
    m = skt_model(decay_coefficients())
    ubar = np.array([1.0, 2.0, 0.5])
    s = np.tile(ubar[:, None], (1, 4))
    rep = decay_analysis([(0.0, s), (0.1, s)], m, ubar, mesh)
    assert np.all(rep.relative_entropy == 0) and np.all(rep.weighted_L1_sq == 0)
    assert math.isnan(rep.fitted_lambda) and rep.kappa_bound_ok


def test_decay_fit_on_synthetic_exponential():
    mesh = build_interval_mesh(0.0, 1.0, 4)
    one = one_species()
    hist = []
    for t in np.linspace(0, 1, 21):
        u = 1.0 + 0.5 * math.exp(-3 * t) * np.array([[1.0, -1.0, 1.0, -1.0]])
        hist.append((t, State(u, t)))
    rep = decay_analysis(hist, one, [1.0], mesh)
    assert rep.monotone and rep.kappa_bound_ok
    assert rep.fitted_lambda == pytest.approx(6.0, rel=1e-2)
    assert rep.r_squared > 0.999


@given(r=st.floats(1e-12, 1e3), ubar=st.floats(0.1, 10))
def test_relative_entropy_nonnegative_and_ckp(r, ubar):
    mesh = build_interval_mesh(0.0, 1.0, 2)
    one = one_species()
    u = np.array([[r * ubar, ubar * (2 - min(r, 1.99))]])
    mean = u @ mesh.cell_measures / mesh.domain_measure
    H = relative_entropy(mesh, one, u, mean)
    assert H >= 0
    l1 = float(((np.abs(u - mean[:, None]) @ mesh.cell_measures) ** 2)[0])
    assert l1 <= 2 * mean.max() * mesh.domain_measure * H * (1 + 1e-9) + 1e-300


@given(seed=st.integers(0, 10_000), q=st.floats(1.0, 4.0))
def test_norm_triangle_inequality(seed, q):
    rng = np.random.default_rng(seed)
    mesh = build_rectangle_mesh((0, 1), (0, 1), 4, 3)
    v, w = rng.standard_normal((2, mesh.n_cells))
    for kind in (NormKind.Lq(q), NormKind.W1q_seminorm(q), NormKind.W1q_norm(q)):
        assert discrete_norm(mesh, v + w, kind) <= discrete_norm(mesh, v, kind) + discrete_norm(mesh, w, kind) + 1e-12


def test_entropy_constant_model_zero():
    mesh = build_interval_mesh(0.0, 2.0, 4)
    s = State(np.full((1, 4), 1.0))
    assert discrete_entropy(mesh, one_species(), s) == 0.0
    assert Constant(2.0)(np.zeros((3, 1))).tolist() == [2.0, 2.0, 2.0]
