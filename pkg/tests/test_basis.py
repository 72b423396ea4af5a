import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bsscal import basis
from bsscal.basis import (
    CATEGORICAL,
    INPUT,
    PARAMETER,
    BasisEvaluator,
    CatalogPolicy,
    ComponentDescriptor,
    ModelCatalog,
    VariableSpec,
    bernoulli,
    build_kl_basis,
    categorical_basis_matrix,
    design_matrix,
    enumerate_components,
    eval_categorical_basis,
    eval_main_basis,
    k1,
    k2,
    kd,
    kd_matrix,
    main_basis_matrix,
    select_interaction_terms,
)
from bsscal.errors import ValidationError

unit = st.floats(0.0, 1.0, allow_nan=False)


def fourier_k1(u, v, n_harmonics=2000):
    """Closed-form Fourier series of k1 (independent of the grid eigensolver)."""
    k = np.arange(1, n_harmonics + 1)
    lam = 1.0 / (2 * np.pi * k) ** 4
    periodic = np.sum(lam * 2 * np.cos(2 * np.pi * k * (u - v)))
    return (u - 0.5) * (v - 0.5) + (u * u - u + 1 / 6) * (v * v - v + 1 / 6) + periodic


# -- scalar functions -------------------------------------------------------

def test_bernoulli_values():
    assert bernoulli(1, 0.5) == 0.0
    assert bernoulli(2, 0.0) == pytest.approx(1 / 6, abs=1e-12)
    assert bernoulli(4, 0.0) == pytest.approx(-1 / 30, abs=1e-12)


@pytest.mark.parametrize("order", [0, 3, 5])
def test_bernoulli_rejects_order(order):
    with pytest.raises(ValueError):
        bernoulli(order, 0.3)


def test_bernoulli_rejects_range():
    with pytest.raises(ValueError):
        bernoulli(1, 1.5)


def test_k1_values():
    assert k1(0, 0) == pytest.approx(1 / 4 + 1 / 36 + 1 / 720, abs=1e-12)
    assert k1(0.3, 0.7) == pytest.approx(-0.0391333, abs=5e-8)


def test_k1_matches_fourier_series():
    for u, v in [(0.1, 0.9), (0.5, 0.5), (0.0, 1.0), (0.33, 0.71)]:
        assert k1(u, v) == pytest.approx(fourier_k1(u, v), abs=1e-12)


def test_k1_rejects_range():
    with pytest.raises(ValueError):
        k1(-0.1, 0.5)


@given(unit, unit)
def test_k1_symmetric(a, b):
    assert k1(a, b) == k1(b, a)


@given(unit)
def test_k1_positive_on_diagonal(a):
    assert k1(a, a) > 0


def test_k2_values():
    assert k2((0, 0), (0, 0)) == pytest.approx(0.2791667**2, rel=1e-6)
    assert k2((0.3, 0.3), (0.7, 0.7)) == pytest.approx(0.0391333**2, rel=1e-5)


@given(unit, unit, unit, unit)
def test_k2_is_product(a, b, c, d):
    assert k2((a, b), (c, d)) == pytest.approx(k1(a, c) * k1(b, d), abs=1e-15)


def test_kd_values():
    assert kd(1, 1, 3) == pytest.approx(2 / 3)
    assert kd(1, 2, 3) == pytest.approx(-1 / 3)
    assert sum(kd(2, v, 5) for v in range(1, 6)) == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize("args", [(0, 1, 3), (1, 4, 3), (1, 1, 1), (1.5, 1, 3)])
def test_kd_rejects(args):
    with pytest.raises(ValueError):
        kd(*args)


@given(st.integers(2, 12))
def test_kd_matrix_psd_single_null(g):
    mat = kd_matrix(g)
    assert np.allclose(mat, mat.T)
    w = np.linalg.eigvalsh(mat)
    assert np.sum(np.abs(w) < 1e-12) == 1
    assert w.min() > -1e-12
    assert np.allclose(mat @ np.ones(g), 0.0)


# -- KL basis ---------------------------------------------------------------

@pytest.fixture(scope="module")
def kl():
    return build_kl_basis(300)


def test_kl_eigenvalues_sorted_nonnegative(kl):
    ev = kl.eigenvalues
    assert ev[0] > 0
    assert np.all(np.diff(ev) <= 1e-15)
    assert np.all(ev >= 0)


def test_kl_eigenvalues_match_fourier(kl):
    k = np.repeat(np.arange(1, 6), 2)
    assert np.allclose(kl.eigenvalues[:10], 1 / (2 * np.pi * k) ** 4, rtol=1e-3)


def test_kl_orthonormal_columns(kl):
    m = kl.grid_size
    pos = kl.eigenvalues > 1e-10
    f = kl.eigenfunctions[:, pos]
    gram = f.T @ f / m
    assert np.max(np.abs(gram - np.eye(gram.shape[0]))) < 1e-8


def test_kl_mean_zero(kl):
    pos = kl.eigenvalues > 1e-10
    assert np.max(np.abs(kl.eigenfunctions[:, pos].mean(axis=0))) < 1e-6


def test_kl_reconstruction(kl):
    m = kl.grid_size
    g = kl.grid
    kmat = -basis._b4(np.abs(g[:, None] - g[None, :])) / 24
    rec = (kl.eigenfunctions * kl.eigenvalues) @ kl.eigenfunctions.T
    assert np.linalg.norm(rec - kmat) / np.linalg.norm(kmat) < 1e-6
    assert m == 300


def test_kl_rejects_small_grid():
    with pytest.raises(ValueError):
        build_kl_basis(20)


def test_kl_is_cached_and_read_only(kl):
    assert build_kl_basis(300) is kl
    with pytest.raises(ValueError):
        kl.eigenvalues[0] = 1.0


def test_covariance_reconstruction_from_bases(kl):
    """|k1 - sum phi phi| < 5e-3 on a 50 x 50 grid with L = 25."""
    u = np.linspace(0, 1, 50)
    phi = main_basis_matrix(kl, u, 25)
    approx = phi @ phi.T
    exact = np.array([[fourier_k1(a, b) for b in u] for a in u])
    assert np.max(np.abs(exact - approx)) < 5e-3


def test_linear_scaling_switch_changes_amplitudes():
    lin = build_kl_basis(300, "linear")
    sq = build_kl_basis(300, "sqrt")
    assert np.allclose(lin.amplitudes(), sq.eigenvalues)
    assert np.allclose(sq.amplitudes() ** 2, sq.eigenvalues)
    with pytest.raises(ValueError):
        build_kl_basis(300, "cubic")


# -- main / categorical bases ----------------------------------------------

def test_eval_main_basis_examples(kl):
    assert eval_main_basis(kl, 1, 0.5) == 0.0
    assert eval_main_basis(kl, 2, 0.5) == pytest.approx(-1 / 12)
    table = kl.scaled_table(3)
    for i in (0, 17, 150, 299):
        assert eval_main_basis(kl, 3, kl.grid[i]) == table[i, 0]


def test_eval_main_basis_rejects_index(kl):
    with pytest.raises(ValueError):
        eval_main_basis(kl, kl.max_terms + 1, 0.5)
    with pytest.raises(ValueError):
        eval_main_basis(kl, 0, 0.5)


def test_main_bases_integrate_to_zero(kl):
    u = np.linspace(0, 1, 1000)
    phi = main_basis_matrix(kl, u, 25)
    integrals = np.trapezoid(phi, u, axis=0) if hasattr(np, "trapezoid") else np.trapz(phi, u, axis=0)
    assert np.max(np.abs(integrals)) < 1e-6


def test_main_basis_clamps_with_warning(kl):
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        out = main_basis_matrix(kl, [1.2], 5)
    assert any(issubclass(w.category, RuntimeWarning) for w in rec)
    assert np.allclose(out, main_basis_matrix(kl, [1.0], 5))


@given(st.floats(0.0, 1.0), st.integers(3, 40))
@settings(max_examples=50)
def test_main_basis_periodic_interpolation_bounded(u, l):
    kl = build_kl_basis(300)
    col = kl.scaled_table(l)[:, l - 3]
    v = eval_main_basis(kl, l, u)
    assert col.min() - 1e-15 <= v <= col.max() + 1e-15


def test_categorical_basis_examples():
    assert eval_categorical_basis(1, 1, 2) == 0.5
    assert eval_categorical_basis(1, 2, 2) == -0.5
    with pytest.raises(ValueError):
        eval_categorical_basis(3, 1, 2)


@given(st.integers(2, 9), st.data())
def test_categorical_sum_to_zero_exact(g, data):
    l = data.draw(st.integers(1, g))
    assert sum(eval_categorical_basis(l, w, g) for w in range(1, g + 1)) == pytest.approx(0.0, abs=1e-15)
    mat = categorical_basis_matrix(np.arange(1, g + 1), g)
    assert np.all(np.abs(mat.sum(axis=0)) < 1e-15)


def test_categorical_basis_matrix_rejects_levels():
    with pytest.raises(ValidationError):
        categorical_basis_matrix([0, 1], 2)


# -- variables and components ----------------------------------------------

def test_variable_spec_validation():
    with pytest.raises(ValidationError):
        VariableSpec("a", lo=1.0, hi=1.0)
    with pytest.raises(ValidationError):
        VariableSpec("c", CATEGORICAL, levels=("only",))
    spec = VariableSpec("c", CATEGORICAL, levels=("a", "b", "c"))
    assert spec.n_levels == 3
    assert spec.level_of("b") == 2


def test_component_descriptor_validation():
    with pytest.raises(ValueError):
        ComponentDescriptor("main", (0, 1), ((1, 1),))
    with pytest.raises(ValueError):
        ComponentDescriptor("two-way", (1, 0), ((1, 1),))
    with pytest.raises(ValueError):
        ComponentDescriptor("main", (0,), ((1,), (1,)))
    c = ComponentDescriptor("two-way", (0, 2), ((1, 1), (2, 1)))
    assert c.term_count == 2


def _vars(p, q, cat_levels=None):
    vs = [VariableSpec(f"x{i + 1}", role=INPUT) for i in range(p)]
    vs += [VariableSpec(f"t{i + 1}", role=PARAMETER) for i in range(q)]
    if cat_levels:
        vs.append(VariableSpec("tc", CATEGORICAL, levels=tuple(range(cat_levels)), role=PARAMETER))
    return vs


def test_component_count_three_way():
    comps = enumerate_components(_vars(2, 6), CatalogPolicy(n_terms=3, n_terms_2way=4, n_terms_3way=5, three_way=True))
    assert len(comps) == 1 + 8 + 28 + 6
    for c in comps:
        if c.kind == "three-way":
            assert sum(v < 2 for v in c.variables) == 2


def test_component_enumeration_small():
    comps = enumerate_components(_vars(1, 1), CatalogPolicy(n_terms=3, n_terms_2way=4))
    assert [(c.kind, c.variables) for c in comps] == [
        ("constant", ()), ("main", (0,)), ("main", (1,)), ("two-way", (0, 1))
    ]
    disc = enumerate_components(_vars(2, 3), CatalogPolicy(n_terms=3, n_terms_2way=4), discrepancy=True)
    assert [c.variables for c in disc] == [(), (0,), (1,), (0, 1)]


def test_select_interaction_terms_examples(kl):
    vs = _vars(2, 0)
    assert select_interaction_terms(vs, (0, 1), kl, 1) == [(1, 1)]
    full = select_interaction_terms(vs, (0, 1), kl, 10_000, n_terms=5)
    assert len(full) == 25 and len(set(full)) == 25
    mixed = [VariableSpec("x"), VariableSpec("c", CATEGORICAL, levels=(1, 2, 3))]
    terms = select_interaction_terms(mixed, (0, 1), kl, 9)
    assert sorted(terms) == sorted((i, g) for i in (1, 2, 3) for g in (1, 2, 3))


def test_select_interaction_ties_lexicographic(kl):
    # bases 3 and 4 form an analytically tied cos/sin pair
    vs = _vars(2, 0)
    terms = select_interaction_terms(vs, (0, 1), kl, 400, n_terms=25)
    assert terms.index((1, 3)) < terms.index((1, 4))
    assert terms.index((3, 1)) < terms.index((4, 1))


def test_design_matrix_shape_and_products(kl):
    vs = _vars(1, 1)
    comps = enumerate_components(vs, CatalogPolicy(n_terms=4, n_terms_2way=5))
    rng = np.random.default_rng(0)
    pts = rng.uniform(size=(7, 2))
    mat = design_matrix(pts, comps, kl, vs)
    assert mat.shape == (7, sum(c.term_count for c in comps))
    assert np.all(mat[:, 0] == 1.0)
    ev = BasisEvaluator(vs, comps, kl)
    main0 = ev.block(1, ev.variable_columns(pts))
    main1 = ev.block(2, ev.variable_columns(pts))
    two = ev.block(3, ev.variable_columns(pts))
    for col, (a, b) in enumerate(comps[3].basis_terms):
        assert np.allclose(two[:, col], main0[:, a - 1] * main1[:, b - 1], rtol=0, atol=1e-15)
    assert np.array_equal(mat, design_matrix(pts, comps, kl, vs))


def test_design_matrix_single_constant(kl):
    vs = _vars(1, 0)
    comps = [ComponentDescriptor("constant", (), ((),))]
    assert np.array_equal(design_matrix([[0.3]], comps, kl, vs), [[1.0]])


def test_design_matrix_dimension_mismatch(kl):
    vs = _vars(1, 1)
    comps = enumerate_components(vs, CatalogPolicy(n_terms=3, n_terms_2way=3))
    with pytest.raises(ValidationError):
        design_matrix(np.zeros((2, 3)), comps, kl, vs)


def test_catalog_requires_inputs_first():
    vs = [VariableSpec("t", role=PARAMETER), VariableSpec("x", role=INPUT)]
    with pytest.raises(ValidationError):
        ModelCatalog.build(vs)


def test_discrepancy_budget_override():
    cat = ModelCatalog.build(_vars(2, 1), CatalogPolicy(n_terms=6, n_terms_2way=8, discrepancy_n_terms=2,
                                                        discrepancy_interactions="main"))
    assert [c.term_count for c in cat.discrepancy] == [1, 2, 2]
    assert [c.term_count for c in cat.emulator][:3] == [1, 6, 6]


def test_prior_draw_reproduces_covariance(kl):
    """iid N(0,1) coefficients on the bases give covariance close to k1 (sqrt scaling)."""
    u = np.array([0.1, 0.4, 0.8])
    phi = main_basis_matrix(kl, u, 60)
    rng = np.random.default_rng(3)
    draws = rng.standard_normal((200_000, 60)) @ phi.T
    emp = np.cov(draws, rowvar=False)
    exact = np.array([[k1(a, b) for b in u] for a in u])
    assert np.max(np.abs(emp - exact)) < 4 * math.sqrt(2 * 0.28**2 / 200_000) + 1e-4
