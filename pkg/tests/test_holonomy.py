import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

import oracles
from waveguide_holonomy.connection import build_field
from waveguide_holonomy.errors import DomainError, NumericalError, StepSizeError, ValidationError
from waveguide_holonomy.holonomy import (
    Holonomy,
    LambdaGrid,
    abelian_phase_line,
    abelian_phase_stokes,
    commutator_norm,
    compose,
    curvature,
    embed_two_level,
    identity,
    ordered_exponential,
    ordered_product,
    path_holonomy,
    rotation,
    sample_lambda_grid,
    scalar_curl,
    unitarity_error,
)
from waveguide_holonomy.potential import ControlPath, StructuredWell, rectangle_path, reparameterize, speed_profile
from waveguide_holonomy.spectrum import SpectrumCache


@pytest.fixture(scope="module")
def model():
    return StructuredWell()


@pytest.fixture(scope="module")
def cache(model):
    return SpectrumCache(model, lmax=2)


@pytest.fixture(scope="module")
def cache2(model):
    return SpectrumCache(model, lmax=1)


@pytest.fixture(scope="module")
def small_loop(model, cache2):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return path_holonomy(model, rectangle_path(0.35, 0.45, 0.0, 0.02, 16), "analytic", cache2)


def antisymmetric(k):
    return st.lists(st.floats(-0.1, 0.1), min_size=k * k, max_size=k * k).map(
        lambda v: (lambda A: A - A.T)(np.array(v).reshape(k, k))
    )


def test_ordered_product_matches_series():
    rng = np.random.default_rng(7)
    A = rng.normal(size=(5, 3, 3)) * 0.05
    gens = A - np.swapaxes(A, 1, 2)
    want = np.eye(3)
    for G in gens:
        want = oracles.expm_series(-G) @ want
    np.testing.assert_allclose(ordered_product(gens), want, atol=1e-13)


@given(st.lists(antisymmetric(3), min_size=1, max_size=12))
@settings(max_examples=30, deadline=None)
def test_ordered_product_is_orthogonal(gens):
    U = ordered_product(np.array(gens))
    assert unitarity_error(U) <= 1e-12
    assert np.linalg.det(U) == pytest.approx(1.0, abs=1e-12)


@given(a=st.floats(-np.pi, np.pi), b=st.floats(-np.pi, np.pi), c=st.floats(-np.pi, np.pi))
@settings(max_examples=30, deadline=None)
def test_compose_is_associative(a, b, c):
    x = embed_two_level(a, (0, 1), 3)
    y = embed_two_level(b, (0, 2), 3)
    z = embed_two_level(c, (1, 2), 3)
    left = compose(compose(x, y), z).U
    right = compose(x, compose(y, z)).U
    np.testing.assert_allclose(left, right, atol=1e-12)


@given(a=st.floats(-3.0, 3.0), b=st.floats(-3.0, 3.0))
@settings(max_examples=30, deadline=None)
def test_abelian_angles_add(a, b):
    h = compose(Holonomy(rotation(a), a), Holonomy(rotation(b), b))
    assert h.alpha == pytest.approx(a + b)


def test_holonomy_validates_its_matrix():
    with pytest.raises(NumericalError):
        Holonomy(np.array([[1.0, 0.1], [0.0, 1.0]]))
    with pytest.raises(NumericalError):
        Holonomy(rotation(0.3), 0.2)
    with pytest.raises(ValidationError):
        compose(identity(2), identity(3))


def test_embedding_convention():
    h = embed_two_level(0.3, (0, 1), 2)
    np.testing.assert_allclose(h.U, [[np.cos(0.3), np.sin(0.3)], [-np.sin(0.3), np.cos(0.3)]])
    assert h.alpha == pytest.approx(-0.3)
    assert embed_two_level(0.3, (0, 2), 3).alpha is None
    with pytest.raises(ValidationError):
        embed_two_level(0.3, (1, 1), 3)


def test_su3_factors_do_not_commute():
    A = embed_two_level(np.pi / 4, (0, 1), 3).U
    B = embed_two_level(np.pi / 4, (0, 2), 3).U
    assert commutator_norm(A, B) > 0.1
    assert commutator_norm(A, A) == 0.0


def test_loop_holonomy_is_a_rotation(small_loop):
    hol, fld = small_loop
    assert hol.dim == 2 and hol.alpha is not None
    assert unitarity_error(hol.U) <= 1e-12
    np.testing.assert_allclose(hol.U[:2, :2], rotation(hol.alpha), atol=1e-12)
    assert hol.alpha == pytest.approx(abelian_phase_line(fld), abs=1e-12)


def test_reversed_loop_gives_inverse(model, cache2, small_loop):
    hol, fld = small_loop
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        back, _ = path_holonomy(model, fld.path.reversed(), "analytic", cache2)
    np.testing.assert_allclose(back.U @ hol.U, np.eye(2), atol=1e-12)
    assert back.alpha == pytest.approx(-hol.alpha, abs=1e-12)


def test_three_level_loop(model, cache):
    # level 2 couples in, so the holonomy leaves the (0, 1) block
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        hol, fld = path_holonomy(model, rectangle_path(0.35, 0.45, 0.0, 0.02, 16), "analytic", cache)
        back, _ = path_holonomy(model, fld.path.reversed(), "analytic", cache)
    assert hol.dim == 3 and hol.alpha is None
    assert unitarity_error(hol.U) <= 1e-12
    np.testing.assert_allclose(back.U @ hol.U, np.eye(3), atol=1e-12)


@given(name=st.sampled_from(["dilation", "cubic"]), factor=st.floats(0.5, 20.0))
@settings(max_examples=10, deadline=None)
def test_holonomy_independent_of_speed(model, cache2, small_loop, name, factor):
    hol, fld = small_loop
    slow = reparameterize(fld.path, speed_profile(name, factor=factor))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        other, _ = path_holonomy(model, slow, "analytic", cache2)
    assert np.max(np.abs(other.U - hol.U)) <= 1e-12


def test_step_bound_is_enforced(model, cache):
    fld = build_field(model, rectangle_path(0.3, 0.6, 0.0, 0.01, 2), "analytic", provider=cache)
    with pytest.raises(StepSizeError):
        ordered_exponential(fld)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(StepSizeError):
            path_holonomy(model, rectangle_path(0.3, 0.6, 0.0, 0.01, 2), "analytic", cache, max_refine=2)


def test_stationary_path_is_trivial(model, cache):
    p = ControlPath([0.0, 1.0], [[0.3, 0.0], [0.3, 0.0]], closed=True)
    hol, _ = path_holonomy(model, p, "analytic", cache)
    np.testing.assert_array_equal(hol.U, np.eye(3))
    assert hol.alpha == 0.0


def test_stokes_matches_line_on_a_small_rectangle(model):
    c = SpectrumCache(model, lmax=1)
    L = np.linspace(0.4, 0.45, 21)
    w = np.linspace(0.02, 0.03, 21)
    grid = sample_lambda_grid(model, L, w, "analytic", c)
    s = abelian_phase_stokes(grid, 0.4, 0.45, 0.02, 0.03)
    fld = build_field(model, rectangle_path(0.4, 0.45, 0.02, 0.03, 64), "analytic", provider=c)
    line = abelian_phase_line(fld)
    assert s == pytest.approx(line, rel=1e-3)
    # reversing the corners reverses the orientation
    assert abelian_phase_stokes(grid, 0.45, 0.4, 0.02, 0.03) == pytest.approx(-s)


def test_stokes_grid_errors(model):
    grid = LambdaGrid(np.linspace(0, 1, 5), np.linspace(0, 1, 5), np.zeros((5, 5, 2)))
    with pytest.raises(DomainError):
        abelian_phase_stokes(grid, 0.0, 0.3, 0.0, 1.0)
    with pytest.raises(DomainError):
        abelian_phase_stokes(grid, 0.0, 2.0, 0.0, 1.0)
    with pytest.raises(DomainError):
        abelian_phase_stokes(grid, 0.0, 0.25, 0.0, 1.0)
    with pytest.raises(ValidationError):
        LambdaGrid(np.zeros(2), np.zeros(3), np.zeros((3, 2, 2)))


def test_scalar_curl_of_linear_field():
    L = np.linspace(0.0, 1.0, 6)
    w = np.linspace(0.0, 2.0, 5)
    LL, WW = np.meshgrid(L, w, indexing="ij")
    vals = np.stack([-3.0 * WW, 2.0 * LL], axis=-1)
    np.testing.assert_allclose(scalar_curl(LambdaGrid(L, w, vals)), 5.0)


def test_curvature_of_analytic_connection(model):
    c = SpectrumCache(model, lmax=1)

    def conn(R):
        from waveguide_holonomy.connection import connection_at

        return connection_at(model, R, "analytic", c)

    F = curvature(conn, (0.45, 0.02), 1e-4, model.check)
    # lambda_w = 0, so the curl is -d lambda_L / dw
    d = (conn((0.45, 0.0201))[0, 0, 1] - conn((0.45, 0.0199))[0, 0, 1]) / 2e-4
    assert F.scalar_curl == pytest.approx(-d, rel=1e-6)
    np.testing.assert_array_equal(F.component(1, 0), -F.component(0, 1))


def test_line_phase_of_open_path_warns(model):
    c = SpectrumCache(model, lmax=1)
    p = ControlPath([0.0, 1.0], [[0.3, 0.0], [0.31, 0.0]])
    with pytest.warns(RuntimeWarning):
        abelian_phase_line(build_field(model, p, "analytic", provider=c))


def test_expm_agrees_with_scipy_on_generators(small_loop):
    _, fld = small_loop
    for G in fld.segment_generators()[::7]:
        np.testing.assert_allclose(expm(-G), oracles.expm_series(-G), atol=1e-14)
