import json
import math
import os
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import eigh_tridiagonal

import oracles
from waveguide_holonomy.errors import ResolutionError, ValidationError
from waveguide_holonomy.potential import ControlVector, StructuredWell, TabulatedPotential
from waveguide_holonomy.spectrum import (
    SpectrumCache,
    chain_gauge,
    eigensolve,
    fix_gauge,
    overlap,
    overlap_matrix,
)

REFERENCE = os.path.join(os.path.dirname(__file__), "data", "reference.json")


@pytest.fixture(scope="module")
def ref():
    with open(REFERENCE) as fh:
        return json.load(fh)


@pytest.fixture(scope="module")
def model():
    return StructuredWell()


def test_energies_match_transfer_matrix(model, ref):
    # second-order grid: ~3e-5 relative at N = 2000
    for e in ref["edge_connection"]:
        sol = eigensolve(model, ControlVector((e["L"], e["w"])), 2)
        np.testing.assert_allclose(sol.energies, e["energies"], rtol=1e-4)


def test_eigenfunctions_match_transfer_matrix(model):
    sol = eigensolve(model, ControlVector((0.45, 0.02)), 1)
    phis = oracles.states(0.45, 0.02, 2)
    for l in range(2):
        xs = np.linspace(0.05, sol.extent - 0.05, 23)
        got = np.array([sol.value_at(x, l) for x in xs])
        want = np.array([phis[l](x) for x in xs])
        assert np.max(np.abs(got - want)) < 5e-4


def test_matches_dense_tridiagonal_solver(model):
    sol = eigensolve(model, ControlVector((0.37, 0.013)), 2)
    h = sol.h
    V = model.grid_potential(sol.x, h, sol.R)
    w, v = eigh_tridiagonal(2.0 / h**2 + V, -np.ones(sol.N - 1) / h**2, select="i", select_range=(0, 2))
    # LAPACK is accurate to eps * ||T|| ~ 4e-9 absolute here
    np.testing.assert_allclose(sol.energies, w, rtol=0.0, atol=4.0 * np.finfo(float).eps * 4.0 / h**2)
    for l in range(3):
        s = np.sign(v[:, l] @ sol.states[:, l])
        np.testing.assert_allclose(s * v[:, l] / math.sqrt(h), sol.states[:, l], atol=1e-8)


def test_empty_box_is_exact_to_grid_order():
    t = TabulatedPotential([0.0, 1.0], [0.0, 0.0])
    N = 999
    sol = eigensolve(t, ControlVector((0.0, 0.0)), 2, N)
    h = 1.0 / (N + 1)
    exact = [4.0 / h**2 * math.sin(n * math.pi * h / 2) ** 2 for n in (1, 2, 3)]
    np.testing.assert_allclose(sol.energies, exact, rtol=1e-12)


@given(L=st.floats(0.05, 0.6), w=st.floats(0.0, 0.05))
@settings(max_examples=20, deadline=None)
def test_solution_invariants(model, L, w):
    sol = eigensolve(model, ControlVector((L, w)), 2)
    assert sol.orthonormality_residual() <= 1e-8
    assert np.all(sol.residuals <= 1e-10)
    assert np.all(np.diff(sol.energies) > 0.0)
    # gauge: positive slope at the left wall
    assert np.all(sol.states[0] > 0.0)


def test_barrier_height_level_at_w0(model):
    for L in (0.1, 0.35, 0.6):
        sol = eigensolve(model, ControlVector((L, 0.0)), 2)
        assert sol.energies[2] == pytest.approx(9.0 * math.pi**2, rel=1e-4)


def test_argument_validation(model):
    with pytest.raises(ValidationError):
        eigensolve(model, ControlVector((0.3, 0.0)), -1)
    with pytest.raises(ResolutionError):
        eigensolve(model, ControlVector((0.3, 0.0)), 5, 4)


def test_fix_gauge_restores_reference_signs(model):
    a = eigensolve(model, ControlVector((0.4, 0.01)), 2)
    b = eigensolve(model, ControlVector((0.4001, 0.01)), 2)
    flipped = type(b)(b.R, b.x, b.h, b.extent, b.energies, b.states * np.array([-1.0, 1.0, -1.0]), b.residuals)
    fixed = fix_gauge(flipped, a)
    np.testing.assert_array_equal(fixed.states, b.states)
    S = overlap_matrix(a, fixed)
    assert np.all(np.diag(S) > 0.99)
    assert overlap(a, 0, fixed, 0) == pytest.approx(S[0, 0])


def test_chain_gauge_keeps_neighbours_aligned(model):
    sols = [eigensolve(model, ControlVector((L, 0.01)), 1) for L in np.linspace(0.3, 0.31, 4)]
    chained = chain_gauge(sols)
    for a, b in zip(chained[:-1], chained[1:]):
        assert np.all(np.diag(overlap_matrix(a, b)) > 0.0)


def test_cache_memoises(model):
    cache = SpectrumCache(model, lmax=1)
    assert len(cache) == 0
    a = cache((0.3, 0.01))
    b = cache(ControlVector((0.3, 0.01)))
    assert a is b and cache.hits == 1 and cache.misses == 1 and a.levels == 2


def test_empty_cache_is_honoured_by_callers(model):
    # an empty cache has len 0; callers must not replace it with a default one
    from waveguide_holonomy.holonomy import path_holonomy
    from waveguide_holonomy.potential import rectangle_path

    cache = SpectrumCache(model, lmax=1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        _, fld = path_holonomy(model, rectangle_path(0.3, 0.31, 0.0, 0.01, 4), "analytic", cache)
    assert fld.levels == 2 and len(cache) > 0


def test_exports(model, tmp_path):
    sol = eigensolve(model, ControlVector((0.3, 0.0)), 1, 50)
    sol.to_csv(tmp_path / "s.csv")
    sol.to_json(tmp_path / "s.json")
    data = np.loadtxt(tmp_path / "s.csv", delimiter=",", skiprows=1)
    assert data.shape == (52, 3)
    assert data[0, 1] == 0.0 and data[-1, 2] == 0.0
    meta = json.loads((tmp_path / "s.json").read_text())
    assert meta["N"] == 50 and len(meta["energies"]) == 2
