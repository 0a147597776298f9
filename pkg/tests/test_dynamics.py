import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from waveguide_holonomy.connection import build_field
from waveguide_holonomy.dynamics import (
    assemble_omega,
    fidelity,
    gauge_transform,
    integrate_coupled,
    partial_holonomies,
    predict_output,
    step_counts,
    validity_report,
    wkb_phase_integral,
)
from waveguide_holonomy.errors import EvanescentError, StepSizeError, ValidationError
from waveguide_holonomy.holonomy import path_holonomy, rotation
from waveguide_holonomy.potential import ControlPath, StructuredWell, TabulatedPotential, rectangle_path
from waveguide_holonomy.spectrum import SpectrumCache

complex_vec = st.lists(
    st.tuples(st.floats(-1.0, 1.0), st.floats(-1.0, 1.0)), min_size=2, max_size=4
).map(lambda v: np.array([a + 1j * b for a, b in v])).filter(lambda v: np.linalg.norm(v) > 1e-3)


@given(a=complex_vec, phase=st.floats(0.0, 2 * np.pi))
@settings(max_examples=50, deadline=None)
def test_fidelity_ignores_global_phase(a, phase):
    assert fidelity(a, np.exp(1j * phase) * a) == pytest.approx(1.0, abs=1e-12)
    assert fidelity(a, 3.0 * a) == pytest.approx(1.0, abs=1e-12)


def test_fidelity_edge_cases():
    assert fidelity([1.0, 0.0], [0.0, 1.0]) == 0.0
    assert fidelity([0.0, 0.0], [1.0, 0.0]) == 0.0


@pytest.fixture(scope="module")
def flat_field():
    # a control-independent potential: K = 0 and constant levels
    t = TabulatedPotential([0.0, 1.0], [0.0, 0.0])
    c = SpectrumCache(t, lmax=1, N=400)
    p = ControlPath(np.linspace(0.0, 10.0, 21), np.column_stack([np.linspace(0.3, 0.4, 21), np.zeros(21)]))
    return build_field(t, p, "hellmann-feynman", provider=c)


@pytest.mark.parametrize("form", ["covariant", "expanded"])
def test_plane_wave_follows_rk4_amplification(flat_field, form):
    # with K = 0 the right-moving wave is an eigenvector of the RK4 map
    eps = 1e4
    C0 = np.array([0.6, 0.8j])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = integrate_coupled(flat_field, eps, C0, form=form)
    k = np.sqrt(eps - flat_field.energies[0])
    n = step_counts(np.diff(flat_field.path.y), eps)
    z = 1j * k * 0.5 / n[0]
    R = 1 + z + z**2 / 2 + z**3 / 6 + z**4 / 24
    np.testing.assert_allclose(res.final.C, C0 * R ** n.sum(), atol=1e-10)
    assert res.leakage == 0.0


def test_plane_wave_phase_converges(flat_field):
    eps = 1e4
    C0 = np.array([1.0, 0.0])
    want = np.exp(1j * np.sqrt(eps - flat_field.energies[0, 0]) * 10.0)
    errs = []
    for rule in (0.1, 0.05):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            errs.append(abs(integrate_coupled(flat_field, eps, C0, step_rule=rule).final.C[0] - want))
    assert errs[0] / errs[1] == pytest.approx(16.0, rel=0.05)
    # a single level carries no relative dynamical phase, so the prediction is exact
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert integrate_coupled(flat_field, eps, C0).fidelity == pytest.approx(1.0, abs=1e-9)


def test_wkb_phase_of_constant_levels():
    y = np.linspace(0.0, 2.0, 5)
    assert wkb_phase_integral(y, np.full(5, 19.0), 100.0) == pytest.approx(2.0 * 9.0)
    with pytest.raises(EvanescentError):
        wkb_phase_integral(y, np.full(5, 200.0), 100.0)


def test_predict_output_and_gauge_transform():
    U = rotation(0.4)
    out = predict_output([1.0, 0.0], U, np.exp(0.3j))
    np.testing.assert_allclose(out, np.exp(0.3j) * U[:, 0])
    with pytest.raises(ValidationError):
        predict_output([1.0, 0.0, 0.0], U)
    Us = np.array([rotation(a) for a in (0.1, 0.2)])
    C = np.array([[1.0, 0.0], [0.0, 1.0]], dtype=complex)
    back = gauge_transform(C, Us)
    np.testing.assert_allclose(np.linalg.norm(back, axis=1), 1.0)


def test_step_counts_follow_the_rule():
    dy = np.array([0.01, 0.1])
    n = step_counts(dy, 1e4)
    assert np.all(100.0 * dy / n <= 0.1 + 1e-12)
    assert n[0] == 10


def test_input_validation(flat_field):
    with pytest.raises(ValidationError):
        integrate_coupled(flat_field, 1e4, [0.0, 0.0])
    with pytest.raises(ValidationError):
        integrate_coupled(flat_field, 1e4, [1.0, 0.0, 0.0])
    with pytest.raises(ValidationError):
        integrate_coupled(flat_field, 1e4, [1.0, 0.0], form="other")
    with pytest.raises(EvanescentError):
        integrate_coupled(flat_field, 5.0, [1.0, 0.0])
    with pytest.raises(StepSizeError):
        integrate_coupled(flat_field, 1e4, [1.0, 0.0], steps=np.ones(20, dtype=int))


@pytest.fixture(scope="module")
def gate_field():
    m = StructuredWell()
    c = SpectrumCache(m, lmax=1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        _, fine = path_holonomy(m, rectangle_path(0.3, 0.5, 0.0, 0.02, 64), "analytic", c)
    return build_field(m, fine.path.mapped_to(100.0), "analytic", provider=c)


def test_adiabatic_output_follows_holonomy(gate_field):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = integrate_coupled(gate_field, 1e5, [1.0, 0.0])
    assert res.fidelity >= 0.999
    assert math.isclose(abs(res.holonomy.U[1, 0]), abs(np.sin(res.holonomy.alpha)), abs_tol=1e-12)
    U_path = partial_holonomies(gate_field)
    np.testing.assert_allclose(U_path[-1], res.holonomy.U, atol=1e-12)


def test_omega_and_validity(gate_field):
    om = assemble_omega(gate_field)
    assert np.all(om.delta > 0.0)
    rep = validity_report(gate_field, 1e4)
    assert set(rep.flags) >= {"adiabatic", "wkb"}
