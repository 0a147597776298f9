"""Longitudinal propagation of mode amplitudes along y.

The coupled-mode equation (d_y + K_y)^2 C + (eps - Omega_y) C = 0 is
integrated as the first-order system

    C' = D - K C,    D' = -K D - (eps - Omega) C,     D = C' + K C,

with fixed-step RK4. On every path segment K_y and Omega_y are quadratic in
y through the values at the two ends and the midpoint. The entry condition
D(Y0) = i sqrt(eps - Omega) C0 selects the right-moving branch.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .connection import ConnectionField
from .errors import DivergenceError, EvanescentError, StepSizeError, ValidationError
from .holonomy import Holonomy, ordered_exponential

STEP_RULE = 0.1
STEP_LIMIT = 0.2
ADIABATIC_THRESHOLD = 0.1
WKB_THRESHOLD = 0.01
DEGENERACY_THRESHOLD = 0.1


@dataclass(frozen=True)
class ModeState:
    y: float
    C: np.ndarray
    dC: np.ndarray
    epsilon: float

    def __post_init__(self):
        C = np.asarray(self.C, dtype=complex)
        dC = np.asarray(self.dC, dtype=complex)
        if C.shape != dC.shape or C.ndim != 1:
            raise ValidationError("C and dC must be vectors of equal length")
        if not (np.all(np.isfinite(C)) and np.all(np.isfinite(dC))):
            raise DivergenceError(f"non-finite amplitudes at y={self.y}")
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "dC", dC)


@dataclass(frozen=True)
class OmegaSamples:
    """Diagonal of Omega_y at path samples (and segment midpoints)."""

    y: np.ndarray
    energies: np.ndarray
    mid_energies: np.ndarray | None = None

    @property
    def omega(self) -> np.ndarray:
        """(eps0 + eps1) / 2."""
        return 0.5 * (self.energies[:, 0] + self.energies[:, 1])

    @property
    def delta(self) -> np.ndarray:
        """eps1 - eps0."""
        return self.energies[:, 1] - self.energies[:, 0]

    def matrices(self) -> np.ndarray:
        return np.array([np.diag(e) for e in self.energies])


def assemble_omega(field: ConnectionField, levels: int | None = None) -> OmegaSamples:
    """Omega_y from the spectra carried by a connection field."""
    k = field.levels if levels is None else levels
    E = np.asarray(field.energies)[:, :k]
    if np.any(np.diff(E, axis=1) <= 0.0):
        raise ValidationError("Omega diagonal must be strictly increasing")
    mid = None if field.mid_energies is None else np.asarray(field.mid_energies)[:, :k]
    return OmegaSamples(field.path.y.copy(), E, mid)


def fidelity(a: np.ndarray, b: np.ndarray) -> float:
    """|<a|b>| / (||a|| ||b||)."""
    a = np.asarray(a, dtype=complex)
    b = np.asarray(b, dtype=complex)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(min(1.0, abs(np.vdot(a, b)) / (na * nb)))


# ---------------------------------------------------------------------------
# integrator kernels
# ---------------------------------------------------------------------------


@njit(cache=True, inline="always")
def _quad(f0, fm, f1, t):
    return f0 * (1.0 - t) * (1.0 - 2.0 * t) + 4.0 * fm * t * (1.0 - t) + f1 * t * (2.0 * t - 1.0)


@njit(cache=True, inline="always")
def _dquad(f0, fm, f1, t):
    return f0 * (4.0 * t - 3.0) + fm * (4.0 - 8.0 * t) + f1 * (4.0 * t - 1.0)


@njit(cache=True)
def _rhs_covariant(K, W, C, D):
    return D - K @ C, -(K @ D) - W * C


@njit(cache=True)
def _rhs_expanded(K, dK, W, C, D):
    # here D = C'; C'' = -2 K C' - (K' + K^2) C - (eps - Omega) C
    G = dK + K @ K
    return D, -2.0 * (K @ D) - G @ C - W * C


@njit(cache=True, nogil=True)
def _propagate(Ks, Ws, dys, steps, C0, D0, expanded):
    """RK4 over segments; Ks: (S, 3, k, k) K_y at start/mid/end; Ws: (S, 3, k) eps - Omega."""
    S = Ks.shape[0]
    k = C0.shape[0]
    Cs = np.zeros((S + 1, k), dtype=np.complex128)
    Ds = np.zeros((S + 1, k), dtype=np.complex128)
    C = C0.copy()
    D = D0.copy()
    Cs[0] = C
    Ds[0] = D
    for s in range(S):
        n = steps[s]
        h = 1.0 / n
        dy = dys[s]
        K0 = Ks[s, 0].astype(np.complex128)
        Km = Ks[s, 1].astype(np.complex128)
        K1 = Ks[s, 2].astype(np.complex128)
        W0 = Ws[s, 0].astype(np.complex128)
        Wm = Ws[s, 1].astype(np.complex128)
        W1 = Ws[s, 2].astype(np.complex128)
        for j in range(n):
            t = j * h
            ta = t
            tb = t + 0.5 * h
            tc = t + h
            Ka = _quad(K0, Km, K1, ta)
            Kb = _quad(K0, Km, K1, tb)
            Kc = _quad(K0, Km, K1, tc)
            Wa = _quad(W0, Wm, W1, ta)
            Wb = _quad(W0, Wm, W1, tb)
            Wc = _quad(W0, Wm, W1, tc)
            hy = h * dy
            if expanded:
                dKa = _dquad(K0, Km, K1, ta) / dy
                dKb = _dquad(K0, Km, K1, tb) / dy
                dKc = _dquad(K0, Km, K1, tc) / dy
                k1c, k1d = _rhs_expanded(Ka, dKa, Wa, C, D)
                k2c, k2d = _rhs_expanded(Kb, dKb, Wb, C + 0.5 * hy * k1c, D + 0.5 * hy * k1d)
                k3c, k3d = _rhs_expanded(Kb, dKb, Wb, C + 0.5 * hy * k2c, D + 0.5 * hy * k2d)
                k4c, k4d = _rhs_expanded(Kc, dKc, Wc, C + hy * k3c, D + hy * k3d)
            else:
                k1c, k1d = _rhs_covariant(Ka, Wa, C, D)
                k2c, k2d = _rhs_covariant(Kb, Wb, C + 0.5 * hy * k1c, D + 0.5 * hy * k1d)
                k3c, k3d = _rhs_covariant(Kb, Wb, C + 0.5 * hy * k2c, D + 0.5 * hy * k2d)
                k4c, k4d = _rhs_covariant(Kc, Wc, C + hy * k3c, D + hy * k3d)
            C = C + hy / 6.0 * (k1c + 2.0 * k2c + 2.0 * k3c + k4c)
            D = D + hy / 6.0 * (k1d + 2.0 * k2d + 2.0 * k3d + k4d)
        Cs[s + 1] = C
        Ds[s + 1] = D
    return Cs, Ds


def _segment_tables(field: ConnectionField, omega: OmegaSamples, epsilon: float):
    """K_y and eps - Omega at start/mid/end of every segment."""
    path = field.path
    dy = np.diff(path.y)
    dR = path.segment_vectors()
    C = field.components()
    k = omega.energies.shape[1]
    C = C[:, :, :k, :k]
    if field.midpoints is not None:
        Cm = np.array([s.components for s in field.midpoints])[:, :, :k, :k]
    else:
        Cm = 0.5 * (C[1:] + C[:-1])
    v = dR / dy[:, None]
    Ks = np.empty((len(dy), 3, k, k))
    Ks[:, 0] = np.einsum("si,sikl->skl", v, C[:-1])
    Ks[:, 1] = np.einsum("si,sikl->skl", v, Cm)
    Ks[:, 2] = np.einsum("si,sikl->skl", v, C[1:])
    E = omega.energies
    Em = omega.mid_energies if omega.mid_energies is not None else 0.5 * (E[1:] + E[:-1])
    Ws = np.empty((len(dy), 3, k))
    Ws[:, 0] = epsilon - E[:-1]
    Ws[:, 1] = epsilon - Em
    Ws[:, 2] = epsilon - E[1:]
    return Ks, Ws, dy


def step_counts(dy: np.ndarray, epsilon: float, Ks: np.ndarray | None = None, rule: float = STEP_RULE) -> np.ndarray:
    """Substeps per segment so that sqrt(eps) dy and ||K_y|| dy stay below ``rule``."""
    rate = np.full(len(dy), math.sqrt(epsilon))
    if Ks is not None and len(Ks):
        knorm = np.max(np.abs(Ks), axis=(1, 2, 3)) * Ks.shape[-1]
        rate = np.maximum(rate, knorm)
    return np.maximum(1, np.ceil(rate * dy / rule)).astype(np.int64)


# ---------------------------------------------------------------------------
# phases and predictions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WKBPhase:
    refined: complex
    crude: complex
    integral: float
    sign: int

    @property
    def difference(self) -> float:
        """Integral of sqrt(eps) - sqrt(eps - omega)."""
        return float(self.sign * (np.angle(self.crude) - np.angle(self.refined)))


def wkb_phase_integral(y: np.ndarray, omega: np.ndarray, epsilon: float, omega_mid: np.ndarray | None = None) -> float:
    """Integral of sqrt(eps - omega) over y (Simpson per segment when midpoints exist)."""
    y = np.asarray(y, dtype=float)
    omega = np.asarray(omega, dtype=float)
    if np.any(epsilon - omega <= 0.0) or (omega_mid is not None and np.any(epsilon - omega_mid <= 0.0)):
        raise EvanescentError("eps - omega <= 0 on the path: the mode is evanescent")
    f = np.sqrt(epsilon - omega)
    if len(y) < 2:
        return 0.0
    dy = np.diff(y)
    if omega_mid is None:
        return float(np.sum(0.5 * dy * (f[1:] + f[:-1])))
    fm = np.sqrt(epsilon - np.asarray(omega_mid))
    return float(np.sum(dy / 6.0 * (f[:-1] + 4.0 * fm + f[1:])))


def wkb_propagator(omega: OmegaSamples, epsilon: float, sign: int = +1) -> WKBPhase:
    """exp(+-i int sqrt(eps - omega) dy) and the crude exp(+-i sqrt(eps) (Y - Y0))."""
    if sign not in (1, -1):
        raise ValidationError("sign must be +1 or -1")
    mid = None
    if omega.mid_energies is not None:
        mid = 0.5 * (omega.mid_energies[:, 0] + omega.mid_energies[:, 1]) if omega.energies.shape[1] > 1 else omega.mid_energies[:, 0]
    om = omega.omega if omega.energies.shape[1] > 1 else omega.energies[:, 0]
    I = wkb_phase_integral(omega.y, om, epsilon, mid)
    span = float(omega.y[-1] - omega.y[0])
    return WKBPhase(np.exp(1j * sign * I), np.exp(1j * sign * math.sqrt(epsilon) * span), I, sign)


def predict_output(C0, U, phase: complex = 1.0) -> np.ndarray:
    """phase * U @ C0."""
    U = U.U if isinstance(U, Holonomy) else np.asarray(U)
    C0 = np.asarray(C0, dtype=complex)
    if U.shape[1] != C0.shape[0]:
        raise ValidationError(f"holonomy of dimension {U.shape[1]} cannot act on {C0.shape[0]} amplitudes")
    return phase * (U @ C0)


def gauge_transform(C: np.ndarray, Us: np.ndarray) -> np.ndarray:
    """C~_y = U_y^dagger C_y for stacks C (M, k) and Us (M, k, k)."""
    return np.einsum("mji,mj->mi", np.conj(Us), np.asarray(C, dtype=complex))


def partial_holonomies(field: ConnectionField, levels: int | None = None) -> np.ndarray:
    """U_{Y0 -> y_m} at every path sample (midpoint-rule products)."""
    gens = field.segment_generators()
    k = field.levels if levels is None else levels
    gens = gens[:, :k, :k]
    from scipy.linalg import expm

    out = np.empty((len(gens) + 1, k, k), dtype=complex)
    U = np.eye(k, dtype=complex)
    out[0] = U
    for m, G in enumerate(gens):
        U = expm(-G) @ U
        out[m + 1] = U
    return out


# ---------------------------------------------------------------------------
# validity
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ValidityReport:
    adiabatic: dict
    degeneracy_ratio: float
    wkb_ratio: float
    max_K_step: float
    max_phase_step: float
    thresholds: dict
    flags: dict

    def __post_init__(self):
        vals = list(self.adiabatic.values()) + [self.degeneracy_ratio, self.wkb_ratio, self.max_K_step, self.max_phase_step]
        if any(not (v >= 0.0) for v in vals if not np.isnan(v)):
            raise ValidationError("validity metrics must be non-negative")

    @property
    def ok(self) -> bool:
        return not any(self.flags.values())

    def to_dict(self) -> dict:
        return {
            "adiabatic": {f"{a},{b}": float(v) for (a, b), v in sorted(self.adiabatic.items())},
            "degeneracy_ratio": float(self.degeneracy_ratio),
            "wkb_ratio": float(self.wkb_ratio),
            "max_K_step": float(self.max_K_step),
            "max_phase_step": float(self.max_phase_step),
            "thresholds": self.thresholds,
            "flags": self.flags,
        }


def validity_report(
    field: ConnectionField,
    epsilon: float,
    l0: int = 1,
    l_off: int = 1,
    steps: np.ndarray | None = None,
    adiabatic_threshold: float = ADIABATIC_THRESHOLD,
    wkb_threshold: float = WKB_THRESHOLD,
    degeneracy_threshold: float = DEGENERACY_THRESHOLD,
) -> ValidityReport:
    """Adiabatic cutoff integrals, quasi-degeneracy ratio, WKB ratio and step maxima.

    The cutoff integrals need levels above ``l_off`` in the field; pairs that
    are not available are omitted and the degeneracy ratio becomes NaN.
    """
    if not 0 <= l0 <= l_off:
        raise ValidationError("need 0 <= l0 <= l_off")
    path = field.path
    gens = field.segment_generators()  # K . dR = K_y dy per segment
    k = field.levels
    adiabatic = {}
    for l in range(l_off + 1, k):
        for lp in range(l0 + 1):
            adiabatic[(l, lp)] = float(np.sum(np.abs(gens[:, l, lp])))
    E = np.asarray(field.energies)
    if k > l_off + 1:
        ratio = float(np.max((E[:, l0] - E[:, 0]) / (E[:, l_off + 1] - E[:, l0])))
    else:
        ratio = float("nan")
    # <phi|d_y V|phi> = d eps / dy
    if len(path) > 1:
        dE = np.gradient(E[:, : l_off + 1], path.y, axis=0)
        wkb = float(np.max(np.abs(dE)) / (2.0 * epsilon**1.5))
    else:
        wkb = 0.0
    dy = np.diff(path.y)
    if steps is None:
        steps = np.ones(len(dy), dtype=np.int64)
    h = dy / steps if len(dy) else dy
    kstep = float(np.max([np.linalg.norm(g[: l_off + 1, : l_off + 1], 2) / n for g, n in zip(gens, steps)], initial=0.0))
    pstep = float(np.max(math.sqrt(epsilon) * h, initial=0.0))
    thresholds = {"adiabatic": adiabatic_threshold, "wkb": wkb_threshold, "degeneracy": degeneracy_threshold, "step": STEP_RULE}
    flags = {
        "adiabatic": any(v > adiabatic_threshold for v in adiabatic.values()),
        "degeneracy": bool(np.isfinite(ratio) and ratio > degeneracy_threshold),
        "wkb": wkb > wkb_threshold,
        "step": kstep > STEP_RULE or pstep > STEP_LIMIT,
    }
    return ValidityReport(adiabatic, ratio, wkb, kstep, pstep, thresholds, flags)


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PropagationResult:
    final: ModeState
    predicted: np.ndarray
    fidelity: float
    leakage: float
    dynamical_phase: float
    holonomy: Holonomy
    validity: ValidityReport
    trace_y: np.ndarray = field(repr=False)
    trace_C: np.ndarray = field(repr=False)
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not 0.0 <= self.fidelity <= 1.0:
            raise ValidationError("fidelity must lie in [0, 1]")

    def report(self) -> dict:
        return {
            "epsilon": self.final.epsilon,
            "alpha": self.holonomy.alpha,
            "fidelity": self.fidelity,
            "leakage": self.leakage,
            "dynamical_phase": self.dynamical_phase,
            "validity": self.validity.to_dict(),
            "final_C": [[float(z.real), float(z.imag)] for z in self.final.C],
            "predicted_C": [[float(z.real), float(z.imag)] for z in self.predicted],
            **self.meta,
        }

    def trace_rows(self) -> np.ndarray:
        """Columns y, |C_0|^2, |C_1|^2, ..."""
        return np.column_stack([self.trace_y, np.abs(self.trace_C) ** 2])


def integrate_coupled(
    field: ConnectionField,
    epsilon: float,
    C0,
    omega: OmegaSamples | None = None,
    subspace: int | None = None,
    step_rule: float = STEP_RULE,
    steps: np.ndarray | None = None,
    form: str = "covariant",
    max_step_norm: float = 0.1,
    thresholds: dict | None = None,
) -> PropagationResult:
    """Propagate C0 from Y0 to Y along the field's path.

    ``subspace`` is the number of lowest levels on which fidelity is measured
    (default: all levels carried by ``C0``); weight outside it is leakage.
    ``thresholds`` are passed to :func:`validity_report` (keys
    adiabatic_threshold, wkb_threshold, degeneracy_threshold).
    """
    C0 = np.asarray(C0, dtype=complex)
    k = len(C0)
    if k > field.levels:
        raise ValidationError(f"C0 has {k} amplitudes but the field carries {field.levels} levels")
    if np.linalg.norm(C0) == 0.0:
        raise ValidationError("C0 must be non-zero")
    if form not in ("covariant", "expanded"):
        raise ValidationError("form must be 'covariant' or 'expanded'")
    fld = field if k == field.levels else field.truncated(range(k))
    omega = omega if omega is not None else assemble_omega(fld, k)
    E = omega.energies
    if np.any(epsilon - E <= 0.0):
        raise EvanescentError(f"eps={epsilon} does not exceed every transverse level on the path")
    if epsilon < 10.0 * np.max(E):
        warnings.warn(f"eps={epsilon:g} is not much larger than max level {np.max(E):.3g}", RuntimeWarning, stacklevel=2)
    path = fld.path
    Ks, Ws, dy = _segment_tables(fld, omega, epsilon)
    if steps is None:
        steps = step_counts(dy, epsilon, Ks, step_rule)
    else:
        steps = np.asarray(steps, dtype=np.int64)
        if np.any(math.sqrt(epsilon) * dy / steps > STEP_LIMIT):
            raise StepSizeError(f"sqrt(eps) dy exceeds {STEP_LIMIT}; use more substeps")
    W0 = epsilon - E[0]
    if form == "covariant":
        D0 = 1j * np.sqrt(W0) * C0
    else:
        K0 = Ks[0, 0] if len(Ks) else np.zeros((k, k))
        D0 = 1j * np.sqrt(W0) * C0 - K0 @ C0
    Cs, Ds = _propagate(Ks, Ws, dy, steps, C0, D0, form == "expanded")
    if not (np.all(np.isfinite(Cs)) and np.all(np.isfinite(Ds))):
        raise DivergenceError("amplitudes diverged during propagation")
    C_end = Cs[-1]
    if form == "covariant":
        dC_end = Ds[-1] - (Ks[-1, 2] @ C_end if len(Ks) else 0.0)
    else:
        dC_end = Ds[-1]
    final = ModeState(float(path.Y), C_end, dC_end, float(epsilon))
    hol = ordered_exponential(fld, max_step_norm)
    wkb = wkb_propagator(omega, epsilon, +1)
    predicted = predict_output(C0, hol, wkb.refined)
    m = k if subspace is None else subspace
    total = float(np.linalg.norm(C_end) ** 2)
    leakage = float(np.linalg.norm(C_end[m:]) ** 2 / total) if total > 0 else 0.0
    F = fidelity(predicted[:m], C_end[:m])
    report = validity_report(field, epsilon, l0=min(k, 2) - 1, l_off=k - 1, steps=steps, **(thresholds or {}))
    meta = {"form": form, "steps": int(np.sum(steps)), "levels": k, "subspace": m}
    return PropagationResult(final, predicted, F, leakage, wkb.integral, hol, report, path.y.copy(), Cs, meta)
