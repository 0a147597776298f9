"""Transverse eigenproblem -phi'' + V(x; R) phi = eps phi with Dirichlet walls.

Second-order central differences on a uniform grid of N interior nodes over
[0, D(R)]. Step potentials enter through averages against a narrow Gaussian (width 1.5 h),
so the discrete operator is a smooth function of the step positions and finite
differences in R converge without grid-crossing kinks.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import _tridiag
from .errors import DegeneracyError, GaugeTrackingError, ResolutionError, SolverError, ValidationError
from .potential import ControlVector, PotentialModel

DEFAULT_N = 2000
RESIDUAL_TOL = 1e-10
DEGENERACY_GAP = 1e-8
POINTS_PER_HALF_WAVE = 20
GAUGE_MIN_OVERLAP = 0.5
INVERSE_ITERATIONS = 3
BISECTION_RTOL = 1e-9


@dataclass(frozen=True)
class SpectralSolution:
    """Lowest eigenpairs at one control point.

    ``states[:, l]`` is phi^(l) on the interior nodes ``x``, normalised so that
    the trapezoid rule over [0, D] (walls included as zeros) gives 1.
    ``residuals`` are ||T v - eps v|| / ||T|| for unit Euclidean vectors.
    """

    R: ControlVector
    x: np.ndarray
    h: float
    extent: float
    energies: np.ndarray
    states: np.ndarray
    residuals: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def levels(self) -> int:
        return len(self.energies)

    @property
    def N(self) -> int:
        return len(self.x)

    def padded(self):
        """Grid and states including the two wall nodes."""
        X = np.concatenate([[0.0], self.x, [self.extent]])
        Phi = np.vstack([np.zeros(self.levels), self.states, np.zeros(self.levels)])
        return X, Phi

    def value_at(self, xq: float, level: int) -> float:
        """phi^(level)(xq) by quadratic interpolation through the three nearest nodes."""
        if not 0.0 <= xq <= self.extent:
            return 0.0
        X, Phi = self.padded()
        j = int(round(xq / self.h))
        j = min(max(j, 1), len(X) - 2)
        t = (xq - X[j]) / self.h
        f0, f1, f2 = Phi[j - 1, level], Phi[j, level], Phi[j + 1, level]
        return float(f1 + 0.5 * t * (f2 - f0) + 0.5 * t * t * (f2 - 2.0 * f1 + f0))

    def wall_derivative(self, level: int, side: str = "right") -> float:
        """One-sided second-order d phi / dx at a wall, using phi = 0 there."""
        v = self.states[:, level]
        if side == "right":
            return float((-4.0 * v[-1] + v[-2]) / (2.0 * self.h))
        return float((4.0 * v[0] - v[1]) / (2.0 * self.h))

    def orthonormality_residual(self) -> float:
        G = self.h * self.states.T @ self.states
        return float(np.max(np.abs(G - np.eye(self.levels))))

    def to_csv(self, path) -> None:
        X, Phi = self.padded()
        header = "x," + ",".join(f"phi{l}" for l in range(self.levels))
        np.savetxt(path, np.column_stack([X, Phi]), delimiter=",", header=header, comments="", fmt="%.12e")

    def metadata(self) -> dict:
        return {
            "R": list(self.R.components),
            "N": self.N,
            "extent": self.extent,
            "energies": [float(e) for e in self.energies],
            "residuals": [float(r) for r in self.residuals],
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.metadata(), fh, indent=2, sort_keys=True)


def eigensolve(
    model: PotentialModel,
    R,
    lmax: int = 2,
    N: int = DEFAULT_N,
    *,
    residual_tol: float = RESIDUAL_TOL,
    degeneracy_gap: float = DEGENERACY_GAP,
    check_resolution: bool = True,
) -> SpectralSolution:
    """Lowest ``lmax + 1`` eigenpairs of the transverse Hamiltonian at ``R``.

    The returned states are sign-fixed by :func:`fix_gauge` with no reference.
    """
    if lmax < 0:
        raise ValidationError("lmax must be >= 0")
    R = model.check(R)
    k = lmax + 1
    if N < k + 2:
        raise ResolutionError(f"N={N} is too small for {k} levels")
    D = model.extent(R)
    if D <= 0.0:
        raise ValidationError("well extent must be positive")
    h = D / (N + 1)
    x = h * np.arange(1, N + 1)
    V = model.grid_potential(x, h, R)
    # h^2 H = tridiag(-1, 2, -1) + diag(h^2 V)
    delta = h * h * V
    mus, vecs, res = _tridiag.laplacian_eigenpairs(delta, k, INVERSE_ITERATIONS, BISECTION_RTOL)
    lams = mus / h**2
    rel_res = res / float(np.max(np.abs(2.0 + delta)) + 2.0)
    if not np.all(np.isfinite(lams)) or np.any(rel_res > residual_tol):
        raise SolverError(
            f"eigen-iteration did not converge at R={R.components}: residual {rel_res.max():.3e}",
            residual=float(rel_res.max()),
        )
    gaps = np.diff(lams)
    if np.any(gaps < degeneracy_gap):
        j = int(np.argmin(gaps))
        raise DegeneracyError(f"levels {j} and {j + 1} are degenerate within {gaps[j]:.3e} at R={R.components}")
    if check_resolution:
        kmax = math.sqrt(max(lams[-1] - float(np.min(V)), 1e-300))
        per_half_wave = math.pi / (kmax * h)
        if per_half_wave < POINTS_PER_HALF_WAVE:
            raise ResolutionError(
                f"N={N} gives {per_half_wave:.1f} points per half-oscillation of level {lmax}; "
                f"need >= {POINTS_PER_HALF_WAVE}"
            )
    states = vecs / math.sqrt(h)
    sol = SpectralSolution(R, x, h, D, lams.copy(), states, rel_res, meta={"N": N})
    return fix_gauge(sol)


def _leading_sign(v: np.ndarray) -> float:
    """Sign of the first non-negligible value next to the left wall."""
    big = np.max(np.abs(v))
    idx = np.flatnonzero(np.abs(v) > 1e-10 * big)
    return 1.0 if idx.size == 0 or v[idx[0]] > 0.0 else -1.0


def fix_gauge(current: SpectralSolution, reference: SpectralSolution | None = None) -> SpectralSolution:
    """Choose the sign of each eigenfunction.

    Without a reference the slope at the left wall is made positive. With a
    reference the sign makes <phi_ref^(l) | phi^(l)> positive, which keeps the
    gauge continuous along a finely sampled path.
    """
    if reference is None:
        signs = np.array([_leading_sign(current.states[:, l]) for l in range(current.levels)])
    else:
        if reference.levels != current.levels:
            raise ValidationError("gauge reference must carry the same number of levels")
        signs = np.ones(current.levels)
        for l in range(current.levels):
            ov = overlap(reference, l, current, l)
            if abs(ov) < GAUGE_MIN_OVERLAP:
                raise GaugeTrackingError(
                    f"level {l}: overlap {ov:.3f} with reference at R={reference.R.components}; "
                    "path step too coarse or level crossing"
                )
            signs[l] = 1.0 if ov > 0.0 else -1.0
    if np.all(signs > 0.0):
        return current
    return replace(current, states=current.states * signs[None, :])


def overlap(sA: SpectralSolution, l: int, sB: SpectralSolution, lp: int) -> float:
    """Integral of phi_A^(l) phi_B^(lp) with both functions zero outside their own well.

    Both functions are linearly interpolated onto the union of the two grids
    and integrated with the trapezoid rule.
    """
    XA, PA = sA.padded()
    XB, PB = sB.padded()
    if sA is sB or (XA.shape == XB.shape and np.array_equal(XA, XB)):
        return float(np.trapezoid(PA[:, l] * PB[:, lp], XA))
    X = np.union1d(XA, XB)
    fa = np.interp(X, XA, PA[:, l], right=0.0)
    fb = np.interp(X, XB, PB[:, lp], right=0.0)
    return float(np.trapezoid(fa * fb, X))


def overlap_matrix(sA: SpectralSolution, sB: SpectralSolution) -> np.ndarray:
    """All overlaps <phi_A^(l) | phi_B^(l')> at once."""
    XA, PA = sA.padded()
    XB, PB = sB.padded()
    X = np.union1d(XA, XB)
    FA = np.column_stack([np.interp(X, XA, PA[:, l], right=0.0) for l in range(sA.levels)])
    FB = np.column_stack([np.interp(X, XB, PB[:, l], right=0.0) for l in range(sB.levels)])
    w = np.zeros_like(X)
    dx = np.diff(X)
    w[:-1] += dx / 2
    w[1:] += dx / 2
    return FA.T @ (w[:, None] * FB)


def chain_gauge(solutions: list[SpectralSolution]) -> list[SpectralSolution]:
    """Fix each solution's gauge against its predecessor, in order."""
    out: list[SpectralSolution] = []
    for sol in solutions:
        out.append(fix_gauge(sol, out[-1] if out else None))
    return out


class SpectrumCache:
    """Memoised eigensolves keyed by rounded control point.

    Sweeps and rectangle families revisit the same control points many times.
    """

    def __init__(self, model: PotentialModel, lmax: int = 2, N: int = DEFAULT_N, digits: int = 12, **kwargs):
        self.model = model
        self.lmax = lmax
        self.N = N
        self.digits = digits
        self.kwargs = kwargs
        self._store: dict[tuple, SpectralSolution] = {}
        self.hits = 0
        self.misses = 0

    def key(self, R) -> tuple:
        comps = R.components if isinstance(R, ControlVector) else tuple(np.atleast_1d(R))
        return tuple(round(float(c), self.digits) + 0.0 for c in comps)

    def __call__(self, R) -> SpectralSolution:
        key = self.key(R)
        sol = self._store.get(key)
        if sol is None:
            self.misses += 1
            sol = eigensolve(self.model, ControlVector(key), self.lmax, self.N, **self.kwargs)
            self._store[key] = sol
        else:
            self.hits += 1
        return sol

    def __len__(self):
        return len(self._store)
