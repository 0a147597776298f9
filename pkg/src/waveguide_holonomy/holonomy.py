"""Holonomic unitaries from connection fields.

The ordered exponential multiplies exp(-K(R_mid) . Delta R) over path
segments, later segments to the left. For two levels the result is the
rotation exp(-i alpha sigma_2) = [[cos a, -sin a], [sin a, cos a]] with
alpha the line integral of lambda = K_01.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import expm

from .connection import ConnectionField, antisymmetrize, build_field, connection_at, lambda_field
from .errors import DomainError, NumericalError, StepSizeError, ValidationError
from .potential import ControlPath, ControlVector, PotentialModel
from .spectrum import SpectrumCache

UNITARITY_TOL = 1e-8
MAX_STEP_NORM = 0.1
COMMUTE_TOL = 1e-10

SIGMA2 = np.array([[0.0, -1.0j], [1.0j, 0.0]])


def rotation(alpha: float) -> np.ndarray:
    """[[cos a, -sin a], [sin a, cos a]], i.e. exp(-i a sigma_2)."""
    c, s = np.cos(alpha), np.sin(alpha)
    return np.array([[c, -s], [s, c]], dtype=complex)


@dataclass(frozen=True)
class Holonomy:
    U: np.ndarray
    alpha: float | None = None
    method: str = "ordered-exponential"
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        U = np.array(self.U, dtype=complex)
        if U.ndim != 2 or U.shape[0] != U.shape[1]:
            raise ValidationError("holonomy matrix must be square")
        err = unitarity_error(U)
        if not err <= UNITARITY_TOL:
            raise NumericalError(f"holonomy is not unitary: max|U^dag U - I| = {err:.3e}")
        if self.alpha is not None:
            if U.shape[0] < 2 or np.max(np.abs(U[:2, :2] - rotation(self.alpha))) > UNITARITY_TOL:
                raise NumericalError("alpha does not match the (0,1) block of U")
        U.setflags(write=False)
        object.__setattr__(self, "U", U)

    @property
    def dim(self) -> int:
        return self.U.shape[0]

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "method": self.method,
            "alpha": self.alpha,
            "U": [[[float(z.real), float(z.imag)] for z in row] for row in self.U],
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Holonomy":
        U = np.array([[complex(re, im) for re, im in row] for row in d["U"]])
        return cls(U, d.get("alpha"), d.get("method", "ordered-exponential"), d.get("meta", {}))

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


def unitarity_error(U: np.ndarray) -> float:
    U = np.asarray(U)
    return float(np.max(np.abs(U.conj().T @ U - np.eye(U.shape[0]))))


def identity(dim: int) -> Holonomy:
    return Holonomy(np.eye(dim, dtype=complex), 0.0 if dim >= 2 else None, "identity")


def _alpha_if_abelian(gens: np.ndarray, tol: float) -> float | None:
    """Sum of the (0,1) entries when every generator lives in that block."""
    k = gens.shape[-1]
    if k < 2:
        return None
    if k > 2:
        rest = gens.copy()
        rest[:, 0, 1] = rest[:, 1, 0] = 0.0
        if np.max(np.abs(rest), initial=0.0) > tol:
            return None
    return float(np.sum(gens[:, 0, 1]))


def required_refinement(gens: np.ndarray, max_step: float = MAX_STEP_NORM) -> int:
    """Smallest integer subdivision of every segment that meets the step bound."""
    if len(gens) == 0:
        return 1
    worst = float(max(np.linalg.norm(g, 2) for g in gens))
    return max(1, int(np.ceil(worst / max_step)))


def ordered_product(gens: np.ndarray) -> np.ndarray:
    """exp(-G_{M-1}) ... exp(-G_0)."""
    k = gens.shape[-1] if len(gens) else 0
    U = np.eye(k)
    for G in gens:
        U = expm(-G) @ U
    return U


def ordered_exponential(
    field: ConnectionField,
    max_step: float = MAX_STEP_NORM,
    commute_tol: float = COMMUTE_TOL,
) -> Holonomy:
    """Path-ordered exponential of -K along the field's path (midpoint rule)."""
    gens = field.segment_generators()
    if len(gens):
        norms = np.array([np.linalg.norm(g, 2) for g in gens])
        if norms.max() > max_step:
            j = int(np.argmax(norms))
            raise StepSizeError(
                f"segment {j}: ||K . dR|| = {norms[j]:.3g} exceeds {max_step}; "
                f"refine the path by a factor >= {required_refinement(gens, max_step)}"
            )
    U = ordered_product(gens) if len(gens) else np.eye(field.levels)
    alpha = _alpha_if_abelian(gens, commute_tol) if len(gens) else (0.0 if field.levels >= 2 else None)
    meta = {
        "samples": len(field.path),
        "closed": field.path.closed,
        "connection": field.method,
        "path": field.path.meta,
    }
    return Holonomy(U.astype(complex), alpha, "ordered-exponential", meta)


def path_holonomy(
    model: PotentialModel,
    path: ControlPath,
    method: str = "analytic",
    provider: SpectrumCache | None = None,
    max_step: float = MAX_STEP_NORM,
    max_refine: int = 64,
    **kwargs,
) -> tuple[Holonomy, ConnectionField]:
    """Build the field and its holonomy, subdividing the path until the step bound holds."""
    lmax, N = kwargs.pop("lmax", 2), kwargs.pop("N", 2000)
    if provider is None:
        provider = SpectrumCache(model, lmax, N)
    factor = 1
    current = path
    while True:
        fld = build_field(model, current, method, provider=provider, **kwargs)
        need = required_refinement(fld.segment_generators(), max_step)
        if need == 1:
            return ordered_exponential(fld, max_step), fld
        factor *= need
        if factor > max_refine:
            raise StepSizeError(f"path needs more than {max_refine}x refinement to meet the step bound")
        current = path.refined(factor)


def abelian_phase_line(field: ConnectionField) -> float:
    """alpha = sum over segments of lambda(midpoint) . Delta R, in traversal order."""
    if field.levels < 2:
        raise ValidationError("the abelian phase needs at least levels 0 and 1")
    if not field.path.closed:
        warnings.warn("open path: alpha depends on the endpoints and is not geometric", RuntimeWarning, stacklevel=2)
    lam = lambda_field(field)
    return float(np.sum(lam * field.path.segment_vectors()))


@dataclass(frozen=True)
class LambdaGrid:
    """lambda = (K_01 along L, K_01 along w) sampled on a tensor grid."""

    L: np.ndarray
    w: np.ndarray
    values: np.ndarray  # (nL, nw, 2)

    def __post_init__(self):
        if self.values.shape != (len(self.L), len(self.w), 2):
            raise ValidationError("lambda grid values must have shape (nL, nw, 2)")

    def index(self, v: float, axis: np.ndarray, name: str) -> int:
        j = int(np.argmin(np.abs(axis - v)))
        scale = max(1.0, float(np.max(np.abs(axis))))
        if abs(axis[j] - v) > 1e-9 * scale:
            if v < axis.min() or v > axis.max():
                raise DomainError(f"{name}={v} lies outside the sampled window [{axis.min()}, {axis.max()}]")
            raise DomainError(f"{name}={v} is not a grid node of the sampled window")
        return j


def sample_lambda_grid(
    model: PotentialModel,
    L: np.ndarray,
    w: np.ndarray,
    method: str = "analytic",
    provider: SpectrumCache | None = None,
) -> LambdaGrid:
    if provider is None:
        provider = SpectrumCache(model)
    L = np.asarray(L, dtype=float)
    w = np.asarray(w, dtype=float)
    vals = np.zeros((len(L), len(w), 2))
    for i, Li in enumerate(L):
        for j, wj in enumerate(w):
            R = ControlVector((float(Li), float(wj)))
            vals[i, j] = connection_at(model, R, method, provider)[:, 0, 1]
    return LambdaGrid(L, w, vals)


def scalar_curl(grid: LambdaGrid) -> np.ndarray:
    """d lambda_w / dL - d lambda_L / dw on the grid (second-order differences)."""
    dlw_dL = np.gradient(grid.values[:, :, 1], grid.L, axis=0, edge_order=2)
    dlL_dw = np.gradient(grid.values[:, :, 0], grid.w, axis=1, edge_order=2)
    return dlw_dL - dlL_dw


def abelian_phase_stokes(grid: LambdaGrid, L_in: float, L_fin: float, w_in: float, w_fin: float) -> float:
    """Surface integral of the curl over the rectangle traversed as in ``rectangle_path``.

    That traversal, (L_in,w_in) -> (L_in,w_fin) -> (L_fin,w_fin) -> (L_fin,w_in),
    is clockwise when L_fin > L_in and w_fin > w_in, hence the overall sign.
    """
    i0, i1 = grid.index(L_in, grid.L, "L"), grid.index(L_fin, grid.L, "L")
    j0, j1 = grid.index(w_in, grid.w, "w"), grid.index(w_fin, grid.w, "w")
    if i0 == i1 or j0 == j1:
        return 0.0
    ilo, ihi = sorted((i0, i1))
    jlo, jhi = sorted((j0, j1))
    if min(ihi - ilo, jhi - jlo) < 2:
        raise DomainError("the rectangle must span at least two grid cells in each direction")
    curl = scalar_curl(grid)[ilo : ihi + 1, jlo : jhi + 1]
    inner = np.trapezoid(curl, grid.w[jlo : jhi + 1], axis=1)
    area = float(np.trapezoid(inner, grid.L[ilo : ihi + 1]))
    return -np.sign(L_fin - L_in) * np.sign(w_fin - w_in) * area


@dataclass(frozen=True)
class CurvatureSample:
    """F_ij = d_i K_j - d_j K_i + [K_i, K_j] at one control point."""

    R: ControlVector
    F: dict

    def __post_init__(self):
        for (i, j), M in self.F.items():
            if not np.all(np.isfinite(M)):
                raise ValidationError("non-finite curvature")

    def component(self, i: int, j: int) -> np.ndarray:
        if i == j:
            n = next(iter(self.F.values())).shape[0]
            return np.zeros((n, n))
        if (i, j) in self.F:
            return self.F[(i, j)]
        return -self.F[(j, i)]

    @property
    def scalar_curl(self) -> float:
        """Two-level abelian case: d_L lambda_w - d_w lambda_L."""
        return float(self.component(0, 1)[0, 1])


def curvature(
    connection: Callable[[ControlVector], np.ndarray],
    R,
    delta: float = 1e-4,
    domain_check: Callable[[ControlVector], ControlVector] | None = None,
) -> CurvatureSample:
    """Curvature from a callable R -> K components of shape (n_controls, k, k).

    Derivatives are central where the domain allows, else second-order one-sided.
    """
    R = ControlVector(tuple(R)) if not isinstance(R, ControlVector) else R
    K0 = connection(R)
    d = len(R)

    def inside(P):
        if domain_check is None:
            return True
        try:
            domain_check(P)
            return True
        except DomainError:
            return False

    def deriv(i):
        if inside(R.shifted(i, -delta)):
            return (connection(R.shifted(i, delta)) - connection(R.shifted(i, -delta))) / (2 * delta)
        return (-3 * K0 + 4 * connection(R.shifted(i, delta)) - connection(R.shifted(i, 2 * delta))) / (2 * delta)

    dK = [deriv(i) for i in range(d)]
    F = {}
    for i in range(d):
        for j in range(i + 1, d):
            M = dK[i][j] - dK[j][i] + K0[i] @ K0[j] - K0[j] @ K0[i]
            F[(i, j)] = antisymmetrize(M)
    return CurvatureSample(R, F)


def compose(h1: Holonomy, h2: Holonomy) -> Holonomy:
    """h1 applied after h2: U = h1.U @ h2.U."""
    if h1.dim != h2.dim:
        raise ValidationError(f"cannot compose holonomies of dimension {h1.dim} and {h2.dim}")
    U = h1.U @ h2.U
    alpha = None
    if h1.alpha is not None and h2.alpha is not None:
        alpha = h1.alpha + h2.alpha
        if np.max(np.abs(U[:2, :2] - rotation(alpha))) > UNITARITY_TOL:
            alpha = None
    return Holonomy(U, alpha, "composed", {"factors": [h1.method, h2.method]})


def embed_two_level(alpha: float, levels: tuple[int, int], dim: int) -> Holonomy:
    """Identity with the (l, l') block set to exp(i alpha sigma_2) = [[cos, sin], [-sin, cos]].

    When levels == (0, 1) the stored ``alpha`` uses the class convention
    U_01 = exp(-i alpha sigma_2), so it equals minus the argument.
    """
    l, lp = levels
    if not (0 <= l < lp < dim):
        raise ValidationError(f"levels {levels} out of range for dimension {dim}")
    U = np.eye(dim, dtype=complex)
    c, s = np.cos(alpha), np.sin(alpha)
    U[l, l], U[l, lp], U[lp, l], U[lp, lp] = c, s, -s, c
    stored = -float(alpha) if (l, lp) == (0, 1) else None
    return Holonomy(U, stored, "embedded", {"angle": float(alpha), "levels": [l, lp]})


def commutator_norm(A: np.ndarray, B: np.ndarray) -> float:
    """Frobenius norm of AB - BA."""
    return float(np.linalg.norm(A @ B - B @ A))
