"""Berry-connection matrices K^(i)(R)_{l l'} = <phi^(l) | d/dR_i phi^(l')>.

Three routes are available:

``hellmann-feynman``
    <phi^(l)| dH/dR_i |phi^(l')> / (eps^(l') - eps^(l)) with H the discrete
    Hamiltonian, differentiated exactly in R. When the extent D moves, the grid
    nodes move with it, and the states pick up the extra term
    -(dD/dR_i / D) <phi^(l)| x d/dx |phi^(l')>. In the continuum limit this is
    the boundary-term form: every moving step edge x_e contributes
    jump_e * dx_e/dR_i * phi^(l)(x_e) phi^(l')(x_e), and a moving right wall
    contributes -phi^(l)'(D) phi^(l')'(D) dD/dR_i (see :func:`boundary_terms`).
``finite-difference``
    central differences of overlaps between neighbouring control points; the
    independent check of the first route.
``analytic``
    the closed form for the structured well that keeps only the barrier-edge
    term, with the w-component set to zero. It ignores the moving-wall
    contribution, so it differs from the other two routes wherever the states
    reach the right wall.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DegeneracyError, DomainError, GaugeTrackingError, ValidationError
from .potential import ControlPath, ControlVector, PotentialModel, StructuredWell, as_control
from .spectrum import (
    DEFAULT_N,
    SpectralSolution,
    SpectrumCache,
    fix_gauge,
    overlap_matrix,
)

METHODS = ("analytic", "hellmann-feynman", "finite-difference")
DEFAULT_DELTA = 1e-4
TWO_LEVEL_THRESHOLD = 0.05


def antisymmetrize(M: np.ndarray) -> np.ndarray:
    """(M - M^T) / 2 with an exactly zero diagonal, over the last two axes."""
    A = 0.5 * (M - np.swapaxes(M, -1, -2))
    idx = np.arange(M.shape[-1])
    A[..., idx, idx] = 0.0
    return A


@dataclass(frozen=True)
class ConnectionSample:
    """Connection components at one control point, shape (n_controls, k, k)."""

    R: ControlVector
    components: np.ndarray

    def __post_init__(self):
        K = np.asarray(self.components, dtype=float)
        if K.ndim != 3 or K.shape[1] != K.shape[2]:
            raise ValidationError("connection components must have shape (n_controls, k, k)")
        if not np.all(np.isfinite(K)):
            raise ValidationError(f"non-finite connection at R={self.R.components}")
        K = antisymmetrize(K)
        K.setflags(write=False)
        object.__setattr__(self, "components", K)

    @property
    def levels(self) -> int:
        return self.components.shape[1]

    def along(self, dR: np.ndarray) -> np.ndarray:
        """K . dR."""
        return np.tensordot(np.asarray(dR, dtype=float), self.components, axes=(0, 0))


# ---------------------------------------------------------------------------
# single-point routes
# ---------------------------------------------------------------------------


def _gap_matrix(energies: np.ndarray, guard: float) -> np.ndarray:
    gaps = energies[None, :] - energies[:, None]
    off = ~np.eye(len(energies), dtype=bool)
    if np.any(np.abs(gaps[off]) < guard):
        raise DegeneracyError("energy gap below the degeneracy guard")
    inv = np.zeros_like(gaps)
    inv[off] = 1.0 / gaps[off]
    return inv


def dH_matrix(model: PotentialModel, spectral: SpectralSolution, direction: int) -> np.ndarray:
    """<phi^(l)| dH/dR_i |phi^(l')> for the discrete Hamiltonian at fixed node index."""
    P = spectral.states
    h = spectral.h
    dh = h * model.wall_gradient(spectral.R)[direction] / spectral.extent
    dV = model.grid_potential_gradient(spectral.x, h, spectral.R, direction)
    M = h * P.T @ (dV[:, None] * P)
    if dh != 0.0:
        # kinetic part (2 phi_j - phi_{j-1} - phi_{j+1}) / h^2 scales as h^-2
        Pp = np.pad(P, ((1, 1), (0, 0)))
        lap = 2.0 * P - Pp[2:] - Pp[:-2]
        M -= 2.0 * dh / h**2 * (P.T @ lap)
    return M


def _dilation_matrix(spectral: SpectralSolution) -> np.ndarray:
    """<phi^(l)| x d/dx |phi^(l')> with central differences."""
    Pp = np.pad(spectral.states, ((1, 1), (0, 0)))
    dP = (Pp[2:] - Pp[:-2]) / 2.0
    return spectral.states.T @ (spectral.x[:, None] * dP)


def boundary_terms(model: PotentialModel, spectral: SpectralSolution, direction: int) -> np.ndarray:
    """Continuum <phi^(l)| dH/dR_i |phi^(l')> of a piecewise-constant well.

    Step edges contribute jump * dx_e/dR_i * phi^(l)(x_e) phi^(l')(x_e) with the
    states interpolated quadratically at x_e; the right wall contributes
    -phi^(l)'(D) phi^(l')'(D) dD/dR_i. Agrees with the discrete form up to
    O(h^2).
    """
    k = spectral.levels
    M = np.zeros((k, k))
    for edge in model.edges(spectral.R):
        g = edge.gradient[direction]
        if g == 0.0:
            continue
        vals = np.array([spectral.value_at(edge.position, l) for l in range(k)])
        M += edge.jump * g * np.outer(vals, vals)
    dD = model.wall_gradient(spectral.R)[direction]
    if dD != 0.0:
        slopes = np.array([spectral.wall_derivative(l, "right") for l in range(k)])
        M -= dD * np.outer(slopes, slopes)
    return M


def connection_hf(
    model: PotentialModel,
    R,
    spectral: SpectralSolution,
    direction: int,
    degeneracy_gap: float = 1e-8,
) -> np.ndarray:
    """Hellmann-Feynman connection matrix along control ``direction``."""
    R = as_control(R)
    if not np.allclose(spectral.R.components, R.components, rtol=0.0, atol=1e-9):
        raise ValidationError("spectral solution belongs to a different control point")
    inv = _gap_matrix(spectral.energies, degeneracy_gap)
    K = dH_matrix(model, spectral, direction) * inv
    dD = model.wall_gradient(spectral.R)[direction]
    if dD != 0.0:
        K -= dD / spectral.extent * _dilation_matrix(spectral)
    return antisymmetrize(K)


def connection_analytic(model: StructuredWell, spectral: SpectralSolution) -> np.ndarray:
    """Closed form for the structured well: barrier-edge term only, no w-component.

    Returns shape (2, k, k) with K^(L)_{l l'} = V0 phi^(l)(a/2+L) phi^(l')(a/2+L)
    / (eps^(l') - eps^(l)) and K^(w) = 0.
    """
    if not isinstance(model, StructuredWell):
        raise ValidationError("the analytic connection exists only for the structured well")
    xs = model.barrier_edge(spectral.R)
    k = spectral.levels
    vals = np.array([spectral.value_at(xs, l) for l in range(k)])
    inv = _gap_matrix(spectral.energies, 1e-8)
    K = np.zeros((2, k, k))
    K[0] = antisymmetrize(model.V0 * np.outer(vals, vals) * inv)
    return K


def _solve_near(provider, reference: SpectralSolution, R: ControlVector) -> SpectralSolution:
    return fix_gauge(provider(R), reference)


def connection_fd(
    model: PotentialModel,
    R,
    delta: float = DEFAULT_DELTA,
    provider: Callable[[ControlVector], SpectralSolution] | None = None,
    directions=None,
    richardson: bool = True,
    lmax: int = 2,
    N: int = DEFAULT_N,
) -> np.ndarray:
    """Finite-difference connection, shape (len(directions), k, k).

    [K^(i)]_{l l'} ~ (<phi_R^(l)|phi_{R+d e_i}^(l')> - <phi_R^(l)|phi_{R-d e_i}^(l')>) / (2 d).
    Where R - d e_i leaves the admissible domain the second-order forward
    formula is used instead. With ``richardson`` the estimates at d and d/2 are
    combined to cancel the O(d^2) term.
    """
    R = model.check(R)
    if provider is None:
        provider = SpectrumCache(model, lmax=lmax, N=N)
    base = provider(R)
    directions = range(len(R)) if directions is None else list(directions)

    def estimate(i, d):
        try:
            model.check(R.shifted(i, -d))
            central = True
        except DomainError:
            central = False
        try:
            plus = _solve_near(provider, base, R.shifted(i, d))
            if central:
                minus = _solve_near(provider, base, R.shifted(i, -d))
                return (overlap_matrix(base, plus) - overlap_matrix(base, minus)) / (2.0 * d)
            plus2 = _solve_near(provider, base, R.shifted(i, 2.0 * d))
        except GaugeTrackingError as exc:
            raise GaugeTrackingError(f"{exc}; use a smaller finite-difference step") from None
        eye = overlap_matrix(base, base)
        return (-3.0 * eye + 4.0 * overlap_matrix(base, plus) - overlap_matrix(base, plus2)) / (2.0 * d)

    out = []
    for i in directions:
        K1 = estimate(i, delta)
        if richardson:
            K2 = estimate(i, delta / 2.0)
            K1 = (4.0 * K2 - K1) / 3.0
        out.append(antisymmetrize(K1))
    return np.array(out)


def connection_at(
    model: PotentialModel,
    R,
    method: str,
    provider: Callable[[ControlVector], SpectralSolution],
    delta: float = DEFAULT_DELTA,
    spectral: SpectralSolution | None = None,
) -> np.ndarray:
    """All control components of the connection at R, shape (n_controls, k, k)."""
    R = model.check(R)
    if method == "finite-difference":
        K = connection_fd(model, R, delta, provider)
        if spectral is not None and not np.array_equal(spectral.states, provider(R).states):
            # re-express in the caller's gauge
            s = np.sign(np.einsum("il,il->l", spectral.states, provider(R).states))
            K = K * s[None, :, None] * s[None, None, :]
        return K
    spectral = spectral if spectral is not None else provider(R)
    if method == "analytic":
        return connection_analytic(model, spectral)
    if method == "hellmann-feynman":
        return np.array([connection_hf(model, R, spectral, i) for i in range(len(R))])
    raise ValidationError(f"unknown connection method {method!r}; expected one of {METHODS}")


# ---------------------------------------------------------------------------
# fields along paths
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConnectionField:
    """Connection sampled along a path (and optionally at segment midpoints)."""

    path: ControlPath
    samples: tuple[ConnectionSample, ...]
    method: str
    energies: np.ndarray
    midpoints: tuple[ConnectionSample, ...] | None = None
    mid_energies: np.ndarray | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if len(self.samples) != len(self.path):
            raise ValidationError("connection samples must align one-to-one with path samples")
        if self.midpoints is not None and len(self.midpoints) != len(self.path) - 1:
            raise ValidationError("midpoint samples must align with path segments")

    @property
    def levels(self) -> int:
        return self.samples[0].levels

    def components(self) -> np.ndarray:
        """Array of shape (M, n_controls, k, k)."""
        return np.array([s.components for s in self.samples])

    def segment_generators(self) -> np.ndarray:
        """K . Delta R for every segment, shape (M-1, k, k).

        Uses the midpoint samples when present, else the mean of the two ends.
        """
        dR = self.path.segment_vectors()
        if self.midpoints is not None:
            Km = np.array([s.components for s in self.midpoints])
        else:
            C = self.components()
            Km = 0.5 * (C[1:] + C[:-1])
        return np.einsum("si,sikl->skl", dR, Km)

    def K_y(self) -> np.ndarray:
        """K_y = K . dR/dy at the path samples (one-sided at the ends)."""
        C = self.components()
        v = np.gradient(self.path.points, self.path.y, axis=0, edge_order=1)
        return np.einsum("si,sikl->skl", v, C)

    def truncated(self, levels) -> "ConnectionField":
        levels = list(levels)
        ix = np.ix_(range(self.path.dim), levels, levels)

        def cut(samples):
            return tuple(ConnectionSample(s.R, s.components[ix]) for s in samples)

        return ConnectionField(
            self.path,
            cut(self.samples),
            self.method,
            self.energies[:, levels],
            cut(self.midpoints) if self.midpoints is not None else None,
            self.mid_energies[:, levels] if self.mid_energies is not None else None,
            dict(self.meta, levels=levels),
        )


def build_field(
    model: PotentialModel,
    path: ControlPath,
    method: str = "hellmann-feynman",
    lmax: int = 2,
    N: int = DEFAULT_N,
    provider: SpectrumCache | None = None,
    midpoints: bool = True,
    chain: bool = True,
    delta: float = DEFAULT_DELTA,
) -> ConnectionField:
    """Connection along ``path`` with gauge chained from the first sample on."""
    if method not in METHODS:
        raise ValidationError(f"unknown connection method {method!r}; expected one of {METHODS}")
    if provider is None:
        provider = SpectrumCache(model, lmax=lmax, N=N)
    prev = None
    samples, energies, chained = [], [], []
    for R in path.controls():
        sol = provider(R)
        if chain:
            sol = fix_gauge(sol, prev) if prev is not None else sol
            prev = sol
        chained.append(sol)
        K = connection_at(model, R, method, provider, delta, spectral=sol)
        samples.append(ConnectionSample(sol.R, K))
        energies.append(sol.energies)
    mids = mid_e = None
    if midpoints:
        mids, mid_e = [], []
        for k, Rm in enumerate(path.midpoints()):
            Rm = ControlVector(tuple(Rm))
            sol = provider(Rm)
            if chain:
                # same gauge as the segment start
                sol = fix_gauge(sol, chained[k])
            K = connection_at(model, Rm, method, provider, delta, spectral=sol)
            mids.append(ConnectionSample(sol.R, K))
            mid_e.append(sol.energies)
        mids, mid_e = tuple(mids), np.array(mid_e)
    return ConnectionField(
        path,
        tuple(samples),
        method,
        np.array(energies),
        mids,
        mid_e,
        {"N": provider.N, "lmax": provider.lmax, "delta": delta},
    )


# ---------------------------------------------------------------------------
# two-level reduction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TwoLevelLambda:
    """lambda(R) = (K^(1)_{01}, K^(2)_{01}, ...) along a field.

    ``ratio`` holds max(|K_02|, |K_12|) / |K_01| per sample along the
    direction of motion (NaN when the field has only two levels or the path
    does not move).
    """

    points: np.ndarray
    values: np.ndarray
    ratio: np.ndarray
    threshold: float
    warning: str | None = None

    @property
    def valid(self) -> bool:
        return self.warning is None


def two_level_lambda(field: ConnectionField, threshold: float = TWO_LEVEL_THRESHOLD) -> TwoLevelLambda:
    """Project the field onto levels {0, 1} and check that level 2 stays decoupled."""
    C = field.components()
    values = C[:, :, 0, 1].copy()
    ratio = np.full(len(C), np.nan)
    if field.levels > 2:
        v = np.gradient(field.path.points, axis=0)
        norms = np.linalg.norm(v, axis=1)
        Ky = np.einsum("si,sikl->skl", v, C)
        moving = norms > 0.0
        k01 = np.abs(Ky[:, 0, 1])
        k2 = np.maximum(np.abs(Ky[:, 0, 2]), np.abs(Ky[:, 1, 2]))
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(k01 > 0.0, k2 / k01, np.where(k2 > 0.0, np.inf, 0.0))
        ratio[moving] = r[moving]
    worst = np.nanmax(ratio) if np.any(np.isfinite(ratio)) else np.nan
    message = None
    if np.isfinite(worst) and worst > threshold or np.isinf(worst):
        message = (
            f"two-level reduction questionable: max(|K02|,|K12|)/|K01| = {worst:.3g} "
            f"exceeds {threshold:g}"
        )
        warnings.warn(message, RuntimeWarning, stacklevel=2)
    return TwoLevelLambda(field.path.points.copy(), values, ratio, threshold, message)


def lambda_field(field: ConnectionField) -> np.ndarray:
    """lambda at the segment midpoints, shape (M-1, n_controls)."""
    if field.midpoints is not None:
        return np.array([s.components[:, 0, 1] for s in field.midpoints])
    C = field.components()[:, :, 0, 1]
    return 0.5 * (C[1:] + C[:-1])


# ---------------------------------------------------------------------------
# second-derivative identity
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GammaCheck:
    """Terms of Gamma - dK - K^2 at one point along a straight path piece."""

    y: float
    dy: float
    K: np.ndarray
    dK: np.ndarray
    Gamma: np.ndarray
    K2_complete: np.ndarray
    K2_truncated: np.ndarray

    @property
    def residual(self) -> np.ndarray:
        return self.Gamma - self.dK - self.K2_complete

    @property
    def scale(self) -> float:
        return float(max(1.0, np.max(np.abs(self.Gamma)), np.max(np.abs(self.K2_complete))))


# sixth-order central stencils on offsets -3..3
_D1 = np.array([-1.0, 9.0, -45.0, 0.0, 45.0, -9.0, 1.0]) / 60.0
_D2 = np.array([2.0, -27.0, 270.0, -490.0, 270.0, -27.0, 2.0]) / 180.0
GAMMA_DY = 5e-4
GAMMA_LADDER = 5


def _dilation_apply(xi: np.ndarray, h: float, F: np.ndarray) -> np.ndarray:
    """Antisymmetric part of -(xi d/dxi + 1/2) on the grid, applied to columns of F."""

    def central(G):
        Gp = np.pad(G, ((1, 1), (0, 0)))
        return (Gp[2:] - Gp[:-2]) / (2.0 * h)

    return -0.5 * (xi[:, None] * central(F) + central(xi[:, None] * F))


def gamma_identity(
    provider: Callable[[ControlVector], SpectralSolution],
    R_of_y: Callable[[float], np.ndarray],
    y: float,
    dy: float | None = None,
) -> GammaCheck:
    """Gamma_y, dK_y/dy and K_y^2 at ``y`` with a fixed or an adaptively chosen step.

    With ``dy=None`` the steps GAMMA_DY * 2^-k, k < GAMMA_LADDER, are tried and
    the estimate that changes least against the next finer step is returned:
    truncation error falls as dy^6 while rounding noise grows as dy^-2. Steps
    whose stencil leaves the admissible domain are skipped.
    """
    if dy is not None:
        return _gamma_at(provider, R_of_y, y, dy)
    checks = []
    for k in range(GAMMA_LADDER):
        try:
            checks.append(_gamma_at(provider, R_of_y, y, GAMMA_DY * 0.5**k))
        except DomainError:
            continue
    if not checks:
        raise DomainError(f"no finite-difference step fits the domain around y={y}")
    if len(checks) == 1:
        return checks[0]

    def change(a, b):
        return max(np.max(np.abs(getattr(a, f) - getattr(b, f))) for f in ("Gamma", "dK", "K2_complete"))

    best = min(range(len(checks) - 1), key=lambda i: change(checks[i], checks[i + 1]))
    return checks[best]


def _gamma_at(
    provider: Callable[[ControlVector], SpectralSolution],
    R_of_y: Callable[[float], np.ndarray],
    y: float,
    dy: float,
) -> GammaCheck:
    """Evaluate Gamma_y, dK_y/dy and K_y^2 by sixth-order differences in y.

    The states are compared in the coordinate xi = x / D, where every sample
    shares one grid and the walls stay put; psi = sqrt(D) phi there. A moving
    extent is accounted for by the dilation generator M, so the x-space
    derivative d/dy becomes d/dy + (D'/D) M on psi. K_y^2 is taken over the
    complete grid basis, where it equals -<d phi^(l)/dy | d phi^(l')/dy>; the
    truncated product over the solved levels is reported alongside.
    """
    p = len(_D1) // 2
    ref = provider(ControlVector(tuple(R_of_y(y))))
    psi, ext = {}, {}
    for j in range(-2 * p, 2 * p + 1):
        s = fix_gauge(provider(ControlVector(tuple(R_of_y(y + j * dy)))), ref)
        if s.N != ref.N:
            raise ValidationError("gamma_identity needs every sample on the same number of nodes")
        psi[j] = np.sqrt(s.extent) * s.states
        ext[j] = s.extent
    n = ref.N
    hxi = 1.0 / (n + 1)
    xi = hxi * np.arange(1, n + 1)
    offsets = range(-p, p + 1)

    def rate(j):
        return sum(c * ext[j + i] for c, i in zip(_D1, offsets)) / dy / ext[j]

    def M(F):
        return _dilation_apply(xi, hxi, F)

    def cov(j):
        return sum(c * psi[j + i] for c, i in zip(_D1, offsets)) / dy + rate(j) * M(psi[j])

    def K_at(j):
        return hxi * psi[j].T @ cov(j)

    D0 = cov(0)
    K0 = hxi * psi[0].T @ D0
    dK = sum(c * K_at(i) for c, i in zip(_D1, offsets)) / dy
    # (d + r M)^2 psi = psi'' + (r M psi)' + r M psi' + r^2 M^2 psi
    d1 = sum(c * psi[i] for c, i in zip(_D1, offsets)) / dy
    d2 = sum(c * psi[i] for c, i in zip(_D2, offsets)) / dy**2
    rM = sum(c * rate(i) * M(psi[i]) for c, i in zip(_D1, offsets)) / dy
    r0 = rate(0)
    second = d2 + rM + r0 * M(d1) + r0**2 * M(M(psi[0]))
    Gamma = hxi * psi[0].T @ second
    K2 = -hxi * D0.T @ D0
    Ka = antisymmetrize(K0)
    return GammaCheck(y, dy, Ka, dK, Gamma, K2, Ka @ Ka)


def path_interpolant(path: ControlPath) -> Callable[[float], np.ndarray]:
    """Piecewise-linear R(y) through the path samples."""
    y, P = path.y, path.points

    def R_of_y(t):
        return np.array([np.interp(t, y, P[:, i]) for i in range(P.shape[1])])

    return R_of_y
