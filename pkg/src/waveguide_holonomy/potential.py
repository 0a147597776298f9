"""Transverse potential families V(x; R) and control-space trajectories R_y.

Units: hbar = 2m = 1 and the fixed well segment ``a`` is the length unit, so
energies are the rescaled values (units hbar^2 / (2 m a^2)) and lengths are in
units of ``a``.

Piecewise-constant families use left-closed/right-open intervals: a point
sitting exactly on a step edge takes the value of the segment that starts
there. The right wall ``x = D`` takes the value of the last segment.
"""

from __future__ import annotations

import ast
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import ndtr

from .errors import DomainError, ValidationError

V0_STRUCTURED = 9.0 * math.pi**2


@dataclass(frozen=True)
class ControlVector:
    """A point in control space, e.g. ``(L, w)`` for the structured well."""

    components: tuple[float, ...]

    def __post_init__(self):
        comps = tuple(float(c) for c in np.atleast_1d(np.asarray(self.components, dtype=float)))
        if not all(math.isfinite(c) for c in comps):
            raise ValidationError(f"control components must be finite, got {comps}")
        object.__setattr__(self, "components", comps)

    @property
    def array(self) -> np.ndarray:
        return np.array(self.components)

    def __len__(self):
        return len(self.components)

    def __iter__(self):
        return iter(self.components)

    def __getitem__(self, i):
        return self.components[i]

    def shifted(self, direction: int, delta: float) -> "ControlVector":
        comps = list(self.components)
        comps[direction] += delta
        return ControlVector(tuple(comps))


def as_control(R) -> ControlVector:
    return R if isinstance(R, ControlVector) else ControlVector(tuple(np.atleast_1d(R)))


# ---------------------------------------------------------------------------
# potential families
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Edge:
    """A moving discontinuity of a piecewise-constant potential.

    ``jump`` is V(x_e-) - V(x_e+); ``gradient`` is d x_e / dR.
    """

    position: float
    jump: float
    gradient: np.ndarray


# Gaussian smoothing of step edges, width in units of the grid spacing. At 1.5 h
# the grid-periodic ripple of the sampled step is ~exp(-2 pi^2 1.5^2) ~ 1e-19,
# so the discrete operator is smooth in the edge positions to rounding level.
KERNEL_WIDTH = 1.5
_KERNEL_CUTOFF = 10.0 * KERNEL_WIDTH


def _kernel_cdf(t: np.ndarray) -> np.ndarray:
    out = (t > 0.0).astype(float)
    near = np.flatnonzero(np.abs(t) < _KERNEL_CUTOFF)
    if near.size:
        out[near] = ndtr(t[near] / KERNEL_WIDTH)
    return out


def _kernel_density(t: np.ndarray) -> np.ndarray:
    out = np.zeros_like(t)
    near = np.flatnonzero(np.abs(t) < _KERNEL_CUTOFF)
    if near.size:
        u = t[near] / KERNEL_WIDTH
        out[near] = np.exp(-0.5 * u * u) / (KERNEL_WIDTH * math.sqrt(2.0 * math.pi))
    return out


def _kernel_weight(x: np.ndarray, h: float, lo: float, hi: float) -> np.ndarray:
    """(1/h) * integral over [lo, hi] of a unit-mass Gaussian of width KERNEL_WIDTH * h centred at x.

    A node deep inside [lo, hi] gets weight 1.
    """
    x = np.asarray(x, dtype=float)
    return _kernel_cdf((hi - x) / h) - _kernel_cdf((lo - x) / h)


class PotentialModel:
    """Base class for a family V(x; R) on the box [0, D(R)] with Dirichlet walls."""

    family: str = "abstract"
    n_controls: int = 0

    def check(self, R) -> ControlVector:
        R = as_control(R)
        if self.n_controls and len(R) != self.n_controls:
            raise ValidationError(
                f"{self.family} expects {self.n_controls} controls, got {len(R)}"
            )
        return R

    def extent(self, R) -> float:
        raise NotImplementedError

    def evaluate(self, x, R):
        raise NotImplementedError

    def grid_potential(self, x: np.ndarray, h: float, R) -> np.ndarray:
        """Potential seen by the finite-difference nodes ``x`` with spacing ``h``."""
        raise NotImplementedError

    def grid_potential_gradient(self, x: np.ndarray, h: float, R, direction: int) -> np.ndarray:
        """d/dR_i of :meth:`grid_potential` with the nodes riding on the grid.

        Nodes are ``x_j = j h`` with ``h = D(R) / (N + 1)``, so they move when
        the extent does. Control-independent families return zeros.
        """
        return np.zeros_like(np.asarray(x, dtype=float))

    def edges(self, R) -> list[Edge]:
        return []

    def wall_gradient(self, R) -> np.ndarray:
        """d D / dR; the left wall is pinned at x = 0."""
        return np.zeros(len(as_control(R)))

    def describe(self) -> dict:
        return {"family": self.family}


@dataclass(frozen=True)
class Segment:
    """Constant-value slab whose width is affine in the controls.

    width(R) = base + coefficients . R
    """

    base: float
    coefficients: tuple[float, ...]
    value: float

    def width(self, R: ControlVector) -> float:
        return self.base + float(np.dot(self.coefficients, R.array))


class PiecewiseConstantWell(PotentialModel):
    """Infinite well filled with constant slabs of control-dependent width."""

    family = "piecewise-constant"

    def __init__(self, segments: Sequence[Segment]):
        if not segments:
            raise ValidationError("a piecewise-constant well needs at least one segment")
        dims = {len(s.coefficients) for s in segments}
        if len(dims) != 1:
            raise ValidationError("all segments must share the control dimension")
        self.segments = tuple(segments)
        self.n_controls = dims.pop()

    def check(self, R) -> ControlVector:
        R = super().check(R)
        for k, seg in enumerate(self.segments):
            if seg.width(R) < 0.0:
                raise DomainError(f"segment {k} has negative width at R={R.components}")
        return R

    def breakpoints(self, R) -> np.ndarray:
        R = self.check(R)
        widths = [seg.width(R) for seg in self.segments]
        return np.concatenate([[0.0], np.cumsum(widths)])

    def extent(self, R) -> float:
        return float(self.breakpoints(R)[-1])

    def evaluate(self, x, R):
        bp = self.breakpoints(R)
        xs = np.asarray(x, dtype=float)
        if np.any(xs < 0.0) or np.any(xs > bp[-1]):
            raise DomainError(f"x outside [0, {bp[-1]}]")
        values = np.array([s.value for s in self.segments])
        # left-closed intervals; zero-width slabs are skipped by searchsorted
        idx = np.searchsorted(bp, xs, side="right") - 1
        idx = np.clip(idx, 0, len(self.segments) - 1)
        out = values[idx]
        return float(out) if np.ndim(x) == 0 else out

    def grid_potential(self, x, h, R):
        bp = self.breakpoints(R)
        V = np.zeros_like(x)
        for seg, lo, hi in zip(self.segments, bp[:-1], bp[1:]):
            if seg.value != 0.0 and hi > lo:
                V += seg.value * _kernel_weight(x, h, lo, hi)
        return V

    def grid_potential_gradient(self, x, h, R, direction):
        bp = self.breakpoints(R)
        coeffs = [float(seg.coefficients[direction]) for seg in self.segments]
        dbp = np.concatenate([[0.0], np.cumsum(coeffs)])
        dh = h * dbp[-1] / bp[-1]
        j = np.asarray(x, dtype=float) / h
        dV = np.zeros_like(j)
        for k, seg in enumerate(self.segments):
            if seg.value == 0.0 or bp[k + 1] <= bp[k]:
                continue
            # the weight depends on R through t = edge / h - j
            for edge, dedge, sign in ((bp[k + 1], dbp[k + 1], 1.0), (bp[k], dbp[k], -1.0)):
                dt = dedge / h - edge * dh / h**2
                if dt != 0.0:
                    dV += sign * seg.value * dt * _kernel_density(edge / h - j)
        return dV

    def edges(self, R):
        R = self.check(R)
        out = []
        position = 0.0
        gradient = np.zeros(self.n_controls)
        segs = self.segments
        for k in range(len(segs) - 1):
            position += segs[k].width(R)
            gradient = gradient + np.asarray(segs[k].coefficients, dtype=float)
            jump = segs[k].value - segs[k + 1].value
            if jump != 0.0:
                out.append(Edge(position, jump, gradient.copy()))
        return out

    def wall_gradient(self, R):
        return np.sum([np.asarray(s.coefficients, dtype=float) for s in self.segments], axis=0)

    def describe(self):
        return {
            "family": self.family,
            "segments": [
                {"base": s.base, "coefficients": list(s.coefficients), "value": s.value}
                for s in self.segments
            ],
        }


class StructuredWell(PiecewiseConstantWell):
    """Infinite well of width a + L + w with a barrier of height V0 on [a/2, a/2 + L].

    Controls are ``(L, w)``. For ``w = 0`` the third level sits exactly at V0
    whatever the barrier width.
    """

    family = "structured-well"

    def __init__(self, a: float = 1.0, V0: float = V0_STRUCTURED):
        if a <= 0.0:
            raise ValidationError("well segment a must be positive")
        self.a = float(a)
        self.V0 = float(V0)
        super().__init__(
            [
                Segment(self.a / 2, (0.0, 0.0), 0.0),
                Segment(0.0, (1.0, 0.0), self.V0),
                Segment(self.a / 2, (0.0, 1.0), 0.0),
            ]
        )

    def check(self, R) -> ControlVector:
        R = PotentialModel.check(self, R)
        L, w = R.components
        if L < 0.0 or w < 0.0:
            raise DomainError(f"structured well needs L >= 0 and w >= 0, got {R.components}")
        return R

    def barrier_edge(self, R) -> float:
        return self.a / 2 + self.check(R)[0]

    def describe(self):
        return {"family": self.family, "a": self.a, "V0": self.V0}


class TabulatedPotential(PotentialModel):
    """Control-independent potential given on a table (x, V), linearly interpolated."""

    family = "tabulated"

    def __init__(self, x: Sequence[float], V: Sequence[float], n_controls: int = 2):
        x = np.asarray(x, dtype=float)
        V = np.asarray(V, dtype=float)
        if x.ndim != 1 or x.shape != V.shape or len(x) < 2:
            raise ValidationError("tabulated potential needs matching 1D x and V with >= 2 rows")
        if x[0] != 0.0 or np.any(np.diff(x) <= 0.0):
            raise ValidationError("tabulated x must start at 0 and increase strictly")
        if not (np.all(np.isfinite(V))):
            raise ValidationError("tabulated V must be finite")
        self.x = x
        self.V = V
        self.n_controls = n_controls

    def extent(self, R) -> float:
        return float(self.x[-1])

    def evaluate(self, x, R):
        xs = np.asarray(x, dtype=float)
        if np.any(xs < 0.0) or np.any(xs > self.x[-1]):
            raise DomainError(f"x outside [0, {self.x[-1]}]")
        out = np.interp(xs, self.x, self.V)
        return float(out) if np.ndim(x) == 0 else out

    def grid_potential(self, x, h, R):
        return np.interp(x, self.x, self.V)

    @classmethod
    def from_csv(cls, path, n_controls: int = 2) -> "TabulatedPotential":
        data = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
        return cls(data[:, 0], data[:, 1], n_controls=n_controls)

    def describe(self):
        return {"family": self.family, "rows": len(self.x), "extent": float(self.x[-1])}


def evaluate_potential(model: PotentialModel, x, R):
    """V(x; R) in rescaled units; raises DomainError outside [0, D(R)]."""
    return model.evaluate(x, R)


# ---------------------------------------------------------------------------
# control paths
# ---------------------------------------------------------------------------

CLOSURE_TOL = 1e-12


@dataclass(frozen=True)
class ControlPath:
    """Sampled trajectory y -> R_y with strictly increasing y."""

    y: np.ndarray
    points: np.ndarray
    closed: bool = False
    tol: float = CLOSURE_TOL
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        y = np.array(self.y, dtype=float)
        pts = np.array(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if y.ndim != 1 or len(y) != len(pts):
            raise ValidationError("path needs one y value per sample")
        if len(y) < 2:
            raise ValidationError("a path needs at least 2 samples")
        if not np.all(np.isfinite(y)) or not np.all(np.isfinite(pts)):
            raise ValidationError("path samples must be finite")
        if np.any(np.diff(y) <= 0.0):
            raise ValidationError("path y values must increase strictly")
        if self.closed and np.max(np.abs(pts[0] - pts[-1])) > self.tol:
            raise ValidationError("closed path must end where it starts")
        y.setflags(write=False)
        pts.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "points", pts)

    @property
    def Y0(self) -> float:
        return float(self.y[0])

    @property
    def Y(self) -> float:
        return float(self.y[-1])

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self):
        return len(self.y)

    def control(self, k: int) -> ControlVector:
        return ControlVector(tuple(self.points[k]))

    def controls(self) -> list[ControlVector]:
        return [self.control(k) for k in range(len(self))]

    def segment_vectors(self) -> np.ndarray:
        return np.diff(self.points, axis=0)

    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.points[1:] + self.points[:-1])

    def arc_length(self) -> np.ndarray:
        steps = np.linalg.norm(self.segment_vectors(), axis=1)
        return np.concatenate([[0.0], np.cumsum(steps)])

    def normalized_parameter(self) -> np.ndarray:
        return (self.y - self.Y0) / (self.Y - self.Y0)

    def geometrically_closed(self) -> bool:
        return bool(np.max(np.abs(self.points[0] - self.points[-1])) <= self.tol)

    def reversed(self) -> "ControlPath":
        """Same image traversed backwards, on the mirrored y grid."""
        y = self.Y0 + self.Y - self.y[::-1]
        return ControlPath(y, self.points[::-1], self.closed, self.tol, dict(self.meta))

    def refined(self, factor: int = 2) -> "ControlPath":
        """Insert ``factor - 1`` equally spaced samples inside every segment."""
        if factor < 1:
            raise ValidationError("refinement factor must be >= 1")
        t = np.arange(factor) / factor
        y = np.concatenate([self.y[:-1, None] + np.diff(self.y)[:, None] * t[None, :]]).ravel()
        seg = self.segment_vectors()
        pts = (self.points[:-1, None, :] + seg[:, None, :] * t[None, :, None]).reshape(-1, self.dim)
        y = np.append(y, self.y[-1])
        pts = np.vstack([pts, self.points[-1]])
        return ControlPath(y, pts, self.closed, self.tol, dict(self.meta))

    def with_y(self, y) -> "ControlPath":
        return ControlPath(np.asarray(y, dtype=float), self.points, self.closed, self.tol, dict(self.meta))

    def mapped_to(self, length: float, start: float = 0.0, rule: str = "index") -> "ControlPath":
        """Assign the samples to y in [start, start + length].

        ``index`` spaces samples uniformly in y; ``arc`` spaces them by
        control-space arc length (falls back to ``index`` for zero-length paths).
        """
        if length <= 0.0:
            raise ValidationError("path length in y must be positive")
        if rule == "arc":
            s = self.arc_length()
            if s[-1] > 0.0 and np.all(np.diff(s) > 0.0):
                return self.with_y(start + length * s / s[-1])
        elif rule != "index":
            raise ValidationError(f"unknown y mapping rule {rule!r}")
        return self.with_y(start + length * np.linspace(0.0, 1.0, len(self)))


def rectangle_path(
    L_in: float,
    L_fin: float,
    w_in: float,
    w_fin: float,
    samples_per_edge: int | Sequence[int] = 64,
    length: float = 1.0,
) -> ControlPath:
    """Closed rectangle (L_in,w_in) -> (L_in,w_fin) -> (L_fin,w_fin) -> (L_fin,w_in) -> start.

    ``samples_per_edge`` is either one count for all four edges or one per
    edge; y is spaced uniformly per sample over [0, length].
    """
    counts = [samples_per_edge] * 4 if np.isscalar(samples_per_edge) else list(samples_per_edge)
    if len(counts) != 4 or any(int(n) < 1 for n in counts):
        raise ValidationError("rectangle needs four positive per-edge sample counts")
    corners = np.array(
        [[L_in, w_in], [L_in, w_fin], [L_fin, w_fin], [L_fin, w_in], [L_in, w_in]], dtype=float
    )
    pieces = []
    for k, n in enumerate(counts):
        t = np.arange(int(n)) / int(n)
        pieces.append(corners[k] + t[:, None] * (corners[k + 1] - corners[k]))
    pts = np.vstack(pieces + [corners[-1:]])
    y = np.linspace(0.0, length, len(pts))
    meta = {
        "kind": "rectangle",
        "L_in": L_in,
        "L_fin": L_fin,
        "w_in": w_in,
        "w_fin": w_fin,
        "samples_per_edge": [int(n) for n in counts],
    }
    return ControlPath(y, pts, closed=True, meta=meta)


_SAFE_FUNCS = {
    "sin": np.sin,
    "cos": np.cos,
    "tan": np.tan,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "abs": np.abs,
    "tanh": np.tanh,
}
_SAFE_CONSTS = {"pi": math.pi, "e": math.e}


def _eval_expression(expr: str, t: np.ndarray) -> np.ndarray:
    """Evaluate an arithmetic expression of ``t`` without ``eval``."""
    try:
        tree = ast.parse(expr, mode="eval")
    except SyntaxError as exc:
        raise ValidationError(f"bad expression {expr!r}: {exc.msg}") from None

    binops = {
        ast.Add: np.add,
        ast.Sub: np.subtract,
        ast.Mult: np.multiply,
        ast.Div: np.divide,
        ast.Pow: np.power,
    }

    def walk(node):
        if isinstance(node, ast.Expression):
            return walk(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return float(node.value)
        if isinstance(node, ast.Name):
            if node.id == "t":
                return t
            if node.id in _SAFE_CONSTS:
                return _SAFE_CONSTS[node.id]
            raise ValidationError(f"unknown name {node.id!r} in {expr!r}")
        if isinstance(node, ast.BinOp) and type(node.op) in binops:
            return binops[type(node.op)](walk(node.left), walk(node.right))
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            val = walk(node.operand)
            return -val if isinstance(node.op, ast.USub) else val
        if (
            isinstance(node, ast.Call)
            and isinstance(node.func, ast.Name)
            and node.func.id in _SAFE_FUNCS
            and len(node.args) == 1
            and not node.keywords
        ):
            return _SAFE_FUNCS[node.func.id](walk(node.args[0]))
        raise ValidationError(f"unsupported construct in expression {expr!r}")

    return np.broadcast_to(np.asarray(walk(tree), dtype=float), t.shape).copy()


def build_path(spec: dict) -> ControlPath:
    """Build a ControlPath from a description.

    Recognised ``kind`` values:

    * ``rectangle``: keys L_in, L_fin, w_in, w_fin, samples_per_edge
    * ``explicit``: ``points`` (list of control tuples), optional ``y``
    * ``parametric``: ``components`` (expressions in t), ``t_range``, ``samples``

    ``length`` (default 1) sets Y - Y0 when y is not given explicitly.
    ``closed`` is inferred from the geometry unless given.
    """
    kind = spec.get("kind")
    length = float(spec.get("length", 1.0))
    if kind == "rectangle":
        return rectangle_path(
            spec["L_in"],
            spec["L_fin"],
            spec["w_in"],
            spec["w_fin"],
            spec.get("samples_per_edge", 64),
            length=length,
        )
    if kind == "explicit":
        pts = np.asarray(spec["points"], dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if len(pts) < 2:
            raise ValidationError("a path needs at least 2 samples")
        y = spec.get("y")
        y = np.linspace(0.0, length, len(pts)) if y is None else np.asarray(y, dtype=float)
        closed = spec.get("closed")
        if closed is None:
            closed = bool(np.max(np.abs(pts[0] - pts[-1])) <= CLOSURE_TOL)
        return ControlPath(y, pts, closed=closed, meta={"kind": "explicit"})
    if kind == "parametric":
        t0, t1 = spec.get("t_range", (0.0, 1.0))
        n = int(spec.get("samples", 257))
        if n < 2:
            raise ValidationError("a path needs at least 2 samples")
        t = np.linspace(float(t0), float(t1), n)
        pts = np.column_stack([_eval_expression(e, t) for e in spec["components"]])
        closed = spec.get("closed")
        if closed is None:
            closed = bool(np.max(np.abs(pts[0] - pts[-1])) <= 1e-9)
        if closed:
            pts[-1] = pts[0]
        y = np.linspace(0.0, length, n)
        return ControlPath(y, pts, closed=closed, meta={"kind": "parametric"})
    raise ValidationError(f"unknown path kind {kind!r}")


def path_from_csv(path, closed: bool | None = None) -> ControlPath:
    """Read a (y, R1, R2, ...) table."""
    data = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
    if data.shape[1] < 2:
        raise ValidationError("path CSV needs a y column and at least one control column")
    return build_path({"kind": "explicit", "y": data[:, 0], "points": data[:, 1:], "closed": closed})


# ---------------------------------------------------------------------------
# reparameterisation
# ---------------------------------------------------------------------------


def speed_profile(name: str, **params) -> Callable[[np.ndarray, float, float], np.ndarray]:
    """Named monotone maps y -> y' acting on [Y0, Y].

    * ``identity``
    * ``dilation``: y' = Y0 + factor * (y - Y0)
    * ``cubic``: s -> (s + 2 s^3) / 3 on the normalised coordinate
    """
    if name == "identity":
        return lambda y, Y0, Y: np.array(y, dtype=float)
    if name == "dilation":
        factor = float(params.get("factor", 5.0))
        if factor <= 0.0:
            raise ValidationError("dilation factor must be positive")
        return lambda y, Y0, Y: Y0 + factor * (np.asarray(y) - Y0)
    if name == "cubic":

        def cubic(y, Y0, Y):
            s = (np.asarray(y) - Y0) / (Y - Y0)
            return Y0 + (Y - Y0) * (s + 2.0 * s**3) / 3.0

        return cubic
    raise ValidationError(f"unknown speed profile {name!r}")


def reparameterize(path: ControlPath, profile) -> ControlPath:
    """Move every sample to y' = profile(y); the control-space image is untouched."""
    if isinstance(profile, str):
        profile = speed_profile(profile)
    new_y = np.asarray(profile(path.y, path.Y0, path.Y), dtype=float)
    if new_y.shape != path.y.shape or np.any(np.diff(new_y) <= 0.0):
        raise ValidationError("speed profile must be strictly increasing")
    return path.with_y(new_y)


def concatenate_paths(paths: Iterable[ControlPath]) -> ControlPath:
    """Join paths end to start; the y grids are shifted to be contiguous."""
    paths = list(paths)
    ys, pts = [paths[0].y], [paths[0].points]
    for p in paths[1:]:
        if np.max(np.abs(p.points[0] - pts[-1][-1])) > CLOSURE_TOL:
            raise ValidationError("concatenated paths must join continuously")
        ys.append(p.y[1:] - p.Y0 + ys[-1][-1])
        pts.append(p.points[1:])
    y = np.concatenate(ys)
    P = np.vstack(pts)
    closed = bool(np.max(np.abs(P[0] - P[-1])) <= CLOSURE_TOL)
    return ControlPath(y, P, closed=closed)
