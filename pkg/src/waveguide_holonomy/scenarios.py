"""Built-in experiments driven by a resolved Scenario."""

from __future__ import annotations

import json
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .config import Scenario
from .connection import build_field, connection_at, two_level_lambda
from .dynamics import integrate_coupled
from .errors import ValidationError
from .holonomy import (
    Holonomy,
    abelian_phase_line,
    commutator_norm,
    compose,
    embed_two_level,
    path_holonomy,
    rotation,
    unitarity_error,
)
from .potential import (
    ControlVector,
    PiecewiseConstantWell,
    Segment,
    StructuredWell,
    TabulatedPotential,
    build_path,
    path_from_csv,
    reparameterize,
    speed_profile,
)
from .spectrum import SpectrumCache

SCHEMA_VERSION = 1

DESCRIPTIONS = {
    "holonomy": "holonomy U and abelian phase alpha of the configured path",
    "fig2b-energies": "E0, E1, E2 over an (L, w) grid",
    "fig3-couplings": "|<phi_l|d_L phi_l'>| surfaces over (L, w) and |K_ll'| along the path",
    "fig4-alpha": "alpha over (L_fin, w_fin) for rectangles from (L_in, w_in)",
    "gate-validation": "coupled-mode propagation vs. the holonomic prediction over eps",
    "su3-concat": "composition of (0,2) and (0,1) rotations and its commutator",
}

GRID_DEFAULTS = {
    "fig2b-energies": ((0.1, 0.6), 40, (0.0, 0.05), 20),
    "fig3-couplings": ((0.1, 0.6), 26, (0.0, 0.05), 11),
    "fig4-alpha": ((0.3, 0.6), 30, (0.0, 0.05), 20),
}
FIG4_SUBSTEPS = 8


@dataclass
class RunOutcome:
    scenario: str
    artifacts: list = field(default_factory=list)
    flags: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    @property
    def flagged(self) -> bool:
        return any(self.flags.values())


# ---------------------------------------------------------------------------
# construction from config
# ---------------------------------------------------------------------------


def build_model(sc: Scenario):
    p = sc["potential"]
    if p["family"] == "structured-well":
        return StructuredWell(p["a"], p["V0"])
    if p["family"] == "piecewise":
        n = p["n_controls"]
        return PiecewiseConstantWell([Segment(r[0], tuple(r[1 : 1 + n]), r[1 + n]) for r in p["segments"]])
    return TabulatedPotential.from_csv(_resolve(sc, p["file"]), p["n_controls"])


def _resolve(sc: Scenario, name: str) -> str:
    if os.path.isabs(name) or sc.origin in ("<config>", "<string>"):
        return name
    return os.path.join(os.path.dirname(sc.origin), name)


def build_control_path(sc: Scenario, length: float | None = None):
    p = sc["path"]
    closed = None if p["closed"] == "auto" else p["closed"] == "true"
    if p["kind"] == "csv":
        path = path_from_csv(_resolve(sc, p["file"]), closed)
    else:
        spec = dict(p)
        spec["closed"] = closed
        spec["y"] = p["y"] or None
        spec["t_range"] = tuple(p["t_range"])
        path = build_path(spec)
    if length is not None:
        path = path.mapped_to(length, rule=p["mapping"])
    if p["profile"] != "identity":
        path = reparameterize(path, speed_profile(p["profile"], factor=p["profile_factor"]))
    return path


def build_cache(sc: Scenario, model) -> SpectrumCache:
    s = sc["solver"]
    return SpectrumCache(model, s["lmax"], s["N"], residual_tol=s["residual_tol"], degeneracy_gap=s["degeneracy_gap"])


def grid_axes(sc: Scenario, name: str):
    (L0, L1), nL, (w0, w1), nw = GRID_DEFAULTS[name]
    sw = sc["sweep"]
    L0, L1 = sw["L_range"] or (L0, L1)
    w0, w1 = sw["w_range"] or (w0, w1)
    nL = sw["L_count"] or nL
    nw = sw["w_count"] or nw
    return np.linspace(L0, L1, nL), np.linspace(w0, w1, nw)


# ---------------------------------------------------------------------------
# artifact writers
# ---------------------------------------------------------------------------


def _params_line(sc: Scenario) -> str:
    return json.dumps(sc.to_dict(), sort_keys=True, separators=(",", ":"))


def write_csv(path: str, sc: Scenario, columns: list[str], rows) -> str:
    with open(path, "w", newline="\n") as fh:
        fh.write(f"# waveguide-holonomy {sc.name} schema={SCHEMA_VERSION} version={__version__}\n")
        fh.write(f"# params {_params_line(sc)}\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_cell(v) for v in row) + "\n")
    return path


def _cell(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.12e}"


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path: str, sc: Scenario, payload: dict) -> str:
    doc = {
        "scenario": sc.name,
        "schema": SCHEMA_VERSION,
        "version": __version__,
        "params": sc.to_dict(),
        **payload,
    }
    with open(path, "w", newline="\n") as fh:
        json.dump(_clean(doc), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# scenarios
# ---------------------------------------------------------------------------


def run_holonomy(sc: Scenario, out: str, threads: int = 1) -> RunOutcome:
    model = build_model(sc)
    cache = build_cache(sc, model)
    path = build_control_path(sc)
    s = sc["solver"]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        hol, fld = path_holonomy(model, path, s["connection"], cache, max_step=s["max_step"], delta=s["delta"])
        two = fld.truncated([0, 1])
        alpha = abelian_phase_line(two)
        tl = two_level_lambda(fld, s["two_level_threshold"])
    hol2 = Holonomy(rotation(alpha), alpha, "abelian-line-integral", {"levels": [0, 1]})
    outcome = RunOutcome(sc.name)
    payload = {
        "alpha": alpha,
        "closed": path.closed,
        "samples": len(fld.path),
        "holonomy": hol.to_dict(),
        "two_level_holonomy": hol2.to_dict(),
        "two_level_max_ratio": float(np.nanmax(tl.ratio)) if np.any(np.isfinite(tl.ratio)) else None,
        "warnings": sorted({str(w.message) for w in caught}),
    }
    outcome.artifacts.append(write_json(os.path.join(out, "holonomy.json"), sc, payload))
    outcome.flags["two_level"] = not tl.valid
    outcome.summary = {"alpha": alpha}
    return outcome


def run_fig2b(sc: Scenario, out: str, threads: int = 1) -> RunOutcome:
    model = build_model(sc)
    cache = build_cache(sc, model)
    Ls, ws = grid_axes(sc, "fig2b-energies")
    pts = [(float(L), float(w)) for L in Ls for w in ws]
    sols = _map(cache, pts, threads)
    k = sc["solver"]["lmax"] + 1
    rows = [(L, w, *sol.energies[:k]) for (L, w), sol in zip(pts, sols)]
    cols = ["L", "w"] + [f"E{l}" for l in range(k)]
    outcome = RunOutcome(sc.name)
    outcome.artifacts.append(write_csv(os.path.join(out, "fig2b_energies.csv"), sc, cols, rows))
    zero = [r for r in rows if r[1] == 0.0]
    if zero and k >= 3:
        e2 = np.array([r[4] for r in zero])
        outcome.summary["E2_at_w0"] = {"min": float(e2.min()), "max": float(e2.max())}
    outcome.artifacts.append(
        write_json(os.path.join(out, "fig2b_summary.json"), sc, {"grid": {"L": Ls, "w": ws}, **outcome.summary})
    )
    return outcome


def run_fig3(sc: Scenario, out: str, threads: int = 1) -> RunOutcome:
    model = build_model(sc)
    cache = build_cache(sc, model)
    s = sc["solver"]
    Ls, ws = grid_axes(sc, "fig3-couplings")
    pts = [ControlVector((float(L), float(w))) for L in Ls for w in ws]
    Ks = _map(lambda R: connection_at(model, R, s["connection"], cache, s["delta"]), pts, threads)
    rows, ratios = [], []
    for R, K in zip(pts, Ks):
        KL = np.abs(K[0])
        rows.append((R[0], R[1], KL[0, 1], KL[0, 2], KL[1, 2]))
        if KL[0, 1] > 0:
            ratios.append(max(KL[0, 2], KL[1, 2]) / KL[0, 1])
    outcome = RunOutcome(sc.name)
    outcome.artifacts.append(
        write_csv(os.path.join(out, "fig3_surface.csv"), sc, ["L", "w", "abs_K01", "abs_K02", "abs_K12"], rows)
    )
    path = build_control_path(sc)
    fld = build_field(model, path, s["connection"], provider=cache, midpoints=False, delta=s["delta"])
    C = fld.components()
    # outgoing segment direction, so corner samples belong to the edge that starts there
    seg = path.segment_vectors()
    tangent = np.vstack([seg, seg[-1:]])
    norms = np.linalg.norm(tangent, axis=1)
    unit = np.divide(tangent, norms[:, None], out=np.zeros_like(tangent), where=norms[:, None] > 0)
    Kt = np.einsum("si,sikl->skl", unit, C)
    s_par = np.linspace(0.0, 1.0, len(path))
    inset = [(s_par[m], *path.points[m], abs(Kt[m, 0, 1]), abs(Kt[m, 0, 2]), abs(Kt[m, 1, 2])) for m in range(len(path))]
    outcome.artifacts.append(
        write_csv(
            os.path.join(out, "fig3_inset.csv"),
            sc,
            ["s", "L", "w", "abs_K01", "abs_K02", "abs_K12"],
            inset,
        )
    )
    worst = float(max(ratios)) if ratios else 0.0
    outcome.flags["two_level"] = worst > s["two_level_threshold"]
    outcome.summary = {"max_ratio": worst, "threshold": s["two_level_threshold"]}
    outcome.artifacts.append(write_json(os.path.join(out, "fig3_summary.json"), sc, outcome.summary))
    return outcome


class LatticeLambda:
    """lambda = K_01 components on a regular (L, w) lattice, evaluated lazily."""

    def __init__(self, model, method, cache, delta, L0, hL, w0, hw):
        self.model, self.method, self.cache, self.delta = model, method, cache, delta
        self.L0, self.hL, self.w0, self.hw = L0, hL, w0, hw
        self.values: dict = {}

    def point(self, i2: int, j2: int) -> ControlVector:
        # half-integer lattice indices (doubled) cover segment midpoints
        return ControlVector((self.L0 + 0.5 * i2 * self.hL, self.w0 + 0.5 * j2 * self.hw))

    def __call__(self, i2: int, j2: int) -> np.ndarray:
        key = (i2, j2)
        if key not in self.values:
            K = connection_at(self.model, self.point(i2, j2), self.method, self.cache, self.delta)
            self.values[key] = K[:, 0, 1].copy()
        return self.values[key]

    def edge_integral(self, start: tuple[int, int], stop: tuple[int, int]) -> float:
        """Midpoint-rule integral of lambda . dR along a lattice-aligned edge."""
        (i0, j0), (i1, j1) = start, stop
        if i0 != i1 and j0 != j1:
            raise ValidationError("lattice edges must be axis-aligned")
        if i0 == i1 and j0 == j1:
            return 0.0
        if j0 == j1:
            comp, h, a, b = 0, self.hL, i0, i1
        else:
            comp, h, a, b = 1, self.hw, j0, j1
        if comp == 1 and self.method == "analytic":
            return 0.0
        step = 1 if b > a else -1
        total = 0.0
        for m in range(a, b, step):
            mid2 = 2 * m + step
            val = self(mid2, 2 * j0) if comp == 0 else self(2 * i0, mid2)
            total += val[comp] * h * step
        return total

    def rectangle_alpha(self, iL: int, jw: int) -> float:
        """alpha of the rectangle from the lattice origin to node (iL, jw)."""
        corners = [(0, 0), (0, jw), (iL, jw), (iL, 0), (0, 0)]
        return float(sum(self.edge_integral(a, b) for a, b in zip(corners[:-1], corners[1:])))


def run_fig4(sc: Scenario, out: str, threads: int = 1) -> RunOutcome:
    model = build_model(sc)
    cache = build_cache(sc, model)
    s, p = sc["solver"], sc["path"]
    L_in, w_in = p["L_in"], p["w_in"]
    Ls, ws = grid_axes(sc, "fig4-alpha")
    if Ls[0] < L_in or ws[0] < w_in:
        raise ValidationError("fig4 grid must start at or above (L_in, w_in)")
    nL, nw = len(Ls), len(ws)
    hL = (Ls[-1] - L_in) / max(1, (nL - 1) * FIG4_SUBSTEPS) if nL > 1 else 1.0
    hw = (ws[-1] - w_in) / max(1, (nw - 1) * FIG4_SUBSTEPS) if nw > 1 else 1.0
    lat = LatticeLambda(model, s["connection"], cache, s["delta"], L_in, hL, w_in, hw)

    def node(v, v0, h):
        j = int(round((v - v0) / h)) if h > 0 else 0
        if abs(v0 + j * h - v) > 1e-9:
            raise ValidationError("fig4 grid values must sit on the integration lattice; use ranges starting at (L_in, w_in)")
        return j

    rows = []
    for L in Ls:
        iL = node(L, L_in, hL)
        for w in ws:
            jw = node(w, w_in, hw)
            rows.append((L, w, lat.rectangle_alpha(iL, jw)))
    outcome = RunOutcome(sc.name)
    outcome.artifacts.append(
        write_csv(os.path.join(out, "fig4_alpha.csv"), sc, ["L_fin", "w_fin", "alpha"], rows)
    )
    outcome.summary = {
        "L_in": L_in,
        "w_in": w_in,
        "lattice": {"hL": hL, "hw": hw, "substeps": FIG4_SUBSTEPS},
        "alpha_range": [float(min(r[2] for r in rows)), float(max(r[2] for r in rows))],
        "solves": len(cache),
    }
    outcome.artifacts.append(write_json(os.path.join(out, "fig4_summary.json"), sc, outcome.summary))
    return outcome


def run_gate(sc: Scenario, out: str, threads: int = 1) -> RunOutcome:
    model = build_model(sc)
    cache = build_cache(sc, model)
    s, d = sc["solver"], sc["dynamics"]
    path = build_control_path(sc)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        _, fine = path_holonomy(model, path, s["connection"], cache, max_step=s["max_step"], delta=s["delta"])
    p = sc["path"]
    mapped = fine.path.mapped_to(d["length"], rule=p["mapping"])
    if p["profile"] != "identity":
        mapped = reparameterize(mapped, speed_profile(p["profile"], factor=p["profile_factor"]))
    fld = build_field(model, mapped, s["connection"], provider=cache, delta=s["delta"])
    C0 = np.array(d["C0"], dtype=complex)

    thresholds = {k: d[k] for k in ("adiabatic_threshold", "wkb_threshold", "degeneracy_threshold")}

    def one(eps):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            res = integrate_coupled(
                fld,
                eps,
                C0,
                step_rule=d["step_rule"],
                form=d["form"],
                max_step_norm=s["max_step"],
                thresholds=thresholds,
            )
        return res, res.validity

    results = _map(one, list(d["epsilon"]), threads)
    outcome = RunOutcome(sc.name)
    rows, reports = [], []
    for eps, (res, rep) in zip(d["epsilon"], results):
        alpha = res.holonomy.alpha
        rows.append((eps, res.fidelity, 1.0 - res.fidelity, res.leakage, res.dynamical_phase, alpha if alpha is not None else float("nan"), int(not rep.ok)))
        r = res.report()
        r["validity"] = rep.to_dict()
        reports.append(r)
        for name, flag in rep.flags.items():
            outcome.flags[name] = outcome.flags.get(name, False) or bool(flag)
        if d["trace"]:
            tr = res.trace_rows()
            cols = ["y"] + [f"abs_C{l}_sq" for l in range(tr.shape[1] - 1)]
            outcome.artifacts.append(write_csv(os.path.join(out, f"gate_trace_eps{eps:g}.csv"), sc, cols, tr))
    outcome.artifacts.append(
        write_csv(
            os.path.join(out, "gate_validation.csv"),
            sc,
            ["epsilon", "fidelity", "infidelity", "leakage", "dynamical_phase", "alpha", "flagged"],
            rows,
        )
    )
    outcome.summary = {"runs": reports, "samples": len(mapped)}
    outcome.artifacts.append(write_json(os.path.join(out, "gate_validation.json"), sc, outcome.summary))
    return outcome


def run_su3(sc: Scenario, out: str, threads: int = 1) -> RunOutcome:
    angle = sc["sweep"]["angle"]
    first = embed_two_level(angle, (0, 2), 3)
    second = embed_two_level(angle, (0, 1), 3)
    forward = compose(second, first)
    reverse = compose(first, second)
    comm = commutator_norm(second.U, first.U)
    outcome = RunOutcome(sc.name)
    rows = []
    for name, h in (("forward", forward), ("reverse", reverse)):
        for i in range(3):
            for j in range(3):
                rows.append((name, i, j, h.U[i, j].real, h.U[i, j].imag))
    outcome.artifacts.append(write_csv(os.path.join(out, "su3_concat.csv"), sc, ["order", "row", "col", "re", "im"], rows))
    outcome.summary = {
        "angle": angle,
        "forward": forward.to_dict(),
        "reverse": reverse.to_dict(),
        "commutator_frobenius": comm,
        "unitarity_error": max(unitarity_error(forward.U), unitarity_error(reverse.U)),
    }
    outcome.artifacts.append(write_json(os.path.join(out, "su3_concat.json"), sc, outcome.summary))
    return outcome


RUNNERS = {
    "holonomy": run_holonomy,
    "fig2b-energies": run_fig2b,
    "fig3-couplings": run_fig3,
    "fig4-alpha": run_fig4,
    "gate-validation": run_gate,
    "su3-concat": run_su3,
}


def run_scenario(sc: Scenario, out: str, threads: int = 1) -> RunOutcome:
    os.makedirs(out, exist_ok=True)
    return RUNNERS[sc.name](sc, out, threads)
