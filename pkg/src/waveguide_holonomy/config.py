"""Scenario configuration files.

Grammar (one statement per line, ``#`` starts a comment outside strings)::

    file      := { line }
    line      := section | include | assignment | blank
    section   := "[" IDENT "]"
    include   := "include" STRING
    assignment:= IDENT "=" value
    value     := STRING | NUMBER | "true" | "false" | list
    list      := "[" [ value { "," value } [ "," ] ] "]"

Strings are double-quoted with ``\\"`` and ``\\\\`` escapes. Numbers follow
Python's int/float literal syntax (``1``, ``-2.5``, ``1e-4``). Lists may nest
but must close on the line where they open. ``include`` splices another file
(path relative to the including file) at that point; the current section
carries over into it.

Every key has a documented type and default (see ``SCHEMA``); unknown sections
or keys, duplicate keys and type or range violations are rejected with the
file, line and column of the offending token.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Any, Callable

from .errors import ValidationError
from .potential import V0_STRUCTURED

SCENARIO_NAMES = (
    "holonomy",
    "fig2b-energies",
    "fig3-couplings",
    "fig4-alpha",
    "gate-validation",
    "su3-concat",
)


class ConfigError(ValidationError):
    """Any configuration problem; carries its source location."""

    kind = "config"

    def __init__(self, message: str, source: str = "<config>", line: int = 0, col: int = 0):
        self.source, self.line, self.col, self.message = source, line, col, message
        super().__init__(f"{source}:{line}:{col}: {self.kind} error: {message}")


class ConfigLexicalError(ConfigError):
    kind = "lexical"


class ConfigSyntaxError(ConfigError):
    kind = "syntax"


class ConfigSemanticError(ConfigError):
    kind = "semantic"


# ---------------------------------------------------------------------------
# schema
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Key:
    type: str  # str, int, float, bool, float[], int[], str[], float[][]
    default: Any
    check: Callable[[Any], str | None] | None = None
    doc: str = ""


def _choices(*names):
    def check(v):
        return None if v in names else f"must be one of {', '.join(names)}"

    return check


def _positive(v):
    vals = v if isinstance(v, list) else [v]
    return None if all(x > 0 for x in vals) else "must be positive"


def _non_negative(v):
    return None if v >= 0 else "must be non-negative"


def _at_least(n):
    return lambda v: None if v >= n else f"must be >= {n}"


def _length(n):
    return lambda v: None if len(v) in (0, n) else f"must have {n} entries"


SCHEMA: dict[str, dict[str, Key]] = {
    "scenario": {
        "name": Key("str", "holonomy", _choices(*SCENARIO_NAMES), "experiment to run"),
        "description": Key("str", "", None, "free text echoed into reports"),
    },
    "potential": {
        "family": Key("str", "structured-well", _choices("structured-well", "piecewise", "tabulated")),
        "a": Key("float", 1.0, _positive, "fixed well segment (length unit)"),
        "V0": Key("float", V0_STRUCTURED, None, "step height of the structured well"),
        "segments": Key("float[][]", [], None, "piecewise: rows [base, c_1..c_n, value]"),
        "file": Key("str", "", None, "tabulated: CSV with columns x, V"),
        "n_controls": Key("int", 2, _at_least(1)),
    },
    "path": {
        "kind": Key("str", "rectangle", _choices("rectangle", "explicit", "parametric", "csv")),
        "L_in": Key("float", 0.3, _non_negative),
        "L_fin": Key("float", 0.5, _non_negative),
        "w_in": Key("float", 0.0, _non_negative),
        "w_fin": Key("float", 0.02, _non_negative),
        "samples_per_edge": Key("int", 64, _at_least(1)),
        "points": Key("float[][]", [], None, "explicit: control points"),
        "y": Key("float[]", [], None, "explicit: y samples (default uniform)"),
        "components": Key("str[]", [], None, "parametric: expressions in t"),
        "t_range": Key("float[]", [0.0, 1.0], _length(2)),
        "samples": Key("int", 257, _at_least(2)),
        "closed": Key("str", "auto", _choices("auto", "true", "false")),
        "file": Key("str", "", None, "csv: columns y, R_1, R_2, ..."),
        "length": Key("float", 1.0, _positive, "Y - Y0 of the control path itself"),
        "mapping": Key("str", "index", _choices("index", "arc")),
        "profile": Key("str", "identity", _choices("identity", "dilation", "cubic")),
        "profile_factor": Key("float", 5.0, _positive),
    },
    "solver": {
        "N": Key("int", 2000, _at_least(10), "interior grid nodes"),
        "lmax": Key("int", 2, _at_least(1), "highest level solved"),
        "connection": Key("str", "analytic", _choices("analytic", "hellmann-feynman", "finite-difference")),
        "delta": Key("float", 1e-4, _positive, "finite-difference step in control space"),
        "residual_tol": Key("float", 1e-10, _positive),
        "degeneracy_gap": Key("float", 1e-8, _positive),
        "max_step": Key("float", 0.1, _positive, "bound on ||K . dR|| per segment"),
        "two_level_threshold": Key("float", 0.05, _positive),
    },
    "dynamics": {
        "epsilon": Key("float[]", [1e3, 1e4, 1e5], _positive, "total rescaled energies"),
        "length": Key("float", 100.0, _positive, "Lambda: y-extent of the modulated region"),
        "C0": Key("float[]", [1.0, 0.0], None, "input amplitudes (real)"),
        "levels": Key("int", 2, _at_least(1), "levels propagated (l_off + 1)"),
        "form": Key("str", "covariant", _choices("covariant", "expanded")),
        "step_rule": Key("float", 0.1, _positive, "sqrt(eps) dy per RK4 step"),
        "adiabatic_threshold": Key("float", 0.1, _positive),
        "wkb_threshold": Key("float", 0.01, _positive),
        "degeneracy_threshold": Key("float", 0.1, _positive),
        "trace": Key("bool", False, None, "write |C_l(y)|^2 traces"),
    },
    "sweep": {
        "L_range": Key("float[]", [], _length(2), "empty: scenario default"),
        "L_count": Key("int", 0, _non_negative, "0: scenario default"),
        "w_range": Key("float[]", [], _length(2)),
        "w_count": Key("int", 0, _non_negative),
        "angle": Key("float", math.pi / 4, None, "su3-concat: rotation angle per factor"),
    },
}


# ---------------------------------------------------------------------------
# lexer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Token:
    kind: str  # IDENT STRING NUMBER LBRACK RBRACK COMMA EQUALS
    text: str
    value: Any
    col: int


_PUNCT = {"[": "LBRACK", "]": "RBRACK", ",": "COMMA", "=": "EQUALS"}


def tokenize(line: str, source: str, lineno: int) -> list[Token]:
    out = []
    i, n = 0, len(line)
    while i < n:
        ch = line[i]
        if ch in " \t\r":
            i += 1
        elif ch == "#":
            break
        elif ch in _PUNCT:
            out.append(Token(_PUNCT[ch], ch, None, i + 1))
            i += 1
        elif ch == '"':
            j, buf = i + 1, []
            while True:
                if j >= n:
                    raise ConfigLexicalError("unterminated string", source, lineno, i + 1)
                c = line[j]
                if c == "\\":
                    if j + 1 >= n or line[j + 1] not in '"\\':
                        raise ConfigLexicalError("invalid escape in string", source, lineno, j + 1)
                    buf.append(line[j + 1])
                    j += 2
                elif c == '"':
                    break
                else:
                    buf.append(c)
                    j += 1
            out.append(Token("STRING", line[i : j + 1], "".join(buf), i + 1))
            i = j + 1
        elif ch.isalpha() or ch == "_":
            j = i
            while j < n and (line[j].isalnum() or line[j] in "_-."):
                j += 1
            out.append(Token("IDENT", line[i:j], line[i:j], i + 1))
            i = j
        elif ch.isdigit() or ch in "+-.":
            j = i + 1
            while j < n and (line[j].isalnum() or line[j] in "+-._"):
                j += 1
            text = line[i:j]
            try:
                value = int(text) if text.lstrip("+-").isdigit() else float(text)
            except ValueError:
                raise ConfigLexicalError(f"malformed number {text!r}", source, lineno, i + 1) from None
            if isinstance(value, float) and not math.isfinite(value):
                raise ConfigLexicalError(f"non-finite number {text!r}", source, lineno, i + 1)
            out.append(Token("NUMBER", text, value, i + 1))
            i = j
        else:
            raise ConfigLexicalError(f"unexpected character {ch!r}", source, lineno, i + 1)
    return out


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Location:
    source: str
    line: int
    col: int

    def __str__(self):
        return f"{self.source}:{self.line}:{self.col}"


def _parse_value(tokens: list[Token], pos: int, source: str, lineno: int):
    if pos >= len(tokens):
        col = tokens[-1].col + len(tokens[-1].text) if tokens else 1
        raise ConfigSyntaxError("expected a value", source, lineno, col)
    tok = tokens[pos]
    if tok.kind in ("STRING", "NUMBER"):
        return tok.value, pos + 1
    if tok.kind == "IDENT":
        if tok.text in ("true", "false"):
            return tok.text == "true", pos + 1
        raise ConfigSyntaxError(f"bare word {tok.text!r} is not a value (quote strings)", source, lineno, tok.col)
    if tok.kind == "LBRACK":
        items = []
        pos += 1
        while True:
            if pos >= len(tokens):
                raise ConfigSyntaxError("unclosed '['", source, lineno, tok.col)
            if tokens[pos].kind == "RBRACK":
                return items, pos + 1
            v, pos = _parse_value(tokens, pos, source, lineno)
            items.append(v)
            if pos >= len(tokens):
                raise ConfigSyntaxError("unclosed '['", source, lineno, tok.col)
            if tokens[pos].kind == "COMMA":
                pos += 1
            elif tokens[pos].kind != "RBRACK":
                raise ConfigSyntaxError("expected ',' or ']'", source, lineno, tokens[pos].col)
    raise ConfigSyntaxError(f"unexpected {tok.text!r}", source, lineno, tok.col)


@dataclass
class _Raw:
    values: dict = field(default_factory=dict)  # (section, key) -> (value, Location, value col)
    sections: dict = field(default_factory=dict)  # section -> Location of first header


def _read(text: str, source: str, raw: _Raw, section: str | None, stack: tuple) -> str | None:
    for lineno, line in enumerate(text.splitlines(), start=1):
        tokens = tokenize(line, source, lineno)
        if not tokens:
            continue
        first = tokens[0]
        if first.kind == "LBRACK":
            if len(tokens) != 3 or tokens[1].kind != "IDENT" or tokens[2].kind != "RBRACK":
                raise ConfigSyntaxError("section header must be [name]", source, lineno, first.col)
            section = tokens[1].text
            if section not in SCHEMA:
                raise ConfigSemanticError(
                    f"unknown section [{section}]; known: {', '.join(SCHEMA)}", source, lineno, tokens[1].col
                )
            raw.sections.setdefault(section, Location(source, lineno, first.col))
            continue
        if first.kind == "IDENT" and first.text == "include" and (len(tokens) < 2 or tokens[1].kind != "EQUALS"):
            if len(tokens) != 2 or tokens[1].kind != "STRING":
                raise ConfigSyntaxError('include expects one quoted path: include "file"', source, lineno, first.col)
            target = tokens[1].value
            base = os.path.dirname(source) if source not in ("<config>", "<string>") else os.getcwd()
            target = os.path.normpath(os.path.join(base, target))
            if target in stack:
                raise ConfigSemanticError(f"include cycle through {target}", source, lineno, tokens[1].col)
            try:
                with open(target, encoding="utf-8") as fh:
                    sub = fh.read()
            except OSError as exc:
                raise ConfigSemanticError(f"cannot include {target}: {exc.strerror}", source, lineno, tokens[1].col) from None
            section = _read(sub, target, raw, section, stack + (target,))
            continue
        if first.kind != "IDENT":
            raise ConfigSyntaxError(f"expected a key, found {first.text!r}", source, lineno, first.col)
        if len(tokens) < 2 or tokens[1].kind != "EQUALS":
            col = tokens[1].col if len(tokens) > 1 else first.col + len(first.text)
            raise ConfigSyntaxError(f"expected '=' after {first.text!r}", source, lineno, col)
        value, pos = _parse_value(tokens, 2, source, lineno)
        if pos != len(tokens):
            raise ConfigSyntaxError(f"unexpected {tokens[pos].text!r} after value", source, lineno, tokens[pos].col)
        if section is None:
            raise ConfigSemanticError(f"key {first.text!r} appears before any [section]", source, lineno, first.col)
        if first.text not in SCHEMA[section]:
            raise ConfigSemanticError(
                f"unknown key {first.text!r} in [{section}]; known: {', '.join(SCHEMA[section])}",
                source,
                lineno,
                first.col,
            )
        here = Location(source, lineno, first.col)
        prev = raw.values.get((section, first.text))
        if prev is not None:
            raise ConfigSemanticError(
                f"duplicate key {first.text!r} in [{section}]: first set at {prev[1]}, again at {here}",
                source,
                lineno,
                first.col,
            )
        raw.values[(section, first.text)] = (value, here, tokens[2].col)
    return section


def _coerce(value, typ: str, where: Location, col: int, name: str):
    def fail(msg):
        raise ConfigSemanticError(f"{name}: {msg}", where.source, where.line, col)

    def scalar(v, t):
        if t == "str":
            if not isinstance(v, str):
                fail(f"expected a string, got {v!r}")
            return v
        if t == "bool":
            if not isinstance(v, bool):
                fail(f"expected true or false, got {v!r}")
            return v
        if t == "int":
            if isinstance(v, bool) or not isinstance(v, int):
                fail(f"expected an integer, got {v!r}")
            return v
        if t == "float":
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                fail(f"expected a number, got {v!r}")
            return float(v)
        raise AssertionError(t)

    if typ.endswith("[][]"):
        if not isinstance(value, list) or not all(isinstance(r, list) for r in value):
            fail("expected a list of lists")
        return [[scalar(v, typ[:-4]) for v in row] for row in value]
    if typ.endswith("[]"):
        if not isinstance(value, list):
            fail("expected a list")
        return [scalar(v, typ[:-2]) for v in value]
    if isinstance(value, list):
        fail("expected a scalar, got a list")
    return scalar(value, typ)


@dataclass(frozen=True)
class Scenario:
    """Resolved configuration: every key of every section, defaults filled in."""

    name: str
    sections: dict
    explicit: frozenset = field(default=frozenset(), compare=False)
    origin: str = field(default="<config>", compare=False)

    def __getitem__(self, section: str) -> dict:
        return self.sections[section]

    def to_dict(self) -> dict:
        return {s: dict(v) for s, v in self.sections.items()}


def defaults() -> dict:
    return {s: {k: _copy(key.default) for k, key in keys.items()} for s, keys in SCHEMA.items()}


def _copy(v):
    return [_copy(x) for x in v] if isinstance(v, list) else v


def parse_config(text: str, source: str = "<config>") -> Scenario:
    """Parse configuration text into a fully resolved Scenario."""
    raw = _Raw()
    stack = (os.path.normpath(source),) if source not in ("<config>", "<string>") else ()
    _read(text, source, raw, None, stack)
    sections = defaults()
    for (sec, key), (value, where, col) in raw.values.items():
        spec = SCHEMA[sec][key]
        v = _coerce(value, spec.type, where, col, f"[{sec}] {key}")
        if spec.check is not None:
            msg = spec.check(v)
            if msg:
                raise ConfigSemanticError(f"[{sec}] {key} {msg}", where.source, where.line, col)
        sections[sec][key] = v
    _cross_check(sections, raw)
    return Scenario(sections["scenario"]["name"], sections, frozenset(raw.values), source)


def _cross_check(sections: dict, raw: _Raw) -> None:
    def loc(sec, key):
        hit = raw.values.get((sec, key))
        return (hit[1].source, hit[1].line, hit[1].col) if hit else ("<config>", 0, 0)

    pot, path, solver, dyn = sections["potential"], sections["path"], sections["solver"], sections["dynamics"]
    if pot["family"] == "piecewise" and not pot["segments"]:
        raise ConfigSemanticError("piecewise potential needs segments", *loc("potential", "family"))
    if pot["family"] == "piecewise":
        widths = {len(r) for r in pot["segments"]}
        if widths != {pot["n_controls"] + 2}:
            raise ConfigSemanticError(
                f"each segment row must have n_controls + 2 = {pot['n_controls'] + 2} entries",
                *loc("potential", "segments"),
            )
    if pot["family"] == "tabulated" and not pot["file"]:
        raise ConfigSemanticError("tabulated potential needs file", *loc("potential", "family"))
    if path["kind"] == "explicit" and not path["points"]:
        raise ConfigSemanticError("explicit path needs points", *loc("path", "kind"))
    if path["kind"] == "parametric" and not path["components"]:
        raise ConfigSemanticError("parametric path needs components", *loc("path", "kind"))
    if path["kind"] == "csv" and not path["file"]:
        raise ConfigSemanticError("csv path needs file", *loc("path", "kind"))
    if path["y"] and len(path["y"]) != len(path["points"]):
        raise ConfigSemanticError("path y and points must have equal length", *loc("path", "y"))
    if dyn["levels"] > solver["lmax"] + 1:
        raise ConfigSemanticError("dynamics levels exceed solver lmax + 1", *loc("dynamics", "levels"))
    if len(dyn["C0"]) != dyn["levels"]:
        raise ConfigSemanticError(f"C0 must have {dyn['levels']} entries", *loc("dynamics", "C0"))
    if not any(dyn["C0"]):
        raise ConfigSemanticError("C0 must be non-zero", *loc("dynamics", "C0"))
    if sections["sweep"]["L_count"] == 1 or sections["sweep"]["w_count"] == 1:
        raise ConfigSemanticError("sweep counts must be 0 (default) or >= 2", *loc("sweep", "L_count"))


def load_config(path) -> Scenario:
    path = os.fspath(path)
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except UnicodeDecodeError as exc:
        raise ConfigLexicalError(f"file is not UTF-8: {exc.reason}", path, 0, 0) from None
    except OSError as exc:
        raise ConfigSemanticError(f"cannot read config: {exc.strerror}", path, 0, 0) from None
    return parse_config(text, path)


# ---------------------------------------------------------------------------
# serializer
# ---------------------------------------------------------------------------


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, list):
        return "[" + ", ".join(_format(x) for x in v) + "]"
    raise TypeError(type(v))


def serialize(scenario: Scenario) -> str:
    """Canonical text form; parse_config(serialize(s)) == s."""
    lines = []
    for sec, keys in SCHEMA.items():
        lines.append(f"[{sec}]")
        for key in keys:
            lines.append(f"{key} = {_format(scenario.sections[sec][key])}")
        lines.append("")
    return "\n".join(lines)
