"""Structured config syntax: nested `name { key = value; }` sections.

Values are floats, integers, double-quoted strings, true/false, lists in
brackets and inline tables in braces.  Entries are separated by `;` or `,`
(or just whitespace); `#` starts a comment.  Floats are written with repr,
so parse(serialize(x)) reproduces every number bit for bit.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .cplx_geometry import (Ball, DomainExpr, Difference, Intersection, Polydisc, Thickening, Tube, Union,
                            point_from_pairs)
from .errors import InputError
from .foliation import CATALOG_FIELDS, PolyVectorField


class ConfigError(InputError):
    """Malformed or invalid config; carries the source position when known."""

    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None):
        self.line, self.column = line, column
        where = f"line {line}, column {column}: " if line is not None else ""
        super().__init__(where + message)


class Repeated(list):
    """Values of a key that may appear several times in one section."""


REPEATABLE = {"component"}

_TOKEN = re.compile(r"""
    (?P<ws>[ \t\r]+)
  | (?P<nl>\n)
  | (?P<comment>\#[^\n]*)
  | (?P<string>"(?:[^"\\\n]|\\.)*")
  | (?P<number>[-+]?(?:\d+\.?\d*(?:[eE][-+]?\d+)?|\.\d+(?:[eE][-+]?\d+)?|inf|nan))
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<punct>[{}\[\]=;,])
""", re.VERBOSE)


@dataclass
class _Tok:
    kind: str
    text: str
    line: int
    col: int


def _tokens(text: str) -> list:
    out, line, start, pos = [], 1, 0, 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            raise ConfigError(f"unexpected character {text[pos]!r}", line, pos - start + 1)
        kind = m.lastgroup
        if kind == "nl":
            line, start = line + 1, m.end()
        elif kind not in ("ws", "comment"):
            out.append(_Tok(kind, m.group(), line, pos - start + 1))
        pos = m.end()
    out.append(_Tok("eof", "", line, pos - start + 1))
    return out


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokens(text)
        self.i = 0

    def peek(self) -> _Tok:
        return self.toks[self.i]

    def take(self, kind=None, text=None) -> _Tok:
        t = self.peek()
        if (kind and t.kind != kind) or (text and t.text != text):
            want = text or kind
            got = t.text or "end of input"
            raise ConfigError(f"expected {want!r}, found {got!r}", t.line, t.col)
        self.i += 1
        return t

    def body(self, closing: Optional[str]) -> dict:
        out: dict = {}
        while True:
            t = self.peek()
            if t.kind == "punct" and t.text in ";,":
                self.i += 1
                continue
            if closing is None and t.kind == "eof":
                return out
            if closing is not None and t.kind == "punct" and t.text == closing:
                return out
            key = self.take("ident")
            nxt = self.peek()
            if nxt.kind == "punct" and nxt.text == "{":
                self.i += 1
                value = self.body("}")
                self.take("punct", "}")
            else:
                self.take("punct", "=")
                value = self.value()
            self._store(out, key, value)

    def _store(self, out: dict, key: _Tok, value):
        k = key.text
        if k in REPEATABLE:
            out.setdefault(k, Repeated()).append(value)
        elif k in out:
            raise ConfigError(f"duplicate key {k!r}", key.line, key.col)
        else:
            out[k] = value

    def value(self):
        t = self.peek()
        if t.kind == "number":
            self.i += 1
            s = t.text
            if re.fullmatch(r"[-+]?\d+", s):
                return int(s)
            return float(s)
        if t.kind == "string":
            self.i += 1
            return json.loads(t.text)
        if t.kind == "ident" and t.text in ("true", "false"):
            self.i += 1
            return t.text == "true"
        if t.kind == "punct" and t.text == "[":
            self.i += 1
            items = []
            while True:
                t2 = self.peek()
                if t2.kind == "punct" and t2.text == "]":
                    self.i += 1
                    return items
                items.append(self.value())
                t3 = self.peek()
                if t3.kind == "punct" and t3.text == ",":
                    self.i += 1
                elif not (t3.kind == "punct" and t3.text == "]"):
                    raise ConfigError(f"expected ',' or ']', found {t3.text or 'end of input'!r}", t3.line, t3.col)
        if t.kind == "punct" and t.text == "{":
            self.i += 1
            d = self.body("}")
            self.take("punct", "}")
            return d
        raise ConfigError(f"expected a value, found {t.text or 'end of input'!r}", t.line, t.col)


def parse_config(text: str) -> dict:
    """Parse config text into nested dicts (sections) of plain values."""
    return _Parser(text).body(None)


def _scalar(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, str):
        return json.dumps(v, ensure_ascii=False)
    raise ConfigError(f"cannot serialize value of type {type(v).__name__}")


def _inline(v) -> str:
    if isinstance(v, dict):
        return "{ " + ", ".join(f"{k} = {_inline(x)}" for k, x in _flat_items(v)) + " }"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_inline(x) for x in v) + "]"
    return _scalar(v)


def _flat_items(d: dict):
    for k, v in d.items():
        if isinstance(v, Repeated):
            for x in v:
                yield k, x
        else:
            yield k, v


def serialize_config(tree: dict, indent: int = 0) -> str:
    """Inverse of parse_config: sections become blocks, everything else inline."""
    pad = "  " * indent
    lines = []
    for k, v in _flat_items(tree):
        if isinstance(v, dict):
            lines.append(f"{pad}{k} {{")
            inner = serialize_config(v, indent + 1)
            if inner:
                lines.append(inner.rstrip("\n"))
            lines.append(f"{pad}}}")
        else:
            lines.append(f"{pad}{k} = {_inline(v)};")
    return "\n".join(lines) + ("\n" if lines else "")


# ---------------------------------------------------------------------------
# domains and fields


def _pairs(z) -> list:
    out = []
    for c in np.asarray(z, dtype=complex).reshape(-1):
        out += [float(c.real), float(c.imag)]
    return out


def domain_to_tree(D: DomainExpr) -> dict:
    if isinstance(D, Polydisc):
        return {"polydisc": {"center": _pairs(D.center), "radius": [float(r) for r in D.radius]}}
    if isinstance(D, Ball):
        return {"ball": {"center": _pairs(D.center), "radius": float(D.radius)}}
    if isinstance(D, Tube):
        return {"tube": {"start": _pairs(D.start), "end": _pairs(D.end), "radius": float(D.radius)}}
    if isinstance(D, Union):
        return {"union": {"parts": [domain_to_tree(c) for c in D.children]}}
    if isinstance(D, Intersection):
        return {"intersection": {"parts": [domain_to_tree(c) for c in D.children]}}
    if isinstance(D, Difference):
        return {"difference": {"left": domain_to_tree(D.left), "right": domain_to_tree(D.right)}}
    if isinstance(D, Thickening):
        return {"thickening": {"child": domain_to_tree(D.child), "epsilon": float(D.epsilon)}}
    raise ConfigError(f"cannot serialize domain {type(D).__name__}")


def _need(d: dict, key: str, where: str):
    if not isinstance(d, dict) or key not in d:
        raise ConfigError(f"{where}: missing key {key!r}")
    return d[key]


def _only(d: dict, keys: set, where: str):
    extra = set(d) - keys
    if extra:
        raise ConfigError(f"{where}: unknown key(s) {sorted(extra)}")


def domain_from_tree(t: dict) -> DomainExpr:
    if not isinstance(t, dict) or len(t) != 1:
        raise ConfigError("a domain is a single-entry table such as { polydisc = {...} }")
    (kind, body), = t.items()
    if not isinstance(body, dict):
        raise ConfigError(f"{kind}: expected a table")
    try:
        if kind == "polydisc":
            _only(body, {"center", "radius"}, kind)
            return Polydisc(tuple(point_from_pairs(_need(body, "center", kind))), tuple(_need(body, "radius", kind)))
        if kind == "ball":
            _only(body, {"center", "radius"}, kind)
            return Ball(tuple(point_from_pairs(_need(body, "center", kind))), float(_need(body, "radius", kind)))
        if kind == "tube":
            _only(body, {"start", "end", "radius"}, kind)
            return Tube(tuple(point_from_pairs(_need(body, "start", kind))),
                        tuple(point_from_pairs(_need(body, "end", kind))), float(_need(body, "radius", kind)))
        if kind in ("union", "intersection"):
            _only(body, {"parts"}, kind)
            parts = tuple(domain_from_tree(p) for p in _need(body, "parts", kind))
            return Union(parts) if kind == "union" else Intersection(parts)
        if kind == "difference":
            _only(body, {"left", "right"}, kind)
            return Difference(domain_from_tree(_need(body, "left", kind)), domain_from_tree(_need(body, "right", kind)))
        if kind == "thickening":
            _only(body, {"child", "epsilon"}, kind)
            return Thickening(domain_from_tree(_need(body, "child", kind)), float(_need(body, "epsilon", kind)))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{kind}: {exc}") from None
    raise ConfigError(f"unknown domain kind {kind!r}")


def field_to_tree(X: PolyVectorField) -> dict:
    comps = Repeated()
    for comp in X.components:
        comps.append([{"exps": list(e), "coeff": [float(complex(c).real), float(complex(c).imag)]} for e, c in comp])
    return {"component": comps}


def field_from_tree(t: dict) -> PolyVectorField:
    if not isinstance(t, dict):
        raise ConfigError("field: expected a section")
    if "catalog" in t:
        _only(t, {"catalog", "dim"}, "field")
        name = t["catalog"]
        if name not in CATALOG_FIELDS:
            raise ConfigError(f"field: unknown catalog field {name!r}; known: {sorted(CATALOG_FIELDS)}")
        return CATALOG_FIELDS[name](int(t["dim"])) if "dim" in t else CATALOG_FIELDS[name]()
    _only(t, {"component", "name"}, "field")
    comps = _need(t, "component", "field")
    parsed = []
    for k, comp in enumerate(comps):
        terms = []
        for term in comp:
            if not isinstance(term, dict):
                raise ConfigError(f"field: component {k + 1} terms must be tables {{ exps = [...], coeff = [re, im] }}")
            _only(term, {"exps", "coeff"}, "field term")
            c = _need(term, "coeff", "field term")
            coeff = complex(c[0], c[1]) if isinstance(c, list) else complex(c)
            terms.append((tuple(_need(term, "exps", "field term")), coeff))
        parsed.append(tuple(terms))
    return PolyVectorField(tuple(parsed), name=str(t.get("name", "custom")))


# ---------------------------------------------------------------------------
# experiment configs

KINDS = ("pointwise", "uniform", "kernel", "eta", "hausdorff", "defective", "dense")

SCHEMA = {
    "experiment": {"kind", "name", "seed"},
    "field": None,  # checked by field_from_tree
    "sequence": {"family", "params", "terms", "limit", "base_point", "ambient"},
    "points": {"coords"},
    "compact": {"count", "radius", "mix"},
    "schedule": {"n", "n_max"},
    "numerics": {"h", "tol", "budget", "defective", "threads", "subsequences"},
    "output": {"csv", "summary", "svg", "plot"},
}
REQUIRED = ("experiment", "field", "sequence")


@dataclass
class ExperimentConfig:
    tree: dict
    base_dir: Path = field(default_factory=Path.cwd)

    # -- accessors -----------------------------------------------------------
    def section(self, name: str) -> dict:
        return self.tree.get(name, {})

    @property
    def kind(self) -> str:
        return self.section("experiment").get("kind", "pointwise")

    @property
    def name(self) -> str:
        return self.section("experiment").get("name", "experiment")

    @property
    def seed(self) -> int:
        return int(self.section("experiment").get("seed", 0))

    @property
    def h(self) -> float:
        return float(self.section("numerics").get("h", 0.02))

    @property
    def tol(self) -> Optional[float]:
        t = self.section("numerics").get("tol")
        return None if t is None else float(t)

    @property
    def budget(self) -> int:
        return int(self.section("numerics").get("budget", 2000))

    @property
    def defective(self) -> str:
        return self.section("numerics").get("defective", "declared")

    @property
    def schedule(self) -> list:
        return [int(n) for n in self.section("schedule").get("n", [10, 50, 100, 200])]

    @property
    def n_max(self) -> int:
        s = self.section("schedule")
        return int(s.get("n_max", max(self.schedule)))

    def points(self) -> np.ndarray:
        coords = self.section("points").get("coords", [])
        return np.array([point_from_pairs(c) for c in coords]) if coords else np.zeros((0, 0), dtype=complex)

    def field(self) -> PolyVectorField:
        return field_from_tree(self.tree["field"])

    def output_path(self, key: str) -> Optional[Path]:
        v = self.section("output").get(key)
        return None if v is None else (self.base_dir / v)

    # -- serialization ---------------------------------------------------------
    def to_text(self) -> str:
        return serialize_config(self.tree)

    @classmethod
    def from_text(cls, text: str, base_dir: Optional[Path] = None) -> "ExperimentConfig":
        tree = parse_config(text)
        validate(tree)
        return cls(tree, Path(base_dir) if base_dir else Path.cwd())


def validate(tree: dict) -> None:
    """Reject unknown sections or keys and missing required sections."""
    for name in REQUIRED:
        if name not in tree:
            raise ConfigError(f"missing section {name!r}")
    for name, body in tree.items():
        if name not in SCHEMA:
            raise ConfigError(f"unknown section {name!r}")
        if not isinstance(body, dict):
            raise ConfigError(f"{name!r} must be a section")
        keys = SCHEMA[name]
        if keys is not None:
            _only(body, keys, name)
    kind = tree["experiment"].get("kind", "pointwise")
    if kind not in KINDS:
        raise ConfigError(f"experiment: unknown kind {kind!r}; expected one of {list(KINDS)}")
    field_from_tree(tree["field"])
    seq = tree["sequence"]
    if "family" not in seq and "terms" not in seq:
        raise ConfigError("sequence: give a family name or an explicit list of terms")
    if "terms" in seq and "limit" not in seq:
        raise ConfigError("sequence: an explicit list needs its limit")
    for key in ("h", "tol"):
        v = tree.get("numerics", {}).get(key)
        if v is not None and not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
            raise ConfigError(f"numerics: {key} must be a positive number")
    n = tree.get("schedule", {}).get("n")
    if n is not None and (not isinstance(n, list) or not n or any(not isinstance(x, int) or x < 1 for x in n)):
        raise ConfigError("schedule: n must be a nonempty list of positive integers")


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    return ExperimentConfig.from_text(text, p.resolve().parent)
