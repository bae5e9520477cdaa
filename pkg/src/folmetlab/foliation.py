"""Polynomial vector fields on C^N, their singular sets and their leaves.

A leaf is handed to the rest of the library as a chart q -> phi(q) from a
planar domain.  Catalog fields get closed-form charts whose planar domain is
computed exactly from the ambient domain; every other leaf is represented by
its complex-time flow t -> Phi_t(p), which is a holomorphic immersion of the
component of {t : Phi_t(p) in D} through 0 into the leaf.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

from .cplx_geometry import (Ball, DomainExpr, Intersection, Polydisc, SampleCloud, Union,
                            as_point, as_points, coordinate_radii)
from .errors import DomainError, InputError
from .planar_hyperbolic import Disc, PuncturedDisc, Sampled
from .seeds import SeedSplitter

CATALOG_EXACT = "catalog_exact"
TRACED = "traced"

TRANSVERSAL = "transversal"
NOT_TRANSVERSAL = "not_transversal"
INCONCLUSIVE = "inconclusive"


# ---------------------------------------------------------------------------
# vector fields


Term = tuple  # (exponents tuple, complex coefficient)


@dataclass(frozen=True)
class PolyVectorField:
    """X = sum_i P_i(z) d/dz_i with P_i given as monomial lists."""

    components: tuple  # N tuples of (exps, coeff)
    name: str = "custom"
    kind: str = "custom"
    params: tuple = ()

    def __post_init__(self):
        comps = []
        N = len(self.components)
        if N < 1:
            raise InputError("a vector field needs at least one component")
        nonzero = False
        for comp in self.components:
            terms = []
            for exps, coeff in comp:
                exps = tuple(int(e) for e in exps)
                if len(exps) != N or any(e < 0 for e in exps):
                    raise InputError(f"bad exponent vector {exps} for a field on C^{N}")
                c = complex(coeff)
                if not (math.isfinite(c.real) and math.isfinite(c.imag)):
                    raise InputError("non-finite coefficient")
                if c != 0:
                    terms.append((exps, c))
                    nonzero = True
            comps.append(tuple(terms))
        if not nonzero:
            raise InputError("the zero field defines no foliation")
        object.__setattr__(self, "components", tuple(comps))

    @property
    def dim(self) -> int:
        return len(self.components)

    @cached_property
    def _table(self) -> tuple:
        """Distinct monomials and the (monomial x component) coefficient matrix."""
        mons: dict = {}
        for comp in self.components:
            for exps, _ in comp:
                mons.setdefault(exps, len(mons))
        C = np.zeros((len(mons), self.dim), dtype=complex)
        for i, comp in enumerate(self.components):
            for exps, c in comp:
                C[mons[exps], i] += c
        return tuple(mons), C

    def __call__(self, Z) -> np.ndarray:
        Z = as_points(Z)
        exps, C = self._table
        M = np.ones((Z.shape[0], len(exps)), dtype=complex)
        for k, e in enumerate(exps):
            for j, ej in enumerate(e):
                if ej == 1:
                    M[:, k] *= Z[:, j]
                elif ej > 1:
                    M[:, k] *= Z[:, j] ** ej
        return M @ C

    def jacobian(self, Z) -> np.ndarray:
        Z = as_points(Z)
        M, N = Z.shape
        J = np.zeros((M, N, N), dtype=complex)
        for i, comp in enumerate(self.components):
            for exps, c in comp:
                e = np.asarray(exps)
                for j in range(N):
                    if e[j] == 0:
                        continue
                    ej = e.copy()
                    ej[j] -= 1
                    J[:, i, j] += c * e[j] * np.prod(Z ** ej, axis=1)
        return J

    def sup_bound(self, radii: Sequence[float]) -> float:
        """Upper bound of |X| on the closed polydisc with the given radii."""
        r = np.asarray(radii, dtype=float)
        comp = [sum(abs(c) * float(np.prod(r ** np.asarray(e))) for e, c in terms)
                for terms in self.components]
        return float(np.linalg.norm(comp))

    def jacobian_bound(self, radii: Sequence[float]) -> float:
        r = np.asarray(radii, dtype=float)
        tot = 0.0
        for terms in self.components:
            for e, c in terms:
                for j, ej in enumerate(e):
                    if ej:
                        ee = np.asarray(e).copy()
                        ee[j] -= 1
                        tot += abs(c) * ej * float(np.prod(r ** ee))
        return tot

    def divisible(self, i: int, j: int) -> bool:
        """Whether component i is divisible by z_j."""
        return all(e[j] > 0 for e, _ in self.components[i])

    def vanishing_subspaces(self) -> tuple:
        """Maximal coordinate subspaces span(e_J) on which X vanishes identically.

        X vanishes on span(e_J) iff every monomial of every component has a
        positive exponent at some index outside J.
        """
        N = self.dim
        good = []
        for size in range(N, -1, -1):
            for J in itertools.combinations(range(N), size):
                outside = [k for k in range(N) if k not in J]
                ok = all(any(e[k] > 0 for k in outside) for comp in self.components for e, _ in comp)
                if ok and not any(set(J) <= set(G) for G in good):
                    good.append(J)
        return tuple(good)

    def to_terms(self) -> list:
        return [[(list(e), c) for e, c in comp] for comp in self.components]


def _mono(N: int, **powers) -> tuple:
    e = [0] * N
    for k, v in powers.items():
        e[int(k[1:])] = v
    return tuple(e)


def radial_field(N: int = 2) -> PolyVectorField:
    comps = tuple((((tuple(1 if k == i else 0 for k in range(N))), 1.0),) for i in range(N))
    return PolyVectorField(comps, name="radial", kind="radial", params=(N,))


def diagonal_field(weights: Sequence[int]) -> PolyVectorField:
    w = tuple(int(x) for x in weights)
    if any(x <= 0 for x in w):
        raise InputError("diagonal weights must be positive integers")
    N = len(w)
    comps = tuple(((tuple(1 if k == i else 0 for k in range(N)), float(w[i])),) for i in range(N))
    return PolyVectorField(comps, name=f"diagonal{w}", kind="diagonal", params=w)


def constant_field(N: int, j: int) -> PolyVectorField:
    comps = tuple((((0,) * N, 1.0),) if i == j else () for i in range(N))
    return PolyVectorField(comps, name=f"d/dz{j + 1}", kind="constant", params=(N, j))


def example_6_1_field() -> PolyVectorField:
    """x d/dx + zy d/dy + zy d/dz on C^3."""
    return PolyVectorField(
        (((_mono(3, e0=1), 1.0),), ((_mono(3, e1=1, e2=1), 1.0),), ((_mono(3, e1=1, e2=1), 1.0),)),
        name="x dx + zy dy + zy dz", kind="ex6_1")


def example_6_2_field() -> PolyVectorField:
    """xy d/dx + zy d/dy + zx d/dz on C^3."""
    return PolyVectorField(
        (((_mono(3, e0=1, e1=1), 1.0),), ((_mono(3, e1=1, e2=1), 1.0),), ((_mono(3, e0=1, e2=1), 1.0),)),
        name="xy dx + zy dy + zx dz", kind="ex6_2")


def example_6_3_field() -> PolyVectorField:
    """x d/dx + 2y d/dy on C^2."""
    return diagonal_field((1, 2))


CATALOG_FIELDS = {
    "radial": lambda N=2: radial_field(N),
    "diagonal_1_2": example_6_3_field,
    "ex6_1": example_6_1_field,
    "ex6_2": example_6_2_field,
    "ex6_3": example_6_3_field,
}


# ---------------------------------------------------------------------------
# flows in complex time


def exact_flow(X: PolyVectorField, p, t) -> Optional[np.ndarray]:
    """Closed-form Phi_t(p) for catalog fields, vectorised over t; None otherwise."""
    p = as_point(p)
    t = np.asarray(t, dtype=complex).reshape(-1)
    if X.kind == "radial":
        return p[None, :] * np.exp(t)[:, None]
    if X.kind == "diagonal":
        w = np.asarray(X.params, dtype=float)
        return p[None, :] * np.exp(t[:, None] * w[None, :])
    if X.kind == "constant":
        _, j = X.params
        out = np.repeat(p[None, :], t.size, axis=0)
        out[:, j] += t
        return out
    if X.kind == "ex6_1":
        x0, y0, z0 = p
        c = z0 - y0
        with np.errstate(all="ignore"):
            if c == 0:
                y = y0 / (1 - y0 * t)
            else:
                # Riccati y' = y (y + c), written to stay finite at y0 = 0
                y = c * y0 / ((c + y0) * np.exp(-c * t) - y0)
        return np.stack([x0 * np.exp(t), y, y + c], axis=1)
    return None


def rk4_flow(X: PolyVectorField, p, t, step: float = 1e-2, block: int = 16,
             escape: float = 1e6) -> np.ndarray:
    """Phi_t(p) along straight complex-time segments [0, t], fixed-step RK4.

    Each t gets its own step count (a multiple of `block`, step size at most
    `step`); finished trajectories and those beyond `escape` (reported as
    nan) leave the batch between blocks.
    """
    p = as_point(p)
    t = np.asarray(t, dtype=complex).reshape(-1)
    n = (np.maximum(1, np.ceil(np.abs(t) / (step * block))) * block).astype(int)
    dt_all = t / n
    out = np.full((t.size, p.size), np.nan, dtype=complex)
    ids = np.arange(t.size)
    Z = np.repeat(p[None, :], t.size, axis=0)
    k = 0
    with np.errstate(all="ignore"):
        while ids.size:
            dt = dt_all[ids][:, None]
            for _ in range(block):
                k1 = X(Z)
                k2 = X(Z + 0.5 * dt * k1)
                k3 = X(Z + 0.5 * dt * k2)
                k4 = X(Z + dt * k3)
                Z = Z + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            k += block
            bad = ~np.all(np.isfinite(Z), axis=1) | (np.max(np.abs(Z), axis=1) > escape)
            done = n[ids] == k
            fin = done & ~bad
            out[ids[fin]] = Z[fin]
            keep = ~done & ~bad
            ids, Z = ids[keep], Z[keep]
    return out


def flow(X: PolyVectorField, p, t, step: float = 1e-2, escape: float = 1e6) -> np.ndarray:
    out = exact_flow(X, p, t)
    return rk4_flow(X, p, t, step, escape=escape) if out is None else out


# ---------------------------------------------------------------------------
# singular sets


@dataclass
class SingularSet:
    field: PolyVectorField
    points: np.ndarray  # polished zeros found on the grid
    subspaces: Optional[tuple]  # coordinate subspaces span(e_J) when the template matched
    symbolic: str

    def contains(self, p, tol: float = 1e-9) -> bool:
        p = as_point(p)
        if self.subspaces is not None:
            return bool(self.subspace_hits(p, tol))
        return float(np.linalg.norm(self.field(p[None, :])[0])) < tol

    def subspace_hits(self, p, tol: float = 1e-9) -> list:
        """Template subspaces span(e_J) containing p."""
        p = as_point(p)
        hits = []
        for J in self.subspaces or ():
            out = [k for k in range(p.size) if k not in J]
            if np.all(np.abs(p[out]) <= tol):
                hits.append(J)
        return hits

    def distance(self, Z) -> np.ndarray:
        """Euclidean distance to E (template only)."""
        if self.subspaces is None:
            raise InputError("distance to E needs a symbolic description")
        Z = as_points(Z)
        if not self.subspaces:
            return np.full(Z.shape[0], np.inf)
        d = []
        for J in self.subspaces:
            out = [k for k in range(Z.shape[1]) if k not in J]
            d.append(np.linalg.norm(Z[:, out], axis=1))
        return np.min(np.stack(d), axis=0)


def _describe(subspaces: tuple, N: int) -> str:
    if not subspaces:
        return "empty"
    names = "xyz" if N == 3 else ("xy" if N == 2 else None)
    parts = []
    for J in subspaces:
        if len(J) == 0:
            parts.append("{0}")
        elif len(J) == 1:
            parts.append(f"{names[J[0]]}-axis" if names else f"z{J[0] + 1}-axis")
        else:
            parts.append("span(" + ",".join(f"e{j + 1}" for j in J) + ")")
    return " ∪ ".join(parts)


def newton_polish(X: PolyVectorField, Z, iters: int = 200) -> np.ndarray:
    """Gauss-Newton with least-norm steps; converges onto non-isolated zero sets too."""
    Z = as_points(Z).copy()
    for _ in range(iters):
        F = X(Z)
        if np.all(np.linalg.norm(F, axis=1) < 1e-30):
            break
        J = X.jacobian(Z)
        step = np.einsum("mij,mj->mi", np.linalg.pinv(J, rcond=1e-13), F)
        Z = Z - step
    return Z


def singular_set(X: PolyVectorField, box, h: float, tol: float = 1e-12,
                 max_candidates: int = 4000, seed: int = 0) -> SingularSet:
    """Zeros of X: grid screening, Newton polish, then template matching."""
    N = X.dim
    b = np.asarray(box, dtype=float)
    if b.shape != (2 * N, 2):
        raise InputError(f"box must have shape ({2 * N}, 2)")
    axes = [np.arange(lo, hi + 0.5 * h, h) for lo, hi in b]
    radii = np.hypot(np.max(np.abs(b[0::2]), axis=1), np.max(np.abs(b[1::2]), axis=1))
    lip = max(X.jacobian_bound(radii), 1e-12)
    cand = []
    for chunk in _grid_chunks(axes):
        Z = chunk[:, 0::2] + 1j * chunk[:, 1::2]
        v = np.linalg.norm(X(Z), axis=1)
        cand.append(Z[v <= lip * h * math.sqrt(2 * N)])
    Z = np.concatenate(cand) if cand else np.zeros((0, N), dtype=complex)
    if Z.shape[0] > max_candidates:
        pick = SeedSplitter(seed).rng("singular-candidates").choice(Z.shape[0], max_candidates, replace=False)
        Z = Z[np.sort(pick)]
    if Z.shape[0]:
        Z = newton_polish(X, Z)
        ok = np.linalg.norm(X(Z), axis=1) <= tol
        Z = Z[ok]
        Z = np.unique(np.round(Z, 10), axis=0)
    templ = X.vanishing_subspaces()
    S = SingularSet(X, Z, tuple(templ), _describe(tuple(templ), N))
    if Z.shape[0] and np.any(S.distance(Z) > 1e-6):
        S.subspaces, S.symbolic = None, "numeric"
    return S


def _grid_chunks(axes, chunk: int = 500_000):
    shape = [a.size for a in axes]
    total = int(np.prod(shape))
    for s in range(0, total, chunk):
        idx = np.unravel_index(np.arange(s, min(total, s + chunk)), shape)
        yield np.stack([axes[k][idx[k]] for k in range(len(axes))], axis=1)


def template_singular_set(X: PolyVectorField) -> SingularSet:
    templ = X.vanishing_subspaces()
    return SingularSet(X, np.zeros((0, X.dim), dtype=complex), tuple(templ), _describe(tuple(templ), X.dim))


def in_singular_set(X: PolyVectorField, p, tol: float = 1e-12) -> bool:
    return float(np.linalg.norm(X(as_point(p)[None, :])[0])) <= tol


# ---------------------------------------------------------------------------
# leaf charts


@dataclass
class LeafModel:
    field: PolyVectorField
    point: np.ndarray
    domain: DomainExpr
    chart: Callable[[np.ndarray], np.ndarray]
    derivative: Callable[[np.ndarray], np.ndarray]
    omega: object  # planar domain of the chart
    q0: complex
    provenance: str
    lipschitz: float  # bound of |phi'| over the chart region in use
    description: str = ""
    cloud: Optional[SampleCloud] = None
    tangents: Optional[np.ndarray] = None
    truncated: bool = False
    extra: dict = field(default_factory=dict)

    def region_sdf(self, q) -> np.ndarray:
        """s_D(phi(q)): negative exactly where the chart lands in D."""
        q = np.asarray(q, dtype=complex).reshape(-1)
        Z = self.chart(q)
        out = np.full(q.size, np.inf)
        ok = np.all(np.isfinite(Z), axis=1)
        if ok.any():
            out[ok] = self.domain.sdf(Z[ok])
        return out

    @property
    def punctures(self) -> tuple:
        return tuple(getattr(self.omega, "punctures", ()))


def _monomial_chart(a: np.ndarray, m: np.ndarray):
    a = np.asarray(a, dtype=complex)
    m = np.asarray(m, dtype=int)

    def chart(q):
        q = np.asarray(q, dtype=complex).reshape(-1, 1)
        return a[None, :] * q ** m[None, :]

    def deriv(q):
        q = np.asarray(q, dtype=complex).reshape(-1, 1)
        mm = np.maximum(m - 1, 0)
        return np.where(m[None, :] > 0, a[None, :] * m[None, :] * q ** mm[None, :], 0)

    return chart, deriv


def _monomial_radius(expr: DomainExpr, a: np.ndarray, m: np.ndarray) -> Optional[float]:
    """Radius r with {q : sum a_i q^m_i e_i in expr} = D(0, r), or None."""
    mod = np.abs(a)
    if isinstance(expr, Polydisc):
        if not expr.torus_invariant():
            return None
        rho = np.asarray(expr.radius)
        r = math.inf
        for ai, mi, ri in zip(mod, m, rho):
            if mi == 0:
                if ai >= ri:
                    return 0.0
            elif ai > 0:
                t = (math.log(ri) - math.log(ai)) / mi  # log space: ai may be subnormal
                r = min(r, math.exp(t) if t < 700 else math.inf)
        return r
    if isinstance(expr, Ball):
        if not expr.torus_invariant():
            return None
        const = float(np.sum(mod[m == 0] ** 2))
        if const >= expr.radius ** 2:
            return 0.0
        if np.all((m == 0) | (mod == 0)):
            return math.inf
        f = lambda r: const + float(np.sum((mod[m > 0] * r ** m[m > 0]) ** 2)) - expr.radius ** 2
        hi = 1.0
        while f(hi) < 0:
            hi *= 2
        return brentq(f, 0.0, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps)
    if isinstance(expr, (Union, Intersection)):
        rs = [_monomial_radius(c, a, m) for c in expr.children]
        if any(r is None for r in rs):
            return None
        return max(rs) if isinstance(expr, Union) else min(rs)
    return None


def _circle_outside(expr: DomainExpr, chart, deriv_bound: float, r: float, samples: int = 4096) -> bool:
    """Certify that phi(|q| = r) stays outside expr using a Lipschitz margin."""
    if not math.isfinite(r) or r <= 0:
        return False
    while samples <= 1 << 20:
        th = np.linspace(0, 2 * math.pi, samples, endpoint=False)
        vals = expr.sdf(chart(r * np.exp(1j * th)))
        half_arc = math.pi * r / samples
        if np.all(vals > deriv_bound * half_arc):
            return True
        if np.any(vals <= 0):
            return False
        samples *= 4
    return False


def _truncate_monomial(D: DomainExpr, a, m) -> tuple[Optional[float], str]:
    """Exact radius of the chart disc inside D; handles unions with extra pieces."""
    r = _monomial_radius(D, a, m)
    if r is not None:
        return r, "exact"
    if isinstance(D, Union):
        centred = [c for c in D.children if _monomial_radius(c, a, m) is not None]
        others = [c for c in D.children if _monomial_radius(c, a, m) is None]
        if centred:
            rc = max(_monomial_radius(c, a, m) for c in centred)
            chart, _ = _monomial_chart(a, m)
            lip = float(np.linalg.norm(np.abs(a) * m * (rc ** np.maximum(m - 1, 0))))
            rest = others[0] if len(others) == 1 else Union(tuple(others))
            if _circle_outside(rest, chart, lip, rc):
                return rc, "certified"
    return None, "non-catalog"


def _monomial_data(X: PolyVectorField, p: np.ndarray):
    """(a, m, q0, description) of a closed-form monomial chart through p, or None."""
    N = p.size
    kind = X.kind
    x0 = p[0]
    if kind == "radial":
        r = float(np.linalg.norm(p))
        return p / r, np.ones(N, dtype=int), complex(r), "line through 0"
    if kind == "diagonal" and N == 2:
        w = X.params
        if w[0] != 1:
            return None
        y0 = p[1]
        if x0 != 0:
            k = y0 / x0 ** w[1]
            return np.array([1.0, k]), np.array([1, w[1]]), complex(x0), f"(q, {k:.6g} q^{w[1]})"
        return np.array([0.0, 1.0]), np.array([0, 1]), complex(y0), "y-axis"
    if kind == "ex6_1":
        y0, z0 = p[1], p[2]
        if y0 == 0:
            return np.array([1.0, 0.0, z0]), np.array([1, 0, 0]), complex(x0), "Σ2: (q, 0, z0)"
        if z0 == 0:
            return np.array([1.0, y0, 0.0]), np.array([1, 0, 0]), complex(x0), "Σ3: (q, y0, 0)"
        if x0 == 0 and z0 == y0:
            return np.array([0.0, 1.0, 1.0]), np.array([0, 1, 1]), complex(y0), "Σ1: (0, q, q)"
        return None
    if kind == "ex6_2":
        y0, z0 = p[1], p[2]
        if z0 == 0:
            return np.array([1.0, y0, 0.0]), np.array([1, 0, 0]), complex(x0), "Σ3: (q, y0, 0)"
        if y0 == 0:
            return np.array([x0, 0.0, 1.0]), np.array([0, 0, 1]), complex(z0), "Σ2: (x0, 0, q)"
        if x0 == 0:
            return np.array([0.0, 1.0, z0]), np.array([0, 1, 0]), complex(y0), "Σ1: (0, q, z0)"
        return None
    return None


def _affine_data(X: PolyVectorField, p: np.ndarray):
    """(u, v, q0, punctures, description) for straight non-monomial catalog leaves."""
    if X.kind == "ex6_1" and p[0] == 0 and p[1] != 0 and p[2] != 0:
        c = p[2] - p[1]
        # y' = z' on {x = 0}: the leaf is the line (0, q, q + c) minus its zeros of yz
        return (np.array([0, 0, c], dtype=complex), np.array([0, 1, 1], dtype=complex),
                complex(p[1]), (0j, complex(-c)), "Σ1: (0, q, q + c)")
    if X.kind == "constant":
        _, j = X.params
        u = p.astype(complex).copy()
        u[j] = 0
        v = np.zeros(p.size, dtype=complex)
        v[j] = 1
        return u, v, complex(p[j]), (), f"line along e{j + 1}"
    return None


def leaf_through_catalog(X: PolyVectorField, p, D: DomainExpr) -> Optional[LeafModel]:
    """Closed-form leaf chart through p inside D, or None off the catalog charts."""
    p = as_point(p)
    if p.size != X.dim or D.dim != X.dim:
        raise InputError("field, point and domain dimensions differ")
    if in_singular_set(X, p):
        raise DomainError(f"{p} lies in the singular set")
    if not D.sdf(p[None, :])[0] < 0:
        raise DomainError(f"{p} is not inside the domain")
    mono = _monomial_data(X, p)
    if mono is not None:
        a, m, q0, desc = mono
        a = np.asarray(a, dtype=complex)
        r, how = _truncate_monomial(D, a, m)
        if r is None:
            return None
        chart, deriv = _monomial_chart(a, m)
        puncture = in_singular_set(X, chart(0.0)[0])
        omega = PuncturedDisc(r) if puncture else Disc(r)
        lip = float(np.linalg.norm(np.abs(a) * m * (r ** np.maximum(m - 1, 0)))) if math.isfinite(r) else math.inf
        if not abs(q0) < r:
            raise DomainError("chart preimage outside the truncated disc")
        return LeafModel(X, p, D, chart, deriv, omega, q0, CATALOG_EXACT, lip,
                         description=f"{desc}, Ω = {type(omega).__name__}({r:.6g}) [{how}]",
                         extra={"a": a, "m": m})
    aff = _affine_data(X, p)
    if aff is not None:
        u, v, q0, punct, desc = aff

        def chart(q, u=u, v=v):
            q = np.asarray(q, dtype=complex).reshape(-1, 1)
            return u[None, :] + q * v[None, :]

        def deriv(q, v=v):
            q = np.asarray(q, dtype=complex).reshape(-1)
            return np.repeat(v[None, :], q.size, axis=0)

        lip = float(np.linalg.norm(v))
        bb = D.bbox()
        reach = float(np.max(np.abs(bb))) * 2 + abs(q0)
        omega = Sampled(lambda q: D.sdf(chart(np.asarray(q).reshape(-1))).reshape(np.shape(q)) < 0,
                        (-reach, reach, -reach, reach), punctures=punct, pitch=reach / 512)
        return LeafModel(X, p, D, chart, deriv, omega, q0, CATALOG_EXACT, lip,
                         description=f"{desc}, Ω sampled", extra={"u": u, "v": v})
    return None


def flow_leaf(X: PolyVectorField, p, D: DomainExpr, step: float = 1e-2,
              lipschitz: Optional[float] = None) -> LeafModel:
    """Complex-time chart t -> Phi_t(p) restricted to D."""
    p = as_point(p)
    if in_singular_set(X, p):
        raise DomainError(f"{p} lies in the singular set")
    if not D.sdf(p[None, :])[0] < 0:
        raise DomainError(f"{p} is not inside the domain")
    L = X.sup_bound(coordinate_radii(D)) if lipschitz is None else float(lipschitz)
    exact = exact_flow(X, p, np.zeros(1)) is not None

    # trajectories far outside D only matter as "outside", so stop them early
    escape = 10.0 * float(np.max(coordinate_radii(D)))

    def chart(t):
        return flow(X, p, t, step, escape)

    def deriv(t):
        return X(chart(t))

    speed = float(np.linalg.norm(X(p[None, :])[0]))
    # closed-form charts are cheap far out, so give them room for large discs
    factor, cap = (40.0, 200.0) if exact else (4.0, 50.0)
    reach = min(cap, factor * float(np.max(coordinate_radii(D))) / max(speed, 1e-12))
    omega = Sampled(lambda t: _flow_member(chart, D, t), (-reach, reach, -reach, reach), pitch=reach / 256)
    return LeafModel(X, p, D, chart, deriv, omega, 0j, TRACED, L,
                     description="complex-time flow chart" + (" (closed form)" if exact else " (RK4)"),
                     extra={"reach": reach, "exact_flow": exact})


def _flow_member(chart, D, t):
    t = np.asarray(t, dtype=complex)
    Z = chart(t.reshape(-1))
    out = np.zeros(Z.shape[0], dtype=bool)
    ok = np.all(np.isfinite(Z), axis=1)
    out[ok] = D.sdf(Z[ok]) < 0
    return out.reshape(t.shape)


def leaf_model(X: PolyVectorField, p, D: DomainExpr, **kw) -> LeafModel:
    """Catalog chart when available, complex-time flow chart otherwise."""
    L = leaf_through_catalog(X, p, D)
    return L if L is not None else flow_leaf(X, p, D, **kw)


def trace_leaf(X: PolyVectorField, p, D: DomainExpr, rays: int = 16, step: float = 0.05,
               smax: float = 20.0, rtol: float = 1e-10, atol: float = 1e-12) -> LeafModel:
    """Integrate z' = e^{i theta} X(z) along `rays` directions until leaving D or nearing E."""
    p = as_point(p)
    N = p.size
    if in_singular_set(X, p):
        raise DomainError(f"{p} lies in the singular set")
    if not D.sdf(p[None, :])[0] < 0:
        raise DomainError(f"{p} is not inside the domain")
    speed0 = float(np.linalg.norm(X(p[None, :])[0]))
    guard = 1e-6 * speed0

    pts, tans = [p.copy()], [X(p[None, :])[0] / speed0]
    truncated = False
    for k in range(rays):
        direction = np.exp(2j * math.pi * k / rays)

        def rhs(s, y):
            z = y[:N] + 1j * y[N:]
            v = direction * X(z[None, :])[0]
            return np.concatenate([v.real, v.imag])

        def leave(s, y):
            return float(D.sdf((y[:N] + 1j * y[N:])[None, :])[0])

        def near_e(s, y):
            return float(np.linalg.norm(X((y[:N] + 1j * y[N:])[None, :])[0])) - guard

        leave.terminal = near_e.terminal = True
        y0 = np.concatenate([p.real, p.imag])
        sol = solve_ivp(rhs, (0.0, smax), y0, method="RK45", max_step=step, rtol=rtol, atol=atol,
                        events=(leave, near_e), dense_output=False)
        if sol.status == -1 or (sol.t_events[1].size > 0):
            truncated = True
        Zs = (sol.y[:N] + 1j * sol.y[N:]).T[1:]
        inside = D.sdf(Zs) < 0 if Zs.shape[0] else np.zeros(0, dtype=bool)
        Zs = Zs[inside]
        if Zs.shape[0]:
            V = X(Zs)
            V = V / np.linalg.norm(V, axis=1, keepdims=True)
            pts.append(Zs)
            tans.append(V)
    P = np.vstack([np.atleast_2d(a) for a in pts])
    T = np.vstack([np.atleast_2d(a) for a in tans])
    cloud = SampleCloud(P, step, "leaf")
    base = flow_leaf(X, p, D)
    base.cloud, base.tangents, base.truncated = cloud, T, truncated
    base.description = f"traced along {rays} complex-time rays"
    return base


def write_leaf_csv(L: LeafModel, path) -> None:
    import csv
    if L.cloud is None:
        raise InputError("leaf has no traced cloud")
    N = L.point.size
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"{p}_{i}" for i in range(1, N + 1) for p in ("re", "im")]
                   + [f"t{p}_{i}" for i in range(1, N + 1) for p in ("re", "im")])
        for z, v in zip(L.cloud.points, L.tangents):
            row = []
            for c in z:
                row += [repr(float(c.real)), repr(float(c.imag))]
            for c in v:
                row += [repr(float(c.real)), repr(float(c.imag))]
            w.writerow(row)


def chart_invariant_residual(L: LeafModel, samples: int = 256, seed: int = 0) -> dict:
    """Check that sampled chart images lie in D, off E, with phi' != 0."""
    rng = SeedSplitter(seed).rng("chart-invariant")
    omega = L.omega
    xmin, xmax, ymin, ymax = omega.bbox()
    q = rng.uniform(xmin, xmax, 8 * samples) + 1j * rng.uniform(ymin, ymax, 8 * samples)
    q = q[omega.contains(q)][:samples]
    if q.size == 0:
        return {"count": 0, "max_sdf": -math.inf, "min_field": math.inf, "min_deriv": math.inf}
    Z = L.chart(q)
    return {
        "count": int(q.size),
        "max_sdf": float(np.max(L.domain.sdf(Z))),
        "min_field": float(np.min(np.linalg.norm(L.field(Z), axis=1))),
        "min_deriv": float(np.min(np.linalg.norm(L.derivative(q), axis=1))),
    }


# ---------------------------------------------------------------------------
# transversal type


@dataclass
class TransversalVerdict:
    verdict: str
    witness: Optional[np.ndarray]
    min_angle: float
    details: dict = field(default_factory=dict)


def _cone_angle(d: np.ndarray, cones: list) -> np.ndarray:
    """Angle between unit vectors d (M, N) and the union of span(e_J)."""
    best = np.full(d.shape[0], math.pi / 2)
    for J in cones:
        if len(J) == 0:
            continue
        proj = np.linalg.norm(d[:, list(J)], axis=1)
        best = np.minimum(best, np.arccos(np.clip(proj, 0.0, 1.0)))
    return best


def approach_directions(N: int, count: int = 64, seed: int = 0) -> np.ndarray:
    base = []
    for j in range(N):
        for s in (1, -1, 1j, -1j):
            v = np.zeros(N, dtype=complex)
            v[j] = s
            base.append(v)
    rng = SeedSplitter(seed).rng("approach-directions")
    while len(base) < count:
        v = rng.normal(size=N) + 1j * rng.normal(size=N)
        base.append(v / np.linalg.norm(v))
    return np.array(base[:max(count, 4 * N)])


def _phase_normalise(v: np.ndarray) -> np.ndarray:
    k = int(np.argmax(np.abs(v)))
    return v * np.exp(-1j * np.angle(v[k]))


def transversal_type_check(X: PolyVectorField, E_point, radius: float = 0.25, samples: int = 64,
                           tol: float = 1e-3, scales: int = 8, seed: int = 0,
                           E: Optional[SingularSet] = None) -> TransversalVerdict:
    """Compare limiting leaf directions at an E point with the tangent cone of E."""
    p = as_point(E_point)
    if not in_singular_set(X, p, 1e-9):
        raise DomainError(f"{p} is not a singular point")
    E = E or template_singular_set(X)
    if E.subspaces is None:
        return TransversalVerdict(INCONCLUSIVE, None, math.nan, {"reason": "no symbolic description of E"})
    cones = E.subspace_hits(p, 1e-9)
    if not cones:
        return TransversalVerdict(INCONCLUSIVE, None, math.nan, {"reason": "point not on the template"})
    if all(len(J) == 0 for J in cones):
        return TransversalVerdict(TRANSVERSAL, None, math.pi / 2, {"cone": "{0}"})
    U = approach_directions(p.size, samples, seed)
    rs = radius * 2.0 ** -np.arange(scales)
    angles = np.full((U.shape[0], scales), np.nan)
    dirs = np.zeros((U.shape[0], scales, p.size), dtype=complex)
    for k, r in enumerate(rs):
        Q = p[None, :] + r * U
        V = X(Q)
        nv = np.linalg.norm(V, axis=1)
        regular = nv > 1e-14 * max(1.0, r)
        d = np.zeros_like(V)
        d[regular] = V[regular] / nv[regular, None]
        a = _cone_angle(d, cones)
        angles[regular, k] = a[regular]
        dirs[regular, k] = d[regular]
    finest = angles[:, -3:]
    stuck = np.all(np.isfinite(finest), axis=1) & np.all(finest < tol, axis=1)
    min_angle = float(np.nanmin(angles)) if np.isfinite(angles).any() else math.nan
    if stuck.any():
        i = int(np.argmax(stuck))
        w = _phase_normalise(dirs[i, -1])
        return TransversalVerdict(NOT_TRANSVERSAL, w, float(np.nanmin(finest[i])),
                                  {"approach": U[i], "cones": cones})
    if np.isfinite(min_angle) and min_angle > 10 * tol:
        return TransversalVerdict(TRANSVERSAL, None, min_angle, {"cones": cones})
    return TransversalVerdict(INCONCLUSIVE, None, min_angle, {"cones": cones})
