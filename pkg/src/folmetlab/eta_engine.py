"""The modulus of uniformization eta on leaves.

With a leaf chart phi: Omega -> L and q0 = phi^{-1}(p),

    eta(p) = |phi'(q0)| / lambda_Omega(q0),

where lambda is the curvature -1 density (2 at the centre of the unit disc),
so eta(p) = sup |f'(0)| / 2 over holomorphic discs f in the leaf with
f(0) = p.  Lower bounds come from explicit discs g: D -> Omega with
g(0) = q0, each worth |phi'(q0)| |g'(0)| / 2; upper bounds come from
inclusions (monotonicity of eta in the domain) and from Schwarz-Pick applied
to coordinate projections.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .cplx_geometry import DomainExpr, as_point, coordinate_radii
from .errors import DomainError, InputError
from .foliation import (CATALOG_EXACT, LeafModel, PolyVectorField, in_singular_set,
                        leaf_model, leaf_through_catalog)
from .planar_hyperbolic import (Annulus, Disc, PuncturedDisc, _disc, _punctured, catalog_density,
                                cover_for)
from .seeds import SeedSplitter

CLOSED_FORM = "closed_form"
MC_SANDWICH = "mc_sandwich"
ON_E = "singular"

SHRINKS = tuple(2.0 ** -k for k in range(1, 21))


@dataclass
class EtaEstimate:
    lower: float
    upper: float = math.inf
    exact: Optional[float] = None
    method: str = MC_SANDWICH
    seed: int = 0
    budget: int = 0
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lower > self.upper * (1 + 1e-12) + 1e-15:
            raise InputError(f"inconsistent sandwich {self.lower} > {self.upper}")

    @property
    def value(self) -> float:
        """Best point value: the exact one when known, else the lower bound."""
        return self.exact if self.exact is not None else self.lower

    @property
    def width(self) -> float:
        return self.upper - self.lower


def _speed(L: LeafModel) -> float:
    return float(np.linalg.norm(L.derivative(np.array([L.q0]))[0]))


def _closed_form_omega(omega) -> bool:
    return isinstance(omega, (Disc, PuncturedDisc, Annulus))


def eta_exact(L: LeafModel, p=None) -> EtaEstimate:
    """|phi'(q0)| / lambda_Omega(q0) on a catalog chart."""
    if L.provenance != CATALOG_EXACT or not _closed_form_omega(L.omega):
        raise InputError("eta_exact needs a catalog chart over a closed-form planar domain")
    if p is not None:
        p = as_point(p)
        if np.linalg.norm(L.chart(np.array([L.q0]))[0] - p) > 1e-9 * max(1.0, np.linalg.norm(p)):
            raise InputError("the point is not the chart image of q0")
    if any(abs(L.q0 - a) <= 1e-12 for a in L.punctures):
        raise DomainError("q0 sits at a puncture")
    val = _speed(L) / float(catalog_density(L.omega, L.q0))
    return EtaEstimate(val, val, val, CLOSED_FORM, flags={"leaf": L.description})


def eta_on_E(X: PolyVectorField, p, tol: float = 1e-12) -> EtaEstimate:
    if not in_singular_set(X, p, tol):
        raise DomainError(f"{as_point(p)} is not a singular point")
    return EtaEstimate(0.0, 0.0, 0.0, ON_E)


# ---------------------------------------------------------------------------
# upper bounds


def eta_upper_inclusion(X: PolyVectorField, p, D_outer: DomainExpr,
                        D: Optional[DomainExpr] = None, samples: int = 2000, seed: int = 0) -> EtaEstimate:
    """Exact eta in a larger domain whose leaf is catalog; bounds eta in D from above."""
    p = as_point(p)
    if D is not None:
        rng = SeedSplitter(seed).rng("inclusion-check")
        b = D.bbox()
        pts = rng.uniform(b[:, 0], b[:, 1], size=(samples, b.shape[0]))
        Z = pts[:, 0::2] + 1j * pts[:, 1::2]
        inside = D.sdf(Z) < 0
        if np.any(D_outer.sdf(Z[inside]) >= 0):
            raise DomainError("the inner domain is not contained in the outer one")
    L = leaf_through_catalog(X, p, D_outer)
    if L is None or not _closed_form_omega(L.omega):
        raise InputError("the leaf in the outer domain is not a closed-form catalog leaf")
    val = eta_exact(L).exact
    return EtaEstimate(0.0, val, None, CLOSED_FORM, flags={"outer_leaf": L.description})


def eta_upper_projection(X: PolyVectorField, p, D: DomainExpr) -> float:
    """Schwarz-Pick on each coordinate projection of a leaf disc.

    A disc f in the leaf with f(0) = p has f'(0) = a X(p); its i-th
    coordinate maps into D(0, r_i) (or D*(0, r_i) when {z_i = 0} is
    invariant and p_i != 0), which bounds |a X_i(p)|.
    """
    p = as_point(p)
    v = X(p[None, :])[0]
    speed = float(np.linalg.norm(v))
    if speed == 0:
        return 0.0
    r = coordinate_radii(D)
    best = math.inf
    for i in range(p.size):
        if abs(v[i]) == 0 or not abs(p[i]) < r[i]:
            continue
        if X.divisible(i, i) and p[i] != 0:
            lam = float(_punctured(p[i], r[i]))
        else:
            lam = float(_disc(p[i], r[i]))
        best = min(best, speed / (lam * abs(v[i])))
    return best


# ---------------------------------------------------------------------------
# certified planar regions


def _square_distance(c: np.ndarray, centres: np.ndarray, half) -> np.ndarray:
    dx = np.maximum(np.abs(c.real - centres.real) - half, 0.0)
    dy = np.maximum(np.abs(c.imag - centres.imag) - half, 0.0)
    return np.hypot(dx, dy)


class CertifiedRegion:
    """Squares of a chart plane certified to map into the domain.

    A square with centre c and half-diagonal d is certified when
    s_D(phi(c)) < -Lip * d.  The remaining squares of the tiling (stored
    per refinement level) count as possibly outside, as does everything
    beyond the box and the punctures.
    """

    NEAREST = 8

    def __init__(self, inside, levels, box, punctures, evaluations):
        self.inside = inside  # list of (centres, half)
        self.levels = [(c, h) for c, h in levels if c.size]
        self.box = tuple(box)
        self.punctures = tuple(complex(a) for a in punctures)
        self.evaluations = evaluations
        self._trees = [cKDTree(np.c_[c.real, c.imag]) for c, _ in self.levels]
        if self.levels:
            self._all = np.concatenate([c for c, _ in self.levels])
            self._all_half = np.concatenate([np.full(c.size, h) for c, h in self.levels])
        else:
            self._all = np.zeros(0, dtype=complex)
            self._all_half = np.zeros(0)

    @property
    def certified_area(self) -> float:
        return float(sum(c.size * (2 * h) ** 2 for c, h in self.inside))

    def _edge(self, c: np.ndarray) -> np.ndarray:
        xmin, xmax, ymin, ymax = self.box
        out = np.minimum.reduce([c.real - xmin, xmax - c.real, c.imag - ymin, ymax - c.imag])
        return np.maximum(out, 0.0)

    def clearance(self, c, skip_puncture: Optional[complex] = None) -> np.ndarray:
        """Radius of a certified open disc centred at each c (0 if none)."""
        c = np.asarray(c, dtype=complex).reshape(-1)
        out = self._edge(c)
        for a in self.punctures:
            if skip_puncture is None or a != skip_puncture:
                out = np.minimum(out, np.abs(c - a))
        P = np.c_[c.real, c.imag]
        for (centres, half), tree in zip(self.levels, self._trees):
            k = min(self.NEAREST, centres.size)
            d, idx = tree.query(P, k=k)
            d, idx = d.reshape(c.size, k), idx.reshape(c.size, k)
            exact = _square_distance(c[:, None], centres[idx], half).min(axis=1)
            if k < centres.size:
                # squares beyond the k nearest centres are at least this far
                exact = np.minimum(exact, d[:, -1] - half * math.sqrt(2.0))
            out = np.minimum(out, np.maximum(exact, 0.0))
        return out

    def ring(self, c: complex, rho: float) -> Optional[tuple]:
        """Largest certified annulus {r < |q - c| < R} with r < rho < R, or None."""
        c = complex(c)
        dmin = _square_distance(np.array([c]), self._all, self._all_half)
        dx = np.abs(c.real - self._all.real) + self._all_half
        dy = np.abs(c.imag - self._all.imag) + self._all_half
        dmax = np.hypot(dx, dy)
        if np.any((dmin <= rho) & (dmax >= rho)):
            return None
        pd = np.array([abs(c - a) for a in self.punctures])
        if np.any(pd == rho):
            return None
        inner = np.concatenate([dmax[dmax < rho], pd[pd < rho]])
        outer = np.concatenate([dmin[dmin > rho], pd[pd > rho], self._edge(np.array([c]))])
        r = float(inner.max()) if inner.size else 0.0
        R = float(outer.min())
        return (r, R) if R > rho else None


def certify_region(L: LeafModel, box: tuple, lipschitz: Optional[float] = None,
                   resolution: int = 64, base: int = 16, max_depth: int = 22) -> CertifiedRegion:
    """Quadtree certification, refined more finely near q0 than far from it.

    Near q0 cells go down to r0 / resolution, r0 being the certified radius
    at q0; the allowed cell size grows linearly with the distance to q0.
    """
    lip = L.lipschitz if lipschitz is None else float(lipschitz)
    if not (math.isfinite(lip) and lip > 0):
        raise InputError("certification needs a finite positive Lipschitz bound for the chart")
    xmin, xmax, ymin, ymax = box
    side = max(xmax - xmin, ymax - ymin) / base
    xs = xmin + side * (np.arange(base) + 0.5)
    ys = ymin + side * (np.arange(base) + 0.5)
    cells = (xs[:, None] + 1j * ys[None, :]).ravel()
    half = 0.5 * side
    g0 = float(L.region_sdf(np.array([L.q0]))[0])
    scale = -g0 / lip if math.isfinite(g0) and g0 < 0 else half
    finest = max(scale / resolution, half / 2 ** max_depth)
    inside, levels = [], []
    evals = 0
    while cells.size:
        g = L.region_sdf(cells)
        evals += cells.size
        hd = half * math.sqrt(2.0)
        ok = g < -lip * hd
        inside.append((cells[ok], half))
        rest, gr = cells[~ok], g[~ok]
        allowed = finest * np.maximum(1.0, np.abs(rest - L.q0) / scale)
        stop = half <= allowed * (1 + 1e-12)
        # a blown-up centre says nothing about the rest of the cell
        far = ~stop & (~np.isfinite(gr) | (gr > lip * hd))
        if far.any():
            # the chart is not Lipschitz outside D: keep refining cells with a corner inside
            corners = np.concatenate([rest[far] + half * (sx + 1j * sy) for sx in (-1, 1) for sy in (-1, 1)])
            gc = L.region_sdf(corners).reshape(4, -1)
            evals += corners.size
            stop[np.flatnonzero(far)[np.all(gc > 0, axis=0)]] = True
        levels.append((rest[stop], half))
        split = rest[~stop]
        half *= 0.5
        cells = np.concatenate([split + half * (sx + 1j * sy) for sx in (-1, 1) for sy in (-1, 1)])
    return CertifiedRegion(inside, levels, box, L.punctures, evals)


# ---------------------------------------------------------------------------
# lower bounds


def _cover_value(omega, q0: complex) -> float:
    """|g'(0)| for g = cover(omega) composed with the automorphism sending 0 to the preimage of q0."""
    cov = cover_for(omega)
    z0 = complex(np.asarray(cov.preimage(np.array([q0])))[0])
    if not abs(z0) < 1:
        return 0.0
    return float(abs(np.asarray(cov.derivative(np.array([z0])))[0])) * (1.0 - abs(z0) ** 2)


def _catalog_candidates(omega, q0: complex, budget: int, rng) -> float:
    """Best |g'(0)| over shrinks of omega and seeded random catalog subdomains."""
    a0 = abs(q0)
    best = 0.0
    used = 0
    inner = omega.r if isinstance(omega, Annulus) else 0.0
    R = omega.R
    for eps in SHRINKS:
        if used >= budget:
            return best
        used += 1
        if isinstance(omega, Annulus):
            sub = Annulus(inner + eps * (a0 - inner), R - eps * (R - a0))
        else:
            Rs = (1 - eps) * R
            if not a0 < Rs:
                continue
            sub = type(omega)(Rs)
        best = max(best, _cover_value(sub, q0))
    punct = isinstance(omega, (PuncturedDisc, Annulus))
    while used < budget:
        used += 1
        kind = rng.integers(3)
        if kind == 0:
            # disc D(c, s) inside omega, away from the hole, containing q0
            c = q0 + rng.uniform(0, R) * np.exp(2j * math.pi * rng.uniform())
            s = R - abs(c)
            if punct:
                s = min(s, abs(c) - inner)
            if s <= abs(q0 - c):
                continue
            best = max(best, float(2.0 / _disc(q0 - c, s)))
        elif kind == 1 and punct and not isinstance(omega, Annulus):
            Rs = rng.uniform(a0, R)
            if a0 < Rs:
                best = max(best, float(2.0 / _punctured(q0, Rs)))
        else:
            lo = rng.uniform(inner, a0)
            hi = rng.uniform(a0, R)
            if lo > 0 and lo < a0 < hi:
                best = max(best, _cover_value(Annulus(lo, hi), q0))
    return best


def _ring_value(region: CertifiedRegion, c: complex, q0: complex) -> float:
    rho = abs(q0 - c)
    rr = region.ring(c, rho)
    if rr is None:
        return 0.0
    r, R = rr
    if r > 0:
        return _cover_value(Annulus(r, R), q0 - c)
    if any(a == c for a in region.punctures):
        return float(2.0 / _punctured(q0 - c, R))
    return float(2.0 / _disc(q0 - c, R))


def _certified_candidates(L: LeafModel, region: CertifiedRegion, budget: int, rng,
                          ring_share: float = 0.2) -> float:
    """Best |g'(0)| over discs and annuli certified inside the chart region."""
    q0 = L.q0
    best = 0.0
    r0 = float(region.clearance(np.array([q0]))[0])
    if r0 > 0:
        best = float(2.0 / _disc(0.0, r0))
    used = 1
    for a in region.punctures:
        if used >= budget:
            break
        used += 1
        best = max(best, _ring_value(region, a, q0))
    scale = max(r0, 1e-9)
    best_c = q0
    n_rings = int(ring_share * budget)
    n_discs = budget - used - n_rings
    batch = 256
    while n_discs > 0:
        n = min(batch, n_discs)
        n_discs -= n
        # half the draws explore around q0, half refine around the best centre so far
        explore = rng.uniform(size=n) < 0.5
        centre = np.where(explore, q0, best_c)
        spread = np.where(explore, 3.0 * scale, 0.5 * scale) * np.sqrt(rng.uniform(size=n))
        c = centre + spread * np.exp(2j * math.pi * rng.uniform(size=n))
        s = region.clearance(c)
        d = np.abs(q0 - c)
        ok = s > d
        if not ok.any():
            continue
        vals = np.zeros(n)
        vals[ok] = (s[ok] ** 2 - d[ok] ** 2) / s[ok]  # = 2 / lambda_{D(c,s)}(q0)
        k = int(np.argmax(vals))
        if vals[k] > best:
            best, best_c = float(vals[k]), complex(c[k])
            scale = max(scale, abs(best_c - q0) + vals[k])
    # rings around obstacles near q0: uncertified cells and random centres
    near = region._all[np.abs(region._all - q0) < 4 * scale] if region._all.size else region._all
    for _ in range(n_rings):
        if near.size and rng.uniform() < 0.5:
            c = complex(near[rng.integers(near.size)])
        else:
            c = q0 + 3 * scale * math.sqrt(rng.uniform()) * np.exp(2j * math.pi * rng.uniform())
        best = max(best, _ring_value(region, c, q0))
    return best


def eta_mc_lower(X: PolyVectorField, p, D: DomainExpr, budget: int = 10_000, seed: int = 0,
                 leaf: Optional[LeafModel] = None, lipschitz: Optional[float] = None,
                 reach: Optional[float] = None, resolution: int = 64) -> EtaEstimate:
    """Running maximum of |(phi o g)'(0)| / 2 over a seeded family of discs g.

    Passing the same `lipschitz` and `reach` for nested domains makes the
    certified regions nested too, so the bounds respect the inclusion.
    """
    p = as_point(p)
    if budget < 1:
        raise InputError("budget must be positive")
    if in_singular_set(X, p):
        raise DomainError("p lies in E; use eta_on_E")
    L = leaf if leaf is not None else leaf_model(X, p, D)
    rng = SeedSplitter(seed).rng("eta-mc")
    speed = _speed(L)
    flags = {"leaf": L.description}
    if L.provenance == CATALOG_EXACT and _closed_form_omega(L.omega):
        gd = _catalog_candidates(L.omega, L.q0, budget, rng)
    else:
        if reach is None:
            reach = L.extra.get("reach")
        if reach is None:
            xmin, xmax, ymin, ymax = L.omega.bbox()
            box = (xmin, xmax, ymin, ymax)
        else:
            box = (L.q0.real - reach, L.q0.real + reach, L.q0.imag - reach, L.q0.imag + reach)
        region = certify_region(L, box, lipschitz, resolution=resolution)
        flags["evaluations"] = region.evaluations
        gd = _certified_candidates(L, region, budget, rng)
    lower = speed * gd / 2.0
    if lower <= 0:
        flags["starved"] = True
    return EtaEstimate(lower, math.inf, None, MC_SANDWICH, seed, budget, flags)


def eta_estimate(X: PolyVectorField, p, D: DomainExpr, budget: int = 10_000, seed: int = 0,
                 **kw) -> EtaEstimate:
    """Exact eta on catalog leaves, 0 on E, certified sandwich otherwise."""
    p = as_point(p)
    if in_singular_set(X, p):
        return eta_on_E(X, p)
    L = leaf_model(X, p, D)
    if L.provenance == CATALOG_EXACT and _closed_form_omega(L.omega):
        return eta_exact(L)
    low = eta_mc_lower(X, p, D, budget, seed, leaf=L, **kw)
    up = eta_upper_projection(X, p, D)
    return EtaEstimate(low.lower, max(up, low.lower), None, MC_SANDWICH, seed, budget, low.flags)
