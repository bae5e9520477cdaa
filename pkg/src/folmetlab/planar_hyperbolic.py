"""Poincare densities of planar model domains.

Normalization is curvature -1: the unit disc carries 2/(1-|q|^2) and the
upper half-plane carries 1/Im(w).  Annulus densities are never written down
in closed form; they are obtained by pulling back the half-plane density
through an explicit covering chain (log, then exp(i*pi*u/a)).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DomainError, InputError

#: inputs closer than this to a puncture or boundary circle are rejected
SINGULAR_GUARD = 1e-12


@dataclass(frozen=True)
class HyperbolicDensity:
    value: float
    convention_check: str  # "closed_form" | "oracle" | "bound_pair"

    def __float__(self) -> float:
        return float(self.value)


# ---------------------------------------------------------------------------
# vectorized kernels (no validation, used internally on arrays)


def _disc(q, R):
    a = np.abs(q)
    return 2.0 * R / (R * R - a * a)


def _punctured(q, R):
    a = np.abs(q)
    return 2.0 / (a * np.abs(np.log(a * a / (R * R))))


def half_plane_density(w):
    """Density of the upper half-plane at w."""
    return 1.0 / np.imag(w)


def _strip_to_half_plane(u, width):
    return np.exp(1j * math.pi * u / width)


def _strip_to_half_plane_deriv(u, width):
    return (1j * math.pi / width) * np.exp(1j * math.pi * u / width)


def strip_density(u, width):
    """Density of {0 < Re u < width} pulled back from the half-plane."""
    w = _strip_to_half_plane(u, width)
    return half_plane_density(w) * np.abs(_strip_to_half_plane_deriv(u, width))


def _annulus(q, r, R):
    width = math.log(R / r)
    u = np.log(np.asarray(q, dtype=complex) / r)
    # d/dq log(q/r) = 1/q
    return strip_density(u, width) / np.abs(q)


# ---------------------------------------------------------------------------
# validated scalar API


def _as_complex(q) -> complex:
    try:
        z = complex(q)
    except (TypeError, ValueError) as exc:
        raise InputError(f"not a complex number: {q!r}") from exc
    if not (math.isfinite(z.real) and math.isfinite(z.imag)):
        raise InputError(f"non-finite planar point {q!r}")
    return z


def _positive(name: str, v: float) -> float:
    v = float(v)
    if not (math.isfinite(v) and v > 0):
        raise InputError(f"{name} must be a positive finite real, got {v!r}")
    return v


def density_disc(q, R: float) -> HyperbolicDensity:
    z = _as_complex(q)
    R = _positive("R", R)
    if R - abs(z) < SINGULAR_GUARD:
        raise DomainError(f"|q|={abs(z)} not inside disc of radius {R}")
    return HyperbolicDensity(float(_disc(z, R)), "closed_form")


def density_punctured_disc(q, R: float) -> HyperbolicDensity:
    z = _as_complex(q)
    R = _positive("R", R)
    if abs(z) < SINGULAR_GUARD:
        raise DomainError("density diverges at the puncture")
    if R - abs(z) < SINGULAR_GUARD:
        raise DomainError(f"|q|={abs(z)} not inside punctured disc of radius {R}")
    return HyperbolicDensity(float(_punctured(z, R)), "closed_form")


def density_annulus(q, r: float, R: float) -> HyperbolicDensity:
    z = _as_complex(q)
    r = _positive("r", r)
    R = _positive("R", R)
    if not r < R:
        raise InputError(f"annulus needs r < R, got r={r}, R={R}")
    a = abs(z)
    if a - r < SINGULAR_GUARD or R - a < SINGULAR_GUARD:
        raise DomainError(f"|q|={a} outside annulus ({r}, {R})")
    return HyperbolicDensity(float(_annulus(z, r, R)), "oracle")


# ---------------------------------------------------------------------------
# planar domains


@dataclass(frozen=True)
class Disc:
    R: float

    def __post_init__(self):
        _positive("R", self.R)

    kind = "disc"

    def contains(self, q) -> np.ndarray:
        return np.abs(q) < self.R

    def density(self, q) -> np.ndarray:
        return _disc(q, self.R)

    def boundary_distance(self, q) -> np.ndarray:
        return self.R - np.abs(q)

    @property
    def punctures(self) -> tuple:
        return ()

    def bbox(self):
        return (-self.R, self.R, -self.R, self.R)


@dataclass(frozen=True)
class PuncturedDisc:
    R: float

    def __post_init__(self):
        _positive("R", self.R)

    kind = "punctured_disc"

    def contains(self, q) -> np.ndarray:
        a = np.abs(q)
        return (a < self.R) & (a > 0)

    def density(self, q) -> np.ndarray:
        return _punctured(q, self.R)

    def boundary_distance(self, q) -> np.ndarray:
        a = np.abs(q)
        return np.minimum(a, self.R - a)

    @property
    def punctures(self) -> tuple:
        return (0j,)

    def bbox(self):
        return (-self.R, self.R, -self.R, self.R)


@dataclass(frozen=True)
class Annulus:
    r: float
    R: float

    def __post_init__(self):
        _positive("r", self.r)
        _positive("R", self.R)
        if not self.r < self.R:
            raise InputError(f"annulus needs r < R, got {self.r}, {self.R}")

    kind = "annulus"

    def contains(self, q) -> np.ndarray:
        a = np.abs(q)
        return (a > self.r) & (a < self.R)

    def density(self, q) -> np.ndarray:
        return _annulus(q, self.r, self.R)

    def boundary_distance(self, q) -> np.ndarray:
        a = np.abs(q)
        return np.minimum(a - self.r, self.R - a)

    @property
    def punctures(self) -> tuple:
        return ()

    def bbox(self):
        return (-self.R, self.R, -self.R, self.R)


@dataclass(frozen=True)
class Sampled:
    """Planar domain known only through a membership predicate.

    ``punctures`` lists isolated omitted points, which a grid would miss.
    """

    membership: Callable[[np.ndarray], np.ndarray]
    box: tuple  # (xmin, xmax, ymin, ymax)
    punctures: tuple = ()
    pitch: float = 0.01

    kind = "sampled"

    def contains(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=complex)
        inside = np.asarray(self.membership(q), dtype=bool)
        for a in self.punctures:
            inside &= q != a
        return inside

    def bbox(self):
        return self.box


PlanarDomain = Disc | PuncturedDisc | Annulus | Sampled


def catalog_density(omega, q) -> HyperbolicDensity:
    """Validated density of a catalog domain at q."""
    if isinstance(omega, Disc):
        return density_disc(q, omega.R)
    if isinstance(omega, PuncturedDisc):
        return density_punctured_disc(q, omega.R)
    if isinstance(omega, Annulus):
        return density_annulus(q, omega.r, omega.R)
    raise InputError(f"no closed-form density for {type(omega).__name__}")


def is_subdomain(inner, outer) -> bool:
    """Inclusion test for centered catalog domains."""
    def span(d):
        if isinstance(d, Disc):
            return 0.0, d.R, False
        if isinstance(d, PuncturedDisc):
            return 0.0, d.R, True
        if isinstance(d, Annulus):
            return d.r, d.R, True
        raise InputError("inclusion is decided only for catalog domains")

    r1, R1, hole1 = span(inner)
    r2, R2, hole2 = span(outer)
    if R1 > R2:
        return False
    if not hole2:
        return True
    return hole1 and r1 >= r2


# ---------------------------------------------------------------------------
# sampled-domain bounds


@dataclass(frozen=True)
class DensityBounds:
    lower: float
    upper: Optional[float]
    upper_missing: bool = False
    inscribed_radius: Optional[float] = None
    superdomain: str = ""


def _exit_radius(contains, q: complex, angles: np.ndarray, rmax: float, step: float) -> float:
    """Smallest radius along the given rays at which membership fails."""
    dirs = np.exp(1j * angles)
    radii = np.arange(1, int(math.ceil(rmax / step)) + 2) * step
    pts = q + radii[None, :] * dirs[:, None]
    inside = contains(pts.ravel()).reshape(pts.shape)
    first_out = np.where(inside.all(axis=1), radii.size, np.argmin(inside, axis=1))
    best = math.inf
    for k, idx in enumerate(first_out):
        hi = radii[min(idx, radii.size - 1)]
        lo = radii[idx - 1] if idx > 0 else 0.0
        for _ in range(40):
            mid = 0.5 * (lo + hi)
            if contains(np.array([q + mid * dirs[k]]))[0]:
                lo = mid
            else:
                hi = mid
        best = min(best, lo)
    return best


def _enclosing_circle(points: np.ndarray) -> tuple[complex, float]:
    """Minimal enclosing circle of planar points (iterative Welzl)."""
    pts = [complex(p) for p in points]
    rng = np.random.default_rng(0)
    rng.shuffle(pts)

    def circ2(a, b):
        c = 0.5 * (a + b)
        return c, abs(a - c)

    def circ3(a, b, c):
        ax, ay, bx, by, cx, cy = a.real, a.imag, b.real, b.imag, c.real, c.imag
        d = 2 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by))
        if abs(d) < 1e-300:
            cands = [circ2(a, b), circ2(a, c), circ2(b, c)]
            return max(cands, key=lambda t: t[1])
        ux = ((ax * ax + ay * ay) * (by - cy) + (bx * bx + by * by) * (cy - ay) + (cx * cx + cy * cy) * (ay - by)) / d
        uy = ((ax * ax + ay * ay) * (cx - bx) + (bx * bx + by * by) * (ax - cx) + (cx * cx + cy * cy) * (bx - ax)) / d
        cen = complex(ux, uy)
        return cen, abs(a - cen)

    def inside(circle, p):
        return abs(p - circle[0]) <= circle[1] * (1 + 1e-12) + 1e-15

    c = (pts[0], 0.0)
    for i in range(1, len(pts)):
        if inside(c, pts[i]):
            continue
        c = (pts[i], 0.0)
        for j in range(i):
            if inside(c, pts[j]):
                continue
            c = circ2(pts[i], pts[j])
            for k in range(j):
                if not inside(c, pts[k]):
                    c = circ3(pts[i], pts[j], pts[k])
    return c


def density_bounds(domain, q, rays: int = 256) -> DensityBounds:
    """Inclusion bounds for the density of a domain given by membership.

    The upper bound uses the disc of radius dist(q, complement) around q, the
    lower bound the best catalog domain found that contains the whole set.
    """
    z = _as_complex(q)
    contains = domain.contains
    if not bool(contains(np.array([z]))[0]):
        raise DomainError("q is not an interior point of the sampled domain")
    xmin, xmax, ymin, ymax = domain.bbox()
    pitch = getattr(domain, "pitch", 0.01)
    diam = math.hypot(xmax - xmin, ymax - ymin)

    angles = np.linspace(0.0, 2 * math.pi, rays, endpoint=False)
    r_in = _exit_radius(contains, z, angles, diam, pitch)
    for a in domain.punctures:
        r_in = min(r_in, abs(z - a))
    upper: Optional[float]
    if r_in > SINGULAR_GUARD:
        upper = float(_disc(0.0, r_in))
        missing = False
    else:
        upper, missing = None, True

    xs = np.arange(xmin, xmax + pitch, pitch)
    ys = np.arange(ymin, ymax + pitch, pitch)
    grid = (xs[:, None] + 1j * ys[None, :]).ravel()
    members = grid[contains(grid)]
    # grid members miss at most half a cell diagonal of the true set
    slack = pitch * math.sqrt(0.5)
    center, radius = _enclosing_circle(members)
    radius += slack
    best = float(_disc(z - center, radius))
    label = "enclosing_disc"
    for a in domain.punctures:
        Rp = float(np.max(np.abs(members - a))) + slack
        if 0 < abs(z - a) < Rp:
            val = float(_punctured(z - a, Rp))
            if val > best:
                best, label = val, "enclosing_punctured_disc"
    if upper is not None and best > upper:
        # cannot happen for a valid inclusion chain; keep the order honest
        best = upper
    return DensityBounds(lower=best, upper=upper, upper_missing=missing,
                         inscribed_radius=r_in, superdomain=label)


# ---------------------------------------------------------------------------
# covering maps from the unit disc


@dataclass(frozen=True)
class CoveringMap:
    """Holomorphic covering pi: source -> target with both densities known."""

    name: str
    forward: Callable
    derivative: Callable
    preimage: Callable
    source_density: Callable
    target_density: Callable
    source_contains: Callable = field(default=lambda z: np.abs(z) < 1)


def identity_cover() -> CoveringMap:
    return CoveringMap(
        name="identity",
        forward=lambda z: np.asarray(z, dtype=complex),
        derivative=lambda z: np.ones_like(np.asarray(z, dtype=complex)),
        preimage=lambda q: np.asarray(q, dtype=complex),
        source_density=lambda z: _disc(z, 1.0),
        target_density=lambda q: _disc(q, 1.0),
    )


def scaled_disc_cover(R: float) -> CoveringMap:
    R = _positive("R", R)
    return CoveringMap(
        name=f"scale({R})",
        forward=lambda z: R * np.asarray(z, dtype=complex),
        derivative=lambda z: R * np.ones_like(np.asarray(z, dtype=complex)),
        preimage=lambda q: np.asarray(q, dtype=complex) / R,
        source_density=lambda z: _disc(z, 1.0),
        target_density=lambda q: _disc(q, R),
    )


def exp_cover(R: float = 1.0) -> CoveringMap:
    """z -> R exp((z+1)/(z-1)), the universal cover of the punctured disc."""
    R = _positive("R", R)

    def fwd(z):
        z = np.asarray(z, dtype=complex)
        return R * np.exp((z + 1) / (z - 1))

    def der(z):
        z = np.asarray(z, dtype=complex)
        return fwd(z) * (-2.0 / (z - 1) ** 2)

    def pre(q):
        w = np.log(np.asarray(q, dtype=complex) / R)
        return (w + 1) / (w - 1)

    return CoveringMap(
        name=f"exp({R})",
        forward=fwd,
        derivative=der,
        preimage=pre,
        source_density=lambda z: _disc(z, 1.0),
        target_density=lambda q: _punctured(q, R),
    )


def annulus_cover(r: float, R: float) -> CoveringMap:
    """Disc -> right half-plane -> strip -> annulus, composed explicitly."""
    r = _positive("r", r)
    R = _positive("R", R)
    if not r < R:
        raise InputError("annulus needs r < R")
    width = math.log(R / r)

    def parts(z):
        z = np.asarray(z, dtype=complex)
        w = (1 + z) / (1 - z)
        u = (width / math.pi) * (1j * np.log(w) + math.pi / 2)
        return z, w, u

    def fwd(z):
        _, _, u = parts(z)
        return r * np.exp(u)

    def der(z):
        z, w, u = parts(z)
        dw = 2.0 / (1 - z) ** 2
        du = (width / math.pi) * 1j / w * dw
        return r * np.exp(u) * du

    def pre(q):
        u = np.log(np.asarray(q, dtype=complex) / r)
        w = np.exp(-1j * (math.pi * u / width - math.pi / 2))
        return (w - 1) / (w + 1)

    return CoveringMap(
        name=f"annulus({r},{R})",
        forward=fwd,
        derivative=der,
        preimage=pre,
        source_density=lambda z: _disc(z, 1.0),
        target_density=lambda q: _annulus(q, r, R),
    )


def cover_for(omega) -> CoveringMap:
    if isinstance(omega, Disc):
        return scaled_disc_cover(omega.R)
    if isinstance(omega, PuncturedDisc):
        return exp_cover(omega.R)
    if isinstance(omega, Annulus):
        return annulus_cover(omega.r, omega.R)
    raise InputError(f"no catalog cover for {type(omega).__name__}")


def pushforward_consistency_check(cover: CoveringMap, z) -> float:
    """|lambda_target(pi(z)) |pi'(z)| - lambda_source(z)|."""
    z = np.asarray(z, dtype=complex)
    if not np.all(cover.source_contains(z)):
        raise DomainError("z outside the covering source")
    lhs = cover.target_density(cover.forward(z)) * np.abs(cover.derivative(z))
    res = np.abs(lhs - cover.source_density(z))
    return float(res) if res.ndim == 0 else res


def disc_automorphism(a: complex):
    """zeta -> (zeta + a)/(1 + conj(a) zeta), sends 0 to a; returns (map, deriv at 0)."""
    a = complex(a)
    if abs(a) >= 1:
        raise DomainError("automorphism center must lie in the unit disc")

    def m(zeta):
        zeta = np.asarray(zeta, dtype=complex)
        return (zeta + a) / (1 + np.conj(a) * zeta)

    return m, 1.0 - abs(a) ** 2


def rotation_invariant_kinds() -> Sequence[type]:
    return (Disc, PuncturedDisc, Annulus)
