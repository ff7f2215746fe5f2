#!/usr/bin/env python3
"""
Radial kernels for star-scale invariant fields.

Builds the mollifier rho as a normalized self-convolution of a compactly
supported bump, and derives from it the star-scale invariant kernel K0, the
smooth remainder g0, the per-scale layer covariances and the spectral kernel
R used for smooth perturbation fields.
"""

import hashlib
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property, lru_cache, partial
from typing import Any, Callable, Dict, Optional, Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.special import roots_jacobi, roots_legendre

from errors import DivergenceError, DomainError, InvalidMollifierError

logger = logging.getLogger(__name__)

# Gauss-Legendre order used on every smooth piece of a tabulated integrand
PIECE_ORDER = 10
NORMALIZATION_TOL = 1e-9


def bump_profile(sharpness: float = 1.0) -> Callable[[np.ndarray], np.ndarray]:
    """
    Standard smooth bump psi(r) = exp(-k / (1 - (2r)^2)) on [0, 1/2).

    Args:
        sharpness: The constant k in the exponent (k > 0)

    Returns:
        Vectorized radial profile, identically 0 for r >= 1/2
    """
    if sharpness <= 0:
        raise InvalidMollifierError(f"Bump sharpness must be positive, got {sharpness}")

    def psi(r):
        r = np.asarray(r, dtype=float)
        x = 1.0 - (2.0 * r) ** 2
        out = np.zeros_like(r)
        inside = x > 0
        out[inside] = np.exp(-sharpness / x[inside])
        return out

    return psi


def polynomial_profile(power: float = 4.0) -> Callable[[np.ndarray], np.ndarray]:
    """
    Polynomial bump psi(r) = (1 - (2r)^2)^power on [0, 1/2).

    Args:
        power: Exponent (> 0); psi is C^(ceil(power)-1) at the boundary

    Returns:
        Vectorized radial profile, identically 0 for r >= 1/2
    """
    if power <= 0:
        raise InvalidMollifierError(f"Polynomial power must be positive, got {power}")

    def psi(r):
        r = np.asarray(r, dtype=float)
        x = 1.0 - (2.0 * r) ** 2
        return np.where(x > 0, np.maximum(x, 0.0) ** power, 0.0)

    return psi


MOLLIFIERS: Dict[str, Callable[..., Callable[[np.ndarray], np.ndarray]]] = {
    "bump": bump_profile,
    "polynomial": polynomial_profile,
}


@dataclass(frozen=True)
class MollifierSpec:
    """
    Description of the bump psi whose self-convolution is rho.

    Either names a registered profile (with keyword parameters) or carries an
    explicit vectorized base_profile supported in [0, 1/2].
    """

    name: str = "bump"
    params: Dict[str, Any] = field(default_factory=dict)
    table_resolution: int = 4096
    dimension: int = 2
    quadrature_nodes: int = 192
    base_profile: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def profile(self) -> Callable[[np.ndarray], np.ndarray]:
        """Resolve the radial profile psi."""
        if self.base_profile is not None:
            return self.base_profile
        if self.name not in MOLLIFIERS:
            raise InvalidMollifierError(
                f"Unknown mollifier '{self.name}' (known: {sorted(MOLLIFIERS)})"
            )
        return MOLLIFIERS[self.name](**self.params)

    def validate(self, psi: Callable[[np.ndarray], np.ndarray]) -> None:
        """
        Check the profile invariants on a sample grid.

        Raises:
            InvalidMollifierError: if psi is negative, non-finite, or not
                vanishing continuously at r = 1/2
        """
        if self.table_resolution < 1 or self.quadrature_nodes < 8:
            raise InvalidMollifierError(
                "table_resolution must be positive and quadrature_nodes >= 8"
            )
        if self.dimension < 1:
            raise InvalidMollifierError(f"Dimension must be >= 1, got {self.dimension}")

        inner = np.asarray(psi(np.linspace(0.0, 0.5, 513)), dtype=float)
        outer = np.asarray(psi(np.linspace(0.5, 1.0, 129)[1:]), dtype=float)
        if not (np.all(np.isfinite(inner)) and np.all(np.isfinite(outer))):
            raise InvalidMollifierError("Profile has non-finite samples")
        if np.min(inner) < 0:
            raise InvalidMollifierError("Profile must be nonnegative")
        peak = float(np.max(inner))
        if peak <= 0:
            raise InvalidMollifierError("Profile vanishes identically")
        if abs(inner[-1]) > 1e-12 * peak or np.any(outer != 0):
            raise InvalidMollifierError("Profile must vanish for r >= 1/2")


@dataclass(frozen=True, eq=False)
class RadialKernel:
    """
    Tabulated radial function, interpolated in s = r^2.

    Interpolating the profile f with k(x) = f(|x|^2) keeps the kernel smooth at
    the origin. Evaluation is exactly 0 at and beyond support_radius.
    """

    radii: np.ndarray
    values: np.ndarray
    support_radius: float
    interpolation_order: int = 3
    label: str = "kernel"

    def __post_init__(self):
        radii = np.asarray(self.radii, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if radii.ndim != 1 or radii.shape != values.shape or radii.size < 2:
            raise ValueError("radii and values must be 1-D arrays of equal length")
        if radii[0] < 0 or np.any(np.diff(radii) <= 0):
            raise ValueError("radii must be nonnegative and strictly ascending")
        if not np.all(np.isfinite(values)):
            raise ValueError(f"Kernel '{self.label}' has non-finite values")
        if self.interpolation_order not in (1, 3):
            raise ValueError("interpolation_order must be 1 or 3")
        object.__setattr__(self, "radii", radii)
        object.__setattr__(self, "values", values)

    @cached_property
    def _interpolant(self):
        squares = self.radii**2
        if self.interpolation_order == 1:
            return partial(np.interp, xp=squares, fp=self.values)
        return PchipInterpolator(squares, self.values, extrapolate=True)

    @cached_property
    def fingerprint(self) -> str:
        """Content digest identifying the table (used for cache keys)."""
        digest = hashlib.sha256()
        digest.update(self.radii.tobytes())
        digest.update(self.values.tobytes())
        digest.update(f"{self.support_radius!r}/{self.interpolation_order}".encode())
        return digest.hexdigest()[:16]

    def profile(self, s) -> np.ndarray:
        """Evaluate the radial profile f at squared radii s."""
        s = np.asarray(s, dtype=float)
        out = np.zeros_like(s)
        inside = s < self.support_radius**2
        if np.any(inside):
            clipped = np.clip(s[inside], 0.0, self.radii[-1] ** 2)
            out[inside] = self._interpolant(clipped)
        return out

    def __call__(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        return self.profile(r * r)


def _gauss_pieces(func: Callable, breaks: np.ndarray, order: int = PIECE_ORDER):
    """
    Integrate func over consecutive intervals [breaks[k], breaks[k+1]].

    Returns:
        Array of per-interval integrals (vectorized Gauss-Legendre)
    """
    nodes, weights = roots_legendre(order)
    lo = breaks[:-1, None]
    half = 0.5 * (breaks[1:, None] - lo)
    points = lo + half * (nodes[None, :] + 1.0)
    return (func(points) * weights[None, :]).sum(axis=1) * half[:, 0]


def _radial_self_convolution(
    psi: Callable, radii: np.ndarray, dimension: int, nodes: int
) -> np.ndarray:
    """(psi * psi)(r) for a radial psi supported in the ball of radius 1/2."""
    x, w = roots_legendre(nodes)
    out = np.empty_like(radii)

    if dimension == 1:
        a = 0.5 * x
        weighted = psi(np.abs(a)) * 0.5 * w
        for idx in np.array_split(np.arange(radii.size), max(1, radii.size // 256)):
            r = radii[idx, None]
            out[idx] = psi(np.abs(r - a[None, :])) @ weighted
        return out

    # a = |y| on [0, 1/2]; u = cos(angle) with weight (1-u^2)^((d-3)/2)
    a = 0.25 * (x + 1.0)
    weighted = psi(a) * a ** (dimension - 1) * 0.25 * w
    jacobi = 0.5 * (dimension - 3)
    u, wu = roots_jacobi(nodes, jacobi, jacobi)
    for idx in np.array_split(np.arange(radii.size), max(1, radii.size // 48)):
        r = radii[idx, None, None]
        dist2 = a[None, :, None] ** 2 + r**2 - 2.0 * a[None, :, None] * r * u
        inner = psi(np.sqrt(np.maximum(dist2, 0.0))) @ wu
        out[idx] = inner @ weighted
    return out


def build_mollifier(spec: MollifierSpec) -> RadialKernel:
    """
    Tabulate rho = (psi * psi) / (psi * psi)(0) on [0, 1].

    Args:
        spec: Mollifier description

    Returns:
        RadialKernel with rho(0) = 1 and support radius 1

    Raises:
        InvalidMollifierError: if the profile is invalid or normalization fails
    """
    psi = spec.profile()
    spec.validate(psi)

    radii = np.linspace(0.0, 1.0, spec.table_resolution + 1)
    conv = _radial_self_convolution(psi, radii, spec.dimension, spec.quadrature_nodes)
    peak = conv[0]
    if not np.isfinite(peak) or peak <= 0:
        raise InvalidMollifierError(f"Self-convolution at 0 is {peak}, cannot normalize")

    values = conv / peak
    values[-1] = 0.0
    if not np.all(np.isfinite(values)) or np.max(np.abs(values)) > 1 + NORMALIZATION_TOL:
        raise InvalidMollifierError(
            f"Normalized table leaves [-1, 1] (max |rho| = {np.max(np.abs(values)):.6g})"
        )

    logger.info(
        f"✓ Mollifier '{spec.name}' tabulated at {radii.size} radii (d={spec.dimension})"
    )
    return RadialKernel(radii, values, 1.0, 3, label=f"rho[{spec.name}]")


def eval_g0(rho: RadialKernel, r: float) -> float:
    """
    Smooth remainder g0(r) = int_{r^2}^1 (f(t) - 1) / (2t) dt.

    Integrates piecewise between table breakpoints, where the interpolated
    profile is smooth. For r >= 1, f vanishes and g0(r) = ln r.

    Args:
        rho: Mollifier kernel
        r: Radius (r >= 0, r = 0 allowed)

    Returns:
        g0(r)
    """
    if r < 0:
        raise DomainError(f"Radius must be nonnegative, got {r}")
    if r >= rho.support_radius:
        return math.log(r / rho.support_radius)

    lo = r * r
    squares = rho.radii**2
    hi = rho.support_radius**2
    breaks = np.concatenate(([lo], squares[(squares > lo) & (squares < hi)], [hi]))
    pieces = _gauss_pieces(lambda s: (rho.profile(s) - 1.0) / (2.0 * s), breaks)
    return float(math.fsum(pieces))


def eval_k0(rho: RadialKernel, r: float, method: str = "substitution") -> float:
    """
    Star-scale invariant kernel K0(r) = int_0^inf rho(e^u r) du.

    Args:
        rho: Mollifier kernel
        r: Radius (r > 0)
        method: "substitution" uses -ln r + g0(r); "direct" integrates the
            definition in u between the table breakpoints

    Returns:
        K0(r), exactly 0 for r >= 1

    Raises:
        DivergenceError: at r = 0 (logarithmic singularity)
    """
    if r < 0:
        raise DomainError(f"Radius must be nonnegative, got {r}")
    if r == 0:
        raise DivergenceError("K0 diverges logarithmically at r = 0")
    if r >= rho.support_radius:
        return 0.0

    if method == "substitution":
        return -math.log(r) + eval_g0(rho, r)
    if method != "direct":
        raise ValueError(f"Unknown method '{method}'")

    inner = rho.radii[(rho.radii > r) & (rho.radii < rho.support_radius)]
    breaks = np.concatenate(([0.0], np.log(inner / r), [math.log(rho.support_radius / r)]))
    pieces = _gauss_pieces(lambda u: rho(r * np.exp(u)), breaks)
    return float(math.fsum(pieces))


@dataclass(frozen=True, eq=False)
class StarScaleProfile:
    """rho together with its g0 table; evaluates K0 on arrays."""

    rho: RadialKernel
    remainder: RadialKernel

    def k0(self, x) -> np.ndarray:
        """K0 at radii x > 0 (0 at and beyond radius 1)."""
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        inside = x < 1.0
        out[inside] = -np.log(x[inside]) + self.remainder(x[inside])
        return out


@lru_cache(maxsize=16)
def star_scale_profile(rho: RadialKernel) -> StarScaleProfile:
    """
    Tabulate g0 at the nodes of rho by cumulative piecewise quadrature.

    Args:
        rho: Mollifier kernel with support radius 1

    Returns:
        StarScaleProfile (cached per kernel object)
    """
    if rho.support_radius != 1.0:
        raise InvalidMollifierError("Star-scale kernels require rho supported in the unit ball")

    squares = rho.radii**2
    pieces = _gauss_pieces(lambda s: (rho.profile(s) - 1.0) / (2.0 * s), squares)
    tail = np.concatenate((np.cumsum(pieces[::-1])[::-1], [0.0]))
    remainder = RadialKernel(rho.radii, tail, 1.0, 3, label=f"g0[{rho.label}]")
    logger.debug(f"g0 table built for {rho.label} (g0(0) = {tail[0]:.10f})")
    return StarScaleProfile(rho, remainder)


@dataclass(frozen=True, eq=False)
class LayerCovariance:
    """
    Covariance c(r) = int_{s_lo}^{s_hi} rho(e^u r) du of one scale layer.

    Evaluated in closed form from K0: c(r) = K0(r e^{s_lo}) - K0(r e^{s_hi}),
    so layers are exactly additive in the scale parameter.
    """

    s_lo: float
    s_hi: float
    profile: StarScaleProfile

    @property
    def variance(self) -> float:
        return self.s_hi - self.s_lo

    @property
    def support_radius(self) -> float:
        return math.exp(-self.s_lo)

    @property
    def rho(self) -> RadialKernel:
        return self.profile.rho

    def __call__(self, r) -> np.ndarray:
        r = np.abs(np.asarray(r, dtype=float))
        out = np.zeros_like(r)
        width = self.s_hi - self.s_lo
        if width == 0:
            return out

        x_lo = r * math.exp(self.s_lo)
        x_hi = r * math.exp(self.s_hi)
        g = self.profile.remainder

        origin = r == 0
        both = ~origin & (x_hi < 1.0)
        straddle = ~origin & (x_lo < 1.0) & (x_hi >= 1.0)
        out[origin] = width
        out[both] = width + g(x_lo[both]) - g(x_hi[both])
        out[straddle] = -np.log(x_lo[straddle]) + g(x_lo[straddle])
        return out

    @cached_property
    def kernel(self) -> RadialKernel:
        """Tabulated copy of c on a log-spaced radial grid (for export)."""
        support = self.support_radius
        finest = 1e-3 * math.exp(-self.s_hi)
        radii = np.concatenate(([0.0], np.geomspace(finest, support, 2048)))
        return RadialKernel(
            radii, self(radii), support, 3, label=f"layer[{self.s_lo:g},{self.s_hi:g}]"
        )


def layer_covariance(rho: RadialKernel, s_lo: float, s_hi: float) -> LayerCovariance:
    """
    Covariance of the white-noise layer between log-scales s_lo and s_hi.

    Args:
        rho: Mollifier kernel
        s_lo: Lower log-scale (>= 0)
        s_hi: Upper log-scale (>= s_lo; equal endpoints give the zero layer)

    Returns:
        LayerCovariance with c(0) = s_hi - s_lo
    """
    if s_lo < 0 or s_hi < s_lo:
        raise DomainError(f"Invalid scale interval [{s_lo}, {s_hi}]")
    return LayerCovariance(float(s_lo), float(s_hi), star_scale_profile(rho))


def estimate_bound_A(
    rho: RadialKernel, t_grid: Sequence[float], r_grid: Sequence[float]
) -> float:
    """
    Grid maximum of |c_{0,t}(r) - min(t, ln+(1/r))|.

    The true constant of the comparison bound is at least this value.

    Args:
        rho: Mollifier kernel
        t_grid: Nonempty list of scales t >= 0
        r_grid: Nonempty list of radii r >= 0

    Returns:
        Estimated constant A
    """
    t_values = np.asarray(list(t_grid), dtype=float)
    radii = np.asarray(list(r_grid), dtype=float)
    if t_values.size == 0 or radii.size == 0:
        raise DomainError("estimate_bound_A needs nonempty grids")

    with np.errstate(divide="ignore"):
        log_plus = np.where(radii > 0, np.maximum(-np.log(radii), 0.0), np.inf)

    bound = 0.0
    for t in t_values:
        if t == 0:
            continue
        covariance = layer_covariance(rho, 0.0, t)(radii)
        gap = np.abs(covariance - np.minimum(t, log_plus))
        bound = max(bound, float(np.max(gap)))
    return bound


def spectral_kernel_R(d: int, xi) -> np.ndarray:
    """
    Spectral density (1 + |xi|^2)^(-d/2 - 2) of the perturbation kernel R.

    Args:
        d: Dimension
        xi: Frequency magnitude(s), xi >= 0

    Returns:
        Density value(s)
    """
    xi = np.asarray(xi, dtype=float)
    if np.any(xi < 0):
        raise DomainError("Frequency magnitude must be nonnegative")
    return (1.0 + xi**2) ** (-0.5 * d - 2.0)
