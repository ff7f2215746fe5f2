#!/usr/bin/env python3
"""
GMC masses, balanced and tilted ratios, cube subdivision and the cascade
decomposition, plus the closed-form scaling exponents.

All masses are Riemann sums over cell centers accumulated in log-domain.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import logsumexp

from errors import ConfigError, DomainError, GridError
from field_sampler import FieldSample, GridSpec

logger = logging.getLogger(__name__)

# Below this a mass is flagged as numerically underflowed
UNDERFLOW_LOG = math.log(np.finfo(float).tiny)
CASCADE_TOLERANCE = 1e-9


@dataclass(frozen=True)
class GmcParams:
    """
    Parameters (alpha, gamma) of a balanced ratio in dimension d at scale t.

    Inputs with alpha > gamma are accepted; all formulas use the canonical
    pair (alpha_c, gamma_c) = (min, max) and `swapped` records the order.
    """

    alpha: float
    gamma: float
    d: int = 2
    t: float = 0.0

    def __post_init__(self):
        limit = math.sqrt(2 * self.d)
        for name, value in (("alpha", self.alpha), ("gamma", self.gamma)):
            if not 0 < value < limit:
                raise ConfigError(
                    f"{name} = {value} outside (0, sqrt(2d)) = (0, {limit:.4f}) for d = {self.d}"
                )
        if self.alpha == self.gamma:
            raise ConfigError(
                f"alpha and gamma must be distinct (gamma - alpha divides), got {self.alpha}"
            )
        if self.t < 0:
            raise ConfigError(f"Scale t must be nonnegative, got {self.t}")

    @property
    def swapped(self) -> bool:
        return self.alpha > self.gamma

    @property
    def alpha_c(self) -> float:
        return min(self.alpha, self.gamma)

    @property
    def gamma_c(self) -> float:
        return max(self.alpha, self.gamma)

    @property
    def mass_exponents(self) -> Tuple[float, float]:
        """(gamma/(gamma-alpha), alpha/(gamma-alpha)) for the canonical pair."""
        a, g = self.alpha_c, self.gamma_c
        return g / (g - a), a / (g - a)

    def at_scale(self, t: float) -> "GmcParams":
        return GmcParams(self.alpha, self.gamma, self.d, t)


@dataclass(frozen=True, eq=False)
class RegionMask:
    """Set of grid cells with the cell area h^2."""

    mask: np.ndarray
    cell_area: float

    def __post_init__(self):
        object.__setattr__(self, "mask", np.asarray(self.mask, dtype=bool))

    @classmethod
    def full(cls, grid: GridSpec) -> "RegionMask":
        return cls(np.ones((grid.n, grid.n), dtype=bool), grid.cell_area)

    @classmethod
    def square(cls, grid: GridSpec, row: int, col: int, size: int) -> "RegionMask":
        """Square block of size x size cells with top-left cell (row, col)."""
        if size < 1 or row < 0 or col < 0 or row + size > grid.n or col + size > grid.n:
            raise GridError(f"Square ({row}, {col}, {size}) leaves the {grid.n}x{grid.n} grid")
        mask = np.zeros((grid.n, grid.n), dtype=bool)
        mask[row : row + size, col : col + size] = True
        return cls(mask, grid.cell_area)

    @property
    def cells(self) -> int:
        return int(np.count_nonzero(self.mask))

    @property
    def area(self) -> float:
        return self.cells * self.cell_area

    @property
    def is_empty(self) -> bool:
        return self.cells == 0

    def _check(self, other: "RegionMask") -> None:
        if self.mask.shape != other.mask.shape or self.cell_area != other.cell_area:
            raise GridError("Regions live on different grids")

    def union(self, other: "RegionMask") -> "RegionMask":
        self._check(other)
        return RegionMask(self.mask | other.mask, self.cell_area)

    def intersection(self, other: "RegionMask") -> "RegionMask":
        self._check(other)
        return RegionMask(self.mask & other.mask, self.cell_area)

    def is_disjoint(self, other: "RegionMask") -> bool:
        self._check(other)
        return not np.any(self.mask & other.mask)


@dataclass(frozen=True)
class LogMass:
    """Natural log of a GMC mass; an empty region has log_value = -inf."""

    log_value: float
    is_empty: bool = False
    underflow: bool = False

    @property
    def value(self) -> float:
        return math.exp(self.log_value) if not self.is_empty else 0.0


def _region(field_values: FieldSample, region: Optional[RegionMask]) -> RegionMask:
    if region is None:
        return RegionMask.full(field_values.grid)
    if region.mask.shape != field_values.values.shape:
        raise GridError("Region and field grids differ")
    return region


def _log_integral(
    field_values: FieldSample,
    gamma: float,
    variance: float,
    region: RegionMask,
    tilt: Optional[np.ndarray] = None,
) -> LogMass:
    if region.is_empty:
        return LogMass(-math.inf, is_empty=True)
    exponent = gamma * field_values.values[region.mask]
    if tilt is not None:
        exponent = exponent + gamma * tilt[region.mask]
    log_value = float(
        logsumexp(exponent) - 0.5 * gamma**2 * variance + math.log(region.cell_area)
    )
    return LogMass(log_value, underflow=log_value < UNDERFLOW_LOG)


def gmc_mass(
    field_values: FieldSample,
    gamma: float,
    t: Optional[float] = None,
    region: Optional[RegionMask] = None,
) -> LogMass:
    """
    Log of the GMC mass sum_cells e^{gamma X - gamma^2 t / 2} h^2.

    Args:
        field_values: Field sample (X_t, or X_t + Z)
        gamma: Chaos parameter (gamma = 0 gives ln |region|)
        t: Pointwise variance E[X^2]; defaults to the field's variance
        region: Cells to integrate over (whole grid if None)

    Returns:
        LogMass (empty-region sentinel for an empty region)
    """
    variance = field_values.pointwise_variance if t is None else t
    return _log_integral(field_values, gamma, variance, _region(field_values, region))


def log_tilted_ratio(
    field_values: FieldSample,
    f: Optional[Union[np.ndarray, FieldSample]],
    params: GmcParams,
    region: Optional[RegionMask] = None,
) -> float:
    """Log of tilted_ratio (see there)."""
    region = _region(field_values, region)
    if region.is_empty:
        raise GridError("Balanced ratio of an empty region is undefined")
    tilt = None
    if f is not None:
        tilt = f.values if isinstance(f, FieldSample) else np.asarray(f, dtype=float)
        if not np.all(np.isfinite(tilt[region.mask])):
            raise DomainError("Tilt function must be finite on the region")

    variance = field_values.pointwise_variance
    p, q = params.mass_exponents
    low = _log_integral(field_values, params.alpha_c, variance, region, tilt)
    high = _log_integral(field_values, params.gamma_c, variance, region, tilt)
    return p * low.log_value - q * high.log_value


def tilted_ratio(
    field_values: FieldSample,
    f: Optional[Union[np.ndarray, FieldSample]],
    params: GmcParams,
    region: Optional[RegionMask] = None,
) -> float:
    """
    Tilted balanced ratio L_{f,t}(B).

    (int_B e^{alpha f} dM_alpha)^{gamma/(gamma-alpha)} divided by
    (int_B e^{gamma f} dM_gamma)^{alpha/(gamma-alpha)}; invariant under
    f -> f + const and equal to balanced_ratio for f = None.

    Args:
        field_values: Field sample X_t
        f: Deterministic grid function (array or FieldSample), or None
        params: Ratio parameters
        region: Cells B (whole grid if None)

    Returns:
        L_{f,t}(B)
    """
    return math.exp(log_tilted_ratio(field_values, f, params, region))


def balanced_ratio(
    field_values: FieldSample, params: GmcParams, region: Optional[RegionMask] = None
) -> float:
    """
    Balanced ratio Q(B) = M_alpha(B)^{gamma/(gamma-alpha)} / M_gamma(B)^{alpha/(gamma-alpha)}.

    Pathwise Q(B) <= e^{alpha gamma t / 2} |B| (Hölder on the cell sums), with
    equality for constant fields; a single cell gives h^2 e^{alpha gamma t / 2}.
    """
    return tilted_ratio(field_values, None, params, region)


@dataclass(frozen=True)
class Subcube:
    """One cell-aligned square S_i of a subdivision with its affine map."""

    region: RegionMask
    index: Tuple[int, int]
    origin: Tuple[float, float]
    side: float
    group: int
    rows: slice
    cols: slice
    parent_side: float

    def phi(self, x: np.ndarray) -> np.ndarray:
        """phi_i(x) = e^{-s} x + a_i for x in [0, parent_side]^2."""
        return np.asarray(x, dtype=float) * (self.side / self.parent_side) + np.asarray(
            self.origin
        )


def _square_bounds(region: RegionMask) -> Tuple[int, int, int]:
    rows = np.flatnonzero(region.mask.any(axis=1))
    cols = np.flatnonzero(region.mask.any(axis=0))
    if rows.size == 0:
        raise GridError("Cannot subdivide an empty region")
    size = rows[-1] - rows[0] + 1
    if cols[-1] - cols[0] + 1 != size or region.cells != size * size:
        raise GridError("Subdivision needs a full square region")
    return int(rows[0]), int(cols[0]), int(size)


def subdivide(region: RegionMask, es: int) -> List[Subcube]:
    """
    Split a square region into es^d equal cell-aligned squares.

    Squares are labelled into 2^d groups by index parity; squares of one
    group are separated by at least one square side.

    Args:
        region: Full square region of m x m cells
        es: Squares per side (1, or an even divisor of m)

    Returns:
        List of Subcube in row-major index order
    """
    if es != 1 and (es < 2 or es % 2):
        raise GridError(f"Subdivision factor must be 1 or even, got {es}")
    row0, col0, size = _square_bounds(region)
    if size % es:
        raise GridError(f"Subdivision factor {es} does not divide the {size}-cell side")

    spacing = math.sqrt(region.cell_area)
    step = size // es
    cubes = []
    for i in range(es):
        for j in range(es):
            rows = slice(row0 + i * step, row0 + (i + 1) * step)
            cols = slice(col0 + j * step, col0 + (j + 1) * step)
            mask = np.zeros_like(region.mask)
            mask[rows, cols] = True
            cubes.append(
                Subcube(
                    region=RegionMask(mask, region.cell_area),
                    index=(i, j),
                    origin=(rows.start * spacing, cols.start * spacing),
                    side=step * spacing,
                    group=(i % 2) * 2 + (j % 2),
                    rows=rows,
                    cols=cols,
                    parent_side=size * spacing,
                )
            )
    return cubes


def group_separation(cubes: Sequence[Subcube]) -> float:
    """Minimum distance between two distinct squares of the same group."""
    best = math.inf
    for a_pos, a in enumerate(cubes):
        for b in cubes[a_pos + 1 :]:
            if a.group != b.group:
                continue
            gaps = [
                max(0.0, abs(a.origin[k] - b.origin[k]) - 0.5 * (a.side + b.side))
                for k in range(2)
            ]
            best = min(best, math.hypot(*gaps))
    return best


@dataclass
class CascadeResult:
    """lhs = Q_{X_t}(S) and the per-square terms of the cascade relation."""

    lhs: float
    rhs_terms: List[float]
    cube_ratios: List[float]
    groups: List[int]
    tolerance: float = CASCADE_TOLERANCE
    identity_error: float = field(default=0.0)

    @property
    def rhs(self) -> float:
        return math.fsum(self.rhs_terms)

    @property
    def holds(self) -> bool:
        return self.lhs <= self.rhs * (1.0 + self.tolerance)


def split_increment(increment: FieldSample, es: int) -> List[FieldSample]:
    """
    Cut a full-grid increment into es^2 blocks pulled back onto [0, 1]^2.

    Block i carries (X_t - X_s) o phi_i on a grid of n/es cells per side.
    """
    n = increment.grid.n
    if n % es:
        raise GridError(f"Subdivision factor {es} does not divide n = {n}")
    m = n // es
    block_grid = GridSpec(m, increment.grid.pad_factor, increment.grid.side)
    return [
        FieldSample(
            block_grid,
            increment.values[i * m : (i + 1) * m, j * m : (j + 1) * m],
            increment.scale_lo,
            increment.scale_hi,
            f"{increment.seed_path}#{i},{j}",
        )
        for i in range(es)
        for j in range(es)
    ]


def cascade_decomposition(
    field_s: FieldSample,
    increments: Sequence[FieldSample],
    params: GmcParams,
    es: int,
    f: Optional[np.ndarray] = None,
) -> CascadeResult:
    """
    Subdivision identity and subadditivity for Q over S = [0, side]^2.

    X_t is assembled on the fine grid as X_s plus the increment blocks. Each
    term is e^{(alpha gamma/2 - d) s} L^{(i)}_{(f + X_s) o phi_i}(S) computed
    on the pulled-back block grid; it equals Q_{X_t}(S_i) exactly, so
    lhs <= sum of the terms holds pathwise.

    Args:
        field_s: X_s on the fine grid (s = ln es)
        increments: es^d block samples of X_t - X_s (row-major), see split_increment
        params: Ratio parameters
        es: Squares per side
        f: Optional deterministic tilt on the fine grid

    Returns:
        CascadeResult
    """
    grid = field_s.grid
    s = math.log(es)
    if abs(field_s.pointwise_variance - s) > 1e-9:
        raise GridError(f"field_s has variance {field_s.pointwise_variance}, expected ln es = {s}")
    if len(increments) != es * es:
        raise GridError(f"Expected {es * es} increment blocks, got {len(increments)}")
    m = grid.n // es if grid.n % es == 0 else 0
    widths = {round(inc.pointwise_variance, 12) for inc in increments}
    if m == 0 or any(inc.grid.n != m for inc in increments) or len(widths) != 1:
        raise GridError("Increment blocks do not match the subdivision")
    width = increments[0].pointwise_variance
    t = s + width

    tilt = np.zeros((grid.n, grid.n)) if f is None else np.asarray(f, dtype=float)
    assembled = field_s.values.copy()
    cubes = subdivide(RegionMask.full(grid), es)
    for cube, block in zip(cubes, increments):
        assembled[cube.rows, cube.cols] += block.values
    field_t = FieldSample(grid, assembled, 0.0, t, field_s.seed_path)
    lhs = tilted_ratio(field_t, tilt, params)

    prefactor = (0.5 * params.alpha_c * params.gamma_c - params.d) * s
    rhs_terms, cube_ratios = [], []
    for cube, block in zip(cubes, increments):
        block_tilt = tilt[cube.rows, cube.cols] + field_s.values[cube.rows, cube.cols]
        log_term = prefactor + log_tilted_ratio(block, block_tilt, params)
        rhs_terms.append(math.exp(log_term))
        cube_ratios.append(tilted_ratio(field_t, tilt, params, cube.region))

    identity_error = max(
        abs(q - r) / r for q, r in zip(cube_ratios, rhs_terms) if r > 0
    ) if rhs_terms else 0.0
    result = CascadeResult(
        lhs, rhs_terms, cube_ratios, [c.group for c in cubes], identity_error=identity_error
    )
    if not result.holds:
        logger.warning(f"⚠ Cascade relation violated: lhs={lhs:.6g} > rhs={result.rhs:.6g}")
    return result


def barycenter_oscillation(field_s: FieldSample, es: int) -> np.ndarray:
    """
    Per-square sup |X_s - X_s(x_i)| with x_i the node nearest the barycenter.

    Returns:
        es x es array of oscillations
    """
    cubes = subdivide(RegionMask.full(field_s.grid), es)
    out = np.zeros((es, es))
    for cube in cubes:
        block = field_s.values[cube.rows, cube.cols]
        center = block[block.shape[0] // 2, block.shape[1] // 2]
        out[cube.index] = float(np.max(np.abs(block - center)))
    return out


def zeta(params: GmcParams, p: float, q: float) -> float:
    """
    Scaling exponent zeta(p, q) of E[G_alpha(e^{-s}B)^p / G_gamma(e^{-s}B)^q].

    Uses the canonical pair alpha < gamma.
    """
    a, g, d = params.alpha_c, params.gamma_c, params.d
    return 0.5 * a**2 * p**2 - (0.5 * a**2 + d + a * g * q) * p + (0.5 * g**2 + d) * q + 0.5 * g**2 * q**2


def zeta_balanced_closed(params: GmcParams, n: float) -> float:
    """(alpha gamma / 2 - d) n."""
    return (0.5 * params.alpha_c * params.gamma_c - params.d) * n


def zeta_balanced(params: GmcParams, n: float) -> float:
    """
    zeta(n gamma/(gamma-alpha), n alpha/(gamma-alpha)), the exponent of Q^n.

    Raises:
        ArithmeticError: if the direct value departs from the closed form
    """
    p, q = params.mass_exponents
    direct = zeta(params, n * p, n * q)
    closed = zeta_balanced_closed(params, n)
    if not math.isclose(direct, closed, rel_tol=1e-9, abs_tol=1e-9):
        raise ArithmeticError(f"zeta_balanced mismatch: {direct} != {closed}")
    return direct


def epsilon(params: GmcParams) -> float:
    """epsilon = d / alpha^2 + 1/2."""
    return params.d / params.alpha_c**2 + 0.5


def zeta_n(params: GmcParams, n: float) -> float:
    """Minimum exponent zeta(n + epsilon, n alpha/gamma) in closed form."""
    a, g, d = params.alpha_c, params.gamma_c, params.d
    return (g - a) * (0.5 * a - d / g) * n - 0.5 * (0.5 * a + d / a) ** 2


def small_ball_delta(params: GmcParams) -> float:
    """delta = e^{-2 alpha gamma / (gamma - alpha)}."""
    a, g = params.alpha_c, params.gamma_c
    return math.exp(-2.0 * a * g / (g - a))


def ratio_floor(params: GmcParams, t: float, area: float = 1.0) -> float:
    """
    Pathwise lower bound delta e^{alpha gamma t / 2} |B| of Q_{X_t}(B) on the
    event sup_B |X_t| <= 1.
    """
    return small_ball_delta(params) * math.exp(0.5 * params.alpha_c * params.gamma_c * t) * area


def laplace_lower_bound(
    params: GmcParams, t: float, mu: float, small_ball_probability: float
) -> float:
    """
    Lower bound ln P(sup|X_t| <= 1) + mu * ratio_floor for ln E[e^{mu Q}].

    Returns:
        The bound (-inf if the small-ball probability is 0)
    """
    if mu < 0 or not 0 <= small_ball_probability <= 1:
        raise DomainError(f"Invalid Laplace bound arguments (mu={mu}, P={small_ball_probability})")
    if small_ball_probability == 0:
        return -math.inf
    return math.log(small_ball_probability) + mu * ratio_floor(params, t)


def heuristic_tail_exponent(params: GmcParams) -> float:
    """2d / (alpha gamma), the cascade heuristic for the tail exponent."""
    return 2.0 * params.d / (params.alpha_c * params.gamma_c)


def tail_exponent_target(params: GmcParams) -> float:
    """4 / (alpha gamma)."""
    return 4.0 / (params.alpha_c * params.gamma_c)


def laplace_growth_target(params: GmcParams) -> float:
    """4 / (4 - alpha gamma)."""
    return 4.0 / (4.0 - params.alpha_c * params.gamma_c)


def subcube_tilt_constant(params: GmcParams) -> float:
    """exp(alpha gamma sqrt(d) / (gamma - alpha))."""
    a, g = params.alpha_c, params.gamma_c
    return math.exp(a * g * math.sqrt(params.d) / (g - a))
