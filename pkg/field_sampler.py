#!/usr/bin/env python3
"""
Grid samplers for the white-noise decomposition X_t.

Layers are stationary Gaussian fields sampled exactly by circulant embedding
on a padded torus; X_t is the sum of independent layers. Also provides the
scale-increment sampler, the smooth perturbation field Z, gradient
statistics and the binary snapshot format.
"""

import json
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Optional, Tuple, Union

import numpy as np
from scipy import fft

from errors import GridError, NotPositiveDefiniteError, PreconditionError, ResolutionError
from kernel_lab import LayerCovariance, RadialKernel, layer_covariance, spectral_kernel_R
from seed_schedule import RngStream

logger = logging.getLogger(__name__)

PSD_TOLERANCE = 1e-10
CLIPPED_MASS_LIMIT = 1e-6
DEFAULT_STEP = 0.25
SPECTRUM_CACHE_SIZE = 64

# Perturbation field: torus margin beyond the window and frequency cutoff
Z_MARGIN = 16.0
Z_CUTOFF = 32.0

_spectrum_cache: "OrderedDict[tuple, np.ndarray]" = OrderedDict()


def is_power_of_two(value: int) -> bool:
    return value >= 1 and (value & (value - 1)) == 0


def next_power_of_two(value: float) -> int:
    return 1 << max(0, math.ceil(math.log2(max(value, 1.0))))


@dataclass(frozen=True)
class GridSpec:
    """
    Regular n x n grid of cell centers on the square [0, side]^2.

    pad_factor is the torus padding multiplier used by circulant embedding.
    """

    n: int
    pad_factor: int = 2
    side: float = 1.0

    def __post_init__(self):
        if not is_power_of_two(self.n):
            raise GridError(f"Grid size n must be a power of two, got {self.n}")
        if self.pad_factor < 2 or not is_power_of_two(self.pad_factor):
            raise GridError(f"pad_factor must be a power of two >= 2, got {self.pad_factor}")
        if not self.side > 0:
            raise GridError(f"Domain side must be positive, got {self.side}")

    @property
    def spacing(self) -> float:
        return self.side / self.n

    @property
    def cell_area(self) -> float:
        return self.spacing**2

    @property
    def nodes(self) -> np.ndarray:
        """Cell-center coordinates along one axis."""
        return (np.arange(self.n) + 0.5) * self.spacing

    def max_resolved_scale(self) -> float:
        """Largest t with spacing <= e^{-t}/4."""
        return -math.log(4.0 * self.spacing)

    def check_resolution(self, t: float) -> None:
        """
        Raises:
            ResolutionError: if spacing > e^{-t}/4
        """
        if self.spacing > math.exp(-t) / 4.0 * (1 + 1e-12):
            raise ResolutionError(
                f"Grid spacing {self.spacing:.4g} does not resolve scale t={t:g} "
                f"(need h <= e^-t/4 = {math.exp(-t) / 4.0:.4g}; "
                f"largest resolved t is {self.max_resolved_scale():.3f})"
            )

    def scaled(self, factor: float) -> "GridSpec":
        """Same node count on a domain `factor` times larger."""
        return GridSpec(self.n, self.pad_factor, self.side * factor)


@dataclass(frozen=True)
class ScaleSchedule:
    """Breakpoints 0 = t_0 < t_1 < ... < t_K = t of the layer decomposition."""

    breakpoints: Tuple[float, ...]

    def __post_init__(self):
        points = tuple(float(b) for b in self.breakpoints)
        if not points or points[0] != 0.0:
            raise GridError("Scale schedule must start at 0")
        if any(b <= a for a, b in zip(points, points[1:])):
            raise GridError(f"Scale breakpoints must be strictly increasing: {points}")
        object.__setattr__(self, "breakpoints", points)

    @classmethod
    def uniform(cls, t: float, step: float = DEFAULT_STEP) -> "ScaleSchedule":
        """Uniform steps of size `step`, the last one shortened to end at t."""
        if t < 0 or step <= 0:
            raise GridError(f"Invalid schedule (t={t}, step={step})")
        count = math.ceil(t / step - 1e-9)
        points = [min(k * step, t) for k in range(count)] + [t]
        return cls(tuple(points) if t > 0 else (0.0,))

    @property
    def total(self) -> float:
        return self.breakpoints[-1]

    def layers(self) -> Iterator[Tuple[float, float]]:
        return zip(self.breakpoints[:-1], self.breakpoints[1:])


@dataclass(frozen=True, eq=False)
class FieldSample:
    """
    Grid realization of X_t, of an increment X_t - X_s, or of a perturbation.

    values[i, j] is the field at (nodes[i], nodes[j]). `variance` overrides the
    pointwise variance scale_hi - scale_lo for fields that are not pure layers.
    """

    grid: GridSpec
    values: np.ndarray
    scale_lo: float = 0.0
    scale_hi: float = 0.0
    seed_path: str = ""
    variance: Optional[float] = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != (self.grid.n, self.grid.n):
            raise GridError(
                f"Field shape {values.shape} does not match grid {self.grid.n}x{self.grid.n}"
            )
        if not np.all(np.isfinite(values)):
            raise PreconditionError("Field sample has non-finite values")
        object.__setattr__(self, "values", values)

    @property
    def pointwise_variance(self) -> float:
        if self.variance is not None:
            return self.variance
        return self.scale_hi - self.scale_lo

    @classmethod
    def from_function(
        cls, grid: GridSpec, func: Callable[[np.ndarray, np.ndarray], np.ndarray], **meta
    ) -> "FieldSample":
        """Deterministic field func(x, y) evaluated at the cell centers."""
        x, y = np.meshgrid(grid.nodes, grid.nodes, indexing="ij")
        values = np.broadcast_to(np.asarray(func(x, y), dtype=float), x.shape)
        return cls(grid, np.array(values), **meta)

    @classmethod
    def zeros(cls, grid: GridSpec, scale_lo: float = 0.0, scale_hi: float = 0.0,
              seed_path: str = "") -> "FieldSample":
        return cls(grid, np.zeros((grid.n, grid.n)), scale_lo, scale_hi, seed_path)


def add_fields(first: FieldSample, second: FieldSample) -> FieldSample:
    """
    Sum of two independent fields on the same grid (variances add).

    The scale interval of the first field is kept.
    """
    if first.grid != second.grid:
        raise GridError("Cannot add fields sampled on different grids")
    return FieldSample(
        first.grid,
        first.values + second.values,
        first.scale_lo,
        first.scale_hi,
        f"{first.seed_path}+{second.seed_path}",
        first.pointwise_variance + second.pointwise_variance,
    )


def torus_points(cov: LayerCovariance, grid: GridSpec, pad_factor: int) -> int:
    """Torus points per side: side >= max(pad*side, side + support, 2*support)."""
    support = cov.support_radius
    length = max(pad_factor * grid.side, grid.side + support, 2.0 * support)
    return next_power_of_two(length / grid.spacing - 1e-9)


def _embedding_amplitudes(cov: LayerCovariance, grid: GridSpec, pad_factor: int):
    """sqrt(lambda / N) of the circulant embedding, or the failing eigenvalue."""
    size = torus_points(cov, grid, pad_factor)
    offsets = np.minimum(np.arange(size), size - np.arange(size)) * grid.spacing
    radius = np.hypot(offsets[:, None], offsets[None, :])
    eigenvalues = fft.fft2(cov(radius)).real

    top = float(np.max(eigenvalues))
    lowest = float(np.min(eigenvalues))
    if lowest < -PSD_TOLERANCE * top:
        return None, lowest, size

    negative = eigenvalues < 0
    clipped = float(-np.sum(eigenvalues[negative]))
    if clipped > CLIPPED_MASS_LIMIT * float(np.sum(np.abs(eigenvalues))):
        return None, lowest, size
    eigenvalues[negative] = 0.0
    return np.sqrt(eigenvalues / eigenvalues.size), lowest, size


def embedding_spectrum(cov: LayerCovariance, grid: GridSpec) -> np.ndarray:
    """
    Square-root eigenvalues of the layer's circulant embedding (cached).

    Padding is doubled once automatically when the first embedding is not
    positive semidefinite.

    Raises:
        NotPositiveDefiniteError: if the doubled embedding still fails
    """
    key = (cov.rho.fingerprint, cov.s_lo, cov.s_hi, grid.n, grid.side, grid.pad_factor)
    if key in _spectrum_cache:
        _spectrum_cache.move_to_end(key)
        return _spectrum_cache[key]

    amplitudes, lowest, size = _embedding_amplitudes(cov, grid, grid.pad_factor)
    if amplitudes is None:
        logger.warning(
            f"⚠ Embedding of layer [{cov.s_lo:g}, {cov.s_hi:g}] not PSD on {size}x{size} "
            f"torus (min eigenvalue {lowest:.3e}); doubling padding"
        )
        amplitudes, lowest, size = _embedding_amplitudes(cov, grid, 2 * grid.pad_factor)
        if amplitudes is None:
            raise NotPositiveDefiniteError(lowest, size)

    _spectrum_cache[key] = amplitudes
    if len(_spectrum_cache) > SPECTRUM_CACHE_SIZE:
        _spectrum_cache.popitem(last=False)
    logger.debug(f"Embedding spectrum cached for layer [{cov.s_lo:g}, {cov.s_hi:g}] ({size}^2)")
    return amplitudes


def sample_layer(cov: LayerCovariance, grid: GridSpec, rng: RngStream) -> FieldSample:
    """
    Sample one stationary Gaussian layer with covariance cov.

    Args:
        cov: Layer covariance c_{s_lo, s_hi}
        grid: Target grid (must resolve s_hi)
        rng: Stream of this layer

    Returns:
        FieldSample with scale interval [s_lo, s_hi]
    """
    if cov.variance == 0:
        return FieldSample.zeros(grid, cov.s_lo, cov.s_hi, rng.path)
    grid.check_resolution(cov.s_hi)

    amplitudes = embedding_spectrum(cov, grid)
    noise = rng.generator().standard_normal((2,) + amplitudes.shape)
    draw = fft.fft2(amplitudes * (noise[0] + 1j * noise[1]))
    values = draw.real[: grid.n, : grid.n]
    return FieldSample(grid, values, cov.s_lo, cov.s_hi, rng.path)


def sample_field(
    rho: RadialKernel,
    t: float,
    schedule: Optional[ScaleSchedule],
    grid: GridSpec,
    rng: RngStream,
    fused: bool = False,
) -> FieldSample:
    """
    Sample X_t as a sum of independent layers over the schedule.

    Args:
        rho: Mollifier kernel
        t: Total scale
        schedule: Layer breakpoints ending at t (uniform 0.25 steps if None)
        grid: Target grid (must resolve t)
        rng: Replica stream; layer k uses rng.child(k)
        fused: Draw X_t as the single layer [0, t] (same law, one FFT)

    Returns:
        FieldSample with scale interval [0, t]
    """
    if t < 0:
        raise GridError(f"Scale must be nonnegative, got {t}")
    if t == 0:
        return FieldSample.zeros(grid, 0.0, 0.0, rng.path)
    grid.check_resolution(t)

    if fused:
        layer = sample_layer(layer_covariance(rho, 0.0, t), grid, rng.child(0))
        return FieldSample(grid, layer.values, 0.0, t, rng.path)

    schedule = schedule or ScaleSchedule.uniform(t)
    if abs(schedule.total - t) > 1e-12:
        raise GridError(f"Schedule ends at {schedule.total}, expected {t}")

    total = np.zeros((grid.n, grid.n))
    for k, (lo, hi) in enumerate(schedule.layers()):
        total += sample_layer(layer_covariance(rho, lo, hi), grid, rng.child(k)).values
    return FieldSample(grid, total, 0.0, t, rng.path)


def sample_increment_by_scaling(
    rho: RadialKernel,
    s: float,
    t: float,
    grid: GridSpec,
    rng: RngStream,
    schedule_step: float = DEFAULT_STEP,
    fused: bool = False,
) -> FieldSample:
    """
    Sample X_t - X_s on the grid through the law X_{t-s}(e^s x).

    X_{t-s} is drawn on the grid enlarged by e^s, whose cell centers are
    exactly the images e^s x of the original cell centers.

    Args:
        rho: Mollifier kernel
        s: Lower scale (0 <= s <= t; s = t gives the zero increment)
        t: Upper scale
        grid: Target grid
        rng: Stream of this increment
        schedule_step: Layer step for X_{t-s}
        fused: Single-layer sampling of X_{t-s}

    Returns:
        FieldSample on `grid` with scale interval [s, t]
    """
    if s < 0 or t < s:
        raise GridError(f"Invalid increment interval [{s}, {t}]")
    if t == s:
        return FieldSample.zeros(grid, s, t, rng.path)
    grid.check_resolution(t)

    width = t - s
    enlarged = grid.scaled(math.exp(s))
    schedule = None if fused else ScaleSchedule.uniform(width, schedule_step)
    base = sample_field(rho, width, schedule, enlarged, rng, fused=fused)
    return FieldSample(grid, base.values, s, t, rng.path)


def gradient_sup(
    field: FieldSample, f: Optional[Union[np.ndarray, FieldSample]] = None
) -> float:
    """
    Max over grid nodes of the central-difference gradient magnitude.

    Args:
        field: Sampled field
        f: Optional deterministic grid function added before differencing

    Returns:
        sup |grad(f + field)| over the grid
    """
    if field.grid.n < 2:
        raise GridError("Gradient needs at least 2 points per side")
    values = field.values
    if f is not None:
        values = values + (f.values if isinstance(f, FieldSample) else np.asarray(f, float))
    grad_x, grad_y = np.gradient(values, field.grid.spacing, edge_order=2)
    return float(np.max(np.hypot(grad_x, grad_y)))


def sample_smooth_Z(
    grid: GridSpec, amplitude: float, rng: RngStream, d: int = 2
) -> FieldSample:
    """
    Smooth stationary perturbation with spectral density amplitude * R_hat.

    Synthesized on a torus of side grid.side + 16 with frequencies |xi| <= 32,
    evaluated at the grid nodes by a separable matrix DFT. Pointwise variance
    is amplitude * pi/2 in two dimensions.

    Args:
        grid: Target grid
        amplitude: Spectral amplitude (>= 0)
        rng: Stream of this field
        d: Dimension of the spectral kernel

    Returns:
        FieldSample whose `variance` is the synthesized pointwise variance
    """
    if amplitude < 0:
        raise PreconditionError(f"Perturbation amplitude must be >= 0, got {amplitude}")
    if amplitude == 0:
        return FieldSample(grid, np.zeros((grid.n, grid.n)), seed_path=rng.path, variance=0.0)

    length = grid.side + Z_MARGIN
    count = math.ceil(Z_CUTOFF * length / (2.0 * math.pi))
    modes = np.arange(-count, count + 1)
    xi = 2.0 * math.pi * modes / length
    weights = amplitude * spectral_kernel_R(d, np.hypot(xi[:, None], xi[None, :]))
    sigma = np.sqrt(weights) * (2.0 * math.pi / length)

    noise = rng.generator().standard_normal((2, modes.size, modes.size))
    phases = np.exp(1j * np.outer(grid.nodes, xi))
    draw = phases @ (sigma * (noise[0] + 1j * noise[1])) @ phases.T
    variance = float(np.sum(sigma**2))
    return FieldSample(grid, draw.real, seed_path=rng.path, variance=variance)


def encode_snapshot(field: FieldSample) -> bytes:
    """
    Encode a field as one JSON header line followed by little-endian float64
    values in row-major order.
    """
    header = {
        "n": field.grid.n,
        "spacing": field.grid.spacing,
        "side": field.grid.side,
        "pad_factor": field.grid.pad_factor,
        "scale_lo": field.scale_lo,
        "scale_hi": field.scale_hi,
        "seed_path": field.seed_path,
        "variance": field.pointwise_variance,
    }
    head = (json.dumps(header, sort_keys=True) + "\n").encode("utf-8")
    return head + np.ascontiguousarray(field.values, dtype="<f8").tobytes(order="C")


def decode_snapshot(data: bytes) -> FieldSample:
    """Decode bytes produced by encode_snapshot."""
    split = data.index(b"\n")
    header = json.loads(data[:split].decode("utf-8"))
    payload = data[split + 1 :]
    n = int(header["n"])
    if len(payload) != 8 * n * n:
        raise GridError(f"Snapshot payload has {len(payload)} bytes, expected {8 * n * n}")
    values = np.frombuffer(payload, dtype="<f8").reshape(n, n).astype(float)
    grid = GridSpec(n, int(header.get("pad_factor", 2)), float(header.get("side", 1.0)))
    return FieldSample(
        grid,
        values,
        float(header["scale_lo"]),
        float(header["scale_hi"]),
        header.get("seed_path", ""),
        header.get("variance"),
    )


def write_snapshot(field: FieldSample, path: Union[str, Path]) -> Path:
    """Write encode_snapshot(field) to path."""
    path = Path(path)
    path.write_bytes(encode_snapshot(field))
    return path


def read_snapshot(path: Union[str, Path]) -> FieldSample:
    """Read a snapshot written by write_snapshot."""
    return decode_snapshot(Path(path).read_bytes())


def field_memory_bytes(grid: GridSpec, t: float, rho_support: float = 1.0) -> int:
    """Rough peak memory of one layer draw (embedding spectrum plus FFT work)."""
    length = max(grid.pad_factor * grid.side, grid.side + rho_support, 2.0 * rho_support)
    size = next_power_of_two(length / grid.spacing - 1e-9)
    return 8 * size * size * 6 + 8 * grid.n * grid.n
