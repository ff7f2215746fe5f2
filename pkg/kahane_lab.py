#!/usr/bin/env python3
"""
Finite-dimensional comparison checks for GMC functionals.

Gaussian vectors on at most 64 points stand in for fields on a compact set.
Product functionals Phi = prod_j (sum_x mu_j(x) e^{gamma_j Z(x) - gamma_j^2 Var/2})^{p_j}
are compared along the interpolation Z(t) = sqrt(1-t) X + sqrt(t) Y with
common random numbers for every t.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from functools import cached_property
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from errors import PreconditionError, SpecError
from seed_schedule import RngStream

logger = logging.getLogger(__name__)

MAX_POINTS = 64
PSD_TOLERANCE = 1e-10
CHUNK = 16384
DEFAULT_SIGMA = 3.0
FD_STEP = 1e-2


@dataclass(frozen=True, eq=False)
class GaussianVectorSpec:
    """Centered Gaussian vector indexed by points of S."""

    points: np.ndarray
    covariance: np.ndarray
    label: str = ""

    def __post_init__(self):
        points = np.atleast_2d(np.asarray(self.points, dtype=float))
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        k = points.shape[0]
        if k < 1 or k > MAX_POINTS:
            raise SpecError(f"Gaussian vector needs 1..{MAX_POINTS} points, got {k}")
        if cov.shape != (k, k) or not np.all(np.isfinite(cov)):
            raise SpecError(f"Covariance must be a finite {k}x{k} matrix")
        scale = max(1.0, float(np.max(np.abs(cov))))
        if np.max(np.abs(cov - cov.T)) > 1e-12 * scale:
            raise SpecError(f"Covariance of '{self.label}' is not symmetric")
        lowest = float(np.linalg.eigvalsh(0.5 * (cov + cov.T))[0])
        if lowest < -PSD_TOLERANCE * scale:
            raise SpecError(
                f"Covariance of '{self.label}' not PSD (min eigenvalue {lowest:.3e})"
            )
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "covariance", 0.5 * (cov + cov.T))

    @classmethod
    def from_kernel(
        cls, points: np.ndarray, kernel: Callable[[np.ndarray], np.ndarray], label: str = ""
    ) -> "GaussianVectorSpec":
        """Covariance kernel(|x - y|) on the given points."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        distance = np.linalg.norm(points[:, None, :] - points[None, :, :], axis=-1)
        return cls(points, np.asarray(kernel(distance), dtype=float), label)

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def variances(self) -> np.ndarray:
        return np.diag(self.covariance).copy()

    @cached_property
    def factor(self) -> np.ndarray:
        """F with F F^T = covariance (symmetric eigen square root)."""
        values, vectors = np.linalg.eigh(self.covariance)
        return vectors * np.sqrt(np.clip(values, 0.0, None))

    def with_covariance(self, covariance: np.ndarray, label: str) -> "GaussianVectorSpec":
        return GaussianVectorSpec(self.points, covariance, label)


@dataclass(frozen=True)
class Factor:
    """One factor (sum_x mu(x) e^{gamma Z(x) - gamma^2 Var/2})^p."""

    p: float
    gamma: float
    weights: Tuple[float, ...]


@dataclass(frozen=True)
class ProductFunctionalSpec:
    """Product of factors sharing one point set."""

    factors: Tuple[Factor, ...]

    def __post_init__(self):
        if not self.factors:
            raise SpecError("Product functional needs at least one factor")
        sizes = {len(factor.weights) for factor in self.factors}
        if len(sizes) != 1:
            raise SpecError("All factor weight vectors must have the same length")
        for factor in self.factors:
            weights = np.asarray(factor.weights, dtype=float)
            if not np.all(np.isfinite(weights)) or np.any(weights < 0) or weights.sum() <= 0:
                raise SpecError("Factor weights must be finite, nonnegative and not all zero")

    @classmethod
    def build(cls, factors: Sequence[Tuple[float, float, Sequence[float]]]):
        return cls(tuple(Factor(float(p), float(g), tuple(map(float, w))) for p, g, w in factors))

    @property
    def exponents(self) -> np.ndarray:
        return np.array([factor.p for factor in self.factors])

    @property
    def gammas(self) -> np.ndarray:
        return np.array([factor.gamma for factor in self.factors])

    @property
    def weights(self) -> np.ndarray:
        return np.array([factor.weights for factor in self.factors], dtype=float)

    def coefficients(self) -> np.ndarray:
        """C_jj = gamma_j^2 p_j (p_j - 1), C_ij = gamma_i gamma_j p_i p_j (i != j)."""
        gp = self.gammas * self.exponents
        matrix = np.outer(gp, gp)
        np.fill_diagonal(matrix, self.gammas**2 * self.exponents * (self.exponents - 1.0))
        return matrix

    def variant_constant(self, bound_a: float) -> float:
        """C = A sum_j |gamma_j^2 p_j (p_j-1)| + 2A sum_{i<j} |gamma_i gamma_j p_i p_j|."""
        matrix = self.coefficients()
        diagonal = float(np.sum(np.abs(np.diag(matrix))))
        cross = float(np.sum(np.abs(np.triu(matrix, k=1))))
        return bound_a * diagonal + 2.0 * bound_a * cross


def q_functional(alpha: float, gamma: float, weights: Sequence[float]) -> ProductFunctionalSpec:
    """Balanced ratio as a product functional: exponents gamma/(gamma-alpha), -alpha/(gamma-alpha)."""
    a, g = min(alpha, gamma), max(alpha, gamma)
    if a == g:
        raise SpecError("alpha and gamma must be distinct")
    return ProductFunctionalSpec.build([(g / (g - a), a, weights), (-a / (g - a), g, weights)])


@dataclass(frozen=True)
class InterpolationPath:
    """Z(t) = sqrt(1-t) X + sqrt(t) Y with X independent of Y."""

    x_spec: GaussianVectorSpec
    y_spec: GaussianVectorSpec
    t: float = 0.0

    def __post_init__(self):
        if self.x_spec.size != self.y_spec.size or not np.allclose(
            self.x_spec.points, self.y_spec.points
        ):
            raise SpecError("Interpolated vectors must live on the same points")
        if not 0.0 <= self.t <= 1.0:
            raise SpecError(f"Interpolation parameter must be in [0, 1], got {self.t}")

    def at(self, t: float) -> "InterpolationPath":
        return InterpolationPath(self.x_spec, self.y_spec, t)

    def covariance(self, t: Optional[float] = None) -> np.ndarray:
        t = self.t if t is None else t
        return (1.0 - t) * self.x_spec.covariance + t * self.y_spec.covariance

    @property
    def difference(self) -> np.ndarray:
        """g = Cov_Y - Cov_X."""
        return self.y_spec.covariance - self.x_spec.covariance


@dataclass
class Estimate:
    """Monte Carlo mean with standard error."""

    value: float
    stderr: float
    replicas: int

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def _estimate(samples: np.ndarray) -> Estimate:
    count = samples.size
    stderr = float(np.std(samples, ddof=1) / math.sqrt(count)) if count > 1 else 0.0
    return Estimate(float(np.mean(samples)), stderr, count)


def _normal_chunks(rng: RngStream, replicas: int, k: int) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Common random numbers: the same (U, V) blocks for every call with rng."""
    if replicas < 2:
        raise SpecError(f"At least 2 replicas are required, got {replicas}")
    generator = rng.generator()
    done = 0
    while done < replicas:
        size = min(CHUNK, replicas - done)
        yield generator.standard_normal((size, k)), generator.standard_normal((size, k))
        done += size


def _log_masses(values: np.ndarray, variances: np.ndarray, func: ProductFunctionalSpec):
    """log M_j per replica (R x J) and normalized tilted weights (R x J x k)."""
    gammas = func.gammas[:, None, None]
    exponent = gammas * values[None, :, :] - 0.5 * gammas**2 * variances[None, None, :]
    weights = func.weights[:, None, :]
    log_m = logsumexp(exponent, b=weights, axis=-1)
    with np.errstate(divide="ignore"):
        normalized = np.exp(exponent + np.log(weights) - log_m[:, :, None])
    return log_m.T, np.transpose(normalized, (1, 0, 2))


def _phi(values: np.ndarray, variances: np.ndarray, func: ProductFunctionalSpec) -> np.ndarray:
    log_m, _ = _log_masses(values, variances, func)
    return np.exp(log_m @ func.exponents)


def _path_values(path: InterpolationPath, t: float, u: np.ndarray, v: np.ndarray):
    x = u @ path.x_spec.factor.T
    y = v @ path.y_spec.factor.T
    values = math.sqrt(1.0 - t) * x + math.sqrt(t) * y
    variances = (1.0 - t) * path.x_spec.variances + t * path.y_spec.variances
    return values, variances


def _phi_samples(path, func, replicas, rng, t) -> np.ndarray:
    return np.concatenate(
        [_phi(*_path_values(path, t, u, v), func) for u, v in _normal_chunks(rng, replicas, path.x_spec.size)]
    )


def interpolated_expectation(
    path: InterpolationPath, func: ProductFunctionalSpec, replicas: int, rng: RngStream
) -> Estimate:
    """
    Estimate E[Phi(Z(t))] at t = path.t.

    The same underlying normals are used for every t, so estimates along one
    path are paired.

    Args:
        path: Interpolation path (t taken from path.t)
        func: Product functional
        replicas: Number of samples (>= 2)
        rng: Stream shared by all t values

    Returns:
        Estimate
    """
    return _estimate(_phi_samples(path, func, replicas, rng, path.t))


def _fd_samples(path, func, replicas, rng, step) -> np.ndarray:
    lo, hi = max(0.0, path.t - step), min(1.0, path.t + step)
    return (_phi_samples(path, func, replicas, rng, hi) - _phi_samples(path, func, replicas, rng, lo)) / (hi - lo)


def finite_difference_derivative(
    path: InterpolationPath,
    func: ProductFunctionalSpec,
    replicas: int,
    rng: RngStream,
    step: float = FD_STEP,
) -> Estimate:
    """
    Paired central difference of E[Phi(Z(t))] at path.t (one-sided at 0 and 1).
    """
    return _estimate(_fd_samples(path, func, replicas, rng, step))


def _formula_samples(path, func, replicas, rng) -> np.ndarray:
    coefficients = func.coefficients()
    g = path.difference
    chunks = []
    for u, v in _normal_chunks(rng, replicas, path.x_spec.size):
        values, variances = _path_values(path, path.t, u, v)
        log_m, tilted = _log_masses(values, variances, func)
        phi = np.exp(log_m @ func.exponents)
        forms = np.einsum("rik,kl,rjl->rij", tilted, g, tilted)
        chunks.append(0.5 * phi * np.einsum("ij,rij->r", coefficients, forms))
    return np.concatenate(chunks)


def derivative_formula(
    path: InterpolationPath, func: ProductFunctionalSpec, replicas: int, rng: RngStream
) -> Estimate:
    """
    Estimate of d/dt E[Phi(Z(t))] from the interpolation formula.

    1/2 E[Phi sum_{x,y} g(x,y) sum_{i,j} C_ij mu_i(x) mu_j(y)] with mu_j the
    normalized tilted weights and C from ProductFunctionalSpec.coefficients.
    Returns an exact 0 without sampling when every coefficient vanishes.
    """
    if not np.any(func.coefficients()):
        return Estimate(0.0, 0.0, 0)
    return _estimate(_formula_samples(path, func, replicas, rng))


@dataclass
class DerivativeCheck:
    """Finite difference against the derivative formula on shared samples."""

    t: float
    finite_difference: Estimate
    formula: Estimate
    difference_stderr: float
    sigma: float

    @property
    def passed(self) -> bool:
        gap = abs(self.finite_difference.value - self.formula.value)
        return gap <= self.sigma * self.difference_stderr + 1e-12

    def to_dict(self) -> Dict:
        out = asdict(self)
        out["passed"] = self.passed
        return out


def check_derivative_consistency(
    path: InterpolationPath,
    func: ProductFunctionalSpec,
    replicas: int,
    rng: RngStream,
    sigma: float = DEFAULT_SIGMA,
    step: float = FD_STEP,
) -> DerivativeCheck:
    """Compare finite_difference_derivative and derivative_formula (same seeds)."""
    fd = _fd_samples(path, func, replicas, rng, step)
    if np.any(func.coefficients()):
        formula = _formula_samples(path, func, replicas, rng)
    else:
        formula = np.zeros_like(fd)
    paired = _estimate(fd - formula)
    return DerivativeCheck(path.t, _estimate(fd), _estimate(formula), paired.stderr, sigma)


@dataclass
class KahaneVariantReport:
    """E[Phi(X)] <= e^C E[Phi(Y)] in both directions."""

    bound_a: float
    constant_c: float
    estimate_x: Estimate
    estimate_y: Estimate
    sigma: float
    ratio_xy: float = field(init=False)
    ratio_yx: float = field(init=False)

    def __post_init__(self):
        self.ratio_xy = self.estimate_x.value / self.estimate_y.value
        self.ratio_yx = self.estimate_y.value / self.estimate_x.value

    def _holds(self, first: Estimate, second: Estimate) -> bool:
        factor = math.exp(self.constant_c)
        combined = math.hypot(first.stderr, factor * second.stderr)
        return first.value <= factor * second.value + self.sigma * combined

    @property
    def holds_xy(self) -> bool:
        return self._holds(self.estimate_x, self.estimate_y)

    @property
    def holds_yx(self) -> bool:
        return self._holds(self.estimate_y, self.estimate_x)

    @property
    def passed(self) -> bool:
        return self.holds_xy and self.holds_yx

    def to_dict(self) -> Dict:
        out = asdict(self)
        out.update(
            bound_factor=math.exp(self.constant_c),
            holds_xy=self.holds_xy,
            holds_yx=self.holds_yx,
            passed=self.passed,
        )
        return out


def check_kahane_variant(
    x_spec: GaussianVectorSpec,
    y_spec: GaussianVectorSpec,
    func: ProductFunctionalSpec,
    replicas: int,
    rng: RngStream,
    sigma: float = DEFAULT_SIGMA,
    bound_a: Optional[float] = None,
) -> KahaneVariantReport:
    """
    Bounded-covariance-difference comparison.

    Args:
        x_spec, y_spec: Gaussian vectors on the same points
        func: Product functional
        replicas: Samples per side
        rng: Stream (shared by both sides)
        sigma: Tolerance in combined standard errors
        bound_a: A >= max |Cov_X - Cov_Y| (computed when None)

    Returns:
        KahaneVariantReport with both directions
    """
    path = InterpolationPath(x_spec, y_spec)
    observed = float(np.max(np.abs(path.difference)))
    bound_a = observed if bound_a is None else bound_a
    if bound_a < observed - 1e-12:
        raise PreconditionError(f"Given A = {bound_a} below max covariance gap {observed}")

    constant = func.variant_constant(bound_a)
    estimate_x = _estimate(_phi_samples(path, func, replicas, rng, 0.0))
    estimate_y = _estimate(_phi_samples(path, func, replicas, rng, 1.0))
    report = KahaneVariantReport(bound_a, constant, estimate_x, estimate_y, sigma)
    logger.info(
        f"Kahane variant: A={bound_a:.4g}, C={constant:.4g}, ratio X/Y={report.ratio_xy:.4g}"
    )
    return report


def convex_family(median: float, mu: float = 0.1) -> Dict[str, Callable[[np.ndarray], np.ndarray]]:
    """Nondecreasing convex test functions: identity, (x - K)+ and e^{mu x}."""
    return {
        "identity": lambda x: x,
        "call_at_median": lambda x: np.maximum(x - median, 0.0),
        "exponential": lambda x: np.exp(mu * x),
    }


@dataclass
class ConvexOrderReport:
    """Per test function: E[F(Q_X)], E[F(Q_Y)] and the paired gap."""

    rows: List[Dict] = field(default_factory=list)
    min_difference_eigenvalue: float = 0.0
    boundary_case: bool = False
    sigma: float = DEFAULT_SIGMA

    @property
    def passed(self) -> bool:
        return all(row["passed"] for row in self.rows)

    def to_dict(self) -> Dict:
        out = asdict(self)
        out["passed"] = self.passed
        return out


def _coupled_ratios(x_spec, noise_factor, noise_variances, func, replicas, rng, scales):
    """Q_X and Q_{X + sqrt(v) R} for every v in scales, sharing all normals."""
    chunks = [[] for _ in range(len(scales) + 1)]
    for u, v in _normal_chunks(rng, replicas, x_spec.size):
        x = u @ x_spec.factor.T
        r = v @ noise_factor.T
        chunks[0].append(_phi(x, x_spec.variances, func))
        for k, scale in enumerate(scales):
            chunks[k + 1].append(
                _phi(x + math.sqrt(scale) * r, x_spec.variances + scale * noise_variances, func)
            )
    return [np.concatenate(parts) for parts in chunks]


def check_convex_order(
    x_spec: GaussianVectorSpec,
    y_spec: GaussianVectorSpec,
    func: ProductFunctionalSpec,
    replicas: int,
    rng: RngStream,
    family: Optional[Dict[str, Callable]] = None,
    sigma: float = DEFAULT_SIGMA,
) -> ConvexOrderReport:
    """
    E[F(Q_X)] <= E[F(Q_Y)] for nondecreasing convex F when Cov_Y - Cov_X is PSD.

    Y is realized as X plus an independent remainder with covariance
    Cov_Y - Cov_X.

    Raises:
        PreconditionError: if Cov_Y - Cov_X is not PSD to tolerance
    """
    difference = y_spec.covariance - x_spec.covariance
    scale = max(1.0, float(np.max(np.abs(difference))))
    lowest = float(np.linalg.eigvalsh(difference)[0])
    if lowest < -PSD_TOLERANCE * scale:
        raise PreconditionError(
            f"Cov_Y - Cov_X is not positive semidefinite (min eigenvalue {lowest:.3e})"
        )
    remainder = GaussianVectorSpec(x_spec.points, difference, "remainder")

    q_x, q_y = _coupled_ratios(
        x_spec, remainder.factor, remainder.variances, func, replicas, rng, [1.0]
    )
    family = family or convex_family(float(np.median(q_x)))
    report = ConvexOrderReport(
        min_difference_eigenvalue=lowest,
        boundary_case=abs(lowest) <= PSD_TOLERANCE * scale,
        sigma=sigma,
    )
    for name, func_f in family.items():
        f_x, f_y = func_f(q_x), func_f(q_y)
        gap = _estimate(f_x - f_y)
        report.rows.append(
            {
                "function": name,
                "estimate_x": _estimate(f_x).to_dict(),
                "estimate_y": _estimate(f_y).to_dict(),
                "difference": gap.to_dict(),
                "passed": gap.value <= sigma * gap.stderr + 1e-12,
            }
        )
    if report.boundary_case:
        logger.info("Convex order: covariance difference is on the semidefinite boundary")
    return report


@dataclass
class NoiseChainReport:
    """E[F(Q_{X + sqrt(v) R})] along increasing noise sizes v."""

    variances: List[float]
    estimates: List[Estimate]
    step_differences: List[Estimate]
    sigma: float

    @property
    def passed(self) -> bool:
        return all(step.value >= -self.sigma * step.stderr - 1e-12 for step in self.step_differences)

    def to_dict(self) -> Dict:
        out = asdict(self)
        out["passed"] = self.passed
        return out


def check_noise_chain(
    x_spec: GaussianVectorSpec,
    noise_covariance: np.ndarray,
    func: ProductFunctionalSpec,
    noise_variances: Sequence[float],
    replicas: int,
    rng: RngStream,
    transform: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    sigma: float = DEFAULT_SIGMA,
) -> NoiseChainReport:
    """
    Monotonicity of E[F(Q)] in the size of an added independent noise.

    Args:
        x_spec: Base vector X
        noise_covariance: PSD covariance of the unit remainder R
        func: Product functional (usually q_functional)
        noise_variances: Increasing scales 0 < v_1 < v_2 < ...
        replicas: Samples
        rng: Stream (common to the whole chain)
        transform: Nondecreasing convex F (identity if None)
        sigma: Tolerance in paired standard errors

    Returns:
        NoiseChainReport
    """
    scales = [float(v) for v in noise_variances]
    if not scales or scales[0] <= 0 or any(b <= a for a, b in zip(scales, scales[1:])):
        raise SpecError(f"Noise variances must be positive and increasing: {scales}")
    noise = GaussianVectorSpec(x_spec.points, noise_covariance, "noise")
    transform = transform or (lambda x: x)

    samples = _coupled_ratios(x_spec, noise.factor, noise.variances, func, replicas, rng, scales)
    values = [transform(sample) for sample in samples[1:]]
    estimates = [_estimate(value) for value in values]
    steps = [_estimate(b - a) for a, b in zip(values, values[1:])]
    return NoiseChainReport(scales, estimates, steps, sigma)


def grid_points(side_points: int, side: float = 1.0) -> np.ndarray:
    """Cell centers of a side_points x side_points grid on [0, side]^2."""
    nodes = (np.arange(side_points) + 0.5) * side / side_points
    x, y = np.meshgrid(nodes, nodes, indexing="ij")
    return np.column_stack([x.ravel(), y.ravel()])
