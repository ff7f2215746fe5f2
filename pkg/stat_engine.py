#!/usr/bin/env python3
"""
Monte Carlo orchestration and estimators.

Replicas run in fixed-size chunks over a process pool and come back in
replica order, so every statistic is a deterministic function of the seed.
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy import stats
from scipy.special import logsumexp

from errors import ConfigError, DomainError, ExperimentError, PreconditionError, WindowError
from field_sampler import (
    FieldSample,
    GridSpec,
    ScaleSchedule,
    gradient_sup,
    sample_field,
    sample_layer,
    sample_smooth_Z,
    add_fields,
)
from gmc_core import GmcParams, gmc_mass, log_tilted_ratio, ratio_floor
from kernel_lab import RadialKernel, layer_covariance
from seed_schedule import RngStream

logger = logging.getLogger(__name__)

CHUNK_SIZE = 256
BOOTSTRAP_RESAMPLES = 1000
MIN_FIT_POINTS = 4
CONFIDENCE = 0.95
MIN_MOMENT_REPLICAS = 100
MIN_TAIL_SAMPLES = 10_000


@dataclass
class MomentEstimate:
    """Estimate of E[Q^n] with batch-bootstrap standard error."""

    order: float
    value: float
    stderr: float
    replicas: int
    batch_scheme: str
    excluded: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class TailCurve:
    """Empirical survival P(Q > x) with Clopper-Pearson intervals."""

    thresholds: np.ndarray
    survival: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    samples: int

    def rows(self) -> List[Dict[str, float]]:
        return [
            {"threshold": float(x), "survival": float(p), "ci_low": float(lo), "ci_high": float(hi)}
            for x, p, lo, hi in zip(self.thresholds, self.survival, self.ci_low, self.ci_high)
        ]


@dataclass
class ExponentFit:
    """Weighted straight-line fit y = slope * x + intercept with a slope CI."""

    slope: float
    intercept: float
    window: List[float]
    residual_norm: float
    ci_low: float
    ci_high: float
    target: Optional[float] = None

    def contains(self, value: float) -> bool:
        return self.ci_low <= value <= self.ci_high

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class LaplaceCurve:
    """ln E[e^{mu Q}] over a mu grid, with dominated-by-max flags."""

    mu: np.ndarray
    log_mgf: np.ndarray
    stderr: np.ndarray
    dominated: np.ndarray
    growth: Optional[ExponentFit] = None

    def rows(self) -> List[Dict[str, Any]]:
        return [
            {"mu": float(m), "log_mgf": float(v), "stderr": float(s), "dominated": bool(d)}
            for m, v, s, d in zip(self.mu, self.log_mgf, self.stderr, self.dominated)
        ]


def _run_chunk(draw: Callable[[RngStream], Any], base: RngStream, lo: int, hi: int) -> List[Any]:
    return [draw(base.child(replica)) for replica in range(lo, hi)]


def run_replicas(
    draw: Callable[[RngStream], Any],
    replicas: int,
    base: RngStream,
    workers: int = 1,
    chunk_size: int = CHUNK_SIZE,
) -> List[Any]:
    """
    Evaluate draw(base.child(r)) for r = 0..replicas-1.

    Args:
        draw: Picklable callable taking a replica stream
        replicas: Number of replicas
        base: Parent stream of the batch
        workers: Process count (1 runs in-process)
        chunk_size: Replicas per task

    Returns:
        Results in replica order (independent of worker count)
    """
    bounds = [(lo, min(lo + chunk_size, replicas)) for lo in range(0, replicas, chunk_size)]
    if workers <= 1 or len(bounds) <= 1:
        results = []
        for lo, hi in bounds:
            results.extend(_run_chunk(draw, base, lo, hi))
        return results

    with ProcessPoolExecutor(max_workers=workers) as pool:
        chunks = pool.map(
            _run_chunk,
            [draw] * len(bounds),
            [base] * len(bounds),
            [lo for lo, _ in bounds],
            [hi for _, hi in bounds],
        )
        return [item for chunk in chunks for item in chunk]


@dataclass(frozen=True)
class RatioDraw:
    """
    One replica of the balanced (or linearly tilted) ratio over [0, side]^2.

    The field stream is rng.child(0); the perturbation Z uses rng.child(1).
    """

    rho: RadialKernel
    params: GmcParams
    grid: GridSpec
    step: float = 0.25
    fused: bool = False
    perturbation_amplitude: float = 0.0
    tilt_slope: float = 0.0

    def field(self, rng: RngStream) -> FieldSample:
        t = self.params.t
        schedule = ScaleSchedule.uniform(t, self.step) if t > 0 and not self.fused else None
        sample = sample_field(self.rho, t, schedule, self.grid, rng.child(0), fused=self.fused)
        if self.perturbation_amplitude > 0:
            sample = add_fields(
                sample, sample_smooth_Z(self.grid, self.perturbation_amplitude, rng.child(1))
            )
        return sample

    def __call__(self, rng: RngStream) -> float:
        sample = self.field(rng)
        tilt = None
        if self.tilt_slope:
            x = np.broadcast_to(self.grid.nodes[:, None], (self.grid.n, self.grid.n))
            tilt = self.tilt_slope * x
        return math.exp(log_tilted_ratio(sample, tilt, self.params))


def _batch_means(values: np.ndarray, batches: int) -> np.ndarray:
    batches = max(2, min(batches, values.size))
    return np.array([part.mean() for part in np.array_split(values, batches)])


def require_replicas(count: int, minimum: int, purpose: str) -> None:
    """
    Raises:
        PreconditionError: if count < minimum
    """
    if count < minimum:
        raise PreconditionError(f"{purpose} needs at least {minimum} replicas, got {count}")


def moments_from_samples(
    samples: Sequence[float],
    orders: Sequence[float],
    rng: RngStream,
    batches: int = 20,
    resamples: int = BOOTSTRAP_RESAMPLES,
) -> List[MomentEstimate]:
    """
    Batched-mean moment estimates with bootstrap standard errors.

    Non-finite samples are excluded and counted.
    """
    values = np.asarray(samples, dtype=float)
    finite = np.isfinite(values)
    excluded = int(values.size - np.count_nonzero(finite))
    if excluded:
        logger.warning(f"⚠ {excluded} non-finite samples excluded from moment estimates")
    values = values[finite]
    generator = rng.generator()

    estimates = []
    for order in orders:
        if order < 0:
            raise DomainError(f"Moment order must be >= 0, got {order}")
        scheme = f"{max(2, min(batches, values.size))} batches x {resamples} bootstrap"
        if order == 0:
            estimates.append(MomentEstimate(order, 1.0, 0.0, values.size, scheme, excluded))
            continue
        if values.size < 2:
            raise ExperimentError("Moment estimation needs at least 2 finite samples")
        powered = values**order
        means = _batch_means(powered, batches)
        picks = generator.integers(0, means.size, size=(resamples, means.size))
        stderr = float(np.std(means[picks].mean(axis=1), ddof=1))
        estimates.append(
            MomentEstimate(order, float(powered.mean()), stderr, values.size, scheme, excluded)
        )
    return estimates


def estimate_moments(
    experiment: Callable[[RngStream], float],
    orders: Sequence[float],
    replicas: int,
    rng: RngStream,
    workers: int = 1,
) -> List[MomentEstimate]:
    """
    Estimate E[Q^n] for each order from `replicas` draws of the experiment.

    Args:
        experiment: Replica sampler (e.g. RatioDraw)
        orders: Moment orders n >= 0
        replicas: Number of replicas
        rng: Batch stream; replicas use rng.child(r), bootstrap uses a
            separate child stream
        workers: Process count

    Returns:
        MomentEstimate per order
    """
    require_replicas(replicas, MIN_MOMENT_REPLICAS, "Moment estimation")
    samples = run_replicas(experiment, replicas, rng.child(0), workers)
    return moments_from_samples(samples, orders, rng.child(1))


def _weighted_line(x: np.ndarray, y: np.ndarray, sd: np.ndarray):
    """WLS line; unit weights if every sd is 0."""
    positive = sd[sd > 0]
    if positive.size == 0:
        weights = np.ones_like(x)
    else:
        weights = 1.0 / np.where(sd > 0, sd, positive.min())
    slope, intercept = np.polyfit(x, y, 1, w=weights)
    residual = float(np.sqrt(np.sum((weights * (y - (slope * x + intercept))) ** 2)))
    return float(slope), float(intercept), residual


def _percentile_ci(draws: np.ndarray, estimate: float):
    half = 50.0 * (1.0 - CONFIDENCE)
    if draws.size == 0:
        return estimate, estimate
    lo, hi = np.percentile(draws, [half, 100.0 - half])
    return float(min(lo, estimate)), float(max(hi, estimate))


@dataclass(frozen=True)
class ScaledMomentDraw:
    """Replica of ln(G_alpha(e^{-s}S)^p / G_gamma(e^{-s}S)^q) at scale s + width."""

    rho: RadialKernel
    params: GmcParams
    p: float
    q: float
    s: float
    n: int
    pad_factor: int = 2
    fused: bool = True

    def __call__(self, rng: RngStream) -> float:
        grid = GridSpec(self.n, self.pad_factor, math.exp(-self.s))
        t = self.s + self.params.t
        sample = sample_field(self.rho, t, None, grid, rng, fused=self.fused)
        if self.p == 0 and self.q == 0:
            return 0.0
        log_alpha = gmc_mass(sample, self.params.alpha_c).log_value
        log_gamma = gmc_mass(sample, self.params.gamma_c).log_value
        return self.p * log_alpha - self.q * log_gamma


def scaling_regression(
    rho: RadialKernel,
    params: GmcParams,
    p: float,
    q: float,
    s_grid: Sequence[float],
    replicas: int,
    rng: RngStream,
    n: Optional[int] = None,
    workers: int = 1,
    target: Optional[float] = None,
) -> ExponentFit:
    """
    Fit ln E[G_alpha(e^{-s}S)^p / G_gamma(e^{-s}S)^q] against s.

    params.t is the constant width t - s; each point samples X_{s + t} on
    [0, e^{-s}]^2 with n cells per side (n = the smallest power of two
    resolving the width when None).

    Returns:
        ExponentFit with a parametric-bootstrap slope CI
    """
    width = params.t
    if n is None:
        n = 1 << max(1, math.ceil(math.log2(4.0 * math.exp(width) - 1e-9)))
    s_values = np.asarray(list(s_grid), dtype=float)
    if s_values.size < 2:
        raise DomainError("Scaling regression needs at least two scales")

    log_moments, sds = [], []
    for k, s in enumerate(s_values):
        draw = ScaledMomentDraw(rho, params, p, q, float(s), n)
        logs = np.asarray(run_replicas(draw, replicas, rng.child(k), workers), dtype=float)
        finite = np.isfinite(logs)
        if not np.all(finite):
            logger.warning(f"⚠ s={s:g}: {np.count_nonzero(~finite)} underflowed replicas excluded")
        logs = logs[finite]
        if logs.size < 2:
            raise ExperimentError(f"No usable replicas at s={s:g}")
        log_mean = float(logsumexp(logs) - math.log(logs.size))
        weights = np.exp(logs - logs.max())
        relative = float(np.std(weights, ddof=1) / (math.sqrt(logs.size) * weights.mean()))
        log_moments.append(log_mean)
        sds.append(relative)

    y, sd = np.array(log_moments), np.array(sds)
    slope, intercept, residual = _weighted_line(s_values, y, sd)
    generator = rng.child(len(s_values)).generator()
    draws = [
        _weighted_line(s_values, y + sd * generator.standard_normal(y.size), sd)[0]
        for _ in range(BOOTSTRAP_RESAMPLES)
    ]
    ci_low, ci_high = _percentile_ci(np.array(draws), slope)
    logger.info(f"✓ Scaling slope for (p,q)=({p:g},{q:g}): {slope:.4f} [{ci_low:.4f}, {ci_high:.4f}]")
    return ExponentFit(slope, intercept, s_values.tolist(), residual, ci_low, ci_high, target)


def _clopper_pearson(counts: np.ndarray, total: int):
    half = 0.5 * (1.0 - CONFIDENCE)
    counts = np.asarray(counts)
    low = np.where(counts > 0, stats.beta.ppf(half, np.maximum(counts, 1), total - counts + 1), 0.0)
    high = np.where(
        counts < total, stats.beta.ppf(1.0 - half, counts + 1, np.maximum(total - counts, 1)), 1.0
    )
    return low, high


def tail_curve(samples: Sequence[float], thresholds: Sequence[float]) -> TailCurve:
    """
    Empirical survival function at the given thresholds.

    Args:
        samples: Observed values
        thresholds: Thresholds x (sorted ascending internally)

    Returns:
        TailCurve with 95% Clopper-Pearson intervals
    """
    values = np.sort(np.asarray(samples, dtype=float))
    levels = np.sort(np.asarray(list(thresholds), dtype=float))
    total = values.size
    if total == 0:
        raise ExperimentError("Tail curve needs samples")
    require_replicas(total, MIN_TAIL_SAMPLES, "Tail curve")
    counts = total - np.searchsorted(values, levels, side="right")
    low, high = _clopper_pearson(counts, total)
    return TailCurve(levels, counts / total, low, high, total)


def _log_neg_log(p: np.ndarray) -> np.ndarray:
    return np.log(-np.log(p))


def select_tail_window(curve: TailCurve, max_ci_width: float = 0.15) -> np.ndarray:
    """
    Indices with 10/N <= P <= 0.1 and CI width in ln(-ln P) below max_ci_width.
    """
    p = curve.survival
    lo = np.clip(curve.ci_low, 1e-300, None)
    hi = np.clip(curve.ci_high, None, 1 - 1e-16)
    keep = (p >= 10.0 / curve.samples) & (p <= 0.1) & (curve.ci_low > 0) & (curve.ci_high < 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        width = np.abs(_log_neg_log(lo) - _log_neg_log(hi))
    return np.flatnonzero(keep & (width < max_ci_width))


def fit_stretched_exponential(
    curve: TailCurve,
    window: Optional[Sequence[int]] = None,
    rng: Optional[RngStream] = None,
    target: Optional[float] = None,
    resamples: int = BOOTSTRAP_RESAMPLES,
) -> ExponentFit:
    """
    Fit beta in ln(-ln P(Q > x)) = beta ln x + const.

    Weighted least squares with delta-method weights; the slope CI comes
    from a parametric binomial bootstrap of the curve.

    Args:
        curve: Tail curve
        window: Point indices (select_tail_window when None)
        rng: Bootstrap stream
        target: Reference exponent reported with the fit (e.g. 4/(alpha gamma))
        resamples: Bootstrap resamples

    Raises:
        WindowError: if fewer than 4 points or any P in {0, 1}
    """
    index = select_tail_window(curve) if window is None else np.asarray(list(window), dtype=int)
    if index.size < MIN_FIT_POINTS:
        raise WindowError(f"Tail window has {index.size} points, need {MIN_FIT_POINTS}")
    p = curve.survival[index]
    if np.any(p <= 0) or np.any(p >= 1) or np.any(curve.thresholds[index] <= 0):
        raise WindowError("Tail window contains degenerate survival estimates")

    total = curve.samples
    x = np.log(curve.thresholds[index])
    y = _log_neg_log(p)
    sd = np.sqrt((1.0 - p) / (total * p)) / np.abs(np.log(p))
    slope, intercept, residual = _weighted_line(x, y, sd)

    generator = (rng or RngStream(0)).generator()
    draws = []
    for _ in range(resamples):
        boot = generator.binomial(total, p) / total
        if np.any(boot <= 0) or np.any(boot >= 1):
            continue
        boot_sd = np.sqrt((1.0 - boot) / (total * boot)) / np.abs(np.log(boot))
        draws.append(_weighted_line(x, _log_neg_log(boot), boot_sd)[0])
    ci_low, ci_high = _percentile_ci(np.array(draws), slope)
    return ExponentFit(
        slope, intercept, curve.thresholds[index].tolist(), residual, ci_low, ci_high, target
    )


def laplace_curve(
    samples: Sequence[float],
    mu_grid: Sequence[float],
    target: Optional[float] = None,
    rng: Optional[RngStream] = None,
) -> LaplaceCurve:
    """
    ln of the empirical mean of e^{mu Q} in log-domain with delta-method errors.

    A mu point is flagged when the largest sample carries more than half of
    the empirical mean; flagged points are excluded from the growth fit of
    ln ln E[e^{mu Q}] against ln mu. The growth slope CI is a parametric
    bootstrap over the delta-method errors, drawn from rng.
    """
    values = np.asarray(samples, dtype=float)
    mus = np.asarray(list(mu_grid), dtype=float)
    if np.any(mus < 0):
        raise DomainError("Laplace parameters must be nonnegative")
    if values.size < 2:
        raise ExperimentError("Laplace curve needs at least 2 samples")

    log_mgf, stderr, dominated = [], [], []
    for mu in mus:
        if mu == 0:
            log_mgf.append(0.0)
            stderr.append(0.0)
            dominated.append(False)
            continue
        exponent = mu * values
        log_mgf.append(float(logsumexp(exponent) - math.log(values.size)))
        weights = np.exp(exponent - exponent.max())
        stderr.append(float(np.std(weights, ddof=1) / (math.sqrt(values.size) * weights.mean())))
        dominated.append(bool(weights.max() / weights.sum() > 0.5))

    curve = LaplaceCurve(mus, np.array(log_mgf), np.array(stderr), np.array(dominated))
    usable = (mus > 0) & ~curve.dominated & (curve.log_mgf > 0)
    if np.count_nonzero(usable) >= MIN_FIT_POINTS:
        x = np.log(mus[usable])
        y = np.log(curve.log_mgf[usable])
        sd = curve.stderr[usable] / curve.log_mgf[usable]
        slope, intercept, residual = _weighted_line(x, y, sd)
        generator = (rng or RngStream(0)).generator()
        draws = [
            _weighted_line(x, y + sd * generator.standard_normal(y.size), sd)[0]
            for _ in range(BOOTSTRAP_RESAMPLES)
        ]
        ci_low, ci_high = _percentile_ci(np.array(draws), slope)
        curve.growth = ExponentFit(
            slope, intercept, mus[usable].tolist(), residual, ci_low, ci_high, target
        )
    if np.any(curve.dominated):
        logger.warning(f"⚠ {int(np.sum(curve.dominated))} mu points dominated by the max sample")
    return curve


def laplace_convexity(curve: LaplaceCurve, sigma: float = 3.0) -> bool:
    """Slopes of ln E[e^{mu Q}] are non-decreasing up to sigma stderr."""
    if curve.mu.size < 3:
        return True
    slopes = np.diff(curve.log_mgf) / np.diff(curve.mu)
    slope_sd = np.hypot(curve.stderr[1:], curve.stderr[:-1]) / np.diff(curve.mu)
    tolerance = sigma * np.hypot(slope_sd[1:], slope_sd[:-1])
    return bool(np.all(np.diff(slopes) >= -tolerance - 1e-12))


def laplace_monotonicity(
    curves: Dict[float, LaplaceCurve], sigma: float = 3.0
) -> Dict[str, Any]:
    """
    ln E[e^{mu Q_{X_t}}] non-decreasing in t at every mu, up to sigma stderr.

    Args:
        curves: LaplaceCurve per t (same mu grid)

    Returns:
        {"passed": bool, "rows": [...]} with one row per (mu, t step)
    """
    scales = sorted(curves)
    rows = []
    for lo, hi in zip(scales, scales[1:]):
        first, second = curves[lo], curves[hi]
        for k, mu in enumerate(first.mu):
            gap = float(second.log_mgf[k] - first.log_mgf[k])
            band = sigma * math.hypot(first.stderr[k], second.stderr[k])
            rows.append(
                {"mu": float(mu), "t_lo": lo, "t_hi": hi, "increase": gap, "band": band,
                 "passed": gap >= -band - 1e-12}
            )
    return {"passed": all(row["passed"] for row in rows), "rows": rows}


def laplace_tail_convert(p: float, q: Optional[float] = None) -> Dict[str, float]:
    """
    Tail exponents implied by Laplace growth 1/(1-p).

    Args:
        p: Growth parameter in (0, 1)
        q: Optional lower growth parameter, 0 < q <= p

    Returns:
        {"upper_exponent": 1/p} plus "lower_exponent" = (1-q)/(q(1-p)) when q given
    """
    if not 0 < p < 1:
        raise DomainError(f"Laplace parameter p must lie in (0, 1), got {p}")
    result = {"upper_exponent": 1.0 / p}
    if q is not None:
        if not 0 < q <= p:
            raise DomainError(f"Lower parameter q must satisfy 0 < q <= p, got q={q}, p={p}")
        result["lower_exponent"] = (1.0 - q) / (q * (1.0 - p))
    return result


def p_from_laplace_growth(growth: float) -> float:
    """p with 1/(1-p) = growth (growth > 1)."""
    if not growth > 1:
        raise DomainError(f"Laplace growth exponent must exceed 1, got {growth}")
    return 1.0 - 1.0 / growth


@dataclass(frozen=True)
class SmallBallDraw:
    """
    Replica of the indicators sup|X_t| <= 1 along an increasing t grid.

    X_t is built incrementally (layers between consecutive grid values), so
    all t values of one replica share the same path. With params, also
    records whether Q_{X_t}(S) falls below ratio_floor on the event.
    """

    rho: RadialKernel
    t_grid: tuple
    grid: GridSpec
    step: float = 0.25
    params: Optional[GmcParams] = None

    def __call__(self, rng: RngStream) -> np.ndarray:
        values = np.zeros((self.grid.n, self.grid.n))
        out = np.zeros((len(self.t_grid), 2))
        previous, layer = 0.0, 0
        for k, t in enumerate(self.t_grid):
            for lo, hi in ScaleSchedule.uniform(t - previous, self.step).layers():
                cov = layer_covariance(self.rho, previous + lo, previous + hi)
                values = values + sample_layer(cov, self.grid, rng.child(layer)).values
                layer += 1
            previous = t
            inside = float(np.max(np.abs(values))) <= 1.0
            out[k, 0] = inside
            if inside and self.params is not None:
                sample = FieldSample(self.grid, values, 0.0, t)
                log_q = log_tilted_ratio(sample, None, self.params.at_scale(t))
                out[k, 1] = log_q < math.log(ratio_floor(self.params, t)) - 1e-9
        return out


@dataclass
class SmallBallCurve:
    """P(sup|X_t| <= 1) per t with censoring and the ln(-ln P) slope."""

    t_grid: List[float]
    probability: List[float]
    ci_low: List[float]
    ci_high: List[float]
    censored: List[bool]
    floor_violations: List[int]
    slope: Optional[float]
    replicas: int

    def rows(self) -> List[Dict[str, Any]]:
        return [
            {"t": t, "probability": p, "ci_low": lo, "ci_high": hi, "censored": c,
             "floor_violations": v}
            for t, p, lo, hi, c, v in zip(
                self.t_grid, self.probability, self.ci_low, self.ci_high, self.censored,
                self.floor_violations,
            )
        ]


def small_ball_estimate(
    rho: RadialKernel,
    t_grid: Sequence[float],
    grid: GridSpec,
    replicas: int,
    rng: RngStream,
    workers: int = 1,
    params: Optional[GmcParams] = None,
    step: float = 0.25,
) -> SmallBallCurve:
    """
    Estimate P(sup_S |X_t| <= 1) on an increasing t grid.

    Points with P < 10/replicas are censored. The slope of ln(-ln P) against
    t is fitted over uncensored points with 0 < P < 1.

    Raises:
        ConfigError: if the t grid is empty
        ExperimentError: if every point is censored
    """
    ts = tuple(float(t) for t in t_grid)
    if not ts:
        raise ConfigError("Small-ball t grid is empty")
    if any(b <= a for a, b in zip(ts, ts[1:])) or ts[0] < 0:
        raise DomainError(f"t grid must be nonnegative and increasing: {ts}")
    grid.check_resolution(max(ts))

    draw = SmallBallDraw(rho, ts, grid, step, params)
    results = np.asarray(run_replicas(draw, replicas, rng, workers))
    counts = results[:, :, 0].sum(axis=0).astype(int)
    violations = results[:, :, 1].sum(axis=0).astype(int)
    low, high = _clopper_pearson(counts, replicas)
    probability = counts / replicas
    censored = probability < 10.0 / replicas
    if np.all(censored):
        raise ExperimentError("Every small-ball point is censored; lower t or raise replicas")
    for t in np.asarray(ts)[censored]:
        logger.warning(f"⚠ Small-ball point t={t:g} censored (P < 10/{replicas})")

    usable = ~censored & (probability > 0) & (probability < 1)
    slope = None
    if np.count_nonzero(usable) >= 2:
        slope = float(np.polyfit(np.asarray(ts)[usable], _log_neg_log(probability[usable]), 1)[0])
    return SmallBallCurve(
        list(ts), probability.tolist(), low.tolist(), high.tolist(), censored.tolist(),
        violations.tolist(), slope, replicas,
    )


def gradient_statistic(field_s: FieldSample, s: float) -> float:
    """e^{-s} sup_S |grad X_s|."""
    return math.exp(-s) * gradient_sup(field_s)


@dataclass(frozen=True)
class GradientDraw:
    """Replica of e^{-s} sup|grad X_s| (0 at s = 0)."""

    rho: RadialKernel
    s: float
    grid: GridSpec
    fused: bool = True

    def __call__(self, rng: RngStream) -> float:
        sample = sample_field(self.rho, self.s, None, self.grid, rng, fused=self.fused)
        return gradient_statistic(sample, self.s)


def _implied_constant_rows(rows: List[Dict[str, Any]]) -> Dict[str, Any]:
    positive = [row["implied_c"] for row in rows if row["implied_c"] > 0]
    spread = max(positive) / min(positive) if positive else math.inf
    return {"rows": rows, "spread": spread, "passed": bool(positive) and spread < 4.0}


def gradient_moment_scan(
    rho: RadialKernel,
    s_grid: Sequence[float],
    m_grid: Sequence[int],
    grid: GridSpec,
    replicas: int,
    rng: RngStream,
    workers: int = 1,
) -> Dict[str, Any]:
    """
    Moments of e^{-s} sup|grad X_s| and the implied constant
    C = estimate^{1/m} / (e^s + sqrt(m)) per (s, m).

    Zero cells (s = 0) are reported but excluded from the spread; the scan
    passes when max C / min C < 4.
    """
    rows = []
    for k, s in enumerate(s_grid):
        grid.check_resolution(s)
        stats_s = np.asarray(run_replicas(GradientDraw(rho, float(s), grid), replicas, rng.child(k), workers))
        for m in m_grid:
            if m < 1:
                raise DomainError(f"Moment order must be >= 1, got {m}")
            powered = stats_s**m
            estimate = float(powered.mean())
            stderr = float(powered.std(ddof=1) / math.sqrt(powered.size))
            implied = estimate ** (1.0 / m) / (math.exp(s) + math.sqrt(m)) if estimate > 0 else 0.0
            rows.append({"s": float(s), "m": int(m), "moment": estimate, "stderr": stderr,
                         "implied_c": implied})
    return _implied_constant_rows(rows)


def tilted_moment_scan(
    rho: RadialKernel,
    params: GmcParams,
    slopes: Sequence[float],
    order: float,
    grid: GridSpec,
    replicas: int,
    rng: RngStream,
    workers: int = 1,
    step: float = 0.25,
) -> Dict[str, Any]:
    """
    E[L_{f,t}(S)^n] for linear tilts f(x) = k x_1 (sup|grad f| = k) and the
    implied constant estimate / (1 + k^{alpha gamma n / 2}).
    """
    exponent = 0.5 * params.alpha_c * params.gamma_c * order
    rows = []
    for k, slope in enumerate(slopes):
        draw = RatioDraw(rho, params, grid, step, fused=True, tilt_slope=float(slope))
        samples = run_replicas(draw, replicas, rng.child(k), workers)
        estimate = moments_from_samples(samples, [order], rng.child(len(slopes) + k))[0]
        implied = estimate.value / (1.0 + abs(slope) ** exponent)
        rows.append({"slope": float(slope), "order": order, "moment": estimate.value,
                     "stderr": estimate.stderr, "implied_c": implied})
    return _implied_constant_rows(rows)
