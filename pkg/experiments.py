#!/usr/bin/env python3
"""
Experiment handling logic for the chaos lab.
Each subcommand is a handler method returning a result dictionary with the
tables to emit, the acceptance checks and run metadata.
"""

import logging
import math
import time
from dataclasses import dataclass
from functools import cached_property
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from config import ExperimentConfig, validate_config
from errors import (
    ConfigError,
    DivergenceError,
    ExperimentError,
    PreconditionError,
    WindowError,
)
from field_sampler import (
    GridSpec,
    encode_snapshot,
    gradient_sup,
    sample_field,
    sample_increment_by_scaling,
)
from gmc_core import (
    CASCADE_TOLERANCE,
    GmcParams,
    RegionMask,
    barycenter_oscillation,
    cascade_decomposition,
    gmc_mass,
    group_separation,
    heuristic_tail_exponent,
    laplace_growth_target,
    laplace_lower_bound,
    log_tilted_ratio,
    split_increment,
    subcube_tilt_constant,
    subdivide,
    tail_exponent_target,
    zeta,
)
from kahane_lab import (
    GaussianVectorSpec,
    InterpolationPath,
    ProductFunctionalSpec,
    check_convex_order,
    check_derivative_consistency,
    check_kahane_variant,
    check_noise_chain,
    grid_points,
    q_functional,
)
from kernel_lab import (
    RadialKernel,
    build_mollifier,
    estimate_bound_A,
    eval_g0,
    eval_k0,
    layer_covariance,
)
from seed_schedule import RngStream, SeedScheduler
from stat_engine import (
    MIN_MOMENT_REPLICAS,
    MIN_TAIL_SAMPLES,
    RatioDraw,
    fit_stretched_exponential,
    gradient_moment_scan,
    laplace_convexity,
    laplace_curve,
    laplace_monotonicity,
    laplace_tail_convert,
    moments_from_samples,
    p_from_laplace_growth,
    run_replicas,
    scaling_regression,
    small_ball_estimate,
    tail_curve,
    tilted_moment_scan,
)

logger = logging.getLogger(__name__)

BOUND_A_SCALES = (1.0, 2.0, 4.0, 8.0)
RELATIVE_TOLERANCE = 1e-9


def direct_balanced_ratio(values: np.ndarray, params: GmcParams, cell_area: float,
                          variance: float) -> float:
    """Balanced ratio by plain compensated summation over the cells."""
    a, g = params.alpha_c, params.gamma_c
    p, q = params.mass_exponents
    flat = [float(v) for v in np.ravel(values)]
    mass_a = math.fsum(cell_area * math.exp(a * v - 0.5 * a * a * variance) for v in flat)
    mass_g = math.fsum(cell_area * math.exp(g * v - 0.5 * g * g * variance) for v in flat)
    return mass_a**p / mass_g**q


def _random_square(generator: np.random.Generator, n: int):
    size = int(generator.integers(1, n // 2 + 1))
    row = int(generator.integers(0, n - size + 1))
    col = int(generator.integers(0, n - size + 1))
    return row, col, size


@dataclass(frozen=True)
class PathwiseDraw:
    """
    One replica of Q(S) plus the pathwise checks on the same sample.

    Returns (Q, G_alpha(S), G_gamma(S), Hölder bound held, subadditivity
    violations over random disjoint square pairs).
    """

    ratio: RatioDraw
    pairs: int = 50

    def __call__(self, rng: RngStream):
        sample = self.ratio.field(rng)
        params = self.ratio.params
        grid = sample.grid
        variance = sample.pointwise_variance

        q_full = math.exp(log_tilted_ratio(sample, None, params))
        bound = math.exp(0.5 * params.alpha_c * params.gamma_c * variance) * grid.side**2
        holder = q_full <= bound * (1.0 + RELATIVE_TOLERANCE)

        generator = rng.child(2).generator()
        violations = 0
        tested = 0
        while tested < self.pairs and grid.n >= 2:
            first = RegionMask.square(grid, *_random_square(generator, grid.n))
            second = RegionMask.square(grid, *_random_square(generator, grid.n))
            if not first.is_disjoint(second):
                continue
            tested += 1
            union = math.exp(log_tilted_ratio(sample, None, params, first.union(second)))
            parts = math.exp(log_tilted_ratio(sample, None, params, first)) + math.exp(
                log_tilted_ratio(sample, None, params, second)
            )
            if union > parts * (1.0 + RELATIVE_TOLERANCE):
                violations += 1

        mass_alpha = math.exp(gmc_mass(sample, params.alpha_c).log_value)
        mass_gamma = math.exp(gmc_mass(sample, params.gamma_c).log_value)
        return q_full, mass_alpha, mass_gamma, holder, violations


@dataclass(frozen=True)
class CascadeDraw:
    """One replica of the subdivision identity at s = ln es."""

    rho: RadialKernel
    params: GmcParams
    grid: GridSpec
    es: int

    def sample(self, rng: RngStream):
        s = math.log(self.es)
        field_s = sample_field(self.rho, s, None, self.grid, rng.child(0), fused=True)
        increment = sample_increment_by_scaling(
            self.rho, s, self.params.t, self.grid, rng.child(1), fused=True
        )
        return field_s, increment

    def __call__(self, rng: RngStream) -> Dict[str, Any]:
        field_s, increment = self.sample(rng)
        blocks = split_increment(increment, self.es)
        result = cascade_decomposition(field_s, blocks, self.params, self.es)
        return {
            "lhs": result.lhs,
            "rhs": result.rhs,
            "holds": result.holds,
            "identity_error": result.identity_error,
            "max_oscillation": float(np.max(barycenter_oscillation(field_s, self.es))),
        }


def _check(name: str, passed: bool, detail: str = "") -> Dict[str, Any]:
    status = "✓" if passed else "⚠"
    logger.info(f"{status} {name}: {detail}")
    return {"name": name, "passed": bool(passed), "detail": detail}


def _table(name: str, header: Sequence[str], rows: List[Sequence[Any]]) -> Dict[str, Any]:
    return {"name": name, "header": list(header), "rows": rows}


class ExperimentHandler:
    """
    Handles experiment subcommands.
    Independent of the command-line layer so it can be driven from tests.
    """

    # Subcommands
    SUBCOMMAND_KERNEL_TABLE = "kernel-table"
    SUBCOMMAND_SAMPLE = "sample"
    SUBCOMMAND_MOMENTS = "moments"
    SUBCOMMAND_SCALING = "scaling"
    SUBCOMMAND_TAIL = "tail"
    SUBCOMMAND_LAPLACE = "laplace"
    SUBCOMMAND_SMALL_BALL = "small-ball"
    SUBCOMMAND_GRAD_MOMENTS = "grad-moments"
    SUBCOMMAND_CASCADE = "cascade"
    SUBCOMMAND_KAHANE = "kahane"
    SUBCOMMAND_VALIDATE = "validate"

    # Error kinds carried by error results
    ERROR_CONFIG = "config"
    ERROR_PRECONDITION = "precondition"

    def __init__(
        self,
        config: ExperimentConfig,
        scheduler: Optional[SeedScheduler] = None,
        workers: int = 1,
        sigma: float = 3.0,
    ):
        """
        Initialize the experiment handler.

        Args:
            config: Validated experiment configuration
            scheduler: Seed scheduler (one for config.seed if None)
            workers: Worker processes for replica batches
            sigma: Tolerance of statistical checks in standard errors
        """
        self.config = config
        self.scheduler = scheduler or SeedScheduler(config.seed)
        self.workers = workers
        self.sigma = sigma
        self._handlers = {
            self.SUBCOMMAND_KERNEL_TABLE: self.handle_kernel_table,
            self.SUBCOMMAND_SAMPLE: self.handle_sample,
            self.SUBCOMMAND_MOMENTS: self.handle_moments,
            self.SUBCOMMAND_SCALING: self.handle_scaling,
            self.SUBCOMMAND_TAIL: self.handle_tail,
            self.SUBCOMMAND_LAPLACE: self.handle_laplace,
            self.SUBCOMMAND_SMALL_BALL: self.handle_small_ball,
            self.SUBCOMMAND_GRAD_MOMENTS: self.handle_grad_moments,
            self.SUBCOMMAND_CASCADE: self.handle_cascade,
            self.SUBCOMMAND_KAHANE: self.handle_kahane,
            self.SUBCOMMAND_VALIDATE: self.handle_validate,
        }

    @classmethod
    def subcommands(cls) -> List[str]:
        return [
            value for key, value in vars(cls).items() if key.startswith("SUBCOMMAND_")
        ]

    @cached_property
    def rho(self) -> RadialKernel:
        started = time.perf_counter()
        rho = build_mollifier(self.config.mollifier_spec())
        logger.info(
            f"✓ Mollifier {rho.label} built in {time.perf_counter() - started:.2f}s "
            f"({rho.radii.size} radii)"
        )
        return rho

    @property
    def experiment(self) -> Dict[str, Any]:
        return self.config.experiment

    @property
    def replicas(self) -> int:
        return self.config.replicas

    def _require_replicas(self, minimum: int, purpose: str) -> None:
        if self.replicas < minimum:
            raise ConfigError(
                f"{purpose} needs experiment.replicas >= {minimum}, got {self.replicas}"
            )

    def _ratio_draw(self, params: GmcParams, grid: Optional[GridSpec] = None, **extra):
        return RatioDraw(
            self.rho,
            params,
            grid or self.config.grid(),
            float(self.config.field["step"]),
            bool(self.config.field["fused"]),
            float(self.experiment["perturbation_amplitude"]),
            **extra,
        )

    def handle(self, subcommand: str) -> Dict[str, Any]:
        """
        Dispatch a subcommand.

        Args:
            subcommand: One of the SUBCOMMAND_* values

        Returns:
            Result dictionary with "status", "type", "tables", "checks",
            "metadata" and "artifacts"
        """
        handler = self._handlers.get(subcommand)
        if handler is None:
            logger.warning(f"Unknown subcommand: {subcommand}")
            return {
                "status": "error",
                "error": self.ERROR_CONFIG,
                "message": f"Unknown subcommand: {subcommand}",
            }

        logger.info(f"Running {subcommand} ({self.replicas} replicas, {self.workers} workers)")
        result = {"tables": [], "checks": [], "metadata": {}, "artifacts": []}
        try:
            result.update(handler())
        except ConfigError as e:
            logger.error(f"{subcommand} rejected its configuration: {e}")
            return {"status": "error", "error": self.ERROR_CONFIG, "message": str(e)}
        except PreconditionError as e:
            logger.error(f"{subcommand} stopped on a numerical precondition: {e}")
            return {"status": "error", "error": self.ERROR_PRECONDITION, "message": str(e)}
        result["status"] = "success"
        result["type"] = subcommand
        return result

    def handle_validate(self) -> Dict[str, Any]:
        """Dry-run validation report; no sampling."""
        report = validate_config(self.config)
        return {
            "checks": [_check("config_valid", True, f"t_max = {report['t_max']:g}")],
            "metadata": report,
        }

    def handle_kernel_table(self) -> Dict[str, Any]:
        """rho, K0, g0 and layer covariances on r = 0, 0.01, ..., 2."""
        rho = self.rho
        radii = np.arange(201) / 100.0
        layers = [(float(lo), float(hi)) for lo, hi in self.experiment["kernel_layers"]]
        covariances = [layer_covariance(rho, lo, hi) for lo, hi in layers]

        rows = []
        for r in radii:
            try:
                k0 = eval_k0(rho, float(r))
            except DivergenceError:
                k0 = math.inf
            row = [float(r), float(rho(r)), k0, eval_g0(rho, float(r))]
            row.extend(float(cov(r)) for cov in covariances)
            rows.append(row)
        header = ["r", "rho", "k0", "g0"] + [f"layer_{lo:g}_{hi:g}" for lo, hi in layers]

        checks = [
            _check("rho_normalized", float(rho(0.0)) == 1.0, f"rho(0) = {float(rho(0.0))!r}"),
            _check(
                "rho_support",
                float(rho(1.0)) == 0.0 and float(rho(1.5)) == 0.0,
                "rho(1) = rho(1.5) = 0",
            ),
            _check("k0_vanishes_at_1", eval_k0(rho, 1.0) == 0.0, "K0(1) = 0"),
        ]

        identity_radii = np.arange(1, 101) / 101.0
        identity_error = max(
            abs(eval_k0(rho, float(r), method="direct") + math.log(r) - eval_g0(rho, float(r)))
            for r in identity_radii
        )
        checks.append(
            _check(
                "k0_g0_identity",
                identity_error <= 1e-8,
                f"max |K0 + ln r - g0| = {identity_error:.3e} over 100 radii",
            )
        )

        for (a, b), (c, e) in zip(layers, layers[1:]):
            if b != c:
                continue
            combined = layer_covariance(rho, a, e)
            gap = float(
                np.max(np.abs(combined(radii) - layer_covariance(rho, a, b)(radii)
                              - layer_covariance(rho, b, e)(radii)))
            )
            checks.append(
                _check(f"layer_additivity_{a:g}_{b:g}_{e:g}", gap <= 1e-9, f"max gap {gap:.3e}")
            )

        coarse = estimate_bound_A(rho, BOUND_A_SCALES, np.geomspace(1e-3, 2.0, 200))
        fine = estimate_bound_A(rho, BOUND_A_SCALES, np.geomspace(1e-3, 2.0, 400))
        change = abs(fine - coarse) / max(fine, 1e-300)
        checks.append(
            _check("bound_a_stable", change < 0.05, f"A = {fine:.6g}, refinement change {change:.2%}")
        )
        return {
            "tables": [_table("kernel_table", header, rows)],
            "checks": checks,
            "metadata": {
                "mollifier": rho.label,
                "fingerprint": rho.fingerprint,
                "bound_a": fine,
                "bound_a_band": 2.0 * fine,
            },
        }

    def handle_sample(self) -> Dict[str, Any]:
        """Draw field snapshots of X_t (or X_t + Z) with summary statistics."""
        params = self.config.params()
        draw = self._ratio_draw(params)
        count = int(self.experiment["snapshots"])
        base = self.scheduler.base("sample", count)
        rows, artifacts = [], []
        for replica in range(count):
            stream = base.child(replica)
            sample = draw.field(stream)
            rows.append(
                [
                    replica,
                    stream.path,
                    float(sample.values.mean()),
                    float(sample.values.var()),
                    float(sample.values.min()),
                    float(sample.values.max()),
                    gradient_sup(sample),
                ]
            )
            artifacts.append(
                {
                    "name": f"snapshots/field_{replica:03d}.bin",
                    "kind": "snapshot",
                    "payload": encode_snapshot(sample),
                }
            )
        header = ["replica", "seed_path", "mean", "variance", "min", "max", "gradient_sup"]
        return {
            "tables": [_table("samples", header, rows)],
            "artifacts": artifacts,
            "metadata": {"t": params.t, "grid_n": self.config.grid().n},
        }

    def handle_moments(self) -> Dict[str, Any]:
        """E[Q^n] over the t grid with the pathwise and normalization checks."""
        self._require_replicas(MIN_MOMENT_REPLICAS, "moments")
        orders = [float(order) for order in self.experiment["orders"]]
        pairs = int(self.experiment["subadditivity_pairs"])
        rows, checks, by_t = [], [], {}
        for t in [float(t) for t in self.experiment["t_grid"]]:
            params = self.config.params(t)
            base = self.scheduler.base(f"moments/t={t:g}", self.replicas)
            draw = PathwiseDraw(self._ratio_draw(params), pairs)
            results = run_replicas(draw, self.replicas, base.child(0), self.workers)
            ratios = [item[0] for item in results]
            estimates = moments_from_samples(ratios, orders, base.child(1))
            by_t[t] = {estimate.order: estimate for estimate in estimates}
            for estimate in estimates:
                rows.append(
                    [t, estimate.order, estimate.value, estimate.stderr, estimate.replicas,
                     estimate.excluded]
                )

            holder_failures = sum(1 for item in results if not item[3])
            violations = sum(item[4] for item in results)
            checks.append(
                _check(f"holder_bound_t={t:g}", holder_failures == 0,
                       f"{holder_failures} violations of Q <= e^(alpha gamma t/2)|S|")
            )
            checks.append(
                _check(f"subadditivity_t={t:g}", violations == 0,
                       f"{violations} violations over {pairs} pairs per replica")
            )
            checks.append(
                _check(f"finite_samples_t={t:g}", estimates[0].excluded == 0,
                       f"{estimates[0].excluded} non-finite samples")
            )
            for label, column in (("alpha", 1), ("gamma", 2)):
                masses = np.array([item[column] for item in results])
                mean = float(masses.mean())
                stderr = float(masses.std(ddof=1) / math.sqrt(masses.size))
                checks.append(
                    _check(f"mass_mean_{label}_t={t:g}",
                           abs(mean - 1.0) <= self.sigma * stderr + 1e-12,
                           f"mean {mean:.5f} +- {stderr:.5f}")
                )

        scales = sorted(by_t)
        for order in orders:
            if order < 1:
                continue
            for lo, hi in zip(scales, scales[1:]):
                first, second = by_t[lo][order].value, by_t[hi][order].value
                ratio = second / first if first > 0 else math.inf
                checks.append(
                    _check(f"moment_growth_n={order:g}_t={lo:g}->{hi:g}", ratio < 2.0,
                           f"ratio {ratio:.4f}")
                )
        header = ["t", "order", "value", "stderr", "replicas", "excluded"]
        return {"tables": [_table("moments", header, rows)], "checks": checks}

    def handle_scaling(self) -> Dict[str, Any]:
        """Slope of ln E[G_alpha^p / G_gamma^q] over shrinking squares against zeta."""
        p, q = float(self.experiment["p"]), float(self.experiment["q"])
        params = self.config.params(float(self.experiment["scaling_width"]))
        target = zeta(params, p, q)
        fit = scaling_regression(
            self.rho,
            params,
            p,
            q,
            [float(s) for s in self.experiment["s_grid"]],
            self.replicas,
            self.scheduler.base(f"scaling/p={p:g},q={q:g}", self.replicas),
            workers=self.workers,
            target=target,
        )
        band = max(0.1, 0.15 * abs(target))
        checks = [
            _check("scaling_slope", abs(fit.slope - target) <= band,
                   f"slope {fit.slope:.4f} vs zeta {target:.4f} (band {band:.3f})")
        ]
        header = ["p", "q", "slope", "intercept", "ci_low", "ci_high", "zeta", "residual_norm"]
        rows = [[p, q, fit.slope, fit.intercept, fit.ci_low, fit.ci_high, target,
                 fit.residual_norm]]
        return {
            "tables": [_table("scaling", header, rows)],
            "checks": checks,
            "metadata": {"fit": fit.to_dict()},
        }

    def _tail_fit(self, t: float):
        params = self.config.params(t)
        base = self.scheduler.base(f"tail/t={t:g}", self.replicas)
        samples = np.asarray(
            run_replicas(self._ratio_draw(params), self.replicas, base.child(0), self.workers)
        )
        quantiles = [float(level) for level in self.experiment["tail_quantiles"]]
        curve = tail_curve(samples, np.quantile(samples, quantiles))
        target = tail_exponent_target(params)
        try:
            fit = fit_stretched_exponential(curve, rng=base.child(1), target=target)
        except WindowError as e:
            logger.warning(f"⚠ Tail fit at t={t:g} skipped: {e}")
            fit = None
        return params, curve, fit

    def handle_tail(self) -> Dict[str, Any]:
        """Empirical survival of Q and the stretched-exponential exponent."""
        self._require_replicas(MIN_TAIL_SAMPLES, "tail")
        params, curve, fit = self._tail_fit(self.config.params().t)
        target = tail_exponent_target(params)
        curve_rows = [
            [row["threshold"], row["survival"], row["ci_low"], row["ci_high"]]
            for row in curve.rows()
        ]
        tables = [_table("tail_curve", ["threshold", "survival", "ci_low", "ci_high"], curve_rows)]

        fit_header = ["t", "beta", "ci_low", "ci_high", "target", "heuristic", "window"]
        fit_rows = []
        checks = []
        if fit is None:
            checks.append(_check("tail_exponent_band", False, "no valid tail window"))
        else:
            fit_rows.append([params.t, fit.slope, fit.ci_low, fit.ci_high, target,
                             heuristic_tail_exponent(params), len(fit.window)])
            checks.append(
                _check("tail_exponent_band", 0.5 * target <= fit.slope <= 2.0 * target,
                       f"beta {fit.slope:.4f} vs target {target:.4f}")
            )

        sweep = sorted(float(t) for t in self.experiment["tail_t_grid"])
        fits = {}
        for t in sweep:
            _, _, sweep_fit = self._tail_fit(t)
            fits[t] = sweep_fit
            if sweep_fit is not None:
                fit_rows.append([t, sweep_fit.slope, sweep_fit.ci_low, sweep_fit.ci_high,
                                 target, heuristic_tail_exponent(params), len(sweep_fit.window)])
        if len(sweep) >= 2:
            low, high = fits[sweep[0]], fits[sweep[-1]]
            moved = (
                low is not None
                and high is not None
                and high.slope >= low.slope - (low.ci_high - low.ci_low)
            )
            checks.append(_check("tail_exponent_drift", moved,
                                 f"beta at t={sweep[-1]:g} vs t={sweep[0]:g}"))
        tables.append(_table("tail_fit", fit_header, fit_rows))
        return {
            "tables": tables,
            "checks": checks,
            "metadata": {
                "target_exponent": round(target, 4),
                "heuristic_exponent": heuristic_tail_exponent(params),
                "fit": fit.to_dict() if fit else None,
            },
        }

    def handle_laplace(self) -> Dict[str, Any]:
        """ln E[e^{mu Q}] over the t grid: monotonicity, convexity and growth."""
        mu_grid = [float(mu) for mu in self.experiment["mu_grid"]]
        probability = self.experiment.get("small_ball_probability")
        curves, rows, fit_rows, checks = {}, [], [], []
        for t in [float(t) for t in self.experiment["t_grid"]]:
            params = self.config.params(t)
            base = self.scheduler.base(f"laplace/t={t:g}", self.replicas)
            samples = run_replicas(self._ratio_draw(params), self.replicas, base, self.workers)
            target = laplace_growth_target(params)
            # replicas use base.child(0 .. replicas - 1)
            curve = laplace_curve(samples, mu_grid, target=target, rng=base.child(self.replicas))
            curves[t] = curve
            for row in curve.rows():
                bound = None
                if probability is not None:
                    bound = laplace_lower_bound(params, t, row["mu"], float(probability))
                rows.append([t, row["mu"], row["log_mgf"], row["stderr"], row["dominated"], bound])
            checks.append(_check(f"laplace_convex_t={t:g}", laplace_convexity(curve, self.sigma)))
            if curve.growth is not None:
                growth = curve.growth.slope
                converted: Dict[str, Any] = {}
                if growth > 1:
                    p = p_from_laplace_growth(growth)
                    converted = laplace_tail_convert(p)
                    converted["p"] = p
                fit_rows.append([t, growth, curve.growth.ci_low, curve.growth.ci_high, target,
                                 converted.get("p"), converted.get("upper_exponent")])

        monotone = laplace_monotonicity(curves, self.sigma)
        checks.append(_check("laplace_monotone_in_t", monotone["passed"],
                             f"{len(monotone['rows'])} (mu, t) steps"))
        return {
            "tables": [
                _table("laplace",
                       ["t", "mu", "log_mgf", "stderr", "dominated", "lower_bound"], rows),
                _table("laplace_growth",
                       ["t", "growth", "ci_low", "ci_high", "target", "p", "upper_exponent"],
                       fit_rows),
            ],
            "checks": checks,
        }

    def handle_small_ball(self) -> Dict[str, Any]:
        """P(sup|X_t| <= 1) over the t grid with the ratio-floor check."""
        params = self.config.params()
        grid = self.config.grid(int(self.experiment["small_ball_n"]))
        curve = small_ball_estimate(
            self.rho,
            [float(t) for t in self.experiment["small_ball_t_grid"]],
            grid,
            self.replicas,
            self.scheduler.base("small-ball", self.replicas),
            self.workers,
            params=params,
            step=float(self.config.field["step"]),
        )
        checks = []
        limit = params.d + 0.5
        checks.append(
            _check("small_ball_slope",
                   curve.slope is not None and 0 < curve.slope <= limit,
                   f"slope {curve.slope} (ceiling {limit:g})")
        )
        monotone = all(
            nxt <= high + 1e-12
            for nxt, high in zip(curve.probability[1:], curve.ci_high[:-1])
        )
        checks.append(_check("small_ball_monotone", monotone))
        violations = sum(curve.floor_violations)
        checks.append(_check("ratio_floor", violations == 0, f"{violations} replicas below floor"))
        header = ["t", "probability", "ci_low", "ci_high", "censored", "floor_violations"]
        rows = [[row[key] for key in header] for row in curve.rows()]
        return {
            "tables": [_table("small_ball", header, rows)],
            "checks": checks,
            "metadata": {"slope": curve.slope, "grid_n": grid.n},
        }

    def handle_grad_moments(self) -> Dict[str, Any]:
        """Gradient-sup moments and, for nonzero slopes, tilted-ratio moments."""
        grid = self.config.grid()
        scan = gradient_moment_scan(
            self.rho,
            [float(s) for s in self.experiment["grad_s_grid"]],
            [int(m) for m in self.experiment["grad_m_grid"]],
            grid,
            self.replicas,
            self.scheduler.base("grad-moments", self.replicas),
            self.workers,
        )
        header = ["s", "m", "moment", "stderr", "implied_c"]
        tables = [_table("grad_moments", header, [[row[k] for k in header] for row in scan["rows"]])]
        checks = [_check("implied_c_bounded", scan["passed"], f"spread {scan['spread']:.3f}")]
        metadata: Dict[str, Any] = {"spread": scan["spread"]}

        slopes = [float(k) for k in self.experiment["tilt_slopes"]]
        if slopes:
            params = self.config.params()
            tilted = tilted_moment_scan(
                self.rho,
                params,
                slopes,
                float(max(self.experiment["orders"])),
                grid,
                self.replicas,
                self.scheduler.base("grad-moments/tilted", self.replicas),
                self.workers,
                step=float(self.config.field["step"]),
            )
            tilt_header = ["slope", "order", "moment", "stderr", "implied_c"]
            tables.append(
                _table("tilted_moments", tilt_header,
                       [[row[k] for k in tilt_header] for row in tilted["rows"]])
            )
            checks.append(_check("tilted_c_bounded", tilted["passed"],
                                 f"spread {tilted['spread']:.3f}"))
            metadata["subcube_tilt_constant"] = subcube_tilt_constant(params)
        return {"tables": tables, "checks": checks, "metadata": metadata}

    def handle_cascade(self) -> Dict[str, Any]:
        """Subdivision identity and subadditivity at s = ln es, pathwise."""
        es = int(self.experiment["cascade_es"])
        params = self.config.params()
        grid = self.config.grid()
        if params.t < math.log(es):
            raise ExperimentError(f"Cascade needs t >= ln {es}, got t = {params.t}")
        draw = CascadeDraw(self.rho, params, grid, es)
        base = self.scheduler.base("cascade", self.replicas)
        results = run_replicas(draw, self.replicas, base, self.workers)

        rows = [
            [k, item["lhs"], item["rhs"], item["holds"], item["identity_error"],
             item["max_oscillation"]]
            for k, item in enumerate(results)
        ]
        failures = sum(1 for item in results if not item["holds"])
        worst = max(item["identity_error"] for item in results)
        checks = [
            _check("cascade_subadditivity", failures == 0, f"{failures} violations"),
            _check("cascade_identity", worst <= CASCADE_TOLERANCE, f"max error {worst:.3e}"),
        ]

        field_s, increment = draw.sample(base.child(0))
        oracle = direct_balanced_ratio(
            field_s.values + increment.values, params, grid.cell_area, params.t
        )
        gap = abs(oracle - results[0]["lhs"]) / oracle
        checks.append(_check("cascade_direct_oracle", gap <= RELATIVE_TOLERANCE,
                             f"relative gap {gap:.3e}"))

        separation = group_separation(subdivide(RegionMask.full(grid), es))
        header = ["replica", "lhs", "rhs", "holds", "identity_error", "max_oscillation"]
        return {
            "tables": [_table("cascade", header, rows)],
            "checks": checks,
            "metadata": {"es": es, "s": math.log(es), "group_separation": separation},
        }

    def _kahane_configs(self):
        side = int(self.experiment["kahane_side_points"])
        points = grid_points(side)
        weights = np.full(points.shape[0], 1.0 / points.shape[0])
        params = self.config.params()
        x_spec = GaussianVectorSpec.from_kernel(points, layer_covariance(self.rho, 0.0, 1.0), "X")
        y_spec = GaussianVectorSpec.from_kernel(points, layer_covariance(self.rho, 0.0, 2.0), "Y")
        shifted = x_spec.with_covariance(x_spec.covariance + 0.5, "X+0.5")
        balanced = q_functional(params.alpha, params.gamma, weights)
        square = ProductFunctionalSpec.build([(2.0, 1.0, weights)])
        return x_spec, y_spec, shifted, balanced, square

    def handle_kahane(self) -> Dict[str, Any]:
        """Finite-dimensional comparison checks on a small point grid."""
        replicas = int(self.experiment["kahane_replicas"])
        x_spec, y_spec, shifted, balanced, square = self._kahane_configs()
        rows, checks = [], []

        configs = [
            ("balanced_layers", InterpolationPath(x_spec, y_spec, 0.5), balanced),
            ("square_shift", InterpolationPath(x_spec, shifted, 0.5), square),
            ("balanced_shift", InterpolationPath(x_spec, shifted, 0.25), balanced),
        ]
        for k, (name, path, func) in enumerate(configs):
            report = check_derivative_consistency(
                path, func, replicas, self.scheduler.stream("kahane/derivative", k), self.sigma
            )
            rows.append([f"derivative_{name}", report.formula.value, report.formula.stderr,
                         report.finite_difference.value, report.passed])
            checks.append(_check(f"derivative_{name}", report.passed,
                                 f"formula {report.formula.value:.5g}, "
                                 f"fd {report.finite_difference.value:.5g}"))

        variant_cases = [("square_shift", x_spec, shifted, square),
                         ("balanced_layers", x_spec, y_spec, balanced)]
        for k, (name, first, second, func) in enumerate(variant_cases):
            report = check_kahane_variant(
                first, second, func, replicas, self.scheduler.stream("kahane/variant", k),
                self.sigma,
            )
            rows.append([f"variant_{name}", report.ratio_xy, report.constant_c,
                         math.exp(report.constant_c), report.passed])
            checks.append(_check(f"variant_{name}", report.passed,
                                 f"A = {report.bound_a:.4g}, C = {report.constant_c:.4g}"))

        convex = check_convex_order(
            x_spec, y_spec, balanced, replicas, self.scheduler.stream("kahane/convex"),
            sigma=self.sigma,
        )
        for row in convex.rows:
            rows.append([f"convex_{row['function']}", row["difference"]["value"],
                         row["difference"]["stderr"], None, row["passed"]])
        checks.append(_check("convex_order", convex.passed,
                             f"min eigenvalue {convex.min_difference_eigenvalue:.3e}"))

        chain = check_noise_chain(
            x_spec,
            y_spec.covariance - x_spec.covariance,
            balanced,
            [0.25, 0.5, 1.0],
            replicas,
            self.scheduler.stream("kahane/noise-chain"),
            sigma=self.sigma,
        )
        for variance, estimate in zip(chain.variances, chain.estimates):
            rows.append([f"noise_chain_v={variance:g}", estimate.value, estimate.stderr, None,
                         chain.passed])
        checks.append(_check("noise_chain_monotone", chain.passed))

        header = ["check", "value", "stderr", "reference", "passed"]
        return {
            "tables": [_table("kahane", header, rows)],
            "checks": checks,
            "metadata": {
                "points": x_spec.size,
                "replicas": replicas,
                "convex_boundary_case": convex.boundary_case,
            },
        }
