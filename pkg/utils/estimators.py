"""
CTD discount factor estimators.

moment_series runs the common factor pipeline at every grid time; cf1,
diffusion_variance and mr_variance fold the series over the grid with left
sums and estimate() assembles CF1 and the two second-order corrections.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from utils.common_factor import (
    ConvolutionSettings,
    FactorDecomposition,
    decompose,
    max_cdf_to_cutoff,
    max_expectation,
    max_probabilities,
    max_raw_second_moment,
    max_variance,
    optimize_gamma,
    two_group_max_cdf_to_cutoff,
    two_group_max_probabilities,
)
from utils.errors import InputError
from utils.term_structure import CorrelationSpec, SpreadParams, TimeGrid, correlation_matrix_at, spread_mean, spread_variance

logger = logging.getLogger(__name__)

VARIANCE_MODES = ("central", "raw")
INNER_VARIABLES = ("s", "t")
ESTIMATOR_NAMES = ("cf1", "cf2_diffusion", "cf2_mr")

# gamma counts as clamped when it sits on the upper bound up to solver slack
_CLAMP_SLACK = 1e-9


@dataclass(frozen=True)
class GroupSplit:
    """Spreads [0, size) form group 1, the rest group 2"""

    size: int
    c_corr: Optional[float] = None


@dataclass(frozen=True)
class EstimatorSettings:
    variance_mode: str = "central"
    inner_variable: str = "s"
    estimators: Tuple[str, ...] = ESTIMATOR_NAMES
    base_discount: Optional[float] = None
    workers: int = 1
    groups: Optional[GroupSplit] = None
    conv: ConvolutionSettings = field(default_factory=ConvolutionSettings)

    def __post_init__(self):
        if self.variance_mode not in VARIANCE_MODES:
            raise InputError(f"variance mode must be one of {VARIANCE_MODES}", field="variance_mode")
        if self.inner_variable not in INNER_VARIABLES:
            raise InputError(f"inner variable must be one of {INNER_VARIABLES}", field="inner_variable")
        unknown = set(self.estimators) - set(ESTIMATOR_NAMES)
        if unknown or not self.estimators:
            raise InputError(f"unknown estimators {sorted(unknown)}", field="estimators")
        if self.base_discount is not None and not self.base_discount > 0:
            raise InputError("base discount must be positive", field="base_discount")
        if self.workers < 1:
            raise InputError("workers must be at least 1", field="workers")

    @property
    def needs_probabilities(self) -> bool:
        return "cf2_mr" in self.estimators


@dataclass(frozen=True)
class _TimeMoments:
    mean: float
    raw_second: float
    variance: float
    probs: np.ndarray
    residual: float
    cutoff: float
    points: int
    gamma: float
    clamped: bool
    notes: Tuple[str, ...] = ()


@dataclass(frozen=True, eq=False)
class MaxMomentSeries:
    """Moments of the approximated maximum at every grid time"""

    times: np.ndarray
    mean: np.ndarray
    raw_second: np.ndarray
    variance: np.ndarray
    probs: Optional[np.ndarray]
    residual: Optional[np.ndarray]
    cutoff: np.ndarray
    grid_points: np.ndarray
    gamma: np.ndarray
    gamma_clamped: np.ndarray
    warnings: Tuple[str, ...] = ()

    def __len__(self) -> int:
        return self.times.size

    def selected_variance(self, mode: str = "central") -> np.ndarray:
        if mode not in VARIANCE_MODES:
            raise InputError(f"variance mode must be one of {VARIANCE_MODES}", field="variance_mode")
        return self.raw_second if mode == "raw" else self.variance


@dataclass(frozen=True)
class EstimateReport:
    cf1: float
    psi: Optional[float]
    chi: Optional[float]
    cf2_diffusion: Optional[float]
    cf2_mr: Optional[float]
    variance_mode: str
    base_discount: Optional[float] = None
    psi_alt: Optional[float] = None
    chi_alt: Optional[float] = None
    estimators: Tuple[str, ...] = ESTIMATOR_NAMES
    warnings: Tuple[str, ...] = ()
    series: Optional[MaxMomentSeries] = field(default=None, repr=False, compare=False)

    def discounted(self) -> Dict[str, Optional[float]]:
        """Estimates multiplied by the base discount factor P0(0, T) (1 if unset)"""
        scale = 1.0 if self.base_discount is None else self.base_discount
        values = {"cf1": self.cf1, "cf2_diffusion": self.cf2_diffusion, "cf2_mr": self.cf2_mr}
        return {k: None if v is None else v * scale for k, v in values.items() if k in self.estimators}

    def as_row(self) -> Dict[str, object]:
        row: Dict[str, object] = {k: getattr(self, k) for k in self.estimators}
        row["psi"] = self.psi
        row["chi"] = self.chi
        row["variance_mode"] = self.variance_mode
        row["psi_alt"] = self.psi_alt
        row["chi_alt"] = self.chi_alt
        if self.base_discount is not None:
            row["base_discount"] = self.base_discount
            row.update({f"{k}_discounted": v for k, v in self.discounted().items()})
        return row


# --- per-time pipeline -------------------------------------------------------


def _deterministic_moments(mus: np.ndarray) -> _TimeMoments:
    """max(0, mu_i) with all mass on the argmax, ties going to the zero component"""
    top = float(mus.max())
    probs = np.zeros(mus.size)
    if top > 0:
        probs[int(np.argmax(mus))] = 1.0
    mean = max(0.0, top)
    return _TimeMoments(
        mean=mean, raw_second=mean * mean, variance=0.0, probs=probs, residual=1.0 - probs.sum(),
        cutoff=mean, points=0, gamma=0.0, clamped=False,
    )


def _check_admissible(corr: CorrelationSpec, groups: Optional[GroupSplit]) -> None:
    if groups is None:
        if not corr.is_base_admissible():
            raise InputError("instantaneous correlations must lie in [0, 1) for the common factor model", field="corr")
        return
    if not 1 <= groups.size < corr.size:
        raise InputError("group split must leave at least one spread in each group", field="group_split")
    first = list(range(groups.size))
    second = list(range(groups.size, corr.size))
    for idx in (first, second):
        if not corr.submatrix(idx).is_base_admissible():
            raise InputError("within-group correlations must lie in [0, 1)", field="corr")


def _fit_gamma(sig: np.ndarray, target: np.ndarray, conv: ConvolutionSettings) -> Tuple[float, bool]:
    """gamma over the spreads with variance; constant spreads do not enter the fit"""
    live = sig > 0
    if np.count_nonzero(live) < 2:
        return 0.0, False
    gamma = optimize_gamma(sig[live], target[np.ix_(live, live)], conv.eps_gamma)
    return gamma, gamma >= 1.0 - conv.eps_gamma - _CLAMP_SLACK


def _fit_group_corr(dec1: FactorDecomposition, dec2: FactorDecomposition, cross_cov: np.ndarray, eps: float) -> float:
    """Least squares c with c s1 s2 ~ target covariances across the loaded spreads of both groups"""
    s12 = math.sqrt(dec1.c_variance * dec2.c_variance)
    cross = cross_cov[np.ix_(~dec1.constant_mask, ~dec2.constant_mask)]
    if s12 == 0 or cross.size == 0:
        return 0.0
    return float(np.clip(cross.mean() / s12, -1.0 + eps, 1.0 - eps))


def _moments_at(
    t: float,
    spreads: Sequence[SpreadParams],
    corr: CorrelationSpec,
    conv: ConvolutionSettings,
    groups: Optional[GroupSplit],
    with_probs: bool,
) -> _TimeMoments:
    mus = np.array([spread_mean(p, t) for p in spreads])
    sig = np.sqrt([spread_variance(p, t) for p in spreads])
    if t <= 0 or np.all(sig == 0):
        return _deterministic_moments(mus)

    target = correlation_matrix_at(spreads, corr, t)
    notes: List[str] = []
    if groups is None:
        gamma, clamped = _fit_gamma(sig, target, conv)
        dec = decompose(mus, sig, gamma)
        H = max_cdf_to_cutoff(dec, conv, notes)
        probs_fn = lambda: max_probabilities(dec, conv)  # noqa: E731
    else:
        g1 = slice(0, groups.size)
        g2 = slice(groups.size, len(spreads))
        gamma1, clamped1 = _fit_gamma(sig[g1], target[g1, g1], conv)
        gamma2, clamped2 = _fit_gamma(sig[g2], target[g2, g2], conv)
        dec1 = decompose(mus[g1], sig[g1], gamma1)
        dec2 = decompose(mus[g2], sig[g2], gamma2)
        if groups.c_corr is not None:
            c_corr = groups.c_corr
        else:
            cross = target[g1, g2] * np.outer(sig[g1], sig[g2])
            c_corr = _fit_group_corr(dec1, dec2, cross, conv.eps_gamma)
        gamma, clamped = max(gamma1, gamma2), clamped1 or clamped2
        H = two_group_max_cdf_to_cutoff(dec1, dec2, c_corr, conv, notes)
        probs_fn = lambda: two_group_max_probabilities(dec1, dec2, c_corr, conv)  # noqa: E731

    mean = max_expectation(H, conv.eps_tail, conv.rule)
    raw = max_raw_second_moment(H, conv.eps_tail, conv.rule)
    # quadrature of the two integrals is consistent to O(delta * mean)
    var = max_variance(mean, raw, max(conv.tau_var, conv.delta * abs(mean)))

    probs = np.zeros(len(spreads))
    residual = float("nan")
    if with_probs:
        probs, residual = probs_fn()
        gap = abs(residual - float(H.values[0]))
        if gap > conv.tau_prob:
            notes.append(f"P[max=0] differs from H(0) by {gap:.2e} at t={t:g}")
    return _TimeMoments(
        mean=mean, raw_second=raw, variance=var, probs=probs, residual=residual,
        cutoff=H.x_hi, points=H.grid.size, gamma=gamma, clamped=clamped, notes=tuple(notes),
    )


def moment_series(
    spreads: Sequence[SpreadParams],
    corr: CorrelationSpec,
    grid: TimeGrid,
    conv: Optional[ConvolutionSettings] = None,
    groups: Optional[GroupSplit] = None,
    with_probs: bool = True,
    workers: int = 1,
) -> MaxMomentSeries:
    """Mean, second moment, variance and maximum probabilities at every t_k"""
    conv = conv or ConvolutionSettings()
    if len(spreads) != corr.size:
        raise InputError("correlation matrix does not match the number of spreads", field="corr")
    _check_admissible(corr, groups)
    for p in spreads:
        p.theta.check_domain(grid.maturity)

    times = grid.points

    def run(t: float) -> _TimeMoments:
        return _moments_at(float(t), spreads, corr, conv, groups, with_probs)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            points = list(pool.map(run, times))
    else:
        points = [run(t) for t in times]

    clamped = np.array([p.clamped for p in points])
    warnings: List[str] = []
    if clamped.any():
        first = float(times[int(np.argmax(clamped))])
        msg = f"gamma clamped at 1 - eps_gamma at {int(clamped.sum())} of {times.size} time points (first t={first:g})"
        logger.warning(msg)
        warnings.append(msg)
    for p in points:
        warnings.extend(p.notes)

    return MaxMomentSeries(
        times=times,
        mean=np.array([p.mean for p in points]),
        raw_second=np.array([p.raw_second for p in points]),
        variance=np.array([p.variance for p in points]),
        probs=np.vstack([p.probs for p in points]) if with_probs else None,
        residual=np.array([p.residual for p in points]) if with_probs else None,
        cutoff=np.array([p.cutoff for p in points]),
        grid_points=np.array([p.points for p in points], dtype=int),
        gamma=np.array([p.gamma for p in points]),
        gamma_clamped=clamped,
        warnings=tuple(warnings),
    )


# --- estimators --------------------------------------------------------------


def _check_covers(series: MaxMomentSeries, grid: TimeGrid) -> None:
    if len(series) != grid.steps + 1:
        raise InputError(f"series has {len(series)} points, grid needs {grid.steps + 1}")


def cf1(series: MaxMomentSeries, grid: TimeGrid) -> float:
    _check_covers(series, grid)
    return math.exp(-float(series.mean[:-1].sum()) * grid.dt)


def _clamped_path(values: np.ndarray) -> Tuple[np.ndarray, int]:
    """Rebuild a variance path from its non-negative increments"""
    steps = np.diff(values)
    clamps = int(np.count_nonzero(steps < 0))
    path = values[0] + np.concatenate([[0.0], np.cumsum(np.maximum(steps, 0.0))])
    return path, clamps


def diffusion_variance(
    series: MaxMomentSeries, grid: TimeGrid, variance_mode: str = "central", notes: Optional[List[str]] = None
) -> float:
    """Psi(T): integral variance from the piecewise-constant diffusion coefficient"""
    _check_covers(series, grid)
    path, clamps = _clamped_path(series.selected_variance(variance_mode))
    if clamps:
        msg = f"{clamps} negative variance increments clamped to 0 ({variance_mode} mode)"
        logger.warning(msg)
        if notes is not None:
            notes.append(msg)
    dt, R = grid.dt, grid.steps
    inner = np.cumsum(path[:R]) * dt * dt
    remaining = (grid.maturity - grid.points[:R]) * path[:R] * dt
    return max(0.0, float(inner.sum() + remaining.sum()))


def weighted_kappa(series: MaxMomentSeries, kappas: Sequence[float]) -> np.ndarray:
    """kappa~(t_k) = sum_i P[max = spread i] kappa_i; the zero component has kappa 0"""
    if series.probs is None:
        raise InputError("series was computed without maximum probabilities")
    k = np.asarray(kappas, dtype=float)
    if k.size != series.probs.shape[1]:
        raise InputError("one kappa per spread expected", field="kappa")
    return series.probs @ k


def mr_variance(
    series: MaxMomentSeries,
    kappa_tilde: np.ndarray,
    grid: TimeGrid,
    variance_mode: str = "central",
    inner_variable: str = "s",
) -> float:
    """chi(T) = 2 int_0^T e^{-K(t)} int_0^t e^{K(s)} V(s) ds dt with left sums"""
    _check_covers(series, grid)
    if inner_variable not in INNER_VARIABLES:
        raise InputError(f"inner variable must be one of {INNER_VARIABLES}", field="inner_variable")
    kt = np.asarray(kappa_tilde, dtype=float)
    if kt.size != len(series):
        raise InputError("kappa~ must cover the grid")
    dt, R = grid.dt, grid.steps
    V = series.selected_variance(variance_mode)
    K = np.concatenate([[0.0], np.cumsum(kt[:R]) * dt])
    growth = np.exp(K[:R])
    if inner_variable == "s":
        inner = np.concatenate([[0.0], np.cumsum(growth * V[:R])[:-1]]) * dt
    else:
        inner = np.concatenate([[0.0], np.cumsum(growth)[:-1]]) * V[:R] * dt
    return max(0.0, 2.0 * float(np.sum(np.exp(-K[:R]) * inner)) * dt)


def estimate(
    spreads: Sequence[SpreadParams],
    corr: CorrelationSpec,
    grid: TimeGrid,
    settings: Optional[EstimatorSettings] = None,
    series: Optional[MaxMomentSeries] = None,
) -> EstimateReport:
    """CF1 and the second-order estimators; a precomputed series is reused"""
    settings = settings or EstimatorSettings()
    if series is None:
        series = moment_series(
            spreads, corr, grid, settings.conv, settings.groups,
            with_probs=settings.needs_probabilities, workers=settings.workers,
        )
    notes: List[str] = list(series.warnings)
    mode = settings.variance_mode
    other = "raw" if mode == "central" else "central"

    first = cf1(series, grid)
    psi = psi_alt = chi = chi_alt = None
    cf2_diff = cf2_mr = None
    if "cf2_diffusion" in settings.estimators:
        psi = diffusion_variance(series, grid, mode, notes)
        psi_alt = diffusion_variance(series, grid, other)
        cf2_diff = first * (1.0 + 0.5 * psi)
    if "cf2_mr" in settings.estimators:
        kt = weighted_kappa(series, [p.kappa for p in spreads])
        chi = mr_variance(series, kt, grid, mode, settings.inner_variable)
        chi_alt = mr_variance(series, kt, grid, other, settings.inner_variable)
        cf2_mr = first * (1.0 + 0.5 * chi)

    logger.info(f"✅ CF1={first:.8f} CF2(diffusion)={cf2_diff} CF2(mean reversion)={cf2_mr}")
    return EstimateReport(
        cf1=first, psi=psi, chi=chi, cf2_diffusion=cf2_diff, cf2_mr=cf2_mr,
        variance_mode=mode, base_discount=settings.base_discount,
        psi_alt=psi_alt, chi_alt=chi_alt, estimators=tuple(settings.estimators),
        warnings=tuple(notes), series=series,
    )
