"""
Common factor approximation of correlated normal spreads.

At a fixed time the spreads q_i ~ N(mu_i, sigma_i^2) are replaced by
C + A_i with C ~ N(0, sigma_min^2 gamma) shared and A_i independent. The
maximum max(0, C + A_1, ..., C + A_N) then has the CDF
H(x) = (f_C * F_{max A})(x), which is evaluated by FFT convolution on a
uniform grid and integrated for the first two moments.
"""
import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy import fft as sp_fft
from scipy.integrate import simpson, trapezoid
from scipy.optimize import minimize_scalar
from scipy.special import ndtr, ndtri

from utils.errors import ConsistencyError, DegenerateVarianceError, InputError, InsufficientDomainError
from utils.term_structure import SpreadParams, TimeGrid, pair_correlation, spread_variance

logger = logging.getLogger(__name__)

INTEGRATION_RULES = ("trapezoid", "left")


@dataclass(frozen=True)
class ConvolutionSettings:
    delta: float = 5e-5
    eps_tail: float = 1e-10
    eps_gamma: float = 1e-10
    tau_cdf: float = 1e-9
    tau_prob: float = 1e-8
    tau_var: float = 1e-12
    width_sd: float = 8.0
    rule: str = "trapezoid"
    gh_nodes: int = 32
    max_domain_growth: int = 4

    def __post_init__(self):
        if not self.delta > 0:
            raise InputError("delta must be positive", field="delta")
        if not 0 < self.eps_tail < 0.5:
            raise InputError("eps_tail must lie in (0, 0.5)", field="eps_tail")
        if not 0 < self.eps_gamma < 1:
            raise InputError("eps_gamma must lie in (0, 1)", field="eps_gamma")
        if not self.width_sd > 0:
            raise InputError("quadrature width must be positive", field="quad_width")
        if self.rule not in INTEGRATION_RULES:
            raise InputError(f"integration rule must be one of {INTEGRATION_RULES}", field="integration_rule")
        if self.gh_nodes < 2:
            raise InputError("need at least two Gauss-Hermite nodes", field="gh_nodes")


@dataclass(frozen=True)
class FactorComponent:
    a_mean: float
    a_variance: float
    # zero-variance spreads stay at a_mean and do not load on C
    constant: bool = False


@dataclass(frozen=True)
class FactorDecomposition:
    gamma: float
    c_variance: float
    sigma_min_sq: float
    components: Tuple[FactorComponent, ...]

    @property
    def size(self) -> int:
        return len(self.components)

    @property
    def means(self) -> np.ndarray:
        return np.array([c.a_mean for c in self.components])

    @property
    def a_variances(self) -> np.ndarray:
        return np.array([c.a_variance for c in self.components])

    @property
    def constant_mask(self) -> np.ndarray:
        return np.array([c.constant for c in self.components], dtype=bool)

    @property
    def floor(self) -> float:
        """max(0, constant components)"""
        mask = self.constant_mask
        return max(0.0, float(self.means[mask].max())) if mask.any() else 0.0

    @property
    def total_variances(self) -> np.ndarray:
        return np.where(self.constant_mask, 0.0, self.a_variances + self.c_variance)

    def pairwise_correlation(self, i: int, j: int) -> float:
        total = self.total_variances
        if total[i] == 0 or total[j] == 0:
            return 0.0
        return self.c_variance / math.sqrt(total[i] * total[j])


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid x_lo, x_lo + delta, ..., x_hi"""

    x_lo: float
    x_hi: float
    delta: float

    def __post_init__(self):
        if not self.delta > 0 or self.x_hi < self.x_lo:
            raise InputError("grid needs delta > 0 and x_hi >= x_lo")
        steps = (self.x_hi - self.x_lo) / self.delta
        if abs(steps - round(steps)) > 1e-6:
            raise InputError("grid width must be an integral number of steps")

    @classmethod
    def from_origin(cls, upper: float, delta: float) -> "GridSpec":
        steps = max(int(math.ceil(upper / delta - 1e-9)), 1)
        return cls(0.0, steps * delta, delta)

    @property
    def size(self) -> int:
        return int(round((self.x_hi - self.x_lo) / self.delta)) + 1

    def points(self) -> np.ndarray:
        return self.x_lo + self.delta * np.arange(self.size)


@dataclass(frozen=True, eq=False)
class GridFunction:
    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 1 or vals.size != self.grid.size:
            raise InputError("grid function values do not match the grid")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def x_lo(self) -> float:
        return self.grid.x_lo

    @property
    def x_hi(self) -> float:
        return self.grid.x_hi

    @property
    def delta(self) -> float:
        return self.grid.delta

    def points(self) -> np.ndarray:
        return self.grid.points()

    def truncated(self, n_points: int) -> "GridFunction":
        grid = GridSpec(self.x_lo, self.x_lo + (n_points - 1) * self.delta, self.delta)
        return GridFunction(grid, self.values[:n_points])


# --- correlation fit -------------------------------------------------------


def optimize_gamma(
    sigmas: Sequence[float], target_corr: np.ndarray, eps_gamma: float = 1e-10, method: str = "auto"
) -> float:
    """Correlation optimization parameter closest (Frobenius) to ``target_corr``.

    ``method`` is ``auto`` (closed form for two spreads, bounded scalar search
    otherwise), ``closed_form`` or ``numerical``.
    """
    sig = np.asarray(sigmas, dtype=float)
    target = np.asarray(target_corr, dtype=float)
    n = sig.size
    if n < 1:
        raise InputError("need at least one spread")
    if target.shape != (n, n):
        raise InputError("target correlation shape does not match the spreads")
    if not np.allclose(target, target.T, atol=1e-12, rtol=0.0):
        raise InputError("target correlation must be symmetric")
    if np.any(sig <= 0):
        raise InputError("sigmas must be strictly positive")
    upper = 1.0 - eps_gamma
    if n == 1:
        return 0.0
    if method == "closed_form" or (method == "auto" and n == 2):
        if n != 2:
            raise InputError("closed-form gamma exists only for two spreads")
        raw = target[0, 1] * sig.max() / sig.min()
        return float(np.clip(raw, 0.0, upper))

    off = ~np.eye(n, dtype=bool)
    weights = (sig.min() ** 2 / np.outer(sig, sig))[off]
    targets = target[off]

    def objective(g: float) -> float:
        return float(np.sum((g * weights - targets) ** 2))

    res = minimize_scalar(objective, bounds=(0.0, upper), method="bounded", options={"xatol": 1e-12})
    candidates = sorted({0.0, float(res.x), upper})
    return min(candidates, key=lambda g: (objective(g), g))


def decompose(mus: Sequence[float], sigmas: Sequence[float], gamma: float) -> FactorDecomposition:
    mu = np.asarray(mus, dtype=float)
    sig = np.asarray(sigmas, dtype=float)
    if mu.shape != sig.shape or mu.ndim != 1 or mu.size == 0:
        raise InputError("means and sigmas must be matching non-empty vectors")
    if not 0.0 <= gamma < 1.0:
        raise InputError(f"gamma must lie in [0, 1), got {gamma}")
    if np.any(sig < 0):
        raise InputError("sigmas must be non-negative")
    var = sig ** 2
    constant = sig == 0
    sigma_min_sq = float(var[~constant].min()) if not constant.all() else 0.0
    c_var = sigma_min_sq * abs(gamma)
    comps = tuple(
        FactorComponent(float(m), 0.0, True) if k else FactorComponent(float(m), float(max(v - c_var, 0.0)))
        for m, v, k in zip(mu, var, constant)
    )
    return FactorDecomposition(gamma=float(gamma), c_variance=c_var, sigma_min_sq=sigma_min_sq, components=comps)


def correlation_bound(pi: SpreadParams, pj: SpreadParams, grid: TimeGrid, eps_gamma: float = 1e-10) -> float:
    """Largest instantaneous correlation whose exact two-spread match keeps gamma below 1"""
    if pi.xi == 0 or pj.xi == 0:
        raise DegenerateVarianceError("correlation bound needs non-zero volatilities")
    worst = 0.0
    for t in grid.points[1:]:
        si = math.sqrt(spread_variance(pi, t))
        sj = math.sqrt(spread_variance(pj, t))
        scale = pair_correlation(pi, pj, 1.0, t) * max(si, sj) / min(si, sj)
        worst = max(worst, scale)
    return (1.0 - eps_gamma) / worst


# --- distribution of the maximum ---------------------------------------------


def _component_cdfs(means: np.ndarray, variances: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Phi((x - mu_i) / sd_i) stacked on a trailing axis, steps where sd_i = 0"""
    xx = np.asarray(x, dtype=float)[..., None]
    sd = np.sqrt(variances)
    random = sd > 0
    out = np.empty(xx.shape[:-1] + (means.size,))
    if np.any(random):
        out[..., random] = ndtr((xx - means[random]) / sd[random])
    if np.any(~random):
        out[..., ~random] = (xx >= means[~random]).astype(float)
    return out


def _loaded_max_cdf(dec: FactorDecomposition, x) -> np.ndarray:
    """P[max A_i <= x] over the components that load on C"""
    mask = ~dec.constant_mask
    if not mask.any():
        return np.ones(np.shape(x))
    return np.prod(_component_cdfs(dec.means[mask], dec.a_variances[mask], x), axis=-1)


def _constant_step(dec: FactorDecomposition, x) -> np.ndarray:
    """1{x >= a_mean} over the constant components"""
    xx = np.asarray(x, dtype=float)
    mask = dec.constant_mask
    if not mask.any():
        return np.ones(xx.shape)
    return np.all(xx[..., None] >= dec.means[mask], axis=-1).astype(float)


def _gauss_hermite(n_nodes: int) -> Tuple[np.ndarray, np.ndarray]:
    """Standard normal nodes and probability weights"""
    u, w = hermegauss(n_nodes)
    return u, w / math.sqrt(2.0 * math.pi)


def independent_max_cdf(dec: FactorDecomposition, x):
    """P[max_i A_i <= x]; components with zero variance act as constants"""
    vals = np.prod(_component_cdfs(dec.means, dec.a_variances, x), axis=-1)
    return vals if np.ndim(x) else float(vals)


def _linear_convolve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    n = a.size + b.size - 1
    nfft = 1 << (n - 1).bit_length()
    out = sp_fft.irfft(sp_fft.rfft(a, nfft) * sp_fft.rfft(b, nfft), nfft)
    return out[:n]


def _as_cdf(values: np.ndarray, tau_cdf: float) -> np.ndarray:
    drops = np.diff(values)
    if drops.size and drops.min() < -tau_cdf:
        raise ConsistencyError(f"convolved CDF decreases by {-drops.min():.3e} (tolerance {tau_cdf:.1e})")
    return np.maximum.accumulate(np.clip(values, 0.0, 1.0))


def shifted_max_cdf(dec: FactorDecomposition, grid: GridSpec, settings: Optional[ConvolutionSettings] = None) -> GridFunction:
    """H(x) = P[C + max_i A_i <= x] on ``grid`` by linear FFT convolution.

    The density of C is sampled on +-width_sd standard deviations at the grid
    step and renormalised to unit mass. Below two grid steps the kernel is
    too coarse to sample and C is integrated by Gauss-Hermite instead.
    Constant components are not shifted by C.
    """
    settings = settings or ConvolutionSettings()
    if dec.c_variance <= 0:
        return GridFunction(grid, _as_cdf(independent_max_cdf(dec, grid.points()), settings.tau_cdf))

    delta = grid.delta
    sd = math.sqrt(dec.c_variance)
    x = grid.points()
    if sd < 2.0 * delta:
        u, w = _gauss_hermite(settings.gh_nodes)
        values = _loaded_max_cdf(dec, x[:, None] - sd * u[None, :]) @ w
    else:
        half = max(int(math.ceil(settings.width_sd * sd / delta)), 1)
        z = delta * np.arange(-half, half + 1)
        weights = np.exp(-0.5 * (z / sd) ** 2)
        weights /= weights.sum()

        xs = grid.x_lo + delta * np.arange(-half, grid.size + half)
        full = _linear_convolve(weights, _loaded_max_cdf(dec, xs))
        values = full[2 * half: 2 * half + grid.size]
    values = values * _constant_step(dec, x)
    return GridFunction(grid, _as_cdf(values, settings.tau_cdf))


def _tail_bound(means: np.ndarray, variances: np.ndarray, eps_tail: float) -> float:
    """x with P[max q_i > x] <= eps_tail by the union bound"""
    z = float(ndtri(1.0 - eps_tail / means.size))
    return max(0.0, float(means.max() + z * math.sqrt(float(variances.max()))))


def _cdf_on_cutoff_domain(
    evaluate: Callable[[GridSpec], GridFunction],
    bound: float,
    settings: ConvolutionSettings,
    notes: Optional[List[str]] = None,
) -> GridFunction:
    """Evaluate a CDF on [0, L] where L is the first grid point with 1 - H < eps_tail"""
    upper = bound
    for attempt in range(settings.max_domain_growth + 1):
        cdf = evaluate(GridSpec.from_origin(upper, settings.delta))
        reached = np.nonzero(1.0 - cdf.values < settings.eps_tail)[0]
        if reached.size:
            return cdf.truncated(int(reached[0]) + 1)
        grown = max(1.5 * upper, upper + 10 * settings.delta)
        msg = f"tail domain grown from {upper:.6g} to {grown:.6g}"
        logger.warning(msg)
        if notes is not None:
            notes.append(msg)
        upper = grown
    raise InsufficientDomainError(f"CDF does not reach 1 - {settings.eps_tail:g} on [0, {upper:.6g}]")


def max_cdf_to_cutoff(
    dec: FactorDecomposition, settings: Optional[ConvolutionSettings] = None, notes: Optional[List[str]] = None
) -> GridFunction:
    """H on [0, L(t_k)]"""
    settings = settings or ConvolutionSettings()
    bound = _tail_bound(dec.means, dec.total_variances, settings.eps_tail)
    return _cdf_on_cutoff_domain(lambda g: shifted_max_cdf(dec, g, settings), bound, settings, notes)


def tail_cutoff(dec: FactorDecomposition, eps_tail: float, settings: Optional[ConvolutionSettings] = None) -> float:
    settings = settings or ConvolutionSettings()
    if eps_tail != settings.eps_tail:
        settings = replace(settings, eps_tail=eps_tail)
    return max_cdf_to_cutoff(dec, settings).x_hi


# --- moments ----------------------------------------------------------------


def _check_tail(H: GridFunction, eps_tail: float) -> None:
    if abs(H.x_lo) > 1e-12:
        raise InsufficientDomainError("moment integrals need a grid starting at 0")
    if 1.0 - H.values[-1] >= eps_tail:
        raise InsufficientDomainError(f"grid ends at {H.x_hi:.6g} before the tail threshold {eps_tail:g}")


def _integrate(values: np.ndarray, delta: float, rule: str) -> float:
    if values.size < 2:
        return 0.0
    if rule == "left":
        return float(delta * values[:-1].sum())
    return float(trapezoid(values, dx=delta))


def max_expectation(H: GridFunction, eps_tail: float = 1e-10, rule: str = "trapezoid") -> float:
    """E[max(0, C + max A)] = int_0^L (1 - H(x)) dx"""
    _check_tail(H, eps_tail)
    return _integrate(1.0 - H.values, H.delta, rule)


def max_raw_second_moment(H: GridFunction, eps_tail: float = 1e-10, rule: str = "trapezoid") -> float:
    """E[max(0, C + max A)^2] = int_0^L 2x (1 - H(x)) dx"""
    _check_tail(H, eps_tail)
    return _integrate(2.0 * H.points() * (1.0 - H.values), H.delta, rule)


def max_variance(mean: float, raw_second: float, tau_var: float = 1e-12) -> float:
    var = raw_second - mean * mean
    if var < -tau_var:
        raise ConsistencyError(f"second moment {raw_second:.6e} below squared mean {mean * mean:.6e}")
    return max(0.0, var)


def _simpson_nodes(lo: float, hi: float, step: float, minimum: int = 401) -> np.ndarray:
    """Odd number of equally spaced nodes on [lo, hi], at most ``step`` apart"""
    nodes = max(int(math.ceil((hi - lo) / step)) + 1, minimum)
    nodes += 1 - nodes % 2
    return np.linspace(lo, hi, nodes)


def max_probabilities(dec: FactorDecomposition, settings: Optional[ConvolutionSettings] = None) -> Tuple[np.ndarray, float]:
    """P[C + A_i is the maximum and >= 0] per component, plus P[maximum = 0].

    Components whose idiosyncratic deviation is below a quarter grid step are
    treated as point masses and evaluated in closed form. Constant components
    raise the floor of the maximum; the first one at the floor takes the mass
    of C + max A below it.
    """
    settings = settings or ConvolutionSettings()
    means, a_var = dec.means, dec.a_variances
    n = dec.size
    const = dec.constant_mask
    loaded = np.nonzero(~const)[0]
    sd_a = np.sqrt(a_var)
    sd_c = math.sqrt(dec.c_variance)
    floor = dec.floor
    point = (sd_a < 0.25 * settings.delta) & ~const

    def clears_floor(x):
        """P[C + x >= floor]"""
        if sd_c > 0:
            return ndtr((np.asarray(x) - floor) / sd_c)
        return (np.asarray(x) >= floor).astype(float)

    probs = np.zeros(n)
    if const.any() and floor > 0:
        # the first constant at the floor takes the mass below it; ties with zero go to zero
        top = int(np.nonzero(const & (means == floor))[0][0])
        if sd_c > 0:
            u, w = _gauss_hermite(settings.gh_nodes)
            probs[top] = float(_loaded_max_cdf(dec, floor - sd_c * u) @ w)
        else:
            probs[top] = float(_loaded_max_cdf(dec, floor))

    for i in np.nonzero(point)[0]:
        others = loaded[loaded != i]
        at = _component_cdfs(means[others], a_var[others], means[i]) if others.size else np.ones(0)
        probs[i] = float(clears_floor(means[i])) * float(np.prod(at))

    random = np.nonzero(~point & ~const)[0]
    if random.size:
        spread_sd = math.sqrt(float(dec.total_variances.max()))
        lo = float(means[loaded].min()) - settings.width_sd * spread_sd
        hi = float(means[loaded].max()) + settings.width_sd * spread_sd
        missing = float(_loaded_max_cdf(dec, lo)) + 1.0 - float(_loaded_max_cdf(dec, hi))
        if missing > settings.tau_prob:
            raise InsufficientDomainError(f"probability quadrature domain misses mass {missing:.3e}")
        if sd_c == 0:
            lo = max(lo, floor)
        if hi > lo:
            breaks = [lo, hi]
            if 0 < sd_c < 2.0 * settings.delta:
                # resolve the step of P[C + x >= floor] below the grid step
                edge = settings.width_sd * sd_c
                breaks = sorted({lo, hi, *(b for b in (floor - edge, floor + edge) if lo < b < hi)})
            pieces = [_simpson_nodes(a, b, settings.delta) for a, b in zip(breaks[:-1], breaks[1:])]
            for k, i in enumerate(loaded):
                if point[i]:
                    continue
                total = 0.0
                for x in pieces:
                    cdfs = _component_cdfs(means[loaded], a_var[loaded], x)
                    others = np.prod(np.delete(cdfs, k, axis=1), axis=1)
                    density = np.exp(-0.5 * ((x - means[i]) / sd_a[i]) ** 2) / (sd_a[i] * math.sqrt(2 * math.pi))
                    total += float(simpson(density * clears_floor(x) * others, x=x))
                probs[i] = total
    probs = np.clip(probs, 0.0, 1.0)
    residual = 1.0 - float(probs.sum())
    return probs, residual


# --- two-group extension -----------------------------------------------------


def _pair_nodes(s1: float, s2: float, c_corr: float, n_nodes: int):
    """Gauss-Hermite nodes of (C1, C2): C1 per outer node, C2 per (outer, inner)"""
    u, w = _gauss_hermite(n_nodes)
    c1 = s1 * u
    c2 = s2 * (c_corr * u[:, None] + math.sqrt(1.0 - c_corr ** 2) * u[None, :])
    return c1, c2, w


def _check_groups(dec1: FactorDecomposition, dec2: FactorDecomposition, c_corr: float) -> None:
    if not -1.0 < c_corr < 1.0:
        raise InputError(f"common factor correlation must lie in (-1, 1), got {c_corr}")
    if dec1.size == 0 or dec2.size == 0:
        raise InputError("both groups need at least one spread")


def _two_group_loaded_cdf(dec1: FactorDecomposition, dec2: FactorDecomposition, c_corr: float, z: np.ndarray, gh_nodes: int):
    """P[C1 + max A^(1) <= z and C2 + max A^(2) <= z] over the loaded components"""
    c1, c2, w = _pair_nodes(math.sqrt(dec1.c_variance), math.sqrt(dec2.c_variance), c_corr, gh_nodes)
    f1 = _loaded_max_cdf(dec1, z[:, None] - c1[None, :])
    f2 = _loaded_max_cdf(dec2, z[:, None, None] - c2[None, :, :])
    inner = np.einsum("zab,b->za", f2, w)
    return np.einsum("za,za,a->z", f1, inner, w)


def two_group_max_cdf(
    dec1: FactorDecomposition, dec2: FactorDecomposition, c_corr: float, z, gh_nodes: int = 32
):
    """P[max(0, C1 + max A^(1), C2 + max A^(2)) <= z] by tensor Gauss-Hermite over (C1, C2)"""
    _check_groups(dec1, dec2, c_corr)
    zz = np.atleast_1d(np.asarray(z, dtype=float))
    vals = _two_group_loaded_cdf(dec1, dec2, c_corr, zz, gh_nodes)
    vals = vals * _constant_step(dec1, zz) * _constant_step(dec2, zz)
    vals = np.where(zz < 0, 0.0, np.clip(vals, 0.0, 1.0))
    return vals if np.ndim(z) else float(vals[0])


def two_group_max_cdf_to_cutoff(
    dec1: FactorDecomposition,
    dec2: FactorDecomposition,
    c_corr: float,
    settings: Optional[ConvolutionSettings] = None,
    notes: Optional[List[str]] = None,
) -> GridFunction:
    settings = settings or ConvolutionSettings()
    means = np.concatenate([dec1.means, dec2.means])
    variances = np.concatenate([dec1.total_variances, dec2.total_variances])
    bound = _tail_bound(means, variances, settings.eps_tail)

    def evaluate(grid: GridSpec) -> GridFunction:
        vals = two_group_max_cdf(dec1, dec2, c_corr, grid.points(), settings.gh_nodes)
        return GridFunction(grid, _as_cdf(vals, settings.tau_cdf))

    return _cdf_on_cutoff_domain(evaluate, bound, settings, notes)


def two_group_max_probabilities(
    dec1: FactorDecomposition,
    dec2: FactorDecomposition,
    c_corr: float,
    settings: Optional[ConvolutionSettings] = None,
) -> Tuple[np.ndarray, float]:
    """Maximum probabilities of the two-group model, group 1 components first.

    For component i of group g the value x >= floor of C_g + A_i is
    integrated with Simpson's rule, the common factor pair with Gauss-Hermite.
    Idiosyncratic deviations are floored at one grid step. The first constant
    component at the floor takes the mass of the loaded maximum below it.
    """
    settings = settings or ConvolutionSettings()
    _check_groups(dec1, dec2, c_corr)
    residual = float(two_group_max_cdf(dec1, dec2, c_corr, 0.0, settings.gh_nodes))
    means = np.concatenate([dec1.means, dec2.means])
    const = np.concatenate([dec1.constant_mask, dec2.constant_mask])
    floor = max(dec1.floor, dec2.floor)
    probs = np.zeros(means.size)
    if floor > 0:
        top = int(np.nonzero(const & (means == floor))[0][0])
        probs[top] = float(_two_group_loaded_cdf(dec1, dec2, c_corr, np.array([floor]), settings.gh_nodes)[0])

    spread_sd = math.sqrt(float(np.concatenate([dec1.total_variances, dec2.total_variances]).max()))
    hi = float(means[~const].max()) + settings.width_sd * spread_sd if not const.all() else floor
    if hi <= floor:
        return np.clip(probs, 0.0, 1.0), residual

    nodes = min(max(int(math.ceil((hi - floor) / settings.delta)) + 1, 201), 2001)
    nodes += 1 - nodes % 2
    # constants never exceed the floor, so above it only the loaded components compete
    x = np.linspace(floor, hi, nodes)
    c1, c2, w = _pair_nodes(math.sqrt(dec1.c_variance), math.sqrt(dec2.c_variance), c_corr, settings.gh_nodes)
    # shifts per (outer a, inner b): group 1 sees c1[a], group 2 sees c2[a, b]
    shifts = ((c1[:, None] * np.ones_like(c2)), c2)

    for g, (own, other) in enumerate(((dec1, dec2), (dec2, dec1))):
        offset = 0 if g == 0 else dec1.size
        loaded = np.nonzero(~own.constant_mask)[0]
        if not loaded.size:
            continue
        own_shift, other_shift = (shifts[0], shifts[1]) if g == 0 else (shifts[1], shifts[0])
        rel_own = x[:, None, None] - own_shift[None, :, :]
        other_max = _loaded_max_cdf(other, x[:, None, None] - other_shift[None, :, :])
        sd = np.maximum(np.sqrt(own.a_variances[loaded]), settings.delta)
        cdfs = _component_cdfs(own.means[loaded], sd ** 2, rel_own)
        for k, i in enumerate(loaded):
            density = np.exp(-0.5 * ((rel_own - own.means[i]) / sd[k]) ** 2) / (sd[k] * math.sqrt(2 * math.pi))
            rest = np.prod(np.delete(cdfs, k, axis=-1), axis=-1)
            integral = simpson(density * rest * other_max, x=x, axis=0)
            probs[offset + i] = float(np.einsum("ab,a,b->", integral, w, w))
    return np.clip(probs, 0.0, 1.0), residual
