"""
Monte Carlo and quadrature reference values.

Paths are sampled from the exact Gaussian transition of the correlated OU
system, so the only error is statistical. Batch b draws from the stream
seeded by (seed, b) and batches are folded in order, so results do not
depend on the number of workers.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.special import ndtr

from utils.errors import InputError, UnsupportedError
from utils.term_structure import CorrelationSpec, SpreadParams, TimeGrid, spread_mean

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class McSettings:
    n_paths: int = 100_000
    seed: int = 20_200_601
    antithetic: bool = False
    batch_size: int = 20_000
    workers: int = 1

    def __post_init__(self):
        if self.n_paths < 2:
            raise InputError("need at least two Monte Carlo paths", field="mc_paths")
        if self.batch_size < 1:
            raise InputError("batch size must be positive", field="mc_batch_size")
        if self.antithetic and (self.n_paths % 2 or self.batch_size % 2):
            raise InputError("antithetic sampling needs an even path count and batch size", field="mc_antithetic")
        if self.workers < 1:
            raise InputError("workers must be at least 1", field="workers")

    def batch_sizes(self) -> List[int]:
        full, rest = divmod(self.n_paths, self.batch_size)
        return [self.batch_size] * full + ([rest] if rest else [])


@dataclass(frozen=True)
class McEstimate:
    value: float
    std_error: float
    n_paths: int

    def agrees_with(self, value: float, n_se: float = 3.0, slack: float = 0.0) -> bool:
        return abs(self.value - value) <= n_se * self.std_error + slack


def simulate_step_cov(spreads: Sequence[SpreadParams], corr: CorrelationSpec, dt: float) -> np.ndarray:
    """Exact covariance of the OU transition noise over one step"""
    if not dt > 0:
        raise InputError("step must be positive", field="dt")
    if corr.size != len(spreads):
        raise InputError("correlation matrix does not match the number of spreads", field="corr")
    kappa = np.array([p.kappa for p in spreads])
    xi = np.array([p.xi for p in spreads])
    ksum = kappa[:, None] + kappa[None, :]
    cov = corr.rho * np.outer(xi, xi) * -np.expm1(-ksum * dt) / ksum
    cov = 0.5 * (cov + cov.T)
    scale = max(float(np.abs(np.diag(cov)).max()), 1e-300)
    if np.linalg.eigvalsh(cov).min() < -1e-12 * scale:
        raise InputError("step covariance is not positive semi-definite", field="corr")
    return cov


def _noise_factor(cov: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        # singular (perfect correlation or zero vol): symmetric square root
        vals, vecs = np.linalg.eigh(cov)
        return vecs * np.sqrt(np.maximum(vals, 0.0))


@dataclass(frozen=True)
class _PathModel:
    mean: np.ndarray  # (R + 1, N) marginal means on the grid
    decay: np.ndarray  # (N,) e^{-kappa dt}
    factor: np.ndarray  # (N, N) noise loading
    dt: float
    steps: int

    @classmethod
    def build(cls, spreads: Sequence[SpreadParams], corr: CorrelationSpec, grid: TimeGrid) -> "_PathModel":
        pts = grid.points
        mean = np.column_stack([spread_mean(p, pts) for p in spreads])
        decay = np.exp(-np.array([p.kappa for p in spreads]) * grid.dt)
        factor = _noise_factor(simulate_step_cov(spreads, corr, grid.dt))
        return cls(mean=mean, decay=decay, factor=factor, dt=grid.dt, steps=grid.steps)


def _run_batch(
    model: _PathModel, n: int, rng: np.random.Generator, antithetic: bool, snapshot: Optional[int] = None
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Integral Y(T) per path, plus the state at grid index ``snapshot``"""
    dim = model.decay.size
    q = np.broadcast_to(model.mean[0], (n, dim)).copy()
    Y = np.zeros(n)
    taken = q.copy() if snapshot == 0 else None
    for k in range(model.steps):
        Y += np.maximum(q.max(axis=1), 0.0) * model.dt
        if antithetic:
            half = rng.standard_normal((n // 2, dim))
            z = np.concatenate([half, -half])
        else:
            z = rng.standard_normal((n, dim))
        drift = model.mean[k + 1] - model.mean[k] * model.decay
        q = q * model.decay + drift + z @ model.factor.T
        if snapshot == k + 1:
            taken = q.copy()
    return Y, taken


def _batches(
    spreads: Sequence[SpreadParams],
    corr: CorrelationSpec,
    grid: TimeGrid,
    mc: McSettings,
    snapshot: Optional[int] = None,
) -> List[Tuple[np.ndarray, Optional[np.ndarray]]]:
    model = _PathModel.build(spreads, corr, grid)
    sizes = mc.batch_sizes()

    def run(b: int):
        rng = np.random.default_rng([mc.seed, b])
        return _run_batch(model, sizes[b], rng, mc.antithetic, snapshot)

    if mc.workers > 1:
        with ThreadPoolExecutor(max_workers=mc.workers) as pool:
            out = list(pool.map(run, range(len(sizes))))
    else:
        out = [run(b) for b in range(len(sizes))]
    logger.debug(f"simulated {mc.n_paths} paths in {len(sizes)} batches")
    return out


def simulate_integrals(
    spreads: Sequence[SpreadParams], corr: CorrelationSpec, grid: TimeGrid, mc: McSettings
) -> np.ndarray:
    """Y(T) per path, batches in order; antithetic batches are [+z half, -z half]"""
    return np.concatenate([Y for Y, _ in _batches(spreads, corr, grid, mc)])


def mc_marginal_samples(
    spreads: Sequence[SpreadParams], corr: CorrelationSpec, grid: TimeGrid, mc: McSettings, index: int
) -> np.ndarray:
    """Simulated (q_1, ..., q_N) at grid time ``index``, one row per path"""
    if not 0 <= index <= grid.steps:
        raise InputError(f"grid index {index} outside [0, {grid.steps}]")
    return np.vstack([snap for _, snap in _batches(spreads, corr, grid, mc, snapshot=index)])


def _paired(values: np.ndarray, mc: McSettings) -> np.ndarray:
    """Antithetic pair averages, matching the batch layout of simulate_integrals"""
    pairs = []
    start = 0
    for size in mc.batch_sizes():
        half = size // 2
        block = values[start:start + size]
        pairs.append(0.5 * (block[:half] + block[half:]))
        start += size
    return np.concatenate(pairs)


def _mean_estimate(values: np.ndarray, mc: McSettings) -> McEstimate:
    sample = _paired(values, mc) if mc.antithetic else values
    se = float(sample.std(ddof=1) / math.sqrt(sample.size))
    return McEstimate(value=float(sample.mean()), std_error=se, n_paths=int(values.size))


def _variance_estimate(values: np.ndarray) -> McEstimate:
    n = values.size
    centred = values - values.mean()
    s2 = float(centred.var(ddof=1))
    m4 = float(np.mean(centred ** 4))
    se = math.sqrt(max(m4 - s2 * s2 * (n - 3) / (n - 1), 0.0) / n)
    return McEstimate(value=s2, std_error=se, n_paths=int(n))


def mc_discount_factor(
    spreads: Sequence[SpreadParams], corr: CorrelationSpec, grid: TimeGrid, mc: McSettings
) -> McEstimate:
    """E[exp(-Y(T))] under the T-forward measure"""
    Y = simulate_integrals(spreads, corr, grid, mc)
    return _mean_estimate(np.exp(-Y), mc)


def mc_integral_moments(
    spreads: Sequence[SpreadParams], corr: CorrelationSpec, grid: TimeGrid, mc: McSettings
) -> Tuple[McEstimate, McEstimate]:
    Y = simulate_integrals(spreads, corr, grid, mc)
    return _mean_estimate(Y, mc), _variance_estimate(Y)


def mc_summary(
    spreads: Sequence[SpreadParams], corr: CorrelationSpec, grid: TimeGrid, mc: McSettings
) -> Tuple[McEstimate, McEstimate, McEstimate]:
    """Discount factor, E[Y] and Var[Y] from one set of paths"""
    Y = simulate_integrals(spreads, corr, grid, mc)
    return _mean_estimate(np.exp(-Y), mc), _mean_estimate(Y, mc), _variance_estimate(Y)


# --- quadrature oracle -------------------------------------------------------


def _max_with_normal(a: np.ndarray, m: np.ndarray, s: float, order: int) -> np.ndarray:
    """E[max(a, Z)^order] for Z ~ N(m, s^2)"""
    if s == 0:
        return np.maximum(a, m) ** order
    d = (a - m) / s
    below = ndtr(d)
    above = ndtr(-d)
    phi = np.exp(-0.5 * d * d) / math.sqrt(2.0 * math.pi)
    if order == 1:
        return a * below + m * above + s * phi
    return a * a * below + m * m * above + 2.0 * m * s * phi + s * s * (d * phi + above)


def _legendre(lo: float, hi: float, nodes: int, f: Callable[[np.ndarray], np.ndarray]) -> float:
    x, w = leggauss(nodes)
    half = 0.5 * (hi - lo)
    return float(half * np.sum(w * f(0.5 * (hi + lo) + half * x)))


def quad_max_moments(
    mus: Sequence[float], sigmas: Sequence[float], corr2: float = 0.0, order: int = 1, nodes: int = 256
) -> float:
    """E[max(0, X)^order] for a normal vector of dimension 1 or 2.

    Gauss-Legendre on +-8 standard deviations of the first coordinate, split
    at the kink x = 0; the second coordinate is integrated in closed form
    conditionally on the first.
    """
    mu = np.asarray(mus, dtype=float)
    sig = np.asarray(sigmas, dtype=float)
    if mu.size not in (1, 2):
        raise UnsupportedError(f"quadrature oracle supports 1 or 2 spreads, got {mu.size}")
    if order not in (1, 2):
        raise InputError("order must be 1 or 2")
    if np.any(sig < 0) or not -1.0 <= corr2 <= 1.0:
        raise InputError("need sigmas >= 0 and a correlation in [-1, 1]")
    if nodes < 200:
        raise InputError("use at least 200 quadrature nodes")

    if mu.size == 1:
        if sig[0] == 0:
            return max(0.0, float(mu[0])) ** order
        lo, hi = max(0.0, mu[0] - 8 * sig[0]), mu[0] + 8 * sig[0]
        if hi <= lo:
            return 0.0
        density = lambda x: np.exp(-0.5 * ((x - mu[0]) / sig[0]) ** 2) / (sig[0] * math.sqrt(2 * math.pi))  # noqa: E731
        return _legendre(lo, hi, nodes, lambda x: x ** order * density(x))

    s_cond = sig[1] * math.sqrt(max(1.0 - corr2 * corr2, 0.0))
    if sig[0] == 0:
        return float(_max_with_normal(np.array(max(0.0, mu[0])), np.array(mu[1]), sig[1], order))
    slope = corr2 * sig[1] / sig[0]

    def integrand(x: np.ndarray) -> np.ndarray:
        density = np.exp(-0.5 * ((x - mu[0]) / sig[0]) ** 2) / (sig[0] * math.sqrt(2 * math.pi))
        cond_mean = mu[1] + slope * (x - mu[0])
        return density * _max_with_normal(np.maximum(x, 0.0), cond_mean, s_cond, order)

    lo, hi = mu[0] - 8 * sig[0], mu[0] + 8 * sig[0]
    if lo < 0.0 < hi:
        return _legendre(lo, 0.0, nodes, integrand) + _legendre(0.0, hi, nodes, integrand)
    return _legendre(lo, hi, nodes, integrand)
