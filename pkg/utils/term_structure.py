"""
Hull-White collateral spread model.

Each spread follows dq = kappa (theta(t) - q) dt + xi dW with correlated
Brownian drivers. Marginals are normal; this module gives their moments in
closed form, the time-dependent pairwise correlations and the conversion of
collateral-rate parameters into spread parameters.
"""
import logging
import math
import warnings
from dataclasses import dataclass
from functools import cached_property
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from utils.errors import DegenerateSpreadWarning, DegenerateVarianceError, DomainError, InputError

logger = logging.getLogger(__name__)

TimeLike = Union[float, np.ndarray]

# Slack on time-domain checks, grids are built from floating sums
_TIME_TOL = 1e-9


@dataclass(frozen=True)
class ThetaCurve:
    """Piecewise-constant long-term mean.

    Segment k holds ``levels[k]`` on ``[starts[k], starts[k+1])``; the last
    segment runs to ``horizon``.
    """

    starts: Tuple[float, ...]
    levels: Tuple[float, ...]
    horizon: float = math.inf

    def __post_init__(self):
        starts = tuple(float(s) for s in self.starts)
        levels = tuple(float(v) for v in self.levels)
        object.__setattr__(self, "starts", starts)
        object.__setattr__(self, "levels", levels)
        if not starts or len(starts) != len(levels):
            raise InputError("theta curve needs one level per segment start", field="theta")
        if starts[0] != 0.0:
            raise InputError("theta curve must start at t=0", field="theta")
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise InputError("theta segment starts must be strictly increasing", field="theta")
        if not all(math.isfinite(v) for v in levels):
            raise InputError("theta levels must be finite", field="theta")
        if not starts[-1] < self.horizon:
            raise InputError("theta horizon must lie beyond the last segment start", field="theta")

    @classmethod
    def constant(cls, level: float, horizon: float = math.inf) -> "ThetaCurve":
        return cls(starts=(0.0,), levels=(level,), horizon=horizon)

    @property
    def is_constant(self) -> bool:
        return len(self.levels) == 1

    def check_domain(self, t: TimeLike) -> None:
        t_arr = np.asarray(t, dtype=float)
        if np.any(t_arr < -_TIME_TOL) or np.any(t_arr > self.horizon + _TIME_TOL):
            raise DomainError(f"time outside theta domain [0, {self.horizon}]")

    def value_at(self, t: float) -> float:
        self.check_domain(t)
        idx = int(np.searchsorted(self.starts, t, side="right")) - 1
        return self.levels[max(idx, 0)]

    def reverting_integral(self, kappa: float, t: TimeLike) -> TimeLike:
        """kappa * int_0^t theta(s) exp(-kappa (t - s)) ds, closed form per segment"""
        t_arr = np.asarray(t, dtype=float)
        total = np.zeros_like(t_arr)
        ends = self.starts[1:] + (math.inf,)
        for a, b, level in zip(self.starts, ends, self.levels):
            active = t_arr > a
            upper = np.minimum(b, t_arr)
            # exp(-k(t-upper)) - exp(-k(t-a)), written to keep precision for small kappa*t
            seg = np.exp(-kappa * (t_arr - upper)) * -np.expm1(-kappa * np.maximum(upper - a, 0.0))
            total = total + np.where(active, level * seg, 0.0)
        return total if np.ndim(t) else float(total)

    def to_text(self) -> str:
        if self.is_constant:
            return repr(self.levels[0])
        return ";".join(f"{s!r}:{v!r}" for s, v in zip(self.starts, self.levels))


@dataclass(frozen=True)
class SpreadParams:
    kappa: float
    xi: float
    theta: ThetaCurve
    q0: float
    name: str = ""

    def __post_init__(self):
        if not (math.isfinite(self.kappa) and self.kappa > 0):
            raise InputError(f"kappa must be positive, got {self.kappa}", field="kappa")
        if not (math.isfinite(self.xi) and self.xi >= 0):
            raise InputError(f"xi must be non-negative, got {self.xi}", field="xi")
        if not math.isfinite(self.q0):
            raise InputError("q0 must be finite", field="q0")

    @classmethod
    def flat(cls, kappa: float, xi: float, q0: float, theta: Optional[float] = None, name: str = "") -> "SpreadParams":
        """Spread whose long-term mean is constant (defaults to the initial value)"""
        level = q0 if theta is None else theta
        return cls(kappa=kappa, xi=xi, theta=ThetaCurve.constant(level), q0=q0, name=name)

    def scaled(self, kappa_factor: float = 1.0, xi_factor: float = 1.0) -> "SpreadParams":
        return SpreadParams(
            kappa=self.kappa * kappa_factor,
            xi=self.xi * xi_factor,
            theta=self.theta,
            q0=self.q0,
            name=self.name,
        )


@dataclass(frozen=True, eq=False)
class CorrelationSpec:
    """Instantaneous correlation matrix of the driving Brownian motions"""

    rho: np.ndarray

    def __post_init__(self):
        arr = np.array(self.rho, dtype=float, copy=True)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1] or arr.shape[0] == 0:
            raise InputError("correlation matrix must be square and non-empty", field="corr")
        if not np.allclose(arr, arr.T, atol=1e-12, rtol=0.0):
            raise InputError("correlation matrix must be symmetric", field="corr")
        if not np.allclose(np.diag(arr), 1.0, atol=1e-12, rtol=0.0):
            raise InputError("correlation matrix must have a unit diagonal", field="corr")
        if np.any(np.abs(arr) > 1.0 + 1e-12):
            raise InputError("correlations must lie in [-1, 1]", field="corr")
        min_eig = float(np.linalg.eigvalsh(arr).min())
        if min_eig < -1e-10:
            raise InputError(f"correlation matrix is not positive semi-definite (min eigenvalue {min_eig:.3e})", field="corr")
        arr.setflags(write=False)
        object.__setattr__(self, "rho", arr)

    @classmethod
    def identity(cls, n: int) -> "CorrelationSpec":
        return cls(np.eye(n))

    @classmethod
    def uniform(cls, n: int, rho: float) -> "CorrelationSpec":
        mat = np.full((n, n), float(rho))
        np.fill_diagonal(mat, 1.0)
        return cls(mat)

    @property
    def size(self) -> int:
        return self.rho.shape[0]

    def off_diagonal(self) -> np.ndarray:
        return self.rho[~np.eye(self.size, dtype=bool)]

    def is_base_admissible(self) -> bool:
        """Off-diagonal entries in [0, 1), the range of the single common factor model"""
        off = self.off_diagonal()
        return bool(np.all(off >= 0.0) and np.all(off < 1.0))

    def submatrix(self, indices: Sequence[int]) -> "CorrelationSpec":
        idx = np.asarray(indices, dtype=int)
        return CorrelationSpec(self.rho[np.ix_(idx, idx)])

    def __eq__(self, other) -> bool:
        return isinstance(other, CorrelationSpec) and np.array_equal(self.rho, other.rho)

    __hash__ = None


@dataclass(frozen=True)
class TimeGrid:
    maturity: float
    dt: float

    def __post_init__(self):
        if not (self.maturity > 0 and self.dt > 0):
            raise InputError("maturity and dt must be positive", field="dt")
        steps = round(self.maturity / self.dt)
        if steps < 1 or abs(steps * self.dt - self.maturity) > _TIME_TOL * max(1.0, self.maturity):
            raise InputError(f"dt={self.dt} does not divide maturity T={self.maturity}", field="dt")

    @property
    def steps(self) -> int:
        return round(self.maturity / self.dt)

    @cached_property
    def points(self) -> np.ndarray:
        pts = self.dt * np.arange(self.steps + 1, dtype=float)
        pts[-1] = self.maturity
        pts.setflags(write=False)
        return pts

    def with_maturity(self, maturity: float) -> "TimeGrid":
        return TimeGrid(maturity=maturity, dt=self.dt)


def spread_mean(p: SpreadParams, t: TimeLike) -> TimeLike:
    """E[q(t)] = q0 e^{-kappa t} + kappa int_0^t theta(s) e^{-kappa (t-s)} ds"""
    p.theta.check_domain(t)
    t_arr = np.maximum(np.asarray(t, dtype=float), 0.0)
    mean = p.q0 * np.exp(-p.kappa * t_arr) + p.theta.reverting_integral(p.kappa, t_arr)
    return mean if np.ndim(t) else float(mean)


def spread_variance(p: SpreadParams, t: TimeLike) -> TimeLike:
    """Var[q(t)] = xi^2 / (2 kappa) (1 - e^{-2 kappa t})"""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < -_TIME_TOL):
        raise DomainError("variance requested at negative time")
    var = p.xi ** 2 * -np.expm1(-2.0 * p.kappa * np.maximum(t_arr, 0.0)) / (2.0 * p.kappa)
    return var if np.ndim(t) else float(var)


def pair_correlation(pi: SpreadParams, pj: SpreadParams, rho_ij: float, t: float) -> float:
    """Linear correlation of two Hull-White spreads at time t > 0"""
    if t <= 0:
        raise DomainError("spread correlation is undefined at t <= 0")
    if pi.xi == 0 or pj.xi == 0:
        raise DegenerateVarianceError("spread correlation needs non-zero volatilities")
    ksum = pi.kappa + pj.kappa
    num = 2.0 * rho_ij * math.sqrt(pi.kappa * pj.kappa) / ksum * -math.expm1(-ksum * t)
    den = math.sqrt(math.expm1(-2.0 * pi.kappa * t) * math.expm1(-2.0 * pj.kappa * t))
    return num / den


def correlation_matrix_at(spreads: Sequence[SpreadParams], corr: CorrelationSpec, t: float) -> np.ndarray:
    """Target correlation matrix R(t) of the spreads; zero-vol rows decouple"""
    n = len(spreads)
    mat = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            if spreads[i].xi == 0 or spreads[j].xi == 0:
                continue
            mat[i, j] = mat[j, i] = pair_correlation(spreads[i], spreads[j], corr.rho[i, j], t)
    return mat


@dataclass(frozen=True)
class RateParams:
    """Hull-White parameters of an FX-adjusted collateral rate"""

    kappa: float
    xi: float
    r0: float
    name: str = ""

    def __post_init__(self):
        if not self.kappa > 0:
            raise InputError("rate kappa must be positive", field="kappa")
        if not self.xi >= 0:
            raise InputError("rate xi must be non-negative", field="xi")


def rates_to_spreads(
    base: RateParams, others: List[RateParams], rate_corr: CorrelationSpec
) -> Tuple[List[SpreadParams], CorrelationSpec]:
    """Approximate rate differences r_i - r_0 by Hull-White spreads.

    ``rate_corr`` is indexed base first, then ``others`` in order. The
    spread-spread correlation is the correlation of the exact increment
    covariance of the differences, normalised by the averaged spread vols.
    """
    if not others:
        raise InputError("need at least one non-base rate", field="rates")
    if rate_corr.size != len(others) + 1:
        raise InputError("rate correlation must cover the base and every other rate", field="corr")
    rho = rate_corr.rho
    spreads: List[SpreadParams] = []
    for i, rate in enumerate(others, start=1):
        kappa = 0.5 * (rate.kappa + base.kappa)
        xi = math.sqrt(max(2.0 - 2.0 * rho[0, i], 0.0)) * 0.5 * (rate.xi + base.xi)
        q0 = rate.r0 - base.r0
        name = rate.name or f"spread_{i}"
        if xi == 0.0:
            msg = f"spread {name} has zero volatility (rate perfectly correlated with the base)"
            logger.warning(msg)
            warnings.warn(msg, DegenerateSpreadWarning, stacklevel=2)
        spreads.append(SpreadParams.flat(kappa=kappa, xi=xi, q0=q0, name=name))

    n = len(others)
    xi0 = base.xi
    spread_rho = np.eye(n)
    for a in range(n):
        for b in range(a + 1, n):
            i, j = a + 1, b + 1
            if spreads[a].xi == 0 or spreads[b].xi == 0:
                continue
            cov = (
                rho[i, j] * others[a].xi * others[b].xi
                - rho[0, i] * xi0 * others[a].xi
                - rho[0, j] * xi0 * others[b].xi
                + xi0 ** 2
            )
            value = float(np.clip(cov / (spreads[a].xi * spreads[b].xi), -1.0, 1.0))
            spread_rho[a, b] = spread_rho[b, a] = value
    return spreads, CorrelationSpec(nearest_correlation(spread_rho))


def nearest_correlation(mat: np.ndarray) -> np.ndarray:
    """Clip negative eigenvalues and restore the unit diagonal"""
    vals, vecs = np.linalg.eigh(mat)
    if vals.min() >= -1e-12:
        return mat
    fixed = vecs @ np.diag(np.maximum(vals, 0.0)) @ vecs.T
    scale = np.sqrt(np.diag(fixed))
    fixed = fixed / np.outer(scale, scale)
    np.fill_diagonal(fixed, 1.0)
    return 0.5 * (fixed + fixed.T)
