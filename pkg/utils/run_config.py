"""
Run configuration files.

Configurations are dotenv files read with python-dotenv. Nested sections
use key prefixes (SPREAD_<i>_*, CORR_<i>_<j>, MC_*, GROUP_*); every
rejection names the file, line and key.
"""
import io
import logging
import math
import os
import re
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np
from dotenv import dotenv_values

from utils.common_factor import ConvolutionSettings
from utils.errors import ConfigError, CtdError, InputError
from utils.estimators import ESTIMATOR_NAMES, EstimatorSettings, GroupSplit
from utils.mc_oracle import McSettings
from utils.term_structure import CorrelationSpec, RateParams, SpreadParams, ThetaCurve, TimeGrid

logger = logging.getLogger(__name__)

DEFAULT_MATURITY = 20.0
DEFAULT_DT = 0.1

_SCALAR_KEYS = {
    "MATURITY", "DT", "DELTA", "EPS_TAIL", "EPS_GAMMA", "TAU_CDF", "TAU_PROB", "TAU_VAR", "QUAD_WIDTH",
    "INTEGRATION_RULE", "GH_NODES", "VARIANCE_MODE", "INNER_VARIABLE", "ESTIMATORS", "BASE_DISCOUNT",
    "WORKERS", "MC_PATHS", "MC_SEED", "MC_ANTITHETIC", "MC_BATCH_SIZE", "GROUP_SPLIT", "GROUP_C_CORR",
}
_SPREAD_KEY = re.compile(r"^SPREAD_(\d+)_(NAME|KAPPA|XI|Q0|THETA)$")
_CORR_KEY = re.compile(r"^CORR_(\d+)_(\d+)$")
_RATE_KEY = re.compile(r"^RATE_(\d+)_(NAME|KAPPA|XI|R0)$")
_RATE_CORR_KEY = re.compile(r"^RATE_CORR_(\d+)_(\d+)$")
_ASSIGNMENT = re.compile(r"^\s*(?:export\s+)?([A-Za-z_][A-Za-z0-9_]*)\s*=")

# InputError fields raised by the model types, mapped to config keys
_FIELD_KEYS = {
    "dt": "DT", "delta": "DELTA", "eps_tail": "EPS_TAIL", "eps_gamma": "EPS_GAMMA", "quad_width": "QUAD_WIDTH",
    "integration_rule": "INTEGRATION_RULE", "gh_nodes": "GH_NODES", "variance_mode": "VARIANCE_MODE",
    "inner_variable": "INNER_VARIABLE", "estimators": "ESTIMATORS", "base_discount": "BASE_DISCOUNT",
    "workers": "WORKERS", "mc_paths": "MC_PATHS", "mc_batch_size": "MC_BATCH_SIZE",
    "mc_antithetic": "MC_ANTITHETIC", "group_split": "GROUP_SPLIT",
}


def default_workers() -> int:
    return int(os.getenv("CTD_WORKERS", "1"))


class _Source:
    """Parsed key/value pairs with the line each key was read from"""

    def __init__(self, text: str, path: str, overrides: Optional[Mapping[str, object]] = None):
        self.path = path
        self.values: Dict[str, Optional[str]] = dict(dotenv_values(stream=io.StringIO(text)))
        self.lines: Dict[str, int] = {}
        for number, line in enumerate(text.splitlines(), start=1):
            match = _ASSIGNMENT.match(line)
            if match:
                self.lines[match.group(1)] = number
        self.overridden = set()
        for key, value in (overrides or {}).items():
            if value is None:
                continue
            key = key.upper()
            self.values[key] = str(value)
            self.overridden.add(key)

    def error(self, key: Optional[str], message: str) -> ConfigError:
        if key in self.overridden:
            return ConfigError(message, path="<override>", key=key)
        return ConfigError(message, path=self.path, line=self.lines.get(key), key=key)

    def has(self, key: str) -> bool:
        value = self.values.get(key)
        return value is not None and value.strip() != ""

    def text(self, key: str, default: Optional[str] = None) -> Optional[str]:
        return self.values[key].strip() if self.has(key) else default

    def number(self, key: str, default: Optional[float] = None) -> Optional[float]:
        raw = self.text(key)
        if raw is None:
            return default
        try:
            value = float(raw)
        except ValueError:
            raise self.error(key, f"expected a number, got {raw!r}") from None
        if not math.isfinite(value):
            raise self.error(key, "value must be finite")
        return value

    def integer(self, key: str, default: Optional[int] = None) -> Optional[int]:
        raw = self.text(key)
        if raw is None:
            return default
        try:
            return int(raw)
        except ValueError:
            raise self.error(key, f"expected an integer, got {raw!r}") from None

    def flag(self, key: str, default: bool = False) -> bool:
        raw = self.text(key)
        if raw is None:
            return default
        lowered = raw.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise self.error(key, f"expected a boolean, got {raw!r}")

    def first_line_of(self, prefix: str) -> Optional[str]:
        keys = [k for k in self.values if k.startswith(prefix)]
        return min(keys, key=lambda k: self.lines.get(k, 0)) if keys else None


def parse_theta(text: str) -> ThetaCurve:
    """A number (constant level) or ``start:level;start:level;...``"""
    if ":" not in text:
        return ThetaCurve.constant(float(text))
    starts, levels = [], []
    for segment in text.split(";"):
        if not segment.strip():
            continue
        start, level = segment.split(":")
        starts.append(float(start))
        levels.append(float(level))
    return ThetaCurve(tuple(starts), tuple(levels))


def _indices(keys, pattern: re.Pattern) -> List[int]:
    return sorted({int(m.group(1)) for m in map(pattern.match, keys) if m})


def _pairwise(src: _Source, pattern: re.Pattern, labels: List[int], prefix: str) -> np.ndarray:
    position = {label: k for k, label in enumerate(labels)}
    mat = np.eye(len(labels))
    for key in src.values:
        match = pattern.match(key)
        if not match:
            continue
        i, j = int(match.group(1)), int(match.group(2))
        if i not in position or j not in position or i == j:
            raise src.error(key, f"{prefix} indices must name two different configured entries")
        value = src.number(key)
        if value is None or not -1.0 <= value <= 1.0:
            raise src.error(key, "correlation must lie in [-1, 1]")
        mat[position[i], position[j]] = mat[position[j], position[i]] = value
    return mat


@dataclass(frozen=True)
class RunConfig:
    grid: TimeGrid
    spreads: Tuple[SpreadParams, ...]
    corr: CorrelationSpec
    estimator: EstimatorSettings = field(default_factory=EstimatorSettings)
    mc: McSettings = field(default_factory=McSettings)
    source: str = field(default="<config>", compare=False)

    @property
    def conv(self) -> ConvolutionSettings:
        return self.estimator.conv

    def with_spreads(self, spreads, corr: Optional[CorrelationSpec] = None) -> "RunConfig":
        return replace(self, spreads=tuple(spreads), corr=self.corr if corr is None else corr)

    def with_maturity(self, maturity: float) -> "RunConfig":
        return replace(self, grid=self.grid.with_maturity(maturity))

    def with_conv(self, **changes) -> "RunConfig":
        return replace(self, estimator=replace(self.estimator, conv=replace(self.conv, **changes)))

    def with_mc(self, **changes) -> "RunConfig":
        return replace(self, mc=replace(self.mc, **changes))

    def to_text(self) -> str:
        """Canonical dotenv text; parse_config(to_text()) gives an equal config"""
        return render_config(self)


def _build(src: _Source) -> RunConfig:
    unknown = [k for k in src.values if k not in _SCALAR_KEYS and not _SPREAD_KEY.match(k) and not _CORR_KEY.match(k)]
    if unknown:
        raise src.error(unknown[0], "unknown configuration key")

    labels = _indices(src.values, _SPREAD_KEY)
    if not labels:
        raise src.error(None, "no SPREAD_<i>_* entries found")
    if labels != list(range(1, len(labels) + 1)):
        raise src.error(None, f"spread indices must run 1..N without gaps, got {labels}")

    spreads = []
    for i in labels:
        prefix = f"SPREAD_{i}_"
        for part in ("KAPPA", "XI", "Q0"):
            if not src.has(prefix + part):
                raise src.error(prefix + part, "required spread parameter missing")
        q0 = src.number(prefix + "Q0")
        theta_key = prefix + "THETA"
        try:
            theta = parse_theta(src.text(theta_key)) if src.has(theta_key) else ThetaCurve.constant(q0)
        except (ValueError, InputError) as exc:
            raise src.error(theta_key, f"invalid theta curve: {exc}") from None
        try:
            spreads.append(SpreadParams(
                kappa=src.number(prefix + "KAPPA"), xi=src.number(prefix + "XI"), theta=theta, q0=q0,
                name=src.text(prefix + "NAME", f"spread_{i}"),
            ))
        except InputError as exc:
            raise src.error(prefix + (exc.field or "KAPPA").upper(), str(exc)) from None

    try:
        corr = CorrelationSpec(_pairwise(src, _CORR_KEY, labels, "CORR"))
    except InputError as exc:
        raise src.error(src.first_line_of("CORR_"), str(exc)) from None

    try:
        grid = TimeGrid(src.number("MATURITY", DEFAULT_MATURITY), src.number("DT", DEFAULT_DT))
        conv = ConvolutionSettings(
            delta=src.number("DELTA", 5e-5),
            eps_tail=src.number("EPS_TAIL", 1e-10),
            eps_gamma=src.number("EPS_GAMMA", 1e-10),
            tau_cdf=src.number("TAU_CDF", 1e-9),
            tau_prob=src.number("TAU_PROB", 1e-8),
            tau_var=src.number("TAU_VAR", 1e-12),
            width_sd=src.number("QUAD_WIDTH", 8.0),
            rule=src.text("INTEGRATION_RULE", "trapezoid"),
            gh_nodes=src.integer("GH_NODES", 32),
        )
        groups = None
        if src.has("GROUP_SPLIT"):
            groups = GroupSplit(size=src.integer("GROUP_SPLIT"), c_corr=src.number("GROUP_C_CORR"))
            if groups.c_corr is not None and not -1.0 < groups.c_corr < 1.0:
                raise src.error("GROUP_C_CORR", "common factor correlation must lie in (-1, 1)")
        elif src.has("GROUP_C_CORR"):
            raise src.error("GROUP_C_CORR", "GROUP_C_CORR needs GROUP_SPLIT")
        workers = src.integer("WORKERS", default_workers())
        estimators = tuple(s.strip() for s in src.text("ESTIMATORS", ",".join(ESTIMATOR_NAMES)).split(",") if s.strip())
        estimator = EstimatorSettings(
            variance_mode=src.text("VARIANCE_MODE", "central"),
            inner_variable=src.text("INNER_VARIABLE", "s"),
            estimators=estimators,
            base_discount=src.number("BASE_DISCOUNT"),
            workers=workers,
            groups=groups,
            conv=conv,
        )
        mc = McSettings(
            n_paths=src.integer("MC_PATHS", 100_000),
            seed=src.integer("MC_SEED", 20_200_601),
            antithetic=src.flag("MC_ANTITHETIC", False),
            batch_size=src.integer("MC_BATCH_SIZE", 20_000),
            workers=workers,
        )
    except InputError as exc:
        raise src.error(_FIELD_KEYS.get(exc.field or "", None), str(exc)) from None

    if groups is not None and not 1 <= groups.size < len(spreads):
        raise src.error("GROUP_SPLIT", "group split must leave at least one spread in each group")
    for p in spreads:
        try:
            p.theta.check_domain(grid.maturity)
        except CtdError as exc:
            raise src.error("MATURITY", str(exc)) from None
    return RunConfig(grid=grid, spreads=tuple(spreads), corr=corr, estimator=estimator, mc=mc, source=src.path)


def parse_config(text: str, path: str = "<inline>", overrides: Optional[Mapping[str, object]] = None) -> RunConfig:
    return _build(_Source(text, path, overrides))


def load_config(path: str, overrides: Optional[Mapping[str, object]] = None) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as handle:
            text = handle.read()
    except OSError as exc:
        raise ConfigError(f"cannot read configuration: {exc.strerror}", path=path) from None
    logger.info(f"📄 Loading run configuration {path}")
    return parse_config(text, path, overrides)


def render_config(cfg: RunConfig) -> str:
    conv, est, mc = cfg.conv, cfg.estimator, cfg.mc
    lines = [f"MATURITY={cfg.grid.maturity!r}", f"DT={cfg.grid.dt!r}"]
    for i, p in enumerate(cfg.spreads, start=1):
        lines += [
            f"SPREAD_{i}_NAME={p.name}",
            f"SPREAD_{i}_KAPPA={p.kappa!r}",
            f"SPREAD_{i}_XI={p.xi!r}",
            f"SPREAD_{i}_Q0={p.q0!r}",
            f"SPREAD_{i}_THETA={p.theta.to_text()}",
        ]
    n = len(cfg.spreads)
    for i in range(n):
        for j in range(i + 1, n):
            lines.append(f"CORR_{i + 1}_{j + 1}={float(cfg.corr.rho[i, j])!r}")
    lines += [
        f"DELTA={conv.delta!r}", f"EPS_TAIL={conv.eps_tail!r}", f"EPS_GAMMA={conv.eps_gamma!r}",
        f"TAU_CDF={conv.tau_cdf!r}", f"TAU_PROB={conv.tau_prob!r}", f"TAU_VAR={conv.tau_var!r}",
        f"QUAD_WIDTH={conv.width_sd!r}", f"INTEGRATION_RULE={conv.rule}", f"GH_NODES={conv.gh_nodes}",
        f"VARIANCE_MODE={est.variance_mode}", f"INNER_VARIABLE={est.inner_variable}",
        f"ESTIMATORS={','.join(est.estimators)}",
    ]
    if est.base_discount is not None:
        lines.append(f"BASE_DISCOUNT={est.base_discount!r}")
    if est.groups is not None:
        lines.append(f"GROUP_SPLIT={est.groups.size}")
        if est.groups.c_corr is not None:
            lines.append(f"GROUP_C_CORR={est.groups.c_corr!r}")
    lines += [
        f"MC_PATHS={mc.n_paths}", f"MC_SEED={mc.seed}",
        f"MC_ANTITHETIC={'true' if mc.antithetic else 'false'}", f"MC_BATCH_SIZE={mc.batch_size}",
    ]
    return "\n".join(lines) + "\n"


# --- rate configurations -----------------------------------------------------


@dataclass(frozen=True)
class RateConfig:
    """Collateral rates, base first, plus optional user q0 overrides per spread"""

    base: RateParams
    others: Tuple[RateParams, ...]
    rate_corr: CorrelationSpec
    q0_overrides: Dict[int, float] = field(default_factory=dict)
    maturity: float = DEFAULT_MATURITY
    dt: float = DEFAULT_DT
    source: str = field(default="<config>", compare=False)


def _build_rates(src: _Source) -> RateConfig:
    allowed = {"RATE_BASE", "MATURITY", "DT"}
    for key in src.values:
        if key in allowed or _RATE_KEY.match(key) or _RATE_CORR_KEY.match(key):
            continue
        match = _SPREAD_KEY.match(key)
        if match and match.group(2) == "Q0":
            continue
        raise src.error(key, "unknown rate configuration key")

    labels = _indices(src.values, _RATE_KEY)
    if len(labels) < 2:
        raise src.error(None, "need at least two RATE_<i>_* entries")
    base_label = src.integer("RATE_BASE", labels[0])
    if base_label not in labels:
        raise src.error("RATE_BASE", f"base rate {base_label} is not configured")

    rates = {}
    for i in labels:
        prefix = f"RATE_{i}_"
        for part in ("KAPPA", "XI", "R0"):
            if not src.has(prefix + part):
                raise src.error(prefix + part, "required rate parameter missing")
        try:
            rates[i] = RateParams(
                kappa=src.number(prefix + "KAPPA"), xi=src.number(prefix + "XI"), r0=src.number(prefix + "R0"),
                name=src.text(prefix + "NAME", f"rate_{i}"),
            )
        except InputError as exc:
            raise src.error(prefix + (exc.field or "KAPPA").upper(), str(exc)) from None

    order = [base_label] + [i for i in labels if i != base_label]
    try:
        rate_corr = CorrelationSpec(_pairwise(src, _RATE_CORR_KEY, order, "RATE_CORR"))
    except InputError as exc:
        raise src.error(src.first_line_of("RATE_CORR_"), str(exc)) from None

    overrides = {}
    for key in src.values:
        match = _SPREAD_KEY.match(key)
        if match:
            index = int(match.group(1))
            if not 1 <= index < len(order):
                raise src.error(key, f"spread index must lie in 1..{len(order) - 1}")
            overrides[index] = src.number(key)
    return RateConfig(
        base=rates[base_label], others=tuple(rates[i] for i in order[1:]), rate_corr=rate_corr,
        q0_overrides=overrides, maturity=src.number("MATURITY", DEFAULT_MATURITY), dt=src.number("DT", DEFAULT_DT),
        source=src.path,
    )


def parse_rate_config(text: str, path: str = "<inline>") -> RateConfig:
    return _build_rates(_Source(text, path))


def load_rate_config(path: str) -> RateConfig:
    try:
        with open(path, encoding="utf-8") as handle:
            text = handle.read()
    except OSError as exc:
        raise ConfigError(f"cannot read configuration: {exc.strerror}", path=path) from None
    return parse_rate_config(text, path)
