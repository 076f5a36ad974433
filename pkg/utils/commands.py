"""
Batch commands behind the CLI and the HTTP surface.

Each cmd_* takes a loaded configuration, runs the estimator and Monte Carlo
layers and returns a CommandResult for utils.reporting.
"""
import logging
import math
import time
import warnings
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from presets.reference_params import BENCH_KAPPA_RANGE, BENCH_Q0_RANGE, BENCH_RHO_RANGE, BENCH_XI_RANGE
from utils.common_factor import correlation_bound
from utils.errors import InputError
from utils.estimators import (
    EstimateReport,
    EstimatorSettings,
    cf1,
    diffusion_variance,
    estimate,
    moment_series,
    mr_variance,
    weighted_kappa,
)
from utils.mc_oracle import mc_discount_factor, mc_integral_moments, mc_summary
from utils.reporting import CommandResult, series_frame
from utils.run_config import RateConfig, RunConfig, render_config
from utils.term_structure import CorrelationSpec, SpreadParams, TimeGrid, nearest_correlation, rates_to_spreads

logger = logging.getLogger(__name__)

SWEEP_AXES = ("corr", "kappa", "vol")


def _estimate(cfg: RunConfig) -> EstimateReport:
    return estimate(list(cfg.spreads), cfg.corr, cfg.grid, cfg.estimator)


def cmd_price(cfg: RunConfig, diagnostics: bool = False) -> CommandResult:
    report = _estimate(cfg)
    table = pd.DataFrame([report.as_row()])
    details = series_frame(report.series) if diagnostics and report.series is not None else None
    logger.info(f"✅ Priced {len(cfg.spreads)} spreads to T={cfg.grid.maturity:g}")
    return CommandResult(
        command="price",
        table=table,
        config_text=cfg.to_text(),
        warnings=list(report.warnings),
        heading_info={
            "maturity": cfg.grid.maturity, "dt": cfg.grid.dt,
            "n_spreads": len(cfg.spreads), "variance_mode": report.variance_mode,
        },
        details=details,
    )


def admissible_correlation(cfg: RunConfig) -> float:
    """Largest uniform instantaneous correlation keeping every pairwise match below gamma = 1"""
    spreads = cfg.spreads
    return min(
        correlation_bound(spreads[i], spreads[j], cfg.grid, cfg.conv.eps_gamma)
        for i in range(len(spreads)) for j in range(i + 1, len(spreads))
    )


def _sweep_points(cfg: RunConfig, axis: str, lo: float, hi: float, steps: int, notes: List[str]):
    """(axis value, scale, config) per sweep point"""
    spreads = list(cfg.spreads)
    if axis == "corr":
        if len(spreads) < 2:
            raise InputError("correlation sweep needs at least two spreads", field="axis")
        values = np.linspace(lo, hi, steps)
        bound = admissible_correlation(cfg)
        kept = values[values <= bound]
        if kept.size < values.size:
            msg = f"correlation axis truncated at the admissible bound {bound:.6f}"
            logger.warning(msg)
            notes.append(msg)
        if np.any(kept < 0):
            raise InputError("correlation sweep must stay non-negative", field="range")
        return [(float(r), float(r), cfg.with_spreads(spreads, CorrelationSpec.uniform(len(spreads), r))) for r in kept]

    if not lo > 0:
        raise InputError("scale factors must be positive", field="range")
    if axis == "kappa":
        scales = np.geomspace(lo, hi, steps)
        points = []
        for s in scales:
            scaled = [p.scaled(kappa_factor=s) for p in spreads]
            points.append((float(np.mean([p.kappa for p in scaled])), float(s), cfg.with_spreads(scaled)))
        return points
    scales = np.linspace(lo, hi, steps)
    points = []
    for s in scales:
        scaled = [p.scaled(xi_factor=s) for p in spreads]
        points.append((float(np.mean([p.xi for p in scaled])), float(s), cfg.with_spreads(scaled)))
    return points


def cmd_sweep(cfg: RunConfig, axis: str, lo: float, hi: float, steps: int) -> CommandResult:
    """Estimators and the MC reference along one parameter axis.

    kappa and vol ranges are scale factors applied to every spread jointly;
    the table reports the resulting average on the axis.
    """
    if axis not in SWEEP_AXES:
        raise InputError(f"axis must be one of {SWEEP_AXES}", field="axis")
    if steps < 1 or hi < lo:
        raise InputError("sweep needs steps >= 1 and an ordered range", field="range")
    notes: List[str] = []
    rows = []
    for value, scale, point in _sweep_points(cfg, axis, lo, hi, steps, notes):
        report = _estimate(point)
        mc = mc_discount_factor(list(point.spreads), point.corr, point.grid, point.mc)
        row = {"axis": axis, "axis_value": value, "scale": scale}
        for name in ("cf1", "cf2_diffusion", "cf2_mr"):
            row[name] = getattr(report, name)
        row["mc"] = mc.value
        row["mc_std_error"] = mc.std_error
        for name in ("cf1", "cf2_diffusion", "cf2_mr"):
            est = row[name]
            row[f"abs_err_{name}"] = None if est is None else abs(est - mc.value)
        rows.append(row)
        notes.extend(w for w in report.warnings if w not in notes)
        logger.info(f"📈 {axis}={value:.6g}: CF1={report.cf1:.6f} MC={mc.value:.6f}")
    return CommandResult(
        command="sweep",
        table=pd.DataFrame(rows),
        config_text=cfg.to_text(),
        seed=cfg.mc.seed,
        warnings=notes,
        heading_info={"axis": axis, "n_rows": len(rows), "maturity": cfg.grid.maturity, "n_paths": cfg.mc.n_paths},
    )


def cmd_table_moments(
    cfg: RunConfig, deltas: Sequence[float], maturities: Sequence[float], rules: Optional[Sequence[str]] = None
) -> CommandResult:
    """Expectation-integral and integral-variance errors per (rule, delta, T).

    ``rules`` defaults to the configured integration rule; the MC reference is
    shared by every row of a maturity.
    """
    rules = tuple(rules) if rules else (cfg.conv.rule,)
    rows = []
    notes: List[str] = []
    for maturity in maturities:
        point = cfg.with_maturity(maturity)
        grid = point.grid
        mean_mc, var_mc = mc_integral_moments(list(point.spreads), point.corr, grid, point.mc)
        for rule in rules:
            for delta in deltas:
                conv_cfg = point.with_conv(delta=delta, rule=rule)
                series = moment_series(
                    list(conv_cfg.spreads), conv_cfg.corr, grid, conv_cfg.conv, conv_cfg.estimator.groups,
                    with_probs=False, workers=conv_cfg.estimator.workers,
                )
                integral = float(series.mean[:-1].sum()) * grid.dt
                psi_central = diffusion_variance(series, grid, "central", notes)
                psi_raw = diffusion_variance(series, grid, "raw", notes)
                notes.extend(w for w in series.warnings if w not in notes)
                rows.append({
                    "rule": rule,
                    "delta": delta,
                    "maturity": maturity,
                    "grid_points": int(series.grid_points[-1]),
                    "expectation_integral": integral,
                    "mc_mean": mean_mc.value,
                    "mc_mean_std_error": mean_mc.std_error,
                    "abs_err_expectation": abs(integral - mean_mc.value),
                    "psi_central": psi_central,
                    "psi_raw": psi_raw,
                    "mc_variance": var_mc.value,
                    "mc_variance_std_error": var_mc.std_error,
                    "abs_err_psi_central": abs(psi_central - var_mc.value),
                    "abs_err_psi_raw": abs(psi_raw - var_mc.value),
                })
                logger.info(f"🧮 {rule} delta={delta:g} T={maturity:g}: {int(series.grid_points[-1])} grid points")
    return CommandResult(
        command="table-moments",
        table=pd.DataFrame(rows),
        config_text=cfg.to_text(),
        seed=cfg.mc.seed,
        warnings=notes,
        heading_info={"n_paths": cfg.mc.n_paths},
    )


def convert_rates(rates: RateConfig) -> Tuple[RunConfig, pd.DataFrame, List[str]]:
    """Spread configuration from collateral rates, with the q0 comparison table"""
    notes: List[str] = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        spreads, corr = rates_to_spreads(rates.base, list(rates.others), rates.rate_corr)
    notes.extend(str(w.message) for w in caught)

    used = []
    rows = []
    for i, spread in enumerate(spreads, start=1):
        override = rates.q0_overrides.get(i)
        q0 = spread.q0 if override is None else override
        if override is not None and not math.isclose(override, spread.q0, rel_tol=1e-12, abs_tol=1e-15):
            msg = f"{spread.name}: q0 from rate difference {spread.q0!r} differs from configured {override!r}"
            logger.warning(msg)
            notes.append(msg)
        used.append(SpreadParams.flat(kappa=spread.kappa, xi=spread.xi, q0=q0, name=spread.name))
        rows.append({
            "spread": spread.name, "kappa": spread.kappa, "xi": spread.xi,
            "q0_from_rates": spread.q0, "q0_configured": override, "q0_used": q0,
        })
    for a in range(len(spreads)):
        for b in range(a + 1, len(spreads)):
            rows.append({"spread": f"corr_{a + 1}_{b + 1}", "kappa": None, "xi": None,
                         "q0_from_rates": None, "q0_configured": None, "q0_used": float(corr.rho[a, b])})

    cfg = RunConfig(grid=TimeGrid(rates.maturity, rates.dt), spreads=tuple(used), corr=corr,
                    estimator=EstimatorSettings(), source=rates.source)
    return cfg, pd.DataFrame(rows), notes


def cmd_convert(rates: RateConfig) -> CommandResult:
    cfg, table, notes = convert_rates(rates)
    header = [f"# Spreads over {rates.base.name} converted from collateral rates"]
    header += [f"# {row.spread}: q0 from rates {row.q0_from_rates!r}" for row in table.itertuples() if not pd.isna(row.kappa)]
    fragment = "\n".join(header) + "\n" + render_config(cfg)
    logger.info(f"🔁 Converted {len(rates.others)} rates over {rates.base.name}")
    return CommandResult(
        command="convert",
        table=table,
        config_text=fragment,
        warnings=notes,
        heading_info={"base": rates.base.name},
        fragment=fragment,
    )


def cmd_mc(cfg: RunConfig) -> CommandResult:
    df, mean, var = mc_summary(list(cfg.spreads), cfg.corr, cfg.grid, cfg.mc)
    rows = [
        {"quantity": name, "value": est.value, "std_error": est.std_error, "n_paths": est.n_paths, "seed": cfg.mc.seed}
        for name, est in (("discount_factor", df), ("integral_mean", mean), ("integral_variance", var))
    ]
    logger.info(f"🎲 MC discount factor {df.value:.8f} ± {df.std_error:.2e}")
    return CommandResult(
        command="mc",
        table=pd.DataFrame(rows),
        config_text=cfg.to_text(),
        seed=cfg.mc.seed,
        heading_info={"maturity": cfg.grid.maturity, "n_paths": cfg.mc.n_paths, "seed": cfg.mc.seed},
    )


def random_extras(base: RunConfig, n_spreads: int, seed: int) -> Tuple[List[SpreadParams], CorrelationSpec]:
    """Extend the configured spreads to ``n_spreads`` with randomised ones.

    Extras are drawn in a fixed order from ``seed``, so smaller sets are
    prefixes of larger ones.
    """
    spreads = list(base.spreads)[:n_spreads]
    extra = n_spreads - len(spreads)
    if extra <= 0:
        return spreads, base.corr.submatrix(range(n_spreads))
    rng = np.random.default_rng(seed)
    draws = rng.uniform(size=(extra, 3))
    for k, (u_kappa, u_xi, u_q0) in enumerate(draws, start=len(spreads) + 1):
        spreads.append(SpreadParams.flat(
            kappa=BENCH_KAPPA_RANGE[0] + u_kappa * (BENCH_KAPPA_RANGE[1] - BENCH_KAPPA_RANGE[0]),
            xi=BENCH_XI_RANGE[0] + u_xi * (BENCH_XI_RANGE[1] - BENCH_XI_RANGE[0]),
            q0=BENCH_Q0_RANGE[0] + u_q0 * (BENCH_Q0_RANGE[1] - BENCH_Q0_RANGE[0]),
            name=f"random_{k}",
        ))
    n_base = base.corr.size
    rho = rng.uniform(*BENCH_RHO_RANGE, size=(n_spreads, n_spreads))
    rho = np.triu(rho, 1)
    rho = rho + rho.T
    np.fill_diagonal(rho, 1.0)
    rho[:n_base, :n_base] = base.corr.rho
    return spreads, CorrelationSpec(nearest_correlation(rho))


def _timed_estimators(cfg: RunConfig, spreads, corr) -> Dict[str, float]:
    est = cfg.estimator
    start = time.perf_counter()
    series = moment_series(spreads, corr, cfg.grid, cfg.conv, est.groups, with_probs=False)
    moments_diff = time.perf_counter() - start
    cf1(series, cfg.grid)
    diffusion_variance(series, cfg.grid, est.variance_mode)
    total_diff = time.perf_counter() - start

    start = time.perf_counter()
    series = moment_series(spreads, corr, cfg.grid, cfg.conv, est.groups, with_probs=True)
    moments_mr = time.perf_counter() - start
    cf1(series, cfg.grid)
    kt = weighted_kappa(series, [p.kappa for p in spreads])
    mr_variance(series, kt, cfg.grid, est.variance_mode, est.inner_variable)
    total_mr = time.perf_counter() - start
    return {
        "time_cf2_diffusion": total_diff,
        "time_cf2_mr": total_mr,
        "moment_share_cf2_diffusion": moments_diff / total_diff,
        "moment_share_cf2_mr": moments_mr / total_mr,
    }


def cmd_bench(cfg: RunConfig, currency_counts: Sequence[int], seed: Optional[int] = None) -> CommandResult:
    """Wall time of both second-order estimators relative to the first currency count"""
    counts = list(currency_counts)
    if not counts or min(counts) < 3:
        raise InputError("currency counts must be at least 3", field="counts")
    if len(cfg.spreads) < 2:
        raise InputError("timing runs need at least two configured spreads", field="spreads")
    seed = cfg.mc.seed if seed is None else seed
    rows = []
    for count in counts:
        spreads, corr = random_extras(cfg, count - 1, seed)
        timing = _timed_estimators(cfg, spreads, corr)
        rows.append({"currencies": count, **timing})
        logger.info(f"⏱️ {count} currencies: {timing['time_cf2_diffusion']:.2f}s / {timing['time_cf2_mr']:.2f}s")
    table = pd.DataFrame(rows)
    table.insert(1, "relative_cf2_diffusion", table["time_cf2_diffusion"] / table["time_cf2_diffusion"].iloc[0])
    table.insert(2, "relative_cf2_mr", table["time_cf2_mr"] / table["time_cf2_mr"].iloc[0])
    return CommandResult(
        command="bench",
        table=table,
        config_text=cfg.to_text(),
        seed=seed,
        heading_info={"base_count": counts[0], "seed": seed},
    )
