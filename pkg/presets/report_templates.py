# Headings and notes for the human-readable reports

PRICE_HEADING = """
💱 CTD discount factor, T={maturity:g}, dt={dt:g}, {n_spreads} spreads
   variance mode: {variance_mode}
"""

SWEEP_HEADING = """
📈 Sensitivity sweep over {axis} ({n_rows} points), T={maturity:g}, {n_paths} MC paths
"""

MOMENTS_HEADING = """
🧮 Moment convergence against Monte Carlo ({n_paths} paths per maturity)
"""

CONVERT_HEADING = """
🔁 Rates converted to spreads over base rate {base}
"""

MC_HEADING = """
🎲 Monte Carlo reference, T={maturity:g}, {n_paths} paths, seed {seed}
"""

BENCH_HEADING = """
⏱️ Estimator timings relative to {base_count} currencies (extras seeded with {seed})
"""

SERIES_HEADING = """
📋 Per-time diagnostics
"""

WARNINGS_HEADING = "⚠️ Warnings:"

HEADINGS = {
    "price": PRICE_HEADING,
    "sweep": SWEEP_HEADING,
    "table-moments": MOMENTS_HEADING,
    "convert": CONVERT_HEADING,
    "mc": MC_HEADING,
    "bench": BENCH_HEADING,
}


def heading(command: str, **info) -> str:
    """Fill the heading of a command; unknown commands get a plain title"""
    template = HEADINGS.get(command)
    if template is None:
        return f"\n{command}\n"
    return template.format(**info)
