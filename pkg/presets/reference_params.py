# Reference collateral spread and rate parameters
from typing import List, Tuple

from utils.term_structure import CorrelationSpec, RateParams, SpreadParams

# Three currency desk setup: two spreads over the base rate, theta flat at q0
REFERENCE_SPREADS = (
    {"name": "spread_1", "kappa": 0.0078, "xi": 0.0018, "q0": 0.000845},
    {"name": "spread_2", "kappa": 0.0076, "xi": 0.0023, "q0": 0.001514},
)
REFERENCE_RHO = 0.3
REFERENCE_MATURITY = 20.0
REFERENCE_DT = 0.1
REFERENCE_DELTA = 5e-5

# Collateral rates the spread set is derived from; the first one is the base
REFERENCE_RATES = (
    {"name": "rate_0", "kappa": 0.0072, "xi": 0.0073, "r0": 0.000845},
    {"name": "rate_1", "kappa": 0.0083, "xi": 0.0073, "r0": 0.001514},
    {"name": "rate_2", "kappa": 0.0080, "xi": 0.0074, "r0": 0.002265},
)
REFERENCE_RATE_CORR = ((1.0, 0.97, 0.95), (0.97, 1.0, 0.95), (0.95, 0.95, 1.0))

# Point counts in [0, L(T)] at delta = 5e-5 reported for the desk setup
REFERENCE_POINT_COUNTS = {5.0: 818, 20.0: 1483}

# Randomised extra currencies for timing runs
BENCH_KAPPA_RANGE = (0.005, 0.01)
BENCH_XI_RANGE = (0.0015, 0.0025)
BENCH_Q0_RANGE = (0.0, 0.003)
BENCH_RHO_RANGE = (0.1, 0.5)


def reference_spreads() -> List[SpreadParams]:
    return [SpreadParams.flat(**row) for row in REFERENCE_SPREADS]


def reference_corr(rho: float = REFERENCE_RHO) -> CorrelationSpec:
    return CorrelationSpec.uniform(len(REFERENCE_SPREADS), rho)


def reference_rates() -> Tuple[RateParams, List[RateParams], CorrelationSpec]:
    rates = [RateParams(**row) for row in REFERENCE_RATES]
    return rates[0], rates[1:], CorrelationSpec(REFERENCE_RATE_CORR)
