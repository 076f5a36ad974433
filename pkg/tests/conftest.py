import math
from pathlib import Path

import numpy as np
import pytest

from presets.reference_params import REFERENCE_DELTA, REFERENCE_DT, REFERENCE_MATURITY, reference_corr, reference_spreads
from utils.common_factor import ConvolutionSettings
from utils.estimators import MaxMomentSeries
from utils.term_structure import TimeGrid

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"


@pytest.fixture
def spreads():
    return reference_spreads()


@pytest.fixture
def corr():
    return reference_corr(0.3)


@pytest.fixture
def grid():
    return TimeGrid(maturity=REFERENCE_MATURITY, dt=REFERENCE_DT)


@pytest.fixture
def short_grid():
    return TimeGrid(maturity=5.0, dt=0.5)


@pytest.fixture
def conv():
    return ConvolutionSettings(delta=REFERENCE_DELTA)


@pytest.fixture
def table1_path():
    return str(CONFIGS / "table1.env")


@pytest.fixture
def table2_path():
    return str(CONFIGS / "table2.env")


@pytest.fixture
def rates_path():
    return str(CONFIGS / "rates.env")


@pytest.fixture(autouse=True)
def single_worker(monkeypatch):
    monkeypatch.delenv("CTD_WORKERS", raising=False)


def make_series(grid, mean, variance=0.0, probs=None, raw_second=None):
    """Hand-built series with constant or per-point values"""
    n = grid.steps + 1
    mean = np.broadcast_to(np.asarray(mean, dtype=float), (n,)).copy()
    variance = np.broadcast_to(np.asarray(variance, dtype=float), (n,)).copy()
    raw = variance + mean ** 2 if raw_second is None else np.broadcast_to(raw_second, (n,)).copy()
    residual = None
    if probs is not None:
        probs = np.tile(np.asarray(probs, dtype=float), (n, 1))
        residual = 1.0 - probs.sum(axis=1)
    return MaxMomentSeries(
        times=grid.points, mean=mean, raw_second=raw, variance=variance, probs=probs, residual=residual,
        cutoff=np.zeros(n), grid_points=np.zeros(n, dtype=int), gamma=np.zeros(n),
        gamma_clamped=np.zeros(n, dtype=bool),
    )


def normal_max0_moments(mu, sigma):
    """E[max(0, X)] and E[max(0, X)^2] for X ~ N(mu, sigma^2)"""
    d = mu / sigma
    cdf = 0.5 * math.erfc(-d / math.sqrt(2.0))
    pdf = math.exp(-0.5 * d * d) / math.sqrt(2.0 * math.pi)
    return mu * cdf + sigma * pdf, (mu * mu + sigma * sigma) * cdf + mu * sigma * pdf
