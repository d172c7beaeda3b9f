"""Shared fixtures: generated markets and their prepared datasets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pytest

from gcgru.graphs import (
    Laplacian,
    build_industry_graph,
    build_shareholding_graph,
    build_topicality_graph,
    normalized_laplacian,
    read_industry_csv,
    read_shareholding_csv,
    read_topicality_csv,
)
from gcgru.synth import SynthConfig, SynthResult, generate
from gcgru.universe import StockUniverse, build_panel, load_prices, read_universe


@dataclass(frozen=True)
class PreparedMarket:
    result: SynthResult
    universe: StockUniverse
    splits: tuple[list, list, list]
    laplacians: list[Laplacian]  # (shareholding, industry, topicality)
    follower_idx: np.ndarray


def prepare_market(result: SynthResult, lag: int = 5) -> PreparedMarket:
    universe = read_universe(result.paths["prices"])
    series = load_prices(result.paths["prices"], universe)
    _, _, splits = build_panel(series, universe, lag)
    edges = read_shareholding_csv(result.paths["shareholding"])
    membership, capital = read_industry_csv(result.paths["industry"])
    topics = read_topicality_csv(result.paths["topicality"])
    laplacians = [
        normalized_laplacian(build_shareholding_graph(edges, universe)),
        normalized_laplacian(build_industry_graph(membership, capital, universe)),
        normalized_laplacian(build_topicality_graph(topics, universe)),
    ]
    follower_idx = np.array(sorted(universe.index[s] for s in result.follower_of))
    return PreparedMarket(result, universe, splits, laplacians, follower_idx)


@pytest.fixture(scope="session")
def fixture_market(tmp_path_factory) -> SynthResult:
    """The standard planted-lead-lag market (20 stocks, 4 industries,
    beta 0.8, noise 0.01, 1000 days, fixed seed)."""
    return generate(SynthConfig(), tmp_path_factory.mktemp("market"))


@pytest.fixture(scope="session")
def prepared(fixture_market) -> PreparedMarket:
    return prepare_market(fixture_market)


@pytest.fixture(scope="session")
def small_market(tmp_path_factory) -> SynthResult:
    """A quick 300-day market for CLI and determinism tests."""
    config = SynthConfig(n_stocks=8, n_days=300, n_industries=2, seed=11)
    return generate(config, tmp_path_factory.mktemp("small_market"))
