"""Synthetic multi-stock market with a planted intra-industry lead-lag effect.

Each industry has one or more large-cap leaders whose daily returns are
independent Gaussian noise; every follower copies its leader's previous-day
return scaled by `lead_strength` plus idiosyncratic noise. Prices compound
from a fixed base, so the up/down label equals the return sign. Matching
relationship files (shareholding, industry, topicality) are written in the
exact CSV schemas the data and graph loaders consume, making the planted
structure recoverable by the model.

The generator is the ground-truth testbed for the cross-effect claim: with
the graphs aligned to the planted structure a relationship-aware model can
predict followers, while a graph-free model cannot.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, fields
from datetime import date, timedelta
from pathlib import Path

import numpy as np

PRICE_HEADER = ("date", "stock_id", "open", "high", "low", "volume", "close")
MANIFEST_NAME = "manifest.json"

#: Returns are clipped here so prices stay positive in any noise regime.
MAX_ABS_RETURN = 0.2


@dataclass(frozen=True)
class SynthConfig:
    n_stocks: int = 20
    n_days: int = 1000
    n_industries: int = 4
    leaders_per_industry: int = 1
    lead_strength: float = 0.8  # beta: follower loading on leader's lagged return
    noise_sigma: float = 0.01  # follower idiosyncratic return noise
    leader_sigma: float = 0.05  # leader daily return scale
    topic_count: int = 8  # pool of extra (non-industry) topics
    seed: int = 7
    base_price: float = 100.0
    aligned_shareholding: bool = True
    aligned_topics: bool = True

    def __post_init__(self) -> None:
        if self.n_stocks < 2 * self.n_industries:
            raise ValueError("need at least 2 stocks per industry")
        if self.n_industries < 1 or self.leaders_per_industry < 1:
            raise ValueError("need at least one industry and one leader")
        if self.leaders_per_industry * self.n_industries >= self.n_stocks:
            raise ValueError("every industry needs at least one follower")
        if not 0.0 <= self.lead_strength <= 1.0:
            raise ValueError("lead strength must lie in [0, 1]")
        if self.noise_sigma < 0 or self.leader_sigma <= 0:
            raise ValueError("noise scales must be nonnegative (leader sigma positive)")
        if max(self.noise_sigma, self.leader_sigma) > 0.08:
            raise ValueError("return scales above 0.08/day leave the bounded regime")
        if self.n_days < 30:
            raise ValueError("need at least 30 days")
        if self.base_price <= 0:
            raise ValueError("base price must be positive")
        if self.topic_count < 1:
            raise ValueError("need at least one topic")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class SynthResult:
    config: SynthConfig
    out_dir: Path
    universe_ids: tuple[str, ...]
    leaders: tuple[str, ...]
    follower_of: dict[str, str]
    industries: dict[str, str]
    returns: np.ndarray  # (T, N)
    truth_adjacency: np.ndarray  # (N, N), planted leader -> follower edges
    oracle_accuracy: float
    paths: dict[str, Path]


@dataclass(frozen=True)
class _Market:
    ids: tuple[str, ...]
    leaders: tuple[str, ...]
    follower_of: dict[str, str]
    industries: dict[str, str]
    capitals: dict[str, float]
    topics: dict[str, set[str]]
    shareholding: list[tuple[str, str, float]]
    returns: np.ndarray
    prices: np.ndarray  # (T, N) closes
    truth_adjacency: np.ndarray


def _simulate(config: SynthConfig) -> _Market:
    rng = np.random.default_rng(config.seed)
    n, t = config.n_stocks, config.n_days
    ids = tuple(f"S{i:03d}" for i in range(n))

    # Round-robin industry assignment; the first leaders_per_industry members
    # of each industry are its leaders and followers copy the first leader.
    industries = {ids[i]: f"IND{i % config.n_industries}" for i in range(n)}
    members: dict[str, list[str]] = {}
    for sid in ids:
        members.setdefault(industries[sid], []).append(sid)
    leaders: list[str] = []
    follower_of: dict[str, str] = {}
    for group in members.values():
        group_leaders = group[: config.leaders_per_industry]
        leaders.extend(group_leaders)
        for sid in group[config.leaders_per_industry :]:
            follower_of[sid] = group_leaders[0]
    leader_set = set(leaders)

    returns = np.empty((t, n))
    leader_returns = {
        sid: rng.normal(0.0, config.leader_sigma, size=t) for sid in leaders
    }
    for j, sid in enumerate(ids):
        if sid in leader_set:
            returns[:, j] = leader_returns[sid]
        else:
            noise = rng.normal(0.0, config.noise_sigma, size=t)
            lead = leader_returns[follower_of[sid]]
            coupled = noise.copy()
            coupled[1:] += config.lead_strength * lead[:-1]
            returns[:, j] = coupled
    np.clip(returns, -MAX_ABS_RETURN, MAX_ABS_RETURN, out=returns)

    prices = config.base_price * np.cumprod(1.0 + returns, axis=0)

    # Leaders get the largest registered capital, so the industry graph's
    # leader->follower entries exceed 1 as planted. The margin is kept small:
    # under degree-normalized mixing a much larger leader would be aggregated
    # with a much *smaller* weight (a_fl = M_f / M_l), burying its signal.
    capitals = {}
    for j, sid in enumerate(ids):
        if sid in leader_set:
            capitals[sid] = 110.0
        else:
            capitals[sid] = 100.0 * (1.0 + 0.005 * j)

    # Aligned topics: one sector topic shared by the whole industry plus one
    # private topic, so the topicality graph mirrors the industry blocks.
    topics: dict[str, set[str]] = {}
    extra_pool = [f"TOPIC{i}" for i in range(config.topic_count)]
    for sid in ids:
        if config.aligned_topics:
            own = {f"SECTOR-{industries[sid]}", f"OWN-{sid}"}
        else:
            own = set(rng.choice(extra_pool, size=min(2, config.topic_count), replace=False))
        topics[sid] = own

    shareholding: list[tuple[str, str, float]] = []
    if config.aligned_shareholding:
        for follower, leader in sorted(follower_of.items()):
            shareholding.append((leader, follower, 0.1))
    else:
        n_edges = len(follower_of)
        for _ in range(n_edges):
            i, j = rng.choice(n, size=2, replace=False)
            shareholding.append((ids[i], ids[j], 0.1))

    truth = np.zeros((n, n))
    index = {sid: j for j, sid in enumerate(ids)}
    for follower, leader in follower_of.items():
        truth[index[leader], index[follower]] = 1.0
    return _Market(
        ids=ids,
        leaders=tuple(leaders),
        follower_of=follower_of,
        industries=industries,
        capitals=capitals,
        topics=topics,
        shareholding=shareholding,
        returns=returns,
        prices=prices,
        truth_adjacency=truth,
    )


def _oracle_accuracy(market: _Market, config: SynthConfig) -> float:
    """Accuracy of the rule: follower up on day t iff beta * leader_return(t-1) > 0."""
    index = {sid: j for j, sid in enumerate(market.ids)}
    correct = 0
    total = 0
    for follower, leader in market.follower_of.items():
        f, l = index[follower], index[leader]
        preds = config.lead_strength * market.returns[:-1, l] > 0
        actual = market.returns[1:, f] > 0
        correct += int(np.sum(preds == actual))
        total += preds.size
    return correct / total


def oracle_accuracy(config: SynthConfig) -> float:
    """Achievable follower accuracy bound for the planted coupling."""
    return _oracle_accuracy(_simulate(config), config)


def _write_prices(path: Path, market: _Market, config: SynthConfig) -> None:
    rng = np.random.default_rng(config.seed + 1)
    t, n = market.returns.shape
    closes = market.prices
    opens = np.empty_like(closes)
    opens[0] = config.base_price
    opens[1:] = closes[:-1]
    highs = np.maximum(opens, closes)
    lows = np.minimum(opens, closes)

    # One limit-move day at the running extreme of each stock (open = high =
    # low = close) pins the per-feature training minima and maxima to the same
    # values, which keeps the min-max gauge identical across o/h/l.
    safe_end = int(t * 0.65)
    for j in range(n):
        for day in (np.argmin(closes[:safe_end, j]), np.argmax(closes[:safe_end, j])):
            opens[day, j] = highs[day, j] = lows[day, j] = closes[day, j]

    # Turnover swells on up days and dries up on down days, so the volume
    # channel carries each stock's own daily return without the price-level
    # drift that min-max scaling otherwise folds into the candle features.
    volumes = 1e6 * np.exp(
        5.0 * market.returns + rng.normal(0.0, 0.05, size=(t, n))
    )
    start = date(2016, 1, 4)
    calendar = [start + timedelta(days=i) for i in range(t)]
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(PRICE_HEADER)
        for i, day in enumerate(calendar):
            for j, sid in enumerate(market.ids):
                writer.writerow(
                    [
                        day.isoformat(),
                        sid,
                        f"{opens[i, j]:.8f}",
                        f"{highs[i, j]:.8f}",
                        f"{lows[i, j]:.8f}",
                        f"{volumes[i, j]:.2f}",
                        f"{closes[i, j]:.8f}",
                    ]
                )


def generate(config: SynthConfig, out_dir: str | Path) -> SynthResult:
    """Write the four input files plus ground truth and a manifest.

    Identical config and seed produce byte-identical files.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    market = _simulate(config)

    paths = {
        "prices": out_dir / "prices.csv",
        "shareholding": out_dir / "shareholding.csv",
        "industry": out_dir / "industry.csv",
        "topicality": out_dir / "topicality.csv",
        "truth_adjacency": out_dir / "truth_adjacency.csv",
        "manifest": out_dir / MANIFEST_NAME,
    }

    _write_prices(paths["prices"], market, config)

    with paths["shareholding"].open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["holder_id", "held_id", "ratio"])
        for holder, held, ratio in market.shareholding:
            writer.writerow([holder, held, f"{ratio:g}"])

    with paths["industry"].open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stock_id", "industry", "registered_capital"])
        for sid in market.ids:
            writer.writerow([sid, market.industries[sid], f"{market.capitals[sid]:.6f}"])

    with paths["topicality"].open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stock_id", "topic"])
        for sid in market.ids:
            for topic in sorted(market.topics[sid]):
                writer.writerow([sid, topic])

    with paths["truth_adjacency"].open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", *market.ids])
        for sid, row in zip(market.ids, market.truth_adjacency):
            writer.writerow([sid, *(f"{v:g}" for v in row)])

    oracle = _oracle_accuracy(market, config)
    manifest = {
        "config": config.to_dict(),
        "seed": config.seed,
        "universe": list(market.ids),
        "leaders": list(market.leaders),
        "follower_of": dict(sorted(market.follower_of.items())),
        "oracle_accuracy": oracle,
        "files": {k: p.name for k, p in paths.items() if k != "manifest"},
    }
    paths["manifest"].write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    return SynthResult(
        config=config,
        out_dir=out_dir,
        universe_ids=market.ids,
        leaders=market.leaders,
        follower_of=market.follower_of,
        industries=market.industries,
        returns=market.returns,
        truth_adjacency=market.truth_adjacency,
        oracle_accuracy=oracle,
        paths=paths,
    )
