"""Corporate-relationship graphs and their spectral operators.

Three pre-defined N x N adjacency matrices over the stock universe
(shareholding, industry, topicality), the normalized Laplacian
L = I - D^{-1/2} A D^{-1/2}, and the matrix polynomials used as
graph-convolution propagators.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .universe import StockUniverse

KINDS = ("shareholding", "industry", "topicality")

# Chunk bound (elements) for the temporary tensor in sorted_matmul.
_SORT_CHUNK_ELEMS = 4_000_000


def sorted_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with each inner sum taken in value-sorted order.

    Sorting makes the summation order independent of how rows/columns are
    indexed, so simultaneously permuting node indices of the operands permutes
    the result bit-exactly. Used wherever node features are mixed across the
    graph, which keeps the whole forward pass exactly permutation-equivariant.
    """
    n, k = a.shape
    k2, m = b.shape
    if k != k2:
        raise ValueError(f"shape mismatch: {a.shape} @ {b.shape}")
    out = np.empty((n, m), dtype=np.float64)
    cols_per_chunk = max(1, _SORT_CHUNK_ELEMS // (n * k))
    for start in range(0, m, cols_per_chunk):
        stop = min(m, start + cols_per_chunk)
        prod = a[:, :, None] * b[None, :, start:stop]
        prod.sort(axis=1)
        out[:, start:stop] = prod.sum(axis=1)
    return out


@dataclass(frozen=True)
class AdjacencyMatrix:
    """Nonnegative relationship weights with a zero diagonal."""

    kind: str
    weights: np.ndarray  # (N, N)

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown graph kind {self.kind!r}")
        w = self.weights
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError("adjacency must be square")
        if not np.isfinite(w).all():
            raise ValueError("adjacency contains non-finite entries")
        if (w < 0).any():
            raise ValueError("adjacency entries must be nonnegative")
        if np.diagonal(w).any():
            raise ValueError("adjacency diagonal must be zero")
        if self.kind in ("shareholding", "topicality") and (w > 1).any():
            raise ValueError(f"{self.kind} entries must lie in [0, 1]")

    @property
    def n(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class Laplacian:
    """Normalized graph Laplacian plus the renormalized one-hop propagator.

    Degrees are row sums of (A + I): the unit self-loop enters the degree only,
    so an isolated node gets a well-defined identity-acting row instead of a
    division by zero.

      matrix  = I - D^{-1/2} A D^{-1/2}
      one_hop = D^{-1/2} (A + I) D^{-1/2}
    """

    kind: str
    matrix: np.ndarray
    one_hop: np.ndarray

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


def build_shareholding_graph(
    edges: Iterable[tuple[str, str, float]], universe: StockUniverse
) -> AdjacencyMatrix:
    """Symmetric ownership graph: edge weight is the shareholding ratio in [0, 1].

    Influence between holder and held company is mutual, so the same ratio is
    written in both directions. Duplicate pairs keep the maximum ratio;
    self-holdings are ignored.
    """
    n = universe.size
    w = np.zeros((n, n), dtype=np.float64)
    for holder, held, ratio in edges:
        if holder not in universe:
            raise ValueError(f"unknown stock id {holder!r} in shareholding edges")
        if held not in universe:
            raise ValueError(f"unknown stock id {held!r} in shareholding edges")
        if not 0.0 <= ratio <= 1.0:
            raise ValueError(f"shareholding ratio {ratio} outside [0, 1]")
        i, j = universe.index[holder], universe.index[held]
        if i == j:
            continue
        w[i, j] = max(w[i, j], ratio)
        w[j, i] = max(w[j, i], ratio)
    return AdjacencyMatrix("shareholding", w)


def build_industry_graph(
    membership: Mapping[str, str],
    capital: Mapping[str, float],
    universe: StockUniverse,
) -> AdjacencyMatrix:
    """Intra-industry lead-lag graph: a[i][j] = size_i / size_j, same industry only.

    Firm size is measured by registered capital, so the influence is asymmetric:
    the entry from a big firm towards a small one exceeds 1 and its reverse is
    below 1. There are no edges across industries.
    """
    for sid in universe.ids:
        if sid not in membership:
            raise ValueError(f"missing industry membership for {sid!r}")
        if sid not in capital:
            raise ValueError(f"missing registered capital for {sid!r}")
        if not capital[sid] > 0:
            raise ValueError(f"nonpositive registered capital for {sid!r}")
    n = universe.size
    w = np.zeros((n, n), dtype=np.float64)
    for i, si in enumerate(universe.ids):
        for j, sj in enumerate(universe.ids):
            if i != j and membership[si] == membership[sj]:
                w[i, j] = capital[si] / capital[sj]
    return AdjacencyMatrix("industry", w)


def build_topicality_graph(
    topics: Mapping[str, set[str]], universe: StockUniverse
) -> AdjacencyMatrix:
    """Shared-news-topic graph: a[i][j] = |topics_i & topics_j| / |topics_i|.

    Zero when the intersection is empty or stock i has no topics; absent
    stocks count as having an empty topic set.
    """
    n = universe.size
    w = np.zeros((n, n), dtype=np.float64)
    sets = [frozenset(topics.get(sid, ())) for sid in universe.ids]
    for i in range(n):
        if not sets[i]:
            continue
        for j in range(n):
            if i != j:
                w[i, j] = len(sets[i] & sets[j]) / len(sets[i])
    return AdjacencyMatrix("topicality", w)


def normalized_laplacian(adj: AdjacencyMatrix) -> Laplacian:
    """Normalized Laplacian with self-loop-augmented degrees (see Laplacian)."""
    a = adj.weights
    n = adj.n
    deg = a.sum(axis=1) + 1.0
    inv_sqrt = 1.0 / np.sqrt(deg)
    # The symmetric scale factor is formed first so a symmetric adjacency
    # yields a bit-exactly symmetric Laplacian.
    scale = np.outer(inv_sqrt, inv_sqrt)
    matrix = np.eye(n) - scale * a
    one_hop = scale * (a + np.eye(n))
    return Laplacian(kind=adj.kind, matrix=matrix, one_hop=one_hop)


def matrix_polynomial(matrix: np.ndarray, coeffs: Sequence[float]) -> np.ndarray:
    """Evaluate sum_k coeffs[k] * matrix^k by repeated multiplication."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.ndim != 1 or coeffs.size == 0:
        raise ValueError("need at least one polynomial coefficient")
    n = matrix.shape[0]
    power = np.eye(n)
    result = coeffs[0] * power
    for theta in coeffs[1:]:
        power = sorted_matmul(power, matrix)
        result = result + theta * power
    return result


def graph_density(adj: AdjacencyMatrix) -> float:
    """Fraction of nonzero off-diagonal entries."""
    n = adj.n
    off = int(np.count_nonzero(adj.weights)) - int(np.count_nonzero(np.diagonal(adj.weights)))
    return off / (n * (n - 1))


# ---------------------------------------------------------------------------
# delimited-text interfaces


def read_shareholding_csv(path: str | Path) -> list[tuple[str, str, float]]:
    edges = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        _require(reader, path, ("holder_id", "held_id", "ratio"))
        for line_no, rec in enumerate(reader, start=2):
            try:
                edges.append((rec["holder_id"], rec["held_id"], float(rec["ratio"])))
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{line_no}: malformed row ({exc})") from exc
    return edges


def read_industry_csv(path: str | Path) -> tuple[dict[str, str], dict[str, float]]:
    membership: dict[str, str] = {}
    capital: dict[str, float] = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        _require(reader, path, ("stock_id", "industry", "registered_capital"))
        for line_no, rec in enumerate(reader, start=2):
            try:
                membership[rec["stock_id"]] = rec["industry"]
                capital[rec["stock_id"]] = float(rec["registered_capital"])
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{line_no}: malformed row ({exc})") from exc
    return membership, capital


def read_topicality_csv(path: str | Path) -> dict[str, set[str]]:
    topics: dict[str, set[str]] = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        _require(reader, path, ("stock_id", "topic"))
        for rec in reader:
            topics.setdefault(rec["stock_id"], set()).add(rec["topic"])
    return topics


def _require(reader: csv.DictReader, path: str | Path, columns: tuple[str, ...]) -> None:
    if reader.fieldnames is None:
        raise ValueError(f"no rows in {path}")
    missing = set(columns) - set(reader.fieldnames)
    if missing:
        raise ValueError(f"{path}: missing columns {sorted(missing)}")


def write_matrix_csv(path: str | Path, ids: Sequence[str], matrix: np.ndarray) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", *ids])
        for sid, row in zip(ids, matrix):
            writer.writerow([sid, *(f"{v:.17g}" for v in row)])


def density_report(adjs: Sequence[AdjacencyMatrix]) -> str:
    lines = []
    for adj in adjs:
        n = adj.n
        off = int(np.count_nonzero(adj.weights))
        lines.append(
            f"{adj.kind}: density={graph_density(adj):.6f} "
            f"nonzero_offdiag={off}/{n * (n - 1)}"
        )
    return "\n".join(lines) + "\n"
