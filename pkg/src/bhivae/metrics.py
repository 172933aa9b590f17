"""Disentanglement scores: MIG, block MIG, SAP and Z-diff.

All discretization is done in rank space, so every score is invariant to
strictly increasing per-dimension transforms of the latents (in particular
positive rescaling) up to floating-point summation order.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np
from scipy.stats import rankdata

DEFAULT_BINS = 20
MAX_CUTS = 256


@dataclass(frozen=True)
class FactorTable:
    factors: np.ndarray  # (n, K) integer
    names: tuple[str, ...]
    cardinalities: tuple[int, ...]

    def __post_init__(self):
        f = np.asarray(self.factors, dtype=np.int64)
        if f.ndim != 2 or f.shape[1] != len(self.names) or len(self.names) != len(self.cardinalities):
            raise ValueError("factor table shape does not match names/cardinalities")
        if f.size and ((f < 0).any() or (f >= np.asarray(self.cardinalities)).any()):
            raise ValueError("factor values outside [0, cardinality)")
        object.__setattr__(self, "factors", f)
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "cardinalities", tuple(int(c) for c in self.cardinalities))

    def __len__(self):
        return self.factors.shape[0]

    @property
    def num_factors(self) -> int:
        return len(self.names)

    def column(self, name_or_index) -> np.ndarray:
        k = self.names.index(name_or_index) if isinstance(name_or_index, str) else name_or_index
        return self.factors[:, k]

    def subset(self, idx) -> "FactorTable":
        return FactorTable(self.factors[idx], self.names, self.cardinalities)


@dataclass
class ScoreReport:
    z_diff: float
    sap: float
    mig: float
    block_mig: float
    per_factor: dict = field(default_factory=dict)
    layer_kl: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def mi_discrete(joint_counts) -> float:
    """Plug-in mutual information (nats) of a contingency table."""
    c = np.asarray(joint_counts, dtype=np.float64)
    if (c < 0).any():
        raise ValueError("counts must be non-negative")
    total = c.sum()
    if total <= 0:
        raise ValueError("contingency table is empty")
    p = c / total
    outer = p.sum(axis=1, keepdims=True) * p.sum(axis=0, keepdims=True)
    nz = p > 0
    return float(max(np.sum(p[nz] * np.log(p[nz] / outer[nz])), 0.0))


def entropy_discrete(values: np.ndarray) -> float:
    _, counts = np.unique(values, return_counts=True)
    p = counts / counts.sum()
    return float(-np.sum(p * np.log(p)))


def quantile_bins(column: np.ndarray, bins: int) -> np.ndarray:
    """Equal-count bins by rank; tied values always share a bin."""
    n = len(column)
    ranks = rankdata(column, method="min") - 1
    return (ranks * bins) // n


def _contingency(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1)
    return table


def mutual_info_matrix(latents: np.ndarray, factors: np.ndarray, bins: int) -> np.ndarray:
    """MI between each binned latent dim (rows) and each factor (columns)."""
    binned = [quantile_bins(latents[:, j], bins) for j in range(latents.shape[1])]
    return np.array([[mi_discrete(_contingency(b, factors[:, k])) for k in range(factors.shape[1])] for b in binned])


def _gap_scores(mi: np.ndarray, factors: np.ndarray) -> np.ndarray:
    scores = []
    for k in range(factors.shape[1]):
        h = entropy_discrete(factors[:, k])
        if h == 0:
            continue
        col = np.sort(mi[:, k])[::-1]
        second = col[1] if len(col) > 1 else 0.0
        scores.append((col[0] - second) / h)
    return np.clip(np.array(scores), 0.0, 1.0)


def _check_sizes(latents: np.ndarray, table: FactorTable, bins: int) -> np.ndarray:
    latents = np.asarray(latents, dtype=np.float64)
    if bins < 2:
        raise ValueError("need at least two bins")
    if latents.shape[0] != len(table):
        raise ValueError("latent and factor row counts differ")
    if latents.shape[0] < bins:
        raise ValueError(f"need at least {bins} samples for {bins} bins")
    return latents


def mig(latents, table: FactorTable, bins: int = DEFAULT_BINS) -> float:
    latents = _check_sizes(latents, table, bins)
    scores = _gap_scores(mutual_info_matrix(latents, table.factors, bins), table.factors)
    return float(scores.mean()) if len(scores) else 0.0


def block_projections(latents: np.ndarray, layout, sub_width: int = 2) -> np.ndarray:
    """Project every feature block and residual sub-block onto its unit diagonal."""
    cols = []
    for a, b in layout.traversal_blocks(sub_width):
        cols.append(latents[:, a:b].sum(axis=1) / np.sqrt(b - a))
    return np.stack(cols, axis=1)


def block_mig(latents, layout, table: FactorTable, bins: int = DEFAULT_BINS, sub_width: int = 2) -> float:
    latents = _check_sizes(latents, table, bins)
    return mig(block_projections(latents, layout, sub_width), table, bins)


def _interval_balanced_accuracy(column: np.ndarray, labels: np.ndarray) -> float:
    """Best balanced accuracy of classifying ``labels`` by cutting the sorted
    ``column`` into one interval per class.

    Classes are laid out in order of their median rank; cut positions are
    restricted to value boundaries (at most MAX_CUTS of them, evenly spaced in
    rank) and chosen exactly by dynamic programming.  With two classes this is
    the best single-threshold classifier.
    """
    classes, y = np.unique(labels, return_inverse=True)
    K = len(classes)
    n = len(column)
    order = np.argsort(column, kind="stable")
    ys = y[order]
    vs = column[order]

    ranks = np.empty(n)
    ranks[order] = np.arange(n)
    med = np.array([np.median(ranks[y == c]) for c in range(K)])
    class_order = np.lexsort((np.arange(K), med))

    boundaries = np.flatnonzero(vs[1:] != vs[:-1]) + 1
    if len(boundaries) > MAX_CUTS:
        boundaries = boundaries[np.linspace(0, len(boundaries) - 1, MAX_CUTS).round().astype(int)]
    cuts = np.concatenate([[0], boundaries, [n]])

    onehot = np.zeros((n + 1, K))
    np.add.at(onehot, (np.arange(1, n + 1), ys), 1)
    cum = np.cumsum(onehot, axis=0)[cuts]  # (M, K) counts before each cut
    recall = cum / cum[-1]

    best = recall[:, class_order[0]].copy()
    for c in class_order[1:]:
        r = recall[:, c]
        # best[m'] + r[m] - r[m'] maximized over m' <= m
        best = np.maximum.accumulate(best - r) + r
    return float(best[-1] / K)


def sap_matrix(latents: np.ndarray, factors: np.ndarray) -> np.ndarray:
    """Chance-rescaled balanced accuracy of each latent dim (rows) for each factor (columns)."""
    d, K = latents.shape[1], factors.shape[1]
    S = np.full((d, K), np.nan)
    for k in range(K):
        n_classes = len(np.unique(factors[:, k]))
        if n_classes < 2:
            continue
        chance = 1.0 / n_classes
        for j in range(d):
            acc = _interval_balanced_accuracy(latents[:, j], factors[:, k])
            S[j, k] = max((acc - chance) / (1 - chance), 0.0)
    return S


def sap_from_matrix(S: np.ndarray) -> float:
    gaps = []
    for k in range(S.shape[1]):
        col = S[:, k]
        if np.isnan(col).all():
            continue
        col = np.sort(col)[::-1]
        gaps.append(col[0] - (col[1] if len(col) > 1 else 0.0))
    return float(np.mean(gaps)) if gaps else 0.0


def sap(latents, table: FactorTable) -> float:
    latents = np.asarray(latents, dtype=np.float64)
    if latents.shape[0] != len(table):
        raise ValueError("latent and factor row counts differ")
    return sap_from_matrix(sap_matrix(latents, table.factors))


class PairSampler(Protocol):
    num_factors: int

    def sample_observations(self, n: int, rng: np.random.Generator) -> np.ndarray: ...

    def sample_pairs(self, k: int, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]: ...


class GridPairSampler:
    """Factors drawn uniformly per coordinate; the observation is the factor vector itself."""

    def __init__(self, cardinalities: Sequence[int]):
        self.cardinalities = np.asarray(cardinalities)
        self.num_factors = len(cardinalities)

    def sample_observations(self, n, rng):
        return rng.integers(0, self.cardinalities, size=(n, self.num_factors)).astype(np.float64)

    def sample_pairs(self, k, n, rng):
        a = self.sample_observations(n, rng)
        b = self.sample_observations(n, rng)
        b[:, k] = a[:, k]
        return a, b


class DatasetPairSampler:
    """Pairs of dataset rows that agree on one factor."""

    def __init__(self, images: np.ndarray, table: FactorTable):
        self.images = images
        self.table = table
        self.num_factors = table.num_factors
        self._by_value = [
            {v: np.flatnonzero(table.factors[:, k] == v) for v in np.unique(table.factors[:, k])}
            for k in range(self.num_factors)
        ]

    def sample_observations(self, n, rng):
        return self.images[rng.integers(0, len(self.table), size=n)]

    def sample_pairs(self, k, n, rng):
        ia = rng.integers(0, len(self.table), size=n)
        ib = np.empty(n, dtype=np.int64)
        for r, i in enumerate(ia):
            pool = self._by_value[k][self.table.factors[i, k]]
            ib[r] = pool[rng.integers(len(pool))]
        return self.images[ia], self.images[ib]


def z_diff(
    encoder_fn: Callable[[np.ndarray], np.ndarray],
    factor_sampler: PairSampler,
    n_votes: int = 600,
    n_pairs_per_vote: int = 64,
    seed: int = 0,
    n_std_samples: int = 5000,
) -> float:
    """Accuracy (in percent) of identifying which factor was held fixed across
    image pairs from the dimension with the smallest mean standardized
    absolute latent difference.

    Votes cycle through the factors.  A majority-vote table fitted on the
    first half of the votes maps each winning dimension to a factor; the
    score is its accuracy on the second half.
    """
    rng = np.random.default_rng(seed)
    K = factor_sampler.num_factors
    if K == 1:
        return 100.0
    std = np.asarray(encoder_fn(factor_sampler.sample_observations(n_std_samples, rng))).std(axis=0)
    keep = std > 1e-12
    if not keep.any():
        return 100.0 / K

    dims = np.empty(n_votes, dtype=np.int64)
    targets = np.arange(n_votes) % K
    for v, k in enumerate(targets):
        a, b = factor_sampler.sample_pairs(k, n_pairs_per_vote, rng)
        diff = np.abs(np.asarray(encoder_fn(a)) - np.asarray(encoder_fn(b)))[:, keep] / std[keep]
        dims[v] = np.argmin(diff.mean(axis=0))

    half = n_votes // 2
    counts = np.zeros((keep.sum(), K))
    np.add.at(counts, (dims[:half], targets[:half]), 1)
    fallback = np.argmax(np.bincount(targets[:half], minlength=K))
    vote = np.where(counts.sum(axis=1) > 0, counts.argmax(axis=1), fallback)
    return float(100.0 * np.mean(vote[dims[half:]] == targets[half:]))
