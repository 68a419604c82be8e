"""
Pair samplers for Siamese training and score fusion.

All samplers draw distinct unordered pairs uniformly from their qualifying
population without replacement. Pairs are stored with ``i < j``; orientation
carries no information because the ranking loss orients each pair by the
true scores.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class PopulationError(ValueError):
    """The sampler's qualifying pair population is empty or too small."""


@dataclass
class PairBatch:
    pairs: np.ndarray                 # (P, 2) song indices, i < j
    y_i: np.ndarray
    y_j: np.ndarray
    sampler: str = "naive"
    seed: Optional[int] = None

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        self.y_i = np.asarray(self.y_i, dtype=np.float64)
        self.y_j = np.asarray(self.y_j, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def i(self) -> np.ndarray:
        return self.pairs[:, 0]

    @property
    def j(self) -> np.ndarray:
        return self.pairs[:, 1]

    def write(self, path) -> None:
        """Text export: ``# sampler=.. seed=.. P=..`` header then one ``i,j`` line per pair."""
        with open(path, "w") as f:
            f.write(f"# sampler={self.sampler} seed={self.seed} P={len(self)}\n")
            for a, b in self.pairs:
                f.write(f"{a},{b}\n")

    @classmethod
    def read(cls, path, scores: Optional[Sequence[float]] = None) -> "PairBatch":
        meta = {}
        rows = []
        with open(path) as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                if line.startswith("#"):
                    for tok in line[1:].split():
                        k, _, v = tok.partition("=")
                        meta[k] = v
                    continue
                a, b = line.split(",")
                rows.append((int(a), int(b)))
        pairs = np.array(rows, dtype=np.int64).reshape(-1, 2)
        if "P" in meta and int(meta["P"]) != len(pairs):
            raise ValueError(f"header says P={meta['P']} but file holds {len(pairs)} pairs")
        y = np.asarray(scores, dtype=np.float64) if scores is not None else None
        seed = meta.get("seed")
        return cls(pairs=pairs,
                   y_i=y[pairs[:, 0]] if y is not None else np.full(len(pairs), np.nan),
                   y_j=y[pairs[:, 1]] if y is not None else np.full(len(pairs), np.nan),
                   sampler=meta.get("sampler", "unknown"),
                   seed=None if seed in (None, "None") else int(seed))


def _tri_decode(k: np.ndarray, n: int):
    """Map ranks ``0 <= k < n(n-1)/2`` onto pairs ``(i, j)``, ``i < j``, in row-major order."""
    k = np.asarray(k, dtype=np.int64)
    # row i starts at offset i*n - i*(i+1)/2
    i = np.floor((2 * n - 1 - np.sqrt((2 * n - 1) ** 2 - 8.0 * k)) / 2).astype(np.int64)
    start = i * n - i * (i + 1) // 2
    # correct float rounding at row boundaries
    over = k < start
    while over.any():
        i[over] -= 1
        start = i * n - i * (i + 1) // 2
        over = k < start
    nxt = (i + 1) * n - (i + 1) * (i + 2) // 2
    under = k >= nxt
    while under.any():
        i[under] += 1
        start = i * n - i * (i + 1) // 2
        nxt = (i + 1) * n - (i + 1) * (i + 2) // 2
        under = k >= nxt
    j = k - start + i + 1
    return i, j


def _draw_ranks(rng: np.random.Generator, population: int, P: int) -> np.ndarray:
    if population < 2 ** 62:
        return rng.choice(population, size=P, replace=False)
    raise PopulationError("pair population too large to index")


def _finish(name: str, pairs: np.ndarray, scores: np.ndarray, seed) -> PairBatch:
    pairs = np.sort(pairs, axis=1)
    return PairBatch(pairs=pairs, y_i=scores[pairs[:, 0]], y_j=scores[pairs[:, 1]],
                     sampler=name, seed=seed)


def _sample_population(rng, population: int, P: int, decode, scores, drop_ties: bool,
                       name: str) -> np.ndarray:
    """Uniform draw of ``P`` distinct qualifying pairs, optionally excluding tied scores.

    With tie filtering, a uniform random subset of ranks is drawn and its
    untied members kept, which stays uniform over the untied population.
    """
    if not drop_ties:
        return decode(_draw_ranks(rng, population, P))
    draw = min(population, 2 * P + 64)
    while True:
        pr = decode(_draw_ranks(rng, population, draw))
        pr = pr[scores[pr[:, 0]] != scores[pr[:, 1]]]
        if len(pr) >= P or draw == population:
            break
        draw = min(population, 2 * draw)
    if len(pr) < P:
        logger.warning("%s sampler: only %d untied pairs exist, returning fewer than %d",
                       name, len(pr), P)
    return pr[:P]


def naive_sample(scores: Sequence[float], P: int, seed: int, drop_ties: bool = False) -> PairBatch:
    """``P`` distinct unordered pairs drawn uniformly from all ``n(n-1)/2`` pairs."""
    y = np.asarray(scores, dtype=np.float64)
    n = len(y)
    total = n * (n - 1) // 2
    if P > total:
        raise PopulationError(f"requested {P} pairs but only {total} exist for n={n}")
    rng = np.random.default_rng(seed)

    def decode(k):
        i, j = _tri_decode(k, n)
        return np.stack([i, j], axis=1)

    return _finish("naive", _sample_population(rng, total, P, decode, y, drop_ties, "naive"), y, seed)


@dataclass
class AbPartition:
    threshold: float
    group_a: np.ndarray
    group_b: np.ndarray
    n: int = field(init=False)

    def __post_init__(self):
        self.n = len(self.group_a) + len(self.group_b)

    @property
    def n_qualifying(self) -> int:
        a, b = len(self.group_a), len(self.group_b)
        return a * b + a * (a - 1) // 2


def ab_partition(scores: Sequence[float]) -> AbPartition:
    """Group A holds songs strictly above the mean training score, group B the rest."""
    y = np.asarray(scores, dtype=np.float64)
    if y.size == 0:
        raise ValueError("empty training set")
    thr = float(y.mean())
    return AbPartition(threshold=thr, group_a=np.flatnonzero(y > thr), group_b=np.flatnonzero(y <= thr))


def ab_sample(partition: AbPartition, scores: Sequence[float], P: int, seed: int,
              drop_ties: bool = False) -> PairBatch:
    """``P`` distinct pairs, each touching group A, uniform over all such pairs."""
    y = np.asarray(scores, dtype=np.float64)
    A, B = partition.group_a, partition.group_b
    if len(A) == 0:
        raise PopulationError("group A is empty; A/B sampling needs at least one song above the mean")
    total = partition.n_qualifying
    if P > total:
        raise PopulationError(f"requested {P} pairs but only {total} pairs touch group A")
    rng = np.random.default_rng(seed)
    n_ab = len(A) * len(B)

    def decode(k):
        k = np.asarray(k, dtype=np.int64)
        out = np.empty((len(k), 2), dtype=np.int64)
        cross = k < n_ab
        kc = k[cross]
        out[cross, 0] = A[kc // max(len(B), 1)]
        out[cross, 1] = B[kc % max(len(B), 1)] if len(B) else 0
        ia, ja = _tri_decode(k[~cross] - n_ab, len(A))
        out[~cross, 0] = A[ia]
        out[~cross, 1] = A[ja]
        return out

    return _finish("ab", _sample_population(rng, total, P, decode, y, drop_ties, "ab"), y, seed)


def artist_sample(scores: Sequence[float], artists: Sequence, P: int, seed: int,
                  drop_ties: bool = True) -> PairBatch:
    """``P`` distinct same-artist pairs, uniform over all same-artist pairs.

    Ties are dropped by default; with ``drop_ties`` and too few untied pairs
    the batch comes back short (with a warning).
    """
    y = np.asarray(scores, dtype=np.float64)
    artists = np.asarray(artists)
    if len(artists) != len(y):
        raise ValueError("artist labels and scores differ in length")
    _, inverse = np.unique(artists, return_inverse=True)
    order = np.argsort(inverse, kind="stable")
    counts = np.bincount(inverse)
    groups = np.split(order, np.cumsum(counts)[:-1])
    groups = [g for g in groups if len(g) >= 2]
    sizes = np.array([len(g) for g in groups], dtype=np.int64)
    per_group = sizes * (sizes - 1) // 2
    total = int(per_group.sum())
    if total == 0:
        raise PopulationError("no artist has two or more songs; artist sampling is impossible")
    if P > total:
        raise PopulationError(f"requested {P} pairs but only {total} same-artist pairs exist")
    offsets = np.concatenate([[0], np.cumsum(per_group)])
    members = np.concatenate(groups)
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    rng = np.random.default_rng(seed)

    def decode(k):
        k = np.asarray(k, dtype=np.int64)
        g = np.searchsorted(offsets, k, side="right") - 1
        a, b = _tri_decode(k - offsets[g], sizes[g])
        return np.stack([members[starts[g] + a], members[starts[g] + b]], axis=1)

    return _finish("artist", _sample_population(rng, total, P, decode, y, drop_ties, "artist"), y, seed)


def fuse_scores(scores_ab, scores_artist) -> np.ndarray:
    """Elementwise mean of two aligned per-song score vectors."""
    a = np.asarray(scores_ab, dtype=np.float64)
    b = np.asarray(scores_artist, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"score vectors differ in shape: {a.shape} vs {b.shape}")
    return (a + b) / 2.0
