"""
Song records, hit scores, top-k selection, 10-fold splitting and a
synthetic long-tail corpus generator.

Day-indexing convention: ``playcounts[0]`` is the normalized play-count on
the release day and ``playcounts[d]`` the value ``d`` days later, so the hit
score is ``playcounts[60]``.
"""
from __future__ import annotations

import datetime as _dt
import json
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

HIT_DAY = 60
N_TAGS = 50


class InsufficientHistory(ValueError):
    """The play-count series does not reach the hit-score day."""


@dataclass
class SongRecord:
    song_id: str
    artist_id: str
    release_date: _dt.date
    playcounts: np.ndarray
    tags: Optional[np.ndarray] = None
    feature_path: Optional[str] = None

    def __post_init__(self):
        self.playcounts = np.asarray(self.playcounts, dtype=np.float64)
        if self.playcounts.ndim != 1:
            raise ValueError("playcounts must be a 1-D series")
        if np.any(self.playcounts < 0) or np.any(self.playcounts > 1):
            raise ValueError(f"{self.song_id}: play-count shares must lie in [0, 1]")
        if self.tags is not None:
            self.tags = np.asarray(self.tags, dtype=np.float64)
            if self.tags.shape != (N_TAGS,):
                raise ValueError(f"{self.song_id}: tag vector must have {N_TAGS} entries")
            if np.any(self.tags < 0) or np.any(self.tags > 1):
                raise ValueError(f"{self.song_id}: tag activations must lie in [0, 1]")
        if isinstance(self.release_date, str):
            self.release_date = _dt.date.fromisoformat(self.release_date)

    def to_json(self) -> str:
        obj = {
            "id": self.song_id,
            "artist_id": self.artist_id,
            "release_date": self.release_date.isoformat(),
            "playcounts": self.playcounts.tolist(),
        }
        if self.tags is not None:
            obj["tags"] = self.tags.tolist()
        if self.feature_path is not None:
            obj["feature_path"] = self.feature_path
        return json.dumps(obj)

    @classmethod
    def from_json(cls, line: str) -> "SongRecord":
        obj = json.loads(line)
        return cls(
            song_id=str(obj["id"]),
            artist_id=str(obj["artist_id"]),
            release_date=_dt.date.fromisoformat(obj["release_date"]),
            playcounts=np.asarray(obj["playcounts"], dtype=np.float64),
            tags=None if obj.get("tags") is None else np.asarray(obj["tags"], dtype=np.float64),
            feature_path=obj.get("feature_path"),
        )


def write_manifest(records: Iterable[SongRecord], path) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(r.to_json())
            f.write("\n")


def read_manifest(path) -> List[SongRecord]:
    with open(path) as f:
        return [SongRecord.from_json(line) for line in f if line.strip()]


def check_daily_totals(records: Sequence[SongRecord], tol: float = 1e-6) -> float:
    """Largest per-calendar-day sum of shares; raises if it exceeds ``1 + tol``."""
    totals: Dict[int, float] = {}
    for r in records:
        start = r.release_date.toordinal()
        for d, v in enumerate(r.playcounts):
            totals[start + d] = totals.get(start + d, 0.0) + float(v)
    worst = max(totals.values()) if totals else 0.0
    if worst > 1 + tol:
        raise ValueError(f"daily shares sum to {worst:.6g} > 1")
    return worst


def hit_score(record: SongRecord, day: int = HIT_DAY) -> float:
    """Normalized play-count ``day`` days after release (release day is day 0)."""
    if len(record.playcounts) <= day:
        raise InsufficientHistory(
            f"{record.song_id}: series has {len(record.playcounts)} days, needs {day + 1}")
    return float(record.playcounts[day])


def eligible_scores(records: Sequence[SongRecord], day: int = HIT_DAY) -> Tuple[List[int], np.ndarray]:
    """Indices of records with enough history and their hit scores; others are logged and skipped."""
    keep, scores = [], []
    for i, r in enumerate(records):
        try:
            scores.append(hit_score(r, day))
        except InsufficientHistory as exc:
            logger.info("excluding song: %s", exc)
            continue
        keep.append(i)
    return keep, np.asarray(scores, dtype=np.float64)


def select_top(records: Sequence[SongRecord], k: int = 15000, day: int = HIT_DAY) -> List[int]:
    """Indices of the ``k`` highest hit scores, ties broken by song id then position."""
    keep, scores = eligible_scores(records, day)
    if len(keep) < k:
        logger.warning("only %d eligible songs, fewer than the requested %d", len(keep), k)
        k = len(keep)
    ids = np.array([records[i].song_id for i in keep])
    order = np.lexsort((np.arange(len(keep)), ids, -scores))
    return sorted(keep[i] for i in order[:k])


@dataclass(frozen=True)
class SplitIteration:
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray


@dataclass
class SplitPlan:
    """Ten folds; iteration ``t`` tests on fold ``t`` and validates on fold ``t+1 mod 10``."""

    folds: List[np.ndarray]
    seed: int

    @property
    def n_folds(self) -> int:
        return len(self.folds)

    def iteration(self, t: int) -> SplitIteration:
        k = self.n_folds
        test = self.folds[t % k]
        val = self.folds[(t + 1) % k]
        train = np.concatenate([self.folds[i] for i in range(k) if i not in (t % k, (t + 1) % k)])
        return SplitIteration(train=np.sort(train), validation=np.sort(val), test=np.sort(test))

    def __iter__(self) -> Iterator[SplitIteration]:
        return (self.iteration(t) for t in range(self.n_folds))


def tenfold_split(selection: Sequence[int], seed: int, n_folds: int = 10) -> SplitPlan:
    """Shuffle under ``seed`` and cut into ``n_folds`` folds.

    When the selection size is not a multiple of ``n_folds`` the remainder is
    trimmed (the last ``len % n_folds`` shuffled songs are dropped) so every
    fold has equal size.
    """
    sel = np.asarray(selection)
    if len(sel) < n_folds:
        raise ValueError(f"need at least {n_folds} songs to split, got {len(sel)}")
    rng = np.random.default_rng(seed)
    perm = sel[rng.permutation(len(sel))]
    size = len(sel) // n_folds
    if len(sel) % n_folds:
        logger.info("trimming %d songs so folds are equal", len(sel) % n_folds)
    folds = [np.sort(perm[i * size:(i + 1) * size]) for i in range(n_folds)]
    return SplitPlan(folds=folds, seed=seed)


# ------------------------------------------------------------------ synthetic


@dataclass
class SynthParams:
    """Generator knobs. The defaults put about 87% of songs below the mean hit score."""

    latent_dim: int = 8
    n_bins: int = 16
    n_frames: int = 32
    artist_share: float = 0.5     # fraction of latent variance shared within an artist
    steepness: float = 4.0        # slope of the softplus knee
    knee: float = 0.5             # latent score where popularity takes off
    background: float = 0.7       # scale of niche listening below the knee
    tail_weight: float = 2.0      # influence of the tail direction on niche listening
    tail_jitter: float = 0.5      # unexplained variation of niche listening
    tilt: float = 1.5             # exponent that stretches the head
    head_weight: float = 1.0      # log-scale influence of a second direction on head songs
    signal: float = 1.0           # 0 gives features carrying no latent information
    audio_view_noise: float = 0.6 # per-song latent jitter seen only by the audio rendering
    audio_cell_noise: float = 0.5
    tag_view_noise: float = 0.6
    tag_noise: float = 0.05
    history_days: int = 90


@dataclass
class SyntheticCorpus:
    records: List[SongRecord]
    features: np.ndarray          # (n, n_bins, n_frames) mel-like matrices
    tags: np.ndarray              # (n, 50)
    hit_scores: np.ndarray
    latents: np.ndarray           # (n, latent_dim)
    hit_map: np.ndarray           # (latent_dim,) direction deciding tail vs head
    head_map: np.ndarray          # (latent_dim,) direction ordering head songs
    tail_map: np.ndarray          # (latent_dim,) direction ordering niche listening
    artist_index: np.ndarray      # (n,) integer artist labels
    params: SynthParams = field(default_factory=SynthParams)

    def __len__(self) -> int:
        return len(self.records)

    def oracle_scores(self) -> np.ndarray:
        """Noiseless popularity from the planted latent maps."""
        return _popularity(self.latents, self.hit_map, self.head_map, self.tail_map, self.params)

    def below_mean_fraction(self) -> float:
        return float(np.mean(self.hit_scores < self.hit_scores.mean()))


def _softplus(x):
    return np.logaddexp(0.0, x)


def _popularity(z, hit_map, head_map, tail_map, p: SynthParams, jitter=0.0) -> np.ndarray:
    # the knee decides who escapes the tail; the head direction orders the escapees
    lift = p.steepness * (z @ hit_map - p.knee)
    head = _softplus(lift) * np.exp(p.head_weight * (z @ head_map))
    # background (niche) listening ordered by its own direction, gated off past the knee
    gate = 1.0 / (1.0 + np.exp(lift))
    background = p.background * gate * _softplus(p.tail_weight * (z @ tail_map) + jitter)
    return head + background


def _burst_shape(rng: np.random.Generator, n: int, days: int) -> np.ndarray:
    """Per-song daily profile equal to 1 on the hit day with an early burst and decay."""
    t = np.arange(days)[None, :]
    peak = rng.uniform(1.0, 3.0, size=(n, 1))
    tau = rng.uniform(5.0, 30.0, size=(n, 1))
    prof = 1.0 + (peak - 1.0) * np.exp(-t / tau)
    prof /= prof[:, [HIT_DAY]]
    return prof


def synth_longtail(n: int = 15000, n_artists: int = 2000, latent_dim: int = 8, seed: int = 0,
                   params: Optional[SynthParams] = None) -> SyntheticCorpus:
    """Generate a long-tail corpus with planted latent popularity directions.

    Latents mix a per-artist offset with a per-song draw. Popularity is a
    softplus knee along ``hit_map`` (scaled by ``head_map`` past the knee)
    plus a jittered niche term along ``tail_map`` that fades out past the
    knee. It is raised to ``tilt`` and normalized to market shares. Audio
    features render a noisy copy of the latents as smooth spectro-temporal
    patterns plus cell noise; tags squash a separately noised random
    projection. ``signal = 0`` leaves features and tags pure noise.
    """
    if n < 100:
        raise ValueError("synthetic corpus needs n >= 100")
    p = replace(params or SynthParams(), latent_dim=latent_dim)
    rng = np.random.default_rng(seed)
    # structural pieces come from a fixed stream so every seed shares the same "world"
    world = np.random.default_rng(12345 + latent_dim)
    hit_map = world.normal(size=latent_dim)
    hit_map /= np.linalg.norm(hit_map)
    head_map = world.normal(size=latent_dim)
    head_map -= (head_map @ hit_map) * hit_map
    head_map /= np.linalg.norm(head_map)
    tail_map = world.normal(size=latent_dim)
    tail_map -= (tail_map @ hit_map) * hit_map + (tail_map @ head_map) * head_map
    tail_map /= np.linalg.norm(tail_map)
    freq_centres = world.uniform(0, p.n_bins - 1, size=latent_dim)
    freq_widths = world.uniform(1.0, 3.0, size=latent_dim)
    bins = np.arange(p.n_bins)[None, :]
    spectral = np.exp(-0.5 * ((bins - freq_centres[:, None]) / freq_widths[:, None]) ** 2)
    frames = np.arange(p.n_frames)[None, :]
    rates = world.uniform(0.02, 0.12, size=(latent_dim, 1))
    phases = world.uniform(0, 2 * np.pi, size=(latent_dim, 1))
    temporal = 1.0 + 0.5 * np.cos(2 * np.pi * rates * frames + phases)
    patterns = spectral[:, :, None] * temporal[:, None, :]         # (d, bins, frames)
    tag_proj = world.normal(size=(latent_dim, N_TAGS)) / np.sqrt(latent_dim)
    tag_bias = world.normal(scale=0.5, size=N_TAGS)

    artist_index = rng.integers(0, n_artists, size=n)
    offsets = rng.normal(size=(n_artists, latent_dim))
    own = rng.normal(size=(n, latent_dim))
    z = np.sqrt(p.artist_share) * offsets[artist_index] + np.sqrt(1 - p.artist_share) * own

    jitter = p.tail_jitter * rng.normal(size=n)
    raw = _popularity(z, hit_map, head_map, tail_map, p, jitter)
    raw = raw ** p.tilt
    prof = _burst_shape(rng, n, p.history_days)
    # shares scaled so that even the burst peaks of all songs on one day sum below 1
    scale = 1.0 / (raw * prof.max(axis=1)).sum()
    hit = raw * scale
    series = np.clip(hit[:, None] * prof, 0.0, 1.0)
    series[:, HIT_DAY] = hit

    z_audio = p.signal * (z + p.audio_view_noise * rng.normal(size=z.shape))
    feats = np.einsum("nd,dbf->nbf", z_audio, patterns)
    feats += p.audio_cell_noise * rng.normal(size=feats.shape)

    z_tag = p.signal * (z + p.tag_view_noise * rng.normal(size=z.shape))
    logits = z_tag @ tag_proj + tag_bias + p.tag_noise * rng.normal(size=(n, N_TAGS))
    tags = 1.0 / (1.0 + np.exp(-logits))

    base_day = _dt.date(2016, 1, 1).toordinal()
    release = base_day + rng.integers(0, 365, size=n)
    records = [
        SongRecord(song_id=f"s{i:06d}", artist_id=f"a{artist_index[i]:05d}",
                   release_date=_dt.date.fromordinal(int(release[i])),
                   playcounts=series[i], tags=tags[i])
        for i in range(n)
    ]
    return SyntheticCorpus(records=records, features=feats, tags=tags, hit_scores=hit,
                           latents=z, hit_map=hit_map, head_map=head_map, tail_map=tail_map, artist_index=artist_index, params=p)
