"""Loading experiment datasets from a manifest plus a feature cache, and writing them back."""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Optional

import numpy as np

from .data import eligible_scores, read_manifest, select_top, write_manifest
from .experiment import Dataset
from .features import cache_dir, read_cached, write_cached

logger = logging.getLogger(__name__)

FEATURE_SUFFIX = ".hrmf"


def feature_file(song_id: str, cache: Optional[Path] = None) -> Path:
    return Path(cache or cache_dir()) / f"{song_id}{FEATURE_SUFFIX}"


def _resolve(record, manifest_dir: Path, cache: Optional[Path]) -> Path:
    if record.feature_path:
        p = Path(record.feature_path)
        return p if p.is_absolute() else manifest_dir / p
    return feature_file(record.song_id, cache)


def dataset_from_manifest(path, cache=None, top_k: Optional[int] = 15000,
                          strategy: Optional[str] = None) -> Dataset:
    """Build a :class:`Dataset` from a JSON Lines manifest.

    Songs without enough history are dropped, then the ``top_k`` highest hit
    scores are kept (all eligible songs when ``top_k`` is None). Each song's
    feature matrix comes from its ``feature_path`` (relative paths resolve
    against the manifest directory) or ``<cache>/<song id>.hrmf``. When
    ``strategy`` is given the cached segment tag must match it. Tags are used
    only if every kept song has them.
    """
    path = Path(path)
    records = read_manifest(path)
    if top_k is None:
        keep, _ = eligible_scores(records)
    else:
        keep = select_top(records, k=top_k)
    if not keep:
        raise ValueError(f"{path}: no song has enough play-count history")
    kept = [records[i] for i in keep]
    cache = Path(cache) if cache is not None else None
    mats = []
    for r in kept:
        fpath = _resolve(r, path.parent, cache)
        if not fpath.exists():
            raise FileNotFoundError(f"no cached features for song {r.song_id} at {fpath}")
        sid, tag, mel = read_cached(fpath)
        if sid != r.song_id:
            raise ValueError(f"{fpath} holds features of {sid!r}, expected {r.song_id!r}")
        if strategy is not None and tag != strategy:
            raise ValueError(f"{fpath} was extracted with {tag!r}, expected {strategy!r}")
        mats.append(mel)
    shapes = {m.shape for m in mats}
    if len(shapes) != 1:
        raise ValueError(f"feature matrices differ in shape: {sorted(shapes)}")
    _, scores = eligible_scores(kept)
    have_tags = all(r.tags is not None for r in kept)
    if not have_tags and any(r.tags is not None for r in kept):
        logger.warning("some songs lack tag vectors; tag features disabled for this dataset")
    artists = np.array([r.artist_id for r in kept])
    return Dataset(features=np.stack(mats), hit_scores=scores, artists=artists,
                   tags=np.stack([r.tags for r in kept]) if have_tags else None,
                   song_ids=[r.song_id for r in kept])


def write_corpus(corpus, manifest, cache, strategy: str = "synthetic") -> None:
    """Write a synthetic corpus as a manifest plus one cache file per song."""
    cache = Path(cache)
    cache.mkdir(parents=True, exist_ok=True)
    for r, mel in zip(corpus.records, corpus.features):
        write_cached(feature_file(r.song_id, cache), r.song_id, strategy, mel)
    write_manifest(corpus.records, manifest)
