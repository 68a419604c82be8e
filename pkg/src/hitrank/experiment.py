"""
Cross-validated experiment harness: train model grids per fold, select
hyper-parameters on the validation fold, evaluate on the test fold and
average the fold results into one row per model.

Hyper-parameter selection only ever sees a :class:`DataView` restricted to
the training and validation songs of the current iteration; the test songs
are read after the selected model is frozen.
"""
from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import metrics
from .data import SplitPlan, SynthParams, synth_longtail, tenfold_split
from .model import (HybridRater, LossWeights, OptimizerConfig, RaterConfig, TrainingDiverged,
                    train)
from .sampling import ab_partition, ab_sample, artist_sample, fuse_scores, naive_sample

logger = logging.getLogger(__name__)

SCHEMA_PATH = Path(__file__).with_name("report.schema.json")
VARIANTS = ("simple", "siamese")
SAMPLERS = ("naive", "ab", "artist", "ab+artist")
FEATURES = ("audio", "audio+tag")
SEGMENTS = ("mid30", "highlight")
# results-table grouping: network type, then sampling method, then segment, then features
_SAMPLER_ORDER = (None, "naive", "artist", "ab", "ab+artist")


class ConfigError(ValueError):
    """The experiment configuration is invalid."""


class LeakageError(RuntimeError):
    """A component tried to read songs it is not allowed to see."""


# ------------------------------------------------------------------ datasets


@dataclass
class Dataset:
    features: np.ndarray            # (n, bins, frames)
    hit_scores: np.ndarray          # (n,)
    artists: np.ndarray             # (n,)
    tags: Optional[np.ndarray] = None
    song_ids: Optional[List[str]] = None

    def __len__(self) -> int:
        return len(self.hit_scores)

    @classmethod
    def from_synthetic(cls, corpus) -> "Dataset":
        return cls(features=corpus.features, hit_scores=corpus.hit_scores,
                   artists=corpus.artist_index, tags=corpus.tags,
                   song_ids=[r.song_id for r in corpus.records])


@dataclass
class Split:
    features: np.ndarray
    hit_scores: np.ndarray
    artists: np.ndarray
    tags: Optional[np.ndarray]


class DataView:
    """Read access to a dataset limited to an allowed set of song indices."""

    def __init__(self, dataset: Dataset, allowed: Sequence[int]):
        self._dataset = dataset
        self._allowed = np.zeros(len(dataset), dtype=bool)
        self._allowed[np.asarray(allowed, dtype=np.int64)] = True

    def take(self, ids) -> Split:
        ids = np.asarray(ids, dtype=np.int64)
        if not self._allowed[ids].all():
            bad = ids[~self._allowed[ids]]
            raise LeakageError(f"{len(bad)} requested songs are outside this view (e.g. {bad[0]})")
        d = self._dataset
        return Split(features=d.features[ids], hit_scores=d.hit_scores[ids],
                     artists=d.artists[ids], tags=None if d.tags is None else d.tags[ids])


# ------------------------------------------------------------------- configs


@dataclass
class ModelSpec:
    """One cell of the results table."""

    label: str
    variant: str = "siamese"
    sampler: Optional[str] = "ab"
    features: str = "audio"
    segment: str = "highlight"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.variant == "simple":
            self.sampler = None
        elif self.sampler not in SAMPLERS:
            raise ConfigError(f"sampler must be one of {SAMPLERS}, got {self.sampler!r}")
        if self.features not in FEATURES:
            raise ConfigError(f"features must be one of {FEATURES}, got {self.features!r}")
        if self.segment not in SEGMENTS:
            raise ConfigError(f"segment must be one of {SEGMENTS}, got {self.segment!r}")

    @property
    def uses_tags(self) -> bool:
        return self.features == "audio+tag"


@dataclass
class Grid:
    margins: List[float] = field(default_factory=lambda: [0.01, 0.05, 0.1])
    ws: List[float] = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    mus: List[float] = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])

    def cells(self, spec: ModelSpec):
        mus = [m for m in self.mus] if spec.uses_tags else [0.0]
        if spec.variant == "simple":
            return [(None, 0.0, mu) for mu in mus]
        return list(itertools.product(self.margins, self.ws, mus))


@dataclass
class ExperimentConfig:
    models: List[ModelSpec]
    synthetic: Optional[dict] = None          # kwargs for synth_longtail / SynthParams
    manifest: Optional[str] = None
    cache: Optional[str] = None               # feature cache; $HITRANK_CACHE when omitted
    top_k: Optional[int] = 15000              # manifest songs kept by hit score
    grid: Grid = field(default_factory=Grid)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    rater: Optional[dict] = None              # RaterConfig fields; compact rater when omitted
    pairs_per_epoch: int = 4000
    resample_pairs: bool = False
    drop_ties: bool = False
    selection_metric: str = "kendall"
    fraction: float = 0.10
    folds: Optional[List[int]] = None         # subset of iterations to run; all by default
    n_folds: int = 10
    seed: int = 0

    def __post_init__(self):
        if not self.models:
            raise ConfigError("no models configured")
        self.models = [m if isinstance(m, ModelSpec) else ModelSpec(**m) for m in self.models]
        if isinstance(self.grid, dict):
            self.grid = Grid(**self.grid)
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimizerConfig(**self.optimizer)
        if (self.synthetic is None) == (self.manifest is None):
            raise ConfigError("configure exactly one of 'synthetic' or 'manifest'")
        if self.selection_metric not in ("kendall", "spearman", "ndcg"):
            raise ConfigError(f"unknown selection metric {self.selection_metric!r}")
        for value in self.grid.ws + self.grid.mus:
            if not 0.0 <= value <= 1.0:
                raise ConfigError("w and mu grid values must lie in [0, 1]")
        if any(m <= 0 for m in self.grid.margins):
            raise ConfigError("margins must be positive")
        labels = [m.label for m in self.models]
        if len(set(labels)) != len(labels):
            raise ConfigError("model labels must be unique")

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**obj)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return asdict(self)


# -------------------------------------------------------------------- report


@dataclass
class ReportRow:
    label: str
    variant: str
    sampler: Optional[str]
    features: str
    segment: str
    ndcg: float
    kendall: float
    spearman: float
    n_folds: int
    status: str = "ok"
    message: str = ""
    folds: List[dict] = field(default_factory=list)

    FIELDS = ("label", "variant", "sampler", "features", "segment", "ndcg", "kendall",
              "spearman", "n_folds", "status", "message")

    def summary(self) -> dict:
        return {k: getattr(self, k) for k in self.FIELDS}


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.4f}"
    return "-" if v is None else str(v)


def table_order(row) -> tuple:
    """Sort key grouping rows like the results table."""
    return (VARIANTS.index(row.variant), _SAMPLER_ORDER.index(row.sampler),
            SEGMENTS.index(row.segment), FEATURES.index(row.features))


def report(rows: Sequence[ReportRow], fmt: str = "text") -> str:
    """Render rows as an aligned text table, CSV or JSON."""
    if not rows:
        raise ValueError("nothing to report")
    if fmt == "json":
        return json.dumps(_nan_to_null([asdict(r) for r in rows]), indent=2, sort_keys=True,
                          allow_nan=False)
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(ReportRow.FIELDS)
        for r in rows:
            writer.writerow(["" if v is None else repr(v) if isinstance(v, float) else v
                             for v in (getattr(r, k) for k in ReportRow.FIELDS)])
        return buf.getvalue()
    if fmt == "text":
        head = ("", "network", "sampling", "feature", "nDCG@10%", "Kendall@10%", "Spearman@10%")
        body = [(r.label, r.variant, r.sampler or "-", f"{r.features} ({r.segment})",
                 _fmt(r.ndcg), _fmt(r.kendall), _fmt(r.spearman))
                + (("FAILED: " + r.message,) if r.status != "ok" else ()) for r in rows]
        widths = [max(len(str(x[i])) for x in [head] + [b[:7] for b in body]) for i in range(7)]
        lines = ["  ".join(str(c).ljust(w) for c, w in zip(head, widths)).rstrip()]
        lines.append("  ".join("-" * w for w in widths))
        for b in body:
            lines.append("  ".join(str(c).ljust(w) for c, w in zip(b, widths)).rstrip()
                         + ("  " + b[7] if len(b) > 7 else ""))
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown report format {fmt!r}")


def _nan_to_null(obj):
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {k: _nan_to_null(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_nan_to_null(v) for v in obj]
    return obj


def rows_from_json(text: str) -> List[ReportRow]:
    """Inverse of ``report(rows, "json")``; null metrics come back as ``nan``."""
    out = []
    for obj in json.loads(text):
        for k in ("ndcg", "kendall", "spearman"):
            if obj[k] is None:
                obj[k] = math.nan
        for f in obj["folds"]:
            for k in ("ndcg", "kendall", "spearman"):
                if f[k] is None:
                    f[k] = math.nan
        out.append(ReportRow(**obj))
    return out


def rows_from_csv(text: str) -> List[dict]:
    out = []
    for rec in csv.DictReader(io.StringIO(text)):
        row = dict(rec)
        for k in ("ndcg", "kendall", "spearman"):
            row[k] = float(row[k])
        row["n_folds"] = int(row["n_folds"])
        row["sampler"] = row["sampler"] or None
        out.append(row)
    return out


def load_schema() -> dict:
    return json.loads(SCHEMA_PATH.read_text())


# ---------------------------------------------------------------- the runner


def load_dataset(config: ExperimentConfig) -> Dataset:
    if config.synthetic is not None:
        opts = dict(config.synthetic)
        params = SynthParams(**opts.pop("params", {}))
        corpus = synth_longtail(params=params, **opts)
        return Dataset.from_synthetic(corpus)
    from .storage import dataset_from_manifest
    return dataset_from_manifest(config.manifest, cache=config.cache, top_k=config.top_k)


def _rater_config(config: ExperimentConfig, dataset: Dataset) -> RaterConfig:
    _, bins, frames = dataset.features.shape
    if config.rater:
        return RaterConfig(**config.rater)
    if (bins, frames) == (128, 321):
        return RaterConfig()
    return RaterConfig.compact(bins, frames)


def _sampler(name: str, split: Split, P: int, seed: int, drop_ties: bool) -> np.ndarray:
    y = split.hit_scores
    if name == "naive":
        return naive_sample(y, P, seed, drop_ties=drop_ties).pairs
    if name == "ab":
        return ab_sample(ab_partition(y), y, P, seed, drop_ties=drop_ties).pairs
    if name == "artist":
        return artist_sample(y, split.artists, P, seed).pairs
    raise ConfigError(f"sampler {name!r} cannot draw pairs directly")


def fit_model(spec: ModelSpec, sampler: Optional[str], train_split: Split, margin, w, mu,
              config: ExperimentConfig, rater_cfg: RaterConfig, seed: int) -> HybridRater:
    """Train one rater on ``train_split`` with fixed hyper-parameters."""
    rater = HybridRater.build(rater_cfg, mu=mu, seed=seed)
    tags = train_split.tags if spec.uses_tags else None
    if spec.uses_tags and tags is None:
        raise ConfigError("tag features requested but the dataset has no tags")
    if spec.variant == "simple":
        train(rater, train_split.features, train_split.hit_scores, tags,
              optimizer=config.optimizer, seed=seed)
        return rater
    n = len(train_split.hit_scores)
    P = min(config.pairs_per_epoch, n * (n - 1) // 2)

    def draw(epoch: int) -> np.ndarray:
        s = seed * 1000 + (epoch if config.resample_pairs else 0)
        return _sampler(sampler, train_split, P, s, config.drop_ties)

    fixed = None if config.resample_pairs else draw(0)
    train(rater, train_split.features, train_split.hit_scores, tags,
          weights=LossWeights(margin=margin, w=w), optimizer=config.optimizer,
          pairs=fixed, pair_sampler=draw if config.resample_pairs else None, seed=seed)
    return rater


def _score(metric: str, y, pred, fraction) -> float:
    fn = {"kendall": metrics.kendall_tau, "spearman": metrics.spearman_rho,
          "ndcg": metrics.ndcg}[metric]
    v = fn(y, pred, fraction)
    return -math.inf if math.isnan(v) else v


def _predict(rater: HybridRater, split: Split, uses_tags: bool) -> np.ndarray:
    return rater.predict(split.features, split.tags if uses_tags else None)


def select_model(spec: ModelSpec, view: DataView, train_ids, val_ids, config: ExperimentConfig,
                 rater_cfg: RaterConfig, seed: int):
    """Grid search on the validation fold; returns frozen rater(s) and the chosen cell.

    ``view`` only exposes training and validation songs.
    """
    tr, va = view.take(train_ids), view.take(val_ids)
    samplers = ["ab", "artist"] if spec.sampler == "ab+artist" else [spec.sampler]
    chosen = []
    for sampler in samplers:
        best = None
        for margin, w, mu in config.grid.cells(spec):
            rater = fit_model(spec, sampler, tr, margin or 0.1, w, mu, config, rater_cfg, seed)
            val_score = _score(config.selection_metric, va.hit_scores,
                               _predict(rater, va, spec.uses_tags), config.fraction)
            if best is None or val_score > best[0]:
                best = (val_score, rater, {"margin": margin, "w": w, "mu": mu})
        chosen.append(best)
    return [c[1] for c in chosen], [c[2] for c in chosen]


def _fold_seed(config: ExperimentConfig, t: int) -> int:
    return config.seed * 100003 + t * 101 + 7


def train_on_fold(spec: ModelSpec, dataset: Dataset, config: ExperimentConfig, t: int,
                  rater_cfg: Optional[RaterConfig] = None, plan: Optional[SplitPlan] = None):
    """Select and train ``spec`` for iteration ``t`` without any access to its test songs."""
    plan = plan or tenfold_split(np.arange(len(dataset)), config.seed, config.n_folds)
    rater_cfg = rater_cfg or _rater_config(config, dataset)
    it = plan.iteration(t)
    selection_view = DataView(dataset, np.concatenate([it.train, it.validation]))
    return select_model(spec, selection_view, it.train, it.validation, config, rater_cfg,
                        _fold_seed(config, t))


def run_fold(spec: ModelSpec, dataset: Dataset, plan: SplitPlan, t: int, config: ExperimentConfig,
             rater_cfg: RaterConfig) -> metrics.MetricReport:
    raters, params = train_on_fold(spec, dataset, config, t, rater_cfg, plan)
    it = plan.iteration(t)
    test = DataView(dataset, it.test).take(it.test)
    preds = [_predict(r, test, spec.uses_tags) for r in raters]
    pred = preds[0] if len(preds) == 1 else fuse_scores(preds[0], preds[1])
    chosen = params[0]
    return metrics.evaluate(test.hit_scores, pred, config.fraction, model=spec.label,
                            sampler=spec.sampler, features=spec.features, fold=t,
                            margin=chosen["margin"], w=chosen["w"], mu=chosen["mu"],
                            extra={"selected": params} if len(params) > 1 else {})


def run(config: ExperimentConfig, dataset: Optional[Dataset] = None,
        on_fold=None) -> List[ReportRow]:
    """Full cross-validated evaluation of every configured model.

    Returns one row per model, in results-table order. A model whose training
    diverges gets a ``failed`` row and the remaining models still run.
    """
    dataset = dataset if dataset is not None else load_dataset(config)
    rater_cfg = _rater_config(config, dataset)
    plan = tenfold_split(np.arange(len(dataset)), config.seed, config.n_folds)
    folds = config.folds if config.folds is not None else list(range(config.n_folds))
    rows = []
    for spec in config.models:
        reports: List[metrics.MetricReport] = []
        status, message = "ok", ""
        t0 = time.perf_counter()
        for t in folds:
            try:
                rep = run_fold(spec, dataset, plan, t, config, rater_cfg)
            except TrainingDiverged as exc:
                status, message = "failed", f"fold {t}: {exc}"
                logger.error("model %s failed: %s", spec.label, message)
                break
            reports.append(rep)
            if on_fold is not None:
                on_fold(rep)
        logger.info("model %s: %d folds in %.1fs", spec.label, len(reports), time.perf_counter() - t0)
        ok = status == "ok"
        rows.append(ReportRow(
            label=spec.label, variant=spec.variant, sampler=spec.sampler, features=spec.features,
            segment=spec.segment,
            ndcg=float(np.mean([r.ndcg for r in reports])) if ok else math.nan,
            kendall=float(np.mean([r.kendall for r in reports])) if ok else math.nan,
            spearman=float(np.mean([r.spearman for r in reports])) if ok else math.nan,
            n_folds=len(reports), status=status, message=message,
            folds=[asdict(r) for r in reports]))
    return sorted(rows, key=table_order)
