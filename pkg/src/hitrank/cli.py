"""
Command-line entry point.

    hitrank gen       write a synthetic manifest and its feature cache
    hitrank features  turn WAV files into cached log-mel matrices
    hitrank train     select and train one model on one fold, save a checkpoint
    hitrank eval      cross-validate every configured model, write per-fold reports
    hitrank table     render a saved report as text, CSV or JSON

Exit status: 0 on success, 2 for a bad configuration, 3 when a run fails.
The feature cache directory defaults to ``$HITRANK_CACHE``.
"""
from __future__ import annotations

import functools
import json
import logging
import sys
from pathlib import Path

import click
import yaml

from . import experiment as ex
from .data import SynthParams, synth_longtail
from .features import CACHE_ENV, ClipTooShort, SampleRateMismatch, cache_dir, extract, read_wav, write_cached
from .model import TrainingDiverged
from .storage import feature_file, write_corpus

EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _guarded(fn):
    """Map configuration problems to exit 2 and run failures to exit 3."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.exceptions.Exit:
            raise
        except click.ClickException:
            raise
        except (ex.ConfigError, yaml.YAMLError) as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        except (TrainingDiverged, ex.LeakageError, OSError, ValueError, RuntimeError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_RUNTIME)

    return wrapper


def load_config(path, overrides: dict) -> ex.ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ex.ConfigError(f"cannot read config file: {exc}") from exc
    obj = yaml.safe_load(text)  # YAML is a superset of JSON, so both formats load
    if not isinstance(obj, dict):
        raise ex.ConfigError("config file must hold a mapping")
    opt = dict(obj.get("optimizer") or {})
    for key in ("epochs", "lr", "batch_size"):
        if overrides.get(key) is not None:
            opt[key] = overrides[key]
    if opt:
        obj["optimizer"] = opt
    for key in ("seed", "pairs_per_epoch", "resample_pairs", "selection_metric", "cache"):
        if overrides.get(key) is not None:
            obj[key] = overrides[key]
    if overrides.get("manifest") is not None:
        obj["manifest"] = overrides["manifest"]
        obj.pop("synthetic", None)
    if overrides.get("folds"):
        obj["folds"] = [int(t) for t in overrides["folds"].split(",")]
    if overrides.get("models"):
        wanted = overrides["models"].split(",")
        models = [m for m in obj.get("models", []) if m.get("label") in wanted]
        missing = set(wanted) - {m.get("label") for m in models}
        if missing:
            raise ex.ConfigError(f"no configured model labelled {sorted(missing)}")
        obj["models"] = models
    return ex.ExperimentConfig.from_dict(obj)


def config_options(fn):
    opts = [
        click.option("--config", "config_path", required=True, type=click.Path(),
                     help="YAML or JSON experiment configuration."),
        click.option("--seed", type=int, help="Override the experiment seed."),
        click.option("--epochs", type=int, help="Override training epochs."),
        click.option("--lr", type=float, help="Override the learning rate."),
        click.option("--batch-size", type=int, help="Override the minibatch size."),
        click.option("--pairs-per-epoch", type=int, help="Override the number of sampled pairs."),
        click.option("--resample-pairs/--fixed-pairs", default=None,
                     help="Draw fresh pairs every epoch, or one set per run."),
        click.option("--selection-metric", type=click.Choice(["kendall", "spearman", "ndcg"])),
        click.option("--manifest", type=click.Path(), help="Use this manifest instead of synthetic data."),
        click.option("--cache", type=click.Path(), help=f"Feature cache directory (default ${CACHE_ENV})."),
        click.option("--folds", help="Comma-separated fold iterations to run, e.g. 0,1,2."),
        click.option("--models", help="Comma-separated model labels to keep."),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def _split_overrides(kwargs):
    path = kwargs.pop("config_path")
    return path, kwargs


@click.group()
@click.option("-v", "--verbose", count=True, help="More logging (repeatable).")
def main(verbose):
    """Pairwise hit-score ranking experiments."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--out", "manifest", required=True, type=click.Path(), help="Manifest to write (JSON Lines).")
@click.option("--cache", type=click.Path(), help=f"Feature cache directory (default ${CACHE_ENV}).")
@click.option("--n", "n_songs", default=15000, show_default=True, type=int)
@click.option("--n-artists", default=2000, show_default=True, type=int)
@click.option("--latent-dim", default=8, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--signal", type=float, help="Feature signal weight (0 gives noise-only features).")
@_guarded
def gen(manifest, cache, n_songs, n_artists, latent_dim, seed, signal):
    """Generate a synthetic long-tail corpus."""
    params = SynthParams() if signal is None else SynthParams(signal=signal)
    corpus = synth_longtail(n=n_songs, n_artists=n_artists, latent_dim=latent_dim, seed=seed,
                            params=params)
    target = Path(cache) if cache else cache_dir()
    write_corpus(corpus, manifest, target)
    click.echo(f"wrote {len(corpus)} songs to {manifest}; features in {target}; "
               f"{100 * corpus.below_mean_fraction():.1f}% below the mean hit score")


@main.command()
@click.argument("audio", nargs=-1, type=click.Path(exists=True))
@click.option("--strategy", type=click.Choice(["mid30", "highlight"]), default="mid30", show_default=True)
@click.option("--cache", type=click.Path(), help=f"Feature cache directory (default ${CACHE_ENV}).")
@_guarded
def features(audio, strategy, cache):
    """Extract 128-bin log-mel matrices from 16-bit mono WAV files (song id = file stem)."""
    if not audio:
        raise click.UsageError("give at least one WAV file or directory")
    files = []
    for a in map(Path, audio):
        files.extend(sorted(a.glob("*.wav")) if a.is_dir() else [a])
    target = Path(cache) if cache else cache_dir()
    target.mkdir(parents=True, exist_ok=True)
    done = 0
    for f in files:
        try:
            mel = extract(read_wav(f), strategy)
        except (ClipTooShort, SampleRateMismatch, ValueError) as exc:
            click.echo(f"skipping {f}: {exc}", err=True)
            continue
        write_cached(feature_file(f.stem, target), f.stem, strategy, mel)
        done += 1
    click.echo(f"cached {done} of {len(files)} clips in {target}")
    if files and done == 0:
        sys.exit(EXIT_RUNTIME)


@main.command("train")
@config_options
@click.option("--model", "label", help="Label of the model to train (default: the first).")
@click.option("--fold", default=0, show_default=True, type=int, help="Fold iteration.")
@click.option("--out", required=True, type=click.Path(), help="Checkpoint file to write.")
@_guarded
def train_cmd(label, fold, out, **kwargs):
    """Grid-search one model on a fold's validation split and save the selected rater."""
    path, overrides = _split_overrides(kwargs)
    config = load_config(path, overrides)
    specs = [m for m in config.models if label in (None, m.label)]
    if not specs:
        raise ex.ConfigError(f"no configured model labelled {label!r}")
    spec = specs[0]
    if not 0 <= fold < config.n_folds:
        raise ex.ConfigError(f"fold must lie in [0, {config.n_folds})")
    dataset = ex.load_dataset(config)
    raters, chosen = ex.train_on_fold(spec, dataset, config, fold)
    out = Path(out)
    paths = [out] if len(raters) == 1 else [out.with_name(f"{out.stem}-{s}{out.suffix}")
                                             for s in ("ab", "artist")]
    for r, p in zip(raters, paths):
        r.save(p)
    click.echo(json.dumps({"model": spec.label, "fold": fold, "checkpoints": [str(p) for p in paths],
                           "selected": chosen}))


@main.command("eval")
@config_options
@click.option("--out-dir", required=True, type=click.Path(), help="Directory for reports.")
@click.option("--format", "fmt", type=click.Choice(["text", "csv", "json"]), default="text",
              show_default=True, help="Format of the table printed at the end.")
@_guarded
def eval_cmd(out_dir, fmt, **kwargs):
    """Cross-validate every configured model and write a results table."""
    path, overrides = _split_overrides(kwargs)
    config = load_config(path, overrides)
    out = Path(out_dir)
    (out / "folds").mkdir(parents=True, exist_ok=True)

    def save_fold(rep):
        name = f"{rep.model}-fold{rep.fold}.json"
        (out / "folds" / name).write_text(rep.to_json() + "\n")

    rows = ex.run(config, on_fold=save_fold)
    (out / "report.json").write_text(ex.report(rows, "json"))
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    click.echo(ex.report(rows, fmt), nl=False)
    if any(r.status != "ok" for r in rows):
        sys.exit(EXIT_RUNTIME)


@main.command()
@click.argument("report_file", type=click.Path(exists=True))
@click.option("--format", "fmt", type=click.Choice(["text", "csv", "json"]), default="text",
              show_default=True)
@_guarded
def table(report_file, fmt):
    """Render a saved report (the report.json written by ``eval``)."""
    rows = ex.rows_from_json(Path(report_file).read_text())
    click.echo(ex.report(rows, fmt), nl=False)


if __name__ == "__main__":  # pragma: no cover
    main()
