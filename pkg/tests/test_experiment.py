import json
import math

import jsonschema
import numpy as np
import pytest
from click.testing import CliRunner

from hitrank import experiment as ex
from hitrank.cli import main
from hitrank.data import synth_longtail
from hitrank.experiment import (ConfigError, DataView, Dataset, ExperimentConfig, Grid, LeakageError,
                                ModelSpec, ReportRow, report, rows_from_csv, rows_from_json)

FAST = dict(grid={"margins": [0.5], "ws": [0.9], "mus": [0.5]},
            optimizer={"lr": 0.02, "batch_size": 64, "epochs": 2},
            pairs_per_epoch=400)


@pytest.fixture(scope="module")
def small():
    return Dataset.from_synthetic(synth_longtail(n=400, n_artists=60, seed=3))


def config(models, **kw):
    opts = dict(FAST, synthetic={"n": 400, "n_artists": 60, "seed": 3}, seed=0)
    opts.update(kw)
    return ExperimentConfig(models=models, **opts)


def row(label="i", **kw):
    base = dict(label=label, variant="siamese", sampler="ab", features="audio", segment="highlight",
                ndcg=0.1127, kendall=0.1852, spearman=0.2713, n_folds=10)
    base.update(kw)
    return ReportRow(**base)


# ------------------------------------------------------------------ leakage


class Recording:
    """Array wrapper that remembers every index it was asked for."""

    def __init__(self, arr, log):
        self.arr, self.log = arr, log
        self.shape = arr.shape

    def __len__(self):
        return len(self.arr)

    def __getitem__(self, idx):
        self.log.update(np.arange(len(self.arr))[idx].ravel().tolist())
        return self.arr[idx]


def test_selection_never_reads_test_songs(small):
    log = set()
    spy = Dataset(features=Recording(small.features, log), hit_scores=small.hit_scores,
                  artists=Recording(small.artists, log), tags=Recording(small.tags, log))
    spy.hit_scores = Recording(small.hit_scores, log)
    cfg = config([{"label": "l", "sampler": "ab+artist", "features": "audio+tag"}])
    plan = ex.tenfold_split(np.arange(len(small)), cfg.seed, cfg.n_folds)
    for t in (0, 7):
        log.clear()
        ex.train_on_fold(cfg.models[0], spy, cfg, t, plan=plan)
        test = set(plan.iteration(t).test.tolist())
        assert log, "the spy saw no reads at all"
        assert not (log & test)


def test_selection_is_blind_to_test_values(small):
    cfg = config([{"label": "i", "sampler": "ab"}])
    plan = ex.tenfold_split(np.arange(len(small)), cfg.seed, cfg.n_folds)
    test = plan.iteration(4).test
    poisoned = Dataset(features=small.features.copy(), hit_scores=small.hit_scores.copy(),
                       artists=small.artists, tags=small.tags.copy())
    poisoned.features[test] = np.nan
    poisoned.hit_scores[test] = np.nan
    poisoned.tags[test] = np.nan
    clean, _ = ex.train_on_fold(cfg.models[0], small, cfg, 4, plan=plan)
    dirty, _ = ex.train_on_fold(cfg.models[0], poisoned, cfg, 4, plan=plan)
    assert clean[0].to_bytes() == dirty[0].to_bytes()


def test_view_refuses_songs_outside_it(small):
    view = DataView(small, np.arange(100))
    view.take([0, 99])
    with pytest.raises(LeakageError):
        view.take([5, 100])


# ---------------------------------------------------------------- configs


def test_grid_collapses_mu_without_tags():
    g = Grid()
    assert {mu for _, _, mu in g.cells(ModelSpec("e", sampler="naive"))} == {0.0}
    assert len(g.cells(ModelSpec("f", sampler="naive", features="audio+tag"))) == 3 * 5 * 5
    assert g.cells(ModelSpec("c", variant="simple")) == [(None, 0.0, 0.0)]


def test_simple_variant_has_no_sampler():
    assert ModelSpec("c", variant="simple", sampler="ab").sampler is None


@pytest.mark.parametrize("bad", [
    dict(models=[]),
    dict(models=[{"label": "x", "sampler": "nope"}]),
    dict(models=[{"label": "x", "features": "video"}]),
    dict(models=[{"label": "x"}, {"label": "x"}]),
    dict(models=[{"label": "x"}], grid={"margins": [0.0]}),
    dict(models=[{"label": "x"}], grid={"ws": [1.5]}),
    dict(models=[{"label": "x"}], selection_metric="auc"),
    dict(models=[{"label": "x"}], manifest="m.jsonl"),
])
def test_config_errors(bad):
    obj = dict(synthetic={"n": 200})
    obj.update(bad)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(obj)


def test_unknown_config_key():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"models": [{"label": "x"}], "synthetic": {}, "colour": 1})


# ----------------------------------------------------------------- reports


def test_one_row_gives_header_and_one_line():
    for fmt in ("text", "csv"):
        lines = report([row()], fmt).strip("\n").split("\n")
        data = [ln for ln in lines if not set(ln) <= {"-", " "}]
        assert len(data) == 2, fmt


def test_csv_roundtrip():
    rows = [row(), row("c", variant="simple", sampler=None, kendall=0.0735, ndcg=0.0999,
                       spearman=1 / 3),
            row("x", kendall=math.nan)]
    back = rows_from_csv(report(rows, "csv"))
    for r, b in zip(rows, back):
        for k, v in r.summary().items():
            bv = b[k]
            assert (isinstance(v, float) and math.isnan(v) and math.isnan(bv)) or bv == v, k


def test_json_validates_against_schema_and_roundtrips(small):
    cfg = config([{"label": "c", "variant": "simple"}, {"label": "i", "sampler": "ab"}],
                 folds=[0, 1])
    rows = ex.run(cfg, small)
    rows.append(row("bad", status="failed", message="diverged", ndcg=math.nan,
                    kendall=math.nan, spearman=math.nan, n_folds=0))
    text = report(rows, "json")
    doc = json.loads(text)
    jsonschema.validate(doc, ex.load_schema())
    back = rows_from_json(text)
    assert report(back, "json") == text


def test_schema_rejects_malformed_rows():
    doc = json.loads(report([row()], "json"))
    doc[0]["kendall"] = 2.0
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate(doc, ex.load_schema())


def test_rows_follow_table_order(small):
    cfg = config([{"label": "j", "sampler": "ab", "features": "audio+tag"},
                  {"label": "e", "sampler": "naive"},
                  {"label": "d", "variant": "simple", "features": "audio+tag"},
                  {"label": "i", "sampler": "ab"},
                  {"label": "a", "variant": "simple", "segment": "mid30"},
                  {"label": "g", "sampler": "artist"}],
                 folds=[0])
    assert [r.label for r in ex.run(cfg, small)] == ["a", "d", "e", "g", "i", "j"]


def test_rerun_is_byte_identical(small):
    cfg = config([{"label": "k", "sampler": "ab+artist"}], folds=[0, 1])
    assert report(ex.run(cfg, small), "json") == report(ex.run(cfg, small), "json")


def test_row_averages_fold_results(small):
    cfg = config([{"label": "i", "sampler": "ab"}], folds=[0, 2, 3])
    (r,) = ex.run(cfg, small)
    assert r.n_folds == 3
    assert r.kendall == pytest.approx(np.mean([f["kendall"] for f in r.folds]))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverging_cell_marks_row_failed_and_run_continues(small):
    cfg = config([{"label": "c", "variant": "simple"}], folds=[0],
                 optimizer={"lr": 1e9, "batch_size": 64, "epochs": 3})
    (bad,) = ex.run(cfg, small)
    assert bad.status == "failed" and "fold 0" in bad.message
    cfg.optimizer.lr = 0.02
    (good,) = ex.run(cfg, small)
    assert good.status == "ok"
    assert "FAILED" in report([bad, good], "text")


# --------------------------------------------------- behavioural checks


def test_siamese_with_w_zero_matches_simple_within_noise():
    ds = Dataset.from_synthetic(synth_longtail(n=2000, seed=5))
    # with w = 0 both variants minimize the same MSE; the Siamese one sees songs via pair legs
    cfg = ExperimentConfig(models=[{"label": "c", "variant": "simple"},
                                   {"label": "e0", "sampler": "naive"}],
                           synthetic={}, grid={"margins": [0.1], "ws": [0.0], "mus": [0.0]},
                           optimizer={"lr": 0.02, "batch_size": 64, "epochs": 3},
                           pairs_per_epoch=800, resample_pairs=True, seed=2)
    simple, siam = ex.run(cfg, ds)
    a = np.array([f["kendall"] for f in simple.folds])
    b = np.array([f["kendall"] for f in siam.folds])
    se = np.std(a - b, ddof=1) / np.sqrt(len(a))
    assert abs(a.mean() - b.mean()) < 3 * se + 0.02


def test_no_signal_means_no_skill():
    # signal = 0: features and tags are pure noise, so every model should rank at chance
    models = [{"label": "c", "variant": "simple"},
              {"label": "d", "variant": "simple", "features": "audio+tag"},
              {"label": "e", "sampler": "naive"},
              {"label": "f", "sampler": "naive", "features": "audio+tag"},
              {"label": "i", "sampler": "ab"},
              {"label": "j", "sampler": "ab", "features": "audio+tag"}]
    cfg = ExperimentConfig(models=models, seed=0,
                           synthetic={"n": 3000, "n_artists": 400, "seed": 11, "params": {"signal": 0.0}},
                           grid={"margins": [0.5], "ws": [0.9], "mus": [0.5]},
                           optimizer={"lr": 0.02, "batch_size": 128, "epochs": 2}, pairs_per_epoch=2000)
    k = 30  # top decile of a 300-song test fold
    null_sd = math.sqrt(2 * (2 * k + 5) / (9 * k * (k - 1))) / math.sqrt(10)
    for r in ex.run(cfg):
        assert r.status == "ok"
        assert abs(r.kendall) < 4 * null_sd, r.label


# --------------------------------------------------------------------- CLI


def test_cli_end_to_end(tmp_path, monkeypatch):
    monkeypatch.setenv("HITRANK_CACHE", str(tmp_path / "cache"))
    monkeypatch.chdir(tmp_path)
    runner = CliRunner()
    res = runner.invoke(main, ["gen", "--out", "m.jsonl", "--n", "300", "--n-artists", "50"])
    assert res.exit_code == 0, res.output
    assert len((tmp_path / "m.jsonl").read_text().splitlines()) == 300
    assert len(list((tmp_path / "cache").iterdir())) == 300
    cfg = dict(FAST, manifest="m.jsonl", top_k=250,
               models=[{"label": "i", "sampler": "ab"}, {"label": "c", "variant": "simple"}])
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))

    res = runner.invoke(main, ["eval", "--config", "cfg.json", "--out-dir", "out", "--folds", "0,1",
                               "--epochs", "1", "--format", "csv"])
    assert res.exit_code == 0, res.output
    assert res.output.splitlines()[0].startswith("label,variant")
    assert [ln.split(",")[0] for ln in res.output.splitlines()[1:]] == ["c", "i"]
    assert len(list((tmp_path / "out" / "folds").glob("*.json"))) == 4
    saved = json.loads((tmp_path / "out" / "config.json").read_text())
    assert saved["optimizer"]["epochs"] == 1

    res = runner.invoke(main, ["table", "out/report.json"])
    assert res.exit_code == 0 and "Kendall@10%" in res.output

    res = runner.invoke(main, ["train", "--config", "cfg.json", "--model", "i", "--fold", "3",
                               "--out", "i.bin", "--epochs", "1"])
    assert res.exit_code == 0, res.output
    assert (tmp_path / "i.bin").exists()
    assert json.loads(res.output)["selected"][0]["w"] == 0.9


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_cli_exit_codes(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    runner = CliRunner()
    assert runner.invoke(main, ["eval", "--config", "missing.yaml", "--out-dir", "o"]).exit_code == 2
    (tmp_path / "bad.yaml").write_text("models: [{label: x, variant: recurrent}]\nsynthetic: {}\n")
    assert runner.invoke(main, ["eval", "--config", "bad.yaml", "--out-dir", "o"]).exit_code == 2
    (tmp_path / "broken.yaml").write_text("models: [unclosed\n")
    assert runner.invoke(main, ["eval", "--config", "broken.yaml", "--out-dir", "o"]).exit_code == 2
    (tmp_path / "nomanifest.yaml").write_text("models: [{label: x}]\nmanifest: none.jsonl\n")
    assert runner.invoke(main, ["eval", "--config", "nomanifest.yaml", "--out-dir", "o"]).exit_code == 3
    assert runner.invoke(main, ["eval", "--out-dir", "o"]).exit_code == 2  # usage error
    diverge = dict(FAST, synthetic={"n": 200, "n_artists": 40}, folds=[0],
                   models=[{"label": "c", "variant": "simple"}],
                   optimizer={"lr": 1e9, "batch_size": 64, "epochs": 3})
    (tmp_path / "div.json").write_text(json.dumps(diverge))
    res = runner.invoke(main, ["eval", "--config", "div.json", "--out-dir", "o"])
    assert res.exit_code == 3 and "FAILED" in res.output


def test_cli_features_command(tmp_path):
    from hitrank.features import AudioClip, read_cached, write_wav

    rng = np.random.default_rng(0)
    write_wav(tmp_path / "song-a.wav", AudioClip(0.1 * rng.normal(size=31 * 22050)))
    write_wav(tmp_path / "short.wav", AudioClip(0.1 * rng.normal(size=5 * 22050)))
    res = CliRunner().invoke(main, ["features", str(tmp_path), "--strategy", "highlight",
                                    "--cache", str(tmp_path / "c")])
    assert res.exit_code == 0, res.output
    assert "cached 1 of 2" in res.output
    sid, tag, mel = read_cached(tmp_path / "c" / "song-a.hrmf")
    assert (sid, tag, mel.shape) == ("song-a", "highlight", (128, 321))
