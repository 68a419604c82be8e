"""
A small ten-fold experiment
===========================

Run the experiment harness on a small synthetic corpus: every model is
grid-searched on each fold's validation split and scored on its test
split, and the fold results are averaged into a table.
"""
from hitrank import experiment as ex

config = ex.ExperimentConfig.from_dict({
    "seed": 0,
    "synthetic": {"n": 2000, "n_artists": 300, "seed": 0},
    "models": [
        {"label": "c", "variant": "simple"},
        {"label": "e", "sampler": "naive"},
        {"label": "i", "sampler": "ab"},
        {"label": "j", "sampler": "ab", "features": "audio+tag"},
    ],
    "grid": {"margins": [0.5], "ws": [0.9], "mus": [0.5]},
    "optimizer": {"lr": 0.02, "momentum": 0.9, "batch_size": 128, "epochs": 3},
    "pairs_per_epoch": 2000,
    "resample_pairs": True,
})

rows = ex.run(config)
print(ex.report(rows, "text"))

# the same rows as CSV, e.g. for a spreadsheet
print(ex.report(rows, "csv"))
