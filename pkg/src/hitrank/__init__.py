"""Pairwise learning-to-rank for song hit-score prediction.

Modules:
    tensor      reverse-mode autodiff over float64 arrays, SGD, checkpoints
    features    STFT, mel filterbank, log compression, 30 s segment selection
    model       audio rater CNN, tag branch, Siamese pairing, losses, training
    sampling    naive / A/B / same-artist pair samplers and score fusion
    metrics     nDCG, Kendall tau-b and Spearman rho within the true top fraction
    data        song records, hit scores, top-k selection, 10-fold plans, synthetic corpus
    experiment  cross-validated model grids and results tables
"""
from .data import SongRecord, SynthParams, hit_score, select_top, synth_longtail, tenfold_split
from .metrics import MetricReport, kendall_tau, ndcg, spearman_rho
from .model import (HybridRater, LossWeights, OptimizerConfig, RaterConfig, SiameseRater,
                    TagBranchConfig, delta, loss_multi, loss_rank, loss_rate, rate, train)
from .sampling import PairBatch, ab_partition, ab_sample, artist_sample, fuse_scores, naive_sample

__version__ = "0.1.0"
