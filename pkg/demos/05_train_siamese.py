"""
Training a Siamese rater with A/B pairs
=======================================

Train the rating-only baseline and a Siamese rater (shared weights, blended
rating + margin ranking loss) on the same synthetic songs, then compare
Kendall's tau on held-out songs.
"""
import numpy as np

from hitrank.data import synth_longtail
from hitrank.metrics import kendall_tau, ndcg
from hitrank.model import HybridRater, LossWeights, OptimizerConfig, RaterConfig, rate, train
from hitrank.sampling import ab_partition, ab_sample

corpus = synth_longtail(n=4000, n_artists=500, seed=1)
x, y, tags = corpus.features, corpus.hit_scores, corpus.tags
train_idx, test_idx = np.arange(3000), np.arange(3000, 4000)

cfg = RaterConfig.compact(*x.shape[1:])
opt = OptimizerConfig(lr=0.02, momentum=0.9, batch_size=128, epochs=4)

# rating only: mean squared error on individual songs
simple = HybridRater.build(cfg, mu=0.0, seed=0)
train(simple, x[train_idx], y[train_idx], optimizer=opt, seed=0)

# Siamese: both pair members go through the same network; pairs are redrawn each epoch
ytr = y[train_idx]
part = ab_partition(ytr)
siamese = HybridRater.build(cfg, mu=0.0, seed=0)
train(siamese, x[train_idx], ytr, weights=LossWeights(margin=0.5, w=0.9), optimizer=opt,
      pair_sampler=lambda epoch: ab_sample(part, ytr, 4000, seed=epoch).pairs, seed=0)

# blending in the tag branch with mu = 0.5
hybrid = HybridRater.build(cfg, mu=0.5, seed=0)
train(hybrid, x[train_idx], ytr, tags=tags[train_idx], weights=LossWeights(margin=0.5, w=0.9),
      optimizer=opt, pair_sampler=lambda epoch: ab_sample(part, ytr, 4000, seed=epoch).pairs, seed=0)

yt = y[test_idx]
for name, model, g in [("rating only", simple, None), ("siamese A/B", siamese, None),
                       ("siamese A/B + tags", hybrid, tags[test_idx])]:
    p = rate(model, x[test_idx], g)
    print(f"{name:20s} tau@10% {kendall_tau(yt, p):+.3f}   nDCG@10% {ndcg(yt, p):.3f}")
