"""
Ranking metrics on the top decile
=================================

nDCG, Kendall's tau-b and Spearman's rho are all computed on the test songs
whose *true* hit scores fall in the top 10%; predictions only decide the
order within that subset.
"""
import numpy as np

from hitrank.metrics import evaluate, kendall_tau, ndcg, spearman_rho, top_fraction_subset

rng = np.random.default_rng(0)
y = rng.pareto(1.5, size=1500)              # a long-tail test fold

subset = top_fraction_subset(y)
print(f"{len(subset)} of {len(y)} songs are scored")

# from a perfect ranking, through noisy ones, down to a reversed one
for noise in (0.0, 0.5, 2.0, 8.0):
    p = np.log(y) + rng.normal(scale=noise, size=len(y))
    print(f"noise {noise:3.1f}: nDCG {ndcg(y, p):.3f}  tau {kendall_tau(y, p):+.3f}  "
          f"rho {spearman_rho(y, p):+.3f}")
print(f"reversed: tau {kendall_tau(y, -y):+.3f}")

# a constant predictor has no ranking, so the correlations are undefined
print("constant predictor tau:", kendall_tau(y, np.zeros_like(y)))

# one fold's numbers travel as a small JSON record
print(evaluate(y, np.log(y) + rng.normal(size=len(y)), model="i", sampler="ab", fold=0).to_json())
