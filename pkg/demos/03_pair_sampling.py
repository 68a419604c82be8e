"""
Sampling training pairs from a long-tail corpus
===============================================

Most songs sit far below the mean hit score, so uniformly drawn pairs are
dominated by two tail songs. The A/B sampler insists that one member be
above the mean; the artist sampler only pairs songs by the same artist.
"""
import numpy as np

from hitrank.data import synth_longtail
from hitrank.sampling import ab_partition, ab_sample, artist_sample, fuse_scores, naive_sample

corpus = synth_longtail(n=3000, n_artists=300, seed=0)
y = corpus.hit_scores
print(f"{100 * corpus.below_mean_fraction():.1f}% of songs are below the mean hit score")

part = ab_partition(y)
above = np.zeros(len(y), bool)
above[part.group_a] = True
print(f"group A (above the mean): {len(part.group_a)} songs, {part.n_qualifying} qualifying pairs")

naive = naive_sample(y, 5000, seed=1)
ab = ab_sample(part, y, 5000, seed=1)
artist = artist_sample(y, corpus.artist_index, 2000, seed=1)

for name, b in [("naive", naive), ("A/B", ab), ("artist", artist)]:
    touch_a = np.mean(above[b.i] | above[b.j])
    gap = np.median(np.abs(np.log(b.y_i) - np.log(b.y_j)))
    print(f"{name:7s} {len(b):5d} pairs, {100 * touch_a:5.1f}% touch group A, "
          f"median |log y_i - log y_j| = {gap:.2f}")

same = np.all(corpus.artist_index[artist.i] == corpus.artist_index[artist.j])
print("every artist pair shares an artist:", bool(same))

# two raters trained with different samplers are fused by averaging their scores
print("fused:", fuse_scores([0.2, 0.9], [0.4, 0.5]))
