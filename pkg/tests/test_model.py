import numpy as np
import pytest

from hitrank import tensor as T
from hitrank.model import (AudioRater, HybridRater, LossWeights, OptimizerConfig, RaterConfig,
                           SiameseRater, TagBranch, TagBranchConfig, TrainingDiverged, delta,
                           loss_multi, loss_rank, loss_rate, rate, train)
from hitrank.sampling import PairBatch
from hitrank.tensor import ParamSet, Tensor

TINY = RaterConfig.compact(6, 16, filters=3)
SMALL_TAGS = TagBranchConfig(50, (8, 8, 4))


class Poison:
    """Stands in for a tag array and fails loudly on any read."""

    def _fail(self, *a, **k):
        raise AssertionError("tag input was read")

    __array__ = __getitem__ = __len__ = __iter__ = __float__ = _fail

    def __getattr__(self, name):
        self._fail()


class ConstBranch:
    def __init__(self, value):
        self.value = value
        self.params = ParamSet([("c", np.zeros(1))])
        self.config = TINY

    def forward(self, x):
        return Tensor(np.full(len(x), self.value))


def mel_batch(n, cfg=TINY, seed=0):
    return np.random.default_rng(seed).normal(size=(n, cfg.n_bins, cfg.n_frames))


def tag_batch(n, seed=0):
    return np.random.default_rng(seed).uniform(size=(n, 50))


# ------------------------------------------------------------------- rate


def test_mu_zero_is_audio_output_bit_exact():
    audio = AudioRater(TINY, seed=1)
    x = mel_batch(4)
    hybrid = HybridRater(audio, TagBranch(seed=2), mu=0.0)
    np.testing.assert_array_equal(rate(hybrid, x, tag_batch(4)), audio.forward(x).data)


def test_mu_one_is_tag_output_bit_exact():
    tag = TagBranch(seed=2)
    hybrid = HybridRater(AudioRater(TINY, seed=1), tag, mu=1.0)
    g = tag_batch(4)
    np.testing.assert_array_equal(rate(hybrid, mel_batch(4), g), tag.forward(g).data)


def test_convex_blend():
    hybrid = HybridRater(ConstBranch(0.2), ConstBranch(0.6), mu=0.5)
    assert rate(hybrid, np.zeros((6, 16)), np.zeros(50)) == pytest.approx(0.4, abs=1e-15)


def test_mu_zero_never_reads_tags():
    hybrid = HybridRater.build(TINY, mu=0.0, seed=0)
    x = mel_batch(3)
    rate(hybrid, x[0], Poison())
    rate(hybrid, x, Poison())
    hybrid.score_batches(x, Poison())


def test_missing_tags_rejected():
    hybrid = HybridRater.build(TINY, mu=0.5, seed=0)
    with pytest.raises(ValueError):
        rate(hybrid, mel_batch(1)[0])


def test_mu_out_of_range_rejected():
    with pytest.raises(ValueError):
        HybridRater(AudioRater(TINY), TagBranch(), mu=1.5)


def test_default_architecture_on_full_matrix():
    cfg = RaterConfig()
    assert cfg.feature_map_shape()[1] == 1  # full-height first kernel collapses the mel axis
    rater = HybridRater.build(cfg, seed=0)
    out = rater.score(np.zeros((1, 128, 321)))
    assert out.shape == (1,)


def test_tag_branch_widths():
    tag = TagBranch()
    shapes = [t.shape for _, t in tag.params.items()]
    assert shapes == [(50, 100), (100,), (100, 100), (100,), (100, 30), (30,), (30, 1), (1,)]


# ----------------------------------------------------------------- losses


def test_loss_rate_examples():
    assert loss_rate([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert loss_rate([0.0, 0.0], [1.0, 3.0]) == 5.0
    with pytest.raises(ValueError):
        loss_rate([], [])


def test_loss_rate_matches_sum_oracle():
    rng = np.random.default_rng(3)
    for _ in range(20):
        s, y = rng.normal(size=17), rng.normal(size=17)
        oracle = sum((a - b) ** 2 for a, b in zip(y, s)) / len(s)
        assert abs(loss_rate(s, y) - oracle) < 1e-12


def test_delta_examples():
    assert delta(2, 1) == 1
    assert delta(1, 1) == 1
    assert delta(1, 2) == -1


def test_loss_rank_examples():
    m = 0.1
    assert loss_rank(([2.0], [1.0]), [0.3], [0.2], m) == pytest.approx(0.0, abs=1e-15)
    rng = np.random.default_rng(0)
    f = rng.normal(size=8)
    assert loss_rank((rng.normal(size=8), rng.normal(size=8)), f, f, 0.25) == 0.25
    with pytest.raises(ValueError):
        loss_rank(([], []), [], [], m)
    with pytest.raises(ValueError):
        loss_rank(([1.0], [0.0]), [0.0], [0.0], 0.0)


def test_loss_rank_hinge_boundary_exact():
    # f_i - f_j == m exactly in binary: contribution is 0
    assert loss_rank(([2.0], [1.0]), [0.75], [0.5], 0.25) == 0.0


def test_loss_rank_matches_sum_oracle_and_accepts_pairbatch():
    rng = np.random.default_rng(4)
    for _ in range(20):
        yi, yj = rng.normal(size=25), rng.normal(size=25)
        yj[:3] = yi[:3]  # ties count as +1
        fi, fj = rng.normal(size=25), rng.normal(size=25)
        m = rng.uniform(0.01, 1)
        oracle = 0.0
        for a, b, c, d in zip(yi, yj, fi, fj):
            sign = 1 if a >= b else -1
            oracle += max(0.0, m - sign * (c - d))
        oracle /= 25
        assert abs(loss_rank((yi, yj), fi, fj, m) - oracle) < 1e-12
        batch = PairBatch(np.zeros((25, 2)), yi, yj)
        assert loss_rank(batch, fi, fj, m) == loss_rank((yi, yj), fi, fj, m)


def test_loss_rank_zero_iff_separated():
    rng = np.random.default_rng(5)
    m = 0.3
    for _ in range(50):
        yi, yj = rng.normal(size=6), rng.normal(size=6)
        fi, fj = rng.normal(size=6), rng.normal(size=6)
        val = loss_rank((yi, yj), fi, fj, m)
        separated = np.all(delta(yi, yj) * (fi - fj) >= m)
        assert val >= 0
        assert (val == 0) == separated
    d = delta(yi, yj)
    assert loss_rank((yi, yj), fj + d * (m + 0.5), fj, m) == 0.0


def test_loss_multi_endpoints_bit_exact():
    rng = np.random.default_rng(6)
    for _ in range(20):
        r, k = rng.normal() ** 2, rng.normal() ** 2
        assert loss_multi(r, k, 0.0) == r
        assert loss_multi(r, k, 1.0) == k
        tr, tk = Tensor(r), Tensor(k)
        assert loss_multi(tr, tk, 0.0).item() == r
        assert loss_multi(tr, tk, 1.0).item() == k
    assert loss_multi(0.2, 0.4, 0.5) == pytest.approx(0.3, abs=1e-15)
    with pytest.raises(ValueError):
        loss_multi(0.2, 0.4, 1.1)


def test_loss_multi_gradient_is_linear_mix():
    rater = HybridRater.build(TINY, mu=0.5, seed=3, tag_config=SMALL_TAGS)
    sia = SiameseRater(rater)
    xi, xj, gi, gj = mel_batch(5, seed=1), mel_batch(5, seed=2), tag_batch(5, 1), tag_batch(5, 2)
    yi, yj = np.random.default_rng(7).normal(size=(2, 5))

    def losses():
        si, sj = sia.score_pairs(xi, xj, gi, gj)
        return (loss_rate(T.concat(si, sj), np.concatenate([yi, yj])),
                loss_rank((yi, yj), si, sj, 0.2))

    lr_, lk = losses()
    T.backward(lr_, rater.params)
    g_rate = {k: v.copy() for k, v in rater.params.grads().items()}
    T.backward(lk, rater.params)
    g_rank = {k: v.copy() for k, v in rater.params.grads().items()}
    w = 0.35
    T.backward(loss_multi(*losses(), w), rater.params)
    for k, g in rater.params.grads().items():
        assert np.max(np.abs(g - ((1 - w) * g_rate[k] + w * g_rank[k]))) < 1e-10


# ------------------------------------------------------------ gradients


def finite_diff(f, t, h=1e-5):
    g = np.zeros_like(t.data)
    for i in np.ndindex(t.data.shape):
        old = t.data[i]
        t.data[i] = old + h
        up = f()
        t.data[i] = old - h
        down = f()
        t.data[i] = old
        g[i] = (up - down) / (2 * h)
    return g


@pytest.mark.parametrize("seed", range(3))
def test_composite_gradient_matches_finite_differences(seed):
    rater = HybridRater.build(TINY, mu=0.4, seed=seed, tag_config=SMALL_TAGS)
    sia = SiameseRater(rater)
    rng = np.random.default_rng(seed)
    xi, xj = rng.normal(size=(2, 3, 6, 16))
    gi, gj = rng.uniform(size=(2, 3, 50))
    yi, yj = rng.normal(size=(2, 3))

    def loss():
        si, sj = sia.score_pairs(xi, xj, gi, gj)
        return loss_multi(loss_rate(T.concat(si, sj), np.concatenate([yi, yj])),
                          loss_rank((yi, yj), si, sj, 0.5), 0.5)

    T.backward(loss(), rater.params)
    for name, t in rater.params.items():
        fd = finite_diff(lambda: loss().item(), t)
        err = np.max(np.abs(t.grad - fd) / np.maximum(1.0, np.abs(fd)))
        assert err < 1e-4, name


# ---------------------------------------------------------- weight sharing


def test_siamese_legs_share_one_parameter_set():
    rater = HybridRater.build(TINY, mu=0.5, seed=0, tag_config=SMALL_TAGS)
    sia = SiameseRater(rater)
    before = [id(t) for _, t in rater.params.items()]
    x, g = mel_batch(12), tag_batch(12)
    y = np.random.default_rng(0).normal(size=12)
    pairs = np.array([[i, (i + 1) % 12] for i in range(12)])
    train(rater, x, y, tags=g, weights=LossWeights(0.1, 0.5), pairs=pairs,
          optimizer=OptimizerConfig(lr=0.01, batch_size=4, epochs=2))
    assert sia.left is sia.right
    assert sia.left.params is sia.right.params
    assert [id(t) for _, t in rater.params.items()] == before
    # the merged set aliases the branch parameters rather than copying them
    assert rater.params["audio.conv1.k"] is rater.audio.params["conv1.k"]
    assert rater.params["tag.fc0.w"] is rater.tag.params["fc0.w"]


# ---------------------------------------------------------------- training


def test_w_zero_matches_plain_mse_gradient():
    rater = HybridRater.build(TINY, seed=4)
    sia = SiameseRater(rater)
    xi, xj = mel_batch(4, seed=1), mel_batch(4, seed=2)
    yi, yj = np.random.default_rng(1).normal(size=(2, 4))
    si, sj = sia.score_pairs(xi, xj)
    T.backward(loss_multi(loss_rate(T.concat(si, sj), np.concatenate([yi, yj])),
                          loss_rank((yi, yj), si, sj, 0.1), 0.0), rater.params)
    g_siamese = {k: v.copy() for k, v in rater.params.grads().items()}
    plain = loss_rate(rater.score(np.concatenate([xi, xj])), np.concatenate([yi, yj]))
    T.backward(plain, rater.params)
    for k, g in rater.params.grads().items():
        assert np.max(np.abs(g - g_siamese[k])) < 1e-12


def test_two_point_toy_reaches_zero_rank_loss():
    x = mel_batch(2, seed=9)
    y = np.array([2.0, 1.0])
    rater = HybridRater.build(TINY, seed=0)
    m = 0.5
    train(rater, x, y, weights=LossWeights(m, 1.0), pairs=np.array([[0, 1]]),
          optimizer=OptimizerConfig(lr=0.01, batch_size=1, epochs=200))
    s = rater.score_batches(x)  # standardized scale, where the margin applies
    assert s[0] - s[1] >= m
    assert loss_rank(([1.0], [-1.0]), [s[0]], [s[1]], m) == 0.0


def test_loss_trace_decreases_on_separable_toy():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(40, 6, 16))
    y = x[:, 2, :4].sum(axis=1)
    rater = HybridRater.build(TINY, seed=1)
    trace = train(rater, x, y, optimizer=OptimizerConfig(lr=0.03, momentum=0.5, batch_size=40,
                                                          epochs=60)).loss_trace
    smooth = np.convolve(trace, np.ones(5) / 5, mode="valid")
    assert np.all(np.diff(smooth) <= 1e-12)
    assert trace[-1] < 0.5 * trace[0]


def test_training_is_deterministic():
    def run():
        x, g = mel_batch(20, seed=3), tag_batch(20, 3)
        y = np.random.default_rng(3).exponential(size=20)
        rater = HybridRater.build(TINY, mu=0.5, seed=5, tag_config=SMALL_TAGS)
        pairs = np.array([[i, j] for i in range(20) for j in range(i + 1, 20)])[:40]
        train(rater, x, y, tags=g, weights=LossWeights(0.1, 0.5), pairs=pairs, seed=11,
              optimizer=OptimizerConfig(lr=0.01, batch_size=4, epochs=1))  # 10 steps
        return rater.to_bytes()

    assert run() == run()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts_with_diagnostic():
    x = mel_batch(8) * 1e3
    y = np.random.default_rng(0).normal(size=8)
    rater = HybridRater.build(TINY, seed=0)
    with pytest.raises(TrainingDiverged, match="epoch"):
        train(rater, x, y, optimizer=OptimizerConfig(lr=1e6, batch_size=8, epochs=50))


def test_checkpoint_roundtrip(tmp_path):
    x, g = mel_batch(10), tag_batch(10)
    y = np.random.default_rng(0).exponential(size=10)
    rater = HybridRater.build(TINY, mu=0.25, seed=2, tag_config=SMALL_TAGS)
    train(rater, x, y, tags=g, optimizer=OptimizerConfig(lr=0.01, batch_size=5, epochs=2))
    path = tmp_path / "model.bin"
    rater.save(path)
    back = HybridRater.load(path)
    np.testing.assert_array_equal(back.predict(x, g), rater.predict(x, g))
    assert back.mu == 0.25
    assert back.params.to_bytes() == rater.params.to_bytes()
