"""
Rating networks, the Siamese pairing, the three losses and the trainer.

The audio rater is two convolution + max-pool stages followed by three
dense layers ending in a single score. The tag branch maps 50 tag
activations through dense layers of widths 100, 100, 30 to a score. A
:class:`HybridRater` blends the two as ``(1 - mu) * audio + mu * tag``.
"""
from __future__ import annotations

import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .tensor import ParamSet, SGD, Tensor

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """The training loss became NaN or infinite."""


# ------------------------------------------------------------------- configs


@dataclass
class ConvStage:
    filters: int
    kernel: Tuple[int, int]
    pool: Tuple[int, int]
    stride: Tuple[int, int] = (1, 1)


@dataclass
class RaterConfig:
    """Architecture of the audio rater; fully determines its parameter shapes.

    The defaults target 128 x 321 log-mel inputs. The first kernel spans the
    whole mel axis.
    """

    n_bins: int = 128
    n_frames: int = 321
    conv1: ConvStage = field(default_factory=lambda: ConvStage(32, (128, 4), (1, 4)))
    conv2: ConvStage = field(default_factory=lambda: ConvStage(32, (1, 4), (1, 4)))
    widths: Tuple[int, int, int] = (64, 32, 1)

    def __post_init__(self):
        if isinstance(self.conv1, dict):
            self.conv1 = ConvStage(**{k: tuple(v) if isinstance(v, list) else v
                                      for k, v in self.conv1.items()})
        if isinstance(self.conv2, dict):
            self.conv2 = ConvStage(**{k: tuple(v) if isinstance(v, list) else v
                                      for k, v in self.conv2.items()})
        self.widths = tuple(self.widths)
        if len(self.widths) != 3 or self.widths[-1] != 1:
            raise ValueError("the rater needs three dense layers ending in width 1")
        self.feature_map_shape()

    @classmethod
    def compact(cls, n_bins: int, n_frames: int, filters: int = 8) -> "RaterConfig":
        """A small rater for low-resolution mel-like inputs."""
        return cls(n_bins=n_bins, n_frames=n_frames,
                   conv1=ConvStage(filters, (n_bins, 4), (1, 2)),
                   conv2=ConvStage(filters, (1, 3), (1, 2)),
                   widths=(32, 16, 1))

    def feature_map_shape(self) -> Tuple[int, int, int]:
        h, w = self.n_bins, self.n_frames
        for stage in (self.conv1, self.conv2):
            kh, kw = stage.kernel
            sh, sw = stage.stride
            if kh > h or kw > w:
                raise ValueError(f"kernel {stage.kernel} does not fit feature map {h}x{w}")
            h, w = (h - kh) // sh + 1, (w - kw) // sw + 1
            ph, pw = stage.pool
            if ph > h or pw > w:
                raise ValueError(f"pool {stage.pool} does not fit feature map {h}x{w}")
            h, w = (h - ph) // ph + 1, (w - pw) // pw + 1
        return self.conv2.filters, h, w

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TagBranchConfig:
    n_inputs: int = 50
    hidden: Tuple[int, ...] = (100, 100, 30)

    def __post_init__(self):
        self.hidden = tuple(self.hidden)


@dataclass
class LossWeights:
    margin: float = 0.1
    w: float = 0.5

    def __post_init__(self):
        if not self.margin > 0:
            raise ValueError("margin must be positive")
        if not 0.0 <= self.w <= 1.0:
            raise ValueError("w must lie in [0, 1]")


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 10


# ------------------------------------------------------------------ networks


def _dense_params(ps: ParamSet, prefix: str, rng, widths: Sequence[int]) -> None:
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        ps.add(f"{prefix}{i}.w", T.glorot_uniform(rng, (a, b), a, b))
        ps.add(f"{prefix}{i}.b", np.zeros(b))


def _dense_stack(ps: ParamSet, prefix: str, h: Tensor, n_layers: int) -> Tensor:
    for i in range(n_layers):
        h = T.dense_forward(h, ps[f"{prefix}{i}.w"], ps[f"{prefix}{i}.b"])
        if i < n_layers - 1:
            h = T.relu(h)
    return h


class AudioRater:
    """Two conv/pool stages and three dense layers mapping a mel matrix to a score."""

    def __init__(self, config: RaterConfig, seed: int = 0, params: Optional[ParamSet] = None):
        self.config = config
        self.input_mean = np.zeros((config.n_bins, 1))
        self.input_scale = np.ones((config.n_bins, 1))
        if params is None:
            rng = np.random.default_rng(seed)
            params = ParamSet()
            for name, stage, c_in in (("conv1", config.conv1, 1),
                                      ("conv2", config.conv2, config.conv1.filters)):
                kh, kw = stage.kernel
                params.add(f"{name}.k", T.glorot_uniform(
                    rng, (stage.filters, c_in, kh, kw), c_in * kh * kw, stage.filters * kh * kw))
                params.add(f"{name}.b", np.zeros(stage.filters))
            c, h, w = config.feature_map_shape()
            _dense_params(params, "fc", rng, (c * h * w,) + tuple(config.widths))
        self.params = params

    def fit_input_scaling(self, features: np.ndarray) -> None:
        self.input_mean = features.mean(axis=(0, 2))[:, None]
        self.input_scale = features.std(axis=(0, 2))[:, None] + 1e-8

    def forward(self, x) -> Tensor:
        """``x`` is (batch, bins, frames) or (batch, 1, bins, frames); returns (batch,)."""
        arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        if arr.ndim == 3:
            arr = arr[:, None]
        if arr.shape[1:] != (1, self.config.n_bins, self.config.n_frames):
            raise T.ShapeError(f"expected (batch, 1, {self.config.n_bins}, "
                               f"{self.config.n_frames}) input, got {arr.shape}")
        arr = (arr - self.input_mean) / self.input_scale
        ps, cfg = self.params, self.config
        h = Tensor(arr)
        for name, stage in (("conv1", cfg.conv1), ("conv2", cfg.conv2)):
            h = T.conv2d_forward(h, ps[f"{name}.k"], ps[f"{name}.b"], stride=stage.stride)
            h = T.pool_max(T.relu(h), stage.pool)
        h = T.reshape(h, (h.shape[0], -1))
        return T.reshape(_dense_stack(ps, "fc", h, 3), (-1,))


class TagBranch:
    """Dense network over precomputed tag activations."""

    def __init__(self, config: Optional[TagBranchConfig] = None, seed: int = 0,
                 params: Optional[ParamSet] = None):
        self.config = config or TagBranchConfig()
        if params is None:
            params = ParamSet()
            _dense_params(params, "fc", np.random.default_rng(seed),
                          (self.config.n_inputs,) + self.config.hidden + (1,))
        self.params = params

    def forward(self, tags) -> Tensor:
        arr = np.asarray(tags, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != self.config.n_inputs:
            raise T.ShapeError(f"expected (batch, {self.config.n_inputs}) tags, got {arr.shape}")
        out = _dense_stack(self.params, "fc", Tensor(arr - 0.5), len(self.config.hidden) + 1)
        return T.reshape(out, (-1,))


class HybridRater:
    """Audio rater optionally blended with a tag branch by weight ``mu``."""

    def __init__(self, audio: AudioRater, tag: Optional[TagBranch] = None, mu: float = 0.0):
        if not 0.0 <= mu <= 1.0:
            raise ValueError("mu must lie in [0, 1]")
        if mu > 0 and tag is None:
            raise ValueError("mu > 0 needs a tag branch")
        self.audio = audio
        self.tag = tag
        self.mu = float(mu)
        self.target_mean = 0.0
        self.target_scale = 1.0
        self.params = (audio.params if tag is None
                       else audio.params.merged(tag.params, "audio.", "tag."))

    @classmethod
    def build(cls, config: RaterConfig, mu: float = 0.0, seed: int = 0,
              tag_config: Optional[TagBranchConfig] = None) -> "HybridRater":
        audio = AudioRater(config, seed=seed)
        tag = TagBranch(tag_config, seed=seed + 1) if mu > 0 else None
        return cls(audio, tag, mu)

    @property
    def uses_tags(self) -> bool:
        return self.mu > 0

    def score(self, x, tags=None) -> Tensor:
        """Differentiable blended score for a batch."""
        if self.mu == 0.0:
            return self.audio.forward(x)
        if tags is None:
            raise ValueError("this rater blends tag features (mu > 0) but no tags were given")
        if self.mu == 1.0:
            return self.tag.forward(tags)
        return (1.0 - self.mu) * self.audio.forward(x) + self.mu * self.tag.forward(tags)

    def predict(self, x, tags=None, batch_size: int = 1024) -> np.ndarray:
        """Hit-score estimates on the original (unstandardized) scale."""
        return self.score_batches(x, tags, batch_size) * self.target_scale + self.target_mean

    def score_batches(self, x, tags=None, batch_size: int = 1024) -> np.ndarray:
        n = len(x)
        out = np.empty(n)
        for lo in range(0, n, batch_size):
            hi = min(n, lo + batch_size)
            t = None if (tags is None or self.mu == 0.0) else tags[lo:hi]
            out[lo:hi] = self.score(x[lo:hi], t).data
        return out

    # -- checkpoint: b"HRMC" | u16 version | u32 header length | JSON header | parameter set

    def to_bytes(self) -> bytes:
        header = {
            "architecture": self.audio.config.to_dict(),
            "tag_branch": None if self.tag is None else asdict(self.tag.config),
            "mu": self.mu,
            "target_mean": self.target_mean,
            "target_scale": self.target_scale,
            "input_mean": self.audio.input_mean.ravel().tolist(),
            "input_scale": self.audio.input_scale.ravel().tolist(),
        }
        raw = json.dumps(header, sort_keys=True).encode("utf-8")
        return b"HRMC" + struct.pack("<HI", 1, len(raw)) + raw + self.params.to_bytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "HybridRater":
        if buf[:4] != b"HRMC":
            raise ValueError("not a model checkpoint")
        version, hlen = struct.unpack_from("<HI", buf, 4)
        if version != 1:
            raise ValueError(f"unsupported model checkpoint version {version}")
        header = json.loads(buf[10:10 + hlen].decode("utf-8"))
        ps = ParamSet.from_bytes(buf[10 + hlen:])
        cfg = RaterConfig(**header["architecture"])
        if header["tag_branch"] is None:
            audio = AudioRater(cfg, params=ps)
            tag = None
        else:
            audio = AudioRater(cfg, params=ParamSet(
                (k[len("audio."):], t) for k, t in ps.items() if k.startswith("audio.")))
            tag = TagBranch(TagBranchConfig(**header["tag_branch"]), params=ParamSet(
                (k[len("tag."):], t) for k, t in ps.items() if k.startswith("tag.")))
        audio.input_mean = np.asarray(header["input_mean"])[:, None]
        audio.input_scale = np.asarray(header["input_scale"])[:, None]
        r = cls(audio, tag, header["mu"])
        r.target_mean = header["target_mean"]
        r.target_scale = header["target_scale"]
        return r

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "HybridRater":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


class SiameseRater:
    """Both legs of a pair are scored by one and the same :class:`HybridRater`."""

    def __init__(self, rater: HybridRater):
        self._rater = rater

    @property
    def left(self) -> HybridRater:
        return self._rater

    @property
    def right(self) -> HybridRater:
        return self._rater

    @property
    def params(self) -> ParamSet:
        return self._rater.params

    def score_pairs(self, x_i, x_j, tags_i=None, tags_j=None) -> Tuple[Tensor, Tensor]:
        # one forward pass over the stacked legs; split afterwards
        n = len(x_i)
        x = np.concatenate([x_i, x_j])
        tags = None if tags_i is None else np.concatenate([tags_i, tags_j])
        s = self._rater.score(x, tags)
        return T.gather(s, slice(0, n)), T.gather(s, slice(n, 2 * n))


def rate(rater: HybridRater, x, tags=None):
    """Blended score of one mel matrix (returns a float) or a batch (returns an array)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
        if tags is not None and rater.mu > 0:
            tags = np.asarray(tags, dtype=np.float64)[None]
    out = rater.score(x, tags).data
    return float(out[0]) if single else out.copy()


# ------------------------------------------------------------------- losses


def _is_tensor(*xs) -> bool:
    return any(isinstance(x, Tensor) for x in xs)


def loss_rate(scores, targets):
    """Mean squared error between predicted scores and hit scores."""
    s = scores if isinstance(scores, Tensor) else Tensor(scores)
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    if s.data.size == 0 or y.size == 0:
        raise ValueError("loss_rate needs at least one song")
    if s.data.size != y.size:
        raise ValueError(f"{s.data.size} scores but {y.size} targets")
    out = T.mean(T.square(T.sub(y, T.reshape(s, (-1,)))))
    return out if isinstance(scores, Tensor) else out.item()


def delta(y_i, y_j):
    """+1 where ``y_i >= y_j`` (ties included), -1 otherwise."""
    res = np.where(np.asarray(y_i) >= np.asarray(y_j), 1.0, -1.0)
    return int(res) if res.ndim == 0 else res


def _pair_targets(pairs):
    if hasattr(pairs, "y_i"):
        return np.asarray(pairs.y_i, dtype=np.float64), np.asarray(pairs.y_j, dtype=np.float64)
    y_i, y_j = pairs
    return np.asarray(y_i, dtype=np.float64).reshape(-1), np.asarray(y_j, dtype=np.float64).reshape(-1)


def loss_rank(pairs, scores_i, scores_j, margin: float):
    """Pairwise margin hinge ``mean(max(0, m - delta(y_i, y_j) * (f_i - f_j)))``.

    ``pairs`` is a :class:`~hitrank.sampling.PairBatch` or a ``(y_i, y_j)`` tuple.
    """
    if not margin > 0:
        raise ValueError("margin must be positive")
    y_i, y_j = _pair_targets(pairs)
    if y_i.size == 0:
        raise ValueError("loss_rank needs at least one pair")
    tensor_out = _is_tensor(scores_i, scores_j)
    si, sj = T.as_tensor(scores_i), T.as_tensor(scores_j)
    if not (si.data.size == sj.data.size == y_i.size == y_j.size):
        raise ValueError("pair targets and scores differ in length")
    d = delta(y_i, y_j).reshape(-1)
    diff = T.sub(T.reshape(si, (-1,)), T.reshape(sj, (-1,)))
    out = T.mean(T.relu(T.sub(margin, T.mul(d, diff))))
    return out if tensor_out else out.item()


def loss_multi(rate_loss, rank_loss, w: float):
    """``(1 - w) * rate_loss + w * rank_loss``."""
    if not 0.0 <= w <= 1.0:
        raise ValueError("w must lie in [0, 1]")
    if _is_tensor(rate_loss, rank_loss):
        return T.add(T.mul(T.as_tensor(rate_loss), 1.0 - w), T.mul(T.as_tensor(rank_loss), w))
    return (1.0 - w) * rate_loss + w * rank_loss


# ------------------------------------------------------------------ training


@dataclass
class TrainResult:
    rater: HybridRater
    loss_trace: List[float]


def _check_finite(value: float, epoch: int, step: int) -> None:
    if not np.isfinite(value):
        raise TrainingDiverged(f"loss became {value} at epoch {epoch}, step {step}; "
                               "lower the learning rate or the target scale")


def train(rater: HybridRater, features: np.ndarray, targets: np.ndarray, tags=None,
          weights: Optional[LossWeights] = None, optimizer: Optional[OptimizerConfig] = None,
          pairs: Optional[np.ndarray] = None,
          pair_sampler: Optional[Callable[[int], np.ndarray]] = None,
          seed: int = 0, standardize: bool = True) -> TrainResult:
    """Fit ``rater`` in place by minibatch SGD.

    Without ``pairs``/``pair_sampler`` this is plain rating (MSE) training over
    songs. With them, each step takes a batch of index pairs, scores both legs
    with the same parameters and minimizes ``loss_multi`` where the rating
    term covers both legs of every pair. ``pair_sampler(epoch)`` draws fresh
    pairs each epoch; a fixed ``pairs`` array is reused.
    """
    opt = optimizer or OptimizerConfig()
    weights = weights or LossWeights(w=0.0)
    features = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if len(features) == 0 or len(features) != len(y):
        raise ValueError("need a non-empty feature set aligned with targets")
    if rater.uses_tags and tags is None:
        raise ValueError("rater blends tag features but no tags were given")
    if standardize:
        rater.target_mean = float(y.mean())
        rater.target_scale = float(y.std()) or 1.0
    ys = (y - rater.target_mean) / rater.target_scale
    rater.audio.fit_input_scaling(features)

    rng = np.random.default_rng(seed)
    sgd = SGD(rater.params, lr=opt.lr, momentum=opt.momentum)
    siamese = SiameseRater(rater)
    use_tags = rater.uses_tags
    trace: List[float] = []
    siamese_mode = pairs is not None or pair_sampler is not None

    for epoch in range(opt.epochs):
        total, count = 0.0, 0
        if siamese_mode:
            ep_pairs = pair_sampler(epoch) if pair_sampler is not None else pairs
            ep_pairs = np.asarray(ep_pairs)
            if len(ep_pairs) == 0:
                raise ValueError("no training pairs")
            order = rng.permutation(len(ep_pairs))
            for step, lo in enumerate(range(0, len(order), opt.batch_size)):
                b = ep_pairs[order[lo:lo + opt.batch_size]]
                i, j = b[:, 0], b[:, 1]
                s_i, s_j = siamese.score_pairs(
                    features[i], features[j],
                    tags[i] if use_tags else None, tags[j] if use_tags else None)
                l_rate = loss_rate(T.concat(s_i, s_j), np.concatenate([ys[i], ys[j]]))
                loss = l_rate
                if weights.w > 0:
                    l_rank = loss_rank((ys[i], ys[j]), s_i, s_j, weights.margin)
                    loss = loss_multi(l_rate, l_rank, weights.w)
                value = loss.item()
                _check_finite(value, epoch, step)
                T.backward(loss, rater.params)
                sgd.step()
                total += value * len(b)
                count += len(b)
        else:
            order = rng.permutation(len(y))
            for step, lo in enumerate(range(0, len(order), opt.batch_size)):
                idx = order[lo:lo + opt.batch_size]
                s = rater.score(features[idx], tags[idx] if use_tags else None)
                loss = loss_rate(s, ys[idx])
                value = loss.item()
                _check_finite(value, epoch, step)
                T.backward(loss, rater.params)
                sgd.step()
                total += value * len(idx)
                count += len(idx)
        trace.append(total / count)
        logger.debug("epoch %d loss %.6g", epoch, trace[-1])
    return TrainResult(rater=rater, loss_trace=trace)

