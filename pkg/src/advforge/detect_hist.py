"""Histogram detector: per-channel histograms of first-conv activations fed to a linear SVM.

With the reinforcement step enabled, each image contributes two histogram
blocks: one from the image itself and one from a copy pushed along the
negative normalised loss gradient of its own predicted class.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn


@dataclass
class HistogramConfig:
    bins: int = 64
    layer: int = 0
    ranges: np.ndarray | None = None
    reinforcement_eps: float = 0.05
    use_reinforcement: bool = True

    def __post_init__(self):
        if self.bins < 2:
            raise ValueError("bins must be >= 2")
        if self.reinforcement_eps < 0:
            raise ValueError("reinforcement_eps must be >= 0")

    def feature_length(self, channels: int) -> int:
        return (1 + int(self.use_reinforcement)) * channels * self.bins


@dataclass
class SvmConfig:
    c: float = 1.0
    epochs: int = 1000
    batch: int = 64
    seed: int = 0


@dataclass
class SvmModel:
    weights: np.ndarray
    bias: float
    feature_mean: np.ndarray
    feature_std: np.ndarray
    hyper: SvmConfig = field(default_factory=SvmConfig)
    loss_trace: list = field(default_factory=list)

    def decision(self, feats) -> np.ndarray:
        feats = np.atleast_2d(np.asarray(feats, np.float64))
        if feats.shape[1] != len(self.weights):
            raise ValueError(f"feature length {feats.shape[1]} does not match model ({len(self.weights)})")
        return ((feats - self.feature_mean) / self.feature_std) @ self.weights + self.bias

    def predict(self, feats) -> np.ndarray:
        return (self.decision(feats) > 0).astype(np.int64)


def channel_histograms(fmap, ranges, bins: int) -> np.ndarray:
    """Normalised histograms of |activation| per channel, concatenated.

    ``fmap`` is ``(batch, channels, h, w)``. Bin edges split ``[0, range_c]``
    evenly; values beyond the range land in the last bin.
    """
    fmap = np.asarray(fmap, np.float64)
    if fmap.ndim == 3:
        fmap = fmap[None]
    b, c = fmap.shape[:2]
    ranges = np.broadcast_to(np.asarray(ranges, np.float64), (c,))
    if np.any(ranges <= 0):
        raise ValueError("histogram ranges must be positive")
    vals = np.abs(fmap.reshape(b, c, -1))
    idx = np.minimum((vals / ranges[None, :, None] * bins).astype(np.int64), bins - 1)
    # one flat bincount over (image, channel, bin)
    offs = (np.arange(b * c).reshape(b, c, 1)) * bins
    counts = np.bincount((idx + offs).ravel(), minlength=b * c * bins).reshape(b, c, bins)
    return (counts / vals.shape[-1]).reshape(b, c * bins)


def reinforcement_step(net, x, eps: float):
    """x_new = x - eps * grad/||grad|| * ||x||, with the loss taken at x's own prediction.

    Returns ``(x_new, ok)``; images with a zero gradient come back unchanged
    with ``ok`` False. No clipping is applied.
    """
    x = net.batchify(x)
    labels = nn.predict(net, x)
    g = nn.grad_input(net, x, labels)
    gflat = g.reshape(len(x), -1)
    gnorm = np.linalg.norm(gflat, axis=1)
    xnorm = np.linalg.norm(x.reshape(len(x), -1), axis=1)
    ok = gnorm > 0
    scale = np.where(ok, eps * xnorm / np.where(ok, gnorm, 1.0), 0.0)
    return x - scale[:, None, None, None] * g, ok


def first_conv_maps(net, x, layer: int = 0) -> np.ndarray:
    return nn.layer_output(net, x, layer)


def calibrate_ranges(net, x, cfg: HistogramConfig, batch_size=500) -> np.ndarray:
    """Per-channel max |activation| over ``x``."""
    x = net.batchify(x)
    best = None
    for i in range(0, len(x), batch_size):
        m = np.abs(first_conv_maps(net, x[i : i + batch_size], cfg.layer)).max(axis=(0, 2, 3))
        best = m if best is None else np.maximum(best, m)
    return np.maximum(best, 1e-12)


def build_hist_feature(net, x, cfg: HistogramConfig, batch_size=500) -> np.ndarray:
    if cfg.ranges is None:
        raise ValueError("histogram ranges are not calibrated")
    x = net.batchify(x)
    out = []
    for i in range(0, len(x), batch_size):
        xb = x[i : i + batch_size]
        blocks = [channel_histograms(first_conv_maps(net, xb, cfg.layer), cfg.ranges, cfg.bins)]
        if cfg.use_reinforcement:
            xn, _ = reinforcement_step(net, xb, cfg.reinforcement_eps)
            blocks.append(channel_histograms(first_conv_maps(net, xn, cfg.layer), cfg.ranges, cfg.bins))
        out.append(np.concatenate(blocks, axis=1))
    return np.concatenate(out)


def _svm_objective(z, s, w, b, lam):
    return float(np.mean(np.maximum(0.0, 1.0 - s * (z @ w + b))) + 0.5 * lam * w @ w)


def train_svm(feats, labels, hyper: SvmConfig = SvmConfig()) -> SvmModel:
    """Linear soft-margin SVM by seeded minibatch subgradient descent (Pegasos steps).

    Minimises ``sum_i hinge_i + ||w||^2 / (2C)`` on z-scored features. Labels
    are 0 (real) / 1 (adversarial).
    """
    x = np.asarray(feats, np.float64)
    y = np.asarray(labels, np.int64)
    if len(np.unique(y)) < 2:
        raise ValueError("SVM training needs both classes")
    mean = x.mean(axis=0)
    std = np.maximum(x.std(axis=0), 1e-8)
    z = (x - mean) / std
    s = np.where(y == 1, 1.0, -1.0)
    n, dim = z.shape
    lam = 1.0 / (hyper.c * n)
    rng = np.random.default_rng(hyper.seed)
    w = np.zeros(dim)
    b = 0.0
    w_avg = np.zeros(dim)
    b_avg = 0.0
    radius = 1.0 / np.sqrt(lam)
    trace = [_svm_objective(z, s, w, b, lam)]
    t = 0
    for _ in range(hyper.epochs):
        order = rng.permutation(n)
        for i in range(0, n, hyper.batch):
            t += 1
            idx = order[i : i + hyper.batch]
            zb, sb = z[idx], s[idx]
            viol = sb * (zb @ w + b) < 1.0
            eta = 1.0 / (lam * (t + 100))
            gw = lam * w - (sb[viol, None] * zb[viol]).sum(axis=0) / len(idx)
            gb = -sb[viol].sum() / len(idx)
            w = w - eta * gw
            b = b - eta * gb
            norm = np.linalg.norm(w)
            if norm > radius:
                w *= radius / norm
            # running average of iterates smooths the subgradient jitter
            w_avg += (w - w_avg) / t
            b_avg += (b - b_avg) / t
        trace.append(_svm_objective(z, s, w_avg, b_avg, lam))
    return SvmModel(w_avg, float(b_avg), mean, std, hyper, trace)


def detect_hist(model: SvmModel, net, x, cfg: HistogramConfig):
    """Return ``(is_adversarial, score)``; the score is the signed SVM margin."""
    score = model.decision(build_hist_feature(net, x, cfg))
    return score > 0, score


def svm_aux(model: SvmModel, cfg: HistogramConfig) -> dict:
    """Arrays for the model container's auxiliary section."""
    return {
        "weights": model.weights,
        "bias": np.array([model.bias]),
        "feature_mean": model.feature_mean,
        "feature_std": model.feature_std,
        "ranges": np.asarray(cfg.ranges),
        "cfg": np.array([cfg.bins, cfg.layer, cfg.reinforcement_eps, float(cfg.use_reinforcement), model.hyper.c, model.hyper.epochs, model.hyper.seed]),
    }


def svm_from_aux(sec: dict):
    bins, layer, eps, use_r, c, epochs, seed = sec["cfg"]
    cfg = HistogramConfig(bins=int(bins), layer=int(layer), ranges=sec["ranges"], reinforcement_eps=float(eps), use_reinforcement=bool(use_r))
    model = SvmModel(sec["weights"], float(sec["bias"][0]), sec["feature_mean"], sec["feature_std"], SvmConfig(c=c, epochs=int(epochs), seed=int(seed)))
    return model, cfg
