"""Residual-image detector (Methods A, B and C).

Around an input the network is an affine map ``y = A x + d``. Projecting the
input onto the null space of ``A`` gives the residual image (the part of the
pattern the classifier ignores); the remainder is the perceived image. The
three methods repeatedly nudge the input using the residual and the loss
gradient of the originally predicted class, then flag the input when the
softmax confidence for that class ends below a threshold.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn, numerics
from .nn import U_MAX, U_MIN

DEFAULTS = {
    "A": {"step_eps": 1.0, "t_max": 20, "theta": 0.9},
    "B": {"step_eps": 1.0, "t_max": 20, "theta": 0.65},
    "C": {"step_eps": 1.0, "t_max": 5, "theta": 0.7},
}


@dataclass
class ResidualDetectConfig:
    method: str = "C"
    step_eps: float | None = None
    t_max: int | None = None
    theta: float | None = None
    tv_fidelity: float = 10.0
    tv_iters: int = 30
    centers: numerics.ClusterModel | None = None
    clamp: tuple = (U_MIN, U_MAX)
    pinv_rtol: float = numerics.DEFAULT_PINV_RTOL

    def __post_init__(self):
        if self.method not in DEFAULTS:
            raise ValueError(f"unknown method {self.method!r}")
        for key, val in DEFAULTS[self.method].items():
            if getattr(self, key) is None:
                setattr(self, key, val)
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")
        if self.clamp[0] >= self.clamp[1]:
            raise ValueError("clamp range is empty")


@dataclass
class ResidualPair:
    ignored: np.ndarray
    perceived: np.ndarray
    affine: nn.LocalAffineMap


@dataclass
class ResidualResult:
    flagged: np.ndarray
    score: np.ndarray
    label: np.ndarray
    final_image: np.ndarray
    softmax_trace: np.ndarray = field(repr=False)

    def verdict(self, theta) -> np.ndarray:
        return self.score < theta


def _check_consistent(affine, x, y):
    pred = affine.apply(x)
    tol = 1e-6 * (1.0 + np.abs(y).max(axis=1))
    if np.any(np.abs(pred - y).max(axis=1) > tol):
        raise ValueError("output is inconsistent with the affine map at x")


def residual_image(affine: nn.LocalAffineMap, x, y=None, rtol=numerics.DEFAULT_PINV_RTOL) -> ResidualPair:
    """x_ign = x - A^+ (y - d); perceived = x - x_ign."""
    x = np.asarray(x, np.float64).reshape(len(affine.a), -1)
    if y is None:
        y = affine.y
    y = np.asarray(y, np.float64).reshape(len(affine.a), -1)
    _check_consistent(affine, x, y)
    a_pinv = numerics.pinv(affine.a, rtol)
    perceived = np.einsum("bmn,bn->bm", a_pinv, y - affine.d)
    ignored = x - perceived
    return ResidualPair(ignored, x - ignored, affine)


def residual_image_centered(affine: nn.LocalAffineMap, x, centers: numerics.ClusterModel, rtol=numerics.DEFAULT_PINV_RTOL) -> ResidualPair:
    """Residual against the cluster center nearest to the output instead of the output itself."""
    x = np.asarray(x, np.float64).reshape(len(affine.a), -1)
    y_cent = centers.centers[centers.nearest(affine.y)]
    a_pinv = numerics.pinv(affine.a, rtol)
    ignored = x - np.einsum("bmn,bn->bm", a_pinv, y_cent - affine.d)
    return ResidualPair(ignored, x - ignored, affine)


def perceptual_probe(feat_affine: nn.LocalAffineMap, eps: float) -> np.ndarray:
    """Minimum-norm delta with W delta = eps * h(anchor): the pattern the features respond to."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    p = feat_affine.y
    return eps * np.einsum("bmf,bf->bm", numerics.pinv(feat_affine.a), p)


def fit_output_centers(net, x_train, k=None, seed=0) -> numerics.ClusterModel:
    """k-means over pre-softmax training outputs (k defaults to the class count)."""
    return numerics.kmeans(nn.forward(net, x_train), k or net.n_classes, seed=seed)


def _step(net, x0, x_cur, label, cfg):
    n = len(x_cur)
    flat = x_cur.reshape(n, -1)
    am = nn.local_affine_output(net, x_cur)
    grad = nn.grad_input(net, x_cur, label).reshape(n, -1)
    a_pinv = numerics.pinv(am.a, cfg.pinv_rtol)
    if cfg.method == "A":
        perceived = np.einsum("bmn,bn->bm", a_pinv, am.y - am.d)
        ign = (flat - perceived).reshape(x_cur.shape)
        x_r = numerics.tv_denoise(ign, cfg.tv_fidelity, cfg.tv_iters).reshape(n, -1)
        x_add = np.sign(x_r * grad) * grad
        return (flat + cfg.step_eps * x_add).reshape(x_cur.shape)
    if cfg.method == "B":
        y_cent = cfg.centers.centers[cfg.centers.nearest(am.y)]
        ign = flat - np.einsum("bmn,bn->bm", a_pinv, y_cent - am.d)
        x_add = np.sign(ign * grad) * grad
        return (flat + cfg.step_eps * x_add).reshape(x_cur.shape)
    # method C
    x0f = x0.reshape(n, -1)
    perceived = np.einsum("bmn,bn->bm", a_pinv, am.y - am.d)
    x0n = np.linalg.norm(x0f, axis=1)[:, None]
    ign_hat = (x0f * flat - x0f * perceived) / x0n
    x_add = np.abs(ign_hat * grad) * np.sign(ign_hat)
    return np.clip(flat + cfg.step_eps * x_add, cfg.clamp[0], cfg.clamp[1]).reshape(x_cur.shape)


def iterate(net, x0, labels, cfg: ResidualDetectConfig):
    """Yield the perturbed batch after each of the ``cfg.t_max`` steps."""
    x0 = net.batchify(x0)
    x_cur = x0.copy()
    for _ in range(cfg.t_max):
        x_cur = _step(net, x0, x_cur, labels, cfg)
        yield x_cur


def run_method(net, x0, cfg: ResidualDetectConfig, batch_size=200) -> ResidualResult:
    """Perturb each image for ``t_max`` steps and threshold the final confidence."""
    x0 = net.batchify(x0)
    if cfg.method == "B" and cfg.centers is None:
        raise ValueError("method B needs output cluster centers")
    if cfg.method == "C" and np.any(np.linalg.norm(x0.reshape(len(x0), -1), axis=1) == 0):
        raise ValueError("method C is undefined for an all-zero image")
    labels = nn.predict(net, x0)
    finals, traces = [], []
    for i in range(0, len(x0), batch_size):
        xb0 = x0[i : i + batch_size]
        lb = labels[i : i + batch_size]
        rows = np.arange(len(xb0))
        x_cur = xb0
        trace = [nn.softmax(nn.forward(net, x_cur))[rows, lb]]
        for x_cur in iterate(net, xb0, lb, cfg):
            trace.append(nn.softmax(nn.forward(net, x_cur))[rows, lb])
        finals.append(x_cur)
        traces.append(np.array(trace))
    final = np.concatenate(finals) if finals else x0.copy()
    trace = np.concatenate(traces, axis=1) if traces else np.zeros((cfg.t_max + 1, 0))
    score = trace[-1]
    return ResidualResult(score < cfg.theta, score, labels, final, trace)


def method_a(net, x0, cfg: ResidualDetectConfig | None = None, **kw) -> ResidualResult:
    return run_method(net, x0, cfg or ResidualDetectConfig(method="A", **kw))


def method_b(net, x0, cfg: ResidualDetectConfig | None = None, **kw) -> ResidualResult:
    return run_method(net, x0, cfg or ResidualDetectConfig(method="B", **kw))


def method_c(net, x0, cfg: ResidualDetectConfig | None = None, **kw) -> ResidualResult:
    return run_method(net, x0, cfg or ResidualDetectConfig(method="C", **kw))


def write_pgm(path, img, lo=None, hi=None):
    """Binary 8-bit PGM, linearly rescaled from [lo, hi] (defaults: the image's own range)."""
    img = np.asarray(img, np.float64)
    img = img.reshape(img.shape[-2:])
    lo = img.min() if lo is None else lo
    hi = img.max() if hi is None else hi
    scaled = np.zeros_like(img) if hi <= lo else (img - lo) / (hi - lo)
    px = np.clip(np.round(scaled * 255), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{px.shape[1]} {px.shape[0]}\n255\n".encode())
        fh.write(px.tobytes())
