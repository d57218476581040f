"""Regularisation detector.

A joint similarity graph is built over a labelled reference set S and the
images V under test. Feature vectors are smoothed on that graph by the
nonlocal p-Laplacian fixed-point iteration, the classifier head is refit on
the smoothed S features against their correct labels, and an image in V is
flagged when the refit head (on its smoothed features) disagrees with the
original network.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn

DISTANCES = ("l2", "cosine", "l1")


@dataclass
class RegularizationConfig:
    p: float = 1.0
    lam: float = 1.0
    iters: int = 10
    eps_guard: float = 1e-8
    distance: str = "cosine"
    weight_source: str = "image"
    sigma: float | None = None
    knn: int | None = None
    retrain: nn.RetrainConfig = None

    def __post_init__(self):
        if self.p < 1:
            raise ValueError("p must be >= 1")
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        if self.iters < 1:
            raise ValueError("iters must be >= 1")
        if self.distance not in DISTANCES:
            raise ValueError(f"unknown distance {self.distance!r}")
        if self.weight_source not in ("feature", "image"):
            raise ValueError(f"unknown weight source {self.weight_source!r}")
        if self.retrain is None:
            self.retrain = nn.RetrainConfig()


def pairwise_distance(a, b, kind: str = "l2") -> float:
    a = np.asarray(a, np.float64).ravel()
    b = np.asarray(b, np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError("vectors differ in dimension")
    if kind == "l2":
        return float(np.linalg.norm(a - b))
    if kind == "l1":
        return float(np.abs(a - b).sum())
    if kind == "cosine":
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0 or nb == 0:
            raise ValueError("cosine distance is undefined for a zero vector")
        return float(1.0 - a @ b / (na * nb))
    raise ValueError(f"unknown distance {kind!r}")


def distance_matrix(x, kind: str = "l2") -> np.ndarray:
    x = np.asarray(x, np.float64).reshape(len(x), -1)
    if kind == "l2":
        sq = (x * x).sum(1)
        d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * x @ x.T, 0.0)
        np.fill_diagonal(d2, 0.0)
        return np.sqrt(d2)
    if kind == "cosine":
        norms = np.linalg.norm(x, axis=1)
        if np.any(norms == 0):
            raise ValueError("cosine distance is undefined for a zero vector")
        u = x / norms[:, None]
        d = np.clip(1.0 - u @ u.T, 0.0, 2.0)
        np.fill_diagonal(d, 0.0)
        return d
    if kind == "l1":
        out = np.empty((len(x), len(x)))
        for i in range(len(x)):
            out[i] = np.abs(x - x[i]).sum(axis=1)
        return out
    raise ValueError(f"unknown distance {kind!r}")


@dataclass
class WeightedGraph:
    weights: np.ndarray
    g: np.ndarray
    sigma: float

    @property
    def n(self) -> int:
        return len(self.weights)


def build_graph(vectors, payload, cfg: RegularizationConfig) -> WeightedGraph:
    """Gaussian-weighted graph ``w = exp(-d^2 / sigma^2)`` with zero diagonal.

    ``vectors`` are what distances are measured on (images or feature
    vectors); ``payload`` is the vertex function g (the feature vectors).
    Without an explicit sigma, sigma^2 is the mean squared off-diagonal distance.
    """
    if len(vectors) == 0:
        raise ValueError("graph needs at least one vertex")
    d = distance_matrix(vectors, cfg.distance)
    n = len(d)
    d2 = d * d
    if cfg.sigma is not None:
        sigma2 = float(cfg.sigma) ** 2
    else:
        sigma2 = float(d2.sum() / max(n * (n - 1), 1))
    sigma2 = max(sigma2, 1e-300)
    w = np.exp(-d2 / sigma2)
    np.fill_diagonal(w, 0.0)
    if cfg.knn is not None and cfg.knn < n - 1:
        keep = np.zeros_like(w, dtype=bool)
        nbrs = np.argsort(-w, axis=1, kind="stable")[:, : cfg.knn]
        keep[np.arange(n)[:, None], nbrs] = True
        w = np.where(keep | keep.T, w, 0.0)
    return WeightedGraph(w, np.asarray(payload, np.float64).reshape(n, -1).copy(), float(np.sqrt(sigma2)))


def gradient_norms(w, g, eps_guard=0.0) -> np.ndarray:
    """|grad_w g_i(u)| = sqrt(sum_v w(u,v) (g_i(u) - g_i(v))^2 + eps_guard) for every u, i."""
    deg = w.sum(axis=1)[:, None]
    sq = deg * g * g - 2.0 * g * (w @ g) + w @ (g * g)
    return np.sqrt(np.maximum(sq, 0.0) + eps_guard)


def regularize(graph: WeightedGraph, cfg: RegularizationConfig, trace=None) -> np.ndarray:
    """Run ``cfg.iters`` synchronous fixed-point sweeps, componentwise.

    g_i(v) <- (lam g0_i(v) + sum_u gamma_i(u,v) g_i(u)) / (lam + sum_u gamma_i(u,v)),
    gamma_i(u,v) = w(u,v) (|grad g_i(u)|^(p-2) + |grad g_i(v)|^(p-2)).
    """
    w = graph.weights
    g0 = graph.g
    g = g0.copy()
    deg = w.sum(axis=1)[:, None]
    for _ in range(cfg.iters):
        a = gradient_norms(w, g, cfg.eps_guard) ** (cfg.p - 2.0)
        num = w @ (a * g) + a * (w @ g)
        den = w @ a + a * deg
        g = (cfg.lam * g0 + num) / (cfg.lam + den)
        if trace is not None:
            trace.append(g.copy())
    return g


@dataclass
class RegResult:
    flagged: np.ndarray
    c_orig: np.ndarray
    c_reg: np.ndarray
    head: nn.Dense


def detect_reg(net, s_images, s_labels, v_images, cfg: RegularizationConfig, regularized: bool = True) -> RegResult:
    """Transductive detection over ``v_images`` given reference set S with correct labels.

    With ``regularized=False`` the head is refit on the raw S features and V
    is classified from raw features (plain adversarial retraining baseline).
    """
    if len(s_images) == 0:
        raise ValueError("reference set S is empty")
    s_images = net.batchify(s_images)
    v_images = net.batchify(v_images)
    h_s = nn.feature(net, s_images)
    h_v = nn.feature(net, v_images)
    h_all = np.concatenate([h_s, h_v])
    if regularized:
        if cfg.weight_source == "image":
            vecs = np.concatenate([s_images, v_images]).reshape(len(h_all), -1)
        else:
            vecs = h_all
        graph = build_graph(vecs, h_all, cfg)
        h_r = regularize(graph, cfg)
    else:
        h_r = h_all
    head = nn.retrain_last_layer(h_r[: len(h_s)], s_labels, net.n_classes, init=net.head, cfg=cfg.retrain)
    c_orig = np.argmax(net.head.forward(h_v)[0], axis=1)
    c_reg = np.argmax(head.forward(h_r[len(h_s) :])[0], axis=1)
    return RegResult(c_orig != c_reg, c_orig, c_reg, head)
