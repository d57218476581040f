"""Run configuration and the stage functions shared by the CLI and the acceptance suite.

Every random choice is seeded from ``RunConfig.seed`` through a named sub-seed
(``train``, ``split``, ``attack``, ``svm``, ``kmeans``, ``noise``), so each stage
can be rerun on its own and reproduces its outputs exactly.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field, fields

import numpy as np

from . import attacks, data, detect_hist, detect_reg, detect_residual, evalkit, nn

DETECTORS = ("reg", "hist", "resid-a", "resid-b", "resid-c")
ATTACKS = ("bim", "deepfool")


def sub_seed(seed: int, name: str) -> int:
    """Stable 32-bit seed for a named component of a run."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0])


@dataclass
class RunConfig:
    seed: int = 0
    data_dir: str | None = None
    # victim
    train_count: int = 60000
    epochs: int = 5
    lr: float = 0.01
    momentum: float = 0.9
    batch: int = 64
    # sampling of correctly classified test images
    ref_pool: int = 4000
    # attacks
    bim_eps: float = 0.25
    bim_step: float = 0.01
    bim_iters: int = 100
    deepfool_iters: int = 50
    deepfool_overshoot: float = 0.02
    # regularisation detector
    reg_p: float = 1.0
    reg_lambda: float = 1.0
    reg_iters: int = 10
    reg_eps_guard: float = 1e-8
    reg_distance: str = "cosine"
    reg_weights: str = "image"
    reg_sigma: float | None = 0.1
    reg_knn: int | None = None
    retrain_lr: float = 0.5
    retrain_iters: int = 300
    # histogram detector
    hist_bins: int = 64
    hist_eps: float = 0.05
    hist_reinforcement: bool = True
    svm_c: float = 1.0
    svm_epochs: int = 1000
    # residual detector (None = per-method default)
    resid_step_eps: float | None = None
    resid_t_max: int | None = None
    resid_theta: float | None = None
    tv_fidelity: float = 10.0
    tv_iters: int = 30
    kmeans_k: int = 10
    kmeans_count: int = 10000
    # corruption of the evaluated set
    noise_sigma: float = 0.0
    rules: tuple = evalkit.RULES

    @classmethod
    def field_types(cls) -> dict:
        return {f.name: f.type for f in fields(cls)}

    def train_config(self) -> nn.TrainConfig:
        return nn.TrainConfig(lr=self.lr, momentum=self.momentum, epochs=self.epochs, batch=self.batch, seed=sub_seed(self.seed, "train"))

    def reg_config(self) -> detect_reg.RegularizationConfig:
        return detect_reg.RegularizationConfig(
            p=self.reg_p, lam=self.reg_lambda, iters=self.reg_iters, eps_guard=self.reg_eps_guard,
            distance=self.reg_distance, weight_source=self.reg_weights, sigma=self.reg_sigma, knn=self.reg_knn,
            retrain=nn.RetrainConfig(lr=self.retrain_lr, iters=self.retrain_iters),
        )

    def hist_config(self, ranges=None) -> detect_hist.HistogramConfig:
        return detect_hist.HistogramConfig(bins=self.hist_bins, ranges=ranges, reinforcement_eps=self.hist_eps, use_reinforcement=self.hist_reinforcement)

    def svm_config(self) -> detect_hist.SvmConfig:
        return detect_hist.SvmConfig(c=self.svm_c, epochs=self.svm_epochs, seed=sub_seed(self.seed, "svm"))

    def resid_config(self, method: str, centers=None) -> detect_residual.ResidualDetectConfig:
        return detect_residual.ResidualDetectConfig(
            method=method, step_eps=self.resid_step_eps, t_max=self.resid_t_max, theta=self.resid_theta,
            tv_fidelity=self.tv_fidelity, tv_iters=self.tv_iters, centers=centers,
        )


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def train(cfg: RunConfig, log=None):
    """Train the victim on the first ``train_count`` images of a seeded shuffle."""
    x, y = data.load_mnist("train", cfg.data_dir)
    if cfg.train_count < len(x):
        idx = data.split(len(x), {"train": cfg.train_count}, sub_seed(cfg.seed, "train-subset"))["train"]
        x, y = x[idx], y[idx]
    net, history = nn.train_victim(x, y, cfg.train_config(), log=log)
    return net, history


def sample_sources(net, x_test, y_test, count: int, pool: str, cfg: RunConfig) -> np.ndarray:
    """Indices of ``count`` correctly classified test images from the named pool.

    Correct test images are shuffled once per run; the first ``ref_pool`` form
    the ``ref`` pool and the rest the ``eval`` pool, so the two never overlap.
    Within a pool, sources are taken in shuffled order, which makes the BIM
    and DeepFool sets of the same size share their real images.
    """
    correct = np.flatnonzero(nn.predict(net, x_test) == y_test)
    perm = correct[np.random.default_rng(sub_seed(cfg.seed, "split")).permutation(len(correct))]
    if pool == "ref":
        avail = perm[: cfg.ref_pool]
    elif pool == "eval":
        avail = perm[cfg.ref_pool :]
    else:
        raise ValueError(f"unknown pool {pool!r}")
    if count > len(avail):
        raise ValueError(f"pool {pool!r} holds {len(avail)} images, {count} requested")
    return avail[:count]


def run_attack(net, x0, method: str, cfg: RunConfig) -> attacks.AttackResult:
    if method == "bim":
        return attacks.bim(net, x0, eps=cfg.bim_eps, step=cfg.bim_step, max_iter=cfg.bim_iters)
    if method == "deepfool":
        return attacks.deepfool(net, x0, max_iter=cfg.deepfool_iters, overshoot=cfg.deepfool_overshoot)
    raise ValueError(f"unknown attack {method!r}")


def attack_set(net, x_test, y_test, method: str, count: int, cfg: RunConfig, pool: str = "eval"):
    """Real sources followed by their successful adversarial counterparts."""
    src = sample_sources(net, x_test, y_test, count, pool, cfg)
    x0, y0 = x_test[src], y_test[src]
    tag = data.TAGS.index(method)
    if count == 0:
        res = attacks.AttackResult(np.zeros((0,) + x_test.shape[1:]), *(np.zeros(0, np.int64) for _ in range(3)), np.zeros(0, bool))
    else:
        res = run_attack(net, x0, method, cfg)
    ok = res.succeeded
    real = data.DetectionSet(x0, y0, np.zeros(len(src), bool), src, np.zeros(len(src), np.int64))
    adv = data.DetectionSet(res.adversarial[ok], y0[ok], np.ones(int(ok.sum()), bool), src[ok], np.full(int(ok.sum()), tag))
    return data.DetectionSet.concat(real, adv), res


def corrupt(ds: data.DetectionSet, cfg: RunConfig, name: str = "noise") -> np.ndarray:
    return data.add_gaussian_noise(ds.images, cfg.noise_sigma, sub_seed(cfg.seed, name)) if cfg.noise_sigma > 0 else ds.images


def fit_svm(net, ref: data.DetectionSet, cfg: RunConfig):
    """Calibrate ranges and train the SVM on ``ref`` under the run's noise level."""
    x = corrupt(ref, cfg, "noise-ref")
    hcfg = cfg.hist_config()
    hcfg.ranges = detect_hist.calibrate_ranges(net, x, hcfg)
    feats = detect_hist.build_hist_feature(net, x, hcfg)
    return detect_hist.train_svm(feats, ref.is_adversarial.astype(np.int64), cfg.svm_config()), hcfg


def fit_centers(net, cfg: RunConfig):
    x, _ = data.load_mnist("train", cfg.data_dir)
    idx = data.split(len(x), {"k": min(cfg.kmeans_count, len(x))}, sub_seed(cfg.seed, "kmeans-subset"))["k"]
    return detect_residual.fit_output_centers(net, x[idx], k=cfg.kmeans_k, seed=sub_seed(cfg.seed, "kmeans"))


@dataclass
class DetectOutput:
    verdicts: evalkit.Verdicts
    extra: dict = field(default_factory=dict)


def detect(detector: str, net, ds: data.DetectionSet, cfg: RunConfig, ref: data.DetectionSet | None = None, svm=None, centers=None) -> DetectOutput:
    """Run one detector over ``ds`` and return its verdict columns.

    ``ref`` is the labelled reference set: S for the regularisation detector
    and the SVM training set for the histogram detector (unless ``svm`` is
    given as a ``(model, hist_config)`` pair).
    """
    if detector not in DETECTORS:
        raise ValueError(f"unknown detector {detector!r}")
    x = corrupt(ds, cfg)
    ids = np.arange(len(ds))
    v = evalkit.Verdicts(ids, ds.is_adversarial)
    extra = {}
    if detector == "reg":
        if ref is None:
            raise ValueError("the regularisation detector needs a reference set")
        res = detect_reg.detect_reg(net, ref.images, ref.labels, x, cfg.reg_config())
        v.reg = res.flagged
        extra = {"c_orig": res.c_orig, "c_reg": res.c_reg}
    elif detector == "hist":
        if svm is None:
            if ref is None:
                raise ValueError("the histogram detector needs a reference set or a trained SVM")
            svm = fit_svm(net, ref, cfg)
        model, hcfg = svm
        flags, score = detect_hist.detect_hist(model, net, x, hcfg)
        v.hist = flags
        extra = {"svm": svm, "hist_score": score}
    else:
        method = detector[-1].upper()
        if method == "B" and centers is None:
            centers = fit_centers(net, cfg)
        res = detect_residual.run_method(net, x, cfg.resid_config(method, centers))
        v.resid = res.flagged
        v.resid_score = res.score
        extra = {"result": res}
    return DetectOutput(v, extra)
