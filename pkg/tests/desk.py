"""Cached desk-scale experiment shared by the acceptance tests.

Artifacts live in ``$ADVFORGE_CACHE`` (default ``<repo>/.cache/desk``) and are
rebuilt only when missing, so a warm cache makes the acceptance suite fast.
The first cold run takes a few hours on one core.
"""
from __future__ import annotations

import json
import os
import time
from pathlib import Path

import numpy as np

from advforge import data, detect_hist, detect_reg, detect_residual, evalkit, nn, numerics, pipeline

ROOT = Path(__file__).resolve().parents[1]
CACHE = Path(os.environ.get("ADVFORGE_CACHE", ROOT / ".cache" / "desk"))
EVAL_COUNT = 2000
REF_COUNT = 1000
NOISE_SIGMA = 15.0
ACCEPTANCE: dict = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"


def config(**kw) -> pipeline.RunConfig:
    return pipeline.RunConfig(seed=0, **kw)


def have_mnist() -> bool:
    try:
        root = data.data_dir()
        return all((root / f).exists() for pair in data.MNIST_FILES.values() for f in pair)
    except Exception:
        return False


def _json(path, build):
    path = CACHE / path
    if not path.exists():
        CACHE.mkdir(parents=True, exist_ok=True)
        out = build()
        path.write_text(json.dumps(out, indent=1))
    return json.loads(path.read_text())


def model():
    path = CACHE / "victim.advf"
    if not path.exists():
        CACHE.mkdir(parents=True, exist_ok=True)
        t0 = time.time()
        net, history = pipeline.train(config())
        secs = time.time() - t0
        x, y = data.load_mnist("test")
        nn.save_model(path, net)
        (CACHE / "victim.json").write_text(json.dumps({"seconds": secs, "history": history, "test_accuracy": nn.accuracy(net, x, y)}))
    net, _ = nn.load_model(path)
    return net, json.loads((CACHE / "victim.json").read_text())


def attack(method: str, pool: str = "eval", count: int | None = None):
    count = count if count is not None else (EVAL_COUNT if pool == "eval" else REF_COUNT)
    path = CACHE / f"{pool}_{method}_{count}.advd"
    if not path.exists():
        net, _ = model()
        x, y = data.load_mnist("test")
        t0 = time.time()
        ds, res = pipeline.attack_set(net, x, y, method, count, config(), pool=pool)
        linf, l2 = res.distances(x[ds.source_index[:count]])
        stats = {
            "seconds": time.time() - t0,
            "success_rate": res.success_rate,
            "max_linf": float(linf.max()),
            "mean_l2": float(l2[res.succeeded].mean()),
            "mean_iterations": float(res.iterations_used[res.succeeded].mean()),
        }
        data.save_detection_set(path, ds)
        path.with_suffix(".json").write_text(json.dumps(stats))
    return data.load_detection_set(path), json.loads(path.with_suffix(".json").read_text())


def _verdict_file(name, build):
    path = CACHE / f"{name}.csv"
    if not path.exists():
        v = build()
        evalkit.write_csv(path, v, [_rule_of(v)])
    v, _ = evalkit.read_csv(path)
    return v


def _rule_of(v):
    return "R" if v.reg is not None else "H" if v.hist is not None else "I"


def reg_verdicts(method="bim", regularized=True):
    def build():
        net, _ = model()
        ref, _ = attack("bim", "ref")
        ds, _ = attack(method)
        cfg = config()
        res = detect_reg.detect_reg(net, ref.images, ref.labels, ds.images, cfg.reg_config(), regularized=regularized)
        return evalkit.Verdicts(np.arange(len(ds)), ds.is_adversarial, reg=res.flagged)

    return _verdict_file(f"reg_{method}_{'graph' if regularized else 'plain'}", build)


def svm(reinforcement=True, noise=0.0):
    path = CACHE / f"svm_{'reinf' if reinforcement else 'orig'}_s{noise:g}.advf"
    net, _ = model()
    if not path.exists():
        ref, _ = attack("bim", "ref")
        m, hcfg = pipeline.fit_svm(net, ref, config(hist_reinforcement=reinforcement, noise_sigma=noise))
        nn.save_model(path, net, aux={"svm": detect_hist.svm_aux(m, hcfg)})
    _, aux = nn.load_model(path)
    return detect_hist.svm_from_aux(aux["svm"])


def hist_verdicts(method="bim", reinforcement=True, noise=0.0):
    def build():
        net, _ = model()
        ds, _ = attack(method)
        cfg = config(hist_reinforcement=reinforcement, noise_sigma=noise)
        return pipeline.detect("hist", net, ds, cfg, svm=svm(reinforcement, noise)).verdicts

    return _verdict_file(f"hist_{method}_{'reinf' if reinforcement else 'orig'}_s{noise:g}", build)


def centers():
    path = CACHE / "centers.npy"
    if not path.exists():
        net, _ = model()
        cm = pipeline.fit_centers(net, config())
        np.save(path, cm.centers)
    c = np.load(path)
    return numerics.ClusterModel(c, 0.0, 0, [])


def resid_verdicts(method="bim", which="C"):
    """Residual verdicts; real items are shared between the attack sets and computed once."""

    def build():
        net, _ = model()
        ds, _ = attack(method)
        cfg = config().resid_config(which, centers() if which == "B" else None)
        real = ~ds.is_adversarial
        if method != "bim":
            base = resid_verdicts("bim", which)
            bim_ds, _ = attack("bim")
            assert np.array_equal(bim_ds.images[~bim_ds.is_adversarial], ds.images[real])
            res = detect_residual.run_method(net, ds.images[~real], cfg)
            flags = np.concatenate([base.resid[~bim_ds.is_adversarial], res.flagged])
            score = np.concatenate([base.resid_score[~bim_ds.is_adversarial], res.score])
        else:
            res = detect_residual.run_method(net, ds.images, cfg)
            flags, score = res.flagged, res.score
        return evalkit.Verdicts(np.arange(len(ds)), ds.is_adversarial, resid=flags, resid_score=score)

    return _verdict_file(f"resid{which}_{method}", build)


def combined(method="bim"):
    return evalkit.join([reg_verdicts(method), hist_verdicts(method), resid_verdicts(method, "C")])
