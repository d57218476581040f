"""Acceptance criteria 1-10, each at its stated tolerance.

Every test records one PASS/FAIL line that is echoed in the terminal summary.
The desk-scale artifacts come from :mod:`desk` and are cached between runs.
"""
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from conftest import needs_mnist

import desk
from advforge import attacks, cli, data, detect_residual, evalkit, nn, pipeline

pytestmark = [needs_mnist, pytest.mark.slow]

HERE = Path(__file__).parent


def check(n, ok, detail):
    desk.record(n, ok, detail)
    assert ok, f"criterion {n}: {detail}"


def pr(truth, flags):
    return evalkit.precision_recall(truth, flags)


def test_c01_victim_model():
    net, info = desk.model()
    cfg = desk.config()
    ok = info["test_accuracy"] >= 0.97 and info["seconds"] <= 600 and cfg.train_count >= 10_000 and cfg.epochs == 5
    check(1, ok, f"test accuracy {100 * info['test_accuracy']:.2f}% after {cfg.epochs} epochs on {cfg.train_count} images in {info['seconds']:.0f}s")


def _same_region(net, x, stencil):
    """True when every stencil point shares x's ReLU masks and max-pool winners."""
    _, g0 = net.run(x[None])
    _, gs = net.run(stencil)
    return all(a is None or isinstance(a, tuple) or np.array_equal(np.broadcast_to(a, b.shape), b) for a, b in zip(g0, gs))


def test_c02_gradient_matches_finite_differences(victim):
    # Central differences estimate the gradient only when the +-h stencil stays
    # in one activation region; draws whose stencil crosses a ReLU or max-pool
    # boundary are redrawn and counted. Uniform inputs are used because raw
    # MNIST has exact max-pool ties on its blank background.
    rng = np.random.default_rng(2)
    h = 1e-4
    worst, kept, redrawn = 0.0, 0, 0
    while kept < 10:
        xi = rng.uniform(size=victim.input_shape)
        label = int(rng.integers(0, 10))
        m = xi.size
        eye = np.eye(m).reshape(m, *xi.shape)
        if not (_same_region(victim, xi, xi[None] + h * eye) and _same_region(victim, xi, xi[None] - h * eye)):
            redrawn += 1
            continue
        g = nn.grad_input(victim, xi[None], np.array([label]))[0]
        plus = nn.cross_entropy(nn.forward(victim, xi[None] + h * eye), label)
        minus = nn.cross_entropy(nn.forward(victim, xi[None] - h * eye), label)
        fd = ((plus - minus) / (2 * h)).reshape(xi.shape)
        worst = max(worst, np.linalg.norm(g - fd) / np.linalg.norm(fd))
        kept += 1
    check(2, worst <= 1e-3, f"worst relative L2 error {worst:.2e} over 10 random (input, label) pairs on the trained victim (h={h:g}; {redrawn} draws straddled a kink and were redrawn)")


def test_c03_local_affine_exactness(victim, mnist_test):
    x = mnist_test[0][:100]
    am = nn.local_affine_output(victim, x)
    y = nn.forward(victim, x)
    err_f = np.abs(y - (np.einsum("bnm,bm->bn", am.a, x.reshape(100, -1)) + am.d)).max()
    pair = detect_residual.residual_image(am, x)
    lhs = np.abs(np.einsum("bnm,bm->bn", am.a, pair.ignored)).max(axis=1)
    bound = 1e-6 * (1 + np.abs(am.y).max(axis=1))
    ok = err_f <= 1e-6 and np.all(lhs <= bound)
    check(3, ok, f"max |f(x)-(Ax+d)| {err_f:.1e}; max |A x_ign| / bound {np.max(lhs / bound):.2e} on 100 images")


def test_c04_attack_validity(mnist_test):
    x, _ = mnist_test
    bim_ds, bim = desk.attack("bim")
    df_ds, df = desk.attack("deepfool")
    adv = bim_ds.is_adversarial
    linf = np.abs(bim_ds.images[adv] - x[bim_ds.source_index[adv]]).reshape(adv.sum(), -1).max(axis=1)
    in_ball = bool(np.all(linf <= desk.config().bim_eps + 1e-12))
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(10):
        w, b = rng.normal(size=(5, 8)), rng.normal(size=5)
        x0 = rng.normal(size=8)
        f = w @ x0 + b
        l0 = int(np.argmax(f))
        # closed form: smallest |f_k - f_l0| / ||w_k - w_l0|| step over k != l0
        best = min((k for k in range(5) if k != l0), key=lambda k: abs(f[k] - f[l0]) / np.linalg.norm(w[k] - w[l0]))
        wk = w[best] - w[l0]
        r = abs(f[best] - f[l0]) / (wk @ wk) * wk
        res = attacks.deepfool(nn.affine_net(w, b), x0, overshoot=0.02, u_min=-np.inf, u_max=np.inf)
        worst = max(worst, np.abs(res.adversarial.ravel() - x0 - 1.02 * r).max())
    ok = bim["success_rate"] >= 0.99 and in_ball and df["success_rate"] >= 0.99 and worst <= 1e-8
    check(
        4, ok,
        f"BIM success {100 * bim['success_rate']:.2f}% (max linf {linf.max():.4f}); DeepFool success {100 * df['success_rate']:.2f}%; "
        f"affine one-step error {worst:.1e}",
    )


def test_c05_histogram_detector():
    clean = desk.hist_verdicts("bim", True, 0.0)
    p = pr(clean.truth, clean.hist)
    orig = desk.hist_verdicts("bim", False, desk.NOISE_SIGMA)
    reinf = desk.hist_verdicts("bim", True, desk.NOISE_SIGMA)
    r_orig, r_reinf = pr(orig.truth, orig.hist).recall, pr(reinf.truth, reinf.hist).recall
    ok = p.precision >= 0.93 and p.recall >= 0.90 and r_reinf - r_orig >= 0.05
    check(
        5, ok,
        f"no noise P {100 * p.precision:.1f}% R {100 * p.recall:.1f}%; sigma 15 recall original {100 * r_orig:.1f}% "
        f"vs reinforcement {100 * r_reinf:.1f}% (gap {100 * (r_reinf - r_orig):+.1f} points, need +5)",
    )


def test_c06_regularization_detector():
    base = desk.reg_verdicts("bim", regularized=False)
    reg = desk.reg_verdicts("bim", regularized=True)
    pb, pg = pr(base.truth, base.reg), pr(reg.truth, reg.reg)
    ok = pg.recall - pb.recall >= 0.08 and pg.precision is not None and pg.precision >= 0.85
    prec = "null" if pg.precision is None else f"{100 * pg.precision:.1f}%"
    check(6, ok, f"recall plain {100 * pb.recall:.1f}% vs regularized {100 * pg.recall:.1f}%; regularized precision {prec}")


def test_c07_residual_methods():
    ps = {m: pr(v.truth, v.resid) for m in "ABC" for v in [desk.resid_verdicts("bim", m)]}
    df = desk.resid_verdicts("deepfool", "C")
    r_df = pr(df.truth, df.resid).recall
    prec = {m: ps[m].precision or 0.0 for m in "ABC"}
    ok = prec["B"] - prec["A"] >= 0.10 and prec["C"] - prec["A"] >= 0.10 and r_df >= 0.88
    check(
        7, ok,
        "BIM precision/recall " + ", ".join(f"{m} {100 * prec[m]:.1f}/{100 * ps[m].recall:.1f}" for m in "ABC")
        + f"; C recall on DeepFool {100 * r_df:.1f}%",
    )


def test_c08_combination_rules():
    lines, ok = [], True
    for method in ("bim", "deepfool"):
        v = desk.combined(method)
        flags = {r: v.flags(r) for r in evalkit.RULES + evalkit.SINGLE}
        rec = {r: pr(v.truth, f).recall for r, f in flags.items()}
        forced = (
            rec["T2"] >= max(rec["R"], rec["H"], rec["I"])
            and rec["T1"] <= min(rec["R"], rec["H"], rec["I"])
            and np.all(flags["T1"] <= flags["T4"])
            and np.all(flags["T4"] <= flags["H"])
        )
        ev = evalkit.evaluate(v)
        auc = ev["auc"]["envelope"]
        ok &= bool(forced) and auc >= 0.95
        t4 = pr(v.truth, flags["T4"])
        if method == "bim":
            ok &= t4.precision is not None and t4.precision >= 0.95 and t4.recall >= 0.80
        lines.append(f"{method}: containments {'hold' if forced else 'BROKEN'}, T4 P {100 * (t4.precision or 0):.1f}% R {100 * t4.recall:.1f}%, AUC {100 * auc:.1f}%")
    check(8, ok, "; ".join(lines))


PROPERTY_TESTS = [
    "test_numerics.py::test_pinv_moore_penrose_conditions",
    "test_numerics.py::test_pinv_moore_penrose_at_largest_size",
    "test_numerics.py::test_pure_functions_bit_identical",
    "test_detect_reg.py::test_regularize_constant_is_fixed_point",
    "test_detect_reg.py::test_regularize_huge_lambda_keeps_input",
    "test_detect_reg.py::test_huge_lambda_matches_plain_retraining",
    "test_detect_reg.py::test_detect_reg_deterministic",
    "test_detect_hist.py::test_every_channel_histogram_is_normalised",
    "test_detect_hist.py::test_svm_objective_decreases_and_is_deterministic",
    "test_attacks.py::test_clip_eps_table",
    "test_attacks.py::test_clip_eps_matches_scalar_formula",
    "test_detect_residual.py::test_method_c_iterates_stay_in_range",
    "test_detect_residual.py::test_verdict_monotone_in_theta",
    "test_detect_residual.py::test_methods_are_deterministic",
    "test_evalkit.py::test_combination_truth_table",
]


def test_c09_property_suites(victim, mnist_test):
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *(str(HERE / t) for t in PROPERTY_TESTS)],
        capture_output=True, text=True, cwd=HERE.parent,
    )
    x, y = mnist_test
    cfg = desk.config()
    reruns = []
    for method in pipeline.ATTACKS:
        a = data.dumps_detection_set(pipeline.attack_set(victim, x, y, method, 20, cfg)[0])
        b = data.dumps_detection_set(pipeline.attack_set(victim, x, y, method, 20, cfg)[0])
        reruns.append(a == b)
    ds = pipeline.attack_set(victim, x, y, "bim", 20, cfg)[0]
    csv = [evalkit.dumps_csv(pipeline.detect("resid-c", victim, ds, cfg).verdicts, ["I"]) for _ in range(2)]
    reruns.append(csv[0] == csv[1])
    ok = proc.returncode == 0 and all(reruns)
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    check(9, ok, f"{len(PROPERTY_TESTS)} property tests: {summary}; byte-identical pipeline reruns {sum(reruns)}/{len(reruns)}")


def test_c10_end_to_end_cli(tmp_path):
    t0 = time.time()
    m, svm = tmp_path / "victim.advf", tmp_path / "svm.advf"

    def run(*argv):
        code = cli.main([str(a) for a in argv])
        assert code == 0, argv
        return code

    run("--seed", 0, "train", "--out", m)
    run("attack", "--model", m, "--method", "bim", "--count", 500, "--pool", "ref", "--out", tmp_path / "ref.advd")
    for method in pipeline.ATTACKS:
        run("attack", "--model", m, "--method", method, "--count", 500, "--out", tmp_path / f"{method}.advd")
        for det in pipeline.DETECTORS:
            run(
                "detect", "--model", m, "--detector", det, "--set", tmp_path / f"{method}.advd",
                "--ref", tmp_path / "ref.advd", "--svm", svm, "--out", tmp_path / f"{method}_{det}.csv",
            )
        parts = [tmp_path / f"{method}_{d}.csv" for d in ("reg", "hist", "resid-c")]
        run("eval", *parts, "--name", method, "--out", tmp_path / "report" / method)
    secs = time.time() - t0
    bundle = [f"{m}/{f}" for m in pipeline.ATTACKS for f in ("summary.md", f"verdicts_{m}.csv", f"roc_{m}.svg", f"pr_{m}.svg")]
    missing = [b for b in bundle if not (tmp_path / "report" / b).exists()]
    v, rules = evalkit.read_csv(tmp_path / "report" / "bim" / "verdicts_bim.csv")
    ok = secs <= 3600 and not missing and rules == list(evalkit.RULES) and v.truth.sum() >= 495
    check(10, ok, f"train, 500+500 attacks, 5 detectors x 2 sets, T1-T4 report in {secs / 60:.1f} min; missing files: {missing or 'none'}")
