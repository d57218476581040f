"""Basic Iterative Method and DeepFool, batched over images."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .nn import U_MAX, U_MIN


class PreconditionError(ValueError):
    pass


@dataclass
class AttackResult:
    """Per-image attack outcome; every field has a leading batch axis."""

    adversarial: np.ndarray
    iterations_used: np.ndarray
    original_label: np.ndarray
    adversarial_label: np.ndarray
    succeeded: np.ndarray
    loss_trace: list | None = None

    def distances(self, x0):
        diff = (self.adversarial - np.asarray(x0)).reshape(len(self.adversarial), -1)
        return np.abs(diff).max(axis=1), np.linalg.norm(diff, axis=1)

    @property
    def success_rate(self) -> float:
        return float(np.mean(self.succeeded)) if len(self.succeeded) else float("nan")


def clip_eps(x_prime, x0, eps, u_min=U_MIN, u_max=U_MAX):
    """min{u_max, x0+eps, max{u_min, x0-eps, x'}} per pixel."""
    x_prime = np.asarray(x_prime, np.float64)
    x0 = np.asarray(x0, np.float64)
    if x_prime.shape != x0.shape:
        raise ValueError("shape mismatch")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    return np.minimum(np.minimum(u_max, x0 + eps), np.maximum(np.maximum(u_min, x0 - eps), x_prime))


def _check_labels(net, x0, labels):
    pred = nn.predict(net, x0)
    if labels is not None and np.any(pred != np.asarray(labels)):
        bad = int(np.sum(pred != np.asarray(labels)))
        raise PreconditionError(f"{bad} input(s) are already misclassified")
    return pred


def bim(net, x0, eps=0.25, step=0.01, max_iter=100, labels=None, u_min=U_MIN, u_max=U_MAX, trace=False) -> AttackResult:
    """Iterated signed-gradient steps clipped to the eps-ball around ``x0``.

    The loss label stays fixed to the original prediction. Each image stops at
    the first iterate the net classifies differently.
    """
    x0 = net.batchify(x0)
    orig = _check_labels(net, x0, labels)
    x = x0.copy()
    done = np.zeros(len(x0), bool)
    iters = np.zeros(len(x0), np.int64)
    adv_label = orig.copy()
    losses = [[] for _ in range(len(x0))] if trace else None
    for k in range(1, max_iter + 1):
        active = np.flatnonzero(~done)
        if len(active) == 0:
            break
        loss, _, g = nn.loss_and_grad_input(net, x[active], orig[active])
        if trace:
            for j, i in enumerate(active):
                losses[i].append(float(loss[j]))
        x[active] = clip_eps(x[active] + step * np.sign(g), x0[active], eps, u_min, u_max)
        iters[active] = k
        pred = nn.predict(net, x[active])
        flipped = pred != orig[active]
        done[active[flipped]] = True
        adv_label[active] = pred
    if trace:
        final = nn.cross_entropy(nn.forward(net, x), orig)
        for i in range(len(x0)):
            losses[i].append(float(final[i]))
    return AttackResult(x, iters, orig, adv_label, adv_label != orig, losses)


def deepfool(net, x0, max_iter=50, overshoot=0.02, labels=None, u_min=U_MIN, u_max=U_MAX, box_aware=True) -> AttackResult:
    """Step to the nearest boundary of the local linearisation until the class flips.

    The accumulated step is scaled by ``1 + overshoot`` and clipped to the
    value range before each classification check. With ``box_aware`` the
    linearisation ignores pixels sitting on a bound that the step would push
    further out, so clipping does not swallow the step.
    """
    x0 = net.batchify(x0)
    orig = _check_labels(net, x0, labels)
    n = len(x0)
    flat0 = x0.reshape(n, -1)
    r_tot = np.zeros_like(flat0)
    x = x0.copy()
    done = np.zeros(n, bool)
    dead = np.zeros(n, bool)
    iters = np.zeros(n, np.int64)
    for k in range(1, max_iter + 1):
        active = np.flatnonzero(~done & ~dead)
        if len(active) == 0:
            break
        am = nn.local_affine_output(net, x[active])
        rows = np.arange(len(active))
        l0 = orig[active]
        w = am.a - am.a[rows, l0][:, None, :]
        if box_aware:
            # drop coordinates pinned at a bound that the step would push outward
            xa = x[active].reshape(len(active), 1, -1)
            w = np.where(((xa <= u_min) & (w < 0)) | ((xa >= u_max) & (w > 0)), 0.0, w)
        f = am.y - am.y[rows, l0][:, None]
        wn = np.linalg.norm(w, axis=2)
        valid = wn > 0
        valid[rows, l0] = False
        ratio = np.full(f.shape, np.inf)
        np.divide(np.abs(f), wn, out=ratio, where=valid)
        best = np.argmin(ratio, axis=1)
        degenerate = ~np.isfinite(ratio[rows, best])
        dead[active[degenerate]] = True
        ok = ~degenerate
        wb = w[rows, best]
        step = (np.abs(f[rows, best]) / np.where(ok, wn[rows, best] ** 2, 1.0))[:, None] * wb
        step[~ok] = 0.0
        # keep the accumulated step feasible so the overshoot acts on what survives clipping
        r_tot[active] = np.clip(flat0[active] + r_tot[active] + step, u_min, u_max) - flat0[active]
        x[active] = np.clip(flat0[active] + (1 + overshoot) * r_tot[active], u_min, u_max).reshape(x[active].shape)
        iters[active[ok]] = k
        pred = nn.predict(net, x[active])
        done[active[pred != l0]] = True
    adv_label = nn.predict(net, x)
    x[dead & ~done] = x0[dead & ~done]
    adv_label[dead & ~done] = orig[dead & ~done]
    return AttackResult(x, iters, orig, adv_label, adv_label != orig)
