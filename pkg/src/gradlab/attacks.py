"""First-order attacks and the damage statistics built on them.

Every attack reads gradients from the network in inference form. fgsm and
the scaled l2 step are the exact maximizers of the linearized loss on their
respective balls; pgd iterates projected ascent inside the ball; the
minimal-norm search walks the linearized decision boundary and reports how
far it had to go. Thresholds are quoted as eps_inf, the budget per coordinate,
and rescaled to eps_p = eps_inf * d**(1/p) so that budgets are comparable
across ball exponents and input sizes.

fgsm, step_l2 and pgd accept one sample or a batch; the minimal-norm search
is one sample at a time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import nn
from . import objectives as obj
from .tensor import Tensor

INF = math.inf

_METHODS = ("fgsm", "step-l2", "pgd", "deepfool")


@dataclass(frozen=True)
class AttackSpec:
    """Attack kind plus its budget and iteration knobs.

    eps_inf is the per-coordinate budget before rescaling. steps, step_frac,
    random_start and seed drive pgd; overshoot and max_iter drive the
    minimal-norm boundary search (overshoot is the multiplicative factor
    applied to the accumulated step so the iterate actually crosses).
    """

    method: str = "fgsm"
    p: float = INF
    eps_inf: float = 0.0
    steps: int = 7
    step_frac: float = 0.2
    random_start: bool = True
    seed: int = 0
    overshoot: float = 1.02
    max_iter: int = 50

    def __post_init__(self):
        if self.method not in _METHODS:
            raise ValueError(f"unknown attack {self.method!r}, expected one of {_METHODS}")
        if float(self.p) not in (1.0, 2.0, INF):
            raise ValueError(f"p must be 1, 2 or inf, got {self.p}")
        if self.eps_inf < 0:
            raise ValueError(f"eps_inf must be >= 0, got {self.eps_inf}")
        if self.steps < 1 or self.max_iter < 1:
            raise ValueError("steps and max_iter must be >= 1")


@dataclass
class AttackOutcome:
    """Fields are scalars for a single input, arrays for a batch."""

    perturbed: np.ndarray
    delta_norm: object
    label_before: object
    label_after: object
    success: object
    iterations: int
    zero_gradient: object


def calibrate_threshold(p, eps_inf, d) -> float:
    """eps_p = eps_inf * d**(1/p): fixed per-coordinate budget across p."""
    return obj.rescale_eps(p, eps_inf, d)


def snr_threshold(x, rel=0.005) -> float:
    """eps_inf sized relative to the signal: rel times the rms coordinate of
    x. With the d**(1/p) rescale this keeps ||delta||_p / ||x||_p roughly at
    rel for any p."""
    a = np.asarray(x, dtype=float)
    return float(rel) * float(np.sqrt((a * a).mean()))


def _split(net, x):
    a = np.asarray(x, dtype=float)
    in_rank = len(net.spec.input_shape)
    if a.ndim == in_rank:
        return a[None], False
    if a.ndim == in_rank + 1:
        return a, True
    raise ValueError(f"input rank {a.ndim} does not match spec input "
                     f"{net.spec.input_shape} (optionally batched)")


def _labels_for(labels, n):
    lab = np.atleast_1d(np.asarray(labels)).astype(np.int64)
    if lab.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {lab.shape}")
    return lab


def _outcome(net, x, adv, p, iterations, zero_grad, batched):
    n = x.shape[0]
    delta = (adv - x).reshape(n, -1)
    norms = obj.lp_norm(delta, p, axis=1)
    before = net.predict(Tensor._wrap(x))
    after = net.predict(Tensor._wrap(adv))
    success = after != before
    if batched:
        return AttackOutcome(adv, norms, before, after, success, iterations, zero_grad)
    return AttackOutcome(adv[0], float(norms[0]), int(before[0]), int(after[0]),
                         bool(success[0]), iterations, bool(zero_grad[0]))


def _grads(net, x, labels):
    g = np.asarray(nn.input_gradient(net, Tensor._wrap(x), labels))
    flat = g.reshape(g.shape[0], -1)
    zero = (flat == 0.0).all(axis=1)
    return g, zero


def fgsm(net, x, labels, eps_inf) -> AttackOutcome:
    """One signed step of size eps_inf per coordinate; the exact maximizer of
    the linearized loss on the l_inf ball."""
    xb, batched = _split(net, x)
    lab = _labels_for(labels, xb.shape[0])
    g, zero = _grads(net, xb, lab)
    adv = xb + eps_inf * np.sign(g)
    return _outcome(net, xb, adv, INF, 1, zero, batched)


def step_l2(net, x, labels, eps_inf) -> AttackOutcome:
    """One step of l2 length eps_2 = eps_inf * sqrt(d) along the gradient;
    the exact maximizer of the linearized loss on the l2 ball."""
    xb, batched = _split(net, x)
    lab = _labels_for(labels, xb.shape[0])
    d = int(np.prod(xb.shape[1:]))
    eps_p = calibrate_threshold(2.0, eps_inf, d)
    g, zero = _grads(net, xb, lab)
    flat = g.reshape(g.shape[0], -1)
    norms = np.sqrt((flat * flat).sum(axis=1))
    scale = np.where(norms > 0.0, eps_p / np.maximum(norms, 1e-300), 0.0)
    adv = xb + scale.reshape((-1,) + (1,) * (xb.ndim - 1)) * g
    return _outcome(net, xb, adv, 2.0, 1, zero, batched)


def _project(delta, p, eps_p):
    if p == INF:
        return np.clip(delta, -eps_p, eps_p)
    flat = delta.reshape(delta.shape[0], -1)
    norms = np.sqrt((flat * flat).sum(axis=1))
    scale = np.minimum(1.0, eps_p / np.maximum(norms, 1e-300))
    return delta * scale.reshape((-1,) + (1,) * (delta.ndim - 1))


def pgd_core(grad_fn, x, p, eps_p, steps, step_frac, rng=None):
    """Projected gradient ascent on a ball around x.

    grad_fn maps a batch (N, ...) to the per-sample ascent direction source
    (the raw gradient); x is the batch of centers. Returns the final iterate.
    Exposed separately so it can be exercised on closed-form objectives.
    """
    cur = x.copy()
    if rng is not None:
        cur = x + _project(rng.uniform(-eps_p, eps_p, size=x.shape), p, eps_p)
    step = step_frac * eps_p
    for _ in range(steps):
        g = grad_fn(cur)
        if p == INF:
            cur = cur + step * np.sign(g)
        else:
            flat = g.reshape(g.shape[0], -1)
            norms = np.sqrt((flat * flat).sum(axis=1))
            scale = np.where(norms > 0.0, step / np.maximum(norms, 1e-300), 0.0)
            cur = cur + scale.reshape((-1,) + (1,) * (g.ndim - 1)) * g
        cur = x + _project(cur - x, p, eps_p)
    return cur


def pgd(net, x, labels, spec: AttackSpec) -> AttackOutcome:
    """Iterated projected ascent on the cross-entropy inside the eps_p ball
    (p in {2, inf}), optional uniform random start."""
    p = float(spec.p)
    if p not in (2.0, INF):
        raise ValueError(f"pgd supports p in {{2, inf}}, got {spec.p}")
    xb, batched = _split(net, x)
    lab = _labels_for(labels, xb.shape[0])
    d = int(np.prod(xb.shape[1:]))
    eps_p = calibrate_threshold(p, spec.eps_inf, d)

    def grad_fn(cur):
        g, _ = _grads(net, cur, lab)
        return g

    rng = np.random.default_rng(spec.seed) if spec.random_start else None
    adv = pgd_core(grad_fn, xb, p, eps_p, spec.steps, spec.step_frac, rng)
    _, zero = _grads(net, xb, lab)
    return _outcome(net, xb, adv, p, spec.steps, zero, batched)


def deepfool(net, x, spec: AttackSpec = AttackSpec(method="deepfool")) -> AttackOutcome:
    """Minimal-norm boundary search in l2: at each iterate, step to the
    nearest linearized decision boundary of the currently predicted class;
    the reported delta_norm is the accumulated step length without the
    overshoot factor (ties between classes go to the lowest index).
    """
    x0 = np.asarray(x, dtype=float)
    if x0.ndim != len(net.spec.input_shape):
        raise ValueError("the minimal-norm search runs one sample at a time")
    z0 = net.logits_value(x0)
    c0 = int(np.argmax(z0))
    r_tot = np.zeros_like(x0)
    zero_grad = False
    it = 0
    while it < spec.max_iter:
        cur = x0 + spec.overshoot * r_tot
        z = net.logits_value(cur)
        if it > 0 and int(np.argmax(z)) != c0:
            break
        grads = np.asarray(nn.logit_input_gradients(net, Tensor._wrap(cur)))
        gmat = grads.reshape(z.shape[-1], -1)
        best = None
        for k in range(z.shape[-1]):
            if k == c0:
                continue
            w = gmat[k] - gmat[c0]
            nw = float(np.sqrt((w * w).sum()))
            if nw == 0.0:
                continue
            score = abs(float(z[k] - z[c0])) / nw
            if best is None or score < best[0]:
                best = (score, k, w, nw)
        if best is None:
            zero_grad = True
            break
        score, _, w, nw = best
        r_tot = r_tot + ((score + 1e-12) / nw) * w.reshape(x0.shape)
        it += 1
    adv = x0 + spec.overshoot * r_tot
    after = int(net.predict(Tensor._wrap(adv)))
    return AttackOutcome(adv, float(np.sqrt((r_tot * r_tot).sum())), c0, after,
                         after != c0, it, zero_grad)


def run_attack(net, x, labels, spec: AttackSpec) -> AttackOutcome:
    if spec.method == "fgsm":
        return fgsm(net, x, labels, spec.eps_inf)
    if spec.method == "step-l2":
        return step_l2(net, x, labels, spec.eps_inf)
    if spec.method == "pgd":
        return pgd(net, x, labels, spec)
    return deepfool(net, x, spec)


def first_order_damage(net, x, labels, p, eps_inf):
    """Predicted loss increase eps_p * ||dL/dx||_q per sample (q dual to p)."""
    xb, batched = _split(net, x)
    lab = _labels_for(labels, xb.shape[0])
    d = int(np.prod(xb.shape[1:]))
    eps_p = calibrate_threshold(p, eps_inf, d)
    g, _ = _grads(net, xb, lab)
    norms = obj.lp_norm(g.reshape(g.shape[0], -1), obj.dual_exponent(p), axis=1)
    out = eps_p * norms
    return out if batched else float(out[0])


def damage_stats(net, x_clean, x_adv, labels, eps_p=None) -> dict:
    """Accuracy drop and loss increase from clean to attacked inputs."""
    xb, _ = _split(net, x_clean)
    ab, _ = _split(net, x_adv)
    lab = _labels_for(labels, xb.shape[0])
    z0 = net.logits_value(Tensor._wrap(xb))
    z1 = net.logits_value(Tensor._wrap(ab))
    acc0 = float((np.argmax(z0, axis=-1) == lab).mean())
    acc1 = float((np.argmax(z1, axis=-1) == lab).mean())
    ce0 = float(obj.cross_entropy_each(z0, lab).mean())
    ce1 = float(obj.cross_entropy_each(z1, lab).mean())
    out = {"n": xb.shape[0], "acc_clean": acc0, "acc_adv": acc1,
           "dmg01": acc0 - acc1, "xent_clean": ce0, "xent_adv": ce1,
           "dmgxent": ce1 - ce0}
    out["dmgxent_over_eps"] = (ce1 - ce0) / eps_p if eps_p else float("nan")
    return out


def vulnerability(net, xs, labels, spec: AttackSpec, batch_size=64) -> dict:
    """Mean damage of an attack over a sample set: 0/1 damage (accuracy
    drop), loss damage, loss damage per unit threshold, mean perturbation
    norm and flip rate."""
    xb, _ = _split(net, xs)
    lab = _labels_for(labels, xb.shape[0])
    d = int(np.prod(xb.shape[1:]))
    eps_p = (None if spec.method == "deepfool"
             else calibrate_threshold(spec.p if spec.method != "fgsm" else INF,
                                      spec.eps_inf, d))
    adv = np.empty_like(xb)
    norms = np.empty(xb.shape[0])
    flips = np.empty(xb.shape[0], dtype=bool)
    iters = 0
    for lo in range(0, xb.shape[0], batch_size):
        hi = min(lo + batch_size, xb.shape[0])
        if spec.method == "deepfool":
            for j in range(lo, hi):
                out = deepfool(net, xb[j], spec)
                adv[j], norms[j], flips[j] = out.perturbed, out.delta_norm, out.success
                iters = max(iters, out.iterations)
        else:
            out = run_attack(net, xb[lo:hi], lab[lo:hi], spec)
            adv[lo:hi] = out.perturbed
            norms[lo:hi] = out.delta_norm
            flips[lo:hi] = out.success
            iters = max(iters, out.iterations)
    stats = damage_stats(net, xb, adv, lab, eps_p)
    stats.update(method=spec.method, eps_p=eps_p if eps_p is not None else float("nan"),
                 mean_delta_norm=float(norms.mean()), flip_rate=float(flips.mean()),
                 iterations=iters)
    return stats
