"""l-infinity gradient attacks and their orchestration.

Attacks are written against a plain callable ``loss_fn(x, y) -> (loss, grad)``
returning per-sample losses [B] and the gradient of their sum w.r.t. ``x``.
Untargeted attacks ascend the loss of the true label; targeted attacks descend
the loss of the target class.  Every attack returns the best-loss iterate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

LossFn = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]
PredictFn = Callable[[np.ndarray], np.ndarray]

FAMILIES = ("pgd", "apgd")
LOSSES = ("ce", "cos")


class AttackInvariantError(RuntimeError):
    """An attack produced an iterate outside the eps-ball or pixel range."""


@dataclass(frozen=True)
class AttackConfig:
    family: str = "pgd"
    eps: float = 8 / 255
    iterations: int = 10
    step_size: float | None = None  # pgd: 2.5*eps/iterations; apgd: initial step 2*eps
    targeted: bool = False
    target: int | None = None
    loss: str = "ce"  # "ce" or "cos" (negative cosine to the label/target class row)
    seed: int = 0
    random_start: bool = False

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown attack family {self.family!r}")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss selector {self.loss!r}")
        if self.eps < 0 or self.iterations < 0:
            raise ValueError("eps and iterations must be non-negative")
        if self.step_size is not None and self.step_size <= 0 and self.iterations > 0:
            raise ValueError("step size must be positive")

    @property
    def step(self) -> float:
        if self.step_size is not None:
            return self.step_size
        if self.family == "apgd":
            return 2.0 * self.eps
        return 2.5 * self.eps / max(self.iterations, 1)


@dataclass
class AttackResult:
    x_adv: np.ndarray
    best_loss: np.ndarray  # raw loss at x_adv, per sample
    trace: np.ndarray  # [iterations + 1, B] best-so-far raw loss
    success: np.ndarray  # bool [B]; all False when no predictor was given
    iterations: int
    success_iter: np.ndarray | None = None  # -1 when never successful


def check_feasible(x_adv: np.ndarray, x0: np.ndarray, eps: float, tol: float = 1e-6) -> None:
    dev = float(np.max(np.abs(x_adv.astype(np.float64) - x0.astype(np.float64)), initial=0.0))
    if dev > eps + tol:
        raise AttackInvariantError(f"eps-ball violated: max |x_adv - x| = {dev:.3g} > eps {eps:.3g}")
    if x_adv.size and (x_adv.min() < 0 or x_adv.max() > 1):
        raise AttackInvariantError("pixel range violated: x_adv outside [0, 1]")


def _box(x0: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    e = np.float32(eps)
    return np.maximum(x0 - e, np.float32(0)), np.minimum(x0 + e, np.float32(1))


def _start(x0, cfg: AttackConfig, lo, hi):
    if not cfg.random_start or cfg.eps == 0:
        return x0.copy()
    rng = np.random.default_rng(cfg.seed)
    noise = rng.uniform(-cfg.eps, cfg.eps, x0.shape).astype(np.float32)
    return np.clip(x0 + noise, lo, hi)


def _eval(loss_fn: LossFn, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Call ``loss_fn`` and check it returns one finite loss per sample and a gradient shaped like ``x``."""
    loss, g = loss_fn(x, y)
    loss = np.asarray(loss, dtype=np.float32)
    g = np.asarray(g, dtype=np.float32)
    if loss.shape != (len(x),):
        raise ValueError(f"loss_fn must return one scalar loss per sample: got shape {loss.shape} for batch {len(x)}")
    if g.shape != x.shape:
        raise ValueError(f"gradient shape {g.shape} does not match input shape {x.shape}")
    if not (np.all(np.isfinite(loss)) and np.all(np.isfinite(g))):
        raise AttackInvariantError("non-finite loss or gradient")
    return loss, g


def _check_inputs(x0: np.ndarray, y: np.ndarray) -> None:
    if x0.ndim < 1 or y.shape != (len(x0),):
        raise ValueError(f"labels shape {y.shape} does not match batch of {len(x0)}")


def _per_sample(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((-1,) + (1,) * (ndim - 1))


def _finish(x0, best_x, best_obj, trace, sign, cfg, y, predict, best_iter) -> AttackResult:
    check_feasible(best_x, x0, cfg.eps)
    if predict is None:
        success = np.zeros(len(x0), dtype=bool)
        success_iter = None
    else:
        p0 = predict(x0)
        p = predict(best_x)
        hit0 = (p0 == y) if cfg.targeted else (p0 != y)
        success = (p == y) if cfg.targeted else (p != y)
        success_iter = np.where(hit0, 0, np.where(success, best_iter, -1))
        # the best-loss iterate can be less successful than the clean input
        # only when best_iter == 0, i.e. best_x is x0 itself
    return AttackResult(best_x, sign * best_obj, sign * trace, success, cfg.iterations, success_iter)


def pgd(loss_fn: LossFn, x, y, cfg: AttackConfig, predict: PredictFn | None = None) -> AttackResult:
    """Sign-gradient ascent projected onto the eps-ball and [0, 1]."""
    x0 = np.asarray(x, dtype=np.float32)
    y = np.asarray(y)
    _check_inputs(x0, y)
    sign = np.float32(-1.0 if cfg.targeted else 1.0)
    lo, hi = _box(x0, cfg.eps)
    xk = _start(x0, cfg, lo, hi)
    loss, g = _eval(loss_fn, xk, y)
    obj = sign * loss
    best_x, best_obj = xk.copy(), obj.copy()
    best_iter = np.zeros(len(x0), dtype=np.int64)
    trace = [best_obj.copy()]
    if cfg.eps > 0:
        step = np.float32(cfg.step)
        for k in range(cfg.iterations):
            xk = np.clip(xk + step * np.sign(sign * g), lo, hi)
            loss, g = _eval(loss_fn, xk, y)
            obj = sign * loss
            better = obj > best_obj
            best_x[better] = xk[better]
            best_obj = np.where(better, obj, best_obj)
            best_iter[better] = k + 1
            trace.append(best_obj.copy())
    else:
        trace.extend(best_obj.copy() for _ in range(cfg.iterations))
    return _finish(x0, best_x, best_obj, np.stack(trace), sign, cfg, y, predict, best_iter)


def apgd_checkpoints(n_iter: int) -> list[int]:
    """Iterations at which APGD may halve its step size."""
    p = [0.0, 0.22]
    while True:
        nxt = p[-1] + max(p[-1] - p[-2] - 0.03, 0.06)
        if nxt > 1:
            break
        p.append(nxt)
    return sorted({math.ceil(q * n_iter - 1e-9) for q in p[1:] if math.ceil(q * n_iter - 1e-9) > 0})


def apgd(loss_fn: LossFn, x, y, cfg: AttackConfig, predict: PredictFn | None = None,
         rho: float = 0.75, alpha: float = 0.75) -> AttackResult:
    """Auto-PGD: momentum steps with checkpointed step halving.

    At each checkpoint a sample's step is halved, and it restarts from its
    best point, if fewer than ``rho`` of the steps since the last checkpoint
    increased the objective, or if neither the step nor the best objective
    changed since the previous checkpoint.
    """
    x0 = np.asarray(x, dtype=np.float32)
    y = np.asarray(y)
    _check_inputs(x0, y)
    B, nd = len(x0), x0.ndim
    sign = np.float32(-1.0 if cfg.targeted else 1.0)
    lo, hi = _box(x0, cfg.eps)
    xk = _start(x0, cfg, lo, hi)
    loss, g = _eval(loss_fn, xk, y)
    obj = sign * loss
    best_x, best_obj, best_g = xk.copy(), obj.copy(), g.copy()
    best_iter = np.zeros(B, dtype=np.int64)
    trace = [best_obj.copy()]
    if cfg.eps == 0:
        trace.extend(best_obj.copy() for _ in range(cfg.iterations))
        return _finish(x0, best_x, best_obj, np.stack(trace), sign, cfg, y, predict, best_iter)

    eta = np.full(B, cfg.step, dtype=np.float32)
    checkpoints = set(apgd_checkpoints(cfg.iterations))
    history = [obj.copy()]  # objective at each iterate
    last_ck = 0
    eta_at_last = eta.copy()
    best_at_last = best_obj.copy()
    x_prev = xk.copy()
    a = np.float32(alpha)
    for k in range(cfg.iterations):
        z = np.clip(xk + _per_sample(eta, nd) * np.sign(sign * g), lo, hi)
        if k == 0:
            x_new = z
        else:
            x_new = np.clip(xk + a * (z - xk) + (1 - a) * (xk - x_prev), lo, hi)
        x_prev, xk = xk, x_new
        loss, g = _eval(loss_fn, xk, y)
        obj = sign * loss
        history.append(obj.copy())
        better = obj > best_obj
        best_x[better] = xk[better]
        best_g[better] = g[better]
        best_obj = np.where(better, obj, best_obj)
        best_iter[better] = k + 1
        trace.append(best_obj.copy())

        it = k + 1
        if it in checkpoints and it < cfg.iterations:
            h = np.stack(history[last_ck:it + 1])
            increases = np.sum(h[1:] > h[:-1], axis=0)
            cond1 = increases < rho * (it - last_ck)
            cond2 = (eta_at_last == eta) & (best_at_last == best_obj)
            reduce = cond1 | cond2
            eta_at_last = eta.copy()
            best_at_last = best_obj.copy()
            eta = np.where(reduce, eta / 2, eta).astype(np.float32)
            if np.any(reduce):
                xk = xk.copy()
                g = g.copy()
                xk[reduce] = best_x[reduce]
                g[reduce] = best_g[reduce]
            last_ck = it
    return _finish(x0, best_x, best_obj, np.stack(trace), sign, cfg, y, predict, best_iter)


def run_attack(loss_fn: LossFn, x, y, cfg: AttackConfig, predict: PredictFn | None = None) -> AttackResult:
    return (apgd if cfg.family == "apgd" else pgd)(loss_fn, x, y, cfg, predict)


def attack_pipeline(pipeline, x, y, cfg: AttackConfig) -> AttackResult:
    """Attack anything exposing ``loss_fn(selector)`` and ``predict``.

    ``y`` holds true labels for untargeted configs.  For targeted configs it
    holds the target classes; when ``y`` is None, ``cfg.target`` is used for
    every sample.
    """
    x = np.asarray(x, dtype=np.float32)
    if y is None:
        if cfg.target is None:
            raise ValueError("targeted attack needs y or cfg.target")
        y = np.full(len(x), cfg.target, dtype=np.int64)
    return run_attack(pipeline.loss_fn(cfg.loss), x, y, cfg, pipeline.predict)


def targeted_attack(pipeline, x, target, cfg: AttackConfig | None = None) -> AttackResult:
    """Drive predictions to ``target`` (int or per-sample array).

    The default budget is 300 APGD iterations at eps = 8/255, a desk-scale
    stand-in for 10,000 iterations.
    """
    if cfg is None:
        cfg = AttackConfig(family="apgd", eps=8 / 255, iterations=300, targeted=True)
    if not cfg.targeted:
        raise ValueError("targeted_attack needs cfg.targeted = True")
    x = np.asarray(x, dtype=np.float32)
    t = np.broadcast_to(np.asarray(target, dtype=np.int64), (len(x),)).copy()
    return attack_pipeline(pipeline, x, t, cfg)


@dataclass
class TwoStageResult:
    scores: np.ndarray  # final per-sample score
    stage1_scores: np.ndarray
    stage2_scores: np.ndarray  # NaN where stage 2 did not run
    rerun: np.ndarray  # bool mask of samples that got stage 2
    x_adv: np.ndarray
    stage1: AttackResult
    stage2: AttackResult | None


def two_stage_attack(pipeline, x, y, stage1: AttackConfig, stage2: AttackConfig,
                     score_fn: Callable[[np.ndarray, np.ndarray], np.ndarray],
                     threshold: float | np.ndarray | None = None) -> TwoStageResult:
    """Cheap attack on everything, expensive re-attack on the survivors.

    Samples whose stage-1 score falls below ``threshold`` are final.  The
    default threshold is 10% of each sample's clean score.  Survivors are
    attacked again from the clean input with ``stage2``; their final score is
    the lower of the two.
    """
    if stage2.iterations < stage1.iterations:
        raise ValueError("stage 2 budget must be at least the stage 1 budget")
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y)
    if threshold is None:
        threshold = 0.1 * np.asarray(score_fn(x, y), dtype=np.float64)
    r1 = attack_pipeline(pipeline, x, y, stage1)
    s1 = np.asarray(score_fn(r1.x_adv, y), dtype=np.float64)
    rerun = ~(s1 < threshold)
    scores = s1.copy()
    s2_all = np.full(len(x), np.nan)
    x_adv = r1.x_adv.copy()
    r2 = None
    if np.any(rerun):
        idx = np.flatnonzero(rerun)
        r2 = attack_pipeline(pipeline, x[idx], y[idx], stage2)
        s2 = np.asarray(score_fn(r2.x_adv, y[idx]), dtype=np.float64)
        s2_all[idx] = s2
        take = s2 < s1[idx]
        scores[idx] = np.minimum(s1[idx], s2)
        x_adv[idx[take]] = r2.x_adv[take]
    return TwoStageResult(scores, s1, s2_all, rerun, x_adv, r1, r2)


# --------------------------------------------------------------------------
# ensembles and transfer


class EnsemblePipeline:
    """Multi-encoder model: weighted average of member logits and losses."""

    def __init__(self, members: Sequence[tuple[object, float]], name: str = "ensemble"):
        if not members:
            raise ValueError("ensemble needs at least one member")
        if any(w <= 0 for _, w in members):
            raise ValueError("ensemble weights must be positive")
        shapes = {tuple(p.in_shape) for p, _ in members}
        if len(shapes) != 1:
            raise ValueError(f"ensemble members disagree on input shape: {shapes}")
        total = sum(w for _, w in members)
        self.members = [(p, np.float32(w / total)) for p, w in members]
        self.in_shape = shapes.pop()
        self.name = name

    def logits(self, x):
        out = None
        for p, w in self.members:
            z = w * p.logits(x)
            out = z if out is None else out + z
        return out

    def predict(self, x):
        return np.argmax(self.logits(x), axis=-1)

    def loss_fn(self, loss: str = "ce") -> LossFn:
        fns = [(p.loss_fn(loss), w) for p, w in self.members]

        def f(x, y):
            total_l, total_g = None, None
            for fn, w in fns:
                val, g = fn(x, y)
                val, g = w * val, w * g
                total_l = val if total_l is None else total_l + val
                total_g = g if total_g is None else total_g + g
            return total_l, total_g

        return f


def ensemble_attack(models: Sequence[tuple[object, float]], x, y, cfg: AttackConfig) -> AttackResult:
    """Attack the weighted-average loss of several pipelines at once.

    Success flags refer to the joint model (weighted-average logits).
    """
    return attack_pipeline(EnsemblePipeline(models), x, y, cfg)


def transfer_eval(surrogates: Sequence, targets: Sequence, x, y, cfg: AttackConfig,
                  score_fn: Callable | None = None) -> np.ndarray:
    """Matrix [surrogate, target] of target scores on surrogate-crafted inputs.

    The default score is target accuracy on the adversarial inputs.
    """
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y)
    if len({tuple(m.in_shape) for m in [*surrogates, *targets]}) != 1:
        raise ValueError("all models must share one input shape")
    if score_fn is None:
        def score_fn(model, xa, yy):
            return float(np.mean(model.predict(xa) == yy))
    out = np.zeros((len(surrogates), len(targets)))
    for i, s in enumerate(surrogates):
        xa = attack_pipeline(s, x, y, cfg).x_adv
        for j, t in enumerate(targets):
            out[i, j] = score_fn(t, xa, y)
    return out
