"""Linear alignment of a robust encoder into a reference embedding space.

A projection ``W`` [d_ref, d_robust] is fit by minibatch SGD on

    L_align = (1/B) * sum_i || phi_ref(x_i) - W phi_robust(x_i) ||^2

with both encoders frozen.  The aligned encoder ``normalize(W phi_robust(x))``
then plugs into the reference space's zero-shot classifier.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from advlab import checkpoint
from advlab.attacks import AttackConfig, pgd
from advlab.encoders import EncoderModel, ZeroShotClassifier, ZeroShotPipeline, encode
from advlab.tensor_core import ComputeGraph, GraphBuilder, value_and_gradient


@dataclass
class ProjectionHead:
    W: np.ndarray  # [d_ref, d_robust]
    bias: np.ndarray | None = None
    history: list[float] = field(default_factory=list, compare=False, repr=False)

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float32)
        if self.W.ndim != 2 or not np.all(np.isfinite(self.W)):
            raise ValueError("projection must be a finite 2-D matrix")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float32)
            if self.bias.shape != (self.W.shape[0],) or not np.all(np.isfinite(self.bias)):
                raise ValueError(f"bias must be a finite vector of length {self.W.shape[0]}")

    @property
    def final_loss(self) -> float | None:
        return self.history[-1] if self.history else None


@dataclass(frozen=True)
class AlignConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    t_max: int = 200
    epochs: int = 6
    batch_size: int = 1
    seed: int = 0
    bias: bool = False

    def __post_init__(self):
        if self.lr <= 0 or self.t_max <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError(f"invalid AlignConfig: {self}")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("momentum and weight decay must be non-negative")


@lru_cache(maxsize=None)
def _align_graph(bias: bool) -> ComputeGraph:
    b = GraphBuilder()
    pred = b.input("fr") @ b.parameter("w_t")
    if bias:
        pred = pred + b.input("ones") @ b.parameter("bias")
    return b.build(b.sum(b.mse(pred, b.input("fc"))))


def alignment_loss(head: ProjectionHead, feats_r, feats_c) -> float:
    """Mean over samples of the squared l2 residual."""
    pred = np.asarray(feats_r, np.float64) @ head.W.T.astype(np.float64)
    if head.bias is not None:
        pred = pred + head.bias
    return float(np.mean(np.sum((np.asarray(feats_c, np.float64) - pred) ** 2, axis=1)))


def fit_projection(feats_r, feats_c, cfg: AlignConfig = AlignConfig(), init: np.ndarray | None = None) -> ProjectionHead:
    """Fit ``W`` mapping rows of ``feats_r`` onto rows of ``feats_c``.

    SGD with momentum and weight decay; the learning rate follows a cosine
    annealing schedule with period ``t_max`` epochs, stepped once per epoch.
    ``W`` starts uniform in +-1/sqrt(d_robust) unless ``init`` is given.
    """
    fr = np.asarray(feats_r, dtype=np.float32)
    fc = np.asarray(feats_c, dtype=np.float32)
    if len(fr) == 0:
        raise ValueError("empty alignment dataset")
    if len(fr) != len(fc):
        raise ValueError("feature sets differ in length")
    n, d_r = fr.shape
    d_c = fc.shape[1]
    rng = np.random.default_rng(cfg.seed)
    if init is None:
        lim = 1.0 / math.sqrt(d_r)
        w_t = rng.uniform(-lim, lim, (d_r, d_c)).astype(np.float32)
    else:
        init = np.asarray(init, dtype=np.float32)
        if init.shape != (d_c, d_r):
            raise ValueError(f"init shape {init.shape} != {(d_c, d_r)}")
        w_t = init.T.copy()
    params = {"w_t": w_t}
    if cfg.bias:
        params["bias"] = np.zeros((1, d_c), dtype=np.float32)
    vel = {k: np.zeros_like(v) for k, v in params.items()}
    graph = _align_graph(cfg.bias)
    head = ProjectionHead(w_t.T.copy(), params["bias"][0].copy() if cfg.bias else None)
    head.history.append(alignment_loss(head, fr, fc))
    for epoch in range(cfg.epochs):
        lr = np.float32(cfg.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / cfg.t_max)))
        perm = rng.permutation(n)
        for s in range(0, n, cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            bind = {"fr": fr[idx], "fc": fc[idx], **params}
            if cfg.bias:
                bind["ones"] = np.ones((len(idx), 1), np.float32)
            # mse averages over B*d_c elements; L_align averages over B only
            _, grads = value_and_gradient(graph, bind, list(params))
            for k in params:
                g = grads[k] * np.float32(d_c)
                if cfg.weight_decay:
                    g = g + np.float32(cfg.weight_decay) * params[k]
                vel[k] = np.float32(cfg.momentum) * vel[k] + g
                params[k] = params[k] - lr * vel[k]
        head = ProjectionHead(params["w_t"].T.copy(), params["bias"][0].copy() if cfg.bias else None, head.history)
        head.history.append(alignment_loss(head, fr, fc))
    if not np.all(np.isfinite(head.W)):
        raise FloatingPointError("alignment diverged")
    return head


def train_alignment(robust: EncoderModel, reference: EncoderModel, images, cfg: AlignConfig = AlignConfig()) -> ProjectionHead:
    """Align ``robust`` to ``reference`` on ``images``; both encoders stay frozen."""
    images = np.asarray(images, dtype=np.float32)
    if len(images) == 0:
        raise ValueError("empty alignment dataset")
    return fit_projection(encode(robust, images), encode(reference, images), cfg)


def aligned_pipeline(head: ProjectionHead, robust: EncoderModel, classifier: ZeroShotClassifier,
                     name: str | None = None) -> ZeroShotPipeline:
    return ZeroShotPipeline(robust, classifier, head.W, head.bias, name or f"aligned-{robust.identifier}")


def aligned_encode(head: ProjectionHead, robust: EncoderModel, image) -> np.ndarray:
    """``normalize(W phi_robust(image))``; zero-norm projections are rejected."""
    if head.W.shape[1] != robust.embed_dim:
        raise ValueError(f"projection {head.W.shape} does not accept embed_dim {robust.embed_dim}")
    e = encode(robust, image)
    p = e @ head.W.T
    if head.bias is not None:
        p = p + head.bias
    n = np.linalg.norm(p, axis=-1, keepdims=True)
    if np.any(n <= 1e-12):
        raise ValueError("aligned embedding has zero norm")
    return (p / n).astype(np.float32)


def zero_shot_adversarial_eval(head: ProjectionHead, robust: EncoderModel, classifier: ZeroShotClassifier,
                               images, labels, eps: float = 1 / 255, steps: int = 10) -> dict:
    """Clean and PGD robust zero-shot accuracy of the aligned encoder.

    The attack lowers the cosine similarity between the aligned embedding and
    the true class embedding.
    """
    pipe = aligned_pipeline(head, robust, classifier)
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels)
    clean = pipe.predict(images) == labels
    cfg = AttackConfig(family="pgd", eps=eps, iterations=steps, loss="cos")
    res = pgd(pipe.loss_fn("cos"), images, labels, cfg, pipe.predict)
    robust_ok = pipe.predict(res.x_adv) == labels
    return {"clean_acc": float(np.mean(clean)), "robust_acc": float(np.mean(robust_ok)),
            "attack": res}


def save_head(path, head: ProjectionHead) -> None:
    tensors = {"W": head.W}
    if head.bias is not None:
        tensors["bias"] = head.bias
    checkpoint.save(path, tensors, {"kind": "projection"})


def load_head(path) -> ProjectionHead:
    tensors, meta = checkpoint.load(path)
    if meta.get("kind") != "projection":
        raise checkpoint.CheckpointError(f"{path}: not a projection checkpoint")
    return ProjectionHead(tensors["W"], tensors.get("bias"))
