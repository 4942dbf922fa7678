"""Toy vision encoders, the frozen zero-shot classifier, and training loops.

An encoder is a tanh MLP over the flattened image whose output is
l2-normalised.  Classification is zero-shot: logits are a temperature times
the cosine similarity between the embedding and each frozen class embedding.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np

from advlab import checkpoint
from advlab.tensor_core import ComputeGraph, GraphBuilder, forward, value_and_gradient

log = logging.getLogger(__name__)

IN_SHAPE = (3, 16, 16)
LOSSES = ("ce", "cos")


class TrainingError(RuntimeError):
    pass


@dataclass
class EncoderModel:
    """MLP weights ``w0, b0, w1, b1, ...``; ``w_i`` has shape [fan_in, fan_out]."""

    params: dict[str, np.ndarray]
    identifier: str = "encoder"
    in_shape: tuple[int, ...] = IN_SHAPE
    whitening: np.ndarray | None = None  # frozen [in_dim, in_dim] map applied to flat pixels
    history: list[float] = field(default_factory=list, compare=False, repr=False)

    @property
    def n_layers(self) -> int:
        return len(self.params) // 2

    @property
    def in_dim(self) -> int:
        return int(np.prod(self.in_shape))

    @property
    def embed_dim(self) -> int:
        return self.params[f"w{self.n_layers - 1}"].shape[1]

    def copy(self) -> "EncoderModel":
        return EncoderModel({k: v.copy() for k, v in self.params.items()}, self.identifier, self.in_shape,
                            self.whitening)

    def checksum(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k]).tobytes())
        if self.whitening is not None:
            h.update(b"whitening")
            h.update(np.ascontiguousarray(self.whitening).tobytes())
        return h.hexdigest()


@dataclass
class ZeroShotClassifier:
    class_embeddings: np.ndarray
    temperature: float = 10.0

    def __post_init__(self):
        c = np.asarray(self.class_embeddings, dtype=np.float32)
        if c.ndim != 2:
            raise ValueError("class_embeddings must be [n_classes, embed_dim]")
        if not np.allclose(np.linalg.norm(c, axis=1), 1.0, atol=1e-5):
            raise ValueError("class embedding rows must be unit-norm")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        self.class_embeddings = c

    @property
    def n_classes(self) -> int:
        return self.class_embeddings.shape[0]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    epochs: int = 60
    batch_size: int = 32
    schedule: str = "constant"  # or "cosine"
    t_max: int = 0  # cosine period in epochs; 0 means ``epochs``
    seed: int = 0
    adversarial: bool = False
    eps: float = 8 / 255
    pgd_steps: int = 7

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError(f"invalid TrainConfig: {self}")
        if self.eps < 0 or self.pgd_steps < 1:
            raise ValueError("eps must be >= 0 and pgd_steps >= 1")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.schedule!r}")


def init_encoder(seed: int = 0, hidden: tuple[int, ...] = (64, 64), embed_dim: int = 16,
                 in_shape: tuple[int, ...] = IN_SHAPE, identifier: str = "encoder",
                 whitening: np.ndarray | None = None, input_mean: np.ndarray | float = 0.5) -> EncoderModel:
    """Glorot-uniform MLP.  The first-layer bias starts at ``-mean @ P @ w0``
    (``P`` the whitening map or identity) so inputs enter centred."""
    rng = np.random.default_rng(seed)
    dims = [int(np.prod(in_shape)), *hidden, embed_dim]
    params = {}
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        lim = math.sqrt(6.0 / (a + b))
        params[f"w{i}"] = rng.uniform(-lim, lim, (a, b)).astype(np.float32)
        params[f"b{i}"] = np.zeros(b, dtype=np.float32)
    mean = np.broadcast_to(np.asarray(input_mean, dtype=np.float64), (dims[0],))
    if whitening is not None:
        whitening = np.asarray(whitening, dtype=np.float32)
        if whitening.shape != (dims[0], dims[0]):
            raise ValueError(f"whitening must be [{dims[0]}, {dims[0]}], got {whitening.shape}")
        mean = mean @ whitening
    params["b0"] = (-mean @ params["w0"]).astype(np.float32)
    return EncoderModel(params, identifier, tuple(in_shape), whitening)


def zca_whitening(images, eps: float = 1e-2) -> tuple[np.ndarray, np.ndarray]:
    """ZCA map ``U diag((lambda + eps)^-1/2) U^T`` of the pixel covariance, and the pixel mean."""
    x = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    mu = x.mean(axis=0)
    cov = (x - mu).T @ (x - mu) / len(x)
    lam, u = np.linalg.eigh(cov)
    p = (u * (1.0 / np.sqrt(np.maximum(lam, 0.0) + eps))) @ u.T
    return p.astype(np.float32), mu.astype(np.float32)


def make_classifier(n_classes: int, embed_dim: int = 16, seed: int = 0, temperature: float = 10.0) -> ZeroShotClassifier:
    """Frozen random unit class embeddings, a stand-in for text-encoder outputs."""
    rng = np.random.default_rng([seed, 0x7E47])
    c = rng.normal(size=(n_classes, embed_dim))
    c /= np.linalg.norm(c, axis=1, keepdims=True)
    return ZeroShotClassifier(c.astype(np.float32), temperature)


# --------------------------------------------------------------------------
# graphs


def _mlp(b: GraphBuilder, x, n_layers: int, whiten: bool):
    ones = b.input("ones")
    h = x @ b.input("whitening") if whiten else x
    for i in range(n_layers):
        h = h @ b.parameter(f"w{i}") + ones @ b.parameter(f"b{i}")
        if i < n_layers - 1:
            h = b.tanh(h)
    return b.normalize(h)


@lru_cache(maxsize=None)
def pipeline_graph(n_layers: int, head: bool, loss: str | None, head_bias: bool = False,
                   whiten: bool = False) -> ComputeGraph:
    """Graph from a flattened image batch to embeddings, logits, or losses.

    Inputs: ``x`` [B, in_dim], ``ones`` [B, 1], ``classes_t`` [D, K] (scaled by
    the temperature), ``target`` [B, K] one-hot for ce or [B, D] class rows for
    cos.  With ``head`` the unit embedding is mapped through ``head_t`` (the
    transposed projection, plus ``head_b`` [1, D] if ``head_bias``) and
    renormalised.
    """
    b = GraphBuilder()
    e = _mlp(b, b.input("x"), n_layers, whiten)
    if head:
        p = e @ b.parameter("head_t")
        if head_bias:
            p = p + b.input("ones") @ b.parameter("head_b")
        e = b.normalize(p)
    if loss is None:
        return b.build(e)
    if loss == "logits":
        return b.build(e @ b.input("classes_t"))
    if loss == "ce":
        return b.build(b.cross_entropy(e @ b.input("classes_t"), b.input("target")))
    if loss == "cos":
        return b.build(-b.cosine(e, b.input("target")))
    raise ValueError(f"unknown loss selector {loss!r}")


def _bindings(model: EncoderModel, x: np.ndarray) -> dict:
    bind = {"x": x, "ones": np.ones((x.shape[0], 1), dtype=np.float32)}
    for k, v in model.params.items():
        bind[k] = v[None, :] if k.startswith("b") else v
    if model.whitening is not None:
        bind["whitening"] = model.whitening
    return bind


def _flatten(model: EncoderModel, images) -> tuple[np.ndarray, bool]:
    x = np.asarray(images, dtype=np.float32)
    single = x.shape == tuple(model.in_shape)
    if single:
        x = x[None]
    if x.shape[1:] != tuple(model.in_shape):
        raise ValueError(f"image shape {x.shape[1:]} does not match encoder input {tuple(model.in_shape)}")
    return x.reshape(x.shape[0], -1), single


def encode(model: EncoderModel, images) -> np.ndarray:
    """Unit-norm embeddings for one image (C,H,W) or a batch (B,C,H,W)."""
    x, single = _flatten(model, images)
    e = forward(pipeline_graph(model.n_layers, False, None, whiten=model.whitening is not None), _bindings(model, x))
    return e[0] if single else e


def zero_shot_logits(classifier: ZeroShotClassifier, embedding) -> np.ndarray:
    e = np.asarray(embedding, dtype=np.float32)
    if e.shape[-1] != classifier.class_embeddings.shape[1]:
        raise ValueError(f"embedding dim {e.shape[-1]} != class embedding dim {classifier.class_embeddings.shape[1]}")
    n = np.linalg.norm(e, axis=-1, keepdims=True)
    if np.any(n <= 1e-12):
        raise ValueError("zero-norm embedding")
    return np.float32(classifier.temperature) * ((e / n) @ classifier.class_embeddings.T)


# --------------------------------------------------------------------------
# pipelines: encoder (+ projection head) + classifier, as seen by attacks


@dataclass
class ZeroShotPipeline:
    """Differentiable image -> zero-shot logits map.

    ``head`` is an optional [d_ref, d_robust] projection applied to the unit
    embedding before renormalisation.
    """

    encoder: EncoderModel
    classifier: ZeroShotClassifier
    head: np.ndarray | None = None
    head_bias: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        d_out = self.encoder.embed_dim if self.head is None else self.head.shape[0]
        if self.head is not None and self.head.shape[1] != self.encoder.embed_dim:
            raise ValueError(f"head {self.head.shape} does not accept embed_dim {self.encoder.embed_dim}")
        if d_out != self.classifier.class_embeddings.shape[1]:
            raise ValueError(f"pipeline output dim {d_out} != classifier dim {self.classifier.class_embeddings.shape[1]}")
        self.name = self.name or self.encoder.identifier

    @property
    def in_shape(self):
        return tuple(self.encoder.in_shape)

    def _graph(self, loss):
        return pipeline_graph(self.encoder.n_layers, self.head is not None, loss, self.head_bias is not None,
                              self.encoder.whitening is not None)

    def _bind(self, x):
        bind = _bindings(self.encoder, x)
        if self.head is not None:
            bind["head_t"] = self.head.T
            if self.head_bias is not None:
                bind["head_b"] = self.head_bias[None, :]
        bind["classes_t"] = self.classifier.class_embeddings.T * np.float32(self.classifier.temperature)
        return bind

    def embed(self, images) -> np.ndarray:
        x, single = _flatten(self.encoder, images)
        e = forward(self._graph(None), self._bind(x))
        return e[0] if single else e

    def logits(self, images) -> np.ndarray:
        x, single = _flatten(self.encoder, images)
        z = forward(self._graph("logits"), self._bind(x))
        return z[0] if single else z

    def predict(self, images) -> np.ndarray:
        return np.argmax(self.logits(images), axis=-1)

    def loss_fn(self, loss: str = "ce") -> Callable:
        """Return ``f(x, y) -> (per-sample loss [B], d sum(loss) / dx)``.

        ``ce`` is cross-entropy on the zero-shot logits; ``cos`` is the negative
        cosine similarity between the embedding and class row ``y``.
        """
        if loss not in LOSSES:
            raise ValueError(f"unknown loss selector {loss!r}")
        graph = self._graph(loss)
        classes = self.classifier.class_embeddings

        def f(x, y):
            xb = np.asarray(x, dtype=np.float32)
            flat = xb.reshape(xb.shape[0], -1)
            y = np.asarray(y)
            bind = self._bind(flat)
            bind["target"] = np.eye(len(classes), dtype=np.float32)[y] if loss == "ce" else classes[y]
            val, g = value_and_gradient(graph, bind, ["x"], cotangent=np.ones(xb.shape[0], np.float32))
            return val, g["x"].reshape(xb.shape)

        return f


# --------------------------------------------------------------------------
# training


def _lr_at(cfg: TrainConfig, epoch: int) -> float:
    if cfg.schedule == "constant":
        return cfg.lr
    t_max = cfg.t_max or max(cfg.epochs, 1)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / t_max))


def _train(model: EncoderModel, classifier: ZeroShotClassifier, images, labels, cfg: TrainConfig) -> EncoderModel:
    from advlab.attacks import AttackConfig, pgd  # attacks does not import encoders

    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise TrainingError("empty dataset")
    if labels.min() < 0 or labels.max() >= classifier.n_classes:
        raise TrainingError("labels out of range for the classifier")
    model = model.copy()
    graph = pipeline_graph(model.n_layers, False, "ce", whiten=model.whitening is not None)
    names = sorted(model.params)
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    onehot = np.eye(classifier.n_classes, dtype=np.float32)
    classes_t = classifier.class_embeddings.T * np.float32(classifier.temperature)
    rng = np.random.default_rng(cfg.seed)
    n = len(images)
    attack = None
    if cfg.adversarial:
        attack = AttackConfig(family="pgd", eps=cfg.eps, iterations=cfg.pgd_steps,
                              step_size=2.5 * cfg.eps / cfg.pgd_steps if cfg.eps > 0 else None, loss="ce")

    def batch_loss(xb, yb, wrt):
        bind = _bindings(model, xb.reshape(len(xb), -1))
        bind["classes_t"] = classes_t
        bind["target"] = onehot[yb]
        val, g = value_and_gradient(graph, bind, wrt, cotangent=np.full(len(xb), 1.0 / len(xb), np.float32))
        return val, g

    for epoch in range(cfg.epochs):
        lr = np.float32(_lr_at(cfg, epoch))
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            xb, yb = images[idx], labels[idx]
            if attack is not None:
                def inner(x, y):
                    val, g = batch_loss(x, y, ["x"])
                    return val, g["x"].reshape(x.shape) * np.float32(len(x))
                xb = pgd(inner, xb, yb, attack).x_adv
            val, grads = batch_loss(xb, yb, names)
            if not np.all(np.isfinite(val)):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch starting {start} ({model.identifier})")
            total += float(np.sum(val, dtype=np.float64))
            for k in names:
                g = grads[k].reshape(model.params[k].shape)
                if cfg.weight_decay:
                    g = g + np.float32(cfg.weight_decay) * model.params[k]
                velocity[k] = np.float32(cfg.momentum) * velocity[k] + g
                model.params[k] = model.params[k] - lr * velocity[k]
        model.history.append(total / n)
        log.debug("%s epoch %d loss %.4f", model.identifier, epoch, total / n)
    return model


def standard_train(model: EncoderModel, classifier: ZeroShotClassifier, images, labels, cfg: TrainConfig) -> EncoderModel:
    if cfg.adversarial:
        raise ValueError("standard_train needs cfg.adversarial = False")
    return _train(model, classifier, images, labels, cfg)


def adversarial_train(model: EncoderModel, classifier: ZeroShotClassifier, images, labels, cfg: TrainConfig) -> EncoderModel:
    """Min-max training: PGD inner maximisation on the current weights, then an
    SGD step on the adversarial batch."""
    if not cfg.adversarial:
        raise ValueError("adversarial_train needs cfg.adversarial = True")
    return _train(model, classifier, images, labels, cfg)


def accuracy(pipeline: ZeroShotPipeline, images, labels) -> float:
    return float(np.mean(pipeline.predict(images) == np.asarray(labels)))


def save_encoder(path, model: EncoderModel, classifier: ZeroShotClassifier | None = None) -> None:
    tensors = dict(model.params)
    if model.whitening is not None:
        tensors["whitening"] = model.whitening
    meta = {"kind": "encoder", "identifier": model.identifier, "in_shape": ",".join(map(str, model.in_shape))}
    if classifier is not None:
        tensors["class_embeddings"] = classifier.class_embeddings
        meta["temperature"] = repr(float(classifier.temperature))
    checkpoint.save(path, tensors, meta)


def load_encoder(path) -> tuple[EncoderModel, ZeroShotClassifier | None]:
    tensors, meta = checkpoint.load(path)
    if meta.get("kind") != "encoder":
        raise checkpoint.CheckpointError(f"{path}: not an encoder checkpoint")
    clf = None
    if "class_embeddings" in tensors:
        clf = ZeroShotClassifier(tensors.pop("class_embeddings"), float(meta["temperature"]))
    shape = tuple(int(d) for d in meta["in_shape"].split(","))
    whitening = tensors.pop("whitening", None)
    return EncoderModel(tensors, meta["identifier"], shape, whitening), clf
