"""The pinned toy model world shared by experiments and tests.

One seed fixes everything: the synthetic dataset, a reference encoder with
its zero-shot classifier (the "CLIP" stand-in), a standard-trained candidate
encoder and an adversarially trained candidate encoder.  Both candidates share
a task classifier that is independent of the reference one, so alignment into
the reference space is a real change of basis.

Standard encoders see ZCA-whitened pixels.  Whitening equalises the variance
of all pixel directions, so gradient training leans on faint, low-variance
directions that an l-inf attacker can move cheaply; that is the toy analogue
of the brittle features of large standard vision models.  The adversarially
trained encoder reads raw pixels: min-max training through the whitening map
did not converge in pilot runs.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from advlab import dataset as ds
from advlab.encoders import (EncoderModel, TrainConfig, ZeroShotClassifier, ZeroShotPipeline, adversarial_train,
                             init_encoder, make_classifier, standard_train, zca_whitening)

# offsets that keep the per-role generators apart
_REF, _STD, _ADV, _TASK = 1, 2, 3, 1000


@dataclass(frozen=True)
class ZooConfig:
    seed: int = 0
    n_classes: int = 8
    samples_per_class: int = 64
    zca_eps: float = 0.03
    std_train: TrainConfig = TrainConfig(lr=0.01, epochs=100)
    adv_train: TrainConfig = TrainConfig(lr=0.01, epochs=60, adversarial=True, eps=2 / 255, pgd_steps=7)


@dataclass
class Zoo:
    cfg: ZooConfig
    manifest: ds.DatasetManifest
    samples: list
    reference: EncoderModel
    ref_classifier: ZeroShotClassifier
    standard: EncoderModel
    adversarial: EncoderModel
    task_classifier: ZeroShotClassifier

    def arrays(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        return ds.stack(ds.split(self.samples, split))

    def pipeline(self, which: str) -> ZeroShotPipeline:
        """``reference``, ``standard`` or ``adversarial`` with its own classifier."""
        if which == "reference":
            return ZeroShotPipeline(self.reference, self.ref_classifier, name="reference")
        if which in ("standard", "adversarial"):
            return ZeroShotPipeline(getattr(self, which), self.task_classifier, name=which)
        raise KeyError(f"unknown zoo model {which!r}")


def manifest_for(cfg: ZooConfig) -> ds.DatasetManifest:
    return ds.DatasetManifest(seed=cfg.seed, n_classes=cfg.n_classes, samples_per_class=cfg.samples_per_class)


def train_standard(cfg: ZooConfig, images, labels, classifier, role: int, identifier: str) -> EncoderModel:
    p, mu = zca_whitening(images, cfg.zca_eps)
    model = init_encoder(cfg.seed * 10 + role, whitening=p, input_mean=mu, identifier=identifier)
    return standard_train(model, classifier, images, labels, replace(cfg.std_train, seed=cfg.seed + role))


def train_adversarial(cfg: ZooConfig, images, labels, classifier, identifier: str = "adversarial") -> EncoderModel:
    model = init_encoder(cfg.seed * 10 + _ADV, identifier=identifier)
    return adversarial_train(model, classifier, images, labels, replace(cfg.adv_train, seed=cfg.seed + _ADV))


def build_zoo(cfg: ZooConfig = ZooConfig(), samples: list | None = None) -> Zoo:
    """Train all models.  ``samples`` replaces the synthesised dataset when given."""
    manifest = manifest_for(cfg)
    if samples is None:
        samples = ds.synth(manifest)
    x, y = ds.stack(ds.split(samples, "train"))
    ref_clf = make_classifier(cfg.n_classes, seed=cfg.seed)
    task_clf = make_classifier(cfg.n_classes, seed=cfg.seed + _TASK)
    ref = train_standard(cfg, x, y, ref_clf, _REF, "reference")
    std = train_standard(cfg, x, y, task_clf, _STD, "standard")
    adv = train_adversarial(cfg, x, y, task_clf)
    return Zoo(cfg, manifest, samples, ref, ref_clf, std, adv, task_clf)


@lru_cache(maxsize=8)
def cached_zoo(seed: int = 0) -> Zoo:
    """``build_zoo`` with default settings, memoised per process."""
    return build_zoo(ZooConfig(seed=seed))
