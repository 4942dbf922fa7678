"""Experiment orchestration: config -> model world -> attacks/corruptions -> report.

Model names understood in ``[report] models``:

* ``reference`` -- the reference encoder with its own classifier
* ``standard`` / ``adversarial`` -- candidate encoders with the task classifier
* ``aligned-standard`` / ``aligned-adversarial`` -- candidates projected into
  the reference space and scored by the reference classifier
* ``a+b`` -- equal-weight ensemble of named members

Captioning and VQA are scored through a template "decoder": the predicted
class becomes the caption ``a <color> <shape>`` and answers the two templated
questions.  A fooled classifier therefore loses CIDEr and VQA accuracy exactly
as a fooled vision tower would in a captioning model.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache

import numpy as np

from advlab import dataset as ds
from advlab.alignment import AlignConfig, ProjectionHead, aligned_pipeline, train_alignment
from advlab.attacks import AttackConfig, EnsemblePipeline, attack_pipeline, two_stage_attack
from advlab.corruptions import FAMILIES, CorruptionSpec, corrupt
from advlab.encoders import TrainConfig
from advlab.harness import pool
from advlab.harness.config import ConfigError, ExperimentConfig, config_hash, render
from advlab.harness.report import EvaluationReport
from advlab.metrics import CiderScorer, average_drop, vqa_accuracy
from advlab.zoo import Zoo, ZooConfig, build_zoo

log = logging.getLogger(__name__)


def eps_label(eps: float) -> str:
    """Column label of a budget: ``k/255`` when exact, else ``%.6g``; 0 -> ``0``."""
    if eps == 0:
        return "0"
    k = Fraction(eps).limit_denominator(255 * 4) * 255
    if k.denominator == 1 and float(k) / 255 == eps:
        return f"{k.numerator}/255"
    return f"{eps:.6g}"


def zoo_config(cfg: ExperimentConfig) -> ZooConfig:
    t = cfg.train
    std = TrainConfig(lr=t.lr, momentum=t.momentum, weight_decay=t.weight_decay, epochs=t.epochs,
                      batch_size=t.batch_size)
    adv = TrainConfig(lr=t.adv_lr, momentum=t.momentum, weight_decay=t.weight_decay, epochs=t.adv_epochs,
                      batch_size=t.batch_size, adversarial=True, eps=t.adv_eps, pgd_steps=t.adv_steps)
    d = cfg.dataset
    return ZooConfig(seed=d.seed, n_classes=d.n_classes, samples_per_class=d.samples_per_class,
                     zca_eps=t.zca_eps, std_train=std, adv_train=adv)


def align_config(cfg: ExperimentConfig) -> AlignConfig:
    a = cfg.align
    return AlignConfig(lr=a.lr, momentum=a.momentum, weight_decay=a.weight_decay, t_max=a.t_max,
                       epochs=a.epochs, batch_size=a.batch_size, seed=cfg.dataset.seed, bias=a.bias)


@lru_cache(maxsize=4)
def _zoo(zc: ZooConfig) -> Zoo:
    return build_zoo(zc)


@lru_cache(maxsize=8)
def _head(zc: ZooConfig, ac: AlignConfig, which: str) -> ProjectionHead:
    zoo = _zoo(zc)
    x, _ = zoo.arrays("align")
    return train_alignment(getattr(zoo, which), zoo.reference, x, ac)


@dataclass
class World:
    """Trained models plus the evaluation samples of one experiment."""

    zoo: Zoo
    align: AlignConfig
    eval_samples: list = field(default_factory=list)

    def head(self, which: str) -> ProjectionHead:
        return _head(self.zoo.cfg, self.align, which)

    def pipeline(self, name: str):
        if "+" in name:
            return EnsemblePipeline([(self.pipeline(m), 1.0) for m in name.split("+")], name=name)
        if name.startswith("aligned-"):
            which = name[len("aligned-"):]
            if which not in ("standard", "adversarial"):
                raise ConfigError(f"report.models: cannot align {which!r}")
            return aligned_pipeline(self.head(which), getattr(self.zoo, which), self.zoo.ref_classifier, name)
        try:
            return self.zoo.pipeline(name)
        except KeyError:
            raise ConfigError(f"report.models: unknown model {name!r}") from None

    @property
    def x(self) -> np.ndarray:
        return np.stack([s.image for s in self.eval_samples])

    @property
    def y(self) -> np.ndarray:
        return np.array([s.label for s in self.eval_samples], dtype=np.int64)

    @property
    def ids(self) -> list[int]:
        return [s.index for s in self.eval_samples]


def build_world(cfg: ExperimentConfig) -> World:
    zc = zoo_config(cfg)
    zoo = _zoo(zc)
    samples = ds.split(zoo.samples, "eval")
    if cfg.dataset.limit:
        samples = samples[:cfg.dataset.limit]
    return World(zoo, align_config(cfg), samples)


# --------------------------------------------------------------------------
# scoring through the template decoder


def caption_scores(samples, preds, scorer: CiderScorer | None = None) -> np.ndarray:
    """Per-sample CIDEr of decoded captions; df from ``samples`` unless a scorer is given."""
    scorer = scorer or CiderScorer([s.captions for s in samples])
    return scorer.score([ds.caption_for(int(p)) for p in preds], [s.captions for s in samples])


def vqa_scores(samples, preds) -> np.ndarray:
    out = []
    for s, p in zip(samples, preds):
        answers = dict(ds.vqa_pairs(int(p)))
        out.append(vqa_accuracy([answers[q] for q, _ in s.vqa], [a for _, a in s.vqa]))
    return np.array(out)


def attack_config(cfg: ExperimentConfig, eps: float, iterations: int | None = None, targeted: bool = False,
                  family: str | None = None, loss: str | None = None) -> AttackConfig:
    a = cfg.attack
    return AttackConfig(family=family or a.family, eps=eps, iterations=a.iterations if iterations is None else iterations,
                        step_size=a.step_size or None, targeted=targeted, loss=loss or a.loss, seed=a.seed,
                        random_start=a.random_start)


def run_chunked(pipe, x, y, acfg: AttackConfig) -> np.ndarray:
    """Adversarial images, attacked in fixed chunks merged in sample order."""
    parts = pool.chunked(lambda idx: attack_pipeline(pipe, x[idx], y[idx], acfg).x_adv, len(x))
    return np.concatenate(parts)


def _two_stage_chunked(pipe, samples, x, y, cfg: ExperimentConfig, eps: float) -> np.ndarray:
    s1 = attack_config(cfg, eps)
    s2 = attack_config(cfg, eps, iterations=cfg.attack.stage2_iterations)

    scorer = CiderScorer([s.captions for s in samples])

    def run(idx):
        def score(xa, yy):
            # references are a function of the label, so subsets score consistently
            return scorer.score([ds.caption_for(int(p)) for p in pipe.predict(xa)],
                                [ds.reference_captions(int(t)) for t in yy])

        thr = cfg.attack.threshold * score(x[idx], y[idx])
        return two_stage_attack(pipe, x[idx], y[idx], s1, s2, score, thr).x_adv

    return np.concatenate(pool.chunked(run, len(x)))


def _add(rep: EvaluationReport, ids, cond: str, metric: str, values) -> None:
    for sid, v in zip(ids, values):
        rep.add(sid, cond, metric, v)


def _score_all(rep, world, cond, preds):
    y = world.y
    _add(rep, world.ids, cond, "accuracy", (preds == y).astype(float) * 100)
    _add(rep, world.ids, cond, "cider", caption_scores(world.eval_samples, preds))
    _add(rep, world.ids, cond, "vqa", vqa_scores(world.eval_samples, preds))


# --------------------------------------------------------------------------
# experiments


def _fig2(cfg, world, rep):
    x, y = world.x, world.y
    for name in cfg.report.models:
        pipe = world.pipeline(name)
        _add(rep, world.ids, f"{name}@clean", "accuracy", (pipe.predict(x) == y) * 100.0)
        for eps in cfg.attack.eps:
            xa = run_chunked(pipe, x, y, attack_config(cfg, eps, family="pgd", loss="cos"))
            _add(rep, world.ids, f"{name}@{eps_label(eps)}", "accuracy", (pipe.predict(xa) == y) * 100.0)


def _table1(cfg, world, rep):
    x, y = world.x, world.y
    for name in cfg.report.models:
        pipe = world.pipeline(name)
        _score_all(rep, world, f"{name}@clean", pipe.predict(x))
        for eps in cfg.attack.eps:
            if cfg.attack.stage2_iterations > 0:
                xa = _two_stage_chunked(pipe, world.eval_samples, x, y, cfg, eps)
            else:
                xa = run_chunked(pipe, x, y, attack_config(cfg, eps))
            _score_all(rep, world, f"{name}@{eps_label(eps)}", pipe.predict(xa))


def _targeted_samples(world: World, target: int, limit: int):
    chosen = [s for s in ds.split(world.zoo.samples, "eval") if s.label != target]
    return chosen[:limit] if limit else chosen


def _table2(cfg, world, rep):
    targets = cfg.attack.targets or (0, 3, 5)
    n_classes = world.zoo.cfg.n_classes
    for t in targets:
        if not 0 <= t < n_classes:
            raise ConfigError(f"attack.targets: {t} outside 0..{n_classes - 1}")
    for name in cfg.report.models:
        pipe = world.pipeline(name)
        for eps in cfg.attack.eps:
            rates = []
            for t in targets:
                samples = _targeted_samples(world, t, cfg.dataset.limit)
                x = np.stack([s.image for s in samples])
                tt = np.full(len(samples), t, dtype=np.int64)
                xa = run_chunked(pipe, x, tt, attack_config(cfg, eps, targeted=True))
                preds = pipe.predict(xa)
                cond = f"{name}/target={t}@{eps_label(eps)}"
                ids = [s.index for s in samples]
                _add(rep, ids, cond, "success", (preds == t).astype(float))
                _add(rep, ids, cond, "cider", caption_scores(samples, preds))
                rates.append(float(np.mean(preds == t)))
            rep.add_derived(f"{name}@{eps_label(eps)}", "mean_success_rate", 100.0 * float(np.mean(rates)))


def _table3(cfg, world, rep):
    x, y = world.x, world.y
    for name in cfg.report.models:
        pipe = world.pipeline(name)
        preds = pipe.predict(x)
        _add(rep, world.ids, f"{name}@clean", "accuracy", (preds == y) * 100.0)
        _add(rep, world.ids, f"{name}@clean", "cider", caption_scores(world.eval_samples, preds))
        for eps in cfg.attack.eps:
            xa = run_chunked(pipe, x, y, attack_config(cfg, eps))
            preds = pipe.predict(xa)
            cond = f"{name}@{eps_label(eps)}"
            _add(rep, world.ids, cond, "accuracy", (preds == y) * 100.0)
            _add(rep, world.ids, cond, "cider", caption_scores(world.eval_samples, preds))


def _table5(cfg, world, rep):
    families = cfg.corruption.families or FAMILIES
    for f in families:
        if f not in FAMILIES:
            raise ConfigError(f"corruption.families: unknown family {f!r}")
    severities = cfg.corruption.severities
    x = world.x
    pipes = {name: world.pipeline(name) for name in cfg.report.models}
    for name, pipe in pipes.items():
        preds = pipe.predict(x)
        _add(rep, world.ids, f"{name}@clean", "cider", caption_scores(world.eval_samples, preds))
    for f in families:
        for sev in severities:
            def work(idx, f=f, sev=sev):
                return np.stack([corrupt(world.eval_samples[i].image,
                                         CorruptionSpec(f, sev, cfg.corruption.seed + world.eval_samples[i].index))
                                 for i in idx])
            xc = np.concatenate(pool.chunked(work, len(x)))
            for name, pipe in pipes.items():
                preds = pipe.predict(xc)
                _add(rep, world.ids, f"{name}/{f}@s{sev}", "cider", caption_scores(world.eval_samples, preds))
    if 1 in severities and 5 in severities:
        for name in pipes:
            for f in families:
                s1 = rep.aggregate(f"{name}/{f}@s1", "cider")
                s5 = rep.aggregate(f"{name}/{f}@s5", "cider")
                rep.add_derived(f"{name}/{f}", "average_drop", average_drop(s1, s5))


def _table7(cfg, world, rep):
    x, y = world.x, world.y
    pipes = [(n, world.pipeline(n)) for n in cfg.report.models]
    for eps in cfg.attack.eps:
        for sname, spipe in pipes:
            xa = run_chunked(spipe, x, y, attack_config(cfg, eps))
            for tname, tpipe in pipes:
                _add(rep, world.ids, f"{sname}->{tname}@{eps_label(eps)}", "accuracy",
                     (tpipe.predict(xa) == y) * 100.0)


EXPERIMENTS = {"fig2": _fig2, "table1": _table1, "table2": _table2, "table3": _table3,
               "table5": _table5, "table7": _table7}


def run_experiment(cfg: ExperimentConfig, config_text: str | bytes | None = None) -> EvaluationReport:
    """Run the pipeline named by ``cfg.report.kind`` and return its report.

    The recorded hash is of ``config_text`` when given (the config file bytes),
    else of the canonical rendering of ``cfg``.
    """
    rep = EvaluationReport(cfg.report.id, cfg.dataset.seed, config_hash(config_text if config_text is not None
                                                                        else render(cfg)))
    world = build_world(cfg)
    log.info("running %s (%s) on %d eval samples", cfg.report.id, cfg.report.kind, len(world.eval_samples))
    EXPERIMENTS[cfg.report.kind](cfg, world, rep)
    return rep
