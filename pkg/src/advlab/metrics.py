"""Scores: CIDEr-D, VQA accuracy, robust accuracy, attack success rate, average drop."""
from __future__ import annotations

import math
import re
import string
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

SIGMA = 6.0
MAX_N = 4

_PUNCT = re.compile(f"[{re.escape(string.punctuation)}]")


def tokenize(text: str | Sequence[str]) -> list[str]:
    """Lowercase, drop punctuation, split on whitespace.  Token lists pass through
    the same normalisation token by token."""
    if not isinstance(text, str):
        text = " ".join(text)
    return _PUNCT.sub(" ", text.lower()).split()


@dataclass
class CaptionCorpus:
    candidates: list[list[str]]
    references: list[list[list[str]]]

    def __post_init__(self):
        self.candidates = [tokenize(c) for c in self.candidates]
        self.references = [[tokenize(r) for r in refs] for refs in self.references]
        if len(self.candidates) != len(self.references):
            raise ValueError("one candidate per image is required")
        if len(self.candidates) < 2:
            raise ValueError("CIDEr needs a corpus of at least 2 images")
        for i, refs in enumerate(self.references):
            if not refs:
                raise ValueError(f"image {i} has no reference captions")
            if any(not r for r in refs):
                raise ValueError(f"image {i} has an empty reference caption")


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _tfidf(tokens, df, log_n):
    vecs, norms = [], []
    for n in range(1, MAX_N + 1):
        v = {g: tf * (log_n - math.log(max(1.0, df.get(g, 0.0)))) for g, tf in ngrams(tokens, n).items()}
        vecs.append(v)
        norms.append(math.sqrt(sum(x * x for x in v.values())))
    return vecs, norms


class CiderScorer:
    """CIDEr-D with document frequencies frozen from a reference corpus.

    Scoring any subset of candidates against this table gives the same
    per-image scores as scoring the whole corpus at once.
    """

    def __init__(self, references):
        refs = [[tokenize(r) for r in rs] for rs in references]
        if len(refs) < 2:
            raise ValueError("CIDEr needs a corpus of at least 2 images")
        self.df: Counter = Counter()
        for rs in refs:
            seen = set()
            for r in rs:
                for n in range(1, MAX_N + 1):
                    seen.update(ngrams(r, n))
            self.df.update(seen)
        self.log_n = math.log(len(refs))

    def score(self, candidates, references) -> np.ndarray:
        if len(candidates) != len(references):
            raise ValueError("one candidate per image is required")
        scores = np.zeros(len(candidates))
        for i, (cand, refs) in enumerate(zip(candidates, references)):
            cand = tokenize(cand)
            if not refs:
                raise ValueError(f"image {i} has no reference captions")
            vc, nc = _tfidf(cand, self.df, self.log_n)
            total = 0.0
            for r in refs:
                r = tokenize(r)
                vr, nr = _tfidf(r, self.df, self.log_n)
                penalty = math.exp(-((len(cand) - len(r)) ** 2) / (2 * SIGMA ** 2))
                per_n = []
                for n in range(MAX_N):
                    num = sum(min(w, vr[n][g]) * vr[n][g] for g, w in vc[n].items() if g in vr[n])
                    per_n.append(num / (nc[n] * nr[n]) * penalty if nc[n] and nr[n] else 0.0)
                total += sum(per_n) / MAX_N
            scores[i] = 10.0 * total / len(refs)
        return scores


def cider(corpus: CaptionCorpus) -> tuple[np.ndarray, float]:
    """CIDEr-D per image and corpus mean.

    Document frequencies count images whose reference set contains an n-gram.
    Candidate weights are clipped to the reference weights in the numerator;
    the length penalty uses token counts.
    """
    scores = CiderScorer(corpus.references).score(corpus.candidates, corpus.references)
    return scores, float(scores.mean())


def normalize_answer(text: str) -> str:
    t = _PUNCT.sub(" ", text.lower()).split()
    while t and t[0] in ("a", "an", "the"):
        t = t[1:]
    return " ".join(t)


def vqa_accuracy(predictions: Sequence[str], answers: Sequence[str]) -> float:
    if len(predictions) != len(answers):
        raise ValueError(f"{len(predictions)} predictions for {len(answers)} answers")
    if not answers:
        raise ValueError("no answers to score")
    hits = sum(normalize_answer(p) == normalize_answer(a) for p, a in zip(predictions, answers))
    return 100.0 * hits / len(answers)


def robust_accuracy(pipeline, images, labels, attack) -> dict:
    """Clean and robust accuracy in percent, plus per-sample flags.

    A sample counts as robust only if it is classified correctly both clean
    and after the attack, so robust <= clean by construction.
    """
    from advlab.attacks import attack_pipeline

    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels)
    clean_ok = pipeline.predict(images) == labels
    res = attack_pipeline(pipeline, images, labels, attack)
    adv_ok = clean_ok & (pipeline.predict(res.x_adv) == labels)
    return {"clean": 100.0 * clean_ok.mean(), "robust": 100.0 * adv_ok.mean(),
            "clean_ok": clean_ok, "robust_ok": adv_ok, "result": res}


def attack_success_rate(results) -> tuple[float, str]:
    """Fraction of successful samples over one or more AttackResults, and ``"k / n"``."""
    if not isinstance(results, (list, tuple)):
        results = [results]
    if not results:
        raise ValueError("no attack results")
    flags = np.concatenate([np.asarray(r.success, dtype=bool).ravel() for r in results])
    if flags.size == 0:
        raise ValueError("attack results hold no samples")
    k, n = int(flags.sum()), int(flags.size)
    return k / n, f"{k} / {n}"


def success_table(per_target: dict) -> str:
    """Text table with one row per target plus a mean row; cells are ``"k / n"``."""
    if not per_target:
        raise ValueError("no targets")
    rows = [(str(t), attack_success_rate(r)) for t, r in per_target.items()]
    width = max(len("Mean success rate"), *(len(t) for t, _ in rows))
    out = [f"{'Target':<{width}}  Success"]
    for t, (_, text) in rows:
        out.append(f"{t:<{width}}  {text}")
    mean = 100.0 * float(np.mean([frac for _, (frac, _) in rows]))
    out.append(f"{'Mean success rate':<{width}}  {mean:.1f}%")
    return "\n".join(out)


def average_drop(s1: float, s5: float) -> float | None:
    """Relative drop from severity 1 to 5 in percent; None when ``s1 <= 0``."""
    if not s1 > 0:
        return None
    return (s1 - s5) / s1 * 100.0
