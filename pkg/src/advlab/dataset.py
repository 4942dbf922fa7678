"""Seeded synthetic shapes dataset and image file I/O.

Every image is 3x16x16 in [0, 1] and shows one coloured shape on a noisy grey
background.  Classes are (colour, shape) pairs, assigned so that consecutive
class ids vary both attributes.  Captions follow ``a {colour} {shape}`` and two
paraphrases; VQA pairs ask for the colour and the shape.

Directory layout written by :func:`save_dataset`::

    manifest.txt        key=value lines (see DatasetManifest fields)
    images/NNNN.rten    one RTEN tensor per sample, NNNN = zero-padded index
    labels.csv          index,class_id,split
    captions.csv        index,ref_id,caption
    vqa.csv             index,question,answer
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from advlab.tensor_core import rten

GENERATOR_VERSION = 2
IMAGE_SHAPE = (3, 16, 16)

COLORS = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.8, 0.1),
    "blue": (0.1, 0.2, 0.9),
    "yellow": (0.9, 0.85, 0.1),
    "magenta": (0.85, 0.1, 0.85),
    "cyan": (0.1, 0.85, 0.85),
}
SHAPES = ("disk", "square", "triangle", "cross", "ring")

QUESTIONS = ("what color is the shape?", "what shape is shown?")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetManifest:
    seed: int = 0
    n_classes: int = 8
    samples_per_class: int = 32
    train: float = 0.5
    align: float = 0.25
    eval: float = 0.25
    version: int = GENERATOR_VERSION

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "DatasetManifest":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, val = line.partition("=")
            key = key.strip()
            if key not in types:
                raise DatasetError(f"manifest: unknown key {key!r}")
            kw[key] = float(val) if types[key] == "float" else int(val)
        return cls(**kw)


@dataclass
class Sample:
    index: int
    image: np.ndarray
    label: int
    split: str
    captions: list[list[str]] = field(default_factory=list)
    vqa: list[tuple[str, str]] = field(default_factory=list)


def class_attributes(label: int) -> tuple[str, str]:
    names = list(COLORS)
    nc = len(names)
    return names[label % nc], SHAPES[(label + label // nc) % len(SHAPES)]


def max_classes() -> int:
    return len(COLORS) * len(SHAPES)


def caption_for(label: int) -> list[str]:
    color, shape = class_attributes(label)
    return ["a", color, shape]


def reference_captions(label: int) -> list[list[str]]:
    color, shape = class_attributes(label)
    return [
        ["a", color, shape],
        ["a", shape, "that", "is", color],
        ["the", "image", "shows", "a", color, shape],
    ]


def vqa_pairs(label: int) -> list[tuple[str, str]]:
    color, shape = class_attributes(label)
    return [(QUESTIONS[0], color), (QUESTIONS[1], shape)]


def _mask(shape: str, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:16, 0:16].astype(np.float64) + 0.5
    dy, dx = yy - cy, xx - cx
    if shape == "disk":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return (np.abs(dx) <= r * 0.85) & (np.abs(dy) <= r * 0.85)
    if shape == "triangle":
        # apex up; base at cy + r
        return (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.55)
    if shape == "cross":
        w = max(r * 0.3, 0.8)
        return ((np.abs(dx) <= w) & (np.abs(dy) <= r)) | ((np.abs(dy) <= w) & (np.abs(dx) <= r))
    if shape == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (r * 0.55) ** 2)
    raise DatasetError(f"unknown shape {shape!r}")


def render(label: int, rng: np.random.Generator) -> np.ndarray:
    """One jittered shape of the class colour on a noisy grey background."""
    color, shape = class_attributes(label)
    bg = rng.uniform(0.35, 0.6)
    img = np.full(IMAGE_SHAPE, bg) + rng.normal(0.0, 0.04, IMAGE_SHAPE)
    r = rng.uniform(4.0, 6.0)
    cy, cx = rng.uniform(6.0, 10.0, size=2)
    m = _mask(shape, cy, cx, r)
    rgb = np.asarray(COLORS[color]) + rng.normal(0.0, 0.03, 3)
    for c in range(3):
        img[c][m] = rgb[c] + rng.normal(0.0, 0.02, int(m.sum()))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _split_names(m: DatasetManifest) -> list[str]:
    total = m.train + m.align + m.eval
    if min(m.train, m.align, m.eval) < 0 or abs(total - 1.0) > 1e-9:
        raise DatasetError("split ratios must be non-negative and sum to 1")
    k = m.samples_per_class
    n_align = int(round(k * m.align))
    n_eval = int(round(k * m.eval))
    n_train = k - n_align - n_eval
    if n_train < 0:
        raise DatasetError("split ratios leave no room for the train split")
    return ["train"] * n_train + ["align"] * n_align + ["eval"] * n_eval


def synth(manifest: DatasetManifest) -> list[Sample]:
    """Render the dataset; identical manifests give bit-identical samples.

    Sample ``i`` has class ``i % n_classes`` and is drawn from a generator
    seeded by ``(seed, i)``; each class is split in train/align/eval order by
    its per-class sample rank.
    """
    if manifest.n_classes < 2:
        raise DatasetError("n_classes must be >= 2")
    if manifest.samples_per_class < 2:
        raise DatasetError("samples_per_class must be >= 2")
    if manifest.n_classes > max_classes():
        raise DatasetError(f"n_classes {manifest.n_classes} exceeds the {len(COLORS)}x{len(SHAPES)} colour/shape grid")
    splits = _split_names(manifest)
    out = []
    for i in range(manifest.n_classes * manifest.samples_per_class):
        label = i % manifest.n_classes
        rng = np.random.default_rng([manifest.seed, i])
        out.append(Sample(i, render(label, rng), label, splits[i // manifest.n_classes],
                          reference_captions(label), vqa_pairs(label)))
    return out


def split(samples: list[Sample], name: str) -> list[Sample]:
    return [s for s in samples if s.split == name]


def stack(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray]:
    if not samples:
        raise DatasetError("empty sample list")
    return np.stack([s.image for s in samples]), np.array([s.label for s in samples], dtype=np.int64)


# --------------------------------------------------------------------------
# files


def save_ppm(path, image: np.ndarray) -> None:
    """Write a 3xHxW image as binary PPM (P6, maxval 255)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise DatasetError(f"PPM needs a 3xHxW image, got {img.shape}")
    px = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = img.shape[1:]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + px.transpose(1, 2, 0).tobytes())


def _ppm_tokens(buf: bytes, n: int) -> tuple[list[bytes], int]:
    toks, pos = [], 0
    while len(toks) < n:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise rten.RtenError("truncated PPM header", pos)
        toks.append(buf[start:pos])
    return toks, pos + 1  # exactly one whitespace byte before the raster


def decode_ppm(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if buf[:2] != b"P6":
        raise rten.RtenError(f"bad PPM magic {bytes(buf[:2])!r}", 0, source)
    try:
        toks, pos = _ppm_tokens(buf, 4)
        w, h, maxval = (int(t) for t in toks[1:])
    except (ValueError, rten.RtenError) as e:
        raise rten.RtenError(f"malformed PPM header ({e})", 2, source) from None
    if maxval != 255:
        raise rten.RtenError(f"PPM maxval {maxval} unsupported (only 255)", 2, source)
    if w <= 0 or h <= 0 or w * h > rten.MAX_ELEMENTS:
        raise rten.RtenError(f"PPM dimension overflow ({w}x{h})", 2, source)
    need = w * h * 3
    if len(buf) - pos < need:
        raise rten.RtenError(f"truncated PPM raster: need {need} bytes, have {len(buf) - pos}", pos, source)
    px = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(h, w, 3)
    return (px.transpose(2, 0, 1).astype(np.float32) / np.float32(255)).copy()


def load_image(path) -> np.ndarray:
    path = Path(path)
    buf = path.read_bytes()
    if buf[:2] == b"P6":
        return decode_ppm(buf, str(path))
    arr = rten.load(path)
    if arr.ndim != 3:
        raise rten.RtenError(f"expected a CxHxW tensor, got ndim {arr.ndim}", 12, str(path))
    return arr


def load_images(path) -> list[np.ndarray]:
    """Load one file, or every ``.rten``/``.ppm`` file of a directory in name order."""
    path = Path(path)
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix in (".rten", ".ppm"))
        return [load_image(p) for p in files]
    return [load_image(path)]


def save_dataset(directory, manifest: DatasetManifest, samples: list[Sample]) -> None:
    d = Path(directory)
    (d / "images").mkdir(parents=True, exist_ok=True)
    (d / "manifest.txt").write_text(manifest.to_text())
    for s in samples:
        rten.save(d / "images" / f"{s.index:04d}.rten", s.image)
    with open(d / "labels.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["index", "class_id", "split"])
        for s in samples:
            w.writerow([s.index, s.label, s.split])
    with open(d / "captions.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["index", "ref_id", "caption"])
        for s in samples:
            for j, cap in enumerate(s.captions):
                w.writerow([s.index, j, " ".join(cap)])
    with open(d / "vqa.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["index", "question", "answer"])
        for s in samples:
            for q, a in s.vqa:
                w.writerow([s.index, q, a])


def load_dataset(directory) -> tuple[DatasetManifest, list[Sample]]:
    d = Path(directory)
    if not (d / "manifest.txt").exists():
        raise FileNotFoundError(f"{d}: no manifest.txt")
    manifest = DatasetManifest.from_text((d / "manifest.txt").read_text())
    samples: dict[int, Sample] = {}
    with open(d / "labels.csv", newline="") as f:
        for row in csv.DictReader(f):
            i = int(row["index"])
            samples[i] = Sample(i, rten.load(d / "images" / f"{i:04d}.rten"), int(row["class_id"]), row["split"])
    with open(d / "captions.csv", newline="") as f:
        for row in csv.DictReader(f):
            samples[int(row["index"])].captions.append(row["caption"].split())
    with open(d / "vqa.csv", newline="") as f:
        for row in csv.DictReader(f):
            samples[int(row["index"])].vqa.append((row["question"], row["answer"]))
    return manifest, [samples[i] for i in sorted(samples)]


__all__ = [
    "DatasetManifest", "Sample", "DatasetError", "synth", "split", "stack", "class_attributes",
    "caption_for", "reference_captions", "vqa_pairs", "save_ppm", "decode_ppm", "load_image",
    "load_images", "save_dataset", "load_dataset", "IMAGE_SHAPE",
]
