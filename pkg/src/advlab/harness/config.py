"""Sectioned ``key = value`` experiment configs.

Six sections are recognised: ``[dataset] [train] [align] [attack]
[corruption] [report]``.  Every key is typed; unknown sections or keys are
errors naming the ``section.key`` path.  Floats accept fractions such as
``8/255``; lists are comma separated.  ``render`` emits a canonical form that
``parse`` maps back to an equal config.
"""
from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction
from typing import get_args, get_origin

KINDS = ("fig2", "table1", "table2", "table3", "table5", "table7")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSection:
    seed: int = 0
    n_classes: int = 8
    samples_per_class: int = 64
    limit: int = 0  # evaluate only the first ``limit`` eval samples; 0 = all


@dataclass(frozen=True)
class TrainSection:
    zca_eps: float = 0.03
    lr: float = 0.01
    epochs: int = 100
    batch_size: int = 32
    momentum: float = 0.9
    weight_decay: float = 0.0
    adv_lr: float = 0.01
    adv_epochs: int = 60
    adv_eps: float = 2 / 255
    adv_steps: int = 7


@dataclass(frozen=True)
class AlignSection:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    t_max: int = 200
    epochs: int = 6
    batch_size: int = 1
    bias: bool = False


@dataclass(frozen=True)
class AttackSection:
    family: str = "apgd"
    eps: tuple[float, ...] = (2 / 255, 4 / 255, 8 / 255)
    iterations: int = 100
    step_size: float = 0.0  # 0 = family default
    loss: str = "ce"
    targets: tuple[int, ...] = ()
    stage2_iterations: int = 0  # > 0 enables the two-stage protocol
    threshold: float = 0.1  # fraction of the clean score below which stage 1 is final
    random_start: bool = False
    seed: int = 0


@dataclass(frozen=True)
class CorruptionSection:
    families: tuple[str, ...] = ()
    severities: tuple[int, ...] = (1, 2, 3, 4, 5)
    seed: int = 0


@dataclass(frozen=True)
class ReportSection:
    id: str = "experiment"
    kind: str = "table1"
    models: tuple[str, ...] = ("reference", "aligned-adversarial")
    style: str = "table"


SECTIONS = {
    "dataset": DatasetSection, "train": TrainSection, "align": AlignSection,
    "attack": AttackSection, "corruption": CorruptionSection, "report": ReportSection,
}


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    train: TrainSection = field(default_factory=TrainSection)
    align: AlignSection = field(default_factory=AlignSection)
    attack: AttackSection = field(default_factory=AttackSection)
    corruption: CorruptionSection = field(default_factory=CorruptionSection)
    report: ReportSection = field(default_factory=ReportSection)

    def __post_init__(self):
        if self.report.kind not in KINDS:
            raise ConfigError(f"report.kind: unknown experiment kind {self.report.kind!r}")
        if self.report.style not in ("table", "csv"):
            raise ConfigError(f"report.style: expected table or csv, got {self.report.style!r}")
        if self.attack.family not in ("pgd", "apgd"):
            raise ConfigError(f"attack.family: expected pgd or apgd, got {self.attack.family!r}")
        if self.attack.loss not in ("ce", "cos"):
            raise ConfigError(f"attack.loss: expected ce or cos, got {self.attack.loss!r}")
        if any(e < 0 for e in self.attack.eps):
            raise ConfigError("attack.eps: values must be >= 0")

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, dataset=replace(self.dataset, seed=seed))


def _parse_float(text: str) -> float:
    text = text.strip()
    if "/" in text:
        return float(Fraction(text))
    return float(text)


def _fmt_float(v: float) -> str:
    """Multiples of 1/255 print as ``k/255``; everything else as repr."""
    frac = Fraction(v).limit_denominator(255)
    if frac.denominator > 1 and 255 % frac.denominator == 0 and float(frac) == v:
        return f"{frac.numerator * (255 // frac.denominator)}/255"
    return repr(float(v))


def _parse_value(typ, text: str, path: str):
    try:
        if typ is bool:
            low = text.strip().lower()
            if low not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError(text)
            return low in ("true", "yes", "1", "on")
        if typ is int:
            return int(text.strip())
        if typ is float:
            return _parse_float(text)
        if typ is str:
            return text.strip()
        if get_origin(typ) is tuple:
            (inner, _) = get_args(typ)
            items = [t for t in (s.strip() for s in text.split(",")) if t]
            return tuple(_parse_value(inner, t, path) for t in items)
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"{path}: cannot parse {text!r} as {getattr(typ, '__name__', typ)}") from exc
    raise ConfigError(f"{path}: unsupported type {typ}")


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return _fmt_float(v)
    if isinstance(v, tuple):
        return ", ".join(_fmt_value(x) for x in v)
    return str(v)


_TYPES = {"int": int, "float": float, "str": str, "bool": bool,
          "tuple[float, ...]": tuple[float, ...], "tuple[int, ...]": tuple[int, ...],
          "tuple[str, ...]": tuple[str, ...]}


def parse(text: str, source: str = "<config>") -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    kw = {}
    for name in cp.sections():
        if name not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{name}]")
        cls = SECTIONS[name]
        types = {f.name: _TYPES[f.type] for f in fields(cls)}
        vals = {}
        for key, raw in cp.items(name):
            if key not in types:
                raise ConfigError(f"{source}: unknown key {name}.{key}")
            vals[key] = _parse_value(types[key], raw, f"{name}.{key}")
        kw[name] = cls(**vals)
    try:
        return ExperimentConfig(**kw)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def render(cfg: ExperimentConfig) -> str:
    out = []
    for name in SECTIONS:
        sec = getattr(cfg, name)
        out.append(f"[{name}]")
        out.extend(f"{f.name} = {_fmt_value(getattr(sec, f.name))}" for f in fields(sec))
        out.append("")
    return "\n".join(out)


def config_hash(text: str | bytes) -> str:
    data = text.encode() if isinstance(text, str) else text
    return hashlib.sha256(data).hexdigest()
