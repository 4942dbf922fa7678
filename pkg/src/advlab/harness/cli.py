"""Command line entry point: ``advlab <command> [options]``.

Exit codes: 0 success, 1 usage/config/input error, 2 invariant violation.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np

from advlab import __version__
from advlab import dataset as ds
from advlab.alignment import aligned_pipeline, load_head, save_head, train_alignment
from advlab.attacks import AttackConfig, AttackInvariantError, attack_pipeline
from advlab.checkpoint import CheckpointError
from advlab.corruptions import FAMILIES, CorruptionError, CorruptionSpec, corrupt, distortion
from advlab.encoders import TrainingError, ZeroShotPipeline, load_encoder, save_encoder
from advlab.harness import runner
from advlab.harness.config import ConfigError, ExperimentConfig, parse
from advlab.harness.report import EvaluationReport, ReportError, parse_csv, render_report
from advlab.tensor_core.rten import RtenError, save as save_rten
from advlab.zoo import build_zoo

log = logging.getLogger("advlab")

ROLES = ("reference", "standard", "adversarial")
ALIGNED = ("standard", "adversarial")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def bundled_configs() -> list[str]:
    return sorted(p.name[:-4] for p in resources.files("advlab.configs").iterdir() if p.name.endswith(".cfg"))


def read_config(name: str) -> tuple[ExperimentConfig, bytes]:
    """Load a config from a path, or from the bundled set by (file)name."""
    path = Path(name)
    if path.is_file():
        data = path.read_bytes()
    else:
        stem = path.name[:-4] if path.name.endswith(".cfg") else path.name
        res = resources.files("advlab.configs") / f"{stem}.cfg"
        if not res.is_file():
            raise ConfigError(f"no config file {name!r} (bundled: {', '.join(bundled_configs())})")
        data = res.read_bytes()
    return parse(data.decode("utf-8"), str(name)), data


def _config(args) -> tuple[ExperimentConfig, bytes | None]:
    if args.config:
        cfg, data = read_config(args.config)
    else:
        cfg, data = ExperimentConfig(), None
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg, data


def _out(args, sub: str = "") -> Path:
    d = Path(args.out) / sub if sub else Path(args.out)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing {what}: {path}")
    return path


def load_models(models_dir) -> dict[str, ZeroShotPipeline]:
    """Pipelines stored by ``train`` and ``align`` in one directory."""
    d = Path(models_dir)
    out = {}
    for role in ROLES:
        enc, clf = load_encoder(_need(d / f"{role}.ckpt", f"{role} checkpoint"))
        out[role] = ZeroShotPipeline(enc, clf, name=role)
    ref_clf = out["reference"].classifier
    for role in ALIGNED:
        p = d / f"aligned-{role}.head"
        if p.exists():
            out[f"aligned-{role}"] = aligned_pipeline(load_head(p), out[role].encoder, ref_clf, f"aligned-{role}")
    return out


def _pick(models: dict, name: str):
    if name not in models:
        raise ConfigError(f"model {name!r} not available (have {', '.join(models)})")
    return models[name]


def _eval_samples(data_dir, limit: int) -> list:
    _, samples = ds.load_dataset(_need(Path(data_dir), "dataset directory"))
    ev = ds.split(samples, "eval")
    return ev[:limit] if limit else ev


# --------------------------------------------------------------------------
# commands


def cmd_synth(args):
    cfg, _ = _config(args)
    zc = runner.zoo_config(cfg)
    manifest = ds.DatasetManifest(seed=zc.seed, n_classes=zc.n_classes, samples_per_class=zc.samples_per_class)
    out = _out(args, "dataset")
    samples = ds.synth(manifest)
    ds.save_dataset(out, manifest, samples)
    log.info("wrote %d samples to %s", len(samples), out)


def cmd_train(args):
    cfg, _ = _config(args)
    zc = runner.zoo_config(cfg)
    samples = None
    if args.data:
        manifest, samples = ds.load_dataset(_need(Path(args.data), "dataset directory"))
        zc = replace(zc, seed=manifest.seed, n_classes=manifest.n_classes,
                     samples_per_class=manifest.samples_per_class)
    zoo = build_zoo(zc, samples)
    out = _out(args, "models")
    save_encoder(out / "reference.ckpt", zoo.reference, zoo.ref_classifier)
    save_encoder(out / "standard.ckpt", zoo.standard, zoo.task_classifier)
    save_encoder(out / "adversarial.ckpt", zoo.adversarial, zoo.task_classifier)
    x, y = zoo.arrays("eval")
    for role in ROLES:
        acc = 100.0 * np.mean(zoo.pipeline(role).predict(x) == y)
        log.info("%-12s eval accuracy %.1f%%", role, acc)


def cmd_align(args):
    cfg, _ = _config(args)
    models = load_models(args.models)
    _, samples = ds.load_dataset(_need(Path(args.data), "dataset directory"))
    x, _ = ds.stack(ds.split(samples, "align"))
    ac = runner.align_config(cfg)
    for role in ALIGNED:
        head = train_alignment(models[role].encoder, models["reference"].encoder, x, ac)
        save_head(Path(args.models) / f"aligned-{role}.head", head)
        log.info("aligned %s: final loss %.4g", role, head.final_loss)


def cmd_attack(args):
    models = load_models(args.models)
    pipe = _pick(models, args.model)
    samples = _eval_samples(args.data, args.limit)
    x, y = ds.stack(samples)
    targeted = args.target is not None
    if targeted:
        y = np.full(len(x), args.target, dtype=np.int64)
    acfg = AttackConfig(family=args.family, eps=args.eps, iterations=args.iterations, targeted=targeted,
                        loss=args.loss, seed=args.attack_seed)
    res = attack_pipeline(pipe, x, y, acfg)
    out = _out(args, "attack")
    clean = pipe.predict(x)
    adv = pipe.predict(res.x_adv)
    with open(out / "attack.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["sample_id", "label", "pred_clean", "pred_adv", "success", "linf"])
        for s, xa, pc, pa, ok in zip(samples, res.x_adv, clean, adv, res.success):
            save_rten(out / f"{s.index:04d}.rten", xa)
            ds.save_ppm(out / f"{s.index:04d}.ppm", xa)
            linf = float(np.max(np.abs(xa.astype(np.float64) - s.image)))
            w.writerow([s.index, s.label, int(pc), int(pa), int(ok), f"{linf:.6g}"])
    log.info("%s: %d / %d successful", args.model, int(res.success.sum()), len(x))


def cmd_corrupt(args):
    samples = _eval_samples(args.data, args.limit)
    out = _out(args, "corrupt")
    with open(out / "manifest.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["sample_id", "family", "severity", "seed", "distortion", "file"])
        for s in samples:
            spec = CorruptionSpec(args.family, args.severity, args.corruption_seed + s.index)
            img = corrupt(s.image, spec)
            name = f"{s.index:04d}_{args.family}_{args.severity}.ppm"
            ds.save_ppm(out / name, img)
            w.writerow([s.index, args.family, args.severity, spec.seed, f"{distortion(s.image, img):.6g}", name])
    log.info("wrote %d corrupted images to %s", len(samples), out)


def cmd_eval(args):
    models = load_models(args.models)
    samples = _eval_samples(args.data, args.limit)
    if len(samples) < 2:
        raise ConfigError("eval needs at least 2 samples")
    x, y = ds.stack(samples)
    rep = EvaluationReport("eval", int(args.seed or 0), "-")
    for name in args.model or list(models):
        preds = _pick(models, name).predict(x)
        cond = f"{name}@clean"
        ids = [s.index for s in samples]
        runner._add(rep, ids, cond, "accuracy", (preds == y) * 100.0)
        runner._add(rep, ids, cond, "cider", runner.caption_scores(samples, preds))
        runner._add(rep, ids, cond, "vqa", runner.vqa_scores(samples, preds))
    _emit(args, rep, "eval")


def cmd_report(args):
    rep = parse_csv(_need(Path(args.input), "report").read_text())
    sys.stdout.write(render_report(rep, args.style))


def cmd_run(args):
    cfg, data = _config(args)
    rep = runner.run_experiment(cfg, data)
    _emit(args, rep, "report", cfg.report.style)


def _emit(args, rep, stem: str, style: str = "table"):
    out = _out(args)
    (out / f"{stem}.csv").write_text(render_report(rep, "csv"))
    (out / f"{stem}.txt").write_text(render_report(rep, "table"))
    if not args.quiet:
        sys.stdout.write(render_report(rep, style))


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the dataset seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory (default: advlab-out)")
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS, help="only print errors")

    p = _Parser(prog="advlab", description="adversarial robustness lab for toy vision encoders",
                parents=[common])
    p.add_argument("--version", action="version", version=f"advlab {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, parents=[common])
        sp.set_defaults(fn=fn)
        return sp

    def with_config(sp):
        sp.add_argument("--config", help="config file or bundled config name")

    with_config(add("synth", cmd_synth, "render the synthetic dataset"))
    sp = add("train", cmd_train, "train reference, standard and adversarial encoders")
    with_config(sp)
    sp.add_argument("--data", help="dataset directory (default: synthesise from config)")
    sp = add("align", cmd_align, "fit projection heads into the reference space")
    with_config(sp)
    sp.add_argument("--models", required=True)
    sp.add_argument("--data", required=True)

    sp = add("attack", cmd_attack, "attack eval images and export RTEN + PPM")
    sp.add_argument("--models", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--model", default="standard")
    sp.add_argument("--family", choices=("pgd", "apgd"), default="apgd")
    sp.add_argument("--eps", type=runner_eps, default=8 / 255, help="budget, e.g. 8/255")
    sp.add_argument("--iterations", type=int, default=100)
    sp.add_argument("--loss", choices=("ce", "cos"), default="ce")
    sp.add_argument("--target", type=int, help="target class (targeted attack)")
    sp.add_argument("--attack-seed", type=int, default=0)
    sp.add_argument("--limit", type=int, default=0)

    sp = add("corrupt", cmd_corrupt, "corrupt eval images and export PPM + manifest")
    sp.add_argument("--data", required=True)
    sp.add_argument("--family", choices=FAMILIES, required=True)
    sp.add_argument("--severity", type=int, choices=range(1, 6), required=True)
    sp.add_argument("--corruption-seed", type=int, default=0)
    sp.add_argument("--limit", type=int, default=0)

    sp = add("eval", cmd_eval, "clean accuracy, CIDEr and VQA of stored models")
    sp.add_argument("--models", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--model", action="append", help="model name (repeatable; default all)")
    sp.add_argument("--limit", type=int, default=0)

    sp = add("report", cmd_report, "render a report CSV")
    sp.add_argument("input")
    sp.add_argument("--style", choices=("table", "csv"), default="table")

    sp = add("run", cmd_run, "run a full experiment from a config")
    sp.add_argument("--config", required=True, help="config file or bundled config name")
    return p


def runner_eps(text: str) -> float:
    from advlab.harness.config import _parse_float

    try:
        v = _parse_float(text)
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"invalid budget {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError("budget must be >= 0")
    return v


INVARIANT_ERRORS = (AttackInvariantError, TrainingError, FloatingPointError)
INPUT_ERRORS = (UsageError, ConfigError, ReportError, CheckpointError, RtenError, ds.DatasetError, CorruptionError,
                FileNotFoundError, ValueError)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    args.seed = getattr(args, "seed", None)
    args.out = getattr(args, "out", "advlab-out")
    args.quiet = getattr(args, "quiet", False)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        args.fn(args)
    except INVARIANT_ERRORS as exc:
        print(f"advlab: invariant violated: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except INPUT_ERRORS as exc:
        print(f"advlab: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
