import csv
import hashlib
import math
import subprocess
import sys
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from advlab.harness import pool, runner
from advlab.harness.cli import bundled_configs, main, read_config
from advlab.harness.config import (AttackSection, ConfigError, DatasetSection, ExperimentConfig, ReportSection,
                                   parse, render)
from advlab.harness.report import EvaluationReport, ReportError, parse_csv, render_csv, render_table

SMALL = """\
[dataset]
seed = 3
samples_per_class = 16
limit = 8

[train]
epochs = 4
adv_epochs = 2
adv_steps = 2

[align]
epochs = 1

[attack]
family = pgd
eps = 0, 2/255
iterations = 3

[report]
id = small
kind = table3
models = standard, adversarial
style = csv
"""


# ---------------------------------------------------------------- config


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2 ** 31), k=st.lists(st.integers(0, 255), min_size=1, max_size=4),
       iters=st.integers(1, 500), thr=st.floats(0, 1, allow_nan=False), models=st.lists(
           st.sampled_from(["reference", "standard", "adversarial", "aligned-standard", "a+b"]), min_size=1),
       family=st.sampled_from(["pgd", "apgd"]), bias=st.booleans())
def test_render_parse_round_trip(seed, k, iters, thr, models, family, bias):
    base = ExperimentConfig()
    cfg = replace(base, dataset=DatasetSection(seed=seed),
                  attack=AttackSection(family=family, eps=tuple(x / 255 for x in k), iterations=iters,
                                       threshold=thr),
                  align=replace(base.align, bias=bias), report=ReportSection(models=tuple(models)))
    assert parse(render(cfg)) == cfg


def test_unknown_key_and_section_are_named():
    with pytest.raises(ConfigError, match=r"attack\.epz"):
        parse("[attack]\nepz = 1/255\n")
    with pytest.raises(ConfigError, match=r"\[attak\]"):
        parse("[attak]\neps = 1/255\n")
    with pytest.raises(ConfigError, match=r"attack\.iterations"):
        parse("[attack]\niterations = many\n")
    with pytest.raises(ConfigError, match=r"report\.kind"):
        parse("[report]\nkind = table9\n")


def test_fractions_parse():
    cfg = parse("[attack]\neps = 2/255, 0.5\n")
    assert cfg.attack.eps == (2 / 255, 0.5)


@pytest.mark.parametrize("name", bundled_configs())
def test_bundled_configs_parse(name):
    cfg, data = read_config(name)
    assert cfg.report.id == name
    assert parse(render(cfg)) == cfg


def test_bundled_config_set():
    assert bundled_configs() == ["fig2_toy", "table1_toy", "table2_toy", "table3_toy", "table5_toy", "table7_toy"]


# ---------------------------------------------------------------- report


def _report():
    rep = EvaluationReport("demo", 1, "ab" * 32)
    for i, v in enumerate([1.0, 0.5, 0.25]):
        rep.add(i, "m@clean", "cider", v)
        rep.add(i, "m@8/255", "cider", v / 2)
        rep.add(i, "m@2/255", "cider", v / 3)
        rep.add(i, "m@4/255", "cider", v / 4)
    rep.add_derived("m/blur", "average_drop", 12.5)
    rep.add_derived("m/noise", "average_drop", None)
    return rep


def test_csv_round_trip():
    rep = _report()
    text = render_csv(rep)
    back = parse_csv(text)
    assert render_csv(back) == text
    assert back.experiment_id == "demo" and back.seed == 1


def test_empty_report_is_header_only():
    lines = render_csv(EvaluationReport("e", 0, "00")).splitlines()
    assert [l for l in lines if not l.startswith("#")] == ["kind,sample_id,condition,metric,value"]


def test_aggregates_are_recomputable_from_samples():
    rows = list(csv.reader(l for l in render_csv(_report()).splitlines() if not l.startswith("#")))[1:]
    samples = {}
    for kind, _, cond, metric, val in rows:
        if kind == "sample":
            samples.setdefault((cond, metric), []).append(float(val))
    for kind, _, cond, metric, val in rows:
        if kind == "aggregate":
            assert float(val) == pytest.approx(np.mean(samples[(cond, metric)]), rel=1e-5)


def test_table_columns_ordered_by_budget():
    header = render_table(_report()).splitlines()[2].split()
    assert header == ["cider", "clean", "2/255", "4/255", "8/255"]


def test_malformed_report_errors():
    with pytest.raises(ReportError):
        parse_csv("kind,oops\n")
    with pytest.raises(ReportError, match="metadata"):
        parse_csv("kind,sample_id,condition,metric,value\n")
    with pytest.raises(ReportError):
        EvaluationReport("e", 0, "0").add(0, "a,b", "m", 1.0)


# ---------------------------------------------------------------- pool / runner


def test_chunked_results_independent_of_threads(monkeypatch):
    fn = lambda idx: np.sin(idx.astype(float)) * idx.sum()
    outs = []
    for t in ("1", "3", "8"):
        monkeypatch.setenv("ADVLAB_THREADS", t)
        outs.append(np.concatenate(pool.chunked(fn, 300, chunk=17)))
    for o in outs[1:]:
        np.testing.assert_array_equal(o, outs[0])


def test_thread_count_validation(monkeypatch):
    monkeypatch.setenv("ADVLAB_THREADS", "-1")
    with pytest.raises(ValueError):
        pool.thread_count()
    monkeypatch.setenv("ADVLAB_THREADS", "2")
    assert pool.thread_count() == 2


def test_eps_labels():
    assert runner.eps_label(0) == "0"
    assert runner.eps_label(8 / 255) == "8/255"
    assert runner.eps_label(0.3) == "0.3"


def test_zero_budget_columns_equal_clean():
    cfg = parse(SMALL)
    rep = runner.run_experiment(cfg, SMALL)
    for m in ("standard", "adversarial"):
        assert rep.values(f"{m}@0", "accuracy") == rep.values(f"{m}@clean", "accuracy")
        assert rep.values(f"{m}@0", "cider") == rep.values(f"{m}@clean", "cider")
    assert rep.config_sha256 == hashlib.sha256(SMALL.encode()).hexdigest()


def test_report_is_thread_count_independent(monkeypatch):
    cfg = parse(SMALL)
    texts = []
    for t in ("1", "4"):
        monkeypatch.setenv("ADVLAB_THREADS", t)
        texts.append(render_csv(runner.run_experiment(cfg, SMALL)))
    assert texts[0] == texts[1]


def test_unknown_model_name():
    cfg = parse(SMALL.replace("models = standard, adversarial", "models = mystery"))
    with pytest.raises(ConfigError, match="mystery"):
        runner.run_experiment(cfg)


# ---------------------------------------------------------------- CLI


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "small.cfg"
    cfg.write_text(SMALL)
    out = d / "out"
    assert main(["synth", "--config", str(cfg), "--out", str(out), "--quiet"]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(out / "dataset"), "--out", str(out), "--quiet"]) == 0
    assert main(["align", "--config", str(cfg), "--models", str(out / "models"), "--data", str(out / "dataset"),
                 "--out", str(out), "--quiet"]) == 0
    return cfg, out


def test_synth_train_align_outputs(workspace):
    _, out = workspace
    assert (out / "dataset").is_dir()
    names = sorted(p.name for p in (out / "models").iterdir())
    assert names == ["adversarial.ckpt", "aligned-adversarial.head", "aligned-standard.head",
                     "reference.ckpt", "standard.ckpt"]


def test_attack_command(workspace):
    _, out = workspace
    args = ["attack", "--models", str(out / "models"), "--data", str(out / "dataset"), "--model", "standard",
            "--family", "pgd", "--eps", "4/255", "--iterations", "3", "--limit", "5", "--out", str(out), "--quiet"]
    assert main(args) == 0
    rows = list(csv.DictReader(open(out / "attack" / "attack.csv")))
    assert len(rows) == 5
    assert all(float(r["linf"]) <= 4 / 255 + 1e-6 for r in rows)
    assert len(list((out / "attack").glob("*.rten"))) == 5
    assert len(list((out / "attack").glob("*.ppm"))) == 5


def test_corrupt_command(workspace):
    _, out = workspace
    args = ["corrupt", "--data", str(out / "dataset"), "--family", "gaussian-noise", "--severity", "3",
            "--limit", "4", "--out", str(out), "--quiet"]
    assert main(args) == 0
    rows = list(csv.DictReader(open(out / "corrupt" / "manifest.csv")))
    assert len(rows) == 4 and all(float(r["distortion"]) > 0 for r in rows)


def test_eval_and_report_commands(workspace, capsys):
    _, out = workspace
    assert main(["eval", "--models", str(out / "models"), "--data", str(out / "dataset"), "--limit", "8",
                 "--out", str(out), "--quiet"]) == 0
    rep = parse_csv((out / "eval.csv").read_text())
    assert {c for _, c, _, _ in rep.samples} >= {"reference@clean", "aligned-adversarial@clean"}
    capsys.readouterr()
    assert main(["report", str(out / "eval.csv"), "--style", "table"]) == 0
    assert "accuracy" in capsys.readouterr().out


def test_run_command_hashes_config_bytes(workspace):
    cfg, out = workspace
    assert main(["run", "--config", str(cfg), "--out", str(out / "run"), "--quiet"]) == 0
    rep = parse_csv((out / "run" / "report.csv").read_text())
    assert rep.config_sha256 == hashlib.sha256(cfg.read_bytes()).hexdigest()
    assert (out / "run" / "report.txt").exists()


def test_global_flags_after_subcommand(workspace, tmp_path):
    cfg, _ = workspace
    assert main(["--quiet", "synth", "--config", str(cfg), "--out", str(tmp_path), "--seed", "4"]) == 0
    from advlab.dataset import load_dataset
    manifest, _ = load_dataset(tmp_path / "dataset")
    assert manifest.seed == 4


def test_exit_code_input_errors(workspace, tmp_path):
    cfg, out = workspace
    assert main([]) == 1
    assert main(["attack", "--bogus"]) == 1
    assert main(["run", "--config", str(tmp_path / "nope.cfg"), "--quiet"]) == 1
    bad = tmp_path / "bad.cfg"
    bad.write_text("[attack]\nepz = 1\n")
    assert main(["run", "--config", str(bad), "--quiet"]) == 1
    assert main(["eval", "--models", str(tmp_path), "--data", str(out / "dataset"), "--quiet"]) == 1
    assert main(["report", str(tmp_path / "missing.csv")]) == 1
    assert main(["attack", "--models", str(out / "models"), "--data", str(out / "dataset"), "--eps", "-1"]) == 1


def test_exit_code_invariant_violation(tmp_path):
    bad = tmp_path / "diverge.cfg"
    bad.write_text(SMALL.replace("epochs = 4", "epochs = 4\nlr = 1e38"))
    with np.errstate(all="ignore"):
        assert main(["train", "--config", str(bad), "--out", str(tmp_path), "--quiet"]) == 2


def test_console_script_runs():
    r = subprocess.run([sys.executable, "-m", "advlab.harness.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("advlab ")


def test_fig2_config_end_to_end(tmp_path):
    assert main(["run", "--config", "fig2_toy", "--out", str(tmp_path), "--quiet"]) == 0
    rep = parse_csv((tmp_path / "report.csv").read_text())
    std = rep.aggregate("aligned-standard@1/255", "accuracy")
    adv = rep.aggregate("aligned-adversarial@1/255", "accuracy")
    assert adv > std
    assert rep.aggregate("aligned-standard@clean", "accuracy") >= std
