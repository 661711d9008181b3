import csv
import json
import shutil

import numpy as np
import pytest
import yaml

from conftest import power, step, traj
from stopwatt import __version__
from stopwatt.cli import main
from stopwatt.config import config_hash, load_config
from stopwatt.gbdt import BoostedModel, HyperParams, fit, shap_values
from stopwatt.trace_model import RunBundle, load_trajectory, write_bundle

FAST = {
    "selection": {"outer_k": 3, "inner_k": 3, "n_candidates": 4, "min_rounds": 10, "max_rounds": 30},
    "simulate": {"decision_steps": [1, 2, 3, 4, 5], "random_replicates": 10, "grid_size": 21},
}


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    assert main(["synth", "--seed", "42", "--n", "60", "--shift", "1.5", "--out", str(d)]) == 0
    return d


def write_config(path, corpus, out, **extra):
    doc = {"corpus_dir": str(corpus), "output_dir": str(out), "seed": 7, **FAST, **extra}
    path.write_text(yaml.safe_dump(doc))
    return str(path)


def rows(path):
    lines = path.read_text().splitlines()
    assert lines[-1].startswith(f"# stopwatt {__version__} config_hash=")
    return list(csv.reader(l for l in lines if not l.startswith("#")))


def tree_bytes(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


# --------------------------------------------------------------------------- exit codes

def test_validate_clean_corpus(corpus_dir, tmp_path):
    assert main(["validate", "--corpus", str(corpus_dir), "--seed", "1", "--out", str(tmp_path)]) == 0
    table = rows(tmp_path / "validation_report.csv")
    assert len(table) == 1 + 60 and all(r[1] == "ok" for r in table[1:])


def test_validate_names_bad_file(corpus_dir, tmp_path, capsys):
    bad = tmp_path / "corpus"
    shutil.copytree(corpus_dir, bad)
    doc = json.loads((bad / "run0003.trace").read_text())
    doc["steps"][0]["tokens"][0]["logprob"] = 0.5
    (bad / "run0003.trace").write_text(json.dumps(doc))
    assert main(["validate", "--corpus", str(bad), "--seed", "1", "--out", str(tmp_path / "o")]) == 1
    assert "run0003.trace" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [
    ["validate", "--corpus", "/nonexistent/dir", "--seed", "1"],
    ["validate", "--seed", "1"],
    ["energy", "--corpus", "."],  # no seed
    ["validate", "--config", "/nonexistent.yaml"],
    ["validate", "--seed", "1", "--corpus", ".", "--set", "no_such_key=3"],
])
def test_config_errors_exit_2(argv, tmp_path, capsys):
    assert main([*argv, "--out", str(tmp_path)]) == 2
    assert "config error" in capsys.readouterr().err


def test_train_zero_eligible_exits_1(corpus_dir, tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml", corpus_dir, tmp_path / "out")
    assert main(["train", "--config", cfg, "--step", "40"]) == 1
    assert "zero eligible runs" in capsys.readouterr().err


# --------------------------------------------------------------------------- energy

def test_energy_summary(corpus_dir, tmp_path):
    cfg = write_config(tmp_path / "c.yaml", corpus_dir, tmp_path / "out")
    assert main(["energy", "--config", cfg]) == 0
    summary = {r[0]: r for r in rows(tmp_path / "out" / "energy_summary.csv")[1:]}
    assert int(summary["success"][1]) + int(summary["failure"][1]) == int(summary["all"][1]) == 60
    assert float(summary["failure"][2]) >= float(summary["success"][2])
    assert len(list((tmp_path / "out" / "ledgers").glob("*.csv"))) == 60


def test_energy_constant_power_fixture(tmp_path):
    corpus = tmp_path / "c"
    # 2 runs, 500 mW GPU for 7.2 s each -> 1.0 mWh
    for rid, outcome in (("a", 1), ("b", 0)):
        t = traj([step(1, 0, 7200, [-0.1])], outcome, rid)
        write_bundle(RunBundle(t, power(rid, range(0, 7300, 100), gpu=500.0, cpu=0.0)), corpus)
    assert main(["energy", "--corpus", str(corpus), "--seed", "0", "--out", str(tmp_path / "o")]) == 0
    summary = {r[0]: r for r in rows(tmp_path / "o" / "energy_summary.csv")[1:]}
    assert float(summary["success"][2]) == pytest.approx(1.0, rel=1e-12)
    assert float(summary["failure"][2]) == pytest.approx(1.0, rel=1e-12)


# --------------------------------------------------------------------------- train, sweep, importance, decide

@pytest.fixture(scope="module")
def trained(corpus_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("trained")
    cfg = write_config(out / "c.yaml", corpus_dir, out / "out")
    assert main(["train", "--config", cfg, "--step", "2"]) == 0
    return cfg, out / "out"


def test_train_outputs(trained):
    _, out = trained
    model = BoostedModel.load(out / "model_s2.json")
    assert model.metadata["step"] == 2 and model.metadata["k"] == 10
    assert model.metadata["max_lcs_tokens"] == 4096
    assert len(rows(out / "cv_report_s2.csv")) == 1 + 3
    assert len(rows(out / "oof_scores_s2.csv")) > 1


def test_train_rerun_identical(trained, tmp_path):
    cfg, out = trained
    assert main(["train", "--config", cfg, "--step", "2", "--out", str(tmp_path)]) == 0
    for name in ("model_s2.json", "cv_report_s2.csv", "oof_scores_s2.csv"):
        assert (tmp_path / name).read_bytes() == (out / name).read_bytes()


def test_importance_sorted_and_consistent(trained, corpus_dir):
    cfg, out = trained
    assert main(["importance", "--config", cfg, "--model", str(out / "model_s2.json")]) == 0
    table = rows(out / "importance_s2.csv")[1:]
    vals = [float(v) for _, v in table]
    assert vals == sorted(vals, reverse=True)
    assert table[0][0].startswith(("s1_tail", "s2_tail"))


def test_importance_of_stump(tmp_path, corpus_dir):
    from stopwatt.features import FeatureConfig, build_matrix
    from stopwatt.trace_model import load_corpus

    m = build_matrix([b.trajectory for b in load_corpus(corpus_dir)], FeatureConfig(step=1))
    model = fit(m, params=HyperParams(max_depth=1, rounds=1))
    model.metadata.update(step=1, k=10, max_lcs_tokens=4096)
    model.save(tmp_path / "stump.json")
    phi, base = shap_values(model, m.X)
    np.testing.assert_allclose(phi.sum(axis=1) + base, model.predict_margin(m.X), atol=1e-9)
    cfg = write_config(tmp_path / "c.yaml", corpus_dir, tmp_path / "out")
    assert main(["importance", "--config", cfg, "--model", str(tmp_path / "stump.json")]) == 0
    table = rows(tmp_path / "out" / "importance_s1.csv")[1:]
    assert sum(float(v) > 0 for _, v in table) == 1


def test_decide(trained, corpus_dir, capsys):
    cfg, out = trained
    model = str(out / "model_s2.json")
    trace = next(p for p in sorted(corpus_dir.glob("*.trace")) if load_trajectory(p).n_steps >= 2)
    assert main(["decide", "--config", cfg, "--model", model, "--trace", str(trace), "--threshold", "0"]) == 0
    assert capsys.readouterr().out.startswith("continue p_success=")
    assert main(["decide", "--config", cfg, "--model", model, "--trace", str(trace), "--threshold", "1.01"]) == 0
    assert capsys.readouterr().out.startswith("stop p_success=")
    assert main(["decide", "--config", cfg, "--model", "/missing.json", "--trace", str(trace)]) == 2


def test_sweep_outputs_and_parallel_determinism(corpus_dir, tmp_path):
    serial = tmp_path / "serial"
    cfg = write_config(tmp_path / "c.yaml", corpus_dir, serial)
    assert main(["sweep", "--config", cfg, "--plot"]) == 0
    assert sorted(p.name for p in serial.glob("curve_s*.csv")) == [f"curve_s{i}.csv" for i in range(1, 6)]
    assert len(list(serial.glob("curve_s*.svg"))) == 5
    comparison = rows(serial / "comparison.csv")
    assert len(comparison) == 1 + 5 * 4
    curve = rows(serial / "curve_s3.csv")
    assert {r[0] for r in curve[1:]} == {"classifier", "random", "min_logprob", "mean_logprob"}
    n_thresholds = sum(int(r[2]) for r in comparison[1:] if r[0] == "3")
    assert len(curve) - 1 == n_thresholds

    parallel = tmp_path / "parallel"
    assert main(["sweep", "--config", cfg, "--plot", "--jobs", "2", "--out", str(parallel)]) == 0
    assert tree_bytes(serial) == tree_bytes(parallel)


def test_every_command_rerun_identical(corpus_dir, tmp_path):
    cfg = write_config(tmp_path / "c.yaml", corpus_dir, tmp_path / "a")
    cmds = [["validate"], ["energy"], ["featurize", "--step", "2"], ["train", "--step", "1"],
            ["sweep", "--step", "2"]]
    for out in ("a", "b"):
        for c in cmds:
            assert main([*c, "--config", cfg, "--out", str(tmp_path / out)]) == 0
        model = str(tmp_path / out / "model_s1.json")
        assert main(["importance", "--config", cfg, "--out", str(tmp_path / out), "--model", model]) == 0
        assert main(["synth", "--seed", "3", "--n", "6", "--out", str(tmp_path / out / "synth")]) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_config_hash_tracks_settings_not_execution(tmp_path):
    base = load_config(None, {"seed": 1, "corpus_dir": "x"})
    assert config_hash(base) == config_hash(load_config(None, {"seed": 1, "corpus_dir": "x", "jobs": 4}))
    assert config_hash(base) != config_hash(load_config(None, {"seed": 2, "corpus_dir": "x"}))
    assert config_hash(base) != config_hash(load_config(None, {"seed": 1, "corpus_dir": "x", "feature.k": 3}))


def test_flags_override_config(tmp_path):
    cfg = write_config(tmp_path / "c.yaml", "corpus", "out")
    doc = load_config(cfg, {"seed": 99, "feature.k": 4})
    assert doc["seed"] == 99 and doc["feature"]["k"] == 4
    assert doc["corpus_dir"] == str(tmp_path / "corpus")  # relative to the config file
    assert doc["selection"]["outer_k"] == 3
