import json

import numpy as np
import pytest

from amsghmc import cli, harness, samplers as sp, strategy as sn, training as tr


# --- fixtures: tiny generated problems and a handcrafted checkpoint ---------------


@pytest.fixture(scope="session")
def two_story(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen2")
    cfg = harness.ExperimentConfig.from_dict({
        "seed": 11, "out": str(out),
        "generate": {"n_stories": 2, "duration": 1.0, "dt": 0.01},
    })
    report = harness.run_experiment("generate", cfg)
    return {"out": out, "report": report, "problem": out / "problem.json"}


@pytest.fixture(scope="session")
def three_story(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen3")
    cfg = harness.ExperimentConfig.from_dict({
        "seed": 12, "out": str(out),
        "generate": {"n_stories": 3, "duration": 1.0, "dt": 0.01},
    })
    harness.run_experiment("generate", cfg)
    return {"out": out, "problem": out / "problem.json"}


@pytest.fixture(scope="session")
def checkpoint(tmp_path_factory):
    """Untrained nets with frozen two-story scales; fast and deterministic."""
    path = tmp_path_factory.mktemp("ckpt") / "checkpoint.npz"
    nets = sn.init_strategy(sn.StrategyConfig(), np.random.default_rng(3))
    stats = sp.AdaptiveStats.fixed(np.full(5, 0.3), 50.0, 25.0)
    tr.save_checkpoint(path, nets, stats, {"categories": [0, 0, 1, 1, 2]})
    return path


def run_settings():
    return {"K": 4, "T": 60, "burn_in": 20, "eta": 1e-4, "window": [2, 15]}


# --- configuration -----------------------------------------------------------------


def test_config_rejects_unknown_keys():
    with pytest.raises(harness.ConfigError, match="unknown keys"):
        harness.ExperimentConfig.from_dict({"bogus": 1})
    with pytest.raises(harness.ConfigError, match="run"):
        harness.ExperimentConfig.from_dict({"run": {"bogus": 1}})
    with pytest.raises(harness.ConfigError):
        harness.ExperimentConfig.from_dict({"training": {"K0": "many"}})


@pytest.mark.parametrize("section,key,value", [
    ("run", "K", 0),
    ("run", "T", 0),
    ("run", "burn_in", -1),
    ("run", "tau", 0),
    ("run", "eta", 0.0),
    ("run", "v0_scale", 0.0),
    ("run", "window", [10, 2]),
    ("generate", "n_stories", 0),
    ("generate", "dt", 0.0),
])
def test_config_rejects_out_of_range_values(section, key, value):
    with pytest.raises(harness.ConfigError):
        harness.ExperimentConfig.from_dict({section: {key: value}})


def test_config_rejects_bad_top_level_values():
    with pytest.raises(harness.ConfigError):
        harness.ExperimentConfig.from_dict({"sampler": "nuts"})
    with pytest.raises(harness.ConfigError):
        harness.ExperimentConfig.from_dict({"seed": -1})
    with pytest.raises(harness.ConfigError):
        harness.ExperimentConfig.from_dict({"compare": ["hmc"]})
    with pytest.raises(harness.ConfigError):
        harness.ExperimentConfig.from_dict({"compare": ["amsghmc", "am-sghmc"]})


def test_config_lists_become_tuples():
    cfg = harness.ExperimentConfig.from_dict({
        "run": {"window": [2, 15], "betas_theta": [0.9, 0.99]},
        "compare": ["hmc", "sghmc"],
    })
    assert cfg.run.window == (2, 15)
    assert cfg.run.betas_theta == (0.9, 0.99)
    assert cfg.compare == ("hmc", "sghmc")


def test_canonical_sampler_names():
    assert harness.canonical_sampler("am-sghmc") == "amsghmc"
    assert harness.canonical_sampler("AMSGHMC") == "amsghmc"
    assert harness.canonical_sampler("hmc") == "hmc"
    assert harness.canonical_sampler("sghmc") == "sghmc"
    with pytest.raises(harness.ConfigError, match="unknown sampler"):
        harness.canonical_sampler("nuts")


def test_resolve_config_flag_overrides(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"seed": 3, "out": "a", "sampler": "sghmc"}))
    cfg = harness.resolve_config(path, seed=9, out="b", checkpoint="c.npz",
                                 sampler="hmc")
    assert (cfg.seed, cfg.out, cfg.checkpoint, cfg.sampler) == (9, "b", "c.npz", "hmc")
    base = harness.resolve_config(path)
    assert (base.seed, base.out, base.sampler) == (3, "a", "sghmc")
    assert harness.resolve_config(None).out == "runs/experiment"


def test_load_config_failures(tmp_path):
    with pytest.raises(harness.ConfigError, match="not found"):
        harness.load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(harness.ConfigError, match="not valid JSON"):
        harness.load_config(bad)


# --- generate ----------------------------------------------------------------------


def test_generate_stage_outputs(two_story):
    out, report = two_story["out"], two_story["report"]
    assert (out / "dataset.csv").exists()
    assert (out / "problem.json").exists()
    assert (out / "report.json").exists()
    assert report["stage"] == "generate" and report["seed"] == 11
    assert report["config"]["generate"]["n_stories"] == 2
    rows = (out / "dataset.csv").read_text().strip().splitlines()
    assert len(rows) - 1 == report["summary"]["n_steps"]
    assert len(report["summary"]["stiffness_true"]) == 2
    problem = harness._load_problem(two_story["problem"])
    assert problem.dimension == 5
    assert list(problem.categories) == [0, 0, 1, 1, 2]


def test_generate_reruns_are_byte_identical(tmp_path):
    cfg = harness.ExperimentConfig.from_dict({
        "seed": 7, "out": str(tmp_path / "g"),
        "generate": {"n_stories": 2, "duration": 0.5, "dt": 0.01},
    })
    harness.run_experiment("generate", cfg)
    first = {name: (tmp_path / "g" / name).read_bytes()
             for name in ("dataset.csv", "problem.json", "report.json")}
    harness.run_experiment("generate", cfg)
    for name, blob in first.items():
        assert (tmp_path / "g" / name).read_bytes() == blob


# --- sample / evaluate -------------------------------------------------------------


def test_sample_then_evaluate_sghmc(two_story, tmp_path):
    out = tmp_path / "run"
    cfg = harness.ExperimentConfig.from_dict({
        "seed": 5, "out": str(out), "problem": str(two_story["problem"]),
        "sampler": "sghmc", "run": run_settings(),
    })
    report = harness.run_experiment("sample", cfg)
    assert (out / "trace" / "trace.json").exists()
    assert (out / "trace" / "timing.json").exists()
    assert report["summary"]["kept_chains"] >= 1
    assert report["summary"]["samples_per_chain"] == 40

    # identical rerun: deterministic content is byte-stable, timing is not
    report_bytes = (out / "report.json").read_bytes()
    chain_bytes = (out / "trace" / "chain_000.csv").read_bytes()
    harness.run_experiment("sample", cfg)
    assert (out / "report.json").read_bytes() == report_bytes
    assert (out / "trace" / "chain_000.csv").read_bytes() == chain_bytes

    ev = harness.run_experiment("evaluate", cfg)
    doc = json.loads((out / "metrics.json").read_text())
    assert set(doc["metrics"]) == {"naive_loss", "ess_per_dim", "ess_aggregate",
                                   "wall_time_s", "ess_per_hour"}
    assert len(doc["metrics"]["ess_per_dim"]) == 5
    assert doc["metrics"]["wall_time_s"] > 0
    assert doc["metrics"]["ess_per_hour"] > 0
    assert (out / "projection.csv").exists()
    assert (out / "surface.csv").exists()
    assert ev["summary"]["naive_loss"] == doc["metrics"]["naive_loss"]

    # trace unchanged, so a second evaluate reproduces every byte
    metric_bytes = (out / "metrics.json").read_bytes()
    eval_report = (out / "report.json").read_bytes()
    harness.run_experiment("evaluate", cfg)
    assert (out / "metrics.json").read_bytes() == metric_bytes
    assert (out / "report.json").read_bytes() == eval_report


def test_sample_hmc_reports_acceptance(two_story, tmp_path):
    cfg = harness.ExperimentConfig.from_dict({
        "seed": 6, "out": str(tmp_path / "h"), "problem": str(two_story["problem"]),
        "sampler": "hmc", "run": {"K": 2, "T": 30, "burn_in": 10},
    })
    report = harness.run_experiment("sample", cfg)
    assert 0.0 <= report["summary"]["acceptance_rate"] <= 1.0


def test_sample_amsghmc_uses_checkpoint_scales(two_story, checkpoint, tmp_path):
    out = tmp_path / "am"
    cfg = harness.ExperimentConfig.from_dict({
        "seed": 8, "out": str(out), "problem": str(two_story["problem"]),
        "sampler": "am-sghmc", "checkpoint": str(checkpoint),
        "run": run_settings(),
    })
    report = harness.run_experiment("sample", cfg)
    assert report["summary"]["sampler"] == "am-sghmc"
    trace = sp.load_trace(out / "trace")
    assert np.isfinite(trace.samples).all()
    assert trace.meta["sampler"] == "amsghmc"


def test_checkpoint_transfers_across_story_counts(three_story, checkpoint, tmp_path):
    out = tmp_path / "transfer"
    cfg = harness.ExperimentConfig.from_dict({
        "seed": 9, "out": str(out), "problem": str(three_story["problem"]),
        "sampler": "am-sghmc", "checkpoint": str(checkpoint),
        "run": run_settings(),
    })
    harness.run_experiment("sample", cfg)
    trace = sp.load_trace(out / "trace")
    assert trace.samples.shape[2] == 7
    assert np.isfinite(trace.samples).all()
    harness.run_experiment("evaluate", cfg)
    doc = json.loads((out / "metrics.json").read_text())
    assert np.isfinite(doc["metrics"]["naive_loss"])


def test_evaluate_reads_trace_from_config_key(two_story, tmp_path):
    src = tmp_path / "src"
    cfg = harness.ExperimentConfig.from_dict({
        "seed": 5, "out": str(src), "problem": str(two_story["problem"]),
        "sampler": "sghmc", "run": run_settings(),
    })
    harness.run_experiment("sample", cfg)
    elsewhere = harness.ExperimentConfig.from_dict({
        "seed": 5, "out": str(tmp_path / "dst"), "trace": str(src / "trace"),
    })
    report = harness.run_experiment("evaluate", elsewhere)
    assert (tmp_path / "dst" / "metrics.json").exists()
    assert report["summary"]["kept_chains"] >= 1


# --- train -------------------------------------------------------------------------


def test_train_stage_writes_checkpoint(two_story, tmp_path):
    out = tmp_path / "trn"
    cfg = harness.ExperimentConfig.from_dict({
        "seed": 1, "out": str(out), "problem": str(two_story["problem"]),
        "training": {"K0": 6, "K": 3, "epochs": 2, "sub_epochs": 2,
                     "steps_per_sub_epoch": 6, "T_T": 3, "M": 1,
                     "adapt_epochs": 1, "adapt_last": 1, "eta": 1e-4},
    })
    report = harness.run_experiment("train", cfg)
    assert (out / "checkpoint.npz").exists()
    assert (out / "history.csv").exists()
    assert report["summary"]["updates"] == 4
    nets, stats, extra = tr.load_checkpoint(out / "checkpoint.npz")
    assert extra["categories"] == [0, 0, 1, 1, 2]
    assert extra["n_stories"] == 2
    assert np.isfinite(stats.sigma_i).all()
    header = (out / "history.csv").read_text().splitlines()[0]
    assert header == "epoch,sub_epoch,loss_energy,loss_entropy,grad_norm,diverged"


# --- compare -----------------------------------------------------------------------


def test_compare_stage(two_story, checkpoint, tmp_path):
    out = tmp_path / "cmp"
    cfg = harness.ExperimentConfig.from_dict({
        "seed": 5, "out": str(out), "problem": str(two_story["problem"]),
        "checkpoint": str(checkpoint), "compare": ["am-sghmc", "sghmc"],
        "run": run_settings(),
    })
    report = harness.run_experiment("compare", cfg)
    doc = json.loads((out / "comparison.json").read_text())
    assert set(doc["table"]) == {"am-sghmc", "sghmc"}
    for metrics in doc["table"].values():
        assert set(metrics) == {"naive_loss", "ess_per_dim", "ess_aggregate",
                                "wall_time_s", "ess_per_hour"}
    assert {"ess_aggregate_ratio", "ess_per_hour_ratio",
            "naive_loss_rel_gap"} <= set(doc["ratios"])
    for name in ("am-sghmc", "sghmc"):
        assert (out / name / "trace" / "trace.json").exists()
        assert (out / name / "metrics.json").exists()
        assert report["outputs"][name] == f"{name}/trace"


# --- failure handling --------------------------------------------------------------


def test_preflight_failures_create_no_output(two_story, tmp_path):
    cases = [
        ("train", {"out": str(tmp_path / "a")}),
        ("sample", {"out": str(tmp_path / "b"),
                    "problem": str(two_story["problem"]),
                    "sampler": "am-sghmc"}),
        ("sample", {"out": str(tmp_path / "c"), "problem": "no/such/file.json"}),
        ("evaluate", {"out": str(tmp_path / "d")}),
    ]
    for stage, payload in cases:
        cfg = harness.ExperimentConfig.from_dict(payload)
        with pytest.raises(harness.ConfigError):
            harness.run_experiment(stage, cfg)
        assert not (tmp_path / payload["out"]).exists()
    with pytest.raises(harness.ConfigError, match="unknown stage"):
        harness.run_experiment("simulate", harness.ExperimentConfig())


def test_midstage_failure_leaves_partial_marker(two_story, tmp_path, monkeypatch):
    out = tmp_path / "run"
    cfg = harness.ExperimentConfig.from_dict({
        "seed": 5, "out": str(out), "problem": str(two_story["problem"]),
        "sampler": "sghmc", "run": run_settings(),
    })
    harness.run_experiment("sample", cfg)

    def boom(trace, out, written):
        raise RuntimeError("plot backend fell over")

    monkeypatch.setattr(harness, "_emit_plot_data", boom)
    with pytest.raises(harness.StageError) as info:
        harness.run_experiment("evaluate", cfg)
    marker = json.loads((out / "error.json").read_text())
    assert marker["stage"] == "evaluate"
    assert "metrics.json" in marker["partial_outputs"]
    assert info.value.partial_outputs == marker["partial_outputs"]

    # a later clean run clears the partial flag
    monkeypatch.undo()
    harness.run_experiment("evaluate", cfg)
    assert not (out / "error.json").exists()


# --- command line ------------------------------------------------------------------


def test_cli_generate_and_errors(tmp_path, capsys):
    cfg_path = tmp_path / "gen.json"
    cfg_path.write_text(json.dumps({
        "generate": {"n_stories": 2, "duration": 0.3, "dt": 0.01},
    }))
    code = cli.main(["generate", "--config", str(cfg_path),
                     "--out", str(tmp_path / "g"), "--seed", "2"])
    out = capsys.readouterr().out
    assert code == 0
    line = json.loads(out.strip().splitlines()[-1])
    assert line["stage"] == "generate" and line["seed"] == 2
    assert (tmp_path / "g" / "report.json").exists()

    code = cli.main(["sample", "--config", str(tmp_path / "missing.json")])
    err = capsys.readouterr().err
    assert code == 2
    payload = json.loads(err.strip().splitlines()[-1])
    assert payload["error"] == "ConfigError"

    assert cli.main(["simulate"]) == 2
    assert cli.main(["generate", "--seed", "-1"]) == 2
    capsys.readouterr()


def test_cli_reports_stage_failures(two_story, tmp_path, capsys, monkeypatch):
    out = tmp_path / "run"
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({
        "problem": str(two_story["problem"]), "sampler": "sghmc",
        "run": run_settings(),
    }))
    assert cli.main(["sample", "--config", str(cfg_path),
                     "--out", str(out)]) == 0
    capsys.readouterr()

    def boom(trace, wall):
        raise RuntimeError("metrics exploded")

    monkeypatch.setattr(harness, "compute_metrics", boom)
    code = cli.main(["evaluate", "--config", str(cfg_path), "--out", str(out)])
    err = capsys.readouterr().err
    assert code == 1
    payload = json.loads(err.strip().splitlines()[-1])
    assert payload["error"] == "StageError"
    assert payload["stage"] == "evaluate"
    assert "partial_outputs" in payload
