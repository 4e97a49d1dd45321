import json
import shutil

import pytest

from xrpo.cli import EXIT_CONVERGENCE, EXIT_IO, EXIT_OK, EXIT_VALIDATION, exit_code_for, main
from xrpo.pipeline import Pipeline, RunConfig, StageError, load_config, run_pipeline, stage_seed
from xrpo.powerflow import ConvergenceError

TINY = dict(count=30, restarts=1, ga={"population": 12, "generations": 8}, epochs=20, background=10)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = RunConfig(out_dir=str(out), seed=3, **TINY)
    report = run_pipeline(cfg)
    return out, cfg, report


def test_pipeline_report_fields(tiny_run):
    out, cfg, report = tiny_run
    m = report["metrics"]
    assert set(m) == {"base_loss_kw", "base_du_pu", "rpo_loss_kw", "rpo_du_pu", "model_mae", "trust_agreement"}
    assert m["base_loss_kw"] == pytest.approx(202.68, abs=0.01)
    assert set(m["model_mae"]) == {"tap", "cb18", "cb33", "qwt10", "qwt25", "qpv22"}
    assert 0.0 <= m["trust_agreement"] <= 1.0
    assert report["dataset"]["sizes"] == {"train": 24, "val": 3, "test": 3}
    text = (out / "report.json").read_text()
    assert str(out) not in text  # no absolute paths
    snap = json.loads((out / "config.json").read_text())
    assert snap["config_hash"] == report["config_hash"]
    for stage in ("gen", "label", "split", "train", "explain", "trust"):
        stamp = json.loads((out / "stamps" / f"{stage}.json").read_text())
        assert stamp["config_hash"] == report["config_hash"]
    for prod in ("bar_all", "bar_tap", "summary_tap", "dependence_P18_Q18", "instance0_tap"):
        assert (out / "explain" / "products" / f"{prod}.json").exists()
    assert (out / "trust" / "trust_tap.svg").exists()


def test_rerun_skips_everything(tiny_run):
    out, cfg, report = tiny_run
    before = (out / "report.json").read_bytes()
    p = Pipeline(cfg)
    again = p.run()
    assert set(p.status.values()) == {"skipped"}
    assert again == report
    assert (out / "report.json").read_bytes() == before


def test_changed_training_config_reruns_downstream_only(tmp_path, tiny_run):
    out, cfg, _ = tiny_run
    copy = tmp_path / "copy"
    shutil.copytree(out, copy)
    p = Pipeline(RunConfig(out_dir=str(copy), seed=3, **{**TINY, "epochs": 25}))
    p.run()
    assert p.status == {
        "gen": "skipped", "label": "skipped", "split": "skipped",
        "train": "ran", "explain": "ran", "trust": "ran",
    }


def test_corrupt_model_halts_at_explain(tmp_path, tiny_run):
    out, cfg, _ = tiny_run
    copy = tmp_path / "copy"
    shutil.copytree(out, copy)
    (copy / "model" / "model.json").write_text("{ corrupted")
    with pytest.raises(StageError) as err:
        run_pipeline(RunConfig(out_dir=str(copy), seed=3, **TINY))
    assert err.value.stage == "explain"
    assert "model" in str(err.value)
    assert exit_code_for(err.value) == EXIT_VALIDATION
    # earlier outputs are preserved
    assert (copy / "split" / "train.jsonl").exists()


def test_desk_profile_bounds():
    with pytest.raises(ValueError):
        RunConfig(count=2000)
    with pytest.raises(ValueError):
        RunConfig(restarts=50)
    full = RunConfig(profile="full")
    assert (full.count, full.restarts) == (5000, 50)
    with pytest.raises(ValueError):
        RunConfig.from_mapping({"bogus": 1})


def test_stage_seeds_differ():
    seeds = {stage_seed(7, s) for s in ("gen", "label", "split", "train", "explain")}
    assert len(seeds) == 5
    assert stage_seed(7, "gen") == stage_seed(7, "gen")


def test_config_files(tmp_path):
    (tmp_path / "c.toml").write_text('seed = 11\ncount = 40\nhidden = [16, 8]\n[ga]\npopulation = 10\n')
    (tmp_path / "c.json").write_text('{"seed": 11, "count": 40}')
    t = RunConfig.from_mapping(load_config(tmp_path / "c.toml"))
    assert t.seed == 11 and t.hidden == (16, 8) and t.ga == {"population": 10}
    assert RunConfig.from_mapping(load_config(tmp_path / "c.json")).count == 40


def test_exit_code_families():
    assert exit_code_for(ConvergenceError("x")) == EXIT_CONVERGENCE
    assert exit_code_for(FileNotFoundError("x")) == EXIT_IO
    assert exit_code_for(ValueError("x")) == EXIT_VALIDATION
    assert len({EXIT_CONVERGENCE, EXIT_IO, EXIT_VALIDATION, EXIT_OK}) == 4


def test_net_validate_and_errors(tmp_path, capsys):
    assert main(["net", "validate", "--out", str(tmp_path / "n.json")]) == EXIT_OK
    d = json.loads((tmp_path / "n.json").read_text())
    assert d["buses"] == 33 and d["total_p_kw"] == pytest.approx(3715.0)
    (tmp_path / "bad.json").write_text("[]")
    assert main(["net", "validate", "--network", str(tmp_path / "bad.json")]) == EXIT_VALIDATION
    assert main(["net", "validate", "--network", str(tmp_path / "absent.json")]) == EXIT_IO
    assert "error" in capsys.readouterr().err


def test_pf_and_rpo_commands(tmp_path):
    ctl = tmp_path / "ctl.json"
    ctl.write_text(json.dumps({"tap": 3, "cb_steps": [4, 7], "dg_q_kvar": [0, 0, 0]}))
    assert main(["pf", "run", "--controls", str(ctl), "--out", str(tmp_path / "pf.json")]) == EXIT_OK
    pf = json.loads((tmp_path / "pf.json").read_text())
    assert pf["converged"] and pf["tap_ratio"] == pytest.approx(1.0375)
    assert pf["loss_kw"] < 202.0
    rc = main(["rpo", "solve", "--ga-restarts", "1", "--seed", "2", "--out", str(tmp_path / "rpo.json")])
    assert rc == EXIT_OK
    sol = json.loads((tmp_path / "rpo.json").read_text())
    assert sol["objective_f"] > 0 and sol["feasible"]


def test_stepwise_commands(tmp_path, capsys):
    t = str(tmp_path)
    assert main(["--seed", "4", "data", "gen", "--count", "12", "--out", f"{t}/sc.jsonl"]) == EXIT_OK
    assert main(["data", "label", "--scenarios", f"{t}/sc.jsonl", "--restarts", "1", "--seed", "1",
                 "--out", f"{t}/s.jsonl"]) == EXIT_OK
    assert main(["data", "split", "--data", f"{t}/s.jsonl", "--out", f"{t}/split"]) == EXIT_OK
    assert main(["model", "train", "--data", f"{t}/split", "--hidden", "8", "--epochs", "5",
                 "--out", f"{t}/m.json"]) == EXIT_OK
    assert main(["model", "eval", "--data", f"{t}/split", "--model", f"{t}/m.json", "--out", f"{t}/ev.json"]) == 0
    ev = json.loads((tmp_path / "ev.json").read_text())
    assert 0.0 <= ev["feasibility_rate"] <= 1.0 and set(ev["mae"]) >= {"tap"}
    assert main(["explain", "compute", "--model", f"{t}/m.json", "--data", f"{t}/split/train.jsonl",
                 "--output-dim", "all", "--background", "5", "--out", f"{t}/a.jsonl"]) == EXIT_OK
    lines = (tmp_path / "a.jsonl").read_text().splitlines()
    assert len(lines) == 10 * 6
    for product in ("bar", "summary", "dependence", "force", "waterfall", "trust"):
        for fmt in ("json", "svg"):
            rc = main(["explain", "report", "--attributions", f"{t}/a.jsonl", "--data", f"{t}/split/train.jsonl",
                       "--product", product, "--format", fmt, "--instance", "1",
                       "--out", f"{t}/{product}.{fmt}"])
            assert rc == EXIT_OK, product
    wf = json.loads((tmp_path / "waterfall.json").read_text())
    assert wf["steps"][-1]["end"] == pytest.approx(wf["endpoint"])
    assert main(["trust", "run", "--attributions", f"{t}/a.jsonl", "--reference", f"{t}/split/train.jsonl",
                 "--out", f"{t}/trust.json"]) == EXIT_OK
    assert "agreement" in capsys.readouterr().err
    assert main(["explain", "compute", "--model", f"{t}/m.json", "--data", f"{t}/split/train.jsonl",
                 "--output-dim", "nope", "--out", f"{t}/x.jsonl"]) == EXIT_VALIDATION


def test_desk_bound_on_data_gen(tmp_path):
    assert main(["data", "gen", "--count", "5000", "--out", str(tmp_path / "x.jsonl")]) == EXIT_VALIDATION
