import csv
import json
import os
import subprocess
import sys

import pytest
import yaml

from marketrl.cli import (
    ConfigError,
    load_config,
    main,
    parse_config,
    run_experiment,
    validate_config,
)
from marketrl.deep_market import METRIC_COLUMNS

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CONFIGS = os.path.join(ROOT, "configs")
SHIPPED = sorted(f for f in os.listdir(CONFIGS) if f.endswith(".yaml"))


def config_path(name):
    return os.path.join(CONFIGS, name)


def chain_config(**market):
    base = {"kind": "deep", "rent_epsilon": 0.01, "endowment": 0.8, "episode_horizon": 20}
    base.update(market)
    return {
        "seed": 7,
        "steps": 200,
        "environment": {"name": "chain", "params": {"n": 5}},
        "market": base,
        "agents": {"family": "tabular_constant", "bid_grid": {"start": 0.0, "stop": 1.0, "step": 0.25}},
    }


def write_yaml(tmp_path, data, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data))
    return str(path)


def errors_of(data):
    with pytest.raises(ConfigError) as info:
        parse_config(data)
    return info.value.errors


@pytest.mark.parametrize("name", SHIPPED)
def test_shipped_configs_validate(name):
    assert validate_config(config_path(name)) == []


def test_rent_out_of_range_names_the_field():
    errs = errors_of(chain_config(rent_epsilon=1.5))
    assert len(errs) == 1 and errs[0].startswith("market.rent_epsilon")


def test_unknown_environment_is_a_referential_error():
    data = chain_config()
    data["environment"]["name"] = "labyrinth"
    errs = errors_of(data)
    assert any(e.startswith("environment.name") and "labyrinth" in e for e in errs)


def test_every_problem_is_reported():
    data = chain_config(auction_kind="dutch")
    data["colour"] = "blue"
    data["steps"] = -1
    data["agents"]["family"] = "genetic"
    errs = errors_of(data)
    fields = {e.split(":")[0] for e in errs}
    assert {"colour", "steps", "market.auction_kind", "agents.family"} <= fields


def test_bad_environment_params_rejected():
    data = chain_config()
    data["environment"]["params"] = {"width": 3}
    assert any(e.startswith("environment.params") for e in errors_of(data))


def test_unreadable_and_malformed_files(tmp_path):
    assert validate_config(str(tmp_path / "missing.yaml"))[0].startswith("cannot read")
    bad = tmp_path / "bad.yaml"
    bad.write_text("seed: [1, 2\n")
    assert validate_config(str(bad))[0].startswith("parse error")
    listy = tmp_path / "list.yaml"
    listy.write_text("- 1\n- 2\n")
    assert "mapping" in validate_config(str(listy))[0]


def test_equilibrium_section_checked():
    data = chain_config()
    data["market"]["kind"] = "wide"
    data["equilibrium"] = {"step_size": 0, "max_iters": 2.5, "patience": -1, "damping": 1}
    fields = {e.split(":")[0] for e in errors_of(data)}
    assert {"equilibrium.step_size", "equilibrium.max_iters", "equilibrium.patience",
            "equilibrium.damping"} <= fields


def test_zero_steps_leaves_initial_economy(tmp_path):
    cfg = parse_config(chain_config())
    summary = run_experiment(cfg, steps=0, out_dir=str(tmp_path))
    assert summary["steps"] == 0
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines == [",".join(METRIC_COLUMNS)]
    assert (tmp_path / "ledger.txt").read_text() == "system 0.0\n"
    assert summary["final_total_wealth"] == 0.0


def test_chain_run_twice_is_byte_identical(tmp_path):
    cfg = load_config(config_path("chain_deep.yaml"))
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        run_experiment(cfg, steps=1500, out_dir=str(out))
        outs.append(out)
    for name in ("metrics.csv", "ledger.txt", "summary.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_seed_changes_the_run(tmp_path):
    cfg = load_config(config_path("gridworld_deep.yaml"))
    run_experiment(cfg, steps=500, seed=1, out_dir=str(tmp_path / "a"))
    run_experiment(cfg, steps=500, seed=2, out_dir=str(tmp_path / "b"))
    assert (tmp_path / "a" / "metrics.csv").read_bytes() != (tmp_path / "b" / "metrics.csv").read_bytes()


def test_csv_and_jsonl_carry_the_same_rows(tmp_path):
    cfg = load_config(config_path("chain_deep.yaml"))
    run_experiment(cfg, steps=100, out_dir=str(tmp_path / "c"), fmt="csv")
    run_experiment(cfg, steps=100, out_dir=str(tmp_path / "j"), fmt="jsonl")
    with open(tmp_path / "c" / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    lines = (tmp_path / "j" / "metrics.jsonl").read_text().splitlines()
    assert len(rows) == len(lines) == 100
    for r, line in zip(rows, lines):
        rec = json.loads(line)
        assert list(rec) == list(METRIC_COLUMNS)
        assert float(r["price"]) == rec["price"] and int(r["winner_id"]) == rec["winner_id"]


def test_deep_summary_has_winning_policy(tmp_path):
    summary = run_experiment(load_config(config_path("chain_deep.yaml")), steps=300, out_dir=str(tmp_path))
    # the goal state is terminal, so only the four others have a policy
    assert set(summary["winning_policy"]) == {"0", "1", "2", "3"}
    assert all(set(v) == {"winner", "action", "price"} for v in summary["winning_policy"].values())
    on_disk = json.loads((tmp_path / "summary.json").read_text())
    assert on_disk["winning_policy"] == summary["winning_policy"]


def test_wide_summary_has_residual_stats(tmp_path):
    summary = run_experiment(load_config(config_path("production_wide.yaml")), steps=10, out_dir=str(tmp_path))
    assert summary["market_kind"] == "wide"
    assert set(summary["equilibrium_residual"]) == {"mean", "max", "untraded_steps"}
    header = (tmp_path / "metrics.csv").read_text().splitlines()[0]
    assert header.endswith("price_iron,price_tool")
    assert summary["final_total_wealth"] == pytest.approx(summary["expected_total_wealth"], abs=1e-9)


def test_mlp_config_reports_tiny_deviation(tmp_path):
    summary = run_experiment(load_config(config_path("mlp_equivalence.yaml")), out_dir=str(tmp_path))
    assert summary["max_deviation"] <= 1e-10
    assert summary["winners_match"] is True


def test_parallel_runners_through_main(tmp_path, capsys):
    code = main(["run", config_path("chain_deep.yaml"), "--steps", "400", "--runners", "3",
                 "--out", str(tmp_path)])
    assert code == 0
    assert json.loads(capsys.readouterr().out)["steps"] == 400


def test_runners_need_a_deep_market(tmp_path, capsys):
    code = main(["run", config_path("production_wide.yaml"), "--runners", "2", "--out", str(tmp_path)])
    assert code == 2
    assert "--runners" in capsys.readouterr().err


def test_main_validate_exit_codes(tmp_path, capsys):
    assert main(["validate", config_path("chain_deep.yaml")]) == 0
    assert capsys.readouterr().out.strip() == "ok"
    bad = write_yaml(tmp_path, chain_config(rent_epsilon=1.5))
    assert main(["validate", bad]) == 2
    assert "market.rent_epsilon" in capsys.readouterr().err


def test_main_run_rejects_invalid_config(tmp_path, capsys):
    data = chain_config()
    data["environment"]["name"] = "labyrinth"
    assert main(["run", write_yaml(tmp_path, data), "--out", str(tmp_path / "o")]) == 2
    assert not (tmp_path / "o").exists()


def test_compile_mlp_subcommand(capsys):
    code = main(["compile-mlp", config_path("mlp_4_3_2.txt"), "--verify", config_path("inputs_4.txt")])
    report = json.loads(capsys.readouterr().out)
    assert code == 0 and report["ok"] and report["max_deviation"] <= 1e-10
    assert report["widths"] == [4, 3, 2]


def test_compile_mlp_width_mismatch(tmp_path, capsys):
    inputs = tmp_path / "in.txt"
    inputs.write_text("1 2 3\n")
    assert main(["compile-mlp", config_path("mlp_4_3_2.txt"), "--verify", str(inputs)]) == 1
    assert "width" in capsys.readouterr().err


def test_console_entry_point_runs(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "marketrl.cli", "validate", config_path("mlp_equivalence.yaml")],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0 and proc.stdout.strip() == "ok"
