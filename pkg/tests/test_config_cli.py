import csv
import io
import json

import pytest

from cfcl import cli
from cfcl.config import SimConfig, build_config, parse_config
from cfcl.errors import ConfigError

SMALL = dict(classes=4, per_class=20, test_per_class=20, devices=4, avg_degree=2,
             classes_per_device=2, encoder_dims=[2, 8, 4], T=40, T_a=10, T_p=10, k_reserve=3,
             k_approx=10, k_macro=3, k_local=3, k_reserve_clusters=3, probe_iters=100,
             eval_per_class=10, spread=0.3, aug_sigma=0.1)


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(SMALL))
    return str(path)


def read_csv(path):
    with open(path, encoding="utf-8") as f:
        return list(csv.DictReader(f))


# ------------------------------------------------------------------- config --

def test_empty_file_gives_defaults(tmp_path):
    path = tmp_path / "empty.json"
    path.write_text("")
    assert parse_config(str(path)) == SimConfig()
    path.write_text("{}")
    assert parse_config(str(path)) == SimConfig()


def test_short_aggregation_window_rejected():
    with pytest.raises(ConfigError) as err:
        build_config({"T_a": 1})
    assert err.value.key == "T_a"


def test_unknown_key_and_bad_value_name_the_key():
    with pytest.raises(ConfigError) as err:
        build_config({"nonsense": 3})
    assert err.value.key == "nonsense"
    with pytest.raises(ConfigError) as err:
        build_config({"T": "many"})
    assert err.value.key == "T"


def test_fmnist_preset():
    cfg = build_config(preset="fmnist")
    assert (cfg.T, cfg.T_a, cfg.T_p, cfg.k_reserve, cfg.k_approx) == (2000, 25, 25, 20, 100)
    assert cfg.k_macro == cfg.k_local == cfg.k_reserve_clusters == 20


def test_T_rounded_up_to_aggregation_multiple():
    assert build_config({"T": 30, "T_a": 25}).T == 50


def test_flag_precedence(cfg_file):
    cfg = parse_config(cfg_file, {"T": "20", "spread": "0.5"})
    assert (cfg.T, cfg.spread, cfg.devices) == (20, 0.5, 4)
    for key, file_val, flag_val in (("seed", 1, "2"), ("lr", 0.2, "0.3"), ("mode", "uniform", "bulk")):
        got = build_config({key: file_val}, {key: flag_val})
        assert getattr(got, key) == type(file_val)(flag_val)
        assert getattr(build_config({key: file_val}), key) == file_val


def test_list_flags_parse():
    cfg = build_config(overrides={"encoder_dims": "2,16,4", "thresholds": "0.5,0.9"})
    assert cfg.encoder_dims == [2, 16, 4] and cfg.thresholds == [0.5, 0.9]


# ---------------------------------------------------------------------- run --

def test_run_writes_outputs(cfg_file, tmp_path, capsys):
    out = tmp_path / "out"
    assert cli.main(["run", "--config", cfg_file, "--out", str(out), "--seed", "3"]) == 0
    rows = read_csv(out / "cfcl_explicit-seed3-metrics.csv")
    assert len(rows) == SMALL["T"] // SMALL["T_a"]
    trace = json.loads((out / "cfcl_explicit-seed3-trace.json").read_text())
    assert trace["events"][0]["phase"] == "broadcast"
    echo = json.loads((out / "cfcl_explicit-seed3-config.json").read_text())
    assert echo["seed"] == 3 and echo["devices"] == 4


def test_run_twice_byte_identical(cfg_file, tmp_path):
    for d in ("a", "b"):
        assert cli.main(["run", "--config", cfg_file, "--out", str(tmp_path / d)]) == 0
    name = "cfcl_explicit-seed0-metrics.csv"
    assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_invalid_config_no_partial_output(cfg_file, tmp_path, capsys):
    out = tmp_path / "out"
    assert cli.main(["run", "--config", cfg_file, "--out", str(out), "--T-a", "1"]) == 2
    assert "T_a" in capsys.readouterr().err
    assert not out.exists()


def test_run_failure_exit_code(cfg_file, tmp_path, capsys):
    out = tmp_path / "out"
    code = cli.main(["run", "--config", cfg_file, "--out", str(out), "--per-class", "1",
                     "--classes-per-device", "1", "--mode", "fedavg"])
    assert code == 1
    assert "phase=train" in capsys.readouterr().err
    assert not out.exists()


def test_run_figures(cfg_file, tmp_path):
    out = tmp_path / "out"
    assert cli.main(["run", "--config", cfg_file, "--out", str(out), "--figures"]) == 0
    assert (out / "cfcl_explicit-seed0-accuracy.png").stat().st_size > 0
    assert (out / "cfcl_explicit-seed0-alignment.png").stat().st_size > 0


# -------------------------------------------------------------------- sweep --

def test_sweep_single_equals_run(cfg_file, tmp_path):
    assert cli.main(["run", "--config", cfg_file, "--out", str(tmp_path / "r"), "--mode",
                     "uniform", "--seed", "4"]) == 0
    assert cli.main(["sweep", "--config", cfg_file, "--out", str(tmp_path / "s"), "--modes",
                     "uniform", "--seeds", "4"]) == 0
    run_rows = read_csv(tmp_path / "r" / "uniform-seed4-metrics.csv")
    sweep_rows = read_csv(tmp_path / "s" / "sweep.csv")
    assert all(r.pop("mode") == "uniform" and r.pop("seed") == "4" for r in sweep_rows)
    assert sweep_rows == run_rows


def test_sweep_all_modes_three_seeds(cfg_file, tmp_path):
    modes = "cfcl_explicit,cfcl_implicit,uniform,bulk,kmeans,fedavg"
    out = tmp_path / "s"
    assert cli.main(["sweep", "--config", cfg_file, "--out", str(out), "--modes", modes,
                     "--seeds", "0,1,2"]) == 0
    rows = read_csv(out / "sweep.csv")
    blocks = {(r["mode"], r["seed"]) for r in rows}
    assert len(blocks) == 18
    per_run = SMALL["T"] // SMALL["T_a"]
    assert len(rows) == 18 * per_run
    assert len(list((out / "runs").glob("*-metrics.csv"))) == 18
    summary = read_csv(out / "summary.csv")
    assert len(summary) == 18 * 4
    assert set(summary[0]) == {"mode", "seed", "threshold", "t", "d2d_bytes", "uplink_bytes",
                               "delay_seconds"}


def test_sweep_usage_errors(cfg_file, tmp_path, capsys):
    out = tmp_path / "s"
    assert cli.main(["sweep", "--config", cfg_file, "--out", str(out), "--modes", "uniform",
                     "--seeds", ""]) == 2
    assert cli.main(["sweep", "--config", cfg_file, "--out", str(out), "--modes", "magic",
                     "--seeds", "1"]) == 2
    assert not out.exists()


def test_sweep_parallel_matches_serial(cfg_file, tmp_path):
    args = ["--config", cfg_file, "--modes", "fedavg,uniform", "--seeds", "0,1"]
    assert cli.main(["sweep", *args, "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["sweep", *args, "--out", str(tmp_path / "b"), "--jobs", "2"]) == 0
    assert (tmp_path / "a" / "sweep.csv").read_bytes() == (tmp_path / "b" / "sweep.csv").read_bytes()


def test_sweep_figures(cfg_file, tmp_path):
    out = tmp_path / "s"
    assert cli.main(["sweep", "--config", cfg_file, "--out", str(out), "--modes",
                     "fedavg,uniform", "--seeds", "0,1", "--figures"]) == 0
    assert (out / "accuracy.png").exists() and (out / "cost_to_threshold.png").exists()


def test_missing_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as err:
        cli.main([])
    assert err.value.code == 2
