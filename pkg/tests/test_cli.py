import json
import os
import subprocess
import sys

import pytest

from hsdn.cli import main, resolve_seed
from hsdn.config import ConfigError, EventSpec, config_from_dict, parse_config
from hsdn.kernel import S
from hsdn.scenario import COMPARE_COLUMNS, builtin, grid_edges, config_from_graph

ARTIFACTS = ["cdf.csv", "report.json", "rules.jsonl", "samples.csv", "trace.jsonl"]


def write_cfg(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(cfg.to_json())
    return str(p)


def test_prototype_parses_with_defaults():
    cfg = parse_config("prototype")
    assert cfg.nodes == [1, 2, 3] and len(cfg.links) == 3
    assert cfg.knobs.a_proc_us == 2000 and cfg.knobs.t_install_us == 1000
    assert cfg.control_loss == 0.05


def test_range_errors_name_the_field():
    raw = json.loads(builtin("prototype").to_json())
    raw["links"][0]["loss"] = 1.5
    raw["knobs"]["cluster_size"] = 0
    raw["bogus"] = 1
    with pytest.raises(ConfigError) as exc:
        config_from_dict(raw)
    errs = exc.value.errors
    assert any(e.startswith("links[0].loss") for e in errs)
    assert any(e.startswith("knobs.cluster_size") for e in errs)
    assert any(e.startswith("bogus") for e in errs)


def test_missing_required_fields_listed():
    with pytest.raises(ConfigError) as exc:
        config_from_dict({})
    assert exc.value.errors == ["links: missing required field", "nodes: missing required field"]


@pytest.mark.parametrize("name", ["prototype", "line6", "triangle", "grid12-fuzz"])
def test_config_round_trip(name):
    cfg = builtin(name)
    again = config_from_dict(json.loads(cfg.to_json()))
    assert again.to_json() == cfg.to_json()


def test_validate_reports_every_problem(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"nodes": [1, 2], "links": [{"a": 1, "b": 3}],
                             "control": {"loss": 2}}))
    assert main(["validate", "--config", str(p)]) == 1
    err = capsys.readouterr().err
    assert "unknown node 3" in err and "control.loss" in err


def test_run_is_byte_deterministic(tmp_path):
    cfg = write_cfg(tmp_path, builtin("prototype"))
    for d in ("a", "b"):
        assert main(["run", "--config", cfg, "--seed", "5", "--trials", "5",
                     "--out", str(tmp_path / d)]) == 0
    for f in ARTIFACTS:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert sorted(os.listdir(tmp_path / "a")) == ARTIFACTS


def test_unwritable_out_dir_leaves_nothing(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    out = blocker / "out"
    assert main(["run", "--config", "prototype", "--trials", "0", "--out", str(out)]) == 1
    assert blocker.read_text() == "x" and sorted(os.listdir(tmp_path)) == ["file"]


def test_anomalies_exit_two(tmp_path, capsys):
    cfg = builtin("line6")
    cfg.knobs.ttl = 2
    cfg.knobs.traffic_interval_us = 1 * S
    cfg.knobs.horizon_us = 3 * S
    out = tmp_path / "out"
    assert main(["run", "--config", write_cfg(tmp_path, cfg), "--trials", "0",
                 "--out", str(out)]) == 2
    assert "anomalies" in capsys.readouterr().err
    assert json.loads((out / "report.json").read_text())["anomalies"]


def test_unreconfigured_node_exit_three(tmp_path):
    cfg = builtin("prototype")
    cfg.events.append(EventSpec(5 * S, "control", node=3, state="down"))
    cfg.knobs.horizon_us = 20 * S
    out = tmp_path / "out"
    assert main(["run", "--config", write_cfg(tmp_path, cfg), "--trials", "0",
                 "--out", str(out)]) == 3
    incidents = json.loads((out / "report.json").read_text())["incidents"]
    assert any(i["kind"] == "unreconfigured-node" and i["node"] == 3 for i in incidents)


def test_seed_precedence():
    cfg = builtin("prototype")
    cfg.seed = 1
    assert resolve_seed(cfg, 3, "2") == 3
    assert resolve_seed(cfg, None, "2") == 2
    assert resolve_seed(cfg, None, None) == 1
    with pytest.raises(ConfigError):
        resolve_seed(cfg, None, "abc")


def test_env_seed_reaches_the_run(tmp_path):
    env = dict(os.environ, HSDN_SEED="77")
    out = tmp_path / "out"
    res = subprocess.run([sys.executable, "-m", "hsdn", "run", "--config", "prototype",
                          "--trials", "0", "--out", str(out)],
                         env=env, capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert "seed=77" in res.stdout
    assert json.loads((out / "report.json").read_text())["seed"] == 77


def test_compare_refuses_single_method(tmp_path, capsys):
    assert main(["compare", "--config", "prototype", "--methods", "backup",
                 "--out", str(tmp_path)]) == 1
    assert "at least two" in capsys.readouterr().err


def test_compare_refuses_mismatched_topologies(tmp_path):
    assert main(["compare", "--config", "prototype", "--config", "line6",
                 "--methods", "pure-sdn,backup", "--out", str(tmp_path / "o")]) == 1
    assert not (tmp_path / "o").exists()


def test_compare_two_methods_backup_dominates(tmp_path):
    out = tmp_path / "o"
    assert main(["compare", "--config", "prototype", "--methods", "pure-sdn,backup",
                 "--trials", "20", "--out", str(out)]) == 0
    lines = (out / "compare.csv").read_text().splitlines()
    assert lines[0] == ",".join(COMPARE_COLUMNS)
    rows = [dict(zip(COMPARE_COLUMNS, l.split(","))) for l in lines[1:]]
    assert [r["method"] for r in rows] == ["pure-sdn", "backup"]
    sdn, bak = rows
    for col in ("mean_us", "p50_us", "p95_us", "p99_us"):
        assert float(bak[col]) < float(sdn[col])


def test_compare_all_methods_on_twelve_nodes(tmp_path):
    cfg = config_from_graph(range(12), grid_edges(3, 4), name="grid")
    cfg.events = [EventSpec(2 * S, "link", link=(5, 6), state="down")]
    cfg.knobs.horizon_us = 6 * S
    cfg.knobs.cluster_size = 4
    out = tmp_path / "o"
    assert main(["compare", "--config", write_cfg(tmp_path, cfg),
                 "--methods", "pure-sdn,pure-distributed,migration,cluster,backup",
                 "--trials", "2", "--out", str(out)]) == 0
    assert len((out / "compare.csv").read_text().splitlines()) == 6


def test_artifact_headers(tmp_path):
    out = tmp_path / "o"
    main(["run", "--config", "prototype", "--trials", "2", "--out", str(out)])
    assert (out / "samples.csv").read_text().splitlines()[0] == (
        "trial,method,delay_us,signal_up_us,compute_us,signal_down_us,install_us,retries_us")
    assert (out / "cdf.csv").read_text().splitlines()[0] == "delay_us,cumulative_fraction"
    first = json.loads((out / "trace.jsonl").read_text().splitlines()[0])
    assert sorted(first) == ["detail", "kind", "seq", "t_us"]
