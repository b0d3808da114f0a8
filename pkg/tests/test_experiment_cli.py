import json
import os

import pytest

from radfl import cli
from radfl.errors import ConfigError
from radfl.experiment import (config_hash, derive_seed, load_config, run_experiment, sweep_aggregator,
                              validate_config)
from radfl.netmodel import graph_from_edges


def small_config(**over):
    cfg = {
        "name": "small",
        "root_seed": 3,
        "topology": {"kind": "reference", "edge_density": 0.5},
        "task": {"kind": "quadratic", "dim": 8, "seed": 1},
        "protocols": [{"protocol": "raa", "scheme": "coeff", "lr": 0.2},
                      {"protocol": "aayg", "J": 1, "lr": 0.2}],
        "packet_lengths": [2],
        "rounds": 4,
        "replications": 2,
    }
    cfg.update(over)
    return cfg


def write(tmp_path, name, obj):
    path = tmp_path / name
    path.write_text(obj if isinstance(obj, str) else json.dumps(obj, indent=2))
    return str(path)


def read_outputs(out):
    return {f: open(os.path.join(out, f), "rb").read()
            for f in ("metrics.csv", "summary.json", "bounds.json", "routes.json")}


def test_seed_derivation_is_stable_and_stage_specific():
    assert derive_seed(0, "losses", 0, 0, 1) == derive_seed(0, "losses", 0, 0, 1)
    assert derive_seed(0, "losses", 0, 0, 1) != derive_seed(0, "losses", 0, 1, 0)
    assert derive_seed(0, "losses") != derive_seed(1, "losses")
    assert 0 <= derive_seed(7, "task") < 2 ** 64


def test_validation_reports_every_problem_with_lines(tmp_path, capsys):
    text = """{
  "topology": {"kind": "reference", "edge_density": 1.5},
  "task": {"kind": "quadratic", "dim": 4},
  "protocols": [{"protocol": "cfl", "aggregator": 40, "colour": 1}],
  "packet_lengths": [2],
  "rounds": 3,
  "bogus": true
}
"""
    path = write(tmp_path, "bad.json", text)
    with pytest.raises(ConfigError) as info:
        load_config(path)
    diags = info.value.diagnostics
    assert any(d.startswith(f"{path}:2:") and "edge_density" in d for d in diags)
    assert any(d.startswith(f"{path}:4:") and "colour" in d for d in diags)
    assert any(d.startswith(f"{path}:4:") and "aggregator" in d for d in diags)
    assert any(d.startswith(f"{path}:7:") and "bogus" in d for d in diags)
    assert cli.main(["simulate", path, "--out", str(tmp_path / "o")]) == 2
    assert "bogus" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_malformed_json_points_at_line(tmp_path):
    path = write(tmp_path, "broken.json", '{\n  "rounds": 3,\n  oops\n}')
    with pytest.raises(ConfigError) as info:
        load_config(path)
    assert info.value.diagnostics[0].startswith(f"{path}:3:")


def test_missing_required_keys():
    with pytest.raises(ConfigError) as info:
        validate_config({"packet_lengths": [1]})
    text = " ".join(info.value.diagnostics)
    assert "rounds" in text and "topology" in text and "task" in text


def test_runtime_failure_names_stage(tmp_path, capsys):
    cfg = small_config(task={"kind": "mlp", "dim": 10, "hidden": 4})
    path = write(tmp_path, "mlp.json", cfg)
    assert cli.main(["simulate", path, "--out", str(tmp_path / "o")]) == 3
    assert "'task'" in capsys.readouterr().err


def test_reruns_are_byte_identical_and_headed(tmp_path):
    cfg = small_config()
    for d in "ab":
        run_experiment(cfg, str(tmp_path / d))
    a, b = read_outputs(str(tmp_path / "a")), read_outputs(str(tmp_path / "b"))
    assert a == b
    h = config_hash(cfg)
    first = a["metrics.csv"].decode().splitlines()[0]
    assert first == f"# schema=radfl-metrics/1 config_sha256={h} root_seed=3"
    for name in ("summary.json", "bounds.json", "routes.json"):
        doc = json.loads(a[name])
        assert doc["config_sha256"] == h and doc["root_seed"] == 3


def test_parallel_jobs_match_serial(tmp_path):
    cfg = small_config()
    run_experiment(cfg, str(tmp_path / "s"), jobs=1)
    run_experiment(cfg, str(tmp_path / "p"), jobs=2)
    assert read_outputs(str(tmp_path / "s")) == read_outputs(str(tmp_path / "p"))


def test_adding_a_protocol_leaves_others_unchanged(tmp_path):
    base = run_experiment(small_config(), str(tmp_path / "a"))
    more = small_config()
    more["protocols"] = more["protocols"] + [{"protocol": "raa", "scheme": "substitution", "lr": 0.2}]
    grown = run_experiment(more, str(tmp_path / "b"))
    key = lambda r: (r["replication"], r["protocol"], r["K"])  # noqa: E731
    old = {key(r): r["final_mean_loss"] for r in base["runs"]}
    new = {key(r): r["final_mean_loss"] for r in grown["runs"]}
    assert all(new[k] == v for k, v in old.items())


def test_seed_flag_changes_draws(tmp_path):
    lossy = graph_from_edges(3, {(0, 1): 0.99, (1, 2): 0.99})
    cfg = graph_config(lossy, protocols=[{"protocol": "raa", "lr": 0.2}], replications=1)
    path = write(tmp_path, "c.json", cfg)
    assert cli.main(["simulate", path, "--out", str(tmp_path / "x"), "--seed", "1"]) == 0
    assert cli.main(["simulate", path, "--out", str(tmp_path / "y"), "--seed", "2"]) == 0
    x = json.loads((tmp_path / "x" / "summary.json").read_text())
    y = json.loads((tmp_path / "y" / "summary.json").read_text())
    assert x["root_seed"] == 1 and y["root_seed"] == 2
    assert x["runs"][0]["final_mean_loss"] != y["runs"][0]["final_mean_loss"]


def test_errorfree_recipe(tmp_path):
    summary = cli.run_recipe("errorfree-equivalence", str(tmp_path))
    assert summary["check"]["pass"]
    assert summary["max_trajectory_divergence"] <= 1e-12


def test_overhead_recipe(tmp_path, capsys):
    assert cli.main(["recipe", "overhead-table", "--out", str(tmp_path)]) == 0
    check = json.loads(capsys.readouterr().out)
    assert check["traffic_mbit"]["aayg-J1-coeff"] == pytest.approx(387.2, abs=1e-9)
    assert check["traffic_mbit"]["aayg-J5-coeff"] == pytest.approx(1936.0, abs=1e-9)


def test_recipe_config_printing_and_unknown_name(capsys):
    assert cli.main(["recipe", "relay-sweep", "--print-config"]) == 0
    cfg = json.loads(capsys.readouterr().out)
    validate_config(cfg)
    assert cfg["topology"]["relays"] == [0, 7, 14, 28]
    assert cli.main(["recipe", "nope", "--print-config"]) == 2


def graph_config(graph, **over):
    cfg = {
        "root_seed": 0,
        "topology": {"kind": "graph", "graph": graph.to_dict()},
        "task": {"kind": "quadratic", "dim": 6, "seed": 2},
        "protocols": [{"protocol": "cfl", "aggregator": 0, "lr": 0.2}],
        "packet_lengths": [1],
        "rounds": 15,
        "replications": 6,
    }
    cfg.update(over)
    return cfg


def test_star_centre_is_best_aggregator():
    # every relayed uplink compounds an imperfect spoke, so only the centre avoids them
    spokes = {(0, 1): 0.998, (0, 2): 0.998, (0, 3): 0.998, (0, 4): 0.99}
    cfg = graph_config(graph_from_edges(5, spokes), task={"kind": "quadratic", "dim": 20, "seed": 2},
                       replications=20)
    ranking = sweep_aggregator(cfg)
    assert ranking[0]["aggregator"] == 0 and ranking[0]["rank"] == 1
    assert [r["rank"] for r in ranking] == [1, 2, 3, 4, 5]
    assert sweep_aggregator(cfg) == ranking


def test_two_client_error_free_tie():
    cfg = graph_config(graph_from_edges(2, {(0, 1): 1.0}), replications=1)
    ranking = sweep_aggregator(cfg)
    assert ranking[0]["median_final_mean_loss"] == ranking[1]["median_final_mean_loss"]
    assert [r["aggregator"] for r in ranking] == [0, 1]


def test_routes_and_bounds_commands(tmp_path):
    g = graph_from_edges(3, {(0, 1): 0.9999, (1, 2): 0.9999, (0, 2): 0.99})
    gpath = write(tmp_path, "g.json", g.to_dict())
    out = tmp_path / "routes.json"
    assert cli.main(["routes", gpath, "--K", "2", "--out", str(out)]) == 0
    pairs = {(x["src"], x["dst"]): x["hops"] for x in json.loads(out.read_text())["pairs"]}
    assert pairs[(0, 2)] == [0, 1, 2]
    budget = write(tmp_path, "b.json", {"budgets": {"1": 0}})
    assert cli.main(["routes", gpath, "--budget", budget, "--out", str(out)]) == 0
    pairs = {(x["src"], x["dst"]): x["hops"] for x in json.loads(out.read_text())["pairs"]}
    assert pairs[(0, 2)] == [0, 2]

    inputs = {"L": 1.0, "mu": 0.5, "eta": 0.2, "I": 2, "p": [0.5, 0.5], "rho": [[1, 0.9], [0.9, 1]]}
    ipath = write(tmp_path, "i.json", inputs)
    bout = tmp_path / "bounds.json"
    assert cli.main(["bounds", ipath, "--lambda-max", "1.0", "--out", str(bout)]) == 0
    doc = json.loads(bout.read_text())
    assert doc["lemma3_norm_bound"] == pytest.approx(0.15)
    bad = write(tmp_path, "bad.json", {**inputs, "eta": 5.0})
    assert cli.main(["bounds", bad]) == 2
