import json
import os
import subprocess
import sys

import numpy as np
import pytest

from slope_lab import checks, cli
from slope_lab.cli import ConfigError, load_config, main
from slope_lab.io import read_grid_csv, read_json, read_pgm
from slope_lab.mdp import build_gridworld, default_gridworld


def _config(tmp_path, **extra):
    body = {"learner": {"episodes": 10, "eval_interval": 5}, "seeds": [0]}
    for k, v in extra.items():
        body[k] = v
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(body))
    return str(path)


def test_precedence_flag_over_file_over_default(tmp_path, monkeypatch):
    monkeypatch.delenv("SLOPE_LAB_OUT", raising=False)
    path = _config(tmp_path, seeds=[3, 4], out=str(tmp_path / "from_file"))
    cfg = load_config(path)
    assert cfg.seeds == [3, 4] and cfg.out == tmp_path / "from_file"
    assert cfg.learner.eta == 1.0 and cfg.learner.episodes == 10
    cfg = load_config(path, {"seeds": [9], "out": str(tmp_path / "flag")})
    assert cfg.seeds == [9] and cfg.out == tmp_path / "flag"
    assert load_config().out.name == "slope_lab_out"
    monkeypatch.setenv("SLOPE_LAB_OUT", str(tmp_path / "env"))
    assert load_config().out == tmp_path / "env"


@pytest.mark.parametrize("body", ['{"learner": {"bogus": 1}}', '{"nope": 1}', "[1, 2]", "{not json",
                                  '{"seeds": []}', '{"task": {"map": "/does/not/exist.txt"}}',
                                  '{"learner": {"gamma": 1.5}}', '{"jobs": 0}'])
def test_bad_config_exit_2(tmp_path, body, capsys):
    path = tmp_path / "bad.json"
    path.write_text(body)
    assert main(["check", "theorem", "--config", str(path), "--out", str(tmp_path)]) == 2
    assert "error:" in capsys.readouterr().err


def test_missing_config_file_exit_2(tmp_path):
    assert main(["gridworld", "--config", str(tmp_path / "nope.json")]) == 2


def test_unwritable_out_exit_2(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["gridworld", "--config", _config(tmp_path), "--out", str(blocker / "sub")]) == 2


def test_check_theorem_exit_0(tmp_path, capsys):
    assert main(["check", "theorem", "--out", str(tmp_path)]) == 0
    report = read_json(tmp_path / "check_theorem.json")
    assert report["passed"] and report["results"][0]["n_mdps"] == 50
    assert "PASS" in capsys.readouterr().out


def test_check_contraction_outside_regime(tmp_path, capsys):
    assert main(["check", "contraction", "--eta", "1.0", "--out", str(tmp_path)]) == 0
    assert "outside contraction regime" in capsys.readouterr().out
    rows = read_json(tmp_path / "check_contraction.json")["results"][0]["pairs"]
    assert rows[-1]["eta"] == 1.0 and rows[-1]["status"] == "outside contraction regime"


def test_check_failure_exit_1(tmp_path, monkeypatch):
    monkeypatch.setitem(checks.SUITES, "theorem", (lambda **kw: {"suite": "x", "passed": False, "runtime_s": 0.0},))
    assert main(["check", "theorem", "--out", str(tmp_path)]) == 1


def _snapshot(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir()) if p.name != "report.json"}


def test_gridworld_exports_and_determinism(tmp_path):
    cfg = _config(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["gridworld", "--config", cfg, "--out", str(a), "--seed", "0", "--seed", "1"]) == 0
    assert main(["gridworld", "--config", cfg, "--out", str(b), "--seed", "0", "--seed", "1"]) == 0
    assert _snapshot(a) == _snapshot(b)
    for k in (10, 20, 30, 40, 100):
        assert (a / f"heatmap_k{k:03d}.csv").exists() and (a / f"heatmap_k{k:03d}.pgm").exists()
        grid = read_grid_csv(a / f"heatmap_k{k:03d}.csv")
        assert grid.shape == (10, 10)
        assert read_pgm(a / f"heatmap_k{k:03d}.pgm").shape == (10, 10)
        side = read_json(a / f"heatmap_k{k:03d}.json")
        assert side["min"] == grid.min() and side["max"] == grid.max()
    for name in ("curve_seed0.csv", "curve_seed1.csv", "events_seed0.csv", "curve_median.csv", "landscape.json"):
        assert (a / name).exists()
    report = read_json(a / "report.json")
    assert [r["seed"] for r in report["seeds"]] == [0, 1]


def test_gridworld_parallel_matches_serial(tmp_path):
    cfg = _config(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    main(["gridworld", "--config", cfg, "--out", str(a), "--seed", "0", "--seed", "1"])
    main(["gridworld", "--config", cfg, "--out", str(b), "--seed", "0", "--seed", "1", "--jobs", "2"])
    assert _snapshot(a) == _snapshot(b)


def test_iteration_zero_heatmap_only_next_to_goal(tmp_path):
    main(["gridworld", "--config", _config(tmp_path), "--out", str(tmp_path)])
    grid = read_grid_csv(tmp_path / "heatmap_k000.csv")
    spec = default_gridworld()
    gr, gc = spec.goal
    nz = {tuple(x) for x in np.argwhere(grid != 0.0)}
    assert nz and all(abs(r - gr) + abs(c - gc) == 1 for r, c in nz)
    # one backup from Q = 0: the best action's reward
    mdp = build_gridworld(spec)
    np.testing.assert_array_equal(grid.ravel(), mdp.reward.max(axis=1))


def test_custom_map(tmp_path):
    m = tmp_path / "map.txt"
    m.write_text("S..\n.#.\n..G\n")
    cfg = _config(tmp_path, task={"map": str(m)}, landscape={"iterations": [0, 3]})
    assert main(["gridworld", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    assert read_grid_csv(tmp_path / "o" / "heatmap_k003.csv").shape == (3, 3)


def test_sweep_rows_and_repeat(tmp_path):
    cfg = _config(tmp_path)
    for d in ("a", "b"):
        assert main(["sweep", "eta", "--config", cfg, "--out", str(tmp_path / d)]) == 0
    text = (tmp_path / "a" / "sweep_eta.csv").read_text().splitlines()
    assert text[0] == "value,median_final_success,iqr_final_success,median_episodes_to_success"
    assert [float(r.split(",")[0]) for r in text[1:]] == [0.02, 0.1, 0.5, 1.0]
    assert (tmp_path / "a" / "sweep_eta.csv").read_bytes() == (tmp_path / "b" / "sweep_eta.csv").read_bytes()
    assert main(["sweep", "tau", "--config", cfg, "--out", str(tmp_path / "t")]) == 0
    assert len((tmp_path / "t" / "sweep_tau.csv").read_text().splitlines()) == 5
    assert main(["sweep", "eta", "--values", "0.5", "--config", cfg, "--out", str(tmp_path)]) == 2


def test_compare_writes_five_curves(tmp_path):
    assert main(["compare", "--config", _config(tmp_path), "--out", str(tmp_path)]) == 0
    for v in ("none", "bootstrapped", "similarity", "entropy", "smoothed"):
        assert (tmp_path / f"compare_{v}.csv").exists()
    data = read_json(tmp_path / "compare.json")
    assert set(data["variants"]) == {"none", "bootstrapped", "similarity", "entropy", "smoothed"}
    assert main(["compare", "bogus", "--config", _config(tmp_path), "--out", str(tmp_path)]) == 2


def test_plan_command(tmp_path):
    cfg = _config(tmp_path, planner={"n_samples": 64, "n_elites": 8, "n_iterations": 3},
                  pointmass={"max_steps": 25})
    assert main(["plan", "--config", cfg, "--out", str(tmp_path)]) == 0
    rep = read_json(tmp_path / "plan_report.json")
    assert rep["episodes"][0]["seed"] == 0
    assert (tmp_path / "plan_seed0.csv").read_text().startswith("t,x0,x1,a0,a1,reward")


def test_module_entry_point(tmp_path):
    env = dict(os.environ, SLOPE_LAB_OUT=str(tmp_path))
    out = subprocess.run([sys.executable, "-m", "slope_lab", "check", "qce"], env=env, capture_output=True,
                         text=True)
    assert out.returncode == 0 and (tmp_path / "check_qce.json").exists()


@pytest.mark.slow
def test_bootstrapped_not_worse_than_none(tmp_path):
    cfg = load_config(None, {"seeds": list(range(20)), "out": str(tmp_path)})
    assert cli.cmd_compare(cfg, ["none", "bootstrapped"]) == 0
    v = read_json(tmp_path / "compare.json")["variants"]
    assert v["bootstrapped"]["median_final_success"] >= v["none"]["median_final_success"]
