import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from muon_ogd.cli import EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, main
from muon_ogd.constraints import General, constraints_to_json
from muon_ogd.matlin import matrix_from_json, matrix_to_json
from muon_ogd.msign import ns5

G = np.array([[1.0, 0.5], [-0.3, 2.0]])
C = np.array([[0.6, -0.2], [0.9, 0.4]])


def _write(tmp_path, cfg, fixture=None):
    if fixture is not None:
        (tmp_path / "fixture.json").write_text(json.dumps(fixture))
        cfg = {"fixture": "fixture.json", **cfg}
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"seeds": [0], "output_dir": "out", **cfg}))
    return path


def _run(path, *flags):
    return main(["run", str(path), *flags])


def test_solve_step_k0_matches_muon_golden(tmp_path):
    path = _write(tmp_path, {"mode": "solve_step", "optimizer": {"eta": 0.1}},
                  {"g": matrix_to_json(G)})
    assert _run(path) == EXIT_OK
    out = json.loads((tmp_path / "out" / "step_result.json").read_text())
    delta = matrix_from_json(out["delta"])
    np.testing.assert_array_equal(delta, -0.1 * ns5(G))
    assert out["residual"] == 0.0


def test_solve_step_exact_and_warm_start(tmp_path):
    fixture = {"g": matrix_to_json(G), "constraints": constraints_to_json(General((C,))),
               "warm": {"variant": "vector", "lambda": [-0.9]}}
    path = _write(tmp_path, {"mode": "solve_step", "optimizer": {"eta": 0.1, "exact": True}}, fixture)
    assert _run(path) == EXIT_OK
    out = json.loads((tmp_path / "out" / "step_result.json").read_text())
    assert out["residual"] <= 1e-4
    assert out["dual_objective"] == pytest.approx(2.75796, abs=1e-3)


def test_curriculum_single_seed_single_task(tmp_path):
    cfg = {"mode": "curriculum", "stream": {"n_tasks": 1, "dim": 6, "rank": 2, "steps_per_task": 20},
           "optimizer": {"eta": 0.02, "eta_dual": 0.5}}
    path = _write(tmp_path, cfg)
    assert _run(path) == EXIT_OK
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    rows = list(csv.reader(io.StringIO((tmp_path / "out" / "seed_0.csv").read_text())))
    assert rows[0] == ["after_task", "task1"]
    assert summary["aa"] == float(rows[1][1])
    assert summary["bt"] is None and summary["aa_std"] is None


def test_curriculum_multi_seed_byte_stable_across_jobs(tmp_path):
    cfg = {"mode": "curriculum", "seeds": [3, 1, 2],
           "stream": {"n_tasks": 2, "dim": 6, "rank": 2, "steps_per_task": 15},
           "optimizer": {"eta": 0.02, "eta_dual": 0.5}}
    path = _write(tmp_path, cfg)
    assert _run(path, "--trace") == EXIT_OK
    first = {p.name: p.read_bytes() for p in (tmp_path / "out").iterdir()}
    assert set(first) == {"seed_1.csv", "seed_2.csv", "seed_3.csv", "summary.json", "trace.jsonl"}
    assert _run(path, "--trace", "--jobs", "3") == EXIT_OK
    second = {p.name: p.read_bytes() for p in (tmp_path / "out").iterdir()}
    assert first == second
    summary = json.loads(first["summary.json"])
    assert summary["seeds"] == [3, 1, 2]
    assert " ± " in summary["aa_text"]
    bts = [r["bt"] for r in summary["runs"]]
    assert summary["bt"] == pytest.approx(np.mean(bts))
    assert summary["bt_std"] == pytest.approx(np.std(bts, ddof=1))
    rec = json.loads(first["trace.jsonl"].splitlines()[0])
    assert {"seed", "step", "inner_iter", "dual_objective", "residual"} <= set(rec)


def test_ablation_t_in_residual_non_increasing(tmp_path):
    fixture = {"g": matrix_to_json(G), "constraints": constraints_to_json(General((C,)))}
    cfg = {"mode": "ablation", "ablation": {"param": "t_in", "values": [1, 2, 4, 8]},
           "optimizer": {"eta": 0.1, "eta_dual": 0.1, "exact_msign": True}}
    path = _write(tmp_path, cfg, fixture)
    assert _run(path) == EXIT_OK
    rows = list(csv.DictReader(io.StringIO((tmp_path / "out" / "ablation.csv").read_text())))
    assert [r["t_in"] for r in rows] == ["1", "2", "4", "8"]
    res = [float(r["residual"]) for r in rows]
    assert all(b <= a for a, b in zip(res, res[1:]))


def test_ablation_over_curricula(tmp_path):
    cfg = {"mode": "ablation", "seeds": [0, 1], "ablation": {"param": "eta", "values": [0.01, 0.02]},
           "stream": {"n_tasks": 2, "dim": 6, "rank": 2, "steps_per_task": 10},
           "optimizer": {"kind": "muon"}}
    path = _write(tmp_path, cfg)
    assert _run(path, "--jobs", "2") == EXIT_OK
    rows = list(csv.DictReader(io.StringIO((tmp_path / "out" / "ablation.csv").read_text())))
    assert list(rows[0]) == ["eta", "aa", "aa_std", "bt", "bt_std"] and len(rows) == 2


@pytest.mark.parametrize(
    "cfg, field",
    [
        ({"mode": "curriculum", "seeds": []}, "seeds"),
        ({"mode": "curriculum", "optimizer": {"eta": -1}}, "optimizer.eta"),
        ({"mode": "curriculum", "optimizer": {"kind": "adam"}}, "optimizer.kind"),
        ({"mode": "curriculum", "stream": {"n_tasks": 0}}, "stream.n_tasks"),
        ({"mode": "curriculum", "bogus": 1}, "bogus"),
        ({"mode": "solve_step", "fixture": "missing.json"}, "fixture"),
        ({"mode": "ablation", "ablation": {"param": "t_in", "values": [1.5]}}, "ablation.values[0]"),
        ({"mode": "teleport"}, "mode"),
    ],
)
def test_invalid_config_exit_2_with_field_path(tmp_path, capsys, cfg, field):
    path = _write(tmp_path, cfg)
    assert _run(path) == EXIT_CONFIG
    assert f"invalid config: {field}" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_bad_fixture_exit_2(tmp_path, capsys):
    path = _write(tmp_path, {"mode": "solve_step"}, {"g": {"rows": 2, "cols": 2, "entries": [1, 2]}})
    assert _run(path) == EXIT_CONFIG
    assert "fixture.g" in capsys.readouterr().err


def test_numerical_abort_exit_3(tmp_path, capsys):
    cfg = {"mode": "curriculum", "stream": {"n_tasks": 1, "dim": 4, "rank": 1, "steps_per_task": 200},
           "optimizer": {"kind": "sgd", "eta": 1e6, "beta": 0.0, "vector_lr": 1e6}}
    path = _write(tmp_path, cfg)
    with np.errstate(all="ignore"):
        assert _run(path) == EXIT_NUMERICAL
    assert "numerical abort" in capsys.readouterr().err


def test_console_entry_point(tmp_path):
    path = _write(tmp_path, {"mode": "solve_step"}, {"g": matrix_to_json(G)})
    proc = subprocess.run([sys.executable, "-m", "muon_ogd", "run", str(path)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "out" / "step_result.json").exists()
