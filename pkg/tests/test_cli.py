import json

import numpy as np
import pytest

from tilq import FeedbackLaw
from tilq.cli import main
from tilq.errors import ConfigError
from tilq.instances import default_instances, mv_market
from tilq.io import (config_hash, load_problem, problem_from_dict, problem_to_dict, read_columns_csv,
                     write_columns_csv, write_problem)


@pytest.fixture
def files(tmp_path):
    out = {}
    for name, obj in default_instances().items():
        out[name] = tmp_path / f"{name}.json"
        write_problem(obj, out[name])
    return out


def outputs(folder):
    return {p.name: p.read_bytes() for p in sorted(folder.iterdir()) if p.name != "manifest.json"}


def test_problem_round_trip(files):
    for name, path in files.items():
        back = load_problem(path)
        assert problem_to_dict(back) == problem_to_dict(default_instances()[name])


def test_toml_problem(tmp_path):
    (tmp_path / "p.toml").write_text(
        'schema_version = "1"\nkind = "mv"\nT = 1.0\nx0 = 1.0\nr = 0.05\nmu1 = 1.0\nmu2 = 0.5\n'
        '[theta]\nkind = "piecewise-constant"\nknots = [0.0, 0.5]\nvalues = [[0.3, 0.1], [0.2, 0.2]]\n')
    m = load_problem(tmp_path / "p.toml")
    assert m.d == 2 and m.theta(0.7)[0] == 0.2


def test_schema_errors():
    base = problem_to_dict(mv_market())
    for key, msg in (("mu1", "problem.mu1"), ("schema_version", "problem.schema_version")):
        bad = dict(base)
        del bad[key]
        with pytest.raises(ConfigError, match=msg):
            problem_from_dict(bad)
    with pytest.raises(ConfigError, match="problem.bogus"):
        problem_from_dict({**base, "bogus": 1})
    with pytest.raises(ConfigError, match="R not psd"):
        problem_from_dict({"schema_version": "1", "kind": "lq", "T": 1, "x0": 1, "R": -1.0, "G": 1,
                           "h": 0, "mu1": 0, "mu2": 0})


def test_csv_full_precision(tmp_path):
    vals = np.random.default_rng(0).normal(size=50) * 1e-7
    write_columns_csv(tmp_path / "c.csv", {"t": np.arange(50.0), "v": vals})
    assert np.array_equal(read_columns_csv(tmp_path / "c.csv")["v"], vals)


def test_config_hash_is_canonical():
    assert config_hash({"a": 1, "b": [1.5, 2]}) == config_hash({"b": [1.5, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})


def test_solve_mv_zero_theta(tmp_path):
    (tmp_path / "p.json").write_text(json.dumps({"schema_version": "1", "kind": "mv", "T": 1, "x0": 1,
                                                 "r": 0.05, "theta": [0.0, 0.0], "mu1": 1, "mu2": 0.5}))
    assert main(["solve", "--problem", str(tmp_path / "p.json"), "--out", str(tmp_path / "o")]) == 0
    cols = read_columns_csv(tmp_path / "o" / "feedback.csv")
    assert all(np.all(cols[k] == 0) for k in cols if k != "t")
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert {"config_hash", "seed", "tool_version", "command", "started", "finished", "outputs"} <= set(manifest)


def test_solve_mv_closed_form(files, tmp_path):
    assert main(["solve", "--problem", str(files["mv_market"]), "--grid-step", "0.001",
                 "--out", str(tmp_path / "o")]) == 0
    cols = read_columns_csv(tmp_path / "o" / "system.csv")
    tau = 1 - cols["t"]
    M = np.exp(0.1 * tau) + 0.2 / 0.05 * np.exp(0.05 * tau) * (np.exp(0.05 * tau) - 1)
    assert np.max(np.abs(cols["M"] - M) / M) < 1e-8


def test_solve_json_format(files, tmp_path):
    assert main(["solve", "--problem", str(files["scalar_lq"]), "--format", "json", "--out", str(tmp_path)]) == 0
    data = json.loads((tmp_path / "system.json").read_text())
    assert set(data) == {"t", "M", "N", "Gamma1", "Phi"}
    FeedbackLaw.from_json(tmp_path / "law.json")


def test_missing_field_exit_code(tmp_path, capsys):
    d = problem_to_dict(mv_market())
    del d["mu1"]
    (tmp_path / "p.json").write_text(json.dumps(d))
    assert main(["solve", "--problem", str(tmp_path / "p.json"), "--out", str(tmp_path / "o")]) == 2
    assert "problem.mu1" in capsys.readouterr().err


def test_parse_error_names_line(tmp_path, capsys):
    (tmp_path / "p.json").write_text('{\n  "schema_version": "1",\n  "T": ,\n}')
    assert main(["solve", "--problem", str(tmp_path / "p.json"), "--out", str(tmp_path / "o")]) == 2
    assert "line 3" in capsys.readouterr().err


def test_bad_flags_exit_2(files, tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["verify", "--format", "xml"])
    assert exc.value.code == 2
    assert main(["verify", "--suite", "nope", "--out", str(tmp_path)]) == 2
    assert main(["verify", "--suite", "residual", "--out", str(tmp_path)]) == 2
    assert main(["simulate", "--problem", str(files["scalar_lq"]), "--seed", "-1", "--out", str(tmp_path)]) == 2


def test_lebesgue_without_problem(tmp_path, capsys):
    assert main(["verify", "--suite", "lebesgue", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "w-squared" in out and "PASS" in out
    assert (tmp_path / "lebesgue.csv").exists()


def test_verify_construct_all_suites(files, tmp_path):
    assert main(["verify", "--problem", str(files["noise_free_lq"]), "--construct", "--out", str(tmp_path)]) == 0
    verdict = json.loads((tmp_path / "verdict.json").read_text())
    assert set(verdict["suites"]) == {"residual", "spike", "expansion", "unique", "lebesgue"}
    for name in ("spike.csv", "unique.csv", "residual_profile.csv"):
        assert (tmp_path / name).exists()


def test_verify_rejects_perturbed_law(files, tmp_path, capsys):
    assert main(["solve", "--problem", str(files["scalar_lq"]), "--out", str(tmp_path / "s")]) == 0
    law = FeedbackLaw.from_json(tmp_path / "s" / "law.json").perturbed(0.1)
    law.to_json(tmp_path / "perturbed.json")
    code = main(["verify", "--problem", str(files["scalar_lq"]), "--law", str(tmp_path / "perturbed.json"),
                 "--suite", "residual,unique", "--npaths", "64", "--out", str(tmp_path / "v")])
    assert code == 1
    assert "FAIL (residual)" in capsys.readouterr().out


def test_simulate_single_deterministic_path(files, tmp_path):
    assert main(["simulate", "--problem", str(files["noise_free_lq"]), "--npaths", "1",
                 "--out", str(tmp_path)]) == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["npaths"] == 1 and summary["std_error"] == 0.0
    assert len((tmp_path / "paths.csv").read_text().splitlines()) == 1 + 1025


def test_simulate_summary_against_propagator(files, tmp_path):
    assert main(["simulate", "--problem", str(files["scalar_lq"]), "--npaths", "4000",
                 "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "summary.json").read_text())["within_3se"]


def test_simulate_byte_identical(files, tmp_path, monkeypatch):
    args = ["simulate", "--problem", str(files["multi_noise_lq"]), "--npaths", "600", "--seed", "77"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    monkeypatch.setenv("TILQ_THREADS", "1")
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert outputs(tmp_path / "a") == outputs(tmp_path / "b")
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert ma["config_hash"] == mb["config_hash"]
    assert main(args[:-1] + ["78", "--out", str(tmp_path / "c")]) == 0
    assert json.loads((tmp_path / "c" / "manifest.json").read_text())["config_hash"] != ma["config_hash"]


def test_spike_command(files, tmp_path, capsys):
    code = main(["spike", "--problem", str(files["scalar_lq"]), "--t", "0.5", "--npaths", "64",
                 "--n-inner", "8", "--out", str(tmp_path)])
    assert code in (0, 3)
    assert "verdict" in capsys.readouterr().out
    assert main(["spike", "--problem", str(files["scalar_lq"]), "--direction", "1", "2",
                 "--out", str(tmp_path)]) == 2
