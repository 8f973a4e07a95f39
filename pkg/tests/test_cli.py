import json

import pytest

from gfg import cli, modelfile

MODELS = ["conjugate", "detached_pair", "mdp", "slam", "slam_mdp"]


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.mark.parametrize("name", MODELS)
def test_structural_commands(capsys, name):
    code, out, _ = run(capsys, "validate", name)
    assert code == 0 and out.startswith("ok:")
    for flags in ([], ["--posterior"], ["--partition"]):
        code, out, _ = run(capsys, "factorize", name, *flags)
        assert code == 0 and out.strip()
    code, out, _ = run(capsys, "render", name)
    assert code == 0 and out.startswith("digraph")


@pytest.mark.parametrize("name", MODELS)
def test_inference_commands(capsys, tmp_path, name):
    code, out, _ = run(capsys, "infer-svi", name, "--steps", "20")
    assert code == 0 and "engine: svi" in out and "posterior:" in out
    saved = tmp_path / "smp.json"
    code, _, _ = run(capsys, "infer-smp", name, "--steps", "20", "--sweeps", "2", "--format", "json", "--out", str(saved))
    assert code == 0
    data = json.loads(saved.read_text())
    assert data["engine"] == "smp" and data["status"] in ("converged", "max-sweeps")
    code, out, _ = run(capsys, "report", str(saved))
    assert code == 0 and "sweep log:" in out
    if name != "conjugate":
        code, out, _ = run(capsys, "oracle", name)
        assert code == 0 and "status: exact" in out


def test_oracle_on_gaussian_model(capsys):
    code, out, _ = run(capsys, "oracle", "conjugate", "--format", "json")
    data = json.loads(out)
    assert code == 0 and data["kind"] == "gaussian"
    assert data["posterior"]["z"]["mean"] == pytest.approx(1.0)


def test_factorize_view(capsys):
    code, out, _ = run(capsys, "factorize", "slam", "--view", "trans", "percept")
    assert code == 0
    assert out.count(" * ") < run(capsys, "factorize", "slam")[1].count(" * ")


def test_invalid_model_exits_1(capsys, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nodes": [{"name": "z", "kind": "mystery"}], "links": []}))
    code, _, err = run(capsys, "validate", str(bad))
    assert code == 1 and "SchemaError" in err
    spec = modelfile.to_spec(modelfile.load("conjugate"))
    spec["links"].append({"from": "x", "to": "mu"})
    into_param = tmp_path / "into_param.json"
    into_param.write_text(json.dumps(spec))
    code, out, _ = run(capsys, "validate", str(into_param))
    assert code == 1 and "LinkTargetError" in out
    code, _, _ = run(capsys, "infer-svi", str(into_param))
    assert code == 1


def test_other_failures_exit_2(capsys, tmp_path):
    code, _, err = run(capsys, "validate", str(tmp_path / "missing.json"))
    assert code == 2 and "FileNotFoundError" in err
    code, _, err = run(capsys, "oracle", "slam", "--max-states", "2")
    assert code == 2 and "TooLargeError" in err
    code, _, err = run(capsys, "infer-svi", "conjugate", "--schedule", "robbins-monro", "--kappa", "0.3")
    assert code == 2


def test_reports_are_reproducible(capsys):
    first = run(capsys, "infer-svi", "coin", "--steps", "50", "--seed", "3")[1]
    second = run(capsys, "infer-svi", "coin", "--steps", "50", "--seed", "3")[1]
    assert first == second
    first = run(capsys, "infer-smp", "discrete_pair", "--steps", "30", "--seed", "3")[1]
    second = run(capsys, "infer-smp", "discrete_pair", "--steps", "30", "--seed", "3")[1]
    assert first == second


def test_smp_status_lines(capsys):
    code, out, err = run(capsys, "infer-smp", "conjugate", "--steps", "50")
    assert code == 0 and "status: converged" in out and err == ""
    code, out, err = run(capsys, "infer-smp", "discrete_chain", "--steps", "50", "--sweeps", "1")
    assert code == 0 and "status: max-sweeps" in out
    assert "warning: NonConvergenceWarning" in out
    assert "NonConvergenceWarning" in err
