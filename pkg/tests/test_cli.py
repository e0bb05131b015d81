"""Command-line entry points, exit codes and report determinism."""

import json

import pytest

from covault import cli


def run(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.mark.parametrize("name", cli.bundled_scenarios())
def test_bundled_scenarios_pass(name, tmp_path):
    code, report = cli.run_scenario(name, out=str(tmp_path / "r.json"), figures=False)
    assert code == cli.EXIT_PASS
    assert all(a["pass"] for a in report["assertions"])
    assert json.loads((tmp_path / "r.json").read_text())["scenario"] == name


def test_list_scenarios(capsys):
    code, out, _ = run(["ajolote", "simulate", "--list"], capsys)
    assert code == 0 and out.split() == cli.bundled_scenarios()


@pytest.mark.parametrize("text", [
    "{not json",
    "[]",
    '{"script": []}',
    '{"seed": -1, "script": []}',
    '{"seed": 1, "script": [{"do": "fly"}]}',
    '{"seed": 1, "script": [{"do": "deposit"}]}',
    '{"seed": 1, "config": {"T": 6, "V_min": 9, "V_max": 1, "N": 1}, "script": []}',
    '{"seed": 1, "script": [], "assertions": [{"name": "x", "kind": "nope"}]}',
])
def test_malformed_scenario_exit_2(text, tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(text)
    code, _, err = run(["ajolote", "simulate", str(p)], capsys)
    assert code == cli.EXIT_PARSE and "parse error" in err


def test_missing_scenario_and_bad_seed(capsys):
    assert run(["ajolote", "simulate", "no-such-file.json"], capsys)[0] == cli.EXIT_PARSE
    assert run(["ajolote", "simulate", "honest-lifecycle", "--seed", "-3"], capsys)[0] == cli.EXIT_PARSE
    with pytest.raises(SystemExit) as exc:
        cli.main(["bogus"])
    assert exc.value.code == cli.EXIT_PARSE


def test_failed_assertion_exit_1(tmp_path, capsys):
    sc = {"seed": 1, "config": {"T": 6, "V_min": 1000000, "V_max": 5000000, "N": 1},
          "script": [{"do": "setup"}, {"do": "receive", "amount": 3000000}, {"do": "deposit", "amounts": [2000000]}],
          "assertions": [{"name": "impossible", "kind": "vault_status", "vault": 0, "status": "fallback"}]}
    p = tmp_path / "s.json"
    p.write_text(json.dumps(sc))
    code, _, _ = run(["ajolote", "simulate", str(p)], capsys)
    assert code == cli.EXIT_FAIL


def test_scenario_determinism(tmp_path):
    name = cli.bundled_scenarios()[0]
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    cli.run_scenario(name, out=str(a))
    cli.run_scenario(name, out=str(b))
    ra, rb = json.loads(a.read_text()), json.loads(b.read_text())
    figs_a, figs_b = ra.pop("figures"), rb.pop("figures")
    assert ra == rb
    assert figs_a and len(figs_a) == len(figs_b)
    for fa, fb in zip(figs_a, figs_b):
        with open(tmp_path / fa, "rb") as x, open(tmp_path / fb, "rb") as y:
            assert x.read() == y.read()


def test_seed_override_changes_report():
    name = "honest-lifecycle"
    _, r1 = cli.run_scenario(name, seed=1, figures=False)
    _, r2 = cli.run_scenario(name, seed=2, figures=False)
    assert r1["seed"] == 1 and r2["seed"] == 2
    assert r1["chain_log"] != r2["chain_log"]


def test_covenant_run(capsys):
    code, out, _ = run(["covenant", "run", "--n", "2", "--m", "2", "--k", "2", "--j", "2"], capsys)
    report = json.loads(out)
    assert code == 0 and report["passed"]


def test_risk_eval(capsys):
    code, out, _ = run(["risk", "eval", "i", "--param", "N=3", "--param", "A=2", "--param", "B=1",
                        "--check-oracle"], capsys)
    assert code == 0 and json.loads(out)["passed"]
    code, _, err = run(["risk", "eval", "i", "--param", "N=3", "--param", "A=4", "--param", "B=1"], capsys)
    assert code == cli.EXIT_PARSE and "constraint" in err
    assert run(["risk", "eval", "i", "--param", "N"], capsys)[0] == cli.EXIT_PARSE


def test_observe_scan(capsys):
    code, out, _ = run(["observe", "scan", "--sequences", "5", "--noise", "40"], capsys)
    report = json.loads(out)
    assert code == 0 and report["score"]["recall"] == 1.0
