import json
import subprocess
import sys

import pytest

from obsattack.cli import EXIT_FAIL, EXIT_OK, EXIT_USAGE, main, reaches_negative_terminal
from obsattack.harness import OUTPUT_ROOT_ENV

SMALL = {
    "name": "cli", "env": "fig3", "budget_mode": "discrete_set",
    "attacks": [{"name": "mad", "tag": "H1_full_untargeted"},
                {"name": "two_stage", "tag": "H3_two_stage"}],
    "epsilons": [0.0, 0.25], "seeds": [0],
    "victim": {"kind": "optimal"}, "deceptive": {"steps": 3000, "ensemble": 1},
}


@pytest.fixture
def small_config(tmp_path):
    p = tmp_path / "small.json"
    p.write_text(json.dumps(SMALL))
    return p


class TestExitCodes:
    def test_unknown_subcommand(self, capsys):
        assert main(["fly"]) == EXIT_USAGE
        assert "invalid choice" in capsys.readouterr().err

    def test_missing_config_names_the_path(self, tmp_path, capsys):
        missing = tmp_path / "absent.json"
        assert main(["sweep", "--config", str(missing)]) == EXIT_USAGE
        assert str(missing) in capsys.readouterr().err

    def test_invalid_config(self, tmp_path, capsys):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps({**SMALL, "epsilons": [0.2, 0.1]}))
        assert main(["sweep", "--config", str(p)]) == EXIT_USAGE
        assert "ConfigurationError" in capsys.readouterr().err

    def test_help(self, capsys):
        assert main(["--help"]) == EXIT_OK
        assert "verify-props" in capsys.readouterr().out


class TestCommands:
    def test_render_env(self, capsys):
        assert main(["render-env", "--env", "fig4_left_down"]) == EXIT_OK
        assert capsys.readouterr().out == "S # . .\n. . G Y\n. . R .\n. . . #\n"

    @pytest.mark.parametrize("env, name", [("fig3", "fig3_certificate.json"),
                                           ("fig4", "fig4_certificate.json")])
    def test_verify_props(self, env, name, tmp_path, capsys):
        assert main(["verify-props", "--env", env, "--out", str(tmp_path)]) == EXIT_OK
        out = capsys.readouterr().out
        assert "FAIL" not in out and out.count("PASS") >= 3
        cert = json.loads((tmp_path / name).read_text())
        assert all(cert["checks"].values())

    def test_verify_props_fails_without_budget(self, tmp_path, capsys):
        # with a zero radius no attack can change anything
        assert main(["verify-props", "--env", "fig3", "--epsilon", "0",
                     "--out", str(tmp_path)]) == EXIT_FAIL
        assert "FAIL" in capsys.readouterr().out

    def test_verify_props_honours_output_root(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
        assert main(["verify-props", "--env", "fig3", "--out", "certs"]) == EXIT_OK
        assert (tmp_path / "certs" / "fig3_certificate.json").is_file()

    def test_check_bounds(self, small_config, tmp_path, capsys):
        assert main(["check-bounds", "--config", str(small_config),
                     "--output", str(tmp_path / "b")]) == EXIT_OK
        assert "PASS  all bound checks" in capsys.readouterr().out
        lines = (tmp_path / "b" / "bounds.csv").read_text().splitlines()
        assert lines[0].startswith("attack,epsilon,seed,beta0") and len(lines) == 1 + 3 * 2

    def test_sweep_reruns_are_byte_identical(self, small_config, tmp_path):
        for d in ("a", "b"):
            assert main(["sweep", "--config", str(small_config), "--output", str(tmp_path / d),
                         "--svg"]) == EXIT_OK
        for f in ("results.csv", "thm4.csv", "manifest.json", "config.json", "returns.svg"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_train_and_attack_round_trip(self, tmp_path, capsys):
        victim = tmp_path / "victim.json"
        dec = tmp_path / "dec.json"
        assert main(["train-victim", "--kind", "optimal", "--out", str(victim)]) == EXIT_OK
        assert main(["train-deceptive", "--steps", "3000", "--ensemble", "1",
                     "--out", str(dec)]) == EXIT_OK
        capsys.readouterr()
        table = tmp_path / "table.csv"
        assert main(["attack", "--victim", str(victim), "--deceptive", str(dec), "--mode",
                     "discrete_set", "--epsilon", "0.25", "--out", str(table)]) == EXIT_OK
        report = json.loads(capsys.readouterr().out)
        assert report["bounds"]["thm4_threshold"] is None
        assert table.read_text().splitlines()[0] == "state,up,right,down,left"

    def test_console_script(self):
        res = subprocess.run([sys.executable, "-m", "obsattack.cli", "render-env"],
                             capture_output=True, text=True, check=False)
        assert res.returncode == 0 and res.stdout.startswith("S # R #")


@pytest.mark.parametrize("value, expected", [(-1.0, True), (-0.729, True), (-0.7, False),
                                             (0.0, False), (0.81, False)])
def test_reaches_negative_terminal(value, expected):
    assert reaches_negative_terminal(value, 0.9) is expected
