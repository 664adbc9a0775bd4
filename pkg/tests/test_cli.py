import json
import shutil

import pytest

from offsite import cli
from offsite.artifact import read_bundle


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr().out
    lines = [json.loads(line[7:]) for line in out.splitlines() if line.startswith("STATUS ")]
    return code, (lines[-1] if lines else None)


@pytest.fixture(scope="module")
def flow(tmp_path_factory):
    """Owner init -> split -> emulator -> distill -> package on the mini preset."""
    wd = tmp_path_factory.mktemp("owner")
    steps = [
        ["owner", "init", "--preset", "mini", "--pretrain-steps", "20", "--no-cache"],
        ["owner", "split", "--plan", "1+1"],
        ["owner", "build-emulator", "--k", "2"],
        ["owner", "distill", "--steps", "5"],
        ["owner", "package"],
    ]
    for argv in steps:
        assert cli.main(["--workdir", str(wd)] + argv) == 0, argv
    return wd


def test_round_trip_through_both_roles(flow, tmp_path, capsys):
    user = tmp_path / "user"
    user.mkdir()
    shutil.copy(flow / "owner" / "package.otb", user / "package.otb")
    # the user directory holds nothing but the bundle
    assert [p.name for p in user.iterdir()] == ["package.otb"]
    code, st = run(capsys, "--workdir", user, "user", "finetune", "--package", user / "package.otb",
                   "--steps", "5", "--eval-tokens", "500")
    assert code == 0 and st["ok"]
    code, st = run(capsys, "--workdir", user, "user", "package-return", "--package", user / "package.otb")
    assert code == 0
    assert read_bundle(user / "user" / "return.otb").role == "adapter_return"
    code, st = run(capsys, "--workdir", flow, "owner", "plug-in", "--return", user / "user" / "return.otb")
    assert code == 0 and st["identical_to_base"] is False
    code, st = run(capsys, "--workdir", flow, "owner", "eval", "--model", "base", "--model", "plugged",
                   "--eval-tokens", "500")
    assert code == 0
    assert (flow / "reports" / "owner_eval.csv").read_text().startswith("model,")


def test_commands_are_idempotent(flow, capsys):
    before = (flow / "owner" / "package.otb").read_bytes()
    assert run(capsys, "--workdir", flow, "owner", "package")[0] == 0
    assert (flow / "owner" / "package.otb").read_bytes() == before


def test_user_commands_refuse_full_model_files(flow, tmp_path, capsys):
    for path in (flow / "owner" / "base.otb", flow / "owner" / "emulator.otb", flow / "owner" / "split.json"):
        code, st = run(capsys, "--workdir", tmp_path, "user", "finetune", "--package", path)
        assert code == 3 and st["error"] == "RefusalError", path
    code, st = run(capsys, "--workdir", tmp_path, "user", "finetune", "--package", flow / "owner" / "package.otb",
                   "--corpus", flow / "owner" / "base.otb")
    assert code == 3 and st["error"] == "RefusalError"


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # lr 1e30 overflows on purpose
def test_exit_codes(flow, tmp_path, capsys, monkeypatch):
    assert run(capsys, "owner", "fly")[0] == 2
    assert run(capsys, "experiment", "ablation", "--axis", "width")[0] == 2
    code, st = run(capsys, "--workdir", tmp_path, "owner", "split")
    assert code == 3 and st["error"] == "StageError"
    code, st = run(capsys, "--workdir", tmp_path, "owner", "init", "--plan", "9+9")
    assert code == 3 and st["error"] == "ConfigError"
    code, st = run(capsys, "--workdir", tmp_path, "user", "finetune", "--package", flow / "owner" / "package.otb",
                   "--steps", "3", "--lr", "1e30", "--eval-tokens", "200")
    assert code == 4 and not st["ok"]


def test_workdir_from_environment(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("OFFSITE_WORKDIR", str(tmp_path))
    code, st = run(capsys, "experiment", "accounting", "--preset", "gpt2-xl", "--plan", "2+2", "--emulator-k", "16")
    assert code == 0
    assert st["trainable_params"]["full"] == 122_963_200
    assert st["block_ratio"] == pytest.approx(20 / 48)
    assert (tmp_path / "reports" / "accounting_gpt2-xl.csv").exists()


def test_config_file_and_flags(tmp_path, capsys):
    conf = tmp_path / "run.json"
    conf.write_text('{"preset": "mini", "plan": "1+1", "steps": 4}')
    code, _ = run(capsys, "--workdir", tmp_path, "--config", conf, "config", "show", "--steps", "6")
    assert code == 0
    shown = json.loads((tmp_path / "config.json").read_text())
    assert (shown["preset"], shown["steps"]) == ("mini", 6)
    conf.write_text('{"stepz": 4}')
    assert run(capsys, "--workdir", tmp_path, "--config", conf, "config", "show")[0] == 3
