import csv
import json
import subprocess
import sys

import pytest

from bflsim.cli import SUBCOMMANDS, main
from bflsim.config import bundled

DESK = str(bundled())


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def tiny_rl_cfg(tmp_path):
    text = bundled("toy_rl.cfg").read_text()
    text = text.replace("episodes = 2000", "episodes = 3").replace("eval_episodes = 10",
                                                                  "eval_episodes = 2")
    p = tmp_path / "rl.cfg"
    p.write_text(text)
    return str(p)


def test_fl_train_writes_one_row_per_round_and_manifest(tmp_path):
    assert main(["fl-train", "--config", DESK, "--out", str(tmp_path), "--seed", "0"]) == 0
    rows = _rows(tmp_path / "rounds.csv")
    assert len(rows) == 100
    assert [int(r["round"]) for r in rows] == list(range(100))
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["subcommand"] == "fl-train"
    assert man["seed"] == 0
    assert len(man["config_sha256"]) == 64
    assert "rounds.csv" in man["files"]


def test_fl_train_is_byte_identical_across_runs(tmp_path):
    for d in ("a", "b"):
        assert main(["fl-train", "--config", DESK, "--out", str(tmp_path / d)]) == 0
    for name in ("rounds.csv", "consensus.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seed_flag_changes_output(tmp_path):
    main(["fl-train", "--config", DESK, "--out", str(tmp_path / "a"), "--seed", "0"])
    main(["fl-train", "--config", DESK, "--out", str(tmp_path / "b"), "--seed", "1"])
    assert (tmp_path / "a" / "rounds.csv").read_bytes() != (tmp_path / "b" / "rounds.csv").read_bytes()


def test_sweep_phi_creates_run_dirs_and_monotone_consensus_time(tmp_path):
    rc = main(["sweep", "--config", DESK, "--out", str(tmp_path), "--param", "phi",
               "--values", "0,5,10,15"])
    assert rc == 0
    for v in (0, 5, 10, 15):
        assert (tmp_path / f"phi={v}" / "rounds.csv").exists()
    rows = _rows(tmp_path / "sweep.csv")
    assert [int(r["value"]) for r in rows] == [0, 5, 10, 15]
    t = [float(r["T_cons"]) for r in rows]
    assert all(a <= b for a, b in zip(t, t[1:]))
    assert t[0] == 0.0


def test_sweep_unknown_param_fails(tmp_path, capsys):
    rc = main(["sweep", "--config", DESK, "--out", str(tmp_path), "--param", "bogus",
               "--values", "1"])
    assert rc == 1
    assert "bogus" in capsys.readouterr().err


def test_attack_writes_both_defenses(tmp_path):
    assert main(["attack", "--config", DESK, "--out", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "attack.csv")
    assert {r["defense"] for r in rows} == {"undefended", "defended"}
    assert {int(r["attack_round"]) for r in rows} == {20, 60}


def test_analyze_and_latency_table(tmp_path):
    assert main(["analyze", "--config", DESK, "--out", str(tmp_path / "an")]) == 0
    consts = json.loads((tmp_path / "an" / "constants.json").read_text())
    assert consts
    assert (tmp_path / "an" / "bound_terms.csv").exists()
    assert main(["latency-table", "--config", DESK, "--out", str(tmp_path / "lat")]) == 0
    q = {r["quantity"] for r in _rows(tmp_path / "lat" / "latency.csv")}
    assert {"T_learn", "T_mine"} <= q


def test_rl_train_then_fl_train_with_checkpoint(tmp_path, tiny_rl_cfg):
    assert main(["rl-train", "--config", tiny_rl_cfg, "--out", str(tmp_path / "rl")]) == 0
    assert len(_rows(tmp_path / "rl" / "rl.csv")) == 3
    ckpt = tmp_path / "rl" / "agent.ckpt"
    assert ckpt.exists()
    eps = _rows(tmp_path / "rl" / "episodes.csv")
    assert {int(r["episode"]) for r in eps} == {3, 4}
    rl_fl = tiny_rl_cfg.replace("rl.cfg", "rlfl.cfg")
    text = open(tiny_rl_cfg).read().replace("[run]", "[run]\npolicy = rl-agent", 1)
    open(rl_fl, "w").write(text)
    rc = main(["fl-train", "--config", rl_fl, "--out", str(tmp_path / "fl"),
               "--checkpoint", str(ckpt)])
    assert rc == 0


def test_rl_agent_policy_without_checkpoint_fails(tmp_path, tiny_rl_cfg):
    text = open(tiny_rl_cfg).read().replace("[run]", "[run]\npolicy = rl-agent", 1)
    p = tmp_path / "x.cfg"
    p.write_text(text)
    assert main(["fl-train", "--config", str(p), "--out", str(tmp_path / "o")]) == 1


def test_bad_config_exits_1_with_field_name(tmp_path, capsys):
    p = tmp_path / "bad.cfg"
    p.write_text(bundled().read_text().replace("[channel]", "[channel]\nW = 0", 1))
    assert main(["fl-train", "--config", str(p), "--out", str(tmp_path / "o")]) == 1
    assert "channel.W" in capsys.readouterr().err


def test_missing_config_exits_1(tmp_path):
    assert main(["fl-train", "--config", str(tmp_path / "nope.cfg"), "--out", str(tmp_path)]) == 1


def test_unknown_subcommand_exits_2():
    with pytest.raises(SystemExit) as info:
        main(["frobnicate", "--config", DESK, "--out", "x"])
    assert info.value.code == 2


def test_module_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "bflsim", "--help"], capture_output=True,
                         text=True, check=True).stdout
    for name in SUBCOMMANDS:
        assert name in out
