import re

import numpy as np
import pytest

from bflsim.bfl import Scenario, run_training
from bflsim.config import ConfigError, bundled, dbm_to_w, default_text, parse_config, parse_text
from bflsim.fl_core import make_synthetic_dataset, save_dataset

MIN = "[run]\nN = 4\nM = 2\nG = 2\nK = 3\n"


def test_desk_fixture_parses_with_si_units():
    cfg = parse_config(bundled())
    assert (cfg["run"]["N"], cfg["run"]["M"], cfg["run"]["G"], cfg["run"]["K"]) == (6, 2, 3, 100)
    assert cfg["channel"]["P_max"] == pytest.approx(0.1)
    assert cfg["channel"]["W"] == pytest.approx(2e7)
    assert cfg["consensus"]["phi"] == 5


def test_desk_fixture_reproduces_default_synthetic_scenario():
    a = parse_config(bundled()).scenario(0)
    b = Scenario.synthetic(seed=0)
    for x, y in zip(a.datasets, b.datasets):
        np.testing.assert_array_equal(x.X, y.X)
    assert run_training(5, a)[-1].loss == run_training(5, b)[-1].loss


def test_toy_rl_fixture_parses():
    cfg = parse_config(bundled("toy_rl.cfg"))
    assert cfg["channel"]["P_max"] == pytest.approx(1.0)
    assert cfg["mining"]["E_max"] == 2508


def test_dbm_to_w():
    assert dbm_to_w(30.0) == pytest.approx(1.0)
    assert dbm_to_w(20.0) == pytest.approx(0.1)


def test_default_template_parses_once_required_fields_filled():
    vals = {"N": "4", "M": "2", "G": "2", "K": "3"}
    text = re.sub(r"^(N|M|G|K) = ", lambda m: f"{m.group(1)} = {vals[m.group(1)]}",
                  default_text(), flags=re.M)
    cfg = parse_text(text)
    assert cfg["run"]["K"] == 3
    assert cfg["channel"]["P_max"] == pytest.approx(dbm_to_w(20.0))


def test_zero_bandwidth_names_the_field():
    with pytest.raises(ConfigError, match=r"channel\.W: must be positive"):
        parse_text(MIN + "[channel]\nW = 0\n")


def test_typo_section_suggests_closest():
    with pytest.raises(ConfigError, match="did you mean 'channel'"):
        parse_text(MIN + "[chanel]\nW = 10\n")


def test_typo_key_suggests_closest():
    with pytest.raises(ConfigError, match="consensus.phii: unknown key .*'phi'"):
        parse_text(MIN + "[consensus]\nphii = 3\n")


def test_missing_required_and_bad_int_reported_together():
    with pytest.raises(ConfigError) as info:
        parse_text("[run]\nN = six\nM = 2\nG = 2\n")
    paths = {p for p, _ in info.value.problems}
    assert {"run.N", "run.K"} <= paths


def test_missing_file():
    with pytest.raises(ConfigError, match="cannot read"):
        parse_config("/nonexistent/x.cfg")


def test_consensus_d_range_checked():
    with pytest.raises(ConfigError, match="consensus.d"):
        parse_text(MIN + "[consensus]\nd = 0.6\n")


def test_with_overrides_changes_only_named_field():
    cfg = parse_config(bundled())
    new = cfg.with_overrides({"consensus.phi": "12"})
    assert new["consensus"]["phi"] == 12
    assert new["run"] == cfg["run"]
    assert new.digest != cfg.digest
    assert cfg["consensus"]["phi"] == 5


def test_phi_zero_allowed():
    assert parse_config(bundled()).with_overrides({"consensus.phi": "0"})["consensus"]["phi"] == 0


def test_csv_dataset_resolved_relative_to_config(tmp_path):
    ds = make_synthetic_dataset(2, 2, 40, 1.0, 3)
    save_dataset(ds, tmp_path / "pts.csv")
    text = MIN + "[dataset]\nsource = csv\npath = pts.csv\nclasses = 2\n"
    (tmp_path / "run.cfg").write_text(text)
    sc = parse_config(tmp_path / "run.cfg").scenario()
    assert sum(len(s.y) for s in sc.datasets) + len(sc.test.y) == 80


def test_csv_source_requires_path():
    with pytest.raises(ConfigError, match="dataset.path"):
        parse_text(MIN + "[dataset]\nsource = csv\n")
