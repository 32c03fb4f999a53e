import numpy as np
import pytest

from hiernet.cli import KEYS, build_parser, load_spec, main, parse_config_text, spec_from_settings
from hiernet.errors import ConfigError
from hiernet.experiments import read_rows
from hiernet.loss import read_csv
from hiernet.net import Activation, WeightSet, save

TINY_CFG = """\
# tiny smoke run
target = sq2d
n = 64
seeds = 0
modes = hierarchical, direct
rounds = 1
round_epochs = 40
direct_widths = 4
direct_epochs = 10
l_max = 1
search_restarts = 4
search_ascent_steps = 10
gen_samples = 64
"""


def test_parse_config():
    s = parse_config_text("a_key_not_known = 1\n".replace("a_key_not_known", "rounds") + "# c\n\n")
    assert s == {"rounds": "1"}
    with pytest.raises(ConfigError):
        parse_config_text("bogus = 3")
    with pytest.raises(ConfigError):
        parse_config_text("rounds 3")


def test_spec_from_settings_routes_keys():
    spec = spec_from_settings({"target": "sq10d", "learning_rate": "0.01", "l_max": "3",
                               "start_arch": "10,2,2,1", "max_params": "none"})
    assert spec.optim.learning_rate == 0.01
    assert spec.resolved_growth().l_max == 3
    # growth overrides keep target-dependent defaults for other fields
    assert spec.resolved_growth().star_arch.widths == (2, 3, 1)
    assert spec.max_params is None
    with pytest.raises(ConfigError):
        spec_from_settings({"rounds": "many"})
    with pytest.raises(ConfigError):
        spec_from_settings({"kappa": "2"})


def test_every_key_has_a_flag():
    parser = build_parser()
    args = parser.parse_args(["run", "x.cfg"])
    for key in KEYS:
        assert hasattr(args, key)


def test_run_command(tmp_path, capsys):
    cfg = tmp_path / "t.cfg"
    cfg.write_text(TINY_CFG)
    out = tmp_path / "out"
    assert main(["run", str(cfg), "--out", str(out), "--rounds", "2"]) == 0
    agg = read_rows(out / "aggregate_hierarchical.csv")
    assert [r["round"] for r in agg] == [0, 1, 2]
    assert (out / "aggregate_direct.csv").exists()
    assert "hierarchical" in capsys.readouterr().out


def test_exit_codes(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("target = sq2d\nfrobnicate = 1\n")
    assert main(["run", str(bad)]) == 1
    assert main(["run", str(tmp_path / "missing.cfg")]) == 1
    cfg = tmp_path / "t.cfg"
    cfg.write_text(TINY_CFG)
    out = tmp_path / "o"
    assert main(["run", str(cfg), "--out", str(out), "--learning-rate", "1e300",
                 "--modes", "direct"]) == 2


def test_rate_command(tmp_path, capsys):
    p = tmp_path / "agg.csv"
    lines = ["round,params,error"] + [f"{i},{n},{n ** -2.0!r}" for i, n in enumerate([9, 33, 57, 81])]
    p.write_text("\n".join(lines) + "\n")
    assert main(["rate", str(p)]) == 0
    assert "slope -2.0000" in capsys.readouterr().out
    assert main(["rate", str(p), "--skip", "1"]) == 1


def test_dataset_and_diag_commands(tmp_path, capsys):
    data = tmp_path / "d.csv"
    assert main(["dataset", "sq2d", str(data), "--n", "25"]) == 0
    ts = read_csv(data)
    assert ts.n == 25
    w = WeightSet.random((2, 3, 1), np.random.default_rng(0))
    save(tmp_path / "w.json", w, Activation())
    assert main(["diag", str(tmp_path / "w.json"), str(data), "--restarts", "4"]) == 0
    out = capsys.readouterr().out
    assert "c_opt" in out and "stability L" in out


def test_load_spec_overrides(tmp_path):
    cfg = tmp_path / "t.cfg"
    cfg.write_text(TINY_CFG)
    spec = load_spec(cfg, {"rounds": "7"})
    assert spec.rounds == 7 and spec.n == 64
