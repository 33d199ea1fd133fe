import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from pwltsc.cli import run
from pwltsc.config import RunConfig, config_from_dict, load_config
from pwltsc.errors import ConfigError
from pwltsc.marl import InfluenceModule
from pwltsc.pwlnet import load_json

SMALL = {
    "network": "grid2x2",
    "seed": 0,
    "mdp": {"horizon_s": 300.0},
    "trainer": {"episodes": 2, "epochs": 1, "gamma": 0.5},
    "pretrain": {"episodes": 1, "steps": 20},
    "eval": {"episodes": 2},
}


def write_config(tmp_path, doc, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return p


def test_defaults_match_table():
    c = RunConfig()
    m, t = c.mdp, c.trainer
    assert (m.kappa1, m.kappa2, m.kappa3, m.dt, m.horizon_s) == (25.0, 5.0, 5.0, 5.0, 2500.0)
    assert (m.yellow_s, m.g_min_s, m.g_max_s, c.fixed.green_s) == (2.0, 5.0, 50.0, 25.0)
    assert (t.clip, t.batch, t.lr_critic, t.lr_actor) == (0.2, 32, 0.01, 0.001)


def test_unknown_field_is_named(tmp_path):
    with pytest.raises(ConfigError, match="trainer.gama"):
        config_from_dict({"trainer": {"gama": 0.9}})
    p = write_config(tmp_path, {"netwrk": "grid2x2"})
    assert run(["pretrain", "--config", str(p), "--out", str(tmp_path)]) == 2


def test_bad_types_and_values_are_config_errors(tmp_path):
    for doc in ({"seed": "zero"}, {"trainer": {"gamma": 2.0}}, {"network": "nowhere"}):
        p = write_config(tmp_path, doc)
        assert run(["eval", "--method", "fixed", "--config", str(p), "--out", str(tmp_path)]) in (2, 3)
    p = write_config(tmp_path, {"trainer": {"gamma": 2.0}})
    assert run(["train", "--config", str(p), "--out", str(tmp_path)]) == 2


def test_missing_config_file_names_path(tmp_path, capsys):
    assert run(["train", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == 2
    assert "none.json" in capsys.readouterr().err


def test_train_ours_without_pretrain_says_what_to_do(tmp_path, capsys):
    p = write_config(tmp_path, SMALL)
    assert run(["train", "--config", str(p), "--out", str(tmp_path / "o")]) == 3
    assert "run 'pwltsc pretrain'" in capsys.readouterr().err


def test_eval_without_checkpoint_is_data_error(tmp_path):
    p = write_config(tmp_path, SMALL)
    assert run(["eval", "--method", "ippo", "--config", str(p), "--out", str(tmp_path / "o")]) == 3


def test_numeric_failure_exit_code(tmp_path):
    doc = {**SMALL, "trainer": {"episodes": 2, "epochs": 4, "optimizer": "sgd", "lr_critic": 1e30, "lr_actor": 1e30}}
    p = write_config(tmp_path, doc)
    assert run(["train", "--method", "ippo", "--config", str(p), "--out", str(tmp_path / "o")]) == 4


def test_pretrain_checkpoint_reloads_and_is_byte_identical(tmp_path):
    p = write_config(tmp_path, SMALL)
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["pretrain", "--config", str(p), "--out", str(a)]) == 0
    assert run(["pretrain", "--config", str(p), "--out", str(b)]) == 0
    assert (a / "influence.json").read_bytes() == (b / "influence.json").read_bytes()
    mod = InfluenceModule.from_dict(load_json(a / "influence.json"))
    X = np.random.default_rng(0).random((4, mod.W.shape[1]))
    assert mod.predict(X).shape == (4, 4)
    assert "holdout_r2" in json.loads((a / "pretrain_report.json").read_text())


def test_full_pipeline_and_manifest_rerun(tmp_path):
    p = write_config(tmp_path, SMALL)
    a = tmp_path / "a"
    for argv in (["pretrain"], ["train"], ["train", "--method", "ippo"], ["train", "--method", "fixed"],
                 ["eval"], ["eval", "--method", "ippo"], ["eval", "--method", "fixed"], ["anova"]):
        assert run(argv + ["--config", str(p), "--out", str(a)]) == 0, argv
    rows = (a / "curve_ours.csv").read_text().splitlines()
    assert rows[0] == "episode,global_reward,AVE,STA,actor_loss,critic_loss" and len(rows) == 3
    ev = json.loads((a / "eval_fixed.json").read_text())
    assert {"AVE", "STA", "global_reward", "AVE_var"} <= set(ev) and len(ev["episodes"]) == 2
    w = json.loads((a / "influence_weights.json").read_text())
    assert abs(sum(w.values()) - 1) < 1e-12

    # replay every manifest into a fresh directory and compare output bytes
    b = tmp_path / "b"
    b.mkdir()
    (b / "influence.json").write_bytes((a / "influence.json").read_bytes())
    for cmd in ("pretrain", "train_ours", "train_ippo", "train_fixed", "eval_ours", "eval_ippo", "anova"):
        man = json.loads((a / f"manifest_{cmd}.json").read_text())
        if cmd.startswith("eval"):
            (b / f"checkpoint_{man['method']}.json").write_bytes((a / f"checkpoint_{man['method']}.json").read_bytes())
        assert run([man["command"], "--config", str(a / f"manifest_{cmd}.json"), "--out", str(b)]) == 0
        for name, digest in man["outputs"].items():
            assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_zero_demand_eval_is_zero(tmp_path):
    p = write_config(tmp_path, {**SMALL, "mdp": {"horizon_s": 300.0, "demand_scale": 0.0}})
    assert run(["train", "--method", "fixed", "--config", str(p), "--out", str(tmp_path)]) == 0
    assert run(["eval", "--method", "fixed", "--config", str(p), "--out", str(tmp_path)]) == 0
    ev = json.loads((tmp_path / "eval_fixed.json").read_text())
    assert ev["AVE"] == 0.0 and ev["STA"] == 0.0


def test_manifest_is_accepted_as_config(tmp_path):
    p = write_config(tmp_path, SMALL)
    assert run(["train", "--method", "fixed", "--config", str(p), "--out", str(tmp_path)]) == 0
    cfg = load_config(tmp_path / "manifest_train_fixed.json")
    assert cfg.digest() == load_config(p).digest()


def test_forecast_command(tmp_path):
    doc = {"forecast": {"horizons": [1], "n_nodes": 3, "length": 300, "window": 4, "d_ehh": 4, "steps": 10}}
    p = write_config(tmp_path, doc)
    assert run(["forecast", "--config", str(p), "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "forecast_h1.json").read_text())["horizon"] == 1


def test_forecast_bad_csv_is_data_error(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,x\n")
    p = write_config(tmp_path, {"forecast": {"csv": str(bad)}})
    assert run(["forecast", "--config", str(p), "--out", str(tmp_path)]) == 3


def test_plot_two_curves(tmp_path):
    header = "episode,global_reward,AVE,STA,actor_loss,critic_loss\n"
    for name, off in (("ours", 0.0), ("ippo", 1.0)):
        (tmp_path / f"curve_{name}.csv").write_text(header + "".join(
            f"{k},{100 + k + off},{5 - k * 0.1 + off},{1.0 + off},nan,nan\n" for k in range(5)))
    out = tmp_path / "fig"
    assert run(["plot", str(tmp_path / "curve_ours.csv"), str(tmp_path / "curve_ippo.csv"), "--out", str(out)]) == 0
    for fig in ("waiting_time.svg", "reward.svg", "stability.svg"):
        root = ET.parse(out / fig).getroot()
        assert root.tag.endswith("svg")
        text = " ".join(t.text or "" for t in root.iter() if t.tag.endswith("text"))
        assert "curve_ours" in text and "curve_ippo" in text


def test_plot_errors(tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    assert run(["plot", str(empty), "--out", str(tmp_path)]) == 3
    partial = tmp_path / "partial.csv"
    partial.write_text("episode,AVE\n0,1.0\n")
    assert run(["plot", str(partial), "--out", str(tmp_path)]) == 3
