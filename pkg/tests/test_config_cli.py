import json

import numpy as np
import pytest

from fgakit import tensorfile
from fgakit.cli import main
from fgakit.config import RunConfig, load_config, parse_config
from fgakit.errors import ConfigError, MissingFileError

SMALL = {
    "seed": 3,
    "data": {"num_classes": 3, "per_class": 6, "test_per_class": 2, "shape": [3, 4, 4]},
    "model": {"dim": 8, "image_hidden": [8], "image_hidden_b": [6], "text_hidden": [8], "token_dim": 8},
    "train": {"epochs": 2, "batch_size": 8},
}


def write_cfg(tmp_path, extra=None, name="cfg.json"):
    cfg = json.loads(json.dumps(SMALL))
    for key, value in (extra or {}).items():
        if isinstance(value, dict):
            cfg.setdefault(key, {}).update(value)
        else:
            cfg[key] = value
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def run(args, capsys=None):
    code = main(args)
    err = capsys.readouterr().err if capsys else ""
    return code, err


def test_defaults_serialize():
    d = RunConfig().echo()
    assert d["attack"]["epsilon"] == 2 / 255 and d["attack"]["steps"] == 10
    assert d["attack"]["scales"] == [0.5, 0.75, 1.25, 1.5]
    assert d["attack"]["text_budget"] == 1
    assert "threads" not in d and "out" not in d


def test_l1_defaults_apply_unless_set():
    a = parse_config({"attack": {"norm": "1"}}).attack
    assert (a.epsilon, a.steps) == (1.0, 20)
    a = parse_config({"attack": {"norm": "1", "epsilon": 3.0}}).attack
    assert (a.epsilon, a.steps) == (3.0, 20)


def test_unknown_key_rejected_with_path():
    with pytest.raises(ConfigError, match="attack.epsilonn"):
        parse_config({"attack": {"epsilonn": 0.1}})
    with pytest.raises(ConfigError):
        parse_config({"bogus": 1})


def test_threads_do_not_change_hash():
    assert parse_config({"threads": 4}).hash() == RunConfig().hash()
    assert parse_config({"seed": 1}).hash() != RunConfig().hash()


def test_paths_resolve_against_config_dir(tmp_path):
    sub = tmp_path / "sub"
    sub.mkdir()
    path = write_cfg(sub, {"out": "o", "inputs": {"dataset": "d/ds"}})
    cfg = load_config(path)
    assert cfg.out == str((sub / "o").resolve())
    assert cfg.inputs.dataset == str((sub / "d" / "ds").resolve())
    with pytest.raises(MissingFileError):
        load_config(tmp_path / "missing.json")


def test_unknown_key_exit_2_and_error_record(tmp_path, capsys):
    path = write_cfg(tmp_path, {"nope": 1})
    code, err = run(["gen-data", "--config", str(path), "--out", str(tmp_path / "o")], capsys)
    assert code == 2
    rec = json.loads(err.strip().splitlines()[-1])
    assert rec["error"] == "ConfigError" and rec["exit_code"] == 2 and "nope" in rec["message"]
    assert json.loads((tmp_path / "o" / "error.json").read_text()) == rec


def test_missing_config_exit_3(tmp_path, capsys):
    code, _ = run(["train", "--config", str(tmp_path / "none.json")], capsys)
    assert code == 3


def test_bad_tensor_file_exit_4(tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["gen-data", "--config", str(write_cfg(tmp_path)), "--out", str(out)]) == 0
    (out / "dataset.fgak").write_bytes(b"not a tensor file")
    path = write_cfg(tmp_path, {"inputs": {"dataset": "o/dataset"}}, "c2.json")
    code, err = run(["train", "--config", str(path), "--out", str(tmp_path / "t")], capsys)
    assert code == 4 and "FormatError" in err


def test_version_mismatch_exit_5(tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["gen-data", "--config", str(write_cfg(tmp_path)), "--out", str(out)]) == 0
    raw = bytearray((out / "dataset.fgak").read_bytes())
    raw[4:8] = (99).to_bytes(4, "little")
    (out / "dataset.fgak").write_bytes(bytes(raw))
    path = write_cfg(tmp_path, {"inputs": {"dataset": "o/dataset"}}, "c2.json")
    code, err = run(["train", "--config", str(path), "--out", str(tmp_path / "t")], capsys)
    assert code == 5 and "VersionError" in err and "99" in err


def test_seed_out_of_range(tmp_path, capsys):
    code, _ = run(["gen-data", "--seed", str(2 ** 64), "--out", str(tmp_path / "o")], capsys)
    assert code == 2
    code, _ = run(["gen-data", "--threads", "0", "--out", str(tmp_path / "o")], capsys)
    assert code == 2


def test_zero_budget_attack_is_identity(tmp_path):
    out = tmp_path / "o"
    path = write_cfg(tmp_path, {"attack": {"method": "fga", "epsilon": 0.0, "split": "all"},
                                "inputs": {"dataset": "o/dataset"}})
    assert main(["gen-data", "--config", str(path), "--out", str(out)]) == 0
    assert main(["attack", "--config", str(path), "--out", str(out)]) == 0
    assert (out / "adversarial.fgak").read_bytes() == (out / "dataset.fgak").read_bytes()
    rep = json.loads((out / "attack.json").read_text())
    assert "zero budget: images unchanged" in rep["notes"]
    assert rep["max_norms"]["inf"] == 0.0


def test_reports_embed_hash_and_rerun_from_echo(tmp_path):
    out = tmp_path / "o"
    path = write_cfg(tmp_path, {"attack": {"epsilon": 4 / 255, "steps": 2}})
    assert main(["gen-data", "--config", str(path), "--out", str(out)]) == 0
    assert main(["attack", "--config", str(path), "--out", str(out)]) == 0
    rep = json.loads((out / "attack.json").read_text())
    assert rep["config_hash"] == load_config(path).hash() and rep["seed"] == 3
    echo = tmp_path / "echo.json"
    echo.write_text(json.dumps(rep["config"]))
    out2 = tmp_path / "o2"
    assert main(["attack", "--config", str(echo), "--out", str(out2)]) == 0
    assert (out2 / "attack.json").read_bytes() == (out / "attack.json").read_bytes()
    assert (out2 / "adversarial.fgak").read_bytes() == (out / "adversarial.fgak").read_bytes()


def test_train_checkpoint_and_eval(tmp_path):
    out = tmp_path / "o"
    path = write_cfg(tmp_path, {"inputs": {"dataset": "o/dataset", "checkpoint": "o/model.fgak"},
                                "attack": {"steps": 2}})
    for cmd in ("gen-data", "train", "attack"):
        assert main([cmd, "--config", str(path), "--out", str(out)]) == 0
    assert set(tensorfile.load(out / "model.fgak")) >= {"image.W0", "text.table"}
    path2 = write_cfg(tmp_path, {"inputs": {"dataset": "o/dataset", "checkpoint": "o/model.fgak",
                                            "adversarial": "o/adversarial"}}, "c2.json")
    assert main(["eval", "--config", str(path2), "--out", str(out)]) == 0
    rep = json.loads((out / "eval.json").read_text())
    assert 0 <= rep["proximity"]["diagonal_mass"] <= 1
    assert (out / "proximity.csv").read_text().startswith(",")


def test_report_merge(tmp_path, capsys):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    a.write_text(json.dumps({"seed": 1, "metrics": {"TR@1": 0.5}}))
    b.write_text(json.dumps({"seed": 2, "list": [1, 2]}))
    assert main(["report", "--out", str(tmp_path / "m"), str(a), str(b)]) == 0
    merged = json.loads((tmp_path / "m" / "report.json").read_text())
    assert merged["reports"]["a"]["metrics"]["TR@1"] == 0.5
    rows = (tmp_path / "m" / "report.csv").read_text().splitlines()
    assert rows[0] == "report,key,value" and "a,metrics.TR@1,0.5" in rows
    code, _ = run(["report", "--out", str(tmp_path / "m2")], capsys)
    assert code == 2
    code, _ = run(["report", "--out", str(tmp_path / "m3"), str(tmp_path / "x.json")], capsys)
    assert code == 3


def test_nan_written_as_null():
    from fgakit.cli import dumps
    assert json.loads(dumps({"x": np.float64("nan"), "y": np.arange(2)})) == {"x": None, "y": [0, 1]}
