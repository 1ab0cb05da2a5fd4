import json
from pathlib import Path

import pytest

from indifield import config as C
from indifield.errors import InvalidArgument, IoError

GOLDEN = Path(__file__).parent / "golden" / "paper_preset.json"


def lookup(d, dotted):
    for part in dotted.split("."):
        d = d[part]
    return d


def test_paper_preset_matches_golden():
    golden = json.loads(GOLDEN.read_text())
    echo = C.preset("paper").to_dict()
    for key, value in golden.items():
        got = lookup(echo, key)
        assert got == value and type(got) is type(value), key


def test_default_config_is_paper():
    assert C.PipelineConfig().to_dict() == C.resolve().to_dict() == C.preset("paper").to_dict()


def test_desk_preset_scales_down():
    d = C.preset("desk")
    assert d.train.batch_size == 10_000 and d.train.epochs >= 60
    assert d.extract.resolution == 128
    assert (d.train.weights.grad, d.train.weights.surface, d.train.weights.empty) == (1, 100, 100)


def test_unknown_preset_and_keys():
    with pytest.raises(InvalidArgument):
        C.preset("laptop")
    with pytest.raises(InvalidArgument):
        C.preset("paper").replace({"train.nope": 1})
    with pytest.raises(InvalidArgument):
        C.preset("paper").replace({"nope.lr": 1})
    with pytest.raises(InvalidArgument):
        C.preset("paper").replace({"train.mode": "bogus"})


def test_precedence_preset_file_flags(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text('preset = "desk"\nseed = 5\n[train]\nlr = 0.002\nepochs = 7\n'
                 '[train.weights]\nempty = 10.0\n[prep]\nk = 12\n')
    cfg = C.resolve(None, p, {"train.epochs": 9, "train.batch_size": None})
    assert cfg.preset == "desk" and cfg.seed == 5
    assert cfg.train.lr == 0.002 and cfg.train.epochs == 9
    assert cfg.train.batch_size == C.preset("desk").train.batch_size
    assert cfg.train.weights.empty == 10.0 and cfg.train.weights.surface == 100.0
    assert cfg.prep.k == 12
    # an explicit preset argument beats the file's preset key
    assert C.resolve("paper", p).preset == "paper"


def test_config_file_errors(tmp_path):
    with pytest.raises(IoError):
        C.resolve(None, tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("train = [")
    with pytest.raises(InvalidArgument):
        C.resolve(None, bad)


def test_hash_tracks_content():
    a, b = C.preset("paper"), C.preset("paper")
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != a.replace({"seed": 1}).config_hash()


def test_json_schema_version(tmp_path):
    path = tmp_path / "x.json"
    C.write_json({"a": 1}, path)
    data = json.loads(path.read_text())
    assert list(data)[0] == "schema_version" and data["schema_version"] == C.SCHEMA_VERSION
    assert C.read_json(path)["a"] == 1
    path.write_text(json.dumps({"schema_version": 99}))
    with pytest.raises(InvalidArgument):
        C.read_json(path)


def test_provenance_fields():
    prov = C.provenance(C.preset("desk").replace({"seed": 3}))
    assert prov["seed"] == 3 and prov["preset"] == "desk"
    assert len(prov["config_hash"]) == 64 and prov["version"]
