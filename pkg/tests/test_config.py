from pathlib import Path

import pytest

from transpeft.config import ConfigError, ExperimentConfig, load, parse

TINY = Path(__file__).parent / "data" / "tiny.ini"


def test_defaults_roundtrip():
    cfg = ExperimentConfig()
    assert parse(cfg.to_ini()) == cfg
    assert cfg.run.seeds == (42, 1, 99) and cfg.peft.alpha == 2 * cfg.peft.rank


def test_tiny_file_and_overrides():
    cfg = load(TINY, {"transpeft.p_i": "0.05", "run.seeds": "3"})
    assert cfg.model.d_model == 16 and cfg.transpeft.p_i == 0.05 and cfg.transpeft.p_c == 0.2
    assert cfg.run.seeds == (3,)
    assert [n for n, _, _ in cfg.pretrain_corpus.families] == ["add", "copy"]
    assert cfg.pretrain_corpus.n_sequences == 320
    assert parse(cfg.to_ini()) == cfg


@pytest.mark.parametrize("text,match", [
    ("[nonsense]\nx = 1\n", "unknown section"),
    ("[model]\nwidth = 3\n", "unknown keys"),
    ("[model]\nd_model = abc\n", "cannot parse"),
    ("[model]\nd_model = 30\nn_heads = 4\n", r"\[model\]"),
    ("[corpus.pretrain.a]\nkind = lm\nweight = 0.4\n", "sum"),
    ("[corpus.pretrain.a]\nkind = lm\n", "weight"),
    ("[update]\nmode = wild\n", "mode"),
    ("[transpeft]\nrescale = maybe\n", "boolean"),
    ("not ini at all", "parse error"),
])
def test_rejects_bad_config(text, match):
    with pytest.raises(ConfigError, match=match):
        parse(text)


def test_missing_file():
    with pytest.raises(ConfigError):
        load("/nonexistent/x.ini")
