import pytest
from hypothesis import given
from hypothesis import strategies as st

from diffalign.config import SCHEMA, defaults, load_config, parse_config, render_config
from diffalign.errors import ConfigValidationError


def test_empty_text_gives_defaults():
    assert parse_config("") == defaults()


def test_typed_parsing_and_comments():
    cfg = parse_config("""
        # a comment
        seed = 7
        lr = 2.5e-3   # trailing comment
        checkpoint = false
        train_conditions = 0, 2
        reward = concept_removal
    """)
    assert cfg["seed"] == 7 and cfg["lr"] == 2.5e-3 and cfg["checkpoint"] is False
    assert cfg["train_conditions"] == (0, 2) and cfg["reward"] == "concept_removal"


@pytest.mark.parametrize("text", [
    "learning_rate = 0.1",          # unknown key
    "seed = 1\nseed = 2",           # duplicate
    "seed = one",                   # bad int
    "reward = aesthetic",           # bad choice
    "checkpoint = maybe",           # bad bool
    "just some words",              # no '='
    "k_max = 60",                   # exceeds T
    "beta_end = 1.0",
    "lr = 0",
    "batch_size = 0",
    "test_conditions = 4",
    "train_conditions = ",
    "steps = -1",
])
def test_invalid_configs_rejected(text):
    with pytest.raises(ConfigValidationError):
        parse_config(text)


def test_render_parse_round_trip():
    cfg = defaults()
    assert parse_config(render_config(cfg)) == cfg


@given(st.integers(0, 2**31), st.floats(1e-6, 1.0), st.booleans(),
       st.sampled_from(["brightness", "compressibility", "concept_removal", "constant"]),
       st.lists(st.integers(0, 3), min_size=1, max_size=4).map(tuple))
def test_round_trip_property(seed, lr, ckpt, reward, conds):
    cfg = defaults() | {"seed": seed, "lr": lr, "checkpoint": ckpt, "reward": reward,
                        "train_conditions": conds}
    assert parse_config(render_config(cfg)) == cfg


def test_every_key_documented():
    assert all(k.doc for k in SCHEMA.values())


def test_load_config_reports_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("seed = 3\nbogus = 1\n")
    with pytest.raises(ConfigValidationError, match="run.cfg:2"):
        load_config(p)
