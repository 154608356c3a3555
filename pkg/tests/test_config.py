import pytest
from hypothesis import given, settings, strategies as st

from sghm import config as C


def test_round_trip_defaults():
    cfg = C.RunConfig()
    assert C.parse(C.serialize(cfg)) == cfg
    assert C.parse(C.serialize(cfg, comments=False)) == cfg


@settings(max_examples=30, deadline=None)
@given(lr=st.floats(1e-6, 1.0), steps=st.integers(1, 10_000), asm=st.booleans(),
       omega=st.tuples(*[st.floats(0.01, 10.0)] * 3))
def test_round_trip_values(lr, steps, asm, omega):
    text = f"lr_mat = {lr!r}\nsteps_seg = {steps}\nuse_asm = {str(asm).lower()}\nomega = {', '.join(map(repr, omega))}\n"
    cfg = C.parse(text)
    assert cfg.train.lr_mat == lr and cfg.train.steps_seg == steps and cfg.model.use_asm is asm
    assert C.parse(C.serialize(cfg)) == cfg


def test_comments_and_blank_lines():
    cfg = C.parse("# header\n\nseed = 4  # trailing\n")
    assert cfg.train.seed == 4


@pytest.mark.parametrize("text,match", [
    ("nope = 1\n", "line 1: unknown config key 'nope'"),
    ("seed = 1\nseed = 2\n", "line 2: duplicate"),
    ("seed 1\n", "line 1: expected"),
    ("seed = x\n", "seed"),
    ("use_asm = maybe\n", "use_asm"),
    ("omega = 1, 2\n", "omega"),
    ("batch_size = 0\n", "batch_size"),
])
def test_bad_config(text, match):
    with pytest.raises(C.ConfigError, match=match):
        C.parse(text)


def test_help_lists_every_key():
    keys = [k for k, _, _ in C.key_help()]
    assert keys == list(C.KEYS)
    body = [line.split(" = ")[0] for line in C.serialize(C.RunConfig(), comments=False).splitlines()]
    assert body == keys
    assert all(h for _, _, h in C.key_help())


def test_load_missing_file(tmp_path):
    with pytest.raises(C.ConfigError, match="cannot read"):
        C.load(tmp_path / "absent.cfg")
