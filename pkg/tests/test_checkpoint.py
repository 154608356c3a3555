import struct

import numpy as np
import pytest

from sghm import checkpoint as K
from sghm import config as C
from sghm import data as D
from sghm import train as TR
from sghm.model import SGHM, ModelConfig


@pytest.fixture(scope="module")
def trained():
    model = SGHM(ModelConfig(model_seed=5))
    res = TR.train_segmentation(model, D.gen_dataset(2, 64, seed=1), TR.TrainConfig(steps_seg=2))
    return model, res.optimizer


def test_round_trip_bitwise(tmp_path, trained):
    model, opt = trained
    path = tmp_path / "m.ckpt"
    K.save(path, model, C.RunConfig(), opt.state_tensors())
    ck = K.load(path)
    own = model.named_tensors()
    assert list(ck.tensors) == list(own)
    for k in own:
        assert ck.tensors[k].tobytes() == own[k].astype(np.float32).tobytes()
    assert ck.config == C.RunConfig()
    assert ck.optimizer["step"][0] == 2
    again = tmp_path / "again.ckpt"
    K.save(again, K.build_model(ck), ck.config, ck.optimizer)
    assert again.read_bytes() == path.read_bytes()


def test_rebuilt_model_predicts_identically(tmp_path, trained):
    model, _ = trained
    K.save(tmp_path / "m.ckpt", model, C.RunConfig(model=ModelConfig(model_seed=5)))
    rebuilt = K.build_model(K.load(tmp_path / "m.ckpt"))
    s = D.gen_dataset(1, 64, seed=9)
    np.testing.assert_array_equal(TR.predict_alpha(rebuilt, s), TR.predict_alpha(model.eval(), s))


def _blob(trained):
    return K.encode(trained[0].named_tensors(), "seed = 1\n")


def test_truncation_names_offset(trained):
    blob = _blob(trained)
    for cut in (2, 7, 40, len(blob) - 3):
        with pytest.raises(K.CheckpointError, match=r"truncated at byte offset \d+ while reading"):
            K.decode(blob[:cut])


def test_bad_magic_and_version(trained):
    blob = _blob(trained)
    with pytest.raises(K.CheckpointError, match="bad magic.*offset 0"):
        K.decode(b"XXXX" + blob[4:])
    with pytest.raises(K.CheckpointError, match="unsupported format version 9"):
        K.decode(blob[:4] + bytes([9]) + blob[5:])


def test_trailing_bytes_rejected(trained):
    with pytest.raises(K.CheckpointError, match="trailing"):
        K.decode(K.encode({"a": np.zeros(2)}, "", {}) + b"\x00")


def test_non_finite_refused(tmp_path):
    with pytest.raises(K.CheckpointError, match="non-finite"):
        K.encode({"a": np.array([np.nan])}, "")


def test_duplicate_name_rejected():
    rec = struct.pack("<H", 1) + b"a" + struct.pack("<BI", 1, 1) + np.zeros(1, "<f4").tobytes()
    blob = K.MAGIC + bytes([K.VERSION]) + struct.pack("<I", 2) + rec + rec + struct.pack("<I", 0)
    with pytest.raises(K.CheckpointError, match="duplicate"):
        K.decode(blob)


def test_assign_rejects_unknown_and_missing(trained):
    model = SGHM(ModelConfig())
    tensors = dict(trained[0].named_tensors())
    with pytest.raises(K.CheckpointError, match="unknown tensors: bogus"):
        K.assign(model, {**tensors, "bogus": np.zeros(1)})
    seg_free = {k: v for k, v in tensors.items() if model.group_of(k) != "seg"}
    with pytest.raises(K.CheckpointError, match="group\\(s\\) seg"):
        K.assign(model, seg_free, groups=("encoder", "seg"))
    name = next(iter(tensors))
    with pytest.raises(K.CheckpointError, match="shape"):
        K.assign(model, {**tensors, name: np.zeros((1, 7))})
    K.assign(model, tensors)


def test_stage_one_checkpoint_seeds_stage_two(tmp_path, trained):
    model, _ = trained
    K.save(tmp_path / "s1.ckpt", model, C.RunConfig())
    fresh = SGHM(ModelConfig(model_seed=99))
    mat_before = {k: v.copy() for k, v in fresh.named_tensors().items() if fresh.group_of(k) == "mat"}
    K.assign(fresh, K.load(tmp_path / "s1.ckpt").tensors, groups=("encoder", "seg"))
    own = model.named_tensors()
    for k, v in fresh.named_tensors().items():
        if fresh.group_of(k) == "mat":
            np.testing.assert_array_equal(v, mat_before[k])
        else:
            np.testing.assert_array_equal(v, own[k])
