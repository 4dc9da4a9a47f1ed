import numpy as np
import pytest

from stcnet.arch import build, preset
from stcnet.checkpoint import (DTYPE_CODES, Checkpoint, decode, encode, load_checkpoint, model_tensors,
                               restore_model, save_checkpoint)
from stcnet.data import SynthSpec, generate
from stcnet.errors import CompatibilityError, FormatError
from stcnet.runtime import thread_limit
from stcnet.tensor import Tensor, no_grad
from stcnet.train import CSV_FIELDS, OptimConfig, Trainer


@pytest.fixture(scope="module")
def tiny():
    return generate(SynthSpec(seed=1, samples_per_class=12))


def test_all_dtypes_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "f32": rng.standard_normal((2, 3, 1, 4)).astype(np.float32),
        "f64": rng.standard_normal(5),
        "i64": np.arange(-3, 3, dtype=np.int64).reshape(2, 3),
        "i32": np.array([[7]], dtype=np.int32),
        "u8": np.arange(10, dtype=np.uint8),
        "u64": np.array([2 ** 63 + 5], dtype=np.uint64),
        "b": np.array([True, False, True]),
        "scalar": np.array(3.5),
        "empty": np.zeros((0, 4), np.float32),
    }
    assert {str(t.dtype) for t in tensors.values()} == set(DTYPE_CODES)
    groups = {k: ("a" if i % 2 else "b") for i, k in enumerate(tensors)}
    ckpt = Checkpoint(tensors, groups, {"x": 1}, "abc", {"rows": [1, 2]})
    save_checkpoint(ckpt, tmp_path / "c.stcn")
    back = load_checkpoint(tmp_path / "c.stcn", expect_digest="abc")
    for k, v in tensors.items():
        assert back.tensors[k].dtype == v.dtype and back.tensors[k].shape == v.shape
        assert back.tensors[k].tobytes() == v.tobytes()
    assert back.groups == groups and back.config == {"x": 1} and back.extra == {"rows": [1, 2]}
    assert not list(tmp_path.glob("*.tmp"))


def test_truncation_is_format_error():
    raw = encode(Checkpoint({"w": np.ones(8, np.float32)}, {"w": "backbone"}))
    for cut in (2, 10, len(raw) - 1):
        with pytest.raises(FormatError):
            decode(raw[:cut])


def test_bad_magic_and_version():
    raw = bytearray(encode(Checkpoint({}, {})))
    with pytest.raises(FormatError, match="magic"):
        decode(b"XXXX" + bytes(raw[4:]))
    raw[4] = 9
    with pytest.raises(FormatError, match="version"):
        decode(bytes(raw))


def test_digest_mismatch_strict(tmp_path):
    g = build(preset("toy-stc-resnet"))
    tensors, groups = model_tensors(g)
    save_checkpoint(Checkpoint(tensors, groups, g.config.to_dict(), g.config.digest()), tmp_path / "m.stcn")
    other = preset("toy-stc-resnet").replace(branch_mode="TCB").digest()
    with pytest.raises(CompatibilityError):
        load_checkpoint(tmp_path / "m.stcn", expect_digest=other)
    assert load_checkpoint(tmp_path / "m.stcn", expect_digest=other, strict=False).digest == g.config.digest()


def test_model_groups():
    g = build(preset("toy-stc-resnet"))
    _, groups = model_tensors(g)
    assert {"backbone", "stc", "head", "buffers"} <= set(groups.values())
    assert all(groups[k] == "stc" for k in groups if ".stc." in k)


def test_round_trip_logits_bit_identical(tmp_path):
    g = build(preset("toy-stc-resnet"), seed=4)
    x = Tensor(np.random.default_rng(4).standard_normal((3, 1, 8, 16, 16)).astype(np.float32))
    g.eval()
    with no_grad():
        before = g(x).data
    tensors, groups = model_tensors(g)
    save_checkpoint(Checkpoint(tensors, groups, g.config.to_dict(), g.config.digest()), tmp_path / "m.stcn")
    fresh = build(preset("toy-stc-resnet"), seed=99)
    restore_model(fresh, load_checkpoint(tmp_path / "m.stcn", g.config.digest()).tensors)
    fresh.eval()
    with no_grad():
        assert fresh(x).data.tobytes() == before.tobytes()


def test_restore_rejects_mismatch():
    g = build(preset("toy-stc-resnet"))
    tensors, _ = model_tensors(g)
    with pytest.raises(CompatibilityError):
        restore_model(build(preset("toy-stc-resnext")), tensors)
    tensors.pop(next(iter(tensors)))
    with pytest.raises(CompatibilityError):
        restore_model(g, tensors)


def test_resume_matches_uninterrupted(tmp_path, tiny):
    def trainer():
        return Trainer(build(preset("toy-stc-resnet"), 2), OptimConfig(max_epochs=3), tiny, seed=2)

    with thread_limit(1):
        full = trainer().fit()
        first = trainer()
        first.fit(max_epochs=1, checkpoint_path=tmp_path / "ck.stcn")
        resumed = trainer()
        resumed.resume(tmp_path / "ck.stcn")
        assert resumed.epoch == 1
        rec = resumed.fit()
    for key in CSV_FIELDS[:-1]:
        assert rec.column(key) == full.column(key)
