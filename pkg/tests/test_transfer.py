import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stcnet import functional as F
from stcnet.data import SynthSpec, generate
from stcnet.errors import DataError, FreezeViolation
from stcnet.tensor import Tensor, no_grad
from stcnet.train import OptimConfig, SGD, sgd_step
from stcnet.transfer import (FULL_WIDTHS, MatchingHead, TransferConfig, Teacher2D, build_student, linear_probe,
                             make_pairs, match_logits, pretrain_teacher, probe_features, run_transfer,
                             teacher_checksum, teacher_forward, transfer_step)

GOLDEN_PAIRS = [(0, 5, 6), (1, 25, 25), (1, 21, 21), (0, 3, 10), (1, 1, 1), (0, 20, 30), (1, 24, 24), (0, 31, 14),
                (1, 28, 28), (0, 9, 16)]


@pytest.fixture(scope="module")
def small():
    return generate(SynthSpec(seed=0, samples_per_class=8))


@pytest.fixture(scope="module")
def teacher(small):
    t, _ = pretrain_teacher(small, TransferConfig().widths()["dt"], seed=0, epochs=1)
    return t


def parts(small, seed=0):
    cfg = TransferConfig()
    w = cfg.widths()
    return build_student(cfg, small.clips[0].data.shape, seed), MatchingHead(w["dt"], w["ds"], w, seed + 1)


# -- pairs -------------------------------------------------------------------

def test_toy_widths_are_scaled():
    assert TransferConfig().widths() == {k: v // 16 for k, v in FULL_WIDTHS.items()}
    assert FULL_WIDTHS == {"dt": 1024, "ds": 1024, "fc_a": 2048, "fc_b": 512, "fc_c": 128}


def test_pair_balance(small):
    pairs = make_pairs(small.clips, 100, 4, 1.0, seed=0)
    labels = [p.label for p in pairs]
    assert len(pairs) == 200 and labels.count(1) == labels.count(0) == 100


def test_pair_provenance_over_1000(small):
    for p in make_pairs(small.clips, 500, 8, 1.0, seed=1):
        fv, fidx = p.frames_source
        cv, cidx = p.clip_source
        if p.label:
            assert fv == cv and set(fidx) <= set(cidx)
        else:
            assert fv != cv


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), X=st.integers(1, 8), ratio=st.sampled_from([0.5, 1.0, 2.0]))
def test_pair_provenance_property(small, seed, X, ratio):
    for p in make_pairs(small.clips, 6, X, ratio, seed=seed):
        assert p.frames.shape[0] == X
        vid, fidx = p.frames_source
        clip = next(c for c in small.clips if c.video_id == vid)
        assert np.array_equal(p.frames, np.moveaxis(clip.data[:, list(fidx)], 1, 0))
        assert (p.frames_source[0] == p.clip_source[0]) == bool(p.label)


def test_pairs_golden_seed5(small):
    assert [p.identity for p in make_pairs(small.clips, 5, 8, 1.0, seed=5)] == GOLDEN_PAIRS


def test_single_video_needs_no_negatives(small):
    with pytest.raises(DataError):
        make_pairs(small.clips[:1], 3, 2, 1.0)
    assert len(make_pairs(small.clips[:1], 3, 2, 0.0)) == 3


# -- teacher -------------------------------------------------------------------

def test_teacher_forward_single_frame(teacher, small):
    frame = small.clips[0].data[:, 3]
    with no_grad():
        direct = teacher.features(Tensor(frame[None])).data[0]
    assert np.array_equal(teacher_forward(frame[None], teacher).data, direct)
    repeated = np.repeat(frame[None], 6, axis=0)
    assert np.allclose(teacher_forward(repeated, teacher).data, direct, rtol=0, atol=1e-6)


def test_teacher_forward_three_frames_seed2(teacher, small):
    rng = np.random.default_rng(2)
    frames = rng.uniform(0, 1, (3, 1, 16, 16)).astype(np.float32)
    with no_grad():
        each = [teacher.features(Tensor(f[None])).data[0].astype(np.float64) for f in frames]
    assert np.allclose(teacher_forward(frames, teacher).data, sum(each) / 3, rtol=0, atol=1e-6)


def test_teacher_is_frozen(teacher):
    assert teacher.frozen
    with pytest.raises(FreezeViolation):
        teacher.train()
    name, p = next(iter(teacher.named_parameters()))
    with pytest.raises(FreezeViolation):
        sgd_step([p], [np.ones_like(p.data)], [], OptimConfig())
    with pytest.raises(ValueError):
        p.data[...] = 0


def test_unfrozen_teacher_rejected(small):
    with pytest.raises(FreezeViolation):
        teacher_forward(small.clips[0].data[:, :2].swapaxes(0, 1), Teacher2D(1, 8, 12))


# -- transfer step ---------------------------------------------------------------

def test_teacher_unchanged_after_100_steps(teacher, small):
    student, head = parts(small)
    named = list(student.named_parameters("s.")) + list(head.named_parameters("h."))
    sgd = SGD(named, TransferConfig().optim())
    before = teacher_checksum(teacher)
    for step in range(100):
        batch = make_pairs(small.train, 4, 4, 1.0, seed=step)
        assert math.isfinite(transfer_step(batch, teacher, student, head, sgd, 0.03))
    assert teacher_checksum(teacher) == before


def _batch(small, seed=0, n=32):
    pairs = make_pairs(small.train, n, 8, 1.0, seed=seed)
    return np.stack([p.frames for p in pairs]), np.stack([p.clip for p in pairs])


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_initial_loss_near_ln2(teacher, small, seed):
    student, head = parts(small, seed)
    frames, clips = _batch(small, seed)
    labels = np.random.default_rng(seed).permutation(np.repeat([0, 1], len(clips) // 2))
    with no_grad():
        loss = F.softmax_cross_entropy(match_logits(frames, clips, teacher, student, head), labels)
    assert abs(float(loss.data[0]) - math.log(2)) < 0.1


def test_label_swap_symmetry(teacher, small):
    student, head = parts(small)
    head.classifier.weight.data[...] = np.random.default_rng(0).standard_normal(head.classifier.weight.shape)
    head.classifier.bias.data[...] = [0.3, -0.2]
    frames, clips = _batch(small)
    labels = np.random.default_rng(1).integers(0, 2, len(clips))
    student.eval()
    with no_grad():
        a = F.softmax_cross_entropy(match_logits(frames, clips, teacher, student, head), labels)
        head.classifier.weight.data[...] = head.classifier.weight.data[::-1].copy()
        head.classifier.bias.data[...] = head.classifier.bias.data[::-1].copy()
        b = F.softmax_cross_entropy(match_logits(frames, clips, teacher, student, head), 1 - labels)
    assert abs(float(a.data[0]) - float(b.data[0])) < 1e-6


def test_gradient_reaches_every_student_param(teacher, small):
    result = run_transfer(TransferConfig(steps=50, batch_size=16), small, seed=0, teacher=teacher, probe=False)
    assert result.gradient_seen and all(result.gradient_seen.values())
    assert result.teacher_unchanged


def test_toy_run_200_steps_matches(tmp_path):
    ds = generate(SynthSpec(seed=0))
    result = run_transfer(TransferConfig(steps=200), ds, seed=0, run_dir=tmp_path, probe=False)
    assert result.teacher_unchanged
    assert result.heldout_accuracy >= 0.75
    assert (tmp_path / "transfer.csv").read_text().startswith("step,lr,loss")


# -- probe -------------------------------------------------------------------------

def test_probe_on_random_features_is_chance():
    rng = np.random.default_rng(0)
    K = 4
    xtr, xte = rng.standard_normal((400, 16)), rng.standard_normal((500, 16))
    ytr, yte = rng.integers(0, K, 400), np.repeat(np.arange(K), 125)
    assert abs(linear_probe(xtr, ytr, xte, yte, K, seed=0) - 1 / K) <= 0.1


def test_probe_learns_separable_features():
    rng = np.random.default_rng(1)
    y = rng.integers(0, 3, 300)
    x = np.eye(3)[y] * 4 + rng.standard_normal((300, 3)) * 0.1
    assert linear_probe(x[:200], y[:200], x[200:], y[200:], 3) == 1.0


def test_probe_deterministic(small):
    a, _ = parts(small, 4)
    b, _ = parts(small, 4)
    assert probe_features(a, small, seed=3, epochs=5) == probe_features(b, small, seed=3, epochs=5)
