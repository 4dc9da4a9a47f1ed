import numpy as np
import pytest

from stcnet import functional as F
from stcnet import oracle
from stcnet.errors import ConfigError, ShapeError, TemporalShapeError
from stcnet.stc import (BranchMode, STCBlockParams, scb_forward, scb_gate, scb_pool, stc_forward,
                        stc_residual_unit, tcb_forward, tcb_gate, tcb_pool)
from stcnet.tensor import Tensor

PARAM_NAMES = ("tcb_w1", "tcb_b1", "tcb_w2", "tcb_b2", "scb_w1", "scb_b1", "scb_w2", "scb_b2")


def params64(C, T, r=4, mode=BranchMode.BOTH, seed=0, zero=False, biased=True):
    p = STCBlockParams(C, T, r, mode, np.random.default_rng(seed), dtype=np.float64, zero=zero)
    if biased and not zero:
        rng = np.random.default_rng(seed + 1000)
        for name in PARAM_NAMES:
            t = getattr(p, name)
            if t is not None and t.ndim == 1:
                t.data[...] = rng.uniform(-0.5, 0.5, t.shape)
    return p


def rand(shape, seed):
    return Tensor(np.random.default_rng(seed).standard_normal(shape))


def test_tcb_pool_examples():
    assert np.all(tcb_pool(Tensor(np.full((2, 3, 2, 2, 2), 1.5))).data == 1.5)
    x = Tensor(np.arange(1.0, 9.0).reshape(1, 1, 2, 2, 2))
    assert tcb_pool(x).data[0, 0] == 4.5
    assert tcb_pool(Tensor(np.zeros((1, 256, 8, 28, 28), np.float32))).shape == (1, 256)


def test_scb_pool_examples():
    assert np.all(scb_pool(Tensor(np.full((1, 3, 4, 2, 2), -2.0))).data == -2.0)
    assert scb_pool(Tensor(np.zeros((1, 256, 8, 28, 28), np.float32))).shape == (1, 2048)
    x = rand((1, 2, 2, 2, 2), 4)
    assert oracle.compare(scb_pool(x).data, oracle.spatial_mean_reference(x.data), oracle.Tolerance(abs=1e-12))


def test_scb_pool_is_t_major():
    x = np.zeros((1, 3, 2, 1, 1))
    x[0, 2, 1] = 7.0  # channel 2 at time 1 -> entry 1*3 + 2
    z = scb_pool(Tensor(x)).data[0]
    assert z[5] == 7.0 and np.count_nonzero(z) == 1


def test_pool_scale_equivariance():
    x = rand((2, 3, 4, 3, 3), 9)
    for pool in (tcb_pool, scb_pool):
        assert np.allclose(pool(Tensor(2.5 * x.data)).data, 2.5 * pool(x).data, rtol=0, atol=1e-14)


def test_zero_weight_gates_are_half():
    p = params64(8, 2, zero=True)
    assert np.all(tcb_gate(Tensor(np.ones((3, 8))), p).data == 0.5)
    g = scb_gate(Tensor(np.ones((3, 16))), p)
    assert g.shape == (3, 8) and np.all(g.data == 0.5)


@pytest.mark.parametrize("forward", [tcb_forward, scb_forward, stc_forward])
def test_zero_weights_halve_input(forward):
    p = params64(4, 2, zero=True)
    x = rand((2, 4, 2, 3, 3), 1)
    assert np.array_equal(forward(x, p).data, 0.5 * x.data)


def test_gates_strictly_inside_unit_interval():
    p = params64(8, 3, r=2, seed=5)
    for scale in (0.1, 1.0, 3.0):
        x = Tensor(scale * np.random.default_rng(2).standard_normal((4, 8, 3, 2, 2)))
        for g in (tcb_gate(tcb_pool(x), p), scb_gate(scb_pool(x), p)):
            assert np.all(g.data > 0) and np.all(g.data < 1)


def test_tcb_gate_seed13_matches_naive():
    p = params64(8, 2, seed=13)
    z = np.random.default_rng(13).standard_normal((3, 8))
    ref = oracle.gate_reference(z, p.tcb_w1.data, p.tcb_b1.data, p.tcb_w2.data, p.tcb_b2.data)
    assert oracle.compare(tcb_gate(Tensor(z), p).data, ref, oracle.Tolerance(abs=1e-12))


def test_scb_gate_seed17_matches_naive():
    p = params64(4, 3, seed=17)
    z = np.random.default_rng(17).standard_normal((2, 12))
    ref = oracle.gate_reference(z, p.scb_w1.data, p.scb_b1.data, p.scb_w2.data, p.scb_b2.data)
    out = scb_gate(Tensor(z), p)
    assert out.shape == (2, 4)
    assert oracle.compare(out.data, ref, oracle.Tolerance(abs=1e-12))


@pytest.mark.parametrize("mode", [BranchMode.TCB, BranchMode.SCB])
def test_branch_seed21_matches_composed_oracle(mode):
    p = params64(4, 2, mode=mode, seed=21)
    x = rand((1, 4, 2, 3, 3), 21)
    forward = tcb_forward if mode is BranchMode.TCB else scb_forward
    assert oracle.compare(forward(x, p).data, oracle.stc_reference(x.data, p), oracle.Tolerance(abs=1e-12))


def test_both_seed29_is_branch_mean():
    p = params64(4, 2, seed=29)
    x = rand((2, 4, 2, 3, 3), 29)
    ref = oracle.stc_reference(x.data, p)
    tol = oracle.Tolerance(abs=1e-12)
    assert oracle.compare(stc_forward(x, p).data, ref, tol)
    mean = 0.5 * (tcb_forward(x, p).data + scb_forward(x, p).data)
    assert oracle.compare(stc_forward(x, p).data, mean, tol)


def _permuted(p, perm):
    """Copy of ``p`` with channels permuted consistently through every matrix."""
    q = params64(p.C, p.T, p.r, p.mode, zero=True)
    C, T = p.C, p.T
    flat = np.concatenate([t * C + perm for t in range(T)])  # t-major descriptor
    q.tcb_w1.data[...] = p.tcb_w1.data[:, perm]
    q.tcb_b1.data[...] = p.tcb_b1.data
    q.tcb_w2.data[...] = p.tcb_w2.data[perm]
    q.tcb_b2.data[...] = p.tcb_b2.data[perm]
    q.scb_w1.data[...] = p.scb_w1.data[:, flat]
    q.scb_b1.data[...] = p.scb_b1.data
    q.scb_w2.data[...] = p.scb_w2.data[perm]
    q.scb_b2.data[...] = p.scb_b2.data[perm]
    return q


@pytest.mark.parametrize("forward", [tcb_forward, scb_forward, stc_forward])
def test_channel_permutation_equivariance(forward):
    p = params64(6, 3, r=3, seed=8)
    perm = np.random.default_rng(8).permutation(6)
    x = rand((2, 6, 3, 2, 3), 8)
    out = forward(x, p).data
    out_perm = forward(Tensor(x.data[:, perm]), _permuted(p, perm)).data
    assert np.abs(out_perm - out[:, perm]).max() < 1e-12


@pytest.mark.parametrize("C", [4, 8, 12])
def test_single_frame_collapse_is_exact(C):
    p = params64(C, 1, seed=C)
    p.scb_w1.data[...] = p.tcb_w1.data
    p.scb_b1.data[...] = p.tcb_b1.data
    p.scb_w2.data[...] = p.tcb_w2.data
    p.scb_b2.data[...] = p.tcb_b2.data
    x = rand((2, C, 1, 3, 3), C)
    assert np.array_equal(scb_pool(x).data, tcb_pool(x).data)
    x_tcb, x_scb = tcb_forward(x, p).data, scb_forward(x, p).data
    assert np.array_equal(x_tcb, x_scb)
    assert np.array_equal(stc_forward(x, p).data, x_tcb)


def test_scb_rejects_other_temporal_depth():
    p = params64(4, 2)
    with pytest.raises(TemporalShapeError):
        scb_forward(rand((1, 4, 3, 2, 2), 0), p)
    with pytest.raises(TemporalShapeError):
        scb_gate(Tensor(np.zeros((1, 12))), p)
    with pytest.raises(TemporalShapeError):
        p.out_dims((4, 3, 2, 2))
    # TCB has no temporal binding
    assert tcb_forward(rand((1, 4, 3, 2, 2), 0), p).shape == (1, 4, 3, 2, 2)


def test_shape_errors():
    p = params64(4, 2)
    with pytest.raises(ShapeError):
        tcb_gate(Tensor(np.zeros((1, 5))), p)
    with pytest.raises(ShapeError):
        stc_forward(rand((1, 3, 2, 2, 2), 0), p)


@pytest.mark.parametrize("C,T,r", [(6, 2, 4), (4, 1, 8), (0, 2, 1)])
def test_invalid_reduction_is_config_error(C, T, r):
    with pytest.raises(ConfigError):
        STCBlockParams(C, T, r)


def test_branch_mode_parse():
    assert BranchMode.parse("tcb+scb") is BranchMode.BOTH
    with pytest.raises(ConfigError):
        BranchMode.parse("XYZ")
    p = STCBlockParams(8, 2, 4, "TCB")
    assert p.scb_w1 is None and p.tcb_w1.shape == (2, 8)


def test_counts_match_formula():
    p = STCBlockParams(256, 8, 16)
    c = p.counts()
    assert c["tcb_weights"] == 2 * 256 * 16 == 8192
    assert c["tcb_biases"] == 16 + 256
    hidden = 8 * 256 // 16
    assert c["scb_weights"] == 2048 * hidden + hidden * 256
    assert c["scb_biases"] == hidden + 256
    assert sum(c.values()) == oracle.recount_parameters(p)
    assert p.tcb_w1.shape == (16, 256) and p.scb_w2.shape == (256, hidden)


def test_linear_hidden_activation():
    p = STCBlockParams(4, 2, 2, rng=np.random.default_rng(3), dtype=np.float64, hidden_activation="linear")
    z = np.random.default_rng(3).standard_normal((2, 4))
    ref = oracle.gate_reference(z, p.tcb_w1.data, p.tcb_b1.data, p.tcb_w2.data, p.tcb_b2.data, hidden="linear")
    assert np.abs(tcb_gate(Tensor(z), p).data - ref).max() < 1e-12


def _conv_path(weight):
    return lambda h: F.conv3d(h, Tensor(weight), None, 1, 1)


def test_residual_zero_conv_path_is_shortcut():
    x = rand((1, 8, 2, 4, 4), 0)
    out = stc_residual_unit(x, _conv_path(np.zeros((8, 8, 3, 3, 3))), params64(8, 2, seed=1))
    assert np.array_equal(out.data, x.data)


def test_residual_bypass_equals_plain_residual():
    x = rand((1, 8, 2, 4, 4), 1)
    w = np.random.default_rng(1).standard_normal((8, 8, 3, 3, 3)) * 0.1
    p = params64(8, 2, seed=1)
    p.bypass = True
    plain = stc_residual_unit(x, _conv_path(w), None)
    assert np.array_equal(stc_residual_unit(x, _conv_path(w), p).data, plain.data)


def test_residual_seed31_matches_oracle_pipeline():
    rng = np.random.default_rng(31)
    x = rand((1, 8, 2, 4, 4), 31)
    w = rng.standard_normal((8, 8, 3, 3, 3)) * 0.1
    p = params64(8, 2, seed=31)
    conv = oracle.conv3d_reference(x.data, w, padding=1)
    ref = x.data + oracle.stc_reference(conv, p)
    out = stc_residual_unit(x, _conv_path(w), p)
    assert oracle.compare(out.data, ref, oracle.Tolerance(abs=1e-10))


def test_residual_dims_mismatch():
    x = rand((1, 4, 2, 4, 4), 0)
    with pytest.raises(ShapeError):
        stc_residual_unit(x, lambda h: F.conv3d(h, Tensor(np.zeros((4, 4, 1, 1, 1))), None, 2, 0), None)
