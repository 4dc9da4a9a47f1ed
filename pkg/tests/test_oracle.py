import numpy as np
import pytest

from stcnet import functional as F
from stcnet import gradsuite, oracle
from stcnet.errors import ConfigError, NumericError, ShapeError
from stcnet.tensor import Tensor


def test_conv_reference_identity_kernel():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 3, 2, 3, 3))
    w = np.ones((3, 1, 1, 1, 1))
    assert np.array_equal(oracle.conv3d_reference(x, w, groups=3), x)


def test_conv_reference_impulse_is_cross_correlation():
    x = np.zeros((1, 1, 3, 3, 3))
    x[0, 0, 1, 1, 1] = 1.0
    w = np.arange(27, dtype=float).reshape(1, 1, 3, 3, 3)
    out = oracle.conv3d_reference(x, w, padding=1)
    # cross-correlation: out[p] = w[center - (p - impulse)], i.e. the kernel reversed
    assert np.array_equal(out[0, 0], w[0, 0, ::-1, ::-1, ::-1])
    assert np.array_equal(F.conv3d(Tensor(x), Tensor(w), None, 1, 1).data, out)


def test_finite_diff_closed_form():
    g = oracle.finite_diff_grad(lambda v: float((v ** 2).sum()), np.array([1.0, 2.0]))
    assert np.abs(g - [2.0, 4.0]).max() < 1e-8


@pytest.mark.parametrize("step", [1e-2, 1e-5, 0.3])
def test_finite_diff_exact_for_affine(step):
    a = np.array([0.5, -2.0, 3.0])
    g = oracle.finite_diff_grad(lambda v: float(a @ v + 1.25), np.array([0.1, 0.2, 0.3]), step)
    assert np.abs(g - a).max() < 1e-9


def test_finite_diff_second_order_convergence():
    f = lambda v: float((v ** 3).sum() + v[0] ** 4)
    x = np.array([0.7, -1.1])
    exact = 3 * x ** 2 + np.array([4 * x[0] ** 3, 0.0])
    e1 = np.abs(oracle.finite_diff_grad(f, x, 1e-2) - exact).max()
    e2 = np.abs(oracle.finite_diff_grad(f, x, 5e-3) - exact).max()
    assert 3.5 < e1 / e2 < 4.5


def test_finite_diff_non_finite():
    with pytest.raises(NumericError):
        oracle.finite_diff_grad(lambda v: float(np.log(v[0])), np.array([0.0]))


def test_relative_error_floor():
    assert oracle.relative_error(0.0, 1e-12) == pytest.approx(1e-4)


def test_compare_equal_passes():
    a = np.arange(6.0)
    c = oracle.compare(a, a.copy(), oracle.Tolerance(abs=1e-9))
    assert c.passed and c.abs_error == 0.0


def test_compare_reports_boundary_offender():
    tol = 1e-6
    a = np.zeros(10)
    b = a.copy()
    b[7] = 2 * tol
    c = oracle.compare(a, b, oracle.Tolerance(abs=tol))
    assert not c.passed and c.index == 7


def test_compare_planted_fault_seed6():
    rng = np.random.default_rng(6)
    a = rng.standard_normal((4, 5, 3))
    b = a + rng.uniform(-1e-9, 1e-9, a.shape)
    idx = int(rng.integers(a.size))
    b.reshape(-1)[idx] += 1e-3
    c = oracle.compare(a, b, oracle.Tolerance(abs=1e-6, rel=1e-6))
    assert not c.passed and c.index == idx


def test_compare_l2_norm_and_dims():
    a = np.ones(4)
    assert oracle.compare(a, a + 1e-4, oracle.Tolerance(rel=1e-3, norm="l2")).passed
    with pytest.raises(ShapeError):
        oracle.compare(np.ones(3), np.ones(4), oracle.Tolerance(abs=1))


def test_tolerance_needs_a_positive_bound():
    with pytest.raises(ConfigError):
        oracle.Tolerance()
    with pytest.raises(ConfigError):
        oracle.Tolerance(abs=1, norm="l1")


def test_symbolic_extents_follow_formula():
    assert oracle.symbolic_extents((16, 112, 112), [(7, 2, 3), (3, 1, 1)]) == [(8, 56, 56), (8, 56, 56)]


@pytest.mark.parametrize("target", sorted(gradsuite.TARGETS))
def test_gradient_suite(target):
    results = gradsuite.run(target, seed=0)
    assert results
    for r in results:
        assert r.max_rel_error < 1e-4, r
