import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from saslab import numcore as nc
from saslab import verify
from saslab.errors import ConfigError, NumericError, ShapeError, UsageError
from saslab.numcore import Tensor, backward

from conftest import dyadic


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


# ---------------------------------------------------------------------------
# forward examples


def test_matmul_identity():
    out = nc.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[2, 3], [4, 5]]))
    np.testing.assert_array_equal(out.data, [[2, 3], [4, 5]])


def test_matmul_hand_arithmetic():
    assert nc.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11.0]]


def test_matmul_matches_loop_oracle_exactly(rng):
    a, b = dyadic(rng, (3, 4)), dyadic(rng, (4, 2))
    out = nc.matmul(Tensor(a), Tensor(b)).data
    assert np.array_equal(out, verify.oracle_matmul(a, b).astype(np.float32))


def test_matmul_generic_floats_within_tolerance(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    r = verify.compare("matmul", nc.matmul(Tensor(a), Tensor(b)).data, verify.oracle_matmul(a, b), rtol=1e-5)
    assert r.passed, r


def test_matmul_batched_broadcast(rng):
    a, b = rng.normal(size=(2, 3, 4, 5)), rng.normal(size=(5, 6))
    out = nc.matmul(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64))
    np.testing.assert_allclose(out.data, a @ b, rtol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        nc.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_softmax_symmetric():
    np.testing.assert_allclose(nc.softmax_lastdim(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-7)


def test_softmax_no_overflow():
    out = nc.softmax_lastdim(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-6)


def test_softmax_vs_oracle(rng):
    x = rng.normal(size=8) * 3
    r = verify.compare("softmax", nc.softmax_lastdim(Tensor(x)).data, verify.oracle_softmax(x), atol=1e-6)
    assert r.passed, r


def test_softmax_rejects_non_finite():
    with pytest.raises(NumericError):
        nc.softmax_lastdim(Tensor([0.0, np.nan]))


@given(arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 9)),
              elements=st.floats(-50, 50, width=32)))
def test_softmax_rows_are_distributions(x):
    out = nc.softmax_lastdim(Tensor(x)).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-6)


def test_conv_k1_identity_kernel_returns_input(rng):
    x = rng.normal(size=(3, 4, 5)).astype(np.float32)
    w = np.eye(4, dtype=np.float32)[:, :, None]
    out = nc.conv1d_heads(Tensor(x), Tensor(w), Tensor(np.zeros(4))).data
    assert np.array_equal(out, x)


def test_conv_k1_is_linear_map_over_channels(rng):
    x, w, b = dyadic(rng, (3, 4, 5)), dyadic(rng, (6, 4, 1)), dyadic(rng, (6,))
    out = nc.conv1d_heads(Tensor(x), Tensor(w), Tensor(b)).data
    expect = np.einsum("oc,ncl->nol", w[:, :, 0], x) + b[None, :, None]
    assert np.array_equal(out, expect)


def test_conv_k3_matches_loop_oracle_exactly(rng):
    x, w, b = dyadic(rng, (2, 3, 7)), dyadic(rng, (4, 3, 3)), dyadic(rng, (4,))
    out = nc.conv1d_heads(Tensor(x), Tensor(w), Tensor(b)).data
    assert np.array_equal(out, verify.oracle_conv1d(x, w, b).astype(np.float32))


def test_conv_even_kernel_rejected():
    with pytest.raises(ConfigError):
        nc.conv1d_heads(Tensor(np.zeros((1, 2, 3))), Tensor(np.zeros((2, 2, 2))))


def test_relu_example():
    assert nc.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_cross_entropy_uniform_is_log_vocab():
    logits = Tensor(np.zeros((2, 3, 256)))
    loss = nc.cross_entropy(logits, np.array([[0, 5, 255], [7, 7, 7]]))
    assert loss.item() == pytest.approx(math.log(256), abs=1e-6)
    assert math.log(256) == pytest.approx(5.545, abs=1e-3)


def test_cross_entropy_vs_oracle(rng):
    logits = rng.normal(size=(2, 3, 11)) * 4
    tgt = rng.integers(0, 11, size=(2, 3))
    loss = nc.cross_entropy(Tensor(logits, dtype=np.float64), tgt).item()
    assert loss == pytest.approx(verify.oracle_cross_entropy(logits, tgt), rel=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_cross_entropy_backward_32bit_finite_difference(seed):
    # float32 loss carries ~1e-7 relative roundoff, so the step must be large;
    # one row keeps gradient entries O(0.1) rather than diluted by the mean
    r = np.random.default_rng(seed)
    logits = r.normal(size=(1, 7)).astype(np.float32)
    tgt = r.integers(0, 7, size=1)
    x = Tensor(logits, requires_grad=True)
    backward(nc.cross_entropy(x, tgt))
    h = 3e-2
    num = np.zeros(logits.shape)
    for i in np.ndindex(logits.shape):
        up, dn = logits.copy(), logits.copy()
        up[i] += h
        dn[i] -= h
        num[i] = (nc.cross_entropy(Tensor(up), tgt).item() - nc.cross_entropy(Tensor(dn), tgt).item()) / (2 * h)
    rep = verify.compare("cross_entropy", x.grad, num, rtol=1e-3, floor=1e-2)
    assert rep.passed, rep


# ---------------------------------------------------------------------------
# autograd mechanics


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(UsageError):
        backward(nc.scale(x, 2.0))


def test_backward_accumulates_without_zeroing():
    x = Tensor([1.0, 2.0], requires_grad=True)
    for _ in range(2):
        backward(nc.sum_axis(nc.mul(x, x)))
    np.testing.assert_array_equal(x.grad, [4.0, 8.0])
    x.zero_grad()
    backward(nc.sum_axis(x))
    np.testing.assert_array_equal(x.grad, [1.0, 1.0])


def test_backward_populates_all_reachable_leaves():
    a, b, c = (Tensor(np.ones(2), requires_grad=True) for _ in range(3))
    unused = Tensor(np.ones(2), requires_grad=True)
    backward(nc.sum_axis(nc.add(nc.mul(a, b), c)))
    assert all(t.grad is not None for t in (a, b, c))
    assert unused.grad is None


def test_shared_subexpression_gradient():
    # y = x*x + x*x reuses x four times; dy/dx = 4x
    x = Tensor([3.0], requires_grad=True)
    sq = nc.mul(x, x)
    backward(nc.sum_axis(nc.add(sq, sq)))
    assert x.grad.tolist() == [12.0]


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with nc.no_grad():
        y = nc.mul(x, x)
    assert not y.requires_grad
    assert nc.is_grad_enabled()


@given(st.lists(st.integers(1, 4), min_size=1, max_size=4))
def test_reshape_roundtrip_is_identity(shape):
    x = Tensor(np.arange(np.prod(shape), dtype=np.float32).reshape(shape))
    y = nc.reshape(nc.reshape(x, (-1,)), tuple(shape))
    assert np.array_equal(y.data, x.data)
    assert np.shares_memory(y.data, x.data)


def test_dtype_preserved_in_64_bit():
    x = t64(np.ones((2, 3)))
    w = t64(np.ones((3, 4)))
    assert nc.gelu(nc.linear(x, w)).dtype == np.float64


def test_relu_margin_tracks_closest_input():
    with nc.relu_margin() as m:
        nc.relu(Tensor([-0.5, 0.25, 2.0]))
        nc.relu(Tensor([0.125, -3.0]))
    assert m[0] == 0.125


# ---------------------------------------------------------------------------
# finite-difference checks of every differentiable primitive (64-bit, h=1e-5)


def _away_from_zero(r, shape, margin=0.1):
    x = r.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)


CASES = {
    "add": (lambda a, b: nc.add(a, b), [(2, 3), (3,)]),
    "sub": (lambda a, b: nc.sub(a, b), [(2, 3), (2, 1)]),
    "mul": (lambda a, b: nc.mul(a, b), [(2, 3), (1, 3)]),
    "scale": (lambda a: nc.scale(a, -1.7), [(4,)]),
    "div_scalar": (lambda a: nc.div_scalar(a, 3.0), [(4,)]),
    "relu": (lambda a: nc.relu(a), [(3, 4)]),
    "gelu": (lambda a: nc.gelu(a), [(3, 4)]),
    "reshape": (lambda a: nc.reshape(a, (3, 4)), [(2, 6)]),
    "transpose": (lambda a: nc.transpose(a, 0, 2), [(2, 3, 4)]),
    "repeat_axis": (lambda a: nc.repeat_axis(a, 1, 3), [(2, 2, 3)]),
    "sum_axis": (lambda a: nc.sum_axis(a, axis=1, keepdims=True), [(3, 4)]),
    "mean_axis": (lambda a: nc.mean_axis(a, axis=0), [(3, 4)]),
    "matmul": (lambda a, b: nc.matmul(a, b), [(2, 3, 4), (4, 5)]),
    "matmul_batched": (lambda a, b: nc.matmul(a, b), [(2, 3, 4), (2, 4, 5)]),
    "linear": (lambda x, w, b: nc.linear(x, w, b), [(2, 3, 4), (4, 5), (5,)]),
    "softmax": (lambda a: nc.softmax_lastdim(a), [(3, 5)]),
    "layer_norm": (lambda x, w: nc.layer_norm(x, w), [(3, 6), (6,)]),
    "conv1d_k1": (lambda x, w, b: nc.conv1d_heads(x, w, b), [(2, 3, 4), (5, 3, 1), (5,)]),
    "conv1d_k3": (lambda x, w, b: nc.conv1d_heads(x, w, b), [(2, 3, 5), (4, 3, 3), (4,)]),
    "contiguous": (lambda a: nc.contiguous(nc.transpose(a, 0, 1)), [(3, 4)]),
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_primitive_gradient_finite_difference(name):
    fn, shapes = CASES[name]
    r = np.random.default_rng([5, len(name)])
    arrays = {f"a{i}": _away_from_zero(r, s) for i, s in enumerate(shapes)}
    probe = r.normal(size=np.shape(fn(*[t64(a, False) for a in arrays.values()]).data))

    def loss_of(arrs):
        out = fn(*[t64(a, False) for a in arrs.values()])
        return float(np.sum(out.data * probe))

    leaves = {k: t64(a) for k, a in arrays.items()}
    out = fn(*leaves.values())
    backward(nc.sum_axis(nc.mul(out, t64(probe, False))))
    num = verify.finite_diff(loss_of, arrays, h=1e-5)
    for k, leaf in leaves.items():
        r_ = verify.compare(f"{name}.{k}", leaf.grad, num[k], rtol=1e-4)
        assert r_.passed, r_


def test_cross_entropy_gradient_64bit():
    r = np.random.default_rng(3)
    logits = r.normal(size=(2, 3, 6))
    tgt = r.integers(0, 6, size=(2, 3))
    leaf = t64(logits)
    backward(nc.cross_entropy(leaf, tgt))
    num = verify.finite_diff(lambda a: nc.cross_entropy(t64(a["x"], False), tgt).item(), {"x": logits})
    assert verify.compare("ce", leaf.grad, num["x"], rtol=1e-4).passed


def test_embedding_gradient_accumulates_repeated_rows():
    table = t64(np.arange(12.0).reshape(4, 3))
    idx = np.array([[1, 1, 3]])
    backward(nc.sum_axis(nc.embedding(table, idx)))
    np.testing.assert_array_equal(table.grad, [[0, 0, 0], [2, 2, 2], [0, 0, 0], [1, 1, 1]])
