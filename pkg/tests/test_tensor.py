import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from paramalign import checkpoint
from paramalign import tensor as T
from paramalign.tensor import Rng, Tensor, finite_diff_check

from .conftest import leaf


def naive_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


# -- matmul


def test_matmul_identity():
    x = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = T.matmul(Tensor(np.eye(2)), x)
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_row_by_column():
    assert T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_against_triple_loop(rng):
    a = rng.normal((5, 7), dtype=np.float64)
    b = rng.normal((7, 3), dtype=np.float64)
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), rtol=1e-12, atol=1e-12)


@given(st.integers(1, 16), st.integers(1, 16), st.integers(1, 16), st.integers(0, 2**32 - 1))
def test_matmul_random_shapes(m, k, n, seed):
    r = Rng(seed)
    a, b = r.normal((m, k), dtype=np.float64), r.normal((k, n), dtype=np.float64)
    ref = naive_matmul(a, b)
    got = T.matmul(Tensor(a), Tensor(b)).data
    assert np.abs(got - ref).max() <= 1e-12 * max(1.0, np.abs(ref).max())


def test_matmul_shape_mismatch():
    with pytest.raises(T.ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_flop_tally():
    with T.count_flops() as c:
        T.matmul(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2))))
    assert c.total() == 16


# -- softmax


def test_softmax_single_unmasked_entry():
    y = T.softmax_rows(Tensor(np.random.default_rng(0).normal(size=(3, 3))), T.causal_mask(3))
    assert y.data[0, 0] == 1.0
    assert (y.data[0, 1:] == 0).all()


def test_softmax_symmetric_row():
    np.testing.assert_array_equal(T.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])


def test_softmax_closed_form():
    y = T.softmax_rows(Tensor([[math.log(1.0), math.log(3.0)]], dtype=np.float64))
    np.testing.assert_allclose(y.data, [[0.25, 0.75]], atol=1e-12)


def test_softmax_masked_entries_exact_zero():
    y = T.softmax_rows(Tensor(np.ones((4, 4))), T.causal_mask(4))
    assert (y.data[np.triu_indices(4, 1)] == 0.0).all()
    np.testing.assert_allclose(y.data.sum(-1), 1.0, atol=1e-6)


def test_softmax_all_masked_row_rejected():
    mask = np.ones((2, 2), dtype=bool)
    mask[1] = False
    with pytest.raises(ValueError):
        T.softmax_rows(Tensor(np.zeros((2, 2))), mask)


@given(
    hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=8), elements=st.floats(-30, 30)),
    st.floats(-50, 50),
)
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    y = T.softmax_rows(Tensor(x)).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(T.softmax_rows(Tensor(x + c)).data, y, atol=1e-9)


# -- rms_norm / silu


def test_rms_norm_ones():
    out = T.rms_norm(Tensor(np.ones((2, 4))), Tensor(np.ones(4)), eps=0.0)
    np.testing.assert_array_equal(out.data, np.ones((2, 4)))


def test_rms_norm_three_four():
    out = T.rms_norm(Tensor([3.0, 4.0], dtype=np.float64), Tensor(np.ones(2)), eps=0.0)
    np.testing.assert_allclose(out.data, np.array([3.0, 4.0]) / math.sqrt(12.5), atol=1e-12)


def test_rms_norm_zero_vector():
    out = T.rms_norm(Tensor(np.zeros(5)), Tensor(np.ones(5)), eps=1e-6)
    np.testing.assert_array_equal(out.data, np.zeros(5))
    out = T.rms_norm(Tensor(np.zeros(5)), Tensor(np.ones(5)), eps=0.0)
    np.testing.assert_array_equal(out.data, np.zeros(5))


def test_silu_values():
    assert T.silu(Tensor([0.0])).data[0] == 0.0
    assert abs(T.silu(Tensor([20.0], dtype=np.float64)).data[0] - 20.0) < 1e-6
    assert abs(T.silu(Tensor([1.0], dtype=np.float64)).data[0] - 1 / (1 + math.exp(-1))) < 1e-12
    assert abs(T.silu(Tensor([1.0], dtype=np.float64)).data[0] - 0.731059) < 1e-6


# -- backward


def test_backward_linear_map_gradient():
    W = leaf(np.arange(6.0).reshape(2, 3))
    x = np.array([[1.0, -2.0]])
    (Tensor(x) @ W).sum().backward()
    # d sum(x W) / dW[i, j] = x[i]
    np.testing.assert_array_equal(W.grad, np.repeat(x.T, 3, axis=1))


def test_backward_unused_leaf_gets_no_gradient():
    a, b = leaf([1.0, 2.0]), leaf([3.0])
    (a * a).sum().backward()
    assert b.grad is None
    np.testing.assert_array_equal(a.grad, [2.0, 4.0])


def test_backward_accumulates():
    a = leaf([1.0, 2.0])
    (a * a).sum().backward()
    first = a.grad.copy()
    (a * a).sum().backward()
    np.testing.assert_array_equal(a.grad, 2 * first)


def test_backward_requires_scalar():
    a = leaf([1.0, 2.0])
    with pytest.raises(T.ShapeError):
        (a * a).backward()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_forward_rejected():
    with pytest.raises(T.NonFiniteError):
        T.mul(Tensor([1e300], dtype=np.float64), 1e300)
    with pytest.raises(T.NonFiniteError):
        Tensor([np.nan])


def test_rank_limit():
    with pytest.raises(T.ShapeError):
        Tensor(np.zeros((1, 1, 1, 1, 1)))


# -- finite differences


def test_fdcheck_square():
    theta = leaf([3.0])
    err = finite_diff_check(lambda: (theta * theta).sum(), [theta], h_step=1e-5)
    assert err < 1e-8
    theta.zero_grad()
    (theta * theta).sum().backward()
    assert abs(theta.grad[0] - 6.0) < 1e-12


def test_fdcheck_constant():
    theta = leaf([1.0, 2.0])
    assert finite_diff_check(lambda: Tensor(5.0, dtype=np.float64) + theta.sum() * 0.0, [theta]) == 0.0


def test_fdcheck_needs_float64():
    with pytest.raises(TypeError):
        finite_diff_check(lambda: Tensor(1.0), [leaf([1.0], np.float32)])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_fdcheck_nonfinite():
    theta = leaf([1.0])
    with pytest.raises(T.NonFiniteError):
        finite_diff_check(lambda: T.mul(theta, 1e308) * 1e308, [theta])


OPS = {
    "matmul": lambda a, b: (a @ b).sum(),
    "batched_matmul": lambda a, b: ((a.reshape(2, 3, 3) @ b) * a.reshape(2, 3, 3)).sum(),
    "mul_add": lambda a, b: (a * a + a).sum(),
    "softmax": lambda a, b: (T.softmax_rows(a) * a).sum(),
    "softmax_masked": lambda a, b: (T.softmax_rows(a[:3, :3], T.causal_mask(3)) * a[:3, :3]).sum(),
    "rms_norm": lambda a, b: (T.rms_norm(a, b[0], 1e-6) * a).sum(),
    "silu": lambda a, b: (T.silu(a) * a).sum(),
    "transpose_reshape": lambda a, b: (T.transpose(a).reshape(-1) * a.reshape(-1)).sum(),
    "embedding": lambda a, b: (T.embedding(a, [0, 2, 2]) * a[:3]).sum(),
    "cross_entropy": lambda a, b: T.cross_entropy(a @ b, [0, 1, 2, 2, 0, 1]),
    "concat": lambda a, b: (T.concat([a, a * a], axis=1) * T.concat([a, a], axis=1)).sum(),
    "mean_sub": lambda a, b: ((a - b[0]) * (a - b[0])).mean(),
}


@pytest.mark.parametrize("name", sorted(OPS))
@given(seed=st.integers(0, 2**32 - 1))
def test_every_op_passes_gradcheck(name, seed):
    r = Rng(seed)
    a = Tensor(r.normal((6, 3), dtype=np.float64), requires_grad=True)
    b = Tensor(r.normal((3, 3), dtype=np.float64), requires_grad=True)
    assert finite_diff_check(lambda: OPS[name](a, b), [a, b], h_step=1e-6) < 1e-4


# -- determinism and rng


def test_rng_child_streams_are_deterministic_and_distinct():
    a = Rng(7).child("x").normal(5)
    b = Rng(7).child("x").normal(5)
    c = Rng(7).child("y").normal(5)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


# -- checkpoint format


@given(
    st.dictionaries(
        st.text(min_size=1, max_size=20),
        hnp.arrays(
            st.sampled_from([np.float32, np.float64]),
            hnp.array_shapes(min_dims=0, max_dims=4, min_side=0, max_side=5),
            elements=st.floats(allow_nan=False, width=32),
        ),
        max_size=5,
    )
)
def test_checkpoint_roundtrip_bit_exact(tensors):
    back = checkpoint.loads(checkpoint.dumps(tensors))
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].dtype == tensors[k].dtype
        assert back[k].shape == tensors[k].shape
        assert back[k].tobytes() == np.ascontiguousarray(tensors[k]).tobytes()


def test_checkpoint_layout():
    buf = checkpoint.dumps({"ab": np.array([[1.0]], dtype=np.float32)})
    assert buf[:4] == b"PACK"
    assert int.from_bytes(buf[4:8], "little") == 1
    assert int.from_bytes(buf[8:16], "little") == 1
    assert int.from_bytes(buf[16:20], "little") == 2 and buf[20:22] == b"ab"
    assert int.from_bytes(buf[22:26], "little") == 2
    assert buf[42] == 0
    assert np.frombuffer(buf[43:], "<f4").tolist() == [1.0]


def test_checkpoint_rejects_corruption():
    buf = checkpoint.dumps({"w": np.ones(4)})
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(b"XXXX" + buf[4:])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(buf[:-3])
