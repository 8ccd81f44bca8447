import math

import numpy as np
import pytest

from ecocast import tensor as T
from gradcheck import check_grad, finite_diff, rel_err


def test_matmul_identity():
    a = T.Tensor([[1.0, 0.0], [0.0, 1.0]])
    b = T.Tensor([[5.0, 6.0], [7.0, 8.0]])
    out = T.matmul(a, b)
    assert np.array_equal(out.data, [[5.0, 6.0], [7.0, 8.0]])


def test_matmul_hand_case():
    out = T.matmul(T.Tensor([[1.0, 2.0]]), T.Tensor([[3.0], [4.0]]))
    # 1*3 + 2*4 = 11
    assert out.data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ValueError) as e:
        T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 3))))
    assert "(2, 3)" in str(e.value)


def test_matmul_grad_matches_finite_differences():
    # grad of sum(a @ b) w.r.t. a at a=[[1,2]], b=[[3],[4]] is [[3,4]]
    b = np.array([[3.0], [4.0]])

    def build(arr):
        a = T.Tensor(arr, requires_grad=True)
        return T.tsum(T.matmul(a, T.Tensor(b))), a

    a0 = np.array([[1.0, 2.0]])
    check_grad(build, a0)
    loss, a = build(a0)
    T.backward(loss)
    assert np.allclose(a.grad, [[3.0, 4.0]])


def test_softmax_uniform_and_hand_values():
    out = T.softmax(T.Tensor([0.0, 0.0, 0.0]))
    assert np.allclose(out.data, [1 / 3] * 3, atol=1e-12)
    out2 = T.softmax(T.Tensor([2.0, 1.0]))
    e2, e1 = math.exp(2.0), math.exp(1.0)
    assert np.allclose(out2.data, [e2 / (e2 + e1), e1 / (e2 + e1)], atol=1e-9)
    assert abs(out2.data[0] - 0.731059) < 1e-6


def test_softmax_sentinel_entries_are_exact_zero():
    x = T.Tensor([T.SENTINEL, 2.0, 1.0, T.SENTINEL])
    out = T.softmax(x)
    assert out.data[0] == 0.0 and out.data[3] == 0.0
    e2, e1 = math.exp(2.0), math.exp(1.0)
    assert np.allclose(out.data[1:3], [e2 / (e2 + e1), e1 / (e2 + e1)], atol=1e-9)
    assert abs(out.data.sum() - 1.0) <= 1e-12


def test_softmax_all_excluded_raises():
    with pytest.raises(ValueError):
        T.softmax(T.Tensor([T.SENTINEL, T.SENTINEL]))


def test_softplus_values_and_grad():
    assert abs(T.softplus(T.Tensor(0.0)).item() - math.log(2.0)) < 1e-12
    assert abs(T.softplus(T.Tensor(100.0)).item() - 100.0) < 1e-9
    x = T.Tensor(0.0, requires_grad=True)
    T.backward(T.softplus(x))
    assert abs(x.grad.item() - 0.5) < 1e-12


def test_concat_and_mean():
    out = T.concat([T.Tensor([1.0, 2.0]), T.Tensor([3.0])], axis=0)
    assert out.data.tolist() == [1.0, 2.0, 3.0]
    assert T.tmean(T.Tensor([2.0, 4.0])).item() == 3.0


def test_layer_norm_hand_case():
    x = T.Tensor([1.0, 2.0, 3.0])
    out = T.layer_norm(x, T.Tensor(np.ones(3)), T.Tensor(np.zeros(3)))
    # (x - mean) / sqrt(population var + eps)
    expect = (np.array([1.0, 2.0, 3.0]) - 2.0) / math.sqrt(2.0 / 3.0 + 1e-5)
    assert np.allclose(out.data, expect, atol=1e-12)
    assert np.allclose(out.data, [-1.224745, 0.0, 1.224745], atol=1e-4)


def test_backward_sum_gives_ones():
    x = T.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    T.backward(T.tsum(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_sum_of_squares():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    T.backward(T.tsum(T.mul(x, x)))
    assert np.allclose(x.grad, [2.0, 4.0])


def test_backward_rejects_nonscalar():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        T.backward(T.add(x, x))


def test_backward_accumulates_through_shared_subgraph():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    y = T.mul(x, 3.0)
    T.backward(T.tsum(T.add(y, y)))
    assert np.allclose(x.grad, [6.0, 6.0])


def test_no_grad_blocks_recording():
    x = T.Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = T.mul(x, 2.0)
    assert y._backward is None and not y.requires_grad


def test_scatter_and_take_rows_grads():
    def build_take(arr):
        x = T.Tensor(arr, requires_grad=True)
        return T.tsum(T.mul(T.take_rows(x, [2, 0, 2]), 1.5)), x

    check_grad(build_take, np.arange(12.0).reshape(4, 3))

    rows0 = np.array([[9.0, 9.0, 9.0]])

    def build_scatter(arr):
        x = T.Tensor(arr, requires_grad=True)
        out = T.scatter_rows(x, [1], T.Tensor(rows0))
        return T.tsum(T.mul(out, out)), x

    check_grad(build_scatter, np.arange(9.0).reshape(3, 3))


def test_topk_mask_keeps_k_and_breaks_ties_low():
    # three-way tie at the k-th value: lower indices win
    out = T.topk_mask(T.Tensor([3.0, 1.0, 3.0, 3.0]), 2)
    assert out.data[0] == 3.0 and out.data[2] == 3.0
    assert out.data[1] == T.SENTINEL and out.data[3] == T.SENTINEL
    out1 = T.topk_mask(T.Tensor([2.0, 5.0, 5.0]), 1)
    assert out1.data[1] == 5.0 and out1.data[2] == T.SENTINEL


def test_embedding_lookup_grad_scatter():
    table = T.Tensor(np.ones((4, 2)), requires_grad=True)
    out = T.embedding_lookup(table, [1, 1, 3])
    T.backward(T.tsum(out))
    assert np.array_equal(table.grad, [[0, 0], [2, 2], [0, 0], [1, 1]])


DIFF_OPS = {
    "add": lambda x: T.add(x, T.Tensor(np.linspace(-1, 1, x.size).reshape(x.shape))),
    "add_bias": lambda x: T.add(x, T.Tensor(np.linspace(-1, 1, x.shape[-1]))),
    "sub": lambda x: T.sub(x, T.Tensor(np.linspace(0.5, 1.5, x.size).reshape(x.shape))),
    "mul": lambda x: T.mul(x, T.Tensor(np.linspace(-2, 2, x.size).reshape(x.shape))),
    "mul_scalar": lambda x: T.mul(x, 1.7),
    "relu": T.relu,
    "gelu": T.gelu,
    "softplus": T.softplus,
    "softmax": lambda x: T.softmax(x, axis=-1),
    "mean_all": T.tmean,
    "mean_axis": lambda x: T.tmean(x, axis=0),
    "sum_axis": lambda x: T.tsum(x, axis=1),
    "layer_norm": lambda x: T.layer_norm(
        x, T.Tensor(np.linspace(0.5, 1.5, x.shape[-1])), T.Tensor(np.linspace(-0.2, 0.2, x.shape[-1]))),
    "reshape": lambda x: T.mul(T.reshape(x, (x.size,)), T.Tensor(np.linspace(-1, 1, x.size))),
    "transpose": lambda x: T.mul(T.transpose(x, (1, 0)), 0.5),
    "concat": lambda x: T.concat([x, T.mul(x, 2.0)], axis=0),
    "matmul": lambda x: T.matmul(x, T.Tensor(np.linspace(-1, 1, x.shape[1] * 2).reshape(x.shape[1], 2))),
    "sqrt_of_softplus": lambda x: T.sqrt(T.softplus(x)),
}


@pytest.mark.parametrize("name", sorted(DIFF_OPS))
def test_every_differentiable_op_matches_finite_differences(name):
    # random inputs in [-2, 2]; rel err <= 1e-4 with denominator max(|a|,|b|,1e-8)
    rng = np.random.default_rng(1234)
    op = DIFF_OPS[name]
    for _ in range(3):
        x0 = rng.uniform(-2.0, 2.0, size=(3, 4))

        def build(arr):
            x = T.Tensor(arr, requires_grad=True)
            out = op(x)
            w = T.Tensor(np.linspace(0.3, 1.1, out.size).reshape(out.shape))
            return T.tsum(T.mul(out, w)), x

        check_grad(build, x0)


def test_forward_determinism_bit_identical():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(5, 6))
    b = rng.normal(size=(6, 3))

    def run():
        x = T.gelu(T.matmul(T.Tensor(a), T.Tensor(b)))
        y = T.softmax(x, axis=-1)
        return T.layer_norm(y, T.Tensor(np.ones(3)), T.Tensor(np.zeros(3))).data

    r1, r2 = run(), run()
    assert r1.tobytes() == r2.tobytes()


def test_softmax_sums_to_one_along_axis():
    rng = np.random.default_rng(99)
    for _ in range(20):
        x = rng.normal(scale=3.0, size=(4, 7))
        s = T.softmax(T.Tensor(x), axis=-1).data.sum(axis=-1)
        assert np.all(np.abs(s - 1.0) <= 1e-12)


def test_composed_graph_gradcheck():
    rng = np.random.default_rng(5)
    w1 = rng.normal(size=(4, 8))
    w2 = rng.normal(size=(8, 1))

    def build(arr):
        x = T.Tensor(arr, requires_grad=True)
        h = T.gelu(T.matmul(x, T.Tensor(w1)))
        h = T.layer_norm(h, T.Tensor(np.ones(8)), T.Tensor(np.zeros(8)))
        out = T.matmul(h, T.Tensor(w2))
        return T.sqrt(T.softplus(T.tmean(T.mul(out, out)))), x

    check_grad(build, rng.uniform(-2, 2, size=(3, 4)))
