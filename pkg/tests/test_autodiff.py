import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from commgame import autodiff as ad
from commgame.autodiff import ParamStore, Tensor


def test_square_value_and_derivative():
    value, grads = ad.grad(lambda x: x * x, {"x": np.array(3.0)})
    assert value == 9.0
    assert grads["x"] == 6.0


def test_softmax_of_zeros_is_uniform():
    y = ad.softmax(Tensor(np.zeros(3))).value
    np.testing.assert_allclose(y, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_softmax_cross_entropy_gradient_closed_form():
    logits = np.array([0.3, -1.2, 2.0, 0.5])
    target = 2

    def nll(l):
        return ad.pick(ad.reshape(ad.log_softmax(l), (1, 4)), [target]) * -1.0

    _, g = ad.grad(lambda l: ad.sum(nll(l)), {"l": logits})
    expected = np.exp(logits) / np.exp(logits).sum()
    expected[target] -= 1.0
    np.testing.assert_allclose(g["l"], expected, atol=1e-14)


def _scalar_two_layer(x, W1, b1, W2, b2):
    hidden = []
    for j in range(len(b1)):
        s = b1[j]
        for i in range(len(x)):
            s += x[i] * W1[i][j]
        hidden.append(math.tanh(s))
    out = b2[0]
    for j in range(len(hidden)):
        out += hidden[j] * W2[j][0]
    return math.tanh(out)


def test_two_layer_tanh_matches_scalar_recomputation():
    rng = np.random.default_rng(11)
    x = rng.normal(size=5)
    W1, b1 = rng.normal(size=(5, 4)), rng.normal(size=4)
    W2, b2 = rng.normal(size=(4, 1)), rng.normal(size=1)
    out = ad.tanh(ad.tanh(Tensor(x) @ Tensor(W1) + Tensor(b1)) @ Tensor(W2) + Tensor(b2))
    expected = _scalar_two_layer(x.tolist(), W1.tolist(), b1.tolist(), W2.tolist(), b2.tolist())
    assert out.value[0] == pytest.approx(expected, rel=1e-14, abs=1e-15)


def test_evaluate_is_bitwise_deterministic():
    rng = np.random.default_rng(3)
    inputs = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4, 2))}

    def f(a, b):
        return ad.softmax(ad.tanh(a @ b))

    v1 = ad.evaluate(f, inputs).value
    v2 = ad.evaluate(f, inputs).value
    assert v1.tobytes() == v2.tobytes()


def test_backward_rejects_non_scalar_root():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(ad.tanh(x))


def test_shape_mismatch_reports_op_and_shapes():
    with pytest.raises(ad.ShapeError) as err:
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    msg = str(err.value)
    assert "matmul" in msg and "(2, 3)" in msg and "(4, 2)" in msg
    with pytest.raises(ad.ShapeError, match="add"):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_shared_subexpression_accumulates():
    # f(x) = (x*x) + (x*x) reuses the node twice -> df/dx = 4x
    def f(x):
        sq = x * x
        return sq + sq

    _, g = ad.grad(f, {"x": np.array(1.5)})
    assert g["x"] == pytest.approx(6.0)


def test_gradient_of_sum_is_sum_of_gradients():
    rng = np.random.default_rng(5)
    inputs = {"a": rng.normal(size=4)}

    def f1(a):
        return ad.sum(ad.tanh(a))

    def f2(a):
        return ad.sum(ad.sigmoid(a) * a)

    _, g1 = ad.grad(f1, inputs)
    _, g2 = ad.grad(f2, inputs)
    _, g12 = ad.grad(lambda a: f1(a) + f2(a), inputs)
    np.testing.assert_allclose(g12["a"], g1["a"] + g2["a"], rtol=1e-14, atol=1e-15)


# Each op paired with a scalar wrapper; inputs are drawn per seed.
OPS = {
    "add_broadcast": (lambda a, b: ad.sum(ad.tanh(a + b)), [(3, 4), (4,)]),
    "sub": (lambda a, b: ad.sum(ad.tanh(a - b)), [(3, 4), (3, 4)]),
    "mul": (lambda a, b: ad.sum(a * b * a), [(2, 5), (1, 5)]),
    "matmul_2d": (lambda a, b: ad.sum(ad.tanh(a @ b)), [(3, 4), (4, 2)]),
    "matmul_3d": (lambda a, b: ad.sum(ad.tanh(a @ b)), [(2, 3, 4), (4, 2)]),
    "matmul_vec": (lambda a, b: ad.sum(ad.tanh(a @ b)), [(2, 3, 4), (4,)]),
    "sigmoid": (lambda a: ad.sum(ad.sigmoid(a) * a), [(6,)]),
    "softmax": (lambda a, b: ad.sum(ad.softmax(a, axis=-1) * b), [(3, 5), (3, 5)]),
    "log_softmax": (lambda a, b: ad.sum(ad.log_softmax(a, axis=-1) * b), [(3, 5), (3, 5)]),
    "log": (lambda a: ad.sum(ad.log(ad.sigmoid(a) + 0.5)), [(5,)]),
    "exp": (lambda a: ad.sum(ad.exp(ad.tanh(a))), [(5,)]),
    "concat": (lambda a, b: ad.sum(ad.tanh(ad.concat([a, b], axis=-1)) * ad.concat([b, a], axis=-1)),
               [(2, 3), (2, 3)]),
    "stack": (lambda a, b: ad.sum(ad.tanh(ad.stack([a, b], axis=1)) * 1.7), [(2, 3), (2, 3)]),
    "getitem": (lambda a: ad.sum(ad.tanh(a[:, 1:3]) * a[:, 0:2]), [(3, 4)]),
    "reshape": (lambda a: ad.sum(ad.tanh(ad.reshape(a, (4, 3))) @ ad.reshape(a, (12,))[:3]), [(3, 4)]),
    "sum_axis": (lambda a: ad.sum(ad.tanh(ad.sum(a, axis=1))), [(3, 4)]),
}


def _numeric_check(fn, shapes, seed):
    rng = np.random.default_rng(seed)
    names = "abcd"[: len(shapes)]
    inputs = {n: rng.normal(size=s) for n, s in zip(names, shapes)}
    _, g = ad.grad(fn, inputs)
    num = ad.numerical_grad(lambda p: ad.evaluate(fn, p).item(), inputs, eps=1e-4)
    for n in names:
        assert ad.relative_error(g[n], num[n], floor=1e-6) <= 1e-4, n


@pytest.mark.parametrize("op", sorted(OPS))
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_op_gradients_match_finite_differences(op, seed):
    fn, shapes = OPS[op]
    _numeric_check(fn, shapes, seed)


def test_embedding_and_pick_gradients():
    rng = np.random.default_rng(9)
    ids = np.array([[0, 2, 2], [1, 0, 3]])

    def f(table, w):
        e = ad.embedding(table, ids)  # [2, 3, 4]
        scores = ad.reshape(e @ w, (2, 3))
        return ad.sum(ad.pick(ad.log_softmax(scores), [1, 2]))

    inputs = {"table": rng.normal(size=(4, 4)), "w": rng.normal(size=4)}
    _, g = ad.grad(f, inputs)
    num = ad.numerical_grad(lambda p: ad.evaluate(f, p).item(), inputs)
    for k in inputs:
        assert ad.relative_error(g[k], num[k], 1e-6) <= 1e-4


def test_masked_sum_ignores_masked_entries():
    mask = np.array([[1.0, 0.0, 1.0]])
    value, g = ad.grad(lambda a: ad.sum(ad.masked_sum(a * a, mask, axis=1)), {"a": np.array([[1.0, 5.0, 2.0]])})
    assert value == 5.0
    np.testing.assert_array_equal(g["a"], [[2.0, 0.0, 4.0]])


def test_embedding_rejects_out_of_range():
    with pytest.raises(IndexError):
        ad.embedding(Tensor(np.zeros((3, 2))), [3])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=8), st.integers(1, 4))
def test_softmax_rows_are_distributions(row, n_rows):
    x = np.tile(np.array(row), (n_rows, 1))
    y = ad.softmax(Tensor(x)).value
    assert (y >= 0).all()
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)
    assert np.isfinite(y).all()


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_sigmoid_and_log_softmax_stay_finite(vals):
    x = Tensor(np.array(vals))
    assert np.isfinite(ad.sigmoid(x).value).all()
    assert np.isfinite(ad.log_softmax(x).value).all()


def test_paramstore_roundtrip_is_exact(tmp_path):
    rng = np.random.default_rng(0)
    store = ParamStore({"w": rng.normal(size=(3, 4)) * 1e-7, "b": np.array([np.pi, -1 / 3]),
                        "s": rng.uniform(-1, 1, size=(5,))}, rng_seed=42)
    path = tmp_path / "p.ckpt"
    store.save(path)
    loaded = ParamStore.load(path)
    assert loaded.equals(store)
    assert loaded.rng_seed == 42
    assert [v.shape for v in loaded.entries.values()] == [v.shape for v in store.entries.values()]


def test_paramstore_rejects_duplicate_names():
    store = ParamStore({"w": np.zeros(2)})
    with pytest.raises(KeyError):
        store.add("w", np.ones(2))


def test_clip_by_global_norm():
    grads = {"a": np.array([3.0, 0.0]), "b": np.array([4.0])}
    clipped = ad.clip_by_global_norm(grads, 1.0)
    assert ad.global_norm(clipped.values()) == pytest.approx(1.0)
    assert ad.clip_by_global_norm(grads, 10.0)["a"] is grads["a"]
