import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lexgen import autodiff as ad
from lexgen.autodiff import Tape, Tensor
from lexgen.errors import ConfigError, DataError, NumericalError, ShapeError, UsageError


def _grad_of(fn, *arrays):
    ts = [ad.parameter(a.copy(), dtype=np.float64) for a in arrays]
    out = fn(*ts)
    Tape.from_output(out).backward(out)
    return [t.grad for t in ts]


def _numeric(fn, *arrays, h=1e-6):
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            args_up = [x.copy() for x in arrays]
            args_dn = [x.copy() for x in arrays]
            args_up[k][idx] += h
            args_dn[k][idx] -= h
            up = fn(*[Tensor(x, dtype=np.float64) for x in args_up]).data
            dn = fn(*[Tensor(x, dtype=np.float64) for x in args_dn]).data
            g[idx] = (float(up) - float(dn)) / (2 * h)
        grads.append(g)
    return grads


def _assert_grads(fn, *arrays, tol=1e-6):
    for a, n in zip(_grad_of(fn, *arrays), _numeric(fn, *arrays)):
        np.testing.assert_allclose(a, n, rtol=tol, atol=tol)


OPS = {
    "add": lambda a, b: ad.sum_(ad.mul(ad.add(a, b), ad.add(a, b))),
    "sub": lambda a, b: ad.sum_(ad.mul(ad.sub(a, b), a)),
    "mul": lambda a, b: ad.sum_(ad.mul(a, b)),
    "matmul": lambda a, b: ad.sum_(ad.sigmoid(ad.matmul(a, ad.transpose(b, (1, 0))))),
    "relu": lambda a, b: ad.sum_(ad.mul(ad.relu(a), b)),
    "sigmoid": lambda a, b: ad.sum_(ad.mul(ad.sigmoid(a), b)),
    "softmax": lambda a, b: ad.sum_(ad.mul(ad.softmax(a, -1), b)),
    "log_softmax": lambda a, b: ad.sum_(ad.mul(ad.log_softmax(a, -1), b)),
    "mean": lambda a, b: ad.mean(ad.mul(a, ad.mul(a, b))),
    "reshape": lambda a, b: ad.sum_(ad.mul(ad.reshape(a, (-1,)), ad.reshape(b, (-1,)))),
}


@pytest.mark.parametrize("op", sorted(OPS))
@pytest.mark.parametrize("seed", range(20))
def test_op_gradients_match_central_differences(op, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))
    _assert_grads(OPS[op], a, b)


@pytest.mark.parametrize("seed", range(20))
def test_layer_norm_gradients(seed):
    rng = np.random.default_rng(seed)
    x, g, b, w = rng.normal(size=(3, 5)), rng.normal(size=5), rng.normal(size=5), rng.normal(size=(3, 5))
    fn = lambda x, g, b: ad.sum_(ad.mul(ad.layer_norm(x, g, b), Tensor(w, dtype=np.float64)))
    _assert_grads(fn, x, g, b)


def test_broadcast_add_unbroadcasts_gradient():
    rng = np.random.default_rng(0)
    x, bias = rng.normal(size=(2, 3, 4)), rng.normal(size=4)
    fn = lambda x, bias: ad.sum_(ad.mul(ad.add(x, bias), ad.add(x, bias)))
    _assert_grads(fn, x, bias)


def test_batched_matmul_gradients():
    rng = np.random.default_rng(1)
    a, w = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
    _assert_grads(lambda a, w: ad.sum_(ad.sigmoid(ad.matmul(a, w))), a, w)


def test_embedding_gradient_accumulates_repeated_ids():
    table = ad.parameter(np.arange(12.0).reshape(4, 3), dtype=np.float64)
    out = ad.sum_(ad.embedding(table, np.array([[1, 1, 3]])))
    Tape.from_output(out).backward(out)
    np.testing.assert_array_equal(table.grad, [[0, 0, 0], [2, 2, 2], [0, 0, 0], [1, 1, 1]])


def test_label_smoothed_ce_matches_explicit_formula():
    rng = np.random.default_rng(2)
    logits = rng.normal(size=(2, 3, 6))
    targets = np.array([[1, 2, 0], [4, 0, 0]])
    eps, v = 0.1, 6
    got = ad.cross_entropy_label_smoothed(Tensor(logits, dtype=np.float64), targets, eps, pad_id=0).item()
    total, n = 0.0, 0
    for i in range(2):
        for j in range(3):
            if targets[i, j] == 0:
                continue
            row = logits[i, j]
            logp = row - np.log(np.sum(np.exp(row)))
            q = np.full(v, eps / (v - 1))
            q[targets[i, j]] = 1 - eps
            total += -np.dot(q, logp)
            n += 1
    assert got == pytest.approx(total / n, rel=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_label_smoothed_ce_gradient(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(2, 3, 5))
    targets = np.array([[1, 2, 0], [4, 3, 0]])
    _assert_grads(lambda x: ad.cross_entropy_label_smoothed(x, targets, 0.1, pad_id=0), logits)


def test_label_smoothed_ce_rejects_out_of_range_target():
    with pytest.raises(DataError):
        ad.cross_entropy_label_smoothed(Tensor(np.zeros((1, 2, 4))), np.array([[1, 9]]), 0.1)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-50, 50))
def test_softmax_rows_sum_to_one_and_shift_invariant(seed, shift):
    x = np.random.default_rng(seed).normal(scale=10, size=(4, 7))
    p = ad.softmax(Tensor(x, dtype=np.float64)).data
    q = ad.softmax(Tensor(x + shift, dtype=np.float64)).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p, q, atol=1e-12)


def test_softmax_handles_extreme_logits():
    p = ad.softmax(Tensor(np.array([[1000.0, -1000.0, 0.0]]), dtype=np.float64)).data
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p, [[1.0, 0.0, 0.0]])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_layer_norm_normalises_each_row(seed):
    x = np.random.default_rng(seed).normal(loc=3, scale=5, size=(5, 16))
    y = ad.layer_norm(Tensor(x, dtype=np.float64), Tensor(np.ones(16)), Tensor(np.zeros(16)), eps=1e-12).data
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-9)
    np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-6)


def test_sigmoid_is_stable_for_large_inputs():
    y = ad.sigmoid(Tensor(np.array([-800.0, 0.0, 800.0]), dtype=np.float64)).data
    np.testing.assert_allclose(y, [0.0, 0.5, 1.0])


def test_dropout_eval_is_identity_and_train_preserves_expectation():
    x = Tensor(np.ones((200, 200)))
    assert ad.dropout(x, 0.3, None, train=False) is x
    y = ad.dropout(x, 0.3, np.random.default_rng(0), train=True).data
    assert set(np.unique(y).round(6)) <= {0.0, round(1 / 0.7, 6)}
    assert y.mean() == pytest.approx(1.0, abs=0.02)
    with pytest.raises(ConfigError):
        ad.dropout(x, 1.0, np.random.default_rng(0), train=True)


def test_shape_errors():
    with pytest.raises(ShapeError, match="matmul"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_backward_requires_scalar_loss():
    x = ad.parameter(np.ones(3))
    y = ad.mul(x, x)
    with pytest.raises(UsageError):
        Tape.from_output(y).backward(y)


def test_no_grad_records_nothing():
    x = ad.parameter(np.ones(3))
    with ad.no_grad():
        y = ad.mul(x, x)
    assert not y.requires_grad and y._parents == ()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_check_finite_flags_nan():
    with ad.check_finite():
        with pytest.raises(NumericalError):
            ad.mul(Tensor(np.array([np.inf])), Tensor(np.array([0.0])))


def test_shared_subexpression_gradient_accumulates():
    x = ad.parameter(np.array([2.0]), dtype=np.float64)
    y = ad.mul(x, x)
    out = ad.sum_(ad.add(y, y))
    Tape.from_output(out).backward(out)
    assert x.grad[0] == pytest.approx(8.0)


def test_default_dtype_is_float32_for_python_values():
    assert Tensor([1.0, 2.0]).dtype == np.float32
    assert Tensor(np.zeros(2)).dtype == np.float64
