import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmseq import kernel as K
from mmseq.kernel import ShapeError, Tensor


def P(x):
    return K.parameter(np.array(x, dtype=np.float64))


def test_matmul_identity_and_hand_case():
    B = np.random.default_rng(0).normal(size=(3, 5))
    assert np.array_equal(K.matmul(Tensor(np.eye(3)), Tensor(B)).data, B)
    out = K.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    assert np.array_equal(out.data, [[3.0], [7.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\[2, 3\].*\[4, 5\]"):
        K.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


def test_matmul_gradcheck():
    rng = np.random.default_rng(1)
    a, b = P(rng.normal(size=(4, 5))), P(rng.normal(size=(5, 3)))
    w = rng.normal(size=(4, 3))
    errs = K.gradcheck(lambda: K.tsum(K.matmul(a, b) * Tensor(w)), [a, b])
    assert max(errs) < 1e-6


def test_matmul_gradient_formulas():
    rng = np.random.default_rng(2)
    a, b = P(rng.normal(size=(3, 4))), P(rng.normal(size=(4, 2)))
    g = rng.normal(size=(3, 2))
    K.backward(K.tsum(K.matmul(a, b) * Tensor(g)))
    assert np.allclose(a.grad, g @ b.data.T, atol=1e-14)
    assert np.allclose(b.grad, a.data.T @ g, atol=1e-14)


def test_softmax_examples():
    assert np.allclose(K.softmax(Tensor(np.zeros(4))).data, 0.25)
    out = K.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out)) and out[0] == 1.0 and out[1] < 1e-300
    rng = np.random.default_rng(3)
    x = P(rng.normal(size=(3, 5)))
    w = rng.normal(size=(3, 5))
    assert max(K.gradcheck(lambda: K.tsum(K.softmax(x) * Tensor(w)), [x])) < 1e-6


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8), st.integers(1, 8), st.floats(0.1, 50))
def test_softmax_rows_sum_to_one(seed, rows, cols, spread):
    x = np.random.default_rng(seed).normal(size=(rows, cols)) * spread
    s = K.softmax(Tensor(x)).data
    assert np.all(np.abs(s.sum(-1) - 1.0) <= 1e-12)
    assert np.all((s >= 0) & (s <= 1))


def test_softmax_outputs_strictly_inside_unit_interval_for_moderate_inputs():
    s = K.softmax(Tensor(np.random.default_rng(0).normal(size=(5, 7)))).data
    assert np.all((s > 0) & (s < 1))


def test_layer_norm_examples():
    out = K.layer_norm(Tensor(np.full((1, 6), 3.0)), Tensor(np.ones(6)), Tensor(np.zeros(6)))
    assert np.array_equal(out.data, np.zeros((1, 6)))
    rng = np.random.default_rng(4)
    y = K.layer_norm(Tensor(rng.normal(size=(5, 8)) * 7 + 3), Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    assert np.all(np.abs(y.mean(-1)) < 1e-10)
    x, g, b = P(rng.normal(size=(3, 6))), P(rng.normal(size=6)), P(rng.normal(size=6))
    w = rng.normal(size=(3, 6))
    assert max(K.gradcheck(lambda: K.tsum(K.layer_norm(x, g, b) * Tensor(w)), [x, g, b])) < 1e-6


def test_layer_norm_rejects_mismatched_gain():
    with pytest.raises(ShapeError):
        K.layer_norm(Tensor(np.ones((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(3)))


def test_cross_entropy_examples():
    logits = np.full((3, 5), -1e4)
    tgt = np.array([1, 4, 0])
    logits[np.arange(3), tgt] = 1e4
    assert K.cross_entropy(Tensor(logits), tgt).item() < 1e-12
    assert abs(K.cross_entropy(Tensor(np.zeros((6, 4))), np.zeros(6, dtype=int)).item() - np.log(4)) < 1e-12
    rng = np.random.default_rng(5)
    x = P(rng.normal(size=(7, 9)))
    t = rng.integers(0, 9, size=7)
    assert max(K.gradcheck(lambda: K.cross_entropy(x, t), [x])) < 1e-6


def test_cross_entropy_mask_excludes_positions():
    rng = np.random.default_rng(6)
    logits = rng.normal(size=(2, 3, 5))
    tgt = rng.integers(0, 5, size=(2, 3))
    mask = np.array([[1, 0, 1], [0, 0, 1]], dtype=bool)
    ls = logits - logits.max(-1, keepdims=True)
    ls = ls - np.log(np.exp(ls).sum(-1, keepdims=True))
    want = -np.mean([ls[b, p, tgt[b, p]] for b, p in zip(*np.nonzero(mask))])
    assert abs(K.cross_entropy(Tensor(logits), tgt, mask).item() - want) < 1e-12


def test_cross_entropy_empty_mask_is_zero_with_zero_grad():
    x = P(np.random.default_rng(7).normal(size=(3, 4)))
    loss = K.cross_entropy(x, np.zeros(3, dtype=int), np.zeros(3, dtype=bool))
    assert loss.item() == 0.0
    K.backward(loss)
    assert x.grad is None or not x.grad.any()


def test_cross_entropy_rejects_out_of_range_target():
    with pytest.raises(ValueError):
        K.cross_entropy(Tensor(np.zeros((2, 4))), np.array([0, 4]))


def test_mse_examples():
    p = P([1.0, 1.0])
    assert K.mse(p, np.array([1.0, 1.0])).item() == 0.0
    loss = K.mse(p, np.array([0.0, 0.0]))
    assert loss.item() == 1.0
    K.backward(loss)
    assert np.array_equal(p.grad, 2 * (p.data - 0.0) / 2)
    with pytest.raises(ShapeError):
        K.mse(p, np.zeros(3))


def test_backward_linear_and_constant_graph():
    x = P(2.0)
    K.backward(K.scale(x, 3.0))
    assert x.grad == 3.0
    c = Tensor(np.ones(3))
    assert K.backward(K.tsum(c * c)) is None
    assert c.grad is None


def test_backward_rejects_non_scalar():
    with pytest.raises(ValueError):
        K.backward(K.scale(P([1.0, 2.0]), 2.0))


def test_two_layer_mlp_gradcheck():
    rng = np.random.default_rng(8)
    x = Tensor(rng.normal(size=(5, 4)))
    W1, b1 = P(rng.normal(size=(4, 6))), P(rng.normal(size=6))
    W2, b2 = P(rng.normal(size=(6, 3))), P(rng.normal(size=3))
    t = rng.integers(0, 3, size=5)

    def f():
        return K.cross_entropy(K.matmul(K.tanh(K.matmul(x, W1) + b1), W2) + b2, t)

    assert max(K.gradcheck(f, [W1, b1, W2, b2])) < 1e-5


def test_tape_replay_twice_doubles_gradients():
    rng = np.random.default_rng(9)
    a = P(rng.normal(size=(3, 3)))
    loss = K.tsum(K.tanh(K.matmul(a, a)))
    tape = K.Tape(loss)
    tape.run()
    once = a.grad.copy()
    tape.run()
    assert np.allclose(a.grad, 2 * once, rtol=0, atol=1e-15)


def test_tape_is_topologically_ordered():
    a = P([1.0, 2.0])
    b = K.exp(a)
    c = b * b + a
    loss = K.tsum(c)
    order = K.Tape(loss).nodes
    pos = {id(n): i for i, n in enumerate(order)}
    for n in order:
        for p in n._parents:
            if id(p) in pos:
                assert pos[id(p)] < pos[id(n)]


def test_finite_diff_examples():
    x = P([1.0, 2.0])
    g = K.finite_diff_grad(lambda t: K.tsum(t * t), x)
    assert np.allclose(g, [2.0, 4.0], atol=1e-8)
    assert not K.finite_diff_grad(lambda t: Tensor(5.0), x).any()
    rng = np.random.default_rng(10)
    A, B = P(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(4, 4)))
    C = Tensor(rng.normal(size=(4, 2)))

    def chain(t):
        return K.tsum(K.matmul(K.matmul(t, B), C))

    K.backward(chain(A))
    assert K.relative_error(A.grad, K.finite_diff_grad(chain, A)) < 1e-6


def test_matmul_associativity():
    rng = np.random.default_rng(11)
    A, B, C = (Tensor(rng.uniform(-1, 1, size=s)) for s in ((4, 5), (5, 6), (6, 3)))
    lhs = K.matmul(K.matmul(A, B), C).data
    rhs = K.matmul(A, K.matmul(B, C)).data
    assert np.abs(lhs - rhs).max() < 1e-9


def test_backward_is_deterministic():
    def grads():
        rng = np.random.default_rng(12)
        a = P(rng.normal(size=(4, 4)))
        K.backward(K.tsum(K.softmax(K.matmul(a, a))))
        return a.grad

    assert np.array_equal(grads(), grads())


def test_forward_ops_stay_finite():
    rng = np.random.default_rng(13)
    x = Tensor(rng.normal(size=(4, 6)) * 30)
    for y in (K.softmax(x), K.log_softmax(x), K.tanh(x), K.gelu(x), K.relu(x),
              K.layer_norm(x, Tensor(np.ones(6)), Tensor(np.zeros(6)))):
        assert np.all(np.isfinite(y.data))


def test_broadcast_policy_rejects_non_suffix_shapes():
    with pytest.raises(ShapeError):
        K.add(Tensor(np.ones((3, 1))), Tensor(np.ones((3, 4))))
    assert K.add(Tensor(np.ones((2, 3, 4))), Tensor(np.ones(4))).shape == (2, 3, 4)


def test_grad_matches_shape():
    rng = np.random.default_rng(14)
    a, b = P(rng.normal(size=(2, 3, 4))), P(rng.normal(size=4))
    K.backward(K.tsum(K.mul(a, b)))
    assert a.grad.shape == a.shape and b.grad.shape == b.shape


def test_every_op_gradchecks_over_20_seeds():
    from mmseq.gradsuite import OP_CASES, check_op
    worst = {n: max(check_op(n, s) for s in range(20)) for n in OP_CASES}
    assert max(worst.values()) < 1e-5, worst


def test_mmt1_layout_and_roundtrip(tmp_path):
    arr = np.arange(6, dtype=np.float64).reshape(2, 3) / 7
    buf = K.dumps(arr)
    assert buf[:4] == b"MMT1"
    assert int.from_bytes(buf[4:8], "little") == 2
    assert int.from_bytes(buf[8:12], "little") == 2 and int.from_bytes(buf[12:16], "little") == 3
    assert np.frombuffer(buf[16:], "<f8").tolist() == arr.ravel().tolist()
    K.save(tmp_path / "a.mmt", arr)
    assert np.array_equal(K.load(tmp_path / "a.mmt"), arr)


def test_mmt1_rejects_bad_input():
    with pytest.raises(ValueError):
        K.loads(b"XXXX" + bytes(8))
    with pytest.raises(ValueError):
        K.loads(K.dumps(np.ones(3))[:-1])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=0, max_size=4), st.integers(0, 1000))
def test_mmt1_roundtrip_property(shape, seed):
    arr = np.random.default_rng(seed).normal(size=shape)
    assert np.array_equal(K.loads(K.dumps(arr)), arr)
