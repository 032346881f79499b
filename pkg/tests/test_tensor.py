import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from depthup import tensor as tc
from depthup.tensor import Tensor

STEP = 1e-3
TOL = 1e-4


def t64(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, dtype=np.float64)


def weighted_sum(out: Tensor, w: np.ndarray) -> Tensor:
    """Scalar probe sum(out * w) so every output element matters."""
    return tc.sum_all(tc.mul(out, Tensor(w)))


# --- matmul -----------------------------------------------------------------


def test_matmul_identity():
    a = Tensor([[1.0, 0.0], [0.0, 1.0]])
    b = Tensor([[3.0, 4.0], [5.0, 6.0]])
    np.testing.assert_array_equal(tc.matmul(a, b).data, [[3, 4], [5, 6]])


def test_matmul_scalar():
    assert tc.matmul(Tensor([[2.0]]), Tensor([[3.0]])).data.tolist() == [[6.0]]


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(3, 4\).*\(3, 2\)"):
        tc.matmul(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 2))))


def test_matmul_grad_of_sum_matches_finite_differences():
    rng = np.random.default_rng(0)
    a, b = t64(rng, 3, 4), t64(rng, 4, 2)
    a.requires_grad = True
    tc.sum_all(tc.matmul(a, b)).backward()
    numeric = tc.numerical_gradient(lambda: float(tc.matmul(a, b).data.sum()), a.data, STEP)
    assert tc.relative_error(a.grad, numeric) <= TOL
    np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T, rtol=1e-12)


# --- rms_norm ---------------------------------------------------------------


def test_rms_norm_unit_rms_input_is_unchanged():
    out = tc.rms_norm(Tensor(np.ones((1, 4))), Tensor(np.ones(4)), eps=1e-12)
    np.testing.assert_allclose(out.data, np.ones((1, 4)), rtol=1e-6)


def test_rms_norm_zero_input():
    out = tc.rms_norm(Tensor(np.zeros((1, 2))), Tensor(np.ones(2)), eps=1e-5)
    np.testing.assert_array_equal(out.data, 0.0)


def test_rms_norm_rejects_nonpositive_eps():
    with pytest.raises(ValueError):
        tc.rms_norm(Tensor(np.ones((1, 2))), Tensor(np.ones(2)), eps=0.0)


def test_rms_norm_gradients():
    rng = np.random.default_rng(1)
    x, g = t64(rng, 2, 3, 5), t64(rng, 5)
    w = rng.standard_normal((2, 3, 5))
    errs = tc.gradient_check(lambda: weighted_sum(tc.rms_norm(x, g, 1e-5), w), [x, g], STEP)
    assert max(errs.values()) <= TOL


# --- causal depthwise conv ---------------------------------------------------


def test_conv_zero_kernel_gives_zero():
    rng = np.random.default_rng(2)
    x = Tensor(rng.standard_normal((1, 6, 3)))
    out = tc.causal_depthwise_conv(x, Tensor(np.zeros((4, 3))))
    np.testing.assert_array_equal(out.data, 0.0)


def test_conv_identity_tap():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((2, 6, 3)))
    k = np.zeros((4, 3))
    k[-1] = 1.0
    np.testing.assert_array_equal(tc.causal_depthwise_conv(x, Tensor(k)).data, x.data)


def test_conv_channel_mismatch():
    with pytest.raises(ValueError, match="channel"):
        tc.causal_depthwise_conv(Tensor(np.zeros((1, 5, 3))), Tensor(np.zeros((2, 4))))


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((7, 2))
    k = rng.standard_normal((3, 2))
    expected = np.zeros_like(x)
    for t in range(7):
        for j in range(3):
            src = t - 2 + j
            if src >= 0:
                expected[t] += k[j] * x[src]
    out = tc.causal_depthwise_conv(Tensor(x, dtype=np.float64), Tensor(k, dtype=np.float64))
    np.testing.assert_allclose(out.data, expected, rtol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 5), st.integers(2, 8))
def test_conv_is_causal(seed, width, steps):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, steps, 3)).astype(np.float32)
    k = Tensor(rng.standard_normal((width, 3)).astype(np.float32))
    t = int(rng.integers(0, steps - 1))
    before = tc.causal_depthwise_conv(Tensor(x), k).data
    x2 = x.copy()
    x2[0, t + 1 :] += rng.standard_normal(x2[0, t + 1 :].shape).astype(np.float32)
    after = tc.causal_depthwise_conv(Tensor(x2), k).data
    assert before[0, : t + 1].tobytes() == after[0, : t + 1].tobytes()


def test_conv_gradients():
    rng = np.random.default_rng(5)
    x, k = t64(rng, 2, 5, 3), t64(rng, 3, 3)
    w = rng.standard_normal((2, 5, 3))
    errs = tc.gradient_check(lambda: weighted_sum(tc.causal_depthwise_conv(x, k), w), [x, k], STEP)
    assert max(errs.values()) <= TOL


# --- cross entropy -----------------------------------------------------------


def test_cross_entropy_uniform_logits_is_log_vocab():
    logits = Tensor(np.zeros((2, 3, 11)))
    loss = tc.softmax_cross_entropy(logits, np.zeros((2, 3), int), np.ones((2, 3), bool))
    assert float(loss.data) == pytest.approx(np.log(11), rel=1e-6)


def test_cross_entropy_confident_correct_tends_to_zero():
    logits = np.full((1, 2, 5), -1e4, dtype=np.float32)
    logits[0, 0, 3] = logits[0, 1, 1] = 1e4
    loss = tc.softmax_cross_entropy(Tensor(logits), np.array([[3, 1]]), np.ones((1, 2), bool))
    assert float(loss.data) == pytest.approx(0.0, abs=1e-6)


def test_cross_entropy_all_masked_rejected():
    with pytest.raises(ValueError, match="masked"):
        tc.softmax_cross_entropy(Tensor(np.zeros((1, 3, 4))), np.zeros((1, 3), int), np.zeros((1, 3), bool))


def test_cross_entropy_gradient_formula_and_masking():
    rng = np.random.default_rng(6)
    logits = t64(rng, 2, 4, 6)
    targets = rng.integers(0, 6, size=(2, 4))
    mask = np.array([[1, 0, 1, 1], [0, 1, 0, 1]], bool)
    logits.requires_grad = True
    tc.softmax_cross_entropy(logits, targets, mask).backward()
    p = np.exp(logits.data - logits.data.max(-1, keepdims=True))
    p /= p.sum(-1, keepdims=True)
    expected = p - np.eye(6)[targets]
    expected[~mask] = 0.0
    expected /= mask.sum()
    np.testing.assert_allclose(logits.grad, expected, rtol=1e-10, atol=1e-14)
    errs = tc.gradient_check(lambda: tc.softmax_cross_entropy(logits, targets, mask), [logits], STEP)
    assert errs[0] <= TOL


# --- other primitives --------------------------------------------------------


@pytest.mark.parametrize(
    "op",
    [tc.gelu, tc.silu, lambda x: tc.slice_last(x, 1, 3), lambda x: tc.scale(x, -2.5)],
    ids=["gelu", "silu", "slice", "scale"],
)
def test_unary_gradients(op):
    rng = np.random.default_rng(7)
    x = t64(rng, 3, 4)
    w = rng.standard_normal(op(x).shape)
    assert tc.gradient_check(lambda: weighted_sum(op(x), w), [x], STEP)[0] <= TOL


def test_binary_and_structural_gradients():
    rng = np.random.default_rng(8)
    a, b, row = t64(rng, 3, 4), t64(rng, 3, 4), t64(rng, 4)
    table = t64(rng, 5, 4)
    ids = np.array([[0, 3, 3], [4, 0, 1]])
    cond = rng.random((3, 4)) > 0.5
    w = rng.standard_normal((3, 4))
    probes = [
        (lambda: weighted_sum(tc.add(a, row), w), [a, row]),
        (lambda: weighted_sum(tc.mul(a, row), w), [a, row]),
        (lambda: weighted_sum(tc.where(cond, a, b), w), [a, b]),
        (lambda: tc.sum_all(tc.mul(tc.concat([a, b], axis=-1), tc.concat([b, a], axis=-1))), [a, b]),
        (lambda: tc.sum_all(tc.mul(tc.embedding(table, ids), tc.embedding(table, ids))), [table]),
        (lambda: weighted_sum(tc.transpose(tc.transpose(a)), w), [a]),
    ]
    for fn, params in probes:
        assert max(tc.gradient_check(fn, params, STEP).values()) <= TOL


def test_attention_gradients():
    rng = np.random.default_rng(9)
    q, k, v = t64(rng, 2, 4, 8), t64(rng, 2, 4, 8), t64(rng, 2, 4, 8)
    w = rng.standard_normal((2, 4, 8))
    pos = np.arange(4)
    errs = tc.gradient_check(lambda: weighted_sum(tc.causal_attention(q, k, v, 2, pos, 10000.0), w), [q, k, v], STEP)
    assert max(errs.values()) <= TOL


def test_attention_matches_naive_reference():
    rng = np.random.default_rng(10)
    T, d, H = 5, 8, 2
    hd = d // H
    q, k, v = (rng.standard_normal((1, T, d)) for _ in range(3))
    out = tc.causal_attention(Tensor(q, dtype=np.float64), Tensor(k, dtype=np.float64), Tensor(v, dtype=np.float64), H, np.arange(T), 100.0)

    def rope(x, pos):
        half = hd // 2
        freq = 100.0 ** (-np.arange(half) * 2 / hd)
        c, s = np.cos(pos * freq), np.sin(pos * freq)
        return np.concatenate([x[:half] * c - x[half:] * s, x[:half] * s + x[half:] * c])

    ref = np.zeros((T, d))
    for h in range(H):
        sl = slice(h * hd, (h + 1) * hd)
        for t in range(T):
            qt = rope(q[0, t, sl], t)
            scores = np.array([qt @ rope(k[0, u, sl], u) / np.sqrt(hd) for u in range(t + 1)])
            p = np.exp(scores - scores.max())
            p /= p.sum()
            ref[t, sl] = sum(p[u] * v[0, u, sl] for u in range(t + 1))
    np.testing.assert_allclose(out.data[0], ref, rtol=1e-10, atol=1e-12)


# --- engine invariants -------------------------------------------------------


def test_reused_tensor_accumulates_gradients():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True, dtype=np.float64)
    y = tc.sum_all(tc.add(tc.mul(x, x), x))  # sum(x^2 + x)
    y.backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_backward_twice_accumulates_into_leaf():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    tc.sum_all(x).backward()
    tc.sum_all(x).backward()
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_diamond_graph_visits_each_node_once():
    x = Tensor(np.array([3.0]), requires_grad=True, dtype=np.float64)
    a = tc.scale(x, 2.0)
    b = tc.add(a, a)
    c = tc.mul(b, a)  # 2a * a = 8 x^2
    tc.sum_all(c).backward()
    np.testing.assert_allclose(x.grad, [16 * 3.0])


def test_forward_is_deterministic():
    rng = np.random.default_rng(11)
    q, k, v = (Tensor(rng.standard_normal((2, 6, 8)).astype(np.float32)) for _ in range(3))
    a = tc.causal_attention(q, k, v, 2, np.arange(6), 10000.0).data
    b = tc.causal_attention(q, k, v, 2, np.arange(6), 10000.0).data
    assert a.tobytes() == b.tobytes()


def test_float32_is_default():
    assert Tensor([1, 2, 3]).data.dtype == np.float32
    assert tc.matmul(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2)))).data.dtype == np.float64
