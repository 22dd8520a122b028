import math

import numpy as np
import pytest

from fusionrank import flops
from fusionrank import tensor as T
from fusionrank.params import ParameterSet, load_arrays, save_arrays
from fusionrank.tensor import (
    GraphError,
    MaskError,
    ShapeError,
    Tensor,
    backward,
    cross_entropy,
    layer_norm,
    masked_softmax,
    matmul,
    softmax_rows,
    token_cross_entropy,
)
from fusionrank.transformer import AttentionParams, multi_head_attention

RNG = np.random.default_rng(0)


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


def numeric_grad(make_loss, param: Tensor, h: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        with T.no_grad():
            f_plus = make_loss().item()
        flat[i] = orig - h
        with T.no_grad():
            f_minus = make_loss().item()
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def check_grads(make_loss, params: list[Tensor], tol: float = 1e-4):
    for p in params:
        p.grad = None
    loss = make_loss()
    backward(loss)
    for p in params:
        assert p.grad is not None, "missing gradient"
        num = numeric_grad(make_loss, p)
        assert rel_err(p.grad, num) < tol


# -- matmul ------------------------------------------------------------------


def test_matmul_identity():
    b = Tensor(RNG.normal(size=(3, 4)))
    out = matmul(Tensor(np.eye(3)), b)
    np.testing.assert_array_equal(out.data, b.data)


def test_matmul_spec_example():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = matmul(a, Tensor(np.eye(2)))
    np.testing.assert_array_equal(out.data, [[1.0, 2.0], [3.0, 4.0]])


def test_matmul_matches_triple_loop_oracle():
    a = RNG.normal(size=(4, 5))
    b = RNG.normal(size=(5, 3))
    expected = np.zeros((4, 3))
    for i in range(4):
        for j in range(3):
            for k in range(5):
                expected[i, j] += a[i, k] * b[k, j]
    out = matmul(Tensor(a), Tensor(b))
    assert np.abs(out.data - expected).max() < 1e-12


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_flop_counter_counts_exactly_2mnk():
    counter = flops.FlopCounter()
    shapes = [((3, 4), (4, 5)), ((7, 2), (2, 2)), ((1, 8), (8, 1))]
    expected = sum(2 * m * n * k for (m, k), (_, n) in shapes)
    with flops.active(counter):
        for sa, sb in shapes:
            matmul(Tensor(RNG.normal(size=sa)), Tensor(RNG.normal(size=sb)))
    assert counter.total == expected


def test_flop_counter_batched_matmul():
    counter = flops.FlopCounter()
    with flops.active(counter):
        matmul(Tensor(RNG.normal(size=(6, 3, 4))), Tensor(RNG.normal(size=(4, 5))))
    assert counter.total == 2 * 6 * 3 * 5 * 4


def test_no_counter_means_no_charge():
    counter = flops.FlopCounter()
    matmul(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2))))
    assert counter.total == 0


# -- softmax -------------------------------------------------------------------


def test_softmax_uniform_row():
    out = softmax_rows(Tensor([[0.0, 0.0, 0.0, 0.0]]))
    np.testing.assert_allclose(out.data, [[0.25] * 4], atol=1e-15)


def test_softmax_spiked_row():
    out = softmax_rows(Tensor([[10.0, 0.0, 0.0, 0.0]]))
    expected = 1.0 / (1.0 + 3.0 * math.exp(-10.0))
    assert abs(out.data[0, 0] - expected) < 1e-15
    assert abs(expected - 0.99986) < 1e-4


def test_softmax_shift_invariance():
    for c in (-3.0, 0.0, 17.5, 1e6):
        base = softmax_rows(Tensor([[0.0, 1.0]]))
        shifted = softmax_rows(Tensor([[c, c + 1.0]]))
        np.testing.assert_allclose(shifted.data, base.data, atol=1e-12)


def test_softmax_rows_sum_to_one():
    x = Tensor(RNG.normal(scale=30.0, size=(8, 6)))
    out = softmax_rows(x)
    assert np.abs(out.data.sum(axis=-1) - 1.0).max() <= 1e-12
    assert (out.data >= 0).all()


# -- layer norm -----------------------------------------------------------------


def test_layer_norm_constant_vector_zeroes_out():
    gain = Tensor(np.ones(4))
    bias = Tensor(np.zeros(4))
    out = layer_norm(Tensor([[5.0, 5.0, 5.0, 5.0]]), gain, bias)
    np.testing.assert_allclose(out.data, 0.0, atol=1e-9)


def test_layer_norm_two_point_closed_form():
    out = layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
    # mean 2, var 1; eps pulls the magnitude just under 1
    np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-6)
    assert abs(out.data[0, 1]) < 1.0


def test_layer_norm_zero_gain_returns_bias():
    bias = Tensor(np.array([1.0, 2.0, 3.0]))
    out = layer_norm(Tensor(RNG.normal(size=(4, 3))), Tensor(np.zeros(3)), bias)
    np.testing.assert_array_equal(out.data, np.broadcast_to(bias.data, (4, 3)))


def test_layer_norm_normalizes_before_affine():
    x = Tensor(RNG.normal(size=(5, 8)) * 3 + 1)
    out = layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8)))
    assert np.abs(out.data.mean(axis=-1)).max() < 1e-10
    assert np.abs(out.data.var(axis=-1) - 1.0).max() < 1e-5  # eps=1e-6 shrinks var slightly


def test_layer_norm_width_mismatch():
    with pytest.raises(ShapeError):
        layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(4)), Tensor(np.zeros(4)))


# -- attention --------------------------------------------------------------------


def _identity_attn(h: int) -> AttentionParams:
    eye = lambda: Tensor(np.eye(h))
    return AttentionParams(wq=eye(), wk=eye(), wv=eye(), wo=eye())


def test_attention_single_key_returns_value():
    h = 4
    q = Tensor(RNG.normal(size=(3, h)))
    k = Tensor(RNG.normal(size=(1, h)))
    v = Tensor(RNG.normal(size=(1, h)))
    out = multi_head_attention(q, k, v, _identity_attn(h), np.ones((3, 1), dtype=bool), n_heads=2)
    np.testing.assert_allclose(out.data, np.broadcast_to(v.data, (3, h)), atol=1e-12)


def test_attention_hand_oracle_two_tokens():
    # one head, width 2, identity projections: plain scaled dot-product
    q = np.array([[1.0, 0.0]])
    k = np.array([[1.0, 0.0], [0.0, 1.0]])
    v = np.array([[2.0, 0.0], [0.0, 4.0]])
    scale = 1.0 / math.sqrt(2.0)
    logits = np.array([1.0 * scale, 0.0])
    w = np.exp(logits - logits.max())
    w = w / w.sum()
    expected = w[0] * v[0] + w[1] * v[1]
    out = multi_head_attention(Tensor(q), Tensor(k), Tensor(v), _identity_attn(2),
                               np.ones((1, 2), dtype=bool), n_heads=1)
    np.testing.assert_allclose(out.data[0], expected, atol=1e-10)


def test_attention_key_permutation_invariance():
    h = 8
    params = AttentionParams(*(Tensor(RNG.normal(size=(h, h))) for _ in range(4)))
    q = Tensor(RNG.normal(size=(3, h)))
    kv = RNG.normal(size=(5, h))
    mask = RNG.random((3, 5)) > 0.3
    mask[:, 0] = True  # keep every row attendable
    perm = RNG.permutation(5)
    out1 = multi_head_attention(q, Tensor(kv), Tensor(kv), params, mask, n_heads=2)
    out2 = multi_head_attention(q, Tensor(kv[perm]), Tensor(kv[perm]), params, mask[:, perm], n_heads=2)
    np.testing.assert_allclose(out1.data, out2.data, atol=1e-12)


def test_attention_all_masked_row_raises():
    h = 4
    q = Tensor(RNG.normal(size=(2, h)))
    kv = Tensor(RNG.normal(size=(3, h)))
    mask = np.ones((2, 3), dtype=bool)
    mask[1, :] = False
    with pytest.raises(MaskError):
        multi_head_attention(q, kv, kv, _identity_attn(h), mask, n_heads=2)


# -- cross entropy ------------------------------------------------------------------


def test_cross_entropy_uniform_logits_one_hot():
    loss = cross_entropy(Tensor(np.zeros(4)), Tensor([1.0, 0.0, 0.0, 0.0]))
    assert abs(loss.item() - math.log(4.0)) < 1e-12


def test_cross_entropy_spiked_logits():
    loss = cross_entropy(Tensor([10.0, 0.0, 0.0, 0.0]), Tensor([1.0, 0.0, 0.0, 0.0]))
    expected = math.log(1.0 + 3.0 * math.exp(-10.0))
    assert abs(loss.item() - expected) < 1e-12
    assert abs(loss.item() - 1.3619e-4) < 1e-8


def test_cross_entropy_two_golds_uniform_logits():
    loss = cross_entropy(Tensor(np.zeros(4)), Tensor([0.5, 0.5, 0.0, 0.0]))
    assert abs(loss.item() - math.log(4.0)) < 1e-12


def test_cross_entropy_rejects_bad_target():
    with pytest.raises(ValueError):
        cross_entropy(Tensor(np.zeros(3)), Tensor([0.5, 0.2, 0.2]))
    with pytest.raises(ValueError):
        cross_entropy(Tensor(np.zeros(3)), Tensor([1.5, -0.5, 0.0]))


def test_token_cross_entropy_matches_single():
    logits = RNG.normal(size=(3, 5))
    targets = np.array([1, 4, 2])
    per_tok = []
    for t in range(3):
        one_hot = np.zeros(5)
        one_hot[targets[t]] = 1.0
        per_tok.append(cross_entropy(Tensor(logits[t]), Tensor(one_hot)).item())
    out = token_cross_entropy(Tensor(logits), targets)
    assert abs(out.item() - np.mean(per_tok)) < 1e-12


# -- backward ------------------------------------------------------------------------


def test_backward_linear_outer_product():
    w = Tensor(RNG.normal(size=(3, 4)), requires_grad=True)
    x = Tensor(RNG.normal(size=(4, 2)))
    loss = matmul(w, x).sum()
    backward(loss)
    # d/dW sum(W x) = outer(1_m, sum of x rows) -> grad[i,k] = sum_j x[k,j]
    expected = np.broadcast_to(x.data.sum(axis=1), (3, 4))
    np.testing.assert_allclose(w.grad, expected, atol=1e-12)


def test_backward_twice_raises():
    w = Tensor(RNG.normal(size=(2, 2)), requires_grad=True)
    loss = matmul(w, Tensor(np.eye(2))).sum()
    backward(loss)
    with pytest.raises(GraphError):
        backward(loss)


def test_backward_without_graph_raises():
    with pytest.raises(GraphError):
        backward(Tensor(1.0))


def test_backward_requires_scalar():
    w = Tensor(RNG.normal(size=(2, 2)), requires_grad=True)
    with pytest.raises(GraphError):
        backward(matmul(w, w))


def test_no_grad_blocks_recording():
    w = Tensor(RNG.normal(size=(2, 2)), requires_grad=True)
    with T.no_grad():
        loss = matmul(w, w).sum()
    assert not loss.requires_grad


# -- finite-difference gradient checks -------------------------------------------------


def test_grad_matmul_add_mul():
    a = Tensor(RNG.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(RNG.normal(size=(4, 3)), requires_grad=True)
    c = Tensor(RNG.normal(size=(3, 3)), requires_grad=True)
    check_grads(lambda: (matmul(a, b) * c + c).sum(), [a, b, c])


def test_grad_div_mean():
    a = Tensor(RNG.normal(size=(4, 4)) + 3.0, requires_grad=True)
    b = Tensor(RNG.normal(size=(4, 4)) + 5.0, requires_grad=True)
    check_grads(lambda: T.div(a, b).mean(), [a, b])


def test_grad_softmax():
    x = Tensor(RNG.normal(size=(5, 7)), requires_grad=True)
    c = RNG.normal(size=(5, 7))
    check_grads(lambda: (softmax_rows(x) * Tensor(c)).sum(), [x])


def test_grad_masked_softmax():
    x = Tensor(RNG.normal(size=(4, 6)), requires_grad=True)
    mask = RNG.random((4, 6)) > 0.3
    mask[:, 2] = True
    c = RNG.normal(size=(4, 6))
    check_grads(lambda: (masked_softmax(x, mask) * Tensor(c)).sum(), [x])


def test_grad_layer_norm():
    x = Tensor(RNG.normal(size=(3, 6)), requires_grad=True)
    g = Tensor(RNG.normal(size=6), requires_grad=True)
    b = Tensor(RNG.normal(size=6), requires_grad=True)
    c = RNG.normal(size=(3, 6))
    check_grads(lambda: (layer_norm(x, g, b) * Tensor(c)).sum(), [x, g, b])


def test_grad_cross_entropy():
    logits = Tensor(RNG.normal(size=8), requires_grad=True)
    target = np.zeros(8)
    target[3] = 1.0
    check_grads(lambda: cross_entropy(logits, Tensor(target)), [logits])


def test_grad_token_cross_entropy():
    logits = Tensor(RNG.normal(size=(4, 6)), requires_grad=True)
    targets = np.array([0, 5, 2, 2])
    weights = np.array([1.0, 1.0, 0.0, 1.0])
    check_grads(lambda: token_cross_entropy(logits, targets, weights), [logits])


def test_grad_activations():
    x = Tensor(RNG.normal(size=(3, 5)) + 0.2, requires_grad=True)  # keep away from kink
    c = RNG.normal(size=(3, 5))
    check_grads(lambda: (T.relu(x) * Tensor(c)).sum(), [x])
    check_grads(lambda: (T.leaky_relu(x, 0.2) * Tensor(c)).sum(), [x])
    check_grads(lambda: (T.elu(x) * Tensor(c)).sum(), [x])
    check_grads(lambda: (T.tanh(x) * Tensor(c)).sum(), [x])


def test_grad_embedding_and_take_rows():
    table = Tensor(RNG.normal(size=(7, 3)), requires_grad=True)
    ids = np.array([[0, 2, 2], [6, 1, 0]])
    c = RNG.normal(size=(2, 3, 3))
    check_grads(lambda: (T.embedding(table, ids) * Tensor(c)).sum(), [table])
    x = Tensor(RNG.normal(size=(5, 4)), requires_grad=True)
    c2 = RNG.normal(size=(3, 4))
    check_grads(lambda: (T.take_rows(x, [4, 0, 4]) * Tensor(c2)).sum(), [x])


def test_grad_concat_reshape_swapaxes():
    a = Tensor(RNG.normal(size=(2, 3)), requires_grad=True)
    b = Tensor(RNG.normal(size=(4, 3)), requires_grad=True)
    c = RNG.normal(size=(6, 3))
    check_grads(lambda: (T.concat([a, b], axis=0) * Tensor(c)).sum(), [a, b])
    x = Tensor(RNG.normal(size=(2, 3, 4)), requires_grad=True)
    c2 = RNG.normal(size=(3, 2, 4))
    check_grads(lambda: (T.swapaxes(x, 0, 1) * Tensor(c2)).sum(), [x])
    c3 = RNG.normal(size=(6, 4))
    check_grads(lambda: (T.reshape(x, (6, 4)) * Tensor(c3)).sum(), [x])


def test_grad_multi_head_attention():
    h = 8
    wq, wk, wv, wo = (Tensor(RNG.normal(size=(h, h)) * 0.3, requires_grad=True) for _ in range(4))
    q = Tensor(RNG.normal(size=(3, h)), requires_grad=True)
    kv = Tensor(RNG.normal(size=(4, h)), requires_grad=True)
    mask = np.ones((3, 4), dtype=bool)
    mask[0, 3] = False
    c = RNG.normal(size=(3, h))
    params = AttentionParams(wq=wq, wk=wk, wv=wv, wo=wo)

    def loss():
        return (multi_head_attention(q, kv, kv, params, mask, n_heads=2) * Tensor(c)).sum()

    check_grads(loss, [wq, wk, wv, wo, q, kv])


# -- finiteness contract ----------------------------------------------------------------


def test_non_finite_values_rejected():
    with pytest.raises(ValueError):
        Tensor([1.0, float("nan")])
    with pytest.raises(ValueError):
        Tensor([float("inf")])


# -- ParameterSet --------------------------------------------------------------------------


def test_parameter_set_seed_determinism():
    def build(seed):
        ps = ParameterSet(seed)
        ps.add("layer.w", (4, 5))
        ps.add("layer.b", (5,), init="zeros")
        ps.add("emb", (6, 3), fan_in=3)
        return ps

    a, b = build(7), build(7)
    for (name_a, ta), (name_b, tb) in zip(a.items(), b.items()):
        assert name_a == name_b
        assert ta.data.tobytes() == tb.data.tobytes()
    c = build(8)
    assert any(ta.data.tobytes() != tc.data.tobytes() for (_, ta), (_, tc) in zip(a.items(), c.items()))


def test_parameter_set_iteration_is_lexicographic():
    ps = ParameterSet(0)
    ps.add("z.w", (2, 2))
    ps.add("a.w", (2, 2))
    ps.add("m.w", (2, 2))
    assert ps.names() == ["a.w", "m.w", "z.w"]


def test_parameter_container_roundtrip_bitwise(tmp_path):
    ps = ParameterSet(42)
    ps.add("enc.w", (3, 4))
    ps.add("enc.b", (4,))
    path = tmp_path / "params.bin"
    ps.save(path)
    before = {n: t.data.tobytes() for n, t in ps.items()}

    ps2 = ParameterSet(42)
    ps2.add("enc.w", (3, 4))
    ps2.add("enc.b", (4,))
    ps2.load(path)
    after = {n: t.data.tobytes() for n, t in ps2.items()}
    assert before == after


def test_save_arrays_header_layout(tmp_path):
    path = tmp_path / "arrs.bin"
    save_arrays(path, {"b": np.ones((2, 2)), "a": np.zeros(3)}, extra={"note": 1})
    arrays, meta = load_arrays(path)
    assert set(arrays) == {"a", "b"}
    assert meta["note"] == 1
    np.testing.assert_array_equal(arrays["b"], np.ones((2, 2)))
