import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmalign.minicore import (
    NEG_INF,
    ContractError,
    DimensionError,
    FrozenTensorError,
    Graph,
    OptimizerConfig,
    Tensor,
    backward,
    concat,
    conv1d,
    conv_output_length,
    cross_entropy_ignore,
    embedding_lookup,
    gelu,
    grad_check,
    layernorm,
    masked_softmax,
    matmul,
    optimizer_step,
    total,
)

from oracles import (
    central_difference,
    cross_entropy_direct,
    gelu_mp,
    naive_conv1d,
    softmax_subset,
    window_starts,
)


def param(a, name=None):
    return Tensor(a, requires_grad=True, name=name)


# --- matmul ---------------------------------------------------------------


def test_matmul_identity_left(rng):
    b = rng.normal(size=(3, 2))
    out = matmul(Tensor(np.eye(3)), Tensor(b))
    assert np.array_equal(out.data, b)


def test_matmul_identity_right():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(Tensor(a), Tensor(np.eye(2))).data, a)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_matmul_gradients_match_finite_differences(rng):
    a = param(rng.normal(size=(4, 5)))
    b = param(rng.normal(size=(5, 3)))
    w = rng.normal(size=(4, 3))
    report = grad_check(lambda a, b: total(matmul(a, b) * Tensor(w)), [a, b])
    assert report.max_rel_err <= 1e-5

    # second route: a numpy-only objective differentiated numerically
    a0, b0 = a.data.copy(), b.data.copy()
    backward(total(matmul(a, b) * Tensor(w)))
    ga = central_difference(lambda x: float(np.sum((x @ b0) * w)), a0.copy())
    assert np.allclose(a.grad, ga, rtol=1e-5, atol=1e-8)


# --- conv1d ---------------------------------------------------------------


def test_conv_output_length_for_audio_projector():
    assert conv_output_length(1500, 40, 3) == 487
    starts = window_starts(1500, 40, 3)
    assert starts[0] == 0 and starts[-1] == 1458 and len(starts) == 487


def test_conv_identity_kernel(rng):
    x = rng.normal(size=(1, 12))
    out = conv1d(Tensor(x), Tensor(np.ones((1, 1, 1))), Tensor(np.zeros(1)), stride=1)
    assert np.array_equal(out.data, x)


def test_conv_matches_naive_exactly_on_integer_inputs(rng):
    x = rng.integers(-5, 6, size=(2, 30)).astype(float)
    w = rng.integers(-3, 4, size=(4, 2, 5)).astype(float)
    b = rng.integers(-2, 3, size=4).astype(float)
    out = conv1d(Tensor(x), Tensor(w), Tensor(b), stride=3)
    assert np.array_equal(out.data, naive_conv1d(x, w, b, 3))


def test_conv_matches_naive_with_padding(rng):
    x = rng.normal(size=(3, 17))
    w = rng.normal(size=(2, 3, 4))
    b = rng.normal(size=2)
    out = conv1d(Tensor(x), Tensor(w), Tensor(b), stride=2, pad_left=2, pad_right=1)
    assert np.allclose(out.data, naive_conv1d(x, w, b, 2, 2, 1), rtol=0, atol=1e-12)


def test_conv_gradients(rng):
    x = param(rng.normal(size=(2, 30)))
    w = param(rng.normal(size=(3, 2, 5)))
    b = param(rng.normal(size=3))
    r = rng.normal(size=(3, conv_output_length(30, 5, 3)))
    report = grad_check(lambda x, w, b: total(conv1d(x, w, b, stride=3) * Tensor(r)), [x, w, b])
    assert report.max_rel_err <= 1e-5, report.table()


def test_conv_window_too_large():
    with pytest.raises(DimensionError):
        conv1d(Tensor(np.ones((1, 5))), Tensor(np.ones((1, 1, 6))), stride=1)


# --- gelu -----------------------------------------------------------------


def test_gelu_at_zero():
    x = param(np.zeros(1))
    y = gelu(x)
    assert y.data[0] == 0.0
    backward(total(y))
    assert x.grad[0] == 0.5


@pytest.mark.parametrize("v", [-3.0, -1.0, 1.0, 3.0])
def test_gelu_matches_high_precision_erf(v):
    assert abs(gelu(Tensor([v])).data[0] - gelu_mp(v)) <= 1e-12


def test_gelu_chain_gradcheck(rng):
    x = param(rng.normal(size=(3, 4)))
    w = Tensor(rng.normal(size=(4, 4)))
    report = grad_check(lambda x: total(gelu(matmul(gelu(x), w))), [x], h=1e-4)
    assert report.max_rel_err <= 1e-5


# --- masked softmax -------------------------------------------------------


def test_masked_softmax_one_kept_is_one_hot(rng):
    logits = rng.normal(size=(3, 4))
    mask = np.full((3, 4), NEG_INF)
    for i in range(3):
        mask[i, i] = 0.0
    p = masked_softmax(Tensor(logits), mask).data
    assert np.array_equal(p, np.eye(3, 4))


def test_masked_softmax_zero_mask_is_softmax(rng):
    logits = rng.normal(size=(2, 5))
    p = masked_softmax(Tensor(logits), np.zeros((2, 5))).data
    ref = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    assert np.allclose(p, ref, rtol=0, atol=1e-15)


def test_masked_softmax_appending_masked_columns(rng):
    for _ in range(20):
        t = int(rng.integers(2, 7))
        logits = rng.normal(size=(3, t))
        keep = rng.random((3, t)) < 0.6
        keep[:, 0] = True
        mask = np.where(keep, 0.0, NEG_INF)
        p = masked_softmax(Tensor(logits), mask).data
        for i in range(3):
            assert np.allclose(p[i], softmax_subset(logits[i], keep[i]), rtol=0, atol=1e-12)
        extra = int(rng.integers(1, 4))
        logits2 = np.concatenate([logits, rng.normal(size=(3, extra)) * 50], axis=1)
        mask2 = np.concatenate([mask, np.full((3, extra), NEG_INF)], axis=1)
        p2 = masked_softmax(Tensor(logits2), mask2).data
        assert np.max(np.abs(p2[:, :t] - p)) <= 1e-12
        assert np.all(p2[:, t:] == 0.0)


def test_masked_softmax_masked_positions_get_zero_grad(rng):
    x = param(rng.normal(size=(2, 4)))
    mask = np.array([[0.0, NEG_INF, 0.0, 0.0], [NEG_INF, 0.0, 0.0, NEG_INF]])
    r = rng.normal(size=(2, 4))
    backward(total(masked_softmax(x, mask) * Tensor(r)))
    assert np.all(x.grad[mask == NEG_INF] == 0.0)
    report = grad_check(lambda x: total(masked_softmax(x, mask) * Tensor(r)), [x])
    assert report.max_rel_err <= 1e-5


def test_masked_softmax_degenerate_row():
    with pytest.raises(ContractError, match="degenerate"):
        masked_softmax(Tensor(np.zeros((2, 2))), np.array([[0.0, NEG_INF], [NEG_INF, NEG_INF]]))


# --- embedding ------------------------------------------------------------


def test_embedding_first_basis_row():
    out = embedding_lookup(Tensor(np.eye(4)), [0])
    assert np.array_equal(out.data, [[1.0, 0.0, 0.0, 0.0]])


def test_embedding_repeated_ids_accumulate(rng):
    table = param(rng.normal(size=(5, 3)))
    up = rng.normal(size=3)
    out = embedding_lookup(table, [2, 2, 2, 4])
    backward(total(out * Tensor(np.stack([up, up, up, np.zeros(3)]))))
    assert np.allclose(table.grad[2], 3 * up)
    assert np.all(table.grad[[0, 1, 3, 4]] == 0)


def test_embedding_out_of_range_names_id_and_v():
    with pytest.raises(IndexError, match=r"id 7.*V=5"):
        embedding_lookup(Tensor(np.ones((5, 2))), [1, 7])


def test_embedding_gradcheck(rng):
    table = param(rng.normal(size=(6, 3)))
    r = rng.normal(size=(4, 3))
    report = grad_check(lambda t: total(gelu(embedding_lookup(t, [5, 0, 5, 2])) * Tensor(r)), [table])
    assert report.max_rel_err <= 1e-5


# --- cross entropy --------------------------------------------------------


def test_cross_entropy_all_ignored_is_zero(rng):
    logits = param(rng.normal(size=(3, 4)))
    loss = cross_entropy_ignore(logits, [-100] * 3, -100)
    assert loss.item() == 0.0
    backward(loss)
    assert np.array_equal(logits.grad, np.zeros((3, 4)))


def test_cross_entropy_uniform_is_ln4():
    loss = cross_entropy_ignore(Tensor(np.zeros((1, 4))), [2], -100)
    assert loss.item() == pytest.approx(math.log(4), abs=1e-15)


def test_cross_entropy_matches_direct_oracle(rng):
    logits = rng.normal(size=(6, 10)) * 3
    labels = [int(v) for v in rng.integers(0, 10, size=6)]
    labels[1] = labels[4] = -100
    loss = cross_entropy_ignore(Tensor(logits), labels, -100).item()
    assert abs(loss - cross_entropy_direct(logits, labels, -100)) <= 1e-10


def test_cross_entropy_bad_label():
    with pytest.raises(IndexError):
        cross_entropy_ignore(Tensor(np.zeros((2, 3))), [0, 3], -100)


def test_cross_entropy_invariant_to_ignored_logits(rng):
    logits = rng.normal(size=(5, 7))
    labels = [1, -100, 3, -100, 0]
    base = cross_entropy_ignore(Tensor(logits), labels, -100).item()
    shuffled = logits.copy()
    shuffled[[1, 3]] = rng.permutation(shuffled[[1, 3]].ravel()).reshape(2, 7)
    assert cross_entropy_ignore(Tensor(shuffled), labels, -100).item() == base


def test_cross_entropy_gradcheck(rng):
    x = param(rng.normal(size=(5, 6)))
    report = grad_check(lambda x: cross_entropy_ignore(x, [1, -100, 5, 0, -100], -100), [x])
    assert report.max_rel_err <= 1e-5


# --- layernorm ------------------------------------------------------------


def test_layernorm_constant_row():
    out = layernorm(Tensor(np.full((2, 5), 3.7)), Tensor(np.ones(5)), Tensor(np.zeros(5)))
    assert np.array_equal(out.data, np.zeros((2, 5)))


def test_layernorm_zero_gain_gives_shift(rng):
    shift = rng.normal(size=4)
    out = layernorm(Tensor(rng.normal(size=(3, 4))), Tensor(np.zeros(4)), Tensor(shift))
    assert np.array_equal(out.data, np.tile(shift, (3, 1)))


def test_layernorm_gradcheck(rng):
    x = param(rng.normal(size=(3, 6)))
    g = param(rng.normal(size=6))
    b = param(rng.normal(size=6))
    r = rng.normal(size=(3, 6))
    report = grad_check(lambda x, g, b: total(layernorm(x, g, b) * Tensor(r)), [x, g, b])
    assert report.max_rel_err <= 1e-5


# --- backward -------------------------------------------------------------


def test_backward_sum_gives_ones(rng):
    x = param(rng.normal(size=(2, 3)))
    backward(total(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_reports_unused_parameter(rng):
    x = param(rng.normal(size=(2, 2)), "x")
    y = param(rng.normal(size=(2, 2)), "y")
    res = backward(total(x * x), {"x": x, "y": y})
    assert res.unused == ["y"]
    assert "x" in res.grads


def test_backward_report_empty_iff_all_reachable(rng):
    x = param(rng.normal(size=(2, 2)))
    y = param(rng.normal(size=(2, 2)))
    res = backward(total(x * y), {"x": x, "y": y}, accumulate=False)
    assert res.unused == []
    assert x.grad is None  # accumulate=False leaves shared tensors untouched


def test_backward_rejects_non_scalar():
    with pytest.raises(ContractError):
        backward(param(np.ones((2, 2))))


def test_graph_visits_each_node_once(rng):
    x = param(rng.normal(size=(2, 2)))
    y = x * x
    z = total(y + y)
    g = Graph.from_output(z)
    assert len({id(n) for n in g.nodes}) == len(g.nodes)
    ids = [n.node_id for n in g.nodes]
    assert ids == sorted(ids)


def test_frozen_tensor_rejects_grad():
    t = Tensor(np.ones((2, 2)), frozen=True)
    with pytest.raises(FrozenTensorError):
        t.requires_grad = True


def test_concat_gradients(rng):
    a = param(rng.normal(size=(2, 3)))
    b = param(rng.normal(size=(4, 3)))
    r = rng.normal(size=(6, 3))
    assert grad_check(lambda a, b: total(concat([a, b]) * Tensor(r)), [a, b]).max_rel_err <= 1e-5


# --- optimizer ------------------------------------------------------------


def test_sgd_step():
    p = param(np.array(1.0))
    optimizer_step({"p": p}, {"p": np.array(1.0)}, OptimizerConfig(kind="sgd", lr=0.1))
    assert p.data == pytest.approx(0.9, abs=1e-15)


@pytest.mark.parametrize("kind", ["sgd", "adam"])
def test_zero_lr_leaves_params(kind, rng):
    v = rng.normal(size=(3,))
    p = param(v)
    optimizer_step({"p": p}, {"p": rng.normal(size=3)}, OptimizerConfig(kind=kind, lr=0.0))
    assert np.array_equal(p.data, v)


def test_adam_first_step_closed_form():
    # first Adam step: bias-corrected moments are g and g**2, so the update is
    # lr * g / (|g| + eps)
    lr, eps = 1e-3, 1e-8
    for g, p0 in [(0.5, 1.0), (-2.0, 0.25), (1e-3, -1.0)]:
        p = param(np.array([p0]))
        optimizer_step({"p": p}, {"p": np.array([g])}, OptimizerConfig(kind="adam", lr=lr, eps=eps))
        expected = p0 - lr * g / (abs(g) + eps)
        assert abs(p.data[0] - expected) <= 1e-12


def test_optimizer_missing_grad():
    with pytest.raises(ContractError, match="no gradient"):
        optimizer_step({"p": param(np.ones(2))}, {}, OptimizerConfig())


# --- properties -----------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(
    c_in=st.integers(1, 3),
    c_out=st.integers(1, 3),
    k=st.integers(1, 6),
    stride=st.integers(1, 4),
    extra=st.integers(0, 12),
    pads=st.tuples(st.integers(0, 2), st.integers(0, 2)),
    seed=st.integers(0, 2**16),
)
def test_conv_equals_naive_property(c_in, c_out, k, stride, extra, pads, seed):
    r = np.random.default_rng(seed)
    length = max(1, k + extra - sum(pads))
    x = r.integers(-4, 5, size=(c_in, length)).astype(float)
    w = r.integers(-4, 5, size=(c_out, c_in, k)).astype(float)
    b = r.integers(-4, 5, size=c_out).astype(float)
    out = conv1d(Tensor(x), Tensor(w), Tensor(b), stride=stride, pad_left=pads[0], pad_right=pads[1])
    assert np.array_equal(out.data, naive_conv1d(x, w, b, stride, *pads))
