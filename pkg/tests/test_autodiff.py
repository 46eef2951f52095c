"""Analytic gradients of every op against central finite differences (64-bit)."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from medistill.autodiff import Tensor, functional as F, get_dtype, no_grad, numeric_mode, parameter
from medistill.autodiff.gradcheck import check_gradients, numerical_grad
from medistill.errors import ContractError, ShapeError

TOL = 1e-6


def p(rng, *shape, scale=1.0):
    return parameter(rng.normal(size=shape) * scale)


def weighted(out, rng):
    """Scalar probe: random linear functional of ``out`` (avoids symmetric cancellations)."""
    w = Tensor(np.random.default_rng(99).normal(size=out.shape))
    return F.sum(F.mul(out, w))


UNARY = {
    "exp": lambda x: F.exp(x),
    "log": lambda x: F.log(F.add(F.mul(x, x), 0.5)),
    "neg": lambda x: -x,
    "sum_axis": lambda x: F.sum(x, axis=1, keepdims=True),
    "mean_axis": lambda x: F.mean(x, axis=0),
    "reshape": lambda x: F.reshape(x, (2, -1)),
    "transpose": lambda x: F.transpose(x, (1, 0, 2)),
    "swapaxes": lambda x: F.swapaxes(x, -1, -2),
    "getitem_basic": lambda x: F.getitem(x, (slice(None), 1)),
    "getitem_advanced": lambda x: F.getitem(x, np.array([0, 2, 0])),
    "softmax": lambda x: F.softmax(x, axis=-1),
    "softmax_masked": lambda x: F.softmax(x, axis=-1, mask=np.array([True, False, True, True])),
    "log_softmax": lambda x: F.log_softmax(x, axis=-1),
    "gelu_tanh": lambda x: F.gelu(x, "tanh"),
    "gelu_erf": lambda x: F.gelu(x, "erf"),
    "l2_normalize": lambda x: F.l2_normalize(x, axis=-1),
    "clamp_min": lambda x: F.clamp_min(x, 0.1),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_ops_match_finite_differences(name, rng):
    x = p(rng, 3, 3, 4)
    op = UNARY[name]
    if name == "getitem_advanced":
        x = p(rng, 3, 4)
    assert check_gradients(lambda: weighted(op(x), rng), [x]) < TOL


BINARY = {
    "add_broadcast": (lambda a, b: F.add(a, b), (3, 4), (4,)),
    "sub_broadcast": (lambda a, b: F.sub(a, b), (3, 1), (1, 4)),
    "mul_broadcast": (lambda a, b: F.mul(a, b), (2, 3, 4), (3, 1)),
    "div": (lambda a, b: F.div(a, F.add(F.mul(b, b), 1.0)), (3, 4), (3, 4)),
    "matmul_batched": (lambda a, b: F.matmul(a, b), (2, 3, 4), (2, 4, 5)),
    "matmul_broadcast": (lambda a, b: F.matmul(a, b), (2, 3, 4), (4, 5)),
    "concat": (lambda a, b: F.concat([a, b], axis=1), (3, 2), (3, 4)),
    "stack": (lambda a, b: F.stack([a, b], axis=0), (3, 4), (3, 4)),
    "cosine": (lambda a, b: F.cosine_similarity(a, b), (5, 4), (5, 4)),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_ops_match_finite_differences(name, rng):
    op, sa, sb = BINARY[name]
    a, b = p(rng, *sa), p(rng, *sb)
    assert check_gradients(lambda: weighted(op(a, b), rng), [a, b]) < TOL


def test_linear_with_bias_matches_finite_differences(rng):
    x, w, b = p(rng, 2, 3, 4), p(rng, 4, 5), p(rng, 5)
    assert check_gradients(lambda: weighted(F.linear(x, w, b), rng), [x, w, b]) < TOL


def test_layer_norm_matches_finite_differences(rng):
    x, g, b = p(rng, 2, 3, 6), p(rng, 6), p(rng, 6)
    assert check_gradients(lambda: weighted(F.layer_norm(x, g, b), rng), [x, g, b]) < TOL


def test_embedding_gradient_accumulates_repeated_ids(rng):
    w = p(rng, 6, 3)
    ids = np.array([[0, 2, 2], [5, 0, 2]])
    assert check_gradients(lambda: weighted(F.embedding(w, ids), rng), [w]) < TOL


@pytest.mark.parametrize("smoothing", [0.0, 0.1])
def test_cross_entropy_with_ignore_and_smoothing(smoothing, rng):
    logits = p(rng, 2, 3, 5)
    targets = np.array([[1, -100, 4], [0, 2, -100]])
    fn = lambda: F.cross_entropy(logits, targets, ignore_index=-100, label_smoothing=smoothing)  # noqa: E731
    assert check_gradients(fn, [logits]) < TOL


def test_soft_cross_entropy_matches_finite_differences(rng):
    logits = p(rng, 4, 4)
    target = np.random.default_rng(3).dirichlet(np.ones(4), size=4)
    assert check_gradients(lambda: F.soft_cross_entropy(logits, target), [logits]) < TOL


def test_cross_entropy_uniform_logits_is_log_vocab():
    logits = Tensor(np.zeros((3, 7)))
    assert F.cross_entropy(logits, np.array([0, 3, 6])).item() == pytest.approx(np.log(7), abs=1e-12)


def test_cross_entropy_all_ignored_is_zero_with_zero_grad():
    logits = parameter(np.ones((2, 3)))
    loss = F.cross_entropy(logits, np.array([-100, -100]))
    loss.backward()
    assert loss.item() == 0.0 and not logits.grad.any()


def test_cross_entropy_rejects_out_of_range_target():
    with pytest.raises(IndexError):
        F.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_embedding_rejects_out_of_range_id():
    with pytest.raises(IndexError):
        F.embedding(parameter(np.zeros((4, 2))), np.array([4]))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        F.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_gradient_accumulates_over_reused_tensor(rng):
    x = p(rng, 3)
    assert check_gradients(lambda: F.sum(F.mul(F.mul(x, x), x)), [x]) < TOL


def test_backward_requires_scalar():
    x = parameter(np.ones(3))
    with pytest.raises(ContractError):
        F.mul(x, 2.0).backward()


def test_backward_on_constant_raises():
    with pytest.raises(ContractError):
        Tensor(np.ones(())).backward()


def test_no_grad_records_nothing():
    x = parameter(np.ones(3))
    with no_grad():
        y = F.sum(F.mul(x, 2.0))
    assert y.is_leaf and not y.requires_grad


def test_detach_stops_gradient():
    x = parameter(np.array([1.0, 2.0]))
    loss = F.sum(F.add(F.mul(x, x), F.detach(F.mul(x, 3.0))))
    loss.backward()
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_numeric_modes_select_dtype():
    with numeric_mode("train"):
        assert get_dtype() == np.float32
        assert parameter(np.ones(2)).dtype == np.float32
    assert get_dtype() == np.float64


def test_softmax_rows_sum_to_one_with_mask(rng):
    x = Tensor(rng.normal(size=(4, 6)) * 10)
    mask = rng.random((4, 6)) > 0.3
    mask[:, 0] = True
    y = F.softmax(x, mask=mask).data
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)
    assert (y[~mask] == 0).all()


@settings(max_examples=40, deadline=None)
@given(a=hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=4),
                    elements=st.floats(-3, 3)),
       data=st.data())
def test_broadcast_add_mul_gradients_property(a, data):
    """Gradients of broadcast add/mul reduce back to each operand's shape and match differences."""
    shape_b = data.draw(hnp.broadcastable_shapes(a.shape, max_dims=a.ndim))
    b = data.draw(hnp.arrays(np.float64, shape_b, elements=st.floats(-3, 3)))
    ta, tb = parameter(a.copy()), parameter(b.copy())
    fn = lambda: F.sum(F.mul(F.add(ta, tb), F.add(ta, 1.5)))  # noqa: E731
    fn().backward()
    assert ta.grad.shape == a.shape and tb.grad.shape == b.shape
    assert check_gradients(fn, [ta, tb]) < 1e-6


@settings(max_examples=30, deadline=None)
@given(x=hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 6)), elements=st.floats(-30, 30)))
def test_log_softmax_is_log_of_softmax_property(x):
    np.testing.assert_allclose(F.log_softmax(Tensor(x)).data, np.log(F.softmax(Tensor(x)).data), atol=1e-9)


def test_numerical_grad_probe_subset(rng):
    x = p(rng, 4)
    g = numerical_grad(lambda: F.sum(F.mul(x, x)), x, indices=[(1,)])
    assert g[0] == 0 and g[1] == pytest.approx(2 * x.data[1], rel=1e-8)
