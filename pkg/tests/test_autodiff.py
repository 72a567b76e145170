import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from clipvid import autodiff as ad
from clipvid.errors import ConfigError, DimensionError, NumericError


def test_matmul_identity():
    a = ad.tensor(np.eye(2))
    b = ad.tensor([[1.0, 2.0], [3.0, 4.0]])
    assert_allclose(ad.matmul(a, b).data, [[1, 2], [3, 4]])


def test_matmul_hand_case():
    out = ad.matmul(ad.tensor([[1.0, 2.0]]), ad.tensor([[3.0], [4.0]]))
    assert_allclose(out.data, [[11.0]])


def test_matmul_shape_error_names_shapes():
    with pytest.raises(DimensionError) as exc:
        ad.matmul(ad.tensor(np.zeros((2, 3))), ad.tensor(np.zeros((2, 3))))
    assert "(2, 3)" in str(exc.value)


def test_matmul_gradient_matches_hand_adjoint():
    a = ad.param([[1.0, 1.0]])
    b = ad.param([[2.0], [5.0]])
    with ad.ComputationTape() as tape:
        y = ad.reduce_sum(ad.matmul(a, b))
    tape.backward(y)
    assert_allclose(a.grad, [[2.0, 5.0]])
    assert_allclose(b.grad, [[1.0], [1.0]])
    rep = ad.grad_check(lambda x: ad.reduce_sum(ad.matmul(x, ad.tensor([[2.0], [5.0]]))),
                        ad.tensor([[1.0, 1.0]]))
    assert rep.passed


def test_softmax_uniform_and_scalar_oracle():
    assert_allclose(ad.softmax(ad.tensor([0.0, 0.0, 0.0])).data, np.ones(3) / 3)
    out = ad.softmax(ad.tensor([1.0, 2.0])).data
    assert_allclose(out, [0.26894, 0.73106], atol=1e-5)


def test_softmax_overflow_stability():
    out = ad.softmax(ad.tensor([1000.0, 0.0])).data
    assert np.isfinite(out).all()
    assert_allclose(out, [1.0, 0.0], atol=1e-12)


def test_softmax_nan_rejected():
    with pytest.raises(NumericError):
        ad.softmax(ad.tensor([np.nan, 1.0]))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8))
def test_softmax_slices_sum_to_one(vals):
    out = ad.softmax(ad.tensor(np.array([vals, vals[::-1]]))).data
    assert_allclose(out.sum(axis=-1), [1.0, 1.0], atol=1e-6)


def test_layer_norm_constant_slice():
    gain = ad.tensor(np.ones(4))
    bias = ad.tensor(np.zeros(4))
    out = ad.layer_norm(ad.tensor([[5.0, 5.0, 5.0, 5.0]]), gain, bias)
    assert_allclose(out.data, np.zeros((1, 4)), atol=1e-8)


def test_layer_norm_two_values():
    out = ad.layer_norm(ad.tensor([[1.0, 3.0]]), ad.tensor(np.ones(2)),
                        ad.tensor(np.zeros(2)))
    assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-4)


def test_layer_norm_rejects_width_one():
    with pytest.raises(ConfigError):
        ad.layer_norm(ad.tensor([[3.0]]), ad.tensor(np.ones(1)), ad.tensor(np.zeros(1)))


def test_layer_norm_statistics_random(rng):
    x = ad.tensor(rng.normal(size=(5, 16)))
    out = ad.layer_norm(x, ad.tensor(np.ones(16)), ad.tensor(np.zeros(16))).data
    assert np.abs(out.mean(axis=-1)).max() < 1e-6
    assert np.abs(out.var(axis=-1) - 1.0).max() < 1e-4


def test_layer_norm_gradient(rng):
    gain = ad.tensor(rng.normal(size=8))
    bias = ad.tensor(rng.normal(size=8))
    w = ad.tensor(rng.normal(size=(1, 8)))
    rep = ad.grad_check(
        lambda x: ad.reduce_sum(ad.mul(ad.layer_norm(x, gain, bias), w)),
        ad.tensor(rng.normal(size=(1, 8))))
    assert rep.max_rel_err < 1e-4


def test_mha_zero_value_projection_gives_bias_only(rng):
    p = ad.init_mha(rng, 8, 2)
    p.v.w.data[:] = 0.0
    p.v.b.data[:] = 0.0
    p.out.w.data[:] = np.eye(8)
    q = ad.tensor(rng.normal(size=(3, 8)))
    out = ad.multi_head_attention(q, q, q, p)
    assert_allclose(out.data, np.broadcast_to(p.out.b.data, (3, 8)), atol=1e-12)


def test_mha_single_key_degenerate(rng):
    p = ad.init_mha(rng, 8, 2)
    q = ad.tensor(rng.normal(size=(2, 8)))
    k = ad.tensor(rng.normal(size=(1, 8)))
    out = ad.multi_head_attention(q, k, k, p)
    vrow = ad.linear(k, p.v)
    expect = ad.linear(vrow, p.out)
    assert_allclose(out.data, np.broadcast_to(expect.data, (2, 8)), atol=1e-10)


def test_mha_head_divisibility_error(rng):
    with pytest.raises(ConfigError):
        ad.init_mha(rng, 9, 2)


def test_mha_gradients(rng):
    p = ad.init_mha(rng, 8, 2)
    k = ad.tensor(rng.normal(size=(4, 8)))
    for which in range(3):
        def f(x, which=which):
            args = [k, k, k]
            args[which] = x
            return ad.reduce_sum(ad.multi_head_attention(*args, p))
        rep = ad.grad_check(f, ad.tensor(rng.normal(size=(4, 8))))
        assert rep.max_rel_err < 1e-4, which


def test_grad_check_closed_form():
    rep = ad.grad_check(lambda x: ad.reduce_sum(ad.mul(x, x)), ad.tensor([1.0, 2.0]))
    assert rep.max_rel_err < 1e-8


def test_grad_check_constant_function():
    rep = ad.grad_check(lambda x: ad.tensor(3.0) * ad.tensor(1.0), ad.tensor([1.0, 2.0]))
    assert rep.max_rel_err == 0.0


def test_grad_check_requires_64bit():
    ad.set_precision(32)
    with pytest.raises(ConfigError):
        ad.grad_check(lambda x: ad.reduce_sum(x), ad.tensor([1.0]))


def test_backward_accumulates_sum_of_adjoints():
    x = ad.param([2.0, 3.0])
    with ad.ComputationTape() as tape:
        y = ad.reduce_sum(ad.add(ad.mul(x, x), x))    # x used twice
    tape.backward(y)
    assert_allclose(x.grad, [5.0, 7.0])


def test_unused_leaf_grad_stays_zero():
    x = ad.param([1.0])
    unused = ad.param([4.0])
    with ad.ComputationTape() as tape:
        y = ad.reduce_sum(ad.mul(x, x))
    tape.backward(y)
    assert_allclose(unused.grad, [0.0])


def test_tape_replay_is_deterministic(rng):
    vals = rng.normal(size=(6, 6))

    def run():
        x = ad.param(vals.copy())
        w = ad.param(rng2.normal(size=(6, 6)))
        with ad.ComputationTape() as tape:
            y = ad.reduce_sum(ad.softmax(ad.matmul(x, w), axis=-1))
        tape.backward(y)
        return x.grad.copy()

    rng2 = np.random.default_rng(7)
    g1 = run()
    rng2 = np.random.default_rng(7)
    g2 = run()
    assert np.array_equal(g1, g2)


def test_row_update_semantics(rng):
    x = ad.param(rng.normal(size=(4, 3)))
    rows = ad.param(rng.normal(size=(2, 3)))
    with ad.ComputationTape() as tape:
        out = ad.row_update(x, [1, 3], rows)
        y = ad.reduce_sum(ad.mul(out, out))
    expect = x.data.copy()
    expect[[1, 3]] = rows.data
    assert_allclose(out.data, expect)
    tape.backward(y)
    assert_allclose(x.grad[[1, 3]], np.zeros((2, 3)))
    assert_allclose(rows.grad, 2 * rows.data)


def test_precision_switch_changes_dtype():
    ad.set_precision(32)
    assert ad.tensor([1.0]).data.dtype == np.float32
    ad.set_precision(64)
    assert ad.tensor([1.0]).data.dtype == np.float64


def test_gather_rows_duplicate_indices_accumulate():
    x = ad.param(np.arange(6.0).reshape(3, 2))
    with ad.ComputationTape() as tape:
        y = ad.reduce_sum(ad.gather_rows(x, [0, 0, 2]))
    tape.backward(y)
    assert_allclose(x.grad, [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]])
