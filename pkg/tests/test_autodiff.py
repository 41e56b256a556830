import threading

import numpy as np
import pytest

from erp_mtl import autodiff as ad
from erp_mtl.autodiff import ParameterSet, Tape, Tensor


def test_matmul_of_ones():
    out = ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    np.testing.assert_array_equal(out.data, np.full((2, 2), 3.0))


def test_relu_definition():
    np.testing.assert_array_equal(ad.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_causal_conv_keeps_length():
    x = Tensor(np.random.default_rng(0).standard_normal((2, 7, 3)))
    w = Tensor(np.ones((2, 3, 4)))
    b = Tensor(np.zeros(4))
    assert ad.conv_causal(x, w, b).shape == (2, 7, 4)


def test_conv_position_zero_uses_zero_pad():
    x = np.random.default_rng(1).standard_normal((1, 3, 2))
    w = np.random.default_rng(2).standard_normal((2, 2, 3))
    out = ad.conv_causal(Tensor(x), Tensor(w), Tensor(np.zeros(3))).data
    np.testing.assert_allclose(out[0, 0], x[0, 0] @ w[1])
    np.testing.assert_allclose(out[0, 2], x[0, 1] @ w[0] + x[0, 2] @ w[1])


def test_square_derivative():
    x = Tensor(np.array([3.0]), requires_grad=True, dtype=np.float64)
    with Tape() as tape:
        y = ad.multiply(x, x)
    assert ad.backward(tape, y, {"x": x})["x"][0] == pytest.approx(6.0)


def test_relu_gradient_negative_is_zero():
    x = Tensor(np.array([-2.0, 3.0]), requires_grad=True, dtype=np.float64)
    with Tape() as tape:
        y = ad.relu(x)
    np.testing.assert_array_equal(ad.backward(tape, y, {"x": x})["x"], [0.0, 1.0])


def test_mse_head_against_finite_differences():
    rng = np.random.default_rng(3)
    target = Tensor(rng.standard_normal((5, 1)), dtype=np.float64)
    feats = Tensor(rng.standard_normal((5, 10)), dtype=np.float64)

    def build(w):
        return ad.mean(ad.squared_error(ad.matmul(feats, w), target))

    assert ad.check_function(build, rng.standard_normal((10, 1))) < 1e-4


def test_grad_check_identity_is_exact():
    assert ad.grad_check("identity", np.random.default_rng(0).standard_normal((3, 4))) < 1e-8


def test_grad_check_matmul_4x4():
    assert ad.grad_check("matmul", np.random.default_rng(1).standard_normal((4, 4)), step=1e-5) < 1e-6


@pytest.mark.parametrize("op", ad.GRAD_CHECK_OPS)
def test_every_primitive_on_100_instances(op):
    rng = np.random.default_rng(sum(map(ord, op)))
    shape = (2, 3, 4) if op == "conv_causal" else (3, 4)
    worst = max(ad.grad_check(op, rng.standard_normal(shape)) for _ in range(100))
    assert worst < 1e-6


def test_grad_check_reports_nonfinite_as_failure():
    assert ad.check_function(lambda x: ad.multiply(x, Tensor(np.array([np.inf]))), np.array([1.0])) == float("inf")


def test_grad_check_unknown_op():
    with pytest.raises(KeyError):
        ad.grad_check("softplus", np.zeros(3))


def test_shape_error_names_primitive():
    with pytest.raises(ad.ShapeError, match="matmul"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ad.ShapeError, match="add"):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_nonfinite_input_rejected():
    with pytest.raises(ad.NonFiniteError):
        Tensor.leaf([1.0, np.nan])


def test_backward_before_forward():
    x = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ad.AutodiffError):
        ad.backward(Tape(), x, {"x": x})


def test_unreached_parameter_gets_zero_gradient():
    a = Tensor(np.ones(3), requires_grad=True, dtype=np.float64)
    b = Tensor(np.ones((2, 2)), requires_grad=True, dtype=np.float64)
    with Tape() as tape:
        y = ad.mean(ad.multiply(a, a))
    g = ad.backward(tape, y, {"a": a, "b": b})
    np.testing.assert_array_equal(g["b"], np.zeros((2, 2)))
    assert g["b"].shape == b.shape


def test_zero_seed_gives_zero_gradients():
    x = Tensor(np.random.default_rng(0).standard_normal((3, 2)), requires_grad=True, dtype=np.float64)
    with Tape() as tape:
        y = ad.tanh(ad.matmul(x, Tensor(np.ones((2, 4)))))
    g = ad.backward(tape, y, {"x": x}, seed=np.zeros(y.shape))
    assert not g["x"].any()


def test_tape_replay_is_bit_identical():
    rng = np.random.default_rng(4)
    x = Tensor(rng.standard_normal((2, 5, 3)), requires_grad=True)
    w = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    with Tape() as tape:
        h = ad.relu(ad.conv_causal(x, w, Tensor(np.zeros(4, np.float32))))
        h = ad.dropout(h, ad.dropout_mask(rng, h.shape, 0.3))
        y = ad.mean(ad.sigmoid(h))
    replayed = tape.replay()
    for rec, out in zip(tape.records, replayed):
        assert out.dtype == rec.output.data.dtype
        np.testing.assert_array_equal(out, rec.output.data)


def test_forward_deterministic_given_seed():
    def run():
        rng = np.random.default_rng(9)
        x = Tensor(np.arange(12.0).reshape(3, 4))
        return ad.dropout(x, ad.dropout_mask(rng, x.shape, 0.5)).data

    np.testing.assert_array_equal(run(), run())


def test_dropout_mask_scaling_and_rate():
    rng = np.random.default_rng(0)
    masks = np.stack([ad.dropout_mask(rng, (50,), 0.5, np.float64) for _ in range(1000)])
    assert set(np.unique(masks)) <= {0.0, 2.0}
    # binomial: 50000 draws at p=0.5, 5 sd is about 0.011
    assert abs((masks == 0).mean() - 0.5) < 0.011
    np.testing.assert_array_equal(ad.dropout_mask(rng, (3,), 0.0), np.ones(3))


def test_no_recording_without_grad():
    with Tape() as tape:
        ad.add(Tensor(np.ones(2)), Tensor(np.ones(2)))
    assert len(tape) == 0


def test_nll_matches_log_softmax():
    logits = np.array([[1.0, 2.0, 0.5], [0.0, 0.0, 0.0]])
    out = ad.nll(Tensor(logits, dtype=np.float64), np.array([1, 2])).data
    lse = np.log(np.exp(logits).sum(axis=1))
    expected = np.mean(lse - logits[[0, 1], [1, 2]])
    assert float(out) == pytest.approx(expected, rel=1e-12)


def test_parameter_set_trainable_mask():
    ps = ParameterSet({"a": np.ones(2), "b": np.zeros(3)}, dtype=np.float64)
    ps.set_trainable(lambda n: n == "a")
    assert list(ps.trainable_tensors()) == ["a"]
    assert not ps["b"].requires_grad
    with pytest.raises(ad.ShapeError):
        ps.assign("a", np.ones(3))


def test_tapes_are_thread_confined():
    results = {}

    def work(k):
        x = Tensor(np.full(3, float(k)), requires_grad=True, dtype=np.float64)
        with Tape() as tape:
            y = ad.mean(ad.multiply(x, x))
        results[k] = ad.backward(tape, y, {"x": x})["x"]

    threads = [threading.Thread(target=work, args=(k,)) for k in range(1, 5)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for k in range(1, 5):
        np.testing.assert_allclose(results[k], np.full(3, 2.0 * k / 3))
