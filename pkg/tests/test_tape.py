import numpy as np
import pytest

from lapo_lab.errors import NonDeterminismError, NumericError, ShapeError
from lapo_lab.tape import OP_KINDS, Tape, finite_diff_check


def _make_rng(seed=0):
    return np.random.default_rng(seed)


def test_add_records_broadcast_shape():
    tape = Tape()
    a = tape.leaf(np.ones((2, 3)))
    b = tape.leaf(np.ones((1, 3)))
    out = tape.add(a, b)
    assert tape.shape(out) == (2, 3)
    assert np.all(tape.value(out) == 2.0)


def test_softmax_of_zeros_is_uniform():
    tape = Tape()
    s = tape.softmax(tape.leaf(np.zeros(4)))
    assert np.allclose(tape.value(s), 0.25)


def test_matmul_shape_error_names_op_and_shapes():
    tape = Tape()
    a = tape.leaf(np.ones((2, 3)))
    b = tape.leaf(np.ones((4, 5)))
    with pytest.raises(ShapeError) as exc:
        tape.matmul(a, b)
    msg = str(exc.value)
    assert "matmul" in msg
    assert "(2, 3)" in msg and "(4, 5)" in msg


def test_square_gradient_at_three():
    tape = Tape()
    x = tape.leaf(np.array([3.0]))
    loss = tape.mul(x, x)
    grads = tape.backward(loss)
    assert np.allclose(grads[x], [6.0])


def test_reused_node_accumulates_gradients():
    tape = Tape(dtype=np.float64)
    values = _make_rng(4).normal(size=6)
    x = tape.leaf(values)
    a = tape.tanh(x)
    # a feeds three consumers
    loss = tape.sum(tape.add(tape.mul(a, a), tape.mul(a, x)))
    grads = tape.backward(loss)
    t = np.tanh(values)
    da = 1.0 - t**2
    assert np.allclose(grads[x], 2.0 * t * da + da * values + t, atol=1e-12)
    assert np.allclose(grads[a], 2.0 * t + values, atol=1e-12)


def test_sum_of_softmax_has_zero_gradient():
    tape = Tape(dtype=np.float64)
    x = tape.leaf(_make_rng().normal(size=5))
    loss = tape.sum(tape.softmax(x))
    grads = tape.backward(loss)
    assert np.allclose(grads[x], 0.0, atol=1e-12)


def test_backward_rejects_non_scalar_loss():
    tape = Tape()
    x = tape.leaf(np.ones(3))
    with pytest.raises(ShapeError):
        tape.backward(tape.scale(x, 2.0))


def test_non_finite_values_raise():
    tape = Tape()
    with pytest.raises(NumericError):
        tape.leaf(np.array([np.nan]))
    x = tape.leaf(np.array([-1.0, 4.0]))
    with pytest.raises(NumericError):
        tape.sqrt(x)
    big = tape.leaf(np.array([1000.0]))
    with pytest.raises(NumericError):
        tape.exp(big)


def test_unreached_nodes_get_zero_gradients():
    tape = Tape()
    x = tape.leaf(np.ones((2, 2)))
    unused = tape.leaf(np.full(3, 7.0))
    loss = tape.sum(x)
    grads = tape.backward(loss)
    assert not grads.reached(unused)
    assert grads[unused].shape == (3,)
    assert np.all(grads[unused] == 0.0)
    assert len(grads) == len(tape)


def test_unknown_op_kind_is_rejected():
    tape = Tape()
    x = tape.leaf(np.ones(2))
    with pytest.raises(ValueError):
        tape.record("conv2d", [x])


def test_rank_four_leaf_is_rejected():
    with pytest.raises(ShapeError):
        Tape().leaf(np.ones((1, 1, 1, 1)))


def test_quadratic_finite_difference():
    rng = _make_rng(1)
    params = {"w": rng.normal(size=(3, 4))}

    def fn(tape, leaves):
        return tape.sum(tape.square(leaves["w"]))

    err = finite_diff_check(fn, params, h=1e-5, n_coords=12)
    assert err < 1e-6, f"quadratic relative error {err}"


def test_two_layer_network_finite_difference():
    rng = _make_rng(2)
    params = {
        "w1": rng.normal(scale=0.5, size=(4, 6)),
        "w2": rng.normal(scale=0.5, size=(6, 3)),
        "x": rng.normal(size=(5, 4)),
    }

    def fn(tape, leaves):
        h = tape.gelu(tape.matmul(leaves["x"], leaves["w1"]))
        logits = tape.matmul(tape.layer_norm(h), leaves["w2"])
        picked = tape.gather_rows(tape.log_softmax(logits), [0, 2, 1], axis=1)
        return tape.neg(tape.mean(picked))

    err = finite_diff_check(fn, params, h=1e-5, n_coords=40, floor=1e-6)
    assert err < 1e-4, f"two-layer network relative error {err}"


def test_unseeded_function_is_non_deterministic():
    params = {"w": np.ones(3)}

    def fn(tape, leaves):
        noise = tape.constant(np.random.default_rng().normal(size=3))
        return tape.sum(tape.mul(leaves["w"], noise))

    with pytest.raises(NonDeterminismError):
        finite_diff_check(fn, params)


def _op_case(kind):
    """A small scalar loss exercising one op kind on leaves ``a`` and ``b``."""

    def fn(tape, leaves):
        a, b = leaves["a"], leaves["b"]
        if kind == "matmul":
            out = tape.matmul(a, b, trans_b=True)
        elif kind in ("add", "mul", "minimum"):
            out = tape.record(kind, [a, b])
        elif kind == "div":
            out = tape.div(a, tape.add(tape.square(b), tape.constant(np.ones((3, 4)))))
        elif kind == "mse":
            out = tape.mse(a, b)
        elif kind == "scale":
            out = tape.scale(a, -1.5)
        elif kind == "sqrt":
            out = tape.sqrt(tape.add(tape.square(a), tape.constant(np.ones((3, 4)))))
        elif kind == "clip":
            out = tape.clip(a, -0.3, 0.3)
        elif kind == "gather_rows":
            out = tape.gather_rows(a, [2, 0, 2])
        elif kind == "reshape":
            out = tape.reshape(a, (4, 3))
        elif kind == "concat":
            out = tape.concat([a, b], axis=1)
        elif kind in ("sum", "mean"):
            out = tape.record(kind, [a], axis=0)
        else:
            out = tape.record(kind, [a])
        weights = tape.constant(np.linspace(0.5, 1.5, tape.value(out).size).reshape(tape.shape(out)))
        return tape.sum(tape.mul(out, weights))

    return fn


@pytest.mark.parametrize("kind", OP_KINDS)
def test_each_op_matches_finite_differences(kind):
    rng = _make_rng(3)
    # offsets keep clip and minimum away from their kinks
    a = rng.normal(size=(3, 4))
    a[np.abs(np.abs(a) - 0.3) < 0.05] += 0.2
    b = a + rng.choice([-1.0, 1.0], size=(3, 4)) * rng.uniform(0.2, 1.0, size=(3, 4))
    err = finite_diff_check(_op_case(kind), {"a": a, "b": b}, h=1e-6, n_coords=24, floor=1e-6)
    assert err < 1e-4, f"{kind}: relative error {err}"


def test_backward_is_deterministic():
    rng = _make_rng(4)
    w = rng.normal(size=(4, 4)).astype(np.float32)

    def grad():
        tape = Tape()
        x = tape.leaf(w)
        loss = tape.mean(tape.tanh(tape.matmul(x, x, trans_b=True)))
        return tape.backward(loss)[x]

    assert np.array_equal(grad(), grad())
