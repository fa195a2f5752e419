import numpy as np
import pytest

import helpers
from helpers import check_grad
from seqattack.autodiff import (AdamState, NonFiniteGradientError, ShapeError,
                                Tape, UnboundInputError, adam_step, eval_tape,
                                grad)


def test_eval_tanh_zero():
    t = Tape()
    x = t.input("x", (1,))
    t.mark_output("y", t.tanh(x))
    out = eval_tape(t, {"x": [0.0]})
    assert out["y"] == np.array([0.0])


def test_eval_sum_square():
    t = Tape()
    x = t.input("x", (2,))
    s = t.sum(t.square(x))
    assert float(eval_tape(t, {"x": [3.0, 4.0]}, [s])[0]) == 25.0


def test_eval_log_softmax_uniform():
    t = Tape()
    x = t.input("x", (1, 2))
    y = t.log_softmax(x)
    got = eval_tape(t, {"x": [[0.0, 0.0]]}, [y])[0]
    assert np.allclose(got, -np.log(2.0), atol=1e-12)


def test_grad_tanh_at_zero():
    t = Tape()
    x = t.input("x", (1,))
    y = t.tanh(x)
    g = grad(t, y, ["x"], {"x": [0.0]})["x"]
    assert g == pytest.approx(1.0)


def test_grad_square():
    t = Tape()
    x = t.input("x", ())
    y = t.square(x)
    assert float(grad(t, y, ["x"], {"x": 3.0})["x"]) == pytest.approx(6.0)


def test_grad_three_layer_composite_matches_fd():
    rng = np.random.default_rng(7)
    t = Tape()
    x = t.input("x", (4, 3))
    w1 = t.constant(rng.normal(size=(3, 5)))
    w2 = t.constant(rng.normal(size=(5, 2)))
    out = t.sum(t.tanh(t.matmul(t.tanh(t.matmul(x, w1)), w2)))
    check_grad(t, out, {"x": rng.uniform(-2, 2, (4, 3))}, ["x"], tol=1e-6)


@pytest.mark.parametrize("name", helpers.PRIMITIVE_NAMES)
def test_primitive_gradients_match_fd(name):
    t, out, binds = helpers.build_primitive_case(name)
    check_grad(t, out, binds, list(binds.keys()), tol=1e-6)


def test_eval_referentially_transparent():
    rng = np.random.default_rng(0)
    t = Tape()
    x = t.input("x", (4, 4))
    w = t.constant(rng.normal(size=(4, 4)))
    out = t.log_softmax(t.matmul(t.tanh(x), w))
    xv = rng.normal(size=(4, 4))
    a = eval_tape(t, {"x": xv}, [out])[0]
    b = eval_tape(t, {"x": xv}, [out])[0]
    assert a.tobytes() == b.tobytes()


def _random_scalar_chain(rng):
    """A random op recipe mapping a (3, 3) input node to a scalar."""
    ops = []
    for _ in range(int(rng.integers(2, 6))):
        ops.append(rng.choice(["tanh", "square", "smul", "addc", "mulc"]))
        ops[-1] = (ops[-1], float(rng.uniform(-1.5, 1.5)),
                   rng.uniform(-1, 1, (3, 3)))

    def apply(t, x):
        h = x
        for name, s, c in ops:
            if name == "tanh":
                h = t.tanh(h)
            elif name == "square":
                h = t.square(h)
            elif name == "smul":
                h = t.smul(s, h)
            elif name == "addc":
                h = h + t.constant(c)
            else:
                h = h * t.constant(c)
        return t.sum(h)

    return apply


def test_grad_linear_in_tape_sum_on_random_tapes():
    rng = np.random.default_rng(5)
    for trial in range(10):
        f_chain = _random_scalar_chain(rng)
        g_chain = _random_scalar_chain(rng)
        xv = rng.uniform(-2, 2, (3, 3))

        tf = Tape()
        gf = grad(tf, f_chain(tf, tf.input("x", (3, 3))), ["x"], {"x": xv})["x"]
        tg = Tape()
        gg = grad(tg, g_chain(tg, tg.input("x", (3, 3))), ["x"], {"x": xv})["x"]
        ts = Tape()
        xs = ts.input("x", (3, 3))
        gs = grad(ts, ts.add(f_chain(ts, xs), g_chain(ts, xs)), ["x"], {"x": xv})["x"]
        assert np.allclose(gs, gf + gg, atol=1e-12), trial


def test_grad_zero_for_disconnected_input():
    t = Tape()
    u = t.input("u", (2,))
    z = t.input("z", (3,))
    out = t.sum(t.square(u))
    g = grad(t, out, ["u", "z"], {"u": [1.0, 2.0], "z": [1.0, 1.0, 1.0]})
    assert np.array_equal(g["z"], np.zeros(3))


def test_maxpool_tie_routes_to_lowest_index():
    t = Tape()
    x = t.input("x", (1, 2, 2, 1))
    out = t.sum(t.maxpool2d(x, (2, 2)))
    g = grad(t, out, ["x"], {"x": np.ones((1, 2, 2, 1))})["x"]
    assert list(g.ravel()) == [1.0, 0.0, 0.0, 0.0]


def test_conv2d_same_padding_shapes():
    t = Tape()
    x = t.input("x", (1, 7, 10, 2))
    w = t.constant(np.zeros((3, 3, 2, 4)))
    b = t.constant(np.zeros(4))
    assert t.conv2d(x, w, b, stride=1).shape == (1, 7, 10, 4)
    assert t.conv2d(x, w, b, stride=2).shape == (1, 4, 5, 4)


def test_errors():
    t = Tape()
    x = t.input("x", (2, 2))
    y = t.input("y", (3, 2))
    with pytest.raises(ShapeError):
        t.add(x, y)
    out = t.sum(t.square(x))
    with pytest.raises(UnboundInputError):
        eval_tape(t, {}, [out])
    with pytest.raises(ShapeError) as exc:
        eval_tape(t, {"x": np.zeros((5, 5)), "y": np.zeros((3, 2))}, [out])
    assert "node 0" in str(exc.value)
    with pytest.raises(ShapeError):
        t.run({"x": np.zeros((2, 2))}, [], grad_of=x, wrt=["x"])  # non-scalar
    with pytest.raises(UnboundInputError):
        t.run({"x": np.zeros((2, 2))}, [], grad_of=out, wrt=["nope"])
    with pytest.raises(Exception):
        t.input("x", (1,))  # duplicate name


def test_adam_zero_gradient_is_identity():
    p = [np.array([1.0, -2.0]), np.array(3.0)]
    st = AdamState.for_params(p, lr=0.1)
    q, st = adam_step(p, [np.zeros(2), np.array(0.0)], st)
    assert st.t == 1
    assert np.array_equal(q[0], p[0]) and float(q[1]) == 3.0


def test_adam_first_step_unit_normalized():
    p = [np.array(0.0)]
    st = AdamState.for_params(p, lr=0.1)
    q, _ = adam_step(p, [np.array(1.0)], st)
    assert float(q[0]) == pytest.approx(-0.1, abs=1e-6)


def _reference_adam(x0, lr, steps):
    # textbook bias-corrected update, written independently of the package
    m = v = 0.0
    x = x0
    for t in range(1, steps + 1):
        g = 2.0 * (x - 2.0)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mh = m / (1 - 0.9 ** t)
        vh = v / (1 - 0.999 ** t)
        x = x - lr * mh / (np.sqrt(vh) + 1e-8)
    return x


def test_adam_quadratic_matches_reference():
    p = [np.array(0.0)]
    st = AdamState.for_params(p, lr=0.1)
    for _ in range(100):
        p, st = adam_step(p, [2.0 * (p[0] - 2.0)], st)
    ref = _reference_adam(0.0, 0.1, 100)
    assert float(p[0]) == pytest.approx(ref, abs=1e-12)
    assert abs(float(p[0]) - 2.0) < 0.05


def test_adam_rejects_nonfinite_gradient():
    p = [np.array([0.0])]
    st = AdamState.for_params(p, lr=0.1)
    with pytest.raises(NonFiniteGradientError):
        adam_step(p, [np.array([np.nan])], st)
    with pytest.raises(ShapeError):
        adam_step(p, [np.zeros(3)], st)
