import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from euvptycho.autodiff import (
    GradientSet,
    MulConst,
    Op,
    Square,
    SumAll,
    Tape,
    Variable,
    adjoint_mismatch,
    backpropagate,
    gradcheck,
    mul_const,
    op_adjoint_mismatch,
    square,
    sum_all,
)
from euvptycho.errors import (
    GraphConstructionError,
    InvalidArgumentError,
    NumericalFailureError,
    TapeConsistencyError,
)
from euvptycho.model import Abs2, AddBackground, Interact, ModalSum, ScaleProbe, predict_pattern
from euvptycho.objectives import apply_mask

from conftest import crandn


class Add(Op):
    name = "add"
    linear = True

    def forward(self, a, b):
        return a + b, None

    def backward(self, saved, g, needs):
        return g, g


def test_scalar_chain_rule():
    x = Variable(2.0, "power")
    tape = Tape()
    t = tape.watch(x)
    out = mul_const(square(t), 3.0)
    g = backpropagate(tape, np.asarray(1.0))
    assert out.value == 12.0
    assert g[x.id] == 12.0


def test_complex_convention_is_steepest_descent(rng):
    # L = sum |x|^2 has dL/dRe = 2 Re x, dL/dIm = 2 Im x, so grad = 2 x
    v = crandn(rng, 3, 3)
    x = Variable(v, "object")
    tape = Tape()
    sum_all(square(tape.watch(x)))
    g = backpropagate(tape, np.asarray(1.0))
    assert np.allclose(g[x.id], 2 * v)


def test_two_uses_are_summed(rng):
    v = rng.standard_normal(5)
    x = Variable(v, "background")
    tape = Tape()
    t = tape.watch(x)
    a = sum_all(square(t))
    b = sum_all(mul_const(t, 3.0))
    tape.apply(Add(), a, b)
    g = backpropagate(tape, np.asarray(1.0))
    assert np.allclose(g[x.id], 2 * v + 3)


def test_duplicated_node_doubles_gradient(rng):
    v = crandn(rng, 4, 4)
    x1, x2 = Variable(v, "object"), Variable(v, "object")
    t1 = Tape()
    sum_all(square(t1.watch(x1)))
    single = backpropagate(t1, np.asarray(1.0))[x1.id]
    t2 = Tape()
    t = t2.watch(x2)
    t2.apply(Add(), sum_all(square(t)), sum_all(square(t)))
    double = backpropagate(t2, np.asarray(1.0))[x2.id]
    assert np.allclose(double, 2 * single, rtol=0, atol=1e-14)


def test_unreachable_and_frozen_variables_get_no_entry(rng):
    x = Variable(rng.standard_normal(3), "power")
    y = Variable(rng.standard_normal(3), "power", requires_grad=False)
    z = Variable(rng.standard_normal(3), "power")
    tape = Tape()
    tx, ty = tape.watch(x), tape.watch(y)
    tape.watch(z)
    tape.apply(Add(), sum_all(square(tx)), sum_all(square(ty)))
    g = backpropagate(tape, np.asarray(1.0))
    assert set(g) == {x.id}


def test_gradient_set_accumulate():
    a = GradientSet({1: np.ones(2)})
    b = GradientSet({1: np.ones(2), 2: np.zeros(3)})
    a.accumulate(b)
    assert np.all(a[1] == 2) and a[2].shape == (3,)


def test_tape_errors(rng):
    x = Variable(rng.standard_normal(3), "power")
    tape = Tape()
    t = tape.watch(x)
    with pytest.raises(GraphConstructionError):
        tape.watch(x)
    other = Tape()
    with pytest.raises(GraphConstructionError):
        other.apply(Square(), t)
    square(t)
    with pytest.raises(TapeConsistencyError):
        backpropagate(tape, np.ones(4))
    backpropagate(tape, np.ones(3))
    with pytest.raises(TapeConsistencyError):
        backpropagate(tape, np.ones(3))
    with pytest.raises(TapeConsistencyError):
        backpropagate(Tape(), np.ones(1))
    with pytest.raises(InvalidArgumentError):
        Variable(1.0, "temperature")


def test_shape_mismatch_is_graph_construction_error():
    tape = Tape()
    p = tape.watch(Variable(np.ones((2, 1, 4, 4), complex), "probe"))
    o = tape.watch(Variable(np.ones((1, 1, 4, 4), complex), "object"))
    with pytest.raises(GraphConstructionError):
        tape.apply(Interact(), p, o)


def test_non_finite_forward_names_node():
    tape = Tape(check_finite=True)
    t = tape.watch(Variable(np.ones(3), "power"))
    square(t)
    with pytest.raises(NumericalFailureError) as info:
        mul_const(t, np.inf)
    assert info.value.node == 1


def test_gradcheck_quadratic(rng):
    x = Variable(rng.standard_normal(6) + 1j * rng.standard_normal(6), "object")

    def lg(with_grad):
        tape = Tape()
        out = sum_all(square(tape.watch(x)))
        if with_grad:
            return float(out.value), backpropagate(tape, np.asarray(1.0))
        return float(out.value), None

    # central differences are exact for a quadratic, so a large step only removes roundoff
    rep = gradcheck(lg, [x], eps={"object": 0.1})
    assert rep.errors["object"] <= 1e-10


def test_gradcheck_rejects_non_finite_loss():
    x = Variable(np.ones(2), "power")
    with pytest.raises(NumericalFailureError):
        gradcheck(lambda w: (np.nan, GradientSet()), [x])


def _jvp_error(op, inputs, rng, h=1e-6):
    """Compare the adjoint against central differences of L = Re<c, op(x)> along random directions."""
    out, saved = op.forward(*inputs)
    c = crandn(rng, *np.shape(out)) if np.iscomplexobj(out) else rng.standard_normal(np.shape(out))
    grads = op.backward(saved, c, (True,) * len(inputs))
    worst = 0.0
    for i, (x, g) in enumerate(zip(inputs, grads)):
        x = np.asarray(x)
        d = crandn(rng, *x.shape) if np.iscomplexobj(x) else rng.standard_normal(x.shape)

        def L(v):
            args = list(inputs)
            args[i] = v
            return float(np.real(np.vdot(c, op.forward(*args)[0])))

        fd = (L(x + h * d) - L(x - h * d)) / (2 * h)
        ad = float(np.real(np.vdot(d, g)))
        worst = max(worst, abs(ad - fd) / (abs(fd) + 1e-12))
    return worst


def test_nonlinear_node_jvps(rng):
    p, o = crandn(rng, 1, 2, 8, 8), crandn(rng, 1, 1, 8, 8)
    assert _jvp_error(Abs2(), [crandn(rng, 8, 8)], rng) < 1e-6
    assert _jvp_error(Interact(), [p, o], rng) < 1e-6
    assert _jvp_error(ScaleProbe(), [p, np.asarray(1.3)], rng) < 1e-6
    assert _jvp_error(AddBackground(), [rng.random((8, 8)), rng.standard_normal((8, 8))], rng) < 1e-6
    assert _jvp_error(Square(), [crandn(rng, 8, 8)], rng) < 1e-6


@given(st.integers(0, 2**31))
def test_generic_linear_nodes_dot_test(seed):
    r = np.random.default_rng(seed)
    x, y = crandn(r, 5, 4), crandn(r, 5, 4)
    assert op_adjoint_mismatch(MulConst(0.3 - 2j), x, y) < 1e-12
    assert op_adjoint_mismatch(SumAll(), x, np.asarray(crandn(r, 1)[0])) < 1e-12
    assert op_adjoint_mismatch(ModalSum(), crandn(r, 2, 3, 5, 4), y) < 1e-12
    m = r.random((5, 4)) > 0.5
    assert adjoint_mismatch(lambda v: apply_mask(v, m), lambda v: apply_mask(v, m), x, y) < 1e-12


def test_adjoint_mismatch_detects_wrong_adjoint(rng):
    A = crandn(rng, 6, 6)
    x, y = crandn(rng, 6), crandn(rng, 6)
    assert adjoint_mismatch(lambda v: A @ v, lambda v: A.conj().T @ v, x, y) < 1e-12
    assert adjoint_mismatch(lambda v: A @ v, lambda v: A.T @ v, x, y) > 1e-3


def test_backward_cost_is_bounded_multiple_of_forward():
    from euvptycho.simulator import benchmark_instance

    ds, state = benchmark_instance(2, 2, 1, n=64, n_shots=1)
    fwd, bwd = [], []
    for _ in range(7):
        t0 = time.perf_counter()
        pred, tape = predict_pattern(0, state)
        t1 = time.perf_counter()
        backpropagate(tape, np.ones_like(pred))
        t2 = time.perf_counter()
        fwd.append(t1 - t0)
        bwd.append(t2 - t1)
    assert np.median(bwd) / np.median(fwd) <= 4.0
