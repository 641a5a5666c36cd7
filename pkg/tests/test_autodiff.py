import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from diffalign.autodiff import (
    Tape,
    Tensor,
    add,
    affine,
    backward,
    checkpoint_segment,
    evaluate_graph,
    exp,
    finite_diff_check,
    logistic,
    matmul,
    multiply,
    no_grad,
    scale,
    sin,
    smooth_abs,
    square,
    sum_,
    SMOOTH_ABS_DELTA,
)
from diffalign.errors import (
    ContractError,
    DeterminismError,
    NumericOverflowError,
    ShapeError,
    TapeReuseError,
)

from helpers import affine_program, matmul_program, primitive_cases, primitive_program


# evaluate_graph examples

def test_affine_identity():
    out = evaluate_graph([Tensor([3.0, 4.0])], lambda x: affine(x, np.eye(2), np.zeros(2)))
    assert np.array_equal(out.data, [3.0, 4.0])


def test_matmul_hand_product():
    out = evaluate_graph([Tensor([[1.0, 2.0], [3.0, 4.0]])], lambda A: matmul(A, Tensor([1.0, 1.0])))
    assert np.array_equal(out.data, [3.0, 7.0])


def test_logistic_zero():
    assert logistic(Tensor(0.0)).item() == 0.5


def test_tape_only_recorded_when_tracked():
    assert evaluate_graph([Tensor([1.0])], square).tape is None
    out = evaluate_graph([Tensor([1.0], requires_grad=True)], square)
    assert out.tape is not None and len(out.tape) == 1


def test_shape_error_names_primitive_and_shapes():
    with pytest.raises(ShapeError) as info:
        add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    assert info.value.primitive == "add"
    assert info.value.shapes == ((3,), (4,))
    with pytest.raises(ShapeError, match="matmul"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_overflow_identifies_op():
    with pytest.raises(NumericOverflowError) as info:
        exp(Tensor([1000.0]))
    assert info.value.op == "exp"


# backward examples

def test_grad_of_sum_of_squares():
    w = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        loss = sum_(square(w))
    assert backward(loss, tape)[w][0] == 6.0


def test_unused_leaf_gets_exact_zero():
    w = Tensor([3.0], requires_grad=True)
    u = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = sum_(square(w))
    grads = backward(loss, tape, [w, u])
    assert np.array_equal(grads[u], [0.0, 0.0])


def test_hand_chain_rule():
    a = Tensor(3.0, requires_grad=True)
    b = Tensor(5.0, requires_grad=True)
    x = Tensor(2.0)
    with Tape() as tape:
        y = multiply(a, multiply(b, x))
    g = backward(y, tape)
    assert g[a] == 10.0 and g[b] == 6.0


def test_every_tracked_leaf_receives_gradient():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([0.5, -1.0], requires_grad=True)
    with Tape() as tape:
        loss = sum_(multiply(a, b))
    grads = backward(loss, tape)
    assert set(map(id, grads)) == {id(a), id(b)}
    assert a.grad is not None and b.grad is not None


def test_non_scalar_loss_rejected():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = square(w)
    with pytest.raises(ContractError):
        backward(y, tape)


def test_tape_reuse_rejected():
    w = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        loss = sum_(square(w))
    backward(loss, tape)
    with pytest.raises(TapeReuseError):
        backward(loss, tape)


def test_loss_must_lie_on_tape():
    w = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        sum_(square(w))
    with Tape():
        other = sum_(square(w))
    with pytest.raises(ContractError):
        backward(other, tape)


def test_no_grad_records_nothing():
    w = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        with no_grad():
            square(w)
    assert len(tape) == 0


# checkpoint_segment

def _affine_chain(x, weights, checkpoint):
    for W in weights:
        def step(h, W=W):
            return sin(affine(h, W))
        x = checkpoint_segment(step, [x]) if checkpoint else step(x)
    return x


def _chain_grads(seed, n_steps, checkpoint, dim=4):
    rng = np.random.default_rng(seed)
    weights = [Tensor(rng.normal(size=(dim, dim)) / 2, requires_grad=True) for _ in range(n_steps)]
    x0 = Tensor(rng.normal(size=(3, dim)), requires_grad=True)
    r = rng.normal(size=(3, dim))
    with Tape() as tape:
        loss = sum_(multiply(_affine_chain(x0, weights, checkpoint), Tensor(r)))
    saved = tape.saved_value_count()
    grads = backward(loss, tape, weights + [x0])
    return [grads[w] for w in weights + [x0]], saved, loss.item()


def test_checkpointed_identity_is_exact():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    with Tape():
        out = checkpoint_segment(lambda h: h, [x])
    assert np.array_equal(out.data, x.data)


def test_ten_step_chain_checkpoint_matches_plain():
    plain, saved_plain, v_plain = _chain_grads(0, 10, checkpoint=False)
    ckpt, saved_ckpt, v_ckpt = _chain_grads(0, 10, checkpoint=True)
    assert v_plain == v_ckpt
    assert max(np.max(np.abs(a - b)) for a, b in zip(plain, ckpt)) <= 1e-12
    assert saved_ckpt < saved_plain


@given(st.integers(0, 10_000), st.integers(2, 6))
def test_checkpoint_gradients_match_for_any_chain(seed, n_steps):
    plain, saved_plain, _ = _chain_grads(seed, n_steps, checkpoint=False)
    ckpt, saved_ckpt, _ = _chain_grads(seed, n_steps, checkpoint=True)
    assert max(np.max(np.abs(a - b)) for a, b in zip(plain, ckpt)) <= 1e-12
    assert saved_ckpt < saved_plain


def test_nondeterministic_segment_detected():
    noise = np.random.default_rng(0)
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        out = checkpoint_segment(lambda h: add(h, Tensor(noise.normal(size=3))), [x])
        loss = sum_(out)
    with pytest.raises(DeterminismError):
        backward(loss, tape)


def test_checkpoint_reaches_closed_over_weights():
    W = Tensor(np.array([[2.0, 0.0], [0.0, 3.0]]), requires_grad=True)
    x = Tensor(np.array([1.0, 1.0]))
    with Tape() as tape:
        loss = sum_(checkpoint_segment(lambda h: affine(h, W), [x]))
    assert np.array_equal(backward(loss, tape, [W])[W], np.ones((2, 2)))


# finite_diff_check

def test_fd_quadratic():
    assert finite_diff_check(lambda w: sum_(square(w)), [Tensor([3.0])], 1e-5) < 1e-8


def test_fd_logistic():
    assert finite_diff_check(lambda w: sum_(logistic(w)), [Tensor([0.7])], 1e-5) < 1e-6


def test_fd_constant_program():
    assert finite_diff_check(lambda w: Tensor(2.0), [Tensor([1.0, 2.0])], 1e-5) == 0.0


def test_fd_eps_bounds():
    for eps in (0.0, 0.1):
        with pytest.raises(ContractError):
            finite_diff_check(lambda w: sum_(w), [Tensor([1.0])], eps)


def test_fd_non_finite_output():
    with pytest.raises(NumericOverflowError):
        finite_diff_check(lambda w: sum_(scale(w, np.inf)), [Tensor([1.0])], 1e-5)


@pytest.mark.parametrize("case", primitive_cases(), ids=lambda c: c[0])
def test_primitive_gradients(case):
    rng = np.random.default_rng(42)
    worst = 0.0
    for trial in range(50):
        inputs, program = primitive_program(case, rng, dim=int(rng.integers(1, 9)))
        worst = max(worst, finite_diff_check(program, inputs, 1e-5))
    assert worst <= 1e-6


def test_smooth_abs_gradient_inside_smoothing_band():
    x0 = np.array([-2e-3, -1e-4, 0.0, 3e-4, 1.2e-3])
    x = Tensor(x0, requires_grad=True)
    with Tape() as tape:
        loss = sum_(smooth_abs(x))
    g = backward(loss, tape)[x]
    assert np.allclose(g, x0 / np.sqrt(x0 ** 2 + SMOOTH_ABS_DELTA), rtol=1e-14, atol=0)
    assert finite_diff_check(lambda v: sum_(smooth_abs(v)), [Tensor(x0)], 1e-7) <= 1e-6


@pytest.mark.parametrize("build", [matmul_program, affine_program], ids=["matmul", "affine"])
def test_linear_primitive_gradients(build):
    rng = np.random.default_rng(7)
    worst = max(finite_diff_check(p, x, 1e-5)
                for x, p in (build(rng, int(rng.integers(1, 9))) for _ in range(50)))
    assert worst <= 1e-6


# invariants

@given(st.integers(0, 10_000))
def test_gradient_accumulation_is_linear(seed):
    rng = np.random.default_rng(seed)
    w0 = rng.normal(size=5)
    r1, r2 = rng.normal(size=5), rng.normal(size=5)

    def l1(w):
        return sum_(multiply(square(w), Tensor(r1)))

    def l2(w):
        return sum_(multiply(sin(w), Tensor(r2)))

    def grad(f):
        w = Tensor(w0.copy(), requires_grad=True)
        with Tape() as tape:
            loss = f(w)
        return backward(loss, tape)[w]

    joint = grad(lambda w: add(l1(w), l2(w)))
    assert np.array_equal(joint, grad(l1) + grad(l2))


def test_grad_accumulates_across_backwards():
    w = Tensor([2.0], requires_grad=True)
    for _ in range(2):
        with Tape() as tape:
            loss = sum_(square(w))
        backward(loss, tape)
    assert w.grad[0] == 8.0


@given(st.integers(0, 10_000))
def test_backward_never_mutates_forward_values(seed):
    rng = np.random.default_rng(seed)
    w = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    x = Tensor(rng.normal(size=(2, 3)))
    with Tape() as tape:
        h = logistic(affine(x, w))
        loss = sum_(square(h))
    before = [rec.output.data.copy() for rec in tape.records]
    outputs = [rec.output for rec in tape.records]
    w_before = w.data.copy()
    backward(loss, tape)
    assert all(np.array_equal(o.data, b) for o, b in zip(outputs, before))
    assert np.array_equal(w.data, w_before)
