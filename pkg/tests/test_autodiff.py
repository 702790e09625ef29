"""Tests for the tensor/tape layer: hand oracles, finite differences, Adam."""

import numpy as np
import pytest

from npattack import autodiff as ad
from npattack.autodiff import Adam, Tape, Tensor, backward, gradient_check
from npattack.errors import ContractViolation


def test_square_gradient_at_three():
    tape = Tape()
    x = tape.leaf(np.array(3.0))
    y = ad.mul(x, x)
    backward(tape, y)
    assert x.grad == pytest.approx(6.0)


def test_identity_gradient():
    tape = Tape()
    x = tape.leaf(np.array(5.0))
    y = ad.add_scalar(x, 0.0)
    backward(tape, y)
    assert x.grad == pytest.approx(1.0)


def test_relu_affine_matches_finite_differences():
    # f(W) = sum(relu(W v)) checked against the central-difference oracle
    rng = np.random.default_rng(3)
    v = rng.normal(size=(3, 1))

    def f(w):
        return ad.sum_all(ad.relu(ad.matmul(w, Tensor(v))))

    err = gradient_check(f, rng.normal(size=(3, 3)), step=1e-4)
    assert err < 1e-3


def test_backward_requires_scalar_loss():
    tape = Tape()
    x = tape.leaf(np.ones((2, 2)))
    y = ad.mul(x, x)
    with pytest.raises(ContractViolation):
        backward(tape, y)


def test_backward_requires_loss_on_tape():
    tape = Tape()
    tape.leaf(np.ones(3))
    other = Tape()
    loss = ad.sum_all(other.leaf(np.ones(3)))
    with pytest.raises(ContractViolation):
        backward(tape, loss)


def test_unreachable_leaf_gets_zero_grad():
    tape = Tape()
    x = tape.leaf(np.ones(3))
    unused = tape.leaf(np.ones(2))
    backward(tape, ad.sum_all(x))
    assert np.array_equal(unused.grad, np.zeros(2))
    assert np.array_equal(x.grad, np.ones(3))


def test_mixed_tapes_raise():
    t1, t2 = Tape(), Tape()
    a = t1.leaf(np.ones(2))
    b = t2.leaf(np.ones(2))
    with pytest.raises(ContractViolation):
        ad.add(a, b)


class TestAttention:
    def test_single_key_returns_value_row(self):
        q = np.array([[0.3, -1.2]])
        k = np.array([[2.0, 0.5]])
        v = np.array([[5.0, 7.0, 9.0]])
        out = ad.scaled_dot_attention(q, k, v)
        assert np.array_equal(out.data, v)

    def test_identical_keys_average_values(self):
        q = np.array([[1.0, 2.0], [0.0, -1.0]])
        k = np.tile(np.array([[0.7, 0.1]]), (4, 1))
        v = np.arange(12.0).reshape(4, 3)
        out = ad.scaled_dot_attention(q, k, v)
        expected = np.tile(v.mean(axis=0), (2, 1))
        assert np.allclose(out.data, expected, atol=1e-12)

    def test_matches_naive_double_loop(self):
        rng = np.random.default_rng(11)
        q, k, v = rng.normal(size=(2, 2)), rng.normal(size=(3, 2)), rng.normal(size=(3, 4))
        out = ad.scaled_dot_attention(q, k, v).data
        # independent loop-based evaluation of the formula
        expected = np.zeros((2, 4))
        for i in range(2):
            scores = np.array([q[i] @ k[j] / np.sqrt(2.0) for j in range(3)])
            weights = np.exp(scores) / np.exp(scores).sum()
            for j in range(3):
                expected[i] += weights[j] * v[j]
        assert np.allclose(out, expected, atol=1e-12)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(5)
        scores = rng.normal(scale=4.0, size=(6, 9))
        out = ad.softmax_rows(Tensor(scores)).data
        assert np.abs(out.sum(axis=1) - 1.0).max() < 1e-9

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ContractViolation):
            ad.scaled_dot_attention(np.ones((2, 3)), np.ones((4, 2)), np.ones((4, 5)))
        with pytest.raises(ContractViolation):
            ad.scaled_dot_attention(np.ones((2, 3)), np.ones((4, 3)), np.ones((5, 2)))


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = Tensor(np.array([1.0, -2.0]))
        p.grad = np.zeros(2)
        opt = Adam([p], lr=0.1)
        opt.step()
        assert np.array_equal(p.data, np.array([1.0, -2.0]))

    def test_first_step_magnitude(self):
        # hand evaluation at t=1: m_hat=g, v_hat=g^2, step ~= lr
        p = Tensor(np.array(0.0))
        p.grad = np.array(1.0)
        opt = Adam([p], lr=0.1, betas=(0.9, 0.999), eps=1e-8)
        opt.step()
        assert float(p.data) == pytest.approx(-0.1, rel=1e-6)

    def test_two_steps_constant_gradient(self):
        # closed-form bias-corrected moments keep the step at ~lr
        p = Tensor(np.array(0.0))
        opt = Adam([p], lr=0.1, betas=(0.9, 0.999), eps=1e-8)
        for _ in range(2):
            p.grad = np.array(1.0)
            opt.step()
        # m2 = 0.19/(1-0.81) = 1, v2 = 0.001999/(1-0.999^2) = 1
        assert float(p.data) == pytest.approx(-0.2, rel=1e-6)

    def test_missing_grad_rejected(self):
        p = Tensor(np.array(0.0))
        with pytest.raises(ContractViolation):
            Adam([p], lr=0.1).step()


class TestGradientCheck:
    def test_linear_function_near_exact(self):
        c = np.array([2.0, -1.0, 0.5])

        def f(x):
            return ad.sum_all(ad.mul(x, Tensor(c)))

        assert gradient_check(f, np.array([1.0, 2.0, 3.0]), step=1e-4) < 1e-10

    def test_sum_of_squares(self):
        rng = np.random.default_rng(0)

        def f(x):
            return ad.sum_all(ad.square(x))

        assert gradient_check(f, rng.normal(size=7), step=1e-4) < 1e-6

    def test_relu_kink_excluded(self):
        def f(x):
            return ad.sum_all(ad.relu(x))

        details = ad.gradient_check_details(f, np.array([1.0, 0.0, -1.0]), step=1e-4)
        assert details.excluded == [1]
        assert details.max_rel_error < 1e-8

    def test_rejects_nonscalar(self):
        with pytest.raises(ContractViolation):
            gradient_check(lambda x: ad.mul(x, x), np.ones(3), step=1e-4)

    def test_rejects_bad_step(self):
        with pytest.raises(ContractViolation):
            gradient_check(lambda x: ad.sum_all(x), np.ones(3), step=0.0)


SMOOTH_CASES = {
    "affine": lambda x: ad.sum_all(ad.affine(x, Tensor(_W), Tensor(_B))),
    "sigmoid": lambda x: ad.sum_all(ad.sigmoid(x)),
    "softplus": lambda x: ad.sum_all(ad.softplus(x)),
    "exp": lambda x: ad.sum_all(ad.exp(x)),
    "log_shifted": lambda x: ad.sum_all(ad.log(ad.add_scalar(ad.square(x), 1.0))),
    "log_softmax": lambda x: ad.sum_all(ad.mul(ad.log_softmax_rows(x), Tensor(_M))),
    "softmax": lambda x: ad.sum_all(ad.mul(ad.softmax_rows(x), Tensor(_M))),
    "attention_q": lambda x: ad.sum_all(ad.scaled_dot_attention(x, Tensor(_K), Tensor(_V))),
    "attention_k": lambda x: ad.sum_all(ad.scaled_dot_attention(Tensor(_Q), x, Tensor(_V3))),
    "attention_v": lambda x: ad.sum_all(
        ad.square(ad.scaled_dot_attention(Tensor(_Q), Tensor(_K3), x))),
    "mean": lambda x: ad.mean_all(ad.square(x)),
    "mean_rows": lambda x: ad.sum_all(ad.square(ad.mean_rows(x))),
    "repeat_rows": lambda x: ad.sum_all(ad.square(ad.repeat_rows(ad.mean_rows(x), 5))),
    "concat_slice": lambda x: ad.sum_all(ad.square(ad.slice_cols(
        ad.concat_cols([x, ad.square(x)]), 1, 5))),
    "div": lambda x: ad.sum_all(ad.div(x, ad.add_scalar(ad.square(x), 2.0))),
    "matmul": lambda x: ad.sum_all(ad.square(ad.matmul(x, Tensor(_W)))),
    "transpose": lambda x: ad.sum_all(ad.square(ad.matmul(ad.transpose(x), x))),
}

_W = np.random.default_rng(1).normal(size=(4, 3))
_B = np.random.default_rng(2).normal(size=3)
_Q = np.random.default_rng(3).normal(size=(3, 4))
_K = np.random.default_rng(4).normal(size=(5, 4))
_V = np.random.default_rng(5).normal(size=(5, 4))
_K3 = np.random.default_rng(9).normal(size=(3, 4))
_V3 = np.random.default_rng(10).normal(size=(3, 4))
_M = np.random.default_rng(6).normal(size=(3, 4))


@pytest.mark.parametrize("name", sorted(SMOOTH_CASES))
def test_primitive_gradients_match_finite_differences(name):
    # property: every smooth primitive agrees with central differences at
    # randomly sampled points
    f = SMOOTH_CASES[name]
    rng = np.random.default_rng(hash(name) % (2**32))
    for trial in range(20):
        point = rng.normal(size=(3, 4))
        assert gradient_check(f, point, step=1e-4) < 1e-3, f"{name} trial {trial}"


def test_relu_gradient_at_random_smooth_points():
    rng = np.random.default_rng(17)
    for _ in range(20):
        point = rng.normal(size=(3, 4))
        point[np.abs(point) < 1e-3] += 0.01  # keep clear of the kink
        err = gradient_check(lambda x: ad.sum_all(ad.square(ad.relu(x))), point, 1e-4)
        assert err < 1e-3


def test_adjoint_additivity_over_independent_subgraphs():
    rng = np.random.default_rng(23)
    xa, xb = rng.normal(size=4), rng.normal(size=4)

    tape = Tape()
    a, b = tape.leaf(xa), tape.leaf(xb)
    joint = ad.add(ad.sum_all(ad.square(a)), ad.sum_all(ad.sigmoid(b)))
    backward(tape, joint)
    ga, gb = a.grad.copy(), b.grad.copy()

    t1 = Tape()
    a1 = t1.leaf(xa)
    backward(t1, ad.sum_all(ad.square(a1)))
    t2 = Tape()
    b1 = t2.leaf(xb)
    backward(t2, ad.sum_all(ad.sigmoid(b1)))

    assert np.array_equal(ga, a1.grad)
    assert np.array_equal(gb, b1.grad)


def test_log_softmax_rows_normalize():
    rng = np.random.default_rng(8)
    out = ad.log_softmax_rows(Tensor(rng.normal(scale=10.0, size=(5, 7)))).data
    assert np.abs(np.exp(out).sum(axis=1) - 1.0).max() < 1e-9


def test_forward_backward_bit_deterministic():
    rng = np.random.default_rng(31)
    x0 = rng.normal(size=(4, 4))
    w = rng.normal(size=(4, 4))

    def run():
        tape = Tape()
        x = tape.leaf(x0.copy())
        h = ad.scaled_dot_attention(x, Tensor(w), ad.sigmoid(x))
        loss = ad.sum_all(ad.square(h))
        backward(tape, loss)
        return loss.data.copy(), x.grad.copy()

    la, ga = run()
    lb, gb = run()
    assert la.tobytes() == lb.tobytes()
    assert ga.tobytes() == gb.tobytes()


def test_take_per_row_gradient():
    rng = np.random.default_rng(41)
    idx = np.array([2, 0, 1])

    def f(x):
        return ad.sum_all(ad.square(ad.take_per_row(x, idx)))

    assert gradient_check(f, rng.normal(size=(3, 4)), step=1e-4) < 1e-6


def test_duplicate_parent_accumulates():
    tape = Tape()
    x = tape.leaf(np.array(2.0))
    backward(tape, ad.mul(x, x))
    assert x.grad == pytest.approx(4.0)
