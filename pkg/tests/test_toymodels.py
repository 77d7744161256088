import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from obsprune.matcore import DimensionError
from obsprune.obs_lora import LoraAdapter
from obsprune.oracle import finite_diff_gradient, relative_error
from obsprune.toymodels import (
    AttentionModule,
    CalibrationError,
    Criterion,
    LossKind,
    LoraModel,
    PerturbationBudget,
    attention_backward,
    attention_forward,
    attention_loss,
    attention_loss_grad,
    attention_parts,
    calibrate_perturbation,
    column_direction,
    init_lora_model,
    lora_backward,
    lora_forward,
    make_teacher_task,
    proposition_experiment,
    random_attention,
)


def straight_line_attention(WQ, WK, WV, X):
    n, d = X.shape[0], WQ.shape[1]
    Q, K, V = X @ WQ, X @ WK, X @ WV
    Z = np.zeros((n, d))
    for i in range(n):
        logits = [float(Q[i] @ K[j]) / math.sqrt(d) for j in range(n)]
        mx = max(logits)
        w = [math.exp(s - mx) for s in logits]
        tot = sum(w)
        for j in range(n):
            Z[i] += (w[j] / tot) * V[j]
    return Z


def test_attention_shape_invariant():
    with pytest.raises(DimensionError):
        AttentionModule(np.ones((3, 2)), np.ones((3, 2)), np.ones((3, 3)))


def test_forward_examples():
    rng = np.random.default_rng(0)
    attn = random_attention(rng, 5, 3)
    x = rng.normal(size=(1, 5))
    np.testing.assert_allclose(attention_forward(attn, x), x @ attn.W_V)
    flat = AttentionModule(np.zeros((5, 3)), np.zeros((5, 3)), attn.W_V)
    X = rng.normal(size=(6, 5))
    np.testing.assert_allclose(attention_forward(flat, X), np.tile((X @ attn.W_V).mean(axis=0), (6, 1)))
    np.testing.assert_allclose(attention_forward(attn, X), straight_line_attention(attn.W_Q, attn.W_K, attn.W_V, X),
                               atol=1e-12)


def test_softmax_rows_are_distributions():
    rng = np.random.default_rng(1)
    attn = random_attention(rng, 4, 4, scale=30.0)
    A = attention_parts(attn, rng.normal(size=(8, 4)))["A"]
    np.testing.assert_allclose(A.sum(axis=1), 1.0, atol=1e-12)
    assert np.all((A >= 0) & (A <= 1))


def test_backward_examples():
    rng = np.random.default_rng(2)
    attn = random_attention(rng, 4, 3)
    X = rng.normal(size=(5, 4))
    for g in attention_backward(attn, X, np.zeros((5, 3))).values():
        np.testing.assert_array_equal(g, 0.0)
    one = AttentionModule(np.array([[0.7]]), np.array([[-1.1]]), np.array([[0.4]]))
    g = attention_backward(one, np.array([[2.0]]), np.array([[3.0]]))
    np.testing.assert_allclose(g["W_V"], [[6.0]])
    np.testing.assert_allclose(g["W_Q"], [[0.0]], atol=1e-15)
    np.testing.assert_allclose(g["W_K"], [[0.0]], atol=1e-15)
    with pytest.raises(DimensionError):
        attention_backward(attn, X, np.zeros((5, 2)))


def test_attention_loss_grad_fd():
    rng = np.random.default_rng(3)
    attn = random_attention(rng, 6, 4)
    X = rng.normal(size=(7, 6))
    Y = rng.normal(size=(7, 4))
    loss, grads = attention_loss_grad(attn, X, Y)
    assert loss == attention_loss(attn, X, Y)
    for name in ("W_Q", "W_K", "W_V"):
        def f(Wn, name=name):
            w = attn.weights()
            w[name] = Wn
            return attention_loss(AttentionModule(**w), X, Y)
        assert relative_error(grads[name], finite_diff_gradient(f, getattr(attn, name))) < 1e-5


def small_model(rng, loss_kind=LossKind.SQUARED_ERROR, train_head=False, r=3):
    W0 = rng.normal(size=(5, 4)) / 2
    ad = LoraAdapter(rng.normal(size=(r, 4)), rng.normal(size=(5, r)) / 2, alpha=2.0)
    return LoraModel(W0, ad, rng.normal(size=(3, 5)) / 2, loss_kind, train_head)


def test_lora_zero_adapter_is_base_model():
    rng = np.random.default_rng(4)
    m = small_model(rng)
    m = m.with_adapter(LoraAdapter(m.adapter.A, np.zeros_like(m.adapter.B), m.adapter.alpha))
    X = rng.normal(size=(9, 4))
    base_out = np.tanh(X @ m.W0.T) @ m.W2.T
    assert lora_forward(m, X, base_out) == 0.0
    loss, grads = lora_backward(m, X, base_out)
    assert loss == 0.0
    np.testing.assert_array_equal(grads["A"], 0.0)
    np.testing.assert_array_equal(grads["B"], 0.0)


@pytest.mark.parametrize("loss_kind,train_head", [(LossKind.SQUARED_ERROR, False),
                                                  (LossKind.SQUARED_ERROR, True),
                                                  (LossKind.CROSS_ENTROPY, True)])
def test_lora_backward_fd(loss_kind, train_head):
    rng = np.random.default_rng(5)
    m = small_model(rng, loss_kind, train_head)
    X = rng.normal(size=(6, 4))
    Y = rng.normal(size=(6, 3)) if loss_kind is LossKind.SQUARED_ERROR else rng.integers(0, 3, size=6)
    _, grads = lora_backward(m, X, Y)
    ad = m.adapter

    def via_A(A):
        return lora_forward(m.with_adapter(LoraAdapter(A, ad.B, ad.alpha)), X, Y)

    def via_B(B):
        return lora_forward(m.with_adapter(LoraAdapter(ad.A, B, ad.alpha)), X, Y)

    assert relative_error(grads["A"], finite_diff_gradient(via_A, ad.A)) < 1e-5
    assert relative_error(grads["B"], finite_diff_gradient(via_B, ad.B)) < 1e-5
    if train_head:
        fd = finite_diff_gradient(lambda W2: lora_forward(replace(m, W2=W2), X, Y), m.W2)
        assert relative_error(grads["W2"], fd) < 1e-5
    else:
        assert "W2" not in grads


def test_cross_entropy_is_stable():
    rng = np.random.default_rng(6)
    m = small_model(rng, LossKind.CROSS_ENTROPY)
    m = LoraModel(m.W0, m.adapter, m.W2 * 1e4, m.loss_kind)
    assert math.isfinite(lora_forward(m, rng.normal(size=(4, 4)), np.zeros(4, dtype=int)))


def test_teacher_task_is_seeded():
    a, b = make_teacher_task(3), make_teacher_task(3)
    np.testing.assert_array_equal(a.X, b.X)
    np.testing.assert_array_equal(a.Y, b.Y)
    assert np.linalg.matrix_rank(make_teacher_task(3, teacher_rank=4).target_update) == 4
    model = init_lora_model(a, 6, 6.0, np.random.default_rng(0))
    assert model.rank == 6
    np.testing.assert_array_equal(model.adapter.B, 0.0)


def test_calibrate_activation_examples():
    rng = np.random.default_rng(7)
    W = rng.normal(size=(4, 3))
    D = rng.normal(size=(4, 3))
    eps = 0.05
    out = calibrate_perturbation(W, D, PerturbationBudget(eps, Criterion.ACTIVATION_ERROR), X=np.eye(4))
    np.testing.assert_allclose(out, eps / np.linalg.norm(D) * D)
    Z = -W.copy()
    Z[:, 1:] = 0.0
    out = calibrate_perturbation(W, Z, PerturbationBudget(1e3, Criterion.ACTIVATION_ERROR), X=np.eye(4))
    np.testing.assert_array_equal(out, Z)
    with pytest.raises(ValueError):
        calibrate_perturbation(W, np.zeros_like(W), PerturbationBudget(eps, Criterion.ACTIVATION_ERROR),
                               X=np.eye(4))
    with pytest.raises(ValueError):
        PerturbationBudget(0.0, Criterion.ACTIVATION_ERROR)


def test_calibrate_loss_on_attention():
    rng = np.random.default_rng(8)
    attn = random_attention(rng, 4, 4)
    X = rng.normal(size=(8, 4))
    Y = rng.normal(size=(8, 4))

    def f(Wv):
        return attention_loss(AttentionModule(attn.W_Q, attn.W_K, Wv), X, Y)

    eps = 1e-2
    D = column_direction(attn.W_V, rng) * 10
    step = calibrate_perturbation(attn.W_V, D, PerturbationBudget(eps, Criterion.GRADIENT_LOSS_ERROR), loss_fn=f)
    change = abs(f(attn.W_V + step) - f(attn.W_V))
    assert 0.99 * eps <= change <= eps


def test_calibrate_reports_failure():
    # a loss that jumps straight over the budget window cannot be calibrated
    def jump(W):
        return 0.0 if W[0, 0] < 0.5 else 1.0

    with pytest.raises(CalibrationError):
        calibrate_perturbation(np.zeros((1, 1)), np.ones((1, 1)),
                               PerturbationBudget(0.1, Criterion.GRADIENT_LOSS_ERROR), loss_fn=jump)


def test_proposition_zero_query_key():
    rng = np.random.default_rng(9)
    base = random_attention(rng, 4, 4)
    attn = AttentionModule(np.zeros((4, 4)), np.zeros((4, 4)), base.W_V)
    X = rng.normal(size=(8, 4))
    Y = rng.normal(size=(8, 4))
    trials = proposition_experiment(attn, X, lambda a: attention_loss(a, X, Y), 1e-2, 6, rng)
    for t in trials:
        assert t.activation_bound == pytest.approx(1e-2)
        assert t.activation_ok and t.gradient_ok


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 5e-2))
def test_proposition_bounds_hold(seed, eps):
    rng = np.random.default_rng(seed)
    attn = random_attention(rng, 4, 4)
    X = rng.normal(size=(8, 4))
    Y = rng.normal(size=(8, 4))
    for t in proposition_experiment(attn, X, lambda a: attention_loss(a, X, Y), eps, 4, rng):
        assert t.activation_ok and t.gradient_ok


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 8), st.integers(1, 8), st.integers(1, 8))
def test_attention_gradients_property(seed, d_model, d, tokens):
    rng = np.random.default_rng(seed)
    attn = random_attention(rng, d_model, d)
    X = rng.normal(size=(tokens, d_model))
    U = rng.normal(size=(tokens, d))
    grads = attention_backward(attn, X, U)
    for name in ("W_Q", "W_K", "W_V"):
        def f(Wn, name=name):
            w = attn.weights()
            w[name] = Wn
            return float(np.sum(U * attention_forward(AttentionModule(**w), X)))
        fd = finite_diff_gradient(f, getattr(attn, name))
        assert np.linalg.norm(grads[name] - fd) <= 1e-5 * max(np.linalg.norm(fd), np.linalg.norm(grads[name]), 1e-3)
