"""Desk-scale differentiable models with hand-written backward passes.

* a single-head self-attention block ``Z = softmax(Q K^T / sqrt(d)) V``,
* a two-layer regression/classification network whose first layer carries a
  LoRA adapter over a frozen base weight,
* the perturbation-budget experiment comparing activation-error and
  loss-error budgets on the attention block.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .matcore import DimensionError, as_matrix
from .obs_lora import LoraAdapter


# ---------------------------------------------------------------- attention

@dataclass(frozen=True)
class AttentionModule:
    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray

    def __post_init__(self):
        shapes = {as_matrix(w).shape for w in (self.W_Q, self.W_K, self.W_V)}
        if len(shapes) != 1:
            raise DimensionError(f"W_Q, W_K, W_V must share a shape, got {shapes}")

    @property
    def d(self) -> int:
        return self.W_Q.shape[1]

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.d)

    def weights(self) -> dict[str, np.ndarray]:
        return {"W_Q": self.W_Q, "W_K": self.W_K, "W_V": self.W_V}


def random_attention(rng: np.random.Generator, d_model: int, d: int, scale: float = 1.0) -> AttentionModule:
    std = scale / math.sqrt(d_model)
    return AttentionModule(*(rng.normal(0.0, std, (d_model, d)) for _ in range(3)))


def softmax_rows(S: np.ndarray) -> np.ndarray:
    E = np.exp(S - S.max(axis=1, keepdims=True))
    return E / E.sum(axis=1, keepdims=True)


def attention_parts(attn: AttentionModule, X) -> dict[str, np.ndarray]:
    X = as_matrix(X, "X")
    if X.shape[1] != attn.W_Q.shape[0]:
        raise DimensionError(f"X has {X.shape[1]} features, weights expect {attn.W_Q.shape[0]}")
    Q, K, V = X @ attn.W_Q, X @ attn.W_K, X @ attn.W_V
    A = softmax_rows((Q @ K.T) * attn.scale)
    return {"Q": Q, "K": K, "V": V, "A": A, "Z": A @ V}


def attention_forward(attn: AttentionModule, X) -> np.ndarray:
    Z = attention_parts(attn, X)["Z"]
    if not np.all(np.isfinite(Z)):
        raise ArithmeticError("non-finite attention output")
    return Z


def attention_backward(attn: AttentionModule, X, upstream) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. ``W_Q, W_K, W_V`` given ``dL/dZ``."""
    X = as_matrix(X, "X")
    p = attention_parts(attn, X)
    U = as_matrix(upstream, "upstream")
    if U.shape != p["Z"].shape:
        raise DimensionError(f"upstream {U.shape} does not match Z {p['Z'].shape}")
    A, Q, K, V = p["A"], p["Q"], p["K"], p["V"]
    dV = A.T @ U
    dA = U @ V.T
    dS = A * (dA - np.sum(dA * A, axis=1, keepdims=True))
    dQ = attn.scale * dS @ K
    dK = attn.scale * dS.T @ Q
    return {"W_Q": X.T @ dQ, "W_K": X.T @ dK, "W_V": X.T @ dV}


def attention_loss(attn: AttentionModule, X, Y) -> float:
    """``1/2 ||Z - Y||_F^2``."""
    R = attention_forward(attn, X) - Y
    return 0.5 * float(np.sum(R * R))


def attention_loss_grad(attn: AttentionModule, X, Y) -> tuple[float, dict[str, np.ndarray]]:
    R = attention_forward(attn, X) - Y
    return 0.5 * float(np.sum(R * R)), attention_backward(attn, X, R)


# ---------------------------------------------------------------- LoRA model

class LossKind(enum.Enum):
    SQUARED_ERROR = "squared_error"
    CROSS_ENTROPY = "cross_entropy"


@dataclass(frozen=True)
class LoraModel:
    """``out = tanh(X (W0 + s B A)^T) W2^T``.

    ``W0`` (hidden x n_in) is frozen; ``W2`` (n_out x hidden) is trained only
    when ``train_head`` is set.
    """
    W0: np.ndarray
    adapter: LoraAdapter
    W2: np.ndarray
    loss_kind: LossKind = LossKind.SQUARED_ERROR
    train_head: bool = False

    def __post_init__(self):
        if self.adapter.B.shape[0] != self.W0.shape[0] or self.adapter.A.shape[1] != self.W0.shape[1]:
            raise DimensionError("adapter does not match W0")
        if self.W2.shape[1] != self.W0.shape[0]:
            raise DimensionError("W2 does not match the hidden width")

    @property
    def rank(self) -> int:
        return self.adapter.rank

    def effective_weight(self) -> np.ndarray:
        return self.W0 + self.adapter.delta_weight()

    def with_adapter(self, adapter: LoraAdapter) -> "LoraModel":
        return replace(self, adapter=adapter)


def _logsumexp(Z: np.ndarray) -> np.ndarray:
    m = Z.max(axis=1, keepdims=True)
    return (m + np.log(np.sum(np.exp(Z - m), axis=1, keepdims=True)))[:, 0]


def _forward(model: LoraModel, X: np.ndarray):
    pre = X @ model.effective_weight().T
    h = np.tanh(pre)
    return h, h @ model.W2.T


def _loss_and_dout(model: LoraModel, out: np.ndarray, Y):
    N = out.shape[0]
    if model.loss_kind is LossKind.SQUARED_ERROR:
        R = out - Y
        return 0.5 * float(np.sum(R * R)) / N, R / N
    labels = np.asarray(Y, dtype=np.intp).reshape(-1)
    lse = _logsumexp(out)
    loss = float(np.mean(lse - out[np.arange(N), labels]))
    P = np.exp(out - lse[:, None])
    P[np.arange(N), labels] -= 1.0
    return loss, P / N


def lora_forward(model: LoraModel, X, Y) -> float:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.W0.shape[1]:
        raise DimensionError(f"batch {X.shape} does not match model input {model.W0.shape[1]}")
    _, out = _forward(model, X)
    loss, _ = _loss_and_dout(model, out, Y)
    if not math.isfinite(loss):
        raise ArithmeticError("non-finite loss")
    return loss


def lora_backward(model: LoraModel, X, Y) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and gradients ``{"A", "B"}`` (plus ``"W2"`` when the head trains)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.W0.shape[1]:
        raise DimensionError(f"batch {X.shape} does not match model input {model.W0.shape[1]}")
    h, out = _forward(model, X)
    loss, dout = _loss_and_dout(model, out, Y)
    if not math.isfinite(loss):
        raise ArithmeticError("non-finite loss")
    dpre = (dout @ model.W2) * (1.0 - h * h)
    dW = dpre.T @ X
    s = model.adapter.scaling
    grads = {"A": s * model.adapter.B.T @ dW, "B": s * dW @ model.adapter.A.T}
    if model.train_head:
        grads["W2"] = dout.T @ h
    return loss, grads


@dataclass(frozen=True)
class TeacherTask:
    """Synthetic regression data from a teacher sharing the student's frozen parts."""
    seed: int
    X: np.ndarray
    Y: np.ndarray
    X_eval: np.ndarray
    Y_eval: np.ndarray
    W0: np.ndarray
    W2: np.ndarray
    target_update: np.ndarray = field(repr=False)


def make_teacher_task(seed: int, n_in: int = 16, hidden: int = 16, n_out: int = 8,
                      n_samples: int = 256, teacher_rank: int = 8, decay: float = 0.6,
                      update_scale: float = 1.5) -> TeacherTask:
    """Teacher ``tanh(X (W0 + dW*)^T) W2^T`` with a rank-``teacher_rank`` update.

    The update's singular values decay geometrically by ``decay`` so a
    smaller student rank can still capture most of it.
    """
    rng = np.random.default_rng(seed)
    W0 = rng.normal(0.0, 1.0 / math.sqrt(n_in), (hidden, n_in))
    W2 = rng.normal(0.0, 1.0 / math.sqrt(hidden), (n_out, hidden))
    U, _ = np.linalg.qr(rng.normal(size=(hidden, teacher_rank)))
    V, _ = np.linalg.qr(rng.normal(size=(n_in, teacher_rank)))
    sv = update_scale * decay ** np.arange(teacher_rank)
    dW = (U * sv) @ V.T
    X = rng.normal(size=(n_samples, n_in))
    X_eval = rng.normal(size=(n_samples, n_in))
    Wt = W0 + dW
    Y = np.tanh(X @ Wt.T) @ W2.T
    Y_eval = np.tanh(X_eval @ Wt.T) @ W2.T
    return TeacherTask(seed, X, Y, X_eval, Y_eval, W0, W2, dW)


def init_lora_model(task: TeacherTask, rank: int, alpha: float, rng: np.random.Generator,
                    loss_kind: LossKind = LossKind.SQUARED_ERROR, train_head: bool = False) -> LoraModel:
    """Gaussian ``A``, zero ``B``."""
    n_in, hidden = task.W0.shape[1], task.W0.shape[0]
    A = rng.normal(0.0, 1.0 / math.sqrt(n_in), (rank, n_in))
    B = np.zeros((hidden, rank))
    return LoraModel(task.W0, LoraAdapter(A, B, alpha), task.W2, loss_kind, train_head)


# ---------------------------------------------------------------- perturbation budgets

class Criterion(enum.Enum):
    ACTIVATION_ERROR = "activation"
    GRADIENT_LOSS_ERROR = "gradient"


@dataclass(frozen=True)
class PerturbationBudget:
    epsilon: float
    criterion: Criterion

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


class CalibrationError(RuntimeError):
    pass


def calibrate_perturbation(weight, direction, budget: PerturbationBudget, *, X=None,
                           loss_fn=None, max_iter: int = 200) -> np.ndarray:
    """Scale ``direction`` so the budget's criterion lands in ``[0.99 eps, eps]``.

    The scale is searched in ``[0, 1]``: if the whole direction already
    stays within the budget it is returned untouched. ``X`` is the module input
    (rows are tokens, the module output is ``X @ weight``); ``loss_fn`` maps a
    perturbed weight to the loss.
    """
    D = as_matrix(direction, "direction")
    W = as_matrix(weight, "weight")
    if not np.any(D):
        raise ValueError("direction must be nonzero")
    eps = budget.epsilon
    if budget.criterion is Criterion.ACTIVATION_ERROR:
        if X is None:
            raise ValueError("activation criterion needs X")
        size = float(np.linalg.norm(np.asarray(X) @ D))
        if size <= eps:
            return D.copy()
        return (eps / size) * D
    if loss_fn is None:
        raise ValueError("gradient criterion needs loss_fn")
    base = float(loss_fn(W))

    def f(t):
        return abs(float(loss_fn(W + t * D)) - base)

    if f(1.0) <= eps:
        return D.copy()
    lo, hi = 0.0, 1.0
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        v = f(mid)
        if 0.99 * eps <= v <= eps:
            return mid * D
        if v < 0.99 * eps:
            lo = mid
        else:
            hi = mid
    raise CalibrationError("loss change did not settle inside the budget along the ray")


def column_direction(W: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Direction that zeroes one randomly chosen nonzero column of ``W``."""
    norms = np.linalg.norm(W, axis=0)
    live = np.flatnonzero(norms > 0)
    D = np.zeros_like(W)
    if len(live):
        j = int(rng.choice(live))
        D[:, j] = -W[:, j]
    return D


def random_direction(W: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    R = rng.normal(size=W.shape)
    scale = np.linalg.norm(W) or 1.0
    return R * (scale / np.linalg.norm(R))


@dataclass
class BoundTrial:
    trial: int
    direction_kind: str
    activation_error: float
    activation_bound: float
    sequential_loss_change: float
    gradient_bound: float
    joint_loss_change: float

    @property
    def activation_ok(self) -> bool:
        return self.activation_error <= self.activation_bound

    @property
    def gradient_ok(self) -> bool:
        return self.sequential_loss_change <= self.gradient_bound


def _perturbed(attn: AttentionModule, **deltas) -> AttentionModule:
    w = attn.weights()
    for name, D in deltas.items():
        w[name] = w[name] + D
    return AttentionModule(**w)


def proposition_experiment(attn: AttentionModule, X, loss_fn, epsilon: float, trials: int,
                           rng: np.random.Generator, random_every: int = 2) -> list[BoundTrial]:
    """Run the two perturbation-budget checks ``trials`` times.

    Activation budget: each of Q, K, V is perturbed so ``||X dW||_F <= eps``,
    all three applied jointly, and ``||Z - Z_hat||_F`` is compared with
    ``(1 + (||Q||_F + ||K||_F) / sqrt(d) * ||V_hat||_F) * eps``.

    Loss budget: the modules are perturbed one after another, each step's loss
    change calibrated to at most ``eps`` against the previous state, and the
    total change is compared with ``3 eps``. The same three per-module
    calibrations applied jointly are reported but not bounded.

    Every ``random_every``-th trial uses random directions instead of
    column-zeroing ones. ``loss_fn`` maps an :class:`AttentionModule` to a loss.
    """
    X = as_matrix(X, "X")
    names = ("W_Q", "W_K", "W_V")
    act_budget = PerturbationBudget(epsilon, Criterion.ACTIVATION_ERROR)
    loss_budget = PerturbationBudget(epsilon, Criterion.GRADIENT_LOSS_ERROR)
    parts = attention_parts(attn, X)
    Z = parts["Z"]
    base_loss = float(loss_fn(attn))
    out = []
    for t in range(trials):
        use_random = random_every > 0 and t % random_every == random_every - 1
        kind = "random" if use_random else "column"
        make = random_direction if use_random else column_direction
        dirs = {n: make(getattr(attn, n), rng) for n in names}

        deltas = {n: (calibrate_perturbation(getattr(attn, n), D, act_budget, X=X) if np.any(D)
                      else np.zeros_like(D)) for n, D in dirs.items()}
        hat = _perturbed(attn, **deltas)
        hat_parts = attention_parts(hat, X)
        act_err = float(np.linalg.norm(Z - hat_parts["Z"]))
        bound = (1.0 + (np.linalg.norm(parts["Q"]) + np.linalg.norm(parts["K"])) * attn.scale
                 * np.linalg.norm(hat_parts["V"])) * epsilon

        state = attn
        joint = {}
        for n in names:
            D = dirs[n]
            if not np.any(D):
                continue
            cur = state

            def lf(Wn, cur=cur, n=n):
                return loss_fn(_perturbed(cur, **{n: Wn - getattr(cur, n)}))

            step = calibrate_perturbation(getattr(cur, n), D, loss_budget, loss_fn=lf)
            state = _perturbed(cur, **{n: step})

            def lf0(Wn, n=n):
                return loss_fn(_perturbed(attn, **{n: Wn - getattr(attn, n)}))

            joint[n] = calibrate_perturbation(getattr(attn, n), D, loss_budget, loss_fn=lf0)
        seq_change = abs(float(loss_fn(state)) - base_loss)
        joint_change = abs(float(loss_fn(_perturbed(attn, **joint))) - base_loss) if joint else 0.0
        out.append(BoundTrial(t, kind, act_err, float(bound), seq_change, 3.0 * epsilon, joint_change))
    return out
