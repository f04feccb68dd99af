"""Dense-array primitives: 1x1 convolution, the similarity kernel, AdamW.

Tensors are plain numpy arrays. Persisted arrays are float32 (see io_formats);
all arithmetic here runs in float64 so that sums and finite-difference checks
are accurate and bit-deterministic.
"""

import numpy as np


class NonFiniteError(ArithmeticError):
    """A gradient or objective value stopped being finite."""


def conv1x1_forward(x, weights, bias, activation="none"):
    """Pointwise convolution: out[y,x,co] = act(sum_ci x[y,x,ci] w[ci,co] + b[co]).

    x: (H, W, Cin), weights: (Cin, Cout), bias: (Cout,).
    activation is one of "relu", "sigmoid", "none".
    """
    x = np.asarray(x, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if x.ndim != 3 or weights.ndim != 2 or bias.ndim != 1:
        raise ValueError(
            f"conv1x1_forward: expected ranks (3, 2, 1), "
            f"got ({x.ndim}, {weights.ndim}, {bias.ndim})"
        )
    if x.shape[2] != weights.shape[0] or weights.shape[1] != bias.shape[0]:
        raise ValueError(
            f"conv1x1_forward: shape mismatch, input channels {x.shape[2]} vs "
            f"weights {weights.shape}, bias {bias.shape}"
        )
    z = x @ weights + bias
    if activation == "none":
        return z
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "sigmoid":
        return sigmoid(z)
    raise ValueError(f"conv1x1_forward: unknown activation {activation!r}")


def sigmoid(z):
    # two-branch form avoids overflow for large |z|
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def similarity(f, g, kappa):
    """exp(-||f - g||^2 / kappa); 1 iff f == g. kappa must be positive."""
    if kappa <= 0:
        raise ValueError(f"similarity: kappa must be positive, got {kappa}")
    f = np.asarray(f, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if f.shape != g.shape:
        raise ValueError(f"similarity: shape mismatch {f.shape} vs {g.shape}")
    d2 = float(np.sum((f - g) ** 2))
    return float(np.exp(-d2 / kappa))


def similarity_from_sqdist(d2, kappa):
    """Vectorized similarity kernel on precomputed squared distances."""
    if kappa <= 0:
        raise ValueError(f"similarity: kappa must be positive, got {kappa}")
    return np.exp(np.asarray(d2, dtype=np.float64) / (-kappa))


class AdamWState:
    """Moment buffers plus hyperparameters for one decoupled-decay AdamW run.

    Owned by exactly one optimization loop; step_count increments by one per
    update.
    """

    def __init__(self, shape, beta1=0.9, beta2=0.999, epsilon=1e-8,
                 weight_decay=1e-4):
        self.first_moment = np.zeros(shape, dtype=np.float64)
        self.second_moment = np.zeros(shape, dtype=np.float64)
        self.step_count = 0
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.epsilon = float(epsilon)
        self.weight_decay = float(weight_decay)


def adamw_step(params, grads, state, lr):
    """One AdamW update. Returns (new_params, state); state is updated in place.

    params <- params - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * params)
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.first_moment.shape:
        raise ValueError(
            f"adamw_step: shape mismatch params {params.shape}, grads "
            f"{grads.shape}, state {state.first_moment.shape}"
        )
    if lr <= 0:
        raise ValueError(f"adamw_step: lr must be positive, got {lr}")
    if not np.all(np.isfinite(grads)):
        raise NonFiniteError("adamw_step: non-finite gradient")

    state.step_count += 1
    b1, b2 = state.beta1, state.beta2
    state.first_moment *= b1
    state.first_moment += (1.0 - b1) * grads
    state.second_moment *= b2
    state.second_moment += (1.0 - b2) * grads * grads
    m_hat = state.first_moment / (1.0 - b1 ** state.step_count)
    v_hat = state.second_moment / (1.0 - b2 ** state.step_count)
    new_params = params - lr * (
        m_hat / (np.sqrt(v_hat) + state.epsilon) + state.weight_decay * params
    )
    return new_params, state
