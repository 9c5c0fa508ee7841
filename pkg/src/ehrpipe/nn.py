"""Minimal deterministic neural kernel with exact analytic gradients.

Dense, time-convolution (kernel spanning the 4 time bins), simple tanh
recurrence over the bins, inverted dropout, sigmoid, per-label binary
cross-entropy and Adam. Everything is float64 and single-threaded, so a
fixed seed reproduces training trajectories bit for bit. Forward passes
fault on NaN/Inf rather than letting them propagate.

Layer protocol: forward(x, train=False) caches what backward needs;
backward(grad) returns the input gradient and stores parameter gradients
retrievable via grads(), aligned with params().
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidConfig, NonFiniteValue, ShapeMismatch

N_BINS = 4


def _ensure_finite(name: str, arr: np.ndarray) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteValue(f"non-finite values in {name}")
    return arr


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
                   shape: tuple[int, ...]) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class DenseLayer:
    """Affine map y = x W^T + b with W of shape (out, in)."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.weights = glorot_uniform(rng, in_dim, out_dim, (out_dim, in_dim))
        self.bias = np.zeros(out_dim)
        self._x: np.ndarray | None = None
        self.d_weights = np.zeros_like(self.weights)
        self.d_bias = np.zeros_like(self.bias)

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.weights.shape[1]:
            raise ShapeMismatch(
                f"dense expects (B,{self.weights.shape[1]}), got {x.shape}"
            )
        self._x = x
        return _ensure_finite("dense output", x @ self.weights.T + self.bias)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        if self._x is None or grad.shape != (self._x.shape[0],
                                             self.weights.shape[0]):
            raise ShapeMismatch(f"dense backward got {grad.shape}")
        self.d_weights = grad.T @ self._x
        self.d_bias = grad.sum(axis=0)
        return grad @ self.weights

    def params(self):
        return [self.weights, self.bias]

    def grads(self):
        return [self.d_weights, self.d_bias]


class ReluLayer:
    def __init__(self):
        self._x: np.ndarray | None = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        self._x = x
        return np.maximum(x, 0.0)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return grad * (self._x > 0)

    def params(self):
        return []

    def grads(self):
        return []


class DropoutLayer:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p).

    Identity at evaluation time. The mask drawn by the last train-mode
    forward is kept on last_mask (tests freeze it for finite differences).
    """

    def __init__(self, p: float, rng: np.random.Generator):
        if not 0.0 <= p < 1.0:
            raise InvalidConfig(f"dropout probability {p} not in [0,1)")
        self.p = p
        self.rng = rng
        self.last_mask: np.ndarray | None = None
        self._train = False

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        self._train = train
        if not train or self.p == 0.0:
            self.last_mask = None
            return x
        self.last_mask = self.rng.random(x.shape) >= self.p
        return x * self.last_mask / (1.0 - self.p)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        if not self._train or self.last_mask is None:
            return grad
        return grad * self.last_mask / (1.0 - self.p)

    def params(self):
        return []

    def grads(self):
        return []


class FlattenLayer:
    def __init__(self):
        self._shape: tuple[int, ...] | None = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return grad.reshape(self._shape)

    def params(self):
        return []

    def grads(self):
        return []


class TimeConvLayer:
    """Per-type convolution across the 4 time bins.

    filters has shape (n_filters, 1, 4): each filter spans the whole time
    axis of one observation type, so output[b, t, f] = sum_k filt[f, 0, k] *
    x[b, t, k] + bias[f].
    """

    def __init__(self, n_filters: int, rng: np.random.Generator):
        self.filters = glorot_uniform(rng, N_BINS, n_filters,
                                      (n_filters, 1, N_BINS))
        self.bias = np.zeros(n_filters)
        self._x: np.ndarray | None = None
        self.d_filters = np.zeros_like(self.filters)
        self.d_bias = np.zeros_like(self.bias)

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if x.ndim != 3 or x.shape[2] != N_BINS:
            raise ShapeMismatch(f"timeconv expects (B,T,{N_BINS}), got {x.shape}")
        self._x = x
        kernel = self.filters[:, 0, :]  # (F, 4)
        out = np.einsum("btk,fk->btf", x, kernel) + self.bias
        return _ensure_finite("timeconv output", out)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        if self._x is None or grad.shape[:2] != self._x.shape[:2]:
            raise ShapeMismatch(f"timeconv backward got {grad.shape}")
        kernel = self.filters[:, 0, :]
        self.d_filters = np.einsum("btf,btk->fk", grad, self._x)[:, None, :]
        self.d_bias = grad.sum(axis=(0, 1))
        return np.einsum("btf,fk->btk", grad, kernel)

    def params(self):
        return [self.filters, self.bias]

    def grads(self):
        return [self.d_filters, self.d_bias]


class SimpleRnnLayer:
    """Plain tanh recurrence over the 4 bins; the output is the last state.

    h_k = tanh(U x_k + V h_{k-1} + b) with h_{-1} = 0, where x_k is the
    (B, n_types) slice of bin k.
    """

    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator):
        self.input_weights = glorot_uniform(rng, in_dim, hidden,
                                            (hidden, in_dim))
        self.recurrent_weights = glorot_uniform(rng, hidden, hidden,
                                                (hidden, hidden))
        self.bias = np.zeros(hidden)
        self._x: np.ndarray | None = None
        self._states: list[np.ndarray] = []
        self.d_input = np.zeros_like(self.input_weights)
        self.d_recurrent = np.zeros_like(self.recurrent_weights)
        self.d_bias = np.zeros_like(self.bias)

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if x.ndim != 3 or x.shape[2] != N_BINS:
            raise ShapeMismatch(f"rnn expects (B,T,{N_BINS}), got {x.shape}")
        if x.shape[1] != self.input_weights.shape[1]:
            raise ShapeMismatch(
                f"rnn expects {self.input_weights.shape[1]} types, "
                f"got {x.shape[1]}"
            )
        self._x = x
        h = np.zeros((x.shape[0], self.bias.shape[0]))
        self._states = []
        for k in range(N_BINS):
            pre = (x[:, :, k] @ self.input_weights.T
                   + h @ self.recurrent_weights.T + self.bias)
            h = np.tanh(pre)
            self._states.append(h)
        return _ensure_finite("rnn output", h)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        if self._x is None or grad.shape != self._states[-1].shape:
            raise ShapeMismatch(f"rnn backward got {grad.shape}")
        x = self._x
        self.d_input = np.zeros_like(self.input_weights)
        self.d_recurrent = np.zeros_like(self.recurrent_weights)
        self.d_bias = np.zeros_like(self.bias)
        dx = np.zeros_like(x)
        dh = grad
        for k in range(N_BINS - 1, -1, -1):
            h_k = self._states[k]
            dz = dh * (1.0 - h_k * h_k)
            h_prev = (self._states[k - 1] if k > 0
                      else np.zeros_like(self._states[0]))
            self.d_input += dz.T @ x[:, :, k]
            self.d_recurrent += dz.T @ h_prev
            self.d_bias += dz.sum(axis=0)
            dx[:, :, k] = dz @ self.input_weights
            dh = dz @ self.recurrent_weights
        return dx

    def params(self):
        return [self.input_weights, self.recurrent_weights, self.bias]

    def grads(self):
        return [self.d_input, self.d_recurrent, self.d_bias]


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


_CLAMP = 1e-7


def bce_loss(probabilities: np.ndarray,
             targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy over all cells.

    Probabilities are clamped to [1e-7, 1-1e-7]. The returned gradient is
    taken with respect to the pre-sigmoid logits: (p - y) / n_cells, so a
    sigmoid output layer backpropagates directly from it.
    """
    if probabilities.shape != targets.shape:
        raise ShapeMismatch(
            f"probabilities {probabilities.shape} vs targets {targets.shape}"
        )
    p = np.clip(probabilities, _CLAMP, 1.0 - _CLAMP)
    y = targets.astype(np.float64)
    cells = p.size
    loss = float(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).mean())
    _ensure_finite("bce loss", np.asarray(loss))
    return loss, (p - y) / cells


class Adam:
    """Adam with bias correction over a list of parameter arrays (in place)."""

    def __init__(self, params: list[np.ndarray], lr: float = 2e-5,
                 beta1: float = 0.9, beta2: float = 0.999,
                 epsilon: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self.first_moment = [np.zeros_like(p) for p in params]
        self.second_moment = [np.zeros_like(p) for p in params]

    def step(self, grads: list[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ShapeMismatch(
                f"{len(grads)} gradients for {len(self.params)} parameters"
            )
        self.step_count += 1
        t = self.step_count
        for p, g, m, v in zip(self.params, grads, self.first_moment,
                              self.second_moment):
            if g.shape != p.shape:
                raise ShapeMismatch(
                    f"gradient {g.shape} does not match parameter {p.shape}"
                )
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.epsilon)
