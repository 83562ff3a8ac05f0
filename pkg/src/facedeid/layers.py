"""From-scratch neural network building blocks (float64, numpy only).

Conventions:
  * Feature maps are NHWC float64 arrays, dense activations are (N, D).
  * forward(x, training) caches whatever backward needs; backward(grad)
    accumulates parameter gradients in place and returns the input grad.
  * Gradients are of the mean batch loss, so layers never rescale them.

Every layer is exercised by central finite differences in the test suite,
so any change here must keep gradients exact, not approximate.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TrainConfig:
    """Shared training knobs. The seed fixes all randomness of a run."""

    epochs: int
    batch_size: int
    learning_rate: float = 1e-3
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")


class Layer:
    """Base layer: no parameters, identity bookkeeping."""

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def grads(self) -> dict[str, np.ndarray]:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        """Non-trained state that still belongs in a checkpoint."""
        return {}

    def zero_grads(self) -> None:
        for g in self.grads().values():
            g[...] = 0.0


class Dense(Layer):
    """Affine map x @ w + b with uniform fan-in initialization."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        limit = 1.0 / np.sqrt(n_in)
        self.w = rng.uniform(-limit, limit, size=(n_in, n_out))
        self.b = np.zeros(n_out)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)
        self._x = None

    def params(self):
        return {"w": self.w, "b": self.b}

    def grads(self):
        return {"w": self.dw, "b": self.db}

    def forward(self, x, training=False):
        self._x = x
        return x @ self.w + self.b

    def backward(self, grad):
        self.dw += self._x.T @ grad
        self.db += grad.sum(axis=0)
        return grad @ self.w.T


class Conv2d(Layer):
    """3x3 (or kxk) same-padding convolution on NHWC maps, stride 1.

    Implemented as k*k shifted matmuls, which beats im2col at the small
    channel counts used here.
    """

    def __init__(self, c_in: int, c_out: int, ksize: int, rng: np.random.Generator):
        if ksize % 2 != 1:
            raise ValueError(f"kernel size must be odd, got {ksize}")
        fan_in = ksize * ksize * c_in
        limit = 1.0 / np.sqrt(fan_in)
        self.w = rng.uniform(-limit, limit, size=(ksize, ksize, c_in, c_out))
        self.b = np.zeros(c_out)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)
        self.ksize = ksize
        self._xp = None
        self._shape = None

    def params(self):
        return {"w": self.w, "b": self.b}

    def grads(self):
        return {"w": self.dw, "b": self.db}

    def forward(self, x, training=False):
        k = self.ksize
        p = k // 2
        n, h, w, _ = x.shape
        c_out = self.w.shape[3]
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        out = np.tile(self.b, (n, h, w, 1))
        for i in range(k):
            for j in range(k):
                window = xp[:, i : i + h, j : j + w, :].reshape(n * h * w, -1)
                out += (window @ self.w[i, j]).reshape(n, h, w, c_out)
        self._xp = xp
        self._shape = x.shape
        return out

    def backward(self, grad):
        k = self.ksize
        p = k // 2
        n, h, w, c_in = self._shape
        gf = grad.reshape(n * h * w, -1)
        self.db += gf.sum(axis=0)
        dxp = np.zeros_like(self._xp)
        for i in range(k):
            for j in range(k):
                window = self._xp[:, i : i + h, j : j + w, :].reshape(n * h * w, -1)
                self.dw[i, j] += window.T @ gf
                dxp[:, i : i + h, j : j + w, :] += (gf @ self.w[i, j].T).reshape(
                    n, h, w, c_in
                )
        return dxp[:, p : p + h, p : p + w, :]


class BatchNorm(Layer):
    """Per-channel batch normalization for NHWC maps or (N, D) activations.

    Training mode normalizes with batch statistics (biased variance) and
    updates running statistics with momentum; inference mode uses the
    stored running statistics.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.9):
        self.gamma = np.ones(channels)
        self.beta = np.zeros(channels)
        self.dgamma = np.zeros_like(self.gamma)
        self.dbeta = np.zeros_like(self.beta)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.eps = eps
        self.momentum = momentum
        self._cache = None
        self.last_batch_mean = None
        self.last_batch_var = None

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def grads(self):
        return {"gamma": self.dgamma, "beta": self.dbeta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x, training=False):
        axes = tuple(range(x.ndim - 1))
        if training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            self.last_batch_mean = mean
            self.last_batch_var = var
            self.running_mean[...] = (
                self.momentum * self.running_mean + (1.0 - self.momentum) * mean
            )
            self.running_var[...] = (
                self.momentum * self.running_var + (1.0 - self.momentum) * var
            )
        else:
            mean = self.running_mean
            var = self.running_var
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv
        self._cache = (xhat, inv, axes, training)
        return self.gamma * xhat + self.beta

    def backward(self, grad):
        xhat, inv, axes, training = self._cache
        self.dgamma += (grad * xhat).sum(axis=axes)
        self.dbeta += grad.sum(axis=axes)
        if not training:
            return grad * (self.gamma * inv)
        gx = grad * self.gamma
        return inv * (gx - gx.mean(axis=axes) - xhat * (gx * xhat).mean(axis=axes))

    @property
    def normalized(self):
        """Most recent x-hat (pre scale/shift); used by invariant checks."""
        return self._cache[0] if self._cache is not None else None

    def set_running_stats(self, mean: np.ndarray, var: np.ndarray) -> None:
        self.running_mean[...] = mean
        self.running_var[...] = var


class LeakyReLU(Layer):
    """max(x, slope * x); default slope 0.01."""

    def __init__(self, slope: float = 0.01):
        self.slope = slope
        self._pos = None

    def forward(self, x, training=False):
        self._pos = x >= 0
        return np.where(self._pos, x, self.slope * x)

    def backward(self, grad):
        return np.where(self._pos, grad, self.slope * grad)


class Sigmoid(Layer):
    """Logistic squashing to (0, 1)."""

    def __init__(self):
        self._out = None

    def forward(self, x, training=False):
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        self._out = out
        return out

    def backward(self, grad):
        return grad * self._out * (1.0 - self._out)


class UpsampleNearest2x(Layer):
    """Nearest-neighbor 2x upscaling of NHWC maps."""

    def forward(self, x, training=False):
        return x.repeat(2, axis=1).repeat(2, axis=2)

    def backward(self, grad):
        n, h2, w2, c = grad.shape
        return grad.reshape(n, h2 // 2, 2, w2 // 2, 2, c).sum(axis=(2, 4))


class AvgPool2x(Layer):
    """2x2 average pooling; input height/width must be even."""

    def forward(self, x, training=False):
        n, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"AvgPool2x needs even dims, got {h}x{w}")
        self._shape = x.shape
        return x.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))

    def backward(self, grad):
        n, h, w, c = self._shape
        g = grad / 4.0
        g = g[:, :, None, :, None, :]
        return np.broadcast_to(g, (n, h // 2, 2, w // 2, 2, c)).reshape(n, h, w, c)


class Flatten(Layer):
    """NHWC map to (N, H*W*C) and back."""

    def forward(self, x, training=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


class Network:
    """Base for models built from named layers."""

    def __init__(self):
        self._layers: list[tuple[str, Layer]] = []

    def add(self, name: str, layer: Layer) -> Layer:
        self._layers.append((name, layer))
        return layer

    def named_parameters(self) -> list[tuple[str, np.ndarray, np.ndarray]]:
        out = []
        for lname, layer in self._layers:
            grads = layer.grads()
            for pname, value in layer.params().items():
                out.append((f"{lname}.{pname}", value, grads[pname]))
        return out

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for lname, layer in self._layers:
            for bname, value in layer.buffers().items():
                out.append((f"{lname}.{bname}", value))
        return out

    def zero_grads(self) -> None:
        for _, layer in self._layers:
            layer.zero_grads()

    @property
    def param_count(self) -> int:
        return sum(v.size for _, v, _ in self.named_parameters())

    def batchnorm_layers(self) -> list[BatchNorm]:
        return [layer for _, layer in self._layers if isinstance(layer, BatchNorm)]


class Adam:
    """Adaptive-moment gradient descent over (value, grad) array pairs."""

    def __init__(
        self,
        params: list[tuple[str, np.ndarray, np.ndarray]],
        learning_rate: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.lr = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(v) for _, v, _ in params]
        self._v = [np.zeros_like(v) for _, v, _ in params]

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for (_, value, grad), m, v in zip(self.params, self._m, self._v):
            m[...] = self.beta1 * m + (1.0 - self.beta1) * grad
            v[...] = self.beta2 * v + (1.0 - self.beta2) * grad * grad
            value -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def one_hot(indices: np.ndarray, size: int) -> np.ndarray:
    """Row one-hot encoding of integer labels."""
    indices = np.asarray(indices, dtype=int)
    out = np.zeros((len(indices), size))
    out[np.arange(len(indices)), indices] = 1.0
    return out
